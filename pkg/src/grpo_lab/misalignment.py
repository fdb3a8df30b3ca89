"""Advantage mass lost to mislabeled rewards.

A group has n_c correct and n_i incorrect rollouts. Under random rewards,
f ~ Bin(n_i, 1/2) incorrect rollouts are rewarded and g ~ Bin(n_c, 1/2)
correct rollouts are not. The damage is

    Delta(f, g) = (n_c f + n_i g) / G.

Everything here is computed exactly with ``fractions.Fraction`` over the
(n_i + 1) x (n_c + 1) binomial cells. ``reward_vector_oracle`` repeats the
computation from raw reward vectors as an independent check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .advantage import ENUMERATION_MAX_G, enumerate_reward_vectors

CELL_MAX = 30
SCAN_MAX_G = 60


@dataclass(frozen=True)
class MisalignConfig:
    n_c: int
    n_i: int

    def __post_init__(self):
        if self.n_c < 1 or self.n_i < 1:
            raise ValueError(f"n_c >= 1 and n_i >= 1 required, got ({self.n_c}, {self.n_i})")

    @property
    def G(self) -> int:
        return self.n_c + self.n_i


@dataclass(frozen=True)
class DamageStats:
    mean: float
    variance: float
    e_delta_f_gt_g: float | None = None
    e_delta_g_gt_f: float | None = None
    p_f_gt_g: float | None = None
    p_g_gt_f: float | None = None
    var_given_f_gt_g: float | None = None
    var_given_g_gt_f: float | None = None


def damage(f: int, g: int, cfg: MisalignConfig) -> float:
    if not (0 <= f <= cfg.n_i and 0 <= g <= cfg.n_c):
        raise ValueError(f"need 0 <= f <= {cfg.n_i} and 0 <= g <= {cfg.n_c}, got f={f}, g={g}")
    return (cfg.n_c * f + cfg.n_i * g) / cfg.G


def _damage_exact(f: int, g: int, cfg: MisalignConfig) -> Fraction:
    return Fraction(cfg.n_c * f + cfg.n_i * g, cfg.G)


def _cells(cfg: MisalignConfig, limit: int = CELL_MAX):
    if cfg.n_c > limit or cfg.n_i > limit:
        raise ValueError(f"cell enumeration limited to n_c, n_i <= {limit}")
    denom = 2**cfg.G
    for f in range(cfg.n_i + 1):
        wf = math.comb(cfg.n_i, f)
        for g in range(cfg.n_c + 1):
            yield f, g, Fraction(wf * math.comb(cfg.n_c, g), denom)


def _moments(weighted) -> tuple[Fraction, Fraction, Fraction]:
    """(probability, mean, variance) of an event from (weight, value) pairs."""
    p = sum((w for w, _ in weighted), Fraction(0))
    if p == 0:
        return p, Fraction(0), Fraction(0)
    m1 = sum((w * d for w, d in weighted), Fraction(0)) / p
    m2 = sum((w * d * d for w, d in weighted), Fraction(0)) / p
    return p, m1, m2 - m1 * m1


def damage_moments(cfg: MisalignConfig, method: str = "closed_form") -> DamageStats:
    if method == "closed_form":
        G, nc = cfg.G, cfg.n_c
        return DamageStats(mean=nc * (G - nc) / G, variance=nc * (G - nc) / (4 * G))
    if method == "oracle":
        cells = [(w, _damage_exact(f, g, cfg)) for f, g, w in _cells(cfg)]
        _, m, v = _moments(cells)
        return DamageStats(mean=float(m), variance=float(v))
    raise ValueError(f"method must be 'closed_form' or 'oracle', got {method!r}")


def conditional_damage_exact(cfg: MisalignConfig, limit: int = CELL_MAX) -> dict[str, Fraction]:
    cells = list(_cells(cfg, limit))
    all_ = [(w, _damage_exact(f, g, cfg)) for f, g, w in cells]
    fg = [(w, _damage_exact(f, g, cfg)) for f, g, w in cells if f > g]
    gf = [(w, _damage_exact(f, g, cfg)) for f, g, w in cells if g > f]
    _, mean, var = _moments(all_)
    p_fg, m_fg, v_fg = _moments(fg)
    p_gf, m_gf, v_gf = _moments(gf)
    return {
        "mean": mean,
        "variance": var,
        "e_delta_f_gt_g": p_fg * m_fg,
        "e_delta_g_gt_f": p_gf * m_gf,
        "p_f_gt_g": p_fg,
        "p_g_gt_f": p_gf,
        "mean_given_f_gt_g": m_fg,
        "mean_given_g_gt_f": m_gf,
        "var_given_f_gt_g": v_fg,
        "var_given_g_gt_f": v_gf,
    }


def conditional_damage(cfg: MisalignConfig, check: bool = True) -> DamageStats:
    """Exact split of the damage by the sign of f - g (ties belong to neither side).

    With ``check`` and n_c > n_i, raises ``AssertionError`` unless
    E[Delta 1{f>g}] <= E[Delta 1{g>f}] and Var(Delta | f>g) < Var(Delta | g>f).
    """
    x = conditional_damage_exact(cfg)
    if check and cfg.n_c > cfg.n_i:
        if not x["e_delta_f_gt_g"] <= x["e_delta_g_gt_f"]:
            raise AssertionError(f"E[Delta 1{{f>g}}] > E[Delta 1{{g>f}}] at {cfg}")
        if not x["var_given_f_gt_g"] < x["var_given_g_gt_f"]:
            raise AssertionError(f"Var(Delta | f>g) >= Var(Delta | g>f) at {cfg}")
    return DamageStats(**{k: float(x[k]) for k in DamageStats.__dataclass_fields__})


def variance_given_total(cfg: MisalignConfig, z: int) -> Fraction:
    """Var(Delta | T = z) where T = f + n_c - g is the number of rewarded rollouts.

    Given T, f is hypergeometric, which yields n_i (G - n_i)/(G - 1) z (G - z)/G^2.
    """
    G = cfg.G
    if not 0 <= z <= G:
        raise ValueError("z must lie in [0, G]")
    return Fraction(cfg.n_i * (G - cfg.n_i) * z * (G - z), (G - 1) * G * G)


def conditional_variance_formula(cfg: MisalignConfig) -> tuple[Fraction, Fraction]:
    """Var(Delta | f>g), Var(Delta | g>f) from the total-reward decomposition.

    E[Delta | T] is the constant n_i n_c / G, so each conditional variance is
    the average of Var(Delta | T) over T > n_c (resp. T < n_c).
    """
    G = cfg.G
    w = [Fraction(math.comb(G, z), 2**G) for z in range(G + 1)]

    def avg(zs):
        p = sum((w[z] for z in zs), Fraction(0))
        return sum((w[z] * variance_given_total(cfg, z) for z in zs), Fraction(0)) / p

    return avg(range(cfg.n_c + 1, G + 1)), avg(range(0, cfg.n_c))


def fraction_monotonicity_scan(G: int) -> list[tuple[int, float]]:
    """E[Delta 1{f>g}] / E[Delta] for n_c in [ceil(G/2), G-1].

    The ratio equals P(Bin(G, 1/2) > n_c). Raises ``AssertionError`` if the
    sequence is not strictly decreasing.
    """
    if not 2 <= G <= SCAN_MAX_G:
        raise ValueError(f"G must lie in [2, {SCAN_MAX_G}]")
    rows = []
    for nc in range(math.ceil(G / 2), G):
        x = conditional_damage_exact(MisalignConfig(nc, G - nc), limit=SCAN_MAX_G)
        rows.append((nc, x["e_delta_f_gt_g"] / x["mean"]))
    for (_, a), (_, b) in zip(rows, rows[1:]):
        if not b < a:
            raise AssertionError(f"fraction not strictly decreasing for G={G}")
    return [(nc, float(fr)) for nc, fr in rows]


STATISTICS = (
    "mean",
    "variance",
    "e_delta_f_gt_g",
    "e_delta_g_gt_f",
    "p_f_gt_g",
    "p_g_gt_f",
    "mean_given_f_gt_g",
    "mean_given_g_gt_f",
    "var_given_f_gt_g",
    "var_given_g_gt_f",
)


def reward_vector_counts(cfg: MisalignConfig):
    """(f, g, G*Delta) for every one of the 2^G reward vectors.

    The first n_c positions are the correct rollouts.
    """
    if cfg.G > ENUMERATION_MAX_G:
        raise ValueError(f"G={cfg.G} exceeds enumeration budget {ENUMERATION_MAX_G}")
    r = enumerate_reward_vectors(cfg.G).astype(np.int64)
    g = cfg.n_c - r[:, : cfg.n_c].sum(axis=1)
    f = r[:, cfg.n_c :].sum(axis=1)
    return f, g, cfg.n_c * f + cfg.n_i * g


def reward_vector_oracle(cfg: MisalignConfig, statistic: str) -> float:
    """Brute force over all 2^G reward vectors, each of weight 2^-G.

    Sums are taken in integers (G * Delta is integral), then converted.
    """
    if statistic not in STATISTICS:
        raise ValueError(f"unknown statistic {statistic!r}; choose from {STATISTICS}")
    f, g, gd = reward_vector_counts(cfg)
    n = f.size
    G = cfg.G

    def event_stats(mask):
        cnt = int(mask.sum())
        s1 = int(gd[mask].sum())
        s2 = int((gd[mask] ** 2).sum())
        return cnt, s1, s2

    def cond(mask):
        cnt, s1, s2 = event_stats(mask)
        m = Fraction(s1, cnt * G)
        return Fraction(cnt, n), m, Fraction(s2, cnt * G * G) - m * m

    everything = np.ones(n, dtype=bool)
    p_all, m_all, v_all = cond(everything)
    p_fg, m_fg, v_fg = cond(f > g)
    p_gf, m_gf, v_gf = cond(g > f)
    values = {
        "mean": m_all,
        "variance": v_all,
        "e_delta_f_gt_g": p_fg * m_fg,
        "e_delta_g_gt_f": p_gf * m_gf,
        "p_f_gt_g": p_fg,
        "p_g_gt_f": p_gf,
        "mean_given_f_gt_g": m_fg,
        "mean_given_g_gt_f": m_gf,
        "var_given_f_gt_g": v_fg,
        "var_given_g_gt_f": v_gf,
    }
    return float(values[statistic])


def variance_given_total_oracle(cfg: MisalignConfig, z: int) -> float:
    """Var(Delta | T = z) computed directly from reward vectors."""
    f, g, gd = reward_vector_counts(cfg)
    mask = (f + cfg.n_c - g) == z
    vals = gd[mask]
    m = Fraction(int(vals.sum()), vals.size * cfg.G)
    return float(Fraction(int((vals**2).sum()), vals.size * cfg.G**2) - m * m)
