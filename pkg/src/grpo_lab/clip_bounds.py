"""Bounds on the upper-clipping correction versus the raw surrogate signal.

``clip_correction_bound`` bounds E|C_tot^+|, the total change that upper
clipping makes to a rollout's surrogate. ``raw_surrogate_lower_bound`` bounds
E|N_raw| from below. Their quotient measures how little clipping moves the
update. ``mc_clip_estimate`` measures both quantities on a tabular policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .advantage import (
    HyperParams,
    advantages_batch,
    max_abs_advantage,
    tokens_from_uniforms,
)
from .policy import exp_update
from .rng import make_stream

# advantage-magnitude presets for M
M_POPULATION = "population"   # sqrt(G - 1), the exact max under divide-by-G std
M_SAMPLE = "sample"           # sqrt(G) - 1/sqrt(G)


def advantage_bound(G: int, preset: str = M_POPULATION) -> float:
    if preset == M_POPULATION:
        return max_abs_advantage(G)
    if preset == M_SAMPLE:
        return math.sqrt(G) - 1 / math.sqrt(G)
    raise ValueError(f"unknown M preset {preset!r}")


def phi_fn(u):
    """phi(u) = u log u - u + 1 with phi(0) = 1."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0):
        raise ValueError("phi is defined for u >= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        ulogu = np.where(u > 0, u * np.log(np.where(u > 0, u, 1.0)), 0.0)
    out = ulogu - u + 1.0
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ClipBoundInputs:
    params: HyperParams
    activation_rate: float
    mean_abs_advantage: float
    M: float

    def __post_init__(self):
        if not 0 <= self.activation_rate <= 1:
            raise ValueError(f"activation_rate: 0 <= p_+ <= 1 required, got {self.activation_rate}")
        if self.mean_abs_advantage < 0:
            raise ValueError("mean_abs_advantage must be >= 0")
        if self.mean_abs_advantage > self.M + 1e-12:
            raise ValueError(f"mean_abs_advantage {self.mean_abs_advantage} exceeds M={self.M}")

    @property
    def r_max(self) -> float:
        return math.exp(self.params.eta / self.params.pi_min)

    @property
    def phi_r(self) -> float:
        return phi_fn(self.r_max)

    @property
    def delta_plus(self) -> float:
        return max(self.r_max - 1 - self.params.eps, 0.0)


@dataclass(frozen=True)
class ClipBoundReport:
    r_max: float
    phi_r: float
    delta_plus: float
    bound_ctot: float
    lower_nraw: float
    C: float
    ratio: float
    min_branch: str
    small_eta_constants: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["small_eta_constants"] = list(self.small_eta_constants)
        return d


def _min_term(inp: ClipBoundInputs) -> tuple[float, str]:
    sqrt_p = math.sqrt(inp.activation_rate)
    phi_cap = phi_fn(1 + inp.params.eps)
    alt = inp.phi_r / phi_cap
    return (sqrt_p, "sqrt_p") if sqrt_p <= alt else (alt, "phi_ratio")


def clip_correction_bound(inp: ClipBoundInputs, return_branch: bool = False):
    """M sqrt(2 p L R phi(R)) + M L Delta_+ min{sqrt(p), phi(R)/phi(1+eps)}."""
    L = inp.params.L
    m, branch = _min_term(inp)
    first = inp.M * math.sqrt(2 * inp.activation_rate * L * inp.r_max * inp.phi_r)
    value = first + inp.M * L * inp.delta_plus * m
    return (value, branch) if return_branch else value


def raw_constant(pi_min: float) -> float:
    return 1.0 / (8.0 * pi_min**2)


def raw_surrogate_lower_bound(inp: ClipBoundInputs) -> float:
    """L E|A| (1 - C eta^2), C = 1/(8 pi_min^2), floored at zero."""
    C = raw_constant(inp.params.pi_min)
    return max(inp.params.L * inp.mean_abs_advantage * (1 - C * inp.params.eta**2), 0.0)


def signal_ratio(inp: ClipBoundInputs) -> float:
    """Per-token form: E|A|(1 - C eta^2) / (bound / L). +inf when the bound vanishes."""
    L = inp.params.L
    per_token_bound = clip_correction_bound(inp) / L
    num = raw_surrogate_lower_bound(inp) / L
    if per_token_bound == 0:
        return math.inf
    return num / per_token_bound


def small_eta_constants(params: HyperParams, M: float) -> tuple[float, float, float]:
    pm = params.pi_min
    e = math.e
    return (
        M * math.sqrt(2 * e) / pm,
        M * (e - 1) / pm,
        M * (e - 1) / (phi_fn(1 + params.eps) * pm**3),
    )


def small_eta_bound(params: HyperParams, M: float, p: float) -> float:
    """c1 eta sqrt(L) + min{c2 eta sqrt(p) L, c3 eta^3 L}."""
    c1, c2, c3 = small_eta_constants(params, M)
    eta, L = params.eta, params.L
    return c1 * eta * math.sqrt(L) + min(c2 * eta * math.sqrt(p) * L, c3 * eta**3 * L)


def clip_bound_report(inp: ClipBoundInputs) -> ClipBoundReport:
    bound, branch = clip_correction_bound(inp, return_branch=True)
    return ClipBoundReport(
        r_max=inp.r_max,
        phi_r=inp.phi_r,
        delta_plus=inp.delta_plus,
        bound_ctot=bound,
        lower_nraw=raw_surrogate_lower_bound(inp),
        C=raw_constant(inp.params.pi_min),
        ratio=signal_ratio(inp),
        min_branch=branch,
        small_eta_constants=small_eta_constants(inp.params, inp.M),
    )


@dataclass(frozen=True)
class McClipEstimate:
    ctot_abs: float
    ctot_se: float
    nraw_abs: float
    nraw_se: float
    activation_rate: float
    activation_se: float
    mean_abs_advantage: float
    max_ratio: float
    trials: int


def _clip_trial(pi, params: HyperParams, stream) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    G, L, V = params.G, params.L, pi.size
    tokens = tokens_from_uniforms(pi, stream.random((G, L)))
    adv = advantages_batch(stream.integers(0, 2, size=(1, G)))[0]
    sums = np.bincount(tokens.ravel(), weights=np.repeat(adv, L), minlength=V)
    a_tilde = sums / (G * pi)
    r = exp_update(pi, a_tilde, params.eta) / pi
    rt = r[tokens]  # (G, L)
    active = rt > 1 + params.eps
    cap = np.minimum(rt, 1 + params.eps)
    ctot = ((cap - rt) * active).sum(axis=1) * adv
    nraw = rt.sum(axis=1) * adv
    return ctot, nraw, active.mean(axis=1), np.abs(adv), float(r.max())


def mc_clip_estimate(pi, params: HyperParams, trials: int, seed: int) -> McClipEstimate:
    """Monte Carlo E|C_tot^+|, E|N_raw| and p_+ per rollout, with standard errors.

    Trial t uses its own stream keyed by (seed, t) so results do not depend on
    how trials are scheduled.
    """
    pi = np.asarray(pi, dtype=np.float64)
    ct, nr, act, aa = [], [], [], []
    rmax = 0.0
    for t in range(trials):
        c, n, a, absadv, rm = _clip_trial(pi, params, make_stream(seed, t))
        ct.append(np.abs(c))
        nr.append(np.abs(n))
        act.append(a)
        aa.append(absadv)
        rmax = max(rmax, rm)
    ct, nr, act, aa = (np.concatenate(x) for x in (ct, nr, act, aa))

    def se(x):
        return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0

    return McClipEstimate(
        ctot_abs=float(ct.mean()),
        ctot_se=se(ct),
        nraw_abs=float(nr.mean()),
        nraw_se=se(nr),
        activation_rate=float(act.mean()),
        activation_se=se(act),
        mean_abs_advantage=float(aa.mean()),
        max_ratio=rmax,
        trials=trials,
    )
