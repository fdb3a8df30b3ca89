"""Entropy, the skewness functional and one-step entropy-change predictions.

Predictions are checked against exact oracles that enumerate every rollout
assignment together with every reward vector.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .advantage import (
    HyperParams,
    advantages_batch,
    cached_moment,
    advantage_pair_moment_oracle,
    enumerate_reward_vectors,
)
from .policy import NORMALIZATION_TOL, SolverError, exp_update_batch, solve_capped_kkt_batch

ORACLE_BUDGET = 2**26
_CHUNK = 1 << 14


def entropy(pi) -> float:
    """Shannon entropy in nats."""
    p = np.asarray(pi, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def entropy_rows(pi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(pi > 0, pi * np.log(pi), 0.0)
    return -t.sum(axis=-1)


def skewness_phi(pi) -> float:
    """Phi(pi) = |V| - 1 + sum log pi - |V| sum pi log pi."""
    p = np.asarray(pi, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("skewness_phi needs a strictly positive policy")
    V = p.size
    logp = np.log(p)
    return float(V - 1 + math.fsum(logp.tolist()) - V * math.fsum((p * logp).tolist()))


def two_arm_phi(beta: float) -> float:
    return 1.0 + (1.0 - 2.0 * beta) * math.log(beta / (1.0 - beta))


def c_G(G: int) -> float:
    return (1.0 - 2.0 ** (1 - G)) / (2.0 * G)


def second_moment(G: int) -> float:
    """E[A^2] = 1 - 2^(1-G)."""
    return 1.0 - 2.0 ** (1 - G)


# ---------------------------------------------------------------- moments of A'


@dataclass(frozen=True)
class AtildeMoments:
    E_var: float
    E_cov_log: float
    E_fourth_bound: float
    S1: float
    S2: float
    E_fourth_exact: float | None = None


def floor_sums(V: int, pi_min: float) -> tuple[float, float]:
    """S1, S2: worst-case sums of 1/pi and 1/pi^2 over a floored policy."""
    rest = 1.0 - (V - 1) * pi_min
    if rest <= 0:
        raise ValueError("pi_min * (|V| - 1) must be < 1")
    return (V - 1) / pi_min + 1.0 / rest, (V - 1) / pi_min**2 + 1.0 / rest**2


def fourth_moment_formula(G: int, V: int, S1: float, S2: float) -> float:
    """E[sum_a pi(a) A'(a)^4] written through S1 = sum 1/pi and S2 = sum 1/pi^2."""
    a4 = cached_moment(G, 4)
    a22 = advantage_pair_moment_oracle(G)
    g3 = float(G) ** 3
    return a4 / g3 * (S2 - 7 * S1 + 12 * V - 6) + 3 * (a4 + (G - 1) * a22) / g3 * (S1 - 2 * V + 1)


def atilde_moment_formulas(params: HyperParams, pi) -> AtildeMoments:
    """Closed-form moments of the token advantage under random rewards (L = 1)."""
    p = np.asarray(pi, dtype=np.float64)
    G, V = params.G, p.size
    m2 = second_moment(G)
    logp = np.log(p)
    cov = m2 / G * (math.fsum(logp.tolist()) - V * math.fsum((p * logp).tolist()))
    S1, S2 = floor_sums(V, params.pi_min)
    exact = fourth_moment_formula(G, V, float(np.sum(1 / p)), float(np.sum(1 / p**2)))
    return AtildeMoments(
        E_var=m2 * (V - 1) / G,
        E_cov_log=cov,
        E_fourth_bound=fourth_moment_formula(G, V, S1, S2),
        S1=S1,
        S2=S2,
        E_fourth_exact=exact,
    )


# ------------------------------------------------------------ remainder bounds

FourthMoment = float | Callable[[float], float]


def remainder_constant(
    pi: float, pi_min: float, eta: float, fourth_moment: FourthMoment, convention: str = "floor"
) -> float:
    """Fourth-order remainder C(pi) of the entropy expansion.

    ``convention="floor"``: exp(eta/(2 pi))/24 (192 + 176 log(1/pi_min) + 176 eta/pi) m4 eta^4.
    ``convention="local"``: log(1/pi) in place of log(1/pi_min) and 176 eta/(2 pi)
    as the last term, which is smaller whenever pi > pi_min.
    A callable ``fourth_moment`` is evaluated at pi (the floor on the good event).
    """
    if eta == 0:
        return 0.0
    m4 = fourth_moment(pi) if callable(fourth_moment) else fourth_moment
    if convention == "floor":
        bracket = 192 + 176 * math.log(1 / pi_min) + 176 * eta / pi
    elif convention == "local":
        bracket = 192 + 176 * math.log(1 / pi) + 176 * eta / (2 * pi)
    else:
        raise ValueError(f"unknown convention {convention!r}")
    return math.exp(eta / (2 * pi)) / 24 * bracket * m4 * eta**4


def remainder_bound(
    pi_hat: float,
    pi_min: float,
    eta: float,
    fourth_moment: FourthMoment,
    collision_prob: float | None = None,
    convention: str = "floor",
) -> float:
    """Remainder budget; with a collision probability q the mixed form
    (1 - q) C(pi_hat) + q C(pi_min) is returned."""
    if not pi_min <= pi_hat < 1:
        raise ValueError("need pi_min <= pi_hat < 1")
    c_hat = remainder_constant(pi_hat, pi_min, eta, fourth_moment, convention)
    if collision_prob is None:
        return c_hat
    q = float(collision_prob)
    if not 0 <= q <= 1:
        raise ValueError("collision probability must lie in [0, 1]")
    return (1 - q) * c_hat + q * remainder_constant(pi_min, pi_min, eta, fourth_moment, convention)


def floor_fourth_moment(G: int, V: int) -> Callable[[float], float]:
    """m4 as a function of the floor used for S1 and S2."""
    return lambda floor: fourth_moment_formula(G, V, *floor_sums(V, floor))


def collision_bound(G: int, V: int, pi_hat: float) -> float:
    """Union bound C(G,2) |V| pi_hat^2 on two rollouts sharing a token of mass <= pi_hat."""
    return math.comb(G, 2) * V * pi_hat**2


def mc_collision_frequency(pi, G: int, pi_hat: float, trials: int, stream) -> float:
    """Fraction of groups in which two rollouts share a token with pi <= pi_hat."""
    p = np.asarray(pi, dtype=np.float64)
    small = p <= pi_hat
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    draws = np.minimum(np.searchsorted(cdf, stream.random((trials, G)), side="right"), p.size - 1)
    hits = 0
    for row in draws:
        toks = row[small[row]]
        hits += toks.size != np.unique(toks).size
    return hits / trials


@dataclass(frozen=True)
class CapInactiveReport:
    holds: bool
    lhs: float
    rhs: float

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs


def cap_inactive_predicate(params: HyperParams) -> CapInactiveReport:
    """(1+eps) eta / 2 < (M0 - sqrt(eta (1+eps)) / 2) log(1+eps), M0 = (|V| - G) pi_min."""
    cap = 1 + params.eps
    m0 = (params.V - params.G) * params.pi_min
    lhs = cap * params.eta / 2
    rhs = (m0 - math.sqrt(params.eta * cap) / 2) * math.log(cap)
    return CapInactiveReport(lhs < rhs, lhs, rhs)


# ------------------------------------------------------ prediction evaluators


@dataclass(frozen=True)
class EntropyStepReport:
    delta_measured: float | None
    delta_predicted_leading: float
    remainder_budget: float
    clipped_extra_term: float | None = None

    @property
    def within_budget(self) -> bool | None:
        if self.delta_measured is None:
            return None
        gap = abs(self.delta_measured - self.delta_predicted_leading)
        return gap <= self.remainder_budget + abs(self.clipped_extra_term or 0.0)


def predicted_entropy_step_unclipped(
    pi, params: HyperParams, measured: float | None = None, convention: str = "floor"
) -> EntropyStepReport:
    """Leading term -c_G Phi eta^2 plus the remainder budget at the policy's smallest entry."""
    if params.L != 1:
        raise ValueError("entropy-step prediction requires L = 1")
    p = np.asarray(pi, dtype=np.float64)
    lead = -c_G(params.G) * skewness_phi(p) * params.eta**2
    pi_hat = max(float(p.min()), params.pi_min)
    budget = remainder_bound(
        pi_hat, params.pi_min, params.eta, floor_fourth_moment(params.G, p.size),
        convention=convention,
    )
    return EntropyStepReport(measured, lead, budget)


@dataclass(frozen=True)
class ClippedEntropyParams:
    """Measured clip statistics: rho = P(A > 0, r > 1+eps), delta = mean overshoot; p is a threshold."""

    rho: float
    delta: float
    p: float

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass(frozen=True)
class ClippedEntropyConstants:
    x_max: float
    m_p: float
    delta_eff: float
    c_p: float
    clipped_term: float


def clipped_entropy_constants(params: HyperParams, cp: ClippedEntropyParams) -> ClippedEntropyConstants:
    eta, eps, pmin, G = params.eta, params.eps, params.pi_min, params.G
    if not pmin < cp.p < 1:
        raise ValueError(f"threshold p must lie in (pi_min, 1), got {cp.p}")
    x_max = math.exp(eta / (2 * pmin)) - (1 + eps)
    m_p = max(math.exp(eta / (2 * cp.p)) - (1 + eps), 0.0)
    delta_eff = x_max * max(cp.delta - m_p, 0.0) / (x_max - m_p)
    log_arg = math.log(cp.p) + eta / (2 * pmin)
    c_p = -pmin * max(-log_arg, 0.0)
    term = c_p * G * (cp.rho * delta_eff - x_max / 2 * (G - 1) * cp.p)
    return ClippedEntropyConstants(x_max, m_p, delta_eff, c_p, term)


@dataclass(frozen=True)
class ClippedBoundReport:
    leading: float
    remainder: float
    constants: ClippedEntropyConstants

    @property
    def total(self) -> float:
        return self.leading + self.remainder + self.constants.clipped_term


def predicted_entropy_step_clipped_bound(
    pi,
    params: HyperParams,
    cp: ClippedEntropyParams,
    phi: float | None = None,
    pi_hat: float | None = None,
    convention: str = "floor",
) -> ClippedBoundReport:
    """Upper bound on the expected clipped entropy change.

    ``phi`` overrides Phi(pi) (e.g. a worst case over the floored simplex);
    ``pi_hat`` selects the mixed remainder with the collision bound at pi_hat.
    """
    phi_val = skewness_phi(pi) if phi is None else float(phi)
    V = params.V if pi is None else np.asarray(pi).size
    lead = -c_G(params.G) * phi_val * params.eta**2
    m4 = floor_fourth_moment(params.G, V)
    if pi_hat is None:
        rem = remainder_bound(params.pi_min, params.pi_min, params.eta, m4, convention=convention)
    else:
        q = min(collision_bound(params.G, V, pi_hat), 1.0)
        rem = remainder_bound(pi_hat, params.pi_min, params.eta, m4, q, convention)
    return ClippedBoundReport(lead, rem, clipped_entropy_constants(params, cp))


# ------------------------------------------------------------ exact oracles


def _check_oracle_budget(V: int, G: int):
    if V**G * 2**G > ORACLE_BUDGET:
        raise ValueError(f"|V|^G 2^G = {V**G * 2**G} exceeds oracle budget {ORACLE_BUDGET}")


def enumerate_rollouts(V: int, G: int, start: int, stop: int) -> np.ndarray:
    codes = np.arange(start, stop, dtype=np.int64)
    powers = V ** np.arange(G, dtype=np.int64)
    return (codes[:, None] // powers) % V


def _oracle_chunk(pi, log_pi, adv, sp, sm, G, eta, eps, mode, start, stop):
    V = pi.size
    Y = enumerate_rollouts(V, G, start, stop)
    w_y = np.exp(log_pi[Y].sum(axis=1))
    onehot = (Y[:, :, None] == np.arange(V)).astype(np.float64)  # (ny, G, V)
    h0 = entropy(pi)
    n_r = adv.shape[0]
    if mode == "unclipped":
        at = np.einsum("ygv,kg->ykv", onehot, adv) / (G * pi)
        new = exp_update_batch(pi, at.reshape(-1, V), eta)
    else:
        s_plus = np.einsum("ygv,kg->ykv", onehot, sp).reshape(-1, V)
        s_minus = np.einsum("ygv,kg->ykv", onehot, sm).reshape(-1, V)
        pi_rows = np.broadcast_to(pi, s_plus.shape)
        log_r, _, _, _ = solve_capped_kkt_batch(pi_rows, s_plus, s_minus, G, eta, eps)
        new = pi * np.exp(log_r)
        err = np.abs(new.sum(axis=1) - 1.0).max()
        if err > 1e2 * NORMALIZATION_TOL:
            raise SolverError(f"oracle batch normalization error {err:.2e}")
        new /= new.sum(axis=1, keepdims=True)
    dh = (entropy_rows(new) - h0).reshape(-1, n_r)
    terms = (w_y[:, None] * dh).ravel() / 2.0**G
    return math.fsum(terms.tolist())


def exact_entropy_step_oracle(
    pi, params: HyperParams, mode: str = "unclipped", threads: int = 1
) -> float:
    """Exact E[H(pi_new) - H(pi_old)] over all rollout assignments and reward vectors."""
    if mode not in ("unclipped", "clipped"):
        raise ValueError(f"mode must be 'unclipped' or 'clipped', got {mode!r}")
    if params.L != 1:
        raise ValueError("oracle requires L = 1")
    pi = np.asarray(pi, dtype=np.float64)
    G, V = params.G, pi.size
    _check_oracle_budget(V, G)
    if params.eta == 0:
        return 0.0
    adv = advantages_batch(enumerate_reward_vectors(G))
    sp, sm = np.maximum(adv, 0.0), np.minimum(adv, 0.0)
    log_pi = np.log(pi)
    total = V**G
    rows = max(1, _CHUNK // adv.shape[0])
    bounds = [(s, min(s + rows, total)) for s in range(0, total, rows)]

    def job(b):
        return _oracle_chunk(pi, log_pi, adv, sp, sm, G, params.eta, params.eps, mode, *b)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]
    return math.fsum(parts)


def entropy_step_report(pi, params: HyperParams, threads: int = 1) -> EntropyStepReport:
    measured = exact_entropy_step_oracle(pi, params, "unclipped", threads)
    return predicted_entropy_step_unclipped(pi, params, measured)


def covariance_term_check(pi, params: HyperParams) -> float:
    """Exact E[Cov over the group of (log pi_old(y_i), A_i)] under random rewards.

    The group covariance is (1/G) sum_i log pi(y_i) A_i - mean(log pi(y)) mean(A),
    enumerated jointly over rollouts and reward vectors.
    """
    pi = np.asarray(pi, dtype=np.float64)
    G, V = params.G, pi.size
    _check_oracle_budget(V, G)
    adv = advantages_batch(enumerate_reward_vectors(G))  # (2^G, G)
    adv_mean = adv.mean(axis=1)
    log_pi = np.log(pi)
    total = V**G
    rows = max(1, (1 << 20) // adv.shape[0])
    parts = []
    for start in range(0, total, rows):
        Y = enumerate_rollouts(V, G, start, min(start + rows, total))
        L = log_pi[Y]
        w = np.exp(L.sum(axis=1))
        cov = (L @ adv.T) / G - L.mean(axis=1)[:, None] * adv_mean[None, :]
        parts.append(math.fsum((w[:, None] * cov).ravel().tolist()))
    return math.fsum(parts) / 2.0**G


def mc_covariance_term(pi, G: int, trials: int, stream) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the group covariance term."""
    pi = np.asarray(pi, dtype=np.float64)
    cdf = np.cumsum(pi)
    cdf[-1] = 1.0
    Y = np.minimum(np.searchsorted(cdf, stream.random((trials, G)), side="right"), pi.size - 1)
    adv = advantages_batch(stream.integers(0, 2, size=(trials, G)))
    L = np.log(pi)[Y]
    cov = (L * adv).mean(axis=1) - L.mean(axis=1) * adv.mean(axis=1)
    return float(cov.mean()), float(cov.std(ddof=1) / math.sqrt(trials))


def mc_atilde_variance(pi, G: int, trials: int, stream) -> tuple[float, float]:
    """Monte Carlo mean and standard error of Var_pi(A') with L = 1."""
    pi = np.asarray(pi, dtype=np.float64)
    V = pi.size
    cdf = np.cumsum(pi)
    cdf[-1] = 1.0
    Y = np.minimum(np.searchsorted(cdf, stream.random((trials, G)), side="right"), V - 1)
    adv = advantages_batch(stream.integers(0, 2, size=(trials, G)))
    sums = np.zeros((trials, V))
    np.add.at(sums, (np.repeat(np.arange(trials), G), Y.ravel()), adv.ravel())
    at = sums / (G * pi)
    mean = at @ pi
    var = (at**2) @ pi - mean**2
    return float(var.mean()), float(var.std(ddof=1) / math.sqrt(trials))
