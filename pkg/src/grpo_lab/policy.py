"""One-step policy updates on the probability simplex.

Policies are plain float64 arrays summing to one. ``exp_update`` is the
unclipped exponentiated (mirror-descent) step; ``clipped_update`` maximizes the
upper-clipped surrogate minus a KL penalty through its KKT system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .advantage import AdvantageGroup, RolloutGroup, TokenAdvantage

NORMALIZATION_TOL = 1e-12
STATIONARITY_TOL = 1e-9
MAX_BISECTION_STEPS = 200
BREAKPOINT_MAX_V = 64

UNCLIPPED, KINK, ABOVE_CAP = 0, 1, 2
BRANCH_NAMES = {UNCLIPPED: "unclipped", KINK: "capped-at-kink", ABOVE_CAP: "above-cap-branch"}


class SolverError(RuntimeError):
    pass


def check_policy(probs, floor: float | None = None, atol: float = 1e-12) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("policy must be a 1-d vector over at least two tokens")
    if np.any(p <= 0):
        raise ValueError("policy must be strictly positive")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"policy sums to {p.sum()!r}, not 1")
    if floor is not None and np.any(p < floor * (1 - 1e-12)):
        raise ValueError(f"policy entry below floor {floor}")
    return p


def two_arm(beta: float) -> np.ndarray:
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    return np.array([beta, 1.0 - beta])


def uniform(V: int) -> np.ndarray:
    return np.full(V, 1.0 / V)


def _values(a_tilde) -> np.ndarray:
    if isinstance(a_tilde, TokenAdvantage):
        return a_tilde.values
    return np.asarray(a_tilde, dtype=np.float64)


def exp_update(pi_old, a_tilde, eta: float) -> np.ndarray:
    """pi_new(a) proportional to pi_old(a) * exp(eta * A'(a)), in log space."""
    pi_old = np.asarray(pi_old, dtype=np.float64)
    logits = np.log(pi_old) + eta * _values(a_tilde)
    if not np.all(np.isfinite(logits)):
        raise OverflowError("update logits are not finite")
    out = np.exp(logits - logsumexp(logits))
    return out / out.sum()


def exp_update_batch(pi_old: np.ndarray, a_tilde: np.ndarray, eta: float) -> np.ndarray:
    """Row-wise ``exp_update`` for (n, V) advantage matrices."""
    logits = np.log(pi_old) + eta * a_tilde
    out = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
    return out / out.sum(axis=-1, keepdims=True)


def importance_ratios(pi_new, pi_old) -> np.ndarray:
    return np.asarray(pi_new, dtype=np.float64) / np.asarray(pi_old, dtype=np.float64)


def signed_advantage_sums(
    rollouts: RolloutGroup, adv: AdvantageGroup, V: int
) -> tuple[np.ndarray, np.ndarray]:
    """S_+(a), S_-(a): positive and negative advantage mass landing on token a."""
    if rollouts.L != 1:
        raise ValueError("clipped surrogate is defined for L = 1 only")
    y = rollouts.tokens[:, 0]
    A = adv.advantages
    s_plus = np.bincount(y, weights=np.maximum(A, 0.0), minlength=V)
    s_minus = np.bincount(y, weights=np.minimum(A, 0.0), minlength=V)
    return s_plus, s_minus


def clipped_surrogate(r, s_plus, s_minus, n: int, eps: float):
    """(1/n) sum_a [S_-(a) r(a) + S_+(a) min(r(a), 1+eps)]; broadcasts over rows of r."""
    r = np.asarray(r, dtype=np.float64)
    return (s_minus * r + s_plus * np.minimum(r, 1.0 + eps)).sum(axis=-1) / n


def surrogate_value(pi, pi_old, rollouts: RolloutGroup, adv: AdvantageGroup, eps: float) -> float:
    pi_old = np.asarray(pi_old, dtype=np.float64)
    s_plus, s_minus = signed_advantage_sums(rollouts, adv, pi_old.size)
    r = importance_ratios(pi, pi_old)
    return float(clipped_surrogate(r, s_plus, s_minus, rollouts.G, eps))


def kl_divergence(p, q):
    """KL(p || q) along the last axis, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    return terms.sum(axis=-1)


def penalized_objective(pi, pi_old, s_plus, s_minus, n: int, eta: float, eps: float):
    """F(pi) = clipped surrogate - KL(pi || pi_old) / eta; rows of ``pi`` evaluated independently."""
    pi = np.asarray(pi, dtype=np.float64)
    r = pi / pi_old
    return clipped_surrogate(r, s_plus, s_minus, n, eps) - kl_divergence(pi, pi_old) / eta


@dataclass(frozen=True)
class KktSolution:
    """Solution of the upper-clipped KL-penalized problem.

    ``branch`` holds integer codes (see ``BRANCH_NAMES``). ``stationarity``
    is the per-token residual of the KKT equation.
    """

    ratios: np.ndarray
    lam: float
    branch: np.ndarray
    xi: np.ndarray
    mu: np.ndarray
    stationarity: np.ndarray
    normalization_error: float
    iterations: int

    @property
    def branch_names(self) -> list[str]:
        return [BRANCH_NAMES[int(b)] for b in self.branch]

    @property
    def any_capped(self) -> bool:
        return bool(np.any(self.branch != UNCLIPPED))


def _log_ratios(kappa, x1, x0, log_cap):
    a = x1 - kappa
    b = x0 - kappa
    return np.where(a <= log_cap, a, np.where(b >= log_cap, b, log_cap))


def _branches(kappa, x1, x0, log_cap):
    a = x1 - kappa
    b = x0 - kappa
    # tokens without positive advantage mass (x1 == x0) are never cut by the cap
    return np.where((a <= log_cap) | (x1 == x0), UNCLIPPED,
                    np.where(b >= log_cap, ABOVE_CAP, KINK))


def _closed_form_kappa(branch, log_pi, pi_old, x1, x0, log_cap):
    """kappa solving the normalization exactly for a fixed active set (nan if infeasible)."""
    x_free = np.where(branch == UNCLIPPED, x1, x0)
    free_lse = logsumexp(
        np.where(branch == KINK, -np.inf, log_pi + x_free), axis=-1, keepdims=True
    )
    kink_mass = np.where(branch == KINK, pi_old, 0.0).sum(axis=-1, keepdims=True)
    residual_mass = 1.0 - np.exp(log_cap) * kink_mass
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = free_lse - np.log(residual_mass)
    return np.where((residual_mass > 0) & np.isfinite(kappa), kappa, np.nan)


def _breakpoint_kappa(log_pi, pi_old, x1, x0, log_cap):
    """Exact root by scanning the 2|V| kinks of the piecewise-smooth normalization.

    Between consecutive breakpoints every token keeps its branch, so the root is
    the closed-form kappa of the interval where the normalization crosses one.
    """
    m, V = x1.shape
    bp = np.sort(np.concatenate([x1 - log_cap, x0 - log_cap], axis=-1), axis=-1)  # (m, 2V)
    f = logsumexp(
        log_pi[:, None, :] + _log_ratios(bp[:, :, None], x1[:, None, :], x0[:, None, :],
                                         log_cap[:, None] if np.ndim(log_cap) else log_cap),
        axis=-1,
    )  # non-increasing along breakpoints
    j = (f >= 0).sum(axis=-1)  # root lies in (bp[j-1], bp[j])
    rows = np.arange(m)
    left = np.where(j > 0, bp[rows, np.maximum(j - 1, 0)], bp[:, 0] - 1.0)
    right = np.where(j < 2 * V, bp[rows, np.minimum(j, 2 * V - 1)], bp[:, -1] + 1.0)
    probe = (0.5 * (left + right))[:, None]
    branch = _branches(probe, x1, x0, log_cap)
    kappa = _closed_form_kappa(branch, log_pi, pi_old, x1, x0, log_cap)
    return np.clip(kappa, left[:, None], right[:, None])


def solve_capped_kkt_batch(pi_old, s_plus, s_minus, n, eta, eps):
    """Vectorized KKT solve over rows.

    All array arguments are (m, V) (or broadcastable); ``n`` is the rollout
    count used in the 1/n normalization. With kappa = eta*lambda + 1 each ratio
    is a continuous non-increasing function of kappa. Small vocabularies are
    solved exactly by a breakpoint scan; otherwise the normalization
    sum_a pi_old(a) r(a) is bisected in kappa between min x0 and max x1 and
    kappa is re-solved in closed form on the identified active set. Rows whose
    scan result is inconsistent also fall back to bisection.

    Returns (log_ratios, kappa, branch, iterations).
    """
    pi_old, s_plus, s_minus = np.broadcast_arrays(
        *(np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (pi_old, s_plus, s_minus))
    )
    eta = np.asarray(eta, dtype=np.float64).reshape(-1, 1) if np.ndim(eta) else float(eta)
    eps = np.asarray(eps, dtype=np.float64).reshape(-1, 1) if np.ndim(eps) else float(eps)
    n = np.asarray(n, dtype=np.float64).reshape(-1, 1) if np.ndim(n) else float(n)

    log_pi = np.log(pi_old)
    scale = eta / (n * pi_old)
    x1 = scale * (s_minus + s_plus)
    x0 = scale * s_minus
    log_cap = np.log1p(eps)

    lo = x0.min(axis=-1, keepdims=True)
    hi = x1.max(axis=-1, keepdims=True)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise SolverError("no finite bracket for the normalization multiplier")

    def norm_log(kappa):
        return logsumexp(log_pi + _log_ratios(kappa, x1, x0, log_cap), axis=-1, keepdims=True)

    iterations = 0
    if pi_old.shape[-1] <= BREAKPOINT_MAX_V:
        kappa = _breakpoint_kappa(log_pi, pi_old, x1, x0, log_cap)
        bad = ~np.isfinite(kappa) | (np.abs(norm_log(np.nan_to_num(kappa))) > NORMALIZATION_TOL)
        if not np.any(bad):
            branch = _branches(kappa, x1, x0, log_cap)
            return _log_ratios(kappa, x1, x0, log_cap), kappa[:, 0], branch, iterations
    else:
        kappa = np.full_like(lo, np.nan)
        bad = np.ones_like(lo, dtype=bool)

    for iterations in range(1, MAX_BISECTION_STEPS + 1):
        mid = 0.5 * (lo + hi)
        above = norm_log(mid) > 0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.all((hi - lo) <= 4 * np.spacing(np.maximum(np.abs(lo), np.abs(hi)))):
            break
    kappa_bis = 0.5 * (lo + hi)

    # closed-form kappa on the active set found by bisection
    branch = _branches(kappa_bis, x1, x0, log_cap)
    kappa_exact = _closed_form_kappa(branch, log_pi, pi_old, x1, x0, log_cap)
    ok = np.isfinite(kappa_exact)
    ok &= np.all(_branches(np.where(ok, kappa_exact, kappa_bis), x1, x0, log_cap) == branch,
                 axis=-1, keepdims=True)
    kappa_bis = np.where(ok, kappa_exact, kappa_bis)
    kappa = np.where(bad, kappa_bis, kappa)
    branch = _branches(kappa, x1, x0, log_cap)
    log_r = _log_ratios(kappa, x1, x0, log_cap)
    return log_r, kappa[:, 0], branch, iterations


def _kkt_report(pi_old, s_plus, s_minus, n, eta, eps, log_r, kappa, branch, iterations):
    r = np.exp(log_r)
    # xi from stationarity on kink tokens: (S_- + S_+ xi)/n = (pi/eta)(log r + kappa)
    target = pi_old / eta * (log_r + kappa) * n
    with np.errstate(divide="ignore", invalid="ignore"):
        xi_kink = np.where(s_plus > 0, (target - s_minus) / s_plus, 0.0)
    xi = np.where(branch == UNCLIPPED, 1.0, np.where(branch == ABOVE_CAP, 0.0,
                                                       np.clip(xi_kink, 0.0, 1.0)))
    mu = np.zeros_like(r)
    stationarity = (s_minus + s_plus * xi) / n - pi_old / eta * (log_r + kappa) + mu
    norm_err = abs(math.fsum((pi_old * r).tolist()) - 1.0)
    return KktSolution(
        ratios=r,
        lam=(kappa - 1.0) / eta,
        branch=branch.astype(np.int8),
        xi=xi,
        mu=mu,
        stationarity=np.abs(stationarity),
        normalization_error=norm_err,
        iterations=iterations,
    )


def clipped_update(
    pi_old, rollouts: RolloutGroup, adv: AdvantageGroup, eta: float, eps: float
) -> tuple[np.ndarray, KktSolution]:
    """Maximizer of the upper-clipped surrogate minus KL(pi || pi_old)/eta.

    Lower clipping is not modeled. Raises ``SolverError`` if the normalization
    cannot be met to 1e-12.
    """
    pi_old = np.asarray(pi_old, dtype=np.float64)
    if np.any(pi_old <= 0):
        raise ValueError("pi_old must be strictly positive")
    s_plus, s_minus = signed_advantage_sums(rollouts, adv, pi_old.size)
    return clipped_update_from_sums(pi_old, s_plus, s_minus, rollouts.G, eta, eps)


def clipped_update_from_sums(pi_old, s_plus, s_minus, n, eta, eps):
    log_r, kappa, branch, iters = solve_capped_kkt_batch(pi_old, s_plus, s_minus, n, eta, eps)
    sol = _kkt_report(pi_old, s_plus, s_minus, n, eta, eps, log_r[0], kappa[0], branch[0], iters)
    if sol.normalization_error > NORMALIZATION_TOL:
        raise SolverError(
            f"normalization error {sol.normalization_error:.3e} after {iters} bisection steps"
        )
    pi_new = pi_old * sol.ratios
    return pi_new / pi_new.sum(), sol


@dataclass(frozen=True)
class LogRatioReport:
    residual: np.ndarray
    bound: float
    mean: float
    variance: float

    @property
    def max_residual(self) -> float:
        return float(self.residual.max())

    @property
    def holds(self) -> bool:
        return bool(np.all(self.residual <= self.bound))


def log_ratio_constant(pi_min: float) -> float:
    return 1.0 / (36.0 * math.sqrt(3.0) * pi_min**3)


def log_ratio_residual(
    pi_old, a_tilde, eta: float, pi_min: float | None = None, standardized: bool = False
) -> LogRatioReport:
    """Residual of the second-order expansion of log importance ratios.

    The residual |log r(a) - eta (A'(a) - mu) + eta^2 sigma^2 / 2| is compared
    with C eta^3, C = 1/(36 sqrt(3) pi_min^3). mu and sigma^2 are the mean and
    variance of A' under pi_old, or 0 and 1 when ``standardized``.
    """
    pi_old = np.asarray(pi_old, dtype=np.float64)
    values = _values(a_tilde)
    pi_min = float(pi_old.min()) if pi_min is None else pi_min
    if standardized:
        mu, var = 0.0, 1.0
    else:
        mu = float(np.dot(pi_old, values))
        var = float(np.dot(pi_old, (values - mu) ** 2))
    pi_new = exp_update(pi_old, values, eta)
    log_r = np.log(pi_new) - np.log(pi_old)
    residual = np.abs(log_r - eta * (values - mu) + 0.5 * eta**2 * var)
    return LogRatioReport(residual, log_ratio_constant(pi_min) * eta**3, mu, var)
