"""Oracle-versus-formula check suites behind ``grpo-lab verify``."""

from __future__ import annotations

import math
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import advantage as adv_mod
from .advantage import (
    HyperParams,
    RolloutGroup,
    advantage_moment_oracle,
    advantages_batch,
    compute_advantages,
    enumerate_reward_vectors,
    mean_abs_advantage_closed_form,
    token_advantage,
)
from .clip_bounds import (
    ClipBoundInputs,
    advantage_bound,
    clip_bound_report,
    clip_correction_bound,
    mc_clip_estimate,
    phi_fn,
    raw_surrogate_lower_bound,
    small_eta_bound,
)
from .entropy import (
    ClippedEntropyParams,
    c_G,
    cap_inactive_predicate,
    collision_bound,
    covariance_term_check,
    exact_entropy_step_oracle,
    predicted_entropy_step_clipped_bound,
    skewness_phi,
    two_arm_phi,
)
from .misalignment import (
    MisalignConfig,
    conditional_damage_exact,
    conditional_variance_formula,
    damage_moments,
    fraction_monotonicity_scan,
)
from .policy import (
    clipped_update,
    exp_update,
    log_ratio_residual,
    penalized_objective,
    signed_advantage_sums,
)
from .rng import make_stream

SUITES = ("advantage", "entropy", "clip", "misalign", "kkt")


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    tolerance: str
    seconds: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.suite}/{self.name} [{self.seconds:.2f}s, tol {self.tolerance}] {self.detail}"


# ------------------------------------------------------------------ advantage


def check_moments(G_max: int = 16) -> tuple[bool, str]:
    worst = 0.0
    for G in range(2, G_max + 1):
        for k in (1, 3, 5):
            if advantage_moment_oracle(G, k, signed=True) != 0.0:
                return False, f"odd moment k={k} nonzero at G={G}"
        m2 = 1 - 2.0 ** (1 - G)
        worst = max(worst, abs(advantage_moment_oracle(G, 2) - m2))
        worst = max(worst, abs(advantage_moment_oracle(G, 1) - mean_abs_advantage_closed_form(G)))
        for k in (2, 4, 6):
            if advantage_moment_oracle(G, k) < m2 - 1e-12:
                return False, f"even moment k={k} below 1-2^(1-G) at G={G}"
    return worst <= 1e-12, f"max moment error {worst:.2e}"


def check_max_advantage(G_max: int = 16) -> tuple[bool, str]:
    for G in range(2, G_max + 1):
        a = np.abs(advantages_batch(enumerate_reward_vectors(G))).max()
        if abs(a - math.sqrt(G - 1)) > 1e-12:
            return False, f"max |A| = {a} at G={G}"
    return True, "max |A| = sqrt(G-1) for G <= 16"


def check_mean_abs_g16() -> tuple[bool, str]:
    v = adv_mod.cached_moment(16, 1)
    return abs(v - 0.967) < 1e-3, f"E|A| = {v:.6f}"


# -------------------------------------------------------------------- entropy


def check_phi_closed_form() -> tuple[bool, str]:
    betas = np.linspace(0.01, 0.99, 99)
    err = max(abs(skewness_phi([b, 1 - b]) - two_arm_phi(b)) for b in betas)
    return err <= 1e-12, f"max error {err:.2e}"


def check_phi_threshold() -> tuple[bool, str]:
    v = skewness_phi([0.176, 0.824])
    return abs(v) < 2e-3, f"Phi(0.176) = {v:.2e}"


def check_sign_law() -> tuple[bool, str]:
    P = HyperParams(group_size=8, step_size=1e-2, vocab_size=2)
    vals = {b: exact_entropy_step_oracle([b, 1 - b], P) for b in (0.05, 0.3, 0.5, 0.7, 0.95)}
    ok = all(vals[b] < 0 for b in (0.3, 0.5, 0.7)) and all(vals[b] > 0 for b in (0.05, 0.95))
    return ok, ", ".join(f"{b}:{v:+.3e}" for b, v in vals.items())


def check_quartic_remainder() -> tuple[bool, str]:
    ratios = []
    for b in (0.3, 0.5, 0.7):
        pi = [b, 1 - b]
        res = []
        for eta in (1e-2, 5e-3):
            P = HyperParams(group_size=8, step_size=eta, vocab_size=2)
            res.append(exact_entropy_step_oracle(pi, P) + c_G(8) * skewness_phi(pi) * eta**2)
        ratios.append(abs(res[0]) / abs(res[1]))
    return min(ratios) >= 12, "halving ratios " + ", ".join(f"{r:.2f}" for r in ratios)


def check_covariance_zero() -> tuple[bool, str]:
    worst = 0.0
    for G in (2, 4, 6, 8):
        for pi in ([0.3, 0.7], [0.1, 0.2, 0.7]):
            if len(pi) ** G * 2**G > 2**20:
                continue
            P = HyperParams(group_size=G, vocab_size=len(pi), policy_floor=0.1)
            worst = max(worst, abs(covariance_term_check(pi, P)))
    return worst <= 1e-14, f"max |cov| {worst:.1e}"


def check_example_numbers() -> tuple[bool, str]:
    P = HyperParams(group_size=16, step_size=5e-7, vocab_size=150000, policy_floor=1e-7)
    cp = ClippedEntropyParams(rho=0.001, delta=10.0, p=2e-7)
    r = predicted_entropy_step_clipped_bound(None, P, cp, phi=-2.23e6, pi_hat=2e-7, convention="local")
    c = r.constants
    ok = (
        10.97 <= c.x_max <= 10.99
        and 2.28 <= c.m_p <= 2.30
        and 9.73 <= c.delta_eff <= 9.75
        and -1.30e-6 <= c.c_p <= -1.28e-6
        and -2.03e-7 <= c.clipped_term <= -1.99e-7
        and r.remainder <= 3.5e-8
        and abs(collision_bound(16, 150000, 2e-7) - 7.2e-7) <= 1e-9
        and r.total < -1.45e-7
    )
    return ok, f"total {r.total:.4e}, remainder {r.remainder:.3e}, clipped {c.clipped_term:.4e}"


def check_cap_predicate() -> tuple[bool, str]:
    P = HyperParams(group_size=16, step_size=5e-7, vocab_size=150000, policy_floor=1e-7)
    rep = cap_inactive_predicate(P)
    ok = rep.holds and abs(rep.lhs - 3e-7) < 1e-15 and abs(rep.rhs - 2.66e-3) < 1e-5
    return ok, f"lhs {rep.lhs:.3e} rhs {rep.rhs:.4e}"


def check_clipped_ordering() -> tuple[bool, str]:
    out = []
    ok = True
    for b in (0.05, 0.95):
        P = HyperParams(group_size=8, step_size=0.2, vocab_size=2)
        u = exact_entropy_step_oracle([b, 1 - b], P, "unclipped")
        c = exact_entropy_step_oracle([b, 1 - b], P, "clipped")
        ok &= c <= u
        out.append(f"{b}: {c:+.3e} <= {u:+.3e}")
    return ok, "; ".join(out)


# ---------------------------------------------------------------------- clip


def check_ratio_preset() -> tuple[bool, str]:
    P = HyperParams(group_size=16, step_size=5e-7, rollout_length=4096, vocab_size=150000,
                    policy_floor=1e-6)
    ea = adv_mod.cached_moment(16, 1)
    rep = clip_bound_report(ClipBoundInputs(P, 0.001, ea, 3.75))
    ok = (
        1.648 <= rep.r_max <= 1.650
        and 0.175 <= rep.phi_r <= 0.177
        and 0.448 <= rep.delta_plus <= 0.450
        and rep.C == 1.25e11
        and 0.966 <= ea <= 0.968
        and 17.0 <= rep.ratio <= 17.3
    )
    return ok, f"ratio {rep.ratio:.4f}, bound {rep.bound_ctot:.2f}"


def check_phi_properties() -> tuple[bool, str]:
    u = np.linspace(0, 10, 2001)
    v = phi_fn(u)
    d2 = np.diff(v, 2)
    ok = bool(np.all(v >= 0) and np.all(d2 > 0) and np.argmin(v) == np.searchsorted(u, 1.0))
    return ok, f"min phi {v.min():.2e} at u={u[np.argmin(v)]:.3f}"


def check_small_eta_ordering() -> tuple[bool, str]:
    worst = math.inf
    for pm in (0.5, 0.1, 0.01):
        for eta in np.linspace(pm / 50, pm, 25):
            for p in (0.0, 1e-3, 0.1, 1.0):
                for L in (1, 16, 256):
                    P = HyperParams(step_size=float(eta), rollout_length=L, policy_floor=pm)
                    inp = ClipBoundInputs(P, p, 0.0, 1.0)
                    gap = small_eta_bound(P, 1.0, p) - clip_correction_bound(inp)
                    worst = min(worst, gap)
    return worst >= -1e-12, f"min slack {worst:.3e}"


def check_mc_bounds(trials: int = 200) -> tuple[bool, str]:
    bad = []
    for L in (1, 4):
        for eta in (0.05, 0.2):
            pi = np.array([0.1, 0.2, 0.3, 0.4])
            P = HyperParams(group_size=8, step_size=eta, rollout_length=L, vocab_size=4, policy_floor=0.1)
            est = mc_clip_estimate(pi, P, trials, seed=7)
            inp = ClipBoundInputs(P, est.activation_rate, est.mean_abs_advantage, advantage_bound(8))
            if est.ctot_abs - 3 * est.ctot_se > clip_correction_bound(inp):
                bad.append(f"C_tot L={L} eta={eta}")
            if est.nraw_abs + 3 * est.nraw_se < raw_surrogate_lower_bound(inp):
                bad.append(f"N_raw L={L} eta={eta}")
    return not bad, "all bounds hold" if not bad else "; ".join(bad)


# ------------------------------------------------------------------ misalign


def check_misalign(G_max: int = 20) -> tuple[bool, str]:
    n = 0
    for G in range(2, G_max + 1):
        for nc in range(1, G):
            cfg = MisalignConfig(nc, G - nc)
            x = conditional_damage_exact(cfg)
            cf = damage_moments(cfg, "closed_form")
            if abs(float(x["mean"]) - cf.mean) > 1e-12 or abs(float(x["variance"]) - cf.variance) > 1e-12:
                return False, f"moment mismatch at {cfg}"
            if nc > G - nc:
                if not x["e_delta_f_gt_g"] <= x["e_delta_g_gt_f"]:
                    return False, f"first-moment ordering fails at {cfg}"
                if not x["var_given_f_gt_g"] < x["var_given_g_gt_f"]:
                    return False, f"variance ordering fails at {cfg}"
                vf, vg = conditional_variance_formula(cfg)
                if vf != x["var_given_f_gt_g"] or vg != x["var_given_g_gt_f"]:
                    return False, f"variance decomposition mismatch at {cfg}"
            n += 1
        fraction_monotonicity_scan(G)
    return True, f"{n} configurations"


# ----------------------------------------------------------------------- kkt


def random_kkt_instance(stream, V: int | None = None):
    V = int(stream.integers(2, 6)) if V is None else V
    pi = stream.dirichlet(np.ones(V))
    pi = 0.9 * pi + 0.1 / V
    G = int(stream.integers(2, 9))
    rewards = stream.integers(0, 2, size=G)
    if rewards.min() == rewards.max():
        rewards[0] = 1 - rewards[0]
    tokens = stream.integers(0, V, size=G)
    eta = float(10 ** stream.uniform(-2, 0.5))
    return pi, RolloutGroup(tokens), compute_advantages(rewards), eta


def check_kkt(instances: int = 1000, probes: int = 10_000, seed: int = 11) -> tuple[bool, str]:
    eps = 0.2
    stream = make_stream(seed)
    worst_stat = worst_norm = worst_match = 0.0
    capped_instances = 0
    for _ in range(instances):
        pi, ro, adv, eta = random_kkt_instance(stream)
        V = pi.size
        new, sol = clipped_update(pi, ro, adv, eta, eps)
        worst_stat = max(worst_stat, float(sol.stationarity.max()))
        worst_norm = max(worst_norm, sol.normalization_error)
        if np.any(sol.mu != 0):
            return False, "nonzero multiplier mu"
        unc = exp_update(pi, token_advantage(ro, adv, pi), eta)
        sp, sm = signed_advantage_sums(ro, adv, V)
        if np.all(unc / pi <= 1 + eps):
            worst_match = max(worst_match, float(np.abs(unc - new).max()))
        if sol.any_capped:
            capped_instances += 1
            f_star = penalized_objective(new, pi, sp, sm, ro.G, eta, eps)
            cand = stream.dirichlet(np.ones(V), size=probes)
            proj = _clip_projection(unc, pi, eps)
            cand = np.vstack([cand, proj[None, :], unc[None, :]])
            f_c = penalized_objective(cand, pi, sp, sm, ro.G, eta, eps)
            if np.any(f_c > f_star + 1e-12):
                return False, "random probe beats KKT solution"
    ok = worst_stat <= 1e-9 and worst_norm <= 1e-12 and worst_match <= 1e-10
    return ok, (f"stationarity {worst_stat:.1e}, normalization {worst_norm:.1e}, "
                f"match {worst_match:.1e}, cap-active {capped_instances}")


def _clip_projection(unc, pi, eps):
    """Cap unclipped ratios at 1+eps and spread the excess proportionally over the rest."""
    q = np.minimum(unc, (1 + eps) * pi)
    free = unc / pi < 1 + eps
    excess = 1.0 - q.sum()
    if free.any():
        q[free] += excess * q[free] / q[free].sum()
    return q / q.sum()


def check_log_ratio(instances: int = 10_000, seed: int = 13) -> tuple[bool, str]:
    stream = make_stream(seed)
    violations = 0
    worst = 0.0
    for _ in range(instances):
        pi, a_tilde, eta, pmin = random_log_ratio_instance(stream)
        rep = log_ratio_residual(pi, a_tilde, eta, pi_min=pmin)
        violations += not rep.holds
        worst = max(worst, rep.max_residual / rep.bound)
    return violations == 0, f"violations {violations}, max residual/bound {worst:.3f}"


def random_log_ratio_instance(stream):
    """Token advantages built from a real group so |A'| <= 1/(2 pi_min) holds."""
    V = int(stream.integers(2, 7))
    pi = stream.dirichlet(np.ones(V))
    pi = 0.8 * pi + 0.2 / V
    G = int(stream.integers(2, 17))
    cdf = np.cumsum(pi)
    cdf[-1] = 1.0
    tokens = np.minimum(np.searchsorted(cdf, stream.random(G), side="right"), V - 1)
    adv = compute_advantages(stream.integers(0, 2, size=G))
    at = token_advantage(RolloutGroup(tokens), adv, pi).values
    eta = float(10 ** stream.uniform(-4, -1))
    return pi, at, eta, float(pi.min())


# ---------------------------------------------------------------- registry

CHECKS: dict[str, list[tuple[str, Callable[[], tuple[bool, str]], str]]] = {
    "advantage": [
        ("moments", check_moments, "1e-12"),
        ("max_abs", check_max_advantage, "1e-12"),
        ("mean_abs_g16", check_mean_abs_g16, "1e-3"),
    ],
    "entropy": [
        ("phi_closed_form", check_phi_closed_form, "1e-12"),
        ("phi_threshold", check_phi_threshold, "2e-3"),
        ("sign_law", check_sign_law, "sign"),
        ("quartic_remainder", check_quartic_remainder, "ratio>=12"),
        ("covariance_zero", check_covariance_zero, "1e-14"),
        ("example_numbers", check_example_numbers, "stated ranges"),
        ("cap_predicate", check_cap_predicate, "1e-5"),
        ("clipped_ordering", check_clipped_ordering, "sign"),
    ],
    "clip": [
        ("ratio_preset", check_ratio_preset, "stated ranges"),
        ("phi_properties", check_phi_properties, "grid"),
        ("small_eta_ordering", check_small_eta_ordering, "1e-12"),
        ("mc_bounds", check_mc_bounds, "3 SE"),
    ],
    "misalign": [("moments_and_orderings", check_misalign, "1e-12 / exact")],
    "kkt": [
        ("kkt_solver", lambda: check_kkt(instances=200, probes=2000), "1e-9 / 1e-12 / 1e-10"),
        ("log_ratio", lambda: check_log_ratio(instances=2000), "C eta^3"),
    ],
}


def run_suites(selector: str = "all", echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    names = SUITES if selector == "all" else (selector,)
    for n in names:
        if n not in CHECKS:
            raise ValueError(f"unknown suite {n!r}; choose from all, {', '.join(SUITES)}")
    results = []
    for suite in names:
        for name, fn, tol in CHECKS[suite]:
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            res = CheckResult(suite, name, bool(ok), detail, tol, time.perf_counter() - t0)
            results.append(res)
            if echo:
                echo(res.line())
    return results
