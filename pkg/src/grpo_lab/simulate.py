"""Multi-step GRPO training on a tabular bandit.

Each step draws ``groups_per_step`` groups of G rollouts from the current
policy, assigns rewards, averages the token advantage over groups and applies
a single update. Every step consumes the same random draws whatever the reward
or update mode, so runs that differ only in those modes see identical
rollouts and reward bits.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .advantage import HyperParams, advantages_batch, tokens_from_uniforms
from .entropy import entropy, skewness_phi
from .policy import UNCLIPPED, clipped_update_from_sums, exp_update
from .rng import make_stream

REWARD_MODES = ("random", "true")
UPDATE_MODES = ("unclipped", "clipped")
SIMPLEX_TOL = 1e-10


class SimulationError(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    """Configuration of one training run.

    ``initial_policy`` is ``"uniform"``, ``"two_arm"`` (uses ``beta``) or
    ``"vector"`` (uses ``policy_vector``). ``correct_arm`` marks the rewarded
    arm under ``reward_mode="true"``; with random rewards it only drives the
    damage bookkeeping.
    """

    params: HyperParams = field(default_factory=HyperParams)
    initial_policy: str = "two_arm"
    beta: float = 0.5
    policy_vector: tuple[float, ...] | None = None
    reward_mode: str = "random"
    correct_arm: int | None = None
    update_mode: str = "unclipped"
    steps: int = 2000
    groups_per_step: int = 1
    seed: int = 0
    trial: int = 0
    record_every: int = 1
    enforce_floor: bool = True
    keep_snapshots: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps: >= 1 required, got {self.steps}")
        if self.groups_per_step < 1:
            raise ValueError(f"groups_per_step: >= 1 required, got {self.groups_per_step}")
        if self.record_every < 1:
            raise ValueError(f"record_every: >= 1 required, got {self.record_every}")
        if self.initial_policy not in ("uniform", "two_arm", "vector"):
            raise ValueError(f"initial_policy: unknown kind {self.initial_policy!r}")
        if self.initial_policy == "two_arm":
            if not 0 < self.beta < 1:
                raise ValueError(f"beta: 0 < beta < 1 required, got {self.beta}")
            if self.params.V != 2:
                raise ValueError("initial_policy two_arm needs vocab_size = 2")
        if self.initial_policy == "vector":
            if self.policy_vector is None or len(self.policy_vector) != self.params.V:
                raise ValueError("policy_vector must have vocab_size entries")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode: expected one of {REWARD_MODES}, got {self.reward_mode!r}")
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"update_mode: expected one of {UPDATE_MODES}, got {self.update_mode!r}")
        if self.reward_mode == "true" and self.correct_arm is None:
            raise ValueError("correct_arm: required when reward_mode = true")
        if self.correct_arm is not None and not 0 <= self.correct_arm < self.params.V:
            raise ValueError(f"correct_arm: must lie in [0, {self.params.V})")
        if self.update_mode == "clipped" and self.params.L != 1:
            raise ValueError("clipped updates need rollout_length = 1")
        if self.reward_mode == "true" and self.params.L != 1:
            raise ValueError("reward_mode true needs rollout_length = 1")

    def initial(self) -> np.ndarray:
        V = self.params.V
        if self.initial_policy == "uniform":
            return np.full(V, 1.0 / V)
        if self.initial_policy == "two_arm":
            return np.array([self.beta, 1.0 - self.beta])
        p = np.asarray(self.policy_vector, dtype=np.float64)
        if np.any(p <= 0) or abs(p.sum() - 1) > 1e-12:
            raise ValueError("policy_vector must be strictly positive and sum to 1")
        return p


@dataclass
class Trajectory:
    step: np.ndarray
    entropy: np.ndarray
    phi: np.ndarray
    max_arm: np.ndarray
    true_arm_prob: np.ndarray  # nan without a correct arm
    clip_rate: np.ndarray  # nan at step 0
    mean_damage: np.ndarray  # nan without a correct arm
    snapshots: np.ndarray | None = None
    floor_drift: float = 0.0
    max_simplex_error: float = 0.0

    def __len__(self) -> int:
        return int(self.step.size)

    @property
    def final_entropy(self) -> float:
        return float(self.entropy[-1])


@dataclass(frozen=True)
class Summary:
    initial_entropy: float
    final_entropy: float
    min_entropy: float
    max_entropy: float
    entropy_slope: float
    slope_sign: int
    final_true_arm_prob: float
    mean_clip_rate: float
    mean_damage: float


def project_to_floor(pi: np.ndarray, floor: float) -> tuple[np.ndarray, float]:
    """Raise entries below ``floor`` to it and rescale the rest; returns (pi, L1 drift)."""
    p = pi.copy()
    pinned = np.zeros(p.size, dtype=bool)
    for _ in range(p.size):
        low = (p < floor) & ~pinned
        if not np.any(low):
            break
        pinned |= low
        free_mass = 1.0 - floor * pinned.sum()
        p[pinned] = floor
        p[~pinned] *= free_mass / p[~pinned].sum()
    return p, float(np.abs(p - pi).sum())


def _group_damage(tokens: np.ndarray, bits: np.ndarray, rewards: np.ndarray, arm: int) -> np.ndarray:
    """Per-group damage (n_c f + n_i g)/G against the correct arm."""
    G = tokens.shape[1]
    correct = tokens == arm
    n_c = correct.sum(axis=1)
    n_i = G - n_c
    f = (rewards.astype(bool) & ~correct).sum(axis=1)
    g = (~rewards.astype(bool) & correct).sum(axis=1)
    return (n_c * f + n_i * g) / G


def run_training(cfg: SimConfig) -> Trajectory:
    p = cfg.params
    G, L, V, k = p.G, p.L, p.V, cfg.groups_per_step
    stream = make_stream(cfg.seed, cfg.trial)
    pi = cfg.initial()
    if cfg.enforce_floor and np.any(pi < p.pi_min):
        raise SimulationError(0, "initial policy violates the floor")

    rec: dict[str, list] = {key: [] for key in
                            ("step", "entropy", "phi", "max_arm", "true", "clip", "damage", "snap")}
    damage_sum, damage_n = 0.0, 0
    drift_total, simplex_err = 0.0, 0.0
    clip_rate = math.nan
    arm = cfg.correct_arm

    def record(step):
        rec["step"].append(step)
        rec["entropy"].append(entropy(pi))
        rec["phi"].append(skewness_phi(pi))
        rec["max_arm"].append(int(np.argmax(pi)))
        rec["true"].append(float(pi[arm]) if arm is not None else math.nan)
        rec["clip"].append(clip_rate)
        rec["damage"].append(damage_sum / damage_n if damage_n else math.nan)
        if cfg.keep_snapshots:
            rec["snap"].append(pi.copy())

    record(0)
    for step in range(1, cfg.steps + 1):
        u = stream.random((k, G, L))
        bits = stream.integers(0, 2, size=(k, G), dtype=np.int8)
        tokens = tokens_from_uniforms(pi, u)  # (k, G, L)
        if cfg.reward_mode == "true":
            rewards = (tokens[:, :, 0] == arm).astype(np.int8)
        else:
            rewards = bits
        adv = advantages_batch(rewards)  # (k, G)
        if arm is not None:
            d = _group_damage(tokens[:, :, 0], bits, rewards, arm)
            damage_sum += float(d.sum())
            damage_n += k

        flat = tokens.reshape(-1)
        try:
            if cfg.update_mode == "unclipped":
                sums = np.bincount(flat, weights=np.repeat(adv.reshape(-1), L), minlength=V)
                a_tilde = sums / (G * k * pi)
                new = exp_update(pi, a_tilde, p.eta)
                capped = (new / pi)[flat] > 1 + p.eps
            else:
                a = adv.reshape(-1)
                s_plus = np.bincount(flat, weights=np.maximum(a, 0.0), minlength=V)
                s_minus = np.bincount(flat, weights=np.minimum(a, 0.0), minlength=V)
                new, sol = clipped_update_from_sums(pi, s_plus, s_minus, G * k, p.eta, p.eps)
                capped = sol.branch[flat] != UNCLIPPED
        except (OverflowError, FloatingPointError, RuntimeError) as exc:
            raise SimulationError(step, str(exc)) from exc
        if not np.all(np.isfinite(new)):
            raise SimulationError(step, "non-finite policy after update")
        clip_rate = float(capped.mean())
        simplex_err = max(simplex_err, abs(new.sum() - 1.0))
        new = new / new.sum()
        if cfg.enforce_floor and np.any(new < p.pi_min):
            new, drift = project_to_floor(new, p.pi_min)
            drift_total += drift
        pi = new
        if step % cfg.record_every == 0 or step == cfg.steps:
            record(step)

    return Trajectory(
        step=np.array(rec["step"], dtype=np.int64),
        entropy=np.array(rec["entropy"]),
        phi=np.array(rec["phi"]),
        max_arm=np.array(rec["max_arm"], dtype=np.int64),
        true_arm_prob=np.array(rec["true"]),
        clip_rate=np.array(rec["clip"]),
        mean_damage=np.array(rec["damage"]),
        snapshots=np.array(rec["snap"]) if cfg.keep_snapshots else None,
        floor_drift=drift_total,
        max_simplex_error=simplex_err,
    )


def paired_clip_experiment(cfg: SimConfig) -> tuple[Trajectory, Trajectory]:
    """(unclipped, clipped) runs on the same random draws."""
    return (
        run_training(replace(cfg, update_mode="unclipped")),
        run_training(replace(cfg, update_mode="clipped")),
    )


def run_seeds(cfg: SimConfig, n_seeds: int, threads: int = 1) -> list[Trajectory]:
    """Independent trials 0..n_seeds-1 of ``cfg`` keyed by (seed, trial), in trial order."""
    cfgs = [replace(cfg, trial=t) for t in range(n_seeds)]
    if threads <= 1:
        return [run_training(c) for c in cfgs]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(run_training, cfgs))


def summarize(traj: Trajectory) -> Summary:
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    h = traj.entropy
    if len(traj) > 1 and np.ptp(traj.step) > 0:
        slope = float(np.polyfit(traj.step.astype(np.float64), h, 1)[0])
        if np.ptp(h) == 0:
            slope = 0.0
    else:
        slope = 0.0
    clip = traj.clip_rate[~np.isnan(traj.clip_rate)]
    return Summary(
        initial_entropy=float(h[0]),
        final_entropy=float(h[-1]),
        min_entropy=float(h.min()),
        max_entropy=float(h.max()),
        entropy_slope=slope,
        slope_sign=int(np.sign(slope)),
        final_true_arm_prob=float(traj.true_arm_prob[-1]),
        mean_clip_rate=float(clip.mean()) if clip.size else math.nan,
        mean_damage=float(traj.mean_damage[-1]),
    )
