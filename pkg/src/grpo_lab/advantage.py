"""Group-normalized advantages, random rewards and token-level advantages.

Advantages use the population (divide-by-G) standard deviation. A group whose
rewards are all equal has zero standard deviation; its advantages are defined
as all zeros and the group is flagged ``degenerate``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

ENUMERATION_MAX_G = 24
_CHUNK_ROWS = 1 << 16


@dataclass(frozen=True)
class HyperParams:
    """Every constant that appears in the one-step bounds.

    ``policy_floor`` is the lower bound pi_min on old-policy probabilities.
    """

    group_size: int = 16
    step_size: float = 0.05
    clip_ratio: float = 0.2
    rollout_length: int = 1
    vocab_size: int = 2
    policy_floor: float = 1e-6

    def __post_init__(self):
        if int(self.group_size) != self.group_size or self.group_size < 2:
            raise ValueError(f"group_size: G >= 2 required, got {self.group_size}")
        if not self.step_size > 0:
            raise ValueError(f"step_size: eta > 0 required, got {self.step_size}")
        if not 0 < self.clip_ratio < 1:
            raise ValueError(f"clip_ratio: 0 < eps < 1 required, got {self.clip_ratio}")
        if int(self.rollout_length) != self.rollout_length or self.rollout_length < 1:
            raise ValueError(f"rollout_length: L >= 1 required, got {self.rollout_length}")
        if int(self.vocab_size) != self.vocab_size or self.vocab_size < 2:
            raise ValueError(f"vocab_size: |V| >= 2 required, got {self.vocab_size}")
        if not self.policy_floor > 0 or self.policy_floor * self.vocab_size > 1 + 1e-12:
            raise ValueError(
                f"policy_floor: 0 < pi_min <= 1/|V| required, got {self.policy_floor}"
            )

    @property
    def G(self) -> int:
        return int(self.group_size)

    @property
    def eta(self) -> float:
        return float(self.step_size)

    @property
    def eps(self) -> float:
        return float(self.clip_ratio)

    @property
    def L(self) -> int:
        return int(self.rollout_length)

    @property
    def V(self) -> int:
        return int(self.vocab_size)

    @property
    def pi_min(self) -> float:
        return float(self.policy_floor)


@dataclass(frozen=True)
class RewardGroup:
    rewards: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rewards)
        if r.ndim != 1 or r.size < 2:
            raise ValueError("rewards must be a 1-d vector of length G >= 2")
        if not np.all((r == 0) | (r == 1)):
            raise ValueError("rewards must be binary")
        object.__setattr__(self, "rewards", r.astype(np.int8))

    @property
    def G(self) -> int:
        return self.rewards.size


@dataclass(frozen=True)
class AdvantageGroup:
    advantages: np.ndarray
    degenerate: bool

    @property
    def G(self) -> int:
        return self.advantages.size


@dataclass(frozen=True)
class RolloutGroup:
    """``tokens`` is a G x L matrix of vocabulary indices."""

    tokens: np.ndarray
    correct_arm: int | None = None

    def __post_init__(self):
        t = np.asarray(self.tokens)
        if t.ndim == 1:
            t = t[:, None]
        if t.ndim != 2 or not np.issubdtype(t.dtype, np.integer):
            raise ValueError("tokens must be an integer G x L matrix")
        if t.size and t.min() < 0:
            raise ValueError("token indices must be non-negative")
        object.__setattr__(self, "tokens", t)

    @property
    def G(self) -> int:
        return self.tokens.shape[0]

    @property
    def L(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class TokenAdvantage:
    values: np.ndarray
    visit_counts: np.ndarray


def sample_random_rewards(params: HyperParams, stream: np.random.Generator) -> RewardGroup:
    """G i.i.d. Bernoulli(1/2) rewards, independent of the rollouts."""
    return RewardGroup(stream.integers(0, 2, size=params.G))


def sample_rollouts(
    pi: np.ndarray, G: int, L: int, stream: np.random.Generator
) -> RolloutGroup:
    """Draw G context-free rollouts of length L by inverse-CDF sampling."""
    u = stream.random((G, L))
    return RolloutGroup(tokens_from_uniforms(pi, u))


def tokens_from_uniforms(pi: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(pi)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(pi) - 1)


def advantages_batch(rewards: np.ndarray) -> np.ndarray:
    """Row-wise group advantages for an (n, G) binary reward matrix.

    Deviations are formed as (G*r - K)/G so that flipping every reward flips
    every advantage bit-for-bit; the enumeration oracles rely on this.
    """
    r = np.asarray(rewards, dtype=np.float64)
    G = r.shape[-1]
    K = r.sum(axis=-1, keepdims=True)
    dev = (G * r - K) / G
    std = np.sqrt(np.sum(dev * dev, axis=-1, keepdims=True) / G)
    with np.errstate(invalid="ignore", divide="ignore"):
        adv = np.where(std > 0, dev / np.where(std > 0, std, 1.0), 0.0)
    return adv


def compute_advantages(rewards: RewardGroup | np.ndarray) -> AdvantageGroup:
    if not isinstance(rewards, RewardGroup):
        rewards = RewardGroup(rewards)
    r = rewards.rewards
    adv = advantages_batch(r[None, :])[0]
    degenerate = bool(np.all(r == r[0]))
    return AdvantageGroup(adv, degenerate)


def enumerate_reward_vectors(G: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    """All binary vectors of length G with integer codes in [start, stop)."""
    stop = 2**G if stop is None else stop
    codes = np.arange(start, stop, dtype=np.int64)
    shifts = np.arange(G, dtype=np.int64)
    return ((codes[:, None] >> shifts) & 1).astype(np.int8)


def _check_budget(G: int):
    if not 2 <= G <= ENUMERATION_MAX_G:
        raise ValueError(f"G={G} outside enumeration budget [2, {ENUMERATION_MAX_G}]")


def advantage_moment_oracle(G: int, k: int, signed: bool = False) -> float:
    """Exact E[|A_1|^k] (or E[A_1^k] when ``signed``) by enumerating 2^G rewards.

    Every reward vector carries weight 2^-G; terms are summed with ``math.fsum``
    so that symmetric terms cancel exactly.
    """
    _check_budget(G)
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = []
    total = 2**G
    for start in range(0, total, _CHUNK_ROWS):
        rewards = enumerate_reward_vectors(G, start, min(start + _CHUNK_ROWS, total))
        a1 = advantages_batch(rewards)[:, 0]
        # sign * |a|^k: numpy's power is not exactly odd for negative bases
        mag = np.abs(a1) ** k
        terms.append(np.sign(a1) * mag if signed and k % 2 else mag)
    return math.fsum(np.concatenate(terms).tolist()) / total


@lru_cache(maxsize=None)
def advantage_pair_moment_oracle(G: int) -> float:
    """Exact E[A_1^2 A_2^2] by enumeration."""
    _check_budget(G)
    terms = []
    total = 2**G
    for start in range(0, total, _CHUNK_ROWS):
        rewards = enumerate_reward_vectors(G, start, min(start + _CHUNK_ROWS, total))
        a = advantages_batch(rewards)
        terms.append(a[:, 0] ** 2 * a[:, 1] ** 2)
    return math.fsum(np.concatenate(terms).tolist()) / total


@lru_cache(maxsize=None)
def cached_moment(G: int, k: int, signed: bool = False) -> float:
    return advantage_moment_oracle(G, k, signed)


def mean_abs_advantage_closed_form(G: int) -> float:
    s = math.fsum(math.comb(G, K) * math.sqrt(K * (G - K)) for K in range(1, G))
    return 2.0 * s / (G * 2**G)


def max_abs_advantage(G: int) -> float:
    """Largest |A_i| under the population std (a lone positive reward)."""
    return math.sqrt(G - 1)


def token_advantage(
    rollouts: RolloutGroup, adv: AdvantageGroup, pi_old: np.ndarray
) -> TokenAdvantage:
    """Importance-weighted aggregation of group advantages onto tokens.

    A'(a) = (1/G) sum_i sum_t 1{y_t^(i) = a} A_i / pi_old(a). Sequence mode
    (L > 1) treats the policy as the same categorical at every position.
    """
    pi_old = np.asarray(pi_old, dtype=np.float64)
    if np.any(pi_old <= 0):
        raise ValueError("pi_old must be strictly positive on every token")
    tokens = rollouts.tokens
    G, L = tokens.shape
    if adv.G != G:
        raise ValueError(f"{G} rollouts but {adv.G} advantages")
    V = pi_old.size
    if tokens.max() >= V:
        raise ValueError("token index outside vocabulary")
    flat = tokens.ravel()
    counts = np.bincount(flat, minlength=V)
    sums = np.bincount(flat, weights=np.repeat(adv.advantages, L), minlength=V)
    return TokenAdvantage(sums / (G * pi_old), counts)
