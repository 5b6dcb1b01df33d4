"""Group-relative advantages, CoT entropy, the entropy-clipped advantage
adjustment, the clipped surrogate objective and exact categorical KL.

Everything here is policy-agnostic. A rollout only needs ``probs`` (chosen
token probability per position), ``dists`` (per-position distributions, shape
``(T, V)``) and ``cot_span`` (a ``range`` over the reasoning tokens).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

ENTROPY_MODES = ("plugin", "full")
AGGREGATIONS = ("sum", "mean_per_token")


class DegenerateGroup(ValueError):
    pass


class SupportMismatch(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass
class RolloutGroup:
    query_id: str
    rollouts: list
    rewards: list

    def __post_init__(self):
        if len(self.rollouts) != len(self.rewards):
            raise LengthMismatch("rollouts and rewards differ in length")
        if len(self.rewards) < 2:
            raise DegenerateGroup("a group needs at least two rollouts")


@dataclass
class AdvantageReport:
    base: np.ndarray
    entropy: float
    adjusted: np.ndarray
    clip_bound_hits: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "base": self.base.tolist(),
            "entropy": self.entropy,
            "adjusted": self.adjusted.tolist(),
            "clip_bound_hits": self.clip_bound_hits,
        }


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """(r - mean) / std with the population std; all zeros when std is 0."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise DegenerateGroup(f"need at least 2 rewards, got {r.size}")
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def _rollout_entropy_terms(rollout, mode: str) -> np.ndarray:
    span = rollout.cot_span
    if len(span) == 0:
        return np.zeros(0)
    if mode == "plugin":
        p = np.asarray(rollout.probs, dtype=np.float64)[span.start:span.stop]
        return -p * np.log(p)
    if mode == "full":
        d = np.asarray(rollout.dists, dtype=np.float64)[span.start:span.stop]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(d > 0, d * np.log(d), 0.0)
        return -terms.sum(axis=1)
    raise ValueError(f"unknown entropy mode {mode!r}")


def cot_entropy(group, mode: str = "plugin", aggregation: str = "mean_per_token") -> float:
    """Entropy of the reasoning tokens across a group of rollouts.

    ``plugin`` sums -p log p over the sampled tokens' probabilities; ``full``
    uses each position's whole distribution. Answer tokens never count.
    ``mean_per_token`` divides the total by the number of reasoning tokens.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    rollouts = group.rollouts if isinstance(group, RolloutGroup) else group
    total, count = 0.0, 0
    for ro in rollouts:
        terms = _rollout_entropy_terms(ro, mode)
        total += float(terms.sum())
        count += terms.size
    if aggregation == "mean_per_token":
        return total / count if count else 0.0
    return total


def adjust_advantages(base: Sequence[float], entropy: float, lam: float, alpha: float) -> np.ndarray:
    """A + min(lam * E, |A| / alpha), the same E for every member of the group."""
    if entropy < 0:
        raise ValueError("entropy must be non-negative")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    a = np.asarray(base, dtype=np.float64)
    return a + np.minimum(lam * entropy, np.abs(a) / alpha)


def entropy_bound_hits(base: Sequence[float], entropy: float, lam: float, alpha: float) -> int:
    """How many entries had the |A|/alpha bound selected over lam*E."""
    a = np.asarray(base, dtype=np.float64)
    return int(np.count_nonzero(np.abs(a) / alpha < lam * entropy))


def advantage_report(group: RolloutGroup, lam: float, alpha: float, mode: str = "plugin",
                     aggregation: str = "mean_per_token", use_entropy: bool = True) -> AdvantageReport:
    base = group_advantages(group.rewards)
    if not use_entropy:
        return AdvantageReport(base, 0.0, base.copy(), 0)
    e = cot_entropy(group, mode, aggregation)
    return AdvantageReport(base, e, adjust_advantages(base, e, lam, alpha), entropy_bound_hits(base, e, lam, alpha))


def _check_distribution(p: np.ndarray, name: str):
    if p.ndim != 1:
        raise SupportMismatch(f"{name} must be a vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise SupportMismatch(f"{name} is not a probability vector")


def categorical_kl(p: Sequence[float], q: Sequence[float]) -> float:
    """Exact KL(p || q) = sum p log(p / q) for categorical distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise SupportMismatch(f"support sizes differ: {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    mask = p > 0
    if np.any(q[mask] == 0):
        raise SupportMismatch("q has zero mass where p is positive")
    kl = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
    return max(kl, 0.0)


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL for strictly positive distribution matrices (no validation)."""
    return np.maximum(np.sum(p * (np.log(p) - np.log(q)), axis=-1), 0.0)


def surrogate_terms(ratios, advantages, epsilon: float):
    """Per-token min(rho*A, clip(rho)*A) and a mask of tokens whose clipped
    constant strictly wins the min (those carry no ratio gradient)."""
    rho = np.asarray(ratios, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    unclipped = rho * adv
    clipped = np.clip(rho, 1.0 - epsilon, 1.0 + epsilon) * adv
    return np.minimum(unclipped, clipped), clipped < unclipped


def clipped_surrogate(ratios, advantages, epsilon: float, kl_terms, beta: float) -> float:
    """Token-mean of min(rho*A, clip(rho, 1-eps, 1+eps)*A) - beta*KL."""
    rho = np.asarray(ratios, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    kl = np.asarray(kl_terms, dtype=np.float64)
    if not (rho.shape == adv.shape == kl.shape):
        raise LengthMismatch(f"lengths differ: {rho.shape}, {adv.shape}, {kl.shape}")
    if rho.size == 0:
        return 0.0
    if np.any(rho <= 0):
        raise ValueError("ratios must be positive")
    terms, _ = surrogate_terms(rho, adv, epsilon)
    return float(np.mean(terms - beta * kl))
