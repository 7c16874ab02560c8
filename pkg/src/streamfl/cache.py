"""Finite labeled caches and their update rules.

Every rule is first expressed on label counts by :func:`next_counts`, which is
what the count-only Monte-Carlo kernels replicate. :func:`policy_update` then
realises the new counts on actual items (FIFO eviction or per-class selective
replacement) and checks that the two agree.

Rounds are 1-based. For ``t <= M`` (``M = B / B_s``) every rule appends the
whole batch; the replacement rules start at ``t = M + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import as_distribution

POLICIES = ("FIFO", "SRSR", "DRSR", "LAZY", "FULL")
STREAMING_POLICIES = ("FIFO", "SRSR", "DRSR")


@dataclass(frozen=True)
class CacheConfig:
    capacity: int
    batch_size: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer")
        if self.capacity % self.batch_size:
            raise ValueError(f"capacity {self.capacity} is not a multiple of batch_size {self.batch_size}")
        if self.capacity // self.batch_size < 2:
            raise ValueError("capacity must be at least twice the batch size")

    @property
    def M(self) -> int:
        return self.capacity // self.batch_size


@dataclass(frozen=True)
class PolicyConfig:
    kind: str
    theta: float = 2.0 / 3.0

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in POLICIES:
            raise ValueError(f"unknown policy {self.kind!r}; expected one of {POLICIES}")
        object.__setattr__(self, "kind", kind)
        if kind == "SRSR" and not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must be in (0, 1] for SRSR, got {self.theta}")


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    round: int

    def __len__(self) -> int:
        return len(self.labels)


class LabeledCache:
    """Items as parallel arrays (features, labels, arrival round) in insertion order."""

    def __init__(self, n_classes: int, feature_dim: int, capacity: int):
        self.n_classes = n_classes
        self.capacity = capacity
        self.features = np.empty((0, feature_dim))
        self.labels = np.empty(0, dtype=np.int64)
        self.arrival = np.empty(0, dtype=np.int64)
        self.class_counts = np.zeros(n_classes, dtype=np.int64)
        self.ideal_counts = np.zeros(n_classes)
        self.round = 0
        self.immutable = False

    def __len__(self) -> int:
        return len(self.labels)

    def recount(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes).astype(np.int64)

    def _set_items(self, features, labels, arrival):
        if len(labels) > self.capacity:
            raise RuntimeError(f"cache overflow: {len(labels)} items > capacity {self.capacity}")
        self.features, self.labels, self.arrival = features, labels, arrival
        self.class_counts = self.recount()

    def append(self, batch: Batch) -> None:
        if self.immutable:
            raise RuntimeError("cache is immutable")
        self._set_items(
            np.concatenate([self.features, batch.features]),
            np.concatenate([self.labels, batch.labels]),
            np.concatenate([self.arrival, np.full(len(batch), batch.round, dtype=np.int64)]),
        )

    def keep(self, mask: np.ndarray) -> None:
        self._set_items(self.features[mask], self.labels[mask], self.arrival[mask])

    def snapshot(self) -> dict:
        return {
            "round": self.round,
            "class_counts": self.class_counts.tolist(),
            "ideal_counts": self.ideal_counts.tolist(),
        }


def cached_distribution(cache: LabeledCache) -> np.ndarray:
    if len(cache) == 0:
        raise ValueError("cached distribution of an empty cache")
    return cache.class_counts / len(cache)


def fifo_update(cache: LabeledCache, batch: Batch) -> Batch:
    """Append ``batch``, first evicting the oldest ``len(batch)`` items if full.

    Returns the evicted items.
    """
    n_new = len(batch)
    if len(cache) + n_new <= cache.capacity:
        cache.append(batch)
        return Batch(cache.features[:0], cache.labels[:0], batch.round)
    order = np.argsort(cache.arrival, kind="stable")
    evict = np.zeros(len(cache), dtype=bool)
    evict[order[:n_new]] = True
    evicted = Batch(cache.features[evict], cache.labels[evict], batch.round)
    cache.keep(~evict)
    cache.append(batch)
    return evicted


def srsr_targets(counts_cache, counts_batch, theta: float, config: CacheConfig) -> np.ndarray:
    """Weighted average ``(1 - theta B_s / B) n(L) + theta n(S)``; sums to ``B``."""
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    L = np.asarray(counts_cache, dtype=np.float64)
    S = np.asarray(counts_batch, dtype=np.float64)
    if abs(L.sum() - config.capacity) > 1e-6:
        raise ValueError(f"cache counts sum to {L.sum()}, expected a full cache of {config.capacity}")
    if S.sum() != config.batch_size:
        raise ValueError(f"batch counts sum to {S.sum()}, expected {config.batch_size}")
    keep = 1.0 - (config.batch_size / config.capacity) * theta
    return keep * L + theta * S


def drsr_theta(t: int, config: CacheConfig) -> float:
    """``B / (B_s t)``, clamped to 1 for the fill rounds ``t <= M``."""
    if t < 1:
        raise ValueError(f"round index must be >= 1, got {t}")
    return min(1.0, config.capacity / (config.batch_size * t))


def apportion(real_targets, total: int, caps=None) -> np.ndarray:
    """Largest-remainder rounding of ``real_targets`` to integers summing to ``total``.

    Floors every target (clipped to its cap), then hands out the missing units
    one at a time in descending fractional-part order, lowest class index
    first on ties, skipping classes at their cap and cycling if needed.
    """
    targets = np.asarray(real_targets, dtype=np.float64)
    if np.any(targets < -1e-9):
        raise ValueError("negative apportionment target")
    targets = np.maximum(targets, 0.0)
    if abs(targets.sum() - total) > 1e-6:
        raise ValueError(f"targets sum to {targets.sum()!r}, expected {total}")
    if caps is None:
        caps = np.full(targets.shape, total, dtype=np.int64)
    caps = np.asarray(caps, dtype=np.int64)
    if np.any(caps < 0):
        raise ValueError("negative cap")
    if caps.sum() < total:
        raise ValueError(f"caps sum to {caps.sum()} < total {total}; cannot fill")
    floors = np.floor(targets)
    frac = targets - floors
    result = np.minimum(floors.astype(np.int64), caps)
    deficit = total - int(result.sum())
    order = np.argsort(-frac, kind="stable")
    while deficit > 0:
        for r in order:
            if deficit == 0:
                break
            if result[r] < caps[r]:
                result[r] += 1
                deficit -= 1
    return result


def selective_replace(rng: np.random.Generator, cache: LabeledCache, batch: Batch, int_targets) -> LabeledCache:
    """Per-class replacement that meets ``int_targets`` while keeping as much new data as possible.

    Class ``r`` with target ``n <= n_r(S)``: drop every cached item of class r
    and insert ``n`` batch items chosen uniformly. Otherwise remove
    ``n_r(L) + n_r(S) - n`` cached items uniformly and insert the whole class.
    """
    int_targets = np.asarray(int_targets, dtype=np.int64)
    if int_targets.sum() != cache.capacity:
        raise ValueError(f"targets sum to {int_targets.sum()}, expected {cache.capacity}")
    keep_cached = np.ones(len(cache), dtype=bool)
    take_batch = np.zeros(len(batch), dtype=bool)
    for r in range(cache.n_classes):
        cached_idx = np.flatnonzero(cache.labels == r)
        batch_idx = np.flatnonzero(batch.labels == r)
        n_L, n_S, target = len(cached_idx), len(batch_idx), int(int_targets[r])
        if target < 0 or target > n_L + n_S:
            raise ValueError(f"infeasible target {target} for class {r} (cache {n_L}, batch {n_S})")
        if target <= n_S:
            keep_cached[cached_idx] = False
            if target == n_S:
                take_batch[batch_idx] = True
            elif target > 0:
                take_batch[rng.choice(batch_idx, size=target, replace=False)] = True
        else:
            n_remove = n_L + n_S - target
            if n_remove:
                keep_cached[rng.choice(cached_idx, size=n_remove, replace=False)] = False
            take_batch[batch_idx] = True
    cache.keep(keep_cached)
    cache.append(Batch(batch.features[take_batch], batch.labels[take_batch], batch.round))
    return cache


def next_counts(
    policy: PolicyConfig,
    config: CacheConfig,
    t: int,
    counts,
    ideal,
    batch_counts,
    expired_counts=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Count-level transition of one round: returns ``(class_counts, ideal_counts)``.

    ``expired_counts`` (FIFO only) holds the label counts of batch ``t - M``.
    SRSR and DRSR run their recursion on the real-valued ``ideal`` and
    apportion it, capped at what is physically available.
    """
    counts = np.asarray(counts, dtype=np.int64)
    batch_counts = np.asarray(batch_counts, dtype=np.int64)
    kind = policy.kind
    if kind == "FULL":
        return counts, np.asarray(ideal, dtype=np.float64)
    if t <= config.M:
        filled = counts + batch_counts
        return filled, filled.astype(np.float64)
    if kind == "LAZY":
        return counts, np.asarray(ideal, dtype=np.float64)
    if kind == "FIFO":
        if expired_counts is None:
            raise ValueError("FIFO needs the counts of the expiring batch")
        moved = counts - np.asarray(expired_counts, dtype=np.int64) + batch_counts
        return moved, moved.astype(np.float64)
    theta = policy.theta if kind == "SRSR" else drsr_theta(t, config)
    new_ideal = srsr_targets(ideal, batch_counts, theta, config)
    return apportion(new_ideal, config.capacity, caps=counts + batch_counts), new_ideal


def policy_update(
    policy: PolicyConfig,
    cache: LabeledCache,
    batch: Batch,
    t: int,
    config: CacheConfig,
    rng: np.random.Generator | None = None,
) -> LabeledCache:
    """Apply one round of ``policy`` to ``cache`` in place."""
    if len(batch) != config.batch_size:
        raise ValueError(f"batch has {len(batch)} items, expected {config.batch_size}")
    if t != cache.round + 1:
        raise ValueError(f"cache is at round {cache.round}; cannot apply round {t}")
    batch_counts = np.bincount(batch.labels, minlength=cache.n_classes).astype(np.int64)
    expired = None
    if policy.kind == "FIFO" and t > config.M:
        expired = np.bincount(cache.labels[cache.arrival == t - config.M], minlength=cache.n_classes)
    counts, ideal = next_counts(policy, config, t, cache.class_counts, cache.ideal_counts, batch_counts, expired)

    if policy.kind == "FULL":
        if not cache.immutable:
            if rng is None:
                raise ValueError("FULL needs an rng to refresh its items")
            selective_replace(rng, cache, batch, counts)
    elif t <= config.M:
        cache.append(batch)
    elif policy.kind == "FIFO":
        fifo_update(cache, batch)
    elif policy.kind in ("SRSR", "DRSR"):
        if rng is None:
            raise ValueError(f"{policy.kind} needs an rng for selective replacement")
        selective_replace(rng, cache, batch, counts)
    if not np.array_equal(cache.class_counts, counts):
        raise RuntimeError(f"round {t}: cache counts {cache.class_counts} disagree with rule counts {counts}")
    cache.ideal_counts = ideal
    cache.round = t
    return cache


def full_cache_counts(pi, capacity: int) -> np.ndarray:
    """Integer class counts of a FULL-benchmark cache for long-term law ``pi``."""
    pi = as_distribution(pi)
    return apportion(capacity * pi, capacity)
