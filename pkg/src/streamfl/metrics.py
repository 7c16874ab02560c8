"""Distribution-discrepancy metrics, cache-rule bounds and Monte-Carlo checks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ._kernels import simulate_counts
from .cache import CacheConfig, PolicyConfig, full_cache_counts
from .distributions import CorrelationProfile, RegimeSet, StreamProfile, sample_stream_counts
from .rng import substream

MIN_TRIALS = 100


def per_slot_discrepancy(v_all, pi_all) -> float:
    """``sum_k sum_r (v[k, r] - pi[k, r])^2``."""
    v = np.asarray(v_all, dtype=np.float64)
    pi = np.asarray(pi_all, dtype=np.float64)
    if v.shape != pi.shape:
        raise ValueError(f"shape mismatch: {v.shape} vs {pi.shape}")
    return float(np.sum((v - pi) ** 2))


def accumulated_discrepancy(values: Iterable) -> float:
    """Sum of per-slot discrepancies; accepts floats or objects with ``psi_t``."""
    return float(sum(getattr(x, "psi_t", x) for x in values))


@dataclass(frozen=True)
class BoundInput:
    M: int
    gamma: int
    delta_sq: float
    theta: float = 1.0
    t: int = 1
    pi_max_sq: float = 1.0


def fifo_bound(inp: BoundInput) -> float:
    if inp.M < 1:
        raise ValueError("M must be >= 1")
    return min(2 * inp.gamma + 1, inp.M) * inp.delta_sq / inp.M


def _srsr_parts(inp: BoundInput) -> tuple[float, float]:
    a = inp.theta / inp.M
    if not 0.0 < a < 1.0:
        raise ValueError(f"theta/M must lie in (0, 1), got {a}")
    q = 1.0 - a
    bracket = (q ** (-inp.gamma) - q ** (inp.gamma + 1)) / (2.0 - a)
    return q ** (2 * inp.t), bracket


def srsr_bound(inp: BoundInput) -> float:
    """Initial-condition term plus the geometric correlation term."""
    decay, bracket = _srsr_parts(inp)
    return 2.0 * decay * inp.pi_max_sq + 2.0 * (1.0 - decay) * bracket * inp.delta_sq


def srsr_bound_limit(inp: BoundInput) -> float:
    """``t -> infinity`` value of :func:`srsr_bound`."""
    _, bracket = _srsr_parts(inp)
    return 2.0 * bracket * inp.delta_sq


def drsr_bound(inp: BoundInput) -> float:
    if inp.t < 1:
        raise ValueError("t must be >= 1")
    return (2 * inp.gamma + 1) * inp.delta_sq / inp.t


def policy_bound(
    policy: PolicyConfig, config: CacheConfig, t: int, correlation: CorrelationProfile, pi_sq: float
) -> float:
    """Bound on ``E[(v_t - pi)^2]`` for the cache produced by ``policy`` at round ``t``.

    Fill rounds hold the plain average of ``t`` batches, so the FIFO form with
    a window of ``t`` applies. LAZY freezes that window at ``t = M``. SRSR's
    geometric recursion starts from the full cache at ``t = M``. FULL is off
    only by apportionment, at most ``1 / B`` per class.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    gamma, delta_sq = correlation.gamma, correlation.delta_sq
    if policy.kind == "FULL":
        return 1.0 / config.capacity**2
    if t <= config.M:
        return fifo_bound(BoundInput(t, gamma, delta_sq))
    if policy.kind in ("FIFO", "LAZY"):
        return fifo_bound(BoundInput(config.M, gamma, delta_sq))
    if policy.kind == "DRSR":
        return drsr_bound(BoundInput(config.M, gamma, delta_sq, t=t))
    return srsr_bound(BoundInput(config.M, gamma, delta_sq, policy.theta, t - config.M, pi_sq))


@dataclass(frozen=True)
class MonteCarloResult:
    probes: np.ndarray
    mean: np.ndarray
    std_err: np.ndarray
    n_trials: int


def monte_carlo_discrepancy(
    policy: PolicyConfig,
    regime_set: RegimeSet,
    config: CacheConfig,
    n_trials: int,
    t_probe: int | Sequence[int],
    seed: int = 0,
    sampling: str = "multinomial",
    chunk: int = 500,
    use_numba: bool | None = None,
) -> MonteCarloResult:
    """Estimate ``E[(v_t - pi)^2]`` per class from count-only simulations.

    ``mean`` and ``std_err`` have shape ``(len(probes), R)``. Each chunk of
    trials uses its own substream, so results depend on ``chunk``.
    """
    if n_trials < MIN_TRIALS:
        raise ValueError(f"n_trials must be >= {MIN_TRIALS}, got {n_trials}")
    probes = np.atleast_1d(np.asarray(t_probe, dtype=np.int64))
    probes = np.unique(probes)
    pi = regime_set.long_term()
    full = full_cache_counts(pi, config.capacity) if policy.kind == "FULL" else None
    T = int(probes[-1])
    R = regime_set.n_classes
    total = np.zeros((len(probes), R))
    total_sq = np.zeros((len(probes), R))
    for c, start in enumerate(range(0, n_trials, chunk)):
        n = min(chunk, n_trials - start)
        rng = substream(seed, c, "montecarlo")
        stream = sample_stream_counts(regime_set, config.batch_size, T, rng, n_streams=n, sampling=sampling)
        dev2 = simulate_counts(
            policy.kind, stream, config.capacity, config.batch_size, policy.theta, pi, probes, full, use_numba
        )
        total += dev2.sum(axis=0)
        total_sq += (dev2**2).sum(axis=0)
    mean = total / n_trials
    var = np.maximum(total_sq / n_trials - mean**2, 0.0) * n_trials / max(n_trials - 1, 1)
    return MonteCarloResult(probes, mean, np.sqrt(var / n_trials), n_trials)


def loglog_slope(t, y) -> tuple[float, float]:
    """Least-squares slope of ``log y`` on ``log t`` and its R^2."""
    x = np.log(np.asarray(t, dtype=np.float64))
    z = np.log(np.asarray(y, dtype=np.float64))
    slope, intercept = np.polyfit(x, z, 1)
    resid = z - (slope * x + intercept)
    r2 = 1.0 - resid.var() / z.var()
    return float(slope), float(r2)


def inverse_t_fit(t, y) -> tuple[float, float]:
    """Least-squares fit of ``y = c / t``; returns ``(c, R^2)``."""
    x = 1.0 / np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c = float(x @ y / (x @ x))
    ss_res = float(np.sum((y - c * x) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return c, 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan


@dataclass(frozen=True)
class BoundCheck:
    """One (policy, M, t) cell: the worst class by margin ``estimate - bound - 3 SE``."""

    policy: str
    M: int
    theta: float
    t: int
    gamma: int
    delta_sq: float
    mc_estimate: float
    std_err: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.mc_estimate <= self.bound + 3.0 * self.std_err


def check_bounds(
    policy: PolicyConfig,
    profile: StreamProfile,
    config: CacheConfig,
    n_trials: int,
    t_probe: int | Sequence[int],
    seed: int = 0,
    sampling: str = "multinomial",
    use_numba: bool | None = None,
) -> list[BoundCheck]:
    """Compare Monte-Carlo per-class discrepancy with :func:`policy_bound` at each probe."""
    res = monte_carlo_discrepancy(
        policy, profile.regime_set, config, n_trials, t_probe, seed=seed, sampling=sampling, use_numba=use_numba
    )
    out = []
    for i, t in enumerate(res.probes):
        bounds = np.array([policy_bound(policy, config, int(t), profile.correlation, p**2) for p in profile.pi])
        r = int(np.argmax(res.mean[i] - bounds - 3.0 * res.std_err[i]))
        out.append(
            BoundCheck(
                policy.kind,
                config.M,
                policy.theta,
                int(t),
                profile.correlation.gamma,
                profile.correlation.delta_sq,
                float(res.mean[i, r]),
                float(res.std_err[i, r]),
                float(bounds[r]),
            )
        )
    return out
