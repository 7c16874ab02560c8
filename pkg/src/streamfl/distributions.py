"""Non-stationary label streams.

A client's stream is a Markov chain over a small set of label distributions
("regimes"). Each round the chain moves to a new regime and the client receives
``batch_size`` labels drawn from it. Transitions favour regimes that are close
in symmetrised KL divergence, which gives the stream temporal correlation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .rng import generator_from_state

KL_EPS = 1e-9
STATIONARY_TOL = 1e-12
STATIONARY_MAX_ITER = 1_000_000
NOISE_FLOOR_SIGMAS = 3.0


class DegenerateStreamError(ValueError):
    """The stream shows no variation around its long-term distribution."""


def as_distribution(probs, atol: float = 1e-9) -> np.ndarray:
    """Validate a probability vector and return it as a float64 array."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"distribution must be a non-empty vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("distribution has non-finite entries")
    if np.any(p < 0):
        raise ValueError(f"distribution has negative entries: {p}")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"distribution sums to {p.sum()!r}, expected 1")
    return p


def smooth(p: np.ndarray, eps: float = KL_EPS) -> np.ndarray:
    """Replace exact zeros by ``eps`` and renormalise."""
    if np.all(p > 0):
        return p
    q = np.where(p > 0, p, eps)
    return q / q.sum()


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; zero entries of ``q`` are smoothed first."""
    p = as_distribution(p)
    q = as_distribution(q)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    q = smooth(q)
    mask = p > 0
    return max(float(np.sum(p[mask] * np.log(p[mask] / q[mask]))), 0.0)


def symmetric_kl(p, q) -> float:
    return 0.5 * (kl_divergence(p, q) + kl_divergence(q, p))


def build_regimes(
    rng: np.random.Generator,
    n_classes: int,
    n_regimes: int,
    concentration: float,
    support: Sequence[int] | None = None,
) -> np.ndarray:
    """Draw ``n_regimes`` label distributions from a symmetric Dirichlet.

    ``support`` restricts the mass to a subset of classes; the other entries
    are exactly zero. ``concentration=math.inf`` gives uniform regimes.
    Returns an ``(n_regimes, n_classes)`` array.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_regimes < 1:
        raise ValueError("need at least one regime")
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    support = np.arange(n_classes) if support is None else np.asarray(support, dtype=np.int64)
    if support.size == 0 or support.min() < 0 or support.max() >= n_classes:
        raise ValueError(f"invalid support {support.tolist()} for {n_classes} classes")
    regimes = np.zeros((n_regimes, n_classes))
    if math.isinf(concentration):
        regimes[:, support] = 1.0 / support.size
    elif support.size == 1:
        regimes[:, support] = 1.0
    else:
        draws = rng.dirichlet(np.full(support.size, float(concentration)), size=n_regimes)
        regimes[:, support] = draws / draws.sum(axis=1, keepdims=True)
    return regimes


def symmetric_kl_matrix(regimes: np.ndarray) -> np.ndarray:
    n = len(regimes)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = symmetric_kl(regimes[i], regimes[j])
    return out


def build_transition_matrix(regimes, beta: float) -> np.ndarray:
    """Row-softmax of ``-beta * KLsym``: closer regimes are likelier successors."""
    regimes = np.asarray(regimes, dtype=np.float64)
    if regimes.ndim != 2 or len(regimes) == 0:
        raise ValueError("regime set is empty")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    logits = -beta * symmetric_kl_matrix(regimes)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def stationary_distribution(
    transition, tol: float = STATIONARY_TOL, max_iter: int = STATIONARY_MAX_ITER
) -> np.ndarray:
    """Fixed point of ``mu @ P`` by power iteration from the uniform vector.

    Iteration ``k`` multiplies by ``P^(2^k)`` (kept by repeated squaring), so
    nearly reducible chains with very slow mixing still converge in a few
    dozen steps. The stopping residual is always measured against ``P``.
    """
    P = np.asarray(transition, dtype=np.float64)
    n = P.shape[0]
    mu = np.full(n, 1.0 / n)
    Q = P.copy()
    residual = math.inf
    for _ in range(max_iter):
        residual = float(np.abs(mu @ P - mu).sum())
        if residual < tol:
            return mu
        mu = mu @ Q
        mu /= mu.sum()
        Q = Q @ Q
        Q /= Q.sum(axis=1, keepdims=True)
    raise RuntimeError(f"power iteration did not converge after {max_iter} iterations (residual {residual:.3e})")


def long_term_distribution(regimes, stationary) -> np.ndarray:
    regimes = np.asarray(regimes, dtype=np.float64)
    mu = np.asarray(stationary, dtype=np.float64)
    if len(regimes) != len(mu):
        raise ValueError(f"{len(regimes)} regimes but {len(mu)} stationary weights")
    pi = mu @ regimes
    return pi / pi.sum()


@dataclass(frozen=True)
class RegimeSet:
    regimes: np.ndarray
    beta: float
    transition: np.ndarray
    stationary: np.ndarray

    @classmethod
    def build(cls, regimes, beta: float) -> "RegimeSet":
        regimes = np.asarray(regimes, dtype=np.float64)
        P = build_transition_matrix(regimes, beta)
        return cls(regimes, float(beta), P, stationary_distribution(P))

    @property
    def n_regimes(self) -> int:
        return len(self.regimes)

    @property
    def n_classes(self) -> int:
        return self.regimes.shape[1]

    def long_term(self) -> np.ndarray:
        return long_term_distribution(self.regimes, self.stationary)

    def to_dict(self) -> dict:
        return {
            "regimes": self.regimes.tolist(),
            "beta": self.beta,
            "transition": self.transition.tolist(),
            "stationary": self.stationary.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RegimeSet":
        return cls(
            np.asarray(doc["regimes"], dtype=np.float64),
            float(doc["beta"]),
            np.asarray(doc["transition"], dtype=np.float64),
            np.asarray(doc["stationary"], dtype=np.float64),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RegimeSet":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class CorrelationProfile:
    gamma: int
    delta_sq: float
    lag_profile: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not self.delta_sq > 0:
            raise ValueError("delta_sq must be > 0")


@dataclass(frozen=True)
class StreamState:
    current_regime: int
    round: int
    rng_state: dict = field(repr=False)


def start_stream(regime_set: RegimeSet, rng: np.random.Generator) -> StreamState:
    """Initial state with the regime drawn from the stationary law (round 0)."""
    first = int(rng.choice(regime_set.n_regimes, p=regime_set.stationary))
    return StreamState(first, 0, rng.bit_generator.state)


def _batch_counts(rng, probs, batch_size: int, sampling: str) -> np.ndarray:
    if sampling == "multinomial":
        return rng.multinomial(batch_size, probs).astype(np.int64)
    if sampling == "proportional":
        from .cache import apportion

        return apportion(batch_size * probs, batch_size)
    raise ValueError(f"unknown sampling mode {sampling!r}")


def advance_stream(
    state: StreamState, regime_set: RegimeSet, batch_size: int, sampling: str = "multinomial"
) -> tuple[StreamState, np.ndarray, np.ndarray]:
    """Move the chain one step and draw the round's batch.

    Returns ``(new_state, u, counts)`` where ``counts`` are the per-class label
    counts of the batch and ``u = counts / batch_size``.
    """
    if not 0 <= state.current_regime < regime_set.n_regimes:
        raise ValueError(f"regime index {state.current_regime} out of range")
    rng = generator_from_state(state.rng_state)
    row = regime_set.transition[state.current_regime]
    nxt = int(rng.choice(regime_set.n_regimes, p=row))
    counts = _batch_counts(rng, regime_set.regimes[nxt], batch_size, sampling)
    new_state = replace(state, current_regime=nxt, round=state.round + 1, rng_state=rng.bit_generator.state)
    return new_state, counts / batch_size, counts


def sample_stream_counts(
    regime_set: RegimeSet,
    batch_size: int,
    n_rounds: int,
    rng: np.random.Generator,
    n_streams: int = 1,
    sampling: str = "multinomial",
) -> np.ndarray:
    """Vectorised batch counts for ``n_streams`` independent streams.

    Returns an int64 array of shape ``(n_streams, n_rounds, R)``; round ``t``
    (1-based) is at index ``t - 1``. Chains start from the stationary law.
    """
    cum_stat = np.cumsum(regime_set.stationary)
    cum_rows = np.cumsum(regime_set.transition, axis=1)
    last = regime_set.n_regimes - 1
    cur = np.minimum(np.searchsorted(cum_stat, rng.random(n_streams), side="right"), last)
    out = np.empty((n_streams, n_rounds, regime_set.n_classes), dtype=np.int64)
    if sampling == "proportional":
        from .cache import apportion

        fixed = np.array([apportion(batch_size * r, batch_size) for r in regime_set.regimes])
    for t in range(n_rounds):
        draw = rng.random(n_streams)
        cur = np.minimum((cum_rows[cur] <= draw[:, None]).sum(axis=1), last)
        if sampling == "multinomial":
            out[:, t] = rng.multinomial(batch_size, regime_set.regimes[cur])
        elif sampling == "proportional":
            out[:, t] = fixed[cur]
        else:
            raise ValueError(f"unknown sampling mode {sampling!r}")
    return out


def lag_covariances(u_series, pi, tau_max: int) -> np.ndarray:
    """Empirical ``max_r E[(u_t - pi)(u_{t-tau} - pi)]`` for ``tau = 0..tau_max``."""
    dev = np.asarray(u_series, dtype=np.float64) - np.asarray(pi, dtype=np.float64)
    T = len(dev)
    out = np.empty(tau_max + 1)
    for tau in range(tau_max + 1):
        out[tau] = np.max(np.mean(dev[tau:] * dev[: T - tau], axis=0))
    return out


def estimate_correlation(u_series, pi, tau_max: int) -> CorrelationProfile:
    """Estimate the correlation horizon and covariance bound of a stream.

    ``delta_sq`` is the largest lag covariance over ``0..tau_max``. ``gamma``
    is the end of the initial run of lags whose covariance exceeds
    ``3 / sqrt(T)`` times the lag-0 value (0 if lag 1 is already below).
    Isolated exceedances further out are treated as estimator noise.
    """
    u_series = np.asarray(u_series, dtype=np.float64)
    T = len(u_series)
    if tau_max < 0:
        raise ValueError("tau_max must be >= 0")
    if T < 10 * max(tau_max, 1):
        raise ValueError(f"series of length {T} too short for tau_max={tau_max} (need {10 * max(tau_max, 1)})")
    cov = lag_covariances(u_series, pi, tau_max)
    delta_sq = float(cov.max())
    if not delta_sq > 0:
        raise DegenerateStreamError("degenerate stream: no covariance around the long-term distribution")
    floor = NOISE_FLOOR_SIGMAS / math.sqrt(T) * cov[0]
    below = np.flatnonzero(cov[1:] <= floor)
    gamma = int(below[0]) if below.size else tau_max
    return CorrelationProfile(gamma, delta_sq, cov)


@dataclass(frozen=True)
class StreamProfile:
    support: np.ndarray
    regime_set: RegimeSet
    pi: np.ndarray
    correlation: CorrelationProfile


def build_stream_profile(
    seed: int,
    client: int,
    n_classes: int,
    support,
    n_regimes: int = 10,
    concentration: float = 0.5,
    beta: float = 1.0,
    batch_size: int = 150,
    calibration_rounds: int = 10_000,
    tau_max: int = 200,
    sampling: str = "multinomial",
) -> StreamProfile:
    """Regimes, chain and calibrated correlation profile of one client's stream."""
    from .rng import substream

    regimes = build_regimes(substream(seed, client, "regimes"), n_classes, n_regimes, concentration, support)
    regime_set = RegimeSet.build(regimes, beta)
    pi = regime_set.long_term()
    calib = sample_stream_counts(
        regime_set, batch_size, calibration_rounds, substream(seed, client, "calibration"), sampling=sampling
    )[0]
    correlation = estimate_correlation(calib / batch_size, pi, min(tau_max, calibration_rounds // 10))
    return StreamProfile(np.asarray(support, dtype=np.int64), regime_set, pi, correlation)
