"""Count-only cache simulation kernels.

Both implementations replay :func:`streamfl.cache.next_counts` over many
independent streams of pre-drawn batch counts and return the squared
deviations ``(v_t - pi)^2`` at the requested probe rounds. The numba kernel
loops per stream; the numpy kernel vectorises across streams. They produce
identical integers and bitwise-identical ideal counts.
"""

from __future__ import annotations

import numpy as np

from ._accel import HAVE_NUMBA, njit

KIND_CODES = {"FIFO": 0, "SRSR": 1, "DRSR": 2, "LAZY": 3, "FULL": 4}


@njit(cache=True)
def _apportion_nb(targets, total, caps, out):
    R = targets.shape[0]
    frac = np.empty(R)
    deficit = total
    for r in range(R):
        f = np.floor(targets[r])
        frac[r] = targets[r] - f
        v = np.int64(f)
        if v > caps[r]:
            v = caps[r]
        out[r] = v
        deficit -= v
    # stable descending order of fractional parts (insertion sort, R is small)
    order = np.arange(R)
    for i in range(1, R):
        j = i
        while j > 0 and frac[order[j - 1]] < frac[order[j]]:
            tmp = order[j - 1]
            order[j - 1] = order[j]
            order[j] = tmp
            j -= 1
    while deficit > 0:
        for k in range(R):
            if deficit == 0:
                break
            r = order[k]
            if out[r] < caps[r]:
                out[r] += 1
                deficit -= 1


@njit(cache=True)
def _simulate_nb(kind, stream, capacity, batch_size, theta, pi, probes, full_counts):
    n, T, R = stream.shape
    M = capacity // batch_size
    P = probes.shape[0]
    dev2 = np.zeros((n, P, R))
    counts = np.zeros(R, dtype=np.int64)
    ideal = np.zeros(R)
    caps = np.zeros(R, dtype=np.int64)
    newc = np.zeros(R, dtype=np.int64)
    for i in range(n):
        if kind == 4:
            for r in range(R):
                counts[r] = full_counts[r]
                ideal[r] = full_counts[r]
        else:
            for r in range(R):
                counts[r] = 0
                ideal[r] = 0.0
        p = 0
        for t in range(1, T + 1):
            if kind != 4:
                if t <= M:
                    for r in range(R):
                        counts[r] += stream[i, t - 1, r]
                        ideal[r] = counts[r]
                elif kind == 0:
                    for r in range(R):
                        counts[r] += stream[i, t - 1, r] - stream[i, t - 1 - M, r]
                        ideal[r] = counts[r]
                elif kind == 1 or kind == 2:
                    th = theta
                    if kind == 2:
                        th = min(1.0, capacity / (batch_size * t))
                    keep = 1.0 - (batch_size / capacity) * th
                    for r in range(R):
                        ideal[r] = keep * ideal[r] + th * stream[i, t - 1, r]
                        caps[r] = counts[r] + stream[i, t - 1, r]
                    _apportion_nb(ideal, capacity, caps, newc)
                    for r in range(R):
                        counts[r] = newc[r]
            while p < P and probes[p] == t:
                total = 0
                for r in range(R):
                    total += counts[r]
                for r in range(R):
                    d = counts[r] / total - pi[r]
                    dev2[i, p, r] = d * d
                p += 1
    return dev2


def _apportion_rows(targets, total, caps):
    floors = np.floor(targets)
    frac = targets - floors
    out = np.minimum(floors.astype(np.int64), caps)
    deficit = total - out.sum(axis=1)
    order = np.argsort(-frac, axis=1, kind="stable")
    while np.any(deficit > 0):
        eligible = np.take_along_axis(out < caps, order, axis=1)
        rank = np.cumsum(eligible, axis=1) - 1
        give_sorted = eligible & (rank < deficit[:, None])
        give = np.zeros_like(give_sorted)
        np.put_along_axis(give, order, give_sorted, axis=1)
        if not give.any():
            raise RuntimeError("apportionment cannot make progress")
        out += give
        deficit -= give.sum(axis=1)
    return out


def _simulate_np(kind, stream, capacity, batch_size, theta, pi, probes, full_counts):
    n, T, R = stream.shape
    M = capacity // batch_size
    dev2 = np.zeros((n, len(probes), R))
    if kind == 4:
        counts = np.tile(np.asarray(full_counts, dtype=np.int64), (n, 1))
    else:
        counts = np.zeros((n, R), dtype=np.int64)
    ideal = counts.astype(np.float64)
    probe_slot = {int(t): k for k, t in enumerate(probes)}
    for t in range(1, T + 1):
        if kind != 4:
            batch = stream[:, t - 1]
            if t <= M:
                counts = counts + batch
                ideal = counts.astype(np.float64)
            elif kind == 0:
                counts = counts + (batch - stream[:, t - 1 - M])
                ideal = counts.astype(np.float64)
            elif kind in (1, 2):
                th = theta if kind == 1 else min(1.0, capacity / (batch_size * t))
                keep = 1.0 - (batch_size / capacity) * th
                ideal = keep * ideal + th * batch
                counts = _apportion_rows(ideal, capacity, counts + batch)
        if t in probe_slot:
            v = counts / counts.sum(axis=1, keepdims=True)
            dev2[:, probe_slot[t]] = (v - pi) ** 2
    return dev2


def simulate_counts(kind: str, stream, capacity: int, batch_size: int, theta: float, pi, probes, full_counts=None, use_numba=None):
    """Squared deviation ``(v_t - pi)^2`` of every stream at each probe round.

    ``stream`` is an int64 array ``(n_streams, T, R)`` of batch counts.
    ``probes`` must be sorted, 1-based and ``<= T``. Returns ``(n, P, R)``.
    """
    stream = np.ascontiguousarray(stream, dtype=np.int64)
    probes = np.asarray(probes, dtype=np.int64)
    if probes.size and (np.any(np.diff(probes) <= 0) or probes[0] < 1 or probes[-1] > stream.shape[1]):
        raise ValueError(f"probe rounds must be strictly increasing within 1..{stream.shape[1]}")
    pi = np.asarray(pi, dtype=np.float64)
    R = stream.shape[2]
    if full_counts is None:
        full_counts = np.zeros(R, dtype=np.int64)
    full_counts = np.asarray(full_counts, dtype=np.int64)
    code = KIND_CODES[kind]
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba and not HAVE_NUMBA:
        raise RuntimeError("numba requested but unavailable")
    fn = _simulate_nb if use_numba else _simulate_np
    return fn(code, stream, int(capacity), int(batch_size), float(theta), pi, probes, full_counts)
