"""Synthetic classification task and a small dense softmax classifier.

Class ``r`` has mean ``separation * e_r`` in the first ``R`` feature
coordinates and isotropic Gaussian noise. For orthogonal means the Bayes
classifier under equal priors is ``argmax_j x_j`` and its accuracy is

    P(correct) = integral phi(z) Phi(z + separation / sigma)^(R - 1) dz

The default separation solves that equation for a Bayes accuracy of 0.95
(3.4182 for R = 10 and sigma = 1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

BAYES_ACCURACY = 0.95
DEFAULT_HIDDEN = 32
DEFAULT_FEATURE_DIM = 16


def bayes_accuracy(separation_over_sigma: float, n_classes: int) -> float:
    """Accuracy of the Bayes classifier for orthogonal equal-norm means."""
    z = np.linspace(-12.0, 12.0, 24001)
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    erf = np.vectorize(math.erf)
    cdf = 0.5 * (1.0 + erf((z + separation_over_sigma) / math.sqrt(2.0)))
    return float(np.trapezoid(pdf * cdf ** (n_classes - 1), z))


def separation_for_accuracy(n_classes: int, target: float = BAYES_ACCURACY) -> float:
    """Bisection on :func:`bayes_accuracy` for the separation/sigma ratio."""
    lo, hi = 0.0, 20.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if bayes_accuracy(mid, n_classes) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class SyntheticTask:
    n_classes: int
    feature_dim: int
    class_means: np.ndarray
    noise_sigma: float
    test_features: np.ndarray
    test_labels: np.ndarray

    @classmethod
    def build(
        cls,
        rng: np.random.Generator,
        n_classes: int,
        feature_dim: int = DEFAULT_FEATURE_DIM,
        noise_sigma: float = 1.0,
        test_size: int = 2000,
        test_classes=None,
        separation: float | None = None,
    ) -> "SyntheticTask":
        """Build a task whose test set is balanced over ``test_classes`` (default all)."""
        if feature_dim < n_classes:
            raise ValueError(f"feature_dim {feature_dim} < n_classes {n_classes}")
        if separation is None:
            separation = separation_for_accuracy(n_classes) * noise_sigma
        means = np.zeros((n_classes, feature_dim))
        means[np.arange(n_classes), np.arange(n_classes)] = separation
        classes = np.arange(n_classes) if test_classes is None else np.asarray(sorted(test_classes))
        labels = classes[np.arange(test_size) % len(classes)]
        features = means[labels] + noise_sigma * rng.standard_normal((test_size, feature_dim))
        return cls(n_classes, feature_dim, means, float(noise_sigma), features, labels)

    @property
    def test_set(self) -> tuple[np.ndarray, np.ndarray]:
        return self.test_features, self.test_labels


def sample_item(rng: np.random.Generator, task: SyntheticTask, label: int) -> np.ndarray:
    if not 0 <= label < task.n_classes:
        raise ValueError(f"label {label} out of range")
    return task.class_means[label] + task.noise_sigma * rng.standard_normal(task.feature_dim)


def sample_items(rng: np.random.Generator, task: SyntheticTask, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    noise = rng.standard_normal((len(labels), task.feature_dim))
    return task.class_means[labels] + task.noise_sigma * noise


@dataclass(frozen=True)
class ModelParams:
    """Flat parameters of ``input -> tanh hidden -> softmax``.

    Layout: ``W1 (d, h)``, ``b1 (h)``, ``W2 (h, R)``, ``b2 (R)``.
    """

    flat: np.ndarray
    dims: tuple[int, int, int]

    @staticmethod
    def size_for(dims) -> int:
        d, h, R = dims
        return d * h + h + h * R + R

    def __post_init__(self):
        if self.flat.shape != (self.size_for(self.dims),):
            raise ValueError(f"parameter vector of shape {self.flat.shape} does not match dims {self.dims}")

    @classmethod
    def zeros(cls, dims) -> "ModelParams":
        return cls(np.zeros(cls.size_for(dims)), tuple(dims))

    @classmethod
    def init(cls, rng: np.random.Generator, dims) -> "ModelParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every layer."""
        d, h, R = dims
        parts = [
            rng.uniform(-1, 1, d * h) / math.sqrt(d),
            rng.uniform(-1, 1, h) / math.sqrt(d),
            rng.uniform(-1, 1, h * R) / math.sqrt(h),
            rng.uniform(-1, 1, R) / math.sqrt(h),
        ]
        return cls(np.concatenate(parts), tuple(dims))

    def unpack(self):
        d, h, R = self.dims
        f = self.flat
        i = 0
        W1 = f[i : i + d * h].reshape(d, h)
        i += d * h
        b1 = f[i : i + h]
        i += h
        W2 = f[i : i + h * R].reshape(h, R)
        i += h * R
        return W1, b1, W2, f[i : i + R]

    def replace_flat(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(flat, self.dims)

    def to_json(self) -> str:
        return json.dumps({"dims": list(self.dims), "params": self.flat.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        doc = json.loads(text)
        return cls(np.asarray(doc["params"], dtype=np.float64), tuple(doc["dims"]))


def _check_dataset(features, labels):
    if len(labels) == 0:
        raise ValueError("empty dataset")
    return np.asarray(features, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def logits(params: ModelParams, features) -> np.ndarray:
    W1, b1, W2, b2 = params.unpack()
    return np.tanh(features @ W1 + b1) @ W2 + b2


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward_loss(params: ModelParams, features, labels) -> float:
    """Mean softmax cross-entropy."""
    X, y = _check_dataset(features, labels)
    logp = _log_softmax(logits(params, X))
    return float(-logp[np.arange(len(y)), y].mean())


def loss_and_gradient(params: ModelParams, features, labels) -> tuple[float, np.ndarray]:
    X, y = _check_dataset(features, labels)
    W1, b1, W2, b2 = params.unpack()
    n = len(y)
    H = np.tanh(X @ W1 + b1)
    logp = _log_softmax(H @ W2 + b2)
    dZ = np.exp(logp)
    dZ[np.arange(n), y] -= 1.0
    dZ /= n
    dA = (dZ @ W2.T) * (1.0 - H * H)
    grad = np.concatenate([(X.T @ dA).ravel(), dA.sum(axis=0), (H.T @ dZ).ravel(), dZ.sum(axis=0)])
    return float(-logp[np.arange(n), y].mean()), grad


def gradient(params: ModelParams, features, labels) -> np.ndarray:
    return loss_and_gradient(params, features, labels)[1]


def local_train(params_init: ModelParams, features, labels, E: int, eta_L: float) -> tuple[ModelParams, np.ndarray]:
    """``E`` full-batch gradient steps; returns the final parameters and
    the accumulated update ``-sum_tau g_tau``."""
    if E < 1:
        raise ValueError("E must be >= 1")
    if not eta_L > 0:
        raise ValueError("eta_L must be > 0")
    w = params_init.flat.copy()
    delta = np.zeros_like(w)
    for step in range(E):
        g = gradient(params_init.replace_flat(w), features, labels)
        delta -= g
        w = w - eta_L * g
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"non-finite parameters after local step {step}")
    return params_init.replace_flat(w), delta


def evaluate(params: ModelParams, features, labels) -> float:
    """Top-1 accuracy; ``argmax`` breaks ties toward the lowest class index."""
    X, y = _check_dataset(features, labels)
    return float(np.mean(np.argmax(logits(params, X), axis=1) == y))
