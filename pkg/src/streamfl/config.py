"""Experiment configuration and its JSON form."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .cache import CacheConfig, PolicyConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    n_regimes: int = 10
    beta: float = 1.0
    concentration: float = 0.5
    sampling: str = "multinomial"
    calibration_rounds: int = 10_000
    tau_max: int = 200


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 32
    feature_dim: int = 16
    noise_sigma: float = 1.0
    test_size: int = 2000
    eval_interval: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    K: int = 10
    R: int = 10
    C: int = 3
    T: int = 300
    E: int = 5
    eta: float = 1.0
    eta_L: float = 0.1
    capacity: int = 300
    batch_size: int = 150
    policy: str = "DRSR"
    theta: float = 2.0 / 3.0
    seed: int = 0
    full_refresh: bool = True
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.policy, str):
            object.__setattr__(self, "policy", self.policy.upper())
        checks = [
            ("K", self.K >= 1, "must be >= 1"),
            ("R", self.R >= 2, "must be >= 2"),
            ("C", 1 <= self.C <= self.R, f"must satisfy 1 <= C <= R={self.R}"),
            ("T", self.T >= 1, "must be >= 1"),
            ("E", self.E >= 1, "must be >= 1"),
            ("eta", self.eta > 0, "must be > 0"),
            ("eta_L", self.eta_L > 0, "must be > 0"),
            ("seed", self.seed >= 0, "must be >= 0"),
            ("stream.n_regimes", self.stream.n_regimes >= 1, "must be >= 1"),
            ("stream.beta", self.stream.beta >= 0, "must be >= 0"),
            ("stream.concentration", self.stream.concentration > 0, "must be > 0"),
            ("stream.sampling", self.stream.sampling in ("multinomial", "proportional"), "must be multinomial or proportional"),
            ("model.feature_dim", self.model.feature_dim >= self.R, f"must be >= R={self.R}"),
            ("model.eval_interval", self.model.eval_interval >= 1, "must be >= 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name}: {msg} (got {self._get(name)!r})")
        try:
            self.cache
            self.policy_config
        except ValueError as exc:
            raise ConfigError(f"capacity/batch_size/policy/theta: {exc}") from None

    def _get(self, dotted: str):
        obj = self
        for part in dotted.split("."):
            obj = getattr(obj, part)
        return obj

    @property
    def cache(self) -> CacheConfig:
        return CacheConfig(self.capacity, self.batch_size)

    @property
    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(self.policy, self.theta)

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        doc = dict(doc)
        nested = {}
        for key, sub in (("stream", StreamConfig), ("model", ModelConfig)):
            if key in doc:
                nested[key] = _build(sub, doc.pop(key), prefix=f"{key}.")
        obj = _build(cls, doc, prefix="", **nested)
        return obj


def _build(klass, doc, prefix: str, **extra):
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected an object")
    known = {f.name: f for f in fields(klass)}
    kwargs = dict(extra)
    for key, value in doc.items():
        if key not in known or key in extra:
            raise ConfigError(f"{prefix}{key}: unknown field")
        default = known[key].default
        if isinstance(default, bool) or default is None:
            kwargs[key] = value
            continue
        try:
            if isinstance(default, int) and not isinstance(value, bool):
                if isinstance(value, float) and not value.is_integer():
                    raise TypeError
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            elif isinstance(default, str):
                if not isinstance(value, str):
                    raise TypeError
                kwargs[key] = value
            else:
                kwargs[key] = value
        except (TypeError, ValueError):
            raise ConfigError(f"{prefix}{key}: invalid value {value!r}") from None
    return klass(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentConfig.from_dict(doc)
