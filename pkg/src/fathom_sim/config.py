"""Run configuration: a flat ``key = value`` file with TOML value syntax.

Unknown keys, duplicate keys and missing required keys are errors; every
error names the key and, where there is one, the line.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import controller


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class RunConfig:
    objective: str
    rounds: int
    algorithm: str = "fathom"
    clients_per_round: int = 10
    # federation
    num_clients: int = 100
    size_law: str = "lognormal"
    size_median: int = 100
    size_sigma: float = 0.5
    min_size: int = 1
    max_size: int = 1000
    dirichlet_beta: float = 0.5
    n_features: int = 9
    n_classes: int = 2
    class_sep: float = 1.0
    feature_offset: float = 0.0
    dispersion: float = 1.0
    spread: float = 1.0
    hidden: int = 8
    curvature: float = 1.0
    data_seed: int = 0
    eval_mode: str = "fresh"
    eval_fraction: float = 0.2
    # hyperparameters
    eta0: float = 0.1
    epochs0: float = 1.0
    batch0: float = 20.0
    gamma_eta: float = controller.GAMMA_ETA
    gamma_epochs: float = controller.GAMMA_EPOCHS
    gamma_batch: float = controller.GAMMA_BATCH
    alpha: float = controller.ALPHA
    guard_rails: bool = False
    # measurement
    eval_every: int = 1
    target_loss: list = field(default_factory=list)
    target_acc: list = field(default_factory=list)
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        checks = [
            (self.algorithm in ("fathom", "fedavg"), "algorithm", "must be 'fathom' or 'fedavg'"),
            (self.objective in ("quadratic", "logistic", "mlp"), "objective",
             "must be 'quadratic', 'logistic' or 'mlp'"),
            (self.rounds >= 1, "rounds", "must be >= 1"),
            (1 <= self.clients_per_round <= self.num_clients, "clients_per_round",
             "must be in [1, num_clients]"),
            (min(self.eta0, self.epochs0, self.batch0) > 0, "eta0", "eta0, epochs0, batch0 must be > 0"),
            (min(self.gamma_eta, self.gamma_epochs, self.gamma_batch) >= 0, "gamma_eta",
             "meta step sizes must be >= 0"),
            (0.0 <= self.alpha < 1.0, "alpha", "must be in [0, 1)"),
            (self.eval_every >= 1, "eval_every", "must be >= 1"),
            (self.eval_mode in ("fresh", "holdout"), "eval_mode", "must be 'fresh' or 'holdout'"),
            (0.0 < self.eval_fraction < 1.0, "eval_fraction", "must be in (0, 1)"),
            (self.dirichlet_beta > 0, "dirichlet_beta", "must be > 0"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}", key=key)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_REQUIRED = [f.name for f in fields(RunConfig)
             if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING]
_TYPES = {"int": int, "float": float, "str": str, "bool": bool, "list": list}


def _coerce(key: str, value, line: int):
    want = _TYPES[_FIELDS[key].type]
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is list:
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected a list of numbers", line, key)
        return [float(v) for v in value]
    if want is int and isinstance(value, bool) or not isinstance(value, want):
        raise ConfigError(f"{key}: expected {want.__name__}, got {type(value).__name__}", line, key)
    return value


def parse_config_text(text: str) -> RunConfig:
    values, seen = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            raise ConfigError("tables are not supported; use flat key = value lines", lineno)
        key, sep, rest = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw!r}", lineno)
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno, key)
        try:
            value = tomllib.loads(f"v = {rest.strip()}")["v"]
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno, key) from None
        seen[key] = lineno
        values[key] = _coerce(key, value, lineno)
    for key in _REQUIRED:
        if key not in values:
            raise ConfigError(f"missing required key {key!r}", key=key)
    return RunConfig(**values)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    if isinstance(value, float):
        text = repr(value)
        return text if any(ch in text for ch in ".eEn") else text + ".0"
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))
