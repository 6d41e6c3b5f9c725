"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

KINDS = ("stream", "bo", "active", "classify", "lts", "export")
OBJECTIVES = {
    "stream": ("sine", "timeseries", "friedman", "csv"),
    "bo": ("hartmann6_constrained", "poisson_hartmann6", "branin"),
    "active": ("spatial",),
    "classify": ("banana", "csv"),
    "lts": ("bimodal",),
    "export": ("sine", "csv"),
}
ACQUISITIONS = ("qkg", "qnei", "ei", "random", "ts", "lts", "nipv", "hotspot")
SELECTIONS = ("pivoted", "resample", "fixed", "osgpr")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    kind: str = "stream"
    objective: str = "sine"
    seed: int = 0
    n_seeds: int = 1
    # budget
    n_init: int = 32
    iterations: int = 10
    q: int = 1
    batch_size: int = 1
    n_points: int = 1000
    n_test: int = 200
    # model
    model: str = "sparse"
    p: int = 16
    p_cap: int = 25
    likelihood: str = "gaussian"
    noise_std: float = 0.1
    train_steps: int = 50
    lr: float = 0.1
    selection: str = "pivoted"
    osgpr_steps: int = 5
    # acquisition
    acquisition: str = "qkg"
    mc_samples: int = 64
    restarts: int = 4
    raw_samples: int = 128
    maxiter: int = 50
    horizon: int = 3
    paths: int = 4
    candidates: int = 256
    grid_size: int = 20
    tau: float = 0.2
    k_inner: int = 16
    k_outer: int = 16
    # data / output
    data_path: str = ""
    features: str = "x"
    target: str = "y"
    trials_column: str = ""
    snapshot_format: str = "text"
    out: str = "results"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.objective not in OBJECTIVES[self.kind]:
            raise ConfigError(f"objective {self.objective!r} not available for {self.kind!r}; "
                              f"choose from {OBJECTIVES[self.kind]}")
        if self.acquisition not in ACQUISITIONS:
            raise ConfigError(f"unknown acquisition {self.acquisition!r}")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"unknown selection rule {self.selection!r}")
        if self.model not in ("exact", "sparse"):
            raise ConfigError("model must be 'exact' or 'sparse'")
        if self.snapshot_format not in ("text", "binary"):
            raise ConfigError("snapshot_format must be 'text' or 'binary'")
        for name in ("n_seeds", "q", "batch_size", "n_points", "n_test", "p", "p_cap",
                     "mc_samples", "restarts", "raw_samples", "maxiter", "paths",
                     "candidates", "grid_size", "k_inner", "k_outer"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_init", "iterations", "train_steps", "horizon", "seed", "osgpr_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.noise_std <= 0 or self.lr <= 0:
            raise ConfigError("noise_std and lr must be positive")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError("tau must lie in [0, 1)")
        if self.p > self.p_cap and self.kind in ("bo", "active"):
            raise ConfigError(f"p={self.p} exceeds p_cap={self.p_cap}")
        if self.objective == "csv" and not self.data_path:
            raise ConfigError("objective 'csv' needs data_path")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name, raw: str):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    typ = types[name]
    raw = raw.strip()
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return raw


def parse_pairs(lines, source="<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, val)
    return out


def load_config(path=None, overrides=(), **explicit) -> ExperimentConfig:
    """Build a config from a file, ``key=value`` overrides and keyword values.

    Later sources win: file, then overrides, then keywords that are not None.
    """
    values = {}
    if path:
        try:
            with open(path) as fh:
                values.update(parse_pairs(fh, str(path)))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values.update(parse_pairs(overrides, "--override"))
    values.update({k: v for k, v in explicit.items() if v is not None})
    kind = values.get("kind", "stream")
    if kind in OBJECTIVES:
        values.setdefault("objective", OBJECTIVES[kind][0])
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    return "\n".join(f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)) + "\n"
