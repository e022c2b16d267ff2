"""Experiment configuration, stored as JSON.

A config file is one JSON object.  Every key is optional except ``kind``;
missing keys take the defaults below.  Nested objects: ``train`` (SGD
settings), ``prune``, ``eb``, ``data``, ``sawtooth``, ``kmeans``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .earlybird import EBConfig
from .engine import TrainConfig
from .errors import ConfigError

KINDS = ("sawtooth", "xshape", "kmeans", "earlybird", "prune_pipeline", "rho_sweep", "mnist_slice")
POLICIES = ("spline", "spline_global", "magnitude", "magnitude_global", "random")


@dataclass
class PruneSettings:
    policy: str = "spline"
    policies: list = field(default_factory=lambda: ["spline", "magnitude", "random"])
    ratios: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95])
    ratio: float = 0.5
    rho: float = 0.05
    rho_grid: list = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2, 0.4])
    compensation: str = "none"
    pca_dim: int | None = None
    fine_tune_epochs: int = 20
    fine_tune_lr: float | None = None  # None: a tenth of the training rate


@dataclass
class DataSettings:
    source: str = "auto"  # xshape, digits or mnist; auto picks by experiment kind
    n_per_class: int = 1000
    noise: float = 0.08
    test_fraction: float = 0.25
    mnist_images: str | None = None
    mnist_labels: str | None = None
    subset: int | None = None  # keep only this many examples of a large set
    probe_size: int | None = None


@dataclass
class SawtoothSettings:
    peaks: int = 2
    widths: list = field(default_factory=lambda: [4, 8, 32])
    n_points: int = 200
    grid_points: int = 1000
    epochs: int = 500
    lr: float = 0.01
    batch_size: int = 20


@dataclass
class KMeansSettings:
    side: int = 8
    spacing: float = 1.0
    jitter: float = 0.1
    sigma_ratio: float = 0.2
    n_samples: int = 6400
    k_final: int = 64
    k_starts: list = field(default_factory=lambda: [64, 96, 128, 192, 256])
    schemes: list = field(default_factory=lambda: ["random", "kmeanspp"])


@dataclass
class ExperimentConfig:
    kind: str
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    hidden: list = field(default_factory=lambda: [20, 20])
    model: str = "auto"  # mlp or conv; auto uses a conv net for image data
    workers: int = 1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=100, batch_size=20, lr=0.05, lr_schedule=TrainConfig.step_decay(100)))
    prune: PruneSettings = field(default_factory=PruneSettings)
    eb: EBConfig = field(default_factory=EBConfig)
    data: DataSettings = field(default_factory=DataSettings)
    sawtooth: SawtoothSettings = field(default_factory=SawtoothSettings)
    kmeans: KMeansSettings = field(default_factory=KMeansSettings)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if any(int(s) < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for policy in [self.prune.policy, *self.prune.policies]:
            if policy not in POLICIES:
                raise ConfigError(f"unknown pruning policy {policy!r}")
        if self.data.source not in ("auto", "xshape", "digits", "mnist"):
            raise ConfigError(f"unknown data source {self.data.source!r}")
        if self.model not in ("auto", "mlp", "conv"):
            raise ConfigError(f"unknown model {self.model!r}")
        for path in (self.data.mnist_images, self.data.mnist_labels):
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"referenced file does not exist: {path}")
        if (self.data.mnist_images is None) != (self.data.mnist_labels is None):
            raise ConfigError("mnist_images and mnist_labels must be given together")
        self.train.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        """sha256 of the canonical (sorted-key) JSON form."""
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError("config must be a JSON object with a 'kind' key")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {"train": TrainConfig, "prune": PruneSettings, "eb": EBConfig,
                  "data": DataSettings, "sawtooth": SawtoothSettings, "kmeans": KMeansSettings}
        kwargs = {}
        for key, value in d.items():
            if key in nested:
                try:
                    kwargs[key] = nested[key](**(value or {}))
                except TypeError as exc:
                    raise ConfigError(f"bad '{key}' section: {exc}") from None
            else:
                kwargs[key] = value
        if "train" not in kwargs:
            epochs = 100
            kwargs["train"] = TrainConfig(epochs=epochs, batch_size=20, lr=0.05,
                                          lr_schedule=TrainConfig.step_decay(epochs))
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def with_overrides(self, seed=None, output_dir=None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["seeds"] = [int(seed)]
        if output_dir is not None:
            d["output_dir"] = str(output_dir)
        return ExperimentConfig.from_dict(d)


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _train(epochs, lr, batch_size) -> dict:
    return {"epochs": epochs, "lr": lr, "batch_size": batch_size,
            "lr_schedule": TrainConfig.step_decay(epochs)}


# Per-kind starting points used when no config file is given.
DEFAULTS = {
    "xshape": {"train": _train(100, 0.05, 20)},
    "rho_sweep": {"train": _train(100, 0.05, 20), "prune": {"ratio": 0.5}},
    "earlybird": {"train": _train(100, 0.05, 20), "prune": {"ratio": 0.5}},
    "prune_pipeline": {"train": _train(20, 0.05, 32), "data": {"source": "digits"},
                       "prune": {"ratio": 0.5, "fine_tune_epochs": 20, "fine_tune_lr": 0.005}},
    "mnist_slice": {"train": _train(20, 0.05, 32), "data": {"source": "digits"},
                    "model": "mlp", "hidden": [32, 32]},
    "sawtooth": {},
    "kmeans": {},
}


def default_config(kind: str, **overrides) -> ExperimentConfig:
    """Defaults for ``kind``; top-level keys in ``overrides`` replace whole entries."""
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    d = {"kind": kind, **DEFAULTS.get(kind, {})}
    d.update(overrides)
    return ExperimentConfig.from_dict(d)
