"""Partition drift between training snapshots and the spline Early-Bird rule.

The distance between two snapshots is the fraction of code bits that differ
over a fixed probe set, so it already lies in [0, 1].  Training may stop once
``window`` consecutive snapshot-to-snapshot distances are all below ``tau``.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, ConfigError
from .partition import ActivationCodeSet, codes_of_batch


def _check_aligned(a: ActivationCodeSet, b: ActivationCodeSet):
    if a.bits.shape != b.bits.shape:
        raise AlignmentError(f"code sets have shapes {a.bits.shape} and {b.bits.shape}")
    if not np.array_equal(a.datum_ids, b.datum_ids):
        raise AlignmentError("code sets cover different data (or a different order)")


def hamming_distance(a: ActivationCodeSet, b: ActivationCodeSet) -> float:
    """Differing bits over total bits, across all data."""
    _check_aligned(a, b)
    if a.bits.size == 0:
        return 0.0
    return float(np.count_nonzero(a.bits != b.bits) / a.bits.size)


@dataclass
class DistanceMatrix:
    values: np.ndarray
    epochs: list

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch"] + list(self.epochs))
            for e, row in zip(self.epochs, self.values):
                writer.writerow([e] + [repr(float(x)) for x in row])
        return path


def distance_matrix(snapshots: Sequence[ActivationCodeSet]) -> DistanceMatrix:
    if len(snapshots) < 2:
        raise ValueError("a distance matrix needs at least two snapshots")
    for s in snapshots[1:]:
        _check_aligned(snapshots[0], s)
    stacked = np.stack([s.bits for s in snapshots]).reshape(len(snapshots), -1)
    total = stacked.shape[1]
    e = len(snapshots)
    values = np.zeros((e, e))
    for i in range(e):
        diff = np.count_nonzero(stacked[i + 1:] != stacked[i], axis=1) / max(total, 1)
        values[i, i + 1:] = diff
        values[i + 1:, i] = diff
    epochs = [s.epoch if s.epoch is not None else i for i, s in enumerate(snapshots)]
    return DistanceMatrix(values, epochs)


@dataclass
class EBConfig:
    threshold: float = 0.15
    window: int = 2
    probe_size: int = 1024
    probe_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("EB threshold must lie in [0, 1]")
        if self.window < 1:
            raise ConfigError("EB window must be >= 1")

    def probe_indices(self, n: int) -> np.ndarray:
        """Fixed, seed-determined subsample of ``range(n)`` (sorted)."""
        if n <= self.probe_size:
            return np.arange(n)
        rng = np.random.default_rng(self.probe_seed)
        return np.sort(rng.choice(n, size=self.probe_size, replace=False))


@dataclass
class EBReport:
    trigger_epoch: int | None
    distance_trace: list = field(default_factory=list)  # (epoch, distance to previous snapshot)
    threshold: float = 0.15
    window: int = 2
    matrix: DistanceMatrix | None = None

    def to_json(self) -> str:
        return json.dumps({
            "trigger_epoch": self.trigger_epoch,
            "tau": self.threshold,
            "window": self.window,
            "trace": [{"epoch": e, "distance": d} for e, d in self.distance_trace],
        }, sort_keys=True)


class EarlyBirdDetector:
    """Sequential state machine fed one code set per epoch, in epoch order."""

    def __init__(self, config: EBConfig | None = None, keep_snapshots: bool = False):
        self.config = config or EBConfig()
        self.previous: ActivationCodeSet | None = None
        self.recent = deque(maxlen=self.config.window)
        self.trace: list = []
        self.trigger_epoch = None
        self.seen = 0
        self.snapshots: list = [] if keep_snapshots else None

    def update(self, codes: ActivationCodeSet) -> bool:
        """Record a snapshot; True once the stopping predicate holds."""
        if self.snapshots is not None:
            self.snapshots.append(codes)
        epoch = codes.epoch if codes.epoch is not None else self.seen
        self.seen += 1
        if self.previous is not None:
            d = hamming_distance(self.previous, codes)
            self.trace.append((epoch, d))
            self.recent.append(d)
        self.previous = codes
        if (self.trigger_epoch is None and len(self.recent) == self.config.window
                and all(d < self.config.threshold for d in self.recent)):
            self.trigger_epoch = epoch
        return self.trigger_epoch is not None

    def report(self, with_matrix: bool = False) -> EBReport:
        matrix = None
        if with_matrix and self.snapshots and len(self.snapshots) >= 2:
            matrix = distance_matrix(self.snapshots)
        return EBReport(self.trigger_epoch, list(self.trace), self.config.threshold,
                        self.config.window, matrix)


def eb_detect(stream: Iterable[ActivationCodeSet], config: EBConfig | None = None,
              stop_on_trigger: bool = True, with_matrix: bool = False) -> EBReport:
    """Run the detector over snapshots arriving in epoch order."""
    det = EarlyBirdDetector(config, keep_snapshots=with_matrix)
    for codes in stream:
        if det.update(codes) and stop_on_trigger:
            break
    return det.report(with_matrix)


class EarlyBirdCallback:
    """Training callback: snapshot probe codes at each epoch end, stop on trigger.

    Only the probe inputs and the EB settings enter here, so the trigger
    epoch cannot depend on any pruning choice made afterwards.
    """

    def __init__(self, probe_x, config: EBConfig | None = None, keep_snapshots: bool = False):
        self.probe_x = np.asarray(probe_x, dtype=np.float64)
        self.detector = EarlyBirdDetector(config, keep_snapshots=keep_snapshots)

    def __call__(self, epoch, net, metrics=None) -> bool:
        triggered = self.detector.update(codes_of_batch(net, self.probe_x, epoch=epoch))
        if metrics is not None and self.detector.trace:
            metrics["code_distance"] = self.detector.trace[-1][1]
        return triggered

    def report(self, with_matrix: bool = False) -> EBReport:
        return self.detector.report(with_matrix)
