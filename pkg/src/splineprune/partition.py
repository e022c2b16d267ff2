"""Activation codes, 2-D input-space slices and partition boundaries.

A hidden unit's zero level set (its *subdivision line*) splits input space;
the sign pattern of all hidden pre-activations (the activation code) names
the linear region an input falls in.  Boundaries are traced over a 2-D
affine slice ``x(u, v) = x0 + u (x1 - x0) + v (x2 - x0)`` with marching
squares and linear interpolation of the crossing points.

Grid fields are indexed ``[iv, iu]`` (rows follow ``v``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .engine import Network, predict
from .errors import AlignmentError, DegenerateSliceError

DEFAULT_EXTENT = ((-0.25, 1.25), (-0.25, 1.25))
DEFAULT_RESOLUTION = 100


@dataclass(frozen=True, eq=False)
class ActivationCode:
    bits: np.ndarray  # bool, layer-major
    layer_offsets: tuple

    def __eq__(self, other):
        return (isinstance(other, ActivationCode) and self.layer_offsets == other.layer_offsets
                and np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.packed(), self.layer_offsets))

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return "".join("1" if b else "0" for b in self.bits)

    def packed(self) -> bytes:
        return np.packbits(self.bits).tobytes()

    def hex(self) -> str:
        return self.packed().hex()

    def layer(self, index: int) -> np.ndarray:
        bounds = self.layer_offsets + (len(self.bits),)
        return self.bits[bounds[index]:bounds[index + 1]]


@dataclass(eq=False)
class ActivationCodeSet:
    """Codes of a fixed, ordered collection of data at one training snapshot."""

    bits: np.ndarray  # (n_data, n_bits) bool
    datum_ids: np.ndarray
    layer_offsets: tuple
    epoch: int | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        self.datum_ids = np.asarray(self.datum_ids)
        if self.bits.ndim != 2 or len(self.datum_ids) != len(self.bits):
            raise AlignmentError("one code row per datum id is required")
        if len(np.unique(self.datum_ids)) != len(self.datum_ids):
            raise AlignmentError("datum ids must be unique")

    def __len__(self):
        return len(self.bits)

    @property
    def codes(self) -> list[ActivationCode]:
        return [ActivationCode(row, self.layer_offsets) for row in self.bits]

    def with_epoch(self, epoch) -> "ActivationCodeSet":
        return ActivationCodeSet(self.bits, self.datum_ids, self.layer_offsets, epoch)


def _layer_offsets(net: Network) -> tuple:
    counts = net.hidden_unit_counts()
    return tuple(int(o) for o in np.concatenate([[0], np.cumsum(counts)[:-1]])) if counts else ()


def hidden_signs(net: Network, x, batch_size: int = 4096) -> np.ndarray:
    """``preact >= 0`` for every hidden unit, concatenated layer-major; shape (n, bits)."""
    x = np.asarray(x, dtype=np.float64)
    rows = []
    for i in range(0, len(x), batch_size):
        _, pre = net.forward(x[i:i + batch_size])
        chunk = [p.reshape(len(p), -1) >= 0 for p in pre[:-1]]
        rows.append(np.concatenate(chunk, axis=1) if chunk else np.zeros((len(pre[0]), 0), bool))
    return np.concatenate(rows)


def code_of(net: Network, x) -> ActivationCode:
    x = np.asarray(x, dtype=np.float64)
    return ActivationCode(hidden_signs(net, x[None])[0], _layer_offsets(net))


def codes_of_batch(net: Network, data, epoch=None, datum_ids=None) -> ActivationCodeSet:
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("codes_of_batch needs at least one datum")
    ids = np.arange(len(data)) if datum_ids is None else np.asarray(datum_ids)
    return ActivationCodeSet(hidden_signs(net, data), ids, _layer_offsets(net), epoch)


def write_codes_csv(path, code_sets: Iterable[ActivationCodeSet]) -> Path:
    """CSV with columns ``datum_id, epoch, n_bits, code``; ``code`` is the hex of the packed bits (first bit = MSB)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["datum_id", "epoch", "n_bits", "code"])
        for cs in code_sets:
            for did, row in zip(cs.datum_ids, cs.bits):
                writer.writerow([did, "" if cs.epoch is None else cs.epoch, row.size,
                                 np.packbits(row).tobytes().hex()])
    return path


def read_codes_csv(path, layer_offsets=(0,)) -> list[ActivationCodeSet]:
    by_epoch: dict = {}
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            epoch = int(rec["epoch"]) if rec["epoch"] != "" else None
            nbits = int(rec["n_bits"])
            bits = np.unpackbits(np.frombuffer(bytes.fromhex(rec["code"]), np.uint8))[:nbits]
            ids, rows = by_epoch.setdefault(epoch, ([], []))
            ids.append(int(rec["datum_id"]))
            rows.append(bits.astype(bool))
    return [ActivationCodeSet(np.array(rows), np.array(ids), tuple(layer_offsets), epoch)
            for epoch, (ids, rows) in by_epoch.items()]


@dataclass(eq=False)
class SliceGrid:
    x0: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    extent: tuple
    n: int
    u: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        (umin, umax), (vmin, vmax) = self.extent
        self.u = np.linspace(umin, umax, self.n)
        self.v = np.linspace(vmin, vmax, self.n)

    @property
    def input_shape(self):
        return self.x0.shape

    def point(self, u, v) -> np.ndarray:
        return self.x0 + u * (self.x1 - self.x0) + v * (self.x2 - self.x0)

    @property
    def coords(self) -> np.ndarray:
        """(u, v) of every lattice point, ordered like ``points``; shape (n*n, 2)."""
        uu, vv = np.meshgrid(self.u, self.v)
        return np.stack([uu.ravel(), vv.ravel()], axis=1)

    @property
    def points(self) -> np.ndarray:
        """All lattice inputs, row-major over ``(iv, iu)``; shape (n*n, *input_shape)."""
        c = self.coords
        d1 = (self.x1 - self.x0).ravel()
        d2 = (self.x2 - self.x0).ravel()
        flat = self.x0.ravel() + c[:, :1] * d1 + c[:, 1:] * d2
        return flat.reshape((len(c),) + self.input_shape)

    def as_field(self, values) -> np.ndarray:
        return np.asarray(values).reshape((self.n, self.n) + np.asarray(values).shape[1:])


def make_slice(x0, x1, x2, extent=DEFAULT_EXTENT, n: int = DEFAULT_RESOLUTION) -> SliceGrid:
    x0, x1, x2 = (np.asarray(a, dtype=np.float64) for a in (x0, x1, x2))
    if not x0.shape == x1.shape == x2.shape:
        raise DegenerateSliceError("slice anchors must share one shape")
    if n < 2:
        raise ValueError("slice resolution must be at least 2")
    (umin, umax), (vmin, vmax) = extent
    if not (umin < umax and vmin < vmax):
        raise ValueError("slice extent ranges must be increasing")
    d1, d2 = (x1 - x0).ravel(), (x2 - x0).ravel()
    n1, n2 = d1 @ d1, d2 @ d2
    if n1 == 0 or n2 == 0 or n1 * n2 - (d1 @ d2) ** 2 <= 1e-12 * n1 * n2:
        raise DegenerateSliceError("slice directions x1-x0 and x2-x0 are collinear")
    return SliceGrid(x0, x1, x2, ((float(umin), float(umax)), (float(vmin), float(vmax))), int(n))


def grid_preacts(net: Network, grid: SliceGrid, batch_size: int = 4096) -> list[np.ndarray]:
    """Per linear layer, pre-activations at every lattice point flattened to (n*n, units)."""
    pts = grid.points
    chunks = []
    for i in range(0, len(pts), batch_size):
        _, pre = net.forward(pts[i:i + batch_size])
        chunks.append([p.reshape(len(p), -1) for p in pre])
    return [np.concatenate([c[l] for c in chunks]) for l in range(len(chunks[0]))]


@dataclass(eq=False)
class BoundarySet:
    """Line segments in slice coordinates.

    ``segments[i] = [[u0, v0], [u1, v1]]`` belongs to ``units[i]`` of
    ``layers[i]``; ``cells[i]`` is the ``(iv, iu)`` lattice cell it was
    traced in.
    """

    kind: str
    layers: np.ndarray
    units: np.ndarray
    segments: np.ndarray
    cells: np.ndarray

    @classmethod
    def empty(cls, kind="subdivision"):
        return cls(kind, np.zeros(0, int), np.zeros(0, int), np.zeros((0, 2, 2)), np.zeros((0, 2), int))

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        for l, k, s in zip(self.layers, self.units, self.segments):
            yield int(l), int(k), ((s[0, 0], s[0, 1]), (s[1, 0], s[1, 1]))

    def for_unit(self, unit: int) -> np.ndarray:
        return self.segments[self.units == unit]

    @staticmethod
    def concat(sets: Sequence["BoundarySet"], kind=None) -> "BoundarySet":
        sets = list(sets)
        if not sets:
            return BoundarySet.empty(kind or "subdivision")
        return BoundarySet(kind or sets[0].kind,
                           np.concatenate([s.layers for s in sets]),
                           np.concatenate([s.units for s in sets]),
                           np.concatenate([s.segments for s in sets]),
                           np.concatenate([s.cells for s in sets]))


def write_boundaries_csv(path, sets: Iterable[BoundarySet]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "layer", "unit", "u0", "v0", "u1", "v1"])
        for bs in sets:
            for l, k, s in zip(bs.layers, bs.units, bs.segments):
                writer.writerow([bs.kind, int(l), int(k)] + [repr(float(t)) for t in s.ravel()])
    return path


# Edge order: bottom (a-b), right (b-c), top (d-c), left (a-d), where a, b, c, d
# are the bottom-left, bottom-right, top-right and top-left corners of a cell.
_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def marching_squares(values: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Zero contour of ``values[iv, iu]`` as per-cell segments.

    Returns ``(segments, cells)`` sorted by cell.  A corner counts as positive
    when its value is ``>= 0``; saddle cells are resolved by the sign of the
    mean of their four corners.
    """
    f = np.asarray(values, dtype=np.float64)
    a, b, c, d = f[:-1, :-1], f[:-1, 1:], f[1:, 1:], f[1:, :-1]
    sa, sb, sc, sd = a >= 0, b >= 0, c >= 0, d >= 0
    cross = [sa != sb, sb != sc, sd != sc, sa != sd]
    if not any(m.any() for m in cross):
        return np.zeros((0, 2, 2)), np.zeros((0, 2), int)

    u0, u1 = u[:-1][None, :], u[1:][None, :]
    v0, v1 = v[:-1][:, None], v[1:][:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        tb, tr, tt, tl = a / (a - b), b / (b - c), d / (d - c), a / (a - d)
    shape = a.shape
    pts = [
        (u0 + tb * (u1 - u0), np.broadcast_to(v0, shape)),
        (np.broadcast_to(u1, shape), v0 + tr * (v1 - v0)),
        (u0 + tt * (u1 - u0), np.broadcast_to(v1, shape)),
        (np.broadcast_to(u0, shape), v0 + tl * (v1 - v0)),
    ]
    saddle = cross[0] & cross[1] & cross[2] & cross[3]
    out_cells, out_segs = [], []

    def emit(mask, e1, e2):
        iv, iu = np.nonzero(mask)
        if len(iv) == 0:
            return
        p = np.stack([np.stack([pts[e1][0][iv, iu], pts[e1][1][iv, iu]], axis=1),
                      np.stack([pts[e2][0][iv, iu], pts[e2][1][iv, iu]], axis=1)], axis=1)
        out_cells.append(np.stack([iv, iu], axis=1))
        out_segs.append(p)

    for e1, e2 in _PAIRS:
        emit(cross[e1] & cross[e2] & ~saddle, e1, e2)
    if saddle.any():
        center_pos = (a + b + c + d) / 4.0 >= 0
        joined = saddle & (center_pos == sa)  # a and c connected through the centre
        emit(joined, 0, 1)   # cut off corner b
        emit(joined, 3, 2)   # cut off corner d
        split = saddle & (center_pos != sa)
        emit(split, 0, 3)    # cut off corner a
        emit(split, 1, 2)    # cut off corner c
    cells = np.concatenate(out_cells)
    segs = np.concatenate(out_segs)
    order = np.lexsort((cells[:, 1], cells[:, 0]))
    return segs[order], cells[order]


def _contours(fields: np.ndarray, grid: SliceGrid, layer: int, kind: str, unit_ids=None) -> BoundarySet:
    """Trace every column of ``fields`` (n*n, units) as one unit's zero contour."""
    parts = []
    ids = range(fields.shape[1]) if unit_ids is None else unit_ids
    for col, unit in enumerate(ids):
        segs, cells = marching_squares(grid.as_field(fields[:, col]), grid.u, grid.v)
        if len(segs):
            parts.append(BoundarySet(kind, np.full(len(segs), layer), np.full(len(segs), unit), segs, cells))
    return BoundarySet.concat(parts, kind) if parts else BoundarySet.empty(kind)


def subdivision_boundaries(net: Network, grid: SliceGrid, layer: int) -> BoundarySet:
    """Zero contours of every unit of hidden layer ``layer`` over the slice."""
    n_hidden = len(net.hidden_layers)
    if not 0 <= layer < n_hidden:
        raise ValueError(f"layer {layer} is not a hidden layer (0..{n_hidden - 1})")
    pre = grid_preacts(net, grid)[layer]
    return _contours(pre, grid, layer, "subdivision")


def decision_boundary(net: Network, grid: SliceGrid, class_pair=None) -> BoundarySet:
    """Decision boundary over the slice.

    With ``class_pair=(a, b)`` the zero contour of ``logit_a - logit_b`` is
    traced (tagged with unit ``a``).  Without it, a segment is emitted across
    every lattice edge whose endpoints have different argmax classes (unit
    ``-1``); those segments are perpendicular bisectors of the edge, one
    lattice step long, clipped to the extent.
    """
    head_index = len(net.linear_layers) - 1
    n_classes = int(np.prod(net.preact_shapes()[-1]))
    if n_classes < 2:
        raise ValueError("decision boundary needs a head with at least 2 outputs")
    logits = predict(net, grid.points).reshape(grid.n * grid.n, -1)
    if class_pair is not None:
        ca, cb = class_pair
        for c in (ca, cb):
            if not 0 <= c < n_classes:
                raise ValueError(f"class index {c} outside [0, {n_classes})")
        if ca == cb:
            raise ValueError("class pair must name two different classes")
        diff = logits[:, ca] - logits[:, cb]
        return _contours(diff[:, None], grid, head_index, "decision", [ca])

    lab = grid.as_field(logits.argmax(axis=1))
    u, v = grid.u, grid.v
    du, dv = (u[1] - u[0]) / 2, (v[1] - v[0]) / 2
    segs, cells = [], []
    iv, iu = np.nonzero(lab[:, :-1] != lab[:, 1:])
    for i, j in zip(iv, iu):
        um = (u[j] + u[j + 1]) / 2
        segs.append([[um, max(v[i] - dv, v[0])], [um, min(v[i] + dv, v[-1])]])
        cells.append([min(i, grid.n - 2), j])
    iv, iu = np.nonzero(lab[:-1, :] != lab[1:, :])
    for i, j in zip(iv, iu):
        vm = (v[i] + v[i + 1]) / 2
        segs.append([[max(u[j] - du, u[0]), vm], [min(u[j] + du, u[-1]), vm]])
        cells.append([i, min(j, grid.n - 2)])
    if not segs:
        return BoundarySet.empty("decision")
    m = len(segs)
    return BoundarySet("decision", np.full(m, head_index), np.full(m, -1),
                       np.array(segs, dtype=np.float64), np.array(cells, dtype=int))


def region_count(net: Network, grid: SliceGrid) -> int:
    """Distinct activation codes among the lattice points (regions met by the slice, lower bound)."""
    bits = hidden_signs(net, grid.points)
    if bits.shape[1] == 0:
        return 1
    return int(len(np.unique(np.packbits(bits, axis=1), axis=0)))


def border_sign_changes(values: np.ndarray) -> int:
    """Sign changes met when walking once around the border of a field ``[iv, iu]``."""
    f = np.asarray(values)
    ring = np.concatenate([f[0, :], f[1:, -1], f[-1, -2::-1], f[-2:0:-1, 0]])
    s = ring >= 0
    return int(np.count_nonzero(s != np.roll(s, 1)))
