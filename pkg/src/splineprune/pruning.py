"""Unit pruning driven by partition geometry, plus magnitude/random/lottery baselines.

Two hidden units whose weight rows are (anti-)parallel and whose biases
match cut input space along the same hyperplane, so one of them adds nothing
to the layer's partition.  The redundancy score of a pair is::

    N(k, k') = 1 - |<w_k, w_k'>| / (|w_k| |w_k'|) + rho * |b_k - b_k'|

Pruning repeatedly finds the minimizing pair and removes the member with the
smaller l2 row norm.  Layer indices are 0-based positions among the hidden
linear layers; unit indices in plans always refer to the *original* network.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .engine import Conv2d, Dense, Flatten, Network
from .errors import AlignmentError, ConfigError, DegenerateUnitError, DimensionError, NotEnoughUnitsError
from .partition import SliceGrid, grid_preacts

DEFAULT_RHO = 0.05
COMPENSATIONS = ("none", "merge_outgoing")


@dataclass(frozen=True)
class RedundancyScore:
    layer: int
    k: int
    k2: int
    angle_term: float
    bias_term: float  # |b_k - b_k'|
    total: float
    rho: float


def _check_rho(rho):
    if not rho > 0:
        raise ConfigError(f"rho must be positive, got {rho}")


def _angle_term(dot, sq_a, sq_b):
    # cos^2 = dot^2 / (|a|^2 |b|^2) keeps exact duplicates and exact negatives at exactly 0.
    cos2 = np.minimum(1.0, dot * dot / (sq_a * sq_b))
    return 1.0 - np.sqrt(cos2)


def redundancy_from_rows(row_a, row_b, bias_a, bias_b, rho=DEFAULT_RHO):
    """Score of two units given their flattened rows and biases: ``(angle, bias_gap, total)``."""
    _check_rho(rho)
    a = np.asarray(row_a, dtype=np.float64).ravel()
    b = np.asarray(row_b, dtype=np.float64).ravel()
    sq_a, sq_b = (a * a).sum(), (b * b).sum()
    if sq_a == 0 or sq_b == 0:
        raise DegenerateUnitError("redundancy is undefined for a unit with an all-zero weight row")
    angle = float(_angle_term((a * b).sum(), sq_a, sq_b))
    gap = abs(float(bias_a) - float(bias_b))
    return angle, gap, angle + rho * gap


def redundancy(layer, k: int, k2: int, rho: float = DEFAULT_RHO, layer_index: int = 0) -> RedundancyScore:
    """Redundancy score of units ``k`` and ``k2`` of a dense or conv layer.

    For conv layers a unit is an output channel and its row is the flattened kernel.
    """
    if k == k2:
        raise ValueError("redundancy needs two distinct units")
    rows = layer.rows()
    angle, gap, total = redundancy_from_rows(rows[k], rows[k2], layer.bias[k], layer.bias[k2], rho)
    return RedundancyScore(layer_index, k, k2, angle, gap, total, rho)


def pairwise_redundancy(rows, biases, rho=DEFAULT_RHO) -> np.ndarray:
    """Full score matrix; the diagonal is set to +inf.  Zero rows give NaN entries."""
    _check_rho(rho)
    rows = np.asarray(rows, dtype=np.float64)
    biases = np.asarray(biases, dtype=np.float64)
    sq = (rows * rows).sum(axis=1)
    dots = (rows[:, None, :] * rows[None, :, :]).sum(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        n = _angle_term(dots, sq[:, None], sq[None, :]) + rho * np.abs(biases[:, None] - biases[None, :])
    np.fill_diagonal(n, np.inf)
    return n


def _argmin_pair(scores: np.ndarray):
    """Lexicographically first (i < j) pair attaining the minimum of an upper triangle."""
    m = scores.copy()
    m[np.tril_indices_from(m)] = np.inf
    m[np.isnan(m)] = np.inf
    flat = int(np.argmin(m))
    i, j = divmod(flat, m.shape[1])
    return i, j, float(m[i, j])


def most_redundant_pair(layer, rho: float = DEFAULT_RHO):
    """``(k, k2, score)`` minimizing the redundancy over unordered pairs ``k < k2``."""
    rows = layer.rows()
    if rows.shape[0] < 2:
        raise NotEnoughUnitsError("need at least two units to form a pair")
    if np.any((rows * rows).sum(axis=1) == 0):
        raise DegenerateUnitError("layer has an all-zero weight row")
    return _argmin_pair(pairwise_redundancy(rows, layer.bias, rho))


def _victim(norm_k: float, norm_k2: float) -> int:
    """0 to drop the first member of the pair, 1 for the second (the second on ties)."""
    return 0 if norm_k < norm_k2 else 1


# --------------------------------------------------------------------------
# network surgery


def _consumer(net: Network, layer: int):
    """Next linear layer after hidden ``layer`` and the input block size per unit."""
    positions = net.linear_positions
    pos, nxt = positions[layer], positions[layer + 1]
    shapes = net.shapes()
    block = 1
    for p in range(pos + 1, nxt):
        if isinstance(net.layers[p], Flatten):
            block = int(np.prod(shapes[p][1:]))
    return net.layers[nxt], block


def remove_unit(net: Network, layer: int, unit: int, merge_into: int | None = None) -> Network:
    """Delete ``unit`` (current index) of hidden ``layer`` in place.

    Its row and bias go away, as do the matching inputs of the next linear
    layer.  With ``merge_into`` the removed unit's outgoing weights are first
    added to those of unit ``merge_into``.
    """
    hidden = net.hidden_layers
    if not 0 <= layer < len(hidden):
        raise ValueError(f"layer {layer} is not a hidden layer")
    src = hidden[layer]
    if src.units <= 1:
        raise NotEnoughUnitsError(f"layer {layer} would be left without units")
    consumer, block = _consumer(net, layer)

    def cols(k):
        return np.arange(k * block, (k + 1) * block)

    if isinstance(consumer, Conv2d):
        if merge_into is not None:
            consumer.weights[:, merge_into] += consumer.weights[:, unit]
            if consumer.mask is not None:
                consumer.mask[:, merge_into] = np.maximum(consumer.mask[:, merge_into], consumer.mask[:, unit])
        consumer.weights = np.delete(consumer.weights, unit, axis=1)
        if consumer.mask is not None:
            consumer.mask = np.delete(consumer.mask, unit, axis=1)
    else:
        if merge_into is not None:
            consumer.weights[:, cols(merge_into)] += consumer.weights[:, cols(unit)]
            if consumer.mask is not None:
                consumer.mask[:, cols(merge_into)] = np.maximum(consumer.mask[:, cols(merge_into)],
                                                                consumer.mask[:, cols(unit)])
        consumer.weights = np.delete(consumer.weights, cols(unit), axis=1)
        if consumer.mask is not None:
            consumer.mask = np.delete(consumer.mask, cols(unit), axis=1)
    src.weights = np.delete(src.weights, unit, axis=0)
    src.bias = np.delete(src.bias, unit)
    if src.mask is not None:
        src.mask = np.delete(src.mask, unit, axis=0)
    net.shapes()
    return net


@dataclass
class Removal:
    layer: int
    removed: int
    partner: int | None = None
    partner_layer: int | None = None
    score: float | None = None


@dataclass
class PrunePlan:
    policy: str
    original_units: list
    kept: list
    removals: list = field(default_factory=list)
    compensation: str = "none"
    warnings: list = field(default_factory=list)

    @classmethod
    def start(cls, net: Network, policy: str, compensation: str = "none") -> "PrunePlan":
        if compensation not in COMPENSATIONS:
            raise ConfigError(f"unknown compensation {compensation!r}")
        units = [layer.units for layer in net.hidden_layers]
        return cls(policy, units, [list(range(u)) for u in units], [], compensation, [])

    def record(self, removal: Removal):
        self.removals.append(removal)
        self.kept[removal.layer].remove(removal.removed)

    def removed_counts(self) -> list[int]:
        return [o - len(k) for o, k in zip(self.original_units, self.kept)]

    def apply(self, net: Network) -> Network:
        """Replay the removal log on a copy of the unpruned ``net``."""
        if [l.units for l in net.hidden_layers] != list(self.original_units):
            raise AlignmentError("plan was made for a network with different layer widths")
        out = net.copy()
        live = [list(range(u)) for u in self.original_units]
        merge = self.compensation == "merge_outgoing"
        for r in self.removals:
            cur = live[r.layer].index(r.removed)
            into = None
            if merge and r.partner is not None and r.partner_layer in (None, r.layer):
                into = live[r.layer].index(r.partner)
            remove_unit(out, r.layer, cur, merge_into=into)
            live[r.layer].remove(r.removed)
        if live != [list(k) for k in self.kept]:
            raise AlignmentError("removal log does not replay to the recorded kept units")
        return out

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "compensation": self.compensation,
            "original_units": list(self.original_units),
            "kept": [list(map(int, k)) for k in self.kept],
            "removals": [asdict(r) for r in self.removals],
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        return cls(d["policy"], list(d["original_units"]), [list(k) for k in d["kept"]],
                   [Removal(**r) for r in d["removals"]], d.get("compensation", "none"),
                   list(d.get("warnings", [])))

    @classmethod
    def from_json(cls, text: str) -> "PrunePlan":
        return cls.from_dict(json.loads(text))


def keep_count(ratio: float, units: int, warnings: list | None = None, layer: int | None = None) -> int:
    """``ceil((1 - ratio) * units)``, never below 1."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"pruning ratio must lie in [0, 1], got {ratio}")
    keep = math.ceil((1.0 - ratio) * units - 1e-9)
    if keep < 1:
        if warnings is not None:
            where = "" if layer is None else f" in layer {layer}"
            warnings.append(f"ratio {ratio} leaves no unit{where}; keeping 1")
        keep = 1
    return keep


def _per_layer(ratio, n_layers) -> list[float]:
    if np.isscalar(ratio):
        return [float(ratio)] * n_layers
    ratios = [float(r) for r in ratio]
    if len(ratios) != n_layers:
        raise ConfigError(f"expected {n_layers} per-layer ratios, got {len(ratios)}")
    return ratios


# --------------------------------------------------------------------------
# spline pruning


def layerwise_spline_prune(net: Network, ratio, rho: float = DEFAULT_RHO,
                           compensation: str = "none"):
    """Prune each hidden layer to ``ceil((1 - p) * D)`` units by greedy redundancy.

    Layers are processed first to last; the network is modified after every
    removal, so later layers are scored on their already-shrunk rows.
    Returns ``(pruned_net, plan)``; ``net`` itself is left untouched.
    """
    _check_rho(rho)
    work = net.copy()
    plan = PrunePlan.start(net, "spline_layerwise", compensation)
    ratios = _per_layer(ratio, len(plan.original_units))
    merge = compensation == "merge_outgoing"
    for l, p in enumerate(ratios):
        target = keep_count(p, plan.original_units[l], plan.warnings, l)
        while work.hidden_layers[l].units > target:
            layer = work.hidden_layers[l]
            rows = layer.rows()
            norms = np.sqrt((rows * rows).sum(axis=1))
            ids = plan.kept[l]
            zero = np.flatnonzero(norms == 0)
            if len(zero):
                victim, partner, score = int(zero[0]), None, None
            else:
                k, k2, score = most_redundant_pair(layer, rho)
                pair = (k, k2)
                which = _victim(norms[k], norms[k2])
                victim, partner = pair[which], pair[1 - which]
            plan.record(Removal(l, ids[victim], None if partner is None else ids[partner],
                                None if partner is None else l, score))
            remove_unit(work, l, victim, merge_into=partner if merge else None)
    return work, plan


@dataclass
class PCAProjection:
    """Per hidden layer: a ``d x row_dim`` matrix with orthonormal rows.

    Rows are l2-normalized before fitting and before projecting.  ``means``
    holds the mean of the normalized rows (zero unless the fit was centred).
    """

    d: int
    means: list
    components: list
    centered: bool = False

    def project(self, layer: int, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        return _normalize_rows(rows) @ self.components[layer].T


def _normalize_rows(rows):
    norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    return np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0)


def _pca_components(x: np.ndarray, d: int, centered: bool):
    mean = x.mean(axis=0) if centered else np.zeros(x.shape[1])
    xc = x - mean
    cov = xc.T @ xc / max(len(x), 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:d]
    comps = vecs[:, order].T.copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1.0
    return mean, comps


def _default_d(net: Network) -> int:
    return min(layer.rows().shape[1] for layer in net.hidden_layers)


def fit_pca_projection(net: Network, d: int | None = None, centered: bool = False) -> PCAProjection:
    """Fit one projection per hidden layer onto a shared dimension ``d``.

    ``d`` defaults to the smallest flattened row length over hidden layers.
    """
    max_d = _default_d(net)
    d = max_d if d is None else int(d)
    if not 1 <= d <= max_d:
        raise DimensionError(f"PCA dimension {d} must lie in [1, {max_d}]")
    means, comps = [], []
    for layer in net.hidden_layers:
        if layer.units < 1:
            raise DimensionError("every layer needs at least one unit")
        m, c = _pca_components(_normalize_rows(layer.rows()), d, centered)
        means.append(m)
        comps.append(c)
    return PCAProjection(d, means, comps, centered)


def global_most_redundant_pair(rows: np.ndarray, biases: np.ndarray, removable: np.ndarray,
                               rho: float = DEFAULT_RHO):
    """Pair ``(i, j, score)`` over a pooled unit list; pairs with no removable member are skipped."""
    scores = pairwise_redundancy(rows, biases, rho)
    sq = (rows * rows).sum(axis=1)
    zero = sq == 0
    if zero.any():
        # a unit projected onto the origin counts as orthogonal to everything
        fill = 1.0 + rho * np.abs(biases[:, None] - biases[None, :])
        scores[zero, :] = fill[zero, :]
        scores[:, zero] = fill[:, zero]
    np.fill_diagonal(scores, np.inf)
    blocked = ~(removable[:, None] | removable[None, :])
    scores[blocked] = np.inf
    return _argmin_pair(scores)


def global_spline_prune(net: Network, ratio: float, rho: float = DEFAULT_RHO, d: int | None = None,
                        compensation: str = "none", centered: bool = False):
    """Prune across all hidden layers at once in a shared PCA space.

    Every unit row is normalized and projected to ``d`` dims with its
    layer's PCA; pairs (within or across layers) are scored on the projected
    rows and raw biases.  After each removal the affected layer's PCA is
    refit on its surviving rows.  Stops when ``ceil((1 - p) * sum D)`` units
    remain; no layer drops below one unit.
    """
    _check_rho(rho)
    plan = PrunePlan.start(net, "spline_global", compensation)
    total = sum(plan.original_units)
    target = max(keep_count(ratio, total, plan.warnings), len(plan.original_units))
    max_d = _default_d(net)
    d = max_d if d is None else int(d)
    if not 1 <= d <= max_d:
        raise DimensionError(f"PCA dimension {d} must lie in [1, {max_d}]")
    rows = [layer.rows() for layer in net.hidden_layers]
    biases = [layer.bias for layer in net.hidden_layers]
    norms = [np.sqrt((r * r).sum(axis=1)) for r in rows]

    def projected(l):
        live = plan.kept[l]
        _, comps = _pca_components(_normalize_rows(rows[l][live]), d, centered)
        return _normalize_rows(rows[l][live]) @ comps.T

    proj = [projected(l) for l in range(len(rows))]
    while sum(len(k) for k in plan.kept) > target:
        owner = np.concatenate([np.full(len(k), l) for l, k in enumerate(plan.kept)])
        unit = np.concatenate([np.asarray(k, int) for k in plan.kept])
        live_counts = np.array([len(k) for k in plan.kept])
        removable = live_counts[owner] > 1
        orig_norm = np.array([norms[l][u] for l, u in zip(owner, unit)])
        zero = np.flatnonzero((orig_norm == 0) & removable)
        if len(zero):
            i = int(zero[0])
            victim, partner, score = i, None, None
        else:
            pooled = np.concatenate(proj)
            pooled_b = np.array([biases[l][u] for l, u in zip(owner, unit)])
            i, j, score = global_most_redundant_pair(pooled, pooled_b, removable, rho)
            if not np.isfinite(score):
                break
            if removable[i] and removable[j]:
                which = _victim(orig_norm[i], orig_norm[j])
            else:
                which = 0 if removable[i] else 1
            victim, partner = (i, j) if which == 0 else (j, i)
        l = int(owner[victim])
        plan.record(Removal(l, int(unit[victim]),
                            None if partner is None else int(unit[partner]),
                            None if partner is None else int(owner[partner]), score))
        proj[l] = projected(l)
    return plan.apply(net), plan


# --------------------------------------------------------------------------
# baselines


def magnitude_prune(net: Network, ratio, scope: str = "layer"):
    """Remove the units with the smallest l1 row norm (lowest index first on ties)."""
    plan = PrunePlan.start(net, f"magnitude_{scope}")
    l1 = [np.abs(layer.rows()).sum(axis=1) for layer in net.hidden_layers]
    if scope == "layer":
        for l, p in enumerate(_per_layer(ratio, len(l1))):
            n_drop = len(l1[l]) - keep_count(p, len(l1[l]), plan.warnings, l)
            for u in np.argsort(l1[l], kind="stable")[:n_drop]:
                plan.record(Removal(l, int(u), score=float(l1[l][u])))
    elif scope == "global":
        total = sum(plan.original_units)
        target = max(keep_count(float(ratio), total, plan.warnings), len(l1))
        pooled = sorted((float(v), l, u) for l, vals in enumerate(l1) for u, v in enumerate(vals))
        live = list(plan.original_units)
        for v, l, u in pooled:
            if sum(live) <= target:
                break
            if live[l] > 1:
                plan.record(Removal(l, u, score=v))
                live[l] -= 1
    else:
        raise ConfigError(f"unknown scope {scope!r}")
    return plan.apply(net), plan


def random_prune(net: Network, ratio, seed: int = 0):
    rng = np.random.default_rng(seed)
    plan = PrunePlan.start(net, "random")
    for l, p in enumerate(_per_layer(ratio, len(plan.original_units))):
        n = plan.original_units[l]
        n_drop = n - keep_count(p, n, plan.warnings, l)
        for u in sorted(rng.choice(n, size=n_drop, replace=False).tolist()):
            plan.record(Removal(l, int(u)))
    return plan.apply(net), plan


def prune(net: Network, policy: str, ratio, rho: float = DEFAULT_RHO, seed: int = 0,
          compensation: str = "none", d: int | None = None):
    """Dispatch on a policy name; returns ``(pruned_net, plan)``."""
    if policy == "spline":
        return layerwise_spline_prune(net, ratio, rho, compensation)
    if policy == "spline_global":
        return global_spline_prune(net, ratio, rho, d, compensation)
    if policy == "magnitude":
        return magnitude_prune(net, ratio, "layer")
    if policy == "magnitude_global":
        return magnitude_prune(net, ratio, "global")
    if policy == "random":
        return random_prune(net, ratio, seed)
    raise ConfigError(f"unknown pruning policy {policy!r}")


def lottery_mask_and_rewind(net_init: Network, net_trained: Network, ratio: float) -> Network:
    """Copy of ``net_init`` masked to the top-``ratio`` fraction (per layer) of trained weight magnitudes.

    ``ratio`` is the kept fraction; magnitude ties keep the lower flat index.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError("lottery keep ratio must lie in [0, 1]")
    a, b = net_init.layers, net_trained.layers
    if len(a) != len(b) or any(type(x) is not type(y) for x, y in zip(a, b)):
        raise AlignmentError("networks have different layer structures")
    for x, y in zip(net_init.linear_layers, net_trained.linear_layers):
        if x.weights.shape != y.weights.shape:
            raise AlignmentError(f"weight shapes {x.weights.shape} and {y.weights.shape} differ")
    out = net_init.copy()
    for layer, trained in zip(out.linear_layers, net_trained.linear_layers):
        w = np.abs(trained.effective_weights).ravel()
        n_keep = int(round(ratio * w.size))
        mask = np.zeros(w.size)
        mask[np.argsort(-w, kind="stable")[:n_keep]] = 1.0
        layer.mask = mask.reshape(layer.weights.shape)
        layer.weights = layer.weights * layer.mask
    return out


# --------------------------------------------------------------------------
# partition invariance check for zero-score pairs


@dataclass
class Prop1Report:
    case: str  # exact_duplicate | antiparallel_zero_bias | inapplicable
    score: float
    lost_boundary_edges: int  # lattice edges where only the removed unit's sign flips
    code_mismatches: int  # points whose remaining bits change after removal
    regions_before: int
    regions_after: int

    @property
    def applicable(self) -> bool:
        return self.case != "inapplicable"

    @property
    def diff_count(self) -> int:
        return self.lost_boundary_edges + self.code_mismatches

    @property
    def holds(self) -> bool:
        return self.diff_count == 0


def _pair_case(layer, k, k2) -> str:
    rows = layer.rows()
    if np.array_equal(rows[k], rows[k2]) and layer.bias[k] == layer.bias[k2]:
        return "exact_duplicate"
    if np.array_equal(rows[k], -rows[k2]) and layer.bias[k] == 0 and layer.bias[k2] == 0:
        return "antiparallel_zero_bias"
    return "inapplicable"


def _layer_unit_bits(pre: np.ndarray, units: int) -> np.ndarray:
    return (pre >= 0).reshape(len(pre), units, -1)


def verify_prop1(net: Network, layer: int, k: int, k2: int, grid: SliceGrid,
                 rho: float = DEFAULT_RHO) -> Prop1Report:
    """Measure how removing unit ``k2`` (keeping ``k``) changes layer ``layer``'s partition on ``grid``.

    Two counts are reported: points whose other bits change after the
    removal, and lattice edges across which only ``k2``'s sign flips, i.e.
    partition boundaries that disappear with the unit.  Both are 0 when the
    pair is an exact duplicate.
    """
    src = net.hidden_layers[layer]
    score = redundancy(src, k, k2, rho, layer).total
    case = _pair_case(src, k, k2)
    before = _layer_unit_bits(grid_preacts(net, grid)[layer], src.units)
    pruned = remove_unit(net.copy(), layer, k2)
    after = _layer_unit_bits(grid_preacts(pruned, grid)[layer], src.units - 1)
    kept = np.delete(before, k2, axis=1)
    mismatches = int(np.count_nonzero(np.any(kept != after, axis=(1, 2))))

    n = grid.n
    full = before.reshape(n, n, -1)
    rest = after.reshape(n, n, -1)
    lost = 0
    for sl_a, sl_b in (((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
                       ((slice(None, -1), slice(None)), (slice(1, None), slice(None)))):
        full_change = np.any(full[sl_a] != full[sl_b], axis=-1)
        rest_change = np.any(rest[sl_a] != rest[sl_b], axis=-1)
        lost += int(np.count_nonzero(full_change & ~rest_change))

    def regions(bits):
        return len(np.unique(np.packbits(bits.reshape(len(bits), -1), axis=1), axis=0))

    return Prop1Report(case, score, lost, mismatches, regions(before), regions(after))
