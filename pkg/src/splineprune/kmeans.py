"""K-means with random or kmeans++ seeding, centroid pruning, and GMM toy data.

The experiment: overparametrize (start with more centroids than true
clusters), run Lloyd, prune the closest centroids down to the true count,
then fine-tune with a second Lloyd pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class GMMSpec:
    means: np.ndarray  # (K_true, dim)
    sigma: float

    @property
    def k_true(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def lattice_gmm(side: int = 8, spacing: float = 1.0, jitter: float = 0.1,
                sigma_ratio: float = 0.2, seed: int = 0) -> GMMSpec:
    """``side x side`` jittered lattice of means with sigma = ``sigma_ratio * spacing``."""
    rng = np.random.default_rng(seed)
    gx, gy = np.meshgrid(np.arange(side), np.arange(side))
    means = np.stack([gx.ravel(), gy.ravel()], axis=1) * spacing
    means = means + rng.uniform(-jitter, jitter, size=means.shape) * spacing
    return GMMSpec(means.astype(np.float64), sigma_ratio * spacing)


def sample_gmm(spec: GMMSpec, n: int, seed: int = 0):
    """``n`` points with uniformly drawn components; returns ``(x, labels)``."""
    if n < spec.k_true:
        raise ConfigError(f"need n >= K_true ({spec.k_true}), got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, spec.k_true, size=n)
    x = spec.means[labels] + spec.sigma * rng.standard_normal((n, spec.dim))
    return x, labels


def _sq_dists(x, c):
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def random_init(data, k: int, seed: int = 0) -> np.ndarray:
    """``k`` distinct data points chosen uniformly."""
    data = np.asarray(data, dtype=np.float64)
    if not 1 <= k <= len(data):
        raise ValueError(f"cannot pick {k} centroids from {len(data)} points")
    rng = np.random.default_rng(seed)
    return data[rng.choice(len(data), size=k, replace=False)].copy()


def kmeanspp_init(data, k: int, seed: int = 0) -> np.ndarray:
    """D^2 seeding: first centroid uniform, then proportional to squared distance."""
    data = np.asarray(data, dtype=np.float64)
    n = len(data)
    if not 1 <= k <= n:
        raise ValueError(f"cannot pick {k} centroids from {n} points")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    closest = ((data - data[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:  # every point coincides with a chosen centroid
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        closest = np.minimum(closest, ((data - data[idx]) ** 2).sum(axis=1))
    return data[chosen].copy()


@dataclass
class KMeansModel:
    centroids: np.ndarray
    init_scheme: str = "random_data_points"
    history: list = field(default_factory=list)  # inertia after each assignment step
    n_iter: int = 0
    pruned: list = field(default_factory=list)  # removed centroid vectors, in order

    @property
    def k(self) -> int:
        return len(self.centroids)

    def assign(self, data) -> np.ndarray:
        return _sq_dists(np.asarray(data, dtype=np.float64), self.centroids).argmin(axis=1)

    def inertia(self, data) -> float:
        return float(_sq_dists(np.asarray(data, dtype=np.float64), self.centroids).min(axis=1).sum())


def lloyd_fit(data, centroids, max_iter: int = 100, tol: float = 1e-8,
              init_scheme: str = "random_data_points") -> KMeansModel:
    """Alternate assignment and mean updates until the largest centroid shift is below ``tol``.

    An empty cluster is re-seeded at the data point farthest from its
    assigned centroid (each re-seed takes the next farthest point).
    ``n_iter`` counts the update steps that moved some centroid by ``tol`` or more.
    """
    data = np.asarray(data, dtype=np.float64)
    c = np.array(centroids, dtype=np.float64)
    if len(c) == 0:
        raise ValueError("need at least one centroid")
    model = KMeansModel(c, init_scheme)
    for _ in range(max_iter):
        d = _sq_dists(data, c)
        lab = d.argmin(axis=1)
        dmin = d[np.arange(len(data)), lab]
        model.history.append(float(dmin.sum()))
        counts = np.bincount(lab, minlength=len(c))
        new = np.zeros_like(c)
        np.add.at(new, lab, data)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if len(empty):
            far = np.argsort(-dmin, kind="stable")[:len(empty)]
            new[empty] = data[far]
        shift = float(np.sqrt(((new - c) ** 2).sum(axis=1)).max())
        c = new
        if shift < tol:
            break
        model.n_iter += 1
    model.centroids = c
    return model


def closest_pair(centroids) -> tuple[int, int, float]:
    """Lexicographically first ``(i, j)``, ``i < j``, at minimum l2 distance."""
    c = np.asarray(centroids, dtype=np.float64)
    if len(c) < 2:
        raise ValueError("need two centroids")
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(axis=2))
    d[np.tril_indices(len(c))] = np.inf
    i, j = divmod(int(np.argmin(d)), len(c))
    return i, j, float(d[i, j])


def prune_centroids(model: KMeansModel, k_target: int, data) -> KMeansModel:
    """Drop one centroid of the closest pair until ``k_target`` remain.

    The member whose cluster currently holds fewer points goes (the lower
    index on ties); cluster sizes are recomputed after every removal.
    """
    if k_target < 1:
        raise ValueError("k_target must be at least 1")
    if k_target > model.k:
        raise ValueError(f"k_target {k_target} exceeds current K {model.k}")
    data = np.asarray(data, dtype=np.float64)
    c = model.centroids.copy()
    removed = list(model.pruned)
    while len(c) > k_target:
        i, j, _ = closest_pair(c)
        counts = np.bincount(_sq_dists(data, c).argmin(axis=1), minlength=len(c))
        victim = j if counts[j] < counts[i] else i
        removed.append(c[victim].copy())
        c = np.delete(c, victim, axis=0)
    return KMeansModel(c, model.init_scheme, list(model.history), model.n_iter, removed)


def clustering_accuracy(model: KMeansModel, data, labels) -> float:
    """Majority-vote labelling of each centroid's cluster; fraction labelled correctly."""
    labels = np.asarray(labels)
    assign = model.assign(data)
    correct = 0
    for c in np.unique(assign):
        correct += np.bincount(labels[assign == c]).max()
    return float(correct / len(labels))


def fit_pipeline(data, k_start: int, k_final: int, scheme: str = "random", seed: int = 0,
                 max_iter: int = 100, tol: float = 1e-8) -> KMeansModel:
    """Seed ``k_start`` centroids, Lloyd, prune to ``k_final``, Lloyd again."""
    if scheme == "random":
        init = random_init(data, k_start, seed)
        name = "random_data_points"
    elif scheme == "kmeanspp":
        init = kmeanspp_init(data, k_start, seed)
        name = "kmeanspp"
    else:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    model = lloyd_fit(data, init, max_iter, tol, name)
    if k_start > k_final:
        model = prune_centroids(model, k_final, data)
        tuned = lloyd_fit(data, model.centroids, max_iter, tol, name)
        tuned.history = model.history + tuned.history
        tuned.pruned = model.pruned
        model = tuned
    return model
