"""Experiment drivers: each one runs a set of seeds and returns a RunSummary.

Training cost is reported in multiply-accumulates (MACs).  One training
step on one sample is counted as a forward pass plus a backward pass of
twice its cost, so ``3 * forward_macs`` per sample per epoch.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, SawtoothSettings, config_hash
from .datasets import digits, load_mnist_idx, sawtooth, sawtooth_dataset, split, xshape
from .earlybird import EarlyBirdCallback
from .engine import (IDENTITY, RELU, Conv2d, Dataset, Dense, Flatten, MaxPool2d, Network,
                     TrainConfig, accuracy, flops_estimate, init_kaiming, mlp, predict, train)
from .errors import ConfigError, DivergenceError, UnsupportedArchitectureError
from .kmeans import clustering_accuracy, fit_pipeline, lattice_gmm, sample_gmm
from .partition import (DEFAULT_EXTENT, decision_boundary, make_slice, region_count,
                        subdivision_boundaries, write_boundaries_csv)
from .pruning import lottery_mask_and_rewind, prune
from .svg import Style, line_chart, render_svg
from .weights_io import save_weights

BACKWARD_FACTOR = 2


def training_macs(forward_macs: int, samples: int, epochs: int) -> int:
    """MACs of ``epochs`` passes over ``samples`` examples (backward = 2x forward)."""
    return int(forward_macs) * (1 + BACKWARD_FACTOR) * int(samples) * int(epochs)


# --------------------------------------------------------------------------
# summaries


def summary_stats(values) -> dict:
    v = np.asarray([float(x) for x in values], dtype=np.float64)
    if len(v) == 0:
        return {"median": None, "q1": None, "q3": None, "iqr": None, "n": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1), "n": int(len(v))}


def aggregate(rows: Sequence[dict], metrics: Sequence[str], group_by: Sequence[str] = ()) -> dict:
    """Median/IQR of each metric, grouped by the values of ``group_by``.

    Keys look like ``"ratio=0.5"`` (or ``"all"`` without grouping).
    """
    groups: dict = {}
    for row in rows:
        key = ",".join(f"{g}={row[g]}" for g in group_by) or "all"
        groups.setdefault(key, []).append(row)
    return {key: {m: summary_stats(r[m] for r in members) for m in metrics}
            for key, members in groups.items()}


@dataclass
class RunSummary:
    kind: str
    config_hash: str
    seeds: list
    rows: list = field(default_factory=list)  # one dict per (seed, setting); every row has "seed"
    aggregates: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "config_hash": self.config_hash, "seeds": list(self.seeds),
                "rows": self.rows, "aggregates": self.aggregates, "artifacts": self.artifacts,
                "flags": self.flags, "extra": self.extra}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2)

    def median(self, metric: str, group: str = "all") -> float:
        return self.aggregates[group][metric]["median"]

    def save(self, out_dir) -> Path:
        path = Path(out_dir) / "summary.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        if str(path) not in self.artifacts:
            self.artifacts.append(str(path))
        path.write_text(self.to_json())
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def write_rows_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return path


def _write_text(path, text: str) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return str(path)


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _finish(cfg: ExperimentConfig, rows, aggregates, artifacts, flags=None, extra=None, save=True):
    summary = RunSummary(cfg.kind, cfg.config_hash(), [int(s) for s in cfg.seeds], rows,
                         aggregates, [str(a) for a in artifacts], flags or {}, extra or {})
    if save:
        summary.save(cfg.output_dir)
    return summary


# --------------------------------------------------------------------------
# data and models


def load_data(cfg: ExperimentConfig, seed: int):
    """``(train, test)`` for the configured source; test data never enters training."""
    d = cfg.data
    source = d.source
    if source == "auto":
        if d.mnist_images is not None:
            source = "mnist"
        elif cfg.kind in ("prune_pipeline", "mnist_slice"):
            source = "digits"
        else:
            source = "xshape"
    if source == "xshape":
        return (xshape(d.n_per_class, d.noise, seed),
                xshape(d.n_per_class, d.noise, seed + 10_000))
    if source == "digits":
        tr, te = digits(d.test_fraction, seed)
    elif source == "mnist":
        if d.mnist_images is None:
            raise ConfigError("data source 'mnist' needs mnist_images and mnist_labels")
        full = load_mnist_idx(d.mnist_images, d.mnist_labels)
        tr, te = split(full, d.test_fraction, seed)
    else:
        raise ConfigError(f"unknown data source {source!r}")
    if d.subset is not None:
        n_test = max(1, int(round(d.subset * d.test_fraction)))
        tr = tr.subset(np.arange(min(len(tr), d.subset - n_test)))
        te = te.subset(np.arange(min(len(te), n_test)))
    return tr, te


def toy_convnet(input_shape, n_classes: int, channels=(16, 32), seed: int = 0) -> Network:
    """conv3x3 -> pool -> conv3x3 -> pool -> flatten -> dense head."""
    c, h, w = input_shape
    layers = []
    for out_c in channels:
        layers += [Conv2d(np.zeros((out_c, c, 3, 3)), np.zeros(out_c), RELU, padding=1), MaxPool2d()]
        c, h, w = out_c, h // 2, w // 2
    layers += [Flatten(), Dense(np.zeros((n_classes, c * h * w)), np.zeros(n_classes), IDENTITY)]
    return init_kaiming(Network(layers, tuple(input_shape)), seed)


def image_mlp(input_shape, hidden: Sequence[int], n_classes: int, seed: int = 0) -> Network:
    """Flatten followed by a ReLU MLP."""
    dims = [int(np.prod(input_shape)), *hidden, n_classes]
    layers = [Flatten()]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(Dense(np.zeros((b, a)), np.zeros(b), IDENTITY if i == len(dims) - 2 else RELU))
    return init_kaiming(Network(layers, tuple(input_shape)), seed)


def build_model(cfg: ExperimentConfig, data: Dataset, seed: int) -> Network:
    input_shape = data.x.shape[1:]
    n_classes = int(data.y.max()) + 1
    model = cfg.model
    if model == "auto":
        model = "conv" if len(input_shape) == 3 else "mlp"
    if model == "conv":
        if len(input_shape) != 3:
            raise ConfigError("a conv model needs (channels, rows, cols) inputs")
        return toy_convnet(input_shape, n_classes, seed=seed)
    if len(input_shape) == 1:
        return mlp([input_shape[0], *cfg.hidden, n_classes], seed=seed)
    return image_mlp(input_shape, cfg.hidden, n_classes, seed)


def _observe(cb):
    """Wrap a callback so that its verdict never stops training."""
    def wrapped(epoch, net, metrics):
        cb(epoch, net, metrics)
        return False
    return wrapped


def train_model(cfg: ExperimentConfig, seed: int, eb: str = "off"):
    """Build and train the configured model for one seed.

    ``eb`` is ``"off"``, ``"observe"`` (record the Early-Bird trace only) or
    ``"stop"`` (end training at the trigger).  Returns
    ``(net, train_data, test_data, history, eb_callback_or_None)``.
    """
    tr, te = load_data(cfg, seed)
    net = build_model(cfg, tr, seed)
    callbacks, cb = [], None
    if eb != "off":
        probe = tr.x[cfg.eb.probe_indices(len(tr))]
        cb = EarlyBirdCallback(probe, cfg.eb)
        callbacks.append(cb if eb == "stop" else _observe(cb))
    _, history = train(net, tr, cfg.train.replace(seed=seed), callbacks)
    return net, tr, te, history, cb


def fine_tune(net: Network, data: Dataset, cfg: ExperimentConfig, seed: int) -> Network:
    """Retrain a pruned net for ``prune.fine_tune_epochs`` at a constant rate."""
    epochs = cfg.prune.fine_tune_epochs
    if epochs <= 0:
        return net
    lr = cfg.prune.fine_tune_lr if cfg.prune.fine_tune_lr is not None else cfg.train.lr * 0.1
    tc = cfg.train.replace(epochs=epochs, lr=lr, lr_schedule={}, seed=seed)
    train(net, data, tc)
    return net


def _prune(net, cfg: ExperimentConfig, ratio, seed: int, policy=None, rho=None):
    return prune(net, policy or cfg.prune.policy, ratio,
                 rho=cfg.prune.rho if rho is None else rho, seed=seed,
                 compensation=cfg.prune.compensation, d=cfg.prune.pca_dim)


# --------------------------------------------------------------------------
# partition figures


def plane_slice(extent=((-1.4, 1.4), (-1.4, 1.4)), n: int = 100):
    """The identity slice of a 2-D input space: (u, v) are the input coordinates."""
    return make_slice([0.0, 0.0], [1.0, 0.0], [0.0, 1.0], extent, n)


def partition_svg(net: Network, grid, path, title=None, points=None, labels=None) -> str:
    """Subdivision lines of every hidden layer plus the decision boundary, as SVG."""
    sets = [subdivision_boundaries(net, grid, l) for l in range(len(net.hidden_layers))]
    sets.append(decision_boundary(net, grid))
    return _write_text(path, render_svg(sets, grid, Style(title=title), points, labels))


# --------------------------------------------------------------------------
# sawtooth


def explicit_sawtooth_net(peaks: int) -> Network:
    """One-hidden-layer ReLU net with 2P units that reproduces the sawtooth on [0, P].

    Unit k (0-based) has weight 1 and bias -k/2, so its kink sits at x = k/2.
    The output weights 2, -4, 4, -4, ... switch the slope between +2 and -2
    at every kink.
    """
    if peaks < 1:
        raise ConfigError("peaks must be >= 1")
    k = np.arange(2 * peaks)
    hidden = Dense(np.ones((2 * peaks, 1)), -k / 2.0, RELU)
    coef = np.where(k == 0, 2.0, np.where(k % 2 == 1, -4.0, 4.0))
    head = Dense(coef[None, :], np.zeros(1), IDENTITY)
    return Network([hidden, head], (1,))


def explicit_sawtooth_mse(peaks: int, n_points: int = 1000) -> float:
    x = np.linspace(0.0, peaks, n_points)[:, None]
    err = predict(explicit_sawtooth_net(peaks), x) - sawtooth(x, peaks)
    return float(np.mean(err ** 2))


def _sawtooth_run(args):
    peaks, width, seed, s = args
    data = sawtooth_dataset(peaks, s.n_points)
    # Zero initial biases put every kink at x = 0, so centre the inputs on the interval.
    centred = Dataset(data.x - peaks / 2.0, data.y)
    net = mlp([1, width, 1], seed=seed)
    tc = TrainConfig(epochs=s.epochs, batch_size=s.batch_size, lr=s.lr, momentum=0.9, weight_decay=0.0,
                     lr_schedule=TrainConfig.step_decay(s.epochs), seed=seed, loss="mse")
    try:
        train(net, centred, tc)
        mse = float(np.mean((predict(net, centred.x) - centred.y) ** 2))
        diverged = False
    except DivergenceError:
        mse, diverged = float("inf"), True
    return {"seed": seed, "width": width, "mse": mse, "diverged": diverged}


def sawtooth_experiment(peaks: int = 2, widths: Sequence[int] = (4, 8, 32), seeds: Sequence[int] = range(10),
                        settings: SawtoothSettings | None = None, out_dir=None, workers: int = 1,
                        cfg: ExperimentConfig | None = None) -> RunSummary:
    """Explicit 2P-unit construction plus trained one-hidden-layer nets per width."""
    s = settings or SawtoothSettings(peaks=peaks, widths=list(widths))
    if peaks < 1:
        raise ConfigError("peaks must be >= 1")
    if not widths or min(widths) < 1:
        raise ConfigError(f"widths must all be >= 1, got {list(widths)}")
    explicit = explicit_sawtooth_mse(peaks, s.grid_points)
    rows = _map(_sawtooth_run, [(peaks, int(w), int(seed), s) for w in widths for seed in seeds], workers)
    aggregates = aggregate(rows, ["mse"], ["width"])
    artifacts = []
    if out_dir is not None:
        out = Path(out_dir)
        artifacts.append(write_rows_csv(out / "sawtooth.csv", rows, ["seed", "width", "mse", "diverged"]))
        ws = sorted(set(int(w) for w in widths))
        med = [max(aggregates[f"width={w}"]["mse"]["median"], 1e-16) for w in ws]
        chart = line_chart({"median training MSE (log10)": (ws, np.log10(med))}, "hidden width",
                           "log10 MSE", f"sawtooth, P={peaks}")
        artifacts.append(_write_text(out / "sawtooth.svg", chart))
    cfg = cfg or ExperimentConfig("sawtooth", seeds=list(seeds), output_dir=str(out_dir or "runs"),
                                  sawtooth=s)
    flags = {"diverged": [(r["seed"], r["width"]) for r in rows if r["diverged"]]}
    return _finish(cfg, rows, aggregates, artifacts, flags, {"explicit_mse": explicit, "peaks": peaks},
                   save=out_dir is not None)


# --------------------------------------------------------------------------
# X-shape ratio sweep


def _xshape_seed(args):
    cfg_dict, seed, draw = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    net, tr, te, history, cb = train_model(cfg, seed, eb="observe")
    report = cb.report()
    base = accuracy(net, te.x, te.y)
    rows, artifacts = [], []
    grid = plane_slice() if draw else None
    for ratio in cfg.prune.ratios:
        pruned, plan = _prune(net, cfg, ratio, seed)
        acc_pruned = accuracy(pruned, te.x, te.y)
        if plan.removals:
            fine_tune(pruned, tr, cfg, seed)
        acc = accuracy(pruned, te.x, te.y)
        rows.append({"seed": seed, "ratio": float(ratio), "units_kept": int(sum(map(len, plan.kept))),
                     "accuracy_base": base, "accuracy_pruned": acc_pruned, "accuracy": acc,
                     "drop": base - acc, "eb_trigger_epoch": report.trigger_epoch,
                     "epochs": len(history)})
        if draw:
            pts = te.x[:400]
            path = Path(cfg.output_dir) / f"seed_{seed}" / f"partition_ratio_{int(round(100 * ratio)):02d}.svg"
            artifacts.append(partition_svg(pruned, grid, path, f"pruned {100 * ratio:g}%", pts, te.y[:400]))
    return rows, artifacts, report.to_json()


def xshape_experiment(cfg: ExperimentConfig, draw: bool = True) -> RunSummary:
    """Train a small MLP on the X-shape task, then prune at every configured ratio.

    Partition SVGs are drawn for the first seed only.
    """
    jobs = [(cfg.to_dict(), int(s), draw and i == 0) for i, s in enumerate(cfg.seeds)]
    results = _map(_xshape_seed, jobs, cfg.workers)
    rows = [r for res in results for r in res[0]]
    artifacts = [a for res in results for a in res[1]]
    out = Path(cfg.output_dir)
    cols = ["seed", "ratio", "units_kept", "accuracy_base", "accuracy_pruned", "accuracy", "drop",
            "eb_trigger_epoch", "epochs"]
    artifacts.append(write_rows_csv(out / "xshape.csv", rows, cols))
    aggregates = aggregate(rows, ["accuracy", "accuracy_pruned", "drop"], ["ratio"])
    ratios = [float(r) for r in cfg.prune.ratios]
    chart = line_chart({"median accuracy": (ratios, [aggregates[f"ratio={r}"]["accuracy"]["median"] for r in ratios])},
                       "pruning ratio", "test accuracy", "X-shape, spline pruning")
    artifacts.append(_write_text(out / "xshape_accuracy.svg", chart))
    eb = {int(s): json.loads(res[2]) for s, res in zip(cfg.seeds, results)}
    return _finish(cfg, rows, aggregates, artifacts, extra={"eb": eb})


# --------------------------------------------------------------------------
# rho sweep


def _rho_seed(args):
    cfg_dict, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    net, tr, te, _, _ = train_model(cfg, seed)
    base = accuracy(net, te.x, te.y)
    rows = []
    for rho in cfg.prune.rho_grid:
        pruned, _ = _prune(net, cfg, cfg.prune.ratio, seed, rho=float(rho))
        fine_tune(pruned, tr, cfg, seed)
        rows.append({"seed": seed, "rho": float(rho), "accuracy_base": base,
                     "accuracy": accuracy(pruned, te.x, te.y)})
    return rows


def rho_sweep(cfg: ExperimentConfig) -> RunSummary:
    """Prune the same trained nets at ``prune.ratio`` for every rho in ``prune.rho_grid``."""
    grid = [float(r) for r in cfg.prune.rho_grid]
    if not grid:
        raise ConfigError("rho grid must not be empty")
    if min(grid) <= 0:
        raise ConfigError("rho must be positive")
    rows = [r for res in _map(_rho_seed, [(cfg.to_dict(), int(s)) for s in cfg.seeds], cfg.workers)
            for r in res]
    aggregates = aggregate(rows, ["accuracy"], ["rho"])
    medians = [aggregates[f"rho={r}"]["accuracy"]["median"] for r in grid]
    out = Path(cfg.output_dir)
    artifacts = [write_rows_csv(out / "rho_sweep.csv", rows, ["seed", "rho", "accuracy_base", "accuracy"]),
                 _write_text(out / "rho_sweep.svg",
                             line_chart({"median accuracy": (grid, medians)}, "rho", "test accuracy",
                                        f"pruning ratio {cfg.prune.ratio:g}", log_x=True))]
    return _finish(cfg, rows, aggregates, artifacts, extra={"spread": max(medians) - min(medians)})


# --------------------------------------------------------------------------
# Early-Bird pipeline


def _eb_seed(args):
    cfg_dict, seed, use_eb = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    net, tr, te, history, cb = train_model(cfg, seed, eb="stop" if use_eb else "off")
    report = cb.report() if cb is not None else None
    epochs_run = len(history)
    pre = training_macs(flops_estimate(net), len(tr), epochs_run)
    pruned, plan = _prune(net, cfg, cfg.prune.ratio, seed)
    acc_pruned = accuracy(pruned, te.x, te.y)
    fine_tune(pruned, tr, cfg, seed)
    post = training_macs(flops_estimate(pruned), len(tr), max(cfg.prune.fine_tune_epochs, 0))
    row = {"seed": seed, "trigger_epoch": report.trigger_epoch if report else None,
           "eb_fallback": bool(use_eb and report.trigger_epoch is None), "epochs_run": epochs_run,
           "accuracy_pruned": acc_pruned, "accuracy": accuracy(pruned, te.x, te.y),
           "macs_pre_prune": pre, "macs_post_prune": post, "macs_total": pre + post}
    out = Path(cfg.output_dir) / f"seed_{seed}"
    artifacts = [_write_text(out / "plan.json", plan.to_json())]
    eb_json = report.to_json() if report else None
    if eb_json is not None:
        artifacts.append(_write_text(out / "earlybird.json", eb_json))
    return row, artifacts, eb_json


def eb_pipeline(cfg: ExperimentConfig, use_eb: bool = True) -> RunSummary:
    """Train (stopping at the Early-Bird trigger), prune, fine-tune.

    When the detector never fires, training simply runs its full schedule;
    such seeds are listed under ``flags["eb_fallback"]``.
    """
    jobs = [(cfg.to_dict(), int(s), use_eb) for s in cfg.seeds]
    results = _map(_eb_seed, jobs, cfg.workers)
    rows = [r[0] for r in results]
    artifacts = [a for r in results for a in r[1]]
    cols = ["seed", "trigger_epoch", "eb_fallback", "epochs_run", "accuracy_pruned", "accuracy",
            "macs_pre_prune", "macs_post_prune", "macs_total"]
    artifacts.append(write_rows_csv(Path(cfg.output_dir) / "earlybird.csv", rows, cols))
    aggregates = aggregate(rows, ["accuracy", "macs_total", "epochs_run"])
    flags = {"eb_fallback": [r["seed"] for r in rows if r["eb_fallback"]], "eb_enabled": use_eb}
    extra = {"eb_reports": {int(s): r[2] for s, r in zip(cfg.seeds, results)}}
    return _finish(cfg, rows, aggregates, artifacts, flags, extra)


# --------------------------------------------------------------------------
# pruning-policy comparison


def _policy_seed(args):
    cfg_dict, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    net, tr, te, _, _ = train_model(cfg, seed)
    base = accuracy(net, te.x, te.y)
    rows = []
    for policy in cfg.prune.policies:
        pruned, _ = _prune(net, cfg, cfg.prune.ratio, seed, policy=policy)
        acc_pruned = accuracy(pruned, te.x, te.y)
        fine_tune(pruned, tr, cfg, seed)
        rows.append({"seed": seed, "policy": policy, "accuracy_base": base, "accuracy_pruned": acc_pruned,
                     "accuracy": accuracy(pruned, te.x, te.y), "forward_macs": flops_estimate(pruned)})
    return rows


def policy_comparison(cfg: ExperimentConfig) -> RunSummary:
    """Train once per seed, then prune with each of ``prune.policies`` and fine-tune."""
    rows = [r for res in _map(_policy_seed, [(cfg.to_dict(), int(s)) for s in cfg.seeds], cfg.workers)
            for r in res]
    cols = ["seed", "policy", "accuracy_base", "accuracy_pruned", "accuracy", "forward_macs"]
    artifacts = [write_rows_csv(Path(cfg.output_dir) / "policies.csv", rows, cols)]
    return _finish(cfg, rows, aggregate(rows, ["accuracy", "accuracy_pruned"], ["policy"]), artifacts)


# --------------------------------------------------------------------------
# K-means


def _kmeans_seed(args):
    cfg_dict, seed = args
    k = ExperimentConfig.from_dict(cfg_dict).kmeans
    spec = lattice_gmm(k.side, k.spacing, k.jitter, k.sigma_ratio, seed)
    x, labels = sample_gmm(spec, k.n_samples, seed)
    rows = []
    for scheme in k.schemes:
        for k_start in k.k_starts:
            model = fit_pipeline(x, int(k_start), k.k_final, scheme, seed)
            rows.append({"seed": seed, "K_start": int(k_start), "scheme": scheme,
                         "accuracy": clustering_accuracy(model, x, labels), "n_iter": model.n_iter})
    return rows


def kmeans_experiment(cfg: ExperimentConfig) -> RunSummary:
    """Accuracy of seed -> Lloyd -> prune -> Lloyd for every scheme and starting K."""
    k = cfg.kmeans
    if min(k.k_starts) < k.k_final:
        raise ConfigError("every K_start must be >= k_final")
    rows = [r for res in _map(_kmeans_seed, [(cfg.to_dict(), int(s)) for s in cfg.seeds], cfg.workers)
            for r in res]
    aggregates = aggregate(rows, ["accuracy"], ["scheme", "K_start"])
    out = Path(cfg.output_dir)
    artifacts = [write_rows_csv(out / "kmeans.csv", rows, ["seed", "K_start", "scheme", "accuracy"])]
    ks = sorted(int(v) for v in k.k_starts)
    series = {scheme: (ks, [aggregates[f"scheme={scheme},K_start={kk}"]["accuracy"]["median"] for kk in ks])
              for scheme in k.schemes}
    artifacts.append(_write_text(out / "kmeans.svg", line_chart(
        series, "starting number of clusters", "clustering accuracy", f"prune to K={k.k_final}")))
    return _finish(cfg, rows, aggregates, artifacts)


# --------------------------------------------------------------------------
# input-space slices


def slice_anchors(data: Dataset, classes=(0, 1, 2)):
    """First example of each requested class, in order."""
    out = []
    for c in classes:
        idx = np.flatnonzero(data.y == c)
        if len(idx) == 0:
            raise ConfigError(f"no example of class {c} for a slice anchor")
        out.append(data.x[idx[0]])
    return out


def slice_experiment(cfg: ExperimentConfig, n: int = 100) -> RunSummary:
    """Train on image data and draw the partition over the plane through three test images."""
    seed = int(cfg.seeds[0])
    net, tr, te, history, _ = train_model(cfg, seed)
    grid = make_slice(*slice_anchors(te), DEFAULT_EXTENT, n)
    out = Path(cfg.output_dir)
    sets = [subdivision_boundaries(net, grid, l) for l in range(len(net.hidden_layers))]
    sets.append(decision_boundary(net, grid))
    anchors = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    artifacts = [
        _write_text(out / "slice.svg", render_svg(sets, grid, Style(title="input-space slice"), anchors, [0, 1, 2])),
        str(write_boundaries_csv(out / "slice_boundaries.csv", sets)),
        str(save_weights(net, out / "model.splw")),
    ]
    row = {"seed": seed, "accuracy": accuracy(net, te.x, te.y), "regions": region_count(net, grid),
           "segments": int(sum(len(s) for s in sets)), "epochs": len(history)}
    return _finish(cfg, [row], aggregate([row], ["accuracy", "regions"]), artifacts)


# --------------------------------------------------------------------------
# initialization study


def layerwise_pretrain(net: Network, x, epochs: int = 10, lr: float = 0.01, batch_size: int = 32,
                       seed: int = 0, momentum: float = 0.9, tied: bool = True):
    """Greedy unsupervised initialization of each hidden dense layer.

    Layer ``l`` is trained as the encoder of a one-hidden-layer autoencoder
    ``x_hat = V act(W x + b) + c`` on the outputs of the already initialized
    layers below it.  With ``tied`` the decoder is ``V = W^T``; otherwise
    ``V`` starts at ``W^T`` and is trained separately.  The decoder is
    discarded afterwards and the head is left untouched.

    Returns ``(new_net, losses)`` where ``losses[l]`` holds the mean
    reconstruction error before training and after every epoch.
    """
    for layer in net.layers:
        if not isinstance(layer, (Dense, Flatten)):
            raise UnsupportedArchitectureError(f"layerwise pretraining supports dense stacks only, got {layer.kind}")
    if epochs < 0:
        raise ConfigError("pretrain epochs must be >= 0")
    net = net.copy()
    h = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    hidden_ids = {id(l) for l in net.hidden_layers}
    losses = []
    for layer in net.layers:
        if isinstance(layer, Flatten):
            h, _ = layer.forward(h)
            continue
        if id(layer) not in hidden_ids:
            break
        losses.append(_pretrain_layer(layer, h, epochs, lr, batch_size, momentum, rng, tied))
        h = layer.activation(h @ layer.effective_weights.T + layer.bias)
    return net, losses


def _pretrain_layer(layer: Dense, x, epochs, lr, batch_size, momentum, rng, tied):
    c = np.zeros(x.shape[1])
    dec = None if tied else layer.effective_weights.T.copy()

    def recon(xb):
        w = layer.effective_weights
        z = xb @ w.T + layer.bias
        a = layer.activation(z)
        return z, a, a @ (w if tied else dec.T) + c

    def loss():
        return float(np.mean(np.sum((recon(x)[2] - x) ** 2, axis=1)))

    params = [layer.weights, layer.bias, c] + ([] if tied else [dec])
    vel = [np.zeros_like(p) for p in params]
    trace = [loss()]
    n = len(x)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            xb = x[perm[start:start + batch_size]]
            z, a, r = recon(xb)
            g = 2.0 * (r - xb) / len(xb)
            back = layer.effective_weights if tied else dec.T
            dz = (g @ back.T) * layer.activation.derivative(z)
            dw = dz.T @ xb + (a.T @ g if tied else 0.0)
            if layer.mask is not None:
                dw = dw * layer.mask
            grads = [dw, dz.sum(axis=0), g.sum(axis=0)] + ([] if tied else [g.T @ a])
            for v, grad, param in zip(vel, grads, params):
                v *= momentum
                v -= lr * grad
                param += v
        trace.append(loss())
    return trace


def _init_seed(args):
    cfg_dict, seed, reduction, pretrain_epochs, pretrain_lr, tied = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    tr, te = load_data(cfg, seed)
    small = [max(1, int(round(h * (1 - reduction)))) for h in cfg.hidden]
    small_cfg = ExperimentConfig.from_dict({**cfg_dict, "hidden": small})
    tc = cfg.train.replace(seed=seed)
    rows = []

    kaiming = build_model(small_cfg, tr, seed)
    pretrained, _ = layerwise_pretrain(kaiming, tr.x, pretrain_epochs, pretrain_lr, seed=seed, tied=tied)
    for name, net in (("kaiming", kaiming), ("pretrain", pretrained)):
        train(net, tr, tc)
        rows.append({"seed": seed, "method": name, "accuracy": accuracy(net, te.x, te.y)})

    init = build_model(cfg, tr, seed)
    trained = init.copy()
    train(trained, tr, tc)
    # the same winning mask on a fresh draw of weights isolates the value of the rewound init
    fresh = build_model(cfg, tr, seed + 7919)
    for name, start in (("lottery", init), ("lottery_reinit", fresh)):
        ticket = lottery_mask_and_rewind(start, trained, 1.0 - reduction)
        train(ticket, tr, tc)
        rows.append({"seed": seed, "method": name, "accuracy": accuracy(ticket, te.x, te.y)})
    return rows


def init_comparison(cfg: ExperimentConfig, reduction: float = 0.9, pretrain_epochs: int = 10,
                    pretrain_lr: float = 0.01, tied: bool = True) -> RunSummary:
    """Small net from Kaiming init vs layerwise-pretrained init vs lottery tickets.

    The small nets keep ``1 - reduction`` of each hidden width; the tickets
    keep the same fraction of weights (per layer) of the full-width net,
    either rewound to its initialization (``lottery``) or placed on a fresh
    random initialization (``lottery_reinit``).
    """
    if not 0.0 <= reduction < 1.0:
        raise ConfigError("reduction must lie in [0, 1)")
    jobs = [(cfg.to_dict(), int(s), reduction, pretrain_epochs, pretrain_lr, tied) for s in cfg.seeds]
    rows = [r for res in _map(_init_seed, jobs, cfg.workers) for r in res]
    artifacts = [write_rows_csv(Path(cfg.output_dir) / "init_comparison.csv", rows, ["seed", "method", "accuracy"])]
    return _finish(cfg, rows, aggregate(rows, ["accuracy"], ["method"]), artifacts)


# --------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig) -> RunSummary:
    """Dispatch on ``cfg.kind``."""
    if cfg.kind == "sawtooth":
        s = cfg.sawtooth
        return sawtooth_experiment(s.peaks, s.widths, cfg.seeds, s, cfg.output_dir, cfg.workers, cfg)
    if cfg.kind == "xshape":
        return xshape_experiment(cfg)
    if cfg.kind == "rho_sweep":
        return rho_sweep(cfg)
    if cfg.kind == "earlybird":
        return eb_pipeline(cfg)
    if cfg.kind == "prune_pipeline":
        return policy_comparison(cfg)
    if cfg.kind == "kmeans":
        return kmeans_experiment(cfg)
    if cfg.kind == "mnist_slice":
        return slice_experiment(cfg)
    raise ConfigError(f"unknown experiment kind {cfg.kind!r}")


__all__ = [
    "RunSummary", "aggregate", "summary_stats", "training_macs", "load_data", "build_model", "toy_convnet",
    "image_mlp", "train_model", "fine_tune", "explicit_sawtooth_net", "explicit_sawtooth_mse",
    "sawtooth_experiment", "xshape_experiment", "rho_sweep", "eb_pipeline", "policy_comparison",
    "kmeans_experiment", "slice_experiment", "layerwise_pretrain", "init_comparison", "run_experiment",
    "plane_slice", "partition_svg", "write_rows_csv", "config_hash",
]
