"""The five experiment pipelines, their training loop and run reports.

Pipelines: ``global-cnn``, ``cnn-dnn-transfer``, ``dd-cnn-transfer``,
``global-lda`` and ``lda-dnn``.  Every random choice (initialization,
shuffling, synthetic data, splits) is derived from the run seed, so a rerun
with the same config reproduces the metric streams exactly.
"""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import graph as G
from .data import LabeledDataset, gen_synthetic, load_dataset, save_params, split_train_val
from .decomposition import extract_tiles, format_grid, plan_grid, stack_tiles
from .errors import ConfigError, ContractError, DivergenceError, PhaseError
from .lda import DEFAULT_GAMMA, DatasetView, LdaModel, default_dim, fit_lda, predict_proba
from .layers import AdamState, adam_step, t_softmax_ce
from .models import (
    assemble_cnn_dnn,
    assemble_dd_global,
    branch_params,
    build_dnn_head,
    build_model,
    channel_decompose,
    coherent_params,
    scale_local,
)
from .autodiff import Tape, backward

log = logging.getLogger("ddclass")

PIPELINES = ("global-cnn", "cnn-dnn-transfer", "dd-cnn-transfer", "global-lda", "lda-dnn")
MODELS = ("vgg9", "resnet20")
HEADS = ("dnn", "bypass")
_TAGS = {"init": 1, "shuffle": 2, "head": 3, "data": 4, "split": 5}


def derive_seed(seed: int, tag: str, index: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed), _TAGS[tag], int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class RunConfig:
    pipeline: str
    train: str | None = None
    val: str | None = None
    val_ratio: float = 0.8
    synthetic: str | None = None
    count: int = 1000
    shape: tuple = (32, 32)
    classes: int = 10
    channels: int = 1
    model: str = "vgg9"
    width: int = 16
    head: str = "dnn"
    grid: tuple = (2, 2)
    delta: int = 0
    d: int | None = None
    gamma: float = DEFAULT_GAMMA
    epochs_local: int = 150
    epochs_global: int = 50
    epochs_baseline: int = 200
    fair_budget: bool = True
    batch_size: int = 32
    lr: float = 0.001
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.grid = tuple(int(g) for g in self.grid)
        self.validate()

    def validate(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}; choose from {', '.join(PIPELINES)}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        for name in ("epochs_local", "epochs_global", "epochs_baseline", "delta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("width", "batch_size", "workers", "count", "classes", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.val_ratio < 1.0:
            raise ConfigError("val_ratio must lie in (0, 1)")
        if self.gamma < 0 or self.lr <= 0:
            raise ConfigError("gamma must be >= 0 and lr > 0")
        if len(self.grid) not in (2, 3):
            raise ConfigError(f"grid must have 2 or 3 extents, got {self.grid}")
        if self.train is None and self.synthetic is None:
            raise ConfigError("no data: set [data] train or [data] synthetic")
        if self.synthetic is not None and len(self.shape) != len(self.grid):
            raise ConfigError(f"grid {format_grid(self.grid)} does not match shape rank {len(self.shape)}")
        if self.head == "bypass" and int(np.prod(self.grid)) != 1:
            raise ConfigError("head=bypass is only defined for a 1-tile decomposition")
        if self.d is not None and self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.fair_budget and self.pipeline in ("cnn-dnn-transfer", "dd-cnn-transfer"):
            if self.epochs_local + self.epochs_global != self.epochs_baseline:
                raise ConfigError(
                    f"fair-budget rule: epochs_local + epochs_global = "
                    f"{self.epochs_local + self.epochs_global} != epochs_baseline = {self.epochs_baseline}"
                )

    @property
    def n_tiles(self) -> int:
        return int(np.prod(self.grid))


@dataclass
class RunReport:
    pipeline: str
    dataset_id: str
    config: dict
    records: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    artifact: str | None = None

    def metric_stream(self) -> list:
        return [dict(r) for r in self.records]

    def summary(self) -> dict:
        return {
            "type": "summary",
            "pipeline": self.pipeline,
            "dataset_id": self.dataset_id,
            "model": self.config.get("model"),
            "width": self.config.get("width"),
            "grid": format_grid(self.config.get("grid", ())),
            "delta": self.config.get("delta"),
            "seed": self.config.get("seed"),
            "final": self.final,
            "timings": self.timings,
            "extras": self.extras,
            "artifact": self.artifact,
            "config": self.config,
        }

    def to_lines(self) -> list[str]:
        import json

        return [json.dumps(r, sort_keys=True) for r in self.records] + [
            json.dumps(self.summary(), sort_keys=True)
        ]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")


def _ms(t: float) -> float:
    return round(float(t), 3)


# --- data ---------------------------------------------------------------------

def load_data(cfg: RunConfig):
    """Training and validation datasets named by the config."""
    if cfg.train is not None:
        train = load_dataset(cfg.train)
        if cfg.val is not None:
            return train, load_dataset(cfg.val)
        return split_train_val(train, cfg.val_ratio, derive_seed(cfg.seed, "split"))
    ds = gen_synthetic(cfg.synthetic, cfg.count, cfg.shape, cfg.classes,
                       seed=derive_seed(cfg.seed, "data"), channels=cfg.channels)
    return split_train_val(ds, cfg.val_ratio, derive_seed(cfg.seed, "split"))


def dataset_id(train: LabeledDataset, val: LabeledDataset) -> str:
    h = hashlib.sha256()
    for arr in (train.images, train.labels, val.images, val.labels):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


# --- training -----------------------------------------------------------------

def evaluate(predictor, x, y):
    """``(accuracy, mean cross-entropy)`` of a probability predictor on (x, y).

    `predictor` maps a batch to class probabilities; argmax ties go to the
    lowest class index.
    """
    y = np.asarray(y).astype(np.int64)
    if len(y) == 0:
        raise ContractError("cannot evaluate on empty data")
    probs = np.asarray(predictor(x), dtype=np.float64)
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    loss = float(np.mean(-np.log(np.maximum(probs[np.arange(len(y)), y], 1e-30))))
    return acc, loss


def graph_predictor(graph, params, transform=None, batch_size: int = 256):
    def predict(x):
        if transform is not None:
            x = transform(x)
        return G.predict(graph, x, params, batch_size)
    return predict


def train_supervised(graph, params, train, val=None, epochs: int = 1, batch_size: int = 32,
                     state: AdamState | None = None, seed: int = 0, start_epoch: int = 0,
                     phase: str = "train", lr: float = 0.001):
    """Mini-batch Adam on mean softmax cross-entropy.

    `train` and `val` are ``(x, y)`` pairs.  Epoch ``e`` (counted from
    `start_epoch`) shuffles with a generator seeded by ``(seed, e)``.
    Returns ``(params, metrics, state)``; metrics hold one record per epoch
    with the running training loss/accuracy and the validation loss/accuracy.
    """
    x, y = train
    y = np.asarray(y).astype(np.int64)
    n = len(y)
    if n == 0:
        raise ContractError("training data is empty")
    state = AdamState(lr=lr) if state is None else state
    params = dict(params)
    metrics = []
    for e in range(start_epoch, start_epoch + epochs):
        order = np.random.default_rng(np.random.SeedSequence([derive_seed(seed, "shuffle"), e])).permutation(n)
        total_loss = 0.0
        correct = 0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            tape = Tape()
            nodes = G.run(graph, tape, tape.leaf(x[idx]), params)
            loss, probs = t_softmax_ce(tape, nodes[graph.logits_layer], y[idx])
            value = float(loss.value[0])
            if not np.isfinite(value):
                raise DivergenceError(e, value)
            grads = backward(tape, output=loss)
            params = adam_step(params, grads, state)
            total_loss += value * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == y[idx]))
        rec = {"type": "epoch", "phase": phase, "epoch": e,
               "train_loss": total_loss / n, "train_acc": correct / n}
        if val is not None and len(val[1]):
            rec["val_acc"], rec["val_loss"] = evaluate(graph_predictor(graph, params), *val)
        log.debug("%s epoch %d: %s", phase, e, rec)
        metrics.append(rec)
    return params, metrics, state


def _train_local(job):
    t0 = time.perf_counter()
    g, p, train, val, epochs, batch, lr, seed, start, phase = job
    params, metrics, state = train_supervised(g, p, train, val, epochs, batch, None, seed, start, phase, lr)
    return params, metrics, state, time.perf_counter() - t0


def _run_jobs(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _fit_local_lda(job):
    t0 = time.perf_counter()
    rows, labels, k, d, gamma = job
    model = fit_lda(DatasetView.from_rows(rows, labels, k), d, gamma)
    return model, time.perf_counter() - t0


# --- pipelines ----------------------------------------------------------------

class _Phase:
    def __init__(self, name, timings, key=None):
        self.name = name
        self.timings = timings
        self.key = key or name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.key] = _ms(self.timings.get(self.key, 0.0) + time.perf_counter() - self.t0)
        if exc is not None and not isinstance(exc, PhaseError):
            raise PhaseError(self.name, exc) from exc
        return False


@dataclass
class RunResult:
    report: RunReport
    params: dict
    predictor: object = None


def _plan(cfg, train):
    spatial = train.sample_shape[1:]
    if len(spatial) != len(cfg.grid):
        raise ContractError(f"grid {format_grid(cfg.grid)} does not match image rank {len(spatial)}")
    return plan_grid(spatial, cfg.grid, cfg.delta, channels=train.sample_shape[0])


def _lda_dim(cfg, k):
    return cfg.d if cfg.d is not None else default_dim(k)


def lda_params(models, prefix="lda") -> dict:
    out = {}
    for i, m in enumerate(models):
        key = f"{prefix}{i}"
        out[f"{key}.projection"] = m.projection.astype(np.float32)
        out[f"{key}.eigenvalues"] = m.eigenvalues.astype(np.float32)
        out[f"{key}.centroids"] = m.centroids.astype(np.float32)
        out[f"{key}.priors"] = m.priors.astype(np.float32)
        out[f"{key}.gamma_scale"] = np.array([m.gamma, m.scale], dtype=np.float32)
    return out


def lda_models_from_params(params, prefix="lda") -> list:
    models = []
    i = 0
    while f"{prefix}{i}.projection" in params:
        key = f"{prefix}{i}"
        gamma, scale = params[f"{key}.gamma_scale"].astype(np.float64)
        models.append(LdaModel(
            params[f"{key}.projection"].astype(np.float64),
            params[f"{key}.eigenvalues"].astype(np.float64),
            params[f"{key}.centroids"].astype(np.float64),
            params[f"{key}.priors"].astype(np.float64),
            float(gamma), float(scale)))
        i += 1
    return models


def lda_features(models, plan, images) -> np.ndarray:
    """Concatenated local class probabilities, ``(n, K * N)`` in tile order."""
    tiles = extract_tiles(images, plan)
    return np.hstack([predict_proba(m, t) for m, t in zip(models, tiles)]).astype(np.float32)


def build_predictor(cfg: RunConfig, params: dict, sample_shape, k: int):
    """Rebuild the final classifier of a pipeline from its checkpoint params."""
    spatial = tuple(sample_shape[1:])
    if cfg.pipeline == "global-lda":
        (model,) = lda_models_from_params(params)
        return lambda x: predict_proba(model, np.asarray(x).reshape(len(x), -1))
    plan = plan_grid(spatial, cfg.grid, cfg.delta, channels=sample_shape[0])
    if cfg.pipeline == "lda-dnn":
        models = lda_models_from_params(params)
        head = build_dnn_head(k, plan.n)
        hp = {n[len("head/"):]: v for n, v in params.items() if n.startswith("head/")}
        return graph_predictor(head, hp, transform=lambda x: lda_features(models, plan, x))
    global_graph = build_model(cfg.model, tuple(sample_shape), k, cfg.width)
    if cfg.pipeline == "global-cnn":
        return graph_predictor(global_graph, params)
    if cfg.pipeline == "cnn-dnn-transfer":
        locals_ = [scale_local(global_graph, plan.n, plan.tile_input_shape(i)) for i in range(plan.n)]
        if cfg.head == "bypass":
            return graph_predictor(locals_[0], params, transform=lambda x: extract_tiles(x, plan)[0])
        coherent = assemble_cnn_dnn(locals_, build_dnn_head(k, plan.n), plan)
        return graph_predictor(coherent, params)
    stacked_shape = (plan.n * sample_shape[0],) + plan.tiles[0].extents
    dd_graph = build_model(cfg.model, stacked_shape, k, cfg.width)
    return graph_predictor(dd_graph, params, transform=lambda x: stack_tiles(x, plan))


def run_pipeline(cfg: RunConfig, data=None) -> RunResult:
    """Execute one pipeline end to end and report metrics and phase times.

    `data` optionally supplies ``(train, val)`` datasets instead of loading
    them from the config.
    """
    timings: dict = {}
    t_start = time.perf_counter()
    with _Phase("data", timings, "data"):
        train, val = data if data is not None else load_data(cfg)
    k = train.num_classes
    ytr = train.labels.astype(np.int64)
    yva = val.labels.astype(np.int64)
    report = RunReport(cfg.pipeline, dataset_id(train, val), _config_dict(cfg))
    bs, lr, seed = cfg.batch_size, cfg.lr, cfg.seed
    log.info("pipeline %s on %d/%d samples (K=%d)", cfg.pipeline, len(train), len(val), k)

    if cfg.pipeline == "global-cnn":
        with _Phase("global", timings):
            g = build_model(cfg.model, train.sample_shape, k, cfg.width)
            params = G.init_params(g, derive_seed(seed, "init", 0))
            params, metrics, _ = train_supervised(
                g, params, (train.images, ytr), (val.images, yva), cfg.epochs_baseline, bs,
                seed=seed, phase="global", lr=lr)
        report.records += metrics
        predictor = graph_predictor(g, params)

    elif cfg.pipeline == "cnn-dnn-transfer":
        plan = _plan(cfg, train)
        with _Phase("local", timings, "local_wall"):
            gg = build_model(cfg.model, train.sample_shape, k, cfg.width)
            tr_tiles = extract_tiles(train.images, plan)
            va_tiles = extract_tiles(val.images, plan)
            jobs = []
            for i in range(plan.n):
                lg = scale_local(gg, plan.n, plan.tile_input_shape(i))
                jobs.append((lg, G.init_params(lg, derive_seed(seed, "init", i)),
                             (tr_tiles[i], ytr), (va_tiles[i], yva),
                             cfg.epochs_local, bs, lr, seed, 0, f"local{i}"))
            results = _run_jobs(_train_local, jobs, cfg.workers)
        _local_timings(timings, [r[3] for r in results])
        for r in results:
            report.records += r[1]
        local_graphs = [j[0] for j in jobs]
        with _Phase("transfer", timings):
            if cfg.head == "bypass":
                g, params, state = local_graphs[0], results[0][0], results[0][2]
                g_train, g_val = (tr_tiles[0], ytr), (va_tiles[0], yva)
                predictor_transform = lambda x: extract_tiles(x, plan)[0]  # noqa: E731
            else:
                head = build_dnn_head(k, plan.n)
                g = assemble_cnn_dnn(local_graphs, head, plan)
                params = coherent_params([r[0] for r in results],
                                         G.init_params(head, derive_seed(seed, "head")))
                state = None
                g_train, g_val = (train.images, ytr), (val.images, yva)
                predictor_transform = None
            report.extras["initial_val_accuracy"] = evaluate(
                graph_predictor(g, params), *g_val)[0]
            params, metrics, _ = train_supervised(
                g, params, g_train, g_val, cfg.epochs_global, bs, state, seed,
                start_epoch=cfg.epochs_local, phase="transfer", lr=lr)
        report.records += metrics
        report.extras["local_params"] = sum(lg.num_params() for lg in local_graphs)
        report.extras["global_params"] = gg.num_params()
        predictor = graph_predictor(g, params, transform=predictor_transform)

    elif cfg.pipeline == "dd-cnn-transfer":
        plan = _plan(cfg, train)
        if not plan.uniform:
            raise PhaseError("local", ContractError(
                "dd-cnn-transfer needs equal tiles (divisible grid, delta=0)"))
        stacked_shape = (plan.n * plan.channels,) + plan.tiles[0].extents
        with _Phase("local", timings, "local_wall"):
            gg = build_model(cfg.model, stacked_shape, k, cfg.width)
            subnets, rmap = channel_decompose(gg, plan.n)
            tr_tiles = extract_tiles(train.images, plan)
            va_tiles = extract_tiles(val.images, plan)
            jobs = [(subnets[i], G.init_params(subnets[i], derive_seed(seed, "init", i)),
                     (tr_tiles[i], ytr), (va_tiles[i], yva),
                     cfg.epochs_local, bs, lr, seed, 0, f"local{i}") for i in range(plan.n)]
            results = _run_jobs(_train_local, jobs, cfg.workers)
        _local_timings(timings, [r[3] for r in results])
        for r in results:
            report.records += r[1]
        with _Phase("transfer", timings):
            g, params = assemble_dd_global([r[0] for r in results], rmap)
            xtr = np.concatenate(tr_tiles, axis=1)
            xva = np.concatenate(va_tiles, axis=1)
            report.extras["initial_val_accuracy"] = evaluate(graph_predictor(g, params), xva, yva)[0]
            params, metrics, _ = train_supervised(
                g, params, (xtr, ytr), (xva, yva), cfg.epochs_global, bs, None, seed,
                start_epoch=cfg.epochs_local, phase="transfer", lr=lr)
        report.records += metrics
        predictor = graph_predictor(g, params, transform=lambda x: stack_tiles(x, plan))

    elif cfg.pipeline == "global-lda":
        with _Phase("global", timings):
            model = fit_lda(DatasetView.from_rows(train.images, ytr, k), _lda_dim(cfg, k), cfg.gamma)
        params = lda_params([model])
        predictor = lambda x: predict_proba(model, np.asarray(x).reshape(len(x), -1))  # noqa: E731

    else:  # lda-dnn
        plan = _plan(cfg, train)
        d = _lda_dim(cfg, k)
        with _Phase("local", timings, "local_wall"):
            tr_tiles = extract_tiles(train.images, plan)
            jobs = [(t, ytr, k, d, cfg.gamma) for t in tr_tiles]
            fitted = _run_jobs(_fit_local_lda, jobs, cfg.workers)
        _local_timings(timings, [f[1] for f in fitted])
        models = [f[0] for f in fitted]
        with _Phase("head", timings):
            ftr = lda_features(models, plan, train.images)
            fva = lda_features(models, plan, val.images)
            head = build_dnn_head(k, plan.n)
            hp = G.init_params(head, derive_seed(seed, "head"))
            hp, metrics, _ = train_supervised(
                head, hp, (ftr, ytr), (fva, yva), cfg.epochs_baseline, bs, None, seed,
                phase="head", lr=lr)
        report.records += metrics
        params = {**lda_params(models), **{f"head/{n}": v for n, v in hp.items()}}
        head_pred = graph_predictor(head, hp)
        predictor = lambda x: head_pred(lda_features(models, plan, x))  # noqa: E731

    with _Phase("evaluate", timings, "evaluate"):
        tr_acc, tr_loss = evaluate(predictor, train.images, ytr)
        va_acc, va_loss = evaluate(predictor, val.images, yva)
    report.final = {"train_accuracy": tr_acc, "val_accuracy": va_acc,
                    "train_loss": tr_loss, "val_loss": va_loss}
    timings["total"] = _ms(time.perf_counter() - t_start)
    report.timings = timings
    log.info("%s: val %.4f (train %.4f)", cfg.pipeline, va_acc, tr_acc)
    return RunResult(report, params, predictor)


def _local_timings(timings, per_local):
    timings["local_max"] = _ms(max(per_local))
    timings["local_sum"] = _ms(sum(per_local))


def _config_dict(cfg: RunConfig) -> dict:
    out = asdict(cfg)
    out["shape"] = list(cfg.shape)
    out["grid"] = list(cfg.grid)
    return out


def save_run(result: RunResult, out_dir, cfg_text: str | None = None) -> Path:
    """Write ``report.jsonl``, ``model.dprm`` and (optionally) ``run.cfg``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.dprm"
    save_params(ckpt, {k: np.asarray(v, dtype=np.float32) for k, v in result.params.items()})
    result.report.artifact = str(ckpt)
    result.report.write(out / "report.jsonl")
    if cfg_text is not None:
        (out / "run.cfg").write_text(cfg_text)
    return out


__all__ = [
    "PIPELINES", "RunConfig", "RunReport", "RunResult", "branch_params", "build_predictor",
    "dataset_id", "derive_seed", "evaluate", "graph_predictor", "lda_features", "load_data",
    "run_pipeline", "save_run", "train_supervised",
]
