"""Training loop, mAP evaluation, data-limited subsampling and the ablation
driver."""

from __future__ import annotations

import contextlib
import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Dataset
from .diffcore import ops
from .diffcore.layers import init_parameters
from .diffcore.tensor import GradTape, Tensor
from .errors import ConfigError, TrainingDiverged
from .fusion import AblationMode
from .network import EHybridNet, ModelSpec, baseline_spec
from .scattering import ScatteringCache, scatter

ARMS = ("hybrid", "scat_disabled", "net_disabled", "baseline")
SWEEP_FRACTIONS = (1.0, 0.5, 0.25)
SWEEP_ARMS = ("hybrid", "baseline")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr0: float = 0.1
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    subsample_fraction: float = 1.0
    ablation: str = "none"
    flip: bool = False
    deterministic: bool = True
    eval_batch_size: int = 200

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"train.batch_size must be >= 2, got {self.batch_size}")
        if not 0 < self.subsample_fraction <= 1:
            raise ConfigError(f"train.subsample_fraction must lie in (0, 1], got {self.subsample_fraction}")
        if self.lr0 < 0 or self.lr_min < 0:
            raise ConfigError("train.lr0 and train.lr_min must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"train.momentum must lie in [0, 1), got {self.momentum}")
        try:
            AblationMode.parse(self.ablation)
        except ConfigError as exc:
            raise ConfigError(f"train.ablation: {exc}") from None


@dataclass
class MetricsReport:
    per_class_ap: list
    map: float
    excluded_classes: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    arm: str = "hybrid"
    scat_grad_max: list = field(default_factory=list)
    n_train: int = 0


def cosine_lr(t: float, cfg: TrainConfig) -> float:
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1 + math.cos(math.pi * t / cfg.epochs))


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [None] * len(self.params)

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v = self._velocity[i]
            v = d.copy() if v is None or not self.momentum else self.momentum * v + d
            self._velocity[i] = v
            p.data -= (lr * v).astype(p.data.dtype, copy=False)


# --- metrics ---------------------------------------------------------------

def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """All-points AP of one ranking; ties keep sample-index order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(positives, dtype=bool)[order]
    n_pos = hits.sum()
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / n_pos)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list, list]:
    """One-vs-rest mAP over classes that have positives.

    Returns ``(mAP, per-class AP with None for excluded classes, excluded ids)``.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0] or scores.shape[0] == 0:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} do not align")
    per_class, excluded = [], []
    for k in range(scores.shape[1]):
        pos = labels == k
        if pos.any():
            per_class.append(average_precision(scores[:, k], pos))
        else:
            per_class.append(None)
            excluded.append(k)
    valid = [ap for ap in per_class if ap is not None]
    if not valid:
        raise ValueError("no class has a positive sample")
    return float(np.mean(valid)), per_class, excluded


def subsample_dataset(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Uniform subset of ``floor(n * fraction)`` samples, in original order."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"subsample fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset
    n = int(math.floor(len(dataset) * fraction))
    if n == 0:
        raise ConfigError(f"fraction {fraction} of {len(dataset)} samples leaves an empty training set")
    keep = np.sort(np.random.default_rng([seed, 0x5B]).choice(len(dataset), size=n, replace=False))
    return dataset.subset(keep)


# --- scattering precompute -------------------------------------------------

def dataset_scattering(model: EHybridNet, dataset: Dataset, cache: ScatteringCache | None = None,
                       chunk: int = 128) -> dict:
    """Scattering inputs for every sample, stored as float32 per J."""
    spec = model.spec
    out = {}
    for J, bank in model.banks.items():
        cfg = spec.scattering_config(J)

        def compute(bank=bank, cfg=cfg):
            parts = [scatter(dataset.images[i:i + chunk], bank, cfg).coefficients.astype(np.float32)
                     for i in range(0, len(dataset), chunk)]
            return np.concatenate(parts)

        key = (dataset.fingerprint, spec.L, spec.A, spec.include_order0, spec.morlet, spec.input_resolution)
        out[J] = cache.get_or_compute(key, J, compute) if cache is not None else compute()
    return out


# --- train / evaluate --------------------------------------------------------

def _limits(deterministic: bool):
    return threadpool_limits(limits=1) if deterministic else contextlib.nullcontext()


def build_model(spec: ModelSpec, seed: int, arm: str = "hybrid") -> EHybridNet:
    """Fresh, seeded model for one arm of an experiment."""
    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}; expected one of {', '.join(ARMS)}")
    if arm == "baseline":
        spec = baseline_spec(spec)
    elif not spec.hybrid:
        raise ConfigError(f"arm {arm!r} needs a hybrid model spec")
    model = EHybridNet(spec)
    init_parameters(model, seed)
    if arm in ("scat_disabled", "net_disabled"):
        model.set_ablation(arm)
    return model


def train(model: EHybridNet, dataset: Dataset, cfg: TrainConfig, cache: ScatteringCache | None = None,
          arm: str = "hybrid") -> MetricsReport:
    """Train ``model`` in place and return the per-epoch trace.

    Data order, DropConnect masks and flips are drawn from generators seeded
    by ``cfg.seed``; initialization is the caller's job (see build_model).
    """
    if dataset.num_classes != model.spec.num_classes:
        raise ConfigError(f"model.num_classes is {model.spec.num_classes} but the dataset has "
                          f"{dataset.num_classes} classes")
    if cfg.ablation != "none":
        model.set_ablation(cfg.ablation)
    ablation = model.hf_blocks[0].ablation if model.hf_blocks else AblationMode.NONE
    report = MetricsReport([], float("nan"), arm=arm, n_train=len(dataset))
    order_rng = np.random.default_rng([cfg.seed, 1])
    flip_rng = np.random.default_rng([cfg.seed, 3])
    model.rng = np.random.default_rng([cfg.seed, 2])
    params = list(model.param_store().trainable().values())
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    n = len(dataset)

    with _limits(cfg.deterministic):
        scat_all = dataset_scattering(model, dataset, cache) if model.spec.hybrid and not cfg.flip else None
        model.train()
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            lr = cosine_lr(epoch, cfg)
            perm = order_rng.permutation(n)
            total, seen = 0.0, 0
            for b, i in enumerate(range(0, n, cfg.batch_size)):
                idx = perm[i:i + cfg.batch_size]
                if idx.size < 2:
                    continue
                x = dataset.images[idx]
                if cfg.flip:
                    flips = flip_rng.random(idx.size) < 0.5
                    x = np.where(flips[:, None, None, None], x[..., ::-1], x)
                scat = None
                if model.spec.hybrid:
                    scat = ({J: v[idx] for J, v in scat_all.items()} if scat_all is not None
                            else model.scattering_inputs(x))
                    probe = b == 0 and ablation is AblationMode.SCAT_DISABLED
                    scat = {J: Tensor(v.astype(np.float32), requires_grad=probe) for J, v in scat.items()}
                with GradTape() as tape:
                    loss = ops.softmax_cross_entropy(model(x, scat=scat), dataset.labels[idx])
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b}")
                tape.backward(loss)
                if scat is not None and b == 0 and ablation is AblationMode.SCAT_DISABLED:
                    report.scat_grad_max.append(max(float(np.abs(t.grad).max()) for t in scat.values()))
                opt.step(lr)
                model.zero_grad()
                total += value * idx.size
                seen += idx.size
            report.train_loss.append(total / seen)
            report.lr.append(lr)
            report.seconds.append(0.0 if cfg.deterministic else time.perf_counter() - start)
    return report


def predict(model: EHybridNet, dataset: Dataset, cache: ScatteringCache | None = None,
            batch_size: int = 200, deterministic: bool = True) -> np.ndarray:
    """Softmax scores ``(M, K)`` in eval mode."""
    model.eval()
    with _limits(deterministic):
        scat_all = dataset_scattering(model, dataset, cache) if model.spec.hybrid else None
        scores = []
        for i in range(0, len(dataset), batch_size):
            sl = slice(i, i + batch_size)
            scat = {J: v[sl] for J, v in scat_all.items()} if scat_all is not None else None
            scores.append(ops.softmax(model(dataset.images[sl], scat=scat).data.astype(np.float64)))
    model.train()
    return np.concatenate(scores)


def evaluate(model: EHybridNet, dataset: Dataset, cache: ScatteringCache | None = None,
             report: MetricsReport | None = None, batch_size: int = 200,
             deterministic: bool = True) -> MetricsReport:
    scores = predict(model, dataset, cache, batch_size, deterministic)
    m, per_class, excluded = mean_average_precision(scores, dataset.labels)
    report = report if report is not None else MetricsReport([], m)
    report.per_class_ap, report.map, report.excluded_classes = per_class, m, excluded
    return report


def train_and_evaluate(spec: ModelSpec, train_set: Dataset, test_set: Dataset, cfg: TrainConfig,
                       arm: str = "hybrid", cache: ScatteringCache | None = None):
    """One arm end to end: returns ``(model, report)``."""
    train_set = subsample_dataset(train_set, cfg.subsample_fraction, cfg.seed)
    model = build_model(spec, cfg.seed, arm)
    report = train(model, train_set, cfg, cache, arm)
    evaluate(model, test_set, cache, report, cfg.eval_batch_size, cfg.deterministic)
    return model, report


# --- experiment drivers ----------------------------------------------------

@dataclass
class ComparisonReport:
    """mAP per (arm, seed) plus per-arm means and deltas against ``reference``."""

    rows: list
    reference: str = "hybrid"
    reports: dict = field(default_factory=dict, repr=False)

    @property
    def means(self) -> dict:
        arms = dict.fromkeys(r[0] for r in self.rows)
        return {a: float(np.mean([m for arm, _, m in self.rows if arm == a])) for a in arms}

    @property
    def deltas(self) -> dict:
        means = self.means
        return {a: means[a] - means[self.reference] for a in means if a != self.reference}


def run_ablation_suite(spec: ModelSpec, train_set: Dataset, test_set: Dataset, cfg: TrainConfig,
                       seeds=None, arms=ARMS, cache: ScatteringCache | None = None,
                       log=None) -> ComparisonReport:
    """Train and evaluate each arm for each seed under the same config."""
    if not spec.hybrid:
        raise ConfigError("the ablation suite needs a hybrid model spec")
    cache = cache if cache is not None else ScatteringCache()
    seeds = [cfg.seed] if seeds is None else list(seeds)
    rows, reports = [], {}
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed, ablation="none")
        for arm in arms:
            _, rep = train_and_evaluate(spec, train_set, test_set, run_cfg, arm, cache)
            rows.append((arm, seed, rep.map))
            reports[(arm, seed)] = rep
            if log:
                log(f"{arm} seed={seed} mAP={rep.map:.4f}")
    return ComparisonReport(rows, "hybrid", reports)


def run_subsample_sweep(spec: ModelSpec, train_set: Dataset, test_set: Dataset, cfg: TrainConfig,
                        fractions=SWEEP_FRACTIONS, arms=SWEEP_ARMS, cache: ScatteringCache | None = None,
                        log=None) -> ComparisonReport:
    """Each arm at each training-set fraction; arm labels read ``arm@fraction``."""
    cache = cache if cache is not None else ScatteringCache()
    rows, reports = [], {}
    for fraction in fractions:
        run_cfg = replace(cfg, subsample_fraction=fraction, ablation="none")
        for arm in arms:
            _, rep = train_and_evaluate(spec, train_set, test_set, run_cfg, arm, cache)
            label = f"{arm}@{fraction:g}"
            rows.append((label, cfg.seed, rep.map))
            reports[label] = rep
            if log:
                log(f"{label} n={rep.n_train} mAP={rep.map:.4f}")
    return ComparisonReport(rows, f"hybrid@{fractions[0]:g}", reports)


# --- CSV output ------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_per_class_ap(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "ap"])
        for k, ap in enumerate(report.per_class_ap):
            w.writerow([k, _fmt(ap)])


def write_summary(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "lr", "seconds"])
        for e, (loss, lr, sec) in enumerate(zip(report.train_loss, report.lr, report.seconds)):
            w.writerow([e, _fmt(loss), _fmt(lr), _fmt(sec)])


def write_final(path, rows) -> None:
    """``rows`` are ``(arm, map)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "map"])
        for arm, m in rows:
            w.writerow([arm, _fmt(m)])


def read_final(path) -> list:
    with open(path, newline="") as fh:
        return [(r["arm"], float(r["map"])) for r in csv.DictReader(fh)]


def write_report(directory, report: MetricsReport) -> None:
    directory = Path(directory)
    write_per_class_ap(directory / "per_class_ap.csv", report)
    write_summary(directory / "summary.csv", report)
    write_final(directory / "final.csv", [(report.arm, report.map)])
