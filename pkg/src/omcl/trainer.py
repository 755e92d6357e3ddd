"""Training, evaluation, sweeps and embedding export."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import data as D
from .metrics import EvalReport, aggregate_trials, evaluate_scores
from .model import (
    DESCRIPTOR_MODES,
    SCORING_MODES,
    BackboneSpec,
    NumericalError,
    OSRModel,
    load_checkpoint,
    omcl_loss,
    sample_descriptors,
    save_checkpoint,
)

log = logging.getLogger(__name__)

SWEEP_AXES = ("t", "m", "lam", "M", "s0", "scale-mode")


@dataclass
class TrainConfig:
    dataset: str = "synthetic"          # directory / .npz path, or "synthetic"
    split_file: str = ""
    trial: str = "all"                  # "all" or a trial index
    backbone: str = "small-cnn"
    widths: tuple[int, ...] = (32, 64)
    d: int = 128
    batch_size: int = 64
    epochs: int = 200
    lr: float = 1e-3
    scale_lr_mult: float = 0.1
    s0: float = 16.0
    m: float = -0.1
    t: float = 0.1
    lam: float = 0.5
    descriptors: int | None = None      # per batch; None means one per training sample
    descriptor_mode: str = "cube-project"
    scoring: str = "threshold-channel"
    seed: int = 2023
    enable_mlas: bool = True
    enable_oss: bool = True
    freeze_scale: bool = False
    augment: bool = True
    # synthetic task
    n_classes: int = 8
    per_class: int = 500

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.descriptor_mode not in DESCRIPTOR_MODES:
            raise ValueError(f"descriptor_mode must be one of {DESCRIPTOR_MODES}")
        if self.scoring not in SCORING_MODES:
            raise ValueError(f"scoring must be one of {SCORING_MODES}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size, epochs and lr must be positive")
        if self.descriptors is not None and self.descriptors < 0:
            raise ValueError("descriptors must be >= 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["widths"] = list(self.widths)
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def baseline(cls, **kw) -> "TrainConfig":
        """Plain cosine-softmax configuration (no margin/threshold, no descriptors).

        Scored with the C-way softmax since the head never saw a threshold logit.
        """
        kw.setdefault("scoring", "plain")
        return cls(enable_mlas=False, enable_oss=False, **kw)


def load_config(path) -> TrainConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        import tomli
        values = tomli.loads(text)
    else:
        values = json.loads(text)
    return TrainConfig.from_dict(values)


@dataclass
class RunRecord:
    epochs: list[dict] = field(default_factory=list)
    s_trace: list[float] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    report: EvalReport | None = None


# ---------------------------------------------------------------------------
# data


def load_parts(config: TrainConfig) -> dict[str, D.ImageDataset]:
    if config.dataset == "synthetic":
        return {part: D.gaussian_mixture(config.n_classes, config.per_class, config.seed, split=part)
                for part in ("train", "test")}
    return D.load_dataset(config.dataset)


def load_splits(config: TrainConfig, n_classes: int) -> list[D.OpenSetSplit]:
    if config.split_file:
        return D.read_split_file(config.split_file)[1]
    return D.make_splits(n_classes, 1, config.seed)


def selected_splits(config: TrainConfig, splits):
    if config.trial == "all":
        return list(splits)
    k = int(config.trial)
    chosen = [s for s in splits if s.k == k]
    if not chosen:
        raise D.DataError(f"no trial {k} in split file")
    return chosen


def _is_image(x: np.ndarray) -> bool:
    return x.ndim == 4


def _backbone_spec(config: TrainConfig, x: np.ndarray) -> BackboneSpec:
    return BackboneSpec(config.backbone, x.shape[1:], config.widths, config.d)


# ---------------------------------------------------------------------------
# training


def train_trial(config: TrainConfig, trial: D.TrialData, checkpoint: str | Path | None = None,
                on_epoch: Callable[[dict], None] | None = None) -> tuple[RunRecord, OSRModel]:
    """Train one model on the known classes of ``trial``.

    Backbone and class directions update at ``lr``, the scale at
    ``lr * scale_lr_mult`` (it is left untouched when ``freeze_scale``).
    """
    k = trial.split.k
    seed = config.seed
    C = trial.split.n_known
    model = OSRModel.create(_backbone_spec(config, trial.x_train), C, D.stream(seed, "init", k),
                            s0=config.s0, m=config.m, t=config.t, lam=config.lam)
    head = model.head
    groups = [(list(model.backbone.params.values()) + [head.W], 1.0)]
    if not config.freeze_scale:
        groups.append(([head.s], config.scale_lr_mult))
    opt = ad.Adam(groups, lr=config.lr)
    augmenting = config.augment and _is_image(trial.x_train)

    record = RunRecord()
    started = time.perf_counter()
    for epoch in range(config.epochs):
        aug_rng = D.stream(seed, "augment", k, epoch)
        desc_rng = D.stream(seed, "descriptors", k, epoch)
        if augmenting:
            transform = lambda x: D.augment_batch(x, aug_rng, trial.stats)  # noqa: E731
        else:
            transform = trial.stats.apply
        totals = {"loss": 0.0, "cos": 0.0, "mlas": 0.0, "oss": 0.0}
        n_batches = 0
        for b, batch in enumerate(D.iterate_batches(trial.x_train, trial.y_train, config.batch_size,
                                                    D.stream(seed, "shuffle", k, epoch), transform)):
            z = model.embed(batch.images)
            descriptors = None
            if config.enable_oss:
                count = len(batch.labels) if config.descriptors is None else config.descriptors
                descriptors = sample_descriptors(count, config.d, head.scale, desc_rng,
                                                 config.descriptor_mode, label=C)
            try:
                result = omcl_loss(z, batch.labels, descriptors, head,
                                   enable_mlas=config.enable_mlas, enable_oss=config.enable_oss)
            except NumericalError as exc:
                raise NumericalError(f"trial {k} epoch {epoch} batch {b}: {exc}") from None
            opt.zero_grad()
            ad.backward(result.loss)
            for p in opt.params():
                if not np.isfinite(p.grad).all():
                    raise NumericalError(f"trial {k} epoch {epoch} batch {b}: non-finite gradient in {p.name}")
            opt.step()
            head.clamp_scale()
            record.batch_losses.append(result.value)
            totals["loss"] += result.value
            for key, value in result.parts.items():
                totals[key] += value
            n_batches += 1
        entry = {"trial": k, "epoch": epoch, "s": head.scale,
                 **{key: value / max(n_batches, 1) for key, value in totals.items()}}
        record.epochs.append(entry)
        record.s_trace.append(head.scale)
        if on_epoch is not None:
            on_epoch(entry)
    record.wall_time = time.perf_counter() - started
    record.report = evaluate_model(model, trial, config)
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, metadata={
            "config": config.to_dict(), "trial": k, "known": trial.split.known,
            "stats": {"mean": trial.stats.mean.tolist(), "std": trial.stats.std.tolist()},
        })
    return record, model


def evaluate_model(model: OSRModel, trial: D.TrialData, config: TrainConfig) -> EvalReport:
    """Closed-set accuracy on known test samples; AUROC and OSCR against unknown ones."""
    if model.head.n_classes != trial.split.n_known:
        raise D.DataError(f"model has {model.head.n_classes} classes, trial {trial.split.k} "
                          f"has {trial.split.n_known}")
    pred, known_scores = model.predict(trial.stats.apply(trial.x_known), config.scoring)
    _, unknown_scores = model.predict(trial.stats.apply(trial.x_unknown), config.scoring)
    return evaluate_scores(pred, trial.y_known, known_scores, unknown_scores,
                           trial=trial.split.k, config_digest=config.digest(),
                           meta={"checkpoint": "final-epoch", "scoring": config.scoring})


def evaluate_checkpoint(path, trial: D.TrialData, config: TrainConfig | None = None) -> EvalReport:
    model, header = load_checkpoint(path)
    config = config or TrainConfig.from_dict(_tupled(header["metadata"]["config"]))
    return evaluate_model(model, trial, config)


def _tupled(values: dict) -> dict:
    return {k: tuple(v) if k == "widths" else v for k, v in values.items()}


def run_trials(config: TrainConfig, parts=None, splits=None, out_dir=None,
               on_epoch=None) -> list[tuple[RunRecord, EvalReport]]:
    parts = parts or load_parts(config)
    splits = splits or load_splits(config, parts["train"].n_classes)
    results = []
    for split in selected_splits(config, splits):
        trial = D.select_trial(parts["train"], parts["test"], split)
        ckpt = None if out_dir is None else Path(out_dir) / f"trial{split.k}.omcl"
        record, _ = train_trial(config, trial, ckpt, on_epoch)
        results.append((record, record.report))
    return results


# ---------------------------------------------------------------------------
# sweeps


def _apply_axis(config: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "M":
        count = int(value)
        return replace(config, descriptors=count, enable_oss=config.enable_oss and count > 0)
    if axis == "scale-mode":
        if value not in ("adaptive", "fixed"):
            raise ValueError("scale-mode values are 'adaptive' or 'fixed'")
        return replace(config, freeze_scale=value == "fixed")
    if axis in ("t", "m", "lam", "s0"):
        return replace(config, **{axis: float(value)})
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def _sweep_point(args):
    config, seeds = args
    reports = []
    for seed in seeds:
        cfg = replace(config, seed=seed) if seed is not None else config
        reports.extend(r for _, r in run_trials(cfg))
    for r in reports:
        r.config_digest = config.digest()
    return aggregate_trials(reports)


def sweep(config: TrainConfig, axis: str, values, seeds=(None,), jobs: int = 1) -> list[dict]:
    """One aggregated row (mean over trials and seeds) per value of ``axis``."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    points = [(_apply_axis(config, axis, v), list(seeds)) for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_sweep_point, points))
    else:
        summaries = [_sweep_point(p) for p in points]
    return [{"value": v, "acc": s.mean["acc_c"], "auroc": s.mean["auroc_o"], "oscr": s.mean["oscr_o"]}
            for v, s in zip(values, summaries)]


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["value", "acc", "auroc", "oscr"], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] if k == "value" else repr(float(row[k])) for k in writer.fieldnames})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# embedding export


def export_embeddings(model: OSRModel, test: D.ImageDataset, split: D.OpenSetSplit,
                      stats: D.ChannelStats, cap: int = 200) -> str:
    """CSV of test embeddings, at most ``cap`` per class, no augmentation.

    Unknown-class samples carry ``UNKNOWN`` as their class.
    """
    known = set(split.known)
    chosen = []
    for c in sorted(set(split.known) | set(split.unknown)):
        chosen.extend(np.flatnonzero(test.labels == c)[:cap].tolist())
    chosen = np.array(sorted(chosen), dtype=np.int64)
    z = model.embed_numpy(stats.apply(test.images[chosen])) if len(chosen) else np.zeros((0, model.spec.d))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "true_class", *(f"z{i}" for i in range(model.spec.d))])
    for idx, row in zip(chosen, z):
        label = int(test.labels[idx])
        writer.writerow([int(idx), label if label in known else "UNKNOWN", *(repr(float(v)) for v in row)])
    return buf.getvalue()
