"""Experiment orchestration: training runs, evaluations, sweeps, comparisons.

Every run is a pure function of (config, seed): model init, batch order,
augmentation, and masking all draw from purpose-tagged substreams of one
master stream, so reruns produce byte-identical checkpoints and CSVs.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np
import torch

from .attack import AttackReport, embed, transfer_evaluate
from .config import ExperimentConfig, SweepSpec, parse_method
from .data import AugmentConfig, Dataset, Split, make_batches, normalize
from .errors import ConfigError, DataError
from .imgio import normalize_to_u8, render_line_plot, write_pgm
from .masking import lfm_apply, write_decision_log
from .metrics import EVAL_CSV_HEADER, EvalReport, evaluate_embeddings
from .nn import (
    MiniResNet,
    OptState,
    build_model,
    loss_and_backward,
    model_forward,
    sgd_step,
    stem_features,
)
from .rng import RngStream

_THREADS_PINNED = False


def pin_threads() -> None:
    """Single-thread torch so repeated runs are bit-identical on any host."""
    global _THREADS_PINNED
    if not _THREADS_PINNED:
        torch.set_num_threads(1)
        _THREADS_PINNED = True


@contextmanager
def output_lock(out_dir):
    """One experiment process at a time per output directory."""
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock_path} if stale)"
        ) from None
    try:
        yield
    finally:
        os.close(fd)
        os.unlink(lock_path)


@dataclass
class TrainResult:
    model: MiniResNet
    log_rows: list  # (epoch, mean loss, train accuracy, seed)
    seed: int


def train_model(
    cfg: ExperimentConfig, dataset: Dataset, split: Split, seed: int | None = None
) -> TrainResult:
    """Train one model per the config's flags; returns the model and epoch log."""
    pin_threads()
    if seed is None:
        seed = cfg.run.seed
    label_map = {tid: i for i, tid in enumerate(split.train_ids)}
    model_cfg = cfg.model_config(num_classes=len(split.train_ids))
    root = RngStream(seed)
    model = build_model(model_cfg, root.child("init"))
    opt = OptState(
        lr=cfg.train.lr,
        momentum=cfg.train.momentum,
        weight_decay=cfg.train.weight_decay,
        decay_epochs=tuple(cfg.train.lr_decay_epochs),
        decay_gamma=cfg.train.lr_decay_gamma,
    )
    augment = AugmentConfig(
        flip=cfg.train.flip,
        pad_crop=cfg.train.pad_crop,
        cutout=cfg.train.cutout,
        cutout_side=cfg.train.cutout_side,
        cutout_fill=cfg.train.cutout_fill,
    )
    log_rows = []
    for epoch in range(cfg.train.epochs):
        total_loss = 0.0
        hits = 0
        seen = 0
        batches = make_batches(
            dataset,
            split.train_indices,
            cfg.train.batch_size,
            root.child("batches", epoch),
            augment=augment,
            label_map=label_map,
        )
        for step, (images, labels) in enumerate(batches):
            logits, _, _ = model_forward(
                model, images, "train", root.child("step", epoch, step)
            )
            loss = loss_and_backward(logits, labels, cfg.train.label_smoothing)
            sgd_step(model, opt, epoch)
            total_loss += loss * len(labels)
            hits += int((logits.detach().argmax(dim=1).numpy() == labels).sum())
            seen += len(labels)
        log_rows.append((epoch, total_loss / seen, hits / seen, seed))
    return TrainResult(model=model, log_rows=log_rows, seed=seed)


def evaluate_model(
    cfg: ExperimentConfig, model: MiniResNet, dataset: Dataset, split: Split,
    *, exclude_same_camera: bool = True,
) -> EvalReport:
    pin_threads()
    query = normalize(dataset.images[split.query_indices])
    gallery = normalize(dataset.images[split.gallery_indices])
    return evaluate_embeddings(
        embed(model, query),
        dataset.identities[split.query_indices],
        dataset.cameras[split.query_indices],
        embed(model, gallery),
        dataset.identities[split.gallery_indices],
        dataset.cameras[split.gallery_indices],
        distance=cfg.eval.distance,
        exclude_same_camera=exclude_same_camera,
    )


def run_transfer_attack(
    cfg: ExperimentConfig,
    target: MiniResNet,
    surrogate: MiniResNet,
    dataset: Dataset,
    split: Split,
    *,
    kind: str = "pgd",
) -> AttackReport:
    pin_threads()
    return transfer_evaluate(
        target,
        surrogate,
        normalize(dataset.images[split.query_indices]),
        dataset.identities[split.query_indices],
        dataset.cameras[split.query_indices],
        normalize(dataset.images[split.gallery_indices]),
        dataset.identities[split.gallery_indices],
        dataset.cameras[split.gallery_indices],
        cfg.attack,
        kind=kind,
        distance=cfg.eval.distance,
    )


def apply_method(cfg: ExperimentConfig, method: str) -> ExperimentConfig:
    """Turn a comparison method name into the corresponding config flags."""
    flags = parse_method(method)
    model = replace(
        cfg.model,
        lfm=flags["lfm"],
        dropout=cfg.compare.dropout_rate if flags["dropout"] else 0.0,
    )
    train = replace(cfg.train, cutout=flags["cutout"])
    return replace(cfg, model=model, train=train)


def write_train_log(path, rows) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,train_loss,train_acc,seed\n")
        for epoch, loss, acc, seed in rows:
            fh.write(f"{epoch},{loss:.4f},{acc:.4f},{seed}\n")


def write_eval_csv(path, labeled_reports) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(EVAL_CSV_HEADER + "\n")
        for method, report in labeled_reports:
            fh.write(report.csv_row(method) + "\n")


def run_sweep(
    cfg: ExperimentConfig, spec: SweepSpec, dataset: Dataset, split: Split
) -> list[tuple]:
    """Train+eval each (value, seed) cell; rows are (param, value, seed, rank1, map)."""
    spec.validate()
    rows = []
    for raw_value in spec.values:
        cell_cfg = cfg.with_value(spec.param, str(raw_value))
        cell_cfg.validate()
        for s in range(spec.seeds):
            seed = cfg.run.seed + s
            result = train_model(cell_cfg, dataset, split, seed=seed)
            report = evaluate_model(cell_cfg, result.model, dataset, split)
            rows.append((spec.param, str(raw_value), seed, report.rank1, report.map))
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("param,value,seed,rank1,map\n")
        for param, value, seed, rank1, mean_ap in rows:
            fh.write(f"{param},{value},{seed},{rank1:.4f},{mean_ap:.4f}\n")


def plot_sweep(path, rows) -> None:
    values = []
    for _, value, _, _, _ in rows:
        if value not in values:
            values.append(value)
    xs = []
    for v in values:
        try:
            xs.append(float(v))
        except ValueError:
            xs.append(float(len(xs)))
    rank1_series = []
    map_series = []
    for v in values:
        cell = [(r, m) for _, val, _, r, m in rows if val == v]
        rank1_series.append(float(np.median([r for r, _ in cell])))
        map_series.append(float(np.median([m for _, m in cell])))
    render_line_plot(path, xs, {"rank1": rank1_series, "map": map_series})


def run_compare(cfg: ExperimentConfig, dataset: Dataset, split: Split) -> list[tuple]:
    """One train+eval per configured method combination; rows mirror the
    comparison-table structure."""
    out = []
    for method in cfg.compare.methods:
        method_cfg = apply_method(cfg, method)
        result = train_model(method_cfg, dataset, split)
        report = evaluate_model(method_cfg, result.model, dataset, split)
        out.append((method, report))
    return out


def viz_masks(
    cfg: ExperimentConfig,
    model: MiniResNet,
    dataset: Dataset,
    sample_index: int,
    out_dir,
) -> list:
    """Write per-channel before/after PGM images plus the decision log.

    Emits 2*C images and one log file for the stem feature map of one sample.
    """
    pin_threads()
    if not 0 <= sample_index < len(dataset):
        raise ConfigError(
            f"sample index {sample_index} out of range [0, {len(dataset)})"
        )
    images = normalize(dataset.images[sample_index : sample_index + 1])
    features = stem_features(model, images).astype(np.float64)
    masked, decisions = lfm_apply(
        features, cfg.lfm, RngStream(cfg.run.seed, ("viz", sample_index)), training=True
    )
    os.makedirs(out_dir, exist_ok=True)
    written = []
    channels = features.shape[1]
    for c in range(channels):
        before_path = os.path.join(out_dir, f"before_c{c:02d}.pgm")
        after_path = os.path.join(out_dir, f"after_c{c:02d}.pgm")
        write_pgm(before_path, normalize_to_u8(features[0, c]))
        write_pgm(after_path, normalize_to_u8(masked[0, c]))
        written.extend([before_path, after_path])
    log_path = os.path.join(out_dir, "decisions.log")
    write_decision_log(log_path, decisions)
    written.append(log_path)
    return written
