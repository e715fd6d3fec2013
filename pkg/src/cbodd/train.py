"""Training loop producing the per-epoch loss trace.

Single-threaded and deterministic: the frame order permutation, parameter
init, and every reduction derive from the run seed, so two runs with the
same config produce byte-identical checkpoints and traces.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from cbodd import tensor as t
from cbodd.config import RunConfig, variant_spec
from cbodd.datagen import Corpus
from cbodd.detector import total_loss
from cbodd.encoders import center_crop
from cbodd.errors import BatchError, NumericError
from cbodd.model import DetectorModel
from cbodd.ofdm import branch_ortho_loss, cross_ortho_loss
from cbodd.optim import Adam
from cbodd.tensor import DiffArray


@dataclass
class TraceRow:
    """Epoch-mean loss components (the optimized aux term is reported separately)."""

    epoch: int
    l_cls: float
    l_branch_ortho: float
    l_cross_ortho: float
    total: float


@dataclass
class TrainResult:
    model: DetectorModel
    trace: list[TraceRow]
    train_clip_ids: list[str]


def collect_frames(
    corpus: Corpus, clip_ids: list[str], frame_size: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack pixels, fake labels and expression values over the given clips.

    Oversized frames are center-cropped to ``frame_size`` when given.
    """
    pixel_blocks, labels, expressions = [], [], []
    for clip_id in clip_ids:
        clip = corpus.clip(clip_id)
        stack = clip.pixel_stack()
        if frame_size is not None and stack.shape[-1] != frame_size:
            stack = center_crop(stack, frame_size)
        pixel_blocks.append(stack)
        labels.append(np.full(clip.n_frames, 1.0 if clip.label == "fake" else 0.0))
        expressions.append(np.asarray(clip.expression, dtype=np.float64))
    if not pixel_blocks:
        raise BatchError("no clips to train on")
    return (
        np.concatenate(pixel_blocks),
        np.concatenate(labels),
        np.concatenate(expressions),
    )


def train_model(
    cfg: RunConfig,
    corpus: Corpus,
    train_clip_ids: list[str] | None = None,
    checkpoint_sink: Callable[[DetectorModel, int], None] | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train a fresh model on the given clips of ``corpus``.

    ``checkpoint_sink`` is invoked after initialization and after every
    completed epoch, so a later numeric failure always leaves the last
    good state behind.  Raises :class:`NumericError` when a loss stops
    being finite.
    """
    cfg.validate()
    spec = variant_spec(cfg.variant)
    clip_ids = list(train_clip_ids) if train_clip_ids is not None else corpus.clip_ids
    pixels, labels, expressions = collect_frames(corpus, clip_ids, cfg.frame_size)

    model = DetectorModel(cfg)
    params = model.parameters()
    optimizer = Adam(
        params,
        learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        step_size=cfg.step_size,
        decay_factor=cfg.decay_factor,
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5F1E)))
    lambda_branch = cfg.lambda_branch if spec.branch_penalty else 0.0
    lambda_cross = cfg.lambda_cross if spec.cross_penalty else 0.0
    use_expression = "CE" in spec.branches and cfg.expression_weight > 0.0

    if checkpoint_sink is not None:
        checkpoint_sink(model, 0)

    n_frames = pixels.shape[0]
    trace: list[TraceRow] = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n_frames)
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, n_frames, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            batch_pixels = pixels[batch_idx]
            batch_labels = labels[batch_idx]
            result = model.forward_batch(batch_pixels, with_expression=use_expression)
            batch_size = len(batch_idx)
            # a zero weight disables the penalty entirely (zero trace column)
            if lambda_branch > 0.0:
                l_branch = branch_ortho_loss(
                    result.pairs, batch_size, center=cfg.center_features
                )
            else:
                l_branch = DiffArray(0.0)
            if lambda_cross > 0.0:
                l_cross = cross_ortho_loss(
                    result.pairs,
                    batch_size,
                    center=cfg.center_features,
                    per_sample=cfg.cross_mode == "per-sample",
                )
            else:
                l_cross = DiffArray(0.0)
            loss, breakdown = total_loss(
                result.probabilities,
                batch_labels,
                l_branch,
                l_cross,
                lambda_branch,
                lambda_cross,
            )
            objective = loss
            if use_expression:
                residual = result.expression - DiffArray(expressions[batch_idx])
                aux = t.mean(t.multiply(residual, residual))
                objective = t.add(objective, t.scale(aux, cfg.expression_weight))
            if not np.isfinite(objective.item()):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} (total={objective.item()})"
                )
            optimizer.zero_grad()
            objective.backward()
            optimizer.step()
            sums += (
                breakdown.l_cls,
                breakdown.l_branch_ortho,
                breakdown.l_cross_ortho,
                breakdown.total,
            )
            n_batches += 1
        optimizer.end_epoch()
        means = sums / n_batches
        row = TraceRow(epoch, float(means[0]), float(means[1]), float(means[2]), float(means[3]))
        trace.append(row)
        if log is not None:
            log(
                f"epoch {epoch:3d}  l_cls={row.l_cls:.4f}  "
                f"branch={row.l_branch_ortho:.4f}  cross={row.l_cross_ortho:.4f}  "
                f"total={row.total:.4f}"
            )
        if checkpoint_sink is not None:
            checkpoint_sink(model, epoch)
    return TrainResult(model=model, trace=trace, train_clip_ids=clip_ids)


def write_trace(path: str | Path, trace: list[TraceRow], digest: str) -> None:
    """Write the loss trace CSV, embedding the config digest as a comment."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# digest={digest}\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_cls", "l_branch_ortho", "l_cross_ortho", "total"])
        for row in trace:
            writer.writerow(
                [
                    row.epoch,
                    repr(row.l_cls),
                    repr(row.l_branch_ortho),
                    repr(row.l_cross_ortho),
                    repr(row.total),
                ]
            )


def read_trace(path: str | Path) -> list[TraceRow]:
    rows = []
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        reader = csv.DictReader(fh)
        for record in reader:
            rows.append(
                TraceRow(
                    epoch=int(record["epoch"]),
                    l_cls=float(record["l_cls"]),
                    l_branch_ortho=float(record["l_branch_ortho"]),
                    l_cross_ortho=float(record["l_cross_ortho"]),
                    total=float(record["total"]),
                )
            )
    return rows
