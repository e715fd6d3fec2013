"""Fusion, frame classification, total training loss, and video verdicts.

The disentangled components of the active branches are concatenated in
the fixed order [LS shared; LS disentangled; MG shared; MG disentangled;
CE shared; CE disentangled] and classified by one affine layer + sigmoid.
Per-frame predictions act as votes; a video's decision is the majority
(ties resolve to fake by default) and its score is the mean frame
confidence.  Everything here is pure, so videos may be scored in
parallel.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from cbodd import tensor as t
from cbodd.encoders import BRANCH_IDS
from cbodd.errors import (
    CompletenessError,
    ConfigError,
    DimensionError,
    InputError,
    LabelError,
)
from cbodd.ofdm import DisentangledPair
from cbodd.tensor import DiffArray

PROB_FLOOR = 1e-12
TIE_RULES = ("fake", "real")


@dataclass
class FrameVerdict:
    """Single-frame fake probability and thresholded label."""

    probability: float
    label: str
    frame_index: int = 0

    def __post_init__(self):
        if not 0.0 < self.probability < 1.0:
            raise InputError(f"frame probability must lie in (0, 1), got {self.probability}")


@dataclass
class VideoVerdict:
    """Vote counts, majority decision, and averaged confidence for one clip."""

    clip_id: str
    fake_votes: int
    real_votes: int
    decision: str
    mean_confidence: float


@dataclass
class LossBreakdown:
    """Scalar loss terms; total = l_cls + lb * branch + lc * cross exactly."""

    l_cls: float
    l_branch_ortho: float
    l_cross_ortho: float
    lambda_branch: float
    lambda_cross: float
    total: float


def fuse(
    pairs: Mapping[str, DisentangledPair],
    expected_branches: Sequence[str] = BRANCH_IDS,
) -> DiffArray:
    """Concatenate shared then disentangled components per branch, LS/MG/CE order."""
    blocks = []
    for branch_id in BRANCH_IDS:
        if branch_id not in expected_branches:
            continue
        if branch_id not in pairs:
            raise CompletenessError(f"branch {branch_id} missing from fusion input")
        pair = pairs[branch_id]
        blocks.append(pair.shared)
        blocks.append(pair.disentangled)
    if not blocks:
        raise CompletenessError("no branches supplied to fuse")
    return t.concat(blocks, axis=-1)


def fused_dim(shared_dim: int, disentangled_dim: int, n_branches: int = 3) -> int:
    """Fused feature length: one (d_s + d_d) block per active branch."""
    return n_branches * (shared_dim + disentangled_dim)


class FrameClassifier:
    """Single affine layer + sigmoid over the fused feature."""

    def __init__(self, in_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.params: OrderedDict[str, DiffArray] = OrderedDict()
        self.params["classifier/w"] = t.uniform_init((in_dim, 1), in_dim, rng)
        self.params["classifier/b"] = t.uniform_init((1,), in_dim, rng)

    def probabilities(self, fused: DiffArray) -> DiffArray:
        """(B, F) fused features -> (B,) fake probabilities in (0, 1)."""
        if fused.shape[-1] != self.in_dim:
            raise DimensionError(
                f"fused feature dim {fused.shape[-1]} does not match classifier "
                f"input dim {self.in_dim}"
            )
        logits = t.add(t.matmul(fused, self.params["classifier/w"]), self.params["classifier/b"])
        return t.reshape(t.sigmoid(logits), (fused.shape[0],))


def classify_frame(
    fused: DiffArray,
    classifier: FrameClassifier,
    frame_index: int = 0,
    threshold: float = 0.5,
) -> FrameVerdict:
    """Score one fused feature vector; label is fake iff probability > threshold."""
    row = t.reshape(fused, (1, -1))
    prob = float(classifier.probabilities(row).values[0])
    return FrameVerdict(
        probability=prob,
        label="fake" if prob > threshold else "real",
        frame_index=frame_index,
    )


def binary_cross_entropy(probs: DiffArray, labels: np.ndarray) -> DiffArray:
    """Mean BCE with probabilities clamped at 1e-12 before the log."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != tuple(probs.shape):
        raise DimensionError(
            f"labels shape {labels.shape} does not match probabilities {probs.shape}"
        )
    if not np.isin(labels, (0.0, 1.0)).all():
        raise LabelError("labels must be 0 or 1")
    y = DiffArray(labels)
    pos = t.multiply(y, t.log(t.clamp_min(probs, PROB_FLOOR)))
    neg = t.multiply(
        DiffArray(1.0 - labels),
        t.log(t.clamp_min(t.add_scalar(t.scale(probs, -1.0), 1.0), PROB_FLOOR)),
    )
    return t.scale(t.mean(t.add(pos, neg)), -1.0)


def total_loss(
    probs: DiffArray,
    labels: np.ndarray,
    branch_ortho: DiffArray,
    cross_ortho: DiffArray,
    lambda_branch: float,
    lambda_cross: float,
) -> tuple[DiffArray, LossBreakdown]:
    """Combined objective: BCE + weighted orthogonality penalties."""
    if lambda_branch < 0 or lambda_cross < 0:
        raise ConfigError("loss weights must be non-negative")
    l_cls = binary_cross_entropy(probs, labels)
    total = t.add(
        l_cls,
        t.add(t.scale(branch_ortho, lambda_branch), t.scale(cross_ortho, lambda_cross)),
    )
    breakdown = LossBreakdown(
        l_cls=l_cls.item(),
        l_branch_ortho=branch_ortho.item(),
        l_cross_ortho=cross_ortho.item(),
        lambda_branch=lambda_branch,
        lambda_cross=lambda_cross,
        total=l_cls.item()
        + lambda_branch * branch_ortho.item()
        + lambda_cross * cross_ortho.item(),
    )
    return total, breakdown


def video_verdict(
    verdicts: Iterable[FrameVerdict],
    clip_id: str = "",
    threshold: float = 0.5,
    tie_rule: str = "fake",
) -> VideoVerdict:
    """Majority vote over frame verdicts with averaged confidence.

    The result is invariant to frame order; raising any frame probability
    never lowers the mean confidence.
    """
    if tie_rule not in TIE_RULES:
        raise ConfigError(f"tie rule must be one of {TIE_RULES}, got {tie_rule!r}")
    frames = list(verdicts)
    if not frames:
        raise InputError("video verdict requires at least one frame")
    probs = [v.probability for v in frames]
    fake_votes = sum(1 for p in probs if p > threshold)
    real_votes = len(frames) - fake_votes
    if fake_votes > real_votes:
        decision = "fake"
    elif fake_votes < real_votes:
        decision = "real"
    else:
        decision = tie_rule
    return VideoVerdict(
        clip_id=clip_id,
        fake_votes=fake_votes,
        real_votes=real_votes,
        decision=decision,
        mean_confidence=float(np.mean(probs)),
    )
