"""Protocol runner: within/cross-domain evaluation and the ablation grid.

Within-domain: train and test clips come from the same domain and must be
disjoint.  Cross-domain: training and test domains must not overlap, so a
model is judged on a manipulation family it never saw.  Clip access runs
through the corpus access log, which the runner audits for leakage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cbodd.config import RunConfig, variant_spec
from cbodd.datagen import Corpus
from cbodd.detector import FrameVerdict, video_verdict
from cbodd.encoders import center_crop
from cbodd.errors import ConfigError, LeakageError
from cbodd.metrics import auc
from cbodd.model import DetectorModel
from cbodd.train import TrainResult, train_model

PROTOCOLS = ("within", "cross")


@dataclass
class PerVideoResult:
    clip_id: str
    decision: str
    mean_confidence: float


@dataclass
class EvalReport:
    """Evaluation outcome for one protocol run."""

    protocol: str
    frame_auc: float
    video_auc: float
    variant: str
    seed: int
    config_digest: str
    per_video: list[PerVideoResult] = field(default_factory=list)
    per_variant: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "protocol": self.protocol,
            "frame_auc": self.frame_auc,
            "video_auc": self.video_auc,
            "variant": self.variant,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "per_video": [
                {
                    "clip_id": v.clip_id,
                    "decision": v.decision,
                    "mean_confidence": v.mean_confidence,
                }
                for v in self.per_video
            ],
        }
        if self.per_variant:
            payload["per_variant"] = self.per_variant
        return json.dumps(payload, indent=2)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def split_corpus(
    corpus: Corpus, fraction: float, seed: int
) -> tuple[list[str], list[str]]:
    """Seed-stable shuffled split of clip ids into (train, test)."""
    ids = sorted(corpus.clip_ids)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x59117)))
    order = rng.permutation(len(ids))
    cut = int(round(len(ids) * fraction))
    if cut < 1 or cut >= len(ids):
        raise ConfigError(
            f"split fraction {fraction} leaves an empty side for {len(ids)} clips"
        )
    train = [ids[i] for i in order[:cut]]
    test = [ids[i] for i in order[cut:]]
    return train, test


def score_clips(
    model: DetectorModel, corpus: Corpus, clip_ids: list[str]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, list[PerVideoResult]]:
    """Frame scores/labels and video scores/labels over the given clips."""
    cfg = model.cfg
    frame_scores, frame_labels = [], []
    video_scores, video_labels = [], []
    per_video = []
    for clip_id in clip_ids:
        clip = corpus.clip(clip_id)
        pixels = clip.pixel_stack()[:: cfg.eval_frame_stride]
        if pixels.shape[-1] != cfg.frame_size:
            pixels = center_crop(pixels, cfg.frame_size)
        probs = model.frame_probabilities(pixels)
        label = 1 if clip.label == "fake" else 0
        frame_scores.extend(probs.tolist())
        frame_labels.extend([label] * len(probs))
        verdicts = [
            FrameVerdict(
                probability=float(p),
                label="fake" if p > cfg.threshold else "real",
                frame_index=i,
            )
            for i, p in enumerate(probs)
        ]
        verdict = video_verdict(
            verdicts, clip_id=clip_id, threshold=cfg.threshold, tie_rule=cfg.tie_rule
        )
        if cfg.video_score == "vote_fraction":
            video_scores.append(verdict.fake_votes / (verdict.fake_votes + verdict.real_votes))
        else:
            video_scores.append(verdict.mean_confidence)
        video_labels.append(label)
        per_video.append(
            PerVideoResult(
                clip_id=clip_id,
                decision=verdict.decision,
                mean_confidence=verdict.mean_confidence,
            )
        )
    return (
        np.asarray(frame_scores),
        np.asarray(frame_labels),
        np.asarray(video_scores),
        np.asarray(video_labels),
        per_video,
    )


def _validate_protocol(protocol: str, train: Corpus, test: Corpus) -> None:
    if protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    overlap = set(train.clip_ids) & set(test.clip_ids)
    if overlap:
        raise LeakageError(
            f"{len(overlap)} clip ids appear in both train and test "
            f"(e.g. {sorted(overlap)[:3]})"
        )
    if protocol == "within":
        if train.domains() != test.domains():
            raise ConfigError(
                f"within protocol needs matching domains, got train={train.domains()} "
                f"test={test.domains()}"
            )
    else:
        if train.domains() & test.domains():
            raise ConfigError(
                f"cross protocol needs disjoint domains, got train={train.domains()} "
                f"test={test.domains()}"
            )


def run_protocol(
    protocol: str,
    model: DetectorModel | RunConfig,
    corpora: dict[str, Corpus],
) -> EvalReport:
    """Train (if given a config) and evaluate under the named protocol.

    ``corpora`` maps ``train`` and ``test`` to corpora; audit of the access
    logs guarantees training never touched a test clip.
    """
    if set(corpora) != {"train", "test"}:
        raise ConfigError(f"corpora must provide 'train' and 'test', got {sorted(corpora)}")
    train_corpus, test_corpus = corpora["train"], corpora["test"]
    _validate_protocol(protocol, train_corpus, test_corpus)

    test_corpus.reset_log()
    if isinstance(model, RunConfig):
        result: TrainResult = train_model(model, train_corpus)
        trained = result.model
    else:
        trained = model
    touched = set(test_corpus.access_log)
    if touched:
        raise LeakageError(f"training touched test clips: {sorted(touched)[:3]}")

    frame_scores, frame_labels, video_scores, video_labels, per_video = score_clips(
        trained, test_corpus, test_corpus.clip_ids
    )
    return EvalReport(
        protocol=protocol,
        frame_auc=auc(frame_scores, frame_labels),
        video_auc=auc(video_scores, video_labels),
        variant=trained.cfg.variant,
        seed=trained.cfg.seed,
        config_digest=trained.cfg.digest,
        per_video=per_video,
    )


def run_ablation(
    variant_id: str,
    corpora: dict[str, Corpus],
    protocol: str = "cross",
    base_cfg: RunConfig | None = None,
) -> EvalReport:
    """Train and evaluate one ablation variant under an identical budget."""
    variant_spec(variant_id)  # validate before any work
    cfg = base_cfg if base_cfg is not None else RunConfig()
    from dataclasses import replace

    cfg = replace(cfg, variant=variant_id)
    report = run_protocol(protocol, cfg, corpora)
    report.per_variant = {
        variant_id: {"frame_auc": report.frame_auc, "video_auc": report.video_auc}
    }
    return report
