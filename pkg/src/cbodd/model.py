"""Assembly of the full per-frame detector.

Active branches (per the configured ablation variant) encode a frame
batch into segment grids; segment attention pools each grid to one
embedding; the projection heads split embeddings into shared and
disentangled components; fusion + the affine classifier produce fake
probabilities.  The model owns every parameter in a deterministic
creation order, so fixed seeds give identical initializations.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from cbodd import tensor as t
from cbodd.checkpoint import (
    META_PREFIX,
    decode_text,
    encode_text,
    load_checkpoint,
    save_checkpoint,
)
from cbodd.config import RunConfig, variant_spec
from cbodd.detector import FrameClassifier
from cbodd.encoders import (
    BRANCH_IDS,
    EmotionConvBranch,
    SegmentAttentionPool,
    SpatialConvBranch,
    WindowAttentionBranch,
)
from cbodd.errors import ArtifactMismatchError, DataError
from cbodd.ofdm import DisentangledPair, ProjectionHeads, project
from cbodd.tensor import DiffArray, no_grad


@dataclass
class ForwardResult:
    """Everything a training step needs from one frame batch."""

    probabilities: DiffArray  # (B,)
    pairs: dict[str, DisentangledPair]
    embeddings: dict[str, DiffArray]  # branch -> (B, D)
    expression: DiffArray | None  # (B,) CE auxiliary prediction


class DetectorModel:
    """Branches + segment pooling + projection heads + classifier."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.spec = variant_spec(cfg.variant)
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xC0DD)))

        self.branches: OrderedDict[str, object] = OrderedDict()
        self.pools: OrderedDict[str, SegmentAttentionPool] = OrderedDict()
        for branch_id in BRANCH_IDS:
            if branch_id not in self.spec.branches:
                continue
            if branch_id == "LS":
                branch = SpatialConvBranch(cfg.ls, 3, cfg.frame_size, rng)
            elif branch_id == "MG":
                branch = WindowAttentionBranch(cfg.mg, 3, cfg.frame_size, rng)
            else:
                branch = EmotionConvBranch(cfg.ce, 3, cfg.frame_size, rng)
            self.branches[branch_id] = branch
            self.pools[branch_id] = SegmentAttentionPool(
                branch_id, branch.out_channels, cfg.embed_dim, cfg.attention_heads, rng
            )
        self.heads = ProjectionHeads.create(
            cfg.embed_dim,
            cfg.shared_dim,
            cfg.disentangled_dim,
            cfg.head_sharing,
            rng,
            branches=tuple(self.branches),
        )
        self.fused_dim = len(self.branches) * (cfg.shared_dim + cfg.disentangled_dim)
        self.classifier = FrameClassifier(self.fused_dim, rng)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> OrderedDict[str, DiffArray]:
        params: OrderedDict[str, DiffArray] = OrderedDict()
        for branch in self.branches.values():
            params.update(branch.params)
        for pool in self.pools.values():
            params.update(pool.params)
        params.update(self.heads.parameters())
        params.update(self.classifier.params)
        return params

    def parameter_count_by_module(self) -> dict[str, int]:
        """Parameter totals grouped by architectural module."""
        groups: dict[str, int] = {}
        for branch_id, branch in self.branches.items():
            groups[f"branch/{branch_id}"] = sum(p.size for p in branch.params.values())
        for branch_id, pool in self.pools.items():
            groups[f"segment_pool/{branch_id}"] = sum(p.size for p in pool.params.values())
        groups["projection_heads"] = sum(
            p.size for p in self.heads.parameters().values()
        )
        groups["classifier"] = sum(p.size for p in self.classifier.params.values())
        return groups

    # -- forward ---------------------------------------------------------------

    def forward_batch(self, pixels: np.ndarray, with_expression: bool = False) -> ForwardResult:
        """Run a (B, 3, S, S) pixel batch through the whole pipeline."""
        x = DiffArray(np.asarray(pixels, dtype=np.float64))
        embeddings: dict[str, DiffArray] = {}
        for branch_id, branch in self.branches.items():
            grids = branch.forward_batch(x)
            embeddings[branch_id] = self.pools[branch_id].forward_batch(grids)
        pairs = project(embeddings, self.heads)
        blocks = []
        for branch_id in BRANCH_IDS:
            if branch_id in pairs:
                blocks.append(pairs[branch_id].shared)
                blocks.append(pairs[branch_id].disentangled)
        fused = t.concat(blocks, axis=-1)
        probabilities = self.classifier.probabilities(fused)
        expression = None
        if with_expression and "CE" in self.branches:
            expression = self.branches["CE"].expression_batch(x)
        return ForwardResult(
            probabilities=probabilities,
            pairs=pairs,
            embeddings=embeddings,
            expression=expression,
        )

    def frame_probabilities(self, pixels: np.ndarray) -> np.ndarray:
        """Inference-only fake probabilities for a pixel batch."""
        with no_grad():
            return self.forward_batch(pixels).probabilities.values.copy()

    def pair_vectors(self, pixels: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Inference-only (shared, disentangled) arrays per branch."""
        with no_grad():
            result = self.forward_batch(pixels)
            return {
                b: (p.shared.values.copy(), p.disentangled.values.copy())
                for b, p in result.pairs.items()
            }

    # -- persistence -------------------------------------------------------------

    def save(self, path, extra_meta: dict[str, str] | None = None) -> None:
        """Write parameters plus config/digest metadata as a checkpoint."""
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, param in self.parameters().items():
            arrays[name] = param.values
        text = self.cfg.to_text()
        arrays[f"{META_PREFIX}config_text"] = encode_text(text)
        arrays[f"{META_PREFIX}config_digest"] = encode_text(self.cfg.digest)
        for key, value in (extra_meta or {}).items():
            arrays[f"{META_PREFIX}{key}"] = encode_text(value)
        save_checkpoint(path, arrays)

    @classmethod
    def load(cls, path) -> tuple["DetectorModel", dict[str, str]]:
        """Rebuild a model from a checkpoint, verifying its embedded digest."""
        arrays = load_checkpoint(path)
        meta: dict[str, str] = {}
        params: dict[str, np.ndarray] = {}
        for name, values in arrays.items():
            if name.startswith(META_PREFIX):
                meta[name[len(META_PREFIX):]] = decode_text(values)
            else:
                params[name] = values
        if "config_text" not in meta or "config_digest" not in meta:
            raise DataError(f"checkpoint {path} lacks config metadata")
        cfg = RunConfig.from_text(meta["config_text"])
        if cfg.digest != meta["config_digest"]:
            raise ArtifactMismatchError(
                f"checkpoint digest {meta['config_digest']} does not match its "
                f"config text (expected {cfg.digest})"
            )
        model = cls(cfg)
        own = model.parameters()
        if set(own) != set(params):
            missing = sorted(set(own) ^ set(params))
            raise DataError(f"checkpoint parameters do not match model: {missing[:5]}")
        for name, param in own.items():
            if param.values.shape != params[name].shape:
                raise DataError(
                    f"checkpoint array {name} has shape {params[name].shape}, "
                    f"model expects {param.values.shape}"
                )
            param.values = params[name]
        return model, meta
