"""Orthogonal feature disentanglement.

Each branch embedding is projected into a small shared subspace and a
larger disentangled subspace by learnable bias-free linear heads.  Two
penalties keep the projections decorrelated across a batch:

* branch-level: for each branch, the squared Frobenius norm of the
  cross-Gram between its shared and disentangled batch matrices;
* cross-branch: the same penalty between the shared matrices of every
  unordered pair of distinct branches.

Both are normalized by the squared batch size so the loss weights are
batch-size independent.  All functions here are pure in their inputs and
safe to evaluate concurrently; the heads are mutated only by an optimizer
step.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from cbodd import tensor as t
from cbodd.encoders import BRANCH_IDS
from cbodd.errors import BatchError, ConfigError, DimensionError
from cbodd.tensor import DiffArray

SHARING_MODES = ("shared", "per-branch")


@dataclass
class ProjectionHeads:
    """Bias-free linear projection heads, shared across branches or per branch."""

    shared: dict[str, DiffArray]
    disentangled: dict[str, DiffArray]
    mode: str
    embed_dim: int
    shared_dim: int
    disentangled_dim: int

    @classmethod
    def create(
        cls,
        embed_dim: int,
        shared_dim: int,
        disentangled_dim: int,
        mode: str,
        rng: np.random.Generator,
        branches: tuple[str, ...] = BRANCH_IDS,
    ) -> "ProjectionHeads":
        if shared_dim < 1 or disentangled_dim < 1:
            raise ConfigError(
                f"projection dims must be >= 1, got ({shared_dim}, {disentangled_dim})"
            )
        if mode not in SHARING_MODES:
            raise ConfigError(f"sharing mode must be one of {SHARING_MODES}, got {mode!r}")
        keys = ("*",) if mode == "shared" else branches
        shared = {k: t.uniform_init((embed_dim, shared_dim), embed_dim, rng) for k in keys}
        disentangled = {
            k: t.uniform_init((embed_dim, disentangled_dim), embed_dim, rng) for k in keys
        }
        return cls(shared, disentangled, mode, embed_dim, shared_dim, disentangled_dim)

    def for_branch(self, branch_id: str) -> tuple[DiffArray, DiffArray]:
        key = "*" if self.mode == "shared" else branch_id
        return self.shared[key], self.disentangled[key]

    def parameters(self) -> OrderedDict[str, DiffArray]:
        params: OrderedDict[str, DiffArray] = OrderedDict()
        for key in self.shared:
            params[f"heads/{key}/shared"] = self.shared[key]
        for key in self.disentangled:
            params[f"heads/{key}/disentangled"] = self.disentangled[key]
        return params


@dataclass
class DisentangledPair:
    """Shared and disentangled projections of one branch's embeddings.

    Rows index the batch: shared is (B, d_s), disentangled is (B, d_d).
    A single embedding may be stored as shape (1, d).
    """

    branch_id: str
    shared: DiffArray
    disentangled: DiffArray


def project(
    embeddings: Mapping[str, DiffArray], heads: ProjectionHeads
) -> dict[str, DisentangledPair]:
    """Apply the projection heads to batched embeddings per branch."""
    pairs: dict[str, DisentangledPair] = {}
    for branch_id, emb in embeddings.items():
        if emb.ndim == 1:
            emb = t.reshape(emb, (1, -1))
        if emb.shape[-1] != heads.embed_dim:
            raise DimensionError(
                f"branch {branch_id} embedding dim {emb.shape[-1]} does not match "
                f"heads dim {heads.embed_dim}"
            )
        w_shared, w_dis = heads.for_branch(branch_id)
        pairs[branch_id] = DisentangledPair(
            branch_id=branch_id,
            shared=t.matmul(emb, w_shared),
            disentangled=t.matmul(emb, w_dis),
        )
    return pairs


def _ordered(pairs: Mapping[str, DisentangledPair]) -> list[DisentangledPair]:
    if not pairs:
        raise BatchError("no branches supplied to orthogonality loss")
    known = [pairs[b] for b in BRANCH_IDS if b in pairs]
    extras = [pairs[b] for b in sorted(pairs) if b not in BRANCH_IDS]
    return known + extras


def _check_batch(pair: DisentangledPair, batch_size: int) -> None:
    if batch_size < 1:
        raise BatchError(f"batch size must be >= 1, got {batch_size}")
    if pair.shared.shape[0] != batch_size or pair.disentangled.shape[0] != batch_size:
        raise BatchError(
            f"branch {pair.branch_id} carries {pair.shared.shape[0]} rows, "
            f"expected batch size {batch_size}"
        )


def _centered(matrix: DiffArray) -> DiffArray:
    return matrix - t.mean(matrix, axis=0, keepdims=True)


def branch_ortho_loss(
    pairs: Mapping[str, DisentangledPair], batch_size: int, center: bool = False
) -> DiffArray:
    """Sum over branches of ||S^T U||_F^2 / B^2.

    S and U are the (B, d_s) shared and (B, d_d) disentangled batch
    matrices of one branch; the result is non-negative and zero exactly
    when every branch's cross-Gram vanishes.
    """
    terms = []
    for pair in _ordered(pairs):
        _check_batch(pair, batch_size)
        shared, dis = pair.shared, pair.disentangled
        if center:
            shared, dis = _centered(shared), _centered(dis)
        gram = t.matmul(t.transpose(shared, (1, 0)), dis)
        terms.append(t.frobenius_sq(gram))
    total = terms[0]
    for term in terms[1:]:
        total = t.add(total, term)
    return t.scale(total, 1.0 / batch_size**2)


def cross_ortho_loss(
    pairs: Mapping[str, DisentangledPair],
    batch_size: int,
    center: bool = False,
    per_sample: bool = False,
) -> DiffArray:
    """Pairwise shared-component orthogonality over unordered branch pairs.

    Default (Gram) reading: sum over pairs {i, j}, i < j, of
    ||S_i^T S_j||_F^2 / B^2.  The per-sample reading instead penalizes the
    squared inner products of matching rows, normalized by B.  Fewer than
    two branches makes the penalty vacuous (exactly zero).
    """
    ordered = _ordered(pairs)
    for pair in ordered:
        _check_batch(pair, batch_size)
    if len(ordered) < 2:
        return DiffArray(0.0)
    mats = []
    for pair in ordered:
        shared = _centered(pair.shared) if center else pair.shared
        mats.append(shared)
    terms = []
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            if per_sample:
                dots = t.total_sum(t.multiply(mats[i], mats[j]), axis=1)
                terms.append(t.frobenius_sq(dots))
            else:
                terms.append(t.frobenius_sq(t.matmul(t.transpose(mats[i], (1, 0)), mats[j])))
    total = terms[0]
    for term in terms[1:]:
        total = t.add(total, term)
    norm = batch_size if per_sample else batch_size**2
    return t.scale(total, 1.0 / norm)


@dataclass
class OrthoGradReport:
    """Finite-difference audit of the orthogonality-loss gradients."""

    max_rel_error_branch: float
    max_rel_error_cross: float
    seed: int

    @property
    def max_rel_error(self) -> float:
        return max(self.max_rel_error_branch, self.max_rel_error_cross)


def ortho_grad_check(
    seed: int,
    embed_dim: int = 16,
    shared_dim: int = 4,
    disentangled_dim: int = 8,
    batch_size: int = 6,
    step: float = 1e-4,
) -> OrthoGradReport:
    """Compare analytic ortho-loss gradients against central differences.

    Random heads and embeddings; gradients are taken w.r.t. both.
    """
    rng = np.random.default_rng(seed)
    embeddings = {b: rng.standard_normal((batch_size, embed_dim)) for b in BRANCH_IDS}
    w_shared = rng.standard_normal((embed_dim, shared_dim)) * 0.3
    w_dis = rng.standard_normal((embed_dim, disentangled_dim)) * 0.3
    arrays = [w_shared, w_dis] + [embeddings[b] for b in BRANCH_IDS]

    def build(arrs, which: str) -> DiffArray:
        heads = ProjectionHeads(
            shared={"*": DiffArray(arrs[0], requires_grad=True)},
            disentangled={"*": DiffArray(arrs[1], requires_grad=True)},
            mode="shared",
            embed_dim=embed_dim,
            shared_dim=shared_dim,
            disentangled_dim=disentangled_dim,
        )
        embs = {
            b: DiffArray(arrs[2 + i], requires_grad=True) for i, b in enumerate(BRANCH_IDS)
        }
        pairs = project(embs, heads)
        if which == "branch":
            loss = branch_ortho_loss(pairs, batch_size)
        else:
            loss = cross_ortho_loss(pairs, batch_size)
        return loss, [heads.shared["*"], heads.disentangled["*"]] + [
            embs[b] for b in BRANCH_IDS
        ]

    errors = {}
    for which in ("branch", "cross"):
        loss, leaves = build(arrays, which)
        for leaf in leaves:
            leaf.zero_grad()
        loss.backward()
        analytic = [leaf.grad for leaf in leaves]
        numeric = t.finite_difference_grad(
            lambda arrs: build(arrs, which)[0].item(), arrays, step=step
        )
        errors[which] = t.max_relative_error(analytic, numeric)
    return OrthoGradReport(
        max_rel_error_branch=errors["branch"],
        max_rel_error_cross=errors["cross"],
        seed=seed,
    )
