"""Finite-difference verification of the recorded gradients.

Two suites back the ``gradcheck`` command:

* an operator suite running every differentiable op on random small
  arrays (extents <= 8) against central differences;
* a loss-term suite building the classification + orthogonality pipeline
  at reduced width (16-dim embeddings, 4/8-dim projections, batch 6) and
  checking each loss term's gradients w.r.t. embeddings, heads, and
  classifier parameters.

All comparisons use step 1e-4 in float64 with the relative-error
denominator guarded at 1e-8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cbodd import tensor as t
from cbodd.detector import FrameClassifier, binary_cross_entropy
from cbodd.encoders import BRANCH_IDS
from cbodd.errors import ConfigError
from cbodd.ofdm import ProjectionHeads, branch_ortho_loss, cross_ortho_loss, project
from cbodd.tensor import DiffArray

TOLERANCE = 1e-4
FD_STEP = 1e-4

LOSS_TERMS = ("l_cls", "l_branch_ortho", "l_cross_ortho", "total")


@dataclass
class GradCheckReport:
    """Max relative error per checked item plus the pass verdict."""

    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def failing(self) -> list[str]:
        return [name for name, err in self.errors.items() if not err < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing


# -- operator suite ------------------------------------------------------------


def _check_op(build, arrays, step=FD_STEP) -> float:
    """Compare analytic and numeric gradients of scalar-valued ``build``."""
    leaves = [DiffArray(a, requires_grad=True) for a in arrays]
    for leaf in leaves:
        leaf.zero_grad()
    build(leaves).backward()
    analytic = [leaf.grad for leaf in leaves]
    numeric = t.finite_difference_grad(
        lambda arrs: build([DiffArray(a) for a in arrs]).item(), arrays, step=step
    )
    return t.max_relative_error(analytic, numeric)


def operator_grad_check(seed: int) -> GradCheckReport:
    """Finite-difference check of every differentiable operator."""
    rng = np.random.default_rng(seed)

    def arr(*shape, positive=False, spread=1.0):
        values = rng.standard_normal(shape) * spread
        return np.abs(values) + 0.5 if positive else values

    probe = {}

    def reduce_with(x: DiffArray, weights: np.ndarray) -> DiffArray:
        # weighted sum so every output entry influences the scalar loss
        return t.total_sum(t.multiply(x, DiffArray(weights)))

    w_cache: dict[tuple, np.ndarray] = {}

    def w(shape) -> np.ndarray:
        key = tuple(shape)
        if key not in w_cache:
            w_cache[key] = np.random.default_rng(seed + 1).standard_normal(key)
        return w_cache[key]

    probe["add"] = _check_op(
        lambda v: reduce_with(t.add(v[0], v[1]), w((5, 7))), [arr(5, 7), arr(5, 7)]
    )
    probe["add_broadcast"] = _check_op(
        lambda v: reduce_with(t.add(v[0], v[1]), w((5, 7))), [arr(5, 7), arr(7)]
    )
    probe["multiply"] = _check_op(
        lambda v: reduce_with(t.multiply(v[0], v[1]), w((4, 6))), [arr(4, 6), arr(4, 6)]
    )
    probe["multiply_broadcast"] = _check_op(
        lambda v: reduce_with(t.multiply(v[0], v[1]), w((4, 6))), [arr(4, 6), arr(4, 1)]
    )
    probe["scale"] = _check_op(
        lambda v: reduce_with(t.scale(v[0], -1.7), w((6,))), [arr(6)]
    )
    probe["matmul"] = _check_op(
        lambda v: reduce_with(t.matmul(v[0], v[1]), w((4, 5))), [arr(4, 3), arr(3, 5)]
    )
    probe["matmul_batched"] = _check_op(
        lambda v: reduce_with(t.matmul(v[0], v[1]), w((2, 3, 4))),
        [arr(2, 3, 5), arr(2, 5, 4)],
    )
    probe["matmul_stacked_plain"] = _check_op(
        lambda v: reduce_with(t.matmul(v[0], v[1]), w((2, 3, 4))),
        [arr(2, 3, 5), arr(5, 4)],
    )
    probe["transpose"] = _check_op(
        lambda v: reduce_with(t.transpose(v[0], (1, 2, 0)), w((3, 4, 2))), [arr(2, 3, 4)]
    )
    probe["reshape"] = _check_op(
        lambda v: reduce_with(t.reshape(v[0], (6, 4)), w((6, 4))), [arr(2, 3, 4)]
    )
    probe["roll"] = _check_op(
        lambda v: reduce_with(t.roll(v[0], (1, 2), (0, 1)), w((5, 6))), [arr(5, 6)]
    )
    probe["concat"] = _check_op(
        lambda v: reduce_with(t.concat(v, axis=-1), w((3, 9))), [arr(3, 4), arr(3, 5)]
    )
    probe["mean_axis"] = _check_op(
        lambda v: reduce_with(t.mean(v[0], axis=1), w((4, 6))), [arr(4, 5, 6)]
    )
    probe["mean_keepdims"] = _check_op(
        lambda v: reduce_with(t.mean(v[0], axis=-1, keepdims=True), w((4, 1))), [arr(4, 5)]
    )
    probe["sum"] = _check_op(lambda v: t.total_sum(v[0]), [arr(4, 5)])
    probe["frobenius_sq"] = _check_op(lambda v: t.frobenius_sq(v[0]), [arr(5, 3)])
    probe["relu"] = _check_op(
        lambda v: reduce_with(t.relu(v[0]), w((6, 6))), [arr(6, 6) + 0.05]
    )
    probe["sigmoid"] = _check_op(
        lambda v: reduce_with(t.sigmoid(v[0]), w((5, 4))), [arr(5, 4)]
    )
    probe["log"] = _check_op(
        lambda v: reduce_with(t.log(v[0]), w((4, 4))), [arr(4, 4, positive=True)]
    )
    probe["clamp_min"] = _check_op(
        lambda v: reduce_with(t.clamp_min(v[0], 0.2), w((5, 5))), [arr(5, 5) + 0.5]
    )
    probe["power"] = _check_op(
        lambda v: reduce_with(t.power(v[0], -0.5), w((4, 3))), [arr(4, 3, positive=True)]
    )
    probe["softmax_rows"] = _check_op(
        lambda v: reduce_with(t.softmax_rows(v[0]), w((4, 6))), [arr(4, 6)]
    )
    probe["conv2d"] = _check_op(
        lambda v: reduce_with(
            t.conv2d(v[0], v[1], bias=v[2], stride=2, padding=1), w((2, 3, 4, 4))
        ),
        [arr(2, 2, 7, 7), arr(3, 2, 3, 3), arr(3)],
    )
    probe["conv2d_stride1"] = _check_op(
        lambda v: reduce_with(t.conv2d(v[0], v[1], stride=1, padding=0), w((1, 2, 4, 4))),
        [arr(1, 3, 6, 6), arr(2, 3, 3, 3)],
    )
    probe["adaptive_avg_pool"] = _check_op(
        lambda v: reduce_with(t.adaptive_avg_pool(v[0], 3, 2), w((2, 2, 3, 2))),
        [arr(2, 2, 7, 5)],
    )
    return GradCheckReport(errors=probe)


# -- loss-term suite ----------------------------------------------------------


def _loss_suite_arrays(seed: int, embed_dim, shared_dim, dis_dim, batch):
    rng = np.random.default_rng(seed)
    fused = len(BRANCH_IDS) * (shared_dim + dis_dim)
    arrays = {
        "w_shared": rng.standard_normal((embed_dim, shared_dim)) * 0.3,
        "w_dis": rng.standard_normal((embed_dim, dis_dim)) * 0.3,
        "clf_w": rng.standard_normal((fused, 1)) * 0.3,
        "clf_b": rng.standard_normal(1) * 0.1,
    }
    for branch in BRANCH_IDS:
        arrays[f"emb_{branch}"] = rng.standard_normal((batch, embed_dim)) * 0.5
    labels = rng.integers(0, 2, size=batch).astype(np.float64)
    labels[0], labels[1] = 0.0, 1.0  # both classes always present
    return arrays, labels


def _loss_terms(
    arrays: dict[str, np.ndarray],
    labels: np.ndarray,
    embed_dim: int,
    shared_dim: int,
    dis_dim: int,
    batch: int,
    lambda_branch: float,
    lambda_cross: float,
):
    leaves = {name: DiffArray(values, requires_grad=True) for name, values in arrays.items()}
    heads = ProjectionHeads(
        shared={"*": leaves["w_shared"]},
        disentangled={"*": leaves["w_dis"]},
        mode="shared",
        embed_dim=embed_dim,
        shared_dim=shared_dim,
        disentangled_dim=dis_dim,
    )
    embeddings = {b: leaves[f"emb_{b}"] for b in BRANCH_IDS}
    pairs = project(embeddings, heads)
    blocks = []
    for branch in BRANCH_IDS:
        blocks.append(pairs[branch].shared)
        blocks.append(pairs[branch].disentangled)
    fused = t.concat(blocks, axis=-1)
    logits = t.add(t.matmul(fused, leaves["clf_w"]), leaves["clf_b"])
    probs = t.reshape(t.sigmoid(logits), (batch,))
    l_cls = binary_cross_entropy(probs, labels)
    l_branch = branch_ortho_loss(pairs, batch)
    l_cross = cross_ortho_loss(pairs, batch)
    total = t.add(
        l_cls,
        t.add(t.scale(l_branch, lambda_branch), t.scale(l_cross, lambda_cross)),
    )
    terms = {
        "l_cls": l_cls,
        "l_branch_ortho": l_branch,
        "l_cross_ortho": l_cross,
        "total": total,
    }
    return terms, leaves


def loss_grad_check(
    seed: int,
    embed_dim: int = 16,
    shared_dim: int = 4,
    disentangled_dim: int = 8,
    batch: int = 6,
    lambda_branch: float = 0.4,
    lambda_cross: float = 0.25,
    corrupt_term: str | None = None,
) -> GradCheckReport:
    """Finite-difference audit of every loss term of the training objective.

    ``corrupt_term`` perturbs that term's analytic gradient before the
    comparison; it exists as a negative control for the verification
    pipeline itself.
    """
    if corrupt_term is not None and corrupt_term not in LOSS_TERMS:
        raise ConfigError(f"unknown loss term {corrupt_term!r}; choose from {LOSS_TERMS}")
    arrays, labels = _loss_suite_arrays(seed, embed_dim, shared_dim, disentangled_dim, batch)
    names = list(arrays)

    def build(values_list, term):
        named = dict(zip(names, values_list))
        terms, leaves = _loss_terms(
            named, labels, embed_dim, shared_dim, disentangled_dim, batch,
            lambda_branch, lambda_cross,
        )
        return terms[term], leaves

    errors: dict[str, float] = {}
    for term in LOSS_TERMS:
        loss, leaves = build([arrays[n] for n in names], term)
        for leaf in leaves.values():
            leaf.zero_grad()
        loss.backward()
        analytic = [leaves[n].grad.copy() for n in names]
        if corrupt_term == term:
            analytic[0] = analytic[0] + 1e-2
        numeric = t.finite_difference_grad(
            lambda arrs: build(arrs, term)[0].item(),
            [arrays[n] for n in names],
            step=FD_STEP,
        )
        errors[term] = t.max_relative_error(analytic, numeric)
    return GradCheckReport(errors=errors)
