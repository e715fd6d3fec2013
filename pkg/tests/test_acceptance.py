"""Acceptance suite.

One test per criterion, each printing a PASS/FAIL line (run with
``pytest tests/test_acceptance.py -v -s`` to see them live).  The
directional-generalization criterion trains 15 models at full desk scale
and dominates the suite's runtime.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from cbodd.cli import main
from cbodd.config import RunConfig, VARIANT_IDS, desk_profile, paper_profile, variant_spec
from cbodd.datagen import Corpus, generate_corpus
from cbodd.detector import FrameVerdict, fused_dim, video_verdict
from cbodd.encoders import FeatureMap, WindowConfig, adaptive_avg_pool, window_partition_shift
from cbodd.evaluate import score_clips, split_corpus
from cbodd.metrics import auc
from cbodd.model import DetectorModel
from cbodd.ofdm import ProjectionHeads, branch_ortho_loss, cross_ortho_loss, project
from cbodd.tensor import DiffArray
from cbodd.train import train_model
from cbodd.verify import loss_grad_check

from test_metrics import auc_pairwise_oracle


def report(number, passed, detail):
    print(f"[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, detail


def test_criterion_1_gradient_fidelity():
    start = time.time()
    result = loss_grad_check(seed=2024)
    elapsed = time.time() - start
    worst = max(result.errors.values())
    detail = (
        f"gradients of {', '.join(result.errors)} match finite differences; "
        f"max rel err {worst:.2e} < 1e-4 in {elapsed:.1f}s"
    )
    report(1, result.passed and elapsed < 60.0, detail)


def test_criterion_2_orthogonality_efficacy():
    start = time.time()
    rng = np.random.default_rng(77)
    features = {b: DiffArray(rng.standard_normal((32, 64))) for b in ("LS", "MG", "CE")}
    heads = ProjectionHeads.create(64, 8, 16, "shared", rng)
    params = list(heads.parameters().values())

    def losses():
        pairs = project(features, heads)
        return branch_ortho_loss(pairs, 32), cross_ortho_loss(pairs, 32)

    from cbodd import tensor as t

    branch0, cross0 = (loss.item() for loss in losses())
    for _ in range(500):
        branch_loss, cross_loss = losses()
        for p in params:
            p.zero_grad()
        t.add(branch_loss, cross_loss).backward()
        for p in params:
            p.values = p.values - 1e-2 * p.grad
    branch1, cross1 = (loss.item() for loss in losses())
    elapsed = time.time() - start
    ok = branch1 < 0.01 * branch0 and cross1 < 0.01 * cross0 and elapsed < 60.0
    report(
        2,
        ok,
        f"500 GD steps at lr 1e-2: branch {branch0:.3f}->{branch1:.5f} "
        f"({branch1 / branch0:.2%}), cross {cross0:.3f}->{cross1:.5f} "
        f"({cross1 / cross0:.2%}) in {elapsed:.1f}s",
    )


def test_criterion_3_auc_oracle_equivalence():
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.uniform(size=n), int(rng.integers(0, 3)))
        if auc(scores, labels) != auc_pairwise_oracle(scores, labels):
            mismatches += 1
    hand = auc([0.2, 0.8, 0.6, 0.4], [1, 1, 0, 0])
    report(
        3,
        mismatches == 0 and hand == 0.5,
        f"1000 random instances match the pairwise oracle exactly "
        f"({mismatches} mismatches); hand-checked case = {hand}",
    )


def test_criterion_4_pooling_and_window_oracles():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        channels = int(rng.integers(1, 4))
        height = int(rng.integers(1, 12))
        width = int(rng.integers(1, 12))
        k_h = int(rng.integers(1, height + 1))
        k_w = int(rng.integers(1, width + 1))
        values = rng.standard_normal((channels, height, width))
        got = adaptive_avg_pool(
            FeatureMap(values=DiffArray(values), branch_id="LS"), k_h, k_w
        ).segments.values
        expected = np.empty((k_h * k_w, channels))
        for i in range(k_h):
            for j in range(k_w):
                r0, r1 = i * height // k_h, (i + 1) * height // k_h
                c0, c1 = j * width // k_w, (j + 1) * width // k_w
                expected[i * k_w + j] = values[:, r0:r1, c0:c1].mean(axis=(1, 2))
        worst = max(worst, float(np.abs(got - expected).max()))
    hand = adaptive_avg_pool(
        FeatureMap(values=DiffArray(np.arange(1.0, 17.0).reshape(1, 4, 4)), branch_id="LS"),
        2,
        2,
    ).segments.values.reshape(2, 2)
    hand_ok = np.array_equal(hand, [[3.5, 5.5], [11.5, 13.5]])

    round_trips = True
    for shifted in (False, True):
        for shape in ((2, 8, 8), (1, 6, 10), (3, 7, 5)):
            values = rng.standard_normal(shape)
            part = window_partition_shift(values, WindowConfig(size=4, shift=2), shifted)
            round_trips &= np.array_equal(part.restore(), values)
    report(
        4,
        worst < 1e-12 and hand_ok and round_trips,
        f"pooling matches direct evaluation on 100 random maps (max dev {worst:.1e}); "
        f"1..16 case -> [[3.5,5.5],[11.5,13.5]]; window partitions round-trip exactly",
    )


def test_criterion_5_shape_contracts():
    paper = fused_dim(paper_profile().shared_dim, paper_profile().disentangled_dim)
    cfg = RunConfig()
    block = cfg.shared_dim + cfg.disentangled_dim
    ok = paper == 1920
    details = [f"paper config fused dim = {paper}"]
    for variant in VARIANT_IDS:
        model = DetectorModel(replace(cfg, variant=variant))
        expected = len(variant_spec(variant).branches) * block
        ok &= model.fused_dim == expected
        removed = 3 - len(variant_spec(variant).branches)
        ok &= model.fused_dim == 3 * block - removed * block
    details.append(f"all {len(VARIANT_IDS)} variants shrink by exactly {block} per removed branch")
    report(5, ok, "; ".join(details))


def test_criterion_7_voting_aggregation():
    def verdicts(probs):
        return [
            FrameVerdict(probability=p, label="fake" if p > 0.5 else "real", frame_index=i)
            for i, p in enumerate(probs)
        ]

    majority = video_verdict(verdicts([0.9, 0.8, 0.2])).decision == "fake"
    tie = video_verdict(verdicts([0.9, 0.8, 0.2, 0.1])).decision == "fake"
    mean_case = video_verdict(verdicts([0.2, 0.4]))
    mean_ok = mean_case.decision == "real" and mean_case.mean_confidence == pytest.approx(0.3)

    rng = np.random.default_rng(7)
    invariant = True
    for _ in range(50):
        probs = rng.uniform(0.01, 0.99, size=int(rng.integers(1, 16))).tolist()
        base = video_verdict(verdicts(probs))
        shuffled = list(probs)
        rng.shuffle(shuffled)
        other = video_verdict(verdicts(shuffled))
        invariant &= base.decision == other.decision
        invariant &= abs(base.mean_confidence - other.mean_confidence) < 1e-12
    report(
        7,
        majority and tie and mean_ok and invariant,
        "majority vote, tie->fake, mean confidence, and frame-order invariance all hold",
    )


def test_criterion_8_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["datagen", "--out", str(data), "--seed", "3", "--clips", "8",
                 "--frames", "2", "--size", "24", "--domain", "A"]) == 0
    heldout = tmp_path / "heldout"
    assert main(["datagen", "--out", str(heldout), "--seed", "4", "--clips", "6",
                 "--frames", "2", "--size", "24", "--domain", "A"]) == 0
    from cbodd.encoders import ConvBranchConfig, WindowBranchConfig

    cfg = desk_profile(
        epochs=2,
        batch_size=8,
        frame_size=24,
        frames_per_clip=2,
        embed_dim=16,
        shared_dim=4,
        disentangled_dim=8,
        attention_heads=2,
        ls=ConvBranchConfig(channels=(4, 8), strides=(2, 2), k_h=2, k_w=2),
        ce=ConvBranchConfig(channels=(4, 8), strides=(2, 2), k_h=2, k_w=2),
        mg=WindowBranchConfig(patch_size=2, channels=(4, 8), window=3, heads=2, k_h=2, k_w=2),
    )
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(cfg.to_text())

    artifacts = {}
    for tag in ("one", "two"):
        out = tmp_path / tag
        assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(out)]) == 0
        rpt = tmp_path / f"report_{tag}.json"
        assert main(["eval", "--model", str(out), "--data", str(heldout),
                     "--protocol", "within", "--report", str(rpt)]) == 0
        artifacts[tag] = (
            (out / "checkpoint.cbodd").read_bytes(),
            (out / "loss_trace.csv").read_bytes(),
            rpt.read_bytes(),
        )
    same = artifacts["one"] == artifacts["two"]
    report(
        8,
        same,
        "identical seed + config give byte-identical checkpoint, loss trace, and eval report",
    )


def test_criterion_6_directional_generalization():
    # 200 train clips (domain A), 100 test clips (domain B), desk profile,
    # 5 seeds; median cross-domain video AUC of FULL must beat the
    # no-penalty multi-branch variant by >= 0.03 and FULL must hold
    # within-domain video AUC >= 0.95.  Budget: < 15 min per seed.
    full_within, full_cross, mb_cross, seed_times = [], [], [], []
    for seed in range(5):
        start = time.time()
        corpus_a = Corpus.from_clips(
            generate_corpus(seed=seed * 1000 + 1, n_clips=200, n_frames=8, size=32, domain_mix="A")
        )
        corpus_b = Corpus.from_clips(
            generate_corpus(seed=seed * 1000 + 2, n_clips=100, n_frames=8, size=32, domain_mix="B")
        )
        cfg = RunConfig(seed=seed)
        train_ids, test_ids = split_corpus(corpus_a, cfg.train_fraction, seed=seed)

        within_model = train_model(cfg, corpus_a, train_ids).model
        _, _, scores, labels, _ = score_clips(within_model, corpus_a, test_ids)
        full_within.append(auc(scores, labels))

        full_model = train_model(cfg, corpus_a).model
        _, _, scores, labels, _ = score_clips(full_model, corpus_b, corpus_b.clip_ids)
        full_cross.append(auc(scores, labels))

        mb_model = train_model(replace(cfg, variant="MB-wo-BO-CBO"), corpus_a).model
        _, _, scores, labels, _ = score_clips(mb_model, corpus_b, corpus_b.clip_ids)
        mb_cross.append(auc(scores, labels))
        seed_times.append(time.time() - start)
        print(
            f"  seed {seed}: within={full_within[-1]:.3f} "
            f"full_cross={full_cross[-1]:.3f} mb_cross={mb_cross[-1]:.3f} "
            f"({seed_times[-1]:.0f}s)"
        )

    median_within = float(np.median(full_within))
    gap = float(np.median(full_cross) - np.median(mb_cross))
    ok = median_within >= 0.95 and gap >= 0.03 and max(seed_times) < 900.0
    report(
        6,
        ok,
        f"median within video AUC {median_within:.3f} >= 0.95; median cross gap "
        f"{gap:+.3f} >= 0.03 (FULL {np.median(full_cross):.3f} vs "
        f"MB-wo-BO-CBO {np.median(mb_cross):.3f}); worst seed {max(seed_times):.0f}s < 900s",
    )
