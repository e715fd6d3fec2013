import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbodd import tensor as t
from cbodd.encoders import (
    ConvBranchConfig,
    EmotionConvBranch,
    FeatureMap,
    Frame,
    SegmentAttentionPool,
    SpatialConvBranch,
    WindowAttentionBranch,
    WindowBranchConfig,
    WindowConfig,
    adaptive_avg_pool,
    window_partition_shift,
)
from cbodd.errors import ConfigError, DimensionError
from cbodd.tensor import DiffArray


def feature_map(values, branch_id="LS"):
    return FeatureMap(values=DiffArray(values), branch_id=branch_id)


def pool_oracle(values, k_h, k_w):
    """Direct evaluation: mean over floor-based adaptive windows."""
    channels, height, width = values.shape
    out = np.empty((channels, k_h, k_w))
    for i in range(k_h):
        for j in range(k_w):
            r0, r1 = i * height // k_h, (i + 1) * height // k_h
            c0, c1 = j * width // k_w, (j + 1) * width // k_w
            out[:, i, j] = values[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return out


class TestAdaptiveAvgPool:
    def test_constant_map(self):
        grid = adaptive_avg_pool(feature_map(np.full((2, 6, 6), 7.0)), 3, 2)
        np.testing.assert_array_equal(grid.segments.values, np.full((6, 2), 7.0))

    def test_hand_case_1_to_16(self):
        values = np.arange(1.0, 17.0).reshape(1, 4, 4)
        grid = adaptive_avg_pool(feature_map(values), 2, 2)
        expected = np.array([[3.5, 5.5], [11.5, 13.5]])
        np.testing.assert_array_equal(
            grid.segments.values.reshape(2, 2), expected
        )

    def test_identity_segmentation(self, rng):
        values = rng.standard_normal((3, 5, 4))
        grid = adaptive_avg_pool(feature_map(values), 5, 4)
        np.testing.assert_allclose(
            grid.segments.values, values.reshape(3, 20).T, rtol=0, atol=1e-15
        )

    def test_grid_exceeding_extent_rejected(self):
        with pytest.raises(DimensionError):
            adaptive_avg_pool(feature_map(np.zeros((1, 4, 4))), 5, 2)

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(1, 3),
        st.integers(1, 8),
        st.integers(1, 8),
        st.integers(0, 2**31 - 1),
    )
    def test_matches_direct_oracle_and_conserves_mass(self, channels, height, width, seed):
        rng = np.random.default_rng(seed)
        k_h = rng.integers(1, height + 1)
        k_w = rng.integers(1, width + 1)
        values = rng.standard_normal((channels, height, width))
        grid = adaptive_avg_pool(feature_map(values), k_h, k_w)
        oracle = pool_oracle(values, k_h, k_w)
        np.testing.assert_allclose(
            grid.segments.values, oracle.reshape(channels, -1).T, rtol=0, atol=1e-12
        )
        # windows partition the map: area-weighted segment sum equals map sum
        total = 0.0
        for i in range(k_h):
            for j in range(k_w):
                area = ((i + 1) * height // k_h - i * height // k_h) * (
                    (j + 1) * width // k_w - j * width // k_w
                )
                total += grid.segments.values[i * k_w + j].sum() * area
        assert abs(total - values.sum()) < 1e-9


class TestWindowPartition:
    def test_unshifted_tiles_partition_the_map(self, rng):
        values = rng.standard_normal((2, 4, 4))
        part = window_partition_shift(values, WindowConfig(size=2), shifted=False)
        assert part.windows.shape == (4, 2, 2, 2)
        # disjoint cover: every source index appears exactly once
        coords = {
            (int(r), int(c))
            for r, c in zip(part.source_rows.ravel(), part.source_cols.ravel())
        }
        assert coords == {(r, c) for r in range(4) for c in range(4)}
        np.testing.assert_array_equal(part.restore(), values)

    def test_shift_mapping_enumeration(self, rng):
        # oracle: under a cyclic roll by (shift, shift), pixel (r, c) moves to
        # ((r + shift) % H, (c + shift) % W); its tile is that position // M
        values = rng.standard_normal((1, 4, 4))
        cfg = WindowConfig(size=2, shift=1)
        part = window_partition_shift(values, cfg, shifted=True)
        for r in range(4):
            for c in range(4):
                tile = ((r + 1) % 4 // 2) * 2 + ((c + 1) % 4 // 2)
                cell = np.argwhere(
                    (part.source_rows == r) & (part.source_cols == c)
                )
                assert cell[0][0] == tile
        # pixel (0, 0) lands in the tile whose unshifted footprint held (1, 1)
        unshifted = window_partition_shift(values, cfg, shifted=False)
        target_tile = np.argwhere(
            (unshifted.source_rows == 1) & (unshifted.source_cols == 1)
        )[0][0]
        origin_tile = np.argwhere((part.source_rows == 0) & (part.source_cols == 0))[0][0]
        assert origin_tile == target_tile == 0

    @pytest.mark.parametrize("shifted", [False, True])
    @pytest.mark.parametrize("shape", [(2, 4, 4), (1, 6, 6), (3, 5, 7)])
    def test_round_trip_exact(self, rng, shifted, shape):
        values = rng.standard_normal(shape)
        part = window_partition_shift(values, WindowConfig(size=2, shift=1), shifted)
        np.testing.assert_array_equal(part.restore(), values)

    def test_shift_must_be_smaller_than_window(self):
        with pytest.raises(ConfigError):
            WindowConfig(size=2, shift=2)

    def test_default_shift_is_half_window(self):
        assert WindowConfig(size=6).shift == 3


class TestSpatialConvBranch:
    def make(self, rng, frame_size=32):
        cfg = ConvBranchConfig(channels=(8, 16), strides=(2, 2), k_h=2, k_w=2)
        return SpatialConvBranch(cfg, 3, frame_size, rng)

    def test_shape_contract(self, rng):
        branch = self.make(rng)
        frame = Frame(pixels=rng.uniform(0, 1, (3, 32, 32)))
        grid = branch.forward(frame)
        assert grid.segments.shape == (4, 16)
        assert grid.grid == (2, 2)
        assert grid.channels == 16

    def test_zero_frame_is_finite(self, rng):
        branch = self.make(rng)
        grid = branch.forward(Frame(pixels=np.zeros((3, 32, 32))))
        assert np.isfinite(grid.segments.values).all()

    def test_extent_mismatch_rejected(self, rng):
        branch = self.make(rng)
        with pytest.raises(DimensionError):
            branch.forward(Frame(pixels=np.zeros((3, 16, 16))))

    def test_receptive_field_localization(self, rng):
        # oracle: propagate the changed index interval through the conv
        # geometry (kernel 3, stride 2, padding 1), then the pool windows
        branch = self.make(rng)

        def influenced(lo, hi, out_extent):
            lo = max(0, int(np.ceil((lo - 1) / 2)))
            hi = min(out_extent - 1, (hi + 1) // 2)
            return lo, hi

        patch_rows, patch_cols = (9, 11), (5, 7)
        rows = influenced(*influenced(*patch_rows, 16), 8)
        cols = influenced(*influenced(*patch_cols, 16), 8)
        segments = set()
        for i in range(2):
            for j in range(2):
                win_r = (i * 8 // 2, (i + 1) * 8 // 2 - 1)
                win_c = (j * 8 // 2, (j + 1) * 8 // 2 - 1)
                if rows[0] <= win_r[1] and win_r[0] <= rows[1] and cols[0] <= win_c[1] and win_c[0] <= cols[1]:
                    segments.add(i * 2 + j)

        base = rng.uniform(0.2, 0.8, (3, 32, 32))
        changed = base.copy()
        changed[:, 9:12, 5:8] = rng.uniform(0, 1, (3, 3, 3))
        grid_a = branch.forward(Frame(pixels=base)).segments.values
        grid_b = branch.forward(Frame(pixels=changed)).segments.values
        differs = {
            s for s in range(4) if not np.array_equal(grid_a[s], grid_b[s])
        }
        assert differs  # the patch must reach at least one segment
        assert differs <= segments
        for s in set(range(4)) - segments:
            np.testing.assert_array_equal(grid_a[s], grid_b[s])


class TestWindowAttentionBranch:
    def test_shape_contract_and_merging(self, rng):
        # 16x16 frame, patch 2 -> 8x8 tokens, one merge -> 4x4, window 2
        cfg = WindowBranchConfig(
            patch_size=2, channels=(4, 8), window=2, shift=1, heads=2, k_h=2, k_w=2
        )
        branch = WindowAttentionBranch(cfg, 3, 16, rng)
        assert branch.stage_sizes == [8, 4]  # extent halves once per merge
        grid = branch.forward(Frame(pixels=rng.uniform(0, 1, (3, 16, 16))))
        assert grid.segments.shape == (4, 8)

    def test_unshifted_stage_isolates_windows(self, rng):
        # depth 1, shift 0: permuting other windows' contents must not
        # change the feature map inside the observed window
        cfg = WindowBranchConfig(
            patch_size=2, channels=(4,), window=4, shift=0, heads=2, k_h=2, k_w=2
        )
        branch = WindowAttentionBranch(cfg, 3, 16, rng)
        base = rng.uniform(0, 1, (1, 3, 16, 16))
        permuted = base.copy()
        # swap the pixel blocks of token windows (0,1) and (1,1)
        permuted[:, :, 0:8, 8:16] = base[:, :, 8:16, 8:16]
        permuted[:, :, 8:16, 8:16] = base[:, :, 0:8, 8:16]
        with t.no_grad():
            map_a = branch.feature_map_batch(DiffArray(base)).values
            map_b = branch.feature_map_batch(DiffArray(permuted)).values
        np.testing.assert_array_equal(map_a[:, :, 0:4, 0:4], map_b[:, :, 0:4, 0:4])
        assert not np.array_equal(map_a, map_b)

    def test_identical_frames_identical_embeddings(self, rng):
        cfg = WindowBranchConfig(patch_size=2, channels=(4,), window=4, heads=2)
        branch = WindowAttentionBranch(cfg, 3, 16, rng)
        frame = Frame(pixels=rng.uniform(0, 1, (3, 16, 16)))
        first = branch.forward(frame).segments.values
        second = branch.forward(frame).segments.values
        np.testing.assert_array_equal(first, second)

    def test_indivisible_window_rejected(self, rng):
        with pytest.raises(ConfigError):
            WindowAttentionBranch(
                WindowBranchConfig(patch_size=2, channels=(4,), window=3), 3, 16, rng
            )


class TestEmotionBranch:
    def test_shape_contract_matches_spatial_branch(self, rng):
        cfg = ConvBranchConfig(channels=(8, 16), strides=(2, 2), k_h=2, k_w=2)
        branch = EmotionConvBranch(cfg, 3, 32, rng)
        grid = branch.forward(Frame(pixels=rng.uniform(0, 1, (3, 32, 32))))
        assert grid.segments.shape == (4, 16)
        assert grid.branch_id == "CE"

    def test_zero_frame_finite_expression(self, rng):
        cfg = ConvBranchConfig(channels=(4, 8), strides=(2, 2))
        branch = EmotionConvBranch(cfg, 3, 32, rng)
        with t.no_grad():
            expr = branch.expression_batch(DiffArray(np.zeros((2, 3, 32, 32))))
        assert np.isfinite(expr.values).all()
        assert ((expr.values > 0) & (expr.values < 1)).all()

    def test_expression_head_trains_to_criterion(self):
        # train-to-criterion oracle: the head alone must regress the
        # generated expression values to MSE < 0.05 on held-out clips
        from cbodd.datagen import generate_corpus
        from cbodd.optim import Adam

        def frames_and_labels(seed, n_clips):
            clips = generate_corpus(seed=seed, n_clips=n_clips, n_frames=4, size=32)
            pixels = np.concatenate([c.pixel_stack() for c in clips])
            labels = np.concatenate([c.expression for c in clips])
            return pixels, labels

        pixels, labels = frames_and_labels(4, 40)
        held_x, held_y = frames_and_labels(5, 16)
        assert held_y.var() > 0.04  # a constant predictor must not pass

        rng = np.random.default_rng(0)
        branch = EmotionConvBranch(ConvBranchConfig(channels=(8, 16), strides=(2, 2)), 3, 32, rng)
        optimizer = Adam(branch.params, learning_rate=3e-3, weight_decay=1e-4, decay_factor=1.0)
        order_rng = np.random.default_rng(1)
        for _ in range(25):
            order = order_rng.permutation(len(labels))
            for start in range(0, len(labels), 16):
                idx = order[start : start + 16]
                pred = branch.expression_batch(DiffArray(pixels[idx]))
                residual = pred - DiffArray(labels[idx])
                loss = t.mean(t.multiply(residual, residual))
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            optimizer.end_epoch()
        with t.no_grad():
            held_pred = branch.expression_batch(DiffArray(held_x)).values
        assert ((held_pred - held_y) ** 2).mean() < 0.05


class TestSegmentAttentionPool:
    def test_single_segment_pooling_is_identity(self, rng):
        pool = SegmentAttentionPool("LS", 6, 8, 2, rng)
        segments = DiffArray(rng.standard_normal((2, 1, 6)))
        with t.no_grad():
            pooled = pool.forward_batch(segments).values
            attended = pool.transformed_batch(segments).values
        np.testing.assert_allclose(pooled, attended[:, 0, :], rtol=0, atol=1e-15)

    def test_identical_segments_give_uniform_attention(self, rng):
        pool = SegmentAttentionPool("MG", 5, 8, 2, rng)
        one = rng.standard_normal(5)
        segments = DiffArray(np.tile(one, (1, 4, 1)))
        with t.no_grad():
            weights = pool.attention_weights(segments)
        np.testing.assert_allclose(weights, 0.25, rtol=0, atol=1e-12)

    def test_mean_pool_matches_hand_average(self, rng):
        pool = SegmentAttentionPool("CE", 4, 8, 2, rng)
        segments = DiffArray(rng.standard_normal((2, 3, 4)))
        with t.no_grad():
            transformed = pool.transformed_batch(segments).values
            pooled = pool.forward_batch(segments).values
        np.testing.assert_allclose(pooled, transformed.mean(axis=1), rtol=1e-15)

    def test_heads_must_divide_dim(self, rng):
        with pytest.raises(ConfigError):
            SegmentAttentionPool("LS", 4, 10, 3, rng)


class TestBranchGradients:
    def test_gradients_flow_end_to_end(self):
        # finite differences through each branch on an 8x8 toy frame
        rng = np.random.default_rng(7)
        frame = rng.uniform(0.1, 0.9, (1, 3, 8, 8))
        branches = {
            "LS": SpatialConvBranch(
                ConvBranchConfig(channels=(2, 3), strides=(2, 2), k_h=2, k_w=2), 3, 8, rng
            ),
            "MG": WindowAttentionBranch(
                WindowBranchConfig(patch_size=2, channels=(4,), window=2, heads=1, k_h=2, k_w=2),
                3,
                8,
                rng,
            ),
            "CE": EmotionConvBranch(
                ConvBranchConfig(channels=(2, 2), strides=(2, 2), k_h=2, k_w=2), 3, 8, rng
            ),
        }
        for name, branch in branches.items():
            weights = rng.standard_normal((1, 4, branch.out_channels))

            def loss_value():
                out = branch.forward_batch(DiffArray(frame))
                return t.total_sum(t.multiply(out, DiffArray(weights)))

            params = list(branch.params.values())
            for p in params:
                p.zero_grad()
            loss_value().backward()
            step = 1e-4
            worst = 0.0
            for p in params:
                flat = p.values.reshape(-1)
                gflat = p.grad.reshape(-1)
                for idx in range(flat.size):
                    keep = flat[idx]
                    flat[idx] = keep + step
                    hi = loss_value().item()
                    flat[idx] = keep - step
                    lo = loss_value().item()
                    flat[idx] = keep
                    numeric = (hi - lo) / (2 * step)
                    denom = max(abs(numeric), abs(gflat[idx]), 1e-8)
                    worst = max(worst, abs(numeric - gflat[idx]) / denom)
            assert worst < 1e-4, f"branch {name} worst rel err {worst}"


class TestCenterCrop:
    def test_crop_takes_central_window(self, rng):
        from cbodd.encoders import center_crop

        pixels = rng.uniform(0, 1, (3, 40, 40))
        cropped = center_crop(pixels, 32)
        np.testing.assert_array_equal(cropped, pixels[:, 4:36, 4:36])

    def test_batched_crop_and_identity(self, rng):
        from cbodd.encoders import center_crop

        stack = rng.uniform(0, 1, (5, 3, 36, 36))
        assert center_crop(stack, 32).shape == (5, 3, 32, 32)
        np.testing.assert_array_equal(center_crop(stack, 36), stack)

    def test_undersized_frame_rejected(self, rng):
        from cbodd.encoders import center_crop

        with pytest.raises(DimensionError):
            center_crop(rng.uniform(0, 1, (3, 16, 16)), 32)

    def test_training_crops_oversized_frames(self):
        from cbodd.datagen import Corpus
        from cbodd.train import collect_frames
        from test_evaluate import separable_clip

        corpus = Corpus.from_clips(
            [separable_clip(i, fake=i % 2 == 0, size=20) for i in range(4)]
        )
        pixels, _, _ = collect_frames(corpus, corpus.clip_ids, frame_size=16)
        assert pixels.shape[-2:] == (16, 16)


class TestFrameValidation:
    def test_small_extents_rejected(self):
        with pytest.raises(DimensionError):
            Frame(pixels=np.zeros((3, 4, 4)))

    def test_out_of_range_pixels_rejected(self):
        from cbodd.errors import InputError

        with pytest.raises(InputError):
            Frame(pixels=np.full((3, 8, 8), 1.5))
