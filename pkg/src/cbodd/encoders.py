"""Per-frame encoder branches.

Three branches turn an RGB frame into a grid of pooled feature segments:

* ``LS`` -- strided convolutions capturing localized spatial texture.
* ``MG`` -- window self-attention alternating plain and cyclically shifted
  windows, with 2x2 window merging between stages, capturing multi-scale
  global context.
* ``CE`` -- a convolutional stack with an auxiliary expression-regression
  head, capturing complementary emotion cues.

Each branch ends in adaptive average pooling onto a small segment grid;
a per-branch segment-attention module then mixes the segments and mean-
pools them into one embedding vector per frame.

Branch parameters are read-shared during inference and owned exclusively
by the optimizer during an update; forward passes for the same frame may
run concurrently on independent graphs.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from cbodd import tensor as t
from cbodd.errors import ConfigError, DimensionError, InputError
from cbodd.tensor import DiffArray

BRANCH_IDS = ("LS", "MG", "CE")

CONV_KERNEL = 3
CONV_PADDING = 1
LAYER_NORM_EPS = 1e-5
EXPRESSION_POOL_GRID = 8


# -- domain types ------------------------------------------------------------


@dataclass
class Frame:
    """A single RGB frame with pixels in [0, 1], shaped (C, H, W)."""

    pixels: np.ndarray
    frame_index: int = 0
    clip_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise DimensionError(f"frame pixels must be (C, H, W), got {self.pixels.shape}")
        _, h, w = self.pixels.shape
        if h < 8 or w < 8:
            raise DimensionError(f"frame extents must be >= 8, got {h}x{w}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise InputError("frame pixel values must lie in [0, 1]")
        if self.frame_index < 0:
            raise InputError(f"frame_index must be non-negative, got {self.frame_index}")


@dataclass
class FeatureMap:
    """Spatial branch output of shape (C, H, W)."""

    values: DiffArray
    branch_id: str

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DimensionError(f"feature map must be rank 3, got {self.values.shape}")
        if self.branch_id not in BRANCH_IDS:
            raise ConfigError(f"unknown branch id {self.branch_id!r}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class SegmentGrid:
    """Pooled segmentation of a feature map, flattened to (k_h * k_w, C)."""

    segments: DiffArray
    channels: int
    grid: tuple[int, int]
    strides: tuple[int, int]
    branch_id: str

    def __post_init__(self):
        k_h, k_w = self.grid
        if self.segments.shape != (k_h * k_w, self.channels):
            raise DimensionError(
                f"segment matrix shape {self.segments.shape} does not match "
                f"grid {self.grid} x channels {self.channels}"
            )


@dataclass
class WindowConfig:
    """Window attention geometry: M x M tiles, cyclic shift, heads, stages."""

    size: int
    shift: int | None = None
    heads: int = 4
    depth: int = 1

    def __post_init__(self):
        if self.shift is None:
            self.shift = self.size // 2
        if self.shift < 0 or self.shift >= self.size:
            raise ConfigError(
                f"window shift must satisfy 0 <= shift < size, got shift={self.shift} "
                f"size={self.size}"
            )


@dataclass
class BranchEmbedding:
    """Pooled per-frame branch descriptor of dimension D."""

    branch_id: str
    vector: DiffArray

    @property
    def dim(self) -> int:
        return self.vector.shape[-1]


def center_crop(pixels: np.ndarray, size: int) -> np.ndarray:
    """Center-crop (..., H, W) pixels to (..., size, size).

    Stands in for face detection: frames larger than the configured input
    are cropped around their center; smaller ones are an error.
    """
    height, width = pixels.shape[-2], pixels.shape[-1]
    if height < size or width < size:
        raise DimensionError(f"cannot crop {height}x{width} frame to {size}x{size}")
    top = (height - size) // 2
    left = (width - size) // 2
    return pixels[..., top : top + size, left : left + size]


# -- adaptive average pooling -------------------------------------------------


def adaptive_avg_pool(feature_map: FeatureMap, k_h: int, k_w: int) -> SegmentGrid:
    """Segment a feature map into a k_h x k_w grid of window means.

    The windows partition the map exactly (floor-based adaptive bounds), so
    every cell contributes to exactly one segment.
    """
    values = feature_map.values
    channels, height, width = values.shape
    pooled = t.adaptive_avg_pool(t.reshape(values, (1, channels, height, width)), k_h, k_w)
    flat = t.transpose(t.reshape(pooled, (channels, k_h * k_w)), (1, 0))
    return SegmentGrid(
        segments=flat,
        channels=channels,
        grid=(k_h, k_w),
        strides=(height // k_h, width // k_w),
        branch_id=feature_map.branch_id,
    )


# -- window partitioning -------------------------------------------------------


@dataclass
class WindowPartition:
    """M x M tiles of a (C, H, W) map plus the index needed to restore it."""

    windows: np.ndarray  # (num_windows, C, M, M)
    source_rows: np.ndarray  # (num_windows, M, M) original row per cell
    source_cols: np.ndarray  # (num_windows, M, M) original col per cell
    original_shape: tuple[int, int, int]

    def restore(self, windows: np.ndarray | None = None) -> np.ndarray:
        """Reassemble the original map exactly from the tiles.

        Cells that tiled zero padding are dropped.
        """
        tiles = self.windows if windows is None else windows
        channels, height, width = self.original_shape
        out = np.zeros((channels, height, width))
        for idx in range(tiles.shape[0]):
            rows, cols = self.source_rows[idx], self.source_cols[idx]
            valid = (rows < height) & (cols < width)
            out[:, rows[valid], cols[valid]] = tiles[idx][:, valid]
        return out


def window_partition_shift(
    feature_map: FeatureMap | np.ndarray, cfg: WindowConfig, shifted: bool
) -> WindowPartition:
    """Tile a map into disjoint M x M windows, optionally cyclically shifted.

    The shifted variant rolls the map by (shift, shift) before tiling, so a
    pixel at (r, c) lands in the tile whose unshifted footprint contains
    (r + shift, c + shift).  Extents not divisible by M are zero-padded
    first; ``restore`` crops back to the original extents.
    """
    values = feature_map.values.values if isinstance(feature_map, FeatureMap) else np.asarray(feature_map)
    if values.ndim != 3:
        raise DimensionError(f"window partition expects (C, H, W), got {values.shape}")
    channels, height, width = values.shape
    m = cfg.size
    pad_h = (-height) % m
    pad_w = (-width) % m
    rows = np.arange(height + pad_h)
    cols = np.arange(width + pad_w)
    padded = np.pad(values, ((0, 0), (0, pad_h), (0, pad_w)))
    if shifted:
        s = cfg.shift
        padded = np.roll(padded, (s, s), axis=(1, 2))
        rows = np.roll(rows, s)
        cols = np.roll(cols, s)
    n_h = padded.shape[1] // m
    n_w = padded.shape[2] // m
    tiles = (
        padded.reshape(channels, n_h, m, n_w, m)
        .transpose(1, 3, 0, 2, 4)
        .reshape(n_h * n_w, channels, m, m)
    )
    row_grid = rows.reshape(n_h, m)
    col_grid = cols.reshape(n_w, m)
    source_rows = np.broadcast_to(
        row_grid[:, None, :, None], (n_h, n_w, m, m)
    ).reshape(-1, m, m)
    source_cols = np.broadcast_to(
        col_grid[None, :, None, :], (n_h, n_w, m, m)
    ).reshape(-1, m, m)
    return WindowPartition(
        windows=np.ascontiguousarray(tiles),
        source_rows=np.ascontiguousarray(source_rows),
        source_cols=np.ascontiguousarray(source_cols),
        original_shape=(channels, height, width),
    )


def _window_tokens(x: DiffArray, m: int, shift: int) -> DiffArray:
    """Differentiable (B, C, H, W) -> (B*nH*nW, M*M, C) tiling."""
    batch, channels, height, width = x.shape
    if shift:
        x = t.roll(x, (shift, shift), axes=(2, 3))
    n_h, n_w = height // m, width // m
    x = t.reshape(x, (batch, channels, n_h, m, n_w, m))
    x = t.transpose(x, (0, 2, 4, 3, 5, 1))
    return t.reshape(x, (batch * n_h * n_w, m * m, channels))


def _window_untokens(
    tokens: DiffArray, batch: int, channels: int, height: int, width: int, m: int, shift: int
) -> DiffArray:
    n_h, n_w = height // m, width // m
    x = t.reshape(tokens, (batch, n_h, n_w, m, m, channels))
    x = t.transpose(x, (0, 5, 1, 3, 2, 4))
    x = t.reshape(x, (batch, channels, height, width))
    if shift:
        x = t.roll(x, (-shift, -shift), axes=(2, 3))
    return x


# -- building blocks -----------------------------------------------------------


def layer_norm(x: DiffArray, gamma: DiffArray, beta: DiffArray) -> DiffArray:
    """Normalize over the last axis, then apply a learned affine map."""
    mu = t.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = t.mean(t.multiply(centered, centered), axis=-1, keepdims=True)
    inv = t.power(t.add_scalar(var, LAYER_NORM_EPS), -0.5)
    return t.add(t.multiply(t.multiply(centered, inv), gamma), beta)


class AttentionBlock:
    """Pre-norm multi-head self-attention with a pointwise feed-forward.

    Scaled dot-product attention with scale 1/sqrt(dim/heads); residual
    connections around both sublayers keep small-scale training stable.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, prefix: str):
        if dim % heads != 0:
            raise ConfigError(f"attention dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.scale = 1.0 / np.sqrt(dim / heads)
        hidden = 2 * dim
        self.params: OrderedDict[str, DiffArray] = OrderedDict()

        def mat(name, rows, cols, fan_in):
            self.params[f"{prefix}/{name}"] = t.uniform_init((rows, cols), fan_in, rng)

        def vec(name, size, value=0.0):
            self.params[f"{prefix}/{name}"] = DiffArray(
                np.full(size, value), requires_grad=True
            )

        vec("ln1/gamma", dim, 1.0)
        vec("ln1/beta", dim)
        for name in ("wq", "wk", "wv", "wo"):
            mat(name, dim, dim, dim)
            vec(name.replace("w", "b"), dim)
        vec("ln2/gamma", dim, 1.0)
        vec("ln2/beta", dim)
        mat("ffn/w1", dim, hidden, dim)
        vec("ffn/b1", hidden)
        mat("ffn/w2", hidden, dim, hidden)
        vec("ffn/b2", dim)
        self._prefix = prefix

    def _p(self, name: str) -> DiffArray:
        return self.params[f"{self._prefix}/{name}"]

    def _heads_split(self, x: DiffArray) -> DiffArray:
        n, tokens, _ = x.shape
        x = t.reshape(x, (n, tokens, self.heads, self.dim // self.heads))
        return t.transpose(x, (0, 2, 1, 3))

    def __call__(self, x: DiffArray) -> DiffArray:
        """Apply the block to token stacks shaped (N, T, dim)."""
        n, tokens, _ = x.shape
        normed = layer_norm(x, self._p("ln1/gamma"), self._p("ln1/beta"))
        q = self._heads_split(t.add(t.matmul(normed, self._p("wq")), self._p("bq")))
        k = self._heads_split(t.add(t.matmul(normed, self._p("wk")), self._p("bk")))
        v = self._heads_split(t.add(t.matmul(normed, self._p("wv")), self._p("bv")))
        logits = t.scale(t.matmul(q, t.transpose(k, (0, 1, 3, 2))), self.scale)
        attn = t.softmax_rows(logits)
        context = t.matmul(attn, v)
        context = t.reshape(t.transpose(context, (0, 2, 1, 3)), (n, tokens, self.dim))
        x = t.add(x, t.add(t.matmul(context, self._p("wo")), self._p("bo")))
        normed = layer_norm(x, self._p("ln2/gamma"), self._p("ln2/beta"))
        hidden = t.relu(t.add(t.matmul(normed, self._p("ffn/w1")), self._p("ffn/b1")))
        return t.add(x, t.add(t.matmul(hidden, self._p("ffn/w2")), self._p("ffn/b2")))

    def attention_weights(self, x: DiffArray) -> np.ndarray:
        """Attention matrix for inspection, shape (N, heads, T, T)."""
        normed = layer_norm(x, self._p("ln1/gamma"), self._p("ln1/beta"))
        q = self._heads_split(t.add(t.matmul(normed, self._p("wq")), self._p("bq")))
        k = self._heads_split(t.add(t.matmul(normed, self._p("wk")), self._p("bk")))
        logits = t.scale(t.matmul(q, t.transpose(k, (0, 1, 3, 2))), self.scale)
        return t.softmax_rows(logits).values


# -- branch configs ------------------------------------------------------------


@dataclass
class ConvBranchConfig:
    """Strided-conv branch: output channels and stride per stage, pool grid."""

    channels: tuple[int, ...] = (8, 16)
    strides: tuple[int, ...] = (2, 2)
    k_h: int = 2
    k_w: int = 2

    def __post_init__(self):
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ConfigError("channels and strides must be non-empty and equal length")


@dataclass
class WindowBranchConfig:
    """Window-attention branch: patch embed plus per-stage attention."""

    patch_size: int = 2
    channels: tuple[int, ...] = (8, 16)
    window: int = 4
    shift: int | None = None
    heads: int = 2
    k_h: int = 2
    k_w: int = 2

    def __post_init__(self):
        if not self.channels:
            raise ConfigError("window branch needs at least one stage")
        if self.shift is None:
            self.shift = self.window // 2

    @property
    def depth(self) -> int:
        return len(self.channels)


# -- branches -------------------------------------------------------------------


class SpatialConvBranch:
    """Localized spatial feature branch: strided conv + ReLU stages, then AAP."""

    branch_id = "LS"

    def __init__(
        self,
        cfg: ConvBranchConfig,
        in_channels: int,
        frame_size: int,
        rng: np.random.Generator,
        prefix: str | None = None,
    ):
        self.cfg = cfg
        self.in_channels = in_channels
        self.frame_size = frame_size
        self.params: OrderedDict[str, DiffArray] = OrderedDict()
        prefix = prefix or self.branch_id.lower()
        self._prefix = prefix
        size = frame_size
        prev = in_channels
        for i, (ch, stride) in enumerate(zip(cfg.channels, cfg.strides)):
            fan_in = prev * CONV_KERNEL * CONV_KERNEL
            self.params[f"{prefix}/conv{i}/w"] = t.uniform_init(
                (ch, prev, CONV_KERNEL, CONV_KERNEL), fan_in, rng
            )
            self.params[f"{prefix}/conv{i}/b"] = t.uniform_init((ch,), fan_in, rng)
            size = (size + 2 * CONV_PADDING - CONV_KERNEL) // stride + 1
            prev = ch
        self.map_size = size
        self.out_channels = prev
        if cfg.k_h > size or cfg.k_w > size:
            raise ConfigError(
                f"pool grid ({cfg.k_h}, {cfg.k_w}) exceeds final map extent {size}"
            )

    def feature_map_batch(self, x: DiffArray) -> DiffArray:
        """(B, C_in, H, W) -> (B, C_out, H', W') through the conv stages."""
        if x.shape[1:] != (self.in_channels, self.frame_size, self.frame_size):
            raise DimensionError(
                f"branch {self._prefix} configured for "
                f"({self.in_channels}, {self.frame_size}, {self.frame_size}) frames, "
                f"got {tuple(x.shape[1:])}"
            )
        for i, stride in enumerate(self.cfg.strides):
            x = t.conv2d(
                x,
                self.params[f"{self._prefix}/conv{i}/w"],
                bias=self.params[f"{self._prefix}/conv{i}/b"],
                stride=stride,
                padding=CONV_PADDING,
            )
            x = t.relu(x)
        return x

    def forward_batch(self, x: DiffArray) -> DiffArray:
        """(B, C_in, H, W) -> (B, k_h*k_w, C_out) pooled segment stacks."""
        fmap = self.feature_map_batch(x)
        pooled = t.adaptive_avg_pool(fmap, self.cfg.k_h, self.cfg.k_w)
        batch = x.shape[0]
        flat = t.reshape(pooled, (batch, self.out_channels, self.cfg.k_h * self.cfg.k_w))
        return t.transpose(flat, (0, 2, 1))

    def forward(self, frame: Frame) -> SegmentGrid:
        """Encode a single frame into its pooled segment grid."""
        x = DiffArray(frame.pixels[None])
        segments = t.reshape(
            self.forward_batch(x), (self.cfg.k_h * self.cfg.k_w, self.out_channels)
        )
        return SegmentGrid(
            segments=segments,
            channels=self.out_channels,
            grid=(self.cfg.k_h, self.cfg.k_w),
            strides=(self.map_size // self.cfg.k_h, self.map_size // self.cfg.k_w),
            branch_id=self.branch_id,
        )


class EmotionConvBranch(SpatialConvBranch):
    """Complementary emotion branch: conv stack plus expression-regression head.

    The regression head taps the first conv stage at a fine pooling grid;
    deeper, coarser features lose the mouth/eye geometry the expression
    value is rendered from.
    """

    branch_id = "CE"

    def __init__(self, cfg, in_channels, frame_size, rng, prefix=None):
        super().__init__(cfg, in_channels, frame_size, rng, prefix=prefix or "ce")
        stage0_size = (frame_size + 2 * CONV_PADDING - CONV_KERNEL) // cfg.strides[0] + 1
        self.expr_grid = min(EXPRESSION_POOL_GRID, stage0_size)
        expr_in = cfg.channels[0] * self.expr_grid**2
        # input normalization keeps the head trainable even when the conv
        # features drift in scale (a dead stage would otherwise freeze it)
        self.params[f"{self._prefix}/expr/ln_gamma"] = DiffArray(
            np.ones(expr_in), requires_grad=True
        )
        self.params[f"{self._prefix}/expr/ln_beta"] = DiffArray(
            np.zeros(expr_in), requires_grad=True
        )
        self.params[f"{self._prefix}/expr/w"] = t.uniform_init((expr_in, 1), expr_in, rng)
        self.params[f"{self._prefix}/expr/b"] = t.uniform_init((1,), expr_in, rng)

    def expression_batch(self, x: DiffArray) -> DiffArray:
        """Predicted expression value in (0, 1) per frame, shape (B,)."""
        batch = x.shape[0]
        stage0 = t.relu(
            t.conv2d(
                x,
                self.params[f"{self._prefix}/conv0/w"],
                bias=self.params[f"{self._prefix}/conv0/b"],
                stride=self.cfg.strides[0],
                padding=CONV_PADDING,
            )
        )
        pooled = t.adaptive_avg_pool(stage0, self.expr_grid, self.expr_grid)
        flat = layer_norm(
            t.reshape(pooled, (batch, -1)),
            self.params[f"{self._prefix}/expr/ln_gamma"],
            self.params[f"{self._prefix}/expr/ln_beta"],
        )
        logits = t.add(
            t.matmul(flat, self.params[f"{self._prefix}/expr/w"]),
            self.params[f"{self._prefix}/expr/b"],
        )
        return t.reshape(t.sigmoid(logits), (batch,))


class WindowAttentionBranch:
    """Multi-scale global context branch.

    A non-overlapping patch embedding is followed by ``depth`` window
    attention stages; even stages use plain tiling and odd stages use the
    cyclically shifted tiling, with 2x2 window merging (neighbor
    concatenation + linear reduction) between stages.
    """

    branch_id = "MG"

    def __init__(
        self,
        cfg: WindowBranchConfig,
        in_channels: int,
        frame_size: int,
        rng: np.random.Generator,
    ):
        self.cfg = cfg
        self.in_channels = in_channels
        self.frame_size = frame_size
        self.params: OrderedDict[str, DiffArray] = OrderedDict()
        prefix = "mg"
        if frame_size % cfg.patch_size:
            raise ConfigError(
                f"patch size {cfg.patch_size} must divide frame size {frame_size}"
            )
        fan_in = in_channels * cfg.patch_size**2
        self.params[f"{prefix}/patch/w"] = t.uniform_init(
            (cfg.channels[0], in_channels, cfg.patch_size, cfg.patch_size), fan_in, rng
        )
        self.params[f"{prefix}/patch/b"] = t.uniform_init((cfg.channels[0],), fan_in, rng)

        self.blocks: list[AttentionBlock] = []
        self.stage_sizes: list[int] = []
        size = frame_size // cfg.patch_size
        window = WindowConfig(size=cfg.window, shift=cfg.shift, heads=cfg.heads)
        self.window = window
        for stage, ch in enumerate(cfg.channels):
            if size % cfg.window:
                raise ConfigError(
                    f"stage {stage} token grid {size} is not divisible by window {cfg.window}"
                )
            self.stage_sizes.append(size)
            block = AttentionBlock(ch, cfg.heads, rng, f"{prefix}/stage{stage}")
            self.blocks.append(block)
            self.params.update(block.params)
            if stage + 1 < len(cfg.channels):
                merged_in = 4 * ch
                nxt = cfg.channels[stage + 1]
                self.params[f"{prefix}/merge{stage}/w"] = t.uniform_init(
                    (merged_in, nxt), merged_in, rng
                )
                self.params[f"{prefix}/merge{stage}/b"] = t.uniform_init((nxt,), merged_in, rng)
                if size % 2:
                    raise ConfigError(f"cannot merge odd token grid {size} at stage {stage}")
                size //= 2
        self.map_size = size
        self.out_channels = cfg.channels[-1]
        if cfg.k_h > size or cfg.k_w > size:
            raise ConfigError(
                f"pool grid ({cfg.k_h}, {cfg.k_w}) exceeds final token grid {size}"
            )
        self._prefix = prefix

    def feature_map_batch(self, x: DiffArray, depth: int | None = None) -> DiffArray:
        """(B, C_in, H, W) -> (B, C_out, H', W') token map after the stages.

        ``depth`` truncates the stack (used by isolation tests).
        """
        if x.shape[1:] != (self.in_channels, self.frame_size, self.frame_size):
            raise DimensionError(
                f"branch mg configured for "
                f"({self.in_channels}, {self.frame_size}, {self.frame_size}) frames, "
                f"got {tuple(x.shape[1:])}"
            )
        depth = len(self.blocks) if depth is None else depth
        batch = x.shape[0]
        x = t.conv2d(
            x,
            self.params[f"{self._prefix}/patch/w"],
            bias=self.params[f"{self._prefix}/patch/b"],
            stride=self.cfg.patch_size,
            padding=0,
        )
        for stage in range(depth):
            size = self.stage_sizes[stage]
            channels = self.cfg.channels[stage]
            shift = self.window.shift if stage % 2 else 0
            tokens = _window_tokens(x, self.window.size, shift)
            tokens = self.blocks[stage](tokens)
            x = _window_untokens(tokens, batch, channels, size, size, self.window.size, shift)
            if stage + 1 < depth:
                x = self._merge(x, stage)
        return x

    def _merge(self, x: DiffArray, stage: int) -> DiffArray:
        batch, channels, height, width = x.shape
        h2, w2 = height // 2, width // 2
        x = t.reshape(x, (batch, channels, h2, 2, w2, 2))
        x = t.transpose(x, (0, 3, 5, 1, 2, 4))
        x = t.reshape(x, (batch, 4 * channels, h2, w2))
        x = t.transpose(x, (0, 2, 3, 1))
        x = t.reshape(x, (batch * h2 * w2, 4 * channels))
        x = t.add(
            t.matmul(x, self.params[f"{self._prefix}/merge{stage}/w"]),
            self.params[f"{self._prefix}/merge{stage}/b"],
        )
        nxt = self.cfg.channels[stage + 1]
        x = t.reshape(x, (batch, h2, w2, nxt))
        return t.transpose(x, (0, 3, 1, 2))

    def forward_batch(self, x: DiffArray) -> DiffArray:
        fmap = self.feature_map_batch(x)
        pooled = t.adaptive_avg_pool(fmap, self.cfg.k_h, self.cfg.k_w)
        batch = x.shape[0]
        flat = t.reshape(pooled, (batch, self.out_channels, self.cfg.k_h * self.cfg.k_w))
        return t.transpose(flat, (0, 2, 1))

    def forward(self, frame: Frame) -> SegmentGrid:
        x = DiffArray(frame.pixels[None])
        segments = t.reshape(
            self.forward_batch(x), (self.cfg.k_h * self.cfg.k_w, self.out_channels)
        )
        return SegmentGrid(
            segments=segments,
            channels=self.out_channels,
            grid=(self.cfg.k_h, self.cfg.k_w),
            strides=(self.map_size // self.cfg.k_h, self.map_size // self.cfg.k_w),
            branch_id=self.branch_id,
        )


class SegmentAttentionPool:
    """Project segments to D dimensions, self-attend, and mean-pool.

    The mean over attended segments is the branch embedding; with a single
    segment the pooling is the identity on the attended token.
    """

    def __init__(
        self,
        branch_id: str,
        in_channels: int,
        embed_dim: int,
        heads: int,
        rng: np.random.Generator,
    ):
        if embed_dim % heads != 0:
            raise ConfigError(f"embed dim {embed_dim} not divisible by heads {heads}")
        self.branch_id = branch_id
        self.embed_dim = embed_dim
        prefix = f"segpool/{branch_id.lower()}"
        self.params: OrderedDict[str, DiffArray] = OrderedDict()
        self.params[f"{prefix}/proj/w"] = t.uniform_init((in_channels, embed_dim), in_channels, rng)
        self.params[f"{prefix}/proj/b"] = t.uniform_init((embed_dim,), in_channels, rng)
        self.block = AttentionBlock(embed_dim, heads, rng, f"{prefix}/attn")
        self.params.update(self.block.params)
        self._prefix = prefix

    def _projected(self, segments: DiffArray) -> DiffArray:
        return t.add(
            t.matmul(segments, self.params[f"{self._prefix}/proj/w"]),
            self.params[f"{self._prefix}/proj/b"],
        )

    def transformed_batch(self, segments: DiffArray) -> DiffArray:
        """Attended segment stacks, shape (B, S, D)."""
        return self.block(self._projected(segments))

    def attention_weights(self, segments: DiffArray) -> np.ndarray:
        """Segment-to-segment attention matrix, shape (B, heads, S, S)."""
        return self.block.attention_weights(self._projected(segments))

    def forward_batch(self, segments: DiffArray) -> DiffArray:
        """(B, S, C) segment stacks -> (B, D) pooled embeddings."""
        if segments.shape[1] < 1:
            raise InputError("segment grid is empty")
        return t.mean(self.transformed_batch(segments), axis=1)

    def forward(self, grid: SegmentGrid) -> BranchEmbedding:
        stacked = t.reshape(grid.segments, (1, *grid.segments.shape))
        vector = t.reshape(self.forward_batch(stacked), (self.embed_dim,))
        return BranchEmbedding(branch_id=grid.branch_id, vector=vector)
