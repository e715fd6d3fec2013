"""Synthetic two-domain face corpus.

Real clips are procedural face-like patterns: a smooth shaded background,
an elliptical face region, two eye blobs whose openness tracks the
expression, and a mouth arc whose curvature *is* the expression value,
with mild per-frame jitter everywhere.

Fake clips start from a real base and add exactly one artifact family:

* family ``A`` (domain A) -- a blended rectangular patch with a uniform
  color shift and a soft seam; a low-frequency cue that also shifts the
  local mean.
* family ``B`` (domain B) -- a zero-mean checkerboard overlay confined to
  a facial sub-region, plus a mouth expression re-rendered inconsistently
  with the eyes from frame to frame; a high-frequency cue with no mean
  shift.

Generation is a pure function of (seed, parameters): per-clip RNG streams
are spawned from one seed sequence, so re-runs are bit-identical and
clips are independent of corpus size ordering.

On disk a corpus is one directory per clip holding binary PPM (P6) frames
plus a top-level ``manifest.csv`` with columns
``clip_id,label,domain,T,expression_mean``.  A per-clip ``expression.csv``
also stores the per-frame expression values so reloaded corpora keep
their frame-level labels.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cbodd.encoders import Frame
from cbodd.errors import ConfigError, DataError

CHANNELS = 3
MIN_SIZE = 16

LABELS = ("real", "fake")
DOMAINS = ("A", "B")

# family A seam width: blend transitions over max(SEAM_MIN_PX, size/SEAM_DIV)
SEAM_MIN_PX = 2.0
SEAM_DIV = 16.0
# family B overlay: "clip" adds +-strength and clips to [0, 1]; "headroom"
# limits the amplitude to the per-pixel headroom so nothing clips
B_OVERLAY_MODE = "clip"
B_RANDOM_PARITY = False


@dataclass
class ArtifactDescriptor:
    """What was injected into a fake clip: family, region box, strength."""

    family: str
    region: tuple[int, int, int, int]  # (row0, row1, col0, col1), half-open
    strength: float


@dataclass
class SyntheticClip:
    """One clip: T frames, a label, a domain, per-frame expression values."""

    clip_id: str
    frames: list[Frame]
    label: str
    domain: str
    expression: np.ndarray
    artifact: ArtifactDescriptor | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ConfigError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if len(self.frames) < 1:
            raise ConfigError("a clip needs at least one frame")
        if (self.label == "fake") != (self.artifact is not None):
            raise ConfigError("fake clips carry exactly one artifact; real clips none")
        if self.artifact is not None and self.artifact.family != self.domain:
            raise ConfigError(
                f"artifact family {self.artifact.family!r} does not match domain "
                f"{self.domain!r}"
            )

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def pixel_stack(self) -> np.ndarray:
        """All frames stacked to (T, C, H, W)."""
        return np.stack([f.pixels for f in self.frames])


# -- face rendering ------------------------------------------------------------


@dataclass
class _FaceSketch:
    """Per-clip geometry and palette drawn once, jittered per frame."""

    base_color: np.ndarray
    grad: np.ndarray
    eye_y: float
    eye_dx: float
    eye_radius: float
    mouth_y: float
    mouth_halfwidth: float
    face_radii: tuple[float, float]


def _draw_sketch(rng: np.random.Generator) -> _FaceSketch:
    return _FaceSketch(
        base_color=np.array(
            [rng.uniform(0.55, 0.72), rng.uniform(0.45, 0.60), rng.uniform(0.38, 0.52)]
        ),
        grad=rng.uniform(-0.08, 0.08, size=(CHANNELS, 2)),
        eye_y=rng.uniform(0.34, 0.42),
        eye_dx=rng.uniform(0.13, 0.18),
        eye_radius=rng.uniform(0.05, 0.07),
        mouth_y=rng.uniform(0.64, 0.72),
        mouth_halfwidth=rng.uniform(0.14, 0.20),
        face_radii=(rng.uniform(0.36, 0.42), rng.uniform(0.30, 0.36)),
    )


def _render_face(
    size: int,
    sketch: _FaceSketch,
    mouth_expression: float,
    eye_expression: float,
    jitter: np.ndarray,
    noise: np.ndarray,
) -> np.ndarray:
    """Render one (C, size, size) frame in [0, 1]."""
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.empty((CHANNELS, size, size))
    for c in range(CHANNELS):
        img[c] = sketch.base_color[c] + sketch.grad[c, 0] * ys + sketch.grad[c, 1] * xs

    # face ellipse: slightly brighter interior with a soft edge
    ry, rx = sketch.face_radii
    dist = ((ys - 0.5) / ry) ** 2 + ((xs - 0.5) / rx) ** 2
    face = np.clip(1.0 - dist, 0.0, 1.0)
    img += 0.10 * face[None]

    # eyes: dark blobs; vertical extent narrows as the expression rises
    eye_open = 1.15 - 0.7 * eye_expression
    for side in (-1.0, 1.0):
        cx = 0.5 + side * sketch.eye_dx + jitter[0]
        cy = sketch.eye_y + jitter[1]
        d2 = ((ys - cy) / (sketch.eye_radius * eye_open)) ** 2 + (
            (xs - cx) / sketch.eye_radius
        ) ** 2
        img -= 0.45 * np.exp(-d2)[None]

    # mouth: dark arc, curvature mapped from the expression value
    curvature = 2.0 * (mouth_expression - 0.5)
    cx = 0.5 + jitter[2]
    cy = sketch.mouth_y + jitter[3]
    rel = (xs - cx) / sketch.mouth_halfwidth
    in_span = np.abs(rel) <= 1.0
    arc_y = cy - curvature * 0.06 * (rel**2 - 0.5)
    row_dist = np.where(in_span, (ys - arc_y) * size, np.inf)
    img -= 0.40 * np.exp(-0.5 * (row_dist / 0.9) ** 2)[None]

    img += noise
    return np.clip(img, 0.0, 1.0)


def _smooth_rect_mask(size: int, region: tuple[int, int, int, int], margin: float) -> np.ndarray:
    """1 inside the box, cosine falloff over ``margin`` pixels, 0 beyond it."""
    r0, r1, c0, c1 = region
    rows = np.arange(size)
    cols = np.arange(size)
    row_dist = np.maximum(r0 - rows, rows - (r1 - 1)).clip(min=0)
    col_dist = np.maximum(c0 - cols, cols - (c1 - 1)).clip(min=0)
    dist = np.maximum(row_dist[:, None], col_dist[None, :]).astype(np.float64)
    mask = np.clip(1.0 - dist / margin, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * mask)


@dataclass
class _RenderedClip:
    base: np.ndarray  # (T, C, S, S) artifact-free frames
    frames: np.ndarray  # (T, C, S, S) final frames
    expression: np.ndarray  # (T,) rendered mouth expression
    artifact: ArtifactDescriptor | None


def render_clip(
    rng: np.random.Generator,
    n_frames: int,
    size: int,
    fake: bool,
    domain: str,
) -> _RenderedClip:
    """Render one clip; fake clips also return their artifact-free base."""
    sketch = _draw_sketch(rng)
    start = rng.uniform(0.05, 0.95)
    steps = rng.uniform(-0.03, 0.03, size=n_frames)
    expression = np.clip(start + np.cumsum(steps), 0.02, 0.98)
    jitters = rng.uniform(-0.012, 0.012, size=(n_frames, 4))
    noise = rng.normal(0.0, 0.02, size=(n_frames, CHANNELS, size, size))

    mouth_expr = expression.copy()
    artifact = None
    patch = None
    if fake and domain == "A":
        extent = int(round(size * rng.uniform(0.28, 0.40)))
        r0 = int(round(size * rng.uniform(0.22, 0.55)))
        c0 = int(round(size * rng.uniform(0.22, 0.55)))
        r1, c1 = min(r0 + extent, size - 1), min(c0 + extent, size - 1)
        margin = max(SEAM_MIN_PX, size / SEAM_DIV)
        strength = rng.uniform(0.10, 0.16)
        mask = _smooth_rect_mask(size, (r0, r1, c0, c1), margin)
        shift = strength * np.array([1.0, 0.30, 0.20])
        patch = mask[None] * shift[:, None, None]
        pad = int(np.ceil(margin))
        support = (max(r0 - pad, 0), min(r1 + pad, size), max(c0 - pad, 0), min(c1 + pad, size))
        artifact = ArtifactDescriptor(family="A", region=support, strength=strength)
    elif fake and domain == "B":
        r0 = int(round(size * rng.uniform(0.45, 0.55)))
        c0 = int(round(size * rng.uniform(0.22, 0.32)))
        r1 = min(r0 + int(round(size * 0.35)), size)
        c1 = min(c0 + int(round(size * 0.42)), size)
        strength = rng.uniform(0.10, 0.16)
        mask = _smooth_rect_mask(size, (r0, r1, c0, c1), max(2.0, size / 16.0))
        rows, cols = np.indices((size, size))
        parity = int(rng.integers(0, 2)) if B_RANDOM_PARITY else 0
        checker = np.where((rows + cols) % 2 == parity, 1.0, -1.0)
        patch = (mask * checker)[None]
        mouth_expr = np.clip(
            expression + rng.uniform(-0.45, 0.45, size=n_frames), 0.02, 0.98
        )
        artifact = ArtifactDescriptor(family="B", region=(r0, r1, c0, c1), strength=strength)

    base = np.empty((n_frames, CHANNELS, size, size))
    frames = np.empty_like(base)
    for i in range(n_frames):
        base[i] = _render_face(size, sketch, expression[i], expression[i], jitters[i], noise[i])
        if not fake:
            frames[i] = base[i]
        elif domain == "A":
            frames[i] = np.clip(base[i] + patch, 0.0, 1.0)
        else:
            rendered = _render_face(
                size, sketch, mouth_expr[i], expression[i], jitters[i], noise[i]
            )
            if B_OVERLAY_MODE == "clip":
                frames[i] = np.clip(rendered + patch * strength, 0.0, 1.0)
            else:
                # amplitude limited by per-pixel headroom: strictly
                # high-frequency, no clipping-induced mean shift
                amplitude = np.minimum(strength, np.minimum(rendered, 1.0 - rendered))
                frames[i] = rendered + patch * amplitude
    return _RenderedClip(base=base, frames=frames, expression=mouth_expr, artifact=artifact)


# -- corpus generation -----------------------------------------------------------


def generate_corpus(
    seed: int,
    n_clips: int,
    n_frames: int = 8,
    size: int = 32,
    domain_mix: str = "A",
) -> list[SyntheticClip]:
    """Deterministically generate clips; half fake, half real per domain."""
    if size < MIN_SIZE:
        raise ConfigError(f"frame size must be >= {MIN_SIZE}, got {size}")
    if n_clips < 2:
        raise ConfigError(f"need at least 2 clips (both labels), got {n_clips}")
    if n_frames < 1:
        raise ConfigError(f"need at least 1 frame per clip, got {n_frames}")
    if domain_mix not in ("A", "B", "both"):
        raise ConfigError(f"domain_mix must be A, B or both, got {domain_mix!r}")

    streams = np.random.SeedSequence(seed).spawn(n_clips)
    clips: list[SyntheticClip] = []
    for idx, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        if domain_mix == "both":
            domain = DOMAINS[idx % 2]
            fake = (idx // 2) % 2 == 0
        else:
            domain = domain_mix
            fake = idx % 2 == 0
        rendered = render_clip(rng, n_frames, size, fake, domain)
        label = "fake" if fake else "real"
        # the seed tag keeps ids disjoint across separately generated corpora
        clip_id = f"{domain}{seed:04d}-{idx:04d}-{label}"
        frames = [
            Frame(pixels=rendered.frames[i], frame_index=i, clip_id=clip_id)
            for i in range(n_frames)
        ]
        clips.append(
            SyntheticClip(
                clip_id=clip_id,
                frames=frames,
                label=label,
                domain=domain,
                expression=rendered.expression,
                artifact=rendered.artifact,
            )
        )
    return clips


def generation_digest(seed: int, n_clips: int, n_frames: int, size: int, domain_mix: str) -> str:
    """Stable digest of the generation parameters, embedded in the manifest."""
    text = f"clips={n_clips} domain={domain_mix} frames={n_frames} seed={seed} size={size}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- corpus container -------------------------------------------------------------


@dataclass
class Corpus:
    """Clip collection with an access log for leakage audits."""

    clips: dict[str, SyntheticClip]
    digest: str = ""
    access_log: list[str] = field(default_factory=list)

    @classmethod
    def from_clips(cls, clips: list[SyntheticClip], digest: str = "") -> "Corpus":
        return cls(clips={c.clip_id: c for c in clips}, digest=digest)

    @property
    def clip_ids(self) -> list[str]:
        return list(self.clips)

    def domains(self) -> set[str]:
        return {c.domain for c in self.clips.values()}

    def clip(self, clip_id: str) -> SyntheticClip:
        """Fetch one clip, recording the access."""
        if clip_id not in self.clips:
            raise DataError(f"clip {clip_id!r} not in corpus")
        self.access_log.append(clip_id)
        return self.clips[clip_id]

    def subset(self, clip_ids: list[str]) -> "Corpus":
        return Corpus(clips={cid: self.clips[cid] for cid in clip_ids}, digest=self.digest)

    def reset_log(self) -> None:
        self.access_log.clear()


# -- PPM and manifest I/O -----------------------------------------------------------


def write_ppm(path: Path, pixels: np.ndarray) -> None:
    """Write a (3, H, W) float frame in [0, 1] as binary 8-bit PPM (P6)."""
    channels, height, width = pixels.shape
    if channels != CHANNELS:
        raise DataError(f"PPM frames need {CHANNELS} channels, got {channels}")
    scaled = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    interleaved = scaled.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(interleaved)


def read_ppm(path: Path) -> np.ndarray:
    """Read a binary P6 PPM back to (3, H, W) floats in [0, 1]."""
    blob = Path(path).read_bytes()
    try:
        fields = []
        offset = 0
        while len(fields) < 4:
            while offset < len(blob) and blob[offset : offset + 1].isspace():
                offset += 1
            if blob[offset : offset + 1] == b"#":
                while offset < len(blob) and blob[offset] != 0x0A:
                    offset += 1
                continue
            start = offset
            while offset < len(blob) and not blob[offset : offset + 1].isspace():
                offset += 1
            fields.append(blob[start:offset])
        offset += 1  # single whitespace after maxval
        magic, width, height, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
        if magic != b"P6" or maxval != 255:
            raise DataError(f"{path} is not an 8-bit P6 PPM")
        data = np.frombuffer(blob, dtype=np.uint8, count=width * height * 3, offset=offset)
        return data.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    except (ValueError, IndexError) as exc:
        raise DataError(f"cannot parse PPM {path}: {exc}") from exc


def save_corpus(clips: list[SyntheticClip], out_dir: str | Path, digest: str = "") -> None:
    """Write clip directories plus the manifest under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        if digest:
            fh.write(f"# digest={digest}\n")
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "label", "domain", "T", "expression_mean"])
        for clip in clips:
            writer.writerow(
                [
                    clip.clip_id,
                    clip.label,
                    clip.domain,
                    clip.n_frames,
                    repr(float(clip.expression.mean())),
                ]
            )
    for clip in clips:
        clip_dir = out / clip.clip_id
        clip_dir.mkdir(exist_ok=True)
        for frame in clip.frames:
            write_ppm(clip_dir / f"frame_{frame.frame_index:03d}.ppm", frame.pixels)
        with open(clip_dir / "expression.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "expression"])
            for i, value in enumerate(clip.expression):
                writer.writerow([i, repr(float(value))])


def load_corpus(data_dir: str | Path) -> Corpus:
    """Load a corpus directory written by :func:`save_corpus`."""
    root = Path(data_dir)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no manifest.csv under {root}")
    digest = ""
    rows = []
    with open(manifest, newline="") as fh:
        first = fh.readline()
        if first.startswith("# digest="):
            digest = first.strip().split("=", 1)[1]
        else:
            fh.seek(0)
        reader = csv.DictReader(fh)
        try:
            for row in reader:
                rows.append(row)
        except csv.Error as exc:
            raise DataError(f"malformed manifest {manifest}: {exc}") from exc
    if not rows:
        raise DataError(f"manifest {manifest} lists no clips")

    clips = []
    for row in rows:
        try:
            clip_id = row["clip_id"]
            label = row["label"]
            domain = row["domain"]
            n_frames = int(row["T"])
            expression_mean = float(row["expression_mean"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest row {row!r}: {exc}") from exc
        clip_dir = root / clip_id
        frames = []
        for i in range(n_frames):
            frame_path = clip_dir / f"frame_{i:03d}.ppm"
            if not frame_path.exists():
                raise DataError(f"missing frame {frame_path}")
            frames.append(Frame(pixels=read_ppm(frame_path), frame_index=i, clip_id=clip_id))
        expression = np.full(n_frames, expression_mean)
        expr_path = clip_dir / "expression.csv"
        if expr_path.exists():
            with open(expr_path, newline="") as fh:
                reader = csv.DictReader(fh)
                values = {int(r["frame"]): float(r["expression"]) for r in reader}
            expression = np.array([values[i] for i in range(n_frames)])
        # reloaded fakes keep a placeholder descriptor: exact region/strength
        # are generation-time facts not stored in the interchange format
        artifact = (
            ArtifactDescriptor(family=domain, region=(0, 0, 0, 0), strength=0.0)
            if label == "fake"
            else None
        )
        clips.append(
            SyntheticClip(
                clip_id=clip_id,
                frames=frames,
                label=label,
                domain=domain,
                expression=expression,
                artifact=artifact,
            )
        )
    return Corpus.from_clips(clips, digest=digest)
