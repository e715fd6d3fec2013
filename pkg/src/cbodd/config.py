"""Run configuration: defaults, sectioned key=value files, stable digests.

The shipped defaults are the desk-scale profile (64-dim embeddings, 32x32
frames, 8 frames per clip) so everything trains on one core in minutes.
``paper_profile`` reflects the full-scale hyperparameters; it is provided
for completeness but is unverified at this repository's scale.

Configs serialize to a canonical sectioned ``key = value`` text; the
digest is a SHA-256 prefix of that canonical text, so formatting or key
order differences do not change it.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from cbodd.encoders import ConvBranchConfig, WindowBranchConfig
from cbodd.errors import ConfigError

DIGEST_LENGTH = 16

VARIANT_IDS = (
    "FULL",
    "BO-wo-MG-CE",
    "BO-wo-LS-CE",
    "BO-wo-LS-MG",
    "CBO-wo-LS",
    "CBO-wo-MG",
    "CBO-wo-CE",
    "MB-wo-BO-CBO",
    "MB-wo-CBO",
    "MB-wo-BO",
)


@dataclass(frozen=True)
class VariantSpec:
    """Effective architecture of an ablation variant.

    ``branches`` lists the active encoders; a disabled penalty zeroes the
    corresponding loss weight.  The cross penalty is vacuous (forced off)
    whenever fewer than two branches remain.
    """

    branches: tuple[str, ...]
    branch_penalty: bool
    cross_penalty: bool


_VARIANTS = {
    "FULL": VariantSpec(("LS", "MG", "CE"), True, True),
    "BO-wo-MG-CE": VariantSpec(("LS",), True, False),
    "BO-wo-LS-CE": VariantSpec(("MG",), True, False),
    "BO-wo-LS-MG": VariantSpec(("CE",), True, False),
    "CBO-wo-LS": VariantSpec(("MG", "CE"), True, True),
    "CBO-wo-MG": VariantSpec(("LS", "CE"), True, True),
    "CBO-wo-CE": VariantSpec(("LS", "MG"), True, True),
    "MB-wo-BO-CBO": VariantSpec(("LS", "MG", "CE"), False, False),
    "MB-wo-CBO": VariantSpec(("LS", "MG", "CE"), True, False),
    "MB-wo-BO": VariantSpec(("LS", "MG", "CE"), False, True),
}


def variant_spec(variant_id: str) -> VariantSpec:
    """Resolve an ablation variant id to its branch mask and penalty flags."""
    if variant_id not in _VARIANTS:
        raise ConfigError(f"unknown variant {variant_id!r}")
    return _VARIANTS[variant_id]


@dataclass
class RunConfig:
    """Every tunable of the pipeline, with desk-scale defaults."""

    # run
    seed: int = 0
    epochs: int = 20
    batch_size: int = 16
    variant: str = "FULL"
    # model
    embed_dim: int = 64
    shared_dim: int = 8
    disentangled_dim: int = 16
    attention_heads: int = 4
    head_sharing: str = "shared"
    center_features: bool = False
    cross_mode: str = "gram"
    # loss
    lambda_branch: float = 0.4
    lambda_cross: float = 0.25
    expression_weight: float = 0.1
    # optimizer (desk-scale learning rate; paper_profile restores 1e-2)
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    step_size: int = 5
    decay_factor: float = 0.5
    # detector
    threshold: float = 0.5
    tie_rule: str = "fake"
    video_score: str = "mean_confidence"
    # data
    frame_size: int = 32
    frames_per_clip: int = 8
    eval_frame_stride: int = 1
    train_fraction: float = 0.8
    # branches
    ls: ConvBranchConfig = field(default_factory=ConvBranchConfig)
    ce: ConvBranchConfig = field(default_factory=ConvBranchConfig)
    mg: WindowBranchConfig = field(default_factory=WindowBranchConfig)

    def validate(self) -> None:
        if self.variant not in VARIANT_IDS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.embed_dim % self.attention_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be divisible by attention_heads "
                f"{self.attention_heads}"
            )
        if self.head_sharing not in ("shared", "per-branch"):
            raise ConfigError(f"head_sharing must be shared or per-branch, got {self.head_sharing!r}")
        if self.cross_mode not in ("gram", "per-sample"):
            raise ConfigError(f"cross_mode must be gram or per-sample, got {self.cross_mode!r}")
        if self.tie_rule not in ("fake", "real"):
            raise ConfigError(f"tie_rule must be fake or real, got {self.tie_rule!r}")
        if self.video_score not in ("mean_confidence", "vote_fraction"):
            raise ConfigError(
                f"video_score must be mean_confidence or vote_fraction, got {self.video_score!r}"
            )
        if self.lambda_branch < 0 or self.lambda_cross < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.epochs < 1 or self.batch_size < 1 or self.frames_per_clip < 1:
            raise ConfigError("epochs, batch_size and frames_per_clip must be positive")
        if self.frame_size < 16:
            raise ConfigError(f"frame_size must be >= 16, got {self.frame_size}")
        if self.eval_frame_stride < 1:
            raise ConfigError(f"eval_frame_stride must be >= 1, got {self.eval_frame_stride}")

    # -- serialization ----------------------------------------------------

    def to_text(self) -> str:
        """Canonical sectioned key = value rendering (digest input)."""
        out = io.StringIO()

        def section(name: str, items: dict) -> None:
            out.write(f"[{name}]\n")
            for key, value in items.items():
                out.write(f"{key} = {_render(value)}\n")
            out.write("\n")

        section(
            "run",
            {
                "seed": self.seed,
                "epochs": self.epochs,
                "batch_size": self.batch_size,
                "variant": self.variant,
            },
        )
        section(
            "model",
            {
                "embed_dim": self.embed_dim,
                "shared_dim": self.shared_dim,
                "disentangled_dim": self.disentangled_dim,
                "attention_heads": self.attention_heads,
                "head_sharing": self.head_sharing,
                "center_features": self.center_features,
                "cross_mode": self.cross_mode,
            },
        )
        section(
            "loss",
            {
                "lambda_branch": self.lambda_branch,
                "lambda_cross": self.lambda_cross,
                "expression_weight": self.expression_weight,
            },
        )
        section(
            "optimizer",
            {
                "learning_rate": self.learning_rate,
                "weight_decay": self.weight_decay,
                "step_size": self.step_size,
                "decay_factor": self.decay_factor,
            },
        )
        section(
            "detector",
            {
                "threshold": self.threshold,
                "tie_rule": self.tie_rule,
                "video_score": self.video_score,
            },
        )
        section(
            "data",
            {
                "frame_size": self.frame_size,
                "frames_per_clip": self.frames_per_clip,
                "eval_frame_stride": self.eval_frame_stride,
                "train_fraction": self.train_fraction,
            },
        )
        section(
            "branch.ls",
            {
                "channels": self.ls.channels,
                "strides": self.ls.strides,
                "k_h": self.ls.k_h,
                "k_w": self.ls.k_w,
            },
        )
        section(
            "branch.mg",
            {
                "patch_size": self.mg.patch_size,
                "channels": self.mg.channels,
                "window": self.mg.window,
                "shift": self.mg.shift,
                "heads": self.mg.heads,
                "k_h": self.mg.k_h,
                "k_w": self.mg.k_w,
            },
        )
        section(
            "branch.ce",
            {
                "channels": self.ce.channels,
                "strides": self.ce.strides,
                "k_h": self.ce.k_h,
                "k_w": self.ce.k_w,
            },
        )
        return out.getvalue()

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:DIGEST_LENGTH]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        top: dict = {}
        branch_over: dict[str, dict] = {"ls": {}, "ce": {}, "mg": {}}
        setters = _setters()
        for section in parser.sections():
            for key, raw in parser.items(section):
                full = f"{section}.{key}"
                if full not in setters:
                    raise ConfigError(f"unknown config key {full!r}")
                setters[full](top, branch_over, raw)
        cfg = cls()
        for attr, overrides in branch_over.items():
            if overrides:
                top[attr] = replace(getattr(cfg, attr), **overrides)
        cfg = replace(cfg, **top)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        return cls.from_text(text)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from exc


def _coerce(raw: str, kind):
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}") from exc


def _setters():
    """Map 'section.key' to a collector for the parsed value."""

    def top(name, kind):
        def apply(top_over, branch_over, raw):
            if kind is bool:
                top_over[name] = _parse_bool(raw)
            elif kind is str:
                top_over[name] = raw.strip()
            else:
                top_over[name] = _coerce(raw, kind)

        return apply

    def branch(attr, name, kind):
        def apply(top_over, branch_over, raw):
            if kind is tuple:
                branch_over[attr][name] = _parse_int_tuple(raw)
            else:
                branch_over[attr][name] = _coerce(raw, kind)

        return apply

    mapping = {
        "run.seed": top("seed", int),
        "run.epochs": top("epochs", int),
        "run.batch_size": top("batch_size", int),
        "run.variant": top("variant", str),
        "model.embed_dim": top("embed_dim", int),
        "model.shared_dim": top("shared_dim", int),
        "model.disentangled_dim": top("disentangled_dim", int),
        "model.attention_heads": top("attention_heads", int),
        "model.head_sharing": top("head_sharing", str),
        "model.center_features": top("center_features", bool),
        "model.cross_mode": top("cross_mode", str),
        "loss.lambda_branch": top("lambda_branch", float),
        "loss.lambda_cross": top("lambda_cross", float),
        "loss.expression_weight": top("expression_weight", float),
        "optimizer.learning_rate": top("learning_rate", float),
        "optimizer.weight_decay": top("weight_decay", float),
        "optimizer.step_size": top("step_size", int),
        "optimizer.decay_factor": top("decay_factor", float),
        "detector.threshold": top("threshold", float),
        "detector.tie_rule": top("tie_rule", str),
        "detector.video_score": top("video_score", str),
        "data.frame_size": top("frame_size", int),
        "data.frames_per_clip": top("frames_per_clip", int),
        "data.eval_frame_stride": top("eval_frame_stride", int),
        "data.train_fraction": top("train_fraction", float),
    }
    for attr in ("ls", "ce"):
        mapping[f"branch.{attr}.channels"] = branch(attr, "channels", tuple)
        mapping[f"branch.{attr}.strides"] = branch(attr, "strides", tuple)
        mapping[f"branch.{attr}.k_h"] = branch(attr, "k_h", int)
        mapping[f"branch.{attr}.k_w"] = branch(attr, "k_w", int)
    for key, kind in (
        ("patch_size", int),
        ("channels", tuple),
        ("window", int),
        ("shift", int),
        ("heads", int),
        ("k_h", int),
        ("k_w", int),
    ):
        mapping[f"branch.mg.{key}"] = branch("mg", key, kind)
    return mapping


def desk_profile(**overrides) -> RunConfig:
    """The shipped default configuration."""
    cfg = replace(RunConfig(), **overrides)
    cfg.validate()
    return cfg


def paper_profile(**overrides) -> RunConfig:
    """Full-scale hyperparameters (2048-dim embeddings, 100 epochs).

    Unverified at this repository's scale; training it requires real
    compute and data.
    """
    cfg = RunConfig(
        epochs=100,
        learning_rate=1e-2,
        embed_dim=2048,
        shared_dim=128,
        disentangled_dim=512,
        attention_heads=8,
        frame_size=224,
        frames_per_clip=16,
        ls=ConvBranchConfig(channels=(32, 64, 128), strides=(2, 2, 2), k_h=4, k_w=4),
        ce=ConvBranchConfig(channels=(32, 64, 128), strides=(2, 2, 2), k_h=4, k_w=4),
        mg=WindowBranchConfig(
            patch_size=4, channels=(48, 96, 192), window=7, heads=4, k_h=4, k_w=4
        ),
    )
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg
