"""Command-line entry points.

Subcommands: ``datagen``, ``train``, ``eval``, ``gradcheck``,
``export-embeddings``, ``report-params``.  Every command is deterministic
under fixed seed and flags, and every output file embeds the config
digest so downstream commands can refuse mismatched artifacts.

Exit codes: 0 ok, 2 config/validation, 3 data, 4 numeric,
5 artifact mismatch, 6 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from cbodd import datagen
from cbodd.config import RunConfig, variant_spec
from cbodd.errors import (
    ArtifactMismatchError,
    CboddError,
    ConfigError,
    DataError,
    InputError,
    LeakageError,
    NumericError,
    VerificationError,
)
from cbodd.evaluate import EvalReport, score_clips
from cbodd.model import DetectorModel
from cbodd.train import train_model, write_trace
from cbodd.verify import LOSS_TERMS, loss_grad_check, operator_grad_check

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_ARTIFACT = 5
EXIT_VERIFICATION = 6

CHECKPOINT_NAME = "checkpoint.cbodd"
TRACE_NAME = "loss_trace.csv"


def _exit_code(exc: CboddError) -> int:
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ArtifactMismatchError):
        return EXIT_ARTIFACT
    if isinstance(exc, VerificationError):
        return EXIT_VERIFICATION
    return EXIT_CONFIG  # config / validation / protocol violations


def cmd_datagen(args) -> int:
    clips = datagen.generate_corpus(
        seed=args.seed,
        n_clips=args.clips,
        n_frames=args.frames,
        size=args.size,
        domain_mix=args.domain,
    )
    digest = datagen.generation_digest(args.seed, args.clips, args.frames, args.size, args.domain)
    out = Path(args.out)
    try:
        datagen.save_corpus(clips, out, digest=digest)
    except OSError as exc:
        raise ConfigError(f"cannot write corpus to {out}: {exc}") from exc
    print(f"wrote {len(clips)} clips to {out} (digest={digest})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    corpus = datagen.load_corpus(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out / CHECKPOINT_NAME
    train_domains = ",".join(sorted(corpus.domains()))
    train_clips = ",".join(corpus.clip_ids)

    def sink(model: DetectorModel, epoch: int) -> None:
        model.save(
            checkpoint_path,
            extra_meta={
                "train_domains": train_domains,
                "train_clips": train_clips,
                "epoch": str(epoch),
            },
        )

    try:
        result = train_model(cfg, corpus, checkpoint_sink=sink, log=print)
    except NumericError:
        print(f"non-finite loss; last good checkpoint retained at {checkpoint_path}")
        raise
    write_trace(out / TRACE_NAME, result.trace, cfg.digest)
    print(f"trained {cfg.epochs} epochs; checkpoint at {checkpoint_path}")
    return EXIT_OK


def _load_model(path: str) -> tuple[DetectorModel, dict[str, str]]:
    model_path = Path(path)
    if model_path.is_dir():
        model_path = model_path / CHECKPOINT_NAME
    return DetectorModel.load(model_path)


def cmd_eval(args) -> int:
    model, meta = _load_model(args.model)
    variant = args.variant if args.variant is not None else "FULL"
    variant_spec(variant)
    if variant != model.cfg.variant:
        raise ArtifactMismatchError(
            f"checkpoint was trained as variant {model.cfg.variant!r}, "
            f"eval requested {variant!r}"
        )
    corpus = datagen.load_corpus(args.data)
    train_domains = set(meta.get("train_domains", "").split(",")) - {""}
    train_clips = set(meta.get("train_clips", "").split(",")) - {""}

    if args.protocol == "within":
        eligible = [
            cid
            for cid, clip in corpus.clips.items()
            if clip.domain in train_domains and cid not in train_clips
        ]
        if not eligible:
            raise ConfigError(
                "within protocol needs held-out clips from the training domain"
            )
    else:
        if len(corpus.domains()) < 2:
            raise ConfigError(
                f"cross protocol needs a multi-domain corpus, got {corpus.domains()}"
            )
        eligible = [
            cid
            for cid, clip in corpus.clips.items()
            if clip.domain not in train_domains
        ]
        if not eligible:
            raise ConfigError("cross protocol found no clips outside the training domains")
        overlap = set(eligible) & train_clips
        if overlap:
            raise LeakageError(f"test clips were used in training: {sorted(overlap)[:3]}")

    from cbodd.metrics import auc

    frame_scores, frame_labels, video_scores, video_labels, per_video = score_clips(
        model, corpus, eligible
    )
    report = EvalReport(
        protocol=args.protocol,
        frame_auc=auc(frame_scores, frame_labels),
        video_auc=auc(video_scores, video_labels),
        variant=variant,
        seed=model.cfg.seed,
        config_digest=model.cfg.digest,
        per_video=per_video,
    )
    report.write(args.report)
    print(
        f"{args.protocol} eval: frame_auc={report.frame_auc:.4f} "
        f"video_auc={report.video_auc:.4f} ({len(eligible)} clips)"
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from cbodd.ofdm import ortho_grad_check

    op_report = operator_grad_check(args.seed)
    ortho_report = ortho_grad_check(args.seed)
    loss_report = loss_grad_check(args.seed, corrupt_term=args.corrupt_term)
    worst_op = max(op_report.errors.values())
    print(f"operator suite: {len(op_report.errors)} ops, max_rel_error={worst_op:.3e}")
    print(f"projection suite: max_rel_error={ortho_report.max_rel_error:.3e}")
    for term in LOSS_TERMS:
        print(f"{term}: max_rel_error={loss_report.errors[term]:.3e}")
    failing = loss_report.failing + (["operators"] if not op_report.passed else [])
    if ortho_report.max_rel_error >= loss_report.tolerance:
        failing.append("projection_heads")
    if failing:
        raise VerificationError(
            f"gradient check exceeded tolerance {loss_report.tolerance} "
            f"for: {', '.join(failing)}"
        )
    print(f"all gradients within tolerance {loss_report.tolerance}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model, _ = _load_model(args.model)
    corpus = datagen.load_corpus(args.data)
    cfg = model.cfg
    width = max(cfg.shared_dim, cfg.disentangled_dim)
    header = ["clip_id", "frame", "branch", "component", "label", "domain"]
    header += [f"v_{i}" for i in range(width)]
    lines = [f"# digest={cfg.digest}", ",".join(header)]
    for clip_id in corpus.clip_ids:
        clip = corpus.clip(clip_id)
        vectors = model.pair_vectors(clip.pixel_stack())
        for branch_id, (shared, disentangled) in vectors.items():
            for frame_idx in range(clip.n_frames):
                for component, block in (
                    ("shared", shared),
                    ("disentangled", disentangled),
                ):
                    row = [clip_id, str(frame_idx), branch_id, component, clip.label, clip.domain]
                    row += [repr(v) for v in block[frame_idx]]
                    row += [""] * (width - block.shape[1])
                    lines.append(",".join(row))
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 2} embedding rows to {args.out}")
    return EXIT_OK


def cmd_report_params(args) -> int:
    cfg = RunConfig.from_file(args.config)
    model = DetectorModel(cfg)
    groups = model.parameter_count_by_module()
    total = 0
    for name in sorted(groups):
        print(f"{name:24s} {groups[name]:10d}")
        total += groups[name]
    print(f"{'total':24s} {total:10d}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbodd",
        description="Cross-branch orthogonal deepfake detector: synthetic corpus "
        "generation, training, evaluation, and verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clips", type=int, default=40)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--domain", choices=("A", "B", "both"), default="A")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a detector on a corpus")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint + trace")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a protocol")
    p.add_argument("--model", required=True, help="checkpoint file or training out dir")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--protocol", choices=("within", "cross"), required=True)
    p.add_argument("--report", required=True, help="output report JSON path")
    p.add_argument("--variant", default=None, help="ablation variant id (default FULL)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--corrupt-term",
        default=None,
        choices=LOSS_TERMS,
        help="negative control: corrupt this term's analytic gradient",
    )
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", help="dump disentangled feature vectors to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("report-params", help="parameter counts per module")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_report_params)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, LeakageError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CboddError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
