"""Command-line entry point.

Subcommands: gen-data, train, infer, eval, check, export-embeddings.
Exit codes: 0 success, 1 validation error (bad flags, malformed files,
failed checks), 2 internal error. Outputs are written atomically; `--seed`
touches only stochastic stages, `eval` is seed-free.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from .data import (
    Dataset,
    RunConfig,
    SyntheticSpec,
    atomic_write_bytes,
    generate_synthetic,
    parse_override,
    read_config,
    read_dataset,
    write_dataset,
)
from .errors import ConfigError, FormatError, HyptasError
from .metrics import evaluate_videos
from .trainer import infer_video, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)


def _add_set_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def _resolve_config(args) -> RunConfig:
    overrides = dict(parse_override(item) for item in args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["infer_steps"] = args.steps
    if args.config:
        return read_config(args.config, overrides=overrides)
    try:
        return RunConfig(**overrides)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyptas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    gen.add_argument("--out", required=True, help="target dataset directory")
    gen.add_argument("--videos", type=int, default=SyntheticSpec.videos)
    gen.add_argument("--tasks", type=int, default=SyntheticSpec.num_tasks)
    gen.add_argument("--actions-per-task", type=int, default=SyntheticSpec.actions_per_task)
    gen.add_argument("--shared-actions", type=int, default=SyntheticSpec.shared_actions)
    gen.add_argument("--feature-dim", type=int, default=SyntheticSpec.feature_dim)
    gen.add_argument("--noise", type=float, default=SyntheticSpec.feature_noise)
    gen.add_argument("--smoothing", type=int, default=SyntheticSpec.smoothing_halfwidth)
    gen.add_argument("--frames", type=int, nargs=2, default=list(SyntheticSpec.frames_per_segment),
                     metavar=("LO", "HI"))
    gen.add_argument("--segments", type=int, nargs=2, default=list(SyntheticSpec.segments_per_video),
                     metavar=("LO", "HI"))
    gen.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", help="train on a dataset directory, write a checkpoint")
    tr.add_argument("--config", help="key = value config file")
    tr.add_argument("--data", required=True, help="dataset directory from gen-data")
    tr.add_argument("--out", required=True, help="checkpoint path to write")
    tr.add_argument("--log", help="training log path (default: <out>.log)")
    tr.add_argument("--seed", type=int)
    _add_set_flag(tr)

    inf = sub.add_parser("infer", help="write predicted label files for a split")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--data", required=True, help="dataset directory")
    inf.add_argument("--split", choices=("train", "test"), default="test")
    inf.add_argument("--out", required=True, help="directory for predicted label files")
    inf.add_argument("--steps", type=int)
    inf.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="compare prediction and ground-truth label directories")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)

    chk = sub.add_parser("check", help="run the geometry/gradient/sampler/metric property suites")
    chk.add_argument("--seed", type=int, default=0)

    exp = sub.add_parser("export-embeddings", help="write ball coordinates + labels as CSV")
    exp.add_argument("--ckpt", required=True)
    exp.add_argument("--data", required=True)
    exp.add_argument("--split", choices=("train", "test"), default="test")
    exp.add_argument("--out", required=True, help="CSV path")
    exp.add_argument("--steps", type=int)
    exp.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        num_tasks=args.tasks,
        actions_per_task=args.actions_per_task,
        shared_actions=args.shared_actions,
        feature_dim=args.feature_dim,
        frames_per_segment=tuple(args.frames),
        segments_per_video=tuple(args.segments),
        feature_noise=args.noise,
        smoothing_halfwidth=args.smoothing,
        videos=args.videos,
        seed=args.seed,
    )
    dataset = generate_synthetic(spec)
    write_dataset(dataset, args.out)
    print(
        f"wrote {len(dataset.train)} train / {len(dataset.test)} test videos, "
        f"{dataset.num_classes} classes -> {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    dataset = read_dataset(args.data)
    state, log = train(dataset, config)
    save_checkpoint(state, args.out)
    log_path = args.log or (args.out + ".log")
    atomic_write_bytes(Path(log_path), ("\n".join(log.format_lines()) + "\n").encode("utf-8"))
    final = log.records[-1]
    print(f"checkpoint -> {args.out}")
    print(f"log -> {log_path}")
    print(final.format_line())
    return 0


def _split(dataset: Dataset, name: str) -> list:
    return dataset.train if name == "train" else dataset.test


def _validate_steps(steps: int | None, timesteps: int) -> None:
    if steps is not None and not 1 <= steps <= timesteps:
        raise ConfigError(f"--steps must lie in [1, {timesteps}], got {steps}")


def _cmd_infer(args) -> int:
    state = load_checkpoint(args.ckpt)
    _validate_steps(args.steps, state.schedule.T)
    dataset = read_dataset(args.data)
    from .data import write_labels

    out_dir = Path(args.out)
    records = _split(dataset, args.split)
    if not records:
        raise FormatError(f"{args.data}: split {args.split!r} holds no videos")
    for i, record in enumerate(records):
        labels, _, _ = infer_video(
            state, record.features, args.steps, seed=args.seed * 100003 + i
        )
        write_labels(out_dir / f"{record.id}.txt", labels, dataset.class_names)
    print(f"wrote {len(records)} prediction files -> {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    # Predictions drive the comparison: every prediction file needs matching
    # ground truth; extra ground-truth files (e.g. the train split) are ignored.
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_files = sorted(pred_dir.glob("*.txt"))
    if not pred_files:
        raise FormatError(f"{pred_dir}: no prediction label files")
    names: dict[str, int] = {}

    def load_names(path: Path) -> np.ndarray:
        out = []
        for line in path.read_text(encoding="utf-8").splitlines():
            token = line.strip()
            if token:
                out.append(names.setdefault(token, len(names)))
        if not out:
            raise FormatError(f"{path}: empty label file")
        return np.asarray(out)

    pairs = []
    for pred_file in pred_files:
        gt_file = gt_dir / pred_file.name
        if not gt_file.exists():
            raise FormatError(f"{gt_file}: missing ground truth for {pred_file.name}")
        pairs.append((load_names(pred_file), load_names(gt_file)))
    report = evaluate_videos(pairs)
    for key in ("F1@10", "F1@25", "F1@50", "Edit", "Acc", "Avg"):
        print(f"{key} = {report[key]:.4f}")
    return 0


def _cmd_check(args) -> int:
    results = checks.run_all(seed=args.seed)
    failed = 0
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{status:4s} {result.name}: {result.detail}")
        failed += 0 if result.passed else 1
    print(f"{len(results) - failed}/{len(results)} suites passed")
    return 0 if failed == 0 else 1


def _cmd_export(args) -> int:
    state = load_checkpoint(args.ckpt)
    _validate_steps(args.steps, state.schedule.T)
    dataset = read_dataset(args.data)
    records = _split(dataset, args.split)
    if not records:
        raise FormatError(f"{args.data}: split {args.split!r} holds no videos")
    dim = state.config.embed_dim
    lines = ["video,frame,pred_label,gt_label," + ",".join(f"x{k}" for k in range(dim))]
    for i, record in enumerate(records):
        labels, _, ball = infer_video(
            state, record.features, args.steps, seed=args.seed * 100003 + i
        )
        for frame in range(labels.shape[0]):
            coords = ",".join(f"{v:.10g}" for v in ball[frame])
            pred = dataset.class_names[int(labels[frame])]
            gt = dataset.class_names[int(record.labels[frame])]
            lines.append(f"{record.id},{frame},{pred},{gt},{coords}")
    atomic_write_bytes(Path(args.out), ("\n".join(lines) + "\n").encode("utf-8"))
    print(f"wrote {len(lines) - 1} frames -> {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "check": _cmd_check,
    "export-embeddings": _cmd_export,
}


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on bad flags; 0 for --help
        return 0 if (e.code or 0) == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except HyptasError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - the contract is exit code 2
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
