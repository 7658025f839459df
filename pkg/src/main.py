"""Command-line entry point: the portrait restoration pipeline as subcommands"""

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from loguru import logger
from pydantic import ValidationError

from .restoration.config import RunConfig, config_reference, load_config
from .restoration.curation import curate, materialize_lq
from .restoration.degrade import degrade
from .restoration.evaluate import (
    bicubic_restorer,
    compare_reports,
    evaluate_manifest,
    format_report,
    format_win_rates,
    model_restorer,
    read_selections,
    win_rate_by_criterion,
)
from .restoration.imaging import box_mask, load_image, save_image
from .restoration.log import configure_logging
from .restoration.manifest import FaceTriplet, PortraitRecord, read_manifest, write_manifest
from .restoration.model import load_checkpoint
from .restoration.registry import registry
from .restoration.synth import generate_dataset
from .restoration.train import check_embedder, run_training
from .restoration.types import (
    CheckpointError,
    CommandResult,
    ContractViolation,
    Embedder,
    RestorationError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

PORTRAITS_MANIFEST = "portraits.jsonl"
TRAIN_MANIFEST = "train.jsonl"
TEST_MANIFEST = "test.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting so dispatch owns the exit code"""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _make_embedder(cfg: RunConfig) -> Embedder:
    return registry.create_embedder(cfg.identity.embedder, **cfg.identity.backend_kwargs())


def _parse_box(text: str) -> Tuple[int, int, int, int]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise UsageError(f"--mask-box expects x0,y0,x1,y1 integers, got {text!r}") from e
    if len(values) != 4:
        raise UsageError(f"--mask-box expects four values, got {text!r}")
    return values  # type: ignore[return-value]


def _resolve_checkpoint(cfg: RunConfig, given: Optional[Path]) -> Path:
    """--checkpoint, then paths.checkpoint, then the newest checkpoint of the output root"""
    if given is not None:
        return given
    if cfg.paths.checkpoint is not None:
        return cfg.paths.checkpoint
    found = sorted(cfg.paths.output_root.glob("ckpt-*.safetensors"))
    if not found:
        raise CheckpointError(f"No checkpoint given and none found in {cfg.paths.output_root}")
    return found[-1]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> CommandResult:
    """Render synthetic portraits, faces and scenes plus the portrait manifest"""
    root = cfg.paths.data_root
    records = generate_dataset(root, cfg.data, cfg.seed, count=args.count)
    path = write_manifest(root / PORTRAITS_MANIFEST, records)
    return CommandResult(
        success=True,
        message=f"Wrote {len(records)} records to {path}",
        outputs={"manifest": str(path), "records": len(records)},
    )


def cmd_curate(cfg: RunConfig, args: argparse.Namespace) -> CommandResult:
    """Filter portraits, pair identities and write the train/test triplet manifests"""
    root = cfg.paths.data_root
    records = read_manifest(root / PORTRAITS_MANIFEST, PortraitRecord)
    result = curate(records, root, cfg.data, cfg.degrade, _make_embedder(cfg), cfg.seed)
    train_path = write_manifest(root / TRAIN_MANIFEST, result.train)
    test_path = write_manifest(root / TEST_MANIFEST, result.test)
    return CommandResult(
        success=True,
        message=(
            f"Kept {result.kept} portraits, {len(result.pairs)} pairs; "
            f"{len(result.train)} train and {len(result.test)} test triplets"
        ),
        outputs={"train": str(train_path), "test": str(test_path)},
    )


def cmd_degrade(cfg: RunConfig, args: argparse.Namespace) -> CommandResult:
    """Write LQ images for the triplet manifests (or one image with --input/--output)"""
    if args.input is not None:
        if args.output is None:
            raise UsageError("degrade --input requires --output")
        lq = degrade(load_image(args.input), cfg.degrade, cfg.seed)
        save_image(lq, args.output)
        return CommandResult(success=True, message=f"Wrote {args.output}")

    root = cfg.paths.data_root
    written = 0
    for name in (TRAIN_MANIFEST, TEST_MANIFEST):
        rows = read_manifest(root / name, FaceTriplet)
        results = materialize_lq(rows, root, cfg.degrade, cfg.data.workers)
        failed = {r.row_id for r in results if not r.success}
        kept = [t for t in rows if t.portrait_id not in failed]
        write_manifest(root / name, kept)
        written += len(results) - len(failed)
        if failed:
            logger.warning(f"{name}: dropped rows of {len(failed)} portraits without LQ images")
    return CommandResult(
        success=True, message=f"Wrote {written} LQ images", outputs={"images": written}
    )


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> CommandResult:
    """Pretrain the base model and train adapters on the train manifest"""
    train_cfg = cfg.train
    if args.steps is not None:
        train_cfg = train_cfg.model_copy(
            update={
                "total_steps": args.steps,
                "stage1_steps": min(train_cfg.stage1_steps, args.steps),
            }
        )
        train_cfg = type(train_cfg).model_validate(train_cfg.model_dump())
    embedder = _make_embedder(cfg)
    check_embedder(embedder, train_cfg)
    rows = read_manifest(cfg.paths.data_root / TRAIN_MANIFEST, FaceTriplet)
    summary = run_training(
        train_cfg,
        cfg.model,
        rows,
        cfg.paths.data_root,
        cfg.paths.output_root,
        embedder,
        face_side=cfg.geometry.face_side,
        factor=cfg.degrade.downscale_factor,
        perceptual=registry.create_perceptual(train_cfg.perceptual),
        regularizer=registry.create_regularizer(train_cfg.regularizer),
        resume=args.resume,
    )
    last = summary.checkpoints[-1] if summary.checkpoints else None
    return CommandResult(
        success=True,
        message=f"Trained {summary.steps} steps; last checkpoint {last}",
        outputs={"steps": summary.steps, "checkpoint": str(last), "log": str(summary.log_path)},
    )


def cmd_restore(cfg: RunConfig, args: argparse.Namespace) -> CommandResult:
    """Restore one LQ portrait, optionally guided by a reference face"""
    if args.reference is not None and args.mask_box is None:
        raise ContractViolation("--reference requires --mask-box to place the face")
    if args.mask_box is not None and args.reference is None:
        raise ContractViolation("--mask-box given without --reference")

    ckpt = load_checkpoint(_resolve_checkpoint(cfg, args.checkpoint), device=cfg.train.device)
    model = ckpt.model.eval()
    lq = load_image(args.input).to(cfg.train.device)
    ref = mask = None
    if args.reference is not None:
        ref = load_image(args.reference).to(cfg.train.device)
        mask = box_mask(lq.shape[-2], lq.shape[-1], _parse_box(args.mask_box)).to(lq.device)
    with torch.no_grad():
        out = model.restore(lq, ref, mask)
    save_image(out, args.output)
    return CommandResult(success=True, message=f"Wrote {args.output}")


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> CommandResult:
    """Metrics over the test manifest for a checkpoint or the bicubic baseline"""
    eval_cfg = cfg.eval
    if args.no_reference:
        eval_cfg = eval_cfg.model_copy(update={"with_reference": False})
    if args.bicubic:
        restorer = bicubic_restorer(cfg.degrade.downscale_factor)
    else:
        ckpt = load_checkpoint(_resolve_checkpoint(cfg, args.checkpoint), device=cfg.train.device)
        restorer = model_restorer(ckpt.model.eval())

    rows = read_manifest(cfg.paths.data_root / TEST_MANIFEST, FaceTriplet)
    out_csv = args.output or cfg.paths.output_root / "eval.csv"
    report = evaluate_manifest(
        restorer, rows, cfg.paths.data_root, _make_embedder(cfg), eval_cfg, out_csv=out_csv
    )
    return CommandResult(
        success=True,
        message=format_report(report),
        outputs={"csv": str(out_csv), "failures": len(report.failures)},
    )


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> CommandResult:
    """Win-rate tables from selection CSVs and side-by-side eval CSV comparison"""
    if not args.selections and not args.evals:
        raise UsageError("report needs --selections and/or --evals")
    parts: List[str] = []
    for path in args.selections or []:
        rates = win_rate_by_criterion(read_selections(path))
        parts.append(f"{path}\n{format_win_rates(rates)}")
    if args.evals:
        parts.append(compare_reports(args.evals))
    return CommandResult(success=True, message="\n\n".join(parts))


def cmd_config(cfg: RunConfig, args: argparse.Namespace) -> CommandResult:
    """Every configuration key with its default"""
    return CommandResult(success=True, message=config_reference().rstrip("\n"))


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], CommandResult]] = {
    "synth": cmd_synth,
    "curate": cmd_curate,
    "degrade": cmd_degrade,
    "train": cmd_train,
    "restore": cmd_restore,
    "eval": cmd_eval,
    "report": cmd_report,
    "config": cmd_config,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML or JSON run config")
    common.add_argument("--seed", type=int, default=None, help="override the global seed")
    common.add_argument("--log-level", default=None, help="loguru level (default from config)")
    common.add_argument("--log-file", type=Path, default=None, help="also append logs to this file")

    parser = _Parser(prog="main.py", description="Portrait super-resolution pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help=cmd_synth.__doc__)
    p.add_argument("--count", type=int, default=None, help="number of portraits")

    sub.add_parser("curate", parents=[common], help=cmd_curate.__doc__)

    p = sub.add_parser("degrade", parents=[common], help=cmd_degrade.__doc__)
    p.add_argument("--input", type=Path, default=None)
    p.add_argument("--output", type=Path, default=None)

    p = sub.add_parser("train", parents=[common], help=cmd_train.__doc__)
    p.add_argument("--steps", type=int, default=None, help="override train.total_steps")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")

    p = sub.add_parser("restore", parents=[common], help=cmd_restore.__doc__)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--reference", type=Path, default=None, help="aligned reference face")
    p.add_argument("--mask-box", default=None, help="face box on the LQ grid: x0,y0,x1,y1")
    p.add_argument("--checkpoint", type=Path, default=None)

    p = sub.add_parser("eval", parents=[common], help=cmd_eval.__doc__)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--bicubic", action="store_true", help="evaluate bicubic upsampling")
    p.add_argument("--no-reference", action="store_true", help="drop every reference")
    p.add_argument("--output", type=Path, default=None, help="per-image CSV path")

    p = sub.add_parser("report", parents=[common], help=cmd_report.__doc__)
    p.add_argument("--selections", type=Path, nargs="*", default=None)
    p.add_argument("--evals", type=Path, nargs="*", default=None)

    sub.add_parser("config", parents=[common], help=cmd_config.__doc__)
    return parser


def run_command(argv: Sequence[str]) -> CommandResult:
    """Parse and execute one subcommand; errors become failed results"""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        if args.command is None:
            raise UsageError("missing subcommand")
    except UsageError as e:
        return CommandResult(
            success=False, error=f"{e}\n{parser.format_usage().strip()}", exit_code=EXIT_USAGE
        )

    try:
        cfg = load_config(args.config, seed=args.seed)
        configure_logging(args.log_level or cfg.log_level, args.log_file)
        logger.debug(f"{args.command}: seed {cfg.seed}")
        result = COMMANDS[args.command](cfg, args)
    except UsageError as e:
        usage = parser.format_usage().strip()
        return CommandResult(success=False, error=f"{e}\n{usage}", exit_code=EXIT_USAGE)
    except (RestorationError, OSError, ValidationError, ValueError) as e:
        return CommandResult(success=False, error=f"{type(e).__name__}: {e}", exit_code=EXIT_DATA)
    return result


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run a subcommand and map its result to the process exit code"""
    result = run_command(sys.argv[1:] if argv is None else argv)
    if result.success:
        if result.message:
            print(result.message)
        return EXIT_OK
    print(result.error, file=sys.stderr)
    return result.exit_code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
