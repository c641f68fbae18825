"""Command-line front end: ``synth``, ``train``, ``transfer`` and ``eval``.

Exit codes: 0 success, 2 bad arguments or spec, 3 data or checkpoint
problems, 4 training failure. Every command that writes files also writes
``run_manifest.json`` next to them.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .ingest import EmptyInput, IngestError, MixedCities, load_csv, records_to_csv, split_train_test
from .model import CheckpointError, KindMismatch, load_checkpoint, save_checkpoint
from .protocol import (
    TEST_FRACTION,
    EmptyDataset,
    FineTuneSetEmpty,
    TooFewSamples,
    TrainConfig,
    TrainingDiverged,
    ZeroVarianceTargets,
    evaluate,
    finetune_transfer,
    fit_supervised,
    monte_carlo_cv,
    scratch_baseline,
)
from .synth import BadSpec, UniverseSpec, generate_universe

logger = logging.getLogger("hfthlf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4
MANIFEST = "run_manifest.json"
REPORT = "report.json"
CHECKPOINT = "model.hfthlf.json"


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    version: str = __version__
    duration_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "config": self.config,
            "seed": self.seed,
            "tool_version": self.version,
            "duration_s": self.duration_s,
        }


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return str(path)


def _save(ckpt, out: Path) -> str:
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / CHECKPOINT)
    return str(out / CHECKPOINT)


def _load_records(path: str):
    try:
        records, errors, report = load_csv(path)
    except OSError as exc:
        raise CommandError(EXIT_DATA, f"cannot read {path}: {exc.strerror or exc}") from None
    except IngestError as exc:
        raise CommandError(EXIT_DATA, f"{path}: {exc}") from None
    if errors:
        logger.warning("%s: %d malformed rows skipped", path, len(errors))
    if report.n_dropped:
        logger.warning("%s: dropped %d rows %s", path, report.n_dropped, dict(report.dropped))
    if not records:
        raise CommandError(EXIT_DATA, f"{path}: no valid records")
    summary = {"kept": report.kept, "dropped": dict(report.dropped), "malformed_rows": len(errors)}
    return records, summary


def _config(args) -> TrainConfig:
    return TrainConfig.for_tier(
        args.tier,
        epochs=args.epochs,
        seed=args.seed,
        recalibrate_bn=args.recalibrate_bn,
        merge_short_batch=args.merge_short_batch,
    )


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args, manifest: RunManifest) -> dict:
    if args.spec:
        manifest.inputs.append(args.spec)
        try:
            text = Path(args.spec).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise CommandError(EXIT_USAGE, f"cannot read spec {args.spec}: {exc}") from None
        try:
            spec = UniverseSpec.from_json(text)
        except BadSpec as exc:
            raise CommandError(EXIT_USAGE, f"bad spec {args.spec}: {exc}") from None
    else:
        spec = UniverseSpec()
    if args.seed is not None:
        spec = UniverseSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    try:
        universe = generate_universe(spec)
    except BadSpec as exc:
        raise CommandError(EXIT_USAGE, f"bad spec: {exc}") from None
    out = Path(args.out)
    for city, records in universe.items():
        manifest.outputs.append(_write(out / f"{city}.csv", records_to_csv(records)))
    manifest.outputs.append(_write(out / "universe_spec.json", _dump(spec.to_dict())))
    manifest.seed = spec.seed
    manifest.config = spec.to_dict()
    return {"cities": {city: len(recs) for city, recs in universe.items()}}


def cmd_train(args, manifest: RunManifest) -> dict:
    manifest.inputs.append(args.csv)
    records, cleaning = _load_records(args.csv)
    config = _config(args)
    manifest.config = {**config.to_dict(), "model": args.model, "tier": args.tier, "cv": args.cv}
    manifest.seed = args.seed
    report = {"command": "train", "model": args.model, "config": config.to_dict(), "clean": cleaning}
    if args.cv:
        cv = monte_carlo_cv(records, args.model, config, n_folds=args.cv)
        report.update(metrics=cv.mean.to_dict(), folds=[f.to_dict() for f in cv.folds])
        ckpt, history = fit_supervised(records, args.model, config)
        report["final_fit_records"] = len(records)
    else:
        train_recs, test_recs = split_train_test(records, TEST_FRACTION, args.seed)
        ckpt, history = fit_supervised(train_recs, args.model, config)
        report["metrics"] = evaluate(ckpt, test_recs).to_dict()
        report.update(n_train=len(train_recs), n_test=len(test_recs))
    report["final_loss"] = history[-1]
    manifest.outputs.append(_save(ckpt, Path(args.out)))
    manifest.outputs.append(_write(Path(args.out) / REPORT, _dump(report)))
    return report


def cmd_transfer(args, manifest: RunManifest) -> dict:
    manifest.inputs += [args.source, args.target]
    try:
        source = load_checkpoint(args.source)
    except (OSError, CheckpointError) as exc:
        raise CommandError(EXIT_DATA, f"cannot load checkpoint {args.source}: {exc}") from None
    records, cleaning = _load_records(args.target)
    config = _config(args)
    k = None if args.k == "all" else int(args.k)
    manifest.config = {**config.to_dict(), "k": args.k, "tier": args.tier, "freeze_backbone": not args.unfreeze}
    manifest.seed = args.seed
    try:
        result = finetune_transfer(source, records, k, config, freeze_backbone=not args.unfreeze)
    except KindMismatch as exc:
        raise CommandError(EXIT_DATA, str(exc)) from None
    report = {
        "command": "transfer",
        "config": config.to_dict(),
        "clean": cleaning,
        "source_city": source.vocab.city,
        "target_city": result.checkpoint.vocab.city,
        "freeze_backbone": not args.unfreeze,
        **result.to_dict(),
        "final_loss": result.history[-1],
    }
    if args.scratch_baseline:
        report["scratch_metrics"] = scratch_baseline(result, config).to_dict()
    manifest.outputs.append(_save(result.checkpoint, Path(args.out)))
    manifest.outputs.append(_write(Path(args.out) / REPORT, _dump(report)))
    return report


def cmd_eval(args, manifest: RunManifest) -> dict:
    manifest.inputs += [args.ckpt, args.csv]
    try:
        ckpt = load_checkpoint(args.ckpt)
    except (OSError, CheckpointError) as exc:
        raise CommandError(EXIT_DATA, f"cannot load checkpoint {args.ckpt}: {exc}") from None
    records, cleaning = _load_records(args.csv)
    metrics = evaluate(ckpt, records)
    report = {"command": "eval", "kind": ckpt.kind, "clean": cleaning, "metrics": metrics.to_dict()}
    sys.stdout.write(_dump(report))
    if args.out:
        manifest.outputs.append(_write(Path(args.out) / REPORT, _dump(report)))
    return report


# ----------------------------------------------------------------------------
# argument parsing


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tier", type=int, choices=(1, 2, 3), default=3, help="learning-rate / batch-size preset")
    p.add_argument("--epochs", type=int, default=250)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--recalibrate-bn", action="store_true",
                   help="recompute batch-norm statistics without dropout after training")
    p.add_argument("--merge-short-batch", action="store_true",
                   help="fold a final batch under half the batch size into the previous one")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfthlf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic city CSVs")
    p.add_argument("spec", nargs="?", help="universe spec JSON (defaults to the built-in spec)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model on one city")
    p.add_argument("csv")
    p.add_argument("--model", choices=("hft_hlf", "traditional"), default="hft_hlf")
    p.add_argument("--cv", type=int, default=0, metavar="N", help="Monte-Carlo CV with N random 90/10 splits")
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="fine-tune a source checkpoint on a target city")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--k", default="10", help="records per residence, or 'all'")
    p.add_argument("--unfreeze", action="store_true", help="also train the backbone")
    p.add_argument("--scratch-baseline", action="store_true",
                   help="also fit a fresh model on the fine-tuning set and report it")
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="score a checkpoint on a CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--seed", type=int, default=42, help="accepted for symmetry; evaluation is deterministic")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def _check_args(parser, args) -> None:
    if getattr(args, "epochs", 1) < 1:
        parser.error("--epochs must be >= 1")
    if getattr(args, "cv", 0) < 0:
        parser.error("--cv must be >= 0")
    k = getattr(args, "k", "all")
    if k != "all" and (not k.isdigit() or int(k) < 1):
        parser.error("--k must be a positive integer or 'all'")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_args(parser, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    manifest = RunManifest(args.command)
    start = time.perf_counter()
    try:
        args.func(args, manifest)
    except CommandError as exc:
        print(f"hfthlf {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDiverged as exc:
        print(f"hfthlf {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (EmptyDataset, EmptyInput, MixedCities, TooFewSamples, ZeroVarianceTargets, FineTuneSetEmpty) as exc:
        print(f"hfthlf {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    manifest.duration_s = round(time.perf_counter() - start, 3)
    out = getattr(args, "out", None)
    if out:
        _write(Path(out) / MANIFEST, _dump(manifest.to_dict()))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
