"""Command-line surface: generate cohorts, run the cross-validated benchmark
for one variant, and emit importance reports from checkpoints.

Exit codes: 0 success, 2 usage error, 3 data/configuration error,
4 numerical failure (divergence or non-finite scores).  Every command writes
a manifest.json capturing the full configuration needed to reproduce the run;
all other outputs are byte-deterministic given the same inputs and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from .data import load_dataset, load_schema
from .errors import CheckpointError, NumericalError, TabfmError, TrainingDivergedError
from .harness import ALL_VARIANTS, run_benchmark, write_eval_report, write_trial_log
from .interpret import (
    interaction_report,
    linear_importance,
    write_importance_report,
    write_interaction_report,
    write_report_summary,
)
from .model import DeepFMModel, load_checkpoint, save_checkpoint
from .synth import load_cohort_spec, write_cohort, CohortSpec

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _default_jobs() -> int:
    env = os.environ.get("TABFM_JOBS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabfm",
        description="Interpretable deep factorization machines for tabular "
                    "multiclass classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic cohort")
    gen.add_argument("--spec", type=Path, default=None,
                     help="cohort spec JSON (defaults to the reference-shaped cohort)")
    gen.add_argument("--seed", type=int, default=None,
                     help="override the spec's seed")
    gen.add_argument("--out", type=Path, required=True, help="output directory")

    cv = sub.add_parser("cv", help="cross-validated benchmark for one variant")
    cv.add_argument("--data", type=Path, required=True, help="dataset CSV")
    cv.add_argument("--schema", type=Path, required=True, help="schema JSON")
    cv.add_argument("--meta-schema", type=Path, default=None,
                    help="group schema JSON (required for variant deepfm_meta)")
    cv.add_argument("--variant", required=True, choices=ALL_VARIANTS)
    cv.add_argument("--budget", type=int, default=30,
                    help="search trials per fold (default 30)")
    cv.add_argument("--seed", type=int, default=0)
    cv.add_argument("--jobs", type=int, default=_default_jobs(),
                    help="parallel trials (default $TABFM_JOBS or 1)")
    cv.add_argument("--folds", type=int, default=5)
    cv.add_argument("--max-epochs", type=int, default=300)
    cv.add_argument("--patience", type=int, default=10)
    cv.add_argument("--batch-size", type=int, default=128)
    cv.add_argument("--out", type=Path, required=True, help="output directory")

    exp = sub.add_parser("explain", help="importance reports from checkpoints")
    exp.add_argument("--checkpoint", type=Path, nargs="+", required=True,
                     help="one checkpoint per fold")
    exp.add_argument("--data", type=Path, required=True, help="dataset CSV")
    exp.add_argument("--schema", type=Path, required=True, help="schema JSON")
    exp.add_argument("--top-k", type=int, default=10,
                     help="rows per class on the console (default 10)")
    exp.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    schema_hash, inputs, outputs, started: float) -> None:
    from . import __version__

    config = {}
    for key, value in sorted(vars(args).items()):
        if key == "command":
            continue
        if isinstance(value, Path):
            value = str(value)
        if isinstance(value, list):
            value = [str(v) for v in value]
        config[key] = value
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "schema_hash": schema_hash,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "duration_seconds": round(time.monotonic() - started, 3),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_generate(args: argparse.Namespace) -> int:
    started = time.monotonic()
    if args.spec is not None:
        spec = load_cohort_spec(args.spec)
    else:
        spec = CohortSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
        spec.validate()
    schema, samples, _, paths = write_cohort(spec, args.out)
    _write_manifest(args.out, "generate", args, schema.schema_hash,
                    inputs=[args.spec] if args.spec else [],
                    outputs=list(paths.values()), started=started)
    print(f"wrote {len(samples)} visits for "
          f"{len({s.patient_id for s in samples})} patients under {args.out}")
    return EXIT_OK


def cmd_cv(args: argparse.Namespace) -> int:
    started = time.monotonic()
    schema = load_schema(args.schema)
    samples = load_dataset(args.data, schema)
    meta_schema = load_schema(args.meta_schema) if args.meta_schema else None

    report, trial_logs, models = run_benchmark(
        samples, schema, variants=(args.variant,), budget=args.budget,
        seed=args.seed, jobs=args.jobs, k=args.folds, meta_schema=meta_schema,
        max_epochs=args.max_epochs, patience=args.patience,
        batch_size=args.batch_size)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_eval_report(report, out)
    trials_path = out / "trials.tsv"
    write_trial_log(trial_logs[args.variant], trials_path)
    outputs = [out / "report.tsv", out / "report.json", trials_path]
    for fold_index, model in enumerate(models[args.variant]):
        ckpt = out / f"model_fold{fold_index}.ckpt"
        save_checkpoint(model, ckpt)
        outputs.append(ckpt)
    _write_manifest(out, "cv", args, schema.schema_hash,
                    inputs=[args.data, args.schema]
                           + ([args.meta_schema] if args.meta_schema else []),
                    outputs=outputs, started=started)

    agg = report.aggregates[args.variant]
    print(f"{args.variant}: median test balanced accuracy "
          f"{agg['median']:.3f} (iqr {agg['iqr']:.3f}, "
          f"min {agg['min']:.3f}, max {agg['max']:.3f}) over {report.k} folds")
    return EXIT_OK


def cmd_explain(args: argparse.Namespace) -> int:
    started = time.monotonic()
    schema = load_schema(args.schema)
    samples = load_dataset(args.data, schema)
    models = [load_checkpoint(p, expected_schema_hash=schema.schema_hash)
              for p in args.checkpoint]
    for model, path in zip(models, args.checkpoint):
        if not isinstance(model, DeepFMModel):
            raise CheckpointError(
                f"{path}: explain requires a deepfm-family checkpoint")

    importance = linear_importance(models)
    interactions = interaction_report(models, [samples] * len(models))

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_importance_report(importance, out / "linear_importance.tsv")
    write_interaction_report(interactions, out / "interactions.tsv")
    write_report_summary(importance, interactions, out / "summary.json")
    _write_manifest(out, "explain", args, schema.schema_hash,
                    inputs=list(args.checkpoint) + [args.data, args.schema],
                    outputs=[out / "linear_importance.tsv",
                             out / "interactions.tsv", out / "summary.json"],
                    started=started)

    for label in schema.class_labels:
        print(f"\n{label}: top {args.top_k} linear features "
              f"(top-10 share {importance.top10_share[label]:.3f})")
        print(f"{'rank':>4}  {'column':<28} {'mean_weight':>12} {'share':>8}")
        for rank, e in enumerate(importance.for_class(label)[:args.top_k], 1):
            print(f"{rank:>4}  {e.column:<28} {e.mean_weight:>12.4f} {e.share:>8.4f}")
        print(f"\n{label}: top {args.top_k} interactions "
              f"(rest of model share {interactions.rest_share[label]:.3f})")
        print(f"{'rank':>4}  {'pair':<44} {'mean_share':>10} {'signed':>10}")
        for rank, e in enumerate(interactions.for_class(label)[:args.top_k], 1):
            print(f"{rank:>4}  {e.pair:<44} {e.mean_share:>10.4f} "
                  f"{e.signed_mean:>10.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    handlers = {"generate": cmd_generate, "cv": cmd_cv, "explain": cmd_explain}
    try:
        return handlers[args.command](args)
    except (NumericalError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TabfmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
