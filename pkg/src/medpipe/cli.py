"""Command-line front end.

Subcommands: run, plan-review, registry-validate, detect-type. Configuration
layers: built-in defaults, then a TOML file (--config or $MEDPIPE_CONFIG),
then flags. Exit codes: 0 full success, 2 stage/operation failure, 1 usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ENV_CONFIG, EXPLAIN_MODES, EngineConfig, config_from_document, load_config_file
from .errors import ConfigError, MedpipeError, RegistryError
from .inference import ImageInferenceResult, PredictionReport
from .ingest import detect_mime, load_artifact
from .pipeline import MODE_TABULAR, audit_to_jsonl, new_context, run_pipeline
from .preprocess import PreprocessingPlan, apply_edits, validate_plan
from .registry import load_registry

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract reserves 2 for stage failures."""

    def error(self, message: str):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="medpipe", description="Clinical data pipeline engine")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[], help="execute the full pipeline on one input")
    run.add_argument("input", help="input file (CSV/JSON/XLSX/ZIP/PNG/JPEG)")
    run.add_argument("--config", help=f"TOML config file (or ${ENV_CONFIG})")
    run.add_argument("--registry", help="model database JSON")
    run.add_argument("--embedder", help="'fallback' or sidecar base URL")
    run.add_argument("--threshold", type=float, help="similarity threshold in (0, 1]")
    run.add_argument("--seed", type=int, help="run seed")
    run.add_argument("--out", help="output directory")
    run.add_argument("--auto", action="store_true", help="force automatic preprocessing")
    run.add_argument("--explain", choices=EXPLAIN_MODES, help="attribution method")
    run.add_argument(
        "--overrides", help="JSON file mapping column name to preprocessing steps"
    )
    run.add_argument(
        "--global-match",
        action="store_true",
        help="greedy matching over all pairs by descending score",
    )

    review = sub.add_parser("plan-review", help="apply edits to a recommended plan")
    review.add_argument("plan", help="plan JSON produced by run")
    review.add_argument("--input", required=True, help="the dataset the plan was built for")
    review.add_argument("--edits", help="JSON file mapping column name to new steps")
    review.add_argument("--out", help="where to write the updated plan (default stdout)")
    review.add_argument("--config", help=f"TOML config file (or ${ENV_CONFIG})")

    validate = sub.add_parser("registry-validate", help="check a model database file")
    validate.add_argument("registry", help="model database JSON")

    detect = sub.add_parser("detect-type", help="classify files by content")
    detect.add_argument("paths", nargs="+", help="files to classify")
    return parser


def _load_engine_config(args: argparse.Namespace) -> EngineConfig:
    config = EngineConfig()
    config_path = getattr(args, "config", None) or os.environ.get(ENV_CONFIG)
    if config_path:
        config = config_from_document(load_config_file(config_path), base=config)
    updates: dict = {}
    if getattr(args, "registry", None):
        updates["registry_path"] = Path(args.registry)
    if getattr(args, "embedder", None):
        updates["embedder_spec"] = args.embedder
    if getattr(args, "threshold", None) is not None:
        updates["similarity_threshold"] = args.threshold
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
        updates["gbm"] = replace(config.gbm, seed=args.seed)
    if getattr(args, "out", None):
        updates["output_dir"] = Path(args.out)
    if getattr(args, "auto", False):
        updates["force_auto"] = True
    if getattr(args, "explain", None):
        updates["explain"] = args.explain
    if getattr(args, "global_match", False):
        updates["global_match"] = True
    if getattr(args, "overrides", None):
        with open(args.overrides, encoding="utf-8") as fh:
            updates["user_overrides"] = json.load(fh)
    return replace(config, **updates).validate()


def _cmd_run(args: argparse.Namespace) -> int:
    input_path = Path(args.input)
    if not input_path.is_file():
        print(f"medpipe: input not found: {input_path}", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = _load_engine_config(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"medpipe: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if config.registry_path is None:
        print("medpipe: --registry is required (flag or config file)", file=sys.stderr)
        return EXIT_USAGE
    if not Path(config.registry_path).is_file():
        print(f"medpipe: registry not found: {config.registry_path}", file=sys.stderr)
        return EXIT_USAGE

    artifact = load_artifact(input_path)
    ctx = new_context([artifact], config)
    try:
        ctx = run_pipeline(ctx, config)
    except (RegistryError, ConfigError, ValueError) as exc:
        print(f"medpipe: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "audit.jsonl").write_text(audit_to_jsonl(ctx.audit), encoding="utf-8")
    if ctx.mode == MODE_TABULAR and len(ctx.audit) >= 2:
        findings_lines = "".join(
            json.dumps(f.to_record(), ensure_ascii=False) + "\n" for f in ctx.findings
        )
        (out_dir / "findings.jsonl").write_text(findings_lines, encoding="utf-8")
    if ctx.plan is not None:
        plan_doc = ctx.plan.to_dict()
        plan_doc["dataset_bytes"] = ctx.dataset_bytes
        (out_dir / "plan.json").write_text(
            json.dumps(plan_doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )
    if isinstance(ctx.report, PredictionReport):
        (out_dir / "predictions.csv").write_text(ctx.report.to_csv(), encoding="utf-8")
    elif isinstance(ctx.report, ImageInferenceResult):
        (out_dir / "predictions.csv").write_text(ctx.report.csv_text, encoding="utf-8")
        annotated_dir = out_dir / "annotated"
        annotated_dir.mkdir(exist_ok=True)
        for image in ctx.report.annotated:
            safe_name = image.name.replace("/", "_")
            (annotated_dir / safe_name).write_bytes(image.data)

    if ctx.failure is not None:
        print(f"medpipe: run failed: {ctx.failure}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"run {ctx.run_id}: ok; outputs in {out_dir}")
    return EXIT_OK


def _cmd_plan_review(args: argparse.Namespace) -> int:
    try:
        config = _load_engine_config(args)
    except (ConfigError, OSError) as exc:
        print(f"medpipe: {exc}", file=sys.stderr)
        return EXIT_USAGE
    plan_path = Path(args.plan)
    input_path = Path(args.input)
    if not plan_path.is_file() or not input_path.is_file():
        print("medpipe: plan and input files must exist", file=sys.stderr)
        return EXIT_USAGE
    try:
        plan = PreprocessingPlan.from_dict(
            json.loads(plan_path.read_text(encoding="utf-8"))
        )
    except (json.JSONDecodeError, MedpipeError) as exc:
        print(f"medpipe: cannot load plan: {exc}", file=sys.stderr)
        return EXIT_USAGE

    artifact = load_artifact(input_path)
    try:
        if len(artifact.data) > config.size_gate_bytes:
            from .errors import OverridesRejected

            raise OverridesRejected("SizeGate")
        from .ingest import parse_tabular

        artifact.mime = detect_mime(artifact)
        table = parse_tabular(artifact)
        if args.edits:
            with open(args.edits, encoding="utf-8") as fh:
                edits = json.load(fh)
            plan = apply_edits(plan, edits, table)
        else:
            validate_plan(plan, table)
    except MedpipeError as exc:
        print(f"medpipe: plan review failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"medpipe: {exc}", file=sys.stderr)
        return EXIT_USAGE

    text = json.dumps(plan.to_dict(), indent=2, ensure_ascii=False) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"plan written to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def _cmd_registry_validate(args: argparse.Namespace) -> int:
    path = Path(args.registry)
    if not path.is_file():
        print(f"medpipe: registry not found: {path}", file=sys.stderr)
        return EXIT_USAGE
    try:
        registry = load_registry(path)
    except RegistryError as exc:
        print(f"medpipe: invalid registry: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(
        f"registry ok: {len(registry.table)} table model(s), "
        f"{len(registry.image)} image model(s)"
    )
    return EXIT_OK


def _cmd_detect_type(args: argparse.Namespace) -> int:
    code = EXIT_OK
    for raw in args.paths:
        path = Path(raw)
        if not path.is_file():
            print(f"medpipe: not a file: {path}", file=sys.stderr)
            code = EXIT_USAGE
            continue
        artifact = load_artifact(path)
        if not artifact.data:
            print(f"medpipe: empty file: {path}", file=sys.stderr)
            code = EXIT_USAGE
            continue
        print(f"{path}\t{detect_mime(artifact)}")
    return code


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "run": _cmd_run,
        "plan-review": _cmd_plan_review,
        "registry-validate": _cmd_registry_validate,
        "detect-type": _cmd_detect_type,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
