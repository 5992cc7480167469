"""Command-line entry point: ``chartir run``, ``chartir eval``, ``chartir report``.

Exit codes: 0 on success, 2 on configuration errors, 3 on gateway
authentication errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

from .config import ConfigError, RunConfig, parse_weights
from .engine import RefinementEngine
from .gateway import AuthError, MockBackend, MockPlaybook, ModelGateway, OpenAIBackend
from .harness import (
    Evaluator,
    ManifestError,
    build_report,
    load_manifest,
    render_csv,
    render_markdown,
    report_from_json,
    report_to_json,
    write_manifest,
)
from .images import ChartImage
from .sandbox import SandboxOrchestrator

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_AUTH = 3

RUN_STATE_FILENAME = "run_state.json"
RUN_MANIFEST_FILENAME = "manifest.jsonl"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chartir")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the two-stage refinement over a manifest")
    run.add_argument("--manifest", help="JSONL dataset manifest")
    run.add_argument("--out", dest="out_dir", help="run output directory")
    run.add_argument("--config", help="JSON config file; flags override its values")
    run.add_argument("--mock", dest="mock_playbook",
                     help="mock playbook: a JSONL file, or a directory of <item_id>.jsonl files")
    run.add_argument("--threshold", type=int, help="convergence threshold K")
    run.add_argument("--max-debug", type=int, dest="max_debug")
    run.add_argument("--iteration-cap", type=int, dest="iteration_cap")
    run.add_argument("--timeout-ms", type=int, dest="render_timeout_ms")
    run.add_argument("--parallelism", type=int, dest="sandbox_parallelism")
    run.add_argument("--weights", help="aggregation weights, e.g. ssim=0.2,psnr=0.2,hamming=0.6")

    ev = sub.add_parser("eval", help="score a finished run")
    ev.add_argument("--run", dest="run_dir", required=True)
    ev.add_argument("--with-judge", action="store_true", dest="with_judge")
    ev.add_argument("--mock", dest="mock_playbook",
                    help="mock playbook for judge calls (file or directory)")
    ev.add_argument("--allow-zero-rating", action="store_true", dest="allow_zero")
    ev.add_argument("--timeout-ms", type=int, dest="render_timeout_ms", default=30000)

    rep = sub.add_parser("report", help="render tables from stored evaluation rows")
    rep.add_argument("--run", dest="run_dir", required=True)
    rep.add_argument("--format", choices=("md", "csv", "json"), default=None,
                     help="emit one format (default: md and csv)")
    return parser


def _playbook_gateway(mock_path: Path, item_id: str) -> ModelGateway:
    """Per-item mock gateway; playbooks are never shared between sessions."""
    if mock_path.is_dir():
        candidate = mock_path / f"{item_id}.jsonl"
        if not candidate.is_file():
            raise ConfigError(f"no playbook for item '{item_id}' under {mock_path}")
        playbook = MockPlaybook.from_jsonl(candidate)
    else:
        playbook = MockPlaybook.from_jsonl(mock_path)
    return ModelGateway(MockBackend(playbook))


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = RunConfig.from_file(args.config) if args.config else RunConfig()
        config = config.apply_overrides(
            manifest=args.manifest,
            out_dir=args.out_dir,
            threshold=args.threshold,
            max_debug=args.max_debug,
            iteration_cap=args.iteration_cap,
            render_timeout_ms=args.render_timeout_ms,
            sandbox_parallelism=args.sandbox_parallelism,
            mock_playbook=args.mock_playbook,
            weights=parse_weights(args.weights) if args.weights else None,
        )
        config.validate()
        items = load_manifest(config.manifest)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config.to_json(), encoding="utf-8")
    write_manifest(items, out_dir / RUN_MANIFEST_FILENAME)

    mock_path = Path(config.mock_playbook) if config.mock_playbook else None
    remote_gateway: ModelGateway | None = None
    if mock_path is None:
        try:
            remote_gateway = ModelGateway(
                OpenAIBackend.from_env(model_overrides=config.models)
            )
        except AuthError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_AUTH
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG

    orchestrator = SandboxOrchestrator(parallelism=config.sandbox_parallelism)

    def run_one(item) -> dict:
        if mock_path is not None:
            gateway = _playbook_gateway(mock_path, item.id)
        else:
            gateway = remote_gateway
        engine = RefinementEngine(
            gateway,
            orchestrator,
            weights=config.aggregation_weights(),
            threshold=config.threshold,
            max_debug=config.max_debug,
            iteration_cap=config.iteration_cap,
            render_timeout_ms=config.render_timeout_ms,
            work_root=out_dir / "work",
            transcript_dir=out_dir / "transcripts",
            output_dir=out_dir / "out",
        )
        session = engine.run_item(ChartImage.from_file(item.image), item.id)
        return {
            "id": item.id,
            "status": "failed" if session.failed else "completed",
            "iterations": session.iterations,
            "termination_reason": session.termination_reason,
            "best_score": session.best_score.value,
        }

    states: dict[str, dict] = {}
    auth_failure = False
    try:
        with ThreadPoolExecutor(max_workers=config.sandbox_parallelism) as pool:
            futures = {pool.submit(run_one, item): item for item in items}
            for future in as_completed(futures):
                item = futures[future]
                try:
                    states[item.id] = future.result()
                except AuthError as exc:
                    auth_failure = True
                    states[item.id] = {"id": item.id, "status": "error", "error": str(exc)}
                except Exception as exc:  # recorded as a terminal state, not fatal
                    log.warning("item %s errored: %s", item.id, exc)
                    states[item.id] = {"id": item.id, "status": "error", "error": str(exc)}
    except KeyboardInterrupt:
        orchestrator.shutdown()
        print("interrupted", file=sys.stderr)
        return 130

    ordered = [states[item.id] for item in items]
    (out_dir / RUN_STATE_FILENAME).write_text(
        json.dumps({"items": ordered}, indent=2), encoding="utf-8"
    )
    for state in ordered:
        print(f"{state['id']}: {state['status']}")
    if auth_failure:
        return EXIT_AUTH
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    state_path = run_dir / RUN_STATE_FILENAME
    manifest_path = run_dir / RUN_MANIFEST_FILENAME
    if not state_path.is_file() or not manifest_path.is_file():
        print(f"error: {run_dir} is not a finished run directory", file=sys.stderr)
        return EXIT_CONFIG

    try:
        items = load_manifest(manifest_path)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    states = {
        s["id"]: s
        for s in json.loads(state_path.read_text(encoding="utf-8"))["items"]
    }

    # the run's echoed config supplies the judge default; the flag overrides it
    config_path = run_dir / "config.json"
    if not args.with_judge and config_path.is_file():
        try:
            args.with_judge = RunConfig.from_file(config_path).judge_enabled
        except ConfigError:
            pass

    mock_path = Path(args.mock_playbook) if args.mock_playbook else None
    remote_judge: ModelGateway | None = None
    if args.with_judge and mock_path is None:
        try:
            remote_judge = ModelGateway(OpenAIBackend.from_env())
        except AuthError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_AUTH
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG

    orchestrator = SandboxOrchestrator()
    rows = []
    for item in items:
        judge_gateway = None
        if args.with_judge:
            judge_gateway = (
                _playbook_gateway(mock_path, item.id) if mock_path else remote_judge
            )
        evaluator = Evaluator(
            orchestrator,
            judge_gateway=judge_gateway,
            render_timeout_ms=args.render_timeout_ms,
            work_root=run_dir / "eval-work",
            allow_zero_rating=args.allow_zero,
        )
        final_path = run_dir / "out" / item.id / "final.py"
        final_code = final_path.read_text(encoding="utf-8") if final_path.is_file() else ""
        state = states.get(item.id, {})
        rows.append(
            evaluator.evaluate_item(
                item,
                final_code,
                iterations=int(state.get("iterations", 0)),
                termination_reason=str(state.get("termination_reason") or state.get("status", "")),
            )
        )

    report = build_report(rows)
    (run_dir / "report.json").write_text(report_to_json(report), encoding="utf-8")
    print(f"wrote {run_dir / 'report.json'} ({len(rows)} rows)")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    report_path = run_dir / "report.json"
    if not report_path.is_file():
        print(f"error: no report.json under {run_dir}; run `chartir eval` first",
              file=sys.stderr)
        return EXIT_CONFIG
    report = report_from_json(report_path.read_text(encoding="utf-8"))
    formats = (args.format,) if args.format else ("md", "csv")
    for fmt in formats:
        if fmt == "md":
            target = run_dir / "report.md"
            target.write_text(render_markdown(report), encoding="utf-8")
        elif fmt == "csv":
            target = run_dir / "report.csv"
            target.write_text(render_csv(report), encoding="utf-8")
        else:
            target = report_path
        print(f"wrote {target}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "eval":
        return cmd_eval(args)
    return cmd_report(args)


if __name__ == "__main__":
    sys.exit(main())
