"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 media error, 4 backend
failure, 5 bad input data (manifest, transcript, trace). Verdicts never
change the exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

from .engine import ConfigError, Engine, EngineConfig, Mode, VerificationTrace
from .evaluation import (
    ABLATION_MODES,
    Label,
    ManifestError,
    ablation_table,
    evaluate,
    load_manifest,
    metrics_table,
    run_ablation,
    sweep_table,
    sweep_threshold,
)
from .gateway import (
    GatewayError,
    LiveBackend,
    ScriptedBackend,
    Transcript,
    TranscriptError,
    TranscriptWriter,
    record_transcript,
)
from .media import MediaError, load_media
from .tree import format_code

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MEDIA = 3
EXIT_BACKEND = 4
EXIT_DATA = 5

DEFAULT_EXTERNAL_MODEL = "gpt-4o-2024-08-06"
DEFAULT_INTERNAL_MODEL = "o3-mini-2025-01-31"

log = logging.getLogger("epoche")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("engine")
    g.add_argument("--config", type=Path, help="flat JSON file of engine settings")
    g.add_argument("--mode", choices=[m.value for m in Mode])
    g.add_argument("--depth", type=int, dest="depth_bound", help="maximum tree depth N")
    g.add_argument("--branch-cap", type=int)
    g.add_argument("--node-budget", type=int)
    g.add_argument("--threshold", type=int, help="valid-count threshold M")
    g.add_argument("--frames", type=int, dest="frame_count", help="frames sampled per video")
    g.add_argument("--max-parallel", type=int, dest="max_parallel_calls")
    b = p.add_argument_group("backends")
    b.add_argument("--transcript", type=Path, help="replay model calls from a transcript")
    b.add_argument("--sequence", action="store_true",
                   help="replay the transcript in file order, ignoring fingerprints")
    b.add_argument("--record", type=Path, help="tee every model call to this transcript")
    b.add_argument("--external-model")
    b.add_argument("--internal-model")
    p.add_argument("--out", type=Path, default=Path("epoche-out"), help="output directory")


def _add_sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fraction", type=float, help="evaluate a seeded fraction of the manifest")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epoche", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="verify one image or video")
    p.add_argument("media")
    _add_engine_flags(p)

    p = sub.add_parser("record", help="verify one sample against live backends, recording a transcript")
    p.add_argument("media")
    _add_engine_flags(p)

    p = sub.add_parser("evaluate", help="evaluate a labelled manifest")
    p.add_argument("manifest", type=Path)
    _add_engine_flags(p)
    _add_sampling_flags(p)

    p = sub.add_parser("ablate", help="evaluate a manifest under every ablation mode")
    p.add_argument("manifest", type=Path)
    p.add_argument("--modes", nargs="+", choices=[m.value for m in Mode],
                   default=[m.value for m in ABLATION_MODES])
    _add_engine_flags(p)
    _add_sampling_flags(p)

    p = sub.add_parser("sweep-threshold", help="re-threshold stored valid counts")
    p.add_argument("manifest", type=Path)
    p.add_argument("--traces", type=Path, help="directory of per-sample traces from evaluate")
    p.add_argument("--m-min", type=int, default=1)
    p.add_argument("--m-max", type=int, default=5)
    _add_engine_flags(p)
    _add_sampling_flags(p)

    p = sub.add_parser("inspect-trace", help="print a trace and check it re-serializes identically")
    p.add_argument("trace", type=Path)
    p.add_argument("--json", action="store_true", help="print the re-serialized trace")
    return parser


# ---------------------------------------------------------------- setup


def engine_config(args: argparse.Namespace) -> EngineConfig:
    data: dict[str, Any] = {}
    if getattr(args, "config", None):
        data.update(EngineConfig.from_file(args.config).to_dict())
    for key in ("mode", "depth_bound", "branch_cap", "node_budget", "threshold",
                "frame_count", "max_parallel_calls"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    return EngineConfig.from_dict(data)


@dataclass
class Backends:
    external: Any
    internal: Any
    writer: Optional[TranscriptWriter] = None
    replay: bool = False

    def engine(self) -> Engine:
        if self.replay:
            return Engine(self.external, self.internal, clock=lambda: 0.0)
        return Engine(self.external, self.internal)

    def close(self) -> None:
        if self.writer is not None:
            self.writer.close()
        for b in (self.external, self.internal):
            inner = getattr(b, "inner", b)
            if hasattr(inner, "close"):
                inner.close()


def build_backends(args: argparse.Namespace, require_live: bool = False) -> Backends:
    ext_model = args.external_model or os.environ.get("EPOCHE_EXTERNAL_MODEL") or DEFAULT_EXTERNAL_MODEL
    int_model = args.internal_model or os.environ.get("EPOCHE_INTERNAL_MODEL") or DEFAULT_INTERNAL_MODEL
    if args.transcript and require_live:
        raise CliError("record needs live backends, not --transcript", EXIT_CONFIG)
    if args.transcript:
        try:
            transcript = Transcript.load(args.transcript)
        except OSError as exc:
            raise CliError(f"cannot read transcript: {exc}", EXIT_DATA) from exc
        except TranscriptError as exc:
            raise CliError(str(exc), EXIT_DATA) from exc
        ext = ScriptedBackend(transcript, ext_model, sequence=args.sequence)
        inn = ScriptedBackend(transcript, int_model, sequence=args.sequence)
        backends = Backends(ext, inn, replay=True)
    else:
        try:
            ext = LiveBackend.from_env("external", model=ext_model)
            inn = LiveBackend.from_env("internal", model=int_model)
        except GatewayError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from exc
        backends = Backends(ext, inn)
    if args.record:
        try:
            writer = TranscriptWriter(args.record)
        except TranscriptError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from exc
        backends.external = record_transcript(backends.external, writer)
        backends.internal = record_transcript(backends.internal, writer)
        backends.writer = writer
    return backends


def _safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("._") or "sample"


def _write_json(path: Path, doc: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _load_records(args) -> list:
    try:
        return load_manifest(args.manifest, args.fraction, args.seed)
    except ManifestError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc


# ---------------------------------------------------------------- commands


def cmd_verify(args: argparse.Namespace, require_live: bool = False) -> int:
    config = engine_config(args)
    try:
        media = load_media(args.media, config.frame_count)
    except MediaError as exc:
        raise CliError(str(exc), EXIT_MEDIA) from exc
    backends = build_backends(args, require_live=require_live)
    try:
        trace = backends.engine().run(media, config)
    finally:
        backends.close()
    trace_path = trace.write(args.out / f"{_safe_name(Path(args.media).name)}.trace.json")
    result = {
        "command": args.command,
        "media": args.media,
        "status": trace.status,
        "error": trace.error,
        "trace": str(trace_path),
        "verdict": None if trace.verdict is None else trace.verdict.to_dict(),
        "accounting": trace.accounting,
    }
    _write_json(args.out / "result.json", result)
    if not trace.ok:
        print(f"FAILED: {trace.error}", file=sys.stderr)
        print(f"partial trace: {trace_path}", file=sys.stderr)
        return EXIT_BACKEND
    v = trace.verdict
    print(v.decision.value)
    print(f"m={v.valid_count} M={v.threshold}")
    for code, chain in v.chains.items():
        print(f"chain {format_code(code)}: {' <- '.join(format_code(c) for c in chain)}")
        print(f"  {trace.tree[code].statement}")
    print(f"calls={trace.accounting['calls_total']} trace={trace_path}")
    return EXIT_OK


def _evaluate_once(args, config, records):
    backends = build_backends(args)
    try:
        return evaluate(backends.engine, records, config, max_parallel=config.max_parallel_calls)
    finally:
        backends.close()


def _write_traces(out: Path, result) -> None:
    for sid, trace in result.traces.items():
        trace.write(out / "traces" / f"{_safe_name(sid)}.trace.json")


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = engine_config(args)
    records = _load_records(args)
    result = _evaluate_once(args, config, records)
    _write_traces(args.out, result)
    doc = {"command": "evaluate", "mode": config.mode.value, "config": config.to_dict(),
           "samples_in_manifest": len(records), **result.to_dict()}
    _write_json(args.out / "metrics.json", doc)
    print(metrics_table([(f"epoche ({config.mode.value})", result.metrics)]))
    if result.failures:
        print(f"{len(result.failures)} failed sample(s); see {args.out / 'metrics.json'}")
    if records and len(result.failures) == len(records):
        return EXIT_BACKEND
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = engine_config(args)
    records = _load_records(args)
    backends = build_backends(args)
    try:
        results = run_ablation(backends.engine, records, config, [Mode(m) for m in args.modes],
                               max_parallel=config.max_parallel_calls)
    finally:
        backends.close()
    doc = {"command": "ablate", "config": config.to_dict(),
           "modes": {mode.value: res.to_dict() for mode, res in results.items()}}
    _write_json(args.out / "ablation.json", doc)
    print(ablation_table(results))
    return EXIT_OK


def cmd_sweep_threshold(args: argparse.Namespace) -> int:
    if args.m_min < 1 or args.m_max < args.m_min:
        raise CliError("threshold range must satisfy 1 <= m-min <= m-max", EXIT_CONFIG)
    records = _load_records(args)
    samples: list[tuple[int, Label]] = []
    if args.traces is not None:
        paths = sorted(args.traces.glob("*.trace.json")) if args.traces.is_dir() else []
        if not paths:
            raise CliError(f"no traces in {args.traces}", EXIT_DATA)
        for record in records:
            path = args.traces / f"{_safe_name(record.id)}.trace.json"
            if not path.is_file():
                raise CliError(f"missing trace for sample {record.id}", EXIT_DATA)
            try:
                trace = VerificationTrace.read(path)
            except (ValueError, KeyError) as exc:
                raise CliError(f"unreadable trace {path}: {exc}", EXIT_DATA) from exc
            if trace.ok:
                samples.append((trace.verdict.valid_count, record.label))
    elif args.transcript is not None:
        result = _evaluate_once(args, engine_config(args), records)
        samples = [(row["valid_count"], Label(row["label"])) for row in result.rows]
    else:
        raise CliError("sweep-threshold needs --traces or --transcript", EXIT_CONFIG)
    if not samples:
        raise CliError("no completed samples to sweep", EXIT_DATA)
    sweep = sweep_threshold(samples, range(args.m_min, args.m_max + 1))
    _write_json(args.out / "sweep.json", {"command": "sweep-threshold", **sweep.to_dict()})
    print(sweep_table(sweep))
    print(f"best M={sweep.best_threshold}")
    return EXIT_OK


def cmd_inspect_trace(args: argparse.Namespace) -> int:
    try:
        original = args.trace.read_text(encoding="utf-8")
        trace = VerificationTrace.from_json(original)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"unreadable trace {args.trace}: {exc}", EXIT_DATA) from exc
    again = trace.to_json()
    if args.json:
        sys.stdout.write(again)
    else:
        print(f"status: {trace.status}" + (f" ({trace.error})" if trace.error else ""))
        print(f"media: {trace.media.get('source')} [{trace.media.get('kind')}]")
        print(f"mode: {trace.config.mode.value}  N={trace.config.depth_bound}  M={trace.config.threshold}")
        for node in trace.tree:
            raw = "-" if node.raw_flag is None else node.raw_flag.name
            res = "-" if node.resolved_flag is None else node.resolved_flag.name
            print(f"{'  ' * (node.depth - 1)}{format_code(node.code)} [{raw} -> {res}] {node.statement}")
        if trace.verdict is not None:
            print(f"decision: {trace.verdict.decision.value} (m={trace.verdict.valid_count})")
    identical = again == original
    print(f"round-trip: {'identical' if identical else 'DIFFERS'}", file=sys.stderr)
    return EXIT_OK if identical else EXIT_DATA


COMMANDS = {
    "verify": cmd_verify,
    "record": lambda a: cmd_verify(a, require_live=True),
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep-threshold": cmd_sweep_threshold,
    "inspect-trace": cmd_inspect_trace,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "record" and not args.record:
        parser.error("record requires --record PATH")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
