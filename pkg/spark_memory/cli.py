"""
Spark operator CLI
python -m spark_memory <command>: ingest, epoch run, query, stats, export, serve, synth-traces, eval
Exit codes: 0 success, 1 domain or I/O error, 2 usage error
"""

import argparse
import json
import logging
import sys
from typing import Any, List, Optional, Sequence

from .config import SparkConfig, load_config
from .errors import SparkError, ValidationError
from .evalkit import evaluate_file
from .gateway import Gateway
from .learning import generate_synthetic_traces
from .logs import setup_logging
from .models import dumps, parse_timestamp
from .service import EXPORTABLE, SparkService

logger = logging.getLogger(__name__)


def print_json(data: Any, pretty: bool = False) -> None:
    if pretty:
        sys.stdout.write(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    else:
        sys.stdout.write(dumps(data) + "\n")
    sys.stdout.flush()


def read_jsonl(path: str) -> List[Any]:
    """Parsed lines of a JSON Lines file; an unparseable line becomes None so the store rejects it by position"""
    entries = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                entries.append(json.loads(line))
            except ValueError:
                logger.warning(f"⚠️  {path}:{lineno} is not valid JSON")
                entries.append(None)
    return entries


def read_texts(path: str, field_names: Sequence[str]) -> List[str]:
    """synth-traces input: each line a JSON string or an object carrying one of field_names"""
    texts = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                value = json.loads(line)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: invalid JSON") from None
            if isinstance(value, dict):
                value = next((value[f] for f in field_names if isinstance(value.get(f), str)), None)
            if not isinstance(value, str):
                raise ValidationError(f"{path}:{lineno}: expected a string or an object with {'/'.join(field_names)}")
            texts.append(value)
    return texts


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_ingest(args, config: SparkConfig) -> Any:
    entries = read_jsonl(args.input)
    with SparkService(config) as service:
        if args.kind == "traces":
            return service.ingest_traces(entries).to_dict()
        return service.store.put_doc_blobs(
            [{**e, "source": e.get("source") or args.source} if args.source and isinstance(e, dict) else e
             for e in entries]
        ).to_dict()


def cmd_epoch(args, config: SparkConfig) -> Any:
    with SparkService(config) as service:
        return service.run_epoch().to_dict()


def cmd_query(args, config: SparkConfig) -> Any:
    with SparkService(config) as service:
        return service.recommend(args.problem, args.code_context or "", epoch=args.epoch).to_dict()


def cmd_stats(args, config: SparkConfig) -> Any:
    with SparkService(config) as service:
        return service.memory_stats()


def cmd_export(args, config: SparkConfig) -> Any:
    with SparkService(config) as service:
        return service.export(args.what, args.epoch)


def cmd_serve(args, config: SparkConfig) -> Any:
    from .server import serve

    with SparkService(config) as service:
        serve(service, transport=args.transport, host=args.host, port=args.port)
    return None


def cmd_synth_traces(args, config: SparkConfig) -> Any:
    problems = read_texts(args.problems, ("problem", "text"))
    solutions = read_texts(args.solutions, ("solution", "text"))
    base_time = parse_timestamp(args.base_time) if args.base_time else None
    traces = generate_synthetic_traces(
        problems, solutions, Gateway(config.gateway), agent_tag=args.agent_tag, base_time=base_time
    )
    for trace in traces:
        sys.stdout.write(dumps(trace.to_dict()) + "\n")
    sys.stdout.flush()
    logger.info(f"✅ Generated {len(traces)} synthetic traces")
    return None


def cmd_eval(args, config: SparkConfig) -> Any:
    return evaluate_file(args.scores, args.mode)


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spark", description="Spark shared memory operator CLI")
    p.add_argument("--config", help="YAML config file (default: $SPARK_CONFIG)")
    p.add_argument("--store-root", help="Store directory (overrides config and $SPARK_STORE_ROOT)")
    p.add_argument("--pretty", action="store_true", help="Indented JSON output")
    p.add_argument("--log-level", help="Log level (default: $SPARK_LOG_LEVEL or INFO)")

    sp = p.add_subparsers(dest="cmd", required=True)

    ingest = sp.add_parser("ingest", help="Ingest documentation blobs or traces from JSON Lines")
    ingest.add_argument("--input", required=True)
    ingest.add_argument("--source", help="Corpus name for blobs that do not carry one")
    ingest.add_argument("--kind", choices=("docs", "traces"), default="docs")
    ingest.set_defaults(handler=cmd_ingest)

    epoch = sp.add_parser("epoch", help="Memory epoch management")
    epoch_sp = epoch.add_subparsers(dest="epoch_cmd", required=True)
    epoch_sp.add_parser("run", help="Run one learning epoch over new traces").set_defaults(handler=cmd_epoch)

    query = sp.add_parser("query", help="Get a recommendation for a problem")
    query.add_argument("--problem", required=True)
    query.add_argument("--code-context")
    query.add_argument("--epoch", type=int, help="Pin a historical memory epoch")
    query.set_defaults(handler=cmd_query)

    sp.add_parser("stats", help="Memory counts").set_defaults(handler=cmd_stats)

    export = sp.add_parser("export", help="Dump epochs, a snapshot, traces or insights as JSON")
    export.add_argument("--what", choices=EXPORTABLE, required=True)
    export.add_argument("--epoch", type=int)
    export.set_defaults(handler=cmd_export)

    serve = sp.add_parser("serve", help="Run the MCP tool server")
    serve.add_argument("--transport", choices=("stdio", "http"))
    serve.add_argument("--host")
    serve.add_argument("--port", type=int)
    serve.set_defaults(handler=cmd_serve)

    synth = sp.add_parser("synth-traces", help="Generate synthetic traces from problems and reference solutions")
    synth.add_argument("--problems", required=True)
    synth.add_argument("--solutions", required=True)
    synth.add_argument("--agent-tag", default="synthetic")
    synth.add_argument("--base-time", help="RFC 3339 instant for the first trace")
    synth.set_defaults(handler=cmd_synth_traces)

    ev = sp.add_parser("eval", help="Aggregate judge score records")
    ev.add_argument("--scores", required=True)
    ev.add_argument("--mode", choices=("quality", "helpfulness"), required=True)
    ev.set_defaults(handler=cmd_eval)

    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    setup_logging(args.log_level)
    try:
        config = load_config(args.config)
        if args.store_root:
            config.store.root = args.store_root
        result = args.handler(args, config)
    except SparkError as e:
        sys.stderr.write(f"❌ {e}\n")
        return 1
    except (OSError, UnicodeDecodeError) as e:
        sys.stderr.write(f"❌ {e}\n")
        return 1
    if result is not None:
        print_json(result, args.pretty)
    return 0


if __name__ == "__main__":
    sys.exit(main())
