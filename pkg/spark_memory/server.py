"""
Spark MCP tool server
JSON-RPC 2.0 over newline-delimited stdio or HTTP (FastAPI + uvicorn), four memory tools
"""

import json
import logging
import signal
import socket
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, TextIO, Type

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as SchemaError
from starlette.concurrency import run_in_threadpool

from . import __version__
from .errors import ConfigError, SparkError
from .learning import EpochScheduler
from .models import Outcome, dumps
from .service import SparkService

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = "2024-11-05"
SERVER_NAME = "spark-memory"

# ============================================================================
# ERROR TABLE
# ============================================================================

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
INTERNAL_ERROR = -32603
REQUEST_TOO_LARGE = -32010

ERROR_CODES = {
    -32700: "parse error",
    -32600: "invalid request",
    -32601: "method not found",
    -32602: "invalid params",
    -32603: "internal error",
    -32004: "not found",
    -32009: "conflict",
    -32010: "request too large",
    -32050: "upstream provider unavailable",
    -32051: "provider misconfigured",
    -32060: "storage failure",
}


def error_response(request_id: Any, code: int, detail: str = "", data: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    message = ERROR_CODES.get(code, "error")
    if detail:
        message = f"{message}: {detail}"
    error: Dict[str, Any] = {"code": code, "message": message}
    if data:
        error["data"] = data
    return {"jsonrpc": "2.0", "id": request_id, "error": error}


def result_response(request_id: Any, result: Any) -> Dict[str, Any]:
    return {"jsonrpc": "2.0", "id": request_id, "result": result}


# ============================================================================
# TOOL SCHEMAS
# ============================================================================

class GetRecommendationInput(BaseModel):
    model_config = ConfigDict(extra="forbid")

    problem: str = Field(..., min_length=1, description="The coding problem the agent is facing")
    code_context: Optional[str] = Field(default=None, description="Relevant code the agent is working on")


class SubmitFeedbackInput(BaseModel):
    model_config = ConfigDict(extra="forbid")

    recommendation_id: str = Field(..., min_length=1, description="Id returned by get_recommendation")
    outcome: Outcome = Field(..., description="How useful the recommendation turned out to be")
    hindsight_feedback: Optional[str] = Field(default=None, description="What would have helped, in hindsight")
    agent_tag: str = Field(default="", max_length=200, description="Opaque contributor identifier")


class IngestDocumentationInput(BaseModel):
    model_config = ConfigDict(extra="forbid")

    blobs: List[Any] = Field(
        ..., description="Documentation blobs: objects with source, path, title, body, symbols, metadata"
    )
    source: Optional[str] = Field(default=None, description="Corpus name for blobs that do not carry one")


class MemoryStatsInput(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CitationOutput(BaseModel):
    ref: str
    locator: str
    kind: str


class IntentOutput(BaseModel):
    normalized_query: str
    task_kind: str
    named_symbols: List[str]
    target_libraries: List[str]
    raw_problem: str


class RecommendationOutput(BaseModel):
    recommendation_id: str
    intent: IntentOutput
    guidance_text: str
    best_practices: List[str]
    citations: List[CitationOutput]
    epoch_number: int
    created_at: str
    code_context: str
    problem_digest: str


class FeedbackAck(BaseModel):
    trace_id: str


class IngestReportOutput(BaseModel):
    inserted: int
    deduplicated: int
    rejected: int
    rejections: List[Dict[str, Any]]


class MemoryStatsOutput(BaseModel):
    epoch_number: int
    doc_count: int
    trace_count: int
    insight_count: int
    index_version: str


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    description: str
    input_model: Type[BaseModel]
    output_model: Type[BaseModel]
    handler: Callable[[SparkService, Any], Dict[str, Any]]
    examples: tuple = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "inputSchema": self.input_model.model_json_schema(),
            "outputSchema": self.output_model.model_json_schema(),
        }


def _get_recommendation(service: SparkService, args: GetRecommendationInput) -> Dict[str, Any]:
    return service.recommend(args.problem, args.code_context or "").to_dict()


def _submit_feedback(service: SparkService, args: SubmitFeedbackInput) -> Dict[str, Any]:
    trace_id = service.submit_feedback(
        args.recommendation_id, args.outcome.value, args.hindsight_feedback, args.agent_tag
    )
    return {"trace_id": trace_id}


def _ingest_documentation(service: SparkService, args: IngestDocumentationInput) -> Dict[str, Any]:
    return service.ingest_documentation(args.blobs, source=args.source).to_dict()


def _memory_stats(service: SparkService, args: MemoryStatsInput) -> Dict[str, Any]:
    return service.memory_stats()


TOOLS = (
    ToolDescriptor(
        name="get_recommendation",
        description="Get contextualized, cited guidance for a coding problem from the shared memory",
        input_model=GetRecommendationInput,
        output_model=RecommendationOutput,
        handler=_get_recommendation,
        examples=({"problem": "How do I drop the timezone from a pandas datetime column?"},),
    ),
    ToolDescriptor(
        name="submit_feedback",
        description="Report how useful a recommendation was, with optional hindsight on what would have helped",
        input_model=SubmitFeedbackInput,
        output_model=FeedbackAck,
        handler=_submit_feedback,
        examples=({
            "recommendation_id": "rec-0123",
            "outcome": "rejected",
            "hindsight_feedback": "use tz_convert, not tz_localize",
        },),
    ),
    ToolDescriptor(
        name="ingest_documentation",
        description="Add documentation blobs to the shared knowledge base",
        input_model=IngestDocumentationInput,
        output_model=IngestReportOutput,
        handler=_ingest_documentation,
        examples=({"blobs": [{"source": "pandas", "path": "api/Series.dt.tz_convert", "body": "Convert tz-aware values."}]},),
    ),
    ToolDescriptor(
        name="memory_stats",
        description="Counts describing the current state of the shared memory",
        input_model=MemoryStatsInput,
        output_model=MemoryStatsOutput,
        handler=_memory_stats,
        examples=({},),
    ),
)


# ============================================================================
# DISPATCH
# ============================================================================

def _valid_id(value: Any) -> bool:
    return value is None or isinstance(value, str) or (isinstance(value, int) and not isinstance(value, bool))


class Dispatcher:
    """Transport-independent JSON-RPC handling: text in, text (or nothing) out"""

    def __init__(self, service: SparkService, max_request_bytes: int = 1024 * 1024):
        self.service = service
        self.max_request_bytes = max_request_bytes
        self.tools = {tool.name: tool for tool in TOOLS}

    def handle_text(self, text: str) -> Optional[str]:
        if len(text.encode("utf-8")) > self.max_request_bytes:
            return dumps(error_response(None, REQUEST_TOO_LARGE, f"limit is {self.max_request_bytes} bytes"))
        try:
            payload = json.loads(text)
        except ValueError as e:
            return dumps(error_response(None, PARSE_ERROR, str(e)))

        if isinstance(payload, list):
            if not payload:
                return dumps(error_response(None, INVALID_REQUEST, "empty batch"))
            responses = [r for r in (self.handle_message(m) for m in payload) if r is not None]
            return dumps(responses) if responses else None
        response = self.handle_message(payload)
        return dumps(response) if response is not None else None

    def handle_message(self, message: Any) -> Optional[Dict[str, Any]]:
        if not isinstance(message, dict):
            return error_response(None, INVALID_REQUEST, "request must be an object")
        request_id = message.get("id")
        if not _valid_id(request_id):
            return error_response(None, INVALID_REQUEST, "id must be a string, integer or null")
        method = message.get("method")
        params = message.get("params", {})
        if message.get("jsonrpc") != "2.0" or not isinstance(method, str) or not isinstance(params, (dict, list)):
            return error_response(request_id, INVALID_REQUEST, "expected jsonrpc 2.0 with a string method")

        is_notification = "id" not in message
        try:
            result = self.dispatch(method, params)
            response = result_response(request_id, result)
        except SparkError as e:
            data = {"stage": e.stage} if e.stage else None
            if e.rpc_code == INTERNAL_ERROR:
                logger.error(f"❌ {method} failed: {e}")
            response = error_response(request_id, e.rpc_code, str(e.message), data)
        except Exception as e:
            logger.exception(f"❌ Unexpected failure in {method}: {e}")
            response = error_response(request_id, INTERNAL_ERROR, type(e).__name__)
        return None if is_notification else response

    def dispatch(self, method: str, params: Any) -> Any:
        if method == "initialize":
            return {
                "protocolVersion": PROTOCOL_VERSION,
                "capabilities": {"tools": {"listChanged": False}},
                "serverInfo": {"name": SERVER_NAME, "version": __version__},
            }
        if method in ("notifications/initialized", "ping"):
            return {}
        if method == "tools/list":
            return {"tools": [tool.to_dict() for tool in TOOLS]}
        if method == "tools/call":
            if not isinstance(params, dict) or not isinstance(params.get("name"), str):
                raise _InvalidParams("tools/call needs a tool name")
            payload = self.call_tool(params["name"], params.get("arguments") or {})
            return {
                "content": [{"type": "text", "text": dumps(payload)}],
                "structuredContent": payload,
                "isError": False,
            }
        if method in self.tools:
            return self.call_tool(method, params)
        raise _MethodNotFound(method)

    def call_tool(self, name: str, arguments: Any) -> Dict[str, Any]:
        tool = self.tools.get(name)
        if tool is None:
            raise _InvalidParams(f"unknown tool {name!r}")
        if not isinstance(arguments, dict):
            raise _InvalidParams("tool arguments must be an object")
        try:
            args = tool.input_model.model_validate(arguments)
        except SchemaError as e:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in err['loc']) or '(root)'}: {err['msg']}" for err in e.errors()
            )
            raise _InvalidParams(problems) from None
        payload = tool.handler(self.service, args)
        return tool.output_model.model_validate(payload).model_dump(mode="json")


class _InvalidParams(SparkError):
    rpc_code = INVALID_PARAMS


class _MethodNotFound(SparkError):
    rpc_code = METHOD_NOT_FOUND


# ============================================================================
# TRANSPORTS
# ============================================================================

class _Shutdown(Exception):
    pass


def serve_stdio(dispatcher: Dispatcher, stdin: TextIO = None, stdout: TextIO = None, max_workers: int = 8) -> None:
    """One compact JSON document per line; in-flight requests drain on EOF or SIGTERM"""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    write_lock = threading.Lock()

    def work(line: str) -> None:
        response = dispatcher.handle_text(line)
        if response is not None:
            with write_lock:
                stdout.write(response + "\n")
                stdout.flush()

    def on_sigterm(signum, frame):
        raise _Shutdown()

    previous = None
    if threading.current_thread() is threading.main_thread():
        previous = signal.signal(signal.SIGTERM, on_sigterm)

    logger.info("🚀 Serving JSON-RPC on stdio")
    pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="spark-rpc")
    try:
        for line in stdin:
            if line.strip():
                pool.submit(work, line.rstrip("\r\n"))
    except (_Shutdown, KeyboardInterrupt):
        logger.info("🛑 Shutdown requested, draining in-flight requests")
    finally:
        pool.shutdown(wait=True)
        if previous is not None:
            signal.signal(signal.SIGTERM, previous)
    logger.info("👋 stdio server stopped")


def create_app(service: SparkService, max_request_bytes: int = 1024 * 1024) -> FastAPI:
    """HTTP transport: POST /rpc, GET /tools, GET /healthz"""
    dispatcher = Dispatcher(service, max_request_bytes)
    app = FastAPI(
        title="Spark Memory",
        description="Shared experiential memory for coding agents (JSON-RPC 2.0 tool server)",
        version=__version__,
    )

    def too_large() -> Response:
        body = dumps(error_response(None, REQUEST_TOO_LARGE, f"limit is {max_request_bytes} bytes"))
        return Response(content=body, status_code=413, media_type="application/json")

    @app.post("/rpc")
    async def rpc(request: Request):
        declared = request.headers.get("content-length", "")
        if declared.isdigit() and int(declared) > max_request_bytes:
            return too_large()
        body = await request.body()
        if len(body) > max_request_bytes:
            return too_large()
        try:
            text = body.decode("utf-8")
        except UnicodeDecodeError:
            return Response(
                content=dumps(error_response(None, PARSE_ERROR, "body is not UTF-8")),
                media_type="application/json",
            )
        response = await run_in_threadpool(dispatcher.handle_text, text)
        if response is None:
            return Response(status_code=204)
        return Response(content=response, media_type="application/json")

    @app.get("/tools")
    async def tools():
        return {"tools": [tool.to_dict() for tool in TOOLS]}

    @app.get("/healthz")
    async def healthz():
        latest = await run_in_threadpool(service.store.latest_epoch)
        return JSONResponse({"status": "ok", "epoch_number": latest.epoch_number if latest else None})

    return app


def ensure_port_free(host: str, port: int) -> None:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.bind((host, port))
    except OSError as e:
        raise ConfigError(f"cannot listen on {host}:{port}: {e.strerror or e}") from None
    finally:
        sock.close()


def serve(service: SparkService, transport: Optional[str] = None, host: Optional[str] = None,
          port: Optional[int] = None) -> None:
    """Run until EOF (stdio) or a shutdown signal"""
    cfg = service.config.server
    transport = transport or cfg.transport
    host = host or cfg.host
    port = port if port is not None else cfg.port
    if transport not in ("stdio", "http"):
        raise ConfigError(f"unknown transport {transport!r}")
    if transport == "http":
        ensure_port_free(host, port)

    service.warm()
    scheduler = None
    interval = service.config.learning.schedule_interval()
    if interval:
        scheduler = EpochScheduler(service.learning, interval).start()
    try:
        if transport == "stdio":
            serve_stdio(Dispatcher(service, cfg.max_request_bytes), max_workers=cfg.max_workers)
        else:
            import uvicorn

            logger.info(f"🚀 Serving JSON-RPC on http://{host}:{port}/rpc")
            uvicorn.run(create_app(service, cfg.max_request_bytes), host=host, port=port, log_level="warning")
    finally:
        if scheduler is not None:
            scheduler.stop()
