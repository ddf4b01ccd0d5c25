"""HTTP service over the retrieval environment, plus a client for it.

Endpoints (all JSON):
    POST /lookup     {diseases}                  -> {results}
    POST /match      {phenotypes, top_n?}        -> {results}
    POST /search     {source, queries, top_k?}   -> {results}
    POST /summarize  {source, query, document}   -> {answer, fallback}
    POST /<tool>/batch  {requests: [...]}        -> {responses: [...]}
    GET  /healthz, GET /stats

Errors are ``{"error": {"code", "message"}}`` with a 4xx or 5xx status. Bodies
are canonical JSON (sorted keys, no spaces), so equal requests give equal bytes.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import threading
import time
from contextlib import asynccontextmanager
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Sequence

from fastapi import FastAPI, Request
from fastapi.responses import Response

from .retrieval.env import DiagnosticEnvironment, EnvConfig, ToolEnvironment
from .retrieval.tools import (
    SUMMARIZER_SYSTEM_PROMPT,
    LookupResult,
    MatchResult,
    SearchHit,
    SummaryResult,
    ToolError,
    summarizer_user_prompt,
)

log = logging.getLogger(__name__)
request_log = logging.getLogger("dxrag.requests")

TOOLS = ("lookup", "match", "search", "summarize")
ENV_HOST, ENV_PORT, ENV_STORE, ENV_SUMMARIZER = (
    "DXRAG_HOST", "DXRAG_PORT", "DXRAG_STORE", "DXRAG_SUMMARIZER_URL")


def canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class ServiceConfig:
    max_batch: int = 64
    timeout: float = 30.0
    workers: int = 8
    only: tuple[str, ...] = TOOLS

    def __post_init__(self):
        unknown = set(self.only) - set(TOOLS)
        if unknown:
            raise ValueError(f"unknown endpoints in only: {sorted(unknown)}")
        if self.max_batch < 1 or self.timeout <= 0 or self.workers < 1:
            raise ValueError("max_batch, timeout and workers must be positive")


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, **extra):
        super().__init__(message)
        self.status, self.code, self.message, self.extra = status, code, message, extra

    def body(self) -> dict:
        return {"error": {"code": self.code, "message": self.message, **self.extra}}


def _str_list(body: dict, key: str) -> list[str]:
    value = body.get(key)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ApiError(400, "invalid_request", f"'{key}' must be a list of strings")
    return value


def _str(body: dict, key: str) -> str:
    value = body.get(key)
    if not isinstance(value, str):
        raise ApiError(400, "invalid_request", f"'{key}' must be a string")
    return value


def _opt_int(body: dict, key: str, lo: int, hi: int) -> int | None:
    value = body.get(key)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or not lo <= value <= hi:
        raise ApiError(400, "invalid_request", f"'{key}' must be an integer in [{lo}, {hi}]")
    return value


class ToolHandlers:
    """Request dict -> response dict for each tool; pure given the environment."""

    def __init__(self, env: ToolEnvironment):
        self.env = env

    def lookup(self, body: dict) -> dict:
        results = self.env.lookup(_str_list(body, "diseases"))
        return {"results": [r.to_dict() for r in results]}

    def match(self, body: dict) -> dict:
        phenotypes = _str_list(body, "phenotypes")
        top_n = _opt_int(body, "top_n", 1, 1000)
        return {"results": [r.to_dict() for r in self.env.match(phenotypes, top_n)]}

    def search(self, body: dict) -> dict:
        hits = self.env.search(_str(body, "source"), _str_list(body, "queries"),
                               _opt_int(body, "top_k", 1, 100))
        return {"results": [h.to_dict() for h in hits]}

    def summarize(self, body: dict) -> dict:
        result = self.env.summarize(_str(body, "source"), _str(body, "query"), _str(body, "document"))
        return {"answer": result.text, "fallback": result.fallback}

    def handle(self, tool: str, body: Any) -> tuple[int, dict]:
        """Status and body for one request; never raises."""
        try:
            if not isinstance(body, dict):
                raise ApiError(400, "invalid_request", "request body must be a JSON object")
            return 200, getattr(self, tool)(body)
        except ApiError as exc:
            return exc.status, exc.body()
        except ToolError as exc:
            return 400, {"error": {"code": exc.code, "message": str(exc)}}
        except Exception as exc:
            log.exception("internal error in %s", tool)
            return 500, {"error": {"code": "internal_error", "message": type(exc).__name__}}


def create_app(env: ToolEnvironment | Callable[[], ToolEnvironment],
               config: ServiceConfig = ServiceConfig()) -> FastAPI:
    """Build the app. ``env`` may be a factory, which then loads in the
    background while /healthz reports 503."""
    pool = ThreadPoolExecutor(max_workers=config.workers)

    @asynccontextmanager
    async def lifespan(_app):
        yield
        pool.shutdown(wait=True)  # drain in-flight work

    app = FastAPI(title="dxrag retrieval service", lifespan=lifespan)
    state: dict[str, Any] = {"handlers": None, "env": None, "error": None}
    counters = {"requests": 0, "errors": 0}
    counter_lock = threading.Lock()

    def install(e: ToolEnvironment) -> None:
        state["env"], state["handlers"] = e, ToolHandlers(e)

    if callable(env) and not isinstance(env, ToolEnvironment):
        def load():
            try:
                install(env())
            except Exception as exc:  # reported through /healthz
                log.exception("index load failed")
                state["error"] = str(exc)
        threading.Thread(target=load, daemon=True).start()
    else:
        install(env)

    def respond(status: int, body: dict | bytes) -> Response:
        content = body if isinstance(body, bytes) else canonical(body)
        return Response(content=content, status_code=status, media_type="application/json")

    @app.middleware("http")
    async def log_requests(request: Request, call_next):
        start = time.perf_counter()
        response = await call_next(request)
        with counter_lock:
            counters["requests"] += 1
            if response.status_code >= 400:
                counters["errors"] += 1
        request_log.info(json.dumps({
            "method": request.method, "path": request.url.path, "status": response.status_code,
            "ms": round(1000 * (time.perf_counter() - start), 3)}, sort_keys=True))
        return response

    async def read_json(request: Request) -> Any:
        raw = await request.body()
        try:
            return json.loads(raw)
        except (ValueError, UnicodeDecodeError) as exc:
            raise ApiError(400, "malformed_json", f"body is not valid JSON: {exc}")

    async def run(fn, *args):
        loop = asyncio.get_running_loop()
        try:
            return await asyncio.wait_for(loop.run_in_executor(pool, fn, *args), config.timeout)
        except asyncio.TimeoutError:
            raise ApiError(504, "timeout", f"request exceeded {config.timeout}s")

    def handlers_or_raise() -> ToolHandlers:
        if state["handlers"] is None:
            raise ApiError(503, "not_ready", "indexes are still loading")
        return state["handlers"]

    def single(tool: str):
        async def endpoint(request: Request):
            try:
                handlers = handlers_or_raise()
                body = await read_json(request)
                status, out = await run(handlers.handle, tool, body)
            except ApiError as exc:
                return respond(exc.status, exc.body())
            return respond(status, out)
        return endpoint

    def batch(tool: str):
        def handle_all(handlers: ToolHandlers, items: list) -> bytes:
            parts = [canonical(handlers.handle(tool, item)[1]) for item in items]
            return b'{"responses":[' + b",".join(parts) + b"]}"

        async def endpoint(request: Request):
            try:
                handlers = handlers_or_raise()
                body = await read_json(request)
                items = body.get("requests") if isinstance(body, dict) else body
                if not isinstance(items, list):
                    raise ApiError(400, "invalid_request", "batch body must hold a 'requests' list")
                if len(items) > config.max_batch:
                    raise ApiError(413, "batch_too_large",
                                   f"batch of {len(items)} exceeds the limit of {config.max_batch}",
                                   limit=config.max_batch)
                content = await run(handle_all, handlers, items)
            except ApiError as exc:
                return respond(exc.status, exc.body())
            return respond(200, content)
        return endpoint

    for tool in config.only:
        app.add_api_route(f"/{tool}", single(tool), methods=["POST"])
        app.add_api_route(f"/{tool}/batch", batch(tool), methods=["POST"])

    @app.get("/healthz")
    async def healthz():
        if state["error"]:
            return respond(500, {"status": "failed", "error": state["error"]})
        if state["handlers"] is None:
            return respond(503, {"status": "loading"})
        return respond(200, {"status": "ready", "endpoints": list(config.only)})

    @app.get("/stats")
    async def stats():
        env_stats = state["env"].stats() if hasattr(state["env"], "stats") else {}
        with counter_lock:
            snapshot = dict(counters)
        return respond(200, {**env_stats, "http": snapshot})

    return app


class RemoteSummarizer:
    """Forwards long documents to an external completion endpoint.

    Wire contract: POST {system, prompt} -> {text}.
    """

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def summarize(self, source: str, query: str, document: str) -> str:
        import httpx

        resp = httpx.post(self.url, json={"system": SUMMARIZER_SYSTEM_PROMPT,
                                          "prompt": summarizer_user_prompt(source, query, document)},
                          timeout=self.timeout)
        resp.raise_for_status()
        return str(resp.json().get("text", ""))


class RemoteToolError(ToolError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class RemoteEnvironment(ToolEnvironment):
    """Tool environment backed by a running service."""

    def __init__(self, base_url: str, config: EnvConfig = EnvConfig(), timeout: float = 30.0,
                 client=None):
        import httpx

        self.config = config
        self.client = client or httpx.Client(base_url=base_url, timeout=timeout)

    def _post(self, path: str, body: dict) -> dict:
        resp = self.client.post(path, json=body)
        data = resp.json()
        if resp.status_code >= 400:
            err = data.get("error", {})
            if resp.status_code >= 500:
                raise RuntimeError(f"{path}: {err.get('code')}: {err.get('message')}")
            raise RemoteToolError(err.get("code", "tool_error"), err.get("message", ""))
        return data

    def lookup(self, diseases):
        data = self._post("/lookup", {"diseases": list(diseases)})
        out = []
        for r in data["results"]:
            phens = r["phenotypes"] if isinstance(r["phenotypes"], list) else []
            out.append(LookupResult(r["query_disease"], r["matched_disease"], tuple(phens), r["score"]))
        return out

    def match(self, phenotypes, top_n=None):
        data = self._post("/match", {"phenotypes": list(phenotypes), "top_n": top_n or self.config.top_n})
        return [MatchResult(r["record_id"], r["diagnosis"], tuple(r["phenotypes"]), r["score"])
                for r in data["results"]]

    def search(self, source, queries, top_k=None):
        body = {"source": source, "queries": list(queries), "top_k": top_k or self.config.top_k}
        data = self._post("/search", body)
        return [SearchHit(r["chunk_id"], r["score"], r["text"], source) for r in data["results"]]

    def summarize(self, source, query, document):
        data = self._post("/summarize", {"source": source, "query": query, "document": document})
        return SummaryResult(data["answer"], fallback=bool(data.get("fallback")))


def serve(env_factory: Callable[[], DiagnosticEnvironment], host: str | None = None,
          port: int | None = None, config: ServiceConfig = ServiceConfig()) -> None:
    import uvicorn

    host = host or os.environ.get(ENV_HOST, "127.0.0.1")
    port = port or int(os.environ.get(ENV_PORT, "8700"))
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    uvicorn.run(create_app(env_factory, config), host=host, port=port,
                log_level="warning", timeout_graceful_shutdown=int(config.timeout))
