"""Local HTTP completion service with server-sent-event streaming.

Endpoints: GET /health, GET /v1/models, POST /v1/completions. Requests for
the same model are FIFO-serialized through a per-model worker; distinct
models generate concurrently. Streaming responses emit one SSE event per
token and pace generation to the consumer, so a client disconnect cancels
the generation within one token. Any malformed request body yields a 4xx,
never a 5xx.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import select
import socket
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import tokenizer as tok
from .container import load_container
from .generate import ContextLengthError, SamplerParams, generate
from .model import Transformer

log = logging.getLogger("deskllm.server")

_MAX_BODY = 8 << 20
_SENTINEL = object()


def configure_logging() -> None:
    level = {
        "error": logging.ERROR,
        "warn": logging.WARNING,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }.get(os.environ.get("DESKLLM_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    logging.getLogger("deskllm").setLevel(level)


@dataclass
class ModelEntry:
    id: str
    path: str


@dataclass
class ServerConfig:
    models: list[ModelEntry]
    host: str = "127.0.0.1"
    port: int = 4891
    max_queue: int = 16
    request_timeout_seconds: float = 120.0

    def __post_init__(self) -> None:
        if not self.models:
            raise ValueError("server needs at least one model")
        ids = [m.id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ValueError("model ids must be unique")


def load_server_config(path) -> ServerConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    models = [ModelEntry(m["id"], m["path"]) for m in raw.get("models", [])]
    return ServerConfig(
        models=models,
        host=raw.get("host", "127.0.0.1"),
        port=int(raw.get("port", 4891)),
        max_queue=int(raw.get("max_queue", 16)),
        request_timeout_seconds=float(raw.get("request_timeout_seconds", 120.0)),
    )


class RequestError(Exception):
    def __init__(self, status: int, error_type: str, message: str = "", extra: dict | None = None):
        super().__init__(message or error_type)
        self.status = status
        self.payload = {"error": {"type": error_type, **({"message": message} if message else {}), **(extra or {})}}


@dataclass
class _Job:
    params: SamplerParams
    prompt: str
    stream: bool
    chan: queue.Queue = field(default_factory=lambda: queue.Queue(maxsize=2))
    cancel: threading.Event = field(default_factory=threading.Event)


class _ModelWorker:
    """One FIFO lane per model: an owned transformer, queue, and thread."""

    def __init__(self, entry: ModelEntry, max_queue: int, telemetry: list) -> None:
        config, weights, merges = load_container(entry.path)
        self.id = entry.id
        self.model = Transformer(weights, config)
        self.merges = merges
        self.jobs: queue.Queue = queue.Queue(maxsize=max_queue)
        self.telemetry = telemetry
        self.thread = threading.Thread(target=self._run, name=f"model-{entry.id}", daemon=True)
        self.active_job: _Job | None = None
        self.thread.start()

    def prompt_tokens(self, prompt: str) -> int:
        return 1 + len(tok.encode(prompt, self.merges))

    def submit(self, job: _Job) -> None:
        try:
            self.jobs.put_nowait(job)
        except queue.Full:
            raise RequestError(429, "queue_full", "too many queued requests") from None

    def _run(self) -> None:
        while True:
            job = self.jobs.get()
            if job is _SENTINEL:
                return
            self.active_job = job
            try:
                self._process(job)
            except Exception as exc:  # keep the lane alive no matter what
                log.exception("worker %s failed", self.id)
                _put_forever(job.chan, ("error", 500, str(exc)), job.cancel)
            finally:
                self.active_job = None

    def _process(self, job: _Job) -> None:
        def on_token(token_id: int, fragment: str):
            if not job.stream:
                return True
            return _put_forever(job.chan, ("token", token_id, fragment), job.cancel)

        try:
            result = generate(
                self.model, self.merges, job.prompt, job.params,
                on_token=on_token, cancel=job.cancel,
            )
        except ContextLengthError as exc:
            _put_forever(job.chan, ("error", 422, str(exc)), job.cancel, force=True)
            return
        self.telemetry.append(
            {
                "model": self.id,
                "tokens": len(result.token_ids),
                "finish_reason": result.finish_reason,
                "seed": job.params.seed,
            }
        )
        _put_forever(job.chan, ("done", result), job.cancel, force=True)

    def shutdown_worker(self, timeout: float) -> None:
        self.jobs.put(_SENTINEL)
        if self.active_job is not None:
            self.active_job.cancel.set()
        self.thread.join(timeout)


def _put_forever(chan: queue.Queue, item, cancel: threading.Event, force: bool = False) -> bool:
    """Blocking put that gives up when the job is cancelled (pacing queue)."""
    while True:
        try:
            chan.put(item, timeout=0.05)
            return True
        except queue.Full:
            if cancel.is_set() and not force:
                return False
            if cancel.is_set() and force:
                # consumer is gone; deliver by replacing the oldest item
                try:
                    chan.get_nowait()
                except queue.Empty:
                    pass


def _validate_completion(body: dict, known_models: list[str]) -> tuple[str, str, SamplerParams, bool, bool]:
    if not isinstance(body, dict):
        raise RequestError(400, "validation", "request body must be a JSON object")

    def need(name, kinds, default=None, required=False):
        if name not in body:
            if required:
                raise RequestError(400, "validation", f"missing field {name}", {"field": name})
            return default
        value = body[name]
        if isinstance(value, bool) and bool not in kinds:
            raise RequestError(400, "validation", f"bad type for {name}", {"field": name})
        if not isinstance(value, kinds):
            raise RequestError(400, "validation", f"bad type for {name}", {"field": name})
        return value

    model_id = need("model", (str,), required=True)
    prompt = need("prompt", (str,), required=True)
    if model_id not in known_models:
        raise RequestError(404, "model_not_found")
    stream = need("stream", (bool,), default=False)
    seed = need("seed", (int,), default=None)
    seed_chosen_by_server = seed is None
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2**32))
    try:
        params = SamplerParams(
            temperature=float(need("temperature", (int, float), default=1.0)),
            top_k=need("top_k", (int,), default=0),
            top_p=float(need("top_p", (int, float), default=1.0)),
            repetition_penalty=float(need("repetition_penalty", (int, float), default=1.0)),
            seed=seed,
            max_tokens=need("max_tokens", (int,), default=128),
        )
    except ValueError as exc:
        field_name = str(exc).split(" ", 1)[0]
        raise RequestError(400, "validation", str(exc), {"field": field_name}) from None
    return model_id, prompt, params, stream, seed_chosen_by_server


class DeskServer:
    """Owns the listener and the per-model workers. ``telemetry`` records one
    entry per finished generation (the test hook for cancellation timing)."""

    def __init__(self, config: ServerConfig) -> None:
        self.config = config
        self.telemetry: list[dict] = []
        self.workers: dict[str, _ModelWorker] = {}
        for entry in config.models:
            self.workers[entry.id] = _ModelWorker(entry, config.max_queue, self.telemetry)
        handler = _make_handler(self)
        self.httpd = ThreadingHTTPServer((config.host, config.port), handler)
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="deskllm-http", daemon=True)
        self._thread.start()
        log.info("serving on %s:%s", self.config.host, self.port)

    def serve_forever(self) -> None:
        log.info("serving on %s:%s", self.config.host, self.port)
        self.httpd.serve_forever()

    def stop(self) -> None:
        for worker in self.workers.values():
            worker.shutdown_worker(self.config.request_timeout_seconds)
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(5.0)


def _make_handler(server: DeskServer):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "deskllm"

        def log_message(self, fmt, *args):  # route through logging, not stderr
            log.debug("%s %s", self.address_string(), fmt % args)

        # -- plumbing ----------------------------------------------------

        def _send_json(self, status: int, payload: dict, extra_headers: dict | None = None) -> None:
            raw = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self._cors()
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            for k, v in (extra_headers or {}).items():
                self.send_header(k, v)
            self.end_headers()
            self.wfile.write(raw)

        def _cors(self) -> None:
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Access-Control-Expose-Headers", "X-Seed")

        def _client_disconnected(self) -> bool:
            # a closed peer makes the socket readable with zero bytes
            try:
                ready, _, _ = select.select([self.connection], [], [], 0)
                if not ready:
                    return False
                return self.connection.recv(1, socket.MSG_PEEK) == b""
            except OSError:
                return True

        # -- endpoints ---------------------------------------------------

        def do_OPTIONS(self) -> None:
            self.send_response(204)
            self._cors()
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self) -> None:
            if self.path == "/health":
                self._send_json(200, {"status": "ok"})
            elif self.path == "/v1/models":
                entries = [
                    {
                        "id": w.id,
                        "quantized": w.model.weights.is_quantized,
                        "vocab_size": w.model.vocab_size,
                    }
                    for w in server.workers.values()
                ]
                self._send_json(200, entries)
            else:
                self._send_json(404, {"error": {"type": "not_found"}})

        def do_POST(self) -> None:
            if self.path != "/v1/completions":
                self._send_json(404, {"error": {"type": "not_found"}})
                return
            try:
                self._handle_completion()
            except RequestError as exc:
                self._send_json(exc.status, exc.payload)
            except (BrokenPipeError, ConnectionResetError):
                pass
            except Exception as exc:
                # malformed input must never surface as a 5xx
                log.debug("rejected request: %s", exc)
                try:
                    self._send_json(400, {"error": {"type": "bad_request"}})
                except OSError:
                    pass

        def _read_body(self) -> dict:
            length = self.headers.get("Content-Length")
            try:
                n = int(length)
            except (TypeError, ValueError):
                raise RequestError(400, "bad_request", "missing or bad Content-Length") from None
            if not (0 <= n <= _MAX_BODY):
                raise RequestError(400, "bad_request", "body too large")
            raw = self.rfile.read(n)
            try:
                return json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise RequestError(400, "bad_request", "body is not valid JSON") from None

        def _handle_completion(self) -> None:
            body = self._read_body()
            model_id, prompt, params, stream, seed_chosen = _validate_completion(
                body, list(server.workers.keys())
            )
            worker = server.workers[model_id]
            if worker.prompt_tokens(prompt) + params.max_tokens > worker.model.max_seq:
                raise RequestError(422, "context_overflow", "prompt plus budget exceeds max_seq")

            job = _Job(params=params, prompt=prompt, stream=stream)
            worker.submit(job)
            if stream:
                self._stream_response(job, params.seed)
            else:
                self._plain_response(job, params.seed)

        def _plain_response(self, job: _Job, seed: int) -> None:
            kind, *rest = _wait(job, server.config.request_timeout_seconds)
            if kind == "done":
                result = rest[0]
                self._send_json(
                    200,
                    {
                        "text": result.text,
                        "token_count": len(result.token_ids),
                        "finish_reason": result.finish_reason,
                        "seed": seed,
                    },
                    extra_headers={"X-Seed": str(seed)},
                )
            else:
                status, message = rest
                self._send_json(status, {"error": {"type": "generation_failed", "message": message}})

        def _stream_response(self, job: _Job, seed: int) -> None:
            # A small send buffer keeps generation paced by the consumer
            # instead of racing ahead into kernel buffers; that is what lets
            # a disconnect stop the model within a token.
            try:
                self.connection.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 8192)
            except OSError:
                pass
            self.send_response(200)
            self._cors()
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-store")
            self.send_header("X-Seed", str(seed))
            self.send_header("Connection", "close")
            self.end_headers()
            try:
                while True:
                    if self._client_disconnected():
                        job.cancel.set()
                    try:
                        event = job.chan.get(timeout=server.config.request_timeout_seconds)
                    except queue.Empty:
                        job.cancel.set()
                        break
                    if event[0] == "token":
                        _, token_id, fragment = event
                        payload = json.dumps({"token_id": token_id, "text": fragment})
                        self.wfile.write(f"data: {payload}\n\n".encode("utf-8"))
                        self.wfile.flush()
                    elif event[0] == "done":
                        self.wfile.write(b"data: [DONE]\n\n")
                        self.wfile.flush()
                        break
                    else:  # error inside the worker after streaming began
                        break
            except (BrokenPipeError, ConnectionResetError, OSError):
                job.cancel.set()
                _drain_until_done(job)
            finally:
                self.close_connection = True

    return Handler


def _wait(job: _Job, timeout: float):
    try:
        return job.chan.get(timeout=timeout)
    except queue.Empty:
        job.cancel.set()
        return ("error", 504, "generation timed out")


def _drain_until_done(job: _Job) -> None:
    while True:
        try:
            if job.chan.get(timeout=5.0)[0] == "done":
                return
        except queue.Empty:
            return


def serve(config: ServerConfig) -> DeskServer:
    """Load every model (fail fast), bind, and return the running service."""
    server = DeskServer(config)
    server.start()
    return server
