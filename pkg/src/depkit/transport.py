"""Two interchangeable carriers for the benchmark-server interface.

bind() returns a handle exposing the same operations whether the server is a
local directory mount or a remote HTTP service, so an evaluation produces
the same report either way. The HTTP surface:

    GET  /v1/datasets
    GET  /v1/datasets/{id}/samples?offset&limit
    POST /v1/evaluations
    POST /v1/evaluations/{eid}/submissions
    GET  /v1/evaluations/{eid}/report

JSON bodies are protocol envelopes; every message carries the protocol
version, and responses carry it in the X-DEP-Protocol header as well. Wire
capture, when enabled, records every byte exchanged in both directions,
which is how the leak-proofing tests observe what a client could ever see.
"""

import base64
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlsplit

import requests

from .adapter import discover_models
from .clock import Clock, SYSTEM_CLOCK
from .protocol import (
    DatasetList,
    ErrorBody,
    EvaluationOpen,
    EvaluationReport,
    PROTOCOL_VERSION,
    ProtocolError,
    STATUS_CODES,
    SampleBatch,
    Submission,
    decode_message,
    encode_message,
)
from .server import CARD_FILENAME, BenchmarkService, PackageError, load_package

logger = logging.getLogger(__name__)

DEFAULT_PAGE_LIMIT = 64
PROTOCOL_HEADER = "X-DEP-Protocol"

CLIENT_TO_SERVER = "client->server"
SERVER_TO_CLIENT = "server->client"


@dataclass(frozen=True)
class ServerBinding:
    """Where a benchmark server lives: a directory or a base URL."""

    kind: str
    path: Optional[str] = None
    base_url: Optional[str] = None
    token: Optional[str] = None

    def __post_init__(self):
        if self.kind == "local":
            if not self.path or self.base_url:
                raise ValueError("local binding requires path and no base_url")
        elif self.kind == "remote":
            if not self.base_url or self.path:
                raise ValueError("remote binding requires base_url and no path")
        else:
            raise ValueError(f"unknown binding kind {self.kind!r}")

    @classmethod
    def local(cls, path) -> "ServerBinding":
        return cls(kind="local", path=str(path))

    @classmethod
    def remote(cls, base_url: str, token: Optional[str] = None) -> "ServerBinding":
        return cls(kind="remote", base_url=base_url.rstrip("/"), token=token)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.path:
            out["path"] = self.path
        if self.base_url:
            out["base_url"] = self.base_url
        if self.token:
            out["token"] = self.token
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ServerBinding":
        return cls(kind=raw["kind"], path=raw.get("path"),
                   base_url=raw.get("base_url"), token=raw.get("token"))


@dataclass(frozen=True)
class WireEntry:
    direction: str
    data: bytes
    timestamp: float


class WireLog:
    """Append-only capture of every message exchanged over a handle."""

    def __init__(self):
        self._entries = []
        self._lock = threading.Lock()

    def record(self, direction: str, data: bytes) -> None:
        with self._lock:
            self._entries.append(WireEntry(direction, bytes(data), time.time()))

    def entries(self, direction: Optional[str] = None) -> list:
        with self._lock:
            snapshot = list(self._entries)
        if direction is None:
            return snapshot
        return [e for e in snapshot if e.direction == direction]

    def payload(self, direction: Optional[str] = None) -> bytes:
        return b"".join(e.data for e in self.entries(direction))

    def dump(self, path) -> None:
        """Write the capture as line-delimited JSON (data base64-encoded)."""
        with Path(path).open("w", encoding="utf-8") as handle:
            for entry in self.entries():
                handle.write(json.dumps({
                    "direction": entry.direction,
                    "timestamp": entry.timestamp,
                    "data_b64": base64.b64encode(entry.data).decode("ascii"),
                }) + "\n")

    @staticmethod
    def load(path) -> list:
        entries = []
        with Path(path).open("r", encoding="utf-8") as handle:
            for line in handle:
                raw = json.loads(line)
                entries.append(WireEntry(
                    raw["direction"], base64.b64decode(raw["data_b64"]), raw["timestamp"]))
        return entries


# ---------------------------------------------------------------------------
# Local carrier
#
# Every request and response still passes through the protocol codec, so
# local and remote semantics match bit for bit and wire capture sees the
# same byte streams a remote deployment would produce.


class LocalHandle:
    def __init__(self, service: BenchmarkService, capture: Optional[WireLog] = None):
        self._service = service
        self._capture = capture

    def _exchange(self, request_record, respond):
        request_bytes = encode_message(request_record)
        if self._capture is not None:
            self._capture.record(CLIENT_TO_SERVER, request_bytes)
        try:
            response_record = respond(decode_message(request_bytes))
        except ProtocolError as exc:
            error = ErrorBody(code=exc.code, message=exc.message, path=exc.path)
            if self._capture is not None:
                self._capture.record(SERVER_TO_CLIENT, encode_message(error))
            raise
        response_bytes = encode_message(response_record)
        if self._capture is not None:
            self._capture.record(SERVER_TO_CLIENT, response_bytes)
        return decode_message(response_bytes)

    def list_datasets(self) -> list:
        # an empty listing doubles as the request record for this operation
        listing = self._exchange(
            DatasetList(),
            lambda _req: DatasetList(datasets=tuple(self._service.list_datasets())),
        )
        return list(listing.datasets)

    def fetch_samples(self, dataset_id: str, offset: int = 0, limit: int = DEFAULT_PAGE_LIMIT) -> SampleBatch:
        def respond(_req):
            samples = self._service.fetch_samples(dataset_id, offset, limit)
            return SampleBatch(
                dataset_id=dataset_id, offset=offset,
                total=self._service.package(dataset_id).sample_count,
                samples=tuple(samples),
            )
        return self._exchange(SampleBatch(dataset_id=dataset_id, offset=offset, total=0), respond)

    def open_evaluation(self, evaluation_id: str, dataset_id: str, model_id: str) -> EvaluationOpen:
        record = EvaluationOpen(evaluation_id=evaluation_id, dataset_id=dataset_id, model_id=model_id)

        def respond(req):
            self._service.open_evaluation(req.evaluation_id, req.dataset_id, req.model_id)
            return req
        return self._exchange(record, respond)

    def submit(self, evaluation_id: str, predictions, interim: bool = False) -> EvaluationReport:
        record = Submission(evaluation_id=evaluation_id, predictions=tuple(predictions),
                            interim=interim)
        return self._exchange(
            record,
            lambda req: self._service.submit(req.evaluation_id, req.predictions, interim=req.interim))

    def report(self, evaluation_id: str) -> EvaluationReport:
        record = EvaluationOpen(evaluation_id=evaluation_id, dataset_id="", model_id="")
        return self._exchange(record, lambda req: self._service.report(req.evaluation_id))


# ---------------------------------------------------------------------------
# Remote carrier


def _render_request(method: str, url: str, headers: dict, body: bytes) -> bytes:
    parts = urlsplit(url)
    target = parts.path + (f"?{parts.query}" if parts.query else "")
    lines = [f"{method} {target} HTTP/1.1", f"host: {parts.netloc}"]
    lines.extend(f"{k.lower()}: {v}" for k, v in sorted(headers.items()))
    return ("\r\n".join(lines) + "\r\n\r\n").encode("utf-8") + (body or b"")


def _render_response(status: int, reason: str, headers, body: bytes) -> bytes:
    lines = [f"HTTP/1.1 {status} {reason}"]
    lines.extend(f"{k.lower()}: {v}" for k, v in sorted(headers.items()))
    return ("\r\n".join(lines) + "\r\n\r\n").encode("utf-8") + (body or b"")


class RemoteHandle:
    def __init__(self, base_url: str, token: Optional[str] = None,
                 capture: Optional[WireLog] = None, timeout_s: float = 30.0):
        self._base = base_url.rstrip("/")
        self._token = token
        self._capture = capture
        self._timeout = timeout_s
        self._session = requests.Session()

    def _request(self, method: str, path: str, record=None, params=None, expect=None):
        url = self._base + path
        if params:
            query = "&".join(f"{k}={v}" for k, v in params.items())
            url = f"{url}?{query}"
        body = encode_message(record) if record is not None else b""
        headers = {PROTOCOL_HEADER: PROTOCOL_VERSION}
        if record is not None:
            headers["Content-Type"] = "application/json"
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        if self._capture is not None:
            self._capture.record(CLIENT_TO_SERVER, _render_request(method, url, headers, body))
        try:
            reply = self._session.request(
                method, url, data=body or None, headers=headers, timeout=self._timeout)
        except requests.RequestException as exc:
            raise ProtocolError(503, f"server unreachable: {exc}")
        if self._capture is not None:
            self._capture.record(
                SERVER_TO_CLIENT,
                _render_response(reply.status_code, reply.reason, reply.headers, reply.content))
        if reply.status_code != 200:
            try:
                error = decode_message(reply.content, expect="error")
            except ProtocolError:
                # response body is not a protocol error; fall back to the HTTP status
                raise ProtocolError(
                    reply.status_code if reply.status_code in STATUS_CODES else 500,
                    f"server returned HTTP {reply.status_code}")
            raise ProtocolError(error.code, error.message, path=error.path)
        return decode_message(reply.content, expect=expect)

    def list_datasets(self) -> list:
        listing = self._request("GET", "/v1/datasets", expect="dataset_list")
        return list(listing.datasets)

    def fetch_samples(self, dataset_id: str, offset: int = 0, limit: int = DEFAULT_PAGE_LIMIT) -> SampleBatch:
        return self._request(
            "GET", f"/v1/datasets/{dataset_id}/samples",
            params={"offset": offset, "limit": limit}, expect="sample_batch")

    def open_evaluation(self, evaluation_id: str, dataset_id: str, model_id: str) -> EvaluationOpen:
        record = EvaluationOpen(evaluation_id=evaluation_id, dataset_id=dataset_id, model_id=model_id)
        return self._request("POST", "/v1/evaluations", record=record, expect="evaluation_open")

    def submit(self, evaluation_id: str, predictions, interim: bool = False) -> EvaluationReport:
        record = Submission(evaluation_id=evaluation_id, predictions=tuple(predictions),
                            interim=interim)
        return self._request(
            "POST", f"/v1/evaluations/{evaluation_id}/submissions",
            record=record, expect="evaluation_report")

    def report(self, evaluation_id: str) -> EvaluationReport:
        return self._request(
            "GET", f"/v1/evaluations/{evaluation_id}/report", expect="evaluation_report")


def find_package_dirs(root) -> list:
    """A package dir is any directory holding a dataset card file."""
    root = Path(root)
    if (root / CARD_FILENAME).is_file():
        return [root]
    return sorted({p.parent for p in root.rglob(CARD_FILENAME)})


def local_service(path, model_dirs=(), clock: Clock = SYSTEM_CLOCK) -> BenchmarkService:
    package_dirs = find_package_dirs(path)
    if not package_dirs:
        raise ProtocolError(422, f"{path}: no {CARD_FILENAME} found")
    try:
        packages = [load_package(d) for d in package_dirs]
    except PackageError as exc:
        raise ProtocolError(422, str(exc))
    judge_models = discover_models(model_dirs)[0] if model_dirs else []
    return BenchmarkService(packages, judge_models=judge_models, clock=clock)


def bind(binding: ServerBinding, capture: Optional[WireLog] = None,
         model_dirs=(), clock: Clock = SYSTEM_CLOCK):
    """Open a handle on a benchmark server, local mount or remote URL.

    The returned handle exposes the same operation set either way. Remote
    reachability and local card validity are both probed here, so binding to
    a stopped server is a 503 and a malformed package a 422.
    """
    if binding.kind == "local":
        return LocalHandle(local_service(binding.path, model_dirs=model_dirs, clock=clock),
                           capture=capture)
    handle = RemoteHandle(binding.base_url, token=binding.token, capture=capture)
    handle.list_datasets()  # reachability probe
    return handle


# ---------------------------------------------------------------------------
# HTTP service


class _Routes:
    DATASETS = "/v1/datasets"
    SAMPLES = ("/v1/datasets/", "/samples")
    EVALUATIONS = "/v1/evaluations"
    SUBMISSIONS = ("/v1/evaluations/", "/submissions")
    REPORT = ("/v1/evaluations/", "/report")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    service: BenchmarkService = None
    token: Optional[str] = None

    def log_message(self, fmt, *args):  # route BaseHTTPRequestHandler noise to logging
        logger.debug("http: " + fmt, *args)

    def _deny(self, code: int, message: str, path: Optional[str] = None):
        self._reply(code, ErrorBody(code=code, message=message, path=path))

    def _reply(self, status: int, record) -> None:
        body = encode_message(record)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header(PROTOCOL_HEADER, PROTOCOL_VERSION)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _authorized(self) -> bool:
        if self.token is None:
            return True
        return self.headers.get("Authorization") == f"Bearer {self.token}"

    def _check_common(self) -> bool:
        declared = self.headers.get(PROTOCOL_HEADER)
        if declared is not None and declared != PROTOCOL_VERSION:
            self._deny(400, f"protocol version mismatch: {declared!r}")
            return False
        if not self._authorized():
            self._deny(401, "missing or invalid bearer token")
            return False
        return True

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length", "0"))
        return self.rfile.read(length) if length else b""

    def do_GET(self):
        if not self._check_common():
            return
        parts = urlsplit(self.path)
        try:
            if parts.path == _Routes.DATASETS:
                listing = DatasetList(datasets=tuple(self.service.list_datasets()))
                self._reply(200, listing)
                return
            prefix, suffix = _Routes.SAMPLES
            if parts.path.startswith(prefix) and parts.path.endswith(suffix):
                dataset_id = parts.path[len(prefix):-len(suffix)]
                query = parse_qs(parts.query)
                offset = int(query.get("offset", ["0"])[0])
                limit = int(query.get("limit", [str(DEFAULT_PAGE_LIMIT)])[0])
                samples = self.service.fetch_samples(dataset_id, offset, limit)
                batch = SampleBatch(
                    dataset_id=dataset_id, offset=offset,
                    total=self.service.package(dataset_id).sample_count,
                    samples=tuple(samples))
                self._reply(200, batch)
                return
            prefix, suffix = _Routes.REPORT
            if parts.path.startswith(prefix) and parts.path.endswith(suffix):
                evaluation_id = parts.path[len(prefix):-len(suffix)]
                self._reply(200, self.service.report(evaluation_id))
                return
            self._deny(404, f"no such route: {parts.path}")
        except ProtocolError as exc:
            self._deny(exc.code, exc.message, path=exc.path)
        except ValueError as exc:
            self._deny(422, f"bad query parameter: {exc}")
        except Exception as exc:  # pragma: no cover - defensive
            logger.exception("unhandled server error")
            self._deny(500, f"internal error: {exc}")

    def do_POST(self):
        if not self._check_common():
            return
        parts = urlsplit(self.path)
        try:
            if parts.path == _Routes.EVALUATIONS:
                record = decode_message(self._read_body(), expect="evaluation_open")
                self.service.open_evaluation(record.evaluation_id, record.dataset_id, record.model_id)
                self._reply(200, record)
                return
            prefix, suffix = _Routes.SUBMISSIONS
            if parts.path.startswith(prefix) and parts.path.endswith(suffix):
                evaluation_id = parts.path[len(prefix):-len(suffix)]
                record = decode_message(self._read_body(), expect="submission")
                if record.evaluation_id != evaluation_id:
                    raise ProtocolError(422, "submission evaluation_id does not match route",
                                        path="body.evaluation_id")
                report = self.service.submit(record.evaluation_id, record.predictions,
                                             interim=record.interim)
                self._reply(200, report)
                return
            self._deny(404, f"no such route: {parts.path}")
        except ProtocolError as exc:
            self._deny(exc.code, exc.message, path=exc.path)
        except Exception as exc:  # pragma: no cover - defensive
            logger.exception("unhandled server error")
            self._deny(500, f"internal error: {exc}")


class RunningServer:
    """A live HTTP benchmark service; shut down with .shutdown()."""

    def __init__(self, httpd: ThreadingHTTPServer, thread: threading.Thread):
        self._httpd = httpd
        self._thread = thread

    @property
    def address(self) -> tuple:
        return self._httpd.server_address

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def wait(self) -> None:
        self._thread.join()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._thread.join(timeout=5)
        self._httpd.server_close()


def serve(benchmark_dirs, listen_address=("127.0.0.1", 0), token: Optional[str] = None,
          model_dirs=(), clock: Clock = SYSTEM_CLOCK) -> RunningServer:
    """Serve benchmark packages over HTTP, one namespace per dataset_id.

    Binds the listen address immediately (a busy port raises OSError) and
    handles requests concurrently in a daemon thread until shutdown().
    """
    packages = []
    for directory in benchmark_dirs:
        try:
            packages.append(load_package(directory))
        except PackageError as exc:
            raise ProtocolError(422, str(exc))
    judge_models = discover_models(model_dirs)[0] if model_dirs else []
    service = BenchmarkService(packages, judge_models=judge_models, clock=clock)

    handler = type("BoundHandler", (_Handler,), {"service": service, "token": token})
    httpd = ThreadingHTTPServer(listen_address, handler)
    httpd.daemon_threads = True
    thread = threading.Thread(target=httpd.serve_forever, name="dep-server", daemon=True)
    thread.start()
    return RunningServer(httpd, thread)
