"""Wire-level contract shared by clients and benchmark servers.

Defines the status-code retry semantics, the task lifecycle state machine,
evaluation identifiers, and every JSON-encodable record that crosses the
client/server boundary. All records here are immutable values and can be
shared freely across threads; anything stateful lives in the orchestrator
or the server.
"""

import re
import uuid
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Optional

PROTOCOL_VERSION = "dep/1"

# ---------------------------------------------------------------------------
# Status codes


class RetryClass(str, Enum):
    NEVER = "never"
    BACKOFF_AND_REDUCE = "backoff-and-reduce"
    BOUNDED_RETRY = "bounded-retry"


#: The closed set of status codes adapters and servers are allowed to emit.
STATUS_CODES = frozenset({200, 400, 401, 404, 409, 422, 429, 500, 503})

_RETRY_CLASSES = {
    200: RetryClass.NEVER,
    400: RetryClass.NEVER,
    401: RetryClass.NEVER,
    404: RetryClass.NEVER,
    422: RetryClass.NEVER,
    429: RetryClass.BACKOFF_AND_REDUCE,
    409: RetryClass.BOUNDED_RETRY,
    500: RetryClass.BOUNDED_RETRY,
    503: RetryClass.BOUNDED_RETRY,
}


def classify_status(code: int) -> RetryClass:
    """Map a status code to its retry class.

    Total function: codes outside the known set fall back to bounded-retry
    for the 5xx range and never otherwise.
    """
    known = _RETRY_CLASSES.get(code)
    if known is not None:
        return known
    if 500 <= code < 600:
        return RetryClass.BOUNDED_RETRY
    return RetryClass.NEVER


class ProtocolError(Exception):
    """Status-coded failure raised by protocol, transport, and server layers.

    code is always drawn from STATUS_CODES; path optionally names the first
    offending field for 422-class decode errors.
    """

    def __init__(self, code: int, message: str, path: Optional[str] = None):
        self.code = code
        self.path = path
        super().__init__(message)

    @property
    def message(self) -> str:
        return self.args[0]


# ---------------------------------------------------------------------------
# Lifecycle state machine


class LifecycleState(str, Enum):
    RUNNING = "running"
    PAUSED = "paused"
    COMPLETED = "completed"
    FAILED = "failed"


#: The only valid transitions. completed is terminal; failed->running is the
#: explicit-retry path.
ALLOWED_TRANSITIONS = frozenset({
    (LifecycleState.RUNNING, LifecycleState.PAUSED),
    (LifecycleState.RUNNING, LifecycleState.COMPLETED),
    (LifecycleState.RUNNING, LifecycleState.FAILED),
    (LifecycleState.PAUSED, LifecycleState.RUNNING),
    (LifecycleState.FAILED, LifecycleState.RUNNING),
})


def validate_transition(current: LifecycleState, target: LifecycleState) -> bool:
    return (current, target) in ALLOWED_TRANSITIONS


class InvalidTransition(Exception):
    """Rejected lifecycle transition; carries the offending pair."""

    def __init__(self, current: LifecycleState, target: LifecycleState):
        self.current = current
        self.target = target
        super().__init__(f"invalid lifecycle transition: {current.value} -> {target.value}")


def ensure_transition(current: LifecycleState, target: LifecycleState) -> LifecycleState:
    if not validate_transition(current, target):
        raise InvalidTransition(current, target)
    return target


# ---------------------------------------------------------------------------
# Evaluation IDs

_EVAL_ID_RE = re.compile(r"^[0-9a-f]{32}$")


def new_evaluation_id() -> str:
    """Fresh random 128-bit run identifier, rendered as 32 lowercase hex chars."""
    return uuid.uuid4().hex


def parse_evaluation_id(value: str) -> str:
    """Validate and normalize a rendered evaluation ID. Round-trips identically."""
    if not isinstance(value, str) or not _EVAL_ID_RE.match(value):
        raise ProtocolError(422, f"malformed evaluation id: {value!r}", path="evaluation_id")
    return value


# ---------------------------------------------------------------------------
# Wire records
#
# Each record is a frozen dataclass. Unknown JSON fields seen on decode are
# preserved in the `extra` overflow map and re-emitted on encode, so records
# round-trip across independently deployed versions without loss.


@dataclass(frozen=True)
class ModelCard:
    """Discovery manifest for one model: identity, capability, and endpoint."""

    model_id: str
    display_name: str = ""
    capability: tuple = ()
    parameter_size: Optional[str] = None
    endpoint: dict = field(default_factory=dict)
    generation_defaults: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetCard:
    """Discovery manifest for one benchmark version served by a server.

    pure_evaluator marks the evaluator as side-effect free so the server may
    run scoring for distinct runs in parallel instead of serializing them.
    """

    dataset_id: str
    version: str
    description: str = ""
    task_type: str = ""
    subtasks: tuple = ()
    metrics: tuple = ()
    sample_count: int = 0
    data_format: str = "jsonl"
    prompt_template_ref: str = "prompt.tmpl"
    license: Optional[str] = None
    pure_evaluator: bool = False
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SampleEnvelope:
    """One prompt unit handed to the client. Never carries gold-derived data."""

    sample_id: str
    prompt: str
    subtask: Optional[str] = None
    metadata: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PredictionRecord:
    """Model output for one sample as submitted back to the server."""

    sample_id: str
    raw_output: str
    status: int = 200
    latency_ms: int = 0
    attempt_count: int = 1
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EvaluationReport:
    """Structured result of one evaluation run.

    overall maps metric name -> score in [0, 1]; per_subtask restricts each
    metric to one subtask; per_sample optionally lists
    {"sample_id", "scores", ...} dicts. counts carries
    {"served", "submitted", "scored"} with scored <= submitted <= served.
    """

    evaluation_id: str
    dataset_id: str
    version: str
    model_id: str
    overall: dict = field(default_factory=dict)
    per_subtask: dict = field(default_factory=dict)
    per_sample: Optional[tuple] = None
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetList:
    """Response body for the dataset listing operation."""

    datasets: tuple = ()
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SampleBatch:
    """One page of samples: offset/total allow clients to paginate."""

    dataset_id: str
    offset: int
    total: int
    samples: tuple = ()
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EvaluationOpen:
    """Registers an evaluation context binding an ID to a dataset and model."""

    evaluation_id: str
    dataset_id: str
    model_id: str
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Submission:
    """Batch of predictions submitted for a previously opened evaluation.

    interim marks a progress preview: the server scores it and returns a
    report but does not store it, so the final submission still decides the
    run. Only final (non-interim) submissions participate in idempotency.
    """

    evaluation_id: str
    predictions: tuple = ()
    interim: bool = False
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ErrorBody:
    """Status-coded error payload returned instead of a result."""

    code: int
    message: str
    path: Optional[str] = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Codec
#
# Wire format: UTF-8 JSON envelope
#   {"protocol_version": "dep/1", "type": "<name>", "body": {...}}
# Nested records (cards inside a listing, predictions inside a submission)
# are encoded as bare bodies inside the parent body.

import json  # noqa: E402  (kept near the codec it serves)

_WIRE_TYPES: dict = {}
_TYPE_NAMES: dict = {}

#: body fields holding nested records, mapped to the nested type.
_NESTED = {
    (DatasetList, "datasets"): DatasetCard,
    (SampleBatch, "samples"): SampleEnvelope,
    (Submission, "predictions"): PredictionRecord,
    (EvaluationReport, "per_sample"): None,  # plain dicts, no nested type
}

_TUPLE_FIELDS = {"capability", "subtasks", "metrics", "datasets", "samples",
                 "predictions", "per_sample"}


def _register(name: str, cls) -> None:
    _WIRE_TYPES[name] = cls
    _TYPE_NAMES[cls] = name


_register("model_card", ModelCard)
_register("dataset_card", DatasetCard)
_register("sample_envelope", SampleEnvelope)
_register("prediction_record", PredictionRecord)
_register("evaluation_report", EvaluationReport)
_register("dataset_list", DatasetList)
_register("sample_batch", SampleBatch)
_register("evaluation_open", EvaluationOpen)
_register("submission", Submission)
_register("error", ErrorBody)


def wire_type_names() -> tuple:
    return tuple(sorted(_WIRE_TYPES))


def record_to_body(record) -> dict:
    """Flatten a wire record to its JSON body, merging the extra overflow."""
    cls = type(record)
    if cls not in _TYPE_NAMES:
        raise ProtocolError(500, f"{cls.__name__} is not a wire type")
    body = {}
    for f in fields(record):
        if f.name == "extra":
            continue
        value = getattr(record, f.name)
        nested = _NESTED.get((cls, f.name))
        if nested is not None:
            value = [record_to_body(item) for item in value]
        elif isinstance(value, tuple):
            value = [_plain(v) for v in value]
        body[f.name] = _plain(value)
    for key, value in record.extra.items():
        if key not in body:
            body[key] = value
    return body


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


_REQUIRED = {
    ModelCard: ("model_id",),
    DatasetCard: ("dataset_id", "version", "metrics"),
    SampleEnvelope: ("sample_id", "prompt"),
    PredictionRecord: ("sample_id", "raw_output"),
    EvaluationReport: ("evaluation_id", "dataset_id", "version", "model_id"),
    DatasetList: (),
    SampleBatch: ("dataset_id", "offset", "total"),
    EvaluationOpen: ("evaluation_id", "dataset_id", "model_id"),
    Submission: ("evaluation_id",),
    ErrorBody: ("code", "message"),
}


def body_to_record(cls, body: dict, path: str = "body"):
    """Build a wire record from a JSON body.

    Known fields are validated; unknown fields land in the extra overflow map
    and are never fatal. Missing required fields raise a 422 naming the first
    offending path.
    """
    if not isinstance(body, dict):
        raise ProtocolError(422, f"expected object at {path}", path=path)
    known = {f.name for f in fields(cls) if f.name != "extra"}
    for req in _REQUIRED[cls]:
        if req not in body:
            raise ProtocolError(422, f"missing required field {path}.{req}", path=f"{path}.{req}")
    kwargs = {}
    extra = {}
    for key, value in body.items():
        if key not in known:
            extra[key] = value
            continue
        nested = _NESTED.get((cls, key))
        if nested is not None:
            if not isinstance(value, list):
                raise ProtocolError(422, f"expected array at {path}.{key}", path=f"{path}.{key}")
            value = tuple(
                body_to_record(nested, item, path=f"{path}.{key}[{i}]")
                for i, item in enumerate(value)
            )
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(_freeze(v) for v in value)
        kwargs[key] = value
    try:
        return cls(extra=extra, **kwargs)
    except TypeError as exc:
        raise ProtocolError(422, f"malformed {path}: {exc}", path=path)


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def encode_message(record) -> bytes:
    """Serialize a wire record to a protocol envelope (UTF-8 JSON bytes)."""
    if type(record) not in _TYPE_NAMES:
        raise ProtocolError(500, f"{type(record).__name__} is not a wire type")
    envelope = {
        "protocol_version": PROTOCOL_VERSION,
        "type": _TYPE_NAMES[type(record)],
        "body": record_to_body(record),
    }
    return json.dumps(envelope, ensure_ascii=False, sort_keys=True).encode("utf-8")


def decode_message(data: bytes, expect: Optional[str] = None):
    """Parse a protocol envelope back into a typed record.

    Raises ProtocolError(422) on structurally invalid input, naming the first
    offending path. Protocol version must match exactly; no negotiation.
    """
    try:
        envelope = json.loads(data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(422, f"invalid JSON message: {exc}", path="$")
    if not isinstance(envelope, dict):
        raise ProtocolError(422, "message must be a JSON object", path="$")
    version = envelope.get("protocol_version")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(422, f"unsupported protocol version: {version!r}", path="protocol_version")
    type_name = envelope.get("type")
    cls = _WIRE_TYPES.get(type_name)
    if cls is None:
        raise ProtocolError(422, f"unknown message type: {type_name!r}", path="type")
    if expect is not None and type_name != expect:
        raise ProtocolError(422, f"expected {expect} message, got {type_name}", path="type")
    if "body" not in envelope:
        raise ProtocolError(422, "missing required field body", path="body")
    return body_to_record(cls, envelope["body"])
