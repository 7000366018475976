"""Uniform model-calling layer.

Every model sits behind one generate() interface returning status-coded
AdapterResponse values. Model-side failures are never raised: transport
faults come back as 503, upstream rate limits pass through as 429, and
malformed upstream replies become 500, so the scheduler owns all retry
policy. Two endpoint kinds exist: "scripted" (a deterministic test double
driven by a behavior script) and "http-chat" (a generic JSON chat endpoint).
"""

import fnmatch
import json
import logging
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import requests

from .clock import Clock, SYSTEM_CLOCK
from .protocol import STATUS_CODES, ModelCard, ProtocolError, body_to_record

logger = logging.getLogger(__name__)

DEFAULT_DEADLINE_S = 120.0

MODEL_CARD_SUFFIX = ".model.json"


@dataclass(frozen=True)
class InferenceRequest:
    prompt: str
    generation: dict = field(default_factory=dict)
    request_id: str = ""

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("inference prompt must be non-empty")


@dataclass(frozen=True)
class AdapterResponse:
    """Outcome of one inference call.

    Exactly one of text / error_log is populated: text iff status is 200.
    metadata always carries model_id.
    """

    status: int
    text: Optional[str] = None
    error_log: Optional[str] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.status == 200) != (self.text is not None) or (self.text is None) == (self.error_log is None):
            raise ValueError("AdapterResponse must carry text iff status is 200, else error_log")


def _ok(text: str, model_id: str, **meta) -> AdapterResponse:
    return AdapterResponse(status=200, text=text, metadata={"model_id": model_id, **meta})


def _err(status: int, log: str, model_id: str, **meta) -> AdapterResponse:
    return AdapterResponse(status=status, error_log=log, metadata={"model_id": model_id, **meta})


class ScriptError(Exception):
    """Raised when a scripted-model behavior script fails validation."""


# ---------------------------------------------------------------------------
# Scripted endpoint: deterministic test double


def _load_behavior(raw, where: str) -> dict:
    if isinstance(raw, int):
        raw = {"status": raw}
    if not isinstance(raw, dict):
        raise ScriptError(f"{where}: behavior must be an object or status integer")
    status = raw.get("status", 200)
    if status not in STATUS_CODES:
        raise ScriptError(f"{where}: unknown status {status}")
    return {
        "status": status,
        "text": raw.get("text"),
        "echo": bool(raw.get("echo", False)),
        "delay": float(raw.get("delay", 0.0)),
        "error": raw.get("error"),
    }


class ScriptedEndpoint:
    """Fully deterministic model given the script and the call order.

    Script shape::

        {
          "schedule": [429, {"status": 200, "text": "ok"}, ...],   # consumed per call
          "responses": {"<pattern>": {"status": 200, "text": "B"}},# fnmatch patterns
          "fault_injection": {"status": 429, "probability": 0.3, "seed": 7}
        }

    The schedule, when present, answers the first len(schedule) calls in
    order. After that (or without one) the prompt is matched against the
    response patterns; a bare "*" catch-all is always tried last, so it can
    never shadow specific patterns even if JSON re-serialization reorders
    keys. When pattern precedence matters beyond that, "responses" may be a
    list of [pattern, behavior] pairs matched strictly in order. A behavior
    with "echo": true answers with the prompt itself. The seeded fault
    injector, when configured, replaces a reply with the fault status;
    draws are consumed in call order under a lock, so identical scripts and
    call sequences always produce identical response sequences.
    """

    def __init__(self, card: ModelCard, script: dict, clock: Clock = SYSTEM_CLOCK):
        self.card = card
        self.model_id = card.model_id
        self._clock = clock
        self._lock = threading.Lock()
        self._calls = 0
        if not isinstance(script, dict):
            raise ScriptError("script must be an object")
        self._schedule = [
            _load_behavior(item, f"schedule[{i}]") for i, item in enumerate(script.get("schedule", []))
        ]
        responses = script.get("responses", {})
        if isinstance(responses, dict):
            pairs = list(responses.items())
        elif isinstance(responses, list):
            pairs = []
            for i, item in enumerate(responses):
                if not isinstance(item, (list, tuple)) or len(item) != 2:
                    raise ScriptError(f"responses[{i}]: expected a [pattern, behavior] pair")
                pairs.append((item[0], item[1]))
        else:
            raise ScriptError("responses must map prompt patterns to behaviors")
        self._responses = [
            (pattern, _load_behavior(raw, f"responses[{pattern!r}]"))
            for pattern, raw in pairs if pattern != "*"
        ]
        self._responses.extend(
            (pattern, _load_behavior(raw, f"responses[{pattern!r}]"))
            for pattern, raw in pairs if pattern == "*"
        )
        fault = script.get("fault_injection")
        if fault is not None:
            self._fault = _load_behavior({"status": fault.get("status", 429)}, "fault_injection")
            self._fault_p = float(fault.get("probability", 0.0))
            self._fault_rng = random.Random(fault.get("seed", 0))
        else:
            self._fault = None
            self._fault_p = 0.0
            self._fault_rng = None

    @property
    def call_count(self) -> int:
        with self._lock:
            return self._calls

    def generate(self, request: InferenceRequest) -> AdapterResponse:
        with self._lock:
            position = self._calls
            self._calls += 1
            if self._fault is not None:
                inject = self._fault_rng.random() < self._fault_p
            else:
                inject = False
            behavior = None
            if position < len(self._schedule):
                behavior = self._schedule[position]
        if inject:
            behavior = self._fault
        if behavior is None:
            for pattern, candidate in self._responses:
                if pattern == "*" or fnmatch.fnmatchcase(request.prompt, pattern):
                    behavior = candidate
                    break
        if behavior is None:
            return _err(500, "no scripted response matches prompt", self.model_id, call=position)
        if behavior["delay"] > 0:
            self._clock.sleep(behavior["delay"])
        if behavior["status"] == 200:
            text = request.prompt if behavior["echo"] else (behavior["text"] or "")
            return _ok(text, self.model_id, call=position)
        log = behavior["error"] or f"scripted status {behavior['status']}"
        return _err(behavior["status"], log, self.model_id, call=position)


# ---------------------------------------------------------------------------
# HTTP chat endpoint
#
# Generic JSON chat-completion shape: one user message in, one assistant
# message out. Request:
#   {"model": ..., "messages": [{"role": "user", "content": prompt}], ...gen}
# Reply:
#   {"message": {"role": "assistant", "content": "..."}}


class HttpChatEndpoint:
    def __init__(self, card: ModelCard, clock: Clock = SYSTEM_CLOCK):
        self.card = card
        self.model_id = card.model_id
        endpoint = card.endpoint
        self._url = endpoint.get("base_url")
        if not self._url:
            raise ProtocolError(422, f"model {card.model_id}: http-chat endpoint requires base_url")
        self._api_key = endpoint.get("api_key")
        self._deadline = float(endpoint.get("timeout_s", DEFAULT_DEADLINE_S))
        self._clock = clock

    def generate(self, request: InferenceRequest) -> AdapterResponse:
        generation = dict(self.card.generation_defaults)
        generation.update(request.generation)
        payload = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
        }
        payload.update(generation)
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        start = self._clock.now()
        try:
            reply = requests.post(self._url, json=payload, headers=headers, timeout=self._deadline)
        except requests.Timeout:
            return _err(503, f"timeout after {self._deadline}s", self.model_id)
        except requests.RequestException as exc:
            return _err(503, f"transport fault: {exc}", self.model_id)
        latency_ms = int((self._clock.now() - start) * 1000)
        if reply.status_code != 200:
            status = reply.status_code if reply.status_code in STATUS_CODES else (
                500 if reply.status_code >= 500 else 400
            )
            return _err(status, f"upstream status {reply.status_code}: {reply.text[:500]}",
                        self.model_id, latency_ms=latency_ms, upstream_status=reply.status_code)
        try:
            body = reply.json()
            content = body["message"]["content"]
            if not isinstance(content, str):
                raise TypeError("content is not a string")
        except (ValueError, KeyError, TypeError) as exc:
            return _err(500, f"malformed upstream reply: {exc}", self.model_id, latency_ms=latency_ms)
        meta = {"latency_ms": latency_ms}
        usage = body.get("usage")
        if isinstance(usage, dict):
            meta["token_counts"] = usage
        return _ok(content, self.model_id, **meta)


def open_endpoint(card: ModelCard, clock: Clock = SYSTEM_CLOCK):
    """Instantiate the endpoint a model card declares.

    Scripted endpoints are stateful (schedule cursor, fault RNG); callers
    that need reproducible sequences should open one endpoint per run.
    """
    kind = card.endpoint.get("kind")
    if kind == "scripted":
        script = card.endpoint.get("script")
        if script is None:
            script_path = card.endpoint.get("script_path")
            if not script_path:
                raise ProtocolError(422, f"model {card.model_id}: scripted endpoint needs script or script_path")
            script = json.loads(Path(script_path).read_text(encoding="utf-8"))
        return ScriptedEndpoint(card, script, clock=clock)
    if kind == "http-chat":
        return HttpChatEndpoint(card, clock=clock)
    raise ProtocolError(422, f"model {card.model_id}: unknown endpoint kind {kind!r}")


def generate(card: ModelCard, request: InferenceRequest, clock: Clock = SYSTEM_CLOCK) -> AdapterResponse:
    """One-shot convenience wrapper around open_endpoint().generate()."""
    return open_endpoint(card, clock=clock).generate(request)


# ---------------------------------------------------------------------------
# Model card discovery


class DiscoveryError(Exception):
    """Raised when a directory scan finds conflicting model cards."""


def load_model_card(path: Path) -> ModelCard:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ProtocolError(422, f"{path}: unreadable model card: {exc}")
    card = body_to_record(ModelCard, raw, path=str(path))
    if not card.model_id:
        raise ProtocolError(422, f"{path}: model_id must be non-empty")
    kind = card.endpoint.get("kind")
    if kind not in ("scripted", "http-chat"):
        raise ProtocolError(422, f"{path}: endpoint kind must be scripted or http-chat, got {kind!r}")
    if kind == "http-chat" and not card.endpoint.get("base_url"):
        raise ProtocolError(422, f"{path}: http-chat endpoint requires base_url")
    if kind == "scripted" and not (card.endpoint.get("script") or card.endpoint.get("script_path")):
        raise ProtocolError(422, f"{path}: scripted endpoint requires script or script_path")
    return card


def discover_models(directories) -> tuple:
    """Scan directories for *.model.json files.

    Returns (cards sorted by model_id, warnings). Invalid card files are
    reported as warnings, never fatal; the same model_id in two files is a
    DiscoveryError naming both paths.
    """
    cards = {}
    sources = {}
    warnings = []
    for directory in directories:
        directory = Path(directory)
        if not directory.is_dir():
            warnings.append(f"{directory}: not a readable directory")
            continue
        for path in sorted(directory.rglob(f"*{MODEL_CARD_SUFFIX}")):
            try:
                card = load_model_card(path)
            except ProtocolError as exc:
                warnings.append(str(exc))
                continue
            if card.model_id in cards:
                raise DiscoveryError(
                    f"duplicate model_id {card.model_id!r} in {sources[card.model_id]} and {path}"
                )
            expected_name = f"{card.model_id}{MODEL_CARD_SUFFIX}"
            if path.name != expected_name:
                warnings.append(f"{path}: filename does not match model_id (expected {expected_name})")
            cards[card.model_id] = card
            sources[card.model_id] = path
    for warning in warnings:
        logger.warning("model discovery: %s", warning)
    return [cards[mid] for mid in sorted(cards)], warnings
