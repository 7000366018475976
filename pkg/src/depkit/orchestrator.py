"""Client-side coordination: lifecycle, scheduling, congestion control, resume.

One evaluation run is a directory under the state root:

    <root>/evals/<evaluation_id>/manifest.json    frozen run configuration
    <root>/evals/<evaluation_id>/journal.ndjson   append-only event log
    <root>/evals/<evaluation_id>/report.json      final report envelope

The journal is the source of truth. Replaying it reconstructs the exact
task state, which is what makes breakpoint resume safe: samples with a
journaled prediction are never dispatched again, so interrupting and
resuming a run costs zero extra model calls. Journal lines are JSON, one
entry per line, fsynced on sample completions; a partial trailing line
(crash mid-write) is discarded on replay and only that sample is redone.

Scheduling runs in a single coordinator thread: it takes a token-bucket
permit per dispatch, hands the model call to a worker pool bounded by the
congestion governor's current limit, and folds every outcome back through
the status-code retry classes. 429s shrink the limit multiplicatively and
back the sample off; a streak of successes grows the limit additively.
"""

import json
import logging
import math
import os
import random
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .adapter import InferenceRequest, discover_models, open_endpoint
from .clock import Clock, SYSTEM_CLOCK
from .protocol import (
    EvaluationReport,
    LifecycleState,
    ModelCard,
    PredictionRecord,
    ProtocolError,
    RetryClass,
    body_to_record,
    classify_status,
    decode_message,
    encode_message,
    ensure_transition,
    new_evaluation_id,
    parse_evaluation_id,
    record_to_body,
)
from .server import CARD_FILENAME, PackageError, load_dataset_card
from .transport import DEFAULT_PAGE_LIMIT, ServerBinding, WireLog, bind

logger = logging.getLogger(__name__)

EVALS_DIRNAME = "evals"
MANIFEST_FILENAME = "manifest.json"
JOURNAL_FILENAME = "journal.ndjson"
REPORT_FILENAME = "report.json"
PAUSE_REQUEST_FILENAME = "pause.request"

MAX_BOUNDED_ATTEMPTS = 5
BACKOFF_BASE_S = 1.0
BACKOFF_FACTOR = 2.0
BACKOFF_JITTER = 0.2
BACKOFF_CAP_S = 60.0


def default_home() -> Path:
    env = os.environ.get("DEP_HOME")
    return Path(env) if env else Path.home() / ".dep"


# ---------------------------------------------------------------------------
# Token bucket


class TokenBucket:
    """Capacity-bounded reservoir refilling linearly; smooths request bursts.

    The level is refilled lazily from the elapsed time at each acquire, so
    the bucket needs no background thread and works on a virtual clock.
    """

    def __init__(self, capacity: int, refill_rate: float, clock: Clock = SYSTEM_CLOCK):
        if capacity < 1:
            raise ValueError("token bucket capacity must be a positive integer")
        if refill_rate <= 0:
            raise ValueError("token bucket refill rate must be positive")
        self.capacity = int(capacity)
        self.refill_rate = float(refill_rate)
        self._clock = clock
        self._level = float(capacity)
        self._updated = clock.now()
        self._lock = threading.Lock()

    def _refill(self, now: float) -> None:
        elapsed = max(0.0, now - self._updated)
        self._level = min(float(self.capacity), self._level + elapsed * self.refill_rate)
        self._updated = now

    @property
    def level(self) -> float:
        with self._lock:
            self._refill(self._clock.now())
            return self._level

    # tolerance for float drift; a sub-ulp wait would otherwise never let
    # the clock advance far enough to top the level up to exactly 1.0
    _EPSILON = 1e-9

    def acquire_nowait(self, now: Optional[float] = None) -> float:
        """Try to take one permit. Returns 0.0 when granted, else the wait in
        seconds until the level reaches one token (padded by a nanosecond so
        float rounding never undershoots the exact refill time)."""
        if now is None:
            now = self._clock.now()
        with self._lock:
            self._refill(now)
            if self._level >= 1.0 - self._EPSILON:
                self._level = max(0.0, self._level - 1.0)
                return 0.0
            return (1.0 - self._level) / self.refill_rate + self._EPSILON

    def acquire(self) -> None:
        """Block (on the injected clock) until a permit is granted."""
        while True:
            waited = self.acquire_nowait(self._clock.now())
            if waited == 0.0:
                return
            self._clock.sleep(waited)


# ---------------------------------------------------------------------------
# Concurrency governor (multiplicative decrease, additive increase)


class ConcurrencyGovernor:
    """In-flight limit reacting to rate-limit signals.

    429 multiplies the limit by decrease_factor (floored at 1); a cooldown
    streak of uninterrupted successes adds increase_step back, up to
    max_limit. Any non-200 breaks the streak.
    """

    def __init__(self, max_limit: int, start_limit: Optional[int] = None,
                 decrease_factor: float = 0.5, increase_step: int = 1,
                 cooldown_successes: int = 10):
        if max_limit < 1:
            raise ValueError("max_limit must be at least 1")
        if not 0.0 < decrease_factor < 1.0:
            raise ValueError("decrease_factor must be in (0, 1)")
        if increase_step < 1:
            raise ValueError("increase_step must be positive")
        self.max_limit = int(max_limit)
        self.min_limit = 1
        self.decrease_factor = float(decrease_factor)
        self.increase_step = int(increase_step)
        self.cooldown_successes = int(cooldown_successes)
        self.current_limit = min(self.max_limit, max(1, int(start_limit or max_limit)))
        self._streak = 0

    def on_status(self, status: int) -> int:
        if status == 429:
            self.current_limit = max(self.min_limit,
                                     math.floor(self.current_limit * self.decrease_factor))
            self._streak = 0
        elif status == 200:
            self._streak += 1
            if self._streak >= self.cooldown_successes:
                self.current_limit = min(self.max_limit, self.current_limit + self.increase_step)
                self._streak = 0
        else:
            self._streak = 0
        return self.current_limit


# ---------------------------------------------------------------------------
# Journal


class JournalError(Exception):
    """A journal entry could not be replayed; carries the offending line."""

    def __init__(self, message: str, line_number: int):
        self.line_number = line_number
        super().__init__(f"journal line {line_number}: {message}")


class RunJournal:
    """Append-only NDJSON event log for one evaluation."""

    def __init__(self, path):
        self.path = Path(path)
        self._file = None
        self._lock = threading.Lock()

    def append(self, entry: dict, durable: bool = False) -> None:
        line = json.dumps(entry, ensure_ascii=False, sort_keys=True)
        with self._lock:
            if self._file is None:
                self._file = self.path.open("a", encoding="utf-8")
            self._file.write(line + "\n")
            self._file.flush()
            if durable:
                os.fsync(self._file.fileno())

    def close(self) -> None:
        with self._lock:
            if self._file is not None:
                self._file.close()
                self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class ReplayState:
    """Everything a journal replay reconstructs about a task."""

    evaluation_id: str = ""
    manifest: dict = field(default_factory=dict)
    state: LifecycleState = LifecycleState.PAUSED
    created_at: float = 0.0
    updated_at: float = 0.0
    predictions: dict = field(default_factory=dict)   # sample_id -> PredictionRecord
    rate_events: list = field(default_factory=list)
    report_body: Optional[dict] = None
    fetched: int = 0
    submitted: int = 0
    last_error: Optional[str] = None

    @property
    def generated(self) -> int:
        return len(self.predictions)


def replay_journal(path) -> ReplayState:
    """Fold a journal back into task state.

    A partial trailing line is tolerated (discarded, its sample will be
    redone); a corrupt entry anywhere else raises JournalError naming the
    line. The state is reported as journaled: a running state either means
    a live scheduler owns the task or its process died; run() treats the
    latter as paused since only one scheduler per task ever runs.
    """
    path = Path(path)
    state = ReplayState()
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ProtocolError(404, f"no journal at {path}: {exc}")
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        try:
            entry = json.loads(line)
            if not isinstance(entry, dict):
                raise ValueError("entry is not an object")
        except ValueError as exc:
            if lineno == len(lines):
                logger.warning("discarding partial trailing journal line %d in %s", lineno, path)
                break
            raise JournalError(f"unparsable entry: {exc}", lineno)
        kind = entry.get("entry")
        if kind == "task-created":
            state.evaluation_id = entry.get("evaluation_id", "")
            state.manifest = entry.get("manifest", {})
            try:
                state.state = LifecycleState(entry.get("state", "paused"))
            except ValueError as exc:
                raise JournalError(f"bad task-created entry: {exc}", lineno)
            state.created_at = entry.get("at", 0.0)
        elif kind == "state-changed":
            try:
                state.state = LifecycleState(entry["to"])
            except (KeyError, ValueError) as exc:
                raise JournalError(f"bad state-changed entry: {exc}", lineno)
            progress = entry.get("progress", {})
            state.fetched = max(state.fetched, progress.get("fetched", 0))
            state.submitted = max(state.submitted, progress.get("submitted", 0))
            if entry.get("cause"):
                state.last_error = entry["cause"]
        elif kind == "sample-generated":
            sample_id = entry.get("sample_id")
            if not sample_id:
                raise JournalError("sample-generated entry without sample_id", lineno)
            if sample_id in state.predictions:
                raise JournalError(f"duplicate sample-generated for {sample_id}", lineno)
            try:
                record = body_to_record(PredictionRecord, entry["prediction"])
            except (KeyError, ProtocolError) as exc:
                raise JournalError(f"bad prediction body: {exc}", lineno)
            state.predictions[sample_id] = record
        elif kind == "rate-event":
            state.rate_events.append(entry)
        elif kind == "report-received":
            state.report_body = entry.get("report")
        else:
            raise JournalError(f"unknown entry kind {kind!r}", lineno)
        state.updated_at = entry.get("at", state.updated_at)
    return state


# ---------------------------------------------------------------------------
# Tasks


@dataclass
class Progress:
    fetched: int = 0
    generated: int = 0
    submitted: int = 0

    def to_dict(self) -> dict:
        return {"fetched": self.fetched, "generated": self.generated, "submitted": self.submitted}


@dataclass
class EvaluationTask:
    id: str
    state: LifecycleState
    manifest: dict
    progress: Progress = field(default_factory=Progress)
    created_at: float = 0.0
    updated_at: float = 0.0
    last_error: Optional[str] = None


@dataclass
class TaskStatus:
    """Point-in-time snapshot served by status queries."""

    evaluation_id: str
    state: LifecycleState
    model_id: str
    dataset_id: str
    progress: dict
    rate_events: int
    recent_rate_events: list
    last_error: Optional[str]
    report_available: bool


@dataclass
class Leaderboard:
    """Models as rows, (dataset, metric) pairs as columns."""

    columns: tuple  # tuple[(dataset_id, metric_name)]
    rows: tuple     # tuple[(model_id, {(dataset_id, metric): score})]


class _Pending:
    """Mutable dispatch bookkeeping for one sample within one run."""

    __slots__ = ("sample", "attempts", "bounded_failures", "retries", "not_before")

    def __init__(self, sample):
        self.sample = sample
        self.attempts = 0
        self.bounded_failures = 0
        self.retries = 0
        self.not_before = 0.0


class Orchestrator:
    """Drives evaluations against a benchmark server binding.

    All methods are safe to call from separate processes sharing one state
    root; the journal is the only coordination medium.
    """

    def __init__(self, home=None, clock: Clock = SYSTEM_CLOCK):
        self.home = Path(home) if home else default_home()
        self._clock = clock

    # -- paths

    def _eval_dir(self, evaluation_id: str) -> Path:
        return self.home / EVALS_DIRNAME / evaluation_id

    def _journal_path(self, evaluation_id: str) -> Path:
        return self._eval_dir(evaluation_id) / JOURNAL_FILENAME

    def _report_path(self, evaluation_id: str) -> Path:
        return self._eval_dir(evaluation_id) / REPORT_FILENAME

    def list_evaluations(self) -> list:
        root = self.home / EVALS_DIRNAME
        if not root.is_dir():
            return []
        return sorted(p.name for p in root.iterdir() if (p / JOURNAL_FILENAME).is_file())

    # -- discovery

    def discover(self, roots) -> tuple:
        """Scan directories for model cards and dataset cards.

        Returns (models, dataset_cards, warnings). Adding or removing a card
        directory changes the next scan's result; nothing is cached.
        """
        models, warnings = discover_models(roots)
        datasets = []
        seen = {}
        for root in roots:
            root = Path(root)
            if not root.is_dir():
                continue
            for card_path in sorted(root.rglob(CARD_FILENAME)):
                try:
                    card = load_dataset_card(card_path)
                except PackageError as exc:
                    warnings.append(str(exc))
                    continue
                key = (card.dataset_id, card.version)
                if key in seen:
                    warnings.append(
                        f"duplicate dataset {key[0]}@{key[1]} in {seen[key]} and {card_path}")
                    continue
                seen[key] = card_path
                datasets.append(card)
        datasets.sort(key=lambda c: (c.dataset_id, c.version))
        return models, datasets, warnings

    # -- task creation

    def create_evaluation(self, model, dataset_id: str, binding: ServerBinding,
                          model_dirs=(), generation: Optional[dict] = None,
                          concurrency: Optional[dict] = None, rate: Optional[dict] = None,
                          submit_every: int = 0, page_limit: int = DEFAULT_PAGE_LIMIT) -> EvaluationTask:
        """Register a new evaluation in the paused state.

        model is a model_id resolved against model_dirs, or a ModelCard. The
        dataset must be listed by the bound server. The manifest embeds the
        resolved model card so the run is reproducible from disk alone.
        """
        if isinstance(model, str):
            models, _ = discover_models(model_dirs)
            by_id = {card.model_id: card for card in models}
            if model not in by_id:
                raise ProtocolError(404, f"model not found: {model}")
            card = by_id[model]
        else:
            card = model

        handle = bind(binding)
        datasets = {c.dataset_id: c for c in handle.list_datasets()}
        if dataset_id not in datasets:
            raise ProtocolError(404, f"dataset not found: {dataset_id}")
        dataset_card = datasets[dataset_id]

        concurrency = dict(concurrency or {})
        concurrency.setdefault("max_limit", 4)
        rate = dict(rate) if rate else None
        try:
            ConcurrencyGovernor(**concurrency)
            if rate is not None:
                TokenBucket(rate.get("capacity", 0), rate.get("refill_rate", 0.0), clock=self._clock)
        except (TypeError, ValueError) as exc:
            raise ProtocolError(422, f"invalid run configuration: {exc}")
        if submit_every < 0 or page_limit < 1:
            raise ProtocolError(422, "submit_every must be >= 0 and page_limit >= 1")

        evaluation_id = new_evaluation_id()
        created_at = time.time()
        manifest = {
            "evaluation_id": evaluation_id,
            "created_at": created_at,
            "model_card": record_to_body(card),
            "dataset_id": dataset_id,
            "dataset_version": dataset_card.version,
            "binding": binding.to_dict(),
            "generation": dict(generation or {}),
            "concurrency": concurrency,
            "rate": rate,
            "submit_every": int(submit_every),
            "page_limit": int(page_limit),
        }
        eval_dir = self._eval_dir(evaluation_id)
        eval_dir.mkdir(parents=True)
        # no sort_keys: order inside embedded scripts is meaningful
        (eval_dir / MANIFEST_FILENAME).write_text(
            json.dumps(manifest, indent=2), encoding="utf-8")
        with RunJournal(self._journal_path(evaluation_id)) as journal:
            journal.append({
                "entry": "task-created",
                "evaluation_id": evaluation_id,
                "state": LifecycleState.PAUSED.value,
                "manifest": manifest,
                "at": created_at,
            }, durable=True)
        return EvaluationTask(
            id=evaluation_id, state=LifecycleState.PAUSED, manifest=manifest,
            created_at=created_at, updated_at=created_at)

    # -- lifecycle

    def load_task(self, evaluation_id: str) -> EvaluationTask:
        evaluation_id = parse_evaluation_id(evaluation_id)
        replay = replay_journal(self._journal_path(evaluation_id))
        task = EvaluationTask(
            id=evaluation_id, state=replay.state, manifest=replay.manifest,
            created_at=replay.created_at, updated_at=replay.updated_at,
            last_error=replay.last_error)
        task.progress = Progress(
            fetched=max(replay.fetched, replay.generated),
            generated=replay.generated,
            submitted=replay.submitted)
        return task

    def request_pause(self, evaluation_id: str) -> None:
        """Ask a run owned by another process to pause at the next checkpoint."""
        evaluation_id = parse_evaluation_id(evaluation_id)
        eval_dir = self._eval_dir(evaluation_id)
        if not eval_dir.is_dir():
            raise ProtocolError(404, f"evaluation not found: {evaluation_id}")
        (eval_dir / PAUSE_REQUEST_FILENAME).touch()

    def status(self, evaluation_id: str) -> TaskStatus:
        evaluation_id = parse_evaluation_id(evaluation_id)
        journal_path = self._journal_path(evaluation_id)
        if not journal_path.is_file():
            raise ProtocolError(404, f"evaluation not found: {evaluation_id}")
        replay = replay_journal(journal_path)
        manifest = replay.manifest
        return TaskStatus(
            evaluation_id=evaluation_id,
            state=replay.state,
            model_id=manifest.get("model_card", {}).get("model_id", ""),
            dataset_id=manifest.get("dataset_id", ""),
            progress={"fetched": max(replay.fetched, replay.generated),
                      "generated": replay.generated,
                      "submitted": replay.submitted},
            rate_events=len(replay.rate_events),
            recent_rate_events=replay.rate_events[-20:],
            last_error=replay.last_error,
            report_available=self._report_path(evaluation_id).is_file(),
        )

    def stored_report(self, evaluation_id: str) -> EvaluationReport:
        evaluation_id = parse_evaluation_id(evaluation_id)
        path = self._report_path(evaluation_id)
        if not path.is_file():
            raise ProtocolError(404, f"no report for evaluation {evaluation_id}")
        return decode_message(path.read_bytes(), expect="evaluation_report")

    # -- running

    def run(self, evaluation_id: str, interrupt: Optional[threading.Event] = None,
            capture: Optional[WireLog] = None, endpoint=None,
            rng: Optional[random.Random] = None) -> EvaluationTask:
        """Run (or resume) an evaluation until it completes, fails, or pauses.

        Replays the journal first, so samples generated by earlier runs are
        never dispatched again. A set interrupt event or a pause request
        file stops dispatching, drains what is in flight, and leaves the
        task paused with the journal intact.
        """
        evaluation_id = parse_evaluation_id(evaluation_id)
        replay = replay_journal(self._journal_path(evaluation_id))
        state = replay.state
        if state is LifecycleState.RUNNING:
            # journaled running with no live scheduler means the last run
            # died without a clean pause entry; resume from where it stopped
            state = LifecycleState.PAUSED
        task = EvaluationTask(
            id=evaluation_id, state=state, manifest=replay.manifest,
            created_at=replay.created_at, updated_at=replay.updated_at)
        task.progress = Progress(fetched=replay.generated, generated=replay.generated,
                                 submitted=replay.submitted)

        if task.state is LifecycleState.COMPLETED:
            return task  # terminal: resuming a finished run is a no-op

        rng = rng or random.Random()
        with RunJournal(self._journal_path(evaluation_id)) as journal:
            self._transition(task, journal, LifecycleState.RUNNING)
            try:
                self._execute(task, journal, replay, interrupt, capture, endpoint, rng)
            except ProtocolError as exc:
                # failed is reserved for unrecoverable causes; a transient
                # server fault leaves the task paused and resumable
                if classify_status(exc.code) is RetryClass.NEVER:
                    self._fail(task, journal, f"protocol error {exc.code}: {exc.message}")
                else:
                    self._transition(task, journal, LifecycleState.PAUSED,
                                     cause=f"transient server fault {exc.code}: {exc.message}")
        return task

    def resume(self, evaluation_id: str, **kwargs) -> EvaluationTask:
        """Continue an interrupted or failed run from its journal frontier."""
        return self.run(evaluation_id, **kwargs)

    # -- internals

    def _transition(self, task: EvaluationTask, journal: RunJournal,
                    target: LifecycleState, cause: Optional[str] = None) -> None:
        source = task.state
        ensure_transition(source, target)
        task.state = target
        task.updated_at = time.time()
        payload = {
            "entry": "state-changed",
            "from": source.value,
            "to": target.value,
            "progress": task.progress.to_dict(),
            "at": task.updated_at,
        }
        if cause:
            payload["cause"] = cause
            task.last_error = cause
        journal.append(payload, durable=True)

    def _fail(self, task, journal, cause: str) -> None:
        logger.error("evaluation %s failed: %s", task.id, cause)
        self._transition(task, journal, LifecycleState.FAILED, cause=cause)

    def _pause_requested(self, evaluation_id: str) -> bool:
        return (self._eval_dir(evaluation_id) / PAUSE_REQUEST_FILENAME).is_file()

    def _clear_pause_request(self, evaluation_id: str) -> None:
        try:
            (self._eval_dir(evaluation_id) / PAUSE_REQUEST_FILENAME).unlink()
        except OSError:
            pass

    def _backoff_s(self, retries: int, rng: random.Random) -> float:
        delay = min(BACKOFF_CAP_S, BACKOFF_BASE_S * (BACKOFF_FACTOR ** retries))
        return delay * (1.0 + rng.uniform(-BACKOFF_JITTER, BACKOFF_JITTER))

    SUBMIT_ATTEMPTS = 3

    def _submit_with_retry(self, task, journal, handle, predictions, rng):
        """Submit the final batch, retrying transient rejections.

        Safe because identical resubmissions are idempotent server-side.
        Returns the report, or None after moving the task to failed (the
        server rejected the payload outright, or the conflict persisted) or
        paused (still-transient fault, resumable later).
        """
        for attempt in range(self.SUBMIT_ATTEMPTS):
            try:
                return handle.submit(task.id, predictions)
            except ProtocolError as exc:
                retry_class = classify_status(exc.code)
                if retry_class is RetryClass.NEVER:
                    self._fail(task, journal, f"submission rejected: {exc.code} {exc.message}")
                    return None
                if attempt + 1 >= self.SUBMIT_ATTEMPTS:
                    if exc.code == 409:
                        self._fail(task, journal,
                                   f"submission rejected: {exc.code} {exc.message}")
                    else:
                        self._transition(
                            task, journal, LifecycleState.PAUSED,
                            cause=f"submission kept failing: {exc.code} {exc.message}")
                    return None
                self._clock.sleep(self._backoff_s(attempt, rng))
        return None

    def _fetch_all(self, handle, dataset_id: str, page_limit: int) -> list:
        samples = []
        offset = 0
        while True:
            batch = handle.fetch_samples(dataset_id, offset=offset, limit=page_limit)
            samples.extend(batch.samples)
            offset += len(batch.samples)
            if not batch.samples or offset >= batch.total:
                return samples

    def _execute(self, task, journal, replay, interrupt, capture, endpoint, rng) -> None:
        manifest = task.manifest
        dataset_id = manifest["dataset_id"]
        model_body = manifest["model_card"]
        model_id = model_body["model_id"]
        binding = ServerBinding.from_dict(manifest["binding"])
        handle = bind(binding, capture=capture, clock=self._clock)
        if endpoint is None:
            endpoint = open_endpoint(body_to_record(ModelCard, model_body), clock=self._clock)

        handle.open_evaluation(task.id, dataset_id, model_id)
        samples = self._fetch_all(handle, dataset_id, manifest.get("page_limit", DEFAULT_PAGE_LIMIT))
        task.progress.fetched = len(samples)

        results = dict(replay.predictions)
        order = [s.sample_id for s in samples]
        pending = deque(_Pending(s) for s in samples if s.sample_id not in results)

        conc = manifest.get("concurrency", {})
        governor = ConcurrencyGovernor(
            max_limit=conc.get("max_limit", 4),
            start_limit=conc.get("start_limit"),
            decrease_factor=conc.get("decrease_factor", 0.5),
            increase_step=conc.get("increase_step", 1),
            cooldown_successes=conc.get("cooldown_successes", 10),
        )
        rate_cfg = manifest.get("rate")
        bucket = None
        if rate_cfg:
            bucket = TokenBucket(rate_cfg["capacity"], rate_cfg["refill_rate"], clock=self._clock)
        submit_every = manifest.get("submit_every", 0)
        generation = manifest.get("generation", {})
        since_interim = 0

        interrupted = False

        def interrupt_requested() -> bool:
            if interrupt is not None and interrupt.is_set():
                return True
            return self._pause_requested(task.id)

        def handle_outcome(item: _Pending, response, latency_ms: int) -> None:
            nonlocal since_interim
            status = response.status
            governor_before = governor.current_limit
            governor.on_status(status)
            retry_class = classify_status(status)
            if status == 200:
                record = PredictionRecord(
                    sample_id=item.sample.sample_id,
                    raw_output=response.text,
                    status=200,
                    latency_ms=latency_ms,
                    attempt_count=item.attempts,
                )
                journal.append({
                    "entry": "sample-generated",
                    "sample_id": record.sample_id,
                    "prediction": record_to_body(record),
                    "at": time.time(),
                }, durable=True)
                results[record.sample_id] = record
                task.progress.generated += 1
                since_interim += 1
                return
            if retry_class is RetryClass.BACKOFF_AND_REDUCE:
                item.retries += 1
                backoff = self._backoff_s(item.retries - 1, rng)
                item.not_before = self._clock.now() + backoff
                journal.append({
                    "entry": "rate-event",
                    "status": status,
                    "sample_id": item.sample.sample_id,
                    "limit_before": governor_before,
                    "limit_after": governor.current_limit,
                    "backoff_s": round(backoff, 6),
                    "at": time.time(),
                })
                pending.append(item)
                return
            if retry_class is RetryClass.BOUNDED_RETRY:
                item.bounded_failures += 1
                if item.bounded_failures < MAX_BOUNDED_ATTEMPTS:
                    item.retries += 1
                    backoff = self._backoff_s(item.retries - 1, rng)
                    item.not_before = self._clock.now() + backoff
                    journal.append({
                        "entry": "rate-event",
                        "status": status,
                        "sample_id": item.sample.sample_id,
                        "limit_before": governor_before,
                        "limit_after": governor.current_limit,
                        "backoff_s": round(backoff, 6),
                        "at": time.time(),
                    })
                    pending.append(item)
                    return
            # never-retry status, or bounded retries exhausted: terminal failure
            record = PredictionRecord(
                sample_id=item.sample.sample_id,
                raw_output="",
                status=status,
                latency_ms=latency_ms,
                attempt_count=item.attempts,
            )
            journal.append({
                "entry": "sample-generated",
                "sample_id": record.sample_id,
                "prediction": record_to_body(record),
                "at": time.time(),
            }, durable=True)
            results[record.sample_id] = record
            task.progress.generated += 1
            logger.warning("sample %s permanently failed with status %d after %d attempts",
                           record.sample_id, status, item.attempts)

        def call_model(item: _Pending):
            request = InferenceRequest(
                prompt=item.sample.prompt,
                generation=generation,
                request_id=f"{task.id}:{item.sample.sample_id}:{item.attempts}",
            )
            started = self._clock.now()
            response = endpoint.generate(request)
            measured_ms = max(0, int((self._clock.now() - started) * 1000))
            latency = response.metadata.get("latency_ms", measured_ms)
            return response, int(latency)

        in_flight = {}
        with ThreadPoolExecutor(max_workers=governor.max_limit,
                                thread_name_prefix=f"dep-{task.id[:8]}") as pool:
            while pending or in_flight:
                # fold finished calls back into the schedule
                finished = [f for f in list(in_flight) if f.done()]
                for future in finished:
                    item = in_flight.pop(future)
                    response, latency_ms = future.result()
                    handle_outcome(item, response, latency_ms)
                # checked after reaping so an interrupt raised by the call
                # that just completed stops the very next dispatch
                if not interrupted and interrupt_requested():
                    interrupted = True
                if interrupted:
                    if in_flight:
                        wait(list(in_flight), return_when=FIRST_COMPLETED)
                        continue
                    break
                if submit_every and since_interim >= submit_every and results:
                    since_interim = 0
                    try:
                        snapshot = [results[sid] for sid in order if sid in results]
                        handle.submit(task.id, snapshot, interim=True)
                    except ProtocolError as exc:
                        logger.warning("interim submission failed: %s", exc)
                dispatched = False
                now = self._clock.now()
                while len(in_flight) < governor.current_limit:
                    item = next((p for p in pending if p.not_before <= now), None)
                    if item is None:
                        break
                    if bucket is not None:
                        bucket.acquire()
                    pending.remove(item)
                    item.attempts += 1
                    in_flight[pool.submit(call_model, item)] = item
                    dispatched = True
                    now = self._clock.now()
                if dispatched:
                    continue
                if in_flight:
                    wait(list(in_flight), return_when=FIRST_COMPLETED, timeout=0.05)
                elif pending:
                    next_ready = min(p.not_before for p in pending)
                    self._clock.sleep(max(0.0, next_ready - self._clock.now()))

        if interrupted:
            self._clear_pause_request(task.id)
            self._transition(task, journal, LifecycleState.PAUSED)
            return

        predictions = [results[sid] for sid in order]
        if replay.report_body is not None:
            report = body_to_record(EvaluationReport, replay.report_body)
        else:
            report = self._submit_with_retry(task, journal, handle, predictions, rng)
            if report is None:
                return
            journal.append({
                "entry": "report-received",
                "report": record_to_body(report),
                "at": time.time(),
            }, durable=True)
        task.progress.submitted = len(predictions)
        self._report_path(task.id).write_bytes(encode_message(report))
        self._transition(task, journal, LifecycleState.COMPLETED)

    # -- aggregation

    def aggregate(self, evaluation_ids=None, dataset_id: Optional[str] = None,
                  sort_by: Optional[tuple] = None) -> Leaderboard:
        """Build a leaderboard over stored reports.

        Rows are models, columns (dataset, metric) pairs. When one model has
        several reports for a dataset, the most recently created run wins.
        Rows sort descending by the chosen column (default: the first), ties
        broken by model_id ascending.
        """
        selected = set(evaluation_ids) if evaluation_ids else None
        best = {}  # (model_id, dataset_id) -> (created_at, report)
        for eid in self.list_evaluations():
            if selected is not None and eid not in selected:
                continue
            path = self._report_path(eid)
            if not path.is_file():
                continue
            report = decode_message(path.read_bytes(), expect="evaluation_report")
            if dataset_id is not None and report.dataset_id != dataset_id:
                continue
            manifest_path = self._eval_dir(eid) / MANIFEST_FILENAME
            created = 0.0
            if manifest_path.is_file():
                created = json.loads(manifest_path.read_text(encoding="utf-8")).get("created_at", 0.0)
            key = (report.model_id, report.dataset_id)
            if key not in best or created > best[key][0]:
                best[key] = (created, report)

        columns = sorted({
            (report.dataset_id, metric)
            for _, report in best.values()
            for metric in report.overall
        })
        scores = {}
        for (model_id, ds_id), (_, report) in best.items():
            row = scores.setdefault(model_id, {})
            for metric, value in report.overall.items():
                row[(ds_id, metric)] = value

        if not columns:
            return Leaderboard(columns=(), rows=())
        sort_column = sort_by if sort_by in columns else columns[0]
        ordered = sorted(
            scores.items(),
            key=lambda kv: (-(kv[1].get(sort_column, float("-inf"))), kv[0]),
        )
        return Leaderboard(columns=tuple(columns), rows=tuple(ordered))
