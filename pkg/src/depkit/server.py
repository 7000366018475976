"""Server-side benchmark packaging and evaluation.

A benchmark package is a directory:

    <dir>/dataset.card.json    discovery manifest (DatasetCard body)
    <dir>/loader.json          format, field mapping, post-processing, metric bindings
    <dir>/prompt.tmpl          prompt template with {field} placeholders
    <dir>/data/*               raw benchmark files, read-only, never rewritten
    <dir>/runs/                per-evaluation reports written by the service

Raw data is loaded in whatever format the author shipped (JSONL, CSV, or a
custom loader script); prompts are rendered from the author's template, so
clients reproduce the author's intended inference setup exactly. Gold
answers stay in GoldRecord values which have no wire encoding: nothing in
this module can serialize them into a client-bound message.
"""

import contextlib
import csv
import hashlib
import importlib.util
import json
import logging
import re
import string
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import metrics as metrics_mod
from .adapter import InferenceRequest, open_endpoint
from .clock import Clock, SYSTEM_CLOCK
from .protocol import (
    DatasetCard,
    EvaluationReport,
    PredictionRecord,
    ProtocolError,
    SampleEnvelope,
    body_to_record,
    classify_status,
    decode_message,
    encode_message,
    parse_evaluation_id,
    RetryClass,
)

logger = logging.getLogger(__name__)

CARD_FILENAME = "dataset.card.json"
LOADER_FILENAME = "loader.json"
TEMPLATE_FILENAME = "prompt.tmpl"
DATA_DIRNAME = "data"
RUNS_DIRNAME = "runs"

EXTRACTION_KINDS = ("verbatim", "regex-capture", "last-choice-letter", "after-marker")


class PackageError(Exception):
    """A benchmark package failed validation; message names the offender."""


@dataclass(frozen=True)
class GoldRecord:
    """Canonical answer(s) for one sample.

    Intentionally not a wire type: there is no encoding of a GoldRecord into
    any client-bound message, which is what keeps ground truth server-side.
    """

    sample_id: str
    gold: tuple
    subtask: Optional[str] = None


@dataclass(frozen=True)
class ExtractionRule:
    """Total post-processing rule: every output yields an answer or unparsed.

    Unparsed is represented as None and always scores zero.
    """

    kind: str
    pattern: Optional[str] = None
    marker: Optional[str] = None
    choices: str = "ABCD"


def extraction_rule_from_config(config: dict) -> ExtractionRule:
    kind = config.get("kind", "verbatim")
    if kind not in EXTRACTION_KINDS:
        raise PackageError(f"unknown postprocess kind {kind!r} (expected one of {EXTRACTION_KINDS})")
    rule = ExtractionRule(
        kind=kind,
        pattern=config.get("pattern"),
        marker=config.get("marker"),
        choices=config.get("choices", "ABCD"),
    )
    if kind == "regex-capture":
        if not rule.pattern:
            raise PackageError("regex-capture rule requires a pattern")
        try:
            re.compile(rule.pattern)
        except re.error as exc:
            raise PackageError(f"regex-capture pattern does not compile: {exc}")
    if kind == "after-marker" and not rule.marker:
        raise PackageError("after-marker rule requires a marker")
    if kind == "last-choice-letter" and not rule.choices:
        raise PackageError("last-choice-letter rule requires a non-empty choice alphabet")
    return rule


def extract_answer(rule: ExtractionRule, raw_output: str) -> Optional[str]:
    """Apply a post-processing rule to raw model output.

    Returns the extracted answer, or None for unparsed (scored as wrong).
    """
    if rule.kind == "verbatim":
        return raw_output
    if rule.kind == "regex-capture":
        matches = list(re.finditer(rule.pattern, raw_output))
        if not matches:
            return None
        last = matches[-1]
        return last.group(1) if last.groups() else last.group(0)
    if rule.kind == "last-choice-letter":
        letters = re.findall(rf"\b([{re.escape(rule.choices)}])\b", raw_output)
        return letters[-1] if letters else None
    if rule.kind == "after-marker":
        index = raw_output.rfind(rule.marker)
        if index < 0:
            return None
        return raw_output[index + len(rule.marker):].strip()
    raise PackageError(f"unknown extraction kind {rule.kind!r}")


# ---------------------------------------------------------------------------
# Metric bindings


@dataclass(frozen=True)
class MetricBinding:
    """One scoring column of the report: a name plus a per-pair scorer.

    kind is "builtin", "custom" (author script), or "judge".
    """

    name: str
    kind: str
    pair_scorer: Optional[Callable] = None
    normalization: metrics_mod.NormalizationSpec = metrics_mod.DEFAULT_NORMALIZATION
    judge_config: Optional[dict] = None


@dataclass(frozen=True)
class Sample:
    """Client-visible half of one benchmark record."""

    sample_id: str
    inputs: dict
    subtask: Optional[str] = None


@dataclass(frozen=True)
class BenchmarkPackage:
    card: DatasetCard
    root: Path
    samples: tuple          # tuple[Sample], source order
    golds: dict             # sample_id -> GoldRecord
    prompt_template: str
    extraction: ExtractionRule
    metric_bindings: tuple  # tuple[MetricBinding]

    @property
    def sample_count(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# Raw data loading


def _read_jsonl(path: Path) -> list:
    rows = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except ValueError as exc:
                raise PackageError(f"{path}:{lineno}: invalid JSON: {exc}")
            if not isinstance(row, dict):
                raise PackageError(f"{path}:{lineno}: row must be a JSON object")
            rows.append(row)
    return rows


def _read_csv(path: Path) -> list:
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise PackageError(f"{path}: CSV file has no header row")
        return [dict(row) for row in reader]


def _load_custom(root: Path, loader_rel: str) -> list:
    script = root / loader_rel
    if not script.is_file():
        raise PackageError(f"custom loader script not found: {script}")
    spec = importlib.util.spec_from_file_location(f"depkit_loader_{script.stem}", script)
    module = importlib.util.module_from_spec(spec)
    try:
        spec.loader.exec_module(module)
    except Exception as exc:
        raise PackageError(f"{script}: loader script failed to import: {exc}")
    load_records = getattr(module, "load_records", None)
    if load_records is None:
        raise PackageError(f"{script}: loader script must define load_records(package_dir)")
    rows = list(load_records(root))
    for i, row in enumerate(rows):
        if not isinstance(row, dict):
            raise PackageError(f"{script}: load_records()[{i}] is not a dict")
    return rows


def _load_rows(root: Path, loader: dict) -> list:
    fmt = loader.get("format")
    if fmt == "custom":
        return _load_custom(root, loader.get("custom_loader", ""))
    files = loader.get("files")
    if files:
        paths = [root / f for f in files]
    else:
        data_dir = root / DATA_DIRNAME
        paths = sorted(p for p in data_dir.glob("*") if p.is_file()) if data_dir.is_dir() else []
    if not paths:
        raise PackageError(f"{root}: no data files found")
    rows = []
    for path in paths:
        if not path.is_file():
            raise PackageError(f"data file not found: {path}")
        if fmt == "jsonl":
            rows.extend(_read_jsonl(path))
        elif fmt == "csv":
            rows.extend(_read_csv(path))
        else:
            raise PackageError(f"{root}: unsupported loader format {fmt!r}")
    return rows


def _template_placeholders(template: str) -> set:
    try:
        parsed = list(string.Formatter().parse(template))
    except ValueError as exc:
        raise PackageError(f"prompt template does not parse: {exc}")
    names = set()
    for _, field_name, _, _ in parsed:
        if field_name is None:
            continue
        if field_name == "":
            raise PackageError("prompt template uses positional {} placeholders; name them")
        names.add(field_name.split(".")[0].split("[")[0])
    return names


def _as_answer_tuple(value) -> tuple:
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value)
    return (str(value),)


def _load_metric_bindings(card: DatasetCard, loader: dict, root: Path) -> tuple:
    """Resolve one MetricBinding per card metric.

    Builtins bind by name; entries with a script load an author scorer with
    score_pairs(pairs) -> float per pair; the judge config binds its metric.
    """
    declared = {}
    for entry in loader.get("metrics", []):
        name = entry.get("name")
        if not name:
            raise PackageError("metric binding without a name")
        declared[name] = entry
    judge = loader.get("judge")
    judge_metric = judge.get("metric", "judge") if judge else None
    if judge:
        for key in ("model_id", "rubric"):
            if not judge.get(key):
                raise PackageError(f"judge binding requires {key}")
        for placeholder in ("{prediction}", "{gold}"):
            if placeholder not in judge["rubric"]:
                raise PackageError(f"judge rubric must contain {placeholder}")
        if judge_metric not in card.metrics:
            raise PackageError(f"judge metric {judge_metric!r} not declared in card metrics")

    bindings = []
    for name in card.metrics:
        entry = declared.get(name, {})
        norm = metrics_mod.DEFAULT_NORMALIZATION
        if "normalization" in entry:
            try:
                norm = metrics_mod.NormalizationSpec.from_overrides(entry["normalization"])
            except (TypeError, ValueError) as exc:
                raise PackageError(f"metric {name}: {exc}")
        if name == judge_metric:
            bindings.append(MetricBinding(name=name, kind="judge", judge_config=judge))
        elif "script" in entry:
            bindings.append(MetricBinding(
                name=name, kind="custom",
                pair_scorer=_load_custom_scorer(root, entry["script"], name),
                normalization=norm,
            ))
        elif name in metrics_mod.BUILTIN_METRICS:
            bindings.append(MetricBinding(
                name=name, kind="builtin",
                pair_scorer=metrics_mod.BUILTIN_METRICS[name][1],
                normalization=norm,
            ))
        else:
            raise PackageError(
                f"metric {name!r} is not built in; bind a script or judge for it"
            )
    unknown = set(declared) - set(card.metrics)
    if unknown:
        raise PackageError(f"loader binds metrics not in card: {sorted(unknown)}")
    return tuple(bindings)


def _load_custom_scorer(root: Path, script_rel: str, name: str) -> Callable:
    script = root / script_rel
    if not script.is_file():
        raise PackageError(f"metric {name}: scorer script not found: {script}")
    spec = importlib.util.spec_from_file_location(f"depkit_metric_{script.stem}", script)
    module = importlib.util.module_from_spec(spec)
    try:
        spec.loader.exec_module(module)
    except Exception as exc:
        raise PackageError(f"metric {name}: scorer script failed to import: {exc}")
    scorer = getattr(module, "score_pair", None)
    if scorer is None:
        raise PackageError(f"metric {name}: scorer script must define score_pair(prediction, golds)")
    return scorer


def load_dataset_card(path) -> DatasetCard:
    """Parse and validate a dataset card file (card-level checks only)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise PackageError(f"{path}: unreadable dataset card: {exc}")
    try:
        card = body_to_record(DatasetCard, raw, path=str(path))
    except ProtocolError as exc:
        raise PackageError(f"{path}: {exc}")
    if not card.metrics:
        raise PackageError(f"{path}: card must declare at least one metric")
    if card.data_format not in ("jsonl", "csv", "custom"):
        raise PackageError(f"{path}: data_format must be jsonl, csv, or custom")
    if card.sample_count < 0:
        raise PackageError(f"{path}: sample_count must be non-negative")
    return card


def load_package(directory) -> BenchmarkPackage:
    """Load and validate one benchmark package directory.

    Source files are read-only inputs; loading never rewrites them.
    """
    root = Path(directory)
    card_path = root / CARD_FILENAME
    if not card_path.is_file():
        raise PackageError(f"{root}: missing {CARD_FILENAME}")
    card = load_dataset_card(card_path)

    loader_path = root / LOADER_FILENAME
    if not loader_path.is_file():
        raise PackageError(f"{root}: missing {LOADER_FILENAME}")
    try:
        loader = json.loads(loader_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise PackageError(f"{loader_path}: unreadable loader config: {exc}")
    fmt = loader.get("format")
    if fmt not in ("jsonl", "csv", "custom"):
        raise PackageError(f"{loader_path}: format must be jsonl, csv, or custom (got {fmt!r})")
    if fmt != card.data_format:
        raise PackageError(
            f"{loader_path}: loader format {fmt!r} does not match card data_format {card.data_format!r}"
        )

    fields_cfg = loader.get("fields", {})
    inputs = fields_cfg.get("inputs", [])
    gold_field = fields_cfg.get("gold")
    if not gold_field:
        raise PackageError(f"{loader_path}: field mapping must name exactly one gold field")
    gold_fields = gold_field if isinstance(gold_field, list) else [gold_field]
    if not gold_fields:
        raise PackageError(f"{loader_path}: field mapping must name exactly one gold field")
    overlap = set(gold_fields) & set(inputs)
    if overlap:
        raise PackageError(f"{loader_path}: gold field(s) {sorted(overlap)} cannot be prompt inputs")
    subtask_field = fields_cfg.get("subtask")
    id_field = fields_cfg.get("id")

    template_ref = card.prompt_template_ref or TEMPLATE_FILENAME
    template_path = root / template_ref
    if not template_path.is_file():
        raise PackageError(f"{root}: missing prompt template {template_ref}")
    template = template_path.read_text(encoding="utf-8")
    placeholders = _template_placeholders(template)
    unmapped = placeholders - set(inputs)
    if unmapped:
        raise PackageError(
            f"{template_path}: template placeholder(s) {sorted(unmapped)} not mapped as prompt inputs"
        )

    rows = _load_rows(root, loader)
    if len(rows) != card.sample_count:
        raise PackageError(
            f"{root}: card declares sample_count {card.sample_count} but {len(rows)} records loaded"
        )

    samples = []
    golds = {}
    seen_subtasks = set()
    for i, row in enumerate(rows):
        where = f"{root} record {i}"
        for name in list(inputs) + gold_fields:
            if name not in row:
                raise PackageError(f"{where}: missing field {name!r}")
        sample_id = str(row[id_field]) if id_field else f"s{i:06d}"
        if sample_id in golds:
            raise PackageError(f"{where}: duplicate sample_id {sample_id!r}")
        subtask = None
        if subtask_field is not None:
            if subtask_field not in row:
                raise PackageError(f"{where}: missing subtask field {subtask_field!r}")
            subtask = str(row[subtask_field])
            seen_subtasks.add(subtask)
        gold_values = []
        for name in gold_fields:
            gold_values.extend(_as_answer_tuple(row[name]))
        samples.append(Sample(
            sample_id=sample_id,
            inputs={name: str(row[name]) for name in inputs},
            subtask=subtask,
        ))
        golds[sample_id] = GoldRecord(sample_id=sample_id, gold=tuple(gold_values), subtask=subtask)

    undeclared = seen_subtasks - set(card.subtasks)
    if undeclared:
        raise PackageError(
            f"{root}: data contains subtask(s) {sorted(undeclared)} not declared in card subtasks"
        )

    extraction = extraction_rule_from_config(loader.get("postprocess", {"kind": "verbatim"}))
    bindings = _load_metric_bindings(card, loader, root)

    return BenchmarkPackage(
        card=card,
        root=root,
        samples=tuple(samples),
        golds=golds,
        prompt_template=template,
        extraction=extraction,
        metric_bindings=bindings,
    )


def validate_package(directory) -> list:
    """Run all load-time validations without executing anything.

    Returns a list of diagnostics; empty means the package is valid.
    """
    try:
        load_package(directory)
        return []
    except PackageError as exc:
        return [str(exc)]


def render_samples(pkg: BenchmarkPackage, offset: int = 0, limit: Optional[int] = None) -> list:
    """Instantiate the author's template over a stable slice of samples.

    Deterministic: two renders of the same range are byte-identical. An
    offset at or past the end returns an empty list.
    """
    if offset < 0:
        raise ProtocolError(422, "offset must be non-negative", path="offset")
    if limit is not None and limit < 0:
        raise ProtocolError(422, "limit must be non-negative", path="limit")
    window = pkg.samples[offset:offset + limit if limit is not None else None]
    envelopes = []
    for sample in window:
        prompt = pkg.prompt_template.format_map(sample.inputs)
        envelopes.append(SampleEnvelope(
            sample_id=sample.sample_id,
            prompt=prompt,
            subtask=sample.subtask,
            metadata={},
        ))
    return envelopes


# ---------------------------------------------------------------------------
# Evaluation


def _first_score_token(text: str) -> Optional[float]:
    # First number in [0, 1] anywhere in the judge's reply.
    for token in re.findall(r"-?\d+(?:\.\d+)?", text):
        value = float(token)
        if 0.0 <= value <= 1.0:
            return value
    return None


class _JudgeScorer:
    """Scores pairs by prompting a judge model through the adapter layer.

    Retries retryable judge statuses a bounded number of times; a sample
    whose judge call still fails is scored 0 with an error note.
    """

    MAX_ATTEMPTS = 3
    BACKOFF_S = 0.05

    def __init__(self, config: dict, endpoint, clock: Clock):
        self._rubric = config["rubric"]
        self._endpoint = endpoint
        self._clock = clock

    def score(self, prediction: str, golds: tuple):
        rubric = self._rubric.replace("{prediction}", prediction).replace(
            "{gold}", " | ".join(golds))
        last_status = None
        for attempt in range(self.MAX_ATTEMPTS):
            response = self._endpoint.generate(InferenceRequest(prompt=rubric))
            if response.status == 200:
                value = _first_score_token(response.text)
                if value is None:
                    logger.warning("judge reply unparsable, scoring 0: %r", response.text[:200])
                    return 0.0, None
                return value, None
            last_status = response.status
            if classify_status(response.status) is RetryClass.NEVER:
                break
            self._clock.sleep(self.BACKOFF_S * (2 ** attempt))
        return 0.0, f"judge call failed with status {last_status}"


def _canonical_payload_digest(predictions) -> str:
    bodies = sorted(
        (json.dumps({
            "sample_id": p.sample_id,
            "raw_output": p.raw_output,
            "status": p.status,
        }, sort_keys=True, ensure_ascii=False) for p in predictions),
    )
    return hashlib.sha256("\n".join(bodies).encode("utf-8")).hexdigest()


def evaluate_submission(pkg: BenchmarkPackage, evaluation_id: str, predictions,
                        model_id: str = "", judge_endpoint=None,
                        clock: Clock = SYSTEM_CLOCK) -> EvaluationReport:
    """Score one batch of predictions against the package's ground truth.

    Pure function of (package, predictions): repeated calls agree exactly and
    the prediction order never matters. Served samples with no usable
    prediction (absent, or status != 200) score 0 on every metric and are
    counted, so withholding hard samples cannot inflate a score.
    """
    parse_evaluation_id(evaluation_id)
    by_id = {}
    for i, pred in enumerate(predictions):
        if pred.sample_id in by_id:
            raise ProtocolError(422, f"duplicate sample_id in submission: {pred.sample_id}",
                                path=f"predictions[{i}].sample_id")
        if pred.sample_id not in pkg.golds:
            raise ProtocolError(422, f"unknown sample_id: {pred.sample_id}",
                                path=f"predictions[{i}].sample_id")
        by_id[pred.sample_id] = pred

    judges = {}
    for binding in pkg.metric_bindings:
        if binding.kind == "judge":
            if judge_endpoint is None:
                raise ProtocolError(503, f"metric {binding.name}: no judge endpoint available")
            judges[binding.name] = _JudgeScorer(binding.judge_config, judge_endpoint, clock)

    per_sample = []
    scored = 0
    for sample in pkg.samples:
        gold = pkg.golds[sample.sample_id]
        pred = by_id.get(sample.sample_id)
        scores = {}
        error = None
        if pred is not None and pred.status == 200:
            scored += 1
            extracted = extract_answer(pkg.extraction, pred.raw_output)
            for binding in pkg.metric_bindings:
                if extracted is None:
                    scores[binding.name] = 0.0
                elif binding.kind == "judge":
                    value, judge_error = judges[binding.name].score(extracted, gold.gold)
                    scores[binding.name] = value
                    if judge_error:
                        error = judge_error
                elif binding.kind == "custom":
                    scores[binding.name] = float(binding.pair_scorer(extracted, gold.gold))
                else:
                    scores[binding.name] = binding.pair_scorer(extracted, gold.gold, binding.normalization)
        else:
            scores = {binding.name: 0.0 for binding in pkg.metric_bindings}
        entry = {"sample_id": sample.sample_id, "scores": scores}
        if error:
            entry["error"] = error
        per_sample.append(entry)

    count = len(pkg.samples)
    overall = {}
    for binding in pkg.metric_bindings:
        total = sum(entry["scores"][binding.name] for entry in per_sample)
        overall[binding.name] = total / count if count else 0.0

    per_subtask = {}
    for subtask in pkg.card.subtasks:
        rows = [entry for entry, sample in zip(per_sample, pkg.samples) if sample.subtask == subtask]
        if not rows:
            continue
        per_subtask[subtask] = {
            binding.name: sum(entry["scores"][binding.name] for entry in rows) / len(rows)
            for binding in pkg.metric_bindings
        }

    return EvaluationReport(
        evaluation_id=evaluation_id,
        dataset_id=pkg.card.dataset_id,
        version=pkg.card.version,
        model_id=model_id,
        overall=overall,
        per_subtask=per_subtask,
        per_sample=tuple(per_sample),
        counts={"served": count, "submitted": len(by_id), "scored": scored},
    )


# ---------------------------------------------------------------------------
# Service: evaluation contexts, idempotent submission, report store


class BenchmarkService:
    """The operation surface both transports expose for a set of packages.

    Submissions are idempotent per evaluation ID: the first accepted payload
    wins and its stored report is returned for byte-identical resubmissions;
    a different payload for the same ID is a 409 conflict. Evaluators run
    under a per-dataset lock unless their card declares pure_evaluator.
    """

    def __init__(self, packages, judge_models=(), judge_endpoints=None, clock: Clock = SYSTEM_CLOCK):
        self._packages = {}
        for pkg in packages:
            if pkg.card.dataset_id in self._packages:
                raise ProtocolError(
                    422, f"duplicate dataset_id {pkg.card.dataset_id!r} across packages")
            self._packages[pkg.card.dataset_id] = pkg
        self._judge_cards = {card.model_id: card for card in judge_models}
        self._judge_endpoints = dict(judge_endpoints or {})
        self._clock = clock
        self._contexts = {}
        self._eval_locks = {}
        self._mutex = threading.Lock()

    # -- read side

    def list_datasets(self):
        return [self._packages[d].card for d in sorted(self._packages)]

    def package(self, dataset_id: str) -> BenchmarkPackage:
        pkg = self._packages.get(dataset_id)
        if pkg is None:
            raise ProtocolError(404, f"dataset not found: {dataset_id}")
        return pkg

    def fetch_samples(self, dataset_id: str, offset: int = 0, limit: Optional[int] = None):
        return render_samples(self.package(dataset_id), offset, limit)

    # -- evaluation lifecycle

    def _runs_dir(self, pkg: BenchmarkPackage) -> Path:
        runs = pkg.root / RUNS_DIRNAME
        runs.mkdir(exist_ok=True)
        return runs

    def _context_path(self, pkg, evaluation_id):
        return self._runs_dir(pkg) / f"{evaluation_id}.context.json"

    def _report_path(self, pkg, evaluation_id):
        return self._runs_dir(pkg) / f"{evaluation_id}.report.json"

    def _load_context(self, evaluation_id: str) -> Optional[dict]:
        context = self._contexts.get(evaluation_id)
        if context is not None:
            return context
        for pkg in self._packages.values():
            path = self._context_path(pkg, evaluation_id)
            if path.is_file():
                context = json.loads(path.read_text(encoding="utf-8"))
                self._contexts[evaluation_id] = context
                return context
        return None

    def _store_context(self, pkg, context: dict) -> None:
        self._contexts[context["evaluation_id"]] = context
        path = self._context_path(pkg, context["evaluation_id"])
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(context, sort_keys=True), encoding="utf-8")
        tmp.replace(path)

    def open_evaluation(self, evaluation_id: str, dataset_id: str, model_id: str) -> None:
        evaluation_id = parse_evaluation_id(evaluation_id)
        pkg = self.package(dataset_id)
        with self._mutex:
            existing = self._load_context(evaluation_id)
            if existing is not None:
                if existing["dataset_id"] != dataset_id or existing["model_id"] != model_id:
                    raise ProtocolError(
                        409, f"evaluation {evaluation_id} already opened for "
                             f"{existing['dataset_id']}/{existing['model_id']}")
                return
            self._store_context(pkg, {
                "evaluation_id": evaluation_id,
                "dataset_id": dataset_id,
                "model_id": model_id,
                "payload_digest": None,
            })

    def _judge_endpoint_for(self, pkg: BenchmarkPackage):
        judge = next((b.judge_config for b in pkg.metric_bindings if b.kind == "judge"), None)
        if judge is None:
            return None
        model_id = judge["model_id"]
        endpoint = self._judge_endpoints.get(model_id)
        if endpoint is None:
            card = self._judge_cards.get(model_id)
            if card is None:
                raise ProtocolError(503, f"judge model {model_id!r} is not available to the server")
            endpoint = open_endpoint(card, clock=self._clock)
            self._judge_endpoints[model_id] = endpoint
        return endpoint

    @contextlib.contextmanager
    def _evaluator_region(self, dataset_id: str):
        pkg = self._packages[dataset_id]
        if pkg.card.pure_evaluator:
            yield
            return
        with self._mutex:
            lock = self._eval_locks.setdefault(dataset_id, threading.Lock())
        with lock:
            yield

    def submit(self, evaluation_id: str, predictions, interim: bool = False) -> EvaluationReport:
        evaluation_id = parse_evaluation_id(evaluation_id)
        context = self._load_context(evaluation_id)
        if context is None:
            raise ProtocolError(404, f"evaluation not found: {evaluation_id}")
        pkg = self.package(context["dataset_id"])
        if interim:
            # progress preview: scored and returned, never stored
            with self._evaluator_region(context["dataset_id"]):
                return evaluate_submission(
                    pkg, evaluation_id, predictions,
                    model_id=context["model_id"],
                    judge_endpoint=self._judge_endpoint_for(pkg),
                    clock=self._clock,
                )
        digest = _canonical_payload_digest(predictions)
        with self._mutex:
            stored_digest = context.get("payload_digest")
            if stored_digest is not None and stored_digest != digest:
                raise ProtocolError(
                    409, f"evaluation {evaluation_id} already has a different submission")
        report_path = self._report_path(pkg, evaluation_id)
        if report_path.is_file():
            return decode_message(report_path.read_bytes(), expect="evaluation_report")
        with self._evaluator_region(context["dataset_id"]):
            report = evaluate_submission(
                pkg, evaluation_id, predictions,
                model_id=context["model_id"],
                judge_endpoint=self._judge_endpoint_for(pkg),
                clock=self._clock,
            )
        with self._mutex:
            # First submission wins; a racing identical payload reuses its report.
            if context.get("payload_digest") is None:
                context["payload_digest"] = digest
                self._store_context(pkg, context)
                tmp = report_path.with_suffix(".tmp")
                tmp.write_bytes(encode_message(report))
                tmp.replace(report_path)
        return decode_message(report_path.read_bytes(), expect="evaluation_report")

    def report(self, evaluation_id: str) -> EvaluationReport:
        evaluation_id = parse_evaluation_id(evaluation_id)
        context = self._load_context(evaluation_id)
        if context is None:
            raise ProtocolError(404, f"evaluation not found: {evaluation_id}")
        pkg = self.package(context["dataset_id"])
        path = self._report_path(pkg, evaluation_id)
        if not path.is_file():
            raise ProtocolError(404, f"no report yet for evaluation {evaluation_id}")
        return decode_message(path.read_bytes(), expect="evaluation_report")
