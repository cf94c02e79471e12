"""Two-step reasoning/extraction engine, the single-step baseline, and resumable cohort runs."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any, Iterator, Mapping, Protocol, Sequence

from .backends import BackendError, ChatRequest, ChatResponse, Message, redact
from .corpus import PatientRecord
from .records import PredictionRecord, ReasoningArtifact
from .util import atomic_write_text, canonical_json, dump_json, sha256_text

logger = logging.getLogger(__name__)

PLACEHOLDER_RE = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")
USER_MARKER = "[user]"

REASONING_PARAMS = {"temperature": 0.0, "max_tokens": 1024}
EXTRACTION_PARAMS = {"temperature": 0.0, "max_tokens": 8}
RETRY_TEMPERATURE_STEP = 0.2


class TemplateError(ValueError):
    pass


class BackendLike(Protocol):
    model_name: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


# ---------------------------------------------------------------------------
# templates


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt body with ``{{placeholder}}`` slots.

    ``role_layout`` is ``"user"`` (whole body is one user message) or
    ``"system_user"`` (text before a line reading ``[user]`` becomes the
    system message, the rest the user message).
    """

    name: str
    body: str
    role_layout: str = "user"

    def __post_init__(self) -> None:
        if self.role_layout not in ("user", "system_user"):
            raise TemplateError(f"unknown role_layout {self.role_layout!r}")
        if self.role_layout == "system_user" and USER_MARKER not in self.body.splitlines():
            raise TemplateError(f"template {self.name!r}: system_user layout needs a '{USER_MARKER}' line")

    @property
    def placeholders(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for m in PLACEHOLDER_RE.finditer(self.body):
            seen.setdefault(m.group(1))
        return tuple(seen)

    @property
    def sha256(self) -> str:
        return sha256_text(self.body)

    @classmethod
    def from_file(cls, path: str | os.PathLike, name: str | None = None, role_layout: str = "user") -> "PromptTemplate":
        path = Path(path)
        return cls(name or path.stem, path.read_text(encoding="utf-8"), role_layout)


def default_template(name: str) -> PromptTemplate:
    """Shipped templates: ``reasoning``, ``extraction`` and ``single_step``."""
    body = resources.files("cope").joinpath(f"templates/{name}.txt").read_text(encoding="utf-8")
    return PromptTemplate(name, body)


def _substitute(text: str, bindings: Mapping[str, str]) -> str:
    # single pass: substituted values are never re-scanned
    return PLACEHOLDER_RE.sub(lambda m: bindings[m.group(1)], text)


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str], **params: Any) -> ChatRequest:
    declared = set(template.placeholders)
    missing = [p for p in template.placeholders if p not in bindings]
    if missing:
        raise TemplateError(f"template {template.name!r}: missing binding(s) for {', '.join(missing)}")
    unknown = sorted(set(bindings) - declared)
    if unknown:
        raise TemplateError(f"template {template.name!r}: unknown placeholder(s) {', '.join(unknown)}")
    if template.role_layout == "user":
        return ChatRequest((Message("user", _substitute(template.body, bindings)),), params)
    lines = template.body.splitlines(keepends=True)
    cut = next(i for i, line in enumerate(lines) if line.strip() == USER_MARKER)
    system = _substitute("".join(lines[:cut]), bindings).strip("\n")
    user = _substitute("".join(lines[cut + 1 :]), bindings)
    return ChatRequest((Message("system", system), Message("user", user)), params)


# ---------------------------------------------------------------------------
# parsing


class MrsParseError(ValueError):
    """Extraction output could not be turned into one score; ``kind`` says why."""

    kind = "parse_failed"

    def __init__(self, raw: str, detail: str = ""):
        self.raw = raw
        super().__init__(f"{self.kind}: {detail or raw[:80]!r}")


class NoCandidateError(MrsParseError):
    kind = "parse_failed"


class AmbiguousScoreError(MrsParseError):
    kind = "ambiguous"


class OutOfRangeError(MrsParseError):
    kind = "out_of_range"


STRICT_RE = re.compile(r"[0-6]")
# a run of digits not glued to letters, other digits, or a decimal point; a
# leading minus counts as a sign only when it is not itself glued to a word
# (so "-1" is negative but "2-3" is two tokens)
INT_TOKEN_RE = re.compile(r"(?<![\w.])(-?\d+)(?![\w]|\.\d)")


@dataclass(frozen=True)
class ParsedScore:
    value: int
    lenient: bool


def parse_score(raw: str) -> ParsedScore:
    stripped = raw.strip()
    if STRICT_RE.fullmatch(stripped):
        return ParsedScore(int(stripped), lenient=False)
    tokens = [int(t) for t in INT_TOKEN_RE.findall(raw)]
    in_range = sorted({t for t in tokens if 0 <= t <= 6})
    if len(in_range) == 1:
        return ParsedScore(in_range[0], lenient=True)
    if len(in_range) > 1:
        raise AmbiguousScoreError(raw, f"candidates {in_range}")
    if tokens:
        raise OutOfRangeError(raw, f"integers {sorted(set(tokens))} outside 0..6")
    raise NoCandidateError(raw, "no integer found")


def parse_mrs(raw: str) -> int:
    """Turn extraction output into an mRS score.

    A bare ``"0"``..``"6"`` (after trimming) is accepted as is. Otherwise every
    standalone integer is collected; the parse succeeds when exactly one
    distinct value lies in 0..6. Raises :class:`NoCandidateError`,
    :class:`AmbiguousScoreError` or :class:`OutOfRangeError`.
    """
    return parse_score(raw).value


# ---------------------------------------------------------------------------
# engines


def _require_note(record: PatientRecord) -> None:
    if not record.note_text or not record.note_text.strip():
        raise ValueError(f"record {record.id!r} has an empty note; refusing to call the backend")


def _extract_with_retries(
    record: PatientRecord,
    engine: str,
    request: ChatRequest,
    backend: BackendLike,
    max_retries: int,
    reasoning: ReasoningArtifact | None,
) -> PredictionRecord:
    base_temperature = float(request.params.get("temperature", 0.0))
    raw = ""
    last_error = ""
    latency = 0.0
    attempts = 0
    for attempt in range(max_retries + 1):
        attempts = attempt + 1
        req = request.with_params(temperature=round(base_temperature + RETRY_TEMPERATURE_STEP * attempt, 6))
        try:
            response = backend.complete(req)
        except BackendError as exc:
            return PredictionRecord(
                patient_id=record.id,
                engine=engine,
                status="backend_failed",
                predicted_mrs=None,
                raw_extraction_output=raw,
                attempts=attempts,
                reasoning_ref=reasoning,
                true_mrs=record.mrs_90d,
                error=str(exc),
                extraction_latency=latency,
            )
        raw = response.content
        latency += response.latency
        try:
            parsed = parse_score(raw)
        except MrsParseError as exc:
            last_error = str(exc)
            logger.info("%s: extraction attempt %d unparseable (%s)", record.id, attempts, exc.kind)
            continue
        return PredictionRecord(
            patient_id=record.id,
            engine=engine,
            status="ok",
            predicted_mrs=parsed.value,
            raw_extraction_output=raw,
            attempts=attempts,
            reasoning_ref=reasoning,
            true_mrs=record.mrs_90d,
            lenient_parse=parsed.lenient,
            extraction_latency=latency,
        )
    return PredictionRecord(
        patient_id=record.id,
        engine=engine,
        status="parse_failed",
        predicted_mrs=None,
        raw_extraction_output=raw,
        attempts=attempts,
        reasoning_ref=reasoning,
        true_mrs=record.mrs_90d,
        error=last_error,
        extraction_latency=latency,
    )


def _max_retries(backend: BackendLike) -> int:
    config = getattr(backend, "config", None)
    return int(getattr(config, "max_retries", 3))


def predict_cope(
    record: PatientRecord,
    reasoning_template: PromptTemplate,
    extraction_template: PromptTemplate,
    backend: BackendLike,
    extraction_backend: BackendLike | None = None,
) -> PredictionRecord:
    """Reasoning call over the full note, then an extraction call over the reasoning text only."""
    _require_note(record)
    extraction_backend = extraction_backend or backend
    request = render_prompt(reasoning_template, {"discharge_summary": record.note_text}, **REASONING_PARAMS)
    try:
        response = backend.complete(request)
    except BackendError as exc:
        return PredictionRecord(
            patient_id=record.id,
            engine="cope",
            status="backend_failed",
            predicted_mrs=None,
            raw_extraction_output="",
            attempts=1,
            true_mrs=record.mrs_90d,
            error=f"reasoning step: {exc}",
        )
    reasoning = ReasoningArtifact(record.id, response.content, backend.model_name, response.latency)
    if not response.content.strip():
        return PredictionRecord(
            patient_id=record.id,
            engine="cope",
            status="backend_failed",
            predicted_mrs=None,
            raw_extraction_output="",
            attempts=1,
            reasoning_ref=reasoning,
            true_mrs=record.mrs_90d,
            error="reasoning step returned empty text",
        )
    extraction = render_prompt(extraction_template, {"reasoning_text": response.content}, **EXTRACTION_PARAMS)
    return _extract_with_retries(record, "cope", extraction, extraction_backend, _max_retries(extraction_backend), reasoning)


def predict_single_step(record: PatientRecord, template: PromptTemplate, backend: BackendLike) -> PredictionRecord:
    """One direct prompt over the note; same parse and retry rules as the extraction step."""
    _require_note(record)
    request = render_prompt(template, {"discharge_summary": record.note_text}, **EXTRACTION_PARAMS)
    return _extract_with_retries(record, "single_step", request, backend, _max_retries(backend), None)


# ---------------------------------------------------------------------------
# cohort runs


@dataclass
class EngineSpec:
    engine: str
    reasoning_template: PromptTemplate | None = None
    extraction_template: PromptTemplate | None = None
    single_step_template: PromptTemplate | None = None
    extraction_backend: BackendLike | None = None
    # clinical_ml
    svr_model: Any = None
    encoder: Any = None
    model_info: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def cope(cls, **kw: Any) -> "EngineSpec":
        return cls(
            "cope",
            reasoning_template=kw.pop("reasoning_template", None) or default_template("reasoning"),
            extraction_template=kw.pop("extraction_template", None) or default_template("extraction"),
            **kw,
        )

    @classmethod
    def single_step(cls, template: PromptTemplate | None = None) -> "EngineSpec":
        return cls("single_step", single_step_template=template or default_template("single_step"))

    def templates(self) -> dict[str, PromptTemplate]:
        found = (self.reasoning_template, self.extraction_template, self.single_step_template)
        return {t.name: t for t in found if t is not None}

    def problems(self) -> list[str]:
        if self.engine == "cope" and (self.reasoning_template is None or self.extraction_template is None):
            return ["cope engine needs reasoning and extraction templates"]
        if self.engine == "single_step" and self.single_step_template is None:
            return ["single_step engine needs a template"]
        if self.engine == "clinical_ml" and (self.svr_model is None or self.encoder is None):
            return ["clinical_ml engine needs a trained model and encoder"]
        if self.engine not in ("cope", "single_step", "clinical_ml"):
            return [f"unknown engine {self.engine!r}"]
        return []

    def predict(self, record: PatientRecord, backend: BackendLike | None) -> PredictionRecord:
        if self.engine == "cope":
            return predict_cope(record, self.reasoning_template, self.extraction_template, backend, self.extraction_backend)
        if self.engine == "single_step":
            return predict_single_step(record, self.single_step_template, backend)
        from .features import extract_features, predict_clinical_ml

        feats = extract_features(record.note_text, record.structured_overrides)
        row = self.encoder.transform([feats]).rows[0]
        return predict_clinical_ml(self.svr_model, row, patient_id=record.id, true_mrs=record.mrs_90d)


@dataclass
class RunManifest:
    run_id: str
    engine: str
    backend: dict[str, Any] | None
    templates: dict[str, str]
    cohort_hash: str
    n_records: int
    counts: dict[str, int]
    lenient_parses: int
    started_at: str
    finished_at: str
    split_seed: int | None = None
    subset: str | None = None
    corpus: dict[str, Any] | None = None
    model: dict[str, Any] | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunManifest":
        return cls(**{k: data.get(k) for k in cls.__dataclass_fields__ if k in data})


class RunLockedError(RuntimeError):
    pass


@contextmanager
def run_lock(run_dir: Path) -> Iterator[None]:
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{run_dir} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _read_jsonl(path: Path) -> list[dict[str, Any]]:
    rows = []
    if not path.exists():
        return rows
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                # a torn final line from an interrupted append
                logger.warning("skipping unreadable line in %s", path)
    return rows


def load_predictions(run_dir: str | os.PathLike) -> list[PredictionRecord]:
    """Persisted predictions (latest row per patient), ordered by patient id."""
    run_dir = Path(run_dir)
    latest: dict[str, dict[str, Any]] = {}
    for row in _read_jsonl(run_dir / "predictions.jsonl"):
        latest[row["patient_id"]] = row
    out = []
    for pid in sorted(latest):
        row = latest[pid]
        text = None
        if row.get("reasoning_ref"):
            path = run_dir / row["reasoning_ref"]["path"]
            text = path.read_text(encoding="utf-8") if path.exists() else None
        out.append(PredictionRecord.from_dict(row, reasoning_text=text))
    return out


def load_manifest(run_dir: str | os.PathLike) -> RunManifest:
    return RunManifest.from_dict(json.loads((Path(run_dir) / "manifest.json").read_text(encoding="utf-8")))


def _safe_name(patient_id: str) -> str:
    if not re.fullmatch(r"[A-Za-z0-9_.\-]+", patient_id) or patient_id in (".", ".."):
        raise ValueError(f"patient id {patient_id!r} is not usable as a file name")
    return patient_id


class _RunWriter:
    def __init__(self, run_dir: Path, spec: EngineSpec):
        self.run_dir = run_dir
        self.spec = spec
        self.lock = threading.Lock()
        self.path = run_dir / "predictions.jsonl"

    def persist(self, pred: PredictionRecord) -> None:
        pid = _safe_name(pred.patient_id)
        if pred.reasoning_ref is not None:
            atomic_write_text(self.run_dir / "reasoning" / f"{pid}.txt", pred.reasoning_ref.reasoning_text)
            if self.spec.extraction_template is not None:
                prompt = render_prompt(self.spec.extraction_template, {"reasoning_text": pred.reasoning_ref.reasoning_text})
                atomic_write_text(self.run_dir / "prompts" / f"{pid}.extraction.txt", prompt.text)
        line = json.dumps(pred.to_dict(), sort_keys=True, ensure_ascii=False) + "\n"
        with self.lock:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def compact(self, keep_ids: set[str] | None = None) -> list[dict[str, Any]]:
        latest: dict[str, dict[str, Any]] = {}
        for row in _read_jsonl(self.path):
            latest[row["patient_id"]] = row
        rows = [latest[k] for k in sorted(latest) if keep_ids is None or k in keep_ids]
        atomic_write_text(self.path, "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows))
        return rows


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_cohort(
    records: Sequence[PatientRecord],
    spec: EngineSpec,
    backend: BackendLike | None,
    run_dir: str | os.PathLike,
    concurrency: int = 4,
    split_seed: int | None = None,
    subset: str | None = None,
    corpus: Mapping[str, Any] | None = None,
) -> RunManifest:
    """Predict every record into ``run_dir`` and write ``manifest.json`` last.

    Records already persisted with status ``ok`` are skipped, so an
    interrupted run resumes where it stopped. Failed records are retried on
    re-run. ``predictions.jsonl`` is rewritten sorted by patient id at the end.
    """
    problems = spec.problems()
    if problems:
        raise ValueError("; ".join(problems))
    if spec.engine != "clinical_ml" and backend is None:
        raise ValueError(f"engine {spec.engine!r} needs a backend")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids in run subset")
    for pid in ids:
        _safe_name(pid)

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with run_lock(run_dir):
        started = _now()
        writer = _RunWriter(run_dir, spec)
        done = {row["patient_id"] for row in _read_jsonl(writer.path) if row.get("status") == "ok"}
        todo = [r for r in records if r.id not in done]
        logger.info("run %s: %d records, %d already done", run_dir, len(records), len(records) - len(todo))

        def work(rec: PatientRecord) -> None:
            writer.persist(spec.predict(rec, backend))

        if concurrency == 1 or len(todo) <= 1:
            for rec in todo:
                work(rec)
        else:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                # iterate results so the first worker exception propagates
                for _ in pool.map(work, todo):
                    pass

        rows = writer.compact(set(ids))
        counts = {"ok": 0, "parse_failed": 0, "backend_failed": 0}
        for row in rows:
            counts[row["status"]] += 1
        # id order, so the run identity does not depend on how the subset was listed
        cohort_hash = sha256_text(canonical_json([r.to_dict() for r in sorted(records, key=lambda r: r.id)]))
        backend_snapshot = None
        if backend is not None and getattr(backend, "config", None) is not None:
            backend_snapshot = redact(backend.config.snapshot())
        run_key = canonical_json(
            {
                "engine": spec.engine,
                "backend": backend_snapshot,
                "templates": {n: t.sha256 for n, t in spec.templates().items()},
                "cohort_hash": cohort_hash,
                "model": spec.model_info,
            }
        )
        manifest = RunManifest(
            run_id=sha256_text(run_key)[:16],
            engine=spec.engine,
            backend=backend_snapshot,
            templates={n: t.sha256 for n, t in spec.templates().items()},
            cohort_hash=cohort_hash,
            n_records=len(records),
            counts=counts,
            lenient_parses=sum(1 for row in rows if row.get("lenient_parse")),
            started_at=started,
            finished_at=_now(),
            split_seed=split_seed,
            subset=subset,
            corpus=dict(corpus) if corpus else None,
            model=dict(spec.model_info) or None,
        )
        atomic_write_text(run_dir / "manifest.json", dump_json(manifest.to_dict()))
        return manifest
