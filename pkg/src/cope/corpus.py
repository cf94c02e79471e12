"""Patient corpus: ingestion, exclusion flow, stratified split, text utilities, demographics."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .util import canonical_json, dump_json, nearest_rank, sha256_text

logger = logging.getLogger(__name__)

SEXES = ("male", "female")

FIELD_ORDER = (
    "id",
    "note_text",
    "mrs_90d",
    "mrs_followup_days",
    "age_years",
    "sex",
    "evt",
    "died_in_hospital",
    "structured_overrides",
)


class CorpusError(Exception):
    """Base class for corpus problems (maps to the CLI's data-error exit code)."""


class IngestError(CorpusError):
    """One or more rows failed schema validation; ``problems`` lists every one of them."""

    def __init__(self, path: str, problems: list[str]):
        self.path = path
        self.problems = problems
        super().__init__(f"{path}: {len(problems)} problem(s): " + "; ".join(problems))


class DuplicateIdError(CorpusError):
    def __init__(self, ids: Iterable[str]):
        self.ids = sorted(set(ids))
        super().__init__("duplicate record id(s): " + ", ".join(self.ids))


@dataclass(frozen=True)
class PatientRecord:
    id: str
    note_text: str
    mrs_90d: int | None = None
    mrs_followup_days: int | None = None
    age_years: int | None = None
    sex: str | None = None
    evt: bool | None = None
    died_in_hospital: bool | None = None
    structured_overrides: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("record id must be nonempty")
        if self.mrs_90d is not None and (
            isinstance(self.mrs_90d, bool) or not isinstance(self.mrs_90d, int) or not 0 <= self.mrs_90d <= 6
        ):
            raise ValueError(f"{self.id}: mrs_90d must be an integer in [0, 6], got {self.mrs_90d!r}")
        if self.age_years is not None and self.age_years < 0:
            raise ValueError(f"{self.id}: negative age")
        if self.sex is not None and self.sex not in SEXES:
            raise ValueError(f"{self.id}: sex must be one of {SEXES}, got {self.sex!r}")

    def to_dict(self) -> dict[str, Any]:
        out = {name: getattr(self, name) for name in FIELD_ORDER}
        if out["structured_overrides"] is None:
            del out["structured_overrides"]
        else:
            out["structured_overrides"] = dict(out["structured_overrides"])
        return out


@dataclass(frozen=True)
class Cohort:
    records: tuple[PatientRecord, ...]
    provenance: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        counts = Counter(r.id for r in self.records)
        dupes = [i for i, c in counts.items() if c > 1]
        if dupes:
            raise DuplicateIdError(dupes)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def content_hash(self) -> str:
        """SHA-256 over the canonical JSON of the records, independent of file format."""
        return sha256_text(canonical_json([r.to_dict() for r in self.records]))

    def by_id(self) -> dict[str, PatientRecord]:
        return {r.id: r for r in self.records}

    def subset(self, ids: Iterable[str]) -> "Cohort":
        keep = set(ids)
        return Cohort(tuple(r for r in self.records if r.id in keep), dict(self.provenance))


# ---------------------------------------------------------------------------
# ingestion

_TRUE = {"true", "1", "yes", "y", "t"}
_FALSE = {"false", "0", "no", "n", "f"}


def _coerce_int(value: Any, name: str) -> int | None:
    if value is None or value == "":
        return None
    if isinstance(value, bool):
        raise ValueError(f"{name} must be an integer, got a boolean")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        try:
            return int(value.strip())
        except ValueError:
            pass
    raise ValueError(f"{name} must be an integer, got {value!r}")


def _coerce_bool(value: Any, name: str) -> bool | None:
    if value is None or value == "":
        return None
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in _TRUE | _FALSE:
        return value.strip().lower() in _TRUE
    raise ValueError(f"{name} must be a boolean, got {value!r}")


def _coerce_sex(value: Any) -> str | None:
    if value is None or value == "":
        return None
    if isinstance(value, str) and value.strip().lower() in SEXES:
        return value.strip().lower()
    raise ValueError(f"sex must be 'male' or 'female', got {value!r}")


def record_from_row(row: Mapping[str, Any]) -> PatientRecord:
    """Build a record from one parsed JSONL object or CSV row; raises ValueError on schema violations."""
    rid = row.get("id")
    if rid is None or (isinstance(rid, str) and not rid.strip()):
        raise ValueError("missing required field 'id'")
    note = row.get("note_text")
    if not isinstance(note, str) or not note.strip():
        raise ValueError("missing required field 'note_text'")
    overrides = row.get("structured_overrides")
    if isinstance(overrides, str):
        overrides = json.loads(overrides) if overrides.strip() else None
    if overrides is not None and not isinstance(overrides, dict):
        raise ValueError("structured_overrides must be an object")
    mrs = _coerce_int(row.get("mrs_90d"), "mrs_90d")
    if mrs is not None and not 0 <= mrs <= 6:
        raise ValueError(f"mrs_90d out of range [0, 6]: {mrs}")
    return PatientRecord(
        id=str(rid),
        note_text=note,
        mrs_90d=mrs,
        mrs_followup_days=_coerce_int(row.get("mrs_followup_days"), "mrs_followup_days"),
        age_years=_coerce_int(row.get("age_years"), "age_years"),
        sex=_coerce_sex(row.get("sex")),
        evt=_coerce_bool(row.get("evt"), "evt"),
        died_in_hospital=_coerce_bool(row.get("died_in_hospital"), "died_in_hospital"),
        structured_overrides=overrides,
    )


def _iter_rows(path: Path, fmt: str):
    """Yield (line_number, row-or-exception) pairs."""
    with path.open("r", encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    yield lineno, ValueError(f"invalid JSON: {exc.msg}")
                    continue
                if not isinstance(obj, dict):
                    yield lineno, ValueError("row is not a JSON object")
                    continue
                yield lineno, obj
        elif fmt == "csv":
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return
            for row in reader:
                # header is line 1; reader.line_num accounts for embedded newlines
                yield reader.line_num, row
        else:
            raise ValueError(f"unknown corpus format {fmt!r}")


def infer_format(path: str | Path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix in (".jsonl", ".ndjson"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    raise ValueError(f"cannot infer corpus format from {path!s}; pass format='jsonl' or 'csv'")


def ingest_corpus(path: str | Path, format: str | None = None) -> Cohort:
    """Load a corpus file into a :class:`Cohort`.

    Every malformed row is collected and reported together in an
    :class:`IngestError`; duplicate ids raise :class:`DuplicateIdError`.
    Unknown fields are ignored.
    """
    path = Path(path)
    fmt = format or infer_format(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc

    records: list[PatientRecord] = []
    problems: list[str] = []
    seen: dict[str, int] = {}
    dupes: list[str] = []
    for lineno, row in _iter_rows(path, fmt):
        if isinstance(row, Exception):
            problems.append(f"line {lineno}: {row}")
            continue
        try:
            rec = record_from_row(row)
        except (ValueError, json.JSONDecodeError) as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        if rec.id in seen:
            dupes.append(rec.id)
            continue
        seen[rec.id] = lineno
        records.append(rec)
    if problems:
        raise IngestError(str(path), problems)
    if dupes:
        raise DuplicateIdError(dupes)

    provenance = {
        "source": str(path),
        "format": fmt,
        "ingested_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "file_sha256": sha256_text(raw.decode("utf-8", errors="replace")),
    }
    cohort = Cohort(tuple(records), provenance)
    logger.info("ingested %d records from %s (hash %s)", len(cohort), path, cohort.content_hash[:12])
    return cohort


def write_corpus(cohort: Cohort | Iterable[PatientRecord], path: str | Path, format: str | None = None) -> None:
    """Serialize records in the ingestion schema (JSONL or CSV)."""
    path = Path(path)
    fmt = format or infer_format(path)
    records = list(cohort.records if isinstance(cohort, Cohort) else cohort)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for rec in records:
                fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")
        elif fmt == "csv":
            writer = csv.DictWriter(fh, fieldnames=list(FIELD_ORDER))
            writer.writeheader()
            for rec in records:
                row = rec.to_dict()
                for key, value in list(row.items()):
                    if value is None:
                        row[key] = ""
                    elif isinstance(value, bool):
                        row[key] = "true" if value else "false"
                    elif key == "structured_overrides":
                        row[key] = json.dumps(value, sort_keys=True)
                writer.writerow(row)
        else:
            raise ValueError(f"unknown corpus format {fmt!r}")


# ---------------------------------------------------------------------------
# exclusion flow


@dataclass(frozen=True)
class ExclusionReport:
    n_input: int
    excluded: tuple[tuple[str, int], ...]  # (reason, count) in application order
    n_retained: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_input": self.n_input,
            "excluded": dict(self.excluded),
            "n_retained": self.n_retained,
        }

    def to_json(self) -> str:
        # excluded keys keep application order, so no sort_keys here
        return json.dumps(self.to_dict(), indent=2) + "\n"


def apply_exclusions(cohort: Cohort) -> tuple[Cohort, ExclusionReport]:
    """Drop records without a 90-day label, then in-hospital deaths."""
    labelled = [r for r in cohort.records if r.mrs_90d is not None]
    survivors = [r for r in labelled if r.died_in_hospital is not True]
    report = ExclusionReport(
        n_input=len(cohort),
        excluded=(
            ("missing_mrs_90d", len(cohort) - len(labelled)),
            ("died_in_hospital", len(labelled) - len(survivors)),
        ),
        n_retained=len(survivors),
    )
    return Cohort(tuple(survivors), dict(cohort.provenance)), report


# ---------------------------------------------------------------------------
# stratified split


@dataclass(frozen=True)
class SplitAssignment:
    exploration_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int
    fraction: Fraction

    def to_dict(self) -> dict[str, Any]:
        return {
            "exploration_ids": sorted(self.exploration_ids),
            "test_ids": sorted(self.test_ids),
            "seed": self.seed,
            "fraction": str(self.fraction),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SplitAssignment":
        return cls(
            exploration_ids=frozenset(data["exploration_ids"]),
            test_ids=frozenset(data["test_ids"]),
            seed=int(data["seed"]),
            fraction=Fraction(data["fraction"]),
        )

    def arm(self, name: str) -> frozenset[str]:
        if name == "exploration":
            return self.exploration_ids
        if name == "test":
            return self.test_ids
        raise ValueError(f"unknown split arm {name!r}")


def as_fraction(value: float | str | Fraction) -> Fraction:
    """Exact rational from a user-facing value; floats go through their shortest repr (0.2 -> 1/5)."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def stratified_split(cohort: Cohort, fraction: float | str | Fraction, seed: int) -> SplitAssignment:
    """Per-mRS-stratum seeded split into exploration and test arms.

    Stratum ``s`` contributes ``round_half_even(fraction * n_s)`` records to the
    exploration arm. Ids are sorted inside each stratum before the seeded
    shuffle, so the result does not depend on file order.
    """
    frac = as_fraction(fraction)
    if not 0 < frac < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {frac}")
    unlabeled = [r.id for r in cohort.records if r.mrs_90d is None]
    if unlabeled:
        raise ValueError(f"{len(unlabeled)} unlabeled record(s), e.g. {unlabeled[0]!r}; apply exclusions first")

    strata: dict[int, list[str]] = {}
    for rec in cohort.records:
        strata.setdefault(rec.mrs_90d, []).append(rec.id)

    exploration: set[str] = set()
    for stratum, ids in sorted(strata.items()):
        ids = sorted(ids)
        k = min(max(round(frac * len(ids)), 0), len(ids))
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, stratum])
        order = rng.permutation(len(ids))
        exploration.update(ids[i] for i in order[:k])

    all_ids = set(cohort.ids)
    return SplitAssignment(
        exploration_ids=frozenset(exploration),
        test_ids=frozenset(all_ids - exploration),
        seed=seed,
        fraction=frac,
    )


# ---------------------------------------------------------------------------
# text utilities


def word_count(note_text: str) -> int:
    return len(note_text.split())


def whitespace_tokenize(text: str) -> list[str]:
    return text.split()


def chunk_spans(n_tokens: int, window: int = 512, overlap: int = 50) -> list[tuple[int, int]]:
    """Half-open token spans of overlapping windows covering ``n_tokens`` tokens."""
    if window <= overlap or overlap < 0:
        raise ValueError(f"need window > overlap >= 0, got window={window}, overlap={overlap}")
    stride = window - overlap
    spans = []
    start = 0
    while start < n_tokens:
        end = min(start + window, n_tokens)
        spans.append((start, end))
        if end == n_tokens:
            break
        start += stride
    return spans


def chunk_text(tokens: Sequence[str], window: int = 512, overlap: int = 50) -> list[list[str]]:
    """Split a token sequence into windows of ``window`` tokens sharing ``overlap`` tokens."""
    return [list(tokens[a:b]) for a, b in chunk_spans(len(tokens), window, overlap)]


def chunk_note(
    note_text: str,
    window: int = 512,
    overlap: int = 50,
    tokenizer: Callable[[str], Sequence[str]] = whitespace_tokenize,
) -> list[list[str]]:
    return chunk_text(tokenizer(note_text), window, overlap)


# ---------------------------------------------------------------------------
# demographics


def _override(rec: PatientRecord, key: str) -> Any:
    return (rec.structured_overrides or {}).get(key)


def _count_row(values: list[Any], positive: Any) -> dict[str, Any]:
    observed = [v for v in values if v is not None]
    n = len(values)
    count = sum(1 for v in observed if v == positive)
    return {
        "count": count,
        "percent": round(100.0 * count / n, 1) if n else None,
        "missing_percent": round(100.0 * (n - len(observed)) / n, 1) if n else None,
    }


def _median_iqr(values: list[Any]) -> dict[str, Any]:
    observed = sorted(v for v in values if v is not None)
    n = len(values)
    row: dict[str, Any] = {
        "median": None,
        "q1": None,
        "q3": None,
        "missing_percent": round(100.0 * (n - len(observed)) / n, 1) if n else None,
    }
    if observed:
        row.update(
            median=nearest_rank(observed, 50),
            q1=nearest_rank(observed, 25),
            q3=nearest_rank(observed, 75),
        )
    return row


@dataclass(frozen=True)
class DemographicsTable:
    arms: dict[str, dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return self.arms

    def to_json(self) -> str:
        return dump_json(self.arms)


def _summarize_arm(records: list[PatientRecord]) -> dict[str, Any]:
    n = len(records)
    labels = [r.mrs_90d for r in records]
    label_dist = {}
    for score in range(7):
        c = sum(1 for v in labels if v == score)
        label_dist[str(score)] = {"count": c, "percent": round(100.0 * c / n, 1) if n else None}
    return {
        "n": n,
        "male": _count_row([r.sex for r in records], "male"),
        "female": _count_row([r.sex for r in records], "female"),
        "age_years": _median_iqr([r.age_years for r in records]),
        "evt": _count_row([r.evt for r in records], True),
        "iv_tpa": _count_row([_override(r, "iv_tpa") for r in records], True),
        "hypertension": _count_row([_override(r, "hypertension") for r in records], True),
        "diabetes": _count_row([_override(r, "diabetes") for r in records], True),
        "nihss_baseline": _median_iqr([_override(r, "nihss_baseline") for r in records]),
        "mrs_90d": label_dist,
        "mrs_90d_missing_percent": round(100.0 * sum(v is None for v in labels) / n, 1) if n else None,
    }


def summarize_demographics(cohort: Cohort, split: SplitAssignment | None = None) -> DemographicsTable:
    """Table-1 style summary, one column per split arm (or a single ``all`` arm).

    Counts carry a percentage of the arm size; every variable also reports the
    percentage of records where it is missing. Medians and IQRs use the
    nearest-rank rule.
    """
    if split is None:
        return DemographicsTable({"all": _summarize_arm(list(cohort.records))})
    arms = {}
    for name in ("exploration", "test"):
        ids = split.arm(name)
        arms[name] = _summarize_arm([r for r in cohort.records if r.id in ids])
    return DemographicsTable(arms)


def format_median_iqr(row: Mapping[str, Any]) -> str:
    if row["median"] is None:
        return "NA"
    return f"{row['median']} ({row['q1']}, {row['q3']})"
