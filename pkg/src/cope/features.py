"""Structured clinical variables: rule-based extraction, encoding, and the linear SVR baseline."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from importlib import resources
from typing import Any, Mapping, Sequence

import numpy as np

from .records import PredictionRecord
from .util import nearest_rank

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)

TICI_GRADES = ("0", "1", "2a", "2b", "2c", "3")
TICI_ORDINAL = {g: i for i, g in enumerate(TICI_GRADES)}
DESTINATIONS = ("home", "acute_rehab", "snf", "ltac", "hospice", "other")

NUMERIC_FIELDS = ("age_years", "nihss_baseline", "nihss_24h", "nihss_discharge", "hba1c", "ldl")
BINARY_FIELDS = (
    "sex",
    "prior_stroke",
    "hypertension",
    "diabetes",
    "atrial_fibrillation",
    "transfer_status",
    "iv_tpa",
    "evt",
    "procedure_complication",
)


@dataclass(frozen=True)
class StructuredFeatures:
    age_years: float | None = None
    sex: str | None = None
    prior_stroke: bool | None = None
    hypertension: bool | None = None
    diabetes: bool | None = None
    atrial_fibrillation: bool | None = None
    transfer_status: bool | None = None
    nihss_baseline: int | None = None
    nihss_24h: int | None = None
    nihss_discharge: int | None = None
    hba1c: float | None = None
    ldl: float | None = None
    iv_tpa: bool | None = None
    evt: bool | None = None
    tici: str | None = None
    procedure_complication: bool | None = None
    discharge_destination: str | None = None

    def __post_init__(self) -> None:
        for name in ("nihss_baseline", "nihss_24h", "nihss_discharge"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 42:
                raise ValueError(f"{name} outside [0, 42]: {v}")
        if self.tici is not None and self.tici not in TICI_ORDINAL:
            raise ValueError(f"unknown TICI grade {self.tici!r}")
        if self.discharge_destination is not None and self.discharge_destination not in DESTINATIONS:
            raise ValueError(f"unknown discharge destination {self.discharge_destination!r}")
        if self.sex is not None and self.sex not in ("male", "female"):
            raise ValueError(f"unknown sex {self.sex!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def populated(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}


FEATURE_NAMES = tuple(f.name for f in fields(StructuredFeatures))


# ---------------------------------------------------------------------------
# grammar


@dataclass
class Grammar:
    version: str
    numeric: dict[str, dict[str, Any]]
    boolean: dict[str, dict[str, Any]]
    enum: dict[str, dict[str, Any]]

    @classmethod
    def from_toml(cls, text: str) -> "Grammar":
        raw = tomllib.loads(text)
        flags = re.IGNORECASE
        numeric = {
            name: {**spec, "regex": [re.compile(p, flags) for p in spec["patterns"]]}
            for name, spec in raw.get("numeric", {}).items()
        }
        boolean = {
            name: {
                "pos": [re.compile(p, flags) for p in spec.get("positive", [])],
                "neg": [re.compile(p, flags) for p in spec.get("negative", [])],
            }
            for name, spec in raw.get("boolean", {}).items()
        }
        enum = {
            name: {
                "regex": [re.compile(p, flags) for p in spec["patterns"]],
                "aliases": {k.lower(): v for k, v in spec["aliases"].items()},
            }
            for name, spec in raw.get("enum", {}).items()
        }
        unknown = (set(numeric) | set(boolean) | set(enum)) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"grammar defines unknown fields: {sorted(unknown)}")
        return cls(str(raw["version"]), numeric, boolean, enum)


@lru_cache(maxsize=1)
def default_grammar() -> Grammar:
    text = resources.files("cope").joinpath("data/extraction_grammar.toml").read_text(encoding="utf-8")
    return Grammar.from_toml(text)


GRAMMAR_VERSION = default_grammar().version


def _last_mention(name: str, mentions: list[tuple[int, Any]]) -> Any:
    if not mentions:
        return None
    mentions.sort(key=lambda m: m[0])
    distinct = {v for _, v in mentions}
    if len(distinct) > 1:
        logger.debug("conflicting mentions for %s: %s; keeping last", name, [v for _, v in mentions])
    return mentions[-1][1]


def _extract_numeric(text: str, name: str, spec: Mapping[str, Any]) -> Any:
    mentions = []
    cast = int if spec.get("kind") == "int" else float
    for rx in spec["regex"]:
        for m in rx.finditer(text):
            value = cast(float(m.group(1))) if cast is int else float(m.group(1))
            if spec.get("min", -np.inf) <= value <= spec.get("max", np.inf):
                mentions.append((m.start(), value))
    return _last_mention(name, mentions)


def _extract_boolean(text: str, name: str, spec: Mapping[str, Any]) -> bool | None:
    neg_spans = [(m.start(), m.end()) for rx in spec["neg"] for m in rx.finditer(text)]
    mentions: list[tuple[int, Any]] = [(s, False) for s, _ in neg_spans]
    for rx in spec["pos"]:
        for m in rx.finditer(text):
            if any(s <= m.start() < e for s, e in neg_spans):
                continue
            mentions.append((m.start(), True))
    return _last_mention(name, mentions)


def _extract_enum(text: str, name: str, spec: Mapping[str, Any]) -> str | None:
    mentions = []
    for rx in spec["regex"]:
        for m in rx.finditer(text):
            key = m.group(1).lower()
            if key in spec["aliases"]:
                mentions.append((m.start(), spec["aliases"][key]))
    return _last_mention(name, mentions)


def _coerce_override(name: str, value: Any) -> Any:
    if value is None:
        return None
    if name in ("nihss_baseline", "nihss_24h", "nihss_discharge"):
        return int(value)
    if name in ("age_years", "hba1c", "ldl"):
        return float(value)
    if name == "tici":
        return str(value).lower()
    if name in ("sex", "discharge_destination"):
        return str(value)
    if isinstance(value, str):
        return value.strip().lower() in ("true", "1", "yes")
    return bool(value)


def extract_features(
    note_text: str,
    overrides: Mapping[str, Any] | None = None,
    grammar: Grammar | None = None,
) -> StructuredFeatures:
    """Pull the structured variables out of a note with the rule grammar.

    Fields without evidence stay ``None``. When a note mentions a variable
    more than once with different values, the last mention wins. Entries in
    ``overrides`` replace whatever was extracted for that field.
    """
    g = grammar or default_grammar()
    values: dict[str, Any] = {}
    for name, spec in g.numeric.items():
        values[name] = _extract_numeric(note_text, name, spec)
    for name, spec in g.boolean.items():
        values[name] = _extract_boolean(note_text, name, spec)
    for name, spec in g.enum.items():
        values[name] = _extract_enum(note_text, name, spec)
    if values.get("age_years") is not None:
        values["age_years"] = float(values["age_years"])
    for name, value in (overrides or {}).items():
        if name not in FEATURE_NAMES:
            logger.warning("ignoring unknown override field %r", name)
            continue
        values[name] = _coerce_override(name, value)
    return StructuredFeatures(**values)


# ---------------------------------------------------------------------------
# encoding


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    source: str
    encoding: str  # zscore | binary | ordinal | onehot | missing_indicator
    impute: Any = None
    center: float = 0.0
    scale: float = 1.0
    level: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    column_spec: list[ColumnSpec]
    missing_mask: np.ndarray

    @property
    def width(self) -> int:
        return len(self.column_spec)

    def to_dict(self) -> dict[str, Any]:
        return {
            "column_spec": [c.to_dict() for c in self.column_spec],
            "rows": self.rows.tolist(),
            "missing_mask": self.missing_mask.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FeatureMatrix":
        spec = [ColumnSpec(**c) for c in data["column_spec"]]
        rows = np.asarray(data["rows"], dtype=float).reshape(-1, len(spec))
        mask = np.asarray(data["missing_mask"], dtype=bool).reshape(rows.shape)
        return cls(rows, spec, mask)


def _mode(values: list[Any], order: Sequence[Any]) -> Any:
    counts = {v: values.count(v) for v in order}
    best = max(counts.values())
    return next(v for v in order if counts[v] == best)


def _binary_value(name: str, value: Any) -> float | None:
    if value is None:
        return None
    if name == "sex":
        return 1.0 if value == "male" else 0.0
    return 1.0 if value else 0.0


class FeatureEncoder:
    """Fit imputation and scaling on training rows, then encode any rows with the same layout."""

    def __init__(self, column_spec: list[ColumnSpec] | None = None):
        self.column_spec = column_spec

    def fit(self, features: Sequence[StructuredFeatures]) -> "FeatureEncoder":
        if not features:
            raise ValueError("cannot fit an encoder on zero rows")
        spec: list[ColumnSpec] = []
        indicators: list[ColumnSpec] = []

        def note_missing(source: str, observed: list[Any]) -> None:
            if len(observed) < len(features):
                indicators.append(ColumnSpec(f"{source}__missing", source, "missing_indicator"))
            if not observed:
                logger.warning("feature %s is missing in every training row; kept as constant", source)

        for name in NUMERIC_FIELDS:
            observed = sorted(float(getattr(f, name)) for f in features if getattr(f, name) is not None)
            note_missing(name, observed)
            if observed:
                arr = np.asarray(observed)
                impute = float(nearest_rank(observed, 50))
                center, scale = float(arr.mean()), float(arr.std())
            else:
                impute, center, scale = 0.0, 0.0, 1.0
            spec.append(ColumnSpec(name, name, "zscore", impute, center, scale if scale > 0 else 1.0))

        for name in BINARY_FIELDS:
            observed = [_binary_value(name, getattr(f, name)) for f in features if getattr(f, name) is not None]
            note_missing(name, observed)
            spec.append(ColumnSpec(name, name, "binary", _mode(observed, (0.0, 1.0)) if observed else 0.0))

        observed = [TICI_ORDINAL[f.tici] for f in features if f.tici is not None]
        note_missing("tici", observed)
        spec.append(ColumnSpec("tici", "tici", "ordinal", _mode(observed, range(6)) if observed else 0))

        observed = [f.discharge_destination for f in features if f.discharge_destination is not None]
        note_missing("discharge_destination", observed)
        impute = _mode(observed, DESTINATIONS) if observed else "other"
        for level in DESTINATIONS:
            spec.append(
                ColumnSpec(f"discharge_destination={level}", "discharge_destination", "onehot", impute, level=level)
            )

        self.column_spec = spec + indicators
        return self

    def transform(self, features: Sequence[StructuredFeatures]) -> FeatureMatrix:
        if self.column_spec is None:
            raise RuntimeError("encoder is not fitted")
        n, d = len(features), len(self.column_spec)
        rows = np.zeros((n, d))
        mask = np.zeros((n, d), dtype=bool)
        for i, f in enumerate(features):
            for j, col in enumerate(self.column_spec):
                raw = getattr(f, col.source)
                if col.encoding == "missing_indicator":
                    rows[i, j] = 1.0 if raw is None else 0.0
                    continue
                missing = raw is None
                mask[i, j] = missing
                if col.encoding == "zscore":
                    value = col.impute if missing else float(raw)
                    rows[i, j] = (value - col.center) / col.scale
                elif col.encoding == "binary":
                    rows[i, j] = col.impute if missing else _binary_value(col.source, raw)
                elif col.encoding == "ordinal":
                    rows[i, j] = col.impute if missing else TICI_ORDINAL[raw]
                elif col.encoding == "onehot":
                    value = col.impute if missing else raw
                    rows[i, j] = 1.0 if value == col.level else 0.0
        return FeatureMatrix(rows, list(self.column_spec), mask)

    def decode(self, row: np.ndarray) -> dict[str, Any]:
        """Invert the encoding of one row back to raw feature values (imputed values included)."""
        if self.column_spec is None:
            raise RuntimeError("encoder is not fitted")
        out: dict[str, Any] = {}
        for value, col in zip(row, self.column_spec):
            if col.encoding == "zscore":
                out[col.source] = float(value) * col.scale + col.center
            elif col.encoding == "binary":
                flag = bool(round(float(value)))
                out[col.source] = ("male" if flag else "female") if col.source == "sex" else flag
            elif col.encoding == "ordinal":
                out[col.source] = TICI_GRADES[int(round(float(value)))]
            elif col.encoding == "onehot" and value >= 0.5:
                out[col.source] = col.level
        return out


def encode_features(
    features: Sequence[StructuredFeatures],
    train: Sequence[StructuredFeatures] | None = None,
) -> FeatureMatrix:
    """Encode ``features`` with statistics fitted on ``train`` (defaults to ``features`` itself)."""
    if not features:
        raise ValueError("encode_features needs at least one row")
    return FeatureEncoder().fit(train if train is not None else features).transform(features)


# ---------------------------------------------------------------------------
# linear epsilon-insensitive SVR


@dataclass
class SvrModel:
    weights: np.ndarray
    bias: float
    C: float
    epsilon: float
    iterations: int = 0
    objective_trace: list[float] = field(default_factory=list)
    column_spec: list[ColumnSpec] = field(default_factory=list)

    @property
    def final_objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else float("nan")

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.weights.shape[0]:
            raise ValueError(f"row width {X.shape[1]} does not match model width {self.weights.shape[0]}")
        return X @ self.weights + self.bias

    def to_dict(self) -> dict[str, Any]:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "hyperparams": {"C": self.C, "epsilon": self.epsilon},
            "iterations": self.iterations,
            "objective_trace": self.objective_trace,
            "column_spec": [c.to_dict() for c in self.column_spec],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SvrModel":
        return cls(
            weights=np.asarray(data["weights"], dtype=float),
            bias=float(data["bias"]),
            C=float(data["hyperparams"]["C"]),
            epsilon=float(data["hyperparams"]["epsilon"]),
            iterations=int(data.get("iterations", 0)),
            objective_trace=[float(v) for v in data.get("objective_trace", [])],
            column_spec=[ColumnSpec(**c) for c in data.get("column_spec", [])],
        )


def svr_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, C: float, epsilon: float) -> float:
    residual = np.abs(y - (X @ w + b))
    return float(0.5 * w @ w + C * np.maximum(0.0, residual - epsilon).sum())


def train_svr(
    matrix: FeatureMatrix | np.ndarray,
    labels: Sequence[float],
    C: float = 1.0,
    epsilon: float = 0.5,
    epochs: int = 4000,
    step0: float = 1.0,
    decay: float = 0.75,
    seed: int = 0,
) -> SvrModel:
    """Fit a linear epsilon-insensitive SVR by full-batch subgradient descent.

    Minimizes ``0.5*||w||^2 + C * sum(max(0, |y - (w.x + b)| - epsilon))``.
    Each epoch takes a step of length ``step0 * t**-decay`` along the
    normalized subgradient. The method keeps the best iterate seen so far,
    which is what gets returned, and ``objective_trace[t]`` is that best
    objective after epoch ``t`` (non-increasing by construction). The seed
    only drives the small random weight initialization.
    """
    if C <= 0 or epsilon < 0:
        raise ValueError("need C > 0 and epsilon >= 0")
    column_spec = list(matrix.column_spec) if isinstance(matrix, FeatureMatrix) else []
    X = np.asarray(matrix.rows if isinstance(matrix, FeatureMatrix) else matrix, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels, dtype=float)
    if X.shape[0] != y.shape[0] or X.shape[0] < 2:
        raise ValueError(f"need matching rows and labels (>= 2), got {X.shape[0]} and {y.shape[0]}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("non-finite values in training data")

    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1e-3, X.shape[1])
    b = float(np.median(y))
    best_w, best_b = w.copy(), b
    best = svr_objective(w, b, X, y, C, epsilon)
    trace = [best]
    t = 0
    for t in range(1, epochs + 1):
        r = y - (X @ w + b)
        s = np.where(r > epsilon, -1.0, np.where(r < -epsilon, 1.0, 0.0))
        gw = w + C * (s @ X)
        gb = C * s.sum()
        norm = float(np.sqrt(gw @ gw + gb * gb))
        if norm == 0.0:
            break
        eta = step0 * t ** (-decay)
        w = w - eta * gw / norm
        b = b - eta * gb / norm
        obj = svr_objective(w, b, X, y, C, epsilon)
        if obj < best:
            best, best_w, best_b = obj, w.copy(), b
        trace.append(best)
    return SvrModel(best_w, float(best_b), C, epsilon, iterations=t, objective_trace=trace, column_spec=column_spec)


def round_half_even_clamped(raw: float) -> int:
    return int(min(max(round(raw), 0), 6))


def predict_clinical_ml(model: SvrModel, row: np.ndarray, patient_id: str = "", true_mrs: int | None = None) -> PredictionRecord:
    """Score one encoded row; the integer prediction is the raw score rounded half-to-even and clamped to 0..6."""
    raw = float(model.raw_scores(np.asarray(row, dtype=float).reshape(1, -1))[0])
    return PredictionRecord(
        patient_id=patient_id,
        engine="clinical_ml",
        status="ok",
        predicted_mrs=round_half_even_clamped(raw),
        raw_extraction_output=f"{raw:.6f}",
        attempts=1,
        true_mrs=true_mrs,
        raw_score=raw,
    )
