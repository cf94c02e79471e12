"""Evaluation statistics: point metrics, bootstrap intervals and tests, BH control, subgroups."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import word_count
from .records import PredictionRecord

MetricFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PairedOutcomes:
    patient_ids: tuple[str, ...]
    y_true: np.ndarray
    y_pred: np.ndarray
    n_excluded: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "y_true", np.asarray(self.y_true, dtype=np.int64))
        object.__setattr__(self, "y_pred", np.asarray(self.y_pred, dtype=np.int64))
        n = len(self.patient_ids)
        if self.y_true.shape != (n,) or self.y_pred.shape != (n,):
            raise ValueError("patient_ids, y_true and y_pred must have equal length")
        for arr in (self.y_true, self.y_pred):
            if n and (arr.min() < 0 or arr.max() > 6):
                raise ValueError("scores must lie in 0..6")

    def __len__(self) -> int:
        return len(self.patient_ids)

    @classmethod
    def from_arrays(cls, y_true: Sequence[int], y_pred: Sequence[int], ids: Sequence[str] | None = None) -> "PairedOutcomes":
        ids = tuple(ids) if ids is not None else tuple(str(i) for i in range(len(y_true)))
        return cls(ids, np.asarray(y_true), np.asarray(y_pred))

    @classmethod
    def from_predictions(cls, predictions: Iterable[PredictionRecord]) -> "PairedOutcomes":
        """Pair ok predictions with their labels; failed or unlabeled records are counted in ``n_excluded``."""
        preds = sorted(predictions, key=lambda p: p.patient_id)
        kept = [p for p in preds if p.ok and p.true_mrs is not None]
        return cls(
            tuple(p.patient_id for p in kept),
            np.array([p.true_mrs for p in kept], dtype=np.int64),
            np.array([p.predicted_mrs for p in kept], dtype=np.int64),
            n_excluded=len(preds) - len(kept),
        )

    def subset(self, mask: np.ndarray) -> "PairedOutcomes":
        ids = tuple(i for i, keep in zip(self.patient_ids, mask) if keep)
        return PairedOutcomes(ids, self.y_true[mask], self.y_pred[mask], self.n_excluded)


# ---------------------------------------------------------------------------
# metrics (vectorized over leading axes; reduce over the last one)


def mae_arr(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    return np.abs(y_pred - y_true).mean(axis=-1)


def acc_arr(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    return (y_pred == y_true).mean(axis=-1)


def within1_arr(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    return (np.abs(y_pred - y_true) <= 1).mean(axis=-1)


METRICS: dict[str, MetricFn] = {"mae": mae_arr, "acc": acc_arr, "within1_acc": within1_arr}
METRIC_ALIASES = {"mae": "mae", "acc": "acc", "exact": "acc", "within1": "within1_acc", "within1_acc": "within1_acc", "pm1": "within1_acc"}


def _nonempty(outcomes: PairedOutcomes) -> None:
    if len(outcomes) == 0:
        raise ValueError("metric of an empty outcome set")


def mae(outcomes: PairedOutcomes) -> float:
    _nonempty(outcomes)
    return float(mae_arr(outcomes.y_true, outcomes.y_pred))


def exact_acc(outcomes: PairedOutcomes) -> float:
    _nonempty(outcomes)
    return float(acc_arr(outcomes.y_true, outcomes.y_pred))


def within1_acc(outcomes: PairedOutcomes) -> float:
    _nonempty(outcomes)
    return float(within1_arr(outcomes.y_true, outcomes.y_pred))


def resolve_metric(name: str) -> tuple[str, MetricFn]:
    key = METRIC_ALIASES.get(name.strip().lower())
    if key is None:
        raise ValueError(f"unknown metric {name!r}; choose from {sorted(METRIC_ALIASES)}")
    return key, METRICS[key]


# ---------------------------------------------------------------------------
# counter-based resampling
#
# Resample i draws its n indices from splitmix64(key_i + j * golden), with
# key_i derived from (seed, i). Any block of resamples can therefore be
# computed independently, in any order, with identical results.

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def resample_indices(seed: int, start: int, stop: int, n: int) -> np.ndarray:
    """Index matrix of shape ``(stop - start, n)`` for resamples ``start..stop-1``."""
    with np.errstate(over="ignore"):
        i = np.arange(start, stop, dtype=np.uint64)
        seed_word = np.full(i.shape, seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)
        keys = _splitmix64(_splitmix64(seed_word) ^ i)
        j = np.arange(n, dtype=np.uint64)
        draws = _splitmix64(keys[:, None] + j[None, :] * _GOLDEN)
    return (draws % np.uint64(n)).astype(np.intp)


def bootstrap_distribution(
    y_true: np.ndarray,
    y_pred: np.ndarray,
    metric: MetricFn,
    B: int,
    seed: int,
    block: int = 1000,
) -> np.ndarray:
    n = len(y_true)
    out = np.empty(B)
    for start in range(0, B, block):
        stop = min(start + block, B)
        idx = resample_indices(seed, start, stop, n)
        out[start:stop] = metric(y_true[idx], y_pred[idx])
    return out


def percentile_interval(values: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    """Nearest-rank percentile interval of a bootstrap distribution."""
    v = np.sort(values)
    B = len(v)
    alpha = (1.0 - level) / 2.0
    lo_rank = max(1, math.ceil(round(alpha * B, 9)))
    hi_rank = min(B, max(1, math.ceil(round((1.0 - alpha) * B, 9))))
    return float(v[lo_rank - 1]), float(v[hi_rank - 1])


def bootstrap_ci(
    outcomes: PairedOutcomes,
    metric: MetricFn | str = "mae",
    B: int = 10_000,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile bootstrap interval for ``metric`` over patients resampled with replacement."""
    if len(outcomes) < 2:
        raise ValueError("bootstrap needs at least 2 patients")
    if B < 100:
        raise ValueError("bootstrap needs B >= 100")
    fn = resolve_metric(metric)[1] if isinstance(metric, str) else metric
    dist = bootstrap_distribution(outcomes.y_true, outcomes.y_pred, fn, B, seed)
    return percentile_interval(dist, level)


def _aligned(a: PairedOutcomes, b: PairedOutcomes) -> None:
    if a.patient_ids != b.patient_ids:
        missing = set(a.patient_ids) ^ set(b.patient_ids)
        raise ValueError(
            f"arms differ in patient ids ({len(missing)} not shared)" if missing else "arms are not aligned by patient id"
        )
    if not np.array_equal(a.y_true, b.y_true):
        raise ValueError("arms disagree on ground-truth labels")


def paired_bootstrap_test(
    outcomes_a: PairedOutcomes,
    outcomes_b: PairedOutcomes,
    metric: MetricFn | str = "mae",
    B: int = 10_000,
    seed: int = 0,
) -> float:
    """Two-sided paired bootstrap p-value for a difference in ``metric``.

    Patients are resampled jointly for both arms; with ``d_i`` the difference
    on resample ``i``, ``p = 2 * min(#{d<=0}+1, #{d>=0}+1) / (B+1)``, capped at 1.
    """
    _aligned(outcomes_a, outcomes_b)
    if len(outcomes_a) < 2:
        raise ValueError("bootstrap needs at least 2 patients")
    fn = resolve_metric(metric)[1] if isinstance(metric, str) else metric
    n = len(outcomes_a)
    le = ge = 0
    for start in range(0, B, 1000):
        stop = min(start + 1000, B)
        idx = resample_indices(seed, start, stop, n)
        y = outcomes_a.y_true[idx]
        delta = fn(y, outcomes_a.y_pred[idx]) - fn(y, outcomes_b.y_pred[idx])
        le += int((delta <= 0).sum())
        ge += int((delta >= 0).sum())
    return min(1.0, 2.0 * min(le + 1, ge + 1) / (B + 1))


def benjamini_hochberg(p_values: Sequence[float], q: float = 0.05) -> list[bool]:
    """Step-up BH decisions, returned in input order."""
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1:
        raise ValueError("p_values must be a flat sequence")
    if np.any(~np.isfinite(p)) or np.any(p <= 0) or np.any(p > 1):
        raise ValueError("every p-value must lie in (0, 1]")
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    m = len(p)
    if m == 0:
        return []
    order = np.argsort(p, kind="stable")
    thresholds = q * np.arange(1, m + 1) / m
    passing = np.nonzero(p[order] <= thresholds)[0]
    reject = np.zeros(m, dtype=bool)
    if passing.size:
        reject[order[: passing[-1] + 1]] = True
    return reject.tolist()


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    n: int
    n_excluded: int
    point: dict[str, float]
    ci_95: dict[str, tuple[float, float] | None]
    B: int
    seed: int

    @property
    def mae(self) -> float:
        return self.point["mae"]

    @property
    def acc(self) -> float:
        return self.point["acc"]

    @property
    def within1_acc(self) -> float:
        return self.point["within1_acc"]

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "n_excluded": self.n_excluded,
            "bootstrap": {"B": self.B, "seed": self.seed},
            "metrics": {
                k: {"point": self.point[k], "ci_lo": (self.ci_95[k] or (None, None))[0], "ci_hi": (self.ci_95[k] or (None, None))[1]}
                for k in METRICS
            },
        }


def metric_report(outcomes: PairedOutcomes, B: int = 10_000, seed: int = 0) -> MetricReport:
    _nonempty(outcomes)
    point = {k: float(fn(outcomes.y_true, outcomes.y_pred)) for k, fn in METRICS.items()}
    ci: dict[str, tuple[float, float] | None] = {}
    for k, fn in METRICS.items():
        ci[k] = bootstrap_ci(outcomes, fn, B, seed) if len(outcomes) >= 2 else None
    return MetricReport(len(outcomes), outcomes.n_excluded, point, ci, B, seed)


@dataclass
class ComparisonResult:
    model_a: str
    model_b: str
    n: int
    deltas: dict[str, float]
    p_values: dict[str, float]
    bh_reject: dict[str, bool]
    q: float
    B: int
    seed: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_a": self.model_a,
            "model_b": self.model_b,
            "n": self.n,
            "q": self.q,
            "bootstrap": {"B": self.B, "seed": self.seed},
            "metrics": {
                k: {"delta": self.deltas[k], "p_value": self.p_values[k], "bh_reject": self.bh_reject[k]}
                for k in self.deltas
            },
        }


def compare(
    outcomes_a: PairedOutcomes,
    outcomes_b: PairedOutcomes,
    family: Sequence[str] = ("mae", "acc", "within1_acc"),
    B: int = 10_000,
    seed: int = 0,
    q: float = 0.05,
    model_a: str = "a",
    model_b: str = "b",
) -> ComparisonResult:
    """Paired tests for each metric in ``family``, with BH applied across that family."""
    _aligned(outcomes_a, outcomes_b)
    names = [resolve_metric(m)[0] for m in family]
    deltas, pvals = {}, {}
    for name in names:
        fn = METRICS[name]
        deltas[name] = float(fn(outcomes_a.y_true, outcomes_a.y_pred) - fn(outcomes_b.y_true, outcomes_b.y_pred))
        pvals[name] = paired_bootstrap_test(outcomes_a, outcomes_b, fn, B, seed)
    decisions = benjamini_hochberg([pvals[n] for n in names], q)
    return ComparisonResult(model_a, model_b, len(outcomes_a), deltas, pvals, dict(zip(names, decisions)), q, B, seed)


def align_arms(a: PairedOutcomes, b: PairedOutcomes) -> tuple[PairedOutcomes, PairedOutcomes]:
    """Restrict two arms to their shared patients (both arms must have scored a patient for it to count)."""
    shared = sorted(set(a.patient_ids) & set(b.patient_ids))
    def pick(o: PairedOutcomes) -> PairedOutcomes:
        pos = {pid: i for i, pid in enumerate(o.patient_ids)}
        idx = np.array([pos[s] for s in shared], dtype=np.intp)
        return PairedOutcomes(tuple(shared), o.y_true[idx], o.y_pred[idx], o.n_excluded + len(o) - len(shared))
    return pick(a), pick(b)


# ---------------------------------------------------------------------------
# subgroups

AXES = ("sex", "evt", "note_length_quartile", "age_band")
AXIS_ALIASES = {"sex": "sex", "evt": "evt", "length": "note_length_quartile", "note_length_quartile": "note_length_quartile", "age": "age_band", "age_band": "age_band"}
AGE_BANDS = ("<46", "46–64", "65–80", ">80")
UNKNOWN = "unknown"


def age_band(age: int | float | None) -> str:
    if age is None:
        return UNKNOWN
    if age < 0:
        raise ValueError("age must be >= 0")
    if age < 46:
        return AGE_BANDS[0]
    if age <= 64:
        return AGE_BANDS[1]
    if age <= 80:
        return AGE_BANDS[2]
    return AGE_BANDS[3]


@dataclass(frozen=True)
class QuartileBins:
    cutoffs: tuple[float, float, float]
    labels: tuple[str, str, str, str]
    counts: tuple[int, int, int, int]
    degenerate: bool

    def assign(self, value: float) -> int:
        """Band index 0..3; a value equal to a cutoff stays in the band that cutoff closes."""
        q1, q2, q3 = self.cutoffs
        if value <= q1:
            return 0
        if value <= q2:
            return 1
        if value <= q3:
            return 2
        return 3


def quartile_bins(values: Sequence[float]) -> QuartileBins:
    """Nearest-rank quartile cutoffs and the four bands they induce.

    Band k holds values in ``(Q_k, Q_{k+1}]`` (with open ends at min/max), so
    1..8 gives cutoffs 2, 4, 6 and four bands of two values each.
    """
    if len(values) < 4:
        raise ValueError("quartile bins need at least 4 values")
    v = sorted(values)
    n = len(v)

    def rank(p: float) -> float:
        return v[min(max(math.ceil(round(p * n, 9)), 1), n) - 1]

    cutoffs = (rank(0.25), rank(0.5), rank(0.75))
    fmt = lambda x: f"{x:g}"
    labels = (
        f"Q1 ≤{fmt(cutoffs[0])}",
        f"Q2 >{fmt(cutoffs[0])}–{fmt(cutoffs[1])}",
        f"Q3 >{fmt(cutoffs[1])}–{fmt(cutoffs[2])}",
        f"Q4 >{fmt(cutoffs[2])}",
    )
    probe = QuartileBins(cutoffs, labels, (0, 0, 0, 0), False)
    counts = [0, 0, 0, 0]
    for x in v:
        counts[probe.assign(x)] += 1
    return QuartileBins(cutoffs, labels, tuple(counts), degenerate=sum(c > 0 for c in counts) == 1)


@dataclass(frozen=True)
class ForestRow:
    axis: str
    band: str
    n: int
    mae: float | None
    ci_lo: float | None
    ci_hi: float | None

    def to_dict(self) -> dict[str, Any]:
        return {"axis": self.axis, "band": self.band, "n": self.n, "mae": self.mae, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi}


FOREST_COLUMNS = ("axis", "band", "n", "mae", "ci_lo", "ci_hi")


def _band_labels(axis: str, covariates: Mapping[str, Mapping[str, Any]], ids: Sequence[str]) -> tuple[list[str], tuple[str, ...]]:
    if axis == "sex":
        return [covariates[i].get("sex") or UNKNOWN for i in ids], ("male", "female")
    if axis == "evt":
        def lab(v: Any) -> str:
            return UNKNOWN if v is None else ("EVT" if v else "non-EVT")
        return [lab(covariates[i].get("evt")) for i in ids], ("non-EVT", "EVT")
    if axis == "age_band":
        return [age_band(covariates[i].get("age_years")) for i in ids], AGE_BANDS
    if axis == "note_length_quartile":
        counts = [covariates[i].get("word_count") for i in ids]
        known = [c for c in counts if c is not None]
        bins = quartile_bins(known)
        return [UNKNOWN if c is None else bins.labels[bins.assign(c)] for c in counts], bins.labels
    raise ValueError(f"unknown subgroup axis {axis!r}")


def covariates_from_cohort(cohort: Iterable[Any]) -> dict[str, dict[str, Any]]:
    return {
        r.id: {"sex": r.sex, "evt": r.evt, "age_years": r.age_years, "word_count": word_count(r.note_text)}
        for r in cohort
    }


def subgroup_report(
    outcomes: PairedOutcomes,
    cohort: Iterable[Any] | Mapping[str, Mapping[str, Any]],
    axes: Sequence[str] = AXES,
    B: int = 10_000,
    seed: int = 0,
) -> list[ForestRow]:
    """MAE with bootstrap CI per band, ordered by axis then band.

    Records whose covariate is missing go to a trailing ``unknown`` row for
    that axis. Empty bands appear with ``n = 0`` and no estimate. Every band
    uses the same bootstrap seed, so a band covering the whole cohort
    reproduces the overall interval exactly. ``cohort`` may also be a
    precomputed id -> covariates mapping (see ``covariates_from_cohort``).
    """
    covariates = dict(cohort) if isinstance(cohort, Mapping) else covariates_from_cohort(cohort)
    missing = [i for i in outcomes.patient_ids if i not in covariates]
    if missing:
        raise ValueError(f"{len(missing)} scored patient(s) absent from the cohort, e.g. {missing[0]!r}")
    rows: list[ForestRow] = []
    for axis_name in axes:
        axis = AXIS_ALIASES.get(axis_name, axis_name)
        labels, bands = _band_labels(axis, covariates, outcomes.patient_ids)
        labels_arr = np.array(labels, dtype=object)
        for band in (*bands, UNKNOWN):
            mask = labels_arr == band
            n = int(mask.sum())
            if band == UNKNOWN and n == 0:
                continue
            if n == 0:
                rows.append(ForestRow(axis, band, 0, None, None, None))
                continue
            sub = outcomes.subset(mask)
            lo = hi = None
            if n >= 2:
                lo, hi = bootstrap_ci(sub, mae_arr, B, seed)
            rows.append(ForestRow(axis, band, n, mae(sub), lo, hi))
    return rows


def forest_csv(rows: Sequence[ForestRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FOREST_COLUMNS)
    for r in rows:
        writer.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in (r.axis, r.band, r.n, r.mae, r.ci_lo, r.ci_hi)])
    return buf.getvalue()


def forest_json(rows: Sequence[ForestRow]) -> str:
    return json.dumps([r.to_dict() for r in rows], indent=2, ensure_ascii=False) + "\n"
