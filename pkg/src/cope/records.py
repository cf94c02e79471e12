"""Per-patient prediction artifacts shared by every engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

ENGINES = ("cope", "single_step", "clinical_ml")
STATUSES = ("ok", "parse_failed", "backend_failed")

# fields that legitimately differ between two otherwise identical runs
VOLATILE_FIELDS = ("latency", "extraction_latency")


@dataclass(frozen=True)
class ReasoningArtifact:
    patient_id: str
    reasoning_text: str
    backend_model: str
    latency: float = 0.0


@dataclass(frozen=True)
class PredictionRecord:
    patient_id: str
    engine: str
    status: str
    predicted_mrs: int | None
    raw_extraction_output: str
    attempts: int
    reasoning_ref: ReasoningArtifact | None = None
    true_mrs: int | None = None
    raw_score: float | None = None
    lenient_parse: bool = False
    error: str | None = None
    extraction_latency: float = 0.0

    def __post_init__(self) -> None:
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if (self.predicted_mrs is not None) != (self.status == "ok"):
            raise ValueError("predicted_mrs must be present exactly when status is 'ok'")
        if self.predicted_mrs is not None and not 0 <= self.predicted_mrs <= 6:
            raise ValueError(f"predicted_mrs out of range: {self.predicted_mrs}")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready dict; the reasoning text itself lives in ``reasoning/<id>.txt``."""
        ref = None
        if self.reasoning_ref is not None:
            ref = {
                "path": f"reasoning/{self.patient_id}.txt",
                "backend_model": self.reasoning_ref.backend_model,
                "latency": self.reasoning_ref.latency,
            }
        return {
            "patient_id": self.patient_id,
            "engine": self.engine,
            "status": self.status,
            "predicted_mrs": self.predicted_mrs,
            "true_mrs": self.true_mrs,
            "raw_extraction_output": self.raw_extraction_output,
            "raw_score": self.raw_score,
            "attempts": self.attempts,
            "lenient_parse": self.lenient_parse,
            "error": self.error,
            "extraction_latency": self.extraction_latency,
            "reasoning_ref": ref,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], reasoning_text: str | None = None) -> "PredictionRecord":
        ref = data.get("reasoning_ref")
        artifact = None
        if ref is not None:
            artifact = ReasoningArtifact(
                patient_id=data["patient_id"],
                reasoning_text=reasoning_text or "",
                backend_model=ref.get("backend_model", ""),
                latency=float(ref.get("latency", 0.0)),
            )
        return cls(
            patient_id=data["patient_id"],
            engine=data["engine"],
            status=data["status"],
            predicted_mrs=data.get("predicted_mrs"),
            raw_extraction_output=data.get("raw_extraction_output", ""),
            attempts=int(data.get("attempts", 1)),
            reasoning_ref=artifact,
            true_mrs=data.get("true_mrs"),
            raw_score=data.get("raw_score"),
            lenient_parse=bool(data.get("lenient_parse", False)),
            error=data.get("error"),
            extraction_latency=float(data.get("extraction_latency", 0.0)),
        )


def strip_volatile(row: Mapping[str, Any]) -> dict[str, Any]:
    """Copy of a serialized record without timing fields, for determinism checks."""
    out = {k: v for k, v in row.items() if k not in VOLATILE_FIELDS}
    if isinstance(out.get("reasoning_ref"), Mapping):
        out["reasoning_ref"] = {k: v for k, v in out["reasoning_ref"].items() if k not in VOLATILE_FIELDS}
    return out
