"""Synthetic discharge summaries with embedded variables and a deterministic outcome oracle.

The outcome mapping here is a convention for closed-loop testing, not a
clinical model: the discharge NIHSS sets a base score and age over 80 adds one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .corpus import Cohort, PatientRecord, write_corpus
from .features import DESTINATIONS, GRAMMAR_VERSION, TICI_GRADES, StructuredFeatures

# Must match the extraction grammar version; see data/extraction_grammar.toml.
PHRASING_BANK_VERSION = "1"

# (upper bound of discharge NIHSS, base score); the last band is open-ended.
NIHSS_BANDS = ((0, 0), (4, 1), (9, 2), (14, 3), (20, 4), (42, 5))


def oracle_from(nihss_discharge: int, age_years: float) -> int:
    base = next(score for upper, score in NIHSS_BANDS if nihss_discharge <= upper)
    if age_years > 80:
        base += 1
    return min(max(base, 0), 6)


@dataclass(frozen=True)
class LatentProfile:
    features: StructuredFeatures
    seed: int
    label_noise: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"features": self.features.to_dict(), "seed": self.seed, "label_noise": self.label_noise}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LatentProfile":
        return cls(StructuredFeatures(**data["features"]), int(data["seed"]), int(data.get("label_noise", 0)))


def oracle_mrs(profile: LatentProfile) -> int:
    f = profile.features
    if f.nihss_discharge is None or f.age_years is None:
        raise ValueError("profile lacks discharge NIHSS or age")
    return oracle_from(f.nihss_discharge, f.age_years)


@dataclass(frozen=True)
class SynthConfig:
    n: int
    seed: int = 0
    noise_level: int = 0
    note_length_target: int = 400
    phrasing_bank_version: str = PHRASING_BANK_VERSION
    id_prefix: str = "syn"

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.noise_level not in (0, 1, 2):
            raise ValueError("noise_level must be 0, 1 or 2")
        if self.phrasing_bank_version != PHRASING_BANK_VERSION:
            raise ValueError(
                f"phrasing bank version {self.phrasing_bank_version!r} is not available "
                f"(this build ships {PHRASING_BANK_VERSION!r})"
            )
        if PHRASING_BANK_VERSION != GRAMMAR_VERSION:
            raise RuntimeError(
                f"phrasing bank v{PHRASING_BANK_VERSION} and extraction grammar v{GRAMMAR_VERSION} have drifted"
            )


# ---------------------------------------------------------------------------
# phrasing bank

HPI = (
    "The patient is a {age}-year-old {sexword} who presented with acute onset of {deficit}.",
    "HPI: {age} year old {sexword} presenting with {deficit}.",
)
SEXWORDS = {"male": ("male", "man", "gentleman"), "female": ("female", "woman", "lady")}
DEFICITS = (
    "left-sided weakness",
    "right hemiparesis and aphasia",
    "facial droop and dysarthria",
    "gait instability and vertigo",
)
TRANSFER = {
    True: ("The patient was transferred from an outside hospital for thrombectomy evaluation.",),
    False: ("The patient presented directly to our emergency department.",),
}
HISTORY_TERMS = {
    "prior_stroke": ("prior stroke", "previous stroke"),
    "hypertension": ("hypertension", "HTN"),
    "diabetes": ("diabetes mellitus", "type 2 diabetes"),
    "atrial_fibrillation": ("atrial fibrillation", "afib"),
}
HISTORY = {
    True: ("Past medical history is significant for {term}.", "History of {term}."),
    False: ("No history of {term}.", "Denies {term}."),
}
NIHSS_BASELINE = ("Baseline NIHSS: {v}.", "NIHSS on arrival was {v}.", "Initial NIHSS score of {v}.")
NIHSS_24H = ("NIHSS at 24 hours was {v}.", "24-hour NIHSS: {v}.")
NIHSS_DISCHARGE = ("Discharge NIHSS: {v}.", "NIHSS at discharge was {v}.", "On discharge, NIHSS was {v}.")
HBA1C = ("HbA1c {v}%.", "Hemoglobin A1c was {v}%.")
LDL = ("LDL {v} mg/dL.", "LDL cholesterol was {v} mg/dL.")
TPA = {
    True: ("IV tPA was administered.", "The patient received IV alteplase."),
    False: ("IV tPA was not administered.", "The patient did not receive IV tPA."),
}
EVT = {
    True: ("The patient underwent mechanical thrombectomy.", "Endovascular thrombectomy was performed."),
    False: ("The patient did not undergo thrombectomy.", "No endovascular thrombectomy was performed."),
}
TICI = ("TICI {v} reperfusion was achieved.", "Final TICI score: {v}.")
COMPLICATION = {
    True: (
        "The procedure was complicated by a groin hematoma.",
        "The course was notable for a procedure-related complication.",
    ),
    False: ("There were no procedure-related complications.", "The procedure was without complications."),
}
DESTINATION_PHRASES = {
    "home": "home",
    "acute_rehab": "acute inpatient rehabilitation",
    "snf": "a skilled nursing facility",
    "ltac": "a long-term acute care hospital",
    "hospice": "hospice",
    "other": "another facility",
}
DISPOSITION = ("The patient was discharged to {v}.", "Discharge disposition: {v}.")

# Neutral sentences used to pad notes to their target length; none of them
# may trigger a grammar pattern.
FILLER = (
    "Vital signs remained within acceptable limits throughout the admission.",
    "Telemetry monitoring was continued on the stroke unit.",
    "Speech-language pathology evaluated swallowing function at the bedside.",
    "Physical therapy and occupational therapy followed the patient daily.",
    "Venous thromboembolism prophylaxis was maintained with sequential compression devices.",
    "Repeat imaging demonstrated expected evolution of the infarct.",
    "Blood pressure goals were adjusted according to the unit protocol.",
    "The patient tolerated a modified diet after swallow evaluation.",
    "Echocardiogram showed a preserved ejection fraction.",
    "Neurological checks were performed every four hours.",
    "Family meetings were held to review goals of care.",
    "Medications were reconciled and reviewed with the pharmacy team.",
    "Glucose was monitored with point-of-care testing before meals.",
    "Case management coordinated post-acute services.",
    "Statin therapy was initiated for secondary prevention.",
    "Antiplatelet therapy was started after repeat imaging.",
    "The care team reviewed imaging findings with the family.",
    "Bowel and bladder function were monitored by nursing staff.",
    "Pain was controlled with acetaminophen as needed.",
    "Sleep was adequate overnight per nursing documentation.",
)


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def sample_profile(rng: np.random.Generator, target: int, seed: int) -> LatentProfile:
    """Draw a profile whose oracle score equals ``target`` (0..6)."""
    if target == 6:
        old, base = True, 5
    elif target == 0:
        old, base = False, 0
    else:
        old = bool(rng.random() < 0.25)
        base = target - 1 if old else target
    lo = 0 if base == 0 else NIHSS_BANDS[base - 1][0] + 1
    hi = NIHSS_BANDS[base][0] if base < 5 else 30
    nihss_discharge = int(rng.integers(lo, hi + 1))
    age = int(rng.integers(81, 96)) if old else int(rng.integers(30, 81))

    complication = bool(rng.random() < 0.15)
    evt = bool(rng.random() < 0.7)
    nihss_24h = min(42, nihss_discharge + int(rng.integers(0, 6)))
    if complication:
        # a complication may leave the patient worse at discharge than at 24 h
        nihss_24h = max(0, nihss_discharge - int(rng.integers(0, 4)))
    nihss_baseline = min(42, max(nihss_24h, nihss_discharge) + int(rng.integers(0, 10)))

    features = StructuredFeatures(
        age_years=float(age),
        sex="male" if rng.random() < 0.55 else "female",
        prior_stroke=bool(rng.random() < 0.2),
        hypertension=bool(rng.random() < 0.65),
        diabetes=bool(rng.random() < 0.25),
        atrial_fibrillation=bool(rng.random() < 0.3),
        transfer_status=bool(rng.random() < 0.5),
        nihss_baseline=nihss_baseline,
        nihss_24h=nihss_24h,
        nihss_discharge=nihss_discharge,
        hba1c=round(float(rng.uniform(4.8, 11.0)), 1),
        ldl=float(int(rng.integers(40, 200))),
        iv_tpa=bool(rng.random() < 0.45),
        evt=evt,
        tici=_pick(rng, TICI_GRADES[2:]) if evt else None,
        procedure_complication=complication,
        discharge_destination=_pick(rng, DESTINATIONS),
    )
    return LatentProfile(features, seed)


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:.1f}"


def render_note(profile: LatentProfile, rng: np.random.Generator, length_target: int) -> str:
    """Render a profile through the phrasing bank, padded with neutral filler to about ``length_target`` words."""
    f = profile.features
    hpi = _pick(rng, HPI).format(
        age=int(f.age_years), sexword=_pick(rng, SEXWORDS[f.sex]), deficit=_pick(rng, DEFICITS)
    )
    history = [
        _pick(rng, HISTORY[getattr(f, name)]).format(term=_pick(rng, terms)) for name, terms in HISTORY_TERMS.items()
    ]
    course = [
        _pick(rng, NIHSS_BASELINE).format(v=f.nihss_baseline),
        _pick(rng, TPA[f.iv_tpa]),
        _pick(rng, EVT[f.evt]),
    ]
    if f.evt and f.tici is not None:
        course.append(_pick(rng, TICI).format(v=f.tici.upper() if rng.random() < 0.5 else f.tici))
    course += [
        _pick(rng, COMPLICATION[f.procedure_complication]),
        _pick(rng, NIHSS_24H).format(v=f.nihss_24h),
        _pick(rng, HBA1C).format(v=_fmt_num(f.hba1c)),
        _pick(rng, LDL).format(v=_fmt_num(f.ldl)),
    ]
    discharge = [
        _pick(rng, NIHSS_DISCHARGE).format(v=f.nihss_discharge),
        _pick(rng, DISPOSITION).format(v=DESTINATION_PHRASES[f.discharge_destination]),
    ]

    core_words = sum(len(s.split()) for s in [hpi, *history, *course, *discharge])
    target = max(int(length_target * rng.uniform(0.5, 1.5)), core_words)
    filler: list[str] = []
    words = core_words
    while words < target:
        sentence = _pick(rng, FILLER)
        filler.append(sentence)
        words += len(sentence.split())
    split = len(filler) // 2

    sections = [
        "DISCHARGE SUMMARY",
        "HISTORY OF PRESENT ILLNESS:\n" + hpi + " " + _pick(rng, TRANSFER[f.transfer_status]),
        "PAST MEDICAL HISTORY:\n" + " ".join(history),
        "HOSPITAL COURSE:\n" + " ".join(course[:3] + filler[:split] + course[3:] + filler[split:]),
        "CONDITION AT DISCHARGE:\n" + " ".join(discharge),
    ]
    return "\n\n".join(sections) + "\n"


@dataclass
class SynthCorpus:
    cohort: Cohort
    profiles: dict[str, LatentProfile] = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        corpus_path = out / "corpus.jsonl"
        write_corpus(self.cohort, corpus_path)
        ledger_path = out / "profiles.jsonl"
        with ledger_path.open("w", encoding="utf-8") as fh:
            for rid, profile in self.profiles.items():
                fh.write(json.dumps({"id": rid, **profile.to_dict()}, sort_keys=True) + "\n")
        return corpus_path, ledger_path


def generate_corpus(config: SynthConfig) -> SynthCorpus:
    """Generate ``config.n`` labelled synthetic patients plus the id -> profile ledger.

    Oracle scores cycle through a seeded permutation of 0..6, so every label
    value appears once ``n >= 7`` (and evenly for ``n >= 70``). At noise level
    ``k >= 1`` each label is shifted by a seeded offset in ``[-k, k]`` and
    clamped to 0..6.
    """
    rng = np.random.default_rng(config.seed)
    width = len(str(config.n))
    records, profiles = [], {}
    order: list[int] = []
    for i in range(config.n):
        if i % 7 == 0:
            order = [int(v) for v in rng.permutation(7)]
        target = order[i % 7]
        patient_rng = np.random.default_rng([config.seed, i])
        profile = sample_profile(patient_rng, target, seed=config.seed)
        label = oracle_mrs(profile)
        noise = 0
        if config.noise_level:
            noise = int(patient_rng.integers(-config.noise_level, config.noise_level + 1))
            label = min(max(label + noise, 0), 6)
        profile = LatentProfile(profile.features, config.seed, noise)
        rid = f"{config.id_prefix}{i:0{width}d}"
        f = profile.features
        records.append(
            PatientRecord(
                id=rid,
                note_text=render_note(profile, patient_rng, config.note_length_target),
                mrs_90d=label,
                mrs_followup_days=int(patient_rng.integers(60, 121)),
                age_years=int(f.age_years),
                sex=f.sex,
                evt=f.evt,
                died_in_hospital=False,
            )
        )
        profiles[rid] = profile
    provenance = {"source": "synth", "config": asdict(config)}
    return SynthCorpus(Cohort(tuple(records), provenance), profiles)


def load_profiles(path: str | Path) -> dict[str, LatentProfile]:
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[row["id"]] = LatentProfile.from_dict(row)
    return out
