"""Two-step chain-of-thought outcome prediction from clinical notes, with baselines and bootstrap evaluation."""

from __future__ import annotations

__version__ = "0.1.0"

from .corpus import Cohort, PatientRecord, apply_exclusions, chunk_spans, ingest_corpus, stratified_split
from .pipeline import parse_mrs, predict_cope, predict_single_step, render_prompt, run_cohort
from .stats import PairedOutcomes, benjamini_hochberg, bootstrap_ci, paired_bootstrap_test

__all__ = [
    "Cohort",
    "PairedOutcomes",
    "PatientRecord",
    "apply_exclusions",
    "benjamini_hochberg",
    "bootstrap_ci",
    "chunk_spans",
    "ingest_corpus",
    "paired_bootstrap_test",
    "parse_mrs",
    "predict_cope",
    "predict_single_step",
    "render_prompt",
    "run_cohort",
    "stratified_split",
]
