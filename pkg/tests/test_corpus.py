from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cope.corpus import (
    Cohort,
    DuplicateIdError,
    IngestError,
    PatientRecord,
    apply_exclusions,
    chunk_note,
    chunk_spans,
    chunk_text,
    format_median_iqr,
    ingest_corpus,
    stratified_split,
    summarize_demographics,
    word_count,
    write_corpus,
)


def _write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def test_ingest_three_rows(tmp_path):
    rows = [{"id": f"p{i}", "note_text": "note", "mrs_90d": i, "extra": "ignored"} for i in range(3)]
    cohort = ingest_corpus(_write_jsonl(tmp_path / "c.jsonl", rows))
    assert len(cohort) == 3
    assert cohort.ids == ["p0", "p1", "p2"]


def test_missing_id_names_line(tmp_path):
    rows = [{"id": "p1", "note_text": "a"}, {"note_text": "b"}, {"id": "p3", "note_text": ""}]
    with pytest.raises(IngestError) as err:
        ingest_corpus(_write_jsonl(tmp_path / "c.jsonl", rows))
    assert "line 2" in str(err.value) and "'id'" in str(err.value)
    # every bad row is reported, not just the first
    assert len(err.value.problems) == 2


def test_duplicate_id(tmp_path):
    rows = [{"id": "p1", "note_text": "a"}, {"id": "p1", "note_text": "b"}]
    with pytest.raises(DuplicateIdError) as err:
        ingest_corpus(_write_jsonl(tmp_path / "c.jsonl", rows))
    assert err.value.ids == ["p1"]


def test_csv_and_jsonl_roundtrip_same_hash(tmp_path):
    records = (
        PatientRecord("a", "NIHSS 4, line\nbreak, \"quoted\"", 2, 90, 71, "male", True, False, {"iv_tpa": True}),
        PatientRecord("b", "short note", None, None, None, None, None, None),
    )
    cohort = Cohort(records)
    for name in ("c.jsonl", "c.csv"):
        write_corpus(cohort, tmp_path / name)
        again = ingest_corpus(tmp_path / name)
        assert again == cohort
        assert again.content_hash == cohort.content_hash


def test_bad_label_rejected(tmp_path):
    with pytest.raises(IngestError, match="mrs_90d"):
        ingest_corpus(_write_jsonl(tmp_path / "c.jsonl", [{"id": "x", "note_text": "n", "mrs_90d": 7}]))


def _rec(i, mrs=0, died=False, **kw):
    return PatientRecord(f"r{i:04d}", "note", mrs, died_in_hospital=died, **kw)


def test_exclusions_worked_example():
    cohort = Cohort((_rec(0, None), _rec(1, None), _rec(2, 3, True), _rec(3, 1), _rec(4, 2)))
    kept, report = apply_exclusions(cohort)
    assert kept.ids == ["r0003", "r0004"]
    assert report.to_dict() == {"n_input": 5, "excluded": {"missing_mrs_90d": 2, "died_in_hospital": 1}, "n_retained": 2}
    assert list(json.loads(report.to_json())["excluded"]) == ["missing_mrs_90d", "died_in_hospital"]


def test_exclusions_paper_flow_counts():
    # 1462 screened, 937 without a 90-day label, 61 in-hospital deaths among the rest
    recs = [_rec(i, None) for i in range(937)]
    recs += [_rec(937 + i, 6, died=True) for i in range(61)]
    recs += [_rec(998 + i, i % 7) for i in range(464)]
    kept, report = apply_exclusions(Cohort(tuple(recs)))
    assert len(kept) == 464 and report.n_retained == 464


def test_exclusions_identity():
    cohort = Cohort(tuple(_rec(i, i % 7) for i in range(10)))
    kept, _ = apply_exclusions(cohort)
    assert kept == cohort


@given(st.lists(st.tuples(st.one_of(st.none(), st.integers(0, 6)), st.one_of(st.none(), st.booleans())), max_size=30))
def test_exclusions_idempotent(spec):
    cohort = Cohort(tuple(PatientRecord(f"p{i}", "n", m, died_in_hospital=d) for i, (m, d) in enumerate(spec)))
    once, _ = apply_exclusions(cohort)
    twice, report = apply_exclusions(once)
    assert once == twice
    assert report.n_retained == len(once)


def test_split_one_per_stratum():
    cohort = Cohort(tuple(_rec(i, 0 if i < 5 else 3) for i in range(10)))
    split = stratified_split(cohort, 0.2, seed=1)
    by = cohort.by_id()
    assert sorted(by[i].mrs_90d for i in split.exploration_ids) == [0, 3]


def test_split_file_order_irrelevant():
    recs = [_rec(i, i % 7) for i in range(100)]
    a = stratified_split(Cohort(tuple(recs)), 0.2, 42)
    random.Random(3).shuffle(recs)
    b = stratified_split(Cohort(tuple(recs)), 0.2, 42)
    assert a == b


def test_split_errors():
    with pytest.raises(ValueError, match="unlabeled"):
        stratified_split(Cohort((_rec(0, None),)), 0.2, 0)
    with pytest.raises(ValueError):
        stratified_split(Cohort((_rec(0, 1),)), 1.0, 0)


@settings(max_examples=60)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=80), st.integers(0, 2**32), st.sampled_from([0.1, 0.2, 0.5, 0.75]))
def test_split_partition_property(labels, seed, fraction):
    cohort = Cohort(tuple(_rec(i, m) for i, m in enumerate(labels)))
    split = stratified_split(cohort, fraction, seed)
    assert split.exploration_ids | split.test_ids == set(cohort.ids)
    assert not split.exploration_ids & split.test_ids
    for s in set(labels):
        members = {r.id for r in cohort if r.mrs_90d == s}
        got = len(members & split.exploration_ids)
        assert abs(got - fraction * len(members)) <= 0.5 + 1e-9


@pytest.mark.parametrize(
    "n, expected",
    [(512, [(0, 512)]), (600, [(0, 512), (462, 600)]), (975, [(0, 512), (462, 974), (924, 975)]), (0, [])],
)
def test_chunk_examples(n, expected):
    assert chunk_spans(n) == expected


def test_chunk_rejects_bad_geometry():
    with pytest.raises(ValueError):
        chunk_spans(10, window=50, overlap=50)


@settings(max_examples=200)
@given(st.integers(1, 3000), st.integers(2, 300), st.data())
def test_chunk_reconstruction(n, window, data):
    overlap = data.draw(st.integers(0, window - 1))
    tokens = [f"t{i}" for i in range(n)]
    segments = chunk_text(tokens, window, overlap)
    rebuilt = list(segments[0]) + [tok for seg in segments[1:] for tok in seg[overlap:]]
    assert rebuilt == tokens
    spans = chunk_spans(n, window, overlap)
    assert spans[-1][1] == n
    for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
        assert b0 - a1 == overlap
        assert b0 - a0 == window


def test_chunk_note_uses_tokenizer():
    assert chunk_note("a b c d", window=3, overlap=1) == [["a", "b", "c"], ["c", "d"]]
    assert chunk_note("abcd", window=3, overlap=1, tokenizer=list) == [["a", "b", "c"], ["c", "d"]]


@pytest.mark.parametrize("text, n", [("", 0), ("NIHSS 15 on arrival", 4), ("a\n b\t\tc", 3)])
def test_word_count(text, n):
    assert word_count(text) == n


@given(st.text(min_size=1), st.text(min_size=1))
def test_word_count_additive(a, b):
    assert word_count(a + " " + b) == word_count(a) + word_count(b)


def test_demographics():
    recs = (
        PatientRecord("a", "n", 1, age_years=60, sex="male", evt=True, structured_overrides={"iv_tpa": True}),
        PatientRecord("b", "n", 2, age_years=70, sex="male", evt=False),
        PatientRecord("c", "n", 3, age_years=80, sex="male", evt=None),
    )
    table = summarize_demographics(Cohort(recs)).to_dict()["all"]
    assert table["male"] == {"count": 3, "percent": 100.0, "missing_percent": 0.0}
    assert (table["age_years"]["median"], table["age_years"]["q1"], table["age_years"]["q3"]) == (70, 60, 80)
    assert format_median_iqr(table["age_years"]) == "70 (60, 80)"
    assert table["evt"]["missing_percent"] == 33.3
    assert table["iv_tpa"]["count"] == 1 and table["iv_tpa"]["missing_percent"] == 66.7
    assert table["mrs_90d"]["2"]["count"] == 1


def test_demographics_by_arm():
    cohort = Cohort(tuple(_rec(i, i % 7, sex="female") for i in range(70)))
    split = stratified_split(cohort, 0.2, 0)
    table = summarize_demographics(cohort, split).to_dict()
    assert table["exploration"]["n"] + table["test"]["n"] == 70
    assert table["test"]["female"]["percent"] == 100.0
