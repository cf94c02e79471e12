from __future__ import annotations

import json

import numpy as np
import pytest

from cope.features import (
    FEATURE_NAMES,
    FeatureEncoder,
    FeatureMatrix,
    Grammar,
    StructuredFeatures,
    SvrModel,
    default_grammar,
    encode_features,
    extract_features,
    predict_clinical_ml,
    round_half_even_clamped,
    train_svr,
)


def test_labelled_numeric():
    f = extract_features("Baseline NIHSS: 15. LDL 112 mg/dL. HbA1c 6.4%.")
    assert f.nihss_baseline == 15 and f.ldl == 112.0 and f.hba1c == 6.4


def test_absence_means_missing():
    f = extract_features("Patient admitted with left-sided weakness.")
    assert f.ldl is None and f.hba1c is None and f.diabetes is None


def test_negation():
    f = extract_features("Past medical history: hypertension. Denies diabetes. No atrial fibrillation.")
    assert f.hypertension is True and f.diabetes is False and f.atrial_fibrillation is False


def test_last_mention_wins(caplog):
    f = extract_features("Discharge NIHSS 9. Corrected: discharge NIHSS 7.")
    assert f.nihss_discharge == 7


def test_overrides_take_precedence():
    f = extract_features("Baseline NIHSS: 15", overrides={"nihss_baseline": "4", "evt": "yes", "bogus": 1})
    assert f.nihss_baseline == 4 and f.evt is True


def test_enum_fields():
    f = extract_features("Thrombectomy achieved TICI 2b reperfusion. Discharged to skilled nursing facility.")
    assert f.tici == "2b" and f.discharge_destination == "snf"


def test_out_of_range_nihss_rejected():
    with pytest.raises(ValueError):
        StructuredFeatures(nihss_baseline=43)


def test_grammar_file_is_versioned():
    g = default_grammar()
    assert g.version == "1"
    assert set(g.numeric) | set(g.boolean) | set(g.enum) == set(FEATURE_NAMES)


def test_grammar_from_toml_custom():
    g = Grammar.from_toml('version = "x"\n[numeric.ldl]\nkind = "float"\nmin = 0\nmax = 500\npatterns = ["cholesterol (\\\\d+)"]\n')
    assert extract_features("cholesterol 90", grammar=g).ldl == 90.0


def test_synth_notes_extract_exactly(synth200):
    for rec in synth200.cohort:
        assert extract_features(rec.note_text) == synth200.profiles[rec.id].features


def test_encode_tici_ordinal_and_onehot():
    m = encode_features([StructuredFeatures(tici="2b", discharge_destination="hospice"), StructuredFeatures(tici="0", discharge_destination="home")])
    names = [c.name for c in m.column_spec]
    assert m.rows[0, names.index("tici")] == 3.0
    assert m.rows[0, names.index("discharge_destination=hospice")] == 1.0
    assert m.rows[1, names.index("discharge_destination=home")] == 1.0


def test_median_imputation_and_indicator():
    feats = [StructuredFeatures(age_years=a) for a in (60, 70, 80, None)]
    enc = FeatureEncoder().fit(feats)
    m = enc.transform(feats)
    names = [c.name for c in m.column_spec]
    age = names.index("age_years")
    assert enc.decode(m.rows[3])["age_years"] == pytest.approx(70.0)
    assert m.rows[:, names.index("age_years__missing")].tolist() == [0, 0, 0, 1]
    assert m.missing_mask[3, age] and not m.missing_mask[0, age]


def test_identical_rows_identical_vectors():
    f = StructuredFeatures(age_years=50, sex="female", evt=True)
    m = encode_features([f, f, StructuredFeatures(age_years=70)])
    assert np.array_equal(m.rows[0], m.rows[1])


def test_all_missing_column_kept(caplog):
    m = encode_features([StructuredFeatures(age_years=50), StructuredFeatures(age_years=60)])
    names = [c.name for c in m.column_spec]
    assert "ldl" in names and "ldl__missing" in names
    assert "missing in every training row" in caplog.text


def test_decode_roundtrip_complete_rows(synth28):
    feats = [p.features for p in synth28.profiles.values() if p.features.evt]
    enc = FeatureEncoder().fit(feats)
    m = enc.transform(feats)
    for f, row in zip(feats, m.rows):
        decoded = enc.decode(row)
        for key, value in f.populated().items():
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                assert decoded[key] == pytest.approx(value)
            else:
                assert decoded[key] == value


def test_matrix_json_roundtrip():
    m = encode_features([StructuredFeatures(age_years=50, tici="3"), StructuredFeatures(sex="male")])
    again = FeatureMatrix.from_dict(json.loads(json.dumps(m.to_dict())))
    assert np.array_equal(again.rows, m.rows) and again.column_spec == m.column_spec


def test_encoder_requires_rows():
    with pytest.raises(ValueError):
        encode_features([])


def test_svr_constant_labels():
    X = np.random.default_rng(0).normal(size=(30, 3))
    model = train_svr(X, [3] * 30, C=1.0, epsilon=0.5)
    assert np.all(np.abs(model.raw_scores(X) - 3) <= 0.5)
    assert np.linalg.norm(model.weights) < 0.05


def test_svr_one_dimensional():
    model = train_svr(np.array([[0.0], [1.0], [2.0]]), [0, 1, 2], C=100.0, epsilon=0.0)
    assert abs(model.raw_scores([[1.5]])[0] - 1.5) <= 0.1


def test_svr_deterministic_and_monotone():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 4))
    y = X @ [1, -1, 0.5, 0] + 3
    a = train_svr(X, y, seed=7)
    b = train_svr(X, y, seed=7)
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias
    assert all(x >= y for x, y in zip(a.objective_trace, a.objective_trace[1:]))


def test_svr_rejects_bad_input():
    with pytest.raises(ValueError):
        train_svr(np.array([[np.nan], [1.0]]), [0, 1])
    with pytest.raises(ValueError):
        train_svr(np.array([[1.0]]), [0])


def test_svr_json_roundtrip():
    model = train_svr(np.array([[0.0], [1.0], [2.0]]), [0, 1, 2], epochs=50)
    again = SvrModel.from_dict(json.loads(model.to_json()))
    assert np.array_equal(again.weights, model.weights) and again.objective_trace == model.objective_trace


@pytest.mark.parametrize("raw, expected", [(2.5, 2), (3.5, 4), (-0.7, 0), (6.9, 6), (1.49, 1)])
def test_rounding(raw, expected):
    assert round_half_even_clamped(raw) == expected


def test_predict_clinical_ml_record():
    model = SvrModel(np.array([1.0]), 0.0, 1.0, 0.5)
    rec = predict_clinical_ml(model, np.array([2.5]), patient_id="p", true_mrs=3)
    assert (rec.engine, rec.predicted_mrs, rec.raw_score, rec.true_mrs) == ("clinical_ml", 2, 2.5, 3)
    with pytest.raises(ValueError, match="width"):
        predict_clinical_ml(model, np.array([1.0, 2.0]))
