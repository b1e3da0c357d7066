import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sldetect import evaluation as ev
from sldetect.corpus import Intensity, Label
from sldetect.evaluation import (
    HEATMAP_ROWS,
    ConfusionMatrix3,
    EmptyMatrix,
    IntensityHeatmap,
    LengthMismatch,
    MissingIntensity,
    MissingRawCounts,
    confusion,
    intensity_heatmap,
    metrics,
    remap_two_class,
)
from sldetect.synth import gen_heatmap_fixture

from oracles import brute_force_metrics, brute_force_remap


def assert_matches_oracle(cm, tol=1e-12):
    r = metrics(np.asarray(cm))
    o = brute_force_metrics(cm)
    assert np.allclose(r.recall, o["recall"], atol=tol, rtol=0)
    assert np.allclose(r.precision, o["precision"], atol=tol, rtol=0)
    assert np.allclose(r.f1, o["f1"], atol=tol, rtol=0)
    for key in ("uar", "macro_precision", "macro_f1", "accuracy", "weighted_f1", "weighted_precision"):
        assert abs(getattr(r, key) - o[key]) <= tol, key
    assert abs(r.macro_recall - r.uar) <= tol
    assert r.micro_f1 == r.accuracy


# --------------------------------------------------------------------------- confusion


def test_perfect_predictions_are_diagonal():
    labels = [0, 1, 2, 2, 1]
    assert np.array_equal(confusion(labels, labels).counts, np.diag([1, 2, 2]))


def test_constant_none_predictor():
    cm = confusion(["none"] * 4, ["laugh", "smile", "none", "smile"]).counts
    assert cm[:, :2].sum() == 0 and cm[:, 2].tolist() == [1, 2, 1]


def test_confusion_accepts_labels_and_indices():
    assert confusion([Label.LAUGH, "smile", 2], [0, Label.SMILE, "none"]) == ConfusionMatrix3(np.eye(3, dtype=int))


def test_confusion_length_mismatch():
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [0])


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=60), st.randoms())
def test_confusion_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = confusion([p for p, _ in pairs], [t for _, t in pairs])
    b = confusion([p for p, _ in shuffled], [t for _, t in shuffled])
    assert a == b


# --------------------------------------------------------------------------- metrics


def test_hand_computed_matrix():
    r = metrics([[5, 5, 0], [0, 10, 0], [0, 0, 10]])
    assert r.recall == pytest.approx((0.5, 1.0, 1.0))
    assert r.uar == pytest.approx(0.8333, abs=5e-5)
    assert r.uar == pytest.approx(2.5 / 3, abs=1e-15)
    assert r.precision[0] == 1.0 and r.precision[1] == pytest.approx(10 / 15)


def test_perfect_classifier():
    r = metrics(np.diag([10, 10, 10]))
    assert r.uar == r.accuracy == r.macro_f1 == r.weighted_precision == 1.0


def test_empty_matrix():
    with pytest.raises(EmptyMatrix):
        metrics(np.zeros((3, 3), dtype=int))


def test_unpredicted_class_has_zero_precision():
    r = metrics([[4, 0, 0], [3, 0, 0], [0, 0, 5]])
    assert r.precision[1] == 0.0 and r.f1[1] == 0.0


def test_oracle_on_random_matrices():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        cm = rng.integers(0, 30, (3, 3))
        cm[rng.integers(3)] *= rng.integers(0, 2)  # sometimes drop a class
        if cm.sum() == 0:
            cm[0, 0] = 1
        assert_matches_oracle(cm)


@given(hnp.arrays(np.int64, (3, 3), elements=st.integers(0, 50)), st.integers(1, 7))
def test_scale_invariance(cm, k):
    if cm.sum() == 0:
        return
    a, b = metrics(cm).to_dict(), metrics(cm * k).to_dict()
    for name in ("macro", "micro", "weighted"):
        for m in a[name]:
            assert a[name][m] == pytest.approx(b[name][m], abs=1e-12)
    assert a["uar"] == pytest.approx(b["uar"], abs=1e-12)


def test_report_serialization_round_trip():
    r = metrics([[3, 1, 0], [2, 7, 1], [0, 4, 9]])
    assert ev.MetricsReport.from_dict(r.to_dict()) == r
    csv_text = r.to_csv()
    assert csv_text.splitlines()[0] == "scope,precision,recall,f1,support"
    assert any(line.startswith("uar,") for line in csv_text.splitlines())


# --------------------------------------------------------------------------- heatmaps


def test_unanimous_laugh_high_row():
    hm = intensity_heatmap(["laugh"] * 3, ["laugh"] * 3, ["high"] * 3)
    assert hm.row("laugh-high").tolist() == [100.0, 0.0, 0.0]


def test_subtle_smile_row_percentages():
    hm = intensity_heatmap(["smile", "none", "none", "none"], ["smile"] * 4, [Intensity.SUBTLE] * 4)
    assert hm.row("smile-subtle").tolist() == [0.0, 25.0, 75.0]


def test_unsupported_rows_are_flagged():
    hm = intensity_heatmap(["laugh"], ["laugh"], ["low"])
    assert hm.supported.tolist() == [False, False, True, False, False, False, False, False]
    assert not hm.row("smile-high").any()


def test_missing_intensity_names_the_sample():
    with pytest.raises(MissingIntensity) as info:
        intensity_heatmap(["smile", "smile"], ["none", "smile"], [None, None], ["w1", "w2"])
    assert info.value.sample_id == "w2"


@given(st.lists(st.tuples(st.sampled_from(list(HEATMAP_ROWS)), st.integers(0, 2)), min_size=1, max_size=200))
def test_heatmap_rows_sum_and_collapse(samples):
    labels = [key.split("-")[0] for key, _ in samples]
    intens = [key.split("-")[1] if "-" in key else None for key, _ in samples]
    preds = [p for _, p in samples]
    hm = intensity_heatmap(preds, labels, intens)
    sums = hm.percentages.sum(axis=1)
    assert np.all(np.abs(sums[hm.supported] - 100) <= 0.1)
    assert np.all(sums[~hm.supported] == 0)
    assert hm.collapse() == confusion(preds, labels)


def test_heatmap_csv_round_trip_and_svg():
    hm = gen_heatmap_fixture(1, 0.7)
    assert IntensityHeatmap.from_csv(hm.to_csv()).collapse() == hm.collapse()
    svg = hm.to_svg("visual")
    assert svg.startswith("<svg") and svg.count("<rect") == 24


# --------------------------------------------------------------------------- remap


def test_remap_perfect_case():
    hm = gen_heatmap_fixture(0, 1.0)
    res = remap_two_class([hm])
    assert res.mean == 100.0 and res.std == 0.0


def test_remap_two_heatmap_fixture():
    laugh_only = {"laugh-high": None, "laugh-medium": None, "laugh-low": None}
    supports = dict.fromkeys(laugh_only, 10)
    a = gen_heatmap_fixture(0, dict.fromkeys(laugh_only, 0.6), supports)
    b = gen_heatmap_fixture(1, dict.fromkeys(laugh_only, 0.8), supports)
    res = remap_two_class([a, b])
    assert res.remapped == (60.0, 80.0)
    assert res.mean == pytest.approx(70.0, abs=1e-12) and res.std == pytest.approx(10.0, abs=1e-12)
    assert res.baseline_mean == pytest.approx(70.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_remap_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    hm = gen_heatmap_fixture(seed, rng.uniform(0, 1, 8).tolist())
    remapped, baseline = ev.remapped_laugh_accuracy(hm)
    oracle = brute_force_remap(hm)
    assert remapped == pytest.approx(oracle[0], abs=1e-12)
    assert baseline == pytest.approx(oracle[1], abs=1e-12)


def test_remap_counts_medium_smiles_predicted_smile():
    counts = np.zeros((8, 3), dtype=int)
    counts[HEATMAP_ROWS.index("laugh-low")] = [1, 1, 0]
    counts[HEATMAP_ROWS.index("smile-medium")] = [0, 2, 0]
    counts[HEATMAP_ROWS.index("smile-subtle")] = [0, 5, 0]
    res = remap_two_class([IntensityHeatmap.from_counts(counts)])
    assert res.remapped == (75.0,) and res.baseline == (50.0,)


def test_single_heatmap_std_is_zero():
    assert remap_two_class([gen_heatmap_fixture(4, 0.55)]).std == 0.0


def test_remap_requires_counts():
    hm = gen_heatmap_fixture(0, 0.5)
    with pytest.raises(MissingRawCounts):
        remap_two_class([IntensityHeatmap(hm.percentages, None, hm.supported)])


# --------------------------------------------------------------------------- report table


def test_config_names():
    assert ev.config_name("video", "scratch", "ndc") == "VSNDC"
    assert ev.config_name("fusion", "full-ft", "ifadv") == "FFIFA"
    assert ev.config_name("audio", "last-layers-ft", "NDC") == "AFNDC"


def test_report_table_layout():
    reports = {}
    for m in ("audio", "video", "fusion"):
        for r in ("scratch", "full-ft"):
            for d in ("ndc", "ifadv"):
                reports[ev.config_name(m, r, d)] = metrics(np.random.default_rng(len(reports)).integers(1, 9, (3, 3)))
    rows = ev.report_table(reports).splitlines()
    assert len(rows) == 5
    assert [r.split(",")[0] for r in rows[1:]] == ["Precision", "Recall", "F1-score", "UAR"]
    assert all(len(r.split(",")) == 13 for r in rows)
