import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gated_paraling.errors import (
    ConfigError,
    EmptyMatrix,
    EmptyPredictions,
    EmptySession,
    LengthMismatch,
    OutOfRange,
    SingleClass,
    TooFewSpeakers,
)
from gated_paraling.evaluation import (
    DEFAULT_BUDGETS,
    EXCLUDED,
    Segment,
    SessionRecord,
    accuracy,
    budget_name,
    class_names,
    cohen_kappa,
    condition_relabel,
    confusion_matrix,
    det_points,
    duration_budget_select,
    error_rates,
    evaluate_cv,
    labelled_sessions,
    majority_vote,
    map_mmse_to_class,
    parse_budgets,
    plan_folds,
    roc_auc,
)
from gated_paraling.gcnn_model import ModelConfig
from gated_paraling.training import TrainConfig

SESSION_CM = np.array([[189, 66], [65, 168]])  # session level: rows actual D/H, cols predicted D/H
SEGMENT_CM = np.array([[2340, 936], [1213, 1778]])


def _kappa_oracle(cm):
    """Exact rational (p_o - p_e) / (1 - p_e)."""
    cm = [[int(v) for v in row] for row in cm]
    n = sum(map(sum, cm))
    p_o = Fraction(sum(cm[i][i] for i in range(len(cm))), n)
    rows = [sum(r) for r in cm]
    cols = [sum(c) for c in zip(*cm)]
    p_e = Fraction(sum(r * c for r, c in zip(rows, cols)), n * n)
    return float((p_o - p_e) / (1 - p_e))


def _pair_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


# -- labels and conditions ---------------------------------------------------------------------


@pytest.mark.parametrize("score, label", [(0, "D"), (23, "D"), (24, "M"), (26, "M"), (27, "H"), (30, "H")])
def test_mmse_boundaries(score, label):
    assert map_mmse_to_class(score) == label


@pytest.mark.parametrize("score", [-1, 31])
def test_mmse_out_of_range(score):
    with pytest.raises(OutOfRange):
        map_mmse_to_class(score)


def test_condition_relabel_table():
    table = {
        "dvh": (1, EXCLUDED, 0),
        "dvmh": (1, 0, 0),
        "dmvh": (1, 1, 0),
        "3class": (0, 1, 2),
    }
    for cond, expected in table.items():
        assert tuple(condition_relabel(c, cond) for c in "DMH") == expected
    assert class_names("dvh") == ("H", "D")
    with pytest.raises(ValueError):
        condition_relabel("D", "dvx")


def test_session_record_derives_and_checks_labels():
    assert SessionRecord("s", "p", None, mmse=25).class_label == "M"
    with pytest.raises(ValueError):
        SessionRecord("s", "p", "H", mmse=10)
    with pytest.raises(ValueError):
        SessionRecord("s", "p", None)


# -- voting and budgets -------------------------------------------------------------------------------


def test_majority_vote():
    assert majority_vote([(1, 0.9), (1, 0.6), (0, 0.1)]) == 1
    assert majority_vote([(0, 0.4), (0, 0.3), (1, 0.99)]) == 0


def test_binary_tie_goes_to_mean_probability():
    assert majority_vote([(1, 0.9), (0, 0.4)]) == 1
    assert majority_vote([(1, 0.55), (0, 0.1)]) == 0


def test_multiclass_tie_goes_to_highest_mean_among_tied():
    votes = [(0, [0.5, 0.1, 0.4]), (2, [0.2, 0.1, 0.7])]
    assert majority_vote(votes) == 2


def test_empty_vote():
    with pytest.raises(EmptyPredictions):
        majority_vote([])


@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), min_size=1, max_size=15), st.randoms())
def test_vote_is_permutation_invariant(votes, rnd):
    votes = [(int(p >= 0.5), p) for _, p in votes]
    shuffled = list(votes)
    rnd.shuffle(shuffled)
    assert majority_vote(shuffled) == majority_vote(votes)


def _segs(durations):
    out, t = [], 0.0
    for d in durations:
        out.append(Segment(np.zeros((76, 1)), t, d))
        t += d
    return out


def test_budget_takes_earliest_segments():
    segs = _segs([4, 4, 4, 2])
    assert duration_budget_select(segs, 4) == segs[:1]
    assert duration_budget_select(segs, 8) == segs[:2]
    assert duration_budget_select(segs, 11) == segs[:2]
    assert duration_budget_select(segs[::-1], math.inf) == segs


def test_budget_always_keeps_one_segment():
    segs = _segs([4, 4])
    assert duration_budget_select(segs, 1.0) == segs[:1]
    with pytest.raises(EmptySession):
        duration_budget_select([], 4)


def test_budget_parsing():
    assert parse_budgets("4,8,20,40,60,300,all") == DEFAULT_BUDGETS
    assert [budget_name(b) for b in DEFAULT_BUDGETS] == ["4", "8", "20", "40", "60", "300", "all"]
    for bad in ("4,x", "0", "-3", ""):
        with pytest.raises(ConfigError):
            parse_budgets(bad)


# -- metrics ---------------------------------------------------------------------------------------


def test_reference_confusion_matrices():
    assert accuracy(SESSION_CM) == pytest.approx(357 / 488)
    assert accuracy(SESSION_CM) == pytest.approx(0.7316, abs=5e-4)
    assert abs(accuracy(SESSION_CM) - 0.731) < 1e-3  # the three-digit reference figure
    assert accuracy(SEGMENT_CM) == pytest.approx(0.6571, abs=5e-4)
    assert cohen_kappa(SESSION_CM) == pytest.approx(_kappa_oracle(SESSION_CM), abs=1e-12)
    assert cohen_kappa(SESSION_CM) == pytest.approx(0.462, abs=1e-3)


def test_confusion_matrix_is_actual_by_predicted():
    cm = confusion_matrix([1, 1, 0, 2], [1, 0, 0, 1], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 1], [0, 0, 0]]
    with pytest.raises(LengthMismatch):
        confusion_matrix([1], [1, 0], 2)


@given(st.lists(st.integers(0, 40), min_size=9, max_size=9))
def test_metric_ranges(counts):
    cm = np.array(counts).reshape(3, 3)
    if cm.sum() == 0:
        with pytest.raises(EmptyMatrix):
            accuracy(cm)
        return
    assert 0.0 <= accuracy(cm) <= 1.0
    k = cohen_kappa(cm)
    assert -1.0 <= k <= 1.0
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    if rows @ cols == cm.sum() ** 2:  # chance agreement is total: kappa is defined as 0
        assert k == 0.0
    else:
        assert k == pytest.approx(_kappa_oracle(cm), abs=1e-9)


def test_kappa_limits():
    assert cohen_kappa([[10, 0], [0, 10]]) == pytest.approx(1.0)
    assert cohen_kappa([[5, 5], [5, 5]]) == pytest.approx(0.0)
    assert cohen_kappa([[10, 0], [0, 0]]) == 0.0  # chance agreement is total


def test_error_rates():
    fpr, fnr = error_rates([[8, 2], [1, 9]])
    assert (fpr, fnr) == pytest.approx((0.2, 0.1))


def test_roc_on_simple_cases():
    _, auc = roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert auc == 1.0
    _, auc = roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])
    assert auc == 0.0
    curve, auc = roc_auc([0.5] * 4, [0, 1, 0, 1])
    assert auc == 0.5
    assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
    assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0


@given(
    st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=120)
)
def test_trapezoid_auc_equals_pair_counting(pairs):
    scores = [s for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        with pytest.raises(SingleClass):
            roc_auc(scores, labels)
        return
    _, auc = roc_auc(scores, labels)
    assert abs(auc - _pair_auc(scores, labels)) < 1e-9


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=80))
def test_det_is_monotone(pairs):
    scores = [s for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    pts = det_points(scores, labels)
    thr = [t for t, _, _ in pts]
    fpr = [f for _, f, _ in pts]
    fnr = [m for _, _, m in pts]
    assert thr == sorted(thr)
    assert all(a >= b for a, b in zip(fpr, fpr[1:]))
    assert all(a <= b for a, b in zip(fnr, fnr[1:]))
    assert pts[-1] == (math.inf, 0.0, 1.0)


# -- fold planning --------------------------------------------------------------------------------------


def _sessions(n_speakers, per_speaker=2, classes="DH"):
    out = []
    for i in range(n_speakers):
        cls = classes[i % len(classes)]
        for j in range(per_speaker):
            out.append(SessionRecord(f"{cls}{i}_{j}", f"spk{i}", cls))
    return out


def test_folds_partition_speakers():
    sessions = _sessions(40)
    plan = plan_folds(sessions, 10, seed=0)
    seen = set()
    for k in range(10):
        test = plan.test_speakers(k)
        train = plan.train_speakers(k)
        assert test and not (test & train)
        assert test | train == {s.speaker_id for s in sessions}
        assert not (test & seen)
        seen |= test
    assert len(seen) == 40


def test_fold_sizes_are_balanced():
    plan = plan_folds(_sessions(267, per_speaker=1, classes="DMH"), 10)
    sizes = sorted(len(plan.test_speakers(k)) for k in range(10))
    assert sizes[0] == 26 and sizes[-1] == 27


def test_fold_plan_is_deterministic():
    sessions = _sessions(30)
    assert plan_folds(sessions, 10, 4).assignment == plan_folds(list(reversed(sessions)), 10, 4).assignment


def test_class_balance_across_folds():
    plan = plan_folds(_sessions(40), 10)
    for k in range(10):
        train, test = plan.split(_sessions(40), k)
        labels = {s.class_label for s in test}
        assert labels == {"D", "H"}


def test_too_few_speakers():
    with pytest.raises(TooFewSpeakers):
        plan_folds(_sessions(5), 10)


@given(st.integers(10, 60), st.integers(1, 3), st.integers(0, 1000))
def test_plan_is_a_partition_for_any_dataset(n, per, seed):
    sessions = _sessions(n, per, "DMH")
    plan = plan_folds(sessions, 10, seed)
    assert set(plan.assignment) == {s.speaker_id for s in sessions}
    assert set(plan.assignment.values()) == set(range(10))
    for k in range(10):
        train, test = plan.split(sessions, k)
        assert len(train) + len(test) == len(sessions)
        assert not ({s.speaker_id for s in train} & {s.speaker_id for s in test})


# -- cross-validation driver --------------------------------------------------------------------------------

TINY = ModelConfig(num_blocks=2, kernels=4, dense_units=8)


def _cv_data(n_speakers=12, classes="DH", seed=0):
    rng = np.random.default_rng(seed)
    sessions, segments = [], {}
    for i in range(n_speakers):
        cls = classes[i % len(classes)]
        rec = SessionRecord(f"s{i}", f"spk{i}", cls)
        sessions.append(rec)
        shift = {"D": -1.0, "M": 0.0, "H": 1.0}[cls]
        segments[rec.session_id] = [
            Segment(rng.standard_normal((76, 60)) + shift, 4.0 * j, 4.0) for j in range(3)
        ]
    return sessions, segments


def test_cv_report_structure():
    sessions, segments = _cv_data()
    result = evaluate_cv(
        sessions, segments, "dvh", TINY, TrainConfig(epochs=3, batch_size=8), budgets=(4.0, 8.0, math.inf), k=4
    )
    report = result.report
    assert list(report.budgets) == [4.0, 8.0, math.inf]
    for m in report.budgets.values():
        assert len(m.fold_cms) == 4
        np.testing.assert_array_equal(m.pooled_cm, sum(m.fold_cms))
        assert m.pooled_cm.sum() == 12
        assert 0 <= m.mean_accuracy <= 1
    assert report.segment_cm.sum() == 36
    for entry in report.audit:
        assert not set(entry["train_speakers"]) & set(entry["test_speakers"])
    assert report.budgets[math.inf].mean_accuracy >= 0.9


def test_cv_with_pretrained_models_reproduces_metrics():
    sessions, segments = _cv_data()
    cfg = TrainConfig(epochs=2, batch_size=8)
    first = evaluate_cv(sessions, segments, "dvh", TINY, cfg, budgets=(4.0,), k=3)
    models = {k: r.model for k, r in first.fold_results.items()}
    second = evaluate_cv(sessions, segments, "dvh", TINY, cfg, budgets=(4.0,), k=3, models=models)
    assert not second.fold_results
    np.testing.assert_array_equal(first.report.budgets[4.0].pooled_cm, second.report.budgets[4.0].pooled_cm)
    assert first.report.budgets[4.0].session_scores == second.report.budgets[4.0].session_scores


def test_condition_filters_sessions():
    sessions, segments = _cv_data(15, "DMH")
    kept, labels = labelled_sessions(sessions, segments, "dvh")
    assert {s.class_label for s in kept} == {"D", "H"}
    kept, labels = labelled_sessions(sessions, segments, "3class")
    assert sorted(set(labels.values())) == [0, 1, 2]


def test_three_class_cv_runs():
    sessions, segments = _cv_data(15, "DMH")
    cfg3 = ModelConfig(num_blocks=2, kernels=4, dense_units=8, classes=3)
    result = evaluate_cv(sessions, segments, "3class", cfg3, TrainConfig(epochs=2, batch_size=8), budgets=(8.0,), k=3)
    assert result.report.budgets[8.0].pooled_cm.shape == (3, 3)
    with pytest.raises(ValueError):
        evaluate_cv(sessions, segments, "3class", TINY, budgets=(8.0,), k=3)
