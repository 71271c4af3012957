from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proto_ood.datasets import ImageGroup, ScoredPrediction
from proto_ood.evaluator import (
    EvaluationError,
    MetricsReport,
    auroc,
    evaluate,
    evaluate_groups,
    fpr_at_95_tpr,
    protocol_filter,
)


def pairwise_auroc(id_scores, ood_scores):
    total = Fraction(0)
    for a in id_scores:
        for b in ood_scores:
            total += 1 if a > b else Fraction(1, 2) if a == b else 0
    return float(total / (len(id_scores) * len(ood_scores)))


def sweep_fpr95(id_scores, ood_scores, tpr=Fraction(95, 100)):
    """Try every candidate threshold; keep the largest one reaching the TPR."""
    best = None
    for x in sorted(set(id_scores) | set(ood_scores)):
        if Fraction(sum(s >= x for s in id_scores), len(id_scores)) >= tpr:
            best = x
    fpr = sum(s >= best for s in ood_scores) / len(ood_scores)
    return fpr, best


def test_auroc_simple_cases():
    assert auroc([2.0, 3.0], [0.0, 1.0]) == 1.0
    assert auroc([1.0, 1.0], [1.0]) == 0.5
    assert auroc([3.0, 1.0], [2.0]) == 0.5
    with pytest.raises(EvaluationError):
        auroc([], [1.0])


def test_fpr_simple_cases():
    assert fpr_at_95_tpr([1.0] * 10, [0.0] * 10)[0] == 0.0
    fpr, thr = fpr_at_95_tpr(list(range(1, 21)), [1, 2, 3])
    assert thr == 2 and fpr == pytest.approx(2 / 3)
    assert sweep_fpr95(list(range(1, 21)), [1, 2, 3]) == (2 / 3, 2)
    with pytest.raises(EvaluationError):
        fpr_at_95_tpr([1.0], [])


@pytest.mark.parametrize("n", [20, 100, 1000])
def test_fpr_identical_distributions(n):
    rng = np.random.default_rng(n)
    scores = list(rng.standard_normal(n))
    fpr, _ = fpr_at_95_tpr(scores, scores)
    assert abs(fpr - 0.95) <= 1 / n + 1e-12
    assert (fpr, fpr_at_95_tpr(scores, scores)[1]) == sweep_fpr95(scores, scores)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=60), st.lists(st.integers(0, 15), min_size=1, max_size=60))
def test_metrics_match_oracles_with_ties(id_scores, ood_scores):
    assert auroc(id_scores, ood_scores) == pairwise_auroc(id_scores, ood_scores)
    assert fpr_at_95_tpr(id_scores, ood_scores) == sweep_fpr95(id_scores, ood_scores)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=40), st.lists(st.floats(-5, 5), min_size=1, max_size=40),
       st.floats(-5, 5))
def test_fpr_monotone_when_adding_ood_above_threshold(id_scores, ood_scores, extra):
    fpr, thr = fpr_at_95_tpr(id_scores, ood_scores)
    if extra >= thr:
        assert fpr_at_95_tpr(id_scores, ood_scores + [extra])[0] >= fpr


def _groups():
    return [
        ImageGroup(0, "id_dataset", 2, [ScoredPrediction(0, "id_dataset", c, e)
                                         for c, e in ((0.3, 0.2), (0.9, 2.0), (0.8, 1.9))]),
        ImageGroup(1, "ood_dataset", 0, [ScoredPrediction(1, "ood_dataset", c, e)
                                          for c, e in ((0.1, 0.5), (0.95, 1.0))]),
    ]


def test_protocol_a_is_identity():
    groups = _groups()
    assert protocol_filter(groups, "A") == [p for g in groups for p in g.predictions]


def test_protocol_b_drops_low_scores_on_id_only():
    kept = protocol_filter(_groups(), "b")
    assert [p.cls_score for p in kept if p.source == "id_dataset"] == [0.9, 0.8]
    assert [p.cls_score for p in kept if p.source == "ood_dataset"] == [0.1, 0.95]


def test_protocol_b_ties_keep_input_order():
    grp = ImageGroup(0, "id_dataset", 2, [ScoredPrediction(0, "id_dataset", 0.5, e) for e in (1.0, 2.0, 3.0)])
    assert [p.ood_score for p in protocol_filter([grp], "B")] == [1.0, 2.0]


def test_protocol_b_k_exceeding_predictions_keeps_all(caplog):
    grp = ImageGroup(0, "id_dataset", 5, [ScoredPrediction(0, "id_dataset", 0.5, 1.0)])
    assert len(protocol_filter([grp], "B")) == 1
    assert "exceeds" in caplog.text


def test_protocol_b_on_constructed_dump_not_worse():
    # dropped predictions are low-E background hits, so B cannot raise FPR95
    groups = _groups()
    a, b = evaluate_groups(groups, "A"), evaluate_groups(groups, "B")
    assert b.fpr95 <= a.fpr95
    assert (a.fpr95, a.threshold) == sweep_fpr95([0.2, 2.0, 1.9], [0.5, 1.0])
    assert (b.fpr95, b.threshold) == sweep_fpr95([2.0, 1.9], [0.5, 1.0])
    assert b.n_id <= a.n_id and b.n_ood == a.n_ood


def test_report_roundtrip(tmp_path):
    rep = MetricsReport("B", 0.1234567890123, 0.987654321, 1.0000000001, 10, 20)
    rep.write(tmp_path / "r.json")
    assert MetricsReport.read(tmp_path / "r.json") == rep


def test_evaluate_pipeline(default_splits, trained_default):
    state, _ = trained_default
    _, id_eval, ood_eval = default_splits
    a = evaluate(state, id_eval, ood_eval, "A")
    b = evaluate(state, id_eval, ood_eval, "B")
    assert b.n_id <= a.n_id and a.n_ood == b.n_ood
    assert evaluate(state, id_eval, ood_eval, "B") == b
    for rep in (a, b):
        assert 0 <= rep.fpr95 <= 1 and 0 <= rep.auroc <= 1


def test_id_against_itself_is_chance(default_splits, trained_default):
    from proto_ood.datasets import DatasetSplit

    state, _ = trained_default
    id_eval = default_splits[1]
    as_ood = DatasetSplit(id_eval.records, id_eval.t, id_eval.h, "ood_eval")
    rep = evaluate(state, id_eval, as_ood, "A")
    assert abs(rep.auroc - 0.5) <= 0.05
