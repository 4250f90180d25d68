import csv
import json

import numpy as np
import pytest
import torch

from ciuda.attributes import AttributeDictionary, select_top_l
from ciuda.encoders import ToyEncoder
from ciuda.encoders.base import l2_normalize
from ciuda.errors import ReportError
from ciuda.evaluation import (
    MetricsReport,
    PredictionRecord,
    TaskMetrics,
    accuracy,
    delta_pct,
    emit_report,
    final_accuracy,
    predict,
    read_aggregate,
    read_predictions,
    s1_accuracy_and_delta,
    step_level_accuracy,
    write_predictions,
)
from ciuda.prompts import assemble_prompt, class_probabilities

f64 = torch.float64


def test_accuracy_examples():
    assert final_accuracy([1, 2, 3], [1, 2, 3]) == 100.0
    assert final_accuracy([0, 1, 1, 0], [0, 1, 1, 1]) == 75.0
    with pytest.raises(ReportError):
        accuracy([], [])


def test_delta_examples():
    assert delta_pct([80.0, 88.0]) == [0.0, pytest.approx(10.0)]
    assert delta_pct([70.0, 70.0, 70.0]) == [0.0, 0.0, 0.0]
    assert delta_pct([0.0, 50.0]) == [None, None]


def _records(rng, T=3, per=8, p_correct=0.8):
    """Cumulative evaluation records: after step t every example of steps <= t is predicted."""
    recs = []
    for t in range(T):
        for s in range(t + 1):
            for i in range(per):
                y = s * 10 + i % 3
                pred = y if rng.random() < p_correct else -1
                recs.append(PredictionRecord(f"s{s}_{i}", y, pred, t, s))
    return recs


def test_step_and_s1_match_recount():
    recs = _records(np.random.default_rng(0))
    step = step_level_accuracy(recs, 3)
    s1, delta = s1_accuracy_and_delta(recs, 3)
    for t in range(3):
        rows = [r for r in recs if r.eval_step == t]
        assert step[t] == pytest.approx(100 * sum(r.true_class == r.predicted_class for r in rows) / len(rows))
        rows1 = [r for r in rows if r.example_step == 0]
        assert s1[t] == pytest.approx(100 * sum(r.true_class == r.predicted_class for r in rows1) / len(rows1))
        cur = [r for r in rows if r.example_step == t]
        assert step_level_accuracy(recs, 3, cumulative=False)[t] == pytest.approx(100 * sum(r.true_class == r.predicted_class for r in cur) / len(cur))
    assert delta[0] == 0.0
    # at step 1 the cumulative set is the step-1 set
    assert step[0] == s1[0]


def test_single_step_metrics_coincide():
    recs = _records(np.random.default_rng(1), T=1)
    tm = TaskMetrics.from_records(recs, 1)
    assert tm.final_accuracy == tm.step_accuracy[0] == tm.s1_accuracy[0]


def test_perfect_predictor_is_100_everywhere():
    tm = TaskMetrics.from_records(_records(np.random.default_rng(2), p_correct=1.1), 3)
    assert tm.step_accuracy == [100.0] * 3 == tm.s1_accuracy and tm.final_accuracy == 100.0


def _report():
    return MetricsReport("officehome", {
        "Ar->Cl": TaskMetrics([90.0, 85.0], [90.0, 80.0], 85.0),
        "Ar->Pr": TaskMetrics([70.0, 75.0], [70.0, 77.0], 75.0),
    })


def test_report_aggregates_and_round_trip(tmp_path):
    rep = _report()
    assert rep.avg_final == 80.0 and rep.avg_step == [80.0, 80.0] and rep.avg_s1 == [80.0, 78.5]
    files = emit_report(rep, tmp_path)
    assert {f.name for f in files} == {"metrics.json", "per_task.csv", "aggregate.csv"}
    assert not list(tmp_path.glob("*.png"))
    back = MetricsReport.from_dict(json.loads((tmp_path / "metrics.json").read_text()))
    assert back.to_dict() == rep.to_dict()
    agg = read_aggregate(tmp_path / "aggregate.csv")
    header = next(csv.reader(open(tmp_path / "aggregate.csv")))
    assert header == ["metric", "Ar->Cl", "Ar->Pr", "Avg."]
    for metric, row in agg.items():
        assert row["Avg."] == pytest.approx((row["Ar->Cl"] + row["Ar->Pr"]) / 2, abs=1e-4)
    assert agg["Final"]["Ar->Cl"] == 85.0 and agg["S-1 @ Step 2"]["Ar->Pr"] == 77.0
    rows = list(csv.DictReader(open(tmp_path / "per_task.csv")))
    assert [float(r["step_accuracy"]) for r in rows if r["task"] == "Ar->Pr"] == [70.0, 75.0]


def test_plots_only_when_requested(tmp_path):
    pytest.importorskip("matplotlib")
    files = emit_report(_report(), tmp_path, plots=True)
    assert {f.name for f in files if f.suffix == ".png"} == {"step_level.png", "s1.png", "s1_delta.png"}


def test_report_errors(tmp_path):
    with pytest.raises(ReportError):
        emit_report(MetricsReport("x"), tmp_path)
    with pytest.raises(ReportError):
        _report().merge(MetricsReport("office31", {"A->W": TaskMetrics([1.0], [1.0], 1.0)}))


def test_prediction_dump_round_trip(tmp_path):
    recs = _records(np.random.default_rng(3))
    assert read_predictions(write_predictions(recs, tmp_path / "p.csv")) == recs


# -- prediction -----------------------------------------------------------------

def _target(enc, N=6, M=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    keys = l2_normalize(torch.randn(N, 32, generator=g, dtype=f64))
    return AttributeDictionary("target", keys, 0.3 * torch.randn(N, M, 32, generator=g, dtype=f64))


NAMES = ["anchor", "bicycle", "candle", "dolphin"]


def test_predict_matches_composition_and_is_tau_invariant():
    enc = ToyEncoder()
    d = _target(enc)
    g = torch.Generator().manual_seed(9)
    for _ in range(10):
        z = l2_normalize(torch.randn(32, generator=g, dtype=f64))
        sel = select_top_l(d, z, 3)
        rows = torch.stack([
            enc.encode_text_soft(assemble_prompt(d.values.detach()[sel.indices], enc.class_tokens(n))) for n in NAMES
        ])
        want = int(class_probabilities(z, rows, 0.07).probs.argmax())
        assert predict(z, d, NAMES, enc, 3) == want
        assert predict(z, d, NAMES, enc, 3, tau=5.0) == want


def test_predict_dominant_cosine():
    enc = ToyEncoder(identity_text=True)
    d = AttributeDictionary("target", torch.eye(2, 32, dtype=f64), torch.zeros(2, 1, 32, dtype=f64))
    # with zero context the class embedding is the normalized class-token mean
    w = l2_normalize(enc.class_tokens("candle").mean(0))
    assert NAMES[predict(w, d, NAMES, enc, 1)] == "candle"


def test_predict_does_not_mutate_dictionary():
    enc = ToyEncoder()
    d = _target(enc)
    before = d.value_checksum(), d.key_checksum()
    predict(torch.randn(32, dtype=f64), d, NAMES, enc, 2)
    assert (d.value_checksum(), d.key_checksum()) == before
