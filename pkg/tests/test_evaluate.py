import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from dbnlc import evaluate as ev

S1_PRED = (1.83, 2.54, 3.75, 3.99, 2.84, 3.66, 4.85, 0.5)
S1_ACT = (1.8, 1.83, 3.4, 2.2, 2, 4.25, 5, 1.5)


def test_s1_row():
    assert ev.rmse(S1_PRED, S1_ACT) == pytest.approx(0.86, abs=0.005)
    assert ev.r2(S1_PRED, S1_ACT) == pytest.approx(0.5024, abs=0.01)


def test_trivial_metrics():
    a = [1.0, 2.0, 4.0]
    assert ev.rmse(a, a) == 0.0
    assert ev.rmse([x + 0.3 for x in a], a) == pytest.approx(0.3)
    assert ev.r2(a, a) == 1.0
    assert ev.r2([np.mean(a)] * 3, a) == pytest.approx(0.0)


def test_metric_errors():
    with pytest.raises(ValueError, match="mismatch"):
        ev.rmse([1, 2], [1])
    with pytest.raises(ValueError, match="empty"):
        ev.rmse([], [])
    with pytest.raises(ValueError, match="undefined R²"):
        ev.r2([1, 2, 3], [2, 2, 2])


vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=10)


@settings(max_examples=80, deadline=None)
@given(vec, st.data())
def test_metric_properties(pred, data):
    act = data.draw(st.lists(st.floats(-10, 10, allow_nan=False), min_size=len(pred), max_size=len(pred)))
    assert ev.rmse(pred, act) >= 0
    assert ev.rmse(pred, act) == pytest.approx(ev.rmse(act, pred))
    assume(np.var(act) > 1e-6)
    r = ev.r2(pred, act)
    assert r <= 1.0 + 1e-12
    scale, shift = data.draw(st.floats(0.1, 5)), data.draw(st.floats(-5, 5))
    assert ev.r2([scale * p + shift for p in pred], [scale * a + shift for a in act]) == pytest.approx(r, abs=1e-6)


def _grid():
    targets = ("a", "b", "c")
    preds = {(f"S{i}", w): [i, w, 1.0] for i in range(1, 10) for w in (4, 5)}
    acts = {k: [v[0] + 0.5, v[1], 2.0] for k, v in preds.items() if k != ("S9", 5)}
    return targets, preds, acts


def test_report_with_missing_actuals():
    targets, preds, acts = _grid()
    rep = ev.build_report(preds, acts, targets)
    assert len(rep) == 18
    assert len(rep.with_metrics()) == 17
    s9 = [r for r in rep.rows if (r.subject, r.week) == ("S9", 5)][0]
    assert s9.rmse is None and s9.r2 is None and s9.predicted == (9.0, 5.0, 1.0)
    assert "--" in ev.format_table(rep).splitlines()[-1]


def test_report_partial_actual_row_has_no_metrics():
    rep = ev.build_report({("S1", 4): [1, 2]}, {("S1", 4): [1.0, float("nan")]}, ("a", "b"))
    assert rep.rows[0].rmse is None


def test_report_join_errors():
    assert len(ev.build_report({}, {}, ("a",))) == 0
    with pytest.raises(KeyError, match="S7"):
        ev.build_report({("S1", 4): [1.0]}, {("S7", 4): [1.0]}, ("a",))


def test_report_csv_roundtrip(tmp_path):
    targets, preds, acts = _grid()
    rep = ev.build_report(preds, acts, targets)
    ev.write_report_csv(rep, tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "subject,week,pred_a,pred_b,pred_c,actual_a,actual_b,actual_c,rmse,r2"
    assert lines[-1].endswith(",,,,,")
    back = ev.read_report_csv(tmp_path / "f.csv")
    assert [r.rmse for r in back.rows] == pytest.approx([r.rmse for r in rep.rows])


def test_negative_r2_not_clamped():
    pred = (3.39, 1.86, 3.1, 4.32, 1.66, 4.69, 4.73, 1.36)
    act = (4.4, 4.67, 5, 4.6, 4, 5, 5, 1.5)
    rep = ev.build_report({("S3", 4): pred}, {("S3", 4): act}, tuple("abcdefgh"))
    assert rep.rows[0].r2 < 0
    assert "-0.89" in ev.format_table(rep)
