import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iocseq.explain import (AttributionReport, FamilyImportance, completeness_check,
                            completeness_gap, embedding_attributions, family_importance,
                            integrated_gradients, render_report, riemann_ig)
from iocseq.forest import ForestConfig, fit_forest
from iocseq.telemetry import PAD_STEP, WindowInstance, stack_windows


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 400), seed=st.integers(0, 10**6))
def test_linear_model_is_exact_for_any_steps(m, seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(7)
    x = rng.standard_normal(7)
    ig = riemann_ig(lambda pts: np.broadcast_to(c, pts.shape), x, np.zeros(7), m)
    np.testing.assert_allclose(ig, c * x, rtol=1e-12, atol=1e-12)
    # completeness for F(x) = c.x is exact too
    assert abs(ig.sum() - c @ x) < 1e-9


@pytest.mark.parametrize("m", [1, 2, 10, 300])
def test_right_endpoint_rule_on_square(m):
    # F(x) = x^2 in one dimension: right sum gives x^2 (m + 1) / m
    x = np.array([1.7])
    ig = riemann_ig(lambda pts: 2 * pts, x, np.zeros(1), m)
    assert ig[0] == pytest.approx(1.7 ** 2 * (m + 1) / m, rel=1e-12)


def test_coordinates_equal_to_baseline_get_zero():
    x = np.array([0.0, 2.0, 0.0])
    ig = riemann_ig(lambda pts: np.ones_like(pts) * 5.0, x, np.zeros(3), 7)
    assert ig[0] == 0.0 and ig[2] == 0.0


def test_steps_must_be_positive(trained_transformer, small_scenario):
    with pytest.raises(ValueError):
        riemann_ig(lambda p: p, np.ones(2), np.zeros(2), 0)
    _, _, test = small_scenario
    with pytest.raises(ValueError):
        integrated_gradients(trained_transformer, test.windows[0], steps=0)


def test_forest_is_rejected(small_scenario):
    _, _, test = small_scenario
    X = np.random.default_rng(0).standard_normal((10, 3))
    rf = fit_forest(ForestConfig(n_trees=2), X, np.arange(10) % 2)
    with pytest.raises(TypeError, match="not differentiable"):
        integrated_gradients(rf, test.windows[0])


def test_all_pad_window_has_zero_attributions(trained_transformer):
    w = trained_transformer.config.w
    win = WindowInstance([PAD_STEP] * w, None, ("o", "u", 0), [True] * w)
    attr, f_x, f_b = embedding_attributions(trained_transformer, stack_windows([win]), [0], 20)
    assert not attr.any()
    assert f_x[0] == pytest.approx(f_b[0])


def test_report_covers_every_real_occurrence(trained_transformer, small_scenario):
    _, _, test = small_scenario
    win = next(w for w in test.windows if 1 < w.n_real < w.w)
    rep = integrated_gradients(trained_transformer, win, steps=20)
    expected = [(t, e) for t, (s, real) in enumerate(zip(win.steps, win.pad_mask)) if real
                for e in s.event_ids]
    assert [(t, e) for t, e, _, _ in rep.events] == expected
    assert len(rep.numeric) == 3 * win.n_real
    assert all(v == 0.0 for _, _, v in rep.numeric)
    assert completeness_gap(rep) >= 0


def test_report_is_deterministic(trained_transformer, small_scenario):
    _, _, test = small_scenario
    a = integrated_gradients(trained_transformer, test.windows[5], steps=30)
    b = integrated_gradients(trained_transformer, test.windows[5], steps=30)
    assert a.to_json() == b.to_json()


def test_completeness_gap_is_recomputed_consistently(trained_transformer, small_scenario):
    _, _, test = small_scenario
    rng = np.random.default_rng(0)
    for i in rng.choice(len(test), 4, replace=False):
        rep = integrated_gradients(trained_transformer, test.windows[i], steps=100)
        gap = completeness_check(rep, trained_transformer, test.windows[i])
        assert gap == pytest.approx(completeness_gap(rep), abs=1e-7)


def test_riemann_error_shrinks_with_steps(trained_transformer, small_scenario):
    # right-endpoint sums converge at rate 1/m: ten times the steps should cut
    # the distance to a fine-grid oracle by roughly ten
    _, _, test = small_scenario
    rng = np.random.default_rng(1)
    batch = stack_windows([test.windows[i] for i in rng.choice(len(test), 3, replace=False)])
    pred = trained_transformer.predict_proba(batch).argmax(axis=1)
    fine, fx, fb = embedding_attributions(trained_transformer, batch, pred, steps=5000,
                                          max_rows=2500)
    err = {}
    for m in (30, 300):
        coarse, _, _ = embedding_attributions(trained_transformer, batch, pred, steps=m)
        err[m] = np.abs(coarse - fine).max()
    assert err[300] <= 0.2 * err[30]
    gap = np.abs(fine.sum(axis=(1, 2, 3)) - (fx - fb))
    assert (gap <= 0.01 * np.abs(fx - fb) + 1e-4).all()


def test_target_out_of_range(trained_transformer, small_scenario):
    _, _, test = small_scenario
    with pytest.raises(ValueError):
        integrated_gradients(trained_transformer, test.windows[0], target=99, steps=2)


def test_family_importance_single_instance(trained_transformer, small_scenario):
    _, _, test = small_scenario
    probs = trained_transformer.predict_proba(test.batch())
    i = 7
    c = int(probs[i].argmax())
    fam = family_importance(trained_transformer, [test.windows[i]], c, steps=40)
    rep = integrated_gradients(trained_transformer, test.windows[i], target=c, steps=40)
    sums = {}
    for _, _, name, v in rep.events:
        sums[name] = sums.get(name, 0.0) + v
    assert fam.n_instances == 1
    for name, mean, std, count in fam.rows:
        assert mean == pytest.approx(sums[name], abs=1e-9)
        assert std == 0.0 and count == 1
    means = [r[1] for r in fam.rows]
    assert means == sorted(means, reverse=True)


def test_family_importance_duplicated_set(trained_transformer, small_scenario):
    _, _, test = small_scenario
    wins = test.windows[:12]
    c = int(trained_transformer.predict_proba(stack_windows(wins)).argmax(axis=1)[0])
    once = family_importance(trained_transformer, wins, c, steps=20)
    twice = family_importance(trained_transformer, wins + wins, c, steps=20)
    assert [r[0] for r in once.rows] == [r[0] for r in twice.rows]
    for a, b in zip(once.rows, twice.rows):
        assert a[1] == pytest.approx(b[1], abs=1e-12)
        assert a[2] == pytest.approx(b[2], abs=1e-12)
        assert b[3] == 2 * a[3] > 0


def test_family_importance_needs_a_positive(trained_transformer, small_scenario):
    _, _, test = small_scenario
    wins = test.windows[:3]
    pred = set(trained_transformer.predict_proba(stack_windows(wins)).argmax(axis=1).tolist())
    missing = next(c for c in range(trained_transformer.config.n_out) if c not in pred)
    with pytest.raises(ValueError):
        family_importance(trained_transformer, wins, missing, steps=2)


def _report(values):
    events = [(i, i + 2, f"e{i}", v) for i, v in enumerate(values)]
    return AttributionReport(("o", "u", 0), 0, 0, 0.9, 0.9, 0.1, 10, events, [])


def test_render_max_normalizes():
    text, payload = render_report(_report([0.2, 0.8, -0.1]))
    lines = text.splitlines()[2:]
    assert lines[1].split()[2] == "1.000"
    assert lines[0].split()[2] == "0.250"
    assert lines[2].split()[2] == "0.000"
    assert [e["importance"] for e in payload["events"]] == [0.2, 0.8, -0.1]


def test_render_all_zero_report():
    text, _ = render_report(_report([0.0, 0.0]))
    assert [l.split()[2] for l in text.splitlines()[2:]] == ["0.000", "0.000"]


def test_report_json_roundtrip():
    rep = _report([0.5, -0.25])
    back = AttributionReport.from_json(rep.to_json())
    assert back.events == rep.events and back.key == rep.key
    assert back.f_input == rep.f_input and back.f_baseline == rep.f_baseline


def test_family_json_roundtrip_and_render():
    fam = FamilyImportance(2, "WannaCry", 5, [("dga", 0.4, 0.1, 5), ("cryptomining", 0.1, 0.0, 3)])
    assert FamilyImportance.from_json(fam.to_json()) == fam
    text, payload = render_report(fam)
    assert "WannaCry" in text and payload["events"][0]["event"] == "dga"
    assert text.splitlines()[2].split()[1] == "1.000"


def test_fixture_model_is_trained(trained_transformer, small_scenario):
    _, _, test = small_scenario
    probs = trained_transformer.predict_proba(test.batch())
    assert (probs.argmax(axis=1) == test.targets(trained_transformer.classes)).mean() > 0.9
