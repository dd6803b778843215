import math

import numpy as np
import pytest

from arithtrace.equations import Equation, EquationTemplate, instantiate_template
from arithtrace.intervention import (
    ActualWeights,
    FitError,
    InterventionError,
    SweepResult,
    SweepSample,
    actual_weights,
    case_study,
    data_support,
    fidelity,
    fit_inverse,
    manipulate_forward,
    manipulate_rows,
    manipulation_hook,
    sweep,
    write_case_study,
)
from arithtrace.model import InterventionHook, ModelConfig, TransformerModel, capture_activations, forward
from arithtrace.tracing import MostCorrelatedDirection, trace

TEMPLATE = EquationTemplate.parse("{a:3}-({b:3}-{c:3})")
BASE = {"a": 617, "b": 555, "c": 602}
CFG = ModelConfig(num_layers=2, model_dim=16, num_heads=2, ffn_dim=32, max_sequence_length=16, dropout=0.0, seed=1)


def _triple(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(1, 6)), int(rng.integers(2, 40))
    H = rng.normal(size=(n, d)) * rng.uniform(0.1, 10)
    p = rng.normal(size=d)
    p /= np.linalg.norm(p)
    r = float(rng.uniform(-3, 3))
    return H, p, r


@pytest.mark.parametrize("seed", range(100))
def test_manipulation_algebra(seed):
    H, p, r = _triple(seed)
    Hp = manipulate_rows(H, p, r)
    before, after = H @ p, Hp @ p
    scale = np.maximum(np.abs(r * before), 1e-12)
    assert np.all(np.abs(after - r * before) / scale < 1e-5 + 1e-12 / scale)
    # complement untouched
    perp_before = H - np.outer(before, p)
    perp_after = Hp - np.outer(after, p)
    assert np.max(np.abs(perp_after - perp_before)) <= 1e-5 * max(1.0, np.max(np.abs(H)))
    assert np.array_equal(manipulate_rows(H, p, 1.0), H)


def test_per_row_factors():
    H, p, _ = _triple(0)
    H = np.vstack([H, H])
    rs = np.linspace(-1, 2, len(H))
    out = manipulate_rows(H, p, rs)
    np.testing.assert_allclose(out @ p, rs * (H @ p), rtol=1e-10, atol=1e-12)


@pytest.fixture(scope="module")
def model():
    m = TransformerModel(CFG)
    m.scaler.mean, m.scaler.std = 500.0, 400.0
    return m


@pytest.fixture(scope="module")
def traced(model):
    rng = np.random.default_rng(0)
    eqs = [
        instantiate_template(TEMPLATE, {s: int(rng.integers(100, 1000)) for s in "abc"})
        for _ in range(150)
    ]
    return trace(capture_activations(model, eqs, [1, 2]), k=5)


def test_r1_is_bit_identical_through_model(model, traced):
    toks = [instantiate_template(TEMPLATE, BASE).tokens()]
    plain, _ = forward(model, toks)
    for layer in (1, 2):
        p = traced.pcas[layer].component(1)
        hooked, _ = forward(model, toks, hook=manipulation_hook(layer, p, 1.0))
        assert np.array_equal(plain, hooked)


@pytest.mark.parametrize("seed", range(20))
def test_composition_multiplies_factors(model, traced, seed):
    rng = np.random.default_rng(seed)
    layer = int(rng.integers(1, 3))
    p = traced.pcas[layer].component(int(rng.integers(1, 6)))
    r1, r2 = rng.uniform(-2, 3, size=2)
    toks = [instantiate_template(TEMPLATE, BASE).tokens()]
    twice = InterventionHook(layer, lambda s: manipulate_rows(
        manipulate_rows(s.reshape(1, -1), p, r1), p, r2).reshape(s.shape))
    composed, _ = forward(model, toks, hook=twice)
    once, _ = forward(model, toks, hook=manipulation_hook(layer, p, r1 * r2))
    assert abs(composed[0] - once[0]) <= 1e-4 * max(1.0, abs(once[0]))


def test_manipulate_forward_scales_weight(model, traced):
    eq = instantiate_template(TEMPLATE, BASE)
    pca = traced.pcas[2]
    _, w0 = manipulate_forward(model, eq, pca, 2, 1, 1.0)
    preds, ws = manipulate_forward(model, eq, pca, 2, 1, [0.0, 0.5, 2.0])
    assert preds.shape == (3,)
    np.testing.assert_allclose(ws, np.array([0.0, 0.5, 2.0]) * w0, rtol=1e-5, atol=1e-4)
    with pytest.raises(InterventionError):
        manipulate_forward(model, Equation.from_text("1+2"), pca, 2, 1, 1.0)
    with pytest.raises(InterventionError):
        manipulate_forward(model, eq, pca, 2, 1, [math.inf])


def _sweep_result(points):
    res = SweepResult("b", 1, 1, "b", "617-(555-602)", dict(BASE), 0.0, 2.0, 0.0)
    res.samples = [SweepSample(r, 0.0, v, 0.0, 0.0) for r, v in points]
    return res


def test_fit_inverse_interpolates():
    f = fit_inverse(_sweep_result([(1.5, 30.0), (0.5, 10.0), (1.0, 20.0)]))
    assert f(15.0) == pytest.approx(0.75)
    assert f(25.0) == pytest.approx(1.25)
    assert f.support == (10.0, 30.0)
    assert math.isnan(f(31.0)) and math.isnan(f(9.0))


def test_fit_inverse_decreasing_and_nonmonotone_tail():
    # decreasing implied values over r, then a tail that turns around
    pts = [(0.0, 50.0), (0.5, 40.0), (1.0, 30.0), (1.5, 20.0), (2.0, 25.0), (2.5, 22.0)]
    f = fit_inverse(_sweep_result(pts))
    assert f.support == (20.0, 50.0)
    assert f(35.0) == pytest.approx(0.75)
    assert f(20.0) == pytest.approx(1.5)


def test_fit_inverse_errors():
    with pytest.raises(FitError):
        fit_inverse(_sweep_result([(1.0, 20.0)]))
    with pytest.raises(FitError):
        fit_inverse(_sweep_result([(0.0, 5.0), (1.0, 5.0), (2.0, 5.0)]))


def _linear_actual(values, slope=0.1, offset=0.0):
    values = np.asarray(values, dtype=float)
    raw = slope * values
    return ActualWeights(values, raw - offset, raw)


def test_fidelity_identity_and_shuffle():
    # implied value v corresponds to r = v / 20, base weight w0 = 2 -> raw weight 0.1 v
    fitted = fit_inverse(_sweep_result([(r, 20.0 * r) for r in np.linspace(0.5, 3.0, 11)]))
    actual = _linear_actual(np.arange(10, 61), offset=1.5)
    rep = fidelity(fitted, 2.0, actual, offset=1.5)
    assert rep.corr == pytest.approx(1.0) and rep.r2 == pytest.approx(1.0)
    assert rep.num_in_support == 51
    shuffled = ActualWeights(actual.values, np.random.default_rng(0).permutation(actual.weights), actual.raw)
    assert fidelity(fitted, 2.0, shuffled, offset=1.5).r2 < 0
    narrowed = fidelity(fitted, 2.0, actual, offset=1.5, data_support=(20, 30))
    assert narrowed.num_in_support == 11
    with pytest.raises(FitError):
        fidelity(fitted, 2.0, _linear_actual([100, 200, 300]))


def test_actual_weight_at_base_matches_sweep(model, traced):
    pca = traced.pcas[1]
    direction = MostCorrelatedDirection("b", 1, 2, 0.5, pca.component(2))
    sw = sweep(model, TEMPLATE, BASE, direction, pca, [0.0, 1.0, 2.0], "b")
    act = actual_weights(model, pca, 2, TEMPLATE, BASE, "b", [554, 555, 556, 42])
    assert act.skipped == [42]
    assert act.raw[1] == pytest.approx(sw.w0, rel=1e-6, abs=1e-6)
    assert act.weights[1] == pytest.approx(sw.w0_centered, rel=1e-6, abs=1e-6)
    at_one = [s for s in sw.samples if s.r == 1.0][0]
    assert at_one.prediction == pytest.approx(sw.base_prediction)
    # implied value obeys the sign algebra: pred = a - b + c
    assert at_one.implied == pytest.approx(617 + 602 - at_one.prediction)


def test_sweep_with_single_factor_reports_fit_error(model, traced, tmp_path):
    study = case_study(model, traced, TEMPLATE, BASE, "b", r_grid=[1.0], values=range(500, 520))
    assert all(s.error and s.fidelity is None for s in study.layers.values())
    written = write_case_study(study, tmp_path)
    summary = (tmp_path / "fidelity_summary.csv").read_text().splitlines()
    assert summary[1].endswith("fit_error")
    assert any(p.name == "sweep.csv" for p in written)
    assert study.best_layer() is None
    assert "none" in "\n".join(study.summary_lines())


def test_case_study_outputs(model, traced, tmp_path):
    study = case_study(model, traced, TEMPLATE, BASE, "b", values=range(100, 1000, 10))
    assert sorted(study.layers) == [1, 2]
    write_case_study(study, tmp_path)
    sweep_rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert sweep_rows[0] == "layer,component,r,prediction,implied_value,weight,weight_centered"
    assert len(sweep_rows) == 1 + 2 * 41
    fid = (tmp_path / "fidelity_layer1.csv").read_text().splitlines()
    assert fid[0] == "value,predicted_weight,actual_weight,in_support,predicted_raw,actual_raw"
    assert len(fid) == 1 + 90
    lines = study.summary_lines()
    assert lines[0].startswith("intermediate b")
    assert any(l.startswith("most correlated direction") for l in lines)


def test_data_support_uses_matching_shapes():
    train = [Equation.from_text(t) for t in ["100-(200-300)", "900-(150-999)", "5+7", "1-(2-3)"]]
    assert data_support(train, TEMPLATE, "b") == (150.0, 200.0)
    assert data_support([Equation.from_text("5+700")], TEMPLATE, "b") == (700.0, 700.0)
    assert data_support([Equation.from_text("5+7")], TEMPLATE, "b") is None
