import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arithtrace.equations import Equation
from arithtrace.model import ActivationRecord
from arithtrace.tracing import (
    CorrelationReport,
    LayerMatrix,
    TracingError,
    build_layer_matrix,
    correlate,
    emit_heatmap,
    fit_pca,
    load_pcas,
    most_correlated,
    pearson,
    project,
    read_heatmap_csv,
    save_pcas,
    trace,
)


def _random_matrix(seed, n=200, d=12):
    rng = np.random.default_rng(seed)
    scales = np.linspace(3.0, 0.2, d)
    return rng.normal(size=(n, d)) * scales @ np.linalg.qr(rng.normal(size=(d, d)))[0]


@pytest.mark.parametrize("seed", range(5))
def test_components_orthonormal(seed):
    pca = fit_pca(_random_matrix(seed), k=8)
    gram = pca.components @ pca.components.T
    assert np.max(np.abs(gram - np.eye(8))) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_explained_variance_ratio_properties(seed):
    pca = fit_pca(_random_matrix(seed), k=12)
    r = pca.explained_variance_ratio
    assert np.all(np.diff(r) <= 1e-15)
    assert np.all(r >= 0)
    assert r.sum() <= 1 + 1e-6
    assert fit_pca(_random_matrix(seed), k=12).explained_variance_ratio.sum() == pytest.approx(1.0, abs=1e-9)


def test_rank_one_line_recovered():
    rng = np.random.default_rng(0)
    direction = rng.normal(size=9)
    direction /= np.linalg.norm(direction)
    data = rng.normal(size=(300, 1)) * direction + rng.normal(size=9)
    pca = fit_pca(data, k=3)
    assert pca.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-6)
    assert abs(abs(pca.components[0] @ direction) - 1.0) < 1e-9
    assert pca.truncated and pca.num_components == 1


def test_isotropic_2d_gives_half():
    data = np.random.default_rng(1).normal(size=(10_000, 2))
    pca = fit_pca(data, k=2)
    assert abs(pca.explained_variance_ratio[0] - 0.5) < 0.05
    # ratios agree with eigenvalues of the sample covariance
    eig = np.sort(np.linalg.eigvalsh(np.cov(data.T)))[::-1]
    np.testing.assert_allclose(pca.explained_variance_ratio, eig / eig.sum(), rtol=1e-9)


def test_reconstruction_error_nonincreasing_in_k():
    data = _random_matrix(2)
    errors = []
    for k in range(1, 13):
        pca = fit_pca(data, k=k)
        w = project(pca, data).weights
        recon = pca.mean + w @ pca.components
        errors.append(float(np.sum((data - recon) ** 2)))
    assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 1e-9


def test_projection_variance_equals_singular_values():
    data = _random_matrix(3)
    pca = fit_pca(data, k=5)
    w = project(pca, data).weights
    np.testing.assert_allclose(w.var(axis=0, ddof=1), pca.singular_values**2 / (len(data) - 1), rtol=1e-9)


def test_projection_of_mean_and_offset():
    data = _random_matrix(4)
    pca = fit_pca(data, k=4)
    np.testing.assert_allclose(project(pca, pca.mean).weights, np.zeros((1, 4)), atol=1e-12)
    np.testing.assert_allclose(project(pca, pca.mean + 2 * pca.component(1)).weights, [[2, 0, 0, 0]], atol=1e-12)


def test_sign_convention_and_determinism():
    data = _random_matrix(5)
    a, b = fit_pca(data, k=6), fit_pca(data.copy(), k=6)
    assert np.array_equal(a.components, b.components)
    for row in a.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_fit_pca_rejects_bad_k():
    with pytest.raises(TracingError):
        fit_pca(np.ones((3, 4)), k=5)
    with pytest.raises(TracingError):
        project(fit_pca(_random_matrix(0), k=2), np.ones((1, 5)))


def _brute_pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_pipeline_correlations_match_brute_force_oracle():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(50, 8)) @ rng.normal(size=(8, 8))
    values = {"u": rng.normal(size=50), "v": data[:, 0] * 3 + rng.normal(size=50)}
    pca = fit_pca(data, k=8)
    w = project(pca, data).weights
    corr = correlate(project(pca, data), values)
    for j, vals in enumerate(values.values()):
        for k in range(8):
            assert abs(corr[j, k] - _brute_pearson(list(w[:, k]), list(vals))) < 1e-10


def test_pearson_edge_cases():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))
    with pytest.raises(TracingError):
        pearson([1, 2], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.1, 100), b=st.floats(-100, 100), c=st.floats(-100, 100), seed=st.integers(0, 1000))
def test_pearson_affine_invariance(a, b, c, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=30), rng.normal(size=30)
    base = pearson(x, y)
    assert pearson(a * x + b, y + c) == pytest.approx(base, abs=1e-9)
    assert pearson(-a * x + b, y) == pytest.approx(-base, abs=1e-9)


def test_independent_values_have_small_correlation():
    rng = np.random.default_rng(8)
    data = rng.normal(size=(2000, 20))
    pca = fit_pca(data, k=10)
    corr = correlate(project(pca, data), {"noise": rng.normal(size=2000)})
    assert np.all(np.abs(corr) < 0.15)


def _report(rows, layer=1):
    return CorrelationReport(["a", "b"], [layer], {layer: np.array(rows, dtype=float)})


def test_most_correlated_argmax_and_ties():
    rep = _report([[0.1, -0.9, 0.5], [0.3, 0.3, -0.3]])
    best = most_correlated(rep, "a", 1)
    assert (best.k, best.corr) == (2, -0.9)
    tie = most_correlated(rep, "b", 1)
    assert tie.k == 1
    with pytest.raises(TracingError):
        most_correlated(rep, "zz", 1)
    with pytest.raises(TracingError):
        most_correlated(_report([[math.nan] * 3, [0.1] * 3]), "a", 1)


def _record(n=120, seed=0):
    """Synthetic activations where layer 1 encodes b linearly and layer 2 is noise."""
    rng = np.random.default_rng(seed)
    eqs = [Equation.from_text(f"{rng.integers(100, 999)}-({rng.integers(100, 999)}-{rng.integers(100, 999)})") for _ in range(n)]
    b = np.array([eq.ast.right.left.value for eq in eqs], dtype=float)
    l1 = rng.normal(size=(n, 3, 4)) * 0.01
    l1[:, 1, 2] += (b - b.mean()) / b.std()
    l2 = rng.normal(size=(n, 3, 4))
    names = {"L": "a", "RL": "b", "RR": "c"}
    ivs = [tuple(Equation.from_ast(eq.ast, names).intermediates) for eq in eqs]
    return ActivationRecord({1: l1, 2: l2}, [eq.text for eq in eqs], ivs)


def test_trace_finds_encoded_value():
    result = trace(_record(), k=4)
    assert result.report.labels == ["a-(b-c)", "a", "b-c", "b", "c"]
    best = most_correlated(result.report, "b", 1, result.pcas[1])
    assert abs(best.corr) > 0.99 and best.k == 1
    assert best.vector is not None and best.vector.shape == (12,)
    assert np.nanmax(np.abs(result.report.get(2, "b"))) < 0.5


def test_heatmap_csv_round_trip(tmp_path):
    result = trace(_record(), k=3)
    written = emit_heatmap(result.report, tmp_path)
    names = sorted(p.name for p in written)
    assert names == ["corr_layer1.csv", "corr_layer1.svg", "corr_layer2.csv", "corr_layer2.svg", "explained_variance.csv"]
    labels, data = read_heatmap_csv(tmp_path / "corr_layer1.csv")
    assert labels == result.report.labels
    assert data.shape == (5, 3)
    np.testing.assert_allclose(data, np.abs(result.report.corr[1]), atol=1e-8)
    assert (tmp_path / "corr_layer1.csv").read_text().splitlines()[0] == "intermediate,k1,k2,k3"
    ev = (tmp_path / "explained_variance.csv").read_text().splitlines()
    assert ev[0] == "layer,k,ratio" and len(ev) == 1 + 2 * 3


def test_heatmap_single_component_and_undefined_cells(tmp_path):
    rep = CorrelationReport(["x", "y"], [0], {0: np.array([[0.0], [math.nan]])}, {0: np.array([1.0])})
    emit_heatmap(rep, tmp_path)
    lines = (tmp_path / "corr_layer0.csv").read_text().splitlines()
    assert lines == ["intermediate,k1", "x,0.00000000", "y,"]
    labels, data = read_heatmap_csv(tmp_path / "corr_layer0.csv")
    assert data[0, 0] == 0.0 and math.isnan(data[1, 0])
    assert "<svg" in (tmp_path / "corr_layer0.svg").read_text()


def test_pca_file_round_trip(tmp_path):
    result = trace(_record(), k=3)
    save_pcas(result, tmp_path / "pca.tmlp", "{a:3}-({b:3}-{c:3})")
    back, header = load_pcas(tmp_path / "pca.tmlp")
    assert header["template"] == "{a:3}-({b:3}-{c:3})"
    assert back.report.labels == result.report.labels and back.report.layers == result.report.layers
    for layer in (1, 2):
        assert np.array_equal(back.pcas[layer].components, result.pcas[layer].components)
        assert np.array_equal(back.pcas[layer].mean, result.pcas[layer].mean)
        np.testing.assert_array_equal(back.report.corr[layer], result.report.corr[layer])


def test_layer_matrix_is_token_concatenation():
    rec = _record(n=10)
    m = build_layer_matrix(rec, 1)
    assert isinstance(m, LayerMatrix) and m.data.shape == (10, 12)
    np.testing.assert_array_equal(m.data[3, 4:8], rec.layers[1][3, 1])
    with pytest.raises(TracingError):
        build_layer_matrix(rec, 5)
