import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lasermon import forest
from lasermon.attribution import (
    AffineFirstLayer, AttributionConfig, ablation_sweep, coalition_values, explain,
    global_importance, make_background, select_top_k, shapley_exact, shapley_sampled,
    write_ablation_csv, write_importance_csv,
)
from lasermon.errors import CapacityError, ValidationError
from lasermon.mlp import MlpArchitecture, attribution_predictor, init_model, predict


def linear(w, b=0.0):
    w = np.asarray(w, float)
    return lambda X: np.atleast_2d(X) @ w + b


def brute_shapley(f, x, bg):
    """Textbook formula over explicit subsets, independent of the masked implementation."""
    d = len(x)

    def v(S):
        rows = bg.copy()
        rows[:, list(S)] = x[list(S)]
        return float(np.mean(f(rows)))

    phi = np.zeros(d)
    for i in range(d):
        rest = [j for j in range(d) if j != i]
        for r in range(d):
            for S in itertools.combinations(rest, r):
                w = math.factorial(r) * math.factorial(d - r - 1) / math.factorial(d)
                phi[i] += w * (v(S + (i,)) - v(S))
    return phi


def test_linear_closed_form(rng):
    w = rng.normal(size=6)
    x, bg = rng.normal(size=6), rng.normal(size=(9, 6))
    np.testing.assert_allclose(shapley_exact(linear(w, 1.5), x, bg), w * (x - bg.mean(0)), atol=1e-12)


def test_dummy_gets_zero(rng):
    w = np.array([1.0, 0.0, -2.0, 0.5])
    f = lambda X: np.tanh(np.atleast_2d(X) @ w)  # noqa: E731
    phi = shapley_exact(f, rng.normal(size=4), rng.normal(size=(5, 4)))
    assert phi[1] == 0.0


def test_product_example():
    f = lambda X: X[:, 0] * X[:, 1] + X[:, 2]  # noqa: E731
    phi = shapley_exact(f, np.ones(3), np.zeros((1, 3)))
    np.testing.assert_allclose(phi, [0.5, 0.5, 1.0], atol=1e-15)


def test_matches_brute_force_formula(rng):
    f = lambda X: np.sin(X[:, 0] * X[:, 1]) + X[:, 2] ** 2 * X[:, 3]  # noqa: E731
    x, bg = rng.normal(size=4), rng.normal(size=(3, 4))
    np.testing.assert_allclose(shapley_exact(f, x, bg), brute_shapley(f, x, bg), atol=1e-12)


def test_capacity_limit(rng):
    with pytest.raises(CapacityError):
        shapley_exact(linear(np.ones(21)), np.zeros(21), np.zeros((1, 21)))


def test_symmetry():
    f = lambda X: X[:, 0] * X[:, 1] + np.exp(X[:, 2])  # noqa: E731
    x = np.array([0.7, 0.7, 0.1])
    bg = np.array([[0.2, 0.2, 0.0], [-1.0, -1.0, 0.4]])
    phi = shapley_exact(f, x, bg)
    assert phi[0] == pytest.approx(phi[1], abs=1e-14)


@settings(max_examples=20)
@given(st.integers(0, 2**32), st.integers(1, 8))
def test_efficiency_exact(seed, d):
    rng = np.random.default_rng(seed)
    model = init_model(MlpArchitecture(d, (5,), "tanh"), seed)
    f = lambda X: predict(model, X)  # noqa: E731
    X, bg = rng.normal(size=(3, d)), rng.normal(size=(4, d))
    res = explain(f, X, bg, AttributionConfig(mode="exact"))
    np.testing.assert_allclose(res.phi.sum(1) + res.base_value, f(X), atol=1e-8)


def test_feature_subset_fixes_other_columns(rng):
    w = rng.normal(size=5)
    x, bg = rng.normal(size=5), rng.normal(size=(4, 5))
    phi = shapley_exact(linear(w), x, bg, features=[0, 3])
    np.testing.assert_allclose(phi, w[[0, 3]] * (x[[0, 3]] - bg[:, [0, 3]].mean(0)), atol=1e-12)
    v = coalition_values(linear(w), x, bg, features=[0, 3])
    assert v[-1] == pytest.approx(float(linear(w)(x[None])[0]))


def _forest_model(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 10))
    y = X[:, 0] * X[:, 1] + np.sin(2 * X[:, 2]) + 0.5 * X[:, 3] - X[:, 4] ** 2
    model = forest.fit_model("et", X, y, n_trees=10, seed=seed)
    return (lambda Z: forest.predict(model, Z)), X, rng


@pytest.mark.parametrize("seed", range(5))
def test_sampled_matches_exact_on_tree_ensemble(seed):
    f, X, rng = _forest_model(seed)
    bg, x = X[:12], rng.normal(size=10)
    exact = shapley_exact(f, x, bg)
    est, _ = shapley_sampled(f, x, bg, permutations=2000, seed=seed)
    assert np.abs(est - exact).max() <= 0.05 * (np.abs(exact).max() + 1e-9)


def test_sampled_linear_convergence(rng):
    w = rng.normal(size=8)
    x, bg = rng.normal(size=8), rng.normal(size=(50, 8))
    est, _ = shapley_sampled(linear(w), x, bg, permutations=4000, seed=1)
    target = w * (x - bg.mean(0))
    big = np.abs(target) > 0.1 * np.abs(target).max()
    np.testing.assert_allclose(est[big], target[big], rtol=0.02)


def test_sampled_dummy_within_three_standard_errors(rng):
    w = np.array([1.0, 0.0, 2.0])
    f = lambda X: np.tanh(np.atleast_2d(X) @ w) + np.atleast_2d(X)[:, 0] * np.atleast_2d(X)[:, 2]  # noqa: E731
    est, se = shapley_sampled(f, rng.normal(size=3), rng.normal(size=(20, 3)), permutations=500, seed=3)
    assert abs(est[1]) <= 3 * se[1] + 1e-12


def test_sampled_unbiased_over_seeds():
    f, X, rng = _forest_model(11)
    bg, x = X[:6], rng.normal(size=10)
    exact = shapley_exact(f, x, bg)
    runs = np.array([shapley_sampled(f, x, bg, permutations=20, seed=s)[0] for s in range(50)])
    mean, se = runs.mean(0), runs.std(0, ddof=1) / np.sqrt(50)
    # 2 standard errors per coordinate; allow the expected few excursions among 10 coordinates
    assert np.sum(np.abs(mean - exact) > 2 * se + 1e-12) <= 2


def test_sampled_determinism(rng):
    f = linear(rng.normal(size=5))
    x, bg = rng.normal(size=5), rng.normal(size=(7, 5))
    a = shapley_sampled(f, x, bg, 30, seed=4)
    b = shapley_sampled(f, x, bg, 30, seed=4)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValidationError):
        shapley_sampled(f, x, bg, 0)


@pytest.mark.parametrize("activation", ["relu", "tanh", "sigmoid", "leaky_relu"])
@pytest.mark.parametrize("widths", [(), (4,), (6, 3)])
def test_affine_fast_path_equals_generic(rng, activation, widths):
    model = init_model(MlpArchitecture(7, widths, activation), 3)
    fast = attribution_predictor(model)
    assert isinstance(fast, AffineFirstLayer)
    generic = lambda X: predict(model, X)  # noqa: E731
    X, bg = rng.normal(size=(3, 7)), rng.normal(size=(8, 7))
    np.testing.assert_allclose(fast(X), generic(X), atol=1e-13)
    for r, x in enumerate(X):
        a = shapley_sampled(fast, x, bg, 40, seed=2, row_key=r)[0]
        b = shapley_sampled(generic, x, bg, 40, seed=2, row_key=r)[0]
        np.testing.assert_allclose(a, b, atol=1e-11)


def test_explain_sampled_rows_use_distinct_streams(rng):
    f = linear(rng.normal(size=4))
    x = rng.normal(size=4)
    res = explain(f, np.stack([x, x]), rng.normal(size=(30, 4)), AttributionConfig(permutations=3))
    assert not np.array_equal(res.phi[0], res.phi[1])
    assert res.stderr.shape == (2, 4)
    with pytest.raises(ValidationError):
        explain(f, np.empty((0, 4)), np.zeros((1, 4)))
    with pytest.raises(ValidationError):
        AttributionConfig(mode="kernel")


def test_make_background(rng):
    X = rng.normal(size=(300, 3))
    bg = make_background(X, 100, seed=1)
    assert bg.shape == (100, 3)
    np.testing.assert_array_equal(bg, make_background(X, 100, seed=1))
    assert {tuple(r) for r in bg} <= {tuple(r) for r in X}
    np.testing.assert_array_equal(make_background(X[:50], 100), X[:50])
    with pytest.raises(ValidationError):
        make_background(np.empty((0, 3)))


def test_global_importance_rules():
    one = global_importance([[0.5, -2.0, 0.0]])
    np.testing.assert_array_equal(one.scores, [0.5, 2.0, 0.0])
    assert one.ranking.tolist() == [1, 0, 2]
    assert global_importance([[1.0], [-1.0]]).scores[0] == 1.0
    zeros = global_importance([[0.0, 3.0, 0.0, 0.0]])
    assert zeros.ranking.tolist() == [1, 0, 2, 3]
    with pytest.raises(ValidationError):
        global_importance(np.empty((0, 3)))


@given(st.lists(st.lists(st.floats(-5, 5), min_size=4, max_size=4), min_size=1, max_size=6))
def test_ranking_is_permutation(rows):
    imp = global_importance(rows)
    assert sorted(imp.ranking.tolist()) == [0, 1, 2, 3]
    assert np.all(imp.scores >= 0)
    assert np.all(np.diff(imp.scores[imp.ranking]) <= 0)


def test_select_top_k():
    imp = global_importance([[0.1, 0.9, 0.5]])
    assert select_top_k(imp, 1).tolist() == [1]
    assert sorted(select_top_k(imp, 3).tolist()) == [0, 1, 2]
    for k in (0, 4):
        with pytest.raises(ValidationError):
            select_top_k(imp, k)


def test_ablation_sweep_appends_reference_point():
    seen = []

    def retrain(k):
        seen.append(k)
        return {"a": (k / 10, 1.0 / k)}

    pts = ablation_sweep([1, 3, 5], retrain, 10)
    assert seen == [1, 3, 5, 10]
    assert [p.k for p in pts] == [1, 3, 5, 10] and pts[-1].test_r2 == 1.0
    assert len(ablation_sweep([2, 10], retrain, 10)) == 2
    for bad in ([0, 2], [3, 2], [2, 11]):
        with pytest.raises(ValidationError):
            ablation_sweep(bad, retrain, 10)


def test_csv_writers(tmp_path):
    imp = global_importance([[0.2, -0.8]])
    write_importance_csv(tmp_path / "i.csv", imp, ["a", "b"])
    rows = list(csv.reader(open(tmp_path / "i.csv")))
    assert rows[0] == ["rank", "feature_name", "mean_abs_shap"]
    assert rows[1][:2] == ["1", "b"] and float(rows[1][2]) == 0.8
    pts = ablation_sweep([1], lambda k: {"x": (0.5, 0.25)}, 2)
    write_ablation_csv(tmp_path / "a.csv", pts)
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0] == ["k", "technique", "test_r2", "test_rmse"] and len(rows) == 3
