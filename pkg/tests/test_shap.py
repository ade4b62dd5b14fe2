import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_shapley, continuous_frame
from roadfirst.forest import RandomForest, TrainConfig, Tree, fit_forest
from roadfirst.shap import (
    ExactShapRefused,
    ShapValues,
    dependence_slice,
    exact_shap,
    plot_summary,
    read_shap_csv,
    sample_background,
    shapley_weights,
    summarize,
    tree_shap,
    write_shap_csv,
    write_summary_csv,
)


def _forest(seed=0, n=300, p=5, n_trees=8, depth=None):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = ((X[:, 0] + 0.5 * X[:, 1] > 0) ^ (rng.random(n) < 0.1)).astype(float)
    model = fit_forest(continuous_frame(X, target=y), "y",
                       TrainConfig(n_trees=n_trees, seed=seed, max_depth=depth, min_samples_leaf=2))
    return model, X


def test_constant_model_gives_zero():
    rng = np.random.default_rng(0)
    sv = exact_shap(lambda X: np.full(len(X), 0.3), rng.normal(size=4), rng.normal(size=(10, 4)))
    assert np.all(sv.values == 0.0)
    assert sv.base == pytest.approx(0.3)


def test_stump_closed_form():
    # f = a if x0 <= 0 else b; row has x0 <= 0; a fraction p of the background does too
    a, b = 0.9, 0.2
    Z = np.array([[-1.0, 5.0], [-2.0, 1.0], [3.0, 0.0], [4.0, 2.0], [5.0, 1.0]])
    p = 2 / 5
    f = lambda X: np.where(X[:, 0] <= 0, a, b)
    sv = exact_shap(f, np.array([-0.5, 9.0]), Z)
    assert sv.values[0, 0] == pytest.approx(a - (p * a + (1 - p) * b), abs=1e-12)
    assert sv.values[0, 1] == 0.0


def test_shapley_weights_sum():
    for n in range(1, 10):
        from math import comb
        w = shapley_weights(n)
        assert sum(w[s] * comb(n - 1, s) for s in range(n)) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 7))
def test_exact_efficiency(seed, p):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(p, p))
    f = lambda X: np.tanh(X @ W).sum(axis=1) + X[:, 0] * X[:, -1]
    sv = exact_shap(f, rng.normal(size=p), rng.normal(size=(6, p)))
    assert sv.efficiency_gap().max() <= 1e-9


def test_exact_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    f = lambda X: np.maximum(X[:, 0], X[:, 1]) * X[:, 2] - X[:, 3] ** 2
    x, Z = rng.normal(size=4), rng.normal(size=(7, 4))
    want, base = brute_shapley(f, x, Z)
    sv = exact_shap(f, x, Z)
    assert np.allclose(sv.values[0], want, atol=1e-12)
    assert sv.base == pytest.approx(base, abs=1e-12)


def test_exact_refuses_too_many_features():
    with pytest.raises(ExactShapRefused, match="tree_shap"):
        exact_shap(lambda X: X[:, 0], np.zeros(16), np.zeros((2, 16)))


def test_symmetric_features_share_credit():
    rng = np.random.default_rng(2)
    f = lambda X: X[:, 0] * X[:, 1] + X[:, 2]
    x = np.array([1.5, 1.5, 0.0])
    Z = rng.normal(size=(8, 3))
    Z[:, 1] = Z[:, 0]
    sv = exact_shap(f, x, Z)
    assert sv.values[0, 0] == pytest.approx(sv.values[0, 1], abs=1e-12)


def test_dummy_feature_gets_zero():
    model, X = _forest(seed=3, p=4)
    # a feature no tree splits on contributes nothing
    unused = [j for j in range(4) if not any(np.any(t.feature == j) for t in model.trees)]
    rows = X[:20].copy()
    rows[:, 3] = 99.0
    sv = tree_shap(model, rows, X[:40])
    for j in unused:
        assert np.all(sv.values[:, j] == 0.0)
    stump = Tree(np.array([0, -1, -1]), np.array([0.0, 0.0, 0.0]), np.array([1, -1, -1]),
                 np.array([2, -1, -1]), np.array([[5, 5], [4, 1], [1, 4]]))
    one = RandomForest([stump], TrainConfig(n_trees=1), ["a", "b"], ["dynamic", "dynamic"])
    sv = tree_shap(one, X[:10, :2], X[10:30, :2])
    assert np.all(sv.values[:, 1] == 0.0)


def test_tree_shap_matches_exact_on_depth_one_tree():
    model, X = _forest(seed=4, p=3, n_trees=1, depth=1)
    Z = X[:25]
    for x in X[100:110]:
        want = exact_shap(model, x, Z).values[0]
        got = tree_shap(model, x, Z).values[0]
        assert np.allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("p", [3, 6, 12])
def test_tree_shap_matches_exact_oracle(p):
    model, X = _forest(seed=p, p=p, n_trees=4, depth=6)
    Z = X[:16]
    for x in X[200:204]:
        want = exact_shap(model, x, Z).values[0]
        got = tree_shap(model, x, Z).values[0]
        assert np.allclose(got, want, atol=1e-9)


def test_tree_shap_matches_brute_force_loop():
    model, X = _forest(seed=5, p=4, n_trees=3)
    Z = X[:10]
    want, _ = brute_shapley(model.predict_matrix, X[150], Z)
    assert np.allclose(tree_shap(model, X[150], Z).values[0], want, atol=1e-12)


def test_tree_shap_efficiency():
    model, X = _forest(seed=6, p=8, n_trees=20)
    sv = tree_shap(model, X[:60], X[60:188])
    assert sv.efficiency_gap().max() <= 1e-9


def test_ensemble_additivity():
    model, X = _forest(seed=7, p=5, n_trees=6)
    rows, Z = X[:30], X[30:80]
    per = tree_shap(model, rows, Z, per_tree=True)
    whole = tree_shap(model, rows, Z)
    assert np.abs(np.mean(per, axis=0) - whole.values).max() <= 1e-12
    for t, tree in enumerate(model.trees):
        single = RandomForest([tree], model.config, model.features, model.feature_classes)
        assert np.abs(tree_shap(single, rows, Z).values - per[t]).max() <= 1e-12


def test_tree_shap_independent_of_workers():
    model, X = _forest(seed=8)
    a = tree_shap(model, X[:130], X[130:200], workers=1).values
    b = tree_shap(model, X[:130], X[130:200], workers=3).values
    assert np.array_equal(a, b)


def test_sample_background():
    X = np.arange(1000.0).reshape(500, 2)
    bg = sample_background(X, 128, seed=3)
    assert bg.shape == (128, 2)
    assert np.all(np.diff(bg[:, 0]) > 0)
    assert np.array_equal(bg, sample_background(X, 128, seed=3))
    assert sample_background(X[:10], 128).shape == (10, 2)


def _sv(values, features=("b", "a", "c")):
    values = np.asarray(values, dtype=float)
    return ShapValues(values, 0.0, list(features), np.arange(values.size, dtype=float).reshape(values.shape),
                      values.sum(axis=1))


def test_summary_ranking():
    s = summarize(_sv([[0.1, -0.5, 0.2], [0.3, 0.1, -0.2]]))
    assert s.ranking == ["a", "b", "c"]
    assert s.mean_abs.tolist() == pytest.approx([0.2, 0.3, 0.2])
    assert s.rank_of("c") == 3 and s.top(1) == ["a"]


def test_all_zero_ranking_is_lexicographic():
    assert summarize(_sv(np.zeros((4, 3)))).ranking == ["a", "b", "c"]


@given(st.lists(st.lists(st.floats(-5, 5), min_size=3, max_size=3), min_size=1, max_size=10))
def test_ranking_invariant_to_sign_flip(values):
    a = summarize(_sv(values))
    b = summarize(_sv(-np.asarray(values)))
    assert a.ranking == b.ranking


def test_dependence_slice():
    s = summarize(_sv([[0.1, 0.0, 0.0], [0.2, 0.0, 0.0]]))
    pairs = dependence_slice(s, "b")
    assert pairs == sorted(pairs) and len(pairs) == 2
    assert pairs[0] == (0.0, 0.1)
    with pytest.raises(KeyError):
        dependence_slice(s, "zz")


def test_csv_round_trip(tmp_path):
    model, X = _forest(seed=9)
    sv = tree_shap(model, X[:25], X[25:75])
    write_shap_csv(sv, tmp_path / "shap.csv")
    back = read_shap_csv(tmp_path / "shap.csv")
    want = summarize(sv)
    assert back.ranking == want.ranking
    assert np.array_equal(back.phi, sv.values) and np.array_equal(back.values, sv.data)
    write_summary_csv(want, tmp_path / "summary.csv")
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert lines[0] == "feature,mean_abs_phi,rank"
    assert [ln.split(",")[0] for ln in lines[1:]] == want.ranking


def test_plot_summary_writes_svgs(tmp_path):
    s = summarize(_sv(np.random.default_rng(0).normal(size=(30, 3))))
    paths = plot_summary(s, tmp_path, top=2, dependence=["a"])
    assert [p.name for p in paths] == ["shap_importance.svg", "shap_beeswarm.svg", "dependence_a.svg"]
    for p in paths:
        assert p.read_text().lstrip().startswith("<?xml")
    again = plot_summary(s, tmp_path / "again", top=2, dependence=["a"])
    assert all(p.read_bytes() == q.read_bytes() for p, q in zip(paths, again))
