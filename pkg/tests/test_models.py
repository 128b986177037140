import numpy as np
import pandas as pd
import pytest
import scipy.linalg

from cfaudit.metrics import auc, rmse
from cfaudit.models import (
    FeaturePolicy, ModelHandle, cross_validate, cv_scores, encode, fit_classifier, fit_forest,
    fit_linear, kfold_indices, logistic_loss_grad, mlp_loss_grad, predict, tree_predictions,
)
from cfaudit.tree import best_split, build_tree

from conftest import random_small_frame


def _ten_records():
    df = random_small_frame(np.random.default_rng(4), 10, n_states=2, missing=0.0)
    return df


# ---------------------------------------------------------------- encoding


def test_race_dropped_when_excluded():
    df = _ten_records()
    pol = FeaturePolicy(include_race=False).fitted(df)
    fm = encode(df, pol)
    assert not any(c.startswith("race") for c in fm.columns)
    with_race = encode(df, FeaturePolicy(include_race=True).fitted(df))
    assert with_race.shape[1] == fm.shape[1] + 2
    # identical except for the race block
    assert np.array_equal(with_race.values[:, : fm.shape[1]], fm.values)


def test_one_hot_rows_sum_to_one():
    df = _ten_records()
    pol = FeaturePolicy(vocab={"sex": ("Male", "Female", "Joint", "NotAvailable"),
                               "state": ("CA", "TX", "NY"), "loan_type": ("Conventional", "FHA", "VA", "RHS_FSA"),
                               "lien": ("FirstLien", "SubordinateLien"), "race": ("Black", "White")}).fitted(df)
    fm = encode(df, pol)
    for f in ("sex", "state", "loan_type", "lien", "race"):
        block = [i for i, c in enumerate(fm.columns) if c.startswith(f + "=")]
        assert (fm.values[:, block].sum(axis=1) == 1.0).all()


def test_hand_assembled_matrix():
    df = _ten_records()
    vocab = {"sex": ("Male", "Female", "Joint", "NotAvailable"), "lien": ("FirstLien", "SubordinateLien")}
    pol = FeaturePolicy(include_race=False, features=("sex", "income", "lien"), vocab=vocab).fitted(df)
    fm = encode(df, pol)
    inc = df["income"].to_numpy()
    expected = []
    for i in range(10):
        row = [1.0 if df["sex"][i] == s else 0.0 for s in vocab["sex"]]
        row.append((inc[i] - inc.mean()) / inc.std())
        row += [1.0 if df["lien"][i] == v else 0.0 for v in vocab["lien"]]
        expected.append(row)
    assert fm.columns == ["sex=Male", "sex=Female", "sex=Joint", "sex=NotAvailable", "income",
                          "lien=FirstLien", "lien=SubordinateLien"]
    np.testing.assert_allclose(fm.values, np.array(expected), rtol=0, atol=1e-12)


def test_unseen_category_and_missing_numeric_raise():
    df = _ten_records()
    pol = FeaturePolicy().fitted(df)
    bad = df.copy()
    bad.loc[0, "sex"] = "Robot"
    with pytest.raises(ValueError, match="unseen sex"):
        encode(bad, pol)
    bad = df.copy()
    bad.loc[0, "dti"] = np.nan
    with pytest.raises(ValueError, match="dti"):
        encode(bad, pol)


def test_labels_cannot_be_features():
    with pytest.raises(ValueError):
        FeaturePolicy(features=("income", "approved"))


# ----------------------------------------------------------------- linear


def test_linear_exact_recovery(rng):
    X = rng.normal(size=(200, 4))
    beta, b0 = np.array([1.5, -2.0, 0.0, 0.7]), 3.0
    m = fit_linear(X, X @ beta + b0, {"l2": 1e-8})
    np.testing.assert_allclose(m.params["coef"], beta, atol=1e-6)
    assert float(m.params["intercept"]) == pytest.approx(b0, abs=1e-6)


def test_linear_constant_target(rng):
    X = rng.normal(size=(50, 3))
    m = fit_linear(X, np.full(50, 4.2), {"l2": 1.0})
    np.testing.assert_allclose(predict(m, X), 4.2, atol=1e-12)


def test_linear_matches_normal_equations(rng):
    X = rng.normal(size=(300, 5))
    y = X @ rng.normal(size=5) + rng.normal(size=300)
    for lam in (1e-3, 0.5, 10.0):
        A = np.hstack([np.ones((300, 1)), X])
        P = np.diag([0.0] + [lam] * 5)
        theta = scipy.linalg.solve(A.T @ A + P, A.T @ y)
        m = fit_linear(X, y, {"l2": lam})
        got = np.concatenate([[float(m.params["intercept"])], m.params["coef"]])
        np.testing.assert_allclose(got, theta, rtol=1e-8, atol=1e-10)


def test_linear_slope_shrinks_with_penalty(rng):
    X = rng.normal(size=(100, 1))
    y = 2.0 * X[:, 0] + rng.normal(size=100) * 0.1
    slopes = [abs(fit_linear(X, y, {"l2": lam}).params["coef"][0]) for lam in (0.0, 1.0, 10.0, 100.0, 1e4)]
    assert all(a >= b for a, b in zip(slopes, slopes[1:]))


def test_linear_collinear_one_hot_is_finite(rng):
    df = random_small_frame(rng, 80, missing=0.0)
    pol = FeaturePolicy().fitted(df)
    m = fit_linear(encode(df, pol), df["income"].to_numpy(), {"l2": 1e-8}, pol)
    assert np.isfinite(predict(m, encode(df, pol))).all()


# ------------------------------------------------------------- classifier


def test_classifier_separable(rng):
    X = rng.normal(size=(400, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(float)
    for hidden in (0, 4):
        m = fit_classifier(X, y, {"l2": 1e-4, "hidden": hidden}, seed=1)
        p = predict(m, X)
        assert auc(p, y) >= 0.99
        assert ((p >= 0) & (p <= 1)).all()


def test_classifier_no_signal(rng):
    X = rng.normal(size=(2000, 3))
    y = (rng.random(2000) < 0.5).astype(float)
    m = fit_classifier(X[:1000], y[:1000], {"l2": 1e-2})
    assert 0.4 <= auc(predict(m, X[1000:]), y[1000:]) <= 0.6


def test_classifier_rejects_single_class(rng):
    with pytest.raises(ValueError, match="both classes"):
        fit_classifier(rng.normal(size=(10, 2)), np.ones(10))


def _fd_grad(fun, theta, h=1e-6):
    g = np.empty_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (fun(theta + e) - fun(theta - e)) / (2 * h)
    return g


def test_gradients_match_finite_differences(rng):
    X = rng.normal(size=(30, 3))
    y = (rng.random(30) < 0.5).astype(float)
    theta = rng.normal(size=4)
    _, g = logistic_loss_grad(theta, X, y, 0.1)
    fd = _fd_grad(lambda t: logistic_loss_grad(t, X, y, 0.1)[0], theta)
    assert np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(g))) < 1e-5
    h = 4
    theta = rng.normal(size=3 * h + 2 * h + 1)
    _, g = mlp_loss_grad(theta, X, y, 0.1, h)
    fd = _fd_grad(lambda t: mlp_loss_grad(t, X, y, 0.1, h)[0], theta)
    assert np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(g))) < 1e-5


# ----------------------------------------------------------------- forest


def test_forest_learns_threshold_rule(rng):
    X = rng.uniform(size=(300, 1))
    y = (X[:, 0] > 0.5).astype(float)
    m = fit_forest(X, y, {"n_trees": 1, "max_depth": 1, "feature_subsample": "all"}, task="classify")
    # a single bootstrap tree still splits between the classes
    assert ((predict(m, X) > 0.5) == y.astype(bool)).all()


def test_forest_constant_target(rng):
    X = rng.normal(size=(50, 3))
    m = fit_forest(X, np.full(50, 2.5), {"n_trees": 5})
    assert (predict(m, X) == 2.5).all()
    assert all(t.n_nodes == 1 for t in m.trees)


def _sse(y):
    return float(((y - y.mean()) ** 2).sum()) if len(y) else 0.0


def _exhaustive_split(X, y, min_leaf=1):
    """Best (sse, feature, threshold) by trying every midpoint on every feature."""
    best = None
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = lo + (hi - lo) / 2
            m = X[:, f] <= thr
            if m.sum() < min_leaf or (~m).sum() < min_leaf:
                continue
            s = _sse(y[m]) + _sse(y[~m])
            if best is None or s < best[0] - 1e-12:
                best = (s, f, thr)
    return best


def test_best_split_matches_exhaustive_search(rng):
    for _ in range(30):
        X = np.round(rng.normal(size=(40, 3)), 1)
        y = X[:, 0] * 2 - X[:, 2] + rng.normal(size=40)
        s, f, thr = _exhaustive_split(X, y, 3)
        got = best_split(X, y, [0, 1, 2], min_leaf=3)
        assert got[2] == pytest.approx(s, rel=1e-9)
        assert got[0] == f and got[1] == pytest.approx(thr)


def test_depth_two_tree_matches_greedy_oracle(rng):
    X = np.round(rng.uniform(size=(60, 3)), 2)
    y = np.where(X[:, 0] > 0.5, 2.0, 0.0) + np.where(X[:, 1] > 0.3, 1.0, 0.0) + rng.normal(0, 0.1, 60)
    tree = build_tree(X, y, max_depth=2)
    # greedy oracle: best root split, then best split of each child
    _, f, thr = _exhaustive_split(X, y)
    leaves = []
    for m in (X[:, f] <= thr, X[:, f] > thr):
        sub = _exhaustive_split(X[m], y[m])
        _, f2, t2 = sub
        inner = X[m][:, f2] <= t2
        leaves += [y[m][inner], y[m][~inner]]
    assert tree.feature[0] == f and tree.threshold[0] == pytest.approx(thr)
    assert tree.depth() == 2
    assert sorted(np.round(tree.value[tree.feature < 0], 12)) == sorted(np.round([l.mean() for l in leaves], 12))
    pred = tree.predict(X)
    assert sum(_sse(y[pred == v]) for v in np.unique(pred)) == pytest.approx(sum(_sse(l) for l in leaves))


def test_forest_prediction_is_mean_of_trees(rng):
    X = rng.normal(size=(100, 4))
    y = (X[:, 0] > 0).astype(float)
    m = fit_forest(X, y, {"n_trees": 7, "max_depth": 4}, seed=3, task="classify")
    np.testing.assert_allclose(predict(m, X), tree_predictions(m, X).mean(axis=0), rtol=0, atol=1e-15)
    assert ((predict(m, X) >= 0) & (predict(m, X) <= 1)).all()


def test_forest_row_permutation_and_reproducibility(rng):
    X = rng.normal(size=(120, 3))
    y = X[:, 0] + rng.normal(size=120)
    m = fit_forest(X, y, {"n_trees": 10}, seed=11)
    perm = rng.permutation(120)
    np.testing.assert_array_equal(predict(m, X)[perm], predict(m, X[perm]))
    m2 = fit_forest(X, y, {"n_trees": 10}, seed=11, threads=4)
    np.testing.assert_array_equal(predict(m, X), predict(m2, X))


def test_model_json_round_trip(rng):
    df = random_small_frame(rng, 60, missing=0.0)
    pol = FeaturePolicy().fitted(df)
    fm = encode(df, pol)
    y = df["approved"].to_numpy(dtype=float)
    models = [
        fit_forest(fm, y, {"n_trees": 3}, task="classify", policy=pol),
        fit_classifier(fm, y, {"hidden": 3}, policy=pol),
        fit_linear(fm, df["income"].to_numpy(), policy=pol),
    ]
    for m in models:
        m2 = ModelHandle.from_json(m.to_json())
        np.testing.assert_array_equal(predict(m, fm), predict(m2, fm))


def test_predict_rejects_wrong_width(rng):
    m = fit_linear(rng.normal(size=(10, 3)), rng.normal(size=10))
    with pytest.raises(ValueError, match="3 feature columns"):
        predict(m, rng.normal(size=(5, 4)))


# ------------------------------------------------------- cross-validation


def test_single_point_grid_skips_search(rng):
    df = random_small_frame(rng, 5, missing=0.0)
    assert cross_validate(df, np.zeros(5), FeaturePolicy(), "linear", {"l2": [0.3]}) == {"l2": 0.3}


def test_cv_prefers_small_penalty_on_clean_signal(rng):
    df = random_small_frame(rng, 300, missing=0.0)
    y = 0.05 * df["income"].to_numpy() - 0.1 * df["dti"].to_numpy()
    best = cross_validate(df, y, FeaturePolicy(), "linear", {"l2": [1e-8, 1e4]}, seed=2)
    assert best == {"l2": 1e-8}


def test_cv_matches_manual_folds(rng):
    df = random_small_frame(rng, 90, missing=0.0)
    y = df["income"].to_numpy() * 0.01 + rng.normal(size=90)
    pol = FeaturePolicy()
    (hp, scores), = cv_scores(df, y, pol, "linear", {"l2": [0.1]}, 3, seed=5, task="regress")
    manual = []
    for val in kfold_indices(90, 3, 5):
        train = np.setdiff1d(np.arange(90), val)
        p = pol.fitted(df.iloc[train])
        m = fit_linear(encode(df.iloc[train], p), y[train], {"l2": 0.1})
        manual.append(rmse(predict(m, encode(df.iloc[val], p)), y[val]))
    np.testing.assert_allclose(scores, manual, rtol=1e-12)
    folds = kfold_indices(90, 3, 5)
    assert sorted(np.concatenate(folds).tolist()) == list(range(90))
