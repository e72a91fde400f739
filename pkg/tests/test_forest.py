from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from churnforge.ctree import BinaryResponse, SurvivalResponse, Tree
from churnforge.forest import (
    Forest,
    ForestParams,
    fit_forest,
    forest_weights,
    predict_probability,
    predict_survival,
    weighted_km,
)
from churnforge.survival import kaplan_meier


def survival_data(n=300, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4))
    t = rng.exponential(np.where(X[:, 0] > 0, 5.0, 40.0))
    c = rng.exponential(50.0, n)
    return X, SurvivalResponse(np.round(np.minimum(t, c), 1), t <= c)


SMALL = ForestParams(ensemble_size=12, min_node=20, min_bucket=7)


def test_same_seed_same_forest():
    X, y = survival_data()
    a = fit_forest(X, y, SMALL, seed=4)
    b = fit_forest(X, y, SMALL, seed=4)
    c = fit_forest(X, y, SMALL, seed=5)
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != c.to_dict()


def test_workers_do_not_change_the_forest():
    X, y = survival_data()
    a = fit_forest(X, y, SMALL, seed=4)
    b = fit_forest(X, y, SMALL, seed=4, workers=8)
    assert a.to_dict() == b.to_dict()


def test_tree_streams_are_per_index():
    X, y = survival_data()
    big = fit_forest(X, y, SMALL, seed=9)
    short = fit_forest(X, y, ForestParams(ensemble_size=5), seed=9)
    assert [t.to_dict() for t in big.trees[:5]] == [t.to_dict() for t in short.trees]


def test_subsample_without_replacement():
    X, y = survival_data()
    f = fit_forest(X, y, SMALL, seed=1)
    for rows, tree in zip(f.subsamples, f.trees):
        assert len(rows) == round(0.632 * len(X)) and len(set(rows)) == len(rows)
        assert np.array_equal(np.sort(np.concatenate(list(tree.leaf_members.values()))), rows)


def test_save_load_round_trip(tmp_path):
    X, y = survival_data()
    f = fit_forest(X, y, SMALL, seed=2, feature_names=("a", "b", "c", "d"))
    f.meta = {"kind": "login"}
    for name in ("m.json", "m.bin"):
        f.save(tmp_path / name)
        g = Forest.load(tmp_path / name)
        assert g.to_dict() == f.to_dict()
        grid = np.linspace(0, 30, 7)
        assert np.array_equal(predict_survival(g, X[:5], grid), predict_survival(f, X[:5], grid))
    first = (tmp_path / "m.bin").read_bytes()
    f.save(tmp_path / "m.bin")
    assert (tmp_path / "m.bin").read_bytes() == first


def test_load_rejects_foreign_files(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        Forest.load(tmp_path / "x.json")


def test_root_leaf_forest_reduces_to_km():
    X, y = survival_data()
    f = fit_forest(X, y, ForestParams(ensemble_size=1, subsample=1.0, alpha=0.0), seed=0)
    assert f.trees[0].n_leaves == 1
    grid = np.linspace(0, 60, 61)
    km = kaplan_meier((y.times, y.events)).at(grid)
    pred = predict_survival(f, X[:10], grid)
    assert np.allclose(pred, km, atol=1e-12)


def test_root_leaf_binary_forest_gives_prevalence():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 3))
    labels = (rng.random(100) < 0.3).astype(float)
    f = fit_forest(X, BinaryResponse(labels), ForestParams(ensemble_size=1, subsample=1.0, alpha=0.0), seed=0)
    assert np.allclose(predict_probability(f, X[:4]), labels.mean())


def manual_forest(members_per_tree, labels=None, times=None, events=None):
    trees = []
    for members in members_per_tree:
        t = Tree()
        t._add()
        t.leaf_members[0] = np.asarray(members, dtype=np.int64)
        trees.append(t)
    survival = labels is None
    return Forest(trees=trees, subsamples=[np.asarray(m) for m in members_per_tree], params=ForestParams(),
                  seed=0, survival=survival, times=None if times is None else np.asarray(times, dtype=float),
                  events=None if events is None else np.asarray(events, dtype=bool),
                  labels=None if labels is None else np.asarray(labels, dtype=float))


def test_pure_leaf_probability_and_weighted_share():
    f = manual_forest([[0, 1]], labels=[1, 1, 0, 0, 0])
    assert predict_probability(f, [[0.0]]) == pytest.approx([1.0])
    # first tree: members 0..4 (3 positives), second tree: only positives
    f = manual_forest([[0, 1, 2, 3, 4], [0, 1, 2, 3, 4]], labels=[1, 1, 1, 0, 0])
    assert predict_probability(f, [[0.0]])[0] == pytest.approx(0.6)
    f = manual_forest([[0, 1, 2, 3, 4], [0]], labels=[1, 1, 1, 0, 0])
    # weights: 0.2 * 5 from tree one, 1.0 on row 0 from tree two -> (0.6 + 1) / 2
    assert predict_probability(f, [[0.0]])[0] == pytest.approx(0.8)


def test_isolated_event_leaf_steps_to_zero():
    f = manual_forest([[2]], times=[1.0, 3.0, 5.0, 9.0], events=[True, False, True, True])
    grid = np.array([0.0, 4.9, 5.0, 8.0])
    assert predict_survival(f, [[0.0]], grid)[0].tolist() == [1.0, 1.0, 0.0, 0.0]


def weights_oracle(forest, X):
    W = np.zeros((len(X), forest.n_train))
    for k in range(len(X)):
        for tree in forest.trees:
            leaf = int(tree.apply(X[k : k + 1])[0])
            members = tree.leaf_members[leaf]
            for i in members:
                W[k, i] += 1.0 / len(members)
    return W


def wkm_oracle(times, events, w, t):
    s = 1.0
    for u in sorted(set(times)):
        if u > t:
            break
        at_risk = sum(wi for ti, wi in zip(times, w) if ti >= u)
        d = sum(wi for ti, ei, wi in zip(times, events, w) if ti == u and ei)
        if at_risk > 0:
            s *= 1 - d / at_risk
    return s


def test_weights_and_weighted_km_match_loops():
    X, y = survival_data(120, seed=3)
    f = fit_forest(X, y, ForestParams(ensemble_size=6), seed=1)
    W = forest_weights(f, X[:6])
    assert np.allclose(W, weights_oracle(f, X[:6]), atol=1e-12)
    assert np.allclose(W.sum(axis=1), len(f.trees))
    grid = [0.0, 2.0, 7.5, 20.0, 80.0]
    got = weighted_km(y.times, y.events, W, grid)
    for k in range(6):
        want = [wkm_oracle(y.times, y.events, W[k], t) for t in grid]
        assert np.allclose(got[k], want, atol=1e-12)


def test_predictions_monotone_and_bounded_fuzzed():
    X, y = survival_data()
    f = fit_forest(X, y, SMALL, seed=0)
    rng = np.random.default_rng(5)
    probe = rng.normal(scale=3, size=(200, 4))
    grid = np.linspace(0, 100, 50)
    S = predict_survival(f, probe, grid)
    # rounding puts some events at t = 0, so S(0) is the weighted KM value there, not 1
    assert np.allclose(S[:, 0], weighted_km(y.times, y.events, forest_weights(f, probe), [0.0])[:, 0])
    assert (np.diff(S, axis=1) <= 1e-15).all() and (S >= 0).all() and (S <= 1).all()


def test_survival_starts_at_one_with_positive_times():
    X, y = survival_data()
    f = fit_forest(X, SurvivalResponse(y.times + 0.5, y.events), SMALL, seed=0)
    probe = np.random.default_rng(6).normal(scale=3, size=(50, 4))
    assert (predict_survival(f, probe, [0.0, 1.0])[:, 0] == 1.0).all()


def test_tree_order_does_not_matter():
    X, y = survival_data()
    f = fit_forest(X, y, SMALL, seed=0)
    g = Forest.from_dict(f.to_dict())
    g.trees = g.trees[::-1]
    g.subsamples = g.subsamples[::-1]
    grid = np.linspace(0, 50, 11)
    assert np.allclose(predict_survival(f, X[:20], grid), predict_survival(g, X[:20], grid), atol=1e-12)


def test_forest_separates_two_regimes():
    X, y = survival_data(600)
    f = fit_forest(X, y, ForestParams(ensemble_size=30), seed=0)
    S = predict_survival(f, np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0]]), [10.0])
    # true values are exp(-2) and exp(-0.25)
    assert S[0, 0] < 0.4 < 0.6 < S[1, 0]


def test_fit_errors():
    X, y = survival_data(20)
    with pytest.raises(ValueError, match="min_node"):
        fit_forest(X, y, ForestParams(ensemble_size=2))
    with pytest.raises(ValueError):
        fit_forest(np.zeros((0, 3)), y)
    with pytest.raises(ValueError):
        fit_forest(X, y, ForestParams(ensemble_size=0, min_node=2))
    f = fit_forest(X, y, ForestParams(ensemble_size=1, min_node=2), seed=0)
    with pytest.raises(ValueError):
        predict_probability(f, X)
    with pytest.raises(ValueError):
        predict_survival(f, X, [3.0, 1.0])


def test_single_tree_params():
    p = ForestParams.single_tree()
    assert p.ensemble_size == 1 and p.subsample == 1.0 and p.resolved_mtry(16) == 16
    assert ForestParams().resolved_mtry(16) == 4
    with pytest.raises(KeyError):
        ForestParams.from_dict({"trees": 3})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10), st.booleans(), st.floats(0, 3)), min_size=1, max_size=15))
def test_uniform_weights_equal_plain_km(data):
    t = np.array([a for a, _, _ in data], dtype=float)
    e = np.array([b for _, b, _ in data])
    grid = np.arange(0, 12, 0.5)
    assert np.allclose(weighted_km(t, e, np.ones(len(t)) * 2.5, grid)[0], kaplan_meier((t, e)).at(grid))
