import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import L, classification_dataset, regression_dataset
from oracles import brute_force_knn
from twinsys import network as nn
from twinsys.errors import RetrievalError
from twinsys.retrieval import (Neighbor, build_index, index_from_json, index_to_json, majority_label, retrieve,
                               twin_predict)
from twinsys.weighting import FeatureWeights, uniform_weights


def fw(w, space="input"):
    return FeatureWeights("custom", np.asarray(w, dtype=float), space)


THREE = classification_dataset([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]], np.array([0, 1, 0]))


class TestBuildIndex:
    def test_input_space_copies_features(self):
        idx = build_index(THREE)
        assert idx.vectors.tolist() == THREE.X.tolist()
        assert idx.model_fingerprint is None

    def test_layer_space_schema_mismatch(self):
        m = nn.build([L.dense(3, 4), L.of("relu"), L.dense(4, 2), L.of("softmax")], "classification", 0)
        with pytest.raises(RetrievalError):
            build_index(THREE, "layer:relu1", m)

    def test_layer_space_needs_model(self):
        with pytest.raises(RetrievalError):
            build_index(THREE, "layer:relu1")

    def test_relu_space_non_negative(self, rng):
        m = nn.build([L.dense(2, 6), L.of("relu"), L.dense(6, 2), L.of("softmax")], "classification", 0)
        ds = classification_dataset(rng.standard_normal((30, 2)), rng.integers(0, 2, 30))
        idx = build_index(ds, "layer:relu1", m)
        assert idx.vectors.shape == (30, 6)
        assert np.all(idx.vectors >= 0)
        idx.check_model(m)
        other = nn.build([L.dense(2, 6), L.of("relu"), L.dense(6, 2), L.of("softmax")], "classification", 1)
        with pytest.raises(RetrievalError):
            idx.check_model(other)

    def test_json_round_trip(self, rng):
        m = nn.build([L.dense(2, 6), L.of("relu"), L.dense(6, 2), L.of("softmax")], "classification", 0)
        ds = classification_dataset(rng.standard_normal((10, 2)), rng.integers(0, 2, 10))
        idx = build_index(ds, "layer:relu1", m)
        back = index_from_json(index_to_json(idx), ds, m)
        assert back.vectors.tobytes() == idx.vectors.tobytes()
        # a changed model forces recomputation
        m.params[0]["b"][:] = 1.0
        again = index_from_json(index_to_json(idx), ds, m)
        assert again.model_fingerprint == m.fingerprint()
        assert not np.array_equal(again.vectors, idx.vectors)


class TestRetrieve:
    def test_uniform_example(self):
        nbs = retrieve(build_index(THREE), [0.9, 0.0], uniform_weights(2), 1)
        assert nbs[0].case_id == 1 and nbs[0].rank == 1
        assert abs(nbs[0].distance - np.sqrt(0.5 * 0.01)) < 1e-12

    def test_zero_weight_tie_goes_to_lower_id(self):
        idx = build_index(THREE)
        nbs = retrieve(idx, [0.9, 0.0], fw([0.0, 1.0]), 3)
        assert [n.case_id for n in nbs] == [0, 1, 2]
        assert [n.distance for n in nbs] == [0.0, 0.0, 2.0]

    def test_k_equals_n_sorted(self):
        nbs = retrieve(build_index(THREE), [0.0, 1.9], uniform_weights(2), 3)
        assert [n.case_id for n in nbs] == [2, 0, 1]
        assert [n.rank for n in nbs] == [1, 2, 3]
        assert all(a.distance <= b.distance for a, b in zip(nbs, nbs[1:]))

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(RetrievalError):
            retrieve(build_index(THREE), [0.0, 0.0], uniform_weights(2), k)

    def test_length_and_space_mismatch(self):
        idx = build_index(THREE)
        with pytest.raises(RetrievalError):
            retrieve(idx, [0.0, 0.0, 0.0], uniform_weights(2), 1)
        with pytest.raises(RetrievalError):
            retrieve(idx, [0.0, 0.0], uniform_weights(2, "layer:x"), 1)
        with pytest.raises(RetrievalError):
            retrieve(idx, [0.0, 0.0], fw([-1.0, 2.0]), 1)


class TestTwinPredict:
    def test_k1(self):
        idx = build_index(THREE)
        assert twin_predict([Neighbor(1, 0.3, 1)], idx) == 1

    def test_majority(self):
        assert majority_label([0, 1, 0]) == 0

    def test_tie_goes_to_rank_one(self):
        assert majority_label([1, 0, 0, 1]) == 1
        idx = build_index(THREE)
        assert twin_predict([Neighbor(1, 0.1, 1), Neighbor(0, 0.2, 2)], idx) == 1

    def test_regression_zero_distance_dominates(self):
        ds = regression_dataset([[0.0], [1.0]], np.array([10.0, 20.0]))
        idx = build_index(ds)
        pred = twin_predict([Neighbor(0, 0.0, 1), Neighbor(1, 1.0, 2)], idx)
        assert abs(pred - 10.0) < 1e-6

    def test_regression_inverse_distance(self):
        ds = regression_dataset([[0.0], [1.0]], np.array([10.0, 20.0]))
        pred = twin_predict([Neighbor(0, 1.0, 1), Neighbor(1, 3.0, 2)], build_index(ds))
        assert abs(pred - (10 / 1 + 20 / 3) / (1 + 1 / 3)) < 1e-6


@st.composite
def casebase(draw):
    n = draw(st.integers(1, 40))
    d = draw(st.integers(1, 6))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    X = rng.integers(-2, 3, size=(n, d)).astype(float)
    w = rng.random(d) * (rng.random(d) < 0.8)
    q = rng.integers(-2, 3, size=d).astype(float)
    k = draw(st.integers(1, n))
    return X, w, q, k


@settings(max_examples=100, deadline=None)
@given(casebase())
def test_matches_brute_force(args):
    X, w, q, k = args
    idx = build_index(regression_dataset(X))
    nbs = retrieve(idx, q, fw(w), k)
    ids, d2 = brute_force_knn(X, q, w, k)
    assert [n.case_id for n in nbs] == ids
    np.testing.assert_allclose([n.distance for n in nbs], np.sqrt(d2), rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(casebase(), st.floats(0.01, 100.0))
def test_scale_coherence(args, lam):
    X, w, q, k = args
    idx = build_index(regression_dataset(X))
    a = retrieve(idx, q, fw(w), k)
    b = retrieve(idx, q, fw(lam * w), k)
    assert [n.case_id for n in a] == [n.case_id for n in b]


@settings(max_examples=50, deadline=None)
@given(casebase(), st.floats(-5, 5))
def test_zero_weight_invisibility(args, shift):
    X, w, q, k = args
    w = w.copy()
    w[0] = 0.0
    idx = build_index(regression_dataset(X))
    q2 = q.copy()
    q2[0] += shift
    assert [n.case_id for n in retrieve(idx, q, fw(w), k)] == [n.case_id for n in retrieve(idx, q2, fw(w), k)]


@settings(max_examples=50, deadline=None)
@given(casebase(), st.data())
def test_self_retrieval(args, data):
    X, w, _, _ = args
    i = data.draw(st.integers(0, len(X) - 1))
    # the first copy of a duplicated row has the lowest id
    first = next(j for j in range(len(X)) if np.array_equal(X[j], X[i]) or (w * (X[j] - X[i]) ** 2).sum() == 0)
    nbs = retrieve(build_index(regression_dataset(X)), X[i], fw(w), 1)
    assert nbs[0].distance == 0.0 and nbs[0].case_id == first
