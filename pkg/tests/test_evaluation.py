import json

import numpy as np
import pytest

from conftest import L, classification_dataset, linear_model, regression_dataset
from oracles import parity_benchmark
from twinsys import network as nn
from twinsys.dataset import split
from twinsys.errors import EvaluationError
from twinsys.evaluation import THREADS_ENV, compare_schemes, fidelity, format_table, reports_to_json
from twinsys.retrieval import build_index
from twinsys.weighting import SchemeSpec


def threshold_model():
    """Predicts class 1 iff x0 > 0."""
    m = nn.build([L.dense(2, 2), L.of("softmax")], "classification", 0)
    m.params[0]["W"][:] = [[-5.0, 5.0], [0.0, 0.0]]
    return m


@pytest.fixture(scope="module")
def benchmark():
    return parity_benchmark(0)


class TestFidelity:
    def test_saturated_uniform(self):
        # case base labelled by the network itself, queries next to cases
        X = np.array([[-2.0, 0.0], [-1.0, 1.0], [1.0, 0.0], [2.0, -1.0]])
        m = threshold_model()
        train = classification_dataset(X, nn.predict_labels(m, X))
        test = classification_dataset(X + 0.1, np.zeros(4, int))
        rep = fidelity(m, build_index(train), "uniform", test, k=1)
        assert rep.agreement_rate == 1.0 and rep.matches == 4 and rep.n_queries == 4

    def test_three_of_four(self):
        X = np.array([[-2.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        m = threshold_model()
        y = nn.predict_labels(m, X)
        y[3] = 0  # one case carries the wrong label for the network
        train = classification_dataset(X, y)
        rep = fidelity(m, build_index(train), "uniform", classification_dataset(X, y), k=1)
        assert rep.matches == 3 and rep.agreement_rate == 0.75

    def test_compares_against_network_not_truth(self):
        X = np.array([[-1.0, 0.0], [1.0, 0.0]])
        m = threshold_model()
        train = classification_dataset(X, np.array([0, 1]))
        test = classification_dataset(X, np.array([1, 0]))  # ground truth disagrees everywhere
        assert fidelity(m, build_index(train), "uniform", test, k=1).agreement_rate == 1.0

    def test_provenance_overlap(self, rng):
        ds = classification_dataset(rng.standard_normal((10, 2)), rng.integers(0, 2, 10))
        train, test = split(ds, 0.3, seed=0)
        m = threshold_model()
        leaked = train.subset(np.array([0, 1]))
        with pytest.raises(EvaluationError, match="overlap"):
            fidelity(m, build_index(train), "uniform", leaked, k=1)
        assert fidelity(m, build_index(train), "uniform", test, k=1).n_queries == 3

    def test_regression_mae(self):
        X = np.array([[0.0], [1.0], [2.0]])
        m = linear_model([2.0])
        train = regression_dataset(X, np.array([0.0, 2.0, 4.0]))
        test = regression_dataset(np.array([[0.0], [1.0]]), np.zeros(2))
        rep = fidelity(m, build_index(train), "uniform", test, k=1)
        assert rep.mae == pytest.approx(0.0, abs=1e-6) and rep.agreement_rate is None

    def test_space_mismatch(self):
        m = nn.build([L.dense(2, 3), L.of("relu"), L.dense(3, 2), L.of("softmax")], "classification", 0)
        ds = classification_dataset(np.eye(2), np.array([0, 1]))
        with pytest.raises(EvaluationError):
            fidelity(m, build_index(ds), SchemeSpec("uniform", "layer:relu1"), ds, k=1)
        idx = build_index(ds, "layer:relu1", m)
        with pytest.raises(EvaluationError):
            fidelity(m, idx, "sensitivity", ds, k=1)
        assert fidelity(m, idx, SchemeSpec("contribution", "layer:relu1"), ds, k=1).n_queries == 2

    def test_threads_same_result(self, benchmark, monkeypatch):
        m, train, test, _ = benchmark
        idx = build_index(train)
        seq = fidelity(m, idx, "contribution", test, k=3)
        monkeypatch.setenv(THREADS_ENV, "4")
        par = fidelity(m, idx, "contribution", test, k=3)
        assert seq.to_dict(timing=False) == par.to_dict(timing=False)
        monkeypatch.setenv(THREADS_ENV, "x")
        with pytest.raises(EvaluationError):
            fidelity(m, idx, "uniform", test, k=3)


class TestCompare:
    def test_single_scheme_equals_fidelity(self, benchmark):
        m, train, test, _ = benchmark
        idx = build_index(train)
        (row,) = compare_schemes(m, idx, ["activity"], test, 3)
        assert row.to_dict(timing=False) == fidelity(m, idx, "activity", test, 3).to_dict(timing=False)

    def test_duplicate_scheme(self, benchmark):
        m, train, test, _ = benchmark
        a, b = compare_schemes(m, build_index(train), ["uniform", "uniform"], test, 3)
        assert a.to_dict(timing=False) == b.to_dict(timing=False)

    def test_sensitivity_beats_uniform(self, benchmark):
        m, train, test, _ = benchmark
        rows = compare_schemes(m, build_index(train), ["uniform", "sensitivity"], test, 3)
        assert [r.scheme for r in rows] == ["sensitivity", "uniform"]

    def test_table_and_json(self, benchmark):
        m, train, test, _ = benchmark
        rows = compare_schemes(m, build_index(train), ["uniform", "relevance"], test, 3)
        table = format_table(rows)
        lines = table.splitlines()
        assert len(lines) == 3 and lines[0].split()[:3] == ["rank", "scheme", "space"]
        assert "runtime" not in table and "runtime_ms" in format_table(rows, timing=True)
        parsed = json.loads(reports_to_json(rows))
        assert [r["scheme"] for r in parsed] == [r.scheme for r in rows]
        assert "runtime_ms" not in parsed[0]
