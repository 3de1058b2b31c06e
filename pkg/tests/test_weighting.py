import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import L, classification_dataset, linear_model, regression_dataset
from oracles import lstsq_surrogate, permute_tabular
from twinsys import network as nn
from twinsys.errors import ShapeError, WeightingError
from twinsys.weighting import (GLOBAL_SCHEMES, FeatureWeights, SchemeSpec, SurrogateConfig, compute_weights,
                               contribution_weights, contributions, fit_surrogate, global_weights,
                               sensitivity_scores, surrogate_weights, uniform_weights)


def mlp(d, hidden, n_out, seed, act="relu", task="classification"):
    specs = [L.dense(d, hidden), L.of(act), L.dense(hidden, n_out)]
    if task == "classification":
        specs.append(L.of("softmax"))
    m = nn.build(specs, task, seed)
    rng = np.random.default_rng(seed + 1000)
    for p in m.params:
        if p is not None:
            p["b"][:] = 0.2 * rng.standard_normal(p["b"].shape)
    return m


class TestUniform:
    def test_values(self):
        assert uniform_weights(4).weights.tolist() == [0.25] * 4
        assert uniform_weights(1).weights.tolist() == [1.0]

    def test_zero_dim(self):
        with pytest.raises(WeightingError):
            uniform_weights(0)


class TestGlobal:
    def test_sensitivity_linear_zero_coefficient(self):
        m = linear_model([2.0, 0.0])
        train = regression_dataset([[-1.0, 5.0], [1.0, -5.0]])
        assert sensitivity_scores(m, train.X).tolist() == [2.0, 0.0]
        fw = global_weights(m, train, "sensitivity")
        assert fw.weights.tolist() == [1.0, 0.0]
        assert not fw.fallback and fw.scope_label() == "global"

    @pytest.mark.parametrize("scheme", GLOBAL_SCHEMES)
    def test_zero_coefficient_scores_zero_everywhere(self, scheme):
        m = nn.build([L.dense(2, 3), L.of("relu"), L.dense(3, 1)], "regression", 4)
        m.params[0]["W"][1, :] = 0.0
        m.params[0]["b"][:] = 0.5
        train = regression_dataset(np.random.default_rng(0).standard_normal((20, 2)))
        fw = global_weights(m, train, scheme)
        assert fw.weights[1] == 0.0 and fw.weights[0] == 1.0

    def test_activity_constant_hidden_falls_back(self):
        m = nn.build([L.dense(2, 3), L.of("relu"), L.dense(3, 2), L.of("softmax")], "classification", 0)
        m.params[0]["b"][:] = -100.0  # every hidden unit is dead on the data
        train = classification_dataset([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]], np.array([0, 1, 0]))
        fw = global_weights(m, train, "activity")
        assert fw.weights.tolist() == [0.5, 0.5]
        assert fw.fallback and fw.provenance == "uniform-fallback"
        assert fw.to_dict()["provenance"] == "uniform-fallback"

    def test_saliency_hand_example(self):
        m = nn.build([L.dense(2, 1), L.of("relu"), L.dense(1, 1)], "regression", 0)
        m.params[0]["W"][:, 0] = [3.0, 1.0]
        m.params[2]["W"][0, 0] = 2.0
        train = regression_dataset([[1.0, 1.0], [2.0, 0.5]])
        np.testing.assert_allclose(global_weights(m, train, "saliency").weights, [0.9, 0.1], atol=1e-15)

    def test_relevance_hand_example(self):
        # relevance = |W1| @ max_k |J|; J = W2 for a linear second layer
        m = nn.build([L.dense(2, 2), L.of("relu"), L.dense(2, 2), L.of("softmax")], "classification", 0)
        m.params[0]["W"][:] = [[1.0, 0.0], [0.0, 2.0]]
        m.params[2]["W"][:] = [[3.0, -1.0], [0.5, 0.5]]
        train = classification_dataset([[1.0, 1.0], [2.0, 3.0]], np.array([0, 1]))
        # raw = (1*3, 2*0.5) = (3, 1)
        np.testing.assert_allclose(global_weights(m, train, "relevance").weights, [0.75, 0.25], atol=1e-15)

    def test_activity_hand_example(self):
        m = nn.build([L.dense(2, 2), L.dense(2, 1)], "regression", 0)
        m.params[0]["W"][:] = [[1.0, 0.0], [1.0, 2.0]]
        train = regression_dataset([[0.0, 0.0], [2.0, 0.0]])
        # hidden = (x1+x2, 2*x2): variances (1, 0); raw = (1*1, 1*1 + 4*0) = (1, 1)
        np.testing.assert_allclose(global_weights(m, train, "activity").weights, [0.5, 0.5])

    def test_swap_features_swaps_weights(self):
        rng = np.random.default_rng(3)
        m = mlp(2, 5, 3, seed=3)
        X = rng.standard_normal((40, 2)) * [1.0, 3.0]
        mp, Xp = permute_tabular(m, X, [1, 0])
        for scheme in GLOBAL_SCHEMES:
            a = global_weights(m, classification_dataset(X, np.zeros(40, int), 3), scheme).weights
            b = global_weights(mp, classification_dataset(Xp, np.zeros(40, int), 3), scheme).weights
            np.testing.assert_allclose(b, a[::-1], atol=1e-12, err_msg=scheme)

    def test_conv_first_layer_rejected(self):
        m = nn.build([L.conv2d(1, 1, 1), L.of("flatten"), L.dense(4, 1)], "regression", 0, (1, 2, 2))
        train = regression_dataset(np.zeros((2, 4)))
        with pytest.raises(WeightingError, match="dense"):
            global_weights(m, train, "activity")
        # sensitivity is model-agnostic
        assert global_weights(m, train, "sensitivity").fallback

    def test_unknown_scheme(self):
        with pytest.raises(WeightingError):
            global_weights(linear_model([1.0]), regression_dataset([[0.0], [1.0]]), "magic")


class TestSurrogate:
    def _train(self, d=2, n=50, seed=0):
        return regression_dataset(np.random.default_rng(seed).standard_normal((n, d)))

    def test_linear_recovery(self):
        m = linear_model([3.0, -2.0], intercept=0.7)
        q = np.array([0.3, -0.4])
        train = self._train()
        fit = fit_surrogate(m, q, train, SurrogateConfig())
        np.testing.assert_allclose(fit.coef, [3.0, -2.0], atol=1e-3)
        oracle, _ = lstsq_surrogate(fit.samples, fit.targets, fit.proximity, q, 1e-6)
        np.testing.assert_allclose(fit.coef, oracle, atol=1e-9)
        fw = surrogate_weights(m, q, train, query_id=4)
        np.testing.assert_allclose(fw.weights, [0.6, 0.4], atol=1e-4)
        assert fw.scope_label() == "local:4"

    def test_constant_model_falls_back(self):
        m = linear_model([0.0, 0.0], intercept=5.0)
        fw = surrogate_weights(m, np.zeros(2), self._train())
        assert fw.fallback and fw.weights.tolist() == [0.5, 0.5]

    def test_underdetermined(self):
        with pytest.raises(WeightingError, match="underdetermined"):
            surrogate_weights(linear_model([1.0, 1.0]), np.zeros(2), self._train(), SurrogateConfig(n_samples=2))

    def test_seeded(self):
        m = mlp(3, 4, 2, seed=1)
        train = classification_dataset(np.random.default_rng(0).standard_normal((30, 3)), np.zeros(30, int))
        a = surrogate_weights(m, train.X[0], train, SurrogateConfig(seed=5)).weights
        b = surrogate_weights(m, train.X[0], train, SurrogateConfig(seed=5)).weights
        c = surrogate_weights(m, train.X[0], train, SurrogateConfig(seed=6)).weights
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()

    def test_query_shape(self):
        with pytest.raises(ShapeError):
            surrogate_weights(linear_model([1.0, 1.0]), np.zeros(3), self._train())


class TestContributions:
    def test_linear_case(self):
        m = linear_model([3.0, -2.0], intercept=1.0)
        C = contributions(m, [2.0, 1.0], [0.0, 0.0], 0)
        np.testing.assert_allclose(C, [6.0, -2.0])
        fw = contribution_weights(m, [2.0, 1.0], [0.0, 0.0])
        assert fw.weights.tolist() == [1.0, 0.0]
        assert fw.signed_contributions.tolist() == [6.0, -2.0]

    def test_query_equals_baseline(self):
        m = mlp(3, 4, 2, seed=0)
        q = np.array([0.1, 0.2, 0.3])
        fw = contribution_weights(m, q, q)
        assert not fw.signed_contributions.any()
        assert fw.fallback and np.allclose(fw.weights, 1 / 3)

    def test_summation_to_delta(self):
        rng = np.random.default_rng(0)
        m = mlp(3, 4, 2, seed=11)
        for _ in range(50):
            q, b = rng.standard_normal(3), rng.standard_normal(3)
            t = int(rng.integers(2))
            C = contributions(m, q, b, t)
            delta = nn.logits(m, q)[0, t] - nn.logits(m, b)[0, t]
            assert abs(C.sum() - delta) / max(1.0, abs(delta)) < 1e-6

    def test_layer_space_summation(self):
        rng = np.random.default_rng(1)
        m = nn.build([L.conv2d(1, 2, 3, padding=1), L.of("relu"), L.of("maxpool"), L.of("flatten"),
                      L.dense(8, 3), L.of("softmax")], "classification", 2, (1, 4, 4))
        m.params[0]["b"][:] = [0.1, -0.1]
        q, b = rng.standard_normal(16), rng.standard_normal(16)
        delta = nn.logits(m, q)[0, 1] - nn.logits(m, b)[0, 1]
        for space in ("input", "layer:conv2d0", "layer:relu1", "layer:maxpool2"):
            C = contributions(m, q, b, 1, space)
            assert abs(C.sum() - delta) < 1e-9, space
        assert len(contributions(m, q, b, 1, "layer:relu1")) == 32

    def test_sigmoid_near_equal_uses_derivative(self):
        m = nn.build([L.dense(1, 1), L.of("sigmoid"), L.dense(1, 1)], "regression", 0)
        m.params[0]["W"][:] = 1.0
        m.params[2]["W"][:] = 1.0
        C = contributions(m, [1e-9], [0.0], 0)
        np.testing.assert_allclose(C, [0.25e-9], rtol=1e-6)

    def test_errors(self):
        m = mlp(3, 4, 2, seed=0)
        with pytest.raises(ShapeError):
            contributions(m, np.zeros(3), np.zeros(2), 0)
        with pytest.raises(WeightingError):
            contributions(m, np.zeros(3), np.zeros(3), 5)
        with pytest.raises(ShapeError):
            contributions(m, np.zeros(3), np.zeros(3), 0, "layer:nope")


class TestDispatch:
    def test_layer_space_only_for_contribution_and_uniform(self):
        with pytest.raises(WeightingError):
            SchemeSpec("sensitivity", space="layer:relu1")
        SchemeSpec("contribution", space="layer:relu1")
        SchemeSpec("uniform", space="layer:relu1")

    def test_unknown_scheme_lists_valid(self):
        with pytest.raises(WeightingError, match="valid schemes"):
            SchemeSpec("bogus")

    def test_local_needs_query(self):
        m = mlp(2, 3, 2, seed=0)
        train = classification_dataset(np.eye(2), np.array([0, 1]))
        with pytest.raises(WeightingError):
            compute_weights("surrogate", m, train)

    def test_uniform_in_layer_space(self):
        m = mlp(2, 3, 2, seed=0)
        train = classification_dataset(np.eye(2), np.array([0, 1]))
        fw = compute_weights(SchemeSpec("uniform", "layer:relu1"), m, train)
        assert fw.weights.tolist() == [1 / 3] * 3 and fw.space == "layer:relu1"

    def test_round_trip_dict(self):
        m = mlp(3, 4, 2, seed=0)
        fw = contribution_weights(m, np.ones(3), np.zeros(3), query_id=7)
        back = FeatureWeights.from_dict(fw.to_dict())
        assert back.to_dict() == fw.to_dict()
        assert back.query_id == 7


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(2, 6))
def test_hygiene_all_schemes(seed, d):
    rng = np.random.default_rng(seed)
    m = mlp(d, int(rng.integers(2, 6)), 2, seed, act=str(rng.choice(["relu", "sigmoid"])))
    train = classification_dataset(rng.standard_normal((20, d)), rng.integers(0, 2, 20))
    q = rng.standard_normal(d)
    for name in ("uniform",) + GLOBAL_SCHEMES + ("surrogate", "contribution"):
        spec = SchemeSpec(name, surrogate=SurrogateConfig(n_samples=200))
        w = compute_weights(spec, m, train, query=q).weights
        assert np.all(np.isfinite(w)) and np.all(w >= 0), name
        assert abs(w.sum() - 1) <= 1e-9, name
