"""Feature weights extracted from a trained network.

Global schemes (sensitivity, activity, relevance, saliency) produce one
weight vector for the whole domain; local schemes (surrogate, contribution)
produce one per query. Every scheme returns non-negative weights summing to
one, falling back to uniform weights when all raw scores vanish.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import network as nn
from .dataset import CLASSIFICATION, Dataset
from .errors import ShapeError, WeightingError

GLOBAL_SCHEMES = ("sensitivity", "activity", "relevance", "saliency")
LOCAL_SCHEMES = ("surrogate", "contribution")
SCHEMES = GLOBAL_SCHEMES + LOCAL_SCHEMES + ("uniform",)

# below this |input difference| the Rescale rule uses the analytic derivative
RESCALE_EPS = 1e-7
# surrogate responses varying less than this (relative) count as constant
FLAT_RESPONSE_TOL = 1e-12

INPUT_SPACE = "input"


def layer_space(name: str) -> str:
    return f"layer:{name}"


def space_layer(space: str) -> Optional[str]:
    """Layer name of a ``layer:NAME`` space, None for the input space."""
    if space == INPUT_SPACE:
        return None
    if space.startswith("layer:") and len(space) > len("layer:"):
        return space[len("layer:"):]
    raise WeightingError(f"unknown feature space {space!r}; expected 'input' or 'layer:NAME'")


@dataclass
class FeatureWeights:
    scheme: str
    weights: np.ndarray
    space: str = INPUT_SPACE
    scope: str = "global"
    query_id: Optional[int] = None
    signed_contributions: Optional[np.ndarray] = None
    fallback: bool = False

    @property
    def provenance(self) -> str:
        return "uniform-fallback" if self.fallback else self.scheme

    def scope_label(self) -> str:
        if self.scope == "global":
            return "global"
        return "local" if self.query_id is None else f"local:{self.query_id}"

    def to_dict(self) -> dict:
        d = {
            "scheme": self.scheme,
            "scope": self.scope_label(),
            "space": self.space,
            "weights": self.weights.tolist(),
        }
        if self.fallback:
            d["provenance"] = "uniform-fallback"
        if self.signed_contributions is not None:
            d["signed_contributions"] = self.signed_contributions.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureWeights":
        scope, query_id = d["scope"], None
        if scope.startswith("local"):
            query_id = int(scope.split(":", 1)[1]) if ":" in scope else None
            scope = "local"
        sc = d.get("signed_contributions")
        return cls(
            scheme=d["scheme"],
            weights=np.asarray(d["weights"], dtype=float),
            space=d["space"],
            scope=scope,
            query_id=query_id,
            signed_contributions=None if sc is None else np.asarray(sc, dtype=float),
            fallback=d.get("provenance") == "uniform-fallback",
        )


def _finalize(scheme: str, raw: np.ndarray, space: str = INPUT_SPACE, query_id: Optional[int] = None,
              local: bool = False, signed: Optional[np.ndarray] = None) -> FeatureWeights:
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(raw)):
        raise WeightingError(f"{scheme}: non-finite raw scores")
    if np.any(raw < 0):
        raise WeightingError(f"{scheme}: negative raw scores")
    total = raw.sum()
    fallback = not total > 0
    w = np.full(len(raw), 1.0 / len(raw)) if fallback else raw / total
    return FeatureWeights(scheme, w, space, "local" if local else "global",
                          query_id if local else None, signed, fallback)


def uniform_weights(d: int, space: str = INPUT_SPACE) -> FeatureWeights:
    if d < 1:
        raise WeightingError(f"uniform weights need d >= 1, got {d}")
    return FeatureWeights("uniform", np.full(d, 1.0 / d), space)


# ---------------------------------------------------------------------------
# global schemes
# ---------------------------------------------------------------------------

def _first_hidden(model: nn.NetworkModel, scheme: str) -> tuple[int, int]:
    """(index of the first dense layer, index of its post-activation output)."""
    for i, spec in enumerate(model.layers):
        if spec.kind == "flatten":
            continue
        if spec.kind != "dense":
            raise WeightingError(
                f"{scheme} needs a first dense layer over the input, but layer {i} "
                f"({spec.name!r}) is {spec.kind}"
            )
        nxt = model.layers[i + 1].kind if i + 1 < len(model.layers) else None
        return i, (i + 1 if nxt in ("relu", "sigmoid") else i)
    raise WeightingError(f"{scheme}: model has no dense layer")


def _hidden_jacobian(model: nn.NetworkModel, X: np.ndarray, h_idx: int) -> np.ndarray:
    """Mean over X of d logits / d first-hidden activations, shape (units, outputs)."""
    top = nn.logit_layer(model)
    if h_idx >= top:
        return np.eye(model.shapes[h_idx][0])
    acts = nn.forward_all(model, X, top)
    n_out = acts[-1].shape[1]
    cols = []
    for k in range(n_out):
        g = np.zeros_like(acts[-1])
        g[:, k] = 1.0
        _, gh = nn.backward(model, acts, g, top, want_params=False, stop=h_idx + 1)
        cols.append(gh.mean(axis=0))
    return np.stack(cols, axis=1)


def sensitivity_scores(model: nn.NetworkModel, X: np.ndarray) -> np.ndarray:
    """Mean L1 change of the output vector when each feature is set to its mean."""
    mu = X.mean(axis=0)
    base = nn.predict(model, X)
    raw = np.empty(X.shape[1])
    for i in range(X.shape[1]):
        Xi = X.copy()
        Xi[:, i] = mu[i]
        raw[i] = np.abs(base - nn.predict(model, Xi)).sum(axis=1).mean()
    return raw


def global_weights(model: nn.NetworkModel, train: Dataset, scheme: str) -> FeatureWeights:
    """Global weights over the input features from one of the four MLP schemes."""
    if scheme not in GLOBAL_SCHEMES:
        raise WeightingError(f"unknown global scheme {scheme!r}; expected one of {GLOBAL_SCHEMES}")
    if len(train) == 0:
        raise WeightingError("empty dataset")
    X = train.X
    if X.shape[1] != int(np.prod(model.input_shape)):
        raise WeightingError("dataset features do not match the model input")
    if scheme == "sensitivity":
        return _finalize(scheme, sensitivity_scores(model, X))

    d_idx, h_idx = _first_hidden(model, scheme)
    W1 = model.params[d_idx]["W"]
    if scheme == "activity":
        H = nn.forward_all(model, X, h_idx)[-1]
        raw = (W1 ** 2) @ H.var(axis=0)
    else:
        J = _hidden_jacobian(model, X, h_idx)
        if scheme == "saliency":
            raw = (W1 ** 2) @ (J ** 2).sum(axis=1)
        else:
            raw = np.abs(W1) @ np.abs(J).max(axis=1)
    return _finalize(scheme, raw)


# ---------------------------------------------------------------------------
# local surrogate
# ---------------------------------------------------------------------------

@dataclass
class SurrogateConfig:
    n_samples: int = 1000
    perturb_scale: float = 0.3
    # None means 0.75 * sqrt(d)
    kernel_width: Optional[float] = None
    ridge: float = 1e-6
    seed: int = 0

    def validate(self, d: int) -> None:
        if self.n_samples < 1 or not self.perturb_scale > 0:
            raise WeightingError("surrogate n_samples and perturb_scale must be positive")
        if self.kernel_width is not None and not self.kernel_width > 0:
            raise WeightingError("surrogate kernel_width must be positive")
        if not self.ridge >= 0:
            raise WeightingError("surrogate ridge must be non-negative")
        if self.n_samples < d + 1:
            raise WeightingError(f"underdetermined surrogate: n_samples={self.n_samples} < d+1={d + 1}")

    def width(self, d: int) -> float:
        return 0.75 * math.sqrt(d) if self.kernel_width is None else self.kernel_width


@dataclass
class SurrogateFit:
    coef: np.ndarray
    intercept: float
    samples: np.ndarray
    targets: np.ndarray
    proximity: np.ndarray
    output_index: int


def perturbation_sample(query: np.ndarray, train: Dataset, cfg: SurrogateConfig) -> np.ndarray:
    """Gaussian perturbations around ``query`` scaled by per-feature train std."""
    sigma = train.X.std(axis=0)
    sigma = np.where(sigma == 0, 1.0, sigma)
    rng = np.random.default_rng(cfg.seed)
    eps = rng.standard_normal((cfg.n_samples, len(query))) * (cfg.perturb_scale * sigma)
    return query + eps


def fit_surrogate(model: nn.NetworkModel, query, train: Dataset, cfg: SurrogateConfig) -> SurrogateFit:
    """Proximity-weighted ridge regression of the model output around ``query``.

    The response is the probability of the query's predicted class for
    classifiers, and the first output for regressors. The intercept is not
    penalized.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    d = len(q)
    if d < 1:
        raise WeightingError("surrogate needs d >= 1")
    if d != train.schema.feature_count:
        raise ShapeError(f"query has {d} features, dataset has {train.schema.feature_count}")
    cfg.validate(d)
    samples = perturbation_sample(q, train, cfg)
    out = nn.predict(model, samples)
    k = int(nn.predict(model, q).argmax()) if model.task == CLASSIFICATION else 0
    y = out[:, k]
    if not np.all(np.isfinite(y)):
        raise WeightingError("non-finite model outputs on surrogate perturbations")
    Z = samples - q
    pi = np.exp(-np.sum(Z ** 2, axis=1) / cfg.width(d) ** 2)
    if np.ptp(y) <= FLAT_RESPONSE_TOL * max(1.0, float(np.abs(y).max())):
        # a flat response would otherwise yield round-off coefficients
        return SurrogateFit(np.zeros(d), float(y.mean()), samples, y, pi, k)
    A = np.hstack([np.ones((len(Z), 1)), Z])
    Aw = A * pi[:, None]
    lhs = A.T @ Aw
    lhs[1:, 1:] += cfg.ridge * np.eye(d)
    rhs = Aw.T @ y
    try:
        beta = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        beta = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    return SurrogateFit(beta[1:], float(beta[0]), samples, y, pi, k)


def surrogate_weights(model: nn.NetworkModel, query, train: Dataset,
                      cfg: Optional[SurrogateConfig] = None, query_id: Optional[int] = None) -> FeatureWeights:
    fit = fit_surrogate(model, query, train, cfg or SurrogateConfig())
    return _finalize("surrogate", np.abs(fit.coef), INPUT_SPACE, query_id, local=True)


# ---------------------------------------------------------------------------
# contribution propagation (Rescale rule)
# ---------------------------------------------------------------------------

def _rescale_pool(m: np.ndarray, xq: np.ndarray, xb: np.ndarray, yq: np.ndarray, yb: np.ndarray) -> np.ndarray:
    """Send each window's multiplier to one input position, rescaled so the
    window's contribution equals ``m * (yq - yb)``.

    The position is the query's max, unless the input difference there is
    negligible; then the position with the largest difference is used.
    """
    n, c, h, w = xq.shape
    ho, wo = h // 2, w // 2

    def windows(a):
        return a[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)

    wq, wd = windows(xq), windows(xq - xb)
    arg = wq.argmax(axis=-1)
    din = np.take_along_axis(wd, arg[..., None], axis=-1)[..., 0]
    small = np.abs(din) < RESCALE_EPS
    if np.any(small):
        alt = np.abs(wd).argmax(axis=-1)
        arg = np.where(small, alt, arg)
        din = np.take_along_axis(wd, arg[..., None], axis=-1)[..., 0]
    dout = yq - yb
    ok = np.abs(din) >= RESCALE_EPS
    factor = np.divide(dout, din, out=np.ones_like(dout), where=ok)
    return nn.pool_scatter(m * factor, arg, xq.shape)


def contributions(model: nn.NetworkModel, query, baseline, target: int,
                  space: str = INPUT_SPACE) -> np.ndarray:
    """Signed contributions of the units of ``space`` to one output logit.

    Multipliers are propagated backwards from the target pre-softmax logit:
    linear layers pass them through their weights, relu/sigmoid scale them by
    the finite-difference slope between query and baseline, and maxpool
    routes them to the query's selected window positions. The result sums to
    ``logit(query) - logit(baseline)`` for the target.
    """
    q = np.asarray(query, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if q.shape != b.shape:
        raise ShapeError(f"baseline shape {b.shape} does not match query shape {q.shape}")
    top = nn.logit_layer(model)
    n_out = model.shapes[top][0] if len(model.shapes[top]) == 1 else int(np.prod(model.shapes[top]))
    if not 0 <= int(target) < n_out:
        raise WeightingError(f"invalid target index {target}; model has {n_out} outputs")
    name = space_layer(space)
    stop = -1 if name is None else model.layer_index(name)
    if stop > top:
        raise WeightingError(f"layer {name!r} lies above the logit layer")
    pair = np.stack([q.reshape(model.input_shape), b.reshape(model.input_shape)])
    acts = nn.forward_all(model, pair, top)
    m = np.zeros((1,) + acts[-1].shape[1:])
    m.reshape(-1)[int(target)] = 1.0
    for i in range(top, stop, -1):
        kind = model.layers[i].kind
        x, y = acts[i], acts[i + 1]
        if kind in ("dense", "conv2d", "flatten"):
            m = nn.linear_backward(model, i, m, (1,) + x.shape[1:])
        elif kind in ("relu", "sigmoid"):
            dx, dy = x[0] - x[1], y[0] - y[1]
            deriv = nn.activation_derivative(kind, x[1], y[1])
            ok = np.abs(dx) >= RESCALE_EPS
            ratio = np.where(ok, np.divide(dy, dx, out=np.zeros_like(dx), where=ok), deriv)
            m = m * ratio
        elif kind == "maxpool":
            m = _rescale_pool(m, x[:1], x[1:], y[:1], y[1:])
        else:
            raise WeightingError(f"cannot propagate contributions through {kind}")
    delta = acts[stop + 1][0] - acts[stop + 1][1]
    return (m[0] * delta).reshape(-1)


def default_baseline(train: Dataset) -> np.ndarray:
    """All-zeros image for image data, the train feature mean otherwise."""
    if train.schema.is_image:
        return np.zeros(train.schema.feature_count)
    return train.X.mean(axis=0)


def default_target(model: nn.NetworkModel, query) -> int:
    """Predicted class for classifiers, output 0 for regressors."""
    if model.task == CLASSIFICATION:
        return int(nn.predict(model, query)[0].argmax())
    return 0


def contribution_weights(model: nn.NetworkModel, query, baseline, target: Optional[int] = None,
                         space: str = INPUT_SPACE, query_id: Optional[int] = None) -> FeatureWeights:
    if target is None:
        target = default_target(model, query)
    C = contributions(model, query, baseline, target, space)
    return _finalize("contribution", np.maximum(C, 0.0), space, query_id, local=True, signed=C)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

@dataclass
class SchemeSpec:
    """A scheme name plus the knobs local schemes need."""

    name: str
    space: str = INPUT_SPACE
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    baseline: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.name not in SCHEMES:
            raise WeightingError(f"unknown scheme {self.name!r}; valid schemes: {', '.join(SCHEMES)}")
        space_layer(self.space)
        if self.space != INPUT_SPACE and self.name not in ("contribution", "uniform"):
            raise WeightingError(f"scheme {self.name} supports only the input space, not {self.space}")

    @property
    def is_local(self) -> bool:
        return self.name in LOCAL_SCHEMES

    @property
    def label(self) -> str:
        return self.name if self.space == INPUT_SPACE else f"{self.name}@{self.space}"


def space_dim(model: Optional[nn.NetworkModel], train: Dataset, space: str) -> int:
    name = space_layer(space)
    if name is None:
        return train.schema.feature_count
    if model is None:
        raise WeightingError(f"space {space} needs a model")
    return int(np.prod(model.shapes[model.layer_index(name)]))


def compute_weights(spec: Union[SchemeSpec, str], model: nn.NetworkModel, train: Dataset,
                    query=None, query_id: Optional[int] = None) -> FeatureWeights:
    """Weights for any scheme; local schemes need ``query``."""
    if isinstance(spec, str):
        spec = SchemeSpec(spec)
    if spec.name == "uniform":
        return uniform_weights(space_dim(model, train, spec.space), spec.space)
    if spec.name in GLOBAL_SCHEMES:
        return global_weights(model, train, spec.name)
    if query is None:
        raise WeightingError(f"local scheme {spec.name} needs a query")
    if spec.name == "surrogate":
        return surrogate_weights(model, query, train, spec.surrogate, query_id)
    baseline = default_baseline(train) if spec.baseline is None else spec.baseline
    return contribution_weights(model, query, baseline, space=spec.space, query_id=query_id)
