"""Feed-forward network (dense / conv2d / maxpool) written directly on numpy.

Every layer's weights and activations stay inspectable, which the weighting
schemes depend on. All computations are batched: arrays carry a leading
sample axis internally, and the single-example ``forward``/``gradients``
entry points wrap a batch of one.

Parameter layout: dense ``W`` is (in, out) so ``W[i, j]`` links input i to
unit j; conv2d ``W`` is (out_ch, in_ch, k, k).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import CLASSIFICATION, TASKS, Dataset
from .errors import ModelFormatError, ShapeError, TrainingError

FORMAT_VERSION = "v1"

PARAM_KINDS = ("dense", "conv2d")
ACTIVATION_KINDS = ("relu", "sigmoid", "softmax")
LAYER_KINDS = PARAM_KINDS + ("maxpool", "flatten") + ACTIVATION_KINDS


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    n_in: int = 0
    n_out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    @classmethod
    def dense(cls, n_in: int, n_out: int, name: str = "") -> "LayerSpec":
        return cls("dense", name, n_in, n_out)

    @classmethod
    def conv2d(cls, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
               name: str = "") -> "LayerSpec":
        return cls("conv2d", name, in_ch, out_ch, kernel, stride, padding)

    @classmethod
    def of(cls, kind: str, name: str = "") -> "LayerSpec":
        return cls(kind, name)

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "name": self.name}
        if self.kind == "dense":
            d.update({"in": self.n_in, "out": self.n_out})
        elif self.kind == "conv2d":
            d.update({"in_ch": self.n_in, "out_ch": self.n_out, "kernel": self.kernel,
                      "stride": self.stride, "padding": self.padding})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        try:
            kind = d["kind"]
            name = d.get("name", "")
            if kind == "dense":
                return cls.dense(int(d["in"]), int(d["out"]), name)
            if kind == "conv2d":
                return cls.conv2d(int(d["in_ch"]), int(d["out_ch"]), int(d["kernel"]),
                                  int(d.get("stride", 1)), int(d.get("padding", 0)), name)
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFormatError(f"malformed layer spec {d!r}: {e}") from None
        if kind not in LAYER_KINDS:
            raise ModelFormatError(f"unknown layer kind {kind!r}")
        return cls.of(kind, name)


@dataclass
class NetworkModel:
    layers: list[LayerSpec]
    params: list[Optional[dict[str, np.ndarray]]]
    task: str
    seed: int
    input_shape: tuple[int, ...]
    shapes: list[tuple[int, ...]] = field(default_factory=list)
    version: str = FORMAT_VERSION
    # free-form preprocessing metadata persisted with the model (schema, norm stats)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.shapes:
            self.shapes = infer_shapes(self.layers, self.task, self.input_shape)
        for spec, p in zip(self.layers, self.params):
            for key, shape in _param_shapes(spec).items():
                if p is None or key not in p or p[key].shape != shape:
                    raise ShapeError(f"layer {spec.name!r}: parameter {key} does not have shape {shape}")

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    @property
    def n_outputs(self) -> int:
        return int(np.prod(self.output_shape))

    @property
    def has_softmax(self) -> bool:
        return self.layers[-1].kind == "softmax"

    def layer_index(self, name: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.name == name:
                return i
        raise ShapeError(f"unknown layer {name!r}; layers are {[s.name for s in self.layers]}")

    def n_params(self) -> int:
        return sum(a.size for p in self.params if p for a in p.values())

    def fingerprint(self) -> str:
        payload = json.dumps(_model_payload(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


@dataclass
class TrainReport:
    epoch_loss: list[float]
    final_loss: float
    final_accuracy: Optional[float] = None
    final_mse: Optional[float] = None

    def summary(self) -> str:
        head = f"epochs={len(self.epoch_loss)} first_loss={self.epoch_loss[0]:.6g} final_loss={self.final_loss:.6g}"
        if self.final_accuracy is not None:
            return f"{head} train_accuracy={self.final_accuracy:.4f}"
        return f"{head} train_mse={self.final_mse:.6g}"


@dataclass
class Gradients:
    params: list[Optional[dict[str, np.ndarray]]]
    input: np.ndarray
    loss: float


def _param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "dense":
        return {"W": (spec.n_in, spec.n_out), "b": (spec.n_out,)}
    if spec.kind == "conv2d":
        return {"W": (spec.n_out, spec.n_in, spec.kernel, spec.kernel), "b": (spec.n_out,)}
    return {}


def infer_shapes(layers: Sequence[LayerSpec], task: str, input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Output shape (without batch axis) of every layer; validates the chain."""
    if task not in TASKS:
        raise ShapeError(f"unknown task {task!r}")
    if not layers:
        raise ShapeError("empty layer list")
    names = [s.name for s in layers]
    if len(set(names)) != len(names):
        raise ShapeError(f"layer names must be unique: {names}")
    shape = tuple(input_shape)
    shapes = []
    for i, spec in enumerate(layers):
        where = f"layer {i} ({spec.name})"
        if spec.kind not in LAYER_KINDS:
            raise ShapeError(f"{where}: unknown kind {spec.kind!r}")
        if spec.kind == "dense":
            if shape != (spec.n_in,):
                raise ShapeError(f"{where}: shape mismatch, dense expects ({spec.n_in},) but receives {shape}")
            if spec.n_out < 1:
                raise ShapeError(f"{where}: dense needs out >= 1")
            shape = (spec.n_out,)
        elif spec.kind == "conv2d":
            if len(shape) != 3 or shape[0] != spec.n_in:
                raise ShapeError(f"{where}: shape mismatch, conv2d expects ({spec.n_in}, H, W) but receives {shape}")
            if spec.stride != 1:
                raise ShapeError(f"{where}: only stride 1 is supported")
            if spec.kernel < 1 or spec.padding < 0 or spec.n_out < 1:
                raise ShapeError(f"{where}: invalid conv2d geometry")
            h = shape[1] + 2 * spec.padding - spec.kernel + 1
            w = shape[2] + 2 * spec.padding - spec.kernel + 1
            if h < 1 or w < 1:
                raise ShapeError(f"{where}: kernel {spec.kernel} larger than input {shape[1:]}")
            shape = (spec.n_out, h, w)
        elif spec.kind == "maxpool":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ShapeError(f"{where}: maxpool needs a (C, H>=2, W>=2) input, receives {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "softmax":
            if i != len(layers) - 1:
                raise ShapeError(f"{where}: softmax allowed only as the final layer")
            if task != CLASSIFICATION:
                raise ShapeError(f"{where}: softmax allowed only for classification")
            if len(shape) != 1:
                raise ShapeError(f"{where}: softmax needs a flat input")
        shapes.append(shape)
    if task == CLASSIFICATION and layers[-1].kind != "softmax":
        raise ShapeError("classification models must end with a softmax layer")
    return shapes


def _auto_name(specs: Sequence[LayerSpec]) -> list[LayerSpec]:
    out = []
    for i, s in enumerate(specs):
        if not s.name:
            s = LayerSpec(s.kind, f"{s.kind}{i}", s.n_in, s.n_out, s.kernel, s.stride, s.padding)
        out.append(s)
    return out


def build(specs: Sequence[LayerSpec], task: str, seed: int,
          input_shape: Optional[tuple[int, ...]] = None) -> NetworkModel:
    """Build a network with Glorot-uniform weights and zero biases.

    ``input_shape`` may be omitted for models whose first parametric layer is
    dense (it is then ``(in,)``); convolutional models need it for the
    spatial size.
    """
    specs = _auto_name(specs)
    if input_shape is None:
        first = specs[0]
        if first.kind == "dense":
            input_shape = (first.n_in,)
        else:
            raise ShapeError("input_shape is required unless the first layer is dense")
    shapes = infer_shapes(specs, task, tuple(input_shape))
    rng = np.random.default_rng(seed)
    params: list[Optional[dict]] = []
    for spec in specs:
        if spec.kind == "dense":
            fan_in, fan_out = spec.n_in, spec.n_out
        elif spec.kind == "conv2d":
            fan_in, fan_out = spec.n_in * spec.kernel ** 2, spec.n_out * spec.kernel ** 2
        else:
            params.append(None)
            continue
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        wshape = _param_shapes(spec)["W"]
        params.append({"W": rng.uniform(-limit, limit, size=wshape), "b": np.zeros(spec.n_out)})
    model = NetworkModel(list(specs), params, task, seed, tuple(input_shape), shapes)
    if model.n_params() == 0:
        raise ShapeError("network has no trainable parameters")
    return model


# ---------------------------------------------------------------------------
# layer primitives (batched)
# ---------------------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_forward(x: np.ndarray, W: np.ndarray, b: Optional[np.ndarray], padding: int) -> np.ndarray:
    k = W.shape[-1]
    win = sliding_window_view(_pad(x, padding), (k, k), axis=(2, 3))  # N,C,Ho,Wo,k,k
    out = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def _conv_backward_input(g: np.ndarray, W: np.ndarray, in_shape: tuple, padding: int) -> np.ndarray:
    n, c, h, w = in_shape
    k = W.shape[-1]
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + ho, j:j + wo] += np.tensordot(g, W[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def _conv_backward_weight(g: np.ndarray, x: np.ndarray, k: int, padding: int) -> np.ndarray:
    win = sliding_window_view(_pad(x, padding), (k, k), axis=(2, 3))
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,k,k


def _pool_argmax(x: np.ndarray) -> np.ndarray:
    """Index 0..3 of the first maximum inside each 2x2 window (row-major)."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(n, c, ho, wo, 4).argmax(axis=-1)


def pool_scatter(g: np.ndarray, arg: np.ndarray, in_shape: tuple) -> np.ndarray:
    """Route pooled-layer values ``g`` back to the window positions ``arg``."""
    n, c, h, w = in_shape
    ho, wo = g.shape[2], g.shape[3]
    onehot = (arg[..., None] == np.arange(4)) * g[..., None]  # n,c,ho,wo,4
    blocks = onehot.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    out = np.zeros(in_shape)
    out[:, :, :2 * ho, :2 * wo] = blocks
    return out


def layer_forward(model: NetworkModel, i: int, x: np.ndarray) -> np.ndarray:
    spec, p = model.layers[i], model.params[i]
    kind = spec.kind
    if kind == "dense":
        return x @ p["W"] + p["b"]
    if kind == "conv2d":
        return _conv_forward(x, p["W"], p["b"], spec.padding)
    if kind == "maxpool":
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        return x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).max(axis=(3, 5))
    if kind == "flatten":
        return x.reshape(len(x), -1)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return _sigmoid(x)
    return _softmax(x)


def linear_backward(model: NetworkModel, i: int, g: np.ndarray, in_shape: tuple) -> np.ndarray:
    """Propagate ``g`` through the weights of a linear layer (dense/conv2d/flatten)."""
    spec, p = model.layers[i], model.params[i]
    if spec.kind == "dense":
        return g @ p["W"].T
    if spec.kind == "conv2d":
        return _conv_backward_input(g, p["W"], in_shape, spec.padding)
    if spec.kind == "flatten":
        return g.reshape(in_shape)
    raise ShapeError(f"layer {spec.name!r} ({spec.kind}) is not linear")


def activation_derivative(kind: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise derivative of relu/sigmoid at input ``x`` (output ``y``)."""
    if kind == "relu":
        return (x > 0).astype(float)
    return y * (1.0 - y)


def _as_batch(model: NetworkModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    size = int(np.prod(model.input_shape))
    if X.size == 0 or X.size % size:
        raise ShapeError(f"input of shape {X.shape} does not match input shape {model.input_shape}")
    return X.reshape((-1,) + model.input_shape)


def forward_all(model: NetworkModel, X, stop: Optional[int] = None) -> list[np.ndarray]:
    """Return ``[input, out_0, out_1, ...]`` for a batch, up to layer ``stop`` inclusive."""
    acts = [_as_batch(model, X)]
    last = len(model.layers) - 1 if stop is None else stop
    for i in range(last + 1):
        acts.append(layer_forward(model, i, acts[-1]))
    return acts


def forward_from(model: NetworkModel, start: int, x: np.ndarray) -> list[np.ndarray]:
    """Run layers ``start..end`` on ``x`` (the input of layer ``start``)."""
    acts = [x]
    for i in range(start, len(model.layers)):
        acts.append(layer_forward(model, i, acts[-1]))
    return acts


def predict(model: NetworkModel, X) -> np.ndarray:
    """Batched output: class probabilities (classification) or real outputs."""
    return forward_all(model, X)[-1]


def logit_layer(model: NetworkModel) -> int:
    """Index of the layer whose output is the pre-softmax logit vector."""
    return len(model.layers) - 2 if model.has_softmax else len(model.layers) - 1


def penultimate_layer(model: NetworkModel) -> str:
    """Name of the layer whose output feeds the final parametric layer."""
    last = max(i for i, s in enumerate(model.layers) if s.kind in PARAM_KINDS)
    if last == 0:
        raise ShapeError("model has a single parametric layer; no penultimate layer")
    return model.layers[last - 1].name


def logits(model: NetworkModel, X) -> np.ndarray:
    """Batched pre-softmax outputs (identical to ``predict`` for regression)."""
    return forward_all(model, X, logit_layer(model))[-1]


def predict_labels(model: NetworkModel, X) -> np.ndarray:
    return predict(model, X).argmax(axis=1)


def forward(model: NetworkModel, x, capture: bool = False):
    """Single-example forward pass.

    Returns ``(output, trace)`` where ``trace`` maps layer name to that
    layer's output for this example, or is None unless ``capture``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size != int(np.prod(model.input_shape)):
        raise ShapeError(f"input of shape {x.shape} does not match input shape {model.input_shape}")
    acts = forward_all(model, x.reshape((1,) + model.input_shape))
    trace = None
    if capture:
        trace = {spec.name: a[0] for spec, a in zip(model.layers, acts[1:])}
    return acts[-1][0], trace


# ---------------------------------------------------------------------------
# losses and backprop
# ---------------------------------------------------------------------------

def _loss_and_output_grad(model: NetworkModel, acts: list[np.ndarray], T: np.ndarray):
    """Mean loss over the batch and its gradient w.r.t. the logits / output.

    For classification the returned gradient is w.r.t. the softmax input.
    """
    n = len(T)
    if model.task == CLASSIFICATION:
        z = acts[-2]
        t = np.asarray(T, dtype=np.int64).reshape(-1)
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        loss = float(np.mean(lse - z[np.arange(n), t]))
        g = acts[-1].copy()
        g[np.arange(n), t] -= 1.0
        return loss, g / n
    y = acts[-1]
    t = np.asarray(T, dtype=np.float64).reshape(y.shape)
    diff = y - t
    loss = float(np.mean(np.sum(diff ** 2, axis=1) / y.shape[1]))
    return loss, 2.0 * diff / (n * y.shape[1])


def backward(model: NetworkModel, acts: list[np.ndarray], g: np.ndarray, start: int,
             want_params: bool = True, stop: int = 0):
    """Backpropagate ``g`` (gradient w.r.t. the output of layer ``start``)
    down to the input of layer ``stop``.

    Returns ``(param_grads, grad_at_input_of_stop)``.
    """
    grads: list[Optional[dict]] = [None] * len(model.layers)
    for i in range(start, stop - 1, -1):
        spec, x, y = model.layers[i], acts[i], acts[i + 1]
        kind = spec.kind
        if kind == "dense":
            if want_params:
                grads[i] = {"W": x.T @ g, "b": g.sum(axis=0)}
            g = g @ model.params[i]["W"].T
        elif kind == "conv2d":
            if want_params:
                grads[i] = {"W": _conv_backward_weight(g, x, spec.kernel, spec.padding),
                            "b": g.sum(axis=(0, 2, 3))}
            g = _conv_backward_input(g, model.params[i]["W"], x.shape, spec.padding)
        elif kind == "maxpool":
            g = pool_scatter(g, _pool_argmax(x), x.shape)
        elif kind == "flatten":
            g = g.reshape(x.shape)
        elif kind in ("relu", "sigmoid"):
            g = g * activation_derivative(kind, x, y)
        else:  # softmax Jacobian-vector product
            g = y * (g - np.sum(g * y, axis=1, keepdims=True))
    return grads, g


def loss_and_gradients(model: NetworkModel, X, T):
    """Mean loss over a batch with exact parameter and input gradients."""
    acts = forward_all(model, X)
    loss, g = _loss_and_output_grad(model, acts, T)
    start = len(model.layers) - 1
    if model.task == CLASSIFICATION:
        start -= 1  # g is already w.r.t. the softmax input
    grads, gx = backward(model, acts, g, start)
    return loss, grads, gx


def loss_value(model: NetworkModel, X, T) -> float:
    return _loss_and_output_grad(model, forward_all(model, X), T)[0]


def gradients(model: NetworkModel, x, target) -> Gradients:
    """Exact gradients of the single-example loss (cross-entropy or MSE)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size != int(np.prod(model.input_shape)):
        raise ShapeError(f"input of shape {x.shape} does not match input shape {model.input_shape}")
    if model.task == CLASSIFICATION:
        t = int(target)
        if not 0 <= t < model.n_outputs:
            raise ShapeError(f"target class {t} out of range")
        T = np.array([t])
    else:
        T = np.asarray(target, dtype=np.float64).reshape(1, -1)
        if T.shape[1] != model.n_outputs:
            raise ShapeError(f"target size {T.shape[1]} does not match {model.n_outputs} outputs")
    loss, grads, gx = loss_and_gradients(model, x.reshape((1,) + model.input_shape), T)
    return Gradients(grads, gx[0].reshape(x.shape), loss)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class Hyper:
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        unknown = set(d) - {"lr", "momentum", "epochs", "batch_size", "seed"}
        if unknown:
            raise TrainingError(f"unknown hyperparameters {sorted(unknown)}")
        return cls(**d)


def _check_compatible(model: NetworkModel, data: Dataset) -> None:
    if data.schema.task != model.task:
        raise TrainingError(f"dataset task {data.schema.task} does not match model task {model.task}")
    if data.schema.feature_count != int(np.prod(model.input_shape)):
        raise TrainingError("dataset feature count does not match the model input")
    if model.task == CLASSIFICATION and data.schema.num_classes > model.n_outputs:
        raise TrainingError(f"{data.schema.num_classes} classes but only {model.n_outputs} outputs")


def evaluate_loss(model: NetworkModel, data: Dataset) -> tuple[float, float]:
    """Return (mean loss, accuracy or MSE) of the model on ``data``."""
    acts = forward_all(model, data.X)
    loss, _ = _loss_and_output_grad(model, acts, data.y)
    if model.task == CLASSIFICATION:
        return loss, float(np.mean(acts[-1].argmax(axis=1) == data.y))
    return loss, float(np.mean((acts[-1] - data.y.reshape(acts[-1].shape)) ** 2))


def train(model: NetworkModel, data: Dataset, hyper: Hyper) -> TrainReport:
    """Mini-batch SGD with classical momentum; mutates ``model`` in place."""
    if not hyper.lr >= 0:
        raise TrainingError(f"lr must be non-negative, got {hyper.lr}")
    if hyper.epochs < 1 or hyper.batch_size < 1:
        raise TrainingError("epochs and batch_size must be >= 1")
    _check_compatible(model, data)
    X, y = data.X, data.y
    n = len(X)
    rng = np.random.default_rng(hyper.seed)
    velocity = [None if p is None else {k: np.zeros_like(v) for k, v in p.items()} for p in model.params]
    epoch_loss = []
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for epoch in range(1, hyper.epochs + 1):
            order = rng.permutation(n)
            total = 0.0
            for b, start in enumerate(range(0, n, hyper.batch_size), start=1):
                idx = order[start:start + hyper.batch_size]
                loss, grads, _ = loss_and_gradients(model, X[idx], y[idx])
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
                total += loss * len(idx)
                for p, v, g in zip(model.params, velocity, grads):
                    if p is None:
                        continue
                    for k in p:
                        v[k] = hyper.momentum * v[k] - hyper.lr * g[k]
                        p[k] = p[k] + v[k]
                        if not np.all(np.isfinite(p[k])):
                            raise TrainingError(f"non-finite parameters at epoch {epoch}, batch {b}")
            epoch_loss.append(total / n)
        final_loss, metric = evaluate_loss(model, data)
    if not math.isfinite(final_loss):
        raise TrainingError(f"non-finite loss after epoch {hyper.epochs}")
    if model.task == CLASSIFICATION:
        return TrainReport(epoch_loss, final_loss, final_accuracy=metric)
    return TrainReport(epoch_loss, final_loss, final_mse=metric)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _model_payload(model: NetworkModel) -> dict:
    return {
        "version": model.version,
        "task": model.task,
        "seed": model.seed,
        "input_shape": list(model.input_shape),
        "layers": [s.to_dict() for s in model.layers],
        "params": [None if p is None else {k: p[k].tolist() for k in ("W", "b")} for p in model.params],
    }


def to_json(model: NetworkModel) -> str:
    payload = _model_payload(model)
    payload["meta"] = model.meta
    return json.dumps(payload)


def from_json(text: str) -> NetworkModel:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"malformed model file: {e}") from None
    if not isinstance(d, dict) or "version" not in d:
        raise ModelFormatError("malformed model file: missing version")
    if d["version"] != FORMAT_VERSION:
        raise ModelFormatError(f"version mismatch: file has {d['version']!r}, expected {FORMAT_VERSION!r}")
    try:
        layers = [LayerSpec.from_dict(s) for s in d["layers"]]
        raw_params = d["params"]
        if len(raw_params) != len(layers):
            raise ShapeError("parameter list length does not match layer count")
        params = [None if p is None else {k: np.asarray(p[k], dtype=np.float64) for k in ("W", "b")}
                  for p in raw_params]
        return NetworkModel(layers, params, d["task"], int(d["seed"]), tuple(d["input_shape"]),
                            meta=d.get("meta", {}))
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"malformed model file: {e}") from None
    except ShapeError as e:
        raise ModelFormatError(f"shape inconsistency: {e}") from None


def save(model: NetworkModel, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, to_json(model))


def load(path) -> NetworkModel:
    from pathlib import Path

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ModelFormatError(f"cannot read model file {path}: {e}") from None
    return from_json(text)
