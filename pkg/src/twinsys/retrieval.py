"""Case base and exact feature-weighted k-NN retrieval.

Retrieval runs either over the raw input features or over the flattened
activations of a network layer (latent twinning). The scan is always
exhaustive; ties are broken by ascending case id.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import network as nn
from .dataset import CLASSIFICATION, Dataset, FeatureSchema
from .errors import RetrievalError, ShapeError
from .weighting import INPUT_SPACE, FeatureWeights, space_layer

# inverse-distance weights for regression use 1 / (d + eps)
IDW_EPS = 1e-9


@dataclass(frozen=True)
class Neighbor:
    case_id: int
    distance: float
    rank: int


@dataclass(frozen=True, eq=False)
class CaseIndex:
    casebase: Dataset
    space: str
    vectors: np.ndarray
    model_fingerprint: Optional[str] = None

    @property
    def schema(self) -> FeatureSchema:
        return self.casebase.schema

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def check_model(self, model: Optional[nn.NetworkModel]) -> None:
        """Raise unless latent vectors were produced by ``model``."""
        if self.space == INPUT_SPACE:
            return
        if model is None or model.fingerprint() != self.model_fingerprint:
            raise RetrievalError("latent index was built from a different model")

    def project(self, model: Optional[nn.NetworkModel], X) -> np.ndarray:
        """Map raw inputs (batch or single) into this index's space."""
        return project(model, self.space, X, self.casebase.schema.feature_count)

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "fingerprint": self.model_fingerprint,
            "case_ids": self.casebase.provenance().tolist(),
            "vectors": self.vectors.tolist(),
        }


def project(model: Optional[nn.NetworkModel], space: str, X, feature_count: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(-1, feature_count)
    name = space_layer(space)
    if name is None:
        return X.copy()
    if model is None:
        raise RetrievalError(f"space {space} needs a model")
    try:
        idx = model.layer_index(name)
        out = nn.forward_all(model, X, idx)[-1]
    except ShapeError as e:
        raise RetrievalError(str(e)) from None
    return out.reshape(len(X), -1)


def build_index(train: Dataset, space: str = INPUT_SPACE, model: Optional[nn.NetworkModel] = None) -> CaseIndex:
    """Index the training cases in the input space or a model layer's space."""
    name = space_layer(space)
    fingerprint = None
    if name is not None:
        if model is None:
            raise RetrievalError(f"model missing for latent space {space}")
        if int(np.prod(model.input_shape)) != train.schema.feature_count:
            raise RetrievalError("dataset schema does not match the model input")
        fingerprint = model.fingerprint()
    vectors = project(model, space, train.X, train.schema.feature_count)
    if not np.all(np.isfinite(vectors)):
        raise RetrievalError("non-finite index vectors")
    vectors.setflags(write=False)
    return CaseIndex(train, space, vectors, fingerprint)


def index_to_json(index: CaseIndex) -> str:
    return json.dumps(index.to_dict())


def index_from_json(text: str, train: Dataset, model: Optional[nn.NetworkModel] = None) -> CaseIndex:
    """Restore a persisted index; latent vectors are recomputed unless the
    stored fingerprint matches ``model``."""
    d = json.loads(text)
    if d["case_ids"] != train.provenance().tolist():
        raise RetrievalError("persisted index does not describe this case base")
    space = d["space"]
    if space_layer(space) is not None and (model is None or model.fingerprint() != d["fingerprint"]):
        return build_index(train, space, model)
    vectors = np.asarray(d["vectors"], dtype=np.float64).reshape(len(train), -1)
    vectors.setflags(write=False)
    return CaseIndex(train, space, vectors, d["fingerprint"])


def weighted_sq_distances(vectors: np.ndarray, query: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return ((vectors - query) ** 2 * weights).sum(axis=1)


def retrieve(index: CaseIndex, query_vec, weights: FeatureWeights, k: int) -> list[Neighbor]:
    """The ``k`` nearest cases under ``sqrt(sum_i w_i (q_i - c_i)^2)``."""
    if weights.space != index.space:
        raise RetrievalError(f"weights are over {weights.space!r} but the index is over {index.space!r}")
    w = np.asarray(weights.weights, dtype=np.float64)
    q = np.asarray(query_vec, dtype=np.float64).reshape(-1)
    if len(w) != index.dim or len(q) != index.dim:
        raise RetrievalError(f"length mismatch: index dim {index.dim}, weights {len(w)}, query {len(q)}")
    if not np.all(np.isfinite(q)):
        raise RetrievalError("query vector must be finite")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise RetrievalError("weights must be finite and non-negative")
    if not 1 <= k <= len(index):
        raise RetrievalError(f"k={k} out of range 1..{len(index)}")
    # ranking runs on weights scaled to max 1: uniform weights then reproduce
    # plain Euclidean sums bitwise, so tie structure is preserved
    wmax = w.max()
    scale = w / wmax if wmax > 0 else w
    sq = weighted_sq_distances(index.vectors, q, scale)
    order = np.lexsort((np.arange(len(sq)), sq))[:k]
    dist = np.sqrt(sq[order] * wmax)
    return [Neighbor(int(i), float(dv), r) for r, (i, dv) in enumerate(zip(order, dist), start=1)]


def majority_label(labels: Sequence[int]) -> int:
    """Most frequent label; ties go to the tied label that ranks first."""
    counts = Counter(labels)
    best = max(counts.values())
    for label in labels:
        if counts[label] == best:
            return label
    raise RetrievalError("empty neighbor list")


def twin_predict(neighbors: Sequence[Neighbor], index: CaseIndex, task: Optional[str] = None):
    """The k-NN twin's own prediction from its retrieved neighbors."""
    if not neighbors:
        raise RetrievalError("empty neighbor list")
    task = task or index.schema.task
    ranked = sorted(neighbors, key=lambda nb: nb.rank)
    labels = index.casebase.y
    if task == CLASSIFICATION:
        return majority_label([int(labels[nb.case_id]) for nb in ranked])
    w = np.array([1.0 / (nb.distance + IDW_EPS) for nb in ranked])
    t = np.array([float(labels[nb.case_id]) for nb in ranked])
    return float((w * t).sum() / w.sum())
