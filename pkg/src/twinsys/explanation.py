"""Explanation-by-example assembly, feature-activation maps and rendering."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import network as nn
from .dataset import CLASSIFICATION, Case
from .errors import ExplanationError
from .retrieval import CaseIndex, Neighbor, retrieve, twin_predict
from .weighting import FeatureWeights, contributions, default_target, space_layer

SCHEMA_VERSION = "twinsys.explanation/1"
TEXT_WIDTH = 100


@dataclass
class FeatureActivationMap:
    layer: str
    map_index: int
    mask: np.ndarray
    threshold_quantile: float = 0.95
    contribution_of_unit: float = 0.0
    degenerate: bool = False
    # positive-contribution total of every candidate map
    map_scores: Optional[np.ndarray] = None
    # (row offset, col offset, factor) placing map units on the input grid
    placement: tuple[int, int, int] = (0, 0, 1)

    @property
    def selected_unit(self) -> tuple[str, int]:
        return (self.layer, self.map_index)

    def footprint(self, r: int, c: int) -> tuple[slice, slice]:
        """Input-pixel region covered by map unit (r, c) after upsampling."""
        ro, co, f = self.placement
        return slice(ro + r * f, ro + (r + 1) * f), slice(co + c * f, co + (c + 1) * f)

    def to_dict(self) -> dict:
        return {
            "selected_unit": [self.layer, self.map_index],
            "mask": self.mask.tolist(),
            "threshold_quantile": self.threshold_quantile,
            "contribution_of_unit": self.contribution_of_unit,
            "degenerate": self.degenerate,
            "map_scores": None if self.map_scores is None else self.map_scores.tolist(),
            "placement": list(self.placement),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureActivationMap":
        return cls(
            layer=d["selected_unit"][0],
            map_index=int(d["selected_unit"][1]),
            mask=np.asarray(d["mask"], dtype=float),
            threshold_quantile=d["threshold_quantile"],
            contribution_of_unit=d["contribution_of_unit"],
            degenerate=d["degenerate"],
            map_scores=None if d.get("map_scores") is None else np.asarray(d["map_scores"], dtype=float),
            placement=tuple(d.get("placement", (0, 0, 1))),
        )


@dataclass
class Prediction:
    label: Optional[int] = None
    probabilities: Optional[np.ndarray] = None
    value: Optional[float] = None

    def to_dict(self) -> dict:
        if self.label is not None:
            return {"label": self.label, "probabilities": self.probabilities.tolist()}
        return {"value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Prediction":
        if "label" in d:
            return cls(label=d["label"], probabilities=np.asarray(d["probabilities"], dtype=float))
        return cls(value=d["value"])


@dataclass
class TopFeature:
    name: str
    weight: float
    signed_contribution: Optional[float] = None


def _case_to_dict(case: Case) -> dict:
    return {
        "id": case.id,
        "origin": case.origin,
        "label": case.label,
        "features": np.asarray(case.features).tolist(),
        "raw": None if case.raw is None else base64.b64encode(case.raw).decode("ascii"),
    }


def _case_from_dict(d: dict) -> Case:
    return Case(
        id=d["id"],
        features=np.asarray(d["features"], dtype=float),
        label=d["label"],
        raw=None if d["raw"] is None else base64.b64decode(d["raw"]),
        origin=d["origin"],
    )


@dataclass
class Explanation:
    query: Case
    prediction: Prediction
    weights: FeatureWeights
    neighbors: list[tuple[Neighbor, Case]]
    twin_prediction: Union[int, float]
    agreement: Union[bool, float]
    top_features: Optional[list[TopFeature]] = None
    fam: Optional[FeatureActivationMap] = None
    feature_names: tuple[str, ...] = ()
    class_names: Optional[tuple[str, ...]] = None
    input_shape: tuple[int, ...] = ()
    task: str = CLASSIFICATION
    extra: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.neighbors)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "task": self.task,
            "input_shape": list(self.input_shape),
            "feature_names": list(self.feature_names),
            "class_names": None if self.class_names is None else list(self.class_names),
            "query": _case_to_dict(self.query),
            "prediction": self.prediction.to_dict(),
            "weights": self.weights.to_dict(),
            "neighbors": [
                {"rank": nb.rank, "case_id": nb.case_id, "distance": nb.distance, "case": _case_to_dict(c)}
                for nb, c in self.neighbors
            ],
            "twin_prediction": self.twin_prediction,
            "agreement": self.agreement,
            "top_features": None if self.top_features is None else [
                {"name": t.name, "weight": t.weight, "signed_contribution": t.signed_contribution}
                for t in self.top_features
            ],
            "fam": None if self.fam is None else self.fam.to_dict(),
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Explanation":
        if d.get("schema") != SCHEMA_VERSION:
            raise ExplanationError(f"unsupported explanation schema {d.get('schema')!r}")
        return cls(
            query=_case_from_dict(d["query"]),
            prediction=Prediction.from_dict(d["prediction"]),
            weights=FeatureWeights.from_dict(d["weights"]),
            neighbors=[(Neighbor(n["case_id"], n["distance"], n["rank"]), _case_from_dict(n["case"]))
                       for n in d["neighbors"]],
            twin_prediction=d["twin_prediction"],
            agreement=d["agreement"],
            top_features=None if d["top_features"] is None else [
                TopFeature(t["name"], t["weight"], t["signed_contribution"]) for t in d["top_features"]
            ],
            fam=None if d["fam"] is None else FeatureActivationMap.from_dict(d["fam"]),
            feature_names=tuple(d["feature_names"]),
            class_names=None if d["class_names"] is None else tuple(d["class_names"]),
            input_shape=tuple(d["input_shape"]),
            task=d["task"],
            extra=d.get("extra", {}),
        )


def space_feature_names(index: CaseIndex) -> tuple[str, ...]:
    name = space_layer(index.space)
    if name is None:
        return index.schema.feature_names
    return tuple(f"{name}[{i}]" for i in range(index.dim))


def _as_case(query, feature_count: int) -> Case:
    if isinstance(query, Case):
        return query
    x = np.asarray(query, dtype=np.float64).reshape(-1)
    if len(x) != feature_count:
        raise ExplanationError(f"query has {len(x)} features, schema has {feature_count}")
    return Case(id=-1, features=x, label=-1)


def top_features(weights: FeatureWeights, names: tuple[str, ...], m: int) -> list[TopFeature]:
    """The ``m`` heaviest features, ties broken by feature index."""
    w = weights.weights
    if not 1 <= m <= len(w):
        raise ExplanationError(f"top_m={m} out of range 1..{len(w)}")
    order = np.lexsort((np.arange(len(w)), -w))[:m]
    sc = weights.signed_contributions
    return [TopFeature(names[i], float(w[i]), None if sc is None else float(sc[i])) for i in order]


def explain(model: nn.NetworkModel, index: CaseIndex, weights: FeatureWeights, query, k: int = 3,
            top_m: Optional[int] = None) -> Explanation:
    """Predict with the network, then retrieve the ``k`` precedent cases that
    the weighted k-NN twin considers closest to the query."""
    schema = index.schema
    case = _as_case(query, schema.feature_count)
    x = np.asarray(case.features, dtype=np.float64)
    out = nn.predict(model, x)[0]
    if model.task == CLASSIFICATION:
        prediction = Prediction(label=int(out.argmax()), probabilities=out.copy())
    else:
        prediction = Prediction(value=float(out[0]))
    index.check_model(model)
    qvec = index.project(model, x)[0]
    neighbors = retrieve(index, qvec, weights, k)
    twin = twin_predict(neighbors, index, model.task)
    if model.task == CLASSIFICATION:
        agreement: Union[bool, float] = bool(twin == prediction.label)
    else:
        agreement = abs(float(twin) - prediction.value)
    tops = None if top_m is None else top_features(weights, space_feature_names(index), top_m)
    return Explanation(
        query=case,
        prediction=prediction,
        weights=weights,
        neighbors=[(nb, index.casebase[nb.case_id]) for nb in neighbors],
        twin_prediction=twin,
        agreement=agreement,
        top_features=tops,
        feature_names=schema.feature_names,
        class_names=schema.class_names,
        input_shape=schema.input_shape,
        task=model.task,
    )


# ---------------------------------------------------------------------------
# feature-activation maps
# ---------------------------------------------------------------------------

def last_conv_index(model: nn.NetworkModel) -> int:
    convs = [i for i, s in enumerate(model.layers) if s.kind == "conv2d"]
    if not convs:
        raise ExplanationError("no conv layer in model")
    return convs[-1]


def map_placement(model: nn.NetworkModel, layer_idx: int) -> tuple[int, int, int]:
    """(row offset, col offset, factor) mapping units of a conv output onto input pixels.

    The factor is the cumulative pooling downsampling; the offset accumulates
    each convolution's half-kernel shift (minus padding) at its own scale.
    """
    offset, factor = 0, 1
    for spec in model.layers[:layer_idx + 1]:
        if spec.kind == "conv2d":
            offset += ((spec.kernel - 1) // 2 - spec.padding) * factor
        elif spec.kind == "maxpool":
            factor *= 2
    return offset, offset, factor


def upsample(amap: np.ndarray, out_shape: tuple[int, int], placement: tuple[int, int, int]) -> np.ndarray:
    """Nearest-neighbour replication of ``amap`` onto an ``out_shape`` grid."""
    ro, co, f = placement
    big = np.kron(amap, np.ones((f, f)))
    out = np.zeros(out_shape)
    r0, c0 = max(ro, 0), max(co, 0)
    sr, sc = r0 - ro, c0 - co
    h = min(out_shape[0] - r0, big.shape[0] - sr)
    w = min(out_shape[1] - c0, big.shape[1] - sc)
    if h > 0 and w > 0:
        out[r0:r0 + h, c0:c0 + w] = big[sr:sr + h, sc:sc + w]
    return out


def map_scores(model: nn.NetworkModel, query, baseline, target: int, layer_idx: int) -> np.ndarray:
    """Sum of positive contributions of each feature map of ``layer_idx``."""
    name = model.layers[layer_idx].name
    C = contributions(model, query, baseline, target, f"layer:{name}")
    C = C.reshape(model.shapes[layer_idx])
    return np.maximum(C, 0.0).sum(axis=(1, 2))


def compute_fam(model: nn.NetworkModel, query, baseline=None, quantile: float = 0.95) -> FeatureActivationMap:
    """Mask of the last conv layer's feature map contributing most positively
    to the predicted class, upsampled to the input grid."""
    if len(model.input_shape) != 3:
        raise ExplanationError("FAM needs an image input (non-image model)")
    ci = last_conv_index(model)
    if not 0 < quantile <= 1:
        raise ExplanationError(f"threshold quantile must lie in (0, 1], got {quantile}")
    x = np.asarray(query, dtype=np.float64)
    if x.size != int(np.prod(model.input_shape)):
        raise ExplanationError("FAM query is not an image of the model's input shape")
    x = x.reshape(model.input_shape)
    b = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64).reshape(x.shape)
    target = default_target(model, x)
    scores = map_scores(model, x, b, target, ci)
    sel = int(scores.argmax())
    placement = map_placement(model, ci)
    hw = model.input_shape[1:]
    fam = FeatureActivationMap(model.layers[ci].name, sel, np.zeros(hw), quantile,
                               float(scores[sel]), True, scores, placement)
    if not scores[sel] > 0:
        return fam
    act = np.maximum(nn.forward_all(model, x, ci)[-1][0, sel], 0.0)
    lo, hi = act.min(), act.max()
    if not hi > 0:
        return fam
    norm = (act - lo) / (hi - lo) if hi > lo else np.ones_like(act)
    fam.mask = upsample(norm, hw, placement)
    fam.degenerate = False
    return fam


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _label_name(e: Explanation, label) -> str:
    if e.task != CLASSIFICATION:
        return f"{float(label):.6g}"
    if e.class_names is not None and 0 <= int(label) < len(e.class_names):
        return e.class_names[int(label)]
    return str(label)


def _clip(line: str) -> str:
    return line if len(line) <= TEXT_WIDTH else line[:TEXT_WIDTH - 3] + "..."


def render_text(e: Explanation) -> str:
    w = e.weights
    lines = []
    qid = "external" if e.query.id < 0 else str(e.query.id)
    lines.append(f"Query {qid}")
    if e.task == CLASSIFICATION:
        p = e.prediction
        lines.append(f"  network prediction: {_label_name(e, p.label)} (p={p.probabilities[p.label]:.4f})")
        lines.append(f"  twin prediction:    {_label_name(e, e.twin_prediction)} "
                     f"({'agrees' if e.agreement else 'disagrees'})")
    else:
        lines.append(f"  network prediction: {e.prediction.value:.6g}")
        lines.append(f"  twin prediction:    {float(e.twin_prediction):.6g} (abs error {e.agreement:.6g})")
    lines.append(f"  weights: scheme={w.provenance} scope={w.scope_label()} space={w.space}")
    lines.append(f"Nearest cases (k={e.k}):")
    lines.append(f"  {'rank':>4}  {'case':>6}  {'origin':>6}  {'distance':>12}  label")
    for nb, c in e.neighbors:
        origin = "-" if c.origin is None else str(c.origin)
        lines.append(f"  {nb.rank:>4}  {nb.case_id:>6}  {origin:>6}  {nb.distance:>12.6g}  {_label_name(e, c.label)}")
    if e.top_features:
        lines.append(f"Top features (m={len(e.top_features)}):")
        for t in e.top_features:
            sc = "" if t.signed_contribution is None else f"  contribution={t.signed_contribution:+.6g}"
            lines.append(f"  {t.name:<24} weight={t.weight:.6f}{sc}")
    if e.fam is not None:
        f = e.fam
        state = "degenerate (all-zero)" if f.degenerate else f"contribution={f.contribution_of_unit:.6g}"
        lines.append(f"FAM: layer={f.layer} map={f.map_index} {state} quantile={f.threshold_quantile}")
    return "\n".join(_clip(line) for line in lines) + "\n"


def _pgm(img: np.ndarray, comment: str = "") -> bytes:
    h, w = img.shape
    head = ["P2"]
    if comment:
        head.append(f"# {comment}")
    head += [f"{w} {h}", "255"]
    rows = []
    for row in img.astype(np.int64):
        vals = [str(int(v)) for v in row]
        # plain PGM lines must stay under 70 characters
        line = ""
        for v in vals:
            if len(line) + len(v) + 1 > 69:
                rows.append(line)
                line = v
            else:
                line = v if not line else f"{line} {v}"
        rows.append(line)
    return ("\n".join(head + rows) + "\n").encode("ascii")


def _image_of(case: Case, shape: tuple[int, ...], raw_required: bool) -> np.ndarray:
    h, w = shape[1], shape[2]
    if case.raw is not None:
        return np.frombuffer(case.raw, dtype=np.uint8)[: h * w].reshape(h, w)
    if raw_required:
        raise ExplanationError(f"case {case.id} has no raw image payload")
    x = np.asarray(case.features, dtype=float).reshape(shape)[0]
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def render_pgm_panels(e: Explanation) -> list[bytes]:
    """One P2 image per panel: the query first, then each neighbor in rank order."""
    if len(e.input_shape) != 3:
        raise ExplanationError("pgm rendering needs an image-shaped query (tabular explanation)")
    if e.input_shape[0] != 1:
        raise ExplanationError("pgm rendering supports single-channel images only")
    panels = [_pgm(_image_of(e.query, e.input_shape, False), "query")]
    for nb, c in e.neighbors:
        panels.append(_pgm(_image_of(c, e.input_shape, True),
                           f"neighbor rank {nb.rank} case {nb.case_id} distance {nb.distance:.6g}"))
    return panels


def render_pgm_strip(e: Explanation) -> bytes:
    """Query and neighbors side by side in one P2 image, separated by grey columns."""
    render_pgm_panels(e)  # validates
    imgs = [_image_of(e.query, e.input_shape, False)]
    imgs += [_image_of(c, e.input_shape, True) for _, c in e.neighbors]
    sep = np.full((imgs[0].shape[0], 1), 128, dtype=np.uint8)
    parts = []
    for i, img in enumerate(imgs):
        if i:
            parts.append(sep)
        parts.append(img)
    return _pgm(np.hstack(parts), "query | neighbors by rank")


def fam_overlay(fam: FeatureActivationMap) -> np.ndarray:
    """8-bit overlay: 255 where mask >= its quantile threshold, else scaled mask."""
    if fam.degenerate or not fam.mask.max() > 0:
        return np.zeros(fam.mask.shape, dtype=np.uint8)
    thr = np.quantile(fam.mask, fam.threshold_quantile)
    out = np.rint(fam.mask * 255.0)
    out[fam.mask >= thr] = 255
    return out.astype(np.uint8)


def render_fam_mask(fam: FeatureActivationMap) -> bytes:
    return _pgm(fam_overlay(fam), f"FAM layer {fam.layer} map {fam.map_index}")


def render(e: Explanation, fmt: str = "text") -> bytes:
    if fmt == "text":
        return render_text(e).encode("utf-8")
    if fmt == "json":
        return (json.dumps(e.to_dict(), indent=1) + "\n").encode("utf-8")
    if fmt == "pgm":
        return render_pgm_strip(e)
    raise ExplanationError(f"unknown format {fmt!r}; expected text, json or pgm")


def parse_json(data: Union[bytes, str]) -> Explanation:
    return Explanation.from_dict(json.loads(data))
