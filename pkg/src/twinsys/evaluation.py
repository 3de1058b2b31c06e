"""Twin fidelity: how often the weighted k-NN twin reproduces the network."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import network as nn
from .dataset import CLASSIFICATION, Dataset
from .errors import EvaluationError, WeightingError
from .retrieval import CaseIndex, retrieve, twin_predict
from .weighting import SchemeSpec, compute_weights

THREADS_ENV = "TWINSYS_THREADS"


def thread_count() -> int:
    """Worker cap from TWINSYS_THREADS; 0 or unset means sequential."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 0
    try:
        n = int(raw)
    except ValueError:
        raise EvaluationError(f"{THREADS_ENV} must be a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise EvaluationError(f"{THREADS_ENV} must be a non-negative integer, got {raw!r}")
    return n


@dataclass
class FidelityReport:
    scheme: str
    space: str
    k: int
    n_queries: int
    seed: int
    matches: Optional[int] = None
    agreement_rate: Optional[float] = None
    mae: Optional[float] = None
    runtime_ms: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "scheme": self.scheme,
            "space": self.space,
            "k": self.k,
            "n_queries": self.n_queries,
            "seed": self.seed,
        }
        if self.agreement_rate is not None:
            d.update(matches=self.matches, agreement_rate=self.agreement_rate)
        else:
            d["mae"] = self.mae
        if timing:
            d["runtime_ms"] = self.runtime_ms
        return d


def _check_disjoint(index: CaseIndex, test: Dataset) -> None:
    if index.casebase.origin is None or test.origin is None:
        # an unsplit dataset carries no provenance to compare against
        return
    overlap = np.intersect1d(index.casebase.origin, test.origin)
    if len(overlap):
        raise EvaluationError(f"train/test provenance overlap on ids {overlap[:10].tolist()}")


def _as_spec(scheme: Union[SchemeSpec, str], index: CaseIndex) -> SchemeSpec:
    if isinstance(scheme, SchemeSpec):
        spec = scheme
    else:
        try:
            spec = SchemeSpec(scheme, space=index.space)
        except WeightingError as e:
            raise EvaluationError(f"scheme/space incompatibility: {e}") from None
    if spec.space != index.space:
        raise EvaluationError(f"scheme space {spec.space} does not match index space {index.space}")
    return spec


def fidelity(model: nn.NetworkModel, index: CaseIndex, scheme: Union[SchemeSpec, str], test: Dataset,
             k: int, seed: int = 0, check_overlap: bool = True) -> FidelityReport:
    """Agreement (or MAE) between the k-NN twin and the network on ``test``.

    Global schemes are computed once from the case base, local schemes once
    per query. The comparison target is the network's prediction, never the
    ground-truth label.
    """
    if len(test) == 0:
        raise EvaluationError("empty test set")
    if check_overlap:
        _check_disjoint(index, test)
    spec = _as_spec(scheme, index)
    spec = replace(spec, surrogate=replace(spec.surrogate, seed=seed))
    index.check_model(model)
    train = index.casebase
    t0 = time.perf_counter()
    out = nn.predict(model, test.X)
    qvecs = index.project(model, test.X)
    shared = None if spec.is_local else compute_weights(spec, model, train)

    def one(i: int):
        w = shared if shared is not None else compute_weights(spec, model, train, query=test.X[i], query_id=i)
        return twin_predict(retrieve(index, qvecs[i], w, k), index, model.task)

    threads = thread_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            twins = list(pool.map(one, range(len(test))))
    else:
        twins = [one(i) for i in range(len(test))]
    runtime = (time.perf_counter() - t0) * 1000.0
    n = len(test)
    report = FidelityReport(spec.label, index.space, k, n, seed, runtime_ms=runtime)
    if model.task == CLASSIFICATION:
        matches = int(np.sum(np.asarray(twins) == out.argmax(axis=1)))
        report.matches = matches
        report.agreement_rate = matches / n
    else:
        report.mae = float(np.mean(np.abs(np.asarray(twins, dtype=float) - out[:, 0])))
    return report


def compare_schemes(model: nn.NetworkModel, index: CaseIndex, schemes: Sequence[Union[SchemeSpec, str]],
                    test: Dataset, k: int, seed: int = 0) -> list[FidelityReport]:
    """One fidelity report per scheme, best first (stable for ties)."""
    reports = [fidelity(model, index, s, test, k, seed) for s in schemes]
    if model.task == CLASSIFICATION:
        return sorted(reports, key=lambda r: -r.agreement_rate)
    return sorted(reports, key=lambda r: r.mae)


def format_table(reports: Sequence[FidelityReport], timing: bool = False) -> str:
    """Aligned-column text table of reports."""
    if not reports:
        return ""
    classification = reports[0].agreement_rate is not None
    header = ["rank", "scheme", "space", "k", "n_queries"]
    header += ["matches", "agreement"] if classification else ["mae"]
    if timing:
        header.append("runtime_ms")
    rows = []
    for r, rep in enumerate(reports, start=1):
        row = [str(r), rep.scheme, rep.space, str(rep.k), str(rep.n_queries)]
        row += [str(rep.matches), f"{rep.agreement_rate:.4f}"] if classification else [f"{rep.mae:.6g}"]
        if timing:
            row.append(f"{rep.runtime_ms:.1f}")
        rows.append(row)
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(c.ljust(w) if i == 1 or i == 2 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))
             for line in [header] + rows]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def reports_to_json(reports: Sequence[FidelityReport], timing: bool = False) -> str:
    return json.dumps([r.to_dict(timing) for r in reports], indent=1) + "\n"
