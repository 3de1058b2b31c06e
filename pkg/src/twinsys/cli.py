"""Command-line entry point: ``twinsys train | explain | fam | evaluate | inspect``.

Exit codes: 0 success, 1 runtime/domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import network as nn
from .dataset import (CLASSIFICATION, TASKS, Case, Dataset, FeatureSchema, NormStats, load_csv, load_idx,
                      normalize)
from .errors import TwinSystemError
from .evaluation import compare_schemes, format_table, reports_to_json, thread_count
from .explanation import compute_fam, explain, render, render_fam_mask, render_pgm_panels, render_text
from .io import atomic_write_bytes, atomic_write_text
from .retrieval import build_index
from .weighting import SCHEMES, SchemeSpec, SurrogateConfig, compute_weights, space_layer

log = logging.getLogger("twinsys")

FORMATS = ("text", "json", "pgm")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _space(text: str) -> str:
    try:
        space_layer(text)
    except TwinSystemError as e:
        raise argparse.ArgumentTypeError(str(e)) from None
    return text


def _scheme(text: str) -> str:
    if text not in SCHEMES:
        raise argparse.ArgumentTypeError(f"unknown scheme {text!r}; valid schemes: {', '.join(SCHEMES)}")
    return text


def _scheme_list(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    if not names:
        raise argparse.ArgumentTypeError("empty scheme list")
    return [_scheme(s) for s in names]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twinsys", description="ANN + k-NN twin-system explanations")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    data_help = "CSV file, or IDX images file followed by IDX labels file"

    t = sub.add_parser("train", help="train a network and write a model file")
    t.add_argument("--data", nargs="+", required=True, metavar="PATH", help=data_help)
    t.add_argument("--config", required=True, help="JSON with 'layers', 'hyper' and optional 'task'/'data'")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--seed", type=int, help="overrides the init and shuffle seeds of the config")

    def query_args(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--train", nargs="+", required=True, metavar="PATH", help=data_help)
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--query", type=int, help="index of the query case in the --train data")
        g.add_argument("--query-file", help="single-row CSV holding the query features")

    e = sub.add_parser("explain", help="explain one prediction with nearest cases")
    query_args(e)
    e.add_argument("--scheme", required=True, type=_scheme)
    e.add_argument("--space", default="input", type=_space, help="input or layer:NAME")
    e.add_argument("--k", type=_positive_int, default=3)
    e.add_argument("--top-m", type=_positive_int)
    e.add_argument("--format", choices=FORMATS, default="text")
    e.add_argument("--fam", action="store_true", help="also compute a feature-activation map")
    e.add_argument("--seed", type=int, default=0, help="seed for stochastic schemes")
    e.add_argument("--out", help="output file (text/json) or directory (pgm)")

    f = sub.add_parser("fam", help="feature-activation map for a conv model")
    query_args(f)
    f.add_argument("--quantile", type=float, default=0.95)
    f.add_argument("--out", default="fam_mask.pgm", help="mask PGM to write")

    v = sub.add_parser("evaluate", help="rank weighting schemes by twin fidelity")
    v.add_argument("--model", required=True)
    v.add_argument("--train", nargs="+", required=True, metavar="PATH", help=data_help)
    v.add_argument("--test", nargs="+", required=True, metavar="PATH", help=data_help)
    v.add_argument("--schemes", required=True, type=_scheme_list, help="comma-separated scheme names")
    v.add_argument("--space", default="input", type=_space)
    v.add_argument("--k", type=_positive_int, default=3)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="write the JSON report here")

    i = sub.add_parser("inspect", help="describe a model file and/or dataset")
    i.add_argument("--model")
    i.add_argument("--data", nargs="+", metavar="PATH", help=data_help)
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _check_data_paths(paths: Sequence[str], flag: str) -> None:
    if len(paths) not in (1, 2):
        raise UsageError(f"{flag} takes a CSV path or an IDX images/labels pair")


def load_data(paths: Sequence[str], label_column="-1", task: str = CLASSIFICATION) -> Dataset:
    if len(paths) == 2:
        return load_idx(paths[0], paths[1])
    return load_csv(paths[0], label_column, task)


def _model_data(model: nn.NetworkModel, paths: Sequence[str]) -> Dataset:
    """Load data the way the model was trained on it (same columns, same normalization)."""
    meta = model.meta
    data = load_data(paths, meta.get("label_column", "-1"), model.task)
    if "schema" in meta:
        trained = FeatureSchema.from_dict(meta["schema"])
        if trained.feature_names != data.schema.feature_names:
            raise TwinSystemError("data columns do not match the columns the model was trained on")
        y = data.y
        if trained.class_names is not None and data.schema.class_names is not None:
            lookup = {name: i for i, name in enumerate(trained.class_names)}
            unknown = set(data.schema.class_names) - set(lookup)
            if unknown:
                raise TwinSystemError(f"labels unseen at training time: {sorted(unknown)}")
            y = np.array([lookup[n] for n in data.schema.class_names], dtype=np.int64)[data.y]
        data = Dataset(trained, data.X, y, data.raw)
    if "norm" in meta:
        data = normalize(data, stats=NormStats.from_dict(meta["norm"]))
    return data


def _query_case(args, train: Dataset) -> Case:
    if args.query is not None:
        if not 0 <= args.query < len(train):
            raise TwinSystemError(f"query index {args.query} out of range 0..{len(train) - 1}")
        return train[args.query]
    path = Path(args.query_file)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) != 2:
        raise TwinSystemError(f"{path}: expected a header and exactly one data row")
    header = [h.strip() for h in rows[0]]
    values = dict(zip(header, (c.strip() for c in rows[1])))
    try:
        x = np.array([float(values[n]) for n in train.schema.feature_names])
    except KeyError as e:
        raise TwinSystemError(f"{path}: missing feature column {e}") from None
    except ValueError as e:
        raise TwinSystemError(f"{path}: {e}") from None
    if train.norm_stats is not None:
        x = train.norm_stats.apply(x)
    return Case(id=-1, features=x, label=-1)


def _write(out: Optional[str], data: bytes) -> None:
    if out is None:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    else:
        atomic_write_bytes(out, data)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    _check_data_paths(args.data, "--data")
    try:
        config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise TwinSystemError(f"cannot read config {args.config}: {e}") from None
    if not isinstance(config, dict) or "layers" not in config:
        raise TwinSystemError("config needs a 'layers' list")
    task = config.get("task", CLASSIFICATION)
    if task not in TASKS:
        raise TwinSystemError(f"config task must be one of {TASKS}")
    data_cfg = config.get("data", {})
    label_column = str(data_cfg.get("label_column", "-1"))
    hyper = nn.Hyper.from_dict(config.get("hyper", {}))
    seed = config.get("seed", hyper.seed) if args.seed is None else args.seed
    hyper.seed = seed

    data = load_data(args.data, label_column, task)
    method = data_cfg.get("normalize", "none" if len(args.data) == 2 else "zscore")
    data = normalize(data, method)
    specs = [nn.LayerSpec.from_dict(s) for s in config["layers"]]
    first = next(s for s in specs if s.kind != "flatten")
    input_shape = (data.schema.feature_count,) if first.kind == "dense" else data.schema.input_shape
    model = nn.build(specs, task, seed, input_shape)
    report = nn.train(model, data, hyper)
    model.meta = {
        "schema": data.schema.to_dict(),
        "norm": data.norm_stats.to_dict(),
        "label_column": label_column,
    }
    nn.save(model, args.out)
    print(f"# twinsys train seed={seed}")
    print(report.summary())
    return 0


def _prepare(args):
    model = nn.load(args.model)
    train = _model_data(model, args.train)
    query = _query_case(args, train)
    return model, train, query


def cmd_explain(args) -> int:
    _check_data_paths(args.train, "--train")
    if args.format == "pgm" and not args.out:
        raise UsageError("--format pgm needs --out DIRECTORY")
    model, train, query = _prepare(args)
    if args.fam:
        if not any(s.kind == "conv2d" for s in model.layers):
            raise TwinSystemError("--fam needs a model with a conv layer: no conv layer")
    spec = SchemeSpec(args.scheme, space=args.space, surrogate=SurrogateConfig(seed=args.seed))
    index = build_index(train, args.space, model)
    weights = compute_weights(spec, model, train, query=query.features,
                              query_id=None if query.id < 0 else query.id)
    e = explain(model, index, weights, query, args.k, args.top_m)
    e.extra["seed"] = args.seed
    if args.fam:
        e.fam = compute_fam(model, query.features)
    if args.format == "pgm":
        outdir = Path(args.out)
        panels = render_pgm_panels(e)
        atomic_write_bytes(outdir / "query.pgm", panels[0])
        for (nb, _), data in zip(e.neighbors, panels[1:]):
            atomic_write_bytes(outdir / f"neighbor_{nb.rank}.pgm", data)
        atomic_write_bytes(outdir / "panel.pgm", render(e, "pgm"))
        if e.fam is not None:
            atomic_write_bytes(outdir / "fam_mask.pgm", render_fam_mask(e.fam))
        print(f"# twinsys explain seed={args.seed}")
        sys.stdout.write(render_text(e))
        return 0
    if e.fam is not None:
        mask_path = Path(args.out).with_name(Path(args.out).stem + "_fam.pgm") if args.out else Path("fam_mask.pgm")
        atomic_write_bytes(mask_path, render_fam_mask(e.fam))
    out = render(e, args.format)
    if args.format == "text":
        out = f"# twinsys explain seed={args.seed}\n".encode() + out
    _write(args.out, out)
    return 0


def cmd_fam(args) -> int:
    _check_data_paths(args.train, "--train")
    if not 0 < args.quantile <= 1:
        raise UsageError("--quantile must lie in (0, 1]")
    model, train, query = _prepare(args)
    fam = compute_fam(model, query.features, quantile=args.quantile)
    atomic_write_bytes(args.out, render_fam_mask(fam))
    state = "degenerate" if fam.degenerate else f"contribution={fam.contribution_of_unit:.6g}"
    print(f"FAM layer={fam.layer} map={fam.map_index} {state} quantile={fam.threshold_quantile} mask={args.out}")
    return 0


def cmd_evaluate(args) -> int:
    _check_data_paths(args.train, "--train")
    _check_data_paths(args.test, "--test")
    thread_count()
    model = nn.load(args.model)
    train = _model_data(model, args.train)
    test = _model_data(model, args.test)
    specs = [SchemeSpec(s, space=args.space, surrogate=SurrogateConfig(seed=args.seed)) for s in args.schemes]
    index = build_index(train, args.space, model)
    reports = compare_schemes(model, index, specs, test, args.k, args.seed)
    for r in reports:
        log.info("%s runtime_ms=%.1f", r.scheme, r.runtime_ms)
    header = f"# twinsys evaluate seed={args.seed} k={args.k} space={args.space}\n"
    sys.stdout.write(header + format_table(reports))
    if args.out:
        atomic_write_text(args.out, reports_to_json(reports))
    return 0


def cmd_inspect(args) -> int:
    if not args.model and not args.data:
        raise UsageError("inspect needs --model and/or --data")
    if args.model:
        m = nn.load(args.model)
        print(f"model {args.model}: version={m.version} task={m.task} seed={m.seed} input_shape={m.input_shape}")
        for spec, shape, p in zip(m.layers, m.shapes, m.params):
            n = 0 if p is None else sum(a.size for a in p.values())
            print(f"  {spec.name:<12} {spec.kind:<8} out={shape} params={n}")
        print(f"  total params={m.n_params()} fingerprint={m.fingerprint()[:16]}")
        try:
            print(f"  penultimate layer: {nn.penultimate_layer(m)}")
        except TwinSystemError:
            pass
    if args.data:
        _check_data_paths(args.data, "--data")
        d = load_data(args.data)
        s = d.schema
        print(f"data: n={len(d)} features={s.feature_count} input_shape={s.input_shape} "
              f"task={s.task} classes={s.num_classes}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "explain": cmd_explain,
    "fam": cmd_fam,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"twinsys: error: {e}", file=sys.stderr)
        return 2
    except (TwinSystemError, OSError) as e:
        print(f"twinsys: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
