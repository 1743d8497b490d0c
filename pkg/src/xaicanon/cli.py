"""Command-line entry point: ``xaicanon <subcommand> ...``.

Exit codes: 0 success, 1 operational failure (bad input file, failed
verification), 2 usage error.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


from . import fixtures
from .attribution import (
    BUILTIN_COMPOSITES, POOLINGS, attribute, gamma_composite, gradient_saliency, normalize_heatmap, pool_channels,
)
from .canonize import PASSES, canonize_graph, max_deviation
from .dataio import load_dataset, read_tensor, save_dataset, write_tensor
from .errors import XaiCanonError
from .harness import METRICS, GridSpec, MetricSettings, run_evaluation, run_grid_search, write_marginals
from .serialize import load_model, write_model

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
VERIFY_TOL = 1e-5


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in _csv(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _gamma_spec(text: str) -> dict[str, float]:
    out = {}
    for part in _csv(text):
        group, sep, value = part.partition("=")
        try:
            out[group] = float(value)
        except ValueError:
            sep = ""
        if not sep or not group:
            raise argparse.ArgumentTypeError(f"bad gamma spec entry {part!r}; expected group=value")
    return out


def _default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _load(args):
    weights = args.weights or str(Path(args.model).with_suffix(".bin"))
    return load_model(args.model, weights)


def _add_model_args(p):
    p.add_argument("--model", required=True, help="model manifest (JSON)")
    p.add_argument("--weights", help="weight blob (default: manifest path with .bin suffix)")


def _add_eval_args(p):
    p.add_argument("--dataset", required=True, help="dataset manifest (JSON)")
    p.add_argument("--metrics", type=_csv, default=["rra", "rma", "gini"],
                   help=f"comma-separated subset of {','.join(METRICS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canonized", choices=("yes", "no", "both"), default="both")
    p.add_argument("--pooling", choices=POOLINGS, default="sum")
    p.add_argument("--out", required=True, help="output prefix; .csv and .json are appended")
    p.add_argument("--threads", type=int, default=_default_threads())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xaicanon", description="BatchNorm canonization and LRP toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("canonize", help="remove BatchNorm layers by fusion")
    _add_model_args(p)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--passes", type=_csv, default=list(PASSES), help=f"subset of {','.join(PASSES)}")
    p.add_argument("--verify", type=int, default=0, metavar="N", help="check equivalence on N random inputs")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("explain", help="write an attribution heatmap")
    _add_model_args(p)
    p.add_argument("--input", required=True, help="input tensor file")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--composite", required=True, choices=sorted(BUILTIN_COMPOSITES) + ["saliency", "gamma"])
    p.add_argument("--gamma-spec", type=_gamma_spec, default={}, help="group=value,... (others get 0)")
    p.add_argument("--pooling", choices=POOLINGS, default="sum")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--canonize", action="store_true", help="canonize the model first")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score heatmaps on a dataset")
    _add_model_args(p)
    p.add_argument("--composites", type=_csv, default=["eps-plus"])
    _add_eval_args(p)

    p = sub.add_parser("grid-search", help="per-group gamma grid search")
    _add_model_args(p)
    p.add_argument("--gammas", type=_floats, default=[0, 0.1, 0.25, 0.5, 1, 10])
    p.add_argument("--groups", type=_csv, required=True)
    _add_eval_args(p)

    p = sub.add_parser("fixtures", help="materialize a fixture model (and dataset)")
    p.add_argument("--name", required=True, choices=sorted(fixtures.BUILDERS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bias-free", action="store_true")
    p.add_argument("--out-prefix", required=True)
    return parser


def _prefixed(prefix: str, suffix: str) -> Path:
    p = Path(prefix)
    return p.with_name(p.name + suffix)


def cmd_canonize(args) -> int:
    graph = _load(args)
    canon, report = canonize_graph(graph, args.passes)
    write_model(canon, _prefixed(args.out_prefix, ".json"), _prefixed(args.out_prefix, ".bin"))
    _prefixed(args.out_prefix, ".report.json").write_text(report.to_json())
    print(f"removed {len(report.fusions)} BatchNorm node(s); {len(report.untouched)} left in place")
    for bn_id, reason in report.untouched:
        print(f"  untouched {bn_id}: {reason}")
    if args.verify:
        dev = max_deviation(graph, canon, args.verify, args.seed)
        if not dev <= VERIFY_TOL:
            print(f"verification failed: max relative deviation {dev:.3e} at node {canon.output_id!r}",
                  file=sys.stderr)
            return EXIT_FAIL
        print(f"verified on {args.verify} inputs: max relative deviation {dev:.3e}")
    return EXIT_OK


def cmd_explain(args) -> int:
    graph = _load(args)
    if args.canonize:
        graph = canonize_graph(graph)[0]
    x = read_tensor(args.input)
    if args.composite == "saliency":
        hm = gradient_saliency(graph, x, args.target, args.canonize)
    else:
        comp = (gamma_composite(args.gamma_spec) if args.composite == "gamma"
                else BUILTIN_COMPOSITES[args.composite]())
        hm = attribute(graph, x, args.target, comp, args.canonize)
    values = pool_channels(hm.values, args.pooling) if hm.values.ndim == 3 else hm.values
    if args.normalize:
        values = normalize_heatmap(values)
    write_tensor(args.out, values)
    return EXIT_OK


def _settings(args) -> MetricSettings:
    return MetricSettings(pooling=args.pooling)


def cmd_evaluate(args) -> int:
    graph = _load(args)
    data = load_dataset(args.dataset)
    report = run_evaluation(graph, data, args.composites, args.metrics, args.seed, args.canonized,
                            _settings(args), max(1, args.threads))
    csv_path, _ = report.write(args.out)
    print(f"wrote {len(report.rows)} rows to {csv_path}")
    return EXIT_OK


def cmd_grid_search(args) -> int:
    graph = _load(args)
    data = load_dataset(args.dataset)
    spec = GridSpec(tuple(args.groups), tuple(args.gammas), args.canonized)
    report = run_grid_search(graph, data, spec, args.metrics, args.seed, _settings(args), max(1, args.threads))
    csv_path, _ = report.write(args.out)
    write_marginals(report, spec, _prefixed(args.out, ".marginals.csv"))
    print(f"wrote {len(report.rows)} rows ({report.metadata['configurations']} configurations) to {csv_path}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    graph, data = fixtures.build(args.name, args.seed, args.bias_free)
    write_model(graph, _prefixed(args.out_prefix, ".json"), _prefixed(args.out_prefix, ".bin"))
    if data is not None:
        save_dataset(data, _prefixed(args.out_prefix, ".dataset.json"))
    return EXIT_OK


COMMANDS = {
    "canonize": cmd_canonize,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "grid-search": cmd_grid_search,
    "fixtures": cmd_fixtures,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        bad = [m for m in getattr(args, "metrics", []) if m not in METRICS]
        if bad:
            parser.error(f"unknown metric(s) {bad}")
        known = set(BUILTIN_COMPOSITES) | {"saliency"}
        bad = [c for c in getattr(args, "composites", []) if c not in known]
        if bad:
            parser.error(f"unknown composite(s) {bad}")
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (XaiCanonError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
