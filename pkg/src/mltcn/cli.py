"""Command-line interface: ``mltcn {simulate,fit,select,encode,evaluate}``.

Exit status is 0 on success, 1 on any failure (including invalid flags) and
2 when a fit stopped at the iteration limit without converging; its result
is still written. Summaries go to standard output, diagnostics to standard
error.
"""

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .ecm import FitConfig, fit
from .exceptions import FitFailed, MltcnError
from .model import design_params, sample_mltcn
from .selection import CellFailure, evaluation_report, grid_select

EXIT_OK, EXIT_FAILURE, EXIT_NOT_CONVERGED = 0, 1, 2
LABEL_COLUMNS = ("label", "party", "class", "group")

logger = logging.getLogger("mltcn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- flag types ---------------------------------------------------------------

def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {value}")
    return value


def _float_list(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def parse_range(text):
    """Inclusive ``lo:hi`` range (a single integer gives a one-element range)."""
    parts = text.split(":")
    try:
        if len(parts) == 1:
            lo = hi = int(parts[0])
        elif len(parts) == 2:
            lo, hi = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}")
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"range {text!r} must satisfy 1 <= lo <= hi")
    return list(range(lo, hi + 1))


def resolve_threads(value):
    """``--threads`` if given, else ``LTR_THREADS``, else the number of cores."""
    if value is not None:
        return value
    env = os.environ.get("LTR_THREADS")
    if env:
        try:
            return _positive_int(env)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"LTR_THREADS: {exc}")
    return os.cpu_count() or 1


# -- input helpers ------------------------------------------------------------

def read_dataset(path):
    """Binary CSV with header; a column named label/party/class/group holds labels."""
    with io._open_read(path) as fh:
        header = next(csv.reader(fh), [])
    names = [h.strip().lower() for h in header]
    label = next((header[names.index(c)].strip() for c in LABEL_COLUMNS if c in names), None)
    return io.read_binary_csv(path, has_header=True, label_column=label)


def read_labels(path):
    """Reference labels from a truth JSON, a labelled dataset CSV or a one-column CSV."""
    if str(path).endswith(".json"):
        doc = io.read_truth(path)
        return np.asarray(doc["groups"])
    with io._open_read(path) as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise io.ParseError("empty label file")
    names = [h.strip().lower() for h in rows[0]]
    for c in LABEL_COLUMNS:
        if c in names:
            j = names.index(c)
            return np.array([r[j].strip() for r in rows[1:]])
    if len(rows[0]) == 1:
        return np.array([r[0].strip() for r in rows[1:]])
    raise io.ParseError("no label column found (expected one of " + ", ".join(LABEL_COLUMNS) + ")")


def _fit_config(args, G, D):
    return FitConfig(G=G, D=D, max_iter=args.max_iter, aitken_epsilon=args.epsilon,
                     restarts=args.restarts, seed=args.seed, tau_floor=args.tau_floor,
                     threads=resolve_threads(args.threads))


# -- commands -----------------------------------------------------------------

def cmd_simulate(args):
    g = args.g
    pi = args.pi if args.pi is not None else [1.0 / g] * g
    for flag, values in (("--pi", pi), ("--tau", args.tau), ("--eta", args.eta)):
        if len(values) not in (1, g) or (flag == "--pi" and len(values) != g):
            raise UsageError(f"{flag} needs {g} values, got {len(values)}")
    if any(p <= 0 for p in pi) or abs(sum(pi) - 1.0) > 1e-10:
        raise UsageError(f"--pi must be positive and sum to 1, got {pi}")
    if any(not 0.5 < t < 1 for t in args.tau):
        raise UsageError(f"--tau must lie in (0.5, 1), got {args.tau}")
    if any(not 1 < e < float("inf") for e in args.eta):
        raise UsageError(f"--eta must be finite and > 1, got {args.eta}")
    params = design_params(m=args.m, g=g, d=args.d, pi=pi, tau=args.tau, eta=args.eta)
    data, truth = sample_mltcn(params, args.n, args.seed)
    out = Path(args.out)
    io.write_binary_csv(data, out, label_column="label")
    truth_path = out.with_suffix(".truth.json")
    io.write_truth(truth, params, truth_path, seed=args.seed)
    print(f"simulated n={args.n} m={args.m} g={g} d={args.d} extremes={int((~truth.normal_hard).sum())}"
          f" -> {out}, {truth_path}")
    return EXIT_OK


def cmd_fit(args):
    data = read_dataset(args.data)
    config = _fit_config(args, args.g, args.d)
    try:
        result = fit(data, config)
    except FitFailed as exc:
        for i, err in enumerate(exc.errors):
            print(f"restart {i}: {err!r}", file=sys.stderr)
        raise
    for err in result.restart_errors:
        print(f"restart failed: {err!r}", file=sys.stderr)
    io.write_fit(result, args.out)
    print(f"bound={result.bound:.6f} bic={result.bic:.4f} iterations={result.iterations}"
          f" extremes={result.n_extreme} converged={str(result.converged).lower()}")
    if not result.converged:
        print(f"warning: no convergence within {config.max_iter} iterations", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_select(args):
    data = read_dataset(args.data)
    config = _fit_config(args, 1, 1)
    grid = grid_select(data, args.g_range, args.d_range, config,
                       rotation_adjust=args.bic_rotation_adjust)
    for key, cell in sorted(grid.cells.items()):
        if isinstance(cell, CellFailure):
            print(f"cell G={key[0]} D={key[1]} failed: {cell.error}", file=sys.stderr)
    out = Path(args.out)
    io.write_grid(grid, out)
    io.write_bic_table_csv(grid, out.with_suffix(".csv"))
    G, D = grid.best
    print(f"best G={G} D={D} bic={grid.bic_of(grid.best):.4f}")
    return EXIT_OK


def cmd_encode(args):
    raw = io.read_raw_votes(args.raw)
    data = io.encode_votes(raw)
    io.write_binary_csv(data, args.out, label_column="party")
    rates = ", ".join(f"{name}:{r:.2f}" for name, r in zip(raw.issue_names, raw.undecided_rate()))
    print(f"encoded n={data.n} issues={len(raw.issue_names)} variables={data.m} -> {args.out}")
    print(f"undecided rate per issue: {rates}", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args):
    result = io.read_fit(args.fit)
    labels = read_labels(args.labels)
    report = evaluation_report(result, labels)
    io.write_report(report, args.out)
    print(f"rand={report.rand:.4f} ari={report.ari:.4f} misclassified={report.n_misclassified}"
          f" extremes={report.n_extreme}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="mltcn", description="Contaminated-normal latent trait mixtures.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a dataset from a known model")
    p.add_argument("--n", type=_positive_int, default=500)
    p.add_argument("--m", type=_positive_int, default=25)
    p.add_argument("--g", type=_positive_int, default=2)
    p.add_argument("--d", type=_positive_int, default=2)
    p.add_argument("--pi", type=_float_list, default=None, help="comma-separated; default uniform")
    p.add_argument("--tau", type=_float_list, default=[0.8])
    p.add_argument("--eta", type=_float_list, default=[2.5])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset CSV; truth goes to <stem>.truth.json")
    p.set_defaults(func=cmd_simulate)

    def fit_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--restarts", type=_positive_int, default=10)
        p.add_argument("--max-iter", type=_positive_int, default=1000)
        p.add_argument("--epsilon", type=_positive_float, default=0.01)
        p.add_argument("--tau-floor", type=float, default=0.5)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=_positive_int, default=None,
                       help="restart threads (default: LTR_THREADS, else all cores)")
        p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="fit one (G, D) model")
    fit_flags(p)
    p.add_argument("--g", type=_positive_int, default=2)
    p.add_argument("--d", type=_positive_int, default=2)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="fit a (G, D) grid and choose by BIC")
    fit_flags(p)
    p.add_argument("--g-range", type=parse_range, default=parse_range("1:4"))
    p.add_argument("--d-range", type=parse_range, default=parse_range("1:4"))
    p.add_argument("--bic-rotation-adjust", action="store_true",
                   help="discount rotational freedom of the slopes in the parameter count")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("encode", help="A/B-encode a roll-call table")
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("evaluate", help="compare a fit with reference labels")
    p.add_argument("--fit", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if hasattr(args, "tau_floor") and not 0.5 <= args.tau_floor < 1:
            raise UsageError(f"--tau-floor must lie in [0.5, 1), got {args.tau_floor}")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (MltcnError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
