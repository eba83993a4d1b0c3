"""Command-line surface: balance | estimate | distance | experiment | verify.

File formats
------------
Dataset CSV: header ``t,y,x1,...,xd``; ``t`` in {0,1}; ``y`` may be empty
for balance-only use; UTF-8, '.' decimal. Weighted-sample CSV (distance
command): header ``w,x1,...,xd`` or ``x1,...,xd`` (unit weights). Weights
CSV: header ``row,weight``, 0-based rows, 17-significant-digit decimals so
values round-trip bit-exactly. Reports are JSON documents with an embedded
schema version; plot data are two-column text files.

Exit codes: 0 success, 1 usage or schema error, 2 numeric failure,
3 property-suite failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import properties
from .balancing import BalanceWeights, GameConfig, deepmatch, fw_balance, objective_eval
from .distances import KernelSpec, LinearBall, SignSlope, WeightedSample, dd, ipm
from .errors import NumericError, SchemaError
from .estimators import Dataset, att_dr, att_weighted, catt_wls, fit_outcome
from .numerics import RngStream
from .simulation import (ConvolutionalDgp, FullyConnectedDgp, ShallowDgp,
                         ReplicationReport, replicate)
from . import studies

MNIST_ENV = "COVBALANCE_MNIST_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_PROPERTIES = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SchemaError(message)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def read_dataset_csv(path: str) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        expected = ["t", "y"] + [f"x{i}" for i in range(1, len(header) - 1)]
        if [h.strip() for h in header] != expected or len(header) < 3:
            raise SchemaError(f"{path}: header must be t,y,x1,...,xd")
        t_vals, y_vals, x_rows = [], [], []
        y_missing = False
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(f"{path}: line {lineno}: expected "
                                  f"{len(header)} fields, got {len(row)}")
            tok = row[0].strip()
            if tok not in ("0", "1"):
                raise SchemaError(f"{path}: line {lineno}: t must be 0 or 1, "
                                  f"got {tok!r}")
            t_vals.append(int(tok))
            ytok = row[1].strip()
            if ytok == "":
                y_missing = True
                y_vals.append(math.nan)
            else:
                y_vals.append(_parse_float(ytok, path, lineno, "y"))
            x_rows.append([_parse_float(v, path, lineno, name)
                           for v, name in zip(row[2:], expected[2:])])
        if not x_rows:
            raise SchemaError(f"{path}: no data rows")
    y = None if y_missing else np.array(y_vals)
    return Dataset(np.array(x_rows), np.array(t_vals), y)


def _parse_float(token: str, path: str, lineno: int, name: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise SchemaError(f"{path}: line {lineno}: bad {name} value "
                          f"{token!r}") from None


def read_sample_csv(path: str) -> WeightedSample:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        has_w = header and header[0] == "w"
        x_names = header[1:] if has_w else header
        if x_names != [f"x{i}" for i in range(1, len(x_names) + 1)] or not x_names:
            raise SchemaError(f"{path}: header must be [w,]x1,...,xd")
        weights, points = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(f"{path}: line {lineno}: expected "
                                  f"{len(header)} fields, got {len(row)}")
            if has_w:
                weights.append(_parse_float(row[0], path, lineno, "w"))
                vals = row[1:]
            else:
                weights.append(1.0)
                vals = row
            points.append([_parse_float(v, path, lineno, n)
                           for v, n in zip(vals, x_names)])
        if not points:
            raise SchemaError(f"{path}: no data rows")
    return WeightedSample(np.array(weights), np.array(points))


def write_weights_csv(path: str, weights: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "weight"])
        for i, w in enumerate(weights):
            writer.writerow([i, f"{w:.17g}"])


def read_weights_csv(path: str, n_rows: int) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["row", "weight"]:
            raise SchemaError(f"{path}: header must be row,weight")
        out = np.full(n_rows, math.nan)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise SchemaError(f"{path}: line {lineno}: expected 2 fields")
            try:
                idx = int(row[0])
            except ValueError:
                raise SchemaError(f"{path}: line {lineno}: bad row index "
                                  f"{row[0]!r}") from None
            if not (0 <= idx < n_rows):
                raise SchemaError(f"{path}: line {lineno}: row {idx} out of "
                                  f"range 0..{n_rows - 1}")
            out[idx] = _parse_float(row[1], path, lineno, "weight")
    if np.any(np.isnan(out)):
        raise SchemaError(f"{path}: missing weights for some rows")
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _family_from_flags(args) -> SignSlope | LinearBall | KernelSpec:
    if args.family == "sign":
        return SignSlope()
    if args.family == "linear":
        return LinearBall()
    return KernelSpec("rbf", args.bandwidth)


def cmd_balance(args) -> int:
    data = read_dataset_csv(args.input)
    if data.n1 < 1 or data.n0 < 1:
        raise SchemaError(f"{args.input}: need at least one treated and one "
                          "control row")
    if args.method == "fw":
        cls = SignSlope() if args.family == "sign" else LinearBall()
        weights = fw_balance(data, cls, args.lam, args.psi, args.iterations)
        objective = objective_eval(weights, data, cls, args.psi, args.lam)
    else:
        cfg = GameConfig(psi=args.psi, lam=args.lam,
                         epochs_stage1=args.stage1_epochs,
                         epochs_stage2=args.stage2_epochs,
                         batch_size=min(args.batch_size, data.n),
                         restarts=args.restarts, tolerance=args.eta,
                         grid_size=args.grid, learning_rate=args.learning_rate,
                         seed=args.seed)
        weights, trace = deepmatch(data, cfg)
        objective = trace.selected_v
    full = weights.full_weights(data.t)
    write_weights_csv(args.output, full)
    print(f"objective {objective:.17g}")
    print(f"weights written to {args.output}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    data = read_dataset_csv(args.input)
    if data.y is None:
        raise SchemaError(f"{args.input}: outcomes are required for estimation")
    full = read_weights_csv(args.weights, data.n)
    control = full[data.t == 0]
    weights = BalanceWeights(control, "raw", {"algorithm": "file"})
    if args.dr:
        outcome = fit_outcome(data, "ols")
        att = att_dr(weights, data, outcome)
        print(f"att_dr {att:.17g}")
    else:
        att = att_weighted(weights, data)
        print(f"att {att:.17g}")
    if args.catt_columns:
        cols = [int(c) - 1 for c in args.catt_columns.split(",")]
        if any(c < 0 or c >= data.dim for c in cols):
            raise SchemaError("catt columns out of range")
        model = catt_wls(weights, data, cols)
        coefs = " ".join(f"{v:.17g}" for v in [model.intercept, *model.slopes])
        print(f"catt {coefs}")
    return EXIT_OK


def cmd_distance(args) -> int:
    s_plus = read_sample_csv(args.sample_a)
    s_minus = read_sample_csv(args.sample_b)
    cls = _family_from_flags(args)
    metric = ipm(cls, s_plus, s_minus)
    print(f"ipm {metric:.17g}")
    if isinstance(cls, KernelSpec):
        print("dd not available for kernel families")
        return EXIT_OK
    result = dd(cls, s_plus, s_minus, args.psi)
    print(f"dd {result.value:.17g}")
    if args.sweep_out:
        from .distances import class_bound
        m = class_bound(cls, s_plus, s_minus)
        w_bar = s_plus.total() + s_minus.total()
        psis = np.geomspace(1e-2 * w_bar * m * m, 1e4 * w_bar * m * m,
                            args.sweep_points)
        with open(args.sweep_out, "w", encoding="utf-8") as fh:
            fh.write(f"# psi scaled_dd (ipm {metric:.17g})\n")
            for psi in psis:
                scaled = 2.0 * math.sqrt(2.0 * psi) * dd(cls, s_plus,
                                                         s_minus, psi).value
                fh.write(f"{psi:.17g} {scaled:.17g}\n")
        print(f"sweep written to {args.sweep_out}")
    return EXIT_OK


def _spec_from_config(doc: dict, n: int):
    name = doc["spec"]
    if name == "shallow":
        return ShallowDgp(n)
    if name == "fully_connected":
        return FullyConnectedDgp(n)
    if name == "convolutional":
        images = doc.get("images_path")
        labels = doc.get("labels_path")
        if images is None or labels is None:
            base = os.environ.get(MNIST_ENV)
            if base is None:
                raise SchemaError("convolutional spec needs images_path/"
                                  f"labels_path or ${MNIST_ENV}")
            images = os.path.join(base, "train-images-idx3-ubyte.gz")
            labels = os.path.join(base, "train-labels-idx1-ubyte.gz")
        return ConvolutionalDgp(n, images, labels,
                                doc.get("downscale_factor", 1))
    raise SchemaError(f"unknown spec name {name!r}")


def _methods_from_config(doc: dict, spec_name: str, image_side: int | None):
    names = tuple(doc.get("methods", []))
    if spec_name == "shallow":
        return studies.shallow_methods(
            fw_iterations=doc.get("fw_iterations", 300),
            lam=doc.get("lam", 1.0))
    if spec_name == "fully_connected":
        return studies.fully_connected_methods(names or None)
    return studies.convolutional_methods(image_side, names or None)


def cmd_experiment(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("spec", "n", "reps", "seed"):
        if key not in doc:
            raise SchemaError(f"{args.config}: missing key {key!r}")
    n_values = doc["n"] if isinstance(doc["n"], list) else [doc["n"]]
    reps = int(doc["reps"])
    seed = int(doc["seed"])
    threads = args.threads or min(os.cpu_count() or 1, reps)
    reports = {}
    for n in n_values:
        spec = _spec_from_config(doc, int(n))
        image_side = None
        if isinstance(spec, ConvolutionalDgp):
            from .simulation import _load_store
            store = _load_store(spec)
            image_side = store.shape[0] // spec.downscale_factor
        methods = _methods_from_config(doc, doc["spec"], image_side)
        report = replicate(spec, methods, reps, seed, n_jobs=threads)
        reports[int(n)] = report
    out_doc = {
        "schema": "covbalance-report/1",
        "config": doc,
        "reports": {str(n): r.to_dict() for n, r in reports.items()},
    }
    out_path = doc.get("output", "report.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(out_doc, fh, indent=2)
    print(f"report written to {out_path}")
    plot_dir = doc.get("plot_dir")
    if plot_dir and len(reports) > 1:
        os.makedirs(plot_dir, exist_ok=True)
        by_method: dict[str, list[tuple[int, float]]] = {}
        for n, report in sorted(reports.items()):
            for row in report.rows:
                by_method.setdefault(row.name, []).append((n, row.rmse))
        for name, series in by_method.items():
            path = os.path.join(plot_dir, f"rmse_vs_n_{name}.dat")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("# n rmse\n")
                for n, rmse in series:
                    fh.write(f"{n} {rmse:.17g}\n")
        print(f"plot data written to {plot_dir}")
    for n, report in sorted(reports.items()):
        print(f"n={n}")
        for row in report.rows:
            print(f"  {row.name:>14s}  bias {row.bias:+9.3f}  se {row.se:8.3f}"
                  f"  rmse {row.rmse:8.3f}  failures {row.failures}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = properties.run_all(quick=args.quick)
    failed = 0
    for res in results:
        print(res.line())
        failed += 0 if res.passed else 1
    if failed:
        print(f"{failed} suite(s) failed")
        return EXIT_PROPERTIES
    print("all property suites passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="covbalance",
                     description="Covariate balancing weights via "
                                 "discriminative distances")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("balance", help="compute balancing weights for a CSV")
    p.add_argument("input")
    p.add_argument("--method", choices=("fw", "deepmatch"), default="fw")
    p.add_argument("--output", required=True)
    p.add_argument("--family", choices=("linear", "sign"), default="linear")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--psi", type=float, default=0.0)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--stage1-epochs", type=int, default=10)
    p.add_argument("--stage2-epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--grid", type=int, default=50)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("estimate", help="effect estimates from data + weights")
    p.add_argument("input")
    p.add_argument("--weights", required=True)
    p.add_argument("--dr", action="store_true",
                   help="doubly robust with an OLS outcome model")
    p.add_argument("--catt-columns", default="",
                   help="comma-separated 1-based covariate columns for the "
                        "conditional effect fit")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("distance", help="metric and distance of two samples")
    p.add_argument("sample_a")
    p.add_argument("sample_b")
    p.add_argument("--family", choices=("sign", "linear", "rbf"),
                   default="linear")
    p.add_argument("--bandwidth", type=float, default=1.0)
    p.add_argument("--psi", type=float, default=0.0)
    p.add_argument("--sweep-out", default="")
    p.add_argument("--sweep-points", type=int, default=25)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("experiment", help="run a replication study from JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--threads", type=int, default=0,
                   help="worker processes (default: machine parallelism, "
                        "capped by the replication count)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("verify", help="run the theorem-property suites")
    p.add_argument("--quick", action="store_true",
                   help="reduced instance counts")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def console_main() -> None:
    sys.exit(main())
