"""Command-line front end: bounds, baselines, simulation checks and the random-kernel benchmark."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .lmi import EstimateOptions, LipschitzCertificate, estimate_lipschitz_hybrid, estimate_lipschitz_layer
from .model import ConvLayerSpec, ModelError, load_network
from .realization import reachable_subspace, realize_conv, simulate
from .sdpsolve import SolverError, validate_certificate
from .signal2d import Signal2D, conv_forward, hinf_grid, toeplitz_norm

REPORT_SCHEMA = "roesserlip.report/1"
BENCH_SCHEMA = "roesserlip.bench/1"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- output


def _emit(report, fmt, output=None, columns=None):
    if fmt == "json":
        text = json.dumps(report, indent=2, default=_json_default) + "\n"
    else:
        rows = report if isinstance(report, list) else [_flat_row(report, columns)]
        buf = io.StringIO()
        keys = columns or list(rows[0].keys())
        writer = csv.DictWriter(buf, fieldnames=keys, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")


def _flat_row(report, columns):
    keys = columns or [k for k, v in report.items() if not isinstance(v, (dict, list))]
    return {k: report.get(k) for k in keys}


# ---------------------------------------------------------------- lipschitz


LIPSCHITZ_COLUMNS = ["schema", "model", "method", "gamma", "validation", "solver", "solve_time", "d1", "grid_n"]


def _baseline(spec, method, d1, grid_n):
    per_layer = []
    for layer in spec.conv_layers:
        per_layer.append(toeplitz_norm(layer, d1) if method == "toeplitz" else hinf_grid(layer, grid_n))
    dense = [float(np.linalg.norm(l.weight, 2)) for l in spec.dense_layers]
    return float(np.prod(per_layer) * np.prod(dense)), per_layer, dense


def cmd_lipschitz(args):
    spec = load_network(args.model)
    d1 = args.d1 or spec.input_height
    report = {"schema": REPORT_SCHEMA, "model": str(args.model), "method": args.method, "d1": d1,
              "grid_n": args.grid_n, "seed": args.seed}
    t0 = time.perf_counter()
    if args.method in ("toeplitz", "hinf-grid"):
        gamma, per_layer, dense = _baseline(spec, args.method, d1, args.grid_n)
        report.update(gamma=gamma, per_layer=per_layer, dense_norms=dense, validation="n/a",
                      solver="", solve_time=time.perf_counter() - t0)
        if len(per_layer) + len(dense) > 1:
            report["note"] = "product of per-layer norms"
        _emit(report, args.out, args.output, LIPSCHITZ_COLUMNS)
        return EXIT_OK
    options = EstimateOptions(project=args.project, solver=args.solver, tol=args.tol)
    cert = estimate_lipschitz_hybrid(spec, options)
    check = validate_certificate(spec, cert, trials=args.trials, seed=args.seed)
    report.update(
        gamma=cert.gamma, gamma_sq=cert.gamma_sq, kind=cert.kind, solver=cert.solver,
        solver_status=cert.solver_status, solve_time=cert.solve_time,
        validation="pass" if check.passed else "fail", validation_checks=check.checks,
        validation_failures=check.failures, projected=bool(args.project),
    )
    if cert.kind == "hybrid":
        report["Q_C_eigenvalues"] = np.linalg.eigvalsh(cert.Q_C).tolist()
        report["qc_structure"] = cert.qc_structure
    if args.cert:
        cert.to_json(args.cert)
        report["certificate"] = str(args.cert)
    _emit(report, args.out, args.output, LIPSCHITZ_COLUMNS)
    return EXIT_OK if check.passed else EXIT_SOLVER


# ---------------------------------------------------------------- benchmark


def bench_instance(job):
    """One benchmark row: projected SDP bound, Toeplitz norms per d1 and the grid norm."""
    index, seed, kernel, d1_list, grid_n, tol = job
    rng = np.random.default_rng(seed)
    layer = ConvLayerSpec.from_taps(rng.standard_normal((1, 1, kernel, kernel)))
    row = {"instance": index}
    status = []
    t = time.perf_counter()
    try:
        cert = estimate_lipschitz_layer(layer, EstimateOptions(tol=tol))
        row["roesser_sdp"] = cert.gamma
    except SolverError as exc:
        row["roesser_sdp"] = float("nan")
        status.append(f"sdp: {exc}")
    row["time_roesser_sdp"] = time.perf_counter() - t
    for d1 in d1_list:
        t = time.perf_counter()
        row[f"toeplitz_d{d1}"] = toeplitz_norm(layer, d1)
        row[f"time_toeplitz_d{d1}"] = time.perf_counter() - t
    t = time.perf_counter()
    row["hinf_grid"] = hinf_grid(layer, grid_n)
    row["time_hinf_grid"] = time.perf_counter() - t
    row["status"] = "; ".join(status) or "ok"
    return row


def bench_columns(d1_list):
    values = ["roesser_sdp"] + [f"toeplitz_d{d}" for d in d1_list] + ["hinf_grid"]
    times = ["time_" + v for v in values]
    return ["instance"] + values + times + ["status"]


def run_bench(instances, kernel, seed, d1_list, grid_n=512, jobs=1, tol=1e-9):
    """Rows for ``instances`` seeded standard-normal kernels, plus a mean row."""
    seeds = np.random.SeedSequence(seed).spawn(instances)
    work = [(k, s, kernel, tuple(d1_list), grid_n, tol) for k, s in enumerate(seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(bench_instance, work))
    else:
        rows = [bench_instance(job) for job in work]
    columns = bench_columns(d1_list)
    mean = {"instance": "mean", "status": f"{sum(r['status'] == 'ok' for r in rows)}/{len(rows)} ok"}
    for key in columns[1:-1]:
        vals = np.array([r[key] for r in rows], dtype=float)
        mean[key] = float(np.nanmean(vals)) if np.any(np.isfinite(vals)) else float("nan")
    return rows, mean, columns


def cmd_bench_random(args):
    try:
        d1_list = [int(x) for x in args.d1_list.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--d1-list must be comma-separated integers, got {args.d1_list!r}") from None
    if not d1_list or min(d1_list) < 1:
        raise UsageError("--d1-list needs positive integers")
    if args.instances < 1 or args.kernel < 1:
        raise UsageError("--instances and --kernel must be positive")
    rows, mean, columns = run_bench(args.instances, args.kernel, args.seed, d1_list, args.grid_n, args.jobs)
    if args.format == "json":
        _emit({"schema": BENCH_SCHEMA, "seed": args.seed, "kernel": args.kernel, "rows": rows, "mean": mean},
              "json", args.out)
    else:
        _emit(rows + [mean], "csv", args.out, columns)
    return EXIT_OK


# ---------------------------------------------------------------- debug surfaces


def cmd_simulate(args):
    """Realize every conv layer, simulate it on a random input and compare with the convolution."""
    spec = load_network(args.model)
    rng = np.random.default_rng(args.seed)
    size = args.size or spec.input_height
    u = Signal2D((1, 1), rng.standard_normal((size, size, spec.input_channels)))
    layers = []
    worst = 0.0
    for k, layer in enumerate(spec.conv_layers, start=1):
        if u.shape[2] != layer.c_in:
            u = Signal2D((1, 1), rng.standard_normal((size, size, layer.c_in)))
        y_sim = simulate(realize_conv(layer), u)
        y_ref = conv_forward(layer, u)
        diff = float(np.max(np.abs(y_sim.data - y_ref.data)))
        worst = max(worst, diff)
        layers.append({"layer": k, "max_abs_diff": diff, "support": [list(y_ref.lo), list(y_ref.hi)]})
        u = y_ref
    report = {"schema": REPORT_SCHEMA, "model": str(args.model), "seed": args.seed, "layers": layers,
              "max_abs_diff": worst, "passed": worst <= args.tol}
    _emit(report, args.out, args.output, ["schema", "model", "seed", "max_abs_diff", "passed"])
    return EXIT_OK if report["passed"] else EXIT_DATA


def cmd_realize(args):
    spec = load_network(args.model)
    if not 1 <= args.layer <= len(spec.conv_layers):
        raise UsageError(f"--layer must be between 1 and {len(spec.conv_layers)}")
    sys_ = realize_conv(spec.conv_layers[args.layer - 1])
    report = {"schema": REPORT_SCHEMA, "model": str(args.model), "layer": args.layer, "n1": sys_.n1,
              "n2": sys_.n2, "reachable_dim": int(reachable_subspace(sys_).shape[1]), "delay": sys_.r}
    if args.matrices:
        with open(args.matrices, "w", encoding="utf-8") as fh:
            fh.write(sys_.to_json())
        report["matrices"] = str(args.matrices)
    _emit(report, args.out, args.output)
    return EXIT_OK


def cmd_check(args):
    spec = load_network(args.model)
    try:
        cert = LipschitzCertificate.from_json(str(args.certificate))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ModelError(f"cannot read certificate {args.certificate}: {exc}") from exc
    target = spec if cert.kind == "hybrid" else spec.conv_layers
    check = validate_certificate(target, cert, trials=args.trials, seed=args.seed)
    report = {"schema": REPORT_SCHEMA, "model": str(args.model), "certificate": str(args.certificate),
              "gamma": cert.gamma, "validation": "pass" if check.passed else "fail", "checks": check.checks,
              "failures": check.failures}
    _emit(report, args.out, args.output, ["schema", "model", "certificate", "gamma", "validation"])
    return EXIT_OK if check.passed else EXIT_SOLVER


# ---------------------------------------------------------------- parser


def build_parser():
    parser = _Parser(prog="roesserlip", description="Lipschitz certificates for convolutional networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_default="json"):
        p.add_argument("--out", choices=["json", "csv"], default=out_default, help="report format")
        p.add_argument("--output", help="write the report to this file instead of stdout")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("lipschitz", help="certify or estimate a Lipschitz bound")
    p.add_argument("model")
    p.add_argument("--method", choices=["roesser-sdp", "toeplitz", "hinf-grid"], default="roesser-sdp")
    p.add_argument("--d1", type=int, help="input size for the Toeplitz baseline (default: model input size)")
    p.add_argument("--project", action=argparse.BooleanOptionalAction, default=True,
                   help="restrict storage to the reachable subspace")
    p.add_argument("--grid-n", type=int, default=512)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--solver", default="auto")
    p.add_argument("--trials", type=int, default=100, help="validation trajectories")
    p.add_argument("--cert", help="write the certificate JSON here")
    common(p)
    p.set_defaults(func=cmd_lipschitz)

    p = sub.add_parser("bench-random", help="random-kernel benchmark table")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d1-list", default="5,10,20,50")
    p.add_argument("--grid-n", type=int, default=512)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_bench_random)

    p = sub.add_parser("simulate", help="compare realized layers with direct convolution")
    p.add_argument("model")
    p.add_argument("--size", type=int)
    p.add_argument("--tol", type=float, default=1e-10)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("realize", help="realize one conv layer and report its dimensions")
    p.add_argument("model")
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--matrices", help="write the realization matrices as JSON")
    common(p)
    p.set_defaults(func=cmd_realize)

    p = sub.add_parser("check", help="validate a stored certificate against a model")
    p.add_argument("model")
    p.add_argument("certificate")
    p.add_argument("--trials", type=int, default=100)
    common(p)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"roesserlip: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, OSError) as exc:
        print(f"roesserlip: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SolverError as exc:
        print(f"roesserlip: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
