"""Command line experiment harness.

Subcommands cover inducing point selection, fitting and prediction of the
clustered model, and the three table-producing sweeps (resolution, grid
matrix conditioning, data size).  Every table carries a provenance header
(command, config hash, seed) plus a JSON sidecar of the full config, so a
row can be regenerated exactly.  Exit codes: 0 success, 1 usage error,
2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from typing import Optional, Sequence

import numpy as np
from scipy.stats import qmc

from . import covertree as ct
from . import diagnostics as dg
from .kernels import Family, Kernel, gram
from .linalg import NumericalFailure, conjugate_gradient, spectrum, wasserstein2_gaussians
from .sgp import (
    ClusteredModel,
    Dataset,
    ExactGP,
    TrainConfig,
    clustered_posterior,
    exact_posterior,
    fit_clustered,
    sample_prior,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data files


def load_csv(path: str) -> Dataset:
    """Dataset from a CSV with header x1,...,xd,y; rejects non-finite rows."""
    X, y, _ = _load_csv_columns(path, require_targets=True)
    return Dataset(X, y)


def _load_csv_columns(path: str, require_targets: bool):
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise UsageError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        has_y = header[-1] == "y"
        xcols = header[:-1] if has_y else header
        expected = [f"x{i + 1}" for i in range(len(xcols))]
        if xcols != expected or (require_targets and not has_y):
            want = "x1,...,xd" + (",y" if require_targets else "[,y]")
            raise UsageError(f"{path}: header must be {want}, got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise UsageError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise UsageError(f"{path}: line {lineno}: non-numeric value") from None
            if not all(math.isfinite(v) for v in vals):
                raise UsageError(f"{path}: line {lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise UsageError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    if has_y:
        return arr[:, :-1], arr[:, -1], True
    return arr, None, False


def write_csv_dataset(path: str, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(data.d)] + ["y"])
        for xi, yi in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


# ---------------------------------------------------------------------------
# tables with provenance


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def write_table(path: str, command: str, config: dict, fieldnames: list, rows: list) -> None:
    digest = _config_hash(config)
    with open(path, "w", newline="") as fh:
        fh.write(f"# command={command}\n")
        fh.write(f"# config_hash={digest}\n")
        fh.write(f"# seed={config.get('seed', '')}\n")
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow(row)
    with open(path + ".config.json", "w") as fh:
        json.dump({"command": command, "config_hash": digest, "config": config}, fh, indent=2)
        fh.write("\n")


def read_table(path: str):
    """Provenance metadata and rows (numeric fields parsed) of a table."""
    meta, rows = {}, []
    with open(path, newline="") as fh:
        header_lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key] = val
            else:
                header_lines.append(line)
                break
        reader = csv.DictReader(header_lines + list(fh))
        for raw in reader:
            row = {}
            for k, v in raw.items():
                try:
                    row[k] = float(v)
                except (TypeError, ValueError):
                    row[k] = v
            rows.append(row)
    return meta, rows


# ---------------------------------------------------------------------------
# shared experiment machinery (importable, used by the sweep subcommands)


def default_kernel(d: int) -> Kernel:
    return Kernel(Family.SQUARED_EXPONENTIAL, 1.0, np.ones(d))


def query_grid(d: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """64-point low-discrepancy grid over the data's bounding box."""
    unit = qmc.Sobol(d, scramble=False).random_base2(6)
    return lo + unit * (hi - lo)


def _shifted_gram_of(model: ClusteredModel) -> np.ndarray:
    A = gram(model.kernel, model.z)
    A[np.diag_indices_from(A)] += model.lam
    return A


def synthetic_prior_dataset(d: int, n: int, sigma2: float, seed: int) -> Dataset:
    """Inputs uniform on [-5, 5]^d, targets drawn from the default prior plus noise."""
    rng = np.random.default_rng((seed, d, n))
    X = rng.uniform(-5.0, 5.0, size=(n, d))
    kernel = Kernel(Family.SQUARED_EXPONENTIAL, 1.0, np.full(d, 0.5 * math.sqrt(d)))
    f = sample_prior(kernel, X, seed=seed)
    y = f + math.sqrt(sigma2) * rng.standard_normal(n)
    return Dataset(X, y)


def sweep_resolution_rows(d_list, n: int, epsilons, seeds, sigma2: float) -> list:
    rows = []
    for d in sorted(d_list):
        kernel = Kernel(Family.SQUARED_EXPONENTIAL, 1.0, np.full(d, 0.5 * math.sqrt(d)))
        grid = query_grid(d, np.full(d, -5.0), np.full(d, 5.0))
        for seed in seeds:
            data = synthetic_prior_dataset(d, n, sigma2, seed)
            exact = exact_posterior(ExactGP(kernel, sigma2, data.X, data.y), grid)
            for eps in sorted(epsilons):
                row = {"d": d, "epsilon": eps, "seed": seed}
                try:
                    tree = ct.build(data.X, eps, seed=seed)
                    z = ct.inducing_points(tree)
                    model = fit_clustered(data, z, kernel, sigma2)
                    belief = clustered_posterior(model, grid)
                    A = _shifted_gram_of(model)
                    report = conjugate_gradient(lambda w: A @ w, model.u, tag="kzz_plus_lambda")
                    row.update(
                        m=model.m,
                        wasserstein2=wasserstein2_gaussians(belief.mean, belief.cov, exact.mean, exact.cov),
                        cond=spectrum(A).cond,
                        cg_iterations=report.iterations,
                        status="ok",
                    )
                except (NumericalFailure, FloatingPointError) as e:
                    row.update(m="", wasserstein2="", cond="", cg_iterations="", status=f"error: {e}")
                rows.append(row)
    rows.sort(key=lambda r: (r["d"], r["epsilon"], r["seed"]))
    return rows


def kms_demo_rows(rhos, ns, trials: int, seed: int) -> list:
    rows = []
    for rho in sorted(rhos):
        for n in sorted(ns):
            from .kernels import kms_matrix

            K = kms_matrix(rho, n)
            cond = spectrum(K).cond
            bounds = dg.kms_cond_bounds(rho, n)
            rng = np.random.default_rng((seed, int(rho * 10**9), n))
            errs = []
            for _ in range(trials):
                v = rng.standard_normal(n)
                errs.append(float(np.linalg.norm(v - np.linalg.solve(K, K @ v)) / np.linalg.norm(v)))
            q25, med, q75 = np.percentile(errs, [25, 50, 75])
            rows.append(
                {
                    "rho": rho,
                    "n": n,
                    "cond": cond,
                    "trench_lower": bounds.lower,
                    "trench_upper": "" if bounds.upper is None else bounds.upper,
                    "err_median": med,
                    "err_q25": q25,
                    "err_q75": q75,
                }
            )
    return rows


def covertree_for_target_m(X: np.ndarray, m_target: int, seed: int) -> ct.InducingSet:
    """Inducing set of roughly m_target points via bisection on the resolution."""
    root = X.mean(axis=0)
    d_max = float(np.sqrt(((X - root) ** 2).sum(axis=1)).max())
    if d_max == 0.0 or m_target <= 1:
        return ct.inducing_points(ct.build(X, max(d_max, 1.0), seed=seed))
    lo, hi = math.log(d_max / 4096.0), math.log(d_max)
    best = None
    for _ in range(16):
        mid = (lo + hi) / 2.0
        z = ct.inducing_points(ct.build(X, math.exp(mid), seed=seed))
        if best is None or abs(z.m - m_target) < abs(best.m - m_target):
            best = z
        if z.m == m_target:
            break
        if z.m > m_target:
            lo = mid
        else:
            hi = mid
    return best


def datasize_sweep_rows(data: Dataset, n_list, m_list, methods, kernel: Kernel, sigma2: float, steps: int, seed: int) -> list:
    rows = []
    for n in sorted(n_list):
        if n > data.n:
            raise UsageError(f"requested subsample {n} exceeds dataset size {data.n}")
        rng = np.random.default_rng((seed, n))
        idx = rng.permutation(data.n)[:n]
        cut = max(1, int(0.8 * n))
        train_set, test_set = data.subset(idx[:cut]), data.subset(idx[cut:])
        for m in sorted(m_list):
            for method in sorted(methods):
                row = {"n": n, "m_requested": m, "method": method}
                try:
                    if method == "covertree":
                        z = covertree_for_target_m(train_set.X, m, seed)
                    elif method == "uniform":
                        z = ct.select_uniform(train_set.X, min(m, train_set.n), seed)
                    elif method == "kmeans":
                        z = ct.select_kmeans(train_set.X, min(m, train_set.n), 20, seed)
                    else:
                        raise UsageError(f"unknown method {method!r}")
                    model = fit_clustered(train_set, z, kernel, sigma2)
                    if steps > 0:
                        model = train(model, train_set, TrainConfig(steps=steps, seed=seed)).model
                    belief = clustered_posterior(model, test_set.X)
                    rmse = float(np.sqrt(np.mean((belief.mean - test_set.y) ** 2)))
                    cond = spectrum(_shifted_gram_of(model)).cond
                    row.update(m=model.m, cond=cond, rmse=rmse, status="ok")
                except (NumericalFailure, FloatingPointError) as e:
                    row.update(m="", cond="", rmse="", status=f"error: {e}")
                rows.append(row)
    rows.sort(key=lambda r: (r["n"], r["m_requested"], r["method"]))
    return rows


# ---------------------------------------------------------------------------
# subcommands


def cmd_select(args) -> int:
    data = load_csv(args.data)
    t0 = time.perf_counter()
    if args.method == "covertree":
        if args.epsilon is None:
            raise UsageError("--epsilon is required for method=covertree")
        tree = ct.build(
            data.X,
            args.epsilon,
            lloyd_averaging=not args.no_lloyd,
            voronoi_repartition=not args.no_voronoi,
            seed=args.seed,
        )
        z = ct.inducing_points(tree)
    elif args.method == "uniform":
        if args.m is None:
            raise UsageError("--m is required for method=uniform")
        z = ct.select_uniform(data.X, args.m, args.seed)
    else:
        if args.m is None:
            raise UsageError("--m is required for method=kmeans")
        z = ct.select_kmeans(data.X, args.m, args.kmeans_iters, args.seed)
    wall_ms = (time.perf_counter() - t0) * 1e3
    payload = z.to_json()
    payload["metrics"] = {
        "M": z.m,
        "separation": ct.separation(z),
        "spatial_resolution": ct.spatial_resolution(data.X, z),
        "wall_time_ms": wall_ms,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"wrote {args.out}: M={z.m}")
    return EXIT_OK


def _load_inducing(path: str) -> ct.InducingSet:
    try:
        with open(path) as fh:
            return ct.InducingSet.from_json(json.load(fh))
    except (OSError, KeyError, ValueError) as e:
        raise UsageError(f"cannot load inducing set from {path}: {e}") from None


def _load_kernel(path: str) -> Kernel:
    try:
        with open(path) as fh:
            return Kernel.from_json(json.load(fh))
    except (OSError, KeyError, ValueError) as e:
        raise UsageError(f"cannot load kernel from {path}: {e}") from None


def cmd_fit(args) -> int:
    data = load_csv(args.data)
    z = _load_inducing(args.z)
    kernel = _load_kernel(args.kernel)
    if args.sigma2 <= 0.0:
        raise UsageError("--sigma2 must be positive")
    model = fit_clustered(data, z, kernel, args.sigma2)
    history = []
    if args.steps > 0:
        config = TrainConfig(
            steps=args.steps, batch_size=args.batch, step_size=args.lr, probes=args.probes, seed=args.seed
        )
        try:
            result = train(model, data, config)
        except NumericalFailure:
            report = dg.stability_report(model)
            print(json.dumps({"stability_report": report.to_json()}), file=sys.stderr)
            raise
        model, history = result.model, result.history
    with open(args.out, "w") as fh:
        json.dump(model.to_json(), fh, indent=2)
        fh.write("\n")
    config_dict = {
        "data": args.data, "z": args.z, "kernel": args.kernel, "sigma2": args.sigma2,
        "steps": args.steps, "batch": args.batch, "lr": args.lr, "probes": args.probes, "seed": args.seed,
    }
    write_table(
        args.out + ".log.csv", "fit", config_dict, ["step", "objective"],
        [{"step": s, "objective": o} for s, o in history],
    )
    print(f"wrote {args.out}: M={model.m}, steps={args.steps}")
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        with open(args.model) as fh:
            model = ClusteredModel.from_json(json.load(fh))
    except (OSError, KeyError, ValueError) as e:
        raise UsageError(f"cannot load model from {args.model}: {e}") from None
    Xq, yq, has_y = _load_csv_columns(args.query, require_targets=False)
    if Xq.shape[1] != model.z.shape[1]:
        raise UsageError(f"query dimension {Xq.shape[1]} does not match model dimension {model.z.shape[1]}")
    belief = clustered_posterior(model, Xq)
    stddev = np.sqrt(np.clip(np.diag(belief.cov), 0.0, None))
    config_dict = {"model": args.model, "query": args.query, "seed": 0}
    rows = [{"mean": repr(float(m)), "stddev": repr(float(s))} for m, s in zip(belief.mean, stddev)]
    write_table(args.out, "predict", config_dict, ["mean", "stddev"], rows)
    if has_y:
        rmse = float(np.sqrt(np.mean((belief.mean - yq) ** 2)))
        var_y = np.diag(belief.cov) + model.noise_sigma2
        nlpd = float(np.mean(0.5 * np.log(2.0 * math.pi * var_y) + (yq - belief.mean) ** 2 / (2.0 * var_y)))
        print(f"rmse={rmse!r} nlpd={nlpd!r}")
    print(f"wrote {args.out}: {len(rows)} predictions")
    return EXIT_OK


def cmd_sweep_resolution(args) -> int:
    rows = sweep_resolution_rows(args.d, args.n, args.epsilons, args.seeds, args.sigma2)
    config_dict = {
        "d": args.d, "n": args.n, "epsilons": args.epsilons, "seeds": args.seeds,
        "sigma2": args.sigma2, "seed": args.seeds[0] if args.seeds else 0,
    }
    write_table(
        args.out, "sweep-resolution", config_dict,
        ["d", "epsilon", "seed", "m", "wasserstein2", "cond", "cg_iterations", "status"], rows,
    )
    print(f"wrote {args.out}: {len(rows)} rows")
    return EXIT_OK


def cmd_kms_demo(args) -> int:
    rows = kms_demo_rows(args.rho, args.n, args.trials, args.seed)
    config_dict = {"rho": args.rho, "n": args.n, "trials": args.trials, "seed": args.seed}
    write_table(
        args.out, "kms-demo", config_dict,
        ["rho", "n", "cond", "trench_lower", "trench_upper", "err_median", "err_q25", "err_q75"], rows,
    )
    print(f"wrote {args.out}: {len(rows)} rows")
    return EXIT_OK


def cmd_datasize_sweep(args) -> int:
    data = load_csv(args.data)
    kernel = _load_kernel(args.kernel) if args.kernel else default_kernel(data.d)
    rows = datasize_sweep_rows(data, args.n_list, args.m_list, args.methods, kernel, args.sigma2, args.steps, args.seed)
    config_dict = {
        "data": args.data, "n_list": args.n_list, "m_list": args.m_list, "methods": args.methods,
        "sigma2": args.sigma2, "steps": args.steps, "seed": args.seed,
    }
    write_table(
        args.out, "datasize-sweep", config_dict,
        ["n", "m_requested", "method", "m", "cond", "rmse", "status"], rows,
    )
    print(f"wrote {args.out}: {len(rows)} rows")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stablegp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("select", help="select inducing points from a dataset")
    s.add_argument("data")
    s.add_argument("--method", choices=["covertree", "uniform", "kmeans"], required=True)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--m", type=int)
    s.add_argument("--kmeans-iters", type=int, default=20)
    s.add_argument("--no-lloyd", action="store_true")
    s.add_argument("--no-voronoi", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("fit", help="fit the clustered model, optionally training hyperparameters")
    s.add_argument("data")
    s.add_argument("z")
    s.add_argument("kernel")
    s.add_argument("--sigma2", type=float, default=0.1)
    s.add_argument("--steps", type=int, default=0)
    s.add_argument("--batch", type=int, default=1000)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--probes", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="posterior mean/stddev at query points")
    s.add_argument("model")
    s.add_argument("query")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("sweep-resolution", help="accuracy/conditioning vs spatial resolution")
    s.add_argument("--d", type=int, nargs="+", choices=[1, 2, 4, 8], default=[1, 2])
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--epsilons", type=float, nargs="+", default=[0.3, 0.6, 1.2, 2.4])
    s.add_argument("--seeds", type=int, nargs="+", default=[0])
    s.add_argument("--sigma2", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_resolution)

    s = sub.add_parser("kms-demo", help="conditioning of the exponential-kernel grid matrix")
    s.add_argument("--rho", type=float, nargs="+", default=[0.9, 0.99, 0.999])
    s.add_argument("--n", type=int, nargs="+", default=[64, 256, 1024])
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_kms_demo)

    s = sub.add_parser("datasize-sweep", help="stability/accuracy vs data size and inducing count")
    s.add_argument("data")
    s.add_argument("--n-list", type=int, nargs="+", required=True)
    s.add_argument("--m-list", type=int, nargs="+", required=True)
    s.add_argument("--methods", nargs="+", default=["covertree"], choices=["covertree", "uniform", "kmeans"])
    s.add_argument("--kernel")
    s.add_argument("--sigma2", type=float, default=0.1)
    s.add_argument("--steps", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_datasize_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (NumericalFailure, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
