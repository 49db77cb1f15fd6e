"""Command-line interface: ``fastqrs {simulate,estimate,bootstrap,bench,diagnose}``.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
The exit code is 0 when the run completed, 1 on a run-level error and 2 on
bad usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np

from .bootstrap import BootstrapError, bootstrap_qrs, confidence_bands, draws_to_json
from .qrs import InstrumentConfig, QrsFit, estimate
from .simulation import DgpConfig, numerical_diagnostics, run_benchmark, simulate_dgp
from .types import DataValidationError, EstimationConfig, load_config, read_csv, write_csv

log = logging.getLogger("fastqrs")

THREADS_ENV = "FASTQRS_THREADS"

BENCH_PRESETS: dict[str, dict[str, Any]] = {
    "paper-small": {"configs": [(1000, 2), (2000, 2)], "algorithms": ["alg2", "alg3"], "reps": 2},
    "paper": {
        "configs": [(n, k) for n in (1000, 10000) for k in (2, 5, 10)],
        "algorithms": ["baseline", "alg1-repeated", "alg2", "alg3"],
        "reps": 10,
    },
}

# k counts the intercept, so k=2 is a single covariate
DIAGNOSE_PRESETS: dict[str, dict[str, int]] = {
    "section5": {"n": 10000, "k": 2},
    "section5-small": {"n": 2000, "k": 2},
}


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _versions() -> dict[str, str]:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_path: str | None = None
    seed: int | None = None
    threads: int = 1
    versions: dict[str, str] = field(default_factory=_versions)
    started: str = field(default_factory=_now)
    finished: str | None = None
    outputs: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    status: str = "running"
    error: str | None = None

    @property
    def n_warnings(self) -> int:
        return len(self.warnings)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        body = asdict(self)
        body["n_warnings"] = self.n_warnings
        path.write_text(json.dumps(body, indent=1), encoding="utf-8")
        return path


def _fit_warnings(diag: dict[str, Any]) -> list[str]:
    out = []
    if diag.get("n_unconverged"):
        out.append(f"{diag['n_unconverged']} cells did not reach the gap tolerance")
    if diag.get("n_fallback"):
        out.append(f"{diag['n_fallback']} cells fell back to a full-sample solve")
    return out


def cmd_simulate(args, man: RunManifest, out: Path) -> None:
    cfg = DgpConfig(n=args.n, k=args.k, theta_true=args.theta, seed=args.seed, constants_seed=args.constants_seed)
    man.seed = args.seed
    data, truth = simulate_dgp(cfg)
    write_csv(data, out / "dataset.csv")
    body = {**truth.to_dict(), "n": cfg.n, "k": cfg.k, "seed": cfg.seed, "constants_seed": cfg.constants_seed}
    (out / "truth.json").write_text(json.dumps(body, indent=1), encoding="utf-8")
    man.outputs += [str(out / "dataset.csv"), str(out / "truth.json")]


def _instrument(cfg: EstimationConfig) -> InstrumentConfig:
    return InstrumentConfig(degree=cfg.instrument_degree)


def cmd_estimate(args, man: RunManifest, out: Path) -> None:
    cfg = load_config(args.config)
    data = read_csv(args.data)
    p = args.p if args.p is not None else cfg.p_candidates
    fit = estimate(args.algorithm, data, cfg.copula_grid, cfg.fine_grid, cfg.coarse_grid,
                   _instrument(cfg), cfg.solver, p=p, threads=args.threads)
    fit.write_json(out / "fit.json")
    (out / "beta.csv").write_text(fit.beta_csv(), encoding="utf-8")
    man.outputs += [str(out / "fit.json"), str(out / "beta.csv")]
    man.warnings += _fit_warnings(fit.diagnostics)
    print(f"theta_hat = {fit.theta_hat:g}")


def cmd_bootstrap(args, man: RunManifest, out: Path) -> None:
    cfg = load_config(args.config)
    fit_path = Path(args.fit)
    if not fit_path.is_file():
        raise BootstrapError(f"fit file {fit_path} not found; run 'estimate' first")
    fit = QrsFit.read_json(fit_path)
    data = read_csv(args.data)
    man.seed = args.seed
    p = args.p if args.p is not None else cfg.p_candidates
    draws = bootstrap_qrs(data, fit, cfg.copula_grid, cfg.fine_grid, cfg.coarse_grid, args.j, args.variant,
                          cfg.solver, p=p, seed=args.seed, instr=fit.instrument, threads=args.threads)
    meta = {"variant": args.variant, "seed": args.seed, "taus": cfg.fine_grid.values.tolist(),
            "theta_hat": fit.theta_hat, "data_hash": fit.data_hash}
    (out / "draws.json").write_text(draws_to_json(draws, **meta), encoding="utf-8")
    bands = confidence_bands(draws, args.level, taus=cfg.fine_grid.values)
    (out / "bands.csv").write_text(bands.to_csv(), encoding="utf-8")
    man.outputs += [str(out / "draws.json"), str(out / "bands.csv")]
    bad = [d for d in draws if not d.valid]
    if bad:
        man.warnings.append(f"{len(bad)} of {len(draws)} draws invalid")
    n_unconv = sum(d.diagnostics.get("n_unconverged", 0) for d in draws if d.valid)
    if n_unconv:
        man.warnings.append(f"{n_unconv} bootstrap cells did not reach the gap tolerance")


def cmd_bench(args, man: RunManifest, out: Path) -> None:
    cfg = load_config(args.config)
    preset = dict(BENCH_PRESETS[args.preset])
    if args.n or args.k:
        ns = args.n or sorted({n for n, _ in preset["configs"]})
        ks = args.k or sorted({k for _, k in preset["configs"]})
        preset["configs"] = [(n, k) for n in ns for k in ks]
    if args.algorithms:
        preset["algorithms"] = args.algorithms
    if args.reps is not None:
        preset["reps"] = args.reps
    man.seed = args.seed
    report = run_benchmark(
        preset["configs"], preset["algorithms"], preset["reps"], args.seed,
        copula_grid=cfg.copula_grid, fine_grid=cfg.fine_grid, coarse_grid=cfg.coarse_grid,
        p=cfg.p_candidates, config=cfg.solver, instr=_instrument(cfg), threads=args.threads,
    )
    man.outputs += [str(p) for p in report.write(out)]
    failed = sum(not r["ok"] for r in report.records)
    if failed:
        man.warnings.append(f"{failed} replications failed")
    for row in report.summary():
        print(f"n={row['n']} k={row['k']} {row['algorithm']}: {row['mean_seconds']:.2f} s, "
              f"mse={row['mse_theta']:.3g}")


def cmd_diagnose(args, man: RunManifest, out: Path) -> None:
    cfg = load_config(args.config)
    preset = DIAGNOSE_PRESETS[args.preset]
    man.seed = args.seed
    dgp = DgpConfig(n=args.n or preset["n"], k=preset["k"], seed=args.seed, constants_seed=args.seed)
    tables = numerical_diagnostics(dgp, cfg.copula_grid, cfg.fine_grid, cfg.solver, _instrument(cfg))
    man.outputs += [str(p) for p in tables.write(out)]
    for row in tables.summary():
        print(f"{row['implementation']}: suboptimal={row['suboptimal']} min_ratio={row['min_ratio']:.12g} "
              f"theta_hat={row['theta_hat']:g}")


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "bootstrap": cmd_bootstrap,
    "bench": cmd_bench,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastqrs", description="Quantile regression with sample selection.")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or the CPU count)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a dataset from the Monte Carlo design")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--k", type=int, default=2, help="number of regressors including the intercept")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--constants-seed", type=int, default=0)
    p.add_argument("--out", default=".")

    p = sub.add_parser("estimate", help="estimate the copula parameter and quantile process")
    p.add_argument("--data", required=True)
    p.add_argument("--algorithm", choices=["baseline", "alg1", "alg2", "alg3"], default="alg2")
    p.add_argument("--config", default=None)
    p.add_argument("--p", type=int, default=None, help="number of refinement candidates (alg3)")
    p.add_argument("--out", default=".")

    p = sub.add_parser("bootstrap", help="weighted bootstrap from a stored fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--j", type=int, default=100)
    p.add_argument("--variant", choices=["reduced", "refined"], default="reduced")
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=float, default=0.90)
    p.add_argument("--out", default=".")

    p = sub.add_parser("bench", help="Monte Carlo timing and accuracy experiment")
    p.add_argument("--preset", choices=sorted(BENCH_PRESETS), default="paper-small")
    p.add_argument("--n", type=int, nargs="*", default=None)
    p.add_argument("--k", type=int, nargs="*", default=None)
    p.add_argument("--algorithms", nargs="*", default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")

    p = sub.add_parser("diagnose", help="cold-start versus preprocessing solver diagnostics")
    p.add_argument("--preset", choices=sorted(DIAGNOSE_PRESETS), default="section5-small")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = default_threads()
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return 1
    man = RunManifest(command=args.command, argv=argv, config_path=getattr(args, "config", None),
                      threads=args.threads)
    code = 0
    try:
        COMMANDS[args.command](args, man, out)
        man.status = "ok"
    except (DataValidationError, BootstrapError, ValueError, RuntimeError, OSError, np.linalg.LinAlgError) as exc:
        man.status = "error"
        man.error = f"{type(exc).__name__}: {exc}"
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    man.finished = _now()
    try:
        man.write(out)
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
        code = 1
    for w in man.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
