"""Command-line entry point: validate, solve, sample-paths, minimize, verify,
report.

Every run writes its artifacts plus a manifest (config hash, tool version,
per-artifact checksums, wall time, peak memory) into the output directory.
Runs are deterministic given the config and seed; manifests differ only in
their timing fields.

Exit codes: 0 success, 1 other package error, 2 config parse error,
3 validation error, 4 CFL violation, 5 numerical guard tripped (blow-up,
bound violation, velocity range, domain escape), 6 verification check
failed, 7 missing input artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import resource
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, markov, pde_solver, plots, random_minimizer, verify
from .config import RunConfig, load_config
from .errors import (
    BlowUp,
    BoundViolated,
    CFLViolated,
    HjswitchError,
    InconsistentTable,
    NumericsError,
    OutOfDomain,
    ParseError,
    SegmentFailure,
    ValidationError,
    VelocityRangeExceeded,
)

EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_CFL = 4
EXIT_NUMERICS = 5
EXIT_CHECKS = 6
EXIT_MISSING = 7

_NUMERIC_ERRORS = (
    BlowUp, BoundViolated, VelocityRangeExceeded, OutOfDomain,
    NumericsError, InconsistentTable, SegmentFailure,
)


@dataclass(frozen=True)
class RunManifest:
    """Checksums and provenance for one completed run."""

    config_hash: str
    version: str
    command: str
    artifacts: dict
    wall_time_s: float
    peak_rss_mb: float


def _checksum(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, config_hash: str, command: str, paths, started: float) -> Path:
    artifacts = {str(p.relative_to(out_dir)): _checksum(p) for p in sorted(paths)}
    manifest = RunManifest(
        config_hash,
        __version__,
        command,
        artifacts,
        time.perf_counter() - started,
        resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0,
    )
    target = out_dir / f"manifest_{command}.json"
    target.write_text(json.dumps(asdict(manifest), sort_keys=True, indent=2))
    return target


def verify_manifest(path: str) -> bool:
    """Re-read every artifact listed in a manifest and compare checksums."""
    data = json.loads(Path(path).read_text())
    base = Path(path).parent
    return all(
        _checksum(base / rel) == digest for rel, digest in data["artifacts"].items()
    )


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out_dir = Path(args.out if args.out else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, out_dir


def run_validate(args) -> int:
    cfg = load_config(args.config)
    problem = cfg.problem
    print(f"config {args.config}: ok (hash {cfg.config_hash[:12]})")
    print(f"  components: {problem.m}, dimension: {problem.dim}")
    print(f"  horizon {problem.horizon}, box half-width {problem.half_width}")
    print(f"  datum bound {problem.datum_bound:.4g}, Lipschitz {problem.datum_lipschitz:.4g}")
    print(f"  kappa estimate {problem.kappa:.4g}, velocity ceiling {problem.velocity_ceiling:.4g}")
    print(f"  CFL bound {pde_solver.cfl_bound(problem, cfg.resolution):.6g}")
    return 0


def run_solve(args) -> int:
    started = time.perf_counter()
    cfg, out_dir = _prepare(args)
    solver = pde_solver.solve_fd if args.scheme == "fd" else pde_solver.solve_semilagrangian
    field = solver(cfg.problem, cfg.resolution)
    report = pde_solver.apriori_bounds_check(field, cfg.problem)
    field_path = out_dir / f"field_{args.scheme}.csv"
    field.save_csv(str(field_path))
    bounds_path = out_dir / f"bounds_{args.scheme}.json"
    bounds_path.write_text(json.dumps(asdict(report), sort_keys=True, indent=2))
    manifest = write_manifest(out_dir, cfg.config_hash, f"solve_{args.scheme}", [field_path, bounds_path], started)
    print(f"solved ({args.scheme}): {field_path}")
    print(f"a-priori bounds: lower margin {report.lower_margin:.3e}, upper margin {report.upper_margin:.3e}")
    print(f"manifest: {manifest}")
    return 0


def run_sample_paths(args) -> int:
    started = time.perf_counter()
    cfg, out_dir = _prepare(args)
    count = args.count if args.count else cfg.mc_paths
    states = [args.state] if args.state else list(range(1, cfg.problem.m + 1))
    paths = []
    for i in states:
        ens = markov.sample_ensemble(cfg.problem.coupling, i, cfg.problem.horizon, count, cfg.seed + i)
        target = out_dir / f"paths_state{i}.txt"
        markov.save_ensemble(ens, str(target))
        paths.append(target)
        print(f"sampled {count} paths from state {i}: {target}")
    write_manifest(out_dir, cfg.config_hash, "sample_paths", paths, started)
    return 0


def run_minimize(args) -> int:
    started = time.perf_counter()
    cfg, out_dir = _prepare(args)
    problem = cfg.problem
    res = cfg.resolution
    field_path = Path(args.field) if args.field else out_dir / "field_sl.csv"
    if not field_path.exists():
        print(
            f"no solved field at {field_path}; run `hjswitch solve {args.config} --scheme sl` first",
            file=sys.stderr,
        )
        return EXIT_MISSING
    field = pde_solver.load_field_csv(str(field_path))
    state = args.state
    x = args.point
    if args.ensemble:
        ensemble = markov.load_ensemble(args.ensemble)
        if ensemble.initial_state != state:
            print(f"ensemble starts at {ensemble.initial_state}, requested state {state}", file=sys.stderr)
            return EXIT_VALIDATION
    else:
        ensemble = markov.sample_ensemble(problem.coupling, state, problem.horizon, cfg.mc_paths, cfg.seed + state)
    est = random_minimizer.expected_action(field, problem, ensemble, x, state, res, workers=args.workers)
    pde_value = pde_solver.evaluate(field, problem.horizon, x, state)

    engine = random_minimizer.MinimizerEngine(field, problem, res)
    curves_dir = out_dir / "curves"
    curves_dir.mkdir(exist_ok=True)
    written = []
    calibration_max = 0.0
    dynamics_medians = []
    curve_budget = min(args.curve_limit, len(ensemble))
    diagnostics_budget = min(8, curve_budget)
    for n in range(curve_budget):
        sample = engine.construct(ensemble.paths[n], x)
        target = curves_dir / f"path_{n:04d}.csv"
        sample.curve.save_csv(str(target))
        written.append(target)
        if n < max(diagnostics_budget, min(32, curve_budget)):
            calibration_max = max(
                calibration_max, random_minimizer.per_interval_calibration(sample, field, problem)
            )
        if n < diagnostics_budget and all(mem.differentiable for mem in problem.lagrangians.members):
            adjoint = random_minimizer.adjoint_curve(sample, problem.lagrangians)
            report = random_minimizer.dynamics_residual(sample, adjoint, field, problem)
            if report.smooth_points:
                dynamics_medians.append(report.momentum_residual_median)
    summary = {
        "mean": est.mean,
        "std_error": est.std_error,
        "pde_value": pde_value,
        "butterfly_gap": abs(est.mean - pde_value),
        "calibration_max": calibration_max,
        "dynamics_median": float(np.median(dynamics_medians)) if dynamics_medians else None,
        "point": x,
        "state": state,
        "paths": len(ensemble),
        "seed": cfg.seed,
    }
    summary_path = out_dir / "summary_minimize.json"
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2))
    written.append(summary_path)
    write_manifest(out_dir, cfg.config_hash, "minimize", written, started)
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def run_verify(args) -> int:
    started = time.perf_counter()
    cfg, out_dir = _prepare(args)
    if args.budget == "full":
        budget = verify.VerificationBudget(
            resolution=cfg.resolution, markov_paths=100_000, mc_paths=10_000,
            calibration_paths=100, dynamics_paths=10,
            points=(-2.0, -1.0, 0.0, 1.0, 2.0), seed=cfg.seed, workers=args.workers,
        )
    else:
        budget = verify.VerificationBudget(
            resolution=cfg.resolution, markov_paths=20_000, mc_paths=500,
            calibration_paths=20, dynamics_paths=5,
            points=(-1.0, 0.0, 1.0), seed=cfg.seed, workers=args.workers,
        )
    reports = verify.run_all(cfg.problem, budget)
    target = out_dir / "verify_report.json"
    target.write_text(verify.reports_to_json(reports))
    write_manifest(out_dir, cfg.config_hash, "verify", [target], started)
    print(verify.reports_table(reports))
    print(f"report: {target}")
    return 0 if all(r.passed for r in reports) else EXIT_CHECKS


def run_report(args) -> int:
    base = Path(args.run_dir)
    if not base.exists():
        print(f"run directory {base} does not exist", file=sys.stderr)
        return EXIT_MISSING
    written = plots.write_report(str(base))
    if len(written) <= 1:
        print(f"nothing to report in {base}; run solve/minimize/verify first", file=sys.stderr)
        return EXIT_MISSING
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hjswitch",
        description="Weakly coupled Hamilton-Jacobi systems: solvers, random minimizers, verification",
    )
    parser.add_argument("--version", action="version", version=f"hjswitch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("config", help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="parallel workers for Monte Carlo")
        p.add_argument("--out", default=None, help="output directory (default: config output.directory)")

    p = sub.add_parser("validate", help="parse and validate a config")
    p.add_argument("config")
    p.set_defaults(fn=run_validate)

    p = sub.add_parser("solve", help="run one grid solver")
    common(p)
    p.add_argument("--scheme", choices=("fd", "sl"), default="sl")
    p.set_defaults(fn=run_solve)

    p = sub.add_parser("sample-paths", help="sample switching-chain ensembles")
    common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--state", type=int, default=None, help="sample only this initial state")
    p.set_defaults(fn=run_sample_paths)

    p = sub.add_parser("minimize", help="construct minimizing random curves")
    common(p)
    p.add_argument("--field", default=None, help="solved field CSV (default: OUT/field_sl.csv)")
    p.add_argument("--ensemble", default=None, help="path ensemble file (default: sample fresh)")
    p.add_argument("--point", type=float, default=0.0, help="starting point x")
    p.add_argument("--state", type=int, default=1, help="initial index")
    p.add_argument("--curve-limit", type=int, default=100, help="how many per-path curve CSVs to write")
    p.set_defaults(fn=run_minimize)

    p = sub.add_parser("verify", help="run the full check suite")
    common(p)
    p.add_argument("--budget", choices=("small", "full"), default="small")
    p.set_defaults(fn=run_verify)

    p = sub.add_parser("report", help="render figures from a run directory")
    p.add_argument("run_dir")
    p.set_defaults(fn=run_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CFLViolated as exc:
        print(f"CFL violation: {exc}", file=sys.stderr)
        return EXIT_CFL
    except _NUMERIC_ERRORS as exc:
        print(f"numerical guard: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except HjswitchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
