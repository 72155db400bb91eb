"""Command-line driver: ``infogamma scan|evolve|verify|sample --config run.toml``.

Exit codes: 0 pass, 2 configuration, 3 evaluation, 4 solver, 5 check failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import dynamics as dyn
from . import expr as ex
from . import functionals as fn
from . import gamma_calc as gc
from . import tensor as tn
from .errors import (
    ConfigError, EvalError, InfoGammaError, InternalInconsistency, NonConvergence,
    NonPositiveDensity, SolverError,
)
from .grid import Grid, ScalarField, write_csv
from .model import Problem, build_problem

log = logging.getLogger("infogamma")

EXIT_OK, EXIT_CONFIG, EXIT_EVAL, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4, 5


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"invalid TOML in {path}: {err}") from None


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _grid_size(cfg: dict, key: str, default: int) -> int:
    n = _section(cfg, "grids").get(key, default)
    if not isinstance(n, int) or n < 4:
        raise ConfigError(f"grids.{key} must be an integer >= 4")
    return n


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: dict, args) -> Path:
    out = args.out or _section(cfg, "output").get("dir", "out")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ConfigError(f"output directory {out} is not writable: {err}") from None
    return out


def scan_problem(p: Problem, n: int) -> tuple:
    """Closed-lattice scan: tensor fields, eigenvalue field and rate report."""
    g = Grid.closed(p.lower, p.upper, n)
    R = tn.R_tensor(p, g)
    rac = tn.R_AC(p, g)
    lam = tn.lambda_min_field(R)
    return g, R, rac, lam, tn.global_rate(lam)


def cmd_scan(cfg: dict, args) -> int:
    p = build_problem(cfg)
    out = _out_dir(cfg, args)
    _, R, rac, lam, report = scan_problem(p, _grid_size(cfg, "scan", 200))
    write_csv(lam, out / "lambda_min.csv")
    write_csv(R, out / "r_tensor.csv")
    write_csv(rac, out / "r_ac.csv")
    _write_json(out / "rate_report.json", report.to_dict())
    log.info("lambda = %.6f at %s (positive=%s)", report.lam, report.argmin_point, report.positive)
    return EXIT_OK


def _rate(cfg: dict, p: Problem, args) -> float:
    if args.lam is not None:
        return float(args.lam)
    override = _section(cfg, "checks").get("lambda")
    if override is not None:
        return float(override)
    return scan_problem(p, _grid_size(cfg, "scan", 200))[4].lam


def _solver_config(cfg: dict) -> dyn.SolverConfig:
    sec = _section(cfg, "solver")
    try:
        return dyn.SolverConfig(
            T=float(sec["T"]),
            save_interval=sec.get("save_interval"),
            stride=sec.get("stride"),
            safety=float(sec.get("safety", 0.4)),
            scheme=sec.get("scheme", "exponential-fitting"),
        )
    except KeyError:
        raise ConfigError("[solver] needs T") from None
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[solver]: {err}") from None


def _initial(cfg: dict, p: Problem, g: Grid) -> ScalarField:
    sec = _section(cfg, "initial")
    kind = sec.get("type", "gaussian")
    if kind == "pi":
        return dyn.sampled_pi(p, g, normalize=True)
    if kind != "gaussian":
        raise ConfigError(f"unknown initial type {kind!r}")
    center = sec.get("center", [0.0] * p.dim)
    if len(center) != p.dim:
        raise ConfigError("initial.center has the wrong length")
    var = float(sec.get("variance", 0.2))
    if not var > 0:
        raise ConfigError("initial.variance must be positive")
    return dyn.truncated_gaussian(g, center, var)


def cmd_evolve(cfg: dict, args) -> int:
    p = build_problem(cfg)
    out = _out_dir(cfg, args)
    solver = _solver_config(cfg)
    checks = _section(cfg, "checks")
    g = p.grid(_grid_size(cfg, "solver", 128))
    lam = _rate(cfg, p, args)
    traj = dyn.evolve_fpe(p, _initial(cfg, p, g), solver)
    trace = fn.decay_trace(traj, p)
    trace.to_csv(out / "trace.csv")

    snap = out / "snapshots"
    snap.mkdir(exist_ok=True)
    stride = int(_section(cfg, "output").get("snapshot_stride", 1))
    for k in range(0, len(traj.fields), max(stride, 1)):
        write_csv(traj.fields[k], snap / f"p_{k:05d}.csv")

    reports = []
    if checks.get("fisher_decay", True):
        reports.append(fn.check_theorem1(trace, lam, float(checks.get("fisher_decay_tol", 0.05))))
    if checks.get("lsi", True):
        reports.append(fn.check_lsi_trace(trace, lam, float(checks.get("lsi_tol", 1e-6))))
    if checks.get("entropy_production", True):
        reports.append(fn.check_entropy_production(trace, p, float(checks.get("entropy_tol", 0.03))))
    if checks.get("decay_bounds", True):
        w2_every = int(checks.get("w2_every", 0))
        if w2_every > 0:
            eps = float(checks.get("w2_eps", 1e-2))
            coarse = int(checks.get("w2_coarse", 32))
            idx = list(range(0, len(traj.fields), w2_every))
            sub = fn.DecayTrace(
                times=trace.times[idx], mass=trace.mass[idx], fisher=trace.fisher[idx],
                kl=trace.kl[idx], l1=trace.l1[idx],
                w2=[fn.wasserstein2(traj.fields[k], p, eps=eps, coarse=coarse) for k in idx],
            )
            tol_w = fn.w2_error_bar(g, coarse, eps)
            reports.extend(fn.check_corollary3(sub, lam, trace.kl[0], tol_w=tol_w))
        else:
            reports.extend(fn.check_corollary3(trace, lam, trace.kl[0]))
    _write_json(out / "checks.json", [r.to_dict() for r in reports])
    failed = [r.name for r in reports if not r.passed]
    if failed:
        log.warning("failed checks: %s", ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def _problem_on_box(cfg: dict, lower, upper) -> Problem:
    moved = dict(cfg)
    moved["domain"] = {"lower": list(lower), "upper": list(upper)}
    return build_problem(moved)


def tilted_density(p: Problem, phi: ex.Expr, amp: float, n: int) -> ScalarField:
    """``pi * exp(amp * phi)`` normalized on an ``n``-cell grid of the box."""
    g = p.grid(n)
    x = g.points()
    v = np.exp(p.log_pi(x) + amp * ex.evaluate(phi, x))
    return ScalarField(g, v / (np.sum(v) * g.cell_volume))


def cmd_verify(cfg: dict, args) -> int:
    p = build_problem(cfg)
    out = _out_dir(cfg, args)
    sec = _section(cfg, "verify")
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    n_points = int(sec.get("points", 1000))
    tol = float(sec.get("tolerance", 1e-9))
    functions = tuple(sec.get("functions", gc.BATTERY_FUNCTIONS))
    problems = [p] + (gc.catalog_problems() if sec.get("catalog", True) else [])

    report = {}
    battery = gc.identity_battery(problems, functions, n_points, seed, tol=tol)
    report["identity"] = battery.to_dict()
    wrong = gc.identity_battery(problems, functions, n_points, seed, convention="flipped",
                                check=False, tol=tol)
    report["flipped_convention"] = {
        "max_residual": wrong.max_residual,
        "samples": wrong.samples,
        "discrepancy_shown": wrong.max_residual > 1e-2,
    }

    wide = sec.get("wide_box", 6.0)
    rel_tol = float(sec.get("integral_tolerance", 2e-2))
    n = int(sec.get("grid", 128))
    phi = ex.parse(sec.get("phi", "0.5*sin(x1) + 0.3*x1*x2 + 0.2*cos(x2)"), p.dim)
    amp = float(sec.get("amplitude", 0.5))
    q = _problem_on_box(cfg, [-wide] * p.dim, [wide] * p.dim)
    weak = [gc.weak_form_residual(tilted_density(q, phi, amp, m), q) for m in (n, 2 * n)]
    yano_box = float(sec.get("yano_box", 8.0))
    qy = _problem_on_box(cfg, [-yano_box] * p.dim, [yano_box] * p.dim)
    yano = [gc.yano_residual(phi, qy, qy.grid(m)) for m in (n, 2 * n)]
    report["weak_form"] = _refinement_entry(weak, rel_tol)
    report["yano"] = _refinement_entry(yano, rel_tol)

    _write_json(out / "verify_report.json", report)
    ok = battery.passed and report["weak_form"]["passed"] and report["yano"]["passed"]
    return EXIT_OK if ok else EXIT_CHECK


ROUNDOFF_FLOOR = 1e-11


def refinement_passes(coarse: float, fine: float, tol: float) -> bool:
    """Coarse residual within ``tol`` and reduced at least 3x by refinement,
    unless both already sit at the round-off floor."""
    if coarse > tol:
        return False
    if max(coarse, fine) <= ROUNDOFF_FLOOR:
        return True
    return fine * 3.0 <= coarse


def _refinement_entry(checks: list, tol: float) -> dict:
    c, f = checks
    return {
        "coarse": c.to_dict(),
        "fine": f.to_dict(),
        "tolerance": tol,
        "passed": refinement_passes(c.residual, f.residual, tol),
    }


def sample_moments(p: Problem, positions: np.ndarray, n_quad: int = 512) -> dict:
    """First and second moments of an ensemble against quadrature moments of pi."""
    g = p.grid(n_quad)
    x = g.points()
    w = np.broadcast_to(p.pi(x), g.shape)
    w = w / np.sum(w)
    d = p.dim
    rows = []
    names = [f"x{i + 1}" for i in range(d)]
    funcs = [(names[i], x[i], positions[:, i]) for i in range(d)]
    for i in range(d):
        for j in range(i, d):
            funcs.append((f"{names[i]}*{names[j]}", x[i] * x[j], positions[:, i] * positions[:, j]))
    N = positions.shape[0]
    for name, grid_f, samp in funcs:
        exact = float(np.sum(w * grid_f))
        mean = float(np.mean(samp))
        se = float(np.std(samp, ddof=1) / np.sqrt(N)) if N > 1 else float("nan")
        z = (mean - exact) / se if N > 1 and se > 0 else float("nan")
        rows.append({"moment": name, "ensemble": mean, "quadrature": exact, "stderr": se, "z": z})
    ok = all(abs(r["z"]) <= 3.0 for r in rows if np.isfinite(r["z"]))
    return {"particles": N, "moments": rows, "passed": ok}


def cmd_sample(cfg: dict, args) -> int:
    p = build_problem(cfg)
    out = _out_dir(cfg, args)
    sec = _section(cfg, "sample")
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    try:
        N = int(sec.get("N", 100000))
        T = float(sec.get("T", 10.0))
        dt = float(sec.get("dt", 0.0025))
        snaps = dyn.simulate_sde(p, N, T, dt, seed, save_every=sec.get("save_every"))
    except ValueError as err:
        raise ConfigError(f"[sample]: {err}") from None
    res = sample_moments(p, snaps[-1].positions, int(sec.get("quadrature_cells", 512)))
    res.update(seed=seed, T=T, dt=dt)
    _write_json(out / "moments.json", res)
    if sec.get("dump", False):
        with (out / "ensemble.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "particle"] + [f"x{i + 1}" for i in range(p.dim)])
            for e in snaps:
                for k, row in enumerate(e.positions):
                    w.writerow([format(e.time, ".17g"), k] + [format(float(v), ".17g") for v in row])
    return EXIT_OK if res["passed"] else EXIT_CHECK


COMMANDS = {"scan": cmd_scan, "evolve": cmd_evolve, "verify": cmd_verify, "sample": cmd_sample}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="infogamma", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="TOML run configuration")
    ap.add_argument("--out", help="output directory (overrides [output] dir)")
    ap.add_argument("--seed", type=int, help="random seed for sample/verify")
    ap.add_argument("--lambda", dest="lam", type=float, help="override the scanned rate")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (EvalError, InternalInconsistency, NonPositiveDensity) as err:
        print(f"evaluation error: {err}", file=sys.stderr)
        return EXIT_EVAL
    except (SolverError, NonConvergence) as err:
        print(f"solver error: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except InfoGammaError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
