"""``strominger`` command line.

Subcommands: verify, linearize, residual, squareroot, solve, solve-coupled.
Exit codes: 0 pass, 1 suite failure, 2 usage or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import MODES, ConfigError, RunConfig, load_config
from .continuation import NewtonError, continue_in_alpha, make_manufactured
from .hermitian_geometry import HermitianMetric, HolVolForm, PositivityError, balanced_form, sqrt_positive_22
from .io import (
    SCHEMA_VERSION,
    ContainerError,
    dump_json,
    load_form,
    load_state,
    save_metric,
    save_state,
)
from .linearized_ops import (
    RangeError,
    a_block_report,
    assemble_dense,
    bochner_sides,
    coupled_background,
    flat_background,
    kahler_identity_residual,
    l2_symbol,
    synthetic_curvature,
)
from .spectral_forms import i_del_dbar, lambda_fault, random_field, random_form
from .strominger_system import SystemState, ellipticity_monitor, eval_F, rescale_solution
from .verify import run_battery

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _write_csv(path: Path, rows: list, columns: list):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["schema_version"] + columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"schema_version": SCHEMA_VERSION, **{c: _fmt(r.get(c)) for c in columns}})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _background(cfg: RunConfig, coupled: bool = False, lattice=None):
    lat = lattice or cfg.lattice()
    Om = HolVolForm(cfg.omega)
    if coupled:
        return coupled_background(lat, cfg.rank, Omega=Om, remove_constant=not cfg.weak_gauge)
    return flat_background(lat, cfg.rank, Omega=Om, remove_constant=not cfg.weak_gauge)


# -- subcommands ---------------------------------------------------------------------------

def cmd_verify(cfg: RunConfig, out: Path) -> int:
    with lambda_fault(cfg.fault_lambda):
        rows = run_battery(cfg.lattice(), cfg.rank, cfg.seed, cfg.tol)
    cols = ["id", "description", "measured", "tolerance", "status", "note"]
    _write_csv(out / "verify.csv", [r.as_dict() for r in rows], cols)
    dump_json(out / "verify.json", {"schema_version": SCHEMA_VERSION, "config": cfg.as_dict(),
                                    "rows": [r.as_dict() for r in rows]})
    for r in rows:
        m = "-" if r.measured is None else f"{r.measured:.3e}"
        print(f"{r.status.upper():4s}  {r.id:46s} {m:>10s}  tol {r.tolerance:.1e}  {r.note}")
    failed = [r.id for r in rows if r.status == "fail"]
    if failed:
        print("failing rows: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_linearize(cfg: RunConfig, out: Path) -> int:
    rng = np.random.default_rng(cfg.seed)
    lat = cfg.lattice()
    bg = _background(cfg)
    modes = [np.broadcast_to(m, lat.shape).ravel() for m in lat.mode_numbers()]
    s1 = np.broadcast_to(bg.symbol, lat.shape).ravel()
    s2 = np.broadcast_to(l2_symbol(bg), lat.shape).ravel()
    axes = ["k_x1", "k_y1", "k_x2", "k_y2", "k_x3", "k_y3"]
    # + 0.0 turns -0.0 into 0.0
    rows = [{**{a: int(m[i]) for a, m in zip(axes, modes)},
             "L1_symbol": float(s1[i]) + 0.0, "L2_symbol": float(s2[i]) + 0.0}
            for i in range(lat.npoints)]
    _write_csv(out / "symbols.csv", rows, axes + ["L1_symbol", "L2_symbol"])

    ident = []
    for p in range(1, 4):
        for q in range(4):
            r = kahler_identity_residual(random_form(lat, rng, p, q), bg.ghat)
            ident.append({"id": "linearized_ops.kahler_identity", "case": f"({p},{q})", "value": float(r),
                          "tolerance": cfg.tol})
    for k in range(3):
        h = bg.project_end(random_field(lat, rng, (cfg.rank, cfg.rank)))
        lhs, rhs = bochner_sides(bg, h)
        ident.append({"id": "linearized_ops.bochner", "case": f"sample {k}", "value": float(abs(lhs - rhs) / abs(rhs)),
                      "tolerance": cfg.tol})
    _write_csv(out / "identities.csv", ident, ["id", "case", "value", "tolerance"])

    small = _background(cfg, lattice=cfg.lattice(cfg.dense_n))
    Fhat = synthetic_curvature(small.lattice, cfg.rank, rng, cfg.fhat_scale)
    small = flat_background(small.lattice, cfg.rank, Omega=small.Omega, Fhat=Fhat, remove_constant=not cfg.weak_gauge)
    K, _, _ = assemble_dense(small)
    np.save(out / "dense_operator.npy", K)
    theta = small.project_theta(i_del_dbar(random_form(small.lattice, rng, 1, 1, real=True)))
    report = {"schema_version": SCHEMA_VERSION, "config": cfg.as_dict(),
              "dense": {"n": cfg.dense_n, "shape": list(K.shape), "condition_number": float(np.linalg.cond(K))},
              "a_block": {"id": "linearized_ops.a_block_factor", **a_block_report(small, theta)}}
    dump_json(out / "linearize.json", report)
    bad = [r for r in ident if not r["value"] <= r["tolerance"]]
    return EXIT_FAIL if bad else EXIT_OK


def cmd_residual(cfg: RunConfig, out: Path) -> int:
    lat, alpha, ranks, z = load_state(cfg.input)
    coupled = len(ranks) > 1
    c = RunConfig(mode="residual", n=lat.n, active=lat.active, rank=ranks[-1], input=cfg.input, omega=cfg.omega,
                  weak_gauge=cfg.weak_gauge)
    bg = _background(c, coupled=coupled, lattice=lat)
    state = SystemState(bg, alpha, z)
    norms = eval_F(state).norms
    report = {"schema_version": SCHEMA_VERSION, "id": "strominger_system.residual", "alpha_prime": alpha,
              **norms, "ellipticity": ellipticity_monitor(state),
              "class_factor": float(alpha ** -0.5 * bg.dil) if alpha > 0 else None}
    dump_json(out / "residual.json", report)
    return EXIT_OK


def cmd_squareroot(cfg: RunConfig, out: Path) -> int:
    psi = load_form(cfg.input)
    if (psi.p, psi.q) != (2, 2) or psi.fiber:
        raise ContainerError(f"{cfg.input}: offset 12: expected a scalar (2,2)-form, found ({psi.p},{psi.q})")
    Om = HolVolForm(cfg.omega)
    m = sqrt_positive_22(psi, Om)
    back = balanced_form(HermitianMetric(psi.lattice, m.g), Om)
    rt = float((back - psi).max_abs() / psi.max_abs())
    save_metric(out / "metric.strm", psi.lattice, m.g, {"omega": [cfg.omega.real, cfg.omega.imag]})
    dump_json(out / "squareroot.json", {
        "schema_version": SCHEMA_VERSION, "id": "hermitian_geometry.sqrt_round_trip",
        "round_trip_residual": rt, "min_eigenvalue": float(np.min(m.eigenvalues)),
        "hermiticity_defect": m.hermiticity_defect()})
    return EXIT_OK


def cmd_solve(cfg: RunConfig, out: Path, coupled: bool = False) -> int:
    rng = np.random.default_rng(cfg.seed)
    bg = _background(cfg, coupled=coupled)
    ccfg = cfg.continuation()
    problem = (make_manufactured(bg, cfg.amplitude, rng, cfg.alpha_target, cfg.profile)
               if cfg.manufactured else None)
    path = continue_in_alpha(bg, ccfg, problem)
    rows = [r.row() for r in path.records]
    cols = list(rows[0].keys())
    _write_csv(out / "path.csv", rows, cols)
    save_state(out / "final_state.strm", bg, path.alpha_reached, path.final)
    last = path.records[-1]
    report = {
        "schema_version": SCHEMA_VERSION,
        "id": "continuation.path",
        "config": cfg.as_dict(),
        "coupled": coupled,
        "completed": path.completed,
        "message": path.message,
        "warnings": path.warnings,
        "alpha_reached": path.alpha_reached,
        "steps": len(path.records) - 1,
        "max_newton_iterations": max(r.newton_iterations for r in path.records),
        "final_residual_l2": last.residual_l2,
        "recovery_error": last.recovery_error,
    }
    if path.alpha_reached > 0 and not cfg.manufactured:
        report["rescaling"] = rescale_solution(SystemState(bg, path.alpha_reached, path.final))
    dump_json(out / "report.json", report)
    return EXIT_OK if path.completed else EXIT_NUMERIC


# -- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strominger", description="Spectral 3-torus testbed for the Strominger system.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in MODES:
        s = sub.add_parser(name)
        s.add_argument("--config", help="run config with a [run] section")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int, default=1, help="BLAS thread count (wall-clock only)")
        if name in ("residual", "squareroot"):
            s.add_argument("--input", help="input field container")
        if name == "verify":
            s.add_argument("--fault-lambda", type=float, dest="fault_lambda",
                           help="scale the Lambda contraction (fault injection)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {"out": args.out, "seed": args.seed, "input": getattr(args, "input", None),
                 "fault_lambda": getattr(args, "fault_lambda", None)}
    try:
        cfg = load_config(args.config, args.command, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    handlers = {
        "verify": cmd_verify,
        "linearize": cmd_linearize,
        "residual": cmd_residual,
        "squareroot": cmd_squareroot,
        "solve": cmd_solve,
        "solve-coupled": lambda c, o: cmd_solve(c, o, coupled=True),
    }
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return handlers[args.command](cfg, out)
    except (ContainerError, ConfigError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PositivityError, NewtonError, RangeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
