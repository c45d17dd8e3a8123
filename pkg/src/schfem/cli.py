"""Command line interface: run | mc | det | converge | eig-trace."""

from __future__ import annotations

import argparse
import os
import pickle
import sys

import numpy as np

from . import eigenvalue, fem, harness
from .errors import InputError
from .mesh import Mesh, rectangle


def _add_common(parser):
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--realizations", type=int, help="ensemble size")
    parser.add_argument("--eps", type=float)
    parser.add_argument("--sigma", type=float)
    parser.add_argument("--T", type=float, dest="T")
    parser.add_argument("--tau", type=float)
    parser.add_argument("--h-noise", type=float, dest="h_noise")
    parser.add_argument("--h-min", type=float, dest="h_min")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--eig-stride", type=int, dest="eig_stride")
    parser.add_argument("--mode", choices=["stochastic", "deterministic",
                                           "linear-only"])
    parser.add_argument("--save-trajectory", action="store_true", default=None,
                        dest="save_trajectory")


def _config_from_args(args, forced=None):
    overrides = {}
    for key in ("seed", "realizations", "eps", "sigma", "T", "tau", "h_noise",
                "h_min", "workers", "eig_stride", "mode", "save_trajectory"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.out is not None:
        overrides["out_dir"] = args.out
    overrides.update(forced or {})
    if args.config:
        return harness.load_config(args.config, overrides)
    return harness.RunConfig(**overrides)


def _cmd_run(args):
    cfg = _config_from_args(args)
    out = cfg.resolved_out_dir()
    os.makedirs(out, exist_ok=True)
    resume = harness.load_checkpoint(args.resume) if args.resume else None
    trace = harness.run_realization(cfg, args.index, resume=resume, out_dir=out)
    status = "failed" if trace.failed else "ok"
    print(f"realization {args.index}: {status}, {len(trace.rows) - 1} steps, "
          f"peak time {trace.peak_time:.6g}")
    return 1 if trace.failed else 0


def _cmd_mc(args):
    cfg = _config_from_args(args)
    summary = harness.monte_carlo(cfg)
    print(f"{len(summary.seeds)} realizations, {len(summary.failures)} failed; "
          f"histogram total {int(summary.hist_counts.sum())}")
    return 0


def _cmd_det(args):
    cfg = _config_from_args(args, forced={"mode": "deterministic", "sigma": 0.0})
    out = cfg.resolved_out_dir()
    os.makedirs(out, exist_ok=True)
    trace = harness.run_realization(cfg, 0, out_dir=out)
    print(f"deterministic run: peak time {trace.peak_time:.6g}, "
          f"energy violations {trace.energy_violations}")
    return 1 if trace.failed else 0


def _cmd_converge(args):
    cfg = _config_from_args(args)
    rungs = [int(r) for r in args.rungs.split(",")] if args.rungs else None
    if args.ladder == "tau":
        rungs = rungs or [64, 128, 256, 512]
        table = harness.convergence_study(cfg, "tau", rungs, m_paths=args.paths)
    else:
        rungs = rungs or [3, 5, 7, 9]
        table = harness.convergence_study(cfg, "h", rungs, m_paths=args.paths)
    print(f"{table.kind}-ladder fitted order: {table.fitted_order:.3f}")
    for v, e in zip(table.values, table.errors):
        print(f"  {table.kind} = {v:.6g}   squared H^-1 error = {e:.6e}")
    return 0


def _cmd_eig_trace(args):
    cfg = _config_from_args(args)
    with open(args.trajectory, "rb") as fh:
        payload = pickle.load(fh)
    saved_cfg = harness.RunConfig(**payload["config"])
    x0, x1, y0, y1 = saved_cfg.domain
    nx = int(round((x1 - x0) / saved_cfg.h_noise))
    ny = int(round((y1 - y0) / saved_cfg.h_noise))
    macro = rectangle(saved_cfg.domain, nx, ny).macro
    out = cfg.resolved_out_dir()
    os.makedirs(out, exist_ok=True)
    rows = []
    for k, level in enumerate(payload["trajectory"]):
        if k % cfg.eig_stride and k != len(payload["trajectory"]) - 1:
            continue
        mesh = Mesh(macro, level["leaves"])
        u = fem.fe_function(mesh, level["u"])
        res = eigenvalue.principal_eigenvalue(u, saved_cfg.eps, mesh)
        rows.append((level["t"], res.lam))
    path = os.path.join(out, "lambda.csv")
    with open(path, "w") as fh:
        fh.write("t,lambda\n")
        for t, lam in rows:
            fh.write(f"{t!r},{lam!r}\n")
    times = np.array([r[0] for r in rows])
    lams = np.array([r[1] for r in rows])
    print(f"wrote {path}; peak at t = {eigenvalue.peak_time(times, lams):.6g}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="schfem",
        description="Stochastic Cahn-Hilliard adaptive FEM simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="single realization")
    _add_common(p_run)
    p_run.add_argument("--index", type=int, default=0, help="realization index")
    p_run.add_argument("--resume", help="checkpoint file to resume from")
    p_run.set_defaults(func=_cmd_run)

    p_mc = sub.add_parser("mc", help="Monte Carlo ensemble")
    _add_common(p_mc)
    p_mc.set_defaults(func=_cmd_mc)

    p_det = sub.add_parser("det", help="deterministic run (sigma = 0)")
    _add_common(p_det)
    p_det.set_defaults(func=_cmd_det)

    p_conv = sub.add_parser("converge", help="linear scheme rate study")
    _add_common(p_conv)
    p_conv.add_argument("--ladder", choices=["tau", "h"], default="tau")
    p_conv.add_argument("--rungs", help="comma-separated ladder values")
    p_conv.add_argument("--paths", type=int, default=32)
    p_conv.set_defaults(func=_cmd_converge)

    p_eig = sub.add_parser("eig-trace", help="eigenvalue trace of a stored "
                                             "trajectory")
    _add_common(p_eig)
    p_eig.add_argument("trajectory", help="trajectory pickle from a run with "
                                          "save_trajectory")
    p_eig.set_defaults(func=_cmd_eig_trace)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
