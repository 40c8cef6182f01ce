"""Command line entry point: ``nlslab <command> [options]``.

Exit status is 0 only when every applicable invariant monitor passes.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (
    BUILTINS,
    Scenario,
    _jsonable,
    builtin,
    initial_data,
    load_scenario,
    reference_state,
    report_emit,
    run,
    tune_to_threshold,
)
from .fields import Grid3, write_snapshot, read_snapshot
from .ground_state import (
    GridGroundState,
    constants,
    elliptic_residual,
    solve_petviashvili,
    read_profile,
    solve_shooting,
    write_profile,
)
from .modulation import ModulationError, fit
from .diagnostics import delta as delta_fn
from .fields import h1_seminorm_sq, l2_norm_sq
from .potentials import PotentialError, potential_from_config, validate_class

log = logging.getLogger("nlslab")


def _scenarios(args) -> list[Scenario]:
    out = []
    for path in args.config or []:
        out.append(load_scenario(path))
    for name in getattr(args, "names", None) or []:
        out.append(builtin(name))
    if not out:
        out = [builtin(n) for n in BUILTINS]
    if args.seed is not None:
        out = [replace(s, seed=args.seed) for s in out]
    return out


def _dump(obj) -> None:
    print(json.dumps(_jsonable(obj), indent=2, sort_keys=True))


# ------------------------------------------------------------------ commands

def cmd_groundstate(args) -> int:
    cache = Path(args.cache) if args.cache else None
    if cache is not None and cache.exists():
        prof = read_profile(cache)
        log.info("profile read from %s", cache)
    else:
        prof = solve_shooting(tol=args.tol, r_max=args.rmax)
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            write_profile(cache, prof)
    c = constants(prof)
    res = float(np.abs(prof.residual()).max())
    out = {
        "Q0": prof.q0, "tail_A": prof.tail_A, "tail_mu": prof.tail_mu, "r_splice": prof.r_splice,
        "profile_residual": res, **c.as_dict(),
        "pohozaev_h1_over_l4": c.h1_sq / c.l4_4,
        "pohozaev_energy": 3 * c.energy / (0.5 * c.h1_sq),
    }
    ok = (abs(out["pohozaev_h1_over_l4"] / 0.75 - 1) < 1e-6 and abs(out["pohozaev_energy"] - 1) < 1e-6)
    if args.n:
        grid = Grid3(args.n, args.L)
        q = solve_petviashvili(grid)
        gs = GridGroundState(q, "petviashvili")
        q0 = float(q.values.real.max())
        out["petviashvili"] = {
            "n": args.n, "L": args.L, "Q0": q0, "l2_sq": gs.constants.l2_sq,
            "elliptic_residual": elliptic_residual(q),
            "rel_diff_Q0": abs(q0 / prof.q0 - 1), "rel_diff_l2_sq": abs(gs.constants.l2_sq / c.l2_sq - 1),
        }
        pv = out["petviashvili"]
        ok = ok and pv["elliptic_residual"] < 1e-7 and pv["rel_diff_Q0"] < 1e-5 and pv["rel_diff_l2_sq"] < 1e-5
    out["passed"] = ok
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        write_profile(d / "profile.bin", prof)
        (d / "groundstate.json").write_text(json.dumps(_jsonable(out), indent=2, sort_keys=True) + "\n")
    _dump(out)
    return 0 if ok else 1


def _run_one(item: tuple[Scenario, str | None, bool]) -> tuple[str, bool, str]:
    s, out, snapshot = item
    rep = run(s)
    if out:
        d = Path(out) / s.name
        report_emit(rep, d)
        if snapshot and rep.trajectory is not None and rep.trajectory.final is not None:
            write_snapshot(d / "final.snap", rep.trajectory.final, rep.summary["t_final"], s.name)
    m = rep.summary["monitors"]
    failed = [k for k, v in m.items() if v["applicable"] and not v["pass"]]
    line = (f"{s.name}: {'PASS' if rep.passed else 'FAIL'}  "
            f"verdict={rep.summary['scattering_proxy']['verdict']}  "
            f"mass_drift={rep.summary['conservation']['mass_drift_t1']:.2e}  "
            f"energy_drift={rep.summary['conservation']['energy_drift_t1']:.2e}  "
            f"min_delta={rep.summary['delta_record']['min']:.4g}"
            + (f"  failed={','.join(failed)}" if failed else ""))
    return s.name, rep.passed, line


def _run_many(scns: list[Scenario], out: str | None, jobs: int, snapshot: bool) -> int:
    items = [(s, out, snapshot) for s in scns]
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, items))
    else:
        results = [_run_one(i) for i in items]
    for _, _, line in results:
        print(line)
    return 0 if all(ok for _, ok, _ in results) else 1


def cmd_run(args) -> int:
    return _run_many(_scenarios(args), args.out, args.jobs, snapshot=False)


def cmd_evolve(args) -> int:
    scns = [replace(s, track_modulation=False) for s in _scenarios(args)]
    return _run_many(scns, args.out, args.jobs, snapshot=True)


def _read_toml(path: str) -> dict:
    if sys.version_info >= (3, 11):
        import tomllib
    else:  # pragma: no cover
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def cmd_validate_potential(args) -> int:
    cfg = _read_toml(args.config) if args.config else {}
    if "potential" in cfg:  # a scenario file
        pcfg = {k[len("potential_"):]: v for k, v in cfg.items() if k.startswith("potential_")}
        pcfg["kind"] = cfg["potential"]
        n, L = int(cfg.get("n", args.n)), float(cfg.get("L", args.L))
    else:
        pcfg, n, L = cfg, args.n, args.L
    p = potential_from_config(pcfg)
    try:
        rep = validate_class(p, Grid3(n, L), seed=args.seed or 0)
    except PotentialError as exc:
        _dump({"kind": p.kind.value, "passes": False, "error": str(exc)})
        return 1
    _dump(rep.as_dict())
    return 0 if rep.passes else 1


def cmd_fit_modulation(args) -> int:
    if args.snapshot:
        u, t, label = read_snapshot(args.snapshot)
        p = potential_from_config({})
        if args.config:
            s = load_scenario(args.config)
            p = s.potential_obj
        ref = GridGroundState.from_petviashvili(u.grid)
        consts = ref.constants
    elif args.config:
        s = load_scenario(args.config)
        if args.seed is not None:
            s = replace(s, seed=args.seed)
        s = replace(s, track_modulation=True)
        consts, ref = reference_state(s)
        u = initial_data(s, ref)
        p = s.potential_obj
        if s.tuning != "none":
            u = tune_to_threshold(u, p, consts, "product" if s.tuning == "subthreshold" else s.tuning,
                                  target_fraction=1.0 - s.margin if s.tuning == "subthreshold" else 1.0).field
        t, label = 0.0, s.name
    else:
        raise ValueError("fit-modulation needs --snapshot or --config")
    try:
        mf = fit(u, ref)
    except ModulationError as exc:
        _dump({"label": label, "t": t, "converged": False, "error": str(exc), "residual": exc.residual})
        return 1
    g_h1 = math.sqrt(l2_norm_sq(mf.g) + h1_seminorm_sq(mf.g))
    out = {
        "label": label, "t": t, "converged": True, "theta": mf.theta, "y": list(mf.y),
        "alpha": mf.alpha, "g_H1": g_h1, "delta": delta_fn(u, p, consts),
        "ortho_resid": mf.ortho_resid, "iterations": mf.iterations,
    }
    _dump(out)
    return 0


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nlslab", description="Threshold dynamics lab for the 3d cubic NLS.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_many=True):
        if config_many:
            p.add_argument("--config", action="append", help="scenario TOML (repeatable)")
        else:
            p.add_argument("--config", help="scenario or potential TOML")
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="scenarios to run concurrently")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    p = sub.add_parser("groundstate", help="solve for Q and print its constants")
    p.add_argument("--n", type=int, default=0, help="also run Petviashvili on an n^3 grid")
    p.add_argument("--L", type=float, default=12.0, help="half box length for --n")
    p.add_argument("--tol", type=float, default=1e-9, help="shooting bisection / splice tolerance")
    p.add_argument("--rmax", type=float, default=25.0, help="outer radius of the profile")
    p.add_argument("--cache", help="profile file: read if present, else solve and write it")
    common(p, config_many=False)
    p.set_defaults(func=cmd_groundstate)

    p = sub.add_parser("evolve", help="evolve scenarios, write diagnostics and the final field")
    p.add_argument("names", nargs="*", help=f"builtin scenarios ({', '.join(BUILTINS)})")
    common(p)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("run", help="run scenarios with diagnostics, modulation and reports")
    p.add_argument("names", nargs="*", help=f"builtin scenarios ({', '.join(BUILTINS)})")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate-potential", help="check the sign and integrability hypotheses")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--L", type=float, default=16.0)
    common(p, config_many=False)
    p.set_defaults(func=cmd_validate_potential)

    p = sub.add_parser("fit-modulation", help="fit theta, y, g to a snapshot or to scenario data")
    p.add_argument("--snapshot", help="field written by 'nlslab evolve'")
    common(p, config_many=False)
    p.set_defaults(func=cmd_fit_modulation)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"nlslab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
