"""Command line interface: ``dercoord validate | offline | online | analyze``.

Exit codes: 0 success, 1 a bound check failed, 2 invalid input or usage,
3 infeasible problem, 4 no convergence, 5 any other library error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .analysis import (
    AnalysisConstants,
    BoundReport,
    estimate_trace_constants,
    online_asymptote,
    sigma_c_population,
    sigma_g_population,
    stepsize_limit,
)
from .coordinator import run_offline
from .errors import DercoordError, StepsizeError
from .online import SUMMARY_FIELDS
from .scenario import RunManifest, fmt, load_scenario, read_columns, write_columns

log = logging.getLogger("dercoord")


def _overrides(args) -> dict:
    keys = ("seed", "epsilon", "phi", "window", "horizon", "tick_seconds", "ticks_per_slot")
    out = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "strict_stepsize", False):
        out["strict"] = True
    return {k: v for k, v in out.items() if v is not None}


def _header(scn, mode, extra=None) -> dict:
    h = {"format": "dercoord-columns-1", "scenario": scn.name, "scenario_sha256": scn.digest, "mode": mode,
         "seed": scn.seed, "version": __version__}
    h.update(extra or {})
    return h


def _manifest(args, scn, mode, outputs, extra=None) -> RunManifest:
    config = {"overrides": _overrides(args), "epsilon": scn.solver.epsilon, "phi": scn.solver.phi,
              "window": scn.online.window, "ticks_per_slot": scn.ticks_per_slot,
              "tick_seconds": scn.timeline.tick_seconds, "horizon": scn.horizon}
    config.update(extra or {})
    return RunManifest(args.scenario, scn.digest, mode, scn.seed, config, outputs=sorted(outputs))


def cmd_validate(args) -> int:
    scn = load_scenario(args.scenario, _overrides(args))
    c = scn.counts()
    print(f"{scn.name}: {scn.feeder.node_count} nodes, {c['pv']} PV, {c['hvac']} A/C, {c['battery']} batteries")
    print(f"timeline: {scn.timeline.ticks} ticks of {fmt(scn.timeline.tick_seconds)} s; horizon {scn.horizon}; "
          f"window {scn.online.window} x {scn.ticks_per_slot} ticks")
    print(f"sha256 {scn.digest}")
    return 0


def cmd_offline(args) -> int:
    scn = load_scenario(args.scenario, _overrides(args))
    prob = scn.window_problem(args.tick)
    res = run_offline(prob, scn.solver, seed=scn.seed, randomize=not args.no_randomize, log_level="full")
    os.makedirs(args.out, exist_ok=True)
    S, M = prob.slots, prob.rows
    names = ["iter", "step_norm", "g_max"] + [f"mu:{s}:{r}" for s in range(S) for r in range(M)]
    mus = res.log["mu"].reshape(len(res.log["mu"]), -1)
    prev = np.vstack([np.zeros(S * M), mus[:-1]])
    steps = np.sqrt(np.sum((mus - prev) ** 2, axis=1))
    gmax = res.log["g"].reshape(len(mus), -1).max(axis=1)
    rows = ([k + 1, steps[k], gmax[k]] + list(mus[k]) for k in range(len(mus)))
    head = _header(scn, "offline", {"tick": args.tick, "iterations": res.iterations, "converged": res.converged})
    write_columns(os.path.join(args.out, "iterates.csv"), head, names, rows)
    dev_names = [d.name for d in prob.population.devices]
    write_columns(
        os.path.join(args.out, "solution.csv"), head, ["slot"] + [f"p:{n}" for n in dev_names] + [f"q:{n}" for n in dev_names],
        ([s] + list(res.relaxed_p[:, s]) + list(res.relaxed_q[:, s]) for s in range(S)),
    )
    write_columns(
        os.path.join(args.out, "dual.csv"), head, ["slot", "row", "mu"],
        ([s, r, res.dual.mu[s, r]] for s in range(S) for r in range(M)),
    )
    outs = ["iterates.csv", "solution.csv", "dual.csv"]
    _manifest(args, scn, "offline", outs, {"tick": args.tick}).write(os.path.join(args.out, "manifest.json"))
    mu_norm = float(np.sqrt(np.sum(res.dual.mu**2)))
    print(f"offline: {res.iterations} iterations, converged={res.converged}, |mu*|={fmt(mu_norm)}")
    if not res.converged:
        print("dual iterates did not reach the stopping tolerance", file=sys.stderr)
        return 4
    return 0


def cmd_online(args) -> int:
    scn = load_scenario(args.scenario, _overrides(args))
    over = {}
    if args.reference:
        over["reference"] = True
    if args.record_every is not None:
        over["record_every"] = args.record_every
    eng = scn.engine(**over)
    ticks = scn.horizon
    for t in range(ticks):
        eng.step()
        if args.progress and t % 3600 == 0:
            log.info("tick %d / %d", t, ticks)
    tr = eng.trace
    os.makedirs(args.out, exist_ok=True)
    head = _header(scn, "online", {"ticks": ticks, "reference": eng.cfg.reference})
    outs = write_trace(args.out, head, eng)
    extra = {"reference": eng.cfg.reference, "record_every": eng.cfg.record_every}
    _manifest(args, scn, "online", outs, extra).write(os.path.join(args.out, "manifest.json"))
    a = tr.summary_array()
    warm = int(round(300 / scn.timeline.tick_seconds))
    tail = a[warm:, 1] if a.shape[0] > warm else a[:, 1]
    print(f"online: {ticks} ticks, max voltage {fmt(float(a[:, 1].max()))}, after warm-up {fmt(float(tail.max()))}, "
          f"guard re-picks {tr.guard_overrides}")
    return 0


def write_trace(out, head, eng) -> list:
    """Write the trace of an engine run as columnar files; returns the file names."""
    tr = eng.trace
    pop = eng.pop
    N = eng.model.node_count
    outs = ["summary.csv"]
    write_columns(os.path.join(out, "summary.csv"), head, list(SUMMARY_FIELDS), tr.summary)
    snap = tr.snapshots
    ticks = snap["tick"]
    tables = {
        "voltages.csv": ([f"v:{i}" for i in range(1, N + 1)], snap["v"]),
        "signals.csv": ([f"alpha:{i}" for i in range(1, N + 1)], snap["alpha0"]),
        "power.csv": ([f"p:{n}" for n in pop.names], snap["p_applied"]),
        "states.csv": ([f"x:{pop.names[i]}" for i in pop.chain_rows], snap["states"]),
    }
    for fname, (cols, vals) in tables.items():
        write_columns(os.path.join(out, fname), head, ["tick"] + cols, ([t] + list(v) for t, v in zip(ticks, vals)))
        outs.append(fname)
    if eng.cfg.reference:
        ref = tr.reference_arrays()
        S, M = eng.S, eng.M
        cols = ["tick", "var_g"]
        blocks = []
        for key in ("mu", "mu_star", "grad", "grad_star"):
            cols += [f"{key}:{s}:{r}" for s in range(S) for r in range(M)]
            blocks.append(ref[key].reshape(len(ref["tick"]), -1))
        for key in ("g_meas", "g_pred"):
            cols += [f"{key}:{r}" for r in range(M)]
            blocks.append(ref[key].reshape(len(ref["tick"]), -1))
        data = np.hstack([ref["tick"][:, None], ref["var_g"][:, None]] + blocks)
        write_columns(os.path.join(out, "reference.csv"), head, cols, data)
        outs.append("reference.csv")
    return outs


def load_reference(path):
    """Read reference.csv back into the arrays consumed by estimate_trace_constants."""
    header, names, data = read_columns(path)
    out = {"tick": data[:, 0], "var_g": data[:, 1]}
    for key in ("mu", "mu_star", "grad", "grad_star", "g_meas", "g_pred"):
        idx = [i for i, n in enumerate(names) if n.split(":")[0] == key]
        out[key] = data[:, idx]
    return header, out


def cmd_analyze(args) -> int:
    man = RunManifest.read(os.path.join(args.run, "manifest.json"))
    ref_path = os.path.join(args.run, "reference.csv")
    if not os.path.exists(ref_path):
        raise DercoordError("analyze needs a trace recorded with --reference")
    scn = load_scenario(man.scenario, man.config.get("overrides", {}))
    _, ref = load_reference(ref_path)
    start = len(ref["tick"]) // 2 if args.start is None else args.start
    shift = scn.online.window + 1 if scn.ticks_per_slot == 1 else None
    tc = estimate_trace_constants(ref, start, shift_slots=shift)
    prob = scn.window_problem(0)
    sc = sigma_c_population(prob.population, prob.slots)
    sg = sigma_g_population(scn.spec, scn.model, prob.population, prob.slots)
    L = sg**2 / sc + scn.solver.phi
    sh = tc.sigma_h if np.isfinite(tc.sigma_h) else L
    sh = min(sh, L)
    consts = AnalysisConstants(sc, sg, max(sh, 0.0), scn.solver.phi, tc.Delta, tc.rho, tc.e)
    eps = scn.solver.epsilon
    err = np.sum((ref["mu"] - ref["mu_star"]) ** 2, axis=1)[start:]
    measured = float(err.mean())
    try:
        bound = online_asymptote(consts, eps)
    except StepsizeError:
        bound = None
    report = BoundReport(
        stepsize_limit(consts) if consts.sigma_h > 0 else 0.0, eps, online_asymptote=bound,
        measured_online=measured, constants=dict(vars(tc), L=L, sigma_c=sc, sigma_g=sg, sigma_h_used=sh),
    )
    if bound is None:
        report.passes["online"] = measured == 0.0
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "bounds.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")
    for name, ok in sorted(report.passes.items()):
        print(f"{name}: {'pass' if ok else 'FAIL'}")
    print(f"e={fmt(tc.e)} rho={fmt(tc.rho)} Delta={fmt(tc.Delta)} sigma_h={fmt(sh)} L={fmt(L)}")
    print(f"measured mean |mu-mu*|^2 = {fmt(measured)}, bound = {fmt(bound) if bound is not None else 'n/a'}")
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dercoord", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"dercoord {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("scenario", help="scenario.json path or bundled name (tutorial, four_node, ieee37)")
        p.add_argument("--seed", type=int)
        p.add_argument("--epsilon", type=float, help="dual stepsize")
        p.add_argument("--phi", type=float, help="dual regularization")
        p.add_argument("--window", type=int, help="look-ahead slots beyond the current one")
        p.add_argument("--horizon", type=int, help="ticks to simulate")
        p.add_argument("--tick-seconds", dest="tick_seconds", type=float, help="tick duration")
        p.add_argument("--ticks-per-slot", dest="ticks_per_slot", type=int, help="ticks per prediction slot")
        p.add_argument("--strict-stepsize", action="store_true", help="reject an inadmissible stepsize")

    p = sub.add_parser("validate", help="load and check a scenario")
    scenario_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("offline", help="solve one window to convergence")
    scenario_args(p)
    p.add_argument("--tick", type=int, default=0, help="window start tick")
    p.add_argument("--no-randomize", action="store_true", help="use relaxed setpoints in g")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_offline)

    p = sub.add_parser("online", help="run the online engine over the horizon")
    scenario_args(p)
    p.add_argument("--reference", action="store_true", help="annotate each tick with the offline optimum")
    p.add_argument("--record-every", dest="record_every", type=int)
    p.add_argument("--progress", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_online)

    p = sub.add_parser("analyze", help="check tracking bounds on a reference-annotated online run")
    p.add_argument("run", help="output directory of an online run")
    p.add_argument("--start", type=int, help="first reference record used (default: second half)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "progress", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DercoordError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
