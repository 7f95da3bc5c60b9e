"""Command-line entry point.

    python cli.py build-model --config exp.json --out out/
    python cli.py solve --out out/
    python cli.py simulate --mode analog --out out/ --record
    python cli.py sweep --config sweep.json
    python cli.py linkstats --snr-db 0 10 20
    python cli.py analyze-fsm --out out/

Failures print one JSON object on stderr and exit with 2 (3 when the solver
did not converge; its outputs are still written).
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

import artifacts
from config import OUTPUT_DIR, config_hash, load_config, setup_logging, watts_to_dbm
from dynamics import JointTransitionModel
from errors import ArtifactMismatch, LinkAdaptError, NotConverged
from harness import (
    RESULT_HEADER,
    TRACE_HEADER,
    LinkContext,
    assemble_context,
    build_geometry,
    convergence_rows,
    evaluate,
    heuristic_snr,
    linkstats_report,
    solve_policy,
    sweep,
    train_joint_model,
)
from policies import FsmActions, FsmState, baseline_step, fsm_closed_form, fsm_step, fsm_summary
from pomdp_model import ActionKind, TabularModel
from schemas import ExperimentConfig, Mode, PolicyName
from solver import PolicyArtifact, require_converged

logger = logging.getLogger("cli")


# ── Helpers ───────────────────────────────────────────────────────────────────
def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    elif args.config is None:
        updates["output_dir"] = OUTPUT_DIR
    if updates:
        cfg = cfg.model_copy(update=updates)
    if args.mode is not None:
        cfg.simulation.mode = Mode(args.mode)
        cfg.sweep.modes = [Mode(args.mode)]
    return cfg


def _progress(args) -> bool:
    return not args.quiet and sys.stderr.isatty()


def _context(cfg: ExperimentConfig, progress: bool) -> LinkContext:
    """Reuse the trained chain from the output directory when it matches the config."""
    geometry = build_geometry(cfg)
    digest = config_hash(cfg)
    try:
        data = artifacts.read_artifact(cfg.output_dir, artifacts.TRANSITIONS, digest)
        joint = JointTransitionModel.from_dict(data["model"])
        logger.info("loaded transition model from %s", cfg.output_dir)
    except ArtifactMismatch as exc:
        logger.info("%s; training a new transition model", exc.message)
        joint = train_joint_model(cfg, geometry, np.random.default_rng(cfg.seed), progress)
    return assemble_context(cfg, geometry, joint)


def _record(args, kind: str, cfg: ExperimentConfig, rows: List[dict], status: str = "ok") -> None:
    if not args.record:
        return
    from database import init_registry, session_scope
    import models

    init_registry()
    with session_scope() as db:
        run = models.record_run(db, kind, cfg, config_hash(cfg), rows, status)
        logger.info("recorded run %d", run.id)


def _emit(payload) -> None:
    print(artifacts.dumps(payload), end="")


# ── Commands ──────────────────────────────────────────────────────────────────
def cmd_build_model(args) -> int:
    cfg = _load(args)
    progress = _progress(args)
    geometry = build_geometry(cfg)
    joint = train_joint_model(cfg, geometry, np.random.default_rng(cfg.seed), progress)
    ctx = assemble_context(cfg, geometry, joint)
    digest = config_hash(cfg)
    out = cfg.output_dir
    artifacts.write_artifact(out, artifacts.CALIBRATION, {
        "calibrations": [c.to_dict(geometry.codebook) for c in geometry.calibrations],
        "grid_spacing": geometry.table.grid.spacing,
        "sbpi_table": geometry.table.table.tolist(),
    }, digest)
    artifacts.write_artifact(out, artifacts.TRANSITIONS, {
        "model": joint.to_dict(),
        "expected_duration": ctx.duration,
    }, digest)
    artifacts.write_artifact(out, artifacts.LINK_MODEL, ctx.model.export(), digest)
    _emit({"n_states": joint.n_states, "n_pairs": joint.n_pairs,
           "actions": [len(a) for a in ctx.model.actions], "expected_duration": ctx.duration})
    return 0


def cmd_solve(args) -> int:
    cfg = _load(args)
    progress = _progress(args)
    digest = config_hash(cfg)
    try:
        data = artifacts.read_artifact(cfg.output_dir, artifacts.LINK_MODEL, digest)
        model = TabularModel.from_dict(data)
        initial = int(data["metadata"]["initial_state"])
        duration = float(data["metadata"]["expected_duration"])
    except ArtifactMismatch as exc:
        logger.info("%s; assembling the link model", exc.message)
        ctx = _context(cfg, progress)
        model, initial, duration = ctx.model, ctx.initial_state, ctx.duration

    artifact = solve_policy(model, cfg, initial, duration, progress=progress)
    payload = artifact.to_dict()
    payload["expected_duration"] = duration
    artifacts.write_artifact(cfg.output_dir, artifacts.POLICY, payload, digest)
    rows = convergence_rows(artifact, duration)
    artifacts.write_csv(Path(cfg.output_dir) / "convergence.csv", artifacts.CONVERGENCE_HEADER, rows)
    status = "ok" if artifact.converged else "not_converged"
    _record(args, "solve", cfg, [], status)
    last = rows[-1] if rows else {}
    _emit({"iterations": artifact.iterations, "converged": artifact.converged,
           "lambda_bits_per_joule": artifact.physical_lambda,
           "spectral_efficiency": last.get("spectral_efficiency"), "power_dbm": last.get("power_dbm")})
    require_converged(artifact)
    return 0


def _load_policy(cfg: ExperimentConfig) -> PolicyArtifact:
    data = artifacts.read_artifact(cfg.output_dir, artifacts.POLICY, config_hash(cfg))
    artifact = PolicyArtifact.from_dict(data)
    if not artifact.converged:
        logger.warning("using a policy that did not converge")
    return artifact


def cmd_simulate(args) -> int:
    cfg = _load(args)
    progress = _progress(args)
    ctx = _context(cfg, progress)
    sim = cfg.simulation
    artifact = _load_policy(cfg) if PolicyName.cpbvi in sim.policies else None
    out = Path(cfg.output_dir)
    rows = []
    for name in sim.policies:
        report, traces = evaluate(name, ctx, sim.mode, sim.episodes, cfg.seed, artifact,
                                  sim.workers, sim.trace_episodes, progress)
        rows.append(report.as_row())
        if traces:
            trace_rows = [dict(r, episode=i) for i, t in enumerate(traces) for r in t.rows]
            artifacts.write_csv(out / f"trace_{PolicyName(name).value}.csv", ["episode"] + TRACE_HEADER, trace_rows)
    artifacts.write_csv(out / "results.csv", RESULT_HEADER, rows)
    _record(args, "simulate", cfg, rows)
    _emit({"mode": Mode(sim.mode).value, "results": rows})
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    progress = _progress(args)
    ctx = _context(cfg, progress)
    rows = sweep(cfg, ctx.geometry, ctx.joint, progress)
    out = Path(cfg.output_dir)
    header = list(RESULT_HEADER)
    if cfg.sweep.variable.value == "scenario":
        header += ["users", "mean_speed"]
    artifacts.write_csv(out / "sweep.csv", header, rows)
    artifacts.write_figures(out, cfg.sweep.variable.value, rows)
    _record(args, "sweep", cfg, rows)
    failed = sum(1 for r in rows if r["status"] != "ok")
    _emit({"rows": len(rows), "failed": failed})
    return 0


def cmd_linkstats(args) -> int:
    cfg = _load(args)
    report = linkstats_report(cfg, args.bs, args.snr_db, args.bt_sizes, args.rho_db)
    artifacts.write_artifact(cfg.output_dir, artifacts.LINKSTATS, report, config_hash(cfg))
    _emit(report)
    return 0


def cmd_analyze_fsm(args) -> int:
    cfg = _load(args)
    ctx = _context(cfg, _progress(args))
    fsm = FsmActions(tuple(tuple(s) for s in ctx.sbpi_sets), heuristic_snr(cfg),
                     cfg.heuristics.dt_duration, cfg.link.ho_duration)
    bs = ctx.initial_bs
    duration = ctx.duration
    bandwidth = cfg.channel.bandwidth
    document = {"initial_state": ctx.initial_state, "initial_bs": bs, "expected_duration": duration}
    for name, step in (("fsm", fsm_step), ("baseline", baseline_step)):
        analysis = fsm_closed_form(ctx.model, fsm, step)
        start = FsmState(ActionKind.BT, bs)
        per_state = []
        for u in range(ctx.joint.n_states):
            pair, b0, b1 = ctx.joint.decode(u)
            reward, cost = analysis.totals(u, start)
            per_state.append({"u": u, "pair": list(pair), "unblocked": [b0, b1],
                              "reward_bits": reward, "energy_j": cost})
        summary = fsm_summary(analysis, ctx.initial_state, bs, duration, bandwidth)
        summary["power_dbm"] = watts_to_dbm(summary["power_w"])
        document[name] = {"summary": summary, "per_state": per_state}
    artifacts.write_artifact(cfg.output_dir, artifacts.FSM_ANALYSIS, document, config_hash(cfg))
    _emit({name: document[name]["summary"] for name in ("fsm", "baseline")})
    return 0


COMMANDS = {
    "build-model": cmd_build_model,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "linkstats": cmd_linkstats,
    "analyze-fsm": cmd_analyze_fsm,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmwave-link", description="mm-wave vehicular BT/DT/HO link adaptation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON file (defaults reproduce the reference scenario)")
    common.add_argument("--seed", type=int, help="master RNG seed")
    common.add_argument("--mode", choices=[m.value for m in Mode], help="simulation fidelity")
    common.add_argument("--out", help="output directory")
    common.add_argument("--record", action="store_true", help="store the run in the registry database")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    common.add_argument("--quiet", action="store_true", help="disable progress bars")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, parents=[common])
        if name == "linkstats":
            cmd.add_argument("--bs", type=int, default=0, choices=[0, 1])
            cmd.add_argument("--snr-db", type=float, nargs="+")
            cmd.add_argument("--bt-sizes", type=int, nargs="+", default=[1, 2, 4, 8])
            cmd.add_argument("--rho-db", type=float)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except NotConverged as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return 3
    except LinkAdaptError as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return 2
    except ValueError as exc:
        print(json.dumps({"error": "INVALID_ARGUMENT", "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
