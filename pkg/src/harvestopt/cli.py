"""Command-line entry point: simulate, optimize, grad-check, export.

All outputs are plain text (comma-separated tables, JSON parameter files)
written with repr-exact floats, so repeated runs with identical inputs and
seed produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fixtures as fixture_lib
from .hybridsim import SimulationError, Trace, simulate
from .ipa import TangentialCrossing, run_ipa
from .objective import CostBreakdown, sample_cost, sample_gradient
from .optimizer import OptimizerConfig, default_trajectories, optimize, segment_search
from .scenario import (
    Scenario,
    ScenarioFormatError,
    ScenarioValidationError,
    export_scenario,
    load_scenario,
)
from .trajectory import (
    DegenerateTrajectory,
    EllipseParams,
    FourierParams,
    SegmentedTrajectory,
    flatten_all,
    param_labels,
    with_flat_all,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SCENARIO = 2
EXIT_NUMERIC = 3


@dataclass
class CommandRequest:
    command: str
    scenario: str
    params: str | None = None
    out: str = "run"
    seed: int | None = None
    mode: str = "paper"
    replications: int = 1
    max_iters: int = 50
    overrides: list[str] = field(default_factory=list)
    fd_step: float = 1e-4
    segment_search: bool = False
    max_segments: int = 4
    run_dir: str | None = None  # export source
    dump_sensitivities: bool = False


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Parameter file format


def params_to_doc(trajs: list[SegmentedTrajectory]) -> dict:
    agents = []
    for traj in trajs:
        if traj.family == "ellipse":
            agents.append({"segments": [[p.cx, p.cy, p.a, p.b, p.phi] for p in traj.segments]})
        else:
            p = traj.segments[0]
            agents.append(
                {
                    "fx": p.fx,
                    "amps_x": p.amps_x.tolist(),
                    "amps_y": p.amps_y.tolist(),
                    "phases_x": p.phases_x.tolist(),
                    "phases_y": p.phases_y.tolist(),
                    "anchor": p.anchor.tolist(),
                }
            )
    return {"family": trajs[0].family, "agents": agents}


def trajs_from_doc(doc: dict) -> list[SegmentedTrajectory]:
    family = doc["family"]
    out = []
    for agent in doc["agents"]:
        if family == "ellipse":
            segs = tuple(EllipseParams(cx=s[0], cy=s[1], a=s[2], b=s[3], phi=s[4]) for s in agent["segments"])
            out.append(SegmentedTrajectory(family="ellipse", segments=segs))
        else:
            params = FourierParams(
                fx=float(agent["fx"]),
                amps_x=np.array(agent["amps_x"], dtype=float),
                amps_y=np.array(agent["amps_y"], dtype=float),
                phases_x=np.array(agent["phases_x"], dtype=float),
                phases_y=np.array(agent["phases_y"], dtype=float),
                anchor=np.array(agent["anchor"], dtype=float),
            )
            out.append(SegmentedTrajectory(family="fourier", segments=(params,)))
    return out


def write_params(path: Path, trajs) -> None:
    path.write_text(json.dumps(params_to_doc(trajs), indent=2) + "\n")


def read_params(path: Path) -> list[SegmentedTrajectory]:
    return trajs_from_doc(json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# Trace / events / cost / history files


def write_trace(path: Path, trace: Trace) -> None:
    m, n = trace.statics.n_targets, trace.statics.n_agents
    header = ["t"]
    for j in range(n):
        header += [f"a{j}x", f"a{j}y"]
    header += [f"X{i}" for i in range(m)]
    header += [f"Z{i}_{j}" for i in range(m) for j in range(n)]
    header += [f"Y{i}" for i in range(m)]

    def rows():
        for k in range(trace.n_samples):
            row = [trace.times[k]]
            for j in range(n):
                row += [trace.pos[k, j, 0], trace.pos[k, j, 1]]
            row += list(trace.X[k])
            row += list(trace.Z[k].reshape(-1))
            row += list(trace.Y[k])
            yield row

    _write_csv(path, header, rows())


def write_events(path: Path, trace: Trace) -> None:
    header = ["time", "kind", "i", "j", "endogenous", "cause", "handover_to"]
    rows = [
        [ev.time, ev.kind, ev.i, ev.j, ev.endogenous, ev.cause, "" if ev.handover_to is None else ev.handover_to]
        for ev in trace.events
    ]
    # kind/cause are plain strings; bypass float formatting for them
    lines = [",".join(header)]
    for ev in trace.events:
        lines.append(
            ",".join(
                [
                    _fmt(ev.time),
                    ev.kind,
                    str(ev.i),
                    str(ev.j),
                    "1" if ev.endogenous else "0",
                    ev.cause,
                    "" if ev.handover_to is None else str(ev.handover_to),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def write_sensitivities(path: Path, trace: Trace, dense: dict) -> None:
    """Per-sample flattened Jacobian rows aligned with the trace export."""
    m, n = trace.statics.n_targets, trace.statics.n_agents
    p = dense["Xp"].shape[-1]
    header = ["t"]
    header += [f"Xp{i}_{k}" for i in range(m) for k in range(p)]
    header += [f"Zp{i}_{j}_{k}" for i in range(m) for j in range(n) for k in range(p)]
    header += [f"Yp{i}_{k}" for i in range(m) for k in range(p)]

    def rows():
        for s_idx in range(trace.n_samples):
            row = [trace.times[s_idx]]
            row += list(dense["Xp"][s_idx].reshape(-1))
            row += list(dense["Zp"][s_idx].reshape(-1))
            row += list(dense["Yp"][s_idx].reshape(-1))
            yield row

    _write_csv(path, header, rows())


def write_cost(path: Path, cost: CostBreakdown) -> None:
    _write_csv(path, list(CostBreakdown.ROW_HEADER), [cost.row()])


def write_history(path: Path, history) -> None:
    header = ["iter", "J", "J1", "J2", "J3", "Jf", "penalty", "step", "grad_norm", "accepted"]
    rows = []
    for r in history.records:
        rows.append([r.iteration, *r.cost.row(), r.step, r.grad_norm, r.accepted])
    _write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# Gradient check


@dataclass
class GradCheckRow:
    index: int
    label: str
    ipa_paper: float
    ipa_augmented: float
    fd: float
    rel_err_paper: float
    rel_err_augmented: float
    flagged: bool  # event topology changed across the FD pair


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow]
    max_rel_err_paper: float
    max_rel_err_augmented: float
    n_flagged: int

    def summary(self) -> str:
        return (
            f"grad-check: {len(self.rows)} components, {self.n_flagged} flagged; "
            f"max rel err fixed-phase {self.max_rel_err_paper:.3e}, "
            f"augmented {self.max_rel_err_augmented:.3e}"
        )


def _event_signature(trace: Trace):
    return [(ev.kind, ev.i, ev.j) for ev in trace.events]


def grad_check(sc: Scenario, trajs: list[SegmentedTrajectory], h_fd: float = 1e-4, seed: int | None = None) -> GradCheckReport:
    """Central-difference comparison against the propagated gradients.

    Components whose +/- runs produce different event sequences are
    flagged (the finite difference straddles an event birth or death) and
    excluded from the reported maxima.
    """
    if seed is None:
        seed = sc.seed
    trace = simulate(sc, trajs, seed)
    grads = {}
    for mode in ("paper", "augmented"):
        grads[mode] = sample_gradient(trace, run_ipa(trace, mode=mode), sc)
    theta = flatten_all(trajs)
    labels = param_labels(trajs)
    fd = np.zeros_like(theta)
    flagged = np.zeros(len(theta), dtype=bool)
    for k in range(len(theta)):
        tp = theta.copy()
        tp[k] += h_fd
        tm = theta.copy()
        tm[k] -= h_fd
        tr_p = simulate(sc, with_flat_all(trajs, tp), seed)
        tr_m = simulate(sc, with_flat_all(trajs, tm), seed)
        fd[k] = (sample_cost(tr_p, sc).total - sample_cost(tr_m, sc).total) / (2.0 * h_fd)
        flagged[k] = _event_signature(tr_p) != _event_signature(tr_m)

    scale = max(float(np.max(np.abs(fd))), 1e-12)
    rows = []
    for k in range(len(theta)):
        denom = max(abs(fd[k]), 1e-3 * scale, 1e-12)
        rows.append(
            GradCheckRow(
                index=k,
                label=labels[k],
                ipa_paper=float(grads["paper"][k]),
                ipa_augmented=float(grads["augmented"][k]),
                fd=float(fd[k]),
                rel_err_paper=abs(grads["paper"][k] - fd[k]) / denom,
                rel_err_augmented=abs(grads["augmented"][k] - fd[k]) / denom,
                flagged=bool(flagged[k]),
            )
        )
    ok = [r for r in rows if not r.flagged]
    return GradCheckReport(
        rows=rows,
        max_rel_err_paper=max((r.rel_err_paper for r in ok), default=0.0),
        max_rel_err_augmented=max((r.rel_err_augmented for r in ok), default=0.0),
        n_flagged=int(flagged.sum()),
    )


def write_gradcheck(path: Path, report: GradCheckReport) -> None:
    header = ["index", "label", "ipa_paper", "ipa_augmented", "fd", "rel_err_paper", "rel_err_augmented", "mode_gap", "flag"]
    lines = [",".join(header)]
    for r in report.rows:
        lines.append(
            ",".join(
                [
                    str(r.index),
                    r.label,
                    _fmt(r.ipa_paper),
                    _fmt(r.ipa_augmented),
                    _fmt(r.fd),
                    _fmt(r.rel_err_paper),
                    _fmt(r.rel_err_augmented),
                    _fmt(r.ipa_augmented - r.ipa_paper),
                    "event-topology-change" if r.flagged else "",
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Scenario / params resolution


def resolve_scenario(spec: str, overrides: list[str]) -> Scenario:
    if spec.startswith("fixture:"):
        sc = fixture_lib.fixture(spec.split(":", 1)[1]).scenario
    else:
        sc = load_scenario(Path(spec).read_text())
    if overrides:
        doc = json.loads(export_scenario(sc))
        for item in overrides:
            if "=" not in item:
                raise ScenarioFormatError("--set", f"expected key=value, got {item!r}")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = doc
            parts = key.split(".")
            for part in parts[:-1]:
                if part not in node:
                    raise ScenarioFormatError(key, "unknown override path")
                node = node[part]
            if parts[-1] not in node:
                raise ScenarioFormatError(key, "unknown override key")
            node[parts[-1]] = value
        sc = load_scenario(json.dumps(doc))
    return sc


def resolve_params(req: CommandRequest, sc: Scenario) -> list[SegmentedTrajectory]:
    if req.params:
        if req.params.startswith("fixture:"):
            return fixture_lib.fixture(req.params.split(":", 1)[1]).trajectories
        return read_params(Path(req.params))
    return default_trajectories(sc)


# ---------------------------------------------------------------------------
# Commands


def run_command(req: CommandRequest) -> int:
    out = Path(req.out)
    out.mkdir(parents=True, exist_ok=True)

    if req.command == "export":
        src = Path(req.run_dir or req.scenario)
        sc2 = load_scenario((src / "scenario.json").read_text())
        (out / "scenario.json").write_text(export_scenario(sc2) + "\n")
        for name in ("params.json", "params_init.json", "params_final.json"):
            p = src / name
            if p.exists():
                write_params(out / name, read_params(p))
        print(f"export: canonical copies written to {out}")
        return EXIT_OK

    sc = resolve_scenario(req.scenario, req.overrides)
    seed = sc.seed if req.seed is None else req.seed

    if req.command == "simulate":
        trajs = resolve_params(req, sc)
        trace = simulate(sc, trajs, seed)
        cost = sample_cost(trace, sc)
        (out / "scenario.json").write_text(export_scenario(sc) + "\n")
        write_params(out / "params.json", trajs)
        write_trace(out / "trace.csv", trace)
        write_events(out / "events.csv", trace)
        write_cost(out / "cost.csv", cost)
        if req.dump_sensitivities:
            result = run_ipa(trace, mode=req.mode, record_dense=True)
            write_sensitivities(out / "sensitivities.csv", trace, result.dense)
        print(f"simulate: T={sc.horizon} events={len(trace.events)} J={cost.total:.6g} -> {out}")
        return EXIT_OK

    if req.command == "optimize":
        trajs = resolve_params(req, sc)
        cfg = OptimizerConfig(
            max_iters=req.max_iters,
            replications=req.replications,
            ipa_mode=req.mode,
            master_seed=seed,
        )
        (out / "scenario.json").write_text(export_scenario(sc) + "\n")
        write_params(out / "params_init.json", trajs)
        if req.segment_search and sc.family == "ellipse":
            result = segment_search(sc, lambda e: default_trajectories(sc, segments=e), cfg, max_segments=req.max_segments)
            history = result.best
            print(f"segment search: best E={result.best_segments} cap_hit={result.cap_hit}")
        else:
            history = optimize(sc, sc.family, trajs, cfg)
        write_history(out / "history.csv", history)
        write_params(out / "params_final.json", history.final)
        trace = simulate(sc, history.final, seed)
        write_trace(out / "trace.csv", trace)
        write_events(out / "events.csv", trace)
        write_cost(out / "cost.csv", sample_cost(trace, sc))
        print(
            f"optimize: {len(history.records)} iterations, stop={history.stop_reason}, "
            f"J={history.final_cost.total:.6g} -> {out}"
        )
        return EXIT_OK

    if req.command == "grad-check":
        trajs = resolve_params(req, sc)
        report = grad_check(sc, trajs, h_fd=req.fd_step, seed=seed)
        write_gradcheck(out / "gradcheck.csv", report)
        print(report.summary())
        return EXIT_OK

    raise ScenarioFormatError("command", f"unknown command {req.command!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harvestopt", description="Data-harvesting trajectory simulation and optimization")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", required=True, help="scenario config path or fixture:NAME")
        p.add_argument("--params", help="trajectory parameter file or fixture:NAME")
        p.add_argument("--out", default="run", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("simulate", help="simulate one sample path and write trace files")
    common(p)
    p.add_argument("--mode", choices=("paper", "augmented"), default="paper")
    p.add_argument("--dump-sensitivities", action="store_true", help="also write per-sample Jacobian rows")

    p = sub.add_parser("optimize", help="gradient-descent trajectory optimization")
    common(p)
    p.add_argument("--mode", choices=("paper", "augmented"), default="paper")
    p.add_argument("--replications", type=int, default=1)
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--segment-search", action="store_true")
    p.add_argument("--max-segments", type=int, default=4)

    p = sub.add_parser("grad-check", help="compare propagated gradients against central differences")
    common(p)
    p.add_argument("--fd-step", type=float, default=1e-4)

    p = sub.add_parser("export", help="re-serialize a stored run directory")
    p.add_argument("--run", dest="run_dir", required=True)
    p.add_argument("--out", default="run-export")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    req = CommandRequest(
        command=args.command,
        scenario=getattr(args, "scenario", ""),
        params=getattr(args, "params", None),
        out=args.out,
        seed=getattr(args, "seed", None),
        mode=getattr(args, "mode", "paper"),
        replications=getattr(args, "replications", 1),
        max_iters=getattr(args, "max_iters", 50),
        overrides=getattr(args, "overrides", []),
        fd_step=getattr(args, "fd_step", 1e-4),
        segment_search=getattr(args, "segment_search", False),
        max_segments=getattr(args, "max_segments", 4),
        run_dir=getattr(args, "run_dir", None),
        dump_sensitivities=getattr(args, "dump_sensitivities", False),
    )
    try:
        return run_command(req)
    except (ScenarioFormatError, ScenarioValidationError, KeyError, FileNotFoundError) as exc:
        print(f"error[scenario]: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except (DegenerateTrajectory, TangentialCrossing, SimulationError, FloatingPointError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
