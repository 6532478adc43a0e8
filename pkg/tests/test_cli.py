import json
from pathlib import Path

import numpy as np
import pytest

from harvestopt.cli import (
    CommandRequest,
    grad_check,
    main,
    params_to_doc,
    read_params,
    run_command,
    trajs_from_doc,
    write_params,
)
from harvestopt.fixtures import _single_target_scenario, desk_oracle_set, fixture
from harvestopt.optimizer import default_trajectories
from harvestopt.scenario import export_scenario
from harvestopt.trajectory import flatten_all


def desk(name):
    return [f for f in desk_oracle_set() if f.name == name][0]


def write_fixture_inputs(tmp_path, fx):
    sc_path = tmp_path / "scenario.json"
    sc_path.write_text(export_scenario(fx.scenario))
    params_path = tmp_path / "params.json"
    write_params(params_path, fx.trajectories)
    return sc_path, params_path


def test_params_roundtrip_both_families(tmp_path):
    fx = desk("desk-brush")
    p = tmp_path / "p.json"
    write_params(p, fx.trajectories)
    back = read_params(p)
    assert np.array_equal(flatten_all(back), flatten_all(fx.trajectories))

    four = default_trajectories(fx.scenario.with_overrides(family="fourier"), family="fourier", harmonics=2)
    doc = params_to_doc(four)
    back = trajs_from_doc(doc)
    assert np.array_equal(flatten_all(back), flatten_all(four))
    assert np.array_equal(back[0].segments[0].anchor, four[0].segments[0].anchor)


def test_simulate_writes_artifacts(tmp_path):
    fx = desk("desk-brush")
    sc_path, params_path = write_fixture_inputs(tmp_path, fx)
    out = tmp_path / "run"
    code = run_command(
        CommandRequest(command="simulate", scenario=str(sc_path), params=str(params_path), out=str(out), seed=5)
    )
    assert code == 0
    for name in ("scenario.json", "params.json", "trace.csv", "events.csv", "cost.csv"):
        assert (out / name).exists(), name
    trace_lines = (out / "trace.csv").read_text().splitlines()
    header = trace_lines[0].split(",")
    assert header[:3] == ["t", "a0x", "a0y"]
    assert "X0" in header and "Z0_0" in header and "Y0" in header
    # sample count: fixed grid plus event nodes
    n_rows = len(trace_lines) - 1
    expect = int(fx.scenario.horizon / fx.scenario.step) + 1
    events = len((out / "events.csv").read_text().splitlines()) - 1
    assert expect <= n_rows <= expect + 3 * events + 4
    assert events == 2


def test_cli_byte_identical_reruns(tmp_path):
    fx = desk("desk-collect-deliver")
    sc_path, params_path = write_fixture_inputs(tmp_path, fx)
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        code = main(
            [
                "simulate",
                "--scenario",
                str(sc_path),
                "--params",
                str(params_path),
                "--out",
                str(out),
                "--seed",
                "11",
            ]
        )
        assert code == 0
        outs.append(out)
    for name in ("scenario.json", "params.json", "trace.csv", "events.csv", "cost.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_fixture_scheme_and_overrides(tmp_path):
    out = tmp_path / "r"
    code = main(
        [
            "simulate",
            "--scenario",
            "fixture:one-target-crossing",
            "--out",
            str(out),
            "--set",
            "sim.horizon=5.0",
            "--set",
            "sim.step=0.005",
        ]
    )
    assert code == 0
    doc = json.loads((out / "scenario.json").read_text())
    assert doc["sim"]["horizon"] == 5.0
    assert doc["sim"]["step"] == 0.005


def test_unknown_override_key_is_scenario_error(tmp_path):
    code = main(
        ["simulate", "--scenario", "fixture:one-target-crossing", "--out", str(tmp_path / "x"), "--set", "sim.nope=1"]
    )
    assert code == 2


def test_invalid_scenario_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    fx = fixture("one-target-crossing")
    doc = json.loads(export_scenario(fx.scenario))
    doc["weights"]["alpha"] = 2.0
    bad.write_text(json.dumps(doc))
    assert main(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_numeric_failure_exit_code(tmp_path):
    # an all-zero-amplitude curve is stationary: degenerate from t = 0
    fx = desk("desk-fourier-miss")
    sc_path = tmp_path / "sc.json"
    sc_path.write_text(export_scenario(fx.scenario))
    params = tmp_path / "p.json"
    doc = params_to_doc(fx.trajectories)
    doc["agents"][0]["amps_x"] = [0.0, 0.0]
    doc["agents"][0]["amps_y"] = [0.0, 0.0]
    params.write_text(json.dumps(doc))
    code = main(["simulate", "--scenario", str(sc_path), "--params", str(params), "--out", str(tmp_path / "o")])
    assert code == 3


def test_optimize_zero_iters_history(tmp_path):
    fx = desk("desk-brush")
    sc_path, params_path = write_fixture_inputs(tmp_path, fx)
    out = tmp_path / "opt"
    code = main(
        [
            "optimize",
            "--scenario",
            str(sc_path),
            "--params",
            str(params_path),
            "--out",
            str(out),
            "--max-iters",
            "0",
        ]
    )
    assert code == 0
    lines = (out / "history.csv").read_text().splitlines()
    assert len(lines) == 2  # header + the initial evaluation
    assert (out / "params_final.json").exists()


def test_grad_check_report(tmp_path):
    fx = desk("desk-enter-hold")
    report = grad_check(fx.scenario, fx.trajectories, h_fd=1e-4, seed=3)
    assert len(report.rows) == 5
    assert report.max_rel_err_augmented <= 1e-2
    labels = [r.label for r in report.rows]
    assert labels[0] == "agent0.cx"
    out = tmp_path / "gc"
    code = main(
        [
            "grad-check",
            "--scenario",
            str(write_fixture_inputs(tmp_path, fx)[0]),
            "--params",
            str(tmp_path / "params.json"),
            "--out",
            str(out),
        ]
    )
    assert code == 0
    header = (out / "gradcheck.csv").read_text().splitlines()[0].split(",")
    assert "ipa_paper" in header and "ipa_augmented" in header and "fd" in header and "mode_gap" in header


def test_export_roundtrip(tmp_path):
    fx = desk("desk-brush")
    sc_path, params_path = write_fixture_inputs(tmp_path, fx)
    run_dir = tmp_path / "run"
    assert main(["simulate", "--scenario", str(sc_path), "--params", str(params_path), "--out", str(run_dir)]) == 0
    out = tmp_path / "exported"
    assert main(["export", "--run", str(run_dir), "--out", str(out)]) == 0
    assert (out / "scenario.json").read_bytes() == (run_dir / "scenario.json").read_bytes()
    assert (out / "params.json").read_bytes() == (run_dir / "params.json").read_bytes()


def test_optimize_command_byte_identical(tmp_path):
    fx = desk("desk-brush")
    sc_path, params_path = write_fixture_inputs(tmp_path, fx)
    outs = []
    for tag in ("oa", "ob"):
        out = tmp_path / tag
        code = main(
            [
                "optimize",
                "--scenario",
                str(sc_path),
                "--params",
                str(params_path),
                "--out",
                str(out),
                "--seed",
                "4",
                "--max-iters",
                "1",
            ]
        )
        assert code == 0
        outs.append(out)
    for name in ("history.csv", "params_final.json", "trace.csv", "cost.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_sensitivity_dump(tmp_path):
    fx = desk("desk-enter-hold")
    sc_path, params_path = write_fixture_inputs(tmp_path, fx)
    out = tmp_path / "sd"
    code = main(
        [
            "simulate",
            "--scenario",
            str(sc_path),
            "--params",
            str(params_path),
            "--out",
            str(out),
            "--mode",
            "augmented",
            "--dump-sensitivities",
        ]
    )
    assert code == 0
    lines = (out / "sensitivities.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[0] == "t" and "Xp0_0" in header and "Zp0_0_4" in header and "Yp0_2" in header
    assert len(lines) == len((out / "trace.csv").read_text().splitlines())
