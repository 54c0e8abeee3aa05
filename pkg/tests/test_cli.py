import json
import subprocess
import sys
from pathlib import Path

from directchain.cli import main

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def test_run_prints_metrics_and_writes_json(tmp_path, capsys):
    out = tmp_path / "m.json"
    trace = tmp_path / "t.log"
    rc = main(["run", str(SCENARIOS / "three_pods.scn"), "--metrics-out", str(out),
               "--trace-out", str(trace)])
    assert rc == 0
    got = kv(capsys.readouterr().out)
    assert got["converged"] == "True" and got["published.1"] == "3"
    assert json.loads(out.read_text())["published"] == {"1": 3}
    assert trace.read_text().strip()


def test_run_centralized_with_param(capsys):
    rc = main(["run", str(SCENARIOS / "three_pods.scn"), "--mode", "centralized",
               "--param", "call_latency=5"])
    assert rc == 0
    got = kv(capsys.readouterr().out)
    assert got["mode"] == "centralized" and got["params.call_latency"] == "5"


def test_run_rejects_unknown_param(tmp_path):
    try:
        main(["run", str(SCENARIOS / "three_pods.scn"), "--param", "colour=1"])
    except SystemExit as e:
        assert "colour" in str(e)
    else:
        raise AssertionError("expected SystemExit")


def test_compare_prints_both_modes_and_ratio(capsys):
    assert main(["compare", str(SCENARIOS / "three_pods.scn")]) == 0
    got = kv(capsys.readouterr().out)
    assert "direct.e2e_latency" in got and "centralized.e2e_latency" in got
    assert 0 < float(got["latency_ratio"]) < 1


def test_check_reports_verdict(capsys):
    assert main(["check", "--nodes", "1", "--cmds", "1,2", "--enable-faults"]) == 0
    got = kv(capsys.readouterr().out)
    assert got == {"states_visited": "9872", "invariant_result": "True", "convergence_result": "True"}


def test_check_bound_exit_code(capsys):
    assert main(["check", "--nodes", "2", "--cmds", "1,2", "--enable-faults", "--max-states", "50"]) == 2


def test_crossval_single_file(capsys):
    assert main(["crossval", str(SCENARIOS / "three_pods.scn")]) == 0
    assert "consistent" in capsys.readouterr().out


def test_crossval_inexpressible_file(capsys):
    assert main(["crossval", str(SCENARIOS / "anomaly1.scn")]) == 1
    assert "not expressible" in capsys.readouterr().out


def test_console_module_entry():
    res = subprocess.run([sys.executable, "-m", "directchain.cli", "check", "--nodes", "1", "--cmds", "1"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and "invariant_result=True" in res.stdout
