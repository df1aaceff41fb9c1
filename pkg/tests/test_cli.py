import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from funnelmpc.cli import main, resolve_config
from funnelmpc.config import load, parse
from funnelmpc.experiment import compare, compute_bound, output_dir, run_experiment
from funnelmpc.ode import SimulationTrace

FC = """
[model]
name = scalar_integrator
x0 = 0.5

[funnel]
kind = exponential
a = 1.0
b = 1.0
c = 0.2

[reference]
kind = cosine
amplitude = 0.5
frequency = 2.0

[controller]
kind = funnel_controller

[horizon]
sim_end = 2.0
"""

MPC = FC.replace("kind = funnel_controller", "kind = fmpc") + """
T = 0.4
delta = 0.1
control_step = 0.05

[cost]
lambda_u = 0.05

[bound]
M = 5.0

[integrator]
substeps_per_interval = 5
"""

# no input bounded by 1 keeps y' = eta + u inside the unit funnel when eta = 3
INFEASIBLE = """
[model]
name = counterexample
x0 = 0.0, 3.0

[funnel]
kind = constant
radius = 1.0

[reference]
kind = constant
value = 0.0

[controller]
kind = fmpc

[horizon]
sim_end = 1.0
T = 1.0
delta = 0.2
control_step = 0.2

[bound]
M = 1.0
"""


@pytest.fixture
def write(tmp_path):
    def _write(name, text):
        path = tmp_path / f"{name}.ini"
        path.write_text(text)
        return str(path)
    return _write


def test_exit_status_feasible_funnel_controller(write, tmp_path, capsys):
    out = tmp_path / "fc"
    assert main(["run", write("fc", FC), "--out", str(out)]) == 0
    assert "feasible" in capsys.readouterr().out
    for f in ("summary.txt", "trace.csv", "error.svg", "input.svg"):
        assert (out / f).is_file()
    tr = SimulationTrace.from_csv(out / "trace.csv")
    assert np.all(tr.err_norm < tr.funnel_radius)


def test_exit_status_feasible_mpc(write, tmp_path):
    out = tmp_path / "mpc"
    assert main(["run", write("mpc", MPC), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "steps.csv")))
    assert len(rows) == 20 and all(np.isfinite(float(r["ocp_cost"])) for r in rows)


def test_exit_status_infeasible(write, tmp_path):
    out = tmp_path / "bad"
    assert main(["run", write("bad", INFEASIBLE), "--out", str(out)]) == 1
    lines = dict(line.split(None, 1) for line in (out / "summary.txt").read_text().splitlines())
    assert lines["feasible"] == "False"
    assert lines["stop_reason"].startswith("no finite-cost control")


def test_invalid_config_exit_two(write, capsys):
    assert main(["run", write("broken", FC.replace("x0 = 0.5", "x0 = 5.0"))]) == 2
    err = capsys.readouterr().err
    assert "phi(t0)*|e(t0)| = " in err and "[model] x0" in err
    assert main(["run", "no_such_config"]) == 2


def test_output_env_override(write, tmp_path, monkeypatch):
    monkeypatch.setenv("FMPC_OUTPUT_DIR", str(tmp_path / "env"))
    path = write("envrun", FC)
    assert output_dir(load(path)) == tmp_path / "env" / "envrun"
    assert main(["run", path]) == 0
    assert (tmp_path / "env" / "envrun" / "summary.txt").is_file()


def test_summary_reproducible(write):
    cfg = load(write("rep", FC))
    a = run_experiment(cfg, write=False).summary
    b = run_experiment(cfg, write=False).summary
    assert a == b and a.config_hash == cfg.config_hash


def test_compare_table_and_basis(write, tmp_path, capsys):
    assert main(["compare", write("fc", FC), write("mpc", MPC), "--out", str(tmp_path / "cmp")]) == 0
    table = capsys.readouterr().out
    assert "min_margin" in table and "fc" in table and "mpc" in table
    rows = list(csv.DictReader(open(tmp_path / "cmp" / "compare.csv")))
    assert [r["feasible"] for r in rows] == ["True", "True"]
    assert float(rows[0]["input_energy"]) > 0
    other = FC.replace("radius", "radius").replace("c = 0.2", "c = 0.3")
    assert main(["compare", write("fc", FC), write("other", other)]) == 2


def test_compare_flags_infeasible(write, tmp_path):
    good = INFEASIBLE.replace("M = 1.0", "M = 5.0")
    summaries, _ = compare([load(write("good", good)), load(write("bad", INFEASIBLE))], str(tmp_path))
    assert [s.feasible for s in summaries] == [True, False]


def test_compute_bound_linear(capsys):
    assert main(["compute-bound", "linear_bound"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["m_value", "1"]
    header = out.index("m_value,p_max,g_max,psi_dot_sup,yref_dot_sup,set")
    assert out[header + 1].startswith("1.0,")
    assert any(line.startswith("witness runs 50") and line.endswith("True") for line in out)


def test_compute_bound_general():
    bound, check = compute_bound(load(resolve_config("exothermic_fmpc")))
    assert check is None
    assert 3e4 < bound.m_value < 5e4


def test_list_models(capsys):
    assert main(["list-models"]) == 0
    out = capsys.readouterr().out
    assert "exothermic_reactor" in out and "massoncar_deg3_fmpc" in out


def test_svg_output_is_well_formed(write, tmp_path):
    out = tmp_path / "svg"
    main(["run", write("fc", FC), "--out", str(out)])
    root = ET.parse(out / "error.svg").getroot()
    assert root.tag.endswith("svg")
    labels = [t.text for t in root.iter("{http://www.w3.org/2000/svg}text")]
    assert "+psi" in labels and "-psi" in labels
