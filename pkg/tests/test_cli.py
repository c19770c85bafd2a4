import csv
import json

import numpy as np
import pytest

from hyfal.cli import (BUILTIN_SPECS, CampaignReport, ExperimentConfig, builtin_spec, main, report_from_json,
                       resolve_spec, run_campaign, write_campaign_csv)
from hyfal.hybrid import chasing_cars, chasing_cars_inputs, execute, write_trajectory_csv
from hyfal.nha import NhaSurrogate
from hyfal.stl import And, Globally, Or, crisp_robustness, parse_formula

from oracles import REQUIREMENTS

VIOLATED = "always[0,1] y1 <= -1000000"
SAFE = "always[0,1] y1 >= -1000000"


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# --- specifications ------------------------------------------------------------

@pytest.mark.parametrize("name", list(REQUIREMENTS))
def test_builtin_matches_table(name):
    assert builtin_spec(name) == parse_formula(REQUIREMENTS[name])


def test_builtin_shapes():
    cc1 = builtin_spec("CC1")
    assert isinstance(cc1, Globally) and (cc1.a, cc1.b) == (0, 100)
    assert isinstance(builtin_spec("CC5").child.child, Or)
    assert isinstance(builtin_spec("CCx"), And)


def test_unknown_id():
    with pytest.raises(KeyError):
        builtin_spec("CC9")
    with pytest.raises(KeyError):
        resolve_spec("CC9")
    assert resolve_spec("y1 > 0")[0] == "custom"
    assert resolve_spec(" CC2 ")[0] == "CC2"


# --- configuration ----------------------------------------------------------------

def test_config_file(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text("# campaign\nspec = CC3\nruns = 2   # fewer runs\nbudget=7\nsmoothing = 0.5\n"
                 "series = no\nout = \"some dir\"\n")
    cfg = ExperimentConfig.load(p)
    assert (cfg.spec, cfg.runs, cfg.budget, cfg.smoothing, cfg.series, cfg.out) == \
        ("CC3", 2, 7, 0.5, False, "some dir")
    assert cfg.pool == 256 and cfg.modes == 3 and cfg.buffer_size == 5
    pb = cfg.problem(builtin_spec("CC3"), 4)
    assert pb.smoothing == 0.5 and pb.budget == 7 and pb.seed == 4 and pb.train.update_epochs == 100


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ValueError):
        ExperimentConfig(runs=0)
    with pytest.raises(ValueError):
        ExperimentConfig(budget=0)
    with pytest.raises(KeyError):
        ExperimentConfig.from_mapping({"budgett": "3"})
    with pytest.raises(ValueError):
        ExperimentConfig.from_mapping({"series": "perhaps"})


# --- reports ---------------------------------------------------------------------

def _run(status, executions, robustness, i=0):
    return {"spec": "S", "run": i, "seed": i, "status": status, "executions": executions,
            "robustness": robustness}


def test_aggregates_over_successes_only(tmp_path):
    rep = CampaignReport("S", [_run("falsified", 3, -1.0, 0), _run("budget-exhausted", 20, 2.0, 1),
                               _run("falsified", 8, -0.5, 2), _run("falsified", 4, -2.0, 3)])
    assert rep.fr == (3, 4) and rep.mean_executions == 5.0 and rep.median_executions == 4.0
    write_campaign_csv(rep, tmp_path / "c.csv")
    table = rows(tmp_path / "c.csv")
    assert table[0] == ["spec", "run", "seed", "status", "executions", "robustness"]
    assert table[-1] == ["S", "aggregate", "", "3/4", "5.0/4.0", "-2.0"]


def test_no_success_dash(tmp_path):
    rep = CampaignReport("S", [_run("budget-exhausted", 20, 1.5, i) for i in range(5)])
    assert rep.mean_executions is None and rep.median_executions is None
    assert "mean -" in rep.summary()
    write_campaign_csv(rep, tmp_path / "c.csv")
    assert rows(tmp_path / "c.csv")[-1][3:5] == ["0/5", "-/-"]


def test_single_run_statistics():
    rep = CampaignReport("S", [_run("falsified", 6, -1.0)])
    assert rep.mean_executions == rep.median_executions == 6


@pytest.fixture(scope="module")
def violated_campaign(tmp_path_factory):
    out = tmp_path_factory.mktemp("camp")
    cfg = ExperimentConfig(spec=VIOLATED, runs=2, budget=5, seed=3, out=str(out))
    return cfg, run_campaign(cfg), out


def test_campaign_files(violated_campaign):
    cfg, rep, out = violated_campaign
    assert rep.spec == "custom" and rep.fr == (2, 2)
    assert [r["seed"] for r in rep.runs] == [3, 4]
    for r in range(2):
        d = json.loads((out / f"custom_run{r}.json").read_text())
        assert d["status"] == "falsified" and d["executions"] == 1
        assert (out / f"custom_run{r}_counterexample.csv").exists()
        series = rows(out / f"custom_run{r}_series.csv")
        assert series[0] == ["execution", "source", "robustness", "surrogate_robustness"] and len(series) == 2
    table = rows(out / "custom_campaign.csv")
    assert len(table) == 4 and table[-1][1:5] == ["aggregate", "", "2/2", "1.0/1.0"]


def test_aggregates_recomputable_from_json(violated_campaign):
    cfg, rep, out = violated_campaign
    again = report_from_json(sorted(out.glob("custom_run*.json")), "custom")
    assert again.fr == rep.fr and again.median_executions == rep.median_executions
    assert [r["robustness"] for r in again.runs] == [r["robustness"] for r in rep.runs]


def test_counterexample_really_violates(violated_campaign):
    _, _, out = violated_campaign
    d = json.loads((out / "custom_run0.json").read_text())
    traj = execute(chasing_cars(), chasing_cars_inputs(d["counterexample"]), 0.01)
    assert crisp_robustness(parse_formula(VIOLATED), traj.outputs) == d["robustness"] < 0


def test_exhausted_campaign(tmp_path):
    rep = run_campaign(ExperimentConfig(spec=SAFE, runs=1, budget=1, out=str(tmp_path)))
    assert rep.fr == (0, 1)
    assert not (tmp_path / "custom_run0_counterexample.csv").exists()
    assert rows(tmp_path / "custom_campaign.csv")[-1][3:5] == ["0/1", "-/-"]


def test_campaign_byte_determinism(tmp_path):
    text = ("spec = CC2\nruns = 1\nbudget = 4\nepochs = 20\nupdate_epochs = 5\npool = 16\n"
            "max_iters = 5\nseed = 11\n")
    outputs = []
    for d in ("a", "b"):
        cfg_path = tmp_path / f"{d}.cfg"
        cfg_path.write_text(text + f"out = {tmp_path / d}\n")
        assert main(["falsify", str(cfg_path)]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted((tmp_path / d).iterdir())})
    assert outputs[0] == outputs[1] and "CC2_campaign.csv" in outputs[0]


# --- subcommands -------------------------------------------------------------------

def test_cli_overrides(tmp_path, capsys):
    assert main(["falsify", "--spec", VIOLATED, "--runs", "1", "--budget", "2",
                 "--out", str(tmp_path)]) == 0
    assert "FR 1/1" in capsys.readouterr().out


def test_cli_unknown_spec(tmp_path, capsys):
    assert main(["falsify", "--spec", "CC7", "--out", str(tmp_path)]) == 2
    assert "unknown specification" in capsys.readouterr().err


def test_simulate_and_monitor(tmp_path, capsys):
    phi = np.random.default_rng(0).uniform(0, 1, 40)
    (tmp_path / "phi.txt").write_text(" ".join(map(repr, phi.tolist())))
    out = tmp_path / "t.csv"
    assert main(["simulate", str(tmp_path / "phi.txt"), "--out", str(out), "--spec", "CC1"]) == 0
    printed = capsys.readouterr().out
    ref = crisp_robustness(builtin_spec("CC1"), execute(chasing_cars(), chasing_cars_inputs(phi), 0.01).outputs)
    assert f"robustness {ref!r}" in printed
    (tmp_path / "cc1.stl").write_text(BUILTIN_SPECS["CC1"])
    assert main(["monitor", str(out), str(tmp_path / "cc1.stl")]) == 0
    assert float(capsys.readouterr().out) == ref
    assert main(["monitor", str(out), "z9 > 0"]) == 2


def test_simulate_json_phi(tmp_path):
    phi = np.linspace(0, 1, 40)
    (tmp_path / "r.json").write_text(json.dumps({"counterexample": phi.tolist()}))
    assert main(["simulate", str(tmp_path / "r.json"), "--out", str(tmp_path / "t.csv"), "--states"]) == 0
    assert "x10" in rows(tmp_path / "t.csv")[0]
    (tmp_path / "bad.txt").write_text("0.5 0.5")
    assert main(["simulate", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "u.csv")]) == 2


def test_train_subcommand(tmp_path, capsys):
    rng = np.random.default_rng(1)
    paths = []
    for i in range(2):
        tr = execute(chasing_cars(), chasing_cars_inputs().sample(rng), 0.01)
        paths.append(str(tmp_path / f"t{i}.csv"))
        write_trajectory_csv(tr, paths[-1], include_states=True)
    out = tmp_path / "sur.json"
    assert main(["train", *paths, "--out", str(out), "--epochs", "5"]) == 0
    assert "final loss" in capsys.readouterr().out
    sur = NhaSurrogate.from_json(out.read_text())
    assert sur.mode_counts == {"leader": 1, "follower": 3}
    assert sur.rollout(rng.uniform(0, 1, (1, 40)))[0].shape == (1, 401, 10)


def test_train_needs_states(tmp_path):
    tr = execute(chasing_cars(), chasing_cars_inputs(), 0.05)
    write_trajectory_csv(tr, tmp_path / "t.csv")
    with pytest.raises(SystemExit):
        main(["train", str(tmp_path / "t.csv")])
