import csv
import filecmp
import hashlib
import json
import shutil

import pytest

import patrolkit.sweep
from patrolkit.cli import build_parser, main
from patrolkit.neural import load_weights
from patrolkit.trainer import TrainConfig, initial_actor

SUBCOMMANDS = ("run", "sweep", "train", "adversary", "analyze")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_digest(root):
    return {p.relative_to(root): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_exits_zero(sub, capsys):
    with pytest.raises(SystemExit) as exc:
        main([sub, "--help"])
    assert exc.value.code == 0
    assert "--out" in capsys.readouterr().out


def test_run_minimal(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--map", "demo4", "--strategy", "sebs", "--agents", "2", "--duration", "120", "--out", str(out)]) == 0
    for name in ("idleness.csv", "agents.csv", "visits.csv", "config.json", "graph.json"):
        assert (out / name).is_file()
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["n_agents"] == 2 and cfg["map"] == "demo4" and cfg["seed"] == 0


def test_run_missing_weights_names_flag(tmp_path, capsys):
    assert main(["run", "--map", "demo4", "--strategy", "suns", "--out", str(tmp_path / "x")]) != 0
    assert "--weights" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_run_bad_map(tmp_path, capsys):
    assert main(["run", "--map", "nowhere.json", "--out", str(tmp_path / "x")]) == 2
    assert "nowhere.json" in capsys.readouterr().err


def test_run_same_seed_identical(tmp_path):
    args = ["run", "--map", "grid20", "--strategy", "random", "--agents", "3", "--duration", "200",
            "--msg-fail-prob", "0.3", "--seed", "1"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only


def test_run_config_file_and_env_seed(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"map": "demo4", "strategy": "random", "n_agents": 2, "duration": 50}))
    monkeypatch.setenv("PATROLKIT_SEED", "17")
    assert main(["run", "--config", str(cfg), "--agents", "3", "--out", str(tmp_path / "r")]) == 0
    echo = json.loads((tmp_path / "r" / "config.json").read_text())
    assert echo["seed"] == 17 and echo["n_agents"] == 3 and echo["duration"] == 50
    # the echo alone reproduces the run
    assert main(["run", "--config", str(tmp_path / "r" / "config.json"), "--out", str(tmp_path / "r2")]) == 0
    assert filecmp.cmp(tmp_path / "r" / "idleness.csv", tmp_path / "r2" / "idleness.csv", shallow=False)


def write_spec(path, **kw):
    spec = dict(maps=["demo4"], strategies=["sebs", "random"], team_sizes=[1, 2], msg_fail_probs=[0.0],
                runs_per_cell=2, duration=60.0)
    spec.update(kw)
    path.write_text(json.dumps(spec))
    return path


def test_sweep_rows_resume_and_analyze_agree(tmp_path, monkeypatch):
    spec = write_spec(tmp_path / "spec.json")
    out = tmp_path / "sweep"
    assert main(["sweep", "--spec", str(spec), "--out", str(out)]) == 0
    rows = read_csv(out / "results.csv")
    assert len(rows) == 8
    assert (out / "config.json").is_file()
    # paired design: every strategy replays the same seeds
    seeds = {(r["team_size"], r["run"]): set() for r in rows}
    for r in rows:
        seeds[r["team_size"], r["run"]].add(r["seed"])
    assert all(len(s) == 1 for s in seeds.values())

    # remove one finished cell, rerun: only that cell is simulated again
    victim = rows[3]
    shutil.rmtree(victim["path"])
    calls = []
    real = patrolkit.sweep.run
    monkeypatch.setattr(patrolkit.sweep, "run", lambda cfg, *a, **k: calls.append(cfg) or real(cfg, *a, **k))
    assert main(["sweep", "--spec", str(spec), "--out", str(out)]) == 0
    assert len(calls) == 1 and calls[0].seed == int(victim["seed"])
    assert read_csv(out / "results.csv") == rows

    an = tmp_path / "an"
    assert main(["analyze", "--logs", victim["path"], "--out", str(an)]) == 0
    again = read_csv(an / "runs.csv")[0]
    assert float(again["mean_idleness"]) == float(victim["mean_idleness"])
    assert float(again["mean_max_idleness"]) == float(victim["mean_max_idleness"])


def test_sweep_bad_spec(tmp_path, capsys):
    spec = write_spec(tmp_path / "spec.json", strategies=["suns"])
    assert main(["sweep", "--spec", str(spec), "--out", str(tmp_path / "s")]) == 2
    assert "weights" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text(json.dumps({"mapz": ["demo4"]}))
    assert main(["sweep", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "s")]) == 2


def test_analyze_groups_and_stats(tmp_path):
    spec = write_spec(tmp_path / "spec.json", team_sizes=[2], runs_per_cell=3)
    main(["sweep", "--spec", str(spec), "--out", str(tmp_path / "sw")])
    an = tmp_path / "an"
    assert main(["analyze", "--logs", str(tmp_path / "sw"), "--out", str(an)]) == 0
    groups = read_csv(an / "groups.csv")
    assert {g["strategy"] for g in groups} == {"sebs", "random"}
    assert min(float(g["relative_idleness"]) for g in groups) == 1.0
    stats = json.loads((an / "stats.json").read_text())
    assert 0 <= stats["kruskal_wallis"]["p"] <= 1
    assert json.loads((an / "config.json").read_text())["group_by"] == "strategy"
    assert main(["analyze", "--logs", str(tmp_path / "sw"), "--group-by", "colour", "--out", str(an)]) == 2


def test_train_zero_lr_emits_initialization(tmp_path):
    cfg = dict(train_seeds=[100], validation_seeds=[200], restarts=1, episodes_per_graph=2, n_envs=2,
               episode_length=20, rollout_length=20, n_step=20, validation_duration=60.0, learning_rate=0.0)
    (tmp_path / "t.json").write_text(json.dumps(cfg))
    out = tmp_path / "w" / "sun.json"
    out.parent.mkdir()
    assert main(["train", "--config", str(tmp_path / "t.json"), "--out", str(out)]) == 0
    assert load_weights(out, expect="sun") == initial_actor(TrainConfig(**cfg), 0)
    report = json.loads((tmp_path / "w" / "sun.report.json").read_text())
    assert len(report["restarts"]) == 1


def test_adversary_on_demo_log(tmp_path):
    log = tmp_path / "log"
    main(["run", "--map", "demo4", "--strategy", "sebs", "--agents", "2", "--duration", "1200", "--out", str(log)])
    before = tree_digest(log)
    report = tmp_path / "adv.json"
    assert main(["adversary", "--log", str(log), "--attack-duration", "10", "30", "--out", str(report)]) == 0
    assert tree_digest(log) == before
    data = json.loads(report.read_text())
    assert [r["attack_duration"] for r in data["results"]] == [10.0, 30.0]
    for r in data["results"]:
        assert r["aggregate_p_s"] is None or 0 <= r["aggregate_p_s"] <= 1
        assert all(p is None or 0 <= p <= 1 for p in r["p_s"].values())
    assert data["run_config"]["strategy"] == "sebs"


def test_adversary_errors(tmp_path, capsys):
    assert main(["adversary", "--log", str(tmp_path / "none"), "--attack-duration", "10", "--out",
                 str(tmp_path / "a.json")]) == 2
    log = tmp_path / "log"
    main(["run", "--map", "demo4", "--duration", "20", "--out", str(log)])
    assert main(["adversary", "--log", str(log), "--attack-duration", "60", "--out", str(tmp_path / "a.json")]) == 2
    assert "too short" in capsys.readouterr().err


def test_parser_lists_strategies():
    text = build_parser().format_help()
    for sub in SUBCOMMANDS:
        assert sub in text
