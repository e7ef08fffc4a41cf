import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ors_lab import cli
from ors_lab import config as cfgmod

TINY = """
seed = 1
[env]
name = "chain"
size = 5
[dataset]
n_trajectories = 10
horizon = 30
[occupancy]
pretrain_steps = 40
flow_loss_steps = 10
hidden = [16, 16]
[reward]
steps = 20
hidden = [16]
[gcrl]
steps = 100
eval_every = 50
eval_episodes = 5
eval_horizon = 10
[analysis]
sigmas = [1e-3, 5e-3]
seeds = 10
corridor_length = 101
starts = [50, 80]
[verify]
family_size = 2
goals_per_maze = 1
prop2_draws = 8
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return ["--config", str(path), "--out", str(tmp_path / "run")], tmp_path / "run"


def run(*argv):
    return cli.main(list(argv))


# -- config -----------------------------------------------------------------

def test_config_round_trip_and_hash():
    cfg = cfgmod.loads(TINY)
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg
    assert cfgmod.config_hash(cfg) == cfgmod.config_hash(cfgmod.loads(cfgmod.dumps(cfg)))
    cfg.seed = 2
    assert cfgmod.config_hash(cfg) != cfgmod.config_hash(cfgmod.loads(TINY))


@given(st.integers(0, 2**31), st.floats(0.0, 0.999), st.lists(st.integers(1, 512), max_size=4))
@settings(max_examples=30)
def test_config_round_trip_property(seed, gamma, hidden):
    cfg = cfgmod.RunConfig(seed=seed)
    cfg.env.gamma = gamma
    cfg.occupancy.hidden = hidden
    assert cfgmod.from_dict(cfgmod.to_dict(cfg)) == cfg


@pytest.mark.parametrize("text, match", [
    ("[env]\nnmae = 'chain'", "unknown key"),
    ("bogus = 1", "unknown key"),
    ("[env]\nsize = 'five'", "integer"),
    ("[occupancy]\nlr = 'fast'", "number"),
    ("[occupancy]\nhidden = 3", "list"),
    ("env = 3", "table"),
])
def test_config_errors(text, match):
    with pytest.raises(cfgmod.ConfigError, match=match):
        cfgmod.loads(text)


def test_streams_are_independent_and_reproducible():
    a = cfgmod.stream(0, "dataset").random(5)
    assert np.array_equal(a, cfgmod.stream(0, "dataset").random(5))
    assert not np.array_equal(a, cfgmod.stream(0, "policy").random(5))
    assert not np.array_equal(a, cfgmod.stream(1, "dataset").random(5))
    with pytest.raises(KeyError):
        cfgmod.stream(0, "nope")


# -- commands ---------------------------------------------------------------

def test_full_pipeline(tiny, capsys):
    args, out = tiny
    assert run("gen-data", *args) == 0
    assert run("train", *args, "--stage", "all") == 0
    assert run("eval", *args) == 0
    for name in ("dataset.jsonl", "assumptions.json", "occupancy.json", "reward.json",
                 "policy.json", "control.json", "policy_metrics.csv", "eval.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1 and "occupancy.json" in manifest["artifacts"]
    ev = json.loads((out / "eval.json").read_text())
    assert 0.0 <= ev["success_rate"] <= 1.0
    assert "control (sparse reward)" in capsys.readouterr().out


def test_gen_data_is_deterministic(tiny, tmp_path):
    args, out = tiny
    run("gen-data", *args)
    first = (out / "dataset.jsonl").read_bytes()
    run("gen-data", *args[:2], "--out", str(tmp_path / "again"))
    assert (tmp_path / "again" / "dataset.jsonl").read_bytes() == first
    run("gen-data", *args[:2], "--out", str(tmp_path / "other"), "--seed", "9")
    assert (tmp_path / "other" / "dataset.jsonl").read_bytes() != first


def test_stages_name_their_prerequisites(tiny, capsys):
    args, _ = tiny
    assert run("train", *args, "--stage", "occupancy") == cli.EXIT_USAGE
    assert "gen-data" in capsys.readouterr().err
    run("gen-data", *args)
    assert run("train", *args, "--stage", "reward") == cli.EXIT_USAGE
    assert "--stage occupancy" in capsys.readouterr().err
    assert run("eval", *args) == cli.EXIT_USAGE
    assert "--stage policy" in capsys.readouterr().err


def test_verify_on_family_is_clean(tiny):
    args, out = tiny
    path = out.parent / "fam.toml"
    path.write_text(TINY.replace('name = "chain"', 'name = "family"'))
    assert run("verify", "--config", str(path), "--out", str(out), "--which", "prop1") == 0
    doc = json.loads((out / "verify_prop1.json").read_text())
    assert doc["instances"] == 4 and doc["violating"] == 0 and doc["preconditions_unmet"] == 0


def test_verify_reports_unmet_preconditions(tiny):
    args, out = tiny
    path = out.parent / "u.toml"
    path.write_text(TINY.replace('name = "chain"', 'name = "u_maze"'))
    code = run("verify", "--config", str(path), "--out", str(out), "--which", "theorem1")
    assert code == cli.EXIT_PRECONDITION


def test_verify_prop2_untrained_is_diagnostic_only(tiny):
    args, out = tiny
    assert run("verify", *args, "--which", "prop2", "--untrained") == 0
    doc = json.loads((out / "verify_prop2.json").read_text())
    assert "warning" in doc and doc["violating"] == 0


def test_analyze_writes_sweep_and_field(tiny):
    args, out = tiny
    assert run("analyze", *args) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "mode,sigma,mean_delta_v,se" and len(lines) == 1 + 3 * 2
    summary = json.loads((out / "field_summary.json").read_text())
    assert summary["spearman"] == pytest.approx(1.0)


def test_bad_config_path_and_values(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[env]\nname = 'hexagon'")
    assert run("gen-data", "--config", str(bad), "--out", str(tmp_path / "o")) == cli.EXIT_USAGE
    assert "hexagon" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        run("train", "--stage", "everything")
