import csv
import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from dechw import cli, config, engine
from dechw.config import ConfigError, ExperimentConfig

SMOKE = """
[topology]
n_nodes = 4
p = 0.6

[data]
num_classes = 3
samples_per_class = 20
test_per_class = 10
input_dim = 5

[model]
hidden = [8]

[training]
epochs = 1
batch_size = 8

[run]
rounds = 3
"""


@pytest.fixture
def smoke(tmp_path):
    path = tmp_path / "smoke.toml"
    path.write_text(SMOKE)
    return path


# ---------------------------------------------------------------- parsing


def test_minimal_config_fills_defaults():
    cfg = config.parse_text("")
    assert cfg == ExperimentConfig()
    assert cfg.aggregation.beta == 1.0 and cfg.theta == math.inf


def test_roundtrip_defaults_and_custom():
    for cfg in [ExperimentConfig(), config.parse_text(SMOKE),
                ExperimentConfig().replace(aggregation={"theta": 30, "no_accumulation": True},
                                           data={"train_subset": 2000}, topology={"seed": 7})]:
        assert config.parse_text(config.emit(cfg)) == cfg


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 100), st.floats(0, 1), st.floats(0.01, 10), st.one_of(st.none(), st.integers(0, 500)),
       st.sampled_from(["dechw", "dechetero"]), st.lists(st.integers(1, 64), max_size=3), st.booleans())
def test_roundtrip_property(n, p, alpha, theta, strategy, hidden, homo):
    cfg = ExperimentConfig().replace(topology={"n_nodes": n, "p": p}, partition={"alpha": alpha},
                                     aggregation={"theta": theta, "strategy": strategy},
                                     model={"hidden": hidden}, run={"homogeneous_init": homo})
    assert config.parse_text(config.emit(cfg)) == cfg


def test_negative_alpha_names_key():
    with pytest.raises(ConfigError, match="partition.alpha"):
        config.parse_text("[partition]\nalpha = -1\n")


def test_unknown_key_suggests_correction():
    with pytest.raises(ConfigError, match="did you mean 'strategy'"):
        config.parse_text('[aggregation]\nstratgy = "dechw"\n')
    with pytest.raises(ConfigError, match="did you mean 'training'"):
        config.parse_text("[trainig]\nlr = 0.1\n")


@pytest.mark.parametrize("text,key", [
    ('[training]\nlr = "fast"\n', "training.lr"),
    ("[run]\nrounds = 0\n", "run.rounds"),
    ("[topology]\np = 1.5\n", "topology.p"),
    ('[aggregation]\nstrategy = "fedavg"\n', "aggregation.strategy"),
    ("[aggregation]\ntheta = -2\n", "aggregation.theta"),
    ("[training]\nmomentum = 1.0\n", "training.momentum"),
    ('[data]\nsource = "idx"\n', "data.train_images"),
    ("[run]\nhomogeneous_init = 1\n", "run.homogeneous_init"),
])
def test_validation_messages_name_key(text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        config.parse_text(text)


def test_parse_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config.parse_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\nrounds = 3")
    with pytest.raises(ConfigError, match="parse error"):
        config.parse_config(bad)


def test_theta_accepts_inf():
    assert config.parse_text('[aggregation]\ntheta = "inf"\n').aggregation.theta is None
    assert config.parse_text("[aggregation]\ntheta = inf\n").aggregation.theta is None
    assert config.parse_text("[aggregation]\ntheta = 30\n").theta == 30


def test_overrides():
    cfg = config.apply_override(ExperimentConfig(), "training.lr=0.05")
    assert cfg.training.lr == 0.05
    cfg = config.apply_override(cfg, "aggregation.strategy=dechetero")
    assert cfg.aggregation.strategy == "dechetero"
    cfg = config.apply_override(cfg, "model.hidden=[4, 4]")
    assert cfg.model.hidden == [4, 4]
    with pytest.raises(ConfigError):
        config.apply_override(cfg, "lr=0.1")
    with pytest.raises(ConfigError):
        config.apply_override(cfg, "training.lr")


def test_seed_fallbacks():
    cfg = ExperimentConfig().replace(run={"seed": 9}, topology={"seed": 1})
    assert (cfg.topology_seed, cfg.data_seed, cfg.partition_seed) == (1, 9, 9)


# ---------------------------------------------------------------- run


def test_run_smoke(smoke, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", str(smoke), "--out", str(out)]) == 0
    rows = engine.read_metrics_csv(out / "metrics.csv")
    assert [r["round"] for r in rows] == [1, 2, 3]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seeds"] == [0]
    assert manifest["config"]["topology"]["n_nodes"] == 4
    assert manifest["config"]["aggregation"]["beta"] == 1.0
    assert manifest["finished"] is not None
    for name in manifest["outputs"]:
        assert (out / name).exists()
    with open(out / "partition_stats.csv") as fh:
        stats = list(csv.DictReader(fh))
    assert sum(int(r["count"]) for r in stats) == 60
    assert "seed 0" in capsys.readouterr().out


def test_run_unwritable_out_dir(smoke, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    out = blocker / "sub"
    code = cli.main(["run", str(smoke), "--out", str(out)])
    assert code == cli.EXIT_IO
    assert not (out / "manifest.json").exists()


def test_run_seed_sweep(smoke, tmp_path):
    out = tmp_path / "sweep"
    assert cli.main(["run", str(smoke), "--out", str(out), "--seed", "5", "--seed", "6"]) == 0
    assert (out / "metrics_seed5.csv").exists() and (out / "metrics_seed6.csv").exists()
    assert (out / "metrics_seed5.csv").read_bytes() != (out / "metrics_seed6.csv").read_bytes()
    assert json.loads((out / "manifest.json").read_text())["seeds"] == [5, 6]


def test_run_override_and_workers_env(smoke, tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", str(smoke), "--out", str(a), "--override", "run.rounds=2"]) == 0
    monkeypatch.setenv("DECHW_WORKERS", "3")
    assert cli.main(["run", str(smoke), "--out", str(b), "--override", "run.rounds=2"]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert json.loads((b / "manifest.json").read_text())["config"]["run"]["workers"] == 3


def test_exit_codes(smoke, tmp_path, capsys, monkeypatch):
    assert cli.main(["run", str(tmp_path / "nope.toml")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.toml"
    bad.write_text("[partition]\nalpha = -1\n")
    assert cli.main(["run", str(bad)]) == cli.EXIT_CONFIG
    assert "partition.alpha" in capsys.readouterr().err
    idx = tmp_path / "idx.toml"
    idx.write_text('[data]\nsource = "idx"\ntrain_images = "a"\ntrain_labels = "b"\n'
                   'test_images = "c"\ntest_labels = "d"\n')
    assert cli.main(["run", str(idx), "--out", str(tmp_path / "o")]) == cli.EXIT_IO

    def boom(*a, **k):
        raise RuntimeError("diverged")

    monkeypatch.setattr(engine, "run_experiment", boom)
    out = tmp_path / "rt"
    assert cli.main(["run", str(smoke), "--out", str(out)]) == cli.EXIT_RUNTIME
    assert json.loads((out / "manifest.json").read_text())["status"] == "failed"


# ---------------------------------------------------------------- compare


def read_summary(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_compare_two_strategies(smoke, tmp_path, capsys):
    out = tmp_path / "cmp"
    code = cli.main(["compare", str(smoke), "--strategies", "dechetero,dechw", "--seeds", "0",
                     "--milestones", "0.2,0.999", "--override", "run.rounds=5", "--out", str(out)])
    assert code == 0
    rows = read_summary(out / "summary.csv")
    assert [r["strategy"] for r in rows] == ["dechetero", "dechw"]
    assert all(r["rounds_acc_0.999"] == "-" for r in rows)
    assert all(r["rounds_acc_0.2"] != "-" for r in rows)
    text = capsys.readouterr().out
    assert "dechetero" in text and "last-10" in text


def test_compare_duplicate_strategy_rows_are_identical(smoke, tmp_path):
    out = tmp_path / "dup"
    assert cli.main(["compare", str(smoke), "--strategies", "dechw,dechw", "--seeds", "0,1",
                     "--milestones", "0.3,0.5", "--out", str(out)]) == 0
    a, b = read_summary(out / "summary.csv")
    assert a["strategy"] == "dechw" and b["strategy"] == "dechw#1"
    assert {k: v for k, v in a.items() if k != "strategy"} == {k: v for k, v in b.items() if k != "strategy"}


def test_compare_relative_milestones(smoke, tmp_path):
    out = tmp_path / "rel"
    assert cli.main(["compare", str(smoke), "--strategies", "dechw", "--milestones", "0.5,1.0", "--relative",
                     "--out", str(out)]) == 0
    (row,) = read_summary(out / "summary.csv")
    assert row["rounds_rel_1"] != "-"  # the best round always reaches 100% of itself


def test_compare_bad_strategy(smoke, tmp_path):
    assert cli.main(["compare", str(smoke), "--strategies", "dechw,fedavg", "--out", str(tmp_path)]) \
        == cli.EXIT_CONFIG


def test_summarize_sentinel_when_any_seed_misses():
    mk = lambda accs: [engine.RoundMetrics(r, a, 0, 0, 0, 0, 0) for r, a in enumerate(accs, 1)]
    rows = cli.summarize({"x": [mk([0.2, 0.6]), mk([0.2, 0.4])]}, [0.5, 0.1], last_k=1, relative=False)
    assert rows[0]["milestones"] == [None, 1.0]
    assert rows[0]["final_mean"] == pytest.approx(0.5)
