import numpy as np
import pytest

from ringflow.cli import read_manifest, run
from ringflow.config import SEED_ENV, Config, load_config, stage_rng
from ringflow.errors import ConfigError, ModelFormatError, RoleMismatchError
from ringflow.generator import GeneratorModel
from ringflow.persist import load_model, save_model
from ringflow.policy import PolicyModel

SMALL = """
[collect]
runs = 2
steps = 60
[generator]
iterations = 30
hidden = 8,8
[policy]
iterations = 2
episodes_per_batch = 2
hidden = 8,8
[eval]
n_rollouts = 2
"""


def test_empty_file_gives_table_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("")
    cfg = load_config(path, env={})
    assert cfg == Config()
    assert cfg.ring.radius == 100.0 and cfg.ring.n_vehicles == 5 and cfg.policy.eta == 0.3
    assert cfg.descriptor.v_bar_gt == 12.06 and cfg.generator.t_max == 20 and cfg.policy.horizon == 10
    assert cfg.eval.ks == (1, 2, 3, 4)


def test_override_applies():
    cfg = load_config(None, ["weights.lambda_v=0"], env={})
    assert cfg.weights.lambda_v == 0.0
    assert cfg.generator_hyper().weights.lambda_v == 0.0 and cfg.ppo_hyper().weights.lambda_v == 0.0


def test_precedence_file_then_override(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[policy]\neta = 0.7\nlr = 0.01\n")
    cfg = load_config(path, ["policy.eta=0.9"], env={})
    assert cfg.policy.eta == 0.9 and cfg.policy.lr == 0.01


def test_inverted_spacing_bounds_name_both_keys(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[descriptor]\nd_min = 150\nd_max = 120\n")
    with pytest.raises(ConfigError) as exc:
        load_config(path, env={})
    assert "d_min" in str(exc.value) and "d_max" in str(exc.value)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[policy]\netta = 0.3\n")
    with pytest.raises(ConfigError) as exc:
        load_config(path, env={})
    assert exc.value.key == "policy.etta"


def test_bad_value_rejected():
    with pytest.raises(ConfigError):
        load_config(None, ["policy.epochs=four"], env={})


def test_seed_precedence(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nseed = 3\n")
    assert load_config(path, env={}).seed == 3
    assert load_config(path, env={SEED_ENV: "5"}).seed == 5
    assert load_config(path, seed=9, env={SEED_ENV: "5"}).seed == 9


def test_config_hash_tracks_values():
    a = load_config(None, env={})
    b = load_config(None, ["policy.eta=0.31"], env={})
    assert a.hash() == load_config(None, env={}).hash()
    assert a.hash() != b.hash()


def test_stage_streams_are_independent_and_stable():
    a = stage_rng(0, "gen").random(3)
    np.testing.assert_array_equal(a, stage_rng(0, "gen").random(3))
    assert not np.array_equal(a, stage_rng(0, "policy").random(3))


def test_model_round_trip_bit_identical(tmp_path):
    r = np.random.default_rng(0)
    pol = PolicyModel(hidden=(8, 8), rng=r, init_log_std=-0.3)
    gen = GeneratorModel(5, 100.0, hidden=(8,), rng=r)
    save_model(pol, "policy", tmp_path / "p.bin")
    save_model(gen, "generator", tmp_path / "g.bin")
    pol2 = load_model(tmp_path / "p.bin", "policy")
    gen2 = load_model(tmp_path / "g.bin")
    x = r.normal(size=(7, 4))
    np.testing.assert_array_equal(pol2.mean(x), pol.mean(x))
    np.testing.assert_array_equal(pol2.value(x), pol.value(x))
    assert pol2.std == pol.std and pol2.bounds == pol.bounds
    c = r.normal(size=(3, gen.context_dim))
    np.testing.assert_array_equal(gen2.net(c), gen.net(c))
    np.testing.assert_array_equal(gen2.log_std, gen.log_std)


def test_role_mismatch(tmp_path):
    save_model(GeneratorModel(5, 100.0, hidden=(8,)), "generator", tmp_path / "g.bin")
    with pytest.raises(RoleMismatchError):
        load_model(tmp_path / "g.bin", "policy")


def test_truncated_model(tmp_path):
    path = tmp_path / "p.bin"
    save_model(PolicyModel(hidden=(8,)), "policy", path)
    path.write_bytes(path.read_bytes()[:30])
    with pytest.raises(ModelFormatError):
        load_model(path, "policy")


@pytest.fixture
def small_ini(tmp_path, monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    monkeypatch.chdir(tmp_path)
    (tmp_path / "small.ini").write_text(SMALL)
    return "small.ini"


def test_collect_counts_rows(small_ini, tmp_path):
    assert run(["collect", "--runs", "2", "--steps", "100", "--seed", "7", "--out", "data.tsv", "-q"]) == 0
    rows = [ln for ln in (tmp_path / "data.tsv").read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == 1 + 2 * 100 * 5
    man = read_manifest(tmp_path / "data.tsv.manifest")
    assert man["seed"] == "7" and man["stage"] == "collect"
    assert man["config_hash"] == load_config(None, ["collect.runs=2", "collect.steps=100"], seed=7, env={}).hash()


def test_missing_data_exit_2(small_ini, capsys):
    assert run(["train-gen", "--data", "missing.tsv", "-q"]) == 2
    assert "missing.tsv" in capsys.readouterr().err


def test_config_errors_exit_2(small_ini, capsys):
    assert run(["collect", "--out", "x.tsv", "--set", "descriptor.d_min=150"]) == 2
    assert "descriptor.d_min" in capsys.readouterr().err
    assert run(["collect", "--out", "x.tsv", "--set", "policy.nope=1"]) == 2


def test_full_pipeline_and_role_check(small_ini, tmp_path):
    c = ["--config", small_ini, "-q"]
    assert run(["collect", "--out", "d.tsv", *c]) == 0
    assert run(["train-gen", "--data", "d.tsv", "--out", "g.bin", "--curve", "gc.tsv", *c]) == 0
    assert run(["train-policy", "--data", "d.tsv", "--gen", "g.bin", "--out", "p.bin", *c]) == 0
    assert run(["eval", "--data", "d.tsv", "--policy", "p.bin", "--gen", "g.bin", "--k", "1..4", "--out", "a.tsv", *c]) == 0
    body = [ln for ln in (tmp_path / "a.tsv").read_text().splitlines() if not ln.startswith("#")]
    assert len(body) == 1 + 4
    assert run(["scenario", "--kind", "decel", "--policy", "p.bin", "--out", "s.tsv", *c]) == 0
    assert run(["scenario", "--kind", "accel", "--out", "i.tsv", *c]) == 0
    for art in ("d.tsv", "g.bin", "p.bin", "a.tsv", "s.tsv"):
        man = read_manifest(tmp_path / f"{art}.manifest")
        assert man["config_hash"] == load_config(small_ini, env={}).hash()
    # a generator file where a policy is expected
    assert run(["eval", "--data", "d.tsv", "--policy", "g.bin", "--gen", "g.bin", "--out", "b.tsv", *c]) == 2


def test_bad_subcommand_exit_2(capsys):
    assert run(["fly"]) == 2
