import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ringflow.errors import ConfigError, InvalidGapError
from ringflow.idm import (
    CollectConfig,
    IdmParams,
    IdmRanges,
    collect_runs,
    equilibrium_speed,
    idm_accel,
    read_dataset,
    sample_idm_params,
    write_dataset,
)
from ringflow.ring import ring_gaps

HOMOGENEOUS = IdmRanges(**{k: (v, v) for k, v in vars(IdmParams()).items()})


def idm_oracle(a, b, delta, s0, T, v, gap, dv, vd):
    s_star = s0 + max(0.0, v * T + v * dv / (2 * math.sqrt(a * b)))
    return s_star, a * (1 - (v / vd) ** delta - (s_star / gap) ** 2)


def test_hand_substitution_example():
    p = IdmParams(a_cap=1.0, b=1.5, v0=13.0, delta=4, s0=2.0, T=1.5)
    s_star, expected = idm_oracle(1.0, 1.5, 4, 2.0, 1.5, 10.0, 20.0, 2.0, 13.0)
    assert s_star == pytest.approx(25.165, abs=1e-3)
    assert idm_accel(p, 10.0, 20.0, 2.0, 13.0) == pytest.approx(expected, rel=1e-12)
    assert idm_accel(p, 10.0, 20.0, 2.0, 13.0) == pytest.approx(-0.9333, abs=1e-4)


def test_free_road_at_desired_speed():
    p = IdmParams()
    assert abs(idm_accel(p, 12.5, 1e9, 0.0, 12.5)) < 1e-9


def test_standstill_accelerates_at_cap():
    p = IdmParams(a_cap=1.1)
    assert idm_accel(p, 0.0, 1e6, 0.0, 12.0) == pytest.approx(1.1, abs=1e-9)


def test_desired_gap_never_below_s0():
    # strongly opening gap: the max(0, .) term keeps s* at s0
    p = IdmParams(s0=3.0)
    expected = 1.0 * (1 - (10 / 12.5) ** 4 - (3.0 / 50.0) ** 2)
    assert idm_accel(p, 10.0, 50.0, -40.0, 12.5) == pytest.approx(expected, rel=1e-12)


def test_nonpositive_gap_rejected():
    with pytest.raises(InvalidGapError):
        idm_accel(IdmParams(), 10.0, 0.0, 0.0, 12.0)


def test_point_ranges_give_exact_values():
    p = sample_idm_params(np.random.default_rng(0), HOMOGENEOUS)
    assert p == IdmParams()


def test_sampling_is_deterministic():
    a = sample_idm_params(np.random.default_rng(5), IdmRanges())
    b = sample_idm_params(np.random.default_rng(5), IdmRanges())
    assert a == b


def test_sampling_stays_in_ranges():
    r = np.random.default_rng(0)
    ranges = IdmRanges()
    draws = [sample_idm_params(r, ranges) for _ in range(10_000)]
    for name, (lo, hi) in vars(ranges).items():
        vals = np.array([getattr(d, name) for d in draws])
        assert lo <= vals.min() and vals.max() <= hi


def test_inverted_range_names_key():
    with pytest.raises(ConfigError) as exc:
        IdmRanges(T=(2.0, 1.0)).validate()
    assert exc.value.key == "idm.T"


def test_collect_counts():
    ds = collect_runs(CollectConfig(runs=1, steps=100), seed=3)
    assert ds.theta.shape == (1, 100, 5)
    assert ds.u.shape == (1, 100, 5)
    assert ds.n_runs == 1 and ds.n_steps == 100 and ds.n_vehicles == 5


def equilibrium_config(steps=100):
    return CollectConfig(runs=1, steps=steps, ranges=HOMOGENEOUS, init="equilibrium",
                         limit_segments=(1, 1), limit_range=(13.5, 13.5))


def test_equilibrium_ring_is_stationary():
    ds = collect_runs(equilibrium_config(), seed=0)
    assert np.max(np.abs(ds.u)) < 1e-6


def test_equilibrium_speed_root():
    p = IdmParams()
    v = equilibrium_speed(p, 125.66, 12.5)
    assert abs(idm_accel(p, v, 125.66, 0.0, 12.5)) < 1e-10
    assert 0 < v < 12.5


def test_equilibrium_needs_homogeneous_params():
    with pytest.raises(ConfigError):
        collect_runs(CollectConfig(runs=1, steps=10, init="equilibrium"), seed=0)


def test_collection_safety_and_heterogeneity(small_dataset):
    ds = small_dataset
    for r in range(ds.n_runs):
        for t in range(ds.n_steps):
            assert ring_gaps(ds.theta[r, t], ds.radius).min() > 0
    b = CollectConfig().bounds
    assert ds.v.min() >= b.v_min and ds.v.max() <= b.v_max
    assert ds.u.min() >= b.a_min - 1e-12 and ds.u.max() <= b.a_max + 1e-12


def test_recorded_controls_reproduce_speeds(small_dataset):
    ds = small_dataset
    np.testing.assert_allclose(ds.v[:, 1:], ds.v[:, :-1] + ds.u[:, :-1] * ds.dt, atol=1e-12)


def test_heterogeneous_params_differ():
    from ringflow.idm import run_rng, _random_profile

    cfg = CollectConfig()
    rng = run_rng(0, 0)
    _random_profile(rng, cfg)
    params = [sample_idm_params(rng, cfg.ranges) for _ in range(5)]
    assert len({p.v0 for p in params}) >= 2


def test_dataset_file_round_trip_and_determinism(tmp_path):
    cfg = CollectConfig(runs=2, steps=30)
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    write_dataset(collect_runs(cfg, seed=9), a)
    write_dataset(collect_runs(cfg, seed=9), b)
    assert a.read_bytes() == b.read_bytes()
    ds = read_dataset(a)
    ref = collect_runs(cfg, seed=9)
    for name in ("theta", "v", "u", "v_limit"):
        np.testing.assert_array_equal(getattr(ds, name), getattr(ref, name))
    assert ds.profiles == ref.profiles


def test_dataset_file_row_count(tmp_path):
    path = tmp_path / "d.tsv"
    write_dataset(collect_runs(CollectConfig(runs=2, steps=100), seed=7), path)
    rows = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
    assert rows[0].split("\t") == ["run_id", "t", "vehicle_id", "theta", "v", "u", "v_limit"]
    assert len(rows) - 1 == 2 * 100 * 5


@given(st.floats(60.0, 300.0), st.floats(11.5, 13.5))
def test_equilibrium_speed_is_fixed_point(gap, vd):
    p = IdmParams()
    v = equilibrium_speed(p, gap, vd)
    assert abs(idm_accel(p, v, gap, 0.0, vd)) < 1e-9
