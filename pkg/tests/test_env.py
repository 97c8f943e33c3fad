import csv
import json

import numpy as np
import pytest

from voltvar.builders import build_case13
from voltvar.env import (
    EnvConfig,
    VoltVarEnv,
    default_transitions,
    generate_offline_dataset,
    read_offline_dataset,
    reward_terms,
    time_features,
)
from voltvar.errors import EnvError, PositionRangeError
from voltvar.loads import build_load_series, generate_synthetic, impute, select_customers
from voltvar.powerflow import DevicePositions


@pytest.fixture(scope="module")
def case13_series():
    feeder = build_case13()
    meters = impute(select_customers(generate_synthetic(45, 400, seed=0), 0.1))
    return feeder, build_load_series(feeder, meters, customers_per_load=5, seed=0)


def make_env(case13_series, **overrides):
    feeder, series = case13_series
    cfg = dict(feeder=feeder, load_series=series, horizon=300)
    cfg.update(overrides)
    return VoltVarEnv(EnvConfig(**cfg))


def test_option2_layout(case13_series):
    env = make_env(case13_series, state_option=2)
    names = [(s.name, s.length) for s in env.observation_layout]
    assert names == [("scada_p", 1), ("scada_q", 1), ("taps", 3), ("time_enc", 4)]
    assert env.obs_dim == 2 + 3 + 4


def test_option1_layout_has_per_meter_slices(case13_series):
    env = make_env(case13_series, state_option=1)
    names = {s.name: s.length for s in env.observation_layout}
    assert names["ami_p"] == 9 and names["ami_q"] == 9
    assert names["scada_p"] == 1 and names["scada_q"] == 1
    assert env.obs_dim == 2 + 18 + 3 + 4


def test_time_encoding_values():
    assert time_features(0) == pytest.approx([1.0, 0.0, 1.0, 0.0])
    enc24 = time_features(24)
    assert enc24[0] == pytest.approx(-1.0)
    assert enc24[1] == pytest.approx(0.0, abs=1e-12)
    enc48 = time_features(48)
    assert enc48[0] == pytest.approx(1.0)


def test_reset_deterministic(case13_series):
    env1 = make_env(case13_series)
    env2 = make_env(case13_series)
    assert np.array_equal(env1.reset(), env2.reset())
    # resetting the same instance reproduces the same observation
    obs = env1.reset()
    env1.step([0, 0, 0])
    assert np.array_equal(env1.reset(), obs)


def test_constant_series_normalizes_to_one(case13_series):
    feeder, _ = case13_series
    from voltvar.loads import MeterMatrix

    const = build_load_series(
        feeder,
        MeterMatrix(values=np.ones((45, 100)), mask=np.ones((45, 100), dtype=bool)),
        customers_per_load=5,
    )
    env = VoltVarEnv(EnvConfig(feeder=feeder, load_series=const, state_option=1, horizon=80))
    obs = env.reset()
    layout = {s.name: s for s in env.observation_layout}
    for name in ("ami_p", "ami_q"):
        sl = layout[name]
        assert obs[sl.start : sl.start + sl.length] == pytest.approx(np.ones(sl.length), rel=1e-9)


def test_step_reward_and_info(case13_series):
    env = make_env(case13_series, reward_option=1)
    env.reset()
    action = [2, 1, 1]
    obs, reward, info = env.step(action)
    rb = info.breakdown
    beta1, beta2, beta3 = env.cfg.beta
    assert reward == rb.total
    assert rb.total == pytest.approx(
        (-beta1 * rb.v_term - beta3 * rb.switch_term) - beta2 * rb.loss_term
    )
    assert info.positions.taps == (2,)
    assert info.positions.cap_status == (1, 1)
    assert obs.shape == (env.obs_dim,)
    # taps slice of the next observation reflects the action just applied
    sl = {s.name: s for s in env.observation_layout}["taps"]
    assert obs[sl.start : sl.start + sl.length].tolist() == [2.0, 1.0, 1.0]


def test_repeat_action_zero_switch(case13_series):
    env = make_env(case13_series)
    env.reset()
    action = [3, 1, 0]
    env.step(action)
    _obs, _r, info = env.step(action)
    assert info.breakdown.switch_term == 0.0


def test_action_validation(case13_series):
    env = make_env(case13_series)
    env.reset()
    with pytest.raises(PositionRangeError, match="regulator 0"):
        env.step([17, 0, 0])
    with pytest.raises(PositionRangeError, match="capacitor 1"):
        env.step([0, 0, 3])
    with pytest.raises(PositionRangeError, match="length"):
        env.step([0, 0])


def test_step_before_reset_rejected(case13_series):
    env = make_env(case13_series)
    with pytest.raises(EnvError, match="reset"):
        env.step([0, 0, 0])


def test_horizon_exhaustion_is_error_not_termination(case13_series):
    env = make_env(case13_series, horizon=5)
    env.reset()
    for _ in range(5):
        out = env.step([0, 0, 0])
        assert len(out) == 3  # never a done flag
    with pytest.raises(EnvError, match="exhausted"):
        env.step([0, 0, 0])


def test_insufficient_series_rejected(case13_series):
    feeder, series = case13_series
    with pytest.raises(EnvError, match="insufficient"):
        VoltVarEnv(EnvConfig(feeder=feeder, load_series=series, horizon=series.horizon + 1))


def test_reward_terms_options():
    v = np.array([1.0, 1.06, 0.94, 1.04])
    meters = np.array([1, 2, 3])
    prev = DevicePositions(taps=(3,), cap_status=(0,))
    new = DevicePositions(taps=(5,), cap_status=(1,))
    beta = (0.5, 1.0, 0.1)

    rb1 = reward_terms(1, v, 0.02, prev, new, meters, beta)
    assert rb1.v_term == pytest.approx(abs(1.06 - 1) + abs(0.94 - 1) + abs(1.04 - 1))
    assert rb1.switch_term == 3.0  # two tap steps plus one capacitor toggle
    assert rb1.loss_term == 0.02
    assert rb1.max_violation == pytest.approx(0.01)

    rb2 = reward_terms(2, v, 0.02, prev, new, meters, beta)
    assert rb2.loss_term == 0.0
    assert rb1.total == rb2.total - beta[1] * 0.02  # exact, by construction

    rb3 = reward_terms(3, v, 0.01, prev, new, meters, beta)
    assert rb3.v_term == 2.0  # 1.06 and 0.94 are strictly outside
    rb4 = reward_terms(4, v, 0.01, prev, new, meters, beta)
    assert rb3.total == rb4.total - beta[1] * 0.01

    # boundary: exactly 1.05 / 0.95 not counted (strict inequalities)
    edge = np.array([1.0, 1.05, 0.95])
    rb = reward_terms(3, edge, 0.0, prev, prev, np.array([1, 2]), beta)
    assert rb.v_term == 0.0
    assert rb.max_violation == 0.0


def test_reward_example_numbers():
    # deviation 0.02 summed over meters, loss 0.02, one device switched
    prev = DevicePositions(taps=(0,), cap_status=())
    new = DevicePositions(taps=(1,), cap_status=())
    v = np.array([1.0, 1.02])
    rb = reward_terms(1, v, 0.02, prev, new, np.array([1]), (0.5, 1.0, 0.1))
    assert rb.total == pytest.approx(-0.5 * 0.02 - 1.0 * 0.02 - 0.1 * 1)
    # indicator option: one metered bus at 1.06, loss 0.01, no switches
    rb3 = reward_terms(3, np.array([1.0, 1.06]), 0.01, prev, prev, np.array([1]), (0.5, 1.0, 0.1))
    assert rb3.total == pytest.approx(-0.5 * 1 - 1.0 * 0.01)


def test_option3_uses_day_lagged_ami(case13_series):
    env = make_env(case13_series, state_option=3, horizon=200)
    env.reset()
    layout = {s.name: s for s in env.observation_layout}
    sl = layout["ami_p"]
    # at t=60 the AMI slice equals the normalized injections of t-48
    obs60 = env._default_obs(60)
    p, _q = env._series_pq(60 - 48)
    expect = np.array([p[env._group_rows(g)].mean() for g in range(len(env._groups))])
    expect = expect / env._norm["ami_p"]
    assert obs60[sl.start : sl.start + sl.length] == pytest.approx(expect)


def test_offline_dataset_round_trip_and_chaining(case13_series, tmp_path):
    env = make_env(case13_series, horizon=100)
    out = tmp_path / "transitions.csv"
    count = generate_offline_dataset(env, out)
    assert count == 100

    # chaining: next_obs of record k equals obs of record k+1, byte-for-byte
    with out.open() as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    obs_cols = [i for i, c in enumerate(header) if c.startswith("obs_")]
    next_cols = [i for i, c in enumerate(header) if c.startswith("next_obs_")]
    for k in range(len(data) - 1):
        assert [data[k][i] for i in next_cols] == [data[k + 1][i] for i in obs_cols]

    # logged voltages are multiples of 0.1 V on the 120 V base
    v_cols = [i for i, c in enumerate(header) if c.startswith("v120_bus_")]
    for row in data[:20]:
        for i in v_cols:
            val = float(row[i])
            assert abs(val * 10 - round(val * 10)) < 1e-9

    # deterministic re-run is byte-identical
    out2 = tmp_path / "transitions2.csv"
    env2 = make_env(case13_series, horizon=100)
    generate_offline_dataset(env2, out2)
    assert out.read_bytes() == out2.read_bytes()
    meta1 = (tmp_path / "transitions.csv.meta.json").read_bytes()
    meta2 = (tmp_path / "transitions2.csv.meta.json").read_bytes()
    assert meta1 == meta2

    ds = read_offline_dataset(out)
    assert ds.obs.shape == (100, env.obs_dim)
    assert ds.actions.shape == (100, env.action_dim)
    assert ds.meta["layout"][0]["name"] == "scada_p"
    assert ds.meta["warmup"]["steps"] == 48


def test_offline_obs_matches_env_reset(case13_series, tmp_path):
    env = make_env(case13_series, horizon=60)
    transitions = default_transitions(env)
    assert np.array_equal(transitions[0].obs, env.reset())


def test_dataset_meta_is_self_describing(case13_series, tmp_path):
    env = make_env(case13_series, horizon=60, state_option=2)
    out = tmp_path / "t.csv"
    generate_offline_dataset(env, out)
    meta = json.loads((tmp_path / "t.csv.meta.json").read_text())
    assert meta["obs_dim"] == 2 + 3 + 4
    assert meta["feeder"] == "case13_balanced"
    assert [d["kind"] for d in meta["action_devices"]] == ["regulator", "capacitor", "capacitor"]
    assert meta["normalization"]["scada"][0] > 0


def test_meter_grouping(case13_series):
    feeder, series = case13_series
    env = VoltVarEnv(
        EnvConfig(feeder=feeder, load_series=series, state_option=1, horizon=80, meter_group_size=3)
    )
    # bundled case13 assigns each load its own meter_group key, so grouping
    # by key leaves 9 features; regroup by patched keys to check averaging
    from dataclasses import replace as dc_replace

    grouped_loads = tuple(
        dc_replace(lp, meter_group=k // 3) for k, lp in enumerate(feeder.load_points)
    )
    feeder2 = dc_replace(feeder, load_points=grouped_loads)
    env2 = VoltVarEnv(
        EnvConfig(feeder=feeder2, load_series=series, state_option=1, horizon=80, meter_group_size=3)
    )
    names2 = {s.name: s.length for s in env2.observation_layout}
    assert names2["ami_p"] == 3
    obs = env2.reset()
    sl = {s.name: s for s in env2.observation_layout}["ami_p"]
    p, _ = env2._series_pq(-1)
    manual = np.array([p[k * 3 : (k + 1) * 3].mean() for k in range(3)]) / env2._norm["ami_p"]
    assert obs[sl.start : sl.start + sl.length] == pytest.approx(manual)


def test_default_rollout_reward_parity(case13_series):
    # replaying the default positions through step() reproduces the logged
    # default rewards on the same timestamps
    env = make_env(case13_series, horizon=40)
    env.reset()
    expected = env.default_rewards()
    positions = env.default_positions()
    got = []
    for t in range(40):
        action = positions[t].as_action()
        _obs, reward, info = env.step(action)
        got.append(reward)
        assert info.reward_default == expected[t]
    assert got == pytest.approx(expected)


def test_meter_subset_config(case13_series):
    feeder, series = case13_series
    env = VoltVarEnv(
        EnvConfig(feeder=feeder, load_series=series, state_option=1, horizon=80, meters=(0, 8))
    )
    names = {s.name: s.length for s in env.observation_layout}
    assert names["ami_p"] == 2
    env.reset()
    _obs, _r, info = env.step([0, 0, 0])
    # v_term only covers the two metered buses
    v_state = info.breakdown.v_term
    full = VoltVarEnv(EnvConfig(feeder=feeder, load_series=series, state_option=1, horizon=80))
    full.reset()
    _o2, _r2, info_full = full.step([0, 0, 0])
    assert v_state < info_full.breakdown.v_term
    with pytest.raises(EnvError, match="meter index"):
        VoltVarEnv(EnvConfig(feeder=feeder, load_series=series, horizon=80, meters=(42,)))
