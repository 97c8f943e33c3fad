import numpy as np
import pytest

from voltvar.agents import (
    Adam,
    DqnConfig,
    MLP,
    ReplayBuffer,
    epsilon,
    factored_argmax,
    greedy_action,
    load_checkpoint,
    q_value,
    save_checkpoint,
    td_loss_and_grads,
    td_update,
    train,
)
from voltvar.builders import build_case13
from voltvar.env import EnvConfig, VoltVarEnv, generate_offline_dataset, read_offline_dataset
from voltvar.errors import AgentError, NonFiniteLossError
from voltvar.loads import build_load_series, generate_synthetic, impute, select_customers
from oracles import exhaustive_factored_max, finite_difference_grads


def test_epsilon_schedule():
    cfg = DqnConfig()
    assert epsilon(cfg, 0) == 1.0
    assert epsilon(cfg, 500) == pytest.approx(0.02)
    assert epsilon(cfg, 5000) == pytest.approx(0.02)
    assert epsilon(cfg, 250) == pytest.approx(0.51)
    with pytest.raises(AgentError):
        epsilon(cfg, -1)


def test_q_value_sums_heads():
    net = MLP(2, (4,), (2, 2), np.random.default_rng(0))
    # overwrite heads with fixed outputs: zero weights, bias = table
    net.heads = [
        (np.zeros((4, 2)), np.array([1.0, 3.0])),
        (np.zeros((4, 2)), np.array([2.0, 0.0])),
    ]
    obs = np.array([0.3, -0.2])
    assert q_value(net, obs, (1, 0)) == pytest.approx(3 + 2)
    assert q_value(net, obs, (0, 0)) == pytest.approx(1 + 2)
    action, best = greedy_action(net, obs)
    assert action == (1, 0) and best == pytest.approx(5.0)
    single = MLP(2, (4,), (3,), np.random.default_rng(1))
    heads = single.forward(obs)
    assert q_value(single, obs, (int(np.argmax(heads[0])),)) == pytest.approx(heads[0].max())


def test_zero_network_q_is_zero():
    net = MLP(3, (5,), (4, 2), np.random.default_rng(0))
    net.trunk = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.trunk]
    net.heads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.heads]
    obs = np.array([1.0, 2.0, 3.0])
    for a in ((0, 0), (3, 1), (2, 0)):
        assert q_value(net, obs, a) == 0.0
    action, best = greedy_action(net, obs)
    assert action == (0, 0) and best == 0.0  # ties break to the lowest index


def test_factored_argmax_matches_enumeration_and_scales_linearly():
    rng = np.random.default_rng(123)
    for _ in range(200):
        sizes = rng.integers(2, 9, size=int(rng.integers(1, 4)))
        heads = [rng.normal(size=s) for s in sizes]
        action, value, ops = factored_argmax(heads)
        b_action, b_value = exhaustive_factored_max(heads)
        assert action == b_action
        assert value == pytest.approx(b_value, abs=1e-9)
        assert ops == sum(sizes)  # grows with the sum, not the product


def test_gradient_check_against_finite_differences():
    rng = np.random.default_rng(0)
    net = MLP(4, (8, 8), (3, 2), rng)
    target = net.copy()
    cfg = DqnConfig(gamma=0.9, reward_scale=2.0)
    obs = rng.normal(size=(6, 4))
    actions = np.column_stack([rng.integers(0, 3, size=6), rng.integers(0, 2, size=6)])
    rewards = rng.normal(size=6)
    next_obs = rng.normal(size=(6, 4))
    batch = (obs, actions, rewards, next_obs)

    _loss, grads = td_loss_and_grads(net, target, batch, cfg)
    flat_analytic = np.concatenate([g.ravel() for g in grads])

    base = net.flat_parameters()

    def loss_at(vec):
        probe = net.copy()
        probe.set_flat_parameters(vec)
        loss, _ = td_loss_and_grads(probe, target, batch, cfg)
        return loss

    flat_fd = finite_difference_grads(loss_at, base, step=1e-5)
    denom = np.maximum(np.abs(flat_analytic) + np.abs(flat_fd), 1e-8)
    rel = np.abs(flat_analytic - flat_fd) / denom
    assert rel.max() < 1e-4


def test_td_update_discount_free_case():
    rng = np.random.default_rng(5)
    net = MLP(3, (6,), (4,), rng)
    target = net.copy()
    cfg = DqnConfig(gamma=0.0, reward_scale=2.0, learning_rate=1e-3)
    obs = rng.normal(size=(1, 3))
    actions = np.array([[2]])
    rewards = np.array([0.7])
    batch = (obs, actions, rewards, obs)
    q = q_value(net, obs[0], (2,))
    loss = td_update(net, target, batch, cfg, Adam(cfg.learning_rate))
    assert loss == pytest.approx((q - 0.7 * 2.0) ** 2)


def test_td_update_deterministic_and_nonfinite_guard():
    rng = np.random.default_rng(6)

    def build():
        return MLP(3, (6,), (2,), np.random.default_rng(42))

    cfg = DqnConfig()
    obs = rng.normal(size=(4, 3))
    batch = (obs, np.zeros((4, 1), dtype=int), np.ones(4), obs)
    n1, n2 = build(), build()
    l1 = td_update(n1, n1.copy(), batch, cfg, Adam(cfg.learning_rate))
    l2 = td_update(n2, n2.copy(), batch, cfg, Adam(cfg.learning_rate))
    assert l1 == l2
    assert np.array_equal(n1.flat_parameters(), n2.flat_parameters())

    bad = (obs, np.zeros((4, 1), dtype=int), np.array([np.nan, 1, 1, 1]), obs)
    with pytest.raises(NonFiniteLossError):
        td_update(n1, n1.copy(), bad, cfg, Adam(cfg.learning_rate))


def test_replay_buffer_uniform_sampling():
    buffer = ReplayBuffer(capacity=100, rng=np.random.default_rng(0))
    for k in range(10):
        buffer.add(np.array([float(k)]), [0], float(k), np.array([float(k)]))
    draws = buffer.sample_indices(100_000)
    counts = np.bincount(draws, minlength=10)
    # each item within 5 sigma of the expected 10,000
    sigma = np.sqrt(100_000 * 0.1 * 0.9)
    assert (np.abs(counts - 10_000) < 5 * sigma).all()


def test_replay_buffer_ring_overwrite():
    buffer = ReplayBuffer(capacity=4, rng=np.random.default_rng(0))
    for k in range(7):
        buffer.add(np.array([float(k)]), [0], float(k), np.array([0.0]))
    assert len(buffer) == 4
    stored = sorted(r for r in buffer._rew)
    assert stored == [3.0, 4.0, 5.0, 6.0]


def test_target_copy_after_every_period():
    rng = np.random.default_rng(1)
    feeder_obs = rng.normal(size=(8, 3))
    batch = (feeder_obs, np.zeros((8, 1), dtype=int), np.ones(8), feeder_obs)
    cfg = DqnConfig(copy_period=3)
    net = MLP(3, (6,), (2,), np.random.default_rng(2))
    target = net.copy()
    opt = Adam(cfg.learning_rate)
    for updates in range(1, 10):
        td_update(net, target, batch, cfg, opt)
        if updates % cfg.copy_period == 0:
            target.load_from(net)
            assert np.array_equal(target.flat_parameters(), net.flat_parameters())
        else:
            assert not np.array_equal(target.flat_parameters(), net.flat_parameters())


def test_checkpoint_round_trip(tmp_path):
    net = MLP(5, (7, 7), (3, 2), np.random.default_rng(3))
    cfg = DqnConfig(learning_rate=1e-4)
    path = save_checkpoint(tmp_path / "ckpt.json", net, cfg, seed=9, meta={"feeder": "x"})
    net2, cfg2, seed, meta = load_checkpoint(path)
    assert np.array_equal(net.flat_parameters(), net2.flat_parameters())
    assert cfg2 == cfg and seed == 9 and meta["feeder"] == "x"


@pytest.fixture(scope="module")
def small_setup(tmp_path_factory):
    feeder = build_case13()
    meters = impute(select_customers(generate_synthetic(45, 300, seed=0), 0.1))
    series = build_load_series(feeder, meters, customers_per_load=5, seed=0)
    env = VoltVarEnv(EnvConfig(feeder=feeder, load_series=series, horizon=250))
    path = tmp_path_factory.mktemp("offline") / "transitions.csv"
    generate_offline_dataset(env, path)
    offline = read_offline_dataset(path)

    def fresh_env():
        return VoltVarEnv(EnvConfig(feeder=feeder, load_series=series, horizon=250))

    return fresh_env, offline


def test_pretrain_only_runs_no_env_steps(small_setup):
    fresh_env, offline = small_setup
    cfg = DqnConfig(pretrain_steps=100)
    result = train(fresh_env(), offline, cfg, seed=0, n_steps=0)
    assert result.summary["updates"] == 100
    assert result.summary["steps"] == 0
    assert result.metrics == []


def test_train_rejects_layout_mismatch(small_setup):
    fresh_env, offline = small_setup
    feeder = build_case13()
    meters = impute(select_customers(generate_synthetic(45, 300, seed=0), 0.1))
    series = build_load_series(feeder, meters, customers_per_load=5, seed=0)
    env3 = VoltVarEnv(
        EnvConfig(feeder=feeder, load_series=series, horizon=250, state_option=3)
    )
    with pytest.raises(AgentError, match="obs_dim"):
        train(env3, offline, DqnConfig(), seed=0, n_steps=0)


def test_train_deterministic_metric_stream(small_setup):
    fresh_env, offline = small_setup
    cfg = DqnConfig(pretrain_steps=20)
    r1 = train(fresh_env(), offline, cfg, seed=3, n_steps=60)
    r2 = train(fresh_env(), offline, cfg, seed=3, n_steps=60)
    assert r1.metrics == r2.metrics
    assert np.array_equal(r1.net.flat_parameters(), r2.net.flat_parameters())
    r3 = train(fresh_env(), offline, cfg, seed=4, n_steps=60)
    assert r1.metrics != r3.metrics


def test_train_metrics_columns(small_setup, tmp_path):
    from voltvar.agents import METRICS_COLUMNS, read_metrics_csv, write_metrics_csv

    fresh_env, offline = small_setup
    result = train(fresh_env(), offline, DqnConfig(pretrain_steps=5), seed=0, n_steps=10)
    assert set(result.metrics[0]) == set(METRICS_COLUMNS)
    path = write_metrics_csv(result.metrics, tmp_path / "m.csv")
    back = read_metrics_csv(path)
    assert back == [
        {k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in result.metrics
    ]
