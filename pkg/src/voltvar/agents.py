"""Factored deep Q-learning on the device-decoupled action space.

The Q network is a plain numpy MLP: a shared ReLU trunk feeding one linear
head per controllable device, head width = that device's position count.
The joint Q value of (s, a) is the sum over heads of the entry picked by
each device's coordinate, so the joint max/argmax decomposes into per-head
maxima and evaluation cost grows with the sum of head sizes instead of
their product.

Training is standard DQN: uniform replay, target network copied every
``copy_period`` updates, linear epsilon decay, TD targets
``r * reward_scale + gamma * sum_i max q_target(s', a_i)``, mean squared TD
error minimized with Adam.  The buffer is seeded from an offline
default-control log and pretrained before any environment interaction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import OfflineDataset, VoltVarEnv
from .errors import AgentError, NonFiniteLossError


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 0.95
    batch_size: int = 64
    learning_rate: float = 0.0005
    pretrain_steps: int = 100
    copy_period: int = 30
    epsilon_max: float = 1.0
    epsilon_min: float = 0.02
    epsilon_decay_steps: int = 500
    reward_scale: float = 5.0
    hidden_sizes: tuple[int, int] = (120, 120)
    buffer_capacity: int = 50_000


def epsilon(cfg: DqnConfig, step: int) -> float:
    """Linear decay from epsilon_max to epsilon_min over decay_steps, then
    constant."""
    if step < 0:
        raise AgentError("step must be >= 0")
    frac = min(step / cfg.epsilon_decay_steps, 1.0)
    return cfg.epsilon_max + (cfg.epsilon_min - cfg.epsilon_max) * frac


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class MLP:
    """ReLU trunk with one linear output head per device."""

    def __init__(
        self,
        input_dim: int,
        hidden_sizes,
        head_sizes,
        rng: np.random.Generator | None = None,
    ):
        if rng is None:
            rng = np.random.default_rng(0)
        self.input_dim = int(input_dim)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.head_sizes = tuple(int(h) for h in head_sizes)
        dims = [self.input_dim] + list(self.hidden_sizes)
        self.trunk = [
            (_glorot(rng, dims[i], dims[i + 1]), np.zeros(dims[i + 1]))
            for i in range(len(dims) - 1)
        ]
        last = dims[-1]
        self.heads = [(_glorot(rng, last, h), np.zeros(h)) for h in self.head_sizes]

    # parameters are exposed as a flat list of arrays (trunk pairs then head
    # pairs) so the optimizer and gradient checks stay layer-agnostic
    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in self.trunk + self.heads:
            out += [w, b]
        return out

    def _forward_cached(self, x: np.ndarray):
        h = np.atleast_2d(np.asarray(x, dtype=float))
        activations = [h]
        for w, b in self.trunk:
            z = h @ w + b
            h = np.maximum(z, 0.0)
            activations.append(h)
        head_outs = [h @ w + b for w, b in self.heads]
        return head_outs, activations

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        """Per-head outputs, shape (batch, head_size) each."""
        return self._forward_cached(x)[0]

    def backward(self, activations, head_grads) -> list[np.ndarray]:
        """Gradients w.r.t. every parameter given dLoss/dHead arrays."""
        grads: list[np.ndarray | None] = [None] * (2 * (len(self.trunk) + len(self.heads)))
        top = activations[-1]
        d_top = np.zeros_like(top)
        for i, ((w, _b), g) in enumerate(zip(self.heads, head_grads)):
            k = 2 * (len(self.trunk) + i)
            grads[k] = top.T @ g
            grads[k + 1] = g.sum(axis=0)
            d_top = d_top + g @ w.T
        d_h = d_top
        for i in range(len(self.trunk) - 1, -1, -1):
            w, _b = self.trunk[i]
            h_out = activations[i + 1]
            d_z = d_h * (h_out > 0.0)
            grads[2 * i] = activations[i].T @ d_z
            grads[2 * i + 1] = d_z.sum(axis=0)
            d_h = d_z @ w.T
        return grads  # type: ignore[return-value]

    def copy(self) -> "MLP":
        clone = MLP.__new__(MLP)
        clone.input_dim = self.input_dim
        clone.hidden_sizes = self.hidden_sizes
        clone.head_sizes = self.head_sizes
        clone.trunk = [(w.copy(), b.copy()) for w, b in self.trunk]
        clone.heads = [(w.copy(), b.copy()) for w, b in self.heads]
        return clone

    def load_from(self, other: "MLP") -> None:
        self.trunk = [(w.copy(), b.copy()) for w, b in other.trunk]
        self.heads = [(w.copy(), b.copy()) for w, b in other.heads]

    # flat views for finite-difference checks
    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_parameters(self, vec: np.ndarray) -> None:
        k = 0
        new_trunk, new_heads = [], []
        for w, b in self.trunk:
            nw = vec[k : k + w.size].reshape(w.shape).copy()
            k += w.size
            nb = vec[k : k + b.size].reshape(b.shape).copy()
            k += b.size
            new_trunk.append((nw, nb))
        for w, b in self.heads:
            nw = vec[k : k + w.size].reshape(w.shape).copy()
            k += w.size
            nb = vec[k : k + b.size].reshape(b.shape).copy()
            k += b.size
            new_heads.append((nw, nb))
        self.trunk, self.heads = new_trunk, new_heads

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_sizes": list(self.hidden_sizes),
            "head_sizes": list(self.head_sizes),
            "trunk": [[w.tolist(), b.tolist()] for w, b in self.trunk],
            "heads": [[w.tolist(), b.tolist()] for w, b in self.heads],
        }

    @staticmethod
    def from_dict(doc: dict) -> "MLP":
        net = MLP.__new__(MLP)
        net.input_dim = int(doc["input_dim"])
        net.hidden_sizes = tuple(doc["hidden_sizes"])
        net.head_sizes = tuple(doc["head_sizes"])
        net.trunk = [(np.array(w), np.array(b)) for w, b in doc["trunk"]]
        net.heads = [(np.array(w), np.array(b)) for w, b in doc["heads"]]
        return net


class Adam:
    """Adaptive moment estimation with standard decay constants."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def q_value(net: MLP, obs: np.ndarray, action_indices) -> float:
    """Joint Q(s, a) = sum over heads of the entry picked by each device."""
    heads = net.forward(obs)
    if len(action_indices) != len(heads):
        raise AgentError(f"action has {len(action_indices)} coords for {len(heads)} heads")
    return float(sum(h[0, a] for h, a in zip(heads, action_indices)))


def factored_argmax(head_values) -> tuple[tuple[int, ...], float, int]:
    """Per-head argmax with first-index tie break.

    Returns (indices, summed max value, ops) where ops counts the entries
    inspected -- the sum of head sizes, not their product.
    """
    indices = []
    total = 0.0
    ops = 0
    for h in head_values:
        h = np.asarray(h).ravel()
        k = int(np.argmax(h))
        indices.append(k)
        total += float(h[k])
        ops += h.size
    return tuple(indices), total, ops


def greedy_action(net: MLP, obs: np.ndarray) -> tuple[tuple[int, ...], float]:
    heads = [h[0] for h in net.forward(obs)]
    indices, total, _ = factored_argmax(heads)
    return indices, total


class ReplayBuffer:
    """Fixed-capacity ring with uniform (iid, with replacement) sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = int(capacity)
        self.rng = rng
        self._obs: list[np.ndarray] = []
        self._act: list[np.ndarray] = []
        self._rew: list[float] = []
        self._next: list[np.ndarray] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._obs)

    def add(self, obs, action_indices, reward, next_obs) -> None:
        obs = np.asarray(obs, dtype=float)
        act = np.asarray(action_indices, dtype=int)
        next_obs = np.asarray(next_obs, dtype=float)
        if len(self._obs) < self.capacity:
            self._obs.append(obs)
            self._act.append(act)
            self._rew.append(float(reward))
            self._next.append(next_obs)
        else:
            self._obs[self._cursor] = obs
            self._act[self._cursor] = act
            self._rew[self._cursor] = float(reward)
            self._next[self._cursor] = next_obs
            self._cursor = (self._cursor + 1) % self.capacity

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if not self._obs:
            raise AgentError("cannot sample from an empty buffer")
        return self.rng.integers(0, len(self._obs), size=batch_size)

    def sample(self, batch_size: int):
        idx = self.sample_indices(batch_size)
        return (
            np.stack([self._obs[i] for i in idx]),
            np.stack([self._act[i] for i in idx]),
            np.array([self._rew[i] for i in idx]),
            np.stack([self._next[i] for i in idx]),
        )


def td_loss_and_grads(net: MLP, target_net: MLP, batch, cfg: DqnConfig):
    """Mean squared TD error and parameter gradients for one batch."""
    obs, actions, rewards, next_obs = batch
    target_heads = target_net.forward(next_obs)
    next_max = np.zeros(len(rewards))
    for h in target_heads:
        next_max += h.max(axis=1)
    targets = rewards * cfg.reward_scale + cfg.gamma * next_max

    head_outs, cache = net._forward_cached(obs)
    batch_size = len(rewards)
    rows = np.arange(batch_size)
    q = np.zeros(batch_size)
    for i, h in enumerate(head_outs):
        q += h[rows, actions[:, i]]
    err = q - targets
    loss = float(np.mean(err**2))
    d_q = 2.0 * err / batch_size
    head_grads = []
    for i, h in enumerate(head_outs):
        g = np.zeros_like(h)
        g[rows, actions[:, i]] = d_q
        head_grads.append(g)
    grads = net.backward(cache, head_grads)
    return loss, grads


def td_update(net: MLP, target_net: MLP, batch, cfg: DqnConfig, optimizer: Adam) -> float:
    """One gradient step on the TD objective; returns the pre-step loss."""
    loss, grads = td_loss_and_grads(net, target_net, batch, cfg)
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"TD loss is not finite ({loss})")
    optimizer.step(net.parameters(), grads)
    return loss


@dataclass
class TrainResult:
    net: MLP
    metrics: list[dict]
    summary: dict


METRICS_COLUMNS = ["step", "reward", "reward_default_delta", "max_violation", "epsilon", "loss"]


def _check_offline_layout(env: VoltVarEnv, offline: OfflineDataset) -> None:
    meta = offline.meta
    if meta["obs_dim"] != env.obs_dim:
        raise AgentError(
            f"offline log obs_dim {meta['obs_dim']} != environment obs_dim {env.obs_dim}"
        )
    if meta["action_devices"] != env.action_devices():
        raise AgentError("offline log action devices do not match the environment")
    if meta["state_option"] != env.cfg.state_option or meta["reward_option"] != env.cfg.reward_option:
        raise AgentError("offline log state/reward options do not match the environment")


def train(
    env: VoltVarEnv,
    offline: OfflineDataset | None,
    cfg: DqnConfig,
    seed: int,
    n_steps: int,
    divergence_dump: str | Path | None = None,
) -> TrainResult:
    """Pretrain on the offline log, then interact epsilon-greedily.

    One TD update per environment step, target copy every ``copy_period``
    updates (pretraining included), fully reproducible from ``seed``.
    """
    ss = np.random.SeedSequence(seed)
    rng_init, rng_explore, rng_sample = (np.random.default_rng(c) for c in ss.spawn(3))

    devices = env.action_devices()
    head_sizes = [d["high"] - d["low"] + 1 for d in devices]
    lows = np.array([d["low"] for d in devices], dtype=int)
    net = MLP(env.obs_dim, cfg.hidden_sizes, head_sizes, rng_init)
    target = net.copy()
    optimizer = Adam(cfg.learning_rate)
    buffer = ReplayBuffer(cfg.buffer_capacity, rng_sample)

    if offline is not None:
        _check_offline_layout(env, offline)
        for k in range(len(offline.rewards)):
            buffer.add(
                offline.obs[k],
                offline.actions[k] - lows,
                offline.rewards[k],
                offline.next_obs[k],
            )
    if cfg.pretrain_steps > 0 and len(buffer) == 0:
        raise AgentError("pretraining requested but no offline transitions provided")

    updates = 0

    def one_update() -> float:
        nonlocal updates
        batch = buffer.sample(cfg.batch_size)
        try:
            loss = td_update(net, target, batch, cfg, optimizer)
        except NonFiniteLossError:
            if divergence_dump is not None:
                save_checkpoint(divergence_dump, net, cfg, seed, {"diverged_at_update": updates})
            raise
        updates += 1
        if updates % cfg.copy_period == 0:
            target.load_from(net)
        return loss

    for _ in range(cfg.pretrain_steps):
        one_update()

    metrics: list[dict] = []
    total_switches = 0.0
    if n_steps > 0:
        obs = env.reset()
        for step in range(n_steps):
            eps = epsilon(cfg, step)
            if rng_explore.random() < eps:
                indices = tuple(int(rng_explore.integers(0, n)) for n in head_sizes)
            else:
                indices, _ = greedy_action(net, obs)
            action = [int(lows[i] + indices[i]) for i in range(len(devices))]
            next_obs, reward, info = env.step(action)
            buffer.add(obs, indices, reward, next_obs)
            loss = one_update()
            total_switches += info.breakdown.switch_term
            metrics.append(
                {
                    "step": step,
                    "reward": reward,
                    "reward_default_delta": reward - info.reward_default,
                    "max_violation": info.breakdown.max_violation,
                    "epsilon": eps,
                    "loss": loss,
                }
            )
            obs = next_obs

    rewards = [m["reward"] for m in metrics]
    summary = {
        "seed": seed,
        "steps": n_steps,
        "updates": updates,
        "total_switches": total_switches,
        "mean_reward": float(np.mean(rewards)) if rewards else None,
        "mean_reward_default_delta": float(np.mean([m["reward_default_delta"] for m in metrics]))
        if metrics
        else None,
    }
    return TrainResult(net=net, metrics=metrics, summary=summary)


def write_metrics_csv(metrics: list[dict], path: str | Path) -> Path:
    import csv

    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in metrics:
            writer.writerow(
                [row["step"]] + [repr(float(row[c])) for c in METRICS_COLUMNS[1:]]
            )
    return path


def read_metrics_csv(path: str | Path) -> list[dict]:
    import csv

    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_COLUMNS:
            raise AgentError(f"{path}: unexpected metrics header {reader.fieldnames}")
        for row in reader:
            out.append({c: (int(row[c]) if c == "step" else float(row[c])) for c in METRICS_COLUMNS})
    return out


CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, net: MLP, cfg: DqnConfig, seed: int, meta: dict | None = None) -> Path:
    path = Path(path)
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "seed": seed,
        "config": asdict(cfg),
        "network": net.to_dict(),
        "meta": meta or {},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[MLP, DqnConfig, int, dict]:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise AgentError(f"{path}: unsupported checkpoint format {doc.get('format_version')}")
    cfg_doc = dict(doc["config"])
    cfg_doc["hidden_sizes"] = tuple(cfg_doc["hidden_sizes"])
    cfg = DqnConfig(**cfg_doc)
    return MLP.from_dict(doc["network"]), cfg, int(doc["seed"]), doc.get("meta", {})
