"""Gym-like non-episodic Volt-VAR control environment.

The environment advances through a half-hourly load series.  Each step the
controller sets every device position directly, the branch-flow equations
are solved at that timestamp's injections, and the reward combines voltage
deviation (or band-violation counts), network loss, and switching cost.

Observations support three formulations:

* option 1: substation SCADA (previous step) plus per-meter AMI readings
  from the previous step,
* option 2: substation SCADA only,
* option 3: substation SCADA plus AMI readings from the same half-hour of
  the previous day (day-delayed meters).

All power features are normalized by their time averages over the default
control pre-roll (48 warmup steps replaying the first day, then the full
horizon under local device control); the same pre-roll provides the initial
device positions, the option-3 history, and the default-control baseline
trajectory used by benchmark reward deltas and the offline dataset.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import static_control_solve
from .errors import EnvError, PositionRangeError
from .feeder import Feeder
from .loads import LoadSeries, round_ami
from .powerflow import (
    DevicePositions,
    GridState,
    InjectionProfile,
    SolverConfig,
    solve,
    zero_positions,
)

DATASET_FORMAT_VERSION = 1
WARMUP_STEPS = 48
DAY_STEPS = 48
WEEK_STEPS = 336
V_BAND_LOW = 0.95
V_BAND_HIGH = 1.05
DEFAULT_BETA = (0.5, 1.0, 0.1)


@dataclass(frozen=True)
class RewardBreakdown:
    total: float
    v_term: float
    loss_term: float
    switch_term: float
    max_violation: float


@dataclass(frozen=True)
class LayoutSlice:
    name: str
    start: int
    length: int


@dataclass(frozen=True)
class StepInfo:
    breakdown: RewardBreakdown
    converged: bool
    iterations: int
    total_loss: float
    v_min: float
    v_max: float
    reward_default: float
    positions: DevicePositions


@dataclass(frozen=True)
class Transition:
    t: int
    obs: np.ndarray
    action: tuple[int, ...]
    reward: float
    next_obs: np.ndarray
    v120: np.ndarray
    positions: DevicePositions


@dataclass
class EnvConfig:
    feeder: Feeder
    load_series: LoadSeries
    state_option: int = 2
    reward_option: int = 1
    beta: tuple[float, float, float] = DEFAULT_BETA
    horizon: int | None = None
    meter_group_size: int = 1
    meters: tuple[int, ...] | None = None  # load indices; default: all
    solver: SolverConfig = field(default_factory=SolverConfig)


def switching_cost(prev: DevicePositions, new: DevicePositions) -> int:
    taps = sum(abs(a - b) for a, b in zip(prev.taps, new.taps))
    toggles = sum(abs(a - b) for a, b in zip(prev.cap_status, new.cap_status))
    return taps + toggles


def reward_terms(
    option: int,
    v: np.ndarray,
    total_loss: float,
    prev_pos: DevicePositions,
    new_pos: DevicePositions,
    meter_positions: np.ndarray,
    beta: tuple[float, float, float] = DEFAULT_BETA,
) -> RewardBreakdown:
    """Per-term reward for one solved step.

    Options 1-2 penalize sum |V - 1| over the meter buses; options 3-4 count
    meters strictly outside the +/-5% service band.  Options 2 and 4 drop
    the loss term.  The total is evaluated as (voltage & switching part)
    minus beta2*loss so option pairs differ by exactly beta2*loss.
    """
    if option not in (1, 2, 3, 4):
        raise EnvError(f"reward_option must be 1..4, got {option}")
    vm = v[meter_positions]
    if option in (1, 2):
        v_term = float(np.abs(vm - 1.0).sum())
    else:
        v_term = float((vm > V_BAND_HIGH).sum() + (vm < V_BAND_LOW).sum())
    loss_term = float(total_loss) if option in (1, 3) else 0.0
    switch_term = float(switching_cost(prev_pos, new_pos))
    beta1, beta2, beta3 = beta
    total = (-beta1 * v_term - beta3 * switch_term) - beta2 * loss_term
    max_violation = float(max(0.0, v.max() - V_BAND_HIGH, V_BAND_LOW - v.min()))
    return RewardBreakdown(
        total=total,
        v_term=v_term,
        loss_term=loss_term,
        switch_term=switch_term,
        max_violation=max_violation,
    )


def time_features(t: int) -> np.ndarray:
    """Sin-cos encoding of the global step index at daily and weekly periods."""
    wd = 2.0 * np.pi * t / DAY_STEPS
    ww = 2.0 * np.pi * t / WEEK_STEPS
    return np.array([np.cos(wd), np.sin(wd), np.cos(ww), np.sin(ww)])


@dataclass
class _Rollout:
    """Default-control trajectory over warmup + horizon."""

    warmup_states: list[GridState]
    warmup_positions: list[DevicePositions]
    states: list[GridState]
    positions: list[DevicePositions]
    rewards: list[float]
    breakdowns: list[RewardBreakdown]
    unsettled_steps: list[int]


class VoltVarEnv:
    """Non-episodic MDP over a feeder and a load series.

    ``reset`` returns the t=0 observation; ``step`` applies a full device
    position vector and returns (next observation, reward, StepInfo).  There
    is no terminal signal; stepping past the horizon raises EnvError, which
    is a harness condition rather than an MDP terminal.
    """

    def __init__(self, cfg: EnvConfig):
        if cfg.state_option not in (1, 2, 3):
            raise EnvError(f"state_option must be 1, 2 or 3, got {cfg.state_option}")
        if cfg.reward_option not in (1, 2, 3, 4):
            raise EnvError(f"reward_option must be 1..4, got {cfg.reward_option}")
        series_len = cfg.load_series.horizon
        horizon = cfg.horizon if cfg.horizon is not None else series_len
        if horizon < 1:
            raise EnvError("empty horizon")
        if cfg.load_series.n_loads != len(cfg.feeder.load_points):
            raise EnvError(
                f"load series has {cfg.load_series.n_loads} loads, feeder has "
                f"{len(cfg.feeder.load_points)}"
            )
        if series_len < horizon or series_len < WARMUP_STEPS:
            raise EnvError(
                f"insufficient series length {series_len}: need >= {WARMUP_STEPS} "
                f"warmup steps and >= horizon {horizon}"
            )
        self.cfg = cfg
        self.feeder = cfg.feeder
        self.horizon = horizon
        self.meters = cfg.meters if cfg.meters is not None else tuple(range(len(cfg.feeder.load_points)))
        for m in self.meters:
            if not 0 <= m < len(cfg.feeder.load_points):
                raise EnvError(f"meter index {m} out of range")
        self._meter_bus_pos = np.array(
            sorted({cfg.feeder.bus_pos(cfg.feeder.load_points[m].bus_ref) for m in self.meters}),
            dtype=int,
        )
        self._groups = self._build_groups()
        self._layout = self._build_layout()
        self._rollout: _Rollout | None = None
        self._norm: dict[str, np.ndarray] | None = None
        self._t: int | None = None
        self._positions: DevicePositions | None = None
        self._head_prev: tuple[float, float] | None = None

    # ---- static structure -------------------------------------------------

    def _build_groups(self) -> list[list[int]]:
        """AMI feature groups (lists of load indices).

        With meter_group_size <= 1 every metered load is its own feature;
        otherwise loads sharing a meter_group key are averaged into one
        feature, groups ordered by key.
        """
        if self.cfg.meter_group_size <= 1:
            return [[m] for m in self.meters]
        by_key: dict[int, list[int]] = {}
        for m in self.meters:
            by_key.setdefault(self.feeder.load_points[m].meter_group, []).append(m)
        return [by_key[k] for k in sorted(by_key)]

    def _build_layout(self) -> list[LayoutSlice]:
        k_devices = len(self.feeder.regulators) + len(self.feeder.capacitors)
        slices: list[tuple[str, int]] = [("scada_p", 1), ("scada_q", 1)]
        if self.cfg.state_option in (1, 3):
            g = len(self._groups)
            slices += [("ami_p", g), ("ami_q", g)]
        slices += [("taps", k_devices), ("time_enc", 4)]
        out = []
        start = 0
        for name, length in slices:
            out.append(LayoutSlice(name=name, start=start, length=length))
            start += length
        return out

    @property
    def observation_layout(self) -> list[LayoutSlice]:
        return list(self._layout)

    @property
    def obs_dim(self) -> int:
        last = self._layout[-1]
        return last.start + last.length

    def action_devices(self) -> list[dict]:
        """Controllable devices in action order: all regulators, then
        controllable capacitors.  Coordinates are positions (signed taps,
        0/1 statuses)."""
        devices = []
        for k, reg in enumerate(self.feeder.regulators):
            devices.append(
                {"kind": "regulator", "index": k, "low": reg.min_tap, "high": reg.max_tap}
            )
        for k, cap in enumerate(self.feeder.capacitors):
            if cap.controllable:
                devices.append({"kind": "capacitor", "index": k, "low": 0, "high": 1})
        return devices

    @property
    def action_dim(self) -> int:
        return len(self.action_devices())

    # ---- default-control pre-roll ------------------------------------------

    def _series_pq(self, g: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-load injections at global step g (warmup steps are negative
        and replay the first day)."""
        idx = g if g >= 0 else g + WARMUP_STEPS
        return self.cfg.load_series.p[:, idx], self.cfg.load_series.q[:, idx]

    def injection_at(self, g: int) -> InjectionProfile:
        p, q = self._series_pq(g)
        return InjectionProfile.from_loads(self.feeder, p, q)

    def _ensure_rollout(self) -> _Rollout:
        if self._rollout is not None:
            return self._rollout
        feeder, cfg = self.feeder, self.cfg
        pos = zero_positions(feeder)
        warmup_states: list[GridState] = []
        warmup_positions: list[DevicePositions] = []
        unsettled: list[int] = []
        for w in range(WARMUP_STEPS):
            res = static_control_solve(feeder, self.injection_at(w - WARMUP_STEPS), pos, cfg.solver)
            if not res.settled:
                unsettled.append(w - WARMUP_STEPS)
            pos = res.positions
            warmup_states.append(res.state)
            warmup_positions.append(pos)
        states: list[GridState] = []
        positions: list[DevicePositions] = []
        rewards: list[float] = []
        breakdowns: list[RewardBreakdown] = []
        for t in range(self.horizon):
            prev = pos
            res = static_control_solve(feeder, self.injection_at(t), prev, cfg.solver)
            if not res.settled:
                unsettled.append(t)
            pos = res.positions
            rb = reward_terms(
                cfg.reward_option,
                res.state.v,
                res.state.total_loss,
                prev,
                pos,
                self._meter_bus_pos,
                cfg.beta,
            )
            states.append(res.state)
            positions.append(pos)
            rewards.append(rb.total)
            breakdowns.append(rb)
        self._rollout = _Rollout(
            warmup_states=warmup_states,
            warmup_positions=warmup_positions,
            states=states,
            positions=positions,
            rewards=rewards,
            breakdowns=breakdowns,
            unsettled_steps=unsettled,
        )
        self._compute_normalization()
        return self._rollout

    @staticmethod
    def _head_flows(feeder: Feeder, state: GridState) -> tuple[float, float]:
        head = feeder.children[1]
        return (
            float(sum(state.p_flow[k] for k in head)),
            float(sum(state.q_flow[k] for k in head)),
        )

    def _compute_normalization(self) -> None:
        roll = self._rollout
        assert roll is not None
        heads = [self._head_flows(self.feeder, s) for s in roll.warmup_states + roll.states]
        head_arr = np.array(heads)
        scada_mean = head_arr.mean(axis=0)
        scada_mean[scada_mean == 0.0] = 1.0

        series = self.cfg.load_series
        pre = np.concatenate([np.arange(WARMUP_STEPS), np.arange(self.horizon)])
        gp_means = []
        gq_means = []
        for group in self._groups:
            rows = np.array(group, dtype=int)
            p_mean = float(series.p[rows][:, pre].mean())
            q_mean = float(series.q[rows][:, pre].mean())
            gp_means.append(p_mean if p_mean != 0.0 else 1.0)
            gq_means.append(q_mean if q_mean != 0.0 else 1.0)
        self._norm = {
            "scada": scada_mean,
            "ami_p": np.array(gp_means),
            "ami_q": np.array(gq_means),
        }

    def _group_rows(self, g: int) -> np.ndarray:
        return np.array(self._groups[g], dtype=int)

    # ---- observations -------------------------------------------------------

    def _ami_features(self, g_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Group-averaged, mean-normalized AMI injections at global step g."""
        p, q = self._series_pq(g_index)
        assert self._norm is not None
        gp = np.array([p[self._group_rows(g)].mean() for g in range(len(self._groups))])
        gq = np.array([q[self._group_rows(g)].mean() for g in range(len(self._groups))])
        return gp / self._norm["ami_p"], gq / self._norm["ami_q"]

    def _build_obs(
        self, t: int, head_prev: tuple[float, float], pos_prev: DevicePositions
    ) -> np.ndarray:
        assert self._norm is not None
        scada = self._norm["scada"]
        parts = [np.array([head_prev[0] / scada[0], head_prev[1] / scada[1]])]
        if self.cfg.state_option == 1:
            ap, aq = self._ami_features(t - 1)
            parts += [ap, aq]
        elif self.cfg.state_option == 3:
            ap, aq = self._ami_features(t - DAY_STEPS)
            parts += [ap, aq]
        parts.append(np.array(list(pos_prev.taps) + list(pos_prev.cap_status), dtype=float))
        parts.append(time_features(t))
        return np.concatenate(parts)

    def _default_obs(self, t: int) -> np.ndarray:
        """Observation along the default-control trajectory."""
        roll = self._ensure_rollout()
        if t == 0:
            head = self._head_flows(self.feeder, roll.warmup_states[-1])
            pos = roll.warmup_positions[-1]
        else:
            head = self._head_flows(self.feeder, roll.states[t - 1])
            pos = roll.positions[t - 1]
        return self._build_obs(t, head, pos)

    # ---- MDP interface -------------------------------------------------------

    def reset(self) -> np.ndarray:
        roll = self._ensure_rollout()
        self._t = 0
        self._positions = roll.warmup_positions[-1]
        self._head_prev = self._head_flows(self.feeder, roll.warmup_states[-1])
        return self._build_obs(0, self._head_prev, self._positions)

    def _positions_from_action(self, action) -> DevicePositions:
        devices = self.action_devices()
        action = list(action)
        if len(action) != len(devices):
            raise PositionRangeError(
                f"action length {len(action)} != {len(devices)} controllable devices"
            )
        taps = list(self._positions.taps)
        caps = list(self._positions.cap_status)
        for coord, dev in zip(action, devices):
            coord = int(coord)
            if coord < dev["low"] or coord > dev["high"]:
                raise PositionRangeError(
                    f"{dev['kind']} {dev['index']}: position {coord} outside "
                    f"[{dev['low']}, {dev['high']}]"
                )
            if dev["kind"] == "regulator":
                taps[dev["index"]] = coord
            else:
                caps[dev["index"]] = coord
        return DevicePositions(taps=tuple(taps), cap_status=tuple(caps))

    def step(self, action) -> tuple[np.ndarray, float, StepInfo]:
        if self._t is None:
            raise EnvError("step before reset")
        t = self._t
        if t >= self.horizon:
            raise EnvError(f"load series exhausted at t={t} (horizon {self.horizon})")
        roll = self._ensure_rollout()
        new_pos = self._positions_from_action(action)
        state = solve(self.feeder, self.injection_at(t), new_pos, self.cfg.solver)
        rb = reward_terms(
            self.cfg.reward_option,
            state.v,
            state.total_loss,
            self._positions,
            new_pos,
            self._meter_bus_pos,
            self.cfg.beta,
        )
        info = StepInfo(
            breakdown=rb,
            converged=state.converged,
            iterations=state.iterations,
            total_loss=state.total_loss,
            v_min=float(state.v.min()),
            v_max=float(state.v.max()),
            reward_default=roll.rewards[t],
            positions=new_pos,
        )
        self._positions = new_pos
        self._head_prev = self._head_flows(self.feeder, state)
        self._t = t + 1
        next_obs = self._build_obs(self._t, self._head_prev, self._positions)
        return next_obs, rb.total, info

    # ---- default-control accessors for benchmarking --------------------------

    def default_rewards(self) -> list[float]:
        return list(self._ensure_rollout().rewards)

    def default_positions(self) -> list[DevicePositions]:
        return list(self._ensure_rollout().positions)

    def default_states(self) -> list[GridState]:
        return list(self._ensure_rollout().states)


# ---- offline dataset ----------------------------------------------------------


def dataset_meta(env: VoltVarEnv) -> dict:
    """Sidecar descriptor making the transition log self-describing."""
    roll = env._ensure_rollout()
    assert env._norm is not None
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "feeder": env.feeder.name,
        "n_buses": env.feeder.n_buses,
        "state_option": env.cfg.state_option,
        "reward_option": env.cfg.reward_option,
        "beta": list(env.cfg.beta),
        "horizon": env.horizon,
        "meter_group_size": env.cfg.meter_group_size,
        "meters": list(env.meters),
        "groups": [list(g) for g in env._groups],
        "layout": [{"name": s.name, "start": s.start, "length": s.length} for s in env.observation_layout],
        "obs_dim": env.obs_dim,
        "action_devices": env.action_devices(),
        "normalization": {
            "scada": [float(x) for x in env._norm["scada"]],
            "ami_p": [float(x) for x in env._norm["ami_p"]],
            "ami_q": [float(x) for x in env._norm["ami_q"]],
        },
        "warmup": {
            "steps": WARMUP_STEPS,
            "source": "first-day-replay",
            "initial_positions": "all taps 0, all capacitors off",
        },
        "policy": "default-control",
        "unsettled_steps": list(roll.unsettled_steps),
    }


def _transition_header(env: VoltVarEnv) -> list[str]:
    cols = ["t"]
    cols += [f"obs_{i}" for i in range(env.obs_dim)]
    cols += [f"action_{i}" for i in range(env.action_dim)]
    cols += ["reward"]
    cols += [f"next_obs_{i}" for i in range(env.obs_dim)]
    cols += [f"v120_bus_{b.id}" for b in env.feeder.buses]
    cols += [f"tap_reg_{k}" for k in range(len(env.feeder.regulators))]
    cols += [f"tap_cap_{k}" for k in range(len(env.feeder.capacitors))]
    return cols


def default_transitions(env: VoltVarEnv):
    """Transitions of the default-control trajectory, chained so that
    record t's next_obs equals record t+1's obs."""
    roll = env._ensure_rollout()
    obs = [env._default_obs(t) for t in range(env.horizon + 1)]
    devices = env.action_devices()
    out = []
    for t in range(env.horizon):
        pos = roll.positions[t]
        action = []
        for dev in devices:
            if dev["kind"] == "regulator":
                action.append(pos.taps[dev["index"]])
            else:
                action.append(pos.cap_status[dev["index"]])
        out.append(
            Transition(
                t=t,
                obs=obs[t],
                action=tuple(action),
                reward=roll.rewards[t],
                next_obs=obs[t + 1],
                v120=round_ami(roll.states[t].v * 120.0),
                positions=pos,
            )
        )
    return out


def write_transitions_csv(env: VoltVarEnv, transitions, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_transition_header(env))
        for tr in transitions:
            row = [tr.t]
            row += [repr(float(x)) for x in tr.obs]
            row += [int(a) for a in tr.action]
            row += [repr(float(tr.reward))]
            row += [repr(float(x)) for x in tr.next_obs]
            row += [repr(float(x)) for x in tr.v120]
            row += [int(x) for x in tr.positions.taps]
            row += [int(x) for x in tr.positions.cap_status]
            writer.writerow(row)
    return path


def generate_offline_dataset(env: VoltVarEnv, out_csv: str | Path) -> int:
    """Write the default-control transition log and its sidecar descriptor;
    returns the number of transitions (== horizon)."""
    out_csv = Path(out_csv)
    transitions = default_transitions(env)
    write_transitions_csv(env, transitions, out_csv)
    meta_path = out_csv.with_suffix(out_csv.suffix + ".meta.json")
    meta_path.write_text(json.dumps(dataset_meta(env), indent=2, sort_keys=True) + "\n")
    return len(transitions)


@dataclass(frozen=True)
class OfflineDataset:
    meta: dict
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray


def read_offline_dataset(csv_path: str | Path) -> OfflineDataset:
    csv_path = Path(csv_path)
    meta_path = csv_path.with_suffix(csv_path.suffix + ".meta.json")
    if not csv_path.exists() or not meta_path.exists():
        raise EnvError(f"offline dataset not found at {csv_path} (+ .meta.json)")
    meta = json.loads(meta_path.read_text())
    obs_dim = meta["obs_dim"]
    n_actions = len(meta["action_devices"])
    obs, actions, rewards, next_obs = [], [], [], []
    with csv_path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            k = 1
            obs.append([float(x) for x in row[k : k + obs_dim]])
            k += obs_dim
            actions.append([int(x) for x in row[k : k + n_actions]])
            k += n_actions
            rewards.append(float(row[k]))
            k += 1
            next_obs.append([float(x) for x in row[k : k + obs_dim]])
    return OfflineDataset(
        meta=meta,
        obs=np.array(obs),
        actions=np.array(actions, dtype=int),
        rewards=np.array(rewards),
        next_obs=np.array(next_obs),
    )
