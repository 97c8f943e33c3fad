"""Balanced branch-flow (DistFlow) solver for radial feeders.

State variables per line (i, j): sending-end flows p, q and squared current
magnitude l = (p^2 + q^2) / V_i^2.  Voltages satisfy, across each line,

    (V_j / u)^2 = V_i^2 - 2 (r p + x q) + (r^2 + x^2) l

with u the turns ratio of a regulator on that line (1 otherwise).  The
substation voltage is pinned to 1 + tap*step by the substation regulator.
Capacitors inject q = status * m_cap * V^2 at their bus, recomputed from the
latest voltage each sweep so the coupling is part of the fixed point.

The solver is a backward/forward sweep: the backward pass accumulates line
flows from the leaves using the current loss estimates, the forward pass
updates squared currents and voltages from the root down.  Iterates until
the max-norm residual of the full equation set is below tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PositionRangeError, VoltVarError
from .feeder import Feeder, tap_to_ratio

# residual must be non-decreasing this many times before damping kicks in
_OSC_WINDOW = 5
_DAMP_FALLBACK = 0.5
_V_FLOOR_SQ = 1e-6


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-10
    max_iter: int = 200
    damping: float = 1.0
    max_control_rounds: int = 40


@dataclass(frozen=True)
class InjectionProfile:
    """Net load per bus (p.u., positive = consumption), arrays indexed by
    bus id - 1.  The substation entry must be zero."""

    p: np.ndarray
    q: np.ndarray

    @staticmethod
    def from_loads(feeder: Feeder, p_by_load=None, q_by_load=None) -> "InjectionProfile":
        """Aggregate per-load values onto buses; defaults to snapshot loads."""
        p = np.zeros(feeder.n_buses)
        q = np.zeros(feeder.n_buses)
        for k, lp in enumerate(feeder.load_points):
            pos = feeder.bus_pos(lp.bus_ref)
            p[pos] += lp.p_snapshot if p_by_load is None else p_by_load[k]
            q[pos] += lp.q_snapshot if q_by_load is None else q_by_load[k]
        return InjectionProfile(p=p, q=q)


@dataclass(frozen=True)
class DevicePositions:
    """Integer tap per regulator and 0/1 status per capacitor, both in
    feeder declaration order."""

    taps: tuple[int, ...] = ()
    cap_status: tuple[int, ...] = ()

    def as_action(self) -> list[int]:
        return list(self.taps) + list(self.cap_status)


@dataclass(frozen=True)
class GridState:
    v: np.ndarray
    p_flow: np.ndarray
    q_flow: np.ndarray
    l: np.ndarray
    total_loss: float
    positions: DevicePositions
    converged: bool
    iterations: int

    def v120(self, bus_id: int) -> float:
        return self.v[bus_id - 1] * 120.0


def validate_positions(feeder: Feeder, pos: DevicePositions) -> None:
    if len(pos.taps) != len(feeder.regulators):
        raise PositionRangeError(
            f"expected {len(feeder.regulators)} taps, got {len(pos.taps)}"
        )
    if len(pos.cap_status) != len(feeder.capacitors):
        raise PositionRangeError(
            f"expected {len(feeder.capacitors)} capacitor statuses, got {len(pos.cap_status)}"
        )
    for k, (reg, tap) in enumerate(zip(feeder.regulators, pos.taps)):
        if tap < reg.min_tap or tap > reg.max_tap:
            raise PositionRangeError(
                f"regulator {k}: tap {tap} outside [{reg.min_tap}, {reg.max_tap}]"
            )
    for k, st in enumerate(pos.cap_status):
        if st not in (0, 1):
            raise PositionRangeError(f"capacitor {k}: status {st} not in {{0, 1}}")


def zero_positions(feeder: Feeder) -> DevicePositions:
    return DevicePositions(
        taps=tuple(0 for _ in feeder.regulators),
        cap_status=tuple(0 for _ in feeder.capacitors),
    )


def substation_voltage(feeder: Feeder, pos: DevicePositions) -> float:
    """Substation bus voltage: 1 + tap*step of the substation regulator,
    or 1.0 p.u. when the feeder has none."""
    for k, reg in enumerate(feeder.regulators):
        if reg.is_substation_reg:
            return 1.0 + pos.taps[k] * reg.step
    return 1.0


def line_ratios(feeder: Feeder, pos: DevicePositions) -> np.ndarray:
    """Per-line turns ratio (1.0 except on field-regulator lines)."""
    u = np.ones(len(feeder.lines))
    for k, reg in enumerate(feeder.regulators):
        if reg.line_ref is not None:
            u[feeder.line_index[tuple(reg.line_ref)]] = tap_to_ratio(reg, pos.taps[k])
    return u


def _cap_injection(feeder: Feeder, pos: DevicePositions, v: np.ndarray) -> np.ndarray:
    q_cap = np.zeros(feeder.n_buses)
    for cap, status in zip(feeder.capacitors, pos.cap_status):
        if status:
            pos_i = feeder.bus_pos(cap.bus_ref)
            q_cap[pos_i] += cap.m_cap * v[pos_i] ** 2
    return q_cap


def solve(
    feeder: Feeder,
    inj: InjectionProfile,
    pos: DevicePositions,
    cfg: SolverConfig = SolverConfig(),
) -> GridState:
    """Solve the branch-flow equations; never raises on divergence, returns
    the best iterate with converged=False instead."""
    validate_positions(feeder, pos)
    n = feeder.n_buses
    nl = len(feeder.lines)
    if inj.p.shape != (n,) or inj.q.shape != (n,):
        raise VoltVarError(f"injection arrays must have shape ({n},)")

    v1 = substation_voltage(feeder, pos)
    u = line_ratios(feeder, pos)
    r = np.array([ln.r for ln in feeder.lines])
    x = np.array([ln.x for ln in feeder.lines])
    topo = feeder.topo_lines
    from_pos = np.array([feeder.bus_pos(ln.from_bus) for ln in feeder.lines], dtype=int)
    to_pos = np.array([feeder.bus_pos(ln.to_bus) for ln in feeder.lines], dtype=int)

    v = np.full(n, v1)
    l = np.zeros(nl)
    p_flow = np.zeros(nl)
    q_flow = np.zeros(nl)

    damping = cfg.damping
    res_history: list[float] = []
    converged = False
    iterations = 0

    # divergence shows up as numpy overflow before the finite check runs
    with np.errstate(over="ignore", invalid="ignore"):
        for iteration in range(1, cfg.max_iter + 1):
            iterations = iteration
            prev = (v.copy(), p_flow.copy(), q_flow.copy(), l.copy())
            q_cap = _cap_injection(feeder, pos, v)
            p_net = inj.p
            q_net = inj.q - q_cap

            # backward: accumulate sending-end flows leaf-to-root, losses from
            # the previous iterate's l
            p_acc = np.zeros(n)
            q_acc = np.zeros(n)
            for k in reversed(topo):
                j = to_pos[k]
                p_flow[k] = p_net[j] + p_acc[j] + r[k] * l[k]
                q_flow[k] = q_net[j] + q_acc[j] + x[k] * l[k]
                p_acc[from_pos[k]] += p_flow[k]
                q_acc[from_pos[k]] += q_flow[k]

            # forward: refresh l from the already-updated upstream voltage,
            # then step the voltage across the line
            v_new = v.copy()
            v_new[0] = v1
            for k in topo:
                i, j = from_pos[k], to_pos[k]
                vi_sq = v_new[i] ** 2
                l[k] = (p_flow[k] ** 2 + q_flow[k] ** 2) / vi_sq
                vj_sq = vi_sq - 2.0 * (r[k] * p_flow[k] + x[k] * q_flow[k]) + (r[k] ** 2 + x[k] ** 2) * l[k]
                v_new[j] = u[k] * np.sqrt(max(vj_sq, _V_FLOOR_SQ))

            if not (
                np.isfinite(v_new).all()
                and np.isfinite(p_flow).all()
                and np.isfinite(q_flow).all()
            ):
                # blown-up iterate: keep the last finite one, flag divergence;
                # a non-converged result always reports iterations == max_iter
                v, p_flow, q_flow, l = prev
                iterations = cfg.max_iter
                break

            v = damping * v_new + (1.0 - damping) * v if damping != 1.0 else v_new

            state = GridState(
                v=v,
                p_flow=p_flow.copy(),
                q_flow=q_flow.copy(),
                l=l.copy(),
                total_loss=float(np.dot(r, l)),
                positions=pos,
                converged=False,
                iterations=iteration,
            )
            res = residual(feeder, inj, pos, state)
            res_history.append(res)
            if res <= cfg.tolerance:
                converged = True
                break
            if (
                damping == 1.0
                and len(res_history) > _OSC_WINDOW
                and all(
                    res_history[-m] >= res_history[-m - 1] * (1 - 1e-12)
                    for m in range(1, _OSC_WINDOW + 1)
                )
            ):
                damping = _DAMP_FALLBACK

    return GridState(
        v=v,
        p_flow=p_flow,
        q_flow=q_flow,
        l=l,
        total_loss=float(np.dot(r, l)),
        positions=pos,
        converged=converged,
        iterations=iterations,
    )


def residual(
    feeder: Feeder,
    inj: InjectionProfile,
    pos: DevicePositions,
    state: GridState,
) -> float:
    """Max-norm violation of the full branch-flow equation set at a
    candidate state; zero iff the state is an exact solution."""
    v = state.v
    worst = abs(v[0] - substation_voltage(feeder, pos))

    u = line_ratios(feeder, pos)
    q_cap = _cap_injection(feeder, pos, v)
    p_in = np.zeros(feeder.n_buses)
    q_in = np.zeros(feeder.n_buses)
    p_out = np.zeros(feeder.n_buses)
    q_out = np.zeros(feeder.n_buses)

    for k, ln in enumerate(feeder.lines):
        i = feeder.bus_pos(ln.from_bus)
        j = feeder.bus_pos(ln.to_bus)
        p, q, l = state.p_flow[k], state.q_flow[k], state.l[k]
        # squared-current definition
        worst = max(worst, abs(l - (p * p + q * q) / v[i] ** 2))
        # voltage drop with the regulator ratio on the downstream side
        worst = max(
            worst,
            abs(
                (v[j] / u[k]) ** 2
                - v[i] ** 2
                + 2.0 * (ln.r * p + ln.x * q)
                - (ln.r**2 + ln.x**2) * l
            ),
        )
        p_in[j] += p - ln.r * l
        q_in[j] += q - ln.x * l
        p_out[i] += p
        q_out[i] += q

    for pos_i in range(1, feeder.n_buses):
        worst = max(worst, abs(p_in[pos_i] - p_out[pos_i] - inj.p[pos_i]))
        worst = max(worst, abs(q_in[pos_i] - q_out[pos_i] - inj.q[pos_i] + q_cap[pos_i]))
    return float(worst)
