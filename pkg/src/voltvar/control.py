"""Default (non-RL) local device control.

Capacitors follow voltage hysteresis: switch on below ``v_on``, off above
``v_off``, hold otherwise.  Regulators run a line-drop-compensated band
controller moving at most one tap per control round.  ``static_control_solve``
alternates a power-flow solve with one control round for every device until
nothing changes, treating each timestamp independently.
"""

from __future__ import annotations

from dataclasses import dataclass

from .feeder import Capacitor, Feeder, Regulator, VOLT_BASE_120
from .powerflow import DevicePositions, GridState, InjectionProfile, SolverConfig, solve


@dataclass(frozen=True)
class ControlDecision:
    new_positions: DevicePositions
    changed: bool


@dataclass(frozen=True)
class StaticControlResult:
    """Joint fixed point of local control and power flow for one timestamp.

    ``settled`` is False when the device/power-flow loop hit the round limit
    without reaching a fixed point (oscillating setpoints); the last iterate
    is returned in that case.
    """

    state: GridState
    positions: DevicePositions
    rounds: int
    settled: bool


def capacitor_step(cap: Capacitor, v_local_120: float, status: int) -> int:
    """Hysteresis rule on the local 120 V-base voltage."""
    if v_local_120 < cap.v_on:
        return 1
    if v_local_120 > cap.v_off:
        return 0
    return status


def _regulator_measurement(feeder: Feeder, reg: Regulator, state: GridState) -> tuple[float, float, float]:
    """(monitored voltage, p, q) for a regulator.

    Field regulators monitor the downstream side of their line and its
    sending-end flows; the substation regulator monitors bus 1 and the total
    head-of-feeder flow.
    """
    if reg.line_ref is None:
        v_mon = state.v[0]
        head = feeder.children[1]
        p = sum(state.p_flow[k] for k in head)
        q = sum(state.q_flow[k] for k in head)
    else:
        k = feeder.line_index[tuple(reg.line_ref)]
        v_mon = state.v[feeder.bus_pos(feeder.lines[k].to_bus)]
        p = state.p_flow[k]
        q = state.q_flow[k]
    return v_mon, p, q


def compensated_voltage(feeder: Feeder, reg: Regulator, state: GridState) -> float:
    """LDC-compensated voltage on the 120 V base.

    The line current is split into in-phase and quadrature components from
    the flow's p/q angle (I_re = p/V, I_im = q/V, lagging positive), so the
    estimated drop is ldc_r*I_re + ldc_x*I_im volts.
    """
    v_mon, p, q = _regulator_measurement(feeder, reg, state)
    i_re = p / v_mon
    i_im = q / v_mon
    return v_mon * VOLT_BASE_120 - (reg.ldc_r * i_re + reg.ldc_x * i_im)


def regulator_step(feeder: Feeder, reg: Regulator, state: GridState, tap: int) -> int:
    """Move the tap at most one step toward bringing the compensated voltage
    into the control band; hold inside the band or at a range limit."""
    v_comp = compensated_voltage(feeder, reg, state)
    lo = reg.band_center_v - reg.bandwidth_v / 2.0
    hi = reg.band_center_v + reg.bandwidth_v / 2.0
    if v_comp < lo and tap < reg.max_tap:
        return tap + 1
    if v_comp > hi and tap > reg.min_tap:
        return tap - 1
    return tap


def control_round(feeder: Feeder, state: GridState, pos: DevicePositions) -> ControlDecision:
    """One pass of every device controller against a solved state.

    Scan order is fixed (regulators then capacitors, declaration order) so
    tie behavior is reproducible.
    """
    taps = tuple(
        regulator_step(feeder, reg, state, pos.taps[k])
        for k, reg in enumerate(feeder.regulators)
    )
    caps = tuple(
        capacitor_step(cap, state.v120(cap.bus_ref), pos.cap_status[k])
        for k, cap in enumerate(feeder.capacitors)
    )
    new = DevicePositions(taps=taps, cap_status=caps)
    return ControlDecision(new_positions=new, changed=new != pos)


def static_control_solve(
    feeder: Feeder,
    inj: InjectionProfile,
    initial_pos: DevicePositions,
    cfg: SolverConfig = SolverConfig(),
) -> StaticControlResult:
    """Iterate solve + control rounds to a joint fixed point.

    Each call is an independent snapshot analysis: the only memory carried
    across timestamps is whatever the caller passes as ``initial_pos``.
    """
    pos = initial_pos
    state = solve(feeder, inj, pos, cfg)
    rounds = 0
    settled = False
    while rounds < cfg.max_control_rounds:
        rounds += 1
        decision = control_round(feeder, state, pos)
        if not decision.changed:
            settled = True
            break
        pos = decision.new_positions
        state = solve(feeder, inj, pos, cfg)
    return StaticControlResult(state=state, positions=pos, rounds=rounds, settled=settled)
