"""Shared construction helpers for the test suite."""

from __future__ import annotations

import numpy as np

from voltvar.feeder import Bus, Capacitor, Feeder, Line, LoadPoint, Regulator, validate_feeder
from voltvar.powerflow import DevicePositions, InjectionProfile


def two_bus_feeder(r=0.01, x=0.02, m_cap=None, with_reg=False):
    caps = (Capacitor(bus_ref=2, m_cap=m_cap),) if m_cap else ()
    regs = (
        (Regulator(line_ref=None, is_substation_reg=True),) if with_reg else ()
    )
    feeder = Feeder(
        name="two_bus",
        mva_base=1.0,
        kv_base=4.16,
        buses=(Bus(1, 4.16, True), Bus(2, 4.16)),
        lines=(Line(1, 2, r, x),),
        regulators=regs,
        capacitors=caps,
        load_points=(LoadPoint(bus_ref=2, p_snapshot=0.1, q_snapshot=0.05),),
    )
    validate_feeder(feeder)
    return feeder


def random_radial_feeder(rng: np.random.Generator, n_max=5, with_devices=True):
    """Small random tree with sane device parameters (no oscillating
    setpoints: hysteresis gap wide relative to capacitor voltage jumps)."""
    n = int(rng.integers(2, n_max + 1))
    lines = []
    for child in range(2, n + 1):
        parent = int(rng.integers(1, child))
        r = float(rng.uniform(0.001, 0.05))
        x = float(rng.uniform(0.001, 0.05))
        lines.append(Line(parent, child, r, x))
    regulators = ()
    capacitors = ()
    if with_devices and rng.random() < 0.7:
        regulators = (
            Regulator(
                line_ref=None,
                is_substation_reg=True,
                band_center_v=float(rng.uniform(119.0, 123.0)),
                bandwidth_v=2.0,
            ),
        )
    if with_devices and n >= 3 and rng.random() < 0.7:
        bus = int(rng.integers(2, n + 1))
        v_on = float(rng.uniform(115.0, 118.0))
        capacitors = (
            Capacitor(bus_ref=bus, m_cap=float(rng.uniform(0.01, 0.05)), v_on=v_on, v_off=v_on + 5.0),
        )
    loads = tuple(
        LoadPoint(
            bus_ref=b,
            p_snapshot=float(rng.uniform(0.0, 0.3)),
            q_snapshot=float(rng.uniform(0.0, 0.15)),
            meter_group=i,
        )
        for i, b in enumerate(range(2, n + 1))
    )
    feeder = Feeder(
        name=f"random_{n}",
        mva_base=1.0,
        kv_base=4.16,
        buses=tuple(Bus(i, 4.16, i == 1) for i in range(1, n + 1)),
        lines=tuple(lines),
        regulators=regulators,
        capacitors=capacitors,
        load_points=loads,
    )
    validate_feeder(feeder)
    return feeder


def random_positions(rng: np.random.Generator, feeder) -> DevicePositions:
    taps = tuple(int(rng.integers(r.min_tap, r.max_tap + 1)) for r in feeder.regulators)
    caps = tuple(int(rng.integers(0, 2)) for _ in feeder.capacitors)
    return DevicePositions(taps=taps, cap_status=caps)


def random_injections(rng: np.random.Generator, feeder) -> InjectionProfile:
    p = np.zeros(feeder.n_buses)
    q = np.zeros(feeder.n_buses)
    for lp in feeder.load_points:
        p[lp.bus_ref - 1] += float(rng.uniform(0.0, 0.3))
        q[lp.bus_ref - 1] += float(rng.uniform(0.0, 0.15))
    return InjectionProfile(p=p, q=q)
