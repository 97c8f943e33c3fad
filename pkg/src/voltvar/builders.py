"""Construction of the bundled test feeders.

``case13_balanced`` and ``case123_balanced`` are balanced single-phase
equivalents shipped as files under ``data/feeders/`` (the builders here are
their source of truth and regenerate them bit-for-bit).  The large
``case8500_synthetic`` feeder is not shipped as data; it is produced
deterministically by its seeded generator on demand.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import BenchError
from .feeder import (
    Bus,
    Capacitor,
    Feeder,
    Line,
    LoadPoint,
    Regulator,
    bundled_feeder_path,
    load_feeder,
    validate_feeder,
)

SYNTHETIC_LARGE_SEED = 8500


def build_case13() -> Feeder:
    """13-bus feeder: 9 loads, one gang-operated substation regulator,
    two 118/122 V capacitors.

    Seven loads cluster electrically close to the head; two sit at the end
    of a long express branch.  The default regulator program holds the head
    at the top of the service range so the far pair stays healthy, which
    overvolts the near cluster; coordinated control can center the cluster
    and support the branch with its capacitor instead.
    """
    buses = tuple(
        Bus(id=i, base_kv=4.16, is_substation=(i == 1)) for i in range(1, 14)
    )
    lines = (
        Line(1, 2, 0.002, 0.0048),
        Line(2, 3, 0.004, 0.009),
        Line(3, 4, 0.004, 0.009),
        Line(4, 5, 0.004, 0.009),
        Line(3, 6, 0.003, 0.0066),
        Line(4, 7, 0.0034, 0.0075),
        Line(5, 8, 0.0038, 0.0084),
        Line(1, 9, 0.01, 0.06),
        Line(9, 10, 0.0235, 0.0392),
        Line(10, 11, 0.0252, 0.042),
        Line(11, 12, 0.027, 0.0448),
        Line(12, 13, 0.0284, 0.0462),
    )
    regulators = (
        Regulator(
            line_ref=None,
            is_substation_reg=True,
            band_center_v=127.0,
            bandwidth_v=2.0,
        ),
    )
    capacitors = (
        Capacitor(bus_ref=9, m_cap=0.50, v_on=118.0, v_off=122.0),
        Capacitor(bus_ref=2, m_cap=0.30, v_on=118.0, v_off=122.0),
    )
    loads = (
        LoadPoint(bus_ref=2, p_snapshot=0.11, q_snapshot=0.088, meter_group=0),
        LoadPoint(bus_ref=3, p_snapshot=0.10, q_snapshot=0.08, meter_group=1),
        LoadPoint(bus_ref=4, p_snapshot=0.10, q_snapshot=0.08, meter_group=2),
        LoadPoint(bus_ref=5, p_snapshot=0.09, q_snapshot=0.072, meter_group=3),
        LoadPoint(bus_ref=6, p_snapshot=0.11, q_snapshot=0.088, meter_group=4),
        LoadPoint(bus_ref=7, p_snapshot=0.10, q_snapshot=0.08, meter_group=5),
        LoadPoint(bus_ref=8, p_snapshot=0.12, q_snapshot=0.096, meter_group=6),
        LoadPoint(bus_ref=11, p_snapshot=0.12, q_snapshot=0.096, meter_group=7),
        LoadPoint(bus_ref=13, p_snapshot=0.10, q_snapshot=0.08, meter_group=8),
    )
    feeder = Feeder(
        name="case13_balanced",
        mva_base=5.0,
        kv_base=4.16,
        buses=buses,
        lines=lines,
        regulators=regulators,
        capacitors=capacitors,
        load_points=loads,
    )
    validate_feeder(feeder)
    return feeder


def build_case123() -> Feeder:
    """123-bus feeder: 85 loads, 5 regulators (substation plus four field
    units, the last gang-controlled with LDC R=0.6, X=1.3), four 122/126 V
    capacitors."""
    rng = np.random.default_rng(123)
    n = 123
    trunk_len = 36

    lines: list[Line] = []
    # main trunk 1..36
    for i in range(1, trunk_len):
        r = round(float(rng.uniform(0.0013, 0.0030)), 6)
        lines.append(Line(i, i + 1, r, round(r * 2.2, 6)))
    # laterals fill the remaining buses, rooted at trunk buses round-robin
    next_bus = trunk_len + 1
    anchor_cycle = [4, 7, 10, 13, 16, 19, 22, 25, 28, 31, 34]
    a = 0
    while next_bus <= n:
        root = anchor_cycle[a % len(anchor_cycle)]
        a += 1
        length = int(rng.integers(2, 6))
        parent = root
        for _ in range(length):
            if next_bus > n:
                break
            r = round(float(rng.uniform(0.0025, 0.0061)), 6)
            lines.append(Line(parent, next_bus, r, round(r * 1.6, 6)))
            parent = next_bus
            next_bus += 1

    buses = tuple(Bus(id=i, base_kv=4.16, is_substation=(i == 1)) for i in range(1, n + 1))

    regulators = (
        Regulator(line_ref=None, is_substation_reg=True, band_center_v=121.0, bandwidth_v=2.0),
        Regulator(line_ref=(9, 10), band_center_v=120.0, bandwidth_v=2.0),
        Regulator(line_ref=(18, 19), band_center_v=120.0, bandwidth_v=2.0),
        Regulator(line_ref=(27, 28), band_center_v=120.0, bandwidth_v=2.0),
        Regulator(line_ref=(33, 34), ldc_r=0.6, ldc_x=1.3, band_center_v=120.0, bandwidth_v=2.0),
    )
    capacitors = (
        Capacitor(bus_ref=24, m_cap=0.10, v_on=122.0, v_off=126.0),
        Capacitor(bus_ref=36, m_cap=0.08, v_on=122.0, v_off=126.0),
        Capacitor(bus_ref=70, m_cap=0.08, v_on=122.0, v_off=126.0),
        Capacitor(bus_ref=110, m_cap=0.06, v_on=122.0, v_off=126.0),
    )

    # 85 loads over the lateral buses plus a few trunk buses
    candidates = list(range(trunk_len + 1, n + 1)) + [6, 12, 15, 21, 24, 30, 33, 36]
    picked = sorted(rng.choice(len(candidates), size=85, replace=False))
    loads = []
    for group, idx in enumerate(picked):
        p = round(float(rng.uniform(0.006, 0.018)), 6)
        q = round(p * float(rng.uniform(0.35, 0.55)), 6)
        loads.append(LoadPoint(bus_ref=candidates[idx], p_snapshot=p, q_snapshot=q, meter_group=group))

    feeder = Feeder(
        name="case123_balanced",
        mva_base=5.0,
        kv_base=4.16,
        buses=buses,
        lines=tuple(lines),
        regulators=regulators,
        capacitors=tuple(capacitors),
        load_points=tuple(loads),
    )
    validate_feeder(feeder)
    return feeder


def build_synthetic_large(seed: int = SYNTHETIC_LARGE_SEED) -> Feeder:
    """Seeded synthetic analog of a utility-scale feeder: 1177 loads,
    12 regulators, 10 capacitors, constant power factor loads, AMI meters
    grouped ten per feature.

    Capacitors 0 and 1 use 120/124 V hysteresis; capacitor 3 is pinned open
    under local control (v_on=0, v_off=1 can never switch it on) while
    remaining available to an external controller.
    """
    rng = np.random.default_rng(seed)
    n = 1250
    trunk_len = 50

    lines: list[Line] = []
    for i in range(1, trunk_len):
        r = round(float(rng.uniform(0.0009, 0.0021)), 8)
        lines.append(Line(i, i + 1, r, round(r * 2.0, 8)))
    next_bus = trunk_len + 1
    while next_bus <= n:
        anchor = int(rng.integers(2, trunk_len + 1))
        length = int(rng.integers(3, 12))
        parent = anchor
        for _ in range(length):
            if next_bus > n:
                break
            r = round(float(rng.uniform(0.0015, 0.0050)), 8)
            lines.append(Line(parent, next_bus, r, round(r * 1.5, 8)))
            parent = next_bus
            next_bus += 1

    buses = tuple(Bus(id=i, base_kv=12.47, is_substation=(i == 1)) for i in range(1, n + 1))

    regulators = [
        Regulator(line_ref=None, is_substation_reg=True, band_center_v=120.0, bandwidth_v=2.0)
    ]
    trunk_edges = [10, 14, 18, 22, 26, 30, 34, 38, 42, 46, 48]
    for i in trunk_edges:
        regulators.append(
            Regulator(line_ref=(i, i + 1), band_center_v=120.0, bandwidth_v=2.0)
        )

    cap_buses = rng.choice(np.arange(trunk_len + 1, n + 1), size=10, replace=False)
    capacitors = []
    for k, bus in enumerate(sorted(int(b) for b in cap_buses)):
        m_cap = round(float(rng.uniform(0.02, 0.05)), 6)
        if k in (0, 1):
            v_on, v_off = 120.0, 124.0
        elif k == 3:
            v_on, v_off = 0.0, 1.0
        else:
            v_on, v_off = 118.0, 122.0
        capacitors.append(Capacitor(bus_ref=bus, m_cap=m_cap, v_on=v_on, v_off=v_off))

    load_buses = sorted(int(b) for b in rng.choice(np.arange(2, n + 1), size=1177, replace=False))
    pf_tan = math.tan(math.acos(0.95))
    loads = []
    for i, bus in enumerate(load_buses):
        p = round(float(rng.uniform(0.0004, 0.0016)), 8)
        loads.append(
            LoadPoint(bus_ref=bus, p_snapshot=p, q_snapshot=round(p * pf_tan, 8), meter_group=i // 10)
        )

    feeder = Feeder(
        name="case8500_synthetic",
        mva_base=12.0,
        kv_base=12.47,
        buses=buses,
        lines=tuple(lines),
        regulators=tuple(regulators),
        capacitors=tuple(capacitors),
        load_points=tuple(loads),
    )
    validate_feeder(feeder)
    return feeder


BUNDLED_FILE_FEEDERS = ("case13_balanced", "case123_balanced")
GENERATED_FEEDERS = ("case8500_synthetic",)


def available_feeders() -> tuple[str, ...]:
    return BUNDLED_FILE_FEEDERS + GENERATED_FEEDERS


def get_feeder(name: str) -> Feeder:
    """Resolve a bundled feeder name or a path to a feeder file."""
    if name in BUNDLED_FILE_FEEDERS:
        return load_feeder(bundled_feeder_path(name))
    if name == "case8500_synthetic":
        return build_synthetic_large()
    path = Path(name)
    if path.exists():
        return load_feeder(path)
    raise BenchError(
        f"unknown feeder '{name}'; bundled: {', '.join(available_feeders())}"
    )
