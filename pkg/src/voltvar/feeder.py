"""Radial distribution feeder data model and file format.

A feeder is an immutable description of a radial network: buses, lines
(directed parent -> child, forming a tree rooted at the substation), tap
regulators, switched capacitors, and load attachment points.  Feeder files
are YAML documents with sections ``meta``, ``buses``, ``lines``,
``regulators``, ``capacitors`` and ``loads``; bundled feeders live under
``voltvar/data/feeders/``.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path

import yaml

from .errors import FeederParseError, FeederValidationError, PositionRangeError

VOLT_BASE_120 = 120.0


@dataclass(frozen=True)
class Bus:
    id: int
    base_kv: float
    is_substation: bool = False


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float


@dataclass(frozen=True)
class Regulator:
    """Tap regulator.

    ``is_substation_reg`` marks the head-of-feeder device: it sets the
    substation bus voltage to ``1 + tap*step`` directly and carries no
    ``line_ref``.  Field regulators sit on a line and scale the
    downstream-side voltage by ``1 + tap*step``.

    ``ldc_r``/``ldc_x`` are line-drop-compensator settings in volts on the
    120 V base at 1.0 p.u. line current; ``band_center_v``/``bandwidth_v``
    define the control band on the same base.
    """

    line_ref: tuple[int, int] | None = None
    num_taps: int = 33
    ratio_min: float = 0.9
    ratio_max: float = 1.1
    step: float = 0.00625
    is_substation_reg: bool = False
    ldc_r: float = 0.0
    ldc_x: float = 0.0
    band_center_v: float = 120.0
    bandwidth_v: float = 2.0

    @property
    def max_tap(self) -> int:
        return (self.num_taps - 1) // 2

    @property
    def min_tap(self) -> int:
        return -((self.num_taps - 1) // 2)


@dataclass(frozen=True)
class Capacitor:
    """Switched shunt capacitor with voltage hysteresis setpoints.

    ``m_cap`` is the rated reactive output (p.u. at 1.0 p.u. voltage);
    ``v_on``/``v_off`` are the local-voltage switch thresholds on the
    120 V base.  ``controllable`` marks whether an external controller may
    set the status; local hysteresis applies regardless.
    """

    bus_ref: int
    m_cap: float
    v_on: float = 118.0
    v_off: float = 122.0
    controllable: bool = True


@dataclass(frozen=True)
class LoadPoint:
    bus_ref: int
    p_snapshot: float
    q_snapshot: float
    meter_group: int = 0


@dataclass(frozen=True)
class Feeder:
    """Immutable radial feeder; safe to share across threads after load."""

    name: str
    mva_base: float
    kv_base: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    regulators: tuple[Regulator, ...] = ()
    capacitors: tuple[Capacitor, ...] = ()
    load_points: tuple[LoadPoint, ...] = ()

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    def bus_pos(self, bus_id: int) -> int:
        """0-based array position for a 1-based dense bus id."""
        return bus_id - 1

    @cached_property
    def substation_regulator(self) -> Regulator | None:
        for reg in self.regulators:
            if reg.is_substation_reg:
                return reg
        return None

    @cached_property
    def line_index(self) -> dict[tuple[int, int], int]:
        return {(ln.from_bus, ln.to_bus): k for k, ln in enumerate(self.lines)}

    @cached_property
    def children(self) -> dict[int, list[int]]:
        """Bus id -> line indices leaving that bus (declaration order)."""
        out: dict[int, list[int]] = {b.id: [] for b in self.buses}
        for k, ln in enumerate(self.lines):
            out[ln.from_bus].append(k)
        return out

    @cached_property
    def parent_line(self) -> dict[int, int]:
        """Bus id -> index of its single incoming line (root absent)."""
        return {ln.to_bus: k for k, ln in enumerate(self.lines)}

    @cached_property
    def topo_lines(self) -> tuple[int, ...]:
        """Line indices ordered so parents precede children (BFS from bus 1)."""
        order: list[int] = []
        frontier = [1]
        while frontier:
            nxt: list[int] = []
            for bus in frontier:
                for k in self.children[bus]:
                    order.append(k)
                    nxt.append(self.lines[k].to_bus)
            frontier = nxt
        return tuple(order)

    @cached_property
    def load_buses(self) -> tuple[int, ...]:
        return tuple(lp.bus_ref for lp in self.load_points)

    def device_ranges(self) -> list[tuple[int, int]]:
        """(low, high) inclusive position range per device.

        Device order is fixed: regulators in declaration order, then
        capacitors in declaration order.
        """
        ranges = [(r.min_tap, r.max_tap) for r in self.regulators]
        ranges += [(0, 1) for _ in self.capacitors]
        return ranges


def tap_to_ratio(reg: Regulator, tap: int) -> float:
    """Per-unit turns ratio for an integer tap position."""
    if tap < reg.min_tap or tap > reg.max_tap:
        raise PositionRangeError(
            f"tap {tap} outside range [{reg.min_tap}, {reg.max_tap}]"
        )
    return 1.0 + tap * reg.step


def validate_feeder(feeder: Feeder) -> None:
    """Check all structural invariants; raise FeederValidationError naming
    the offending element."""
    n = feeder.n_buses
    if n < 2:
        raise FeederValidationError("feeder needs at least 2 buses")
    ids = [b.id for b in feeder.buses]
    if sorted(ids) != list(range(1, n + 1)):
        raise FeederValidationError(f"bus ids must be dense 1..{n}, got {sorted(ids)}")
    subs = [b.id for b in feeder.buses if b.is_substation]
    if subs != [1]:
        raise FeederValidationError(
            f"exactly bus 1 must be the substation, flagged: {subs}"
        )
    if feeder.mva_base <= 0:
        raise FeederValidationError("mva_base must be positive")

    if len(feeder.lines) != n - 1:
        raise FeederValidationError(
            f"non-radial: {len(feeder.lines)} lines for {n} buses (need {n - 1})"
        )
    bus_set = set(ids)
    seen_child: set[int] = set()
    for ln in feeder.lines:
        if ln.from_bus not in bus_set or ln.to_bus not in bus_set:
            raise FeederValidationError(
                f"line ({ln.from_bus},{ln.to_bus}) references unknown bus"
            )
        if ln.r < 0:
            raise FeederValidationError(
                f"line ({ln.from_bus},{ln.to_bus}) has negative resistance"
            )
        if ln.to_bus in seen_child or ln.to_bus == 1:
            raise FeederValidationError(
                f"non-radial: bus {ln.to_bus} has more than one parent or is the root"
            )
        seen_child.add(ln.to_bus)
    # reachability from the root; |lines| == n-1 plus in-degree 1 makes this a tree test
    reached = {1}
    frontier = [1]
    adj: dict[int, list[int]] = {b: [] for b in ids}
    for ln in feeder.lines:
        adj[ln.from_bus].append(ln.to_bus)
    while frontier:
        bus = frontier.pop()
        for child in adj[bus]:
            if child not in reached:
                reached.add(child)
                frontier.append(child)
    if len(reached) != n:
        missing = sorted(bus_set - reached)
        raise FeederValidationError(f"non-radial: buses {missing} unreachable from bus 1")

    n_sub_regs = 0
    for k, reg in enumerate(feeder.regulators):
        if reg.num_taps % 2 == 0 or reg.num_taps < 3:
            raise FeederValidationError(
                f"regulator {k}: num_taps must be odd and >= 3, got {reg.num_taps}"
            )
        if reg.step <= 0:
            raise FeederValidationError(f"regulator {k}: step must be positive")
        span = (reg.num_taps - 1) * reg.step
        if abs((reg.ratio_max - reg.ratio_min) - span) > 1e-9:
            raise FeederValidationError(
                f"regulator {k}: ratio range {reg.ratio_min}..{reg.ratio_max} "
                f"inconsistent with {reg.num_taps} taps of step {reg.step}"
            )
        if abs((1.0 + reg.min_tap * reg.step) - reg.ratio_min) > 1e-9:
            raise FeederValidationError(
                f"regulator {k}: tap range must be centered on ratio 1.0"
            )
        if reg.is_substation_reg:
            n_sub_regs += 1
            if reg.line_ref is not None:
                raise FeederValidationError(
                    f"regulator {k}: substation regulator must not carry a line_ref"
                )
        else:
            if reg.line_ref is None:
                raise FeederValidationError(f"regulator {k}: field regulator needs a line_ref")
            if tuple(reg.line_ref) not in feeder.line_index:
                raise FeederValidationError(
                    f"regulator {k}: line_ref {tuple(reg.line_ref)} is not a feeder line"
                )
        if reg.bandwidth_v <= 0:
            raise FeederValidationError(f"regulator {k}: bandwidth_v must be positive")
    if n_sub_regs > 1:
        raise FeederValidationError("at most one substation regulator allowed")
    field_refs = [tuple(r.line_ref) for r in feeder.regulators if r.line_ref is not None]
    if len(field_refs) != len(set(field_refs)):
        raise FeederValidationError("two regulators reference the same line")

    for k, cap in enumerate(feeder.capacitors):
        if cap.bus_ref not in bus_set:
            raise FeederValidationError(f"capacitor {k} references unknown bus {cap.bus_ref}")
        if cap.m_cap <= 0:
            raise FeederValidationError(f"capacitor {k}: m_cap must be positive")
        if not cap.v_on < cap.v_off:
            raise FeederValidationError(
                f"capacitor {k}: v_on ({cap.v_on}) must be below v_off ({cap.v_off})"
            )

    for k, lp in enumerate(feeder.load_points):
        if lp.bus_ref not in bus_set:
            raise FeederValidationError(f"load {k} references unknown bus {lp.bus_ref}")
        if lp.p_snapshot < 0:
            raise FeederValidationError(f"load {k}: p_snapshot must be >= 0")


def _build_section(cls, rows, section: str) -> tuple:
    """Instantiate a dataclass per row, rejecting unknown/missing fields."""
    known = {f.name for f in fields(cls)}
    out = []
    for i, row in enumerate(rows or []):
        if not isinstance(row, dict):
            raise FeederParseError(f"{section}[{i}]: expected a mapping, got {type(row).__name__}")
        unknown = set(row) - known
        if unknown:
            raise FeederParseError(f"{section}[{i}]: unknown fields {sorted(unknown)}")
        if cls is Regulator and row.get("line_ref") is not None:
            ref = row["line_ref"]
            if not (isinstance(ref, (list, tuple)) and len(ref) == 2):
                raise FeederParseError(f"{section}[{i}]: line_ref must be a [from_bus, to_bus] pair")
            row = dict(row, line_ref=(int(ref[0]), int(ref[1])))
        try:
            out.append(cls(**row))
        except TypeError as exc:
            raise FeederParseError(f"{section}[{i}]: {exc}") from None
    return tuple(out)


def load_feeder(path: str | Path) -> Feeder:
    """Load and validate a feeder file.

    Raises FeederParseError on malformed files and FeederValidationError
    (naming the offending element) on structural violations.
    """
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise FeederParseError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise FeederParseError(f"{path}: top level must be a mapping")
    meta = doc.get("meta")
    if not isinstance(meta, dict) or not {"name", "mva_base", "kv_base"} <= set(meta):
        raise FeederParseError(f"{path}: meta must define name, mva_base, kv_base")
    unknown = set(doc) - {"meta", "buses", "lines", "regulators", "capacitors", "loads"}
    if unknown:
        raise FeederParseError(f"{path}: unknown sections {sorted(unknown)}")

    feeder = Feeder(
        name=str(meta["name"]),
        mva_base=float(meta["mva_base"]),
        kv_base=float(meta["kv_base"]),
        buses=_build_section(Bus, doc.get("buses"), "buses"),
        lines=_build_section(Line, doc.get("lines"), "lines"),
        regulators=_build_section(Regulator, doc.get("regulators"), "regulators"),
        capacitors=_build_section(Capacitor, doc.get("capacitors"), "capacitors"),
        load_points=_build_section(LoadPoint, doc.get("loads"), "loads"),
    )
    validate_feeder(feeder)
    return feeder


def _row_dict(obj) -> dict:
    row = {}
    for f in fields(obj):
        val = getattr(obj, f.name)
        if isinstance(val, tuple):
            val = list(val)
        row[f.name] = val
    return row


def write_feeder(feeder: Feeder, path: str | Path) -> Path:
    """Write a feeder file; load_feeder(write_feeder(f)) == f."""
    path = Path(path)
    doc = {
        "meta": {
            "name": feeder.name,
            "mva_base": feeder.mva_base,
            "kv_base": feeder.kv_base,
        },
        "buses": [_row_dict(b) for b in feeder.buses],
        "lines": [_row_dict(ln) for ln in feeder.lines],
        "regulators": [_row_dict(r) for r in feeder.regulators],
        "capacitors": [_row_dict(c) for c in feeder.capacitors],
        "loads": [_row_dict(lp) for lp in feeder.load_points],
    }
    path.write_text(yaml.safe_dump(doc, sort_keys=False, default_flow_style=None))
    return path


def bundled_feeder_dir() -> Path:
    return Path(str(importlib.resources.files("voltvar"))) / "data" / "feeders"


def bundled_feeder_path(name: str) -> Path:
    return bundled_feeder_dir() / f"{name}.yaml"
