"""Static grid description and the busbar topology vector.

Every element attached to a substation (a line end, a generator or a load)
occupies one *slot*.  Slots are laid out in a single canonical order, sorted by
``(substation id, element kind, element id)`` with kinds ordered
line < generator < load.  A :class:`TopologyVector` stores one busbar id
(1 or 2) per slot plus one connected flag per line.

Two busbars of a substation are interchangeable, so the canonical form of a
vector flips each substation such that its first slot sits on bus 1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import yaml

LINE, GEN, LOAD = 0, 1, 2
KIND_NAMES = {LINE: "line", GEN: "gen", LOAD: "load"}


class GridSchemaError(ValueError):
    """Raised for malformed grid descriptions (dangling references, bad values)."""


class TopologyMismatchError(ValueError):
    """Raised when two topology vectors do not share the same slot layout."""


@dataclass(frozen=True, order=True)
class ElementRef:
    substation: int
    kind: int
    id: int

    def __str__(self) -> str:
        return f"{KIND_NAMES[self.kind]}{self.id}@{self.substation}"


@dataclass(frozen=True)
class Line:
    id: int
    from_sub: int
    to_sub: int
    reactance: float
    thermal_limit: float


@dataclass(frozen=True)
class Generator:
    id: int
    substation: int
    p_max: float


@dataclass(frozen=True)
class Load:
    id: int
    substation: int


@dataclass(frozen=True)
class Substation:
    id: int
    element_slots: tuple[ElementRef, ...]


@dataclass(frozen=True, eq=False)
class SlotLayout:
    """Canonical slot order of one grid; shared by all its topology vectors."""

    substation_ids: tuple[int, ...]
    ranges: tuple[tuple[int, int], ...]
    elements: tuple[ElementRef, ...]
    line_ids: tuple[int, ...]
    line_slots: tuple[tuple[int, int], ...]
    signature: str

    @property
    def n_slots(self) -> int:
        return len(self.elements)

    def substation_index(self, sub_id: int) -> int:
        try:
            return self._sub_pos[sub_id]
        except KeyError:
            raise KeyError(f"unknown substation {sub_id}") from None

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "_sub_pos", {s: i for i, s in enumerate(self.substation_ids)}
        )

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SlotLayout) and other.signature == self.signature

    def __hash__(self) -> int:
        return hash(self.signature)


def _canonical_buses(buses: Sequence[int]) -> tuple[int, ...]:
    if buses and buses[0] == 2:
        return tuple(3 - b for b in buses)
    return tuple(buses)


@dataclass(frozen=True)
class SubstationAction:
    """Set the busbar of every element of one substation.

    ``buses`` lists one busbar id per slot of the substation, in canonical slot
    order.  The assignment is stored in canonical form.
    """

    substation: int
    buses: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(b not in (1, 2) for b in self.buses):
            raise ValueError(f"busbar ids must be 1 or 2, got {self.buses}")
        object.__setattr__(self, "buses", _canonical_buses(self.buses))

    @property
    def is_split(self) -> bool:
        return 2 in self.buses


@dataclass(frozen=True, eq=False)
class TopologyVector:
    layout: SlotLayout
    bus: tuple[int, ...]
    connected: tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.bus) != self.layout.n_slots:
            raise TopologyMismatchError(
                f"{len(self.bus)} busbar entries for {self.layout.n_slots} slots"
            )
        if len(self.connected) != len(self.layout.line_ids):
            raise TopologyMismatchError("connected flags do not match line count")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TopologyVector):
            return NotImplemented
        return (
            self.layout.signature == other.layout.signature
            and self.bus == other.bus
            and self.connected == other.connected
        )

    def __hash__(self) -> int:
        return hash((self.layout.signature, self.bus, self.connected))

    def substation_buses(self, sub_id: int) -> tuple[int, ...]:
        lo, hi = self.layout.ranges[self.layout.substation_index(sub_id)]
        return self.bus[lo:hi]

    def canonical(self) -> TopologyVector:
        bus = list(self.bus)
        changed = False
        for lo, hi in self.layout.ranges:
            if hi > lo and bus[lo] == 2:
                bus[lo:hi] = [3 - b for b in bus[lo:hi]]
                changed = True
        if not changed:
            return self
        return TopologyVector(self.layout, tuple(bus), self.connected)

    def with_substation(self, sub_id: int, buses: Sequence[int]) -> TopologyVector:
        lo, hi = self.layout.ranges[self.layout.substation_index(sub_id)]
        if len(buses) != hi - lo:
            raise TopologyMismatchError(
                f"substation {sub_id} has {hi - lo} slots, got {len(buses)} buses"
            )
        bus = self.bus[:lo] + tuple(buses) + self.bus[hi:]
        return TopologyVector(self.layout, bus, self.connected).canonical()

    def with_line_status(self, connected: Sequence[bool]) -> TopologyVector:
        return TopologyVector(self.layout, self.bus, tuple(bool(c) for c in connected))

    def busbar_only(self) -> TopologyVector:
        """Same busbar assignment with every line flagged connected."""
        if all(self.connected):
            return self
        return TopologyVector(self.layout, self.bus, (True,) * len(self.connected))

    def changed_substations(self) -> list[int]:
        """Ids of substations whose canonical assignment is not all-bus-1."""
        out = []
        for sub_id, (lo, hi) in zip(self.layout.substation_ids, self.layout.ranges):
            seg = _canonical_buses(self.bus[lo:hi])
            if 2 in seg:
                out.append(sub_id)
        return out


@dataclass(frozen=True)
class Grid:
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    substation_ids: tuple[int, ...]
    base_mva: float = 100.0
    name: str = "grid"
    substations: tuple[Substation, ...] = field(init=False, repr=False)
    layout: SlotLayout = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        subs = tuple(sorted(self.substation_ids))
        if len(set(subs)) != len(subs):
            raise GridSchemaError("duplicate substation ids")
        object.__setattr__(self, "substation_ids", subs)
        known = set(subs)
        if not self.lines:
            raise GridSchemaError("a grid needs at least one line")
        for kind, items in (("line", self.lines), ("generator", self.generators), ("load", self.loads)):
            ids = [x.id for x in items]
            if len(set(ids)) != len(ids):
                raise GridSchemaError(f"duplicate {kind} ids")
        refs: list[ElementRef] = []
        for ln in self.lines:
            if ln.from_sub not in known or ln.to_sub not in known:
                raise GridSchemaError(f"line {ln.id} references an unknown substation")
            if ln.from_sub == ln.to_sub:
                raise GridSchemaError(f"line {ln.id} connects substation {ln.from_sub} to itself")
            if not ln.reactance > 0 or not ln.thermal_limit > 0:
                raise GridSchemaError(f"line {ln.id} needs reactance > 0 and thermal_limit > 0")
            refs.append(ElementRef(ln.from_sub, LINE, ln.id))
            refs.append(ElementRef(ln.to_sub, LINE, ln.id))
        for g in self.generators:
            if g.substation not in known:
                raise GridSchemaError(f"generator {g.id} references unknown substation {g.substation}")
            refs.append(ElementRef(g.substation, GEN, g.id))
        for d in self.loads:
            if d.substation not in known:
                raise GridSchemaError(f"load {d.id} references unknown substation {d.substation}")
            refs.append(ElementRef(d.substation, LOAD, d.id))
        if self.base_mva <= 0:
            raise GridSchemaError("base_mva must be positive")

        refs.sort()
        slot_of = {r: i for i, r in enumerate(refs)}
        ranges = []
        substations = []
        pos = 0
        for s in subs:
            start = pos
            while pos < len(refs) and refs[pos].substation == s:
                pos += 1
            ranges.append((start, pos))
            substations.append(Substation(s, tuple(refs[start:pos])))
        line_slots = tuple(
            (slot_of[ElementRef(ln.from_sub, LINE, ln.id)], slot_of[ElementRef(ln.to_sub, LINE, ln.id)])
            for ln in self.lines
        )
        sig_src = ";".join(str(r) for r in refs) + "|" + ",".join(str(ln.id) for ln in self.lines)
        layout = SlotLayout(
            substation_ids=subs,
            ranges=tuple(ranges),
            elements=tuple(refs),
            line_ids=tuple(ln.id for ln in self.lines),
            line_slots=line_slots,
            signature=hashlib.sha256(sig_src.encode()).hexdigest()[:16],
        )
        object.__setattr__(self, "substations", tuple(substations))
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "_line_pos", {ln.id: i for i, ln in enumerate(self.lines)})
        object.__setattr__(self, "_slot_of", slot_of)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def line_index(self, line_id: int) -> int:
        return self._line_pos[line_id]

    def slot(self, ref: ElementRef) -> int:
        return self._slot_of[ref]

    def gen_slots(self) -> list[int]:
        return [self._slot_of[ElementRef(g.substation, GEN, g.id)] for g in self.generators]

    def load_slots(self) -> list[int]:
        return [self._slot_of[ElementRef(d.substation, LOAD, d.id)] for d in self.loads]

    def substation(self, sub_id: int) -> Substation:
        return self.substations[self.layout.substation_index(sub_id)]

    def base_topology(self) -> TopologyVector:
        return TopologyVector(
            self.layout, (1,) * self.layout.n_slots, (True,) * len(self.lines)
        )

    def topology(self, assignments: dict[int, Sequence[int]] | None = None,
                 disconnected: Iterable[int] = ()) -> TopologyVector:
        """Build a canonical vector from per-substation bus lists and a set of
        disconnected line ids."""
        psi = self.base_topology()
        for sub_id, buses in (assignments or {}).items():
            psi = psi.with_substation(sub_id, buses)
        off = set(disconnected)
        if off:
            psi = psi.with_line_status([ln.id not in off for ln in self.lines])
        return psi


def _check_same_layout(a: TopologyVector, b: TopologyVector) -> None:
    if a.layout.signature != b.layout.signature:
        raise TopologyMismatchError("topology vectors belong to different grids")


def topology_diff(target: TopologyVector, current: TopologyVector) -> list[SubstationAction]:
    """Per-substation actions that turn ``current`` into ``target``.

    Comparison is on canonical busbar assignments; line connectivity is not
    part of the diff.  Substations are returned in canonical order.
    """
    _check_same_layout(target, current)
    t = target.canonical().bus
    c = current.canonical().bus
    actions = []
    layout = target.layout
    for sub_id, (lo, hi) in zip(layout.substation_ids, layout.ranges):
        if t[lo:hi] != c[lo:hi]:
            actions.append(SubstationAction(sub_id, t[lo:hi]))
    return actions


def apply_action(psi: TopologyVector, action: SubstationAction) -> TopologyVector:
    return psi.with_substation(action.substation, action.buses)


def apply_actions(psi: TopologyVector, actions: Iterable[SubstationAction]) -> TopologyVector:
    for a in actions:
        psi = apply_action(psi, a)
    return psi


def distance_from_base(psi: TopologyVector) -> int:
    """Number of substations whose busbar assignment differs from the base."""
    return len(psi.changed_substations())


def canonical_hash(psi: TopologyVector) -> str:
    """Hex SHA-256 digest of the canonical encoding (64 characters)."""
    c = psi.canonical()
    payload = (
        c.layout.signature
        + ":"
        + "".join(str(b) for b in c.bus)
        + ":"
        + "".join("1" if x else "0" for x in c.connected)
    )
    return hashlib.sha256(payload.encode("ascii")).hexdigest()


def topology_to_dict(psi: TopologyVector) -> dict:
    c = psi.canonical()
    return {
        "bus": "".join(str(b) for b in c.bus),
        "disconnected": [lid for lid, on in zip(c.layout.line_ids, c.connected) if not on],
    }


def topology_from_dict(grid: Grid, data: dict) -> TopologyVector:
    bus = tuple(int(ch) for ch in data["bus"])
    off = set(data.get("disconnected", ()))
    psi = TopologyVector(grid.layout, bus, tuple(ln.id not in off for ln in grid.lines))
    return psi.canonical()


# --- grid description file -------------------------------------------------

def grid_from_dict(data: dict) -> Grid:
    try:
        lines = tuple(
            Line(int(d["id"]), int(d["from"]), int(d["to"]), float(d["x"]), float(d["limit"]))
            for d in data["lines"]
        )
        gens = tuple(
            Generator(int(d["id"]), int(d["substation"]), float(d.get("p_max", 0.0)))
            for d in data.get("generators", ())
        )
        loads = tuple(Load(int(d["id"]), int(d["substation"])) for d in data.get("loads", ()))
        subs = data.get("substations")
        if subs is None:
            raise GridSchemaError("missing 'substations' list")
        return Grid(
            lines=lines,
            generators=gens,
            loads=loads,
            substation_ids=tuple(int(s) for s in subs),
            base_mva=float(data.get("base_mva", 100.0)),
            name=str(data.get("name", "grid")),
        )
    except (KeyError, TypeError) as exc:
        raise GridSchemaError(f"malformed grid description: {exc!r}") from exc


def grid_to_dict(grid: Grid) -> dict:
    return {
        "name": grid.name,
        "base_mva": grid.base_mva,
        "substations": list(grid.substation_ids),
        "lines": [
            {"id": ln.id, "from": ln.from_sub, "to": ln.to_sub, "x": ln.reactance, "limit": ln.thermal_limit}
            for ln in grid.lines
        ],
        "generators": [{"id": g.id, "substation": g.substation, "p_max": g.p_max} for g in grid.generators],
        "loads": [{"id": d.id, "substation": d.substation} for d in grid.loads],
    }


def load_grid(path: str | Path) -> Grid:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise GridSchemaError(f"{path}: expected a mapping at top level")
    return grid_from_dict(data)


def save_grid(grid: Grid, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(grid_to_dict(grid), fh, sort_keys=False)
