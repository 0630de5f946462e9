"""Target-topology search: count how long an agent rests in each topology.

The agent is run over a set of chronics.  Every step on which it returns
DoNothing adds one to the counter of the current topology; runs of other
actions are kept as experience records (first observation of the run, the
actions, and the topology the run ended in).  The most-rested topologies
become the target set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .agents import Agent
from .core import (
    Grid, SubstationAction, TopologyVector, canonical_hash, distance_from_base,
    topology_from_dict, topology_to_dict,
)
from .environment import DoNothing, GridEnv, LineReconnect, Chronic, Observation
from .runner import run_episode

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


def resting_key(psi: TopologyVector) -> TopologyVector:
    """Registry key: canonical busbar assignment, line status ignored."""
    return psi.busbar_only().canonical()


@dataclass
class RegistryEntry:
    id: int
    psi: TopologyVector
    counter: int


class TopologyRegistry:
    """Visit-counted topology store; ids are issued in first-seen order."""

    def __init__(self) -> None:
        self.entries: dict[int, RegistryEntry] = {}
        self._ids: dict[str, int] = {}
        self._next = 1

    def set_id(self, psi: TopologyVector) -> int:
        h = canonical_hash(resting_key(psi))
        tid = self._ids.get(h)
        if tid is None:
            tid = self._ids[h] = self._next
            self._next += 1
        return tid

    def id_of(self, psi: TopologyVector) -> int | None:
        return self._ids.get(canonical_hash(resting_key(psi)))

    def increment(self, psi: TopologyVector, n: int = 1) -> int:
        tid = self.set_id(psi)
        entry = self.entries.get(tid)
        if entry is None:
            self.entries[tid] = RegistryEntry(tid, resting_key(psi), n)
        else:
            entry.counter += n
        return tid

    def __contains__(self, psi: TopologyVector) -> bool:
        tid = self.id_of(psi)
        return tid is not None and tid in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def counter(self, psi: TopologyVector) -> int:
        tid = self.id_of(psi)
        return self.entries[tid].counter if tid in self.entries else 0

    def total(self) -> int:
        return sum(e.counter for e in self.entries.values())

    def merge(self, other: TopologyRegistry) -> None:
        for e in other.entries.values():
            self.increment(e.psi, e.counter)

    def to_dict(self) -> dict:
        entries = []
        for e in self.entries.values():
            entries.append({
                "id": e.id,
                "hash": canonical_hash(e.psi),
                "counter": e.counter,
                "distance": distance_from_base(e.psi),
                "topology": topology_to_dict(e.psi),
            })
        return {"version": FORMAT_VERSION, "entries": entries}

    @classmethod
    def from_dict(cls, grid: Grid, data: dict) -> TopologyRegistry:
        reg = cls()
        for item in sorted(data["entries"], key=lambda d: d["id"]):
            psi = topology_from_dict(grid, item["topology"])
            h = canonical_hash(resting_key(psi))
            reg._ids[h] = item["id"]
            reg.entries[item["id"]] = RegistryEntry(item["id"], resting_key(psi), int(item["counter"]))
            reg._next = max(reg._next, item["id"] + 1)
        return reg


@dataclass
class ExperienceRecord:
    chronic: str
    seed: int
    observation: Observation
    actions: list = field(default_factory=list)
    topology_id: int | None = None


class ExperienceList(list):
    pass


@dataclass(frozen=True)
class TargetEntry:
    rank: int
    id: int
    psi: TopologyVector
    counter: int


@dataclass(frozen=True)
class TargetTopologySet:
    ranked: tuple[TargetEntry, ...]

    def __len__(self) -> int:
        return len(self.ranked)

    def ids(self) -> set[int]:
        return {e.id for e in self.ranked}

    def as_targets(self) -> tuple[tuple[int, TopologyVector], ...]:
        return tuple((e.id, e.psi) for e in self.ranked)

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "targets": [
                {"rank": e.rank, "id": e.id, "counter": e.counter,
                 "distance": distance_from_base(e.psi), "topology": topology_to_dict(e.psi)}
                for e in self.ranked
            ],
        }

    @classmethod
    def from_dict(cls, grid: Grid, data: dict) -> TargetTopologySet:
        ranked = tuple(
            TargetEntry(int(d["rank"]), int(d["id"]), topology_from_dict(grid, d["topology"]), int(d["counter"]))
            for d in sorted(data["targets"], key=lambda d: d["rank"])
        )
        return cls(ranked)


class Recorder:
    """Step hook implementing the counting rule on a live episode."""

    def __init__(self, registry: TopologyRegistry, experience: list | None, chronic: str, seed: int):
        self.registry = registry
        self.experience = experience
        self.chronic = chronic
        self.seed = seed
        self.burst: ExperienceRecord | None = None
        self.rest_steps = 0

    def __call__(self, obs: Observation, action, result) -> None:
        if isinstance(action, DoNothing):
            tid = self.registry.increment(obs.psi)
            self.rest_steps += 1
            self._close(tid)
        else:
            if self.burst is None:
                self.burst = ExperienceRecord(self.chronic, self.seed, obs)
            self.burst.actions.append(action)
        if result.done and self.burst is not None:
            self._close(self.registry.set_id(result.observation.psi))

    def _close(self, tid: int) -> None:
        if self.burst is not None:
            self.burst.topology_id = tid
            if self.experience is not None:
                self.experience.append(self.burst)
            self.burst = None


EnvFactory = Callable[[], GridEnv]


def search_target_topologies(env_factory: EnvFactory, agent: Agent, chronics: Iterable[Chronic],
                             seeds: Sequence[int]) -> tuple[TopologyRegistry, ExperienceList]:
    registry = TopologyRegistry()
    experience = ExperienceList()
    for chronic in chronics:
        for seed in seeds:
            env = env_factory()
            rec = Recorder(registry, experience, chronic.id, seed)
            try:
                trace = run_episode(env, agent, chronic, seed, on_step=rec, timed=False)
            except Exception as exc:  # noqa: BLE001
                log.warning("search episode %s/%s failed: %s", chronic.id, seed, exc)
                continue
            if trace.error:
                log.warning("search episode %s/%s: agent error %s", chronic.id, seed, trace.error)
            log.info("search %s seed=%s survived=%d/%d rest=%d topologies=%d",
                     chronic.id, seed, trace.steps_survived, chronic.T, rec.rest_steps, len(registry))
    return registry, experience


def select_top_m(registry: TopologyRegistry, M: int, exclude_base: bool = False) -> TargetTopologySet:
    if M < 0:
        raise ValueError("M must be non-negative")
    entries = list(registry.entries.values())  # insertion order = first seen
    if exclude_base:
        entries = [e for e in entries if distance_from_base(e.psi) > 0]
    order = sorted(range(len(entries)), key=lambda i: (-entries[i].counter, i))
    if M > len(entries):
        log.warning("requested %d target topologies, only %d distinct available", M, len(entries))
    chosen = [entries[i] for i in order[:M]]
    return TargetTopologySet(tuple(TargetEntry(m + 1, e.id, e.psi, e.counter) for m, e in enumerate(chosen)))


@dataclass(frozen=True)
class FrequencyRow:
    rank: int
    id: int
    counter: int
    is_target: bool
    distance: int
    changed_substations: tuple[int, ...]


def frequency_report(registry: TopologyRegistry, tt_set: TargetTopologySet | None = None,
                     exclude_base: bool = True) -> list[FrequencyRow]:
    # membership by topology hash so registries from different runs compare
    targets = {canonical_hash(t.psi) for t in tt_set.ranked} if tt_set is not None else set()
    ranked = select_top_m(registry, len(registry), exclude_base=exclude_base)
    return [
        FrequencyRow(
            rank=e.rank,
            id=e.id,
            counter=e.counter,
            is_target=canonical_hash(e.psi) in targets,
            distance=distance_from_base(e.psi),
            changed_substations=tuple(e.psi.changed_substations()),
        )
        for e in ranked.ranked
    ]


# --- persistence -----------------------------------------------------------

def action_to_dict(action) -> dict:
    if isinstance(action, SubstationAction):
        return {"type": "substation", "substation": action.substation, "buses": list(action.buses)}
    if isinstance(action, LineReconnect):
        return {"type": "reconnect", "line": action.line}
    return {"type": "none"}


def action_from_dict(data: dict):
    from .environment import DO_NOTHING
    kind = data["type"]
    if kind == "substation":
        return SubstationAction(int(data["substation"]), tuple(data["buses"]))
    if kind == "reconnect":
        return LineReconnect(int(data["line"]))
    return DO_NOTHING


def save_json(data: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=False) + "\n")


def load_registry(path: str | Path, grid: Grid) -> TopologyRegistry:
    return TopologyRegistry.from_dict(grid, json.loads(Path(path).read_text()))


def load_targets(path: str | Path, grid: Grid) -> TargetTopologySet:
    return TargetTopologySet.from_dict(grid, json.loads(Path(path).read_text()))


def save_experience(experience: Sequence[ExperienceRecord], path: str | Path) -> None:
    """JSON-lines log; the first line is a versioned header."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": "gridtopo-experience", "version": FORMAT_VERSION}) + "\n")
        for r in experience:
            obs = r.observation
            fh.write(json.dumps({
                "chronic": r.chronic,
                "seed": r.seed,
                "t": obs.t,
                "rho_max": round(obs.rho_max, 9),
                "rho": [round(float(x), 9) for x in obs.rho],
                "topology": topology_to_dict(obs.psi),
                "actions": [action_to_dict(a) for a in r.actions],
                "topology_id": r.topology_id,
            }) + "\n")


def load_experience(path: str | Path) -> list[dict]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "gridtopo-experience":
            raise ValueError(f"{path}: not an experience log")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported experience version {header.get('version')}")
        out = []
        for line in fh:
            rec = json.loads(line)
            rec["actions"] = [action_from_dict(a) for a in rec["actions"]]
            out.append(rec)
    return out
