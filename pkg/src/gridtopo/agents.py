"""Rule-based and topology agents.

All agents read an :class:`Observation` and query a *simulator* (anything with
``simulate(obs, action)`` and ``simulate_combined(obs, target)``, typically the
:class:`GridEnv` itself).  The only mutable agent state is the action buffer
of :class:`TopologyAgent`.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .core import Grid, SubstationAction, TopologyVector, topology_diff
from .environment import DO_NOTHING, Action, DoNothing, Forecast, LineReconnect, Observation

TIE_EPS = 1e-12


class Simulator(Protocol):
    def simulate(self, obs: Observation, action: Action) -> Forecast: ...
    def simulate_combined(self, obs: Observation, target: TopologyVector) -> Forecast: ...


@dataclass(frozen=True)
class AgentConfig:
    rho_tutor: float = 0.9
    rho_senior: float = 0.95
    rho_topo: float = 0.85
    rho_revert: float = 0.8
    action_set: tuple[SubstationAction, ...] = ()
    target_topologies: tuple[tuple[int, TopologyVector], ...] = ()

    def __post_init__(self) -> None:
        if not (0 < self.rho_revert <= self.rho_topo <= self.rho_senior <= 1.5):
            raise ValueError(
                "thresholds must satisfy 0 < rho_revert <= rho_topo <= rho_senior <= 1.5, got "
                f"{self.rho_revert}, {self.rho_topo}, {self.rho_senior}"
            )
        if not (0 < self.rho_tutor <= 1.5):
            raise ValueError(f"rho_tutor out of range: {self.rho_tutor}")


# --- ranking policies ------------------------------------------------------

ForecastFn = Callable[[SubstationAction], Forecast]


class RankingPolicy:
    """Priority score per (observation, action); higher is tried first."""

    def score(self, obs: Observation, action: SubstationAction, forecast: ForecastFn) -> float:
        raise NotImplementedError


class SimulationGreedyPolicy(RankingPolicy):
    """Negative forecast ``rho_max``: the simulation-ranked default."""

    def score(self, obs, action, forecast):
        return -forecast(action).rho_max


class PriorPolicy(RankingPolicy):
    """Static per-action priors, e.g. exported probabilities of a trained policy."""

    def __init__(self, priors: dict[SubstationAction, float], default: float = 0.0):
        self.priors = dict(priors)
        self.default = default

    def score(self, obs, action, forecast):
        return self.priors.get(action, self.default)

    @classmethod
    def from_file(cls, path: str | Path, action_set: Sequence[SubstationAction]) -> PriorPolicy:
        """JSON list of priors aligned with ``action_set``, or ``{"priors": [...]}``."""
        data = json.loads(Path(path).read_text())
        if isinstance(data, dict):
            data = data["priors"]
        if len(data) != len(action_set):
            raise ValueError(f"{path}: {len(data)} priors for {len(action_set)} actions")
        return cls({a: float(p) for a, p in zip(action_set, data)})


# --- shared heuristics -----------------------------------------------------

def do_nothing_act(obs: Observation) -> Action:
    return DO_NOTHING


def reconnect_check(obs: Observation, sim: Simulator) -> LineReconnect | None:
    """Reconnect the disconnected line whose return helps most, unless every
    candidate worsens the forecast."""
    candidates = [LineReconnect(l) for l in obs.disconnected_lines()]
    candidates = [a for a in candidates if obs.is_legal(a)]
    if not candidates:
        return None
    baseline = sim.simulate(obs, DO_NOTHING).rho_max
    best, best_rho = None, math.inf
    for a in candidates:
        r = sim.simulate(obs, a).rho_max
        if r <= baseline + TIE_EPS and r < best_rho - TIE_EPS:
            best, best_rho = a, r
    return best


def reversion_check(obs: Observation, cfg: AgentConfig, sim: Simulator) -> SubstationAction | None:
    best, best_rho = None, math.inf
    for sub_id in obs.psi.changed_substations():
        n = len(obs.psi.substation_buses(sub_id))
        a = SubstationAction(sub_id, (1,) * n)
        if not obs.is_legal(a):
            continue
        r = sim.simulate(obs, a).rho_max
        if r < best_rho - TIE_EPS:
            best, best_rho = a, r
    if best is not None and best_rho < cfg.rho_revert:
        return best
    return None


def greedy_search(obs: Observation, actions: Sequence[SubstationAction], sim: Simulator) -> Action:
    """Legal action with the lowest forecast ``rho_max``; DoNothing unless it
    strictly improves on doing nothing."""
    best, best_rho = None, math.inf
    for a in actions:
        if not obs.is_legal(a):
            continue
        r = sim.simulate(obs, a).rho_max
        if r < best_rho - TIE_EPS:
            best, best_rho = a, r
    if best is None:
        return DO_NOTHING
    if best_rho < sim.simulate(obs, DO_NOTHING).rho_max - TIE_EPS:
        return best
    return DO_NOTHING


def tutor_act(obs: Observation, cfg: AgentConfig, sim: Simulator) -> Action:
    reco = reconnect_check(obs, sim)
    if reco is not None:
        return reco
    if obs.rho_max > cfg.rho_tutor:
        return greedy_search(obs, cfg.action_set, sim)
    if obs.rho_max < cfg.rho_revert:
        rev = reversion_check(obs, cfg, sim)
        if rev is not None:
            return rev
    return DO_NOTHING


def senior_act(obs: Observation, cfg: AgentConfig, policy: RankingPolicy, sim: Simulator) -> Action:
    """Try actions in policy order until one forecasts below ``rho_senior``.

    Falls back to the lowest-forecast legal action when none qualifies, and to
    DoNothing if that fallback is no better than doing nothing.
    """
    memo: dict[SubstationAction, Forecast] = {}

    def forecast(a: SubstationAction) -> Forecast:
        f = memo.get(a)
        if f is None:
            f = memo[a] = sim.simulate(obs, a)
        return f

    legal = [(i, a) for i, a in enumerate(cfg.action_set) if obs.is_legal(a)]
    if not legal:
        return DO_NOTHING
    ranked = sorted(legal, key=lambda ia: (-policy.score(obs, ia[1], forecast), ia[0]))
    for _, a in ranked:
        if forecast(a).rho_max < cfg.rho_senior:
            return a
    best, best_rho = None, math.inf
    for _, a in legal:
        r = forecast(a).rho_max
        if r < best_rho - TIE_EPS:
            best, best_rho = a, r
    if best is None or best_rho >= sim.simulate(obs, DO_NOTHING).rho_max - TIE_EPS:
        return DO_NOTHING
    return best


# --- action buffer ---------------------------------------------------------

@dataclass
class ActionBuffer:
    queue: deque = field(default_factory=deque)
    origin: int | None = None
    target: TopologyVector | None = None

    def __len__(self) -> int:
        return len(self.queue)

    def clear(self) -> None:
        self.queue.clear()
        self.origin = None
        self.target = None


def topology_agent_act(obs: Observation, cfg: AgentConfig, policy: RankingPolicy,
                       sim: Simulator) -> ActionBuffer:
    """Fill a fresh buffer according to the rho_max state machine."""
    reco = reconnect_check(obs, sim)
    if reco is not None:
        return ActionBuffer(deque([reco]))
    rho = obs.rho_max
    if rho > cfg.rho_senior:
        return ActionBuffer(deque([senior_act(obs, cfg, policy, sim)]))
    if rho > cfg.rho_topo:
        best_m, best_rho = None, math.inf
        for m, (_, psi_m) in enumerate(cfg.target_topologies):
            r = sim.simulate_combined(obs, psi_m).rho_max
            if r < cfg.rho_topo and r < best_rho - TIE_EPS:
                best_m, best_rho = m, r
        if best_m is None:
            return ActionBuffer(deque([DO_NOTHING]))
        tid, psi_m = cfg.target_topologies[best_m]
        steps = topology_diff(psi_m, obs.psi)
        return ActionBuffer(deque(steps or [DO_NOTHING]), origin=tid, target=psi_m)
    if rho < cfg.rho_revert:
        rev = reversion_check(obs, cfg, sim)
        if rev is not None:
            return ActionBuffer(deque([rev]))
    return ActionBuffer(deque([DO_NOTHING]))


def buffer_drain(buffer: ActionBuffer, obs: Observation, sim: Simulator) -> Action:
    """Pop the buffered action with the best forecast, or invalidate the buffer."""
    if len(buffer.queue) == 1 and isinstance(buffer.queue[0], DoNothing):
        buffer.clear()
        return DO_NOTHING
    best_i, best_rho = None, math.inf
    for i, a in enumerate(buffer.queue):
        if isinstance(a, DoNothing) or not obs.is_legal(a):
            continue
        fc = sim.simulate(obs, a)
        if fc.feasible and fc.rho_max < best_rho - TIE_EPS:
            best_i, best_rho = i, fc.rho_max
    if best_i is None:
        buffer.clear()
        return DO_NOTHING
    action = buffer.queue[best_i]
    del buffer.queue[best_i]
    if not buffer.queue:
        buffer.clear()
    return action


# --- agent objects ---------------------------------------------------------

class Agent:
    name = "agent"

    def reset(self) -> None:
        pass

    def act(self, obs: Observation, sim: Simulator) -> Action:
        raise NotImplementedError


class DoNothingAgent(Agent):
    def __init__(self, name: str = "DoNothing"):
        self.name = name

    def act(self, obs, sim):
        return do_nothing_act(obs)


class TutorAgent(Agent):
    """Greedy simulation search above ``rho_tutor``."""

    def __init__(self, cfg: AgentConfig, name: str = "Tutor"):
        if not cfg.action_set:
            raise ValueError("the Tutor needs a non-empty action set")
        self.cfg = cfg
        self.name = name

    def act(self, obs, sim):
        return tutor_act(obs, cfg=self.cfg, sim=sim)


class SeniorAgent(Agent):
    """Policy-ranked substation actions above ``rho_senior`` plus the shared
    reconnection and reversion heuristics."""

    def __init__(self, cfg: AgentConfig, policy: RankingPolicy | None = None, name: str = "Senior"):
        if not cfg.action_set:
            raise ValueError("the Senior agent needs a non-empty action set")
        self.cfg = cfg
        self.policy = policy or SimulationGreedyPolicy()
        self.name = name

    def act(self, obs, sim):
        reco = reconnect_check(obs, sim)
        if reco is not None:
            return reco
        if obs.rho_max > self.cfg.rho_senior:
            return senior_act(obs, self.cfg, self.policy, sim)
        if obs.rho_max < self.cfg.rho_revert:
            rev = reversion_check(obs, self.cfg, sim)
            if rev is not None:
                return rev
        return DO_NOTHING


class TopologyAgent(Agent):
    def __init__(self, cfg: AgentConfig, policy: RankingPolicy | None = None, name: str = "Topology"):
        self.cfg = cfg
        self.policy = policy or SimulationGreedyPolicy()
        self.name = name
        self.buffer = ActionBuffer()

    def reset(self) -> None:
        self.buffer = ActionBuffer()

    def act(self, obs, sim):
        if not self.buffer.queue:
            self.buffer = topology_agent_act(obs, self.cfg, self.policy, sim)
        return buffer_drain(self.buffer, obs, sim)


# --- action-set file -------------------------------------------------------

def load_action_set(path: str | Path, grid: Grid) -> tuple[SubstationAction, ...]:
    """JSON list of ``{"substation": id, "buses": [1, 2, ...]}`` entries.

    ``buses`` follows the substation's canonical slot order; alternatively
    ``"bus2": ["line3", "load2"]`` names the elements moved to bus 2.
    """
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data["actions"]
    out = []
    for item in data:
        sub = grid.substation(int(item["substation"]))
        if "buses" in item:
            buses = tuple(int(b) for b in item["buses"])
        else:
            moved = set(item["bus2"])
            names = [f"{('line', 'gen', 'load')[r.kind]}{r.id}" for r in sub.element_slots]
            unknown = moved - set(names)
            if unknown:
                raise ValueError(f"substation {sub.id} has no elements {sorted(unknown)}")
            buses = tuple(2 if n in moved else 1 for n in names)
        if len(buses) != len(sub.element_slots):
            raise ValueError(f"action on substation {sub.id}: expected {len(sub.element_slots)} buses")
        out.append(SubstationAction(sub.id, buses))
    return tuple(out)


def save_action_set(actions: Sequence[SubstationAction], path: str | Path) -> None:
    payload = [{"substation": a.substation, "buses": list(a.buses)} for a in actions]
    Path(path).write_text(json.dumps({"actions": payload}, indent=1) + "\n")
