"""Episode simulator: chronic playback, legality, overflow protection,
opponent and one-step forecasts."""

from __future__ import annotations

import csv
import enum
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np

from .core import Grid, SubstationAction, TopologyVector, apply_actions, topology_diff
from .powerflow import FlowModel


class ChronicSchemaError(ValueError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class DoNothing:
    def __repr__(self) -> str:
        return "DoNothing"


DO_NOTHING = DoNothing()


@dataclass(frozen=True)
class LineReconnect:
    line: int


Action = Union[DoNothing, SubstationAction, LineReconnect]


class Termination(enum.Enum):
    COMPLETED = "completed"
    CASCADE = "cascade"
    ISLANDING = "islanding"
    DIVERGENCE = "divergence"
    # islanding caused by an external disconnection (opponent or maintenance)
    ILLEGAL_STATE_DISCONNECT = "illegal_state_disconnect"


@dataclass(frozen=True)
class Maintenance:
    line: int
    start: int
    duration: int


@dataclass(frozen=True, eq=False)
class Chronic:
    id: str
    gen_p: np.ndarray      # (T, G) MW
    load_p: np.ndarray     # (T, D) MW
    maintenance: tuple[Maintenance, ...] = ()
    step_minutes: int = 5
    start: str = "2050-01-03T00:00"

    def __post_init__(self) -> None:
        if self.gen_p.ndim != 2 or self.load_p.ndim != 2 or len(self.gen_p) != len(self.load_p):
            raise ChronicSchemaError(f"chronic {self.id}: inconsistent series shapes")
        if len(self.gen_p) < 2:
            raise ChronicSchemaError(f"chronic {self.id}: needs at least two steps")
        if (self.load_p < 0).any():
            raise ChronicSchemaError(f"chronic {self.id}: negative demand")

    @property
    def T(self) -> int:
        return len(self.gen_p)

    def maintenance_at(self, t: int) -> list[Maintenance]:
        return [m for m in self.maintenance if m.start == t]

    def check_grid(self, grid: Grid) -> None:
        if self.gen_p.shape[1] != len(grid.generators) or self.load_p.shape[1] != len(grid.loads):
            raise ChronicSchemaError(
                f"chronic {self.id}: {self.gen_p.shape[1]} gen / {self.load_p.shape[1]} load columns, "
                f"grid has {len(grid.generators)} / {len(grid.loads)}"
            )
        line_ids = {ln.id for ln in grid.lines}
        for m in self.maintenance:
            if m.line not in line_ids:
                raise ChronicSchemaError(f"chronic {self.id}: maintenance on unknown line {m.line}")


def _timestamps(start: str, step_minutes: int, n: int) -> list[str]:
    t0 = np.datetime64(start, "m")
    return [str(t0 + np.timedelta64(i * step_minutes, "m")) for i in range(n)]


def write_chronic(chronic: Chronic, grid: Grid, path: str | Path) -> None:
    """One row per step: timestamp, gen_<id>..., load_<id>..., maintenance.

    The maintenance cell holds ``line:duration`` items separated by ``;`` for
    outages starting at that step.
    """
    starts: dict[int, list[str]] = {}
    for m in chronic.maintenance:
        starts.setdefault(m.start, []).append(f"{m.line}:{m.duration}")
    header = (["timestamp"] + [f"gen_{g.id}" for g in grid.generators]
              + [f"load_{d.id}" for d in grid.loads] + ["maintenance"])
    stamps = _timestamps(chronic.start, chronic.step_minutes, chronic.T)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(chronic.T):
            w.writerow([stamps[t]] + [f"{v:.4f}" for v in chronic.gen_p[t]]
                       + [f"{v:.4f}" for v in chronic.load_p[t]] + [";".join(starts.get(t, []))])


def read_chronic(path: str | Path, grid: Grid, chronic_id: str | None = None) -> Chronic:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ChronicSchemaError(f"{path}: empty chronic file")
    header, body = rows[0], rows[1:]
    gen_cols = [f"gen_{g.id}" for g in grid.generators]
    load_cols = [f"load_{d.id}" for d in grid.loads]
    try:
        gi = [header.index(c) for c in gen_cols]
        li = [header.index(c) for c in load_cols]
        mi = header.index("maintenance")
        ti = header.index("timestamp")
    except ValueError as exc:
        raise ChronicSchemaError(f"{path}: {exc}") from exc
    gen = np.array([[float(r[i]) for i in gi] for r in body]).reshape(len(body), len(gi))
    load = np.array([[float(r[i]) for i in li] for r in body]).reshape(len(body), len(li))
    maint = []
    for t, r in enumerate(body):
        cell = r[mi].strip()
        if cell:
            for item in cell.split(";"):
                line, dur = item.split(":")
                maint.append(Maintenance(int(line), t, int(dur)))
    step = 5
    if len(body) > 1:
        dt = np.datetime64(body[1][ti], "m") - np.datetime64(body[0][ti], "m")
        step = int(dt / np.timedelta64(1, "m"))
    ch = Chronic(chronic_id or path.stem, gen, load, tuple(maint), step, body[0][ti])
    ch.check_grid(grid)
    return ch


@dataclass(frozen=True)
class RuleConfig:
    p_att: float = 0.02
    sub_cooldown: int = 3
    line_cooldown: int = 3
    attack_cooldown: int = 12
    trip_cooldown: int = 3
    overflow_steps: int = 3
    attackable_lines: tuple[int, ...] | None = None
    forecast_sigma: float = 0.0
    pivot_tol: float = 1e-12
    check_balance: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> RuleConfig:
        data = dict(data)
        if data.get("attackable_lines") is not None:
            data["attackable_lines"] = tuple(int(x) for x in data["attackable_lines"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown rule keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class Observation:
    t: int
    rho: np.ndarray
    rho_max: float
    psi: TopologyVector
    line_status: tuple[bool, ...]
    overflow: tuple[int, ...]
    sub_cooldown: tuple[int, ...]
    line_cooldown: tuple[int, ...]
    gen_p: np.ndarray
    load_p: np.ndarray
    flows: np.ndarray

    def same_as(self, other: Observation) -> bool:
        return (
            self.t == other.t
            and self.psi == other.psi
            and self.line_status == other.line_status
            and self.overflow == other.overflow
            and self.sub_cooldown == other.sub_cooldown
            and self.line_cooldown == other.line_cooldown
            and self.rho_max == other.rho_max
            and np.array_equal(self.rho, other.rho)
            and np.array_equal(self.flows, other.flows)
            and np.array_equal(self.gen_p, other.gen_p)
            and np.array_equal(self.load_p, other.load_p)
        )

    def is_legal(self, action: Action) -> bool:
        if isinstance(action, DoNothing):
            return True
        layout = self.psi.layout
        if isinstance(action, SubstationAction):
            try:
                k = layout.substation_index(action.substation)
            except KeyError:
                return False
            lo, hi = layout.ranges[k]
            return len(action.buses) == hi - lo and self.sub_cooldown[k] == 0
        if isinstance(action, LineReconnect):
            try:
                li = layout.line_ids.index(action.line)
            except ValueError:
                return False
            return not self.line_status[li] and self.line_cooldown[li] == 0
        return False

    def disconnected_lines(self) -> list[int]:
        ids = self.psi.layout.line_ids
        return [ids[i] for i, on in enumerate(self.line_status) if not on]


@dataclass(frozen=True)
class Forecast:
    rho: np.ndarray
    rho_max: float        # inf when infeasible
    feasible: bool
    legal: bool = True
    tripped: tuple[int, ...] = ()


@dataclass
class StepResult:
    observation: Observation
    done: bool
    termination: Termination | None
    info: dict = field(default_factory=dict)


@dataclass
class _Outcome:
    feasible: bool
    reason: str
    status: list[bool]
    counters: np.ndarray
    rho: np.ndarray
    rho_max: float
    flows: np.ndarray
    tripped: list[int]
    first_infeasible: bool
    diverged: bool = False
    residual: float = 0.0


def opponent_maybe_attack(rng: np.random.Generator, line_status, cooldowns, attackable, p_att: float):
    """Return the index of the line to disconnect this step, or None.

    Always consumes two uniforms so the attack schedule of a seed does not
    depend on the agent's trajectory.
    """
    u, v = rng.random(2)
    if p_att <= 0 or u >= p_att:
        return None
    candidates = [i for i in attackable if line_status[i] and cooldowns[i] == 0]
    if not candidates:
        return None
    return candidates[min(int(v * len(candidates)), len(candidates) - 1)]


def episode_seed(seed: int, chronic_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(chronic_id.encode())])


class GridEnv:
    """Single-episode environment.  Not shareable across threads mid-episode."""

    def __init__(self, grid: Grid, rules: RuleConfig | None = None, flow_model: FlowModel | None = None):
        self.grid = grid
        self.rules = rules or RuleConfig()
        self.flow_model = flow_model or FlowModel(grid, pivot_tol=self.rules.pivot_tol)
        lines = grid.layout.line_ids
        if self.rules.attackable_lines is None:
            self._attackable = list(range(len(lines)))
        else:
            self._attackable = [lines.index(l) for l in self.rules.attackable_lines]
        self.chronic: Chronic | None = None
        self.seed = 0
        self.obs: Observation | None = None
        self.done = True
        self.events: list[dict] = []
        self.max_balance_residual = 0.0

    # -- episode control -------------------------------------------------

    def reset(self, chronic: Chronic, seed: int = 0) -> Observation:
        chronic.check_grid(self.grid)
        self.chronic = chronic
        self.seed = int(seed)
        ss = episode_seed(seed, chronic.id)
        self._rng = np.random.default_rng(ss)
        self.events = []
        self.max_balance_residual = 0.0
        n_l, n_s = self.grid.n_lines, len(self.grid.substation_ids)
        psi = self.grid.base_topology()
        status = [True] * n_l
        line_cd = [0] * n_l
        for m in chronic.maintenance_at(0):
            li = self.grid.line_index(m.line)
            status[li] = False
            line_cd[li] = m.duration
        out = self._evaluate(psi, status, np.zeros(n_l, dtype=int), 0, count_overflow=False)
        if not out.feasible:
            raise ChronicSchemaError(f"chronic {chronic.id}: infeasible at t=0 ({out.reason})")
        self.obs = self._make_obs(0, psi, out, (0,) * n_s, tuple(line_cd))
        self.done = False
        return self.obs

    def step(self, action: Action) -> StepResult:
        if self.done or self.obs is None:
            raise EpisodeDoneError("step() called on a finished episode; call reset()")
        obs = self.obs
        rules = self.rules
        info: dict = {"illegal": False, "attack": None, "tripped": [], "switches": 0}
        if not obs.is_legal(action):
            info["illegal"] = True
            action = DO_NOTHING
        info["action"] = action
        if obs.t + 1 >= self.chronic.T:
            # the final entry has been operated through; nothing left to load
            self.obs = replace(obs, t=self.chronic.T)
            self.done = True
            info["steps_survived"] = self.chronic.T
            return StepResult(self.obs, True, Termination.COMPLETED, info)
        psi = obs.psi
        status = list(obs.line_status)
        sub_cd = [max(c - 1, 0) for c in obs.sub_cooldown]
        line_cd = [max(c - 1, 0) for c in obs.line_cooldown]
        if isinstance(action, SubstationAction):
            psi = psi.with_substation(action.substation, action.buses)
            sub_cd[psi.layout.substation_index(action.substation)] = rules.sub_cooldown
            info["switches"] = 1
        elif isinstance(action, LineReconnect):
            li = self.grid.line_index(action.line)
            status[li] = True
            line_cd[li] = rules.line_cooldown
            info["switches"] = 1

        external = False
        hit = opponent_maybe_attack(self._rng, status, line_cd, self._attackable, rules.p_att)
        t_next = obs.t + 1
        if hit is not None:
            status[hit] = False
            line_cd[hit] = rules.attack_cooldown
            external = True
            info["attack"] = self.grid.lines[hit].id
            self.events.append({"t": t_next, "kind": "attack", "line": self.grid.lines[hit].id})
        for m in self.chronic.maintenance_at(t_next):
            li = self.grid.line_index(m.line)
            if status[li]:
                external = True
            status[li] = False
            line_cd[li] = max(line_cd[li], m.duration)
            self.events.append({"t": t_next, "kind": "maintenance", "line": m.line})

        out = self._evaluate(psi, status, np.asarray(obs.overflow), t_next)
        for li in out.tripped:
            line_cd[li] = max(line_cd[li], rules.trip_cooldown)
            self.events.append({"t": t_next, "kind": "trip", "line": self.grid.lines[li].id})
        info["tripped"] = [self.grid.lines[li].id for li in out.tripped]
        info["losses"] = self.flow_model.losses(out.flows) if out.feasible else 0.0

        termination = None
        if not out.feasible:
            if out.diverged:
                termination = Termination.DIVERGENCE
            elif not out.first_infeasible:
                termination = Termination.CASCADE
            elif external:
                termination = Termination.ILLEGAL_STATE_DISCONNECT
            else:
                termination = Termination.ISLANDING
            info["reason"] = out.reason
            self.events.append({"t": t_next, "kind": "game_over", "reason": out.reason})
        self.obs = self._make_obs(t_next, psi, out, tuple(sub_cd), tuple(line_cd))
        self.done = termination is not None
        if termination is not None:
            info["steps_survived"] = t_next
        return StepResult(self.obs, self.done, termination, info)

    # -- forecasts ------------------------------------------------------

    def simulate(self, obs: Observation, action: Action) -> Forecast:
        """Forecast of the next step under ``action``; never mutates the env."""
        legal = obs.is_legal(action)
        psi = obs.psi
        status = list(obs.line_status)
        if legal and isinstance(action, SubstationAction):
            psi = psi.with_substation(action.substation, action.buses)
        elif legal and isinstance(action, LineReconnect):
            status[self.grid.line_index(action.line)] = True
        fc = self._forecast(obs, psi, status)
        return fc if legal else replace(fc, legal=False)

    def simulate_combined(self, obs: Observation, target: TopologyVector) -> Forecast:
        """Forecast with every substation of ``target`` switched at once.

        Cooldowns and the one-substation-per-step rule are ignored.
        """
        psi = apply_actions(obs.psi, topology_diff(target, obs.psi))
        return self._forecast(obs, psi, list(obs.line_status))

    def _forecast(self, obs: Observation, psi: TopologyVector, status: list[bool]) -> Forecast:
        t_next = min(obs.t + 1, self.chronic.T - 1)
        for m in self.chronic.maintenance_at(t_next):
            status[self.grid.line_index(m.line)] = False
        gen, load = self._injections(t_next, forecast=True)
        out = self._evaluate(psi, status, np.asarray(obs.overflow), t_next, gen_load=(gen, load))
        if not out.feasible:
            return Forecast(np.full(self.grid.n_lines, np.inf), float("inf"), False)
        return Forecast(out.rho, out.rho_max, True, True, tuple(out.tripped))

    # -- physics --------------------------------------------------------

    def _injections(self, t: int, forecast: bool = False):
        gen = self.chronic.gen_p[t]
        load = self.chronic.load_p[t]
        sigma = self.rules.forecast_sigma
        if forecast and sigma > 0:
            rng = np.random.default_rng(
                [self.seed & 0xFFFFFFFF, zlib.crc32(self.chronic.id.encode()), t, 1]
            )
            gen = gen * (1 + sigma * rng.standard_normal(gen.shape))
            load = np.maximum(load * (1 + sigma * rng.standard_normal(load.shape)), 0.0)
        return gen, load

    def _evaluate(self, psi, status, prev_counters, t, count_overflow=True, gen_load=None) -> _Outcome:
        fm = self.flow_model
        gen, load = gen_load if gen_load is not None else self._injections(t)
        status = list(status)
        tripped: list[int] = []
        first = True
        limit = self.rules.overflow_steps
        while True:
            topo = psi.with_line_status(status) if tuple(status) != psi.connected else psi
            ct, flows = fm.flows(topo, gen, load)
            if not ct.feasible:
                zeros = np.zeros(self.grid.n_lines)
                return _Outcome(False, ct.islands.reason or "power flow diverged", status,
                                np.zeros(len(status), dtype=int), zeros, float("inf"), zeros,
                                tripped, first, diverged=not ct.converged)
            rho, rho_max = fm.rho(flows, status)
            if count_overflow:
                counters = np.where(rho > 1.0, prev_counters + 1, 0)
            else:
                counters = np.zeros(len(status), dtype=int)
            new = [i for i in range(len(status)) if status[i] and counters[i] >= limit]
            if not new:
                break
            for i in new:
                status[i] = False
                tripped.append(i)
            first = False
        counters[~np.asarray(status)] = 0
        resid = fm.balance_residual(ct, gen, load, flows) if self.rules.check_balance else 0.0
        if resid > self.max_balance_residual:
            self.max_balance_residual = resid
        return _Outcome(True, "", status, counters, rho, rho_max, flows, tripped, first, residual=resid)

    def _make_obs(self, t, psi, out: _Outcome, sub_cd, line_cd) -> Observation:
        gen, load = self._injections(t)
        rho = out.rho.copy()
        rho.flags.writeable = False
        return Observation(
            t=t,
            rho=rho,
            rho_max=out.rho_max if out.feasible else float("inf"),
            psi=psi.with_line_status(out.status),
            line_status=tuple(out.status),
            overflow=tuple(int(c) for c in out.counters),
            sub_cooldown=tuple(sub_cd),
            line_cooldown=tuple(line_cd),
            gen_p=gen,
            load_p=load,
            flows=out.flows,
        )
