"""Linearised (DC) power flow over the bus graph induced by a topology.

An *effective bus* is one occupied busbar of a substation.  Only active
elements occupy a busbar: generators, loads and the ends of connected lines.
The end of a disconnected line does not keep a busbar alive.

Sign convention: a line flow is positive from its ``from`` end to its ``to``
end; bus injections are positive for generation.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .core import LINE, Grid, TopologyVector

PIVOT_TOL = 1e-12


class NonConvergenceError(RuntimeError):
    """Loadings were requested from a solution that did not converge."""


@dataclass(frozen=True)
class EffectiveBusGraph:
    buses: tuple[tuple[int, int], ...]          # (substation id, busbar)
    line_bus: tuple[tuple[int, int] | None, ...]  # per line, None if disconnected
    reactance: np.ndarray                       # per line, p.u.
    injection: np.ndarray                       # per bus, MW, before slack balancing
    gen_weight: np.ndarray                      # per bus, summed generator p_max
    n_gens: np.ndarray                          # per bus
    n_loads: np.ndarray                         # per bus
    base_mva: float

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    def edges(self) -> list[tuple[int, int, int]]:
        """``(line index, from bus, to bus)`` for every connected line."""
        return [(i, fb[0], fb[1]) for i, fb in enumerate(self.line_bus) if fb is not None]


@dataclass(frozen=True)
class FlowSolution:
    flow: np.ndarray        # per line, MW (0 for disconnected lines)
    theta: np.ndarray       # per effective bus, rad
    injection: np.ndarray   # balanced per-bus injection actually solved, MW
    converged: bool


@dataclass(frozen=True)
class LoadingVector:
    rho: np.ndarray
    rho_max: float


@dataclass(frozen=True)
class IslandReport:
    components: tuple[tuple[int, ...], ...]
    fatal: bool
    reason: str = ""


def _bus_map(grid: Grid, psi: TopologyVector):
    """Effective bus index per slot (-1 for inactive slots) and the bus list."""
    layout = grid.layout
    active = [False] * layout.n_slots
    for li, (fs, ts) in enumerate(layout.line_slots):
        if psi.connected[li]:
            active[fs] = active[ts] = True
    for i, ref in enumerate(layout.elements):
        if ref.kind != LINE:
            active[i] = True
    slot_bus = [-1] * layout.n_slots
    buses: list[tuple[int, int]] = []
    for sub_id, (lo, hi) in zip(layout.substation_ids, layout.ranges):
        for busbar in (1, 2):
            members = [i for i in range(lo, hi) if active[i] and psi.bus[i] == busbar]
            if members:
                for i in members:
                    slot_bus[i] = len(buses)
                buses.append((sub_id, busbar))
    return slot_bus, buses


def build_effective_graph(grid: Grid, psi: TopologyVector, gen_p, load_p) -> EffectiveBusGraph:
    """Merge slots into effective buses according to ``psi``.

    ``gen_p`` and ``load_p`` are per-generator output and per-load demand in
    MW, ordered like ``grid.generators`` and ``grid.loads``.
    """
    gen_p = np.asarray(gen_p, dtype=float)
    load_p = np.asarray(load_p, dtype=float)
    if gen_p.shape != (len(grid.generators),) or load_p.shape != (len(grid.loads),):
        raise ValueError("an injection is needed for every generator and load")
    slot_bus, buses = _bus_map(grid, psi)
    nb = len(buses)
    inj = np.zeros(nb)
    wgt = np.zeros(nb)
    n_gens = np.zeros(nb, dtype=int)
    n_loads = np.zeros(nb, dtype=int)
    for k, (g, s) in enumerate(zip(grid.generators, grid.gen_slots())):
        b = slot_bus[s]
        inj[b] += gen_p[k]
        wgt[b] += g.p_max
        n_gens[b] += 1
    for k, s in enumerate(grid.load_slots()):
        b = slot_bus[s]
        inj[b] -= load_p[k]
        n_loads[b] += 1
    line_bus = tuple(
        (slot_bus[fs], slot_bus[ts]) if psi.connected[li] else None
        for li, (fs, ts) in enumerate(grid.layout.line_slots)
    )
    return EffectiveBusGraph(
        buses=tuple(buses),
        line_bus=line_bus,
        reactance=np.array([ln.reactance for ln in grid.lines]),
        injection=inj,
        gen_weight=wgt,
        n_gens=n_gens,
        n_loads=n_loads,
        base_mva=grid.base_mva,
    )


def connected_components(n: int, edges) -> list[list[int]]:
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for _, a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for v in range(n):
        groups.setdefault(find(v), []).append(v)
    return sorted(groups.values(), key=lambda c: c[0])


def detect_islands(graph: EffectiveBusGraph) -> IslandReport:
    """Partition the effective buses; any split or unfed component is fatal.

    Every effective bus hosts at least one element, so a second component
    always means some element has lost its path to the slack component.
    """
    comps = connected_components(graph.n_buses, graph.edges())
    reason = ""
    if len(comps) > 1:
        reason = f"grid split into {len(comps)} components"
    elif comps:
        c = comps[0]
        if graph.n_loads[c].sum() > 0 and graph.n_gens[c].sum() == 0:
            reason = "load without generation"
        elif graph.n_gens[c].sum() > 0 and graph.n_loads[c].sum() == 0:
            reason = "generation without load"
    return IslandReport(tuple(tuple(c) for c in comps), bool(reason), reason)


def balance_injections(graph: EffectiveBusGraph, comps=None) -> np.ndarray:
    """Absorb each component's imbalance by its generators, pro rata p_max.

    A component without generator capacity dumps its imbalance on its lowest
    bus (the slack).
    """
    if comps is None:
        comps = connected_components(graph.n_buses, graph.edges())
    p = graph.injection.copy()
    for c in comps:
        c = np.asarray(c)
        mismatch = p[c].sum()
        w = graph.gen_weight[c]
        if w.sum() > 0:
            p[c] -= mismatch * w / w.sum()
        else:
            p[c[0]] -= mismatch
    return p


def solve_dc(graph: EffectiveBusGraph, pivot_tol: float = PIVOT_TOL) -> FlowSolution:
    """Solve ``B theta = P`` per connected component, slack = lowest bus."""
    nb = graph.n_buses
    edges = graph.edges()
    comps = connected_components(nb, edges)
    p_mw = balance_injections(graph, comps)
    p = p_mw / graph.base_mva
    theta = np.zeros(nb)
    converged = True
    B = np.zeros((nb, nb))
    for li, a, b in edges:
        y = 1.0 / graph.reactance[li]
        B[a, a] += y
        B[b, b] += y
        B[a, b] -= y
        B[b, a] -= y
    for c in comps:
        rest = c[1:]
        if not rest:
            continue
        Bc = B[np.ix_(rest, rest)]
        lu, piv = lu_factor(Bc, check_finite=False)
        scale = max(np.abs(Bc).max(), 1.0)
        if np.abs(np.diag(lu)).min() < pivot_tol * scale:
            converged = False
            continue
        theta[rest] = lu_solve((lu, piv), p[rest], check_finite=False)
    flow = np.zeros(len(graph.line_bus))
    for li, a, b in edges:
        flow[li] = (theta[a] - theta[b]) / graph.reactance[li] * graph.base_mva
    return FlowSolution(flow=flow, theta=theta, injection=p_mw, converged=converged)


def loadings(sol: FlowSolution, grid: Grid, connected=None) -> LoadingVector:
    if not sol.converged:
        raise NonConvergenceError("loadings need a converged power flow")
    limits = np.array([ln.thermal_limit for ln in grid.lines])
    rho = np.abs(sol.flow) / limits
    if connected is not None:
        mask = np.asarray(connected, dtype=bool)
        rho = np.where(mask, rho, 0.0)
        rho_max = float(rho[mask].max()) if mask.any() else 0.0
    else:
        rho_max = float(rho.max()) if rho.size else 0.0
    return LoadingVector(rho=rho, rho_max=rho_max)


def bus_balance_residual(graph: EffectiveBusGraph, sol: FlowSolution) -> float:
    """Max over non-slack buses of |net injection - sum of outgoing flows| (MW)."""
    out = np.zeros(graph.n_buses)
    for li, a, b in graph.edges():
        out[a] += sol.flow[li]
        out[b] -= sol.flow[li]
    comps = connected_components(graph.n_buses, graph.edges())
    slack = {c[0] for c in comps}
    res = [abs(sol.injection[i] - out[i]) for i in range(graph.n_buses) if i not in slack]
    return max(res, default=0.0)


# --- cached sensitivity model ------------------------------------------------

@dataclass(frozen=True)
class CompiledTopology:
    """Linear map from element injections to line flows for one topology.

    ``flow_map`` has shape (lines, generators + loads) and acts on
    ``[gen_p, load_p]``; it already contains the slack balancing.  ``balance``
    maps the same vector to balanced bus injections and ``incidence`` maps line
    flows to bus outflows, so conservation can be checked cheaply.
    """

    islands: IslandReport
    converged: bool
    flow_map: np.ndarray | None
    balance: np.ndarray | None
    incidence: np.ndarray | None
    slack: int

    @property
    def feasible(self) -> bool:
        return self.converged and not self.islands.fatal


class FlowModel:
    """DC flows for one grid with per-topology factorisations cached.

    Equivalent to ``build_effective_graph`` + ``solve_dc`` for feasible
    topologies (one component that holds generation and load).
    """

    def __init__(self, grid: Grid, pivot_tol: float = PIVOT_TOL, cache_size: int = 20000):
        self.grid = grid
        self.pivot_tol = pivot_tol
        self.cache_size = cache_size
        self._cache: OrderedDict = OrderedDict()
        self.limits = np.array([ln.thermal_limit for ln in grid.lines])
        self.reactance = np.array([ln.reactance for ln in grid.lines])
        self._gen_slots = grid.gen_slots()
        self._load_slots = grid.load_slots()
        self._gen_pmax = np.array([g.p_max for g in grid.generators])
        self.hits = 0
        self.misses = 0

    def compile(self, psi: TopologyVector) -> CompiledTopology:
        key = (psi.bus, psi.connected)
        hit = self._cache.get(key)
        if hit is not None:
            self.hits += 1
            self._cache.move_to_end(key)
            return hit
        self.misses += 1
        out = self._compile(psi)
        self._cache[key] = out
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return out

    def _compile(self, psi: TopologyVector) -> CompiledTopology:
        grid = self.grid
        G, D, L = len(grid.generators), len(grid.loads), grid.n_lines
        graph = build_effective_graph(grid, psi, np.zeros(G), np.zeros(D))
        report = detect_islands(graph)
        if report.fatal or graph.n_buses == 0:
            return CompiledTopology(report, True, None, None, None, 0)
        nb = graph.n_buses
        slot_bus, _ = _bus_map(grid, psi)
        M = np.zeros((nb, G + D))
        for g, s in enumerate(self._gen_slots):
            M[slot_bus[s], g] = 1.0
        for d, s in enumerate(self._load_slots):
            M[slot_bus[s], G + d] = -1.0
        w = graph.gen_weight / graph.gen_weight.sum()
        # balanced bus injection = (M - w 1^T) p
        bal = M - np.outer(w, M.sum(axis=0))
        A = np.zeros((L, nb))
        y = np.zeros(L)
        for li, a, b in graph.edges():
            A[li, a] = 1.0
            A[li, b] = -1.0
            y[li] = 1.0 / self.reactance[li]
        B = A.T @ (y[:, None] * A)
        Br = B[1:, 1:]
        if nb > 1:
            lu, piv = lu_factor(Br, check_finite=False)
            scale = max(np.abs(Br).max(), 1.0)
            if np.abs(np.diag(lu)).min() < self.pivot_tol * scale:
                return CompiledTopology(report, False, None, None, None, 0)
            # theta (rad) = Br^-1 P_pu; flow_MW = y * (A theta) * base = y * A Br^-1 P_MW
            theta_map = np.zeros((nb, G + D))
            theta_map[1:] = lu_solve((lu, piv), bal[1:], check_finite=False)
            F = (y[:, None] * A) @ theta_map
        else:
            F = np.zeros((L, G + D))
        return CompiledTopology(report, True, F, bal, A.T.copy(), 0)

    def flows(self, psi: TopologyVector, gen_p, load_p) -> tuple[CompiledTopology, np.ndarray | None]:
        ct = self.compile(psi)
        if not ct.feasible:
            return ct, None
        p = np.concatenate([np.asarray(gen_p, float), np.asarray(load_p, float)])
        return ct, ct.flow_map @ p

    def rho(self, flows: np.ndarray, connected) -> tuple[np.ndarray, float]:
        mask = np.asarray(connected, dtype=bool)
        rho = np.abs(flows) / self.limits
        rho[~mask] = 0.0
        return rho, float(rho.max()) if mask.any() else 0.0

    def balance_residual(self, ct: CompiledTopology, gen_p, load_p, flows) -> float:
        p = np.concatenate([np.asarray(gen_p, float), np.asarray(load_p, float)])
        resid = ct.balance @ p - ct.incidence @ flows
        resid[ct.slack] = 0.0
        return float(np.abs(resid).max()) if resid.size else 0.0

    def losses(self, flows: np.ndarray) -> float:
        """Loss proxy sum(x * f^2) in MW with f in per unit."""
        base = self.grid.base_mva
        return float(np.sum(self.reactance * (flows / base) ** 2) * base)
