"""Synthetic chronic generator.

Loads follow a daily and weekly shape with AR(1) noise.  Renewable units
follow their own noisy profile; dispatchable units cover the residual in
proportion to capacity.  Congestion windows shift power between one
generator and one load so that a chosen line reaches a target loading under
the base topology, with linear ramps at both ends.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Grid
from .environment import Chronic, Maintenance, write_chronic
from .powerflow import FlowModel

log = logging.getLogger(__name__)

STEPS_PER_DAY = 288  # five-minute resolution


class ChronicGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CongestionWindow:
    line: int
    rho: float
    start: int
    duration: int
    ramp: int = 12
    gen: int | None = None   # None: pick the most effective pair automatically
    load: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> CongestionWindow:
        return cls(int(d["line"]), float(d["rho"]), int(d["start"]), int(d["duration"]),
                   int(d.get("ramp", 12)), d.get("gen"), d.get("load"))


@dataclass
class ChronicConfig:
    T: int = 2016
    step_minutes: int = 5
    start: str = "2050-01-03T00:00"
    load_base: dict[int, float] = field(default_factory=dict)
    demand_scale: tuple[float, float] = (1.0, 1.0)
    daily_amplitude: float = 0.15
    weekly_amplitude: float = 0.05
    noise_sigma: float = 0.01
    noise_corr: float = 0.95
    renewables: dict[int, dict] = field(default_factory=dict)  # gen id -> {share, volatility}
    windows: list[CongestionWindow] = field(default_factory=list)
    random_windows: dict = field(default_factory=dict)
    maintenance: list[Maintenance] = field(default_factory=list)
    random_maintenance: dict = field(default_factory=dict)
    max_retries: int = 3
    retry_scale: float = 0.9

    @classmethod
    def from_dict(cls, d: dict) -> ChronicConfig:
        d = dict(d)
        if "load_base" in d:
            d["load_base"] = {int(k): float(v) for k, v in d["load_base"].items()}
        if "demand_scale" in d:
            d["demand_scale"] = tuple(float(x) for x in d["demand_scale"])
        if "renewables" in d:
            d["renewables"] = {int(k): dict(v) for k, v in d["renewables"].items()}
        d["windows"] = [CongestionWindow.from_dict(w) for w in d.get("windows", [])]
        d["maintenance"] = [Maintenance(int(m["line"]), int(m["start"]), int(m["duration"]))
                            for m in d.get("maintenance", [])]
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown chronic config keys: {sorted(unknown)}")
        return cls(**d)


def _smooth_noise(rng: np.random.Generator, sigma: float, corr: float, shape) -> np.ndarray:
    T = shape[0]
    out = np.zeros(shape)
    if sigma == 0:
        rng.standard_normal(shape)  # keep the stream aligned with the noisy case
        return out
    eps = rng.standard_normal(shape) * sigma * np.sqrt(1 - corr**2)
    out[0] = rng.standard_normal(shape[1:]) * sigma
    for t in range(1, T):
        out[t] = corr * out[t - 1] + eps[t]
    return out


def _time_shape(T: int, daily: float, weekly: float, phase: float) -> np.ndarray:
    t = np.arange(T)
    day = 2 * np.pi * (t / STEPS_PER_DAY) + phase
    # morning and evening peaks, trough at night
    d = -np.cos(day) * 0.7 - 0.3 * np.cos(2 * day)
    w = np.where((t // STEPS_PER_DAY) % 7 >= 5, -1.0, 0.3)
    return 1.0 + daily * d + weekly * w


def _dispatch(grid: Grid, load_p: np.ndarray, renew: dict[int, np.ndarray]) -> np.ndarray:
    T = load_p.shape[0]
    G = len(grid.generators)
    gen_p = np.zeros((T, G))
    pmax = np.array([g.p_max for g in grid.generators])
    disp = np.array([g.id not in renew for g in grid.generators])
    for gi, g in enumerate(grid.generators):
        if g.id in renew:
            gen_p[:, gi] = np.clip(renew[g.id], 0, g.p_max)
    residual = load_p.sum(axis=1) - gen_p.sum(axis=1)
    if disp.any():
        share = pmax * disp / (pmax * disp).sum()
        gen_p += np.clip(residual, 0, None)[:, None] * share[None, :]
        gen_p = np.minimum(gen_p, pmax)
    return gen_p


def _apply_window(model: FlowModel, grid: Grid, gen_p, load_p, w: CongestionWindow) -> None:
    """Shift power in place so ``w.line`` reaches ``w.rho`` inside the window."""
    psi = grid.base_topology()
    ct = model.compile(psi)
    if not ct.feasible:
        raise ChronicGenerationError("base topology infeasible")
    F = ct.flow_map
    G = len(grid.generators)
    li = grid.line_index(w.line)
    limit = grid.lines[li].thermal_limit
    T = gen_p.shape[0]
    lo, hi = max(0, w.start), min(T, w.start + w.duration)
    if lo >= hi:
        return
    f_mid = F[li] @ np.concatenate([gen_p[(lo + hi) // 2], load_p[(lo + hi) // 2]])
    direction = 1.0 if f_mid >= 0 else -1.0

    gens = range(G) if w.gen is None else [[g.id for g in grid.generators].index(w.gen)]
    loads = range(len(grid.loads)) if w.load is None else [[d.id for d in grid.loads].index(w.load)]
    best = max(((F[li, g] + F[li, G + d]) * direction, g, d) for g in gens for d in loads)
    sens, g, d = best
    if sens <= 1e-9:
        raise ChronicGenerationError(f"no generator/load pair raises the flow on line {w.line}")
    pmax = grid.generators[g].p_max
    for t in range(lo, hi):
        ramp = min(1.0, (t - lo + 1) / max(w.ramp, 1), (hi - t) / max(w.ramp, 1))
        f = direction * (F[li] @ np.concatenate([gen_p[t], load_p[t]]))
        delta = max(0.0, (w.rho * limit - f) / sens) * ramp
        delta = min(delta, pmax - gen_p[t, g])
        gen_p[t, g] += delta
        load_p[t, d] += delta


def _random_windows(rng: np.random.Generator, spec: dict, T: int) -> list[CongestionWindow]:
    if not spec:
        return []
    lo, hi = spec.get("count", (1, 1))
    n = int(rng.integers(lo, hi + 1))
    lines = spec["lines"]
    out = []
    for _ in range(n):
        line = lines[int(rng.integers(len(lines)))]
        if isinstance(line, dict):
            line, gen, load = int(line["line"]), line.get("gen"), line.get("load")
        else:
            gen = load = None
        dur = int(rng.integers(spec.get("duration", (48, 144))[0], spec.get("duration", (48, 144))[1] + 1))
        start = int(rng.integers(0, max(1, T - dur)))
        rho = float(rng.uniform(*spec.get("rho", (1.0, 1.2))))
        out.append(CongestionWindow(int(line), rho, start, dur, int(spec.get("ramp", 12)), gen, load))
    return sorted(out, key=lambda w: w.start)


def _random_maintenance(rng: np.random.Generator, spec: dict, T: int) -> list[Maintenance]:
    if not spec:
        return []
    lo, hi = spec.get("count", (0, 1))
    n = int(rng.integers(lo, hi + 1))
    dlo, dhi = spec.get("duration", (12, 48))
    out = []
    for _ in range(n):
        line = spec["lines"][int(rng.integers(len(spec["lines"])))]
        dur = int(rng.integers(dlo, dhi + 1))
        out.append(Maintenance(int(line), int(rng.integers(1, max(2, T - dur))), dur))
    return sorted(out, key=lambda m: (m.start, m.line))


def generate_chronic(grid: Grid, cfg: ChronicConfig, seed: int, chronic_id: str,
                     model: FlowModel | None = None) -> Chronic:
    model = model or FlowModel(grid)
    scale = 1.0
    for attempt in range(cfg.max_retries + 1):
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        chronic = _generate(grid, cfg, rng, chronic_id, model, scale)
        if _feasible_at_start(grid, chronic, model):
            return chronic
        log.warning("chronic %s infeasible at t=0, retrying with demand x%.3f", chronic_id, scale * cfg.retry_scale)
        scale *= cfg.retry_scale
    raise ChronicGenerationError(f"chronic {chronic_id}: infeasible base case after {cfg.max_retries} retries")


def _feasible_at_start(grid: Grid, chronic: Chronic, model: FlowModel) -> bool:
    cap = sum(g.p_max for g in grid.generators)
    if not np.isfinite(chronic.load_p).all() or chronic.load_p[0].sum() > cap + 1e-9:
        return False
    status = [True] * grid.n_lines
    for m in chronic.maintenance_at(0):
        status[grid.line_index(m.line)] = False
    psi = grid.base_topology().with_line_status(status) if not all(status) else grid.base_topology()
    ct, _ = model.flows(psi, chronic.gen_p[0], chronic.load_p[0])
    return ct.feasible


def _generate(grid: Grid, cfg: ChronicConfig, rng: np.random.Generator, chronic_id: str,
              model: FlowModel, scale: float) -> Chronic:
    T, D = cfg.T, len(grid.loads)
    base = np.array([cfg.load_base.get(d.id, 0.0) for d in grid.loads])
    if not base.any():
        raise ChronicGenerationError("load_base is empty")
    phase = float(rng.uniform(-0.2, 0.2))
    level = float(rng.uniform(*cfg.demand_scale)) * scale
    shape = _time_shape(T, cfg.daily_amplitude, cfg.weekly_amplitude, phase)
    noise = _smooth_noise(rng, cfg.noise_sigma, cfg.noise_corr, (T, D))
    load_p = np.clip(level * base[None, :] * (shape[:, None] + noise), 0, None)

    renew = {}
    for gid, r in sorted(cfg.renewables.items()):
        g = grid.generators[[x.id for x in grid.generators].index(gid)]
        vol = float(r.get("volatility", 0.0))
        prof = float(r.get("share", 0.3)) * g.p_max * (1 + _smooth_noise(rng, vol, 0.99, (T, 1))[:, 0])
        renew[gid] = prof
    gen_p = _dispatch(grid, load_p, renew)

    windows = list(cfg.windows) + _random_windows(rng, cfg.random_windows, T)
    for w in windows:
        _apply_window(model, grid, gen_p, load_p, w)
    maint = list(cfg.maintenance) + _random_maintenance(rng, cfg.random_maintenance, T)
    return Chronic(chronic_id, np.round(gen_p, 4), np.round(load_p, 4), tuple(maint),
                   cfg.step_minutes, cfg.start)


def chronic_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_chronics(grid: Grid, cfg: ChronicConfig, n: int, seed: int, prefix: str = "chronic_") -> list[Chronic]:
    model = FlowModel(grid)
    return [generate_chronic(grid, cfg, s, f"{prefix}{i:03d}", model)
            for i, s in enumerate(chronic_seeds(seed, n))]


def write_chronics(chronics: Sequence[Chronic], grid: Grid, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in chronics:
        p = out / f"{c.id}.csv"
        write_chronic(c, grid, p)
        paths.append(p)
    return paths
