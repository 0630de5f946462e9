"""Benchmark runner, scoring and the statistics reported for a roster of agents."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .agents import Agent, DoNothingAgent
from .core import Grid
from .environment import Chronic, GridEnv, RuleConfig
from .powerflow import FlowModel
from .runner import run_episode
from .toposearch import Recorder, TargetTopologySet, TopologyRegistry, frequency_report

log = logging.getLogger(__name__)

SWITCH_COST = 1.0


class PairingError(ValueError):
    """Record and baseline do not describe the same (chronic, seed)."""


class DegenerateSampleError(ValueError):
    pass


class MissingBaselineError(ValueError):
    pass


@dataclass
class EpisodeRecord:
    agent: str
    chronic: str
    seed: int
    T: int
    steps_survived: int
    termination: str
    operation_cost: float = 0.0
    losses: float = 0.0
    switches: int = 0
    illegal: int = 0
    max_balance_residual: float = 0.0
    error: str = ""
    act_times: list[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not 0 <= self.steps_survived <= self.T:
            raise ValueError(f"steps_survived={self.steps_survived} outside [0, {self.T}]")

    @property
    def key(self) -> tuple[str, int]:
        return (self.chronic, self.seed)


# --- scoring ---------------------------------------------------------------

def cost_proxy(ref: EpisodeRecord) -> float:
    """Reference operation cost extrapolated to a full-length episode."""
    if ref.steps_survived == 0:
        return 0.0
    return ref.operation_cost * ref.T / ref.steps_survived


def episode_score(record: EpisodeRecord, dn_baseline: EpisodeRecord,
                  cost_ref: EpisodeRecord | None = None) -> float:
    """Piecewise-linear score in [-100, 100] relative to the Do-Nothing run.

    Parity with the baseline is always 0.  Below parity the score falls
    linearly to -100 at zero survival; above it rises to 80 at completion.
    A completed episode earns up to 20 more for operating cheaper than the
    cost reference (default: the baseline itself).
    """
    if record.key != dn_baseline.key or record.T != dn_baseline.T:
        raise PairingError(f"{record.key} vs baseline {dn_baseline.key}")
    cost_ref = dn_baseline if cost_ref is None else cost_ref
    if cost_ref.key != record.key:
        raise PairingError(f"{record.key} vs cost reference {cost_ref.key}")
    s, s_dn, T = record.steps_survived, dn_baseline.steps_survived, record.T
    if s == s_dn:
        return 0.0
    if s < s_dn:
        return -100.0 * (s_dn - s) / s_dn
    if s < T:
        return 80.0 * (s - s_dn) / (T - s_dn)
    proxy = cost_proxy(cost_ref)
    bonus = 0.0 if proxy <= 0 else max(0.0, 1.0 - record.operation_cost / proxy)
    return float(min(100.0, 80.0 + 20.0 * bonus))


# --- statistics ------------------------------------------------------------

def survival_metrics(records: Sequence[EpisodeRecord]) -> tuple[float, float]:
    """(MST, MSTCM): median over all episodes, and median of per-chronic medians."""
    if not records:
        raise ValueError("no records")
    mst = float(np.median([r.steps_survived for r in records]))
    by_chronic: dict[str, list[int]] = defaultdict(list)
    for r in records:
        by_chronic[r.chronic].append(r.steps_survived)
    mstcm = float(np.median([np.median(v) for v in by_chronic.values()]))
    return mst, mstcm


def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float]:
    """Two-sided Welch t-test (unequal variances)."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise DegenerateSampleError("each sample needs at least two values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        if a.mean() == b.mean():
            return 0.0, 1.0
        raise DegenerateSampleError("both samples have zero variance")
    res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


def welch_df(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    qa, qb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    return (qa + qb) ** 2 / (qa**2 / (a.size - 1) + qb**2 / (b.size - 1))


@dataclass(frozen=True)
class Aggregate:
    n: int
    mean: float
    sd: float
    median: float
    q25: float
    q75: float

    @classmethod
    def of(cls, values: Sequence[float]) -> Aggregate:
        v = np.asarray(values, dtype=float)
        sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
        q25, med, q75 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
        return cls(int(v.size), float(v.mean()), sd, float(med), float(q25), float(q75))


@dataclass
class ScoreTable:
    per_seed: dict[str, dict[int, float]]  # agent -> seed -> mean score over chronics
    aggregates: dict[str, Aggregate]

    @classmethod
    def build(cls, scores: dict[tuple[str, str, int], float]) -> ScoreTable:
        acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
        for (agent, _chronic, seed), s in sorted(scores.items()):
            acc[agent][seed].append(s)
        per_seed = {a: {sd: float(np.mean(v)) for sd, v in sorted(d.items())} for a, d in acc.items()}
        aggs = {a: Aggregate.of(list(d.values())) for a, d in per_seed.items()}
        return cls(per_seed, aggs)

    def seed_means(self, agent: str) -> list[float]:
        return list(self.per_seed[agent].values())


# --- benchmark -------------------------------------------------------------

@dataclass
class BenchmarkResult:
    records: list[EpisodeRecord]
    scores: dict[tuple[str, str, int], float]
    table: ScoreTable
    survival: dict[str, tuple[float, float]]
    ttests: list[dict]
    registries: dict[str, TopologyRegistry]
    agent_order: list[str]

    def record(self, agent: str, chronic: str, seed: int) -> EpisodeRecord:
        for r in self.records:
            if (r.agent, r.chronic, r.seed) == (agent, chronic, seed):
                return r
        raise KeyError((agent, chronic, seed))


def _run_one(grid: Grid, rules: RuleConfig, agent: Agent, chronic: Chronic, seed: int,
             flow_model: FlowModel | None, switch_cost: float) -> tuple[EpisodeRecord, TopologyRegistry]:
    env = GridEnv(grid, rules, flow_model)
    registry = TopologyRegistry()
    rec = Recorder(registry, None, chronic.id, seed)
    try:
        trace = run_episode(env, agent, chronic, seed, on_step=rec)
    except Exception as exc:  # noqa: BLE001 - one bad episode must not stop the run
        log.error("episode %s/%s/%s crashed: %s", agent.name, chronic.id, seed, exc)
        t = env.obs.t if env.obs is not None else 0
        return EpisodeRecord(agent.name, chronic.id, seed, chronic.T, min(t, chronic.T), "ERROR",
                             error=f"{type(exc).__name__}: {exc}"), registry
    term = trace.termination.name if trace.termination is not None else "ERROR"
    return EpisodeRecord(
        agent=agent.name, chronic=chronic.id, seed=seed, T=chronic.T,
        steps_survived=trace.steps_survived, termination=term,
        operation_cost=trace.losses + switch_cost * trace.switches,
        losses=trace.losses, switches=trace.switches, illegal=trace.illegal,
        max_balance_residual=trace.max_balance_residual, error=trace.error,
        act_times=trace.act_times,
    ), registry


def _run_batch(args):
    grid, rules, agent, tasks, switch_cost = args
    model = FlowModel(grid, pivot_tol=rules.pivot_tol)
    return [_run_one(grid, rules, agent, c, s, model, switch_cost) for c, s in tasks]


def run_benchmark(grid: Grid, chronics: Sequence[Chronic], agents: Sequence[Agent],
                  master_seeds: Sequence[int], rules: RuleConfig | None = None,
                  reference: str | None = None, workers: int = 1,
                  switch_cost: float = SWITCH_COST) -> BenchmarkResult:
    """Run every (agent, chronic, seed) episode and score against Do-Nothing.

    ``reference`` names the agent every other agent is t-tested against
    (default: the last non-baseline agent in the roster).
    """
    rules = rules or RuleConfig()
    names = [a.name for a in agents]
    if len(set(names)) != len(names):
        raise ValueError(f"agent names must be unique: {names}")
    dn_names = [a.name for a in agents if isinstance(a, DoNothingAgent)]
    if not dn_names:
        raise MissingBaselineError("roster needs a DoNothing agent to anchor scores")
    if len(set(master_seeds)) != len(master_seeds):
        raise ValueError("master seeds must be distinct")
    dn = dn_names[0]
    tasks = [(c, s) for c in chronics for s in master_seeds]

    outputs: list[tuple[EpisodeRecord, TopologyRegistry]] = []
    if workers <= 1:
        model = FlowModel(grid, pivot_tol=rules.pivot_tol)  # shared cache across the roster
        for agent in agents:
            for c, s in tasks:
                outputs.append(_run_one(grid, rules, agent, c, s, model, switch_cost))
    else:
        jobs = [(grid, rules, a, tasks[i::workers], switch_cost) for a in agents for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for batch in pool.map(_run_batch, jobs):
                outputs.extend(batch)

    order = {n: i for i, n in enumerate(names)}
    outputs.sort(key=lambda o: (order[o[0].agent], o[0].chronic, o[0].seed))
    records = [o[0] for o in outputs]
    registries: dict[str, TopologyRegistry] = {n: TopologyRegistry() for n in names}
    for rec, reg in outputs:
        registries[rec.agent].merge(reg)

    base = {r.key: r for r in records if r.agent == dn}
    scores = {(r.agent, r.chronic, r.seed): episode_score(r, base[r.key]) for r in records}
    table = ScoreTable.build(scores)
    survival = {n: survival_metrics([r for r in records if r.agent == n]) for n in names}

    others = [n for n in names if n != dn]
    ref = reference if reference is not None else (others[-1] if others else dn)
    if ref not in names:
        raise ValueError(f"unknown reference agent {ref!r}")
    ttests = []
    for n in names:
        if n in (ref, dn):
            continue
        a, b = table.seed_means(ref), table.seed_means(n)
        try:
            t, p = welch_t_test(a, b)
        except DegenerateSampleError as exc:
            log.warning("t-test %s vs %s skipped: %s", ref, n, exc)
            t, p = math.nan, math.nan
        ttests.append({"agent_a": ref, "agent_b": n, "mean_a": float(np.mean(a)),
                       "mean_b": float(np.mean(b)), "t": t, "p": p})
    return BenchmarkResult(records, scores, table, survival, ttests, registries, names)


# --- reports ---------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(float(f"{x:.10g}")) if math.isfinite(x) else str(x)
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


RECORD_FIELDS = ("agent", "chronic", "seed", "T", "steps_survived", "termination", "operation_cost",
                 "losses", "switches", "illegal", "max_balance_residual", "error")


def read_records(path: str | Path) -> list[EpisodeRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EpisodeRecord(
                agent=row["agent"], chronic=row["chronic"], seed=int(row["seed"]), T=int(row["T"]),
                steps_survived=int(row["steps_survived"]), termination=row["termination"],
                operation_cost=float(row["operation_cost"]), losses=float(row["losses"]),
                switches=int(row["switches"]), illegal=int(row["illegal"]),
                max_balance_residual=float(row["max_balance_residual"]), error=row["error"],
            ))
    return out


def timing_summary(result: BenchmarkResult) -> list[dict]:
    rows = []
    for n in result.agent_order:
        times = np.concatenate([np.asarray(r.act_times, dtype=float)
                                for r in result.records if r.agent == n] or [np.zeros(0)])
        if times.size == 0:
            continue
        q25, med, q75, p95 = np.quantile(times, [0.25, 0.5, 0.75, 0.95])
        rows.append({"agent": n, "n_calls": int(times.size), "mean_s": float(times.mean()),
                     "median_s": float(med), "q25_s": float(q25), "q75_s": float(q75),
                     "p95_s": float(p95), "max_s": float(times.max())})
    return rows


def write_reports(result: BenchmarkResult, out_dir: str | Path, tt_set: TargetTopologySet | None = None,
                  plots: bool = False) -> None:
    """Write the CSV bundle.  All files except timing.csv are deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "records.csv", RECORD_FIELDS,
               ([getattr(r, f) for f in RECORD_FIELDS] for r in result.records))

    score_rows = []
    for n in result.agent_order:
        a = result.table.aggregates[n]
        score_rows.append([n, a.n, a.mean, a.sd, a.median, a.q25, a.q75,
                           ";".join(_fmt(v) for v in result.table.seed_means(n))])
    _write_csv(out / "scores.csv", ("agent", "n_seeds", "mean", "sd", "median", "q25", "q75", "seed_means"),
               score_rows)
    _write_csv(out / "survival.csv", ("agent", "mst", "mstcm"),
               ([n, *result.survival[n]] for n in result.agent_order))
    _write_csv(out / "ttests.csv", ("agent_a", "agent_b", "mean_a", "mean_b", "t", "p"),
               ([d[k] for k in ("agent_a", "agent_b", "mean_a", "mean_b", "t", "p")] for d in result.ttests))
    timing = timing_summary(result)
    if timing:
        _write_csv(out / "timing.csv", list(timing[0]), ([d[k] for k in timing[0]] for d in timing))

    freq_rows = []
    for n in result.agent_order:
        for row in frequency_report(result.registries[n], tt_set, exclude_base=False):
            freq_rows.append([n, row.rank, row.id, row.counter, int(row.is_target), row.distance,
                              " ".join(map(str, row.changed_substations))])
    _write_csv(out / "topofreq.csv",
               ("agent", "rank", "topology_id", "counter", "is_target", "distance", "changed_substations"),
               freq_rows)
    if plots:
        _plot(result, out)


def _plot(result: BenchmarkResult, out: Path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping plots")
        return
    chronics = sorted({r.chronic for r in result.records})
    fig, ax = plt.subplots(figsize=(max(6, len(chronics)), 4))
    width = 0.8 / len(result.agent_order)
    for i, n in enumerate(result.agent_order):
        med = [np.median([r.steps_survived for r in result.records if r.agent == n and r.chronic == c])
               for c in chronics]
        ax.bar(np.arange(len(chronics)) + i * width, med, width, label=n)
    ax.set_xticks(np.arange(len(chronics)) + 0.4 - width / 2, chronics, rotation=45)
    ax.set_ylabel("median steps survived")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "survival.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for n in result.agent_order:
        counts = [row.counter for row in frequency_report(result.registries[n], None, exclude_base=True)]
        if counts:
            ax.plot(np.arange(1, len(counts) + 1), counts, label=n)
    ax.set_yscale("log")
    ax.set_xlabel("rank")
    ax.set_ylabel("steps at rest")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "topofreq.png", dpi=120)
    plt.close(fig)
