"""Command-line entry point: ``gridtopo {gen-chronics,search,evaluate,replay}``.

All run settings live in one YAML file.  Relative paths inside it resolve
against the file's own directory.  Without ``--config`` the bundled
14-substation pack is used.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .agents import (
    AgentConfig, DoNothingAgent, PriorPolicy, SeniorAgent, TopologyAgent, TutorAgent, load_action_set,
)
from .chronics import ChronicConfig, ChronicGenerationError, generate_chronics, write_chronics
from .core import Grid, GridSchemaError, load_grid
from .environment import ChronicSchemaError, GridEnv, RuleConfig, read_chronic
from .evaluation import MissingBaselineError, run_benchmark, write_reports
from .toposearch import (
    load_targets, save_experience, save_json, search_target_topologies, select_top_m,
)

log = logging.getLogger("gridtopo")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MASTER_SEED = 8888

DEFAULT_ROSTER = [
    {"type": "do_nothing", "name": "DoNothing"},
    {"type": "senior", "name": "Senior", "rho_senior": 0.95},
    {"type": "senior", "name": "Senior85", "rho_senior": 0.85},
    {"type": "topology", "name": "Topology", "rho_topo": 0.85, "rho_senior": 0.95},
]

AGENT_KEYS = {"type", "name", "rho_tutor", "rho_senior", "rho_topo", "rho_revert", "action_set",
              "targets", "M", "priors"}


class ConfigError(ValueError):
    pass


def bundled_config_path() -> Path:
    return Path(str(resources.files("gridtopo") / "data" / "ieee14" / "pack.yaml"))


def master_seeds(n: int) -> list[int]:
    """``n`` distinct seeds drawn from a fixed generator."""
    rng = np.random.default_rng(MASTER_SEED)
    return sorted(int(s) for s in rng.choice(10_000, size=n, replace=False))


@dataclass
class RunConfig:
    root: Path
    grid: str
    chronics: str
    action_set: str
    output: str = "out"
    targets: str | None = None
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    workers: int = 1
    max_error_fraction: float = 0.0
    rules: dict = field(default_factory=dict)
    agents: list[dict] = field(default_factory=lambda: copy.deepcopy(DEFAULT_ROSTER))
    reference: str | None = None
    plots: bool = False
    search: dict = field(default_factory=dict)
    generate: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict, root: Path) -> RunConfig:
        unknown = set(data) - (set(cls.__dataclass_fields__) - {"root"})
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"grid", "chronics", "action_set"} - set(data)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        cfg = cls(root=root, **data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data, path.resolve().parent)

    def validate(self) -> None:
        seeds = [int(s) for s in self.seeds]
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"seeds must be distinct: {seeds}")
        self.seeds = seeds
        names = []
        for a in self.agents:
            bad = set(a) - AGENT_KEYS
            if bad:
                raise ConfigError(f"agent {a.get('name')}: unknown keys {sorted(bad)}")
            if a.get("type") not in ("do_nothing", "tutor", "senior", "topology"):
                raise ConfigError(f"agent {a.get('name')}: unknown type {a.get('type')!r}")
            names.append(a.get("name", a["type"]))
        if len(set(names)) != len(names):
            raise ConfigError(f"agent names must be unique: {names}")
        if not any(a["type"] == "do_nothing" for a in self.agents):
            raise ConfigError("roster needs a do_nothing agent: scores are anchored on it")
        try:
            RuleConfig.from_dict(self.rules)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"rules: {exc}") from exc

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else self.root / q

    def effective(self) -> dict:
        """Config with defaults resolved and paths made absolute; re-loadable."""
        d = {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__ if k != "root"}
        for k in ("grid", "chronics", "action_set", "output", "targets"):
            if d[k] is not None:
                d[k] = str(self.path(d[k]))
        d["rules"] = {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in vars(RuleConfig.from_dict(self.rules)).items()}
        for a in d["agents"]:
            for k in ("action_set", "targets", "priors"):
                if a.get(k) is not None:
                    a[k] = str(self.path(a[k]))
        s = d["search"]
        for k in ("chronics", "output"):
            if s.get(k) is not None:
                s[k] = str(self.path(s[k]))
        return d


# --- data loading ----------------------------------------------------------

def _load_chronics(cfg: RunConfig, grid: Grid, directory: str):
    d = cfg.path(directory)
    files = sorted(d.glob("*.csv")) if d.is_dir() else []
    if not files:
        raise ConfigError(f"no chronic files in {d}")
    return [read_chronic(f, grid) for f in files]


def build_agent(spec: dict, cfg: RunConfig, grid: Grid, default_actions):
    kind = spec["type"]
    name = spec.get("name", kind)
    if kind == "do_nothing":
        return DoNothingAgent(name)
    actions = default_actions
    if spec.get("action_set"):
        actions = load_action_set(cfg.path(spec["action_set"]), grid)
    thresholds = {k: float(spec[k]) for k in ("rho_tutor", "rho_senior", "rho_topo", "rho_revert") if k in spec}
    targets = ()
    if kind == "topology":
        tpath = cfg.path(spec.get("targets") or cfg.targets)
        if tpath is None or not tpath.exists():
            raise ConfigError(f"agent {name}: target-topology file missing ({tpath}); run `gridtopo search` first")
        tt = load_targets(tpath, grid)
        M = int(spec.get("M", len(tt)))
        if M < 0 or M > len(tt):
            raise ConfigError(f"agent {name}: M={M} but the target file holds {len(tt)} topologies")
        targets = tt.as_targets()[:M]
    acfg = AgentConfig(action_set=actions, target_topologies=targets, **thresholds)
    policy = PriorPolicy.from_file(cfg.path(spec["priors"]), actions) if spec.get("priors") else None
    if kind == "tutor":
        return TutorAgent(acfg, name=name)
    if kind == "senior":
        return SeniorAgent(acfg, policy, name=name)
    return TopologyAgent(acfg, policy, name=name)


def _setup(cfg: RunConfig):
    grid = load_grid(cfg.path(cfg.grid))
    actions = load_action_set(cfg.path(cfg.action_set), grid)
    return grid, actions, RuleConfig.from_dict(cfg.rules)


def _echo(cfg: RunConfig, out: Path, name: str = "effective_config.yaml") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(yaml.safe_dump(cfg.effective(), sort_keys=False))


# --- commands --------------------------------------------------------------

def cmd_gen_chronics(cfg: RunConfig, args) -> int:
    grid = load_grid(cfg.path(cfg.grid))
    gen = cfg.generate
    if not gen.get("sets"):
        raise ConfigError("config has no generate.sets section")
    try:
        ccfg = ChronicConfig.from_dict(gen.get("config", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"generate.config: {exc}") from exc
    for s in gen["sets"]:
        out = cfg.path(s["dir"])
        chronics = generate_chronics(grid, ccfg, int(s["n"]), int(s["seed"]), s.get("prefix", "chronic_"))
        paths = write_chronics(chronics, grid, out)
        print(f"wrote {len(paths)} chronics to {out}")
    return EXIT_OK


def cmd_search(cfg: RunConfig, args) -> int:
    grid, actions, rules = _setup(cfg)
    s = cfg.search
    chronics = _load_chronics(cfg, grid, s.get("chronics", cfg.chronics))
    seeds = [int(x) for x in s.get("seeds", [0])]
    spec = dict(s.get("agent", {"type": "tutor", "name": "Tutor"}))
    if spec.get("type") not in ("tutor", "senior"):
        raise ConfigError("search.agent must be a tutor or senior agent")
    agent = build_agent(spec, cfg, grid, actions)
    M = int(s.get("M", 50))
    out = cfg.path(s.get("output", "search"))
    out.mkdir(parents=True, exist_ok=True)

    registry, experience = search_target_topologies(lambda: GridEnv(grid, rules), agent, chronics, seeds)
    tt = select_top_m(registry, M, exclude_base=bool(s.get("exclude_base", True)))
    save_json(registry.to_dict(), out / "registry.json")
    save_json(tt.to_dict(), out / "targets.json")
    save_experience(experience, out / "experience.jsonl")
    _echo(cfg, out)

    ranked = select_top_m(registry, len(registry))
    total = registry.total() or 1
    print(f"{len(registry)} distinct resting topologies, {registry.total()} resting steps")
    if ranked.ranked:
        top = ranked.ranked[0]
        note = "base" if top.psi == grid.base_topology().busbar_only().canonical() else "not base"
        print(f"most rested: id {top.id} ({note}), {top.counter} steps")
    print("rank  id  counter  cum_share")
    cum = 0
    for e in ranked.ranked[: max(M, 10) + 1]:
        cum += e.counter
        print(f"{e.rank:4d} {e.id:4d} {e.counter:8d}  {cum / total:8.3f}")
    print(f"wrote {len(tt)} target topologies to {out / 'targets.json'}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    grid, actions, rules = _setup(cfg)
    if args.seeds is not None:
        cfg.seeds = master_seeds(args.seeds)
    workers = args.workers if args.workers is not None else cfg.workers
    # build every agent (and so read every file) before any episode runs
    agents = [build_agent(a, cfg, grid, actions) for a in cfg.agents]
    chronics = _load_chronics(cfg, grid, cfg.chronics)
    tt = None
    tpath = cfg.path(cfg.targets)
    if tpath is not None and tpath.exists():
        tt = load_targets(tpath, grid)
    out = cfg.path(args.output or cfg.output)
    _echo(cfg, out)

    result = run_benchmark(grid, chronics, agents, cfg.seeds, rules, reference=cfg.reference, workers=workers)
    write_reports(result, out, tt, plots=cfg.plots)

    print(f"{'agent':<12} {'mean':>7} {'sd':>6} {'median':>7} {'MST':>6} {'MSTCM':>6}")
    for n in result.agent_order:
        a = result.table.aggregates[n]
        mst, mstcm = result.survival[n]
        print(f"{n:<12} {a.mean:7.2f} {a.sd:6.2f} {a.median:7.2f} {mst:6.0f} {mstcm:6.0f}")
    for t in result.ttests:
        print(f"welch {t['agent_a']} vs {t['agent_b']}: t={t['t']:.3f} p={t['p']:.3g}")
    print(f"reports in {out}")

    errors = sum(r.termination == "ERROR" or bool(r.error) for r in result.records)
    frac = errors / max(1, len(result.records))
    if frac > cfg.max_error_fraction:
        log.error("%d of %d episodes failed (limit %.0f%%)", errors, len(result.records),
                  100 * cfg.max_error_fraction)
        return EXIT_RUNTIME
    return EXIT_OK


def _find_record(path: Path, args) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if args.row is not None:
        if not 0 <= args.row < len(rows):
            raise ConfigError(f"row {args.row} out of range (0..{len(rows) - 1})")
        return rows[args.row]
    for r in rows:
        if (r["agent"], r["chronic"], r["seed"]) == (args.agent, args.chronic, str(args.seed)):
            return r
    raise ConfigError(f"no record for {args.agent}/{args.chronic}/{args.seed} in {path}")


def cmd_replay(cfg: RunConfig, args) -> int:
    grid, actions, rules = _setup(cfg)
    row = _find_record(Path(args.records), args)
    spec = next((a for a in cfg.agents if a.get("name", a["type"]) == row["agent"]), None)
    if spec is None:
        raise ConfigError(f"agent {row['agent']!r} not in the config roster")
    agent = build_agent(spec, cfg, grid, actions)
    chronic = next((c for c in _load_chronics(cfg, grid, cfg.chronics) if c.id == row["chronic"]), None)
    if chronic is None:
        raise ConfigError(f"chronic {row['chronic']!r} not found")
    seed = int(row["seed"])

    env = GridEnv(grid, rules)
    obs = env.reset(chronic, seed)
    agent.reset()
    print("t,rho_max,action,illegal,attack,termination")
    while True:
        action = agent.act(obs, env)
        res = env.step(action)
        term = res.termination.name if res.done else ""
        print(f"{obs.t},{obs.rho_max:.6f},{action!r},{int(bool(res.info.get('illegal')))},"
              f"{res.info.get('attack') or ''},{term}")
        obs = res.observation
        if res.done:
            break
    survived = res.info["steps_survived"]
    expected = int(row["steps_survived"])
    if survived != expected or term != row["termination"]:
        print(f"replay mismatch: survived {survived} ({term}) vs recorded {expected} ({row['termination']})",
              file=sys.stderr)
        return EXIT_RUNTIME
    print(f"replay matches record: survived {survived}, {term}")
    return EXIT_OK


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridtopo", description="Topology-control benchmark for DC grid models.")
    p.add_argument("--config", "-c", help="run config (YAML); default: the bundled pack")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-chronics", help="synthesize chronic files")
    sub.add_parser("search", help="collect resting topologies and write the target set")
    ev = sub.add_parser("evaluate", help="run the multi-seed benchmark")
    ev.add_argument("--seeds", type=int, help="use N master seeds instead of the configured list")
    ev.add_argument("--workers", type=int)
    ev.add_argument("--output", "-o", help="report directory")
    rp = sub.add_parser("replay", help="re-run one episode from records.csv step by step")
    rp.add_argument("records")
    rp.add_argument("--row", type=int, help="0-based data row")
    rp.add_argument("--agent")
    rp.add_argument("--chronic")
    rp.add_argument("--seed", type=int)
    return p


COMMANDS = {"gen-chronics": cmd_gen_chronics, "search": cmd_search,
            "evaluate": cmd_evaluate, "replay": cmd_replay}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "replay" and args.row is None and None in (args.agent, args.chronic, args.seed):
        print("error: replay needs --row or all of --agent/--chronic/--seed", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = RunConfig.load(args.config or bundled_config_path())
        if args.config is None:
            # keep reports out of the installed package; inputs still come from it
            cfg.output = str(Path.cwd() / cfg.output)
            cfg.search["output"] = str(Path.cwd() / cfg.search.get("output", "search"))
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, GridSchemaError, ChronicSchemaError, MissingBaselineError,
            ChronicGenerationError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
