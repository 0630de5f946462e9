from __future__ import annotations

from itertools import product

import numpy as np
import pytest

from gridtopo.core import Generator, Grid, Line, Load, SubstationAction
from gridtopo.environment import Chronic, GridEnv, RuleConfig

# Five substations; line 3 (2-4) is overloaded in the base topology at full load.
# Moving lines 4 and 6 to bus 2 of substation 4 relieves it.
FIVE_LINES = (
    Line(1, 1, 2, 0.1, 200), Line(2, 1, 3, 0.1, 250), Line(3, 2, 4, 0.1, 100),
    Line(4, 3, 4, 0.1, 100), Line(5, 3, 5, 0.1, 150), Line(6, 4, 5, 0.1, 100),
)
FULL_GEN = np.array([100.0, 200.0])
FULL_LOAD = np.array([60.0, 80.0, 160.0])
SPLIT4 = SubstationAction(4, (1, 2, 2, 1))


def make_five() -> Grid:
    return Grid(FIVE_LINES, (Generator(1, 1, 300), Generator(2, 2, 300)),
                (Load(1, 3), Load(2, 4), Load(3, 5)), (1, 2, 3, 4, 5), name="five")


def all_splits(grid: Grid) -> tuple[SubstationAction, ...]:
    acts: list[SubstationAction] = []
    for sub in grid.substation_ids:
        n = len(grid.substation(sub).element_slots)
        for buses in product((1, 2), repeat=n):
            a = SubstationAction(sub, buses)
            if a.is_split and a not in acts:
                acts.append(a)
    return tuple(acts)


def constant_chronic(gen, load, T: int, cid: str = "c", maintenance=()) -> Chronic:
    return Chronic(cid, np.tile(np.asarray(gen, float), (T, 1)), np.tile(np.asarray(load, float), (T, 1)),
                   tuple(maintenance))


def stress_chronic(T: int = 50, calm: int = 20, cid: str = "stress") -> Chronic:
    """Half load for ``calm`` steps, then full load."""
    g = np.tile(FULL_GEN, (T, 1))
    d = np.tile(FULL_LOAD, (T, 1))
    g[:calm] *= 0.5
    d[:calm] *= 0.5
    return Chronic(cid, g, d)


@pytest.fixture
def five() -> Grid:
    return make_five()


@pytest.fixture
def five_actions(five) -> tuple[SubstationAction, ...]:
    return all_splits(five)


@pytest.fixture
def calm_rules() -> RuleConfig:
    return RuleConfig(p_att=0.0)


@pytest.fixture
def triangle() -> Grid:
    lines = (Line(1, 1, 2, 0.1, 50), Line(2, 1, 3, 0.1, 50), Line(3, 2, 3, 0.1, 50))
    return Grid(lines, (Generator(1, 1, 200),), (Load(1, 2), Load(2, 3)), (1, 2, 3), name="triangle")


def random_grid(rng: np.random.Generator, n_subs: int, extra_lines: int) -> Grid:
    """Connected random grid: a random spanning tree plus extra chords."""
    order = rng.permutation(n_subs) + 1
    edges = []
    for i in range(1, n_subs):
        edges.append((int(order[rng.integers(i)]), int(order[i])))
    for _ in range(extra_lines):
        a, b = rng.choice(n_subs, 2, replace=False) + 1
        edges.append((int(a), int(b)))
    lines = tuple(Line(i + 1, a, b, float(rng.uniform(0.02, 0.5)), float(rng.uniform(50, 300)))
                  for i, (a, b) in enumerate(edges))
    gen_subs = rng.choice(n_subs, max(1, n_subs // 3), replace=False) + 1
    gens = tuple(Generator(i + 1, int(s), float(rng.uniform(50, 300))) for i, s in enumerate(gen_subs))
    load_subs = rng.choice(n_subs, max(1, n_subs // 2), replace=False) + 1
    loads = tuple(Load(i + 1, int(s)) for i, s in enumerate(load_subs))
    return Grid(lines, gens, loads, tuple(range(1, n_subs + 1)))


def random_topology(grid: Grid, rng: np.random.Generator, p_split: float = 0.4):
    psi = grid.base_topology()
    for sub in grid.substation_ids:
        if rng.random() < p_split:
            n = len(grid.substation(sub).element_slots)
            psi = psi.with_substation(sub, tuple(int(b) for b in rng.integers(1, 3, n)))
    return psi


@pytest.fixture
def env_five(five, calm_rules) -> GridEnv:
    return GridEnv(five, calm_rules)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
