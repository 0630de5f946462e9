from collections import deque
from dataclasses import replace
from itertools import permutations

import numpy as np
import pytest

from conftest import FULL_GEN, FULL_LOAD, SPLIT4, constant_chronic, random_grid, random_topology
from gridtopo.agents import (
    ActionBuffer, AgentConfig, DoNothingAgent, PriorPolicy, SeniorAgent, SimulationGreedyPolicy,
    TopologyAgent, TutorAgent, buffer_drain, do_nothing_act, load_action_set, reversion_check,
    save_action_set, senior_act, topology_agent_act, tutor_act,
)
from gridtopo.core import SubstationAction, apply_action, apply_actions, canonical_hash, topology_diff
from gridtopo.environment import DO_NOTHING, DoNothing, Forecast, GridEnv, LineReconnect, RuleConfig

INF = float("inf")


class StubSim:
    """Scripted forecasts keyed by the topology reached; counts calls."""

    def __init__(self, by_topology=None, default=0.5, dn=None):
        self.by_topology = {canonical_hash(k): v for k, v in (by_topology or {}).items()}
        self.default = default
        self.dn = dn
        self.calls = 0
        self.combined_calls = 0

    def _fc(self, r):
        return Forecast(np.array([r]), r, r != INF)

    def simulate(self, obs, action):
        self.calls += 1
        if isinstance(action, DoNothing):
            return self._fc(self.dn if self.dn is not None else obs.rho_max)
        if isinstance(action, LineReconnect):
            return self._fc(self.default)
        psi = apply_action(obs.psi, action)
        return self._fc(self.by_topology.get(canonical_hash(psi), self.default))

    def simulate_combined(self, obs, target):
        self.combined_calls += 1
        return self._fc(self.by_topology.get(canonical_hash(target.with_line_status(obs.psi.connected)),
                                             self.default))


@pytest.fixture
def obs0(env_five):
    return env_five.reset(constant_chronic(FULL_GEN, FULL_LOAD, 20))


def frozen(obs, rho_max, psi=None):
    return replace(obs, rho_max=rho_max, psi=psi if psi is not None else obs.psi)


def test_do_nothing_always(obs0):
    assert do_nothing_act(obs0) == DO_NOTHING
    assert do_nothing_act(frozen(obs0, 2.0)) == DO_NOTHING
    assert DoNothingAgent().act(frozen(obs0, 2.0), None) == DO_NOTHING


def test_tutor_idle_when_calm(obs0, five_actions):
    cfg = AgentConfig(action_set=five_actions)
    assert tutor_act(frozen(obs0, 0.5), cfg, StubSim()) == DO_NOTHING


def test_tutor_picks_split4(env_five, obs0, five_actions):
    cfg = AgentConfig(action_set=five_actions)
    assert tutor_act(obs0, cfg, env_five) == SPLIT4
    forecasts = sorted((env_five.simulate(obs0, a).rho_max, i) for i, a in enumerate(five_actions))
    assert five_actions[forecasts[0][1]] == SPLIT4 and forecasts[0][0] < forecasts[1][0]


def test_tutor_tie_breaks_on_index(obs0, five):
    a1, a2 = SubstationAction(4, (1, 2, 2, 1)), SubstationAction(3, (1, 2, 2, 1))
    sim = StubSim({apply_action(obs0.psi, a1): 0.7, apply_action(obs0.psi, a2): 0.7 + 1e-13}, default=1.5)
    for order in ((a1, a2), (a2, a1)):
        cfg = AgentConfig(action_set=order)
        assert tutor_act(frozen(obs0, 1.2), cfg, sim) == order[0]


def test_reversion_cases(obs0, five):
    cfg = AgentConfig(action_set=(SPLIT4,))
    assert reversion_check(frozen(obs0, 0.3), cfg, StubSim()) is None
    split = five.topology({4: SPLIT4.buses})
    base = five.base_topology()
    ok = StubSim({base: 0.4})
    assert reversion_check(frozen(obs0, 0.3, split), cfg, ok) == SubstationAction(4, (1, 1, 1, 1))
    bad = StubSim({base: 0.95})
    assert reversion_check(frozen(obs0, 0.3, split), cfg, bad) is None


def test_reversion_one_substation_per_call(obs0, five):
    psi = five.topology({4: SPLIT4.buses, 3: (1, 1, 2, 1)})
    sim = StubSim({five.topology({3: (1, 1, 2, 1)}): 0.5, five.topology({4: SPLIT4.buses}): 0.3})
    act = reversion_check(frozen(obs0, 0.3, psi), AgentConfig(action_set=(SPLIT4,)), sim)
    assert act == SubstationAction(3, (1, 1, 1, 1))


def test_senior_single_qualifier(obs0):
    a1, a2 = SubstationAction(4, (1, 2, 2, 1)), SubstationAction(3, (1, 2, 2, 1))
    sim = StubSim({apply_action(obs0.psi, a1): 1.2, apply_action(obs0.psi, a2): 0.9}, default=1.3)
    uniform = PriorPolicy({}, default=0.0)
    cfg = AgentConfig(action_set=(a1, a2))
    assert senior_act(frozen(obs0, 1.3), cfg, uniform, sim) == a2


def test_senior_stops_after_first_qualifier(obs0, five_actions):
    target = five_actions[7]
    sim = StubSim({apply_action(obs0.psi, target): 0.5}, default=0.6)
    policy = PriorPolicy({target: 1.0})
    act = senior_act(frozen(obs0, 1.3), AgentConfig(action_set=five_actions), policy, sim)
    assert act == target and sim.calls == 1


def test_senior_fallback_argmin(obs0):
    acts = (SubstationAction(4, (1, 2, 2, 1)), SubstationAction(3, (1, 2, 2, 1)), SubstationAction(2, (1, 2, 1)))
    sim = StubSim({apply_action(obs0.psi, acts[0]): 1.25, apply_action(obs0.psi, acts[1]): 1.1,
                   apply_action(obs0.psi, acts[2]): 1.4}, dn=1.3)
    act = senior_act(frozen(obs0, 1.3), AgentConfig(action_set=acts), SimulationGreedyPolicy(), sim)
    assert act == acts[1]


def test_topology_gap_does_nothing(obs0):
    cfg = AgentConfig(action_set=(SPLIT4,))
    buf = topology_agent_act(frozen(obs0, 0.83), cfg, SimulationGreedyPolicy(), StubSim())
    assert list(buf.queue) == [DO_NOTHING]


def test_topology_two_step_target(obs0, five):
    target = five.topology({4: SPLIT4.buses, 3: (1, 1, 2, 1)})
    cfg = AgentConfig(action_set=(SPLIT4,), target_topologies=((7, target),))
    sim = StubSim({target: 0.6})
    buf = topology_agent_act(frozen(obs0, 0.9), cfg, SimulationGreedyPolicy(), sim)
    assert len(buf.queue) == 2 and buf.origin == 7
    assert all(isinstance(a, SubstationAction) for a in buf.queue)
    assert apply_actions(obs0.psi, buf.queue) == target


def test_topology_high_load_skips_targets(obs0, five):
    target = five.topology({4: SPLIT4.buses})
    cfg = AgentConfig(action_set=(SPLIT4,), target_topologies=((1, target),))
    sim = StubSim({target: 0.5})
    buf = topology_agent_act(frozen(obs0, 1.1), cfg, SimulationGreedyPolicy(), sim)
    assert list(buf.queue) == [SPLIT4] and sim.combined_calls == 0


def test_tt_selection_minimum_then_rank(obs0, five):
    t1 = five.topology({4: SPLIT4.buses})
    t2 = five.topology({3: (1, 1, 2, 1)})
    t3 = five.topology({2: (1, 2, 1)})
    cfg = AgentConfig(action_set=(SPLIT4,), target_topologies=((1, t1), (2, t2), (3, t3)))
    buf = topology_agent_act(frozen(obs0, 0.9), cfg, SimulationGreedyPolicy(), StubSim({t1: 0.84, t2: 0.7, t3: 0.7}))
    assert buf.origin == 2
    buf = topology_agent_act(frozen(obs0, 0.9), cfg, SimulationGreedyPolicy(), StubSim({t1: 0.86, t2: 0.9, t3: 0.85}))
    assert list(buf.queue) == [DO_NOTHING]  # nothing strictly below 0.85


def test_drain_single(obs0):
    buf = ActionBuffer(deque([SPLIT4]))
    assert buffer_drain(buf, obs0, StubSim()) == SPLIT4
    assert len(buf) == 0


def test_drain_order_follows_forecast(obs0, five):
    a, b = SubstationAction(3, (1, 1, 2, 1)), SPLIT4
    fc = {apply_action(obs0.psi, a): 0.8, apply_action(obs0.psi, b): 0.7,
          apply_actions(obs0.psi, [a, b]): 0.6}
    sim = StubSim(fc)
    # exhaustive oracle: the order whose first intermediate state forecasts lowest
    best = min(permutations([a, b]), key=lambda p: fc[apply_action(obs0.psi, p[0])])
    buf = ActionBuffer(deque([a, b]))
    assert buffer_drain(buf, obs0, sim) == best[0] == b
    nxt = replace(obs0, psi=apply_action(obs0.psi, b))
    assert buffer_drain(buf, nxt, sim) == a and len(buf) == 0


def test_drain_invalidated_by_cooldown(obs0):
    buf = ActionBuffer(deque([SPLIT4]), origin=3)
    cd = list(obs0.sub_cooldown)
    cd[3] = 12
    assert buffer_drain(buf, replace(obs0, sub_cooldown=tuple(cd)), StubSim()) == DO_NOTHING
    assert len(buf) == 0 and buf.origin is None


def test_drain_invalidated_by_infeasible_forecast(obs0):
    buf = ActionBuffer(deque([SPLIT4]))
    sim = StubSim({apply_action(obs0.psi, SPLIT4): INF})
    assert buffer_drain(buf, obs0, sim) == DO_NOTHING and len(buf) == 0


def branch_of(agent_cfg, obs, sim):
    buf = topology_agent_act(obs, agent_cfg, SimulationGreedyPolicy(), sim)
    first = buf.queue[0]
    if buf.origin is not None:
        return "tt"
    if isinstance(first, DoNothing):
        return "nothing"
    if first.buses == (1,) * len(first.buses):
        return "reversion"
    return "senior"


def test_threshold_state_machine(obs0, five):
    split = five.topology({3: (1, 1, 2, 1)})
    target = five.topology({4: SPLIT4.buses, 3: (1, 1, 2, 1)})
    cfg = AgentConfig(action_set=(SPLIT4,), target_topologies=((5, target),))
    sim = StubSim({five.base_topology(): 0.5, target: 0.6})
    got = [branch_of(cfg, frozen(obs0, r, split), sim) for r in (0.79, 0.82, 0.86, 0.96)]
    assert got == ["reversion", "nothing", "tt", "senior"]


@pytest.mark.parametrize("rho", np.linspace(0.5, 1.3, 33))
def test_branch_exclusivity(obs0, five, rho):
    split = five.topology({3: (1, 1, 2, 1)})
    target = five.topology({4: SPLIT4.buses, 3: (1, 1, 2, 1)})
    cfg = AgentConfig(action_set=(SPLIT4,), target_topologies=((5, target),))
    sim = StubSim({five.base_topology(): 0.5, target: 0.6})
    got = branch_of(cfg, frozen(obs0, float(rho), split), sim)
    expected = ("senior" if rho > 0.95 else "tt" if rho > 0.85 else "nothing" if rho >= 0.8 else "reversion")
    assert got == expected


def test_reconnection_first(env_five, obs0):
    status = list(obs0.line_status)
    status[3] = False
    obs = replace(obs0, line_status=tuple(status), psi=obs0.psi.with_line_status(status), rho_max=1.2)
    act = TopologyAgent(AgentConfig(action_set=(SPLIT4,))).act(obs, StubSim(default=0.4, dn=1.2))
    assert act == LineReconnect(4)


def _play(agent, grid, chronic, seed, rules):
    env = GridEnv(grid, rules)
    obs = env.reset(chronic, seed)
    agent.reset()
    seq = []
    while True:
        a = agent.act(obs, env)
        seq.append(a)
        res = env.step(a)
        obs = res.observation
        if res.done:
            return seq, res.info["steps_survived"]


def test_m_zero_matches_senior(five, five_actions):
    rng = np.random.default_rng(0)
    T = 150
    scale = 0.75 + 0.3 * np.sin(np.linspace(0, 6 * np.pi, T))[:, None]
    ch = constant_chronic(FULL_GEN, FULL_LOAD, T)
    ch = type(ch)("wave", ch.gen_p * scale, ch.load_p * scale * rng.uniform(0.98, 1.02, (T, 1)))
    rules = RuleConfig(p_att=0.05, attackable_lines=(4, 5))
    senior = SeniorAgent(AgentConfig(action_set=five_actions))
    topo = TopologyAgent(AgentConfig(action_set=five_actions))
    for seed in range(3):
        s, n1 = _play(senior, five, ch, seed, rules)
        t, n2 = _play(topo, five, ch, seed, rules)
        assert s == t and n1 == n2
        assert any(isinstance(a, SubstationAction) for a in s)


def test_agents_are_replayable(five, five_actions):
    T = 80
    ch = constant_chronic(FULL_GEN, FULL_LOAD, T)
    rules = RuleConfig(p_att=0.05, attackable_lines=(4,))
    target = five.topology({4: SPLIT4.buses})
    for agent in (TutorAgent(AgentConfig(action_set=five_actions)),
                  TopologyAgent(AgentConfig(action_set=five_actions, target_topologies=((1, target),)))):
        assert _play(agent, five, ch, 2, rules) == _play(agent, five, ch, 2, rules)


def test_buffer_soundness_random_pairs():
    rng = np.random.default_rng(99)
    for _ in range(200):
        grid = random_grid(rng, int(rng.integers(3, 15)), int(rng.integers(0, 6)))
        cur, tgt = random_topology(grid, rng), random_topology(grid, rng)
        buf = ActionBuffer(deque(topology_diff(tgt, cur)))
        obs = _fake_obs(grid, cur)
        sim = _RandomSim(rng)
        while buf.queue:
            a = buffer_drain(buf, obs, sim)
            obs = replace(obs, psi=apply_action(obs.psi, a))
        assert obs.psi == tgt.canonical()


class _RandomSim:
    def __init__(self, rng):
        self.rng = rng

    def simulate(self, obs, action):
        r = float(self.rng.uniform(0, 1))
        return Forecast(np.array([r]), r, True)


def _fake_obs(grid, psi):
    from gridtopo.environment import Observation
    L, S = grid.n_lines, len(grid.substation_ids)
    return Observation(0, np.zeros(L), 0.0, psi, psi.connected, (0,) * L, (0,) * S, (0,) * L,
                       np.zeros(len(grid.generators)), np.zeros(len(grid.loads)), np.zeros(L))


def test_config_validation():
    with pytest.raises(ValueError):
        AgentConfig(rho_topo=0.97)
    with pytest.raises(ValueError):
        TutorAgent(AgentConfig())
    with pytest.raises(ValueError):
        SeniorAgent(AgentConfig())


def test_action_set_file(five, tmp_path):
    acts = (SPLIT4, SubstationAction(3, (1, 1, 2, 1)))
    p = tmp_path / "a.json"
    save_action_set(acts, p)
    assert load_action_set(p, five) == acts
    p.write_text('[{"substation": 4, "bus2": ["line4", "line6"]}]')
    assert load_action_set(p, five) == (SPLIT4,)
