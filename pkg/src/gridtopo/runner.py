"""Single-episode driver shared by the topology search and the benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

from .agents import Agent
from .environment import Chronic, DoNothing, GridEnv, Observation, StepResult, Termination


@dataclass
class EpisodeTrace:
    agent: str
    chronic: str
    seed: int
    T: int
    steps_survived: int = 0
    termination: Termination | None = None
    losses: float = 0.0
    switches: int = 0
    illegal: int = 0
    act_times: list[float] = field(default_factory=list)
    max_balance_residual: float = 0.0
    error: str = ""


StepHook = Callable[[Observation, object, StepResult], None]


def run_episode(env: GridEnv, agent: Agent, chronic: Chronic, seed: int,
                on_step: StepHook | None = None, timed: bool = True) -> EpisodeTrace:
    """Play one chronic to the end.

    ``on_step(obs, action, result)`` is called after every step with the
    observation the action was chosen on.  Exceptions raised by the agent end
    the episode at the current step and are stored in ``trace.error``.
    """
    trace = EpisodeTrace(agent.name, chronic.id, seed, chronic.T)
    obs = env.reset(chronic, seed)
    agent.reset()
    clock = time.perf_counter
    while True:
        try:
            t0 = clock() if timed else 0.0
            action = agent.act(obs, env)
            if timed:
                trace.act_times.append(clock() - t0)
        except Exception as exc:  # noqa: BLE001 - recorded, the sweep continues
            trace.error = f"{type(exc).__name__}: {exc}"
            trace.steps_survived = obs.t
            break
        res = env.step(action)
        info = res.info
        trace.losses += info.get("losses", 0.0)
        trace.switches += info.get("switches", 0)
        trace.illegal += bool(info.get("illegal"))
        if on_step is not None:
            on_step(obs, action, res)
        obs = res.observation
        if res.done:
            trace.termination = res.termination
            trace.steps_survived = info["steps_survived"]
            break
    trace.max_balance_residual = env.max_balance_residual
    return trace


def is_do_nothing(action) -> bool:
    return isinstance(action, DoNothing)
