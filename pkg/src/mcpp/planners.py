"""Episode loops: plan one via-point, execute it, observe, repeat.

``run_mdp_episode`` plans against the known obstacles. ``run_pomdp_episode``
plans against a belief map that is updated after every observed collision;
after a collision the robot retreats and plans again from where it stopped.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import belief as bel
from . import space
from .mcts import StrategyConfig, goal_rollout, search
from .space import Config, Environment, Path


@dataclass
class EpisodeResult:
    success: bool
    collisions: int
    replans: int
    wall_time: float
    path: Path
    seed: int = 0
    steps: int = 0
    trace: list = field(default_factory=list, repr=False)


def default_eps(env: Environment) -> float:
    return float(env.param("eps", env.init_goal_distance / 5.0))


def strategy_for(env: Environment, kind: str = "UCT", **overrides) -> StrategyConfig:
    """StrategyConfig with the environment's step size and action count filled in."""
    kw = dict(kind=kind, eps_ball=default_eps(env))
    if "num_actions" in env.params:
        kw["num_actions"] = int(env.params["num_actions"])
    if "horizon" in env.params:
        kw["horizon"] = int(env.params["horizon"])
    kw.update(overrides)
    return StrategyConfig(**kw)


def pomdp_config_for(env: Environment, **overrides) -> bel.PomdpConfig:
    eps = default_eps(env)
    p = env.params.get("pomdp", {})
    kw = dict(
        obs_radius=p.get("obs_radius", eps),
        backtrack_dist=p.get("backtrack_dist", eps / 4.0),
        max_replans=p.get("max_replans", 30),
        max_steps=p.get("max_steps", 300),
    )
    kw.update(overrides)
    return bel.PomdpConfig(**kw)


def check_step(env: Environment, eps: float) -> float:
    return float(env.param("check_step", eps / 10.0))


# -------------------------------------------------------------------- simulators


class MdpSimulator:
    """Planning model with full knowledge of the obstacles.

    Expansion rejects via-points whose segment collides (up to ``max_resamples``
    redraws each). A free step of length d pays ``1 - d / eps``; the goal is
    absorbing and pays 1 per remaining step, so a branch reaching the goal
    returns ``horizon - cost / eps``. A collision pays 0 and ends the branch.
    """

    def __init__(self, env: Environment, step: Optional[float] = None, max_resamples: int = 50):
        self.env = env
        self.step_size = step
        self.max_resamples = max_resamples
        self.resample_events = 0
        self.eps = default_eps(env)

    def _step_size(self, cfg_eps: float) -> float:
        return self.step_size if self.step_size is not None else check_step(self.env, cfg_eps)

    def propose_actions(self, state: Config, cfg: StrategyConfig, rng):
        """Draw free via-points; after ``max_resamples`` rounds keep colliding ones."""
        env = self.env
        step = self._step_size(cfg.eps_ball)
        self._last_step = step
        self.eps = cfg.eps_ball
        m = cfg.num_actions
        targets = np.empty((m, env.dimension))
        filled = 0
        rejected = None
        for _ in range(self.max_resamples + 1):
            need = m - filled
            cand = space.sample_in_ball(state, cfg.eps_ball, env.lo, env.hi, rng, 2 * need)
            free = space.segments_free_batch(env, state, cand, step)
            good = cand[free][:need]
            targets[filled : filled + len(good)] = good
            filled += len(good)
            if filled == m:
                break
            self.resample_events += int((~free).sum())
            rejected = cand[~free]
        known = np.ones(m, dtype=bool)
        if filled < m:
            known[filled:] = False
            targets[filled:] = rejected[: m - filled]
        return targets, known

    def step(self, state: Config, target: Config, known_free=None):
        env = self.env
        if known_free is None:
            step = self.step_size if self.step_size is not None else getattr(self, "_last_step", None)
            if step is None:
                step = check_step(env, env.init_goal_distance / 5.0)
            known_free = space.segment_free(env, state, target, step).free
        if not known_free:
            return target, 0.0, True
        reward = max(0.0, 1.0 - space.distance(state, target) / self.eps)
        return target, reward, env.in_goal(target)

    def rollout(self, state: Config) -> float:
        return goal_rollout(self.env, state)

    def segment_rewards(self, points: np.ndarray) -> np.ndarray:
        lengths = np.sqrt((np.diff(points, axis=0) ** 2).sum(axis=1))
        return np.maximum(0.0, 1.0 - lengths / self.eps)

    def absorbing_reward(self, state: Config) -> float:
        return 1.0 if self.env.in_goal(state) else 0.0

    def is_goal(self, state: Config) -> bool:
        return self.env.in_goal(state)


class GridSimulator(MdpSimulator):
    """MDP model whose action set is the free part of a cell's 4-neighbourhood.

    Blocked or out-of-bounds moves are left out, mirroring the rejection of
    colliding via-points in the continuous model; if every move is blocked
    all four are offered and pay the collision reward.
    """

    MOVES = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])

    def __init__(self, env: Environment, cell: Optional[float] = None):
        cell = float(cell if cell is not None else env.param("cell", 1.0))
        super().__init__(env, step=cell / 4.0)
        self.cell = cell

    def propose_actions(self, state: Config, cfg: StrategyConfig, rng):
        targets = np.asarray(state, dtype=float)[None, :] + self.cell * self.MOVES
        free = space.segments_free_batch(self.env, state, targets, self.step_size)
        if free.any():
            return targets[free], free[free]
        return targets, free


def mdp_simulator_for(env: Environment) -> MdpSimulator:
    if env.param("discrete_actions", False):
        return GridSimulator(env)
    return MdpSimulator(env)


# ---------------------------------------------------------------------- episodes


def run_mdp_episode(env: Environment, cfg: StrategyConfig, rng, seed: int = 0, max_replans: int = 30) -> EpisodeResult:
    sim = mdp_simulator_for(env)
    step = sim.step_size if sim.step_size is not None else check_step(env, cfg.eps_ball)
    current = env.x_init.copy()
    path = Path.from_waypoints([current])
    wall = 0.0
    steps = 0
    limit = cfg.horizon * max_replans
    while not env.in_goal(current) and steps < limit:
        t0 = time.perf_counter()
        target = search(current, sim, cfg, rng)
        wall += time.perf_counter() - t0
        steps += 1
        if not space.segment_free(env, current, target, step).free:
            # every candidate collided; stay put and plan again
            continue
        current = np.asarray(target, dtype=float)
        path.append(current)
    return EpisodeResult(env.in_goal(current), 0, steps, wall, path, seed, steps)


def run_pomdp_episode(
    env: Environment,
    cfg: StrategyConfig,
    pomdp_cfg: bel.PomdpConfig,
    rng,
    seed: int = 0,
    record_trace: bool = False,
    choose=None,
) -> EpisodeResult:
    """MCPP with a belief map: plan a via-point, execute it, update on collision.

    ``choose(state, sim, cfg, rng)`` replaces the tree search when given, which
    lets one-step baselines share this loop.
    """
    choose = choose or search
    belief = bel.belief_for(env)
    sim = bel.BeliefSimulator(env, belief)
    step = pomdp_cfg.check_step or check_step(env, cfg.eps_ball)
    current = env.x_init.copy()
    path = Path.from_waypoints([current])
    trace = []
    wall = 0.0
    collisions = 0
    plans = 0
    steps = 0
    while not env.in_goal(current):
        if collisions >= pomdp_cfg.max_replans or steps >= pomdp_cfg.max_steps:
            break
        t0 = time.perf_counter()
        target = choose(current, sim, cfg, rng)
        wall += time.perf_counter() - t0
        plans += 1
        steps += 1
        new_state, obs, collided = bel.execute_and_observe(env, current, target, pomdp_cfg, step)
        if collided:
            collisions += 1
            bel.apply_observation(belief, obs)
        if record_trace:
            trace.append(_trace_row(current, new_state, collided, obs, belief))
        current = new_state
        path.append(current)
    return EpisodeResult(env.in_goal(current), collisions, plans, wall, path, seed, steps, trace)


def _trace_row(frm, to, collided, obs, belief) -> dict:
    row = {
        "from": [float(v) for v in frm],
        "to": [float(v) for v in to],
        "collided": bool(collided),
    }
    if collided:
        row["update_at"] = [float(v) for v in obs.point]
        row["observed_cells"] = int(belief.observed_mask().sum())
    return row


def write_trace(result: EpisodeResult, path) -> None:
    """One line per executed segment: from, to, collided, belief-update summary."""
    lines = []
    for row in result.trace:
        frm = ",".join(repr(v) for v in row["from"])
        to = ",".join(repr(v) for v in row["to"])
        extra = ""
        if row["collided"]:
            extra = " update_at=" + ",".join(repr(v) for v in row["update_at"])
            extra += f" observed_cells={row['observed_cells']}"
        lines.append(f"{frm} -> {to} collided={int(row['collided'])}{extra}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
