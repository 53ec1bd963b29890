"""Comparison planners: RRT*, POMCP with progressive widening, and two heuristics.

Every planner here can run a belief-map episode with the same loop shape as
MCPP, and ``PLANNERS`` maps a display name to a uniform episode runner so the
benchmark harness can treat them interchangeably.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import belief as bel
from . import space
from .mcts import POWER_UCT, TENTS, UCT, QEdge, Search, StrategyConfig, VNode
from .planners import (
    EpisodeResult,
    _trace_row,
    check_step,
    default_eps,
    pomdp_config_for,
    run_mdp_episode,
    run_pomdp_episode,
    strategy_for,
)
from .space import Config, ContractError, Environment, Path

# ------------------------------------------------------------------------ RRT*


@dataclass
class RrtStarConfig:
    """RRT* settings. ``neighbor_radius`` defaults to twice ``step``.

    ``cost_weight`` scales the ``-log p_success`` term of belief edges and
    defaults to half the start-goal distance. ``rewire=False`` turns the
    planner into plain RRT.
    """

    max_samples: int = 500
    step: float = 0.1
    neighbor_radius: Optional[float] = None
    goal_bias_permille: int = 100
    feasibility: float = 0.5
    check_step: Optional[float] = None
    cost_weight: Optional[float] = None
    rewire: bool = True

    def __post_init__(self):
        if self.max_samples < 1:
            raise ContractError("max_samples must be positive")
        if not self.step > 0:
            raise ContractError("step must be positive")
        if not 0 <= self.goal_bias_permille <= 1000:
            raise ContractError("goal_bias_permille must lie in [0, 1000]")
        if self.neighbor_radius is None:
            self.neighbor_radius = 2.0 * self.step
        if not self.neighbor_radius > 0:
            raise ContractError("neighbor_radius must be positive")


@dataclass
class RrtResult:
    """Tree and outcome of one RRT* run.

    ``best_cost_history[i]`` is the best cost-to-goal after sample ``i + 1``
    (``inf`` while no node reaches the goal region).
    """

    nodes: np.ndarray
    parent: np.ndarray
    cost: np.ndarray
    edge_cost: np.ndarray
    goal_nodes: List[int]
    best_cost_history: np.ndarray
    path: Optional[Path]

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    def branch(self, i: int) -> List[np.ndarray]:
        """Waypoints from the root to node ``i``."""
        chain = []
        while i >= 0:
            chain.append(self.nodes[i])
            i = int(self.parent[i])
        return chain[::-1]

    def nearest_to(self, point: Config) -> int:
        d = ((self.nodes - np.asarray(point)) ** 2).sum(axis=1)
        return int(np.argmin(d))


class _EdgeModel:
    """Feasibility and cost of a tree edge under full or belief knowledge."""

    def __init__(self, env: Environment, cfg: RrtStarConfig, belief: Optional[bel.BeliefMap]):
        self.env = env
        self.belief = belief
        self.threshold = cfg.feasibility
        self.check = cfg.check_step if cfg.check_step is not None else check_step(env, cfg.step if math.isfinite(cfg.step) else default_eps(env))
        self.weight = cfg.cost_weight if cfg.cost_weight is not None else env.init_goal_distance / 2.0

    def __call__(self, a: np.ndarray, b: np.ndarray, length: float) -> Optional[float]:
        """Edge cost, or None when the edge is infeasible."""
        if self.belief is None:
            return length if space.segment_free(self.env, a, b, self.check).free else None
        p = bel.p_success(self.belief, self.env, a, b)
        if p < self.threshold:
            return None
        return length + self.weight * (-math.log(p))


def rrt_star_plan(
    env: Environment,
    cfg: RrtStarConfig,
    rng: np.random.Generator,
    belief: Optional[bel.BeliefMap] = None,
    start: Optional[Config] = None,
) -> RrtResult:
    """Grow an RRT* tree from ``start`` (default ``env.x_init``).

    Without a belief, edges must pass ``segment_free`` and cost their length.
    With a belief, edges need ``p_success >= cfg.feasibility`` and cost
    ``length + w * (-log p_success)``. The result carries the best path to
    the goal region, or ``path=None`` when no node reached it.
    """
    root = env.x_init if start is None else np.asarray(start, dtype=float)
    d = env.dimension
    cap = cfg.max_samples + 1
    nodes = np.empty((cap, d))
    parent = np.full(cap, -1, dtype=np.int64)
    cost = np.zeros(cap)
    edge_cost = np.zeros(cap)
    children: List[List[int]] = [[]]
    nodes[0] = root
    n = 1
    goal_nodes: List[int] = [0] if env.in_goal(root) else []
    history = np.empty(cfg.max_samples)
    edge = _EdgeModel(env, cfg, belief)
    bias = cfg.goal_bias_permille / 1000.0
    r2 = cfg.neighbor_radius**2

    for k in range(cfg.max_samples):
        if rng.random() < bias:
            sample = env.x_goal.copy()
        else:
            sample = rng.uniform(env.lo, env.hi)
        d2 = ((nodes[:n] - sample) ** 2).sum(axis=1)
        near_i = int(np.argmin(d2))
        dist = math.sqrt(d2[near_i])
        if dist > 0.0:
            new = sample if dist <= cfg.step else nodes[near_i] + (sample - nodes[near_i]) * (cfg.step / dist)
            length = min(dist, cfg.step)
            c_near = edge(nodes[near_i], new, length)
            if c_near is not None:
                best_parent, best_edge = near_i, c_near
                if cfg.rewire:
                    nd2 = ((nodes[:n] - new) ** 2).sum(axis=1)
                    near = np.flatnonzero(nd2 <= r2)
                    near_len = np.sqrt(nd2[near])
                    # choose-parent: scan by the length lower bound, stop once it cannot win
                    order = np.argsort(cost[near] + near_len, kind="stable")
                    best_total = cost[near_i] + c_near
                    for j in order:
                        i = int(near[j])
                        if cost[i] + near_len[j] >= best_total:
                            break
                        if i == near_i or near_len[j] == 0.0:
                            continue
                        c = edge(nodes[i], new, float(near_len[j]))
                        if c is not None and cost[i] + c < best_total:
                            best_parent, best_edge, best_total = i, c, cost[i] + c
                m = n
                nodes[m] = new
                parent[m] = best_parent
                edge_cost[m] = best_edge
                cost[m] = cost[best_parent] + best_edge
                children[best_parent].append(m)
                children.append([])
                n += 1
                if env.in_goal(new):
                    goal_nodes.append(m)
                if cfg.rewire:
                    for j in range(near.shape[0]):
                        i = int(near[j])
                        if i == best_parent or near_len[j] == 0.0:
                            continue
                        if cost[m] + near_len[j] >= cost[i]:
                            continue
                        c = edge(new, nodes[i], float(near_len[j]))
                        if c is None or cost[m] + c >= cost[i]:
                            continue
                        children[int(parent[i])].remove(i)
                        parent[i] = m
                        edge_cost[i] = c
                        children[m].append(i)
                        _propagate(i, cost[m] + c - cost[i], cost, children)
        history[k] = min((cost[i] for i in goal_nodes), default=math.inf)

    nodes, parent, cost, edge_cost = nodes[:n], parent[:n], cost[:n], edge_cost[:n]
    result = RrtResult(nodes, parent, cost, edge_cost, goal_nodes, history, None)
    if goal_nodes:
        best = min(goal_nodes, key=lambda i: cost[i])
        result.path = Path.from_waypoints(result.branch(best))
    return result


def _propagate(i: int, delta: float, cost: np.ndarray, children: List[List[int]]) -> None:
    stack = [i]
    while stack:
        j = stack.pop()
        cost[j] += delta
        stack.extend(children[j])


def audit_tree(result: RrtResult, tol: float = 1e-9) -> bool:
    """True when parents form a tree rooted at 0 and cost labels match edge sums."""
    n = result.size
    if result.parent[0] != -1:
        return False
    for i in range(1, n):
        seen = 0
        j = i
        total = 0.0
        while j != 0:
            if seen > n:
                return False
            total += result.edge_cost[j]
            j = int(result.parent[j])
            if j < 0:
                return False
            seen += 1
        if abs(total - result.cost[i]) > tol * max(1.0, abs(total)):
            return False
    return True


def rrt_config_for(env: Environment, budget: int = 500, **overrides) -> RrtStarConfig:
    kw = dict(max_samples=budget, step=default_eps(env))
    kw.update(env.params.get("rrt", {}))
    kw.update(overrides)
    return RrtStarConfig(**kw)


def run_rrt_star_pomdp_episode(
    env: Environment,
    cfg: RrtStarConfig,
    pomdp_cfg: bel.PomdpConfig,
    rng: np.random.Generator,
    seed: int = 0,
    record_trace: bool = False,
) -> EpisodeResult:
    """Plan with RRT* on the belief, execute edge by edge, replan after contact.

    When no node reaches the goal region the branch to the node nearest the
    goal is executed instead, so the robot keeps exploring.
    """
    belief = bel.belief_for(env)
    step = pomdp_cfg.check_step or check_step(env, cfg.step if math.isfinite(cfg.step) else default_eps(env))
    current = env.x_init.copy()
    path = Path.from_waypoints([current])
    trace = []
    wall = 0.0
    collisions = plans = steps = 0
    while not env.in_goal(current):
        if collisions >= pomdp_cfg.max_replans or steps >= pomdp_cfg.max_steps:
            break
        t0 = time.perf_counter()
        result = rrt_star_plan(env, cfg, rng, belief=belief, start=current)
        wall += time.perf_counter() - t0
        plans += 1
        if result.path is not None:
            waypoints = result.path.waypoints
        else:
            waypoints = result.branch(result.nearest_to(env.x_goal))
        if len(waypoints) < 2:
            steps += 1
            continue
        for target in waypoints[1:]:
            new_state, obs, collided = bel.execute_and_observe(env, current, target, pomdp_cfg, step)
            steps += 1
            if collided:
                collisions += 1
                bel.apply_observation(belief, obs)
            if record_trace:
                trace.append(_trace_row(current, new_state, collided, obs, belief))
            current = new_state
            path.append(current)
            if collided or env.in_goal(current) or steps >= pomdp_cfg.max_steps:
                break
    return EpisodeResult(env.in_goal(current), collisions, plans, wall, path, seed, steps, trace)


def run_rrt_star_mdp_episode(env: Environment, cfg: RrtStarConfig, rng, seed: int = 0) -> EpisodeResult:
    """One RRT* run on the known obstacles; success iff a goal path exists."""
    t0 = time.perf_counter()
    result = rrt_star_plan(env, cfg, rng)
    wall = time.perf_counter() - t0
    if result.path is None:
        return EpisodeResult(False, 0, 1, wall, Path.from_waypoints([env.x_init]), seed, 0)
    path = result.path
    return EpisodeResult(True, 0, 1, wall, path, seed, len(path.waypoints) - 1)


# ------------------------------------------------------------------ POMCP-DPW


@dataclass
class DpwConfig(StrategyConfig):
    """UCT settings plus progressive widening: children <= min(|A|, k_a * N**alpha_a)."""

    k_a: float = 1.0
    alpha_a: float = 0.5

    def __post_init__(self):
        super().__post_init__()
        if self.kind != UCT:
            raise ContractError("progressive widening runs with UCT selection")
        if not self.k_a > 0:
            raise ContractError("k_a must be positive")
        if not 0 < self.alpha_a < 1:
            raise ContractError("alpha_a must lie in (0, 1)")


def widening_cap(cfg: DpwConfig, visits: int) -> float:
    return min(float(cfg.num_actions), cfg.k_a * visits**cfg.alpha_a)


class DpwSearch(Search):
    """Tree search that adds one sampled via-point at a time."""

    def __init__(self, sim, cfg: DpwConfig, rng):
        super().__init__(sim, cfg, rng)
        self._one = dataclasses.replace(cfg, num_actions=1)

    def populate(self, node: VNode) -> None:
        # edges are added one at a time by simulate_v
        pass

    def simulate_v(self, node: VNode, depth: int) -> None:
        if len(node.edges) + 1 <= widening_cap(self.cfg, node.N + 1):
            targets, known = self.sim.propose_actions(node.state, self._one, self.rng)
            node.edges.append(QEdge(targets[0], None if known is None else bool(known[0])))
        super().simulate_v(node, depth)


def pomcp_dpw_search(root: Config, sim, cfg: DpwConfig, rng) -> Config:
    """Next via-point from a progressive-widening UCT tree."""
    return DpwSearch(sim, cfg, rng).run(root)


# ----------------------------------------------------------------- heuristics


def _p_success_fan(belief: bel.BeliefMap, env: Environment, state: Config, targets: np.ndarray) -> np.ndarray:
    """p_success from ``state`` to each target, via one polyline pass."""
    refs = space.reference_points(env, targets)
    origin = env.reference_point(state)
    zigzag = np.empty((2 * refs.shape[0], refs.shape[1]))
    zigzag[0::2] = origin
    zigzag[1::2] = refs
    return bel.p_success_chain(belief, zigzag)[0::2]


def heuristic_ball_step(
    belief: bel.BeliefMap, env: Environment, state: Config, cfg: StrategyConfig, rng
) -> Config:
    """Best of ``cfg.budget`` ball samples by goal distance minus log p_success."""
    state = np.asarray(state, dtype=float)
    cand = space.sample_in_ball(state, cfg.eps_ball, env.lo, env.hi, rng, cfg.budget)
    dist = np.sqrt(((cand - env.x_goal) ** 2).sum(axis=1))
    with np.errstate(divide="ignore"):
        score = dist - np.log(_p_success_fan(belief, env, state, cand))
    return cand[int(np.argmin(score))]


def _ball_choose(state, sim, cfg, rng):
    return heuristic_ball_step(sim.belief, sim.env, state, cfg, rng)


def run_ball_episode(env, cfg: StrategyConfig, pomdp_cfg, rng, seed: int = 0, record_trace: bool = False):
    return run_pomdp_episode(env, cfg, pomdp_cfg, rng, seed, record_trace, choose=_ball_choose)


def heuristic_egreedy_plan(
    env: Environment,
    rng,
    pomdp_cfg: Optional[bel.PomdpConfig] = None,
    max_samples: int = 500,
    seed: int = 0,
    record_trace: bool = False,
) -> EpisodeResult:
    """RRT growth with 1% goal sampling and unbounded steps, run as an episode."""
    cfg = RrtStarConfig(
        max_samples=max_samples,
        step=math.inf,
        neighbor_radius=1.0,
        goal_bias_permille=10,
        check_step=check_step(env, default_eps(env)),
        rewire=False,
    )
    pomdp_cfg = pomdp_cfg or pomdp_config_for(env)
    return run_rrt_star_pomdp_episode(env, cfg, pomdp_cfg, rng, seed, record_trace)


# ------------------------------------------------------------------- registry


Runner = Callable[..., EpisodeResult]


def _mcpp_runner(kind: str) -> Runner:
    def run(env, rng, seed=0, budget=500, observable=False, record_trace=False, **overrides):
        cfg = strategy_for(env, kind, budget=budget, **overrides)
        if observable:
            return run_mdp_episode(env, cfg, rng, seed)
        return run_pomdp_episode(env, cfg, pomdp_config_for(env), rng, seed, record_trace)

    return run


def _rrt_runner(bias: Optional[int] = None) -> Runner:
    def run(env, rng, seed=0, budget=500, observable=False, record_trace=False, **overrides):
        if bias is not None:
            overrides.setdefault("goal_bias_permille", bias)
        cfg = rrt_config_for(env, budget, **overrides)
        if observable:
            return run_rrt_star_mdp_episode(env, cfg, rng, seed)
        return run_rrt_star_pomdp_episode(env, cfg, pomdp_config_for(env), rng, seed, record_trace)

    return run


def _dpw_runner(env, rng, seed=0, budget=500, observable=False, record_trace=False, **overrides):
    base = strategy_for(env, UCT, budget=budget)
    kw = {f.name: getattr(base, f.name) for f in dataclasses.fields(StrategyConfig)}
    kw.update(env.params.get("dpw", {}))
    kw.update(overrides)
    cfg = DpwConfig(**kw)
    choose = lambda state, sim, c, r: pomcp_dpw_search(state, sim, c, r)  # noqa: E731
    if observable:
        raise ContractError("POMCP-DPW is a belief-space planner")
    return run_pomdp_episode(env, cfg, pomdp_config_for(env), rng, seed, record_trace, choose=choose)


def _ball_runner(env, rng, seed=0, budget=500, observable=False, record_trace=False, **overrides):
    if observable:
        raise ContractError("the ball heuristic is a belief-space planner")
    cfg = strategy_for(env, UCT, budget=budget, **overrides)
    return run_ball_episode(env, cfg, pomdp_config_for(env), rng, seed, record_trace)


def _egreedy_runner(env, rng, seed=0, budget=500, observable=False, record_trace=False, **overrides):
    if observable:
        raise ContractError("the epsilon-greedy heuristic is a belief-space planner")
    return heuristic_egreedy_plan(env, rng, max_samples=budget, seed=seed, record_trace=record_trace)


PLANNERS: Dict[str, Runner] = {
    "UCT": _mcpp_runner(UCT),
    "PowerUCT": _mcpp_runner(POWER_UCT),
    "TENTS": _mcpp_runner(TENTS),
    "RRT*": _rrt_runner(),
    "RRT*(bias=1)": _rrt_runner(1),
    "RRT*(bias=100)": _rrt_runner(100),
    "RRT*(bias=200)": _rrt_runner(200),
    "POMCP-DPW": _dpw_runner,
    "Ball": _ball_runner,
    "EpsGreedy": _egreedy_runner,
}


def get_planner(name: str) -> Runner:
    try:
        return PLANNERS[name]
    except KeyError:
        raise ContractError(f"unknown planner {name!r}; known: {sorted(PLANNERS)}") from None
