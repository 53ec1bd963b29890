"""Monte-Carlo path planning tree search.

The tree alternates value nodes (``VNode``, one per visited configuration) and
action edges (``QEdge``, one per sampled via-point). Each search starts from a
fresh root, runs ``budget`` simulations and returns the via-point of the edge
with the highest value.

Three strategies share the same recursion and differ only in how an edge is
selected and how a node value is backed up:

* ``UCT``      UCB1 selection, visit-weighted mean backup.
* ``PowerUCT`` UCB1 selection, visit-weighted power mean backup.
* ``TENTS``    sparsemax sampling policy, sparse-max (Tsallis) value backup.

Bookkeeping: ``N(s)`` counts ``simulate_v`` calls on a node and equals the sum
of its edge visits. The rollout value obtained when a node is expanded is
credited to the parent edge's reward sum, not to ``N``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .space import Config, ContractError, Environment, distance

UCT = "UCT"
POWER_UCT = "PowerUCT"
TENTS = "TENTS"
STRATEGIES = (UCT, POWER_UCT, TENTS)

# Leaf estimates: "heuristic" walks straight to the goal until the horizon,
# collecting the simulator's own step rewards; "distance" is exp(-d/L) alone.
LEAF_HEURISTIC = "heuristic"
LEAF_DISTANCE = "distance"


@dataclass
class StrategyConfig:
    kind: str = UCT
    c_explore: float = math.sqrt(2.0)
    p_power: float = 2.0
    tau: float = 0.1
    num_actions: int = 16
    eps_ball: float = 0.1
    gamma: float = 1.0
    horizon: int = 50
    budget: int = 500
    leaf_value: str = LEAF_HEURISTIC

    def __post_init__(self):
        if self.leaf_value not in (LEAF_HEURISTIC, LEAF_DISTANCE):
            raise ContractError(f"unknown leaf estimate {self.leaf_value!r}")
        if self.kind not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.kind!r}")
        if self.c_explore <= 0 or self.tau <= 0 or self.eps_ball <= 0:
            raise ContractError("c_explore, tau and eps_ball must be positive")
        if self.p_power < 1:
            raise ContractError("p_power must be >= 1")
        if self.num_actions < 1 or self.horizon < 1 or self.budget < 1:
            raise ContractError("num_actions, horizon and budget must be positive")
        if not 0 < self.gamma <= 1:
            raise ContractError("gamma must lie in (0, 1]")


class Simulator(Protocol):
    """What the tree needs from a planning model.

    ``step`` must be deterministic for a given (state, target) pair. Rewards
    lie in [0, 1]. ``absorbing_reward`` is the per-step reward collected after
    a terminal transition (1 in the goal, 0 after a collision).
    """

    env: Environment

    def propose_actions(self, state: Config, cfg: StrategyConfig, rng) -> tuple: ...

    def step(self, state: Config, target: Config, known_free=None) -> tuple: ...

    def rollout(self, state: Config) -> float: ...

    def segment_rewards(self, points: np.ndarray) -> np.ndarray: ...

    def absorbing_reward(self, state: Config) -> float: ...

    def is_goal(self, state: Config) -> bool: ...


class QEdge:
    __slots__ = ("action_target", "n", "r_sum", "q", "child", "reward", "terminal", "known_free")

    def __init__(self, action_target: Config, known_free=None):
        self.action_target = action_target
        self.n = 0
        self.r_sum = 0.0
        self.q = 0.0
        self.child: Optional[VNode] = None
        self.reward = 0.0
        self.terminal = False
        self.known_free = known_free


class VNode:
    __slots__ = ("state", "N", "v", "edges", "expanded", "depth", "wsum", "leaf")

    def __init__(self, state: Config, depth: int = 0):
        self.state = state
        self.N = 0
        self.v = 0.0
        self.edges: list = []
        self.expanded = False
        self.depth = depth
        # running sum of n(s,a) * q(s,a)**p over edges, for the mean backups
        self.wsum = 0.0
        # leaf estimate computed together with the transition into this node
        self.leaf: Optional[float] = None

    def iter_nodes(self):
        """Depth-first iteration over this node and all materialised descendants."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            for e in reversed(node.edges):
                if e.child is not None:
                    stack.append(e.child)


# ------------------------------------------------------------------- sparsemax


def sparsemax(values) -> np.ndarray:
    """Euclidean projection of ``values`` onto the probability simplex."""
    z = np.asarray(values, dtype=float).ravel()
    if z.size == 0:
        raise ContractError("sparsemax of an empty vector")
    t, _ = _sparsemax_threshold(z)
    p = np.maximum(z - t, 0.0)
    return p


def _sparsemax_threshold(z: np.ndarray) -> tuple:
    zs = np.sort(z)[::-1]
    cums = np.cumsum(zs)
    j = np.arange(1, z.size + 1)
    k = int(j[1 + j * zs > cums][-1])
    t = (cums[k - 1] - 1.0) / k
    return t, k


def spmax(values) -> float:
    """Sparse-max value 0.5 * sum_{a in S} (z_a^2 - t^2) + 0.5."""
    z = np.asarray(values, dtype=float).ravel()
    t, _ = _sparsemax_threshold(z)
    support = z > t
    return float(0.5 * np.sum(z[support] ** 2 - t * t) + 0.5)


def tents_exploration(num_actions: int, N: int) -> float:
    return min(1.0, num_actions / math.log(N + 2) / (N + 2))


# -------------------------------------------------------------------- strategy


def _argmax_random(scores, rng) -> int:
    best = max(scores)
    ties = [i for i, s in enumerate(scores) if s == best]
    if len(ties) == 1:
        return ties[0]
    return ties[int(rng.integers(len(ties)))]


def select_action(node: VNode, cfg: StrategyConfig, rng) -> int:
    """Index of the edge to descend into."""
    if not node.expanded:
        raise ContractError("select_action on an unexpanded node")
    edges = node.edges
    if cfg.kind == TENTS:
        m = len(edges)
        pi = sparsemax(np.array([e.q for e in edges]) / cfg.tau)
        lam = tents_exploration(m, node.N)
        pi = (1.0 - lam) * pi + lam / m
        return int(rng.choice(m, p=pi / pi.sum()))
    log_n = math.log(node.N) if node.N > 0 else 0.0
    c = cfg.c_explore
    scores = [
        e.q + c * math.sqrt(log_n / e.n) if e.n > 0 else math.inf for e in edges
    ]
    return _argmax_random(scores, rng)


def backup_v(node: VNode, cfg: StrategyConfig) -> float:
    """Node value from its visited edges."""
    if not node.expanded:
        raise ContractError("backup on an unexpanded node")
    visited = [e for e in node.edges if e.n > 0]
    total = sum(e.n for e in visited)
    if total == 0:
        raise ContractError("backup needs at least one visited edge")
    if cfg.kind == UCT:
        return sum(e.n / total * e.q for e in visited)
    if cfg.kind == POWER_UCT:
        p = cfg.p_power
        if any(e.q < 0 for e in visited):
            raise ContractError("power-mean backup needs non-negative values")
        return sum(e.n / total * e.q**p for e in visited) ** (1.0 / p)
    q = np.array([e.q for e in visited])
    return cfg.tau * spmax(q / cfg.tau)


# ----------------------------------------------------------------- algorithm 1


def rollout(state: Config, sim: Simulator, cfg: Optional[StrategyConfig] = None) -> float:
    return sim.rollout(state)


def goal_rollout(env: Environment, state: Config) -> float:
    """exp(-d(state, goal) / L) with L the start-goal distance."""
    scale = env.init_goal_distance
    if scale <= 0:
        scale = env.goal_radius
    return math.exp(-distance(state, env.x_goal) / scale)


def absorbing_return(reward: float, remaining: int, gamma: float) -> float:
    """Discounted sum of ``reward`` collected for ``remaining`` steps."""
    if remaining <= 0 or reward == 0.0:
        return 0.0
    if gamma == 1.0:
        return reward * remaining
    return reward * (1.0 - gamma**remaining) / (1.0 - gamma)


def heuristic_return(sim: Simulator, state: Config, remaining: int, cfg: StrategyConfig) -> float:
    """Leaf estimate over the remaining horizon.

    Simulators may supply their own ``heuristic_return``; otherwise the
    straight walk of ``straight_line_return`` is used.
    """
    if remaining <= 0:
        return 0.0
    custom = getattr(sim, "heuristic_return", None)
    if custom is not None:
        return custom(state, remaining, cfg)
    return straight_line_return(sim, state, remaining, cfg)


def straight_line_walk(env: Environment, state: Config, remaining: int, eps: float) -> tuple:
    """Waypoints of the straight walk from ``state`` toward the goal in steps of ``eps``.

    Returns ``(points, m)`` where ``m`` is the number of steps needed to enter
    the goal region; ``points`` holds ``min(m, remaining) + 1`` rows and, when
    the goal is reached in time, ends just inside its boundary.
    """
    goal = env.x_goal
    dist = distance(state, goal)
    reach = dist - env.goal_radius
    m = max(1, math.ceil(reach / eps - 1e-12))
    k = min(m, remaining)
    frac = np.minimum(np.arange(k + 1) * eps, reach) / dist
    pts = state[None, :] + frac[:, None] * (goal - state)[None, :]
    if m <= remaining:
        pts[-1] = goal + (state - goal) * (env.goal_radius / dist * (1.0 - 1e-9))
    return pts, m


def walk_return(sim: Simulator, pts: np.ndarray, rewards: np.ndarray, m: int, remaining: int, gamma: float) -> float:
    """Return of a straight walk given its per-segment rewards."""
    k = len(rewards)
    if gamma == 1.0:
        ret = float(np.sum(rewards))
    else:
        ret = float(np.dot(rewards, gamma ** np.arange(k)))
    if m <= remaining:
        ret += gamma**m * absorbing_return(sim.absorbing_reward(pts[-1]), remaining - m, gamma)
    return ret


def straight_line_return(sim: Simulator, state: Config, remaining: int, cfg: StrategyConfig) -> float:
    """Return of walking straight at the goal in steps of ``eps_ball``.

    The walk ignores obstacles; each segment earns the simulator's step reward
    and, once inside the goal region, the absorbing goal reward is collected
    until the horizon.
    """
    if remaining <= 0:
        return 0.0
    env = sim.env
    if env.in_goal(state):
        return absorbing_return(sim.absorbing_reward(state), remaining, cfg.gamma)
    pts, m = straight_line_walk(env, state, remaining, cfg.eps_ball)
    return walk_return(sim, pts, sim.segment_rewards(pts), m, remaining, cfg.gamma)


class Search:
    """One tree, owned by one search call."""

    def __init__(self, sim: Simulator, cfg: StrategyConfig, rng: np.random.Generator):
        self.sim = sim
        self.cfg = cfg
        self.rng = rng
        self.root: Optional[VNode] = None
        self.resample_events = 0

    def expand(self, node: VNode) -> float:
        """Mark ``node`` expanded and return its leaf estimate.

        The node's |A| via-points are drawn by ``populate`` the first time a
        simulation descends through it. Nodes that are only ever evaluated as
        leaves never pay for sampling, and because unvisited edges are chosen
        uniformly at random the tree has the same distribution either way.
        """
        if node.expanded:
            raise ContractError("node already expanded")
        node.expanded = True
        return node.leaf if node.leaf is not None else self.leaf_value(node)

    def populate(self, node: VNode) -> None:
        targets, known = self.sim.propose_actions(node.state, self.cfg, self.rng)
        node.edges = [
            QEdge(targets[i], None if known is None else bool(known[i]))
            for i in range(targets.shape[0])
        ]

    def leaf_value(self, node: VNode) -> float:
        if self.cfg.leaf_value == LEAF_DISTANCE:
            return self.sim.rollout(node.state)
        return heuristic_return(self.sim, node.state, self.cfg.horizon - node.depth, self.cfg)

    def _absorbing_value(self, state: Config, depth_after: int) -> float:
        return absorbing_return(
            self.sim.absorbing_reward(state), self.cfg.horizon - depth_after, self.cfg.gamma
        )

    def simulate_v(self, node: VNode, depth: int) -> None:
        cfg = self.cfg
        if not node.edges:
            self.populate(node)
        edge = node.edges[select_action(node, cfg, self.rng)]
        if cfg.kind == TENTS:
            self.simulate_q(node, edge, depth)
            node.N += 1
            node.v = backup_v(node, cfg)
            return
        p = cfg.p_power if cfg.kind == POWER_UCT else 1.0
        old = edge.n * edge.q**p
        self.simulate_q(node, edge, depth)
        node.N += 1
        if edge.q < 0:
            raise ContractError("power-mean backup needs non-negative values")
        node.wsum += edge.n * edge.q**p - old
        mean = max(node.wsum, 0.0) / node.N
        node.v = mean if p == 1.0 else mean ** (1.0 / p)

    def simulate_q(self, node: VNode, edge: QEdge, depth: int) -> None:
        g = self.cfg.gamma
        if edge.child is None:
            remaining = self.cfg.horizon - depth - 1
            fused = getattr(self.sim, "step_with_leaf", None)
            if fused is not None and remaining > 0 and self.cfg.leaf_value == LEAF_HEURISTIC:
                nxt, reward, terminal, leaf = fused(node.state, edge.action_target, edge.known_free, remaining, self.cfg)
            else:
                (nxt, reward, terminal), leaf = self.sim.step(node.state, edge.action_target, edge.known_free), None
            edge.child = VNode(nxt, depth + 1)
            edge.child.leaf = None if terminal else leaf
            edge.reward = reward
            edge.terminal = terminal
        child = edge.child
        r = edge.reward
        if edge.terminal:
            r += g * self._absorbing_value(child.state, depth + 1)
        elif depth + 1 >= self.cfg.horizon:
            r += g * self.leaf_value(child)
        elif not child.expanded:
            r += g * self.expand(child)
        else:
            self.simulate_v(child, depth + 1)
        edge.r_sum += r
        edge.n += 1
        edge.q = (edge.r_sum + g * child.N * child.v) / edge.n

    def run(self, root_state: Config) -> Config:
        root_state = np.asarray(root_state, dtype=float)
        self.root = VNode(root_state, 0)
        if self.sim.is_goal(root_state):
            return root_state
        self.expand(self.root)
        for _ in range(self.cfg.budget):
            self.simulate_v(self.root, 0)
        return self.best_edge(self.root).action_target

    def best_edge(self, node: VNode) -> QEdge:
        visited = [e for e in node.edges if e.n > 0] or node.edges
        best_q = max(e.q for e in visited)
        cands = [e for e in visited if e.q == best_q]
        best_n = max(e.n for e in cands)
        cands = [e for e in cands if e.n == best_n]
        if len(cands) == 1:
            return cands[0]
        return cands[int(self.rng.integers(len(cands)))]


def search(root_state: Config, sim: Simulator, cfg: StrategyConfig, rng) -> Config:
    """Run ``cfg.budget`` simulations from a fresh root and return the next via-point."""
    return Search(sim, cfg, rng).run(root_state)


# ------------------------------------------------------------------------ dump


def _fmt(x) -> str:
    return repr(float(x))


def dump_tree(root: VNode) -> str:
    """One line per materialised node: depth | state | N | V | edges (target n q)."""
    lines = []
    for node in root.iter_nodes():
        state = ",".join(_fmt(v) for v in node.state)
        edges = ";".join(
            f"{','.join(_fmt(v) for v in e.action_target)} {e.n} {_fmt(e.q)}" for e in node.edges
        )
        lines.append(f"{node.depth} | {state} | {node.N} | {_fmt(node.v)} | {edges}")
    return "\n".join(lines) + "\n"


def parse_tree_dump(text: str) -> list:
    """Inverse of ``dump_tree`` for tests: list of dicts in dump order."""
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        depth, state, n, v, edges = (part.strip() for part in line.split("|"))
        parsed_edges = []
        for chunk in filter(None, edges.split(";")):
            target, en, eq = chunk.split(" ")
            parsed_edges.append(
                (tuple(float(t) for t in target.split(",")), int(en), float(eq))
            )
        out.append(
            {
                "depth": int(depth),
                "state": tuple(float(s) for s in state.split(",")),
                "N": int(n),
                "V": float(v),
                "edges": parsed_edges,
            }
        )
    return out
