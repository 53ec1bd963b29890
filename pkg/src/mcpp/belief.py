"""Probabilistic collision map and the belief-driven planning model.

The map is a regular workspace grid holding, per cell, the probability that
the robot's reference point collides there. Every cell starts at ``p0``.
Observed collisions raise nearby cells toward ``p_max`` with a forward-facing
half-Gaussian kernel oriented along the direction of motion.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

from . import space
from .mcts import StrategyConfig, goal_rollout, straight_line_return, straight_line_walk, walk_return
from .space import Config, ContractError, Environment

MAX_CELLS = 10**7


class BeliefConfigError(ValueError):
    pass


@dataclass
class BeliefMap:
    lo: np.ndarray
    shape: tuple
    h: float
    p0: float
    p_min: float = 0.01
    p_max: float = 0.95
    beta: float = 0.8
    rho: float = 0.0
    p: Optional[np.ndarray] = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.shape = tuple(int(s) for s in self.shape)
        if self.rho <= 0:
            self.rho = 3.0 * self.h
        if not 0 < self.p_min <= self.p0 <= self.p_max < 1:
            raise BeliefConfigError("need 0 < p_min <= p0 <= p_max < 1")
        # the grid lives inside a one-cell border held at p_max, so lookups for
        # off-grid points need no masking; ``p`` is a view of the interior
        pad = np.full(tuple(n + 2 for n in self.shape), self.p_max)
        inner = tuple(slice(1, n + 1) for n in self.shape)
        pad[inner] = self.p0 if self.p is None else self.p
        object.__setattr__(self, "_pad", pad)
        object.__setattr__(self, "_inner", inner)
        object.__setattr__(self, "p", pad[inner])
        self._pad_strides = np.array(pad.strides, dtype=np.int64) // pad.itemsize
        self._pad_flat = pad.reshape(-1)
        self._pad_strides_f = self._pad_strides.astype(float)
        self._pad_top = np.asarray(self.shape, dtype=float) + 1.0
        self._centers = None
        self._survive = None
        self._survive_version = -1
        self.version = 0

    def _pad_index(self, pts: np.ndarray) -> np.ndarray:
        """Flat indices into the padded grid; off-grid points land on the border."""
        idx = np.floor((pts - self.lo) / self.h) + 1.0
        np.clip(idx, 0.0, self._pad_top, out=idx)
        return idx.astype(np.int64) @ self._pad_strides

    def _pad_survive(self) -> np.ndarray:
        """``1 - p`` over the padded grid, flattened; rebuilt when the version changes."""
        if self._survive_version != self.version:
            self._survive = 1.0 - self._pad_flat
            self._survive_version = self.version
        return self._survive

    def touch(self) -> None:
        """Record a change to ``p``; needed after editing ``p`` in place."""
        self.version += 1

    def __setattr__(self, name, value):
        if name == "p" and "_pad" in self.__dict__:
            # rebinding p writes through to the padded storage
            self._pad[self._inner] = value
            self.version += 1
            return
        object.__setattr__(self, name, value)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.h * np.asarray(self.shape)

    def copy(self) -> "BeliefMap":
        return BeliefMap(
            self.lo.copy(), self.shape, self.h, self.p0, self.p_min, self.p_max,
            self.beta, self.rho, self.p.copy(),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, BeliefMap):
            return NotImplemented
        return (
            np.array_equal(self.lo, other.lo)
            and self.shape == other.shape
            and (self.h, self.p0, self.p_min, self.p_max, self.beta, self.rho)
            == (other.h, other.p0, other.p_min, other.p_max, other.beta, other.rho)
            and np.array_equal(self.p, other.p)
        )

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        """Integer cell indices of workspace points; -1 rows mark points off the grid."""
        pts = np.atleast_2d(points)
        idx = np.floor((pts - self.lo) / self.h).astype(np.int64)
        outside = ((idx < 0) | (idx >= np.asarray(self.shape))).any(axis=1)
        idx[outside] = -1
        return idx

    def prob_at(self, point) -> float:
        idx = self.cell_of(np.asarray(point, dtype=float))[0]
        if idx[0] < 0:
            return self.p_max
        return float(self.p[tuple(idx)])

    def centers(self) -> np.ndarray:
        if self._centers is None:
            axes = [self.lo[i] + self.h * (np.arange(n) + 0.5) for i, n in enumerate(self.shape)]
            grids = np.meshgrid(*axes, indexing="ij")
            self._centers = np.stack(grids, axis=-1)
        return self._centers

    def observed_mask(self) -> np.ndarray:
        return self.p > self.p0


def init_belief(
    bounds,
    h: float,
    p0: float,
    p_min: float = 0.01,
    p_max: float = 0.95,
    beta: float = 0.8,
    rho: Optional[float] = None,
) -> BeliefMap:
    """Uniform map at ``p0`` over the workspace box ``bounds = (lo, hi)``."""
    if h <= 0:
        raise BeliefConfigError("cell size must be positive")
    if not 0 < p0 < 1:
        raise BeliefConfigError("prior must lie in (0, 1)")
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    shape = tuple(max(1, int(math.ceil((b - a) / h - 1e-9))) for a, b in zip(lo, hi))
    if math.prod(shape) > MAX_CELLS:
        raise BeliefConfigError(f"belief grid {shape} exceeds {MAX_CELLS} cells")
    return BeliefMap(lo, shape, float(h), float(p0), p_min, p_max, beta, rho or 3.0 * h)


def belief_for(env: Environment) -> BeliefMap:
    """Fresh map for an environment, using its fixture parameters when present."""
    params = env.params.get("belief", {})
    h = params.get("cell", env.init_goal_distance / 50.0)
    return init_belief(
        env.workspace_bounds,
        h,
        params.get("p0", 0.05),
        p_min=params.get("p_min", 0.01),
        p_max=params.get("p_max", 0.95),
        beta=params.get("beta", 0.8),
        rho=params.get("rho"),
    )


# ------------------------------------------------------------------ observations


@dataclass(frozen=True)
class CollisionAt:
    """Collision observation.

    ``q`` and ``direction`` live in configuration space; ``point`` and
    ``point_direction`` are the reference point and its direction of motion
    in the workspace, which is where the map is updated.
    """

    q: np.ndarray
    direction: np.ndarray
    point: np.ndarray
    point_direction: np.ndarray


@dataclass(frozen=True)
class GoalReached:
    q: np.ndarray


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0:
        out = np.zeros_like(v, dtype=float)
        out[0] = 1.0
        return out
    return np.asarray(v, dtype=float) / n


def update_on_collision(belief: BeliefMap, point, direction) -> None:
    """Raise cells in front of a collision at ``point`` moving along ``direction``.

    p <- p + (p_max - p) * beta * w with
    w = exp(-|c - q|^2 / (2 (rho/2)^2)) * max(0, cos angle(c - q, direction)),
    and w = 1 for the cell containing ``point``.
    """
    q = np.clip(np.asarray(point, dtype=float), belief.lo, belief.hi - 1e-12 * belief.h)
    u = _unit(np.asarray(direction, dtype=float))
    rho = belief.rho
    # only the cells inside the bounding cube of the kernel
    lo_idx = np.maximum(np.floor((q - rho - belief.lo) / belief.h).astype(int), 0)
    hi_idx = np.minimum(np.ceil((q + rho - belief.lo) / belief.h).astype(int), belief.shape)
    window = tuple(slice(a, b) for a, b in zip(lo_idx, hi_idx))
    c = belief.centers()[window]
    off = c - q
    dist = np.sqrt((off**2).sum(axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(dist > 0, (off @ u) / dist, 1.0)
    w = np.exp(-(dist**2) / (2 * (rho / 2) ** 2)) * np.maximum(0.0, cos)
    w[dist > rho] = 0.0
    own = tuple(np.floor((q - belief.lo) / belief.h).astype(int) - lo_idx)
    w[own] = 1.0
    patch = belief.p[window]
    patch += (belief.p_max - patch) * belief.beta * w
    np.clip(patch, belief.p_min, belief.p_max, out=patch)
    belief.touch()


def apply_observation(belief: BeliefMap, obs) -> None:
    if isinstance(obs, CollisionAt):
        update_on_collision(belief, obs.point, obs.point_direction)


# ---------------------------------------------------------------------- reward


def p_success_points(belief: BeliefMap, a, b, step: Optional[float] = None) -> float:
    """Survival probability of the straight workspace motion a -> b.

    The segment is sampled every ``step`` (default half a cell); each distinct
    cell the samples pass through contributes a factor ``1 - p``, and any
    sample off the grid counts as a ``p_max`` cell.
    """
    a = np.asarray(a, dtype=float)
    d = np.asarray(b, dtype=float) - a
    if step is None:
        step = belief.h / 2
    if step <= 0:
        raise ContractError("step must be positive")
    n = max(1, math.ceil(math.sqrt(float(d @ d)) / step))
    pts = a + (np.arange(n + 1.0) / n)[:, None] * d
    flat = belief._pad_index(pts)
    survive = 1.0 - belief._pad_flat[flat]
    survive[1:][flat[1:] == flat[:-1]] = 1.0
    return float(survive.prod())


def p_success_chain(belief: BeliefMap, points, step: Optional[float] = None) -> np.ndarray:
    """``p_success_points`` for every consecutive pair of a polyline, in one pass."""
    P = np.asarray(points, dtype=float)
    if step is None:
        step = belief.h / 2
    if step <= 0:
        raise ContractError("step must be positive")
    A = P[:-1]
    if A.shape[0] == 0:
        return np.empty(0)
    D = P[1:] - A
    n = np.ceil(np.sqrt(np.einsum("ij,ij->i", D, D)) / step)
    np.maximum(n, 1.0, out=n)
    col = n[:, None]
    # shorter segments repeat their endpoint; repeats fall to the dedupe below
    t = np.minimum(np.arange(n.max() + 1.0), col)
    t /= col
    # same arithmetic as _pad_index, done in place on one buffer
    pts = t[..., None] * D[:, None, :]
    pts += A[:, None, :]
    pts -= belief.lo
    pts /= belief.h
    np.floor(pts, out=pts)
    pts += 1.0
    np.clip(pts, 0.0, belief._pad_top, out=pts)
    flat = (pts @ belief._pad_strides_f).astype(np.int64)
    survive = belief._pad_survive()[flat]
    survive[:, 1:][flat[:, 1:] == flat[:, :-1]] = 1.0
    return survive.prod(axis=1)


@lru_cache(maxsize=8)
def _grid_graph(shape: tuple):
    """Neighbour pairs (all 3**d - 1 offsets) of a grid and their lengths in cells."""
    index = np.arange(int(np.prod(shape))).reshape(shape)
    src, dst, length = [], [], []
    for off in itertools.product((-1, 0, 1), repeat=len(shape)):
        if not any(off):
            continue
        cut_a = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, shape))
        cut_b = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, shape))
        src.append(index[cut_a].ravel())
        dst.append(index[cut_b].ravel())
        length.append(np.full(src[-1].shape, math.sqrt(sum(o * o for o in off))))
    return np.concatenate(src), np.concatenate(dst), np.concatenate(length)


def cost_to_go(belief: BeliefMap, goal_point) -> np.ndarray:
    """Least accumulated collision risk from every cell to the goal's cell.

    Entering a cell costs ``-log(1 - p)`` per cell length travelled, so the
    cost of a path is approximately minus the log of its survival
    probability. Cells are 8-connected in 2-D and 26-connected in 3-D.
    """
    goal_cell = belief.cell_of(np.asarray(goal_point, dtype=float))[0]
    src, dst, length = _grid_graph(belief.shape)
    enter = -np.log1p(-belief.p.ravel())
    n = enter.size
    # reversed edges so a single search from the goal yields cost-to-go
    graph = sparse.csr_matrix((length * enter[dst], (dst, src)), shape=(n, n))
    if goal_cell[0] < 0:
        return np.full(belief.shape, np.inf)
    start = int(np.ravel_multi_index(tuple(goal_cell), belief.shape))
    return dijkstra(graph, directed=True, indices=start).reshape(belief.shape)


def p_success(belief: BeliefMap, env: Environment, x1: Config, x2: Config, step: Optional[float] = None) -> float:
    """Survival probability of moving from x1 to x2, scored on the reference-point trace."""
    return p_success_points(belief, env.reference_point(x1), env.reference_point(x2), step)


class BeliefSimulator:
    """Optimistic deterministic planning model over a belief map.

    Transitions always reach the target; uncertainty only enters through the
    ``p_success`` reward. No access to the true obstacles.
    """

    def __init__(self, env: Environment, belief: BeliefMap, step: Optional[float] = None):
        self.env = env
        self.belief = belief
        self.step_size = step
        self._field = None
        self._field_key = None

    def risk_to_goal(self, state: Config) -> float:
        """Cost-to-go of the state's reference point on the current map."""
        key = (id(self.belief), self.belief.version)
        if key != self._field_key:
            self._field = cost_to_go(self.belief, self.env.reference_point(self.env.x_goal))
            self._field_key = key
        b = self.belief
        idx = np.floor((self.env.reference_point(state) - b.lo) / b.h).astype(np.int64)
        if (idx < 0).any() or (idx >= self._field.shape).any():
            return math.inf
        return float(self._field[tuple(idx)])

    def heuristic_return(self, state: Config, remaining: int, cfg: StrategyConfig) -> float:
        """Leaf estimate: the remaining steps minus the least risk to reach the goal."""
        if self.env.robot.kind == space.PLANAR_ARM:
            # the goal is a joint configuration, which a workspace field cannot see
            return straight_line_return(self, state, remaining, cfg)
        if remaining <= 0:
            return 0.0
        if self.env.in_goal(state):
            return float(remaining)
        return max(0.0, remaining - self.risk_to_goal(state))

    def step_with_leaf(self, state: Config, target: Config, known_free, remaining: int, cfg: StrategyConfig):
        """``step`` followed by ``heuristic_return`` at the target, sharing one survival pass.

        For the arm the step segment is prepended to the straight walk, so both
        rewards come from a single polyline evaluation with identical values.
        """
        target = np.asarray(target, dtype=float)
        if self.env.robot.kind != space.PLANAR_ARM or self.env.in_goal(target):
            nxt, reward, terminal = self.step(state, target, known_free)
            leaf = 0.0 if terminal else self.heuristic_return(nxt, remaining, cfg)
            return nxt, reward, terminal, leaf
        pts, m = straight_line_walk(self.env, target, remaining, cfg.eps_ball)
        rewards = self.segment_rewards(np.vstack([np.asarray(state, dtype=float)[None, :], pts]))
        leaf = walk_return(self, pts, rewards[1:], m, remaining, cfg.gamma)
        return target, float(rewards[0]), False, leaf

    def propose_actions(self, state: Config, cfg: StrategyConfig, rng):
        targets = space.sample_in_ball(state, cfg.eps_ball, self.env.lo, self.env.hi, rng, cfg.num_actions)
        return targets, None

    def step(self, state: Config, target: Config, known_free=None):
        return belief_simulator_step(self.belief, self.env, state, target, self.step_size)

    def rollout(self, state: Config) -> float:
        return goal_rollout(self.env, state)

    def segment_rewards(self, points: np.ndarray) -> np.ndarray:
        """Step rewards along a polyline of configurations, as ``step`` would pay them."""
        env = self.env
        refs = space.reference_points(env, points)
        rewards = p_success_chain(self.belief, refs, self.step_size)
        goal_hit = np.sqrt(((points[1:] - env.x_goal) ** 2).sum(axis=1)) <= env.goal_radius
        rewards[goal_hit] = 1.0
        return rewards

    def absorbing_reward(self, state: Config) -> float:
        return 1.0 if self.env.in_goal(state) else 0.0

    def is_goal(self, state: Config) -> bool:
        return self.env.in_goal(state)


def belief_simulator_step(belief: BeliefMap, env: Environment, state: Config, target: Config, step=None):
    target = np.asarray(target, dtype=float)
    if env.in_goal(target):
        return target, 1.0, True
    return target, p_success(belief, env, state, target, step), False


# ------------------------------------------------------------------- execution


@dataclass
class PomdpConfig:
    obs_radius: float = 0.1
    backtrack_dist: float = 0.05
    max_replans: int = 30
    max_steps: int = 300
    check_step: Optional[float] = None

    def __post_init__(self):
        if self.obs_radius <= 0 or self.backtrack_dist <= 0:
            raise ContractError("obs_radius and backtrack_dist must be positive")
        if self.max_replans < 1 or self.max_steps < 1:
            raise ContractError("max_replans and max_steps must be positive")


def _retreat(env: Environment, state, last, direction, dist: float, step: float) -> np.ndarray:
    """Point ``dist`` behind ``last`` along the motion line, kept free.

    When the motion started closer than ``dist`` to the contact, the retreat
    continues backwards past ``state`` as far as free space allows.
    """
    goal = last - dist * direction
    if float(np.dot(state - goal, direction)) <= 0.0:
        # the retreat point lies between state and the contact
        return goal if space.contains_free(env, goal) else state.copy()
    check = space.segment_free(env, state, goal, step)
    if check.free:
        return goal
    return state.copy() if check.last_free is None else check.last_free


def execute_and_observe(env: Environment, state: Config, target: Config, pomdp_cfg: PomdpConfig, step: float):
    """Move along the true segment; on contact retreat and report the collision.

    Returns ``(new_state, observation_or_None, collided)``.
    """
    state = np.asarray(state, dtype=float)
    target = np.asarray(target, dtype=float)
    if not space.contains_free(env, state):
        raise ContractError("execution must start from a free configuration")
    check = space.segment_free(env, state, target, step)
    if check.free:
        obs = GoalReached(target) if env.in_goal(target) else None
        return target, obs, False
    last = check.last_free if check.last_free is not None else state
    new_state = _retreat(env, state, last, _unit(target - state), pomdp_cfg.backtrack_dist, step)
    ref_state = env.reference_point(state)
    ref_target = env.reference_point(target)
    obs = CollisionAt(
        q=check.q_hit,
        direction=_unit(target - state),
        point=env.reference_point(check.q_hit),
        point_direction=_unit(ref_target - ref_state),
    )
    return new_state, obs, True


# ---------------------------------------------------------------- serialisation


def dumps_belief(belief: BeliefMap) -> str:
    head = [
        "mcpp-belief 1",
        "lo " + " ".join(repr(float(v)) for v in belief.lo),
        "shape " + " ".join(str(s) for s in belief.shape),
        f"h {belief.h!r}",
        f"p0 {belief.p0!r}",
        f"p_min {belief.p_min!r}",
        f"p_max {belief.p_max!r}",
        f"beta {belief.beta!r}",
        f"rho {belief.rho!r}",
        "data",
    ]
    rows = belief.p.reshape(-1, belief.shape[-1])
    body = [" ".join(repr(float(v)) for v in row) for row in rows]
    return "\n".join(head + body) + "\n"


def loads_belief(text: str) -> BeliefMap:
    lines = text.splitlines()
    if not lines or lines[0].split()[0] != "mcpp-belief":
        raise ValueError("not a belief snapshot")
    header = {}
    i = 1
    while lines[i] != "data":
        key, *vals = lines[i].split()
        header[key] = vals
        i += 1
    shape = tuple(int(v) for v in header["shape"])
    values = [float(v) for line in lines[i + 1 :] for v in line.split()]
    p = np.array(values, dtype=float).reshape(shape)
    return BeliefMap(
        lo=np.array([float(v) for v in header["lo"]]),
        shape=shape,
        h=float(header["h"][0]),
        p0=float(header["p0"][0]),
        p_min=float(header["p_min"][0]),
        p_max=float(header["p_max"][0]),
        beta=float(header["beta"][0]),
        rho=float(header["rho"][0]),
        p=p,
    )


def save_belief(belief: BeliefMap, path) -> None:
    Path(path).write_text(dumps_belief(belief))


def load_belief(path) -> BeliefMap:
    return loads_belief(Path(path).read_text())
