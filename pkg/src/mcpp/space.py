"""Configuration space, robot models, collision geometry and environment fixtures.

Configurations are plain 1-D float arrays. Obstacles live in the workspace
(2-D for the planar arm and ``Point2D``, 3-D for ``Point3D``); a configuration
is free when the robot geometry it induces touches no obstacle and it lies
inside the joint/position limits.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from importlib import resources
import pathlib
from typing import Optional, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

Config = np.ndarray

POINT2D = "Point2D"
POINT3D = "Point3D"
PLANAR_ARM = "PlanarArm"
ROBOT_KINDS = (POINT2D, POINT3D, PLANAR_ARM)

ENVIRONMENT_NAMES = (
    "UShape2D",
    "LShape2D",
    "HighWall3D",
    "EmptyBox",
    "GridWorld",
    "DiscBox",
    "WallBox",
)

MAX_BALL_REJECTIONS = 1000


class ContractError(ValueError):
    """Raised when an operation is called outside its documented domain."""


@dataclass(frozen=True)
class RobotModel:
    kind: str
    link_lengths: tuple = ()
    base: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ROBOT_KINDS:
            raise ContractError(f"unknown robot kind {self.kind!r}")
        if self.kind == PLANAR_ARM:
            if len(self.link_lengths) != 7:
                raise ContractError("PlanarArm needs exactly 7 links")
            if any(l <= 0 for l in self.link_lengths):
                raise ContractError("link lengths must be positive")

    @cached_property
    def _lengths(self) -> np.ndarray:
        return np.asarray(self.link_lengths, dtype=float)

    @cached_property
    def _base(self) -> np.ndarray:
        return np.asarray(self.base, dtype=float)

    @property
    def dof(self) -> int:
        return {POINT2D: 2, POINT3D: 3, PLANAR_ARM: 7}[self.kind]

    @property
    def workspace_dim(self) -> int:
        return 3 if self.kind == POINT3D else 2


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its minimum corner and edge sizes."""

    min: tuple
    size: tuple

    @cached_property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min, dtype=float)

    @cached_property
    def hi(self) -> np.ndarray:
        return self.lo + np.asarray(self.size, dtype=float)

    def to_dict(self) -> dict:
        return {"shape": "box", "min": list(self.min), "size": list(self.size)}


@dataclass(frozen=True)
class Ball:
    """Disc (2-D) or sphere (3-D)."""

    center: tuple
    radius: float

    @cached_property
    def c(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    def to_dict(self) -> dict:
        return {"shape": "ball", "center": list(self.center), "radius": self.radius}


Obstacle = Union[Box, Ball]


@dataclass(frozen=True)
class Environment:
    name: str
    dimension: int
    bounds: tuple  # ((lo, hi), ...) one pair per configuration coordinate
    robot: RobotModel
    obstacles: tuple
    start: tuple
    goal: tuple
    goal_radius: float
    clearance_delta: float = 0.0
    reference_path: tuple = ()
    params: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if self.dimension != self.robot.dof:
            raise ContractError(
                f"dimension {self.dimension} does not match robot dof {self.robot.dof}"
            )
        if len(self.bounds) != self.dimension:
            raise ContractError("one (lo, hi) bound pair per dimension is required")
        if self.goal_radius <= 0:
            raise ContractError("goal_radius must be positive")

    @cached_property
    def lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds], dtype=float)

    @cached_property
    def hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds], dtype=float)

    @cached_property
    def x_init(self) -> Config:
        return np.asarray(self.start, dtype=float)

    @cached_property
    def x_goal(self) -> Config:
        return np.asarray(self.goal, dtype=float)

    @cached_property
    def init_goal_distance(self) -> float:
        return distance(self.x_init, self.x_goal)

    @cached_property
    def _boxes(self):
        boxes = [o for o in self.obstacles if isinstance(o, Box)]
        w = self.robot.workspace_dim
        if not boxes:
            return np.zeros((0, w)), np.zeros((0, w))
        return np.stack([b.lo for b in boxes]), np.stack([b.hi for b in boxes])

    @cached_property
    def _balls(self):
        balls = [o for o in self.obstacles if isinstance(o, Ball)]
        w = self.robot.workspace_dim
        if not balls:
            return np.zeros((0, w)), np.zeros(0)
        return np.stack([b.c for b in balls]), np.array([b.radius for b in balls])

    @cached_property
    def workspace_bounds(self) -> tuple:
        """Axis-aligned workspace extent as (lo, hi) arrays."""
        if self.robot.kind == PLANAR_ARM:
            reach = float(sum(self.robot.link_lengths))
            base = np.asarray(self.robot.base, dtype=float)
            return base - reach, base + reach
        return self.lo.copy(), self.hi.copy()

    def in_goal(self, q: Config) -> bool:
        return distance(q, self.x_goal) <= self.goal_radius

    def reference_point(self, q: Config) -> np.ndarray:
        """Workspace point tracked by the belief map (end effector for the arm)."""
        if self.robot.kind == PLANAR_ARM:
            return end_effector(self.robot, q)
        return np.asarray(q, dtype=float)

    def param(self, key: str, default=None):
        return self.params.get(key, default)


# --------------------------------------------------------------------------- cost


def distance(x: Config, y: Config) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ContractError(f"dimension mismatch: {x.shape} vs {y.shape}")
    diff = x - y
    return math.sqrt(float(diff @ diff))


def path_cost(waypoints: Sequence[Config]) -> float:
    return float(sum(distance(a, b) for a, b in zip(waypoints[:-1], waypoints[1:])))


@dataclass
class Path:
    waypoints: list
    total_cost: float = 0.0

    @classmethod
    def from_waypoints(cls, waypoints) -> "Path":
        pts = [np.asarray(w, dtype=float) for w in waypoints]
        return cls(pts, path_cost(pts))

    def append(self, q: Config) -> None:
        q = np.asarray(q, dtype=float)
        if self.waypoints:
            self.total_cost += distance(self.waypoints[-1], q)
        self.waypoints.append(q)

    @property
    def last(self) -> Config:
        return self.waypoints[-1]


# ----------------------------------------------------------------------- kinematics


def _arm_joints(model: RobotModel, Q: np.ndarray) -> np.ndarray:
    """Joint positions, shape (M, 8, 2), for a batch of arm configurations (M, 7)."""
    lengths = np.asarray(model.link_lengths, dtype=float)
    angles = np.cumsum(Q, axis=-1)
    steps = np.stack([np.cos(angles), np.sin(angles)], axis=-1) * lengths[:, None]
    joints = np.empty(Q.shape[:-1] + (8, 2))
    joints[..., 0, :] = model.base
    joints[..., 1:, :] = np.asarray(model.base, dtype=float) + np.cumsum(steps, axis=-2)
    return joints


def forward_kinematics(model: RobotModel, q: Config) -> np.ndarray:
    """Link segments of the planar arm as an array of shape (7, 2, 2).

    ``segments[i, 0]`` is the start and ``segments[i, 1]`` the end of link i.
    Link i points along the cumulative angle ``q[0] + ... + q[i]``.
    """
    if model.kind != PLANAR_ARM:
        raise ContractError("forward_kinematics needs a PlanarArm model")
    q = np.asarray(q, dtype=float)
    if q.shape != (7,):
        raise ContractError("PlanarArm configuration must have 7 joint angles")
    joints = _arm_joints(model, q[None, :])[0]
    return np.stack([joints[:-1], joints[1:]], axis=1)


def end_effector(model: RobotModel, q: Config) -> np.ndarray:
    lengths = model.link_lengths
    x, y = float(model.base[0]), float(model.base[1])
    a = 0.0
    for qi, li in zip(q, lengths):
        a += qi
        x += li * math.cos(a)
        y += li * math.sin(a)
    return np.array([x, y])


def end_effector_batch(model: RobotModel, Q: np.ndarray) -> np.ndarray:
    """End-effector positions, shape (M, 2), for a batch of arm configurations."""
    angles = np.cumsum(np.asarray(Q, dtype=float), axis=-1)
    lengths = model._lengths
    out = np.empty(angles.shape[:-1] + (2,))
    out[..., 0] = np.cos(angles) @ lengths
    out[..., 1] = np.sin(angles) @ lengths
    return out + model._base


def reference_points(env: Environment, Q: np.ndarray) -> np.ndarray:
    """``env.reference_point`` for each row of Q."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if env.robot.kind == PLANAR_ARM:
        return end_effector_batch(env.robot, Q)
    return Q


# ------------------------------------------------------------------------ collision


def _points_collide(env: Environment, P: np.ndarray) -> np.ndarray:
    """Bool mask of workspace points (M, w) lying in any obstacle (closed sets)."""
    hit = None
    lo, hi = env._boxes
    if len(lo):
        inside = (P[:, None, :] >= lo) & (P[:, None, :] <= hi)
        hit = inside.all(axis=2).any(axis=1)
    c, r = env._balls
    if len(c):
        diff = P[:, None, :] - c
        in_ball = (np.einsum("mkd,mkd->mk", diff, diff) <= r * r).any(axis=1)
        hit = in_ball if hit is None else hit | in_ball
    return np.zeros(P.shape[0], dtype=bool) if hit is None else hit


def _segments_collide(env: Environment, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Exact segment/obstacle test for 2-D segments A->B, each of shape (S, 2)."""
    hit = np.zeros(A.shape[0], dtype=bool)
    D = B - A
    lo, hi = env._boxes
    if len(lo):
        # Liang-Barsky slab clipping against every box at once.
        t0 = np.zeros((A.shape[0], len(lo)))
        t1 = np.ones((A.shape[0], len(lo)))
        ok = np.ones((A.shape[0], len(lo)), dtype=bool)
        for k in range(A.shape[1]):
            a = A[:, k, None]
            d = D[:, k, None]
            parallel = d == 0
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (lo[None, :, k] - a) / d
                tb = (hi[None, :, k] - a) / d
            tmin = np.where(parallel, -np.inf, np.minimum(ta, tb))
            tmax = np.where(parallel, np.inf, np.maximum(ta, tb))
            outside = parallel & ((a < lo[None, :, k]) | (a > hi[None, :, k]))
            ok &= ~outside
            t0 = np.maximum(t0, tmin)
            t1 = np.minimum(t1, tmax)
        hit |= (ok & (t0 <= t1)).any(axis=1)
    c, r = env._balls
    if len(c):
        dd = (D**2).sum(axis=1)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c[None] - A[:, None, :]) * D[:, None, :]).sum(axis=2) / dd
        t = np.where(dd > 0, np.clip(t, 0.0, 1.0), 0.0)
        closest = A[:, None, :] + t[..., None] * D[:, None, :]
        d2 = ((closest - c[None]) ** 2).sum(axis=2)
        hit |= (d2 <= (r**2)[None]).any(axis=1)
    return hit


def in_bounds_batch(env: Environment, Q: np.ndarray) -> np.ndarray:
    return ((Q >= env.lo) & (Q <= env.hi)).all(axis=1)


def free_batch(env: Environment, Q: np.ndarray) -> np.ndarray:
    """Vectorised ``contains_free`` over configurations of shape (M, d)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    free = in_bounds_batch(env, Q)
    if not env.obstacles:
        return free
    if env.robot.kind == PLANAR_ARM:
        joints = _arm_joints(env.robot, Q)
        A = joints[:, :-1, :].reshape(-1, 2)
        B = joints[:, 1:, :].reshape(-1, 2)
        hit = _segments_collide(env, A, B).reshape(Q.shape[0], 7).any(axis=1)
    else:
        hit = _points_collide(env, Q)
    return free & ~hit


def contains_free(env: Environment, q: Config) -> bool:
    q = np.asarray(q, dtype=float)
    if q.shape != (env.dimension,):
        raise ContractError("configuration dimension does not match environment")
    return bool(free_batch(env, q[None, :])[0])


def _dyadic_levels(length: float, step: float) -> int:
    k = 0
    while length / (1 << k) > step:
        k += 1
    return k


def _dyadic_levels_batch(lengths: np.ndarray, step: float) -> np.ndarray:
    """``_dyadic_levels`` for an array of lengths, exact and without a loop.

    With length = ml*2**el and step = ms*2**es (mantissas in [0.5, 1)), halving
    continues while length*2**-k > step, i.e. the answer is el - es + [ml > ms].
    """
    ml, el = np.frexp(lengths)
    ms, es = math.frexp(step)
    k = el - es + (ml > ms)
    return np.where(ml > 0, np.maximum(k, 0), 0)


def segment_samples(x1: Config, x2: Config, step: float) -> np.ndarray:
    """Samples along x1->x2 with spacing <= step, including both endpoints.

    The segment is halved until the spacing fits, so the sample set for a
    smaller step always contains the set for a larger one.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    n = 1 << _dyadic_levels(distance(x1, x2), step)
    t = np.arange(n + 1) / n
    return x1[None, :] + t[:, None] * (x2 - x1)[None, :]


@dataclass(frozen=True)
class SegmentCheck:
    """Outcome of ``segment_free``; ``q_hit`` is None for a free segment."""

    free: bool
    q_hit: Optional[np.ndarray] = None
    last_free: Optional[np.ndarray] = None

    def __bool__(self) -> bool:
        return self.free


def segment_free(env: Environment, x1: Config, x2: Config, step: float) -> SegmentCheck:
    """Walk x1->x2 and report the first sample that is not free, if any."""
    samples = segment_samples(x1, x2, step)
    ok = free_batch(env, samples)
    if ok.all():
        return SegmentCheck(True)
    i = int(np.argmin(ok))
    last = samples[i - 1].copy() if i > 0 else None
    return SegmentCheck(False, samples[i].copy(), last)


def segments_free_batch(env: Environment, x1: Config, X2: np.ndarray, step: float) -> np.ndarray:
    """``segment_free(env, x1, x2, step).free`` for each row x2 of X2, vectorised."""
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    return segments_free_pairs(env, np.broadcast_to(np.asarray(x1, dtype=float), X2.shape), X2, step)


def segments_free_pairs(env: Environment, A: np.ndarray, B: np.ndarray, step: float) -> np.ndarray:
    """``segment_free(env, a, b, step).free`` for each row pair (a, b), vectorised."""
    if step <= 0:
        raise ContractError("step must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    D = np.atleast_2d(np.asarray(B, dtype=float)) - A
    lengths = np.sqrt(np.einsum("ij,ij->i", D, D))
    n = np.ldexp(1.0, _dyadic_levels_batch(lengths, step))
    nmax = int(n.max())
    # rows with fewer samples repeat their endpoint, which leaves the test unchanged
    t = np.minimum(np.arange(nmax + 1.0)[None, :], n[:, None]) / n[:, None]
    samples = A[:, None, :] + t[..., None] * D[:, None, :]
    ok = free_batch(env, samples.reshape(-1, A.shape[1]))
    return ok.reshape(A.shape[0], nmax + 1).all(axis=1)


# ------------------------------------------------------------------------- sampling

_degenerate_samples = 0


def degenerate_sample_count() -> int:
    return _degenerate_samples


@lru_cache(maxsize=None)
def _ball_cube_ratio(d: int) -> float:
    """Volume of the unit d-ball over that of its bounding cube."""
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) / 2**d


def sample_in_ball(
    center: Config,
    eps: float,
    lo: np.ndarray,
    hi: np.ndarray,
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> np.ndarray:
    """Uniform samples from the eps-ball around ``center`` clipped to the bounds.

    Rejection from the bounding cube. ``size=None`` returns one configuration,
    otherwise an array of shape (size, d).
    """
    global _degenerate_samples
    center = np.asarray(center, dtype=float)
    d = center.shape[0]
    m = 1 if size is None else int(size)
    if eps <= 0:
        out = np.repeat(center[None, :], m, axis=0)
        return out[0] if size is None else out
    accept = _ball_cube_ratio(d)
    batch = max(8, int(math.ceil(m / accept * 1.3)))
    out = np.empty((m, d))
    filled = 0
    tries = 0
    while filled < m:
        off = rng.uniform(-eps, eps, size=(batch, d))
        cand = center + off[np.einsum("ij,ij->i", off, off) <= eps * eps]
        good = cand[((cand >= lo) & (cand <= hi)).all(axis=1)]
        take = min(m - filled, good.shape[0])
        out[filled : filled + take] = good[:take]
        filled += take
        tries += batch
        if filled < m and tries >= MAX_BALL_REJECTIONS * m:
            rest = m - filled
            direction = rng.normal(size=(rest, d))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            out[filled:] = np.clip(center + eps * direction, lo, hi)
            _degenerate_samples += rest
            log.warning("degenerate ball sampling: %d clamped draws around %s", rest, center)
            filled = m
    return out[0] if size is None else out


# ------------------------------------------------------------------------- fixtures


def _obstacle_from_dict(d: dict) -> Obstacle:
    shape = d["shape"]
    if shape == "box":
        return Box(tuple(float(v) for v in d["min"]), tuple(float(v) for v in d["size"]))
    if shape in ("ball", "disc", "sphere"):
        return Ball(tuple(float(v) for v in d["center"]), float(d["radius"]))
    raise ContractError(f"unknown obstacle shape {shape!r}")


def environment_from_dict(data: dict) -> Environment:
    dim = int(data["dimension"])
    bounds = data["bounds"]
    if len(bounds) == 2 and not isinstance(bounds[0], (list, tuple)):
        bounds = [bounds] * dim
    robot = data["robot"]
    model = RobotModel(
        kind=robot["kind"],
        link_lengths=tuple(float(v) for v in robot.get("link_lengths", ())),
        base=tuple(float(v) for v in robot.get("base", (0.0, 0.0))),
    )
    return Environment(
        name=data.get("name", "custom"),
        dimension=dim,
        bounds=tuple((float(a), float(b)) for a, b in bounds),
        robot=model,
        obstacles=tuple(_obstacle_from_dict(o) for o in data.get("obstacles", ())),
        start=tuple(float(v) for v in data["start"]),
        goal=tuple(float(v) for v in data["goal"]),
        goal_radius=float(data["goal_radius"]),
        clearance_delta=float(data.get("clearance_delta", 0.0)),
        reference_path=tuple(tuple(float(v) for v in p) for p in data.get("reference_path", ())),
        params=dict(data.get("params", {})),
    )


def environment_to_dict(env: Environment) -> dict:
    out = {
        "name": env.name,
        "dimension": env.dimension,
        "bounds": [list(b) for b in env.bounds],
        "robot": {
            "kind": env.robot.kind,
            "link_lengths": list(env.robot.link_lengths),
            "base": list(env.robot.base),
        },
        "obstacles": [o.to_dict() for o in env.obstacles],
        "start": list(env.start),
        "goal": list(env.goal),
        "goal_radius": env.goal_radius,
        "clearance_delta": env.clearance_delta,
    }
    if env.reference_path:
        out["reference_path"] = [list(p) for p in env.reference_path]
    if env.params:
        out["params"] = env.params
    return out


def save_environment(env: Environment, path) -> None:
    pathlib.Path(path).write_text(json.dumps(environment_to_dict(env), indent=2) + "\n")


def load_environment(path) -> Environment:
    return environment_from_dict(json.loads(pathlib.Path(path).read_text()))


def make_environment(name: str) -> Environment:
    """Load one of the bundled fixtures by name."""
    if name not in ENVIRONMENT_NAMES:
        raise ContractError(f"unknown environment {name!r}; expected one of {ENVIRONMENT_NAMES}")
    text = resources.files("mcpp.fixtures").joinpath(f"{name}.json").read_text()
    return environment_from_dict(json.loads(text))
