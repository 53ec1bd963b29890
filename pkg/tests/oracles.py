"""Reference implementations the tests compare against.

Each oracle is written independently of the package code it checks: brute
force where feasible, textbook recurrences otherwise.
"""
import itertools
import math

import numpy as np

from mcpp.space import Ball, Environment, RobotModel, contains_free


def simplex_projection_bruteforce(z) -> np.ndarray:
    """argmin ||p - z||^2 over the probability simplex by enumerating supports.

    For a fixed support S the minimiser on the face is p_S = z_S - t with
    t = (sum z_S - 1) / |S|; among the feasible (non-negative) face minimisers
    the closest to z is the projection.
    """
    z = np.asarray(z, dtype=float)
    n = z.size
    masks = np.array(list(itertools.product((0.0, 1.0), repeat=n)))[1:]
    size = masks.sum(axis=1)
    t = (masks @ z - 1.0) / size
    cand = masks * (z[None, :] - t[:, None])
    feasible = (cand >= 0.0).all(axis=1)
    cand = cand[feasible]
    return cand[np.argmin(((cand - z[None, :]) ** 2).sum(axis=1))]


GRID_MOVES = ((1, 0), (0, 1), (-1, 0), (0, -1))


def grid_value_iteration(size: int, blocked: set, goal: tuple, gamma: float = 0.95, sweeps: int = 500):
    """Discounted value iteration on a 4-connected grid; reward 1 for entering the goal.

    Returns ``(V, optimal)`` where ``optimal[cell]`` is the set of moves that
    attain the Bellman maximum within 1e-12.
    """
    cells = [(x, y) for x in range(size) for y in range(size) if (x, y) not in blocked]
    V = {c: 0.0 for c in cells}

    def succ(c):
        for m in GRID_MOVES:
            nxt = (c[0] + m[0], c[1] + m[1])
            if nxt in V:
                yield m, nxt

    def backup(c, m, nxt):
        return (1.0 if nxt == goal else 0.0) + gamma * (0.0 if nxt == goal else V[nxt])

    for _ in range(sweeps):
        V = {c: (0.0 if c == goal else max(backup(c, m, n) for m, n in succ(c))) for c in cells}
    optimal = {}
    for c in cells:
        if c == goal:
            continue
        vals = {m: backup(c, m, n) for m, n in succ(c)}
        best = max(vals.values())
        optimal[c] = {m for m, v in vals.items() if v >= best - 1e-12}
    return V, optimal


def belief_closed_form(p0: float, p_max: float, beta: float, w: float, k: int) -> float:
    """Cell probability after k identical collision updates of weight w."""
    return p_max - (p_max - p0) * (1.0 - beta * w) ** k


def random_disc_fixture(seed: int, discs: int = 3) -> Environment:
    """Unit square with a few random disc obstacles and free endpoints."""
    rng = np.random.default_rng(seed)
    while True:
        obstacles = tuple(
            Ball(tuple(rng.uniform(0.25, 0.75, 2)), float(rng.uniform(0.05, 0.15))) for _ in range(discs)
        )
        env = Environment(
            name=f"random{seed}",
            dimension=2,
            bounds=((0.0, 1.0), (0.0, 1.0)),
            robot=RobotModel("Point2D"),
            obstacles=obstacles,
            start=tuple(rng.uniform(0.0, 0.2, 2)),
            goal=tuple(rng.uniform(0.8, 1.0, 2)),
            goal_radius=0.05,
        )
        if contains_free(env, env.x_init) and contains_free(env, env.x_goal):
            return env


def binomial_slack_ok(fractions, n: int) -> bool:
    """Non-increasing sequence up to a one-sided two-sigma binomial slack."""
    for a, b in zip(fractions[:-1], fractions[1:]):
        pooled = max(a, b)
        sigma = math.sqrt(max(pooled * (1.0 - pooled), 1.0 / n) / n)
        if b > a + 2.0 * sigma:
            return False
    return True
