import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcpp import space
from mcpp.space import (
    Ball,
    Box,
    ContractError,
    Environment,
    RobotModel,
    contains_free,
    distance,
    forward_kinematics,
    make_environment,
    sample_in_ball,
    segment_free,
    segment_samples,
    segments_free_batch,
)

UNIT_ARM = RobotModel("PlanarArm", (1.0,) * 7, (0.0, 0.0))


def point_env(obstacles=(), dim=2, lo=0.0, hi=1.0):
    kind = "Point2D" if dim == 2 else "Point3D"
    return Environment(
        name="t",
        dimension=dim,
        bounds=((lo, hi),) * dim,
        robot=RobotModel(kind),
        obstacles=tuple(obstacles),
        start=(0.1,) * dim,
        goal=(0.9,) * dim,
        goal_radius=0.05,
    )


def arm_env(obstacles):
    return Environment(
        name="arm",
        dimension=7,
        bounds=((-math.pi, math.pi),) * 7,
        robot=UNIT_ARM,
        obstacles=tuple(obstacles),
        start=(0.0,) * 7,
        goal=(0.1,) * 7,
        goal_radius=0.1,
    )


# ---------------------------------------------------------------------- distance


def test_distance_identity_and_345():
    assert distance(np.zeros(2), np.zeros(2)) == 0.0
    assert distance(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == 5.0


def test_distance_matches_coordinatewise_oracle_7d():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x, y = rng.normal(size=7), rng.normal(size=7)
        oracle = math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y)))
        assert abs(distance(x, y) - oracle) <= 1e-12


def test_distance_dimension_mismatch():
    with pytest.raises(ContractError):
        distance(np.zeros(2), np.zeros(3))


coords = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(coords, coords, coords), min_size=3, max_size=3))
def test_distance_triangle_inequality_and_symmetry(pts):
    x, y, z = (np.array(p) for p in pts)
    assert distance(x, z) <= distance(x, y) + distance(y, z) + 1e-9
    assert distance(x, y) == distance(y, x)


def test_distance_triangle_inequality_bulk():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        x, y, z = rng.normal(size=(3, 4))
        assert distance(x, z) <= distance(x, y) + distance(y, z) + 1e-12


def test_path_cost_is_sum_of_distances():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(6, 3))
    p = space.Path.from_waypoints(pts)
    expect = sum(np.linalg.norm(b - a) for a, b in zip(pts[:-1], pts[1:]))
    assert p.total_cost == pytest.approx(expect, rel=1e-9)
    q = space.Path.from_waypoints(pts[:1])
    for w in pts[1:]:
        q.append(w)
    assert q.total_cost == pytest.approx(expect, rel=1e-9)


# -------------------------------------------------------------------- kinematics


def test_fk_straight_chain():
    segs = forward_kinematics(UNIT_ARM, np.zeros(7))
    assert segs.shape == (7, 2, 2)
    assert np.allclose(segs[-1, 1], [7.0, 0.0])


def test_fk_rotated_chain():
    q = np.zeros(7)
    q[0] = math.pi / 2
    assert np.allclose(forward_kinematics(UNIT_ARM, q)[-1, 1], [0.0, 7.0], atol=1e-12)


def test_fk_matches_complex_exponential_oracle():
    rng = np.random.default_rng(3)
    model = RobotModel("PlanarArm", tuple(rng.uniform(0.1, 0.5, 7)), (0.3, -0.2))
    for _ in range(50):
        q = rng.uniform(-math.pi, math.pi, 7)
        z = complex(*model.base) + sum(
            l * np.exp(1j * a) for l, a in zip(model.link_lengths, np.cumsum(q))
        )
        ee = forward_kinematics(model, q)[-1, 1]
        assert abs(ee[0] - z.real) <= 1e-9 and abs(ee[1] - z.imag) <= 1e-9
        assert np.allclose(space.end_effector(model, q), ee, atol=1e-12)
        assert np.allclose(space.end_effector_batch(model, q[None])[0], ee, atol=1e-12)


def test_fk_chain_continuity_and_link_lengths():
    rng = np.random.default_rng(4)
    model = RobotModel("PlanarArm", tuple(rng.uniform(0.1, 0.5, 7)))
    segs = forward_kinematics(model, rng.uniform(-3, 3, 7))
    assert np.array_equal(segs[:-1, 1], segs[1:, 0])
    assert np.allclose(np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1), model.link_lengths)


def test_fk_rejects_point_robot():
    with pytest.raises(ContractError):
        forward_kinematics(RobotModel("Point2D"), np.zeros(7))


def test_robot_model_validation():
    with pytest.raises(ContractError):
        RobotModel("PlanarArm", (1.0,) * 6)
    with pytest.raises(ContractError):
        RobotModel("Tripod")


# ------------------------------------------------------------------- collisions


def test_contains_free_point_cases():
    env = point_env([Box((0.4, 0.4), (0.2, 0.2))])
    assert contains_free(point_env(), np.array([0.0, 0.0]))
    assert not contains_free(env, np.array([0.5, 0.5]))
    # closed obstacle: the boundary counts as a hit
    assert not contains_free(env, np.array([0.4, 0.5]))
    assert contains_free(env, np.array([0.39, 0.5]))


def test_out_of_bounds_counts_as_collision():
    assert not contains_free(point_env(), np.array([1.2, 0.5]))


def test_ball_obstacle_3d():
    env = point_env([Ball((0.5, 0.5, 0.5), 0.1)], dim=3)
    assert not contains_free(env, np.array([0.55, 0.5, 0.5]))
    assert contains_free(env, np.array([0.5, 0.5, 0.65]))


def _dense_arm_oracle(env, q, step=1e-4):
    segs = forward_kinematics(env.robot, q)
    for a, b in segs:
        n = int(np.ceil(np.linalg.norm(b - a) / step))
        pts = a + np.linspace(0, 1, n + 1)[:, None] * (b - a)
        if space._points_collide(env, pts).any():
            return False
    return True


def test_arm_link_crossing_box_corner():
    # the straight chain runs along y = 0; a box corner dips just below it
    env = arm_env([Box((3.5, -0.5), (0.5, 0.5005))])
    q = np.zeros(7)
    assert not contains_free(env, q)
    assert _dense_arm_oracle(env, q) is False
    env_clear = arm_env([Box((3.5, -0.5), (0.5, 0.4995))])
    assert contains_free(env_clear, q)
    assert _dense_arm_oracle(env_clear, q) is True


def test_arm_collision_agrees_with_dense_sampling():
    env = arm_env([Box((2.0, 1.0), (1.0, 1.5)), Ball((-2.0, 2.0), 0.8), Box((1.0, -3.0), (0.3, 2.0))])
    rng = np.random.default_rng(5)
    for _ in range(200):
        q = rng.uniform(-1.5, 1.5, 7)
        assert contains_free(env, q) == _dense_arm_oracle(env, q)


def test_segment_free_trivial_and_blocked():
    env = point_env([Box((0.45, 0.0), (0.1, 1.0))])
    x = np.array([0.2, 0.5])
    assert segment_free(env, x, x, 0.01).free
    res = segment_free(env, x, np.array([0.8, 0.5]), 0.01)
    assert not res.free
    assert 0.45 <= res.q_hit[0] <= 0.55
    assert res.last_free[0] < 0.45 and contains_free(env, res.last_free)


def test_segment_free_rejects_bad_step():
    with pytest.raises(ContractError):
        segment_free(point_env(), np.zeros(2), np.ones(2), 0.0)


def test_segment_free_empty_env_half_step_agrees():
    env = point_env()
    rng = np.random.default_rng(6)
    for _ in range(50):
        a, b = rng.uniform(0, 1, (2, 2))
        assert segment_free(env, a, b, 0.05).free
        assert segment_free(env, a, b, 0.025).free


def test_segment_samples_are_nested():
    a, b = np.zeros(3), np.array([0.7, -0.2, 0.4])
    coarse = segment_samples(a, b, 0.1)
    fine = segment_samples(a, b, 0.05)
    assert np.diff(np.linalg.norm(fine - a, axis=1)).max() <= 0.05 + 1e-12
    for p in coarse:
        assert np.min(np.linalg.norm(fine - p, axis=1)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(
    st.tuples(st.floats(0, 1), st.floats(0, 1)),
    st.tuples(st.floats(0, 1), st.floats(0, 1)),
    st.floats(0.001, 0.2),
)
def test_segment_free_monotone_in_step(a, b, s):
    env = point_env([Box((0.4, 0.3), (0.05, 0.4)), Ball((0.7, 0.7), 0.1)])
    a, b = np.array(a), np.array(b)
    if not segment_free(env, a, b, s).free:
        for s2 in (s / 2, s / 3, s / 10):
            assert not segment_free(env, a, b, s2).free


def test_segments_free_batch_matches_loop():
    env = make_environment("UShape2D")
    rng = np.random.default_rng(7)
    x1 = env.x_init
    X2 = x1 + rng.normal(0, 0.3, (64, 7))
    X2[0] = x1
    batch = segments_free_batch(env, x1, X2, 0.03)
    loop = [segment_free(env, x1, x2, 0.03).free for x2 in X2]
    assert batch.tolist() == loop


def test_dyadic_levels_batch_matches_loop():
    rng = np.random.default_rng(8)
    lengths = np.concatenate([[0.0, 0.1, 0.2, 0.4], rng.uniform(0, 3, 500)])
    for step in (0.1, 0.03, 0.0123):
        got = space._dyadic_levels_batch(lengths, step)
        assert got.tolist() == [space._dyadic_levels(l, step) for l in lengths]


# --------------------------------------------------------------------- sampling


def test_sample_in_ball_zero_radius_is_center():
    c = np.array([0.3, 0.4])
    out = sample_in_ball(c, 0.0, np.zeros(2), np.ones(2), np.random.default_rng(0))
    assert np.array_equal(out, c)


def test_sample_in_ball_statistics_2d():
    rng = np.random.default_rng(9)
    c, eps = np.array([0.5, 0.5]), 0.1
    X = sample_in_ball(c, eps, np.zeros(2), np.ones(2), rng, 10_000)
    r = np.linalg.norm(X - c, axis=1)
    assert r.max() <= eps
    assert np.linalg.norm(X.mean(axis=0) - c) <= 0.05 * eps
    assert abs((r <= eps / 2).mean() - 0.25) <= 0.03


def test_sample_in_ball_respects_bounds_7d():
    rng = np.random.default_rng(10)
    lo, hi = np.full(7, -1.0), np.full(7, 1.0)
    c = np.full(7, 0.95)
    X = sample_in_ball(c, 0.3, lo, hi, rng, 200)
    assert (X <= hi).all() and (X >= lo).all()
    assert (np.linalg.norm(X - c, axis=1) <= 0.3 + 1e-12).all()


def test_sample_in_ball_degenerate_fallback():
    before = space.degenerate_sample_count()
    c = np.array([0.0, 0.0])
    lo, hi = np.zeros(2), np.full(2, 1e-9)
    # the bounds cover a vanishing corner of the ball
    out = sample_in_ball(c, 1.0, lo, hi, np.random.default_rng(0))
    assert space.degenerate_sample_count() > before
    assert distance(out, c) <= 1.0
    assert (out >= lo).all() and (out <= hi).all()


# --------------------------------------------------------------------- fixtures


@pytest.mark.parametrize("name", space.ENVIRONMENT_NAMES)
def test_fixture_endpoints_free(name):
    env = make_environment(name)
    assert contains_free(env, env.x_init)
    assert contains_free(env, env.x_goal)


@pytest.mark.parametrize("name", space.ENVIRONMENT_NAMES)
def test_fixture_round_trip(name, tmp_path):
    env = make_environment(name)
    path = tmp_path / f"{name}.json"
    space.save_environment(env, path)
    assert space.load_environment(path) == env


@pytest.mark.parametrize("name", ["UShape2D", "LShape2D"])
def test_arm_fixtures_need_a_detour(name):
    env = make_environment(name)
    assert env.robot.kind == "PlanarArm"
    assert not segment_free(env, env.x_init, env.x_goal, 0.003).free


def test_ushape_is_three_rectangles_and_lshape_two():
    assert len(make_environment("UShape2D").obstacles) == 3
    assert len(make_environment("LShape2D").obstacles) == 2


def test_highwall_geometry():
    env = make_environment("HighWall3D")
    assert env.robot.kind == "Point3D"
    (wall,) = env.obstacles
    assert wall.size[2] == pytest.approx(0.8) and wall.size[0] == pytest.approx(0.05)
    # start and goal on opposite sides of the wall, close compared to its height
    assert env.x_init[0] < wall.lo[0] and env.x_goal[0] > wall.hi[0]
    assert distance(env.x_init, env.x_goal) == pytest.approx(0.2)
    assert distance(env.x_init, env.x_goal) < wall.size[2]
    assert not segment_free(env, env.x_init, env.x_goal, 0.01).free


def test_emptybox_any_segment_free():
    env = make_environment("EmptyBox")
    rng = np.random.default_rng(11)
    for _ in range(50):
        a, b = rng.uniform(env.lo, env.hi, (2, env.dimension))
        assert segment_free(env, a, b, 0.01).free


def test_reference_path_clear_at_delta():
    env = make_environment("DiscBox")
    delta = env.clearance_delta
    inflated = [Ball(o.center, o.radius + delta - 1e-6) for o in env.obstacles]
    grown = Environment(
        "grown", env.dimension, env.bounds, env.robot, tuple(inflated), env.start, env.goal, env.goal_radius
    )
    ref = np.asarray(env.reference_path)
    assert np.array_equal(ref[0], env.x_init)
    for a, b in zip(ref[:-1], ref[1:]):
        assert segment_free(grown, a, b, 0.001).free


def test_unknown_environment():
    with pytest.raises(ContractError):
        make_environment("Nowhere")
