"""Benchmark harness: seed sweeps, the failure-decay experiment and bound curves.

Suites are JSON files naming environments, planners (with per-planner config
overrides), a seed count and a budget. Every episode draws its RNG from a
stable hash of (base seed, environment, planner, seed index), so records do
not depend on run order, worker count, or which other pairs are in the suite.

Raw record files hold only deterministic fields; planning wall times go to a
separate timings file so that reruns produce byte-identical raw records.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import math
import os
import pathlib
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import space
from .baselines import PLANNERS, get_planner
from .mcts import POWER_UCT, TENTS, UCT, Search, StrategyConfig
from .planners import MdpSimulator, strategy_for
from .space import ContractError, Environment

ENV_NAMES = ("GridWorld", "EmptyBox", "DiscBox", "WallBox", "UShape2D", "LShape2D", "HighWall3D")
RAW_FILE = "records.jsonl"
TIMING_FILE = "timings.csv"
TABLE_FILE = "table"

RAW_FIELDS = ("environment", "planner", "seed", "success", "collisions", "replans", "steps", "path_cost")
AGG_FIELDS = (
    "environment",
    "planner",
    "episodes",
    "time_mean",
    "time_se",
    "collisions_mean",
    "collisions_se",
    "success_pct",
)
TABLE_FIELDS = ("row",) + RAW_FIELDS + ("time",) + AGG_FIELDS[2:]


class ConfigError(ValueError):
    """Suite configuration that cannot be run."""


# ------------------------------------------------------------------------ suites


@dataclass
class SuiteConfig:
    environments: List[str]
    planners: Dict[str, dict]
    seeds: int = 20
    base_seed: int = 0
    budget: int = 500
    output_dir: str = "bench_out"
    observable: bool = False

    def __post_init__(self):
        if isinstance(self.planners, (list, tuple)):
            self.planners = {name: {} for name in self.planners}
        if self.seeds < 1:
            raise ConfigError("seeds must be at least 1")
        if self.budget < 1:
            raise ConfigError("budget must be at least 1")
        for name in self.environments:
            try:
                space.make_environment(name)
            except (ContractError, FileNotFoundError, KeyError) as exc:
                raise ConfigError(f"unknown environment {name!r}") from exc
        unknown = [p for p in self.planners if p not in PLANNERS]
        if unknown:
            raise ConfigError(f"unknown planners {unknown}; known: {sorted(PLANNERS)}")

    @classmethod
    def from_dict(cls, data: dict) -> "SuiteConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - fields
        if extra:
            raise ConfigError(f"unknown suite keys {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SuiteConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunRecord:
    environment: str
    planner: str
    seed: int
    success: bool
    collisions: int
    replans: int
    steps: int
    path_cost: float
    time: float = field(default=0.0, compare=False)

    def raw(self) -> dict:
        return {k: getattr(self, k) for k in RAW_FIELDS}


def episode_seed(base_seed: int, env_name: str, planner: str, index: int) -> int:
    """Stable 64-bit seed for one episode."""
    key = f"{base_seed}|{env_name}|{planner}|{index}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def _run_one(job) -> RunRecord:
    env_name, planner, index, base_seed, budget, observable, overrides = job
    env = space.make_environment(env_name)
    rng = np.random.default_rng(episode_seed(base_seed, env_name, planner, index))
    res = get_planner(planner)(
        env, rng, seed=base_seed + index, budget=budget, observable=observable, **overrides
    )
    return RunRecord(
        env_name,
        planner,
        base_seed + index,
        bool(res.success),
        int(res.collisions),
        int(res.replans),
        int(res.steps),
        float(res.path.total_cost),
        float(res.wall_time),
    )


def worker_count() -> int:
    cap = os.environ.get("MCPP_WORKERS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def sort_records(records) -> List[RunRecord]:
    return sorted(records, key=lambda r: (r.environment, r.planner, r.seed))


def run_suite(cfg: SuiteConfig, write: bool = True, workers: Optional[int] = None) -> List[RunRecord]:
    """One episode per (environment, planner, seed); records sorted, files written."""
    jobs = [
        (e, p, i, cfg.base_seed, cfg.budget, cfg.observable, dict(cfg.planners[p] or {}))
        for e in cfg.environments
        for p in cfg.planners
        for i in range(cfg.seeds)
    ]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(job) for job in jobs]
    records = sort_records(records)
    if write:
        write_outputs(records, cfg.output_dir)
    return records


def write_outputs(records: Sequence[RunRecord], output_dir) -> None:
    out = pathlib.Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_raw(records, out / RAW_FILE)
    write_timings(records, out / TIMING_FILE)
    export_table(records, "CSV", out / f"{TABLE_FILE}.csv")
    export_table(records, "JSON", out / f"{TABLE_FILE}.json")


def write_raw(records: Sequence[RunRecord], path) -> None:
    with open(path, "w") as fh:
        for r in sort_records(records):
            fh.write(json.dumps(r.raw(), sort_keys=False) + "\n")


def write_timings(records: Sequence[RunRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("environment", "planner", "seed", "time"))
        for r in sort_records(records):
            w.writerow((r.environment, r.planner, r.seed, repr(r.time)))


def load_raw(path, timings=None) -> List[RunRecord]:
    """Records from a raw file, with planning times joined from ``timings`` if given."""
    times = {}
    if timings is not None and pathlib.Path(timings).exists():
        with open(timings, newline="") as fh:
            for row in csv.DictReader(fh):
                times[(row["environment"], row["planner"], int(row["seed"]))] = float(row["time"])
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                key = (d["environment"], d["planner"], d["seed"])
                records.append(RunRecord(**d, time=times.get(key, 0.0)))
    return records


# -------------------------------------------------------------------- aggregates


def _mean_se(values) -> tuple:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return 0.0, 0.0
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def aggregate(records: Sequence[RunRecord]) -> List[dict]:
    """Per (environment, planner): time and collisions mean with standard error, success %."""
    groups: Dict[tuple, List[RunRecord]] = {}
    for r in sort_records(records):
        groups.setdefault((r.environment, r.planner), []).append(r)
    rows = []
    for (env, planner), rs in groups.items():
        t_mean, t_se = _mean_se([r.time for r in rs])
        c_mean, c_se = _mean_se([r.collisions for r in rs])
        rows.append(
            {
                "environment": env,
                "planner": planner,
                "episodes": len(rs),
                "time_mean": t_mean,
                "time_se": t_se,
                "collisions_mean": c_mean,
                "collisions_se": c_se,
                "success_pct": 100.0 * sum(r.success for r in rs) / len(rs),
            }
        )
    return rows


def write_table(records: Sequence[RunRecord], fmt: str, fh) -> None:
    """Per-seed raw rows plus one aggregate row per (environment, planner), to a stream."""
    fmt = fmt.upper()
    records = sort_records(records)
    raw = [dict(r.raw(), time=r.time) for r in records]
    agg = aggregate(records)
    if fmt == "JSON":
        json.dump({"raw": raw, "aggregate": agg}, fh, indent=1)
        fh.write("\n")
    elif fmt == "CSV":
        w = csv.DictWriter(fh, fieldnames=TABLE_FIELDS, restval="", lineterminator="\n")
        w.writeheader()
        for row in raw:
            w.writerow(dict(row, row="raw"))
        for row in agg:
            w.writerow(dict(row, row="aggregate"))
    else:
        raise ConfigError(f"unknown table format {fmt!r}")


def export_table(records: Sequence[RunRecord], fmt: str, path) -> None:
    with open(path, "w", newline="") as fh:
        write_table(records, fmt, fh)


def load_table(path) -> dict:
    """Inverse of ``export_table``: {'raw': [...], 'aggregate': [...]} with typed values."""
    path = pathlib.Path(path)
    if path.suffix.lower() == ".json":
        with open(path) as fh:
            return json.load(fh)
    ints = {"seed", "collisions", "replans", "steps", "episodes"}
    out = {"raw": [], "aggregate": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kind = row.pop("row")
            names = RAW_FIELDS + ("time",) if kind == "raw" else AGG_FIELDS
            typed = {}
            for k in names:
                v = row[k]
                if k in ("environment", "planner"):
                    typed[k] = v
                elif k == "success":
                    typed[k] = v == "True"
                elif k in ints:
                    typed[k] = int(v)
                else:
                    typed[k] = float(v)
            out[kind].append(typed)
    return out


def format_table(rows: Sequence[dict]) -> str:
    """Plain-text table shaped like the published comparison tables."""
    lines = [f"{'environment':<12} {'planner':<16} {'Time':>18} {'Collisions':>16} {'Success Rate':>13}"]
    for r in rows:
        lines.append(
            f"{r['environment']:<12} {r['planner']:<16} "
            f"{r['time_mean']:>10.3f}±{r['time_se']:<7.3f} "
            f"{r['collisions_mean']:>8.2f}±{r['collisions_se']:<7.2f} "
            f"{r['success_pct']:>12.1f}%"
        )
    return "\n".join(lines)


# -------------------------------------------------------------- failure decay


@dataclass
class DecayCurve:
    environment: str
    planner: str
    budgets: List[int]
    failures: List[float]
    seeds: int
    slope: Optional[float] = None


def _mirror(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reflect points across the line through a and b."""
    u = (b - a) / np.linalg.norm(b - a)
    rel = points - a
    along = rel @ u
    return a + 2.0 * along[:, None] * u[None, :] - rel


def optimal_paths(env: Environment) -> List[np.ndarray]:
    """The environment's reference optimal path and, if declared symmetric, its mirror image."""
    if not env.reference_path:
        raise ContractError(f"{env.name} has no reference optimal path")
    ref = np.asarray(env.reference_path, dtype=float)
    paths = [ref]
    if env.param("reference_mirror", False):
        paths.append(_mirror(ref, env.x_init, env.x_goal))
    return paths


def distance_to_polyline(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to the nearest point of a polyline."""
    A, B = poly[:-1], poly[1:]
    D = B - A
    dd = np.maximum(np.einsum("ij,ij->i", D, D), 1e-300)
    rel = points[:, None, :] - A[None, :, :]
    t = np.clip(np.einsum("mij,ij->mi", rel, D) / dd, 0.0, 1.0)
    near = A[None] + t[..., None] * D[None]
    return np.sqrt(((points[:, None, :] - near) ** 2).sum(axis=-1)).min(axis=1)


def in_tube(env: Environment, a, b, paths=None) -> bool:
    """Whether the segment a -> b stays within the clearance tube of an optimal path."""
    paths = optimal_paths(env) if paths is None else paths
    delta = env.clearance_delta
    pts = space.segment_samples(np.asarray(a, float), np.asarray(b, float), max(delta / 4.0, 1e-9))
    return any(distance_to_polyline(pts, p).max() <= delta for p in paths)


def greedy_branch(search: Search, rng) -> tuple:
    """Follow best edges from the root; returns (waypoints, reached_goal)."""
    node = search.root
    points = [node.state]
    while node is not None and node.expanded and node.edges:
        edge = search.best_edge(node) if rng is None else _best_edge_with(search, node, rng)
        if edge.child is None:
            break
        points.append(edge.child.state)
        if edge.terminal:
            return points, search.sim.is_goal(edge.child.state)
        node = edge.child
    return points, False


def _best_edge_with(search: Search, node, rng):
    saved = search.rng
    search.rng = rng
    try:
        return search.best_edge(node)
    finally:
        search.rng = saved


def decay_trial_success(env: Environment, search: Search, rng, paths, optimal_cost: float) -> bool:
    """One single-Search trial: first segment in the tube, or a goal branch within 1.2x optimal."""
    first = _best_edge_with(search, search.root, rng)
    if in_tube(env, search.root.state, first.action_target, paths):
        return True
    points, reached = greedy_branch(search, rng)
    return reached and space.path_cost(points) <= 1.2 * optimal_cost


def decay_fit(budgets, failures) -> Optional[float]:
    """Least-squares slope of log(failure) against budget, over budgets with failures."""
    b = np.asarray(budgets, dtype=float)
    f = np.asarray(failures, dtype=float)
    keep = f > 0
    if keep.sum() < 2:
        return None
    return float(np.polyfit(b[keep], np.log(f[keep]), 1)[0])


def failure_decay_experiment(
    env_name: str,
    planner: str,
    budgets: Sequence[int],
    seeds: int,
    base_seed: int = 0,
    **overrides,
) -> DecayCurve:
    """Failure fraction of single-Search MDP trials at each budget.

    Each seed runs one search up to the largest budget and is scored at every
    budget on the way. The tree after n simulations is exactly the tree a fresh
    n-simulation search would build, and the final tie-break draws from a copy
    of the RNG taken at that point, so each checkpoint equals an independent
    search at that budget.
    """
    if planner not in (UCT, POWER_UCT, TENTS):
        raise ConfigError("the decay experiment needs an MCPP planner (UCT, PowerUCT or TENTS)")
    budgets = [int(n) for n in budgets]
    if not budgets or min(budgets) < 1:
        raise ConfigError("budgets must be positive")
    env = space.make_environment(env_name)
    paths = optimal_paths(env)
    optimal_cost = space.path_cost(paths[0])
    order = sorted(set(budgets))
    fails = {n: 0 for n in order}
    for i in range(seeds):
        rng = np.random.default_rng(episode_seed(base_seed, env_name, planner, i))
        cfg = strategy_for(env, planner, budget=order[-1], **overrides)
        s = Search(MdpSimulator(env), cfg, rng)
        s.root = None
        done = 0
        for n in order:
            while done < n:
                if done == 0:
                    _start(s, env.x_init)
                s.simulate_v(s.root, 0)
                done += 1
            if not decay_trial_success(env, s, copy.deepcopy(rng), paths, optimal_cost):
                fails[n] += 1
    failures = [fails[n] / seeds for n in budgets]
    return DecayCurve(env_name, planner, budgets, failures, seeds, decay_fit(budgets, failures))


def _start(search: Search, state) -> None:
    from .mcts import VNode

    search.root = VNode(np.asarray(state, dtype=float), 0)
    search.expand(search.root)


# ---------------------------------------------------------------------- bounds


GENERIC, POWERUCT_BOUND, TENTS_BOUND = "Generic", "PowerUCT", "TENTS"
PRINTED, THEOREM_SHAPE = "printed", "theorem"


class DomainError(ValueError):
    """Bound evaluated outside its domain."""


@dataclass(frozen=True)
class BoundParams:
    variant: str = GENERIC
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    c_hat: float = 1.0
    alpha: float = 0.5
    tents_reading: str = PRINTED

    def __post_init__(self):
        if self.variant not in (GENERIC, POWERUCT_BOUND, TENTS_BOUND):
            raise ConfigError(f"unknown bound variant {self.variant!r}")
        if min(self.a, self.b, self.c, self.c_hat) <= 0:
            raise ConfigError("a, b, c and c_hat must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.tents_reading not in (PRINTED, THEOREM_SHAPE):
            raise ConfigError(f"unknown TENTS reading {self.tents_reading!r}")


def _bound_exponent(t: float, params: BoundParams) -> float:
    """Exponent e(t) with bound_g = a * exp(e(t)); raises outside the variant's domain."""
    p = params
    if p.variant == GENERIC:
        if t < 0:
            raise DomainError("t must be non-negative")
        return -p.b * t
    if t <= 0:
        raise DomainError("t must be positive")
    if p.variant == POWERUCT_BOUND:
        return -p.b * (1.0 - (1.0 / t) ** p.alpha) * t
    if t <= 1:
        raise DomainError("the TENTS bound needs t > 1")
    inner = p.c * t * math.exp(-t / (p.c_hat * math.log(t) ** 3))
    if p.tents_reading == PRINTED:
        return -p.b * (1.0 - inner)
    return -p.b * (1.0 - inner) * t


def log_bound_g(t: float, params: BoundParams) -> float:
    """Natural log of ``bound_g``; finite where the bound itself underflows to zero."""
    return math.log(params.a) + _bound_exponent(t, params)


def bound_g(t: float, params: BoundParams) -> float:
    """Closed-form failure bound g(t).

    Generic: a exp(-b t). PowerUCT: a exp(-b (1 - t^-alpha) t). TENTS, as
    printed: a exp(-b (1 - c t exp(-t / (c_hat (log t)^3)))); the
    ``theorem`` reading multiplies that exponent by t to match the generic
    a exp(-b f(t) t) shape.
    """
    return params.a * math.exp(_bound_exponent(t, params))


def bound_curve(params: BoundParams, tmax: float, points: int = 200) -> List[tuple]:
    tmin = 0.0 if params.variant == GENERIC else (1.0 + 1e-6 if params.variant == TENTS_BOUND else 1.0)
    if tmax <= tmin:
        raise DomainError("tmax is below the variant's domain")
    if tmin > 0:
        ts = np.geomspace(tmin, tmax, points)
    else:
        ts = np.concatenate([[0.0], np.geomspace(min(1.0, tmax) / 100.0, tmax, points - 1)])
    return [(float(t), bound_g(float(t), params), log_bound_g(float(t), params)) for t in ts]


# ------------------------------------------------------------------------- CLI


def _cmd_run(args) -> int:
    cfg = SuiteConfig.load(args.suite)
    if args.out:
        cfg.output_dir = args.out
    records = run_suite(cfg)
    print(format_table(aggregate(records)))
    print(f"records written to {cfg.output_dir}")
    return 0


def _cmd_decay(args) -> int:
    budgets = [int(x) for x in args.budgets.split(",")]
    curve = failure_decay_experiment(args.env, args.planner, budgets, args.seeds, args.base_seed)
    w = csv.writer(sys.stdout)
    w.writerow(("budget", "failure_fraction"))
    for n, f in zip(curve.budgets, curve.failures):
        w.writerow((n, f))
    if curve.slope is None:
        print("# no log-linear fit (fewer than two budgets with failures)")
    else:
        print(f"# log-failure slope per simulation: {curve.slope!r}")
    return 0


def _cmd_bounds(args) -> int:
    data = {}
    if args.params:
        with open(args.params) as fh:
            data = json.load(fh)
    data["variant"] = args.variant
    if args.reading:
        data["tents_reading"] = args.reading
    params = BoundParams(**data)
    w = csv.writer(sys.stdout)
    w.writerow(("t", "g", "log_g"))
    for row in bound_curve(params, args.tmax, args.points):
        w.writerow(row)
    return 0


def _cmd_table(args) -> int:
    src = pathlib.Path(args.inp)
    timings = src.parent / TIMING_FILE
    records = load_raw(src, timings)
    if args.out:
        export_table(records, args.format, args.out)
    else:
        write_table(records, args.format, sys.stdout)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description="MCPP benchmark harness")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a suite file")
    run.add_argument("--suite", required=True)
    run.add_argument("--out", help="override the suite's output directory")
    run.set_defaults(func=_cmd_run)

    dec = sub.add_parser("decay", help="failure fraction against simulation budget")
    dec.add_argument("--env", required=True)
    dec.add_argument("--planner", default=UCT)
    dec.add_argument("--budgets", default="100,500,2000,5000")
    dec.add_argument("--seeds", type=int, default=200)
    dec.add_argument("--base-seed", type=int, default=0)
    dec.set_defaults(func=_cmd_decay)

    bnd = sub.add_parser("bounds", help="evaluate a failure bound curve")
    bnd.add_argument("--variant", choices=(GENERIC, POWERUCT_BOUND, TENTS_BOUND), required=True)
    bnd.add_argument("--params", help="JSON file with a, b, c, c_hat, alpha")
    bnd.add_argument("--tmax", type=float, required=True)
    bnd.add_argument("--points", type=int, default=200)
    bnd.add_argument("--reading", choices=(PRINTED, THEOREM_SHAPE))
    bnd.set_defaults(func=_cmd_bounds)

    tab = sub.add_parser("table", help="aggregate a raw record file")
    tab.add_argument("--in", dest="inp", required=True)
    tab.add_argument("--format", choices=("csv", "json", "CSV", "JSON"), default="csv")
    tab.add_argument("--out")
    tab.set_defaults(func=_cmd_table)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
