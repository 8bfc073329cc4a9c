"""Seeded synthetic planning problems used by the benchmark and acceptance runs.

Every case puts one to four obstacles on the straight joint-space path between
a collision-free start and goal, so the cold-start trajectory always collides.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .kinematics import JointState, SerialChain, forward_kinematics, sphere_centers
from .planner import Demonstration, JointGoal, PlanProblem
from .world import Box, SdfGrid, Sphere, analytic_distance, build_sdf

# grid origin, resolution, dims per robot
WORKSPACES = {
    "planar2": ((-2.3, -2.3, -0.4), 0.05, (93, 93, 17)),
    "spatial3": ((-1.0, -1.0, -0.6), 0.025, (81, 81, 73)),
    "ur5": ((-1.2, -1.2, -0.8), 0.03, (81, 81, 71)),
}


def load_robot(name: str) -> SerialChain:
    path = resources.files("spidp") / "data" / "robots" / f"{name}.json"
    with resources.as_file(path) as p:
        return SerialChain.load(p)


@dataclass
class SuiteCase:
    name: str
    robot: str
    chain: SerialChain
    world: SdfGrid
    start: np.ndarray
    goal: np.ndarray
    demo: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def primitives(self):
        return self.world.primitives

    def problem(self, demo: bool = True) -> PlanProblem:
        d = Demonstration(self.demo) if (demo and self.demo is not None) else None
        return PlanProblem(self.chain, self.world, JointState(self.start), JointGoal(self.goal.copy()), demo=d)


def straight_line(start, goal, T: int) -> np.ndarray:
    s = np.linspace(0.0, 1.0, T)[:, None]
    return start + s * (goal - start)


def clearance(chain: SerialChain, primitives, q) -> np.ndarray:
    """Signed sphere clearance ``d - radius`` for each configuration row, minimised over spheres."""
    C, _ = sphere_centers(chain, np.atleast_2d(q), jacobians=False)
    d = analytic_distance(primitives, C.data) - chain.sphere_radii
    return d.min(axis=1)


# per robot: joint step range, links whose spheres obstacles are placed on, obstacle size range
_SETUP = {
    "planar2": dict(step=(1.0, 2.0), links=(1,), size=(0.08, 0.16), planar=True, tip=0.75),
    "spatial3": dict(step=(0.8, 1.6), links=(2,), size=(0.04, 0.08), planar=False, tip=0.25),
    "ur5": dict(step=(0.6, 1.2), links=(2, 3, 4, 5), size=(0.04, 0.07), planar=False, tip=0.15),
}


def _sample_obstacle(rng, centre, size, planar):
    c = centre + rng.normal(0.0, 0.4 * size, 3)
    if planar:
        # beyond the tip sphere, so folding the elbow slips the arm underneath
        c[2] = 0.0
        c[:2] = centre[:2] * (1.0 + rng.uniform(0.3, 0.8) * size / np.linalg.norm(centre[:2]))
    if rng.random() < 0.5:
        return Sphere(c, size)
    he = size * rng.uniform(0.6, 1.0, 3)
    if planar:
        he[2] = 0.3
    return Box(c, he)


def _planar_ok(prim, size):
    # the first link sweeps the unit disc, so obstacles must stay outside it
    return np.linalg.norm(prim.center[:2]) - 1.8 * size > 1.0 + 0.08 + 0.06


def random_case(robot: str, rng: np.random.Generator, T: int = 64, margin: float = 0.05,
                name: str = "") -> SuiteCase:
    chain = load_robot(robot)
    setup = _SETUP[robot]
    origin, res, dims = WORKSPACES[robot]
    origin = np.asarray(origin)
    lo = np.maximum(chain.lower, -2.5)
    hi = np.minimum(chain.upper, 2.5)
    links = np.array([s.link_index for s in chain.spheres])
    offsets = np.array([np.linalg.norm(s.offset) for s in chain.spheres])
    eligible = np.flatnonzero(np.isin(links, setup["links"]) & (offsets >= setup.get("tip", 0.0)))
    upper = np.asarray(origin) + res * (np.array(dims) - 1)
    for _ in range(2000):
        q0 = rng.uniform(lo, hi)
        direction = rng.normal(size=chain.n)
        direction /= np.linalg.norm(direction)
        q1 = q0 + direction * rng.uniform(*setup["step"])
        if np.any(q1 < lo) or np.any(q1 > hi):
            continue
        n_obs = int(rng.integers(1, 5))
        prims = []
        for _k in range(n_obs):
            s = rng.uniform(0.3, 0.7)
            C, _ = sphere_centers(chain, q0 + s * (q1 - q0), jacobians=False)
            centre = C.data[0, rng.choice(eligible)]
            prim = _sample_obstacle(rng, centre, rng.uniform(*setup["size"]), setup["planar"])
            if setup["planar"] and not _planar_ok(prim, setup["size"][1]):
                break
            reach = prim.radius if isinstance(prim, Sphere) else np.max(prim.half_extents)
            if np.any(prim.center - reach < origin + 0.1) or np.any(prim.center + reach > upper - 0.1):
                break
            prims.append(prim)
        if len(prims) != n_obs:
            continue
        if min(clearance(chain, prims, q0)[0], clearance(chain, prims, q1)[0]) < margin:
            continue
        if clearance(chain, prims, straight_line(q0, q1, T)).min() >= 0:
            continue
        world = build_sdf(prims, origin, res, dims)
        return SuiteCase(name or robot, robot, chain, world, q0, q1, meta={"obstacles": n_obs})
    raise RuntimeError(f"could not sample a {robot} case")


def planning_suite(per_robot: int = 20, seed: int = 0, T: int = 64) -> list[SuiteCase]:
    """``per_robot`` cases for each of the planar, spatial and UR5-like arms."""
    cases = []
    for r, robot in enumerate(_SETUP):
        rng = np.random.default_rng([seed, r])
        cases += [random_case(robot, rng, T, name=f"{robot}-{k:02d}") for k in range(per_robot)]
    return cases


def demonstration_suite(n: int = 10, seed: int = 0, T: int = 64) -> list[SuiteCase]:
    """Spatial-arm cases whose Cartesian straight-line demonstration runs through an obstacle."""
    chain = load_robot("spatial3")
    origin, res, dims = WORKSPACES["spatial3"]
    rng = np.random.default_rng([seed, 99])
    cases = []
    while len(cases) < n:
        q0 = rng.uniform([-1.5, -0.6, 0.4], [1.5, 0.6, 1.8])
        q1 = q0 + rng.uniform([0.8, -0.4, -0.4], [1.4, 0.4, 0.4]) * rng.choice([-1, 1], 3)
        if np.any(q1 < chain.lower) or np.any(q1 > chain.upper):
            continue
        fk = forward_kinematics(chain, np.vstack([q0, q1]))
        p0, p1 = fk.ee_position.data
        s = np.linspace(0.0, 1.0, T)[:, None]
        demo = p0 + s * (p1 - p0)
        prim = Sphere(0.5 * (p0 + p1) + rng.normal(0, 0.01, 3), rng.uniform(0.05, 0.08))
        if np.linalg.norm(p1 - p0) < 0.3:
            continue
        if min(clearance(chain, [prim], q0)[0], clearance(chain, [prim], q1)[0]) < 0.05:
            continue
        if np.min(analytic_distance([prim], demo)) >= 0:
            continue
        world = build_sdf([prim], origin, res, dims)
        cases.append(SuiteCase(f"demo-{len(cases):02d}", "spatial3", chain, world, q0, q1, demo=demo))
    return cases
