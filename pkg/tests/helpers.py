"""Shared fixtures and independent oracles for planner and acceptance tests."""

import numpy as np
from scipy.linalg import block_diag

from spidp import so3
from spidp.autodiff import Tensor
from spidp.kinematics import JointState, SerialChain, forward_kinematics
from spidp.planner import (CartesianGoal, Demonstration, FactorBundle, GpPriorParams, JointGoal,
                           JointTrajectory, PlanProblem, collision_factor, demonstration_factor,
                           gp_prior_factor, interpolated_collision_factor, joint_limit_factor,
                           start_goal_factors)
from spidp.kinematics import sphere_centers
from spidp.suite import clearance
from spidp.world import Box, Sphere, build_sdf

from conftest import random_chain


def fd_cost_gradient(make_bundle, x0, step=1e-6):
    """Central differences of a bundle's weighted cost over the flattened trajectory."""
    g = np.zeros(x0.size)
    for i in range(x0.size):
        e = np.zeros(x0.shape)
        e.flat[i] = step
        hi = make_bundle((x0 + e).reshape(x0.shape)).cost_value()
        lo = make_bundle((x0 - e).reshape(x0.shape)).cost_value()
        g[i] = (hi - lo) / (2 * step)
    return g


def normal_gradient(bundle: FactorBundle) -> np.ndarray:
    """H^T Sigma^-1 h from the bundle's dense form."""
    h, H, W = bundle.dense()
    return H.T @ W @ h


def random_traj(rng, T, n, scale=1.0, dt=0.1):
    return JointTrajectory(Tensor(rng.normal(size=(T, 2 * n)) * scale), dt)


def _world_for(chain, rng, T, n):
    """A world whose obstacles overlap some sphere centres of random states."""
    q = rng.uniform(-1.5, 1.5, (T, n))
    fk = forward_kinematics(chain, q)
    C, _ = sphere_centers(chain, q, fk, jacobians=False)
    pts = C.data.reshape(-1, 3)
    picks = pts[rng.choice(len(pts), 3, replace=False)]
    prims = [Sphere(picks[0] + rng.normal(0, 0.03, 3), 0.12), Sphere(picks[1] + rng.normal(0, 0.03, 3), 0.1),
             Box(picks[2] + rng.normal(0, 0.03, 3), [0.1, 0.08, 0.12])]
    # random sub-voxel shift keeps sphere centres off the lattice planes, where the interpolant kinks
    lo = pts.min(axis=0) - 0.4 - rng.uniform(0.1, 0.9, 3) * 0.04
    world = build_sdf(prims, lo, 0.04, np.ceil((pts.max(axis=0) + 0.4 - lo) / 0.04).astype(int) + 1)
    return q, world


FACTOR_KINDS = ("gp", "start", "goal_joint", "goal_cartesian", "collision", "collision_inter", "limits", "demo",
                "demo_rot")


def factor_instance(kind: str, seed: int):
    """(make_bundle(states) -> FactorBundle, x0 states) for one randomized instance."""
    rng = np.random.default_rng(seed)
    T = int(rng.integers(3, 6))
    n = int(rng.integers(1, 5))
    chain = random_chain(rng, n)
    x0 = rng.normal(size=(T, 2 * n))
    dt = float(rng.uniform(0.05, 0.3))
    world = build_sdf([], -np.ones(3), 0.5, (5, 5, 5))
    if kind == "gp":
        A = rng.normal(size=(n, n))
        params = GpPriorParams(A @ A.T + n * np.eye(n), rng.normal(size=(T, 2 * n)))
        w = float(rng.uniform(0.5, 2))
        return (lambda X: gp_prior_factor(JointTrajectory(Tensor(X), dt), params, w)), x0
    if kind in ("start", "goal_joint"):
        problem = PlanProblem(chain, world, JointState(rng.normal(size=n), rng.normal(size=n)),
                              JointGoal(rng.normal(size=n), rng.normal(size=n)))
        k = 0 if kind == "start" else 1
        return (lambda X: start_goal_factors(JointTrajectory(Tensor(X), dt), problem, 3.0, 5.0)[k]), x0
    if kind == "goal_cartesian":
        q = rng.uniform(-2, 2, n)
        fk = forward_kinematics(chain, q)
        rot = fk.ee_rotation.data[0] @ so3.exp_np(rng.normal(size=3) * 0.5)
        problem = PlanProblem(chain, world, JointState(np.zeros(n)),
                              CartesianGoal(fk.ee_position.data[0] + rng.normal(0, 0.1, 3), rot))
        x0[-1, :n] = q + rng.normal(0, 0.2, n)
        return (lambda X: start_goal_factors(JointTrajectory(Tensor(X), dt), problem, 1.0, 2.0)[1]), x0
    if kind == "collision":
        q, world = _world_for(chain, rng, T, n)
        x0[:, :n] = q
        eps = float(rng.uniform(0.02, 0.1))
        return (lambda X: collision_factor(JointTrajectory(Tensor(X), dt), chain, world, eps, 7.0)), x0
    if kind == "collision_inter":
        q, world = _world_for(chain, rng, T, n)
        x0[:, :n] = q
        eps = float(rng.uniform(0.02, 0.1))
        k = int(rng.integers(1, 4))
        return (lambda X: interpolated_collision_factor(JointTrajectory(Tensor(X), dt), chain, world, eps, 7.0, k)), x0
    if kind == "limits":
        doc_limits = rng.uniform(0.3, 1.0, n)
        chain = SerialChain(tuple(j.__class__(j.axis, j.origin, -doc_limits[i], doc_limits[i])
                                  for i, j in enumerate(chain.joints)), chain.spheres, chain.tool)
        x0[:, :n] = rng.uniform(-1.5, 1.5, (T, n))
        return (lambda X: joint_limit_factor(JointTrajectory(Tensor(X), dt), chain, 4.0)), x0
    if kind in ("demo", "demo_rot"):
        q = rng.uniform(-2, 2, (T, n))
        fk = forward_kinematics(chain, q + rng.normal(0, 0.3, (T, n)))
        rots = np.array([R @ so3.exp_np(rng.normal(size=3) * 0.4) for R in fk.ee_rotation.data])
        demo = Demonstration(fk.ee_position.data + rng.normal(0, 0.05, (T, 3)), rots)
        x0[:, :n] = q
        rw = 0.7 if kind == "demo_rot" else 0.0
        return (lambda X: demonstration_factor(JointTrajectory(Tensor(X), dt), chain, demo, 2.0, rw)), x0
    raise ValueError(kind)


def factor_gradient_error(kind: str, seed: int) -> tuple[bool, float]:
    make, x0 = factor_instance(kind, seed)
    b = make(x0)
    analytic = normal_gradient(b)
    numeric = fd_cost_gradient(make, x0)
    scale = max(np.max(np.abs(numeric)), 1e-12)
    err = float(np.max(np.abs(analytic - numeric)) / scale)
    ok = np.allclose(analytic, numeric, rtol=1e-4, atol=1e-4 * scale)
    return bool(ok), err


# 1-DoF solver fixtures with hand-built H, Sigma^-1, h

def one_dof_fixture(seed: int):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 6))
    D = 2 * T
    traj = JointTrajectory(Tensor(rng.normal(size=(T, 2))), 0.1)
    bundles = []
    # pairwise blocks between consecutive states plus single-state blocks
    for name, width, starts in (("pair", 4, np.arange(T - 1) * 2), ("unary", 2, np.arange(T) * 2)):
        B = len(starts)
        k = int(rng.integers(1, 4)) if name == "pair" else int(rng.integers(2, 4))
        J = rng.normal(size=(B, k, width))
        h = rng.normal(size=(B, k))
        L = rng.normal(size=(B, k, k))
        W = np.einsum("bij,bkj->bik", L, L) + np.eye(k)
        bundles.append(FactorBundle(name, Tensor(h), Tensor(J), W, starts, D))
    return traj, bundles


def dense_step(traj, bundles, r):
    """Oracle: assemble the full normal equations and solve them densely."""
    hs, Hs, Ws = zip(*(b.dense() for b in bundles))
    h = np.concatenate(hs)
    H = np.vstack(Hs)
    W = block_diag(*Ws)
    A = H.T @ W @ H
    g = H.T @ W @ h
    delta = np.linalg.solve(A, -g)
    return traj.states.data.reshape(-1) + r * delta, delta


# independent collision check

def oracle_collision_free(chain, primitives, q_traj, samples=1000) -> bool:
    """Analytic sphere clearance on ``samples`` states interpolated along the trajectory."""
    q = np.asarray(q_traj)
    s = np.linspace(0, len(q) - 1, samples)
    i = np.minimum(np.floor(s).astype(int), len(q) - 2)
    f = (s - i)[:, None]
    dense = q[i] * (1 - f) + q[i + 1] * f
    return bool(np.min(clearance(chain, primitives, dense)) >= 0.0)


# stop-rule fixtures

def stop_fixture(reason: str):
    """(problem, config) built so that ``plan`` stops for ``reason``."""
    from spidp.planner import PlannerConfig
    from spidp.suite import load_robot, random_case
    from spidp.world import SdfGrid
    if reason == "max_iters":
        case = random_case("planar2", np.random.default_rng(3))
        return case.problem(), PlannerConfig(j_max=3)
    chain = load_robot("planar2")
    start, goal = JointState(np.array([0.3, 0.4])), JointGoal(np.array([1.4, -0.6]))
    if reason == "collision_stall":
        # the arm sits inside a constant-valued obstacle field: the overlap never changes and the
        # field has no gradient, while a small step keeps the smoothness cost falling >5% per window
        world = SdfGrid(np.full(3, -3.0), 0.5, np.full((13, 13, 13), -1.0))
        return PlanProblem(chain, world, start, goal), PlannerConfig(r0=0.01, w_coll=1e-12)
    if reason == "no_improvement":
        # collision free from the start; step_tol 0 disables the converged rule so the cost flattens out
        world = build_sdf([], np.full(3, -3.0), 0.5, (13, 13, 13))
        return PlanProblem(chain, world, start, goal), PlannerConfig(step_tol=0.0)
    raise ValueError(reason)
