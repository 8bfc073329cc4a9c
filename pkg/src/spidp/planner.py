"""Differentiable factor-graph motion planner for revolute serial arms.

The decision variable is a joint trajectory of ``T`` support states, each
holding joint positions and velocities.  Every iteration linearises six kinds
of factors (GP smoothness prior, start, goal, collision, joint limits and an
optional Cartesian demonstration prior), solves the Gauss-Newton normal
equations and takes a damped step.  All of it is recorded on the autodiff tape
so a scalar function of the final trajectory can be differentiated with
respect to whatever tensors went into the problem (goal, start, demo).

Factors are stored block-wise: block ``b`` owns a residual ``h[b]`` of length
``k``, a Jacobian ``J[b]`` over the ``w`` contiguous columns starting at
``cols[b]`` and an inverse covariance ``W[b]`` (diagonal ``(k,)`` or full
``(k, k)``).  Because every block touches at most two neighbouring states the
normal matrix is banded, which keeps the solve cheap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np
import scipy.linalg

from . import autodiff as ad
from . import so3
from .autodiff import Tensor
from .kinematics import JointState, SerialChain, damped_ik, ee_jacobian, forward_kinematics, sphere_centers
from .world import SdfGrid, interp_gradient, query

log = logging.getLogger(__name__)

COLLISION_FREE_TOL = 1e-9


class PlanningError(RuntimeError):
    """The planner could not produce a finite trajectory."""


@dataclass
class PlannerConfig:
    T: int = 64
    dt: float = 0.05
    r0: float = 0.3
    decay: float = 0.1
    decay_mode: str = "multiplicative"  # r *= decay; "fractional": r *= 1 - decay
    j_max: int = 200
    stall_window: int = 25
    rel_improvement: float = 0.05
    collision_eps: float = 0.2
    collision_substeps: int = 4  # minimum extra hinge checks between consecutive support states
    max_substeps: int = 32  # adaptive ceiling, see substeps_needed
    step_tol: float = 1e-4
    fixed_iterations: bool = False
    qc: float = 1.0
    w_gp: float = 1.0
    w_start: float = 1e6
    w_goal: float = 1e6
    w_coll: float = 1e5
    w_lim: float = 1e4
    w_demo: float = 1e3
    w_demo_rot: float = 0.0
    jitter: float = 1e-9
    jitter_max: float = 1e-3

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.r0 <= 1:
            raise ValueError("r0 must lie in (0, 1]")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.decay_mode not in ("fractional", "multiplicative"):
            raise ValueError(f"unknown decay_mode '{self.decay_mode}'")
        if self.collision_substeps < 0 or self.max_substeps < self.collision_substeps:
            raise ValueError("need 0 <= collision_substeps <= max_substeps")
        if self.stall_window < 1 or self.j_max < 1:
            raise ValueError("stall_window and j_max must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "PlannerConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown planner fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class JointTrajectory:
    states: Tensor  # (T, 2N): positions | velocities
    dt: float

    def __post_init__(self):
        self.states = ad.as_tensor(self.states)
        if self.states.ndim != 2 or self.states.shape[0] < 2 or self.states.shape[1] % 2:
            raise ValueError(f"trajectory states must be (T >= 2, 2N), got {self.states.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1] // 2

    @property
    def positions(self) -> Tensor:
        return self.states[:, : self.n]

    @property
    def velocities(self) -> Tensor:
        return self.states[:, self.n:]

    def detach(self) -> "JointTrajectory":
        return JointTrajectory(Tensor(self.states.data.copy()), self.dt)

    def times(self) -> np.ndarray:
        return np.arange(self.T) * self.dt


@dataclass
class GpPriorParams:
    Qc: np.ndarray
    mu: np.ndarray | None = None  # (T, 2N); None means a zero-drift mean

    def __post_init__(self):
        self.Qc = np.atleast_2d(np.asarray(self.Qc, float))
        if not np.allclose(self.Qc, self.Qc.T):
            raise ValueError("Qc must be symmetric")
        if np.any(np.linalg.eigvalsh(self.Qc) <= 0):
            raise ValueError("Qc must be positive definite")


@dataclass
class JointGoal:
    positions: object
    velocities: object = None


@dataclass
class CartesianGoal:
    position: object
    rotation: object = None  # 3x3; None constrains position only


@dataclass
class Demonstration:
    positions: object  # (T, 3)
    rotations: object = None  # (T, 3, 3)


@dataclass
class PlanProblem:
    chain: SerialChain
    world: SdfGrid
    start: object  # JointState or a (2N,) tensor
    goal: object  # JointGoal or CartesianGoal
    demo: Demonstration | None = None
    init: JointTrajectory | None = None
    gp: GpPriorParams | None = None

    def start_vector(self) -> Tensor:
        if isinstance(self.start, JointState):
            return Tensor(self.start.vector())
        s = ad.as_tensor(self.start)
        if s.shape != (2 * self.chain.n,):
            raise ValueError(f"start must have {2 * self.chain.n} entries")
        return s


@dataclass
class FactorBundle:
    name: str
    h: Tensor
    J: Tensor
    W: np.ndarray
    cols: np.ndarray
    dim: int

    def __post_init__(self):
        B, k = self.h.shape
        if self.J.shape[:2] != (B, k):
            raise ValueError(f"{self.name}: Jacobian rows {self.J.shape[:2]} do not match residual {(B, k)}")
        if self.W.shape not in ((B, k), (B, k, k)):
            raise ValueError(f"{self.name}: inverse covariance shape {self.W.shape} does not match {(B, k)}")
        if self.cols.shape != (B,):
            raise ValueError(f"{self.name}: need one column offset per block")

    @property
    def width(self) -> int:
        return self.J.shape[2]

    @property
    def rows(self) -> int:
        return self.h.shape[0] * self.h.shape[1]

    def _Wh(self):
        if self.W.ndim == 2:
            return self.h * self.W
        return ad.einsum("bkl,bl->bk", self.W, self.h)

    def cost(self) -> Tensor:
        """Weighted squared error ``0.5 * h^T W h``."""
        return 0.5 * ad.sum_(self.h * self._Wh())

    def cost_value(self) -> float:
        h = self.h.data
        Wh = h * self.W if self.W.ndim == 2 else np.einsum("bkl,bl->bk", self.W, h)
        return 0.5 * float(np.sum(h * Wh))

    def _indices(self):
        rows = self.cols[:, None] + np.arange(self.width)[None, :]
        return rows, rows[:, :, None] * self.dim + rows[:, None, :]

    def normal_terms(self) -> tuple[Tensor, Tensor]:
        """This bundle's ``H^T W H`` (D x D) and ``H^T W h`` (D,) contributions."""
        rows, idx = self._indices()
        if self.W.ndim == 2:
            JtWJ = ad.einsum("bki,bk,bkj->bij", self.J, self.W, self.J)
        else:
            JtWJ = ad.einsum("bki,bkl,blj->bij", self.J, self.W, self.J)
        JtWh = ad.einsum("bki,bk->bi", self.J, self._Wh())
        D = self.dim
        A = ad.scatter_add(JtWJ, idx, D * D).reshape(D, D)
        g = ad.scatter_add(JtWh, rows, D)
        return A, g

    def dense(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked ``h``, full Jacobian ``H`` (rows x D) and block-diagonal inverse covariance."""
        B, k = self.h.shape
        H = np.zeros((B * k, self.dim))
        for b in range(B):
            H[b * k:(b + 1) * k, self.cols[b]:self.cols[b] + self.width] = self.J.data[b]
        blocks = [np.diag(self.W[b]) if self.W.ndim == 2 else self.W[b] for b in range(B)]
        return self.h.data.reshape(-1), H, scipy.linalg.block_diag(*blocks)


@dataclass
class PlanResult:
    trajectory: JointTrajectory
    iterations: int
    history: list
    initial_errors: dict
    converged_collision_free: bool
    stop_reason: str

    @property
    def final_errors(self) -> dict:
        return self.history[-1] if self.history else self.initial_errors


# ---------------------------------------------------------------------------
# initialisation


def _cartesian_seed(problem: PlanProblem, q0: np.ndarray) -> Tensor:
    goal = problem.goal
    chain = problem.chain
    pos = ad.as_tensor(goal.position)
    rot = None if goal.rotation is None else ad.as_tensor(goal.rotation)
    q, res = damped_ik(chain, pos.data, q0, None if rot is None else rot.data)
    if res > 1e-3:
        raise PlanningError(f"IK seed for the Cartesian goal failed: residual {res:.3e} m/rad")
    if not (ad._needs(pos) or (rot is not None and ad._needs(rot))):
        return Tensor(q)
    # zero-valued correction that carries d q / d goal through the IK solution
    fk = forward_kinematics(chain, q)
    Jv, Jw = ee_jacobian(chain, q, fk)
    err = pos - fk.ee_position.data[0]
    J = Jv.data[0]
    if rot is not None:
        R = fk.ee_rotation.data[0]
        err = ad.concat([err, ad.matmul(Tensor(R), so3.log(ad.matmul(Tensor(R.T), rot)))])
        J = np.vstack([J, Jw.data[0]])
    return Tensor(q) + ad.matmul(Tensor(np.linalg.pinv(J)), err)


def goal_positions(problem: PlanProblem, q0: np.ndarray) -> Tensor:
    if isinstance(problem.goal, JointGoal):
        return ad.as_tensor(problem.goal.positions)
    return _cartesian_seed(problem, q0)


def init_trajectory(problem: PlanProblem, T: int, dt: float) -> JointTrajectory:
    """Straight line in joint space from start to goal, or the warm start if given."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if problem.init is not None:
        return problem.init
    n = problem.chain.n
    start = problem.start_vector()[:n]
    goal = goal_positions(problem, start.data)
    s = np.linspace(0.0, 1.0, T)
    delta = goal - start
    pos = ad.einsum("t,n->tn", np.ones(T), start) + ad.einsum("t,n->tn", s, delta)
    vel = ad.einsum("t,n->tn", np.ones(T), delta * (1.0 / ((T - 1) * dt)))
    return JointTrajectory(ad.concat([pos, vel], axis=1), dt)


# ---------------------------------------------------------------------------
# factors


def gp_matrices(n: int, dt: float, Qc: np.ndarray):
    """Constant-velocity transition and inverse process-noise covariance."""
    Phi = np.block([[np.eye(n), dt * np.eye(n)], [np.zeros((n, n)), np.eye(n)]])
    Minv = np.array([[12.0 / dt ** 3, -6.0 / dt ** 2], [-6.0 / dt ** 2, 4.0 / dt]])
    Qinv = np.kron(Minv, np.linalg.inv(Qc))
    return Phi, Qinv


def gp_prior_factor(traj: JointTrajectory, params: GpPriorParams, weight: float = 1.0) -> FactorBundle:
    T, n = traj.T, traj.n
    if params.Qc.shape != (n, n):
        raise ValueError(f"Qc must be {n}x{n}")
    Phi, Qinv = gp_matrices(n, traj.dt, params.Qc)
    X = traj.states
    h = ad.einsum("ij,tj->ti", Phi, X[:-1]) - X[1:]
    if params.mu is not None:
        mu = np.asarray(params.mu, float)
        if mu.shape != X.shape:
            raise ValueError(f"GP mean shape {mu.shape} does not match trajectory {X.shape}")
        h = h - Tensor(mu[:-1] @ Phi.T - mu[1:])
    J = np.broadcast_to(np.hstack([Phi, -np.eye(2 * n)]), (T - 1, 2 * n, 4 * n))
    W = np.broadcast_to(weight * Qinv, (T - 1, 2 * n, 2 * n))
    return FactorBundle("gp", h, Tensor(J), np.ascontiguousarray(W), np.arange(T - 1) * 2 * n, T * 2 * n)


def _pose_residual(chain, q_last, goal: CartesianGoal):
    """Position (and rotation-vector) error at the last state with its exact Jacobian."""
    fk = forward_kinematics(chain, q_last)
    Jv, Jw = ee_jacobian(chain, q_last, fk)
    h = fk.ee_position[0] - ad.as_tensor(goal.position)
    J = Jv[0]
    if goal.rotation is None:
        return h, J
    R = fk.ee_rotation[0]
    e = so3.log(ad.matmul(ad.transpose(ad.as_tensor(goal.rotation)), R))
    Jrot = ad.matmul(so3.right_jacobian_inverse(e), ad.matmul(ad.transpose(R), Jw[0]))
    return ad.concat([h, e]), ad.concat([J, Jrot], axis=0)


def start_goal_factors(traj: JointTrajectory, problem: PlanProblem, w_start: float = 1e6,
                       w_goal: float = 1e6) -> list[FactorBundle]:
    T, n = traj.T, traj.n
    D = T * 2 * n
    X = traj.states
    s = problem.start_vector()
    start = FactorBundle("start", (X[0] - s).reshape(1, 2 * n), Tensor(np.eye(2 * n)[None]),
                         np.full((1, 2 * n), w_start), np.array([0]), D)
    goal = problem.goal
    last = (T - 1) * 2 * n
    if isinstance(goal, JointGoal):
        gp = ad.as_tensor(goal.positions)
        gv = ad.as_tensor(np.zeros(n) if goal.velocities is None else goal.velocities)
        h = (X[T - 1] - ad.concat([gp, gv])).reshape(1, 2 * n)
        gb = FactorBundle("goal", h, Tensor(np.eye(2 * n)[None]), np.full((1, 2 * n), w_goal),
                          np.array([last]), D)
    else:
        h, J = _pose_residual(problem.chain, X[T - 1, :n], goal)
        k = h.shape[0]
        gb = FactorBundle("goal", h.reshape(1, k), J.reshape(1, k, n), np.full((1, k), w_goal),
                          np.array([last]), D)
    return [start, gb]


def collision_factor(traj: JointTrajectory, chain: SerialChain, world: SdfGrid, eps: float,
                     weight: float = 1e4) -> FactorBundle:
    """Hinge ``max(0, eps + radius - sdf(centre))`` for every sphere and state."""
    if not chain.spheres:
        raise ValueError("the chain has no collision spheres")
    T, n = traj.T, traj.n
    q = traj.positions
    C, Jc = sphere_centers(chain, q)
    S = C.shape[1]
    d = query(world, C)
    g = interp_gradient(world, C)
    margin = np.broadcast_to(eps + chain.sphere_radii, (T, S))
    h = ad.relu(Tensor(np.ascontiguousarray(margin)) - d)
    active = (h.data > 0).astype(float)
    J = -ad.einsum("tsk,tskn,ts->tsn", g, Jc, active)
    return FactorBundle("collision", h, J, np.full((T, S), weight), np.arange(T) * 2 * n, T * 2 * n)


def substeps_needed(traj: JointTrajectory, chain: SerialChain, minimum: int, ceiling: int) -> int:
    """Checks per segment so sphere centres move at most one (smallest) radius between checks."""
    if not chain.spheres or ceiling == 0:
        return minimum
    C, _ = sphere_centers(chain, traj.positions.data, jacobians=False)
    hop = float(np.max(np.linalg.norm(np.diff(C.data, axis=0), axis=-1)))
    need = int(np.ceil(hop / float(np.min(chain.sphere_radii)))) - 1
    return int(min(max(minimum, need), ceiling))


def interpolated_collision_factor(traj: JointTrajectory, chain: SerialChain, world: SdfGrid, eps: float,
                                  weight: float = 1e4, substeps: int = 4) -> FactorBundle:
    """Collision hinge at ``substeps`` configurations linearly interpolated between each state pair.

    Support states alone let a fast link hop over a thin obstacle; these
    checks cover the segment in between.  Block ``i`` spans states ``i`` and
    ``i + 1``.
    """
    if not chain.spheres:
        raise ValueError("the chain has no collision spheres")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    T, n = traj.T, traj.n
    q = traj.positions
    f = np.arange(1, substeps + 1) / (substeps + 1.0)
    qa = ad.einsum("k,tn->tkn", 1.0 - f, q[:-1])
    qb = ad.einsum("k,tn->tkn", f, q[1:])
    Q = (qa + qb).reshape((T - 1) * substeps, n)
    C, Jc = sphere_centers(chain, Q)
    S = C.shape[1]
    d = query(world, C)
    g = interp_gradient(world, C)
    margin = np.broadcast_to(eps + chain.sphere_radii, d.shape)
    h = ad.relu(Tensor(np.ascontiguousarray(margin)) - d)
    active = (h.data > 0).astype(float)
    Jq = -ad.einsum("msk,mskn,ms->msn", g, Jc, active).reshape(T - 1, substeps, S, n)
    # d q_interp / d state pair: (1 - f) I on the first position block, f I on the second
    sel = np.zeros((substeps, n, 4 * n))
    eye = np.eye(n)
    sel[:, :, :n] = (1.0 - f)[:, None, None] * eye
    sel[:, :, 2 * n:3 * n] = f[:, None, None] * eye
    J = ad.einsum("tksn,knw->tksw", Jq, sel).reshape(T - 1, substeps * S, 4 * n)
    return FactorBundle("collision_inter", h.reshape(T - 1, substeps * S), J,
                        np.full((T - 1, substeps * S), weight), np.arange(T - 1) * 2 * n, T * 2 * n)


def joint_limit_factor(traj: JointTrajectory, chain: SerialChain, weight: float = 1e4) -> FactorBundle:
    """Overshoot above the upper limit or undershoot below the lower limit, per joint."""
    T, n = traj.T, traj.n
    q = traj.positions
    upper = Tensor(np.broadcast_to(chain.upper, (T, n)).copy())
    lower = Tensor(np.broadcast_to(chain.lower, (T, n)).copy())
    above = ad.relu(q - upper)
    below = ad.relu(lower - q)
    sign = (above.data > 0).astype(float) - (below.data > 0).astype(float)
    J = np.einsum("tn,nm->tnm", sign, np.eye(n))
    return FactorBundle("limits", above + below, Tensor(J), np.full((T, n), weight),
                        np.arange(T) * 2 * n, T * 2 * n)


def demonstration_factor(traj: JointTrajectory, chain: SerialChain, demo: Demonstration,
                         weight: float = 1e2, rot_weight: float = 0.0) -> FactorBundle:
    """Pointwise tool-position difference to a Cartesian reference."""
    T, n = traj.T, traj.n
    ref = ad.as_tensor(demo.positions)
    if ref.shape != (T, 3):
        raise ValueError(f"demonstration has {ref.shape[0]} points, trajectory has {T}")
    q = traj.positions
    fk = forward_kinematics(chain, q)
    Jv, Jw = ee_jacobian(chain, q, fk)
    h = fk.ee_position - ref
    J = Jv
    W = np.full((T, 3), weight)
    if rot_weight > 0 and demo.rotations is not None:
        Rd = ad.as_tensor(demo.rotations)
        e = so3.log(ad.einsum("tji,tjk->tik", Rd, fk.ee_rotation))
        Jrot = ad.einsum("tij,tkj,tkn->tin", so3.right_jacobian_inverse(e), fk.ee_rotation, Jw)
        h = ad.concat([h, e], axis=1)
        J = ad.concat([J, Jrot], axis=1)
        W = np.hstack([W, np.full((T, 3), rot_weight)])
    return FactorBundle("demo", h, J, W, np.arange(T) * 2 * n, T * 2 * n)


def build_factors(traj: JointTrajectory, problem: PlanProblem, config: PlannerConfig) -> list[FactorBundle]:
    n = problem.chain.n
    gp = problem.gp or GpPriorParams(config.qc * np.eye(n))
    bundles = [gp_prior_factor(traj, gp, config.w_gp)]
    bundles += start_goal_factors(traj, problem, config.w_start, config.w_goal)
    if problem.chain.spheres:
        bundles.append(collision_factor(traj, problem.chain, problem.world, config.collision_eps, config.w_coll))
        k = substeps_needed(traj, problem.chain, config.collision_substeps, config.max_substeps)
        if k:
            bundles.append(interpolated_collision_factor(traj, problem.chain, problem.world, config.collision_eps,
                                                         config.w_coll, k))
    bundles.append(joint_limit_factor(traj, problem.chain, config.w_lim))
    if problem.demo is not None:
        bundles.append(demonstration_factor(traj, problem.chain, problem.demo, config.w_demo, config.w_demo_rot))
    return bundles


def factor_errors(bundles: list[FactorBundle], eps: float = 0.0) -> dict:
    """Weighted cost per factor plus two collision measures.

    ``h_coll`` is the summed hinge error including the safety margin.
    ``penetration`` drops the margin, i.e. it is positive only when a sphere
    actually overlaps an obstacle; it drives the step schedule, the stall rule
    and the collision-free flag, since a penalty equilibrium always sits
    slightly inside the margin.
    """
    out = {f"cost_{b.name}": b.cost_value() for b in bundles}
    out["cost_total"] = float(sum(out.values()))
    coll = [b.h.data.reshape(-1) for b in bundles if b.name.startswith("collision")]
    h = np.concatenate(coll) if coll else np.zeros(1)
    out["h_coll"] = float(h.sum())
    out["penetration"] = float(np.maximum(h - eps, 0.0).sum())
    return out


# ---------------------------------------------------------------------------
# solver


def solve_iteration(traj: JointTrajectory, bundles: list[FactorBundle], r: float,
                    gp: GpPriorParams | None = None, jitter: float = 0.0,
                    jitter_max: float = 1e-3, gp_weight: float = 1.0) -> tuple[JointTrajectory, Tensor]:
    """One damped Gauss-Newton step on the stacked factors.

    Solves ``(sum H^T W H + lambda I) delta = -sum H^T W h`` and returns the
    updated trajectory together with ``delta``.  Passing ``gp`` adds the GP
    prior bundle here instead of expecting it in ``bundles``.  If the
    Cholesky factorisation fails the diagonal shift grows tenfold per retry,
    starting at ``max(jitter, 1e-12)``.
    """
    if not bundles and gp is None:
        raise ValueError("solve_iteration needs at least one factor")
    if not 0 < r <= 1:
        raise ValueError("r must lie in (0, 1]")
    bundles = list(bundles)
    if gp is not None:
        bundles.append(gp_prior_factor(traj, gp, gp_weight))
    D = traj.states.size
    A, g = None, None
    for b in bundles:
        Ab, gb = b.normal_terms()
        A = Ab if A is None else A + Ab
        g = gb if g is None else g + gb
    bw = max(b.width for b in bundles) - 1
    lam = jitter
    while True:
        try:
            delta = ad.solve(A + Tensor(lam * np.eye(D)), -g, bandwidth=bw)
            break
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            lam = max(lam * 10.0, 1e-12)
            if lam > jitter_max:
                diag = np.diag(A.data)
                raise PlanningError(
                    f"normal equations not positive definite after jitter {jitter_max:g}; "
                    f"diagonal range [{diag.min():.3e}, {diag.max():.3e}]") from None
    if not np.all(np.isfinite(delta.data)):
        raise PlanningError("non-finite Gauss-Newton step")
    new = traj.states + r * delta.reshape(traj.T, 2 * traj.n)
    return JointTrajectory(new, traj.dt), delta


def clamp_to_limits(traj: JointTrajectory, chain: SerialChain) -> JointTrajectory:
    """Project joint positions onto the limit box; velocities are left alone."""
    n = traj.n
    pos = ad.clip(traj.states[:, :n], chain.lower, chain.upper)
    return JointTrajectory(ad.concat([pos, traj.states[:, n:]], axis=1), traj.dt)


def plan(problem: PlanProblem, config: PlannerConfig | None = None) -> PlanResult:
    """Iterate damped Gauss-Newton steps until a stopping rule fires.

    The step size stays at ``r0`` while any sphere overlaps an obstacle and
    decays every iteration after the first overlap-free iterate (the initial
    guess is not an iterate).  After each step the joint positions are
    projected onto the limit box, so the limit factor only steers.  Stop
    reasons: ``converged`` (overlap free and the applied step is below
    ``step_tol``), ``collision_stall`` (overlap positive and not strictly
    decreased for ``stall_window`` iterations), ``no_improvement`` (weighted
    cost dropped by less than ``rel_improvement`` over ``stall_window``
    iterations) and ``max_iters``.
    """
    config = config or PlannerConfig()
    traj = init_trajectory(problem, config.T, config.dt)
    if traj.T != config.T and problem.init is None:
        raise ValueError("trajectory length mismatch")
    bundles = build_factors(traj, problem, config)
    errors = factor_errors(bundles, config.collision_eps)
    initial = dict(errors)
    history: list[dict] = []
    costs = [errors["cost_total"]]
    r = config.r0
    # decay starts after the first overlap-free iterate; the initial guess does not count, so a
    # collision-free warm start still gets one full step towards the moved goal
    clear_seen = False
    best_coll = errors["penetration"]
    last_coll_drop = 0
    reason = "max_iters"
    for j in range(1, config.j_max + 1):
        if clear_seen:
            r = r * (1.0 - config.decay) if config.decay_mode == "fractional" else r * config.decay
        prev = traj.states.data
        traj, _ = solve_iteration(traj, bundles, r, jitter=config.jitter, jitter_max=config.jitter_max)
        if not np.all(np.isfinite(traj.states.data)):
            raise PlanningError(f"non-finite trajectory at iteration {j}")
        traj = clamp_to_limits(traj, problem.chain)
        step = float(np.max(np.abs(traj.states.data - prev)))
        bundles = build_factors(traj, problem, config)
        errors = factor_errors(bundles, config.collision_eps)
        errors.update(iteration=j, r=r, step=step)
        history.append(errors)
        costs.append(errors["cost_total"])
        h_coll = errors["penetration"]
        if h_coll < best_coll:
            best_coll = h_coll
            last_coll_drop = j
        clear_seen = clear_seen or h_coll <= COLLISION_FREE_TOL
        if config.fixed_iterations:
            continue
        if h_coll <= COLLISION_FREE_TOL and step < config.step_tol:
            reason = "converged"
            break
        if h_coll > COLLISION_FREE_TOL and j - last_coll_drop >= config.stall_window:
            reason = "collision_stall"
            break
        w = config.stall_window
        if j >= w and costs[j - w] - costs[j] < config.rel_improvement * costs[j - w]:
            reason = "no_improvement"
            break
    final = history[-1] if history else initial
    return PlanResult(traj, len(history), history, initial,
                      final["penetration"] <= COLLISION_FREE_TOL, reason)


def with_warm_start(problem: PlanProblem, traj: JointTrajectory | None) -> PlanProblem:
    return replace(problem, init=None if traj is None else traj.detach())
