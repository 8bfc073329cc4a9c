"""Differentiable skill programs: forward pass, task objectives and the outer optimizer.

A program is an ordered list of parameterised skills.  ``forward`` turns the
parameter vector into a shadow trajectory (end-effector poses, joint states,
wrench, end-of-sequence and success channels) on the autodiff tape, so the
objectives can be differentiated with respect to every optimizable parameter,
including through the inner trajectory planner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import _kernels
from . import autodiff as ad
from . import so3
from .autodiff import Tensor
from .kinematics import JointState, SerialChain, damped_ik, ee_jacobian, forward_kinematics
from .planner import (CartesianGoal, JointTrajectory, PlannerConfig, PlanProblem, PlanResult,
                      PlanningError, plan)
from .world import SdfGrid

SKILL_PARAMS = {
    "PlanMove": (("x", "y", "z", "velocity"), ("rx", "ry", "rz")),
    "LinearMove": (("x", "y", "z", "velocity"), ()),
    "SpiralSearch": (("radius_in", "radius_out", "velocity", "force"), ()),
    "ForcePlace": (("depth", "velocity", "force"), ()),
}

DEFAULT_SETTINGS = {
    "dt": 0.05,  # shadow sampling period (s)
    "hole": None,  # nominal hole xy for spiral search; None means the spiral centre
    "sigma": 0.002,  # std of the hole offset (m)
    "capture_radius": 0.001,  # search tool catches a hole within this distance (m)
    "compliance": 1e-4,  # m/N of extra travel per newton of placing force
    "motion_success": 0.999,
    "seam_tol": 1e-6,
}

PROB_EPS = 1e-9
SUCC_EPS = 1e-6
# quadrature for the spiral success model
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(48)
_N_ANGLES = 96


class ProgramError(ValueError):
    pass


class OptimizationError(RuntimeError):
    pass


@dataclass
class Param:
    value: float
    optimize: bool = False
    bounds: tuple = (-math.inf, math.inf)

    def __post_init__(self):
        self.value = float(self.value)
        lo, hi = (float(b) for b in self.bounds)
        if lo > hi:
            raise ProgramError(f"empty bounds [{lo}, {hi}]")
        self.bounds = (lo, hi)

    def to_dict(self) -> dict:
        d = {"value": self.value, "optimize": self.optimize}
        if np.isfinite(self.bounds).any():
            d["bounds"] = [b if np.isfinite(b) else None for b in self.bounds]
        return d

    @classmethod
    def from_spec(cls, spec) -> "Param":
        if isinstance(spec, (int, float)):
            return cls(float(spec))
        b = spec.get("bounds") or [None, None]
        bounds = (-math.inf if b[0] is None else b[0], math.inf if b[1] is None else b[1])
        return cls(spec["value"], bool(spec.get("optimize", False)), bounds)


@dataclass
class Skill:
    kind: str
    params: dict  # name -> Param
    horizon: float | None = None  # seconds of shadow samples; fixed at the first forward pass if None

    def __post_init__(self):
        if self.kind not in SKILL_PARAMS:
            raise ProgramError(f"unknown skill kind '{self.kind}'")
        required, optional = SKILL_PARAMS[self.kind]
        self.params = {k: v if isinstance(v, Param) else Param.from_spec(v) for k, v in self.params.items()}
        missing = [p for p in required if p not in self.params]
        if missing:
            raise ProgramError(f"{self.kind}: missing parameters {missing}")
        unknown = [p for p in self.params if p not in required + optional]
        if unknown:
            raise ProgramError(f"{self.kind}: unknown parameters {unknown}")
        rot = [p for p in optional if p in self.params]
        if rot and len(rot) != len(optional):
            raise ProgramError(f"{self.kind}: give all of {optional} or none")
        vel = self.params["velocity"]
        if vel.value <= 0 or (vel.optimize and vel.bounds[0] <= 0):
            raise ProgramError(f"{self.kind}: velocity must be positive (and bounded below by a positive value "
                               "when optimized)")

    @property
    def oriented(self) -> bool:
        return "rx" in self.params


@dataclass
class Program:
    skills: list
    settings: dict = field(default_factory=dict)
    residual: Callable | None = None  # differentiable ShadowTrajectory -> ShadowTrajectory map

    def __post_init__(self):
        if not self.skills:
            raise ProgramError("a program needs at least one skill")
        unknown = set(self.settings) - set(DEFAULT_SETTINGS)
        if unknown:
            raise ProgramError(f"unknown program settings {sorted(unknown)}")
        self.settings = {**DEFAULT_SETTINGS, **self.settings}
        if not self.settings["dt"] > 0:
            raise ProgramError("dt must be positive")

    # parameter vector -------------------------------------------------
    def slots(self) -> list[tuple[int, str]]:
        return [(i, k) for i, s in enumerate(self.skills) for k, p in s.params.items() if p.optimize]

    def names(self) -> list[str]:
        return [f"{i}.{self.skills[i].kind}.{k}" for i, k in self.slots()]

    def x0(self) -> np.ndarray:
        return np.array([self.skills[i].params[k].value for i, k in self.slots()])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        b = np.array([self.skills[i].params[k].bounds for i, k in self.slots()]).reshape(-1, 2)
        return b[:, 0], b[:, 1]

    def with_x(self, x) -> "Program":
        x = np.asarray(x, float)
        skills = [Skill(s.kind, {k: replace(p) for k, p in s.params.items()}, s.horizon) for s in self.skills]
        for v, (i, k) in zip(x, self.slots()):
            skills[i].params[k].value = float(v)
        return Program(skills, dict(self.settings), self.residual)

    # serialisation ----------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict) -> "Program":
        skills = []
        for j, s in enumerate(doc["skills"]):
            try:
                skills.append(Skill(s["kind"], dict(s["params"]), s.get("horizon")))
            except ProgramError as exc:
                raise ProgramError(f"skills[{j}]: {exc}") from exc
        return cls(skills, dict(doc.get("settings", {})))

    def to_dict(self) -> dict:
        skills = []
        for s in self.skills:
            d = {"kind": s.kind, "params": {k: p.to_dict() for k, p in s.params.items()}}
            if s.horizon is not None:
                d["horizon"] = s.horizon
            skills.append(d)
        settings = {k: v for k, v in self.settings.items() if v != DEFAULT_SETTINGS[k]}
        return {"skills": skills, "settings": settings}


@dataclass
class ShadowTrajectory:
    positions: Tensor  # (M, 3) end-effector positions
    rotations: np.ndarray  # (M, 3, 3)
    joints: np.ndarray  # (M, N); NaN where a Cartesian skill runs
    wrench: Tensor  # (M, 6)
    eos: Tensor  # (M,)
    succ: Tensor  # (M,)
    times: np.ndarray  # (M,) time since the segment start
    segment: np.ndarray  # (M,) skill index
    t_global: np.ndarray  # (M,) program time; a segment starts when the previous one's samples end
    durations: list  # per-skill duration estimates (Tensor scalars)
    plans: list  # PlanResult per skill, None for Cartesian skills
    dt: float

    def __len__(self):
        return self.positions.shape[0]

    @property
    def collision_free(self) -> bool:
        return all(p.converged_collision_free for p in self.plans if p is not None)

    def seam_gaps(self) -> np.ndarray:
        P = self.positions.data
        cut = np.flatnonzero(np.diff(self.segment)) + 1
        return np.linalg.norm(P[cut] - P[cut - 1], axis=1) if len(cut) else np.zeros(0)

    def table(self) -> np.ndarray:
        """Plain per-sample rows in the order of :meth:`columns`."""
        M = len(self)
        return np.column_stack([self.segment, self.times, self.t_global, self.positions.data,
                                self.rotations.reshape(M, 9), self.joints, self.wrench.data,
                                self.eos.data, self.succ.data])

    def columns(self) -> list[str]:
        n = self.joints.shape[1]
        return (["segment", "t", "t_global", "px", "py", "pz"] + [f"r{i}{j}" for i in range(3) for j in range(3)]
                + [f"q{i}" for i in range(n)] + ["fx", "fy", "fz", "tx", "ty", "tz", "eos", "succ"])


# ---------------------------------------------------------------------------
# objectives


def _check_prob(p, name):
    v = ad._val(p)
    if np.any(v <= 0.0) or np.any(v >= 1.0) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} probabilities must lie strictly inside (0, 1)")


def phi_cyc(traj) -> Tensor:
    """Cycle-time loss: cross entropy of every end-of-sequence flag against 1."""
    eos = traj.eos if isinstance(traj, ShadowTrajectory) else ad.as_tensor(traj)
    _check_prob(eos, "eos")
    return -ad.sum_(ad.log(eos))


def phi_path(traj) -> Tensor:
    """Polyline length of the end-effector positions."""
    P = traj.positions if isinstance(traj, ShadowTrajectory) else ad.as_tensor(traj)
    if P.shape[0] < 2:
        raise ValueError("path length needs at least two points")
    return ad.sum_(ad.norm(P[1:] - P[:-1], axis=-1))


def phi_succ(traj) -> Tensor:
    """Success loss: cross entropy of every success probability against 1."""
    succ = traj.succ if isinstance(traj, ShadowTrajectory) else ad.as_tensor(traj)
    _check_prob(succ, "succ")
    return -ad.sum_(ad.log(succ))


# ---------------------------------------------------------------------------
# skill models


def eos_channel(times: np.ndarray, duration, dt: float) -> Tensor:
    """``sigma(kappa (t - T))`` with ``kappa = 4 / dt``, kept inside (0, 1)."""
    kappa = 4.0 / dt
    s = ad.sigmoid(ad.mul(ad.sub(times, duration), kappa))
    return s * (1.0 - 2 * PROB_EPS) + PROB_EPS


def annulus_probability(r_in, r_out, offset, sigma: float) -> Tensor:
    """Probability that ``offset + N(0, sigma^2 I)`` lands in the annulus ``r_in <= |u| <= r_out``.

    Polar quadrature: Gauss-Legendre in the radius, trapezoid rule in the angle.
    Differentiable in the radii and in the 2-vector ``offset``.
    """
    a, b = ad.as_tensor(r_in), ad.as_tensor(r_out)
    m = ad.as_tensor(offset)
    half = (b - a) * 0.5
    rho = ad.mul(_GL_NODES + 1.0, half) + a
    th = np.linspace(0.0, 2 * np.pi, _N_ANGLES, endpoint=False)
    ux = ad.einsum("g,a->ga", rho, np.cos(th)) - m[0]
    uy = ad.einsum("g,a->ga", rho, np.sin(th)) - m[1]
    dens = ad.exp((ux * ux + uy * uy) * (-0.5 / sigma ** 2))
    inner = ad.einsum("ga,g->g", dens, rho)
    total = ad.einsum("g,g->", inner, _GL_WEIGHTS * (2 * np.pi / _N_ANGLES)) * half
    return total * (1.0 / (2 * np.pi * sigma ** 2))


def annulus_probability_mc(r_in: float, r_out: float, offset, sigma: float, n: int = 100_000,
                           seed: int = 0, backend=None) -> float:
    """Monte-Carlo estimate of :func:`annulus_probability` by sampling offsets."""
    rng = np.random.default_rng(seed)
    u = np.asarray(offset, float)[:2] + sigma * rng.standard_normal((n, 2))
    return _kernels.annulus_hits(u, r_in, r_out, backend=backend) / n


@dataclass
class _State:
    pos: Tensor  # (3,)
    rot: np.ndarray  # (3, 3)
    q: Tensor | None  # joint positions when known
    q_seed: np.ndarray  # last known joint positions, used to seed IK


@dataclass
class _Segment:
    pos: Tensor
    rot: np.ndarray
    joints: np.ndarray
    wrench: Tensor
    succ: Tensor
    duration: Tensor
    end: _State
    plan: PlanResult | None = None


def _const_rows(v, K: int) -> Tensor:
    v = ad.as_tensor(v)
    return ad.einsum("k,i->ki", np.ones(K), v)


def _interp_rows(rows: Tensor, s: Tensor) -> Tensor:
    """Linear interpolation of ``rows`` (T, d) at fractional indices ``s`` (K,)."""
    T = rows.shape[0]
    idx = np.minimum(np.floor(s.data).astype(int), T - 2)
    frac = s - idx.astype(float)
    lo, hi = rows[idx], rows[idx + 1]
    return lo + ad.einsum("k,kd->kd", frac, hi - lo)


def _progress(times: np.ndarray, duration: Tensor) -> Tensor:
    """Fraction of the segment completed at each sample, clipped to [0, 1]; the last sample is 1."""
    s = ad.clip(ad.mul(times, 1.0 / duration), 0.0, 1.0)
    last = np.zeros(len(times))
    last[-1] = 1.0
    # pin the final sample so consecutive skills always meet
    return s * (1.0 - last) + last


class _Runner:
    def __init__(self, program: Program, chain: SerialChain, world: SdfGrid, cache, planner_config):
        self.program = program
        self.chain = chain
        self.world = world
        self.cache = cache
        self.pc = planner_config or PlannerConfig()
        self.dt = program.settings["dt"]
        self.motion_succ = program.settings["motion_success"]

    def samples(self, skill: Skill, duration: Tensor) -> np.ndarray:
        if skill.horizon is None:
            d = float(duration.data)
            skill.horizon = float(max(2.0 * d, d + 1.0))
        K = max(int(math.ceil(skill.horizon / self.dt)) + 1, 2)
        return np.arange(K) * self.dt

    def joints_unknown(self, K):
        return np.full((K, self.chain.n), np.nan)

    def start_joints(self, state: _State) -> Tensor:
        if state.q is not None:
            return state.q
        target = state.pos
        q, res = damped_ik(self.chain, target.data, state.q_seed, tol=1e-12, max_iter=1000)
        if res > 1e-6:
            raise ProgramError(f"cannot reach the previous skill's end position (IK residual {res:.2e} m)")
        if not ad._needs(target):
            return Tensor(q)
        fk = forward_kinematics(self.chain, q)
        Jv, _ = ee_jacobian(self.chain, q, fk)
        return Tensor(q) + ad.matmul(Tensor(np.linalg.pinv(Jv.data[0])), target - fk.ee_position.data[0])

    # skills -----------------------------------------------------------
    def plan_move(self, index: int, skill: Skill, p: dict, state: _State) -> _Segment:
        chain, n = self.chain, self.chain.n
        target = ad.stack([p["x"], p["y"], p["z"]])
        rot = so3.exp(ad.stack([p["rx"], p["ry"], p["rz"]])) if skill.oriented else None
        q0 = self.start_joints(state)
        start = ad.concat([q0, Tensor(np.zeros(n))])
        init = self.cache.get(index) if self.cache is not None else None
        problem = PlanProblem(chain, self.world, start, CartesianGoal(target, rot), init=init)
        result = plan(problem, self.pc)
        if self.cache is not None:
            self.cache[index] = result.trajectory.detach()
        X = result.trajectory.positions
        # the shadow starts exactly at the handed-over configuration
        X = ad.concat([ad.reshape(q0, (1, n)), X[1:]])
        fk = forward_kinematics(chain, X)
        P = fk.ee_position
        length = ad.sum_(ad.norm(P[1:] - P[:-1], axis=-1))
        duration = length / p["velocity"]
        times = self.samples(skill, duration)
        s = _progress(times, duration + 1e-12) * float(X.shape[0] - 1)
        pos = _interp_rows(P, s)
        q = _interp_rows(X, s)
        idx = np.minimum(np.round(s.data).astype(int), X.shape[0] - 1)
        R = fk.ee_rotation.data[idx]
        K = len(times)
        end = _State(P[-1], fk.ee_rotation.data[-1], X[-1], X.data[-1].copy())
        return _Segment(pos, R, q.data, Tensor(np.zeros((K, 6))), Tensor(np.full(K, self.motion_succ)),
                        duration, end, result)

    def linear_move(self, index: int, skill: Skill, p: dict, state: _State) -> _Segment:
        target = ad.stack([p["x"], p["y"], p["z"]])
        delta = target - state.pos
        duration = ad.norm(delta) / p["velocity"]
        times = self.samples(skill, duration)
        K = len(times)
        s = _progress(times, duration + 1e-12)
        pos = _const_rows(state.pos, K) + ad.einsum("k,i->ki", s, delta)
        end = _State(pos[-1], state.rot, None, state.q_seed)
        return _Segment(pos, np.broadcast_to(state.rot, (K, 3, 3)).copy(), self.joints_unknown(K),
                        Tensor(np.zeros((K, 6))), Tensor(np.full(K, self.motion_succ)), duration, end)

    def spiral_search(self, index: int, skill: Skill, p: dict, state: _State) -> _Segment:
        st = self.program.settings
        r_in, r_out, v = p["radius_in"], p["radius_out"], p["velocity"]
        if not 0.0 <= float(r_in.data) < float(r_out.data):
            raise ProgramError(f"spiral needs 0 <= radius_in < radius_out, got {float(r_in.data)}, "
                               f"{float(r_out.data)}")
        cap = st["capture_radius"]
        c = 2.0 * cap / (2 * np.pi)  # radial growth per radian: pitch = two capture radii
        phi_max = (r_out - r_in) * (1.0 / c)
        leg = r_in
        length = leg + r_in * phi_max + phi_max * phi_max * (0.5 * c)
        duration = length / v
        times = self.samples(skill, duration)
        K = len(times)
        arc = _progress(times, duration + 1e-12) * length
        beyond = ad.relu(arc - leg)
        on_leg = (beyond.data <= 0.0).astype(float)
        radius_spiral = ad.sqrt(beyond * (2.0 * c) + r_in * r_in + 1e-30)
        phi = (radius_spiral - r_in) * (1.0 / c)
        radius = arc * on_leg + radius_spiral * (1.0 - on_leg)
        offset = ad.stack([radius * ad.cos(phi), radius * ad.sin(phi), Tensor(np.zeros(K))], axis=1)
        pos = _const_rows(state.pos, K) + offset
        hole = np.asarray(st["hole"], float)[:2] if st["hole"] is not None else None
        m = (Tensor(hole) - state.pos[:2]) if hole is not None else Tensor(np.zeros(2))
        prob = annulus_probability(ad.relu(r_in - cap), r_out + cap, m, st["sigma"])
        succ = prob * (1.0 - 2 * SUCC_EPS) + SUCC_EPS
        wrench = _const_rows(ad.stack([Tensor(0.0), Tensor(0.0), -p["force"], Tensor(0.0), Tensor(0.0),
                                       Tensor(0.0)]), K)
        end = _State(pos[-1], state.rot, None, state.q_seed)
        return _Segment(pos, np.broadcast_to(state.rot, (K, 3, 3)).copy(), self.joints_unknown(K), wrench,
                        ad.mul(np.ones(K), succ), duration, end)

    def force_place(self, index: int, skill: Skill, p: dict, state: _State) -> _Segment:
        d, v, F = p["depth"], p["velocity"], p["force"]
        if not float(d.data) > 0:
            raise ProgramError("placing depth must be positive")
        duration = (d + F * self.program.settings["compliance"]) / v
        times = self.samples(skill, duration)
        K = len(times)
        s = _progress(times, d / v + 1e-12)
        down = ad.einsum("k,i->ki", s * d, np.array([0.0, 0.0, -1.0]))
        pos = _const_rows(state.pos, K) + down
        wrench = _const_rows(ad.stack([Tensor(0.0), Tensor(0.0), -F, Tensor(0.0), Tensor(0.0),
                                       Tensor(0.0)]), K)
        end = _State(pos[-1], state.rot, None, state.q_seed)
        return _Segment(pos, np.broadcast_to(state.rot, (K, 3, 3)).copy(), self.joints_unknown(K), wrench,
                        Tensor(np.full(K, self.motion_succ)), duration, end)


_DISPATCH = {
    "PlanMove": _Runner.plan_move,
    "LinearMove": _Runner.linear_move,
    "SpiralSearch": _Runner.spiral_search,
    "ForcePlace": _Runner.force_place,
}


def _unpack(program: Program, x) -> list[dict]:
    x = ad.as_tensor(x)
    slots = program.slots()
    if x.shape != (len(slots),):
        raise ProgramError(f"expected {len(slots)} parameters, got shape {x.shape}")
    lo, hi = program.bounds()
    if np.any(x.data < lo) or np.any(x.data > hi):
        bad = [n for n, v, a, b in zip(program.names(), x.data, lo, hi) if not a <= v <= b]
        raise ProgramError(f"parameters outside their bounds: {bad}")
    out = [{k: Tensor(p.value) for k, p in s.params.items()} for s in program.skills]
    for j, (i, k) in enumerate(slots):
        out[i][k] = x[j]
    for i, s in enumerate(program.skills):
        if float(out[i]["velocity"].data) <= 0:
            raise ProgramError(f"skill {i}: velocity must be positive")
    return out


def forward(program: Program, x, start: JointState, world: SdfGrid, chain: SerialChain,
            cache: dict | None = None, planner_config: PlannerConfig | None = None) -> ShadowTrajectory:
    """Shadow trajectory of ``program`` at parameters ``x`` (a tensor for gradients).

    ``cache`` maps skill index to the last planned trajectory; PlanMove skills
    warm start from it and overwrite it.  Pass ``None`` to plan from scratch.
    """
    params = _unpack(program, x)
    runner = _Runner(program, chain, world, cache, planner_config)
    if not isinstance(start, JointState):
        start = JointState(start)
    fk = forward_kinematics(chain, start.positions)
    state = _State(Tensor(fk.ee_position.data[0]), fk.ee_rotation.data[0], Tensor(start.positions),
                   start.positions.copy())
    segs = []
    for i, (skill, p) in enumerate(zip(program.skills, params)):
        seg = _DISPATCH[skill.kind](runner, i, skill, p, state)
        if segs:
            gap = float(np.linalg.norm(seg.pos.data[0] - segs[-1].pos.data[-1]))
            if gap > program.settings["seam_tol"]:
                raise ProgramError(f"skill {i} ({skill.kind}) starts {gap:.3e} m away from where skill "
                                   f"{i - 1} ended")
        segs.append(seg)
        state = seg.end
    dt = runner.dt
    times = [np.arange(s.pos.shape[0]) * dt for s in segs]
    traj = ShadowTrajectory(
        positions=ad.concat([s.pos for s in segs]),
        rotations=np.concatenate([s.rot for s in segs]),
        joints=np.concatenate([s.joints for s in segs]),
        wrench=ad.concat([s.wrench for s in segs]),
        eos=ad.concat([eos_channel(t, s.duration, dt) for t, s in zip(times, segs)]),
        succ=ad.concat([s.succ for s in segs]),
        times=np.concatenate(times),
        segment=np.concatenate([np.full(len(t), i) for i, t in enumerate(times)]),
        t_global=np.concatenate(times) + np.concatenate(
            [np.full(len(t), off) for t, off in zip(times, np.cumsum([0.0] + [t[-1] for t in times[:-1]]))]),
        durations=[s.duration for s in segs],
        plans=[s.plan for s in segs],
        dt=dt,
    )
    if program.residual is not None:
        traj = program.residual(traj)
    return traj


# ---------------------------------------------------------------------------
# outer optimisation


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 100
    w_cyc: float = 1.0
    w_path: float = 1.0
    w_succ: float = 1.0
    use_cache: bool = True
    grad_tol: float = 1e-12

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        w = (self.w_cyc, self.w_path, self.w_succ)
        if min(w) < 0 or max(w) <= 0:
            raise ValueError("objective weights must be non-negative with at least one positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown optimizer fields {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def objective_terms(traj: ShadowTrajectory, config: OptimizerConfig) -> tuple[Tensor, dict]:
    """Weighted objective plus the three raw terms; zero-weight terms stay off the tape."""
    terms = {"phi_cyc": phi_cyc(traj), "phi_path": phi_path(traj), "phi_succ": phi_succ(traj)}
    total = Tensor(0.0)
    for w, key in ((config.w_cyc, "phi_cyc"), (config.w_path, "phi_path"), (config.w_succ, "phi_succ")):
        if w > 0:
            total = total + terms[key] * w
    return total, {k: float(v.data) for k, v in terms.items()}


@dataclass
class OptimizeResult:
    x: np.ndarray  # best parameters seen
    history: list
    status: str  # "ok", "stationary" or a warning starting with "warning:"
    initial: ShadowTrajectory
    final: ShadowTrajectory  # forward pass at ``x``

    @property
    def objective_improved(self) -> bool:
        return self.history[-1]["best_objective"] < self.history[0]["objective"] or len(self.history) == 1


def optimize(program: Program, x0, start, world: SdfGrid, chain: SerialChain,
             config: OptimizerConfig | None = None, planner_config: PlannerConfig | None = None,
             callback: Callable | None = None) -> OptimizeResult:
    """Adam on the weighted objective with box projection; keeps the best iterate.

    One history row per forward pass.  With no optimizable parameters the
    program is evaluated once.  The best iterate is the lowest objective among
    collision-free passes (any pass if none is collision free), and
    ``final`` is the shadow trajectory recorded at that iterate.
    """
    config = config or OptimizerConfig()
    x = program.x0() if x0 is None else np.array(x0, float)
    lo, hi = program.bounds()
    if x.shape != lo.shape:
        raise ProgramError(f"expected {len(lo)} parameters, got {x.shape}")
    cache = {} if config.use_cache else None
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    history: list[dict] = []
    best_x, best_obj, best_key, best_traj = x.copy(), math.inf, (True, math.inf), None
    status = "ok"
    initial = None
    for it in range(config.max_iters):
        X = Tensor(x, requires_grad=True)
        try:
            traj = forward(program, X, start, world, chain, cache, planner_config)
            total, terms = objective_terms(traj, config)
        except (PlanningError, ProgramError, ValueError) as exc:
            if it == 0:
                raise
            status = f"warning: forward pass failed at iteration {it}: {exc}"
            break
        g = ad.grad(total, [X])[0] if len(x) else np.zeros(0)
        if not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite gradient at iteration {it}")
        obj = float(total.data)
        if initial is None:
            initial = traj
        key = (not traj.collision_free, obj)
        if key < best_key:
            best_key, best_obj, best_x, best_traj = key, obj, x.copy(), traj
        history.append({"iteration": it, "objective": obj, **terms,
                        "grad_norm": float(np.linalg.norm(g)), "best_objective": best_obj,
                        "collision_free": traj.collision_free, "x": x.tolist()})
        if callback is not None:
            callback(history[-1])
        if len(x) == 0:
            break
        if np.max(np.abs(g)) < config.grad_tol:
            status = "stationary"
            break
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        mh = m / (1 - config.beta1 ** (it + 1))
        vh = v / (1 - config.beta2 ** (it + 1))
        x = np.clip(x - config.lr * mh / (np.sqrt(vh) + config.eps), lo, hi)
    return OptimizeResult(best_x, history, status, initial, best_traj)
