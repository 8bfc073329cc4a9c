"""Forward kinematics and point Jacobians for revolute serial chains.

Each joint is described by a fixed origin transform (relative to the previous
joint frame) followed by a rotation about a unit axis.  Link ``i`` is the body
that moves with joint ``i``; its frame is the joint frame after the rotation.
All computations go through :mod:`spidp.autodiff`, so poses and Jacobians are
differentiable with respect to the joint angles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_LEVI = np.zeros((3, 3, 3))
_LEVI[0, 1, 2] = _LEVI[1, 2, 0] = _LEVI[2, 0, 1] = 1.0
_LEVI[0, 2, 1] = _LEVI[2, 1, 0] = _LEVI[1, 0, 2] = -1.0


class ModelError(ValueError):
    """Invalid robot model description."""


def rpy_matrix(rpy) -> np.ndarray:
    """Rotation for fixed-axis roll/pitch/yaw (URDF convention, Rz @ Ry @ Rx)."""
    r, p, y = rpy
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def make_transform(xyz=(0, 0, 0), rpy=(0, 0, 0)) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = rpy_matrix(rpy)
    T[:3, 3] = xyz
    return T


def skew(v: np.ndarray) -> np.ndarray:
    return -np.einsum("ijk,k->ij", _LEVI, v)


def axis_angle_matrix(axis, angle) -> np.ndarray:
    K = skew(np.asarray(axis, float))
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * K @ K


@dataclass(frozen=True)
class CollisionSphere:
    link_index: int
    offset: np.ndarray
    radius: float


@dataclass(frozen=True)
class Joint:
    axis: np.ndarray
    origin: np.ndarray
    lower: float
    upper: float
    name: str = ""


@dataclass(frozen=True, eq=False)
class SerialChain:
    """Immutable description of an N-DoF revolute arm."""

    joints: tuple
    spheres: tuple = ()
    tool: np.ndarray = field(default_factory=lambda: np.eye(4))
    base: np.ndarray = field(default_factory=lambda: np.eye(4))
    name: str = ""

    def __post_init__(self):
        if len(self.joints) < 1:
            raise ModelError("a chain needs at least one joint")
        for i, j in enumerate(self.joints):
            if not j.lower < j.upper:
                raise ModelError(f"joints[{i}]: lower limit {j.lower} must be below upper {j.upper}")
            if abs(np.linalg.norm(j.axis) - 1.0) > 1e-9:
                raise ModelError(f"joints[{i}]: axis must be a unit vector")
        for k, s in enumerate(self.spheres):
            if not 0 <= s.link_index < len(self.joints):
                raise ModelError(f"collision_spheres[{k}]: link {s.link_index} out of range")
            if not s.radius > 0:
                raise ModelError(f"collision_spheres[{k}]: radius must be positive")
        # spheres are kept grouped by link so batched evaluation can concatenate per link
        order = sorted(range(len(self.spheres)), key=lambda k: self.spheres[k].link_index)
        object.__setattr__(self, "spheres", tuple(self.spheres[k] for k in order))

    @property
    def n(self) -> int:
        return len(self.joints)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    @property
    def sphere_radii(self) -> np.ndarray:
        return np.array([s.radius for s in self.spheres])

    @classmethod
    def from_dict(cls, doc: dict) -> "SerialChain":
        joints = []
        for i, j in enumerate(doc["joints"]):
            kind = j.get("type", "revolute")
            if kind != "revolute":
                raise ModelError(f"joints[{i}]: unsupported joint type '{kind}' (only revolute)")
            axis = np.asarray(j.get("axis", [0, 0, 1]), float)
            axis = axis / np.linalg.norm(axis)
            joints.append(Joint(axis=axis,
                                origin=make_transform(j.get("xyz", [0, 0, 0]), j.get("rpy", [0, 0, 0])),
                                lower=float(j["lower"]), upper=float(j["upper"]),
                                name=j.get("name", f"joint{i}")))
        spheres = tuple(CollisionSphere(int(s["link"]), np.asarray(s["offset"], float), float(s["radius"]))
                        for s in doc.get("collision_spheres", []))
        tool = doc.get("tool", {})
        base = doc.get("base", {})
        return cls(joints=tuple(joints), spheres=spheres,
                   tool=make_transform(tool.get("xyz", [0, 0, 0]), tool.get("rpy", [0, 0, 0])),
                   base=make_transform(base.get("xyz", [0, 0, 0]), base.get("rpy", [0, 0, 0])),
                   name=doc.get("name", ""))

    @classmethod
    def load(cls, path) -> "SerialChain":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_base(self, base: np.ndarray) -> "SerialChain":
        return SerialChain(self.joints, self.spheres, self.tool, np.asarray(base, float), self.name)


@dataclass
class JointState:
    positions: np.ndarray
    velocities: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.velocities is None:
            self.velocities = np.zeros_like(self.positions)
        self.velocities = np.asarray(self.velocities, dtype=float)
        if self.positions.shape != self.velocities.shape:
            raise ValueError("positions and velocities must have the same length")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.positions, self.velocities])


@dataclass
class Kinematics:
    """World poses of every link frame plus the tool frame.

    ``rotations[i]`` / ``positions[i]`` are ``(B, 3, 3)`` / ``(B, 3)`` tensors;
    ``axes[i]`` is joint ``i``'s axis in world coordinates.
    """

    rotations: list
    positions: list
    axes: list
    ee_rotation: Tensor
    ee_position: Tensor
    batched: bool

    def link_pose(self, i: int) -> np.ndarray:
        """Homogeneous 4x4 (or Bx4x4) pose of link ``i`` as a plain array."""
        return _homogeneous(self.rotations[i].data, self.positions[i].data, self.batched)

    def ee_pose(self) -> np.ndarray:
        return _homogeneous(self.ee_rotation.data, self.ee_position.data, self.batched)


def _homogeneous(R, p, batched):
    if not batched:
        T = np.eye(4)
        T[:3, :3] = R[0]
        T[:3, 3] = p[0]
        return T
    T = np.tile(np.eye(4), (R.shape[0], 1, 1))
    T[:, :3, :3] = R
    T[:, :3, 3] = p
    return T


def _check_q(chain: SerialChain, q) -> tuple[Tensor, bool]:
    q = ad.as_tensor(q)
    if q.ndim == 1:
        if q.shape[0] != chain.n:
            raise ValueError(f"expected {chain.n} joint values, got {q.shape[0]}")
        return q.reshape(1, chain.n), False
    if q.ndim != 2 or q.shape[1] != chain.n:
        raise ValueError(f"expected joint array of shape (B, {chain.n}), got {q.shape}")
    return q, True


def forward_kinematics(chain: SerialChain, q) -> Kinematics:
    """World poses of all links and the tool for one or a batch of configurations."""
    qb, batched = _check_q(chain, q)
    B = qb.shape[0]
    R = Tensor(np.broadcast_to(chain.base[:3, :3], (B, 3, 3)))
    p = Tensor(np.broadcast_to(chain.base[:3, 3], (B, 3)))
    rotations, positions, axes = [], [], []
    for i, joint in enumerate(chain.joints):
        O = joint.origin
        p = p + ad.einsum("bij,j->bi", R, O[:3, 3])
        R = ad.einsum("bij,jk->bik", R, O[:3, :3])
        K = skew(joint.axis)
        qi = qb[:, i]
        rot = (ad.einsum("b,ij->bij", ad.sin(qi), K)
               + ad.einsum("b,ij->bij", 1.0 - ad.cos(qi), K @ K)
               + Tensor(np.broadcast_to(np.eye(3), (B, 3, 3))))
        axes.append(ad.einsum("bij,j->bi", R, joint.axis))
        R = ad.einsum("bij,bjk->bik", R, rot)
        rotations.append(R)
        positions.append(p)
    ee_p = p + ad.einsum("bij,j->bi", R, chain.tool[:3, 3])
    ee_R = ad.einsum("bij,jk->bik", R, chain.tool[:3, :3])
    return Kinematics(rotations, positions, axes, ee_R, ee_p, batched)


def _broadcast_rows(x: Tensor, k: int) -> Tensor:
    """(B, 3) -> (B, k, 3) by explicit repetition."""
    return ad.einsum("bi,k->bki", x, np.ones(k))


def _points_and_jacobians(chain: SerialChain, fk: Kinematics, link: int, offsets: np.ndarray):
    """World positions (B, k, 3) and Jacobians (B, k, 3, N) of points fixed to ``link``."""
    k = offsets.shape[0]
    pts = _broadcast_rows(fk.positions[link], k) + ad.einsum("bij,kj->bki", fk.rotations[link], offsets)
    B = pts.shape[0]
    cols = []
    for j in range(chain.n):
        if j > link:
            cols.append(Tensor(np.zeros((B, k, 3))))
            continue
        lever = pts - _broadcast_rows(fk.positions[j], k)
        cols.append(ad.cross(_broadcast_rows(fk.axes[j], k), lever))
    return pts, ad.stack(cols, axis=3)


def point_jacobian(chain: SerialChain, q, link: int, point) -> Tensor:
    """3xN Jacobian of the world position of ``point`` (given in link frame)."""
    if not 0 <= link < chain.n:
        raise ValueError(f"invalid link index {link} for a {chain.n}-joint chain")
    fk = forward_kinematics(chain, q)
    _, J = _points_and_jacobians(chain, fk, link, np.asarray(point, float).reshape(1, 3))
    J = J[:, 0]
    return J[0] if not fk.batched else J


def sphere_centers(chain: SerialChain, q, fk: Kinematics | None = None, jacobians: bool = True):
    """Collision-sphere centres ``(B, S, 3)`` and, optionally, Jacobians ``(B, S, 3, N)``."""
    fk = fk or forward_kinematics(chain, q)
    links = np.array([s.link_index for s in chain.spheres])
    offsets = np.array([s.offset for s in chain.spheres]).reshape(-1, 3)
    centres, jacs = [], []
    for link in np.unique(links):
        sel = links == link
        if jacobians:
            c, J = _points_and_jacobians(chain, fk, int(link), offsets[sel])
            jacs.append(J)
        else:
            k = int(sel.sum())
            c = _broadcast_rows(fk.positions[link], k) + ad.einsum("bij,kj->bki", fk.rotations[link], offsets[sel])
        centres.append(c)
    C = ad.concat(centres, axis=1)
    if not jacobians:
        return C, None
    return C, ad.concat(jacs, axis=1)


def ee_jacobian(chain: SerialChain, q, fk: Kinematics | None = None) -> tuple[Tensor, Tensor]:
    """Geometric tool Jacobian split into linear ``(B,3,N)`` and angular ``(B,3,N)`` parts."""
    fk = fk or forward_kinematics(chain, q)
    lin, ang = [], []
    for j in range(chain.n):
        lin.append(ad.cross(fk.axes[j], fk.ee_position - fk.positions[j]))
        ang.append(fk.axes[j])
    return ad.stack(lin, axis=2), ad.stack(ang, axis=2)


def clamp_report(chain: SerialChain, q) -> np.ndarray:
    """Non-negative per-joint limit violation: overshoot above or undershoot below."""
    q = np.asarray(q, float)
    if q.shape[-1] != chain.n:
        raise ValueError(f"expected {chain.n} joint values, got {q.shape[-1]}")
    return np.maximum(q - chain.upper, 0.0) + np.maximum(chain.lower - q, 0.0)


def damped_ik(chain: SerialChain, target_pos, seed, target_rot=None, damping=1e-2,
              tol=1e-6, max_iter=500) -> tuple[np.ndarray, float]:
    """Damped least-squares IK on plain arrays; returns ``(q, residual_norm)``.

    The solution is kept inside the joint limits.  Orientation is matched only
    when ``target_rot`` is given.
    """
    from .so3 import log_np

    q = np.clip(np.asarray(seed, float).copy(), chain.lower, chain.upper)
    target_pos = np.asarray(target_pos, float)
    err_norm = np.inf
    for _ in range(max_iter):
        fk = forward_kinematics(chain, q)
        p = fk.ee_position.data[0]
        Jv, Jw = ee_jacobian(chain, q, fk)
        err = target_pos - p
        J = Jv.data[0]
        if target_rot is not None:
            R = fk.ee_rotation.data[0]
            err = np.concatenate([err, R @ log_np(R.T @ np.asarray(target_rot))])
            J = np.vstack([J, Jw.data[0]])
        err_norm = float(np.linalg.norm(err))
        if err_norm < tol:
            break
        step = J.T @ np.linalg.solve(J @ J.T + damping ** 2 * np.eye(J.shape[0]), err)
        q = np.clip(q + step, chain.lower, chain.upper)
    return q, err_norm
