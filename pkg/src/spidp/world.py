"""Voxel signed distance fields built from analytic obstacle primitives."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad

EMPTY_DISTANCE = 1e3


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, float))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its centre and half extents."""

    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        he = np.asarray(self.half_extents, float)
        if he.shape != (3,) or np.any(he <= 0):
            raise ValueError("box half extents must be three positive numbers")
        object.__setattr__(self, "center", np.asarray(self.center, float))
        object.__setattr__(self, "half_extents", he)


def _pack(primitives):
    spheres = np.array([[*p.center, p.radius] for p in primitives if isinstance(p, Sphere)]).reshape(-1, 4)
    boxes = np.array([[*p.center, *p.half_extents] for p in primitives if isinstance(p, Box)]).reshape(-1, 6)
    return spheres, boxes


def analytic_distance(primitives, points) -> np.ndarray:
    """Exact union signed distance of ``primitives`` at ``points`` (..., 3)."""
    pts = np.asarray(points, float)
    spheres, boxes = _pack(primitives)
    return _kernels.primitive_sdf(pts.reshape(-1, 3), spheres, boxes).reshape(pts.shape[:-1])


@dataclass(frozen=True, eq=False)
class SdfGrid:
    """Signed distances sampled at voxel centres ``origin + resolution * (i, j, k)``.

    Negative values are inside obstacles.  ``primitives`` keeps the analytic
    description the grid was built from, for independent checks.
    """

    origin: np.ndarray
    resolution: float
    data: np.ndarray
    primitives: tuple = ()

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if self.data.ndim != 3 or min(self.data.shape) < 2:
            raise ValueError("grid needs at least two voxels per axis")

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.resolution * (np.array(self.dims) - 1)

    def centers(self) -> np.ndarray:
        axes = [self.origin[d] + self.resolution * np.arange(self.dims[d]) for d in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def build_sdf(primitives, origin, resolution, dims) -> SdfGrid:
    """Sample the union SDF of ``primitives`` on a regular grid."""
    if not resolution > 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError(f"dims must be three integers >= 2, got {dims}")
    origin = np.asarray(origin, float)
    axes = [origin[d] + resolution * np.arange(dims[d]) for d in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    spheres, boxes = _pack(primitives)
    data = _kernels.primitive_sdf(pts, spheres, boxes).reshape(dims)
    return SdfGrid(origin, float(resolution), data, tuple(primitives))


def query(grid: SdfGrid, p):
    """Trilinearly interpolated signed distance; differentiable for tensor input.

    Accepts a single point ``(3,)`` or a batch ``(M, 3)``.  Plain arrays give
    plain arrays back.
    """
    if isinstance(p, ad.Tensor):
        return _query_tensor(grid, p)
    pts = np.asarray(p, float)
    val, _, _ = _kernels.trilinear(grid.data, grid.origin, grid.resolution, pts.reshape(-1, 3), 0)
    return val.reshape(pts.shape[:-1]) if pts.ndim > 1 else float(val[0])


def interp_gradient(grid: SdfGrid, p):
    """Gradient of the trilinear interpolant; differentiable for tensor input."""
    if isinstance(p, ad.Tensor):
        return _grad_tensor(grid, p)
    pts = np.asarray(p, float)
    _, g, _ = _kernels.trilinear(grid.data, grid.origin, grid.resolution, pts.reshape(-1, 3), 1)
    return g.reshape(pts.shape)


def gradient(grid: SdfGrid, p) -> np.ndarray:
    """Weighted 26-neighbour difference at the voxel containing ``p``.

    Each neighbour contributes ``(d_n - d_v) / |offset_n|`` along its unit
    direction.  Piecewise constant in ``p``; factors use :func:`interp_gradient`.
    """
    pts = np.asarray(p, float)
    g = _kernels.neighbor_gradient(grid.data, grid.origin, grid.resolution, pts.reshape(-1, 3))
    return g.reshape(pts.shape)


def _query_tensor(grid, P: ad.Tensor) -> ad.Tensor:
    pts = P.data.reshape(-1, 3)
    val, g, _ = _kernels.trilinear(grid.data, grid.origin, grid.resolution, pts, 1)
    shape = P.shape[:-1]
    g = g.reshape(P.shape)
    return ad.custom("sdf_query", val.reshape(shape), (P,), (lambda c: c[..., None] * g,))


def _grad_tensor(grid, P: ad.Tensor) -> ad.Tensor:
    pts = P.data.reshape(-1, 3)
    _, g, h = _kernels.trilinear(grid.data, grid.origin, grid.resolution, pts, 2)
    h = h.reshape(P.shape + (3,))
    return ad.custom("sdf_grad", g.reshape(P.shape), (P,),
                     (lambda c: np.einsum("...i,...ij->...j", c, h),))


def world_from_dict(doc: dict) -> SdfGrid:
    prims = []
    for k, o in enumerate(doc.get("obstacles", [])):
        kind = o.get("type")
        if kind == "sphere":
            prims.append(Sphere(o["center"], float(o["radius"])))
        elif kind == "box":
            prims.append(Box(o["center"], np.asarray(o["size"], float) / 2.0))
        else:
            raise ValueError(f"obstacles[{k}]: unknown obstacle type '{kind}'")
    g = doc["grid"]
    return build_sdf(prims, g["origin"], float(g["resolution"]), g["dims"])


def load_world(path) -> SdfGrid:
    with open(path) as fh:
        return world_from_dict(json.load(fh))
