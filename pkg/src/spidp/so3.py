"""SO(3) exponential/logarithm with hand-written adjoints.

The small-angle branches use truncated Taylor series so values and
derivatives stay accurate near the identity.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .kinematics import _LEVI, skew

_SMALL = 0.05


def exp_np(w) -> np.ndarray:
    w = np.asarray(w, float)
    th = np.linalg.norm(w)
    K = skew(w)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1 - np.cos(th)) / th ** 2 * K @ K


def log_np(R) -> np.ndarray:
    R = np.asarray(R, float)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    s = np.linalg.norm(v)
    if s < 1e-9:
        if c > 0:
            return v / c
        # rotation by pi: axis from the symmetric part
        M = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(M[k, k])
        return np.pi * axis
    return np.arctan2(s, c) / s * v


def _skew_batch(e):
    return -np.einsum("ijk,...k->...ij", _LEVI, e)


def log(R) -> ad.Tensor:
    """Rotation vector of ``R`` (shape ``(..., 3, 3)``), valid below pi."""
    Rv = ad._val(R)
    v = 0.5 * np.stack([Rv[..., 2, 1] - Rv[..., 1, 2],
                        Rv[..., 0, 2] - Rv[..., 2, 0],
                        Rv[..., 1, 0] - Rv[..., 0, 1]], axis=-1)
    c = 0.5 * (np.trace(Rv, axis1=-2, axis2=-1) - 1.0)
    s = np.linalg.norm(v, axis=-1)
    small = s < 1e-6
    s_safe = np.where(small, 1.0, s)
    ang = np.arctan2(s, c)
    g = np.where(small, 1.0 / c - s * s / (3.0 * c ** 3), ang / s_safe)
    # (dg/ds) / s and dg/dc
    gs = np.where(small, -2.0 / (3.0 * c ** 3), (c / (s * s + c * c) / s_safe - ang / s_safe ** 2) / s_safe)
    gc = -1.0 / (s * s + c * c)
    out = g[..., None] * v

    def vjp(ebar):
        ve = np.sum(v * ebar, axis=-1)
        vbar = g[..., None] * ebar + (gs * ve)[..., None] * v
        cbar = gc * ve
        Rbar = np.zeros_like(Rv)
        Rbar[..., 2, 1] += 0.5 * vbar[..., 0]
        Rbar[..., 1, 2] -= 0.5 * vbar[..., 0]
        Rbar[..., 0, 2] += 0.5 * vbar[..., 1]
        Rbar[..., 2, 0] -= 0.5 * vbar[..., 1]
        Rbar[..., 1, 0] += 0.5 * vbar[..., 2]
        Rbar[..., 0, 1] -= 0.5 * vbar[..., 2]
        for i in range(3):
            Rbar[..., i, i] += 0.5 * cbar
        return Rbar

    return ad.custom("so3_log", out, (R,), (vjp,))


def _exp_coeffs(th):
    small = th < _SMALL
    t = np.where(small, 1.0, th)
    t2 = th * th
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - np.cos(t)) / t ** 2)
    da = np.where(small, -1 / 3 + t2 / 30, (t * np.cos(t) - np.sin(t)) / t ** 3)
    db = np.where(small, -1 / 12 + t2 / 180, (t * np.sin(t) - 2 * (1 - np.cos(t))) / t ** 4)
    return a, b, da, db


def exp(w) -> ad.Tensor:
    """Rotation matrix of a rotation vector (shape ``(..., 3)``)."""
    wv = ad._val(w)
    th = np.linalg.norm(wv, axis=-1)
    a, b, da, db = _exp_coeffs(th)
    K = _skew_batch(wv)
    K2 = K @ K
    out = np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2

    def vjp(Rbar):
        # d/dw_k: da*w_k*K + a*E_k + db*w_k*K2 + b*(E_k K + K E_k), with da, db already divided by theta
        gK = np.sum(Rbar * K, axis=(-2, -1))
        gK2 = np.sum(Rbar * K2, axis=(-2, -1))
        out_w = (da * gK + db * gK2)[..., None] * wv
        # a * <Rbar, E_k>  where E_k = skew(e_k)
        sym = Rbar @ np.swapaxes(K, -1, -2) + np.swapaxes(K, -1, -2) @ Rbar
        for k in range(3):
            Ek = -_LEVI[:, :, k]
            out_w[..., k] += a * np.sum(Rbar * Ek, axis=(-2, -1))
            out_w[..., k] += b * np.sum(sym * Ek, axis=(-2, -1))
        return out_w

    return ad.custom("so3_exp", out, (w,), (vjp,))


def _jrinv_beta(th):
    small = th < _SMALL
    t = np.where(small, 1.0, th)
    t2 = th * th
    beta = np.where(small, 1 / 12 + t2 / 720 + t2 * t2 / 30240,
                    1 / t ** 2 - (1 + np.cos(t)) / (2 * t * np.sin(t)))
    num = -np.sin(t) * 2 * t * np.sin(t) - (1 + np.cos(t)) * (2 * np.sin(t) + 2 * t * np.cos(t))
    dg = num / (2 * t * np.sin(t)) ** 2
    dbeta = np.where(small, 1 / 360 + t2 / 7560 + t2 * t2 / 201600, (-2 / t ** 3 - dg) / t)
    return beta, dbeta


def right_jacobian_inverse(e) -> ad.Tensor:
    """``I + [e]/2 + beta(|e|) [e]^2``: maps body-frame increments to log increments."""
    ev = ad._val(e)
    th = np.linalg.norm(ev, axis=-1)
    beta, dbeta = _jrinv_beta(th)
    K = _skew_batch(ev)
    K2 = K @ K
    out = np.eye(3) + 0.5 * K + beta[..., None, None] * K2

    def vjp(Jbar):
        gK2 = np.sum(Jbar * K2, axis=(-2, -1))
        out_e = (dbeta * gK2)[..., None] * ev
        sym = Jbar @ np.swapaxes(K, -1, -2) + np.swapaxes(K, -1, -2) @ Jbar
        for k in range(3):
            Ek = -_LEVI[:, :, k]
            out_e[..., k] += 0.5 * np.sum(Jbar * Ek, axis=(-2, -1))
            out_e[..., k] += beta * np.sum(sym * Ek, axis=(-2, -1))
        return out_e

    return ad.custom("so3_jrinv", out, (e,), (vjp,))
