"""Rotation-group primitives.

Everything here works on plain ``numpy`` arrays. Functions that take a
3-vector or a 3x3 matrix also accept stacks (``(..., 3)`` / ``(..., 3, 3)``)
and broadcast over the leading axes.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

ROTATION_TOL = 1e-9
PI_SIGN_TOL = 1e-10

_PAIRS = ((0, 1), (0, 2), (1, 2))


class InvalidRotationError(ValueError):
    """Raised when a matrix is not an element of SO(3)."""


class AxisAngle(NamedTuple):
    axis: np.ndarray
    angle: np.ndarray | float


class ProperSvd(NamedTuple):
    """``m = U @ diag(S) @ V.T`` with ``det(U) = det(V) = +1``.

    ``S`` is sorted so that ``s1 >= s2 >= |s3|``; only ``s3`` may be negative.
    """

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix ``W`` with ``W @ u == cross(v, u)``."""
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    return np.stack(
        [
            np.stack([o, -z, y], axis=-1),
            np.stack([z, o, -x], axis=-1),
            np.stack([-y, x, o], axis=-1),
        ],
        axis=-2,
    )


def vee(w) -> np.ndarray:
    """Inverse of :func:`hat` (reads the antisymmetric part only)."""
    w = np.asarray(w, dtype=float)
    return 0.5 * np.stack(
        [
            w[..., 2, 1] - w[..., 1, 2],
            w[..., 0, 2] - w[..., 2, 0],
            w[..., 1, 0] - w[..., 0, 1],
        ],
        axis=-1,
    )


def exp_so3(axis, angle) -> np.ndarray:
    """Rodrigues' formula ``I + sin(t) K + (1 - cos(t)) K^2`` with ``K = hat(axis)``."""
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    k = hat(axis)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def exp_map(rotvec) -> np.ndarray:
    """Rotation matrix of a rotation vector ``angle * axis``."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1)
    safe = np.where(angle > 0.0, angle, 1.0)
    axis = np.where((angle > 0.0)[..., None], rotvec / safe[..., None], [1.0, 0.0, 0.0])
    return exp_so3(axis, angle)


def _fix_axis_sign(axis):
    # largest-magnitude component positive
    idx = np.argmax(np.abs(axis), axis=-1)
    lead = np.take_along_axis(axis, idx[..., None], axis=-1)
    return np.where(lead < 0.0, -axis, axis)


def log_so3(r) -> AxisAngle:
    """Axis-angle of a rotation, angle in ``[0, pi]``.

    The identity maps to axis ``(1, 0, 0)``. At exactly ``pi`` the axis sign
    is chosen so its largest-magnitude component is positive.
    """
    r = np.asarray(r, dtype=float)
    w = vee(r)  # sin(t) * axis
    sin_t = np.linalg.norm(w, axis=-1)
    cos_t = 0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0)
    angle = np.arctan2(sin_t, np.clip(cos_t, -1.0, 1.0))

    safe = np.where(sin_t > 0.0, sin_t, 1.0)
    axis = np.where((sin_t > 0.0)[..., None], w / safe[..., None], [1.0, 0.0, 0.0])

    # Near pi the antisymmetric part vanishes; use (1 - cos t) a a^T instead.
    near_pi = cos_t < -0.99
    if np.any(near_pi):
        sym = 0.5 * (r + np.swapaxes(r, -1, -2)) - cos_t[..., None, None] * np.eye(3)
        col = np.argmax(np.linalg.norm(sym, axis=-2), axis=-1)
        dom = np.take_along_axis(sym, col[..., None, None], axis=-1)[..., 0]
        dom = dom / np.linalg.norm(dom, axis=-1, keepdims=True)
        dom = _fix_axis_sign(dom)
        # the antisymmetric part only carries a usable sign above rounding noise;
        # below that the two signs differ by less than 1e-9 and the convention decides
        agree = np.sum(dom * w, axis=-1)
        dom = np.where(((agree < 0.0) & (sin_t > PI_SIGN_TOL))[..., None], -dom, dom)
        axis = np.where(near_pi[..., None], dom, axis)
    if np.ndim(angle) == 0:
        return AxisAngle(axis, float(angle))
    return AxisAngle(axis, angle)


def log_map(r) -> np.ndarray:
    """Rotation vector ``angle * axis`` of a rotation."""
    aa = log_so3(r)
    return aa.axis * np.asarray(aa.angle)[..., None]


def is_rotation(m, tol: float = ROTATION_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3) or not np.all(np.isfinite(m)):
        return False
    eye_err = np.abs(np.swapaxes(m, -1, -2) @ m - np.eye(3)).max()
    det_err = np.abs(np.linalg.det(m) - 1.0).max()
    return bool(eye_err <= tol and det_err <= tol)


def as_rotation(m, tol: float = ROTATION_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if not is_rotation(m, tol):
        raise InvalidRotationError("matrix is not a rotation (R^T R != I or det != 1)")
    return m


def _jacobi_svd(a, tol: float = 1e-12, max_sweeps: int = 60):
    """One-sided (Hestenes) Jacobi SVD of a stack of 3x3 matrices.

    Returns ``(A V, V)``: the columns of ``A V`` are mutually orthogonal and
    their norms are the singular values.
    """
    work = np.array(a, dtype=float).reshape(-1, 3, 3)
    v = np.broadcast_to(np.eye(3), work.shape).copy()
    for _ in range(max_sweeps):
        rotated = False
        for p, q in _PAIRS:
            ap = work[:, :, p].copy()
            aq = work[:, :, q].copy()
            alpha = np.einsum("ij,ij->i", ap, ap)
            beta = np.einsum("ij,ij->i", aq, aq)
            gamma = np.einsum("ij,ij->i", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            # tangent of the rotation angle, written without dividing by gamma
            d, e = beta - alpha, 2.0 * g
            t = np.where(d >= 0.0, 1.0, -1.0) * e / (np.abs(d) + np.hypot(d, e))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)[:, None]
            s = np.where(active, c[:, 0] * t, 0.0)[:, None]
            work[:, :, p] = c * ap - s * aq
            work[:, :, q] = s * ap + c * aq
            vp = v[:, :, p].copy()
            vq = v[:, :, q].copy()
            v[:, :, p] = c * vp - s * vq
            v[:, :, q] = s * vp + c * vq
        if not rotated:
            break
    return work, v


def _unit_orthogonal(u):
    # any unit vector perpendicular to each row of u
    pick = np.argmin(np.abs(u), axis=-1)
    e = np.eye(3)[pick]
    w = e - np.sum(u * e, axis=-1, keepdims=True) * u
    return w / np.linalg.norm(w, axis=-1, keepdims=True)


def svd3(m):
    """Ordinary SVD ``m = U' diag(S') V'^T`` with ``S'`` descending and non-negative.

    ``U'`` and ``V'`` are orthogonal but may be reflections. Columns of ``U'``
    belonging to vanishing singular values are completed to an orthonormal
    basis.
    """
    m = np.asarray(m, dtype=float)
    batch = m.shape[:-2]
    # work at unit scale so squared column norms neither underflow nor overflow
    scale = np.abs(m.reshape(-1, 9)).max(axis=1)
    scale = np.where(scale > 0.0, scale, 1.0)
    av, v = _jacobi_svd(m.reshape(-1, 3, 3) / scale[:, None, None])
    norms = np.linalg.norm(av, axis=1)
    order = np.argsort(-norms, axis=1, kind="stable")
    av = np.take_along_axis(av, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    norms = np.take_along_axis(norms, order, axis=1)

    s1, s2 = norms[:, 0], norms[:, 1]
    tiny = np.finfo(float).tiny
    u1 = np.where((s1 > tiny)[:, None], av[:, :, 0] / np.maximum(s1, tiny)[:, None], [1.0, 0.0, 0.0])
    small2 = s2 <= 1e-13 * s1 + tiny
    u2 = np.where(small2[:, None], _unit_orthogonal(u1), av[:, :, 1] / np.maximum(s2, tiny)[:, None])
    u2 = u2 - np.einsum("ij,ij->i", u1, u2)[:, None] * u1
    u2 /= np.linalg.norm(u2, axis=-1, keepdims=True)
    n3 = np.cross(u1, u2)
    proj = np.einsum("ij,ij->i", n3, av[:, :, 2])
    sign3 = np.where(proj < 0.0, -1.0, 1.0)
    u3 = sign3[:, None] * n3
    s3 = np.minimum(np.abs(proj), s2)

    u = np.stack([u1, u2, u3], axis=-1)
    s = np.stack([s1, s2, s3], axis=-1) * scale[:, None]
    return u.reshape(batch + (3, 3)), s.reshape(batch + (3,)), v.reshape(batch + (3, 3))


def proper_svd(m) -> ProperSvd:
    """SVD with both factors in SO(3); reflections are folded into ``s3``.

    ``U = U' diag(1, 1, det U')``, ``V = V' diag(1, 1, det V')`` and
    ``s3 = det(U' V') s3'``.
    """
    u, s, v = svd3(m)
    du = np.sign(np.linalg.det(u))
    dv = np.sign(np.linalg.det(v))
    u = u.copy()
    v = v.copy()
    s = s.copy()
    u[..., :, 2] *= du[..., None]
    v[..., :, 2] *= dv[..., None]
    s[..., 2] *= du * dv
    return ProperSvd(u, s, v)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def matrix_to_quat(r) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` (Shepperd's method)."""
    r = np.asarray(r, dtype=float)
    batch = r.shape[:-2]
    r = r.reshape(-1, 3, 3)
    tr = np.trace(r, axis1=-2, axis2=-1)
    diag = np.diagonal(r, axis1=-2, axis2=-1)
    cand = np.stack([tr, diag[:, 0], diag[:, 1], diag[:, 2]], axis=-1)
    pick = np.argmax(cand, axis=-1)
    q = np.empty((r.shape[0], 4))
    for k in range(4):
        sel = pick == k
        if not sel.any():
            continue
        m = r[sel]
        if k == 0:
            t = 2.0 * np.sqrt(1.0 + tr[sel])
            q[sel] = np.stack([0.25 * t, (m[:, 2, 1] - m[:, 1, 2]) / t,
                               (m[:, 0, 2] - m[:, 2, 0]) / t, (m[:, 1, 0] - m[:, 0, 1]) / t], axis=-1)
        elif k == 1:
            t = 2.0 * np.sqrt(1.0 + m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2])
            q[sel] = np.stack([(m[:, 2, 1] - m[:, 1, 2]) / t, 0.25 * t,
                               (m[:, 0, 1] + m[:, 1, 0]) / t, (m[:, 0, 2] + m[:, 2, 0]) / t], axis=-1)
        elif k == 2:
            t = 2.0 * np.sqrt(1.0 - m[:, 0, 0] + m[:, 1, 1] - m[:, 2, 2])
            q[sel] = np.stack([(m[:, 0, 2] - m[:, 2, 0]) / t, (m[:, 0, 1] + m[:, 1, 0]) / t,
                               0.25 * t, (m[:, 1, 2] + m[:, 2, 1]) / t], axis=-1)
        else:
            t = 2.0 * np.sqrt(1.0 - m[:, 0, 0] - m[:, 1, 1] + m[:, 2, 2])
            q[sel] = np.stack([(m[:, 1, 0] - m[:, 0, 1]) / t, (m[:, 0, 2] + m[:, 2, 0]) / t,
                               (m[:, 1, 2] + m[:, 2, 1]) / t, 0.25 * t], axis=-1)
    q = np.where(q[:, :1] < 0.0, -q, q)
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return q.reshape(batch + (4,))


def uniform_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` Haar-uniform rotations from three uniform variates each (Shoemake)."""
    u = rng.random((n, 3))
    return shoemake(u)


def shoemake(u) -> np.ndarray:
    """Map points of the unit cube to SO(3), pushing Lebesgue measure to Haar."""
    u = np.asarray(u, dtype=float)
    a = np.sqrt(1.0 - u[..., 0])
    b = np.sqrt(u[..., 0])
    t1 = 2.0 * np.pi * u[..., 1]
    t2 = 2.0 * np.pi * u[..., 2]
    q = np.stack([b * np.cos(t2), a * np.sin(t1), a * np.cos(t1), b * np.sin(t2)], axis=-1)
    return quat_to_matrix(q)


def rotation_about(axis_index: int, angle) -> np.ndarray:
    """Rotation by ``angle`` about a coordinate axis (0 = x, 1 = y, 2 = z)."""
    return exp_so3(np.eye(3)[axis_index], angle)
