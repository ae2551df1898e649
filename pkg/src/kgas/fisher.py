"""Matrix-Fisher distribution on SO(3).

The density is ``exp(tr(F^T R)) / c(F)`` with respect to the normalized Haar
measure, so ``c(0) = 1``. ``c`` only depends on the proper singular values of
``F``; it is evaluated by quadrature over ZXZ Euler angles and cached per
singular-value triple.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from . import so3

MAX_SINGULAR_VALUE = 500.0
MIN_ACCEPTANCE = 1e-6

_GL_START = 32
_GL_MAX = 2048
_GL_RTOL = 1e-13
_SAMPLE_BATCH = 1 << 18

# (log c, E[Q] diagonal) keyed by the singular-value triple. Plain dict:
# inserts are atomic and values deterministic, so concurrent writers agree.
_NORMALIZER_CACHE: dict[tuple[float, float, float], tuple[float, np.ndarray]] = {}


class ConcentrationOverflowError(ValueError):
    """Singular values too large for the normalizer quadrature."""


class ConcentrationTooHighError(ValueError):
    """Rejection sampling from the uniform proposal would almost never accept."""


@dataclass(frozen=True, eq=False)
class FisherParams:
    """The 3x3 parameter matrix of a matrix-Fisher distribution."""

    F: np.ndarray

    def __post_init__(self):
        f = np.array(self.F, dtype=float)
        if f.shape != (3, 3):
            raise ValueError(f"Fisher parameter must be 3x3, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("Fisher parameter has non-finite entries")
        f.setflags(write=False)
        object.__setattr__(self, "F", f)

    @cached_property
    def svd(self) -> so3.ProperSvd:
        return so3.proper_svd(self.F)

    @property
    def singular_values(self) -> np.ndarray:
        return self.svd.S


class ConcentrationProfile(NamedTuple):
    axes: np.ndarray
    kappas: np.ndarray


def as_params(p) -> FisherParams:
    return p if isinstance(p, FisherParams) else FisherParams(np.asarray(p, dtype=float))


def _trapezoid_nodes(a_max: float) -> np.ndarray:
    n = int(np.ceil(np.sqrt(80.0 * a_max))) + 17
    n += (n + 1) % 2  # odd: the (alpha, gamma) grid maps one-to-one onto (alpha+gamma, alpha-gamma)
    return np.cos(2.0 * np.pi * np.arange(n) / n)


def _circle_moments(a: np.ndarray, cos_nodes: np.ndarray):
    """``log mean exp(a cos t)`` and ``mean cos(t) exp(a cos t) / mean exp(a cos t)``."""
    e = np.exp(np.multiply.outer(a, cos_nodes - 1.0))
    m0 = e.mean(axis=-1)
    m1 = (e * cos_nodes).mean(axis=-1)
    return a + np.log(m0), m1 / m0


def _quadrature(s: np.ndarray, n_u: int, cos_nodes: np.ndarray):
    s1, s2, s3 = s
    x, w = np.polynomial.legendre.leggauss(n_u)
    # With u = cos(beta), phi = alpha + gamma, psi = alpha - gamma:
    # tr(diag(s) R) = A(u) cos(phi) + B(u) cos(psi) + s3 u
    a = 0.5 * (s1 + s2) * (1.0 + x)
    b = 0.5 * (s1 - s2) * (1.0 - x)
    la, ra = _circle_moments(a, cos_nodes)
    lb, rb = _circle_moments(b, cos_nodes)
    log_f = la + lb + s3 * x
    peak = log_f.max()
    wf = w * np.exp(log_f - peak)
    total = wf.sum()
    log_c = peak + np.log(0.5 * total)
    q11 = 0.5 * ((1.0 + x) * ra + (1.0 - x) * rb)
    q22 = 0.5 * ((1.0 + x) * ra - (1.0 - x) * rb)
    eq = np.array([wf @ q11, wf @ q22, wf @ x]) / total
    return log_c, eq


def _normalizer(s) -> tuple[float, np.ndarray]:
    s = np.asarray(s, dtype=float)
    if np.max(np.abs(s)) > MAX_SINGULAR_VALUE:
        raise ConcentrationOverflowError(
            f"singular values {s.tolist()} exceed {MAX_SINGULAR_VALUE}; normalizer would overflow"
        )
    key = (float(s[0]), float(s[1]), float(s[2]))
    hit = _NORMALIZER_CACHE.get(key)
    if hit is not None:
        return hit
    if not np.any(s):
        result = (0.0, np.zeros(3))
    else:
        cos_nodes = _trapezoid_nodes(s[0] + s[1])
        n_u = _GL_START
        prev = _quadrature(s, n_u, cos_nodes)
        while n_u < _GL_MAX:
            n_u *= 2
            cur = _quadrature(s, n_u, cos_nodes)
            done = abs(cur[0] - prev[0]) <= _GL_RTOL * (1.0 + abs(cur[0]))
            prev = cur
            if done:
                break
        result = (float(prev[0]), prev[1])
    _NORMALIZER_CACHE[key] = result
    return result


def log_normalizer_from_singular_values(s) -> float:
    """``log c`` for proper singular values ``s`` (``s3`` may be negative)."""
    return _normalizer(s)[0]


def log_normalizer(p) -> float:
    """``log`` of the integral of ``exp(tr(F^T R))`` over normalized Haar measure."""
    return _normalizer(as_params(p).singular_values)[0]


def mean_rotation(p) -> np.ndarray:
    """First moment ``E[R] = U E[Q] V^T``; ``E[Q]`` is diagonal."""
    p = as_params(p)
    u, s, v = p.svd
    eq = _normalizer(s)[1]
    return (u * eq) @ v.T


def mode(p) -> np.ndarray:
    """Most probable rotation ``U V^T``. The uniform case ``F = 0`` gives the identity."""
    p = as_params(p)
    if not np.any(p.F):
        return np.eye(3)
    u, _, v = p.svd
    return u @ v.T


def _trace_term(p: FisherParams, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    out = np.einsum("ij,...ij->...", p.F, r)
    return float(out) if out.ndim == 0 else out


def density(p, r):
    """Density of ``r`` (one rotation or a stack) w.r.t. normalized Haar measure."""
    p = as_params(p)
    return np.exp(_trace_term(p, r) - log_normalizer(p))


def nll(p, r):
    """Negative log-likelihood ``log c(F) - tr(F^T r)``."""
    p = as_params(p)
    return log_normalizer(p) - _trace_term(p, r)


def nll_grad(p, r) -> np.ndarray:
    """Gradient of :func:`nll` with respect to ``F``: ``E[R] - r``."""
    return mean_rotation(p) - np.asarray(r, dtype=float)


def _quaternion_form(f: np.ndarray) -> np.ndarray:
    # tr(F^T R(q)) = q^T K q for unit quaternions q = (w, x, y, z)
    t = np.trace(f)
    d = np.array([f[2, 1] - f[1, 2], f[0, 2] - f[2, 0], f[1, 0] - f[0, 1]])
    k = np.empty((4, 4))
    k[0, 0] = t
    k[0, 1:] = d
    k[1:, 0] = d
    k[1:, 1:] = (f + f.T) - t * np.eye(3)
    return k


def sample(p, rng_seed: int, n: int) -> np.ndarray:
    """``n`` i.i.d. draws, shape ``(n, 3, 3)``, by rejection from the uniform distribution.

    Proposals are Haar-uniform (Shoemake) and accepted with probability
    ``exp(tr(F^T R) - tr(F^T R_mode))``. The generator is Philox seeded with
    ``rng_seed``, so sequences are reproducible across platforms.
    """
    if n < 1:
        raise ValueError("sample count must be >= 1")
    p = as_params(p)
    s = p.singular_values
    peak = float(np.sum(s))
    acceptance = float(np.exp(log_normalizer(p) - peak))
    if acceptance < MIN_ACCEPTANCE:
        raise ConcentrationTooHighError(
            f"acceptance rate {acceptance:.3g} is below {MIN_ACCEPTANCE:g}; "
            "uniform-proposal rejection sampling needs concentrations of about 200 or less"
        )
    k = _quaternion_form(p.F)
    rng = np.random.Generator(np.random.Philox(rng_seed))
    # batch size depends on F only, so a longer request extends a shorter one
    batch = int(min(_SAMPLE_BATCH, max(1024, 4096 / acceptance)))
    kept = []
    total = 0
    while total < n:
        u = rng.random((batch, 3))
        a = np.sqrt(1.0 - u[:, 0])
        b = np.sqrt(u[:, 0])
        t1 = 2.0 * np.pi * u[:, 1]
        t2 = 2.0 * np.pi * u[:, 2]
        q = np.stack([b * np.cos(t2), a * np.sin(t1), a * np.cos(t1), b * np.sin(t2)], axis=-1)
        log_ratio = np.einsum("ni,ni->n", q @ k, q) - peak
        accept = rng.random(batch) < np.exp(np.minimum(log_ratio, 0.0))
        if accept.any():
            kept.append(q[accept])
            total += int(accept.sum())
    q = np.concatenate(kept)[:n]
    return so3.quat_to_matrix(q)


def concentration_profile(p) -> ConcentrationProfile:
    """Principal axes (columns of ``U``) and ``kappa_i = s_j + s_k`` for cyclic ``(i, j, k)``."""
    p = as_params(p)
    u, s, _ = p.svd
    kappas = np.array([s[1] + s[2], s[2] + s[0], s[0] + s[1]])
    return ConcentrationProfile(u, kappas)


def principal_rotation(p, axis_index: int, theta) -> np.ndarray:
    """``U exp(theta e_i^) V^T``: the mode rotated by ``theta`` about principal axis ``i`` (1-based)."""
    _check_axis_index(axis_index)
    p = as_params(p)
    u, _, v = p.svd
    return u @ so3.rotation_about(axis_index - 1, theta) @ v.T


def _check_axis_index(axis_index):
    if axis_index not in (1, 2, 3):
        raise ValueError(f"axis_index must be 1, 2 or 3, got {axis_index}")


def log_bessel_i0(kappa: float) -> float:
    """``log I0(kappa)`` via the periodic trapezoid rule."""
    kappa = float(kappa)
    nodes = _trapezoid_nodes(abs(kappa))
    return float(_circle_moments(np.asarray(kappa), nodes)[0])


def marginal_angle_density(p, axis_index: int, theta):
    """Angle density along ``theta -> U exp(theta e_i^) V^T``, normalized over the circle.

    Along that curve the matrix-Fisher density is ``e^{s_i} / c(S) *
    exp(kappa cos theta)`` with ``kappa = s_j + s_k``; normalizing over
    ``theta`` leaves the von Mises density ``exp(kappa cos theta) / (2 pi I0(kappa))``.
    """
    _check_axis_index(axis_index)
    kappa = concentration_profile(p).kappas[axis_index - 1]
    theta = np.asarray(theta, dtype=float)
    out = np.exp(kappa * np.cos(theta) - log_bessel_i0(kappa)) / (2.0 * np.pi)
    return float(out) if out.ndim == 0 else out


def twist_angle(rotations, axis) -> np.ndarray:
    """Twist angle of each rotation about ``axis`` (swing-twist decomposition)."""
    q = so3.matrix_to_quat(rotations)
    axis = np.asarray(axis, dtype=float)
    return 2.0 * np.arctan2(q[..., 1:] @ axis, q[..., 0])
