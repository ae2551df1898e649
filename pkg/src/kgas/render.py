"""Forward splatting: perspective projection and front-to-back alpha compositing.

Pixel ``(col, row)`` samples the image plane at integer coordinates
``(u, v) = (col, row)``. Colors in :class:`ImageRGBA` are premultiplied by
alpha, i.e. the render composited over black.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import Gaussian3D, GaussianCloud

NEAR_PLANE = 0.01
LOWPASS = 0.3
CULL_SIGMA = 4.0
MIN_TRANSMITTANCE = 1e-4


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera looking down +z of its frame; ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=float))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(rot, -rot @ eye, fx, fy,
                   (width - 1) / 2 if cx is None else cx,
                   (height - 1) / 2 if cy is None else cy, width, height)


@dataclass(frozen=True, eq=False)
class Splat2D:
    mean: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass(frozen=True, eq=False)
class ImageRGBA:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray

    @property
    def width(self) -> int:
        return self.alpha.shape[1]

    @property
    def height(self) -> int:
        return self.alpha.shape[0]

    @property
    def rgba(self) -> np.ndarray:
        return np.concatenate([self.rgb, self.alpha[..., None]], axis=-1)

    @classmethod
    def from_rgb(cls, rgb, alpha=None) -> "ImageRGBA":
        rgb = np.asarray(rgb, dtype=float)
        a = np.ones(rgb.shape[:2]) if alpha is None else np.asarray(alpha, dtype=float)
        return cls(rgb, a, np.where(a > 0, 0.0, np.inf))


def _project_arrays(positions, cov3d, cam: Camera):
    pc = positions @ cam.rotation.T + cam.translation
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    front = z > NEAR_PLANE
    zs = np.where(front, z, 1.0)
    j = np.zeros((len(pc), 2, 3))
    j[:, 0, 0] = cam.fx / zs
    j[:, 0, 2] = -cam.fx * x / zs**2
    j[:, 1, 1] = cam.fy / zs
    j[:, 1, 2] = -cam.fy * y / zs**2
    jw = j @ cam.rotation
    cov2d = jw @ cov3d @ np.swapaxes(jw, -1, -2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    mean = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=-1)
    ru = CULL_SIGMA * np.sqrt(cov2d[:, 0, 0])
    rv = CULL_SIGMA * np.sqrt(cov2d[:, 1, 1])
    inside = ((mean[:, 0] + ru >= 0) & (mean[:, 0] - ru <= cam.width - 1)
              & (mean[:, 1] + rv >= 0) & (mean[:, 1] - rv <= cam.height - 1))
    return mean, cov2d, z, front & inside


def project(g: Gaussian3D, cam: Camera) -> Splat2D | None:
    """Screen-space footprint ``J W Sigma W^T J^T`` plus the low-pass floor; ``None`` if culled."""
    m = g.rotation * g.scale
    mean, cov2d, depth, keep = _project_arrays(g.position[None], (m @ m.T)[None], cam)
    if not keep[0]:
        return None
    return Splat2D(mean[0], cov2d[0], float(depth[0]), g.color, g.opacity)


def _composite_arrays(means, covs, depths, colors, opacities, width: int, height: int) -> ImageRGBA:
    rgb = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    dacc = np.zeros((height, width))
    order = np.argsort(depths, kind="stable")
    for i in order:
        mu = means[i]
        cov = covs[i]
        ru = CULL_SIGMA * np.sqrt(cov[0, 0])
        rv = CULL_SIGMA * np.sqrt(cov[1, 1])
        x0 = max(0, int(np.ceil(mu[0] - ru)))
        x1 = min(width - 1, int(np.floor(mu[0] + ru)))
        y0 = max(0, int(np.ceil(mu[1] - rv)))
        y1 = min(height - 1, int(np.floor(mu[1] + rv)))
        if x0 > x1 or y0 > y1:
            continue
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
        ia, ib, ic = cov[1, 1] / det, -cov[0, 1] / det, cov[0, 0] / det
        dx = np.arange(x0, x1 + 1) - mu[0]
        dy = (np.arange(y0, y1 + 1) - mu[1])[:, None]
        power = -0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
        alpha = opacities[i] * np.exp(power)
        t = trans[y0:y1 + 1, x0:x1 + 1]
        w = np.where(t >= MIN_TRANSMITTANCE, t * alpha, 0.0)
        rgb[y0:y1 + 1, x0:x1 + 1] += w[..., None] * colors[i]
        dacc[y0:y1 + 1, x0:x1 + 1] += w * depths[i]
        trans[y0:y1 + 1, x0:x1 + 1] = t - w
    alpha = 1.0 - trans
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha > 0.0, dacc / alpha, np.inf)
    return ImageRGBA(np.minimum(rgb, 1.0), alpha, depth)


def composite(splats, width: int, height: int) -> ImageRGBA:
    """Depth-sorted (ties by list position) front-to-back blending of splats."""
    splats = list(splats)
    if not splats:
        return _composite_arrays(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0),
                                 np.zeros((0, 3)), np.zeros(0), width, height)
    return _composite_arrays(
        np.array([s.mean for s in splats], dtype=float),
        np.array([s.cov2d for s in splats], dtype=float),
        np.array([s.depth for s in splats], dtype=float),
        np.array([s.color for s in splats], dtype=float),
        np.array([s.opacity for s in splats], dtype=float),
        width, height,
    )


def render(cloud: GaussianCloud, cam: Camera) -> ImageRGBA:
    """Project every Gaussian and composite the visible ones."""
    if not len(cloud):
        return composite([], cam.width, cam.height)
    m = cloud.rotations * cloud.scales[:, None, :]
    mean, cov2d, depth, keep = _project_arrays(cloud.positions, m @ np.swapaxes(m, -1, -2), cam)
    idx = np.flatnonzero(keep)
    return _composite_arrays(mean[idx], cov2d[idx], depth[idx], cloud.colors[idx],
                             cloud.opacities[idx], cam.width, cam.height)


def splat_footprints(cloud: GaussianCloud, cam: Camera):
    """``(means, cov2d, visible)`` of every Gaussian, for image-space bookkeeping."""
    m = cloud.rotations * cloud.scales[:, None, :]
    mean, cov2d, _, keep = _project_arrays(cloud.positions, m @ np.swapaxes(m, -1, -2), cam)
    return mean, cov2d, keep
