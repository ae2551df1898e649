"""3D Gaussian primitives and motion-guided density control.

Per-joint motion factors ``(S, R_mode)`` shape new Gaussians during
densification: the normalized concentration ``S / max|S|`` stretches the
displacement sampler and rescales the child, ``R_mode`` rotates it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import kinematics, so3

MIN_SCALE = 1e-8
SPLIT_FACTOR = 1.6
MODE_THRESHOLD = 0.01
PRUNE_OPACITY = 0.005
SAMPLE_FLOOR = 1e-12
CONCENTRATION_FLOOR = 1e-3

TAG_GRADIENT = "gradient"
TAG_UID = "uid"


class DegenerateScaleError(ValueError):
    """A Gaussian scale component is at or below ``MIN_SCALE``."""


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True, eq=False)
class Gaussian3D:
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        pos = np.array(self.position, dtype=float).reshape(3)
        rot = so3.as_rotation(np.array(self.rotation, dtype=float).reshape(3, 3), tol=1e-6)
        scale = np.array(self.scale, dtype=float).reshape(3)
        color = np.array(self.color, dtype=float).reshape(3)
        if np.any(scale <= MIN_SCALE):
            raise DegenerateScaleError(f"scale {scale.tolist()} has a component <= {MIN_SCALE}")
        if not 0.0 < self.opacity <= 1.0:
            raise ValueError(f"opacity {self.opacity} outside (0, 1]")
        if np.any(color < 0.0) or np.any(color > 1.0):
            raise ValueError(f"color {color.tolist()} outside [0, 1]")
        for name, val in (("position", pos), ("rotation", rot), ("scale", scale), ("color", color)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "opacity", float(self.opacity))


def covariance(g: Gaussian3D) -> np.ndarray:
    """``R_g S_g^T S_g R_g^T`` with ``S_g = diag(scale)``."""
    m = g.rotation * g.scale
    return m @ m.T


def covariances(rotations, scales) -> np.ndarray:
    m = np.asarray(rotations) * np.asarray(scales)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def covariance_inverse_det(g: Gaussian3D):
    """Inverse and determinant from the factors: ``R S^-1 S^-1 R^T`` and ``(s1 s2 s3)^2``."""
    if np.any(g.scale <= MIN_SCALE):
        raise DegenerateScaleError(f"scale {g.scale.tolist()} has a component <= {MIN_SCALE}")
    m = g.rotation / g.scale
    return m @ m.T, float(np.prod(g.scale) ** 2)


def normalize_concentration(s) -> np.ndarray:
    """``|S| / max|S|`` floored at ``CONCENTRATION_FLOOR``; all-zero ``S`` gives ones."""
    s = np.abs(np.asarray(s, dtype=float))
    top = s.max()
    if top == 0.0:
        return np.ones(3)
    return np.maximum(s / top, CONCENTRATION_FLOOR)


def perceptual_covariance(g: Gaussian3D, s_factor) -> np.ndarray:
    """Target covariance of the displacement sampler, ``R_g diag(|S| s_g)^2 R_g^T``."""
    m = g.rotation * (np.maximum(np.abs(np.asarray(s_factor, dtype=float)), SAMPLE_FLOOR) * g.scale)
    return m @ m.T


def density_perceptual_sample(g: Gaussian3D, s_factor, rng_seed, n: int | None = None) -> np.ndarray:
    """Displacement(s) from the zero-mean Gaussian with :func:`perceptual_covariance`.

    ``s_factor`` is used as given (absolute values); pass a normalized factor
    to keep displacements on the Gaussian's own length scale.
    """
    rng = _rng(rng_seed)
    std = np.maximum(np.abs(np.asarray(s_factor, dtype=float)), SAMPLE_FLOOR) * g.scale
    z = rng.standard_normal((1 if n is None else n, 3))
    dx = (z * std) @ g.rotation.T
    return dx[0] if n is None else dx


def clone_with_motion(g: Gaussian3D, s_factor, r_mode, rng_seed) -> Gaussian3D:
    """Clone ``g`` displaced by the perceptual sampler, scaled by ``S`` and rotated by ``R_mode``."""
    rng = _rng(rng_seed)
    s_hat = normalize_concentration(s_factor)
    dx = density_perceptual_sample(g, s_hat, rng)
    return Gaussian3D(
        position=g.position + dx,
        rotation=np.asarray(r_mode, dtype=float) @ g.rotation,
        scale=s_hat * g.scale,
        opacity=g.opacity,
        color=g.color,
    )


def split_with_motion(g: Gaussian3D, s_factor, r_mode, rng_seed, split_factor: float = SPLIT_FACTOR):
    """Two children at independent displacements, scale ``S * s_g / split_factor``."""
    rng = _rng(rng_seed)
    s_hat = normalize_concentration(s_factor)
    rot = np.asarray(r_mode, dtype=float) @ g.rotation
    children = []
    for _ in range(2):
        dx = density_perceptual_sample(g, s_hat, rng)
        children.append(Gaussian3D(g.position + dx, rot, s_hat * g.scale / split_factor, g.opacity, g.color))
    return children[0], children[1]


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Structure-of-arrays Gaussian set with per-Gaussian joint binding weights."""

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    binding: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = pos.shape[0]
        rot = np.asarray(self.rotations, dtype=float).reshape(n, 3, 3)
        scale = np.asarray(self.scales, dtype=float).reshape(n, 3)
        opac = np.asarray(self.opacities, dtype=float).reshape(n)
        color = np.asarray(self.colors, dtype=float).reshape(n, 3)
        bind = np.asarray(self.binding, dtype=float)
        if bind.ndim != 2 or bind.shape[0] != n:
            raise ValueError(f"binding must have shape ({n}, joints), got {bind.shape}")
        if n and not so3.is_rotation(rot, tol=1e-6):
            raise so3.InvalidRotationError("cloud contains a non-rotation orientation")
        if np.any(scale <= MIN_SCALE):
            raise DegenerateScaleError("cloud contains a scale component <= MIN_SCALE")
        if np.any(opac <= 0.0) or np.any(opac > 1.0):
            raise ValueError("opacities must lie in (0, 1]")
        if np.any(color < 0.0) or np.any(color > 1.0):
            raise ValueError("colors must lie in [0, 1]")
        if n and np.any(np.abs(bind.sum(axis=1) - 1.0) > kinematics.WEIGHT_SUM_TOL):
            raise ValueError("binding rows must sum to 1")
        for name, val in (("positions", pos), ("rotations", rot), ("scales", scale),
                          ("opacities", opac), ("colors", color), ("binding", bind)):
            object.__setattr__(self, name, val)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def joint_count(self) -> int:
        return self.binding.shape[1]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.positions[i], self.rotations[i], self.scales[i],
                          float(self.opacities[i]), self.colors[i])

    def take(self, index) -> "GaussianCloud":
        index = np.asarray(index)
        return GaussianCloud(self.positions[index], self.rotations[index], self.scales[index],
                             self.opacities[index], self.colors[index], self.binding[index])

    def dominant_joints(self) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest joint index
        return np.argmax(self.binding, axis=1)

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D], binding) -> "GaussianCloud":
        gs = list(gaussians)
        binding = np.asarray(binding, dtype=float)
        if not gs:
            return cls.empty(binding.shape[-1] if binding.ndim == 2 else 1)
        binding = binding.reshape(len(gs), -1)
        return cls(
            np.array([g.position for g in gs]),
            np.array([g.rotation for g in gs]),
            np.array([g.scale for g in gs]),
            np.array([g.opacity for g in gs]),
            np.array([g.color for g in gs]),
            binding,
        )

    @classmethod
    def empty(cls, joint_count: int = 1) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, 3)), np.zeros((0, joint_count)))

    @staticmethod
    def concat(clouds: Iterable["GaussianCloud"]) -> "GaussianCloud":
        cs = list(clouds)
        return GaussianCloud(
            np.concatenate([c.positions for c in cs]),
            np.concatenate([c.rotations for c in cs]),
            np.concatenate([c.scales for c in cs]),
            np.concatenate([c.opacities for c in cs]),
            np.concatenate([c.colors for c in cs]),
            np.concatenate([c.binding for c in cs]),
        )


@dataclass(frozen=True)
class DensifyCandidates:
    """Gaussian indices selected for densification, each with a trigger tag."""

    tags: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        for i, tag in self.tags.items():
            if tag not in (TAG_GRADIENT, TAG_UID):
                raise ValueError(f"candidate {i}: unknown trigger tag {tag!r}")
        object.__setattr__(self, "tags", dict(sorted((int(i), t) for i, t in self.tags.items())))

    @classmethod
    def from_indices(cls, indices, tag: str) -> "DensifyCandidates":
        idx = [int(i) for i in np.asarray(indices).ravel()]
        if len(set(idx)) != len(idx):
            raise ValueError("candidate indices contain duplicates")
        return cls({i: tag for i in idx})

    def union(self, other: "DensifyCandidates") -> "DensifyCandidates":
        """Merge two sets; an index present in both keeps the ``uid`` tag."""
        merged = dict(self.tags)
        for i, tag in other.tags.items():
            if i not in merged or tag == TAG_UID:
                merged[i] = tag
        return DensifyCandidates(merged)

    @property
    def indices(self) -> np.ndarray:
        return np.fromiter(self.tags.keys(), dtype=int, count=len(self.tags))

    def __len__(self) -> int:
        return len(self.tags)

    def count(self, tag: str) -> int:
        return sum(1 for t in self.tags.values() if t == tag)

    def check(self, size: int) -> None:
        idx = self.indices
        if idx.size and (idx.min() < 0 or idx.max() >= size):
            raise IndexError(f"candidate index out of range for a cloud of {size} Gaussians")


def densify(cloud: GaussianCloud, candidates: DensifyCandidates, factors: kinematics.MotionFactors,
            mode_threshold: float = MODE_THRESHOLD, rng_seed=0,
            split_factor: float = SPLIT_FACTOR) -> GaussianCloud:
    """Clone or split every candidate under its dominant joint's motion factors.

    Gaussians whose largest scale exceeds ``mode_threshold`` are split (the
    parent is removed), the rest are cloned. Surviving originals keep their
    order; new Gaussians follow in candidate-index order.
    """
    candidates.check(len(cloud))
    if not len(candidates):
        return cloud
    rng = _rng(rng_seed)
    joints = cloud.dominant_joints()
    keep = np.ones(len(cloud), dtype=bool)
    born: list[Gaussian3D] = []
    born_binding: list[np.ndarray] = []
    for i in candidates.indices:
        g = cloud[i]
        j = joints[i]
        s_factor, r_mode = factors.S[j], factors.R_mode[j]
        if g.scale.max() > mode_threshold:
            children = split_with_motion(g, s_factor, r_mode, rng, split_factor)
            keep[i] = False
        else:
            children = (clone_with_motion(g, s_factor, r_mode, rng),)
        born.extend(children)
        born_binding.extend([cloud.binding[i]] * len(children))
    new = GaussianCloud.from_gaussians(born, np.array(born_binding))
    return GaussianCloud.concat([cloud.take(np.flatnonzero(keep)), new])


def prune(cloud: GaussianCloud, min_opacity: float = PRUNE_OPACITY) -> GaussianCloud:
    """Drop Gaussians whose opacity is below ``min_opacity``."""
    keep = cloud.opacities >= min_opacity
    return cloud if keep.all() else cloud.take(np.flatnonzero(keep))


def articulate(cloud: GaussianCloud, transforms: kinematics.JointTransforms) -> GaussianCloud:
    """Skin positions with the binding weights; rotate each Gaussian by its dominant joint."""
    if cloud.joint_count != transforms.G0.shape[0]:
        raise ValueError(f"cloud binds {cloud.joint_count} joints, transforms have {transforms.G0.shape[0]}")
    if not len(cloud):
        return cloud
    pos = kinematics.lbs_skin(cloud.positions, cloud.binding, transforms)
    rot = transforms.G0[cloud.dominant_joints()] @ cloud.rotations
    return GaussianCloud(pos, rot, cloud.scales, cloud.opacities, cloud.colors, cloud.binding)


def invert_transforms(transforms: kinematics.JointTransforms) -> kinematics.JointTransforms:
    """Per-joint inverse rigid transforms ``(G0^T, -G0^T G1)``."""
    g0t = np.swapaxes(transforms.G0, -1, -2)
    return kinematics.JointTransforms(g0t, -np.einsum("kij,kj->ki", g0t, transforms.G1))
