"""Synthetic rigged scenes used as desk-scale stand-ins for captured subjects.

Every limb is a capsule around a bone. Surface samples are bound to the
bone's joint, with a linear blend into the neighbouring joint near each end.
A scene carries a dense reference cloud, a sparse initial cloud (both in the
rest pose), a target pose, a camera framing the posed subject and per-joint
Fisher parameters ``KAPPA0 * R_pose``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import so3
from .gaussians import GaussianCloud, articulate
from .kinematics import KinematicTree, forward_kinematics, save_rig
from .plyio import write_cloud
from .render import Camera, render
from .imageio import write_pfm, write_pgm, write_ppm

SCENES = ("arm2", "chain4", "humanoid24", "creased_sheet")
KAPPA0 = 20.0
BLEND = 0.15
THICKNESS = 0.25

SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)


class UnknownSceneError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Bone:
    joint: int
    child: int | None
    start: np.ndarray
    end: np.ndarray
    radius: float
    color: np.ndarray


@dataclass(frozen=True, eq=False)
class Scene:
    name: str
    tree: KinematicTree
    pose: np.ndarray
    camera: Camera
    reference: GaussianCloud
    initial: GaussianCloud
    fisher_params: np.ndarray

    @property
    def rest_vertices(self) -> np.ndarray:
        return self.reference.positions

    @property
    def weights(self) -> np.ndarray:
        return self.reference.binding

    def posed_reference(self) -> GaussianCloud:
        return articulate(self.reference, forward_kinematics(self.tree, self.pose))


def _frame(axis: np.ndarray):
    a = axis / np.linalg.norm(axis)
    helper = np.eye(3)[np.argmin(np.abs(a))]
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1)
    return a, e1, np.cross(a, e1)


def _sample_capsule(bone: Bone, n: int, rng: np.random.Generator):
    """Uniform area samples: ``(points, normals, t along the bone)``."""
    axis = bone.end - bone.start
    length = float(np.linalg.norm(axis))
    a, e1, e2 = _frame(axis)
    r = bone.radius
    p_cyl = length / (length + 2.0 * r)
    on_cyl = rng.random(n) < p_cyl
    t = rng.random(n)
    phi = 2.0 * np.pi * rng.random(n)
    radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    along = d @ a
    at_end = along > 0
    normals = np.where(on_cyl[:, None], radial, d)
    centers = np.where(on_cyl[:, None], bone.start + t[:, None] * axis,
                       np.where(at_end[:, None], bone.end, bone.start))
    t = np.where(on_cyl, t, at_end.astype(float))
    return centers + r * normals, normals, t


def _texture(bone: Bone, t: np.ndarray, normals: np.ndarray) -> np.ndarray:
    stripes = 0.65 + 0.35 * np.cos(2.0 * np.pi * 3.0 * t)
    shade = 0.8 + 0.2 * normals[:, 1]
    return np.clip(bone.color * (stripes * shade)[:, None], 0.0, 1.0)


def _binding(tree: KinematicTree, bone: Bone, t: np.ndarray) -> np.ndarray:
    w = np.zeros((t.size, tree.joint_count))
    w[:, bone.joint] = 1.0
    if bone.child is not None:
        wc = 0.5 * np.clip((t - (1.0 - BLEND)) / BLEND, 0.0, 1.0)
        w[:, bone.child] += wc
        w[:, bone.joint] -= wc
    parent = tree.parent[bone.joint]
    if parent >= 0:
        wp = 0.5 * np.clip((BLEND - t) / BLEND, 0.0, 1.0)
        w[:, parent] += wp
        w[:, bone.joint] -= wp
    return w


def _disc_rotations(normals: np.ndarray) -> np.ndarray:
    helper = np.eye(3)[np.argmin(np.abs(normals), axis=1)]
    e1 = np.cross(normals, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(normals, e1)
    return np.stack([e1, e2, normals], axis=-1)


def _surface_cloud(tree: KinematicTree, bones, n: int, rng, sigma: float, opacity: float) -> GaussianCloud:
    areas = np.array([2 * np.pi * b.radius * np.linalg.norm(b.end - b.start) + 4 * np.pi * b.radius ** 2
                      for b in bones])
    counts = np.floor(n * areas / areas.sum()).astype(int)
    counts[: n - counts.sum()] += 1
    pos, rot, col, bind = [], [], [], []
    for bone, m in zip(bones, counts):
        p, nrm, t = _sample_capsule(bone, int(m), rng)
        pos.append(p)
        rot.append(_disc_rotations(nrm))
        col.append(_texture(bone, t, nrm))
        bind.append(_binding(tree, bone, t))
    count = int(counts.sum())
    return GaussianCloud(
        positions=np.concatenate(pos),
        rotations=np.concatenate(rot),
        scales=np.tile([sigma, sigma, sigma * THICKNESS], (count, 1)),
        opacities=np.full(count, opacity),
        colors=np.concatenate(col),
        binding=np.concatenate(bind),
    )


def _bones(tree: KinematicTree, radii, colors, leaf_tips: dict[int, np.ndarray]):
    bones = []
    for i in range(tree.joint_count):
        kids = tree.children(i)
        start = tree.rest_joints[i]
        targets = [(c, tree.rest_joints[c]) for c in kids] if kids else [(None, start + leaf_tips[i])]
        for child, end in targets:
            bones.append(Bone(i, child, start, np.asarray(end, dtype=float), radii[i],
                              np.asarray(colors[i % len(colors)], dtype=float)))
    return bones


PALETTE = ((0.85, 0.35, 0.25), (0.25, 0.55, 0.85), (0.35, 0.75, 0.35), (0.85, 0.75, 0.3),
           (0.65, 0.4, 0.8), (0.3, 0.75, 0.75))


def _frame_camera(points: np.ndarray, size: int) -> Camera:
    center = 0.5 * (points.min(axis=0) + points.max(axis=0))
    extent = float(np.max(points.max(axis=0) - points.min(axis=0)))
    dist = 2.5 * extent
    focal = 0.85 * size * dist / (extent * 1.2)
    return Camera.look_at(center + np.array([0.0, 0.0, dist]), center, [0.0, 1.0, 0.0],
                          focal, focal, size, size)


def _pose_from_rotvecs(k: int, rotvecs: dict[int, tuple[float, float, float]]) -> np.ndarray:
    pose = np.broadcast_to(np.eye(3), (k, 3, 3)).copy()
    for j, rv in rotvecs.items():
        pose[j] = so3.exp_map(np.asarray(rv, dtype=float))
    return pose


def _limb_scene(name: str, tree: KinematicTree, radii, leaf_tips, rotvecs, n_dense: int,
                seed: int, size: int) -> Scene:
    bones = _bones(tree, radii, PALETTE, leaf_tips)
    rng = np.random.Generator(np.random.Philox(seed))
    areas = sum(2 * np.pi * b.radius * np.linalg.norm(b.end - b.start) + 4 * np.pi * b.radius ** 2
                for b in bones)
    spacing = float(np.sqrt(areas / n_dense))
    reference = _surface_cloud(tree, bones, n_dense, rng, 0.6 * spacing, 0.9)
    initial = _surface_cloud(tree, bones, n_dense // 8, rng, 0.6 * spacing, 0.9)
    pose = _pose_from_rotvecs(tree.joint_count, rotvecs)
    posed = articulate(reference, forward_kinematics(tree, pose)).positions
    return Scene(name, tree, pose, _frame_camera(posed, size), reference, initial, KAPPA0 * pose)


def arm2(seed: int = 0) -> Scene:
    tree = KinematicTree([-1, 0], [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]])
    return _limb_scene("arm2", tree, radii=(0.07, 0.06), leaf_tips={1: np.array([0.45, 0.0, 0.0])},
                       rotvecs={0: (0.0, 0.0, 0.2), 1: (0.0, 0.0, np.deg2rad(70.0))},
                       n_dense=2000, seed=seed, size=96)


def chain4(seed: int = 0) -> Scene:
    tree = KinematicTree([-1, 0, 1, 2], [[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [0.6, 0.0, 0.0], [0.9, 0.0, 0.0]])
    return _limb_scene("chain4", tree, radii=(0.06, 0.055, 0.05, 0.045),
                       leaf_tips={3: np.array([0.3, 0.0, 0.0])},
                       rotvecs={1: (0.0, 0.0, 0.5), 2: (0.3, 0.0, 0.4), 3: (0.0, 0.2, -0.6)},
                       n_dense=3000, seed=seed, size=96)


HUMANOID_JOINTS = np.array([
    [0.0, 0.95, 0.0], [0.09, 0.86, 0.0], [-0.09, 0.86, 0.0], [0.0, 1.05, 0.0],
    [0.10, 0.48, 0.0], [-0.10, 0.48, 0.0], [0.0, 1.18, 0.0], [0.10, 0.08, 0.0],
    [-0.10, 0.08, 0.0], [0.0, 1.24, 0.0], [0.11, 0.02, 0.12], [-0.11, 0.02, 0.12],
    [0.0, 1.45, 0.0], [0.08, 1.38, 0.0], [-0.08, 1.38, 0.0], [0.0, 1.60, 0.0],
    [0.18, 1.40, 0.0], [-0.18, 1.40, 0.0], [0.45, 1.40, 0.0], [-0.45, 1.40, 0.0],
    [0.70, 1.40, 0.0], [-0.70, 1.40, 0.0], [0.78, 1.40, 0.0], [-0.78, 1.40, 0.0],
])


def humanoid24(seed: int = 0) -> Scene:
    tree = KinematicTree(SMPL_PARENTS, HUMANOID_JOINTS)
    radii = (0.11, 0.07, 0.07, 0.1, 0.05, 0.05, 0.11, 0.04, 0.04, 0.11, 0.035, 0.035,
             0.05, 0.05, 0.05, 0.09, 0.045, 0.045, 0.04, 0.04, 0.03, 0.03, 0.025, 0.025)
    tips = {10: np.array([0.0, 0.0, 0.08]), 11: np.array([0.0, 0.0, 0.08]), 15: np.array([0.0, 0.12, 0.0]),
            22: np.array([0.08, 0.0, 0.0]), 23: np.array([-0.08, 0.0, 0.0])}
    rotvecs = {1: (-0.3, 0.0, 0.05), 2: (0.2, 0.0, -0.05), 4: (0.5, 0.0, 0.0), 5: (0.2, 0.0, 0.0),
               16: (0.0, 0.0, -0.9), 17: (0.0, 0.0, 0.7), 18: (0.0, 0.8, 0.0), 19: (0.0, -0.4, 0.0),
               12: (0.1, 0.0, 0.0), 3: (0.05, 0.1, 0.0)}
    return _limb_scene("humanoid24", tree, radii, tips, rotvecs, n_dense=6000, seed=seed, size=128)


def sheet_grid(n_side: int = 20, rows: int = 40, h: float = 1.0):
    """Flat grid in the ``z = 0`` plane, columns at ``x = +-(i + 1/2) h``, crease line at ``x = 0``."""
    xs = (np.arange(-n_side, n_side) + 0.5) * h
    ys = np.arange(rows) * h
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])


def fold_points(points: np.ndarray, fold_deg: float) -> np.ndarray:
    """Rotate the ``x > 0`` half about the ``y`` axis so the two normals differ by ``fold_deg``."""
    r = so3.rotation_about(1, np.deg2rad(fold_deg))
    out = points.copy()
    right = points[:, 0] > 0
    out[right] = points[right] @ r.T
    return out


def creased_sheet_points(n_side: int = 20, rows: int = 40, h: float = 1.0, fold_deg: float = 60.0):
    """Posed crease fixture: ``(points, distance of each point to the crease line along the sheet)``."""
    flat = sheet_grid(n_side, rows, h)
    return fold_points(flat, fold_deg), np.abs(flat[:, 0])


def creased_sheet(seed: int = 0, fold_deg: float = 60.0) -> Scene:
    """Two-joint sheet folded along its crease; joint 1 sits on the crease line."""
    h = 0.025
    tree = KinematicTree([-1, 0], [[-0.25, 0.0, 0.0], [0.0, 0.0, 0.0]])
    pose = _pose_from_rotvecs(2, {1: (0.0, np.deg2rad(fold_deg), 0.0)})
    rng = np.random.Generator(np.random.Philox(seed))

    def cloud(spacing, n_side, rows):
        pts = sheet_grid(n_side, rows, spacing) - np.array([0.0, 0.5 * (rows - 1) * spacing, 0.0])
        n = len(pts)
        bind = np.zeros((n, 2))
        bind[np.arange(n), (pts[:, 0] > 0).astype(int)] = 1.0
        stripes = 0.6 + 0.3 * np.cos(2 * np.pi * pts[:, 1] / (8 * h))
        base = np.where(pts[:, :1] > 0, PALETTE[1], PALETTE[0])
        col = np.clip(base * stripes[:, None] + 0.02 * rng.standard_normal((n, 3)), 0.0, 1.0)
        sigma = 0.6 * spacing
        return GaussianCloud(pts, np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
                             np.tile([sigma, sigma, sigma * THICKNESS], (n, 1)),
                             np.full(n, 0.9), col, bind)

    reference = cloud(h / 2, 40, 80)
    initial = cloud(h, 20, 40)
    posed = articulate(reference, forward_kinematics(tree, pose)).positions
    cam = _frame_camera(posed, 96)
    return Scene("creased_sheet", tree, pose, cam, reference, initial, KAPPA0 * pose)


_BUILDERS = {"arm2": arm2, "chain4": chain4, "humanoid24": humanoid24, "creased_sheet": creased_sheet}


def build(name: str, seed: int = 0) -> Scene:
    try:
        return _BUILDERS[name](seed)
    except KeyError:
        raise UnknownSceneError(f"unknown scene {name!r}; choose from {', '.join(SCENES)}") from None


def format_pose(pose: np.ndarray) -> str:
    lines = ["# joint rx ry rz (rotation vector, radians)"]
    for j, r in enumerate(pose):
        v = so3.log_map(r)
        lines.append(f"{j} {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    return "\n".join(lines) + "\n"


def parse_pose(text: str, joint_count: int) -> np.ndarray:
    pose = np.broadcast_to(np.eye(3), (joint_count, 3, 3)).copy()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) != 4:
            raise ValueError(f"pose line {lineno}: expected 'joint rx ry rz'")
        j = int(toks[0])
        if not 0 <= j < joint_count:
            raise ValueError(f"pose line {lineno}: joint {j} out of range")
        pose[j] = so3.exp_map(np.array([float(t) for t in toks[1:]]))
    return pose


def format_camera(cam: Camera) -> str:
    r = " ".join(f"{v:.17g}" for v in cam.rotation.ravel())
    t = " ".join(f"{v:.17g}" for v in cam.translation)
    return (f"[camera]\nrotation = {r}\ntranslation = {t}\nfx = {cam.fx:.17g}\nfy = {cam.fy:.17g}\n"
            f"cx = {cam.cx:.17g}\ncy = {cam.cy:.17g}\nwidth = {cam.width}\nheight = {cam.height}\n")


def write_scene(scene: Scene, out_dir) -> dict[str, Path]:
    """Write rig, pose, camera, clouds and the reference render; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / scene.name
    paths = {
        "rig": stem.with_suffix(".rig"),
        "pose": stem.with_suffix(".pose"),
        "camera": stem.with_suffix(".camera"),
        "reference_cloud": out / f"{scene.name}_reference.ply",
        "initial_cloud": out / f"{scene.name}_initial.ply",
        "reference_render": out / f"{scene.name}_reference.ppm",
        "reference_mask": out / f"{scene.name}_reference_mask.pgm",
        "reference_depth": out / f"{scene.name}_reference_depth.pfm",
    }
    save_rig(paths["rig"], scene.tree, scene.weights, scene.rest_vertices)
    paths["pose"].write_text(format_pose(scene.pose))
    paths["camera"].write_text(format_camera(scene.camera))
    write_cloud(paths["reference_cloud"], scene.reference, with_binding=True)
    write_cloud(paths["initial_cloud"], scene.initial, with_binding=True)
    img = render(scene.posed_reference(), scene.camera)
    write_ppm(paths["reference_render"], img.rgb)
    write_pgm(paths["reference_mask"], reference_mask(img.alpha))
    write_pfm(paths["reference_depth"], img.depth)
    return paths


def reference_mask(alpha: np.ndarray) -> np.ndarray:
    """Binary silhouette of a reference render."""
    return (alpha > 0.5).astype(float)
