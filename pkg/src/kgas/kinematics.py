"""Kinematic tree, forward kinematics, linear blend skinning and JNTM.

A pose holds one local rotation per joint, relative to the parent. Joint
``k`` rotates about its rest position, so the rest pose (all identities)
maps every joint and vertex onto itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import fisher, so3

ROOT_PARENT = -1
MAX_INFLUENCES = 4
WEIGHT_SUM_TOL = 1e-6
DEFAULT_GAMMA = 0.3


class RigFormatError(ValueError):
    """Unparseable rig file; the message carries the line number."""


class RigValidationError(ValueError):
    """Rig data parsed but violates a structural invariant."""


@dataclass(frozen=True, eq=False)
class KinematicTree:
    parent: np.ndarray
    rest_joints: np.ndarray

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=int)
        rest = np.asarray(self.rest_joints, dtype=float)
        if parent.ndim != 1 or parent.size < 1:
            raise RigValidationError("kinematic tree needs at least one joint")
        if rest.shape != (parent.size, 3):
            raise RigValidationError(f"rest joints must have shape ({parent.size}, 3), got {rest.shape}")
        if parent[0] != ROOT_PARENT:
            raise RigValidationError("joint 0 must be the root (parent -1)")
        for i in range(1, parent.size):
            if not 0 <= parent[i] < i:
                raise RigValidationError(f"joint {i}: parent {parent[i]} must be in [0, {i})")
        if not np.all(np.isfinite(rest)):
            raise RigValidationError("rest joint positions must be finite")
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "rest_joints", rest)

    @property
    def joint_count(self) -> int:
        return int(self.parent.size)

    def children(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.parent == i)]


class JointTransforms(NamedTuple):
    """World rotation ``G0[k]`` and translation ``G1[k]`` of every joint."""

    G0: np.ndarray
    G1: np.ndarray


class MotionFactors(NamedTuple):
    """Per-joint proper singular values ``S`` (K, 3) and modes ``R_mode`` (K, 3, 3)."""

    S: np.ndarray
    R_mode: np.ndarray


def validate_weights(weights, vertex_count: int | None = None, joint_count: int | None = None) -> np.ndarray:
    """Check a dense ``(N, K)`` skin-weight matrix and return it as floats."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 2:
        raise RigValidationError("skin weights must be a 2-D (vertices x joints) array")
    if vertex_count is not None and w.shape[0] != vertex_count:
        raise RigValidationError(f"{w.shape[0]} weight rows for {vertex_count} vertices")
    if joint_count is not None and w.shape[1] != joint_count:
        raise RigValidationError(f"weights reference {w.shape[1]} joints, tree has {joint_count}")
    bad = np.flatnonzero(np.any(w < 0.0, axis=1) | ~np.all(np.isfinite(w), axis=1))
    if bad.size:
        raise RigValidationError(f"weights row {bad[0]}: weights must be finite and >= 0")
    bad = np.flatnonzero(np.abs(w.sum(axis=1) - 1.0) > WEIGHT_SUM_TOL)
    if bad.size:
        raise RigValidationError(f"weights row {bad[0]}: weights sum to {w[bad[0]].sum():.6g}, expected 1")
    bad = np.flatnonzero(np.count_nonzero(w, axis=1) > MAX_INFLUENCES)
    if bad.size:
        raise RigValidationError(f"weights row {bad[0]}: more than {MAX_INFLUENCES} nonzero weights")
    return w


def identity_pose(tree: KinematicTree) -> np.ndarray:
    return np.broadcast_to(np.eye(3), (tree.joint_count, 3, 3)).copy()


def forward_kinematics(tree: KinematicTree, pose) -> JointTransforms:
    """Compose local rotations down the tree into world transforms."""
    pose = np.asarray(pose, dtype=float)
    k = tree.joint_count
    if pose.shape != (k, 3, 3):
        raise ValueError(f"pose has shape {pose.shape}, tree expects ({k}, 3, 3)")
    g0 = np.empty((k, 3, 3))
    g1 = np.empty((k, 3))
    for i in range(k):
        r = pose[i]
        j = tree.rest_joints[i]
        local_t = j - r @ j
        p = tree.parent[i]
        if p == ROOT_PARENT:
            g0[i] = r
            g1[i] = local_t
        else:
            g0[i] = g0[p] @ r
            g1[i] = g0[p] @ local_t + g1[p]
    return JointTransforms(g0, g1)


def lbs_skin(rest_vertices, weights, transforms: JointTransforms) -> np.ndarray:
    """``p'_i = sum_k w_ki (G0_k p_i + G1_k)``."""
    v = np.asarray(rest_vertices, dtype=float)
    w = np.asarray(weights, dtype=float)
    g0, g1 = transforms
    if v.ndim != 2 or v.shape[1] != 3:
        raise ValueError("rest vertices must have shape (N, 3)")
    if w.shape != (v.shape[0], g0.shape[0]):
        raise ValueError(f"weights shape {w.shape} does not match {v.shape[0]} vertices x {g0.shape[0]} joints")
    blended_r = np.einsum("nk,kij->nij", w, g0)
    blended_t = w @ g1
    return np.einsum("nij,nj->ni", blended_r, v) + blended_t


Refiner = Callable[[np.ndarray, np.ndarray], np.ndarray]


def geodesic_refiner(gamma: float = DEFAULT_GAMMA) -> Refiner:
    """Refiner pre-multiplying a child's parameter by ``exp(gamma log R_mode(parent))``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")

    def refine(child_f: np.ndarray, parent_f: np.ndarray) -> np.ndarray:
        if gamma == 0.0:
            return child_f
        blend = so3.exp_map(gamma * so3.log_map(fisher.mode(parent_f)))
        return blend @ child_f

    return refine


def motion_factors(params: Sequence) -> MotionFactors:
    ps = [fisher.as_params(p) for p in params]
    s = np.array([p.singular_values for p in ps])
    modes = np.array([fisher.mode(p) for p in ps])
    return MotionFactors(s, modes)


def jntm_propagate(tree: KinematicTree, params: Sequence, gamma: float = DEFAULT_GAMMA,
                   refiner: Refiner | None = None):
    """Condition each joint's Fisher parameter on its refined parent, root first.

    Returns ``(refined_params, MotionFactors)``.
    """
    if len(params) != tree.joint_count:
        raise ValueError(f"{len(params)} Fisher parameters for {tree.joint_count} joints")
    refine = refiner if refiner is not None else geodesic_refiner(gamma)
    refined: list[fisher.FisherParams] = []
    for i, p in enumerate(params):
        f = fisher.as_params(p).F
        parent = tree.parent[i]
        if parent != ROOT_PARENT:
            f = refine(f, refined[parent].F)
        refined.append(fisher.FisherParams(f))
    return refined, motion_factors(refined)


# ---------------------------------------------------------------------------
# Rig files

_SECTIONS = ("joints", "weights", "vertices")


def _parse_float(tok: str, lineno: int, field: str) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise RigFormatError(f"line {lineno}: {field}: cannot parse {tok!r} as a number") from None
    if not np.isfinite(val):
        raise RigFormatError(f"line {lineno}: {field}: value must be finite")
    return val


def _parse_int(tok: str, lineno: int, field: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise RigFormatError(f"line {lineno}: {field}: cannot parse {tok!r} as an integer") from None


def parse_rig(text: str):
    """Parse rig text into ``(KinematicTree, weights (N, K), rest_vertices (N, 3))``."""
    section = None
    joints: dict[int, tuple[int, tuple[float, float, float], int]] = {}
    weight_rows: dict[int, tuple[dict[int, float], int]] = {}
    vertices: list[tuple[float, float, float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) == 1 and toks[0].lower() in _SECTIONS:
            section = toks[0].lower()
            continue
        if section is None:
            raise RigFormatError(f"line {lineno}: data before any section header (joints/weights/vertices)")
        if section == "joints":
            if len(toks) != 5:
                raise RigFormatError(f"line {lineno}: joints: expected 'index parent x y z', got {len(toks)} fields")
            idx = _parse_int(toks[0], lineno, "joint index")
            par = _parse_int(toks[1], lineno, "parent index")
            pos = tuple(_parse_float(t, lineno, "rest position") for t in toks[2:])
            if idx in joints:
                raise RigFormatError(f"line {lineno}: joint {idx} defined twice")
            joints[idx] = (par, pos, lineno)
        elif section == "weights":
            vidx = _parse_int(toks[0], lineno, "vertex index")
            pairs = toks[1:]
            if not 1 <= len(pairs) <= MAX_INFLUENCES:
                raise RigFormatError(f"line {lineno}: weights: expected 1 to {MAX_INFLUENCES} joint:weight pairs")
            row: dict[int, float] = {}
            for pair in pairs:
                if ":" not in pair:
                    raise RigFormatError(f"line {lineno}: weights: expected 'joint:weight', got {pair!r}")
                j, wv = pair.split(":", 1)
                j = _parse_int(j, lineno, "weight joint")
                row[j] = row.get(j, 0.0) + _parse_float(wv, lineno, "weight")
            if vidx in weight_rows:
                raise RigFormatError(f"line {lineno}: weights for vertex {vidx} given twice")
            weight_rows[vidx] = (row, lineno)
        else:
            if len(toks) != 3:
                raise RigFormatError(f"line {lineno}: vertices: expected 'x y z', got {len(toks)} fields")
            vertices.append(tuple(_parse_float(t, lineno, "vertex coordinate") for t in toks))

    if not joints:
        raise RigFormatError("rig has no joints section")
    k = len(joints)
    if sorted(joints) != list(range(k)):
        raise RigValidationError(f"joint indices must be 0..{k - 1} without gaps")
    parent = [joints[i][0] for i in range(k)]
    rest = [joints[i][1] for i in range(k)]
    for i in range(k):
        if i == 0 and parent[0] != ROOT_PARENT:
            raise RigValidationError(f"line {joints[0][2]}: joint 0 must have parent {ROOT_PARENT}")
        if i > 0 and not 0 <= parent[i] < i:
            raise RigValidationError(f"line {joints[i][2]}: joint {i} has parent {parent[i]}, expected 0..{i - 1}")
    tree = KinematicTree(np.array(parent), np.array(rest))

    n = len(vertices)
    if sorted(weight_rows) != list(range(n)):
        missing = sorted(set(range(n)) - set(weight_rows))
        extra = sorted(set(weight_rows) - set(range(n)))
        detail = f"missing row for vertex {missing[0]}" if missing else f"row for unknown vertex {extra[0]}"
        raise RigValidationError(f"weights do not match {n} vertices: {detail}")
    w = np.zeros((n, k))
    for vidx in range(n):
        row, lineno = weight_rows[vidx]
        for j, val in row.items():
            if not 0 <= j < k:
                raise RigValidationError(f"line {lineno}: weights row {vidx}: unknown joint {j}")
            if val < 0.0:
                raise RigValidationError(f"line {lineno}: weights row {vidx}: negative weight")
            w[vidx, j] = val
        total = w[vidx].sum()
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise RigValidationError(f"line {lineno}: weights row {vidx} sums to {total:.6g}, expected 1")
    return tree, w, np.array(vertices, dtype=float).reshape(n, 3)


def load_rig(path):
    """Read and validate a rig file."""
    return parse_rig(Path(path).read_text())


def format_rig(tree: KinematicTree, weights, rest_vertices) -> str:
    w = validate_weights(weights, len(rest_vertices), tree.joint_count)
    lines = ["# kgas rig", "joints"]
    for i in range(tree.joint_count):
        x, y, z = tree.rest_joints[i]
        lines.append(f"{i} {tree.parent[i]} {x:.17g} {y:.17g} {z:.17g}")
    lines.append("weights")
    for i, row in enumerate(w):
        nz = np.flatnonzero(row)
        lines.append(f"{i} " + " ".join(f"{j}:{row[j]:.17g}" for j in nz))
    lines.append("vertices")
    for x, y, z in np.asarray(rest_vertices, dtype=float):
        lines.append(f"{x:.17g} {y:.17g} {z:.17g}")
    return "\n".join(lines) + "\n"


def save_rig(path, tree: KinematicTree, weights, rest_vertices) -> None:
    Path(path).write_text(format_rig(tree, weights, rest_vertices))
