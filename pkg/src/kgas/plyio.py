"""ASCII PLY reading and writing for Gaussian clouds and point sets."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import so3
from .gaussians import GaussianCloud

QUAT_UNIT_TOL = 1e-3

CLOUD_PROPERTIES = ("x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z",
                    "scale_x", "scale_y", "scale_z", "opacity", "red", "green", "blue")
_MAX_BIND = 4


class PlyFormatError(ValueError):
    pass


def read_ply(path) -> dict[str, np.ndarray]:
    """Read the ``vertex`` element of an ASCII PLY file into ``{property: column}``."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyFormatError(f"{path}: missing 'ply' magic line")
    elements: list[tuple[str, int, list[str]]] = []
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        toks = line.split()
        if not toks or toks[0] in ("comment", "obj_info"):
            continue
        if toks[0] == "format":
            if len(toks) < 2 or toks[1] != "ascii":
                raise PlyFormatError(f"{path}:{lineno}: only ASCII PLY is supported")
        elif toks[0] == "element":
            if len(toks) != 3:
                raise PlyFormatError(f"{path}:{lineno}: malformed element line")
            elements.append((toks[1], int(toks[2]), []))
        elif toks[0] == "property":
            if not elements:
                raise PlyFormatError(f"{path}:{lineno}: property before any element")
            if toks[1] == "list":
                raise PlyFormatError(f"{path}:{lineno}: list properties are not supported")
            elements[-1][2].append(toks[-1])
        elif toks[0] == "end_header":
            body_start = lineno
            break
        else:
            raise PlyFormatError(f"{path}:{lineno}: unexpected header line {line!r}")
    if body_start is None:
        raise PlyFormatError(f"{path}: missing end_header")
    body = [ln for ln in lines[body_start:] if ln.strip()]
    cursor = 0
    for name, count, props in elements:
        rows = body[cursor:cursor + count]
        cursor += count
        if name != "vertex":
            continue
        if len(rows) != count:
            raise PlyFormatError(f"{path}: expected {count} vertex rows, found {len(rows)}")
        try:
            data = np.array([[float(t) for t in r.split()] for r in rows], dtype=float).reshape(count, len(props))
        except ValueError as exc:
            raise PlyFormatError(f"{path}: bad vertex row: {exc}") from None
        return {p: data[:, k] for k, p in enumerate(props)}
    raise PlyFormatError(f"{path}: no 'vertex' element")


def write_ply(path, columns: dict[str, np.ndarray], comments=()) -> None:
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    header = ["ply", "format ascii 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    data = np.column_stack([np.asarray(columns[k], dtype=float) for k in names]) if names else np.zeros((n, 0))
    body = [" ".join(repr(float(v)) for v in row) for row in data]
    Path(path).write_text("\n".join(header + body) + "\n")


def write_cloud(path, cloud: GaussianCloud, with_binding: bool = False) -> None:
    """Write Gaussians; optional ``bind_j*``/``bind_w*`` columns carry up to four binding weights."""
    q = so3.matrix_to_quat(cloud.rotations) if len(cloud) else np.zeros((0, 4))
    cols = {
        "x": cloud.positions[:, 0], "y": cloud.positions[:, 1], "z": cloud.positions[:, 2],
        "rot_w": q[:, 0], "rot_x": q[:, 1], "rot_y": q[:, 2], "rot_z": q[:, 3],
        "scale_x": cloud.scales[:, 0], "scale_y": cloud.scales[:, 1], "scale_z": cloud.scales[:, 2],
        "opacity": cloud.opacities,
        "red": cloud.colors[:, 0], "green": cloud.colors[:, 1], "blue": cloud.colors[:, 2],
    }
    comments = []
    if with_binding:
        comments.append(f"joints {cloud.joint_count}")
        order = np.argsort(-cloud.binding, axis=1, kind="stable")[:, :_MAX_BIND]
        weights = np.take_along_axis(cloud.binding, order, axis=1)
        for k in range(min(_MAX_BIND, cloud.joint_count)):
            cols[f"bind_j{k}"] = np.where(weights[:, k] > 0.0, order[:, k], 0)
            cols[f"bind_w{k}"] = weights[:, k]
    write_ply(path, cols, comments)


def _joint_count_comment(path) -> int | None:
    for line in Path(path).read_text().splitlines():
        if line.startswith("comment joints "):
            return int(line.split()[2])
        if line.strip() == "end_header":
            break
    return None


def read_cloud(path, joint_count: int | None = None) -> GaussianCloud:
    """Read Gaussians. Without binding columns every Gaussian binds to joint 0."""
    cols = read_ply(path)
    missing = [p for p in CLOUD_PROPERTIES if p not in cols]
    if missing:
        raise PlyFormatError(f"{path}: missing properties {missing}")
    q = np.column_stack([cols["rot_w"], cols["rot_x"], cols["rot_y"], cols["rot_z"]])
    norms = np.linalg.norm(q, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > QUAT_UNIT_TOL)
    if bad.size:
        raise PlyFormatError(f"{path}: vertex {bad[0]} has a non-unit quaternion (norm {norms[bad[0]]:.6g})")
    n = q.shape[0]
    q = q / norms[:, None] if n else q
    bind_cols = sorted(k for k in cols if k.startswith("bind_j"))
    if joint_count is None:
        joint_count = _joint_count_comment(path)
    if bind_cols:
        jmax = int(max(cols[k].max() for k in bind_cols)) + 1 if n else 1
        k_joints = max(joint_count or 0, jmax)
        binding = np.zeros((n, k_joints))
        for k in range(len(bind_cols)):
            j = cols[f"bind_j{k}"].astype(int)
            np.add.at(binding, (np.arange(n), j), cols[f"bind_w{k}"])
    else:
        binding = np.zeros((n, joint_count or 1))
        binding[:, 0] = 1.0
    return GaussianCloud(
        positions=np.column_stack([cols["x"], cols["y"], cols["z"]]),
        rotations=so3.quat_to_matrix(q) if n else np.zeros((0, 3, 3)),
        scales=np.column_stack([cols["scale_x"], cols["scale_y"], cols["scale_z"]]),
        opacities=cols["opacity"],
        colors=np.column_stack([cols["red"], cols["green"], cols["blue"]]),
        binding=binding,
    )


def read_points(path):
    """Read ``(positions (N, 3), normals (N, 3) or None)`` from a PLY point set."""
    cols = read_ply(path)
    for p in ("x", "y", "z"):
        if p not in cols:
            raise PlyFormatError(f"{path}: missing property {p!r}")
    pts = np.column_stack([cols["x"], cols["y"], cols["z"]])
    normals = None
    if all(p in cols for p in ("nx", "ny", "nz")):
        normals = np.column_stack([cols["nx"], cols["ny"], cols["nz"]])
    return pts, normals


def write_points(path, points, normals=None, extra: dict[str, np.ndarray] | None = None) -> None:
    pts = np.asarray(points, dtype=float)
    cols = {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2]}
    if normals is not None:
        nrm = np.asarray(normals, dtype=float)
        cols.update({"nx": nrm[:, 0], "ny": nrm[:, 1], "nz": nrm[:, 2]})
    if extra:
        cols.update(extra)
    write_ply(path, cols)
