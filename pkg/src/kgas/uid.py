"""Surface deformation detection from PCA normals of k-NN neighborhoods.

Each point gets the minimal-variance eigenvector of its neighborhood
covariance as a normal. A point is flagged when the normal of one of its
neighbors turns away from its own by more than a threshold angle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_K = 16
DEFAULT_THRESHOLD = np.deg2rad(30.0)
BRUTE_FORCE_BELOW = 512
TIE_RTOL = 1e-9
DEGENERATE_RTOL = 1e-9


def _order_with_ties(dist: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Argsort by distance; distances equal within ``TIE_RTOL`` order by index."""
    first = np.argsort(dist, kind="stable")
    d = dist[first]
    gap = np.diff(d) > TIE_RTOL * np.maximum(d[1:], np.finfo(float).tiny)
    group = np.concatenate([[0], np.cumsum(gap)])
    return first[np.lexsort((idx[first], group))]


class NeighborIndex:
    """Exact k-nearest-neighbor queries over a fixed point set."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must have shape (N, 3)")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        self.points = pts
        self.n = pts.shape[0]
        self._grid = None
        if self.n >= BRUTE_FORCE_BELOW:
            self._build_grid()

    def _build_grid(self):
        lo = self.points.min(axis=0)
        extent = float((self.points.max(axis=0) - lo).max())
        # surface-like sampling: about DEFAULT_K points per occupied cell
        per_side = max(1, int(np.sqrt(self.n / DEFAULT_K)))
        h = extent / per_side if extent > 0.0 else 1.0
        cells = np.floor((self.points - lo) / h).astype(int)
        table: dict[tuple[int, int, int], list[int]] = {}
        for i, c in enumerate(map(tuple, cells)):
            table.setdefault(c, []).append(i)
        self._grid = (lo, h, cells, {c: np.array(v) for c, v in table.items()}, cells.max(axis=0))

    def _check(self, i: int, k: int):
        if not 0 <= i < self.n:
            raise IndexError(f"point index {i} out of range for {self.n} points")
        if not 1 <= k < self.n:
            raise ValueError(f"k must be in [1, {self.n - 1}], got {k}")

    def query(self, i: int, k: int) -> np.ndarray:
        """The ``k`` nearest points to point ``i`` (excluding ``i``), nearest first."""
        self._check(i, k)
        if self._grid is None:
            cand = np.delete(np.arange(self.n), i)
        else:
            cand = self._grid_candidates(i, k)
        dist = np.linalg.norm(self.points[cand] - self.points[i], axis=1)
        return cand[_order_with_ties(dist, cand)[:k]]

    def _grid_candidates(self, i: int, k: int) -> np.ndarray:
        lo, h, cells, table, top = self._grid
        c = cells[i]
        q = self.points[i]
        found: list[np.ndarray] = []
        r = 0
        max_r = int(np.max(np.maximum(c, top - c)))
        while True:
            rng = range(-r, r + 1)
            for dx in rng:
                for dy in rng:
                    for dz in rng:
                        if max(abs(dx), abs(dy), abs(dz)) != r:
                            continue
                        hit = table.get((c[0] + dx, c[1] + dy, c[2] + dz))
                        if hit is not None:
                            found.append(hit)
            if r >= max_r:
                break
            cand = np.concatenate(found) if found else np.zeros(0, dtype=int)
            cand = cand[cand != i]
            if cand.size >= k:
                dist = np.linalg.norm(self.points[cand] - q, axis=1)
                kth = np.partition(dist, k - 1)[k - 1]
                # everything outside the searched cube is at least r*h away
                if kth * (1.0 + 2.0 * TIE_RTOL) < r * h:
                    return np.sort(cand)
            r += 1
        cand = np.concatenate(found)
        return np.sort(cand[cand != i])

    def query_all(self, k: int) -> np.ndarray:
        if self.n <= k:
            raise ValueError(f"k must be below the point count {self.n}, got {k}")
        if self._grid is None:
            d = np.linalg.norm(self.points[:, None, :] - self.points[None, :, :], axis=-1)
            out = np.empty((self.n, k), dtype=int)
            idx = np.arange(self.n)
            for i in range(self.n):
                cand = np.delete(idx, i)
                out[i] = cand[_order_with_ties(np.delete(d[i], i), cand)[:k]]
            return out
        return np.array([self.query(i, k) for i in range(self.n)], dtype=int).reshape(self.n, k)


def knn(points, i: int, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest neighbors of point ``i``; ties go to the lower index."""
    return NeighborIndex(points).query(i, k)


def local_centroid(points, neighborhood) -> np.ndarray:
    nb = np.asarray(neighborhood, dtype=int)
    if nb.size == 0:
        raise ValueError("neighborhood is empty")
    return np.asarray(points, dtype=float)[nb].mean(axis=0)


def local_covariance(points, neighborhood) -> np.ndarray:
    """Unbiased sample covariance (``1 / (n - 1)``) about the local centroid."""
    nb = np.asarray(neighborhood, dtype=int)
    if nb.size < 2:
        raise ValueError("covariance needs at least 2 points")
    p = np.asarray(points, dtype=float)[nb]
    d = p - p.mean(axis=0)
    return d.T @ d / (nb.size - 1)


def _sign_fix(v: np.ndarray) -> np.ndarray:
    lead = np.take_along_axis(v, np.argmax(np.abs(v), axis=-1)[..., None], axis=-1)
    return np.where(lead < 0.0, -v, v)


def min_eig_normals(covs):
    """Batched :func:`min_eig_normal`: ``(normals, degenerate)``; degenerate rows are NaN."""
    covs = np.asarray(covs, dtype=float)
    lam, vec = np.linalg.eigh(covs)
    normals = _sign_fix(vec[..., :, 0])
    scale = np.maximum(lam[..., 2], 0.0)
    degenerate = (lam[..., 1] - lam[..., 0] <= DEGENERATE_RTOL * scale) | (scale <= 0.0)
    normals = np.where(degenerate[..., None], np.nan, normals)
    return normals, degenerate


def min_eig_normal(cov) -> np.ndarray | None:
    """Unit eigenvector of the smallest eigenvalue, largest-magnitude component positive.

    Returns ``None`` when the smallest eigenvalue is repeated (e.g. collinear
    neighborhoods), where the normal is not determined.
    """
    normals, degenerate = min_eig_normals(np.asarray(cov, dtype=float)[None])
    return None if degenerate[0] else normals[0]


def normal_angle(a, b, folded: bool = False):
    """``arccos`` of the clamped cosine between two directions, in ``[0, pi]``.

    ``folded`` maps the angle to ``min(t, pi - t)`` since PCA normals carry no sign.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cos = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    t = np.arccos(np.clip(cos, -1.0, 1.0))
    if folded:
        t = np.minimum(t, np.pi - t)
    return float(t) if np.ndim(t) == 0 else t


@dataclass(frozen=True, eq=False)
class DetectionReport:
    flagged: np.ndarray
    normals: np.ndarray
    max_angle: np.ndarray
    degenerate: np.ndarray
    k: int
    threshold: float
    folded: bool = True


def detect(points, k: int = DEFAULT_K, threshold: float = DEFAULT_THRESHOLD,
           folded: bool = True) -> DetectionReport:
    """Flag points whose normal differs from a neighbor's by more than ``threshold`` radians."""
    pts = np.asarray(points, dtype=float)
    if not 0.0 < threshold <= np.pi / 2:
        raise ValueError(f"threshold must be in (0, pi/2], got {threshold}")
    if pts.ndim != 2 or pts.shape[0] < k + 1:
        raise ValueError(f"need at least k + 1 = {k + 1} points, got {pts.shape[0] if pts.ndim == 2 else 0}")
    nbrs = NeighborIndex(pts).query_all(k)
    hood = np.concatenate([np.arange(len(pts))[:, None], nbrs], axis=1)
    local = pts[hood]
    d = local - local.mean(axis=1, keepdims=True)
    covs = np.einsum("nki,nkj->nij", d, d) / k
    normals, degenerate = min_eig_normals(covs)

    cos = np.abs(np.einsum("ni,nki->nk", normals, normals[nbrs])) if folded else \
        np.einsum("ni,nki->nk", normals, normals[nbrs])
    angles = np.arccos(np.clip(cos, -1.0, 1.0))
    angles = np.where(degenerate[nbrs], 0.0, angles)
    max_angle = np.where(degenerate, 0.0, np.nan_to_num(angles.max(axis=1), nan=0.0))
    flagged = np.flatnonzero((max_angle > threshold) & ~degenerate)
    return DetectionReport(flagged, normals, max_angle, degenerate, k, float(threshold), folded)


def format_report(report: DetectionReport) -> str:
    """Text form: parameters, flagged indices, then per-point max angle in degrees."""
    lines = [
        "# kgas uid detection report",
        f"k = {report.k}",
        f"threshold_deg = {np.rad2deg(report.threshold):.4f}",
        f"folded = {str(report.folded).lower()}",
        f"points = {report.max_angle.size}",
        f"degenerate_count = {int(report.degenerate.sum())}",
        f"flagged_count = {report.flagged.size}",
        "flagged = " + " ".join(str(int(i)) for i in report.flagged),
        "[max_angle_deg]",
    ]
    for i, a in enumerate(report.max_angle):
        mark = " degenerate" if report.degenerate[i] else ""
        lines.append(f"{i} {np.rad2deg(a):.4f}{mark}")
    return "\n".join(lines) + "\n"
