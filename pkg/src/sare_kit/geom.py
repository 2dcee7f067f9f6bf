"""Geometry kernels: rigid transforms, sampling, alignment, distances, voxels.

All functions are pure and operate on float64 numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError, InvalidArgumentError

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise InvalidArgumentError("normals must match points in shape")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not is_rotation(self.rotation):
            raise InvalidArgumentError("rotation must be proper orthogonal (R^T R = I, det R = +1)")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        return is_rotation(self.rotation, tol)


def is_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.abs(R.T @ R - np.eye(3)).max() <= tol) and abs(np.linalg.det(R) - 1.0) <= tol


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_about_z(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    if len(cloud) == 0:
        raise InvalidArgumentError("cannot transform an empty cloud")
    normals = None if cloud.normals is None else cloud.normals @ T.rotation.T
    return PointCloud(T.apply(cloud.points), normals)


def fps_sample(cloud: PointCloud | np.ndarray, m: int, seed: int) -> np.ndarray:
    """Farthest point sampling with a seeded uniform first pick.

    Ties in the greedy step resolve to the smallest index.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if not 1 <= m <= n:
        raise InvalidArgumentError(f"fps_sample needs 1 <= m <= {n}, got m={m}")
    rng = np.random.default_rng(seed)
    out = np.empty(m, dtype=np.int64)
    out[0] = rng.integers(n)
    min_d2 = np.sum((pts - pts[out[0]]) ** 2, axis=1)
    min_d2[out[0]] = -1.0
    for k in range(1, m):
        nxt = int(np.argmax(min_d2))
        out[k] = nxt
        np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d2)
        min_d2[out[: k + 1]] = -1.0
    return out


def allocate_budget(areas, M: int, floor: int = 8) -> list[int]:
    """Split ``M`` query points across fragments proportionally to area.

    Every fragment gets ``floor`` points first; the remainder is distributed by
    largest-remainder rounding, ties going to the smaller fragment index.
    """
    areas = np.asarray(areas, dtype=np.float64)
    K = len(areas)
    if K == 0 or np.any(areas <= 0) or not np.all(np.isfinite(areas)):
        raise InvalidArgumentError("areas must be a non-empty list of positive reals")
    if M < K * floor:
        raise InvalidArgumentError(f"budget M={M} below K*floor={K * floor}")
    spare = M - K * floor
    share = spare * areas / areas.sum()
    base = np.floor(share).astype(np.int64)
    left = spare - int(base.sum())
    order = np.lexsort((np.arange(K), -(share - base)))
    base[order[:left]] += 1
    return [int(b) + floor for b in base]


def kabsch_align(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping ``src[k]`` onto ``dst[k]``."""
    P = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=np.float64)
    Q = dst.points if isinstance(dst, PointCloud) else np.asarray(dst, dtype=np.float64)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise InvalidArgumentError("kabsch_align needs equally sized N x 3 arrays")
    if len(P) < 3:
        raise DegenerateGeometryError("kabsch_align needs at least 3 correspondences")
    mu_p, mu_q = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mu_p, Q - mu_q
    sv = np.linalg.svd(Pc, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometryError("source points are collinear or coincident")
    H = Pc.T @ Qc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, mu_q - R @ mu_p)


def _as_points(c) -> np.ndarray:
    pts = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidArgumentError("chamfer_distance needs non-empty clouds")
    return pts


def chamfer_distance(A, B) -> float:
    """Mean squared nearest-neighbor distance A→B plus B→A (KD-tree path)."""
    a, b = _as_points(A), _as_points(B)
    da, _ = cKDTree(b).query(a, k=1)
    db, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(da**2) + np.mean(db**2))


def chamfer_distance_bruteforce(A, B) -> float:
    a, b = _as_points(A), _as_points(B)
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


@dataclass(frozen=True)
class VoxelSet:
    """Occupied cells of a ``resolution``³ grid spanning ``bbox``.

    ``keys`` holds sorted unique linear indices ``(i*res + j)*res + k``.
    """
    keys: np.ndarray
    resolution: int
    bbox: tuple[np.ndarray, np.ndarray]

    @property
    def occupied(self) -> set[tuple[int, int, int]]:
        r = self.resolution
        return {(int(k // (r * r)), int(k // r % r), int(k % r)) for k in self.keys}

    def __len__(self) -> int:
        return len(self.keys)

    def indices(self) -> np.ndarray:
        r = self.resolution
        return np.stack([self.keys // (r * r), self.keys // r % r, self.keys % r], axis=1)


def voxel_indices(points: np.ndarray, resolution: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    idx = np.floor((points - lo) / (hi - lo) * resolution).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


def voxelize(cloud, resolution: int, bbox) -> VoxelSet:
    if resolution < 2:
        raise InvalidArgumentError("voxel resolution must be >= 2")
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bbox)
    if np.any(hi <= lo):
        raise InvalidArgumentError("bbox min must be < max on every axis")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    idx = voxel_indices(pts, resolution, lo, hi)
    keys = np.unique((idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2])
    return VoxelSet(keys, resolution, (lo, hi))


def rotation_error_deg(R1, R2) -> float:
    """Geodesic angle between two rotations, in degrees.

    Evaluated as atan2(sin, cos) of the relative rotation rather than
    arccos((tr - 1) / 2): the two agree exactly in value, but arccos loses
    about half the significant digits near zero, which would cap the
    resolvable error at roughly 1e-6 degrees.
    """
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    if not (is_rotation(R1) and is_rotation(R2)):
        raise InvalidArgumentError("rotation_error_deg needs proper orthogonal matrices")
    R = R1.T @ R2
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def estimate_normals(cloud, k: int = 16) -> PointCloud:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if not 3 <= k <= len(pts):
        raise InvalidArgumentError(f"need 3 <= k <= {len(pts)}, got k={k}")
    _, nbr = cKDTree(pts).query(pts, k=k)
    nb = pts[nbr]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    outward = np.einsum("ni,ni->n", normals, pts - pts.mean(axis=0))
    # tangent to the centroid direction: fall back to a canonical sign
    ambiguous = np.abs(outward) < 1e-12
    big = np.take_along_axis(normals, np.abs(normals).argmax(axis=1)[:, None], axis=1)[:, 0]
    sign = np.where(ambiguous, np.sign(big), np.sign(outward))
    return PointCloud(pts, normals * sign[:, None])
