"""Desk-scale fractured objects with structural ground truth.

A solid from a small analytic catalog is surface-sampled, recursively split by
random planes (a BSP over convex cells), and every cut face is point-sampled so
that contacting fragments carry coincident fracture-surface points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import GenerationFailureError, InvalidArgumentError
from .geom import PointCloud, RigidTransform, random_rotation

EPS_F = 0.01
EPS_ADJ = 0.02
MAX_K = 50
MAX_SPLIT_RETRIES = 50
MIN_SPLIT_FRACTION = 0.1
SHAPES = ("cube", "sphere", "cylinder", "ellipsoid", "L-prism")


@dataclass
class Fragment:
    id: int
    points: PointCloud
    area: float


@dataclass
class AssemblySample:
    object_id: str
    fragments: list[Fragment]
    gt_transforms: list[RigidTransform]
    adjacency: np.ndarray
    fracture_labels: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.fragments)

    def validate(self) -> None:
        K = self.K
        if not 2 <= K <= MAX_K:
            raise InvalidArgumentError(f"fragment count {K} outside [2, {MAX_K}]")
        if len(self.gt_transforms) != K or len(self.fracture_labels) != K:
            raise InvalidArgumentError("transforms/labels must match fragment count")
        A = np.asarray(self.adjacency)
        if A.shape != (K, K) or np.any(A != A.T) or np.any(np.diag(A) != 0):
            raise InvalidArgumentError("adjacency must be symmetric with zero diagonal")
        for frag, lab in zip(self.fragments, self.fracture_labels):
            if len(lab) != len(frag.points):
                raise InvalidArgumentError(f"fragment {frag.id}: label count != point count")
            if frag.area <= 0:
                raise InvalidArgumentError(f"fragment {frag.id}: non-positive area")

    def posed_points(self) -> list[np.ndarray]:
        return [T.apply(f.points.points) for f, T in zip(self.fragments, self.gt_transforms)]


# --- analytic solids -------------------------------------------------------
# Every solid fits inside the unit sphere around its bounding-box center.

class Solid:
    name = ""

    def area(self) -> float:
        raise NotImplementedError

    def sample_surface(self, n: int, rng: np.random.Generator):
        raise NotImplementedError

    def inside(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Cube(Solid):
    name = "cube"
    a = 1.0 / math.sqrt(3.0)

    def area(self):
        return 6 * (2 * self.a) ** 2

    def sample_surface(self, n, rng):
        face = rng.integers(6, size=n)
        axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
        pts = rng.uniform(-self.a, self.a, size=(n, 3))
        pts[np.arange(n), axis] = sign * self.a
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = sign
        return pts, nrm

    def inside(self, x):
        return np.all(np.abs(x) <= self.a, axis=1)


class Sphere(Solid):
    name = "sphere"

    def area(self):
        return 4 * math.pi

    def sample_surface(self, n, rng):
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v.copy(), v

    def inside(self, x):
        return np.einsum("ni,ni->n", x, x) <= 1.0


class Cylinder(Solid):
    name = "cylinder"
    r, h = 0.6, 0.8  # radius, half-height

    def area(self):
        return 2 * math.pi * self.r * 2 * self.h + 2 * math.pi * self.r**2

    def sample_surface(self, n, rng):
        side = 2 * math.pi * self.r * 2 * self.h
        on_side = rng.uniform(0, self.area(), size=n) < side
        theta = rng.uniform(0, 2 * math.pi, size=n)
        pts = np.empty((n, 3))
        nrm = np.zeros((n, 3))
        pts[:, 0] = self.r * np.cos(theta)
        pts[:, 1] = self.r * np.sin(theta)
        pts[:, 2] = rng.uniform(-self.h, self.h, size=n)
        nrm[:, 0], nrm[:, 1] = np.cos(theta), np.sin(theta)
        caps = ~on_side
        rad = self.r * np.sqrt(rng.uniform(0, 1, size=n))
        sgn = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
        pts[caps, 0] = rad[caps] * np.cos(theta[caps])
        pts[caps, 1] = rad[caps] * np.sin(theta[caps])
        pts[caps, 2] = sgn[caps] * self.h
        nrm[caps] = 0.0
        nrm[caps, 2] = sgn[caps]
        return pts, nrm

    def inside(self, x):
        return (x[:, 0] ** 2 + x[:, 1] ** 2 <= self.r**2) & (np.abs(x[:, 2]) <= self.h)


class Ellipsoid(Solid):
    name = "ellipsoid"
    axes = np.array([1.0, 0.7, 0.5])

    def area(self):
        # Knud Thomsen's approximation, relative error below 1.1%
        a, b, c = self.axes
        p = 1.6075
        return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)

    def sample_surface(self, n, rng):
        a, b, c = self.axes
        g_max = max(b * c, a * c, a * b)
        out = []
        while sum(len(o) for o in out) < n:
            u = rng.standard_normal((2 * n, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
            out.append(u[rng.uniform(size=2 * n) * g_max < g])
        u = np.concatenate(out)[:n]
        pts = u * self.axes
        nrm = pts / self.axes**2
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return pts, nrm

    def inside(self, x):
        return np.sum((x / self.axes) ** 2, axis=1) <= 1.0


class LPrism(Solid):
    """Square [-s, s]² minus its (+x, +y) quadrant, extruded over |z| <= hz."""
    name = "L-prism"
    s = 0.6
    hz = math.sqrt(1.0 - 2 * 0.6**2)

    # outline edges: (start, end, outward normal)
    def _edges(self):
        s = self.s
        return [
            ((-s, -s), (s, -s), (0, -1)),
            ((s, -s), (s, 0), (1, 0)),
            ((s, 0), (0, 0), (0, 1)),
            ((0, 0), (0, s), (1, 0)),
            ((0, s), (-s, s), (0, 1)),
            ((-s, s), (-s, -s), (-1, 0)),
        ]

    def area(self):
        return 8 * self.s * 2 * self.hz + 2 * 3 * self.s**2

    def _cap_xy(self, n, rng):
        out = []
        while sum(len(o) for o in out) < n:
            xy = rng.uniform(-self.s, self.s, size=(2 * n, 2))
            out.append(xy[~((xy[:, 0] > 0) & (xy[:, 1] > 0))])
        return np.concatenate(out)[:n]

    def sample_surface(self, n, rng):
        side_area = 8 * self.s * 2 * self.hz
        on_side = rng.uniform(0, self.area(), size=n) < side_area
        pts = np.empty((n, 3))
        nrm = np.zeros((n, 3))
        edges = self._edges()
        lengths = np.array([math.dist(e[0], e[1]) for e in edges])
        which = rng.choice(len(edges), size=n, p=lengths / lengths.sum())
        f = rng.uniform(size=n)
        for e, (p0, p1, nn) in enumerate(edges):
            sel = which == e
            pts[sel, 0] = p0[0] + f[sel] * (p1[0] - p0[0])
            pts[sel, 1] = p0[1] + f[sel] * (p1[1] - p0[1])
            nrm[sel, 0], nrm[sel, 1] = nn
        pts[:, 2] = rng.uniform(-self.hz, self.hz, size=n)
        caps = ~on_side
        nc = int(caps.sum())
        pts[caps, :2] = self._cap_xy(nc, rng)
        sgn = np.where(rng.uniform(size=nc) < 0.5, 1.0, -1.0)
        pts[caps, 2] = sgn * self.hz
        nrm[caps] = 0.0
        nrm[caps, 2] = sgn
        return pts, nrm

    def inside(self, x):
        s = self.s
        box = (np.abs(x[:, 0]) <= s) & (np.abs(x[:, 1]) <= s) & (np.abs(x[:, 2]) <= self.hz)
        return box & ~((x[:, 0] > 0) & (x[:, 1] > 0))


CATALOG = {cls.name: cls for cls in (Cube, Sphere, Cylinder, Ellipsoid, LPrism)}


def make_solid(name: str) -> Solid:
    try:
        return CATALOG[name]()
    except KeyError:
        raise InvalidArgumentError(f"unknown base shape {name!r}; expected one of {SHAPES}") from None


# --- BSP fracturing ---------------------------------------------------------

def _in_cell(x: np.ndarray, cell: list[tuple[np.ndarray, float]]) -> np.ndarray:
    ok = np.ones(len(x), dtype=bool)
    for n, d in cell:
        ok &= x @ n <= d
    return ok


def _orthonormal_basis(n: np.ndarray):
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def fracture_object(base_shape: str, K: int, seed: int, n_points: int = 20000,
                    eps_f: float = EPS_F, eps_adj: float = EPS_ADJ,
                    object_id: str | None = None,
                    cut_planes: list | None = None) -> AssemblySample:
    """Fracture ``base_shape`` into exactly ``K`` fragments with GT structure.

    ``cut_planes`` optionally fixes the cuts as ``(normal, offset)`` pairs, each
    applied to the currently largest cell.
    """
    if not 2 <= K <= MAX_K:
        raise InvalidArgumentError(f"K must lie in [2, {MAX_K}], got {K}")
    solid = make_solid(base_shape)
    rng = np.random.default_rng(seed)

    outer_pts, outer_nrm = solid.sample_surface(n_points, rng)
    density = n_points / solid.area()
    vol = rng.uniform(-1, 1, size=(4 * n_points, 3))
    vol = vol[solid.inside(vol)]

    # leaf cells: list of half-space constraints n·x <= d
    cells: list[list[tuple[np.ndarray, float]]] = [[]]
    members = [np.arange(len(vol))]
    cuts = []  # (normal, offset, parent cell)
    while len(cells) < K:
        leaf = int(np.argmax([len(m) for m in members]))
        pv = vol[members[leaf]]
        centre, spread = pv.mean(axis=0), pv.std(axis=0).mean()
        for _ in range(MAX_SPLIT_RETRIES):
            if cut_planes is not None:
                normal, offset = cut_planes[len(cuts)]
                normal = np.asarray(normal, dtype=np.float64) / np.linalg.norm(normal)
                offset = float(offset)
            else:
                normal = rng.standard_normal(3)
                normal /= np.linalg.norm(normal)
                through = centre + 0.3 * spread * rng.standard_normal(3)
                offset = float(normal @ through)
            below = pv @ normal <= offset
            frac = below.mean()
            if MIN_SPLIT_FRACTION <= frac <= 1 - MIN_SPLIT_FRACTION:
                break
        else:
            raise GenerationFailureError(
                f"{base_shape} seed={seed}: no admissible split after {MAX_SPLIT_RETRIES} retries")
        parent = cells[leaf]
        cuts.append((normal, offset, parent))
        cells[leaf] = parent + [(normal, offset)]
        cells.append(parent + [(-normal, -offset)])
        idx = members[leaf]
        members[leaf], members_new = idx[below], idx[~below]
        members.append(members_new)

    def owner(x: np.ndarray) -> np.ndarray:
        lab = np.full(len(x), -1, dtype=np.int64)
        for c, cell in enumerate(cells):
            lab[(lab < 0) & _in_cell(x, cell)] = c
        return lab

    frag_pts = [[] for _ in range(K)]
    frag_nrm = [[] for _ in range(K)]
    own = owner(outer_pts)
    for c in range(K):
        frag_pts[c].append(outer_pts[own == c])
        frag_nrm[c].append(outer_nrm[own == c])

    # cut faces: sample the plane inside (solid ∩ parent cell), give each side a copy
    delta = 1e-7
    for normal, offset, parent in cuts:
        u, v = _orthonormal_basis(normal)
        n_cand = rng.poisson(density * 4.0)
        ab = rng.uniform(-1, 1, size=(n_cand, 2))
        x = normal * offset + ab[:, :1] * u + ab[:, 1:] * v
        x = x[solid.inside(x) & _in_cell(x, parent)]
        lo, hi = owner(x - delta * normal), owner(x + delta * normal)
        for side, out_nrm in ((lo, normal), (hi, -normal)):
            for c in range(K):
                sel = side == c
                frag_pts[c].append(x[sel])
                frag_nrm[c].append(np.broadcast_to(out_nrm, (int(sel.sum()), 3)))

    pts = [np.concatenate(p) for p in frag_pts]
    nrm = [np.concatenate(n) for n in frag_nrm]
    if any(len(p) < 16 for p in pts):
        raise GenerationFailureError(f"{base_shape} seed={seed}: a fragment received too few points")

    centroid = np.concatenate(pts).mean(axis=0)
    fragments, transforms = [], []
    for i, (p, n) in enumerate(zip(pts, nrm)):
        world = p - centroid
        c_i = world.mean(axis=0)
        fragments.append(Fragment(i, PointCloud(world - c_i, n), len(p) / density))
        transforms.append(RigidTransform(np.eye(3), c_i))

    sample = AssemblySample(
        object_id=object_id or f"{base_shape}_K{K}_s{seed}",
        fragments=fragments,
        gt_transforms=transforms,
        adjacency=np.zeros((K, K), dtype=np.uint8),
        fracture_labels=[np.zeros(len(f.points), dtype=np.uint8) for f in fragments],
        meta={"base_shape": base_shape, "seed": int(seed), "eps_f": eps_f, "eps_adj": eps_adj,
              "n_points": int(n_points), "centroid": centroid.tolist()},
    )
    labels, A = label_structure(sample, eps_f, eps_adj)
    sample.fracture_labels, sample.adjacency = labels, A
    sample.validate()
    return sample


def label_structure(sample: AssemblySample, eps_f: float = EPS_F, eps_adj: float = EPS_ADJ):
    """Fracture labels and adjacency from the GT-posed fragments.

    ``f_i(x) = 1`` iff the nearest point of any other fragment is closer than
    ``eps_f``; ``A_ij = 1`` iff the closest pair between i and j is closer than
    ``eps_adj``.
    """
    posed = sample.posed_points()
    K = len(posed)
    trees = [cKDTree(p) for p in posed]
    bound = max(eps_f, eps_adj)
    labels = [np.zeros(len(p), dtype=np.uint8) for p in posed]
    A = np.zeros((K, K), dtype=np.uint8)
    for i in range(K):
        for j in range(K):
            if i == j:
                continue
            d, _ = trees[j].query(posed[i], k=1, distance_upper_bound=bound)
            labels[i][d < eps_f] = 1
            if d.min() < eps_adj:
                A[i, j] = 1
    A = np.maximum(A, A.T)
    return labels, A


def label_structure_bruteforce(posed: list[np.ndarray], eps_f: float = EPS_F, eps_adj: float = EPS_ADJ):
    K = len(posed)
    labels = [np.zeros(len(p), dtype=np.uint8) for p in posed]
    A = np.zeros((K, K), dtype=np.uint8)
    for i in range(K):
        for j in range(K):
            if i == j:
                continue
            d = np.sqrt(np.sum((posed[i][:, None, :] - posed[j][None, :, :]) ** 2, axis=-1))
            nearest = d.min(axis=1)
            labels[i][nearest < eps_f] = 1
            if nearest.min() < eps_adj:
                A[i, j] = A[j, i] = 1
    return labels, A


def choose_anchor(budgets) -> int:
    """Fragment with the largest query budget; ties go to the smaller id."""
    return int(np.argmax(np.asarray(budgets)))


def augment_rotations(K: int, anchor: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform random rotations for every fragment except the anchor (identity)."""
    return [np.eye(3) if i == anchor else random_rotation(rng) for i in range(K)]


def augment(sample: AssemblySample, anchor: int, seed: int) -> AssemblySample:
    """Rotate every non-anchor fragment about its own centroid.

    GT transforms are updated so that the posed assembly is unchanged.
    """
    rots = augment_rotations(sample.K, anchor, np.random.default_rng(seed))
    frags, gts = [], []
    for frag, T, Ra in zip(sample.fragments, sample.gt_transforms, rots):
        if frag.id == anchor:
            frags.append(frag)
            gts.append(T)
            continue
        cloud = frag.points
        pts = cloud.points @ Ra.T
        pts -= pts.mean(axis=0)
        nrm = None if cloud.normals is None else cloud.normals @ Ra.T
        frags.append(Fragment(frag.id, PointCloud(pts, nrm), frag.area))
        gts.append(RigidTransform(T.rotation @ Ra.T, T.translation))
    return replace(sample, fragments=frags, gt_transforms=gts,
                   meta={**sample.meta, "augment_seed": int(seed), "anchor": int(anchor)})


def downsample(sample: AssemblySample, per_fragment: int, seed: int = 0) -> AssemblySample:
    """Random per-fragment subset; labels are carried along, not recomputed."""
    rng = np.random.default_rng(seed)
    frags, labels = [], []
    for frag, lab in zip(sample.fragments, sample.fracture_labels):
        n = len(frag.points)
        keep = np.sort(rng.choice(n, size=min(per_fragment, n), replace=False))
        nrm = None if frag.points.normals is None else frag.points.normals[keep]
        frags.append(Fragment(frag.id, PointCloud(frag.points.points[keep], nrm), frag.area))
        labels.append(lab[keep])
    return replace(sample, fragments=frags, fracture_labels=labels)


def k_schedule(count: int, k_min: int, k_max: int, histogram: dict[int, int] | None,
               seed: int) -> list[int]:
    """Fragment counts for a dataset; the histogram, when given, is met exactly."""
    if histogram:
        ks = [int(k) for k, c in sorted(histogram.items()) for _ in range(int(c))]
        if len(ks) != count:
            raise InvalidArgumentError(f"K histogram totals {len(ks)} objects, expected {count}")
    else:
        span = list(range(k_min, k_max + 1))
        ks = [span[i % len(span)] for i in range(count)]
    rng = np.random.default_rng(seed)
    return [ks[i] for i in rng.permutation(len(ks))]
