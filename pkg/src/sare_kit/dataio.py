"""On-disk sample format.

``<root>/<object_id>/manifest.json`` plus ``frag_<i>.bin`` per fragment, each
holding ``uint32 count``, ``count*3`` float32 points, ``count*3`` float32
normals and ``count`` uint8 fracture labels, all little-endian.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, SchemaError, TruncatedFileError, VersionMismatchError
from .fracture import EPS_ADJ, EPS_F, AssemblySample, Fragment, label_structure
from .geom import PointCloud, RigidTransform, estimate_normals

FORMAT_VERSION = "1"
MANIFEST_KEYS = ("format_version", "object_id", "K", "seeds", "eps_f", "eps_adj", "areas",
                 "adjacency_edges", "gt_transforms", "fragments")


def _transform_json(T: RigidTransform) -> dict:
    return {"rotation": T.rotation.tolist(), "translation": T.translation.tolist()}


def _transform_from(d: dict) -> RigidTransform:
    return RigidTransform(np.array(d["rotation"], dtype=np.float64), np.array(d["translation"], dtype=np.float64))


def write_sample(root: Path, sample: AssemblySample, extra: dict | None = None) -> Path:
    sample.validate()
    out = Path(root) / sample.object_id
    out.mkdir(parents=True, exist_ok=True)
    A = np.asarray(sample.adjacency)
    edges = [[int(i), int(j)] for i, j in zip(*np.nonzero(A))]
    frag_entries = []
    for frag, labels in zip(sample.fragments, sample.fracture_labels):
        name = f"frag_{frag.id}.bin"
        n = len(frag.points)
        normals = frag.points.normals if frag.points.normals is not None else np.zeros((n, 3))
        with open(out / name, "wb") as fh:
            fh.write(np.uint32(n).astype("<u4").tobytes())
            fh.write(frag.points.points.astype("<f4").tobytes())
            fh.write(normals.astype("<f4").tobytes())
            fh.write(np.asarray(labels, dtype=np.uint8).tobytes())
        frag_entries.append({"file": name, "count": n})
    meta = sample.meta
    manifest = {
        "format_version": FORMAT_VERSION,
        "object_id": sample.object_id,
        "K": sample.K,
        "base_shape": meta.get("base_shape"),
        "seeds": {"generation": meta.get("seed")},
        "eps_f": meta.get("eps_f", EPS_F),
        "eps_adj": meta.get("eps_adj", EPS_ADJ),
        "areas": [float(f.area) for f in sample.fragments],
        "adjacency_edges": edges,
        "gt_transforms": [_transform_json(T) for T in sample.gt_transforms],
        "fragments": frag_entries,
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def _read_fragment(path: Path, count: int):
    raw = path.read_bytes() if path.exists() else b""
    sections = (("count", 4), ("points", 12 * count), ("normals", 12 * count), ("labels", count))
    off = 0
    for section, size in sections:
        if len(raw) < off + size:
            raise TruncatedFileError(path, section)
        off += size
    if int(np.frombuffer(raw, "<u4", 1)[0]) != count:
        raise SchemaError(f"{path}: point count disagrees with manifest")
    pts = np.frombuffer(raw, "<f4", 3 * count, 4).reshape(count, 3).astype(np.float64)
    nrm = np.frombuffer(raw, "<f4", 3 * count, 4 + 12 * count).reshape(count, 3).astype(np.float64)
    lab = np.frombuffer(raw, np.uint8, count, 4 + 24 * count).copy()
    return pts, nrm, lab


def read_sample(path: Path) -> AssemblySample:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise SchemaError(f"{path}: missing manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise TruncatedFileError(mpath, f"manifest ({exc.msg})") from exc
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise SchemaError(f"{mpath}: missing keys {missing}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{mpath}: format version {manifest['format_version']!r}, expected {FORMAT_VERSION!r}")
    K = int(manifest["K"])
    if not (len(manifest["areas"]) == len(manifest["fragments"]) == len(manifest["gt_transforms"]) == K):
        raise SchemaError(f"{mpath}: per-fragment lists disagree with K={K}")
    A = np.zeros((K, K), dtype=np.uint8)
    for i, j in manifest["adjacency_edges"]:
        if not (0 <= i < K and 0 <= j < K) or i == j:
            raise SchemaError(f"{mpath}: invalid adjacency edge ({i}, {j})")
        A[i, j] = 1
    if np.any(A != A.T):
        raise SchemaError(f"{mpath}: adjacency is not symmetric")
    fragments, labels = [], []
    for i, entry in enumerate(manifest["fragments"]):
        pts, nrm, lab = _read_fragment(path / entry["file"], int(entry["count"]))
        fragments.append(Fragment(i, PointCloud(pts, nrm), float(manifest["areas"][i])))
        labels.append(lab)
    sample = AssemblySample(
        object_id=manifest["object_id"],
        fragments=fragments,
        gt_transforms=[_transform_from(d) for d in manifest["gt_transforms"]],
        adjacency=A,
        fracture_labels=labels,
        meta={"base_shape": manifest.get("base_shape"), "seed": manifest["seeds"].get("generation"),
              "eps_f": manifest["eps_f"], "eps_adj": manifest["eps_adj"]},
    )
    try:
        sample.validate()
    except InvalidArgumentError as exc:
        raise SchemaError(f"{mpath}: {exc}") from exc
    return sample


def import_xyz(directory: Path, object_id: str | None = None, eps_f: float = EPS_F,
               eps_adj: float = EPS_ADJ, normal_k: int = 16) -> AssemblySample:
    """Read ``*.xyz`` fragment files given in their assembled pose.

    Rows are ``x y z`` or ``x y z nx ny nz``. Fragments are centered, normals
    estimated when absent, and labels derived from the assembled pose.
    """
    directory = Path(directory)
    files = sorted(directory.glob("*.xyz"))
    if len(files) < 2:
        raise SchemaError(f"{directory}: need at least two .xyz fragment files")
    fragments, transforms = [], []
    for i, f in enumerate(files):
        rows = np.loadtxt(f, ndmin=2)
        if rows.shape[1] not in (3, 6):
            raise SchemaError(f"{f}: expected 3 or 6 columns, got {rows.shape[1]}")
        pts = rows[:, :3]
        if rows.shape[1] == 6:
            nrm = rows[:, 3:] / np.linalg.norm(rows[:, 3:], axis=1, keepdims=True)
        else:
            nrm = estimate_normals(pts, min(normal_k, len(pts))).normals
        c = pts.mean(axis=0)
        # area proxy: point count, so budgets follow sampling density
        fragments.append(Fragment(i, PointCloud(pts - c, nrm), float(len(pts))))
        transforms.append(RigidTransform(np.eye(3), c))
    K = len(fragments)
    sample = AssemblySample(object_id or directory.name, fragments, transforms,
                            np.zeros((K, K), dtype=np.uint8),
                            [np.zeros(len(f.points), dtype=np.uint8) for f in fragments],
                            meta={"eps_f": eps_f, "eps_adj": eps_adj, "source": str(directory)})
    sample.fracture_labels, sample.adjacency = label_structure(sample, eps_f, eps_adj)
    return sample
