"""Evaluation: pose RMSE, part accuracy, object CD, adjacency quality, binning."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .fracture import EPS_ADJ, AssemblySample
from .geom import RigidTransform, chamfer_distance, random_rotation, rotation_error_deg

log = logging.getLogger(__name__)

PA_THRESHOLD = 0.01
K_BIN_EDGES = (2, 3, 4, 5, 6, 7, 11, 21, 51)
PA_BIN_EDGES = (0.0, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0)
HARD_PA = 0.95


def gauge_align(pred: list[RigidTransform], gt: list[RigidTransform], anchor: int) -> list[RigidTransform]:
    """Move the prediction so that its anchor pose coincides with the GT anchor pose."""
    G = gt[anchor].compose(pred[anchor].inverse())
    return [G.compose(T) for T in pred]


def pose_rmse(pred: list[RigidTransform], gt: list[RigidTransform]) -> tuple[float, float]:
    """RMS of geodesic rotation errors (deg) and translation L2 errors.

    Gauge alignment is the caller's job (see :func:`gauge_align`).
    """
    if len(pred) != len(gt):
        raise ValueError("pose_rmse needs equal transform counts")
    rot = np.array([rotation_error_deg(p.rotation, g.rotation) for p, g in zip(pred, gt)])
    trans = np.array([np.linalg.norm(p.translation - g.translation) for p, g in zip(pred, gt)])
    return float(np.sqrt(np.mean(rot**2))), float(np.sqrt(np.mean(trans**2)))


def fragment_chamfers(clouds: list[np.ndarray], pred: list[RigidTransform], gt: list[RigidTransform]) -> np.ndarray:
    return np.array([chamfer_distance(P.apply(c), G.apply(c)) for c, P, G in zip(clouds, pred, gt)])


def part_accuracy(clouds: list[np.ndarray], pred: list[RigidTransform], gt: list[RigidTransform],
                  threshold: float = PA_THRESHOLD) -> float:
    """Fraction of fragments whose posed Chamfer distance to GT is below ``threshold``."""
    return float(np.mean(fragment_chamfers(clouds, pred, gt) < threshold))


def object_cd(clouds: list[np.ndarray], pred: list[RigidTransform], gt: list[RigidTransform]) -> float:
    P = np.concatenate([T.apply(c) for c, T in zip(clouds, pred)])
    G = np.concatenate([T.apply(c) for c, T in zip(clouds, gt)])
    return chamfer_distance(P, G)


def induce_adjacency(clouds: list[np.ndarray], threshold: float = EPS_ADJ) -> np.ndarray:
    """A_ij = 1 iff the closest point pair between fragments i and j is below ``threshold``."""
    K = len(clouds)
    trees = [cKDTree(c) for c in clouds]
    A = np.zeros((K, K), dtype=np.uint8)
    for i in range(K):
        for j in range(i + 1, K):
            d, _ = trees[j].query(clouds[i], k=1, distance_upper_bound=threshold)
            if d.min() < threshold:
                A[i, j] = A[j, i] = 1
    return A


def induce_adjacency_bruteforce(clouds: list[np.ndarray], threshold: float = EPS_ADJ) -> np.ndarray:
    K = len(clouds)
    A = np.zeros((K, K), dtype=np.uint8)
    for i in range(K):
        for j in range(i + 1, K):
            d = np.sqrt(np.sum((clouds[i][:, None, :] - clouds[j][None, :, :]) ** 2, axis=-1))
            A[i, j] = A[j, i] = d.min() < threshold
    return A


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    empty_prediction: bool = False


def prf_counts(tp: int, fp: int, fn: int) -> PRF:
    empty = tp + fp == 0
    if empty:
        log.info("empty adjacency prediction: precision reported as 1 by convention")
    precision = 1.0 if empty else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return PRF(precision, recall, f1, tp, fp, fn, empty)


def adjacency_prf(A_pred, A_gt) -> PRF:
    """Precision/recall/F1 over the strict upper triangle."""
    A_pred, A_gt = np.asarray(A_pred), np.asarray(A_gt)
    iu = np.triu_indices(len(A_gt), k=1)
    p, g = A_pred[iu].astype(bool), A_gt[iu].astype(bool)
    return prf_counts(int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & g)))


def pooled_prf(pairs: list[tuple[np.ndarray, np.ndarray]]) -> PRF:
    tp = fp = fn = 0
    for A_pred, A_gt in pairs:
        r = adjacency_prf(A_pred, A_gt)
        tp, fp, fn = tp + r.tp, fp + r.fp, fn + r.fn
    return prf_counts(tp, fp, fn)


def metric_clouds(sample: AssemblySample, max_points: int, seed: int = 0) -> list[np.ndarray]:
    """Deterministic per-fragment subsets used for Chamfer-based metrics."""
    rng = np.random.default_rng(seed)
    out = []
    for f in sample.fragments:
        pts = f.points.points
        if len(pts) > max_points:
            pts = pts[np.sort(rng.choice(len(pts), size=max_points, replace=False))]
        out.append(pts)
    return out


@dataclass
class ObjectMetrics:
    object_id: str
    K: int
    pa: float
    rmse_rot: float
    rmse_trans: float
    cd: float
    adj: PRF | None = None
    induced: PRF | None = None
    extra: dict = field(default_factory=dict)


def evaluate_object(sample: AssemblySample, pred: list[RigidTransform], anchor: int, *,
                    clouds: list[np.ndarray] | None = None, A_scores=None,
                    edge_threshold: float = 0.5, pa_threshold: float = PA_THRESHOLD,
                    adj_threshold: float = EPS_ADJ, max_points: int = 2048) -> ObjectMetrics:
    gt = sample.gt_transforms
    aligned = gauge_align(pred, gt, anchor)
    clouds = clouds if clouds is not None else metric_clouds(sample, max_points)
    rr, rt = pose_rmse(aligned, gt)
    pa = part_accuracy(clouds, aligned, gt, pa_threshold)
    cd = object_cd(clouds, aligned, gt)
    adj = None
    if A_scores is not None:
        A_hat = (np.asarray(A_scores) > edge_threshold).astype(np.uint8)
        np.fill_diagonal(A_hat, 0)
        adj = adjacency_prf(A_hat, sample.adjacency)
    induced = adjacency_prf(induce_adjacency([T.apply(c) for c, T in zip(clouds, aligned)], adj_threshold),
                            sample.adjacency)
    return ObjectMetrics(sample.object_id, sample.K, pa, rr, rt, cd, adj, induced)


def random_pose_baseline(sample: AssemblySample, anchor: int, seed: int, **kw) -> ObjectMetrics:
    """Uniformly random rotations with zero translation for every fragment."""
    rng = np.random.default_rng(seed)
    pred = [RigidTransform(random_rotation(rng), np.zeros(3)) for _ in range(sample.K)]
    return evaluate_object(sample, pred, anchor, **kw)


# --- reports ------------------------------------------------------------------

CSV_COLUMNS = ("object_id", "K", "pa", "rmse_rot", "rmse_trans", "cd",
               "adj_precision", "adj_recall", "adj_f1", "adj_empty",
               "ind_precision", "ind_recall", "ind_f1",
               "refined_pa", "refined_rmse_rot", "refined_rmse_trans", "refined_cd", "delta_pa_pp")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def metrics_rows(gen: list[ObjectMetrics], refined: list[ObjectMetrics] | None = None) -> list[dict]:
    rows = []
    for i, m in enumerate(gen):
        r = refined[i] if refined else None
        rows.append({
            "object_id": m.object_id, "K": m.K, "pa": m.pa, "rmse_rot": m.rmse_rot,
            "rmse_trans": m.rmse_trans, "cd": m.cd,
            "adj_precision": m.adj.precision if m.adj else None,
            "adj_recall": m.adj.recall if m.adj else None,
            "adj_f1": m.adj.f1 if m.adj else None,
            "adj_empty": m.adj.empty_prediction if m.adj else None,
            "ind_precision": m.induced.precision, "ind_recall": m.induced.recall, "ind_f1": m.induced.f1,
            "refined_pa": r.pa if r else None,
            "refined_rmse_rot": r.rmse_rot if r else None,
            "refined_rmse_trans": r.rmse_trans if r else None,
            "refined_cd": r.cd if r else None,
            "delta_pa_pp": 100.0 * (r.pa - m.pa) if r else None,
        })
    return rows


def metrics_csv(rows: list[dict], config_hash: str = "") -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def _bin_label(lo, hi, pct=False):
    if pct:
        return f"{100 * lo:g}-{100 * hi:g}"
    return f"{lo}" if hi - lo == 1 else f"{lo}-{hi - 1}"


def binned_report(gen: list[ObjectMetrics], refined: list[ObjectMetrics] | None = None,
                  k_edges=K_BIN_EDGES, pa_edges=PA_BIN_EDGES, hard_pa: float = HARD_PA) -> dict:
    """Means per fragment-count bin and per first-pass PA bin.

    PA bins are closed on the right (a 0.5 first-pass PA falls in 0-50) and the
    first bin also holds PA = 0. The hard subset is first-pass PA <= ``hard_pa``.
    Empty bins are omitted rather than reported as zero.
    """
    if not gen:
        raise ValueError("binned_report needs at least one object")
    pa = np.array([m.pa for m in gen])
    K = np.array([m.K for m in gen])
    ref = None if refined is None else np.array([m.pa for m in refined])

    def summary(idx):
        out = {"count": int(idx.sum()), "pa": float(pa[idx].mean()),
               "rmse_rot": float(np.mean([gen[i].rmse_rot for i in np.flatnonzero(idx)])),
               "rmse_trans": float(np.mean([gen[i].rmse_trans for i in np.flatnonzero(idx)]))}
        if ref is not None:
            out["refined_pa"] = float(ref[idx].mean())
            out["delta_pp"] = 100.0 * float(ref[idx].mean() - pa[idx].mean())
        return out

    k_bins = {}
    for lo, hi in zip(k_edges[:-1], k_edges[1:]):
        idx = (K >= lo) & (K < hi)
        if idx.any():
            k_bins[_bin_label(lo, hi)] = summary(idx)
    pa_bins = {}
    for b, (lo, hi) in enumerate(zip(pa_edges[:-1], pa_edges[1:])):
        idx = (pa > lo) & (pa <= hi) if b else (pa >= lo) & (pa <= hi)
        if idx.any():
            pa_bins[_bin_label(lo, hi, pct=True)] = summary(idx)
    hard = pa <= hard_pa
    report = {
        "objects": len(gen),
        "overall": summary(np.ones(len(gen), dtype=bool)),
        "k_bins": k_bins,
        "pa_bins": pa_bins,
        "hard_subset": summary(hard) if hard.any() else None,
        "hard_fraction": float(hard.mean()),
    }
    return report
