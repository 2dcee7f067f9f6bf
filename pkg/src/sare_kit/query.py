"""Query-point conditioning: budgets, FPS queries, local tokens, condition tokens."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import InvalidArgumentError
from .fracture import AssemblySample, Fragment, choose_anchor
from .geom import allocate_budget, fps_sample

BUDGET_FLOOR = 8
BANDS = 8
LOCAL_K = 16
TOKEN_DIM = 15
N_ANGLE_BINS = 8

# fixed scales mapping raw descriptor entries into [-1, 1]
EIG_SCALE = 1e-3      # covariance eigenvalue (length²)
OFFSET_SCALE = 0.02   # mean offset along the query normal
RADIUS_SCALE = 0.1    # k-NN radius


@dataclass
class QuerySet:
    """Per-fragment query coordinates/normals in the fragment (input) frame."""
    indices: list[np.ndarray]
    queries: list[np.ndarray]
    normals: list[np.ndarray]
    budgets: list[int]
    gt_targets: list[np.ndarray] | None = None

    @property
    def M(self) -> int:
        return int(sum(self.budgets))

    @property
    def K(self) -> int:
        return len(self.budgets)

    @property
    def fragment_map(self) -> np.ndarray:
        return np.repeat(np.arange(self.K), self.budgets)

    @property
    def anchor_id(self) -> int:
        return choose_anchor(self.budgets)

    def flat_queries(self) -> np.ndarray:
        return np.concatenate(self.queries)

    def flat_normals(self) -> np.ndarray:
        return np.concatenate(self.normals)

    def flat_targets(self) -> np.ndarray:
        if self.gt_targets is None:
            raise InvalidArgumentError("query set carries no GT targets")
        return np.concatenate(self.gt_targets)


def sample_queries(sample: AssemblySample, M: int, seed: int) -> QuerySet:
    if M < BUDGET_FLOOR * sample.K:
        raise InvalidArgumentError(f"M={M} must be at least {BUDGET_FLOOR}*K={BUDGET_FLOOR * sample.K}")
    budgets = allocate_budget([f.area for f in sample.fragments], M, BUDGET_FLOOR)
    rng = np.random.default_rng(seed)
    idx, qs, ns, tg = [], [], [], []
    for frag, T, m in zip(sample.fragments, sample.gt_transforms, budgets):
        sel = fps_sample(frag.points.points, m, int(rng.integers(2**31)))
        idx.append(sel)
        qs.append(frag.points.points[sel])
        ns.append(frag.points.normals[sel])
        tg.append(T.apply(frag.points.points[sel]))
    return QuerySet(idx, qs, ns, budgets, tg)


def fourier_encode(v, bands: int = BANDS) -> np.ndarray:
    """sin/cos of 2^j·π·v for j < bands, ordered axis-major then frequency.

    Accepts a single 3-vector or an (N, 3) array; output has 6·bands columns.
    """
    if bands < 1:
        raise InvalidArgumentError("bands must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    v = v.reshape(-1, 3)
    ang = v[:, :, None] * (np.pi * 2.0 ** np.arange(bands))  # (N, 3, bands)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(len(v), -1)
    return enc[0] if single else enc


def local_token(fragment: Fragment, query_index: int, k: int = LOCAL_K,
                tree: cKDTree | None = None) -> np.ndarray:
    return local_tokens(fragment, np.array([query_index]), k, tree)[0]


def local_tokens(fragment: Fragment, query_indices, k: int = LOCAL_K,
                 tree: cKDTree | None = None) -> np.ndarray:
    """15-d rigid-invariant descriptor of each query's k-NN neighborhood.

    Layout: 3 sorted covariance eigenvalues, 2 eigenvalue ratios, mean offset
    along the query normal, neighborhood radius, 8-bin histogram of angles
    between neighbor normals and the query normal (linear binning).
    """
    pts = fragment.points.points
    nrm = fragment.points.normals
    if k > len(pts):
        raise InvalidArgumentError(f"k={k} exceeds fragment point count {len(pts)}")
    if nrm is None:
        raise InvalidArgumentError("local tokens need fragment normals")
    qi = np.asarray(query_indices, dtype=np.int64)
    tree = tree or cKDTree(pts)
    dist, nbr = tree.query(pts[qi], k=k)
    dist = dist.reshape(len(qi), k)
    nbr = nbr.reshape(len(qi), k)
    nb = pts[nbr]
    centred = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k
    eig = np.clip(np.linalg.eigvalsh(cov)[:, ::-1], 0.0, None)  # descending
    top = np.maximum(eig[:, :1], 1e-18)
    ratios = eig[:, 1:] / top
    qn = nrm[qi]
    offset = np.einsum("nki,ni->n", nb - pts[qi][:, None, :], qn) / k
    radius = dist.max(axis=1)
    cosang = np.clip(np.einsum("nki,ni->nk", nrm[nbr], qn), -1.0, 1.0)
    # linear binning between bin centres keeps the histogram continuous in the
    # angle; hard bins flip on exact right angles, which synthetic shapes hit
    pos = np.clip(np.arccos(cosang) / np.pi * N_ANGLE_BINS - 0.5, 0.0, N_ANGLE_BINS - 1.0)
    lo = np.minimum(np.floor(pos).astype(np.int64), N_ANGLE_BINS - 2)
    w = pos - lo
    hist = np.zeros((len(qi), N_ANGLE_BINS))
    rows = np.repeat(np.arange(len(qi)), k)
    np.add.at(hist, (rows, lo.ravel()), (1.0 - w).ravel())
    np.add.at(hist, (rows, lo.ravel() + 1), w.ravel())
    hist /= k
    return np.concatenate([
        np.tanh(eig / EIG_SCALE),
        2.0 * ratios - 1.0,
        np.tanh(offset / OFFSET_SCALE)[:, None],
        np.tanh(radius / RADIUS_SCALE)[:, None],
        2.0 * hist - 1.0,
    ], axis=1)


def query_tokens(sample: AssemblySample, qset: QuerySet, k: int = LOCAL_K) -> np.ndarray:
    """Local tokens for all queries in flat (fragment-major) order."""
    return np.concatenate([local_tokens(f, idx, k) for f, idx in zip(sample.fragments, qset.indices)])


def condition_features(z: np.ndarray, queries: np.ndarray, normals: np.ndarray,
                       bands: int = BANDS) -> np.ndarray:
    """Rows ``[z; γ(q); γ(n)]`` feeding the learnable projection."""
    return np.concatenate([z, fourier_encode(queries, bands), fourier_encode(normals, bands)], axis=1)


@dataclass
class ConditionSet:
    tokens: torch.Tensor
    fragment_map: np.ndarray
    anchor_id: int
    anchor_mask: np.ndarray

    @property
    def M(self) -> int:
        return len(self.fragment_map)


def build_conditions(features, fragment_map, part_index, anchor_id: int,
                     proj_weight, proj_bias, part_embed, anchor_embed) -> ConditionSet:
    """``c = φ([z; γ(q); γ(n)]) + e_i``, plus the anchor embedding on anchor tokens.

    ``part_index[i]`` is the row of ``part_embed`` used for fragment ``i``.
    Works on torch tensors so the parameters stay differentiable.
    """
    feats = torch.as_tensor(features)
    W = torch.as_tensor(proj_weight)
    if feats.ndim != 2 or W.ndim != 2 or W.shape[1] != feats.shape[1]:
        raise InvalidArgumentError(
            f"projection {tuple(W.shape)} does not accept features {tuple(feats.shape)}")
    table = torch.as_tensor(part_embed)
    anchor_vec = torch.as_tensor(anchor_embed)
    D = W.shape[0]
    if table.shape[-1] != D or anchor_vec.shape[-1] != D or (proj_bias is not None and proj_bias.shape[-1] != D):
        raise InvalidArgumentError("embedding widths must equal the projection output width")
    fmap = np.asarray(fragment_map, dtype=np.int64)
    if len(fmap) != feats.shape[0]:
        raise InvalidArgumentError("fragment map length differs from token count")
    c = feats.to(W.dtype) @ W.T
    if proj_bias is not None:
        c = c + proj_bias
    rows = torch.as_tensor(np.asarray(part_index, dtype=np.int64)[fmap])
    c = c + table[rows]
    mask = fmap == anchor_id
    c = c + torch.as_tensor(mask, dtype=c.dtype)[:, None] * anchor_vec
    return ConditionSet(c, fmap, int(anchor_id), mask.astype(np.uint8))
