"""Euler sampling of the learned field and rigid pose recovery."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .errors import DegenerateGeometryError, InvalidArgumentError, NumericError, SchemaError, \
    TruncatedFileError, VersionMismatchError
from .flow import FlowNet, ModelInputs
from .fracture import AssemblySample
from .geom import RigidTransform, kabsch_align

DEFAULT_STEPS = 50
HEAD_AVERAGE = 5
PREDICTION_VERSION = "1"

# field(x, t) -> (velocity, fracture logits or None, pair logits or None)
Field = Callable[[np.ndarray, float], tuple]


class ModelField:
    """Adapter exposing a trained network as a numpy velocity field."""

    def __init__(self, model: FlowNet, inputs: ModelInputs):
        self.model = model
        self.inputs = inputs

    @torch.no_grad()
    def __call__(self, x: np.ndarray, t: float):
        v, hidden = self.model(torch.from_numpy(x).to(self.model.dtype), t, self.inputs)
        f, a = self.model.structural_heads(hidden, self.inputs.fragment_map)
        as_np = lambda z: None if z is None else z.double().numpy()  # noqa: E731
        return v.double().numpy(), as_np(f), as_np(a)


def straight_line_field(x0: np.ndarray) -> Field:
    """Exact field of the straight-line flow ending at ``x0``: v = (x - x0) / t."""
    x0 = np.asarray(x0, dtype=np.float64)

    def f(x, t):
        return (x - x0) / t, None, None
    return f


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class SamplePass:
    x0_hat: np.ndarray
    eps: np.ndarray
    f_probs: np.ndarray | None
    A_scores: np.ndarray | None


class HeadAverager:
    """Running mean of head probabilities over the final ``n`` model calls."""

    def __init__(self, steps: int, n: int = HEAD_AVERAGE):
        self.first = max(0, steps - n)
        self.f = self.a = None
        self.count = 0

    def add(self, step: int, f_logits, a_logits):
        if step < self.first:
            return
        self.count += 1
        if f_logits is not None:
            p = _sigmoid(f_logits)
            self.f = p if self.f is None else self.f + p
        if a_logits is not None:
            p = _sigmoid(a_logits)
            np.fill_diagonal(p, 0.0)
            self.a = p if self.a is None else self.a + p

    def result(self):
        if self.count == 0:
            return None, None
        return (None if self.f is None else self.f / self.count,
                None if self.a is None else self.a / self.count)


def time_grid(steps: int) -> np.ndarray:
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    return np.linspace(1.0, 0.0, steps + 1)


def initial_state(M: int, seed: int, anchor_mask, anchor_positions) -> tuple[np.ndarray, np.ndarray, np.random.Generator]:
    """Noise endpoint with the anchor block replaced by its known coordinates."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((M, 3))
    mask = np.asarray(anchor_mask, dtype=bool)
    if mask.any():
        eps[mask] = np.asarray(anchor_positions, dtype=np.float64)[mask]
    return eps, eps.copy(), rng


def euler_step(field: Field, x: np.ndarray, t: float, s: float, anchor_mask: np.ndarray, step: int):
    v, f_logits, a_logits = field(x, t)
    v = np.array(v, dtype=np.float64)
    v[anchor_mask] = 0.0
    x_next = x - (t - s) * v
    if not np.all(np.isfinite(x_next)):
        raise NumericError(f"non-finite sampler state at step {step}")
    return x_next, f_logits, a_logits


def euler_sample(field: Field, M: int, steps: int = DEFAULT_STEPS, seed: int = 0,
                 anchor_mask=None, anchor_positions=None) -> SamplePass:
    """Integrate from t=1 to t=0 on a uniform grid, anchor tokens held fixed."""
    ts = time_grid(steps)
    mask = np.zeros(M, dtype=bool) if anchor_mask is None else np.asarray(anchor_mask, dtype=bool)
    eps, x, _ = initial_state(M, seed, mask, anchor_positions)
    heads = HeadAverager(steps)
    for k in range(steps):
        x, fl, al = euler_step(field, x, ts[k], ts[k + 1], mask, k)
        heads.add(k, fl, al)
    f_probs, a_scores = heads.result()
    return SamplePass(x, eps, f_probs, a_scores)


def recover_poses(queries: list[np.ndarray], x0_hat: np.ndarray, fragment_map) -> tuple[list[RigidTransform], list[bool]]:
    """Kabsch from each fragment's input-frame queries to its slice of ``x0_hat``.

    Degenerate fragments get the identity and a ``True`` flag.
    """
    fmap = np.asarray(fragment_map)
    transforms, degenerate = [], []
    for i, q in enumerate(queries):
        target = x0_hat[fmap == i]
        try:
            transforms.append(kabsch_align(q, target))
            degenerate.append(False)
        except DegenerateGeometryError:
            transforms.append(RigidTransform.identity())
            degenerate.append(True)
    return transforms, degenerate


def assemble(sample: AssemblySample, transforms: list[RigidTransform]) -> tuple[list[np.ndarray], np.ndarray]:
    if len(transforms) != sample.K:
        raise InvalidArgumentError("need one transform per fragment")
    clouds = [T.apply(f.points.points) for f, T in zip(sample.fragments, transforms)]
    return clouds, np.concatenate(clouds)


@dataclass
class SampleResult:
    x0_hat: np.ndarray
    eps: np.ndarray
    f_probs: np.ndarray | None
    A_scores: np.ndarray | None
    transforms: list[RigidTransform]
    degenerate: list[bool]
    meta: dict = field(default_factory=dict)


def generate(model: FlowNet, view, steps: int = DEFAULT_STEPS, seed: int = 0) -> SampleResult:
    """First inference pass on a prepared evaluation view."""
    inputs = view.inputs
    qset = view.prep.qset
    anchor_pos = np.zeros((qset.M, 3))
    anchor_pos[qset.fragment_map == qset.anchor_id] = qset.queries[qset.anchor_id]
    sp = euler_sample(ModelField(model, inputs), qset.M, steps, seed, inputs.anchor_mask, anchor_pos)
    transforms, degenerate = recover_poses(qset.queries, sp.x0_hat, qset.fragment_map)
    return SampleResult(sp.x0_hat, sp.eps, sp.f_probs, sp.A_scores, transforms, degenerate,
                        {"steps": steps, "seed": seed})


# --- prediction files ---------------------------------------------------------

def _write_blob(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(np.array(arr.shape[:1], dtype="<u4").tobytes())
        fh.write(arr.tobytes())


def _read_blob(path: Path, cols: int) -> np.ndarray:
    raw = path.read_bytes() if path.exists() else b""
    if len(raw) < 4:
        raise TruncatedFileError(path, "count")
    n = int(np.frombuffer(raw, "<u4", 1)[0])
    if len(raw) < 4 + 4 * n * cols:
        raise TruncatedFileError(path, "values")
    arr = np.frombuffer(raw, "<f4", n * cols, 4).astype(np.float64)
    return arr.reshape(n, cols) if cols > 1 else arr


def write_prediction(directory: Path, object_id: str, result: SampleResult, *, config_hash: str,
                     extra: dict | None = None) -> Path:
    out = Path(directory) / object_id
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": PREDICTION_VERSION,
        "object_id": object_id,
        "config_hash": config_hash,
        "transforms": [{"rotation": T.rotation.tolist(), "translation": T.translation.tolist(),
                        "degenerate": bool(d)} for T, d in zip(result.transforms, result.degenerate)],
        "A_scores": None if result.A_scores is None else np.asarray(result.A_scores).tolist(),
        "has_f_probs": result.f_probs is not None,
        "meta": result.meta,
        **(extra or {}),
    }
    _write_blob(out / "x0_hat.bin", result.x0_hat)
    _write_blob(out / "eps.bin", result.eps)
    if result.f_probs is not None:
        _write_blob(out / "f_probs.bin", result.f_probs)
    (out / "prediction.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def read_prediction(directory: Path) -> tuple[SampleResult, dict]:
    directory = Path(directory)
    mpath = directory / "prediction.json"
    if not mpath.exists():
        raise SchemaError(f"{directory}: missing prediction.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != PREDICTION_VERSION:
        raise VersionMismatchError(f"{mpath}: unsupported prediction version {manifest.get('format_version')!r}")
    transforms = [RigidTransform(np.array(d["rotation"]), np.array(d["translation"])) for d in manifest["transforms"]]
    degenerate = [bool(d["degenerate"]) for d in manifest["transforms"]]
    A = None if manifest["A_scores"] is None else np.array(manifest["A_scores"], dtype=np.float64)
    f = _read_blob(directory / "f_probs.bin", 1) if manifest["has_f_probs"] else None
    result = SampleResult(_read_blob(directory / "x0_hat.bin", 3), _read_blob(directory / "eps.bin", 3),
                          f, A, transforms, degenerate, manifest.get("meta", {}))
    return result, manifest
