"""Rectified-flow velocity transformer with fracture and adjacency heads."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ChecksumError, InvalidArgumentError, NumericError, SchemaError, \
    TrainingDivergedError, TruncatedFileError, VersionMismatchError
from .fracture import MAX_K
from .query import BANDS, TOKEN_DIM, ConditionSet, build_conditions

X_BANDS = 4
T_FREQS = 16


@dataclass
class ModelSpec:
    depth: int = 4
    width: int = 128
    heads: int = 4
    attach_layer: int = 4
    mlp_ratio: int = 4
    token_dim: int = TOKEN_DIM
    bands: int = BANDS
    x_bands: int = X_BANDS
    max_parts: int = MAX_K
    fracture_head: bool = True
    adjacency_head: bool = True

    @property
    def feature_dim(self) -> int:
        return self.token_dim + 2 * 6 * self.bands

    def validate(self) -> None:
        if self.width % self.heads:
            raise InvalidArgumentError("width must be divisible by heads")
        if not 1 <= self.attach_layer <= self.depth:
            raise InvalidArgumentError(f"attach_layer must lie in [1, {self.depth}]")


@dataclass
class ModelInputs:
    """Per-object conditioning inputs (everything except x_t and t)."""
    features: torch.Tensor      # M x feature_dim
    fragment_map: np.ndarray    # M
    part_index: np.ndarray      # K, rows of the part-embedding table
    anchor_id: int

    @property
    def K(self) -> int:
        return len(self.part_index)

    @property
    def anchor_mask(self) -> np.ndarray:
        return (self.fragment_map == self.anchor_id).astype(np.uint8)


def _fourier(v: torch.Tensor, bands: int) -> torch.Tensor:
    ang = v[..., None] * (math.pi * 2.0 ** torch.arange(bands, dtype=v.dtype))
    return torch.stack([ang.sin(), ang.cos()], dim=-1).flatten(-3)


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class Block(nn.Module):
    """Pre-norm transformer block with adaptive LayerNorm from the time embedding."""

    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_ratio * width), nn.GELU(),
                                 nn.Linear(mlp_ratio * width, width))
        self.ada = nn.Linear(width, 6 * width)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def attention(self, x):
        M, D = x.shape
        q, k, v = self.qkv(x).view(M, 3, self.heads, D // self.heads).permute(1, 2, 0, 3)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D // self.heads), dim=-1)
        return self.out((w @ v).transpose(0, 1).reshape(M, D))

    def forward(self, x, temb):
        s1, c1, g1, s2, c2, g2 = self.ada(F.silu(temb)).chunk(6, dim=-1)
        x = x + g1 * self.attention(_modulate(self.norm1(x), s1, c1))
        return x + g2 * self.mlp(_modulate(self.norm2(x), s2, c2))


class FlowNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        D = spec.width
        self.proj = nn.Linear(spec.feature_dim, D)
        self.part_embed = nn.Parameter(0.02 * torch.randn(spec.max_parts, D))
        self.anchor_embed = nn.Parameter(0.02 * torch.randn(D))
        self.x_embed = nn.Linear(3 + 6 * spec.x_bands, D)
        self.t_embed = nn.Sequential(nn.Linear(2 * T_FREQS, D), nn.SiLU(), nn.Linear(D, D))
        self.blocks = nn.ModuleList(Block(D, spec.heads, spec.mlp_ratio) for _ in range(spec.depth))
        self.norm_out = nn.LayerNorm(D)
        self.ada_out = nn.Linear(D, 2 * D)
        self.head = nn.Linear(D, 3)
        for lin in (self.ada_out, self.head):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        if spec.fracture_head:
            self.fracture = nn.Sequential(nn.LayerNorm(D), nn.Linear(D, D), nn.GELU(), nn.Linear(D, 1))
        if spec.adjacency_head:
            self.pool_norm = nn.LayerNorm(D)
            self.pair = nn.Sequential(nn.Linear(3 * D, D), nn.GELU(), nn.Linear(D, 1))

    @classmethod
    def create(cls, spec: ModelSpec, seed: int, dtype=torch.float32) -> "FlowNet":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = cls(spec)
        return model.to(dtype)

    @property
    def dtype(self):
        return self.proj.weight.dtype

    def conditions(self, inputs: ModelInputs) -> ConditionSet:
        return build_conditions(inputs.features.to(self.dtype), inputs.fragment_map, inputs.part_index,
                                inputs.anchor_id, self.proj.weight, self.proj.bias,
                                self.part_embed, self.anchor_embed)

    def time_embedding(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=self.dtype).reshape(1)
        freqs = 2.0 * math.pi * torch.exp(torch.linspace(0.0, math.log(100.0), T_FREQS, dtype=self.dtype))
        ang = t * freqs
        return self.t_embed(torch.cat([ang.sin(), ang.cos()]))

    def forward(self, x_t, t, inputs: ModelInputs):
        """Return ``(v_hat, hidden)``; ``hidden`` is the residual stream after
        block ``attach_layer``. The anchor clamp is applied by callers."""
        x_t = torch.as_tensor(x_t, dtype=self.dtype)
        if not torch.isfinite(x_t).all() or not math.isfinite(float(t)):
            raise NumericError("non-finite input to the velocity network")
        if x_t.shape[0] != len(inputs.fragment_map):
            raise InvalidArgumentError("x_t and condition tokens differ in length")
        cond = self.conditions(inputs)
        temb = self.time_embedding(t)
        h = cond.tokens + self.x_embed(torch.cat([x_t, _fourier(x_t, self.spec.x_bands)], dim=-1)) + temb
        hidden = None
        for depth, block in enumerate(self.blocks, start=1):
            h = block(h, temb)
            if depth == self.spec.attach_layer:
                hidden = h
        shift, scale = self.ada_out(F.silu(temb)).chunk(2, dim=-1)
        v_hat = self.head(_modulate(self.norm_out(h), shift, scale))
        return v_hat, hidden

    def structural_heads(self, hidden, fragment_map):
        """Token fracture logits and a symmetric K x K pair-logit matrix.

        Either output is ``None`` when its head is disabled. The diagonal of the
        pair matrix is zero and carries no meaning.
        """
        fmap = torch.as_tensor(np.asarray(fragment_map, dtype=np.int64))
        f_logits = self.fracture(hidden).squeeze(-1) if self.spec.fracture_head else None
        a_logits = None
        if self.spec.adjacency_head:
            K = int(fmap.max()) + 1
            onehot = F.one_hot(fmap, K).to(hidden.dtype)
            pooled = (onehot.T @ self.pool_norm(hidden)) / onehot.sum(0)[:, None]
            pi = pooled[:, None, :].expand(K, K, -1)
            pj = pooled[None, :, :].expand(K, K, -1)
            s = self.pair(torch.cat([pi, pj, pi * pj], dim=-1)).squeeze(-1)
            a_logits = 0.5 * (s + s.T) * (1 - torch.eye(K, dtype=hidden.dtype))
        return f_logits, a_logits


def clamp_anchor(v: torch.Tensor, anchor_mask) -> torch.Tensor:
    keep = 1 - torch.as_tensor(np.asarray(anchor_mask), dtype=v.dtype)
    return v * keep[:, None]


# --- flow variables and objective -------------------------------------------

@dataclass
class FlowBatch:
    x0: torch.Tensor
    x1: torch.Tensor
    t: float
    x_t: torch.Tensor
    v_t: torch.Tensor


def interpolate(x0, x1, t: float) -> FlowBatch:
    x0, x1 = torch.as_tensor(x0), torch.as_tensor(x1)
    if x0.shape != x1.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    if not 0.0 < t <= 1.0:
        raise InvalidArgumentError(f"t must lie in (0, 1], got {t}")
    return FlowBatch(x0, x1, t, (1 - t) * x0 + t * x1, x1 - x0)


@dataclass
class LossBreakdown:
    l_rf: float
    l_F: float
    l_A: float
    lambda_F: float
    lambda_A: float
    total: float
    tensor: torch.Tensor | None = field(default=None, repr=False)


def loss_terms(v_hat, batch: FlowBatch, f_logits, F_labels, A_logits, A_gt,
               lambda_F: float = 0.01, lambda_A: float = 0.01, anchor_mask=None):
    """``(l_rf, l_F, l_A, total)`` as float64 tensors; disabled heads give zeros.

    The three components are combined in float64 so the logged total is the
    exact weighted sum of the logged components.
    """
    M = v_hat.shape[0]
    mask = np.zeros(M, dtype=np.uint8) if anchor_mask is None else np.asarray(anchor_mask)
    v = clamp_anchor(v_hat, mask)
    free = torch.as_tensor(1 - mask, dtype=v.dtype)
    n_free = max(float(free.sum()), 1.0)
    l_rf = (((v - batch.v_t.to(v.dtype)) ** 2).sum(-1) * free).sum() / (3.0 * n_free)
    zero = torch.zeros((), dtype=torch.float64)
    l_F = zero
    if f_logits is not None:
        l_F = F.binary_cross_entropy_with_logits(f_logits, torch.as_tensor(F_labels, dtype=f_logits.dtype))
    l_A = zero
    if A_logits is not None:
        K = A_logits.shape[0]
        iu = torch.triu_indices(K, K, offset=1)
        target = torch.as_tensor(np.asarray(A_gt), dtype=A_logits.dtype)[iu[0], iu[1]]
        l_A = F.binary_cross_entropy_with_logits(A_logits[iu[0], iu[1]], target)
    l_rf64, l_F64, l_A64 = l_rf.double(), l_F.double(), l_A.double()
    return l_rf64, l_F64, l_A64, l_rf64 + lambda_F * l_F64 + lambda_A * l_A64


def total_loss(v_hat, batch: FlowBatch, f_logits, F_labels, A_logits, A_gt,
               lambda_F: float = 0.01, lambda_A: float = 0.01, anchor_mask=None) -> LossBreakdown:
    """Flow MSE over non-anchor tokens plus weighted BCE structure terms."""
    l_rf, l_F, l_A, total = loss_terms(v_hat, batch, f_logits, F_labels, A_logits, A_gt,
                                       lambda_F, lambda_A, anchor_mask)
    return LossBreakdown(l_rf.item(), l_F.item(), l_A.item(), lambda_F, lambda_A, total.item(), total)


# --- training ---------------------------------------------------------------

@dataclass
class TrainExample:
    """One object's training view: inputs, clean targets, structural labels."""
    inputs: ModelInputs
    x0: torch.Tensor            # M x 3 assembled queries, anchor frame
    fracture: np.ndarray        # M
    adjacency: np.ndarray       # K x K


def flow_batch(example: TrainExample, t: float, noise: torch.Tensor) -> FlowBatch:
    """Interpolation whose anchor rows sit at their known positions for all t."""
    anchor = torch.as_tensor(example.inputs.anchor_mask, dtype=torch.bool)
    x1 = torch.where(anchor[:, None], example.x0.to(noise.dtype), noise)
    return interpolate(example.x0.to(noise.dtype), x1, t)


def _head_inputs(model: FlowNet, example: TrainExample, batch: FlowBatch, lambda_F: float, lambda_A: float):
    v_hat, hidden = model(batch.x_t, batch.t, example.inputs)
    f_logits, a_logits = model.structural_heads(hidden, example.inputs.fragment_map)
    return (v_hat, batch, f_logits, example.fracture, a_logits, example.adjacency,
            lambda_F if model.spec.fracture_head else 0.0,
            lambda_A if model.spec.adjacency_head else 0.0,
            example.inputs.anchor_mask)


def loss_for(model: FlowNet, example: TrainExample, batch: FlowBatch,
             lambda_F: float, lambda_A: float) -> LossBreakdown:
    return total_loss(*_head_inputs(model, example, batch, lambda_F, lambda_A))


def objective(model: FlowNet, example: TrainExample, batch: FlowBatch,
              lambda_F: float = 0.01, lambda_A: float = 0.01) -> torch.Tensor:
    """Total loss as a tensor only; safe under ``torch.func`` transforms."""
    return loss_terms(*_head_inputs(model, example, batch, lambda_F, lambda_A))[3]


def backward(model: FlowNet, example: TrainExample, batch: FlowBatch,
             lambda_F: float = 0.01, lambda_A: float = 0.01) -> tuple[LossBreakdown, dict[str, torch.Tensor]]:
    """Exact gradients of the total loss for every parameter, keyed by name."""
    model.zero_grad(set_to_none=False)
    loss = loss_for(model, example, batch, lambda_F, lambda_A)
    loss.tensor.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        grads[name] = g
    return loss, grads


@dataclass
class TrainSpec:
    epochs: int = 30
    lr: float = 1e-4
    weight_decay: float = 0.01
    lambda_F: float = 0.01
    lambda_A: float = 0.01
    grad_clip: float | None = 1.0
    warmup_steps: int = 0
    schedule: str = "constant"   # or "cosine"
    diverge_at: float = 1e6


@dataclass
class EpochStats:
    epoch: int
    l_rf: float
    l_F: float
    l_A: float
    total: float


def lr_at(spec: TrainSpec, step: int, total_steps: int) -> float:
    scale = 1.0
    if spec.warmup_steps and step < spec.warmup_steps:
        scale = (step + 1) / spec.warmup_steps
    elif spec.schedule == "cosine":
        done = (step - spec.warmup_steps) / max(1, total_steps - spec.warmup_steps)
        scale = 0.5 * (1 + math.cos(math.pi * min(done, 1.0)))
    return spec.lr * scale


def train(model: FlowNet, make_example: Callable[[int, int, np.random.Generator], TrainExample],
          n_objects: int, spec: TrainSpec, seed: int,
          on_step: Callable[[int, LossBreakdown], None] | None = None) -> list[EpochStats]:
    """AdamW training, one object per step.

    ``make_example(epoch, index, rng)`` builds a freshly augmented example. All
    randomness derives from ``seed``.
    """
    if n_objects < 1:
        raise InvalidArgumentError("training needs a non-empty dataset")
    opt = torch.optim.AdamW(model.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    total_steps = spec.epochs * n_objects
    curve, step = [], 0
    model.train()
    for epoch in range(1, spec.epochs + 1):
        sums = np.zeros(4)
        for index in rng.permutation(n_objects):
            example = make_example(epoch, int(index), rng)
            t = 1.0 - torch.rand((), generator=gen, dtype=torch.float64).item()
            noise = torch.randn(example.x0.shape, generator=gen, dtype=model.dtype)
            batch = flow_batch(example, t, noise)
            for group in opt.param_groups:
                group["lr"] = lr_at(spec, step, total_steps)
            opt.zero_grad(set_to_none=True)
            loss = loss_for(model, example, batch, spec.lambda_F, spec.lambda_A)
            if not math.isfinite(loss.total) or loss.total > spec.diverge_at:
                raise TrainingDivergedError(epoch, loss.total)
            loss.tensor.backward()
            if spec.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), spec.grad_clip)
            opt.step()
            sums += (loss.l_rf, loss.l_F, loss.l_A, loss.total)
            if on_step is not None:
                on_step(step, loss)
            step += 1
        means = sums / n_objects
        curve.append(EpochStats(epoch, *map(float, means)))
    model.eval()
    return curve


def write_loss_csv(path: Path, curve: list[EpochStats], config_hash: str = "") -> None:
    lines = [f"# config_hash={config_hash}", "epoch,l_rf,l_F,l_A,total"]
    lines += [f"{s.epoch},{s.l_rf!r},{s.l_F!r},{s.l_A!r},{s.total!r}" for s in curve]
    Path(path).write_text("\n".join(lines) + "\n")


# --- checkpoint -------------------------------------------------------------
# layout: magic | u32 version | u32 header length | header JSON | float32 blob | sha256(header+blob)

CKPT_MAGIC = b"SAREKIT\x00"
CKPT_VERSION = 1


def save_checkpoint(path: Path, model: FlowNet, extra: dict | None = None) -> None:
    state = model.state_dict()
    names = list(state)
    header = json.dumps({
        "spec": asdict(model.spec),
        "params": [[n, list(state[n].shape)] for n in names],
        "extra": extra or {},
    }, sort_keys=True).encode()
    blob = b"".join(state[n].detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
                    for n in names)
    body = struct.pack("<II", CKPT_VERSION, len(header)) + header + blob
    Path(path).write_bytes(CKPT_MAGIC + body + hashlib.sha256(header + blob).digest())


def load_checkpoint(path: Path, dtype=torch.float32) -> tuple[FlowNet, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise SchemaError(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    if len(raw) < off + 8:
        raise TruncatedFileError(path, "header")
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off += 8
    if len(raw) < off + hlen:
        raise TruncatedFileError(path, "header")
    header_bytes = raw[off:off + hlen]
    header = json.loads(header_bytes)
    off += hlen
    sizes = [int(np.prod(shape)) for _, shape in header["params"]]
    nblob = 4 * sum(sizes)
    if len(raw) < off + nblob + 32:
        raise TruncatedFileError(path, "parameters" if len(raw) < off + nblob else "checksum")
    blob = raw[off:off + nblob]
    if hashlib.sha256(header_bytes + blob).digest() != raw[off + nblob:off + nblob + 32]:
        raise ChecksumError(f"{path}: checksum mismatch")
    model = FlowNet(ModelSpec(**header["spec"]))
    flat = np.frombuffer(blob, dtype="<f4")
    state, pos = {}, 0
    for (name, shape), n in zip(header["params"], sizes):
        state[name] = torch.from_numpy(flat[pos:pos + n].reshape(shape).copy())
        pos += n
    model.load_state_dict(state)
    model = model.to(dtype)
    model.eval()
    return model, header["extra"]
