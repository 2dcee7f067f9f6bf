"""Shared builders for small synthetic model instances."""
import numpy as np
import torch
from torch.func import functional_call, vmap

from sare_kit.flow import FlowNet, ModelInputs, ModelSpec, TrainExample, flow_batch, objective

TINY = ModelSpec(depth=2, width=16, heads=2, attach_layer=2)


def tiny_inputs(M=24, K=3, seed=0, spec=TINY, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    feats = torch.from_numpy(rng.uniform(-1, 1, size=(M, spec.feature_dim))).to(dtype)
    fmap = np.sort(np.arange(M) % K)
    inputs = ModelInputs(feats, fmap, rng.permutation(spec.max_parts)[:K], 0)
    A = np.ones((K, K), np.uint8) - np.eye(K, dtype=np.uint8)
    A[0, K - 1] = A[K - 1, 0] = 0
    x0 = torch.from_numpy(rng.normal(size=(M, 3))).to(dtype)
    return TrainExample(inputs, x0, (rng.uniform(size=M) < 0.3).astype(float), A)


def randomized_model(seed, spec=TINY, scale=0.2):
    """Seeded model with every parameter perturbed so no gradient is trivially zero."""
    model = FlowNet.create(spec, seed, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


class _Objective(torch.nn.Module):
    def __init__(self, net, example, batch, lambda_F, lambda_A):
        super().__init__()
        self.net = net
        self.args = (example, batch, lambda_F, lambda_A)

    def forward(self):
        return objective(self.net, *self.args)


def fd_gradients(model, example, batch, h=1e-4, lambda_F=0.01, lambda_A=0.01):
    """Central differences for every scalar parameter, batched with vmap."""
    wrapped = _Objective(model, example, batch, lambda_F, lambda_A)
    params = {"net." + n: p.detach() for n, p in model.named_parameters()}
    out = {}
    for key, p in params.items():
        step = torch.eye(p.numel(), dtype=p.dtype).view(p.numel(), *p.shape) * h
        loss = lambda d: functional_call(wrapped, {**params, key: p + d}, ())
        fd = (vmap(loss, chunk_size=512)(step) - vmap(loss, chunk_size=512)(-step)) / (2 * h)
        out[key[len("net."):]] = fd.view(p.shape)
    return out


def relative_errors(grads, fd):
    errs = {}
    for name, g in grads.items():
        d = fd[name]
        scale = max(g.norm().item(), d.norm().item())
        errs[name] = 0.0 if scale < 1e-10 else (g - d).norm().item() / scale
    return errs


def batch_for(example, t=0.4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return flow_batch(example, t, torch.randn(example.x0.shape, generator=g, dtype=example.x0.dtype))


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
