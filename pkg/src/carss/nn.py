"""Attention building blocks, masked/clipped softmax, Adam and checkpoints.

Tensors and reverse-mode differentiation come from torch. Everything that
encodes modeling choices (attention masking, logit clipping, block layout)
is written out here so that both policies share one definition.

Masks are boolean with ``True`` meaning "allowed".
"""

from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .exceptions import FormatError, InfeasibleError, ShapeError

DEFAULT_DTYPE = torch.float32
CLIP = 10.0


def clipped_logits(x: torch.Tensor, clip: float = CLIP) -> torch.Tensor:
    """``clip * tanh(x)``; bounded in ``(-clip, clip)``."""
    return clip * torch.tanh(x)


def _apply_mask(x, mask):
    if mask is None:
        return x
    mask = mask.to(torch.bool)
    try:
        full = torch.broadcast_to(mask, x.shape)
    except RuntimeError as exc:
        raise ShapeError(f"mask {tuple(mask.shape)} does not broadcast to {tuple(x.shape)}") from exc
    if not bool(full.any(dim=-1).all()):
        raise InfeasibleError("a row is fully masked; no feasible entry to normalize over")
    return x.masked_fill(~full, float("-inf"))


def masked_softmax(x: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1):
    """Softmax over the last axis with exact zeros at masked entries."""
    if dim not in (-1, x.dim() - 1):
        x = x.transpose(dim, -1)
        return masked_softmax(x, None if mask is None else mask.transpose(dim, -1)).transpose(dim, -1)
    return torch.softmax(_apply_mask(x, mask), dim=-1)


def masked_log_softmax(x: torch.Tensor, mask: torch.Tensor | None = None):
    return torch.log_softmax(_apply_mask(x, mask), dim=-1)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with ``n_heads`` heads of width ``d_model / n_heads``."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ShapeError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.wq = nn.Linear(d_model, d_model, bias=False)
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model, bias=False)
        self.wo = nn.Linear(d_model, d_model, bias=False)

    def forward(self, q, k, v, mask=None):
        """``q``: (..., Lq, d); ``k``, ``v``: (..., Lk, d); ``mask`` broadcastable to (..., Lq, Lk)."""
        d, h = self.d_model, self.n_heads
        if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
            raise ShapeError(f"feature width must be {d}")
        if k.shape[:-1] != v.shape[:-1]:
            raise ShapeError(f"keys {tuple(k.shape)} and values {tuple(v.shape)} disagree")
        lead, lq, lk = q.shape[:-2], q.shape[-2], k.shape[-2]
        dh = d // h

        def split(x, length):
            return x.reshape(*x.shape[:-2], length, h, dh).transpose(-2, -3)

        Q = split(self.wq(q), lq)
        K = split(self.wk(k), lk)
        V = split(self.wv(v), lk)
        scores = Q @ K.transpose(-1, -2) / math.sqrt(dh)
        if mask is not None and mask.dim() >= 2:
            mask = mask.to(torch.bool).unsqueeze(-3)
        attn = masked_softmax(scores, mask)
        out = (attn @ V).transpose(-2, -3).reshape(*lead, lq, d)
        return self.wo(out)


def mha(module: MultiHeadAttention, q, k, v, mask=None):
    return module(q, k, v, mask)


class FeedForward(nn.Module):
    """Two affine maps with a ReLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int | None = None):
        super().__init__()
        self.lin1 = nn.Linear(d_in, d_hidden)
        self.lin2 = nn.Linear(d_hidden, d_in if d_out is None else d_out)

    def forward(self, x):
        return self.lin2(torch.relu(self.lin1(x)))


def ffn(module: FeedForward, x):
    return module(x)


class AttentionBlock(nn.Module):
    """MHA sub-layer followed by an optional FFN sub-layer.

    With ``residual=True`` each sub-layer is wrapped as ``LayerNorm(x + f(x))``;
    otherwise the block is the plain composition ``FFN(MHA(x, kv, kv))``.
    """

    def __init__(self, d_model: int, n_heads: int, d_ff: int, residual: bool = True,
                 use_ffn: bool = True):
        super().__init__()
        self.residual = residual
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ffn = FeedForward(d_model, d_ff) if use_ffn else None
        if residual:
            self.norm1 = nn.LayerNorm(d_model)
            self.norm2 = nn.LayerNorm(d_model) if use_ffn else None

    def forward(self, x, kv=None, mask=None):
        kv = x if kv is None else kv
        a = self.attn(x, kv, kv, mask)
        x = self.norm1(x + a) if self.residual else a
        if self.ffn is not None:
            f = self.ffn(x)
            x = self.norm2(x + f) if self.residual else f
        return x


def init_parameters(module: nn.Module, seed: int) -> None:
    """Seeded re-initialisation, independent of torch's global RNG.

    Affine maps draw weights and biases from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``;
    layer norms start as the identity.
    """
    g = torch.Generator().manual_seed(int(seed) % (2**63))
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                bound = 1.0 / math.sqrt(sub.in_features)
                for p in (sub.weight, sub.bias):
                    if p is not None:
                        u = torch.rand(p.shape, generator=g, dtype=torch.float64)
                        p.copy_((2 * u - 1) * bound)
            elif isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.fill_(0.0)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def make_adam(params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def global_grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad.detach().to(torch.float64) ** 2).sum())
    return math.sqrt(sq)


def adam_step(optimizer: torch.optim.Optimizer, max_norm: float | None = None) -> float:
    """Optionally clip by global norm, apply one Adam update, clear grads.

    Returns the pre-clipping gradient norm.
    """
    params = [p for group in optimizer.param_groups for p in group["params"]]
    norm = global_grad_norm(params)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad.mul_(scale)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return norm


# -- checkpoints --------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"CARSSCKP"
#   u32       format version (1)
#   u32       length of metadata JSON, then the UTF-8 JSON bytes
#   u32       number of tensors, then per tensor:
#               u16 name length, UTF-8 name
#               u8  ndim, then ndim x u32 dims
#               prod(dims) x float32 values, row-major
# Tensor names are "param/<module>/<parameter>" for model weights and
# "optim/<module>/<parameter>/{exp_avg,exp_avg_sq}" for Adam moments. Adam's
# scalar state (step counts, lr, betas, eps) lives in the metadata under "optim".

MAGIC = b"CARSSCKP"
VERSION = 1


def _write_tensor(buf, name, arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def save_checkpoint(path, modules: dict, optimizers: dict | None = None, meta: dict | None = None):
    """Write ``modules`` (name -> nn.Module) and matching Adam optimizers to ``path``."""
    meta = dict(meta or {})
    tensors = []
    for mname, module in modules.items():
        for pname, p in module.state_dict().items():
            tensors.append((f"param/{mname}/{pname}", p.detach().cpu().numpy()))
    optim_meta = {}
    for mname, opt in (optimizers or {}).items():
        names = [n for n, _ in modules[mname].named_parameters()]
        params = [p for group in opt.param_groups for p in group["params"]]
        group = opt.param_groups[0]
        steps = {}
        for pname, p in zip(names, params):
            st = opt.state.get(p)
            if not st:
                continue
            steps[pname] = int(st["step"])
            tensors.append((f"optim/{mname}/{pname}/exp_avg", st["exp_avg"].cpu().numpy()))
            tensors.append((f"optim/{mname}/{pname}/exp_avg_sq", st["exp_avg_sq"].cpu().numpy()))
        optim_meta[mname] = {"lr": group["lr"], "betas": list(group["betas"]),
                             "eps": group["eps"], "steps": steps}
    meta["optim"] = optim_meta
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    raw = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path):
    """Return ``(meta, tensors)`` where tensors maps names to float32 arrays."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError("truncated checkpoint", None, path)
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    if data[:8] != MAGIC:
        raise FormatError("not a carss checkpoint (bad magic)", None, path)
    pos = 8
    (version,) = take("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", None, path)
    (mlen,) = take("<I")
    meta = json.loads(bytes(view[pos:pos + mlen]).decode())
    pos += mlen
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = bytes(view[pos:pos + nlen]).decode()
        pos += nlen
        (ndim,) = take("<B")
        dims = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        if pos + 4 * size > len(data):
            raise FormatError(f"truncated tensor {name!r}", None, path)
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
        pos += 4 * size
    return meta, tensors


def load_into(modules: dict, tensors: dict, optimizers: dict | None = None, meta: dict | None = None):
    """Copy checkpoint tensors into ``modules`` (and Adam state into ``optimizers``)."""
    for mname, module in modules.items():
        state = module.state_dict()
        for pname, ref in state.items():
            key = f"param/{mname}/{pname}"
            if key not in tensors:
                raise FormatError(f"checkpoint lacks {key}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(ref.shape):
                raise FormatError(f"{key}: shape {arr.shape} != {tuple(ref.shape)}")
            state[pname] = torch.from_numpy(arr).to(ref.dtype)
        module.load_state_dict(state)
    if not optimizers:
        return
    optim_meta = (meta or {}).get("optim", {})
    for mname, opt in optimizers.items():
        info = optim_meta.get(mname)
        if info is None:
            continue
        names = [n for n, _ in modules[mname].named_parameters()]
        params = [p for group in opt.param_groups for p in group["params"]]
        for pname, p in zip(names, params):
            if pname not in info["steps"]:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(info["steps"][pname])),
                "exp_avg": torch.from_numpy(tensors[f"optim/{mname}/{pname}/exp_avg"]).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(tensors[f"optim/{mname}/{pname}/exp_avg_sq"]).to(p.dtype),
            }
