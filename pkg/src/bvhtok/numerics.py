"""Array ops, optimizer, gradient checking and the checkpoint container.

Tensors and reverse-mode differentiation come from torch; the functions here
add explicit shape checks, the training utilities the models share, and a
plain binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"BVHTCKPT"
    uint32    format version (currently 1)
    uint32    N = length of the metadata block
    N bytes   UTF-8 JSON metadata (free-form dict)
    uint32    number of arrays
    per array:
      uint16  name length, then the UTF-8 name
      uint8   ndim, then ndim x uint32 dims
      float32 values, C order, little-endian
"""
from __future__ import annotations

import contextlib
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


def _shape_error(op: str, *tensors: Tensor) -> ShapeError:
    shapes = ", ".join(str(tuple(t.shape)) for t in tensors)
    return ShapeError(f"{op}: incompatible shapes {shapes}")


# ----------------------------------------------------------------- ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _shape_error("matmul", a, b)
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error("add", a, b) from None
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error("mul", a, b) from None
    return a * b


def concat(tensors: list[Tensor], dim: int = -1) -> Tensor:
    ref = tensors[0]
    d = dim % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(t.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != d):
            raise _shape_error("concat", *tensors)
    return torch.cat(tensors, dim=dim)


def softmax(x: Tensor, dim: int = -1, mask: Optional[Tensor] = None) -> Tensor:
    """Softmax along ``dim``; ``mask`` (True = keep) must leave each row non-empty."""
    if mask is not None:
        if mask.shape != x.shape:
            raise _shape_error("softmax", x, mask)
        x = x.masked_fill(~mask, float("-inf"))
    return torch.softmax(x, dim=dim)


def layer_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    if weight is not None and weight.shape != x.shape[-1:]:
        raise _shape_error("layer_norm", x, weight)
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return F.leaky_relu(x, slope)


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x (B, C_in, T), weight (C_out, C_in, k)."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1]:
        raise _shape_error("conv1d", x, weight)
    return F.conv1d(x, weight, bias, stride=stride, padding=padding)


def transposed_conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x (B, C_in, T), weight (C_in, C_out, k)."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[0]:
        raise _shape_error("transposed_conv1d", x, weight)
    return F.conv_transpose1d(x, weight, bias, stride=stride, padding=padding)


def embedding(indices: Tensor, table: Tensor) -> Tensor:
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")
    return table[indices]


def l2_norm(x: Tensor, dim: int = -1, keepdim: bool = False) -> Tensor:
    return torch.sqrt(torch.sum(x * x, dim=dim, keepdim=keepdim))


def cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Mean negative log-likelihood; logits (N, C), integer targets (N,)."""
    if logits.dim() != 2 or target.shape != logits.shape[:1]:
        raise _shape_error("cross_entropy", logits, target)
    return F.cross_entropy(logits, target)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Pairwise cosine similarity matrix between rows of a (N, D) and b (M, D)."""
    if a.shape[-1] != b.shape[-1]:
        raise _shape_error("cosine_similarity", a, b)
    an = a / l2_norm(a, keepdim=True).clamp_min(eps)
    bn = b / l2_norm(b, keepdim=True).clamp_min(eps)
    return an @ bn.transpose(-1, -2)


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


# ---------------------------------------------------------- grad check

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    (analytic,) = torch.autograd.grad(out, x)
    flat = x.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = f(flat.view_as(x)).item()
            flat[i] = orig - h
            fm = f(flat.view_as(x)).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * h)
    err = (analytic.reshape(-1) - numeric).abs() / numeric.abs().clamp_min(1.0)
    return float(err.max()) if err.numel() else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-4,
                      max_coords: Optional[int] = None, generator: Optional[np.random.Generator] = None) -> float:
    """:func:`grad_check` over existing parameters (mutated in place and restored).

    ``max_coords`` subsamples coordinates per parameter for large models.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    rng = generator or np.random.default_rng(0)
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and idx.size > max_coords:
                idx = rng.choice(idx, max_coords, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                worst = max(worst, abs(gflat[i].item() - num) / max(1.0, abs(num)))
    return worst


# ----------------------------------------------------------- optimizer

@dataclass
class ParameterStore:
    """Named parameters plus AdamW moments."""

    params: dict[str, Tensor]
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParameterStore":
        return cls({n: p for n, p in module.named_parameters() if p.requires_grad})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            if n in self.exp_avg:
                out[f"adam.m.{n}"] = self.exp_avg[n].detach().cpu().numpy()
                out[f"adam.v.{n}"] = self.exp_avg_sq[n].detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.step = step
        for n, p in self.params.items():
            if f"adam.m.{n}" in arrays:
                self.exp_avg[n] = torch.as_tensor(arrays[f"adam.m.{n}"], dtype=p.dtype).reshape(p.shape)
                self.exp_avg_sq[n] = torch.as_tensor(arrays[f"adam.v.{n}"], dtype=p.dtype).reshape(p.shape)


def adamw_step(store: ParameterStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> ParameterStore:
    """One AdamW update (decoupled weight decay, bias-corrected moments), in place."""
    b1, b2 = betas
    store.step += 1
    c1 = 1 - b1 ** store.step
    c2 = 1 - b2 ** store.step
    with torch.no_grad():
        for name, p in store.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if name not in store.exp_avg:
                store.exp_avg[name] = torch.zeros_like(p)
                store.exp_avg_sq[name] = torch.zeros_like(p)
            m, v = store.exp_avg[name], store.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return store


def clip_grad_norm(store: ParameterStore, max_norm: float = 1.0) -> float:
    grads = [p.grad for p in store.params.values() if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(torch.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


def cosine_lr(step: int, total_steps: int, lr_max: float = 2e-4, lr_min: float = 2e-5,
              decay_fraction: float = 1 / 6) -> float:
    """Constant ``lr_max``, then a cosine ramp to ``lr_min`` over the final ``decay_fraction`` of steps."""
    decay_steps = max(1, int(round(total_steps * decay_fraction)))
    start = total_steps - decay_steps
    if step < start:
        return lr_max
    progress = min(1.0, (step - start) / decay_steps)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * progress))


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block on a private torch RNG stream seeded with ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


# ---------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"BVHTCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(arrays, metadata))


def dump_checkpoint(arrays: dict[str, np.ndarray], metadata: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parse_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    return arrays, meta


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Parameters and buffers of ``module`` as float arrays."""
    out = {}
    for n, t in list(module.named_parameters()) + list(module.named_buffers()):
        out[prefix + n] = t.detach().cpu().numpy()
    return out


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    own = dict(module.named_parameters())
    own.update(dict(module.named_buffers()))
    missing = [n for n in own if prefix + n not in arrays]
    if missing:
        raise KeyError(f"checkpoint is missing {missing[:5]}")
    with torch.no_grad():
        for n, t in own.items():
            src = torch.as_tensor(arrays[prefix + n])
            if tuple(src.shape) != tuple(t.shape):
                raise ShapeError(f"{n}: checkpoint shape {tuple(src.shape)} vs model {tuple(t.shape)}")
            t.copy_(src.to(t.dtype))


def parameter_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha1()
    for n, t in sorted(list(module.named_parameters()) + list(module.named_buffers()), key=lambda x: x[0]):
        h.update(n.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
