"""Topology-agnostic motion tokenizer.

Per-joint motion features are fused with frozen structural embeddings, a
learnable virtual token is appended to every frame, and a stack of blocks
alternates strided temporal convolution with attention across the joints of
each frame. Only the virtual token is quantized (residual VQ), so the code
matrix has shape ``(T // r, R)`` whatever the skeleton. The decoder broadcasts
each latent to the joints of any target skeleton and upsamples back to T.

Token file layout (little-endian)::

    8s   magic  b"BVHTTOK1"
    u32  version (=1)
    u32  r, R, K, W
    f64  frame_time
    f64  initial_root[3]
    u32  num_tokens N
    u32  meta_len, then meta_len bytes of UTF-8 JSON (provenance)
    u16  codes[N * R], row-major, values in 1..K
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .motion import MotionTheta, pose_sequence_from_theta, augment_rest_pose, theta_from_pose_sequence
from .owo import NameEmbedder, NodeEmbeddings, OwoModel, TrainingDiverged, embed_skeleton
from .skeleton import PoseSequence, Skeleton, forward_kinematics

log = logging.getLogger(__name__)

IDENTITY_ROT6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass
class TatConfig:
    d_model: int = 64
    latent_dim: int = 32  # W
    codebook_size: int = 64  # K
    num_quantizers: int = 4  # R
    stride: int = 2
    blocks: int = 3
    heads: int = 4
    owo_dim: int = 32
    ema_decay: float = 0.99
    dead_code_steps: int = 256

    @property
    def compression(self) -> int:
        return self.stride ** self.blocks


# ------------------------------------------------------------------- layers

class ResNet1D(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.conv1 = nn.Conv1d(d, d, 3, padding=1)
        self.conv2 = nn.Conv1d(d, d, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(torch.relu(self.conv1(torch.relu(x))))


class SpatialAttention(nn.Module):
    """Pre-norm multi-head self-attention over the tokens of one frame, then an FFN."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"d_model {d} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU(), nn.Linear(2 * d, d))

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        # x: (N, S, d); valid: (N, S) bool
        N, S, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(self.norm1(x)).reshape(N, S, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = nx.matmul(q, k.transpose(-1, -2)) / math.sqrt(hd)
        mask = valid[:, None, None, :].expand(N, self.heads, S, S)
        attn = nx.softmax(scores, dim=-1, mask=mask)
        y = nx.matmul(attn, v).transpose(1, 2).reshape(N, S, d)
        x = x + self.out(y)
        return x + self.ffn(self.norm2(x))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: TatConfig):
        super().__init__()
        s = cfg.stride
        self.down = nn.Conv1d(cfg.d_model, cfg.d_model, 2 * s, stride=s, padding=s // 2)
        self.res = ResNet1D(cfg.d_model)
        self.attn = SpatialAttention(cfg.d_model, cfg.heads)


class DecoderBlock(nn.Module):
    def __init__(self, cfg: TatConfig):
        super().__init__()
        s = cfg.stride
        self.attn = SpatialAttention(cfg.d_model, cfg.heads)
        self.up = nn.ConvTranspose1d(cfg.d_model, cfg.d_model, 2 * s, stride=s, padding=s // 2)
        self.res = ResNet1D(cfg.d_model)


def _temporal(x: torch.Tensor, fn) -> torch.Tensor:
    """Apply a (N, d, T) -> (N, d, T') op to every token track of (B, T, S, d)."""
    B, T, S, d = x.shape
    y = fn(x.permute(0, 2, 3, 1).reshape(B * S, d, T))
    return y.reshape(B, S, d, -1).permute(0, 3, 1, 2)


def _spatial(x: torch.Tensor, valid: torch.Tensor, attn: SpatialAttention) -> torch.Tensor:
    B, T, S, d = x.shape
    v = valid[:, None, :].expand(B, T, S).reshape(B * T, S)
    return attn(x.reshape(B * T, S, d), v).reshape(B, T, S, d)


# ------------------------------------------------------------ quantization

@dataclass
class QuantizationResult:
    """``codes`` are 0-based codebook rows, (..., R); ``residual_norms`` is (..., R + 1)."""

    codes: np.ndarray
    quantized: np.ndarray
    residual_norms: np.ndarray


def _nearest(residual: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    # exact squared differences so the zero codeword comparison is consistent
    d = ((residual[:, None, :] - codebook[None]) ** 2).sum(-1)
    return d.argmin(-1)


def rvq_quantize_tensor(v: torch.Tensor, codebooks: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (codes (N, R), quantized (N, W), residual norms (N, R + 1))."""
    residual = v
    codes, norms = [], [residual.norm(dim=-1)]
    total = torch.zeros_like(v)
    for cb in codebooks:
        idx = _nearest(residual, cb)
        q = cb[idx]
        total = total + q
        residual = residual - q
        codes.append(idx)
        norms.append(residual.norm(dim=-1))
    return torch.stack(codes, -1), total, torch.stack(norms, -1)


def rvq_quantize(v, codebooks) -> QuantizationResult:
    """Nearest-codeword residual quantization of one vector or a batch (..., W)."""
    v = torch.as_tensor(np.asarray(v, dtype=np.float64))
    cb = torch.as_tensor(np.asarray(codebooks, dtype=np.float64))
    lead = v.shape[:-1]
    codes, q, norms = rvq_quantize_tensor(v.reshape(-1, v.shape[-1]), cb)
    return QuantizationResult(
        codes.reshape(*lead, -1).numpy(),
        q.reshape(*lead, -1).numpy(),
        norms.reshape(*lead, -1).numpy(),
    )


class ResidualVQ(nn.Module):
    """R codebooks of K entries; row 0 of each codebook is pinned at zero.

    Codebooks are not gradient parameters: they are initialized from the first
    batch of residuals and then tracked by exponential moving averages, with
    rows that go unused for ``dead_code_steps`` updates re-seeded from the batch.
    """

    def __init__(self, cfg: TatConfig):
        super().__init__()
        R, K, W = cfg.num_quantizers, cfg.codebook_size, cfg.latent_dim
        if K < 2:
            raise ValueError("codebook needs the zero row plus at least one entry")
        self.decay = cfg.ema_decay
        self.dead_steps = cfg.dead_code_steps
        self.register_buffer("codebooks", torch.zeros(R, K, W))
        self.register_buffer("ema_count", torch.ones(R, K))
        self.register_buffer("ema_sum", torch.zeros(R, K, W))
        self.register_buffer("idle", torch.zeros(R, K))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    def quantize(self, z: torch.Tensor):
        flat = z.reshape(-1, z.shape[-1])
        codes, q, norms = rvq_quantize_tensor(flat, self.codebooks.to(z.dtype))
        return codes.reshape(*z.shape[:-1], -1), q.reshape(z.shape), norms

    def dequantize(self, codes: torch.Tensor) -> torch.Tensor:
        out = 0
        for r in range(codes.shape[-1]):
            out = out + self.codebooks[r][codes[..., r]]
        return out

    @torch.no_grad()
    def init_from(self, z: torch.Tensor, gen: np.random.Generator) -> None:
        flat = z.detach().reshape(-1, z.shape[-1]).to(self.codebooks.dtype)
        residual = flat
        K = self.codebooks.shape[1]
        for r in range(self.codebooks.shape[0]):
            pick = torch.as_tensor(gen.integers(0, flat.shape[0], K - 1))
            scale = residual.std().clamp_min(1e-6)
            noise = torch.as_tensor(gen.standard_normal((K - 1, flat.shape[1])), dtype=flat.dtype)
            self.codebooks[r, 1:] = residual[pick] + 0.01 * scale * noise
            self.codebooks[r, 0] = 0
            self.ema_sum[r] = self.codebooks[r] * self.ema_count[r, :, None]
            residual = residual - self.codebooks[r][_nearest(residual, self.codebooks[r])]
        self.initialized.fill_(True)

    @torch.no_grad()
    def ema_update(self, z: torch.Tensor, codes: torch.Tensor, gen: np.random.Generator) -> None:
        flat = z.detach().reshape(-1, z.shape[-1]).to(self.codebooks.dtype)
        codes = codes.reshape(-1, codes.shape[-1])
        residual = flat
        K = self.codebooks.shape[1]
        for r in range(self.codebooks.shape[0]):
            idx = codes[:, r]
            onehot = torch.zeros(flat.shape[0], K, dtype=flat.dtype)
            onehot[torch.arange(flat.shape[0]), idx] = 1
            count = onehot.sum(0)
            total = onehot.T @ residual
            self.ema_count[r].mul_(self.decay).add_(count, alpha=1 - self.decay)
            self.ema_sum[r].mul_(self.decay).add_(total, alpha=1 - self.decay)
            n = self.ema_count[r].sum()
            smoothed = (self.ema_count[r] + 1e-5) / (n + K * 1e-5) * n
            new_cb = self.ema_sum[r] / smoothed[:, None]
            self.idle[r] = torch.where(count > 0, torch.zeros_like(count), self.idle[r] + 1)
            dead = (self.idle[r] >= self.dead_steps).nonzero().flatten().tolist()
            for k in dead:
                if k == 0:
                    continue
                sample = residual[int(gen.integers(0, residual.shape[0]))]
                new_cb[k] = sample
                self.ema_count[r, k] = 1.0
                self.ema_sum[r, k] = sample
                self.idle[r, k] = 0
            new_cb[0] = 0
            self.ema_sum[r, 0] = 0
            self.codebooks[r] = new_cb
            residual = residual - self.codebooks[r][idx]


# ------------------------------------------------------------------- model

class TatModel(nn.Module):
    def __init__(self, config: Optional[TatConfig] = None):
        super().__init__()
        self.config = cfg = config or TatConfig()
        D = cfg.d_model
        self.motion_mlp = nn.Sequential(nn.Linear(9, D), nn.ReLU(), nn.Linear(D, D))
        self.owo_proj = nn.Linear(cfg.owo_dim, D)
        self.virtual = nn.Parameter(torch.randn(D) * 0.02)
        self.enc_blocks = nn.ModuleList([EncoderBlock(cfg) for _ in range(cfg.blocks)])
        self.to_latent = nn.Linear(D, cfg.latent_dim)
        self.rvq = ResidualVQ(cfg)
        self.dec_joint = nn.Linear(cfg.latent_dim + cfg.owo_dim, D)
        self.dec_virtual = nn.Linear(cfg.latent_dim, D)
        self.dec_blocks = nn.ModuleList([DecoderBlock(cfg) for _ in range(cfg.blocks)])
        self.out = nn.Linear(D, 9)
        self.register_buffer("base", torch.tensor((0.0, 0.0, 0.0) + IDENTITY_ROT6D))

    @property
    def compression(self) -> int:
        return self.config.compression

    def fuse(self, theta: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        """(B, T, J, 9) motion + (B, J, owo_dim) structure -> (B, T, J, D)."""
        if theta.shape[-2] != h.shape[-2]:
            raise ValueError(f"motion has {theta.shape[-2]} joints, embeddings have {h.shape[-2]}")
        return self.motion_mlp(theta) + self.owo_proj(h)[:, None]

    def encode_latents(self, theta: torch.Tensor, h: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        B, T, J, _ = theta.shape
        r = self.compression
        if T < r:
            raise ValueError(f"sequence of {T} frames is shorter than the compression factor {r}")
        T = r * (T // r)
        x = self.fuse(theta[:, :T], h)
        v = self.virtual.to(x.dtype).expand(B, T, 1, -1)
        x = torch.cat([x, v], dim=2)
        valid = torch.cat([valid, torch.ones(B, 1, dtype=torch.bool)], dim=1)
        for blk in self.enc_blocks:
            x = _temporal(x, lambda y: blk.res(blk.down(y)))
            x = _spatial(x, valid, blk.attn)
        return self.to_latent(x[:, :, -1])

    def decode_latents(self, z: torch.Tensor, h: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        B, Tq, _ = z.shape
        J = h.shape[1]
        zj = z[:, :, None, :].expand(B, Tq, J, -1)
        hj = h[:, None].expand(B, Tq, J, -1)
        x = torch.cat([self.dec_joint(torch.cat([zj, hj], -1)), self.dec_virtual(z)[:, :, None]], dim=2)
        valid = torch.cat([valid, torch.ones(B, 1, dtype=torch.bool)], dim=1)
        for blk in self.dec_blocks:
            x = _spatial(x, valid, blk.attn)
            x = _temporal(x, lambda y: blk.res(blk.up(y)))
        y = self.out(x[:, :, :J]) + self.base.to(x.dtype)
        # only the root row carries translation
        tmask = torch.zeros(J, 9, dtype=y.dtype)
        tmask[0, :3] = 1
        tmask[:, 3:] = 1
        return y * tmask * valid[:, None, :J, None]

    def forward(self, theta, h, valid):
        z = self.encode_latents(theta, h, valid)
        codes, zq, _ = self.rvq.quantize(z)
        zq_st = z + (zq - z).detach()
        return self.decode_latents(zq_st, h, valid), z, zq, codes


# --------------------------------------------------------- torch kinematics

def rot6d_to_matrix_torch(v: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    a1, a2 = v[..., :3], v[..., 3:]
    b1 = a1 / a1.norm(dim=-1, keepdim=True).clamp_min(eps)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = u2 / u2.norm(dim=-1, keepdim=True).clamp_min(eps)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def fk_from_theta(theta: torch.Tensor, parents: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """World positions (B, T, J, 3) with the first frame's root at the origin.

    ``parents`` (B, J) with the root (and any padding) pointing at 0; ``offsets`` (B, J, 3).
    """
    B, T, J, _ = theta.shape
    rots = rot6d_to_matrix_torch(theta[..., 3:])
    root = torch.cumsum(theta[:, :, 0, :3], dim=1)
    bidx = torch.arange(B)
    pos, glob = [root], [rots[:, :, 0]]
    for j in range(1, J):
        p = parents[:, j]
        gp = torch.stack(glob, dim=2)[bidx, :, p]
        pp = torch.stack(pos, dim=2)[bidx, :, p]
        glob.append(gp @ rots[:, :, j])
        pos.append(pp + (gp @ offsets[bidx, j][:, None, :, None]).squeeze(-1))
    return torch.stack(pos, dim=2)


# ------------------------------------------------------------ inference api

@dataclass
class TokenSequence:
    codes: np.ndarray  # (N, R), 1-based
    r: int
    K: int
    frame_time: float = 1 / 30
    initial_root: np.ndarray = field(default_factory=lambda: np.zeros(3))
    W: int = 0

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(len(self.codes), -1)
        if self.codes.size and (self.codes.min() < 1 or self.codes.max() > self.K):
            raise ValueError(f"codes must lie in 1..{self.K}")
        self.initial_root = np.asarray(self.initial_root, dtype=np.float64).reshape(3)

    @property
    def num_tokens(self) -> int:
        return int(self.codes.shape[0])

    @property
    def depth(self) -> int:
        return int(self.codes.shape[1])


def _single(theta: MotionTheta, h: NodeEmbeddings, dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    data = theta.data if isinstance(theta, MotionTheta) else np.asarray(theta)
    if data.shape[1] != h.num_joints:
        raise ValueError(f"motion has {data.shape[1]} joints, embeddings have {h.num_joints}")
    th = torch.as_tensor(data, dtype=dtype)[None]
    hh = h.h.detach().to(dtype)[None]
    return th, hh, torch.ones(1, h.num_joints, dtype=torch.bool)


@torch.no_grad()
def encode(theta: MotionTheta, h: NodeEmbeddings, model: TatModel,
           initial_root=None) -> tuple[np.ndarray, TokenSequence]:
    """Virtual-joint latents (T // r, W) and their token sequence."""
    dtype = model.out.weight.dtype
    th, hh, valid = _single(theta, h, dtype)
    z = model.encode_latents(th, hh, valid)
    codes, _, _ = model.rvq.quantize(z)
    ft = theta.frame_time if isinstance(theta, MotionTheta) else 1 / 30
    root = np.zeros(3) if initial_root is None else initial_root
    tokens = TokenSequence(codes[0].numpy() + 1, model.compression, model.config.codebook_size, ft, root,
                           model.config.latent_dim)
    return z[0].numpy(), tokens


@torch.no_grad()
def decode(tokens: TokenSequence, target_h: NodeEmbeddings, model: TatModel,
           target_T: Optional[int] = None, skeleton_id: str = "") -> MotionTheta:
    """Theta for ``r * num_tokens`` frames on the skeleton that produced ``target_h``."""
    r = model.compression
    if tokens.r != r or tokens.depth != model.config.num_quantizers or tokens.K != model.config.codebook_size:
        raise ValueError(
            f"token layout (r={tokens.r}, R={tokens.depth}, K={tokens.K}) does not match the model "
            f"(r={r}, R={model.config.num_quantizers}, K={model.config.codebook_size})"
        )
    if target_T is not None and target_T // r != tokens.num_tokens:
        raise ValueError(f"{tokens.num_tokens} tokens cannot produce {target_T} frames at r={r}")
    if tokens.num_tokens == 0:
        raise ValueError("empty token sequence")
    dtype = model.out.weight.dtype
    codes = torch.as_tensor(tokens.codes - 1)[None]
    z = model.rvq.dequantize(codes).to(dtype)
    hh = target_h.h.detach().to(dtype)[None]
    valid = torch.ones(1, target_h.num_joints, dtype=torch.bool)
    out = model.decode_latents(z, hh, valid)[0].numpy().astype(np.float64)
    return MotionTheta(out, skeleton_id, tokens.frame_time)


def reconstruct(theta: MotionTheta, h: NodeEmbeddings, model: TatModel) -> MotionTheta:
    _, tokens = encode(theta, h, model)
    return decode(tokens, h, model, skeleton_id=theta.skeleton_id)


def transfer(motion_a: MotionTheta, skel_a: Skeleton, skel_b: Skeleton, owo_model: OwoModel,
             tat_model: TatModel, embedder: NameEmbedder) -> MotionTheta:
    """Encode under skeleton A's embeddings, decode under skeleton B's."""
    with torch.no_grad():
        ha = embed_skeleton(skel_a, embedder, owo_model)
        hb = ha if skel_b is skel_a else embed_skeleton(skel_b, embedder, owo_model)
    _, tokens = encode(motion_a, ha, tat_model)
    return decode(tokens, hb, tat_model, skeleton_id=skel_b.identity())


def pairwise_distances(latents: Sequence[np.ndarray]) -> np.ndarray:
    """Upper-triangle distances between flattened latent sequences."""
    flat = np.stack([np.asarray(z).ravel() for z in latents])
    i, j = np.triu_indices(len(flat), 1)
    return np.linalg.norm(flat[i] - flat[j], axis=1)


def latent_distance_correlation(motions: Sequence[MotionTheta], skel_a: Skeleton, skel_b: Skeleton,
                                owo_model: OwoModel, tat_model: TatModel, embedder: NameEmbedder) -> float:
    """Pearson r between pairwise latent distances before and after A -> B transfer."""
    with torch.no_grad():
        ha = embed_skeleton(skel_a, embedder, owo_model)
        hb = embed_skeleton(skel_b, embedder, owo_model)
    before, after = [], []
    for m in motions:
        z, tokens = encode(m, ha, tat_model)
        moved = decode(tokens, hb, tat_model)
        before.append(z)
        after.append(encode(moved, hb, tat_model)[0])
    return float(np.corrcoef(pairwise_distances(before), pairwise_distances(after))[0, 1])


# ----------------------------------------------------------- token files

TOKEN_MAGIC = b"BVHTTOK1"
TOKEN_VERSION = 1


def dump_tokens(tokens: TokenSequence, meta: Optional[dict] = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    head = TOKEN_MAGIC + struct.pack(
        "<5I4dI", TOKEN_VERSION, tokens.r, tokens.depth, tokens.K, tokens.W, tokens.frame_time,
        *tokens.initial_root, tokens.num_tokens,
    )
    body = struct.pack("<I", len(meta_bytes)) + meta_bytes
    return head + body + tokens.codes.astype("<u2").tobytes()


def parse_tokens(data: bytes) -> tuple[TokenSequence, dict]:
    if data[:8] != TOKEN_MAGIC:
        raise ValueError("not a token file (bad magic)")
    fmt = "<5I4dI"
    n_head = struct.calcsize(fmt)
    version, r, R, K, W, ft, x, y, z, n = struct.unpack_from(fmt, data, 8)
    if version != TOKEN_VERSION:
        raise ValueError(f"unsupported token file version {version}")
    off = 8 + n_head
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    expected = n * R * 2
    if len(data) - off != expected:
        raise ValueError(f"token payload is {len(data) - off} bytes, expected {expected}")
    codes = np.frombuffer(data, dtype="<u2", offset=off).reshape(n, R).astype(np.int64)
    return TokenSequence(codes, r, K, ft, np.array([x, y, z]), W), meta


def save_tokens(path, tokens: TokenSequence, meta: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_tokens(tokens, meta))


def load_tokens(path) -> tuple[TokenSequence, dict]:
    with open(path, "rb") as fh:
        return parse_tokens(fh.read())


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    window: int = 64
    max_window: int = 256
    lr: float = 1e-3
    lr_min: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    commitment: float = 0.25
    fk_weight: float = 0.5
    augment_prob: float = 0.5
    seed: int = 0
    log_every: int = 50


@dataclass
class TrainItem:
    skeleton: Skeleton
    poses: PoseSequence
    h: torch.Tensor  # (J, owo_dim), frozen


def _batch_tensors(items: Sequence[tuple[Skeleton, np.ndarray, torch.Tensor]], dtype):
    J = max(s.num_joints for s, _, _ in items)
    B, T = len(items), items[0][1].shape[0]
    theta = torch.zeros(B, T, J, 9, dtype=dtype)
    theta[..., 3:] = torch.tensor(IDENTITY_ROT6D, dtype=dtype)
    h = torch.zeros(B, J, items[0][2].shape[-1], dtype=dtype)
    valid = torch.zeros(B, J, dtype=torch.bool)
    parents = torch.zeros(B, J, dtype=torch.long)
    offsets = torch.zeros(B, J, 3, dtype=dtype)
    for b, (s, th, hj) in enumerate(items):
        n = s.num_joints
        theta[b, :, :n] = torch.as_tensor(th, dtype=dtype)
        h[b, :n] = hj.to(dtype)
        valid[b, :n] = True
        parents[b, 1:n] = torch.as_tensor(s.parents[1:])
        offsets[b, :n] = torch.as_tensor(s.rest_offsets, dtype=dtype)
        offsets[b, 0] = 0
    return theta, h, valid, parents, offsets


def reconstruction_losses(model: TatModel, theta, h, valid, parents, offsets, cfg: TrainConfig):
    pred, z, zq, codes = model(theta, h, valid)
    T = pred.shape[1]
    target = theta[:, :T]
    w = valid[:, None, :, None].to(pred.dtype)
    n_valid = valid.sum()
    l_theta = ((pred - target).abs() * w).sum() / (n_valid * T * 9)
    with torch.no_grad():
        pos_gt = fk_from_theta(target, parents, offsets)
    pos = fk_from_theta(pred, parents, offsets)
    l_fk = ((pos - pos_gt).abs() * w).sum() / (n_valid * T * 3)
    commit = ((z - zq.detach()) ** 2).mean()
    recon = l_theta + cfg.fk_weight * l_fk
    total = recon + cfg.commitment * commit
    return {"total": total, "recon": recon, "theta": l_theta, "fk": l_fk, "commit": commit}, z, codes


class Trainer:
    """Holds the model, optimizer state and data for the tokenizer training loop."""

    def __init__(self, items: Sequence[TrainItem], owo_model: OwoModel, embedder: NameEmbedder,
                 config: Optional[TrainConfig] = None, model_config: Optional[TatConfig] = None):
        if not items:
            raise ValueError("training corpus is empty")
        self.cfg = cfg = config or TrainConfig()
        mcfg = model_config or TatConfig(owo_dim=owo_model.config.d)
        with nx.seeded(cfg.seed):
            self.model = TatModel(mcfg)
        self.store = nx.ParameterStore.from_module(self.model)
        self.items = list(items)
        self.owo = owo_model
        self.embedder = embedder
        self.rng = np.random.default_rng(cfg.seed)
        r = mcfg.compression
        shortest = min(len(it.poses) for it in self.items)
        window = min(cfg.window, cfg.max_window, shortest)
        self.window = r * (window // r)
        if self.window < r:
            raise ValueError(f"shortest sequence ({shortest} frames) is below the compression factor {r}")
        dropped = sum(len(it.poses) - self.window for it in self.items if len(it.poses) % self.window)
        if dropped:
            log.info("windowing at %d frames leaves %d boundary frames outside any single crop", self.window, dropped)
        self.step = 0
        self.history: list[dict] = []

    def sample_batch(self):
        cfg = self.cfg
        n = len(self.items)
        if cfg.batch_size >= n:
            idx = np.arange(n)
        else:
            idx = self.rng.choice(n, size=cfg.batch_size, replace=False)
        batch = []
        for i in idx:
            it = self.items[int(i)]
            start = int(self.rng.integers(0, len(it.poses) - self.window + 1))
            crop = PoseSequence(it.poses.root_positions[start:start + self.window],
                                it.poses.local_rotations[start:start + self.window])
            skel, h = it.skeleton, it.h
            if self.rng.random() < cfg.augment_prob:
                anchor = int(self.rng.integers(0, self.window))
                skel, crop = augment_rest_pose(skel, crop, anchor)
                with torch.no_grad():
                    h = embed_skeleton(skel, self.embedder, self.owo).h
            batch.append((skel, theta_from_pose_sequence(skel, crop).data, h))
        return _batch_tensors(batch, self.model.out.weight.dtype)

    def train_step(self) -> dict:
        cfg = self.cfg
        theta, h, valid, parents, offsets = self.sample_batch()
        if not bool(self.model.rvq.initialized):
            with torch.no_grad():
                z0 = self.model.encode_latents(theta, h, valid)
            self.model.rvq.init_from(z0, self.rng)
        losses, z, codes = reconstruction_losses(self.model, theta, h, valid, parents, offsets, cfg)
        loss = losses["total"]
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite tokenizer loss at step {self.step}: "
                + ", ".join(f"{k}={v.item():.4g}" for k, v in losses.items()),
                self.step,
                self.last_good,
            )
        self.store.zero_grad()
        nx.backward(loss)
        gnorm = nx.clip_grad_norm(self.store, cfg.grad_clip)
        lr = nx.cosine_lr(self.step, cfg.steps, cfg.lr, cfg.lr_min)
        nx.adamw_step(self.store, lr, weight_decay=cfg.weight_decay)
        self.model.rvq.ema_update(z, codes, self.rng)
        usage = [int(torch.unique(codes[..., r]).numel()) for r in range(codes.shape[-1])]
        rec = {"step": self.step, "lr": lr, "grad_norm": gnorm, "usage": usage}
        rec.update({k: v.item() for k, v in losses.items()})
        self.history.append(rec)
        if self.step % cfg.log_every == 0:
            log.info("tat step %d loss %.4f recon %.4f usage %s", self.step, rec["total"], rec["recon"], usage)
        self.step += 1
        return rec

    last_good: Optional[dict] = None

    def run(self, steps: Optional[int] = None, callback=None) -> list[dict]:
        steps = self.cfg.steps if steps is None else steps
        torch.set_num_threads(1)
        for _ in range(steps):
            if self.step % self.cfg.log_every == 0:
                self.last_good = nx.module_arrays(self.model)
            rec = self.train_step()
            if callback:
                callback(rec)
        return self.history


def make_items(sequences: Sequence[tuple[Skeleton, PoseSequence]], owo_model: OwoModel,
               embedder: NameEmbedder) -> list[TrainItem]:
    cache: dict[str, torch.Tensor] = {}
    items = []
    for skel, poses in sequences:
        key = skel.identity()
        if key not in cache:
            with torch.no_grad():
                cache[key] = embed_skeleton(skel, embedder, owo_model).h
        items.append(TrainItem(skel, poses, cache[key]))
    return items


def train_tat(sequences: Sequence[tuple[Skeleton, PoseSequence]], owo_model: OwoModel, embedder: NameEmbedder,
              config: Optional[TrainConfig] = None, model_config: Optional[TatConfig] = None
              ) -> tuple[TatModel, list[dict]]:
    """Train a tokenizer on (skeleton, poses) pairs with a frozen graph encoder."""
    before = nx.parameter_checksum(owo_model)
    trainer = Trainer(make_items(sequences, owo_model, embedder), owo_model, embedder, config, model_config)
    history = trainer.run()
    if nx.parameter_checksum(owo_model) != before:
        raise RuntimeError("graph encoder parameters changed during tokenizer training")
    trainer.model.eval()
    trainer.model.optimizer_store = trainer.store
    return trainer.model, history


@torch.no_grad()
def evaluate_mpjpe(model: TatModel, items: Sequence[TrainItem]) -> float:
    """Mean per-joint position error of encode/decode reconstructions (root-relative start)."""
    errs = []
    for it in items:
        theta = theta_from_pose_sequence(it.skeleton, it.poses)
        T = model.compression * (theta.num_frames // model.compression)
        h = NodeEmbeddings(it.h, it.h[0])
        rec = reconstruct(theta, h, model)
        start = it.poses.root_positions[0]
        gt = forward_kinematics(it.skeleton, PoseSequence(it.poses.root_positions[:T], it.poses.local_rotations[:T]))[0]
        pred = forward_kinematics(it.skeleton, pose_sequence_from_theta(it.skeleton, rec, start))[0]
        errs.append(np.linalg.norm(pred - gt, axis=-1).mean())
    return float(np.mean(errs))


@torch.no_grad()
def evaluate_reconstruction(model: TatModel, items: Sequence[TrainItem], config: Optional[TrainConfig] = None) -> float:
    """Training reconstruction loss on whole un-augmented sequences, averaged over items."""
    cfg = config or TrainConfig()
    was_training = model.training
    model.eval()
    vals = []
    for it in items:
        T = model.compression * (len(it.poses) // model.compression)
        crop = PoseSequence(it.poses.root_positions[:T], it.poses.local_rotations[:T])
        theta = theta_from_pose_sequence(it.skeleton, crop).data
        batch = _batch_tensors([(it.skeleton, theta, it.h)], model.out.weight.dtype)
        vals.append(reconstruction_losses(model, *batch, cfg)[0]["recon"].item())
    model.train(was_training)
    return float(np.mean(vals))


def config_dict(model_config: TatConfig, train_config: TrainConfig) -> dict:
    return {"model": asdict(model_config), "train": asdict(train_config)}
