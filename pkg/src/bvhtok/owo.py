"""Skeleton graph encoder: per-joint structural embeddings from a rest pose.

The graph has one node per joint plus a global node wired to every joint in
both directions. Edge features mix both endpoint features with a sinusoidal
code of the rest offset (negated for the child-to-parent direction). The
encoder is a stack of edge-conditioned attention blocks; it is pretrained
with offset regression, LCA prediction and name-contrastive objectives and
then frozen.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .skeleton import Skeleton, lca_matrix, rest_positions

log = logging.getLogger(__name__)

NAME_DIM = 512
GLOBAL_NODE_NAME = "global"


# ------------------------------------------------------------ name embedders

class NameEmbedder(Protocol):
    dim: int

    def embed(self, name: str) -> np.ndarray: ...


class HashNameEmbedder:
    """Deterministic unit-norm embedding from hashed character trigrams.

    Stands in for a pretrained text encoder; similar names share trigrams and
    so land close together.
    """

    dim = NAME_DIM

    def __init__(self, dim: int = NAME_DIM):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _features(self, name: str) -> list[str]:
        text = name.strip().lower().replace("_", " ").replace(".", " ").replace("-", " ")
        feats = []
        for word in text.split() or [""]:
            padded = f"^{word}$"
            feats.extend(padded[i:i + 3] for i in range(max(1, len(padded) - 2)))
            feats.append("w:" + word)
        return feats

    def embed(self, name: str) -> np.ndarray:
        if name in self._cache:
            return self._cache[name]
        v = np.zeros(self.dim)
        for f in self._features(name):
            d = hashlib.blake2b(f.encode("utf-8"), digest_size=8).digest()
            idx = int.from_bytes(d[:4], "little") % self.dim
            sign = 1.0 if d[4] & 1 else -1.0
            v[idx] += sign
        n = np.linalg.norm(v)
        v = v / n if n > 0 else np.full(self.dim, 1 / math.sqrt(self.dim))
        self._cache[name] = v
        return v


class TableNameEmbedder:
    """Precomputed vectors from a ``name<TAB>floats`` file, hashing as fallback."""

    def __init__(self, table: dict[str, np.ndarray], fallback: Optional[HashNameEmbedder] = None):
        dims = {v.shape[0] for v in table.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent vector sizes in name table: {sorted(dims)}")
        self.dim = dims.pop() if dims else NAME_DIM
        self.table = {k: v / max(np.linalg.norm(v), 1e-12) for k, v in table.items()}
        self.fallback = fallback or HashNameEmbedder(self.dim)
        self._warned: set[str] = set()

    @classmethod
    def load(cls, path) -> "TableNameEmbedder":
        table = {}
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                name, _, rest = line.rstrip("\n").partition("\t")
                try:
                    table[name] = np.array([float(x) for x in rest.split()])
                except ValueError:
                    raise ValueError(f"{path}:{n}: malformed vector") from None
        return cls(table)

    def embed(self, name: str) -> np.ndarray:
        if name in self.table:
            return self.table[name]
        if name not in self._warned:
            log.warning("no embedding for joint name %r; using hashed fallback", name)
            self._warned.add(name)
        return self.fallback.embed(name)


# --------------------------------------------------------------- parameters

@dataclass
class OwoConfig:
    d: int = 32
    layers: int = 2
    d_ff: int = 64
    name_dim: int = NAME_DIM
    leaky_slope: float = 0.2
    tau_init: float = 0.07
    freq_min: float = 1.0
    freq_max: float = 64.0


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class GraphBlock(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.W_node = nn.Linear(d, d, bias=False)
        self.a = nn.Linear(3 * d, 1, bias=False)
        self.W_v = nn.Linear(2 * d, d, bias=False)
        self.W_src = nn.Linear(d, d, bias=False)
        self.W_tgt = nn.Linear(d, d, bias=False)
        self.ffn_node = _mlp(d, d_ff, d)
        self.norm_node = nn.LayerNorm(d)
        self.ffn_edge = _mlp(d, d_ff, d)
        self.norm_edge = nn.LayerNorm(d)


class OwoModel(nn.Module):
    """All learnable pieces: input projections, graph blocks and task heads."""

    def __init__(self, config: Optional[OwoConfig] = None):
        super().__init__()
        self.config = config = config or OwoConfig()
        if config.d % 2:
            raise ValueError("d must be even for the sinusoidal offset code")
        d = config.d
        self.node_fc = nn.Linear(config.name_dim, d)
        self.edge_fc = nn.Linear(2 * d + 3 * d, d)
        self.blocks = nn.ModuleList([GraphBlock(d, config.d_ff) for _ in range(config.layers)])
        self.geo_ffn = _mlp(2 * d, config.d_ff, d)
        self.W_geo = nn.Linear(d, 3)
        self.lca_query = _mlp(d, config.d_ff, d)
        self.lca_key = _mlp(d, config.d_ff, d)
        self.sem_node = _mlp(d, config.d_ff, d)
        self.sem_text = _mlp(config.name_dim, config.d_ff, d)
        self.log_tau = nn.Parameter(torch.tensor(math.log(config.tau_init)))
        n = d // 2
        freqs = np.geomspace(config.freq_min, config.freq_max, n) if n > 1 else np.array([config.freq_min])
        self.register_buffer("freqs", torch.tensor(freqs, dtype=torch.float32))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()


def sinusoidal_offset_embedding(offset, freqs) -> torch.Tensor:
    """Per-coordinate ``[sin(w o), cos(w o)]`` bands; (..., 3) -> (..., 3 * 2 * len(freqs))."""
    o = torch.as_tensor(offset)
    w = torch.as_tensor(freqs, dtype=o.dtype if o.is_floating_point() else torch.float64)
    o = o.to(w.dtype)
    arg = o[..., :, None] * w  # (..., 3, n)
    bands = torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)
    return bands.reshape(*o.shape[:-1], -1)


def offset_embedding_lipschitz(freqs) -> float:
    """Upper bound on ||phi(a) - phi(b)|| / ||a - b||."""
    return float(np.sqrt(np.sum(np.asarray(freqs, dtype=np.float64) ** 2)))


# ------------------------------------------------------------------- graph

@dataclass
class SkeletalGraph:
    """Directed graph over J joints plus the global node (index J)."""

    num_joints: int
    node_feats: torch.Tensor  # (J + 1, d)
    edge_src: torch.Tensor  # (E,)
    edge_dst: torch.Tensor  # (E,)
    edge_feats: torch.Tensor  # (E, d)
    name_embeddings: torch.Tensor  # (J + 1, name_dim)

    @property
    def num_nodes(self) -> int:
        return self.num_joints + 1

    def in_neighbors(self, node: int) -> list[int]:
        return self.edge_src[self.edge_dst == node].tolist()


@dataclass
class NodeEmbeddings:
    h: torch.Tensor  # (J, d)
    h_global: torch.Tensor  # (d,)
    attention: list[torch.Tensor] = field(default_factory=list)

    @property
    def num_joints(self) -> int:
        return int(self.h.shape[0])


def graph_edges(skel: Skeleton) -> tuple[list[int], list[int], np.ndarray]:
    """(src, dst, offset) for tree edges in both directions, then global edges."""
    J = skel.num_joints
    src, dst, off = [], [], []
    for c in range(1, J):
        p = skel.parents[c]
        src += [p, c]
        dst += [c, p]
        off += [skel.rest_offsets[c], -skel.rest_offsets[c]]
    for j in range(J):
        src += [J, j]
        dst += [j, J]
        off += [np.zeros(3), np.zeros(3)]
    return src, dst, np.array(off).reshape(-1, 3)


def build_graph(skel: Skeleton, embedder: NameEmbedder, model: OwoModel) -> SkeletalGraph:
    dtype = model.node_fc.weight.dtype
    names = list(skel.joint_names) + [GLOBAL_NODE_NAME]
    name_emb = torch.tensor(np.stack([embedder.embed(n) for n in names]), dtype=dtype)
    h0 = model.node_fc(name_emb)
    src, dst, off = graph_edges(skel)
    src_t = torch.tensor(src, dtype=torch.long)
    dst_t = torch.tensor(dst, dtype=torch.long)
    phi = sinusoidal_offset_embedding(torch.tensor(off, dtype=dtype), model.freqs.to(dtype))
    e0 = model.edge_fc(nx.concat([h0[src_t], h0[dst_t], phi], dim=-1))
    return SkeletalGraph(skel.num_joints, h0, src_t, dst_t, e0, name_emb)


def encode_graph(graph: SkeletalGraph, model: OwoModel, layers: Optional[int] = None) -> NodeEmbeddings:
    """Run ``layers`` graph blocks (default: all). Attention weights per layer are kept."""
    n_layers = len(model.blocks) if layers is None else layers
    if n_layers > len(model.blocks):
        raise ValueError(f"model has {len(model.blocks)} blocks, {n_layers} requested")
    h, e = graph.node_feats, graph.edge_feats
    src, dst = graph.edge_src, graph.edge_dst
    N = graph.num_nodes
    slope = model.config.leaky_slope
    attn = []
    for block in model.blocks[:n_layers]:
        wh = block.W_node(h)
        score = nx.leaky_relu(block.a(nx.concat([wh[dst], wh[src], e], dim=-1)).squeeze(-1), slope)
        dense = torch.full((N, N), float("-inf"), dtype=h.dtype).index_put((dst, src), score)
        alpha = nx.softmax(dense, dim=1)[dst, src]
        msg = block.W_v(nx.concat([h[src], e], dim=-1))
        h_tilde = torch.zeros_like(h).index_add(0, dst, alpha[:, None] * msg)
        e_tilde = e + block.W_src(wh[dst]) + block.W_tgt(wh[src])
        h = block.norm_node(h + nx.relu(block.ffn_node(h_tilde)))
        e = block.norm_edge(e + nx.relu(block.ffn_edge(e_tilde)))
        attn.append(alpha)
    J = graph.num_joints
    return NodeEmbeddings(h[:J], h[J], attn)


def embed_skeleton(skel: Skeleton, embedder: NameEmbedder, model: OwoModel) -> NodeEmbeddings:
    return encode_graph(build_graph(skel, embedder, model), model)


# -------------------------------------------------------------------- losses

def predict_offsets(h: NodeEmbeddings, pairs: torch.Tensor, model: OwoModel) -> torch.Tensor:
    x = nx.concat([h.h[pairs[:, 0]], h.h[pairs[:, 1]]], dim=-1)
    return model.W_geo(nx.relu(model.geo_ffn(x)))


def loss_geometric(h: NodeEmbeddings, skel: Skeleton, pairs, model: OwoModel) -> torch.Tensor:
    """Sum over pairs (j, k) of ||predicted - (p_k - p_j)||^2 on rest-pose positions."""
    pairs = torch.as_tensor(np.asarray(pairs), dtype=torch.long).reshape(-1, 2)
    pos = torch.tensor(rest_positions(skel), dtype=h.h.dtype)
    target = pos[pairs[:, 1]] - pos[pairs[:, 0]]
    pred = predict_offsets(h, pairs, model)
    return torch.sum((pred - target) ** 2)


def lca_logits(h: NodeEmbeddings, pairs: torch.Tensor, model: OwoModel) -> torch.Tensor:
    q = model.lca_query(h.h[pairs[:, 0]] + h.h[pairs[:, 1]])
    k = model.lca_key(h.h)
    return nx.matmul(q, k.T)


def loss_lca(h: NodeEmbeddings, skel: Skeleton, pairs, model: OwoModel,
             lca_table: Optional[np.ndarray] = None) -> torch.Tensor:
    """Mean over pairs of the cross-entropy against the true LCA."""
    pairs = torch.as_tensor(np.asarray(pairs), dtype=torch.long).reshape(-1, 2)
    table = lca_matrix(skel) if lca_table is None else lca_table
    target = torch.as_tensor(table[pairs[:, 0].numpy(), pairs[:, 1].numpy()], dtype=torch.long)
    return nx.cross_entropy(lca_logits(h, pairs, model), target)


def predict_lca_table(h: NodeEmbeddings, model: OwoModel) -> np.ndarray:
    """Argmax LCA answer for every joint pair, (J, J)."""
    J = h.num_joints
    ii, jj = np.meshgrid(np.arange(J), np.arange(J), indexing="ij")
    pairs = torch.tensor(np.stack([ii.ravel(), jj.ravel()], 1))
    with torch.no_grad():
        return lca_logits(h, pairs, model).argmax(-1).numpy().reshape(J, J)


def semantic_logits(h: NodeEmbeddings, name_embeddings: torch.Tensor, model: OwoModel) -> torch.Tensor:
    z_node = model.sem_node(h.h)
    z_text = model.sem_text(name_embeddings[: h.num_joints])
    return nx.cosine_similarity(z_node, z_text) / model.tau


def loss_semantic(h: NodeEmbeddings, name_embeddings: torch.Tensor, model: OwoModel) -> torch.Tensor:
    """InfoNCE between node projections and name projections, averaged over joints."""
    J = h.num_joints
    if J < 2:
        raise ValueError("contrastive name loss needs at least 2 joints")
    logits = semantic_logits(h, name_embeddings, model)
    return nx.cross_entropy(logits, torch.arange(J))


def loss_total(lambda_geo: float, lambda_lca: float, lambda_sem: float, components: Sequence) -> torch.Tensor:
    """Weighted sum of (geo, lca, sem); a zero weight skips its component."""
    if min(lambda_geo, lambda_lca, lambda_sem) < 0:
        raise ValueError("loss weights must be non-negative")
    total = 0.0
    for w, c in zip((lambda_geo, lambda_lca, lambda_sem), components):
        if w:
            total = total + w * c
    return total if torch.is_tensor(total) else torch.tensor(float(total))


# ----------------------------------------------------------------- pretraining

@dataclass
class PretrainConfig:
    steps: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    skeletons_per_step: int = 8
    pair_budget: int = 128
    all_pairs_max_joints: int = 16
    # loss toggles: parent-child offsets, LCA, all-pairs distance, name contrast
    offset: bool = False
    lca: bool = True
    dist: bool = True
    con: bool = True
    lambda_geo: float = 1.0
    lambda_lca: float = 1.0
    lambda_sem: float = 1.0
    seed: int = 0
    log_every: int = 25


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, step: int, last_good: Optional[dict] = None):
        self.step = step
        self.last_good = last_good
        super().__init__(message)


def sample_pairs(J: int, rng: np.random.Generator, budget: int = 128, all_max: int = 16) -> np.ndarray:
    """All unordered pairs i < j when J <= ``all_max``, else ``budget`` random ones."""
    if J < 2:
        return np.zeros((0, 2), dtype=np.int64)
    if J <= all_max:
        i, j = np.triu_indices(J, 1)
        return np.stack([i, j], 1)
    a = rng.integers(0, J, size=(budget * 2, 2))
    a = a[a[:, 0] != a[:, 1]][:budget]
    return np.sort(a, axis=1)


def parent_child_pairs(skel: Skeleton) -> np.ndarray:
    return np.array([(skel.parents[c], c) for c in range(1, skel.num_joints)], dtype=np.int64).reshape(-1, 2)


def _geo_pairs(skel: Skeleton, pairs: np.ndarray, cfg: PretrainConfig) -> np.ndarray:
    parts = []
    if cfg.dist:
        parts.append(pairs)
    if cfg.offset:
        parts.append(parent_child_pairs(skel))
    if not parts:
        return np.zeros((0, 2), dtype=np.int64)
    p = np.concatenate(parts)
    return np.concatenate([p, p[:, ::-1]])


def skeleton_losses(model: OwoModel, skel: Skeleton, embedder: NameEmbedder, cfg: PretrainConfig,
                    rng: np.random.Generator, lca_table: Optional[np.ndarray] = None) -> dict[str, torch.Tensor]:
    graph = build_graph(skel, embedder, model)
    h = encode_graph(graph, model)
    pairs = sample_pairs(skel.num_joints, rng, cfg.pair_budget, cfg.all_pairs_max_joints)
    zero = torch.zeros((), dtype=h.h.dtype)
    out = {"geo": zero, "lca": zero, "sem": zero}
    geo_pairs = _geo_pairs(skel, pairs, cfg)
    if len(geo_pairs):
        out["geo"] = loss_geometric(h, skel, geo_pairs, model)
    if cfg.lca:
        # self-pairs too, so the head answers every query the tree reconstruction asks
        diag = np.repeat(np.arange(skel.num_joints), 2).reshape(-1, 2)
        out["lca"] = loss_lca(h, skel, np.concatenate([pairs, diag]), model, lca_table)
    if cfg.con and skel.num_joints >= 2:
        out["sem"] = loss_semantic(h, graph.name_embeddings, model)
    return out


def pretrain_owo(corpus: Sequence[Skeleton], config: Optional[PretrainConfig] = None,
                 model_config: Optional[OwoConfig] = None, embedder: Optional[NameEmbedder] = None,
                 model: Optional[OwoModel] = None) -> tuple[OwoModel, list[dict]]:
    """Optimize the weighted self-supervised loss; returns the model and a per-step log."""
    cfg = config or PretrainConfig()
    if not corpus:
        raise ValueError("pretraining needs at least one skeleton")
    embedder = embedder or HashNameEmbedder()
    if model is None:
        with nx.seeded(cfg.seed):
            model = OwoModel(model_config)
    rng = np.random.default_rng(cfg.seed)
    store = nx.ParameterStore.from_module(model)
    tables = [lca_matrix(s) for s in corpus]
    lam = (
        cfg.lambda_geo if (cfg.offset or cfg.dist) else 0.0,
        cfg.lambda_lca if cfg.lca else 0.0,
        cfg.lambda_sem if cfg.con else 0.0,
    )
    history = []
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for step in range(cfg.steps):
        k = min(cfg.skeletons_per_step, len(corpus))
        chosen = rng.choice(len(corpus), size=k, replace=False) if k < len(corpus) else np.arange(len(corpus))
        comps = {"geo": 0.0, "lca": 0.0, "sem": 0.0}
        for i in chosen:
            parts = skeleton_losses(model, corpus[i], embedder, cfg, rng, tables[i])
            for key in comps:
                comps[key] = comps[key] + parts[key] / k
        loss = loss_total(*lam, (comps["geo"], comps["lca"], comps["sem"]))
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise TrainingDiverged(
                f"non-finite OwO loss at step {step}: "
                + ", ".join(f"{n}={float(torch.as_tensor(v).detach()):.4g}" for n, v in comps.items()),
                step,
                last_good,
            )
        store.zero_grad()
        nx.backward(loss)
        gnorm = nx.clip_grad_norm(store, cfg.grad_clip)
        lr = nx.cosine_lr(step, cfg.steps, cfg.lr, cfg.lr * 0.1)
        nx.adamw_step(store, lr, weight_decay=cfg.weight_decay)
        record = {"step": step, "loss": loss.item(), "lr": lr, "grad_norm": gnorm}
        record.update({n: float(torch.as_tensor(v).detach()) for n, v in comps.items()})
        history.append(record)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.info("owo step %d loss %.4f", step, record["loss"])
            last_good = {k2: v.detach().clone() for k2, v in model.state_dict().items()}
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.optimizer_store = store
    return model, history


LOSS_ABLATION_ROWS = [
    # (pretrain, offset, lca, dist, con)
    (False, 0, 0, 0, 0),
    (True, 1, 0, 0, 0),
    (True, 0, 1, 0, 0),
    (True, 0, 0, 1, 0),
    (True, 0, 0, 0, 1),
    (True, 0, 1, 1, 1),
    (True, 1, 0, 1, 1),
    (True, 1, 1, 0, 1),
    (True, 1, 1, 1, 0),
    (True, 1, 1, 1, 1),
]
