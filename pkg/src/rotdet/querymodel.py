"""Decoupled-query decoder with a shrinking query schedule.

Each decoder layer runs self-attention over its queries, then splits them into
a class stream and a box stream (each with its own cross-attention and
feed-forward block). The class stream feeds the classification head, the box
stream feeds a head that predicts K points per query. The next layer's input
is the element-wise sum of the two streams, restricted to the top-scoring
queries by the layer's class probability.

Cross-attention carries a log-bias from Gaussians centred on each query's
current points, with a learned width per head. The first layer places its
points as offsets from a learned reference; later layers refine the previous
layer's (detached) points in logit space and see their layout through a shape
term in the positional embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class QuerySchedule:
    n_first: int = 300
    n_last: int = 100
    rho: float = 0.5
    layers: int = 6

    def __post_init__(self):
        if self.n_first <= 0 or self.n_last <= 0:
            raise ValueError("query counts must be positive")
        if self.n_last > self.n_first:
            raise ValueError("n_last must not exceed n_first")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.layers < 1:
            raise ValueError("need at least one layer")

    def counts(self) -> List[int]:
        return [query_count(self, i) for i in range(self.layers)]


def query_count(s: QuerySchedule, i: int) -> int:
    """Queries used by layer ``i``: ``(n_first - n_last) * rho**i + n_last``.

    Rounded half-up and clamped to ``[n_last, n_first]``.
    """
    if not 0 <= i < s.layers:
        raise IndexError(f"layer index {i} outside [0, {s.layers})")
    raw = (s.n_first - s.n_last) * s.rho**i + s.n_last
    n = math.floor(raw + 0.5)
    return int(min(max(n, s.n_last), s.n_first))


@dataclass(frozen=True)
class DecoderConfig:
    d: int = 64
    heads: int = 4
    layers: int = 6
    k_points: int = 9
    classes: int = 3
    memory_tokens: int = 256
    feature_dim: int = 9
    ffn_dim: int = 128
    image_size: float = 256.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.k_points < 3:
            raise ValueError("k_points must be >= 3")
        if self.layers < 1 or self.classes < 1:
            raise ValueError("layers and classes must be >= 1")


class OpCounter:
    """Multiply-add tally keyed by ``(layer, op)``."""

    def __init__(self):
        self.macs: Dict[tuple, int] = {}

    def add(self, layer: int, op: str, n: int):
        key = (layer, op)
        self.macs[key] = self.macs.get(key, 0) + int(n)

    def layer_total(self, layer: int, op: Optional[str] = None) -> int:
        return sum(v for (li, o), v in self.macs.items() if li == layer and (op is None or o == op))

    def total(self) -> int:
        return sum(self.macs.values())


def topk_indices(probs: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest scores per row, returned in ascending index order.

    Ties prefer the lower index.
    """
    n = probs.shape[-1]
    if k > n:
        raise ValueError(f"cannot keep {k} of {n} queries")
    order = torch.argsort(-probs, dim=-1, stable=True)[..., :k]
    return torch.sort(order, dim=-1).values


@dataclass
class QueryState:
    """Batched queries: features (B, N, d), reference logits (B, N, 2), original ids (B, N).

    ``base`` holds the point logits (B, N, K, 2) the layer's offsets are added to.
    """

    features: torch.Tensor
    ref: torch.Tensor
    index: torch.Tensor
    base: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.features.shape[1]

    def take(self, idx: torch.Tensor) -> "QueryState":
        def g(t):
            shape = idx.shape + t.shape[2:]
            return torch.gather(t, 1, idx.reshape(idx.shape + (1,) * (t.dim() - 2)).expand(shape))

        base = None if self.base is None else g(self.base)
        return QueryState(g(self.features), g(self.ref), torch.gather(self.index, 1, idx), base)


def select_topk(state: QueryState, class_probs: torch.Tensor, k: int) -> QueryState:
    """Keep the ``k`` queries with the largest class probability (selection only)."""
    if class_probs.dim() == 1:
        class_probs = class_probs.unsqueeze(0)
    return state.take(topk_indices(class_probs, k))


def fuse_features(class_features: torch.Tensor, box_features: torch.Tensor) -> torch.Tensor:
    if class_features.shape != box_features.shape:
        raise ValueError(
            f"cannot fuse {tuple(class_features.shape)} with {tuple(box_features.shape)}"
        )
    return class_features + box_features


def _lin(layer: nn.Linear, x: torch.Tensor, counter, li, op) -> torch.Tensor:
    if counter is not None:
        counter.add(li, op, x.numel() // x.shape[-1] * layer.in_features * layer.out_features)
    return layer(x)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, q_in, k_in, v_in, counter=None, li=0, op="attn", bias=None):
        B, Nq, d = q_in.shape
        Nk = k_in.shape[1]
        H = self.heads
        dh = d // H
        q = _lin(self.q, q_in, counter, li, op + ".proj").view(B, Nq, H, dh).transpose(1, 2)
        k = _lin(self.k, k_in, counter, li, op + ".proj").view(B, Nk, H, dh).transpose(1, 2)
        v = _lin(self.v, v_in, counter, li, op + ".proj").view(B, Nk, H, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if bias is not None:
            scores = scores + bias
        w = torch.softmax(scores, dim=-1)
        out = (w @ v).transpose(1, 2).reshape(B, Nq, d)
        if counter is not None:
            # scores + weighted sum
            counter.add(li, op, 2 * B * Nq * Nk * d)
        return _lin(self.o, out, counter, li, op + ".proj"), w


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x, counter=None, li=0, op="ffn"):
        h = torch.relu(_lin(self.fc1, x, counter, li, op))
        return _lin(self.fc2, h, counter, li, op)


class Branch(nn.Module):
    """Cross-attention to memory followed by a feed-forward block.

    Attention logits get a log-prior from an equal mixture of Gaussians centred
    on the query's current points, with a learned per-head width, so queries
    look near where they currently place the object.
    """

    def __init__(self, d: int, heads: int, hidden: int, sigma: float = 0.1):
        super().__init__()
        self.cross = Attention(d, heads)
        self.log_sigma = nn.Parameter(torch.full((heads,), math.log(sigma)))
        self.norm1 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, hidden)
        self.norm2 = nn.LayerNorm(d)

    def spatial_bias(self, pts, cells):
        """Points (B, N, K, 2) in [0, 1] and grid-cell centres (S,) -> logit bias (B, H, N, S*S).

        The grid is regular, so each Gaussian factors into x and y parts and the
        mixture over points is one batched matrix product.
        """
        a = (0.5 * torch.exp(-2.0 * self.log_sigma)).view(1, -1, 1, 1, 1)
        gx = torch.exp(-a * (pts[..., 0].unsqueeze(1).unsqueeze(-1) - cells) ** 2)
        gy = torch.exp(-a * (pts[..., 1].unsqueeze(1).unsqueeze(-1) - cells) ** 2)
        mix = torch.einsum("bhnkr,bhnkc->bhnrc", gy, gx) / pts.shape[2]
        # far cells underflow; their attention weight is negligible either way
        tiny = torch.finfo(mix.dtype).tiny
        return torch.log(mix.clamp_min(tiny)).flatten(-2)

    def forward(self, x, pos, memory, mem_pos, counter, li, name, pts=None, cells=None):
        bias = None if pts is None else self.spatial_bias(pts, cells)
        a, w = self.cross(x + pos, memory + mem_pos, memory, counter, li, name + ".cross", bias)
        x = self.norm1(x + a)
        x = self.norm2(x + self.ffn(x, counter, li, name + ".ffn"))
        return x, w


@dataclass
class LayerOutput:
    logits: torch.Tensor  # (B, N, C)
    points: torch.Tensor  # (B, N, K, 2) in pixels
    class_features: torch.Tensor
    box_features: torch.Tensor
    state: QueryState  # queries that entered the layer
    self_attn: torch.Tensor  # (B, H, N, N)
    cross_attn: torch.Tensor  # class-branch weights (B, H, N, T)
    keep: Optional[torch.Tensor] = None  # positions kept from the previous layer (B, N)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d = cfg.d
        self.cfg = cfg
        self.self_attn = Attention(d, cfg.heads)
        self.norm = nn.LayerNorm(d)
        self.cls_branch = Branch(d, cfg.heads, cfg.ffn_dim)
        self.box_branch = Branch(d, cfg.heads, cfg.ffn_dim)
        self.cls_head = nn.Linear(d, cfg.classes)
        self.pts_hidden = nn.Linear(d, d)
        self.pts_out = nn.Linear(d, cfg.k_points * 2)

    def forward(self, x, pos, ref, base, memory, mem_pos, counter=None, li=0, cells=None):
        cfg = self.cfg
        sa, sw = self.self_attn(x + pos, x + pos, x, counter, li, "self_attn")
        x = self.norm(x + sa)
        pts = None if cells is None else torch.sigmoid(base)
        c, cw = self.cls_branch(x, pos, memory, mem_pos, counter, li, "cls", pts, cells)
        b, _ = self.box_branch(x, pos, memory, mem_pos, counter, li, "box", pts, cells)
        logits = _lin(self.cls_head, c, counter, li, "cls_head")
        h = torch.relu(_lin(self.pts_hidden, b, counter, li, "pts_head"))
        off = _lin(self.pts_out, h, counter, li, "pts_head")
        B, N, _ = off.shape
        off = off.view(B, N, cfg.k_points, 2)
        points = torch.sigmoid(base + off) * cfg.image_size
        return c, b, logits, points, sw, cw


def sine_embed(xy: torch.Tensor, n_freq: int) -> torch.Tensor:
    """Sinusoidal embedding of normalised coordinates, (..., 2) -> (..., 4 * n_freq)."""
    freqs = (2.0 ** torch.arange(n_freq, dtype=xy.dtype, device=xy.device)) * math.pi
    ang = xy.unsqueeze(-1) * freqs
    return torch.cat([ang.sin(), ang.cos()], dim=-1).flatten(-2)


class QueryDecoder(nn.Module):
    """Memory embedding, learned queries and a stack of decoupled layers."""

    N_FREQ = 8
    SHAPE_SCALE = 10.0

    def __init__(self, cfg: DecoderConfig, n_queries: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.content = nn.Parameter(torch.randn(n_queries, d) * 0.1)
        # reference points start on a jittered grid (logit space)
        g = int(math.ceil(math.sqrt(n_queries)))
        ij = torch.stack(torch.meshgrid(torch.arange(g), torch.arange(g), indexing="xy"), -1)
        grid = ((ij.reshape(-1, 2)[:n_queries].double() + 0.5) / g).clamp(0.02, 0.98)
        self.ref = nn.Parameter(torch.logit(grid).to(torch.get_default_dtype()))
        self.mem_proj = nn.Linear(cfg.feature_dim, d)
        self.mem_pos = nn.Linear(4 * self.N_FREQ, d)
        self.query_pos = nn.Sequential(nn.Linear(4 * self.N_FREQ, d), nn.ReLU(), nn.Linear(d, d))
        self.shape_pos = nn.Linear(2 * cfg.k_points, d)
        self.layers = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.layers)])
        side = int(round(math.sqrt(cfg.memory_tokens)))
        if side * side != cfg.memory_tokens:
            raise ValueError("memory_tokens must be a square grid")
        c = (torch.arange(side, dtype=torch.float64) + 0.5) / side
        yy, xx = torch.meshgrid(c, c, indexing="ij")
        self.register_buffer(
            "cell_xy", torch.stack([xx, yy], -1).reshape(-1, 2).to(torch.get_default_dtype())
        )
        # row-major cell centres along one axis, for the separable attention prior
        self.register_buffer("cells", c.to(torch.get_default_dtype()), persistent=False)
        self._init_heads()

    def _init_heads(self):
        prior = 0.01
        for li, layer in enumerate(self.layers):
            nn.init.constant_(layer.cls_head.bias, -math.log((1 - prior) / prior))
            nn.init.uniform_(layer.pts_out.weight, -1e-3, 1e-3)
            nn.init.zeros_(layer.pts_out.bias)
        # the first layer spreads its K points around the reference at start
        k = self.cfg.k_points
        ang = torch.arange(k, dtype=torch.float64) * (2 * math.pi / k)
        init = torch.stack([ang.cos(), ang.sin()], -1) * 0.15
        with torch.no_grad():
            self.layers[0].pts_out.bias.copy_(init.reshape(-1).to(self.layers[0].pts_out.bias.dtype))

    def embed_memory(self, features: torch.Tensor, counter=None):
        pos = self.mem_pos(sine_embed(self.cell_xy.to(features.dtype), self.N_FREQ)).unsqueeze(0)
        # encoder outputs carry position in their content, so values see it too
        mem = _lin(self.mem_proj, features, counter, -1, "memory") + pos
        return mem, pos

    def forward(
        self,
        features: torch.Tensor,
        sched: QuerySchedule,
        counter: Optional[OpCounter] = None,
        anchors: Optional[List[LayerOutput]] = None,
    ) -> List[LayerOutput]:
        """Run every layer; returns per-layer heads for deep supervision.

        ``anchors`` (outputs of an earlier call) pins the top-k selection and
        the detached reference points of later layers to that call's values.
        Only the gradient checker uses it.
        """
        cfg = self.cfg
        if features.dim() == 2:
            features = features.unsqueeze(0)
        if features.shape[1:] != (cfg.memory_tokens, cfg.feature_dim):
            raise ValueError(
                f"memory of shape {tuple(features.shape[1:])} does not match "
                f"({cfg.memory_tokens}, {cfg.feature_dim})"
            )
        if sched.layers != cfg.layers:
            raise ValueError(f"schedule has {sched.layers} layers, decoder has {cfg.layers}")
        if sched.n_first > self.content.shape[0]:
            raise ValueError(f"schedule wants {sched.n_first} queries, model has {self.content.shape[0]}")
        B = features.shape[0]
        memory, mem_pos = self.embed_memory(features, counter)
        n0 = sched.n_first
        ref = self.ref[:n0].unsqueeze(0).expand(B, -1, -1)
        state = QueryState(
            self.content[:n0].unsqueeze(0).expand(B, -1, -1),
            ref,
            torch.arange(n0).unsqueeze(0).expand(B, -1),
            ref.unsqueeze(2).expand(-1, -1, cfg.k_points, -1),
        )
        outputs: List[LayerOutput] = []
        for li, layer in enumerate(self.layers):
            keep = None
            if li > 0:
                # later layers refine the previous points; no gradient flows back through them
                prev = outputs[-1]
                probs = torch.sigmoid(prev.logits.detach()).max(dim=-1).values
                unit = (prev.points.detach() / cfg.image_size).clamp(1e-4, 1 - 1e-4)
                nxt = QueryState(
                    fuse_features(prev.class_features, prev.box_features),
                    torch.logit(unit.mean(dim=2)),
                    prev.state.index,
                    torch.logit(unit),
                )
                if anchors is None:
                    keep = topk_indices(probs, query_count(sched, li))
                    state = nxt.take(keep)
                else:
                    keep = anchors[li].keep
                    a = anchors[li].state
                    state = QueryState(nxt.take(keep).features, a.ref, a.index, a.base)
            centre = torch.sigmoid(state.ref)
            # where the current points sit around the centre (all zero in the first layer)
            spread = (torch.sigmoid(state.base) - centre.unsqueeze(2)).flatten(-2) * self.SHAPE_SCALE
            pos = self.query_pos(sine_embed(centre, self.N_FREQ)) + self.shape_pos(spread)
            c, b, logits, points, sw, cw = layer(
                state.features, pos, state.ref, state.base, memory, mem_pos, counter, li, self.cells
            )
            outputs.append(LayerOutput(logits, points, c, b, state, sw, cw, keep))
        return outputs
