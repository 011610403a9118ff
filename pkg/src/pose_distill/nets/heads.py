"""Discriminator heads that read multi-layer backbone features."""

from __future__ import annotations

from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..synth_data import Condition
from .velocity import MLP, Attention, CrossAttention, NetConfig, TimestepEmbed, patchify


class FusionBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, 2.0)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CrossBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, 2.0)

    def forward(self, q: Tensor, ctx: Tensor) -> Tensor:
        q = q + self.attn(self.norm_q(q), self.norm_kv(ctx))
        return q + self.mlp(self.norm2(q))


class SemanticHead(nn.Module):
    """Query-logit head fusing backbone features with image and text tokens.

    Learnable queries first attend jointly with the condition-frame tokens
    and the attribute tokens (each tagged by a modality embedding). The
    queries then cross-attend to every backbone layer in turn, with the noise
    level embedding added before each cross-attention. The per-layer query
    states are concatenated along channels and projected to one logit.
    """

    def __init__(self, net: NetConfig, n_queries: int = 16, heads: Optional[int] = None):
        super().__init__()
        d = net.dim
        heads = heads or net.heads
        self.net = net
        self.n_queries = n_queries
        self.queries = nn.Parameter(torch.randn(n_queries, d) * 0.02)
        self.image_proj = nn.Linear(net.channels * net.patch**2, d)
        self.image_pos = nn.Parameter(torch.randn(1, net.n_patches, d) * 0.02)
        self.attr_embed = nn.ModuleList(nn.Embedding(n, d) for n in net.attr_cardinalities)
        self.modality = nn.Embedding(2, d)
        self.fuse = FusionBlock(d, heads)
        self.t_embed = TimestepEmbed(d)
        self.cross = nn.ModuleList(CrossBlock(d, heads) for _ in range(net.depth))
        self.proj = nn.Linear(n_queries * net.depth * d, 1)

    def forward(self, features: Sequence[Tensor], t: Tensor, cond: Condition, grid=None) -> Tensor:
        if len(features) != len(self.cross):
            raise ValueError(f"expected {len(self.cross)} feature taps, got {len(features)}")
        B = features[0].shape[0]
        q = self.queries.unsqueeze(0).expand(B, -1, -1)
        img = patchify(cond.frame.unsqueeze(1).to(q.dtype), self.net.patch)[:, 0]
        e_i = self.image_proj(img) + self.image_pos + self.modality.weight[0]
        e_t = torch.stack([emb(cond.attrs[:, k]) for k, emb in enumerate(self.attr_embed)], dim=1)
        e_t = e_t + self.modality.weight[1]
        z = self.fuse(torch.cat([q, e_i, e_t], dim=1))
        q = z[:, : self.n_queries]
        temb = self.t_embed(t).unsqueeze(1)
        outs: List[Tensor] = []
        for block, feat in zip(self.cross, features):
            q = block(q + temb, feat)
            outs.append(q)
        return self.proj(torch.cat(outs, dim=-1).flatten(1)).squeeze(-1)


class ConvHead(nn.Module):
    """Per-layer 3-D convolutions over the feature grid, averaged to a logit.

    No access to the condition or the text; used by the adversarial baseline
    and the head-architecture ablation.
    """

    def __init__(self, net: NetConfig, hidden: int = 32):
        super().__init__()
        self.net = net
        self.convs = nn.ModuleList(
            nn.Sequential(
                nn.Conv3d(net.dim, hidden, 3, padding=1),
                nn.SiLU(),
                nn.Conv3d(hidden, 1, 1),
            )
            for _ in range(net.depth)
        )

    def forward(self, features: Sequence[Tensor], t: Tensor, cond: Condition, grid=None) -> Tensor:
        if len(features) != len(self.convs):
            raise ValueError(f"expected {len(self.convs)} feature taps, got {len(features)}")
        h, w = self.net.grid
        B, N, D = features[0].shape
        frames = N // (h * w)
        logit = 0.0
        for conv, feat in zip(self.convs, features):
            vol = feat.transpose(1, 2).reshape(B, D, frames, h, w)
            logit = logit + conv(vol).mean(dim=(1, 2, 3, 4))
        return logit


def make_head(kind: str, net: NetConfig, n_queries: int = 16) -> nn.Module:
    if kind == "semantic":
        return SemanticHead(net, n_queries)
    if kind == "conv":
        return ConvHead(net)
    raise ValueError(f"unknown head kind {kind!r}")


def discriminator_forward(
    backbone: nn.Module,
    head: nn.Module,
    x_t: Tensor,
    t: Tensor,
    cond: Condition,
) -> Tensor:
    """Logit per batch element, ``D = head(backbone features(x_t, t, cond))``.

    Gradients reach the head and ``x_t``. The backbone is expected to be a
    frozen module (EMA shadow, teacher, or fake model), so it collects none.
    """
    _, feats = backbone(x_t, t, cond, return_features=True)
    if not feats:
        raise ValueError("backbone returned no feature taps")
    return head(feats, t, cond)


class Discriminator:
    """Callable ``D(x_t, t)`` bound to a backbone, a head and a condition."""

    def __init__(self, backbone: nn.Module, head: nn.Module, cond: Condition):
        self.backbone = backbone
        self.head = head
        self.cond = cond

    def __call__(self, x_t: Tensor, t: Tensor) -> Tensor:
        return discriminator_forward(self.backbone, self.head, x_t, t, self.cond)
