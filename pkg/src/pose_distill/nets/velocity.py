"""Small spatiotemporal transformer velocity predictor."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..synth_data import Condition


@dataclass(frozen=True)
class NetConfig:
    frames: int = 8  # maximum clip length (temporal position table size)
    channels: int = 1
    height: int = 16
    width: int = 16
    patch: int = 2
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    attr_cardinalities: tuple = (4, 8, 3)

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("frame size must be divisible by the patch size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def grid(self) -> Tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def n_patches(self) -> int:
        h, w = self.grid
        return h * w

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        if "attr_cardinalities" in d:
            d["attr_cardinalities"] = tuple(d["attr_cardinalities"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_embedding(t: Tensor, dim: int, scale: float = 1000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=t.device, dtype=t.dtype) / half)
    args = scale * t.unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbed(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(sinusoidal_embedding(t, self.dim))


class Attention(nn.Module):
    """Multi-head attention with explicit softmax so double backward works."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        qkv = self.qkv(x).view(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (D // self.heads) ** -0.5
        out = attn.softmax(-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, ctx: Tensor) -> Tensor:
        B, N, D = x.shape
        h = self.heads
        q = self.q(x).view(B, N, h, D // h).transpose(1, 2)
        kv = self.kv(ctx).view(B, ctx.shape[1], 2, h, D // h).permute(2, 0, 3, 1, 4)
        attn = (q @ kv[0].transpose(-2, -1)) * (D // h) ** -0.5
        out = attn.softmax(-1) @ kv[1]
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class MLP(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Joint space-time attention block with adaLN-Zero modulation."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = MLP(dim, mlp_ratio)
        self.ada = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        s1, b1, g1, s2, b2, g2 = self.ada(F.silu(c)).unsqueeze(1).chunk(6, dim=-1)
        x = x + g1 * self.attn(self.norm1(x) * (1 + s1) + b1)
        x = x + g2 * self.mlp(self.norm2(x) * (1 + s2) + b2)
        return x


def patchify(x: Tensor, p: int) -> Tensor:
    """(B, F, C, H, W) -> (B, F, H/p * W/p, C*p*p)."""
    B, Fr, C, H, W = x.shape
    x = x.reshape(B, Fr, C, H // p, p, W // p, p)
    return x.permute(0, 1, 3, 5, 2, 4, 6).reshape(B, Fr, (H // p) * (W // p), C * p * p)


def unpatchify(tokens: Tensor, p: int, C: int, H: int, W: int) -> Tensor:
    B, Fr = tokens.shape[:2]
    x = tokens.reshape(B, Fr, H // p, W // p, C, p, p)
    return x.permute(0, 1, 4, 2, 5, 3, 6).reshape(B, Fr, C, H, W)


class VelocityNet(nn.Module):
    """Velocity predictor ``mu(x_t, t, cond)`` over frame sequences.

    Input channels per frame are ``[x_t, conditional frames, mask]``; the
    conditional frames are forward-filled along time so first-frame
    conditioning replicates frame 0 everywhere. Noise level and the
    categorical "text" attributes drive adaLN modulation of every block.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        c = config
        d = c.dim
        in_dim = (2 * c.channels + 1) * c.patch**2
        self.patch_embed = nn.Linear(in_dim, d)
        self.pos_space = nn.Parameter(torch.randn(1, 1, c.n_patches, d) * 0.02)
        self.pos_time = nn.Parameter(torch.randn(1, c.frames, 1, d) * 0.02)
        self.t_embed = TimestepEmbed(d)
        self.attr_embed = nn.ModuleList(nn.Embedding(n, d) for n in c.attr_cardinalities)
        self.blocks = nn.ModuleList(Block(d, c.heads, c.mlp_ratio) for _ in range(c.depth))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, c.channels * c.patch**2)
        for layer in (self.final_ada, self.out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def embed_condition(self, t: Tensor, cond: Optional[Condition]) -> Tensor:
        c = self.t_embed(t)
        if cond is not None:
            for k, emb in enumerate(self.attr_embed):
                c = c + emb(cond.attrs[:, k])
        return c

    def forward(
        self,
        x: Tensor,
        t: Tensor,
        cond: Optional[Condition] = None,
        return_features: bool = False,
    ):
        B, Fr, C, H, W = x.shape
        cfg = self.config
        if Fr > cfg.frames:
            raise ValueError(f"clip has {Fr} frames, network supports at most {cfg.frames}")
        if t.ndim == 0:
            t = t.expand(B)
        if cond is None:
            cond_frames = torch.zeros_like(x)
            mask = torch.zeros(B, Fr, 1, H, W, dtype=x.dtype, device=x.device)
        else:
            cond_frames = cond.frames.to(x.dtype)
            mask = cond.mask.to(x.dtype).view(B, Fr, 1, 1, 1).expand(B, Fr, 1, H, W)
        inp = torch.cat([x, cond_frames, mask], dim=2)
        h = self.patch_embed(patchify(inp, cfg.patch))
        h = h + self.pos_space + self.pos_time[:, :Fr]
        h = h.reshape(B, Fr * cfg.n_patches, cfg.dim)
        c = self.embed_condition(t, cond)
        features: List[Tensor] = []
        for block in self.blocks:
            h = block(h, c)
            features.append(h)
        shift, scale = self.final_ada(F.silu(c)).unsqueeze(1).chunk(2, dim=-1)
        out = self.out(self.final_norm(h) * (1 + scale) + shift)
        out = unpatchify(out.view(B, Fr, cfg.n_patches, -1), cfg.patch, C, H, W)
        if return_features:
            return out, features
        return out

    def features(self, x: Tensor, t: Tensor, cond: Optional[Condition] = None) -> List[Tensor]:
        """Per-block hidden states, each (B, F * n_patches, dim)."""
        return self.forward(x, t, cond, return_features=True)[1]


def generate(model: nn.Module, noise: Tensor, cond: Optional[Condition] = None) -> Tensor:
    """Single-step sample from pure noise: ``x_T - mu(x_T, 1)``."""
    t = torch.ones(noise.shape[0], dtype=noise.dtype, device=noise.device)
    return noise - model(noise, t, cond)
