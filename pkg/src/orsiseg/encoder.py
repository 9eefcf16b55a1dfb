"""Four-stage hybrid attention encoder.

Each stage embeds its input with an overlapping strided convolution and then
runs ``depth`` pairs of (GLMA block, GLFFN block). A GLMA block mixes a
spatially-reduced self-attention branch with a multi-scale depthwise
convolution branch in Fourier space; a GLFFN block is a gated feed-forward
network with hierarchical channel-split depthwise convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .fourier import FourierMerge
from .layers import LayerNorm2d, depthwise, mark_zero_init, pointwise

STAGE_STRIDES = (4, 2, 2, 2)


class PyramidFeatures(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor


@dataclass
class AttentionProjections:
    query: torch.Tensor  # (B, heads, T, head_dim)
    key: torch.Tensor  # (B, heads, T / sr^2, head_dim)
    value: torch.Tensor
    sr_ratio: int


class PatchEmbed(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        kernel = 7 if stride == 4 else 3
        self.stride = stride
        self.proj = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)
        self.norm = LayerNorm2d(out_ch)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"spatial size {h}x{w} not divisible by patch stride {self.stride}")
        return self.norm(self.proj(x))


def scaled_dot_attention(q, k, v):
    attn = (q @ k.transpose(-2, -1)) * q.shape[-1] ** -0.5
    attn = attn.softmax(dim=-1)
    return attn @ v, attn


class GlobalPerspective(nn.Module):
    """Multi-head self-attention with keys/values on a grid reduced by ``sr_ratio``."""

    def __init__(self, dim, heads, sr_ratio):
        super().__init__()
        if dim % heads:
            raise ValueError(f"channel width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.sr_ratio = sr_ratio
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def projections(self, x) -> AttentionProjections:
        b, c, h, w = x.shape
        if c != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {c}")
        hd = c // self.heads
        tokens = x.flatten(2).transpose(1, 2)
        q = self.q(tokens).reshape(b, -1, self.heads, hd).transpose(1, 2)
        if self.sr_ratio > 1:
            reduced = self.sr_norm(self.sr(x).flatten(2).transpose(1, 2))
        else:
            reduced = tokens
        kv = self.kv(reduced).reshape(b, -1, 2, self.heads, hd).permute(2, 0, 3, 1, 4)
        return AttentionProjections(q, kv[0], kv[1], self.sr_ratio)

    def forward(self, x, return_attn=False):
        b, c, h, w = x.shape
        p = self.projections(x)
        out, attn = scaled_dot_attention(p.query, p.key, p.value)
        out = out.transpose(1, 2).reshape(b, h * w, c).transpose(1, 2).reshape(b, c, h, w)
        return (out, attn) if return_attn else out


class LocalPerspective(nn.Module):
    """Three chained pointwise+depthwise branches (kernels 3, 5, 7), summed and mixed.

    Branch k sees ``x + branch_{k-1}(...)``; the first branch sees ``x`` alone.
    """

    def __init__(self, dim, kernels=(3, 5, 7)):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(pointwise(dim, dim), depthwise(dim, k)) for k in kernels
        )
        self.fuse = pointwise(dim, dim)

    def forward(self, x):
        prev = None
        total = 0
        for branch in self.branches:
            prev = branch(x if prev is None else x + prev)
            total = total + prev
        return self.fuse(total)


class GLMABlock(nn.Module):
    def __init__(self, dim, heads, sr_ratio, kernels=(3, 5, 7)):
        super().__init__()
        self.norm = LayerNorm2d(dim)
        self.global_branch = GlobalPerspective(dim, heads, sr_ratio)
        self.local_branch = LocalPerspective(dim, kernels)
        self.merge = FourierMerge(dim)

    def forward(self, x):
        n = self.norm(x)
        return self.merge(self.local_branch(n), self.global_branch(n), x)


def hierarchical_split(t):
    """Channel quarters s1..s4 -> [s1, s2+s1, s3+s2, s4+s3]."""
    parts = t.chunk(4, dim=1)
    mixed = [parts[0]] + [parts[z] + parts[z - 1] for z in range(1, 4)]
    return torch.cat(mixed, dim=1)


class GLFFN(nn.Module):
    """Gated linear feed-forward block."""

    def __init__(self, dim, expansion):
        super().__init__()
        hidden = dim * expansion
        if hidden % 4:
            raise ValueError(f"hidden width {hidden} not divisible by 4")
        self.hidden = hidden
        self.norm = LayerNorm2d(dim)
        self.proj_in = pointwise(dim, hidden)
        self.dw_gate = depthwise(hidden, 3)
        # one depthwise conv over the concatenated quarters == four per-quarter DC3 convs
        self.dw_split = depthwise(hidden, 3)
        self.proj_out = mark_zero_init(pointwise(hidden, dim))

    def forward(self, x):
        t = self.proj_in(self.norm(x))
        g1 = self.dw_gate(t)
        g2 = self.dw_split(hierarchical_split(t)) + g1
        return self.proj_out(F.gelu(g2) * g1) + x


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, sr_ratio, expansion, kernels=(3, 5, 7)):
        super().__init__()
        self.glma = GLMABlock(dim, heads, sr_ratio, kernels)
        self.ffn = GLFFN(dim, expansion)

    def forward(self, x):
        return self.ffn(self.glma(x))


class EncoderStage(nn.Module):
    def __init__(self, in_ch, dim, stride, depth, heads, sr_ratio, expansion, kernels):
        super().__init__()
        self.embed = PatchEmbed(in_ch, dim, stride)
        self.blocks = nn.Sequential(
            *[EncoderBlock(dim, heads, sr_ratio, expansion, kernels) for _ in range(depth)]
        )
        self.norm = LayerNorm2d(dim)

    def forward(self, x):
        return self.norm(self.blocks(self.embed(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        in_chs = (3,) + cfg.stage_channels[:-1]
        self.stages = nn.ModuleList(
            EncoderStage(
                in_ch,
                dim,
                stride,
                depth,
                heads,
                sr,
                cfg.ffn_expansion,
                cfg.local_kernels,
            )
            for in_ch, dim, stride, depth, heads, sr in zip(
                in_chs,
                cfg.stage_channels,
                STAGE_STRIDES,
                cfg.stage_depths,
                cfg.stage_heads,
                cfg.sr_ratios,
            )
        )

    def forward(self, image) -> PyramidFeatures:
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} not divisible by 32")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return PyramidFeatures(*feats)
