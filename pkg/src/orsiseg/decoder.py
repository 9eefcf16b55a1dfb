"""Top-down decoder: DASPP semantic head, then per level (4 -> 1) channel
reduction with joint attention, adaptive cross-fusion attention (ACFA), the
structural enhancement module (SEM) and a residual output fusion.

Every decoder tensor carries ``decoder_channels`` channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .encoder import LocalPerspective, PyramidFeatures, scaled_dot_attention
from .fourier import FourierMerge
from .layers import ConvBNReLU, LayerNorm2d, depthwise, mark_zero_init, pointwise, resize_to

DASPP_RATES = (3, 6, 12, 18)


class ChannelGate(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden, bias=False),
            nn.ReLU(),
            nn.Linear(hidden, channels, bias=False),
        )

    def forward(self, x):
        avg = self.mlp(x.mean(dim=(2, 3)))
        mx = self.mlp(x.amax(dim=(2, 3)))
        return torch.sigmoid(avg + mx)[:, :, None, None]


class SpatialGate(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class JointAttention(nn.Module):
    """Channel gate followed by spatial gate; both gates lie in (0, 1)."""

    def __init__(self, channels, reduction=16):
        super().__init__()
        self.channel = ChannelGate(channels, reduction)
        self.spatial = SpatialGate()

    def forward(self, x):
        x = x * self.channel(x)
        return x * self.spatial(x)


class ReduceAttend(nn.Module):
    """LN(JA(psi(x))): psi is 1x1 -> 3x3 -> 1x1 down to the decoder width."""

    def __init__(self, in_ch, dim):
        super().__init__()
        self.psi = nn.Sequential(
            ConvBNReLU(in_ch, dim, 1),
            ConvBNReLU(dim, dim, 3),
            pointwise(dim, dim),
        )
        self.attend = JointAttention(dim)
        self.norm = LayerNorm2d(dim)

    def forward(self, x):
        return self.norm(self.attend(self.psi(x)))


class DenseASPP(nn.Module):
    """Densely connected atrous pyramid: each dilated layer sees the input and all earlier layers."""

    def __init__(self, in_ch, out_ch, rates=DASPP_RATES, inter=256, growth=64):
        super().__init__()
        self.layers = nn.ModuleList()
        ch = in_ch
        for r in rates:
            self.layers.append(
                nn.Sequential(ConvBNReLU(ch, inter, 1), ConvBNReLU(inter, growth, 3, dilation=r))
            )
            ch += growth
        self.project = ConvBNReLU(ch, out_ch, 1, relu=False)

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, dim=1)))
        return self.project(torch.cat(feats, dim=1))


class CrossFusionAttention(nn.Module):
    """ACFA: query/key from one level attend to the value of the other level.

    ``high`` is resized to ``low``'s grid first. Keys and values are
    average-pooled by ``sr_ratio`` before attention.
    """

    def __init__(self, dim, sr_ratio=1, kernels=(3, 5, 7)):
        super().__init__()
        self.dim = dim
        self.sr_ratio = sr_ratio
        self.qkv_high = nn.Sequential(pointwise(dim, 3 * dim), depthwise(3 * dim, 3))
        self.qkv_low = nn.Sequential(pointwise(dim, 3 * dim), depthwise(3 * dim, 3))
        self.local_branch = LocalPerspective(dim, kernels)
        self.merge = FourierMerge(dim)

    def _tokens(self, proj, x):
        q, k, v = proj(x).chunk(3, dim=1)
        if self.sr_ratio > 1:
            k = F.avg_pool2d(k, self.sr_ratio)
            v = F.avg_pool2d(v, self.sr_ratio)
        # one head: (B, 1, T, C)
        return [t.flatten(2).transpose(1, 2).unsqueeze(1) for t in (q, k, v)]

    def global_streams(self, high, low, return_attn=False):
        b, c, h, w = low.shape
        qh, kh, vh = self._tokens(self.qkv_high, high)
        ql, kl, vl = self._tokens(self.qkv_low, low)
        low_stream, attn_low = scaled_dot_attention(ql, kl, vh)
        high_stream, attn_high = scaled_dot_attention(qh, kh, vl)

        def to_map(t):
            return t.squeeze(1).transpose(1, 2).reshape(b, c, h, w)

        out = (to_map(low_stream), to_map(high_stream))
        return (out, (attn_low, attn_high)) if return_attn else out

    def forward(self, high, low):
        if high.shape[1] != self.dim or low.shape[1] != self.dim:
            raise ValueError(
                f"ACFA expects {self.dim} channels, got {high.shape[1]} and {low.shape[1]}"
            )
        high = resize_to(high, low.shape[-2:])
        low_stream, high_stream = self.global_streams(high, low)
        fused_global = low_stream + high_stream
        fused_local = self.local_branch(high) + self.local_branch(low)
        return self.merge(fused_local, fused_global, low)


class StructuralEnhancement(nn.Module):
    """SEM: summed reverse-attention maps from four atrous branches gate a projected copy."""

    def __init__(self, dim, dilations=(1, 3, 5, 7)):
        super().__init__()
        self.proj = pointwise(dim, dim)
        self.atrous = nn.ModuleList(nn.Conv2d(dim, 1, 3, padding=d, dilation=d) for d in dilations)
        self.fuse = mark_zero_init(pointwise(2 * dim, dim))

    def reverse_terms(self, projected):
        return [1.0 - torch.sigmoid(conv(projected)) for conv in self.atrous]

    def forward(self, x, return_attn=False):
        p = self.proj(x)
        terms = self.reverse_terms(p)
        att = torch.stack(terms, dim=0).sum(dim=0)
        out = self.fuse(torch.cat([att * p, p], dim=1)) + x
        return (out, att, terms) if return_attn else out


class DecoderLevel(nn.Module):
    def __init__(self, in_ch, dim, sr_ratio, kernels=(3, 5, 7), dilations=(1, 3, 5, 7)):
        super().__init__()
        self.reduce = ReduceAttend(in_ch, dim)
        self.acfa = CrossFusionAttention(dim, sr_ratio, kernels)
        self.sem = StructuralEnhancement(dim, dilations)
        self.skip = pointwise(dim, dim)
        self.psi = nn.Sequential(
            ConvBNReLU(3 * dim, dim, 1),
            ConvBNReLU(dim, dim, 3),
            mark_zero_init(pointwise(dim, dim)),
        )

    def forward(self, w_prev, f_enc, return_parts=False):
        reduced = self.reduce(f_enc)
        w_ac = self.acfa(w_prev, reduced)
        w_se = self.sem(w_ac)
        out = self.psi(torch.cat([w_ac, w_se, self.skip(reduced)], dim=1)) + reduced
        if return_parts:
            return out, {"reduced": reduced, "acfa": w_ac, "sem": w_se}
        return out


@dataclass
class DecoderState:
    semantic_top: torch.Tensor
    reduced: dict = field(default_factory=dict)  # level -> tensor, level 5 is the reduced top
    fused: dict = field(default_factory=dict)  # level -> W_i, level 5 is semantic_top


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim = cfg.decoder_channels
        self.cfg = cfg
        self.daspp = DenseASPP(cfg.stage_channels[-1], dim)
        self.top_reduce = ReduceAttend(dim, dim)
        # index 0 is level 1 (finest)
        self.levels = nn.ModuleList(
            DecoderLevel(c, dim, sr, cfg.local_kernels, cfg.sem_dilations)
            for c, sr in zip(cfg.stage_channels, cfg.sr_ratios)
        )

    def forward(self, pyr: PyramidFeatures) -> DecoderState:
        top = self.daspp(pyr.f4)
        state = DecoderState(semantic_top=top)
        state.fused[5] = top
        w = self.top_reduce(top)
        state.reduced[5] = w
        for level in (4, 3, 2, 1):
            w, parts = self.levels[level - 1](w, pyr[level - 1], return_parts=True)
            state.reduced[level] = parts["reduced"]
            state.fused[level] = w
        return state
