"""Fourier-space merging of a local and a global feature map.

Both maps are taken to the frequency domain with an unnormalized 2-D DFT,
re-weighted by a composite weight computed from both spectra, summed, and
brought back with the 1/(HW)-normalized inverse transform.

The composite weight is real-valued: it scales the magnitude of every
frequency bin and leaves the phase untouched. It is symmetrized over
conjugate bin pairs ``(v, u)`` / ``(-v, -u)`` so that the weighted spectrum
stays Hermitian and the inverse transform is real.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import check_finite, mark_zero_init, pointwise

FULL = "full"
HALF = "half"
LAYOUTS = (FULL, HALF)


def forward_fft(x: torch.Tensor, layout: str = FULL) -> torch.Tensor:
    """Unnormalized 2-D DFT over the last two (spatial) axes.

    ``layout="half"`` keeps only the non-redundant ``W // 2 + 1`` columns.
    """
    check_finite(x, "spectral transform input")
    if layout == FULL:
        return torch.fft.fft2(x, dim=(-2, -1), norm="backward")
    if layout == HALF:
        return torch.fft.rfft2(x, dim=(-2, -1), norm="backward")
    raise ValueError(f"unknown spectrum layout {layout!r}")


def inverse_fft(
    s: torch.Tensor, layout: str = FULL, width: int | None = None, keep_imag: bool = False
):
    """Inverse 2-D DFT with 1/(HW) normalization.

    For the full layout the imaginary residue is dropped unless ``keep_imag``
    is set, in which case ``(real, imag)`` is returned. The half layout needs
    the original ``width`` since it cannot be recovered from the column count.
    """
    if layout == FULL:
        if width is not None and width != s.shape[-1]:
            raise ValueError(f"full-layout spectrum has width {s.shape[-1]}, expected {width}")
        y = torch.fft.ifft2(s, dim=(-2, -1), norm="backward")
        return (y.real, y.imag) if keep_imag else y.real
    if layout == HALF:
        if width is None:
            raise ValueError("half-layout inverse needs the spatial width")
        if width // 2 + 1 != s.shape[-1]:
            raise ValueError(
                f"half-layout spectrum has {s.shape[-1]} columns, width {width} needs {width // 2 + 1}"
            )
        y = torch.fft.irfft2(s, s=(s.shape[-2], width), dim=(-2, -1), norm="backward")
        return (y, torch.zeros_like(y)) if keep_imag else y
    raise ValueError(f"unknown spectrum layout {layout!r}")


@dataclass
class SpectrumPair:
    local_spec: torch.Tensor
    global_spec: torch.Tensor
    layout: str = FULL

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown spectrum layout {self.layout!r}")
        if self.local_spec.shape != self.global_spec.shape:
            raise ValueError(
                f"spectrum shapes differ: {tuple(self.local_spec.shape)} vs {tuple(self.global_spec.shape)}"
            )


def conjugate_flip(w: torch.Tensor) -> torch.Tensor:
    """Re-index a full-layout map from bin (v, u) to bin (-v mod H, -u mod W)."""
    return torch.roll(torch.flip(w, dims=(-2, -1)), shifts=(1, 1), dims=(-2, -1))


def _stack_parts(s: torch.Tensor) -> torch.Tensor:
    return torch.cat([s.real, s.imag], dim=1)


class CompositeWeight(nn.Module):
    """sigmoid(C1 BR(C1 local)) + sigmoid(C1 BR(C1 global)), entries in (0, 2)."""

    def __init__(self, channels):
        super().__init__()
        self.local_gate = self._gate(channels)
        self.global_gate = self._gate(channels)

    @staticmethod
    def _gate(channels):
        return nn.Sequential(
            pointwise(2 * channels, channels),
            nn.BatchNorm2d(channels),
            nn.ReLU(),
            pointwise(channels, channels),
        )

    def forward(self, pair: SpectrumPair, symmetric: bool = True) -> torch.Tensor:
        w = torch.sigmoid(self.local_gate(_stack_parts(pair.local_spec)))
        w = w + torch.sigmoid(self.global_gate(_stack_parts(pair.global_spec)))
        if symmetric and pair.layout == FULL:
            w = 0.5 * (w + conjugate_flip(w))
        return w


class FourierMerge(nn.Module):
    """proj(IFFT[w*L + w*G + L + G]) + residual, with L, G the branch spectra."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.weight = CompositeWeight(channels)
        self.proj = mark_zero_init(pointwise(channels, channels))

    def forward(self, local, global_, residual, return_details=False):
        if not (local.shape == global_.shape == residual.shape):
            raise ValueError(
                "FourierMerge inputs must share a shape, got "
                f"{tuple(local.shape)}, {tuple(global_.shape)}, {tuple(residual.shape)}"
            )
        spec_l = forward_fft(local)
        spec_g = forward_fft(global_)
        w = self.weight(SpectrumPair(spec_l, spec_g, FULL))
        merged = w * spec_l + w * spec_g + spec_l + spec_g
        real, imag = inverse_fft(merged, FULL, keep_imag=True)
        out = self.proj(real) + residual
        if return_details:
            return out, {"weight": w, "imag": imag, "spatial": real}
        return out


def composite_weight(pair: SpectrumPair, module: CompositeWeight) -> torch.Tensor:
    return module(pair)


def fms_merge(local, global_, residual, module: FourierMerge):
    return module(local, global_, residual)
