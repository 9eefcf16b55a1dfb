import torch
import torch.nn as nn
import torch.nn.functional as F


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_ch, out_ch, kernel_size=1, dilation=1, relu=True):
        padding = dilation * (kernel_size // 2)
        layers = [
            nn.Conv2d(in_ch, out_ch, kernel_size, padding=padding, dilation=dilation, bias=False),
            nn.BatchNorm2d(out_ch),
        ]
        if relu:
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


def depthwise(channels, kernel_size, dilation=1):
    return nn.Conv2d(
        channels,
        channels,
        kernel_size,
        padding=dilation * (kernel_size // 2),
        dilation=dilation,
        groups=channels,
    )


def pointwise(in_ch, out_ch, bias=True):
    return nn.Conv2d(in_ch, out_ch, 1, bias=bias)


def mark_zero_init(module: nn.Module) -> nn.Module:
    """Flag a projection whose weights start at zero (residual branch output)."""
    module._zero_init = True
    return module


class NonFiniteInputError(ValueError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"{name} contains non-finite values")


def check_finite(x: torch.Tensor, name="input"):
    if not torch.isfinite(x).all():
        raise NonFiniteInputError(name)


def resize_to(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
