import math

import torch
import torch.nn as nn

from ..config import ModelConfig
from ..layers import LayerNorm2d
from ..model import SegmentationModel


@torch.no_grad()
def init_weights(model: nn.Module, seed: int, zero_init_residual: bool = True) -> nn.Module:
    """Truncated-normal linears, fan-in scaled convs, unit norms.

    Modules flagged with ``_zero_init`` (residual-branch output projections)
    start at exactly zero unless ``zero_init_residual`` is off.
    """
    gen = torch.Generator().manual_seed(seed)
    for mod in model.modules():
        if isinstance(mod, nn.Linear):
            nn.init.trunc_normal_(mod.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
        elif isinstance(mod, nn.Conv2d):
            fan_in = mod.in_channels // mod.groups * mod.kernel_size[0] * mod.kernel_size[1]
            mod.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
        elif isinstance(mod, (nn.BatchNorm2d, nn.LayerNorm, LayerNorm2d)):
            mod.weight.fill_(1.0)
            mod.bias.zero_()
            continue
        else:
            continue
        if mod.bias is not None:
            mod.bias.zero_()
        if zero_init_residual and getattr(mod, "_zero_init", False):
            mod.weight.zero_()
    return model


def init_parameters(cfg: ModelConfig, seed: int = 0, zero_init_residual: bool = True) -> SegmentationModel:
    model = SegmentationModel(cfg)
    return init_weights(model, seed, zero_init_residual)


def zero_flagged(model: nn.Module):
    return [m for m in model.modules() if getattr(m, "_zero_init", False)]
