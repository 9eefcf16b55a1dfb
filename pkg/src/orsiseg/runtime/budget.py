"""Static parameter / compute audit of a model at a given input size.

Counting conventions (printed with every report):

* conv:      k_h * k_w * C_in * C_out * H_out * W_out / groups MACs
* linear:    C_in * C_out * tokens MACs
* attention: T_q * T_kv * head_dim MACs per product (QK^T and AV) per head
* fft:       5 * N * log2(N) real ops per length-N transform along each axis
             (counted as-is in the MAC column)

``flops_at_input`` is the MAC total, the convention behind published
"FLOPs(G)" columns for vision models. ``flops_2x`` doubles the
multiply-accumulate categories for readers who prefer one MAC = 2 FLOPs.
Normalization, activations and elementwise ops are not counted.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from ..config import ModelConfig
from ..decoder import CrossFusionAttention
from ..encoder import GlobalPerspective
from ..fourier import FourierMerge
from ..model import SegmentationModel, count_parameters

CONVENTIONS = (
    "conv = k^2*Cin*Cout*Hout*Wout/groups MAC; linear = Cin*Cout*tokens MAC; "
    "attention = T*T_kv*d MAC per product per head; fft = 5*N*log2(N) per transform per axis; "
    "flops_at_input = MAC total; flops_2x = 2*MAC + fft"
)


@dataclass
class BudgetReport:
    total_params: int
    encoder_params: int
    decoder_params: int
    head_params: int
    flops_at_input: int
    flops_2x: int
    input_size: tuple
    breakdown: dict = field(default_factory=dict)
    conventions: str = CONVENTIONS

    def to_json(self) -> str:
        data = asdict(self)
        data["input_size"] = list(self.input_size)
        return json.dumps(data, indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("total parameters (M)", f"{self.total_params / 1e6:.2f}"),
            ("encoder parameters (M)", f"{self.encoder_params / 1e6:.2f}"),
            ("decoder parameters (M)", f"{self.decoder_params / 1e6:.2f}"),
            ("head parameters (M)", f"{self.head_params / 1e6:.4f}"),
            (f"FLOPs (G, MAC) @ {self.input_size[0]}x{self.input_size[1]}", f"{self.flops_at_input / 1e9:.2f}"),
            ("FLOPs (G, 2 per MAC)", f"{self.flops_2x / 1e9:.2f}"),
        ]
        rows += [(f"  {k} (G)", f"{v / 1e9:.3f}") for k, v in sorted(self.breakdown.items())]
        width = max(len(r[0]) for r in rows)
        lines = [f"# {self.conventions}"]
        lines += [f"{name:<{width}}  {value:>10}" for name, value in rows]
        return "\n".join(lines)


def _fft2_ops(channels, h, w, batch=1):
    per_map = 0.0
    if w > 1:
        per_map += h * 5 * w * math.log2(w)
    if h > 1:
        per_map += w * 5 * h * math.log2(h)
    return int(round(batch * channels * per_map))


def count_macs(model: nn.Module, image: torch.Tensor) -> dict:
    """Run one forward pass with hooks; return MACs per category."""
    totals = {"conv": 0, "linear": 0, "attention": 0, "fft": 0}

    def conv_hook(mod, inp, out):
        k = mod.kernel_size[0] * mod.kernel_size[1]
        totals["conv"] += (
            k * mod.in_channels * mod.out_channels * out.shape[-2] * out.shape[-1] * out.shape[0]
        ) // mod.groups

    def linear_hook(mod, inp, out):
        tokens = inp[0].numel() // mod.in_features
        totals["linear"] += tokens * mod.in_features * mod.out_features

    def global_hook(mod, inp, out):
        b, c, h, w = inp[0].shape
        t = h * w
        t_kv = (h // mod.sr_ratio) * (w // mod.sr_ratio)
        totals["attention"] += 2 * b * t * t_kv * c

    def acfa_hook(mod, inp, out):
        b, c, h, w = inp[1].shape
        t = h * w
        t_kv = (h // mod.sr_ratio) * (w // mod.sr_ratio)
        totals["attention"] += 2 * 2 * b * t * t_kv * c  # two streams

    def fms_hook(mod, inp, out):
        b, c, h, w = inp[0].shape
        totals["fft"] += 3 * _fft2_ops(c, h, w, b)  # two forward, one inverse

    handles = []
    for mod in model.modules():
        if isinstance(mod, nn.Conv2d):
            handles.append(mod.register_forward_hook(conv_hook))
        elif isinstance(mod, nn.Linear):
            handles.append(mod.register_forward_hook(linear_hook))
        elif isinstance(mod, GlobalPerspective):
            handles.append(mod.register_forward_hook(global_hook))
        elif isinstance(mod, CrossFusionAttention):
            handles.append(mod.register_forward_hook(acfa_hook))
        elif isinstance(mod, FourierMerge):
            handles.append(mod.register_forward_hook(fms_hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(image)
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return totals


def budget_audit(cfg: ModelConfig, input_size=None, model: SegmentationModel | None = None) -> BudgetReport:
    input_size = tuple(input_size or cfg.input_size)
    if len(input_size) == 1:
        input_size = (input_size[0], input_size[0])
    if any(s % 32 for s in input_size):
        raise ValueError(f"input size {input_size} not divisible by 32")
    if model is None:
        torch.manual_seed(0)
        model = SegmentationModel(cfg)
    enc = count_parameters(model.encoder)
    dec = count_parameters(model.decoder)
    head = count_parameters(model.heads)
    macs = count_macs(model, torch.zeros(1, 3, *input_size))
    mac_total = sum(macs.values())
    flops = 2 * (macs["conv"] + macs["linear"] + macs["attention"]) + macs["fft"]
    return BudgetReport(
        total_params=enc + dec + head,
        encoder_params=enc,
        decoder_params=dec,
        head_params=head,
        flops_at_input=mac_total,
        flops_2x=flops,
        input_size=input_size,
        breakdown=macs,
    )
