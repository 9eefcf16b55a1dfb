import torch.nn as nn

from .config import ModelConfig
from .decoder import Decoder
from .encoder import Encoder
from .layers import pointwise, resize_to
from .loss import PredictionSet


class SegmentationModel(nn.Module):
    """Encoder + decoder + five one-channel prediction heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        # heads[i] reads decoder level i + 1; heads[4] reads the DASPP output
        self.heads = nn.ModuleList(pointwise(cfg.decoder_channels, 1) for _ in range(5))

    def forward(self, image, return_state=False):
        size = image.shape[-2:]
        pyr = self.encoder(image)
        state = self.decoder(pyr)
        preds = PredictionSet(
            *(resize_to(head(state.fused[i + 1]), size) for i, head in enumerate(self.heads))
        )
        return (preds, pyr, state) if return_state else preds


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
