"""Checkpoint inference: sigmoid of the finest prediction as 8-bit PNG at the source size."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..data import IMAGE_EXTS, DataError, read_image
from .checkpoint import CheckpointMismatchError, build_model, read_checkpoint


def list_images(inputs) -> list[Path]:
    """Sorted image files from a file, a directory, or a list of either."""
    if isinstance(inputs, (str, Path)):
        inputs = [inputs]
    found = []
    for item in map(Path, inputs):
        if item.is_dir():
            found.extend(sorted(p for p in item.iterdir() if p.suffix.lower() in IMAGE_EXTS))
        elif item.is_file():
            found.append(item)
        else:
            raise DataError(f"no such input: {item}")
    if not found:
        raise DataError("no input images")
    return found


@torch.no_grad()
def predict(model, image: np.ndarray, input_size) -> np.ndarray:
    """(3, H, W) image in [0, 1] -> (H, W) saliency in [0, 1] at the same size."""
    x = torch.from_numpy(np.ascontiguousarray(image))[None]
    size = x.shape[-2:]
    if tuple(size) != tuple(input_size):
        x = F.interpolate(x, size=tuple(input_size), mode="bilinear", align_corners=False)
    prob = torch.sigmoid(model(x).p1)
    prob = F.interpolate(prob, size=tuple(size), mode="bilinear", align_corners=False)
    return prob[0, 0].clamp(0, 1).numpy()


def to_uint8(prob: np.ndarray) -> np.ndarray:
    return np.round(prob * 255.0).astype(np.uint8)


def load_for_inference(checkpoint, model_cfg=None):
    ckpt = read_checkpoint(checkpoint)
    if model_cfg is not None and model_cfg != ckpt.model_config:
        raise CheckpointMismatchError("config mismatch: checkpoint was built from a different model config")
    model = build_model(ckpt)
    model.eval()
    return model, ckpt.model_config


def infer(checkpoint, inputs, out_dir, model_cfg=None, model=None) -> list[Path]:
    """Write ``<out_dir>/<basename>.png`` for every input image; returns the paths."""
    if model is None:
        model, model_cfg = load_for_inference(checkpoint, model_cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in list_images(inputs):
        prob = predict(model, read_image(path), model_cfg.input_size)
        target = out_dir / f"{path.stem}.png"
        Image.fromarray(to_uint8(prob)).save(target)
        written.append(target)
    return written
