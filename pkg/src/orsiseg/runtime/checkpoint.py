"""Self-describing checkpoint archive.

A checkpoint is a zip file holding ``manifest.json`` and one ``.npy`` file per
array. The manifest records the format version, the config snapshots, the
epoch, an index of every array (name, shape, dtype), the optimizer's
hyperparameter groups and the numpy RNG state. Entries carry a fixed
timestamp so identical contents always produce identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..config import (
    ConfigError,
    ModelConfig,
    TrainConfig,
    config_to_dict,
    model_config_from_dict,
    train_config_from_dict,
)
from ..model import SegmentationModel

FORMAT_VERSION = 1
_EPOCH_ZERO = (1980, 1, 1, 0, 0, 0)


class CheckpointError(Exception):
    """Unreadable or malformed checkpoint."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint arrays do not fit a model built from its config snapshot."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    model_state: dict
    optimizer_state: dict | None = None
    rng_state: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.array(arr, order="C", copy=True), allow_pickle=False)
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH_ZERO)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy()
    return np.asarray(t)


def make_checkpoint(model, model_cfg, train_cfg, epoch, optimizer=None, rng_state=None) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(
        model_config=model_cfg,
        train_config=train_cfg,
        epoch=epoch,
        model_state=state,
        optimizer_state=optimizer.state_dict() if optimizer is not None else None,
        rng_state=rng_state or {"torch": torch.get_rng_state()},
    )


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, t in ckpt.model_state.items():
        arrays[f"model/{name}"] = _to_numpy(t)
    optim_meta = None
    if ckpt.optimizer_state is not None:
        optim_meta = {"param_groups": ckpt.optimizer_state["param_groups"], "state_keys": {}}
        for idx, pstate in sorted(ckpt.optimizer_state["state"].items()):
            optim_meta["state_keys"][str(idx)] = sorted(pstate)
            for key in sorted(pstate):
                arrays[f"optim/{idx}/{key}"] = _to_numpy(pstate[key])
    rng_meta = {}
    for key, value in ckpt.rng_state.items():
        if isinstance(value, torch.Tensor):
            arrays[f"rng/{key}"] = _to_numpy(value)
        else:
            rng_meta[key] = value
    manifest = {
        "format_version": ckpt.format_version,
        "model_config": config_to_dict(ckpt.model_config),
        "train_config": config_to_dict(ckpt.train_config),
        "epoch": ckpt.epoch,
        "arrays": [
            {"name": name, "shape": list(a.shape), "dtype": str(a.dtype), "file": f"arrays/{i:05d}.npy"}
            for i, (name, a) in enumerate(arrays.items())
        ],
        "optimizer": optim_meta,
        "rng": rng_meta,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        for entry, arr in zip(manifest["arrays"], arrays.values()):
            _write_entry(zf, entry["file"], _npy_bytes(arr))
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {}
            for entry in manifest["arrays"]:
                arr = np.lib.format.read_array(io.BytesIO(zf.read(entry["file"])), allow_pickle=False)
                if list(arr.shape) != entry["shape"] or str(arr.dtype) != entry["dtype"]:
                    raise CheckpointError(f"array {entry['name']} disagrees with manifest")
                arrays[entry["name"]] = arr
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    try:
        model_cfg = model_config_from_dict(manifest["model_config"])
        train_cfg = train_config_from_dict(manifest["train_config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointMismatchError(f"invalid config snapshot in {path}: {exc}") from exc

    model_state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}
    optimizer_state = None
    if manifest["optimizer"] is not None:
        state = {}
        for idx, keys in manifest["optimizer"]["state_keys"].items():
            state[int(idx)] = {k: torch.from_numpy(arrays[f"optim/{idx}/{k}"].copy()) for k in keys}
        optimizer_state = {"state": state, "param_groups": manifest["optimizer"]["param_groups"]}
    rng_state = dict(manifest["rng"])
    for k, v in arrays.items():
        if k.startswith("rng/"):
            rng_state[k[len("rng/"):]] = torch.from_numpy(v.copy())
    return Checkpoint(
        model_config=model_cfg,
        train_config=train_cfg,
        epoch=manifest["epoch"],
        model_state=model_state,
        optimizer_state=optimizer_state,
        rng_state=rng_state,
        format_version=manifest["format_version"],
    )


def build_model(ckpt: Checkpoint) -> SegmentationModel:
    """Model from the checkpoint's own config, with its parameters loaded."""
    model = SegmentationModel(ckpt.model_config)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    found = {k: tuple(v.shape) for k, v in ckpt.model_state.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        wrong = sorted(k for k in set(expected) & set(found) if expected[k] != found[k])
        detail = []
        if missing:
            detail.append(f"missing {missing[:3]}")
        if extra:
            detail.append(f"unexpected {extra[:3]}")
        if wrong:
            k = wrong[0]
            detail.append(f"{len(wrong)} shape mismatches, e.g. {k}: {found[k]} vs {expected[k]}")
        raise CheckpointMismatchError("config mismatch: " + "; ".join(detail))
    model.load_state_dict(ckpt.model_state)
    return model
