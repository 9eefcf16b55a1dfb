"""Seeded training loop: Adam with step decay, CSV logs and per-epoch checkpoints."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..config import ModelConfig, TrainConfig
from ..data import augment, batch_iter
from ..layers import NonFiniteInputError
from ..loss import total_loss
from .checkpoint import CheckpointMismatchError, build_model, make_checkpoint, read_checkpoint, save_checkpoint
from .initialize import init_parameters

log = logging.getLogger(__name__)

PRED_NAMES = ("p1", "p2", "p3", "p4", "p5")
LOG_NAME = "train_log.csv"
BREAKDOWN_NAME = "loss_breakdown.csv"
LOG_COLUMNS = ["epoch", "iter", "step", "lr", "loss"] + [
    f"{p}_{term}" for p in PRED_NAMES for term in ("bce", "iou")
]
BREAKDOWN_COLUMNS = ["epoch", "iter", "level", "bce", "iou"]


class NonFiniteLossError(RuntimeError):
    def __init__(self, tensor_name: str, epoch: int, iteration: int):
        self.tensor_name = tensor_name
        self.epoch = epoch
        self.iteration = iteration
        super().__init__(f"non-finite values in {tensor_name} at epoch {epoch}, iteration {iteration}")


@dataclass
class TrainResult:
    out_dir: Path
    checkpoints: list = field(default_factory=list)
    log_path: Path | None = None
    breakdown_path: Path | None = None
    last_epoch: int = 0
    losses: list = field(default_factory=list)  # (epoch, iter, loss) of this run


def enable_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"epoch_{epoch:03d}.ckpt"


def _fmt(x: float) -> str:
    # repr round-trips exactly, so identical runs give identical logs
    return repr(float(x))


def _truncate_log(path: Path, columns, keep_through_epoch: int):
    if not path.exists():
        return
    with path.open() as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= keep_through_epoch]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, columns)
        writer.writeheader()
        writer.writerows(rows)


def _open_log(path: Path, columns, append: bool):
    fresh = not (append and path.exists())
    fh = path.open("w" if fresh else "a", newline="")
    writer = csv.writer(fh)
    if fresh:
        writer.writerow(columns)
    return fh, writer


def _first_non_finite(named_tensors):
    for name, t in named_tensors:
        if t is not None and not torch.isfinite(t).all():
            return name
    return None


def train(
    model_cfg: ModelConfig | None,
    train_cfg: TrainConfig,
    dataset,
    out_dir,
    resume=None,
    plot: bool = True,
) -> TrainResult:
    """Train on ``dataset`` and checkpoint after every epoch.

    With ``resume`` the model, optimizer and RNG state come from that
    checkpoint and training continues at the following epoch; the existing
    logs are kept up to the resumed epoch and appended to.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    enable_determinism(train_cfg.seed)

    if resume is not None:
        ckpt = read_checkpoint(resume)
        if model_cfg is not None and model_cfg != ckpt.model_config:
            raise CheckpointMismatchError("config mismatch: resume checkpoint was built from a different model config")
        model_cfg = ckpt.model_config
        model = build_model(ckpt)
        start_epoch = ckpt.epoch + 1
    else:
        model = init_parameters(model_cfg, seed=train_cfg.seed)
        start_epoch = 1

    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr_at(start_epoch))
    if resume is not None:
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        if "torch" in ckpt.rng_state:
            torch.set_rng_state(ckpt.rng_state["torch"].to(torch.uint8))

    log_path, breakdown_path = out_dir / LOG_NAME, out_dir / BREAKDOWN_NAME
    if resume is not None:
        _truncate_log(log_path, LOG_COLUMNS, start_epoch - 1)
        _truncate_log(breakdown_path, BREAKDOWN_COLUMNS, start_epoch - 1)
    result = TrainResult(out_dir, log_path=log_path, breakdown_path=breakdown_path, last_epoch=start_epoch - 1)
    log_fh, log_writer = _open_log(log_path, LOG_COLUMNS, resume is not None)
    bd_fh, bd_writer = _open_log(breakdown_path, BREAKDOWN_COLUMNS, resume is not None)
    iters_per_epoch = -(-len(dataset) // train_cfg.batch_size)
    try:
        for epoch in range(start_epoch, train_cfg.epochs + 1):
            lr = train_cfg.lr_at(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            aug_rng = np.random.default_rng([train_cfg.seed, epoch, 1])
            transform = (lambda s: augment(s, aug_rng)) if train_cfg.augment else None
            batches = batch_iter(dataset, train_cfg.batch_size, True, [train_cfg.seed, epoch], transform)
            model.train()
            for it, (images, masks, _) in enumerate(batches, start=1):
                if not torch.isfinite(images).all():
                    raise NonFiniteLossError("input images", epoch, it)
                try:
                    preds = model(images)
                except NonFiniteInputError as exc:
                    raise NonFiniteLossError(exc.name, epoch, it) from exc
                bad = _first_non_finite(zip(PRED_NAMES, preds))
                if bad:
                    raise NonFiniteLossError(bad, epoch, it)
                out = total_loss(preds, masks)
                if not torch.isfinite(out.total):
                    raise NonFiniteLossError("loss", epoch, it)
                optimizer.zero_grad(set_to_none=True)
                out.total.backward()
                bad = _first_non_finite((f"grad of {n}", p.grad) for n, p in model.named_parameters())
                if bad:
                    raise NonFiniteLossError(bad, epoch, it)
                optimizer.step()

                loss = out.total.item()
                per_level = out.per_level.detach().tolist()
                step = (epoch - 1) * iters_per_epoch + it
                log_writer.writerow(
                    [epoch, it, step, _fmt(lr), _fmt(loss)] + [_fmt(v) for pair in per_level for v in pair]
                )
                for level, (bce, iou) in enumerate(per_level, start=1):
                    bd_writer.writerow([epoch, it, level, _fmt(bce), _fmt(iou)])
                result.losses.append((epoch, it, loss))
            log_fh.flush()
            bd_fh.flush()
            path = save_checkpoint(
                checkpoint_path(out_dir, epoch),
                make_checkpoint(model, model_cfg, train_cfg, epoch, optimizer),
            )
            result.checkpoints.append(path)
            result.last_epoch = epoch
            log.info("epoch %d lr %.2e loss %.4f", epoch, lr, loss)
    finally:
        log_fh.close()
        bd_fh.close()
    if plot and result.checkpoints:
        from ..plotting import plot_loss_curve

        plot_loss_curve(log_path, out_dir / "loss_curve.png")
    return result
