from .budget import BudgetReport, budget_audit, count_macs
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    CheckpointMismatchError,
    build_model,
    make_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from .infer import infer, predict
from .initialize import init_parameters, init_weights
from .train import NonFiniteLossError, TrainResult, train

__all__ = [
    "BudgetReport",
    "budget_audit",
    "count_macs",
    "Checkpoint",
    "CheckpointError",
    "CheckpointMismatchError",
    "build_model",
    "make_checkpoint",
    "read_checkpoint",
    "save_checkpoint",
    "infer",
    "predict",
    "init_parameters",
    "init_weights",
    "NonFiniteLossError",
    "TrainResult",
    "train",
]
