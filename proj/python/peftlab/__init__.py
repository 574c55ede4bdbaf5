from ._core import (
    CheckpointError,
    ValidationError,
    ablate,
    adapt,
    base_parameter_count,
    count_trainable,
    load_checkpoint,
    merge,
    methods,
    params,
    pretrain,
    report,
    save_checkpoint,
)

__all__ = [
    "CheckpointError",
    "ValidationError",
    "ablate",
    "adapt",
    "base_parameter_count",
    "count_trainable",
    "load_checkpoint",
    "merge",
    "methods",
    "params",
    "pretrain",
    "report",
    "save_checkpoint",
]
