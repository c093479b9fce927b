"""Losses, rollout storage and the bi-level training loop."""

from commformer.trainer.buffer import Batch, RolloutBuffer, concat_batches
from commformer.trainer.core import (
    LossParts,
    TrainConfig,
    Trainer,
    evaluate,
    train_stage1,
    train_stage2,
    update_target,
)
from commformer.trainer.losses import (
    clipped_surrogate,
    compute_gae,
    decoder_loss,
    encoder_loss,
    joint_value,
    normalize_advantages,
    policy_entropy,
    td_targets,
)

__all__ = [
    "Batch",
    "LossParts",
    "RolloutBuffer",
    "TrainConfig",
    "Trainer",
    "clipped_surrogate",
    "compute_gae",
    "concat_batches",
    "decoder_loss",
    "encoder_loss",
    "evaluate",
    "joint_value",
    "normalize_advantages",
    "policy_entropy",
    "td_targets",
    "train_stage1",
    "train_stage2",
    "update_target",
]
