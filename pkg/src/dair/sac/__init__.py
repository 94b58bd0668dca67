"""Multi-agent SAC with hindsight relabelling and an object curriculum."""

from .buffer import Batch, Episode, ReplayBuffer, Transition, her_relabel, relabel_rewards
from .loop import (
    TrainResult,
    curriculum_advance,
    evaluate,
    rollout,
    trainer_from_checkpoint,
    training_loop,
)
from .trainer import (
    SACConfig,
    TrainerState,
    TrainingDiverged,
    act,
    actor_and_temperature_update,
    actor_loss,
    build_trainer,
    critic_loss,
    critic_update,
    polyak_update,
    soft_targets,
    temperature_loss,
    train_step,
    update,
)
