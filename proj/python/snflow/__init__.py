"""Self-normalizing flows: exact and self-normalizing gradient training of
normalizing flows whose layers carry learned inverse weights."""

from ._core import *  # noqa: F401,F403
from ._core import (
    ConfigError,
    Error,
    FlowModel,
    FormatError,
    SingularMatrix,
    Trainer,
    TrainConfig,
    build_model,
)

__version__ = "1.0.0"


def train(model, train_rows, valid_rows, epochs=10, **options):
    """Trains `model` in place and returns one metrics dict per epoch.

    Keyword options set the matching TrainConfig attributes (mode, lam, lr, ...).
    """
    config = TrainConfig()
    config.epochs = epochs
    for key, value in options.items():
        if not hasattr(config, key):
            raise ConfigError(f"unknown training option {key!r}")
        setattr(config, key, value)
    trainer = Trainer(model, config)
    history = []
    for _ in range(epochs):
        metrics = trainer.run_epoch(train_rows, valid_rows)
        history.append(metrics)
        if metrics["status"] != "ok":
            break
    return history
