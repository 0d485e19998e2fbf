"""Named dataset settings: context lengths in seconds and optimisation hyperparameters.

The datasets themselves are not shipped; the presets fix memory geometry
and optimiser settings so that synthetic runs can mirror a given setting.
"""

from __future__ import annotations

from dataclasses import dataclass

from .memory import PartitionConfig
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class Preset:
    name: str
    fps: float
    long_s: float
    short_s: float
    antic_s: float
    past_s: float
    future_s: float
    q_long0: int
    q_long1: int
    batch_size: int
    epochs: int
    warmup_epochs: int
    lr: float
    weight_decay: float
    lambda1: float = 0.2
    lambda2: float = 0.5

    def partition(self, **kw) -> PartitionConfig:
        return PartitionConfig.from_seconds(self.long_s, self.short_s, self.antic_s, self.past_s,
                                            self.future_s, self.fps, **kw)

    def model(self, **kw) -> ModelConfig:
        return ModelConfig(q_long0=self.q_long0, q_long1=self.q_long1, **kw)

    def train(self, steps_per_epoch: int, **kw) -> TrainConfig:
        """Epoch-based schedule translated to optimizer steps."""
        base = dict(
            lambda1=self.lambda1, lambda2=self.lambda2, lr=self.lr,
            weight_decay=self.weight_decay, batch_size=self.batch_size,
            steps=self.epochs * steps_per_epoch,
            warmup_steps=self.warmup_epochs * steps_per_epoch,
        )
        base.update(kw)
        return TrainConfig(**base)


PRESETS: dict[str, Preset] = {
    "th14": Preset("th14", fps=4.0, long_s=256, short_s=4, antic_s=2, past_s=0.5, future_s=12,
                   q_long0=16, q_long1=32, batch_size=32, epochs=12, warmup_epochs=8,
                   lr=2e-4, weight_decay=5e-5),
    "ek100": Preset("ek100", fps=4.0, long_s=128, short_s=8, antic_s=2, past_s=2, future_s=8,
                    q_long0=16, q_long1=16, batch_size=32, epochs=12, warmup_epochs=10,
                    lr=7e-5, weight_decay=1e-4),
    "crosstask": Preset("crosstask", fps=1.0, long_s=128, short_s=10, antic_s=2, past_s=8,
                        future_s=12, q_long0=16, q_long1=32, batch_size=32, epochs=12,
                        warmup_epochs=5, lr=7e-5, weight_decay=1e-5),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
