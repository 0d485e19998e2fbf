"""Desk-scale synthetic benchmark used for the directional ablations.

One ``BenchmarkConfig`` fixes data, geometry and optimisation; ``run_variant``
trains one model variant from a seed and scores it on held-out streams with
the online (stride-1) protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import PositionProfile, per_position_diagnostic
from .memory import FeatureStream, PartitionConfig
from .metrics import per_frame_map
from .model import ModelConfig, ModelParams
from .streaming import run_stream
from .synthetic import SyntheticGrammar, generate_stream
from .training import TrainConfig, train


@dataclass(frozen=True)
class BenchmarkConfig:
    num_classes: int = 4
    feature_dim: int = 16
    noise: float = 3.0
    train_streams: int = 8
    train_length: int = 400
    test_streams: int = 3
    test_length: int = 300
    long_frames: int = 64
    short_frames: int = 4
    antic_frames: int = 2
    past_frames: int = 4
    future_frames: int = 8
    long_subsample: int = 2
    d_model: int = 32
    heads: int = 4
    q_long0: int = 8
    q_long1: int = 8
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    warmup_steps: int = 100
    data_seed: int = 1234
    grammar_overrides: dict = field(default_factory=dict)

    def grammar(self) -> SyntheticGrammar:
        return SyntheticGrammar(num_classes=self.num_classes, feature_dim=self.feature_dim,
                                noise=self.noise, **self.grammar_overrides)

    def partition(self, **kw) -> PartitionConfig:
        base = dict(long_frames=self.long_frames, short_frames=self.short_frames,
                    antic_frames=self.antic_frames, past_frames=self.past_frames,
                    future_frames=self.future_frames, long_subsample=self.long_subsample,
                    feature_dim=self.feature_dim, num_classes=self.num_classes)
        base.update(kw)
        return PartitionConfig(**base)

    def model(self, **kw) -> ModelConfig:
        base = dict(d_model=self.d_model, heads=self.heads, q_long0=self.q_long0,
                    q_long1=self.q_long1)
        base.update(kw)
        return ModelConfig(**base)

    def train_config(self, seed: int, **kw) -> TrainConfig:
        base = dict(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                    warmup_steps=self.warmup_steps, seed=seed)
        base.update(kw)
        return TrainConfig(**base)

    def data(self, seed: int) -> tuple[list[FeatureStream], list[FeatureStream]]:
        rng = np.random.default_rng([self.data_seed, seed])
        g = self.grammar()
        tr = [generate_stream(g, self.train_length, rng) for _ in range(self.train_streams)]
        te = [generate_stream(g, self.test_length, rng) for _ in range(self.test_streams)]
        return tr, te


@dataclass
class VariantResult:
    name: str
    seed: int
    accuracy: float
    map: float
    profile: PositionProfile
    final_loss: float


def online_scores(params: ModelParams, streams: list[FeatureStream]) -> tuple[float, float]:
    """Frame accuracy and per-frame mAP of the online detector over ``streams``."""
    probs, labels = [], []
    for s in streams:
        recs = sorted(run_stream(params, s, cache=True), key=lambda r: r.t)
        probs.append(np.stack([r.det for r in recs]))
        labels.append(s.labels)
    p, y = np.concatenate(probs), np.concatenate(labels)
    return float(np.mean(p.argmax(axis=1) == y)), per_frame_map(p, y)


def run_variant(bench: BenchmarkConfig, seed: int, name: str = "", partition: dict | None = None,
                model: dict | None = None, train_kw: dict | None = None,
                profile_streams: str = "train") -> VariantResult:
    """Train one variant on seed-specific data and evaluate it online.

    The per-position loss profile is measured with the refined head on
    sliding windows over ``profile_streams`` ("train" or "test").
    """
    tr, te = bench.data(seed)
    params = ModelParams(bench.partition(**(partition or {})), bench.model(**(model or {})),
                         seed=seed)
    result = train(params, tr, bench.train_config(seed, **(train_kw or {})))
    acc, mAP = online_scores(params, te)
    prof = per_position_diagnostic(params, te if profile_streams == "test" else tr, seed=seed,
                                   head="refined")
    tail = [r["total"] for r in result.log[-50:]]
    return VariantResult(name, seed, acc, mAP, prof, float(np.mean(tail)) if tail else float("nan"))


def with_overrides(bench: BenchmarkConfig, **kw) -> BenchmarkConfig:
    return replace(bench, **kw)
