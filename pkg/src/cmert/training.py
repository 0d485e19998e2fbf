"""Losses, optimizer, learning-rate schedule and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .memory import (
    IGNORE,
    Batch,
    FeatureStream,
    collate,
    extract_windows,
    sample_anchors_event,
    sample_anchors_sliding,
)
from .model import ForwardOutputs, ModelParams, forward, save_checkpoint
from .tensor import ContractError, Tensor, add, backward, log_softmax, mul, scale, sum_all

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda1: float = 0.2
    lambda2: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 5e-5
    warmup_steps: int = 100
    cosine_steps: int | None = None
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    sampling: str = "sliding"
    event_anchors_per_stream: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("loss weights must be non-negative")
        if self.sampling not in ("sliding", "event"):
            raise ContractError(f"sampling must be 'sliding' or 'event', got {self.sampling!r}")
        if self.batch_size < 1 or self.steps < 0 or self.warmup_steps < 0:
            raise ContractError("batch_size >= 1, steps >= 0 and warmup_steps >= 0 required")

    @property
    def horizon(self) -> int:
        return self.cosine_steps or self.steps


@dataclass
class LossBreakdown:
    l_sa0: float
    l_sa1: float
    l_f: float
    total: float
    per_position: np.ndarray
    objective: Tensor = field(repr=False)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, params: ModelParams, reason: str = "total loss is not finite"):
        super().__init__(f"{reason} at step {step}")
        self.step = step
        self.params = params


def cross_entropy_block(logits: Tensor, targets: np.ndarray,
                        ignore: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood over non-ignored positions.

    ``logits`` is [L, K] or [B, L, K]; targets equal to ``IGNORE`` (or flagged
    in ``ignore``) drop out of both the sum and the denominator.  Also
    returns the per-position mean loss over the batch (NaN where every
    entry was ignored).
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ContractError(f"targets {targets.shape} do not match logits {logits.shape}")
    ign = targets == IGNORE if ignore is None else np.asarray(ignore, dtype=bool) | (targets == IGNORE)
    valid = ~ign
    n = int(valid.sum())
    if n == 0:
        raise ContractError("every position is ignored")
    K = logits.shape[-1]
    safe = np.where(valid, targets, 0)
    if safe.min() < 0 or safe.max() >= K:
        raise ContractError(f"targets outside [0, {K})")
    onehot = (safe[..., None] == np.arange(K)) & valid[..., None]
    lsm = log_softmax(logits)
    loss = scale(sum_all(mul(lsm, Tensor(onehot / n))), -1.0)

    nll = -np.take_along_axis(lsm.data, safe[..., None], axis=-1)[..., 0]
    nll2 = nll.reshape(-1, nll.shape[-1])
    v2 = valid.reshape(-1, valid.shape[-1])
    counts = v2.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_pos = np.where(v2, nll2, 0.0).sum(axis=0) / counts
    return loss, per_pos


def total_loss(outputs: ForwardOutputs, batch: Batch, cfg: TrainConfig) -> LossBreakdown:
    l_sa0, _ = cross_entropy_block(outputs.logits_sa, batch.y_sa)
    l_sa1, per_pos = cross_entropy_block(outputs.logits_sa_hat, batch.y_sa)
    T_s = batch.short_feats.shape[1]
    obj = add(l_sa1, scale(l_sa0, cfg.lambda1))
    l_f_val = 0.0
    if outputs.logits_f is not None and np.any(batch.y_f != IGNORE):
        l_f, _ = cross_entropy_block(outputs.logits_f, batch.y_f)
        obj = add(obj, scale(l_f, cfg.lambda2))
        l_f_val = float(l_f.data)
    return LossBreakdown(float(l_sa0.data), float(l_sa1.data), l_f_val, float(obj.data),
                         per_pos[:T_s], obj)


# ---------------------------------------------------------------------------
# optimisation


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``cfg.lr`` at ``warmup_steps``, then cosine decay to 0.

    ``step`` counts optimizer updates starting at 1.
    """
    w, horizon = cfg.warmup_steps, cfg.horizon
    if w and step <= w:
        return cfg.lr * step / w
    if horizon <= w:
        return cfg.lr
    frac = min(1.0, (step - w) / (horizon - w))
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, Tensor], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """Adam with decoupled weight decay, in place on ``params``."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# ---------------------------------------------------------------------------
# loop


def epoch_anchors(streams: list[FeatureStream], params: ModelParams, cfg: TrainConfig,
                  rng: np.random.Generator) -> list[tuple[int, int]]:
    pcfg = params.partition
    pairs = []
    for i, s in enumerate(streams):
        if cfg.sampling == "sliding":
            ts = sample_anchors_sliding(len(s), pcfg, rng)
        else:
            ts = sample_anchors_event(s.labels, pcfg, rng, cfg.event_anchors_per_stream)
        pairs.extend((i, t) for t in ts)
    order = rng.permutation(len(pairs))
    return [pairs[k] for k in order]


def batches(streams: list[FeatureStream], params: ModelParams, cfg: TrainConfig,
            rng: np.random.Generator):
    """Endless iterator of (epoch, Batch)."""
    epoch = 0
    while True:
        pairs = epoch_anchors(streams, params, cfg, rng)
        if not pairs:
            raise ContractError("no training anchors: streams are shorter than the short-term window")
        for k in range(0, len(pairs), cfg.batch_size):
            chunk = pairs[k:k + cfg.batch_size]
            yield epoch, collate([extract_windows(streams[i], t, params.partition) for i, t in chunk])
        epoch += 1


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    optimizer: AdamState


def train(params: ModelParams, streams: list[FeatureStream], cfg: TrainConfig,
          log_path: str | Path | None = None, checkpoint_path: str | Path | None = None) -> TrainResult:
    """Sample anchors, extract windows, forward, loss, backward, Adam step.

    Deterministic given ``cfg.seed`` and the initial parameters.  On a
    non-finite loss or gradient the current (last finite) parameters are
    written to ``checkpoint_path`` and ``TrainingDiverged`` is raised.
    """
    if not streams:
        raise ContractError("train needs at least one stream")
    rng = np.random.default_rng(cfg.seed)
    tensors = params.tensors()
    state = AdamState()
    records: list[dict] = []
    fh = open(log_path, "w") if log_path else None
    try:
        it = batches(streams, params, cfg, rng)
        for step in range(1, cfg.steps + 1):
            epoch, batch = next(it)
            out = forward(params, batch)
            lb = total_loss(out, batch, cfg)
            lr = learning_rate(step, cfg)
            try:
                if not math.isfinite(lb.total):
                    raise FloatingPointError("total loss is not finite")
                backward(lb.objective)
                optimizer_step(tensors, state, lr, cfg)
            except FloatingPointError as exc:
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, params, {"diverged_at": step})
                raise TrainingDiverged(step, params, str(exc)) from exc
            rec = {
                "step": step, "epoch": epoch, "l_sa0": lb.l_sa0, "l_sa1": lb.l_sa1, "l_f": lb.l_f,
                "total": lb.total,
                "per_position": [None if not math.isfinite(x) else float(x) for x in lb.per_position],
                "lr": lr,
            }
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if step % 200 == 0:
                log.info("step %d total %.4f lr %.2e", step, lb.total, lr)
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, {"train": asdict(cfg)})
    return TrainResult(params, records, state)
