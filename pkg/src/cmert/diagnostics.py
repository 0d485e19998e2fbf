"""Per-position loss curves and the input-sensitivity leakage audit."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .memory import IGNORE, FeatureStream, collate, extract_windows, sample_anchors_sliding
from .model import ModelParams, forward
from .tensor import Tensor, backward, mul, no_grad, sum_all
from .training import cross_entropy_block


@dataclass
class PositionProfile:
    loss: np.ndarray
    accuracy: np.ndarray
    count: np.ndarray

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["position", "loss", "accuracy", "count"])
            for i, (l, a, c) in enumerate(zip(self.loss, self.accuracy, self.count)):
                w.writerow([i, repr(float(l)), repr(float(a)), int(c)])


def per_position_diagnostic(params: ModelParams, streams: list[FeatureStream],
                            seed: int = 0, max_windows: int | None = None,
                            batch_size: int = 16, head: str = "refined") -> PositionProfile:
    """Mean cross-entropy and top-1 accuracy per short-term position.

    Windows are drawn as in sliding-window training.  ``head`` picks the
    refined (``"refined"``) or encoder (``"encoder"``) logits.
    """
    cfg = params.partition
    T_s = cfg.short_frames
    rng = np.random.default_rng(seed)
    pairs = [(i, t) for i, s in enumerate(streams) for t in sample_anchors_sliding(len(s), cfg, rng)]
    if max_windows is not None:
        pairs = pairs[:max_windows]
    loss_sum, hit_sum, count = np.zeros(T_s), np.zeros(T_s), np.zeros(T_s)
    with no_grad():
        for k in range(0, len(pairs), batch_size):
            batch = collate([extract_windows(streams[i], t, cfg) for i, t in pairs[k:k + batch_size]])
            out = forward(params, batch)
            logits = (out.logits_sa_hat if head == "refined" else out.logits_sa).data[:, :T_s]
            y = batch.y_sa[:, :T_s]
            valid = y != IGNORE
            z = logits - logits.max(axis=-1, keepdims=True)
            lsm = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            nll = -np.take_along_axis(lsm, np.where(valid, y, 0)[..., None], axis=-1)[..., 0]
            loss_sum += np.where(valid, nll, 0.0).sum(axis=0)
            hit_sum += ((logits.argmax(axis=-1) == y) & valid).sum(axis=0)
            count += valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return PositionProfile(loss_sum / count, hit_sum / count, count)


@dataclass
class LeakageReport:
    sensitivity: np.ndarray  # [T_s, T_s]: max |d logit_i / d frame_j| over classes and channels
    delta: int

    @property
    def max_future(self) -> float:
        """Largest sensitivity to any frame later than ``i + delta``."""
        return self.max_beyond(self.delta)

    def max_beyond(self, offset: int) -> float:
        T = self.sensitivity.shape[0]
        later = np.arange(T)[None, :] > np.arange(T)[:, None] + offset
        return float(self.sensitivity[later].max()) if later.any() else 0.0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "max_abs_grad", "beyond_latency"])
            T = self.sensitivity.shape[0]
            for i in range(T):
                for j in range(T):
                    w.writerow([i, j, repr(float(self.sensitivity[i, j])), int(j > i + self.delta)])


def leakage_audit(params: ModelParams, seed: int = 0, sample=None) -> LeakageReport:
    """Jacobian of every detection logit against every short-term input frame.

    Uses random features for every memory unless ``sample`` (a
    TrainingSample) is given.  One backward pass per (position, class).
    """
    cfg = params.partition
    T_s, K = cfg.short_frames, cfg.n_outputs
    if sample is None:
        rng = np.random.default_rng(seed)
        length = cfg.long_frames + cfg.short_frames
        stream = FeatureStream(rng.normal(size=(length, cfg.feature_dim)),
                               np.zeros(length, dtype=np.int64), cfg.fps, cfg.num_classes)
        sample = extract_windows(stream, length - 1, cfg)
    batch = collate([sample])
    short = Tensor(batch.short_feats, requires_grad=True)
    logits = forward(params, batch, short_feats=short).logits_sa_hat
    sens = np.zeros((T_s, T_s))
    for i in range(T_s):
        for c in range(K):
            sel = np.zeros(logits.shape)
            sel[0, i, c] = 1.0
            backward(sum_all(mul(logits, Tensor(sel))))
            sens[i] = np.maximum(sens[i], np.abs(short.grad[0]).max(axis=-1))
    return LeakageReport(sens, cfg.delta)
