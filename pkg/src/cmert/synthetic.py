"""Procedural action streams whose long-range structure rewards long-term memory.

Segments alternate between actions and optional background gaps.  The
identity of action k is ``rule(a[k-2], a[k-1]) = (a[k-2] + a[k-1]) mod C``
(0-based action ids), so it is fully determined by the two previous
actions but uniform given only the previous one.  Because the rule is a
bijection in ``a[k-2]``, uniformly random first two actions keep every
adjacent pair uniform, and the segment-level transition matrix is::

    background -> action a          1 / C
    action     -> background        gap_prob
    action     -> action a          (1 - gap_prob) / C
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .memory import FeatureStream
from .tensor import ContractError


@dataclass
class SyntheticGrammar:
    num_classes: int = 4
    feature_dim: int = 16
    noise: float = 1.0
    gap_prob: float = 0.5
    action_duration: tuple[int, int] = (8, 20)
    background_duration: tuple[int, int] = (4, 12)
    fps: float = 4.0
    prototype_seed: int = 0
    prototype_scale: float = 1.0
    prototypes: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if not 0.0 <= self.gap_prob <= 1.0:
            raise ContractError("gap_prob must lie in [0, 1]")
        if self.noise < 0:
            raise ContractError("noise must be non-negative")
        for name in ("action_duration", "background_duration"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ContractError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")
            setattr(self, name, (int(lo), int(hi)))
        if self.prototypes is None:
            rng = np.random.default_rng(self.prototype_seed)
            self.prototypes = self.prototype_scale * rng.normal(
                size=(self.num_classes + 1, self.feature_dim))
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.shape != (self.num_classes + 1, self.feature_dim):
            raise ContractError(f"prototypes must be [{self.num_classes + 1}, {self.feature_dim}]")
        diffs = self.prototypes[:, None, :] - self.prototypes[None, :, :]
        dist = np.abs(diffs).sum(-1) + np.eye(self.num_classes + 1)
        if np.any(dist == 0):
            raise ContractError("class prototypes must be pairwise distinct")

    @property
    def transition(self) -> np.ndarray:
        C = self.num_classes
        T = np.zeros((C + 1, C + 1))
        T[0, 1:] = 1.0 / C
        T[1:, 0] = self.gap_prob
        T[1:, 1:] = (1.0 - self.gap_prob) / C
        return T

    def rule(self, prev2: int, prev1: int) -> int:
        """Next action label (1-based) from the two previous action labels."""
        return (prev2 - 1 + prev1 - 1) % self.num_classes + 1

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes, "feature_dim": self.feature_dim,
            "noise": self.noise, "gap_prob": self.gap_prob,
            "action_duration": list(self.action_duration),
            "background_duration": list(self.background_duration),
            "fps": self.fps, "prototype_seed": self.prototype_seed,
            "prototype_scale": self.prototype_scale,
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> "SyntheticGrammar":
        known = {k: v for k, v in cfg.items() if k in cls.__dataclass_fields__ and k != "prototypes"}
        unknown = set(cfg) - set(known)
        if unknown:
            raise ContractError(f"unknown grammar field(s): {', '.join(sorted(unknown))}")
        for k in ("action_duration", "background_duration"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)


def sample_segments(grammar: SyntheticGrammar, length: int,
                    rng: np.random.Generator) -> list[tuple[int, int]]:
    """(label, duration) segments covering at least ``length`` frames."""
    C = grammar.num_classes
    segs: list[tuple[int, int]] = []
    actions: list[int] = []
    total = 0
    state = 0
    while total < length:
        if state == 0:
            dur = int(rng.integers(grammar.background_duration[0], grammar.background_duration[1] + 1))
        else:
            dur = int(rng.integers(grammar.action_duration[0], grammar.action_duration[1] + 1))
        segs.append((state, dur))
        total += dur
        if state == 0 or rng.random() >= grammar.gap_prob:
            if len(actions) < 2:
                nxt = int(rng.integers(C)) + 1
            else:
                nxt = grammar.rule(actions[-2], actions[-1])
            actions.append(nxt)
            state = nxt
        else:
            state = 0
    return segs


def generate_stream(grammar: SyntheticGrammar, length: int, rng: np.random.Generator) -> FeatureStream:
    if length < 1:
        raise ContractError("stream length must be >= 1")
    segs = sample_segments(grammar, length, rng)
    labels = np.concatenate([np.full(d, lab, dtype=np.int64) for lab, d in segs])[:length]
    feats = grammar.prototypes[labels]
    if grammar.noise > 0:
        feats = feats + grammar.noise * rng.normal(size=feats.shape)
    return FeatureStream(feats, labels, grammar.fps, grammar.num_classes)
