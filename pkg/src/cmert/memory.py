"""Five-partition memory geometry: windows, anchor sampling and attention masks.

Frame ranges for an anchor ``t`` (short-term start ``t_s = t - T_s + 1``)::

    long-term    [t_s - T_l, t_s - 1]   subsampled with stride ``long_subsample``
    near-past    [t_s - T_c, t_s - 1]   (overlaps the tail of long-term)
    short-term   [t_s, t]
    anticipation labels of t+1 .. t+T_a
    near-future  labels of t_s .. t_s+T_f-1

Long-term subsampling is aligned to absolute frame indices (picks ``i`` with
``i % stride == stride - 1``), so the subsampled content only changes every
``stride`` steps of a stride-1 sliding window.  The streaming cache relies on
this.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionMask
from .container import read_container, write_container
from .tensor import ContractError

IGNORE = -1


@dataclass(frozen=True)
class PartitionConfig:
    """Frame counts of the five context partitions plus stream geometry.

    ``num_classes`` counts action classes; background is the extra class 0,
    so classifiers emit ``num_classes + 1`` logits.
    """

    long_frames: int
    short_frames: int
    antic_frames: int
    past_frames: int
    future_frames: int
    fps: float = 4.0
    feature_dim: int = 16
    num_classes: int = 4
    delta: int = 0
    long_subsample: int = 4
    past_mode: str = "near"
    future_mode: str = "near"

    def __post_init__(self):
        for name in ("long_frames", "short_frames", "future_frames", "long_subsample",
                     "feature_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("antic_frames", "past_frames", "delta"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.past_frames >= self.long_frames:
            raise ContractError("near-past must be shorter than long-term memory")
        if self.delta >= self.short_frames:
            raise ContractError("latency must be smaller than the short-term length")
        if self.fps <= 0:
            raise ContractError("fps must be positive")
        if self.past_mode not in ("near", "distant"):
            raise ContractError(f"past_mode must be 'near' or 'distant', got {self.past_mode!r}")
        if self.future_mode not in ("near", "distant"):
            raise ContractError(f"future_mode must be 'near' or 'distant', got {self.future_mode!r}")

    @classmethod
    def from_seconds(cls, long_s: float, short_s: float, antic_s: float, past_s: float,
                     future_s: float, fps: float, **kw) -> "PartitionConfig":
        def frames(s):
            return int(round(s * fps))
        return cls(frames(long_s), frames(short_s), frames(antic_s), frames(past_s),
                   frames(future_s), fps=fps, **kw)

    @property
    def n_long(self) -> int:
        return math.ceil(self.long_frames / self.long_subsample)

    @property
    def n_outputs(self) -> int:
        return self.num_classes + 1

    @property
    def future_offset(self) -> int:
        """Start of the generated future relative to the short-term start."""
        return 0 if self.future_mode == "near" else self.short_frames - 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureStream:
    features: np.ndarray
    labels: np.ndarray
    fps: float = 4.0
    num_classes: int = 4

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        if self.features.ndim != 2:
            raise ContractError(f"features must be [T, D], got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ContractError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} frames")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes}]")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def truncate(self, stop: int) -> "FeatureStream":
        return FeatureStream(self.features[:stop], self.labels[:stop], self.fps, self.num_classes)


def save_stream(path: str | Path, stream: FeatureStream) -> None:
    meta = {"T_total": len(stream), "D": stream.feature_dim, "fps": float(stream.fps),
            "C": int(stream.num_classes)}
    write_container(path, "stream", meta, {"features": stream.features, "labels": stream.labels})


def load_stream(path: str | Path) -> FeatureStream:
    meta, arrays = read_container(path, kind="stream")
    stream = FeatureStream(arrays["features"], arrays["labels"], meta["fps"], meta["C"])
    if len(stream) != meta["T_total"] or stream.feature_dim != meta["D"]:
        raise ContractError(f"{path}: header does not match payload")
    return stream


@dataclass
class TrainingSample:
    anchor: int
    long_feats: np.ndarray
    long_pad: np.ndarray
    past_feats: np.ndarray
    past_pad: np.ndarray
    short_feats: np.ndarray
    short_pad: np.ndarray
    y_sa: np.ndarray
    y_f: np.ndarray
    long_idx: np.ndarray = field(repr=False)
    past_idx: np.ndarray = field(repr=False)
    short_idx: np.ndarray = field(repr=False)


@dataclass
class Batch:
    long_feats: np.ndarray   # [B, n_long, D]
    long_pad: np.ndarray     # [B, n_long]
    past_feats: np.ndarray   # [B, T_c, D]
    short_feats: np.ndarray  # [B, T_s, D]
    y_sa: np.ndarray         # [B, T_s + T_a]
    y_f: np.ndarray          # [B, T_f]
    anchors: np.ndarray

    def __len__(self) -> int:
        return self.short_feats.shape[0]


def collate(samples: list[TrainingSample]) -> Batch:
    return Batch(
        long_feats=np.stack([s.long_feats for s in samples]),
        long_pad=np.stack([s.long_pad for s in samples]),
        past_feats=np.stack([s.past_feats for s in samples]),
        short_feats=np.stack([s.short_feats for s in samples]),
        y_sa=np.stack([s.y_sa for s in samples]),
        y_f=np.stack([s.y_f for s in samples]),
        anchors=np.array([s.anchor for s in samples]),
    )


def long_indices(t: int, cfg: PartitionConfig) -> np.ndarray:
    """Absolute frame indices of the subsampled long-term window for anchor ``t``."""
    t_s = t - cfg.short_frames + 1
    stride = cfg.long_subsample
    last = (t_s - 1) - ((t_s - 1 - (stride - 1)) % stride)
    return last - stride * np.arange(cfg.n_long - 1, -1, -1)


def _gather(stream: FeatureStream, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    valid = (idx >= 0) & (idx < len(stream))
    feats = np.zeros((len(idx), stream.feature_dim))
    feats[valid] = stream.features[idx[valid]]
    return feats, ~valid


def _labels(stream: FeatureStream, idx: np.ndarray) -> np.ndarray:
    valid = (idx >= 0) & (idx < len(stream))
    out = np.full(len(idx), IGNORE, dtype=np.int64)
    out[valid] = stream.labels[idx[valid]]
    return out


def extract_windows(stream: FeatureStream, t: int, cfg: PartitionConfig) -> TrainingSample:
    if not 0 <= t < len(stream):
        raise ContractError(f"anchor {t} outside stream of length {len(stream)}")
    if stream.feature_dim != cfg.feature_dim:
        raise ContractError(f"stream feature dim {stream.feature_dim} != config {cfg.feature_dim}")
    T_s, T_c = cfg.short_frames, cfg.past_frames
    t_s = t - T_s + 1
    short_idx = np.arange(t_s, t + 1)
    past_start = t_s - T_c if cfg.past_mode == "near" else t_s - T_s - T_c
    past_idx = np.arange(past_start, past_start + T_c)
    long_idx = long_indices(t, cfg)
    sa_idx = np.arange(t_s, t + cfg.antic_frames + 1)
    f_start = t_s + cfg.future_offset
    f_idx = np.arange(f_start, f_start + cfg.future_frames)

    long_feats, long_pad = _gather(stream, long_idx)
    past_feats, past_pad = _gather(stream, past_idx)
    short_feats, short_pad = _gather(stream, short_idx)
    return TrainingSample(
        anchor=t,
        long_feats=long_feats, long_pad=long_pad,
        past_feats=past_feats, past_pad=past_pad,
        short_feats=short_feats, short_pad=short_pad,
        y_sa=_labels(stream, sa_idx), y_f=_labels(stream, f_idx),
        long_idx=long_idx, past_idx=past_idx, short_idx=short_idx,
    )


def sample_anchors_sliding(stream_len: int, cfg: PartitionConfig, rng: np.random.Generator,
                           start: int | None = None) -> list[int]:
    """Anchors ``s0 + k*T_s - 1`` (k >= 1) with a random start ``s0`` in [0, T_s)."""
    if stream_len < 1:
        raise ContractError("empty stream")
    T_s = cfg.short_frames
    s0 = int(rng.integers(T_s)) if start is None else start
    return list(range(s0 + T_s - 1, stream_len, T_s))


def sample_anchors_event(labels: np.ndarray, cfg: PartitionConfig, rng: np.random.Generator,
                         n: int) -> list[int]:
    """``n`` anchors drawn uniformly from frames inside non-background actions."""
    eligible = np.flatnonzero(np.asarray(labels) != 0)
    if eligible.size == 0:
        raise ContractError("event sampling needs at least one non-background frame")
    return [int(i) for i in rng.choice(eligible, size=n, replace=True)]


# ---------------------------------------------------------------------------
# masks


def _time_rule(q_pos: np.ndarray, k_pos: np.ndarray, delta: int) -> np.ndarray:
    return k_pos[None, :] <= q_pos[:, None] + delta


def build_encoder_self_mask(cfg: PartitionConfig) -> AttentionMask:
    """Rows/cols ordered [near-past | short-term | anticipation]."""
    n_time, n_ant = cfg.past_frames + cfg.short_frames, cfg.antic_frames
    pos = np.arange(n_time)
    allowed = np.zeros((n_time + n_ant, n_time + n_ant), dtype=bool)
    allowed[:n_time, :n_time] = _time_rule(pos, pos, cfg.delta)
    allowed[n_time:, :] = True
    return AttentionMask(allowed, "encoder")


def build_encoder_cross_mask(cfg: PartitionConfig, n_compressed: int) -> AttentionMask:
    """Rows [near-past | short | antic]; cols [compressed long | short | antic]."""
    T_c, T_s, T_a = cfg.past_frames, cfg.short_frames, cfg.antic_frames
    n_time = T_c + T_s
    allowed = np.zeros((n_time + T_a, n_compressed + T_s + T_a), dtype=bool)
    allowed[:, :n_compressed] = True
    allowed[:n_time, n_compressed:n_compressed + T_s] = _time_rule(
        np.arange(n_time), T_c + np.arange(T_s), cfg.delta)
    allowed[n_time:, :] = True
    return AttentionMask(allowed, "encoder-cross")


def build_refinement_self_mask(cfg: PartitionConfig) -> AttentionMask:
    """Causal rule on the [short | antic] block.

    Latency is granted once, in the encoder.  Refinement rows already carry
    up to ``delta`` frames of look-ahead, so a second relaxation here would
    compound it to ``2 * delta``.
    """
    T_s, T_a = cfg.short_frames, cfg.antic_frames
    allowed = np.zeros((T_s + T_a, T_s + T_a), dtype=bool)
    pos = np.arange(T_s)
    allowed[:T_s, :T_s] = _time_rule(pos, pos, 0)
    allowed[T_s:, :] = True
    return AttentionMask(allowed, "refinement")


def build_refinement_cross_mask(cfg: PartitionConfig, n_compressed: int,
                                leaky: bool = False) -> AttentionMask:
    """Rows [short | antic]; cols [compressed long | M_SA short | M_SA antic | future].

    ``leaky`` opens every short/anticipation column to every row, letting
    short-term rows read later frames directly and through anticipation.
    """
    T_s, T_a, T_f = cfg.short_frames, cfg.antic_frames, cfg.future_frames
    lo, hi = n_compressed, n_compressed + T_s
    allowed = np.zeros((T_s + T_a, n_compressed + T_s + T_a + T_f), dtype=bool)
    allowed[:, :n_compressed] = True
    allowed[:, hi + T_a:] = True
    if leaky:
        allowed[:T_s, lo:hi + T_a] = True
    else:
        pos = np.arange(T_s)
        allowed[:T_s, lo:hi] = _time_rule(pos, pos, 0)
    allowed[T_s:, :] = True
    return AttentionMask(allowed, "refinement-cross")
