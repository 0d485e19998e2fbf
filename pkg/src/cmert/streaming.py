"""Online simulation: stride-1 sliding window from frame 0.

At anchor ``t`` the detection for frame ``t - delta`` is read from short-term
row ``T_s - 1 - delta`` of the refined head, and anticipation for horizon
``tau`` from row ``T_s + tau - 1``.  With latency, the final ``delta`` frames
never get a later anchor; they are flushed from the last window and flagged
``flushed``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .memory import FeatureStream, collate, extract_windows
from .model import (
    ModelParams,
    compress_stage0,
    compress_stage1,
    embed,
    forward,
    generate_near_future,
)
from .tensor import ContractError, Tensor, no_grad


class CacheInconsistencyError(AssertionError):
    pass


@dataclass
class PredictionRecord:
    t: int
    det: np.ndarray
    ant: dict[int, np.ndarray] = field(default_factory=dict)
    wall_time: float = 0.0
    emitted_at: int = 0
    flushed: bool = False

    def to_json(self) -> dict:
        return {"t": self.t, "det": self.det.tolist(),
                "ant": {str(k): v.tolist() for k, v in self.ant.items()}}


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _LongCache:
    """Memoises first-stage compressor output per subsampled long-term window."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.key = None
        self.value = None
        self.hits = 0
        self.misses = 0

    def get(self, sample) -> tuple[Tensor, Tensor | None]:
        key = tuple(np.where(sample.long_pad, -1, sample.long_idx))
        if key != self.key:
            p = self.params
            m_l = embed(p, sample.long_feats[None])
            stage0 = compress_stage0(m_l, sample.long_pad[None], p)
            # Stage two and the generator depend only on stage0, so they ride along.
            m_hat_l = compress_stage1(stage0, p)
            m_f = generate_near_future(m_hat_l, p) if p.model.refinement else None
            self.key, self.value = key, (m_hat_l, m_f)
            self.misses += 1
        else:
            self.hits += 1
        return self.value


def run_stream(params: ModelParams, stream: FeatureStream, cache: bool = False,
               verify: bool = False) -> list[PredictionRecord]:
    """Per-frame detection and per-horizon anticipation over a whole stream.

    ``cache`` reuses long-term compression across windows whose subsampled
    long-term content is unchanged; ``verify`` recomputes every cached step
    uncached and raises ``CacheInconsistencyError`` on any difference.
    """
    cfg = params.partition
    if len(stream) < 1:
        raise ContractError("empty stream")
    if stream.feature_dim != cfg.feature_dim:
        raise ContractError(f"stream feature dim {stream.feature_dim} != model {cfg.feature_dim}")
    T_s, T_a, delta = cfg.short_frames, cfg.antic_frames, cfg.delta
    long_cache = _LongCache(params) if cache else None
    records: list[PredictionRecord] = []
    T = len(stream)
    with no_grad():
        for t in range(T):
            t0 = time.perf_counter()
            sample = extract_windows(stream, t, cfg)
            batch = collate([sample])
            ctx = long_cache.get(sample) if long_cache else None
            out = forward(params, batch, long_ctx=ctx)
            if verify and long_cache:
                ref = forward(params, batch)
                if not np.array_equal(ref.logits_sa_hat.data, out.logits_sa_hat.data):
                    raise CacheInconsistencyError(f"cached output differs at frame {t}")
            probs = softmax(out.logits_sa_hat.data[0])
            elapsed = time.perf_counter() - t0
            ant = {tau: probs[T_s + tau - 1] for tau in range(1, T_a + 1)}
            if t - delta >= 0:
                records.append(PredictionRecord(t - delta, probs[T_s - 1 - delta], ant, elapsed, t))
            if t == T - 1:
                for f in range(max(0, T - delta), T):
                    row = T_s - 1 - (t - f)
                    records.append(PredictionRecord(f, probs[row], {}, 0.0, t, flushed=True))
    return records


def cache_compression(params: ModelParams, stream: FeatureStream,
                      verify: bool = False) -> list[PredictionRecord]:
    return run_stream(params, stream, cache=True, verify=verify)


def write_predictions(path: str | Path, records: list[PredictionRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


class PredictionFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def read_predictions(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict[int, dict[int, np.ndarray]]]:
    """Returns (frames, detection probs [N, K], {tau: {frame: probs}})."""
    frames, det, ant = [], [], {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                frames.append(int(rec["t"]))
                det.append([float(x) for x in rec["det"]])
                for k, v in rec.get("ant", {}).items():
                    ant.setdefault(int(k), {})[frames[-1]] = np.asarray(v, dtype=np.float64)
            except (ValueError, KeyError, TypeError) as exc:
                raise PredictionFormatError(lineno, str(exc)) from None
    if len({len(d) for d in det}) > 1:
        raise PredictionFormatError(0, "detection vectors have differing lengths")
    return np.asarray(frames, dtype=np.int64), np.asarray(det, dtype=np.float64), ant
