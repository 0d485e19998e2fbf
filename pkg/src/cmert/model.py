"""CMeRT network: long-term compressor, context-enhanced encoder,
near-future generator and memory-refined decoder around a shared classifier."""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .attention import AttentionMask, TduParams, sinusoidal_pe, tdu_forward
from .container import read_container, write_container
from .memory import (
    Batch,
    PartitionConfig,
    TrainingSample,
    build_encoder_cross_mask,
    build_encoder_self_mask,
    build_refinement_cross_mask,
    build_refinement_self_mask,
    collate,
)
from .tensor import ContractError, Tensor, add, concat, expand, matmul, slice_time

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    ffn_mult: int = 4
    q_long0: int = 16
    q_long1: int = 32
    leaky_anticipation: bool = False
    refinement: bool = True

    def __post_init__(self):
        if self.d_model % 2 or self.d_model % self.heads:
            raise ContractError(f"d_model {self.d_model} must be even and divisible by {self.heads} heads")
        if self.q_long0 < 1 or self.q_long1 < 1:
            raise ContractError("compressor query counts must be >= 1")


class ModelParams:
    """All learnable tensors of one network plus its configuration.

    The classifier (``cls_w``/``cls_b``) is a single pair of tensors shared
    by the encoder, refinement and near-future heads.
    """

    def __init__(self, partition: PartitionConfig, model: ModelConfig, seed: int = 0):
        self.partition = partition
        self.model = model
        rng = np.random.default_rng(seed)
        d, D, h = model.d_model, partition.feature_dim, model.heads
        hidden = model.ffn_mult * d

        def query(n):
            return Tensor(rng.normal(0.0, 1.0, size=(n, d)), requires_grad=True)

        def tdu():
            return TduParams.init(rng, d, h, hidden)

        a = np.sqrt(6.0 / (D + d))
        self.in_w = Tensor(rng.uniform(-a, a, size=(D, d)), requires_grad=True)
        self.in_b = Tensor(np.zeros(d), requires_grad=True)
        self.comp0, self.q_long0 = tdu(), query(model.q_long0)
        self.comp1, self.q_long1 = tdu(), query(model.q_long1)
        self.enc, self.q_antic = tdu(), query(partition.antic_frames)
        self.gen, self.q_future = tdu(), query(partition.future_frames)
        self.ref = tdu()
        a = np.sqrt(6.0 / (d + partition.n_outputs))
        self.cls_w = Tensor(rng.uniform(-a, a, size=(d, partition.n_outputs)), requires_grad=True)
        self.cls_b = Tensor(np.zeros(partition.n_outputs), requires_grad=True)
        self._masks: dict | None = None

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "in_w", self.in_w
        yield "in_b", self.in_b
        for name in ("comp0", "comp1", "enc", "gen", "ref"):
            yield from getattr(self, name).named(name + ".")
        for name in ("q_long0", "q_long1", "q_antic", "q_future", "cls_w", "cls_b"):
            yield name, getattr(self, name)

    def tensors(self) -> dict[str, Tensor]:
        return dict(self.named())

    def n_parameters(self) -> int:
        return sum(t.data.size for _, t in self.named())

    def repartition(self, **changes) -> None:
        """Swap partition fields that do not change parameter shapes (e.g. ``delta``)."""
        new = replace(self.partition, **changes)
        shape_fields = ("antic_frames", "future_frames", "feature_dim", "num_classes")
        if any(getattr(new, f) != getattr(self.partition, f) for f in shape_fields):
            raise ContractError("repartition cannot change parameter shapes")
        self.partition = new
        self._masks = None

    @property
    def masks(self) -> dict[str, AttentionMask]:
        if self._masks is None:
            cfg, q1 = self.partition, self.model.q_long1
            self._masks = {
                "enc_self": build_encoder_self_mask(cfg),
                "enc_cross": build_encoder_cross_mask(cfg, q1),
                "ref_self": build_refinement_self_mask(cfg),
                "ref_cross": build_refinement_cross_mask(cfg, q1, self.model.leaky_anticipation),
            }
        return self._masks


@dataclass
class ForwardOutputs:
    m_hat_l: Tensor
    m_sa: Tensor
    m_f: Tensor | None
    m_sa_hat: Tensor
    logits_sa: Tensor
    logits_sa_hat: Tensor
    logits_f: Tensor | None


@functools.lru_cache(maxsize=256)
def _pe(length: int, d_model: int, offset: int) -> Tensor:
    return Tensor(sinusoidal_pe(length, d_model, offset))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def embed(params: ModelParams, feats) -> Tensor:
    return add(matmul(_as_tensor(feats), params.in_w), params.in_b)


def classify(params: ModelParams, x: Tensor) -> Tensor:
    return add(matmul(x, params.cls_w), params.cls_b)


def long_pad_mask(long_pad: np.ndarray, n_queries: int) -> AttentionMask | None:
    """Cross-attention mask hiding padded long-term frames.

    A sample whose long-term window is entirely padding keeps its last
    (zero) frame visible, so it behaves like a single zero key.
    """
    pad = np.asarray(long_pad, dtype=bool)
    if not pad.any():
        return None
    visible = ~pad
    empty = ~visible.any(axis=-1)
    visible[empty, -1] = True
    allowed = np.repeat(visible[:, None, :], n_queries, axis=1)
    return AttentionMask(allowed, "long-pad")


def compress_long(m_l: Tensor, long_pad: np.ndarray, params: ModelParams) -> Tensor:
    """Two-stage query compression of the projected long-term memory (no PE)."""
    return compress_stage1(compress_stage0(m_l, long_pad, params), params)


def compress_stage0(m_l: Tensor, long_pad: np.ndarray, params: ModelParams) -> Tensor:
    B = m_l.shape[0]
    mask = long_pad_mask(long_pad, params.model.q_long0)
    return tdu_forward(expand(params.q_long0, B), m_l, m_l, None, mask, params.comp0)


def compress_stage1(m_l1: Tensor, params: ModelParams) -> Tensor:
    B = m_l1.shape[0]
    return tdu_forward(expand(params.q_long1, B), m_l1, m_l1, None, None, params.comp1)


def encode_detection_anticipation(m_c: Tensor | None, m_s: Tensor, m_hat_l: Tensor,
                                  params: ModelParams,
                                  self_mask: AttentionMask | None = None) -> Tensor:
    """Joint near-past/short/anticipation encoding; returns the short+antic rows."""
    cfg, d = params.partition, params.model.d_model
    T_c, T_s, T_a = cfg.past_frames, cfg.short_frames, cfg.antic_frames
    B = m_s.shape[0]
    s_pe = add(m_s, _pe(T_s, d, T_c))
    queries, keys = [], [m_hat_l, s_pe]
    if T_c:
        queries.append(add(m_c, _pe(T_c, d, 0)))
    queries.append(s_pe)
    if T_a:
        a_pe = add(expand(params.q_antic, B), _pe(T_a, d, T_c + T_s))
        queries.append(a_pe)
        keys.append(a_pe)
    q, kv = concat(queries), concat(keys)
    masks = params.masks
    out = tdu_forward(q, kv, kv, self_mask or masks["enc_self"], masks["enc_cross"], params.enc)
    return slice_time(out, T_c, T_c + T_s + T_a)


def generate_near_future(m_hat_l: Tensor, params: ModelParams) -> Tensor:
    """Future latents from learnable queries over compressed long-term only."""
    B = m_hat_l.shape[0]
    return tdu_forward(expand(params.q_future, B), m_hat_l, m_hat_l, None, None, params.gen)


def refine_memory(m_sa: Tensor, m_hat_l: Tensor, m_f: Tensor, params: ModelParams,
                  cross_mask: AttentionMask | None = None) -> Tensor:
    cfg, d = params.partition, params.model.d_model
    T_c, T_s, T_a, T_f = cfg.past_frames, cfg.short_frames, cfg.antic_frames, cfg.future_frames
    keys = concat([
        m_hat_l,
        add(m_sa, _pe(T_s + T_a, d, T_c)),
        add(m_f, _pe(T_f, d, T_c + cfg.future_offset)),
    ])
    masks = params.masks
    return tdu_forward(m_sa, keys, keys, masks["ref_self"], cross_mask or masks["ref_cross"],
                       params.ref)


def long_context(params: ModelParams, long_feats, long_pad: np.ndarray) -> tuple[Tensor, Tensor | None]:
    """Everything that depends on long-term memory alone: (M̂_L, M_F)."""
    m_hat_l = compress_long(embed(params, long_feats), long_pad, params)
    m_f = generate_near_future(m_hat_l, params) if params.model.refinement else None
    return m_hat_l, m_f


def forward(params: ModelParams, batch: Batch | TrainingSample, short_feats=None,
            long_ctx: tuple[Tensor, Tensor | None] | None = None) -> ForwardOutputs:
    """Full network on a batch.

    ``short_feats`` overrides the batch's short-term features (pass a
    requires_grad Tensor to differentiate with respect to input frames);
    ``long_ctx`` supplies a precomputed ``long_context`` result.
    """
    if isinstance(batch, TrainingSample):
        batch = collate([batch])
    cfg = params.partition
    if long_ctx is None:
        long_ctx = long_context(params, batch.long_feats, batch.long_pad)
    m_hat_l, m_f = long_ctx
    m_s = embed(params, batch.short_feats if short_feats is None else short_feats)
    m_c = embed(params, batch.past_feats) if cfg.past_frames else None
    m_sa = encode_detection_anticipation(m_c, m_s, m_hat_l, params)
    logits_sa = classify(params, m_sa)
    if params.model.refinement:
        m_sa_hat = refine_memory(m_sa, m_hat_l, m_f, params)
        logits_sa_hat = classify(params, m_sa_hat)
        logits_f = classify(params, m_f)
    else:
        m_sa_hat, logits_sa_hat, logits_f = m_sa, logits_sa, None
    return ForwardOutputs(m_hat_l, m_sa, m_f, m_sa_hat, logits_sa, logits_sa_hat, logits_f)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ModelParams, extra: dict | None = None) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "partition": params.partition.to_dict(),
        "model": asdict(params.model),
        "extra": extra or {},
    }
    write_container(path, "checkpoint", meta, {k: t.data for k, t in params.named()})


def load_checkpoint(path: str | Path) -> ModelParams:
    meta, arrays = read_container(path, kind="checkpoint")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: checkpoint version {meta.get('format_version')} unsupported")
    params = ModelParams(PartitionConfig(**meta["partition"]), ModelConfig(**meta["model"]))
    tensors = params.tensors()
    if set(tensors) != set(arrays):
        missing = sorted(set(tensors) ^ set(arrays))
        raise ContractError(f"{path}: parameter names differ: {missing[:5]}")
    for name, t in tensors.items():
        if arrays[name].shape != t.shape:
            raise ContractError(f"{path}: {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name]
    return params
