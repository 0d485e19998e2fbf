"""Transformer Decoder Unit and its attention sub-blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    layer_norm,
    matmul,
    merge_heads,
    relu,
    scale,
    softmax_rows,
    split_heads,
    transpose,
)


@dataclass(frozen=True)
class AttentionMask:
    """Boolean visibility matrix; ``allowed[i, j]`` lets query i see key j.

    A leading batch axis is allowed for per-sample masks (padding).
    """

    allowed: np.ndarray
    kind: str = "none"

    def __post_init__(self):
        allowed = np.asarray(self.allowed, dtype=bool)
        if allowed.ndim not in (2, 3):
            raise DimensionError(f"mask must be [Lq, Lk] or [B, Lq, Lk], got {allowed.shape}")
        if not np.all(allowed.any(axis=-1)):
            raise ContractError(f"{self.kind} mask has a row with no allowed key")
        object.__setattr__(self, "allowed", allowed)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.allowed.shape

    @classmethod
    def full(cls, lq: int, lk: int) -> "AttentionMask":
        return cls(np.ones((lq, lk), dtype=bool), "none")

    @classmethod
    def causal(cls, length: int) -> "AttentionMask":
        return cls(np.tril(np.ones((length, length), dtype=bool)), "causal")

    @classmethod
    def latency(cls, length: int, delta: int) -> "AttentionMask":
        if delta < 0:
            raise ContractError("latency must be non-negative")
        return cls(np.tril(np.ones((length, length), dtype=bool), k=delta), f"latency({delta})")


@dataclass
class AttnParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int) -> "AttnParams":
        if d_model % heads:
            raise ContractError(f"d_model {d_model} not divisible by {heads} heads")
        w = {k: Tensor(_xavier(rng, d_model, d_model), requires_grad=True)
             for k in ("wq", "wk", "wv", "wo")}
        b = {k: Tensor(np.zeros(d_model), requires_grad=True) for k in ("bq", "bk", "bv", "bo")}
        return cls(heads=heads, **w, **b)

    def named(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            if f.name != "heads":
                yield prefix + f.name, getattr(self, f.name)


@dataclass
class TduParams:
    self_attn: AttnParams
    cross_attn: AttnParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ln3_g: Tensor
    ln3_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int = 4,
             hidden: int | None = None) -> "TduParams":
        hidden = hidden or 4 * d_model

        def ones():
            return Tensor(np.ones(d_model), requires_grad=True)

        def zeros(n=d_model):
            return Tensor(np.zeros(n), requires_grad=True)

        return cls(
            self_attn=AttnParams.init(rng, d_model, heads),
            cross_attn=AttnParams.init(rng, d_model, heads),
            w1=Tensor(_xavier(rng, d_model, hidden), requires_grad=True), b1=zeros(hidden),
            w2=Tensor(_xavier(rng, hidden, d_model), requires_grad=True), b2=zeros(),
            ln1_g=ones(), ln1_b=zeros(), ln2_g=ones(), ln2_b=zeros(),
            ln3_g=ones(), ln3_b=zeros(),
        )

    @property
    def d_model(self) -> int:
        return self.w1.shape[0]

    def named(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.self_attn.named(prefix + "self.")
        yield from self.cross_attn.named(prefix + "cross.")
        for f in fields(self):
            if f.name not in ("self_attn", "cross_attn"):
                yield prefix + f.name, getattr(self, f.name)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def sinusoidal_pe(length: int, d_model: int, offset: int = 0) -> np.ndarray:
    """Sin/cos positional table for absolute positions offset .. offset+length-1."""
    if d_model % 2:
        raise ContractError(f"sinusoidal encoding needs an even model dim, got {d_model}")
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    freq = 1.0 / 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def _mask_array(mask: AttentionMask | None, lq: int, lk: int, batch: int | None,
                heads: int) -> np.ndarray | None:
    if mask is None:
        return None
    allowed = mask.allowed
    if allowed.shape[-2:] != (lq, lk):
        raise DimensionError(f"mask shape {allowed.shape} does not match attention [{lq} x {lk}]")
    if allowed.ndim == 3:
        if batch is None or allowed.shape[0] != batch:
            raise DimensionError(f"batched mask {allowed.shape} vs batch {batch}")
        allowed = np.repeat(allowed, heads, axis=0)
    return allowed


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask | None,
            p: AttnParams) -> Tensor:
    if q.ndim != k.ndim or k.shape != v.shape:
        raise DimensionError(f"attention operands {q.shape}, {k.shape}, {v.shape}")
    batched = q.ndim == 3
    if batched and q.shape[0] != k.shape[0]:
        raise DimensionError(f"batch mismatch {q.shape[0]} vs {k.shape[0]}")
    lq, lk, d = q.shape[-2], k.shape[-2], q.shape[-1]
    allowed = _mask_array(mask, lq, lk, q.shape[0] if batched else None, p.heads)
    h = p.heads
    qh = split_heads(_affine(q, p.wq, p.bq), h)
    kh = split_heads(_affine(k, p.wk, p.bk), h)
    vh = split_heads(_affine(v, p.wv, p.bv), h)
    scores = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(d // h))
    weights = softmax_rows(scores, allowed)
    ctx = merge_heads(matmul(weights, vh), h, batched)
    return _affine(ctx, p.wo, p.bo)


def self_attention(q: Tensor, mask: AttentionMask | None, params: AttnParams) -> Tensor:
    """Multi-head scaled dot-product attention of ``q`` over itself (no residual)."""
    return _attend(q, q, q, mask, params)


def cross_attention(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask | None,
                    params: AttnParams) -> Tensor:
    return _attend(q, k, v, mask, params)


def ffn(x: Tensor, p: TduParams) -> Tensor:
    return _affine(relu(_affine(x, p.w1, p.b1)), p.w2, p.b2)


def tdu_forward(q: Tensor, k: Tensor, v: Tensor, self_mask: AttentionMask | None,
                cross_mask: AttentionMask | None, params: TduParams) -> Tensor:
    """Self-attention, cross-attention and FFN, each followed by residual + LayerNorm."""
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise DimensionError(f"q/k/v model dims differ: {q.shape}, {k.shape}, {v.shape}")
    p = params
    q1 = layer_norm(add(self_attention(q, self_mask, p.self_attn), q), p.ln1_g, p.ln1_b)
    q2 = layer_norm(add(cross_attention(q1, k, v, cross_mask, p.cross_attn), q1),
                    p.ln2_g, p.ln2_b)
    return layer_norm(add(ffn(q2, p), q2), p.ln3_g, p.ln3_b)


__all__ = [
    "AttentionMask", "AttnParams", "TduParams", "sinusoidal_pe", "self_attention",
    "cross_attention", "ffn", "tdu_forward",
]
