"""Masked multi-head self-attention over (frame, joint) tokens.

A boolean allow-matrix specializes full self-attention into the spatial or
temporal variant. Blocking defaults to an additive pre-softmax sentinel so
each row stays a probability distribution over its allowed keys; the literal
post-softmax 0/1 multiplication is selectable for comparison (its rows then
sum to < 1). All heads are computed jointly; head m owns columns
[m*d_h, (m+1)*d_h) of the fused projection matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embeddings import AttentionMask, mask_bias
from .errors import ContractError, ParameterError, ShapeError
from .tensor import (Tensor, add, layernorm, linear, matmul, mul, reshape,
                     softmax, transpose)

MASK_MODES = ("additive", "multiplicative")


@dataclass
class MhsaParams:
    wq: Tensor              # [C, M*d_h]
    wk: Tensor              # [C, M*d_h]
    wv: Tensor              # [C, M*d_h]
    wo: Tensor              # [M*d_h, C]
    bo: Tensor              # [C]
    ln_gain: Tensor | None = None   # [C] when the residual+norm wrapper is on
    ln_bias: Tensor | None = None

    @property
    def heads_width(self) -> int:
        return self.wq.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
               f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo,
               f"{prefix}.bo": self.bo}
        if self.ln_gain is not None:
            out[f"{prefix}.ln.gain"] = self.ln_gain
            out[f"{prefix}.ln.bias"] = self.ln_bias
        return out


def init_mhsa_params(rng: np.random.Generator, channels: int, heads: int,
                     with_norm: bool = True) -> MhsaParams:
    if channels % heads != 0:
        raise ParameterError(f"channels {channels} not divisible by heads {heads}")
    width = channels
    std_in = math.sqrt(1.0 / channels)
    std_out = math.sqrt(1.0 / width)
    params = MhsaParams(
        Tensor(rng.normal(0, std_in, (channels, width)), requires_grad=True),
        Tensor(rng.normal(0, std_in, (channels, width)), requires_grad=True),
        Tensor(rng.normal(0, std_in, (channels, width)), requires_grad=True),
        Tensor(rng.normal(0, std_out, (width, channels)), requires_grad=True),
        Tensor(np.zeros(channels), requires_grad=True))
    if with_norm:
        params.ln_gain = Tensor(np.ones(channels), requires_grad=True)
        params.ln_bias = Tensor(np.zeros(channels), requires_grad=True)
    return params


def _check_mode(mode: str) -> None:
    if mode not in MASK_MODES:
        raise ParameterError(f"mask mode must be one of {MASK_MODES}, got {mode!r}")


def _masked_attention(scores: Tensor, mask: AttentionMask, mode: str) -> Tensor:
    length = mask.allow.shape[0]
    if scores.shape[-1] != length or scores.shape[-2] != length:
        raise ContractError(
            f"mask is {mask.allow.shape}, attention scores are {scores.shape}")
    if mode == "additive":
        return softmax(add(scores, Tensor(mask_bias(mask))), axis=-1)
    return mul(softmax(scores, axis=-1), Tensor(mask.allow.astype(np.float64)))


def single_head(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                mask: AttentionMask, scale: float,
                mode: str = "additive") -> Tensor:
    """One attention head: softmax(scale * (xWq)(xWk)^T, masked) @ (xWv)."""
    _check_mode(mode)
    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), scale)
    att = _masked_attention(scores, mask, mode)
    return matmul(att, v)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(y: Tensor, heads: int) -> Tensor:
    # [.., L, M*d_h] -> [.., M, L, d_h]
    if y.ndim == 2:
        l, width = y.shape
        return transpose(reshape(y, (l, heads, width // heads)), (1, 0, 2))
    b, l, width = y.shape
    return transpose(reshape(y, (b, l, heads, width // heads)), (0, 2, 1, 3))


def _merge_heads(y: Tensor) -> Tensor:
    # [.., M, L, d_h] -> [.., L, M*d_h]
    if y.ndim == 3:
        m, l, dh = y.shape
        return reshape(transpose(y, (1, 0, 2)), (l, m * dh))
    b, m, l, dh = y.shape
    return reshape(transpose(y, (0, 2, 1, 3)), (b, l, m * dh))


def _head_scores(x: Tensor, params: MhsaParams, heads: int, scale: float) -> Tensor:
    q = _split_heads(matmul(x, params.wq), heads)
    k = _split_heads(matmul(x, params.wk), heads)
    return mul(matmul(q, transpose(k, _swap_last(k.ndim))), scale)


def mhsa(x: Tensor, params: MhsaParams, mask: AttentionMask, heads: int,
         scale: float | None = None, mode: str = "additive",
         residual: bool = True) -> Tensor:
    """All heads jointly, concat, output projection, then the optional
    residual add and layer normalization."""
    _check_mode(mode)
    channels = x.shape[-1]
    if params.wq.shape[0] != channels:
        raise ShapeError(f"params expect {params.wq.shape[0]} channels, "
                         f"input has {channels}")
    d_h = params.heads_width // heads
    if scale is None:
        scale = 1.0 / math.sqrt(d_h)
    scores = _head_scores(x, params, heads, scale)
    att = _masked_attention(scores, mask, mode)
    v = _split_heads(matmul(x, params.wv), heads)
    out = linear(_merge_heads(matmul(att, v)), params.wo, params.bo)
    if residual:
        out = add(x, out)
        if params.ln_gain is not None:
            out = layernorm(out, params.ln_gain, params.ln_bias)
    return out


def attention_weights(x: Tensor, params: MhsaParams, mask: AttentionMask,
                      head: int, heads: int, scale: float | None = None,
                      mode: str = "additive") -> Tensor:
    """Post-mask, post-softmax weight matrix of one head (diagnostic)."""
    if head >= heads or head < 0:
        raise ContractError(f"head {head} out of range [0,{heads})")
    d_h = params.heads_width // heads
    if scale is None:
        scale = 1.0 / math.sqrt(d_h)
    scores = _head_scores(x, params, heads, scale)
    att = _masked_attention(scores, mask, mode)
    index = (head,) if att.ndim == 3 else (slice(None), head)
    return Tensor(att.data[index], _check=False)
