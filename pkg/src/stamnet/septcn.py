"""Separable temporal convolution front end.

Two blocks, each depthwise (k x 1, per channel) followed by pointwise (1 x 1
channel mix), with a 1 x 1-projected residual connection, ReLU after the
residual sum, and a shape-preserving temporal max-pool. Lifts the K=3
coordinate channels to the attention width per (frame, joint) position; the
joint axis is never mixed or reduced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import (Tensor, _make, add, conv_temporal, maxpool_temporal,
                     relu, reshape, transpose)


@dataclass
class SepTcnConfig:
    in_channels: int = 3
    mid_channels: int = 64
    out_channels: int = 128
    kernel1: int = 3
    stride1: int = 1
    kernel2: int = 5
    stride2: int = 1   # 2 selects the stride the block-2 description states

    def __post_init__(self):
        for k in (self.kernel1, self.kernel2):
            if k % 2 == 0:
                raise ParameterError(f"kernels must be odd for same padding, got {k}")
        for v in (self.in_channels, self.mid_channels, self.out_channels,
                  self.stride1, self.stride2):
            if v < 1:
                raise ParameterError(f"positive value required, got {v}")

    def t_out(self, t_in: int) -> int:
        t1 = (t_in + 2 * (self.kernel1 // 2) - self.kernel1) // self.stride1 + 1
        return (t1 + 2 * (self.kernel2 // 2) - self.kernel2) // self.stride2 + 1


@dataclass
class SepTcnBlockParams:
    dw_weight: Tensor            # [C, 1, k]
    dw_bias: Tensor              # [C]
    pw_weight: Tensor            # [C', C, 1]
    pw_bias: Tensor              # [C']
    proj_weight: Tensor | None   # [C', C, 1] when C != C'
    proj_bias: Tensor | None

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.dw.weight": self.dw_weight, f"{prefix}.dw.bias": self.dw_bias,
               f"{prefix}.pw.weight": self.pw_weight, f"{prefix}.pw.bias": self.pw_bias}
        if self.proj_weight is not None:
            out[f"{prefix}.proj.weight"] = self.proj_weight
            out[f"{prefix}.proj.bias"] = self.proj_bias
        return out


def init_block_params(rng: np.random.Generator, c_in: int, c_out: int,
                      k: int) -> SepTcnBlockParams:
    dw = rng.normal(0.0, math.sqrt(2.0 / k), size=(c_in, 1, k))
    pw = rng.normal(0.0, math.sqrt(2.0 / c_in), size=(c_out, c_in, 1))
    params = SepTcnBlockParams(
        Tensor(dw, requires_grad=True), Tensor(np.zeros(c_in), requires_grad=True),
        Tensor(pw, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True),
        None, None)
    if c_in != c_out:
        pr = rng.normal(0.0, math.sqrt(1.0 / c_in), size=(c_out, c_in, 1))
        params.proj_weight = Tensor(pr, requires_grad=True)
        params.proj_bias = Tensor(np.zeros(c_out), requires_grad=True)
    return params


def septcn_block(x: Tensor, params: SepTcnBlockParams, k: int, stride: int) -> Tensor:
    """maxpool(relu(PW(DW(x)) + proj(x subsampled to the DW output length)))."""
    c_in = x.shape[-3]
    if params.dw_weight.shape[0] != c_in:
        raise ShapeError(f"block expects {params.dw_weight.shape[0]} channels, "
                         f"input has {c_in} (shape {x.shape})")
    pad = k // 2
    h = conv_temporal(x, params.dw_weight, bias=params.dw_bias,
                      stride=stride, padding=pad, groups=c_in)
    h = conv_temporal(h, params.pw_weight, bias=params.pw_bias)
    res = x
    if stride > 1:
        t_out = h.shape[-2]
        sl = [slice(None)] * x.ndim
        sl[-2] = slice(0, stride * (t_out - 1) + 1, stride)
        res = _strided_slice(x, tuple(sl))
    if params.proj_weight is not None:
        res = conv_temporal(res, params.proj_weight, bias=params.proj_bias)
    y = relu(add(h, res))
    return maxpool_temporal(y, k=3, stride=1, padding=1)


def _strided_slice(x: Tensor, index: tuple) -> Tensor:
    out_data = x.data[index]

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[index] = g
            x.grad += buf

    return _make(out_data, (x,), backward)


@dataclass
class SepTcnParams:
    block1: SepTcnBlockParams
    block2: SepTcnBlockParams

    def named(self, prefix: str = "septcn") -> dict[str, Tensor]:
        return {**self.block1.named(f"{prefix}.block1"),
                **self.block2.named(f"{prefix}.block2")}


def init_septcn_params(rng: np.random.Generator, config: SepTcnConfig) -> SepTcnParams:
    return SepTcnParams(
        init_block_params(rng, config.in_channels, config.mid_channels, config.kernel1),
        init_block_params(rng, config.mid_channels, config.out_channels, config.kernel2))


def septcn_forward(x: Tensor, config: SepTcnConfig, params: SepTcnParams) -> Tensor:
    """[.., K, T, N] -> [.., C, T', N]; default geometry preserves T."""
    if x.shape[-3] != config.in_channels:
        raise ShapeError(f"input has {x.shape[-3]} channels, "
                         f"config expects {config.in_channels}")
    h = septcn_block(x, params.block1, config.kernel1, config.stride1)
    return septcn_block(h, params.block2, config.kernel2, config.stride2)


def tokens_from_features(y: Tensor) -> Tensor:
    """[.., C, T, N] -> [.., T*N, C]; token (t, i) lands in row t*N + i."""
    if y.ndim == 3:
        c, t, n = y.shape
        return reshape(transpose(y, (1, 2, 0)), (t * n, c))
    if y.ndim == 4:
        b, c, t, n = y.shape
        return reshape(transpose(y, (0, 2, 3, 1)), (b, t * n, c))
    raise ShapeError(f"expected [C,T,N] or [B,C,T,N], got {y.shape}")


def features_from_tokens(tokens: Tensor, t_frames: int, n_joints: int) -> Tensor:
    """Inverse of tokens_from_features (diagnostic use)."""
    if tokens.ndim == 2:
        l, c = tokens.shape
        return transpose(reshape(tokens, (t_frames, n_joints, c)), (2, 0, 1))
    b, l, c = tokens.shape
    return transpose(reshape(tokens, (b, t_frames, n_joints, c)), (0, 3, 1, 2))
