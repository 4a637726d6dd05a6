"""Sinusoidal position embeddings and the spatial/temporal attention masks.

Tokens are the flattened (frame, joint) grid, row t*N + i. The spatial mask
lets a token attend only within its own frame; the temporal mask only along
its own joint across frames. Blocking is realized either as an additive
pre-softmax bias (default) or as post-softmax multiplication by the 0/1
allow matrix (the literal form of the mask description).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .tensor import MASK_SENTINEL

# Frequency base of the sinusoid. 1000, not the more common 10000; kept as a
# parameter so either convention can be selected.
DEFAULT_FREQ_BASE = 1000.0

KINDS = ("spatial", "temporal")


@dataclass(frozen=True)
class PositionEmbedding:
    kind: str
    table: np.ndarray  # [L, C], L = T*N


@dataclass(frozen=True)
class AttentionMask:
    kind: str
    allow: np.ndarray  # [L, L] bool, symmetric, diagonal all True


def sinusoid(p: int, c_in: int, base: float = DEFAULT_FREQ_BASE) -> np.ndarray:
    """Length-c_in vector: index 2i = sin(p / base^(2i/c_in)), 2i+1 = cos(same)."""
    if c_in % 2 != 0:
        raise ParameterError(f"embedding width must be even, got {c_in}")
    if p < 0:
        raise ParameterError(f"position must be nonnegative, got {p}")
    i2 = np.arange(0, c_in, 2, dtype=np.float64)
    angle = p / np.power(base, i2 / c_in)
    vec = np.empty(c_in, dtype=np.float64)
    vec[0::2] = np.sin(angle)
    vec[1::2] = np.cos(angle)
    return vec


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ParameterError(f"kind must be one of {KINDS}, got {kind!r}")


def build_embedding(kind: str, t_frames: int, n_joints: int, c_in: int,
                    base: float = DEFAULT_FREQ_BASE) -> PositionEmbedding:
    """Token table [T*N, C]; spatial rows index by joint, temporal rows by frame."""
    _check_kind(kind)
    if t_frames < 1 or n_joints < 1:
        raise ParameterError(f"need T,N >= 1, got T={t_frames}, N={n_joints}")
    table = np.empty((t_frames * n_joints, c_in), dtype=np.float64)
    for t in range(t_frames):
        for i in range(n_joints):
            p = i if kind == "spatial" else t
            table[t * n_joints + i] = sinusoid(p, c_in, base)
    return PositionEmbedding(kind, table)


def build_mask(kind: str, t_frames: int, n_joints: int) -> AttentionMask:
    _check_kind(kind)
    if t_frames < 1 or n_joints < 1:
        raise ParameterError(f"need T,N >= 1, got T={t_frames}, N={n_joints}")
    frame = np.repeat(np.arange(t_frames), n_joints)
    joint = np.tile(np.arange(n_joints), t_frames)
    if kind == "spatial":
        allow = frame[:, None] == frame[None, :]
    else:
        allow = joint[:, None] == joint[None, :]
    return AttentionMask(kind, allow)


def mask_bias(mask: AttentionMask) -> np.ndarray:
    """Additive logit bias: 0 where allowed, the blocking sentinel elsewhere."""
    return np.where(mask.allow, 0.0, MASK_SENTINEL)
