"""Full recognition network.

Sep-TCN front end, then up to four parallel streams over the token sequence:
(1) spatial attention with spatial position embedding, (2) temporal attention
with temporal embedding, (3) spatial attention followed by temporal attention
(each with its embedding added first), (4) the untouched token features as a
residual stream. Streams are concatenated along the token axis, passed
token-wise through the classifier head, mean-pooled over tokens, and mapped
to class logits. Training loss is categorical cross-entropy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attention import MhsaParams, init_mhsa_params, mhsa
from .embeddings import build_embedding, build_mask
from .errors import FormatError, ParameterError, ShapeError
from .septcn import (SepTcnConfig, init_septcn_params, septcn_forward,
                     tokens_from_features)
from .tensor import (Tensor, add, concat, cross_entropy, dropout, layernorm,
                     leaky_relu, linear, mean, relu)

CHECKPOINT_VERSION = 1

STREAM_NAMES = ("spatial", "temporal", "cascade", "residual")


@dataclass
class ModelConfig:
    n_classes: int = 38
    t_frames: int = 4
    n_joints: int = 21
    in_coords: int = 3
    channels: int = 128
    heads: int = 8
    septcn: SepTcnConfig = field(default_factory=SepTcnConfig)
    dropout_rate: float = 0.01
    mask_mode: str = "additive"
    attn_scale: bool = True
    attn_residual: bool = True
    embed_base: float = 1000.0
    stream_spatial: bool = True
    stream_temporal: bool = True
    stream_cascade: bool = True
    stream_residual: bool = True
    classifier_width: int = 128
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.septcn, dict):
            self.septcn = _from_dict_strict(SepTcnConfig, self.septcn)
        if self.n_classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.n_classes}")
        if self.channels % self.heads != 0:
            raise ParameterError(
                f"channels {self.channels} not divisible by heads {self.heads}")
        if self.channels != self.septcn.out_channels:
            raise ParameterError(
                f"attention width {self.channels} != Sep-TCN output "
                f"{self.septcn.out_channels}")
        if self.classifier_width != self.channels:
            raise ParameterError(
                f"classifier width {self.classifier_width} != channels {self.channels}")
        if self.septcn.in_channels != self.in_coords:
            raise ParameterError(
                f"Sep-TCN input channels {self.septcn.in_channels} != "
                f"coordinate count {self.in_coords}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0,1), got {self.dropout_rate}")
        if not any(self.enabled_streams()):
            raise ParameterError("at least one stream must be enabled")

    @property
    def d_head(self) -> int:
        return self.channels // self.heads

    @property
    def t_after_septcn(self) -> int:
        return self.septcn.t_out(self.t_frames)

    @property
    def tokens_per_stream(self) -> int:
        return self.t_after_septcn * self.n_joints

    def enabled_streams(self) -> list[bool]:
        return [self.stream_spatial, self.stream_temporal,
                self.stream_cascade, self.stream_residual]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return _from_dict_strict(cls, doc)


def _from_dict_strict(cls, doc: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ParameterError(
            f"unknown {cls.__name__} keys: {sorted(unknown)} (known: {sorted(known)})")
    return cls(**doc)


class StamModel:
    """Parameters plus the constant embedding tables and masks for a config.

    Parameter tensors live in ``self.params`` (an insertion-ordered name ->
    Tensor registry); the structured views share the same Tensor objects, so
    in-place optimizer updates are visible everywhere.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config.channels
        self.septcn_params = init_septcn_params(rng, config.septcn)
        with_norm = config.attn_residual
        self.attn = {}
        if config.stream_spatial:
            self.attn["stream1.attn"] = init_mhsa_params(rng, c, config.heads, with_norm)
        if config.stream_temporal:
            self.attn["stream2.attn"] = init_mhsa_params(rng, c, config.heads, with_norm)
        if config.stream_cascade:
            self.attn["stream3.attn_s"] = init_mhsa_params(rng, c, config.heads, with_norm)
            self.attn["stream3.attn_t"] = init_mhsa_params(rng, c, config.heads, with_norm)
        self.head_fc_w = Tensor(rng.normal(0, math.sqrt(2.0 / c), (c, c)),
                                requires_grad=True)
        self.head_fc_b = Tensor(np.zeros(c), requires_grad=True)
        self.head_ln_gain = Tensor(np.ones(c), requires_grad=True)
        self.head_ln_bias = Tensor(np.zeros(c), requires_grad=True)
        self.cls_w = Tensor(rng.normal(0, math.sqrt(1.0 / c), (c, config.n_classes)),
                            requires_grad=True)
        self.cls_b = Tensor(np.zeros(config.n_classes), requires_grad=True)

        self.params: dict[str, Tensor] = {}
        self.params.update(self.septcn_params.named("septcn"))
        for prefix, p in self.attn.items():
            self.params.update(p.named(prefix))
        self.params.update({
            "head.fc.weight": self.head_fc_w, "head.fc.bias": self.head_fc_b,
            "head.ln.gain": self.head_ln_gain, "head.ln.bias": self.head_ln_bias,
            "cls.weight": self.cls_w, "cls.bias": self.cls_b,
        })

        t_out, n = config.t_after_septcn, config.n_joints
        self.spatial_embedding = Tensor(
            build_embedding("spatial", t_out, n, c, config.embed_base).table)
        self.temporal_embedding = Tensor(
            build_embedding("temporal", t_out, n, c, config.embed_base).table)
        self.spatial_mask = build_mask("spatial", t_out, n)
        self.temporal_mask = build_mask("temporal", t_out, n)

    def _mhsa(self, x, key, mask):
        cfg = self.config
        scale = 1.0 / math.sqrt(cfg.d_head) if cfg.attn_scale else 1.0
        return mhsa(x, self.attn[key], mask, cfg.heads, scale=scale,
                    mode=cfg.mask_mode, residual=cfg.attn_residual)

    def stream_outputs(self, tokens: Tensor) -> list[Tensor]:
        cfg = self.config
        outs = []
        if cfg.stream_spatial:
            outs.append(self._mhsa(add(tokens, self.spatial_embedding),
                                   "stream1.attn", self.spatial_mask))
        if cfg.stream_temporal:
            outs.append(self._mhsa(add(tokens, self.temporal_embedding),
                                   "stream2.attn", self.temporal_mask))
        if cfg.stream_cascade:
            inner = self._mhsa(add(tokens, self.spatial_embedding),
                               "stream3.attn_s", self.spatial_mask)
            outs.append(self._mhsa(add(self.temporal_embedding, inner),
                                   "stream3.attn_t", self.temporal_mask))
        if cfg.stream_residual:
            outs.append(tokens)
        return outs

    def classifier_head(self, z: Tensor, training: bool = False, rng=None) -> Tensor:
        h = relu(linear(z, self.head_fc_w, self.head_fc_b))
        h = layernorm(h, self.head_ln_gain, self.head_ln_bias)
        h = leaky_relu(h, 0.1)
        return dropout(h, self.config.dropout_rate, training, rng)

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        """[B, K, T, N] -> logits [B, n_classes]."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.in_coords, cfg.t_frames, cfg.n_joints):
            raise ShapeError(
                f"expected [B,{cfg.in_coords},{cfg.t_frames},{cfg.n_joints}], "
                f"got {x.shape}")
        feats = septcn_forward(x, cfg.septcn, self.septcn_params)
        tokens = tokens_from_features(feats)
        z = concat(self.stream_outputs(tokens), axis=-2)
        h = self.classifier_head(z, training, rng)
        pooled = mean(h, axis=-2)
        return linear(pooled, self.cls_w, self.cls_b)

    @staticmethod
    def loss(logits: Tensor, labels) -> Tensor:
        return cross_entropy(logits, labels)

    def count_trainable(self):
        """(total, per-layer dict) where a layer is a parameter-name prefix."""
        groups: dict[str, int] = {}
        for name, t in self.params.items():
            layer = name.rsplit(".", 1)[0]
            groups[layer] = groups.get(layer, 0) + t.size
        return sum(groups.values()), groups

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def save(self, path) -> None:
        payload = {f"param::{name}": t.data for name, t in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh,
                     checkpoint_version=np.int64(CHECKPOINT_VERSION),
                     config_json=np.frombuffer(
                         json.dumps(self.config.to_dict()).encode(), dtype=np.uint8),
                     **payload)

    @classmethod
    def load(cls, path) -> "StamModel":
        with np.load(path, allow_pickle=False) as archive:
            if "checkpoint_version" not in archive:
                raise FormatError(f"{path}: not a model checkpoint")
            version = int(archive["checkpoint_version"])
            if version != CHECKPOINT_VERSION:
                raise FormatError(f"{path}: unsupported checkpoint version {version}")
            config = ModelConfig.from_dict(
                json.loads(bytes(archive["config_json"]).decode()))
            model = cls(config)
            stored = {k[len("param::"):] for k in archive.files if k.startswith("param::")}
            expected = set(model.params)
            if stored != expected:
                raise FormatError(
                    f"{path}: parameter names disagree with config "
                    f"(missing {sorted(expected - stored)}, "
                    f"extra {sorted(stored - expected)})")
            for name, tensor in model.params.items():
                arr = archive[f"param::{name}"]
                if arr.shape != tensor.data.shape:
                    raise FormatError(f"{path}: {name} has shape {arr.shape}, "
                                      f"expected {tensor.data.shape}")
                tensor.data = arr.astype(np.float64)
                tensor.grad = np.zeros_like(tensor.data)
        return model
