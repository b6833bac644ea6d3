"""Task-specific classification heads.

Two kinds. The fc baseline pools the backbone tokens, applies a
full-width FC + ReLU, and classifies. The attention head first projects
tokens down to a narrow width d_t, self-attends there, then averages and
classifies; at d_t well below the backbone width it spends close to an
order of magnitude fewer parameters per task.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nd
from .errors import ConfigurationError, DimensionError

HEAD_KINDS = ("fc", "attention")
ATTN_HEAD_CHOICES = (2, 4)

# Quartile ladders may top out above the backbone width (the widest rung of
# the reference ladder does), so the cap is 2x rather than 1x.
DT_OVER_BACKBONE_LIMIT = 2


@dataclass(frozen=True)
class HeadConfig:
    kind: str
    d_backbone: int
    num_classes: int
    d_t: int = 0  # attention only
    attn_heads: int = 2  # attention only

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigurationError(f"unknown head kind {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigurationError("a head needs at least 2 classes")
        if self.d_backbone < 1:
            raise ConfigurationError("d_backbone must be positive")
        if self.kind == "attention":
            if self.d_t < 1:
                raise ConfigurationError("attention head needs d_t >= 1")
            if self.d_t > DT_OVER_BACKBONE_LIMIT * self.d_backbone:
                raise ConfigurationError(
                    f"d_t={self.d_t} exceeds {DT_OVER_BACKBONE_LIMIT}x the "
                    f"backbone width {self.d_backbone}"
                )
            if self.attn_heads not in ATTN_HEAD_CHOICES:
                raise ConfigurationError(
                    f"attn_heads must be one of {ATTN_HEAD_CHOICES}"
                )
            if self.d_t % self.attn_heads:
                raise ConfigurationError(
                    f"d_t={self.d_t} not divisible by {self.attn_heads} heads"
                )


def param_count(cfg: HeadConfig) -> int:
    """Exact scalar count for one head, weights and biases both included."""
    d, c = cfg.d_backbone, cfg.num_classes
    if cfg.kind == "fc":
        return (d * d + d) + (d * c + c)
    t = cfg.d_t
    return (d * t + t) + 4 * (t * t + t) + (t * c + c)


def _weight(rng, fan_in, *shape):
    return nd.Tensor(rng.standard_normal(shape) / np.sqrt(fan_in))


def _param(prefix, name, tensor):
    return nd.Parameter(f"{prefix}/{name}", tensor)


@dataclass
class FcHead:
    cfg: HeadConfig
    params: list = field(default_factory=list)

    @classmethod
    def init(cls, cfg: HeadConfig, rng, prefix: str):
        d, c = cfg.d_backbone, cfg.num_classes
        params = [
            _param(prefix, "fc_w", _weight(rng, d, d, d)),
            _param(prefix, "fc_b", nd.Tensor(np.zeros(d))),
            _param(prefix, "out_w", _weight(rng, d, d, c)),
            _param(prefix, "out_b", nd.Tensor(np.zeros(c))),
        ]
        return cls(cfg, params)

    def forward(self, tokens: nd.Tensor, mask=None) -> nd.Tensor:
        """tokens (seq,d) or (batch,seq,d) -> logits (C,) or (batch,C)."""
        pooled, squeeze = _masked_mean(tokens, mask)
        w1, b1, w2, b2 = (p.tensor for p in self.params)
        h = nd.relu(nd.add(nd.matmul(pooled, w1), b1))
        logits = nd.add(nd.matmul(h, w2), b2)
        return nd.reshape(logits, (self.cfg.num_classes,)) if squeeze else logits


@dataclass
class AttentionHead:
    cfg: HeadConfig
    params: list = field(default_factory=list)

    @classmethod
    def init(cls, cfg: HeadConfig, rng, prefix: str):
        d, t, c = cfg.d_backbone, cfg.d_t, cfg.num_classes
        names = ["proj_w", "proj_b"]
        tensors = [_weight(rng, d, d, t), nd.Tensor(np.zeros(t))]
        for nm in ("q", "k", "v", "o"):
            names += [f"attn_{nm}w", f"attn_{nm}b"]
            tensors += [_weight(rng, t, t, t), nd.Tensor(np.zeros(t))]
        names += ["out_w", "out_b"]
        tensors += [_weight(rng, t, t, c), nd.Tensor(np.zeros(c))]
        params = [_param(prefix, n, tt) for n, tt in zip(names, tensors)]
        return cls(cfg, params)

    def _attn_params(self) -> nd.AttentionParams:
        t = [p.tensor for p in self.params]
        return nd.AttentionParams(
            wq=t[2], bq=t[3], wk=t[4], bk=t[5], wv=t[6], bv=t[7],
            wo=t[8], bo=t[9], num_heads=self.cfg.attn_heads,
        )

    def forward(self, tokens: nd.Tensor, mask=None) -> nd.Tensor:
        """tokens (seq,d) or (batch,seq,d) -> logits (C,) or (batch,C)."""
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = nd.reshape(tokens, (1,) + tuple(tokens.shape))
        if tokens.shape[-1] != self.cfg.d_backbone:
            raise DimensionError(
                f"expected width {self.cfg.d_backbone}, got {tokens.shape[-1]}"
            )
        pw, pb = self.params[0].tensor, self.params[1].tensor
        low = nd.add(nd.matmul(tokens, pw), pb)
        att = nd.self_attention(low, self._attn_params(), key_mask=mask)
        pooled, _ = _masked_mean(att, mask)
        ow, ob = self.params[10].tensor, self.params[11].tensor
        logits = nd.add(nd.matmul(pooled, ow), ob)
        return nd.reshape(logits, (self.cfg.num_classes,)) if squeeze else logits


def _masked_mean(tokens: nd.Tensor, mask):
    """Average over the sequence axis, skipping masked positions.

    Returns (pooled (batch,d), came_in_2d). A missing mask means every
    position counts.
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = nd.reshape(tokens, (1,) + tuple(tokens.shape))
    if tokens.ndim != 3:
        raise DimensionError("expected (seq,d) or (batch,seq,d) tokens")
    b, s, _ = tokens.shape
    if mask is None:
        counts = np.full((b, 1), float(s))
        kept = tokens
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (b, s):
            raise DimensionError(f"mask shape {mask.shape} != {(b, s)}")
        counts = mask.sum(axis=1, keepdims=True)
        if (counts == 0).any():
            raise DimensionError("a fully masked sequence cannot be pooled")
        kept = nd.scale(tokens, mask[:, :, None])
    pooled = nd.scale(nd.sum_axis(kept, 1), 1.0 / counts)
    return pooled, squeeze


def build_head(cfg: HeadConfig, rng, prefix: str):
    if cfg.kind == "fc":
        return FcHead.init(cfg, rng, prefix)
    return AttentionHead.init(cfg, rng, prefix)


def live_param_count(head) -> int:
    """Scalars actually registered by a built head (for exact accounting)."""
    return int(sum(p.data.size for p in head.params))
