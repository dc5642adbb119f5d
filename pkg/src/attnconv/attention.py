"""Standard multi-head self-attention.

This is the reference formulation (token matrix in, token matrix out) that
the convolution form is verified against. Heads split the channel axis; per
head the raw scores q k^T are passed through an activation variant (scaled
softmax in the standard case) and applied to the values, then heads are
concatenated and the output projection applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .activations import ActivationVariant, apply_activation
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import (
    Tensor,
    linear,
    matmul,
    reshape,
    softmax,  # re-exported: the temperature softmax primitive lives here conceptually
    transpose,
)

__all__ = ["AttentionParams", "AttentionConfig", "qkv_project", "softmax",
           "attention_forward", "multi_head_attention"]


@dataclass
class AttentionParams:
    """Projection weights of one attention block. Weights are [C, C], biases [C]."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    b_q: Tensor
    b_k: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    heads: int = 1

    def __post_init__(self):
        c = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (c, c):
                raise DimensionError(f"{name} must be square [{c}x{c}], got "
                                     f"{getattr(self, name).shape}")
        for name in ("b_q", "b_k", "b_v", "b_o"):
            if getattr(self, name).shape != (c,):
                raise DimensionError(f"{name} must be [{c}], got {getattr(self, name).shape}")
        if self.heads < 1 or c % self.heads != 0:
            raise ConfigurationError(
                f"channels {c} not divisible into {self.heads} heads")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @classmethod
    def random(cls, channels: int, heads: int, rng: np.random.Generator,
               scale: float = 0.2, requires_grad: bool = False) -> "AttentionParams":
        def w():
            return Tensor(rng.standard_normal((channels, channels)) * scale,
                          requires_grad=requires_grad)

        def b():
            return Tensor(rng.standard_normal(channels) * scale,
                          requires_grad=requires_grad)

        return cls(w(), w(), w(), b(), b(), b(), w(), b(), heads)

    @classmethod
    def identity(cls, channels: int, heads: int = 1) -> "AttentionParams":
        eye = np.eye(channels)
        zero = np.zeros(channels)
        return cls(Tensor(eye), Tensor(eye), Tensor(eye), Tensor(zero),
                   Tensor(zero), Tensor(zero), Tensor(eye), Tensor(zero), heads)

    def tensors(self):
        return (self.w_q, self.w_k, self.w_v, self.b_q, self.b_k, self.b_v,
                self.w_o, self.b_o)


@dataclass
class AttentionConfig:
    tokens: int
    channels: int
    heads: int
    activation: ActivationVariant = field(
        default_factory=lambda: ActivationVariant("softmax"))
    temperature: float = 1.0

    def __post_init__(self):
        if not (self.temperature > 0):
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.channels % self.heads != 0:
            raise ConfigurationError(
                f"channels {self.channels} not divisible into {self.heads} heads")


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return linear(x, w, b)


def qkv_project(x: Tensor, params: AttentionParams):
    """Project tokens [N, C] to query, key, value with three affine maps."""
    if x.ndim != 2 or x.shape[1] != params.channels:
        raise DimensionError(
            f"tokens {x.shape} do not match parameter channels {params.channels}")
    q = _affine(x, params.w_q, params.b_q)
    k = _affine(x, params.w_k, params.b_k)
    v = _affine(x, params.w_v, params.b_v)
    return q, k, v


def _split_heads(t: Tensor, heads: int) -> Tensor:
    n, c = t.shape
    t = reshape(t, (n, heads, c // heads))
    return transpose(t, (1, 0, 2))  # [H, N, C_h]


def _merge_heads(t: Tensor) -> Tensor:
    h, n, ch = t.shape
    return reshape(transpose(t, (1, 0, 2)), (n, h * ch))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    activation: ActivationVariant,
    rel_bias: Tensor | None = None,
    tau: float = 1.0,
    ln_gamma: Tensor | None = None,
    ln_beta: Tensor | None = None,
) -> Tensor:
    """Head-split activation-weighted aggregation; returns [N, C] pre-projection."""
    n, c = q.shape
    ch = c // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    raw = matmul(qh, transpose(kh, (0, 2, 1)))  # [H, N, N]
    if rel_bias is not None and rel_bias.shape != raw.shape:
        raise DimensionError(
            f"relative bias {rel_bias.shape} does not match logits {raw.shape}")
    att = apply_activation(raw, activation, ch, bias=rel_bias, tau=tau,
                           gamma=ln_gamma, beta=ln_beta)
    return _merge_heads(matmul(att, vh))


def attention_forward(
    x: Tensor,
    params: AttentionParams,
    cfg: AttentionConfig,
    rel_bias: Tensor | None = None,
    ln_gamma: Tensor | None = None,
    ln_beta: Tensor | None = None,
) -> Tensor:
    """Full attention block on tokens [N, C], output projection included."""
    q, k, v = qkv_project(x, params)
    mixed = multi_head_attention(q, k, v, cfg.heads, cfg.activation, rel_bias,
                                 cfg.temperature, ln_gamma, ln_beta)
    return _affine(mixed, params.w_o, params.b_o)
