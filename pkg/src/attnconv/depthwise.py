"""Depth-wise self-attention.

The value kernel bank is dropped; only key kernels remain. Per head and per
location i the block computes

    o_i = q_i * mean(selected keys)  +  p_i . selected keys

where * is the channel-wise product (channel count preserved, the depth-wise
contract) and p_i is the relative-bias row aligned with the selected origins.
Everything is linear in q, so there is no activation function; the relative
term is what keeps the block trainable and is therefore mandatory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import _affine
from .convform import SelectionRule, window_index_map, window_partition_map
from .errors import ConfigurationError, DimensionError
from .positional import RelativeBiasTable, materialize_relative_bias
from .tensor import (
    Tensor,
    add,
    concat,
    expand,
    matmul,
    mean_axis,
    mul,
    reshape,
    take,
    transpose,
)

__all__ = ["DepthwiseAttentionParams", "DepthwiseAttentionConfig",
           "depthwise_attention_forward", "depthwise_locality_check"]


@dataclass
class DepthwiseAttentionParams:
    """Projections of the depth-wise block: no value path."""

    w_q: Tensor
    w_k: Tensor
    b_q: Tensor
    b_k: Tensor
    w_o: Tensor
    b_o: Tensor

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, scale: float = 0.2,
               requires_grad: bool = False) -> "DepthwiseAttentionParams":
        def w():
            return Tensor(rng.standard_normal((channels, channels)) * scale,
                          requires_grad=requires_grad)

        def b():
            return Tensor(rng.standard_normal(channels) * scale,
                          requires_grad=requires_grad)

        return cls(w(), w(), b(), b(), w(), b())

    def tensors(self):
        return (self.w_q, self.w_k, self.b_q, self.b_k, self.w_o, self.b_o)


@dataclass
class DepthwiseAttentionConfig:
    channels: int
    heads: int
    rule: SelectionRule
    rel_table: RelativeBiasTable  # mandatory; the block is linear without it

    def __post_init__(self):
        if self.rel_table is None:
            raise ConfigurationError(
                "depth-wise attention requires a relative bias table: the block "
                "has no non-linearity, and without the positional term it "
                "collapses to a per-channel rescaling and fails to train")
        if self.channels % self.heads != 0:
            raise ConfigurationError(
                f"channels {self.channels} not divisible into {self.heads} heads")


def _head_cols(h: int, ch: int) -> np.ndarray:
    return np.arange(h * ch, (h + 1) * ch)


def depthwise_attention_forward(
    x: Tensor,
    params: DepthwiseAttentionParams,
    cfg: DepthwiseAttentionConfig,
) -> Tensor:
    """Depth-wise attention on tokens [N, C], output projection included."""
    n, c = x.shape
    if c != cfg.channels:
        raise DimensionError(f"tokens {x.shape} vs configured channels {cfg.channels}")
    q = _affine(x, params.w_q, params.b_q)
    k = _affine(x, params.w_k, params.b_k)
    ch = c // cfg.heads
    grid = cfg.rule.grid if cfg.rule.kind == "local_window" else cfg.rel_table.grid
    bias = materialize_relative_bias(grid, cfg.rule, cfg.rel_table)  # [H, N, n]

    outs = []
    for h in range(cfg.heads):
        cols = _head_cols(h, ch)
        qh = take(q, cols, axis=1)  # [N, ch]
        kh = take(k, cols, axis=1)
        ph = reshape(take(bias, np.array([h]), axis=0), bias.shape[1:])  # [N, n]
        if cfg.rule.kind == "global":
            kbar = mean_axis(kh, 0, keepdims=True)  # one averaged kernel
            term1 = mul(qh, expand(kbar, qh.shape))
            term2 = matmul(ph, kh)  # [N, n] x [n, ch]
            outs.append(add(term1, term2))
        else:
            gh, gw = cfg.rule.grid
            wh, ww = cfg.rule.window
            wsize = wh * ww
            win_tokens = window_partition_map(gh, gw, wh, ww)  # [num_windows, wsize]
            kw = reshape(take(kh, win_tokens.ravel(), axis=0),
                         (win_tokens.shape[0], wsize, ch))
            qw = reshape(take(qh, win_tokens.ravel(), axis=0),
                         (win_tokens.shape[0], wsize, ch))
            pw = reshape(take(ph, win_tokens.ravel(), axis=0),
                         (win_tokens.shape[0], wsize, wsize))
            kbar = mean_axis(kw, 1, keepdims=True)  # [W, 1, ch]
            term1 = mul(qw, expand(kbar, qw.shape))
            term2 = matmul(pw, kw)  # [W, wsize, wsize] x [W, wsize, ch]
            merged = reshape(add(term1, term2), (n, ch))
            # scatter window-ordered rows back to token order
            inverse = np.argsort(win_tokens.ravel())
            outs.append(take(merged, inverse, axis=0))
    return _affine(concat(outs, axis=1), params.w_o, params.b_o)


def depthwise_locality_check(
    x: Tensor,
    params: DepthwiseAttentionParams,
    cfg: DepthwiseAttentionConfig,
    perturb_location: int | None = None,
    delta: float = 0.731,
) -> bool:
    """True iff perturbing a token outside a window leaves that window intact.

    Vacuously true under the global rule (every token is in scope everywhere).
    """
    if cfg.rule.kind != "local_window":
        return True
    gh, gw = cfg.rule.grid
    wh, ww = cfg.rule.window
    origins = window_index_map(gh, gw, wh, ww)
    if perturb_location is None:
        perturb_location = gh * gw - 1
    base = depthwise_attention_forward(x, params, cfg).data
    bumped = x.data.copy()
    bumped[perturb_location] += delta
    out = depthwise_attention_forward(Tensor(bumped), params, cfg).data
    inside = origins[perturb_location]
    untouched = np.setdiff1d(np.arange(gh * gw), inside)
    return bool(np.array_equal(base[untouched], out[untouched]))
