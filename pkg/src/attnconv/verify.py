"""Runtime verification suites behind the CLI.

These drive the two-route checks: the attention block evaluated the standard
way versus through the kernel-bank convolution path, windowed selection
versus masked-logit window attention, the merged-kernel shortcut, the two
relative-bias application sites, and finite-difference gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .activations import ActivationVariant, VARIANT_STRINGS
from .attention import AttentionConfig, AttentionParams, attention_forward
from .convform import (
    SelectionRule,
    build_kernel_bank,
    conv_form_attention,
    conv_form_block,
    merge_selected_kernels,
    window_index_map,
)
from .depthwise import (
    DepthwiseAttentionConfig,
    DepthwiseAttentionParams,
    depthwise_attention_forward,
)
from .positional import RelativeBiasTable, materialize_relative_bias
from .tensor import Tensor, matmul, scale, sum_all, transpose

__all__ = ["EquivalenceResult", "masked_window_attention_reference",
           "equivalence_suite", "grad_check_suite"]


@dataclass
class EquivalenceResult:
    name: str
    max_abs: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_abs < self.tolerance


def masked_window_attention_reference(x: np.ndarray, params: AttentionParams,
                                      heads: int, grid: tuple[int, int],
                                      window: tuple[int, int]) -> np.ndarray:
    """Window attention computed by masking logits outside the window to -inf."""
    n, c = x.shape
    ch = c // heads
    q = x @ params.w_q.data + params.b_q.data
    k = x @ params.w_k.data + params.b_k.data
    v = x @ params.w_v.data + params.b_v.data
    win = window_index_map(*grid, *window)
    mask = np.full((n, n), -np.inf)
    for i in range(n):
        mask[i, win[i]] = 0.0
    out = np.empty((n, c))
    for h in range(heads):
        cols = slice(h * ch, (h + 1) * ch)
        logits = q[:, cols] @ k[:, cols].T / math.sqrt(ch) + mask
        shifted = logits - logits.max(axis=1, keepdims=True)
        att = np.exp(shifted)
        att /= att.sum(axis=1, keepdims=True)
        out[:, cols] = att @ v[:, cols]
    return out @ params.w_o.data + params.b_o.data


def _random_case(rng: np.random.Generator):
    heads = int(rng.choice([1, 2, 4]))
    c = int(rng.choice(np.arange(8, 33, 4)))  # multiples of 4 divide all head counts
    n = int(rng.integers(4, 65))
    return n, c, heads


def equivalence_suite(n: int | None = None, c: int | None = None,
                      heads: int | None = None, seed: int = 0,
                      cases: int = 100) -> list[EquivalenceResult]:
    """Max deviations of each two-route identity over random cases."""
    rng = np.random.default_rng(seed)
    softmax = ActivationVariant("softmax")
    scaling = ActivationVariant("scaling")

    dev_global = dev_local = dev_merge = dev_site = dev_soft = 0.0
    for _ in range(cases):
        nn, cc, hh = (n, c, heads) if n and c and heads else _random_case(rng)
        x = Tensor(rng.uniform(-1, 1, (nn, cc)))
        params = AttentionParams.random(cc, hh, rng)
        cfg = AttentionConfig(nn, cc, hh, softmax)
        ref = attention_forward(x, params, cfg).data
        got = conv_form_block(x, params, cfg, SelectionRule.globally()).data
        dev_global = max(dev_global, float(np.abs(ref - got).max()))

        # soft projection with identity weights reproduces the global rule
        bank = build_kernel_bank(Tensor(rng.uniform(-1, 1, (nn, cc))),
                                 Tensor(rng.uniform(-1, 1, (nn, cc))))
        qmap = Tensor(rng.uniform(-1, 1, (nn, cc)))
        soft = SelectionRule.soft(Tensor(np.eye(nn)))
        a = conv_form_attention(qmap, bank, SelectionRule.globally(), softmax).data
        b = conv_form_attention(qmap, bank, soft, softmax).data
        dev_soft = max(dev_soft, float(np.abs(a - b).max()))

        # merged kernel identity under pure scaling
        sel_n = int(rng.integers(1, nn + 1))
        k_sel = Tensor(rng.uniform(-1, 1, (sel_n, cc)))
        v_sel = Tensor(rng.uniform(-1, 1, (sel_n, cc)))
        g = merge_selected_kernels(k_sel, v_sel, 1.0 / cc)
        one_step = matmul(qmap, g).data
        scores = scale(matmul(qmap, transpose(k_sel, (1, 0))), 1.0 / cc)
        two_step = matmul(scores, v_sel).data
        dev_merge = max(dev_merge, float(np.abs(one_step - two_step).max()))

    # windowed selection vs masked-logit attention, fixed geometry
    grid, window = (4, 4), (2, 2)
    nn = grid[0] * grid[1]
    for _ in range(max(1, cases // 10)):
        cc = 16
        hh = 2
        x = Tensor(rng.uniform(-1, 1, (nn, cc)))
        params = AttentionParams.random(cc, hh, rng)
        cfg = AttentionConfig(nn, cc, hh, softmax)
        rule = SelectionRule.local(*window, *grid)
        got = conv_form_block(x, params, cfg, rule).data
        ref = masked_window_attention_reference(x.data, params, hh, grid, window)
        dev_local = max(dev_local, float(np.abs(ref - got).max()))

        # logits-site vs decomposed-site bias application, linear variant
        table = RelativeBiasTable(*grid, hh)
        table.params = Tensor(rng.uniform(-1, 1, table.params.shape))
        bias = materialize_relative_bias(grid, SelectionRule.globally(), table)
        cfg_lin = AttentionConfig(nn, cc, hh, scaling)
        site_logits = attention_forward(x, params, cfg_lin, rel_bias=bias).data
        ch = cc // hh
        q = x.data @ params.w_q.data + params.b_q.data
        k = x.data @ params.w_k.data + params.b_k.data
        v = x.data @ params.w_v.data + params.b_v.data
        mixed = np.empty_like(q)
        for h in range(hh):
            cols = slice(h * ch, (h + 1) * ch)
            mixed[:, cols] = (q[:, cols] @ k[:, cols].T / ch) @ v[:, cols] \
                + bias.data[h] @ v[:, cols]
        decomposed = mixed @ params.w_o.data + params.b_o.data
        dev_site = max(dev_site, float(np.abs(site_logits - decomposed).max()))

    return [
        EquivalenceResult("global softmax: conv form vs attention", dev_global, 1e-9),
        EquivalenceResult("local window: conv form vs masked logits", dev_local, 1e-9),
        EquivalenceResult("soft projection identity vs global", dev_soft, 1e-9),
        EquivalenceResult("merged kernel vs two-step scaling", dev_merge, 1e-10),
        EquivalenceResult("bias at logits vs decomposed on values", dev_site, 1e-10),
    ]


def _block_grad_error(variant: ActivationVariant, seed: int) -> float:
    """Finite-difference error of d(sum output)/d(x) for one attention block."""
    rng = np.random.default_rng(seed)
    n, c, h = 6, 8, 2
    params = AttentionParams.random(c, h, rng)
    cfg = AttentionConfig(n, c, h, variant)
    x0 = rng.uniform(-1, 1, (n, c))
    if variant.nonlinearity == "relu":
        # keep raw logits away from the kink so central differences are clean
        for _ in range(50):
            q = x0 @ params.w_q.data + params.b_q.data
            k = x0 @ params.w_k.data + params.b_k.data
            ch = c // h
            ok = True
            for head in range(h):
                cols = slice(head * ch, (head + 1) * ch)
                logits = q[:, cols] @ k[:, cols].T / ch
                ok = ok and bool((np.abs(logits) > 1e-3).all())
            if ok:
                break
            x0 = rng.uniform(-1, 1, (n, c))

    from .tensor import finite_diff_check

    def f(t: Tensor) -> Tensor:
        return sum_all(attention_forward(t, params, cfg))

    return finite_diff_check(f, Tensor(x0), 1e-5)


def _depthwise_grad_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    grid = (2, 2)
    n = 4
    c, h = 8, 2
    params = DepthwiseAttentionParams.random(c, rng)
    table = RelativeBiasTable(*grid, h)
    table.params = Tensor(rng.uniform(-1, 1, table.params.shape))
    cfg = DepthwiseAttentionConfig(c, h, SelectionRule.globally(), table)

    from .tensor import finite_diff_check

    def f(t: Tensor) -> Tensor:
        return sum_all(depthwise_attention_forward(t, params, cfg))

    return finite_diff_check(f, Tensor(rng.uniform(-1, 1, (n, c))), 1e-5)


def grad_check_suite(seed: int = 0) -> list[tuple[str, float]]:
    """(name, max relative error) for every activation variant and depthwise."""
    out = []
    for text in VARIANT_STRINGS:
        variant = ActivationVariant.parse(text)
        out.append((f"attention[{text}]", _block_grad_error(variant, seed)))
    out.append(("depthwise", _depthwise_grad_error(seed)))
    return out
