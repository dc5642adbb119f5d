"""Self-attention re-expressed as dynamic 1x1 convolutions.

Per image, the key/value features become a bank of paired kernels: row i of
the key features is a (C_in -> 1) kernel, row i of the value features a
(1 -> C_out) kernel, both tagged with origin location i. A selection rule
decides which pairs each query location uses:

    global           every pair, at every location (plain attention)
    local_window     pairs whose origin lies in the query's window
    soft_projection  a learned location-independent mixture of all pairs
    static_soft      a learnable bank mixed by input-predicted coefficients
                     (the reference dynamic-convolution path, see
                     :func:`dconv_reference`)

``conv_form_attention`` applies the bank location by location: each selected
key kernel projects the query vector to a scalar, the scalar vector passes
through the activation variant, and the value kernels expand the activated
scalars back to C_out, summed over pairs. With the global rule and softmax
this is exactly standard attention computed the convolutional way.

The softmax also nudges selection implicitly: it weights pairs by how close
(in the dot-product/cosine sense) their key kernel is to the query, so
"select then activate" and "activate as soft selection" are the same thing
seen from the two sides of the equivalence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import ActivationVariant, apply_activation
from .attention import AttentionConfig, AttentionParams, _affine, qkv_project
from .errors import ConfigurationError, DimensionError
from .tensor import (
    Tensor,
    add,
    concat,
    expand,
    matmul,
    mean_axis,
    mul,
    reshape,
    scale,
    softmax,
    take,
    transpose,
)
from .tensor_io import load_tensor, save_tensor

__all__ = [
    "KernelBank",
    "SelectionRule",
    "StaticKernelBank",
    "build_kernel_bank",
    "selected_origins",
    "select_kernels",
    "conv_form_attention",
    "conv_form_block",
    "merge_selected_kernels",
    "dconv_reference",
    "ddwconv_reference",
    "save_kernel_bank",
    "load_kernel_bank",
]


@dataclass
class KernelBank:
    """Paired per-location kernels generated from one image's features."""

    key_kernels: Tensor  # [N, C_in], row i: C_in -> 1 kernel from location i
    value_kernels: Tensor  # [N, C_out], row i: 1 -> C_out kernel from location i
    origins: np.ndarray = field(default=None)  # location index per pair

    def __post_init__(self):
        if self.key_kernels.shape[0] != self.value_kernels.shape[0]:
            raise DimensionError(
                f"banks must pair kernels: {self.key_kernels.shape[0]} keys vs "
                f"{self.value_kernels.shape[0]} values")
        if self.origins is None:
            self.origins = np.arange(self.key_kernels.shape[0])

    @property
    def size(self) -> int:
        return self.key_kernels.shape[0]


@dataclass(frozen=True)
class SelectionRule:
    """How a query location fetches kernel pairs from the bank."""

    kind: str  # global | local_window | soft_projection | static_soft
    window: tuple[int, int] | None = None
    grid: tuple[int, int] | None = None
    projection: Tensor | None = None  # [m, N] mixing weights (soft_projection)
    bank_size: int | None = None  # K (static_soft)

    def __post_init__(self):
        if self.kind == "local_window":
            wh, ww = self.window
            gh, gw = self.grid
            if gh % wh or gw % ww:
                raise ConfigurationError(
                    f"{wh}x{ww} windows do not tile a {gh}x{gw} grid")
        elif self.kind == "soft_projection":
            if self.projection is None or self.projection.ndim != 2:
                raise ConfigurationError("soft_projection needs [m, N] weights")
            if not np.isfinite(self.projection.data).all():
                raise ConfigurationError("soft_projection weights must be finite")
        elif self.kind not in ("global", "static_soft"):
            raise ConfigurationError(f"unknown selection rule kind {self.kind!r}")

    @staticmethod
    def globally() -> "SelectionRule":
        return SelectionRule("global")

    @staticmethod
    def local(window_h: int, window_w: int, grid_h: int, grid_w: int) -> "SelectionRule":
        return SelectionRule("local_window", window=(window_h, window_w),
                             grid=(grid_h, grid_w))

    @staticmethod
    def soft(projection: Tensor) -> "SelectionRule":
        return SelectionRule("soft_projection", projection=projection)


def build_kernel_bank(k_feat: Tensor, v_feat: Tensor) -> KernelBank:
    """Turn projected key/value features into a bank of paired kernels."""
    if k_feat.shape[0] != v_feat.shape[0]:
        raise DimensionError(
            f"key features have {k_feat.shape[0]} rows, value features "
            f"{v_feat.shape[0]}; kernels must pair up")
    return KernelBank(k_feat, v_feat)


def window_partition_map(grid_h: int, grid_w: int, window_h: int,
                         window_w: int) -> np.ndarray:
    """[num_windows, wsize]: each window's token indices; all row-major."""
    wins = []
    for r0 in range(0, grid_h, window_h):
        for c0 in range(0, grid_w, window_w):
            rows = np.arange(r0, r0 + window_h)
            cols = np.arange(c0, c0 + window_w)
            wins.append((rows[:, None] * grid_w + cols[None, :]).ravel())
    return np.stack(wins)


def window_index_map(grid_h: int, grid_w: int, window_h: int, window_w: int) -> np.ndarray:
    """[N, n] array: row i lists the origins in location i's window, row-major."""
    wins = window_partition_map(grid_h, grid_w, window_h, window_w)
    out = np.empty((grid_h * grid_w, window_h * window_w), dtype=np.int64)
    for win in wins:
        out[win] = win
    return out


def selected_origins(rule: SelectionRule, bank_size: int, location: int) -> np.ndarray:
    """Origins of the pairs location `location` selects, in origin order."""
    if location >= bank_size or location < 0:
        raise DimensionError(f"location {location} outside bank of {bank_size}")
    if rule.kind == "global":
        return np.arange(bank_size)
    if rule.kind == "local_window":
        gh, gw = rule.grid
        if gh * gw != bank_size:
            raise ConfigurationError(
                f"grid {gh}x{gw} does not cover a bank of {bank_size}")
        return window_index_map(gh, gw, *rule.window)[location]
    raise ConfigurationError(
        f"rule {rule.kind!r} has no per-location origin set")


def select_kernels(bank: KernelBank, rule: SelectionRule, location: int):
    """Fetch the (key, value) kernel pairs location `location` uses.

    Soft projection returns m mixed pairs (the same at every location); the
    hard rules return bank rows in origin order.
    """
    if rule.kind == "soft_projection":
        if rule.projection.shape[1] != bank.size:
            raise DimensionError(
                f"projection mixes {rule.projection.shape[1]} kernels but bank "
                f"holds {bank.size}")
        k_sel = matmul(rule.projection, bank.key_kernels)
        v_sel = matmul(rule.projection, bank.value_kernels)
        return k_sel, v_sel
    if rule.kind == "static_soft":
        raise ConfigurationError(
            "static_soft banks are learnable, not per-image; use dconv_reference")
    idx = selected_origins(rule, bank.size, location)
    return take(bank.key_kernels, idx, axis=0), take(bank.value_kernels, idx, axis=0)


def conv_form_attention(
    q_map: Tensor,
    bank: KernelBank,
    rule: SelectionRule,
    activation: ActivationVariant,
    rel_bias: Tensor | None = None,
    tau: float = 1.0,
) -> Tensor:
    """Apply the bank as two chained dynamic 1x1 convolutions, per location.

    `q_map` is [N, C_in] (one head); `rel_bias`, when given, is [N, n] with
    columns aligned to each location's selected origins. The per-head channel
    count used for activation scaling is C_in.
    """
    n_loc, c_in = q_map.shape
    if bank.key_kernels.shape[1] != c_in:
        raise DimensionError(
            f"query channels {c_in} vs key kernels {bank.key_kernels.shape}")
    rows = []
    for i in range(n_loc):
        k_sel, v_sel = select_kernels(bank, rule, i)
        q_i = take(q_map, np.array([i]), axis=0)  # [1, C_in]
        s = matmul(q_i, transpose(k_sel, (1, 0)))  # [1, n] scalars
        bias_row = None
        if rel_bias is not None:
            if rel_bias.shape != (n_loc, s.shape[1]):
                raise DimensionError(
                    f"bias {rel_bias.shape} misaligned with selection "
                    f"({n_loc}, {s.shape[1]})")
            bias_row = take(rel_bias, np.array([i]), axis=0)
        s = apply_activation(s, activation, c_in, bias=bias_row, tau=tau)
        rows.append(matmul(s, v_sel))  # [1, C_out]
    return concat(rows, axis=0)


def conv_form_block(
    x: Tensor,
    params: AttentionParams,
    cfg: AttentionConfig,
    rule: SelectionRule,
    rel_bias: Tensor | None = None,
) -> Tensor:
    """Whole attention block evaluated through the kernel-bank path.

    Mirrors `attention_forward` head for head: the static convolutions are
    the q/k/v and output projections, the dynamic pair comes from the bank.
    `rel_bias` is [H, N, n] aligned with selected origins.
    """
    q, k, v = qkv_project(x, params)
    heads, ch = cfg.heads, params.head_dim
    outs = []
    for h in range(heads):
        cols = np.arange(h * ch, (h + 1) * ch)
        bank = build_kernel_bank(take(k, cols, axis=1), take(v, cols, axis=1))
        bias_h = None
        if rel_bias is not None:
            bias_h = reshape(take(rel_bias, np.array([h]), axis=0), rel_bias.shape[1:])
        outs.append(conv_form_attention(take(q, cols, axis=1), bank, rule,
                                        cfg.activation, bias_h, cfg.temperature))
    return _affine(concat(outs, axis=1), params.w_o, params.b_o)


def merge_selected_kernels(k_sel: Tensor, v_sel: Tensor, scale_factor: float) -> Tensor:
    """Collapse a kv selection into one C_in x C_out kernel.

    Valid as a replacement for the two-step path only when the activation
    between the convolutions is a pure linear scaling (`scale_factor`).
    """
    if k_sel.shape[0] != v_sel.shape[0]:
        raise DimensionError(
            f"selections must pair up: {k_sel.shape} vs {v_sel.shape}")
    return scale(matmul(transpose(k_sel, (1, 0)), v_sel), scale_factor)


@dataclass
class StaticKernelBank:
    """Learnable kernel prototypes mixed by input-predicted coefficients."""

    kernels: Tensor  # [K, C_in, C_out]
    coeff_w: Tensor  # [C_in, K]
    coeff_b: Tensor  # [K]

    def __post_init__(self):
        if self.kernels.shape[0] < 1:
            raise ConfigurationError("static bank needs at least one kernel")
        k = self.kernels.shape[0]
        if self.coeff_w.shape[1] != k or self.coeff_b.shape != (k,):
            raise DimensionError(
                f"coefficient head must emit {k} values, got "
                f"{self.coeff_w.shape} / {self.coeff_b.shape}")

    @property
    def bank_size(self) -> int:
        return self.kernels.shape[0]


def dconv_coefficients(x: Tensor, bank: StaticKernelBank) -> Tensor:
    """Softmax coefficients [1, K] predicted from the mean-pooled input."""
    pooled = mean_axis(x, 0, keepdims=True)  # [1, C_in]
    return softmax(_affine(pooled, bank.coeff_w, bank.coeff_b), 1.0)


def dconv_reference(x: Tensor, bank: StaticKernelBank) -> Tensor:
    """Dynamic convolution with a static bank: mix prototypes, then apply.

    One kernel per image (predicted from pooled input), shared by all tokens;
    spatial footprint fixed at 1x1 here.
    """
    k, c_in, c_out = bank.kernels.shape
    coeffs = dconv_coefficients(x, bank)  # [1, K]
    flat = reshape(bank.kernels, (k, c_in * c_out))
    combined = reshape(matmul(coeffs, flat), (c_in, c_out))
    return matmul(x, combined)


def ddwconv_reference(x: Tensor, gen_w: Tensor, gen_b: Tensor) -> Tensor:
    """Per-location generated depth-wise 1x1 kernels: o_i = x_i * w(x_i)."""
    if gen_w.shape != (x.shape[1], x.shape[1]) or gen_b.shape != (x.shape[1],):
        raise DimensionError(
            f"generator {gen_w.shape}/{gen_b.shape} does not map {x.shape[1]} "
            "channels to per-channel weights")
    w = _affine(x, gen_w, gen_b)  # dedicated kernel set per location
    return mul(x, w)


# ---------------------------------------------------------------------------
# serialization: .ten pair plus a JSON sidecar for origins and rule metadata


def save_kernel_bank(bank: KernelBank, path_prefix, rule: SelectionRule | None = None) -> None:
    prefix = Path(path_prefix)
    save_tensor(bank.key_kernels, prefix.with_suffix(".keys.ten"))
    save_tensor(bank.value_kernels, prefix.with_suffix(".values.ten"))
    meta = {"origins": bank.origins.tolist()}
    if rule is not None:
        meta["rule"] = {"kind": rule.kind, "window": rule.window, "grid": rule.grid}
    prefix.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_kernel_bank(path_prefix):
    prefix = Path(path_prefix)
    keys = load_tensor(prefix.with_suffix(".keys.ten"))
    values = load_tensor(prefix.with_suffix(".values.ten"))
    meta = json.loads(prefix.with_suffix(".json").read_text())
    bank = KernelBank(keys, values, origins=np.asarray(meta["origins"]))
    rule = None
    if "rule" in meta:
        r = meta["rule"]
        if r["kind"] == "local_window":
            rule = SelectionRule.local(*r["window"], *r["grid"])
        elif r["kind"] == "global":
            rule = SelectionRule.globally()
    return bank, rule
