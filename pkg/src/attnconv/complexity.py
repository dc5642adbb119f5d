"""Closed-form FLOPs / parameter / activation accounting.

Conventions (versioned below; chosen to reproduce the published reference
counts and documented where the reference tool's behaviour had to be
inferred):

* ``flops`` counts 2*T*I*O per linear/matmul/conv plus small per-element
  charges for the attention activation (softmax 5, scaling 1, relu 1,
  layernorm 8 per element) and for the depth-wise block's kernel averaging
  and elementwise product (1 per element). Block layernorms, GELU, bias adds
  and residual adds are not charged.
* ``gflops`` reports flops / 2 / 1e9, i.e. multiply-accumulate units. This is
  the convention of the reference numbers this module is validated against
  (a linear layer contributes T*I*O to ``gflops``); the raw 2-FLOPs-per-MAC
  total stays available as ``flops``.
* Attention blocks whose activation is purely linear (none / plain scaling)
  are costed at the cheaper of the two algebraically equal evaluation
  orders: score-first ((q k^T) v) or aggregate-first (q (k^T v)), with the
  relative-bias term counted as a separate bias-times-values product in the
  aggregate-first order. Nonlinear activations force score-first.
* ``acts`` counts output elements of tensor-producing linear/matmul/conv
  operations (projections, attention score maps, aggregation products, patch
  embedding, merging reductions, the classifier head). Normalization,
  activation-function and elementwise outputs are not separate tensors here.
  Parameter counts are exact; parameter totals agree with a runtime
  enumeration of a built model scalar for scalar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .errors import ContractError
from .models import ModelConfig

__all__ = ["CONVENTIONS", "ComplexityRow", "ComplexityReport", "count", "savings"]

CONVENTIONS = {
    "version": 1,
    "flops_per_mac": 2,
    "activation_flops_per_element": {
        "softmax": 5, "none": 0, "scaling": 1, "layernorm": 8, "relu": 1,
    },
    "depthwise_average_flops_per_element": 1,
    "depthwise_product_flops_per_element": 1,
}


@dataclass
class ComplexityRow:
    name: str
    flops: int
    params: int
    acts: int


@dataclass
class ComplexityReport:
    rows: list[ComplexityRow]

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def params_exact(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def acts_exact(self) -> int:
        return sum(r.acts for r in self.rows)

    @property
    def gflops(self) -> float:
        return self.flops / CONVENTIONS["flops_per_mac"] / 1e9

    @property
    def mparams(self) -> float:
        return self.params_exact / 1e6

    @property
    def macts(self) -> float:
        return self.acts_exact / 1e6

    def to_json(self) -> str:
        return json.dumps({
            "conventions_version": CONVENTIONS["version"],
            "gflops": self.gflops,
            "mparams": self.mparams,
            "macts": self.macts,
            "flops_raw": self.flops,
            "params": self.params_exact,
            "acts": self.acts_exact,
            "breakdown": [vars(r) for r in self.rows],
        }, indent=2)

    def to_table(self) -> str:
        width = max(len(r.name) for r in self.rows) + 2
        lines = [f"{'module':<{width}}{'GFLOPs':>10}{'MParams':>10}{'MActs':>10}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}"
                         f"{r.flops / 2 / 1e9:>10.3f}"
                         f"{r.params / 1e6:>10.3f}"
                         f"{r.acts / 1e6:>10.3f}")
        lines.append(f"{'total':<{width}}{self.gflops:>10.3f}"
                     f"{self.mparams:>10.3f}{self.macts:>10.3f}")
        return "\n".join(lines)


def _linear(t: int, i: int, o: int, bias: bool = True):
    return 2 * t * i * o, i * o + (o if bias else 0), t * o


def _attention_block(cfg: ModelConfig, tokens: int, dim: int, heads: int,
                     groups: int, group_size: int, sel_size: int):
    """flops/params/acts of one token-mixer (qkv or qk path plus projection)."""
    variant = cfg.variant
    act_cost = CONVENTIONS["activation_flops_per_element"]
    ch = dim // heads
    attended = groups * group_size  # tokens that take part in mixing
    has_bias = cfg.positional == "rel"
    flops = params = acts = 0

    if cfg.attention_kind == "depthwise":
        f, p, a = _linear(tokens, dim, 2 * dim)
        flops, params, acts = flops + f, params + p, acts + a
        flops += attended * dim * CONVENTIONS["depthwise_average_flops_per_element"]
        flops += attended * dim * CONVENTIONS["depthwise_product_flops_per_element"]
        if has_bias:
            flops += 2 * groups * group_size ** 2 * dim  # bias-times-keys product
            acts += attended * dim
    else:
        f, p, a = _linear(tokens, dim, 3 * dim)
        flops, params, acts = flops + f, params + p, acts + a
        score_map = groups * heads * group_size ** 2
        act_charge = act_cost[variant.normalization] * score_map
        if variant.nonlinearity == "relu":
            act_charge += act_cost["relu"] * score_map
        # score-first order: (q k^T) then (scores v); bias folds into scores
        score_first_flops = 4 * groups * group_size ** 2 * dim + act_charge
        score_first_acts = score_map + attended * dim
        if variant.is_linear:
            # aggregate-first order: q (k^T v), bias applied to values apart
            agg = 4 * groups * heads * group_size * ch ** 2
            agg += act_cost[variant.normalization] * groups * heads * ch ** 2
            agg_acts = groups * heads * ch ** 2 + attended * dim
            if has_bias:
                agg += 2 * groups * group_size ** 2 * dim
                agg_acts += attended * dim
            if agg < score_first_flops:
                score_first_flops, score_first_acts = agg, agg_acts
        flops += score_first_flops
        acts += score_first_acts
        if variant.normalization == "layernorm" and variant.layernorm_affine:
            params += 2 * sel_size

    f, p, a = _linear(tokens, dim, dim)
    flops, params, acts = flops + f, params + p, acts + a
    return flops, params, acts


def _rel_table_params(cfg: ModelConfig, grid: int, heads: int, with_cls: bool) -> int:
    cells = (2 * grid - 1) ** 2 + (3 if with_cls else 0)
    return heads * cells


def count(cfg: ModelConfig, image_size: int | None = None) -> ComplexityReport:
    """Analytic complexity of a configuration, without building the model."""
    if image_size is not None and image_size != cfg.image_size:
        cfg = replace(cfg, image_size=image_size)
    rows: list[ComplexityRow] = []
    hier = cfg.hierarchical
    with_cls = cfg.pooling == "class_token"
    grid0 = cfg.image_size // cfg.patch_size
    patches = grid0 * grid0

    f, p, a = _linear(patches, 3 * cfg.patch_size ** 2, cfg.embed_dims[0])
    if hier:
        p += 2 * cfg.embed_dims[0]  # embedding norm
    rows.append(ComplexityRow("patch_embed", f, p, a))

    extra = 0
    if with_cls:
        extra += cfg.embed_dims[0]
    if cfg.positional == "abs":
        extra += (patches + int(with_cls)) * cfg.embed_dims[0]
    if extra:
        rows.append(ComplexityRow("embeddings", 0, extra, 0))

    for s, (dim, depth, heads) in enumerate(zip(cfg.embed_dims, cfg.depths, cfg.heads)):
        grid = grid0 // (2 ** s)
        tokens = grid * grid + (1 if with_cls else 0)
        if hier:
            groups = (grid // cfg.window) ** 2
            group_size = cfg.window ** 2
            table_grid = cfg.window
        else:
            groups, group_size = 1, tokens
            table_grid = grid
        for b in range(depth):
            flops, params, acts = _attention_block(
                cfg, tokens, dim, heads, groups, group_size, group_size)
            if cfg.positional == "rel":
                params += _rel_table_params(cfg, table_grid, heads,
                                            with_cls and not hier)
            params += 4 * dim  # the two block norms
            hidden = int(dim * cfg.mlp_ratio)
            f1, p1, a1 = _linear(tokens, dim, hidden)
            f2, p2, a2 = _linear(tokens, hidden, dim)
            rows.append(ComplexityRow(f"stage{s}.block{b}",
                                      flops + f1 + f2,
                                      params + p1 + p2,
                                      acts + a1 + a2))
        if s + 1 < len(cfg.depths):
            merged = (grid // 2) ** 2
            f, p, a = _linear(merged, 4 * dim, 2 * dim, bias=False)
            p += 8 * dim  # norm over the concatenated 4C channels
            rows.append(ComplexityRow(f"stage{s}.merge", f, p, a))

    rows.append(ComplexityRow("norm", 0, 2 * cfg.embed_dims[-1], 0))
    f, p, a = _linear(1, cfg.embed_dims[-1], cfg.num_classes)
    rows.append(ComplexityRow("head", f, p, a))
    return ComplexityReport(rows)


def savings(base: ComplexityReport, variant: ComplexityReport) -> tuple[float, float, float]:
    """Percent reduction (flops, params, acts) of `variant` relative to `base`."""
    for metric in ("flops", "params_exact", "acts_exact"):
        if getattr(base, metric) == 0:
            raise ContractError(f"base report has zero {metric}")
    return (
        100.0 * (1.0 - variant.flops / base.flops),
        100.0 * (1.0 - variant.params_exact / base.params_exact),
        100.0 * (1.0 - variant.acts_exact / base.acts_exact),
    )
