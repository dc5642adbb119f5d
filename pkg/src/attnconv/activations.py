"""Attention activation variants: the normalization x non-linearity grid.

A variant replaces the scaled softmax between the two dynamic convolutions.
Given raw query-key logits (last axis = selected-kernel index, length n) the
pipeline per variant is, with c_h the per-head channel count and p an
optional bias aligned with the kernel axis:

    softmax          softmax((logits / sqrt(c_h) + p) / tau)
    none             logits + p
    scaling[+relu]   [relu](logits / c_h + p)
    layernorm[+relu] [relu](LN(logits + p) [* gamma + beta])

Softmax keeps the sqrt(c_h) scale of standard attention; the scaling variant
divides by c_h itself, and layernorm standardizes the kernel axis (it is
scale-invariant, so no constant factor is applied first). The bias always
enters before the non-linear step, which is what makes the logits-site and
decomposed-site applications agree for the purely linear variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigurationError, ContractError
from .tensor import Tensor, add, expand, layernorm, mul, relu, scale, softmax

NORMALIZATIONS = ("softmax", "none", "scaling", "layernorm")
NONLINEARITIES = ("none", "relu")

#: The six variant encodings accepted by configs and the CLI.
VARIANT_STRINGS = (
    "softmax",
    "none",
    "scaling",
    "scaling+relu",
    "layernorm",
    "layernorm+relu",
)

LAYERNORM_EPS = 1e-5


@dataclass(frozen=True)
class ActivationVariant:
    normalization: str
    nonlinearity: str = "none"
    layernorm_affine: bool = True

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ConfigurationError(
                f"unknown normalization {self.normalization!r}; one of {NORMALIZATIONS}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigurationError(
                f"unknown nonlinearity {self.nonlinearity!r}; one of {NONLINEARITIES}")
        if self.normalization == "softmax" and self.nonlinearity != "none":
            raise ConfigurationError(
                "softmax already supplies the non-linearity; combine it with nothing")

    @property
    def is_linear(self) -> bool:
        """True when the variant is a purely linear map of the logits."""
        return self.normalization in ("none", "scaling") and self.nonlinearity == "none"

    def encode(self) -> str:
        if self.nonlinearity == "relu":
            return f"{self.normalization}+relu"
        return self.normalization

    @classmethod
    def parse(cls, text: str, layernorm_affine: bool = True) -> "ActivationVariant":
        text = text.strip().lower()
        if text not in VARIANT_STRINGS:
            raise ConfigurationError(
                f"unknown activation variant {text!r}; valid: {', '.join(VARIANT_STRINGS)}")
        norm, _, nonlin = text.partition("+")
        return cls(norm, nonlin or "none", layernorm_affine)


def apply_activation(
    logits: Tensor,
    variant: ActivationVariant,
    c_h: int,
    *,
    bias: Tensor | None = None,
    tau: float = 1.0,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
) -> Tensor:
    """Apply a variant to raw logits whose last axis indexes selected kernels.

    `bias` must match the logits shape; `gamma`/`beta` are last-axis vectors
    used only by the affine layernorm variant.
    """
    if c_h < 1:
        raise ContractError(f"per-head channel count must be positive, got {c_h}")
    norm = variant.normalization
    if norm == "softmax":
        z = scale(logits, 1.0 / math.sqrt(c_h))
        if bias is not None:
            z = add(z, bias)
        out = softmax(z, tau)
    elif norm == "none":
        out = add(logits, bias) if bias is not None else logits
    elif norm == "scaling":
        out = scale(logits, 1.0 / c_h)
        if bias is not None:
            out = add(out, bias)
    else:  # layernorm
        z = add(logits, bias) if bias is not None else logits
        out = layernorm(z, LAYERNORM_EPS)
        if variant.layernorm_affine and gamma is not None:
            out = mul(out, expand(gamma, out.shape))
        if variant.layernorm_affine and beta is not None:
            out = add(out, expand(beta, out.shape))
    if variant.nonlinearity == "relu":
        out = relu(out)
    return out
