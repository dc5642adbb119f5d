"""Absolute tables and relative displacement biases.

The relative table stores one learnable cell per (delta row, delta col)
displacement and per head, so materialized bias blocks repeat wherever the
geometry repeats (every local window sees the same block). A class token,
having no grid position, gets three dedicated cells per head: token->cls,
cls->token, and cls->cls.

Bias is always added at the logits site. For the purely linear variants this
equals applying it to the values, since (q k^T s + p) v = q k^T s v + p v;
that decomposed form is kept as a test oracle only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .activations import ActivationVariant
from .convform import SelectionRule, window_index_map
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, add, reshape, take

__all__ = [
    "AbsolutePositionTable",
    "RelativeBiasTable",
    "add_absolute",
    "materialize_relative_bias",
    "bias_application_site",
]


@dataclass
class AbsolutePositionTable:
    """Learnable [N, C] offsets added to token embeddings once."""

    table: Tensor


def add_absolute(x: Tensor, table: AbsolutePositionTable) -> Tensor:
    if x.shape != table.table.shape:
        raise DimensionError(
            f"tokens {x.shape} do not match position table {table.table.shape}")
    return add(x, table.table)


def _displacement_index(grid_h: int, grid_w: int) -> np.ndarray:
    """[N, N] map from (query, key) to the flattened displacement cell."""
    coords = np.stack(np.unravel_index(np.arange(grid_h * grid_w),
                                       (grid_h, grid_w)), axis=1)
    dr = coords[:, None, 0] - coords[None, :, 0] + grid_h - 1
    dc = coords[:, None, 1] - coords[None, :, 1] + grid_w - 1
    return dr * (2 * grid_w - 1) + dc


class RelativeBiasTable:
    """Per-head displacement-indexed bias over an h x w token grid.

    `params` is [heads, cells]; the first (2h-1)(2w-1) cells are displacement
    cells, followed (when `with_cls`) by token->cls, cls->token and cls->cls.
    """

    CLS_CELLS = 3

    def __init__(self, grid_h: int, grid_w: int, heads: int,
                 with_cls: bool = False, params: Tensor | None = None):
        self.grid = (grid_h, grid_w)
        self.heads = heads
        self.with_cls = with_cls
        self.cells = (2 * grid_h - 1) * (2 * grid_w - 1)
        total = self.cells + (self.CLS_CELLS if with_cls else 0)
        if params is None:
            params = Tensor(np.zeros((heads, total)), requires_grad=True)
        if params.shape != (heads, total):
            raise DimensionError(
                f"relative table needs [{heads}, {total}] cells, got {params.shape}")
        self.params = params

    def num_params(self) -> int:
        return self.params.size

    def _grid_cell_index(self) -> np.ndarray:
        return _displacement_index(*self.grid)

    def materialize_full(self) -> Tensor:
        """Bias over all grid tokens: [H, N, N] (class token excluded)."""
        idx = self._grid_cell_index()
        n = idx.shape[0]
        flat = take(self.params, idx.ravel(), axis=1)
        return reshape(flat, (self.heads, n, n))

    def materialize_with_cls(self) -> Tensor:
        """Bias over [cls] + grid tokens: [H, N+1, N+1]."""
        if not self.with_cls:
            raise ConfigurationError("table was built without class-token cells")
        n = self.grid[0] * self.grid[1]
        idx = np.empty((n + 1, n + 1), dtype=np.int64)
        idx[0, 0] = self.cells + 2  # cls -> cls
        idx[0, 1:] = self.cells + 1  # cls attends token
        idx[1:, 0] = self.cells  # token attends cls
        idx[1:, 1:] = self._grid_cell_index()
        flat = take(self.params, idx.ravel(), axis=1)
        return reshape(flat, (self.heads, n + 1, n + 1))


def materialize_relative_bias(grid: tuple[int, int], rule: SelectionRule,
                              table: RelativeBiasTable) -> Tensor:
    """Bias rows aligned with each location's selected origins: [H, N, n].

    For local windows the table may cover either the full grid or just one
    window (displacements inside a window never leave the window-sized
    range). Soft selection rules mix kernels across locations, so a
    displacement has no meaning there; asking for one is an error.
    """
    if rule.kind not in ("global", "local_window"):
        raise ConfigurationError(
            f"relative bias is undefined under the {rule.kind!r} rule; "
            "displacements require per-location origins")
    gh, gw = grid
    n = gh * gw
    if rule.kind == "global":
        if grid != table.grid:
            raise DimensionError(
                f"grid {grid} does not match table grid {table.grid}")
        aligned = table._grid_cell_index()
    elif table.grid == grid:
        origins = window_index_map(gh, gw, *rule.window)
        aligned = np.take_along_axis(table._grid_cell_index(), origins, axis=1)
    elif table.grid == tuple(rule.window):
        local = table._grid_cell_index()  # window-local displacement cells
        aligned = np.empty((n, local.shape[1]), dtype=np.int64)
        from .convform import window_partition_map

        for win_tokens in window_partition_map(gh, gw, *rule.window):
            aligned[win_tokens] = local
    else:
        raise DimensionError(
            f"table grid {table.grid} covers neither the {grid} grid nor the "
            f"{rule.window} window")
    flat = take(table.params, aligned.ravel(), axis=1)
    return reshape(flat, (table.heads, n, aligned.shape[1]))


def bias_application_site(variant: ActivationVariant) -> str:
    """Where the bias may equivalently be applied for this variant.

    Always added to pre-activation logits in this implementation; the
    decomposed bias-times-values form is algebraically equal only when the
    variant is purely linear, and is used as a test oracle there.
    """
    return "values_decomposed" if variant.is_linear else "logits"
