import numpy as np
import pytest

from attnconv.convform import SelectionRule, window_index_map
from attnconv.depthwise import (
    DepthwiseAttentionConfig,
    DepthwiseAttentionParams,
    depthwise_attention_forward,
    depthwise_locality_check,
)
from attnconv.errors import ConfigurationError
from attnconv.positional import RelativeBiasTable
from attnconv.tensor import Tensor, finite_diff_check, sum_all, tensor

from reference import scalar_depthwise_attention


def _table(rng, grid, heads, zero=False):
    table = RelativeBiasTable(*grid, heads)
    if not zero:
        table.params = Tensor(rng.uniform(-0.5, 0.5, table.params.shape))
    return table


def _identity_out(params, c):
    params.w_o = tensor(np.eye(c))
    params.b_o = tensor(np.zeros(c))


class TestForward:
    def test_zero_bias_equal_keys(self, rng):
        """p = 0 and all keys equal k0 collapses to q * k0 per head."""
        c, h = 8, 2
        grid = (2, 2)
        n = 4
        params = DepthwiseAttentionParams.random(c, rng)
        k0 = rng.uniform(-1, 1, c)
        params.w_k = tensor(np.zeros((c, c)))
        params.b_k = tensor(k0)
        _identity_out(params, c)
        cfg = DepthwiseAttentionConfig(c, h, SelectionRule.globally(),
                                       _table(rng, grid, h, zero=True))
        x = rng.uniform(-1, 1, (n, c))
        out = depthwise_attention_forward(tensor(x), params, cfg).data
        q = x @ params.w_q.data + params.b_q.data
        np.testing.assert_allclose(out, q * k0, atol=1e-12)

    def test_zero_query_leaves_positional_term(self, rng):
        c, h = 6, 2
        grid = (1, 3)
        n = 3
        params = DepthwiseAttentionParams.random(c, rng)
        params.w_q = tensor(np.zeros((c, c)))
        params.b_q = tensor(np.zeros(c))
        _identity_out(params, c)
        table = _table(rng, grid, h)
        cfg = DepthwiseAttentionConfig(c, h, SelectionRule.globally(), table)
        x = rng.uniform(-1, 1, (n, c))
        out = depthwise_attention_forward(tensor(x), params, cfg).data
        k = x @ params.w_k.data + params.b_k.data
        bias = table.materialize_full().data
        ch = c // h
        expected = np.empty_like(k)
        for head in range(h):
            cols = slice(head * ch, (head + 1) * ch)
            expected[:, cols] = bias[head] @ k[:, cols]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_against_scalar_loop_oracle_global(self, rng):
        grid = (3, 3)
        n, c, h = 9, 8, 2
        params = DepthwiseAttentionParams.random(c, rng)
        table = _table(rng, grid, h)
        cfg = DepthwiseAttentionConfig(c, h, SelectionRule.globally(), table)
        x = rng.uniform(-1, 1, (n, c))
        got = depthwise_attention_forward(tensor(x), params, cfg).data
        bias = table.materialize_full().data
        selections = [list(range(n)) for _ in range(n)]
        ref = scalar_depthwise_attention(
            x, params.w_q.data.tolist(), params.b_q.data.tolist(),
            params.w_k.data.tolist(), params.b_k.data.tolist(),
            params.w_o.data.tolist(), params.b_o.data.tolist(), h,
            bias.tolist(), selections)
        assert np.abs(got - ref).max() < 1e-10

    def test_against_scalar_loop_oracle_windows(self, rng):
        grid, window = (4, 4), (2, 2)
        n, c, h = 16, 8, 2
        params = DepthwiseAttentionParams.random(c, rng)
        table = RelativeBiasTable(*window, h)
        table.params = Tensor(rng.uniform(-0.5, 0.5, table.params.shape))
        rule = SelectionRule.local(*window, *grid)
        cfg = DepthwiseAttentionConfig(c, h, rule, table)
        x = rng.uniform(-1, 1, (n, c))
        got = depthwise_attention_forward(tensor(x), params, cfg).data
        from attnconv.positional import materialize_relative_bias

        bias = materialize_relative_bias(grid, rule, table).data  # [H, N, w2]
        win = window_index_map(*grid, *window)
        ref = scalar_depthwise_attention(
            x, params.w_q.data.tolist(), params.b_q.data.tolist(),
            params.w_k.data.tolist(), params.b_k.data.tolist(),
            params.w_o.data.tolist(), params.b_o.data.tolist(), h,
            bias.tolist(), [list(w) for w in win])
        assert np.abs(got - ref).max() < 1e-10

    def test_missing_table_is_configuration_error(self, rng):
        with pytest.raises(ConfigurationError, match="without the positional term"):
            DepthwiseAttentionConfig(8, 2, SelectionRule.globally(), None)

    def test_channel_preservation_per_head(self, rng):
        c, h = 12, 3
        params = DepthwiseAttentionParams.random(c, rng)
        cfg = DepthwiseAttentionConfig(c, h, SelectionRule.globally(),
                                       _table(rng, (2, 2), h))
        out = depthwise_attention_forward(tensor(rng.uniform(-1, 1, (4, c))),
                                          params, cfg)
        assert out.shape == (4, c)

    def test_linear_in_query_path(self, rng):
        """Scaling w_q/b_q jointly scales term1 exactly; term2 is unchanged."""
        c, h = 8, 2
        grid = (2, 2)
        params = DepthwiseAttentionParams.random(c, rng)
        _identity_out(params, c)
        table = _table(rng, grid, h)
        cfg = DepthwiseAttentionConfig(c, h, SelectionRule.globally(), table)
        x = rng.uniform(-1, 1, (4, c))
        base = depthwise_attention_forward(tensor(x), params, cfg).data

        zeroq = DepthwiseAttentionParams(
            tensor(np.zeros((c, c))), params.w_k, tensor(np.zeros(c)),
            params.b_k, params.w_o, params.b_o)
        term2 = depthwise_attention_forward(tensor(x), zeroq, cfg).data

        alpha = 3.5
        scaled = DepthwiseAttentionParams(
            tensor(alpha * params.w_q.data), params.w_k,
            tensor(alpha * params.b_q.data), params.b_k, params.w_o, params.b_o)
        got = depthwise_attention_forward(tensor(x), scaled, cfg).data
        np.testing.assert_allclose(got - term2, alpha * (base - term2), atol=1e-10)

    def test_gradients(self, rng):
        c, h = 8, 2
        params = DepthwiseAttentionParams.random(c, rng)
        cfg = DepthwiseAttentionConfig(c, h, SelectionRule.globally(),
                                       _table(rng, (2, 2), h))

        def f(t):
            return sum_all(depthwise_attention_forward(t, params, cfg))

        assert finite_diff_check(f, tensor(rng.uniform(-1, 1, (4, c))), 1e-5) < 1e-4

    def test_gradients_window_rule(self, rng):
        c, h = 8, 2
        grid, window = (2, 2), (1, 2)
        params = DepthwiseAttentionParams.random(c, rng)
        table = RelativeBiasTable(*window, h)
        table.params = Tensor(rng.uniform(-0.5, 0.5, table.params.shape))
        cfg = DepthwiseAttentionConfig(c, h, SelectionRule.local(*window, *grid),
                                       table)

        def f(t):
            return sum_all(depthwise_attention_forward(t, params, cfg))

        assert finite_diff_check(f, tensor(rng.uniform(-1, 1, (4, c))), 1e-5) < 1e-4


class TestLocalityCheck:
    def _cfg(self, rng, grid, window, c=8, h=2):
        params = DepthwiseAttentionParams.random(c, rng)
        table = RelativeBiasTable(*window, h)
        table.params = Tensor(rng.uniform(-0.5, 0.5, table.params.shape))
        rule = SelectionRule.local(*window, *grid)
        return params, DepthwiseAttentionConfig(c, h, rule, table)

    def test_true_by_construction(self, rng):
        params, cfg = self._cfg(rng, (4, 4), (2, 2))
        x = tensor(rng.uniform(-1, 1, (16, 8)))
        assert depthwise_locality_check(x, params, cfg) is True

    def test_global_rule_vacuously_true(self, rng):
        c, h = 8, 2
        params = DepthwiseAttentionParams.random(c, rng)
        cfg = DepthwiseAttentionConfig(c, h, SelectionRule.globally(),
                                       _table(rng, (2, 2), h))
        assert depthwise_locality_check(tensor(rng.uniform(-1, 1, (4, c))),
                                        params, cfg) is True

    def test_detects_off_by_one_window_mutation(self, rng):
        """The perturbation logic flags an implementation whose windows leak."""
        grid, window = (4, 4), (2, 2)
        n, c, h = 16, 8, 2
        params, cfg = self._cfg(rng, grid, window, c, h)
        x = rng.uniform(-1, 1, (n, c))

        def leaky_forward(arr):
            # off-by-one mutant: every location also averages in token (i+1)%n
            q = arr @ params.w_q.data + params.b_q.data
            k = arr @ params.w_k.data + params.b_k.data
            win = window_index_map(*grid, *window)
            from attnconv.positional import materialize_relative_bias

            bias = materialize_relative_bias(grid, cfg.rule, cfg.rel_table).data
            ch = c // h
            mixed = np.empty_like(q)
            for head in range(h):
                cols = slice(head * ch, (head + 1) * ch)
                for i in range(n):
                    sel = list(win[i][:-1]) + [(win[i][-1] + 1) % n]
                    kbar = k[sel][:, cols].mean(axis=0)
                    mixed[i, cols] = q[i, cols] * kbar + bias[head, i] @ k[sel][:, cols]
            return mixed @ params.w_o.data + params.b_o.data

        # the mutant leaks token 6 into the first window {0,1,4,5}, so a
        # perturbation of token 6 must show up outside its true window
        perturb = 6
        base = leaky_forward(x)
        bumped = x.copy()
        bumped[perturb] += 0.731
        out = leaky_forward(bumped)
        win = window_index_map(*grid, *window)
        untouched = np.setdiff1d(np.arange(n), win[perturb])
        assert not np.array_equal(base[untouched], out[untouched])


def test_depthwise_has_fewer_parameters_than_standard():
    from attnconv.complexity import count
    from attnconv.models import preset_config

    for preset in ("toy-vit", "deit-s", "deit-b", "swin-t", "swin-b"):
        std = count(preset_config(preset, positional="rel"))
        dw = count(preset_config(preset, positional="rel",
                                 attention_kind="depthwise"))
        assert dw.params_exact < std.params_exact
