"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
complete. The training criterion performs the full five-seed sweep and takes
the bulk of the runtime.
"""

import contextlib
import math

import numpy as np
import pytest

from attnconv.activations import ActivationVariant
from attnconv.attention import AttentionConfig, AttentionParams, attention_forward
from attnconv.complexity import count, savings
from attnconv.convform import (
    SelectionRule,
    conv_form_block,
    merge_selected_kernels,
    window_index_map,
)
from attnconv.data import generate_dataset
from attnconv.depthwise import (
    DepthwiseAttentionConfig,
    DepthwiseAttentionParams,
    depthwise_attention_forward,
)
from attnconv.models import build_model, preset_config, save_checkpoint
from attnconv.positional import RelativeBiasTable, materialize_relative_bias
from attnconv.tensor import (
    GradTape,
    Tensor,
    backward,
    cross_entropy,
    matmul,
    no_grad,
    scale,
    sum_all,
    tensor,
    transpose,
)
from attnconv.train import TrainConfig, ablate, train

from reference import scalar_attention, scalar_depthwise_attention


@contextlib.contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} ({description}): FAIL")
        raise
    print(f"ACCEPTANCE {number} ({description}): PASS")


def _random_shape(rng):
    heads = int(rng.choice([1, 2, 4]))
    c = int(rng.choice(np.arange(8, 33, 4)))
    n = int(rng.integers(4, 65))
    return n, c, heads


def test_criterion_1_global_equivalence():
    with criterion(1, "conv form equals attention, global softmax, 100 cases"):
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(100):
            n, c, h = _random_shape(rng)
            x = tensor(rng.uniform(-1, 1, (n, c)))
            params = AttentionParams.random(c, h, rng)
            cfg = AttentionConfig(n, c, h)
            ref = attention_forward(x, params, cfg).data
            got = conv_form_block(x, params, cfg, SelectionRule.globally()).data
            worst = max(worst, float(np.abs(ref - got).max()))
        assert worst < 1e-9, f"max deviation {worst:.3e}"


def test_criterion_2_local_rule_equivalence():
    with criterion(2, "windowed conv form equals masked attention; exact locality"):
        rng = np.random.default_rng(202)
        worst = 0.0
        for grid, window in [((4, 4), (2, 2)), ((2, 4), (2, 2)), ((6, 6), (2, 3)),
                             ((4, 4), (4, 4))]:
            n = grid[0] * grid[1]
            c, h = 16, 2
            x = rng.uniform(-1, 1, (n, c))
            params = AttentionParams.random(c, h, rng)
            cfg = AttentionConfig(n, c, h)
            rule = SelectionRule.local(*window, *grid)
            got = conv_form_block(tensor(x), params, cfg, rule).data
            win = window_index_map(*grid, *window)
            mask = [[j in set(win[i]) for j in range(n)] for i in range(n)]
            ref = scalar_attention(
                x, params.w_q.data.tolist(), params.b_q.data.tolist(),
                params.w_k.data.tolist(), params.b_k.data.tolist(),
                params.w_v.data.tolist(), params.b_v.data.tolist(),
                params.w_o.data.tolist(), params.b_o.data.tolist(), h, mask=mask)
            worst = max(worst, float(np.abs(got - ref).max()))

            # out-of-window perturbation leaves other windows bitwise intact
            bumped = x.copy()
            bumped[0] += 0.917
            out = conv_form_block(tensor(bumped), params, cfg, rule).data
            base = got
            outside = np.setdiff1d(np.arange(n), win[0])
            assert np.array_equal(base[outside], out[outside]), \
                "out-of-window perturbation leaked"
        assert worst < 1e-9, f"max deviation {worst:.3e}"


def test_criterion_3_kernel_merge_identity():
    with criterion(3, "merged kernel equals two-step path under scaling, 100 cases"):
        rng = np.random.default_rng(303)
        worst = 0.0
        for _ in range(100):
            n, c, _ = _random_shape(rng)
            k_sel = tensor(rng.uniform(-1, 1, (n, c)))
            v_sel = tensor(rng.uniform(-1, 1, (n, c)))
            q = tensor(rng.uniform(-1, 1, (5, c)))
            g = merge_selected_kernels(k_sel, v_sel, 1.0 / c)
            one = matmul(q, g).data
            two = matmul(scale(matmul(q, transpose(k_sel, (1, 0))), 1.0 / c),
                         v_sel).data
            worst = max(worst, float(np.abs(one - two).max()))
        assert worst < 1e-10, f"max deviation {worst:.3e}"


def test_criterion_4_bias_site_identity():
    with criterion(4, "logits-site bias equals decomposed form, linear variants"):
        rng = np.random.default_rng(404)
        worst = 0.0
        for text in ("scaling", "none"):
            for _ in range(25):
                gh, gw = int(rng.integers(2, 5)), int(rng.integers(2, 5))
                n = gh * gw
                c, h = 8, 2
                ch = c // h
                x = rng.uniform(-1, 1, (n, c))
                params = AttentionParams.random(c, h, rng)
                cfg = AttentionConfig(n, c, h, ActivationVariant.parse(text))
                table = RelativeBiasTable(gh, gw, h)
                table.params = Tensor(rng.uniform(-1, 1, table.params.shape))
                bias = materialize_relative_bias((gh, gw),
                                                 SelectionRule.globally(), table)
                site = attention_forward(tensor(x), params, cfg,
                                         rel_bias=bias).data
                q = x @ params.w_q.data + params.b_q.data
                k = x @ params.w_k.data + params.b_k.data
                v = x @ params.w_v.data + params.b_v.data
                denom = ch if text == "scaling" else 1.0
                mixed = np.empty_like(q)
                for head in range(h):
                    cols = slice(head * ch, (head + 1) * ch)
                    mixed[:, cols] = (q[:, cols] @ k[:, cols].T / denom) @ v[:, cols] \
                        + bias.data[head] @ v[:, cols]
                decomposed = mixed @ params.w_o.data + params.b_o.data
                worst = max(worst, float(np.abs(site - decomposed).max()))
        assert worst < 1e-10, f"max deviation {worst:.3e}"


def test_criterion_5_depthwise_oracle():
    with criterion(5, "depth-wise attention equals scalar-loop form, 100 cases"):
        rng = np.random.default_rng(505)
        worst = 0.0
        for case in range(100):
            gh, gw = int(rng.integers(2, 5)), int(rng.integers(2, 5))
            n = gh * gw
            h = int(rng.choice([1, 2]))
            c = int(rng.choice([4, 8, 12]))
            params = DepthwiseAttentionParams.random(c, rng)
            table = RelativeBiasTable(gh, gw, h)
            table.params = Tensor(rng.uniform(-0.5, 0.5, table.params.shape))
            cfg = DepthwiseAttentionConfig(c, h, SelectionRule.globally(), table)
            x = rng.uniform(-1, 1, (n, c))
            got = depthwise_attention_forward(tensor(x), params, cfg).data
            ref = scalar_depthwise_attention(
                x, params.w_q.data.tolist(), params.b_q.data.tolist(),
                params.w_k.data.tolist(), params.b_k.data.tolist(),
                params.w_o.data.tolist(), params.b_o.data.tolist(), h,
                table.materialize_full().data.tolist(),
                [list(range(n))] * n)
            worst = max(worst, float(np.abs(got - ref).max()))
        assert worst < 1e-10, f"max deviation {worst:.3e}"


def _attention_x_grad_error(variant_text, rng):
    from attnconv.tensor import finite_diff_check

    variant = ActivationVariant.parse(variant_text)
    n, c, h = 6, 8, 2
    params = AttentionParams.random(c, h, rng)
    cfg = AttentionConfig(n, c, h, variant)
    x0 = rng.uniform(-1, 1, (n, c))
    if variant.nonlinearity == "relu":
        ch = c // h
        for _ in range(200):
            q = x0 @ params.w_q.data + params.b_q.data
            k = x0 @ params.w_k.data + params.b_k.data
            if all((np.abs(q[:, i * ch:(i + 1) * ch] @ k[:, i * ch:(i + 1) * ch].T / ch)
                    > 1e-3).all() for i in range(h)):
                break
            x0 = rng.uniform(-1, 1, (n, c))

    def f(t):
        return sum_all(attention_forward(t, params, cfg))

    return finite_diff_check(f, tensor(x0), 1e-5)


def _model_param_grad_error(model, images, labels, coords_target=200, step=1e-5):
    """Central-difference check of d(loss)/d(theta) on sampled coordinates."""
    params = model.parameters()
    model.zero_grad()
    with GradTape():
        loss = cross_entropy(model.forward(images), labels, 0.0)
        backward(loss)

    def loss_value():
        with no_grad():
            return cross_entropy(model.forward(images), labels, 0.0).item()

    rng = np.random.default_rng(606)
    sizes = np.array([p.size for p in params])
    probs = sizes / sizes.sum()
    worst = 0.0
    for _ in range(coords_target):
        pi = int(rng.choice(len(params), p=probs))
        p = params[pi]
        ci = int(rng.integers(p.size))
        flat = p.data.reshape(-1)
        orig = flat[ci]
        flat[ci] = orig + step
        hi = loss_value()
        flat[ci] = orig - step
        lo = loss_value()
        flat[ci] = orig
        fd = (hi - lo) / (2 * step)
        analytic = p.grad.reshape(-1)[ci]
        worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return worst


def test_criterion_6_gradient_suite():
    with criterion(6, "finite-difference gradients: variants, depthwise, toy model"):
        rng = np.random.default_rng(66)
        for text in ("softmax", "none", "scaling", "scaling+relu", "layernorm",
                     "layernorm+relu"):
            err = _attention_x_grad_error(text, rng)
            assert err < 1e-4, f"attention[{text}] grad error {err:.3e}"

        from attnconv.tensor import finite_diff_check

        params = DepthwiseAttentionParams.random(8, rng)
        table = RelativeBiasTable(2, 2, 2)
        table.params = Tensor(rng.uniform(-0.5, 0.5, table.params.shape))
        cfg = DepthwiseAttentionConfig(8, 2, SelectionRule.globally(), table)
        err = finite_diff_check(
            lambda t: sum_all(depthwise_attention_forward(t, params, cfg)),
            tensor(rng.uniform(-1, 1, (4, 8))), 1e-5)
        assert err < 1e-4, f"depthwise grad error {err:.3e}"

        model = build_model(preset_config("toy-vit"), seed=0)
        images = tensor(rng.uniform(-1, 1, (2, 3, 32, 32)))
        labels = np.array([3, 7])
        err = _model_param_grad_error(model, images, labels, coords_target=200)
        assert err < 1e-4, f"toy model grad error {err:.3e}"


TABLE_PARAMS = [
    ("deit-s", dict(activation="softmax", positional="abs"), 22.051),
    ("deit-s", dict(activation="softmax", positional="rel"), 22.028),
    ("deit-s", dict(activation="scaling", positional="abs",
                    attention_kind="depthwise"), 20.277),
    ("deit-b", dict(activation="softmax", positional="abs"), 86.568),
    ("swin-t", dict(activation="softmax"), 28.288),
    ("swin-t", dict(activation="scaling", attention_kind="depthwise"), 26.850),
    ("swin-b", dict(activation="softmax"), 87.768),
    ("swin-b", dict(activation="scaling", attention_kind="depthwise"), 80.777),
]

TABLE_GFLOPS = [
    ("deit-s", dict(activation="softmax", positional="abs"), 4.608),
    ("deit-s", dict(activation="scaling", positional="abs"), 4.366),
    ("deit-s", dict(activation="scaling", positional="abs",
                    attention_kind="depthwise"), 3.902),
    ("deit-s", dict(activation="softmax", positional="rel"), 4.608),
    ("deit-s", dict(activation="scaling", positional="rel"), 4.543),
    ("deit-s", dict(activation="scaling", positional="rel",
                    attention_kind="depthwise"), 4.079),
    ("deit-b", dict(activation="softmax", positional="abs"), 17.582),
    ("deit-b", dict(activation="softmax", positional="rel"), 17.582),
    ("deit-b", dict(activation="scaling", positional="rel",
                    attention_kind="depthwise"), 15.830),
    ("swin-t", dict(activation="softmax"), 4.508),
    ("swin-t", dict(activation="scaling"), 4.508),
    ("swin-t", dict(activation="scaling", attention_kind="depthwise"), 4.141),
    ("swin-b", dict(activation="softmax"), 15.467),
    ("swin-b", dict(activation="scaling"), 15.468),
    ("swin-b", dict(activation="scaling", attention_kind="depthwise"), 14.192),
]

TABLE_ACTS = [
    ("deit-s", dict(activation="softmax", positional="abs"), 11.947),
    ("deit-s", dict(activation="scaling", positional="abs"), 9.448),
    ("swin-t", dict(activation="softmax"), 17.054),
]


def test_criterion_7_complexity_reproduction():
    with criterion(7, "published complexity table: params 0.5%, GFLOPs 2%, acts 5%"):
        failures = []
        for preset, kw, expected in TABLE_PARAMS:
            got = count(preset_config(preset, **kw)).mparams
            if abs(got - expected) / expected >= 0.005:
                failures.append(f"params {preset} {kw}: {got:.3f} vs {expected}")
        for preset, kw, expected in TABLE_GFLOPS:
            got = count(preset_config(preset, **kw)).gflops
            if abs(got - expected) / expected >= 0.02:
                failures.append(f"gflops {preset} {kw}: {got:.3f} vs {expected}")
        for preset, kw, expected in TABLE_ACTS:
            got = count(preset_config(preset, **kw)).macts
            if abs(got - expected) / expected >= 0.05:
                failures.append(f"acts {preset} {kw}: {got:.3f} vs {expected}")

        flops_savings, param_savings = [], []
        for preset in ("deit-s", "deit-b", "swin-t", "swin-b"):
            base = count(preset_config(preset, activation="softmax",
                                       positional="rel"))
            dw = count(preset_config(preset, activation="scaling",
                                     positional="rel", attention_kind="depthwise"))
            f, p, _ = savings(base, dw)
            flops_savings.append(f)
            param_savings.append(p)
        if abs(np.mean(flops_savings) - 10.0) > 1.5:
            failures.append(f"mean flops saving {np.mean(flops_savings):.2f}% "
                            "outside 10% +- 1.5pp")
        if abs(np.mean(param_savings) - 8.0) > 1.5:
            failures.append(f"mean param saving {np.mean(param_savings):.2f}% "
                            "outside 8% +- 1.5pp")
        assert not failures, "; ".join(failures)


@pytest.fixture(scope="module")
def toy_datasets():
    train_ds = generate_dataset(512, 32, 10, seed=0)
    val_ds = generate_dataset(128, 32, 10, seed=1, split="val")
    return train_ds, val_ds


@pytest.fixture(scope="module")
def five_seed_sweep(toy_datasets):
    """5 seeds x {softmax, scaling+relu} x 50 epochs on the seeded toy set."""
    train_ds, val_ds = toy_datasets
    base = preset_config("toy-vit")
    sweeps = {}
    for seed in range(5):
        cfg = TrainConfig(epochs=50, batch_size=64, seed=seed)
        sweeps[seed] = ablate(["softmax", "scaling+relu"], train_ds, cfg, val_ds,
                              base_config=base, model_seed=seed)
    return sweeps


def test_criterion_8_toy_training(five_seed_sweep):
    with criterion(8, "toy training: accuracy thresholds and convergence order"):
        logs0 = five_seed_sweep[0]
        for variant in ("softmax", "scaling+relu"):
            best_train = max(r.train_acc for r in logs0[variant].records)
            best_val = max(r.val_acc for r in logs0[variant].records)
            assert best_train > 0.90, f"{variant} train acc {best_train:.3f}"
            assert best_val > 0.60, f"{variant} val acc {best_val:.3f}"

        wins = 0
        for seed, logs in five_seed_sweep.items():
            soft = [r.train_loss for r in logs["softmax"].records]
            fast = [r.train_loss for r in logs["scaling+relu"].records]
            frac = np.mean([f <= s for f, s in zip(fast, soft)])
            wins += frac >= 0.60
        assert wins >= 3, f"scaling+relu led in only {wins}/5 seeds"


def test_criterion_9_determinism(toy_datasets, tmp_path):
    with criterion(9, "identical seeds give bitwise-identical logs and checkpoints"):
        train_ds, val_ds = toy_datasets
        results = []
        for run in range(2):
            model = build_model(preset_config("toy-vit"), seed=11)
            cfg = TrainConfig(epochs=3, batch_size=64, seed=11)
            log = train(model, train_ds, cfg, val_ds, variant="softmax")
            out = tmp_path / f"run{run}"
            save_checkpoint(model, out)
            blobs = {f.name: f.read_bytes() for f in out.iterdir()
                     if f.suffix == ".ten"}
            results.append((log, blobs))
        (log_a, ckpt_a), (log_b, ckpt_b) = results
        assert log_a.equals(log_b), "train logs differ between identical runs"
        assert log_a.to_csv() == log_b.to_csv()
        assert ckpt_a.keys() == ckpt_b.keys()
        for name in ckpt_a:
            assert ckpt_a[name] == ckpt_b[name], f"checkpoint tensor {name} differs"
