"""Classifier assembly: DeiT-style columns and a Swin-style hierarchy.

Blocks are pre-norm residual (norm -> mixer -> add, norm -> FFN -> add).
The attention mixer comes in two kinds: the standard query/key/value block
with a pluggable activation variant, and the depth-wise variant that drops
the value path. Hierarchical models tile tokens into non-overlapping windows
(no cyclic shift; the alternating-shift trick changes neither the equations
nor the complexity accounting and is deliberately left out) and merge 2x2
patches between stages.

Config keys for training-time regularizers that this library does not model
(stochastic depth) are accepted and ignored so that published recipes parse.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .activations import ActivationVariant, apply_activation
from .convform import window_partition_map
from .errors import ConfigurationError, DimensionError
from .positional import RelativeBiasTable
from .tensor import (
    Tensor,
    add,
    affine_lastaxis,
    concat,
    expand,
    gelu,
    layernorm,
    linear,
    matmul,
    mean_axis,
    mul,
    reshape,
    take,
    transpose,
)
from .tensor_io import load_tensor, save_tensor

__all__ = ["ModelConfig", "Model", "PRESETS", "preset_config", "build_model",
           "forward_classify", "save_checkpoint", "load_checkpoint",
           "count_model_params"]

CHECKPOINT_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    patch_size: int
    image_size: int
    embed_dims: tuple[int, ...]
    depths: tuple[int, ...]
    heads: tuple[int, ...]
    window: int | None = None
    activation: str = "softmax"
    positional: str = "abs"  # abs | rel
    pooling: str = "global_average"  # class_token | global_average
    mlp_ratio: float = 4.0
    attention_kind: str = "standard"  # standard | depthwise
    num_classes: int = 1000
    layernorm_affine: bool = False
    temperature: float = 1.0
    stochastic_depth: float = 0.0  # accepted, inert

    def __post_init__(self):
        self.embed_dims = tuple(self.embed_dims)
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        if not (len(self.embed_dims) == len(self.depths) == len(self.heads)):
            raise ConfigurationError("embed_dims / depths / heads must align per stage")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"patch {self.patch_size} does not tile image {self.image_size}")
        for a, b in zip(self.embed_dims, self.embed_dims[1:]):
            if b != 2 * a:
                raise ConfigurationError(
                    "hierarchical stages must double channels at each merge")
        if self.hierarchical and self.pooling == "class_token":
            raise ConfigurationError("class token is only valid for one-stage models")
        if self.hierarchical and self.window is None:
            raise ConfigurationError("hierarchical models need a window size")
        if self.hierarchical:
            grid = self.image_size // self.patch_size
            for s in range(len(self.depths)):
                if grid % self.window:
                    raise ConfigurationError(
                        f"{self.window}x{self.window} windows do not tile the "
                        f"stage-{s} grid of {grid}x{grid}")
                if s + 1 < len(self.depths) and grid % 2:
                    raise ConfigurationError(
                        f"stage-{s} grid {grid}x{grid} cannot merge 2x2 patches")
                grid //= 2
        if self.positional not in ("abs", "rel"):
            raise ConfigurationError(f"positional must be abs|rel, got {self.positional!r}")
        if self.pooling not in ("class_token", "global_average"):
            raise ConfigurationError(f"unknown pooling {self.pooling!r}")
        if self.attention_kind not in ("standard", "depthwise"):
            raise ConfigurationError(f"unknown attention kind {self.attention_kind!r}")
        ActivationVariant.parse(self.activation)  # validates the encoding
        for dim, h in zip(self.embed_dims, self.heads):
            if dim % h:
                raise ConfigurationError(f"dim {dim} not divisible by {h} heads")

    @property
    def hierarchical(self) -> bool:
        return len(self.depths) > 1

    @property
    def variant(self) -> ActivationVariant:
        return ActivationVariant.parse(self.activation, self.layernorm_affine)

    def stage_grid(self, stage: int) -> tuple[int, int]:
        g = self.image_size // self.patch_size // (2 ** stage)
        return (g, g)

    def stage_resolutions(self) -> list[int]:
        return [self.stage_grid(s)[0] for s in range(len(self.depths))]

    def to_json(self) -> str:
        payload = {"schema_version": CHECKPOINT_SCHEMA_VERSION, **asdict(self)}
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        payload = json.loads(text)
        version = payload.pop("schema_version", None)
        if version != CHECKPOINT_SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported checkpoint schema {version!r}")
        return cls(**payload)


_PRESET_FIELDS = {
    # name: (patch, image, dims, depths, heads, window, pooling, positional)
    "deit-s": (16, 224, (384,), (12,), (6,), None, "class_token", "abs"),
    "deit-b": (16, 224, (768,), (12,), (12,), None, "class_token", "abs"),
    "swin-t": (4, 224, (96, 192, 384, 768), (2, 2, 6, 2), (3, 6, 12, 24), 7,
               "global_average", "rel"),
    "swin-b": (4, 224, (128, 256, 512, 1024), (2, 2, 18, 2), (4, 8, 16, 32), 7,
               "global_average", "rel"),
    "toy-vit": (8, 32, (64,), (2,), (4,), None, "class_token", "abs"),
}

PRESETS = tuple(_PRESET_FIELDS)


def preset_config(name: str, **overrides) -> ModelConfig:
    """Named architectures; keyword overrides patch any ModelConfig field."""
    if name not in _PRESET_FIELDS:
        raise ConfigurationError(
            f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    patch, image, dims, depths, heads, window, pooling, positional = _PRESET_FIELDS[name]
    base = dict(patch_size=patch, image_size=image, embed_dims=dims, depths=depths,
                heads=heads, window=window, pooling=pooling, positional=positional,
                num_classes=10 if name == "toy-vit" else 1000)
    if overrides.get("attention_kind") == "depthwise" and "positional" not in overrides:
        base["positional"] = "rel"
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# initialization


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within 2 std."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return out


def _param(rng, shape, init="trunc") -> Tensor:
    if init == "trunc":
        data = trunc_normal(rng, shape)
    elif init == "zeros":
        data = np.zeros(shape)
    else:  # ones
        data = np.ones(shape)
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# layers


def _apply_linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    lead = x.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64)) if lead else 1
    flat = reshape(x, (rows, x.shape[-1]))
    return reshape(linear(flat, w, b), lead + (w.shape[1],))


class Linear:
    def __init__(self, rng, in_dim: int, out_dim: int, bias: bool = True):
        self.w = _param(rng, (in_dim, out_dim))
        self.b = _param(rng, (out_dim,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return _apply_linear(x, self.w, self.b)

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNormChannel:
    """Channel-axis layernorm with affine parameters."""

    def __init__(self, rng, dim: int):
        self.gamma = _param(rng, (dim,), "ones")
        self.beta = _param(rng, (dim,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return affine_lastaxis(layernorm(x), self.gamma, self.beta)

    def named_params(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class Mlp:
    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

    def named_params(self, prefix: str):
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")


def _split_heads_batched(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    return reshape(transpose(reshape(t, (b, n, heads, c // heads)), (0, 2, 1, 3)),
                   (b * heads, n, c // heads))


def _merge_heads_batched(t: Tensor, batch: int, heads: int) -> Tensor:
    _, n, ch = t.shape
    return reshape(transpose(reshape(t, (batch, heads, n, ch)), (0, 2, 1, 3)),
                   (batch, n, heads * ch))


def _tile_bias(bias: Tensor, batch: int) -> Tensor:
    h, n, m = bias.shape
    return reshape(expand(reshape(bias, (1, h, n, m)), (batch, h, n, m)),
                   (batch * h, n, m))


class AttentionMixer:
    """Standard multi-head attention on [B, n, C] token groups."""

    def __init__(self, rng, dim: int, heads: int, variant: ActivationVariant,
                 sel_size: int, temperature: float = 1.0):
        self.heads = heads
        self.variant = variant
        self.temperature = temperature
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        self.ln_gamma = self.ln_beta = None
        if variant.normalization == "layernorm" and variant.layernorm_affine:
            self.ln_gamma = _param(rng, (sel_size,), "ones")
            self.ln_beta = _param(rng, (sel_size,), "zeros")

    def __call__(self, x: Tensor, bias: Tensor | None) -> Tensor:
        b, n, c = x.shape
        ch = c // self.heads
        qh = _split_heads_batched(self.q(x), self.heads)
        kh = _split_heads_batched(self.k(x), self.heads)
        vh = _split_heads_batched(self.v(x), self.heads)
        raw = matmul(qh, transpose(kh, (0, 2, 1)))
        bias_full = _tile_bias(bias, b) if bias is not None else None
        att = apply_activation(raw, self.variant, ch, bias=bias_full,
                               tau=self.temperature, gamma=self.ln_gamma,
                               beta=self.ln_beta)
        out = matmul(att, vh)
        return self.proj(_merge_heads_batched(out, b, self.heads))

    def named_params(self, prefix: str):
        for name, lin in (("q", self.q), ("k", self.k), ("v", self.v),
                          ("proj", self.proj)):
            yield from lin.named_params(f"{prefix}.{name}")
        if self.ln_gamma is not None:
            yield f"{prefix}.ln_gamma", self.ln_gamma
            yield f"{prefix}.ln_beta", self.ln_beta


class DepthwiseMixer:
    """Depth-wise attention on [B, n, C]: no value path, bias term mandatory."""

    def __init__(self, rng, dim: int, heads: int):
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, bias: Tensor) -> Tensor:
        b, n, c = x.shape
        qh = _split_heads_batched(self.q(x), self.heads)
        kh = _split_heads_batched(self.k(x), self.heads)
        kbar = mean_axis(kh, 1, keepdims=True)
        term1 = mul(qh, expand(kbar, qh.shape))
        term2 = matmul(_tile_bias(bias, b), kh)
        return self.proj(_merge_heads_batched(add(term1, term2), b, self.heads))

    def named_params(self, prefix: str):
        for name, lin in (("q", self.q), ("k", self.k), ("proj", self.proj)):
            yield from lin.named_params(f"{prefix}.{name}")


class Block:
    """Pre-norm residual block: token mixer plus feed-forward."""

    def __init__(self, rng, cfg: ModelConfig, dim: int, heads: int,
                 grid: tuple[int, int], windowed: bool):
        self.windowed = windowed
        self.grid = grid
        self.window = cfg.window if windowed else None
        self.norm1 = LayerNormChannel(rng, dim)
        self.norm2 = LayerNormChannel(rng, dim)
        self.mlp = Mlp(rng, dim, int(dim * cfg.mlp_ratio))
        self.depthwise = cfg.attention_kind == "depthwise"
        with_cls = cfg.pooling == "class_token" and not cfg.hierarchical

        self.rel_table = None
        if cfg.positional == "rel":
            table_grid = (cfg.window, cfg.window) if windowed else grid
            self.rel_table = RelativeBiasTable(*table_grid, heads,
                                               with_cls=with_cls and not windowed)
            self.rel_table.params = _param(rng, self.rel_table.params.shape)

        sel = cfg.window ** 2 if windowed else grid[0] * grid[1] + int(with_cls)
        if self.depthwise:
            self.mixer = DepthwiseMixer(rng, dim, heads)
        else:
            self.mixer = AttentionMixer(rng, dim, heads, cfg.variant, sel,
                                        cfg.temperature)
        if windowed:
            wins = window_partition_map(*grid, cfg.window, cfg.window)
            self._win_perm = wins.ravel()
            self._win_inv = np.argsort(self._win_perm)
            self._num_windows = wins.shape[0]

    def _bias(self) -> Tensor | None:
        if self.rel_table is None:
            return None
        if self.rel_table.with_cls:
            return self.rel_table.materialize_with_cls()
        return self.rel_table.materialize_full()

    def _mix(self, x: Tensor) -> Tensor:
        if not self.windowed:
            return self.mixer(x, self._bias())
        b, n, c = x.shape
        w2 = self.window * self.window
        parts = reshape(take(x, self._win_perm, axis=1),
                        (b * self._num_windows, w2, c))
        mixed = self.mixer(parts, self._bias())
        mixed = reshape(mixed, (b, n, c))
        return take(mixed, self._win_inv, axis=1)

    def __call__(self, x: Tensor) -> Tensor:
        x = add(x, self._mix(self.norm1(x)))
        return add(x, self.mlp(self.norm2(x)))

    def named_params(self, prefix: str):
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.mixer.named_params(f"{prefix}.attn")
        if self.rel_table is not None:
            yield f"{prefix}.attn.rel_table", self.rel_table.params
        yield from self.norm2.named_params(f"{prefix}.norm2")
        yield from self.mlp.named_params(f"{prefix}.mlp")


class PatchEmbed:
    def __init__(self, rng, patch: int, dim: int, norm: bool):
        self.patch = patch
        self.proj = Linear(rng, patch * patch * 3, dim)
        self.norm = LayerNormChannel(rng, dim) if norm else None

    def __call__(self, images: Tensor) -> Tensor:
        b, c, s, _ = images.shape
        p = self.patch
        g = s // p
        x = reshape(images, (b, c, g, p, g, p))
        x = transpose(x, (0, 2, 4, 3, 5, 1))  # [B, gh, gw, p, p, 3]
        x = reshape(x, (b, g * g, p * p * c))
        x = self.proj(x)
        return self.norm(x) if self.norm is not None else x

    def named_params(self, prefix: str):
        yield from self.proj.named_params(f"{prefix}.proj")
        if self.norm is not None:
            yield from self.norm.named_params(f"{prefix}.norm")


class PatchMerging:
    """Concatenate 2x2 neighbours, normalize, reduce 4C -> 2C."""

    def __init__(self, rng, grid: tuple[int, int], dim: int):
        self.norm = LayerNormChannel(rng, 4 * dim)
        self.reduction = Linear(rng, 4 * dim, 2 * dim, bias=False)
        h, w = grid
        ids = np.arange(h * w).reshape(h, w)
        quads = np.stack([ids[0::2, 0::2], ids[1::2, 0::2],
                          ids[0::2, 1::2], ids[1::2, 1::2]])  # [4, h/2, w/2]
        self._gather = quads.reshape(4, -1).T.ravel()  # token-major, 4 neighbours

    def __call__(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        x = take(x, self._gather, axis=1)  # [B, (n/4)*4, C]
        x = reshape(x, (b, n // 4, 4 * c))
        return self.reduction(self.norm(x))

    def named_params(self, prefix: str):
        yield from self.norm.named_params(f"{prefix}.norm")
        yield from self.reduction.named_params(f"{prefix}.reduction")


# ---------------------------------------------------------------------------
# full models


class Model:
    """A built classifier: patch embed, stages of blocks, pooling, head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.attention_kind == "depthwise" and cfg.positional != "rel":
            # analytic counting of this combination is fine, running it is not
            raise ConfigurationError(
                "cannot build a depth-wise model without relative positional "
                "embedding: the block is linear and fails to train without the "
                "positional term")
        self.config = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        hier = cfg.hierarchical
        self.patch_embed = PatchEmbed(rng, cfg.patch_size, cfg.embed_dims[0],
                                      norm=hier)
        self.cls_token = None
        self.abs_table = None
        grid0 = cfg.stage_grid(0)
        n0 = grid0[0] * grid0[1]
        if cfg.pooling == "class_token":
            self.cls_token = _param(rng, (cfg.embed_dims[0],))
        if cfg.positional == "abs":
            rows = n0 + (1 if self.cls_token is not None else 0)
            self.abs_table = _param(rng, (rows, cfg.embed_dims[0]))

        self.stages: list[list[Block]] = []
        self.merges: list[PatchMerging] = []
        for s, (dim, depth, heads) in enumerate(zip(cfg.embed_dims, cfg.depths,
                                                    cfg.heads)):
            grid = cfg.stage_grid(s)
            blocks = [Block(rng, cfg, dim, heads, grid, windowed=hier)
                      for _ in range(depth)]
            self.stages.append(blocks)
            if s + 1 < len(cfg.depths):
                self.merges.append(PatchMerging(rng, grid, dim))
        self.norm = LayerNormChannel(rng, cfg.embed_dims[-1])
        self.head = Linear(rng, cfg.embed_dims[-1], cfg.num_classes)
        if cfg.stochastic_depth:
            warnings.warn("stochastic_depth is accepted but not modelled; ignoring")

    def forward(self, images: Tensor) -> Tensor:
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != 3 \
                or images.shape[2] != cfg.image_size or images.shape[3] != cfg.image_size:
            raise DimensionError(
                f"expected [B, 3, {cfg.image_size}, {cfg.image_size}] images, "
                f"got {images.shape}")
        b = images.shape[0]
        x = self.patch_embed(images)
        if self.cls_token is not None:
            cls = expand(reshape(self.cls_token, (1, 1, cfg.embed_dims[0])),
                         (b, 1, cfg.embed_dims[0]))
            x = concat([cls, x], axis=1)
        if self.abs_table is not None:
            x = add(x, expand(reshape(self.abs_table, (1,) + self.abs_table.shape),
                              (b,) + self.abs_table.shape))
        for s, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            if s < len(self.merges):
                x = self.merges[s](x)
        x = self.norm(x)
        if self.cls_token is not None:
            feat = reshape(take(x, np.array([0]), axis=1), (b, x.shape[2]))
        else:
            feat = mean_axis(x, 1)
        return self.head(feat)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = list(self.patch_embed.named_params("patch_embed"))
        if self.cls_token is not None:
            out.append(("cls_token", self.cls_token))
        if self.abs_table is not None:
            out.append(("abs_table", self.abs_table))
        for s, blocks in enumerate(self.stages):
            for i, block in enumerate(blocks):
                out.extend(block.named_params(f"stages.{s}.blocks.{i}"))
            if s < len(self.merges):
                out.extend(self.merges[s].named_params(f"stages.{s}.merge"))
        out.extend(self.norm.named_params("norm"))
        out.extend(self.head.named_params("head"))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Deterministically construct a model from its configuration."""
    return Model(cfg, seed=seed)


def forward_classify(model: Model, images: Tensor) -> Tensor:
    """Logits [B, num_classes] for a batch of [B, 3, S, S] images."""
    return model.forward(images)


def count_model_params(model: Model) -> int:
    """Number of learnable scalars, by direct enumeration."""
    return sum(t.size for t in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints: one .ten per parameter plus config.json


def _param_filename(name: str) -> str:
    return name.replace(".", "__") + ".ten"


def save_checkpoint(model: Model, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(model.config.to_json())
    for name, t in model.named_params():
        save_tensor(t, directory / _param_filename(name))


def load_checkpoint(directory, seed: int = 0) -> Model:
    directory = Path(directory)
    cfg = ModelConfig.from_json((directory / "config.json").read_text())
    model = Model(cfg, seed=seed)
    for name, t in model.named_params():
        stored = load_tensor(directory / _param_filename(name))
        if stored.shape != t.shape:
            raise DimensionError(
                f"checkpoint tensor {name} has shape {stored.shape}, "
                f"model expects {t.shape}")
        t.data[...] = stored.data
    return model
