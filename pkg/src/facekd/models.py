"""Toy teacher (windowed-attention transformer with adaptable prompts),
toy convolutional student, and the additive-angular-margin classifier head.

Teacher and student are sized so their final feature grids match, which the
alignment losses rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine as E
from .engine import (ContractError, ParamRegistry, ShapeError, Tensor,
                     concat, conv2d, gather, l2_normalize_rows, layer_norm,
                     log_softmax_rows, matmul, mul, relu, reshape, roll,
                     softmax_rows, stack, tmean, transpose, tsum)


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a (1, ...) tensor n times along axis 0, differentiably."""
    data = np.broadcast_to(x.data, (n,) + x.shape[1:])

    def backward(g):
        x._accumulate(g.sum(axis=0, keepdims=True))

    return E._result(data.copy(), (x,), backward)


@dataclass
class PatchSpec:
    image_h: int
    image_w: int
    patch_h: int
    patch_w: int
    dim: int

    def __post_init__(self):
        if self.image_h % self.patch_h or self.image_w % self.patch_w:
            raise ShapeError(
                f"image {self.image_h}x{self.image_w} not divisible by "
                f"patch {self.patch_h}x{self.patch_w}"
            )

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_h

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_w

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class TeacherConfig:
    image_size: int = 32
    patch_size: int = 4
    dim: int = 32
    layers: int = 4
    window: int = 4
    heads: int = 2
    prompts: int = 25
    keep_final_prompts: bool = False
    frozen_backbone: bool = True
    merge_after: tuple = (1,)  # patch-merge after these layer indices
    num_classes: int = 20
    mlp_ratio: int = 2

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(self.image_size, self.image_size,
                         self.patch_size, self.patch_size, self.dim)

    @property
    def final_grid(self) -> int:
        g = self.image_size // self.patch_size
        return g // (2 ** len(self.merge_after))


@dataclass
class StudentConfig:
    image_size: int = 32
    dim: int = 32
    strides: tuple = (2, 2, 2)
    kernel: int = 3
    num_classes: int = 20

    @property
    def final_grid(self) -> int:
        g = self.image_size
        for s in self.strides:
            g //= s
        return g


@dataclass
class ArcFaceConfig:
    scale: float = 64.0
    margin: float = 0.5
    num_classes: int = 20

    def __post_init__(self):
        if self.scale <= 0:
            raise ContractError(f"scale must be positive, got {self.scale}")
        if not 0 <= self.margin < math.pi / 2:
            raise ContractError(f"margin must be in [0, pi/2), got {self.margin}")


def _normal(rng, *shape, scale=0.02):
    return rng.standard_normal(shape) * scale


def _window_bias_index(win: int, prompts: int) -> np.ndarray:
    """Index matrix into the per-layer bias table for one window.

    Patch-patch pairs index the (2w-1)^2 relative-offset entries; any pair
    involving a prompt token shares the table's final entry.
    """
    n = win * win
    coords = np.array([(r, c) for r in range(win) for c in range(win)])
    rel = coords[:, None, :] - coords[None, :, :] + (win - 1)
    idx_pp = rel[:, :, 0] * (2 * win - 1) + rel[:, :, 1]
    total = n + prompts
    idx = np.full((total, total), (2 * win - 1) ** 2, dtype=np.int64)
    idx[:n, :n] = idx_pp
    return idx


class PromptBank:
    """Per-layer learnable prompt tokens, fresh parameters for each layer."""

    def __init__(self, layers: int, prompts: int, dim: int, rng,
                 registry: Optional[ParamRegistry] = None):
        self.layers = layers
        self.prompts = prompts
        self.dim = dim
        self.registry = registry if registry is not None else ParamRegistry()
        self.tokens: list[Optional[Tensor]] = []
        for i in range(layers):
            if prompts > 0:
                t = self.registry.register(
                    f"prompt{i}", rng.standard_normal((prompts, dim)) * 0.02,
                    trainable=True,
                )
            else:
                t = None
            self.tokens.append(t)


class Teacher:
    """Windowed-attention transformer backbone with optional prompts."""

    def __init__(self, config: TeacherConfig, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        spec = config.patch_spec
        d = config.dim
        reg = ParamRegistry()
        trainable = not config.frozen_backbone
        patch_dim = 3 * config.patch_size * config.patch_size

        def p(name, value):
            return reg.register(name, value, trainable=trainable)

        p("patch_embed.w", _normal(rng, patch_dim, d, scale=1 / math.sqrt(patch_dim)))
        p("patch_embed.b", np.zeros(d))
        hidden = d * config.mlp_ratio
        for i in range(config.layers):
            pre = f"layer{i}."
            p(pre + "ln1.gamma", np.ones(d))
            p(pre + "ln1.beta", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                p(pre + "attn." + w, _normal(rng, d, d, scale=1 / math.sqrt(d)))
            nbias = (2 * config.window - 1) ** 2 + 1  # +1: prompt pairs
            p(pre + "attn.bias", np.zeros((nbias, 1)))
            p(pre + "ln2.gamma", np.ones(d))
            p(pre + "ln2.beta", np.zeros(d))
            p(pre + "mlp.w1", _normal(rng, d, hidden, scale=1 / math.sqrt(d)))
            p(pre + "mlp.b1", np.zeros(hidden))
            p(pre + "mlp.w2", _normal(rng, hidden, d, scale=1 / math.sqrt(hidden)))
            p(pre + "mlp.b2", np.zeros(d))
        for j, _ in enumerate(config.merge_after):
            p(f"merge{j}.w", _normal(rng, 4 * d, d, scale=1 / math.sqrt(4 * d)))
        p("head.w", _normal(rng, d, d, scale=1 / math.sqrt(d)))
        p("head.b", np.zeros(d))
        p("head.classes", _normal(rng, config.num_classes, d, scale=1.0))
        self.registry = reg
        self.prompt_bank = PromptBank(config.layers, config.prompts, d, rng)

    @property
    def backbone_names(self) -> list[str]:
        return self.registry.names()

    def patch_embed(self, image: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, m, d) raster-order patch tokens."""
        cfg = self.config
        spec = cfg.patch_spec
        b = image.shape[0]
        ph = pw = cfg.patch_size
        x = reshape(image, (b, 3, spec.grid_h, ph, spec.grid_w, pw))
        x = transpose(x, (0, 2, 4, 1, 3, 5))
        x = reshape(x, (b, spec.num_patches, 3 * ph * pw))
        return matmul(x, self.registry["patch_embed.w"]) + self.registry["patch_embed.b"]

    def _window_attention(self, tokens: Tensor, layer: int, grid: int,
                          prompts: Optional[Tensor]):
        """One (shifted-)window attention sublayer over (B, grid*grid, d).

        Returns updated patch tokens and, when prompts are given, the
        window-averaged prompt outputs.
        """
        cfg = self.config
        d = cfg.dim
        heads = cfg.heads
        dh = d // heads
        b = tokens.shape[0]
        win = min(cfg.window, grid)
        if grid % win:
            raise ShapeError(f"grid {grid} not divisible into windows of {win}")
        shift = (win // 2) if (layer % 2 == 1 and win < grid) else 0
        t = prompts.shape[0] if prompts is not None else 0
        reg = self.registry

        x = reshape(tokens, (b, grid, grid, d))
        if shift:
            x = roll(x, (-shift, -shift), axis=(1, 2))
        nwin = (grid // win) ** 2
        x = reshape(x, (b, grid // win, win, grid // win, win, d))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        x = reshape(x, (b * nwin, win * win, d))
        if prompts is not None:
            pt = broadcast_rows(reshape(prompts, (1, t, d)), b * nwin)
            x = concat([x, pt], axis=1)
        ntok = win * win + t

        pre = f"layer{layer}.attn."
        q = matmul(x, reg[pre + "wq"])
        k = matmul(x, reg[pre + "wk"])
        v = matmul(x, reg[pre + "wv"])

        def heads_split(z):
            z = reshape(z, (b * nwin, ntok, heads, dh))
            return transpose(z, (0, 2, 1, 3))

        q, k, v = heads_split(q), heads_split(k), heads_split(v)
        logits = matmul(q, transpose(k, (0, 1, 3, 2))) * Tensor(1.0 / math.sqrt(dh))
        bias_idx = _window_bias_index(win, t)
        bias = reshape(gather(reg[pre + "bias"], bias_idx), (ntok, ntok))
        logits = logits + bias
        attn = softmax_rows(logits)
        out = matmul(attn, v)
        out = transpose(out, (0, 2, 1, 3))
        out = reshape(out, (b * nwin, ntok, d))
        out = matmul(out, reg[pre + "wo"])

        patch_out = out[:, :win * win, :]
        patch_out = reshape(patch_out, (b, grid // win, grid // win, win, win, d))
        patch_out = transpose(patch_out, (0, 1, 3, 2, 4, 5))
        patch_out = reshape(patch_out, (b, grid, grid, d))
        if shift:
            patch_out = roll(patch_out, (shift, shift), axis=(1, 2))
        patch_out = reshape(patch_out, (b, grid * grid, d))

        prompt_out = None
        if prompts is not None:
            po = out[:, win * win:, :]
            po = reshape(po, (b, nwin, t, d))
            prompt_out = tmean(po, axis=1)
        return patch_out, prompt_out

    def _basic_layer(self, tokens: Tensor, layer: int, grid: int,
                     prompts: Optional[Tensor]):
        """Pre-norm attention + MLP block; prompts share the MLP weights."""
        reg = self.registry
        pre = f"layer{layer}."
        b = tokens.shape[0]
        t = prompts.shape[0] if prompts is not None else 0

        full = tokens
        if prompts is not None:
            full = concat([tokens, broadcast_rows(
                reshape(prompts, (1, t, self.config.dim)), b)], axis=1)
        normed = layer_norm(full, reg[pre + "ln1.gamma"], reg[pre + "ln1.beta"])
        n_patch = tokens.shape[1]
        patch_in = normed[:, :n_patch, :]
        prompt_in = None
        if prompts is not None:
            # prompt inputs are identical across the batch; use the first row
            prompt_in = reshape(normed[0:1, n_patch:, :], (t, self.config.dim))
        attn_patch, attn_prompt = self._window_attention(
            patch_in, layer, grid, prompt_in
        )
        patch = tokens + attn_patch
        out_prompt = None
        if prompts is not None:
            resid = broadcast_rows(reshape(prompts, (1, t, self.config.dim)), b)
            out_prompt = resid + attn_prompt

        def mlp(z):
            h = layer_norm(z, reg[pre + "ln2.gamma"], reg[pre + "ln2.beta"])
            h = E.gelu(matmul(h, reg[pre + "mlp.w1"]) + reg[pre + "mlp.b1"])
            return z + (matmul(h, reg[pre + "mlp.w2"]) + reg[pre + "mlp.b2"])

        patch = mlp(patch)
        if out_prompt is not None:
            out_prompt = mlp(out_prompt)
        return patch, out_prompt

    def _patch_merge(self, tokens: Tensor, grid: int, merge_idx: int) -> Tensor:
        """Fuse 2x2 token neighborhoods and project back to d channels."""
        b = tokens.shape[0]
        d = self.config.dim
        x = reshape(tokens, (b, grid // 2, 2, grid // 2, 2, d))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        x = reshape(x, (b, (grid // 2) ** 2, 4 * d))
        return matmul(x, self.registry[f"merge{merge_idx}.w"])

    def forward(self, image: Tensor) -> Tensor:
        """APT feed-forward: returns pixel features (B, N, d).

        Prompts join every basic layer's attention, are excluded from patch
        merging, and the final-layer prompt outputs are kept only when
        keep_final_prompts is set.
        """
        cfg = self.config
        tokens = self.patch_embed(image)
        grid = cfg.patch_spec.grid_h
        merge_idx = 0
        final_prompts = None
        for i in range(cfg.layers):
            prompts = self.prompt_bank.tokens[i]
            tokens, p_out = self._basic_layer(tokens, i, grid, prompts)
            if i in cfg.merge_after:
                tokens = self._patch_merge(tokens, grid, merge_idx)
                grid //= 2
                merge_idx += 1
            if i == cfg.layers - 1:
                final_prompts = p_out
        if cfg.keep_final_prompts and final_prompts is not None:
            tokens = concat([tokens, final_prompts], axis=1)
        return tokens

    def embed(self, features: Tensor) -> Tensor:
        """Pool pixel features into the classification embedding."""
        pooled = tmean(features, axis=1)
        return matmul(pooled, self.registry["head.w"]) + self.registry["head.b"]


class Student:
    """Stacked conv/norm/relu blocks producing raster-order pixel features."""

    def __init__(self, config: StudentConfig, rng=None):
        if rng is None:
            rng = np.random.default_rng(1)
        self.config = config
        reg = ParamRegistry()
        d = config.dim
        in_ch = 3
        k = config.kernel
        for i, stride in enumerate(config.strides):
            fan = in_ch * k * k
            reg.register(f"block{i}.kernel",
                         _normal(rng, d, in_ch, k, k, scale=1 / math.sqrt(fan)))
            reg.register(f"block{i}.bias", np.zeros(d))
            reg.register(f"block{i}.ln.gamma", np.ones(d))
            reg.register(f"block{i}.ln.beta", np.zeros(d))
            in_ch = d
        reg.register("head.w", _normal(rng, d, d, scale=1 / math.sqrt(d)))
        reg.register("head.b", np.zeros(d))
        reg.register("head.classes",
                     _normal(rng, config.num_classes, d, scale=1.0))
        self.registry = reg

    def forward(self, image: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, N, d) with N = final_grid^2."""
        cfg = self.config
        if image.shape[2] != cfg.image_size or image.shape[3] != cfg.image_size:
            raise ShapeError(
                f"expected {cfg.image_size}x{cfg.image_size} input, "
                f"got {image.shape[2]}x{image.shape[3]}"
            )
        x = image
        reg = self.registry
        pad = cfg.kernel // 2
        for i, stride in enumerate(cfg.strides):
            x = conv2d(x, reg[f"block{i}.kernel"], stride=stride, padding=pad)
            b, c, h, w = x.shape
            x = transpose(x, (0, 2, 3, 1))
            x = x + reg[f"block{i}.bias"]
            x = layer_norm(x, reg[f"block{i}.ln.gamma"], reg[f"block{i}.ln.beta"])
            x = relu(x)
            x = transpose(x, (0, 3, 1, 2))
        b, c, h, w = x.shape
        x = transpose(x, (0, 2, 3, 1))
        return reshape(x, (b, h * w, c))

    def embed(self, features: Tensor) -> Tensor:
        pooled = tmean(features, axis=1)
        return matmul(pooled, self.registry["head.w"]) + self.registry["head.b"]


def arcface_loss(embedding: Tensor, labels: np.ndarray, config: ArcFaceConfig,
                 class_weights: Tensor) -> Tensor:
    """Cross-entropy over scale * cos(theta_y + margin) margin logits.

    Embeddings and class weight rows are L2-normalized internally.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if embedding.ndim == 1:
        embedding = reshape(embedding, (1,) + embedding.shape)
    n_classes = class_weights.shape[0]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(
            f"label out of range [0, {n_classes}): {labels.tolist()}"
        )
    emb_n = l2_normalize_rows(embedding)
    w_n = l2_normalize_rows(class_weights)
    cos = matmul(emb_n, transpose(w_n))  # (B, C)
    onehot = Tensor(np.eye(n_classes)[labels])
    cos_y = tsum(mul(cos, onehot), axis=-1, keepdims=True)
    cos_m = math.cos(config.margin)
    sin_m = math.sin(config.margin)
    sin_y = E.sqrt(E.clip(Tensor(1.0) - mul(cos_y, cos_y), 1e-12, 1.0))
    phi = cos_y * Tensor(cos_m) - sin_y * Tensor(sin_m)
    logits = (cos + mul(onehot, phi - cos_y)) * Tensor(config.scale)
    logp = log_softmax_rows(logits)
    return -tmean(tsum(mul(logp, onehot), axis=-1))
