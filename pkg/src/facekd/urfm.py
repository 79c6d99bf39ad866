"""Attention with learnable local-center queries and facial positional
encoding, plus the shared self-attention head used by the feature loss.

Both branches (teacher and student) are mapped from N pixel features to L
local features, so their attention maps and features become comparable
regardless of backbone architecture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import engine as E
from .engine import (ContractError, ParamRegistry, ShapeError, Tensor,
                     matmul, mse, reshape, softmax_rows, transpose)
from .facegeom import (MODE_NONE, CellGrid, LandmarkSet, PEBuckets,
                       pe_bias_batch)


class ConfigError(ValueError):
    """Raised when a run is mis-configured (e.g. missing landmarks)."""


@dataclass
class LocalCenters:
    """L learnable query embeddings, one per cell of a sqrt(L) x sqrt(L) grid."""

    tensor: Tensor
    grid: CellGrid

    @classmethod
    def create(cls, count: int, dim: int, image_size: int, rng) -> "LocalCenters":
        side = math.isqrt(count)
        if side * side != count:
            raise ContractError(f"local center count must be a perfect square, "
                                f"got {count}")
        tensor = Tensor(rng.standard_normal((count, dim)) / math.sqrt(dim),
                        requires_grad=True)
        grid = CellGrid(side, image_size, image_size)
        return cls(tensor=tensor, grid=grid)

    @property
    def count(self) -> int:
        return self.tensor.shape[0]

    @property
    def dim(self) -> int:
        return self.tensor.shape[1]


class URFMBranch:
    """Per-branch query/key/value projections over a shared center set."""

    def __init__(self, dim: int, rng, name: str = "urfm"):
        reg = ParamRegistry()
        scale = 1.0 / math.sqrt(dim)
        for w in ("wq", "wk", "wv"):
            reg.register(w, rng.standard_normal((dim, dim)) * scale)
        self.registry = reg
        self.name = name


def urfm_attention(pixel_features: Tensor, centers: LocalCenters,
                   branch: URFMBranch, buckets: PEBuckets,
                   landmarks: Optional[Sequence[Optional[LandmarkSet]]] = None):
    """Map (B, N, d) pixel features to (B, L, d) local features.

    Logits are ((C Wq + b) (f Wk)^T) / sqrt(d) with b the per-center
    positional bucket value; returns (local_features, attention) with
    attention of shape (B, L, N).
    """
    squeeze = False
    if pixel_features.ndim == 2:
        pixel_features = reshape(pixel_features, (1,) + pixel_features.shape)
        squeeze = True
    b, n, d = pixel_features.shape
    if d != centers.dim:
        raise ShapeError(f"feature dim {d} does not match center dim "
                         f"{centers.dim}")
    if buckets.mode != MODE_NONE:
        if landmarks is None or any(lm is None for lm in landmarks):
            raise ConfigError(
                f"facial mode {buckets.mode} requires landmarks for every sample"
            )
        if len(landmarks) != b:
            raise ConfigError(f"got {len(landmarks)} landmark sets for "
                              f"batch of {b}")
    else:
        landmarks = [None] * b

    reg = branch.registry
    q = matmul(centers.tensor, reg["wq"])  # (L, d)
    bias = pe_bias_batch(buckets, centers.grid, landmarks)  # (B, L, 1)
    q = q + bias  # broadcast to (B, L, d)
    k = matmul(pixel_features, reg["wk"])
    v = matmul(pixel_features, reg["wv"])
    logits = matmul(q, transpose(k, (0, 2, 1))) * Tensor(1.0 / math.sqrt(d))
    attn = softmax_rows(logits)  # (B, L, N)
    h = matmul(attn, v)  # (B, L, d)
    if squeeze:
        h = reshape(h, h.shape[1:])
        attn = reshape(attn, attn.shape[1:])
    return h, attn


class AlignmentHead:
    """One multi-head self-attention block, weights shared between branches."""

    def __init__(self, dim: int, rng, heads: int = 2):
        if dim % heads:
            raise ContractError(f"dim {dim} not divisible by {heads} heads")
        reg = ParamRegistry()
        scale = 1.0 / math.sqrt(dim)
        for w in ("wq", "wk", "wv", "wo"):
            reg.register(w, rng.standard_normal((dim, dim)) * scale)
        self.registry = reg
        self.heads = heads
        self.dim = dim

    def forward(self, h: Tensor) -> Tensor:
        squeeze = False
        if h.ndim == 2:
            h = reshape(h, (1,) + h.shape)
            squeeze = True
        b, n, d = h.shape
        if d != self.dim:
            raise ShapeError(f"expected dim {self.dim}, got {d}")
        heads, dh = self.heads, d // self.heads
        reg = self.registry

        def split(z):
            return transpose(reshape(z, (b, n, heads, dh)), (0, 2, 1, 3))

        q = split(matmul(h, reg["wq"]))
        k = split(matmul(h, reg["wk"]))
        v = split(matmul(h, reg["wv"]))
        logits = matmul(q, transpose(k, (0, 1, 3, 2))) * Tensor(1.0 / math.sqrt(dh))
        attn = softmax_rows(logits)
        out = matmul(attn, v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, n, d))
        out = matmul(out, reg["wo"])
        if squeeze:
            out = reshape(out, (n, d))
        return out


def attention_alignment_loss(attn_t: Tensor, attn_s: Tensor) -> Tensor:
    """Mean squared error between the two branches' attention maps."""
    if attn_t.shape != attn_s.shape:
        raise ShapeError(
            f"attention maps disagree: {attn_t.shape} vs {attn_s.shape}; "
            "teacher/student grids are mis-configured"
        )
    return mse(attn_t, attn_s)


def feature_alignment_loss(h_t: Tensor, h_s: Tensor,
                           head: AlignmentHead) -> Tensor:
    """MSE between the shared head's outputs on the two local feature sets."""
    if h_t.shape != h_s.shape:
        raise ShapeError(f"local features disagree: {h_t.shape} vs {h_s.shape}")
    return mse(head.forward(h_t), head.forward(h_s))
