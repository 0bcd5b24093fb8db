"""ReLU linear attention and the multi-scale EfficientViT block.

Token tensors are ``N x d`` or batched ``heads x N x d``. The linear form
replaces the softmax kernel with ``relu(q) . relu(k)`` and normalizes each
row by the sum of its (non-negative) weights plus ``eps``:

    out_i = sum_j (relu(q_i) . relu(k_j)) v_j / (sum_j relu(q_i) . relu(k_j) + eps)

The quadratic path materializes the N x N weight matrix. The fast path
reassociates the products so only the d x d summary ``relu(K)^T V`` and the
d-vector ``sum_j relu(k_j)`` are formed, giving O(N d^2) work.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .nn import functional as F
from .nn.module import Conv2d, LayerNorm, Module
from .nn.tensor import Tensor, add, as_tensor, concat, div, matmul, relu, reshape, sum_, transpose


@dataclass(frozen=True)
class AttentionConfig:
    dim: int = 16
    heads: int = 1
    eps: float = 1e-6
    scales: tuple[int, ...] = (5,)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        for s in self.scales:
            if s < 3 or s % 2 == 0:
                raise ValueError(f"aggregation scale {s} must be odd and >= 3")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def for_width(self, width: int, max_scale: int | None = None) -> "AttentionConfig":
        """Same head width and eps at a new channel count.

        Scales larger than ``max_scale`` (the smaller spatial side of the
        stage that will run the block) are dropped.
        """
        hd = self.head_dim
        if width % hd:
            raise ValueError(f"width {width} is not divisible by head_dim {hd}")
        scales = self.scales if max_scale is None else tuple(s for s in self.scales if s <= max_scale)
        return replace(self, dim=width, heads=width // hd, scales=scales)


def softmax_attention_ref(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v, row-wise. Benchmark baseline only."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    logits = matmul(q, transpose(k, _swap(k.ndim))) * (1.0 / np.sqrt(d))
    return matmul(F.softmax(logits, axis=-1), v)


def _swap(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _check_qkv(q, k, v, eps):
    if not (q.shape == k.shape and k.shape[:-1] == v.shape[:-1]):
        raise ValueError(f"q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")


def relu_linear_attention_quadratic(q: Tensor, k: Tensor, v: Tensor, eps: float = 1e-6) -> Tensor:
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v, eps)
    weights = matmul(relu(q), transpose(relu(k), _swap(k.ndim)))      # ... x N x N
    return div(matmul(weights, v), add(sum_(weights, axis=-1, keepdims=True), eps))


def relu_linear_attention_fast(q: Tensor, k: Tensor, v: Tensor, eps: float = 1e-6) -> Tensor:
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v, eps)
    rq, rk = relu(q), relu(k)
    rk_t = transpose(rk, _swap(rk.ndim))                  # ... x d x N
    kv = matmul(rk_t, v)                                   # ... x d x d_v
    k_sum = sum_(rk_t, axis=-1, keepdims=True)             # ... x d x 1
    return div(matmul(rq, kv), add(matmul(rq, k_sum), eps))


def _split_heads(qkv: Tensor, heads: int, head_dim: int):
    """(3*dim) x H x W  ->  three heads x N x head_dim tensors.

    Channels are laid out per head as [q | k | v], each head_dim wide.
    """
    c, h, w = qkv.shape
    t = reshape(qkv, (heads, 3 * head_dim, h * w))
    t = transpose(t, (0, 2, 1))                            # heads x N x 3*hd
    return (t[:, :, :head_dim], t[:, :, head_dim:2 * head_dim], t[:, :, 2 * head_dim:])


def multi_scale_aggregate(qkv: Tensor, config: AttentionConfig, aggregators=()) -> list:
    """Original Q/K/V tokens plus one depthwise-aggregated group per scale.

    ``aggregators`` holds, per scale, ``(depthwise_weight, pointwise_weight)``
    where the depthwise weight is ``3*dim x 1 x s x s`` and the optional
    pointwise weight is ``3*dim x 3*head_dim x 1 x 1`` applied with one group
    per head and per q/k/v slice. Borders are replicate-padded so a constant
    map stays constant under an averaging kernel.
    """
    qkv = as_tensor(qkv)
    c, h, w = qkv.shape
    if c != 3 * config.dim:
        raise ValueError(f"expected {3 * config.dim} qkv channels, got {c}")
    if len(aggregators) != len(config.scales):
        raise ValueError("one aggregator per configured scale is required")
    groups = [_split_heads(qkv, config.heads, config.head_dim)]
    for s, (dw, pw) in zip(config.scales, aggregators):
        if s > min(h, w):
            raise ValueError(f"aggregation scale {s} exceeds feature map {h}x{w}")
        agg = F.conv2d(F.pad_edge(qkv, s // 2), dw, groups=c)
        if pw is not None:
            agg = F.conv2d(agg, pw, groups=3 * config.heads)
        groups.append(_split_heads(agg, config.heads, config.head_dim))
    return groups


class LiteMLA(Module):
    """Multi-scale ReLU linear attention with its output projection."""

    def __init__(self, config: AttentionConfig, rng):
        super().__init__()
        self.config = config
        d = config.dim
        self.qkv = Conv2d(d, 3 * d, 1, rng)
        self.aggreg_dw = [Conv2d(3 * d, 3 * d, s, rng, groups=3 * d) for s in config.scales]
        self.aggreg_pw = [Conv2d(3 * d, 3 * d, 1, rng, groups=3 * config.heads) for _ in config.scales]
        self.proj = Conv2d(d * (1 + len(config.scales)), d, 1, rng)
        self.norm = LayerNorm(d, axis=0)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        _, h, w = x.shape
        aggs = [(dw.weight, pw.weight) for dw, pw in zip(self.aggreg_dw, self.aggreg_pw)]
        groups = multi_scale_aggregate(self.qkv(x), cfg, aggs)
        q = concat([g[0] for g in groups], axis=0)
        k = concat([g[1] for g in groups], axis=0)
        v = concat([g[2] for g in groups], axis=0)
        out = relu_linear_attention_fast(q, k, v, cfg.eps)           # heads' x N x hd
        out = reshape(transpose(out, (0, 2, 1)), (-1, h, w))
        return self.norm(self.proj(out))


class MBConv(Module):
    """1x1 expand -> ReLU -> depthwise 3x3 -> ReLU -> 1x1 project -> norm."""

    def __init__(self, dim: int, expand: int, rng):
        super().__init__()
        hidden = dim * expand
        self.inverted = Conv2d(dim, hidden, 1, rng, bias=True)
        self.depth = Conv2d(hidden, hidden, 3, rng, groups=hidden, bias=True)
        self.point = Conv2d(hidden, dim, 1, rng)
        self.norm = LayerNorm(dim, axis=0)

    def forward(self, x):
        return self.norm(self.point(relu(self.depth(relu(self.inverted(x))))))


class EfficientViTBlock(Module):
    """Attention half then FFN half, each wrapped in a residual connection."""

    def __init__(self, config: AttentionConfig, rng, expand: int = 4):
        super().__init__()
        self.config = config
        self.context = LiteMLA(config, rng)
        self.local = MBConv(config.dim, expand, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.config.dim:
            raise ValueError(f"block expects {self.config.dim} channels, got {x.shape[0]}")
        x = add(x, self.context(x))
        return add(x, self.local(x))


def efficientvit_block(x: Tensor, config: AttentionConfig, weights: EfficientViTBlock) -> Tensor:
    return weights(x)
