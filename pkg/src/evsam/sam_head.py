"""Prompt encoder and three-mask decoder in the style of SAM.

Coordinates are continuous pixel positions in model input space: the centre
of pixel (row r, col c) is (x, y) = (c + 0.5, r + 0.5), and a box
(x0, y0, x1, y1) covers columns x0..x1-1 and rows y0..y1-1 when its edges
are integral.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data.rng import philox
from .nn import functional as F
from .nn.module import ConvTranspose2d, LayerNorm, Linear, Module, _param
from .nn.tensor import Tensor, add, concat, matmul, mul, relu, reshape, sigmoid, stack, transpose

FOREGROUND, BACKGROUND = 1, 0
NUM_MASKS = 3


@dataclass
class PromptSet:
    points: list[tuple[float, float, int]] = field(default_factory=list)
    box: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        self.points = [(float(x), float(y), int(lab)) for x, y, lab in self.points]
        if not self.points and self.box is None:
            raise ValueError("a prompt needs at least one point or a box")
        for *_, lab in self.points:
            if lab not in (FOREGROUND, BACKGROUND):
                raise ValueError(f"point label must be 0 or 1, got {lab}")
        if self.box is not None:
            x0, y0, x1, y1 = (float(v) for v in self.box)
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"degenerate box {self.box}")
            self.box = (x0, y0, x1, y1)


@dataclass
class MaskPrediction:
    logits: Tensor        # 3 x 4h x 4w
    iou_scores: Tensor    # 3


class PromptEncoder(Module):
    """Random-Fourier positional code plus learned type embeddings.

    The Gaussian frequency matrix (2 x embed_dim/2) is drawn from ``seed``;
    it is not a parameter and is rebuilt from the seed on load.
    """

    def __init__(self, embed_dim: int, seed: int = 0):
        super().__init__()
        self.embed_dim = embed_dim
        self.seed = seed
        self.gaussian = philox(seed, "positional_encoding").standard_normal((2, embed_dim // 2)).astype(np.float32)
        rng = philox(seed, "prompt_encoder")
        self.point_embed = [_param(rng.standard_normal(embed_dim)) for _ in range(4)]   # bg, fg, tl, br

    def _pe(self, coords01: np.ndarray) -> np.ndarray:
        proj = (2.0 * coords01 - 1.0) @ self.gaussian * (2.0 * np.pi)
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1).astype(np.float32)

    def encode_coords(self, xy: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
        h, w = image_size
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        if ((xy < 0) | (xy > [w, h])).any():
            raise ValueError(f"prompt coordinate outside the {w}x{h} image")
        return self._pe(xy / [w, h])

    def encode_points(self, points, image_size: tuple[int, int]) -> Tensor:
        xy = np.array([(x, y) for x, y, _ in points], dtype=np.float64)
        pe = Tensor(self.encode_coords(xy, image_size))
        labels = stack([self.point_embed[lab] for *_, lab in points])
        return add(pe, labels)

    def encode_box(self, box, image_size: tuple[int, int]) -> Tensor:
        x0, y0, x1, y1 = box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {box}")
        pe = Tensor(self.encode_coords(np.array([[x0, y0], [x1, y1]]), image_size))
        return add(pe, stack([self.point_embed[2], self.point_embed[3]]))

    def encode(self, prompts: PromptSet, image_size: tuple[int, int]) -> Tensor:
        parts = []
        if prompts.points:
            parts.append(self.encode_points(prompts.points, image_size))
        if prompts.box is not None:
            parts.append(self.encode_box(prompts.box, image_size))
        return parts[0] if len(parts) == 1 else concat(parts, axis=0)

    def dense_pe(self, h: int, w: int) -> np.ndarray:
        """Positional code of every embedding cell centre, (h*w) x embed_dim."""
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        return self._pe(np.stack([xs.ravel(), ys.ravel()], axis=-1))


class Attention(Module):
    """Multi-head softmax attention over token matrices (n x C)."""

    def __init__(self, dim: int, heads: int, rng):
        super().__init__()
        self.heads = heads
        self.q_proj, self.k_proj, self.v_proj = (Linear(dim, dim, rng) for _ in range(3))
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, c = x.shape
        return transpose(reshape(x, (n, self.heads, c // self.heads)), (1, 0, 2))

    def forward(self, q, k, v):
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        dh = q.shape[-1]
        attn = F.softmax(mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh)), axis=-1)
        out = matmul(attn, v)                                   # heads x n x dh
        n = out.shape[1]
        return self.out_proj(reshape(transpose(out, (1, 0, 2)), (n, -1)))


class MLP(Module):
    def __init__(self, dims: list[int], rng):
        super().__init__()
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class TwoWayBlock(Module):
    def __init__(self, dim, heads, mlp_dim, rng, skip_first_pe=False):
        super().__init__()
        self.skip_first_pe = skip_first_pe
        self.self_attn = Attention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_t2i = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP([dim, mlp_dim, dim], rng)
        self.norm3 = LayerNorm(dim)
        self.cross_i2t = Attention(dim, heads, rng)
        self.norm4 = LayerNorm(dim)

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = add(queries, query_pe)
            queries = add(queries, self.self_attn(q, q, queries))
        queries = self.norm1(queries)
        q, k = add(queries, query_pe), add(keys, key_pe)
        queries = self.norm2(add(queries, self.cross_t2i(q, k, keys)))
        queries = self.norm3(add(queries, self.mlp(queries)))
        q, k = add(queries, query_pe), add(keys, key_pe)
        keys = self.norm4(add(keys, self.cross_i2t(k, q, queries)))
        return queries, keys


class MaskDecoder(Module):
    """Token/image two-way transformer followed by upscaling and hypernetwork heads."""

    def __init__(self, embed_dim: int, seed: int = 0, depth: int = 2, heads: int = 2):
        super().__init__()
        c = embed_dim
        rng = philox(seed, "mask_decoder")
        self.iou_token = _param(rng.standard_normal((1, c)))
        self.mask_tokens = _param(rng.standard_normal((NUM_MASKS, c)))
        self.blocks = [TwoWayBlock(c, heads, 2 * c, rng, skip_first_pe=(i == 0)) for i in range(depth)]
        self.final_attn = Attention(c, heads, rng)
        self.norm_final = LayerNorm(c)
        self.up1 = ConvTranspose2d(c, c // 4, 2, rng)
        self.up_norm = LayerNorm(c // 4, axis=0)
        self.up2 = ConvTranspose2d(c // 4, c // 8, 2, rng)
        self.hyper = [MLP([c, c, c, c // 8], rng) for _ in range(NUM_MASKS)]
        self.iou_head = MLP([c, c, NUM_MASKS], rng)

    def forward(self, image_embedding: Tensor, image_pe: np.ndarray, prompt_tokens: Tensor) -> MaskPrediction:
        c, h, w = image_embedding.shape
        if prompt_tokens.ndim != 2 or prompt_tokens.shape[1] != c or prompt_tokens.shape[0] < 1:
            raise ValueError(f"prompt tokens must be n x {c}, got {prompt_tokens.shape}")
        if image_pe.shape != (h * w, c):
            raise ValueError("image positional encoding does not match the embedding")
        tokens = concat([self.iou_token, self.mask_tokens, prompt_tokens], axis=0)
        keys = transpose(reshape(image_embedding, (c, h * w)), (1, 0))
        key_pe = Tensor(image_pe)
        queries = tokens
        for block in self.blocks:
            queries, keys = block(queries, keys, tokens, key_pe)
        q, k = add(queries, tokens), add(keys, key_pe)
        queries = self.norm_final(add(queries, self.final_attn(q, k, keys)))

        src = reshape(transpose(keys, (1, 0)), (c, h, w))
        up = relu(self.up_norm(self.up1(src)))
        up = relu(self.up2(up))                                  # c/8 x 4h x 4w
        hyper_in = concat([mlp(queries[1 + i:2 + i]) for i, mlp in enumerate(self.hyper)], axis=0)  # 3 x c/8
        logits = reshape(matmul(hyper_in, reshape(up, (c // 8, 16 * h * w))), (NUM_MASKS, 4 * h, 4 * w))
        iou = sigmoid(reshape(self.iou_head(queries[0:1]), (NUM_MASKS,)))
        return MaskPrediction(logits, iou)


def select_best_mask(pred: MaskPrediction) -> tuple[int, np.ndarray]:
    """Argmax of the predicted IoU (ties -> lowest index) and its mask at logit 0."""
    idx = int(np.argmax(pred.iou_scores.data))
    return idx, pred.logits.data[idx] > 0


class SamModel(Module):
    """Image encoder + prompt encoder + mask decoder."""

    def __init__(self, config, attention=None, seed: int = 0):
        from .backbone import ImageEncoder

        super().__init__()
        self.config = config
        self.seed = seed
        self.image_encoder = ImageEncoder(config, attention, seed)
        self.prompt_encoder = PromptEncoder(config.embed_dim, seed)
        self.mask_decoder = MaskDecoder(config.embed_dim, seed)
        e = config.embed_size
        self._image_pe = self.prompt_encoder.dense_pe(e, e)

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.config.input_size, self.config.input_size)

    def decode(self, embedding: Tensor, prompts: PromptSet) -> MaskPrediction:
        tokens = self.prompt_encoder.encode(prompts, self.image_size)
        return self.mask_decoder(embedding, self._image_pe, tokens)

    def upscale_logits(self, logits: Tensor) -> Tensor:
        return F.resize_bilinear(logits, self.image_size)

    def forward(self, image: Tensor, prompts: PromptSet) -> MaskPrediction:
        return self.decode(self.image_encoder(image), prompts)


def mask_decode(image_embedding: Tensor, prompt_tokens: Tensor, decoder: MaskDecoder,
                image_pe: np.ndarray) -> MaskPrediction:
    return decoder(image_embedding, image_pe, prompt_tokens)


class Predictor:
    """Caches one image embedding and answers prompt queries at input resolution."""

    def __init__(self, model: SamModel):
        self.model = model
        self._embedding: Tensor | None = None

    def set_image(self, image) -> None:
        img = image if isinstance(image, Tensor) else Tensor(image)
        self._embedding = self.model.image_encoder(img)

    def predict(self, prompts: PromptSet) -> np.ndarray:
        if self._embedding is None:
            raise RuntimeError("call set_image first")
        pred = self.model.decode(self._embedding, prompts)
        idx, _ = select_best_mask(pred)
        full = self.model.upscale_logits(pred.logits[idx:idx + 1])
        return full.data[0] > 0
