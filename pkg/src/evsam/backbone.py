"""Five-stage image encoder with last-three-stage fusion and a fused-MBConv neck.

Layout: a stride-2 stem, then five stages that each halve resolution, so
stages 3/4/5 sit at strides 16/32/64. Stage 4 and 5 features are projected
to the neck width, upsampled (x2, x4) onto the stage-3 grid and summed with
the projected stage-3 features. The neck runs on that stride-16 map and a
final 1x1 conv plus channel layer-norm produces the image embedding, which
keeps it on the same scale as the decoder's positional code.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .attention import AttentionConfig, EfficientViTBlock
from .data.rng import philox
from .nn import functional as F
from .nn.module import BatchNorm, Conv2d, LayerNorm, Module
from .nn.tensor import Tensor, add, relu

STAGE_KINDS = ("res", "fmbconv", "evit")


@dataclass(frozen=True)
class ModelConfig:
    name: str = "desk-l0"
    input_size: int = 128
    stage_depths: tuple[int, ...] = (1, 1, 1, 2, 2)
    stage_widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    stage_kinds: tuple[str, ...] = ("res", "fmbconv", "fmbconv", "evit", "evit")
    neck_depth: int = 1
    neck_width: int = 64
    embed_dim: int = 32
    expand_ratio: int = 4

    def __post_init__(self):
        for f in ("stage_depths", "stage_widths", "stage_kinds"):
            object.__setattr__(self, f, tuple(getattr(self, f)))
        if not (len(self.stage_depths) == len(self.stage_widths) == len(self.stage_kinds) == 5):
            raise ValueError("a model has exactly five stages")
        if any(k not in STAGE_KINDS for k in self.stage_kinds):
            raise ValueError(f"stage kinds must be in {STAGE_KINDS}, got {self.stage_kinds}")
        if self.stage_kinds[3:] != ("evit", "evit") or "evit" in self.stage_kinds[:3]:
            raise ValueError("exactly the last two stages must be evit")
        if self.input_size % 64 or self.input_size <= 0:
            raise ValueError(f"input_size {self.input_size} must be a positive multiple of 64")
        if min(self.stage_depths) < 1 or min(self.stage_widths) < 1:
            raise ValueError("stage depths and widths must be positive")
        if self.neck_depth < 0 or self.neck_width < 1 or self.embed_dim < 2 or self.embed_dim % 8:
            raise ValueError("neck_depth >= 0, neck_width >= 1 and embed_dim a multiple of 8 required")

    def stage_resolution(self, stage: int) -> int:
        """Spatial side of stage ``stage`` (1-based) output."""
        return self.input_size >> (stage + 1)

    @property
    def embed_size(self) -> int:
        return self.input_size // 16


# Desk-scale analogues of L0..XL1 plus two resolution-faithful presets.
PRESETS: dict[str, ModelConfig] = {
    "desk-l0": ModelConfig(),
    "desk-l1": ModelConfig(name="desk-l1", stage_depths=(1, 1, 1, 3, 3)),
    "desk-l2": ModelConfig(name="desk-l2", stage_depths=(1, 2, 2, 3, 3), neck_depth=2),
    "desk-xl0": ModelConfig(name="desk-xl0", stage_depths=(1, 1, 2, 2, 2),
                            stage_widths=(16, 32, 64, 128, 256),
                            stage_kinds=("res", "res", "fmbconv", "evit", "evit"), neck_depth=2,
                            neck_width=96),
    "desk-xl1": ModelConfig(name="desk-xl1", stage_depths=(1, 2, 2, 3, 3),
                            stage_widths=(24, 48, 96, 192, 384),
                            stage_kinds=("res", "res", "fmbconv", "evit", "evit"), neck_depth=2,
                            neck_width=128),
    "tiny": ModelConfig(name="tiny", input_size=64, stage_depths=(1, 1, 1, 1, 1),
                        stage_widths=(8, 8, 16, 16, 32), neck_width=16, embed_dim=16),
    "l0-512": ModelConfig(name="l0-512", input_size=512, stage_depths=(1, 1, 1, 4, 4),
                          stage_widths=(32, 64, 128, 256, 512), neck_depth=4, neck_width=256,
                          embed_dim=256),
    "xl1-1024": ModelConfig(name="xl1-1024", input_size=1024, stage_depths=(1, 2, 2, 6, 6),
                            stage_widths=(64, 128, 256, 512, 1024),
                            stage_kinds=("res", "res", "fmbconv", "evit", "evit"), neck_depth=6,
                            neck_width=512, embed_dim=256),
}


class ResBlock(Module):
    """ResNet basic block; strided or width-changing blocks use a 1x1 shortcut."""

    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride)
        self.norm1 = BatchNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.norm2 = BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.shortcut = Conv2d(cin, cout, 1, rng, stride=stride)
            self.shortcut_norm = BatchNorm(cout)
        else:
            self.shortcut = None

    def forward(self, x):
        y = self.norm2(self.conv2(relu(self.norm1(self.conv1(x)))))
        skip = x if self.shortcut is None else self.shortcut_norm(self.shortcut(x))
        return relu(add(y, skip))


class FusedMBConv(Module):
    """3x3 expanding conv -> norm -> ReLU -> 1x1 projection -> norm (+ residual)."""

    def __init__(self, cin, cout, stride, expand_ratio, rng):
        super().__init__()
        hidden = max(1, round(cin * expand_ratio))
        self.spatial = Conv2d(cin, hidden, 3, rng, stride=stride)
        self.norm1 = BatchNorm(hidden)
        self.point = Conv2d(hidden, cout, 1, rng)
        self.norm2 = BatchNorm(cout)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        y = self.norm2(self.point(relu(self.norm1(self.spatial(x)))))
        return add(x, y) if self.residual else y


def res_block(x: Tensor, weights: ResBlock) -> Tensor:
    return weights(x)


def fused_mbconv(x: Tensor, expand_ratio: float, weights: FusedMBConv) -> Tensor:
    return weights(x)


class FeaturePyramid(NamedTuple):
    stage3: Tensor
    stage4: Tensor
    stage5: Tensor


class ImageEncoder(Module):
    def __init__(self, config: ModelConfig, attention: AttentionConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config
        self.attention = attention or AttentionConfig()
        rng = philox(seed, "image_encoder")
        w = config.stage_widths
        self.stem = Conv2d(3, w[0], 3, rng, stride=2)
        self.stem_norm = BatchNorm(w[0])
        stages = []
        cin = w[0]
        for i, (depth, width, kind) in enumerate(zip(config.stage_depths, w, config.stage_kinds)):
            side = config.stage_resolution(i + 1)
            blocks: list[Module] = []
            if kind == "res":
                blocks = [ResBlock(cin if j == 0 else width, width, 2 if j == 0 else 1, rng)
                          for j in range(depth)]
            elif kind == "fmbconv":
                blocks = [FusedMBConv(cin if j == 0 else width, width, 2 if j == 0 else 1,
                                      config.expand_ratio, rng) for j in range(depth)]
            else:
                acfg = self.attention.for_width(width, max_scale=side)
                blocks = [FusedMBConv(cin, width, 2, config.expand_ratio, rng)]
                blocks += [EfficientViTBlock(acfg, rng, config.expand_ratio) for _ in range(depth)]
            stages.append(_Sequential(blocks))
            cin = width
        self.stages = stages
        n = config.neck_width
        self.proj3, self.proj4, self.proj5 = (Conv2d(w[i], n, 1, rng) for i in (2, 3, 4))
        self.proj3_norm, self.proj4_norm, self.proj5_norm = BatchNorm(n), BatchNorm(n), BatchNorm(n)
        self.neck = [FusedMBConv(n, n, 1, config.expand_ratio, rng) for _ in range(config.neck_depth)]
        self.out = Conv2d(n, config.embed_dim, 1, rng, bias=True)
        self.out_norm = LayerNorm(config.embed_dim, axis=0)

    def forward_features(self, image: Tensor) -> FeaturePyramid:
        size = self.config.input_size
        if tuple(image.shape) != (3, size, size):
            raise ValueError(f"expected image of shape (3, {size}, {size}), got {tuple(image.shape)}")
        x = relu(self.stem_norm(self.stem(image)))
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats[2:])

    def fuse(self, feats: FeaturePyramid, use: tuple[int, ...] = (3, 4, 5)) -> Tensor:
        parts = []
        if 3 in use:
            parts.append(self.proj3_norm(self.proj3(feats.stage3)))
        if 4 in use:
            parts.append(F.upsample2x(self.proj4_norm(self.proj4(feats.stage4))))
        if 5 in use:
            parts.append(F.upsample2x(F.upsample2x(self.proj5_norm(self.proj5(feats.stage5)))))
        x = parts[0]
        for p in parts[1:]:
            x = add(x, p)
        for block in self.neck:
            x = block(x)
        return self.out_norm(self.out(x))

    def forward(self, image: Tensor) -> Tensor:
        return self.fuse(self.forward_features(image))


class _Sequential(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def image_encoder_forward(image: Tensor, config: ModelConfig, weights: ImageEncoder) -> Tensor:
    if weights.config != config:
        raise ValueError("encoder weights were built for a different config")
    return weights(image)
