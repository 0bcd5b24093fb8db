"""Analytic cost accounting and wall-clock timing.

One multiply-accumulate counts as one MAC. Convolutions cost
``C_out * (C_in / groups) * k^2 * H' * W'``, a matmul ``M * K * N``.
Normalization, activations, softmax, elementwise arithmetic, resampling and
the Fourier positional code cost 0. The model cost covers the image
encoder plus one decoder pass for a single box prompt, up to the
low-resolution mask logits.

Row names match the module's parameter prefixes, so every parameter of a
built model belongs to exactly one row.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import AttentionConfig, relu_linear_attention_fast, relu_linear_attention_quadratic
from .backbone import ModelConfig
from .nn.tensor import Tensor
from .sam_head import NUM_MASKS, PromptSet

BOX_TOKENS = 2


def fast_attention_macs(n: int, d: int, d_v: int | None = None) -> int:
    """relu(K)^T V, relu(Q) (K^T V) and relu(Q) k_sum: 2 N d d_v + N d."""
    d_v = d if d_v is None else d_v
    return 2 * n * d * d_v + n * d


def quadratic_attention_macs(n: int, d: int, d_v: int | None = None) -> int:
    """relu(Q) relu(K)^T and the weighted sum of V: N^2 d + N^2 d_v."""
    d_v = d if d_v is None else d_v
    return n * n * d + n * n * d_v


@dataclass(frozen=True)
class CostRow:
    name: str
    kind: str
    params: int
    macs: int


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    input_size: int = 0

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def add(self, name: str, kind: str, params: int = 0, macs: int = 0) -> None:
        self.rows.append(CostRow(name, kind, int(params), int(macs)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "kind", "params", "macs"])
        for r in self.rows:
            writer.writerow([r.name, r.kind, r.params, r.macs])
        writer.writerow(["total", "", self.total_params, self.total_macs])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"{'name':<{width}}  {'kind':<10} {'params':>12} {'macs':>15}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.kind:<10} {r.params:>12,} {r.macs:>15,}")
        lines.append(f"{'total':<{width}}  {'':<10} {self.total_params:>12,} {self.total_macs:>15,}")
        lines.append(f"input {self.input_size}x{self.input_size}: "
                     f"{self.total_params / 1e6:.3f} M params, {self.total_macs / 1e9:.4f} GMACs")
        return "\n".join(lines)


class _Counter:
    """Walks the architecture in closed form, appending one row per layer."""

    def __init__(self, report: CostReport):
        self.r = report

    def conv(self, name, cin, cout, k, side_out, groups=1, bias=False):
        params = cout * (cin // groups) * k * k + (cout if bias else 0)
        self.r.add(name, "conv", params, cout * (cin // groups) * k * k * side_out * side_out)

    def conv_t(self, name, cin, cout, k, side_in, bias=True):
        self.r.add(name, "conv_t", cin * cout * k * k + (cout if bias else 0), cin * cout * k * k * side_in * side_in)

    def norm(self, name, c):
        self.r.add(name, "norm", 2 * c, 0)

    def linear(self, name, cin, cout, tokens, bias=True):
        self.r.add(name, "linear", cin * cout + (cout if bias else 0), tokens * cin * cout)

    def res_block(self, p, cin, cout, stride, side_out):
        self.conv(f"{p}.conv1", cin, cout, 3, side_out)
        self.norm(f"{p}.norm1", cout)
        self.conv(f"{p}.conv2", cout, cout, 3, side_out)
        self.norm(f"{p}.norm2", cout)
        if stride != 1 or cin != cout:
            self.conv(f"{p}.shortcut", cin, cout, 1, side_out)
            self.norm(f"{p}.shortcut_norm", cout)

    def fused_mbconv(self, p, cin, cout, expand, side_out):
        hidden = max(1, round(cin * expand))
        self.conv(f"{p}.spatial", cin, hidden, 3, side_out)
        self.norm(f"{p}.norm1", hidden)
        self.conv(f"{p}.point", hidden, cout, 1, side_out)
        self.norm(f"{p}.norm2", cout)

    def evit_block(self, p, acfg: AttentionConfig, side, expand):
        d, hd, n = acfg.dim, acfg.head_dim, side * side
        self.conv(f"{p}.context.qkv", d, 3 * d, 1, side)
        for i, s in enumerate(acfg.scales):
            self.conv(f"{p}.context.aggreg_dw.{i}", 3 * d, 3 * d, s, side, groups=3 * d)
        for i, _ in enumerate(acfg.scales):
            self.conv(f"{p}.context.aggreg_pw.{i}", 3 * d, 3 * d, 1, side, groups=3 * acfg.heads)
        heads = acfg.heads * (1 + len(acfg.scales))
        self.r.add(f"{p}.context.attention", "attention", 0, heads * fast_attention_macs(n, hd))
        self.conv(f"{p}.context.proj", d * (1 + len(acfg.scales)), d, 1, side)
        self.norm(f"{p}.context.norm", d)
        hidden = d * expand
        self.conv(f"{p}.local.inverted", d, hidden, 1, side, bias=True)
        self.conv(f"{p}.local.depth", hidden, hidden, 3, side, groups=hidden, bias=True)
        self.conv(f"{p}.local.point", hidden, d, 1, side)
        self.norm(f"{p}.local.norm", d)

    def encoder(self, p, cfg: ModelConfig, attention: AttentionConfig):
        w, s = cfg.stage_widths, cfg.input_size
        self.conv(f"{p}stem", 3, w[0], 3, s // 2)
        self.norm(f"{p}stem_norm", w[0])
        cin = w[0]
        for i, (depth, width, kind) in enumerate(zip(cfg.stage_depths, w, cfg.stage_kinds)):
            side = cfg.stage_resolution(i + 1)
            q = f"{p}stages.{i}.blocks"
            if kind == "res":
                for j in range(depth):
                    self.res_block(f"{q}.{j}", cin if j == 0 else width, width, 2 if j == 0 else 1, side)
            elif kind == "fmbconv":
                for j in range(depth):
                    self.fused_mbconv(f"{q}.{j}", cin if j == 0 else width, width, cfg.expand_ratio, side)
            else:
                acfg = attention.for_width(width, max_scale=side)
                self.fused_mbconv(f"{q}.0", cin, width, cfg.expand_ratio, side)
                for j in range(depth):
                    self.evit_block(f"{q}.{j + 1}", acfg, side, cfg.expand_ratio)
            cin = width
        n = cfg.neck_width
        for i in (2, 3, 4):
            self.conv(f"{p}proj{i + 1}", w[i], n, 1, cfg.stage_resolution(i + 1))
        for i in (2, 3, 4):
            self.norm(f"{p}proj{i + 1}_norm", n)
        e = cfg.embed_size
        for j in range(cfg.neck_depth):
            self.fused_mbconv(f"{p}neck.{j}", n, n, cfg.expand_ratio, e)
        self.conv(f"{p}out", n, cfg.embed_dim, 1, e, bias=True)
        self.norm(f"{p}out_norm", cfg.embed_dim)

    def attention(self, p, c, n_q, n_k):
        self.linear(f"{p}.q_proj", c, c, n_q)
        self.linear(f"{p}.k_proj", c, c, n_k)
        self.linear(f"{p}.v_proj", c, c, n_k)
        self.r.add(f"{p}.softmax_attention", "attention", 0, 2 * n_q * n_k * c)
        self.linear(f"{p}.out_proj", c, c, n_q)

    def mlp(self, p, dims, tokens):
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.linear(f"{p}.layers.{i}", a, b, tokens)

    def decoder(self, cfg: ModelConfig, prompt_tokens: int, depth: int = 2):
        c, e = cfg.embed_dim, cfg.embed_size
        hw, t = e * e, 1 + NUM_MASKS + prompt_tokens
        self.r.add("prompt_encoder.point_embed", "embedding", 4 * c, 0)
        self.r.add("mask_decoder.iou_token", "embedding", c, 0)
        self.r.add("mask_decoder.mask_tokens", "embedding", NUM_MASKS * c, 0)
        for i in range(depth):
            p = f"mask_decoder.blocks.{i}"
            self.attention(f"{p}.self_attn", c, t, t)
            self.norm(f"{p}.norm1", c)
            self.attention(f"{p}.cross_t2i", c, t, hw)
            self.norm(f"{p}.norm2", c)
            self.mlp(f"{p}.mlp", [c, 2 * c, c], t)
            self.norm(f"{p}.norm3", c)
            self.attention(f"{p}.cross_i2t", c, hw, t)
            self.norm(f"{p}.norm4", c)
        self.attention("mask_decoder.final_attn", c, t, hw)
        self.norm("mask_decoder.norm_final", c)
        self.conv_t("mask_decoder.up1", c, c // 4, 2, e)
        self.norm("mask_decoder.up_norm", c // 4)
        self.conv_t("mask_decoder.up2", c // 4, c // 8, 2, 2 * e)
        for i in range(NUM_MASKS):
            self.mlp(f"mask_decoder.hyper.{i}", [c, c, c, c // 8], 1)
        self.r.add("mask_decoder.mask_product", "matmul", 0, NUM_MASKS * (c // 8) * 16 * hw)
        self.mlp("mask_decoder.iou_head", [c, c, NUM_MASKS], 1)


def cost_report(config: ModelConfig, attention: AttentionConfig | None = None,
                input_size: int | None = None, scope: str = "model") -> CostReport:
    """Per-layer params and MACs; ``scope`` is ``model`` or ``encoder``."""
    if input_size is not None and input_size != config.input_size:
        config = replace(config, input_size=input_size)
    attention = attention or AttentionConfig()
    report = CostReport(input_size=config.input_size)
    counter = _Counter(report)
    if scope == "encoder":
        counter.encoder("", config, attention)
    elif scope == "model":
        counter.encoder("image_encoder.", config, attention)
        counter.decoder(config, BOX_TOKENS)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return report


def count_macs(config: ModelConfig, input_size: int | None = None,
               attention: AttentionConfig | None = None, scope: str = "model") -> CostReport:
    return cost_report(config, attention, input_size, scope)


def count_params(config: ModelConfig, attention: AttentionConfig | None = None,
                 scope: str = "model") -> int:
    return cost_report(config, attention, scope=scope).total_params


# -- timing -------------------------------------------------------------------

@dataclass
class Timing:
    samples_ms: list[float]
    batch: int = 1

    @property
    def median_ms(self) -> float:
        return statistics.median(self.samples_ms)

    @property
    def mad_ms(self) -> float:
        med = self.median_ms
        return statistics.median(abs(s - med) for s in self.samples_ms)

    @property
    def images_per_s(self) -> float:
        return 1000.0 * self.batch / self.median_ms


def _timed(fn, warmup: int, reps: int) -> list[float]:
    if warmup < 1 or reps < 5:
        raise ValueError("need warmup >= 1 and reps >= 5")
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - t0) * 1000.0)
    return samples


def time_forward(model, input_size: int | None = None, warmup: int = 1, reps: int = 5,
                 batch: int = 1, seed: int = 0) -> Timing:
    """Encoder plus one box-prompted decode per image, single-threaded BLAS."""
    size = input_size or model.config.input_size
    if size != model.config.input_size:
        raise ValueError(f"model was built for {model.config.input_size} px input, not {size}")
    images = np.random.default_rng(seed).random((batch, 3, size, size), dtype=np.float32)
    box = PromptSet(box=(size * 0.25, size * 0.25, size * 0.75, size * 0.75))

    def run():
        for img in images:
            model(Tensor(img), box)

    return Timing(_timed(run, warmup, reps), batch)


@dataclass
class ScalingResult:
    ns: tuple[int, ...]
    fast_ms: list[float]
    quadratic_ms: list[float]

    @property
    def fast_ratio(self) -> float:
        return self.fast_ms[-1] / self.fast_ms[0]

    @property
    def quadratic_ratio(self) -> float:
        return self.quadratic_ms[-1] / self.quadratic_ms[0]

    def to_table(self) -> str:
        lines = [f"{'N':>6} {'fast_ms':>10} {'quadratic_ms':>13}"]
        for n, f, q in zip(self.ns, self.fast_ms, self.quadratic_ms):
            lines.append(f"{n:>6} {f:>10.3f} {q:>13.3f}")
        lines.append(f"ratio N={self.ns[-1]}/N={self.ns[0]}: fast {self.fast_ratio:.2f}, "
                     f"quadratic {self.quadratic_ratio:.2f}")
        return "\n".join(lines)


def attention_scaling(ns=(1024, 2048, 4096), d: int = 32, reps: int = 9, warmup: int = 2,
                      seed: int = 0) -> ScalingResult:
    """Median forward time of both attention forms at each sequence length."""
    rng = np.random.default_rng(seed)
    fast, quad = [], []
    for n in ns:
        q, k, v = (Tensor(rng.standard_normal((n, d), dtype=np.float32)) for _ in range(3))
        fast.append(statistics.median(_timed(lambda: relu_linear_attention_fast(q, k, v), warmup, reps)))
        quad.append(statistics.median(_timed(lambda: relu_linear_attention_quadratic(q, k, v), warmup, reps)))
    return ScalingResult(tuple(ns), fast, quad)
