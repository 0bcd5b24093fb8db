import random
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evsam.attention import AttentionConfig
from evsam.backbone import PRESETS, ImageEncoder
from evsam.bench import (CostReport, _Counter, attention_scaling, cost_report, count_macs, count_params,
                         fast_attention_macs, quadratic_attention_macs, time_forward)
from evsam.data.checkpoint import save_checkpoint, load_checkpoint
from evsam.nn.tensor import Tensor, record_macs
from evsam.sam_head import PromptSet, SamModel

ATTN = AttentionConfig(scales=(3,))


def single(fn, *args, **kwargs):
    report = CostReport()
    getattr(_Counter(report), fn)(*args, **kwargs)
    return report.rows[0]


class TestFormulas:
    def test_conv_macs(self):
        assert single("conv", "c", 3, 16, 3, 32).macs == 442_368

    def test_conv_params_with_bias(self):
        assert single("conv", "c", 3, 16, 3, 32, bias=True).params == 448

    def test_linear(self):
        row = single("linear", "l", 128, 64, tokens=1)
        assert (row.params, row.macs) == (8_192 + 64, 8_192)

    def test_layernorm(self):
        row = single("norm", "n", 64)
        assert (row.params, row.macs) == (128, 0)

    def test_attention_costs(self):
        assert fast_attention_macs(1024, 16) == 2 * 1024 * 256 + 1024 * 16
        assert quadratic_attention_macs(1024, 16) == 2 * 1024 * 1024 * 16

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 5000), st.integers(1, 512))
    def test_crossover(self, n, d):
        assert (fast_attention_macs(n, d) < quadratic_attention_macs(n, d)) == (d < n)


def traced_macs(model, size):
    with record_macs() as log:
        model(Tensor(np.random.default_rng(0).random((3, size, size))), PromptSet(box=(8, 8, size - 8, size - 8)))
    by_kind = defaultdict(int)
    for kind, macs in log:
        by_kind[kind] += macs
    return by_kind


def params_by_row(model, row_names):
    rows = set(row_names)
    out = defaultdict(int)
    for name, p in model.named_parameters():
        owner = name if name in rows else name.rsplit(".", 1)[0]
        out[owner] += p.data.size
    return dict(out)


@pytest.mark.parametrize("name,attn", [
    ("desk-l0", ATTN),
    ("desk-l0", AttentionConfig(dim=8, heads=1, scales=(3, 5))),
    ("tiny", AttentionConfig(dim=8, heads=1, scales=())),
    ("desk-xl1", ATTN),
])
def test_report_matches_traced_model(name, attn):
    cfg = PRESETS[name]
    model = SamModel(cfg, attn)
    report = cost_report(cfg, attn)
    traced = traced_macs(model, cfg.input_size)
    assert report.total_macs == sum(traced.values())
    conv = sum(r.macs for r in report.rows if r.kind == "conv")
    conv_t = sum(r.macs for r in report.rows if r.kind == "conv_t")
    assert (conv, conv_t) == (traced["conv2d"], traced["conv_transpose2d"])
    expected = {r.name: r.params for r in report.rows if r.params}
    assert params_by_row(model, [r.name for r in report.rows]) == expected
    assert report.total_params == model.num_parameters()


def test_encoder_scope():
    cfg = PRESETS["desk-l0"]
    enc = ImageEncoder(cfg, ATTN)
    with record_macs() as log:
        enc(Tensor(np.zeros((3, 128, 128))))
    assert count_macs(cfg, attention=ATTN, scope="encoder").total_macs == sum(m for _, m in log)
    assert count_params(cfg, ATTN, scope="encoder") == enc.num_parameters()


def test_params_equal_checkpoint_elements(tmp_path):
    cfg = PRESETS["desk-l0"]
    save_checkpoint(tmp_path / "m.ckpt", SamModel(cfg, ATTN))
    assert count_params(cfg, ATTN) == load_checkpoint(tmp_path / "m.ckpt").num_elements()


def test_totals_are_order_invariant():
    report = cost_report(PRESETS["desk-l1"], ATTN)
    rows = list(report.rows)
    random.Random(0).shuffle(rows)
    shuffled = CostReport(rows, report.input_size)
    assert (shuffled.total_params, shuffled.total_macs) == (report.total_params, report.total_macs)


def test_totals_are_column_sums_and_csv():
    report = cost_report(PRESETS["tiny"], ATTN)
    lines = report.to_csv().splitlines()
    assert lines[0] == "name,kind,params,macs"
    assert lines[-1] == f"total,,{report.total_params},{report.total_macs}"
    assert sum(int(l.split(",")[3]) for l in lines[1:-1]) == report.total_macs
    assert "GMACs" in report.to_table()


def test_input_size_override_scales_macs():
    cfg = PRESETS["desk-l0"]
    # from 256 px up every attention stage is wide enough for the 3x3 aggregation
    small, big = count_macs(cfg, 256, ATTN, "encoder"), count_macs(cfg, 512, ATTN, "encoder")
    assert big.input_size == 512 and big.total_params == small.total_params
    assert big.total_macs > 3 * small.total_macs


class TestTiming:
    model = SamModel(PRESETS["tiny"], ATTN)

    def test_five_reps_median_is_third_order_statistic(self):
        t = time_forward(self.model, reps=5)
        assert len(t.samples_ms) == 5
        assert t.median_ms == sorted(t.samples_ms)[2]
        assert t.mad_ms >= 0 and t.images_per_s > 0

    def test_batch_doubling_keeps_per_image_time(self):
        one = time_forward(self.model, reps=5, batch=1)
        two = time_forward(self.model, reps=5, batch=2)
        per_image = (two.median_ms / 2) / one.median_ms
        assert 0.5 <= per_image <= 2.0

    @pytest.mark.parametrize("kwargs", [dict(reps=4), dict(warmup=0)])
    def test_guards(self, kwargs):
        with pytest.raises(ValueError):
            time_forward(self.model, **kwargs)

    def test_wrong_input_size(self):
        with pytest.raises(ValueError):
            time_forward(self.model, input_size=128)

    def test_scaling_result_shape(self):
        res = attention_scaling(ns=(64, 128), d=8, reps=5, warmup=1)
        assert len(res.fast_ms) == len(res.quadratic_ms) == 2
        assert "ratio" in res.to_table()
