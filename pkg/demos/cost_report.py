"""Closed-form parameter and MAC counts for the presets.

The counts come from formulas, not from running the model, and are pinned
in the tests against the kernels' own MAC log on a real forward pass.

    python demos/cost_report.py [preset]
"""
import sys

from evsam.attention import AttentionConfig
from evsam.backbone import PRESETS
from evsam.bench import count_macs

attn = AttentionConfig(scales=(3,))
if len(sys.argv) > 1:
    print(count_macs(PRESETS[sys.argv[1]], attention=attn).to_table())
    sys.exit()

print(f"{'preset':10s} {'px':>5s} {'params':>12s} {'GMACs':>8s} {'encoder share':>14s}")
for name, cfg in PRESETS.items():
    full = count_macs(cfg, attention=attn)
    enc = count_macs(cfg, attention=attn, scope="encoder")
    print(f"{name:10s} {cfg.input_size:5d} {full.total_params:12,d} {full.total_macs / 1e9:8.3f} "
          f"{enc.total_macs / full.total_macs:14.1%}")
