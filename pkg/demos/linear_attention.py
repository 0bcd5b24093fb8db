"""Why ReLU linear attention is cheap.

Both attention forms compute the same output. The quadratic one builds an
N x N similarity matrix; the fast one reassociates the product so the work
grows linearly with sequence length. This script checks the two agree,
prints the MAC counts and times them at a few lengths.

    python demos/linear_attention.py
"""
import numpy as np

from evsam.attention import relu_linear_attention_fast, relu_linear_attention_quadratic
from evsam.bench import attention_scaling, fast_attention_macs, quadratic_attention_macs
from evsam.nn.tensor import Tensor

rng = np.random.default_rng(0)
q, k, v = (Tensor(rng.standard_normal((256, 16), dtype=np.float32)) for _ in range(3))
fast = relu_linear_attention_fast(q, k, v).data
quad = relu_linear_attention_quadratic(q, k, v).data
print(f"N=256 d=16: max |fast - quadratic| = {np.abs(fast - quad).max():.2e}")

print("\n    N   d   fast MACs  quadratic MACs")
for n in (256, 1024, 4096):
    d = 32
    print(f"{n:5d} {d:3d} {fast_attention_macs(n, d):11,d} {quadratic_attention_macs(n, d):15,d}")

# the fast form stops being cheaper once the head width reaches the sequence length
print("\ncrossover at d = N:", fast_attention_macs(32, 31) < quadratic_attention_macs(32, 31),
      fast_attention_macs(32, 32) < quadratic_attention_macs(32, 32))

print()
print(attention_scaling(ns=(512, 1024, 2048), d=32, reps=5).to_table())
