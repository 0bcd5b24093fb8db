"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, precision


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a tensor of any shape; non-scalar outputs are
    contracted with a fixed random projection so every output element
    contributes. Both the analytic and the numeric pass run in float64,
    so the check measures the backward rules rather than f32 round-off.
    The relative error per element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError("h must lie in [1e-4, 1e-2]")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    proj = None

    with precision(np.float64):
        def scalar(arr: np.ndarray, tape: Tape | None = None) -> Tensor:
            nonlocal proj
            t = Tensor(arr, requires_grad=tape is not None)
            y = f(t)
            if proj is None:
                proj = np.random.default_rng(seed).standard_normal(y.shape) if y.size > 1 else np.ones(y.shape)
            return t, (y * proj).sum() if y.size > 1 else y.reshape(())

        with Tape() as tape:
            t, loss = scalar(base.copy(), tape)
        tape.backward(loss)
        analytic = t.grad.astype(np.float64)

        numeric = np.empty_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar(base)[1].item()
            flat[i] = orig - h
            fm = scalar(base)[1].item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
