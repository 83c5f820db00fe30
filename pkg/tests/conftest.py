"""Shared numeric helpers for the test suite."""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from panelgen.model import ModelConfig
from panelgen.tensor import Tensor


def numeric_grad(loss_fn: Callable[[], float], x: np.ndarray,
                 eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of loss_fn() w.r.t. x (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn()
        flat[i] = orig - eps
        lo = loss_fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def perturb_params(params: Dict[str, Tensor], seed: int = 0,
                   scale: float = 0.05) -> Dict[str, Tensor]:
    """Add noise to every parameter so zero-initialized heads become live.

    Freshly initialized models output exactly zero (adaLN gates and the final
    projection start at zero), which makes forward-comparison tests vacuous.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data = p.data + (scale * rng.standard_normal(p.data.shape)).astype(p.data.dtype)
    return params


def tiny_config(dtype: str = "float32", **overrides) -> ModelConfig:
    """A model small enough for exhaustive gradient and equality checks."""
    fields = dict(dim=16, depth=2, heads=2, patch=(1, 2, 2), channels=1,
                  text_len=6, vocab_size=32, time_freq_dim=16,
                  max_frames=8, max_rows=8, max_cols=8, dtype=dtype)
    fields.update(overrides)
    return ModelConfig(**fields)
