"""AdamW optimizer with decoupled weight decay, plus gradient clipping.

State (first/second moments, step counter) is plain numpy so checkpoints
round-trip bit-exact and resumed runs continue identically.
"""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from .tensor import Tensor


class OptimizerError(RuntimeError):
    """Training-time optimizer failure (NaN gradients, state mismatch)."""


class AdamW:
    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """One decoupled-weight-decay adaptive update over all parameters.

        Parameters with no gradient this step are treated as zero-gradient
        (their moments still decay, and weight decay still applies).
        """
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name in self.params:
            p = self.params[name]
            g = p.grad
            if g is not None and np.isnan(g).any():
                raise OptimizerError(f"NaN gradient for parameter {name!r} at step {t}")
            m, v = self.m[name], self.v[name]
            if g is None:
                m *= self.beta1
                v *= self.beta2
            else:
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    # -- checkpoint support --------------------------------------------------

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step_count: int) -> None:
        for name, p in self.params.items():
            for prefix, store in (("adam.m.", self.m), ("adam.v.", self.v)):
                key = prefix + name
                if key not in arrays:
                    raise OptimizerError(f"optimizer state missing {key!r}")
                arr = arrays[key]
                if arr.shape != p.data.shape:
                    raise OptimizerError(
                        f"optimizer state {key!r} shape {arr.shape} != parameter {p.data.shape}")
                store[name] = arr.astype(p.data.dtype, copy=False)
        self.step_count = int(step_count)


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Accumulation runs over sorted names so the norm is reproducible.
    Returns the pre-clip norm.
    """
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = float(np.sqrt(total))
    if max_norm > 0.0 and norm > max_norm:
        scale = np.asarray(max_norm / norm)
        for name in sorted(params):
            g = params[name].grad
            if g is not None:
                g *= scale.astype(g.dtype)
    return norm
