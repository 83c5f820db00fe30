"""Low-rank adapters on the transformer's projection weights.

Each targeted weight W (stored d_in × d_out) gets a pair A: r × d_in,
B: d_out × r; the adapted forward adds (alpha/r)·(x·Aᵀ)·Bᵀ. B starts at
exactly zero, so a freshly injected adapter is a bit-exact no-op, and
merging folds (alpha/r)·(B·A)ᵀ into W.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np

from .model import ConfigError, DiTParameters, ModelConfig, expected_shapes
from .seeding import LANE_LORA, rng_stream
from .serialize import SerializationError, load_bundle, save_bundle
from .tensor import Tensor

DEFAULT_TARGETS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo",
                   "mlp.fc1.w", "mlp.fc2.w")


@dataclass(frozen=True)
class LoraSpec:
    rank: int = 32
    alpha: float = 32.0
    targets: Tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be ≥ 1, got {self.rank}")
        object.__setattr__(self, "targets", tuple(self.targets))

    def to_dict(self) -> Dict[str, Any]:
        return {"rank": self.rank, "alpha": self.alpha, "targets": list(self.targets)}

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "LoraSpec":
        return LoraSpec(rank=d["rank"], alpha=d["alpha"], targets=tuple(d["targets"]))


@dataclass
class LoraWeights:
    spec: LoraSpec
    a: Dict[str, Tensor]
    b: Dict[str, Tensor]
    seed: int


def resolve_targets(cfg: ModelConfig, spec: LoraSpec) -> Dict[str, Tuple[int, int]]:
    """Full weight names targeted by the spec, with (d_in, d_out), validated."""
    shapes = expected_shapes(cfg)
    per_block = {name.split(".", 2)[2]
                 for name in shapes if name.startswith("blocks.0.")}
    out: Dict[str, Tuple[int, int]] = {}
    for target in spec.targets:
        if target not in per_block:
            raise ConfigError(f"unknown LoRA target {target!r}")
        for i in range(cfg.depth):
            full = f"blocks.{i}.{target}"
            d_in, d_out = shapes[full]
            if spec.rank > min(d_in, d_out):
                raise ConfigError(
                    f"LoRA rank {spec.rank} exceeds min dimension {min(d_in, d_out)} "
                    f"of target {full!r}")
            out[full] = (d_in, d_out)
    return out


def inject(cfg: ModelConfig, spec: LoraSpec, seed: int) -> LoraWeights:
    """Fresh adapter: A ~ N(0, 1/r), B = 0, per targeted layer."""
    targets = resolve_targets(cfg, spec)
    rng = rng_stream(seed, LANE_LORA)
    std = spec.rank ** -0.5
    a: Dict[str, Tensor] = {}
    b: Dict[str, Tensor] = {}
    for full in sorted(targets):
        d_in, d_out = targets[full]
        a[full] = Tensor((rng.standard_normal((spec.rank, d_in)) * std).astype(cfg.np_dtype),
                         requires_grad=True)
        b[full] = Tensor(np.zeros((d_out, spec.rank), dtype=cfg.np_dtype),
                         requires_grad=True)
    return LoraWeights(spec, a, b, seed)


def delta_arrays(lora: LoraWeights) -> Dict[str, np.ndarray]:
    """(alpha/r)·(B·A)ᵀ per target, shaped like the stored weight."""
    scale = lora.spec.alpha / lora.spec.rank
    return {full: scale * (lora.b[full].data @ lora.a[full].data).T
            for full in lora.a}


def merge(params: DiTParameters, lora: LoraWeights) -> DiTParameters:
    """Parameters with the adapter folded in; untargeted tensors are shared."""
    deltas = delta_arrays(lora)
    merged: DiTParameters = {}
    for name, p in params.items():
        if name in deltas:
            if deltas[name].shape != p.data.shape:
                raise ConfigError(
                    f"adapter delta for {name!r} has shape {deltas[name].shape}, "
                    f"weight is {p.data.shape}")
            merged[name] = Tensor(p.data + deltas[name].astype(p.data.dtype),
                                  requires_grad=p.requires_grad)
        else:
            merged[name] = p
    return merged


def unmerge(params: DiTParameters, lora: LoraWeights) -> DiTParameters:
    deltas = delta_arrays(lora)
    out: DiTParameters = {}
    for name, p in params.items():
        if name in deltas:
            out[name] = Tensor(p.data - deltas[name].astype(p.data.dtype),
                               requires_grad=p.requires_grad)
        else:
            out[name] = p
    return out


def trainable_params(lora: LoraWeights) -> Dict[str, Tensor]:
    """The adapter's tensors under optimizer-facing names."""
    out: Dict[str, Tensor] = {}
    for full in sorted(lora.a):
        out[f"lora.{full}.a"] = lora.a[full]
        out[f"lora.{full}.b"] = lora.b[full]
    return out


def save_lora(path: str, lora: LoraWeights, cfg: ModelConfig) -> None:
    tensors = {name: t.data for name, t in trainable_params(lora).items()}
    meta = {"kind": "lora", "spec": lora.spec.to_dict(), "seed": lora.seed,
            "model_config": cfg.to_dict()}
    save_bundle(path, tensors, meta)


def load_lora(path: str, cfg: ModelConfig) -> LoraWeights:
    tensors, meta = load_bundle(path)
    if meta.get("kind") != "lora":
        raise SerializationError(f"{path} is not a LoRA checkpoint")
    spec = LoraSpec.from_dict(meta["spec"])
    targets = resolve_targets(cfg, spec)
    a: Dict[str, Tensor] = {}
    b: Dict[str, Tensor] = {}
    for full in sorted(targets):
        d_in, d_out = targets[full]
        for suffix, store, shape in (("a", a, (spec.rank, d_in)),
                                     ("b", b, (d_out, spec.rank))):
            key = f"lora.{full}.{suffix}"
            if key not in tensors:
                raise ConfigError(f"LoRA checkpoint missing {key!r} for this model config")
            if tuple(tensors[key].shape) != shape:
                raise ConfigError(
                    f"LoRA tensor {key!r} has shape {tensors[key].shape}, expected {shape}")
            store[full] = Tensor(tensors[key].astype(cfg.np_dtype, copy=False),
                                 requires_grad=True)
    expected = {f"lora.{full}.{sfx}" for full in targets for sfx in ("a", "b")}
    extra = set(tensors) - expected
    if extra:
        raise ConfigError(f"LoRA checkpoint has unexpected tensors {sorted(extra)}")
    return LoraWeights(spec, a, b, int(meta.get("seed", 0)))
