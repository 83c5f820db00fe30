"""Toy video diffusion transformer.

The composite video is cut into 3D patches (p_t × p_h × p_w blocks across
all channels), each patch becoming one token. Text tokens are prefixed to
the video tokens and the whole sequence runs through full bidirectional
attention; the diffusion timestep conditions every block through adaLN-zero
modulation (shift/scale/gate pairs around attention and MLP, all emitted by
zero-initialized heads). The final projection is zero-initialized too, so a
fresh model predicts exactly zero noise.

Parameters live in a flat name → Tensor dict; the names double as the
checkpoint manifest and as LoRA target selectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .prompts import TextEmbedding
from .seeding import LANE_INIT, rng_stream
from .tensor import Tensor

DiTParameters = Dict[str, Tensor]

_NP_DTYPES = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    """Model configuration inconsistent with itself or with an input."""


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    depth: int = 4
    heads: int = 4
    patch: Tuple[int, int, int] = (1, 4, 4)
    channels: int = 3
    text_len: int = 64
    vocab_size: int = 8192
    time_freq_dim: int = 64
    max_frames: int = 32
    max_rows: int = 16
    max_cols: int = 16
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.dim < 1 or self.depth < 1 or self.heads < 1:
            raise ConfigError("dim, depth, heads must be ≥ 1")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ConfigError(f"patch must be three extents ≥ 1, got {self.patch}")
        if self.time_freq_dim < 2 or self.time_freq_dim % 2:
            raise ConfigError("time_freq_dim must be even and ≥ 2")
        if self.vocab_size <= 2:
            raise ConfigError("vocab_size must exceed the 2 reserved ids")
        if self.text_len < 1:
            raise ConfigError("text_len must be ≥ 1")
        if self.dtype not in _NP_DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_NP_DTYPES)}")
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))

    @property
    def np_dtype(self):
        return _NP_DTYPES[self.dtype]

    @property
    def token_dim(self) -> int:
        pt, ph, pw = self.patch
        return pt * self.channels * ph * pw

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dim": self.dim, "depth": self.depth, "heads": self.heads,
            "patch": list(self.patch), "channels": self.channels,
            "text_len": self.text_len, "vocab_size": self.vocab_size,
            "time_freq_dim": self.time_freq_dim, "max_frames": self.max_frames,
            "max_rows": self.max_rows, "max_cols": self.max_cols, "dtype": self.dtype,
        }

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["patch"] = tuple(d["patch"])
        return ModelConfig(**d)


def expected_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name and shape, in canonical order."""
    d, k = cfg.dim, cfg.token_dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch_embed.w": (k, d), "patch_embed.b": (d,),
        "text.table": (cfg.vocab_size, d),
        "pos.frame": (cfg.max_frames, d),
        "pos.row": (cfg.max_rows, d),
        "pos.col": (cfg.max_cols, d),
        "time.fc1.w": (cfg.time_freq_dim, d), "time.fc1.b": (d,),
        "time.fc2.w": (d, d), "time.fc2.b": (d,),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes[p + "attn.wq"] = (d, d)
        shapes[p + "attn.bq"] = (d,)
        shapes[p + "attn.wk"] = (d, d)
        shapes[p + "attn.bk"] = (d,)
        shapes[p + "attn.wv"] = (d, d)
        shapes[p + "attn.bv"] = (d,)
        shapes[p + "attn.wo"] = (d, d)
        shapes[p + "attn.bo"] = (d,)
        shapes[p + "mlp.fc1.w"] = (d, 4 * d)
        shapes[p + "mlp.fc1.b"] = (4 * d,)
        shapes[p + "mlp.fc2.w"] = (4 * d, d)
        shapes[p + "mlp.fc2.b"] = (d,)
        shapes[p + "ada.w"] = (d, 6 * d)
        shapes[p + "ada.b"] = (6 * d,)
    shapes["final.ada.w"] = (d, 2 * d)
    shapes["final.ada.b"] = (2 * d,)
    shapes["final.proj.w"] = (d, k)
    shapes["final.proj.b"] = (k,)
    return shapes


def _zero_initialized(name: str) -> bool:
    # adaLN heads and the final layer start at exactly zero; biases too.
    return (".ada." in name or name.startswith("final.")
            or name.split(".")[-1].startswith("b"))


def _trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...],
                  std: float) -> np.ndarray:
    vals = rng.standard_normal(shape)
    bad = np.abs(vals) > 2.0
    while bad.any():
        vals[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(vals) > 2.0
    return vals * std


def init_params(cfg: ModelConfig, seed: int) -> DiTParameters:
    """Truncated-normal (σ=0.02, clipped at 2σ) weights; adaLN modulation
    heads, the final projection, and all biases exactly zero."""
    rng = rng_stream(seed, LANE_INIT)
    params: DiTParameters = {}
    for name, shape in expected_shapes(cfg).items():
        if _zero_initialized(name):
            data = np.zeros(shape, dtype=cfg.np_dtype)
        else:
            data = _trunc_normal(rng, shape, 0.02).astype(cfg.np_dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def validate_params(cfg: ModelConfig, params: Dict[str, np.ndarray]) -> None:
    """Structure check for loaded checkpoints; raises naming the mismatch."""
    want = expected_shapes(cfg)
    for name, shape in want.items():
        if name not in params:
            raise ConfigError(f"missing parameter {name!r}")
        got = tuple(params[name].shape)
        if got != shape:
            raise ConfigError(f"parameter {name!r} has shape {got}, expected {shape}")
    extra = set(params) - set(want)
    if extra:
        raise ConfigError(f"unexpected parameters {sorted(extra)}")


# -- tokenization of the video volume -----------------------------------------


def _grid(cfg: ModelConfig, shape: Tuple[int, ...]) -> Tuple[int, int, int]:
    _, f, c, h, w = shape
    pt, ph, pw = cfg.patch
    if c != cfg.channels:
        raise ConfigError(f"input has {c} channels, config says {cfg.channels}")
    if f % pt or h % ph or w % pw:
        raise ConfigError(f"extents {(f, h, w)} not divisible by patch {cfg.patch}")
    ft, hp, wp = f // pt, h // ph, w // pw
    if ft > cfg.max_frames or hp > cfg.max_rows or wp > cfg.max_cols:
        raise ConfigError(
            f"patch grid {(ft, hp, wp)} exceeds position tables "
            f"{(cfg.max_frames, cfg.max_rows, cfg.max_cols)}")
    return ft, hp, wp


def patchify(x: Tensor, cfg: ModelConfig) -> Tensor:
    """(B,F,C,H,W) → (B,N,K) tokens; each flattens one p_t×C×p_h×p_w block."""
    b = x.shape[0]
    ft, hp, wp = _grid(cfg, x.shape)
    pt, ph, pw = cfg.patch
    x = x.reshape((b, ft, pt, cfg.channels, hp, ph, wp, pw))
    x = x.transpose((0, 1, 4, 6, 2, 3, 5, 7))
    return x.reshape((b, ft * hp * wp, cfg.token_dim))


def unpatchify(tokens: Tensor, cfg: ModelConfig, shape: Tuple[int, ...]) -> Tensor:
    b, f, c, h, w = shape
    ft, hp, wp = _grid(cfg, shape)
    pt, ph, pw = cfg.patch
    x = tokens.reshape((b, ft, hp, wp, pt, c, ph, pw))
    x = x.transpose((0, 1, 4, 5, 2, 6, 3, 7))
    return x.reshape((b, f, c, h, w))


def _position_embedding(params: DiTParameters, grid: Tuple[int, int, int]) -> Tensor:
    ft, hp, wp = grid
    fids, rids, cids = np.meshgrid(np.arange(ft), np.arange(hp), np.arange(wp),
                                   indexing="ij")
    pos = T.embedding(params["pos.frame"], fids.reshape(-1))
    pos = pos + T.embedding(params["pos.row"], rids.reshape(-1))
    return pos + T.embedding(params["pos.col"], cids.reshape(-1))


def timestep_features(t: np.ndarray, dim: int, np_dtype) -> np.ndarray:
    """Sinusoidal features of integer timesteps: cos half then sin half."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(np_dtype)


def _linear(x: Tensor, params: DiTParameters, wname: str, bname: Optional[str],
            lora=None) -> Tensor:
    y = x @ params[wname]
    if bname is not None:
        y = y + params[bname]
    if lora is not None and wname in lora.a:
        scale = lora.spec.alpha / lora.spec.rank
        delta = (x @ lora.a[wname].transpose((1, 0))) @ lora.b[wname].transpose((1, 0))
        y = y + delta * scale
    return y


def _modulate(h: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return h * (scale + 1.0) + shift


def _attention(x: Tensor, params: DiTParameters, cfg: ModelConfig, i: int,
               key_add: np.ndarray, lora) -> Tensor:
    b, s, d = x.shape
    heads, dh = cfg.heads, cfg.dim // cfg.heads
    pre = f"blocks.{i}.attn."
    q = _linear(x, params, pre + "wq", pre + "bq", lora)
    k = _linear(x, params, pre + "wk", pre + "bk", lora)
    v = _linear(x, params, pre + "wv", pre + "bv", lora)
    q = (q * float(dh ** -0.5)).reshape((b, s, heads, dh)).transpose((0, 2, 1, 3))
    kt = k.reshape((b, s, heads, dh)).transpose((0, 2, 3, 1))
    v = v.reshape((b, s, heads, dh)).transpose((0, 2, 1, 3))
    probs = T.softmax(q @ kt, axis=-1, additive_mask=key_add)
    out = (probs @ v).transpose((0, 2, 1, 3)).reshape((b, s, d))
    return _linear(out, params, pre + "wo", pre + "bo", lora)


def _mlp(x: Tensor, params: DiTParameters, i: int, lora) -> Tensor:
    pre = f"blocks.{i}.mlp."
    h = T.gelu(_linear(x, params, pre + "fc1.w", pre + "fc1.b", lora))
    return _linear(h, params, pre + "fc2.w", pre + "fc2.b", lora)


def _six_way(c: Tensor, params: DiTParameters, i: int) -> Tuple[Tensor, ...]:
    d = c.shape[-1]
    h = T.gelu(c) @ params[f"blocks.{i}.ada.w"] + params[f"blocks.{i}.ada.b"]
    b = h.shape[0]
    return tuple(h[:, j * d:(j + 1) * d].reshape((b, 1, d)) for j in range(6))


def forward(params: DiTParameters, cfg: ModelConfig, x: Tensor, t: np.ndarray,
            text: TextEmbedding, lora=None) -> Tensor:
    """Predict the noise in composite x at timesteps t (one per batch row)."""
    if x.ndim != 5:
        raise ConfigError(f"expected batched video (B,F,C,H,W), got {x.shape}")
    t = np.asarray(t)
    if t.shape != (x.shape[0],) or (t < 0).any():
        raise ConfigError(f"timesteps must be one non-negative step per batch row")
    if text.values.ndim != 3 or text.values.shape[0] != x.shape[0] \
            or text.values.shape[1] != cfg.text_len or text.values.shape[2] != cfg.dim:
        raise ConfigError(
            f"text embedding shape {text.values.shape} does not match "
            f"(B, {cfg.text_len}, {cfg.dim})")
    if x.dtype != cfg.np_dtype or text.values.dtype != cfg.np_dtype:
        raise ConfigError(f"inputs must be {cfg.dtype}")

    b, L = x.shape[0], cfg.text_len
    grid = _grid(cfg, x.shape)
    n = grid[0] * grid[1] * grid[2]

    h = patchify(x, cfg)
    h = _linear(h, params, "patch_embed.w", "patch_embed.b")
    h = h + _position_embedding(params, grid)
    seq = T.concat([text.values, h], axis=1)

    key_add = np.zeros((b, 1, 1, L + n), dtype=cfg.np_dtype)
    key_add[:, 0, 0, :L] = (1.0 - text.mask) * -1e9

    tfeat = Tensor(timestep_features(t, cfg.time_freq_dim, cfg.np_dtype))
    c = T.gelu(_linear(tfeat, params, "time.fc1.w", "time.fc1.b"))
    c = _linear(c, params, "time.fc2.w", "time.fc2.b")

    for i in range(cfg.depth):
        shift1, scale1, gate1, shift2, scale2, gate2 = _six_way(c, params, i)
        attn_in = _modulate(T.layer_norm(seq, None, None), shift1, scale1)
        seq = seq + gate1 * _attention(attn_in, params, cfg, i, key_add, lora)
        mlp_in = _modulate(T.layer_norm(seq, None, None), shift2, scale2)
        seq = seq + gate2 * _mlp(mlp_in, params, i, lora)

    d = cfg.dim
    hfin = T.gelu(c) @ params["final.ada.w"] + params["final.ada.b"]
    shift = hfin[:, :d].reshape((b, 1, d))
    scale = hfin[:, d:].reshape((b, 1, d))
    video = _modulate(T.layer_norm(seq, None, None), shift, scale)[:, L:, :]
    out = _linear(video, params, "final.proj.w", "final.proj.b")
    return unpatchify(out, cfg, x.shape)
