"""Diffusion mathematics: the noising schedule, the ε-prediction training
objective with prompt dropout, deterministic DDIM sampling under
classifier-free guidance, and the training-free masked sampler that keeps
known panel regions pinned to their (re-noised) conditioning values.

Sampling is bit-deterministic: all randomness comes from one counter-based
stream per (seed, sample), and the masked sampler blends with np.where so
known cells are copied, never recomputed arithmetically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from . import model as M
from .model import ConfigError, DiTParameters, ModelConfig
from .panels import PanelSet, RegionMask
from .prompts import NULL_ID, TextEmbedding, embed_ids, encode_batch
from .seeding import LANE_SAMPLE, rng_stream
from .tensor import Tensor, no_grad


class ScheduleError(ValueError):
    """Schedule or sampler parameter out of bounds."""


class NaNLossError(RuntimeError):
    """Training loss became NaN; carries batch diagnostics."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


def linear_schedule(T: int = 1000, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be ≥ 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(
            f"need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward-noised x_t = √(ᾱ_t)·x₀ + √(1−ᾱ_t)·ε; t scalar or one per batch row."""
    t = np.asarray(t)
    if (t < 0).any() or (t >= schedule.T).any():
        raise ScheduleError(f"timestep out of range [0, {schedule.T})")
    ab = schedule.alpha_bars[t]
    coeff_x = np.sqrt(ab).astype(x0.dtype)
    coeff_e = np.sqrt(1.0 - ab).astype(x0.dtype)
    extra = x0.ndim - coeff_x.ndim
    coeff_x = coeff_x.reshape(coeff_x.shape + (1,) * extra)
    coeff_e = coeff_e.reshape(coeff_e.shape + (1,) * extra)
    return coeff_x * x0 + coeff_e * eps


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance: float = 6.0
    seed: int = 0
    eta: float = 0.0
    # Clamp each step's x0 prediction to [-clip_x0, clip_x0]. Data lives in
    # [-1, 1], and without the clamp an imperfect ε̂ at high t is divided by
    # √ᾱ_t ≈ 0.006, throwing the trajectory far off-distribution. None
    # disables (raw DDIM recursion, as the stub-model oracles expect).
    clip_x0: Optional[float] = 1.0

    def validate(self, schedule: NoiseSchedule) -> None:
        if not 1 <= self.steps <= schedule.T:
            raise ScheduleError(f"steps must be in [1, {schedule.T}], got {self.steps}")
        if self.guidance < 0.0:
            raise ScheduleError(f"guidance must be ≥ 0, got {self.guidance}")
        if self.eta < 0.0:
            raise ScheduleError(f"eta must be ≥ 0, got {self.eta}")
        if self.clip_x0 is not None and self.clip_x0 <= 0.0:
            raise ScheduleError(f"clip_x0 must be > 0 or None, got {self.clip_x0}")


@dataclass
class TrainBatch:
    """One optimizer step's inputs: clean composites, tokenized prompts,
    per-sample timesteps and noise, and prompt-dropout flags."""

    x0: np.ndarray
    text_ids: np.ndarray
    text_mask: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    drop: np.ndarray


def training_loss(params: DiTParameters, cfg: ModelConfig, batch: TrainBatch,
                  schedule: NoiseSchedule, lora=None) -> Tensor:
    """Mean squared ε-prediction error over every element of the batch;
    dropout-flagged rows are conditioned on the NULL prompt."""
    ids = batch.text_ids.copy()
    mask = batch.text_mask.copy()
    ids[batch.drop] = 0
    ids[batch.drop, 0] = NULL_ID
    mask[batch.drop] = 0.0
    mask[batch.drop, 0] = 1.0

    x_t = q_sample(batch.x0, batch.t, batch.eps, schedule)
    text = embed_ids(params["text.table"], ids, mask)
    eps_hat = M.forward(params, cfg, Tensor(x_t), batch.t, text, lora)
    diff = eps_hat - Tensor(batch.eps.astype(cfg.np_dtype, copy=False))
    loss = (diff * diff).mean()
    if np.isnan(loss.data):
        raise NaNLossError(
            f"loss is NaN (timesteps {batch.t.tolist()}, "
            f"max|x_t| {float(np.abs(x_t).max()):.3e}, "
            f"max|eps_hat| {float(np.abs(eps_hat.data).max()):.3e})")
    return loss


DenoiseFn = Callable[[np.ndarray, int], np.ndarray]


def cfg_predict(denoise: Callable[[np.ndarray, int, TextEmbedding], np.ndarray],
                x_t: np.ndarray, t: int, cond: TextEmbedding, uncond: TextEmbedding,
                s: float) -> np.ndarray:
    """Classifier-free-guided prediction ε_u + s·(ε_c − ε_u); two forwards.

    s = 1 returns the conditional forward and s = 0 the unconditional one
    as-is, so those identity cases hold bit-exactly.
    """
    e_c = denoise(x_t, t, cond)
    e_u = denoise(x_t, t, uncond)
    if s == 1.0:
        return e_c
    if s == 0.0:
        return e_u
    dtype = e_u.dtype.type
    return e_u + dtype(s) * (e_c - e_u)


def sample_timesteps(T: int, steps: int) -> np.ndarray:
    """`steps` timesteps evenly strided from T−1 down to 0, inclusive."""
    return np.linspace(T - 1, 0, steps).round().astype(np.int64)


def ddim_loop(denoise: DenoiseFn, schedule: NoiseSchedule, sampler: SamplerConfig,
              shape, rng: np.random.Generator,
              on_step: Optional[Callable[[int, Optional[int], np.ndarray, np.random.Generator], np.ndarray]] = None,
              dtype=np.float32) -> np.ndarray:
    """Core DDIM (eta=0 deterministic) recursion from seeded Gaussian x_T.

    on_step(i, t_next, x, rng) may transform the state after each update
    (t_next is None on the final step); the masked sampler hooks in here.
    """
    sampler.validate(schedule)
    ts = sample_timesteps(schedule.T, sampler.steps)
    ab = schedule.alpha_bars
    x = rng.standard_normal(shape, dtype=dtype)
    for i, t in enumerate(ts):
        t = int(t)
        eps_hat = denoise(x, t)
        ab_t = float(ab[t])
        x0p = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        if sampler.clip_x0 is not None:
            x0p = np.clip(x0p, -sampler.clip_x0, sampler.clip_x0)
        if i + 1 == len(ts):
            x, t_next = x0p, None
        else:
            t_next = int(ts[i + 1])
            ab_n = float(ab[t_next])
            if sampler.eta > 0.0:
                sigma = sampler.eta * math.sqrt((1.0 - ab_n) / (1.0 - ab_t)) \
                    * math.sqrt(1.0 - ab_t / ab_n)
                x = math.sqrt(ab_n) * x0p \
                    + math.sqrt(max(1.0 - ab_n - sigma * sigma, 0.0)) * eps_hat \
                    + dtype(sigma) * rng.standard_normal(shape, dtype=dtype)
            else:
                x = math.sqrt(ab_n) * x0p + math.sqrt(1.0 - ab_n) * eps_hat
        if on_step is not None:
            x = on_step(i, t_next, x, rng)
    return x


def make_guided_denoiser(params: DiTParameters, cfg: ModelConfig, prompt_text: str,
                         guidance: float, lora=None) -> DenoiseFn:
    """Single-composite denoiser closing over CFG cond/uncond embeddings."""
    with no_grad():
        cond = encode_batch([prompt_text], params["text.table"], cfg.text_len)
        uncond = encode_batch([""], params["text.table"], cfg.text_len,
                              null_flags=np.array([True]))

    def model_eps(x: np.ndarray, t: int, text: TextEmbedding) -> np.ndarray:
        with no_grad():
            out = M.forward(params, cfg, Tensor(x[None]), np.array([t]), text, lora)
        return out.data[0]

    return lambda x, t: cfg_predict(model_eps, x, t, cond, uncond, guidance)


def sample(params: DiTParameters, cfg: ModelConfig, schedule: NoiseSchedule,
           sampler: SamplerConfig, prompt_text: str, shape, lora=None) -> np.ndarray:
    """Deterministic guided DDIM sample of one composite with the given shape."""
    denoise = make_guided_denoiser(params, cfg, prompt_text, sampler.guidance, lora)
    rng = rng_stream(sampler.seed, LANE_SAMPLE)
    return ddim_loop(denoise, schedule, sampler, tuple(shape), rng,
                     dtype=cfg.np_dtype)


def _known_composite(panel_set: PanelSet, mask: RegionMask) -> np.ndarray:
    layout = panel_set.layout
    shape = mask.values.shape
    if len(shape) != 4:
        raise ConfigError(f"mask must cover a F×C×H×W composite, got {shape}")
    f, c, h, w = shape
    if layout.axis == layout.TEMPORAL:
        if f % layout.cols:
            raise ConfigError(f"{f} frames not divisible into {layout.cols} temporal panels")
        panel_shape = (f // layout.cols, c, h, w)
    else:
        if h % layout.rows or w % layout.cols:
            raise ConfigError(
                f"extents {h}x{w} not divisible by spatial grid {layout.rows}x{layout.cols}")
        panel_shape = (f, c, h // layout.rows, w // layout.cols)
    known = np.zeros(shape, dtype=mask.values.dtype)
    for idx, panel in enumerate(panel_set.panels):
        region = layout.panel_slices(idx, panel_shape)
        if panel is None:
            if not (mask.values[region] == 1).all():
                raise ConfigError(
                    f"panel {idx} is not supplied but its region is not fully masked "
                    f"for generation")
        else:
            if panel.shape != panel_shape:
                raise ConfigError(
                    f"panel {idx} has shape {panel.shape}, layout expects {panel_shape}")
            known[region] = panel.values
    return known


def masked_sample(params: DiTParameters, cfg: ModelConfig, schedule: NoiseSchedule,
                  sampler: SamplerConfig, prompt_text: str, panel_set: PanelSet,
                  mask: RegionMask, lora=None) -> np.ndarray:
    """Sample only the mask-1 regions; mask-0 regions are re-noised known
    panels during the loop and returned exactly as supplied at the end."""
    known = _known_composite(panel_set, mask).astype(cfg.np_dtype)
    generate = mask.values != 0
    denoise = make_guided_denoiser(params, cfg, prompt_text, sampler.guidance, lora)
    rng = rng_stream(sampler.seed, LANE_SAMPLE)

    def blend(i: int, t_next: Optional[int], x: np.ndarray,
              step_rng: np.random.Generator) -> np.ndarray:
        if t_next is None:
            return np.where(generate, x, known)
        fresh = step_rng.standard_normal(x.shape, dtype=x.dtype)
        return np.where(generate, x, q_sample(known, t_next, fresh, schedule))

    return ddim_loop(denoise, schedule, sampler, known.shape, rng,
                     on_step=blend, dtype=cfg.np_dtype)
