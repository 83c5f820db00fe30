"""Training loop: seeded batch construction, AdamW with warmup and gradient
clipping, periodic checkpoints, CSV logging, and bit-exact resume.

Each step draws its batch indices, timesteps, noise, and dropout flags from
a Philox stream keyed by (seed, step number), so a resumed run replays the
exact draws of an uninterrupted one without carrying RNG state across the
checkpoint boundary.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import lora as L
from . import model as M
from .config import PROMPT_DROPOUT, RunConfig
from .dataset import SetSample, import_dataset
from .diffusion import NoiseSchedule, TrainBatch, linear_schedule, training_loss
from .model import ConfigError, DiTParameters, ModelConfig
from .optim import AdamW, clip_grad_norm
from .prompts import compose_prompt, token_ids
from .seeding import LANE_TRAIN_STEP, rng_stream
from .serialize import load_bundle, save_bundle
from .tensor import Tensor

LOG_HEADER = "step,loss,lr,seconds\n"


# -- model checkpoint artifacts ------------------------------------------------


def save_model(path: str, params: DiTParameters, cfg: ModelConfig, seed: int,
               extra_meta: Optional[Dict] = None) -> None:
    tensors = {f"param.{name}": p.data for name, p in params.items()}
    meta = {"kind": "model", "model_config": cfg.to_dict(), "seed": seed}
    if extra_meta:
        meta.update(extra_meta)
    save_bundle(path, tensors, meta)


def load_model(path: str) -> Tuple[ModelConfig, DiTParameters, Dict]:
    tensors, meta = load_bundle(path)
    if meta.get("kind") != "model":
        raise ConfigError(f"{path} is not a model checkpoint (kind={meta.get('kind')!r})")
    cfg = ModelConfig.from_dict(meta["model_config"])
    arrays = {}
    for key, arr in tensors.items():
        if not key.startswith("param."):
            raise ConfigError(f"unexpected tensor {key!r} in model checkpoint")
        arrays[key[len("param."):]] = arr
    M.validate_params(cfg, arrays)
    params = {name: Tensor(arr.astype(cfg.np_dtype, copy=False), requires_grad=True)
              for name, arr in arrays.items()}
    return cfg, params, meta


# -- batch construction --------------------------------------------------------


@dataclass
class TrainingData:
    x0: np.ndarray
    text_ids: np.ndarray
    text_mask: np.ndarray


def prepare_training_data(samples: List[SetSample], cfg: ModelConfig) -> TrainingData:
    if not samples:
        raise ConfigError("dataset is empty")
    x0 = np.stack([s.composite.values for s in samples]).astype(cfg.np_dtype)
    ids = np.zeros((len(samples), cfg.text_len), dtype=np.int64)
    mask = np.zeros((len(samples), cfg.text_len), dtype=np.float64)
    for i, s in enumerate(samples):
        ids[i], mask[i] = token_ids(compose_prompt(s.prompt), cfg.vocab_size,
                                    cfg.text_len)
    return TrainingData(x0, ids, mask)


def build_batch(data: TrainingData, schedule: NoiseSchedule, batch_size: int,
                seed: int, step: int) -> TrainBatch:
    """The batch for one absolute step number; a pure function of its args."""
    rng = rng_stream(seed, LANE_TRAIN_STEP, step)
    idx = rng.integers(0, data.x0.shape[0], size=batch_size)
    t = rng.integers(0, schedule.T, size=batch_size)
    eps = rng.standard_normal((batch_size,) + data.x0.shape[1:],
                              dtype=data.x0.dtype)
    drop = rng.random(batch_size) < PROMPT_DROPOUT
    return TrainBatch(data.x0[idx], data.text_ids[idx], data.text_mask[idx],
                      t, eps, drop)


# -- the loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    final_checkpoint: str
    final_artifact: str
    log_path: str
    losses: List[float] = field(default_factory=list)
    params: Optional[DiTParameters] = None
    lora: Optional[L.LoraWeights] = None


def _lr_at(step: int, optim) -> float:
    if optim.warmup_steps > 0 and step <= optim.warmup_steps:
        return optim.lr * step / optim.warmup_steps
    if optim.lr_schedule == "cosine":
        span = max(optim.total_steps - optim.warmup_steps, 1)
        frac = (step - optim.warmup_steps) / span
        return optim.lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))
    return optim.lr


def _checkpoint_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, f"ckpt_step{step:06d}.bin")


def save_train_checkpoint(path: str, config: RunConfig, step: int,
                          params: DiTParameters, opt: AdamW,
                          lora: Optional[L.LoraWeights]) -> None:
    tensors: Dict[str, np.ndarray] = {}
    if config.train_mode == "full":
        tensors.update({f"param.{n}": p.data for n, p in params.items()})
    else:
        tensors.update({f"param.{n}": p.data
                        for n, p in L.trainable_params(lora).items()})
    tensors.update(opt.state_arrays())
    meta = {"kind": "train_checkpoint", "mode": config.train_mode, "step": step,
            "run_config": config.to_dict()}
    save_bundle(path, tensors, meta)


def _restore_checkpoint(path: str, config: RunConfig, params: DiTParameters,
                        opt: AdamW, lora: Optional[L.LoraWeights],
                        trainable: Dict[str, Tensor]) -> int:
    tensors, meta = load_bundle(path)
    if meta.get("kind") != "train_checkpoint":
        raise ConfigError(f"{path} is not a training checkpoint")
    if meta.get("mode") != config.train_mode:
        raise ConfigError(
            f"checkpoint mode {meta.get('mode')!r} != config train_mode {config.train_mode!r}")
    step = int(meta["step"])
    for name, p in trainable.items():
        key = f"param.{name}"
        if key not in tensors:
            raise ConfigError(f"checkpoint missing {key!r}")
        if tensors[key].shape != p.data.shape:
            raise ConfigError(f"checkpoint tensor {key!r} has shape "
                              f"{tensors[key].shape}, expected {p.data.shape}")
        p.data = tensors[key].astype(p.data.dtype, copy=True)
    opt.load_state_arrays(tensors, step)
    return step


def _rewrite_log_upto(path: str, step: int) -> None:
    if not os.path.exists(path):
        return
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    kept = [lines[0]] if lines and lines[0] == LOG_HEADER else [LOG_HEADER]
    for line in lines[1:]:
        try:
            if int(line.split(",", 1)[0]) <= step:
                kept.append(line)
        except ValueError:
            continue
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(kept)


def train(config: RunConfig, out_dir: Optional[str] = None,
          resume_from: Optional[str] = None, stop_after: Optional[int] = None,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Run (or resume) training per config; returns paths and the loss trace.

    stop_after caps the number of absolute steps to run before writing a
    checkpoint and returning, which simulates an interrupted run.
    """
    out_dir = out_dir or os.path.join(config.out_root, "train")
    os.makedirs(out_dir, exist_ok=True)
    cfg = config.model
    schedule = linear_schedule(config.schedule.T, config.schedule.beta_start,
                               config.schedule.beta_end)
    data = prepare_training_data(import_dataset(config.data.root), cfg)

    lora: Optional[L.LoraWeights] = None
    if config.train_mode == "full":
        params = M.init_params(cfg, config.seed)
        trainable: Dict[str, Tensor] = params
    else:
        if not config.base_checkpoint:
            raise ConfigError("LoRA training requires base_checkpoint")
        base_cfg, params, _ = load_model(config.base_checkpoint)
        if base_cfg.to_dict() != cfg.to_dict():
            raise ConfigError("base checkpoint's model config differs from run config")
        for p in params.values():
            p.requires_grad = False
        lora = L.inject(cfg, config.lora, config.seed)
        trainable = L.trainable_params(lora)

    optim = config.optim
    opt = AdamW(trainable, lr=optim.lr, betas=(optim.beta1, optim.beta2),
                eps=optim.eps, weight_decay=optim.weight_decay)

    start_step = 0
    if resume_from is not None:
        start_step = _restore_checkpoint(resume_from, config, params, opt, lora,
                                         trainable)

    log_path = os.path.join(out_dir, "train_log.csv")
    _rewrite_log_upto(log_path, start_step)
    if not os.path.exists(log_path):
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write(LOG_HEADER)

    losses: List[float] = []
    last_step = start_step
    end_step = min(optim.total_steps, stop_after) if stop_after else optim.total_steps
    with open(log_path, "a", encoding="utf-8") as log:
        for step in range(start_step + 1, end_step + 1):
            began = time.perf_counter()
            opt.lr = _lr_at(step, optim)
            batch = build_batch(data, schedule, optim.batch_size, config.seed, step)
            opt.zero_grad()
            loss = training_loss(params, cfg, batch, schedule, lora)
            loss.backward()
            if optim.clip_norm > 0.0:
                clip_grad_norm(trainable, optim.clip_norm)
            opt.step()
            loss_val = float(loss.data)
            losses.append(loss_val)
            seconds = time.perf_counter() - began
            log.write(f"{step},{loss_val!r},{opt.lr!r},{seconds:.6f}\n")
            log.flush()
            last_step = step
            if on_step is not None:
                on_step(step, loss_val)
            if step % optim.checkpoint_every == 0 or step == end_step:
                save_train_checkpoint(_checkpoint_path(out_dir, step), config,
                                      step, params, opt, lora)

    final_ckpt = _checkpoint_path(out_dir, last_step)
    if not os.path.exists(final_ckpt):
        save_train_checkpoint(final_ckpt, config, last_step, params, opt, lora)

    if config.train_mode == "full":
        artifact = os.path.join(out_dir, "model_final.bin")
        save_model(artifact, params, cfg, config.seed, {"step": last_step})
    else:
        artifact = os.path.join(out_dir, "lora_final.bin")
        L.save_lora(artifact, lora, cfg)
    return TrainResult(final_ckpt, artifact, log_path, losses, params, lora)
