"""Joint multi-panel video generation at desk scale.

A set of related sub-videos ("panels") is concatenated along the spatial or
temporal axis and denoised as one composite by a toy video diffusion
transformer under a single unified prompt, so shared identity emerges from
joint attention. Conditional generation masks known panel regions during
sampling; LoRA adapters provide cheap task tuning.
"""

from .config import (DataParams, OptimParams, RunConfig, SamplerParams,
                     ScheduleParams, config_from_dict, load_config)
from .dataset import (PALETTE, ClipRecord, SetSample, SynthParams,
                      build_set_samples, dominant_color_probe, export_dataset,
                      import_dataset, synth_generate)
from .diffusion import (NoiseSchedule, SamplerConfig, TrainBatch, cfg_predict,
                        linear_schedule, masked_sample, q_sample, sample,
                        training_loss)
from .lora import LoraSpec, LoraWeights, inject, load_lora, merge, save_lora, unmerge
from .model import (DiTParameters, ModelConfig, expected_shapes, forward,
                    init_params, patchify, unpatchify)
from .optim import AdamW, clip_grad_norm
from .panels import (PanelLayout, PanelSet, RegionMask, VideoTensor, build_mask,
                     compose_panels, split_panels)
from .prompts import (PromptSet, compose_prompt, encode_text, null_prompt,
                      parse_prompt)
from .tensor import Tensor, no_grad
from .training import TrainResult, load_model, save_model, train

__version__ = "0.1.0"
