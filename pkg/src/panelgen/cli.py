"""Command-line surface: synth-data, train, sample, inpaint, split,
probe-consistency, inspect.

Every command resolves one RunConfig (profile defaults + config file + CLI
overrides), echoes it into the output directory's metadata, and is a pure
function of that config plus its input files: reruns produce byte-identical
outputs (the training log's wall-time column aside).
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diffusion as D
from . import lora as LR
from . import training as TR
from .config import RunConfig, load_config
from .consistency import run_probe
from .dataset import (DatasetError, SynthParams, build_set_samples, export_dataset,
                      import_dataset, synth_generate)
from .model import ConfigError
from .optim import OptimizerError
from .panels import (LayoutError, PanelLayout, PanelSet, VideoTensor, build_mask,
                     compose_panels, split_panels)
from .prompts import PromptFormatError, parse_prompt
from .serialize import (SerializationError, load_bundle, load_tensor, read_json,
                        save_tensor, write_json, write_ppm)

_USER_ERRORS = (ConfigError, DatasetError, LayoutError, PromptFormatError,
                SerializationError, D.ScheduleError, D.NaNLossError,
                OptimizerError, FileNotFoundError)


def _write_run_meta(out_dir: str, config: RunConfig, command: str,
                    extra: Optional[Dict] = None) -> None:
    doc = {"command": command, "config": config.to_dict()}
    if extra:
        doc.update(extra)
    write_json(os.path.join(out_dir, "run_meta.json"), doc)


def _resolve_layout(config: RunConfig, override: Optional[str]) -> PanelLayout:
    return PanelLayout.parse(override or config.data.layout)


def _panel_shape(config: RunConfig) -> tuple:
    return (config.data.frames, config.model.channels,
            config.data.image_side, config.data.image_side)


def cmd_synth_data(config: RunConfig, out: Optional[str]) -> int:
    root = out or config.data.root
    layout = PanelLayout.parse(config.data.layout)
    params = SynthParams(image_side=config.data.image_side,
                         frames=config.data.frames,
                         sprite_side=config.data.sprite_side,
                         panels_per_sample=layout.panel_count,
                         layout=layout,
                         palette=tuple(config.data.palette),
                         seed=config.seed)
    records = synth_generate(params, config.data.sources)
    samples, report = build_set_samples(records, layout, layout.panel_count, 0)
    manifest = export_dataset(samples, root)
    print(f"wrote {report.built} samples to {manifest}")
    if report.skipped:
        print(f"skipped sources: {', '.join(report.skipped)}", file=sys.stderr)
    return 0


def cmd_train(config: RunConfig, out: Optional[str], resume: Optional[str],
              stop_after: Optional[int]) -> int:
    out_dir = out or os.path.join(config.out_root, "train")
    os.makedirs(out_dir, exist_ok=True)
    _write_run_meta(out_dir, config, "train")

    def progress(step: int, loss: float) -> None:
        if step % 100 == 0 or step == 1:
            print(f"step {step}/{config.optim.total_steps} loss {loss:.4f}",
                  file=sys.stderr)

    result = TR.train(config, out_dir=out_dir, resume_from=resume,
                      stop_after=stop_after, on_step=progress)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"model artifact: {result.final_artifact}")
    print(f"log: {result.log_path}")
    return 0


def _load_model_and_lora(config: RunConfig, checkpoint: str, lora_path: Optional[str]):
    cfg, params, _ = TR.load_model(checkpoint)
    if cfg.to_dict() != config.model.to_dict():
        raise ConfigError("checkpoint model config differs from run config; "
                          "pass a matching --config/--profile")
    lora = LR.load_lora(lora_path, cfg) if lora_path else None
    return cfg, params, lora


def _read_prompt(prompt: Optional[str], prompt_file: Optional[str]) -> str:
    if (prompt is None) == (prompt_file is None):
        raise ConfigError("provide exactly one of --prompt / --prompt-file")
    if prompt_file is not None:
        with open(prompt_file, "r", encoding="utf-8") as fh:
            return fh.read().rstrip("\n")
    return prompt


def _sampler_config(config: RunConfig, steps: Optional[int], guidance: Optional[float],
                    eta: Optional[float]) -> D.SamplerConfig:
    s = config.sampler
    return D.SamplerConfig(steps=steps if steps is not None else s.steps,
                           guidance=guidance if guidance is not None else s.guidance,
                           seed=config.seed,
                           eta=eta if eta is not None else s.eta,
                           clip_x0=s.clip_x0)


def _export_composite(composite: np.ndarray, layout: PanelLayout, out_dir: str) -> None:
    save_tensor(os.path.join(out_dir, "composite.bin"), composite)
    panels = split_panels(VideoTensor(composite), layout)
    for k, panel in enumerate(panels):
        save_tensor(os.path.join(out_dir, f"panel_{k}.bin"), panel.values)
        for f in range(panel.frames):
            write_ppm(os.path.join(out_dir, f"panel_{k}_frame_{f:03d}.ppm"),
                      panel.values[f])


def cmd_sample(config: RunConfig, checkpoint: str, lora_path: Optional[str],
               prompt: Optional[str], prompt_file: Optional[str],
               layout_text: Optional[str], out: Optional[str],
               steps: Optional[int], guidance: Optional[float],
               eta: Optional[float]) -> int:
    out_dir = out or os.path.join(config.out_root, "sample")
    os.makedirs(out_dir, exist_ok=True)
    text = _read_prompt(prompt, prompt_file)
    ps = parse_prompt(text)
    layout = _resolve_layout(config, layout_text)
    if len(ps.per_panel) != layout.panel_count:
        raise ConfigError(f"prompt has {len(ps.per_panel)} scenes but layout "
                          f"{layout.describe()} has {layout.panel_count} panels")
    cfg, params, lora = _load_model_and_lora(config, checkpoint, lora_path)
    schedule = D.linear_schedule(config.schedule.T, config.schedule.beta_start,
                                 config.schedule.beta_end)
    sampler = _sampler_config(config, steps, guidance, eta)
    shape = layout.composite_shape(_panel_shape(config))
    composite = D.sample(params, cfg, schedule, sampler, text, shape, lora)
    _export_composite(composite, layout, out_dir)
    _write_run_meta(out_dir, config, "sample", {
        "prompt": text, "layout": layout.describe(), "checkpoint": checkpoint,
        "lora": lora_path, "sampler": {"steps": sampler.steps,
                                       "guidance": sampler.guidance,
                                       "seed": sampler.seed, "eta": sampler.eta}})
    print(f"wrote {layout.panel_count} panels to {out_dir}")
    return 0


def _parse_known(known: Sequence[str]) -> Dict[int, str]:
    out: Dict[int, str] = {}
    for item in known:
        idx, _, path = item.partition("=")
        if not idx.isdigit() or not path:
            raise ConfigError(f"--known expects INDEX=PATH, got {item!r}")
        out[int(idx)] = path
    return out


def cmd_inpaint(config: RunConfig, checkpoint: str, lora_path: Optional[str],
                prompt: Optional[str], prompt_file: Optional[str],
                layout_text: Optional[str], known: Sequence[str],
                generate: str, out: Optional[str], steps: Optional[int],
                guidance: Optional[float], eta: Optional[float]) -> int:
    out_dir = out or os.path.join(config.out_root, "inpaint")
    os.makedirs(out_dir, exist_ok=True)
    text = _read_prompt(prompt, prompt_file)
    parse_prompt(text)
    layout = _resolve_layout(config, layout_text)
    gen_indices = sorted({int(tok) for tok in generate.split(",") if tok.strip()}) \
        if generate.strip() else []
    for idx in gen_indices:
        if not 0 <= idx < layout.panel_count:
            raise LayoutError(f"generate index {idx} out of range "
                              f"[0, {layout.panel_count})")
    known_paths = _parse_known(known)
    panel_shape = _panel_shape(config)

    panels: List[Optional[VideoTensor]] = []
    for idx in range(layout.panel_count):
        if idx in gen_indices:
            panels.append(None)
            continue
        if idx not in known_paths:
            raise ConfigError(f"panel {idx} is not generated and no --known "
                              f"{idx}=PATH was supplied")
        panels.append(VideoTensor(load_tensor(known_paths[idx])))

    if not gen_indices:
        print("nothing to generate: all panels supplied as known", file=sys.stderr)
        composite = compose_panels([p for p in panels], layout).values
    else:
        cfg, params, lora = _load_model_and_lora(config, checkpoint, lora_path)
        panel_set = PanelSet(n=len(gen_indices),
                             m=layout.panel_count - len(gen_indices),
                             panels=panels, layout=layout)
        mask = build_mask(layout, gen_indices, panel_shape,
                          dtype=config.model.np_dtype)
        schedule = D.linear_schedule(config.schedule.T, config.schedule.beta_start,
                                     config.schedule.beta_end)
        sampler = _sampler_config(config, steps, guidance, eta)
        composite = D.masked_sample(params, cfg, schedule, sampler, text,
                                    panel_set, mask, lora)
    _export_composite(composite, layout, out_dir)
    _write_run_meta(out_dir, config, "inpaint", {
        "prompt": text, "layout": layout.describe(), "checkpoint": checkpoint,
        "generate": gen_indices,
        "known": {str(k): v for k, v in known_paths.items()}})
    print(f"wrote {layout.panel_count} panels to {out_dir}")
    return 0


def cmd_split(config: RunConfig, composite_path: str, layout_text: Optional[str],
              out: Optional[str]) -> int:
    out_dir = out or os.path.join(config.out_root, "split")
    os.makedirs(out_dir, exist_ok=True)
    layout = _resolve_layout(config, layout_text)
    composite = VideoTensor(load_tensor(composite_path))
    for k, panel in enumerate(split_panels(composite, layout)):
        save_tensor(os.path.join(out_dir, f"panel_{k}.bin"), panel.values)
    print(f"wrote {layout.panel_count} panels to {out_dir}")
    return 0


def cmd_probe_consistency(config: RunConfig, checkpoint: str,
                          lora_path: Optional[str], n: int,
                          out: Optional[str], no_control: bool) -> int:
    out_dir = out or os.path.join(config.out_root, "probe")
    os.makedirs(out_dir, exist_ok=True)
    cfg, params, lora = _load_model_and_lora(config, checkpoint, lora_path)
    schedule = D.linear_schedule(config.schedule.T, config.schedule.beta_start,
                                 config.schedule.beta_end)
    report = run_probe(params, cfg, schedule, config.sampler, config.data,
                       config.seed, n, lora, with_control=not no_control)
    rows = ["kind,sample,prompted,panels,success"]
    for kind, runs in (("joint", report.runs), ("control", report.control_runs)):
        for j, r in enumerate(runs):
            rows.append(f"{kind},{j},{r.prompted_color},"
                        f"{'|'.join(r.panel_colors)},{int(r.success)}")
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    write_json(os.path.join(out_dir, "summary.json"), report.to_dict())
    _write_run_meta(out_dir, config, "probe-consistency",
                    {"checkpoint": checkpoint, "n": n})
    print(f"consistency: {report.consistency:.3f}")
    if report.control_runs:
        print(f"control consistency: {report.control_consistency:.3f}")
    return 0


def cmd_inspect(path: str) -> int:
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == b"ICTXTNSR":
        arr = load_tensor(path)
        print(f"tensor {arr.dtype} {list(arr.shape)} "
              f"min {arr.min():.4f} max {arr.max():.4f}")
    elif head == b"ICTXBNDL":
        tensors, meta = load_bundle(path)
        print(f"bundle kind={meta.get('kind')!r} tensors={len(tensors)}")
        for key in ("model_config", "step", "seed", "spec", "mode"):
            if key in meta:
                print(f"  {key}: {meta[key]}")
        for name in sorted(tensors):
            print(f"  {name}: {list(tensors[name].shape)}")
    else:
        doc = read_json(path)
        if isinstance(doc, dict) and "samples" in doc:
            print(f"dataset manifest: {len(doc['samples'])} samples "
                  f"(format_version {doc.get('format_version')})")
        else:
            print(f"json document with keys {sorted(doc)}"
                  if isinstance(doc, dict) else "json document")
    return 0


def _add_globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # The run-level flags are accepted both before and after the subcommand.
    # Subparser copies default to SUPPRESS so they never clobber a value
    # parsed at the top level.
    kwargs = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="JSON run config overlaying the profile",
                        **kwargs)
    parser.add_argument("--seed", type=int, help="override the run seed", **kwargs)
    parser.add_argument("--out", help="output directory override", **kwargs)
    parser.add_argument("--profile", choices=["desk", "paper"],
                        help="base defaults (desk unless the config says otherwise)",
                        **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panelgen",
        description="Joint multi-panel video generation: train, sample, inpaint.")
    _add_globals(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-data", parents=[common],
                   help="generate and export the synthetic dataset")

    p = sub.add_parser("train", parents=[common],
                       help="train from scratch or LoRA-tune a base")
    p.add_argument("--resume", help="training checkpoint to resume from")
    p.add_argument("--stop-after", type=int,
                   help="stop after this absolute step (for interruption tests)")

    for name in ("sample", "inpaint"):
        p = sub.add_parser(name, parents=[common],
                           help=f"{name} panels from a checkpoint")
        p.add_argument("--checkpoint", required=True, help="model bundle")
        p.add_argument("--lora", help="LoRA adapter bundle")
        p.add_argument("--prompt", help="unified prompt text")
        p.add_argument("--prompt-file", help="file holding the unified prompt")
        p.add_argument("--layout", help="layout descriptor, e.g. spatial:2x2")
        p.add_argument("--steps", type=int, help="sampling steps override")
        p.add_argument("--guidance", type=float, help="guidance scale override")
        p.add_argument("--eta", type=float, help="DDIM stochasticity override")
        if name == "inpaint":
            p.add_argument("--known", action="append", default=[],
                           metavar="INDEX=PATH", help="known panel tensor")
            p.add_argument("--generate", default="",
                           help="comma-separated panel indices to generate")

    p = sub.add_parser("split", parents=[common],
                       help="split a composite tensor into panels")
    p.add_argument("--composite", required=True, help="composite tensor file")
    p.add_argument("--layout", help="layout descriptor override")

    p = sub.add_parser("probe-consistency", parents=[common],
                       help="score cross-panel color consistency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lora", help="LoRA adapter bundle")
    p.add_argument("-n", type=int, default=32, help="number of probe samples")
    p.add_argument("--no-control", action="store_true",
                   help="skip the shuffled-panel control")

    p = sub.add_parser("inspect", parents=[common],
                       help="describe a tensor/bundle/manifest file")
    p.add_argument("path")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "inspect":
            return cmd_inspect(args.path)
        config = load_config(args.config, args.profile, args.seed)
        if args.command == "synth-data":
            return cmd_synth_data(config, args.out)
        if args.command == "train":
            return cmd_train(config, args.out, args.resume, args.stop_after)
        if args.command == "sample":
            return cmd_sample(config, args.checkpoint, args.lora, args.prompt,
                              args.prompt_file, args.layout, args.out, args.steps,
                              args.guidance, args.eta)
        if args.command == "inpaint":
            return cmd_inpaint(config, args.checkpoint, args.lora, args.prompt,
                               args.prompt_file, args.layout, args.known,
                               args.generate, args.out, args.steps,
                               args.guidance, args.eta)
        if args.command == "split":
            return cmd_split(config, args.composite, args.layout, args.out)
        if args.command == "probe-consistency":
            return cmd_probe_consistency(config, args.checkpoint, args.lora,
                                         args.n, args.out, args.no_control)
        raise ConfigError(f"unknown command {args.command!r}")
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
