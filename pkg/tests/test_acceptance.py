"""Acceptance gate: one test per release criterion, in order.

Each test prints a single `criterion NN <name>: PASS/FAIL (detail)` line
(visible with `pytest -v -s`) and asserts the stated tolerance, so the
verbose run reads as a checklist. Criteria 8 and 9 share one full
desk-profile training run; expect this module to take 20-30 minutes on a
single CPU core, nearly all of it in that run.
"""

import json
import math
import os
import time
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import perturb_params, tiny_config
from panelgen.cli import main
from panelgen.config import DataParams, ModelConfig, OptimParams, RunConfig
from panelgen.dataset import SynthParams, build_set_samples, export_dataset, \
    synth_generate
from panelgen.diffusion import SamplerConfig, TrainBatch, ddim_loop, \
    linear_schedule, masked_sample, sample, training_loss
from panelgen.lora import LoraSpec, LoraWeights, delta_arrays, inject, merge
from panelgen.model import forward, init_params
from panelgen.panels import PanelLayout, PanelSet, VideoTensor, build_mask, \
    compose_panels, split_panels
from panelgen.prompts import PromptFormatError, PromptSet, compose_prompt, \
    encode_batch, parse_prompt, token_ids
from panelgen.seeding import LANE_FUZZ, LANE_SAMPLE, rng_stream
from panelgen.serialize import read_json
from panelgen.tensor import Tensor, no_grad
from panelgen.training import load_model, save_model, train


def _verdict(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"criterion {num:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})",
          flush=True)
    assert ok, f"criterion {num:02d} {name}: {detail}"


def _batch(cfg: ModelConfig, rng: np.random.Generator, count: int,
           shape=(2, 1, 4, 4)) -> TrainBatch:
    texts = ["a red square moving up", "a blue square moving down",
             "a green square moving left", "a yellow square moving right"]
    ids, mask = zip(*(token_ids(texts[i % len(texts)], cfg.vocab_size, cfg.text_len)
                      for i in range(count)))
    return TrainBatch(
        x0=rng.uniform(-1, 1, (count,) + shape).astype(cfg.np_dtype),
        text_ids=np.stack(ids),
        text_mask=np.stack(mask).astype(cfg.np_dtype),
        t=rng.integers(0, 1000, size=count),
        eps=rng.standard_normal((count,) + shape).astype(cfg.np_dtype),
        drop=rng.uniform(size=count) < 0.1,
    )


# -- 1: analytic gradients vs central finite differences ------------------------

def test_criterion_01_gradient_oracle():
    t0 = time.monotonic()
    cfg = tiny_config(dtype="float64")
    params = perturb_params(init_params(cfg, seed=0), seed=1)
    schedule = linear_schedule()
    batch = _batch(cfg, np.random.default_rng(2), count=2)

    loss = training_loss(params, cfg, batch, schedule)
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    step, checked, fails, worst = 1e-5, 0, 0, 0.0
    for name, p in params.items():
        flat, g = p.data.reshape(-1), analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = float(training_loss(params, cfg, batch, schedule).data)
            flat[i] = keep - step
            down = float(training_loss(params, cfg, batch, schedule).data)
            flat[i] = keep
            numeric = (up - down) / (2 * step)
            diff = abs(g[i] - numeric)
            # rel error is meaningless for dead entries (padding slots,
            # unused vocab rows) whose both sides are ~0: absolute floor.
            rel = diff / max(abs(g[i]), abs(numeric), 1e-30)
            checked += 1
            if diff > 1e-9:
                worst = max(worst, rel)
                if rel > 1e-4:
                    fails += 1
    elapsed = time.monotonic() - t0
    _verdict(1, "gradient oracle", fails == 0 and elapsed < 120.0,
             f"{checked} scalars, {fails} mismatches, worst rel "
             f"{worst:.2e}, {elapsed:.1f}s")


# -- 2: zero-initialized model is the zero function ------------------------------

def test_criterion_02_zero_init_identity():
    cfg = tiny_config()
    params = init_params(cfg, seed=0)

    nonzero = 0
    for s in range(20):
        rng = np.random.default_rng(s)
        x = rng.standard_normal((2, 2, 1, 4, 4)).astype(np.float32)
        t = rng.integers(0, 1000, size=2)
        with no_grad():
            text = encode_batch(["a red square", "a blue square"],
                                params["text.table"], cfg.text_len)
            out = forward(params, cfg, Tensor(x), t, text)
        nonzero += int(np.count_nonzero(out.data))

    batch = _batch(cfg, np.random.default_rng(99), count=256, shape=(2, 1, 8, 8))
    loss = float(training_loss(params, cfg, batch, linear_schedule()).data)
    _verdict(2, "zero-init identity",
             nonzero == 0 and abs(loss - 1.0) <= 0.05,
             f"{nonzero} nonzero outputs over 20 inputs, "
             f"256-sample loss {loss:.4f}")


# -- 3: split/compose exactness ---------------------------------------------------

def test_criterion_03_composition_round_trip():
    layouts = [PanelLayout.spatial(1, 1), PanelLayout.spatial(1, 4),
               PanelLayout.spatial(2, 2), PanelLayout.spatial(3, 3),
               PanelLayout.temporal(2), PanelLayout.temporal(4)]
    mismatches, total = 0, 0
    for li, layout in enumerate(layouts):
        for s in range(50):
            rng = np.random.default_rng(1000 * li + s)
            panels = [VideoTensor(rng.uniform(-1, 1, (2, 1, 4, 4))
                                  .astype(np.float32))
                      for _ in range(layout.panel_count)]
            back = split_panels(compose_panels(panels, layout), layout)
            total += 1
            if not all(np.array_equal(a.values, b.values)
                       for a, b in zip(panels, back)):
                mismatches += 1
    _verdict(3, "composition round trip", mismatches == 0,
             f"{total} panel sets over {len(layouts)} layouts, "
             f"{mismatches} mismatches")


# -- 4: LoRA no-op, merge, freezing, alpha scaling --------------------------------

def test_criterion_04_lora_contracts(tmp_path):
    cfg = tiny_config()
    params = perturb_params(init_params(cfg, seed=0), seed=3)
    spec = LoraSpec(rank=4, alpha=8.0, targets=("attn.wq", "mlp.fc1.w"))
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 2, 1, 4, 4)).astype(np.float32)
    t = np.array([500])
    with no_grad():
        text = encode_batch(["a probe"], params["text.table"], cfg.text_len)

    def fwd(p, lora=None):
        with no_grad():
            return forward(p, cfg, Tensor(x), t, text, lora).data

    fresh = inject(cfg, spec, seed=5)
    noop = np.array_equal(fwd(params, fresh), fwd(params))

    lora = inject(cfg, spec, seed=5)
    for name in lora.b:
        lora.b[name].data = rng.normal(0.0, 0.1, lora.b[name].shape) \
            .astype(np.float32)
    merged = merge(params, lora)
    merge_err = 0.0
    for s in range(100):
        xr = np.random.default_rng(s).standard_normal((1, 2, 1, 4, 4)) \
            .astype(np.float32)
        with no_grad():
            a = forward(params, cfg, Tensor(xr), t, text, lora).data
            b = forward(merged, cfg, Tensor(xr), t, text).data
        merge_err = max(merge_err, float(np.abs(a - b).max()))

    doubled = LoraWeights(spec=LoraSpec(rank=spec.rank, alpha=2 * spec.alpha,
                                        targets=spec.targets),
                          a=lora.a, b=lora.b, seed=lora.seed)
    da, db = delta_arrays(lora), delta_arrays(doubled)
    alpha_exact = all(np.array_equal(2.0 * da[k], db[k]) for k in da)

    root = str(tmp_path / "data")
    export_dataset(build_set_samples(
        synth_generate(SynthParams(image_side=8, frames=2, sprite_side=3), 4),
        PanelLayout.spatial(2, 2), 1, 3)[0], root)
    run_model = ModelConfig(dim=16, depth=1, heads=2, patch=(1, 4, 4),
                            channels=3, text_len=12, vocab_size=64,
                            time_freq_dim=16, max_frames=8, max_rows=8,
                            max_cols=8)
    # The base must be trained: a zero-init base has frozen zero output
    # heads, so no gradient ever reaches the adapters.
    data = DataParams(root=root, sources=4, image_side=8, frames=2,
                      sprite_side=3, layout="spatial:2x2")
    pre = RunConfig(
        seed=0, out_root=str(tmp_path / "runs"), model=run_model,
        optim=OptimParams(lr=1e-3, batch_size=2, total_steps=6,
                          warmup_steps=2, clip_norm=1.0, checkpoint_every=6),
        data=data)
    base_path = train(pre, out_dir=str(tmp_path / "base")).final_artifact
    run = RunConfig(
        seed=0, out_root=str(tmp_path / "runs"), model=run_model,
        optim=OptimParams(lr=1e-3, batch_size=2, total_steps=50,
                          warmup_steps=5, clip_norm=1.0, checkpoint_every=50),
        data=data,
        train_mode="lora", base_checkpoint=base_path,
        lora=LoraSpec(rank=2, alpha=4.0, targets=("attn.wq", "mlp.fc1.w")))
    result = train(run, out_dir=str(tmp_path / "adapter"))
    _, base_params, _ = load_model(base_path)
    frozen = all(np.array_equal(result.params[name].data, base_params[name].data)
                 for name in base_params)
    moved = sum(float(np.abs(b.data).sum()) for b in result.lora.b.values())

    _verdict(4, "LoRA contracts",
             noop and merge_err <= 1e-5 and frozen and moved > 0.0 and alpha_exact,
             f"no-op bit-exact {noop}, merge max err {merge_err:.2e}, "
             f"base frozen over 50 steps {frozen}, adapter moved {moved:.3f}, "
             f"alpha doubling exact {alpha_exact}")


# -- 5: noise schedule against an exact rational product --------------------------

def test_criterion_05_schedule_oracle():
    schedule = linear_schedule()
    ab = schedule.alpha_bars
    first = float(ab[0]) == 0.9999

    lo, hi = Fraction(1, 10_000), Fraction(2, 100)
    product = Fraction(1)
    for k in range(1000):
        product *= 1 - (lo + Fraction(k, 999) * (hi - lo))
    rel = abs(float(ab[999]) - float(product)) / float(product)

    snr = ab / (1.0 - ab)
    decreasing = bool(np.all(np.diff(ab) < 0) and np.all(np.diff(snr) < 0))
    _verdict(5, "schedule oracle", first and rel <= 1e-10 and decreasing,
             f"alpha_bar[0] == 0.9999: {first}, alpha_bar[999] rel err "
             f"{rel:.2e}, monotone decreasing {decreasing}")


# -- 6: masked sampler exactness ---------------------------------------------------

def test_criterion_06_masked_sampler_exactness():
    cfg = tiny_config()
    params = perturb_params(init_params(cfg, seed=0), seed=0)
    schedule = linear_schedule()
    sampler = SamplerConfig(steps=6, guidance=2.0, seed=21)
    layout = PanelLayout.spatial(2, 2)
    panel_shape = (2, 1, 4, 4)
    prompt = compose_prompt(PromptSet("a set of videos of the same red square",
                                      ["a red square moving up"] * 4))
    rng = np.random.default_rng(1)
    known = [VideoTensor(rng.uniform(-1, 1, panel_shape).astype(np.float32))
             for _ in range(4)]

    known_exact = True
    for generate in (set(), {3}, {0, 1}, {0, 1, 2, 3}):
        panels = [None if i in generate else known[i] for i in range(4)]
        ps = PanelSet(n=len(generate), m=4 - len(generate), panels=panels,
                      layout=layout)
        mask = build_mask(layout, sorted(generate), panel_shape)
        out = masked_sample(params, cfg, schedule, sampler, prompt, ps, mask)
        got = split_panels(VideoTensor(out), layout)
        for i in range(4):
            if i not in generate and not np.array_equal(got[i].values,
                                                        known[i].values):
                known_exact = False
        if generate == {0, 1, 2, 3}:
            plain = sample(params, cfg, schedule, sampler, prompt,
                           layout.composite_shape(panel_shape))
            all_ones_identical = np.array_equal(out, plain)

    shape = layout.composite_shape(panel_shape)
    s1 = sample(params, cfg, schedule, SamplerConfig(steps=5, guidance=1.0, seed=2),
                prompt, shape)
    with no_grad():
        cond = encode_batch([prompt], params["text.table"], cfg.text_len)

    def cond_only(x, t):
        with no_grad():
            return forward(params, cfg, Tensor(x[None]), np.array([t]), cond).data[0]

    pure = ddim_loop(cond_only, schedule, SamplerConfig(steps=5, guidance=1.0, seed=2),
                     shape, rng_stream(2, LANE_SAMPLE), dtype=cfg.np_dtype)
    guidance_one = np.array_equal(s1, pure)

    _verdict(6, "masked sampler exactness",
             known_exact and all_ones_identical and guidance_one,
             f"known regions exact {known_exact}, all-ones mask == plain "
             f"sample {all_ones_identical}, guidance 1 == conditional-only "
             f"{guidance_one}")


# -- 7: byte-identical reruns and resume -------------------------------------------

def _tiny_cli_config(ws) -> str:
    doc = {
        "format_version": 1,
        "seed": 0,
        "out_root": str(ws / "runs"),
        "model": {"dim": 16, "depth": 1, "heads": 2, "patch": [1, 4, 4],
                  "channels": 3, "text_len": 12, "vocab_size": 64,
                  "time_freq_dim": 16, "max_frames": 8, "max_rows": 8,
                  "max_cols": 8, "dtype": "float32"},
        "sampler": {"steps": 3, "guidance": 2.0},
        "optim": {"lr": 1e-3, "batch_size": 2, "total_steps": 6,
                  "warmup_steps": 2, "checkpoint_every": 3},
        "data": {"root": str(ws / "data"), "sources": 4, "image_side": 8,
                 "frames": 2, "sprite_side": 3, "layout": "spatial:2x2"},
    }
    path = str(ws / "run.json")
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path


def _log_rows_without_seconds(path: str):
    with open(path) as fh:
        return [line.rsplit(",", 1)[0] for line in fh.read().splitlines()]


def test_criterion_07_determinism(tmp_path):
    cfg = _tiny_cli_config(tmp_path)
    assert main(["--config", cfg, "synth-data"]) == 0

    a, b = str(tmp_path / "ta"), str(tmp_path / "tb")
    assert main(["--config", cfg, "train", "--out", a]) == 0
    assert main(["--config", cfg, "train", "--out", b]) == 0
    train_names = ["model_final.bin", "ckpt_step000003.bin",
                   "ckpt_step000006.bin", "run_meta.json"]
    train_identical = all(
        open(os.path.join(a, n), "rb").read() == open(os.path.join(b, n),
                                                      "rb").read()
        for n in train_names)
    # the seconds column is wall-clock; everything else must match
    log_identical = _log_rows_without_seconds(os.path.join(a, "train_log.csv")) \
        == _log_rows_without_seconds(os.path.join(b, "train_log.csv"))

    prompt = compose_prompt(PromptSet("a set of videos of the same red square",
                                      [f"a red square moving {d}" for d in
                                       ("up", "down", "left", "right")]))
    ckpt = os.path.join(a, "model_final.bin")
    sa, sb = str(tmp_path / "sa"), str(tmp_path / "sb")
    for out in (sa, sb):
        assert main(["--config", cfg, "sample", "--checkpoint", ckpt,
                     "--prompt", prompt, "--out", out]) == 0
    sample_identical = all(
        open(os.path.join(sa, n), "rb").read() == open(os.path.join(sb, n),
                                                       "rb").read()
        for n in sorted(os.listdir(sa)))

    c = str(tmp_path / "tc")
    assert main(["--config", cfg, "train", "--out", c, "--stop-after", "3"]) == 0
    assert main(["--config", cfg, "train", "--out", c, "--resume",
                 os.path.join(c, "ckpt_step000003.bin")]) == 0
    resume_identical = open(os.path.join(c, "model_final.bin"), "rb").read() \
        == open(os.path.join(a, "model_final.bin"), "rb").read() \
        and _log_rows_without_seconds(os.path.join(c, "train_log.csv")) \
        == _log_rows_without_seconds(os.path.join(a, "train_log.csv"))

    _verdict(7, "determinism",
             train_identical and log_identical and sample_identical
             and resume_identical,
             f"train rerun identical {train_identical}, log identical "
             f"{log_identical}, sample rerun identical {sample_identical}, "
             f"resume == uninterrupted {resume_identical}")


# -- 8 and 9 share one desk-profile training run -----------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    ws = tmp_path_factory.mktemp("desk")
    doc = {"format_version": 1, "profile": "desk", "seed": 0,
           "out_root": str(ws / "out"), "data": {"root": str(ws / "data")}}
    cfg = str(ws / "run.json")
    with open(cfg, "w") as fh:
        json.dump(doc, fh)
    assert main(["--config", cfg, "synth-data"]) == 0
    t0 = time.monotonic()
    assert main(["--config", cfg, "train"]) == 0
    seconds = time.monotonic() - t0
    out = str(ws / "out" / "train")
    return SimpleNamespace(ws=ws, cfg=cfg, seconds=seconds,
                           ckpt=os.path.join(out, "model_final.bin"),
                           log=os.path.join(out, "train_log.csv"))


def test_criterion_08_desk_scale_convergence(desk_run):
    with open(desk_run.log) as fh:
        rows = fh.read().splitlines()[1:]
    losses = [float(r.split(",")[1]) for r in rows]
    assert len(losses) == 2000
    first = sum(losses[:100]) / 100
    last = sum(losses[-100:]) / 100
    ratio = last / first
    _verdict(8, "desk-scale convergence",
             ratio <= 0.6 and desk_run.seconds < 1800.0,
             f"first-100 mean {first:.4f}, final-100 mean {last:.4f}, "
             f"ratio {ratio:.3f} (need <= 0.6), "
             f"wall time {desk_run.seconds:.0f}s (need < 1800)")


def test_criterion_09_consistency_probe(desk_run):
    out = str(desk_run.ws / "probe_trained")
    assert main(["--config", desk_run.cfg, "probe-consistency",
                 "--checkpoint", desk_run.ckpt, "-n", "32", "--out", out]) == 0
    trained = read_json(os.path.join(out, "summary.json"))

    untrained_path = str(desk_run.ws / "untrained.bin")
    cfg = ModelConfig()
    save_model(untrained_path, init_params(cfg, seed=0), cfg, seed=0)
    out0 = str(desk_run.ws / "probe_untrained")
    assert main(["--config", desk_run.cfg, "probe-consistency",
                 "--checkpoint", untrained_path, "-n", "32", "--no-control",
                 "--out", out0]) == 0
    untrained = read_json(os.path.join(out0, "summary.json"))

    ok = (trained["consistency"] >= 0.70
          and untrained["consistency"] <= 0.05
          and trained["control_consistency"] <= 0.25)
    _verdict(9, "in-context consistency probe", ok,
             f"trained {trained['consistency']:.3f} (need >= 0.70), "
             f"untrained {untrained['consistency']:.3f} (need ~0), "
             f"shuffled control {trained['control_consistency']:.3f} "
             f"(need <= 0.25)")


# -- 10: prompt grammar round trip and rejection ------------------------------------

MALFORMED = [
    ("", 0),
    ("no set marker [SCENE-1] x", 0),
    ("[SET]  double space [SCENE-1] x", 0),
    (" [SET] [SCENE-1] x", 0),
    ("[SET] x [SCENE-1] y ", 0),
    ("[SET] a [SCENE-2] b", 8),
    ("[SET] a [SCENE-1] b [SCENE-3] c", 20),
    ("[SET] a [SCENE-01] b", 8),
    ("[SET] a [SCENE-] b", 8),
    ("[SET] a [SCENE-1x] b", 8),
    ("[SET] a [SET] b", 8),
    ("[SET] no scenes at all", 22),
]

WORDS = ["red", "green", "blue", "square", "moving", "up", "down", "left",
         "right", "a", "the", "same", "videos", "of", "set", "scene"]


def test_criterion_10_prompt_grammar():
    rng = rng_stream(0, LANE_FUZZ, index=1)
    failures = 0
    for _ in range(1000):
        overall = " ".join(WORDS[int(i)] for i in
                           rng.integers(len(WORDS), size=rng.integers(0, 5)))
        count = int(rng.integers(1, 7))
        per_panel = [" ".join(WORDS[int(i)] for i in
                              rng.integers(len(WORDS), size=rng.integers(0, 6)))
                     for _ in range(count)]
        ps = PromptSet(overall, per_panel)
        if parse_prompt(compose_prompt(ps)) != ps:
            failures += 1

    rejected = 0
    for text, position in MALFORMED:
        try:
            parse_prompt(text)
        except PromptFormatError as exc:
            if exc.position == position:
                rejected += 1
    _verdict(10, "prompt grammar",
             failures == 0 and rejected == len(MALFORMED),
             f"1000 fuzzed round trips, {failures} failures; "
             f"{rejected}/{len(MALFORMED)} malformed fixtures rejected at "
             f"the right position")
