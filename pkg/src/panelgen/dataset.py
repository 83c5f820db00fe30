"""Dataset construction: grouping same-source clips into composite samples
with unified prompts, a fully procedural synthetic generator (one colored
square per source, moving in a distinct direction per clip), disk
export/import, and the dominant-color probe that scores cross-panel
identity consistency.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .panels import LayoutError, PanelLayout, VideoTensor, compose_panels, split_panels
from .prompts import PromptFormatError, PromptSet, compose_prompt, parse_prompt
from .seeding import LANE_DATA, rng_stream
from .serialize import SerializationError, load_tensor, read_json, save_tensor, write_json

PALETTE: Dict[str, Tuple[float, float, float]] = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "cyan": (-1.0, 1.0, 1.0),
    "magenta": (1.0, -1.0, 1.0),
    "orange": (1.0, 0.0, -1.0),
    "white": (1.0, 1.0, 1.0),
}

DIRECTIONS: Dict[str, Tuple[int, int]] = {
    "up": (-1, 0),
    "down": (1, 0),
    "left": (0, -1),
    "right": (0, 1),
}

BACKGROUND = -1.0
LUMINANCE_THRESHOLD = 0.2
# Mean colors farther than this from every palette entry read as "none";
# keeps pure-noise panels from being assigned the nearest bright color.
PALETTE_DISTANCE_CAP = 0.8

DATASET_FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Manifest, file, or invariant failure during import/build."""


@dataclass(frozen=True)
class ClipRecord:
    frames: VideoTensor
    caption: str
    source_id: str
    clip_id: str
    source_caption: Optional[str] = None


@dataclass(frozen=True)
class SetSample:
    composite: VideoTensor
    prompt: PromptSet
    layout: PanelLayout
    source_id: str


@dataclass
class BuildReport:
    built: int = 0
    skipped: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class SynthParams:
    image_side: int = 16
    frames: int = 8
    sprite_side: int = 6
    panels_per_sample: int = 4
    layout: PanelLayout = PanelLayout.spatial(2, 2)
    palette: Tuple[str, ...] = tuple(PALETTE)
    seed: int = 0

    def __post_init__(self) -> None:
        for name in self.palette:
            if name not in PALETTE:
                raise DatasetError(f"unknown palette color {name!r}")
        if not self.palette:
            raise DatasetError("palette must be nonempty")
        if self.panels_per_sample != self.layout.panel_count:
            raise DatasetError(
                f"panels_per_sample {self.panels_per_sample} does not match layout "
                f"{self.layout.describe()}")
        if self.panels_per_sample > len(DIRECTIONS):
            raise DatasetError(
                f"cannot draw {self.panels_per_sample} distinct directions from "
                f"{len(DIRECTIONS)}")
        travel = self.frames - 1
        if self.sprite_side + travel > self.image_side:
            raise DatasetError(
                f"sprite {self.sprite_side}px moving {travel} cells leaves the "
                f"{self.image_side}px frame")


def render_clip(color: str, direction: str, start: Tuple[int, int],
                params: SynthParams) -> VideoTensor:
    """Hard-edged colored square on black, translating 1 cell/frame."""
    side, ss = params.image_side, params.sprite_side
    rgb = np.array(PALETTE[color], dtype=np.float32)
    dr, dc = DIRECTIONS[direction]
    values = np.full((params.frames, 3, side, side), BACKGROUND, dtype=np.float32)
    r, c = start
    for f in range(params.frames):
        rr, cc = r + f * dr, c + f * dc
        if not (0 <= rr <= side - ss and 0 <= cc <= side - ss):
            raise DatasetError(f"sprite leaves frame at step {f} from start {start}")
        values[f, :, rr:rr + ss, cc:cc + ss] = rgb[:, None, None]
    return VideoTensor(values)


def _canonical_start(direction: str, params: SynthParams) -> Tuple[int, int]:
    """Midpoint of the legal start range on both axes: the sprite traverses
    the centered motion corridor. One fixed trajectory per direction keeps
    the conditional distribution sharp enough that the desk-scale model can
    learn it within its step budget."""
    side, ss, travel = params.image_side, params.sprite_side, params.frames - 1
    dr, dc = DIRECTIONS[direction]
    r_lo = -min(0, dr * travel)
    r_hi = side - ss - max(0, dr * travel)
    c_lo = -min(0, dc * travel)
    c_hi = side - ss - max(0, dc * travel)
    return (r_lo + r_hi) // 2, (c_lo + c_hi) // 2


def synth_generate(params: SynthParams, count: int) -> List[ClipRecord]:
    """`count` sources; each draws one shared color and distinct per-clip
    directions, deterministic per seed."""
    rng = rng_stream(params.seed, LANE_DATA)
    records: List[ClipRecord] = []
    names = list(params.palette)
    dir_names = list(DIRECTIONS)
    for s in range(count):
        color = names[int(rng.integers(len(names)))]
        order = rng.permutation(len(dir_names))[:params.panels_per_sample]
        source_id = f"src-{s:05d}"
        overall = f"a set of videos of the same {color} square"
        for k, d in enumerate(order):
            direction = dir_names[int(d)]
            start = _canonical_start(direction, params)
            records.append(ClipRecord(
                frames=render_clip(color, direction, start, params),
                caption=f"a {color} square moving {direction}",
                source_id=source_id,
                clip_id=f"{source_id}/clip-{k}",
                source_caption=overall,
            ))
    return records


def build_set_samples(records: Sequence[ClipRecord], layout: PanelLayout,
                      n: int, m: int) -> Tuple[List[SetSample], BuildReport]:
    """One SetSample per source with enough clips; undersized sources are
    skipped and listed in the report."""
    if n + m != layout.panel_count:
        raise LayoutError(f"n+m = {n + m} does not match layout {layout.describe()}")
    groups: Dict[str, List[ClipRecord]] = {}
    for rec in records:
        groups.setdefault(rec.source_id, []).append(rec)
    samples: List[SetSample] = []
    report = BuildReport()
    for source_id in sorted(groups):
        clips = sorted(groups[source_id], key=lambda r: r.clip_id)
        if len(clips) < layout.panel_count:
            report.skipped.append(source_id)
            continue
        clips = clips[:layout.panel_count]
        composite = compose_panels([c.frames for c in clips], layout)
        overall = clips[0].source_caption or \
            f"a set of {layout.panel_count} related videos"
        prompt = PromptSet(overall, [c.caption for c in clips])
        compose_prompt(prompt)  # delimiter/whitespace validation up front
        samples.append(SetSample(composite, prompt, layout, source_id))
        report.built += 1
    return samples, report


# -- disk format ---------------------------------------------------------------


def export_dataset(samples: Sequence[SetSample], root: str) -> str:
    """Write <root>/tensors/*.bin then <root>/manifest.json; returns the
    manifest path."""
    entries = []
    for i, sample in enumerate(samples):
        rel = os.path.join("tensors", f"{i:05d}.bin")
        save_tensor(os.path.join(root, rel), sample.composite.values)
        entries.append({
            "tensor": rel,
            "prompt": compose_prompt(sample.prompt),
            "layout": sample.layout.describe(),
            "source_id": sample.source_id,
            "caption_provenance": "synthetic",
        })
    manifest_path = os.path.join(root, "manifest.json")
    write_json(manifest_path, {
        "format_version": DATASET_FORMAT_VERSION,
        "samples": entries,
    })
    return manifest_path


def import_dataset(root: str) -> List[SetSample]:
    """Load and fully validate a dataset; any failure names the entry."""
    manifest_path = os.path.join(root, "manifest.json")
    try:
        manifest = read_json(manifest_path)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(
            f"unsupported dataset format_version {manifest.get('format_version')!r}")
    samples: List[SetSample] = []
    for entry in manifest.get("samples", []):
        name = entry.get("tensor", "<missing>")
        path = os.path.join(root, name)
        try:
            values = load_tensor(path)
        except (OSError, SerializationError) as exc:
            raise DatasetError(f"entry {name!r}: tensor unreadable: {exc}") from exc
        try:
            layout = PanelLayout.parse(entry["layout"])
            prompt = parse_prompt(entry["prompt"])
        except (KeyError, LayoutError, PromptFormatError) as exc:
            raise DatasetError(f"entry {name!r}: {exc}") from exc
        if len(prompt.per_panel) != layout.panel_count:
            raise DatasetError(
                f"entry {name!r}: {len(prompt.per_panel)} scene prompts for "
                f"{layout.panel_count} panels")
        try:
            composite = VideoTensor(values)
            split_panels(composite, layout)  # divisibility validation
        except LayoutError as exc:
            raise DatasetError(f"entry {name!r}: {exc}") from exc
        samples.append(SetSample(composite, prompt, layout,
                                 entry.get("source_id", "")))
    return samples


def dominant_color_probe(panel: VideoTensor,
                         palette: Dict[str, Tuple[float, float, float]] = PALETTE) -> str:
    """Mean color of above-threshold cells, matched to the nearest palette
    entry. Returns "none" when nothing is brighter than the background
    threshold or the mean color is far from every palette entry."""
    if not palette:
        raise DatasetError("palette must be nonempty")
    values = np.clip(panel.values.astype(np.float64), -1.0, 1.0)
    luminance = (values.mean(axis=1) + 1.0) / 2.0
    selected = luminance > LUMINANCE_THRESHOLD
    if not selected.any():
        return "none"
    mean_color = values.transpose(1, 0, 2, 3)[:, selected].mean(axis=1)
    best_name, best_dist = "none", float("inf")
    for name in sorted(palette):
        dist = float(np.linalg.norm(mean_color - np.asarray(palette[name])))
        if dist < best_dist:
            best_name, best_dist = name, dist
    if best_dist > PALETTE_DISTANCE_CAP:
        return "none"
    return best_name
