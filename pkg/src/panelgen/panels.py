"""Panel composition: joining sub-videos into one composite tensor along the
spatial or temporal axis, splitting composites back into panels, and building
region masks for conditional generation.

A composite carries every panel through one diffusion process; masks mark
which panel regions are generated versus supplied as known context.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np


class LayoutError(ValueError):
    """Panel count, shape, or index inconsistent with the layout."""


@dataclass(frozen=True)
class VideoTensor:
    """One sub-video or composite: values of shape F×C×H×W, nominally in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 4:
            raise LayoutError(f"video values must be 4D F×C×H×W, got {self.values.shape}")
        if self.values.dtype not in (np.float32, np.float64):
            raise LayoutError(f"video values must be float32/float64, got {self.values.dtype}")
        if min(self.values.shape) < 1:
            raise LayoutError(f"video extents must be ≥ 1, got {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.values.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class PanelLayout:
    """Dense row-major R×G spatial grid, or a K-way temporal strip."""

    axis: str
    rows: int = 1
    cols: int = 1

    SPATIAL = "spatial"
    TEMPORAL = "temporal"

    def __post_init__(self) -> None:
        if self.axis not in (self.SPATIAL, self.TEMPORAL):
            raise LayoutError(f"unknown layout axis {self.axis!r}")
        if self.rows < 1 or self.cols < 1:
            raise LayoutError(f"layout extents must be ≥ 1, got {self.rows}x{self.cols}")
        if self.axis == self.TEMPORAL and self.rows != 1:
            raise LayoutError("temporal layouts use cols as the panel count; rows must be 1")

    @staticmethod
    def spatial(rows: int, cols: int) -> "PanelLayout":
        return PanelLayout(PanelLayout.SPATIAL, rows, cols)

    @staticmethod
    def temporal(count: int) -> "PanelLayout":
        return PanelLayout(PanelLayout.TEMPORAL, 1, count)

    @property
    def panel_count(self) -> int:
        return self.rows * self.cols

    def describe(self) -> str:
        if self.axis == self.SPATIAL:
            return f"spatial:{self.rows}x{self.cols}"
        return f"temporal:{self.cols}"

    @staticmethod
    def parse(text: str) -> "PanelLayout":
        kind, _, arg = text.partition(":")
        if kind == "spatial":
            r, _, g = arg.partition("x")
            if r.isdigit() and g.isdigit():
                return PanelLayout.spatial(int(r), int(g))
        elif kind == "temporal":
            if arg.isdigit():
                return PanelLayout.temporal(int(arg))
        raise LayoutError(f"unparseable layout descriptor {text!r}")

    def composite_shape(self, panel_shape: Sequence[int]) -> Tuple[int, int, int, int]:
        f, c, h, w = panel_shape
        if self.axis == self.SPATIAL:
            return f, c, self.rows * h, self.cols * w
        return self.cols * f, c, h, w

    def panel_slices(self, idx: int, panel_shape: Sequence[int]) -> Tuple[slice, slice, slice, slice]:
        """Index slices of panel idx's region within the composite."""
        if not 0 <= idx < self.panel_count:
            raise LayoutError(f"panel index {idx} out of range [0, {self.panel_count})")
        f, c, h, w = panel_shape
        if self.axis == self.SPATIAL:
            r, g = divmod(idx, self.cols)
            return (slice(None), slice(None),
                    slice(r * h, (r + 1) * h), slice(g * w, (g + 1) * w))
        return slice(idx * f, (idx + 1) * f), slice(None), slice(None), slice(None)


@dataclass(frozen=True)
class RegionMask:
    """Binary tensor over the composite: 1 = generate, 0 = known/conditioned."""

    values: np.ndarray

    def __post_init__(self) -> None:
        bad = (self.values != 0) & (self.values != 1)
        if bad.any():
            raise LayoutError("mask values must be exactly 0 or 1")

    def ones_fraction(self) -> float:
        return float(self.values.mean())


@dataclass
class PanelSet:
    """n panels to generate plus m conditional panels, slot-aligned with prompts.

    Generated slots hold None before sampling; conditional slots hold tensors.
    n = 0 (every panel known) is allowed so the masked sampler's vacuous
    all-known case is expressible.
    """

    n: int
    m: int
    panels: List[Optional[VideoTensor]] = field(default_factory=list)
    layout: PanelLayout = PanelLayout.spatial(1, 1)

    def __post_init__(self) -> None:
        if self.n < 0 or self.m < 0:
            raise LayoutError(f"need n ≥ 0 and m ≥ 0, got n={self.n}, m={self.m}")
        if self.n + self.m != self.layout.panel_count:
            raise LayoutError(
                f"n+m = {self.n + self.m} does not match layout panel count {self.layout.panel_count}")
        if len(self.panels) != self.layout.panel_count:
            raise LayoutError(
                f"panel list length {len(self.panels)} != layout panel count {self.layout.panel_count}")
        present = sum(p is not None for p in self.panels)
        if present != self.m:
            raise LayoutError(f"{present} panels present but m={self.m} conditional slots declared")

    @property
    def generate_indices(self) -> Set[int]:
        return {i for i, p in enumerate(self.panels) if p is None}


def _check_homogeneous(panels: Sequence[VideoTensor], layout: PanelLayout) -> Tuple[int, int, int, int]:
    if len(panels) != layout.panel_count:
        raise LayoutError(
            f"{len(panels)} panels supplied for a {layout.panel_count}-panel layout")
    shape = panels[0].shape
    for i, p in enumerate(panels):
        if p.shape != shape:
            raise LayoutError(f"panel {i} has shape {p.shape}, expected {shape}")
    return shape


def compose_panels(panels: Sequence[VideoTensor], layout: PanelLayout) -> VideoTensor:
    """Concatenate panels into one composite; panel k lands at grid cell
    (k div G, k mod G) for Spatial(R,G), or frames [k·F, (k+1)·F) for Temporal(K)."""
    shape = _check_homogeneous(panels, layout)
    f, c, h, w = shape
    stack = np.stack([p.values for p in panels], axis=0)
    if layout.axis == PanelLayout.TEMPORAL:
        composite = stack.reshape(layout.cols * f, c, h, w)
    else:
        grid = stack.reshape(layout.rows, layout.cols, f, c, h, w)
        composite = grid.transpose(2, 3, 0, 4, 1, 5).reshape(
            f, c, layout.rows * h, layout.cols * w)
    return VideoTensor(np.ascontiguousarray(composite))


def split_panels(composite: VideoTensor, layout: PanelLayout) -> List[VideoTensor]:
    """Exact inverse of compose_panels."""
    f, c, h, w = composite.shape
    if layout.axis == PanelLayout.TEMPORAL:
        if f % layout.cols:
            raise LayoutError(f"{f} frames not divisible into {layout.cols} temporal panels")
        pf = f // layout.cols
        parts = composite.values.reshape(layout.cols, pf, c, h, w)
        return [VideoTensor(np.ascontiguousarray(parts[k])) for k in range(layout.cols)]
    if h % layout.rows or w % layout.cols:
        raise LayoutError(
            f"extents {h}x{w} not divisible by spatial grid {layout.rows}x{layout.cols}")
    ph, pw = h // layout.rows, w // layout.cols
    grid = composite.values.reshape(f, c, layout.rows, ph, layout.cols, pw)
    grid = grid.transpose(2, 4, 0, 1, 3, 5)
    return [VideoTensor(np.ascontiguousarray(grid[k // layout.cols, k % layout.cols]))
            for k in range(layout.panel_count)]


def build_mask(layout: PanelLayout, generate_indices: Sequence[int],
               panel_shape: Sequence[int], dtype=np.float32) -> RegionMask:
    """Mask that is 1 exactly over the listed panels' regions, 0 elsewhere."""
    values = np.zeros(layout.composite_shape(panel_shape), dtype=dtype)
    for idx in sorted(set(generate_indices)):
        values[layout.panel_slices(int(idx), panel_shape)] = 1
    return RegionMask(values)
