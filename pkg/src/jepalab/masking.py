"""Multi-block context/target mask sampling on a token grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateMaskError(ValueError):
    """Raised when no nonempty context survives target removal."""


@dataclass
class MaskConfig:
    k: int = 4
    target_scale: tuple[float, float] = (0.15, 0.2)
    target_aspect: tuple[float, float] = (0.75, 1.5)
    context_scale: tuple[float, float] = (0.85, 1.0)
    context_aspect: tuple[float, float] = (1.0, 1.0)
    max_retries: int = 20
    min_target_tokens: int = 2

    def __post_init__(self):
        self.target_scale = tuple(float(v) for v in self.target_scale)
        self.target_aspect = tuple(float(v) for v in self.target_aspect)
        self.context_scale = tuple(float(v) for v in self.context_scale)
        self.context_aspect = tuple(float(v) for v in self.context_aspect)
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError(f"mask.k must be >= 1, got {self.k}")
        for name in ("target_scale", "context_scale"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise ValueError(f"mask.{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        for name in ("target_aspect", "context_aspect"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise ValueError(f"mask.{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.max_retries < 1:
            raise ValueError("mask.max_retries must be >= 1")


@dataclass
class MaskSpec:
    context: np.ndarray  # sorted int64 indices
    targets: list[np.ndarray]  # k sorted int64 index arrays of equal length
    grid: tuple[int, int]
    m: int = field(init=False)

    def __post_init__(self):
        self.m = len(self.targets[0]) if self.targets else 0

    @property
    def T(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def k(self) -> int:
        return len(self.targets)

    def check(self) -> None:
        """Assert every structural invariant; raises AssertionError on violation."""
        assert len(self.context) > 0, "empty context"
        assert all(len(t) == self.m for t in self.targets), "unequal target cardinality"
        union = np.unique(np.concatenate(self.targets)) if self.targets else np.array([], dtype=np.int64)
        assert np.intersect1d(self.context, union).size == 0, "context overlaps targets"
        for ix in [self.context, *self.targets]:
            assert ix.size == 0 or (ix.min() >= 0 and ix.max() < self.T), "index out of range"
            assert np.all(np.diff(ix) > 0), "indices not sorted/unique"


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def block_shape(area: float, aspect: float, grid: tuple[int, int], min_area: int = 1) -> tuple[int, int]:
    """Height/width of a block with roughly ``area`` cells and height/width ratio ``aspect``."""
    rows, cols = grid
    area = max(_round(area), min_area, 1)
    h = min(max(_round(math.sqrt(area * aspect)), 1), rows)
    w = min(max(_round(area / h), 1), cols)
    while h * w < min_area and (h < rows or w < cols):
        if w < cols:
            w += 1
        else:
            h += 1
    return h, w


def sample_shape(
    rng: np.random.Generator,
    grid: tuple[int, int],
    scale_range: tuple[float, float],
    aspect_range: tuple[float, float],
    min_area: int = 1,
) -> tuple[int, int]:
    scale = rng.uniform(*scale_range) if scale_range[1] > scale_range[0] else scale_range[0]
    aspect = rng.uniform(*aspect_range) if aspect_range[1] > aspect_range[0] else aspect_range[0]
    return block_shape(scale * grid[0] * grid[1], aspect, grid, min_area)


def place_block(rng: np.random.Generator, grid: tuple[int, int], h: int, w: int) -> np.ndarray:
    rows, cols = grid
    top = int(rng.integers(0, rows - h + 1))
    left = int(rng.integers(0, cols - w + 1))
    # raster order of a rectangle is already sorted
    return (np.arange(top, top + h)[:, None] * cols + np.arange(left, left + w)).reshape(-1).astype(np.int64)


def sample_block(
    rng: np.random.Generator,
    grid: tuple[int, int],
    scale_range: tuple[float, float],
    aspect_range: tuple[float, float],
) -> np.ndarray:
    """One axis-aligned rectangle of grid cells, placed uniformly at random."""
    h, w = sample_shape(rng, grid, scale_range, aspect_range)
    return place_block(rng, grid, h, w)


def sample_masks(rng: np.random.Generator, grid: tuple[int, int], cfg: MaskConfig) -> MaskSpec:
    """Sample k equal-size target blocks and a context block with the targets removed."""
    for _ in range(cfg.max_retries):
        h, w = sample_shape(rng, grid, cfg.target_scale, cfg.target_aspect, cfg.min_target_tokens)
        targets = [place_block(rng, grid, h, w) for _ in range(cfg.k)]
        context = sample_block(rng, grid, cfg.context_scale, cfg.context_aspect)
        context = np.setdiff1d(context, np.concatenate(targets), assume_unique=False)
        if context.size:
            return MaskSpec(context=context.astype(np.int64), targets=targets, grid=tuple(grid))
    raise DegenerateMaskError(
        f"degenerate mask config: empty context after {cfg.max_retries} attempts on grid {grid}"
    )
