"""Images, synthetic datasets, patch tokenization and 2D sin-cos position embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

logger = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "cross")


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got {self.pixels.shape}")
        if self.label < 0:
            raise ValueError(f"label must be >= 0, got {self.label}")


@dataclass
class TokenizedImage:
    tokens: Tensor  # (T, d), patch projection + positions
    positions: Tensor  # (T, d)
    grid: tuple[int, int]

    @property
    def T(self) -> int:
        return self.grid[0] * self.grid[1]


# ---------------------------------------------------------------------------
# position embeddings
# ---------------------------------------------------------------------------


def _sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    # channels 2i / 2i+1 hold sin / cos at frequency 10000^(-2i/dim)
    freqs = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    angles = pos[:, None].astype(np.float64) * freqs[None, :]
    out = np.empty((len(pos), dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def sincos_pos_embed(rows: int, cols: int, d: int) -> Tensor:
    """Fixed 2D embedding, raster order: first d/2 channels encode the row, the rest the column."""
    if d % 4:
        raise ValueError(f"embedding dim must be divisible by 4, got {d}")
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    emb = np.concatenate([_sincos_1d(r.reshape(-1), d // 2), _sincos_1d(c.reshape(-1), d // 2)], axis=1)
    return torch.from_numpy(emb.astype(np.float32))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def to_patches(pixels: np.ndarray | Tensor, P: int) -> Tensor:
    """``(..., H, W, 3)`` -> ``(..., T, P*P*3)`` with patches in raster order."""
    x = torch.as_tensor(pixels, dtype=torch.float32)
    *lead, H, W, C = x.shape
    if H % P or W % P:
        raise ValueError(f"image {H}x{W} not divisible by patch size {P}")
    x = x.reshape(*lead, H // P, P, W // P, P, C)
    x = x.movedim(-4, -3)  # (..., H/P, W/P, P, P, C)
    return x.reshape(*lead, (H // P) * (W // P), P * P * C)


def from_patches(patches: Tensor, grid: tuple[int, int], P: int) -> Tensor:
    rows, cols = grid
    *lead, T, _ = patches.shape
    x = patches.reshape(*lead, rows, cols, P, P, 3).movedim(-3, -4)
    return x.reshape(*lead, rows * P, cols * P, 3)


def patchify(image: LabeledImage, P: int, weight: Tensor, bias: Tensor | None = None) -> TokenizedImage:
    """Project flattened patches with ``weight`` (d x P*P*3) and add position embeddings."""
    H, W, _ = image.pixels.shape
    patches = to_patches(image.pixels, P)
    d = weight.shape[0]
    grid = (H // P, W // P)
    pos = sincos_pos_embed(*grid, d).to(weight.dtype)
    tokens = patches.to(weight.dtype) @ weight.T
    if bias is not None:
        tokens = tokens + bias
    return TokenizedImage(tokens=tokens + pos, positions=pos, grid=grid)


def stack_pixels(images: list[LabeledImage]) -> Tensor:
    return torch.from_numpy(np.stack([im.pixels for im in images]).astype(np.float32))


def labels_of(images: list[LabeledImage]) -> np.ndarray:
    return np.array([im.label for im in images], dtype=np.int64)


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------


def _read_png(path: Path, size: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except Exception as err:  # PIL raises several unrelated types
        raise OSError(f"cannot read image {path}: {err}") from err


def load_dataset(root: str | Path, size: tuple[int, int] = (32, 32)) -> list[LabeledImage]:
    """Read ``root/<class>/<file>.png``; labels follow sorted class names."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"no class directories under {root}")
    images = []
    for label, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise ValueError(f"class directory {root / name} has no PNG files")
        for f in files:
            images.append(LabeledImage(_read_png(f, size), label))
    logger.info("loaded %d images in %d classes from %s", len(images), len(classes), root)
    return images


def class_dir_name(label: int) -> str:
    # zero-padded prefix keeps sorted directory order equal to label order
    return f"c{label:02d}_{SHAPES[label]}" if label < len(SHAPES) else f"c{label:02d}"


def export_dataset(images: list[LabeledImage], root: str | Path) -> Path:
    root = Path(root)
    for i, im in enumerate(images):
        d = root / class_dir_name(im.label)
        d.mkdir(parents=True, exist_ok=True)
        arr = np.clip(np.rint(im.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(d / f"{i:06d}.png")
    return root


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


# shapes are always brighter than the background so the silhouette survives any hue
BACKGROUND_MAX = 0.45
SHAPE_MIN = 0.55


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        # apex up, base at cy + r
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.5 * 1.1)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    raise ValueError(kind)


def _background(rng: np.random.Generator, H: int, W: int, corr: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W] / max(H - 1, W - 1, 1)
    c0, c1 = rng.uniform(0.0, BACKGROUND_MAX, size=(2, 3))
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx + np.sin(theta) * yy)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    smooth = c0[None, None, :] * (1 - t[..., None]) + c1[None, None, :] * t[..., None]
    noise = rng.uniform(0.0, BACKGROUND_MAX, size=(H, W, 3))
    return corr * smooth + (1.0 - corr) * noise


def render_synthetic(
    rng: np.random.Generator, label: int, size: tuple[int, int] = (32, 32), grid_objects: int = 1, corr: float = 0.8
) -> tuple[np.ndarray, np.ndarray]:
    """Render one image; returns (pixels, background) so tests can inspect the texture."""
    H, W = size
    bg = _background(rng, H, W, corr)
    img = bg.copy()
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    smin = min(H, W)
    # distractors first and small, the labelled shape last and largest
    kinds = [SHAPES[int(rng.integers(len(SHAPES)))] for _ in range(max(grid_objects, 1) - 1)] + [SHAPES[label]]
    for i, kind in enumerate(kinds):
        primary = i == len(kinds) - 1
        r = rng.uniform(0.22, 0.32) * smin if primary else rng.uniform(0.08, 0.12) * smin
        cy = rng.uniform(r, H - r)
        cx = rng.uniform(r, W - r)
        color = rng.uniform(SHAPE_MIN, 1.0, size=3)
        mask = _shape_mask(kind, yy, xx, cy, cx, r)
        img[mask] = color
    return np.clip(img, 0.0, 1.0).astype(np.float32), bg.astype(np.float32)


def gen_synthetic(
    seed: int,
    n: int,
    grid_objects: int = 1,
    corr: float = 0.8,
    size: tuple[int, int] = (32, 32),
) -> list[LabeledImage]:
    """Procedural shapes dataset: four classes given by the shape type of the largest object.

    ``corr`` blends a smooth colour gradient (1.0) with per-pixel noise (0.0)
    in the background. The output is a pure function of the arguments.
    """
    if not 0.0 <= corr <= 1.0:
        raise ValueError(f"corr must lie in [0, 1], got {corr}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        label = int(rng.integers(len(SHAPES)))
        pixels, _ = render_synthetic(rng, label, size, grid_objects, corr)
        out.append(LabeledImage(pixels, label))
    return out
