"""Representation quality: RankMe and LiDAR, plus embedding extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from jepalab import conditioning as cond
from jepalab.data import LabeledImage, stack_pixels
from jepalab.masking import MaskSpec, sample_masks
from jepalab.model import ModelState, inference_latents


class DegenerateEmbeddings(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    Z: np.ndarray  # (N, d)
    groups: tuple[int, int] | None = None  # (n sources, q views), sample-major rows

    def __post_init__(self):
        self.Z = np.asarray(self.Z)
        if self.Z.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got shape {self.Z.shape}")
        if self.Z.shape[0] < 2:
            raise ValueError(f"need at least 2 embeddings, got {self.Z.shape[0]}")
        if self.groups is not None:
            n, q = self.groups
            if q < 2 or n < 2 or n * q != self.Z.shape[0]:
                raise ValueError(f"grouping {self.groups} does not fit {self.Z.shape[0]} rows")


def _matrix(Z) -> np.ndarray:
    if isinstance(Z, EmbeddingMatrix):
        Z = Z.Z
    if isinstance(Z, torch.Tensor):
        Z = Z.detach().cpu().numpy()
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError(f"need an N x d matrix with N >= 2, got shape {Z.shape}")
    if not np.isfinite(Z).all():
        raise ValueError("embeddings contain non-finite values")
    return Z


def spectral_entropy_rank(values: np.ndarray, eps: float = 1e-7) -> float:
    """exp of the Shannon entropy of ``values / sum(values) + eps``."""
    p = values / values.sum() + eps
    return float(np.exp(-np.sum(p * np.log(p))))


def rankme(Z, eps: float = 1e-7) -> float:
    """Soft effective rank from the normalized singular-value spectrum."""
    Z = _matrix(Z)
    s = np.linalg.svd(Z, compute_uv=False)
    if s.sum() <= 0.0:
        raise DegenerateEmbeddings("degenerate embeddings: all singular values are zero")
    return spectral_entropy_rank(s, eps)


def scatter_matrices(Z: np.ndarray, n: int, q: int, delta: float) -> tuple[np.ndarray, np.ndarray]:
    X = Z.reshape(n, q, -1)
    means = X.mean(axis=1)
    centered_means = means - means.mean(axis=0)
    between = centered_means.T @ centered_means / n
    within_dev = (X - means[:, None, :]).reshape(n * q, -1)
    within = within_dev.T @ within_dev / (n * q) + delta * np.eye(Z.shape[1])
    return between, within


def lidar(Z, groups: tuple[int, int] | None = None, delta: float = 1e-4, eps: float = 1e-7) -> float:
    """Effective rank of the whitened between-group scatter ``Sw^-1/2 Sb Sw^-1/2``."""
    if groups is None:
        if not isinstance(Z, EmbeddingMatrix) or Z.groups is None:
            raise ValueError("lidar needs grouped embeddings")
        groups = Z.groups
    n, q = groups
    Z = _matrix(Z)
    if n < 2 or q < 2 or n * q != Z.shape[0]:
        raise ValueError(f"grouping {(n, q)} does not fit {Z.shape[0]} rows")
    between, within = scatter_matrices(Z, n, q, delta)
    w_vals, w_vecs = np.linalg.eigh(within)
    inv_sqrt = (w_vecs / np.sqrt(np.clip(w_vals, 1e-10, None))) @ w_vecs.T
    if not np.isfinite(inv_sqrt).all():
        raise DegenerateEmbeddings("within-group scatter is singular")
    lam = np.clip(np.linalg.eigvalsh(inv_sqrt @ between @ inv_sqrt), 0.0, None)
    if lam.sum() <= 0.0:
        return 1.0
    return spectral_entropy_rank(lam, eps)


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def _encoder(state: ModelState, mode: str):
    if mode == "teacher":
        return state.teacher
    if mode == "student":
        return state.student
    raise ValueError(f"unknown embedding mode {mode!r}")


@torch.no_grad()
def embed_pixels(
    state: ModelState,
    pixels: torch.Tensor,
    mode: str = "teacher",
    conditioning: bool = True,
    kernel: int = 4,
    stride: int | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    enc = _encoder(state, mode)
    was_training = enc.training
    enc.eval()
    rows = []
    for start in range(0, pixels.shape[0], batch_size):
        lat = inference_latents(enc, pixels[start : start + batch_size], conditioning, kernel, stride)
        rows.append(lat.pooled())
    enc.train(was_training)
    return torch.cat(rows).double().numpy()


def embed_dataset(
    state: ModelState,
    dataset: list[LabeledImage],
    mode: str = "teacher",
    cfg=None,
    conditioning: bool | None = None,
    kernel: int | None = None,
    stride: int | None = None,
) -> EmbeddingMatrix:
    """Average-pooled content outputs of the inference-conditioned encoder, one row per image."""
    if not dataset:
        raise ValueError("empty dataset")
    if cfg is not None:
        conditioning = cfg.conditioning if conditioning is None else conditioning
        kernel = cfg.inference_pool_kernel if kernel is None else kernel
        stride = cfg.inference_pool_stride if stride is None else stride
    conditioning = True if conditioning is None else conditioning
    kernel = 4 if kernel is None else kernel
    Z = embed_pixels(state, stack_pixels(dataset), mode, conditioning, kernel, stride)
    return EmbeddingMatrix(Z)


@torch.no_grad()
def lidar_views(
    state: ModelState,
    dataset: list[LabeledImage],
    q: int,
    rng: np.random.Generator,
    mask_cfg=None,
    mode: str = "teacher",
    conditioning: bool = True,
    sampler: Callable[[np.random.Generator, tuple[int, int]], MaskSpec] | None = None,
) -> EmbeddingMatrix:
    """q context-mask views per image, each the mean of the conditioned context's content outputs."""
    if sampler is None:
        if mask_cfg is None:
            raise ValueError("lidar_views needs mask_cfg or a sampler")

        def sampler(r, g):
            return sample_masks(r, g, mask_cfg)

    enc = _encoder(state, mode)
    was_training = enc.training
    enc.eval()
    pixels = stack_pixels(dataset)
    rows = []
    for start in range(0, len(dataset), 32):
        x, p, grid = enc.tokenize(pixels[start : start + 32])
        inputs = []
        for i in range(x.shape[0]):
            for _ in range(q):
                spec = sampler(rng, grid)
                ix = torch.from_numpy(spec.context)
                inputs.append(cond.build_context_input(x[i].index_select(0, ix), spec, p, conditioning))
        rows.append(enc.encode(cond.EncoderBatch.from_inputs(inputs)).pooled())
    enc.train(was_training)
    return EmbeddingMatrix(torch.cat(rows).double().numpy(), groups=(len(dataset), q))
