"""ViT context encoder, EMA target encoder and narrow predictor."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from jepalab import conditioning as cond
from jepalab import numerics as nx
from jepalab.data import sincos_pos_embed, to_patches
from jepalab.masking import MaskSpec


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"encoder dim {self.dim} not divisible by {self.heads} heads")
        if self.dim % 4:
            raise ValueError(f"encoder dim {self.dim} not divisible by 4")


@dataclass(frozen=True)
class PredictorConfig:
    depth: int = 2
    dim: int = 32
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads or self.dim % 4:
            raise ValueError(f"predictor dim {self.dim} incompatible with {self.heads} heads")


ENCODER_PRESETS = {
    "vit-t/4": EncoderConfig(depth=4, dim=64, heads=4, mlp_ratio=4.0, patch=4),
    "vit-l/16": EncoderConfig(depth=24, dim=1024, heads=16, mlp_ratio=4.0, patch=16),
    "vit-h/14": EncoderConfig(depth=32, dim=1280, heads=16, mlp_ratio=4.0, patch=14),
}
PREDICTOR_PRESETS = {
    "vit-t/4": PredictorConfig(depth=2, dim=32, heads=4),
    "vit-predictor": PredictorConfig(depth=12, dim=384, heads=16),
}


PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@lru_cache(maxsize=32)
def _positions(rows: int, cols: int, d: int) -> Tensor:
    return sincos_pos_embed(rows, cols, d)


def positions(grid: tuple[int, int], d: int, dtype: torch.dtype = torch.float32) -> Tensor:
    return _positions(grid[0], grid[1], d).to(dtype)


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        # a key bias shifts every logit of a query equally; it is dropped
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, valid: Tensor | None) -> Tensor:
        q = nx.linear(x, self.q.weight, self.q.bias)
        k = nx.linear(x, self.k.weight)
        v = nx.linear(x, self.v.weight, self.v.bias)
        out = nx.attention(q, k, v, self.heads, valid)
        return nx.linear(out, self.proj.weight, self.proj.bias)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=nx.LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=nx.LN_EPS)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor, valid: Tensor | None) -> Tensor:
        h = nx.layer_norm(x, self.norm1.weight, self.norm1.bias)
        x = nx.residual_add(x, self.attn(h, valid))
        h = nx.layer_norm(x, self.norm2.weight, self.norm2.bias)
        h = nx.linear(nx.gelu(nx.linear(h, self.fc1.weight, self.fc1.bias)), self.fc2.weight, self.fc2.bias)
        return nx.residual_add(x, h)


class Transformer(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim, eps=nx.LN_EPS)

    def forward(self, x: Tensor, valid: Tensor | None = None) -> Tensor:
        for blk in self.blocks:
            x = blk(x, valid)
        return nx.layer_norm(x, self.norm.weight, self.norm.bias)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    blocks = getattr(module, "blocks", None)
    if blocks is not None:
        for i, blk in enumerate(blocks, start=1):
            with torch.no_grad():
                blk.attn.proj.weight.div_(math.sqrt(2.0 * i))
                blk.fc2.weight.div_(math.sqrt(2.0 * i))


# ---------------------------------------------------------------------------
# encoder and predictor
# ---------------------------------------------------------------------------


@dataclass
class LatentSequence:
    content: Tensor  # (B, Lc, d)
    content_valid: Tensor  # (B, Lc)
    condition: Tensor  # (B, Ls, d)
    condition_valid: Tensor  # (B, Ls)

    def pooled(self) -> Tensor:
        """Mean over content tokens only; condition outputs never enter the pool."""
        return nx.seq_mean(self.content, self.content_valid)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch * 3, cfg.dim)
        self.transformer = Transformer(cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio)
        # patch projection keeps torch's default (conv-like) init so image content
        # is not drowned by the unit-scale position embeddings
        init_weights(self.transformer)

    def tokenize(self, pixels: Tensor) -> tuple[Tensor, Tensor, tuple[int, int]]:
        """``(B, H, W, 3)`` pixels -> tokens ``(B, T, d)``, positions ``(T, d)``, grid."""
        P = self.cfg.patch
        H, W = pixels.shape[-3:-1]
        grid = (H // P, W // P)
        w = self.patch_embed.weight
        p = positions(grid, self.cfg.dim, w.dtype)
        patches = (to_patches(pixels, P).to(w.dtype) - PIXEL_MEAN) / PIXEL_STD
        return nx.linear(patches, w, self.patch_embed.bias) + p, p, grid

    def encode(self, batch: cond.EncoderBatch) -> LatentSequence:
        Lc = batch.content.shape[1]
        seq = torch.cat([batch.content, batch.condition], dim=1)
        valid = torch.cat([batch.content_valid, batch.condition_valid], dim=1)
        mask = None if bool(valid.all()) else valid
        out = nx.check_finite(self.transformer(seq, mask), "encode")
        return LatentSequence(out[:, :Lc], batch.content_valid, out[:, Lc:], batch.condition_valid)

    def forward(self, batch: cond.EncoderBatch) -> LatentSequence:
        return self.encode(batch)


class Predictor(nn.Module):
    def __init__(self, enc_dim: int, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        self.proj_in = nn.Linear(enc_dim, cfg.dim)
        self.mask_token = nn.Parameter(torch.zeros(cfg.dim))
        self.transformer = Transformer(cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio)
        self.proj_out = nn.Linear(cfg.dim, enc_dim)
        init_weights(self)
        nn.init.trunc_normal_(self.mask_token, std=0.02, a=-0.04, b=0.04)

    def forward(
        self, z: Tensor, z_valid: Tensor, targets: Sequence[Sequence[np.ndarray]], grid: tuple[int, int]
    ) -> tuple[Tensor, Tensor]:
        """Predict every target block of every sample.

        ``z`` is the padded content segment ``(B, Lc, d)`` of the student
        output; ``targets[i][j]`` holds the indices of block j of sample i.
        Returns predictions ``(B*k, M, d)`` and their validity ``(B*k, M)``
        with rows ordered sample-major.
        """
        k = len(targets[0])
        pp = positions(grid, self.cfg.dim, z.dtype)
        ctx = nx.linear(z, self.proj_in.weight, self.proj_in.bias)
        ctx = ctx.repeat_interleave(k, dim=0)
        ctx_valid = z_valid.repeat_interleave(k, dim=0)
        queries = [self.mask_token + nx.gather_rows(pp, cond._as_index(t)) for blocks in targets for t in blocks]
        q, q_valid = cond.pad_rows(queries)
        seq = torch.cat([ctx, q], dim=1)
        valid = torch.cat([ctx_valid, q_valid], dim=1)
        mask = None if bool(valid.all()) else valid
        out = self.transformer(seq, mask)[:, ctx.shape[1]:]
        out = nx.linear(out, self.proj_out.weight, self.proj_out.bias)
        return nx.check_finite(out, "predict"), q_valid


def predict(predictor: Predictor, z_c: LatentSequence, targets, grid) -> tuple[Tensor, Tensor]:
    return predictor(z_c.content, z_c.content_valid, targets, grid)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


class ModelState(nn.Module):
    """Student encoder, EMA teacher and predictor."""

    def __init__(self, encoder: EncoderConfig, predictor: PredictorConfig, seed: int = 0):
        super().__init__()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.student = Encoder(encoder)
            self.predictor = Predictor(encoder.dim, predictor)
        finally:
            torch.random.set_rng_state(gen_state)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)

    @property
    def encoder_cfg(self) -> EncoderConfig:
        return self.student.cfg

    @property
    def predictor_cfg(self) -> PredictorConfig:
        return self.predictor.cfg

    def stores(self) -> dict[str, nx.ParamStore]:
        return {
            "student": nx.ParamStore.from_module(self.student),
            "teacher": nx.ParamStore.from_module(self.teacher),
            "predictor": nx.ParamStore.from_module(self.predictor),
        }

    def trainable(self) -> "dict[str, Tensor]":
        """Optimizer-visible parameters (student and predictor) keyed by qualified name."""
        out = {f"student.{n}": p for n, p in self.student.named_parameters()}
        out.update({f"predictor.{n}": p for n, p in self.predictor.named_parameters()})
        return out

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.encoder_cfg), "predictor": asdict(self.predictor_cfg)}


@torch.no_grad()
def ema_update(state: ModelState, mu: float) -> None:
    """teacher <- mu * teacher + (1 - mu) * student, for every parameter."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {mu}")
    student = dict(state.student.named_parameters())
    teacher = dict(state.teacher.named_parameters())
    if student.keys() != teacher.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise nx.ShapeError("ema_update", t.shape, s.shape, detail=name)
        t.mul_(mu).add_(s, alpha=1.0 - mu)


def momentum_schedule(step: int, total_steps: int, start: float = 0.996, end: float = 1.0) -> float:
    if total_steps <= 0:
        return end
    f = min(max(step / total_steps, 0.0), 1.0)
    return start * (1.0 - f) + end * f


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _index(ix: np.ndarray) -> Tensor:
    return cond._as_index(ix)


def student_forward(
    state: ModelState, pixels: Tensor, specs: Sequence[MaskSpec], conditioning: bool
) -> tuple[LatentSequence, Tensor, Tensor]:
    """Encode conditioned contexts and predict all target blocks."""
    x, p, grid = state.student.tokenize(pixels)
    inputs = [
        cond.build_context_input(nx.gather_rows(x[i], _index(s.context)), s, p, conditioning)
        for i, s in enumerate(specs)
    ]
    z_c = state.student.encode(cond.EncoderBatch.from_inputs(inputs))
    pred, valid = predict(state.predictor, z_c, [s.targets for s in specs], grid)
    return z_c, pred, valid


@torch.no_grad()
def teacher_targets(
    state: ModelState, pixels: Tensor, specs: Sequence[MaskSpec], conditioning: bool, extra_norm: bool = False
) -> Tensor:
    """Teacher latents of the full conditioned image, gathered at each target block."""
    x, p, grid = state.teacher.tokenize(pixels)
    inputs = [cond.build_target_input(x[i], s, p, conditioning) for i, s in enumerate(specs)]
    z = state.teacher.encode(cond.EncoderBatch.from_inputs(inputs)).content
    if extra_norm:
        z = nx.layer_norm(z)
    blocks = [nx.gather_rows(z[i], _index(t)) for i, s in enumerate(specs) for t in s.targets]
    return cond.pad_rows(blocks)[0]


def inference_latents(
    encoder: Encoder,
    pixels: Tensor,
    conditioning: bool,
    kernel: int = 4,
    stride: int | None = None,
) -> LatentSequence:
    x, p, grid = encoder.tokenize(pixels)
    inputs = [cond.build_inference_input(x[i], p, grid, conditioning, kernel, stride) for i in range(x.shape[0])]
    return encoder.encode(cond.EncoderBatch.from_inputs(inputs))
