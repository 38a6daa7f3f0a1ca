"""Conditioning tokens: pooled position embeddings appended to encoder inputs.

The student sees pooled positions of every target block, the teacher sees the
pooled positions of the context, and at inference the encoder sees a 2D-pooled
summary of the whole position grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor
from torch.nn.utils.rnn import pad_sequence

from jepalab import numerics as nx
from jepalab.masking import MaskSpec

TARGET_WINDOWS = "target-windows"
CONTEXT_WINDOW = "context-window"
FULL_GRID = "full-grid"


@dataclass
class ConditionTokens:
    tokens: Tensor  # (S, d)
    origin: str

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def empty(cls, d: int, origin: str, dtype=torch.float32) -> "ConditionTokens":
        return cls(torch.zeros(0, d, dtype=dtype), origin)


@dataclass
class EncoderInput:
    """One sequence: content tokens followed by condition tokens."""

    content: Tensor  # (T', d)
    condition: ConditionTokens

    @property
    def content_count(self) -> int:
        return self.content.shape[0]

    def sequence(self) -> Tensor:
        return nx.concat_seq([self.content, self.condition.tokens])

    def __len__(self) -> int:
        return self.content_count + self.condition.count


@dataclass
class EncoderBatch:
    """Padded batch of :class:`EncoderInput`; validity masks mark real rows."""

    content: Tensor  # (B, Lc, d)
    content_valid: Tensor  # (B, Lc) bool
    condition: Tensor  # (B, Ls, d)
    condition_valid: Tensor  # (B, Ls) bool

    @classmethod
    def from_inputs(cls, inputs: Sequence[EncoderInput]) -> "EncoderBatch":
        content, cv = pad_rows([i.content for i in inputs])
        condition, sv = pad_rows([i.condition.tokens for i in inputs], d=content.shape[-1])
        return cls(content, cv, condition.to(content.dtype), sv)

    @property
    def batch_size(self) -> int:
        return self.content.shape[0]


def pad_rows(rows: Sequence[Tensor], d: int | None = None) -> tuple[Tensor, Tensor]:
    """Stack variable-length ``(L_i, d)`` tensors into ``(B, max L, d)`` plus a validity mask."""
    if not rows:
        raise ValueError("pad_rows needs at least one sequence")
    d = rows[0].shape[-1] if d is None else d
    lengths = torch.tensor([r.shape[0] for r in rows])
    L = int(lengths.max())
    if L == 0:
        out = torch.zeros(len(rows), 0, d, dtype=rows[0].dtype)
    elif bool((lengths == L).all()):
        out = torch.stack(list(rows))
    else:
        out = pad_sequence(list(rows), batch_first=True)
    valid = torch.arange(L)[None, :] < lengths[:, None]
    return out, valid


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def pool_kernel(m: int, available: int | None = None) -> int:
    k = max(1, m // 2)
    if available is not None:
        # never pool a window larger than its input, so every window keeps >= 1 token
        k = min(k, max(available, 1))
    return k


def pool_positions_1d(p_rows: Tensor, m: int, origin: str = TARGET_WINDOWS) -> ConditionTokens:
    """Average consecutive rows in windows of ``max(1, m // 2)``; the remainder is dropped."""
    if p_rows.shape[0] == 0:
        raise ValueError("pool_positions_1d: empty input")
    return ConditionTokens(nx.avgpool1d(p_rows, pool_kernel(m, p_rows.shape[0])), origin)


def pool_positions_2d(p: Tensor, grid: tuple[int, int], kernel: int = 4, stride: int | None = None) -> ConditionTokens:
    rows, cols = grid
    if p.shape[0] != rows * cols:
        raise nx.ShapeError("pool_positions_2d", p.shape, detail=f"grid {grid}")
    if rows < kernel or cols < kernel:
        raise ValueError(f"pool_positions_2d: grid {grid} smaller than kernel {kernel}")
    pooled = nx.avgpool2d(p.reshape(rows, cols, -1), kernel, stride)
    return ConditionTokens(pooled.reshape(-1, p.shape[-1]), FULL_GRID)


# ---------------------------------------------------------------------------
# input assembly
# ---------------------------------------------------------------------------


def _as_index(ix: np.ndarray) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(ix, dtype=np.int64))


def context_condition(spec: MaskSpec, p: Tensor) -> ConditionTokens:
    parts = [pool_positions_1d(nx.gather_rows(p, _as_index(t)), spec.m).tokens for t in spec.targets]
    return ConditionTokens(torch.cat(parts, dim=0), TARGET_WINDOWS)


def target_condition(spec: MaskSpec, p: Tensor) -> ConditionTokens:
    return pool_positions_1d(nx.gather_rows(p, _as_index(spec.context)), spec.m, CONTEXT_WINDOW)


def build_context_input(x_c: Tensor, spec: MaskSpec, p: Tensor, enabled: bool = True) -> EncoderInput:
    """Student input: context tokens, then each target block's pooled positions in block order."""
    if x_c.shape[0] != len(spec.context):
        raise nx.ShapeError("build_context_input", x_c.shape, (len(spec.context),))
    cond = context_condition(spec, p) if enabled else ConditionTokens.empty(p.shape[-1], TARGET_WINDOWS, p.dtype)
    return EncoderInput(x_c, cond)


def build_target_input(x_full: Tensor, spec: MaskSpec, p: Tensor, enabled: bool = True) -> EncoderInput:
    """Teacher input: every token of the image, then the context window's pooled positions."""
    if x_full.shape[0] != spec.T:
        raise nx.ShapeError("build_target_input", x_full.shape, (spec.T,))
    cond = target_condition(spec, p) if enabled else ConditionTokens.empty(p.shape[-1], CONTEXT_WINDOW, p.dtype)
    return EncoderInput(x_full, cond)


def build_inference_input(
    x_full: Tensor,
    p: Tensor,
    grid: tuple[int, int],
    enabled: bool = True,
    kernel: int = 4,
    stride: int | None = None,
) -> EncoderInput:
    if enabled:
        cond = pool_positions_2d(p, grid, kernel, stride)
    else:
        cond = ConditionTokens.empty(p.shape[-1], FULL_GRID, p.dtype)
    return EncoderInput(x_full, cond)


def condition_counts(spec: MaskSpec) -> tuple[int, int]:
    """(student, teacher) condition-token counts for a mask, without touching tensors."""
    m = spec.m
    student = spec.k * (m // pool_kernel(m, m))
    n = len(spec.context)
    teacher = n // pool_kernel(m, n)
    return student, teacher


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


@dataclass
class FlopsConfig:
    """Sequence lengths and widths for one training image."""

    enc_dim: int
    enc_depth: int
    pred_dim: int
    pred_depth: int
    mlp_ratio: float
    T: int
    context_tokens: float
    target_tokens: float
    k: int
    heads: int = 16
    student_condition: float = 0.0
    teacher_condition: float = 0.0
    # trained modules pay forward + backward_factor * forward
    backward_factor: float = 0.0


def _block_flops_closed(L: float, d: int, r: float) -> float:
    return (8 + 4 * r) * L * d * d + 4 * L * L * d


def _block_flops_enumerated(L: float, d: int, r: float, heads: int) -> float:
    # every matmul as (rows, inner, cols), 2 FLOPs per multiply-accumulate
    hd = d / heads
    hidden = r * d
    shapes = [(L, d, d)] * 3  # q, k, v
    shapes += [(L, hd, L)] * heads  # scores per head
    shapes += [(L, L, hd)] * heads  # weighted values per head
    shapes += [(L, d, d), (L, d, hidden), (L, hidden, d)]
    return sum(2.0 * a * b * c for a, b, c in shapes)


def training_flops(cfg: FlopsConfig, conditioned: bool, counter: str = "closed") -> float:
    block = {
        "closed": lambda L, d: _block_flops_closed(L, d, cfg.mlp_ratio),
        "enumerated": lambda L, d: _block_flops_enumerated(L, d, cfg.mlp_ratio, cfg.heads),
    }[counter]
    s_extra = cfg.student_condition if conditioned else 0.0
    t_extra = cfg.teacher_condition if conditioned else 0.0
    train = 1.0 + cfg.backward_factor
    student = train * cfg.enc_depth * block(cfg.context_tokens + s_extra, cfg.enc_dim)
    teacher = cfg.enc_depth * block(cfg.T + t_extra, cfg.enc_dim)
    predictor = train * cfg.k * cfg.pred_depth * block(cfg.context_tokens + cfg.target_tokens, cfg.pred_dim)
    return student + teacher + predictor


def flops_overhead(cfg: FlopsConfig, counter: str = "closed") -> float:
    """Conditioned / unconditioned training FLOPs (attention + MLP matmuls)."""
    return training_flops(cfg, True, counter) / training_flops(cfg, False, counter)


def flops_config_from_masks(
    specs: Sequence[MaskSpec],
    enc_dim: int,
    enc_depth: int,
    pred_dim: int,
    pred_depth: int,
    mlp_ratio: float = 4.0,
    heads: int = 16,
    backward_factor: float = 0.0,
) -> FlopsConfig:
    """Average sequence lengths over sampled masks into a :class:`FlopsConfig`."""
    if not specs:
        raise ValueError("need at least one mask sample")
    counts = np.array([condition_counts(s) for s in specs], dtype=np.float64)
    return FlopsConfig(
        enc_dim=enc_dim,
        enc_depth=enc_depth,
        pred_dim=pred_dim,
        pred_depth=pred_depth,
        mlp_ratio=mlp_ratio,
        heads=heads,
        T=specs[0].T,
        context_tokens=float(np.mean([len(s.context) for s in specs])),
        target_tokens=float(np.mean([s.m for s in specs])),
        k=specs[0].k,
        student_condition=float(counts[:, 0].mean()),
        teacher_condition=float(counts[:, 1].mean()),
        backward_factor=backward_factor,
    )
