"""Pretraining loop: latent regression loss, AdamW, schedules, checkpoints and CSV logs."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from jepalab import container
from jepalab import numerics as nx
from jepalab.config import RunConfig, TrainConfig, from_dict
from jepalab.data import LabeledImage, stack_pixels
from jepalab.masking import MaskSpec, sample_masks
from jepalab.model import ModelState, ema_update, momentum_schedule, student_forward, teacher_targets

logger = logging.getLogger(__name__)

LOG_HEADER = ["step", "epoch", "loss", "lr", "wd", "mu", "rankme"]
CHECKPOINT_KIND = "jepalab-checkpoint"


class TrainingDiverged(FloatingPointError):
    pass


def fmt(x: float) -> str:
    return "%.6g" % x


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def jepa_loss(pred_blocks: Sequence[Tensor], target_blocks: Sequence[Tensor]) -> Tensor:
    """Mean squared error over blocks, tokens and channels."""
    if len(pred_blocks) != len(target_blocks) or not pred_blocks:
        raise nx.ShapeError("jepa_loss", (len(pred_blocks),), (len(target_blocks),), detail="block count")
    for p, t in zip(pred_blocks, target_blocks):
        if p.shape != t.shape:
            raise nx.ShapeError("jepa_loss", p.shape, t.shape)
    return torch.stack([((p - t) ** 2).mean() for p, t in zip(pred_blocks, target_blocks)]).mean()


def batched_loss(pred: Tensor, target: Tensor, valid: Tensor, k: int, kind: str = "mse") -> Tensor:
    """Per-image mean over its k blocks, tokens and channels, then mean over images.

    ``pred``/``target`` are ``(B*k, M, d)`` sample-major with padding marked
    False in ``valid``. Equal to :func:`jepa_loss` applied per image.
    """
    if pred.shape != target.shape:
        raise nx.ShapeError("batched_loss", pred.shape, target.shape)
    if kind == "mse":
        err = (pred - target) ** 2
    elif kind == "smooth_l1":
        err = F.smooth_l1_loss(pred, target, reduction="none")
    else:
        raise ValueError(f"unknown loss {kind!r}")
    d = pred.shape[-1]
    w = valid.to(pred.dtype)
    per_block = (err.sum(dim=-1) * w).sum(dim=-1)  # (B*k,)
    per_image = per_block.reshape(-1, k).sum(dim=1)
    counts = w.sum(dim=-1).reshape(-1, k).sum(dim=1) * d
    return (per_image / counts).mean()


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


@dataclass
class Schedules:
    total_steps: int
    warmup_steps: int
    max_lr: float
    final_lr: float
    wd_range: tuple[float, float]
    ema_range: tuple[float, float]

    @classmethod
    def from_config(cls, cfg: TrainConfig, steps_per_epoch: int) -> "Schedules":
        return cls(
            total_steps=cfg.epochs * steps_per_epoch,
            warmup_steps=cfg.warmup_epochs * steps_per_epoch,
            max_lr=cfg.max_lr,
            final_lr=cfg.final_lr,
            wd_range=tuple(cfg.wd_range),
            ema_range=tuple(cfg.ema_range),
        )

    def lr(self, step: int) -> float:
        return lr_schedule(step, self.total_steps, self.warmup_steps, self.max_lr, self.final_lr)

    def wd(self, step: int) -> float:
        return wd_schedule(step, self.total_steps, *self.wd_range)

    def mu(self, step: int) -> float:
        return momentum_schedule(step, self.total_steps, *self.ema_range)


def lr_schedule(step: int, total: int, warmup: int, max_lr: float, final_lr: float = 1e-6) -> float:
    """Linear warmup from 0 to ``max_lr``, then cosine decay to ``final_lr`` at ``total``."""
    if warmup > 0 and step < warmup:
        return max_lr * step / warmup
    if total <= warmup:
        return max_lr
    f = min((step - warmup) / (total - warmup), 1.0)
    return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + math.cos(math.pi * f))


def wd_schedule(step: int, total: int, start: float = 0.04, end: float = 0.4) -> float:
    f = min(max(step / total, 0.0), 1.0) if total > 0 else 1.0
    w = 0.5 * (1.0 - math.cos(math.pi * f))
    return start * (1.0 - w) + end * w


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


class AdamW:
    """AdamW with decoupled weight decay ``p <- p * (1 - lr * wd)``.

    The schedule supplies ``lr``/``wd`` per call. Names listed in ``no_decay``
    skip the decay term.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8, no_decay=()):
        self.params = params
        self.betas = tuple(betas)
        self.eps = eps
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in params.items()}

    @torch.no_grad()
    def step(self, lr: float, wd: float, grads: dict[str, Tensor] | None = None) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name] if grads is not None else p.grad
            if g is None:
                g = torch.zeros_like(p)
            if wd and name not in self.no_decay:
                p.mul_(1.0 - lr * wd)
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / c1)

    def state_tensors(self) -> dict[str, Tensor]:
        out = {f"adam.m.{n}": t for n, t in self.m.items()}
        out.update({f"adam.v.{n}": t for n, t in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for n in self.params:
            self.m[n].copy_(torch.from_numpy(tensors[f"adam.m.{n}"]))
            self.v[n].copy_(torch.from_numpy(tensors[f"adam.v.{n}"]))


def optimizer_step(params, grads, lr, wd, state: AdamW | None = None, **kw) -> AdamW:
    """Apply one AdamW update to ``params`` in place; returns the (possibly new) state."""
    opt = state if state is not None else AdamW(params, **kw)
    opt.step(lr, wd, grads)
    return opt


def make_optimizer(state: ModelState, cfg: TrainConfig) -> AdamW:
    params = state.trainable()
    no_decay = [n for n, p in params.items() if p.dim() < 2]
    return AdamW(params, betas=cfg.betas, eps=cfg.adam_eps, no_decay=no_decay)


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


def compute_loss(state: ModelState, pixels: Tensor, specs: Sequence[MaskSpec], conditioning: bool, cfg: TrainConfig):
    _, pred, valid = student_forward(state, pixels, specs, conditioning)
    target = teacher_targets(state, pixels, specs, conditioning, cfg.target_norm)
    return batched_loss(pred, target, valid, specs[0].k, cfg.loss)


class _StudentLoss(torch.nn.Module):
    def __init__(self, state: ModelState, pixels, specs, conditioning, target, kind):
        super().__init__()
        self.state = state
        self.pixels, self.specs, self.conditioning, self.target, self.kind = pixels, specs, conditioning, target, kind

    def forward(self) -> Tensor:
        _, pred, valid = student_forward(self.state, self.pixels, self.specs, self.conditioning)
        return batched_loss(pred, self.target, valid, self.specs[0].k, self.kind)


def loss_closure(state: ModelState, pixels: Tensor, specs: Sequence[MaskSpec], conditioning: bool, cfg: TrainConfig):
    """``(fn, params)`` with ``fn(params) -> loss`` over the trainable parameters.

    Teacher targets are computed once up front, which is exactly what the
    stop-gradient makes the student see. Used by the gradient check.
    """
    target = teacher_targets(state, pixels, specs, conditioning, cfg.target_norm)
    module = _StudentLoss(state, pixels, specs, conditioning, target, cfg.loss)
    params = {f"state.{n}": p.detach() for n, p in state.trainable().items()}

    def fn(P):
        return torch.func.functional_call(module, P, (), strict=False)

    return fn, params


def train_step(
    state: ModelState,
    opt: AdamW,
    pixels: Tensor,
    specs: Sequence[MaskSpec],
    lr: float,
    wd: float,
    mu: float,
    cfg: TrainConfig,
    conditioning: bool = True,
    step: int = 0,
) -> float:
    for p in opt.params.values():
        p.grad = None
    loss = compute_loss(state, pixels, specs, conditioning, cfg)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {step} (lr={lr:.6g}, wd={wd:.6g}, mu={mu:.6g})")
    nx.backward(loss)
    opt.step(lr, wd)
    ema_update(state, mu)
    return value


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, st: dict) -> None:
    rng.bit_generator.state = st


def save_checkpoint(path, cfg: RunConfig, step: int, state: ModelState, opt: AdamW, rng: np.random.Generator):
    tensors = {}
    for group, store in state.stores().items():
        tensors.update({f"{group}.{n}": p for n, p in store.items()})
    tensors.update(opt.state_tensors())
    meta = {
        "kind": CHECKPOINT_KIND,
        "config": cfg.to_dict(),
        "step": step,
        "adam_t": opt.t,
        "rng": _rng_state(rng),
    }
    return container.save(path, meta, tensors)


def load_checkpoint(path) -> tuple[RunConfig, int, ModelState, AdamW, np.random.Generator, dict]:
    meta, tensors = container.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise container.ContainerError(f"{path} is not a training checkpoint")
    cfg = from_dict(meta["config"])
    state = ModelState(cfg.model.encoder_config(), cfg.model.predictor_config(), seed=cfg.train.seed)
    with torch.no_grad():
        for group, store in state.stores().items():
            for n, p in store.items():
                p.copy_(torch.from_numpy(tensors[f"{group}.{n}"]))
    opt = make_optimizer(state, cfg.train)
    opt.load_state_tensors(tensors, meta["adam_t"])
    rng = np.random.default_rng()
    _set_rng_state(rng, meta["rng"])
    return cfg, meta["step"], state, opt, rng, meta


def checkpoint_paths(run_dir: str | Path) -> list[Path]:
    d = Path(run_dir) / "checkpoints"
    if not d.is_dir():
        raise FileNotFoundError(f"checkpoint directory {d} does not exist")
    return sorted(d.glob("step_*.ckpt"))


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    # stateless per-epoch shuffle so a resumed run needs no extra rng state
    return np.random.default_rng([seed, epoch]).permutation(n)


def sample_batch_masks(rng, grid, cfg: RunConfig, n: int) -> list[MaskSpec]:
    return [sample_masks(rng, grid, cfg.mask) for _ in range(n)]


def _read_log(path: Path, upto_step: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if int(r[0]) <= upto_step]


def pretrain(
    cfg: RunConfig,
    train_set: list[LabeledImage],
    out_dir: str | Path,
    eval_set: list[LabeledImage] | None = None,
    resume: str | Path | None = None,
    max_steps: int | None = None,
) -> Path:
    """Train a student/teacher/predictor triple; returns the run directory.

    Writes ``log.csv`` and ``checkpoints/step_XXXXXX.ckpt``. ``max_steps``
    stops early (used to simulate interruption); ``resume`` continues from a
    checkpoint written by an earlier call with the same config.
    """
    # local import: metrics depends on the model module only, not on training
    from jepalab.metrics import embed_dataset, rankme

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    n = len(train_set)
    if n == 0:
        raise ValueError("empty training set")
    bs = min(tc.batch_size, n)
    steps_per_epoch = n // bs
    sched = Schedules.from_config(tc, steps_per_epoch)
    total = sched.total_steps

    if resume is not None:
        _, step, state, opt, rng, _ = load_checkpoint(resume)
        rows = _read_log(out / "log.csv", step)
    else:
        state = ModelState(cfg.model.encoder_config(), cfg.model.predictor_config(), seed=tc.seed)
        opt = make_optimizer(state, tc)
        rng = np.random.default_rng(tc.seed)
        step, rows = 0, []

    P = state.encoder_cfg.patch
    H, W = train_set[0].pixels.shape[:2]
    grid = (H // P, W // P)
    ckpt_every = tc.checkpoint_every or steps_per_epoch
    log_path = out / "log.csv"

    def write_log():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        w.writerows(rows)
        log_path.write_text(buf.getvalue())

    stop = total if max_steps is None else min(total, max_steps)
    try:
        while step < stop:
            epoch, pos = divmod(step, steps_per_epoch)
            order = epoch_order(tc.seed, epoch, n)
            idx = order[pos * bs : (pos + 1) * bs]
            pixels = stack_pixels([train_set[i] for i in idx])
            specs = sample_batch_masks(rng, grid, cfg, len(idx))
            lr, wd, mu = sched.lr(step), sched.wd(step), sched.mu(step)
            state.train()
            loss = train_step(state, opt, pixels, specs, lr, wd, mu, tc, cfg.conditioning, step)
            step += 1
            is_ckpt = step % ckpt_every == 0 or step == total
            if step % tc.log_every == 0 or is_ckpt or step == 1:
                rm = ""
                if is_ckpt and eval_set:
                    Z = embed_dataset(state, eval_set[: cfg.metrics.n_embed], cfg.metrics.mode, cfg)
                    rm = fmt(rankme(Z, cfg.metrics.rankme_eps))
                rows.append([str(step), str(epoch), fmt(loss), fmt(lr), fmt(wd), fmt(mu), rm])
                logger.info("step %d epoch %d loss %.5f lr %.2e", step, epoch, loss, lr)
            if is_ckpt:
                save_checkpoint(out / "checkpoints" / f"step_{step:06d}.ckpt", cfg, step, state, opt, rng)
                write_log()
    except TrainingDiverged as err:
        write_log()
        (out / "diverged.txt").write_text(str(err) + "\n")
        raise
    write_log()
    return out
