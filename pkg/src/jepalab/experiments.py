"""Experiment drivers: context-scale sweep, sample-efficiency curve, pooling ablation."""

from __future__ import annotations

import copy
import csv
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from jepalab import container
from jepalab.config import RunConfig
from jepalab.data import LabeledImage, gen_synthetic, labels_of, load_dataset
from jepalab.masking import DegenerateMaskError
from jepalab.metrics import EmbeddingMatrix, embed_dataset, lidar, lidar_views, rankme
from jepalab.model import ModelState
from jepalab.probe import evaluate_probe, train_probe
from jepalab.trainer import checkpoint_paths, fmt, load_checkpoint, pretrain

logger = logging.getLogger(__name__)

VARIANTS = {"ijepa": False, "ec-ijepa": True}
SWEEP_HEADER = ["variant", "lo", "hi", "seed", "top1", "rankme", "collapsed"]
CURVE_HEADER = ["step", "variant", "top1"]
ABLATION_HEADER = ["kernel", "stride", "top1"]
EMBEDDINGS_KIND = "jepalab-embeddings"


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def load_data(cfg: RunConfig, source: str | None = None) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """(train, eval) images for a run config."""
    d = cfg.data
    source = source or d.source
    size = (d.image_size, d.image_size)
    if source == "synthetic":
        train = gen_synthetic(d.seed, d.n_train, d.grid_objects, d.corr, size)
        evals = gen_synthetic(d.eval_seed, d.n_eval, d.grid_objects, d.corr, size)
        return train, evals
    images = load_dataset(source, size)
    order = np.random.default_rng(d.seed).permutation(len(images))
    n_eval = max(1, len(images) // 5)
    return [images[i] for i in order[n_eval:]], [images[i] for i in order[:n_eval]]


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    out = copy.deepcopy(cfg)
    out.train.seed = seed
    out.seeds = [seed]
    return out


def probe_accuracy(
    state: ModelState,
    cfg: RunConfig,
    train: list[LabeledImage],
    evals: list[LabeledImage],
    kernel: int | None = None,
    stride: int | None = None,
) -> tuple[float, float]:
    """(train top-1, eval top-1) of a linear probe on the frozen encoder."""
    kw = dict(mode=cfg.metrics.mode, cfg=cfg, kernel=kernel, stride=stride)
    Ztr = embed_dataset(state, train, **kw)
    Zev = embed_dataset(state, evals, **kw)
    n_classes = int(max(labels_of(train).max(), labels_of(evals).max())) + 1
    head = train_probe(Ztr, labels_of(train), cfg.probe, n_classes)
    return evaluate_probe(head, Ztr, labels_of(train)), evaluate_probe(head, Zev, labels_of(evals))


def run_variant(cfg: RunConfig, variant: str, seed: int, out_dir: Path, data) -> dict:
    run_cfg = with_seed(cfg, seed)
    run_cfg.conditioning = VARIANTS[variant]
    train, evals = data
    run_dir = pretrain(run_cfg, train, out_dir, eval_set=evals)
    _, _, state, _, _, _ = load_checkpoint(checkpoint_paths(run_dir)[-1])
    _, top1 = probe_accuracy(state, run_cfg, train, evals)
    Z = embed_dataset(state, evals[: run_cfg.metrics.n_embed], run_cfg.metrics.mode, run_cfg)
    return {"top1": top1, "rankme": rankme(Z, run_cfg.metrics.rankme_eps), "run_dir": run_dir}


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def sweep_context(
    cfg: RunConfig,
    ranges: Sequence[tuple[float, float]],
    out_csv: str | Path,
    variants: Sequence[str] = ("ijepa", "ec-ijepa"),
    seeds: Sequence[int] | None = None,
) -> list[dict]:
    """Pretrain and probe every (context_scale, variant, seed) cell."""
    if not ranges:
        raise ValueError("sweep_context needs at least one context_scale range")
    seeds = list(cfg.seeds if seeds is None else seeds)
    data = load_data(cfg)
    base = Path(cfg.out_dir)
    results, rows = [], []
    for lo, hi in ranges:
        for variant in variants:
            for seed in seeds:
                cell = copy.deepcopy(cfg)
                cell.mask.context_scale = (float(lo), float(hi))
                cell.mask.validate()
                rec = {"variant": variant, "lo": lo, "hi": hi, "seed": seed, "top1": None, "rankme": None,
                       "collapsed": ""}
                try:
                    res = run_variant(cell, variant, seed, base / f"ctx_{lo:g}_{hi:g}" / variant / f"seed_{seed}", data)
                    rec.update(top1=res["top1"], rankme=res["rankme"])
                except DegenerateMaskError as err:
                    logger.warning("context range (%g, %g): %s", lo, hi, err)
                    rec["collapsed"] = "config"
                results.append(rec)
                rows.append([variant, fmt(lo), fmt(hi), seed,
                             "" if rec["top1"] is None else fmt(rec["top1"]),
                             "" if rec["rankme"] is None else fmt(rec["rankme"]),
                             rec["collapsed"]])
                write_csv(out_csv, SWEEP_HEADER, rows)
    write_csv(out_csv, SWEEP_HEADER, rows)
    return results


def probe_checkpoints(cfg: RunConfig, run_dir: str | Path, variant: str, data=None) -> list[tuple[int, float]]:
    paths = checkpoint_paths(run_dir)
    if not paths:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    train, evals = data or load_data(cfg)
    out = []
    for path in paths:
        ckpt_cfg, step, state, _, _, _ = load_checkpoint(path)
        ckpt_cfg.probe = cfg.probe
        _, top1 = probe_accuracy(state, ckpt_cfg, train, evals)
        out.append((step, top1))
    return out


def efficiency_curve(
    cfg: RunConfig,
    out_csv: str | Path,
    run_dirs: dict[str, str | Path] | None = None,
) -> list[tuple[int, str, float]]:
    """Probe every checkpoint of each variant's run; pretrains both variants when no runs are given."""
    data = load_data(cfg)
    if run_dirs is None:
        run_dirs = {}
        seed = cfg.seeds[0]
        for variant, on in VARIANTS.items():
            run_cfg = with_seed(cfg, seed)
            run_cfg.conditioning = on
            run_dirs[variant] = pretrain(run_cfg, data[0], Path(cfg.out_dir) / variant, eval_set=data[1])
    rows = []
    for variant, run_dir in run_dirs.items():
        for step, top1 in probe_checkpoints(cfg, run_dir, variant, data):
            rows.append((step, variant, top1))
    write_csv(out_csv, CURVE_HEADER, [[s, v, fmt(t)] for s, v, t in rows])
    return rows


def ablate_pooling(
    checkpoint: str | Path,
    cfg: RunConfig,
    kernels: Sequence[int],
    strides: Sequence[int],
    out_csv: str | Path,
    data=None,
) -> list[tuple[int, int, float | None]]:
    """Re-extract inference features for each (kernel, stride) 2D pooling and retrain the probe."""
    ckpt_cfg, _, state, _, _, _ = load_checkpoint(checkpoint)
    ckpt_cfg.probe = cfg.probe
    ckpt_cfg.conditioning = True
    train, evals = data or load_data(cfg)
    P = state.encoder_cfg.patch
    rows_n, cols_n = train[0].pixels.shape[0] // P, train[0].pixels.shape[1] // P
    out, rows = [], []
    for k in kernels:
        for s in strides:
            if k > min(rows_n, cols_n) or s > min(rows_n, cols_n):
                logger.warning("skipping kernel=%d stride=%d: exceeds grid %dx%d", k, s, rows_n, cols_n)
                out.append((k, s, None))
                rows.append([k, s, "skipped"])
                continue
            _, top1 = probe_accuracy(state, ckpt_cfg, train, evals, kernel=k, stride=s)
            out.append((k, s, top1))
            rows.append([k, s, fmt(top1)])
    write_csv(out_csv, ABLATION_HEADER, rows)
    return out


# ---------------------------------------------------------------------------
# embedding dumps
# ---------------------------------------------------------------------------


def export_embeddings(
    checkpoint: str | Path,
    images: list[LabeledImage],
    out_path: str | Path,
    lidar_q: int = 0,
    seed: int = 0,
) -> EmbeddingMatrix:
    """Write pooled inference embeddings (or grouped context views when ``lidar_q`` > 0)."""
    cfg, step, state, _, _, _ = load_checkpoint(checkpoint)
    if lidar_q:
        E = lidar_views(state, images, lidar_q, np.random.default_rng(seed), cfg.mask, cfg.metrics.mode, cfg.conditioning)
    else:
        E = embed_dataset(state, images, cfg.metrics.mode, cfg)
    meta = {
        "kind": EMBEDDINGS_KIND,
        "step": step,
        "groups": list(E.groups) if E.groups else None,
        "metrics": {"rankme_eps": cfg.metrics.rankme_eps, "lidar_delta": cfg.metrics.lidar_delta,
                    "lidar_eps": cfg.metrics.lidar_eps},
    }
    container.save(out_path, meta, {"Z": E.Z, "labels": labels_of(images).astype(np.float32)})
    return E


def load_embeddings(path: str | Path) -> tuple[EmbeddingMatrix, dict]:
    meta, tensors = container.load(path)
    if meta.get("kind") != EMBEDDINGS_KIND:
        raise container.ContainerError(f"{path} is not an embedding dump")
    groups = tuple(meta["groups"]) if meta.get("groups") else None
    return EmbeddingMatrix(tensors["Z"].astype(np.float64), groups), meta


def metrics_of_dump(path: str | Path) -> dict[str, float]:
    E, meta = load_embeddings(path)
    m = meta.get("metrics", {})
    out = {"rankme": rankme(E, m.get("rankme_eps", 1e-7))}
    if E.groups is not None:
        out["lidar"] = lidar(E, delta=m.get("lidar_delta", 1e-4), eps=m.get("lidar_eps", 1e-7))
    return out
