"""``jepalab`` command line entry point.

Every subcommand accepts ``--config run.json`` plus dotted overrides such as
``--mask.context_scale 0.4,0.6`` or ``--train.epochs 10``.
Exit codes: 0 success, 1 configuration error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from jepalab.config import ConfigError, RunConfig, load_config

logger = logging.getLogger("jepalab")

THREADS_ENV = "JEPALAB_THREADS"


def _parse_pairs(text: str) -> list[tuple[float, float]]:
    out = []
    for chunk in text.replace(" ", "").split(";"):
        if not chunk:
            continue
        lo, hi = chunk.split(",")
        out.append((float(lo), float(hi)))
    return out


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _split_overrides(extra: list[str]) -> dict[str, str]:
    overrides, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}", key)
            value = extra[i + 1]
            i += 2
        overrides[key.replace("-", "_")] = value
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jepalab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config JSON file")
        p.add_argument("--conditioning", choices=["on", "off"], help="EC-IJEPA (on) or baseline IJEPA (off)")
        p.add_argument("--seed", help="comma separated seed list")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("pretrain", help="pretrain one model per seed"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many total steps")

    p = common(sub.add_parser("probe", help="linear probe a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="'synthetic' or a class-per-directory PNG tree")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="results.csv")

    p = common(sub.add_parser("metrics", help="RankMe/LiDAR of an embedding dump"))
    p.add_argument("embeddings")

    p = common(sub.add_parser("sweep-context", help="context-scale robustness sweep"))
    p.add_argument("--ranges", default="0.85,1.0;0.4,0.6;0.1,0.2", help="'lo,hi;lo,hi;...'")
    p.add_argument("--variants", default="ijepa,ec-ijepa")
    p.add_argument("--out", default=None)

    p = common(sub.add_parser("efficiency-curve", help="probe accuracy over pretraining checkpoints"))
    p.add_argument("--run", action="append", default=[], help="VARIANT=RUN_DIR; repeatable")
    p.add_argument("--out", default=None)

    p = common(sub.add_parser("ablate-pooling", help="inference pooling kernel/stride ablation"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kernels", default="1,2,4")
    p.add_argument("--strides", default="1,2,4")
    p.add_argument("--dataset")
    p.add_argument("--out", default=None)

    p = common(sub.add_parser("export-embeddings", help="dump embeddings in container format"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--split", choices=["train", "eval"], default="eval")
    p.add_argument("--lidar-q", type=int, default=0, help="views per image; 0 exports plain embeddings")
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("gen-synth", help="write the synthetic dataset as PNG tree"))
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    return parser


def _config(args, overrides: dict) -> RunConfig:
    if args.conditioning is not None:
        overrides["conditioning"] = args.conditioning
    if args.seed is not None:
        overrides["seeds"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["probe.epochs"] = args.epochs
    return load_config(args.config, overrides)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="[%(levelname)s] %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)

    try:
        cfg = _config(args, _split_overrides(extra))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1

    # heavy imports after config validation keep config errors fast
    import torch

    torch.set_num_threads(int(threads) if threads else 1)
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def cmd_pretrain(args, cfg: RunConfig) -> int:
    from jepalab.experiments import load_data, with_seed
    from jepalab.trainer import pretrain

    train, evals = load_data(cfg)
    base = Path(cfg.out_dir)
    for seed in cfg.seeds:
        run_cfg = with_seed(cfg, seed)
        out = base / f"seed_{seed}" if len(cfg.seeds) > 1 else base
        pretrain(run_cfg, train, out, eval_set=evals, resume=args.resume, max_steps=args.max_steps)
        print(out)
    return 0


def cmd_probe(args, cfg: RunConfig) -> int:
    from jepalab.experiments import load_data, probe_accuracy, write_csv
    from jepalab.trainer import fmt, load_checkpoint

    ckpt_cfg, _, state, _, _, _ = load_checkpoint(args.checkpoint)
    ckpt_cfg.probe = cfg.probe
    ckpt_cfg.data = cfg.data
    train, evals = load_data(ckpt_cfg, args.dataset)
    tr, ev = probe_accuracy(state, ckpt_cfg, train, evals)
    write_csv(args.out, ["split", "top1"], [["train", fmt(tr)], ["eval", fmt(ev)]])
    print(f"train top1={fmt(tr)}\neval top1={fmt(ev)}")
    return 0


def cmd_metrics(args, cfg: RunConfig) -> int:
    from jepalab.experiments import metrics_of_dump
    from jepalab.trainer import fmt

    for name, value in metrics_of_dump(args.embeddings).items():
        print(f"{name}={fmt(value)}")
    return 0


def cmd_sweep_context(args, cfg: RunConfig) -> int:
    from jepalab.experiments import sweep_context

    out = args.out or Path(cfg.out_dir) / "sweep_context.csv"
    sweep_context(cfg, _parse_pairs(args.ranges), out, [v for v in args.variants.split(",") if v])
    print(out)
    return 0


def cmd_efficiency_curve(args, cfg: RunConfig) -> int:
    from jepalab.experiments import efficiency_curve

    runs = None
    if args.run:
        runs = {}
        for item in args.run:
            variant, _, path = item.partition("=")
            if not path:
                raise ConfigError(f"--run expects VARIANT=DIR, got {item!r}")
            runs[variant] = path
    out = args.out or Path(cfg.out_dir) / "efficiency_curve.csv"
    efficiency_curve(cfg, out, runs)
    print(out)
    return 0


def cmd_ablate_pooling(args, cfg: RunConfig) -> int:
    from jepalab.experiments import ablate_pooling, load_data

    out = args.out or Path(cfg.out_dir) / "ablate_pooling.csv"
    ablate_pooling(args.checkpoint, cfg, _int_list(args.kernels), _int_list(args.strides), out,
                   data=load_data(cfg, args.dataset))
    print(out)
    return 0


def cmd_export_embeddings(args, cfg: RunConfig) -> int:
    from jepalab.experiments import export_embeddings, load_data

    train, evals = load_data(cfg, args.dataset)
    images = train if args.split == "train" else evals
    export_embeddings(args.checkpoint, images, args.out, lidar_q=args.lidar_q, seed=cfg.seeds[0])
    print(args.out)
    return 0


def cmd_gen_synth(args, cfg: RunConfig) -> int:
    from jepalab.data import export_dataset, gen_synthetic

    d = cfg.data
    n = args.n if args.n is not None else d.n_train
    images = gen_synthetic(d.seed, n, d.grid_objects, d.corr, (d.image_size, d.image_size))
    export_dataset(images, args.out)
    print(args.out)
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "metrics": cmd_metrics,
    "sweep-context": cmd_sweep_context,
    "efficiency-curve": cmd_efficiency_curve,
    "ablate-pooling": cmd_ablate_pooling,
    "export-embeddings": cmd_export_embeddings,
    "gen-synth": cmd_gen_synth,
}


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
