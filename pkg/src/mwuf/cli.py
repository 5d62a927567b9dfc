"""Command-line entry point: gen-data, pretrain, warmup, evaluate, ablate."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import CONFIG_KEYS, ConfigError, load_config, rng_for
from .dataio import (CheckpointError, generate_synthetic, load_checkpoint, load_dataset,
                     save_checkpoint, write_synthetic)
from .models import Recommender
from .protocol import (METHODS, SplitSpec, ablation_suite, attach_relaimpr, build_warmup,
                       map_seeds, pretrain_base, run_protocol, split_items, write_metrics_csv)

BASE_CKPT = "base.ckpt"


class StageOrderError(RuntimeError):
    pass


def warmup_ckpt(method):
    return f"warmup_{method}.ckpt"


def _config_epilog():
    lines = ["config keys (INI file via --config; flags override the file):"]
    for name, f in CONFIG_KEYS.items():
        lines.append(f"  {name:26s} default: {f.default}")
    return "\n".join(lines)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="root random seed")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--data", help="dataset directory (MovieLens-1M or delimited CSVs); "
                                       "synthetic data is generated when omitted")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="mwuf", description="Warm up cold item ID embeddings with meta scaling/shifting networks.",
        epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset",
                   epilog=_config_epilog(), formatter_class=fmt)
    sub.add_parser("pretrain", parents=[common], help="pretrain the base model on old items",
                   epilog=_config_epilog(), formatter_class=fmt)
    p = sub.add_parser("warmup", parents=[common], help="train the meta networks (needs pretrain)",
                       epilog=_config_epilog(), formatter_class=fmt)
    p.add_argument("--method", choices=[m for m in METHODS if m.startswith("mwuf_s")] + ["mwuf"])
    p = sub.add_parser("evaluate", parents=[common], help="run the phased evaluation",
                       epilog=_config_epilog(), formatter_class=fmt)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--seeds", type=int, help="number of seeds (seed, seed+1, ...)")
    p = sub.add_parser("ablate", parents=[common], help="all methods across seeds",
                       epilog=_config_epilog(), formatter_class=fmt)
    p.add_argument("--seeds", type=int, help="number of seeds (seed, seed+1, ...)")
    return parser


def _overrides(args):
    out = {"seed": args.seed, "method": getattr(args, "method", None),
           "seeds": getattr(args, "seeds", None)}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _load_data(args, cfg):
    if args.data:
        ds, _ = load_dataset(args.data, k=cfg.k, include_titles=cfg.include_titles,
                             title_vocab=cfg.title_vocab)
        return ds
    if cfg.data_path:
        ds, _ = load_dataset(cfg.data_path, k=cfg.k, include_titles=cfg.include_titles,
                             title_vocab=cfg.title_vocab)
        return ds
    return generate_synthetic(cfg.synthetic_spec(), k=cfg.k).dataset


def _phases(args, cfg):
    return split_items(_load_data(args, cfg), SplitSpec(cfg.split_n, cfg.split_k))


def _load_base(out, phases, cfg):
    path = out / BASE_CKPT
    if not path.exists():
        return None
    rec = Recommender.create(phases.schema, cfg.base_model, rng_for(cfg.seed, "pretrain.init"),
                             hidden=cfg.hidden, init_std=cfg.init_std)
    rec.load_state(load_checkpoint(path))
    return rec


def cmd_gen_data(args, cfg):
    data = generate_synthetic(cfg.synthetic_spec(), k=cfg.k)
    write_synthetic(data, args.out)
    print(f"wrote {len(data.dataset)} interactions to {args.out}")


def cmd_pretrain(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    phases = _phases(args, cfg)
    rec = pretrain_base(cfg.base_model, phases, cfg, cfg.seed)
    save_checkpoint(rec.parameters(), out / BASE_CKPT)
    with open(out / "pretrain_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(rec.pretrain_history, 1):
            w.writerow([i, f"{loss:.6f}"])
    print(f"pretrained {cfg.base_model} on {len(phases.old)} old-item samples -> {out / BASE_CKPT}")


def cmd_warmup(args, cfg):
    out = Path(args.out)
    method = args.method or (cfg.method if cfg.method.startswith("mwuf_s") else "mwuf")
    phases = _phases(args, cfg)
    rec = _load_base(out, phases, cfg)
    if rec is None:
        raise StageOrderError(f"{out / BASE_CKPT} not found; run 'mwuf pretrain' first")
    rec.freeze()
    warm, _ = build_warmup(rec, method, phases, cfg, cfg.seed)
    save_checkpoint(warm.parameters(), out / warmup_ckpt(method))
    print(f"trained {method} meta networks on {len(phases.old)} samples -> "
          f"{out / warmup_ckpt(method)}")


def _evaluate_seed(job):
    method, phases, cfg, seed, base_state, meta_state = job
    pretrained = None
    if base_state is not None:
        pretrained = Recommender.create(phases.schema, cfg.base_model, rng_for(seed, "pretrain.init"),
                                        hidden=cfg.hidden, init_std=cfg.init_std)
        pretrained.load_state(base_state)
    elif method != "base":
        pretrained = pretrain_base(cfg.base_model, phases, cfg, seed)
    rep = run_protocol(cfg.base_model, method, phases, cfg, seed, pretrained, meta_state)
    if method == "base":
        return attach_relaimpr([rep], [rep])[0]
    base = run_protocol(cfg.base_model, "base", phases, cfg, seed, pretrained)
    return attach_relaimpr([rep], [base])[0]


def cmd_evaluate(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    method = cfg.method
    base_path, meta_path = out / BASE_CKPT, out / warmup_ckpt(method)
    if meta_path.exists() and not base_path.exists():
        raise StageOrderError(f"{meta_path} exists but {base_path} does not; re-run 'mwuf pretrain'")
    phases = _phases(args, cfg)
    base_state = load_checkpoint(base_path) if base_path.exists() else None
    meta_state = load_checkpoint(meta_path) if meta_path.exists() else None
    seeds = [cfg.seed + i for i in range(cfg.seeds)]
    reports = map_seeds(_evaluate_seed,
                        [(method, phases, cfg, s, base_state, meta_state) for s in seeds])
    path = out / f"metrics_{method}.csv"
    write_metrics_csv(reports, path)
    print(f"wrote {path}")
    for rep in reports:
        print(f"  seed {rep.seed}: " + " ".join(f"{p}={a:.4f}" for p, a in rep.auc.items()))


def cmd_ablate(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    phases = _phases(args, cfg)
    seeds = [cfg.seed + i for i in range(cfg.seeds)]
    reports = ablation_suite(phases, cfg, seeds=seeds)
    path = out / "ablation.csv"
    write_metrics_csv(reports, path)
    print(f"wrote {path}")
    for method in METHODS:
        aucs = np.array([[r.auc[p] for p in r.auc] for r in reports if r.method == method])
        print(f"  {method:11s} " + " ".join(f"{a:.4f}" for a in aucs.mean(axis=0)))


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "warmup": cmd_warmup,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        COMMANDS[args.command](args, cfg)
    except (ConfigError, StageOrderError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
