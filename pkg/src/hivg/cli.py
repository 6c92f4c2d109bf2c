"""Command-line entry point: ``hivg <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from .config import ConfigError, RunConfig, load_config, replace, save_config


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _arrays(cfg: RunConfig, specs):
    m = cfg.model
    return data.build_arrays(specs, m.image_height, m.image_width, m.patch_size, m.max_text_len, m.np_dtype)


def _splits(cfg: RunConfig, args) -> dict:
    if getattr(args, "train_data", None):
        out = {"train": data.read_dataset(args.train_data)}
        out["val"] = data.read_dataset(args.val_data) if args.val_data else []
        out["test"] = data.read_dataset(args.test_data) if getattr(args, "test_data", None) else []
        return out
    d = cfg.data
    stats = data.GenerationStats()
    specs = data.generate_splits(cfg.seed, {"train": d.train_count, "val": d.val_count, "test": d.test_count},
                                 d.difficulty, stats)
    logging.info("generated %s scenes (%s)", {k: len(v) for k, v in specs.items()}, stats)
    return specs


def cmd_generate(args) -> int:
    stats = data.GenerationStats()
    seed = 0 if args.seed is None else args.seed
    specs = data.generate(seed, args.count, args.difficulty, stats, split=data.SPLITS[args.split])
    data.write_dataset(specs, args.out)
    print(f"wrote {len(specs)} scenes to {args.out} (skipped {stats.skipped})")
    return 0


def cmd_train(args) -> int:
    from .train import evaluate, train

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    specs = _splits(cfg, args)
    tr = _arrays(cfg, specs["train"])
    va = _arrays(cfg, specs["val"]) if specs["val"] else None
    res = train(cfg, tr, va, out_dir=out)
    summary = {"seconds": round(res.seconds, 1), "stage_acc": res.stage_acc}
    if specs.get("test"):
        summary["test"] = {k: v for k, v in evaluate(res.model, _arrays(cfg, specs["test"])).items() if k != "iou"}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate

    model, cfg, _ = load_checkpoint(args.ckpt)
    specs = data.read_dataset(args.data)
    result = evaluate(model, _arrays(cfg, specs), cfg.train.eval_batch_size)
    result.pop("iou")
    print(json.dumps(result))
    return 0


def _report(results) -> int:
    for r in results:
        print(r.line())
    failed = [r.component for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck

    return _report(run_gradcheck(seed=0 if args.seed is None else args.seed))


def cmd_merge_check(args) -> int:
    from .checks import run_merge_check

    return _report(run_merge_check(seed=0 if args.seed is None else args.seed, configs=args.configs))


def cmd_ablate(args) -> int:
    from .train import ablate

    cfg = _config(args)
    specs = _splits(cfg, args)
    tr, va = _arrays(cfg, specs["train"]), _arrays(cfg, specs["val"])
    te = _arrays(cfg, specs["test"]) if specs["test"] else None
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows, _ = ablate(cfg, tr, va, te, seeds, out_csv=args.out)
    for r in rows:
        print(r)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hivg", description="desk-scale hierarchical LoRA visual grounding")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a JSONL file of synthetic scenes")
    _add_seed(g)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--difficulty", choices=sorted(data.DIFFICULTIES), default="attribute")
    g.add_argument("--split", choices=sorted(data.SPLITS), default="train")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run phase A and the HiLoRA stages")
    _add_seed(t)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--train-data")
    t.add_argument("--val-data")
    t.add_argument("--test-data")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy@0.5, mean IoU and per-length accuracy of a checkpoint")
    _add_seed(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_seed(gc)
    gc.set_defaults(func=cmd_gradcheck)

    mc = sub.add_parser("merge-check", help="randomized HiLoRA merge and freeze verification")
    _add_seed(mc)
    mc.add_argument("--configs", type=int, default=50)
    mc.set_defaults(func=cmd_merge_check)

    a = sub.add_parser("ablate", help="MACB x HiLoRA grid averaged over seeds")
    _add_seed(a)
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--out", default="ablation.csv")
    a.add_argument("--train-data")
    a.add_argument("--val-data")
    a.add_argument("--test-data")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, data.DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
