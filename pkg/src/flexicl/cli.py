"""``flexicl`` command line: synth, split, train, eval, ablate.

Every command writes ``resolved_config.json`` next to its outputs; rerunning
with ``--config resolved_config.json`` reproduces the run.

Output layout of ``train`` / ``ablate`` run directories::

    <out>/resolved_config.json
    <out>/checkpoint.pt
    <out>/train_log.jsonl
    <out>/canvases/          (--dump-canvas)
    <out>/eval_report.json   (eval, ablate)
    <out>/overlays/          (--overlays)
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError, ExperimentConfig
from .dataset import CorpusError, SplitManifest, load_corpus, split_corpus
from .inference import evaluate
from .model import ModelConfig, load_checkpoint
from .synthgen import write_corpus
from .trainer import train, train_supervised_baseline

log = logging.getLogger("flexicl")

TRAIN_AXES = {
    "pairwise_n": "train.augmentation.pairwise_n",
    "imagewise_ratio": "train.augmentation.imagewise_ratio",
    "flip_enabled": "train.augmentation.flip_enabled",
    "crop_enabled": "train.augmentation.crop_enabled",
    "epochwise": "train.augmentation.epochwise",
    "mask_mode": "train.mask_mode",
    "soft_y": "train.soft_y",
    "mask_ratio": "train.mask_ratio",
    "fraction": "split.fraction",
}
EVAL_AXES = {"test_mask_ratio": "eval.test_mask_ratio", "threshold": "eval.threshold"}


def _resolve(args, extra: dict | None = None) -> ExperimentConfig:
    cfg = cfgmod.load(getattr(args, "config", None))
    updates = dict(extra or {})
    if getattr(args, "toy", False):
        updates.update({f"model.{k}": v for k, v in ModelConfig.toy().to_dict().items()})
    seed = getattr(args, "seed", None)
    if seed is not None:
        updates.update({"synth.seed": seed, "split.seed": seed, "train.base_seed": seed, "eval.seed": seed})
    return cfgmod.override(cfg, updates)


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    manifest = write_corpus(cfg.synth, out)
    cfg.save(out / "resolved_config.json")
    print(manifest)
    return 0


def cmd_split(args) -> int:
    cfg = _resolve(args, {"split.fraction": args.fraction})
    corpus = load_corpus(args.corpus)
    manifest = split_corpus(corpus, cfg.split.fraction, cfg.split.seed)
    manifest.validate(corpus)
    out = manifest.save(args.out)
    cfg.save(out.with_name(out.stem + ".resolved_config.json"))
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, {"train.epochs": args.epochs, "train.batch_size": args.batch_size})
    corpus = load_corpus(args.corpus)
    split = SplitManifest.load(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved_config.json")
    if args.baseline:
        ckpt, tlog = train_supervised_baseline(corpus, split, cfg.model, cfg.train, out)
    else:
        dump = out / "canvases" if args.dump_canvas else None
        ckpt, tlog = train(corpus, split, cfg.model, cfg.train, out, dump_canvas=dump)
    print(json.dumps({"checkpoint": str(out / "checkpoint.pt"), "final_loss": tlog.losses[-1]}))
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(
        args, {"eval.test_mask_ratio": args.test_mask_ratio, "eval.threshold": args.threshold, "eval.resolution": args.resolution}
    )
    model, _ = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    split = SplitManifest.load(args.split)
    e = cfg.eval
    report = evaluate(model, corpus, split, e.test_mask_ratio, e.threshold, e.resolution, e.seed, e.batch_size, overlays=args.overlays)
    out = Path(args.out)
    report.save(out)
    cfg.save(out.with_name(out.stem + ".resolved_config.json"))
    print(json.dumps({"dsc": report.corpus_dsc, "iou": report.corpus_iou, "frames": report.num_frames}))
    return 1 if report.errors else 0


# --------------------------------------------------------------------------- ablation


def _expand_grid(grid: dict) -> list[dict]:
    unknown = set(grid) - set(TRAIN_AXES) - set(EVAL_AXES)
    if unknown:
        raise ConfigError(f"grid.{sorted(unknown)[0]}", "unknown ablation axis")
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid.{k}", "expected a non-empty list")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _run_group(base: dict, train_point: dict, eval_points: list[dict], corpus_path: str, split_path: str | None, out: str):
    cfg = cfgmod.override(cfgmod.from_dict(base), {TRAIN_AXES[k]: v for k, v in train_point.items()})
    corpus = load_corpus(corpus_path)
    split = SplitManifest.load(split_path) if split_path and "fraction" not in train_point else split_corpus(corpus, cfg.split.fraction, cfg.split.seed)
    run_dir = Path(out) / f"run_{cfg.digest()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "resolved_config.json")
    ckpt, tlog = train(corpus, split, cfg.model, cfg.train, run_dir)
    rows = []
    for ep in eval_points:
        ecfg = cfgmod.override(cfg, {EVAL_AXES[k]: v for k, v in ep.items()})
        e = ecfg.eval
        rep = evaluate(ckpt.model, corpus, split, e.test_mask_ratio, e.threshold, e.resolution, e.seed, e.batch_size)
        rows.append(
            {
                **train_point,
                **ep,
                "config_hash": ecfg.digest(),
                "train_hash": cfg.digest(),
                "dsc": rep.corpus_dsc,
                "iou": rep.corpus_iou,
                "frames": rep.num_frames,
                "final_loss": tlog.losses[-1],
            }
        )
    return rows


def run_ablation(base: ExperimentConfig, grid: dict, corpus_path, split_path, out, parallel: int = 1) -> list[dict]:
    """Train once per distinct training point, evaluate each eval point, return result rows."""
    points = _expand_grid(grid)
    groups: dict[str, tuple[dict, list[dict]]] = {}
    for pt in points:
        tp = {k: v for k, v in pt.items() if k in TRAIN_AXES}
        ep = {k: v for k, v in pt.items() if k in EVAL_AXES}
        # validate every point before spending compute
        cfgmod.override(base, {**{TRAIN_AXES[k]: v for k, v in tp.items()}, **{EVAL_AXES[k]: v for k, v in ep.items()}})
        key = json.dumps(tp, sort_keys=True)
        groups.setdefault(key, (tp, []))[1].append(ep)
    Path(out).mkdir(parents=True, exist_ok=True)
    jobs = [(base.to_dict(), tp, eps, str(corpus_path), split_path and str(split_path), str(out)) for tp, eps in groups.values()]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            results = list(ex.map(_run_group, *zip(*jobs)))
    else:
        results = [_run_group(*j) for j in jobs]
    rows = [r for group in results for r in group]
    axes = sorted(grid)
    rows.sort(key=lambda r: [json.dumps(r[a]) for a in axes])
    return rows


def write_results(rows: list[dict], out: Path) -> None:
    (out / "results.json").write_text(json.dumps(rows, indent=2))
    if rows:
        with open(out / "results.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def cmd_ablate(args) -> int:
    try:
        doc = json.loads(Path(args.grid).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError("--grid", str(e)) from e
    if "grid" not in doc:
        raise ConfigError("grid", "missing 'grid' object")
    base = cfgmod.from_dict(doc.get("base", {}))
    if args.toy:
        base = cfgmod.override(base, {f"model.{k}": v for k, v in ModelConfig.toy().to_dict().items()})
    if args.seed is not None:
        base = cfgmod.override(base, {"split.seed": args.seed, "train.base_seed": args.seed, "eval.seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base.save(out / "resolved_config.json")
    (out / "grid.json").write_text(json.dumps(doc["grid"], indent=2))
    rows = run_ablation(base, doc["grid"], args.corpus, args.split, out, args.parallel)
    write_results(rows, out)
    print(json.dumps({"rows": len(rows), "results": str(out / "results.json")}))
    return 0


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexicl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="experiment config JSON (e.g. a resolved_config.json)")
        sp.add_argument("--toy", action="store_true", help="toy model profile (64px canvas, patch 8)")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="write a synthetic corpus")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("split", help="per-video support/query/test split")
    common(sp)
    sp.add_argument("--corpus", required=True, help="corpus manifest.json")
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("train", help="train FlexICL (or the supervised baseline)")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--baseline", action="store_true", help="no-context ViT-CNN baseline")
    sp.add_argument("--dump-canvas", action="store_true", help="write the first batch of canvases as PNG")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test frames")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--test-mask-ratio", type=float)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--resolution", choices=["original", "canvas"])
    sp.add_argument("--overlays", help="directory for per-frame contour overlays")
    sp.add_argument("--out", required=True, help="EvalReport JSON path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="sweep training/eval axes and tabulate DSC/IoU")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", help="fixed split (ignored for rows that sweep 'fraction')")
    sp.add_argument("--grid", required=True, help='JSON {"base": {...}, "grid": {"axis": [values]}}')
    sp.add_argument("--parallel", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CorpusError, OSError, ValueError, RuntimeError) as e:
        print(f"error ({args.command}): {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
