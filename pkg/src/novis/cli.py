"""``novis`` command line: gen, train, infer, eval, sweep.

Every subcommand accepts ``--config FILE``, a flat JSON object whose keys are
the long option names with dashes replaced by underscores. Explicit flags
override config keys, which override built-in defaults.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import synth, tracker
from .metrics import EvalReport, evaluate_ap
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, config_to_dict, train

SWEEP_FIELDS = ("T", "S", "mode", "seed", "AP", "AP50", "AP75", "AR1", "AR10")


class UsageError(Exception):
    pass


# Built-in defaults per subcommand. These define the accepted config keys.
_gen = synth.DatasetConfig()
_train = TrainConfig()
_model = ModelConfig()
DEFAULTS = {
    "gen": {"num_train": _gen.num_train, "num_val": _gen.num_val, "num_frames": _gen.num_frames,
            "height": _gen.height, "width": _gen.width, "num_classes": _gen.num_classes,
            "min_objects": _gen.min_objects, "max_objects": _gen.max_objects,
            "occlusion_prob": _gen.occlusion_prob, "seed": _gen.seed},
    "train": {"steps": _train.steps, "lr": _train.lr, "batch_size": _train.batch_size,
              "weight_decay": _train.weight_decay, "grad_clip": _train.grad_clip,
              "clip_len": _train.clip_len, "sample_range": _train.sample_range,
              "reverse_prob": _train.reverse_prob, "flip_prob": _train.flip_prob,
              "seed": _train.seed, "num_queries": _model.num_queries,
              "hidden_dim": _model.hidden_dim, "num_layers": _model.num_layers,
              "attention_scales": _model.attention_scales, "log": None, "progress": 0},
    "infer": {"clip_len": 4, "stride": 2, "mode": "overlap", "top_k": 10, "split": "val"},
    "eval": {"split": "val", "csv": None},
    "sweep": {"grid": "1:1:embedding,2:1:embedding,4:2:embedding,6:3:embedding",
              "seeds": "0", "top_k": 10, "split": "val"},
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config; flags override its keys")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="novis", description="near-online video instance segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic occlusion dataset")
    _add_common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--num-train", type=int)
    g.add_argument("--num-val", type=int)
    g.add_argument("--num-frames", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--num-classes", type=int)
    g.add_argument("--min-objects", type=int)
    g.add_argument("--max-objects", type=int)
    g.add_argument("--occlusion-prob", type=float)

    t = sub.add_parser("train", help="train a model on the train split")
    _add_common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    t.add_argument("--log", help="JSONL loss log (default: <out>/train_log.jsonl)")
    t.add_argument("--progress", type=int, help="print a status line every N steps")
    for name, typ in (("steps", int), ("lr", float), ("batch-size", int), ("weight-decay", float),
                      ("grad-clip", float), ("clip-len", int), ("sample-range", int),
                      ("reverse-prob", float), ("flip-prob", float), ("seed", int),
                      ("num-queries", int), ("hidden-dim", int), ("num-layers", int)):
        t.add_argument(f"--{name}", type=typ)
    t.add_argument("--attention-scales", choices=("coarse", "all"))

    i = sub.add_parser("infer", help="track every video of a split and write predictions")
    _add_common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--clip-len", type=int)
    i.add_argument("--stride", type=int)
    i.add_argument("--mode", help="embedding | overlap | heuristic | online | online_buffer:B")
    i.add_argument("--top-k", type=int)
    i.add_argument("--split", help="train | val | all")

    e = sub.add_parser("eval", help="score predictions against ground truth")
    _add_common(e)
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--csv", help="CSV path (default: report path with .csv suffix)")
    e.add_argument("--split")

    s = sub.add_parser("sweep", help="evaluate a grid of (T, S, mode) over seeds into one CSV")
    _add_common(s)
    s.add_argument("--checkpoint", required=True, help="may contain a {seed} placeholder")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--grid", help="comma list of T:S:mode, e.g. 1:1:embedding,4:2:overlap")
    s.add_argument("--seeds", help="comma list of integers")
    s.add_argument("--top-k", type=int)
    s.add_argument("--split")
    return ap


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the JSON config file and explicit flags."""
    defaults = DEFAULTS[args.command]
    merged = dict(defaults)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc.msg} at line {exc.lineno})")
        if not isinstance(cfg, dict):
            raise UsageError(f"{args.config}: expected a flat JSON object")
        unknown = sorted(set(cfg) - set(defaults))
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {unknown}; accepted: {sorted(defaults)}")
        merged.update(cfg)
    for k, v in vars(args).items():
        if v is not None and k in defaults:
            merged[k] = v
    return merged


def _videos(data: str, split: str) -> list:
    ds = synth.load_dataset(data)
    if split == "all":
        return ds.videos
    if split not in ("train", "val"):
        raise UsageError(f"unknown split {split!r}; expected train, val or all")
    return ds.split(split)


def _check_tracker_args(o: dict) -> None:
    try:
        tracker.parse_mode(o["mode"])
    except ValueError as exc:
        raise UsageError(str(exc))
    if not 1 <= o["stride"] <= o["clip_len"]:
        raise UsageError(f"need 1 <= stride <= clip_len, got stride={o['stride']} clip_len={o['clip_len']}")
    if o["top_k"] < 1:
        raise UsageError("top_k must be >= 1")


# -- commands ---------------------------------------------------------------------------

def cmd_gen(args, o: dict) -> int:
    cfg = synth.DatasetConfig(**o)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    videos = synth.generate_video_set(cfg)
    synth.save_dataset(args.out, synth.Dataset(videos, {"config": o}))
    n_obj = sum(len(v.ids) for v in videos)
    counts = {s: sum(v.split == s for v in videos) for s in ("train", "val")}
    print(f"wrote {args.out}: {counts['train']} train + {counts['val']} val videos, "
          f"{cfg.num_frames} frames {cfg.height}x{cfg.width}, {n_obj} objects")
    return 0


def cmd_train(args, o: dict) -> int:
    out = Path(args.out)
    if (out / "config.json").exists() and not args.force:
        print(f"error: checkpoint {out} exists (use --force to overwrite)", file=sys.stderr)
        return 1
    mcfg = ModelConfig(num_queries=o["num_queries"], hidden_dim=o["hidden_dim"],
                       num_layers=o["num_layers"], attention_scales=o["attention_scales"],
                       seed=o["seed"])
    try:
        mcfg.attention_schedule()
    except ValueError as exc:
        raise UsageError(str(exc))
    if o["clip_len"] > mcfg.t_max:
        raise UsageError(f"clip_len {o['clip_len']} exceeds the temporal table size {mcfg.t_max}")
    tcfg = TrainConfig(steps=o["steps"], batch_size=o["batch_size"], lr=o["lr"],
                       weight_decay=o["weight_decay"], grad_clip=o["grad_clip"],
                       clip_len=o["clip_len"], sample_range=o["sample_range"],
                       reverse_prob=o["reverse_prob"], flip_prob=o["flip_prob"], seed=o["seed"])
    videos = _videos(args.data, "train")
    out.mkdir(parents=True, exist_ok=True)
    log = Path(o["log"]) if o["log"] else out / "train_log.jsonl"
    model = train(videos, mcfg, tcfg, log_path=log, progress=o["progress"] or None)
    save_checkpoint(model, out, {"train": config_to_dict(tcfg)})
    print(f"wrote checkpoint {out} ({model.num_parameters()} parameters), log {log}")
    return 0


def infer_videos(model, videos: list, mode: str, clip_len: int, stride: int, top_k: int) -> dict:
    results = {}
    for v in videos:
        ts = tracker.run_tracker(v.frames, model, mode, clip_len, stride, top_k)
        results[v.video_id] = (v.num_frames, v.frames.shape[1], v.frames.shape[2], ts.finalize())
    return results


def cmd_infer(args, o: dict) -> int:
    _check_tracker_args(o)
    model = load_checkpoint(args.checkpoint)
    videos = _videos(args.data, o["split"])
    results = infer_videos(model, videos, o["mode"], o["clip_len"], o["stride"], o["top_k"])
    tracker.save_tracks(args.out, results)
    n = sum(len(r[3]) for r in results.values())
    print(f"wrote {n} tracks for {len(results)} videos to {args.out}")
    return 0


def ground_truth(videos: list) -> dict:
    return {v.video_id: [tracker.Track(int(i), int(c), 1.0, m)
                         for i, c, m in zip(v.ids, v.classes, v.masks)] for v in videos}


def cmd_eval(args, o: dict) -> int:
    videos = _videos(args.data, o["split"])
    preds = {vid: r[3] for vid, r in tracker.load_tracks(args.pred).items()}
    report = evaluate_ap(preds, ground_truth(videos))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    csv_path = Path(o["csv"]) if o["csv"] else out.with_suffix(".csv")
    csv_path.write_text(",".join(EvalReport.CSV_FIELDS) + "\n" + report.csv_row() + "\n")
    print(f"AP {report.AP:.4f}  AP50 {report.AP50:.4f}  AP75 {report.AP75:.4f}  "
          f"AR1 {report.AR1:.4f}  AR10 {report.AR10:.4f}")
    return 0


def parse_grid(text: str) -> list[tuple[int, int, str]]:
    grid = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split(":")
        if len(parts) < 3:
            raise UsageError(f"grid entry {item!r} is not T:S:mode")
        try:
            t, s = int(parts[0]), int(parts[1])
        except ValueError:
            raise UsageError(f"grid entry {item!r} has non-integer T or S")
        mode = ":".join(parts[2:])
        _check_tracker_args({"mode": mode, "clip_len": t, "stride": s, "top_k": 1})
        grid.append((t, s, mode))
    if not grid:
        raise UsageError("sweep grid is empty")
    return grid


def _sweep_job(job):
    ckpt, data, split, t, s, mode, seed, top_k = job
    model = load_checkpoint(ckpt)
    videos = _videos(data, split)
    preds = {vid: r[3] for vid, r in infer_videos(model, videos, mode, t, s, top_k).items()}
    rep = evaluate_ap(preds, ground_truth(videos))
    return [t, s, mode, seed] + [f"{getattr(rep, k):.6f}" for k in EvalReport.CSV_FIELDS]


def cmd_sweep(args, o: dict) -> int:
    grid = parse_grid(o["grid"])
    try:
        seeds = [int(x) for x in str(o["seeds"]).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"invalid seed list {o['seeds']!r}")
    if not seeds:
        raise UsageError("no seeds given")
    jobs = []
    for seed in seeds:
        ckpt = args.checkpoint.format(seed=seed)
        if not (Path(ckpt) / "config.json").exists():
            print(f"error: no checkpoint at {ckpt}", file=sys.stderr)
            return 1
        for t, s, mode in grid:
            jobs.append((ckpt, args.data, o["split"], t, s, mode, seed, o["top_k"]))
    threads = max(1, int(os.environ.get("NOVIS_THREADS", "1") or 1))
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    w.writerows(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue())
    print(f"wrote {len(rows)} rows to {out}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = resolve(args)
        return COMMANDS[args.command](args, opts)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
