"""Command-line driver: gen-data | train | eval | bench | inspect.

Configuration is layered (defaults < --config file < repeated --set
key=value); every artifact embeds the config hash, the seed and the package
version.  Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.  Partially written outputs are removed when a command fails.  The
FSD_THREADS environment variable caps worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import __version__, thread_cap
from .errors import ConfigError, DataError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ArtifactTracker:
    """Records files a command creates so failures can clean them up."""

    def __init__(self):
        self.paths: list[str] = []

    def add(self, path) -> str:
        self.paths.append(str(path))
        return str(path)

    def cleanup(self) -> None:
        for p in reversed(self.paths):
            try:
                if os.path.isfile(p):
                    os.remove(p)
            except OSError:
                pass


def provenance(cfg) -> dict:
    from .config import config_hash

    return {"config_hash": config_hash(cfg), "seed": cfg.seed, "version": __version__,
            "threads": thread_cap()}


def _load_cfg(args):
    from .config import load_config

    return load_config(args.config, args.set or ())


def _scene_paths(data_dir: str, split: str) -> list[str]:
    d = os.path.join(data_dir, split)
    if not os.path.isdir(d):
        raise DataError(f"missing split directory {d}")
    names = sorted(n for n in os.listdir(d) if n.endswith(".fsds"))
    if not names:
        raise DataError(f"no .fsds scenes under {d}")
    return [os.path.join(d, n) for n in names]


def _load_scenes(data_dir: str, split: str):
    from .synth import load_scene

    return [load_scene(p) for p in _scene_paths(data_dir, split)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, tracker: ArtifactTracker) -> int:
    from .synth import SceneSpec, generate, save_scene

    cfg = _load_cfg(args)
    splits = {"train": cfg.data.num_scenes, "val": cfg.data.holdout_scenes}
    spec = SceneSpec(
        range_m=cfg.data.range_m, point_budget=cfg.data.point_budget,
        boxes_min=cfg.data.boxes_min, boxes_max=cfg.data.boxes_max,
        class_mix=tuple(cfg.data.class_mix), clutter_fraction=cfg.data.clutter_fraction,
    )

    def write_one(split: str, index: int) -> None:
        # seeds are disjoint per split and independent of worker scheduling
        offset = 0 if split == "train" else 10_000_000
        seed = cfg.seed * 100_000_000 + offset + index
        path = os.path.join(args.out, split, f"{index:05d}.fsds")
        save_scene(generate(spec, seed), tracker.add(path))

    for split, count in splits.items():
        os.makedirs(os.path.join(args.out, split), exist_ok=True)
    jobs = [(s, i) for s, count in splits.items() for i in range(count)]
    workers = thread_cap()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda job: write_one(*job), jobs))
    else:
        for job in jobs:
            write_one(*job)

    manifest = {"provenance": provenance(cfg), "splits": splits}
    with open(tracker.add(os.path.join(args.out, "manifest.json")), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {sum(splits.values())} scenes under {args.out}")
    return EXIT_OK


def cmd_train(args, tracker: ArtifactTracker) -> int:
    from .config import config_hash, save_config
    from .training import MetricsLog, train

    cfg = _load_cfg(args)
    scenes = _load_scenes(args.data, "train")
    os.makedirs(args.out, exist_ok=True)
    save_config(cfg, tracker.add(os.path.join(args.out, "config.txt")))
    log = MetricsLog(tracker.add(os.path.join(args.out, "metrics.jsonl")),
                     tracker.add(os.path.join(args.out, "timing.jsonl")))
    try:
        hash_hex = config_hash(cfg)
        ckpt_every = cfg.train.checkpoint_every
        steps = cfg.train.steps
        expected = set(range(ckpt_every, steps + 1, ckpt_every)) if ckpt_every > 0 else set()
        expected.add(steps)
        for s in sorted(expected):
            tracker.add(os.path.join(args.out, f"ckpt_{s:06d}.bin"))
        train(scenes, cfg, out_dir=args.out, log=log, hash_hex=hash_hex)
    finally:
        log.close()
    print(f"trained {cfg.train.steps} steps; artifacts in {args.out}")
    return EXIT_OK


def _detections_for(store, cfg, scenes):
    from .detector import detect

    return [detect(store, cfg.model, s.pc) for s in scenes]


def cmd_eval(args, tracker: ArtifactTracker) -> int:
    from .config import config_hash
    from .evaluation import evaluate, pr_curves_csv
    from .training import load_checkpoint

    cfg = _load_cfg(args)
    store, ckpt_hash = load_checkpoint(args.checkpoint)
    if ckpt_hash != config_hash(cfg):
        print(f"warning: checkpoint config hash {ckpt_hash[:12]} does not match "
              f"current config {config_hash(cfg)[:12]}", file=sys.stderr)
    scenes = _load_scenes(args.data, args.split)
    dets = _detections_for(store, cfg, scenes)
    report = evaluate(dets, [(s.gt_boxes, s.gt_classes) for s in scenes],
                      iou_threshold=cfg.eval.iou_threshold,
                      length_bins=tuple(cfg.eval.length_bins))
    payload = {"provenance": provenance(cfg), "checkpoint": str(args.checkpoint),
               "split": args.split, "report": report.as_dict()}
    with open(tracker.add(args.out), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    curves_path = os.path.splitext(args.out)[0] + "_pr.csv"
    with open(tracker.add(curves_path), "w", newline="") as fh:
        fh.write(pr_curves_csv(report))
    mean_ap = report.mean_ap
    print(f"mean AP@{cfg.eval.iou_threshold:g} = "
          f"{'n/a' if mean_ap is None else f'{mean_ap:.3f}'} -> {args.out}")
    return EXIT_OK


def cmd_bench(args, tracker: ArtifactTracker) -> int:
    from .benchmark import run_scaling_bench

    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    tracker.add(os.path.join(args.out, "bench.csv"))
    tracker.add(os.path.join(args.out, "bench.json"))
    scene_dir = os.path.join(args.out, "scenes")
    report = run_scaling_bench(cfg, scene_dir=scene_dir, out_dir=args.out)
    for key, value in sorted(report.exponents.items()):
        print(f"{key}: exponent {value:.3f}")
    return EXIT_OK


def cmd_inspect(args, tracker: ArtifactTracker) -> int:
    from .config import config_hash
    from .detector import detect, forward
    from .segment_ops import NONE_ID
    from .synth import load_scene
    from .training import load_checkpoint
    from . import autodiff as ad

    cfg = _load_cfg(args)
    store, ckpt_hash = load_checkpoint(args.checkpoint)
    if ckpt_hash != config_hash(cfg):
        print("warning: checkpoint/config hash mismatch", file=sys.stderr)
    scene = load_scene(args.scene)
    with ad.no_grad():
        state = forward(store, cfg.model, scene.pc)
    dets = detect(store, cfg.model, scene.pc)
    dump = {
        "provenance": provenance(cfg),
        "scene": {"seed": scene.seed, "points": scene.pc.n,
                  "gt_boxes": scene.gt_boxes.tolist(),
                  "gt_classes": scene.gt_classes.tolist()},
        "coords": scene.pc.coords.tolist(),
        "group_ids": state.structure.grouping.ids.tolist(),
        "group_centers": state.structure.grouping.centers.tolist(),
        "voted_centers": state.votes.voted_centers.data.tolist(),
        "proposals": state.structure.boxes.tolist(),
        "proposal_scores": state.structure.scores.tolist(),
        "corrected_ids": state.structure.corrected.ids.tolist(),
        "detections": {"boxes": dets.boxes.tolist(), "scores": dets.scores.tolist(),
                       "classes": dets.classes.tolist()},
        "ungrouped": int((state.structure.grouping.ids == NONE_ID).sum()),
    }
    with open(tracker.add(args.out), "w") as fh:
        json.dump(dump, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote inspection dump -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsedet",
        description="Fully sparse LiDAR 3D detection: data, training, evaluation, benchmarks.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="config file (key = value lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a dotted config key; repeatable")

    p = sub.add_parser("gen-data", help="generate synthetic scene files")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the sparse pipeline")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", default="eval_report.json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="run the range-scaling benchmark")
    common(p)
    p.add_argument("--out", required=True, help="directory for bench.csv / bench.json")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect", help="dump one scene's grouping and proposals as JSON")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="a .fsds scene file")
    p.add_argument("--out", default="inspect.json")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    tracker = ArtifactTracker()
    try:
        return args.fn(args, tracker)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        tracker.cleanup()
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        tracker.cleanup()
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        tracker.cleanup()
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
