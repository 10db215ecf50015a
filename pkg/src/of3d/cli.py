"""Batch command-line interface: one subcommand per pipeline stage.

Every run writes its resolved configuration next to its outputs, so any
result can be reproduced from the files alone. All subcommands are
deterministic given their flags and seed (timings excepted).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import (
    RunConfig,
    apply_overrides,
    load_config,
    save_config,
)
from .errors import Of3dError
from .inference import Prediction, boxes_from_instances, load_prediction, save_prediction
from .matching import bench_matchers
from .metrics import EvalReport, box_ap, instance_ap, miou, panoptic_quality
from .model import build_partition, infer_scene
from .partition import unpool_masks
from .scene import (
    GeneratorParams,
    generate_synthetic_scene,
    load_scene,
    save_scene,
)
from .trainer import fit, load_model

CONFIG_SUFFIX = ".of3dcfg"


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except Of3dError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="of3d",
        description="unified instance/semantic/panoptic segmentation of point clouds",
    )
    sub = parser.add_subparsers(required=True)

    p = sub.add_parser("gen-data", help="write synthetic room scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--things", type=int, default=8)
    p.add_argument("--room", default="5x5x2.7", help="WxDxH in meters")
    p.add_argument("--points-per-sqm", type=float, default=18.0)
    p.add_argument("--noise", type=float, default=0.005)
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("train", help="fit a model on a scene directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("infer", help="run one scene through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="defaults to the config beside the checkpoint")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(handler=_cmd_infer)

    p = sub.add_parser("eval", help="score a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None, help="defaults to <pred>.eval")
    p.add_argument("--config", default=None, help="defaults to the config beside the prediction")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("bench-matching", help="time both matchers and fit slopes")
    p.add_argument("--sizes", default="64,128,256,512,1024")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_bench)
    return parser


def _resolve_config(path_flag, default_path, overrides) -> RunConfig:
    if path_flag:
        config = load_config(path_flag)
    elif default_path is not None and Path(default_path).exists():
        config = load_config(default_path)
    else:
        config = RunConfig()
    return apply_overrides(config, overrides)


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        w, d, h = (float(v) for v in args.room.split("x"))
    except ValueError:
        print(f"error: --room expects WxDxH, got {args.room!r}", file=sys.stderr)
        return 1
    params = GeneratorParams(
        room=(w, d, h),
        n_things=args.things,
        points_per_sqm=args.points_per_sqm,
        noise_sigma=args.noise,
    )
    for i in range(args.scenes):
        scene = generate_synthetic_scene(seed=args.seed + i, params=params)
        save_scene(scene, out / f"scene_{i:04d}.of3d")
    flags = {
        "scenes": args.scenes, "seed": args.seed, "things": args.things,
        "room": args.room, "points_per_sqm": repr(args.points_per_sqm),
        "noise": repr(args.noise),
    }
    with open(out / "gen_flags.txt", "wb") as fh:
        fh.write("".join(f"{k}={v}\n" for k, v in flags.items()).encode())
    print(f"wrote {args.scenes} scenes to {out}")
    return 0


def _cmd_train(args) -> int:
    config = _resolve_config(args.config, None, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / f"config{CONFIG_SUFFIX}")
    result = fit(args.data, config, out)
    print(f"trained {result.steps_run} steps, final loss {result.final_loss}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return 0


def _cmd_infer(args) -> int:
    ckpt = Path(args.ckpt)
    config = _resolve_config(args.config, ckpt.parent / f"config{CONFIG_SUFFIX}", args.set)
    scene = load_scene(args.scene)
    params = load_model(ckpt, config, scene.catalog)
    pred, _ = infer_scene(scene, params, config, scene.catalog)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_prediction(pred, out)
    save_config(config, str(out) + CONFIG_SUFFIX)
    sections = [
        name
        for name, present in (
            ("semantic", pred.semantic is not None),
            ("instances", pred.instances is not None),
            ("panoptic", pred.panoptic is not None),
        )
        if present
    ]
    print(f"wrote {out} with sections: {', '.join(sections)}")
    return 0


def _cmd_eval(args) -> int:
    pred_path = Path(args.pred)
    config = _resolve_config(args.config, str(pred_path) + CONFIG_SUFFIX, args.set)
    pred = load_prediction(pred_path)
    scene = load_scene(args.gt)
    report = evaluate_prediction(pred, scene, config)
    lines = report.to_lines()
    out = Path(args.out) if args.out else Path(str(pred_path) + ".eval")
    with open(out, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
    save_config(config, str(out) + CONFIG_SUFFIX)
    for line in lines:
        print(line)
    return 0


def evaluate_prediction(pred: Prediction, scene, config: RunConfig) -> EvalReport:
    """Score one prediction at point level against the scene's labels."""
    partition = build_partition(scene, config)
    if pred.num_segments != partition.num_segments:
        raise Of3dError(
            f"prediction has {pred.num_segments} segments but the partition has "
            f"{partition.num_segments}; evaluate with the config used at inference"
        )
    catalog = scene.catalog
    values: dict[str, float] = {}
    per_class: dict[str, dict] = {}

    if pred.semantic is not None:
        point_sem = unpool_masks(pred.semantic, partition)
        per_cls, mean = miou(point_sem, scene.semantic_id, catalog)
        values["miou"] = mean
        per_class["miou"] = per_cls

    owned = scene.instance_id >= 0
    gt_instances = []
    gt_boxes = []
    for inst in np.unique(scene.instance_id[owned]) if owned.any() else []:
        mask = scene.instance_id == inst
        cls = int(scene.semantic_id[mask][0])
        gt_instances.append((cls, mask))
        pts = scene.points[mask, :3]
        gt_boxes.append((cls, (pts.min(axis=0), pts.max(axis=0))))

    if pred.instances is not None:
        point_preds = [
            (pr.class_id, pr.score, unpool_masks(pr.mask, partition))
            for pr in pred.instances
        ]
        ap = instance_ap(point_preds, gt_instances)
        values["map"] = ap.map_avg
        values["map50"] = ap.map50
        values["map25"] = ap.map25
        per_class["ap50"] = ap.per_threshold.get(0.50, {})
        boxes = boxes_from_instances(pred.instances, partition, scene)
        pred_boxes = [(cls, score, (lo, hi)) for cls, score, lo, hi in boxes]
        bap = box_ap(pred_boxes, gt_boxes)
        values["box_map50"] = bap.map50
        values["box_map25"] = bap.map25

    if pred.panoptic is not None:
        point_sem = unpool_masks(pred.panoptic.semantic, partition)
        point_inst = unpool_masks(pred.panoptic.instance, partition)
        pq = panoptic_quality(
            point_sem, point_inst, scene.semantic_id, scene.instance_id, catalog
        )
        values["pq"] = pq.pq
        values["pq_th"] = pq.pq_things
        values["pq_st"] = pq.pq_stuff
        per_class["pq"] = pq.per_class

    return EvalReport(values=values, per_class=per_class)


def _cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    report = bench_matchers(sizes, trials=args.trials, seed=args.seed)
    lines = report.to_lines()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        flags = {"sizes": args.sizes, "trials": args.trials, "seed": args.seed}
        with open(str(out) + ".flags", "wb") as fh:
            fh.write("".join(f"{k}={v}\n" for k, v in flags.items()).encode())
    for line in lines:
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
