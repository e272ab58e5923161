"""Command-line harness: check, serialize, train-toy, eval, bench.

Run configs are line-oriented ``key = value`` text; CLI flags override file
values, unknown keys are rejected. ``PM_SEED`` is the seed fallback when
neither a flag nor the config provides one.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import verify
from .data import (
    PointCloud,
    load_xyz_ascii,
    make_octant_seg_dataset,
    make_shape_dataset,
    read_manifest,
)
from .network import (
    ModelConfig,
    init_model_params,
    load_checkpoint,
    save_checkpoint,
    _parse_field,
)
from .octree import build_octree, normalize_points, serialize_table
from .train import TrainingDiverged, evaluate, train_model


@dataclass(frozen=True)
class RunConfig:
    # model; defaults are the desk-scale toy setup (the full-size stage
    # layouts (6,6)x(96,192) and (2,2,18,2)x(96,192,384,384) remain plain
    # config choices)
    task: str = "classify"
    num_classes: int = 4
    octree_depth: int = 4
    axis_order: str = "xyz"
    stage_blocks: tuple[int, ...] = (2, 2)
    stage_channels: tuple[int, ...] = (16, 32)
    state_size: int = 8
    conv_width: int = 4
    expansion: int = 2
    discretization: str = "simplified"
    use_normals: bool = True
    # run
    seed: int = 0
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-3
    max_steps: int = 500
    manifest: str = ""
    out_dir: str = "runs"
    augment: bool = False
    train_per_class: int = 64
    test_per_class: int = 16
    points_per_cloud: int = 1024

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: getattr(self, k) for k in names}).validate()


def parse_run_config(text: str, source: str = "<config>") -> dict:
    """Strict key=value parsing against RunConfig's fields."""
    known = {f.name: f for f in fields(RunConfig)}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        ftype = str(known[key].type)
        if "float" in ftype:
            values[key] = float(val)
        else:
            values[key] = _parse_field(key, ftype, val)
    return values


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    values: dict[str, object] = {}
    if path:
        values.update(parse_run_config(Path(path).read_text(encoding="utf-8"), path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "seed" not in values and os.environ.get("PM_SEED"):
        values["seed"] = int(os.environ["PM_SEED"])
    cfg = RunConfig(**values)
    cfg.model_config()  # validate model fields early
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_check(args) -> int:
    names = [args.suite] if args.suite else None
    results = verify.run_suites(names)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_serialize(args) -> int:
    cloud = load_xyz_ascii(args.cloud)
    pts, _ = normalize_points(cloud.positions)
    tree = build_octree(pts, depth=args.depth, axis_order=args.axis_order)
    print(f"# {args.cloud}: {tree.num_points} points, {tree.num_leaves} leaves, "
          f"depth {tree.depth}, axis order {tree.axis_order}")
    print(serialize_table(tree))
    return 0


def _load_labeled_clouds(manifest_path: str, task: str) -> list[PointCloud]:
    base = Path(manifest_path).parent
    clouds = []
    for rel, label in read_manifest(manifest_path):
        p = Path(rel)
        if not p.is_absolute():
            p = base / p
        cloud = load_xyz_ascii(str(p))
        if task == "classify":
            cloud.label = int(label)
        else:
            lp = Path(label)
            if not lp.is_absolute():
                lp = base / lp
            cloud.label = np.loadtxt(str(lp), dtype=np.int64).reshape(-1)
            if len(cloud.label) != len(cloud.positions):
                raise ValueError(f"{lp}: {len(cloud.label)} labels for {len(cloud.positions)} points")
        clouds.append(cloud)
    return clouds


def _toy_datasets(cfg: RunConfig) -> tuple[list[PointCloud], list[PointCloud]]:
    if cfg.manifest:
        return _load_labeled_clouds(cfg.manifest, cfg.task), []
    if cfg.task == "classify":
        train = make_shape_dataset(cfg.train_per_class, cfg.points_per_cloud, cfg.seed + 1)
        test = make_shape_dataset(cfg.test_per_class, cfg.points_per_cloud, cfg.seed + 2)
    else:
        train = make_octant_seg_dataset(
            4 * cfg.train_per_class, cfg.points_per_cloud, cfg.seed + 1
        )
        test = make_octant_seg_dataset(
            4 * cfg.test_per_class, cfg.points_per_cloud, cfg.seed + 2
        )
    return train, test


def cmd_train_toy(args) -> int:
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "max_steps": args.max_steps,
        "out_dir": args.out,
        "manifest": args.manifest,
    }
    cfg = load_run_config(args.config, overrides)
    model_cfg = cfg.model_config()
    train_clouds, test_clouds = _toy_datasets(cfg)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        params, history = train_model(
            model_cfg,
            train_clouds,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
            seed=cfg.seed,
            max_steps=cfg.max_steps,
            augment_data=cfg.augment,
            stop_at_train_acc=1.0,
            log=print,
        )
    except TrainingDiverged as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return 3

    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,acc\n")
        for row in history:
            fh.write(f"{row.epoch},{row.loss:.10g},{row.acc:.10g}\n")
    ckpt_path = out_dir / "model.ckpt"
    save_checkpoint(str(ckpt_path), model_cfg, params)
    print(f"wrote {metrics_path} and {ckpt_path}")

    train_metric, name = evaluate(model_cfg, params, train_clouds)
    print(f"final train {name}: {train_metric:.4f}")
    if test_clouds:
        test_metric, name = evaluate(model_cfg, params, test_clouds)
        print(f"final test {name}: {test_metric:.4f}")
    return 0


def cmd_eval(args) -> int:
    config, params = load_checkpoint(args.ckpt)
    clouds = _load_labeled_clouds(args.manifest, config.task)
    metric, name = evaluate(config, params, clouds)
    print(f"{name}: {metric:.6f} ({len(clouds)} clouds)")
    return 0


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    if not sizes:
        raise ValueError("bench: empty size list")
    overrides = {"seed": args.seed}
    cfg = load_run_config(args.config, overrides)
    if args.block_only:
        rows = bench_mod.measure_block_scaling(
            sizes, channels=cfg.stage_channels[0], state_size=cfg.state_size, seed=cfg.seed
        )
    else:
        model_cfg = cfg.model_config()
        params = init_model_params(model_cfg, np.random.default_rng(cfg.seed))
        rows = bench_mod.measure_model_scaling(model_cfg, params, sizes, seed=cfg.seed)
    lines = [bench_mod.BenchRow.csv_header()] + [r.csv() for r in rows]
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octmamba",
        description="Octree-ordered selective state-space point-cloud backbone",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run the oracle/property suites")
    p.add_argument("--suite", choices=sorted(verify.SUITES), help="run one suite only")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("serialize", help="print the z-order serialization of a cloud")
    p.add_argument("cloud", help="ASCII XYZ file")
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--axis-order", default="xyz", dest="axis_order")
    p.set_defaults(fn=cmd_serialize)

    p = sub.add_parser("train-toy", help="train on synthetic shapes or a manifest")
    p.add_argument("--config", help="key = value run config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None, dest="max_steps")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="FLOP/time/memory scaling vs cloud size")
    p.add_argument("--config", help="key = value run config file")
    p.add_argument("--sizes", default="4096,8192,16384", help="comma-separated N values")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--block-only", action="store_true", dest="block_only",
                   help="bench one block on raw sequences instead of the full model")
    p.add_argument("--out", default=None, help="write CSV here instead of stdout")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
