"""Command-line entry point: ``graspfield <command> [flags]``.

Exit status is 0 on success, 2 on usage or configuration errors and 1 on
runtime failures. Every command writes a ``manifest.json`` into its output
directory; ``graspfield rerun <manifest>`` replays it.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import persist
from .autodiff import NonFiniteError, ShapeError
from .evaluation import (FieldScorer, TASKS, aggregate_report, long_rows, make_task,
                         read_long_report, run_task, write_long_report)
from .field import CameraObservation, FieldConfig, encode_observation, init_params, render_view
from .optimizer import OptimizerRunConfig, optimize_field, top_k
from .scene import (CapacityError, default_cameras, make_object_set, observe,
                    sample_negative_grasps, sample_positive_grasp, spawn_scene)
from .training import GraspTrainConfig, NvsConfig, TrainingScene, train_grasp, train_nvs

log = logging.getLogger("graspfield")


class ConfigError(ValueError):
    """Bad flags, missing inputs or incompatible artifacts."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


@contextmanager
def _thread_limit():
    n = int(os.environ.get("GRASPFIELD_THREADS", "0") or 0)
    if n <= 0:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _load_dataset(data: Path) -> tuple[list[TrainingScene], list[str]]:
    dirs = persist.list_scenes(data) if (Path(data) / "scenes").is_dir() else []
    if not dirs:
        raise ConfigError(f"no scenes found under {data}")
    out, ids = [], []
    for d in dirs:
        sid, scene, cams, images, _ = persist.load_scene(d)
        out.append(TrainingScene(scene, [CameraObservation(i, c) for i, c in zip(images, cams)]))
        ids.append(sid)
    return out, ids


def _checkpoint_dir(path: Path) -> Path:
    p = Path(path)
    if (p / "weights.bin").exists():
        return p
    if (p / "checkpoint" / "weights.bin").exists():
        return p / "checkpoint"
    raise ConfigError(f"no checkpoint at {p}")


def _finish(args, out: Path, config: dict, inputs, outputs, watch) -> None:
    rec = persist.run_record(args.command, args.argv, config, args.seed, inputs, outputs,
                             watch.elapsed)
    persist.write_run_manifest(out, rec)


class _Log:
    """``log.csv`` writer for training runs."""

    def __init__(self, path: Path, fields):
        self.f = open(path, "w", newline="")
        self.w = csv.writer(self.f, lineterminator="\n")
        self.w.writerow(fields)

    def row(self, *vals):
        self.w.writerow([repr(v) if isinstance(v, float) else v for v in vals])

    def close(self):
        self.f.close()


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> None:
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    specs = make_object_set(args.set)
    count = args.objects or (1 if args.set == "single" else 5)
    cams = default_cameras(width=args.image_size, height=args.image_size)
    watch = persist.Stopwatch()
    ids = []
    for i in range(args.scenes):
        scene = spawn_scene(specs, count, rng)
        labels = [sample_positive_grasp(scene, rng)] + sample_negative_grasps(scene, args.negatives, rng)
        sid = f"scene_{i:04d}"
        persist.save_scene(out, sid, scene, cams, observe(scene, cams), labels)
        ids.append(sid)
    _finish(args, out, {"set": args.set, "scenes": args.scenes, "objects": count,
                        "image_size": args.image_size, "negatives": args.negatives},
            [], [f"scenes/{s}" for s in ids], watch)


def cmd_train_nerf(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, _ = _load_dataset(args.data)
    h, w = dataset[0].observations[0].image.shape[:2]
    fcfg = FieldConfig(image_height=h, image_width=w)
    ncfg = NvsConfig(steps=args.steps, warmup_steps=args.warmup, lr_omega_max=args.lr_omega,
                     lr_phi_max=args.lr_phi, rays_per_step=args.rays,
                     n_samples_per_ray=args.samples, seed=args.seed)
    config = {"field": fcfg.to_json(), "nvs": asdict(ncfg), "init_seed": args.seed}
    persist.write_json(out / "config.json", config)
    scene0 = dataset[0].scene
    box = scene0.workspace.box(scene0.table_height, inflate=0.1)
    params = init_params(fcfg, args.seed)
    watch = persist.Stopwatch()
    logger = _Log(out / "log.csv", ["step", "loss", "lr_omega", "lr_phi"])
    saved = []

    def on_step(step, loss, lrs):
        logger.row(step, loss, *lrs)

    def on_checkpoint(step, p):
        saved.append(persist.save_checkpoint(out / f"checkpoint_step{step:06d}", p,
                                             {"command": args.command, "step": step}).name)

    try:
        params = train_nvs(dataset, params, ncfg, box, on_step, args.checkpoint_every,
                           on_checkpoint)
    finally:
        logger.close()
    persist.save_checkpoint(out / "checkpoint", params, {"command": args.command,
                                                         "step": ncfg.steps, "config": config})
    _finish(args, out, config, [args.data], saved + ["checkpoint", "log.csv"], watch)


def cmd_train_grasp(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, _ = _load_dataset(args.data)
    if args.freeze:
        if args.backbone is None:
            raise ConfigError("--freeze needs --backbone")
        params = persist.load_checkpoint(_checkpoint_dir(args.backbone))
        inputs = [args.data, args.backbone]
    else:
        h, w = dataset[0].observations[0].image.shape[:2]
        params = init_params(FieldConfig(image_height=h, image_width=w), args.seed)
        inputs = [args.data]
    gcfg = GraspTrainConfig(lr=args.lr, negatives_per_scene=args.negatives, epochs=args.epochs,
                            freeze_backbone=args.freeze, seed=args.seed)
    config = {"field": params.config.to_json(), "grasp": asdict(gcfg),
              "backbone": str(args.backbone) if args.freeze else None}
    persist.write_json(out / "config.json", config)
    before = {g: persist.checksum(params, g) for g in ("omega", "phi")}
    watch = persist.Stopwatch()
    logger = _Log(out / "log.csv", ["step", "epoch", "loss", "lr"])
    try:
        params = train_grasp(dataset, params, gcfg, lambda *r: logger.row(*r))
    finally:
        logger.close()
    if args.freeze:
        after = {g: persist.checksum(params, g) for g in ("omega", "phi")}
        if after != before:
            raise RuntimeError("frozen backbone changed during grasp training")
    persist.save_checkpoint(out / "checkpoint", params, {"command": args.command,
                                                         "config": config})
    _finish(args, out, config, inputs, ["checkpoint", "log.csv"], watch)


def cmd_render(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = persist.load_checkpoint(_checkpoint_dir(args.checkpoint))
    sid, scene, cams, images, _ = persist.load_scene(args.scene)
    for v in (args.source_view, args.target_view):
        if not 0 <= v < len(cams):
            raise ConfigError(f"view {v} out of range for {len(cams)} cameras")
    watch = persist.Stopwatch()
    obs = CameraObservation(images[args.source_view], cams[args.source_view])
    box = scene.workspace.box(scene.table_height, inflate=0.1)
    img = render_view(obs, cams[args.target_view], params, box, n_samples=args.samples)
    name = f"{sid}_v{args.source_view}_to_v{args.target_view}.png"
    persist.write_png(out / name, img)
    mse = float(np.mean((img - images[args.target_view]) ** 2))
    persist.write_json(out / "render.json", {"scene_id": sid, "mse": mse})
    _finish(args, out, {"source_view": args.source_view, "target_view": args.target_view,
                        "samples": args.samples}, [args.checkpoint, args.scene],
            [name, "render.json"], watch)


def _opt_config(args) -> OptimizerRunConfig:
    return OptimizerRunConfig(n_candidates=args.candidates, max_iters=args.iters, lr0=args.lr0,
                              decay=args.decay, snapshot_iters=tuple(args.snapshots),
                              objective="three_views" if args.views == 3 else "one_view",
                              seed=args.seed)


def cmd_optimize(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = persist.load_checkpoint(_checkpoint_dir(args.checkpoint)).trainable(())
    sid, scene, cams, images, _ = persist.load_scene(args.scene)
    cfg = _opt_config(args)
    watch = persist.Stopwatch()
    encs = [encode_observation(CameraObservation(i, c), params) for i, c in zip(images, cams)]
    res = optimize_field(params, encs, scene.workspace.box(scene.table_height), cfg)
    snaps = {}
    for it in cfg.snapshot_iters:
        snaps[str(it)] = [{"index": tr.index, "position": [float(v) for v in tr.positions[it]],
                           "direction": list(cfg.fixed_direction), "score": tr.scores[it]}
                          for tr in top_k(res.trajectories, 5, it)]
    persist.write_json(out / "optim_result.json", {
        "format_version": persist.FORMAT_VERSION, "scene_id": sid, "seed": args.seed,
        "config": cfg.to_json(), "n_valid": int(res.valid.sum()), "snapshots": snaps})
    _finish(args, out, cfg.to_json(), [args.checkpoint, args.scene], ["optim_result.json"], watch)


def cmd_eval(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = persist.load_checkpoint(_checkpoint_dir(args.checkpoint))
    task = make_task(args.task, args.scenes, args.seed)
    cfg = _opt_config(args)
    kinds = tuple("three_views" if v == 3 else "one_view" for v in args.eval_views)
    cams = default_cameras(width=params.config.image_width, height=params.config.image_height)
    watch = persist.Stopwatch()
    records, _ = run_task(task, FieldScorer(params), kinds, cfg, cams)
    persist.write_json(out / "records.json", [r.to_json() for r in records])
    write_long_report(out / "eval_report.csv", long_rows(task.name, args.model, records))
    _finish(args, out, {"task": asdict(task), "optimizer": cfg.to_json(), "kinds": list(kinds),
                        "model": args.model}, [args.checkpoint],
            ["records.json", "eval_report.csv"], watch)


def cmd_report(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    watch = persist.Stopwatch()
    rows = []
    for d in args.inputs:
        p = Path(d) / "eval_report.csv" if Path(d).is_dir() else Path(d)
        if not p.exists():
            raise ConfigError(f"missing report {p}")
        rows.extend(read_long_report(p))
    if not rows:
        raise ConfigError("no evaluation rows to report")
    write_long_report(out / "eval_report.csv", rows)
    (out / "table1.csv").write_text(aggregate_report(rows, args.objective, args.snapshot))
    _finish(args, out, {"objective": args.objective, "snapshot": args.snapshot},
            args.inputs, ["eval_report.csv", "table1.csv"], watch)


def cmd_rerun(args) -> None:
    man = persist.read_manifest(args.manifest)
    argv = list(man["argv"])
    if args.out is not None:
        if "--out" not in argv:
            raise ConfigError("recorded command has no --out flag")
        argv[argv.index("--out") + 1] = str(args.out)
    code = main(argv)
    if code:
        raise SystemExit(code)


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graspfield", description="Grasp-field training and pose optimisation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seeded(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--out", type=Path, required=True)
        return sp

    s = seeded("synth", "generate a scene dataset")
    s.add_argument("--set", required=True, choices=["single", "multi_A", "multi_B", "multi_C"])
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--objects", type=int, default=None)
    s.add_argument("--image-size", type=int, default=96)
    s.add_argument("--negatives", type=int, default=16, help="stored negative labels per scene")
    s.set_defaults(func=cmd_synth)

    s = seeded("train-nerf", "novel-view synthesis stage")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--warmup", type=int, default=10000)
    s.add_argument("--lr-omega", type=float, default=1e-4)
    s.add_argument("--lr-phi", type=float, default=1e-5)
    s.add_argument("--rays", type=int, default=1024)
    s.add_argument("--samples", type=int, default=24)
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.set_defaults(func=cmd_train_nerf)

    s = seeded("train-grasp", "grasp head stage")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--freeze", action=argparse.BooleanOptionalAction, default=True,
                   help="--no-freeze trains the joint baseline from scratch")
    s.add_argument("--backbone", type=Path, default=None)
    s.add_argument("--epochs", type=int, default=250)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--negatives", type=int, default=2047)
    s.set_defaults(func=cmd_train_grasp)

    s = seeded("render", "render a novel view from a checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--source-view", type=int, default=0)
    s.add_argument("--target-view", type=int, default=1)
    s.add_argument("--samples", type=int, default=32)
    s.set_defaults(func=cmd_render)

    def opt_flags(sp):
        sp.add_argument("--checkpoint", type=Path, required=True)
        sp.add_argument("--views", type=int, choices=[1, 3], default=3)
        sp.add_argument("--candidates", type=int, default=8192)
        sp.add_argument("--iters", type=int, default=16)
        sp.add_argument("--lr0", type=float, default=0.05)
        sp.add_argument("--decay", type=float, default=0.8)
        sp.add_argument("--snapshots", type=int, nargs="+", default=[8, 12, 16])

    s = seeded("optimize", "optimise grasp positions on one scene")
    opt_flags(s)
    s.add_argument("--scene", type=Path, required=True)
    s.set_defaults(func=cmd_optimize)

    s = seeded("eval", "run a grasping task")
    opt_flags(s)
    s.add_argument("--task", required=True, choices=sorted(TASKS))
    s.add_argument("--scenes", type=int, default=10)
    s.add_argument("--model", default="model")
    s.add_argument("--eval-views", type=int, nargs="+", choices=[1, 3], default=[3])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="table of mean errors across evaluations")
    s.add_argument("inputs", nargs="+", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--objective", default="three_views", choices=["three_views", "one_view"])
    s.add_argument("--snapshot", type=int, default=None)
    s.set_defaults(func=cmd_report, seed=None)

    s = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    s.add_argument("manifest", type=Path)
    s.add_argument("--out", type=Path, default=None)
    s.set_defaults(func=cmd_rerun, seed=None)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            args.func(args)
    except (NonFiniteError, CapacityError, ShapeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, persist.VersionError, KeyError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
