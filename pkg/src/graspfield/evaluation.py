"""Grasping tasks, translation-error metrics and table reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import shapely

from .field import CameraObservation, ModelParams, encode_observation
from .optimizer import OptimizerRunConfig, objective, optimize, top_k
from .scene import (SceneSpec, default_cameras, make_object_set, nearest_valid_distance, observe,
                    spawn_scene)

TASKS = {
    # name: (object set, objects per scene)
    "single_object": ("single", 1),
    "multi_A": ("multi_A", 5),
    "multi_B": ("multi_B", 5),
    "multi_C": ("multi_C", 5),
}
TASK_SHORT = {"single_object": "so", "multi_A": "mo-A", "multi_B": "mo-B", "multi_C": "mo-C"}
METRICS = ("best_success", "lowest_from_5")
# Full-scale reference means (mm) for context only; not used as gates.
REFERENCE_MM = {"multi_B/multi-NeRF+multi-grasp": 3.41, "overall/best": 3.0}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    object_set: str
    objects_per_scene: int
    n_scenes: int
    seed: int

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be at least 1")
        if self.objects_per_scene > 1 and self.n_scenes % self.objects_per_scene:
            raise ValueError("multi-object tasks evaluate whole episodes; n_scenes must be a "
                             f"multiple of {self.objects_per_scene}")

    @property
    def n_episodes(self) -> int:
        return self.n_scenes // self.objects_per_scene if self.objects_per_scene > 1 else self.n_scenes


def make_task(name: str, n_scenes: int = 10, seed: int = 0) -> TaskSpec:
    if name not in TASKS:
        raise KeyError(f"unknown task {name!r}; expected one of {sorted(TASKS)}")
    object_set, per = TASKS[name]
    return TaskSpec(name, object_set, per, n_scenes, seed)


@dataclass
class EvalRecord:
    scene_id: str
    objective: str
    snapshot_iter: int
    top5: list
    best_success_error: float
    lowest_from_5_error: float

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id, "objective": self.objective,
            "snapshot_iter": self.snapshot_iter,
            "top5": [{"position": [float(v) for v in p], "score": float(s), "error": float(e)}
                     for p, s, e in self.top5],
            "best_success_error": self.best_success_error,
            "lowest_from_5_error": self.lowest_from_5_error,
        }


def translation_error(x, scene: SceneSpec):
    """Distance (m) from predicted position(s) to the nearest valid grasp."""
    return nearest_valid_distance(x, scene)


def score_snapshot(entries: Sequence) -> tuple[float, float]:
    """``(best_success, lowest_from_5)`` from five ``(score, error)`` pairs.

    Entries must be sorted by score, highest first.
    """
    if len(entries) != 5:
        raise ValueError(f"expected 5 entries, got {len(entries)}")
    scores = [float(s) for s, _ in entries]
    if any(a < b for a, b in zip(scores, scores[1:])):
        raise ValueError("entries must be sorted by score, descending")
    errors = [float(e) for _, e in entries]
    return errors[0], min(errors)


# ---------------------------------------------------------------------------
# Scorers: turn (scene, observations, objective) into a differentiable score function


class FieldScorer:
    """Learned grasp field; ignores the ground-truth scene."""

    def __init__(self, params: ModelParams):
        self.params = params.trainable(())

    def score_fn(self, scene: SceneSpec, observations: Sequence[CameraObservation], kind: str,
                 direction) -> Callable:
        encs = [encode_observation(o, self.params) for o in observations]
        params = self.params

        def fn(x):
            return objective(x, encs, kind, params, direction)

        return fn


def _episode_removal(scene: SceneSpec, best_xy) -> int:
    p = shapely.Point(float(best_xy[0]), float(best_xy[1]))
    return int(np.argmin([o.footprint.distance(p) for o in scene.objects]))


def evaluate_scene(scene: SceneSpec, scene_id: str, scorer, cameras, kinds: Sequence[str],
                   opt_config: OptimizerRunConfig):
    """Optimise and score one scene for each objective kind.

    Returns:
        ``(records, best positions per kind at the final snapshot)``.
    """
    images = observe(scene, cameras)
    obs = [CameraObservation(img, cam) for img, cam in zip(images, cameras)]
    box = scene.workspace.box(scene.table_height)
    records, finals = [], {}
    for kind in kinds:
        cfg = OptimizerRunConfig(**{**opt_config.to_json(), "objective": kind})
        res = optimize(scorer.score_fn(scene, obs, kind, cfg.fixed_direction), box, cfg)
        for it in cfg.snapshot_iters:
            best = top_k(res.trajectories, 5, it)
            pos = np.array([tr.positions[it] for tr in best], dtype=np.float64)
            err = np.atleast_1d(translation_error(pos, scene))
            entries = [(tr.scores[it], e) for tr, e in zip(best, err)]
            bs, l5 = score_snapshot(entries)
            records.append(EvalRecord(scene_id, kind, it,
                                      [(p, s, e) for p, (s, e) in zip(pos, entries)], bs, l5))
        finals[kind] = np.array(best[0].positions[max(cfg.snapshot_iters)])
    return records, finals


def task_scenes(task: TaskSpec):
    """Initial scene of every episode, drawn deterministically from the task seed."""
    rng = np.random.default_rng(task.seed)
    specs = make_object_set(task.object_set)
    return [spawn_scene(specs, task.objects_per_scene, rng) for _ in range(task.n_episodes)]


def run_task(task: TaskSpec, scorer, kinds=("three_views",), opt_config=OptimizerRunConfig(),
             cameras=None, progress: Callable | None = None) -> tuple[list, dict]:
    """Evaluate a scorer on every scene of a task.

    Multi-object episodes remove, after each scene, the object closest to the
    best-success grasp of the first objective kind, until the table is empty.

    Returns:
        ``(records, aggregates)``, aggregates keyed by
        ``(objective, snapshot_iter, metric)`` holding mean and median in metres.
    """
    cameras = default_cameras() if cameras is None else cameras
    records = []
    for ep, scene in enumerate(task_scenes(task)):
        step = 0
        while scene.objects:
            sid = f"{task.name}_ep{ep:03d}_s{step}"
            recs, finals = evaluate_scene(scene, sid, scorer, cameras, kinds, opt_config)
            records.extend(recs)
            if progress is not None:
                progress(sid, recs)
            if task.objects_per_scene == 1:
                break
            scene = scene.without(_episode_removal(scene, finals[kinds[0]][:2]))
            step += 1
    return records, aggregate(records)


def aggregate(records) -> dict:
    """Mean and median error per (objective, snapshot, metric), in scene-id order."""
    groups: dict = {}
    for r in sorted(records, key=lambda r: (r.objective, r.snapshot_iter, r.scene_id)):
        for m in METRICS:
            groups.setdefault((r.objective, r.snapshot_iter, m), []).append(
                getattr(r, f"{m}_error"))
    out = {}
    for key, vals in groups.items():
        total = 0.0
        for v in vals:
            total += v
        out[key] = {"mean": total / len(vals), "median": float(np.median(vals)), "n": len(vals)}
    return out


# ---------------------------------------------------------------------------
# Reports


def long_rows(task: str, model: str, records) -> list[dict]:
    agg = aggregate(records)
    rows = []
    for (kind, it, metric), v in sorted(agg.items()):
        rows.append({"task": task, "model": model, "objective": kind, "snapshot_iter": it,
                     "metric": metric, "value_mm": round(v["mean"] * 1000.0, 6)})
    return rows


def write_long_report(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["task", "model", "objective", "snapshot_iter", "metric",
                                          "value_mm"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_long_report(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["snapshot_iter"] = int(r["snapshot_iter"])
        r["value_mm"] = float(r["value_mm"])
    return rows


def aggregate_report(rows: list[dict], objective_kind: str = "three_views",
                     snapshot_iter: int | None = None) -> str:
    """Wide CSV: one block per metric, rows = tasks, columns = models, cells in mm."""
    rows = [r for r in rows if r["objective"] == objective_kind]
    if snapshot_iter is None and rows:
        snapshot_iter = max(r["snapshot_iter"] for r in rows)
    rows = [r for r in rows if r["snapshot_iter"] == snapshot_iter]
    tasks = [t for t in TASKS if any(r["task"] == t for r in rows)]
    tasks += sorted({r["task"] for r in rows} - set(tasks))
    models = list(dict.fromkeys(r["model"] for r in rows))
    cells: dict = {}
    for r in rows:
        cells.setdefault((r["metric"], r["task"], r["model"]), []).append(r["value_mm"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for metric in METRICS:
        w.writerow([metric.replace("_", "-")] + models)
        for t in tasks:
            row = [TASK_SHORT.get(t, t)]
            for m in models:
                vals = cells.get((metric, t, m))
                row.append("" if not vals else f"{sum(vals) / len(vals):.2f}")
            w.writerow(row)
    return buf.getvalue()
