"""On-disk formats: scene datasets, checkpoints, run manifests.

Layout::

    <data>/manifest.json
    <data>/scenes/<scene_id>/meta.json      scene, cameras, grasp labels
    <data>/scenes/<scene_id>/cam{0,1,2}.png 8-bit RGB

    <ckpt>/manifest.json   tensor table, config echo, run record
    <ckpt>/weights.bin     little-endian float32, row-major, manifest order
"""

from __future__ import annotations

import hashlib
import json
import platform
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .autodiff import Tensor
from .camera import Camera
from .field import FieldConfig, GROUPS, ModelParams
from .scene import GraspLabel, SceneSpec

FORMAT_VERSION = 1


class VersionError(ValueError):
    """An artifact was written by an incompatible format version."""


def _check_version(found, what: str) -> None:
    if found != FORMAT_VERSION:
        raise VersionError(f"{what} has format version {found}; this build reads version {FORMAT_VERSION}")


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n")


def read_json(path: Path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# Images


def write_png(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)


# ---------------------------------------------------------------------------
# Scenes


def save_scene(root: Path, scene_id: str, scene: SceneSpec, cameras, images, labels=()) -> Path:
    d = Path(root) / "scenes" / scene_id
    d.mkdir(parents=True, exist_ok=True)
    write_json(d / "meta.json", {
        "format_version": FORMAT_VERSION,
        "scene_id": scene_id,
        "scene": scene.to_json(),
        "cameras": [c.to_json() for c in cameras],
        "labels": [lab.to_json() for lab in labels],
    })
    for i, img in enumerate(images):
        write_png(d / f"cam{i}.png", img)
    return d


def load_scene(scene_dir: Path):
    """Returns ``(scene_id, SceneSpec, cameras, images, labels)``."""
    d = Path(scene_dir)
    meta = read_json(d / "meta.json")
    _check_version(meta.get("format_version"), f"scene {d}")
    cams = [Camera.from_json(c) for c in meta["cameras"]]
    images = [read_png(d / f"cam{i}.png") for i in range(len(cams))]
    labels = [GraspLabel(np.array(l["position"]), np.array(l["direction"]), int(l["success"]))
              for l in meta["labels"]]
    return meta["scene_id"], SceneSpec.from_json(meta["scene"]), cams, images, labels


def list_scenes(root: Path) -> list[Path]:
    return sorted(p for p in (Path(root) / "scenes").iterdir() if (p / "meta.json").exists())


# ---------------------------------------------------------------------------
# Checkpoints


def checksum(params: ModelParams, group: str | None = None) -> str:
    h = hashlib.sha256()
    for name, t in params.tensors.items():
        if group is None or name.startswith(group + "."):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(path: Path, params: ModelParams, run: dict | None = None) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    table, offset, blobs = [], 0, []
    for name, t in params.tensors.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        offset += len(raw)
        blobs.append(raw)
    (d / "weights.bin").write_bytes(b"".join(blobs))
    write_json(d / "manifest.json", {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "dtype": "float32",
        "byte_order": "little",
        "tensors": table,
        "config": params.config.to_json(),
        "freeze_omega": params.freeze_omega,
        "freeze_phi": params.freeze_phi,
        "checksums": {g: checksum(params, g) for g in GROUPS},
        "run": run or {},
    })
    return d


def load_checkpoint(path: Path) -> ModelParams:
    d = Path(path)
    man = read_json(d / "manifest.json")
    _check_version(man.get("format_version"), f"checkpoint {d}")
    if man.get("dtype") != "float32" or man.get("byte_order") != "little":
        raise VersionError(f"checkpoint {d} uses unsupported encoding")
    blob = (d / "weights.bin").read_bytes()
    tensors = {}
    for e in man["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        tensors[e["name"]] = Tensor(arr.reshape(e["shape"]).astype(np.float32), requires_grad=True)
    return ModelParams(tensors, FieldConfig.from_json(man["config"]),
                       bool(man.get("freeze_omega")), bool(man.get("freeze_phi")))


# ---------------------------------------------------------------------------
# Run manifests


def run_record(command: str, argv, config: dict, seed, inputs=(), outputs=(),
               duration_s: float | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "python": platform.python_version(),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "duration_s": duration_s,
    }


def write_run_manifest(directory: Path, record: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_json(d / "manifest.json", {**record, "kind": "run"})
    return d / "manifest.json"


def read_manifest(path: Path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    man = read_json(p)
    _check_version(man.get("format_version"), f"manifest {p}")
    return man


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return round(time.perf_counter() - self.start, 3)
