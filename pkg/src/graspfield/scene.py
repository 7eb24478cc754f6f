"""Synthetic tabletop scenes of prismatic objects.

Covers the object sets, non-overlapping random placement, a flat-shaded ray
caster for the fixed cameras, and the ground-truth grasp oracles: the valid
set is the union of every object's top face, inset from its edges, at the
object's top height.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
import shapely
from shapely.geometry import Polygon
from shapely.geometry.polygon import orient

from .camera import Camera, CameraExtrinsics, CameraIntrinsics, pixel_grid, rays_for_pixels

OBJECT_SET_NAMES = ("single", "multi_A", "multi_B", "multi_C")
GRASP_DIRECTION = (0.0, 0.0, -1.0)
TOP_INSET = 0.002
NEGATIVE_MARGIN = 0.005
MAX_PLACEMENT_ATTEMPTS = 10_000
LIGHT_DIRECTION = np.array([0.4, 0.3, 1.0]) / np.linalg.norm([0.4, 0.3, 1.0])
AMBIENT = 0.35
DEFAULT_BACKGROUND = (0.45, 0.45, 0.45)


class CapacityError(RuntimeError):
    """Objects could not be placed without overlap."""


class EmptySceneError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    base: tuple
    height: float
    color: tuple
    holes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "base", tuple(tuple(map(float, p)) for p in self.base))
        object.__setattr__(self, "holes",
                           tuple(tuple(tuple(map(float, p)) for p in h) for h in self.holes))
        object.__setattr__(self, "color", tuple(map(float, self.color)))
        if len(self.base) < 3:
            raise ValueError(f"{self.name}: base needs at least 3 vertices")
        if self.height <= 0:
            raise ValueError(f"{self.name}: height must be positive")
        if not self.polygon.is_valid:
            raise ValueError(f"{self.name}: base polygon is not simple")

    @functools.cached_property
    def polygon(self) -> Polygon:
        return orient(Polygon(self.base, self.holes), sign=1.0)

    @property
    def radius(self) -> float:
        return float(max(math.hypot(x, y) for x, y in self.base))

    def to_json(self) -> dict:
        d = {"name": self.name, "base": [list(p) for p in self.base], "height": self.height,
             "color": list(self.color)}
        if self.holes:
            d["holes"] = [[list(p) for p in h] for h in self.holes]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ObjectSpec":
        return cls(d["name"], d["base"], float(d["height"]), d["color"], d.get("holes", ()))


@dataclass(frozen=True)
class PlacedObject:
    spec: ObjectSpec
    position: tuple
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(map(float, self.position)))
        object.__setattr__(self, "yaw", float(self.yaw))

    @functools.cached_property
    def footprint(self) -> Polygon:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x0, y0 = self.position

        def tf(ring):
            return [(c * x - s * y + x0, s * x + c * y + y0) for x, y in ring]

        return orient(Polygon(tf(self.spec.base), [tf(h) for h in self.spec.holes]), sign=1.0)

    @functools.cached_property
    def valid_top(self) -> Polygon:
        """Top face shrunk by the grasp inset."""
        return self.footprint.buffer(-TOP_INSET, join_style="mitre")

    def to_json(self) -> dict:
        return {"spec": self.spec.to_json(), "position": list(self.position), "yaw": self.yaw}

    @classmethod
    def from_json(cls, d: dict) -> "PlacedObject":
        return cls(ObjectSpec.from_json(d["spec"]), d["position"], d["yaw"])


@dataclass(frozen=True)
class Workspace:
    """Axis-aligned grasp volume above the table (meters)."""

    x_min: float = -0.25
    x_max: float = 0.25
    y_min: float = -0.25
    y_max: float = 0.25
    height: float = 0.15

    def box(self, table_height: float = 0.0, inflate: float = 0.0):
        """``(lo, hi)`` corners; ``inflate`` grows each extent by that fraction."""
        lo = np.array([self.x_min, self.y_min, table_height])
        hi = np.array([self.x_max, self.y_max, table_height + self.height])
        pad = 0.5 * inflate * (hi - lo)
        return lo - pad, hi + pad

    def to_json(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min,
                "y_max": self.y_max, "height": self.height}


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    workspace: Workspace = Workspace()
    table_height: float = 0.0
    background_color: tuple = DEFAULT_BACKGROUND

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "background_color", tuple(map(float, self.background_color)))

    def without(self, index: int) -> "SceneSpec":
        objs = self.objects[:index] + self.objects[index + 1:]
        return SceneSpec(objs, self.workspace, self.table_height, self.background_color)

    def top_heights(self) -> np.ndarray:
        return np.array([self.table_height + o.spec.height for o in self.objects])

    def to_json(self) -> dict:
        return {
            "objects": [o.to_json() for o in self.objects],
            "workspace": self.workspace.to_json(),
            "table_height": self.table_height,
            "background_color": list(self.background_color),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls(tuple(PlacedObject.from_json(o) for o in d["objects"]),
                   Workspace(**d["workspace"]), float(d["table_height"]),
                   tuple(d["background_color"]))


@dataclass(frozen=True)
class GraspLabel:
    position: np.ndarray
    direction: np.ndarray
    success: int

    def to_json(self) -> dict:
        return {"position": [float(v) for v in self.position],
                "direction": [float(v) for v in self.direction], "success": int(self.success)}


# ---------------------------------------------------------------------------
# Object sets


@functools.lru_cache(maxsize=None)
def _object_table() -> dict:
    text = resources.files("graspfield").joinpath("data/object_sets.json").read_text()
    table = json.loads(text)
    if table.get("format_version") != 1:
        raise ValueError(f"unsupported object table version {table.get('format_version')}")
    return table


def make_object_set(set_name: str) -> list[ObjectSpec]:
    table = _object_table()
    if set_name not in table["sets"]:
        raise KeyError(f"unknown object set {set_name!r}; expected one of {OBJECT_SET_NAMES}")
    specs = []
    for entry in table["sets"][set_name]:
        shape = table["shapes"][entry["shape"]]
        specs.append(ObjectSpec(entry["name"], shape["outer"], entry["height"], entry["color"],
                                shape.get("holes", ())))
    return specs


# ---------------------------------------------------------------------------
# Placement


def spawn_scene(specs, count: int, rng: np.random.Generator, workspace: Workspace = Workspace(),
                table_height: float = 0.0, clearance: float = 0.01,
                background_color=DEFAULT_BACKGROUND) -> SceneSpec:
    """Rejection-sample ``count`` non-overlapping placements.

    Specs are drawn without replacement while the set is large enough; any
    extra objects repeat randomly chosen specs.
    """
    specs = list(specs)
    if count < 1 or not specs:
        raise ValueError("need at least one object and one spec")
    order = list(rng.permutation(len(specs))[: min(count, len(specs))])
    if count > len(specs):
        order += list(rng.integers(0, len(specs), count - len(specs)))
    bounds = shapely.box(workspace.x_min, workspace.y_min, workspace.x_max, workspace.y_max)
    placed: list[PlacedObject] = []
    attempts = 0
    for i in order:
        spec = specs[int(i)]
        r = spec.radius
        if 2 * r > min(workspace.x_max - workspace.x_min, workspace.y_max - workspace.y_min):
            raise CapacityError(f"{spec.name} does not fit in the workspace")
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise CapacityError(f"could not place {count} objects in {MAX_PLACEMENT_ATTEMPTS} attempts")
            pos = (rng.uniform(workspace.x_min + r, workspace.x_max - r),
                   rng.uniform(workspace.y_min + r, workspace.y_max - r))
            cand = PlacedObject(spec, pos, rng.uniform(0.0, 2 * math.pi))
            fp = cand.footprint
            if not bounds.contains(fp):
                continue
            if all(fp.distance(o.footprint) > clearance for o in placed):
                placed.append(cand)
                break
    return SceneSpec(tuple(placed), workspace, table_height, background_color)


# ---------------------------------------------------------------------------
# Cameras and rendering


def default_cameras(workspace: Workspace = Workspace(), table_height: float = 0.0,
                    width: int = 96, height: int = 96, distance: float = 0.8,
                    pitch_deg: float = 45.0, azimuths_deg=(30.0, 150.0, 270.0),
                    margin_px: float = 3.0) -> list[Camera]:
    """Three cameras looking at the workspace centre from 120° apart.

    A shared focal length is chosen so the whole grasp volume projects inside
    every image with ``margin_px`` to spare.
    """
    lo, hi = workspace.box(table_height)
    target = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, table_height])
    pitch = math.radians(pitch_deg)
    rts = []
    for az in azimuths_deg:
        a = math.radians(az)
        eye = target + distance * np.array([math.cos(pitch) * math.cos(a),
                                            math.cos(pitch) * math.sin(a), math.sin(pitch)])
        rts.append(CameraExtrinsics.look_at(eye, target))
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                        for z in (lo[2], hi[2])])
    need = 0.0
    for rt in rts:
        xc = corners @ rt.rotation.T + rt.translation
        need = max(need, np.max(np.abs(xc[:, 0] / xc[:, 2])), np.max(np.abs(xc[:, 1] / xc[:, 2])))
    half = min(width, height) / 2 - 0.5 - margin_px
    f = half / need
    K = CameraIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)
    return [Camera(K, rt) for rt in rts]


def _shade(color, normal_dot_light):
    k = AMBIENT + (1 - AMBIENT) * np.maximum(normal_dot_light, 0.0)
    return np.asarray(color)[None, :] * np.asarray(k).reshape(-1, 1)


def top_face_color(obj: PlacedObject) -> np.ndarray:
    return _shade(obj.spec.color, LIGHT_DIRECTION[2])[0]


def render_scene(scene: SceneSpec, K: CameraIntrinsics, RT: CameraExtrinsics,
                 width: int | None = None, height: int | None = None) -> np.ndarray:
    """Ray-cast the scene into an (H, W, 3) float32 RGB image in [0, 1].

    The table and everything beyond it render in the scene background colour;
    prism tops and walls are flat-shaded with one directional light.
    """
    width = K.width if width is None else width
    height = K.height if height is None else height
    u, v = pixel_grid(width, height)
    origins, dirs = rays_for_pixels(u, v, K, RT)
    n = u.size
    best_t = np.full(n, np.inf)
    img = np.tile(np.asarray(scene.background_color, dtype=np.float64), (n, 1))
    ox, oy, oz = origins[:, 0], origins[:, 1], origins[:, 2]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    for obj in scene.objects:
        top = scene.table_height + obj.spec.height
        poly = obj.footprint
        # top face
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (top - oz) / dz
        ok = np.isfinite(t) & (t > 0) & (t < best_t)
        if ok.any():
            idx = np.nonzero(ok)[0]
            inside = shapely.contains_xy(poly, ox[idx] + t[idx] * dx[idx], oy[idx] + t[idx] * dy[idx])
            idx = idx[inside]
            best_t[idx] = t[idx]
            img[idx] = _shade(obj.spec.color, LIGHT_DIRECTION[2])
        # side walls; rings are oriented so material lies left of each edge
        rings = [poly.exterior] + list(poly.interiors)
        for ring in rings:
            pts = np.asarray(ring.coords)
            for p, q in zip(pts[:-1], pts[1:]):
                e = q - p
                denom = dx * e[1] - dy * e[0]
                with np.errstate(divide="ignore", invalid="ignore"):
                    wx, wy = p[0] - ox, p[1] - oy
                    t = (wx * e[1] - wy * e[0]) / denom
                    s = (wx * dy - wy * dx) / denom
                z = oz + t * dz
                ok = (np.abs(denom) > 1e-12) & (t > 0) & (t < best_t) & (s >= 0) & (s <= 1) \
                    & (z >= scene.table_height) & (z <= top)
                if ok.any():
                    normal = np.array([e[1], -e[0], 0.0]) / np.linalg.norm(e)
                    best_t[ok] = t[ok]
                    img[ok] = _shade(obj.spec.color, float(normal @ LIGHT_DIRECTION))
    return img.reshape(height, width, 3).astype(np.float32)


def foreground_mask(image: np.ndarray, background_color, tol: float = 1e-3) -> np.ndarray:
    return np.any(np.abs(image - np.asarray(background_color, dtype=image.dtype)) > tol, axis=-1)


# ---------------------------------------------------------------------------
# Grasp oracles


def _require_objects(scene: SceneSpec):
    if not scene.objects:
        raise EmptySceneError("scene has no objects")


def nearest_valid_distance(x, scene: SceneSpec) -> np.ndarray | float:
    """Euclidean distance from ``x`` (3,) or (N, 3) to the valid grasp set."""
    _require_objects(scene)
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    geoms = shapely.points(pts[:, 0], pts[:, 1])
    best = np.full(len(pts), np.inf)
    for obj, top in zip(scene.objects, scene.top_heights()):
        planar = shapely.distance(geoms, obj.valid_top)
        best = np.minimum(best, np.hypot(planar, pts[:, 2] - top))
    return float(best[0]) if single else best


def sample_positive_grasp(scene: SceneSpec, rng: np.random.Generator) -> GraspLabel:
    """Uniform sample over the union of inset top faces, pointing down."""
    _require_objects(scene)
    areas = np.array([o.valid_top.area for o in scene.objects])
    k = int(rng.choice(len(areas), p=areas / areas.sum()))
    obj = scene.objects[k]
    minx, miny, maxx, maxy = obj.valid_top.bounds
    while True:
        xs = rng.uniform(minx, maxx, 64)
        ys = rng.uniform(miny, maxy, 64)
        inside = np.nonzero(shapely.contains_xy(obj.valid_top, xs, ys))[0]
        if inside.size:
            i = inside[0]
            pos = np.array([xs[i], ys[i], scene.table_height + obj.spec.height])
            return GraspLabel(pos, np.array(GRASP_DIRECTION), 1)


def sample_negative_positions(scene: SceneSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniform workspace points farther than the margin from any valid grasp."""
    if n < 1:
        raise ValueError("n must be at least 1")
    lo, hi = scene.workspace.box(scene.table_height)
    pts = rng.uniform(lo, hi, size=(n, 3))
    if not scene.objects:
        return pts
    bad = nearest_valid_distance(pts, scene) <= NEGATIVE_MARGIN
    while bad.any():
        pts[bad] = rng.uniform(lo, hi, size=(int(bad.sum()), 3))
        bad = nearest_valid_distance(pts, scene) <= NEGATIVE_MARGIN
    return pts


def sample_negative_grasps(scene: SceneSpec, n: int, rng: np.random.Generator) -> list[GraspLabel]:
    d = np.array(GRASP_DIRECTION)
    return [GraspLabel(p, d, 0) for p in sample_negative_positions(scene, n, rng)]


def observe(scene: SceneSpec, cameras) -> list[np.ndarray]:
    return [render_scene(scene, c.K, c.RT) for c in cameras]
