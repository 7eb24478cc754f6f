"""Pinhole camera model, ray generation and sampling, feature lookup.

Convention: extrinsics map world to camera, ``X_cam = R @ x + t``. The camera
looks along +Z, +X points right and +Y points down the image. Pixel centres
sit on integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def __eq__(self, other):
        return (isinstance(other, CameraExtrinsics)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def compose(self, other: "CameraExtrinsics") -> "CameraExtrinsics":
        """``self ∘ other``: apply ``other`` first."""
        return CameraExtrinsics(self.rotation @ other.rotation,
                                self.rotation @ other.translation + self.translation)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraExtrinsics":
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        return cls(r, -r @ eye)


@dataclass(frozen=True, eq=False)
class Camera:
    K: CameraIntrinsics
    RT: CameraExtrinsics

    def __eq__(self, other):
        return isinstance(other, Camera) and self.K == other.K and self.RT == other.RT

    def to_json(self) -> dict:
        return {
            "fx": self.K.fx, "fy": self.K.fy, "cx": self.K.cx, "cy": self.K.cy,
            "width": self.K.width, "height": self.K.height,
            "rotation": [float(v) for v in self.RT.rotation.reshape(-1)],
            "translation": [float(v) for v in self.RT.translation],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        k = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                             int(d["width"]), int(d["height"]))
        return cls(k, CameraExtrinsics(np.array(d["rotation"]).reshape(3, 3),
                                       np.array(d["translation"])))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class RaySamples:
    ts: np.ndarray
    positions: np.ndarray
    deltas: np.ndarray
    near: float
    far: float


def project(x, K: CameraIntrinsics, RT: CameraExtrinsics, min_depth: float | None = None):
    """Pixel coordinates of world points.

    Args:
        x: (3,) or (N, 3) points, as array or Tensor. Tensors stay differentiable.
        min_depth: if given, depths are clamped to it instead of raising.

    Returns:
        (2,) or (N, 2) continuous ``(u, v)``; a Tensor when ``x`` is one.

    Raises:
        BehindCameraError: a point has non-positive depth and no clamp is set.
    """
    if isinstance(x, Tensor):
        single = x.ndim == 1
        pts = x.reshape(1, 3) if single else x
        dt = pts.data.dtype
        xc = pts @ RT.rotation.T.astype(dt) + RT.translation.astype(dt)
        z = xc[:, 2:3]
        if min_depth is not None:
            z = ad.maximum(z, min_depth)
        elif (z.data <= 0).any():
            raise BehindCameraError("point behind camera")
        f = np.array([K.fx, K.fy], dtype=dt)
        c = np.array([K.cx, K.cy], dtype=dt)
        uv = xc[:, 0:2] / z * f + c
        return uv.reshape(2) if single else uv
    pts = np.asarray(x, dtype=np.float64)
    xc = pts @ RT.rotation.T + RT.translation
    z = xc[..., 2]
    if min_depth is not None:
        z = np.maximum(z, min_depth)
    elif (z <= 0).any():
        raise BehindCameraError("point behind camera")
    u = K.fx * xc[..., 0] / z + K.cx
    v = K.fy * xc[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def rays_for_pixels(u, v, K: CameraIntrinsics, RT: CameraExtrinsics):
    """Batched ray generation; returns ``(origins, directions)`` of shape (N, 3)."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    dirs = cam @ RT.rotation
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(RT.center, dirs.shape).copy()
    return origins, dirs


def ray_for_pixel(u: float, v: float, K: CameraIntrinsics, RT: CameraExtrinsics) -> Ray:
    o, d = rays_for_pixels([u], [v], K, RT)
    return Ray(o[0], d[0])


def pixel_grid(width: int, height: int):
    """Row-major integer pixel centres ``(u, v)``."""
    vv, uu = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return uu.reshape(-1).astype(np.float64), vv.reshape(-1).astype(np.float64)


def sample_along_rays(origins, dirs, near, far, n: int, mode: str = "uniform", rng=None):
    """Sample ``n`` depths per ray between per-ray ``near`` and ``far``.

    Each ray's interval is split into ``n`` equal bins; ``uniform`` takes bin
    midpoints, ``stratified`` one uniform draw per bin. Deltas are the lengths
    of the cells between consecutive sample midpoints (first and last cell
    extend to ``near``/``far``), so they telescope to ``far - near``.

    Returns:
        ``(ts, positions, deltas)`` with shapes (R, n), (R, n, 3), (R, n).
    """
    near = np.asarray(near, dtype=np.float64).reshape(-1)
    far = np.asarray(far, dtype=np.float64).reshape(-1)
    if n < 2:
        raise ValueError("need at least two samples per ray")
    if np.any(near >= far):
        raise ValueError("near must be smaller than far")
    if mode == "uniform":
        jitter = np.full((near.size, n), 0.5)
    elif mode == "stratified":
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        jitter = rng.random((near.size, n))
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    span = (far - near)[:, None]
    ts = near[:, None] + (np.arange(n)[None, :] + jitter) * span / n
    mids = 0.5 * (ts[:, 1:] + ts[:, :-1])
    edges = np.concatenate([near[:, None], mids, far[:, None]], axis=1)
    deltas = np.diff(edges, axis=1)
    positions = np.asarray(origins)[:, None, :] + ts[..., None] * np.asarray(dirs)[:, None, :]
    return ts, positions, deltas


def sample_along_ray(ray: Ray, near: float, far: float, n: int, mode: str = "uniform",
                     rng=None) -> RaySamples:
    ts, pos, deltas = sample_along_rays(ray.origin[None], ray.direction[None], [near], [far],
                                        n, mode, rng)
    return RaySamples(ts[0], pos[0], deltas[0], float(near), float(far))


def intersect_box(origins, dirs, lo, hi):
    """Slab test against an axis-aligned box.

    Returns:
        ``(near, far, hit)``; ``near`` is clipped to be non-negative.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (np.asarray(lo) - origins) * inv
        t1 = (np.asarray(hi) - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    near = np.maximum(tmin, 0.0)
    hit = tmax > near + 1e-9
    return near, tmax, hit


def _bilinear_setup(u, v, width, height):
    uc = np.clip(u, 0, width - 1)
    vc = np.clip(v, 0, height - 1)
    x0 = np.clip(np.floor(uc), 0, max(width - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(vc), 0, max(height - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fu = (uc - x0).astype(u.dtype)
    fv = (vc - y0).astype(v.dtype)
    inside_u = ((u >= 0) & (u <= width - 1)).astype(u.dtype)
    inside_v = ((v >= 0) & (v <= height - 1)).astype(v.dtype)
    return x0, x1, y0, y1, fu, fv, inside_u, inside_v


def bilinear_sample(feature_map, uv) -> Tensor:
    """Bilinear lookup of an (H, W, C) map at continuous pixel positions.

    Coordinates outside the image clamp to the border (zero gradient with
    respect to the clamped coordinate). Differentiable with respect to both
    the map and ``uv``.

    Args:
        feature_map: (H, W, C) Tensor or array.
        uv: (N, 2) or (2,) positions as Tensor or array.

    Returns:
        (N, C) or (C,) Tensor.
    """
    fm = ad.as_tensor(feature_map)
    uvt = ad.as_tensor(uv)
    single = uvt.ndim == 1
    if single:
        uvt = uvt.reshape(1, 2)
    if fm.ndim != 3 or fm.size == 0:
        raise ad.ShapeError(f"feature map must be non-empty (H, W, C), got {fm.shape}")
    H, W, C = fm.shape
    u, v = uvt.data[:, 0], uvt.data[:, 1]
    x0, x1, y0, y1, fu, fv, inu, inv = _bilinear_setup(u, v, W, H)
    f = fm.data
    f00, f01, f10, f11 = f[y0, x0], f[y0, x1], f[y1, x0], f[y1, x1]
    a, b = fu[:, None], fv[:, None]
    out = (1 - a) * (1 - b) * f00 + a * (1 - b) * f01 + (1 - a) * b * f10 + a * b * f11
    out = out.astype(f.dtype)

    def vjp(g, needs):
        gfm = guv = None
        if needs[0]:
            flat = np.zeros((H * W, C), dtype=g.dtype)
            for idx, w in ((y0 * W + x0, (1 - a) * (1 - b)), (y0 * W + x1, a * (1 - b)),
                           (y1 * W + x0, (1 - a) * b), (y1 * W + x1, a * b)):
                np.add.at(flat, idx, g * w)
            gfm = flat.reshape(H, W, C)
        if needs[1]:
            du = ((1 - b) * (f01 - f00) + b * (f11 - f10)) * g
            dv = ((1 - a) * (f10 - f00) + a * (f11 - f01)) * g
            guv = np.stack([du.sum(axis=1) * inu, dv.sum(axis=1) * inv], axis=1).astype(g.dtype)
        return gfm, guv

    res = ad.apply_op("bilinear_sample", (fm, uvt), out, vjp)
    return res.reshape(C) if single else res
