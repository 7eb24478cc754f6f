"""Image-conditioned neural field with a grasp-success head.

A small strided CNN turns a source image into a per-pixel feature map. A 3D
point is encoded with sinusoids, concatenated with its view direction's
encoding and the feature found at its projection, and pushed through a stack
of residual MLP blocks (the "core"). The core feeds a colour/density layer
used for volumetric rendering; the grasp head reads the core's final hidden
vector together with every block output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Camera, bilinear_sample, intersect_box, pixel_grid, project, rays_for_pixels, \
    sample_along_rays

GROUPS = ("omega", "phi", "psi")


@dataclass(frozen=True)
class FieldConfig:
    m_position: int = 6
    m_direction: int = 4
    stage_channels: tuple = (16, 16, 16, 16)
    stage_strides: tuple = (1, 2, 2, 2)
    hidden: int = 64
    phi_blocks: int = 4
    psi_blocks: int = 2
    density_scale: float = 100.0
    bundle_offsets: tuple = (-0.00375, -0.00125, 0.00125, 0.00375)
    image_width: int = 96
    image_height: int = 96
    background: tuple = (0.45, 0.45, 0.45)
    min_depth: float = 1e-3

    def __post_init__(self):
        for name in ("stage_channels", "stage_strides", "bundle_offsets", "background"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.m_position < 1 or self.m_direction < 1:
            raise ValueError("frequency counts must be at least 1")

    @property
    def feature_dim(self) -> int:
        return int(sum(self.stage_channels))

    @property
    def phi_input_dim(self) -> int:
        return 6 * self.m_position + 6 * self.m_direction + self.feature_dim

    @property
    def psi_input_dim(self) -> int:
        return self.hidden * (self.phi_blocks + 1)

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "FieldConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """Named weight tensors plus freeze flags.

    Tensor names are prefixed with their group (``omega.``, ``phi.``,
    ``psi.``); insertion order is the serialisation order.
    """

    tensors: dict
    config: FieldConfig
    freeze_omega: bool = False
    freeze_phi: bool = False

    def group(self, name: str) -> dict:
        return {k: v for k, v in self.tensors.items() if k.startswith(name + ".")}

    def __getitem__(self, key) -> Tensor:
        return self.tensors[key]

    def trainable(self, groups) -> "ModelParams":
        """Copy whose tensors require grad exactly for ``groups``."""
        groups = tuple(groups)
        ts = {k: Tensor._wrap(v.data, k.split(".")[0] in groups) for k, v in self.tensors.items()}
        return ModelParams(ts, self.config, self.freeze_omega, self.freeze_phi)

    def updated(self, new: dict) -> "ModelParams":
        ts = dict(self.tensors)
        ts.update(new)
        return ModelParams(ts, self.config, self.freeze_omega, self.freeze_phi)


@dataclass
class FieldOutput:
    color: Tensor
    density: Tensor
    skips: list
    trunk: Tensor


@dataclass
class CameraObservation:
    image: np.ndarray
    camera: Camera

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if (w, h) != (self.camera.K.width, self.camera.K.height):
            raise ValueError(f"image is {w}x{h} but intrinsics say "
                             f"{self.camera.K.width}x{self.camera.K.height}")


@dataclass
class EncodedObservation:
    """An observation together with its feature map."""

    camera: Camera
    features: Tensor


# ---------------------------------------------------------------------------
# Initialisation


def _dense(rng, fan_in, fan_out, scale=1.0):
    w = rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return w.astype(np.float32), np.zeros(fan_out, dtype=np.float32)


def _mlp_params(rng, prefix, d_in, hidden, blocks, d_out, out_scale):
    p = {}
    p[f"{prefix}.in.w"], p[f"{prefix}.in.b"] = _dense(rng, d_in, hidden)
    for i in range(blocks):
        p[f"{prefix}.block{i}.w1"], p[f"{prefix}.block{i}.b1"] = _dense(rng, hidden, hidden)
        p[f"{prefix}.block{i}.w2"], p[f"{prefix}.block{i}.b2"] = _dense(rng, hidden, hidden, 0.1)
    p[f"{prefix}.out.w"], p[f"{prefix}.out.b"] = _dense(rng, hidden, d_out, out_scale)
    return p


def init_params(config: FieldConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    c_in = 3
    for i, c in enumerate(config.stage_channels):
        arrays[f"omega.conv{i}.w"], arrays[f"omega.conv{i}.b"] = _dense(rng, 9 * c_in, c)
        c_in = c
    arrays.update(_mlp_params(rng, "phi", config.phi_input_dim, config.hidden,
                              config.phi_blocks, 4, 0.1))
    arrays.update(_mlp_params(rng, "psi", config.psi_input_dim, config.hidden,
                              config.psi_blocks, 1, 0.1))
    return ModelParams({k: Tensor(v, requires_grad=True) for k, v in arrays.items()}, config)


# ---------------------------------------------------------------------------
# Building blocks


def positional_encode(p, M: int) -> Tensor:
    """Sinusoidal encoding ``(sin 2^k π p, cos 2^k π p)`` for k < M.

    The last axis of ``p`` holds components; the output lists, for each
    component in turn, the sin/cos pairs from the lowest frequency upwards.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    p = ad.as_tensor(p)
    dt = p.data.dtype
    lead = p.shape[:-1]
    D = p.shape[-1]
    freqs = (np.pi * 2.0 ** np.arange(M)).astype(dt)
    a = p.reshape(lead + (D, 1)) * freqs
    s = ad.sin(a).reshape(lead + (D, M, 1))
    c = ad.cos(a).reshape(lead + (D, M, 1))
    return ad.concat([s, c], axis=-1).reshape(lead + (2 * M * D,))


def im2col(x, k: int = 3, stride: int = 1, pad: int = 1) -> Tensor:
    """(H, W, C) -> (Ho*Wo, k*k*C) patches, column order (ky, kx, c)."""
    x = ad.as_tensor(x)
    H, W, C = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    windows = [xp[ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride]
               for ky in range(k) for kx in range(k)]
    out = np.stack(windows, axis=2).reshape(Ho * Wo, k * k * C)

    def vjp(g, needs):
        g = g.reshape(Ho, Wo, k * k, C)
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for i, (ky, kx) in enumerate((a, b) for a in range(k) for b in range(k)):
            gp[ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride] += g[:, :, i]
        return (gp[pad:pad + H, pad:pad + W],)

    return ad.apply_op("im2col", (x,), out, vjp)


def upsample_nearest(x, factor: int) -> Tensor:
    x = ad.as_tensor(x)
    if factor == 1:
        return x
    h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=0), factor, axis=1)
    return ad.apply_op("upsample", (x,), out,
                       lambda g, n: (g.reshape(h, factor, w, factor, c).sum(axis=(1, 3)),))


def encode_image(image: np.ndarray, params: ModelParams) -> Tensor:
    """Feature map (H, W, C_feat) at the input resolution."""
    cfg = params.config
    image = np.asarray(image)
    if image.shape != (cfg.image_height, cfg.image_width, 3):
        raise ValueError(f"image shape {image.shape} does not match the configured "
                         f"{(cfg.image_height, cfg.image_width, 3)}")
    h = Tensor(image - 0.5)
    stages = []
    for i, stride in enumerate(cfg.stage_strides):
        cols = im2col(h, 3, stride, 1)
        ho = (h.shape[0] + 2 - 3) // stride + 1
        wo = (h.shape[1] + 2 - 3) // stride + 1
        y = ad.relu(ad.linear(cols, params[f"omega.conv{i}.w"], params[f"omega.conv{i}.b"]))
        h = y.reshape(ho, wo, -1)
        stages.append(h)
    ups = []
    for s in stages:
        factor = cfg.image_height // s.shape[0]
        if factor * s.shape[0] != cfg.image_height or factor * s.shape[1] != cfg.image_width:
            raise ValueError("stage resolutions must divide the image size")
        ups.append(upsample_nearest(s, factor))
    return ad.concat(ups, axis=2)


def encode_observation(obs: CameraObservation, params: ModelParams) -> EncodedObservation:
    return EncodedObservation(obs.camera, encode_image(obs.image, params))


def _mlp_trunk(h, params, prefix, blocks):
    skips = []
    for i in range(blocks):
        r = ad.relu(ad.linear(ad.relu(h), params[f"{prefix}.block{i}.w1"], params[f"{prefix}.block{i}.b1"]))
        h = h + ad.linear(r, params[f"{prefix}.block{i}.w2"], params[f"{prefix}.block{i}.b2"])
        skips.append(h)
    return h, skips


def field_query(x, d, obs: EncodedObservation, params: ModelParams) -> FieldOutput:
    """Colour, density and hidden states at points ``x`` (P, 3) seen along ``d``.

    ``d`` is either one direction (3,) shared by all points or (P, 3).
    """
    cfg = params.config
    x = ad.as_tensor(x)
    d = ad.as_tensor(d)
    P = x.shape[0]
    gx = positional_encode(x, cfg.m_position)
    gd = positional_encode(d, cfg.m_direction)
    if d.ndim == 1:
        gd = ad.broadcast_to(gd.reshape(1, -1), (P, gd.shape[0]))
    uv = project(x, obs.camera.K, obs.camera.RT, min_depth=cfg.min_depth)
    feat = bilinear_sample(obs.features, uv)
    inp = ad.concat([gx, gd, feat], axis=1)
    h = ad.linear(inp, params["phi.in.w"], params["phi.in.b"])
    h, skips = _mlp_trunk(h, params, "phi", cfg.phi_blocks)
    trunk = ad.relu(h)
    out = ad.linear(trunk, params["phi.out.w"], params["phi.out.b"])
    color = ad.sigmoid(out[:, 0:3])
    density = ad.softplus(out[:, 3]) * np.asarray(cfg.density_scale, dtype=out.data.dtype)
    return FieldOutput(color, density, skips, trunk)


def grasp_head(fo: FieldOutput, params: ModelParams) -> Tensor:
    """Per-point grasp score from the core's trunk and block outputs, shape (P,)."""
    cfg = params.config
    z = ad.concat([fo.trunk] + list(fo.skips), axis=1)
    h = ad.linear(z, params["psi.in.w"], params["psi.in.b"])
    h, _ = _mlp_trunk(h, params, "psi", cfg.psi_blocks)
    return ad.linear(ad.relu(h), params["psi.out.w"], params["psi.out.b"])[:, 0]


def bundle_points(x, d, offsets) -> Tensor:
    """Points ``x + s·d`` for each offset ``s``; (N, 3) -> (N * len(offsets), 3)."""
    x = ad.as_tensor(x)
    d = np.asarray(d.data if isinstance(d, Tensor) else d, dtype=x.data.dtype)
    shifts = (np.asarray(offsets, dtype=x.data.dtype)[:, None] * d[None, :])[None]
    n = x.shape[0]
    return (x.reshape(n, 1, 3) + shifts).reshape(n * len(offsets), 3)


def grasp_theta(x, d, obs: EncodedObservation, params: ModelParams, head=grasp_head) -> Tensor:
    """Grasp score for candidates at ``x`` (N, 3) or (3,) approaching along ``d`` (3,).

    Evaluates the head at the four bundle points around each candidate and
    sums them. Returns shape (N,), or a scalar for a single candidate.
    """
    x = ad.as_tensor(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, 3)
    d_arr = np.asarray(d.data if isinstance(d, Tensor) else d, dtype=np.float64)
    if abs(np.linalg.norm(d_arr) - 1.0) > 1e-6:
        raise ValueError("grasp direction must be a unit vector")
    k = len(params.config.bundle_offsets)
    pts = bundle_points(x, d_arr, params.config.bundle_offsets)
    per_point = head(field_query(pts, d_arr.astype(x.data.dtype), obs, params), params)
    theta = per_point.reshape(x.shape[0], k).sum(axis=1)
    return theta.reshape(()) if single else theta


# ---------------------------------------------------------------------------
# Rendering


def volumetric_render(deltas, density, color, background):
    """Alpha-composite samples front to back.

    Args:
        deltas: (R, S) segment lengths.
        density: (R, S) non-negative densities.
        color: (R, S, 3) colours.
        background: RGB composited behind the last sample.

    Returns:
        ``(rgb (R, 3), opacity (R,))`` as Tensors.
    """
    density = ad.as_tensor(density)
    color = ad.as_tensor(color)
    dt = density.data.dtype
    sd = density * np.asarray(deltas, dtype=dt)
    trans = ad.exp(-ad.cumsum(sd, axis=1, exclusive=True))
    alpha = 1.0 - ad.exp(-sd)
    w = trans * alpha
    opacity = w.sum(axis=1)
    rgb = (w.reshape(w.shape + (1,)) * color).sum(axis=1)
    bg = np.asarray(background, dtype=dt).reshape(1, 3)
    rgb = rgb + (1.0 - opacity).reshape(-1, 1) * bg
    return rgb, opacity


def render_weights(deltas, density) -> tuple[np.ndarray, np.ndarray]:
    """Transmittance and compositing weights (plain arrays, for diagnostics)."""
    sd = np.asarray(density) * np.asarray(deltas)
    trans = np.exp(-(np.cumsum(sd, axis=1) - sd))
    return trans, trans * (1 - np.exp(-sd))


def render_rays(origins, dirs, obs: EncodedObservation, params: ModelParams, box, n_samples: int,
                mode: str = "uniform", rng=None):
    """Render rays through the field, sampling only inside ``box``.

    Rays that miss the box return the background with zero opacity.
    """
    cfg = params.config
    lo, hi = box
    near, far, hit = intersect_box(origins, dirs, lo, hi)
    R = len(origins)
    dt = obs.features.data.dtype
    bg = np.asarray(cfg.background, dtype=dt)
    idx = np.nonzero(hit)[0]
    if idx.size == 0:
        return Tensor(np.tile(bg, (R, 1))), Tensor(np.zeros(R))
    _, pos, deltas = sample_along_rays(origins[idx], dirs[idx], near[idx], far[idx], n_samples,
                                       mode, rng)
    S = n_samples
    pts = pos.reshape(-1, 3).astype(dt)
    dd = np.repeat(dirs[idx], S, axis=0).astype(dt)
    fo = field_query(Tensor(pts), Tensor(dd), obs, params)
    rgb, op = volumetric_render(deltas, fo.density.reshape(idx.size, S),
                                fo.color.reshape(idx.size, S, 3), cfg.background)
    if idx.size == R:
        return rgb, op
    miss = np.nonzero(~hit)[0]
    order = np.argsort(np.concatenate([idx, miss]), kind="stable")
    rgb_all = ad.concat([rgb, Tensor(np.tile(bg, (miss.size, 1)))], axis=0)[order]
    op_all = ad.concat([op, Tensor(np.zeros(miss.size))], axis=0)[order]
    return rgb_all, op_all


def render_view(obs: CameraObservation, target: Camera, params: ModelParams, box,
                n_samples: int = 32, chunk: int = 2048, return_opacity: bool = False):
    """Render the full image seen by ``target`` conditioned on ``obs``."""
    enc = encode_observation(obs, params)
    u, v = pixel_grid(target.K.width, target.K.height)
    origins, dirs = rays_for_pixels(u, v, target.K, target.RT)
    rgbs, ops = [], []
    for s in range(0, len(u), chunk):
        rgb, op = render_rays(origins[s:s + chunk], dirs[s:s + chunk], enc, params, box, n_samples)
        rgbs.append(rgb.data)
        ops.append(op.data)
    img = np.concatenate(rgbs).reshape(target.K.height, target.K.width, 3)
    if return_opacity:
        return img, np.concatenate(ops).reshape(target.K.height, target.K.width)
    return img
