"""Density+color voxel grid with differentiable volume rendering.

The field stores RAW values on a node-centered N^3 lattice spanning the
bounding box. Queries trilinearly interpolate the raw lattice and activate
afterwards (softplus for density, sigmoid for color), which keeps sigma >= 0
and colors in [0,1] for any parameter values while the optimizer works
unconstrained. Interpolate-then-activate also makes raw interpolation exactly
linear, so affine lattices reproduce affine functions.

Rendering is plain emission-absorption quadrature over stratified segments:
rays are clipped to the bbox, the clipped span is cut into equal segments,
and one jittered sample per segment is drawn from a counter RNG keyed by
(seed, ray key, segment). Keying by pixel rather than by iteration means a
ray's samples never change across training steps, which makes "re-fit frames
rendered from the field itself" an exact fixed point of distillation.

The whole render-then-MSE pipeline has a hand-written adjoint (reverse
cumulative sums through transmittance, bincount scatter onto the lattice), so
distillation needs no autograd.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.signal

from . import rng as crng
from .cameras import Camera, camera_ray_grid
from .diffusion import adam_init, adam_step
from .hdr import LdrImage

_S_JITTER = 211
_S_PICK = 223


class FieldError(ValueError):
    """Bad voxel-field construction, rendering, or fitting input."""


@dataclass
class VoxelField:
    resolution: int
    bbox: np.ndarray          # (2, 3) lo/hi corners, meters
    raw_density: np.ndarray   # (N, N, N), softplus-activated on sampling
    raw_color: np.ndarray     # (N, N, N, 3), sigmoid-activated on sampling
    background: np.ndarray    # (3,) in [0, 1]

    def __post_init__(self):
        n = self.resolution
        if n < 2:
            raise FieldError(f"resolution must be at least 2, got {n}")
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        if not (self.bbox[1] > self.bbox[0]).all():
            raise FieldError("bounding box is degenerate")
        self.raw_density = np.asarray(self.raw_density, dtype=np.float64)
        self.raw_color = np.asarray(self.raw_color, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.raw_density.shape != (n, n, n) or self.raw_color.shape != (n, n, n, 3):
            raise FieldError("lattice shapes do not match the resolution")
        if not (np.isfinite(self.raw_density).all() and np.isfinite(self.raw_color).all()):
            raise FieldError("lattice contains non-finite values")
        if (self.background < 0).any() or (self.background > 1).any():
            raise FieldError("background color outside [0, 1]")

    def copy(self) -> "VoxelField":
        return VoxelField(
            resolution=self.resolution, bbox=self.bbox.copy(),
            raw_density=self.raw_density.copy(), raw_color=self.raw_color.copy(),
            background=self.background.copy(),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"density": self.raw_density, "color": self.raw_color}


def make_field(
    resolution: int = 64,
    bbox=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
    background=(0.0, 0.0, 0.0),
    raw_density: float = -2.0,
    raw_color: float = 0.0,
) -> VoxelField:
    n = resolution
    return VoxelField(
        resolution=n, bbox=np.asarray(bbox, dtype=np.float64),
        raw_density=np.full((n, n, n), raw_density),
        raw_color=np.full((n, n, n, 3), raw_color),
        background=np.asarray(background, dtype=np.float64),
    )


@dataclass(frozen=True)
class RenderConfig:
    samples: int = 128
    near: float = 0.05
    far: float = 50.0
    background: str = "field"  # or "white" / "black", overriding the field's own
    seed: int = 0

    def __post_init__(self):
        if self.samples < 2:
            raise FieldError(f"need at least 2 samples per ray, got {self.samples}")
        if not (0.0 <= self.near < self.far):
            raise FieldError(f"need 0 <= near < far, got [{self.near}, {self.far}]")
        if self.background not in ("field", "white", "black"):
            raise FieldError(f"unknown background mode {self.background!r}")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _background_rgb(field: VoxelField, cfg: RenderConfig) -> np.ndarray:
    if cfg.background == "white":
        return np.ones(3)
    if cfg.background == "black":
        return np.zeros(3)
    return field.background


def _corner_setup(field: VoxelField, pts: np.ndarray):
    """Cell corner flat indices (P, 8) and trilinear weights (P, 8)."""
    n = field.resolution
    lo, hi = field.bbox
    g = (pts - lo) / (hi - lo) * (n - 1)
    g = np.clip(g, 0.0, n - 1)
    i0 = np.minimum(g.astype(np.int64), n - 2)
    f = g - i0
    wx, wy, wz = f[:, 0], f[:, 1], f[:, 2]
    base = (i0[:, 0] * n + i0[:, 1]) * n + i0[:, 2]
    corners = np.empty((pts.shape[0], 8), dtype=np.int64)
    weights = np.empty((pts.shape[0], 8))
    for c, (dx, dy, dz) in enumerate(
        [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)]
    ):
        corners[:, c] = base + (dx * n + dy) * n + dz
        weights[:, c] = (
            (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy) * (wz if dz else 1.0 - wz)
        )
    return corners, weights


def _packed_lattice(field: VoxelField) -> np.ndarray:
    """(N^3, 4) columns = raw density, raw r, g, b; one gather serves all four."""
    n3 = field.resolution ** 3
    packed = np.empty((n3, 4))
    packed[:, 0] = field.raw_density.reshape(-1)
    packed[:, 1:] = field.raw_color.reshape(-1, 3)
    return packed


def _interp_packed(packed: np.ndarray, corners: np.ndarray, weights: np.ndarray) -> np.ndarray:
    acc = weights[:, 0, None] * packed[corners[:, 0]]
    for k in range(1, 8):
        acc += weights[:, k, None] * packed[corners[:, k]]
    return acc


def sample_raw(field: VoxelField, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear raw (density, color) at world points inside the bbox."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    corners, weights = _corner_setup(field, pts)
    out = _interp_packed(_packed_lattice(field), corners, weights)
    return out[:, 0], out[:, 1:]


def sample_field(field: VoxelField, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activated (sigma, rgb) at world points."""
    d, c = sample_raw(field, pts)
    return _softplus(d), _sigmoid(c)


def resample_field(field: VoxelField, resolution: int) -> VoxelField:
    """Rebuild the lattice at a new resolution by trilinear raw interpolation.

    Interpolating raw values (not activated ones) keeps the refined field's
    appearance close to the coarse one, so a grow-the-grid training schedule
    can continue from where the coarse fit left off. Resampling at the same
    resolution is exact: nodes land on nodes.
    """
    n = resolution
    if n < 2:
        raise FieldError(f"resolution must be at least 2, got {n}")
    axes = [np.linspace(field.bbox[0][a], field.bbox[1][a], n) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    d, c = sample_raw(field, pts)
    return VoxelField(
        resolution=n, bbox=field.bbox.copy(),
        raw_density=d.reshape(n, n, n), raw_color=c.reshape(n, n, n, 3),
        background=field.background.copy(),
    )


def _clip_to_bbox(field: VoxelField, origins, dirs, cfg: RenderConfig):
    lo, hi = field.bbox
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - origins) / dirs
        t_hi = (hi - origins) / dirs
    # where dir component is 0 the slab test degenerates: inside -> (-inf, inf)
    near_ax = np.where(np.isnan(t_lo), -np.inf, np.minimum(t_lo, t_hi))
    far_ax = np.where(np.isnan(t_hi), np.inf, np.maximum(t_lo, t_hi))
    inside = (origins >= lo) & (origins <= hi)
    zero = dirs == 0.0
    near_ax = np.where(zero, np.where(inside, -np.inf, np.inf), near_ax)
    far_ax = np.where(zero, np.where(inside, np.inf, -np.inf), far_ax)
    t0 = np.maximum(near_ax.max(axis=1), cfg.near)
    t1 = np.minimum(far_ax.min(axis=1), cfg.far)
    return t0, t1


def _trace(field: VoxelField, origins, dirs, keys, cfg: RenderConfig):
    """Forward pass for a ray batch; returns rgb plus everything backward needs."""
    m = origins.shape[0]
    s = cfg.samples
    t0, t1 = _clip_to_bbox(field, origins, dirs, cfg)
    hit = t0 < t1
    t0 = np.where(hit, t0, 0.0)  # missed rays park at the origin, weight 0
    span = np.where(hit, t1 - t0, 0.0)
    delta = span / s  # equal segment width per ray

    jitter = crng.uniform(cfg.seed, _S_JITTER, np.asarray(keys)[:, None], np.arange(s))
    t = t0[:, None] + (np.arange(s) + jitter) * delta[:, None]
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]

    corners, weights = _corner_setup(field, pts.reshape(-1, 3))
    raw = _interp_packed(_packed_lattice(field), corners, weights)
    raw_d, raw_c = raw[:, 0], raw[:, 1:]
    sigma = _softplus(raw_d).reshape(m, s)
    color = _sigmoid(raw_c).reshape(m, s, 3)

    tau = sigma * delta[:, None]
    tau[~hit] = 0.0
    depth_in = np.cumsum(tau, axis=1) - tau  # exclusive prefix sum
    trans = np.exp(-depth_in)
    alpha = -np.expm1(-tau)
    w = trans * alpha
    t_final = np.exp(-(depth_in[:, -1] + tau[:, -1]))

    bg = _background_rgb(field, cfg)
    rgb = (w[..., None] * color).sum(axis=1) + t_final[:, None] * bg
    cache = {
        "corners": corners, "weights": weights, "raw_d": raw_d, "raw_c": raw_c,
        "sigma": sigma, "color": color, "tau": tau, "trans": trans, "alpha": alpha,
        "w": w, "t_final": t_final, "delta": delta, "hit": hit, "bg": bg,
        "m": m, "s": s,
    }
    return rgb, cache


def _backward(field: VoxelField, cache, drgb: np.ndarray) -> dict[str, np.ndarray]:
    """Adjoint of _trace: d(loss)/d(raw lattices) given d(loss)/d(rgb)."""
    m, s = cache["m"], cache["s"]
    w, color, trans, alpha, tau = cache["w"], cache["color"], cache["trans"], cache["alpha"], cache["tau"]
    t_final, delta, bg = cache["t_final"], cache["delta"], cache["bg"]

    dcolor = w[..., None] * drgb[:, None, :]
    dw_dot = (drgb[:, None, :] * color).sum(axis=2)
    dtf = drgb @ bg

    # d(loss)/d(tau_i) = dw_i * T_{i+1} - sum_{j>i} dw_j w_j - dtf * T_final
    contrib = dw_dot * w
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib  # strict suffix sum
    t_next = trans * (1.0 - alpha)
    dtau = dw_dot * t_next - suffix - dtf[:, None] * t_final[:, None]
    dtau[~cache["hit"]] = 0.0

    dsigma = dtau * delta[:, None]
    draw_d = (dsigma.reshape(-1) * _sigmoid(cache["raw_d"]))
    c_act = cache["color"].reshape(-1, 3)
    draw_c = dcolor.reshape(-1, 3) * c_act * (1.0 - c_act)

    n3 = field.resolution ** 3
    corners, weights = cache["corners"], cache["weights"]
    flat = corners.ravel()
    gd = np.bincount(flat, weights=(weights * draw_d[:, None]).ravel(), minlength=n3)
    gc = np.empty((n3, 3))
    for ch in range(3):
        gc[:, ch] = np.bincount(
            flat, weights=(weights * draw_c[:, ch, None]).ravel(), minlength=n3
        )
    n = field.resolution
    return {"density": gd.reshape(n, n, n), "color": gc.reshape(n, n, n, 3)}


def render_rays(field: VoxelField, origins, dirs, keys, cfg: RenderConfig) -> np.ndarray:
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    rgb, _ = _trace(field, origins, dirs, np.asarray(keys, dtype=np.int64), cfg)
    return rgb


def render_ray(field: VoxelField, origin, direction, cfg: RenderConfig, key: int = 0) -> np.ndarray:
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise FieldError("ray direction must be unit length")
    return render_rays(field, np.asarray(origin).reshape(1, 3), direction[None], [key], cfg)[0]


def render_view(field: VoxelField, camera: Camera, cfg: RenderConfig) -> LdrImage:
    """Render every valid fisheye pixel; invalid corners get the background."""
    origins, dirs, valid = camera_ray_grid(camera)
    h, w_ = camera.intrinsics.height, camera.intrinsics.width
    keys = np.flatnonzero(valid)
    rgb = np.broadcast_to(_background_rgb(field, cfg), (h * w_, 3)).copy()
    rgb[valid] = render_rays(field, origins[valid], dirs[valid], keys, cfg)
    return LdrImage(np.clip(rgb, 0.0, 1.0).reshape(h, w_, 3).astype(np.float32))


# --- distillation -----------------------------------------------------------------

def _ray_pool(frames: list[LdrImage], cams: list[Camera]):
    if not frames:
        raise FieldError("no frames to fit")
    if len(frames) != len(cams):
        raise FieldError(f"{len(frames)} frames vs {len(cams)} cameras")
    shape = frames[0].data.shape
    origins, dirs, targets, keys = [], [], [], []
    for img, camera in zip(frames, cams):
        if img.data.shape != shape:
            raise FieldError("frames disagree on size")
        o, d, valid = camera_ray_grid(camera)
        origins.append(o[valid])
        dirs.append(d[valid])
        targets.append(img.data.reshape(-1, 3)[valid].astype(np.float64))
        # keys are pixel indices, not frame-dependent, so jitter is stable
        keys.append(np.flatnonzero(valid))
    return (
        np.concatenate(origins), np.concatenate(dirs),
        np.concatenate(targets), np.concatenate(keys),
    )


def distill(
    field: VoxelField,
    frames: list[LdrImage],
    cams: list[Camera],
    iters: int = 2000,
    lr: float = 1e-3,
    rays_per_iter: int = 8192,
    cfg: RenderConfig | None = None,
    seed: int = 0,
) -> tuple[VoxelField, list[float]]:
    """Fit the field to frames by Adam on random ray batches; returns (field, loss log)."""
    cfg = cfg or RenderConfig()
    origins, dirs, targets, keys = _ray_pool(frames, cams)
    pool = origins.shape[0]
    out = field.copy()
    params = out.params()
    state = adam_init(params)
    losses: list[float] = []
    for k in range(1, iters + 1):
        pick = crng.uniform(seed, _S_PICK, k, np.arange(rays_per_iter))
        idx = (pick * pool).astype(np.int64)
        rgb, cache = _trace(out, origins[idx], dirs[idx], keys[idx], cfg)
        # quantize predictions to the frames' float32 grid: refitting frames
        # rendered from this very field then has exactly zero loss, instead of
        # Adam amplifying 1e-8 quantization residue into parameter drift
        r = rgb.astype(np.float32).astype(np.float64) - targets[idx]
        loss = float((r * r).mean())
        if not math.isfinite(loss):
            raise FieldError(f"non-finite loss at iteration {k}")
        losses.append(loss)
        grads = _backward(out, cache, (2.0 / r.size) * r)
        params = adam_step(state, params, grads, lr)
        out.raw_density = params["density"]
        out.raw_color = params["color"]
    return out, losses


# --- metrics ----------------------------------------------------------------------

def psnr(a: LdrImage, b: LdrImage) -> float:
    """Peak signal-to-noise in dB on [0,1] data, capped at 99."""
    if a.data.shape != b.data.shape:
        raise FieldError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
    mse = float(((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2).mean())
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * math.log10(1.0 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: LdrImage, b: LdrImage) -> float:
    """Mean structural similarity, 11x11 Gaussian window (sigma 1.5), valid positions."""
    if a.data.shape != b.data.shape:
        raise FieldError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
    if a.data.shape[0] < 11 or a.data.shape[1] < 11:
        raise FieldError("images smaller than the 11x11 SSIM window")
    kern = _gaussian_kernel()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(3):
        x = a.data[:, :, ch].astype(np.float64)
        y = b.data[:, :, ch].astype(np.float64)
        mx = scipy.signal.convolve2d(x, kern, mode="valid")
        my = scipy.signal.convolve2d(y, kern, mode="valid")
        mxx = scipy.signal.convolve2d(x * x, kern, mode="valid")
        myy = scipy.signal.convolve2d(y * y, kern, mode="valid")
        mxy = scipy.signal.convolve2d(x * y, kern, mode="valid")
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        score = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(score.mean())
    return float(np.mean(vals))


# --- checkpoint I/O -----------------------------------------------------------------
#
# Layout (little-endian), so non-Python loaders can read fields back:
#   bytes 0..3   magic b"VXF1"
#   bytes 4..7   resolution N               uint32
#   bytes 8..55  bbox lo.xyz hi.xyz         6 x float64
#   bytes 56..79 background rgb             3 x float64
#   then         raw density N^3            float64, C order
#   then         raw color   N^3 x 3        float64, C order

_MAGIC = b"VXF1"


def save_field(path: Path, field: VoxelField) -> None:
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", field.resolution))
        fh.write(field.bbox.astype("<f8").tobytes())
        fh.write(field.background.astype("<f8").tobytes())
        fh.write(field.raw_density.astype("<f8").tobytes())
        fh.write(field.raw_color.astype("<f8").tobytes())


def load_field(path: Path) -> VoxelField:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FieldError(f"bad checkpoint magic {data[:4]!r}")
    (n,) = struct.unpack("<I", data[4:8])
    want = n ** 3
    if len(data) != 80 + want * 8 + want * 24:
        raise FieldError("checkpoint length does not match its header")
    off = 8
    bbox = np.frombuffer(data, dtype="<f8", count=6, offset=off).reshape(2, 3)
    off += 48
    background = np.frombuffer(data, dtype="<f8", count=3, offset=off)
    off += 24
    dens = np.frombuffer(data, dtype="<f8", count=want, offset=off).reshape(n, n, n)
    off += want * 8
    color = np.frombuffer(data, dtype="<f8", count=want * 3, offset=off).reshape(n, n, n, 3)
    return VoxelField(
        resolution=int(n), bbox=bbox.copy(), raw_density=dens.copy(),
        raw_color=color.copy(), background=background.copy(),
    )
