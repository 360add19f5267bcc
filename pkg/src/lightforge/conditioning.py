"""Relighting condition signals.

Four pieces live here. The condition video M tells the generator, per pixel,
what each visible light should look like after the edit; every pixel that is
not an edited light carries the sentinel (-1,-1,-1), meaning "leave this
alone". Light annotations travel the other way: picked pixels are lifted to
3D with the depth map and splatted back into every camera of a rig. The sun
intensity scalar is lifted with Fourier features and a small MLP into an
embedding vector. Finally, the three aligned videos (noisy target, input,
condition) are packed into one token sequence, either by concatenating along
time with disjoint rotary-position offsets, or channelwise as the ablation
arm.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import (
    Camera,
    CameraRig,
    OutsideFovError,
    OutsideImageCircleError,
    project,
    unproject,
)
from .hdr import read_pfm_array, write_pfm_array
from .toyscene import DepthMap

SENTINEL = (-1.0, -1.0, -1.0)

STREAM_TARGET = 0
STREAM_INPUT = 1
STREAM_CONDITION = 2
STREAM_FUSED = 3
STREAM_NAMES = ("target", "input", "condition", "fused")


class ConditionError(ValueError):
    """Condition inputs violate a structural requirement."""


@dataclass
class ConditionVideo:
    """(T, H, W, 3) float frames; pixels are either edits or the sentinel.

    A pixel is valid iff it is exactly (-1,-1,-1) or componentwise >= 0;
    anything else would be ambiguous between "edit to this color" and
    "do not edit".
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ConditionError(f"condition video must be (T, H, W, 3), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ConditionError("condition video contains non-finite values")
        negative = (arr < 0).any(axis=3)
        sentinel = (arr == -1.0).all(axis=3)
        mixed = negative & ~sentinel
        if mixed.any():
            t, y, x = np.argwhere(mixed)[0]
            raise ConditionError(
                f"pixel ({t},{y},{x}) = {arr[t, y, x].tolist()} is neither an "
                "edit color nor the (-1,-1,-1) sentinel"
            )
        self.data = arr

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    def sentinel_mask(self) -> np.ndarray:
        return (self.data == -1.0).all(axis=3)


def build_condition_video(
    visibility_masks: dict[int, np.ndarray],
    edits: dict[int, object],
    frames: int,
) -> ConditionVideo:
    """Paint each edited light's target color over its visible pixels.

    `visibility_masks` maps light id to a (T, H, W) boolean stack; masks must
    be pairwise disjoint per frame. `edits` maps light id to an RGB triple in
    [0, 1] (None is shorthand for switching the light off, i.e. (0, 0, 0)).
    Unedited lights and all non-light pixels stay at the sentinel.
    """
    if not visibility_masks:
        raise ConditionError("need at least one visibility mask to size the video")
    shape = None
    for lid, mask in visibility_masks.items():
        m = np.asarray(mask)
        if m.dtype != bool or m.ndim != 3:
            raise ConditionError(f"mask for light {lid} must be a (T, H, W) bool array")
        if m.shape[0] != frames:
            raise ConditionError(
                f"mask for light {lid} has {m.shape[0]} frames, expected {frames}"
            )
        if shape is None:
            shape = m.shape
        elif m.shape != shape:
            raise ConditionError("visibility masks disagree on video shape")
    overlap = np.zeros(shape, dtype=np.int32)
    for mask in visibility_masks.values():
        overlap += np.asarray(mask)
    if (overlap > 1).any():
        raise ConditionError("visibility masks overlap; each pixel may show one light")

    out = np.full(shape + (3,), -1.0, dtype=np.float32)
    for lid in sorted(edits):
        if lid not in visibility_masks:
            raise ConditionError(f"edit for light {lid} has no visibility mask")
        color = edits[lid]
        rgb = np.zeros(3) if color is None else np.asarray(color, dtype=np.float64).reshape(3)
        if not np.isfinite(rgb).all() or (rgb < 0).any() or (rgb > 1).any():
            raise ConditionError(f"edit color for light {lid} must lie in [0, 1]^3")
        out[visibility_masks[lid]] = rgb.astype(np.float32)
    return ConditionVideo(out)


# --- 2D annotations <-> 3D --------------------------------------------------

def backproject_annotations(
    pixels: np.ndarray, depth: DepthMap, camera: Camera
) -> np.ndarray:
    """Lift selected (row, col) pixels to world points via the depth map."""
    sel = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if sel.size == 0:
        return np.zeros((0, 3))
    h, w = depth.data.shape
    if (sel[:, 0] < 0).any() or (sel[:, 0] >= h).any() or (sel[:, 1] < 0).any() or (sel[:, 1] >= w).any():
        raise ConditionError("annotation pixel outside the image")
    d = depth.data[sel[:, 0], sel[:, 1]]
    if not np.isfinite(d).all():
        bad = sel[~np.isfinite(d)][0]
        raise ConditionError(
            f"pixel ({bad[0]},{bad[1]}) has no finite depth; cannot back-project"
        )
    centers = np.stack([sel[:, 1] + 0.5, sel[:, 0] + 0.5], axis=-1)
    dirs_cam = unproject(camera.intrinsics, centers)
    dirs_world = dirs_cam @ camera.pose.rotation.T
    return camera.pose.position + d[:, None] * dirs_world


def render_annotation_masks(
    points: np.ndarray,
    rig: CameraRig,
    radius: int = 3,
    depths: list[DepthMap] | None = None,
    occlusion_tol: float = 0.01,
) -> np.ndarray:
    """Splat world points into every rig camera as (n_cams, H, W) masks.

    Each point claims a disc of `radius` pixels around its projection, kept
    only where the camera's depth map shows nothing nearer than the point
    (tolerance `occlusion_tol` relative to depth). `depths` must align with
    the rig's cameras; pass None to skip occlusion culling.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    intr = rig.intrinsics
    h, w = intr.height, intr.width
    masks = np.zeros((len(rig.poses), h, w), dtype=bool)
    if pts.shape[0] == 0:
        return masks
    if depths is not None and len(depths) != len(rig.poses):
        raise ConditionError("need one depth map per rig camera")
    offsets = [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy * dy + dx * dx <= radius * radius
    ]
    for k in range(len(rig.poses)):
        camera = rig.camera(k)
        rel = pts - camera.pose.position
        dist = np.linalg.norm(rel, axis=1)
        dmap = depths[k].data if depths is not None else None
        for i in range(pts.shape[0]):
            if dist[i] < 1e-9:
                continue
            cam_dir = camera.pose.rotation.T @ (rel[i] / dist[i])
            try:
                px = project(intr, cam_dir)
            except (OutsideFovError, OutsideImageCircleError):
                continue
            row, col = int(math.floor(px[1])), int(math.floor(px[0]))
            for dy, dx in offsets:
                r, c = row + dy, col + dx
                if not (0 <= r < h and 0 <= c < w):
                    continue
                if dmap is not None:
                    d = dmap[r, c]
                    if np.isnan(d):
                        continue
                    if d < dist[i] * (1.0 - occlusion_tol):
                        continue
                masks[k, r, c] = True
    return masks


# --- sun embedding ------------------------------------------------------------

def fourier_features(s: float, k: int = 8) -> np.ndarray:
    """[sin(2^j pi s), cos(2^j pi s)] pairs for j = 0..k-1, interleaved."""
    if not np.isfinite(s):
        raise ConditionError(f"scalar {s} is not finite")
    if k < 1:
        raise ConditionError("need at least one frequency band")
    ang = (2.0 ** np.arange(k)) * math.pi * float(s)
    out = np.empty(2 * k)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


def fourier_features_grad(s: float, k: int = 8) -> np.ndarray:
    """d/ds of fourier_features, same layout."""
    scale = (2.0 ** np.arange(k)) * math.pi
    ang = scale * float(s)
    out = np.empty(2 * k)
    out[0::2] = scale * np.cos(ang)
    out[1::2] = -scale * np.sin(ang)
    return out


@dataclass(frozen=True)
class SunEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.isfinite(v).all():
            raise ConditionError("sun embedding must be finite")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass(frozen=True)
class SunMlp:
    """Two-layer tanh MLP lifting Fourier features to the embedding."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        hidden, in_dim = self.w1.shape
        out, hidden2 = self.w2.shape
        if self.b1.shape != (hidden,) or hidden2 != hidden or self.b2.shape != (out,):
            raise ConditionError(
                f"inconsistent MLP shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )
        if in_dim % 2 != 0:
            raise ConditionError("MLP input must pair sines with cosines")

    @property
    def bands(self) -> int:
        return self.w1.shape[1] // 2

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]


def init_sun_mlp(seed: int = 0, k: int = 8, hidden: int = 64, out: int = 64) -> SunMlp:
    g = np.random.default_rng(seed)
    w1 = g.normal(0.0, 1.0 / math.sqrt(2 * k), size=(hidden, 2 * k))
    w2 = g.normal(0.0, 1.0 / math.sqrt(hidden), size=(out, hidden))
    return SunMlp(w1=w1, b1=np.zeros(hidden), w2=w2, b2=np.zeros(out))


def sun_mlp(ff: np.ndarray, mlp: SunMlp) -> SunEmbedding:
    ff = np.asarray(ff, dtype=np.float64).reshape(-1)
    if ff.shape[0] != mlp.w1.shape[1]:
        raise ConditionError(
            f"feature length {ff.shape[0]} does not match MLP input {mlp.w1.shape[1]}"
        )
    hidden = np.tanh(mlp.w1 @ ff + mlp.b1)
    return SunEmbedding(mlp.w2 @ hidden + mlp.b2)


def sun_embedding(s: float, mlp: SunMlp) -> SunEmbedding:
    return sun_mlp(fourier_features(s, mlp.bands), mlp)


def sun_embedding_grad(s: float, mlp: SunMlp) -> np.ndarray:
    """Analytic d(embedding)/ds, shape (out_dim,)."""
    ff = fourier_features(s, mlp.bands)
    dff = fourier_features_grad(s, mlp.bands)
    pre = mlp.w1 @ ff + mlp.b1
    gate = 1.0 - np.tanh(pre) ** 2
    return mlp.w2 @ (gate * (mlp.w1 @ dff))


def exposure_embedding(exposure: float, mlp: SunMlp) -> SunEmbedding:
    """Experimental: lift an exposure scalar the same way as the sun intensity.

    Exposure is multiplicative, so it enters through log2 to keep halving and
    doubling symmetric around 1.0. Nothing downstream consumes this yet.
    """
    if not np.isfinite(exposure) or exposure <= 0:
        raise ConditionError(f"exposure must be positive and finite, got {exposure}")
    return sun_embedding(math.log2(exposure), mlp)


# --- rotary positions -----------------------------------------------------------

@dataclass(frozen=True)
class RopeConfig:
    """Axial rotary encoding: channel pairs split across (t, h, w).

    Pair j of axis a rotates by angle position[a] * base^(-j / pairs[a]).
    """

    dim: int
    base: float = 10000.0
    pairs: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.dim % 2 != 0:
            raise ConditionError(f"feature dim {self.dim} must be even")
        total = self.dim // 2
        if self.pairs is None:
            third = total // 3
            object.__setattr__(self, "pairs", (total - 2 * third, third, third))
        if sum(self.pairs) != total or any(p < 0 for p in self.pairs):
            raise ConditionError(f"pair split {self.pairs} must sum to {total}")

    def pair_angles(self, positions: np.ndarray) -> np.ndarray:
        """(..., 3) integer positions -> (..., dim/2) rotation angles."""
        pos = np.asarray(positions, dtype=np.float64)
        blocks = []
        for axis in range(3):
            n = self.pairs[axis]
            if n == 0:
                continue
            freqs = self.base ** (-np.arange(n) / n)
            blocks.append(pos[..., axis, None] * freqs)
        return np.concatenate(blocks, axis=-1)


def rope_apply(vec: np.ndarray, position: np.ndarray, config: RopeConfig) -> np.ndarray:
    """Rotate channel pairs of `vec` by position-dependent angles."""
    v = np.asarray(vec, dtype=np.float64)
    if v.shape[-1] != config.dim:
        raise ConditionError(f"feature dim {v.shape[-1]} does not match config {config.dim}")
    ang = config.pair_angles(position)
    cos = np.cos(ang)
    sin = np.sin(ang)
    x1 = v[..., 0::2]
    x2 = v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


# --- token packing ----------------------------------------------------------------

@dataclass
class TokenSequence:
    """Struct-of-arrays token list: features, (t, h, w) positions, stream tags."""

    features: np.ndarray
    positions: np.ndarray
    streams: np.ndarray
    grid: tuple[int, int, int]

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.streams = np.asarray(self.streams, dtype=np.int8)
        n = self.features.shape[0]
        if self.positions.shape != (n, 3) or self.streams.shape != (n,):
            raise ConditionError("features, positions, and streams disagree on length")
        key = np.concatenate([self.streams[:, None].astype(np.int64), self.positions], axis=1)
        if np.unique(key, axis=0).shape[0] != n:
            raise ConditionError("duplicate (stream, position) token")

    def __len__(self) -> int:
        return self.features.shape[0]


def _check_grids(*videos: np.ndarray) -> tuple[int, int, int]:
    shapes = {v.shape[:3] for v in videos}
    if len(shapes) != 1:
        raise ConditionError(f"videos disagree on (T, H, W): {sorted(shapes)}")
    for v in videos:
        if v.ndim != 4:
            raise ConditionError("videos must be (T, H, W, C)")
    return videos[0].shape[:3]


def _grid_positions(t: int, h: int, w: int) -> np.ndarray:
    tt, hh, ww = np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij")
    return np.stack([tt.ravel(), hh.ravel(), ww.ravel()], axis=1).astype(np.int64)


def pack_temporal(
    target: np.ndarray, input_video: np.ndarray, condition: np.ndarray
) -> TokenSequence:
    """Concatenate the three videos along time with disjoint offsets.

    Target tokens keep times [0, T), input tokens shift to [T, 2T), condition
    tokens to [2T, 3T); spatial positions are shared. Rotary encodings then
    see each video at its own temporal location.
    """
    t, h, w = _check_grids(target, input_video, condition)
    channels = {target.shape[3], input_video.shape[3], condition.shape[3]}
    if len(channels) != 1:
        raise ConditionError("temporal packing needs equal channel counts")
    base = _grid_positions(t, h, w)
    feats, poss, streams = [], [], []
    for tag, video in ((STREAM_TARGET, target), (STREAM_INPUT, input_video), (STREAM_CONDITION, condition)):
        pos = base.copy()
        pos[:, 0] += tag * t
        feats.append(video.reshape(-1, video.shape[3]))
        poss.append(pos)
        streams.append(np.full(base.shape[0], tag, dtype=np.int8))
    return TokenSequence(
        features=np.concatenate(feats, axis=0),
        positions=np.concatenate(poss, axis=0),
        streams=np.concatenate(streams, axis=0),
        grid=(t, h, w),
    )


def unpack_temporal(seq: TokenSequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Recover the three videos from a temporally packed sequence, bit-exact."""
    t, h, w = seq.grid
    n = t * h * w
    if len(seq) != 3 * n:
        raise ConditionError(f"sequence length {len(seq)} is not 3*T*H*W = {3 * n}")
    out = []
    c = seq.features.shape[1]
    for tag in (STREAM_TARGET, STREAM_INPUT, STREAM_CONDITION):
        sel = seq.streams == tag
        if sel.sum() != n:
            raise ConditionError(f"stream {STREAM_NAMES[tag]} has {sel.sum()} tokens, wanted {n}")
        pos = seq.positions[sel].copy()
        pos[:, 0] -= tag * t
        if (pos < 0).any() or (pos[:, 0] >= t).any() or (pos[:, 1] >= h).any() or (pos[:, 2] >= w).any():
            raise ConditionError(f"stream {STREAM_NAMES[tag]} positions fall outside its slot")
        video = np.empty((t, h, w, c), dtype=seq.features.dtype)
        video[pos[:, 0], pos[:, 1], pos[:, 2]] = seq.features[sel]
        out.append(video)
    return tuple(out)


def pack_channelwise(
    target: np.ndarray, input_video: np.ndarray, condition: np.ndarray
) -> TokenSequence:
    """Ablation arm: one token per grid cell, features stacked channelwise."""
    t, h, w = _check_grids(target, input_video, condition)
    feats = np.concatenate(
        [
            target.reshape(-1, target.shape[3]),
            input_video.reshape(-1, input_video.shape[3]),
            condition.reshape(-1, condition.shape[3]),
        ],
        axis=1,
    )
    return TokenSequence(
        features=feats,
        positions=_grid_positions(t, h, w),
        streams=np.full(t * h * w, STREAM_FUSED, dtype=np.int8),
        grid=(t, h, w),
    )


# --- storage -----------------------------------------------------------------------

def save_condition_video(directory: Path, video: ConditionVideo) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(video.frames):
        name = f"cond_{i:04d}.pfm"
        (directory / name).write_bytes(write_pfm_array(video.data[i]))
        files.append(name)
    manifest = {"frames": video.frames, "files": files}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_condition_video(directory: Path) -> ConditionVideo:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    frames = [read_pfm_array((directory / name).read_bytes()) for name in manifest["files"]]
    return ConditionVideo(np.stack(frames, axis=0))
