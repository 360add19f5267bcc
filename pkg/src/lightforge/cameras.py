"""Equisolid fisheye camera model and elliptical capture rigs.

Camera frame follows the OpenCV convention: +x right, +y down, +z forward
(the optical axis). The equisolid radial law maps the angle theta from the
optical axis to an image-plane radius r = 2 f sin(theta / 2); pixel (u, v)
has +u right and +v down with the principal point at the image center.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])


class OutsideFovError(ValueError):
    """Direction lies beyond the lens field of view."""


class OutsideImageCircleError(ValueError):
    """Pixel lies outside the lens image circle."""


@dataclass(frozen=True)
class FisheyeIntrinsics:
    width: int
    height: int
    focal: float  # pixels
    fov_deg: float = 180.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not (0.0 < self.fov_deg <= 180.0):
            raise ValueError("fov must be in (0, 180] degrees")
        if self.image_circle_radius > min(self.width, self.height) / 2 + 1e-9:
            raise ValueError(
                f"image circle radius {self.image_circle_radius:.3f} px exceeds "
                f"half the smaller image dimension"
            )

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.height / 2.0])

    @property
    def image_circle_radius(self) -> float:
        return 2.0 * self.focal * math.sin(math.radians(self.fov_deg) / 4.0)


def fisheye_for_resolution(width: int, height: int, fov_deg: float = 180.0) -> FisheyeIntrinsics:
    """Intrinsics whose image circle exactly fills the smaller dimension."""
    focal = (min(width, height) / 2.0) / (2.0 * math.sin(math.radians(fov_deg) / 4.0))
    return FisheyeIntrinsics(width=width, height=height, focal=focal, fov_deg=fov_deg)


def project(intr: FisheyeIntrinsics, dirs: np.ndarray) -> np.ndarray:
    """Map unit camera-frame directions (..., 3) to pixel coordinates (..., 2).

    Raises OutsideFovError if any direction exceeds half the field of view.
    """
    d = np.asarray(dirs, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    if (theta > math.radians(intr.fov_deg) / 2.0 + 1e-12).any():
        raise OutsideFovError(
            f"direction at {np.degrees(theta.max()):.3f} deg exceeds fov/2 = {intr.fov_deg / 2:.3f} deg"
        )
    r = 2.0 * intr.focal * np.sin(theta / 2.0)
    planar_norm = np.hypot(d[..., 0], d[..., 1])
    safe = np.maximum(planar_norm, 1e-300)
    offset = r[..., None] * (d[..., :2] / safe[..., None])
    offset = np.where(planar_norm[..., None] > 0, offset, 0.0)
    return intr.principal_point + offset


def unproject(intr: FisheyeIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Map pixel coordinates (..., 2) to unit camera-frame directions (..., 3).

    Raises OutsideImageCircleError if any pixel falls outside the circle.
    """
    p = np.asarray(pixels, dtype=np.float64)
    offset = p - intr.principal_point
    r = np.hypot(offset[..., 0], offset[..., 1])
    rmax = intr.image_circle_radius
    if (r > rmax * (1 + 1e-9) + 1e-9).any():
        raise OutsideImageCircleError(
            f"pixel radius {r.max():.6f} px beyond image circle {rmax:.6f} px"
        )
    theta = 2.0 * np.arcsin(np.clip(r / (2.0 * intr.focal), 0.0, 1.0))
    safe = np.maximum(r, 1e-300)
    sin_t = np.sin(theta)
    out = np.empty(p.shape[:-1] + (3,))
    out[..., 0] = sin_t * offset[..., 0] / safe
    out[..., 1] = sin_t * offset[..., 1] / safe
    out[..., 2] = np.cos(theta)
    center = r == 0
    if center.any():
        out[center] = (0.0, 0.0, 1.0)
    return out


@dataclass(frozen=True)
class CameraPose:
    """Rigid camera-to-world transform."""

    position: np.ndarray  # (3,) meters
    rotation: np.ndarray  # (3, 3) orthonormal, det +1, camera-to-world

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not (np.isfinite(pos).all() and np.isfinite(rot).all()):
            raise ValueError("pose contains non-finite values")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if np.linalg.det(rot) < 0:
            raise ValueError("rotation has negative determinant")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)


def look_at_pose(position: np.ndarray, target: np.ndarray, up: np.ndarray = WORLD_UP) -> CameraPose:
    """Pose whose optical axis points from position to target, y-down frame."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("look target coincides with camera position")
    forward = forward / norm
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ValueError("look direction is parallel to the up vector")
    right = right / rnorm
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    # Re-orthonormalize to keep the 1e-9 invariant after float round-off.
    u, _, vt = np.linalg.svd(rot)
    return CameraPose(position=position, rotation=u @ vt)


@dataclass(frozen=True)
class Camera:
    intrinsics: FisheyeIntrinsics
    pose: CameraPose


@dataclass(frozen=True)
class CameraRig:
    intrinsics: FisheyeIntrinsics
    poses: tuple[CameraPose, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.poses) < 1:
            raise ValueError("rig needs at least one pose")
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    def camera(self, k: int) -> Camera:
        return Camera(self.intrinsics, self.poses[k])


def make_elliptical_rig(
    center: np.ndarray,
    semi_axis_a: float,
    semi_axis_b: float,
    height: float,
    intrinsics: FisheyeIntrinsics,
    n: int = 90,
    look: str = "outward",
) -> CameraRig:
    """n cameras evenly spaced in parameter angle on an ellipse.

    Position k sits at center + (a cos phi_k, b sin phi_k, height) with
    phi_k = 2 pi k / n. The optical axis points radially away from the
    ellipse center in the horizontal plane (`look="inward"` flips it).
    """
    if semi_axis_a <= 0 or semi_axis_b <= 0:
        raise ValueError("ellipse semi-axes must be positive")
    if n < 1:
        raise ValueError("rig needs at least one camera")
    if look not in ("outward", "inward"):
        raise ValueError(f"unknown look mode {look!r}")
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for k in range(n):
        phi = 2.0 * math.pi * k / n
        pos = center + np.array(
            [semi_axis_a * math.cos(phi), semi_axis_b * math.sin(phi), height]
        )
        radial = np.array([pos[0] - center[0], pos[1] - center[1], 0.0])
        radial /= np.linalg.norm(radial)
        if look == "inward":
            radial = -radial
        poses.append(look_at_pose(pos, pos + radial))
    meta = {
        "kind": "ellipse",
        "center": center.tolist(),
        "semi_axis_a": float(semi_axis_a),
        "semi_axis_b": float(semi_axis_b),
        "height": float(height),
        "n": int(n),
        "look": look,
    }
    return CameraRig(intrinsics=intrinsics, poses=tuple(poses), meta=meta)


def pixel_ray(
    intr: FisheyeIntrinsics, pose: CameraPose, pixel: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """World-space (origin, unit direction) of the ray through `pixel`."""
    direction = pose.rotation @ unproject(intr, pixel)
    return pose.position.copy(), direction


def camera_ray_grid(camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rays through every pixel center.

    Returns (origins (H*W, 3), world dirs (H*W, 3), valid (H*W,)); pixels
    outside the image circle are flagged invalid and given a dummy axis ray.
    """
    intr = camera.intrinsics
    xs = np.arange(intr.width) + 0.5
    ys = np.arange(intr.height) + 0.5
    u, v = np.meshgrid(xs, ys)
    pix = np.stack([u.ravel(), v.ravel()], axis=-1)
    offset = pix - intr.principal_point
    r = np.hypot(offset[:, 0], offset[:, 1])
    valid = r <= intr.image_circle_radius * (1 + 1e-9) + 1e-9
    safe_pix = np.where(valid[:, None], pix, intr.principal_point)
    dirs_cam = unproject(intr, safe_pix)
    dirs_world = dirs_cam @ camera.pose.rotation.T
    origins = np.broadcast_to(camera.pose.position, dirs_world.shape).copy()
    return origins, dirs_world, valid


# --- JSON interchange -------------------------------------------------------

def intrinsics_to_dict(intr: FisheyeIntrinsics) -> dict:
    return {
        "model": "equisolid",
        "width": intr.width,
        "height": intr.height,
        "focal": intr.focal,
        "fov_deg": intr.fov_deg,
    }


def intrinsics_from_dict(d: dict) -> FisheyeIntrinsics:
    if d.get("model", "equisolid") != "equisolid":
        raise ValueError(f"unsupported camera model {d.get('model')!r}")
    return FisheyeIntrinsics(
        width=int(d["width"]), height=int(d["height"]),
        focal=float(d["focal"]), fov_deg=float(d.get("fov_deg", 180.0)),
    )


def rig_to_json(rig: CameraRig) -> str:
    doc = {
        "intrinsics": intrinsics_to_dict(rig.intrinsics),
        "meta": rig.meta,
        "poses": [
            {"position": p.position.tolist(), "rotation": p.rotation.reshape(9).tolist()}
            for p in rig.poses
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def rig_from_json(text: str) -> CameraRig:
    doc = json.loads(text)
    intr = intrinsics_from_dict(doc["intrinsics"])
    poses = tuple(
        CameraPose(
            position=np.array(p["position"]),
            rotation=np.array(p["rotation"]).reshape(3, 3),
        )
        for p in doc["poses"]
    )
    return CameraRig(intrinsics=intr, poses=poses, meta=doc.get("meta", {}))
