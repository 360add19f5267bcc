"""One-light-at-a-time bases and linear relighting composites.

A LightBasis holds L+1 HDR renders of the same view: index 0 is the exterior
(sun) slot, indices 1..L the interior lights. Any target lighting is a linear
combination of the basis scaled by per-light colors, a sun scalar, and an
exposure, tone mapped to display sRGB.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hdr import HdrImage, LdrImage, blackbody_rgb, hsv_to_rgb, read_pfm, tone_map_srgb, write_pfm

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])

EXPOSURE_MIN = 1e-3
EXPOSURE_MAX = 1e3

_MAX_REJECTION_ATTEMPTS = 64


class LightingError(ValueError):
    """Invalid lighting spec or basis mismatch."""


@dataclass
class LightingSpec:
    """A relighting request: per-light target colors, sun scalar, exposure.

    `lights` maps interior light id (>= 1) to a linear RGB color in [0, 1]^3,
    or None for OFF; ids absent from the map are OFF as well. `identity`
    marks a no-edit request that callers resolve to the scene's input
    lighting. `color_mode` records which color-sampling branch produced the
    spec; it is diagnostic only and never serialized.
    """

    lights: dict[int, np.ndarray | None] = field(default_factory=dict)
    sun: float = 0.0
    exposure: float = 1.0
    identity: bool = False
    color_mode: str | None = None

    def __post_init__(self):
        clean: dict[int, np.ndarray | None] = {}
        for key, value in self.lights.items():
            lid = int(key)
            if lid < 1:
                raise LightingError(f"interior light id {lid} must be >= 1")
            if value is None:
                clean[lid] = None
                continue
            color = np.asarray(value, dtype=np.float64).reshape(3)
            if not np.isfinite(color).all():
                raise LightingError(f"light {lid} color is not finite")
            if (color < 0).any() or (color > 1).any():
                raise LightingError(f"light {lid} color {color.tolist()} outside [0, 1]^3")
            clean[lid] = color
        self.lights = clean
        if not np.isfinite(self.sun) or self.sun < 0:
            raise LightingError(f"sun intensity {self.sun} must be finite and >= 0")
        if not np.isfinite(self.exposure) or self.exposure <= 0:
            raise LightingError(f"exposure {self.exposure} must be finite and > 0")

    def on_ids(self) -> list[int]:
        return sorted(lid for lid, c in self.lights.items() if c is not None)

    def is_all_off(self) -> bool:
        return self.sun == 0.0 and not self.on_ids()


def validate_spec(spec: LightingSpec, num_lights: int | None = None) -> None:
    """Check id range and the at-least-one-source-on rule (identity exempt)."""
    if num_lights is not None:
        for lid in spec.lights:
            if lid > num_lights:
                raise LightingError(f"unknown light id {lid}: scene has 1..{num_lights}")
    if not spec.identity and spec.is_all_off():
        raise LightingError("at least one light must be on (or mark the spec as identity)")


def spec_to_dict(spec: LightingSpec) -> dict:
    doc: dict = {
        "lights": {
            str(lid): (None if c is None else [float(v) for v in c])
            for lid, c in sorted(spec.lights.items())
        },
        "sun": float(spec.sun),
        "exposure": float(spec.exposure),
    }
    if spec.identity:
        doc["identity"] = True
    return doc


def spec_to_json(spec: LightingSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2, sort_keys=True)


def spec_from_dict(doc: dict) -> LightingSpec:
    if not isinstance(doc, dict):
        raise LightingError("lighting spec must be a JSON object")
    lights = doc.get("lights", {})
    if not isinstance(lights, dict):
        raise LightingError("'lights' must be a map of id -> color or null")
    try:
        parsed = {int(k): v for k, v in lights.items()}
    except ValueError as exc:
        raise LightingError(f"non-integer light id: {exc}") from exc
    return LightingSpec(
        lights=parsed,
        sun=float(doc.get("sun", 0.0)),
        exposure=float(doc.get("exposure", 1.0)),
        identity=bool(doc.get("identity", False)),
    )


def spec_from_json(text: str) -> LightingSpec:
    return spec_from_dict(json.loads(text))


@dataclass
class LightBasis:
    """Per-view stack of L+1 OLAT images; index 0 is the exterior light."""

    scene_id: str
    frame_id: str
    images: list[HdrImage]

    def __post_init__(self):
        if len(self.images) < 2:
            raise LightingError("basis needs the exterior slot plus at least one light")
        shape = self.images[0].data.shape
        for i, img in enumerate(self.images):
            if img.data.shape != shape:
                raise LightingError(
                    f"basis image {i} has shape {img.data.shape}, expected {shape}"
                )

    @property
    def num_lights(self) -> int:
        return len(self.images) - 1


def composite_hdr(basis: LightBasis, spec: LightingSpec) -> HdrImage:
    """Pre-tonemap linear combination: exposure * (sun * I_0 + sum c_l * I_l)."""
    for lid in spec.lights:
        if lid > basis.num_lights:
            raise LightingError(
                f"spec references light {lid} but basis has 1..{basis.num_lights}"
            )
    acc = np.zeros(basis.images[0].data.shape, dtype=np.float64)
    if spec.sun != 0.0:
        # float64 throughout; a bare python scalar would demote to float32
        acc += spec.sun * basis.images[0].data.astype(np.float64)
    for lid in sorted(spec.lights):
        color = spec.lights[lid]
        if color is not None:
            acc += color * basis.images[lid].data
    acc *= spec.exposure
    return HdrImage(acc.astype(np.float32))


def composite(basis: LightBasis, spec: LightingSpec) -> LdrImage:
    """Tone-mapped relight of the basis under the given spec."""
    return tone_map_srgb(composite_hdr(basis, spec), frame=basis.frame_id)


def sample_lighting(num_lights: int, rng: np.random.Generator) -> LightingSpec:
    """Draw a random training lighting spec.

    Every source (exterior slot included) flips an independent fair on/off
    coin; all-off draws are rejected. Per spec, one color branch applies to
    every interior light that is on: 80% of draws color them as blackbody
    radiators at temperatures uniform in [2500 K, 10500 K], the rest get
    uniformly random HSV colors. The sun, when on, gets a scalar intensity
    uniform in [0, 1].
    """
    if num_lights < 1:
        raise LightingError("need at least one interior light")
    for _ in range(_MAX_REJECTION_ATTEMPTS):
        on = rng.random(num_lights + 1) < 0.5
        if on.any():
            break
    else:
        raise RuntimeError("all-off rejection loop exceeded 64 attempts")
    mode = "blackbody" if rng.random() < 0.8 else "hsv"
    lights: dict[int, np.ndarray | None] = {}
    for lid in range(1, num_lights + 1):
        if not on[lid]:
            lights[lid] = None
        elif mode == "blackbody":
            lights[lid] = blackbody_rgb(rng.uniform(2500.0, 10500.0))
        else:
            lights[lid] = hsv_to_rgb(rng.uniform(), rng.uniform(), rng.uniform())
    sun = float(rng.uniform()) if on[0] else 0.0
    return LightingSpec(lights=lights, sun=sun, exposure=1.0, color_mode=mode)


def luminance(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) @ LUMA_WEIGHTS


def choose_exposure(hdr: HdrImage, percentile: float = 0.95) -> float:
    """Exposure mapping the given luminance percentile to 1.0, clamped."""
    if not (0.0 < percentile <= 1.0):
        raise ValueError("percentile must be in (0, 1]")
    lum = luminance(hdr.data)
    if not lum.any():
        raise ValueError("cannot choose an exposure for an all-zero image")
    ref = float(np.percentile(lum, percentile * 100.0))
    if ref <= 0.0:
        return EXPOSURE_MAX
    return float(np.clip(1.0 / ref, EXPOSURE_MIN, EXPOSURE_MAX))


# --- basis storage ----------------------------------------------------------

def save_basis(directory: Path, basis: LightBasis) -> None:
    """Write the basis as light_###.pfm files plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, img in enumerate(basis.images):
        name = f"light_{i:03d}.pfm"
        (directory / name).write_bytes(write_pfm(img))
        files.append(name)
    manifest = {
        "scene_id": basis.scene_id,
        "frame_id": basis.frame_id,
        "num_lights": basis.num_lights,
        "files": files,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_basis(directory: Path) -> LightBasis:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    images = [read_pfm((directory / name).read_bytes()) for name in manifest["files"]]
    return LightBasis(
        scene_id=manifest["scene_id"], frame_id=manifest["frame_id"], images=images
    )
