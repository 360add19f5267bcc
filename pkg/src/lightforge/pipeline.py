"""End-to-end orchestration: scene -> rig -> OLAT basis -> relight -> distill.

Every stage reads and writes plain files under one output directory, so the
CLI commands compose and each one is idempotent: identical inputs and seeds
produce byte-identical artifacts (JSON is dumped with sorted keys, PFM/PNG
writers are deterministic, and no timestamps leak into files).

Layout under `out_dir`:

    scene.json                      procedural scene description
    rig.json                        camera rig (intrinsics + poses)
    olat/frame_####/                per-camera OLAT basis (PFM + manifest)
    lighting/input.json             the scene's as-authored lighting spec
    frames/<set_id>/frame_####.png  tone-mapped relit frames + manifest.json
    condition/<set_id>/             condition video (PFM + manifest)
    fields/<set_id>.vxf             distilled voxel field
    renders/<set_id>/novel_####.png held-out views rendered from the field
    eval/<set_id>.json              PSNR/SSIM report

Relit frame sets are stored as 8-bit PNG (the display format the service
returns); distillation reads them back, so its targets are quantized to the
same grid a viewer sees. HDR intermediates (OLAT bases, condition videos)
stay in PFM.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import olat, toyscene, voxels
from .cameras import CameraRig, fisheye_for_resolution, make_elliptical_rig, rig_from_json, rig_to_json
from .conditioning import build_condition_video, save_condition_video
from .hdr import LdrImage, read_pfm_array, write_pfm_array
from .olat import LightBasis, LightingSpec


class PipelineError(ValueError):
    """Bad configuration or missing upstream artifacts."""


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for one pipeline run; defaults match the bundled demo."""

    out_dir: Path
    scene_seed: int = 2
    resolution: int = 64
    frames: int = 81  # training frames; rig cameras beyond this are held out
    rig_cameras: int = 90
    rig_scale: float = 0.38  # ellipse semi-axes as a fraction of room extent
    rig_height: float | None = None  # None: room mid-height
    look: str = "outward"
    samples_per_pixel: int = 8
    render_seed: int = 0
    lighting: str | None = None  # path to the target LightingSpec JSON
    grid_resolution: int = 64
    distill_iters: int = 2000
    distill_lr: float = 1e-3
    rays_per_iter: int = 2048
    ray_samples: int = 96
    warm_start_iters: int = 1000
    warm_start_lr: float = 1e-2
    cold_start: bool = False

    def __post_init__(self):
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.frames < 1:
            raise PipelineError("frame count must be >= 1")
        if self.resolution < 8:
            raise PipelineError("resolution must be at least 8 pixels")
        if self.rig_cameras < self.frames:
            raise PipelineError(
                f"rig has {self.rig_cameras} cameras but {self.frames} training frames requested"
            )
        if not 0 < self.rig_scale < 0.5:
            raise PipelineError("rig_scale must sit in (0, 0.5) to stay inside the room")
        for name in ("samples_per_pixel", "grid_resolution", "rays_per_iter", "ray_samples"):
            if getattr(self, name) <= 0:
                raise PipelineError(f"{name} must be positive")
        if self.distill_iters < 0 or self.warm_start_iters < 0:
            raise PipelineError("iteration counts cannot be negative")
        if self.distill_lr <= 0 or self.warm_start_lr <= 0:
            raise PipelineError("learning rates must be positive")


_CONFIG_KEYS = {f.name for f in PipelineConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]


def config_from_file(path: Path, overrides: dict | None = None) -> PipelineConfig:
    """Load a JSON or TOML config file, then apply flag overrides on top."""
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"config file {path} does not exist")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # pre-3.11
            import tomli as tomllib

        doc = tomllib.loads(path.read_text())
    else:
        doc = json.loads(path.read_text())
    if not isinstance(doc, dict):
        raise PipelineError("config file must hold a single object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise PipelineError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(doc)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    if "out_dir" not in merged:
        raise PipelineError("config needs an out_dir (or pass --out)")
    # lighting path is relative to the config file, not the cwd
    if merged.get("lighting") and not Path(merged["lighting"]).is_absolute():
        merged["lighting"] = str((path.parent / merged["lighting"]).resolve())
    return PipelineConfig(**merged)


def config_to_dict(cfg: PipelineConfig) -> dict:
    doc = {name: getattr(cfg, name) for name in _CONFIG_KEYS}
    doc["out_dir"] = str(doc["out_dir"])
    return doc


def save_config(cfg: PipelineConfig) -> Path:
    """Snapshot the config into the output directory (out_dir stored as ".").

    This makes a scene directory self-describing: the service reconstructs
    the pipeline settings from the snapshot alone.
    """
    doc = config_to_dict(cfg)
    doc["out_dir"] = "."
    out = cfg.out_dir / "forge.json"
    _write_atomic(out, json.dumps(doc, indent=2, sort_keys=True).encode())
    return out


def load_saved_config(scene_dir: Path, **overrides) -> PipelineConfig:
    path = Path(scene_dir) / "forge.json"
    if not path.exists():
        raise PipelineError(f"{path} missing; the directory is not a prepared scene")
    doc = json.loads(path.read_text())
    doc["out_dir"] = str(scene_dir)
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    return PipelineConfig(**doc)


def _write_atomic(path: Path, data: bytes) -> None:
    # concurrent writers of the same artifact must never expose a torn file
    import tempfile

    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        os.write(fd, data)
    finally:
        os.close(fd)
    os.replace(tmp, path)


# --- small PNG/LDR bridge -----------------------------------------------------

def png_bytes(img: LdrImage) -> bytes:
    import io

    arr = np.round(img.data * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(path: Path, img: LdrImage) -> None:
    _write_atomic(Path(path), png_bytes(img))


def load_png(path: Path) -> LdrImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return LdrImage(arr / np.float32(255.0))


# --- job records (used by the service, defined with the other domain types) --

JOB_STAGES = ("olat", "composite", "condition", "distill", "done")


@dataclass
class JobRecord:
    """Progress of one asynchronous relight-with-distillation job."""

    job_id: str
    stage: str = "olat"
    created_at: float = field(default_factory=time.time)
    updated_at: float = field(default_factory=time.time)
    artifacts: dict = field(default_factory=dict)
    error: str | None = None

    def advance(self, stage: str) -> None:
        if self.stage == "failed" or self.stage == "done":
            raise PipelineError(f"job {self.job_id} is terminal ({self.stage})")
        if stage not in JOB_STAGES:
            raise PipelineError(f"unknown job stage {stage!r}")
        if JOB_STAGES.index(stage) <= JOB_STAGES.index(self.stage):
            raise PipelineError(f"stage may only move forward, not {self.stage} -> {stage}")
        self.stage = stage
        self.updated_at = time.time()

    def fail(self, message: str) -> None:
        if self.stage == "done":
            raise PipelineError("cannot fail a finished job")
        self.stage = "failed"
        self.error = message
        self.updated_at = time.time()

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "stage": self.stage,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "artifacts": self.artifacts,
            "error": self.error,
        }


# --- stages -------------------------------------------------------------------

def stage_scene(cfg: PipelineConfig) -> Path:
    """Generate the procedural scene; writes scene.json plus a config snapshot."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    scene = toyscene.generate_scene(cfg.scene_seed)
    out = cfg.out_dir / "scene.json"
    _write_atomic(out, toyscene.scene_to_json(scene).encode())
    save_config(cfg)
    return out


def load_scene(cfg: PipelineConfig) -> toyscene.SceneDesc:
    path = cfg.out_dir / "scene.json"
    if not path.exists():
        raise PipelineError(f"{path} missing; run `forge scene gen` first")
    return toyscene.scene_from_json(path.read_text())


def rig_for_scene(scene: toyscene.SceneDesc, cfg: PipelineConfig) -> CameraRig:
    """Elliptical rig inscribed in the room at mid-height, looking outward."""
    lo, hi = scene.bounds
    center = (lo + hi) / 2.0
    extent = hi - lo
    height = cfg.rig_height if cfg.rig_height is not None else float(center[2])
    intr = fisheye_for_resolution(cfg.resolution, cfg.resolution)
    return make_elliptical_rig(
        [float(center[0]), float(center[1]), 0.0],
        cfg.rig_scale * float(extent[0]),
        cfg.rig_scale * float(extent[1]),
        height,
        intr,
        n=cfg.rig_cameras,
        look=cfg.look,
    )


def stage_rig(cfg: PipelineConfig) -> Path:
    scene = load_scene(cfg)
    rig = rig_for_scene(scene, cfg)
    out = cfg.out_dir / "rig.json"
    out.write_text(rig_to_json(rig))
    return out


def load_rig(cfg: PipelineConfig) -> CameraRig:
    path = cfg.out_dir / "rig.json"
    if not path.exists():
        raise PipelineError(f"{path} missing; run `forge olat render` first")
    return rig_from_json(path.read_text())


def stage_olat(cfg: PipelineConfig, progress=None) -> list[Path]:
    """Render the per-camera OLAT bases and freeze the input lighting spec."""
    scene = load_scene(cfg)
    rig = rig_for_scene(scene, cfg)
    (cfg.out_dir / "rig.json").write_text(rig_to_json(rig))
    num = scene.num_lights
    paths = []
    for k in range(len(rig)):
        camera = rig.camera(k)
        images = [
            toyscene.render_olat(scene, camera, l, cfg.samples_per_pixel, cfg.render_seed)
            for l in range(num + 1)
        ]
        basis = LightBasis(scene_id=f"scene-{cfg.scene_seed}", frame_id=f"{k:04d}", images=images)
        directory = cfg.out_dir / "olat" / f"frame_{k:04d}"
        olat.save_basis(directory, basis)
        paths.append(directory)
        if progress:
            progress(k + 1, len(rig))

    # as-authored lighting: every interior light on white, sun at full, with
    # exposure chosen from the first frame so it is deterministic
    unit = LightingSpec(lights={i: np.ones(3) for i in range(1, num + 1)}, sun=1.0, exposure=1.0)
    basis0 = olat.load_basis(cfg.out_dir / "olat" / "frame_0000")
    exposure = olat.choose_exposure(olat.composite_hdr(basis0, unit))
    input_spec = LightingSpec(lights=unit.lights, sun=1.0, exposure=exposure)
    lighting_dir = cfg.out_dir / "lighting"
    lighting_dir.mkdir(exist_ok=True)
    (lighting_dir / "input.json").write_text(olat.spec_to_json(input_spec))
    return paths


def load_input_spec(cfg: PipelineConfig) -> LightingSpec:
    path = cfg.out_dir / "lighting" / "input.json"
    if not path.exists():
        raise PipelineError(f"{path} missing; run `forge olat render` first")
    return olat.spec_from_json(path.read_text())


def load_basis_frame(cfg: PipelineConfig, k: int) -> LightBasis:
    directory = cfg.out_dir / "olat" / f"frame_{k:04d}"
    if not directory.exists():
        raise PipelineError(f"{directory} missing; run `forge olat render` first")
    return olat.load_basis(directory)


def split_frames(n_total: int, n_train: int) -> tuple[list[int], list[int]]:
    """Deterministic train/held-out split with held-out views spread evenly.

    Held-out cameras are interleaved between training ones (not a contiguous
    arc) so every novel view has trained neighbors on both sides.
    """
    if not 1 <= n_train <= n_total:
        raise PipelineError(f"cannot train on {n_train} of {n_total} frames")
    n_held = n_total - n_train
    if n_held == 0:
        return list(range(n_total)), []
    stride = n_total / n_held
    held = sorted({min(int((i + 0.5) * stride), n_total - 1) for i in range(n_held)})
    if len(held) != n_held:
        raise PipelineError("held-out views collide; too few cameras for the split")
    held_set = set(held)
    train = [k for k in range(n_total) if k not in held_set]
    return train, held


def resolve_spec(cfg: PipelineConfig, spec: LightingSpec) -> tuple[LightingSpec, str]:
    """Map a request to a concrete spec and its frame-set id.

    Identity requests resolve to the stored input lighting and the reserved
    set id "input"; everything else is keyed by a hash of its canonical JSON.
    """
    if spec.identity:
        return load_input_spec(cfg), "input"
    digest = hashlib.sha256(olat.spec_to_json(spec).encode()).hexdigest()[:12]
    return spec, f"set-{digest}"


def stage_composite(cfg: PipelineConfig, spec: LightingSpec, set_id: str | None = None) -> str:
    """Composite the OLAT bases under `spec` into a PNG frame set."""
    resolved, auto_id = resolve_spec(cfg, spec)
    if resolved.is_all_off():
        raise PipelineError("at least one light must be on")
    set_id = set_id or auto_id
    directory = cfg.out_dir / "frames" / set_id
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for k in range(cfg.rig_cameras):
        basis = load_basis_frame(cfg, k)
        frame = olat.composite(basis, resolved)
        name = f"frame_{k:04d}.png"
        save_png(directory / name, frame)
        files.append(name)
    train_idx, held_idx = split_frames(cfg.rig_cameras, cfg.frames)
    manifest = {
        "set_id": set_id,
        "scene_seed": cfg.scene_seed,
        "rig": "../../rig.json",
        "train_frames": train_idx,
        "held_out_frames": held_idx,
        "num_frames": cfg.rig_cameras,
        "files": files,
        "lighting": olat.spec_to_dict(resolved),
    }
    _write_atomic(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
    return set_id


def load_frame_set(cfg: PipelineConfig, set_id: str) -> tuple[list[LdrImage], dict]:
    directory = cfg.out_dir / "frames" / set_id
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise PipelineError(f"frame set {set_id!r} not found under {directory.parent}")
    manifest = json.loads(manifest_path.read_text())
    frames = [load_png(directory / name) for name in manifest["files"]]
    return frames, manifest


def stage_condition(cfg: PipelineConfig, spec: LightingSpec, set_id: str | None = None) -> str:
    """Encode the request as a per-pixel condition video over the rig path.

    Every light named in the spec is an edit: its visible pixels take the
    target color ((0,0,0) for OFF); all other pixels carry the do-not-edit
    sentinel. Identity requests therefore produce an all-sentinel video.
    """
    scene = load_scene(cfg)
    rig = load_rig(cfg)
    resolved, auto_id = resolve_spec(cfg, spec)
    set_id = set_id or auto_id
    train_idx, _ = split_frames(cfg.rig_cameras, cfg.frames)
    masks = {
        lid: np.stack(
            [toyscene.render_light_visibility(scene, rig.camera(k), lid) for k in train_idx]
        )
        for lid in range(1, scene.num_lights + 1)
    }
    edits = {} if spec.identity else dict(resolved.lights)
    video = build_condition_video(masks, edits, len(train_idx))
    directory = cfg.out_dir / "condition" / set_id
    save_condition_video(directory, video)
    return set_id


# Rig cameras sit ~0.17 m apart in the demo rooms, so nothing real can occupy
# the first 0.3 m of any ray. Excluding that band from the quadrature removes
# the view-specific near-field density that otherwise wrecks held-out poses.
NEAR_PLANE = 0.3
# Near-transparent start: voxels no training ray ever sees stay empty instead
# of contributing haze to novel views.
INIT_RAW_DENSITY = -6.0


def render_config_for(cfg: PipelineConfig) -> voxels.RenderConfig:
    """The one quadrature config shared by fitting, novel views, and eval."""
    return voxels.RenderConfig(samples=cfg.ray_samples, near=NEAR_PLANE, background="black", seed=0)


def _warm_schedule(total_iters: int, base_lr: float, resolution: int):
    """Coarse-to-fine reconstruction stages as (grid, iters, lr) tuples.

    Fitting the low frequencies on small grids first converges far faster
    than attacking the full lattice, and the final low-rate stages settle
    Adam noise; iteration shares were tuned on the demo scene.
    """
    stages = [
        (max(2, resolution // 4), 0.125, 1.0),
        (max(2, resolution // 2), 0.25, 1.0),
        (resolution, 0.375, 0.3),
        (resolution, 0.25, 0.1),
    ]
    out = []
    used = 0
    for k, (res, frac, scale) in enumerate(stages):
        iters = int(round(total_iters * frac)) if k < len(stages) - 1 else total_iters - used
        used += iters
        out.append((res, iters, base_lr * scale))
    return out


def stage_distill(cfg: PipelineConfig, set_id: str, progress=None) -> Path:
    """Fit a voxel field to a relit frame set; returns the checkpoint path.

    Default is a warm start: a coarse-to-fine grid curriculum over the same
    frames (low resolutions can't represent floaters, so geometry settles
    before detail), then the configured distill settings as a final pass.
    `cold_start` skips the curriculum and fits at full resolution from
    scratch.
    """
    scene = load_scene(cfg)
    rig = load_rig(cfg)
    frames, manifest = load_frame_set(cfg, set_id)
    train_idx = [int(k) for k in manifest["train_frames"]]
    cams = [rig.camera(k) for k in train_idx]
    train_frames = [frames[k] for k in train_idx]
    lo, hi = scene.bounds
    render_cfg = render_config_for(cfg)

    report: dict = {"set_id": set_id, "cold_start": cfg.cold_start}
    if cfg.cold_start or cfg.warm_start_iters <= 0:
        fld = voxels.make_field(
            resolution=cfg.grid_resolution, bbox=(lo, hi), raw_density=INIT_RAW_DENSITY
        )
    else:
        fld = None
        report["warm_start"] = []
        for num, (res, iters, lr) in enumerate(
            _warm_schedule(cfg.warm_start_iters, cfg.warm_start_lr, cfg.grid_resolution)
        ):
            if fld is None:
                fld = voxels.make_field(resolution=res, bbox=(lo, hi), raw_density=INIT_RAW_DENSITY)
            elif res != fld.resolution:
                fld = voxels.resample_field(fld, res)
            if iters == 0:
                continue
            fld, warm_losses = voxels.distill(
                fld, train_frames, cams, iters=iters, lr=lr,
                rays_per_iter=cfg.rays_per_iter, cfg=render_cfg, seed=2 + num,
            )
            report["warm_start"].append(
                {"grid": res, "iters": iters, "lr": lr, "final_loss": warm_losses[-1]}
            )
            if progress:
                progress(f"warm start {res}^3", iters)
    fld, losses = voxels.distill(
        fld, train_frames, cams, iters=cfg.distill_iters, lr=cfg.distill_lr,
        rays_per_iter=cfg.rays_per_iter, cfg=render_cfg, seed=1,
    )
    if progress:
        progress("distill", cfg.distill_iters)

    fields_dir = cfg.out_dir / "fields"
    fields_dir.mkdir(exist_ok=True)
    out = fields_dir / f"{set_id}.vxf"
    voxels.save_field(out, fld)
    report["distill"] = {
        "iters": cfg.distill_iters,
        "lr": cfg.distill_lr,
        "first_loss": losses[0] if losses else None,
        "final_loss": losses[-1] if losses else None,
    }
    (fields_dir / f"{set_id}.report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return out


def load_field_for_set(cfg: PipelineConfig, set_id: str) -> voxels.VoxelField:
    path = cfg.out_dir / "fields" / f"{set_id}.vxf"
    if not path.exists():
        raise PipelineError(f"no distilled field for set {set_id!r}; run `forge distill` first")
    return voxels.load_field(path)


def stage_render_novel(cfg: PipelineConfig, set_id: str) -> list[Path]:
    """Render the held-out rig poses from the distilled field."""
    rig = load_rig(cfg)
    fld = load_field_for_set(cfg, set_id)
    _, manifest = load_frame_set(cfg, set_id)
    held_idx = [int(k) for k in manifest["held_out_frames"]]
    if not held_idx:
        raise PipelineError("no held-out cameras: every rig pose is a training frame")
    render_cfg = render_config_for(cfg)
    directory = cfg.out_dir / "renders" / set_id
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in held_idx:
        img = voxels.render_view(fld, rig.camera(k), render_cfg)
        # PFM carries the exact float render for scoring; PNG is for eyes
        (directory / f"novel_{k:04d}.pfm").write_bytes(write_pfm_array(img.data))
        path = directory / f"novel_{k:04d}.png"
        save_png(path, img)
        paths.append(path)
    return paths


def stage_eval(cfg: PipelineConfig, set_id: str) -> dict:
    """Score rendered held-out views against the oracle-relit ground truth."""
    frames, manifest = load_frame_set(cfg, set_id)
    directory = cfg.out_dir / "renders" / set_id
    views = []
    for k in [int(i) for i in manifest["held_out_frames"]]:
        path = directory / f"novel_{k:04d}.pfm"
        if not path.exists():
            raise PipelineError(f"{path} missing; run `forge render novel` first")
        rendered = LdrImage(read_pfm_array(path.read_bytes()))
        views.append(
            {
                "frame": k,
                "psnr_db": voxels.psnr(rendered, frames[k]),
                "ssim": voxels.ssim(rendered, frames[k]),
            }
        )
    if not views:
        raise PipelineError("no held-out views to evaluate")
    report = {
        "set_id": set_id,
        "held_out_views": views,
        "mean_psnr_db": float(np.mean([v["psnr_db"] for v in views])),
        "min_psnr_db": float(np.min([v["psnr_db"] for v in views])),
        "mean_ssim": float(np.mean([v["ssim"] for v in views])),
        "min_ssim": float(np.min([v["ssim"] for v in views])),
    }
    eval_dir = cfg.out_dir / "eval"
    eval_dir.mkdir(exist_ok=True)
    (eval_dir / f"{set_id}.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


# --- sampler ablation -----------------------------------------------------------

def build_toy_dataset(
    scene_seed: int = 2,
    cameras: int = 6,
    resolution: int = 32,
    num_specs: int = 3,
    samples_per_pixel: int = 4,
) -> list:
    """Aligned (input, condition, sun, target) frames for the toy relighter.

    A small in-memory OLAT run: each sample pairs a camera's render under the
    scene's own lighting with a randomly sampled target lighting, the matching
    condition frame, and the target composite the model should reproduce.
    """
    from .diffusion import ToySample

    scene = toyscene.generate_scene(scene_seed)
    lo, hi = scene.bounds
    center = (lo + hi) / 2.0
    extent = hi - lo
    intr = fisheye_for_resolution(resolution, resolution)
    rig = make_elliptical_rig(
        [float(center[0]), float(center[1]), 0.0],
        0.38 * float(extent[0]), 0.38 * float(extent[1]), float(center[2]),
        intr, n=cameras,
    )
    num = scene.num_lights
    bases = []
    for k in range(cameras):
        camera = rig.camera(k)
        images = [toyscene.render_olat(scene, camera, l, samples_per_pixel, 0) for l in range(num + 1)]
        bases.append(LightBasis(scene_id=f"scene-{scene_seed}", frame_id=f"{k:04d}", images=images))

    unit = LightingSpec(lights={i: np.ones(3) for i in range(1, num + 1)}, sun=1.0)
    exposure = olat.choose_exposure(olat.composite_hdr(bases[0], unit))
    input_spec = LightingSpec(lights=unit.lights, sun=1.0, exposure=exposure)
    inputs = [olat.composite(b, input_spec) for b in bases]

    masks = {
        lid: np.stack(
            [toyscene.render_light_visibility(scene, rig.camera(k), lid) for k in range(cameras)]
        )
        for lid in range(1, num + 1)
    }

    rng = np.random.default_rng(scene_seed)
    samples = []
    for _ in range(num_specs):
        spec = olat.sample_lighting(num, rng)
        spec = LightingSpec(
            lights=spec.lights, sun=spec.sun,
            exposure=olat.choose_exposure(olat.composite_hdr(bases[0], spec)),
        )
        video = build_condition_video(masks, dict(spec.lights), cameras)
        for k in range(cameras):
            samples.append(
                ToySample(
                    input_image=inputs[k].data,
                    condition_frame=video.data[k],
                    sun=float(spec.sun),
                    target_image=olat.composite(bases[k], spec).data,
                )
            )
    return samples


def run_sampler_ablation(
    out_dir: Path,
    seeds: int = 5,
    steps: int = 2000,
    scene_seed: int = 2,
    arms: tuple = ("biased", "uniform"),
) -> dict:
    """Train every (arm, seed) pair and emit ablation.csv + ablation.json.

    The CSV holds one row per optimizer step (validation rows where a
    validation pass ran); the JSON summarizes final losses per run and per
    arm. Relative arm performance is reported, not judged.
    """
    import csv

    from .diffusion import train_toy

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_toy_dataset(scene_seed=scene_seed)
    reports = []
    for seed in range(seeds):
        for arm in arms:
            reports.append(train_toy(dataset, sampler_mode=arm, steps=steps, seed=seed))

    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "arm", "seed", "train_loss", "val_loss"])
        for rep in reports:
            val_at = dict(zip(rep.val_steps, rep.val_loss))
            writer.writerow([0, rep.arm, rep.seed, "", val_at[0]])
            for i, loss in enumerate(rep.train_loss, start=1):
                writer.writerow([i, rep.arm, rep.seed, loss, val_at.get(i, "")])

    by_arm = {
        arm: [rep.summary()["final_val_loss"] for rep in reports if rep.arm == arm]
        for arm in arms
    }
    summary = {
        "scene_seed": scene_seed,
        "steps": steps,
        "seeds": seeds,
        "runs": [rep.summary() for rep in reports],
        "arm_mean_final_val_loss": {arm: float(np.mean(v)) for arm, v in by_arm.items()},
    }
    (out_dir / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def run_pipeline(cfg: PipelineConfig, spec: LightingSpec, progress=None) -> dict:
    """All stages in order; returns the eval report for the target lighting."""
    def note(msg):
        if progress:
            progress(msg)

    stage_scene(cfg)
    note("scene")
    stage_olat(cfg)
    note("olat")
    stage_composite(cfg, LightingSpec(identity=True), set_id="input")
    _, set_id = resolve_spec(cfg, spec)
    stage_composite(cfg, spec)
    note(f"composite ({set_id})")
    stage_condition(cfg, spec)
    note("condition")
    stage_distill(cfg, set_id)
    note("distill")
    stage_render_novel(cfg, set_id)
    note("render novel")
    return stage_eval(cfg, set_id)
