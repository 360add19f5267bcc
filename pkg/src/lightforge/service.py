"""HTTP relighting service over prepared scene directories.

The data root holds one directory per scene, each produced by the pipeline
(`forge pipeline run` or the individual stages); the directory name is the
scene id and must not contain dots. Compositing a lighting spec is cheap and
handled synchronously; relighting that should also update the 3D field
(`?distill=true`) returns a job id to poll, and at most one distillation runs
per scene at a time (409 otherwise). Frame-set ids returned by the service
are namespaced as "<scene>.<set>" so /frames/{id}/{k}.png needs no scene
parameter.

Responses are tone-mapped sRGB PNGs; archival HDR stays on disk as PFM.
The service is a single-user dev tool: no auth, permissive CORS.
"""

from __future__ import annotations

import math
import re
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import pipeline, schema, toyscene, voxels
from .cameras import Camera, look_at_pose
from .olat import LightingError, LightingSpec, spec_from_dict, spec_to_dict

_SET_ID = re.compile(r"^[A-Za-z0-9_-]+$")
_FRAME_NAME = re.compile(r"^([0-9]+)\.png$")


def _local_set_id(scene_id: str, set_id: str) -> str:
    """Accept both namespaced ("scene.set") and bare set ids."""
    if "." in set_id:
        prefix, local = set_id.split(".", 1)
        if prefix != scene_id:
            raise HTTPException(404, f"frame set {set_id!r} belongs to another scene")
        set_id = local
    if not _SET_ID.match(set_id):
        raise HTTPException(404, f"malformed frame set id {set_id!r}")
    return set_id


def create_app(data_root: Path, distill_overrides: dict | None = None) -> FastAPI:
    """Build the service over `data_root`.

    `distill_overrides` replaces distillation settings from each scene's
    config snapshot (tests shrink iteration counts with it).
    """
    data_root = Path(data_root)
    app = FastAPI(title="lightforge relighting service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    jobs: dict[str, pipeline.JobRecord] = {}
    jobs_lock = threading.Lock()
    scene_locks: dict[str, threading.Lock] = {}

    def scene_dir(scene_id: str) -> Path:
        directory = data_root / scene_id
        if "." in scene_id or "/" in scene_id or not (directory / "scene.json").exists():
            raise HTTPException(404, f"unknown scene {scene_id!r}")
        return directory

    def scene_config(scene_id: str, with_distill_overrides: bool = False) -> pipeline.PipelineConfig:
        overrides = distill_overrides if with_distill_overrides else None
        try:
            return pipeline.load_saved_config(scene_dir(scene_id), **(overrides or {}))
        except ValueError as exc:
            raise HTTPException(409, f"scene {scene_id!r} is not prepared: {exc}")

    def lock_for(scene_id: str) -> threading.Lock:
        with jobs_lock:
            return scene_locks.setdefault(scene_id, threading.Lock())

    @app.get("/scenes")
    def list_scenes():
        ids = sorted(
            p.parent.name
            for p in data_root.glob("*/scene.json")
            if "." not in p.parent.name
        )
        return {"scenes": ids}

    @app.get("/scenes/{scene_id}/lights")
    def scene_lights(scene_id: str):
        cfg = scene_config(scene_id)
        scene = pipeline.load_scene(cfg)
        try:
            input_spec = pipeline.load_input_spec(cfg)
        except ValueError as exc:
            raise HTTPException(409, str(exc))
        kinds = {
            light.light_id: ("area" if isinstance(light, toyscene.AreaLight) else "point")
            for light in scene.lights
        }
        return {
            "scene": scene_id,
            "lights": [
                {
                    "id": lid,
                    "kind": kinds[lid],
                    "color": None
                    if input_spec.lights.get(lid) is None
                    else [float(v) for v in input_spec.lights[lid]],
                }
                for lid in sorted(kinds)
            ],
            "sun": float(input_spec.sun),
            "exposure": float(input_spec.exposure),
            "input_lighting": spec_to_dict(input_spec),
        }

    def parse_spec(body) -> LightingSpec:
        try:
            schema.check("lighting_spec.schema.json", body)
            return spec_from_dict(body)
        except (schema.SchemaError, LightingError) as exc:
            detail = {"error": str(exc)}
            if isinstance(exc, schema.SchemaError):
                detail["path"] = exc.path
            raise HTTPException(422, detail)

    def composite_set(cfg: pipeline.PipelineConfig, spec: LightingSpec) -> str:
        _, local_id = pipeline.resolve_spec(cfg, spec)
        manifest = cfg.out_dir / "frames" / local_id / "manifest.json"
        if not manifest.exists():  # identical requests reuse the stored set
            try:
                pipeline.stage_composite(cfg, spec, set_id=local_id)
            except LightingError as exc:
                raise HTTPException(422, {"error": str(exc)})
            except ValueError as exc:
                raise HTTPException(409, str(exc))
        return local_id

    def run_distill_job(job: pipeline.JobRecord, cfg, spec, scene_id, lock):
        try:
            job.advance("composite")
            local_id = composite_set(cfg, spec)
            job.artifacts["frame_set"] = f"{scene_id}.{local_id}"
            job.advance("condition")
            pipeline.stage_condition(cfg, spec, set_id=local_id)
            job.advance("distill")
            path = pipeline.stage_distill(cfg, local_id)
            job.artifacts["field"] = str(path)
            job.advance("done")
        except Exception as exc:  # job stages surface errors through /jobs
            job.fail(str(exc))
        finally:
            lock.release()

    @app.post("/scenes/{scene_id}/relight")
    def relight(scene_id: str, body: dict, distill: bool = False):
        spec = parse_spec(body)
        if spec.is_all_off() and not spec.identity:
            raise HTTPException(422, {"error": "at least one light must be on"})
        cfg = scene_config(scene_id, with_distill_overrides=distill)
        if not distill:
            local_id = composite_set(cfg, spec)
            manifest = pipeline.load_frame_set(cfg, local_id)[1]
            return {
                "frame_set": f"{scene_id}.{local_id}",
                "num_frames": int(manifest["num_frames"]),
            }
        lock = lock_for(scene_id)
        if not lock.acquire(blocking=False):
            raise HTTPException(409, f"a distillation is already running for scene {scene_id!r}")
        job = pipeline.JobRecord(job_id=uuid.uuid4().hex[:12])
        with jobs_lock:
            jobs[job.job_id] = job
        threading.Thread(
            target=run_distill_job, args=(job, cfg, spec, scene_id, lock), daemon=True
        ).start()
        return JSONResponse(status_code=202, content={"job": job.job_id})

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        with jobs_lock:
            job = jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id!r}")
        return job.to_dict()

    @app.get("/frames/{set_id}/{name}")
    def frame_png(set_id: str, name: str):
        if "." not in set_id:
            raise HTTPException(404, "frame set ids are namespaced as <scene>.<set>")
        scene_id, _ = set_id.split(".", 1)
        directory = scene_dir(scene_id)
        local_id = _local_set_id(scene_id, set_id)
        match = _FRAME_NAME.match(name)
        if not match:
            raise HTTPException(404, f"frame name {name!r} should look like 3.png")
        path = directory / "frames" / local_id / f"frame_{int(match.group(1)):04d}.png"
        if not path.exists():
            raise HTTPException(404, f"no frame {name} in set {set_id!r}")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/scenes/{scene_id}/novel-view")
    def novel_view(
        scene_id: str,
        lighting: str = Query(...),
        yaw: float = 0.0,
        pitch: float = 0.0,
        radius: float | None = Query(None, gt=0.0),
    ):
        if not -85.0 <= pitch <= 85.0:
            raise HTTPException(422, {"error": "pitch must lie in [-85, 85] degrees"})
        cfg = scene_config(scene_id)
        local_id = _local_set_id(scene_id, lighting)
        field_path = cfg.out_dir / "fields" / f"{local_id}.vxf"
        if not field_path.exists():
            raise HTTPException(404, f"no distilled field for lighting {lighting!r}")
        fld = voxels.load_field(field_path)
        scene = pipeline.load_scene(cfg)
        lo, hi = scene.bounds
        center = (lo + hi) / 2.0
        if radius is None:
            radius = cfg.rig_scale * float(min(hi[0] - lo[0], hi[1] - lo[1]))
        y, p = math.radians(yaw), math.radians(pitch)
        position = center + radius * np.array(
            [math.cos(p) * math.cos(y), math.cos(p) * math.sin(y), math.sin(p)]
        )
        rig = pipeline.load_rig(cfg)
        camera = Camera(rig.intrinsics, look_at_pose(position, center))
        img = voxels.render_view(fld, camera, pipeline.render_config_for(cfg))
        return Response(content=pipeline.png_bytes(img), media_type="image/png")

    return app
