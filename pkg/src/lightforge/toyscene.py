"""Procedural box-room scenes and a deterministic direct-lighting renderer.

A scene is a rectangular room with matte colored walls, a handful of spheres
and boxes on the floor, interior lights (isotropic points and downward-facing
ceiling panels), one window cut into a side wall, and a directional sun that
shines in through the window only. All surfaces are Lambertian, all light
sources have unit emission; colored and scaled lighting is applied afterwards
by compositing per-light renders.

Rendering is vectorized over pixels and fully deterministic: every stochastic
choice (area-light sample points, bounce directions) comes from a counter
hash keyed by pixel and sample index, never from call order. Bounce
directions are keyed independently of the light index, which makes the
per-light renders sum to the combined render exactly, not just in
expectation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Union

import numpy as np

from .cameras import Camera, OutsideFovError, OutsideImageCircleError, camera_ray_grid, project
from .hdr import HdrImage, hsv_to_rgb
from .olat import LightingSpec, validate_spec
from .rng import uniform

FACES = ("x-", "x+", "y-", "y+", "z-", "z+")

# hit kinds
_WALL, _ESCAPE, _SPHERE, _BOX, _QUAD = range(5)

_TMIN = 1e-7  # reject self-intersections right at the ray origin
_OFFSET = 1e-6  # shading points step this far off the surface (meters)

# counter-RNG stream tags; bounce directions deliberately share a stream
# across lights so per-light renders superpose exactly
_S_AREA1 = 11
_S_BOUNCE = 23
_S_AREA2 = 37


class SceneError(ValueError):
    """Scene description violates a structural invariant."""


def _vec3(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.isfinite(arr).all():
        raise SceneError(f"{name} must be finite, got {arr.tolist()}")
    return arr


def _albedo(v, name: str) -> np.ndarray:
    arr = _vec3(v, name)
    if (arr < 0).any() or (arr > 1).any():
        raise SceneError(f"{name} must lie in [0, 1]^3, got {arr.tolist()}")
    return arr


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise SceneError("cannot normalize a zero vector")
    return v / n


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def __post_init__(self):
        self.center = _vec3(self.center, "sphere center")
        self.radius = float(self.radius)
        self.albedo = _albedo(self.albedo, "sphere albedo")
        if self.radius <= 0:
            raise SceneError(f"sphere radius {self.radius} must be > 0")


@dataclass
class Box:
    center: np.ndarray
    half_size: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.center = _vec3(self.center, "box center")
        self.half_size = _vec3(self.half_size, "box half_size")
        self.albedo = _albedo(self.albedo, "box albedo")
        if (self.half_size <= 0).any():
            raise SceneError(f"box half sizes {self.half_size.tolist()} must be > 0")


@dataclass
class PointLight:
    light_id: int
    position: np.ndarray

    def __post_init__(self):
        self.light_id = int(self.light_id)
        self.position = _vec3(self.position, "point light position")


@dataclass
class AreaLight:
    """One-sided rectangular emitter spanned by two orthogonal edges."""

    light_id: int
    corner: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray

    def __post_init__(self):
        self.light_id = int(self.light_id)
        self.corner = _vec3(self.corner, "area light corner")
        self.edge_u = _vec3(self.edge_u, "area light edge_u")
        self.edge_v = _vec3(self.edge_v, "area light edge_v")
        if abs(float(self.edge_u @ self.edge_v)) > 1e-9:
            raise SceneError("area light edges must be orthogonal")
        if self.area < 1e-6:
            raise SceneError("area light is degenerate")

    @property
    def normal(self) -> np.ndarray:
        return _normalize(np.cross(self.edge_u, self.edge_v))

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))


Light = Union[PointLight, AreaLight]
SceneObject = Union[Sphere, Box]


@dataclass
class Window:
    """Axis-aligned opening in one wall, in that wall's tangent coordinates.

    `face` names the wall; `lo`/`hi` are (u, v) bounds where u and v are the
    two non-wall axes in ascending order (so for an x wall: u=y, v=z).
    """

    face: str
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if self.face not in FACES[:4]:
            raise SceneError(f"window face {self.face!r} must be a side wall")
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(2)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(2)
        if not (self.lo < self.hi).all():
            raise SceneError("window lo must be strictly below hi")

    @property
    def wall_axis(self) -> int:
        return 0 if self.face[0] == "x" else 1

    @property
    def tangent_axes(self) -> tuple[int, int]:
        a = self.wall_axis
        return tuple(ax for ax in (0, 1, 2) if ax != a)  # ascending


@dataclass
class Sun:
    """Directional source; `direction` is the photon travel direction."""

    direction: np.ndarray

    def __post_init__(self):
        self.direction = _vec3(self.direction, "sun direction")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise SceneError("sun direction must be a unit vector")


@dataclass
class SceneDesc:
    scene_id: str
    room_min: np.ndarray
    room_max: np.ndarray
    wall_albedo: dict[str, np.ndarray]
    objects: list[SceneObject]
    lights: list[Light]
    window: Window
    sun: Sun

    def __post_init__(self):
        self.room_min = _vec3(self.room_min, "room_min")
        self.room_max = _vec3(self.room_max, "room_max")
        if not (self.room_min < self.room_max).all():
            raise SceneError("room_min must be strictly below room_max")
        if set(self.wall_albedo) != set(FACES):
            raise SceneError(f"wall_albedo must cover exactly the faces {FACES}")
        self.wall_albedo = {f: _albedo(self.wall_albedo[f], f"wall {f}") for f in FACES}
        self._validate_lights()
        self._validate_objects()
        self._validate_window()
        inward = self.window_inward_normal()
        if float(self.sun.direction @ inward) <= 0.05:
            raise SceneError("sun must shine into the room through the window")

    def _contains(self, p: np.ndarray, margin: float = 0.0) -> bool:
        return bool(
            (p >= self.room_min + margin - 1e-9).all()
            and (p <= self.room_max - margin + 1e-9).all()
        )

    def _validate_lights(self):
        if not self.lights:
            raise SceneError("scene needs at least one interior light")
        ids = sorted(l.light_id for l in self.lights)
        if ids != list(range(1, len(ids) + 1)):
            raise SceneError(f"light ids must be contiguous from 1, got {ids}")
        self.lights = sorted(self.lights, key=lambda l: l.light_id)
        for light in self.lights:
            if isinstance(light, PointLight):
                if not self._contains(light.position, margin=0.05):
                    raise SceneError(f"point light {light.light_id} outside the room")
            else:
                for du in (0.0, 1.0):
                    for dv in (0.0, 1.0):
                        c = light.corner + du * light.edge_u + dv * light.edge_v
                        if not self._contains(c):
                            raise SceneError(f"area light {light.light_id} outside the room")

    def _validate_objects(self):
        for i, obj in enumerate(self.objects):
            if isinstance(obj, Sphere):
                lo = obj.center - obj.radius
                hi = obj.center + obj.radius
            else:
                lo = obj.center - obj.half_size
                hi = obj.center + obj.half_size
            if not (self._contains(lo) and self._contains(hi)):
                raise SceneError(f"object {i} pokes outside the room")

    def _validate_window(self):
        ta, tb = self.window.tangent_axes
        lo_ok = self.window.lo[0] >= self.room_min[ta] - 1e-9 and self.window.lo[1] >= self.room_min[tb] - 1e-9
        hi_ok = self.window.hi[0] <= self.room_max[ta] + 1e-9 and self.window.hi[1] <= self.room_max[tb] + 1e-9
        if not (lo_ok and hi_ok):
            raise SceneError("window rectangle exceeds its wall")

    @property
    def num_lights(self) -> int:
        return len(self.lights)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.room_min.copy(), self.room_max.copy()

    def window_inward_normal(self) -> np.ndarray:
        n = np.zeros(3)
        n[self.window.wall_axis] = 1.0 if self.window.face.endswith("-") else -1.0
        return n

    def light_center(self, light_id: int) -> np.ndarray:
        light = self.lights[light_id - 1]
        if isinstance(light, PointLight):
            return light.position.copy()
        return light.corner + 0.5 * (light.edge_u + light.edge_v)

    def face_albedo_array(self) -> np.ndarray:
        return np.stack([self.wall_albedo[f] for f in FACES])


# --- serialization ----------------------------------------------------------

def scene_to_dict(scene: SceneDesc) -> dict:
    objects = []
    for obj in scene.objects:
        if isinstance(obj, Sphere):
            objects.append(
                {
                    "kind": "sphere",
                    "center": obj.center.tolist(),
                    "radius": float(obj.radius),
                    "albedo": obj.albedo.tolist(),
                }
            )
        else:
            objects.append(
                {
                    "kind": "box",
                    "center": obj.center.tolist(),
                    "half_size": obj.half_size.tolist(),
                    "albedo": obj.albedo.tolist(),
                }
            )
    lights = []
    for light in scene.lights:
        if isinstance(light, PointLight):
            lights.append(
                {"id": light.light_id, "kind": "point", "position": light.position.tolist()}
            )
        else:
            lights.append(
                {
                    "id": light.light_id,
                    "kind": "area",
                    "corner": light.corner.tolist(),
                    "edge_u": light.edge_u.tolist(),
                    "edge_v": light.edge_v.tolist(),
                }
            )
    return {
        "scene_id": scene.scene_id,
        "room": {
            "min": scene.room_min.tolist(),
            "max": scene.room_max.tolist(),
            "wall_albedo": {f: scene.wall_albedo[f].tolist() for f in FACES},
        },
        "objects": objects,
        "lights": lights,
        "window": {
            "face": scene.window.face,
            "lo": scene.window.lo.tolist(),
            "hi": scene.window.hi.tolist(),
        },
        "sun": {"direction": scene.sun.direction.tolist()},
    }


def scene_from_dict(doc: dict) -> SceneDesc:
    try:
        objects: list[SceneObject] = []
        for entry in doc.get("objects", []):
            if entry["kind"] == "sphere":
                objects.append(Sphere(entry["center"], entry["radius"], entry["albedo"]))
            elif entry["kind"] == "box":
                objects.append(Box(entry["center"], entry["half_size"], entry["albedo"]))
            else:
                raise SceneError(f"unknown object kind {entry['kind']!r}")
        lights: list[Light] = []
        for entry in doc["lights"]:
            if entry["kind"] == "point":
                lights.append(PointLight(entry["id"], entry["position"]))
            elif entry["kind"] == "area":
                lights.append(
                    AreaLight(entry["id"], entry["corner"], entry["edge_u"], entry["edge_v"])
                )
            else:
                raise SceneError(f"unknown light kind {entry['kind']!r}")
        room = doc["room"]
        return SceneDesc(
            scene_id=doc["scene_id"],
            room_min=room["min"],
            room_max=room["max"],
            wall_albedo=room["wall_albedo"],
            objects=objects,
            lights=lights,
            window=Window(doc["window"]["face"], doc["window"]["lo"], doc["window"]["hi"]),
            sun=Sun(doc["sun"]["direction"]),
        )
    except KeyError as exc:
        raise SceneError(f"scene document missing key {exc}") from exc


def scene_to_json(scene: SceneDesc) -> str:
    return json.dumps(scene_to_dict(scene), indent=2, sort_keys=True)


def scene_from_json(text: str) -> SceneDesc:
    return scene_from_dict(json.loads(text))


# --- procedural generation --------------------------------------------------

def generate_scene(seed: int) -> SceneDesc:
    """Deterministically generate a random furnished room from a seed."""
    g = np.random.default_rng(seed)
    ext = np.array([g.uniform(4.0, 7.0), g.uniform(4.0, 7.0), g.uniform(2.6, 3.2)])

    wall_albedo = {}
    for face in FACES:
        if face == "z-":  # darker floor
            wall_albedo[face] = hsv_to_rgb(g.uniform(), g.uniform(0.0, 0.25), g.uniform(0.3, 0.55))
        elif face == "z+":  # near-white ceiling
            wall_albedo[face] = hsv_to_rgb(g.uniform(), g.uniform(0.0, 0.08), g.uniform(0.85, 0.95))
        else:
            wall_albedo[face] = hsv_to_rgb(g.uniform(), g.uniform(0.05, 0.35), g.uniform(0.5, 0.8))

    face = FACES[int(g.integers(0, 4))]
    w_axis = 0 if face[0] == "x" else 1
    t_axis = 1 - w_axis
    wall_len = ext[t_axis]
    win_w = min(g.uniform(0.8, 1.8), wall_len - 0.8)
    win_h = min(g.uniform(0.7, 1.3), ext[2] - 1.1)
    cu = g.uniform(0.4 + win_w / 2, wall_len - 0.4 - win_w / 2)
    cv = g.uniform(0.9 + win_h / 2, ext[2] - 0.25 - win_h / 2)
    window = Window(face, (cu - win_w / 2, cv - win_h / 2), (cu + win_w / 2, cv + win_h / 2))

    inward = np.zeros(3)
    inward[w_axis] = 1.0 if face.endswith("-") else -1.0
    lateral = np.zeros(3)
    lateral[t_axis] = 1.0
    sun_dir = inward + lateral * g.uniform(-0.35, 0.35) + np.array([0.0, 0.0, -1.0]) * g.uniform(0.3, 0.9)
    sun = Sun(_normalize(sun_dir))

    num_lights = int(g.integers(2, 5))
    lights: list[Light] = []
    centers: list[np.ndarray] = []
    for lid in range(1, num_lights + 1):
        light = None
        for attempt in range(200):
            min_sep = 1.0 if attempt < 100 else 0.6
            if g.random() < 0.5:
                su, sv = g.uniform(0.5, 1.0), g.uniform(0.5, 1.0)
                cx = g.uniform(0.5 + su / 2, ext[0] - 0.5 - su / 2)
                cy = g.uniform(0.5 + sv / 2, ext[1] - 0.5 - sv / 2)
                # edge order puts the emitting side downward
                light = AreaLight(
                    lid,
                    corner=(cx - su / 2, cy - sv / 2, ext[2] - 0.02),
                    edge_u=(0.0, sv, 0.0),
                    edge_v=(su, 0.0, 0.0),
                )
                center = np.array([cx, cy])
            else:
                pos = np.array(
                    [
                        g.uniform(0.6, ext[0] - 0.6),
                        g.uniform(0.6, ext[1] - 0.6),
                        g.uniform(1.9, ext[2] - 0.2),
                    ]
                )
                light = PointLight(lid, pos)
                center = pos[:2]
            if all(np.linalg.norm(center - c) >= min_sep for c in centers):
                break
        centers.append(center)
        lights.append(light)

    num_objects = int(g.integers(1, 6))
    objects: list[SceneObject] = []
    for _ in range(num_objects):
        if g.random() < 0.5:
            r = g.uniform(0.25, 0.5)
            cx = g.uniform(0.4 + r, ext[0] - 0.4 - r)
            cy = g.uniform(0.4 + r, ext[1] - 0.4 - r)
            alb = hsv_to_rgb(g.uniform(), g.uniform(0.2, 0.8), g.uniform(0.4, 0.9))
            objects.append(Sphere((cx, cy, r), r, alb))
        else:
            half = np.array([g.uniform(0.15, 0.45), g.uniform(0.15, 0.45), g.uniform(0.15, 0.55)])
            cx = g.uniform(0.4 + half[0], ext[0] - 0.4 - half[0])
            cy = g.uniform(0.4 + half[1], ext[1] - 0.4 - half[1])
            alb = hsv_to_rgb(g.uniform(), g.uniform(0.2, 0.8), g.uniform(0.4, 0.9))
            objects.append(Box((cx, cy, half[2]), half, alb))

    return SceneDesc(
        scene_id=f"scene-{seed}",
        room_min=(0.0, 0.0, 0.0),
        room_max=ext,
        wall_albedo=wall_albedo,
        objects=objects,
        lights=lights,
        window=window,
        sun=sun,
    )


# --- intersection kernels ---------------------------------------------------

def _ray_room_exit(scene: SceneDesc, o: np.ndarray, d: np.ndarray):
    """Exit distance and face of rays starting strictly inside the room.

    Returns (t, face_idx) with face_idx indexing FACES.
    """
    bound = np.where(d > 0, scene.room_max, scene.room_min)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ax = (bound - o) / d
    t_ax = np.where(d == 0.0, np.inf, t_ax)
    axis = np.argmin(t_ax, axis=1)
    rows = np.arange(o.shape[0])
    t = t_ax[rows, axis]
    positive = d[rows, axis] > 0
    face_idx = axis * 2 + positive.astype(np.int64)
    return t, face_idx


def _window_escape(scene: SceneDesc, p: np.ndarray, face_idx: np.ndarray) -> np.ndarray:
    """True where a wall exit point lies inside the window opening."""
    win = scene.window
    wf = FACES.index(win.face)
    ta, tb = win.tangent_axes
    u = p[:, ta]
    v = p[:, tb]
    inside = (
        (face_idx == wf)
        & (u >= win.lo[0])
        & (u <= win.hi[0])
        & (v >= win.lo[1])
        & (v <= win.hi[1])
    )
    return inside


def _first_hit(scene: SceneDesc, o: np.ndarray, d: np.ndarray) -> SimpleNamespace:
    """Nearest surface along unit-direction rays starting inside the room."""
    m = o.shape[0]
    t, face_idx = _ray_room_exit(scene, o, d)
    kind = np.full(m, _WALL, dtype=np.int8)
    axis = face_idx // 2
    positive = face_idx % 2 == 1
    normal = np.zeros((m, 3))
    normal[np.arange(m), axis] = np.where(positive, -1.0, 1.0)  # inward
    albedo = scene.face_albedo_array()[face_idx]
    emitter = np.zeros(m, dtype=np.int64)
    emit_front = np.zeros(m, dtype=bool)

    exit_p = o + t[:, None] * d
    escaped = _window_escape(scene, exit_p, face_idx)
    kind[escaped] = _ESCAPE
    albedo[escaped] = 0.0

    for obj in scene.objects:
        if isinstance(obj, Sphere):
            oc = o - obj.center
            b = np.sum(oc * d, axis=1)
            c2 = np.sum(oc * oc, axis=1) - obj.radius**2
            disc = b * b - c2
            ok = disc > 0
            ts = -b - np.sqrt(np.maximum(disc, 0.0))
            hit = ok & (ts > _TMIN) & (ts < t)
            if hit.any():
                t[hit] = ts[hit]
                kind[hit] = _SPHERE
                p = o[hit] + ts[hit, None] * d[hit]
                normal[hit] = (p - obj.center) / obj.radius
                albedo[hit] = obj.albedo
                emitter[hit] = 0
                emit_front[hit] = False
        else:
            bmin = obj.center - obj.half_size
            bmax = obj.center + obj.half_size
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                t1 = (bmin - o) * inv
                t2 = (bmax - o) * inv
            tlo = np.minimum(t1, t2)
            thi = np.maximum(t1, t2)
            tn = np.max(tlo, axis=1)
            tf = np.min(thi, axis=1)
            hit = (tn < tf) & (tn > _TMIN) & (tn < t)
            if hit.any():
                near_axis = np.argmax(tlo[hit], axis=1)
                t[hit] = tn[hit]
                kind[hit] = _BOX
                n = np.zeros((int(hit.sum()), 3))
                n[np.arange(n.shape[0]), near_axis] = -np.sign(
                    d[hit][np.arange(n.shape[0]), near_axis]
                )
                normal[hit] = n
                albedo[hit] = obj.albedo
                emitter[hit] = 0
                emit_front[hit] = False

    for light in scene.lights:
        if not isinstance(light, AreaLight):
            continue
        nq = np.cross(light.edge_u, light.edge_v)
        denom = d @ nq
        with np.errstate(divide="ignore", invalid="ignore"):
            tq = ((light.corner - o) @ nq) / denom
        p = o + tq[:, None] * d
        rel = p - light.corner
        a = (rel @ light.edge_u) / float(light.edge_u @ light.edge_u)
        b = (rel @ light.edge_v) / float(light.edge_v @ light.edge_v)
        hit = (tq > _TMIN) & (tq < t) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        if hit.any():
            t[hit] = tq[hit]
            kind[hit] = _QUAD
            front = denom < 0  # looking at the emitting side
            unit_n = light.normal
            normal[hit] = np.where(front[hit, None], unit_n, -unit_n)
            albedo[hit] = 0.0
            emitter[hit] = light.light_id
            emit_front[hit] = front[hit]

    point = o + t[:, None] * d
    return SimpleNamespace(
        t=t,
        point=point,
        normal=normal,
        albedo=albedo,
        kind=kind,
        emitter=emitter,
        emit_front=emit_front,
    )


def _segment_occluded(scene: SceneDesc, o: np.ndarray, d: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """True where something blocks the open segment (o, o + dist*d).

    Walls are skipped: the room is convex, so a segment between two interior
    points never crosses one. Area-light quads do occlude.
    """
    occ = np.zeros(o.shape[0], dtype=bool)
    tmax = dist - 1e-6
    for obj in scene.objects:
        if isinstance(obj, Sphere):
            oc = o - obj.center
            b = np.sum(oc * d, axis=1)
            c2 = np.sum(oc * oc, axis=1) - obj.radius**2
            disc = b * b - c2
            ts = -b - np.sqrt(np.maximum(disc, 0.0))
            occ |= (disc > 0) & (ts > _TMIN) & (ts < tmax)
        else:
            bmin = obj.center - obj.half_size
            bmax = obj.center + obj.half_size
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                t1 = (bmin - o) * inv
                t2 = (bmax - o) * inv
            tn = np.max(np.minimum(t1, t2), axis=1)
            tf = np.min(np.maximum(t1, t2), axis=1)
            occ |= (tn < tf) & (tn > _TMIN) & (tn < tmax)
    for light in scene.lights:
        if not isinstance(light, AreaLight):
            continue
        nq = np.cross(light.edge_u, light.edge_v)
        denom = d @ nq
        with np.errstate(divide="ignore", invalid="ignore"):
            tq = ((light.corner - o) @ nq) / denom
        p = o + tq[:, None] * d
        rel = p - light.corner
        a = (rel @ light.edge_u) / float(light.edge_u @ light.edge_u)
        b = (rel @ light.edge_v) / float(light.edge_v @ light.edge_v)
        occ |= (tq > _TMIN) & (tq < tmax) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
    return occ


def _sun_visible(scene: SceneDesc, p: np.ndarray) -> np.ndarray:
    """True where the ray toward the sun escapes through the window."""
    d = np.broadcast_to(-scene.sun.direction, p.shape)
    t_wall, face_idx = _ray_room_exit(scene, p, d)
    exit_p = p + t_wall[:, None] * d
    escaped = _window_escape(scene, exit_p, face_idx)
    blocked = _segment_occluded(scene, p, d, t_wall)
    return escaped & ~blocked


# --- shading ----------------------------------------------------------------

def _onb(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # branchless orthonormal basis (Duff et al.)
    sign = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t1 = np.stack(
        [1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], axis=-1
    )
    t2 = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return t1, t2


def _cosine_dirs(n: np.ndarray, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    r = np.sqrt(u1)
    phi = 2.0 * math.pi * u2
    x = r * np.cos(phi)
    y = r * np.sin(phi)
    z = np.sqrt(np.maximum(1.0 - u1, 0.0))
    t1, t2 = _onb(n)
    d = x[..., None] * t1 + y[..., None] * t2 + z[..., None] * n
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _direct_irradiance(
    scene: SceneDesc,
    p: np.ndarray,
    n: np.ndarray,
    pix_key: np.ndarray,
    samp_base: np.ndarray,
    n_samples: int,
    seed: int,
    weights: np.ndarray,
    sun_w: float,
    stream: int,
) -> np.ndarray:
    """Color-weighted direct irradiance at shading points, (M, 3).

    `weights` is (L, 3): the linear emission color of each interior light.
    Area lights are sampled `n_samples` times with counter-RNG keys built
    from (stream, light id, pix_key, samp_base + j), so identical keys give
    identical sample points across calls.
    """
    m = p.shape[0]
    out = np.zeros((m, 3))
    for light in scene.lights:
        w = weights[light.light_id - 1]
        if not w.any():
            continue
        if isinstance(light, PointLight):
            wi = light.position - p
            d2 = np.sum(wi * wi, axis=1)
            dist = np.sqrt(d2)
            wiu = wi / dist[:, None]
            cosp = np.clip(np.sum(n * wiu, axis=1), 0.0, None)
            e = np.zeros(m)
            cand = cosp > 0
            if cand.any():
                occ = _segment_occluded(scene, p[cand], wiu[cand], dist[cand])
                e[cand] = np.where(occ, 0.0, cosp[cand] / d2[cand])
            out += w * e[:, None]
        else:
            jj = np.arange(n_samples, dtype=np.uint64)
            u = uniform(seed, stream, light.light_id, 0, pix_key[:, None], samp_base[:, None] + jj)
            v = uniform(seed, stream, light.light_id, 1, pix_key[:, None], samp_base[:, None] + jj)
            q = light.corner + u[..., None] * light.edge_u + v[..., None] * light.edge_v
            wi = q - p[:, None, :]
            dist = np.linalg.norm(wi, axis=-1)
            wiu = wi / dist[..., None]
            cosp = np.clip(np.sum(n[:, None, :] * wiu, axis=-1), 0.0, None)
            cosq = np.clip(-(wiu @ light.normal), 0.0, None)
            geo = cosp * cosq / dist**2 * light.area
            vis = np.ones_like(geo)
            cand = geo > 0
            if cand.any():
                occ = _segment_occluded(
                    scene,
                    np.broadcast_to(p[:, None, :], wi.shape)[cand],
                    wiu[cand],
                    dist[cand],
                )
                vis[cand] = ~occ
            e = np.mean(geo * vis, axis=1)
            out += w * e[:, None]
    if sun_w > 0:
        wi = -scene.sun.direction
        cosp = np.clip(n @ wi, 0.0, None)
        e = np.zeros(m)
        cand = cosp > 0
        if cand.any():
            vis = _sun_visible(scene, p[cand])
            e[cand] = cosp[cand] * vis
        out += sun_w * e[:, None]
    return out


def _render_weighted(
    scene: SceneDesc,
    camera: Camera,
    weights: np.ndarray,
    sun_w: float,
    samples_per_pixel: int,
    seed: int,
    indirect: bool,
) -> HdrImage:
    """Shared render core: per-light emissions scaled by `weights` and `sun_w`."""
    intr = camera.intrinsics
    origins, dirs, valid = camera_ray_grid(camera)
    o = origins[valid]
    d = dirs[valid]
    pix = np.nonzero(valid)[0].astype(np.uint64)

    hit = _first_hit(scene, o, d)
    rgb = np.zeros((o.shape[0], 3))

    seen = (hit.kind == _QUAD) & hit.emit_front
    if seen.any():
        rgb[seen] = weights[hit.emitter[seen] - 1]

    shade = (hit.kind == _WALL) | (hit.kind == _SPHERE) | (hit.kind == _BOX)
    if shade.any():
        p = hit.point[shade] + hit.normal[shade] * _OFFSET
        n = hit.normal[shade]
        alb = hit.albedo[shade]
        pk = pix[shade]
        zero = np.zeros_like(pk)
        e = _direct_irradiance(
            scene, p, n, pk, zero, samples_per_pixel, seed, weights, sun_w, _S_AREA1
        )
        val = alb / math.pi * e
        if indirect:
            jj = np.arange(samples_per_pixel, dtype=np.uint64)
            u1 = uniform(seed, _S_BOUNCE, 0, pk[:, None], jj)
            u2 = uniform(seed, _S_BOUNCE, 1, pk[:, None], jj)
            bdir = _cosine_dirs(n[:, None, :], u1, u2)
            o2 = np.broadcast_to(p[:, None, :], bdir.shape).reshape(-1, 3)
            hit2 = _first_hit(scene, o2, bdir.reshape(-1, 3))
            shade2 = (hit2.kind == _WALL) | (hit2.kind == _SPHERE) | (hit2.kind == _BOX)
            incoming = np.zeros((o2.shape[0], 3))
            if shade2.any():
                pk2 = np.repeat(pk, samples_per_pixel)[shade2]
                sb2 = np.tile(jj, p.shape[0])[shade2]
                p2 = hit2.point[shade2] + hit2.normal[shade2] * _OFFSET
                e2 = _direct_irradiance(
                    scene, p2, hit2.normal[shade2], pk2, sb2, 1, seed, weights, sun_w, _S_AREA2
                )
                incoming[shade2] = hit2.albedo[shade2] / math.pi * e2
            # cosine-weighted estimator: fr * cos / pdf collapses to the albedo
            val += alb * incoming.reshape(p.shape[0], samples_per_pixel, 3).mean(axis=1)
        rgb[shade] = val

    img = np.zeros((intr.height * intr.width, 3))
    img[valid] = rgb
    return HdrImage(img.reshape(intr.height, intr.width, 3).astype(np.float32))


def render_olat(
    scene: SceneDesc,
    camera: Camera,
    light_index: int,
    samples_per_pixel: int = 16,
    seed: int = 0,
    indirect: bool = False,
) -> HdrImage:
    """Render with a single unit-emission source on.

    Index 0 turns on only the exterior sun; index l in 1..L turns on interior
    light l with white emission. Everything else is dark.
    """
    if not 0 <= light_index <= scene.num_lights:
        raise SceneError(f"light index {light_index} outside 0..{scene.num_lights}")
    weights = np.zeros((scene.num_lights, 3))
    sun_w = 0.0
    if light_index == 0:
        sun_w = 1.0
    else:
        weights[light_index - 1] = 1.0
    return _render_weighted(scene, camera, weights, sun_w, samples_per_pixel, seed, indirect)


def render_combined(
    scene: SceneDesc,
    camera: Camera,
    spec: LightingSpec,
    samples_per_pixel: int = 16,
    seed: int = 0,
    indirect: bool = False,
) -> HdrImage:
    """Render all sources at once with the spec's colors and sun scalar.

    The spec's exposure is ignored here: output is pre-exposure linear
    radiance, directly comparable to a weighted sum of per-light renders
    made with the same seed and sample count.
    """
    validate_spec(spec, scene.num_lights)
    weights = np.zeros((scene.num_lights, 3))
    for lid, color in spec.lights.items():
        if color is not None:
            weights[lid - 1] = color
    return _render_weighted(
        scene, camera, weights, float(spec.sun), samples_per_pixel, seed, indirect
    )


# --- geometry channels ------------------------------------------------------

@dataclass
class DepthMap:
    """Per-pixel distance to the first surface along the center ray.

    +inf marks rays that leave through the window; NaN marks pixels outside
    the fisheye image circle.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise SceneError(f"depth map must be (H, W), got {arr.shape}")
        finite = np.isfinite(arr)
        if (arr[finite] <= 0).any():
            raise SceneError("finite depths must be > 0")
        self.data = arr


def render_depth(scene: SceneDesc, camera: Camera) -> DepthMap:
    intr = camera.intrinsics
    origins, dirs, valid = camera_ray_grid(camera)
    hit = _first_hit(scene, origins[valid], dirs[valid])
    t = hit.t.copy()
    t[hit.kind == _ESCAPE] = np.inf
    depth = np.full(intr.height * intr.width, np.nan)
    depth[valid] = t
    return DepthMap(depth.reshape(intr.height, intr.width))


def _project_to_pixel(camera: Camera, point: np.ndarray) -> tuple[int, int, float] | None:
    """(row, col, distance) of a world point, or None if not projectable."""
    rel = point - camera.pose.position
    dist = float(np.linalg.norm(rel))
    if dist < 1e-9:
        return None
    cam_dir = camera.pose.rotation.T @ (rel / dist)
    try:
        px = project(camera.intrinsics, cam_dir)
    except (OutsideFovError, OutsideImageCircleError):
        return None
    col = int(math.floor(px[0]))
    row = int(math.floor(px[1]))
    if not (0 <= row < camera.intrinsics.height and 0 <= col < camera.intrinsics.width):
        return None
    return row, col, dist


def render_light_visibility(
    scene: SceneDesc, camera: Camera, light_id: int, splat_radius: int = 2
) -> np.ndarray:
    """Boolean (H, W) mask of pixels showing light `light_id`.

    Area lights mark the pixels whose first hit is the panel itself. Point
    lights, being infinitesimal, are splatted as a small disc around their
    projection, kept only where the scene depth lies behind the light.
    Overlapping point splats go to the nearest light, and pixels covered by
    a panel stay with the panel, so masks of different lights are disjoint.
    """
    if not 1 <= light_id <= scene.num_lights:
        raise SceneError(f"light id {light_id} outside 1..{scene.num_lights}")
    intr = camera.intrinsics
    h, w = intr.height, intr.width

    origins, dirs, valid = camera_ray_grid(camera)
    hit = _first_hit(scene, origins[valid], dirs[valid])
    emitter = np.zeros(h * w, dtype=np.int64)
    emitter[valid] = hit.emitter
    emitter = emitter.reshape(h, w)

    light = scene.lights[light_id - 1]
    if isinstance(light, AreaLight):
        return emitter == light_id

    depth = np.full(h * w, np.nan)
    t = hit.t.copy()
    t[hit.kind == _ESCAPE] = np.inf
    depth[valid] = t
    depth = depth.reshape(h, w)

    # every point light claims a disc; contested pixels go to the nearest
    best_dist = np.full((h, w), np.inf)
    best_owner = np.zeros((h, w), dtype=np.int64)
    offsets = [
        (dy, dx)
        for dy in range(-splat_radius, splat_radius + 1)
        for dx in range(-splat_radius, splat_radius + 1)
        if dy * dy + dx * dx <= splat_radius * splat_radius
    ]
    for other in scene.lights:
        if not isinstance(other, PointLight):
            continue
        proj = _project_to_pixel(camera, other.position)
        if proj is None:
            continue
        row, col, dist = proj
        for dy, dx in offsets:
            r, c = row + dy, col + dx
            if not (0 <= r < h and 0 <= c < w):
                continue
            if emitter[r, c] != 0:
                continue  # panel pixels belong to the panel
            d = depth[r, c]
            if not (np.isfinite(d) or np.isinf(d)):
                continue  # outside the image circle
            if d < dist - max(0.02, 0.01 * dist):
                continue  # light is occluded here
            if dist < best_dist[r, c]:
                best_dist[r, c] = dist
                best_owner[r, c] = other.light_id
    return best_owner == light_id
