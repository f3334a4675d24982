"""Procedural lying-body scenes rendered through a pinhole depth camera.

World frame: z up, ground is the plane z = 0, the default camera sits above
the world origin looking along +x. Rendered clouds are in the camera frame
(x right, y down, z forward), like an RGB-D sensor.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cloudcore import Plane, PointCloud
from .errors import InvalidParams

WORLD_GROUND = Plane((0.0, 0.0, 1.0), 0.0)

# Table I grid
STATURES = (1500, 1600, 1700, 1800, 1900, 2000)
BMIS = (20, 25, 30)
SHS_VALUES = (0.4, 0.5, 0.6)
AGES = (20, 40, 60, 80)
ORIENTATIONS = (0, 45, -45, 90, -90, 135, -135, 180)

_LIFT = 0.002  # primitives float 2 mm above the ground


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit seed from a master seed and a key path (process independent)."""
    h = hashlib.blake2b(repr((int(master),) + tuple(keys)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


# --------------------------------------------------------------------------- primitives

def _rot_z(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float
    kind: str = "capsule"

    def transformed(self, rot, shift):
        return Capsule(rot @ self.a + shift, rot @ self.b + shift, self.radius)

    def intersect(self, ro, rd):
        t = np.minimum(_sphere_hit(ro, rd, self.a, self.radius), _sphere_hit(ro, rd, self.b, self.radius))
        ba = self.b - self.a
        baba = ba @ ba
        oa = ro - self.a
        bard = rd @ ba
        baoa = oa @ ba
        k2 = baba - bard * bard
        k1 = baba * (rd @ oa) - baoa * bard
        k0 = baba * (oa @ oa) - baoa * baoa - self.radius ** 2 * baba
        disc = k1 * k1 - k2 * k0
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (-k1 - np.sqrt(disc)) / k2
        y = baoa + tc * bard
        ok = (disc >= 0) & (k2 > 1e-12) & (y > 0) & (y < baba) & (tc > 0)
        return np.minimum(t, np.where(ok, tc, np.inf))

    def distance(self, p):
        ba = self.b - self.a
        h = np.clip(((p - self.a) @ ba) / (ba @ ba), 0.0, 1.0)
        return np.linalg.norm(p - self.a - h[:, None] * ba, axis=1) - self.radius

    def support(self, u):
        return max(self.a @ u, self.b @ u) + self.radius, min(self.a @ u, self.b @ u) - self.radius

    def to_json(self):
        return {"kind": "capsule", "a": list(self.a), "b": list(self.b), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    center: np.ndarray
    axes: np.ndarray  # columns are the local axes in world coordinates
    radii: np.ndarray
    kind: str = "ellipsoid"

    def transformed(self, rot, shift):
        return Ellipsoid(rot @ self.center + shift, rot @ self.axes, self.radii)

    def intersect(self, ro, rd):
        o = (self.axes.T @ (ro - self.center)) / self.radii
        d = (rd @ self.axes) / self.radii
        a = np.einsum("ij,ij->i", d, d)
        b = d @ o
        c = o @ o - 1.0
        disc = b * b - a * c
        with np.errstate(invalid="ignore"):
            t = (-b - np.sqrt(disc)) / a
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def implicit(self, p):
        """Algebraic distance normalised by the gradient (first-order surface distance)."""
        q = ((p - self.center) @ self.axes) / self.radii
        f = np.einsum("ij,ij->i", q, q) - 1.0
        grad = 2 * (q / self.radii) @ self.axes.T
        return f / np.linalg.norm(grad, axis=1)

    distance = implicit

    def support(self, u):
        w = (self.axes.T @ u) * self.radii
        s = float(np.sqrt(w @ w))
        return self.center @ u + s, self.center @ u - s

    def to_json(self):
        return {"kind": "ellipsoid", "center": list(self.center), "axes": self.axes.tolist(),
                "radii": list(self.radii)}


@dataclass(frozen=True, eq=False)
class Box:
    """Box standing on the ground, rotated by ``yaw`` degrees about z."""

    center: np.ndarray
    half: np.ndarray
    yaw: float = 0.0
    kind: str = "box"

    def _local(self, v):
        return v @ _rot_z(self.yaw)

    def intersect(self, ro, rd):
        o = self._local(ro - self.center)
        d = self._local(rd)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-self.half - o) / d
            t2 = (self.half - o) / d
        lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2)).max(axis=1)
        hi = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2)).min(axis=1)
        return np.where((hi >= lo) & (lo > 0), lo, np.inf)

    def distance(self, p):
        q = np.abs(self._local(p - self.center)) - self.half
        return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)

    def support(self, u):
        c = self.center @ u
        s = float(np.abs(self._local(u)) @ self.half)
        return c + s, c - s

    def to_json(self):
        return {"kind": "box", "center": list(self.center), "half": list(self.half), "yaw": self.yaw}


@dataclass(frozen=True, eq=False)
class Cylinder:
    """Vertical cylinder with its base on the ground."""

    base: np.ndarray  # (x, y, z0)
    radius: float
    length: float
    kind: str = "cylinder"

    def intersect(self, ro, rd):
        o = ro - self.base
        a = rd[:, 0] ** 2 + rd[:, 1] ** 2
        b = rd[:, 0] * o[0] + rd[:, 1] * o[1]
        c = o[0] ** 2 + o[1] ** 2 - self.radius ** 2
        disc = b * b - a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            ts = (-b - np.sqrt(disc)) / a
        z = o[2] + ts * rd[:, 2]
        side = np.where((disc >= 0) & (a > 1e-12) & (ts > 0) & (z >= 0) & (z <= self.length), ts, np.inf)
        t = side
        for zc in (0.0, self.length):
            with np.errstate(divide="ignore", invalid="ignore"):
                tc = (zc - o[2]) / rd[:, 2]
            x = o[0] + tc * rd[:, 0]
            y = o[1] + tc * rd[:, 1]
            cap = (tc > 0) & (x * x + y * y <= self.radius ** 2)
            t = np.minimum(t, np.where(cap, tc, np.inf))
        return t

    def distance(self, p):
        q = p - self.base
        dr = np.hypot(q[:, 0], q[:, 1]) - self.radius
        dz = np.abs(q[:, 2] - self.length / 2) - self.length / 2
        out = np.hypot(np.maximum(dr, 0), np.maximum(dz, 0))
        return out + np.minimum(np.maximum(dr, dz), 0)

    def support(self, u):
        c = self.base @ u
        r = self.radius * math.hypot(u[0], u[1])
        zs = (0.0, self.length * u[2])
        return c + r + max(zs), c - r + min(zs)

    def to_json(self):
        return {"kind": "cylinder", "base": list(self.base), "radius": self.radius, "length": self.length}


def primitive_from_json(d: dict):
    kind = d["kind"]
    if kind == "capsule":
        return Capsule(np.array(d["a"]), np.array(d["b"]), d["radius"])
    if kind == "ellipsoid":
        return Ellipsoid(np.array(d["center"]), np.array(d["axes"]), np.array(d["radii"]))
    if kind == "box":
        return Box(np.array(d["center"]), np.array(d["half"]), d["yaw"])
    if kind == "cylinder":
        return Cylinder(np.array(d["base"]), d["radius"], d["length"])
    raise ValueError(f"unknown primitive {kind!r}")


def _sphere_hit(ro, rd, c, r):
    oc = ro - c
    b = rd @ oc
    disc = b * b - (oc @ oc - r * r)
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


# --------------------------------------------------------------------------- bodies

@dataclass(frozen=True)
class BodyParams:
    stature: float  # mm
    bmi: float
    shs: float
    age: float
    orientation: float  # degrees about the ground normal

    def validate(self):
        if not 1200 <= self.stature <= 2200:
            raise InvalidParams(f"stature {self.stature} mm outside [1200, 2200]")
        if not 15 <= self.bmi <= 40:
            raise InvalidParams(f"bmi {self.bmi} outside [15, 40]")
        if not 0.3 < self.shs < 0.7:
            raise InvalidParams(f"shs {self.shs} outside (0.3, 0.7)")
        if not 0 < self.age <= 120:
            raise InvalidParams(f"age {self.age} outside (0, 120]")
        if not -180 < self.orientation <= 180:
            raise InvalidParams(f"orientation {self.orientation} outside (-180, 180]")
        return self


@dataclass(frozen=True, eq=False)
class BodyModel:
    primitives: tuple
    axis: np.ndarray  # unit vector from feet to head, in the ground plane
    torso_radius: float  # lateral half-width of the torso

    def axial_extent(self) -> float:
        hi = max(p.support(self.axis)[0] for p in self.primitives)
        lo = min(p.support(self.axis)[1] for p in self.primitives)
        return hi - lo

    def translated(self, shift) -> "BodyModel":
        shift = np.asarray(shift, dtype=float)
        eye = np.eye(3)
        return BodyModel(tuple(p.transformed(eye, shift) for p in self.primitives), self.axis, self.torso_radius)

    def lowest_point(self) -> float:
        down = np.array([0.0, 0.0, 1.0])
        return min(p.support(down)[1] for p in self.primitives)


def synth_body(params: BodyParams, seed: int = 0) -> BodyModel:
    """Capsule/ellipsoid body lying on its back, centred on the world origin.

    Torso length follows ``shs * stature``; girths scale with ``sqrt(bmi/22)``;
    age adds a mild torso sag and shoulder narrowing. ``seed`` only drives a
    +-2 % proportion jitter, so equal seeds give congruent bodies under
    rotation.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    jit = 1.0 + 0.02 * rng.uniform(-1, 1, size=6)
    S = params.stature / 1000.0
    g = math.sqrt(params.bmi / 22.0)
    sag = min(max((params.age - 20.0) / 60.0, 0.0), 1.0)

    head_len = 0.065 * S * jit[0]
    x_top = S / 2
    x_sh = x_top - 0.15 * S
    torso_len = params.shs * S - 0.15 * S
    x_hip = x_sh - torso_len
    w = 0.09 * S * g * (1 - 0.05 * sag) * jit[1]
    t = 0.065 * S * g * (1 - 0.12 * sag) * jit[2]

    prims = [
        Ellipsoid(np.array([x_top - head_len, 0, 0.05 * S + _LIFT]), np.eye(3),
                  np.array([head_len, 0.045 * S, 0.05 * S])),
        Ellipsoid(np.array([(x_sh + x_hip) / 2, 0, t + _LIFT]), np.eye(3),
                  np.array([torso_len / 2 + 0.03 * S, w, t])),
        Ellipsoid(np.array([x_hip, 0, 0.85 * t + _LIFT]), np.eye(3),
                  np.array([0.08 * S, 0.95 * w, 0.85 * t])),
    ]
    r_arm = 0.028 * S * g
    arm_len = 0.42 * S * jit[3]
    for side in (-1, 1):
        y = side * (w + 1.1 * r_arm)
        prims.append(Capsule(np.array([x_sh - 0.02 * S, y, r_arm + _LIFT]),
                             np.array([x_sh - 0.02 * S - arm_len + 2 * r_arm, y, r_arm + _LIFT]), r_arm))
    leg_len = x_hip - (-x_top)
    r_thigh = 0.055 * S * g * jit[4]
    r_shin = 0.038 * S * g
    x_knee = x_hip - 0.5 * leg_len
    spread = 0.055 * S * jit[5]
    for side in (-1, 1):
        y = side * spread
        prims.append(Capsule(np.array([x_hip, y, r_thigh + _LIFT]), np.array([x_knee, y, r_thigh + _LIFT]), r_thigh))
        prims.append(Capsule(np.array([x_knee, y, r_shin + _LIFT]),
                             np.array([-x_top + r_shin, y, r_shin + _LIFT]), r_shin))

    rot = _rot_z(params.orientation)
    zero = np.zeros(3)
    return BodyModel(tuple(p.transformed(rot, zero) for p in prims), rot @ np.array([1.0, 0, 0]), w)


# --------------------------------------------------------------------------- camera

@dataclass(frozen=True, eq=False)
class CameraModel:
    width: int = 160
    height: int = 120
    fx: float = 120.0
    fy: float = 120.0
    cx: float = 80.0
    cy: float = 60.0
    rotation: np.ndarray = field(default_factory=lambda: pitched_rotation(25.0))  # camera -> world
    position: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.4]))
    near: float = 0.1
    far: float = 6.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParams("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParams("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int = 160, height: int = 120, fx: float = 120.0, mount_height: float = 0.4,
                pitch_deg: float = 25.0) -> "CameraModel":
        return cls(width, height, fx, fx, width / 2, height / 2, pitched_rotation(pitch_deg),
                   np.array([0.0, 0.0, mount_height]))

    def pixel_rays(self) -> np.ndarray:
        """(H*W, 3) camera-frame ray directions with unit z."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(u.shape)], axis=-1)
        return d.reshape(-1, 3)

    def to_camera(self, pts_world: np.ndarray) -> np.ndarray:
        return (np.asarray(pts_world) - self.position) @ self.rotation

    def to_world(self, pts_cam: np.ndarray) -> np.ndarray:
        return np.asarray(pts_cam) @ self.rotation.T + self.position

    def to_json(self):
        return {"width": self.width, "height": self.height, "fx": self.fx, "fy": self.fy, "cx": self.cx,
                "cy": self.cy, "rotation": self.rotation.tolist(), "position": list(self.position),
                "near": self.near, "far": self.far}

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["rotation"] = np.array(d["rotation"])
        d["position"] = np.array(d["position"])
        return cls(**d)


def pitched_rotation(pitch_deg: float) -> np.ndarray:
    """Camera->world rotation for a camera looking along world +x, pitched down."""
    p = math.radians(pitch_deg)
    fwd = np.array([math.cos(p), 0.0, -math.sin(p)])
    right = np.array([0.0, -1.0, 0.0])
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


# --------------------------------------------------------------------------- scenes

@dataclass(frozen=True, eq=False)
class Scene:
    label: str  # "casualty" | "non-casualty"
    seed: int
    body: BodyModel | None = None
    body_params: BodyParams | None = None
    body_seed: int | None = None
    body_position: tuple | None = None
    distractors: tuple = ()
    ground: Plane = WORLD_GROUND

    def __post_init__(self):
        if (self.label == "casualty") != (self.body is not None):
            raise InvalidParams("label must be casualty iff a body is present")

    @property
    def objects(self) -> tuple:
        body = self.body.primitives if self.body is not None else ()
        return tuple(body) + tuple(self.distractors)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "body": None if self.body is None else {
                "params": asdict(self.body_params),
                "seed": self.body_seed,
                "position": list(self.body_position),
            },
            "distractors": [d.to_json() for d in self.distractors],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        body = params = bseed = pos = None
        if d.get("body"):
            params = BodyParams(**d["body"]["params"])
            bseed = d["body"]["seed"]
            pos = tuple(d["body"]["position"])
            body = synth_body(params, bseed).translated(pos)
        return cls(d["label"], d["seed"], body, params, bseed, pos,
                   tuple(primitive_from_json(p) for p in d["distractors"]))


def render_cloud(scene: Scene, camera: CameraModel, with_ids: bool = False):
    """Ray-cast every pixel against the ground and all scene primitives.

    Misses and depths outside ``[near, far]`` are invalid. With
    ``with_ids`` also returns a (H, W) int array: -1 miss, 0 ground,
    ``k >= 1`` the k-th entry of ``scene.objects``.
    """
    d_cam = camera.pixel_rays()
    scale = np.linalg.norm(d_cam, axis=1)
    rd = (d_cam @ camera.rotation.T) / scale[:, None]
    ro = camera.position

    best = np.full(len(rd), np.inf)
    ids = np.full(len(rd), -1)
    n, off = scene.ground.n, scene.ground.offset
    denom = rd @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -(ro @ n + off) / denom
    tg = np.where((denom < 0) & (tg > 0), tg, np.inf)
    hit = tg < best
    best[hit], ids[hit] = tg[hit], 0
    for k, prim in enumerate(scene.objects, start=1):
        t = prim.intersect(ro, rd)
        hit = t < best
        best[hit], ids[hit] = t[hit], k

    depth = best / scale
    ok = np.isfinite(depth) & (depth >= camera.near) & (depth <= camera.far)
    xyz = np.full((len(rd), 3), np.nan)
    xyz[ok] = d_cam[ok] * depth[ok, None]
    ids[~ok] = -1
    cloud = PointCloud(xyz.reshape(camera.height, camera.width, 3))
    if with_ids:
        return cloud, ids.reshape(camera.height, camera.width)
    return cloud


@dataclass(frozen=True)
class SampleSpec:
    """What to generate: a label plus per-parameter value sets.

    Each parameter is either a tuple of discrete values or a tuple of
    ``(lo, hi)`` intervals sampled uniformly (proportional to length).
    """

    label: str = "casualty"
    stature: tuple = STATURES
    bmi: tuple = BMIS
    shs: tuple = SHS_VALUES
    age: tuple = AGES
    orientation: tuple = ORIENTATIONS
    forward: tuple = (1.2, 2.8)  # metres ahead of the camera foot point
    lateral_fill: float = 0.6  # fraction of the half field of view usable for body centres
    max_distractors: int = 3

    def to_json(self) -> dict:
        return {k: (list(map(list, v)) if v and isinstance(v[0], (tuple, list)) else list(v))
                if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "SampleSpec":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        return cls(**d)


def draw_value(rng: np.random.Generator, choice: tuple) -> float:
    if choice and isinstance(choice[0], (tuple, list)):
        lengths = np.array([hi - lo for lo, hi in choice], dtype=float)
        k = rng.choice(len(choice), p=lengths / lengths.sum())
        lo, hi = choice[k]
        return float(rng.uniform(lo, hi))
    return float(choice[rng.integers(len(choice))])


def _in_view_ground_point(rng, camera: CameraModel, forward: tuple, fill: float):
    fwd = float(rng.uniform(*forward))
    half = math.atan2(camera.cx, camera.fx) * fill
    lat = float(rng.uniform(-1, 1)) * fwd * math.tan(half)
    cam_xy = camera.position[:2]
    heading = camera.rotation[:, 2][:2]
    heading = heading / np.linalg.norm(heading)
    left = np.array([-heading[1], heading[0]])
    xy = cam_xy + fwd * heading + lat * left
    return float(xy[0]), float(xy[1])


def _distractor(rng, x, y):
    if rng.random() < 0.5:
        half = rng.uniform(0.1, 0.75, size=3)
        return Box(np.array([x, y, half[2]]), half, float(rng.uniform(-180, 180)))
    radius = float(rng.uniform(0.1, 0.75))
    return Cylinder(np.array([x, y, 0.0]), radius, float(rng.uniform(0.2, 1.5)))


def generate_sample(spec: SampleSpec, seed: int, camera: CameraModel | None = None):
    """Generate one labelled scene and its rendered cloud; pure in (spec, seed)."""
    camera = camera or CameraModel.default()
    rng = np.random.default_rng(seed)
    if spec.label == "casualty":
        params = BodyParams(
            draw_value(rng, spec.stature),
            draw_value(rng, spec.bmi),
            draw_value(rng, spec.shs),
            draw_value(rng, spec.age),
            draw_value(rng, spec.orientation),
        ).validate()
        bseed = int(rng.integers(2 ** 31))
        pos = _in_view_ground_point(rng, camera, spec.forward, spec.lateral_fill)
        pos = (float(pos[0]), float(pos[1]), 0.0)
        body = synth_body(params, bseed).translated(pos)
        scene = Scene("casualty", seed, body, params, bseed, pos)
    elif spec.label == "non-casualty":
        k = int(rng.integers(spec.max_distractors + 1))
        objs = []
        for _ in range(k):
            x, y = _in_view_ground_point(rng, camera, spec.forward, spec.lateral_fill)
            objs.append(_distractor(rng, x, y))
        scene = Scene("non-casualty", seed, distractors=tuple(objs))
    else:
        raise InvalidParams(f"unknown label {spec.label!r}")
    return render_cloud(scene, camera), scene
