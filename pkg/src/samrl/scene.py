"""Scene model: object point sets, poses and attributes plus the look-at camera.

The scene is a value type. Gradient updates go through :func:`flatten_params`
and :func:`unflatten_params`; the differentiable view of the same parameters
is :func:`scene_points`, which assembles world-frame splats on a tape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .autodiff import Tensor, apply
from .tasks import PegTask, RopeTask, TaskSpec, UnknownTaskError, make_task

SCENE_FORMAT_VERSION = 1
PEG_COLOR = (0.95, 0.55, 0.10)
ROPE_COLOR = (0.90, 0.15, 0.15)
ROPE_PARTICLES = 16
ROPE_REST_LENGTH = 0.008
ROPE_PARTICLE_MASS = 0.002
ROPE_K_STRETCH = 160.0
ROPE_K_BEND = 16.0
ROPE_DAMPING = 0.02
ROPE_SPRING_DAMPING = 0.1
GRAVITY = 9.8


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 46.47
    fy: float = 46.47
    cx: float = 15.5
    cy: float = 15.5
    width: int = 32
    height: int = 32

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise SceneError("image width and height must be at least 8")
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")

    @classmethod
    def from_fov(cls, width: int = 32, height: int = 32, fov_deg: float = 38.0) -> "Intrinsics":
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


PITCH_LIMIT = math.pi / 2 - 1e-3


@dataclass(frozen=True)
class CameraPose:
    """Look-at camera on a sphere around ``target``; up is +z."""

    yaw: float
    pitch: float
    radius: float = 0.75
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    intrinsics: Intrinsics = field(default_factory=Intrinsics)

    def __post_init__(self):
        if not self.radius > 0:
            raise SceneError(f"camera radius must be positive, got {self.radius}")
        if not abs(self.pitch) < PITCH_LIMIT:
            raise SceneError(f"camera pitch {self.pitch} outside (-pi/2 + 1e-3, pi/2 - 1e-3)")
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))

    @property
    def position(self) -> np.ndarray:
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        d = np.array([cp * math.cos(self.yaw), cp * math.sin(self.yaw), sp])
        return np.asarray(self.target) + self.radius * d

    def with_angles(self, yaw: float, pitch: float) -> "CameraPose":
        return replace(self, yaw=float(yaw), pitch=float(pitch))

    def to_dict(self) -> dict:
        return {"yaw": self.yaw, "pitch": self.pitch, "radius": self.radius,
                "target": list(self.target), "intrinsics": vars(self.intrinsics).copy()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(d["yaw"], d["pitch"], d["radius"], tuple(d["target"]), Intrinsics(**d["intrinsics"]))


@dataclass(frozen=True)
class ObjectModel:
    id: str
    kind: Literal["rigid", "particle"]
    points: np.ndarray
    colors: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    mass: float = 0.01
    stiffness: float = 1.0
    bend_stiffness: float = 1.0
    damping: float = 0.01

    def __post_init__(self):
        for name in ("points", "colors", "translation", "quaternion"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.kind not in ("rigid", "particle"):
            raise SceneError(f"object {self.id}: unknown kind {self.kind!r}")
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise SceneError(f"object {self.id}: points must be N x 3 with N >= 1")
        if self.colors.shape != self.points.shape:
            raise SceneError(f"object {self.id}: colors must match points shape")
        if self.colors.min() < 0.0 or self.colors.max() > 1.0:
            raise SceneError(f"object {self.id}: colors must lie in [0, 1]")
        if abs(np.linalg.norm(self.quaternion) - 1.0) > 1e-9:
            raise SceneError(f"object {self.id}: quaternion must be unit norm")
        if min(self.mass, self.stiffness, self.bend_stiffness) <= 0:
            raise SceneError(f"object {self.id}: mass and stiffness must be positive")

    def world_points(self) -> np.ndarray:
        if self.kind == "particle":
            return np.array(self.points)
        return self.points @ quat_to_matrix(self.quaternion).T + self.translation

    def equals(self, other: "ObjectModel") -> bool:
        return (self.id == other.id and self.kind == other.kind
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("points", "colors", "translation", "quaternion"))
                and (self.mass, self.stiffness, self.bend_stiffness, self.damping)
                == (other.mass, other.stiffness, other.bend_stiffness, other.damping))


@dataclass(frozen=True)
class SceneModel:
    objects: tuple[ObjectModel, ...]
    task: TaskSpec
    task_id: str

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise SceneError(f"object ids must be unique, got {ids}")

    @property
    def manipulated(self) -> ObjectModel:
        return self.objects[0]

    def with_object(self, index: int, obj: ObjectModel) -> "SceneModel":
        objs = list(self.objects)
        objs[index] = obj
        return replace(self, objects=tuple(objs))

    def equals(self, other: "SceneModel") -> bool:
        return (self.task_id == other.task_id and self.task == other.task
                and len(self.objects) == len(other.objects)
                and all(a.equals(b) for a, b in zip(self.objects, other.objects)))

    def fixture_points(self) -> tuple[np.ndarray, np.ndarray]:
        return _fixture_cache(self.task)


_FIXTURES: dict = {}


def _fixture_cache(task):
    hit = _FIXTURES.get(task)
    if hit is None:
        pts, cols = task.fixture_points()
        pts.flags.writeable = False
        cols.flags.writeable = False
        hit = _FIXTURES[task] = (pts, cols)
    return hit


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_about_z(angle: float) -> np.ndarray:
    return np.array([math.cos(angle / 2), 0.0, 0.0, math.sin(angle / 2)])


def yaw_of_quat(q: np.ndarray) -> float:
    """Heading of the rotated body x-axis projected on the ground plane."""
    r = quat_to_matrix(q)
    return math.atan2(r[1, 0], r[0, 0])


def _quat_to_matrix_t(q: Tensor) -> Tensor:
    qn = q / apply("sqrt", apply("square", q).sum())
    w, x, y, z = qn[0], qn[1], qn[2], qn[3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
        2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
        2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
    ]
    return apply("stack", *rows).reshape(3, 3)


# ---------------------------------------------------------------- canonical tasks

def peg_object(x: float = -0.13, y: float = 0.0, alpha: float = 0.0, length: float = 0.08) -> ObjectModel:
    gx = np.linspace(-length / 2, length / 2, 8)
    gy = np.linspace(-0.01, 0.01, 4)
    gz = np.linspace(-0.01, 0.01, 2)
    pts = np.stack(np.meshgrid(gx, gy, gz, indexing="ij"), axis=-1).reshape(-1, 3)
    cols = np.tile(PEG_COLOR, (len(pts), 1))
    # slightly brighter tip so heading is visible
    cols[pts[:, 0] > length / 2 - 1e-9] = (1.0, 0.85, 0.3)
    return ObjectModel("peg", "rigid", pts, cols, np.array([x, y, 0.0]), quat_about_z(alpha),
                       mass=0.05 / len(pts), stiffness=1.0, bend_stiffness=1.0, damping=0.0)


def hanging_rope(top=(-0.07, 0.0, 0.19), n: int = ROPE_PARTICLES, rest: float = ROPE_REST_LENGTH,
                 mass: float = ROPE_PARTICLE_MASS, k: float = ROPE_K_STRETCH) -> np.ndarray:
    """Straight hanging chain with the static stretch each spring carries."""
    top = np.asarray(top, dtype=float)
    pts = [top]
    for i in range(n - 1):
        load = (n - 1 - i) * mass * GRAVITY
        seg = rest + load / k
        pts.append(pts[-1] - np.array([0.0, 0.0, seg]))
    return np.array(pts)


def rope_object(points: np.ndarray | None = None) -> ObjectModel:
    pts = hanging_rope() if points is None else np.asarray(points, dtype=float)
    cols = np.tile(ROPE_COLOR, (len(pts), 1))
    cols[-1] = (1.0, 0.5, 0.5)
    return ObjectModel("rope", "particle", pts, cols, mass=ROPE_PARTICLE_MASS,
                       stiffness=ROPE_K_STRETCH, bend_stiffness=ROPE_K_BEND, damping=ROPE_DAMPING)


def ground_truth_scene(task_id: str, task: TaskSpec | None = None) -> SceneModel:
    if task_id == "peg":
        return SceneModel((peg_object(),), task or make_task("peg"), "peg")
    if task_id == "needle":
        return SceneModel((rope_object(),), task or make_task("needle"), "needle")
    raise UnknownTaskError(f"unknown task id {task_id!r}")


DEFAULT_CAMERAS = {
    "peg": dict(yaw=math.pi, pitch=0.08, radius=0.75, target=(0.0, 0.0, 0.0)),
    "needle": dict(yaw=math.pi, pitch=0.3, radius=0.75, target=(0.0, 0.0, 0.06)),
}


def default_camera(task_id: str, intrinsics: Intrinsics | None = None) -> CameraPose:
    """Starting view: low, behind the occluder slab."""
    try:
        kw = DEFAULT_CAMERAS[task_id]
    except KeyError:
        raise UnknownTaskError(f"unknown task id {task_id!r}") from None
    return CameraPose(intrinsics=intrinsics or Intrinsics(), **kw)


def init_model(task_id: str, perturb_seed: int = 0, perturb_scale: float = 0.0,
               task: TaskSpec | None = None) -> SceneModel:
    """Ground-truth task scene with its manipulated object perturbed.

    Rigid objects get a translation offset uniform in [-s, s]^3 and a rotation
    about +z uniform in [-s*pi, s*pi]; particle objects get independent
    per-particle jitter in [-s, s]^3.
    """
    if perturb_scale < 0:
        raise SceneError("perturb scale must be non-negative")
    scene = ground_truth_scene(task_id, task)
    if perturb_scale == 0:
        return scene
    rng = np.random.default_rng(perturb_seed)
    obj = scene.manipulated
    s = perturb_scale
    if obj.kind == "rigid":
        dt = rng.uniform(-s, s, 3)
        ang = rng.uniform(-s * math.pi, s * math.pi)
        q = _quat_mul(quat_about_z(ang), obj.quaternion)
        obj = replace(obj, translation=obj.translation + dt, quaternion=q / np.linalg.norm(q))
    else:
        obj = replace(obj, points=obj.points + rng.uniform(-s, s, obj.points.shape))
    return scene.with_object(0, obj)


def _quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


# ---------------------------------------------------------------- parameter vector

@dataclass(frozen=True)
class UpdateMask:
    pose: bool = True
    particles: bool = True
    colors: bool = False


@dataclass(frozen=True)
class LayoutEntry:
    object_index: int
    field: str
    start: int
    stop: int
    shape: tuple[int, ...]


@dataclass(frozen=True)
class Layout:
    entries: tuple[LayoutEntry, ...]
    object_ids: tuple[str, ...]

    @property
    def size(self) -> int:
        return self.entries[-1].stop if self.entries else 0


def flatten_params(scene: SceneModel, mask: UpdateMask = UpdateMask()) -> tuple[np.ndarray, Layout]:
    chunks, entries, pos = [], [], 0
    for i, obj in enumerate(scene.objects):
        fields = []
        if obj.kind == "rigid" and mask.pose:
            fields += [("translation", obj.translation), ("quaternion", obj.quaternion)]
        if obj.kind == "particle" and mask.particles:
            fields.append(("points", obj.points))
        if mask.colors:
            fields.append(("colors", obj.colors))
        for name, arr in fields:
            flat = np.asarray(arr, dtype=float).reshape(-1)
            entries.append(LayoutEntry(i, name, pos, pos + flat.size, arr.shape))
            chunks.append(flat)
            pos += flat.size
    vec = np.concatenate(chunks) if chunks else np.zeros(0)
    return vec, Layout(tuple(entries), tuple(o.id for o in scene.objects))


def unflatten_params(scene: SceneModel, vec: np.ndarray, layout: Layout) -> SceneModel:
    vec = np.asarray(vec, dtype=float)
    if layout.object_ids != tuple(o.id for o in scene.objects):
        raise SceneError("layout does not match scene objects")
    if vec.size != layout.size:
        raise SceneError(f"parameter vector has {vec.size} values, layout expects {layout.size}")
    objs = list(scene.objects)
    for e in layout.entries:
        obj = objs[e.object_index]
        cur = getattr(obj, e.field)
        if cur.shape != e.shape:
            raise SceneError(f"layout shape {e.shape} for {obj.id}.{e.field} does not match {cur.shape}")
        val = vec[e.start:e.stop].reshape(e.shape)
        if e.field == "quaternion":
            val = val / np.linalg.norm(val)
        elif e.field == "colors":
            val = np.clip(val, 0.0, 1.0)
        objs[e.object_index] = replace(obj, **{e.field: val})
    return replace(scene, objects=tuple(objs))


def scene_points(scene: SceneModel, vec: Tensor | None = None, layout: Layout | None = None,
                 fixtures: bool = True) -> tuple[Tensor, Tensor, np.ndarray]:
    """World-frame splat positions, colors and segmentation labels (1 = object).

    When ``vec``/``layout`` are given, the listed fields are read from ``vec``
    so gradients flow back to the flat parameter vector.
    """
    overrides: dict[tuple[int, str], Tensor] = {}
    if vec is not None:
        for e in layout.entries:
            overrides[(e.object_index, e.field)] = vec[e.start:e.stop].reshape(e.shape)
    pts, cols, seg = [], [], []
    for i, obj in enumerate(scene.objects):
        c = overrides.get((i, "colors"))
        cols.append(c if c is not None else Tensor(obj.colors))
        if obj.kind == "particle":
            p = overrides.get((i, "points"))
            pts.append(p if p is not None else Tensor(obj.points))
        else:
            t = overrides.get((i, "translation"))
            q = overrides.get((i, "quaternion"))
            if t is None and q is None:
                pts.append(Tensor(obj.world_points()))
            else:
                rot = _quat_to_matrix_t(q) if q is not None else Tensor(quat_to_matrix(obj.quaternion))
                tt = t if t is not None else Tensor(obj.translation)
                pts.append(Tensor(obj.points) @ rot.T + tt)
        seg.append(np.ones(len(obj.points)))
    if fixtures:
        fp, fc = scene.fixture_points()
        if len(fp):
            pts.append(Tensor(fp))
            cols.append(Tensor(fc))
            seg.append(np.zeros(len(fp)))
    if not pts:
        return Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))), np.zeros(0)
    if len(pts) == 1:
        return pts[0], cols[0], seg[0]
    return apply("concat", *pts, axis=0), apply("concat", *cols, axis=0), np.concatenate(seg)


# ---------------------------------------------------------------- resampling

def fps_indices(points: np.ndarray, n: int) -> np.ndarray:
    """Farthest-point order seeded at index 0; cycles when ``n`` exceeds the set size."""
    pts = np.asarray(points, dtype=float)
    m = len(pts)
    if m < 1 or n < 1:
        raise SceneError("resampling needs at least one point and n >= 1")
    k = min(n, m)
    order = np.empty(k, dtype=int)
    order[0] = 0
    dist = np.linalg.norm(pts - pts[0], axis=1)
    for i in range(1, k):
        j = int(np.argmax(dist))
        order[i] = j
        dist = np.minimum(dist, np.linalg.norm(pts - pts[j], axis=1))
    if n <= m:
        return order
    return order[np.arange(n) % m]


def resample_points(points: np.ndarray, n: int) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return pts[fps_indices(pts, n)]


# ---------------------------------------------------------------- serialization

def scene_to_json(scene: SceneModel) -> str:
    task = scene.task
    task_d = {k: getattr(task, k) for k in task.__dataclass_fields__ if k != "occluder"}
    occ = task.occluder
    task_d["occluder"] = None if occ is None else {k: getattr(occ, k) for k in occ.__dataclass_fields__}
    doc = {
        "version": SCENE_FORMAT_VERSION,
        "task_id": scene.task_id,
        "task": task_d,
        "objects": [{
            "id": o.id, "kind": o.kind, "points": o.points.tolist(), "colors": o.colors.tolist(),
            "translation": o.translation.tolist(), "quaternion": o.quaternion.tolist(),
            "mass": o.mass, "stiffness": o.stiffness, "bend_stiffness": o.bend_stiffness,
            "damping": o.damping,
        } for o in scene.objects],
    }
    return json.dumps(doc)


def scene_from_json(text: str) -> SceneModel:
    from .tasks import Occluder

    doc = json.loads(text)
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise SceneError(f"unsupported scene version {doc.get('version')!r}")
    td = dict(doc["task"])
    occ = td.pop("occluder", None)
    occ = None if occ is None else Occluder(**{k: tuple(v) if isinstance(v, list) else v for k, v in occ.items()})
    td = {k: tuple(v) if isinstance(v, list) else v for k, v in td.items()}
    cls = PegTask if doc["task_id"] == "peg" else RopeTask
    task = cls(occluder=occ, **td)
    objs = tuple(ObjectModel(**o) for o in doc["objects"])
    return SceneModel(objs, task, doc["task_id"])
