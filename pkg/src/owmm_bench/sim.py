"""Robot kinematics and the observation model.

Camera-frame coordinates are ``(forward, right, up)``.  A pixel ``(u, v)``
has its origin at the top-left corner of the image; the optical axis goes
through ``(W/2, H/2)``.  Depth values are ranges along the pixel ray.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .world import SceneSpec, TaskInstance

DEFAULT_HFOV = 1.57
DEFAULT_IMAGE_SIZE = (512, 512)
CAMERA_HEIGHT = 1.2
CAMERA_PITCH = -0.35
EE_FORWARD = 0.4
EE_HEIGHT = 0.9
NEAR_PLANE = 1e-3
V_MAX = 1.0
W_MAX = 1.5

FLOOR = 0
NO_HIT = -1

_POSE_STREAM = 0x9051


class InvalidDepth(ValueError):
    """Reverse projection needs a finite positive range inside the image."""


class NoViewpoint(RuntimeError):
    """No navigable pose sees a required receptacle."""


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, 2 * math.pi)
    return math.pi if w <= -math.pi else w


# --------------------------------------------------------------------------
# camera model


@dataclass(frozen=True)
class CameraPose:
    position: tuple
    yaw: float
    pitch: float
    hfov: float = DEFAULT_HFOV
    image_size: tuple = DEFAULT_IMAGE_SIZE

    def __post_init__(self):
        if not 0 < self.hfov < math.pi:
            raise ValueError("hfov must lie in (0, pi)")
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise ValueError("image size must be positive")

    @property
    def focal(self) -> float:
        return (self.image_size[0] / 2) / math.tan(self.hfov / 2)

    @property
    def principal_point(self) -> tuple:
        return self.image_size[0] / 2, self.image_size[1] / 2

    @property
    def diagonal(self) -> float:
        return math.hypot(*self.image_size)

    def basis(self) -> tuple:
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        forward = np.array([cy * cp, sy * cp, sp])
        right = np.array([sy, -cy, 0.0])
        up = np.array([-cy * sp, -sy * sp, cp])
        return forward, right, up

    def world_to_camera(self, p) -> np.ndarray:
        d = np.asarray(p, dtype=float) - np.asarray(self.position, dtype=float)
        f, r, u = self.basis()
        return np.stack([d @ f, d @ r, d @ u], axis=-1)

    def camera_to_world(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        f, r, u = self.basis()
        return np.asarray(self.position, dtype=float) + c[..., 0:1] * f + c[..., 1:2] * r + c[..., 2:3] * u

    def camera_to_pixel(self, c) -> tuple:
        fw, rt, up = c
        cx, cy = self.principal_point
        return cx + self.focal * rt / fw, cy - self.focal * up / fw

    def project_point(self, p) -> Optional[tuple]:
        """(u, v, range) of a world point, or None if it is not in front of the camera."""
        c = self.world_to_camera(p)
        if c[0] <= NEAR_PLANE:
            return None
        u, v = self.camera_to_pixel(c)
        return float(u), float(v), float(np.linalg.norm(c))

    def in_image(self, u: float, v: float) -> bool:
        return 0 <= u <= self.image_size[0] and 0 <= v <= self.image_size[1]

    def pixel_dirs(self, us, vs) -> np.ndarray:
        """Unit world directions of rays through continuous pixel coordinates."""
        us = np.asarray(us, dtype=float)
        vs = np.asarray(vs, dtype=float)
        cx, cy = self.principal_point
        a = (us - cx) / self.focal
        b = -(vs - cy) / self.focal
        n = np.sqrt(1.0 + a * a + b * b)
        f, r, u = self.basis()
        d0, d1, d2 = 1.0 / n, a / n, b / n
        return np.stack(
            [d0 * f[0] + d1 * r[0] + d2 * u[0], d0 * f[1] + d1 * r[1] + d2 * u[1], d0 * f[2] + d1 * r[2] + d2 * u[2]],
            axis=-1,
        )

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "yaw": self.yaw,
            "pitch": self.pitch,
            "hfov": self.hfov,
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(tuple(d["position"]), d["yaw"], d["pitch"], d["hfov"], tuple(d["image_size"]))


def project_bbox(camera: CameraPose, center, radius: float) -> Optional[tuple]:
    """Pixel box of a sphere and the range to its center.

    The box is the square centred on the projected center that covers the
    sphere's whole image; it is clipped to the image.  Returns None when the
    center is not in front of the camera or nothing of the box is on screen.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    c = camera.world_to_camera(center)
    fw, rt, up = (float(x) for x in c)
    if fw <= NEAR_PLANE:
        return None
    W, H = camera.image_size
    f = camera.focal
    u, v = camera.camera_to_pixel((fw, rt, up))
    half = 0.0
    big = 4.0 * (W + H)
    for lateral, centre_px, sign in ((rt, u, 1.0), (up, v, -1.0)):
        dist = math.hypot(fw, lateral)
        if radius >= dist:
            half = big
            break
        alpha = math.asin(radius / dist)
        theta = math.atan2(lateral, fw)
        for t in (theta - alpha, theta + alpha):
            if abs(t) >= math.pi / 2 - 1e-9:
                half = big
                break
            px = (W / 2 if sign > 0 else H / 2) + sign * f * math.tan(t)
            half = max(half, abs(px - centre_px))
    x1, x2 = min(max(u - half, 0.0), W), min(max(u + half, 0.0), W)
    y1, y2 = min(max(v - half, 0.0), H), min(max(v + half, 0.0), H)
    if x1 >= x2 or y1 >= y2:
        return None
    return (x1, y1, x2, y2), float(np.linalg.norm(c))


_BOX_EDGES = [(0, 1), (2, 3), (4, 5), (6, 7), (0, 2), (1, 3), (4, 6), (5, 7), (0, 4), (1, 5), (2, 6), (3, 7)]


def project_box(camera: CameraPose, lo, hi) -> Optional[tuple]:
    """Pixel box of an axis-aligned 3-D box, clipped at the near plane and the image."""
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    cam = camera.world_to_camera(corners)
    pts = [c for c in cam if c[0] >= NEAR_PLANE]
    for a, b in _BOX_EDGES:
        fa, fb = cam[a][0], cam[b][0]
        if (fa - NEAR_PLANE) * (fb - NEAR_PLANE) < 0:
            t = (NEAR_PLANE - fa) / (fb - fa)
            pts.append(cam[a] + t * (cam[b] - cam[a]))
    if not pts:
        return None
    uv = np.array([camera.camera_to_pixel(p) for p in pts])
    W, H = camera.image_size
    x1, x2 = min(max(uv[:, 0].min(), 0.0), W), min(max(uv[:, 0].max(), 0.0), W)
    y1, y2 = min(max(uv[:, 1].min(), 0.0), H), min(max(uv[:, 1].max(), 0.0), H)
    if x1 >= x2 or y1 >= y2:
        return None
    return (float(x1), float(y1), float(x2), float(y2))


def unproject(camera: CameraPose, pixel, depth_m: float) -> np.ndarray:
    """World point at range ``depth_m`` along the ray through ``pixel``."""
    u, v = float(pixel[0]), float(pixel[1])
    if not camera.in_image(u, v):
        raise InvalidDepth(f"pixel {pixel} outside the image")
    if not (math.isfinite(depth_m) and depth_m > 0):
        raise InvalidDepth(f"depth {depth_m!r} is not a finite positive range")
    d = camera.pixel_dirs(u, v)
    return np.asarray(camera.position, dtype=float) + depth_m * d


def norm_bbox(bbox_px, image_size) -> tuple:
    W, H = image_size
    x1, y1, x2, y2 = bbox_px
    return (
        int(math.floor(x1 * 1000 / W)),
        int(math.floor(y1 * 1000 / H)),
        int(math.floor(x2 * 1000 / W)),
        int(math.floor(y2 * 1000 / H)),
    )


def norm_to_px(bbox_norm, image_size) -> tuple:
    W, H = image_size
    x1, y1, x2, y2 = bbox_norm
    return x1 * W / 1000, y1 * H / 1000, x2 * W / 1000, y2 * H / 1000


def bbox_center(bbox) -> tuple:
    return (bbox[0] + bbox[2]) / 2, (bbox[1] + bbox[3]) / 2


# --------------------------------------------------------------------------
# ray casting


def _visible_objects(scene: SceneSpec) -> list:
    return [o for o in scene.objects if o.resting_on != "held"]


def entity_index(scene: SceneSpec, entity_id: str) -> int:
    """Hit code of an entity: 0 floor, 1..R receptacles, R+1.. objects."""
    for k, r in enumerate(scene.receptacles):
        if r.rec_id == entity_id:
            return 1 + k
    for k, o in enumerate(scene.objects):
        if o.obj_id == entity_id:
            return 1 + len(scene.receptacles) + k
    raise KeyError(entity_id)


def cast_rays(scene: SceneSpec, origin, dirs) -> tuple:
    """First hit along each ray: (ranges, hit codes).  Misses give (+inf, -1)."""
    o = np.asarray(origin, dtype=float)
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    n = d.shape[0]
    best = np.full(n, np.inf)
    code = np.full(n, NO_HIT, dtype=int)

    dz = d[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dz < 0, (scene.floor_height - o[2]) / dz, np.inf)
    hit = (t > 0) & (t < best)
    best = np.where(hit, t, best)
    code = np.where(hit, FLOOR, code)

    for k, rec in enumerate(scene.receptacles):
        lo, hi = rec.box_min, rec.box_max
        tmin = np.full(n, -np.inf)
        tmax = np.full(n, np.inf)
        miss = np.zeros(n, dtype=bool)
        for ax in range(3):
            da = d[:, ax]
            par = np.abs(da) < 1e-15
            outside = (o[ax] < lo[ax]) | (o[ax] > hi[ax])
            miss |= par & outside
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo[ax] - o[ax]) / da
                t2 = (hi[ax] - o[ax]) / da
            near = np.where(par, -np.inf, np.minimum(t1, t2))
            far = np.where(par, np.inf, np.maximum(t1, t2))
            tmin = np.maximum(tmin, near)
            tmax = np.minimum(tmax, far)
        t_hit = np.where(tmin > 0, tmin, tmax)
        ok = ~miss & (tmax >= tmin) & (t_hit > 0) & (t_hit < best)
        best = np.where(ok, t_hit, best)
        code = np.where(ok, 1 + k, code)

    nrec = len(scene.receptacles)
    for k, obj in enumerate(scene.objects):
        if obj.resting_on == "held":
            continue
        oc = o - np.asarray(obj.position, dtype=float)
        b = d @ oc
        c = oc @ oc - obj.bound_radius ** 2
        disc = b * b - c
        with np.errstate(invalid="ignore"):
            s = np.sqrt(np.where(disc >= 0, disc, 0.0))
        t_hit = np.where(-b - s > 0, -b - s, -b + s)
        ok = (disc >= 0) & (t_hit > 0) & (t_hit < best)
        best = np.where(ok, t_hit, best)
        code = np.where(ok, 1 + nrec + k, code)
    return best, code


def center_ray_hits(scene: SceneSpec, origin, target, code: int) -> bool:
    """Occlusion rule: the first surface on the ray towards ``target`` belongs to entity ``code``."""
    vec = np.asarray(target, dtype=float) - np.asarray(origin, dtype=float)
    dist = float(np.linalg.norm(vec))
    if dist <= 0:
        return False
    t, c = cast_rays(scene, origin, vec / dist)
    return int(c[0]) == code and float(t[0]) <= dist + 1e-9


# --------------------------------------------------------------------------
# robot state and observation


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    yaw: float
    camera_height: float = CAMERA_HEIGHT
    camera_pitch: float = CAMERA_PITCH
    holding: Optional[str] = None
    step_index: int = 0
    collision: bool = False

    @property
    def xy(self) -> tuple:
        return self.x, self.y

    def camera(self, hfov: float = DEFAULT_HFOV, image_size: tuple = DEFAULT_IMAGE_SIZE) -> CameraPose:
        return CameraPose((self.x, self.y, self.camera_height), self.yaw, self.camera_pitch, hfov, tuple(image_size))

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "yaw": self.yaw,
            "camera_height": self.camera_height,
            "camera_pitch": self.camera_pitch,
            "holding": self.holding,
            "step_index": self.step_index,
            "collision": self.collision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobotState":
        return cls(**d)


def end_effector(state: RobotState) -> tuple:
    return (
        state.x + EE_FORWARD * math.cos(state.yaw),
        state.y + EE_FORWARD * math.sin(state.yaw),
        EE_HEIGHT,
    )


@dataclass(frozen=True)
class Entity:
    entity_id: str
    kind: str
    label: str
    bbox_px: tuple
    bbox_norm: tuple
    depth_m: float
    center_px: tuple

    def to_dict(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "kind": self.kind,
            "label": self.label,
            "bbox_px": list(self.bbox_px),
            "bbox_norm": list(self.bbox_norm),
            "depth_m": self.depth_m,
            "center_px": list(self.center_px),
        }


@dataclass(eq=False)
class Observation:
    camera: CameraPose
    entities: tuple
    scene: SceneSpec = field(repr=False)
    _raster: Optional[tuple] = field(default=None, repr=False)

    def entity(self, entity_id: str) -> Optional[Entity]:
        for e in self.entities:
            if e.entity_id == entity_id:
                return e
        return None

    def _render(self) -> tuple:
        if self._raster is None:
            W, H = self.camera.image_size
            us, vs = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
            dirs = self.camera.pixel_dirs(us.ravel(), vs.ravel())
            t, c = cast_rays(self.scene, self.camera.position, dirs)
            self._raster = (t.reshape(H, W), c.reshape(H, W))
        return self._raster

    @property
    def depth(self) -> np.ndarray:
        """(H, W) ranges in meters, +inf where the ray escapes."""
        return self._render()[0]

    @property
    def hit_codes(self) -> np.ndarray:
        return self._render()[1]

    def depth_at(self, u: float, v: float) -> float:
        """Depth raster value of the pixel containing (u, v), computed for that ray alone."""
        W, H = self.camera.image_size
        i = min(max(int(math.floor(u)), 0), W - 1)
        j = min(max(int(math.floor(v)), 0), H - 1)
        if self._raster is not None:
            return float(self._raster[0][j, i])
        d = self.camera.pixel_dirs(np.array([i + 0.5]), np.array([j + 0.5]))
        t, _ = cast_rays(self.scene, self.camera.position, d)
        return float(t[0])

    def to_dict(self) -> dict:
        return {"camera": self.camera.to_dict(), "entities": [e.to_dict() for e in self.entities]}


def observe(
    state: RobotState,
    scene: SceneSpec,
    hfov: float = DEFAULT_HFOV,
    image_size: tuple = DEFAULT_IMAGE_SIZE,
) -> Observation:
    camera = state.camera(hfov, image_size)
    return observe_from(camera, scene)


def observe_from(camera: CameraPose, scene: SceneSpec) -> Observation:
    origin = np.asarray(camera.position, dtype=float)
    ents = []
    for k, rec in enumerate(scene.receptacles):
        c = rec.center3d
        pc = camera.project_point(c)
        if pc is None:
            continue
        box = project_box(camera, rec.box_min, rec.box_max)
        if box is None or not center_ray_hits(scene, origin, c, 1 + k):
            continue
        ents.append(Entity(rec.rec_id, "receptacle", rec.label, box, norm_bbox(box, camera.image_size), pc[2], pc[:2]))
    nrec = len(scene.receptacles)
    for k, obj in enumerate(scene.objects):
        if obj.resting_on == "held":
            continue
        res = project_bbox(camera, obj.position, obj.bound_radius)
        if res is None or not center_ray_hits(scene, origin, obj.position, 1 + nrec + k):
            continue
        box, rng = res
        pc = camera.project_point(obj.position)
        ents.append(Entity(obj.obj_id, "object", obj.label, box, norm_bbox(box, camera.image_size), rng, pc[:2]))
    ents.sort(key=lambda e: e.entity_id)
    return Observation(camera, tuple(ents), scene)


def point_visible(camera: CameraPose, scene: SceneSpec, point, code: int) -> bool:
    """True if ``point`` projects into the image and lies on the first surface of ``code``."""
    p = camera.project_point(point)
    if p is None or not camera.in_image(p[0], p[1]):
        return False
    origin = np.asarray(camera.position, dtype=float)
    vec = np.asarray(point, dtype=float) - origin
    dist = float(np.linalg.norm(vec))
    t, c = cast_rays(scene, origin, vec / dist)
    return int(c[0]) == code and abs(float(t[0]) - dist) <= 1e-6 + 1e-6 * dist


# Flat palette: floor, receptacle, object, miss.
PALETTE = {"floor": (128, 128, 128), "receptacle": (139, 90, 43), "object": (220, 40, 40), "none": (0, 0, 0)}


def raster_rgb(obs: Observation) -> np.ndarray:
    codes = obs.hit_codes
    nrec = len(obs.scene.receptacles)
    img = np.zeros(codes.shape + (3,), dtype=np.uint8)
    img[codes == FLOOR] = PALETTE["floor"]
    img[(codes >= 1) & (codes <= nrec)] = PALETTE["receptacle"]
    img[codes > nrec] = PALETTE["object"]
    return img


def to_ppm(obs: Observation) -> bytes:
    img = raster_rgb(obs)
    H, W = img.shape[:2]
    return f"P6\n{W} {H}\n255\n".encode("ascii") + img.tobytes()


# --------------------------------------------------------------------------
# kinematics


@dataclass(frozen=True)
class Grasp:
    obj_id: str


@dataclass(frozen=True)
class Ungrasp:
    point: tuple


@dataclass(frozen=True)
class LowLevelAction:
    linear: float = 0.0
    angular: float = 0.0
    gripper: object = None

    def check(self, v_max: float = V_MAX, w_max: float = W_MAX) -> None:
        if abs(self.linear) > v_max + 1e-12 or abs(self.angular) > w_max + 1e-12:
            raise ValueError(f"velocity command ({self.linear}, {self.angular}) out of bounds")


@dataclass(frozen=True)
class StepResult:
    state: RobotState
    scene: SceneSpec
    collision: bool
    gripper: object = None


def carry_held(state: RobotState, scene: SceneSpec) -> SceneSpec:
    """Move the held object, if any, to the end effector."""
    if state.holding is None:
        return scene
    obj = scene.object(state.holding)
    return scene.with_object(replace(obj, position=end_effector(state), resting_on="held"))


def step(
    state: RobotState,
    scene: SceneSpec,
    action: LowLevelAction,
    dt: float,
    v_max: float = V_MAX,
    w_max: float = W_MAX,
    reach=None,
) -> StepResult:
    """Unicycle integration with collision stop, then any gripper command."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    action.check(v_max, w_max)
    nx = state.x + action.linear * math.cos(state.yaw) * dt
    ny = state.y + action.linear * math.sin(state.yaw) * dt
    yaw = wrap_angle(state.yaw + action.angular * dt)
    collided = not scene.is_navigable(nx, ny)
    if collided:
        nx, ny = state.x, state.y
    new = replace(state, x=nx, y=ny, yaw=yaw, step_index=state.step_index + 1, collision=collided)
    scene = carry_held(new, scene)
    outcome = None
    if action.gripper is not None:
        from . import planner

        reach = reach or planner.ReachModel()
        if isinstance(action.gripper, Grasp):
            obj = scene.object(action.gripper.obj_id)
            outcome = planner.try_grasp(new, scene, obj.position, reach.pick_success_radius, reach)
        elif isinstance(action.gripper, Ungrasp):
            outcome = planner.try_release(new, scene, action.gripper.point, reach)
        else:
            raise TypeError(f"unknown gripper command {action.gripper!r}")
        new, scene = outcome.state, outcome.scene
    return StepResult(new, scene, collided, outcome)


# --------------------------------------------------------------------------
# pose graph


PROVENANCES = ("at_start_rec", "at_goal_rec", "random")


@dataclass(eq=False)
class PoseGraph:
    frames: tuple
    provenance: tuple
    poses: tuple

    def __len__(self) -> int:
        return len(self.frames)

    def index_of(self, provenance: str) -> int:
        return self.provenance.index(provenance)

    def to_dict(self) -> dict:
        return {
            "provenance": list(self.provenance),
            "poses": [p.to_dict() for p in self.poses],
            "frames": [f.to_dict() for f in self.frames],
        }

    @classmethod
    def from_poses(cls, scene: SceneSpec, poses, provenance, hfov=DEFAULT_HFOV, image_size=DEFAULT_IMAGE_SIZE):
        frames = tuple(observe(p, scene, hfov, image_size) for p in poses)
        return cls(frames, tuple(provenance), tuple(poses))


def _find_viewpoint(scene, rec_id, rng, view_range, max_retries, hfov, image_size, extra=None):
    rec = scene.receptacle(rec_id)
    centers = scene.free_centers
    d = np.hypot(centers[:, 0] - rec.center[0], centers[:, 1] - rec.center[1])
    idx = np.flatnonzero((d >= view_range[0]) & (d <= view_range[1]))
    order = idx[rng.permutation(len(idx))][:max_retries]
    W, H = image_size
    fallback = None
    for k in order:
        x, y = (float(v) for v in centers[k])
        yaw = math.atan2(rec.center[1] - y, rec.center[0] - x)
        st = RobotState(x, y, yaw)
        obs = observe(st, scene, hfov, image_size)
        ent = obs.entity(rec_id)
        if ent is None:
            continue
        u, v = ent.center_px
        if not (0.1 * W <= u <= 0.9 * W and 0.1 * H <= v <= 0.9 * H):
            continue
        if extra is None or extra(st, obs):
            return st
        if fallback is None:
            fallback = st
    if fallback is not None:
        return fallback
    raise NoViewpoint(f"{scene.scene_id}: no navigable pose sees {rec_id}")


def render_pose_graph(
    scene: SceneSpec,
    task: TaskInstance,
    seed: int,
    n_random: int = 3,
    hfov: float = DEFAULT_HFOV,
    image_size: tuple = DEFAULT_IMAGE_SIZE,
    view_range: tuple = (1.2, 2.6),
    max_retries: int = 500,
) -> PoseGraph:
    """Posed frames at the start and goal receptacles plus random poses, shuffled by ``seed``."""
    from .world import place_point

    if n_random < 0:
        raise ValueError("n_random must be >= 0")
    rng = np.random.default_rng([_POSE_STREAM, seed])

    def sees_object(st, obs):
        return obs.entity(task.object) is not None

    goal = scene.receptacle(task.goal_rec)
    goal_code = entity_index(scene, task.goal_rec)
    pp = place_point(scene, goal, ignore=(task.object,))

    def sees_place_point(st, obs):
        return pp is not None and point_visible(obs.camera, scene, pp, goal_code)

    start_pose = _find_viewpoint(scene, task.start_rec, rng, view_range, max_retries, hfov, image_size, sees_object)
    goal_pose = _find_viewpoint(scene, task.goal_rec, rng, view_range, max_retries, hfov, image_size, sees_place_point)
    poses = [start_pose, goal_pose]
    prov = ["at_start_rec", "at_goal_rec"]
    centers = scene.free_centers
    for _ in range(n_random):
        k = int(rng.integers(len(centers)))
        yaw = float(rng.uniform(-math.pi, math.pi))
        poses.append(RobotState(float(centers[k, 0]), float(centers[k, 1]), yaw))
        prov.append("random")
    perm = rng.permutation(len(poses))
    poses = [poses[i] for i in perm]
    prov = [prov[i] for i in perm]
    return PoseGraph.from_poses(scene, poses, prov, hfov, image_size)
