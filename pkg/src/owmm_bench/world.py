"""Procedural scenes and "Move A from B to C" task instances.

The world is planar 2.5-D: the floor is z=0, receptacles are axis-aligned
boxes standing on it and objects are spheres resting on receptacle tops.
Navigation happens on an occupancy grid indexed ``occupancy[ix, iy]`` where
cell ``(ix, iy)`` covers ``[ix*cs, (ix+1)*cs) x [iy*cs, (iy+1)*cs)``.
"""

import math
from collections import deque
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

from . import canonical
from .templates import TemplateBank, label_bank

_SCENE_STREAM = 0x5CE4E
_TASK_STREAM = 0x7A5C


class GenerationInfeasible(RuntimeError):
    """Rejection sampling ran out of retries."""


class NoValidPair(ValueError):
    """A task needs an object on one receptacle and a distinct goal receptacle."""


@dataclass(frozen=True)
class Receptacle:
    rec_id: str
    label: str
    center: tuple
    footprint: tuple
    height: float

    def __post_init__(self):
        dx, dy = self.footprint
        if not (dx > 0 and dy > 0 and self.height > 0):
            raise ValueError(f"receptacle {self.rec_id}: extents must be positive")

    @property
    def diagonal(self) -> float:
        return receptacle_diagonal(self)

    @property
    def box_min(self) -> np.ndarray:
        return np.array([self.center[0] - self.footprint[0] / 2, self.center[1] - self.footprint[1] / 2, 0.0])

    @property
    def box_max(self) -> np.ndarray:
        return np.array([self.center[0] + self.footprint[0] / 2, self.center[1] + self.footprint[1] / 2, self.height])

    @property
    def center3d(self) -> np.ndarray:
        """Center of the 3-D bounding box."""
        return np.array([self.center[0], self.center[1], self.height / 2])

    def contains_xy(self, x: float, y: float, inset: float = 0.0) -> bool:
        hx = self.footprint[0] / 2 - inset
        hy = self.footprint[1] / 2 - inset
        return abs(x - self.center[0]) <= hx and abs(y - self.center[1]) <= hy

    def horizontal_distance(self, x: float, y: float) -> float:
        """Distance from (x, y) to the nearest point of the footprint."""
        ddx = max(abs(x - self.center[0]) - self.footprint[0] / 2, 0.0)
        ddy = max(abs(y - self.center[1]) - self.footprint[1] / 2, 0.0)
        return math.hypot(ddx, ddy)

    def to_dict(self) -> dict:
        return {
            "rec_id": self.rec_id,
            "label": self.label,
            "center": list(self.center),
            "footprint": list(self.footprint),
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Receptacle":
        return cls(d["rec_id"], d["label"], tuple(d["center"]), tuple(d["footprint"]), d["height"])


@dataclass(frozen=True)
class ObjectInstance:
    obj_id: str
    label: str
    position: tuple
    bound_radius: float
    resting_on: str

    def __post_init__(self):
        if not self.bound_radius > 0:
            raise ValueError(f"object {self.obj_id}: bound_radius must be positive")

    def to_dict(self) -> dict:
        return {
            "obj_id": self.obj_id,
            "label": self.label,
            "position": list(self.position),
            "bound_radius": self.bound_radius,
            "resting_on": self.resting_on,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectInstance":
        return cls(d["obj_id"], d["label"], tuple(d["position"]), d["bound_radius"], d["resting_on"])


@dataclass(frozen=True, eq=False)
class SceneSpec:
    scene_id: str
    cell_size: float
    occupancy: np.ndarray
    receptacles: tuple
    objects: tuple
    floor_height: float = 0.0

    @property
    def shape(self) -> tuple:
        return self.occupancy.shape

    @property
    def extent(self) -> tuple:
        nx, ny = self.shape
        return nx * self.cell_size, ny * self.cell_size

    def cell_of(self, x: float, y: float) -> tuple:
        return int(math.floor(x / self.cell_size)), int(math.floor(y / self.cell_size))

    def cell_center(self, ix: int, iy: int) -> tuple:
        return (ix + 0.5) * self.cell_size, (iy + 0.5) * self.cell_size

    def in_bounds(self, ix: int, iy: int) -> bool:
        nx, ny = self.shape
        return 0 <= ix < nx and 0 <= iy < ny

    def is_free(self, ix: int, iy: int) -> bool:
        return self.in_bounds(ix, iy) and not self.occupancy[ix, iy]

    def is_navigable(self, x: float, y: float) -> bool:
        return self.is_free(*self.cell_of(x, y))

    @cached_property
    def free_cells(self) -> np.ndarray:
        """(K, 2) integer cell indices of navigable cells, ix-major order."""
        return np.argwhere(~self.occupancy)

    @cached_property
    def free_centers(self) -> np.ndarray:
        return (self.free_cells + 0.5) * self.cell_size

    def receptacle(self, rec_id: str) -> Receptacle:
        for r in self.receptacles:
            if r.rec_id == rec_id:
                return r
        raise KeyError(rec_id)

    def object(self, obj_id: str) -> ObjectInstance:
        for o in self.objects:
            if o.obj_id == obj_id:
                return o
        raise KeyError(obj_id)

    def with_object(self, obj: ObjectInstance) -> "SceneSpec":
        objs = tuple(obj if o.obj_id == obj.obj_id else o for o in self.objects)
        return replace(self, objects=objs)

    def with_occupancy(self, occupancy: np.ndarray) -> "SceneSpec":
        return replace(self, occupancy=np.asarray(occupancy, dtype=bool))

    def to_dict(self) -> dict:
        nx, ny = self.shape
        rows = ["".join("#" if self.occupancy[ix, iy] else "." for ix in range(nx)) for iy in range(ny)]
        return {
            "scene_id": self.scene_id,
            "cell_size": self.cell_size,
            "floor_height": self.floor_height,
            "grid": {"nx": nx, "ny": ny, "rows": rows},
            "receptacles": [r.to_dict() for r in self.receptacles],
            "objects": [o.to_dict() for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        g = d["grid"]
        occ = np.zeros((g["nx"], g["ny"]), dtype=bool)
        for iy, row in enumerate(g["rows"]):
            occ[:, iy] = [c == "#" for c in row]
        return cls(
            scene_id=d["scene_id"],
            cell_size=d["cell_size"],
            occupancy=occ,
            receptacles=tuple(Receptacle.from_dict(r) for r in d["receptacles"]),
            objects=tuple(ObjectInstance.from_dict(o) for o in d["objects"]),
            floor_height=d.get("floor_height", 0.0),
        )

    def to_json(self) -> str:
        return canonical.dumps(self.to_dict())


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    instruction: str
    object: str
    start_rec: str
    goal_rec: str
    strict_goal_threshold: float = 0.85
    lenient_goal_threshold: float = 1.7

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "object": self.object,
            "start_rec": self.start_rec,
            "goal_rec": self.goal_rec,
            "strict_goal_threshold": self.strict_goal_threshold,
            "lenient_goal_threshold": self.lenient_goal_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskInstance":
        return cls(**d)

    def entities(self, scene: SceneSpec) -> dict:
        return {
            "object": scene.object(self.object).label,
            "start": scene.receptacle(self.start_rec).label,
            "goal": scene.receptacle(self.goal_rec).label,
        }


@dataclass(frozen=True)
class SceneParams:
    nx: int = 32
    ny: int = 32
    cell_size: float = 0.25
    n_receptacles: int = 4
    n_objects: int = 3
    rec_size: tuple = (0.6, 1.4)
    rec_height: tuple = (0.55, 0.9)
    wall_margin: float = 0.75
    rec_clearance: float = 1.0
    object_radius: tuple = (0.03, 0.06)
    object_inset: float = 0.3
    object_spacing: float = 0.3
    approach_band: tuple = (0.4, 0.55)
    max_retries: int = 1000

    def validate(self) -> None:
        if self.nx < 16 or self.ny < 16:
            raise ValueError("grid must be at least 16x16 cells")
        if self.n_receptacles < 2:
            raise ValueError("need at least 2 receptacles")
        if self.n_objects < 1:
            raise ValueError("need at least 1 object")
        if self.cell_size <= 0 or self.max_retries < 1:
            raise ValueError("cell_size and max_retries must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


def receptacle_diagonal(rec: Receptacle) -> float:
    dx, dy = rec.footprint
    return math.sqrt(dx * dx + dy * dy + rec.height * rec.height)


def footprint_cells(rec: Receptacle, cell_size: float, shape: tuple) -> tuple:
    """Index ranges (ix0, ix1, iy0, iy1), half-open, of cells overlapping the footprint."""
    lo, hi = rec.box_min, rec.box_max
    ix0 = max(int(math.floor(lo[0] / cell_size)), 0)
    iy0 = max(int(math.floor(lo[1] / cell_size)), 0)
    ix1 = min(int(math.ceil(hi[0] / cell_size)), shape[0])
    iy1 = min(int(math.ceil(hi[1] / cell_size)), shape[1])
    return ix0, ix1, iy0, iy1


def rasterize(receptacles: Iterable[Receptacle], cell_size: float, shape: tuple) -> np.ndarray:
    occ = np.zeros(shape, dtype=bool)
    for rec in receptacles:
        ix0, ix1, iy0, iy1 = footprint_cells(rec, cell_size, shape)
        occ[ix0:ix1, iy0:iy1] = True
    return occ


def free_components(occupancy: np.ndarray) -> np.ndarray:
    """Label 4-connected components of free cells (-1 for blocked)."""
    nx, ny = occupancy.shape
    labels = np.full((nx, ny), -1, dtype=int)
    n = 0
    for sx in range(nx):
        for sy in range(ny):
            if occupancy[sx, sy] or labels[sx, sy] >= 0:
                continue
            labels[sx, sy] = n
            queue = deque([(sx, sy)])
            while queue:
                x, y = queue.popleft()
                for nx_, ny_ in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                    if 0 <= nx_ < nx and 0 <= ny_ < ny and not occupancy[nx_, ny_] and labels[nx_, ny_] < 0:
                        labels[nx_, ny_] = n
                        queue.append((nx_, ny_))
            n += 1
    return labels


def nearest_free_cell(scene: SceneSpec, x: float, y: float) -> tuple:
    """Nearest navigable cell to a point: ((ix, iy), distance). Ties go to the lowest (ix, iy)."""
    centers = scene.free_centers
    if len(centers) == 0:
        raise ValueError("scene has no navigable cells")
    d = np.hypot(centers[:, 0] - x, centers[:, 1] - y)
    k = int(np.argmin(d))
    ix, iy = scene.free_cells[k]
    return (int(ix), int(iy)), float(d[k])


def place_point(
    scene: SceneSpec,
    rec: Receptacle,
    band: tuple = (0.4, 0.55),
    inset: float = 0.12,
    spacing: float = 0.15,
    step: float = 0.05,
    ignore: Sequence[str] = (),
) -> Optional[tuple]:
    """A point on ``rec``'s top surface that a robot can place onto.

    Candidates lie on a regular lattice inset from the edges, away from the
    objects already resting there, and have their nearest navigable cell at a
    horizontal distance inside ``band``.  The candidate closest to the
    footprint center wins.
    """
    hx = rec.footprint[0] / 2 - inset
    hy = rec.footprint[1] / 2 - inset
    if hx < 0 or hy < 0:
        return None
    nxs = int(math.floor(hx / step))
    nys = int(math.floor(hy / step))
    offs_x = np.arange(-nxs, nxs + 1) * step
    offs_y = np.arange(-nys, nys + 1) * step
    gx, gy = np.meshgrid(rec.center[0] + offs_x, rec.center[1] + offs_y, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    ok = np.ones(len(pts), dtype=bool)
    for o in scene.objects:
        if o.resting_on == rec.rec_id and o.obj_id not in ignore:
            ok &= np.hypot(pts[:, 0] - o.position[0], pts[:, 1] - o.position[1]) >= spacing + o.bound_radius
    centers = scene.free_centers
    d_near = np.min(np.hypot(pts[:, 0:1] - centers[None, :, 0], pts[:, 1:2] - centers[None, :, 1]), axis=1)
    ok &= (d_near >= band[0]) & (d_near <= band[1])
    if not ok.any():
        return None
    d_center = np.hypot(pts[:, 0] - rec.center[0], pts[:, 1] - rec.center[1])
    d_center = np.where(ok, d_center, np.inf)
    k = int(np.argmin(d_center))
    return float(pts[k, 0]), float(pts[k, 1]), float(rec.height)


def _sample_receptacles(rng: np.random.Generator, params: SceneParams, names: list) -> Optional[list]:
    width, depth = params.nx * params.cell_size, params.ny * params.cell_size
    recs = []
    tries = 0
    while len(recs) < params.n_receptacles:
        tries += 1
        if tries > 50 * params.n_receptacles:
            return None
        dx = round(float(rng.uniform(*params.rec_size)), 3)
        dy = round(float(rng.uniform(*params.rec_size)), 3)
        h = round(float(rng.uniform(*params.rec_height)), 3)
        lo_x, hi_x = params.wall_margin + dx / 2, width - params.wall_margin - dx / 2
        lo_y, hi_y = params.wall_margin + dy / 2, depth - params.wall_margin - dy / 2
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        cx = round(float(rng.uniform(lo_x, hi_x)), 3)
        cy = round(float(rng.uniform(lo_y, hi_y)), 3)
        cand = Receptacle(f"rec_{len(recs)}", names[len(recs)], (cx, cy), (dx, dy), h)
        clear = True
        for r in recs:
            gap_x = abs(cx - r.center[0]) - (dx + r.footprint[0]) / 2
            gap_y = abs(cy - r.center[1]) - (dy + r.footprint[1]) / 2
            if max(gap_x, gap_y) < params.rec_clearance:
                clear = False
                break
        if clear:
            recs.append(cand)
    return recs


def generate_scene(seed: int, params: Optional[SceneParams] = None) -> SceneSpec:
    """Deterministically generate a scene from ``(seed, params)``."""
    params = params or SceneParams()
    params.validate()
    rng = np.random.default_rng([_SCENE_STREAM, seed])
    bank = label_bank()
    shape = (params.nx, params.ny)
    scene_id = f"scene-{seed:06d}"

    for _ in range(params.max_retries):
        rec_names = [bank["receptacles"][i] for i in rng.permutation(len(bank["receptacles"]))[: params.n_receptacles]]
        obj_names = [bank["objects"][i] for i in rng.permutation(len(bank["objects"]))[: params.n_objects]]
        recs = _sample_receptacles(rng, params, rec_names)
        if recs is None:
            continue
        occ = rasterize(recs, params.cell_size, shape)
        labels = free_components(occ)
        if labels.max() != 0:
            continue
        scene = SceneSpec(scene_id, params.cell_size, occ, tuple(recs), ())
        objects = _sample_objects(rng, scene, params, obj_names)
        if objects is None:
            continue
        scene = replace(scene, objects=tuple(objects))
        if all(place_point(scene, r, params.approach_band) is not None for r in recs):
            return scene
    raise GenerationInfeasible(f"seed {seed}: no feasible layout after {params.max_retries} retries")


def _sample_objects(rng, scene: SceneSpec, params: SceneParams, names: list) -> Optional[list]:
    objects = []
    for i in range(params.n_objects):
        for _ in range(200):
            rec = scene.receptacles[int(rng.integers(len(scene.receptacles)))]
            r = round(float(rng.uniform(*params.object_radius)), 3)
            inset = max(params.object_inset, r)
            hx = rec.footprint[0] / 2 - inset
            hy = rec.footprint[1] / 2 - inset
            if hx < 0 or hy < 0:
                continue
            x = round(float(rec.center[0] + rng.uniform(-hx, hx)), 3)
            y = round(float(rec.center[1] + rng.uniform(-hy, hy)), 3)
            if not rec.contains_xy(x, y):
                continue
            if any(
                o.resting_on == rec.rec_id and math.hypot(x - o.position[0], y - o.position[1]) < params.object_spacing
                for o in objects
            ):
                continue
            _, d = nearest_free_cell(scene, x, y)
            if not params.approach_band[0] <= d <= params.approach_band[1]:
                continue
            objects.append(ObjectInstance(f"obj_{i}", names[i], (x, y, rec.height), r, rec.rec_id))
            break
        else:
            return None
    return objects


def spawn_task(
    scene: SceneSpec,
    seed: int,
    strict_goal_threshold: float = 0.85,
    lenient_goal_threshold: float = 1.7,
    candidates: Optional[Sequence[str]] = None,
    bank: Optional[TemplateBank] = None,
) -> TaskInstance:
    """Pick an object and a distinct goal receptacle uniformly under ``seed``.

    ``candidates`` optionally restricts which object ids may be chosen.
    """
    bank = bank or TemplateBank.default()
    rec_ids = {r.rec_id for r in scene.receptacles}
    objs = [o for o in scene.objects if o.resting_on in rec_ids]
    if candidates is not None:
        allowed = set(candidates)
        objs = [o for o in objs if o.obj_id in allowed]
    pairs_possible = len(scene.receptacles) >= 2 and objs
    if not pairs_possible:
        raise NoValidPair(f"{scene.scene_id}: no (object, goal receptacle) pair available")
    rng = np.random.default_rng([_TASK_STREAM, seed])
    obj = objs[int(rng.integers(len(objs)))]
    goals = [r for r in scene.receptacles if r.rec_id != obj.resting_on]
    goal = goals[int(rng.integers(len(goals)))]
    start = scene.receptacle(obj.resting_on)
    instruction = bank.instruction(object=obj.label, start=start.label, goal=goal.label)
    return TaskInstance(
        task_id=f"{scene.scene_id}-task-{seed}",
        instruction=instruction,
        object=obj.obj_id,
        start_rec=start.rec_id,
        goal_rec=goal.rec_id,
        strict_goal_threshold=strict_goal_threshold,
        lenient_goal_threshold=lenient_goal_threshold,
    )
