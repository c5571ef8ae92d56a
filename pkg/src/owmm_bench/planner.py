"""Grid path planning, path following and the reach-sphere gripper controller."""

import heapq
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

from .sim import (
    V_MAX,
    W_MAX,
    LowLevelAction,
    RobotState,
    carry_held,
    end_effector,
    step,
    wrap_angle,
)
from .world import SceneSpec

SQRT2 = math.sqrt(2.0)
_MOVES = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0), (1, 1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2)]


class PlanningError(RuntimeError):
    pass


class Unreachable(PlanningError):
    pass


class Stuck(PlanningError):
    pass


@dataclass(frozen=True)
class ReachModel:
    max_reach: float = 0.8
    pick_success_radius: float = 0.15
    standoff_radius: float = 0.6

    def __post_init__(self):
        if not 0 < self.pick_success_radius <= self.max_reach:
            raise ValueError("need 0 < pick_success_radius <= max_reach")


@dataclass(frozen=True)
class Path:
    waypoints: tuple
    total_length: float
    grid_cost: float
    cells: tuple

    def to_dict(self) -> dict:
        return {"waypoints": [list(w) for w in self.waypoints], "total_length": self.total_length}


def neighbors(scene: SceneSpec, cell):
    """8-connected moves; a diagonal needs both orthogonal neighbours free."""
    ix, iy = cell
    for dx, dy, cost in _MOVES:
        nx_, ny_ = ix + dx, iy + dy
        if not scene.is_free(nx_, ny_):
            continue
        if dx and dy and not (scene.is_free(ix + dx, iy) and scene.is_free(ix, iy + dy)):
            continue
        yield (nx_, ny_), cost


def reachable_cells(scene: SceneSpec, start) -> set:
    seen = {start}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        for n, _ in neighbors(scene, c):
            if n not in seen:
                seen.add(n)
                queue.append(n)
    return seen


def astar(scene: SceneSpec, start, goal) -> Optional[tuple]:
    """Cell sequence and cost (in cells) of a cheapest path, or None."""
    if start == goal:
        return [start], 0.0

    def h(c):
        return math.hypot(c[0] - goal[0], c[1] - goal[1])

    g = {start: 0.0}
    parent = {start: None}
    closed = set()
    counter = 0
    heap = [(h(start), 0, start)]
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            cells = []
            while cur is not None:
                cells.append(cur)
                cur = parent[cur]
            return cells[::-1], g[goal]
        closed.add(cur)
        for nb, cost in neighbors(scene, cur):
            ng = g[cur] + cost
            if ng < g.get(nb, math.inf) - 1e-12:
                g[nb] = ng
                parent[nb] = cur
                counter += 1
                heapq.heappush(heap, (ng + h(nb), counter, nb))
    return None


def plan_path(scene: SceneSpec, start, goal, standoff_radius: float = 0.6) -> Path:
    """A* from ``start`` to ``goal`` (world meters).

    A blocked goal is replaced by the nearest navigable cell within
    ``standoff_radius`` that is connected to the start.
    """
    sc = scene.cell_of(*start)
    if not scene.is_free(*sc):
        raise PlanningError(f"start {start} is not navigable")
    gc = scene.cell_of(*goal)
    if not scene.in_bounds(*gc):
        raise PlanningError(f"goal {goal} lies outside the grid")
    connected = reachable_cells(scene, sc)
    exact = scene.is_free(*gc)
    if exact:
        if gc not in connected:
            raise Unreachable(f"goal {goal} is not connected to the start")
        target = gc
    else:
        centers = scene.free_centers
        d = np.hypot(centers[:, 0] - goal[0], centers[:, 1] - goal[1])
        order = np.lexsort((scene.free_cells[:, 1], scene.free_cells[:, 0], d))
        target = None
        for k in order:
            if d[k] > standoff_radius:
                break
            c = (int(scene.free_cells[k, 0]), int(scene.free_cells[k, 1]))
            if c in connected:
                target = c
                break
        if target is None:
            raise Unreachable(f"no navigable cell within {standoff_radius} m of {goal} is reachable")
    found = astar(scene, sc, target)
    if found is None:
        raise Unreachable(f"no path to {goal}")
    cells, cost = found
    pts = [tuple(float(v) for v in start)]
    pts += [scene.cell_center(*c) for c in cells[1:]]
    end = tuple(float(v) for v in goal) if exact else scene.cell_center(*target)
    if len(cells) == 1:
        if end != pts[0]:
            pts.append(end)
    else:
        pts[-1] = end
    length = sum(math.dist(a, b) for a, b in zip(pts, pts[1:]))
    return Path(tuple(pts), length, cost * scene.cell_size, tuple(cells))


class PathFollower:
    """Rotate-then-drive tracker.  ``command`` returns None once arrived."""

    def __init__(
        self,
        path: Path,
        dt: float = 0.1,
        v_max: float = V_MAX,
        w_max: float = W_MAX,
        tolerance: float = 0.1,
        heading_tolerance: float = 0.05,
        stuck_window: int = 50,
    ):
        self.path = path
        self.dt = dt
        self.v_max = v_max
        self.w_max = w_max
        self.tolerance = tolerance
        self.heading_tolerance = heading_tolerance
        self.stuck_window = stuck_window
        self.index = 1
        self._best = None
        self._since = 0

    @property
    def next_waypoint(self) -> tuple:
        return self.path.waypoints[min(self.index, len(self.path.waypoints) - 1)]

    def _progress(self, key) -> None:
        if self._best is None or key < self._best:
            self._best = key
            self._since = 0
        else:
            self._since += 1
            if self._since >= self.stuck_window:
                raise Stuck(f"no progress over {self.stuck_window} steps")

    def command(self, state: RobotState) -> Optional[LowLevelAction]:
        wps = self.path.waypoints
        final = wps[-1]
        if math.dist(state.xy, final) <= self.tolerance:
            return None
        while self.index < len(wps) - 1 and math.dist(state.xy, wps[self.index]) < 1e-3:
            self.index += 1
        tx, ty = wps[self.index]
        dist = math.hypot(tx - state.x, ty - state.y)
        err = wrap_angle(math.atan2(ty - state.y, tx - state.x) - state.yaw)
        self._progress((-self.index, round(dist, 6), round(abs(err), 6)))
        w = max(-self.w_max, min(self.w_max, err / self.dt))
        if abs(err) > self.heading_tolerance:
            return LowLevelAction(0.0, w)
        v = min(self.v_max, dist / self.dt)
        return LowLevelAction(v, w)


def follow_path(
    state: RobotState,
    path: Path,
    scene: SceneSpec,
    dt: float = 0.1,
    max_steps: int = 3000,
    **kwargs,
) -> Iterator[tuple]:
    """Drive along ``path`` in the simulator, yielding ``(action, new_state)`` pairs.

    Raises Stuck when no progress is made over the follower's window or the
    step budget runs out.
    """
    follower = PathFollower(path, dt=dt, **kwargs)
    for _ in range(max_steps):
        a = follower.command(state)
        if a is None:
            return
        state = step(state, scene, a, dt).state
        yield a, state
    raise Stuck(f"step budget of {max_steps} exhausted")


@dataclass(frozen=True)
class GripperOutcome:
    success: bool
    reason: str
    state: RobotState
    scene: SceneSpec
    obj_id: Optional[str] = None
    distance: Optional[float] = None


def horizontal_distance(state: RobotState, point) -> float:
    return math.hypot(point[0] - state.x, point[1] - state.y)


def try_grasp(state: RobotState, scene: SceneSpec, target_point, radius: float, reach: ReachModel = ReachModel()) -> GripperOutcome:
    """Grasp the object nearest to ``target_point`` if it is within ``radius`` of it and within arm reach."""
    if state.holding is not None:
        return GripperOutcome(False, "already-holding", state, scene)
    tp = np.asarray(target_point, dtype=float)
    best = None
    for o in scene.objects:
        if o.resting_on == "held":
            continue
        d = float(np.linalg.norm(np.asarray(o.position) - tp))
        if d <= radius and horizontal_distance(state, o.position) <= reach.max_reach:
            if best is None or (d, o.obj_id) < best[:2]:
                best = (d, o.obj_id, o)
    if best is None:
        return GripperOutcome(False, "nothing-in-range", state, scene)
    d, obj_id, obj = best
    new = replace(state, holding=obj_id)
    scene = carry_held(new, scene)
    return GripperOutcome(True, "ok", new, scene, obj_id, d)


def try_release(state: RobotState, scene: SceneSpec, target_point, reach: ReachModel = ReachModel()) -> GripperOutcome:
    """Put the held object down at ``target_point``, snapped onto the surface below it."""
    if state.holding is None:
        return GripperOutcome(False, "not-holding", state, scene)
    if horizontal_distance(state, target_point) > reach.max_reach:
        return GripperOutcome(False, "out-of-reach", state, scene, state.holding)
    x, y = float(target_point[0]), float(target_point[1])
    z, rest = scene.floor_height, "floor"
    for rec in scene.receptacles:
        if rec.contains_xy(x, y):
            z, rest = rec.height, rec.rec_id
            break
    obj = scene.object(state.holding)
    scene = scene.with_object(replace(obj, position=(x, y, z), resting_on=rest))
    return GripperOutcome(True, "ok", replace(state, holding=None), scene, obj.obj_id, None)


__all__ = [
    "Path",
    "PathFollower",
    "PlanningError",
    "ReachModel",
    "Stuck",
    "Unreachable",
    "astar",
    "end_effector",
    "follow_path",
    "plan_path",
    "try_grasp",
    "try_release",
]
