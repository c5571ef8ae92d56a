"""The agent state machine: context, policy call, JSON action parsing, execution and episode loop."""

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import canonical
from .planner import (
    PathFollower,
    PlanningError,
    ReachModel,
    Stuck,
    Unreachable,
    plan_path,
    try_grasp,
    try_release,
)
from .sim import (
    DEFAULT_HFOV,
    DEFAULT_IMAGE_SIZE,
    InvalidDepth,
    LowLevelAction,
    Observation,
    PoseGraph,
    RobotState,
    bbox_center,
    norm_to_px,
    observe,
    step,
    unproject,
    wrap_angle,
)
from .templates import TemplateBank
from .world import SceneSpec, TaskInstance

ACTION_KINDS = ("search_scene_frame", "nav_to_point", "pick", "place")
BBOX_KINDS = ("nav_to_point", "pick", "place")

_START_STREAM = 0x57A7


class ActionError(ValueError):
    code = "invalid-action"


class MalformedJSON(ActionError):
    code = "malformed-json"


class UnknownAction(ActionError):
    code = "unknown-action"


class BadArguments(ActionError):
    code = "bad-arguments"


class PolicyError(RuntimeError):
    """The policy could not produce any text (transport failure, timeout)."""

    def __init__(self, message: str, kind: str = "transport-error"):
        super().__init__(message)
        self.kind = kind


@dataclass(frozen=True)
class HighLevelAction:
    kind: str
    frame_index: Optional[int] = None
    bbox_norm: Optional[tuple] = None
    reasoning: str = ""
    summarization: str = ""

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise UnknownAction(f"unknown action {self.kind!r}")
        if self.kind == "search_scene_frame":
            if self.frame_index is None or self.bbox_norm is not None:
                raise BadArguments("search_scene_frame takes exactly a frame index")
        elif self.bbox_norm is None or self.frame_index is not None:
            raise BadArguments(f"{self.kind} takes exactly a bounding box")

    @property
    def args(self):
        if self.kind == "search_scene_frame":
            return self.frame_index
        return [list(self.bbox_norm)]

    def to_dict(self) -> dict:
        return {
            "reasoning": self.reasoning,
            "action": {"name": self.kind, "args": self.args},
            "summarization": self.summarization,
        }

    def to_text(self) -> str:
        return canonical.dumps(self.to_dict())


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def parse_action(text, n_frames: Optional[int] = None) -> HighLevelAction:
    """Strictly parse a policy reply ``{reasoning, action: {name, args}, summarization}``."""
    try:
        data = json.loads(text)
    except (TypeError, ValueError) as exc:
        raise MalformedJSON(f"not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise MalformedJSON("top level must be an object")
    action = data.get("action")
    if not isinstance(action, dict) or "name" not in action or "args" not in action:
        raise MalformedJSON("missing action.name / action.args")
    reasoning = data.get("reasoning")
    summarization = data.get("summarization")
    if not isinstance(reasoning, str) or not isinstance(summarization, str):
        raise MalformedJSON("reasoning and summarization must be strings")
    name = action["name"]
    if name not in ACTION_KINDS:
        raise UnknownAction(f"unknown action {name!r}")
    args = action["args"]
    if name == "search_scene_frame":
        if isinstance(args, list) and len(args) == 1:
            args = args[0]
        if not _is_int(args) or args < 0:
            raise BadArguments(f"frame index must be a non-negative integer, got {args!r}")
        if n_frames is not None and args >= n_frames:
            raise BadArguments(f"frame index {args} outside the pose graph of {n_frames} frames")
        return HighLevelAction(name, frame_index=args, reasoning=reasoning, summarization=summarization)
    if isinstance(args, list) and len(args) == 1 and isinstance(args[0], list):
        args = args[0]
    if not isinstance(args, list) or len(args) != 4 or not all(_is_int(v) for v in args):
        raise BadArguments(f"bounding box must be four integers, got {args!r}")
    x1, y1, x2, y2 = args
    if not all(0 <= v <= 1000 for v in args) or x1 > x2 or y1 > y2:
        raise BadArguments(f"bounding box {args} out of range or unordered")
    return HighLevelAction(name, bbox_norm=tuple(args), reasoning=reasoning, summarization=summarization)


@dataclass(frozen=True)
class AgentConfig:
    dt: float = 0.1
    reach: ReachModel = ReachModel()
    grasp_radius: Optional[float] = None
    invalid_budget: int = 3
    dead_loop_window: int = 6
    dead_loop_repeats: int = 3
    dead_loop_displacement: float = 0.1
    checkpoint_every: int = 10
    arm_action_steps: int = 30
    max_sim_steps_per_action: int = 3000
    stuck_window: int = 50
    arrival_tolerance: float = 0.1
    hfov: float = DEFAULT_HFOV
    image_size: tuple = DEFAULT_IMAGE_SIZE

    @property
    def effective_grasp_radius(self) -> float:
        return self.reach.max_reach if self.grasp_radius is None else self.grasp_radius

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["reach"] = dict(self.reach.__dict__)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        d = dict(d)
        d["reach"] = ReachModel(**d["reach"])
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass(frozen=True)
class GroundTruth:
    """Simulator state only privileged policies (the oracle) may read."""

    scene: SceneSpec
    task: TaskInstance
    state: RobotState
    reach: ReachModel = ReachModel()


@dataclass(eq=False)
class AgentContext:
    instruction: str
    pose_frames: PoseGraph
    ego: Observation
    history: str
    step: int
    ground_truth: Optional[GroundTruth] = field(default=None, repr=False)

    def public_dict(self) -> dict:
        return {
            "instruction": self.instruction,
            "history": self.history,
            "step": self.step,
            "pose_frames": [
                {"index": i, "entities": [_public_entity(e) for e in f.entities]}
                for i, f in enumerate(self.pose_frames.frames)
            ],
            "ego_frame": {"entities": [_public_entity(e) for e in self.ego.entities]},
        }

    def digest(self) -> str:
        return canonical.digest(self.public_dict())


def _public_entity(e) -> dict:
    return {"label": e.label, "bbox_norm": list(e.bbox_norm), "depth_m": e.depth_m}


@dataclass
class Decision:
    raw_text: str
    action: Optional[HighLevelAction]
    error: Optional[ActionError]
    history: str


def decide(policy, ctx: AgentContext) -> Decision:
    """Ask the policy for text, parse it and roll the history forward.

    Parse failures are returned in the decision; transport failures raise
    PolicyError.
    """
    raw = policy.decide(ctx)
    try:
        action = parse_action(raw, n_frames=len(ctx.pose_frames))
    except ActionError as exc:
        return Decision(raw, None, exc, ctx.history)
    return Decision(raw, action, None, action.summarization)


# --------------------------------------------------------------------------
# execution


def _pose(state: RobotState) -> list:
    return [state.x, state.y, state.yaw]


class _Run:
    """Sim-step bookkeeping for one high-level action."""

    def __init__(self, state: RobotState, scene: SceneSpec, cfg: AgentConfig, waypoint=None):
        self.state = state
        self.scene = scene
        self.cfg = cfg
        self.sim_steps = 0
        self.waypoint = waypoint
        self.checkpoints = []
        self._mark()

    def _mark(self) -> None:
        cp = {"sim_step": self.sim_steps, "pose": _pose(self.state), "holding": self.state.holding}
        if self.waypoint is not None:
            cp["waypoint"] = list(self.waypoint)
        self.checkpoints.append(cp)

    def advance(self, action: LowLevelAction) -> None:
        if self.sim_steps >= self.cfg.max_sim_steps_per_action:
            raise Stuck(f"sim-step budget of {self.cfg.max_sim_steps_per_action} exhausted")
        res = step(self.state, self.scene, action, self.cfg.dt)
        self.state, self.scene = res.state, res.scene
        self.sim_steps += 1
        if self.sim_steps % self.cfg.checkpoint_every == 0:
            self._mark()

    def finish(self) -> None:
        if self.checkpoints[-1]["sim_step"] != self.sim_steps:
            self._mark()

    def rotate_to(self, yaw: float) -> None:
        for _ in range(200):
            err = wrap_angle(yaw - self.state.yaw)
            if abs(err) < 1e-6:
                return
            w = max(-1.5, min(1.5, err / self.cfg.dt))
            self.advance(LowLevelAction(0.0, w))

    def drive(self, goal_xy, face_yaw=None, face_point=None) -> dict:
        path = plan_path(self.scene, self.state.xy, goal_xy, self.cfg.reach.standoff_radius)
        follower = PathFollower(
            path, dt=self.cfg.dt, tolerance=self.cfg.arrival_tolerance, stuck_window=self.cfg.stuck_window
        )
        self.waypoint = follower.next_waypoint
        while True:
            a = follower.command(self.state)
            self.waypoint = follower.next_waypoint
            if a is None:
                break
            self.advance(a)
        self.waypoint = path.waypoints[-1]
        if face_point is not None:
            dx, dy = face_point[0] - self.state.x, face_point[1] - self.state.y
            if math.hypot(dx, dy) > 1e-6:
                self.rotate_to(math.atan2(dy, dx))
        elif face_yaw is not None:
            self.rotate_to(face_yaw)
        return path.to_dict()

    def hold(self, n: int) -> None:
        for _ in range(n):
            self.advance(LowLevelAction())


@dataclass
class Execution:
    outcome: dict
    state: RobotState
    scene: SceneSpec


def target_from_bbox(ego: Observation, bbox_norm) -> np.ndarray:
    u, v = bbox_center(norm_to_px(bbox_norm, ego.camera.image_size))
    W, H = ego.camera.image_size
    u, v = min(u, W - 1e-9), min(v, H - 1e-9)
    return unproject(ego.camera, (u, v), ego.depth_at(u, v))


def execute(
    action: HighLevelAction,
    state: RobotState,
    scene: SceneSpec,
    pose_frames: PoseGraph,
    ego: Observation,
    cfg: AgentConfig = AgentConfig(),
) -> Execution:
    """Run one high-level action through the planners; failures come back as outcomes."""
    out = {"success": False, "reason": "ok", "sim_steps": 0, "checkpoints": [], "target_point": None}
    run = _Run(state, scene, cfg)
    try:
        if action.kind == "search_scene_frame":
            pose = pose_frames.poses[action.frame_index]
            out["target_point"] = [pose.x, pose.y, 0.0]
            out["path"] = run.drive((pose.x, pose.y), face_yaw=pose.yaw)
            out["success"] = True
        else:
            target = target_from_bbox(ego, action.bbox_norm)
            out["target_point"] = [float(v) for v in target]
            if action.kind == "nav_to_point":
                out["path"] = run.drive((float(target[0]), float(target[1])), face_point=target)
                out["success"] = True
            elif action.kind == "pick":
                run.hold(cfg.arm_action_steps)
                g = try_grasp(run.state, run.scene, target, cfg.effective_grasp_radius, cfg.reach)
                run.state, run.scene = g.state, g.scene
                out.update(success=g.success, reason=g.reason, obj_id=g.obj_id, grasp_distance=g.distance)
            else:
                run.hold(cfg.arm_action_steps)
                g = try_release(run.state, run.scene, target, cfg.reach)
                run.state, run.scene = g.state, g.scene
                out.update(success=g.success, reason=g.reason, obj_id=g.obj_id)
    except InvalidDepth:
        out["reason"] = "invalid-depth"
    except Stuck:
        out["reason"] = "stuck"
    except Unreachable:
        out["reason"] = "unreachable"
    except PlanningError:
        out["reason"] = "planning-failed"
    run.finish()
    out["sim_steps"] = run.sim_steps
    out["checkpoints"] = run.checkpoints
    return Execution(out, run.state, run.scene)


# --------------------------------------------------------------------------
# traces


@dataclass
class EpisodeTrace:
    episode_id: str
    scene_id: str
    seed: int
    task: TaskInstance
    policy: dict
    pose_graph: dict
    initial_state: dict
    max_T: int
    config: dict
    steps: list = field(default_factory=list)
    terminal: str = "running"
    terminal_reason: Optional[str] = None
    final_state: Optional[dict] = None
    final_objects: Optional[dict] = None

    def rows(self) -> list:
        head = {
            "type": "episode",
            "episode_id": self.episode_id,
            "scene_id": self.scene_id,
            "seed": self.seed,
            "task": self.task.to_dict(),
            "policy": self.policy,
            "pose_graph": self.pose_graph,
            "initial_state": self.initial_state,
            "max_T": self.max_T,
            "config": self.config,
        }
        rows = [head]
        for s in self.steps:
            rows.append({"type": "step", "episode_id": self.episode_id, **s})
        rows.append(
            {
                "type": "terminal",
                "episode_id": self.episode_id,
                "terminal": self.terminal,
                "reason": self.terminal_reason,
                "n_steps": len(self.steps),
                "final_state": self.final_state,
                "final_objects": self.final_objects,
            }
        )
        return rows

    def terminal_row(self) -> dict:
        return self.rows()[-1]

    @classmethod
    def from_rows(cls, rows: Sequence[dict]) -> "EpisodeTrace":
        head = rows[0]
        if head.get("type") != "episode":
            raise ValueError("trace must start with an episode header")
        tr = cls(
            episode_id=head["episode_id"],
            scene_id=head["scene_id"],
            seed=head["seed"],
            task=TaskInstance.from_dict(head["task"]),
            policy=head["policy"],
            pose_graph=head["pose_graph"],
            initial_state=head["initial_state"],
            max_T=head["max_T"],
            config=head["config"],
        )
        for r in rows[1:]:
            if r["type"] == "step":
                s = dict(r)
                s.pop("type")
                s.pop("episode_id")
                tr.steps.append(s)
            elif r["type"] == "terminal":
                tr.terminal = r["terminal"]
                tr.terminal_reason = r["reason"]
                tr.final_state = r["final_state"]
                tr.final_objects = r["final_objects"]
        return tr


def group_trace_rows(rows: Sequence[dict]) -> list:
    """Split a trace JSONL stream into EpisodeTrace objects, in file order."""
    out, cur = [], []
    for r in rows:
        if r.get("type") == "episode" and cur:
            out.append(EpisodeTrace.from_rows(cur))
            cur = []
        cur.append(r)
    if cur:
        out.append(EpisodeTrace.from_rows(cur))
    return out


def _objects_snapshot(scene: SceneSpec) -> dict:
    return {o.obj_id: [o.position[0], o.position[1], o.position[2], o.resting_on] for o in scene.objects}


def _bucket(action: dict) -> tuple:
    args = action["action"]["args"]
    name = action["action"]["name"]
    if name == "search_scene_frame":
        return name, args
    x1, y1, x2, y2 = args[0]
    return name, (x1 + x2) // 200, (y1 + y2) // 200


def detect_dead_loop(trace, window: int = 6, repeats: int = 3, min_displacement: float = 0.1) -> bool:
    """True when one (action, argument bucket) repeats without moving the robot or the held object."""
    if window < 2 or repeats < 2:
        raise ValueError("window and repeats must be >= 2")
    steps = trace.steps if hasattr(trace, "steps") else list(trace)
    recent = steps[-window:]
    groups = {}
    for i, s in enumerate(recent):
        if s.get("action") is not None:
            groups.setdefault(_bucket(s["action"]), []).append(i)
    for idxs in groups.values():
        if len(idxs) < repeats:
            continue
        anchor = idxs[-repeats]
        held = recent[anchor]["holding"]
        moved = 0.0
        for s in recent[anchor + 1 :]:
            if s["holding"] != held:
                break
            moved += math.hypot(s["pose"][0] - s["pose_before"][0], s["pose"][1] - s["pose_before"][1])
        else:
            if moved < min_displacement:
                return True
    return False


def sample_start_state(scene: SceneSpec, seed: int) -> RobotState:
    rng = np.random.default_rng([_START_STREAM, seed])
    cells = scene.free_centers
    k = int(rng.integers(len(cells)))
    yaw = float(rng.uniform(-math.pi, math.pi))
    return RobotState(float(cells[k, 0]), float(cells[k, 1]), yaw)


def _distances(state: RobotState, scene: SceneSpec, task: TaskInstance) -> dict:
    s, g = scene.receptacle(task.start_rec), scene.receptacle(task.goal_rec)
    o = scene.object(task.object)
    return {
        "start_rec": math.hypot(s.center[0] - state.x, s.center[1] - state.y),
        "goal_rec": math.hypot(g.center[0] - state.x, g.center[1] - state.y),
        "object": math.hypot(o.position[0] - state.x, o.position[1] - state.y),
    }


def object_goal_distance(scene: SceneSpec, task: TaskInstance) -> float:
    obj = scene.object(task.object)
    return float(np.linalg.norm(np.asarray(obj.position) - scene.receptacle(task.goal_rec).center3d))


def policy_descriptor(policy) -> dict:
    desc = getattr(policy, "descriptor", None)
    return desc() if callable(desc) else {"name": type(policy).__name__}


def run_episode(
    policy,
    scene: SceneSpec,
    task: TaskInstance,
    pose_frames: PoseGraph,
    max_T: int = 20,
    seed: int = 0,
    config: Optional[AgentConfig] = None,
    episode_id: Optional[str] = None,
    initial_state: Optional[RobotState] = None,
    bank: Optional[TemplateBank] = None,
) -> EpisodeTrace:
    """decide -> execute until success, dead loop, invalid budget or ``max_T``."""
    if max_T < 1:
        raise ValueError("max_T must be >= 1")
    cfg = config or AgentConfig()
    bank = bank or TemplateBank.default()
    state = initial_state or sample_start_state(scene, seed)
    history = bank.initial_history
    trace = EpisodeTrace(
        episode_id=episode_id or f"{task.task_id}-ep-{seed}",
        scene_id=scene.scene_id,
        seed=seed,
        task=task,
        policy=policy_descriptor(policy),
        pose_graph={"provenance": list(pose_frames.provenance), "poses": [p.to_dict() for p in pose_frames.poses]},
        initial_state=state.to_dict(),
        max_T=max_T,
        config=cfg.to_dict(),
    )
    invalid = 0
    for t in range(max_T):
        ego = observe(state, scene, cfg.hfov, cfg.image_size)
        ctx = AgentContext(task.instruction, pose_frames, ego, history, t, GroundTruth(scene, task, state, cfg.reach))
        dec = decide(policy, ctx)
        rec = {
            "step": t,
            "context_digest": ctx.digest(),
            "history": history,
            "raw_text": dec.raw_text,
            "objects": _objects_snapshot(scene),
            "pose_before": _pose(state),
            "holding_before": state.holding,
        }
        if dec.action is None:
            invalid += 1
            rec.update(
                action=None,
                parse_error=dec.error.code,
                summarization=history,
                outcome={"success": False, "reason": dec.error.code, "sim_steps": 0, "checkpoints": [], "target_point": None},
                pose=_pose(state),
                holding=state.holding,
                distances=_distances(state, scene, task),
            )
            trace.steps.append(rec)
            if invalid >= cfg.invalid_budget:
                trace.terminal, trace.terminal_reason = "failure", "invalid-action-budget"
                break
            continue
        ex = execute(dec.action, state, scene, pose_frames, ego, cfg)
        state, scene = ex.state, ex.scene
        history = dec.history
        rec.update(
            action=dec.action.to_dict(),
            parse_error=None,
            summarization=history,
            outcome=ex.outcome,
            pose=_pose(state),
            holding=state.holding,
            distances=_distances(state, scene, task),
        )
        trace.steps.append(rec)
        if dec.action.kind == "place" and ex.outcome["success"]:
            if ex.outcome.get("obj_id") != task.object:
                trace.terminal, trace.terminal_reason = "failure", "wrong-object"
            elif object_goal_distance(scene, task) <= task.lenient_goal_threshold:
                trace.terminal, trace.terminal_reason = "success", None
            else:
                trace.terminal, trace.terminal_reason = "failure", "misplaced"
            break
        if detect_dead_loop(trace, cfg.dead_loop_window, cfg.dead_loop_repeats, cfg.dead_loop_displacement):
            trace.terminal, trace.terminal_reason = "dead_loop", None
            break
    else:
        trace.terminal, trace.terminal_reason = "timeout", None
    trace.final_state = state.to_dict()
    trace.final_objects = _objects_snapshot(scene)
    return trace
