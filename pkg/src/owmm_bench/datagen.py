"""Oracle-driven synthesis of instruction-tuning records.

The pipeline is collect -> select -> filter -> build -> export.  Traces keep
poses and object snapshots only; every observation a record needs is
re-rendered from them.
"""

import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import canonical
from .agent import (
    AgentConfig,
    AgentContext,
    EpisodeTrace,
    GroundTruth,
    parse_action,
    run_episode,
)
from .planner import ReachModel, horizontal_distance
from .policy import OraclePlan, OraclePolicy, OracleStuck, oracle_plan, plan_to_action
from .sim import NoViewpoint, PoseGraph, RobotState, observe, render_pose_graph
from .templates import Augmenter, TemplateBank, TemplateHole, identity_augmenter
from .world import SceneSpec, TaskInstance

ROLES = ("nav_start", "nav_waypoint", "nav_end", "pick_frame", "place_frame", "search_frame")
KIND_SHORT = {"search_scene_frame": "search", "nav_to_point": "nav", "pick": "pick", "place": "place"}
TARGET_CLASS = {"nav_to_point": "navigation", "pick": "object", "place": "receptacle"}
PROVENANCE = {"start": "at_start_rec", "goal": "at_goal_rec"}
SPLIT_RATIO = (113, 30)
# Waypoints closer than this sit below the camera frustum; the filter looks this far ahead.
WAYPOINT_LOOKAHEAD_M = 1.0


class EpisodeFailed(RuntimeError):
    """The oracle could not finish the episode; it is discarded."""


class LeakageDetected(ValueError):
    pass


# --------------------------------------------------------------------------
# collection


def collect_episode(
    scene: SceneSpec,
    task: TaskInstance,
    seed: int,
    max_T: int = 20,
    config: Optional[AgentConfig] = None,
    bank: Optional[TemplateBank] = None,
) -> EpisodeTrace:
    """Run the oracle with full logging; anything short of success raises EpisodeFailed."""
    cfg = config or AgentConfig()
    try:
        frames = render_pose_graph(scene, task, seed, hfov=cfg.hfov, image_size=cfg.image_size)
        trace = run_episode(OraclePolicy(bank), scene, task, frames, max_T=max_T, seed=seed, config=cfg, bank=bank)
    except (OracleStuck, NoViewpoint) as exc:
        raise EpisodeFailed(str(exc)) from exc
    if trace.terminal != "success":
        raise EpisodeFailed(f"{trace.episode_id}: oracle ended with {trace.terminal}")
    return trace


def trace_pose_graph(trace: EpisodeTrace, scene: SceneSpec) -> PoseGraph:
    cfg = trace.config
    poses = [RobotState.from_dict(p) for p in trace.pose_graph["poses"]]
    return PoseGraph.from_poses(scene, poses, trace.pose_graph["provenance"], cfg["hfov"], tuple(cfg["image_size"]))


def scene_at(scene: SceneSpec, objects: dict) -> SceneSpec:
    """``scene`` with object placements taken from a trace snapshot."""
    objs = []
    for o in scene.objects:
        x, y, z, rest = objects[o.obj_id]
        objs.append(replace(o, position=(x, y, z), resting_on=rest))
    return replace(scene, objects=tuple(objs))


# --------------------------------------------------------------------------
# key steps


@dataclass(frozen=True)
class KeyStep:
    episode_id: str
    scene_id: str
    task: TaskInstance
    source_step: int
    checkpoint: int
    role: str
    kind: str
    state: RobotState
    scene: SceneSpec
    frames: PoseGraph
    waypoint: Optional[tuple]
    plan: OraclePlan

    def __post_init__(self):
        expected = {"search_frame": "search_scene_frame", "pick_frame": "pick", "place_frame": "place"}
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if expected.get(self.role, "nav_to_point") != self.kind:
            raise ValueError(f"role {self.role} does not match action {self.kind}")

    @property
    def answer(self):
        return self.plan.frame_index if self.kind == "search_scene_frame" else [list(self.plan.bbox_norm)]

    @property
    def camera(self):
        ref = self.frames.frames[0].camera
        return self.state.camera(ref.hfov, ref.image_size)

    def context(self, history: str, reach: ReachModel = ReachModel()) -> AgentContext:
        return _context(self.task, self.frames, self.state, self.scene, history, self.source_step, reach)


def _context(task, frames: PoseGraph, state: RobotState, scene: SceneSpec, history: str, step: int,
             reach: ReachModel) -> AgentContext:
    ref = frames.frames[0].camera
    ego = observe(state, scene, ref.hfov, ref.image_size)
    return AgentContext(task.instruction, frames, ego, history, step, GroundTruth(scene, task, state, reach))


def nav_key_positions(visible: Sequence[bool], interval: int) -> list:
    """Checkpoint positions kept from one navigation segment.

    Start at the first checkpoint where the target is visible, then every
    ``interval`` checkpoints, then the last checkpoint.
    """
    if interval < 1:
        raise ValueError("waypoint_interval must be >= 1")
    first = next((i for i, v in enumerate(visible) if v), None)
    if first is None:
        return []
    out = list(range(first, len(visible), interval))
    if out[-1] != len(visible) - 1:
        out.append(len(visible) - 1)
    return out


def lookahead_waypoint(path_waypoints: Sequence, current, xy, lookahead: float = WAYPOINT_LOOKAHEAD_M):
    """First remaining path waypoint at least ``lookahead`` from ``xy``, else the final one."""
    wps = [tuple(w) for w in path_waypoints]
    if not wps:
        return None
    start = 1 if current is None else next((k for k, w in enumerate(wps) if math.dist(w, current) < 1e-9), 1)
    for w in wps[start:]:
        if math.dist(w, xy) >= lookahead:
            return w
    return wps[-1]


def _target_rec(task: TaskInstance, holding) -> str:
    return task.goal_rec if holding is not None else task.start_rec


def select_key_steps(
    trace: EpisodeTrace,
    scene: SceneSpec,
    waypoint_interval: int = 5,
    reach: ReachModel = ReachModel(),
) -> list:
    """Key steps of one trace, each labelled by the oracle re-evaluated at that checkpoint.

    Candidates whose oracle decision disagrees with the logged action kind are
    dropped, so every key step's role matches its label.
    """
    if waypoint_interval < 1:
        raise ValueError("waypoint_interval must be >= 1")
    frames = trace_pose_graph(trace, scene)
    hfov, size = trace.config["hfov"], tuple(trace.config["image_size"])
    task = trace.task
    out = []
    for rec in trace.steps:
        action = rec.get("action")
        if action is None or not rec["outcome"]["success"]:
            continue
        kind = action["action"]["name"]
        sc = scene_at(scene, rec["objects"])
        cps = rec["outcome"]["checkpoints"]
        states = [RobotState(cp["pose"][0], cp["pose"][1], cp["pose"][2], holding=rec["holding_before"]) for cp in cps]
        if kind == "search_scene_frame":
            picks = [(0, "search_frame")]
        elif kind == "nav_to_point":
            target = _target_rec(task, rec["holding_before"])
            visible = [observe(s, sc, hfov, size).entity(target) is not None for s in states]
            pos = nav_key_positions(visible, waypoint_interval)
            picks = []
            for i in pos:
                role = "nav_start" if i == pos[0] else "nav_end" if i == len(cps) - 1 else "nav_waypoint"
                picks.append((i, role))
        else:
            picks = [(i, f"{kind}_frame") for i in range(min(3, len(cps)))]
        for i, role in picks:
            try:
                plan = oracle_plan(_context(task, frames, states[i], sc, rec["history"], rec["step"], reach))
            except OracleStuck:
                continue
            if plan.kind != kind:
                continue
            wp = None
            if "path" in rec["outcome"]:
                wp = lookahead_waypoint(rec["outcome"]["path"]["waypoints"], cps[i].get("waypoint"), states[i].xy)
            out.append(KeyStep(trace.episode_id, trace.scene_id, task, rec["step"], i, role, kind, states[i], sc,
                               frames, wp, plan))
    return out


def passes_filter(step: KeyStep, reach: ReachModel = ReachModel()) -> bool:
    cam = step.camera
    ego = observe(step.state, step.scene, cam.hfov, cam.image_size)
    task = step.task
    if step.kind == "search_scene_frame":
        return True
    if step.kind == "nav_to_point":
        if ego.entity(_target_rec(task, step.state.holding)) is None or step.waypoint is None:
            return False
        p = cam.project_point((step.waypoint[0], step.waypoint[1], step.scene.floor_height))
        return p is not None and cam.in_image(p[0], p[1])
    if step.kind == "pick":
        obj = step.scene.object(task.object)
        return ego.entity(task.object) is not None and horizontal_distance(step.state, obj.position) <= reach.max_reach
    goal = step.scene.receptacle(task.goal_rec)
    return ego.entity(task.goal_rec) is not None and goal.horizontal_distance(step.state.x, step.state.y) <= reach.max_reach


def filter_key_steps(steps: Iterable[KeyStep], scene: Optional[SceneSpec] = None,
                     reach: ReachModel = ReachModel()) -> list:
    """Keep nav steps with target and next waypoint in view and arm steps within reach and in view."""
    return [s for s in steps if passes_filter(s, reach)]


# --------------------------------------------------------------------------
# QA records


def record_id(step: KeyStep) -> str:
    return f"{step.episode_id}/{step.source_step:03d}/{step.checkpoint:03d}"


def plan_ground_truth(plan: OraclePlan, camera, frames: PoseGraph, task: TaskInstance) -> dict:
    """Scoring target of an oracle decision: the projected target point or the accepted frames."""
    gt = {"kind": plan.kind, "image_size": list(camera.image_size), "target_px": None, "frame_index": None,
          "accepted_frames": [], "target_class": TARGET_CLASS.get(plan.kind, "retrieval")}
    if plan.kind == "search_scene_frame":
        which = "goal" if plan.target_entity == task.goal_rec else "start"
        gt["frame_index"] = plan.frame_index
        gt["accepted_frames"] = [k for k, p in enumerate(frames.provenance) if p == PROVENANCE[which]]
    else:
        u, v, _ = camera.project_point(plan.target_point)
        gt["target_px"] = [u, v]
    return gt


def build_qa_records(
    steps: Sequence[KeyStep],
    template_bank: Optional[TemplateBank] = None,
    augmenter: Augmenter = identity_augmenter,
    skipped: Optional[list] = None,
) -> list:
    """Instantiate templates for each key step and chain the robot history.

    The augmenter may rewrite reasoning and summarization; the action
    arguments are never passed to it.  Records hitting a template hole are
    skipped and, if ``skipped`` is given, reported there.
    """
    bank = template_bank or TemplateBank.default()
    records = []
    history = {}
    for step in steps:
        ent = step.task.entities(step.scene)
        prev = history.get(step.episode_id, bank.initial_history)
        try:
            ctx = step.context(prev)
            action = plan_to_action(step.plan, ctx, bank)
            question = bank.question(instruction=step.task.instruction, history=prev,
                                     last_frame=len(step.frames) - 1, **ent)
        except TemplateHole as exc:
            if skipped is not None:
                skipped.append({"id": record_id(step), "reason": str(exc)})
            continue
        action = replace(action, reasoning=augmenter(action.reasoning), summarization=augmenter(action.summarization))
        answer = action.to_text()
        records.append(
            {
                "id": record_id(step),
                "episode_id": step.episode_id,
                "scene_id": step.scene_id,
                "task_id": step.task.task_id,
                "source_step": step.source_step,
                "checkpoint": step.checkpoint,
                "role": step.role,
                "kind": step.kind,
                "object_label": ent["object"],
                "task_description": step.task.instruction,
                "context_description": prev,
                "images": [f"{step.episode_id}/pose_frame/{k}" for k in range(len(step.frames))]
                + [f"{record_id(step)}/ego"],
                "question": question,
                "answer": answer,
                "action_information": action.args,
                "observation": {
                    "pose": [step.state.x, step.state.y, step.state.yaw],
                    "holding": step.state.holding,
                    "objects": {o.obj_id: [*o.position, o.resting_on] for o in step.scene.objects},
                    "task": step.task.to_dict(),
                    "pose_graph": {
                        "provenance": list(step.frames.provenance),
                        "poses": [p.to_dict() for p in step.frames.poses],
                    },
                    "hfov": step.frames.frames[0].camera.hfov,
                    "image_size": list(step.frames.frames[0].camera.image_size),
                },
                "ground_truth": plan_ground_truth(step.plan, step.camera, step.frames, step.task),
            }
        )
        history[step.episode_id] = action.summarization
    return records


def context_from_record(record: dict, scene: SceneSpec, reach: ReachModel = ReachModel()) -> AgentContext:
    """Rebuild the agent context a QA record was labelled from."""
    obs = record["observation"]
    sc = scene_at(scene, obs["objects"])
    task = TaskInstance.from_dict(obs["task"])
    size = tuple(obs["image_size"])
    poses = [RobotState.from_dict(p) for p in obs["pose_graph"]["poses"]]
    frames = PoseGraph.from_poses(sc, poses, obs["pose_graph"]["provenance"], obs["hfov"], size)
    x, y, yaw = obs["pose"]
    state = RobotState(x, y, yaw, holding=obs["holding"])
    return _context(task, frames, state, sc, record["context_description"], record["source_step"], reach)


def check_record(record: dict) -> list:
    """Schema problems of one record (empty when it is sound)."""
    problems = []
    try:
        action = parse_action(record["answer"])
    except (ValueError, KeyError, TypeError) as exc:
        return [f"answer does not parse: {exc}"]
    if action.kind != record["kind"]:
        problems.append("answer kind differs from record kind")
    if canonical.dumps(action.args) != canonical.dumps(record["action_information"]):
        problems.append("action_information does not round-trip")
    return problems


def check_chain(records: Sequence[dict]) -> list:
    """Episodes whose context_description is not the previous record's summarization."""
    bad = []
    last = {}
    for r in records:
        prev = last.get(r["episode_id"])
        if prev is not None and r["context_description"] != prev:
            bad.append(r["id"])
        last[r["episode_id"]] = parse_action(r["answer"]).summarization
    return bad


# --------------------------------------------------------------------------
# splitting and export


@dataclass(frozen=True)
class SplitConfig:
    train_scenes: tuple
    test_scenes: tuple
    test_objects: tuple

    def __post_init__(self):
        overlap = set(self.train_scenes) & set(self.test_scenes)
        if overlap:
            raise LeakageDetected(f"scenes in both splits: {sorted(overlap)}")

    def scenes(self, split: str) -> tuple:
        if split not in ("train", "test"):
            raise ValueError(f"unknown split {split!r}")
        return self.train_scenes if split == "train" else self.test_scenes

    def accepts(self, record: dict, split: str) -> bool:
        if record["scene_id"] not in self.scenes(split):
            return False
        unseen = record["object_label"] in self.test_objects
        return unseen if split == "test" else not unseen

    def to_dict(self) -> dict:
        return {"train_scenes": list(self.train_scenes), "test_scenes": list(self.test_scenes),
                "test_objects": list(self.test_objects)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitConfig":
        return cls(tuple(d["train_scenes"]), tuple(d["test_scenes"]), tuple(d["test_objects"]))


def default_split(records: Sequence[dict], scene_ids: Sequence[str], seed: int = 0,
                  ratio: tuple = SPLIT_RATIO) -> SplitConfig:
    """Scenes split by ``ratio`` (at least one test scene when there are two or more).

    Every task-object label seen in a test scene becomes a test object, so the
    train split never sees it.
    """
    ids = sorted(set(scene_ids))
    rng = np.random.default_rng([0x5B117, seed])
    ids = [ids[i] for i in rng.permutation(len(ids))]
    n_test = 0
    if len(ids) >= 2:
        n_test = min(len(ids) - 1, max(1, int(round(len(ids) * ratio[1] / sum(ratio)))))
    test = tuple(sorted(ids[:n_test]))
    train = tuple(sorted(ids[n_test:]))
    test_objects = tuple(sorted({r["object_label"] for r in records if r["scene_id"] in test}))
    return SplitConfig(train, test, test_objects)


def split_records(records: Sequence[dict], cfg: SplitConfig, split: str) -> list:
    return [r for r in records if cfg.accepts(r, split)]


def _sort_key(r: dict) -> tuple:
    return (r["scene_id"], r["episode_id"], r["source_step"], r["checkpoint"])


def kind_counts(records: Iterable[dict]) -> dict:
    c = Counter(KIND_SHORT[r["kind"]] for r in records)
    return {k: c.get(k, 0) for k in ("pick", "place", "nav", "search")}


def export_jsonl(records: Sequence[dict], path, split: str, split_config: SplitConfig) -> dict:
    """Write ``records`` sorted as canonical JSONL and return the manifest.

    Raises LeakageDetected if a record belongs to the other split's scenes or
    carries an object label reserved for the other split.
    """
    for r in records:
        if not split_config.accepts(r, split):
            raise LeakageDetected(f"record {r['id']} ({r['scene_id']}, {r['object_label']!r}) leaks into {split}")
    rows = sorted(records, key=_sort_key)
    canonical.write_jsonl(path, rows)
    return {
        "split": split,
        "n_records": len(rows),
        "kind_counts": kind_counts(rows),
        "scenes": sorted({r["scene_id"] for r in rows}),
        "object_labels": sorted({r["object_label"] for r in rows}),
        "leakage_check": "pass",
    }


# --------------------------------------------------------------------------
# batch driver


@dataclass
class SynthResult:
    records: list
    traces: list
    n_total: int
    n_valid: int
    skipped: list

    @property
    def yield_rate(self) -> float:
        return self.n_valid / self.n_total if self.n_total else 0.0


def synthesize_scene(
    scene: SceneSpec,
    n_episodes: int,
    seed: int = 0,
    waypoint_interval: int = 5,
    max_T: int = 20,
    config: Optional[AgentConfig] = None,
    bank: Optional[TemplateBank] = None,
    augmenter: Augmenter = identity_augmenter,
    spawn: Optional[Callable] = None,
) -> SynthResult:
    """Collect ``n_episodes`` oracle episodes in one scene and turn them into records."""
    from .world import NoValidPair, spawn_task

    cfg = config or AgentConfig()
    spawn = spawn or spawn_task
    records, traces, skipped = [], [], []
    valid = 0
    for i in range(n_episodes):
        s = seed + i
        try:
            task = spawn(scene, s)
            trace = collect_episode(scene, task, s, max_T, cfg, bank)
        except (EpisodeFailed, NoValidPair):
            continue
        valid += 1
        traces.append(trace)
        steps = filter_key_steps(select_key_steps(trace, scene, waypoint_interval, cfg.reach), scene, cfg.reach)
        records.extend(build_qa_records(steps, bank, augmenter, skipped))
    return SynthResult(records, traces, n_episodes, valid, skipped)


__all__ = [
    "EpisodeFailed",
    "KeyStep",
    "LeakageDetected",
    "SplitConfig",
    "build_qa_records",
    "check_chain",
    "check_record",
    "collect_episode",
    "context_from_record",
    "default_split",
    "export_jsonl",
    "filter_key_steps",
    "nav_key_positions",
    "plan_ground_truth",
    "select_key_steps",
    "split_records",
    "synthesize_scene",
]
