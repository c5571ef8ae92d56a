"""Decision sources behind the agent's policy slot.

Every policy exposes ``decide(ctx) -> str`` (raw text, parsed later by the
agent) and ``descriptor() -> dict``.
"""

import base64
import json
import math
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import canonical
from .agent import ACTION_KINDS, AgentContext, HighLevelAction, PolicyError
from .planner import horizontal_distance
from .sim import (
    CameraPose,
    Observation,
    bbox_center,
    entity_index,
    norm_bbox,
    point_visible,
    to_ppm,
    unproject,
)
from .templates import TemplateBank
from .world import place_point

PROTOCOL_VERSION = 1
NAV_HALF_PX = 20.0
PLACE_PATCH_M = 0.15
# Beyond this range a box on the place point unprojects too coarsely; aim at the near edge first.
PLACE_APPROACH_M = 3.0
_NOISE_STREAM = 0x0415E
_PIVOT_STREAM = 0x91F07

ACTION_SCHEMA_DOC = (
    'Reply with JSON {"reasoning": str, "action": {"name": one of search_scene_frame | nav_to_point | pick | place, '
    '"args": frame index (int) for search_scene_frame, [[x1, y1, x2, y2]] integers in [0, 1000] otherwise}, '
    '"summarization": str}.'
)


class OracleStuck(RuntimeError):
    """The target receptacle is invisible from every pose-graph frame."""


# --------------------------------------------------------------------------
# oracle


PHASES = ("locate_object", "approach_object", "pick", "locate_goal", "approach_goal", "place")


@dataclass(frozen=True)
class OracleRuleState:
    phase: str


@dataclass(frozen=True)
class OraclePlan:
    """What the oracle decided, with the 3-D point its box is centred on."""

    phase: str
    kind: str
    frame_index: Optional[int] = None
    bbox_norm: Optional[tuple] = None
    target_point: Optional[tuple] = None
    target_entity: Optional[str] = None
    summary_slot: str = ""


def centered_box(camera: CameraPose, point, half_px: float) -> Optional[tuple]:
    """Square pixel box centred on the projection of ``point``, shrunk to stay inside the image."""
    p = camera.project_point(point)
    if p is None:
        return None
    u, v = p[0], p[1]
    W, H = camera.image_size
    if not camera.in_image(u, v):
        return None
    half = min(half_px, u, W - u, v, H - v)
    if half <= 0:
        return None
    return norm_bbox((u - half, v - half, u + half, v + half), camera.image_size)


def _patch_half_px(camera: CameraPose, point, half_m: float) -> float:
    p = camera.project_point(point)
    best = 0.0
    for dx in (-half_m, half_m):
        for dy in (-half_m, half_m):
            q = camera.project_point((point[0] + dx, point[1] + dy, point[2]))
            if q is not None:
                best = max(best, abs(q[0] - p[0]), abs(q[1] - p[1]))
    return best


def _nav_box(ego: Observation, point, entity_id: str) -> tuple:
    """Box and 3-D target for driving towards ``point``.

    When the point itself falls outside the image, the centre of the entity's
    visible box is used instead and the target is read back from depth.
    """
    cam = ego.camera
    box = centered_box(cam, point, NAV_HALF_PX)
    if box is not None:
        return box, tuple(float(v) for v in point)
    ent = ego.entity(entity_id)
    if ent is None:
        return None, None
    u, v = bbox_center(ent.bbox_px)
    W, H = cam.image_size
    u, v = min(max(u, 0.5), W - 0.5), min(max(v, 0.5), H - 0.5)
    target = unproject(cam, (u, v), ego.depth_at(u, v))
    half = min(NAV_HALF_PX, u, W - u, v, H - v)
    return norm_bbox((u - half, v - half, u + half, v + half), cam.image_size), tuple(float(x) for x in target)


def _near_edge_point(rec, state, inset: float = 0.05) -> tuple:
    """Point on the receptacle top closest to the robot, kept ``inset`` inside the footprint."""
    lo, hi = rec.box_min, rec.box_max
    x = min(max(state.x, lo[0] + inset), hi[0] - inset)
    y = min(max(state.y, lo[1] + inset), hi[1] - inset)
    return (float(x), float(y), float(rec.height))


def _rec_nav_box(ego: Observation, rec, state) -> tuple:
    for p in (_near_edge_point(rec, state), rec.center3d):
        if centered_box(ego.camera, p, NAV_HALF_PX) is not None and point_visible(
            ego.camera, ego.scene, p, entity_index(ego.scene, rec.rec_id)
        ):
            return _nav_box(ego, p, rec.rec_id)
    return _nav_box(ego, rec.center3d, rec.rec_id)


def _search_index(ctx: AgentContext, rec_id: str, provenance: str) -> int:
    pg = ctx.pose_frames
    if provenance in pg.provenance:
        return pg.index_of(provenance)
    for k, f in enumerate(pg.frames):
        if f.entity(rec_id) is not None:
            return k
    raise OracleStuck(f"{rec_id} is not visible in any pose-graph frame")


def oracle_plan(ctx: AgentContext) -> OraclePlan:
    """The oracle's rule cascade, evaluated against ground truth."""
    gt = ctx.ground_truth
    if gt is None:
        raise ValueError("the oracle needs ground truth in the context")
    scene, task, state, reach = gt.scene, gt.task, gt.state, gt.reach
    ego = ctx.ego
    cam = ego.camera
    if state.holding is None:
        obj = scene.object(task.object)
        ent = ego.entity(task.object)
        if ent is not None and horizontal_distance(state, obj.position) <= reach.max_reach:
            half = (ent.bbox_px[2] - ent.bbox_px[0]) / 2
            box = centered_box(cam, obj.position, max(half, 1.0))
            if box is not None:
                return OraclePlan("pick", "pick", bbox_norm=box, target_point=tuple(obj.position),
                                  target_entity=obj.obj_id, summary_slot="picked")
        rec_ent = ego.entity(task.start_rec)
        if ent is None and rec_ent is None:
            k = _search_index(ctx, task.start_rec, "at_start_rec")
            return OraclePlan("locate_object", "search_scene_frame", frame_index=k,
                              target_entity=task.start_rec, summary_slot="approach_object")
        if ent is not None:
            box, point = _nav_box(ego, obj.position, task.object)
        else:
            box, point = _rec_nav_box(ego, scene.receptacle(task.start_rec), state)
        if box is None:
            k = _search_index(ctx, task.start_rec, "at_start_rec")
            return OraclePlan("locate_object", "search_scene_frame", frame_index=k,
                              target_entity=task.start_rec, summary_slot="approach_object")
        return OraclePlan("approach_object", "nav_to_point", bbox_norm=box, target_point=point,
                          target_entity=task.start_rec, summary_slot="approach_object")

    goal = scene.receptacle(task.goal_rec)
    code = entity_index(scene, task.goal_rec)
    pp = place_point(scene, goal, ignore=(state.holding,))
    pp_visible = pp is not None and point_visible(cam, scene, pp, code)
    if pp_visible and horizontal_distance(state, pp) <= reach.max_reach:
        half = max(_patch_half_px(cam, pp, PLACE_PATCH_M), 1.0)
        box = centered_box(cam, pp, half)
        if box is not None:
            return OraclePlan("place", "place", bbox_norm=box, target_point=pp,
                              target_entity=task.goal_rec, summary_slot="placed")
    goal_ent = ego.entity(task.goal_rec)
    if not pp_visible and goal_ent is None:
        k = _search_index(ctx, task.goal_rec, "at_goal_rec")
        return OraclePlan("locate_goal", "search_scene_frame", frame_index=k,
                          target_entity=task.goal_rec, summary_slot="approach_goal")
    box = None
    if pp_visible and horizontal_distance(state, pp) <= PLACE_APPROACH_M:
        box, point = _nav_box(ego, pp, task.goal_rec)
    if box is None:
        box, point = _rec_nav_box(ego, goal, state)
    if box is None:
        k = _search_index(ctx, task.goal_rec, "at_goal_rec")
        return OraclePlan("locate_goal", "search_scene_frame", frame_index=k,
                          target_entity=task.goal_rec, summary_slot="approach_goal")
    return OraclePlan("approach_goal", "nav_to_point", bbox_norm=box, target_point=point,
                      target_entity=task.goal_rec, summary_slot="approach_goal")


def oracle_rule_state(ctx: AgentContext) -> OracleRuleState:
    return OracleRuleState(oracle_plan(ctx).phase)


def plan_to_action(plan: OraclePlan, ctx: AgentContext, bank: TemplateBank) -> HighLevelAction:
    gt = ctx.ground_truth
    ent = gt.task.entities(gt.scene)
    key = gt.task.task_id
    target_label = gt.scene.receptacle(plan.target_entity).label if plan.target_entity and plan.target_entity.startswith("rec_") else ent["start"]
    reasoning = bank.reasoning(plan.kind, key, target=target_label,
                               frame=plan.frame_index if plan.frame_index is not None else "", **ent)
    summary = bank.summary(plan.summary_slot, key, **ent)
    if plan.kind == "search_scene_frame":
        return HighLevelAction(plan.kind, frame_index=plan.frame_index, reasoning=reasoning, summarization=summary)
    return HighLevelAction(plan.kind, bbox_norm=tuple(plan.bbox_norm), reasoning=reasoning, summarization=summary)


def oracle_decide(ctx: AgentContext, bank: Optional[TemplateBank] = None) -> str:
    bank = bank or TemplateBank.default()
    return plan_to_action(oracle_plan(ctx), ctx, bank).to_text()


class OraclePolicy:
    name = "oracle"

    def __init__(self, bank: Optional[TemplateBank] = None):
        self.bank = bank or TemplateBank.default()

    def descriptor(self) -> dict:
        return {"name": self.name, "config_digest": canonical.digest({})}

    def decide(self, ctx: AgentContext) -> str:
        return oracle_decide(ctx, self.bank)


# --------------------------------------------------------------------------
# noisy oracle


def _truncated_normals(rng: np.random.Generator, n: int, bound: float = 2.0) -> np.ndarray:
    out = np.empty(n)
    for i in range(n):
        z = rng.standard_normal()
        while abs(z) > bound:
            z = rng.standard_normal()
        out[i] = z
    return out


def perturb_bbox(bbox_norm, z, sigma_px: float, image_size) -> tuple:
    W, H = image_size
    scale = (1000.0 / W, 1000.0 / H, 1000.0 / W, 1000.0 / H)
    vals = [int(round(min(max(b + sigma_px * zi * s, 0.0), 1000.0))) for b, zi, s in zip(bbox_norm, z, scale)]
    x1, y1, x2, y2 = vals
    return min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2)


def noisy_oracle_decide(ctx: AgentContext, sigma_px: float, p_wrong_action: float, seed: int,
                        bank: Optional[TemplateBank] = None) -> str:
    """Oracle output with Gaussian box noise and, with probability ``p_wrong_action``,
    the action kind replaced by one of the other three, uniformly."""
    if sigma_px < 0 or not 0 <= p_wrong_action <= 1:
        raise ValueError("need sigma_px >= 0 and 0 <= p_wrong_action <= 1")
    bank = bank or TemplateBank.default()
    action = plan_to_action(oracle_plan(ctx), ctx, bank)
    rng = np.random.default_rng([_NOISE_STREAM, seed, int(ctx.digest()[:15], 16)])
    z = _truncated_normals(rng, 4)
    u = rng.random()
    alt = int(rng.integers(3))
    alt_frame = int(rng.integers(max(len(ctx.pose_frames), 1)))
    image_size = ctx.ego.camera.image_size
    bbox = action.bbox_norm
    if bbox is None:
        # A search step has no box; noise is applied to a box at the image centre if the kind flips.
        bbox = (480, 480, 520, 520)
    bbox = perturb_bbox(bbox, z, sigma_px, image_size)
    kind = action.kind
    if u < p_wrong_action:
        kind = [k for k in ACTION_KINDS if k != action.kind][alt]
    if kind == "search_scene_frame":
        frame = action.frame_index if action.kind == kind else alt_frame
        out = HighLevelAction(kind, frame_index=frame, reasoning=action.reasoning, summarization=action.summarization)
    else:
        out = HighLevelAction(kind, bbox_norm=bbox, reasoning=action.reasoning, summarization=action.summarization)
    return out.to_text()


class NoisyOraclePolicy:
    name = "noisy"

    def __init__(self, sigma_px: float = 0.0, p_wrong_action: float = 0.0, seed: int = 0,
                 bank: Optional[TemplateBank] = None):
        self.sigma_px = float(sigma_px)
        self.p_wrong_action = float(p_wrong_action)
        self.seed = seed
        self.bank = bank or TemplateBank.default()

    def descriptor(self) -> dict:
        cfg = {"sigma_px": self.sigma_px, "p_wrong_action": self.p_wrong_action, "seed": self.seed}
        return {"name": self.name, **cfg, "config_digest": canonical.digest(cfg)}

    def decide(self, ctx: AgentContext) -> str:
        return noisy_oracle_decide(ctx, self.sigma_px, self.p_wrong_action, self.seed, self.bank)


# --------------------------------------------------------------------------
# remote model over HTTP


@dataclass(frozen=True)
class RemotePolicyConfig:
    endpoint: str
    timeout: float = 60.0
    retries: int = 2
    payload_mode: str = "structured"
    include_ground_truth: bool = False

    def __post_init__(self):
        if self.retries < 0 or not self.timeout > 0:
            raise ValueError("need retries >= 0 and timeout > 0")
        if self.payload_mode not in ("structured", "structured+raster"):
            raise ValueError(f"unknown payload mode {self.payload_mode!r}")


def _entity_payload(e) -> dict:
    return {"label": e.label, "bbox_norm": list(e.bbox_norm), "depth_m": e.depth_m}


def ground_truth_payload(ctx: AgentContext) -> dict:
    gt = ctx.ground_truth
    cam = ctx.ego.camera
    return {
        "scene": gt.scene.to_dict(),
        "task": gt.task.to_dict(),
        "state": gt.state.to_dict(),
        "reach": dict(gt.reach.__dict__),
        "pose_graph": {
            "provenance": list(ctx.pose_frames.provenance),
            "poses": [p.to_dict() for p in ctx.pose_frames.poses],
        },
        "camera": {"hfov": cam.hfov, "image_size": list(cam.image_size)},
    }


def build_payload(ctx: AgentContext, cfg: RemotePolicyConfig) -> bytes:
    """Wire request body.  Identical contexts give identical bytes."""
    ego = {"entities": [_entity_payload(e) for e in ctx.ego.entities]}
    if cfg.payload_mode == "structured+raster":
        ego["raster"] = base64.b64encode(to_ppm(ctx.ego)).decode("ascii")
    body = {
        "protocol_version": PROTOCOL_VERSION,
        "instruction": ctx.instruction,
        "history": ctx.history,
        "step": ctx.step,
        "pose_frames": [
            {"index": i, "provenance_hidden": True, "entities": [_entity_payload(e) for e in f.entities]}
            for i, f in enumerate(ctx.pose_frames.frames)
        ],
        "ego_frame": ego,
        "action_schema_doc": ACTION_SCHEMA_DOC,
    }
    if cfg.include_ground_truth:
        body["ground_truth"] = ground_truth_payload(ctx)
    return json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def remote_decide(ctx: AgentContext, cfg: RemotePolicyConfig) -> str:
    """POST the context, retrying transport errors; return the model text untouched."""
    body = build_payload(ctx, cfg)
    last_kind, last_msg = "transport-error", "no attempt made"
    for _ in range(cfg.retries + 1):
        req = urllib.request.Request(cfg.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
            raw = payload["raw_text"]
            if not isinstance(raw, str):
                raise ValueError("raw_text must be a string")
            return raw
        except urllib.error.HTTPError as exc:
            last_kind, last_msg = "transport-error", f"HTTP {exc.code}"
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                last_kind, last_msg = "timeout", str(exc.reason)
            else:
                last_kind, last_msg = "transport-error", str(exc.reason)
        except (socket.timeout, TimeoutError) as exc:
            last_kind, last_msg = "timeout", str(exc) or "timed out"
        except (ConnectionError, OSError, ValueError, KeyError) as exc:
            last_kind, last_msg = "transport-error", f"{type(exc).__name__}: {exc}"
    raise PolicyError(f"{cfg.endpoint}: {last_msg} after {cfg.retries + 1} attempts", kind=last_kind)


class RemotePolicy:
    name = "remote"

    def __init__(self, cfg: RemotePolicyConfig):
        self.cfg = cfg

    def descriptor(self) -> dict:
        cfg = {"endpoint": self.cfg.endpoint, "payload_mode": self.cfg.payload_mode}
        return {"name": self.name, **cfg, "config_digest": canonical.digest(cfg)}

    def decide(self, ctx: AgentContext) -> str:
        return remote_decide(ctx, self.cfg)


# --------------------------------------------------------------------------
# scripted policies (fault injection)


class ScriptedPolicy:
    """Replays fixed texts in a cycle."""

    name = "scripted"

    def __init__(self, texts, label: str = "scripted"):
        self.texts = [texts] if isinstance(texts, str) else list(texts)
        self.label = label

    def descriptor(self) -> dict:
        return {"name": self.label, "config_digest": canonical.digest(self.texts)}

    def decide(self, ctx: AgentContext) -> str:
        return self.texts[ctx.step % len(self.texts)]


def repeat_search_policy(frame_index: int = 0) -> ScriptedPolicy:
    text = HighLevelAction(
        "search_scene_frame",
        frame_index=frame_index,
        reasoning="The target should be in this scene frame.",
        summarization="I am searching the scene frames.",
    ).to_text()
    return ScriptedPolicy(text, label=f"repeat-search:{frame_index}")


class RepeatRetrievalPolicy:
    """Keeps choosing image retrieval once the target is located, never navigating."""

    name = "repeat-retrieval"

    def __init__(self, bank: Optional[TemplateBank] = None):
        self.bank = bank or TemplateBank.default()

    def descriptor(self) -> dict:
        return {"name": self.name, "config_digest": canonical.digest({})}

    def decide(self, ctx: AgentContext) -> str:
        gt = ctx.ground_truth
        rec = gt.task.goal_rec if gt.state.holding else gt.task.start_rec
        prov = "at_goal_rec" if gt.state.holding else "at_start_rec"
        k = _search_index(ctx, rec, prov)
        return HighLevelAction(
            "search_scene_frame",
            frame_index=k,
            reasoning="I should look for the receptacle in the scene frames again.",
            summarization=ctx.history,
        ).to_text()


def invalid_json_policy() -> ScriptedPolicy:
    return ScriptedPolicy("not json at all", label="invalid-json")


# --------------------------------------------------------------------------
# PIVOT-style visual sampling


@dataclass(frozen=True)
class PivotResult:
    point: tuple
    score: float
    bbox_norm: tuple
    iterations: tuple


def pivot_sample(
    scorer: Callable[[np.ndarray], np.ndarray],
    n_init: int = 10,
    n_opt: int = 6,
    iters: int = 2,
    seed: int = 0,
    image_size: tuple = (512, 512),
    mean: tuple = (256.0, 256.0),
    std: tuple = (100.0, 100.0),
    ctx: Optional[AgentContext] = None,
) -> PivotResult:
    """Iterative Gaussian sampling of image points scored by ``scorer``.

    Each round samples ``n_init`` points (raw pixels, clamped to the image),
    keeps the ``n_opt`` best, refits the mean and (population) std to them and
    samples again.  The best point seen is returned as a +-5 unit box in the
    [0, 1000] frame; ties go to the earliest sample.
    """
    if ctx is not None:
        image_size = ctx.ego.camera.image_size
    if n_opt < 1 or n_init < n_opt or iters < 0:
        raise ValueError("need 1 <= n_opt <= n_init and iters >= 0")
    W, H = image_size
    rng = np.random.default_rng([_PIVOT_STREAM, seed])
    mu = np.asarray(mean, dtype=float)
    sd = np.asarray(std, dtype=float)
    best_pt, best_score = None, -math.inf
    history = []
    for it in range(iters + 1):
        pts = rng.normal(mu, sd, size=(n_init, 2))
        pts[:, 0] = np.clip(pts[:, 0], 0.0, W - 1.0)
        pts[:, 1] = np.clip(pts[:, 1], 0.0, H - 1.0)
        scores = np.asarray(scorer(pts), dtype=float)
        for p, s in zip(pts, scores):
            if s > best_score:
                best_pt, best_score = p.copy(), float(s)
        order = sorted(range(n_init), key=lambda i: (-scores[i], i))
        kept = pts[order[:n_opt]]
        history.append({"mean": mu.tolist(), "std": sd.tolist(), "samples": pts.tolist(), "kept": kept.tolist()})
        if it < iters:
            mu = kept.mean(axis=0)
            sd = kept.std(axis=0)
    cx = int(math.floor(best_pt[0] * 1000 / W))
    cy = int(math.floor(best_pt[1] * 1000 / H))
    box = (max(cx - 5, 0), max(cy - 5, 0), min(cx + 5, 1000), min(cy + 5, 1000))
    return PivotResult((float(best_pt[0]), float(best_pt[1])), best_score, box, tuple(history))


class PivotPolicy:
    """Oracle decisions with grounding replaced by PIVOT sampling.

    The scorer rewards closeness to the oracle's target pixel, standing in for
    a visual ranker.
    """

    name = "pivot"

    def __init__(self, seed: int = 0, n_init: int = 10, n_opt: int = 6, iters: int = 2,
                 bank: Optional[TemplateBank] = None):
        self.seed = seed
        self.n_init, self.n_opt, self.iters = n_init, n_opt, iters
        self.bank = bank or TemplateBank.default()

    def descriptor(self) -> dict:
        cfg = {"seed": self.seed, "n_init": self.n_init, "n_opt": self.n_opt, "iters": self.iters}
        return {"name": self.name, **cfg, "config_digest": canonical.digest(cfg)}

    def decide(self, ctx: AgentContext) -> str:
        plan = oracle_plan(ctx)
        action = plan_to_action(plan, ctx, self.bank)
        if plan.kind == "search_scene_frame":
            return action.to_text()
        target = ctx.ego.camera.project_point(plan.target_point)
        tu, tv = target[0], target[1]

        def scorer(pts):
            return -np.hypot(pts[:, 0] - tu, pts[:, 1] - tv)

        seed = int(canonical.digest([self.seed, ctx.digest()])[:15], 16)
        res = pivot_sample(scorer, self.n_init, self.n_opt, self.iters, seed=seed, ctx=ctx)
        return HighLevelAction(plan.kind, bbox_norm=res.bbox_norm, reasoning=action.reasoning,
                               summarization=action.summarization).to_text()


def make_policy(spec: str, seed: int = 0, bank: Optional[TemplateBank] = None, **remote_kwargs):
    """Build a policy from ``oracle``, ``noisy:SIGMA,P``, ``remote:URL``, ``pivot``,
    ``repeat-search[:K]``, ``repeat-retrieval`` or ``invalid-json``."""
    if spec == "oracle":
        return OraclePolicy(bank)
    if spec.startswith("noisy:"):
        parts = spec[len("noisy:"):].split(",")
        if len(parts) != 2:
            raise ValueError(f"noisy policy spec must be noisy:SIGMA,P, got {spec!r}")
        return NoisyOraclePolicy(float(parts[0]), float(parts[1]), seed, bank)
    if spec.startswith("remote:"):
        return RemotePolicy(RemotePolicyConfig(spec[len("remote:"):], **remote_kwargs))
    if spec == "pivot":
        return PivotPolicy(seed, bank=bank)
    if spec.startswith("repeat-search"):
        k = int(spec.split(":", 1)[1]) if ":" in spec else 0
        return repeat_search_policy(k)
    if spec == "repeat-retrieval":
        return RepeatRetrievalPolicy(bank)
    if spec == "invalid-json":
        return invalid_json_policy()
    raise ValueError(f"unknown policy spec {spec!r}")
