"""Single-step capability scores, episodic success flags and report rendering.

Everything here reads stored traces and records; nothing re-runs a policy.
"""

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import canonical
from .agent import ActionError, EpisodeTrace, HighLevelAction, parse_action
from .planner import ReachModel
from .policy import OracleStuck, oracle_plan
from .sim import RobotState, bbox_center, norm_to_px
from .world import SceneSpec

GROUNDING_CLASSES = ("object", "receptacle", "navigation")
EPISODIC_RATES = (
    "full_task",
    "retrieval_object",
    "robot_close_object",
    "object_picked",
    "retrieval_goal",
    "robot_close_goal",
)
DIAGONAL_FILTER = (0.75, 3.0)


class EmptyAfterFilter(ValueError):
    pass


class SchemaError(ValueError):
    pass


# --------------------------------------------------------------------------
# single step


@dataclass(frozen=True)
class SingleStepCase:
    case_id: str
    gt_kind: str
    image_size: tuple
    gt_point: Optional[tuple] = None
    gt_frames: tuple = ()
    prediction: Optional[HighLevelAction] = None
    parse_error: Optional[str] = None
    target_class: str = ""

    def __post_init__(self):
        if (self.gt_kind == "search_scene_frame") == (self.gt_point is not None):
            raise ValueError("a search case needs frames and no point; other cases need a point")
        if self.gt_kind == "search_scene_frame" and not self.gt_frames:
            raise ValueError("a search case needs at least one accepted frame")

    @property
    def diagonal(self) -> float:
        return math.hypot(*self.image_size)


def score_grounding(case: SingleStepCase) -> float:
    """1 - (distance from predicted box centre to the target) / image diagonal; 0 if invalid."""
    if case.gt_point is None:
        raise ValueError("grounding needs a point target")
    pred = case.prediction
    if pred is None or pred.kind != case.gt_kind or pred.bbox_norm is None:
        return 0.0
    x1, y1, x2, y2 = pred.bbox_norm
    if not (0 <= x1 <= x2 <= 1000 and 0 <= y1 <= y2 <= 1000):
        return 0.0
    cu, cv = bbox_center(norm_to_px(pred.bbox_norm, case.image_size))
    d = math.hypot(cu - case.gt_point[0], cv - case.gt_point[1])
    return min(1.0, max(0.0, 1.0 - d / case.diagonal))


def score_decision(cases: Sequence[SingleStepCase]) -> Optional[float]:
    if not cases:
        return None
    hits = sum(1 for c in cases if c.prediction is not None and c.prediction.kind == c.gt_kind)
    return hits / len(cases)


def retrieval_hit(case: SingleStepCase) -> bool:
    p = case.prediction
    return p is not None and p.kind == "search_scene_frame" and p.frame_index in case.gt_frames


def score_retrieval(cases: Sequence[SingleStepCase]) -> Optional[float]:
    rel = [c for c in cases if c.gt_kind == "search_scene_frame"]
    if not rel:
        return None
    return sum(retrieval_hit(c) for c in rel) / len(rel)


def _parse(raw, n_frames=None):
    if raw is None:
        return None, "missing-prediction"
    try:
        return parse_action(raw, n_frames), None
    except ActionError as exc:
        return None, exc.code


def case_from_ground_truth(case_id: str, gt: dict, raw_text: Optional[str], n_frames: Optional[int] = None,
                           ) -> SingleStepCase:
    pred, err = _parse(raw_text, n_frames)
    point = tuple(gt["target_px"]) if gt.get("target_px") is not None else None
    return SingleStepCase(case_id, gt["kind"], tuple(gt["image_size"]), point, tuple(gt.get("accepted_frames") or ()),
                          pred, err, gt.get("target_class", ""))


def check_qa_record(rec: dict) -> None:
    for key in ("id", "ground_truth", "answer", "observation"):
        if key not in rec:
            raise SchemaError(f"record {rec.get('id', '?')} lacks {key!r}")
    gt = rec["ground_truth"]
    for key in ("kind", "image_size", "target_px", "accepted_frames"):
        if key not in gt:
            raise SchemaError(f"record {rec['id']} ground truth lacks {key!r}")


def read_predictions(path) -> tuple:
    """Map record id -> raw text.  Lines that are not JSON objects with an id are counted as malformed."""
    preds, malformed = {}, 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                preds[str(row["id"])] = row.get("raw_text")
            except (ValueError, KeyError, TypeError):
                malformed += 1
    return preds, malformed


def cases_from_records(records: Sequence[dict], predictions: dict) -> list:
    cases = []
    for r in records:
        check_qa_record(r)
        n_frames = len(r["observation"]["pose_graph"]["poses"])
        cases.append(case_from_ground_truth(r["id"], r["ground_truth"], predictions.get(r["id"]), n_frames))
    return cases


def decision_points(trace: EpisodeTrace, scene: SceneSpec, reach: ReachModel = ReachModel()):
    """Yield ``(step_record, context)`` for every decision of a trace, rebuilt from logged state."""
    from .datagen import _context, scene_at, trace_pose_graph

    frames = trace_pose_graph(trace, scene)
    for rec in trace.steps:
        sc = scene_at(scene, rec["objects"])
        x, y, yaw = rec["pose_before"]
        state = RobotState(x, y, yaw, holding=rec["holding_before"])
        yield rec, _context(trace.task, frames, state, sc, rec["history"], rec["step"], reach)


def cases_from_trace(trace: EpisodeTrace, scene: SceneSpec, policy=None) -> list:
    """Single-step cases at each decision of ``trace``.

    Ground truth comes from the oracle at the logged state.  The prediction is
    the logged policy text, or ``policy``'s answer to the rebuilt context.
    """
    from .datagen import plan_ground_truth

    cases = []
    for rec, ctx in decision_points(trace, scene):
        try:
            plan = oracle_plan(ctx)
        except OracleStuck:
            continue
        gt = plan_ground_truth(plan, ctx.ego.camera, ctx.pose_frames, trace.task)
        raw = rec["raw_text"] if policy is None else policy.decide(ctx)
        cases.append(case_from_ground_truth(f"{trace.episode_id}/{rec['step']:03d}", gt, raw, len(ctx.pose_frames)))
    return cases


# --------------------------------------------------------------------------
# episodic


@dataclass(frozen=True)
class EpisodicThresholds:
    goal_strict: float = 0.85
    goal_lenient: float = 1.7
    pick_strict: float = 0.15
    pick_lenient: float = 0.8
    close_strict: float = 1.5
    close_lenient: float = 2.0

    def __post_init__(self):
        for name in ("goal", "pick", "close"):
            if getattr(self, f"{name}_strict") > getattr(self, f"{name}_lenient"):
                raise ValueError(f"{name}: strict threshold exceeds lenient")

    def for_mode(self, mode: str) -> dict:
        if mode not in ("strict", "lenient"):
            raise ValueError(f"unknown mode {mode!r}")
        return {k: getattr(self, f"{k}_{mode}") for k in ("goal", "pick", "close")}


def goal_threshold_from_diagonals(diagonals: Iterable[float], bounds: tuple = DIAGONAL_FILTER) -> tuple:
    """(lenient, strict): mean diagonal of the receptacles inside ``bounds`` and half of it."""
    kept = [float(d) for d in diagonals if bounds[0] <= d <= bounds[1]]
    if not kept:
        raise EmptyAfterFilter(f"no receptacle diagonal within {bounds}")
    mean = math.fsum(kept) / len(kept)
    return mean, mean / 2


def compute_goal_threshold(scenes: Sequence[SceneSpec], bounds: tuple = DIAGONAL_FILTER) -> tuple:
    return goal_threshold_from_diagonals([r.diagonal for s in scenes for r in s.receptacles], bounds)


def _phase_split(trace: EpisodeTrace) -> int:
    """Index of the first step after the task object was picked (len(steps) if never)."""
    for i, s in enumerate(trace.steps):
        if s["holding"] == trace.task.object and s["holding_before"] != trace.task.object:
            return i + 1
    return len(trace.steps)


def _first_search_hit(steps: Sequence[dict], accepted: set, completed: bool) -> bool:
    for s in steps:
        if s.get("action") and s["action"]["action"]["name"] == "search_scene_frame":
            return s["action"]["action"]["args"] in accepted
    return completed


def _min_distance(steps: Sequence[dict], point_of) -> float:
    best = math.inf
    for s in steps:
        px, py = point_of(s)
        poses = [s["pose_before"]] + [cp["pose"] for cp in s["outcome"]["checkpoints"]] + [s["pose"]]
        for p in poses:
            best = min(best, math.hypot(p[0] - px, p[1] - py))
    return best


def eval_episode(trace: EpisodeTrace, scene: SceneSpec, th: EpisodicThresholds = EpisodicThresholds(),
                 mode: str = "lenient") -> dict:
    """Per-episode success flags under ``mode`` thresholds."""
    t = th.for_mode(mode)
    task = trace.task
    split = _phase_split(trace)
    obj_phase, goal_phase = trace.steps[:split], trace.steps[split:]
    picked = split <= len(trace.steps) and any(
        s["holding"] == task.object and s["holding_before"] != task.object for s in trace.steps
    )
    placed = any(
        s.get("action") and s["action"]["action"]["name"] == "place" and s["outcome"]["success"]
        and s["outcome"].get("obj_id") == task.object
        for s in goal_phase
    )
    prov = trace.pose_graph["provenance"]
    start_frames = {k for k, p in enumerate(prov) if p == "at_start_rec"}
    goal_frames = {k for k, p in enumerate(prov) if p == "at_goal_rec"}

    goal = scene.receptacle(task.goal_rec)
    full = False
    if placed and trace.final_objects is not None:
        x, y, z, _ = trace.final_objects[task.object]
        full = float(np.linalg.norm(np.array([x, y, z]) - goal.center3d)) <= t["goal"]
    object_picked = any(
        s.get("action") and s["action"]["action"]["name"] == "pick" and s["outcome"]["success"]
        and s["outcome"].get("obj_id") == task.object
        and s["outcome"].get("grasp_distance") is not None and s["outcome"]["grasp_distance"] <= t["pick"]
        for s in trace.steps
    )
    close_obj = _min_distance(obj_phase, lambda s: s["objects"][task.object][:2]) <= t["close"]
    close_goal = bool(goal_phase) and _min_distance(goal_phase, lambda s: goal.center) <= t["close"]
    return {
        "episode_id": trace.episode_id,
        "terminal": trace.terminal,
        "full_task": bool(full),
        "retrieval_object": _first_search_hit(obj_phase, start_frames, picked),
        "robot_close_object": bool(close_obj),
        "object_picked": bool(object_picked),
        "retrieval_goal": bool(picked) and _first_search_hit(goal_phase, goal_frames, placed),
        "robot_close_goal": bool(close_goal),
        "dead_loop": trace.terminal == "dead_loop",
    }


# --------------------------------------------------------------------------
# aggregation


def mean_std(values: Sequence[float]) -> tuple:
    """Mean and population std using exactly rounded sums (independent of input order)."""
    n = len(values)
    if n == 0:
        return None, None
    m = math.fsum(values) / n
    return m, math.sqrt(math.fsum((v - m) ** 2 for v in values) / n)


def _rate(flags: Sequence[dict], key: str) -> Optional[float]:
    return sum(1 for f in flags if f[key]) / len(flags) if flags else None


def aggregate_report(cases: Sequence[SingleStepCase] = (), flags: Sequence[dict] = (), mode: Optional[str] = None,
                     meta: Optional[dict] = None) -> dict:
    """Table-shaped metrics.  Rates are None (rendered n/a) when there is nothing to average."""
    report = {"meta": dict(meta or {})}
    if cases is not None:
        scores = {c: [] for c in GROUNDING_CLASSES}
        for case in cases:
            if case.gt_point is not None:
                scores.setdefault(case.target_class or "navigation", []).append(score_grounding(case))
        grounding = {}
        for cls_, vals in sorted(scores.items()):
            m, sd = mean_std(vals)
            grounding[cls_] = {"n": len(vals), "mean": m, "std": sd}
        allv = [v for vals in scores.values() for v in vals]
        m, sd = mean_std(allv)
        grounding["all"] = {"n": len(allv), "mean": m, "std": sd}
        report["single_step"] = {
            "n_cases": len(cases),
            "n_invalid": sum(1 for c in cases if c.prediction is None),
            "decision_accuracy": score_decision(cases),
            "n_retrieval": sum(1 for c in cases if c.gt_kind == "search_scene_frame"),
            "retrieval_accuracy": score_retrieval(cases),
            "grounding": grounding,
        }
    if flags is not None:
        report["episodic"] = {
            "mode": mode,
            "n_episodes": len(flags),
            "rates": {k: _rate(flags, k) for k in EPISODIC_RATES},
            "dead_loop": {"count": sum(1 for f in flags if f["dead_loop"]), "total": len(flags)},
            "terminals": {t: sum(1 for f in flags if f["terminal"] == t)
                          for t in sorted({f["terminal"] for f in flags})},
        }
    return report


def runtime_stats(timings: Sequence[float]) -> dict:
    m, sd = mean_std(list(timings))
    return {"n_decisions": len(timings), "mean_s": m, "std_s": sd, "total_s": math.fsum(timings) if timings else 0.0}


def _pct(x) -> str:
    return "n/a" if x is None else f"{100 * x:.2f}%"


def _pm(g: dict) -> str:
    return "n/a" if g["mean"] is None else f"{g['mean']:.2f}(+-{g['std']:.2f})"


def render_text(report: dict, runtime: Optional[dict] = None) -> str:
    out = io.StringIO()
    ss = report.get("single_step")
    if ss is not None:
        g = ss["grounding"]
        out.write("Single-step evaluation\n")
        header = ["Decision", "Retrieval", "Grounding(object)", "Grounding(receptacle)", "Grounding(navigation)",
                  "Time(s)"]
        t = "n/a" if not runtime or runtime.get("mean_s") is None else f"{runtime['mean_s']:.3f}"
        row = [_pct(ss["decision_accuracy"]), _pct(ss["retrieval_accuracy"]),
               _pm(g.get("object", {"mean": None})), _pm(g.get("receptacle", {"mean": None})),
               _pm(g.get("navigation", {"mean": None})), t]
        out.write(_table(header, [row]))
        out.write(f"cases: {ss['n_cases']}  invalid predictions: {ss['n_invalid']}\n")
    ep = report.get("episodic")
    if ep is not None:
        if ss is not None:
            out.write("\n")
        out.write(f"Episodic evaluation ({ep['mode'] or 'n/a'} thresholds)\n")
        header = ["Full Task", "Retrieval(Object)", "Close to Object", "Object Picked", "Retrieval(Goal)",
                  "Close to Goal", "Dead Loop"]
        r = ep["rates"]
        row = [_pct(r[k]) for k in EPISODIC_RATES] + [f"{ep['dead_loop']['count']}/{ep['dead_loop']['total']}"]
        out.write(_table(header, [row]))
        out.write(f"episodes: {ep['n_episodes']}\n")
    return out.getvalue()


def _table(header: list, rows: list) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    line = " | ".join(h.ljust(w) for h, w in zip(header, widths))
    sep = "-+-".join("-" * w for w in widths)
    body = "\n".join(" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
    return f"{line}\n{sep}\n{body}\n"


def report_rows(report: dict) -> list:
    """Flat (section, metric, value) rows for the CSV export."""
    rows = []
    ss = report.get("single_step")
    if ss is not None:
        for k in ("n_cases", "n_invalid", "decision_accuracy", "n_retrieval", "retrieval_accuracy"):
            rows.append(("single_step", k, ss[k]))
        for cls_, g in ss["grounding"].items():
            for k in ("n", "mean", "std"):
                rows.append(("single_step", f"grounding_{cls_}_{k}", g[k]))
    ep = report.get("episodic")
    if ep is not None:
        rows.append(("episodic", "mode", ep["mode"]))
        rows.append(("episodic", "n_episodes", ep["n_episodes"]))
        for k, v in ep["rates"].items():
            rows.append(("episodic", k, v))
        rows.append(("episodic", "dead_loop_count", ep["dead_loop"]["count"]))
    return rows


def render_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "metric", "value"])
    for sec, k, v in report_rows(report):
        if isinstance(v, float):
            v = canonical.round_float(v)
        w.writerow([sec, k, "" if v is None else v])
    return buf.getvalue()


def write_report(report: dict, out_dir, runtime: Optional[dict] = None, figures: bool = True) -> list:
    """Write report.json/.txt/.csv (byte-deterministic) plus PNG figures; runtime goes to runtime.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    canonical.write_json(out / "report.json", report)
    (out / "report.txt").write_text(render_text(report), encoding="utf-8")
    (out / "report.csv").write_text(render_csv(report), encoding="utf-8")
    written = [out / "report.json", out / "report.txt", out / "report.csv"]
    if runtime is not None:
        canonical.write_json(out / "runtime.json", runtime)
        written.append(out / "runtime.json")
    if figures:
        from .figures import render_report_figures

        written += render_report_figures(report, out)
    return written


__all__ = [
    "EmptyAfterFilter",
    "EpisodicThresholds",
    "SchemaError",
    "SingleStepCase",
    "aggregate_report",
    "cases_from_records",
    "cases_from_trace",
    "compute_goal_threshold",
    "eval_episode",
    "goal_threshold_from_diagonals",
    "mean_std",
    "render_csv",
    "render_text",
    "score_decision",
    "score_grounding",
    "score_retrieval",
    "write_report",
]
