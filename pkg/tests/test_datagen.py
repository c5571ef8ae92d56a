import json
import math
from dataclasses import replace
from functools import lru_cache

import pytest
from hypothesis import given
from hypothesis import strategies as st

from owmm_bench import canonical
from owmm_bench.agent import parse_action
from owmm_bench.datagen import (
    EpisodeFailed,
    LeakageDetected,
    SplitConfig,
    build_qa_records,
    check_chain,
    check_record,
    collect_episode,
    context_from_record,
    default_split,
    export_jsonl,
    filter_key_steps,
    kind_counts,
    lookahead_waypoint,
    nav_key_positions,
    passes_filter,
    select_key_steps,
    split_records,
    synthesize_scene,
)
from owmm_bench.policy import oracle_decide
from owmm_bench.sim import RobotState
from owmm_bench.templates import TemplateBank
from owmm_bench.world import spawn_task

from helpers import scene


@lru_cache(maxsize=None)
def synth(scene_seed=0, n=4, interval=5):
    return synthesize_scene(scene(scene_seed), n, seed=0, waypoint_interval=interval)


@lru_cache(maxsize=None)
def traced(scene_seed=0, seed=0):
    sc = scene(scene_seed)
    return sc, collect_episode(sc, spawn_task(sc, seed), seed)


# --------------------------------------------------------------------------
# key-step selection


def test_nav_positions_hand_example():
    # visible from the third checkpoint of twelve, interval 5: third, eighth and the last
    vis = [False, False] + [True] * 10
    assert nav_key_positions(vis, 5) == [2, 7, 11]


def test_nav_positions_never_visible():
    assert nav_key_positions([False] * 7, 5) == []


def test_nav_positions_interval_validated():
    with pytest.raises(ValueError):
        nav_key_positions([True], 0)


@given(st.lists(st.booleans(), min_size=1, max_size=40), st.integers(1, 10))
def test_nav_positions_property(vis, k):
    pos = nav_key_positions(vis, k)
    if not any(vis):
        assert pos == []
        return
    first = vis.index(True)
    assert pos[0] == first and pos[-1] == len(vis) - 1
    assert pos == sorted(set(pos))
    steps = [b - a for a, b in zip(pos, pos[1:])]
    assert all(s == k for s in steps[:-1]) and all(0 < s <= k for s in steps)


def test_lookahead_skips_near_waypoints():
    wps = [(0, 0), (0.5, 0), (1.2, 0), (3, 0)]
    assert lookahead_waypoint(wps, None, (0, 0)) == (1.2, 0)
    assert lookahead_waypoint(wps, (1.2, 0), (1.0, 0)) == (3, 0)
    assert lookahead_waypoint(wps, (3, 0), (2.5, 0)) == (3, 0)
    assert lookahead_waypoint([], None, (0, 0)) is None


def test_oracle_episode_has_four_or_more_steps():
    _, tr = traced(0, 0)
    assert tr.terminal == "success" and len(tr.steps) >= 4


def test_failed_collection_raises():
    sc = scene(0)
    with pytest.raises(EpisodeFailed):
        collect_episode(sc, spawn_task(sc, 0), 0, max_T=1)


def test_arm_steps_truncated_to_three():
    sc, tr = traced(0, 0)
    steps = select_key_steps(tr, sc)
    for rec in tr.steps:
        kind = rec["action"]["action"]["name"]
        if kind in ("pick", "place"):
            n = len(rec["outcome"]["checkpoints"])
            got = [s for s in steps if s.source_step == rec["step"]]
            assert len(got) <= min(3, n)
            assert all(s.checkpoint < 3 for s in got)


def test_key_steps_match_oracle_labels():
    sc, tr = traced(1, 1)
    for s in select_key_steps(tr, sc):
        assert s.plan.kind == s.kind
        assert parse_action(oracle_decide(s.context("x"))).kind == s.kind


def test_no_nav_end_survives():
    for scene_seed in range(2):
        sc, tr = traced(scene_seed, 0)
        assert all(s.role != "nav_end" for s in select_key_steps(tr, sc))


def _pick_step(sc, tr):
    return next(s for s in select_key_steps(tr, sc) if s.kind == "pick")


def test_filter_drops_pick_out_of_reach():
    sc, tr = traced(0, 0)
    s = _pick_step(sc, tr)
    assert passes_filter(s)
    obj = s.scene.object(s.task.object)
    # move the base straight back along its heading until the object is 1.2 m away
    dx, dy = obj.position[0] - s.state.x, obj.position[1] - s.state.y
    d = math.hypot(dx, dy)
    back = RobotState(obj.position[0] - dx / d * 1.2, obj.position[1] - dy / d * 1.2, s.state.yaw)
    assert not passes_filter(replace(s, state=back))


def test_filter_drops_waypoint_behind_camera():
    sc, tr = traced(0, 0)
    nav = [s for s in select_key_steps(tr, sc) if s.kind == "nav_to_point" and passes_filter(s)]
    assert nav
    s = nav[0]
    c, sn = math.cos(s.state.yaw), math.sin(s.state.yaw)
    behind = (s.state.x - 2 * c, s.state.y - 2 * sn)
    assert not passes_filter(replace(s, waypoint=behind))
    assert not passes_filter(replace(s, waypoint=None))


# --------------------------------------------------------------------------
# records


def test_first_context_and_chain():
    res = synth()
    assert res.records
    bank = TemplateBank.default()
    firsts = {}
    for r in res.records:
        firsts.setdefault(r["episode_id"], r)
    assert all(r["context_description"] == "Task just started." for r in firsts.values())
    assert check_chain(res.records) == []
    assert all(check_record(r) == [] for r in res.records)
    # after the pick, the history is one of the "picked" or "approach_goal" summaries
    for r in res.records:
        if r["observation"]["holding"] is not None and r["kind"] == "nav_to_point":
            sc = scene(0)
            ent = {"object": r["object_label"], "start": sc.receptacle(r["observation"]["task"]["start_rec"]).label,
                   "goal": sc.receptacle(r["observation"]["task"]["goal_rec"]).label}
            allowed = bank.summary_variants("picked", **ent) + bank.summary_variants("approach_goal", **ent)
            assert r["context_description"] in allowed


def test_search_answers_are_accepted_frames():
    res = synth()
    searches = [r for r in res.records if r["kind"] == "search_scene_frame"]
    assert searches
    for r in searches:
        k = parse_action(r["answer"]).frame_index
        assert k in r["ground_truth"]["accepted_frames"]


def test_records_reproduce_their_answers():
    res = synth()
    for r in res.records:
        ctx = context_from_record(r, scene(0))
        want = parse_action(r["answer"])
        got = parse_action(oracle_decide(ctx))
        assert got.kind == want.kind and got.args == want.args


def test_records_reparse_as_json():
    res = synth()
    for r in res.records:
        again = json.loads(canonical.dumps(r))
        assert again["answer"] == r["answer"]
        assert parse_action(again["answer"]).args == r["action_information"]


def test_synthesis_is_deterministic():
    a = synthesize_scene(scene(0), 2, seed=0)
    b = synthesize_scene(scene(0), 2, seed=0)
    assert canonical.dumps(a.records) == canonical.dumps(b.records)


def test_augmenter_never_touches_arguments():
    sc, tr = traced(0, 0)
    steps = filter_key_steps(select_key_steps(tr, sc))
    plain = build_qa_records(steps)
    shouted = build_qa_records(steps, augmenter=str.upper)
    for a, b in zip(plain, shouted):
        assert a["action_information"] == b["action_information"]
        assert parse_action(b["answer"]).reasoning == parse_action(a["answer"]).reasoning.upper()


def test_template_hole_is_skipped():
    sc, tr = traced(0, 0)
    steps = filter_key_steps(select_key_steps(tr, sc))
    data = json.loads(json.dumps(TemplateBank.default().data))
    data["question"] = "{instruction} {nonexistent}"
    skipped = []
    assert build_qa_records(steps, TemplateBank(data), skipped=skipped) == []
    assert len(skipped) == len(steps)


def test_denser_waypoints_never_yield_fewer_records():
    dense = synth(0, 4, 1)
    sparse = synth(0, 4, 5)
    assert len(dense.records) >= len(sparse.records)


# --------------------------------------------------------------------------
# splits and export


def _rec(scene_id, label, rid="e/000/000"):
    return {"id": rid, "scene_id": scene_id, "object_label": label, "episode_id": "e", "source_step": 0,
            "checkpoint": 0, "kind": "pick"}


def test_overlapping_scenes_rejected():
    with pytest.raises(LeakageDetected):
        SplitConfig(("a", "b"), ("b",), ())


def test_leaked_label_detected(tmp_path):
    cfg = SplitConfig(("a",), ("b",), ("mug",))
    with pytest.raises(LeakageDetected):
        export_jsonl([_rec("a", "mug")], tmp_path / "train.jsonl", "train", cfg)
    with pytest.raises(LeakageDetected):
        export_jsonl([_rec("a", "cup")], tmp_path / "test.jsonl", "test", cfg)


def test_split_routes_records():
    cfg = SplitConfig(("a",), ("b",), ("mug",))
    recs = [_rec("a", "cup"), _rec("a", "mug"), _rec("b", "mug"), _rec("b", "cup")]
    assert split_records(recs, cfg, "train") == [recs[0]]
    assert split_records(recs, cfg, "test") == [recs[2]]


def test_default_split_ratio_and_objects():
    ids = [f"scene-{i:06d}" for i in range(143)]
    recs = [_rec(s, f"obj{i % 7}") for i, s in enumerate(ids)]
    cfg = default_split(recs, ids, seed=0)
    assert (len(cfg.train_scenes), len(cfg.test_scenes)) == (113, 30)
    labels_in_test = {r["object_label"] for r in recs if r["scene_id"] in cfg.test_scenes}
    assert set(cfg.test_objects) == labels_in_test
    assert SplitConfig.from_dict(cfg.to_dict()) == cfg


def test_empty_export(tmp_path):
    cfg = SplitConfig(("a",), ("b",), ())
    path = tmp_path / "train.jsonl"
    man = export_jsonl([], path, "train", cfg)
    assert path.read_bytes() == b""
    assert man["n_records"] == 0 and man["kind_counts"] == {"pick": 0, "place": 0, "nav": 0, "search": 0}


def test_export_is_sorted_and_counted(tmp_path):
    res = synth()
    cfg = SplitConfig((scene(0).scene_id,), (), ())
    man = export_jsonl(list(reversed(res.records)), tmp_path / "t.jsonl", "train", cfg)
    rows = [json.loads(l) for l in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert [r["id"] for r in rows] == sorted(r["id"] for r in res.records)
    assert man["kind_counts"] == kind_counts(res.records)
    assert sum(man["kind_counts"].values()) == len(rows)
