"""The ten acceptance criteria, each at its stated tolerance.

Every test records one ``criterion N: PASS|FAIL ...`` line, printed in the
terminal summary, before asserting.
"""

import math
import time
from pathlib import Path

import networkx as nx
import numpy as np

import conftest
from owmm_bench import canonical
from owmm_bench.agent import parse_action
from owmm_bench.cli import main
from owmm_bench.datagen import check_chain, context_from_record, default_split, split_records, synthesize_scene
from owmm_bench.evaluation import (
    SingleStepCase,
    aggregate_report,
    cases_from_trace,
    eval_episode,
    goal_threshold_from_diagonals,
    score_decision,
    score_grounding,
)
from owmm_bench.mock_server import MockConfig, MockPolicyServer
from owmm_bench.planner import astar
from owmm_bench.policy import (
    NoisyOraclePolicy,
    RemotePolicy,
    RemotePolicyConfig,
    RepeatRetrievalPolicy,
    pivot_sample,
)
from owmm_bench.sim import CameraPose, unproject
from owmm_bench.world import SceneSpec

from helpers import episode, oracle_batch, scene
from test_planner import dijkstra_graph


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)


def test_criterion_1_oracle_ceiling():
    runs, run_time = oracle_batch(10, 10)
    t0 = time.perf_counter()
    flags, cases = [], []
    for sc, _, _, tr in runs:
        flags.append(eval_episode(tr, sc, mode="lenient"))
        cases += cases_from_trace(tr, sc)
    elapsed = run_time + time.perf_counter() - t0
    full = sum(f["full_task"] for f in flags) / len(flags)
    rep = aggregate_report(cases, flags, "lenient")["single_step"]
    grounding = rep["grounding"]["all"]["mean"]
    ok = (len(runs) >= 100 and full >= 0.95 and rep["decision_accuracy"] == 1.0
          and rep["retrieval_accuracy"] == 1.0 and grounding >= 0.99 and elapsed <= 120)
    record(1, ok, f"episodes={len(runs)} full_task={full:.3f} decision={rep['decision_accuracy']:.3f} "
                  f"retrieval={rep['retrieval_accuracy']:.3f} grounding={grounding:.4f} time={elapsed:.1f}s")
    assert ok


def _grounding_fixture():
    # (image size, predicted box in per-mille, target pixel, expected score), worked by hand
    mid800, mid3000 = (450, 450, 550, 550), (500, 500, 500, 500)
    exact = 1 - 500 / math.sqrt(2e6)
    return [
        ((800, 600), mid800, (400, 300), 1.0),
        ((800, 600), mid800, (430, 340), 0.95),
        ((800, 600), mid800, (370, 340), 0.95),
        ((800, 600), mid800, (370, 260), 0.95),
        ((800, 600), mid800, (460, 380), 0.9),
        ((800, 600), mid800, (340, 220), 0.9),
        ((800, 600), mid800, (700, 700), 0.5),
        ((800, 600), mid800, (100, -100), 0.5),
        ((800, 600), mid800, (1000, 1100), 0.0),
        ((800, 600), mid800, (1300, 1500), 0.0),
        ((1000, 1000), (0, 0, 0, 0), (300, 400), exact),
        ((1000, 1000), (0, 0, 0, 0), (0, 0), 1.0),
        ((1000, 1000), (500, 500, 500, 500), (800, 900), exact),
        ((1000, 1000), (400, 400, 600, 600), (200, 100), exact),
        ((1000, 1000), (400, 400, 600, 600), (500, 500), 1.0),
        ((3000, 4000), mid3000, (1800, 2400), 0.9),
        ((3000, 4000), mid3000, (3000, 4000), 0.5),
        ((3000, 4000), mid3000, (-1500, -2000), 0.0),
        ((3000, 4000), mid3000, (1500, 2000), 1.0),
        ((3000, 4000), mid3000, (1200, 1600), 0.9),
    ]


def test_criterion_2_metric_fidelity():
    from owmm_bench.agent import HighLevelAction

    fixture = _grounding_fixture()
    errs = []
    for size, box, point, want in fixture:
        c = SingleStepCase("c", "pick", size, point, (), HighLevelAction("pick", bbox_norm=box))
        errs.append(abs(score_grounding(c) - want))
    c = SingleStepCase("c", "pick", (1000, 1000), (300, 400), (), HighLevelAction("pick", bbox_norm=(0, 0, 0, 0)))
    headline = score_grounding(c)
    # the quoted 0.64645 is rounded to five places; the exact value is 0.6464466...
    ok = len(fixture) == 20 and max(errs) <= 1e-6 and abs(headline - 0.64645) <= 5e-6
    record(2, ok, f"cases={len(fixture)} max_err={max(errs):.2e} headline={headline:.7f}")
    assert ok


def test_criterion_3_threshold_machinery():
    lenient, strict = goal_threshold_from_diagonals([0.789, 1.655, 2.504, 2.931])
    flat = goal_threshold_from_diagonals([1.7] * 6)
    ok = abs(lenient - 1.96975) <= 1e-9 and abs(strict - 0.984875) <= 1e-9 and flat == (1.7, 0.85)
    record(3, ok, f"mean={lenient:.9f} half={strict:.9f} flat={flat}")
    assert ok


def test_criterion_4_noise_ladder():
    runs, _ = oracle_batch(10, 10)
    sigmas = (0, 10, 25, 50, 100)
    means, n_steps = [], []
    for sigma in sigmas:
        policy = NoisyOraclePolicy(sigma, 0.0, seed=0)
        vals = [score_grounding(c) for sc, _, _, tr in runs[:60] for c in cases_from_trace(tr, sc, policy)
                if c.gt_point is not None]
        means.append(float(np.mean(vals)))
        n_steps.append(len(vals))
    wrong = [c for sc, _, _, tr in runs[:20] for c in cases_from_trace(tr, sc, NoisyOraclePolicy(0, 1.0, seed=0))]
    acc = score_decision(wrong)
    decreasing = all(a > b for a, b in zip(means, means[1:]))
    ok = decreasing and min(n_steps) >= 200 and acc == 0.0
    record(4, ok, "grounding " + " ".join(f"s{s}={m:.4f}" for s, m in zip(sigmas, means))
           + f" steps/level={min(n_steps)} p1_decision={acc}")
    assert ok


def test_criterion_5_planner_and_projection():
    rng = np.random.default_rng(55)
    mismatches = pairs = 0
    for _ in range(200):
        occ = rng.random((32, 32)) < rng.uniform(0.1, 0.35)
        g = dijkstra_graph(occ)
        cells = list(g.nodes)
        sc = SceneSpec("grid", 0.25, occ, (), ())
        a = cells[int(rng.integers(len(cells)))]
        b = cells[int(rng.integers(len(cells)))]
        found = astar(sc, a, b)
        try:
            ref = nx.dijkstra_path_length(g, a, b)
        except nx.NetworkXNoPath:
            mismatches += found is not None
            continue
        pairs += 1
        mismatches += found is None or abs(found[1] - ref) > 1e-9
    worst = 0.0
    n_round = 0
    while n_round < 1000:
        cam = CameraPose((rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.2, 2)), rng.uniform(-math.pi, math.pi),
                         rng.uniform(-0.8, 0.8))
        half = math.tan(cam.hfov / 2)
        fwd = rng.uniform(0.3, 8)
        p = cam.camera_to_world((fwd, rng.uniform(-1, 1) * half * fwd, rng.uniform(-1, 1) * half * fwd))
        u, v, r = cam.project_point(p)
        if not cam.in_image(u, v):
            continue
        worst = max(worst, float(np.max(np.abs(unproject(cam, (u, v), r) - p))))
        n_round += 1
    ok = mismatches == 0 and worst < 1e-6
    record(5, ok, f"grids=200 connected_pairs={pairs} cost_mismatches={mismatches} "
                  f"roundtrips={n_round} max_err={worst:.2e}m")
    assert ok


def _reach_ok(rec, sc) -> bool:
    obs = rec["observation"]
    x, y = obs["pose"][0], obs["pose"][1]
    if rec["kind"] == "pick":
        ox, oy = obs["objects"][obs["task"]["object"]][:2]
        return math.hypot(ox - x, oy - y) <= 0.8
    goal = sc.receptacle(obs["task"]["goal_rec"])
    lo, hi = goal.box_min, goal.box_max
    dx = max(lo[0] - x, 0.0, x - hi[0])
    dy = max(lo[1] - y, 0.0, y - hi[1])
    return math.hypot(dx, dy) <= 0.8


def test_criterion_6_pipeline_soundness():
    scenes = {scene(s).scene_id: scene(s) for s in (0, 1)}
    records = []
    for k, sc in enumerate(scenes.values()):
        records += synthesize_scene(sc, 25, seed=1000 * k).records
    reparsed = sum(1 for r in records if parse_action(r["answer"]).args == r["action_information"])
    arm = [r for r in records if r["kind"] in ("pick", "place")]
    valid = 0
    for r in arm:
        sc = scenes[r["scene_id"]]
        ctx = context_from_record(r, sc)
        target = r["observation"]["task"]["object" if r["kind"] == "pick" else "goal_rec"]
        valid += ctx.ego.entity(target) is not None and _reach_ok(r, sc)
    chain = check_chain(sorted(records, key=lambda r: (r["episode_id"], r["source_step"], r["checkpoint"])))
    cfg = default_split(records, list(scenes), seed=0)
    train = {r["object_label"] for r in split_records(records, cfg, "train")}
    test = {r["object_label"] for r in split_records(records, cfg, "test")}
    ok = (records and reparsed == len(records) and arm and valid == len(arm) and not chain
          and not (train & test))
    record(6, bool(ok), f"records={len(records)} reparsed={reparsed} arm_valid={valid}/{len(arm)} "
                        f"chain_violations={len(chain)} label_overlap={len(train & test)}")
    assert ok


def test_criterion_7_dead_loop():
    loops = 0
    for i in range(50):
        _, _, _, tr = episode(i % 10, 500 + i, RepeatRetrievalPolicy())
        loops += tr.terminal == "dead_loop"
    runs, _ = oracle_batch(10, 10)
    oracle_loops = sum(tr.terminal == "dead_loop" for *_, tr in runs)
    ok = loops == 50 and oracle_loops == 0
    record(7, ok, f"repeat_retrieval={loops}/50 oracle={oracle_loops}/{len(runs)}")
    assert ok


def test_criterion_8_protocol_equivalence():
    # every payload fails once (HTTP 500), then stalls past the timeout, then answers
    cfg = MockConfig("echo-oracle", fail_first=1, delay_first=True, delay_s=0.5)
    same = 0
    with MockPolicyServer(cfg) as srv:
        policy = RemotePolicy(RemotePolicyConfig(srv.url, timeout=0.2, retries=2, include_ground_truth=True))
        for i in range(20):
            _, _, _, echo = episode(i % 10, i, policy)
            _, _, _, local = episode(i % 10, i)
            same += canonical.dumps(echo.rows()[-1]) == canonical.dumps(local.rows()[-1])
        failed, total = srv.n_failed, srv.n_requests
    ok = same == 20 and failed > 0
    record(8, ok, f"identical_terminals={same}/20 requests={total} injected_500s={failed}")
    assert ok


def _pipeline(root: Path) -> None:
    s, t, d, r = root / "scenes", root / "traces.jsonl", root / "data", root / "reports"
    steps = [
        ["gen-scenes", "--count", "2", "--out", str(s)],
        ["run-episodes", "--scenes", str(s), "--episodes-per-scene", "3", "--out", str(t)],
        ["synth-data", "--scenes", str(s), "--episodes-per-scene", "3", "--out", str(d)],
        ["predict", "--records", str(d / "train.jsonl"), "--scenes", str(s), "--policy", "noisy:25,0.1",
         "--out", str(root / "pred.jsonl")],
        ["eval-single", "--records", str(d / "train.jsonl"), "--predictions", str(root / "pred.jsonl"),
         "--out", str(r / "single")],
        ["eval-episodic", "--traces", str(t), "--scenes", str(s), "--single-step", "--out", str(r / "episodic")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv


def test_criterion_9_determinism(tmp_path):
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")

    def files(root):
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
                if p.is_file() and not p.name.endswith("runtime.json")}

    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    differ = sorted(str(k) for k in a if a[k] != b.get(k))
    ok = a.keys() == b.keys() and not differ and len(a) > 10
    record(9, ok, f"files={len(a)} differing={differ or 'none'}")
    assert ok


def _pivot_hits(targets) -> int:
    hits = 0
    for seed, (tu, tv) in enumerate(targets):
        res = pivot_sample(lambda p: -np.hypot(p[:, 0] - tu, p[:, 1] - tv), n_init=10, n_opt=6, iters=2, seed=seed)
        hits += math.hypot(res.point[0] - tu, res.point[1] - tv) <= 15
    return hits


def test_criterion_10_pivot():
    # the most favourable target sits on the initial sampling mean; the second set is spread over the image
    centred = _pivot_hits([(256.0, 256.0)] * 100)
    spread = _pivot_hits(np.random.default_rng(10).uniform(64, 448, size=(100, 2)))
    samples = np.concatenate([np.asarray(pivot_sample(lambda p: np.zeros(len(p)), iters=0, seed=s)
                                         .iterations[0]["samples"]) for s in range(1000)])
    mean_err = float(np.abs(samples.mean(axis=0) - 256).max())
    std = samples.std(axis=0)
    ok = min(centred, spread) >= 95 and mean_err <= 5
    record(10, ok, f"within_15px centred={centred}/100 spread={spread}/100 (needs 95) "
                   f"iter0_mean_err={mean_err:.2f}px iter0_std=({std[0]:.1f},{std[1]:.1f})")
    assert ok
