"""Command-line entry point (``owmm``).

Exit codes: 0 success, 1 usage, 2 infrastructure (transport, I/O), 3 validation
(schema violations, split leakage).
"""

import argparse
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, canonical

EXIT_OK, EXIT_USAGE, EXIT_INFRA, EXIT_VALIDATION = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# Real defaults live here; argparse sees None so that a config file can fill
# anything the command line left out.
DEFAULTS = {}


def _opt(p, cmd, *flags, default=None, **kw):
    action = p.add_argument(*flags, default=None, **kw)
    DEFAULTS.setdefault(cmd, {})[action.dest] = default
    if default is not None and kw.get("action") not in ("store_true", "store_false"):
        action.help = f"{action.help} (default: {default})"
    return action


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _positive(name, v):
    if v is None or v < 1:
        raise UsageError(f"--{name} must be >= 1")


# --------------------------------------------------------------------------
# scenes


def _scene_files(d) -> list:
    files = sorted(Path(d).glob("scene-*.json"))
    if not files:
        raise UsageError(f"no scene-*.json files in {d}")
    return files


def _load_scenes(d) -> list:
    from .world import SceneSpec

    return [SceneSpec.from_dict(canonical.read_json(f)) for f in _scene_files(d)]


def cmd_gen_scenes(a) -> int:
    from .world import SceneParams, generate_scene

    _positive("count", a.count)
    params = SceneParams(nx=a.grid_size, ny=a.grid_size, cell_size=a.cell_size,
                         n_receptacles=a.n_receptacles, n_objects=a.n_objects)
    try:
        params.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in range(a.seed, a.seed + a.count):
        scene = generate_scene(s, params)
        canonical.write_json(out / f"{scene.scene_id}.json", scene.to_dict())
    print(f"wrote {a.count} scenes to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# episodes


class _Timed:
    def __init__(self, policy):
        self.policy = policy
        self.times = []

    def descriptor(self):
        from .agent import policy_descriptor

        return policy_descriptor(self.policy)

    def decide(self, ctx):
        t0 = time.perf_counter()
        try:
            return self.policy.decide(ctx)
        finally:
            self.times.append(time.perf_counter() - t0)


def _remote_kwargs(a) -> dict:
    return {"timeout": a.timeout, "retries": a.retries, "include_ground_truth": a.include_ground_truth,
            "payload_mode": a.payload_mode}


def _episode_job(job) -> dict:
    from .agent import PolicyError, run_episode
    from .policy import OracleStuck, make_policy
    from .sim import NoViewpoint, render_pose_graph
    from .world import NoValidPair, SceneSpec, spawn_task

    scene_dict, s, spec, max_T, remote = job
    scene = SceneSpec.from_dict(scene_dict)
    key = [scene.scene_id, s]
    policy = _Timed(make_policy(spec, seed=s, **remote))
    try:
        task = spawn_task(scene, s)
        frames = render_pose_graph(scene, task, s)
        trace = run_episode(policy, scene, task, frames, max_T=max_T, seed=s)
    except PolicyError as exc:
        return {"key": key, "error": exc.kind, "message": str(exc), "times": policy.times}
    except (NoValidPair, NoViewpoint, OracleStuck) as exc:
        return {"key": key, "skipped": type(exc).__name__, "message": str(exc), "times": policy.times}
    return {"key": key, "rows": trace.rows(), "times": policy.times}


def _run_jobs(fn, jobs, parallel: int) -> list:
    if parallel <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * parallel))))


def _runtime_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".runtime.json")


def cmd_run_episodes(a) -> int:
    from .evaluation import runtime_stats
    from .policy import make_policy

    _positive("episodes-per-scene", a.episodes_per_scene)
    _positive("parallel", a.parallel)
    _positive("max-T", a.max_T)
    try:
        make_policy(a.policy, seed=a.seed, **_remote_kwargs(a))
    except ValueError as exc:
        raise UsageError(str(exc))
    scenes = [canonical.read_json(f) for f in _scene_files(a.scenes)]
    jobs = [(sd, a.seed + i, a.policy, a.max_T, _remote_kwargs(a)) for sd in scenes for i in range(a.episodes_per_scene)]
    results = sorted(_run_jobs(_episode_job, jobs, a.parallel), key=lambda r: r["key"])
    rows, times, errors, skipped = [], [], [], []
    for r in results:
        times += r["times"]
        if "error" in r:
            errors.append(r)
            _log(f"{r['error']}: {r['key'][0]} episode seed {r['key'][1]}: {r['message']}")
        elif "skipped" in r:
            skipped.append(r)
            _log(f"skipped {r['key'][0]} seed {r['key'][1]}: {r['skipped']}")
        else:
            rows += r["rows"]
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    canonical.write_jsonl(a.out, rows)
    canonical.write_json(_runtime_path(a.out), runtime_stats(times))
    terms = {}
    for r in rows:
        if r["type"] == "terminal":
            terms[r["terminal"]] = terms.get(r["terminal"], 0) + 1
    done = sum(terms.values())
    print(f"episodes: {done} written, {len(skipped)} skipped, {len(errors)} infrastructure errors; "
          f"terminals: {canonical.dumps(terms)}")
    return EXIT_INFRA if errors else EXIT_OK


# --------------------------------------------------------------------------
# data synthesis


def _synth_job(job) -> dict:
    from .datagen import EpisodeFailed, build_qa_records, collect_episode, filter_key_steps, select_key_steps
    from .world import NoValidPair, SceneSpec, spawn_task

    scene_dict, s, interval, max_T = job
    scene = SceneSpec.from_dict(scene_dict)
    try:
        task = spawn_task(scene, s)
        trace = collect_episode(scene, task, s, max_T)
    except (EpisodeFailed, NoValidPair) as exc:
        return {"key": [scene.scene_id, s], "valid": False, "records": [], "skipped": [], "message": str(exc)}
    skipped = []
    steps = filter_key_steps(select_key_steps(trace, scene, interval), scene)
    records = build_qa_records(steps, skipped=skipped)
    return {"key": [scene.scene_id, s], "valid": True, "records": records, "skipped": skipped}


def cmd_synth_data(a) -> int:
    from .datagen import LeakageDetected, SplitConfig, default_split, export_jsonl, kind_counts, split_records

    _positive("episodes-per-scene", a.episodes_per_scene)
    _positive("waypoint-interval", a.waypoint_interval)
    _positive("parallel", a.parallel)
    scenes = [canonical.read_json(f) for f in _scene_files(a.scenes)]
    scene_ids = [s["scene_id"] for s in scenes]
    split_cfg = None
    if a.split_config:
        try:
            split_cfg = SplitConfig.from_dict(canonical.read_json(a.split_config))
        except LeakageDetected as exc:
            raise ValidationError(f"leakage-detected: {exc}")
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad split config: {exc}")
    jobs = [(sd, a.seed + i, a.waypoint_interval, a.max_T) for sd in scenes for i in range(a.episodes_per_scene)]
    results = sorted(_run_jobs(_synth_job, jobs, a.parallel), key=lambda r: r["key"])
    records = [rec for r in results for rec in r["records"]]
    n_valid = sum(r["valid"] for r in results)
    skipped = [s for r in results for s in r["skipped"]]
    if split_cfg is None:
        split_cfg = default_split(records, scene_ids, seed=a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"split_config": split_cfg.to_dict(), "waypoint_interval": a.waypoint_interval}
    try:
        for split in ("train", "test"):
            manifest[split] = export_jsonl(split_records(records, split_cfg, split), out / f"{split}.jsonl", split,
                                           split_cfg)
    except LeakageDetected as exc:
        raise ValidationError(f"leakage-detected: {exc}")
    manifest["split_sizes"] = {s: manifest[s]["n_records"] for s in ("train", "test")}
    manifest["kind_counts"] = kind_counts(records)
    manifest["n_records_before_split"] = len(records)
    manifest["yield"] = {"valid_episodes": n_valid, "total_episodes": len(results),
                         "rate": n_valid / len(results) if results else 0.0}
    manifest["template_holes"] = skipped
    canonical.write_json(out / "manifest.json", manifest)
    y = manifest["yield"]
    print(f"valid episodes: {y['valid_episodes']}/{y['total_episodes']}; records: {len(records)} "
          f"{canonical.dumps(manifest['kind_counts'])}; train {manifest['split_sizes']['train']}, "
          f"test {manifest['split_sizes']['test']}")
    return EXIT_OK


# --------------------------------------------------------------------------
# predictions and evaluation


def _read_records(path) -> list:
    from .evaluation import SchemaError, check_qa_record

    try:
        rows = canonical.read_jsonl(path)
        for r in rows:
            check_qa_record(r)
    except (ValueError, SchemaError) as exc:
        raise ValidationError(f"{path}: {exc}")
    return rows


def cmd_predict(a) -> int:
    from .agent import PolicyError
    from .datagen import context_from_record
    from .evaluation import runtime_stats
    from .policy import make_policy

    try:
        policy = _Timed(make_policy(a.policy, seed=a.seed, **_remote_kwargs(a)))
    except ValueError as exc:
        raise UsageError(str(exc))
    records = _read_records(a.records)
    scenes = {s.scene_id: s for s in _load_scenes(a.scenes)}
    out = []
    for r in records:
        if r["scene_id"] not in scenes:
            raise ValidationError(f"record {r['id']} refers to unknown scene {r['scene_id']}")
        try:
            raw = policy.decide(context_from_record(r, scenes[r["scene_id"]]))
        except PolicyError as exc:
            _log(f"{exc.kind}: {exc}")
            return EXIT_INFRA
        out.append({"id": r["id"], "raw_text": raw})
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    canonical.write_jsonl(a.out, out)
    canonical.write_json(_runtime_path(a.out), runtime_stats(policy.times))
    print(f"wrote {len(out)} predictions to {a.out}")
    return EXIT_OK


def _maybe_runtime(path):
    p = _runtime_path(path)
    return canonical.read_json(p) if p.exists() else None


def cmd_eval_single(a) -> int:
    from .evaluation import SchemaError, aggregate_report, cases_from_records, read_predictions, render_text, write_report

    records = _read_records(a.records)
    preds, malformed = read_predictions(a.predictions)
    try:
        cases = cases_from_records(records, preds)
    except (SchemaError, ValueError) as exc:
        raise ValidationError(str(exc))
    report = aggregate_report(cases, None, meta={"records": Path(a.records).name,
                                                 "predictions": Path(a.predictions).name,
                                                 "malformed_prediction_lines": malformed})
    runtime = _maybe_runtime(a.predictions)
    write_report(report, a.out, runtime, figures=not a.no_figures)
    print(render_text(report, runtime), end="")
    return EXIT_OK


def cmd_eval_episodic(a) -> int:
    from .agent import group_trace_rows
    from .evaluation import (
        EmptyAfterFilter,
        EpisodicThresholds,
        aggregate_report,
        cases_from_trace,
        compute_goal_threshold,
        eval_episode,
        render_text,
        write_report,
    )

    mode = "strict" if a.strict else "lenient"
    scenes = {s.scene_id: s for s in _load_scenes(a.scenes)}
    try:
        traces = group_trace_rows(canonical.read_jsonl(a.traces))
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"{a.traces}: {exc}")
    th = EpisodicThresholds()
    meta = {"traces": Path(a.traces).name, "mode": mode}
    if a.goal_threshold_from_scenes:
        try:
            lenient, strict = compute_goal_threshold(list(scenes.values()))
        except EmptyAfterFilter as exc:
            raise ValidationError(str(exc))
        th = EpisodicThresholds(goal_strict=strict, goal_lenient=lenient)
        meta["goal_thresholds"] = [strict, lenient]
    flags, cases = [], []
    for tr in traces:
        if tr.scene_id not in scenes:
            raise ValidationError(f"trace {tr.episode_id} refers to unknown scene {tr.scene_id}")
        flags.append(eval_episode(tr, scenes[tr.scene_id], th, mode))
        if a.single_step:
            cases += cases_from_trace(tr, scenes[tr.scene_id])
    report = aggregate_report(cases if a.single_step else None, flags, mode, meta)
    report["episodes"] = flags
    runtime = _maybe_runtime(a.traces)
    write_report(report, a.out, runtime, figures=not a.no_figures)
    print(render_text(report, runtime), end="")
    return EXIT_OK


def cmd_mock_policy(a) -> int:
    from .mock_server import MockConfig, MockPolicyServer, fixed_search_text

    fixed = a.fixed_action
    if fixed is None and a.fixed_search is not None:
        fixed = fixed_search_text(a.fixed_search)
    try:
        cfg = MockConfig(mode=a.mode, fixed_text=fixed, fail_rate=a.fail_rate, fail_first=a.fail_first,
                         delay_first=a.delay_first, delay_s=a.delay_s, seed=a.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    srv = MockPolicyServer(cfg, a.host, a.port)
    print(f"mock policy ({a.mode}) listening on {srv.url}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.httpd.server_close()
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _remote_opts(p, cmd):
    _opt(p, cmd, "--timeout", type=float, default=60.0, help="remote policy request timeout in seconds")
    _opt(p, cmd, "--retries", type=int, default=2, help="remote policy retries after a transport error")
    _opt(p, cmd, "--include-ground-truth", action="store_true", default=False,
         help="send simulator ground truth to the remote policy (needed by the mock echo-oracle)")
    _opt(p, cmd, "--payload-mode", default="structured", choices=["structured", "structured+raster"],
         help="remote request body: entity lists only, or with a coarse depth raster")


def build_parser() -> argparse.ArgumentParser:
    DEFAULTS.clear()
    parser = _Parser(prog="owmm", description="Open-world mobile manipulation benchmark kit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="JSON config; flags override it, it overrides defaults")
        _opt(p, name, "--seed", type=int, default=0, help="base seed (the OWMM_SEED environment variable wins)")
        return p

    p = command("gen-scenes", cmd_gen_scenes, "Generate procedural scenes as canonical JSON files.")
    _opt(p, "gen-scenes", "--count", type=int, default=1, help="number of scenes (seeds seed..seed+count-1)")
    _opt(p, "gen-scenes", "--out", default="scenes", help="output directory")
    _opt(p, "gen-scenes", "--grid-size", type=int, default=32, help="grid cells per side")
    _opt(p, "gen-scenes", "--cell-size", type=float, default=0.25, help="cell size in meters")
    _opt(p, "gen-scenes", "--n-receptacles", type=int, default=4, help="receptacles per scene")
    _opt(p, "gen-scenes", "--n-objects", type=int, default=3, help="objects per scene")

    p = command("run-episodes", cmd_run_episodes, "Run agent episodes and write trace JSONL.")
    _opt(p, "run-episodes", "--scenes", default="scenes", help="directory of scene files")
    _opt(p, "run-episodes", "--episodes-per-scene", type=int, default=10, help="episodes per scene")
    _opt(p, "run-episodes", "--policy", default="oracle",
         help="oracle | noisy:SIGMA,P | remote:URL | pivot | repeat-search[:K] | repeat-retrieval | invalid-json")
    _opt(p, "run-episodes", "--max-T", dest="max_T", type=int, default=20, help="high-level step budget")
    _opt(p, "run-episodes", "--out", default="traces.jsonl", help="trace JSONL path")
    _opt(p, "run-episodes", "--parallel", type=int, default=1, help="worker processes")
    _remote_opts(p, "run-episodes")

    p = command("synth-data", cmd_synth_data, "Synthesize QA records from oracle episodes.")
    _opt(p, "synth-data", "--scenes", default="scenes", help="directory of scene files")
    _opt(p, "synth-data", "--episodes-per-scene", type=int, default=400, help="oracle episodes per scene")
    _opt(p, "synth-data", "--waypoint-interval", type=int, default=5, help="checkpoints between nav key steps")
    _opt(p, "synth-data", "--max-T", dest="max_T", type=int, default=20, help="high-level step budget")
    _opt(p, "synth-data", "--split-config", help="JSON with train_scenes, test_scenes, test_objects")
    _opt(p, "synth-data", "--out", default="data", help="output directory")
    _opt(p, "synth-data", "--parallel", type=int, default=1, help="worker processes")

    p = command("predict", cmd_predict, "Run a policy on QA records and write prediction JSONL.")
    _opt(p, "predict", "--records", required=False, help="QA record JSONL")
    _opt(p, "predict", "--scenes", default="scenes", help="directory of scene files")
    _opt(p, "predict", "--policy", default="oracle", help="policy spec, as for run-episodes")
    _opt(p, "predict", "--out", default="predictions.jsonl", help="prediction JSONL path")
    _remote_opts(p, "predict")

    p = command("eval-single", cmd_eval_single, "Score single-step predictions against QA records.")
    _opt(p, "eval-single", "--records", help="QA record JSONL")
    _opt(p, "eval-single", "--predictions", help="prediction JSONL")
    _opt(p, "eval-single", "--out", default="report-single", help="report directory")
    _opt(p, "eval-single", "--no-figures", action="store_true", default=False, help="skip PNG figures")

    p = command("eval-episodic", cmd_eval_episodic, "Score stored episode traces.")
    _opt(p, "eval-episodic", "--traces", help="trace JSONL")
    _opt(p, "eval-episodic", "--scenes", default="scenes", help="directory of scene files")
    g = p.add_mutually_exclusive_group()
    _opt(g, "eval-episodic", "--strict", action="store_true", default=False, help="strict distance thresholds")
    _opt(g, "eval-episodic", "--lenient", action="store_true", default=False, help="lenient thresholds (default)")
    _opt(p, "eval-episodic", "--goal-threshold-from-scenes", action="store_true", default=False,
         help="derive goal thresholds from receptacle diagonals of the given scenes")
    _opt(p, "eval-episodic", "--single-step", action="store_true", default=False,
         help="also score every logged decision against the oracle")
    _opt(p, "eval-episodic", "--out", default="report-episodic", help="report directory")
    _opt(p, "eval-episodic", "--no-figures", action="store_true", default=False, help="skip PNG figures")

    p = command("mock-policy", cmd_mock_policy, "Serve canned policy replies over HTTP for tests.")
    _opt(p, "mock-policy", "--host", default="127.0.0.1", help="bind address")
    _opt(p, "mock-policy", "--port", type=int, default=8765, help="port (0 picks a free one)")
    _opt(p, "mock-policy", "--mode", default="echo-oracle", choices=["echo-oracle", "fixed-action", "fail-rate"],
         help="reply behaviour")
    _opt(p, "mock-policy", "--fixed-action", help="raw reply text for fixed-action mode")
    _opt(p, "mock-policy", "--fixed-search", type=int, help="fixed-action shortcut: always search this frame")
    _opt(p, "mock-policy", "--fail-rate", type=float, default=0.0, help="probability of HTTP 500 in fail-rate mode")
    _opt(p, "mock-policy", "--fail-first", type=int, default=0, help="fail the first N requests of every payload")
    _opt(p, "mock-policy", "--delay-first", action="store_true", default=False,
         help="stall the first answered request of every payload")
    _opt(p, "mock-policy", "--delay-s", type=float, default=0.0, help="stall length in seconds")
    return parser


REQUIRED = {
    "predict": ("records",),
    "eval-single": ("records", "predictions"),
    "eval-episodic": ("traces",),
}


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from the config file, then from defaults; apply OWMM_SEED."""
    cfg = {}
    if args.config:
        try:
            data = canonical.read_json(args.config)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in data.items() if not isinstance(v, dict)}
        section = data.get(args.command, {})
        cfg.update({k.replace("-", "_"): v for k, v in section.items()})
    defaults = DEFAULTS[args.command]
    unknown = set(cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
    for dest, default in defaults.items():
        if getattr(args, dest, None) is None:
            setattr(args, dest, cfg.get(dest, default))
    env = os.environ.get("OWMM_SEED")
    if env is not None:
        try:
            args.seed = int(env)
        except ValueError:
            raise UsageError(f"OWMM_SEED must be an integer, got {env!r}")
    for dest in REQUIRED.get(args.command, ()):
        if getattr(args, dest) is None:
            raise UsageError(f"{args.command}: --{dest.replace('_', '-')} is required")
    return args


def main(argv=None) -> int:
    try:
        args = resolve(build_parser().parse_args(argv))
        return args.func(args)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return EXIT_USAGE
    except ValidationError as exc:
        _log(f"validation error: {exc}")
        return EXIT_VALIDATION
    except OSError as exc:
        _log(f"i/o error: {exc}")
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
