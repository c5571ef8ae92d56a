"""Shared builders for the test suite.

Expensive batches are cached per process so that several test modules can
reuse one oracle run.
"""

import math
import time
from functools import lru_cache

import numpy as np

from owmm_bench.agent import run_episode
from owmm_bench.policy import OraclePolicy
from owmm_bench.sim import render_pose_graph
from owmm_bench.world import Receptacle, SceneSpec, generate_scene, spawn_task


@lru_cache(maxsize=None)
def scene(seed: int) -> SceneSpec:
    return generate_scene(seed)


def episode(scene_seed: int, seed: int, policy=None, max_T: int = 20, **kw):
    sc = scene(scene_seed)
    task = spawn_task(sc, seed)
    frames = render_pose_graph(sc, task, seed)
    trace = run_episode(policy or OraclePolicy(), sc, task, frames, max_T=max_T, seed=seed, **kw)
    return sc, task, frames, trace


@lru_cache(maxsize=None)
def oracle_batch(n_scenes: int = 10, per_scene: int = 10) -> tuple:
    """(runs, elapsed seconds) for an oracle run over n_scenes x per_scene episodes."""
    t0 = time.perf_counter()
    runs = [episode(s, i) for s in range(n_scenes) for i in range(per_scene)]
    return tuple(runs), time.perf_counter() - t0


def open_room(n: int = 20, cell: float = 0.25, receptacles=(), objects=(), scene_id: str = "room") -> SceneSpec:
    """A walled-free n x n room; receptacle cells are blocked."""
    occ = np.zeros((n, n), dtype=bool)
    for r in receptacles:
        lo, hi = r.box_min, r.box_max
        for ix in range(n):
            for iy in range(n):
                cx, cy = (ix + 0.5) * cell, (iy + 0.5) * cell
                if lo[0] <= cx <= hi[0] and lo[1] <= cy <= hi[1]:
                    occ[ix, iy] = True
    return SceneSpec(scene_id, cell, occ, tuple(receptacles), tuple(objects))


def table(rec_id: str = "r0", center=(2.5, 2.5), size=(1.0, 1.0), height=0.75, label: str = "table") -> Receptacle:
    return Receptacle(rec_id, label, tuple(center), tuple(size), height)


def dist(a, b) -> float:
    return math.dist(tuple(a), tuple(b))
