import json
import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owmm_bench import canonical
from owmm_bench.templates import TemplateBank
from owmm_bench.world import (
    NoValidPair,
    ObjectInstance,
    Receptacle,
    SceneParams,
    SceneSpec,
    TaskInstance,
    free_components,
    generate_scene,
    place_point,
    receptacle_diagonal,
    spawn_task,
)

from helpers import open_room, scene, table


def flood_fill_graph(occ: np.ndarray) -> nx.Graph:
    """4-connected free-cell graph, built independently of the package."""
    g = nx.Graph()
    nxc, nyc = occ.shape
    for ix in range(nxc):
        for iy in range(nyc):
            if occ[ix, iy]:
                continue
            g.add_node((ix, iy))
            for dx, dy in ((1, 0), (0, 1)):
                jx, jy = ix + dx, iy + dy
                if jx < nxc and jy < nyc and not occ[jx, jy]:
                    g.add_edge((ix, iy), (jx, jy))
    return g


def test_generation_is_deterministic():
    assert canonical.dumps(generate_scene(1).to_dict()) == canonical.dumps(generate_scene(1).to_dict())


def test_parameter_echo():
    sc = generate_scene(1, SceneParams(n_receptacles=2, n_objects=1))
    assert len(sc.receptacles) == 2 and len(sc.objects) == 1


def test_scene_roundtrip_through_json():
    sc = scene(3)
    again = SceneSpec.from_dict(json.loads(sc.to_json()))
    assert canonical.dumps(again.to_dict()) == canonical.dumps(sc.to_dict())


@pytest.mark.parametrize("seed", [7, 11, 12])
def test_every_receptacle_has_reachable_standoff_cells(seed):
    sc = scene(seed) if seed < 10 else generate_scene(seed)
    g = flood_fill_graph(sc.occupancy)
    comps = list(nx.connected_components(g))
    assert len(comps) == 1, "free space must be one component"
    free = comps[0]
    for r in sc.receptacles:
        near = [c for c in free if r.horizontal_distance(*sc.cell_center(*c)) <= 0.6]
        assert near, f"{r.rec_id} has no navigable cell within standoff"


def test_free_components_agrees_with_networkx():
    rng = np.random.default_rng(5)
    for _ in range(20):
        occ = rng.random((12, 9)) < 0.35
        labels = free_components(occ)
        comps = list(nx.connected_components(flood_fill_graph(occ)))
        assert labels.max() + 1 == len(comps)
        for comp in comps:
            assert len({labels[c] for c in comp}) == 1


@pytest.mark.parametrize("seed", range(6))
def test_placement_and_footprint_invariants(seed):
    sc = scene(seed)
    recs = {r.rec_id: r for r in sc.receptacles}
    for r in sc.receptacles:
        lo, hi = r.box_min, r.box_max
        assert lo[0] >= 0 and lo[1] >= 0
        assert hi[0] <= sc.shape[0] * sc.cell_size and hi[1] <= sc.shape[1] * sc.cell_size
        # every cell whose center falls inside the footprint is blocked
        for ix in range(sc.shape[0]):
            for iy in range(sc.shape[1]):
                cx, cy = sc.cell_center(ix, iy)
                if r.contains_xy(cx, cy, inset=1e-9):
                    assert sc.occupancy[ix, iy]
    for o in sc.objects:
        r = recs[o.resting_on]
        assert r.contains_xy(o.position[0], o.position[1])
        assert o.position[2] == r.height
    for r in sc.receptacles:
        assert place_point(sc, r) is not None


def test_unit_cube_diagonal():
    assert receptacle_diagonal(Receptacle("r", "cube", (0, 0), (1, 1), 1)) == pytest.approx(1.7320508, abs=1e-7)


def test_console_diagonal():
    # A 1.0 x 0.9 box whose height is solved for the 1.655 m console diagonal.
    h = math.sqrt(1.655**2 - 1.0**2 - 0.9**2)
    r = Receptacle("r", "console", (0, 0), (1.0, 0.9), h)
    assert receptacle_diagonal(r) == pytest.approx(1.655, abs=1e-12)


def test_zero_height_rejected():
    with pytest.raises(ValueError):
        Receptacle("r", "flat", (0, 0), (3, 4), 0)


def test_nonpositive_radius_rejected():
    with pytest.raises(ValueError):
        ObjectInstance("o", "ball", (0, 0, 0), 0.0, "floor")


def test_instruction_from_table_labels():
    dining = table("r0", (1.5, 1.5), label="7-piece dining set with grey chairs")
    kitchen = table("r1", (3.5, 3.5), label="Low kitchen element, Natural element")
    block = ObjectInstance("o0", "wood block", (1.5, 1.5, 0.75), 0.04, "r0")
    sc = open_room(receptacles=[dining, kitchen], objects=[block])
    task = spawn_task(sc, 0)
    assert task.instruction == (
        "Move wood block from the 7-piece dining set with grey chairs to the Low kitchen element, Natural element."
    )
    assert (task.object, task.start_rec, task.goal_rec) == ("o0", "r0", "r1")


def test_single_receptacle_has_no_pair():
    only = table("r0")
    sc = open_room(receptacles=[only], objects=[ObjectInstance("o0", "cup", (2.5, 2.5, 0.75), 0.04, "r0")])
    with pytest.raises(NoValidPair):
        spawn_task(sc, 0)


def test_spawn_task_deterministic_and_valid():
    sc = scene(0)
    a, b = spawn_task(sc, 3), spawn_task(sc, 3)
    assert a == b
    assert a.start_rec != a.goal_rec
    assert sc.object(a.object).resting_on == a.start_rec


def test_task_roundtrip():
    t = spawn_task(scene(0), 1)
    assert TaskInstance.from_dict(t.to_dict()) == t


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        generate_scene(0, SceneParams(n_receptacles=1))
    with pytest.raises(ValueError):
        generate_scene(0, SceneParams(nx=8, ny=8))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_generated_scenes_satisfy_invariants(seed):
    sc = generate_scene(seed)
    g = flood_fill_graph(sc.occupancy)
    assert nx.number_connected_components(g) == 1
    recs = {r.rec_id: r for r in sc.receptacles}
    for o in sc.objects:
        r = recs[o.resting_on]
        assert r.contains_xy(*o.position[:2]) and o.position[2] == r.height
    for r in sc.receptacles:
        assert math.isfinite(r.diagonal) and r.diagonal > 0
    task = spawn_task(sc, seed)
    assert task.instruction == TemplateBank.default().instruction(**task.entities(sc))
