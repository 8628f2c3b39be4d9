"""Synthetic worlds, the camera stub and the episode runner."""
import json
import math

import jsonschema
import numpy as np
import pytest

from travnav import load_schema
from travnav.errors import ValidationError
from travnav.oracle import Camera, project_regions
from travnav.planner import PoseSE2
from travnav.sim import (CANONICAL, SimConfig, config_from_dict, ground_truth_grid, load_world, render_classes,
                         render_view, run_episode, run_suite)
from travnav.sim.episode import config_to_dict, summary_table

from schema_check import validate_doc
from travnav.sim.render import OFF_WORLD, SKY
from travnav.sim.world import rasterize, validate_start, world_from_dict

BASE = {
    "name": "tiny",
    "extents": [4.0, 2.0],
    "resolution": 0.1,
    "classes": [
        {"name": "flat", "m": 0.9, "sigma": 0.05, "color": [170, 170, 160]},
        {"name": "water", "m": 0.0, "sigma": 0.0, "color": [40, 70, 170]},
    ],
    "base": "flat",
    "shapes": [{"type": "rect", "class": "water", "xmin": 2.0, "xmax": 2.5, "ymin": 0.0, "ymax": 2.0}],
    "start": [0.5, 1.0, 0.0],
    "goal": [3.5, 1.0],
}


def records(result):
    with open(result.trace) as f:
        return [json.loads(line) for line in f]


class TestWorlds:
    @pytest.mark.parametrize("name", CANONICAL)
    def test_canonical_worlds_load_and_validate(self, name):
        w = load_world(name)
        assert w.name == name and w.grid.shape == w.shape
        validate_start(w, SimConfig().planner.validity_threshold)
        assert w.contains(*w.goal)

    def test_world_files_match_schema(self):
        from importlib import resources
        schema = load_schema("world")
        for name in CANONICAL:
            doc = json.loads(resources.files("travnav.sim").joinpath("worlds", f"{name}.json").read_text())
            jsonschema.validate(doc, schema)

    def test_rasterize_last_shape_wins(self):
        g = rasterize((1.0, 1.0), 0.1, 0, [
            {"type": "rect", "class": 1, "xmin": 0, "xmax": 0.5, "ymin": 0, "ymax": 1},
            {"type": "disc", "class": 2, "cx": 0.5, "cy": 0.5, "r": 0.2},
        ])
        assert g[5, 2] == 1 and g[5, 5] == 2 and g[5, 8] == 0 and g[0, 0] == 1

    def test_from_dict_and_lookup(self):
        w = world_from_dict(BASE)
        assert w.shape == (20, 40)
        assert w.class_at(2.2, 1.0) == 1 and w.class_at(1.0, 1.0) == 0
        assert w.class_at(-1.0, 1.0) == -1

    @pytest.mark.parametrize("patch", [
        {"classes": [{"name": "x", "m": 1.2, "sigma": 0.1, "color": [0, 0, 0]}]},
        {"classes": [{"name": "x", "m": 0.5, "sigma": -0.1, "color": [0, 0, 0]}]},
        {"start": [9.0, 1.0]},
        {"goal": [1.0, 5.0]},
        {"grid": [[0, 0], [0, 0]]},
        {"time_limit": 0},
        {"shapes": [{"type": "hexagon", "class": 0}]},
    ])
    def test_invalid_worlds(self, patch):
        d = dict(BASE, **patch)
        if "classes" in patch:
            d["base"] = 0
            d["shapes"] = []
        with pytest.raises(ValidationError):
            world_from_dict(d)

    def test_start_on_impassable_ground_rejected(self):
        w = world_from_dict(dict(BASE, start=[2.2, 1.0, 0.0]))
        with pytest.raises(ValidationError):
            validate_start(w, 0.25)
        with pytest.raises(ValidationError):
            run_episode(w, SimConfig(), 0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_world(tmp_path / "nope.json")

    def test_ground_truth_grid(self):
        w = world_from_dict(BASE)
        g = ground_truth_grid(w)
        flat = 0.9 - 0.05 * math.exp(-0.5 * 1.2815515655446004 ** 2) / math.sqrt(2 * math.pi) / 0.1
        assert g.cvar[10, 5] == pytest.approx(flat, rel=1e-9) and g.cvar[10, 22] == 0.0


class TestRender:
    def test_uniform_field_is_near_uniform(self):
        w = world_from_dict(dict(BASE, extents=[40.0, 40.0], shapes=[], start=[20, 20, 0], goal=[30, 20]))
        img = render_view(w, PoseSE2(20, 20, 0.3), Camera(), np.random.default_rng(0), noise=3.0)
        cls = render_classes(w, PoseSE2(20, 20, 0.3), Camera())
        ground = cls == 0
        assert ground.mean() > 0.9 and not (cls == OFF_WORLD).any()
        assert np.abs(img[ground].astype(float) - [170, 170, 160]).mean() < 4.0

    def test_obstacle_band_is_contiguous(self):
        w = world_from_dict(BASE)
        cls = render_classes(w, PoseSE2(0.5, 1.0, 0.0), Camera())
        band = cls == 1
        assert band.any()
        rows = np.flatnonzero(band.any(axis=1))
        assert np.array_equal(rows, np.arange(rows.min(), rows.max() + 1))
        # the band sits between near flat ground and far flat ground on the centre column
        col = cls[:, 64]
        assert col[-1] == 0 and (col == 1).any() and 0 in col[:rows.min()]

    def test_outside_pose_rejected(self):
        with pytest.raises(ValueError):
            render_view(world_from_dict(BASE), PoseSE2(10, 10), Camera())

    def test_render_is_deterministic(self):
        w = load_world("forest")
        a = render_view(w, PoseSE2(3, 6, 0.2), Camera(), np.random.default_rng(5))
        b = render_view(w, PoseSE2(3, 6, 0.2), Camera(), np.random.default_rng(5))
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("name,pose", [("corridor", (6.0, 3.5, 0.2)), ("forest", (4.0, 6.0, -0.4)),
                                           ("island_goal", (6.5, 4.0, 0.0))])
    def test_projection_consistency(self, name, pose):
        w = load_world(name)
        cam = Camera()
        p = PoseSE2(*pose)
        cls = render_classes(w, p, cam)
        per_pixel = np.arange(1, cam.width * cam.height + 1).reshape(cam.height, cam.width)
        vox = project_regions(per_pixel, cam, p, resolution=w.resolution, mode="rays")
        agree = total = 0
        for pid, keys in vox.items():
            r, c = divmod(pid - 1, cam.width)
            if cls[r, c] < 0:
                continue
            (k,) = keys
            total += 1
            agree += w.class_at((k.ix + 0.5) * w.resolution, (k.iy + 0.5) * w.resolution) == cls[r, c]
        assert total > 5000 and agree / total >= 0.99


class TestConfig:
    def test_round_trip(self):
        cfg = SimConfig()
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_nested_override(self):
        cfg = config_from_dict({"mppi": {"samples": 64}, "loop": {"goal_radius": 0.7}, "level": 0.05})
        assert cfg.mppi.samples == 64 and cfg.mppi.w1 == SimConfig().mppi.w1
        assert cfg.loop.goal_radius == 0.7 and cfg.level == 0.05

    @pytest.mark.parametrize("bad", [{"nonsense": 1}, {"mppi": {"nonsense": 1}}, {"loop": {"control_dt": 0}},
                                     {"planner": {"w1": -1}}])
    def test_invalid(self, bad):
        with pytest.raises(ValidationError):
            config_from_dict(bad)


@pytest.fixture(scope="module")
def corridor_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("corridor")
    w = load_world("corridor")
    return [run_episode(w, SimConfig(), s, out) for s in (0, 1)]


class TestEpisode:
    def test_records_schema_and_accounting(self, corridor_runs):
        schema = load_schema("trace_record")
        for res in corridor_runs:
            recs = records(res)
            for rec in recs[:: max(1, len(recs) // 50)]:
                jsonschema.validate(rec, schema)
            assert res.queries == sum(any("query" in e for e in r["events"]) for r in recs)
            assert res.fused == sum(any("fuse" in e and e["fuse"]["samples"] > 0 for e in r["events"])
                                    for r in recs)
            assert res.elapsed == pytest.approx(recs[-1]["t"])
            jsonschema.validate(res.to_dict(), load_schema("episode_result"))

    def test_success_iff_within_goal_radius(self, corridor_runs):
        w = load_world("corridor")
        for res in corridor_runs:
            x, y, _ = records(res)[-1]["pose"]
            within = math.hypot(x - w.goal[0], y - w.goal[1]) <= SimConfig().loop.goal_radius
            assert res.success == within and res.success == (res.reason == "goal")

    def test_latency_respected(self, corridor_runs):
        for res in corridor_runs:
            fuses = [e["fuse"] for r in records(res) for e in r["events"] if "fuse" in e]
            times = {r["tick"]: r["t"] for r in records(res)}
            assert fuses
            for r in records(res):
                for e in r["events"]:
                    if "fuse" in e:
                        f = e["fuse"]
                        assert r["t"] >= f["t_query"] + f["latency"] - 1e-9
                        assert f["latency"] > 0

    def test_safety_margin(self, corridor_runs):
        thr = SimConfig().planner.validity_threshold
        for res in corridor_runs:
            assert res.success
            assert min(r["gt"] for r in records(res)) >= thr - 0.1
            assert res.min_traversability >= thr - 0.1

    def test_rerun_is_byte_identical(self, corridor_runs, tmp_path):
        res = run_episode(load_world("corridor"), SimConfig(), 0, tmp_path)
        assert res.trace_sha256 == corridor_runs[0].trace_sha256
        assert open(res.trace, "rb").read() == open(corridor_runs[0].trace, "rb").read()

    def test_different_seed_differs(self, corridor_runs):
        assert corridor_runs[0].trace_sha256 != corridor_runs[1].trace_sha256

    @pytest.mark.slow
    def test_open_field_near_straight_line(self):
        w = load_world("open_field")
        straight = math.hypot(w.goal[0] - w.start.x, w.goal[1] - w.start.y)
        for seed in range(10):
            res = run_episode(w, SimConfig(), seed)
            assert res.success, (seed, res.reason)
            assert abs(res.path_length - straight) <= 0.15 * straight


class TestSuite:
    def test_accounting_and_determinism(self, tmp_path):
        cfg = config_from_dict({"loop": {"time_limit": 2.0}})
        worlds = [load_world("open_field")]
        a = run_suite(worlds, list(range(10)), cfg, tmp_path / "a")
        b = run_suite(worlds, list(range(10)), cfg, tmp_path / "b")
        d = a["worlds"]["open_field"]
        assert d["runs"] == 10 and d["successes"] + d["timeout"] + d["stalled"] == 10
        assert len(a["episodes"]) == 10
        strip = lambda s: [{k: v for k, v in e.items() if k != "trace"} for e in s["episodes"]]
        assert strip(a) == strip(b) and a["worlds"] == b["worlds"]
        doc = json.loads((tmp_path / "a" / "summary.json").read_text())
        validate_doc(doc, "suite_summary")
        assert (tmp_path / "a" / "summary.txt").read_text() == summary_table(a)
        assert len(list((tmp_path / "a").glob("*.jsonl"))) == 10
