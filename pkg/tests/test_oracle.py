"""Prompt and reply contract, mock oracle statistics and ground projection."""
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from travnav.errors import LengthError, ParseError, ValidationError
from travnav.mapping import VoxelKey
from travnav.oracle import (Camera, LatencyModel, MockOracle, OracleQuery, OracleReply, RobotDescription,
                            TerrainField, build_prompt, mock_query, parse_reply, project_regions,
                            query_with_retry)
from travnav.planner import PoseSE2


def field_of(m, sigma, shape=(10, 10)):
    return TerrainField(np.zeros(shape, np.int64), 0.1, (0.0, 0.0), np.array([m]), np.array([sigma]))


class TestPrompt:
    def test_contents(self):
        robot = RobotDescription(references=(("gravel", 0.6), ("deep mud", 0.15)))
        text = build_prompt(robot, 3)
        for piece in ("3", "gravel", "deep mud", "0.6", "0.15", "0.4 m", "0.6 m", robot.locomotion):
            assert piece in text
        assert "list of 3 numbers in [0, 1]" in text and "nothing else" in text

    def test_deterministic(self):
        assert build_prompt(RobotDescription(), 7) == build_prompt(RobotDescription(), 7)

    def test_singular(self):
        text = build_prompt(RobotDescription(), 1)
        assert "list of 1 number" in text and "regions" not in text.split("Reply")[1]

    def test_bad_count(self):
        with pytest.raises(ValidationError):
            build_prompt(RobotDescription(), 0)

    @pytest.mark.parametrize("refs", [(("only", 0.5),), (("a", 0.5), ("b", 1.5))])
    def test_bad_robot(self, refs):
        with pytest.raises(ValidationError):
            RobotDescription(references=refs)


class TestParse:
    def test_direct(self):
        assert parse_reply("Here are the values: [0.9, 0.1, 0.5]", 3) == [0.9, 0.1, 0.5]

    def test_clamp_with_diagnostics(self):
        diag = {}
        assert parse_reply("[1.4, -0.2]", 2, diag) == [1.0, 0.0]
        assert diag["clamped"] == [0, 1]

    def test_first_list_wins(self):
        assert parse_reply("Sure! Region values... [0.3, 0.3] ... also [9, 9]", 2) == [0.3, 0.3]

    def test_skips_non_numeric_brackets(self):
        assert parse_reply("[region a] then [0.2,0.4]", 2) == [0.2, 0.4]

    @pytest.mark.parametrize("text", ["", "no list", "[ ]", "[a, b]", None])
    def test_parse_error(self, text):
        with pytest.raises(ParseError):
            parse_reply(text, 2)

    def test_length_error(self):
        with pytest.raises(LengthError):
            parse_reply("[0.1, 0.2, 0.3]", 2)

    fmt_st = st.sampled_from(["{:g}", "{:.3f}", "{:.6e}", "{!r}", "{:.0f}", "{:.1%}"])

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=100), fmt_st,
           st.sampled_from([",", ", ", " , ", ",\n"]), st.text(alphabet="abc .:\n!", max_size=30),
           st.booleans())
    def test_contract_reply_always_parses(self, values, fmt, sep, prefix, trailing_comma):
        if fmt == "{:.1%}":
            fmt = "{:.4f}"  # percent signs are outside the contract; keep format variety otherwise
        body = sep.join(fmt.format(v) for v in values) + ("," if trailing_comma else "")
        text = f"{prefix}[{body}] done"
        got = parse_reply(text, len(values))
        assert len(got) == len(values)
        expect = [float(fmt.format(v)) for v in values]
        assert got == pytest.approx(expect, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
    def test_clamped_values_in_range(self, values):
        got = parse_reply("[" + ", ".join(repr(v) for v in values) + "]", len(values))
        assert all(0.0 <= v <= 1.0 for v in got)


class TestRetry:
    def query(self, n=2):
        return OracleQuery(np.zeros((4, 4, 3), np.uint8), n, "p")

    def test_second_attempt_succeeds(self):
        calls = []

        def flaky(q, regions):
            calls.append(1)
            if len(calls) == 1:
                err = ParseError("garbled")
                err.latency = 1.25
                raise err
            return OracleReply((0.5, 0.6), 2.0)

        reply, spent, attempts = query_with_retry(flaky, self.query(), {})
        assert reply.values == (0.5, 0.6) and attempts == 2 and spent == pytest.approx(3.25)

    def test_dropped_after_two_failures(self, caplog):
        def bad(q, regions):
            raise LengthError("short")

        with caplog.at_level(logging.WARNING, logger="travnav.oracle"):
            reply, _, attempts = query_with_retry(bad, self.query(), {})
        assert reply is None and attempts == 2
        assert "dropping observation batch" in caplog.text


class TestMock:
    def test_degenerate_gaussian(self):
        reply = mock_query(field_of(0.8, 0.0), {1: [VoxelKey(2, 2)]}, np.random.default_rng(0),
                           LatencyModel(zero=True))
        assert reply.values == (0.8,) and reply.latency == 0.0

    def test_seeded_replies_identical(self):
        regions = {1: [VoxelKey(1, 1)], 2: [VoxelKey(3, 4), VoxelKey(5, 5)]}
        a = mock_query(field_of(0.5, 0.2), regions, np.random.default_rng(9))
        b = mock_query(field_of(0.5, 0.2), regions, np.random.default_rng(9))
        assert a == b

    def test_law_of_large_numbers(self):
        n = 100_000
        regions = {i: [VoxelKey(4, 4)] for i in range(1, n + 1)}
        reply = mock_query(field_of(0.5, 0.1), regions, np.random.default_rng(1), LatencyModel(zero=True))
        x = np.array(reply.values)
        assert abs(x.mean() - 0.5) < 3 * 0.1 / math.sqrt(n)
        # sample variance standard error for a Gaussian: sigma^2 sqrt(2 / (n - 1))
        assert abs(x.var(ddof=1) - 0.01) < 3 * 0.01 * math.sqrt(2 / (n - 1))

    def test_area_weighted_statistics(self):
        classes = np.zeros((10, 10), np.int64)
        classes[:, 5:] = 1
        tf = TerrainField(classes, 0.1, (0.0, 0.0), np.array([0.9, 0.3]), np.array([0.0, 0.0]))
        keys = [VoxelKey(1, 1), VoxelKey(2, 1), VoxelKey(3, 1), VoxelKey(7, 1)]
        reply = mock_query(tf, {1: keys}, np.random.default_rng(0), LatencyModel(zero=True))
        assert reply.values[0] == pytest.approx((3 * 0.9 + 0.3) / 4)

    def test_no_coverage_flagged(self):
        reply = mock_query(field_of(0.8, 0.1), {1: [VoxelKey(50, 50)], 2: [VoxelKey(1, 1)]},
                           np.random.default_rng(0), prior_mean=0.5)
        assert reply.values[0] == 0.5 and reply.flags == {1: "no-coverage"}

    def test_missing_region_id_flagged(self):
        reply = mock_query(field_of(0.8, 0.0), {2: [VoxelKey(1, 1)]}, np.random.default_rng(0), n_regions=2)
        assert reply.values == (0.5, 0.8) and 1 in reply.flags

    def test_mock_backend_contract(self):
        backend = MockOracle(field_of(0.7, 0.0), seed=3, latency=LatencyModel(zero=True))
        reply = backend(OracleQuery(np.zeros((2, 2, 3), np.uint8), 2, ""), {1: [VoxelKey(0, 0)]})
        assert len(reply.values) == 2

    def test_latency_shape(self):
        rng = np.random.default_rng(0)
        draws = np.array([LatencyModel().draw(rng) for _ in range(100_000)])
        frac = np.mean((draws >= 1.0) & (draws <= 2.5))
        assert 0.75 <= frac <= 0.85
        assert draws.max() <= 5.0 and draws.max() > 3.5
        assert LatencyModel(zero=True).draw(rng) == 0.0


class TestProjection:
    def test_bottom_centre_pixel_analytic(self):
        # odd width so the centre column ray lies in the vertical plane of the heading
        cam = Camera(width=129, height=96, offset=0.0)
        pose = PoseSE2(2.0, 3.0, 0.0)
        labels = np.ones((96, 129), np.int64)
        labels[95, 64] = 2
        v = 95.5 - 48.0
        depression = math.radians(45.0) + math.atan(v / cam.focal)
        ahead = 1.5 / math.tan(depression)
        xy, hit, _ = cam.ground_hits(pose, np.array([95]), np.array([64]))
        assert hit[0] and xy[0] == pytest.approx([2.0 + ahead, 3.0], abs=1e-12)
        vox = project_regions(labels, cam, pose, resolution=0.1)[2]
        assert vox == [VoxelKey(math.floor((2.0 + ahead) / 0.1), 30, 0)]

    def test_heading_rotates_the_hit(self):
        cam = Camera(width=129, height=96, offset=0.0)
        xy0, _, _ = cam.ground_hits(PoseSE2(0, 0, 0.0), np.array([95]), np.array([64]))
        xy1, _, _ = cam.ground_hits(PoseSE2(0, 0, math.pi / 2), np.array([95]), np.array([64]))
        assert xy1[0] == pytest.approx([0.0, xy0[0, 0]], abs=1e-12)

    def test_horizon_rows_produce_no_voxels(self):
        cam = Camera(pitch_deg=20.0)
        # rows whose lower pixel edge still looks above a 10.5 m ground hit
        edge = np.arange(cam.height + 1) - cam.height / 2
        depression = np.radians(20.0) + np.arctan(edge / cam.focal)
        far_rows = int(np.sum(depression[1:] < math.atan(1.5 / 10.5)))
        assert far_rows > 10
        labels = np.ones((cam.height, cam.width), np.int64)
        labels[:far_rows] = 2
        for mode in ("rays", "cells"):
            out = project_regions(labels, cam, PoseSE2(0, 0, 0), mode=mode)
            assert 2 not in out and out[1]

    def test_default_camera_top_row_beyond_range(self):
        labels = np.ones((96, 128), np.int64)
        labels[0] = 2
        assert 2 not in project_regions(labels, Camera(), PoseSE2(0, 0, 0), mode="rays")

    def test_rays_above_horizon_dropped(self):
        cam = Camera(pitch_deg=10.0)
        _, hit, _ = cam.ground_hits(PoseSE2(0, 0, 0))
        assert not hit[0].any() and hit[-1].all()

    def test_adjacent_pixels_deduplicated(self):
        cam = Camera()
        labels = np.ones((96, 128), np.int64)
        labels[90:96, 60:68] = 2
        vox = project_regions(labels, cam, PoseSE2(0, 0, 0), resolution=0.5)[2]
        assert len(vox) == len(set(vox)) and len(vox) < 48
        assert vox == sorted(vox)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-math.pi, math.pi),
           st.floats(0.5, 15.0), st.floats(0.05, 0.5), st.sampled_from(["rays", "cells"]))
    def test_range_bound(self, x, y, psi, max_range, res, mode):
        cam = Camera(width=32, height=24, max_range=max_range)
        pose = PoseSE2(x, y, psi)
        labels = np.arange(32 * 24).reshape(24, 32) % 5 + 1
        c = cam.position(pose)
        for keys in project_regions(labels, cam, pose, resolution=res, mode=mode).values():
            for k in keys:
                cx, cy = (k.ix + 0.5) * res, (k.iy + 0.5) * res
                assert math.hypot(cx - c[0], cy - c[1]) <= max_range + 1e-9

    def test_cells_mode_projects_back_into_region(self):
        cam = Camera()
        pose = PoseSE2(1.0, 2.0, 0.3)
        labels = np.ones((96, 128), np.int64)
        labels[:, 64:] = 2
        out = project_regions(labels, cam, pose, mode="cells")
        for rid, keys in out.items():
            pts = np.array([[(k.ix + 0.5) * 0.1, (k.iy + 0.5) * 0.1, 0.0] for k in keys])
            row, col, front = cam.project(pose, pts)
            assert front.all()
            assert np.all(labels[row.astype(int), col.astype(int)] == rid)

    def test_label_shape_checked(self):
        with pytest.raises(ValidationError):
            project_regions(np.ones((10, 10)), Camera(), PoseSE2(0, 0))

    def test_unknown_mode(self):
        with pytest.raises(ValidationError):
            project_regions(np.ones((96, 128)), Camera(), PoseSE2(0, 0), mode="depth")

    def test_project_inverts_rays(self):
        cam = Camera()
        pose = PoseSE2(-1.0, 0.5, 1.1)
        rows, cols = np.mgrid[40:96:7, 0:128:9]
        xy, hit, _ = cam.ground_hits(pose, rows, cols)
        pts = np.concatenate([xy[hit], np.zeros((hit.sum(), 1))], axis=1)
        r, c, front = cam.project(pose, pts)
        assert front.all()
        assert r == pytest.approx(rows[hit] + 0.5, abs=1e-9)
        assert c == pytest.approx(cols[hit] + 0.5, abs=1e-9)
