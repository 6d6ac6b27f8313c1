import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import build_clean_pair

from semloc import formats
from semloc.cli import LocalizeConfig, evaluate, localize, localize_dataset, main
from semloc.elements import DEFAULT_SCHEMA
from semloc.encoder import EncoderConfig, init_weights
from semloc.errors import ConfigError, DomainError, InsufficientElementsError
from semloc.geometry import Pose, rotation_exp

ENC = EncoderConfig(n_classes=4, dim=16, blocks=2, k=3)


class TestEvaluate:
    def test_exact_estimates_zero_summary(self):
        poses = [Pose([0.0, 0.0, 0.4], [1.0, 2.0, 3.0]) for _ in range(5)]
        s = evaluate(poses, poses)
        assert s.rte_mean == 0.0 and s.rre_mean == 0.0
        assert s.rte_q3 == 0.0 and s.rre_q3 == 0.0
        assert s.frac_rte_under_1m == 1.0

    def test_interpolated_median(self):
        gts = [Pose.identity() for _ in range(4)]
        ests = [Pose(np.zeros(3), [d, 0.0, 0.0]) for d in (1.0, 2.0, 3.0, 4.0)]
        s = evaluate(ests, gts)
        assert s.rte_q2 == pytest.approx(2.5)
        assert s.rte_q1 == pytest.approx(1.75)
        assert s.rte_q3 == pytest.approx(3.25)

    def test_threshold_fractions(self):
        gts = [Pose.identity() for _ in range(4)]
        ests = [Pose(np.zeros(3), [d, 0.0, 0.0]) for d in (0.1, 0.5, 1.5, 2.0)]
        s = evaluate(ests, gts)
        assert s.frac_rte_under_1m == pytest.approx(0.5)

    def test_rre_in_degrees(self):
        gts = [Pose.identity()]
        ests = [Pose([0.0, 0.0, math.radians(90)], np.zeros(3))]
        s = evaluate(ests, gts)
        assert s.rre_mean == pytest.approx(90.0)

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            evaluate([Pose.identity()], [])


class TestLocalize:
    def test_too_few_elements(self):
        pair = build_clean_pair(seed=60)
        w = init_weights(ENC, seed=0)
        with pytest.raises(InsufficientElementsError):
            localize(pair.elements2d[:3], pair.submap, w)

    def test_direct_path_on_class_unique_frame(self):
        # build a frame where every class appears at most once per side
        pair, kept2d, kept3d = None, None, None
        for seed in range(60, 160):
            cand = build_clean_pair(seed=seed)
            cls2 = [e.class_id for e in cand.elements2d]
            # pick one 2D element of each distinct class, need >= 4 classes
            if len(set(cls2)) < 4:
                continue
            pair = cand
            break
        assert pair is not None
        rows = []
        seen = set()
        for i, e in enumerate(pair.elements2d):
            if e.class_id not in seen and pair.gt_correspondence[i].sum() == 1:
                seen.add(e.class_id)
                rows.append(i)
        if len(rows) < 4:
            pytest.skip("no class-unique frame found in the seed range")
        cols = [int(np.nonzero(pair.gt_correspondence[i])[0][0]) for i in rows]
        elements2d = [pair.elements2d[i] for i in rows]
        from semloc.elements import SubMap

        submap = SubMap(
            tuple(pair.submap.elements[j] for j in cols), pair.submap.origin, pair.submap.radius
        )
        w = init_weights(ENC, seed=1)
        pose, diag = localize(elements2d, submap, w)
        assert diag["path"] == "direct"
        assert np.linalg.norm(pose.t - pair.gt_pose.t) < 1e-4

    def test_weighted_path_diagnostics(self):
        pair = build_clean_pair(seed=61)
        w = init_weights(ENC, seed=2)
        pose, diag = localize(pair.elements2d, pair.submap, w, LocalizeConfig(seed=3))
        assert diag["path"] == "weighted"
        assert "inlier_rate" in diag and "ransac_iterations" in diag

    def test_gps_crop_path(self):
        pair = build_clean_pair(seed=62)
        w = init_weights(ENC, seed=3)
        pose, diag = localize(
            pair.elements2d,
            list(pair.submap.elements),
            w,
            LocalizeConfig(seed=4),
            gps_prior=pair.submap.origin,
        )
        assert diag["n_3d"] > 0

    def test_refine_weights_validation(self):
        with pytest.raises(ConfigError):
            LocalizeConfig(refine_weights="bogus")


def run_cli(args, cwd):
    return subprocess.run(
        [sys.executable, "-m", "semloc.cli", *args],
        cwd=cwd,
        capture_output=True,
        text=True,
    )


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    r = run_cli(
        [
            "synth", "--out", "data.jsonl", "--frames", "4", "--seed", "5",
            "--pixel-sigma", "0.5", "--dropout-rate", "0.1",
        ],
        d,
    )
    assert r.returncode == 0, r.stderr
    r = run_cli(
        ["train", "--dataset", "data.jsonl", "--out", "w.bin", "--epochs", "0",
         "--dim", "16", "--blocks", "2", "--k", "3", "--seed", "1"],
        d,
    )
    assert r.returncode == 0, r.stderr
    return d


class TestSubcommands:
    def test_synth_deterministic(self, workdir):
        r = run_cli(
            ["synth", "--out", "data2.jsonl", "--frames", "4", "--seed", "5",
             "--pixel-sigma", "0.5", "--dropout-rate", "0.1"],
            workdir,
        )
        assert r.returncode == 0
        assert (workdir / "data.jsonl").read_bytes() == (workdir / "data2.jsonl").read_bytes()

    def test_localize_eval_plot_chain(self, workdir):
        r = run_cli(
            ["localize", "--dataset", "data.jsonl", "--weights", "w.bin", "--out", "poses.json"],
            workdir,
        )
        assert r.returncode == 0, r.stderr
        r = run_cli(
            ["eval", "--estimates", "poses.json", "--dataset", "data.jsonl", "--out", "summary.json"],
            workdir,
        )
        assert r.returncode == 0, r.stderr
        r = run_cli(["plot-data", "--summary", "summary.json", "--out", "hist.csv"], workdir)
        assert r.returncode == 0, r.stderr
        lines = (workdir / "hist.csv").read_text().splitlines()
        assert lines[0] == "metric,bin_left,bin_right,count,fraction"
        assert len(lines) > 2

    def test_localize_deterministic(self, workdir):
        for name in ("p1.json", "p2.json"):
            r = run_cli(
                ["localize", "--dataset", "data.jsonl", "--weights", "w.bin", "--out", name],
                workdir,
            )
            assert r.returncode == 0
        assert (workdir / "p1.json").read_bytes() == (workdir / "p2.json").read_bytes()

    def test_eval_on_ground_truth_is_zero(self, workdir):
        pairs, _ = formats.read_dataset(workdir / "data.jsonl")
        formats.write_poses(workdir / "gt.json", [p.gt_pose for p in pairs])
        r = run_cli(
            ["eval", "--estimates", "gt.json", "--dataset", "data.jsonl", "--out", "zero.json"],
            workdir,
        )
        assert r.returncode == 0
        obj = json.loads((workdir / "zero.json").read_text())
        assert obj["rte_m"]["mean"] == 0.0
        assert obj["rre_deg"]["q3"] == 0.0

    def test_map_build_round_trip(self, workdir, tmp_path):
        import numpy as np

        from semloc.elements import make_sign_3d
        from semloc.mapping import StereoObservation
        from semloc.synthetic import DEFAULT_INTRINSICS, camera_pose_from_yaw, project_point
        from semloc.elements import make_sign_2d

        cls = DEFAULT_SCHEMA.classes[1]
        elements = [make_sign_3d([x, 12.0, 3.0], cls) for x in (-3.0, 0.0, 3.0, 0.01)]
        left = camera_pose_from_yaw((0.0, 0.0, 1.6), math.pi / 2)
        right_center = left.camera_center + left.R.T @ np.array([0.5, 0.0, 0.0])
        right = Pose(left.r, -left.R @ right_center)
        obs = []
        for e in elements:
            l = make_sign_2d(project_point(left.transform(e.point), DEFAULT_INTRINSICS), cls, DEFAULT_INTRINSICS)
            r2 = make_sign_2d(project_point(right.transform(e.point), DEFAULT_INTRINSICS), cls, DEFAULT_INTRINSICS)
            obs.append(StereoObservation(l, r2, left, right))
        formats.write_stereo_observations(tmp_path / "obs.json", obs, DEFAULT_SCHEMA)
        r = run_cli(
            ["map-build", "--observations", str(tmp_path / "obs.json"), "--out", str(tmp_path / "map.json"),
             "--eps", "0.5", "--min-pts", "1"],
            tmp_path,
        )
        assert r.returncode == 0, r.stderr
        loaded, _ = formats.read_map(tmp_path / "map.json")
        # the two near-coincident signs merge
        assert len(loaded) == 3

    def test_exit_code_insufficient(self, workdir, tmp_path):
        pairs, schema = formats.read_dataset(workdir / "data.jsonl")
        formats.write_elements2d(tmp_path / "few.json", list(pairs[0].elements2d[:2]), schema)
        formats.write_map(tmp_path / "map.json", list(pairs[0].submap.elements), schema)
        r = run_cli(
            ["localize", "--elements", str(tmp_path / "few.json"), "--map", str(tmp_path / "map.json"),
             "--gps", "0", "0", "0", "--weights", str(workdir / "w.bin"), "--out", str(tmp_path / "p.json")],
            tmp_path,
        )
        assert r.returncode == 2

    def test_exit_code_config_error(self, tmp_path):
        r = run_cli(["localize", "--dataset", "missing.jsonl", "--weights", "nope.bin", "--out", "x.json"], tmp_path)
        assert r.returncode == 4

    def test_env_config_override(self, workdir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"top_k": 4, "refine_weights": "inlier_masked"}')
        env = dict(os.environ, SEMLOC_CONFIG=str(cfg))
        r = subprocess.run(
            [sys.executable, "-c",
             "from semloc.cli import _localize_config_from_args; import argparse; "
             "ns = argparse.Namespace(); print(_localize_config_from_args(ns).top_k, "
             "_localize_config_from_args(ns).refine_weights)"],
            capture_output=True, text=True, env=env,
        )
        assert r.stdout.strip() == "4 inlier_masked"
