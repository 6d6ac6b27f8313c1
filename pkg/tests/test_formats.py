import json

import numpy as np
import pytest
import torch

from conftest import build_clean_pair

from semloc import formats
from semloc.elements import DEFAULT_SCHEMA
from semloc.encoder import EncoderConfig, init_weights
from semloc.errors import ConfigError, DomainError
from semloc.geometry import Pose


class TestCanonicalJson:
    def test_round_trip_exact_floats(self):
        values = [0.1, 1.0 / 3.0, 1e-17, 123456.789, -2.5e300]
        text = formats.canonical_json(values)
        assert json.loads(text) == values

    def test_deterministic(self):
        obj = {"a": [1, 2.5], "b": {"c": True, "d": None}}
        assert formats.canonical_json(obj) == formats.canonical_json(obj)

    def test_rejects_nan(self):
        with pytest.raises(DomainError):
            formats.canonical_json([float("nan")])

    def test_int_keys_stringified(self):
        text = formats.canonical_json({1: "x"})
        assert json.loads(text) == {"1": "x"}


class TestDatasetRoundTrip:
    def test_scene_pair_round_trip(self, tmp_path):
        pair = build_clean_pair(seed=50)
        path = tmp_path / "data.jsonl"
        formats.write_dataset(path, [pair], DEFAULT_SCHEMA)
        loaded, schema = formats.read_dataset(path)
        assert schema.n_classes == 4
        again = loaded[0]
        assert np.array_equal(again.gt_correspondence, pair.gt_correspondence)
        assert np.array_equal(again.gt_pose.r, pair.gt_pose.r)
        assert np.array_equal(again.gt_pose.t, pair.gt_pose.t)
        for a, b in zip(again.elements2d, pair.elements2d):
            assert np.array_equal(a.bearing.vec, b.bearing.vec)
            assert np.array_equal(a.direction, b.direction)
            assert np.array_equal(a.semantic, b.semantic)
        assert np.array_equal(again.submap.points(), pair.submap.points())

    def test_byte_identical_rewrite(self, tmp_path):
        pair = build_clean_pair(seed=51)
        p1 = tmp_path / "a.jsonl"
        p2 = tmp_path / "b.jsonl"
        formats.write_dataset(p1, [pair], DEFAULT_SCHEMA)
        loaded, schema = formats.read_dataset(p1)
        formats.write_dataset(p2, loaded, schema)
        assert p1.read_bytes() == p2.read_bytes()

    def test_newer_version_rejected(self, tmp_path):
        path = tmp_path / "x.jsonl"
        path.write_text('{"version": 99, "kind": "scene-pairs", "classes": []}\n')
        with pytest.raises(ConfigError):
            formats.read_dataset(path)


class TestWeightsCheckpoint:
    def test_round_trip(self, tmp_path):
        w = init_weights(EncoderConfig(n_classes=4, dim=8, blocks=2, k=3), seed=9)
        path = tmp_path / "w.bin"
        formats.write_weights(path, w)
        loaded = formats.read_weights(path)
        assert loaded.config == w.config
        for k, v in w.tensors.items():
            assert torch.equal(loaded.tensors[k], v)

    def test_byte_identical(self, tmp_path):
        w = init_weights(EncoderConfig(n_classes=4, dim=8, blocks=2, k=3), seed=11)
        a = tmp_path / "a.bin"
        b = tmp_path / "b.bin"
        formats.write_weights(a, w)
        formats.write_weights(b, w)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ConfigError):
            formats.read_weights(path)


class TestPoseFiles:
    def test_round_trip(self, tmp_path):
        poses = [Pose([0.1, -0.2, 0.3], [1.0, 2.0, -3.0]), Pose.identity()]
        path = tmp_path / "p.json"
        formats.write_poses(path, poses)
        loaded = formats.read_poses(path)
        for a, b in zip(loaded, poses):
            assert np.array_equal(a.r, b.r)
            assert np.array_equal(a.t, b.t)
