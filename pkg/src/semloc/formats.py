"""Versioned file formats: canonical JSON, JSONL datasets, weight checkpoints.

Determinism contract: identical in-memory values serialize to byte-identical
files. JSON emission is hand-rolled with fixed float formatting (17
significant digits, exact round-trip) and construction-ordered keys; the
checkpoint format is a little-endian raw tensor dump behind a JSON header.
No file carries timestamps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .elements import ClassSchema, Element2D, Element3D, SemanticClass, SubMap
from .encoder import EncoderConfig, EncoderWeights
from .errors import ConfigError, DomainError
from .geometry import Bearing, Pose
from .synthetic import ScenePair

FORMAT_VERSION = 1
_MAGIC = b"SLWT"


def _fmt_float(x: float) -> str:
    if x != x or x in (float("inf"), float("-inf")):
        raise DomainError("cannot serialize non-finite floats")
    return format(float(x), ".17g")


def canonical_json(obj) -> str:
    """Deterministic JSON with %.17g floats and insertion-ordered keys."""
    out: list[str] = []

    def emit(o):
        if isinstance(o, dict):
            out.append("{")
            for k, (key, val) in enumerate(o.items()):
                if k:
                    out.append(",")
                out.append(json.dumps(str(key)))
                out.append(":")
                emit(val)
            out.append("}")
        elif isinstance(o, (list, tuple, np.ndarray)):
            o = o.tolist() if isinstance(o, np.ndarray) else o
            out.append("[")
            for k, val in enumerate(o):
                if k:
                    out.append(",")
                emit(val)
            out.append("]")
        elif isinstance(o, bool) or isinstance(o, np.bool_):
            out.append("true" if o else "false")
        elif isinstance(o, (int, np.integer)):
            out.append(str(int(o)))
        elif isinstance(o, (float, np.floating)):
            out.append(_fmt_float(float(o)))
        elif isinstance(o, str):
            out.append(json.dumps(o))
        elif o is None:
            out.append("null")
        else:
            raise DomainError(f"cannot serialize {type(o)!r}")

    emit(obj)
    return "".join(out)


def check_version(obj, kind: str) -> None:
    v = obj.get("version")
    if not isinstance(v, int):
        raise ConfigError(f"{kind} file has no integer version field")
    if v > FORMAT_VERSION:
        raise ConfigError(f"{kind} file version {v} is newer than supported {FORMAT_VERSION}")


# ---------------------------------------------------------------------------
# Elements, maps, poses
# ---------------------------------------------------------------------------


def schema_to_obj(schema: ClassSchema) -> list:
    return [{"id": c.id, "name": c.name, "line_like": c.line_like} for c in schema.classes]


def schema_from_obj(obj) -> ClassSchema:
    return ClassSchema(tuple(SemanticClass(c["id"], c["name"], bool(c["line_like"])) for c in obj))


def element2d_to_obj(e: Element2D) -> dict:
    return {
        "bearing": [e.bearing.x, e.bearing.y, e.bearing.z],
        "direction": e.direction,
        "class": e.class_id,
    }


def element2d_from_obj(obj, schema: ClassSchema) -> Element2D:
    return Element2D(
        Bearing(*[float(v) for v in obj["bearing"]]),
        np.asarray(obj["direction"], dtype=float),
        schema.one_hot(int(obj["class"])),
    )


def element3d_to_obj(e: Element3D) -> dict:
    return {"point": e.point, "direction": e.direction, "class": e.class_id}


def element3d_from_obj(obj, schema: ClassSchema) -> Element3D:
    return Element3D(
        np.asarray(obj["point"], dtype=float),
        np.asarray(obj["direction"], dtype=float),
        schema.one_hot(int(obj["class"])),
    )


def pose_to_obj(p: Pose) -> dict:
    return {"r": p.r, "t": p.t}


def pose_from_obj(obj) -> Pose:
    return Pose(np.asarray(obj["r"], dtype=float), np.asarray(obj["t"], dtype=float))


def submap_to_obj(sm: SubMap) -> dict:
    return {
        "origin": sm.origin,
        "radius": sm.radius,
        "elements": [element3d_to_obj(e) for e in sm.elements],
    }


def submap_from_obj(obj, schema: ClassSchema) -> SubMap:
    return SubMap(
        tuple(element3d_from_obj(e, schema) for e in obj["elements"]),
        np.asarray(obj["origin"], dtype=float),
        float(obj["radius"]),
    )


def write_map(path, elements, schema: ClassSchema) -> None:
    obj = {
        "version": FORMAT_VERSION,
        "kind": "element-map",
        "frame": "map",
        "units": "meters",
        "classes": schema_to_obj(schema),
        "elements": [element3d_to_obj(e) for e in elements],
    }
    with open(path, "w") as fh:
        fh.write(canonical_json(obj) + "\n")


def read_map(path):
    with open(path) as fh:
        obj = json.load(fh)
    check_version(obj, "map")
    schema = schema_from_obj(obj["classes"])
    return [element3d_from_obj(e, schema) for e in obj["elements"]], schema


def write_elements2d(path, elements, schema: ClassSchema) -> None:
    obj = {
        "version": FORMAT_VERSION,
        "kind": "elements2d",
        "frame": "camera",
        "classes": schema_to_obj(schema),
        "elements": [element2d_to_obj(e) for e in elements],
    }
    with open(path, "w") as fh:
        fh.write(canonical_json(obj) + "\n")


def read_elements2d(path):
    with open(path) as fh:
        obj = json.load(fh)
    check_version(obj, "elements2d")
    schema = schema_from_obj(obj["classes"])
    return [element2d_from_obj(e, schema) for e in obj["elements"]], schema


def write_poses(path, poses, diagnostics=None) -> None:
    obj = {
        "version": FORMAT_VERSION,
        "kind": "poses",
        "frame": "map-to-camera",
        "units": {"r": "radians-axis", "t": "meters"},
        "poses": [pose_to_obj(p) for p in poses],
    }
    if diagnostics is not None:
        obj["diagnostics"] = diagnostics
    with open(path, "w") as fh:
        fh.write(canonical_json(obj) + "\n")


def read_poses(path):
    with open(path) as fh:
        obj = json.load(fh)
    check_version(obj, "poses")
    return [pose_from_obj(p) for p in obj["poses"]]


# ---------------------------------------------------------------------------
# ScenePair datasets (JSON lines)
# ---------------------------------------------------------------------------


def scene_pair_to_obj(pair: ScenePair) -> dict:
    ones = np.argwhere(pair.gt_correspondence == 1)
    return {
        "elements2d": [element2d_to_obj(e) for e in pair.elements2d],
        "submap": submap_to_obj(pair.submap),
        "gt_pose": pose_to_obj(pair.gt_pose),
        "gt_correspondence": {
            "shape": list(pair.gt_correspondence.shape),
            "ones": ones,
        },
        "valid": pair.valid,
    }


def scene_pair_from_obj(obj, schema: ClassSchema) -> ScenePair:
    shape = tuple(obj["gt_correspondence"]["shape"])
    C = np.zeros(shape, dtype=np.int8)
    for i, j in obj["gt_correspondence"]["ones"]:
        C[int(i), int(j)] = 1
    return ScenePair(
        tuple(element2d_from_obj(e, schema) for e in obj["elements2d"]),
        submap_from_obj(obj["submap"], schema),
        pose_from_obj(obj["gt_pose"]),
        C,
        bool(obj["valid"]),
    )


def write_dataset(path, pairs, schema: ClassSchema) -> None:
    header = {"version": FORMAT_VERSION, "kind": "scene-pairs", "classes": schema_to_obj(schema)}
    with open(path, "w") as fh:
        fh.write(canonical_json(header) + "\n")
        for pair in pairs:
            fh.write(canonical_json(scene_pair_to_obj(pair)) + "\n")


def read_dataset(path):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ConfigError("dataset file is empty")
    header = json.loads(lines[0])
    check_version(header, "dataset")
    schema = schema_from_obj(header["classes"])
    return [scene_pair_from_obj(json.loads(ln), schema) for ln in lines[1:]], schema


# ---------------------------------------------------------------------------
# Stereo observations
# ---------------------------------------------------------------------------


def read_stereo_observations(path):
    from .mapping import StereoObservation

    with open(path) as fh:
        obj = json.load(fh)
    check_version(obj, "stereo-observations")
    schema = schema_from_obj(obj["classes"])
    out = []
    for rec in obj["observations"]:
        out.append(
            StereoObservation(
                element2d_from_obj(rec["left"], schema),
                element2d_from_obj(rec["right"], schema),
                pose_from_obj(rec["left_pose"]),
                pose_from_obj(rec["right_pose"]),
            )
        )
    return out, schema


def write_stereo_observations(path, observations, schema: ClassSchema) -> None:
    obj = {
        "version": FORMAT_VERSION,
        "kind": "stereo-observations",
        "classes": schema_to_obj(schema),
        "observations": [
            {
                "left": element2d_to_obj(o.left),
                "right": element2d_to_obj(o.right),
                "left_pose": pose_to_obj(o.left_pose),
                "right_pose": pose_to_obj(o.right_pose),
            }
            for o in observations
        ],
    }
    with open(path, "w") as fh:
        fh.write(canonical_json(obj) + "\n")


# ---------------------------------------------------------------------------
# Weight checkpoints (versioned binary with shape header)
# ---------------------------------------------------------------------------


def write_weights(path, weights: EncoderWeights) -> None:
    names = list(weights.tensors)
    header = {
        "version": FORMAT_VERSION,
        "config": {
            "n_classes": weights.config.n_classes,
            "dim": weights.config.dim,
            "blocks": weights.config.blocks,
            "k": weights.config.k,
            "graph_mode": weights.config.graph_mode,
        },
        "tensors": [{"name": n, "shape": list(weights.tensors[n].shape)} for n in names],
        "dtype": "float64-le",
    }
    header_bytes = canonical_json(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for n in names:
            arr = weights.tensors[n].detach().numpy().astype("<f8")
            fh.write(arr.tobytes(order="C"))


def read_weights(path) -> EncoderWeights:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ConfigError("not a weight checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version > FORMAT_VERSION:
            raise ConfigError(f"checkpoint version {version} newer than supported {FORMAT_VERSION}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        cfg = EncoderConfig(**header["config"])
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arr = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            tensors[spec["name"]] = torch.tensor(arr)
    return EncoderWeights(cfg, tensors)


# ---------------------------------------------------------------------------
# CSV outputs
# ---------------------------------------------------------------------------


def write_history_csv(path, history) -> None:
    cols = [
        "epoch",
        "gamma_p",
        "mean_lc",
        "mean_lp",
        "mean_total",
        "pose_solver_calls",
        "gn_fallbacks",
        "degenerate_skips",
    ]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for e in history:
            row = [
                str(e.epoch),
                _fmt_float(e.gamma_p),
                _fmt_float(e.mean_lc),
                _fmt_float(e.mean_lp),
                _fmt_float(e.mean_total),
                str(e.pose_solver_calls),
                str(e.gn_fallbacks),
                str(e.degenerate_skips),
            ]
            fh.write(",".join(row) + "\n")


def write_histogram_csv(path, summary) -> None:
    with open(path, "w") as fh:
        fh.write("metric,bin_left,bin_right,count,fraction\n")
        for metric, edges, counts in (
            ("rte_m", summary.rte_bin_edges, summary.rte_hist),
            ("rre_deg", summary.rre_bin_edges, summary.rre_hist),
        ):
            total = max(1, int(np.sum(counts)))
            for k in range(len(counts)):
                fh.write(
                    ",".join(
                        [
                            metric,
                            _fmt_float(float(edges[k])),
                            _fmt_float(float(edges[k + 1])),
                            str(int(counts[k])),
                            _fmt_float(float(counts[k]) / total),
                        ]
                    )
                    + "\n"
                )
