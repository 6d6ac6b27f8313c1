"""Seeded synthetic scenes, camera views, noise and augmentation.

Desk-scale stand-in for a real survey: generates sparse pole/sign worlds,
projects them through a pinhole camera into standardized 2D elements with
configurable pixel noise, dropout, spurious detections and map clutter, and
records the ground-truth correspondence matrix for every rendered view.

All randomness flows from explicit seeds; equal seeds give bit-identical
output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .elements import (
    DEFAULT_SCHEMA,
    ClassSchema,
    Element2D,
    Element3D,
    SubMap,
    crop_submap,
    make_pole_2d,
    make_pole_3d,
    make_sign_2d,
    make_sign_3d,
)
from .errors import DomainError
from .geometry import CameraIntrinsics, Pose, rotation_log

# Survey-camera default: wide horizontal FOV (~88 deg) with fine angular
# resolution, so one pixel of detector noise (~1/fx rad) stays well inside
# the 0.003 rad inlier threshold used downstream.
DEFAULT_INTRINSICS = CameraIntrinsics(fx=718.0, fy=718.0, cx=691.0, cy=256.0, width=1382, height=512)


@dataclass(frozen=True)
class SceneConfig:
    """Element counts and spatial extent of a generated world."""

    n_poles: int = 10
    n_signs: int = 14
    area_extent: float = 40.0
    height_range: tuple[float, float] = (2.0, 5.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_poles < 0 or self.n_signs < 0:
            raise DomainError("element counts must be non-negative")
        if self.area_extent <= 0:
            raise DomainError("area extent must be positive")
        if not (0 < self.height_range[0] <= self.height_range[1]):
            raise DomainError("height range must be positive and ordered")


@dataclass(frozen=True)
class NoiseConfig:
    """Detector/map imperfection model applied while rendering a view."""

    pixel_sigma: float = 0.0
    dropout_rate: float = 0.0
    outlier_rate_2d: float = 0.0
    clutter_rate_3d: float = 0.0

    def __post_init__(self):
        for name in ("dropout_rate", "outlier_rate_2d", "clutter_rate_3d"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must be in [0, 1]")
        if self.pixel_sigma < 0:
            raise DomainError("pixel sigma must be non-negative")


@dataclass(frozen=True)
class ScenePair:
    """One training/evaluation record: observations, submap, ground truth.

    ``gt_correspondence`` is the 0/1 matrix C with C[i, j] = 1 when 2D element
    i observes submap element j; rows of injected outliers and columns of
    clutter or dropped elements are all-zero.
    """

    elements2d: tuple[Element2D, ...]
    submap: SubMap
    gt_pose: Pose
    gt_correspondence: np.ndarray
    valid: bool

    def __post_init__(self):
        C = np.asarray(self.gt_correspondence, dtype=np.int8)
        if C.shape != (len(self.elements2d), len(self.submap.elements)):
            raise DomainError("correspondence matrix shape must be (#2d, #3d)")
        if C.size and (C.sum(axis=1).max(initial=0) > 1 or C.sum(axis=0).max(initial=0) > 1):
            raise DomainError("correspondence matrix must have at most one 1 per row and column")
        C.setflags(write=False)
        object.__setattr__(self, "gt_correspondence", C)
        object.__setattr__(self, "elements2d", tuple(self.elements2d))


def generate_scene(cfg: SceneConfig, schema: ClassSchema = DEFAULT_SCHEMA) -> list[Element3D]:
    """Deterministically generate a sparse pole/sign world around the origin.

    Poles are vertical with direction (0, 0, -1) (peak toward bottom, map z
    up); sign midpoints sit at heights drawn from the configured range; all
    x-y positions are uniform over the square extent.
    """
    rng = np.random.default_rng(cfg.seed)
    half = cfg.area_extent / 2.0
    lo, hi = cfg.height_range
    sign_classes = [c for c in schema.classes if not c.line_like]
    out: list[Element3D] = []
    for _ in range(cfg.n_poles):
        xy = rng.uniform(-half, half, size=2)
        h = rng.uniform(lo, hi)
        out.append(make_pole_3d((xy[0], xy[1], h), schema=schema))
    for _ in range(cfg.n_signs):
        xy = rng.uniform(-half, half, size=2)
        h = rng.uniform(lo, hi)
        cls = sign_classes[int(rng.integers(len(sign_classes)))]
        out.append(make_sign_3d((xy[0], xy[1], h), cls, schema=schema))
    return out


def project_point(q_cam: np.ndarray, K: CameraIntrinsics) -> tuple[float, float]:
    """Project a camera-frame point to pixels; caller checks q_cam[2] > 0."""
    return (
        K.fx * q_cam[0] / q_cam[2] + K.cx,
        K.fy * q_cam[1] / q_cam[2] + K.cy,
    )


def camera_pose_from_yaw(position, yaw: float) -> Pose:
    """Map->camera pose for a camera at ``position`` looking horizontally.

    The optical axis points along (cos yaw, sin yaw, 0) in the map frame and
    the image y axis points down (-z in the map frame).
    """
    c, s = math.cos(yaw), math.sin(yaw)
    # rows: camera x (right), y (down), z (forward) expressed in map coords
    R = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
    p = np.asarray(position, dtype=float).reshape(3)
    return Pose(rotation_log(R), -R @ p)


_MIN_DEPTH = 0.25
# Offset (meters) below a pole peak used to derive the projected 2D direction.
_POLE_OFFSET = 1.0


def _visible_pixels(element: Element3D, pose: Pose, K: CameraIntrinsics):
    """Pixels of the element's defining points, or None when not visible.

    Visibility means: in front of the camera beyond a small minimum depth and
    inside the image bounds. For poles both the peak and the point one unit
    along the direction must be visible so a 2D direction can be derived.
    """
    q = pose.transform(element.point)
    if q[2] <= _MIN_DEPTH:
        return None
    uv = project_point(q, K)
    if not K.contains(*uv):
        return None
    if not element.is_line:
        return uv, None
    q2 = pose.transform(element.point + _POLE_OFFSET * element.direction)
    if q2[2] <= _MIN_DEPTH:
        return None
    uv2 = project_point(q2, K)
    if not K.contains(*uv2):
        return None
    return uv, uv2


def _clip_pixel(uv, K: CameraIntrinsics) -> tuple[float, float]:
    return (min(max(uv[0], 0.0), float(K.width)), min(max(uv[1], 0.0), float(K.height)))


def render_view(
    scene,
    pose: Pose,
    K: CameraIntrinsics,
    noise: NoiseConfig,
    seed: int,
    schema: ClassSchema = DEFAULT_SCHEMA,
    origin=None,
    radius: float = 20.0,
) -> ScenePair:
    """Project a scene into standardized 2D elements and assemble a ScenePair.

    The submap is cropped around ``origin`` (default: the camera position)
    with the given radius; map clutter is injected into it. Views with fewer
    than four 2D elements are returned but flagged invalid.
    """
    rng = np.random.default_rng(seed)
    if origin is None:
        origin = pose.camera_center
    submap = crop_submap(scene, origin, radius)

    elements2d: list[Element2D] = []
    pairs: list[tuple[int, int]] = []  # (2d row, submap column)
    sign_classes = [c for c in schema.classes if not c.line_like]

    for j, el in enumerate(submap.elements):
        vis = _visible_pixels(el, pose, K)
        if vis is None:
            continue
        if rng.random() < noise.dropout_rate:
            continue
        uv, uv2 = vis
        if noise.pixel_sigma > 0:
            uv = _clip_pixel(uv + rng.normal(0.0, noise.pixel_sigma, size=2), K)
            if uv2 is not None:
                uv2 = _clip_pixel(uv2 + rng.normal(0.0, noise.pixel_sigma, size=2), K)
        try:
            if el.is_line:
                obs = make_pole_2d(uv, uv2, K, schema=schema)
            else:
                obs = make_sign_2d(uv, schema.classes[el.class_id], K, schema=schema)
        except DomainError:
            continue  # noise collapsed the pole onto a single pixel
        pairs.append((len(elements2d), j))
        elements2d.append(obs)

    # Spurious detections: one candidate per rendered element keeps the count
    # proportional to scene density.
    n_outliers = int(np.sum(rng.random(len(elements2d)) < noise.outlier_rate_2d))
    for _ in range(n_outliers):
        u = rng.uniform(0.0, K.width)
        v = rng.uniform(0.0, K.height)
        cls = schema.classes[int(rng.integers(schema.n_classes))]
        if cls.line_like:
            u2 = rng.uniform(0.0, K.width)
            v2 = rng.uniform(0.0, K.height)
            if (u, v) == (u2, v2):
                continue
            elements2d.append(make_pole_2d((u, v), (u2, v2), K, schema=schema))
        else:
            elements2d.append(make_sign_2d((u, v), cls, K, schema=schema))

    # Map clutter, uniform over the submap disk at scene-like heights.
    sub_elements = list(submap.elements)
    n_clutter = int(np.sum(rng.random(len(sub_elements)) < noise.clutter_rate_3d))
    heights = [e.point[2] for e in sub_elements] or [3.0]
    for _ in range(n_clutter):
        ang = rng.uniform(0.0, 2.0 * math.pi)
        rad = radius * math.sqrt(rng.uniform(0.0, 1.0))
        x = submap.origin[0] + rad * math.cos(ang)
        y = submap.origin[1] + rad * math.sin(ang)
        z = rng.uniform(min(heights), max(heights))
        cls = schema.classes[int(rng.integers(schema.n_classes))]
        if cls.line_like:
            sub_elements.append(make_pole_3d((x, y, z), schema=schema))
        else:
            sub_elements.append(make_sign_3d((x, y, z), cls, schema=schema))
    submap = SubMap(tuple(sub_elements), submap.origin, submap.radius)

    C = np.zeros((len(elements2d), len(submap.elements)), dtype=np.int8)
    for i, j in pairs:
        C[i, j] = 1
    return ScenePair(tuple(elements2d), submap, pose, C, valid=len(elements2d) >= 4)


def augment(
    submap: SubMap,
    seed: int,
    yaw_range: tuple[float, float] = (0.0, 2.0 * math.pi),
    max_translation: float = 5.0,
) -> tuple[SubMap, Pose]:
    """Rigidly transform a submap by a random yaw and horizontal translation.

    The yaw rotates about the submap origin; the translation is uniform in
    [-max_translation, max_translation] per horizontal axis. Returns the
    transformed submap and the map-frame adjustment ``adj`` (p' = A p + b) so
    the ground truth can be composed as ``gt.compose(adj.inverse())``.

    The origin is kept fixed (it plays the role of the GPS crop center), so
    the radius grows by the translation magnitude to keep the submap valid.
    """
    rng = np.random.default_rng(seed)
    yaw = rng.uniform(*yaw_range) if yaw_range[1] > yaw_range[0] else yaw_range[0]
    b2 = rng.uniform(-max_translation, max_translation, size=2) if max_translation > 0 else np.zeros(2)
    c, s = math.cos(yaw), math.sin(yaw)
    A = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = submap.origin
    b = np.array([b2[0], b2[1], 0.0]) + o - A @ o
    adj = Pose(np.array([0.0, 0.0, yaw]), b)
    moved = tuple(
        Element3D(adj.transform(e.point), adj.rotate(e.direction) if e.is_line else np.zeros(3), e.semantic)
        for e in submap.elements
    )
    radius = submap.radius + float(np.linalg.norm(b2))
    return SubMap(moved, o, radius), adj


@dataclass(frozen=True)
class DatasetConfig:
    """Everything needed to build a seeded ScenePair dataset."""

    n_frames: int = 30
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    crop_radius: float = 20.0
    min_visible: int = 4
    max_yaw: float = 2.0 * math.pi
    max_translation: float = 5.0
    camera_height: float = 1.6
    seed: int = 0


def _sample_camera(rng, cfg: DatasetConfig) -> Pose:
    half = cfg.scene.area_extent / 2.0
    xy = rng.uniform(-0.5 * half, 0.5 * half, size=2)
    yaw = rng.uniform(0.0, 2.0 * math.pi)
    return camera_pose_from_yaw((xy[0], xy[1], cfg.camera_height), yaw)


def make_dataset(
    cfg: DatasetConfig,
    K: CameraIntrinsics = DEFAULT_INTRINSICS,
    schema: ClassSchema = DEFAULT_SCHEMA,
) -> list[ScenePair]:
    """Generate ``n_frames`` valid ScenePairs, one fresh scene per frame.

    Camera poses are rejection-sampled (bounded attempts) until at least
    ``min_visible`` true observations survive; each accepted frame's submap is
    then augmented and the ground-truth pose composed accordingly.
    """
    out: list[ScenePair] = []
    frame = 0
    while len(out) < cfg.n_frames:
        base = np.random.default_rng((cfg.seed, frame))
        scene_seed = int(base.integers(2**63 - 1))
        scene = generate_scene(
            SceneConfig(
                cfg.scene.n_poles,
                cfg.scene.n_signs,
                cfg.scene.area_extent,
                cfg.scene.height_range,
                scene_seed,
            ),
            schema=schema,
        )
        pair = None
        for attempt in range(40):
            rng = np.random.default_rng((cfg.seed, frame, attempt))
            pose = _sample_camera(rng, cfg)
            cand = render_view(
                scene,
                pose,
                K,
                cfg.noise,
                seed=int(rng.integers(2**63 - 1)),
                schema=schema,
                radius=cfg.crop_radius,
            )
            if cand.valid and int(cand.gt_correspondence.sum()) >= cfg.min_visible:
                pair = cand
                break
        frame += 1
        if pair is None:
            continue
        moved, adj = augment(
            pair.submap,
            seed=int(np.random.default_rng((cfg.seed, frame, 999)).integers(2**63 - 1)),
            yaw_range=(0.0, cfg.max_yaw),
            max_translation=cfg.max_translation,
        )
        gt = pair.gt_pose.compose(adj.inverse())
        out.append(ScenePair(pair.elements2d, moved, gt, pair.gt_correspondence, pair.valid))
    return out
