"""Standardized semantic elements and submap cropping.

This is the ingestion boundary of the pipeline: upstream detectors and maps
deliver already-parameterized elements (pole peak point + unit direction to
the bottom, sign midpoints), each tagged with a one-hot semantic label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import Bearing, CameraIntrinsics, _frozen, pixel_to_bearing


@dataclass(frozen=True)
class SemanticClass:
    id: int
    name: str
    line_like: bool = False


@dataclass(frozen=True)
class ClassSchema:
    """The dataset-level class vocabulary; fixes the one-hot length C."""

    classes: tuple[SemanticClass, ...]

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if ids != list(range(len(self.classes))):
            raise DomainError("class ids must be contiguous from 0")
        if sum(c.line_like for c in self.classes) != 1:
            raise DomainError("exactly one class must be line-like")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def line_class(self) -> SemanticClass:
        return next(c for c in self.classes if c.line_like)

    def by_name(self, name: str) -> SemanticClass:
        for c in self.classes:
            if c.name == name:
                return c
        raise DomainError(f"unknown semantic class {name!r}")

    def one_hot(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.n_classes:
            raise DomainError(f"class id {class_id} out of range")
        v = np.zeros(self.n_classes)
        v[class_id] = 1.0
        return v


DEFAULT_SCHEMA = ClassSchema(
    (
        SemanticClass(0, "pole", line_like=True),
        SemanticClass(1, "triangular-sign"),
        SemanticClass(2, "rectangular-sign"),
        SemanticClass(3, "rounded-sign"),
    )
)


def _check_one_hot(semantic: np.ndarray) -> None:
    if semantic.ndim != 1 or semantic.size < 1:
        raise DomainError("semantic vector must be a non-empty 1-d array")
    if not np.all((semantic == 0.0) | (semantic == 1.0)) or semantic.sum() != 1.0:
        raise DomainError("semantic vector must be one-hot")


def _check_direction(direction: np.ndarray) -> None:
    n = float(np.linalg.norm(direction))
    if n != 0.0 and abs(n - 1.0) > 1e-9:
        raise DomainError("direction must be a zero vector (signs) or unit (poles)")


@dataclass(frozen=True)
class Element2D:
    """Image-side observation: unit bearing, direction vector, one-hot label.

    The bearing points at a sign midpoint or a pole peak. The direction is the
    unit vector toward the pole bottom for line-like elements and exactly zero
    otherwise.
    """

    bearing: Bearing
    direction: np.ndarray
    semantic: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        s = np.asarray(self.semantic, dtype=float)
        _check_direction(d)
        _check_one_hot(s)
        object.__setattr__(self, "direction", _frozen(d))
        object.__setattr__(self, "semantic", _frozen(s))

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.semantic))

    @property
    def is_line(self) -> bool:
        return float(np.linalg.norm(self.direction)) > 0.0


@dataclass(frozen=True)
class Element3D:
    """Map-side landmark: 3D point (meters, map frame), direction, one-hot label."""

    point: np.ndarray
    direction: np.ndarray
    semantic: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.point, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        s = np.asarray(self.semantic, dtype=float)
        if not np.isfinite(p).all():
            raise DomainError("element position must be finite")
        _check_direction(d)
        _check_one_hot(s)
        object.__setattr__(self, "point", _frozen(p))
        object.__setattr__(self, "direction", _frozen(d))
        object.__setattr__(self, "semantic", _frozen(s))

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.semantic))

    @property
    def is_line(self) -> bool:
        return float(np.linalg.norm(self.direction)) > 0.0


@dataclass(frozen=True)
class SubMap:
    """Map elements within ``radius`` (horizontal distance) of ``origin``."""

    elements: tuple[Element3D, ...]
    origin: np.ndarray
    radius: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        object.__setattr__(self, "origin", _frozen(o))
        object.__setattr__(self, "elements", tuple(self.elements))
        if self.radius <= 0:
            raise DomainError("submap radius must be positive")
        for e in self.elements:
            d = float(np.hypot(e.point[0] - o[0], e.point[1] - o[1]))
            if d > self.radius + 1e-9:
                raise DomainError("submap element outside the crop radius")

    def __len__(self) -> int:
        return len(self.elements)

    def points(self) -> np.ndarray:
        if not self.elements:
            return np.zeros((0, 3))
        return np.stack([e.point for e in self.elements])


def make_pole_2d(
    peak, bottom, K: CameraIntrinsics, schema: ClassSchema = DEFAULT_SCHEMA
) -> Element2D:
    """Build a pole observation from its peak and bottom pixel points.

    The stored direction is the normalized difference of the lifted bearings,
    i.e. it points from the peak toward the bottom in the camera frame.
    """
    peak = np.asarray(peak, dtype=float).reshape(2)
    bottom = np.asarray(bottom, dtype=float).reshape(2)
    if np.array_equal(peak, bottom):
        raise DomainError("pole peak and bottom pixels must be distinct")
    f_peak = pixel_to_bearing(peak[0], peak[1], K)
    f_bottom = pixel_to_bearing(bottom[0], bottom[1], K)
    d = f_bottom.vec - f_peak.vec
    n = float(np.linalg.norm(d))
    if n < 1e-12:
        raise DomainError("pole peak and bottom pixels lift to the same bearing")
    return Element2D(f_peak, d / n, schema.one_hot(schema.line_class.id))


def make_sign_2d(
    midpoint, cls: SemanticClass, K: CameraIntrinsics, schema: ClassSchema = DEFAULT_SCHEMA
) -> Element2D:
    """Build a sign observation from its midpoint pixel; zero direction."""
    if cls.line_like:
        raise DomainError("signs must use a non-line-like class")
    midpoint = np.asarray(midpoint, dtype=float).reshape(2)
    f = pixel_to_bearing(midpoint[0], midpoint[1], K)
    return Element2D(f, np.zeros(3), schema.one_hot(cls.id))


def make_pole_3d(peak_point, direction=(0.0, 0.0, -1.0), schema: ClassSchema = DEFAULT_SCHEMA) -> Element3D:
    d = np.asarray(direction, dtype=float)
    n = float(np.linalg.norm(d))
    if n < 1e-12:
        raise DomainError("pole direction must be nonzero")
    return Element3D(np.asarray(peak_point, dtype=float), d / n, schema.one_hot(schema.line_class.id))


def make_sign_3d(point, cls: SemanticClass, schema: ClassSchema = DEFAULT_SCHEMA) -> Element3D:
    if cls.line_like:
        raise DomainError("signs must use a non-line-like class")
    return Element3D(np.asarray(point, dtype=float), np.zeros(3), schema.one_hot(cls.id))


def crop_submap(map_elements, origin, radius: float) -> SubMap:
    """Keep exactly the elements with horizontal distance <= radius of origin.

    The boundary is closed and the input order is preserved; an empty result
    is allowed.
    """
    if radius <= 0:
        raise DomainError("crop radius must be positive")
    o = np.asarray(origin, dtype=float).reshape(3)
    kept = tuple(
        e
        for e in map_elements
        if float(np.hypot(e.point[0] - o[0], e.point[1] - o[1])) <= radius
    )
    return SubMap(kept, o, float(radius))
