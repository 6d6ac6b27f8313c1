"""Build a 3D element map from paired stereo observations.

Linear two-view triangulation of standardized elements followed by
density-based de-duplication of the accumulated landmarks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import DBSCAN

from .elements import Element2D, Element3D
from .errors import DomainError, UnreliableDepthError
from .geometry import Pose, line_plane_normal


@dataclass(frozen=True)
class StereoObservation:
    """The same element seen from two calibrated, posed cameras."""

    left: Element2D
    right: Element2D
    left_pose: Pose
    right_pose: Pose

    def __post_init__(self):
        baseline = np.linalg.norm(self.left_pose.camera_center - self.right_pose.camera_center)
        if baseline <= 1e-6:
            raise DomainError("stereo poses must be distinct (baseline > 1e-6 m)")
        if not np.array_equal(self.left.semantic, self.right.semantic):
            raise DomainError("stereo views must observe the same semantic class")


@dataclass(frozen=True)
class ClusterConfig:
    eps: float = 0.5
    min_pts: int = 2

    def __post_init__(self):
        if self.eps <= 0:
            raise DomainError("cluster eps must be positive")
        if self.min_pts < 1:
            raise DomainError("cluster min_pts must be >= 1")


def _ray(pose: Pose, bearing_vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map-frame (origin, unit direction) of a camera-frame bearing."""
    R = pose.R
    return pose.camera_center, R.T @ bearing_vec


_MIN_RAY_ANGLE = 1e-4


def triangulate(obs: StereoObservation) -> Element3D:
    """Triangulate one element: midpoint of the rays' common perpendicular.

    For poles the 3D direction comes from intersecting the two views'
    back-projected line planes (each spanned by the peak and bottom rays),
    which determines the direction exactly; the sign is chosen to agree with
    the left view's image direction. Raises for near-parallel rays.
    """
    c1, d1 = _ray(obs.left_pose, obs.left.bearing.vec)
    c2, d2 = _ray(obs.right_pose, obs.right.bearing.vec)
    cos = float(np.clip(d1 @ d2, -1.0, 1.0))
    if np.arccos(abs(cos)) <= _MIN_RAY_ANGLE:
        raise UnreliableDepthError("triangulation rays are near-parallel")

    # closest points: minimize ||c1 + s d1 - c2 - t d2||
    w = c1 - c2
    a, b, c = 1.0, float(d1 @ d2), 1.0
    d, e = float(d1 @ w), float(d2 @ w)
    denom = a * c - b * b
    s = (b * e - c * d) / denom
    t = (a * e - b * d) / denom
    point = 0.5 * ((c1 + s * d1) + (c2 + t * d2))

    if obs.left.is_line != obs.right.is_line:
        raise DomainError("stereo views disagree on element line-likeness")
    if not obs.left.is_line:
        return Element3D(point, np.zeros(3), obs.left.semantic)

    n1 = obs.left_pose.R.T @ line_plane_normal(obs.left.bearing, obs.left.direction)
    n2 = obs.right_pose.R.T @ line_plane_normal(obs.right.bearing, obs.right.direction)
    direction = np.cross(n1, n2)
    norm = float(np.linalg.norm(direction))
    if norm <= 1e-9:
        raise UnreliableDepthError("line planes are near-parallel; direction unrecoverable")
    direction /= norm
    # orient toward the bottom as seen in the left image
    if float((obs.left_pose.R @ direction) @ obs.left.direction) < 0.0:
        direction = -direction
    return Element3D(point, direction, obs.left.semantic)


def cluster_labels(positions: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    """DBSCAN labels over 3D positions; noise points get -1."""
    if len(positions) == 0:
        return np.zeros(0, dtype=int)
    return DBSCAN(eps=cfg.eps, min_samples=cfg.min_pts).fit(np.asarray(positions)).labels_


def _merge_once(elements: list[Element3D], cfg: ClusterConfig) -> tuple[list[Element3D], bool]:
    """One clustering pass per semantic class; returns (elements, merged_any).

    Each cluster is replaced by its member mean (direction re-normalized);
    noise points survive as singletons. Output order follows each group's
    first original index, so a pass without merges is the identity.
    """
    groups: list[tuple[int, list[int]]] = []  # (first original index, member indices)
    class_ids = np.array([e.class_id for e in elements])
    for cid in np.unique(class_ids):
        idx = np.nonzero(class_ids == cid)[0]
        pts = np.stack([elements[i].point for i in idx])
        labels = cluster_labels(pts, cfg)
        for lab in np.unique(labels):
            if lab == -1:
                groups.extend((int(i), [int(i)]) for i in idx[labels == -1])
            else:
                members = [int(i) for i in idx[labels == lab]]
                groups.append((members[0], members))
    groups.sort(key=lambda g: g[0])

    merged = False
    out: list[Element3D] = []
    for _, members in groups:
        if len(members) == 1:
            out.append(elements[members[0]])
            continue
        merged = True
        point = np.mean([elements[i].point for i in members], axis=0)
        direction = np.mean([elements[i].direction for i in members], axis=0)
        n = float(np.linalg.norm(direction))
        direction = direction / n if n > 1e-12 else np.zeros(3)
        out.append(Element3D(point, direction, elements[members[0]].semantic))
    return out, merged


def deduplicate(elements, cfg: ClusterConfig = ClusterConfig()) -> list[Element3D]:
    """Density-based de-duplication of map elements, per semantic class.

    Clustering and merging repeat until a pass produces no merge, which makes
    the operation idempotent by construction.
    """
    current = list(elements)
    while True:
        current, merged = _merge_once(current, cfg)
        if not merged:
            return current
