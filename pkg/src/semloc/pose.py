"""Coarse pose search and point-and-line pose refinement.

The coarse stage runs a classical quartic P3P minimal solver inside a seeded
RANSAC loop over the prioritized match list; the refinement stage minimizes
the plan-weighted sum of point collinearity and line plane-incidence
residuals over an angle-axis pose with L-BFGS and analytic gradients.

Reductions inside the objective sort their terms before summing so the
result is exactly invariant to the ordering of correspondences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.optimize import minimize

from .elements import SubMap
from .errors import (
    DegenerateGeometryError,
    DomainError,
    InsufficientElementsError,
    InsufficientMatchesError,
)
from .geometry import Pose, line_plane_normal, rotation_exp, skew, so3_right_jacobian
from .matcher import MatchList

_TINY = 1e-12


def _canonical_sum(values: np.ndarray) -> float:
    """Order-independent reduction: identical multisets sum bit-identically."""
    flat = np.sort(values.ravel(), kind="stable")
    return float(flat.sum())


# ---------------------------------------------------------------------------
# P3P minimal solver
# ---------------------------------------------------------------------------


def _absolute_orientation(P: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) with X ~ R P + t via SVD (Kabsch)."""
    cp = P.mean(axis=0)
    cx = X.mean(axis=0)
    H = (P - cp).T @ (X - cx)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cx - R @ cp


def _polish_distances(s: np.ndarray, cosines, sq_dists) -> np.ndarray | None:
    """Newton-refine camera distances against the three law-of-cosines
    equations; returns None when the iteration leaves the positive octant."""
    cab, cac, cbc = cosines
    c2, b2, a2 = sq_dists
    for _ in range(10):
        s1, s2, s3 = s
        F = np.array(
            [
                s1 * s1 + s2 * s2 - 2 * s1 * s2 * cab - c2,
                s1 * s1 + s3 * s3 - 2 * s1 * s3 * cac - b2,
                s2 * s2 + s3 * s3 - 2 * s2 * s3 * cbc - a2,
            ]
        )
        if np.abs(F).max() < 1e-13 * max(c2, b2, a2):
            break
        J = np.array(
            [
                [2 * s1 - 2 * s2 * cab, 2 * s2 - 2 * s1 * cab, 0.0],
                [2 * s1 - 2 * s3 * cac, 0.0, 2 * s3 - 2 * s1 * cac],
                [0.0, 2 * s2 - 2 * s3 * cbc, 2 * s3 - 2 * s2 * cbc],
            ]
        )
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            return None
        s = s - step
        if np.any(s <= 0) or not np.isfinite(s).all():
            return None
    return s


def p3p(bearings: np.ndarray, points: np.ndarray) -> list[Pose]:
    """Minimal absolute-pose solver from three 2D-3D correspondences.

    Solves the Grunert distance system through its quartic resolvent (the
    quartic coefficients are assembled by polynomial arithmetic rather than a
    hand-expanded formula), Newton-polishes each distance triple and converts
    to (R, t) by absolute orientation. Returns up to four poses, all
    reprojecting the three points onto their bearings within 1e-6 rad;
    degenerate input yields an empty list.
    """
    F = np.asarray(bearings, dtype=float).reshape(3, 3)
    P = np.asarray(points, dtype=float).reshape(3, 3)
    scale = max(1.0, float(np.abs(P).max()))
    if np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0])) <= 1e-9 * scale * scale:
        return []
    for i in range(3):
        for j in range(i + 1, 3):
            if np.linalg.norm(F[i] - F[j]) <= 1e-9 or np.linalg.norm(P[i] - P[j]) <= 1e-9:
                return []

    cab = float(F[0] @ F[1])
    cac = float(F[0] @ F[2])
    cbc = float(F[1] @ F[2])
    c2 = float(((P[0] - P[1]) ** 2).sum())
    b2 = float(((P[0] - P[2]) ** 2).sum())
    a2 = float(((P[1] - P[2]) ** 2).sum())
    A = a2 / b2
    B = c2 / b2

    # u = s2/s1, v = s3/s1; eliminate u to get a quartic in v
    N = np.array([B - A - 1.0, -2.0 * (B - A) * cac, 1.0 + B - A])  # ascending coeffs
    D = np.array([-2.0 * cab, 2.0 * cbc])
    one_minus_BQ = np.array([1.0 - B, 2.0 * B * cac, -B])
    quartic = npoly.polyadd(
        npoly.polysub(npoly.polymul(N, N), 2.0 * cab * npoly.polymul(N, D)),
        npoly.polymul(one_minus_BQ, npoly.polymul(D, D)),
    )
    coeffs = np.trim_zeros(quartic[::-1], "f")  # descending, drop tiny leading terms
    lead = np.abs(quartic).max()
    while len(coeffs) and abs(coeffs[0]) < 1e-12 * lead:
        coeffs = coeffs[1:]
    if len(coeffs) <= 1:
        return []
    roots = np.roots(coeffs)

    poses: list[Pose] = []
    for v in roots:
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)):
            continue
        v = float(v.real)
        if v <= 0:
            continue
        Q = 1.0 + v * v - 2.0 * v * cac
        if Q <= 0:
            continue
        s1 = math.sqrt(b2 / Q)
        D_val = 2.0 * (v * cbc - cab)
        if abs(D_val) > 1e-9:
            u_candidates = [float(npoly.polyval(v, N)) / D_val]
        else:
            disc = cab * cab - (1.0 - B * Q)
            if disc < 0:
                continue
            u_candidates = [cab + math.sqrt(disc), cab - math.sqrt(disc)]
        for u in u_candidates:
            if u <= 0:
                continue
            s = _polish_distances(np.array([s1, u * s1, v * s1]), (cab, cac, cbc), (c2, b2, a2))
            if s is None:
                continue
            X = s[:, None] * F
            R, t = _absolute_orientation(P, X)
            ok = True
            for i in range(3):
                q = R @ P[i] + t
                nq = np.linalg.norm(q)
                if nq < _TINY:
                    ok = False
                    break
                ang = math.acos(min(1.0, max(-1.0, float(F[i] @ q) / nq)))
                if ang > 1e-6:
                    ok = False
                    break
            if not ok:
                continue
            if any(
                np.abs(p.R - R).max() < 1e-6 and np.abs(p.t - t).max() < 1e-6 * scale
                for p in poses
            ):
                continue
            poses.append(Pose.from_matrix(R, t))
    return poses


# ---------------------------------------------------------------------------
# PnPL objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PnplProblem:
    """Plan-weighted point and line residual problem.

    Point branch: bearings (m, 3), targets (n, 3), weights (m, n).
    Line branch: bearings/2D directions (m2, 3), 3D points/directions
    (n2, 3), weights (m2, n2). The optional ``constrain_line_base`` flag adds
    a second plane-incidence term on the line base point itself (an
    interpretation variant, off by default).
    """

    point_bearings: np.ndarray
    point_targets: np.ndarray
    point_weights: np.ndarray
    line_bearings: np.ndarray
    line_dirs_2d: np.ndarray
    line_points: np.ndarray
    line_dirs_3d: np.ndarray
    line_weights: np.ndarray
    constrain_line_base: bool = False

    def __post_init__(self):
        pf = np.atleast_2d(np.asarray(self.point_bearings, dtype=float).reshape(-1, 3))
        pt = np.atleast_2d(np.asarray(self.point_targets, dtype=float).reshape(-1, 3))
        pw = np.asarray(self.point_weights, dtype=float).reshape(len(pf), len(pt))
        lf = np.atleast_2d(np.asarray(self.line_bearings, dtype=float).reshape(-1, 3))
        lv = np.atleast_2d(np.asarray(self.line_dirs_2d, dtype=float).reshape(-1, 3))
        lp = np.atleast_2d(np.asarray(self.line_points, dtype=float).reshape(-1, 3))
        ld = np.atleast_2d(np.asarray(self.line_dirs_3d, dtype=float).reshape(-1, 3))
        lw = np.asarray(self.line_weights, dtype=float).reshape(len(lf), len(lp))
        for arr in (pf, pt, pw, lf, lv, lp, ld, lw):
            if not np.isfinite(arr).all():
                raise DomainError("problem arrays must be finite")
        if np.any(pw < 0) or np.any(lw < 0):
            raise DomainError("plan weights must be non-negative")
        if len(ld) != len(lp):
            raise DomainError("line points and 3D directions must pair up")
        normals = np.zeros((len(lf), 3))
        for i in range(len(lf)):
            normals[i] = line_plane_normal(lf[i], lv[i])
        normals.setflags(write=False)
        for name, arr in (
            ("point_bearings", pf),
            ("point_targets", pt),
            ("point_weights", pw),
            ("line_bearings", lf),
            ("line_dirs_2d", lv),
            ("line_points", lp),
            ("line_dirs_3d", ld),
            ("line_weights", lw),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_line_normals", normals)

    @property
    def line_normals(self) -> np.ndarray:
        return self._line_normals

    @property
    def total_weight(self) -> float:
        return float(self.point_weights.sum() + self.line_weights.sum())

    def n_terms(self) -> int:
        return self.point_weights.size + self.line_weights.size


def _transforms(params: np.ndarray):
    r, t = params[:3], params[3:]
    R = rotation_exp(r)
    Jr = so3_right_jacobian(r)
    return R, t, Jr


def _point_block(F, targets, R, t, Jr, with_jac: bool):
    """Residuals (m, n) and optionally per-pair pose jacobians (m, n, 6)."""
    m, n = len(F), len(targets)
    if m == 0 or n == 0:
        return np.zeros((m, n)), (np.zeros((m, n, 6)) if with_jac else None)
    Q = targets @ R.T + t
    rho = np.linalg.norm(Q, axis=1)
    rho = np.maximum(rho, _TINY)
    U = Q / rho[:, None]
    res = 1.0 - F @ U.T
    if not with_jac:
        return res, None
    n = len(targets)
    G = (np.eye(3)[None] - U[:, :, None] * U[:, None, :]) / rho[:, None, None]  # (n,3,3)
    Dj = np.einsum("ab,jbc,cd->jad", -R, np.stack([skew(p) for p in targets]), Jr)
    V = np.einsum("jab,ib->ija", G, F)  # G_j f_i
    g_t = -V
    g_r = -np.einsum("jab,ija->ijb", Dj, V)
    return res, np.concatenate([g_r, g_t], axis=2)


def _line_block(normals, base_points, dirs3d, R, t, Jr, offset: float, with_jac: bool):
    """Plane-incidence residuals for line pairs at base + offset * dir."""
    m, n = len(normals), len(base_points)
    if m == 0 or n == 0:
        return np.zeros((m, n)), (np.zeros((m, n, 6)) if with_jac else None)
    targets = base_points + offset * dirs3d
    Q = targets @ R.T + t
    rho = np.maximum(np.linalg.norm(Q, axis=1), _TINY)
    Du = Q / rho[:, None]  # d_j
    cross = np.cross(normals[:, None, :], Du[None, :, :])  # (m2, n2, 3)
    s = np.maximum(np.linalg.norm(cross, axis=2), _TINY)
    res = 1.0 - s
    if not with_jac:
        return res, None
    nd = normals @ Du.T  # (m2, n2)
    # d residual / d d_j = ((n.d) n - d) / s
    W = (nd[:, :, None] * normals[:, None, :] - Du[None, :, :]) / s[:, :, None]
    G = (np.eye(3)[None] - Du[:, :, None] * Du[:, None, :]) / rho[:, None, None]
    Dj = np.einsum("ab,jbc,cd->jad", -R, np.stack([skew(p) for p in targets]), Jr)
    GV = np.einsum("jab,ijb->ija", G, W)  # G_j w_ij
    g_t = GV
    g_r = np.einsum("jab,ija->ijb", Dj, GV)
    return res, np.concatenate([g_r, g_t], axis=2)


def pnpl_residuals(problem: PnplProblem, params: np.ndarray):
    """Unweighted residual matrices (points, lines) at a pose 6-vector."""
    R, t, Jr = _transforms(np.asarray(params, dtype=float).reshape(6))
    pr, _ = _point_block(problem.point_bearings, problem.point_targets, R, t, Jr, False)
    lr, _ = _line_block(
        problem.line_normals, problem.line_points, problem.line_dirs_3d, R, t, Jr, 1.0, False
    )
    if problem.constrain_line_base:
        lr0, _ = _line_block(
            problem.line_normals, problem.line_points, problem.line_dirs_3d, R, t, Jr, 0.0, False
        )
        lr = lr + lr0
    return pr, lr


def pnpl_value_grad(problem: PnplProblem, params: np.ndarray) -> tuple[float, np.ndarray]:
    """Objective value and analytic gradient w.r.t. the pose 6-vector."""
    params = np.asarray(params, dtype=float).reshape(6)
    R, t, Jr = _transforms(params)
    value_terms = []
    grad_terms = []

    pr, pj = _point_block(problem.point_bearings, problem.point_targets, R, t, Jr, True)
    if pr.size:
        value_terms.append(problem.point_weights * pr)
        grad_terms.append(problem.point_weights[:, :, None] * pj)

    blocks = [1.0] + ([0.0] if problem.constrain_line_base else [])
    for offset in blocks:
        lr, lj = _line_block(
            problem.line_normals, problem.line_points, problem.line_dirs_3d, R, t, Jr, offset, True
        )
        if lr.size:
            value_terms.append(problem.line_weights * lr)
            grad_terms.append(problem.line_weights[:, :, None] * lj)

    value = sum(_canonical_sum(v) for v in value_terms) if value_terms else 0.0
    grad = np.zeros(6)
    for k in range(6):
        grad[k] = sum(_canonical_sum(g[:, :, k]) for g in grad_terms) if grad_terms else 0.0
    return value, grad


def pnpl_pair_jacobians(problem: PnplProblem, params: np.ndarray):
    """Per-plan-entry residual gradients d(residual_ij)/d(pose) at a pose.

    Returns (points (m, n, 6), lines (m2, n2, 6)); the line entries include
    the optional base term when the problem enables it. These rows are the
    cross-derivatives of the objective between pose and plan entries.
    """
    params = np.asarray(params, dtype=float).reshape(6)
    R, t, Jr = _transforms(params)
    _, pj = _point_block(problem.point_bearings, problem.point_targets, R, t, Jr, True)
    _, lj = _line_block(
        problem.line_normals, problem.line_points, problem.line_dirs_3d, R, t, Jr, 1.0, True
    )
    if problem.constrain_line_base:
        _, lj0 = _line_block(
            problem.line_normals, problem.line_points, problem.line_dirs_3d, R, t, Jr, 0.0, True
        )
        lj = lj + lj0
    return pj, lj


def gauss_newton_hessian(problem: PnplProblem, params: np.ndarray) -> np.ndarray:
    """PSD Gauss-Newton surrogate of the objective Hessian.

    Writes each point term as ~ w/2 ||f - u||^2 and each line term as
    ~ w/2 (n . d)^2 and keeps only first-derivative products.
    """
    params = np.asarray(params, dtype=float).reshape(6)
    R, t, Jr = _transforms(params)
    H = np.zeros((6, 6))

    F, targets, Wp = problem.point_bearings, problem.point_targets, problem.point_weights
    if Wp.size:
        Q = targets @ R.T + t
        rho = np.maximum(np.linalg.norm(Q, axis=1), _TINY)
        U = Q / rho[:, None]
        G = (np.eye(3)[None] - U[:, :, None] * U[:, None, :]) / rho[:, None, None]
        Dj = np.einsum("ab,jbc,cd->jad", -R, np.stack([skew(p) for p in targets]), Jr)
        for j in range(len(targets)):
            Ju = np.concatenate([G[j] @ Dj[j], G[j]], axis=1)  # (3, 6)
            H += float(Wp[:, j].sum()) * Ju.T @ Ju

    blocks = [1.0] + ([0.0] if problem.constrain_line_base else [])
    Wl = problem.line_weights
    if Wl.size:
        for offset in blocks:
            targets = problem.line_points + offset * problem.line_dirs_3d
            Q = targets @ R.T + t
            rho = np.maximum(np.linalg.norm(Q, axis=1), _TINY)
            Du = Q / rho[:, None]
            G = (np.eye(3)[None] - Du[:, :, None] * Du[:, None, :]) / rho[:, None, None]
            Dj = np.einsum("ab,jbc,cd->jad", -R, np.stack([skew(p) for p in targets]), Jr)
            for j in range(len(targets)):
                Jd = np.concatenate([G[j] @ Dj[j], G[j]], axis=1)  # d d_j / d pose
                for i in range(len(problem.line_normals)):
                    if Wl[i, j] == 0.0:
                        continue
                    g = problem.line_normals[i] @ Jd  # d (n.d) / d pose
                    H += Wl[i, j] * np.outer(g, g)
    return H


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefineConfig:
    max_iterations: int = 200
    grad_tol: float = 1e-9
    memory: int = 10


def weighted_pnpl(problem: PnplProblem, init: Pose, cfg: RefineConfig = RefineConfig()) -> Pose:
    """L-BFGS minimization of the plan-weighted PnPL objective from ``init``.

    Terminates on gradient norm below ``grad_tol`` or the iteration cap; the
    returned pose never has a higher objective than the initialization.
    """
    x0 = init.params
    f0, _ = pnpl_value_grad(problem, x0)
    if not np.isfinite(f0):
        raise DomainError("objective is not finite at the initial pose")

    res = minimize(
        lambda x: pnpl_value_grad(problem, x),
        x0,
        jac=True,
        method="L-BFGS-B",
        options={
            "maxiter": cfg.max_iterations,
            "gtol": cfg.grad_tol,
            "ftol": 1e-16,
            "maxcor": cfg.memory,
        },
    )
    if not np.isfinite(res.fun) or res.fun > f0:
        return init
    return Pose.from_params(res.x)


def _check_boolean_one_to_one(W: np.ndarray, name: str) -> None:
    if W.size == 0:
        return
    if not np.all((W == 0.0) | (W == 1.0)):
        raise DomainError(f"{name} plan must be boolean")
    if W.sum(axis=1).max(initial=0) > 1 or W.sum(axis=0).max(initial=0) > 1:
        raise DomainError(f"{name} plan must have at most one nonzero per row and column")


def direct_pnpl(problem: PnplProblem, init: Pose, cfg: RefineConfig = RefineConfig()) -> Pose:
    """PnPL with boolean one-to-one plans (the simple-scene path).

    Identical optimization to :func:`weighted_pnpl`; validates the boolean
    one-to-one structure and requires at least four correspondences.
    """
    _check_boolean_one_to_one(problem.point_weights, "point")
    _check_boolean_one_to_one(problem.line_weights, "line")
    count = int(problem.point_weights.sum() + problem.line_weights.sum())
    if count < 4:
        raise InsufficientElementsError(f"direct PnPL needs >= 4 correspondences, got {count}")
    return weighted_pnpl(problem, init, cfg)


# ---------------------------------------------------------------------------
# P3P-RANSAC over the prioritized match list
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RansacConfig:
    theta: float = 0.003
    max_iterations: int = 1000
    top_k: int = 50
    seed: int = 0
    min_inlier_rate: float = 0.3
    confidence: float = 0.9999
    weighted_sampling: bool = False

    def __post_init__(self):
        if self.theta <= 0:
            raise DomainError("inlier threshold theta must be positive")
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be >= 1")


@dataclass(frozen=True)
class CoarseResult:
    pose: Pose
    inlier_indices: np.ndarray
    inlier_rate: float
    mean_error: float
    low_confidence: bool
    iterations: int


class _SceneArrays:
    """Flat views of a ScenePair-like (elements2d, submap) for fast scoring."""

    def __init__(self, elements2d, submap: SubMap):
        self.F = np.stack([e.bearing.vec for e in elements2d])
        self.cls2d = np.array([e.class_id for e in elements2d])
        self.is_line_2d = np.array([e.is_line for e in elements2d])
        self.normals = np.zeros((len(elements2d), 3))
        for i, e in enumerate(elements2d):
            if e.is_line:
                self.normals[i] = line_plane_normal(e.bearing, e.direction)
        self.P = submap.points()
        self.cls3d = np.array([e.class_id for e in submap.elements])
        self.dirs3d = np.stack([e.direction for e in submap.elements]) if len(submap) else np.zeros((0, 3))
        self.class_cols = {
            int(c): np.nonzero(self.cls3d == c)[0] for c in np.unique(self.cls3d)
        }


def _score_pose(scene: _SceneArrays, R: np.ndarray, t: np.ndarray, theta: float):
    """Per-2D-element inlier flags and angular errors under a candidate pose.

    Each 2D element is tested against the nearest reprojected map element of
    its own class (the bottom of a matched pole adds a plane-incidence test
    at the same threshold).
    """
    m = len(scene.F)
    errs = np.full(m, np.inf)
    ok = np.zeros(m, dtype=bool)
    if len(scene.P) == 0:
        return ok, errs
    Q = scene.P @ R.T + t
    rho = np.maximum(np.linalg.norm(Q, axis=1), _TINY)
    U = Q / rho[:, None]
    QB = (scene.P + scene.dirs3d) @ R.T + t
    rhob = np.maximum(np.linalg.norm(QB, axis=1), _TINY)
    UB = QB / rhob[:, None]

    for cid, cols in scene.class_cols.items():
        rows = np.nonzero(scene.cls2d == cid)[0]
        if len(rows) == 0 or len(cols) == 0:
            continue
        cosang = np.clip(scene.F[rows] @ U[cols].T, -1.0, 1.0)
        ang = np.arccos(cosang)
        nearest = np.argmin(ang, axis=1)
        best = ang[np.arange(len(rows)), nearest]
        errs[rows] = best
        passed = best < theta
        for k, row in enumerate(rows):
            if not passed[k]:
                continue
            if scene.is_line_2d[row]:
                d = UB[cols[nearest[k]]]
                incidence = math.asin(min(1.0, abs(float(scene.normals[row] @ d))))
                if incidence >= theta:
                    continue
            ok[row] = True
    return ok, errs


def ransac_p3p(
    matches: MatchList, elements2d, submap: SubMap, cfg: RansacConfig = RansacConfig()
) -> CoarseResult:
    """Robust coarse pose from the prioritized match list.

    Every iteration draws 3 sample matches plus 1 verification match with an
    independently seeded generator (iterations are reduction-order free, so
    they could run in parallel); P3P candidates are ranked by the
    verification pair's angular error and the best one is scored by the
    inlier rule above. Poles contribute their peak as the P3P point and their
    bottom through the plane-incidence check. Returns the pose with the most
    inliers (ties: lower mean inlier error), flagged low-confidence below the
    configured inlier-rate floor. Stops early once the confidence target is
    met.
    """
    L = len(matches)
    if L < 4:
        raise InsufficientMatchesError(f"RANSAC needs at least 4 matches, got {L}")
    scene = _SceneArrays(elements2d, submap)

    probs = None
    if cfg.weighted_sampling:
        # floor keeps every entry drawable so replace=False can always fill
        # the sample
        p = matches.prob + 1e-9
        probs = p / p.sum()

    best = None  # (count, -mean_err, pose, it)
    needed = cfg.max_iterations
    it = 0
    while it < min(cfg.max_iterations, needed):
        rng = np.random.default_rng((cfg.seed, it))
        picks = rng.choice(L, size=4, replace=False, p=probs)
        i3 = matches.idx_2d[picks[:3]]
        j3 = matches.idx_3d[picks[:3]]
        iv = int(matches.idx_2d[picks[3]])
        jv = int(matches.idx_3d[picks[3]])
        it += 1
        if len(set(i3.tolist())) < 3 or len(set(j3.tolist())) < 3:
            continue
        candidates = p3p(scene.F[i3], scene.P[j3])
        if not candidates:
            continue

        def verification_error(pose: Pose) -> float:
            q = pose.R @ scene.P[jv] + pose.t
            nq = np.linalg.norm(q)
            if nq < _TINY:
                return np.inf
            return math.acos(min(1.0, max(-1.0, float(scene.F[iv] @ q) / nq)))

        pose = min(candidates, key=verification_error)
        # the verification pair must itself pass the inlier test; otherwise a
        # contaminated sample would still score its three self-consistent
        # rows and outrank honest poses on sparse frames
        if verification_error(pose) >= cfg.theta:
            continue
        ok, errs = _score_pose(scene, pose.R, pose.t, cfg.theta)
        flags = ok[matches.idx_2d]
        count = int(flags.sum())
        if count == 0:
            continue
        mean_err = float(errs[matches.idx_2d[flags]].mean())
        key = (count, -mean_err)
        if best is None or key > best[0]:
            best = (key, pose, it)
            # The adaptive stop must not trust the sampled rows: a junk
            # minimal sample reprojects its own pairs exactly, so only
            # inliers outside the sample certify the model.
            sampled_rows = set(i3.tolist()) | {iv}
            outside = np.array([r not in sampled_rows for r in matches.idx_2d])
            rate_ex = float(flags[outside].sum()) / L if outside.any() else 0.0
            if 0 < rate_ex < 1:
                needed = math.ceil(
                    math.log(1.0 - cfg.confidence) / math.log(1.0 - min(rate_ex, 0.999) ** 4)
                )
            elif rate_ex >= 1.0:
                needed = it

    if best is None:
        return CoarseResult(Pose.identity(), np.zeros(0, dtype=int), 0.0, np.inf, True, it)

    _, pose, _ = best
    ok, errs = _score_pose(scene, pose.R, pose.t, cfg.theta)
    flags = ok[matches.idx_2d]
    inliers = np.nonzero(flags)[0]
    assert np.all(errs[matches.idx_2d[inliers]] < cfg.theta)
    rate = len(inliers) / L
    mean_err = float(errs[matches.idx_2d[inliers]].mean()) if len(inliers) else np.inf
    return CoarseResult(pose, inliers, rate, mean_err, rate < cfg.min_inlier_rate, it)
