"""Joint training: correspondence loss, pose loss, and the bi-level gradient.

The forward pipeline per scene pair is encode -> per-branch cost matrices ->
unrolled Sinkhorn -> correspondence loss; in the joint phase the plans also
feed the coarse pose search (treated as a non-differentiable initializer) and
the weighted PnPL refinement, whose argmin is differentiated w.r.t. the plan
entries with the implicit function theorem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .elements import SubMap
from .encoder import (
    EncoderWeights,
    cost_matrix_torch,
    forward_stream,
    input_matrix,
    knn_graph,
)
from .errors import (
    DegenerateProblemError,
    DomainError,
    InsufficientElementsError,
    SemlocError,
)
from .geometry import Pose, geodesic_angle
from .matcher import Branch, BranchedPlans, TransportPlan, prioritized_matches, sinkhorn_iterations_torch
from .pose import (
    PnplProblem,
    RansacConfig,
    RefineConfig,
    gauss_newton_hessian,
    pnpl_pair_jacobians,
    pnpl_value_grad,
    ransac_p3p,
    weighted_pnpl,
)

# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def correspondence_loss(P: np.ndarray, C_gt: np.ndarray) -> float:
    """sum_ij (1 - 2 C_ij) P_ij: rewards mass on true pairs, penalizes the rest."""
    P = np.asarray(P, dtype=float)
    C_gt = np.asarray(C_gt, dtype=float)
    if P.shape != C_gt.shape:
        raise DomainError("plan and ground-truth correspondence shapes must match")
    return float(((1.0 - 2.0 * C_gt) * P).sum())


def pose_loss(pose: Pose, gt: Pose) -> float:
    """Geodesic rotation angle (radians) plus translation distance (meters).

    Doubles as the RRE/RTE metric pair: the two addends are reported
    separately by the evaluation code.
    """
    return geodesic_angle(gt.R, pose.R) + float(np.linalg.norm(pose.t - gt.t))


def total_loss(lc: float, lp: float, gamma_p: float) -> float:
    return lc + gamma_p * lp


# ---------------------------------------------------------------------------
# Torch mirror of the PnPL objective (exact Hessian for the implicit gradient)
# ---------------------------------------------------------------------------


def _skew_torch(r):
    z = torch.zeros((), dtype=r.dtype)
    return torch.stack(
        [
            torch.stack([z, -r[2], r[1]]),
            torch.stack([r[2], z, -r[0]]),
            torch.stack([-r[1], r[0], z]),
        ]
    )


def rotation_exp_torch(r: torch.Tensor) -> torch.Tensor:
    """Differentiable Rodrigues map with a series branch near zero angle."""
    theta2 = (r * r).sum()
    small = theta2 < 1e-12
    theta2_safe = torch.clamp(theta2, min=1e-12)
    theta = torch.sqrt(theta2_safe)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2_safe)
    K = _skew_torch(r)
    return torch.eye(3, dtype=r.dtype) + a * K + b * (K @ K)


def _objective_torch(problem: PnplProblem, pose6: torch.Tensor) -> torch.Tensor:
    r, t = pose6[:3], pose6[3:]
    R = rotation_exp_torch(r)
    total = pose6.new_zeros(())
    Wp = torch.tensor(problem.point_weights)
    if Wp.numel():
        F = torch.tensor(problem.point_bearings)
        P = torch.tensor(problem.point_targets)
        Q = P @ R.T + t
        rho = torch.clamp(Q.norm(dim=1), min=1e-12)
        U = Q / rho.unsqueeze(1)
        total = total + (Wp * (1.0 - F @ U.T)).sum()
    Wl = torch.tensor(problem.line_weights)
    if Wl.numel():
        N = torch.tensor(problem.line_normals)
        offsets = [1.0] + ([0.0] if problem.constrain_line_base else [])
        for off in offsets:
            B = torch.tensor(problem.line_points + off * problem.line_dirs_3d)
            Q = B @ R.T + t
            rho = torch.clamp(Q.norm(dim=1), min=1e-12)
            D = Q / rho.unsqueeze(1)
            cross = torch.cross(
                N.unsqueeze(1).expand(-1, D.shape[0], 3),
                D.unsqueeze(0).expand(N.shape[0], -1, 3),
                dim=2,
            )
            s = torch.clamp(cross.norm(dim=2), min=1e-12)
            total = total + (Wl * (1.0 - s)).sum()
    return total


def newton_refine_pose(problem: PnplProblem, pose: Pose, steps: int = 3) -> Pose:
    """Drive the pose gradient to machine precision with exact-Hessian Newton.

    L-BFGS stops around |grad| ~ 1e-9; the implicit-gradient checks need the
    argmin pinned much tighter than that.
    """
    x = pose.params.copy()
    for _ in range(steps):
        _, g = pnpl_value_grad(problem, x)
        H = torch.autograd.functional.hessian(
            lambda p: _objective_torch(problem, p), torch.tensor(x)
        ).numpy()
        H = 0.5 * (H + H.T)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        x_new = x - step
        if pnpl_value_grad(problem, x_new)[0] > pnpl_value_grad(problem, x)[0] + 1e-15:
            break
        x = x_new
    return Pose.from_params(x)


@dataclass(frozen=True)
class PlanGradients:
    """d(loss)/d(plan entries) plus diagnostics of the Hessian solve."""

    point: np.ndarray
    line: np.ndarray
    used_gauss_newton: bool
    hessian_condition: float


def pnpl_backward(
    problem: PnplProblem,
    optimal_pose: Pose,
    upstream: np.ndarray,
    grad_check_tol: float = 1e-4,
) -> PlanGradients:
    """Implicit-function-theorem gradient of the argmin pose w.r.t. plans.

    d(pose*)/d(P_e) = -H^-1 g_e with H the 6x6 pose Hessian of the objective
    at the optimum and g_e the pose gradient of entry e's residual; the
    result is contracted withated ``upstream`` (d loss / d pose). The exact H
    comes from reverse-mode AD of the mirrored objective; when it is not
    positive definite the PSD Gauss-Newton surrogate takes over.
    """
    upstream = np.asarray(upstream, dtype=float).reshape(6)
    params = optimal_pose.params
    _, g = pnpl_value_grad(problem, params)
    scale = max(1.0, problem.total_weight)
    if np.linalg.norm(g) > grad_check_tol * scale:
        raise DomainError(
            f"pnpl_backward needs a converged optimum (|grad| = {np.linalg.norm(g):.2e})"
        )

    pose_t = torch.tensor(params)
    H = torch.autograd.functional.hessian(lambda x: _objective_torch(problem, x), pose_t).numpy()
    H = 0.5 * (H + H.T)
    used_gn = False
    eig = np.linalg.eigvalsh(H)
    if eig.min() <= 1e-12 * max(1.0, abs(eig).max()):
        H = gauss_newton_hessian(problem, params)
        H = 0.5 * (H + H.T)
        used_gn = True
    cond = float(np.linalg.cond(H))
    if not np.isfinite(cond) or cond > 1e10:
        raise DegenerateProblemError(f"pose Hessian condition number {cond:.2e}")

    w = np.linalg.solve(H, upstream)
    Gp, Gl = pnpl_pair_jacobians(problem, params)
    return PlanGradients(-(Gp @ w), -(Gl @ w), used_gn, cond)


class _PnplMeta:
    """Non-tensor context for the solve: geometry, init, configs, counters."""

    def __init__(self, geometry, init, refine_cfg, counters, constrain_line_base):
        self.geometry = geometry
        self.init = init
        self.refine_cfg = refine_cfg
        self.counters = counters
        self.constrain_line_base = constrain_line_base


class _PnplSolve(torch.autograd.Function):
    """Declarative layer: forward solves the weighted PnPL, backward applies
    the implicit gradient to the plan weight tensors."""

    @staticmethod
    def forward(ctx, Wp: torch.Tensor, Wl: torch.Tensor, meta: _PnplMeta):
        pf, pt, lf, lv, lp, ld = meta.geometry
        problem = PnplProblem(
            pf, pt, Wp.detach().numpy(),
            lf, lv, lp, ld, Wl.detach().numpy(),
            constrain_line_base=meta.constrain_line_base,
        )
        pose = weighted_pnpl(problem, meta.init, meta.refine_cfg)
        meta.counters["pose_solver_calls"] += 1
        ctx.problem = problem
        ctx.pose = pose
        ctx.meta = meta
        return torch.tensor(pose.params)

    @staticmethod
    def backward(ctx, grad_output):
        try:
            grads = pnpl_backward(ctx.problem, ctx.pose, grad_output.numpy())
        except (DegenerateProblemError, DomainError):
            ctx.meta.counters["degenerate_skips"] += 1
            return (
                torch.zeros(ctx.problem.point_weights.shape, dtype=grad_output.dtype),
                torch.zeros(ctx.problem.line_weights.shape, dtype=grad_output.dtype),
                None,
            )
        if grads.used_gauss_newton:
            ctx.meta.counters["gn_fallbacks"] += 1
        return torch.as_tensor(grads.point), torch.as_tensor(grads.line), None


def pose_loss_torch(pose6: torch.Tensor, gt: Pose) -> torch.Tensor:
    R = rotation_exp_torch(pose6[:3])
    R_gt = torch.tensor(gt.R)
    cos = ((R_gt.T @ R).diagonal().sum() - 1.0) / 2.0
    # clamp strictly inside [-1, 1]: arccos has infinite slope at the ends
    angle = torch.arccos(torch.clamp(cos, -1.0 + 1e-12, 1.0 - 1e-12))
    return angle + (pose6[3:] - torch.tensor(np.asarray(gt.t))).norm()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    """Loss weighting and optimization schedule.

    ``warmup_epochs`` run with the pose loss off; afterwards it enters with
    multiplier ``gamma_p``. The remaining knobs parameterize the in-loop
    matcher and pose search.
    """

    gamma_p: float = 1.0
    warmup_epochs: int = 120
    learning_rate: float = 5e-4
    batch_size: int = 12
    epochs: int = 200
    sinkhorn_mu: float = 0.1
    sinkhorn_iters: int = 100
    top_k: int = 50
    grad_clip_norm: float = 10.0
    ransac: RansacConfig = field(default_factory=RansacConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    constrain_line_base: bool = False

    def __post_init__(self):
        if self.gamma_p < 0:
            raise DomainError("gamma_p must be non-negative")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise DomainError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise DomainError("batch size must be positive")


@dataclass
class EpochStats:
    epoch: int
    gamma_p: float
    mean_lc: float
    mean_lp: float
    mean_total: float
    pose_solver_calls: int
    gn_fallbacks: int
    degenerate_skips: int
    per_pair: list = field(default_factory=list)


def _pair_indices(pair):
    is_line_2d = np.array([e.is_line for e in pair.elements2d])
    is_line_3d = np.array([e.is_line for e in pair.submap.elements])
    return (
        np.nonzero(~is_line_2d)[0],
        np.nonzero(~is_line_3d)[0],
        np.nonzero(is_line_2d)[0],
        np.nonzero(is_line_3d)[0],
    )


def _pair_geometry(pair):
    F = np.stack([e.bearing.vec for e in pair.elements2d])
    D2 = np.stack([e.direction for e in pair.elements2d])
    P = pair.submap.points()
    D3 = np.stack([e.direction for e in pair.submap.elements])
    p_rows, p_cols, l_rows, l_cols = _pair_indices(pair)
    return (
        F[p_rows], P[p_cols], F[l_rows], D2[l_rows], P[l_cols], D3[l_cols],
    ), (p_rows, p_cols, l_rows, l_cols)


def pair_forward(
    pair,
    weights: EncoderWeights,
    cfg: LossConfig,
    gamma: float,
    counters: dict,
    coarse_init: Pose | None = None,
):
    """Differentiable loss of one scene pair given live weight tensors.

    Returns (lc tensor, lp tensor or None). ``coarse_init`` overrides the
    RANSAC initializer (used by gradient tests that hold it constant).
    """
    econf = weights.config
    x2 = input_matrix(pair.elements2d)
    x3 = input_matrix(pair.submap.elements, origin=pair.submap.origin)
    idx2 = knn_graph(x2, econf.k)
    idx3 = knn_graph(x3, econf.k)
    z2 = forward_stream(torch.tensor(x2), idx2, weights.stream_tensors("2d"), econf)
    z3 = forward_stream(torch.tensor(x3), idx3, weights.stream_tensors("3d"), econf)

    cls2 = np.array([e.class_id for e in pair.elements2d])
    cls3 = np.array([e.class_id for e in pair.submap.elements])
    C = pair.gt_correspondence

    lc = z2.new_zeros(())
    branch_plans: list[tuple[int, np.ndarray, np.ndarray, torch.Tensor]] = []
    for cid in sorted(set(cls2.tolist()) | set(cls3.tolist())):
        rows = np.nonzero(cls2 == cid)[0]
        cols = np.nonzero(cls3 == cid)[0]
        if len(rows) == 0 or len(cols) == 0:
            continue
        M = cost_matrix_torch(z2[rows], z3[cols])
        P_t = sinkhorn_iterations_torch(
            M,
            torch.full((len(rows),), 1.0 / len(rows), dtype=M.dtype),
            torch.full((len(cols),), 1.0 / len(cols), dtype=M.dtype),
            cfg.sinkhorn_mu,
            cfg.sinkhorn_iters,
        )
        Cb = torch.as_tensor(C[np.ix_(rows, cols)].astype(float))
        lc = lc + ((1.0 - 2.0 * Cb) * P_t).sum()
        branch_plans.append((cid, rows, cols, P_t))

    if gamma == 0.0 or not branch_plans:
        return lc, None

    # coarse pose from the detached plans
    branches = tuple(
        Branch(
            cid,
            rows,
            cols,
            TransportPlan(
                P_t.detach().numpy(),
                np.full(len(rows), 1.0 / len(rows)),
                np.full(len(cols), 1.0 / len(cols)),
                cfg.sinkhorn_mu,
                cfg.sinkhorn_iters,
                0.0,
                True,
            ),
        )
        for cid, rows, cols, P_t in branch_plans
    )
    if coarse_init is None:
        try:
            matches = prioritized_matches(BranchedPlans(branches), cfg.top_k)
            coarse = ransac_p3p(matches, pair.elements2d, pair.submap, cfg.ransac)
            counters["ransac_calls"] += 1
        except (InsufficientElementsError, SemlocError):
            counters["coarse_failures"] += 1
            return lc, None
        if coarse.low_confidence:
            # a junk initializer makes the inner argmin (and its implicit
            # gradient) meaningless; the pair trains on the correspondence
            # loss alone until the matcher warms up
            counters["coarse_failures"] += 1
            return lc, None
        init = coarse.pose
    else:
        init = coarse_init

    geometry, (p_rows, p_cols, l_rows, l_cols) = _pair_geometry(pair)
    row_of = {int(r): k for k, r in enumerate(p_rows)}
    col_of = {int(c): k for k, c in enumerate(p_cols)}
    lrow_of = {int(r): k for k, r in enumerate(l_rows)}
    lcol_of = {int(c): k for k, c in enumerate(l_cols)}

    Wp = z2.new_zeros((len(p_rows), len(p_cols)))
    Wl = z2.new_zeros((len(l_rows), len(l_cols)))
    for cid, rows, cols, P_t in branch_plans:
        if pair.elements2d[rows[0]].is_line:
            r_idx = torch.tensor([lrow_of[int(r)] for r in rows])
            c_idx = torch.tensor([lcol_of[int(c)] for c in cols])
            Wl = Wl.index_put((r_idx.unsqueeze(1), c_idx.unsqueeze(0)), P_t)
        else:
            r_idx = torch.tensor([row_of[int(r)] for r in rows])
            c_idx = torch.tensor([col_of[int(c)] for c in cols])
            Wp = Wp.index_put((r_idx.unsqueeze(1), c_idx.unsqueeze(0)), P_t)

    meta = _PnplMeta(geometry, init, cfg.refine, counters, cfg.constrain_line_base)
    pose6 = _PnplSolve.apply(Wp, Wl, meta)
    lp = pose_loss_torch(pose6, pair.gt_pose)
    return lc, lp


def _new_counters() -> dict:
    return {
        "pose_solver_calls": 0,
        "ransac_calls": 0,
        "gn_fallbacks": 0,
        "degenerate_skips": 0,
        "coarse_failures": 0,
    }


def train(
    dataset,
    weights: EncoderWeights,
    cfg: LossConfig,
    seed: int = 0,
) -> tuple[EncoderWeights, list[EpochStats]]:
    """Two-phase Adam training; deterministic given (dataset, weights, seed).

    Warm-up epochs run the correspondence loss alone; afterwards the pose
    loss joins with multiplier ``gamma_p``. Pairs whose coarse stage fails
    contribute the correspondence term only (counted in the epoch stats).
    """
    dataset = list(dataset)
    if not dataset:
        raise DomainError("training dataset is empty")
    for pair in dataset:
        if len(pair.elements2d) < 4:
            raise DomainError("every training pair needs at least 4 elements")

    live = weights.clone(requires_grad=True)
    params = list(live.tensors.values())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    history: list[EpochStats] = []

    for epoch in range(cfg.epochs):
        gamma = 0.0 if epoch < cfg.warmup_epochs else cfg.gamma_p
        order = np.random.default_rng((seed, epoch)).permutation(len(dataset))
        counters = _new_counters()
        per_pair: list[tuple[float, float]] = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            losses = []
            for k in batch:
                lc, lp = pair_forward(dataset[k], live, cfg, gamma, counters)
                lp_val = float(lp.item()) if lp is not None else 0.0
                per_pair.append((float(lc.item()), lp_val))
                loss = lc if lp is None else lc + gamma * lp
                losses.append(loss)
            torch.stack(losses).mean().backward()
            if cfg.grad_clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
            optimizer.step()
        lc_arr = np.array([p[0] for p in per_pair])
        lp_arr = np.array([p[1] for p in per_pair])
        history.append(
            EpochStats(
                epoch=epoch,
                gamma_p=gamma,
                mean_lc=float(lc_arr.mean()),
                mean_lp=float(lp_arr.mean()),
                mean_total=float((lc_arr + gamma * lp_arr).mean()),
                pose_solver_calls=counters["pose_solver_calls"],
                gn_fallbacks=counters["gn_fallbacks"],
                degenerate_skips=counters["degenerate_skips"],
                per_pair=per_pair,
            )
        )
    return live.clone(requires_grad=False), history
