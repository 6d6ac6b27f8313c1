"""Entropic optimal-transport matching of 2D and 3D element embeddings.

Matching runs per semantic branch: elements are partitioned by class, each
branch gets its own cost matrix and Sinkhorn solve with uniform priors, and
the branch plans flatten into one prioritized candidate list for the pose
search.

Sinkhorn iterates in the log domain (mu around 0.1 underflows the naive
scaling form) and the backward pass differentiates through the unrolled
iterations recorded at forward time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoder import EmbeddingSet, cost_matrix, cost_matrix_torch
from .errors import DomainError, InsufficientMatchesError

DEFAULT_MU = 0.1
DEFAULT_MAX_ITER = 100
DEFAULT_TOL = 1e-9


@dataclass
class TransportPlan:
    """Converged (or flagged) transport plan with its priors and parameters.

    ``iterations`` counts the scaling sweeps actually run (the unrolled
    backward replays exactly these); ``polished`` marks plans finished by the
    dual-space Newton refiner instead of pure scaling.
    """

    matrix: np.ndarray
    row_prior: np.ndarray
    col_prior: np.ndarray
    mu: float
    iterations: int
    marginal_violation: float
    converged: bool
    polished: bool = False

    @property
    def shape(self):
        return self.matrix.shape


def sinkhorn_iterations_torch(
    M: torch.Tensor, r: torch.Tensor, s: torch.Tensor, mu: float, n_iter: int
) -> torch.Tensor:
    """Fixed-count log-domain Sinkhorn updates; differentiable in M."""
    log_r = torch.log(r)
    log_s = torch.log(s)
    g = torch.zeros_like(s)
    f = torch.zeros_like(r)
    for _ in range(n_iter):
        f = mu * (log_r - torch.logsumexp((g.unsqueeze(0) - M) / mu, dim=1))
        g = mu * (log_s - torch.logsumexp((f.unsqueeze(1) - M) / mu, dim=0))
    return torch.exp((f.unsqueeze(1) + g.unsqueeze(0) - M) / mu)


def _marginal_violation(P: torch.Tensor, r: torch.Tensor, s: torch.Tensor) -> float:
    return max(
        float((P.sum(dim=1) - r).abs().max()),
        float((P.sum(dim=0) - s).abs().max()),
    )


def _newton_polish(M, r, s, f, g, mu, tol, max_steps=30):
    """Newton refinement of the Sinkhorn duals (same fixed point).

    Plain alternating scaling contracts at the Birkhoff rate of the kernel,
    which approaches 1 when mu is far below the cost spread; for tight
    marginal tolerances on such instances the tail takes millions of sweeps.
    Newton on the dual residual [P1 - r, P^T 1 - s] converges quadratically
    from the scaling warm start and returns duals of the identical scaling
    form. The gauge null-space (constant shift f+c, g-c) is handled by the
    minimum-norm least-squares step.
    """
    m, n = M.shape

    def plan_of(fv, gv):
        # exponent clamp: entries above e^60 are infeasible by orders of
        # magnitude anyway and would otherwise overflow to inf
        return np.exp(np.minimum((fv[:, None] + gv[None, :] - M) / mu, 60.0))

    def residual_of(P):
        return np.concatenate([P.sum(axis=1) - r, P.sum(axis=0) - s])

    for _ in range(max_steps):
        P = plan_of(f, g)
        a = P.sum(axis=1)
        b = P.sum(axis=0)
        res = residual_of(P)
        viol = float(np.abs(res).max())
        if viol < tol:
            return f, g, P, viol
        J = np.zeros((m + n, m + n))
        J[:m, :m] = np.diag(a)
        J[:m, m:] = P
        J[m:, :m] = P.T
        J[m:, m:] = np.diag(b)
        J /= mu
        try:
            dx = np.linalg.lstsq(J, -res, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        # damped step: keep the dual residual non-increasing
        step = 1.0
        accepted = False
        for _ in range(25):
            res_new = residual_of(plan_of(f + step * dx[:m], g + step * dx[m:]))
            if np.isfinite(res_new).all() and np.abs(res_new).max() <= viol:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        f, g = f + step * dx[:m], g + step * dx[m:]
    P = plan_of(f, g)
    viol = float(np.abs(residual_of(P)).max())
    return f, g, P, viol


def sinkhorn(
    M: np.ndarray,
    r: np.ndarray,
    s: np.ndarray,
    mu: float = DEFAULT_MU,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    polish: bool = False,
) -> TransportPlan:
    """Solve the entropy-regularized transport problem over U(r, s).

    Alternating row/column scaling until the worst marginal violation drops
    below ``tol`` or ``max_iter`` is reached; a non-converged plan is returned
    flagged with the achieved violation. With ``polish=True`` a dual-space
    Newton refiner finishes plans the scaling budget could not converge (see
    :func:`_newton_polish`); the differentiable path never polishes.
    """
    M = np.asarray(M, dtype=float)
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if mu <= 0:
        raise DomainError("entropy parameter mu must be positive")
    if not np.isfinite(M).all():
        raise DomainError("cost matrix must be finite")
    if M.shape != (len(r), len(s)):
        raise DomainError("prior lengths must match the cost matrix shape")
    if M.size == 0:
        return TransportPlan(np.zeros(M.shape), r, s, mu, 0, 0.0, True)
    if np.any(r <= 0) or np.any(s <= 0):
        raise DomainError("priors must be strictly positive")
    if abs(r.sum() - 1.0) > 1e-8 or abs(s.sum() - 1.0) > 1e-8:
        raise DomainError("priors must each sum to 1")

    M_t = torch.tensor(M)
    r_t = torch.tensor(r)
    s_t = torch.tensor(s)
    log_r = torch.log(r_t)
    log_s = torch.log(s_t)
    f = torch.zeros_like(r_t)
    g = torch.zeros_like(s_t)
    violation = np.inf
    iterations = 0
    with torch.no_grad():
        for it in range(1, max_iter + 1):
            f = mu * (log_r - torch.logsumexp((g.unsqueeze(0) - M_t) / mu, dim=1))
            g = mu * (log_s - torch.logsumexp((f.unsqueeze(1) - M_t) / mu, dim=0))
            P = torch.exp((f.unsqueeze(1) + g.unsqueeze(0) - M_t) / mu)
            violation = _marginal_violation(P, r_t, s_t)
            iterations = it
            if violation < tol:
                break
    P_np = P.numpy()
    polished = False
    if polish and violation >= tol:
        _, _, P_pol, viol_pol = _newton_polish(M, r, s, f.numpy(), g.numpy(), mu, tol)
        if np.isfinite(P_pol).all() and viol_pol < violation:
            P_np, violation, polished = P_pol, viol_pol, True
    return TransportPlan(
        P_np, r, s, mu, iterations, float(violation), bool(violation < tol), polished
    )


def sinkhorn_backward(plan: TransportPlan, M: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of the converged plan w.r.t. the cost matrix.

    Reverse-mode through the unrolled scaling iterations, replaying exactly
    the iteration count recorded at forward time.
    """
    if not plan.converged:
        raise DomainError("sinkhorn_backward requires a converged forward plan")
    if plan.polished:
        raise DomainError("polished plans were not produced by pure scaling; cannot unroll")
    M = np.asarray(M, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != plan.matrix.shape or M.shape != plan.matrix.shape:
        raise DomainError("upstream gradient and cost matrix must match the plan shape")
    if M.size == 0 or plan.iterations == 0:
        return np.zeros_like(M)
    M_t = torch.tensor(M, requires_grad=True)
    P = sinkhorn_iterations_torch(
        M_t, torch.tensor(plan.row_prior), torch.tensor(plan.col_prior), plan.mu, plan.iterations
    )
    (grad,) = torch.autograd.grad(P, M_t, grad_outputs=torch.tensor(upstream))
    return grad.numpy()


@dataclass(frozen=True)
class Branch:
    """One semantic branch: global element indices plus its transport plan."""

    class_id: int
    idx_2d: np.ndarray
    idx_3d: np.ndarray
    plan: TransportPlan


@dataclass(frozen=True)
class BranchedPlans:
    branches: tuple[Branch, ...]

    def branch_for(self, class_id: int):
        for b in self.branches:
            if b.class_id == class_id:
                return b
        return None


def match_branches(
    zf: EmbeddingSet,
    zp: EmbeddingSet,
    mu: float = DEFAULT_MU,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    polish: bool = True,
) -> BranchedPlans:
    """Partition by class, solve one uniform-prior transport plan per branch.

    Classes missing on either side yield an empty branch that emits no
    matches. Inference polishes by default; the training loop differentiates
    its own unpolished graph instead of calling this.
    """
    class_ids = sorted(set(zf.class_ids.tolist()) | set(zp.class_ids.tolist()))
    branches = []
    for cid in class_ids:
        i2 = np.nonzero(zf.class_ids == cid)[0]
        i3 = np.nonzero(zp.class_ids == cid)[0]
        m, n = len(i2), len(i3)
        if m == 0 or n == 0:
            plan = TransportPlan(np.zeros((m, n)), np.zeros(m), np.zeros(n), mu, 0, 0.0, True)
        else:
            sub_f = EmbeddingSet(zf.vectors[i2], zf.class_ids[i2])
            sub_p = EmbeddingSet(zp.vectors[i3], zp.class_ids[i3])
            plan = sinkhorn(
                cost_matrix(sub_f, sub_p),
                np.full(m, 1.0 / m),
                np.full(n, 1.0 / n),
                mu,
                max_iter,
                tol,
                polish=polish,
            )
        branches.append(Branch(int(cid), i2, i3, plan))
    return BranchedPlans(tuple(branches))


@dataclass(frozen=True)
class MatchList:
    """Candidate correspondences sorted by decreasing probability.

    Ties break by (2D index, 3D index) ascending, so the order is a pure
    function of the plans.
    """

    idx_2d: np.ndarray
    idx_3d: np.ndarray
    prob: np.ndarray

    def __post_init__(self):
        if not (len(self.idx_2d) == len(self.idx_3d) == len(self.prob)):
            raise DomainError("match list columns must have equal length")
        if np.any(np.diff(self.prob) > 0):
            raise DomainError("match list must be sorted by non-increasing probability")

    def __len__(self) -> int:
        return len(self.prob)


def prioritized_matches(plans: BranchedPlans, top_k: int = 50) -> MatchList:
    """Flatten branch plans into the global Top-K prioritized match list."""
    if top_k < 4:
        raise DomainError("top_k must be at least 4")
    rows_i: list[int] = []
    rows_j: list[int] = []
    rows_p: list[float] = []
    for b in plans.branches:
        m, n = b.plan.shape
        for bi in range(m):
            for bj in range(n):
                rows_i.append(int(b.idx_2d[bi]))
                rows_j.append(int(b.idx_3d[bj]))
                rows_p.append(float(b.plan.matrix[bi, bj]))
    if len(rows_p) < 4:
        raise InsufficientMatchesError(
            f"only {len(rows_p)} candidate pairs; pose search needs at least 4"
        )
    order = sorted(range(len(rows_p)), key=lambda k: (-rows_p[k], rows_i[k], rows_j[k]))
    order = order[:top_k]
    return MatchList(
        np.array([rows_i[k] for k in order]),
        np.array([rows_j[k] for k in order]),
        np.array([rows_p[k] for k in order]),
    )
