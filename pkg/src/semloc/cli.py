"""Pipeline orchestration, evaluation metrics, and the command-line surface.

Subcommands: synth | map-build | train | localize | eval | plot-data.
Every subcommand is deterministic under fixed seeds and configs. Exit codes:
0 success, 2 insufficient elements, 3 degenerate geometry, 4 config errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import formats
from .elements import DEFAULT_SCHEMA, ClassSchema, SubMap, crop_submap
from .encoder import EncoderConfig, EncoderWeights, encode, init_weights
from .errors import (
    ConfigError,
    DegenerateGeometryError,
    DomainError,
    InsufficientElementsError,
    SemlocError,
)
from .geometry import Pose, geodesic_angle
from .learning import LossConfig, train
from .mapping import ClusterConfig, deduplicate, triangulate
from .matcher import BranchedPlans, match_branches, prioritized_matches
from .pose import (
    PnplProblem,
    RansacConfig,
    RefineConfig,
    direct_pnpl,
    p3p,
    pnpl_value_grad,
    ransac_p3p,
    weighted_pnpl,
)
from .synthetic import (
    DEFAULT_INTRINSICS,
    DatasetConfig,
    NoiseConfig,
    SceneConfig,
)

CONFIG_ENV_VAR = "SEMLOC_CONFIG"


@dataclass(frozen=True)
class LocalizeConfig:
    """End-to-end pipeline parameters; field names mirror the CLI flags."""

    crop_radius: float = 20.0
    sinkhorn_mu: float = 0.1
    sinkhorn_iters: int = 100
    theta: float = 0.003
    max_iterations: int = 1000
    top_k: int = 50
    min_inlier_rate: float = 0.3
    weighted_sampling: bool = False
    allow_direct: bool = True
    # "plan": refine on the full transport plans (paper pipeline);
    # "inlier_masked": zero plan entries outside the coarse inlier matches.
    refine_weights: str = "plan"
    constrain_line_base: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.refine_weights not in ("plan", "inlier_masked"):
            raise ConfigError("refine_weights must be 'plan' or 'inlier_masked'")
        for name in ("crop_radius", "sinkhorn_mu", "theta"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def ransac(self) -> RansacConfig:
        return RansacConfig(
            theta=self.theta,
            max_iterations=self.max_iterations,
            top_k=self.top_k,
            seed=self.seed,
            min_inlier_rate=self.min_inlier_rate,
            weighted_sampling=self.weighted_sampling,
        )


def _split_indices(elements2d, submap):
    is_line_2d = np.array([e.is_line for e in elements2d])
    is_line_3d = np.array([e.is_line for e in submap.elements]) if len(submap) else np.zeros(0, bool)
    return (
        np.nonzero(~is_line_2d)[0],
        np.nonzero(~is_line_3d)[0],
        np.nonzero(is_line_2d)[0],
        np.nonzero(is_line_3d)[0],
    )


def _geometry_arrays(elements2d, submap):
    F = np.stack([e.bearing.vec for e in elements2d])
    D2 = np.stack([e.direction for e in elements2d])
    P = submap.points()
    D3 = np.stack([e.direction for e in submap.elements]) if len(submap) else np.zeros((0, 3))
    return F, D2, P, D3


def _assemble_problem(elements2d, submap, weight_of, cfg: LocalizeConfig) -> PnplProblem:
    """Build the PnPL problem with weights provided by ``weight_of(i, j)``."""
    p_rows, p_cols, l_rows, l_cols = _split_indices(elements2d, submap)
    F, D2, P, D3 = _geometry_arrays(elements2d, submap)
    Wp = np.zeros((len(p_rows), len(p_cols)))
    for a, i in enumerate(p_rows):
        for b, j in enumerate(p_cols):
            Wp[a, b] = weight_of(int(i), int(j))
    Wl = np.zeros((len(l_rows), len(l_cols)))
    for a, i in enumerate(l_rows):
        for b, j in enumerate(l_cols):
            Wl[a, b] = weight_of(int(i), int(j))
    return PnplProblem(
        F[p_rows], P[p_cols], Wp,
        F[l_rows], D2[l_rows], P[l_cols], D3[l_cols], Wl,
        constrain_line_base=cfg.constrain_line_base,
    )


def _direct_pairs(elements2d, submap):
    """Class-unique matching: within every class both sides have <= 1 element."""
    cls2 = np.array([e.class_id for e in elements2d])
    cls3 = np.array([e.class_id for e in submap.elements]) if len(submap) else np.zeros(0, int)
    pairs = []
    for cid in sorted(set(cls2.tolist()) | set(cls3.tolist())):
        i2 = np.nonzero(cls2 == cid)[0]
        i3 = np.nonzero(cls3 == cid)[0]
        if len(i2) > 1 or len(i3) > 1:
            return None
        if len(i2) == 1 and len(i3) == 1:
            pairs.append((int(i2[0]), int(i3[0])))
    return pairs


def _coarse_from_point_pairs(elements2d, submap, pairs, problem) -> Pose:
    """Initialize the direct path: P3P over known pairs, ranked by objective."""
    F, _, P, _ = _geometry_arrays(elements2d, submap)
    pts = [(F[i], P[j]) for i, j in pairs]
    best = Pose.identity()
    best_val = pnpl_value_grad(problem, best.params)[0]
    n = len(pts)
    for a in range(n):
        for b in range(a + 1, n):
            for c in range(b + 1, n):
                cand = p3p(
                    np.stack([pts[a][0], pts[b][0], pts[c][0]]),
                    np.stack([pts[a][1], pts[b][1], pts[c][1]]),
                )
                for pose in cand:
                    val = pnpl_value_grad(problem, pose.params)[0]
                    if val < best_val:
                        best, best_val = pose, val
    return best


def localize(
    elements2d,
    map_or_submap,
    weights: EncoderWeights,
    cfg: LocalizeConfig = LocalizeConfig(),
    gps_prior=None,
) -> tuple[Pose, dict]:
    """Full pipeline for one frame: crop, match, coarse search, refinement.

    ``map_or_submap`` is either a SubMap (used as-is) or an element list that
    gets cropped around ``gps_prior``. Returns the pose plus diagnostics
    (path taken, branch sizes, inlier rate, iteration counts).
    """
    if len(elements2d) < 4:
        raise InsufficientElementsError(
            f"pose estimation requires at least four 2D elements, got {len(elements2d)}"
        )
    if isinstance(map_or_submap, SubMap):
        submap = map_or_submap
    else:
        if gps_prior is None:
            raise ConfigError("cropping a full map requires a GPS prior")
        submap = crop_submap(map_or_submap, gps_prior, cfg.crop_radius)

    cls2 = np.array([e.class_id for e in elements2d])
    cls3 = np.array([e.class_id for e in submap.elements]) if len(submap) else np.zeros(0, int)
    branch_sizes = {
        int(c): (int((cls2 == c).sum()), int((cls3 == c).sum()))
        for c in sorted(set(cls2.tolist()) | set(cls3.tolist()))
    }
    diagnostics: dict = {"branch_sizes": branch_sizes, "n_2d": len(elements2d), "n_3d": len(submap)}

    pairs = _direct_pairs(elements2d, submap) if cfg.allow_direct else None
    if pairs is not None and len(pairs) >= 4:
        diagnostics["path"] = "direct"
        lookup = {(i, j): 1.0 for i, j in pairs}
        problem = _assemble_problem(
            elements2d, submap, lambda i, j: lookup.get((i, j), 0.0), cfg
        )
        init = _coarse_from_point_pairs(elements2d, submap, pairs, problem)
        pose = direct_pnpl(problem, init, RefineConfig())
        diagnostics["n_correspondences"] = len(pairs)
        return pose, diagnostics

    diagnostics["path"] = "weighted"
    zf = encode(elements2d, weights, "2d")
    zp = encode(submap.elements, weights, "3d", origin=submap.origin)
    plans = match_branches(zf, zp, mu=cfg.sinkhorn_mu, max_iter=cfg.sinkhorn_iters)
    matches = prioritized_matches(plans, cfg.top_k)
    coarse = ransac_p3p(matches, elements2d, submap, cfg.ransac())
    diagnostics["inlier_rate"] = coarse.inlier_rate
    diagnostics["low_confidence"] = coarse.low_confidence
    diagnostics["ransac_iterations"] = coarse.iterations
    diagnostics["n_matches"] = len(matches)

    plan_of = {}
    for b in plans.branches:
        for bi, i in enumerate(b.idx_2d):
            for bj, j in enumerate(b.idx_3d):
                plan_of[(int(i), int(j))] = float(b.plan.matrix[bi, bj])
    if cfg.refine_weights == "inlier_masked":
        kept = {
            (int(matches.idx_2d[k]), int(matches.idx_3d[k]))
            for k in coarse.inlier_indices
        }
        weight_of = lambda i, j: plan_of.get((i, j), 0.0) if (i, j) in kept else 0.0
    else:
        weight_of = lambda i, j: plan_of.get((i, j), 0.0)
    problem = _assemble_problem(elements2d, submap, weight_of, cfg)
    pose = weighted_pnpl(problem, coarse.pose, RefineConfig())
    return pose, diagnostics


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalSummary:
    rte: np.ndarray
    rre: np.ndarray
    rte_mean: float
    rte_q1: float
    rte_q2: float
    rte_q3: float
    rre_mean: float
    rre_q1: float
    rre_q2: float
    rre_q3: float
    frac_rte_under_1m: float
    frac_rre_under_1deg: float
    rte_hist: np.ndarray
    rte_bin_edges: np.ndarray
    rre_hist: np.ndarray
    rre_bin_edges: np.ndarray

    def to_obj(self) -> dict:
        return {
            "version": formats.FORMAT_VERSION,
            "kind": "eval-summary",
            "n_frames": len(self.rte),
            "rte_m": {
                "mean": self.rte_mean,
                "q1": self.rte_q1,
                "q2": self.rte_q2,
                "q3": self.rte_q3,
                "frac_under_1m": self.frac_rte_under_1m,
                "per_frame": self.rte,
                "hist_counts": self.rte_hist.astype(int),
                "hist_edges": self.rte_bin_edges,
            },
            "rre_deg": {
                "mean": self.rre_mean,
                "q1": self.rre_q1,
                "q2": self.rre_q2,
                "q3": self.rre_q3,
                "frac_under_1deg": self.frac_rre_under_1deg,
                "per_frame": self.rre,
                "hist_counts": self.rre_hist.astype(int),
                "hist_edges": self.rre_bin_edges,
            },
        }


def evaluate(estimates, ground_truth, rte_bin: float = 0.1, rre_bin: float = 0.1) -> EvalSummary:
    """Per-frame RTE (m) and RRE (deg) with quartiles and histograms.

    RTE is the Euclidean distance between translations; RRE the geodesic
    rotation angle in degrees; quartiles use linear interpolation.
    """
    if len(estimates) != len(ground_truth):
        raise DomainError("estimate and ground-truth sequences must have equal length")
    if len(estimates) == 0:
        raise DomainError("nothing to evaluate")
    rte = np.array([float(np.linalg.norm(e.t - g.t)) for e, g in zip(estimates, ground_truth)])
    rre = np.array(
        [math.degrees(geodesic_angle(g.R, e.R)) for e, g in zip(estimates, ground_truth)]
    )

    def hist(values, width):
        top = max(width, float(values.max()))
        edges = np.arange(0.0, top + width, width)
        counts, edges = np.histogram(values, bins=edges)
        return counts, edges

    rte_hist, rte_edges = hist(rte, rte_bin)
    rre_hist, rre_edges = hist(rre, rre_bin)
    q = lambda v, p: float(np.percentile(v, p))
    return EvalSummary(
        rte=rte,
        rre=rre,
        rte_mean=float(rte.mean()),
        rte_q1=q(rte, 25),
        rte_q2=q(rte, 50),
        rte_q3=q(rte, 75),
        rre_mean=float(rre.mean()),
        rre_q1=q(rre, 25),
        rre_q2=q(rre, 50),
        rre_q3=q(rre, 75),
        frac_rte_under_1m=float((rte < 1.0).mean()),
        frac_rre_under_1deg=float((rre < 1.0).mean()),
        rte_hist=rte_hist,
        rte_bin_edges=rte_edges,
        rre_hist=rre_hist,
        rre_bin_edges=rre_edges,
    )


def localize_dataset(pairs, weights: EncoderWeights, cfg: LocalizeConfig):
    """Batch localization; failures yield an identity pose and a note."""
    poses, diags = [], []
    for k, pair in enumerate(pairs):
        frame_cfg = replace(cfg, seed=cfg.seed + k)
        try:
            pose, diag = localize(pair.elements2d, pair.submap, weights, frame_cfg)
        except SemlocError as exc:
            pose, diag = Pose.identity(), {"path": "failed", "error": str(exc)}
        poses.append(pose)
        diags.append(diag)
    return poses, diags


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------


def _env_defaults() -> dict:
    path = os.environ.get(CONFIG_ENV_VAR)
    if not path:
        return {}
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    return obj


def _localize_config_from_args(args) -> LocalizeConfig:
    base = {k: v for k, v in _env_defaults().items() if hasattr(LocalizeConfig, k)}
    cfg = LocalizeConfig(**base)
    overrides = {}
    for name in (
        "crop_radius",
        "sinkhorn_mu",
        "theta",
        "max_iterations",
        "top_k",
        "min_inlier_rate",
        "refine_weights",
        "seed",
    ):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "no_direct", False):
        overrides["allow_direct"] = False
    if getattr(args, "weighted_sampling", False):
        overrides["weighted_sampling"] = True
    if getattr(args, "constrain_line_base", False):
        overrides["constrain_line_base"] = True
    return replace(cfg, **overrides) if overrides else cfg


def _cmd_synth(args) -> int:
    noise = NoiseConfig(
        pixel_sigma=args.pixel_sigma,
        dropout_rate=args.dropout_rate,
        outlier_rate_2d=args.outlier_rate_2d,
        clutter_rate_3d=args.clutter_rate_3d,
    )
    cfg = DatasetConfig(
        n_frames=args.frames,
        scene=SceneConfig(
            n_poles=args.n_poles,
            n_signs=args.n_signs,
            area_extent=args.extent,
        ),
        noise=noise,
        crop_radius=args.crop_radius,
        max_yaw=math.radians(args.max_yaw_deg),
        max_translation=args.max_translation,
        seed=args.seed,
    )
    from .synthetic import make_dataset

    pairs = make_dataset(cfg)
    formats.write_dataset(args.out, pairs, DEFAULT_SCHEMA)
    print(f"wrote {len(pairs)} frames to {args.out}")
    return 0


def _cmd_map_build(args) -> int:
    observations, schema = formats.read_stereo_observations(args.observations)
    elements = [triangulate(o) for o in observations]
    deduped = deduplicate(elements, ClusterConfig(eps=args.eps, min_pts=args.min_pts))
    formats.write_map(args.out, deduped, schema)
    print(f"triangulated {len(elements)} elements, {len(deduped)} after de-duplication")
    return 0


def _cmd_train(args) -> int:
    pairs, schema = formats.read_dataset(args.dataset)
    if args.init_weights:
        weights = formats.read_weights(args.init_weights)
    else:
        enc = EncoderConfig(
            n_classes=schema.n_classes, dim=args.dim, blocks=args.blocks, k=args.k
        )
        weights = init_weights(enc, seed=args.seed)
    cfg = LossConfig(
        gamma_p=args.gamma_p,
        warmup_epochs=args.warmup_epochs,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        epochs=args.epochs,
        ransac=RansacConfig(seed=args.seed, max_iterations=args.ransac_iterations),
    )
    trained, history = train(pairs, weights, cfg, seed=args.seed)
    formats.write_weights(args.out, trained)
    if args.history:
        formats.write_history_csv(args.history, history)
    if history:
        print(
            f"trained {cfg.epochs} epochs: mean lc {history[0].mean_lc:.4f} -> {history[-1].mean_lc:.4f}"
        )
    else:
        print("trained 0 epochs: weights passed through")
    return 0


def _cmd_localize(args) -> int:
    cfg = _localize_config_from_args(args)
    weights = formats.read_weights(args.weights)
    if args.dataset:
        pairs, _ = formats.read_dataset(args.dataset)
        poses, diags = localize_dataset(pairs, weights, cfg)
        formats.write_poses(args.out, poses, diagnostics=diags)
        failed = sum(1 for d in diags if d.get("path") == "failed")
        print(f"localized {len(poses)} frames ({failed} failures) -> {args.out}")
        return 0
    elements, _ = formats.read_elements2d(args.elements)
    map_elements, _ = formats.read_map(args.map)
    pose, diag = localize(elements, map_elements, weights, cfg, gps_prior=args.gps)
    formats.write_poses(args.out, [pose], diagnostics=[diag])
    print(f"localized via {diag['path']} path -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    estimates = formats.read_poses(args.estimates)
    if args.dataset:
        pairs, _ = formats.read_dataset(args.dataset)
        gts = [p.gt_pose for p in pairs]
    else:
        gts = formats.read_poses(args.gt)
    summary = evaluate(estimates, gts, rte_bin=args.rte_bin, rre_bin=args.rre_bin)
    with open(args.out, "w") as fh:
        fh.write(formats.canonical_json(summary.to_obj()) + "\n")
    print(
        "RTE m: mean {:.3f} q1 {:.3f} q2 {:.3f} q3 {:.3f} | under 1 m: {:.1%}".format(
            summary.rte_mean, summary.rte_q1, summary.rte_q2, summary.rte_q3, summary.frac_rte_under_1m
        )
    )
    print(
        "RRE deg: mean {:.3f} q1 {:.3f} q2 {:.3f} q3 {:.3f} | under 1 deg: {:.1%}".format(
            summary.rre_mean, summary.rre_q1, summary.rre_q2, summary.rre_q3, summary.frac_rre_under_1deg
        )
    )
    return 0


def _cmd_plot_data(args) -> int:
    with open(args.summary) as fh:
        obj = json.load(fh)
    formats.check_version(obj, "eval-summary")

    class _S:
        pass

    s = _S()
    s.rte_hist = np.asarray(obj["rte_m"]["hist_counts"])
    s.rte_bin_edges = np.asarray(obj["rte_m"]["hist_edges"])
    s.rre_hist = np.asarray(obj["rre_deg"]["hist_counts"])
    s.rre_bin_edges = np.asarray(obj["rre_deg"]["hist_edges"])
    formats.write_histogram_csv(args.out, s)
    print(f"wrote histogram data -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semloc", description="Blind PnPL localization against sparse semantic maps"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic ScenePair dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-poles", type=int, default=10)
    p.add_argument("--n-signs", type=int, default=14)
    p.add_argument("--extent", type=float, default=40.0)
    p.add_argument("--crop-radius", type=float, default=20.0)
    p.add_argument("--pixel-sigma", type=float, default=0.0)
    p.add_argument("--dropout-rate", type=float, default=0.0)
    p.add_argument("--outlier-rate-2d", type=float, default=0.0)
    p.add_argument("--clutter-rate-3d", type=float, default=0.0)
    p.add_argument("--max-yaw-deg", type=float, default=360.0)
    p.add_argument("--max-translation", type=float, default=5.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("map-build", help="triangulate stereo observations into a map")
    p.add_argument("--observations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--min-pts", type=int, default=2)
    p.set_defaults(func=_cmd_map_build)

    p = sub.add_parser("train", help="train encoder weights on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--init-weights")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--warmup-epochs", type=int, default=30)
    p.add_argument("--gamma-p", type=float, default=1.0)
    p.add_argument("--learning-rate", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=12)
    p.add_argument("--ransac-iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--blocks", type=int, default=12)
    p.add_argument("--k", type=int, default=4)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("localize", help="estimate poses for frames or one query")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="ScenePair JSONL (batch mode)")
    p.add_argument("--elements", help="2D elements JSON (single query)")
    p.add_argument("--map", help="map JSON (single query)")
    p.add_argument("--gps", type=float, nargs=3, help="GPS prior x y z (meters)")
    p.add_argument("--crop-radius", dest="crop_radius", type=float)
    p.add_argument("--sinkhorn-mu", dest="sinkhorn_mu", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--min-inlier-rate", dest="min_inlier_rate", type=float)
    p.add_argument("--refine-weights", dest="refine_weights", choices=["plan", "inlier_masked"])
    p.add_argument("--weighted-sampling", action="store_true")
    p.add_argument("--constrain-line-base", action="store_true")
    p.add_argument("--no-direct", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_localize)

    p = sub.add_parser("eval", help="compute RTE/RRE statistics")
    p.add_argument("--estimates", required=True)
    p.add_argument("--dataset", help="take ground truth from a ScenePair JSONL")
    p.add_argument("--gt", help="take ground truth from a poses JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--rte-bin", type=float, default=0.1)
    p.add_argument("--rre-bin", type=float, default=0.1)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("plot-data", help="emit histogram CSV from an eval summary")
    p.add_argument("--summary", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InsufficientElementsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DegenerateGeometryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except SemlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
