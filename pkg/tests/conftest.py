import numpy as np
import pytest

from semloc.pose import PnplProblem
from semloc.synthetic import DatasetConfig, NoiseConfig, make_dataset


def build_clean_pair(seed, n_poles=10, n_signs=14, max_yaw=2 * np.pi, max_translation=5.0, min_visible=4):
    """One noise-free ScenePair (augmented submap, exact correspondences)."""
    from semloc.synthetic import SceneConfig

    cfg = DatasetConfig(
        n_frames=1,
        scene=SceneConfig(n_poles=n_poles, n_signs=n_signs),
        noise=NoiseConfig(),
        seed=seed,
        max_yaw=max_yaw,
        max_translation=max_translation,
        min_visible=min_visible,
    )
    return make_dataset(cfg)[0]


def gt_problem(pair, constrain_line_base=False) -> PnplProblem:
    """PnplProblem with boolean ground-truth plans from a ScenePair."""
    C = pair.gt_correspondence
    rows2d = np.arange(len(pair.elements2d))
    is_line_2d = np.array([e.is_line for e in pair.elements2d])
    is_line_3d = np.array([e.is_line for e in pair.submap.elements])

    p_rows = rows2d[~is_line_2d]
    p_cols = np.nonzero(~is_line_3d)[0]
    l_rows = rows2d[is_line_2d]
    l_cols = np.nonzero(is_line_3d)[0]

    F = np.stack([e.bearing.vec for e in pair.elements2d]) if len(pair.elements2d) else np.zeros((0, 3))
    P = pair.submap.points()
    D2 = np.stack([e.direction for e in pair.elements2d]) if len(pair.elements2d) else np.zeros((0, 3))
    D3 = np.stack([e.direction for e in pair.submap.elements]) if len(pair.submap) else np.zeros((0, 3))

    Wp = C[np.ix_(p_rows, p_cols)].astype(float) if len(p_rows) and len(p_cols) else np.zeros((len(p_rows), len(p_cols)))
    Wl = C[np.ix_(l_rows, l_cols)].astype(float) if len(l_rows) and len(l_cols) else np.zeros((len(l_rows), len(l_cols)))
    return PnplProblem(
        F[p_rows], P[p_cols], Wp,
        F[l_rows], D2[l_rows], P[l_cols], D3[l_cols], Wl,
        constrain_line_base=constrain_line_base,
    )


def gt_point_pairs(pair):
    """All true (bearing, 3D point) pairs, pole peaks included."""
    F, P = [], []
    for i, j in zip(*np.nonzero(pair.gt_correspondence)):
        F.append(pair.elements2d[i].bearing.vec)
        P.append(pair.submap.elements[j].point)
    return np.stack(F), np.stack(P)


@pytest.fixture
def clean_pair_factory():
    return build_clean_pair


@pytest.fixture
def gt_problem_factory():
    return gt_problem


@pytest.fixture
def gt_point_pairs_factory():
    return gt_point_pairs
