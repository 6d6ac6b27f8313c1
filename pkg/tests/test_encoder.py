import numpy as np
import pytest
import torch

from semloc.elements import DEFAULT_SCHEMA, make_sign_3d
from semloc.encoder import (
    EmbeddingSet,
    EncoderConfig,
    EncoderWeights,
    build_input,
    cost_matrix,
    cost_matrix_torch,
    encode,
    encode_backward,
    init_weights,
    input_matrix,
    knn_graph,
)
from semloc.errors import ConfigError, DomainError
from semloc.geometry import Bearing
from semloc.elements import Element2D, Element3D

SMALL = EncoderConfig(n_classes=4, dim=8, blocks=2, k=3)


def sign2d(vec, cls_id=1):
    return Element2D(Bearing.from_vec(vec), np.zeros(3), DEFAULT_SCHEMA.one_hot(cls_id))


def random_elements3d(rng, n, spread=10.0):
    out = []
    for _ in range(n):
        cid = int(rng.integers(4))
        p = rng.uniform(-spread, spread, size=3)
        if cid == 0:
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            out.append(Element3D(p, d, DEFAULT_SCHEMA.one_hot(0)))
        else:
            out.append(Element3D(p, np.zeros(3), DEFAULT_SCHEMA.one_hot(cid)))
    return out


class TestBuildInput:
    def test_sign_concatenation(self):
        el = sign2d([0.0, 0.0, 1.0], cls_id=1)
        v = build_input(el)
        assert np.array_equal(v, [0, 0, 1, 0, 0, 0, 0, 1, 0, 0])
        assert len(v) == 6 + 4

    def test_pole_direction_slot_unit(self):
        el3 = Element3D([1.0, 2.0, 3.0], [0, 0, -1.0], DEFAULT_SCHEMA.one_hot(0))
        v = build_input(el3)
        assert np.allclose(v[3:6], [0, 0, -1.0])
        assert abs(np.linalg.norm(v[3:6]) - 1.0) <= 1e-12

    def test_origin_centering(self):
        el3 = make_sign_3d([10.0, 4.0, 3.0], DEFAULT_SCHEMA.classes[1])
        v = build_input(el3, origin=[9.0, 4.0, 0.0])
        assert np.allclose(v[:3], [1.0, 0.0, 3.0])


class TestKnnGraph:
    def test_two_elements_pad(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0]])
        idx = knn_graph(x, 4)
        assert np.array_equal(idx, [[1, 1, 1, 1], [0, 0, 0, 0]])

    def test_single_element_self_loop(self):
        idx = knn_graph(np.array([[3.0, 1.0]]), 4)
        assert np.array_equal(idx, [[0, 0, 0, 0]])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(40)
        x = rng.normal(size=(50, 10))
        idx = knn_graph(x, 4)
        for i in range(50):
            d = np.linalg.norm(x - x[i], axis=1)
            d[i] = np.inf
            expected = np.argsort(d, kind="stable")[:4]
            assert np.array_equal(idx[i], expected)

    def test_one_hot_distance_keeps_classes_separate(self):
        # classes far apart in one-hot, geometry close: with >= k+1 members
        # per class, first-layer neighbors stay within the class
        rng = np.random.default_rng(41)
        elements = []
        for cid in (1, 2):
            for _ in range(5):
                elements.append(
                    Element3D(rng.uniform(0, 0.3, size=3), np.zeros(3), DEFAULT_SCHEMA.one_hot(cid))
                )
        x = input_matrix(elements)
        idx = knn_graph(x, 4)
        cls = np.array([e.class_id for e in elements])
        for i in range(len(elements)):
            assert np.all(cls[idx[i]] == cls[i])

    def test_tie_break_lower_index(self):
        x = np.array([[0.0], [1.0], [-1.0], [2.0]])
        idx = knn_graph(x, 2)
        # 1 and 2 are equidistant from 0; lower index first
        assert np.array_equal(idx[0], [1, 2])


class TestEncode:
    def test_zero_weights_give_zero_embeddings(self):
        w = init_weights(SMALL, seed=0)
        zeros = EncoderWeights(SMALL, {k: torch.zeros_like(v) for k, v in w.tensors.items()})
        rng = np.random.default_rng(42)
        z = encode(random_elements3d(rng, 6), zeros, "3d")
        assert np.all(z.vectors == 0.0)

    def test_single_element_finite(self):
        w = init_weights(SMALL, seed=1)
        z = encode([make_sign_3d([1.0, 2.0, 3.0], DEFAULT_SCHEMA.classes[1])], w, "3d")
        assert z.vectors.shape == (1, SMALL.dim)
        assert np.isfinite(z.vectors).all()

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(43)
        elements = random_elements3d(rng, 9)
        w = init_weights(SMALL, seed=2)
        z = encode(elements, w, "3d")
        perm = rng.permutation(len(elements))
        z_perm = encode([elements[i] for i in perm], w, "3d")
        assert np.allclose(z_perm.vectors, z.vectors[perm], atol=1e-12)

    def test_streams_are_independent(self):
        w = init_weights(SMALL, seed=3)
        rng = np.random.default_rng(44)
        elements = random_elements3d(rng, 5)
        a = encode(elements, w, "3d").vectors
        b = encode(elements, w, "2d").vectors
        assert not np.allclose(a, b)

    def test_shape_mismatch_raises(self):
        w = init_weights(EncoderConfig(n_classes=3, dim=8, blocks=2, k=2), seed=0)
        rng = np.random.default_rng(45)
        with pytest.raises(ConfigError):
            encode(random_elements3d(rng, 4), w, "3d")

    def test_deterministic(self):
        rng = np.random.default_rng(46)
        elements = random_elements3d(rng, 7)
        w = init_weights(SMALL, seed=4)
        a = encode(elements, w, "3d").vectors
        b = encode(elements, w, "3d").vectors
        assert np.array_equal(a, b)


class TestCostMatrix:
    def test_identical_rows_zero(self):
        z = EmbeddingSet(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1, 1]))
        m = cost_matrix(z, z)
        assert m[0, 0] == 0.0 and m[1, 1] == 0.0

    def test_unit_basis_distance(self):
        a = EmbeddingSet(np.array([[1.0, 0.0, 0.0]]), np.array([1]))
        b = EmbeddingSet(np.array([[0.0, 1.0, 0.0]]), np.array([1]))
        assert cost_matrix(a, b)[0, 0] == pytest.approx(np.sqrt(2.0), abs=1e-15)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(47)
        a = EmbeddingSet(rng.normal(size=(10, 6)), np.zeros(10))
        b = EmbeddingSet(rng.normal(size=(12, 6)), np.zeros(12))
        m = cost_matrix(a, b)
        for i in range(10):
            for j in range(12):
                assert m[i, j] == pytest.approx(np.linalg.norm(a.vectors[i] - b.vectors[j]), abs=1e-12)

    def test_triangle_inequality_rows(self):
        rng = np.random.default_rng(48)
        a = EmbeddingSet(rng.normal(size=(6, 5)), np.zeros(6))
        b = EmbeddingSet(rng.normal(size=(6, 5)), np.zeros(6))
        m = cost_matrix(a, b)
        for i in range(6):
            for j in range(6):
                for k in range(6):
                    assert m[i, j] <= np.linalg.norm(a.vectors[i] - a.vectors[k]) + m[k, j] + 1e-9

    def test_torch_variant_matches_and_has_safe_gradient(self):
        rng = np.random.default_rng(49)
        a = torch.tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = torch.tensor(np.vstack([a.detach().numpy()[0], rng.normal(size=(2, 3))]), requires_grad=True)
        m = cost_matrix_torch(a, b)
        assert m[0, 0].item() == 0.0
        m.sum().backward()
        assert torch.isfinite(a.grad).all() and torch.isfinite(b.grad).all()


class TestEncodeBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(50)
        elements = random_elements3d(rng, 5)
        w = init_weights(SMALL, seed=5)
        grads, gx = encode_backward(elements, w, np.zeros((5, SMALL.dim)), "3d")
        assert all(np.all(g == 0.0) for g in grads.values())
        assert np.all(gx == 0.0)

    def test_last_bias_gradient_is_element_count(self):
        rng = np.random.default_rng(51)
        elements = random_elements3d(rng, 5)
        w = init_weights(SMALL, seed=6)
        grads, _ = encode_backward(elements, w, np.ones((5, SMALL.dim)), "3d")
        assert np.allclose(grads["proj_b"], 5.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(52)
        elements = random_elements3d(rng, 5, spread=2.0)
        w = init_weights(SMALL, seed=7)
        upstream = rng.normal(size=(5, SMALL.dim))
        grads, _ = encode_backward(elements, w, upstream, "3d")

        def loss(weights):
            z = encode(elements, weights, "3d")
            return float((z.vectors * upstream).sum())

        eps = 1e-5
        rel_errors = []
        for name in ("block0/w1", "block1/w2", "proj_w", "block0/b1"):
            g = grads[name]
            flat_idx = np.argsort(-np.abs(g).ravel())[:4]  # check the largest entries
            for fi in flat_idx:
                pos = np.unravel_index(fi, g.shape)
                wp = w.clone()
                wm = w.clone()
                with torch.no_grad():
                    wp.tensors["3d/" + name][pos] += eps
                    wm.tensors["3d/" + name][pos] -= eps
                num = (loss(wp) - loss(wm)) / (2 * eps)
                denom = max(abs(num), abs(g[pos]), 1e-8)
                rel_errors.append(abs(num - g[pos]) / denom)
        assert max(rel_errors) < 1e-4
