"""Geometry kernel tests: spec examples, invariants, and independent oracles."""

import numpy as np
import pytest

from trialign import geometry
from trialign.geometry import (
    Orientation,
    batch_area_matrix,
    cosine,
    gram_volume,
    regularized_score,
    symile_mip,
    triangle_area,
    triangle_area_grad,
)


def cross_area(x, y, z):
    """Independent 3-D oracle: half the cross-product norm of the sides."""
    u = np.asarray(x, float) - np.asarray(y, float)
    v = np.asarray(x, float) - np.asarray(z, float)
    return 0.5 * np.linalg.norm(np.cross(u, v))


def heron_area(x, y, z):
    """Independent R^n oracle: Heron's formula on the side lengths.

    Uses the numerically stable ordering (Kahan): with a >= b >= c,
    A = 0.25 * sqrt((a+(b+c)) (c-(a-b)) (c+(a-b)) (a+(b-c))).
    """
    a, b, c = sorted([
        np.linalg.norm(np.asarray(x, float) - np.asarray(y, float)),
        np.linalg.norm(np.asarray(x, float) - np.asarray(z, float)),
        np.linalg.norm(np.asarray(y, float) - np.asarray(z, float)),
    ], reverse=True)
    inner = (a + (b + c)) * (c - (a - b)) * (c + (a - b)) * (a + (b - c))
    return 0.25 * np.sqrt(max(inner, 0.0))


def fd_triangle_grad(x, y, z, h=1e-6):
    """Central finite differences of triangle_area over all coordinates."""
    pts = np.stack([np.asarray(p, float) for p in (x, y, z)])
    grad = np.zeros_like(pts)
    flat = pts.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        grad.reshape(-1)[i] = (
            triangle_area(*xp.reshape(pts.shape)) - triangle_area(*xm.reshape(pts.shape))
        ) / (2 * h)
    return grad


class TestCosine:
    def test_identical_vectors(self):
        assert cosine([1, 0], [1, 0]) == 1.0

    def test_orthogonal(self):
        assert cosine([1, 0], [0, 1]) == 0.0

    def test_dot_norm_oracle(self):
        x, y = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])
        expected = float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
        assert cosine(x, y) == pytest.approx(expected, rel=1e-12)
        assert cosine(x, y) == pytest.approx(0.9746318461970762, rel=1e-9)

    def test_zero_norm_raises(self):
        with pytest.raises(ValueError):
            cosine([0, 0], [1, 0])

    def test_clamped_to_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x = rng.standard_normal(4)
            assert -1.0 <= cosine(x, 2.0 * x) <= 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine([1, 0], [1, 0, 0])


class TestTriangleArea:
    def test_degenerate_triple(self):
        p = [0.3, -0.1, 2.0]
        assert triangle_area(p, p, p) == 0.0

    def test_orthonormal_vertices(self):
        x, y, z = np.eye(3)
        expected = cross_area(x, y, z)
        assert triangle_area(x, y, z) == pytest.approx(expected, rel=1e-12)
        assert triangle_area(x, y, z) == pytest.approx(np.sqrt(3) / 2, rel=1e-12)

    def test_antipodal_plus_orthogonal(self):
        # Two opposite unit vectors and a third orthogonal one.
        x = np.array([1.0, 0.0, 0.0, 0.0])
        y = np.array([-1.0, 0.0, 0.0, 0.0])
        z = np.array([0.0, 1.0, 0.0, 0.0])
        expected = cross_area(x[:3], y[:3], z[:3])
        assert triangle_area(x, y, z) == pytest.approx(expected, rel=1e-12)
        assert triangle_area(x, y, z) == pytest.approx(1.0, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            triangle_area([1, 0], [0, 1], [0, 0, 1])

    def test_negative_eps_rejected(self):
        with pytest.raises(ValueError):
            triangle_area([1, 0], [0, 1], [1, 1], eps=-1.0)

    def test_eps_floor(self):
        p = np.array([1.0, 2.0])
        assert triangle_area(p, p, p, eps=1e-12) == 0.5 * np.sqrt(1e-12)

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            x, y, z = rng.standard_normal((3, 5))
            assert triangle_area(x, y, z) >= 0.0

    def test_vertex_permutation_symmetry(self):
        from itertools import permutations

        rng = np.random.default_rng(2)
        for _ in range(50):
            pts = rng.standard_normal((3, 6))
            base = triangle_area(*pts)
            for perm in permutations(range(3)):
                assert triangle_area(*pts[list(perm)]) == pytest.approx(base, rel=1e-10)

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            x, y, z = rng.standard_normal((3, 5))
            c = rng.standard_normal(5)
            assert triangle_area(x + c, y + c, z + c) == pytest.approx(
                triangle_area(x, y, z), rel=1e-10)

    def test_scaling_law(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            x, y, z = rng.standard_normal((3, 4))
            s = float(rng.uniform(0.1, 3.0))
            assert triangle_area(s * x, s * y, s * z) == pytest.approx(
                s * s * triangle_area(x, y, z), rel=1e-10)

    def test_zero_iff_collinear(self):
        # Integer lattice points keep the side vectors exact in floats, so
        # collinearity cancels G to exactly zero rather than ~1e-14.
        rng = np.random.default_rng(5)
        for _ in range(50):
            x = rng.integers(-8, 9, size=5).astype(float)
            d = rng.integers(-3, 4, size=5).astype(float)
            y = x - d
            z = x - 2.0 * d  # all three on one line
            assert triangle_area(x, y, z) == 0.0
        # and non-collinear triples are strictly positive
        for _ in range(50):
            x, y, z = rng.standard_normal((3, 5))
            assert triangle_area(x, y, z) > 0.0

    def test_cross_product_oracle_3d(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            x, y, z = rng.standard_normal((3, 3))
            assert triangle_area(x, y, z) == pytest.approx(
                cross_area(x, y, z), rel=1e-12)

    def test_heron_oracle_highdim(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            x, y, z = rng.standard_normal((3, 16))
            assert triangle_area(x, y, z) == pytest.approx(
                heron_area(x, y, z), rel=1e-6)

    def test_parallelogram_is_twice_triangle(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            x, y, z = rng.standard_normal((3, 6))
            u, v = x - y, x - z
            assert gram_volume([u, v], 2) == pytest.approx(
                2.0 * triangle_area(x, y, z), rel=1e-10)


class TestTriangleAreaGrad:
    def test_matches_finite_differences(self):
        x, y, z = np.eye(3)
        grad = triangle_area_grad(x, y, z)
        assert not grad.degenerate
        fd = fd_triangle_grad(x, y, z)
        analytic = np.stack([grad.d_x, grad.d_y, grad.d_z])
        assert np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-12)) < 1e-6

    def test_fd_sweep_random(self):
        rng = np.random.default_rng(9)
        checked = 0
        while checked < 100:
            x, y, z = rng.standard_normal((3, 5))
            u, v = x - y, x - z
            g = np.dot(u, u) * np.dot(v, v) - np.dot(u, v) ** 2
            if g <= 1e-8:
                continue
            grad = triangle_area_grad(x, y, z)
            fd = fd_triangle_grad(x, y, z)
            analytic = np.stack([grad.d_x, grad.d_y, grad.d_z])
            rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), np.abs(analytic))
            assert np.max(rel) < 1e-6
            checked += 1

    def test_zero_sum(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            x, y, z = rng.standard_normal((3, 7))
            grad = triangle_area_grad(x, y, z)
            if grad.degenerate:
                continue
            assert np.max(np.abs(grad.d_x + grad.d_y + grad.d_z)) < 1e-12

    def test_collapsed_triangle_flags_degenerate(self):
        p = np.array([1.0, 2.0, 3.0])
        grad = triangle_area_grad(p, p, p)
        assert grad.degenerate
        assert np.all(grad.d_x == 0) and np.all(grad.d_y == 0) and np.all(grad.d_z == 0)

    def test_eps_floor_extends_degenerate_region(self):
        # A tiny but nonzero-G triangle is flat under a larger floor.
        x = np.array([0.0, 0.0])
        y = np.array([1.0, 0.0])
        z = np.array([0.5, 1e-7])
        assert not triangle_area_grad(x, y, z).degenerate
        assert triangle_area_grad(x, y, z, eps=1e-10).degenerate


class TestRegularizedScore:
    def test_alpha_zero_is_plain_area(self):
        rng = np.random.default_rng(11)
        x, y, z = rng.standard_normal((3, 4))
        assert regularized_score(x, y, z, 0.0) == triangle_area(x, y, z)

    def test_coincident_task_pair(self):
        x = np.array([1.0, 0.0, 0.0])
        z = np.array([0.0, 0.0, 1.0])
        assert regularized_score(x, x, z, 1.0) == pytest.approx(-1.0, rel=1e-12)

    def test_composition_oracle(self):
        x, y, z = np.eye(3)
        expected = cross_area(x, y, z) - cosine(x, y)
        assert regularized_score(x, y, z, 1.0) == pytest.approx(expected, rel=1e-12)
        assert regularized_score(x, y, z, 1.0) == pytest.approx(np.sqrt(3) / 2, rel=1e-12)


class TestGramVolume:
    def test_orthonormal_unit_cube(self):
        assert gram_volume(list(np.eye(3))) == pytest.approx(1.0, rel=1e-12)

    def test_rank_deficiency(self):
        x = np.array([1.0, 0.0, 0.0])
        y = np.array([0.0, 1.0, 0.0])
        assert gram_volume([x, y, x]) == pytest.approx(0.0, abs=1e-12)

    def test_determinant_oracle(self):
        x = np.array([1.0, 0.0, 0.0])
        y = np.array([1.0, 1.0, 0.0])
        z = np.array([1.0, 1.0, 1.0])
        expected = abs(np.linalg.det(np.stack([x, y, z], axis=1)))
        assert gram_volume([x, y, z]) == pytest.approx(expected, rel=1e-12)
        assert gram_volume([x, y, z]) == pytest.approx(1.0, rel=1e-12)

    def test_k_exceeds_dimension(self):
        with pytest.raises(ValueError):
            gram_volume([np.ones(2), np.ones(2), np.zeros(2)])

    def test_k_too_small(self):
        with pytest.raises(ValueError):
            gram_volume([np.ones(3)], 1)


class TestSymileMip:
    def test_aligned_basis(self):
        e1 = np.array([1.0, 0.0, 0.0])
        assert symile_mip(e1, e1, e1) == 1.0

    def test_disjoint_support(self):
        x = np.array([1.0, 1.0, 0.0])
        y = np.array([1.0, 1.0, 0.0])
        z = np.array([0.0, 0.0, 1.0])
        assert symile_mip(x, y, z) == 0.0

    def test_sum_oracle(self):
        assert symile_mip([1, 2], [3, 4], [5, 6]) == pytest.approx(63.0, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            symile_mip([1, 2], [1, 2], [1, 2, 3])


class TestBatchAreaMatrix:
    def test_single_triple(self):
        rng = np.random.default_rng(12)
        t, v, a = rng.standard_normal((3, 1, 4))
        matrix = batch_area_matrix(t, v, a)
        assert matrix.shape == (1, 1)
        assert matrix.values[0, 0] == pytest.approx(
            triangle_area(t[0], v[0], a[0]), rel=1e-12)

    def test_identical_triples_give_constant_matrix(self):
        rng = np.random.default_rng(13)
        t0, v0, a0 = rng.standard_normal((3, 4))
        t = np.tile(t0, (3, 1))
        v = np.tile(v0, (3, 1))
        a = np.tile(a0, (3, 1))
        matrix = batch_area_matrix(t, v, a)
        assert np.max(np.abs(matrix.values - matrix.values[0, 0])) < 1e-12

    @pytest.mark.parametrize("direction", ["vary_text", "vary_data"])
    def test_scalar_loop_oracle(self, direction):
        rng = np.random.default_rng(14)
        b = 4
        t, v, a = rng.standard_normal((3, b, 6))
        matrix = batch_area_matrix(t, v, a, direction=direction)
        assert matrix.orientation is Orientation.LOWER_IS_BETTER
        for i in range(b):
            for j in range(b):
                if direction == "vary_text":
                    expected = triangle_area(t[j], v[i], a[i])
                else:
                    expected = triangle_area(t[i], v[j], a[j])
                assert matrix.values[i, j] == pytest.approx(expected, rel=1e-10)

    def test_diagonal_is_positive_pairs_both_directions(self):
        rng = np.random.default_rng(15)
        t, v, a = rng.standard_normal((3, 5, 4))
        positives = np.array([triangle_area(t[i], v[i], a[i]) for i in range(5)])
        for direction in ("vary_text", "vary_data"):
            diag = np.diagonal(batch_area_matrix(t, v, a, direction=direction).values)
            assert np.allclose(diag, positives, rtol=1e-12)

    def test_transpose_relation(self):
        rng = np.random.default_rng(16)
        t, v, a = rng.standard_normal((3, 4, 5))
        vary_text = batch_area_matrix(t, v, a, "vary_text").values
        vary_data = batch_area_matrix(t, v, a, "vary_data").values
        assert np.array_equal(vary_text, vary_data.T)

    def test_length_mismatch(self):
        rng = np.random.default_rng(17)
        with pytest.raises(ValueError):
            batch_area_matrix(rng.standard_normal((3, 4)),
                              rng.standard_normal((2, 4)),
                              rng.standard_normal((2, 4)))

    def test_unknown_direction(self):
        rng = np.random.default_rng(18)
        t, v, a = rng.standard_normal((3, 2, 3))
        with pytest.raises(ValueError):
            batch_area_matrix(t, v, a, direction="sideways")


class TestBatchedBackwards:
    """FD checks for the matrix-form backward passes used by the losses."""

    @pytest.mark.parametrize("forward,backward", [
        (geometry.area_matrix, geometry.area_matrix_backward),
        (geometry.volume_matrix, geometry.volume_matrix_backward),
        (geometry.mip_matrix, geometry.mip_matrix_backward),
    ])
    def test_matches_fd(self, forward, backward):
        rng = np.random.default_rng(19)
        t, v, a = rng.standard_normal((3, 3, 4))
        c = rng.standard_normal((3, 3))
        analytic = np.stack(backward(t, v, a, c))
        stacked = np.stack([t, v, a])
        flat = stacked.reshape(-1)
        h = 1e-6
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += h
            xm = flat.copy()
            xm[i] -= h
            fd = (np.sum(c * forward(*xp.reshape(stacked.shape)))
                  - np.sum(c * forward(*xm.reshape(stacked.shape)))) / (2 * h)
            got = analytic.reshape(-1)[i]
            assert abs(got - fd) <= 1e-6 * max(abs(got), abs(fd), 1.0)

    def test_cosine_matrix_backward_fd(self):
        rng = np.random.default_rng(20)
        x, y = rng.standard_normal((2, 3, 4))
        c = rng.standard_normal((3, 3))
        dx, dy = geometry.cosine_matrix_backward(x, y, c)
        analytic = np.stack([dx, dy])
        stacked = np.stack([x, y])
        flat = stacked.reshape(-1)
        h = 1e-6
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += h
            xm = flat.copy()
            xm[i] -= h
            fd = (np.sum(c * geometry.cosine_matrix(*xp.reshape(stacked.shape)))
                  - np.sum(c * geometry.cosine_matrix(*xm.reshape(stacked.shape)))) / (2 * h)
            got = analytic.reshape(-1)[i]
            assert abs(got - fd) <= 1e-6 * max(abs(got), abs(fd), 1.0)

    def test_rows_kernels_match_scalar(self):
        rng = np.random.default_rng(21)
        t, v, a = rng.standard_normal((3, 6, 5))
        areas = geometry.triangle_area_rows(t, v, a)
        for i in range(6):
            assert areas[i] == pytest.approx(triangle_area(t[i], v[i], a[i]), rel=1e-12)
        cosines = geometry.cosine_rows(t, v)
        for i in range(6):
            assert cosines[i] == pytest.approx(cosine(t[i], v[i]), rel=1e-12)
