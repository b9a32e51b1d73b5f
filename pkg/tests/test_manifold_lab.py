import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import pdist

from besovnet import manifold_lab as ml
from besovnet.manifold_lab import Atlas, Chart, ManifoldError, PartitionError

KINDS = ["circle", "sphere-2", "torus", "flat-patch"]


@pytest.fixture(scope="module")
def circle():
    return ml.make_manifold("circle", D=3, rotation_seed=4)


@pytest.fixture(scope="module")
def circle_atlas(circle):
    return ml.build_atlas(circle, 0.4, seed=0)


def greedy_cover_count(points, radius):
    """Oracle: take the first uncovered point as a new center until nothing is left."""
    left = np.ones(len(points), dtype=bool)
    count = 0
    while left.any():
        c = points[np.argmax(left)]
        left &= np.linalg.norm(points - c, axis=1) > radius
        count += 1
    return count


class TestManifold:
    def test_analytic_reach(self):
        assert ml.make_manifold("circle", radius=2.0).tau == 2.0
        assert ml.make_manifold("sphere-2", radius=0.7).tau == 0.7
        assert ml.make_manifold("torus", radius=1.0, minor=0.3).tau == pytest.approx(0.3)

    @pytest.mark.parametrize("kind", KINDS)
    def test_samples_within_bound(self, kind):
        M = ml.make_manifold(kind, D=5, rotation_seed=1)
        X = ml.sample(M, 5000, 3)
        assert np.max(np.abs(X)) <= M.B + 1e-12

    def test_unknown_kind(self):
        with pytest.raises(ManifoldError):
            ml.make_manifold("klein-bottle")


class TestSample:
    def test_circle_radius(self, circle):
        X = ml.sample(circle, 2000, 0)
        r = np.linalg.norm(circle.to_natural(X), axis=1)
        assert np.all(np.abs(r - 1.0) <= 1e-12)
        # and nothing leaks out of the embedding plane
        np.testing.assert_allclose(circle.from_natural(circle.to_natural(X)), X, atol=1e-12)

    def test_same_seed_same_points(self, circle):
        np.testing.assert_array_equal(ml.sample(circle, 100, 9), ml.sample(circle, 100, 9))

    def test_sphere_mean_near_zero(self):
        n = 20000
        X = ml.sample(ml.make_manifold("sphere-2"), n, 5)
        assert np.all(np.abs(X.mean(axis=0)) <= 5 / math.sqrt(n))

    def test_torus_angle_density(self):
        M = ml.make_manifold("torus", radius=1.0, minor=0.5)
        v = M.coords(ml.sample(M, 40000, 6))[:, 1]
        # the area element R + r cos v puts three times more mass near v = 0 than near v = pi
        near_out = np.mean(np.abs(np.angle(np.exp(1j * v))) < 0.3)
        near_in = np.mean(np.abs(np.angle(np.exp(1j * (v - math.pi)))) < 0.3)
        assert near_out / near_in == pytest.approx(3.0, rel=0.15)


class TestAtlas:
    def test_circle_chart_count(self, circle, circle_atlas):
        assert 8 <= circle_atlas.C_M <= 20
        oracle = greedy_cover_count(ml.sample(circle, 5000, 1), 0.4)
        assert circle_atlas.C_M >= oracle - 1

    def test_covering_on_fresh_samples(self, circle, circle_atlas):
        X = ml.sample(circle, 100000, 11)
        sq = ml._sq_dists(X, circle_atlas.centers())
        assert np.min(np.max(circle_atlas.omega ** 2 - sq, axis=1)) > 0

    @pytest.mark.parametrize("kind", ["sphere-2", "torus"])
    def test_covering_two_dimensional(self, kind):
        M = ml.make_manifold(kind, D=4, radius=1.0, minor=0.5, rotation_seed=2)
        atlas = ml.build_atlas(M, 0.2, seed=1)
        X = ml.sample(M, 20000, 12)
        assert np.all(np.any(ml._sq_dists(X, atlas.centers()) <= 0.2 ** 2, axis=1))
        assert atlas.C_M <= atlas.count_bound()

    def test_flat_patch_single_chart(self):
        M = ml.make_manifold("flat-patch", D=3, side=1.0, d=2)
        assert ml.build_atlas(M, 2.0).C_M == 1

    def test_omega_at_half_reach_rejected(self, circle):
        with pytest.raises(ManifoldError):
            ml.build_atlas(circle, circle.tau / 2)

    def test_tangent_bases_orthonormal(self, circle_atlas):
        M = ml.make_manifold("torus", D=5, radius=1.0, minor=0.4, rotation_seed=3)
        atlas = ml.build_atlas(M, 0.15)
        for ch in circle_atlas.charts + atlas.charts:
            assert np.max(np.abs(ch.V.T @ ch.V - np.eye(ch.d))) <= 1e-12

    def test_charts_land_in_unit_cube(self, circle, circle_atlas):
        X = ml.sample(circle, 20000, 13)
        for ch in circle_atlas.charts:
            inside = ml.in_chart(ch, X)
            z = ml.chart_map(ch, X[inside])
            assert np.all((z >= 0.05 - 1e-12) & (z <= 0.95 + 1e-12))


class TestChartMap:
    def test_center_maps_to_shift(self, circle_atlas):
        ch = circle_atlas.charts[0]
        np.testing.assert_array_equal(ml.chart_map(ch, ch.center), ch.shift)
        assert ml.in_chart(ch, ch.center)

    def test_far_point_outside(self, circle_atlas):
        ch = circle_atlas.charts[0]
        u = np.zeros_like(ch.center)
        u[0] = 1.0
        assert not ml.in_chart(ch, ch.center + 2 * ch.omega * u)

    def test_injective_on_chart(self, circle, circle_atlas):
        X = ml.sample(circle, 3000, 14)
        ch = circle_atlas.charts[0]
        Xi = X[ml.in_chart(ch, X)]
        Z = ml.chart_map(ch, Xi)
        dx, dz = pdist(Xi), pdist(Z)
        assert not np.any((dx > 1e-9) & (dz <= 1e-12))


class TestPartition:
    def test_single_chart_weight_one(self):
        M = ml.make_manifold("flat-patch", d=1, side=1.0)
        atlas = ml.build_atlas(M, 2.0)
        np.testing.assert_array_equal(ml.partition_weights(atlas, np.array([0.2])), [1.0])

    def test_symmetric_midpoint(self):
        M = ml.make_manifold("flat-patch", d=1, side=2.0)
        charts = [Chart(np.array([c]), 1.0, np.ones((1, 1)), 0.45, np.array([0.5])) for c in (-0.5, 0.5)]
        rho = ml.partition_weights(Atlas(M, charts, 1.0), np.array([0.0]))
        np.testing.assert_array_equal(rho, [0.5, 0.5])

    def test_sums_to_one_and_support(self, circle, circle_atlas):
        X = ml.sample(circle, 10000, 15)
        rho = ml.partition_weights(circle_atlas, X)
        assert np.all(rho >= 0)
        assert np.max(np.abs(rho.sum(axis=1) - 1)) <= 1e-10
        inside = np.stack([ml.in_chart(ch, X) for ch in circle_atlas.charts], axis=1)
        assert np.all(rho * (~inside) == 0.0)

    def test_uncovered_point(self, circle_atlas):
        with pytest.raises(PartitionError, match="nearest center"):
            ml.partition_weights(circle_atlas, np.full(3, 10.0))


class TestTargets:
    def test_constant_target(self, circle):
        t = ml.make_target(circle, "trig", {"terms": [[1.0, [0.0], 0.0]]})
        np.testing.assert_array_equal(t(ml.sample(circle, 50, 0)), 1.0)
        assert t.R == 1.0

    def test_cosine_of_angle(self, circle):
        t = ml.make_target(circle, "trig")
        X = ml.sample(circle, 500, 1)
        Y = circle.to_natural(X)
        np.testing.assert_allclose(t(X), np.cos(np.arctan2(Y[:, 1], Y[:, 0])), atol=1e-12)

    def test_kink_is_one_lipschitz(self, circle):
        t = ml.make_target(circle, "lipschitz-kink")
        X = ml.sample(circle, 800, 2)
        dx = pdist(X)
        df = pdist(t(X)[:, None])
        assert t.lipschitz <= 1.0
        assert np.max(df[dx > 1e-9] / dx[dx > 1e-9]) <= 1.0 + 1e-9

    @settings(max_examples=10, deadline=None)
    @given(st.sampled_from(["trig", "bump-sum", "lipschitz-kink"]), st.integers(0, 1000))
    def test_bounded_by_tag(self, family, seed):
        M = ml.make_manifold("sphere-2", D=4, rotation_seed=0)
        t = ml.make_target(M, family, seed=seed)
        assert np.max(np.abs(t(ml.sample(M, 2000, seed)))) <= t.R + 1e-12

    def test_unknown_family(self, circle):
        with pytest.raises(ManifoldError):
            ml.make_target(circle, "wavelet")
