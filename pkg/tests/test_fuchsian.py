"""Tests for Fenchel-Nielsen holonomy and Dirichlet domains."""

import numpy as np
import pytest

from ghmcreal.fuchsian import (
    FNCoords,
    MARKING_WORDS,
    RELATOR,
    curve_length,
    central_base_point,
    dirichlet_domain,
    fn_to_holonomy,
    marking_lengths,
    reduce_word,
    teich_distance,
)
from ghmcreal.minkowski import (
    check_iso21,
    hyp_dist,
    invert_word,
    mink_inner,
    word_matrix,
)

RNG = np.random.default_rng(41)


def random_fn(rng):
    return FNCoords(tuple(rng.uniform(0.5, 4.0, 3)), tuple(rng.uniform(-2.0, 2.0, 3)))


@pytest.fixture(scope="module")
def metric():
    return fn_to_holonomy(FNCoords((2.0, 2.0, 2.0), (0.3, -0.2, 0.5)))


@pytest.fixture(scope="module")
def domain(metric):
    return dirichlet_domain(metric)


class TestFnToHolonomy:
    def test_relator_residual_zero_twist(self):
        m = fn_to_holonomy(FNCoords((2.0, 2.0, 2.0), (0.0, 0.0, 0.0)))
        assert m.relator_residual <= 1e-10

    def test_relator_residual_in_box(self):
        for _ in range(8):
            m = fn_to_holonomy(random_fn(RNG))
            assert m.relator_residual <= 1e-9

    def test_generators_are_isometries(self, metric):
        for g in metric.gens:
            scale = max(1.0, float(np.max(np.abs(g))))
            assert check_iso21(g, tol=1e-11 * scale * scale)

    def test_relator_matrix(self, metric):
        rel = word_matrix(metric.gens, RELATOR)
        scale = max(float(np.max(np.abs(g))) for g in metric.gens)
        assert np.max(np.abs(rel - np.eye(3))) <= 1e-9 * scale * scale

    def test_pants_curve_lengths_realized(self):
        for _ in range(5):
            fn = random_fn(RNG)
            ml = marking_lengths(fn_to_holonomy(fn))
            # marking curves 1-3 are the pants curves themselves
            assert np.allclose(ml[:3], fn.lengths, atol=1e-6)

    def test_boundary_trace(self):
        m = fn_to_holonomy(FNCoords((2.0, 3.0, 1.5), (0.0, 0.0, 0.0)))
        tr = abs(float(np.trace(m.gens_sl2[0])))
        assert tr == pytest.approx(2.0 * np.cosh(1.0), rel=1e-10)

    def test_marking_lengths_positive(self, metric):
        assert np.all(marking_lengths(metric) > 0)

    def test_rejects_nonpositive_length(self):
        with pytest.raises(ValueError):
            FNCoords((1.0, -2.0, 1.0), (0.0, 0.0, 0.0))

    def test_deterministic(self):
        fn = FNCoords((1.3, 2.1, 0.8), (0.4, -1.0, 0.2))
        m1, m2 = fn_to_holonomy(fn), fn_to_holonomy(fn)
        assert teich_distance(m1, m2) == 0.0


class TestCurveLength:
    def test_conjugation_invariance(self, metric):
        w = (1, 2)
        v = (3, -2)
        assert curve_length(metric, v + w + invert_word(v)) == \
            pytest.approx(curve_length(metric, w), rel=1e-8)

    def test_square_doubles(self, metric):
        w = (1, 2)
        assert curve_length(metric, w + w) == pytest.approx(
            2.0 * curve_length(metric, w), rel=1e-9)

    def test_identity_word_rejected(self, metric):
        with pytest.raises(ValueError):
            curve_length(metric, ())

    def test_relator_rejected(self, metric):
        # holonomy of the relator is the identity: no geodesic length
        with pytest.raises(ValueError):
            curve_length(metric, RELATOR)


class TestTeichDistance:
    def test_self_distance_zero(self, metric):
        assert teich_distance(metric, metric) == 0.0

    def test_symmetric(self, metric):
        other = fn_to_holonomy(random_fn(RNG))
        assert teich_distance(metric, other) == pytest.approx(
            teich_distance(other, metric), abs=1e-14)

    def test_positive_on_distinct(self, metric):
        fn = metric.fn
        bumped = FNCoords((fn.lengths[0] + 0.05,) + tuple(fn.lengths[1:]), fn.twists)
        assert teich_distance(metric, fn_to_holonomy(bumped)) > 1e-3

    def test_full_twist_fixes_pants_lengths(self):
        fn = FNCoords((1.7, 2.4, 1.1), (0.3, -0.5, 0.8))
        twisted = FNCoords(fn.lengths, (fn.twists[0] + fn.lengths[0],) + fn.twists[1:])
        ml1 = marking_lengths(fn_to_holonomy(fn))
        ml2 = marking_lengths(fn_to_holonomy(twisted))
        # the pants curves are disjoint from the twisting curve
        assert np.allclose(ml1[:3], ml2[:3], atol=1e-8)
        # but the marking itself moved
        assert np.max(np.abs(np.log(ml1 / ml2))) > 1e-3


class TestDirichletDomain:
    def test_area_gauss_bonnet(self, domain):
        assert domain.area == pytest.approx(4.0 * np.pi, abs=1e-6)

    def test_base_point_interior(self, domain):
        # base strictly inside every side half-plane
        for u in domain.side_poles():
            assert mink_inner(domain.base, u) < -1e-6

    def test_sides_paired(self, domain):
        for i in range(domain.nsides):
            j = domain.side_partner(i)
            assert domain.side_partner(j) == i

    def test_pairing_isometries_are_group_elements(self, domain, metric):
        for w, g in zip(domain.side_words, domain.side_mats):
            assert np.allclose(g, word_matrix(metric.gens, w), atol=1e-7)

    def test_equidistance_of_side_corners(self, domain):
        # each corner of side i is equidistant from base and side image of base
        for i in range(domain.nsides):
            q = domain.side_mats[i] @ domain.base
            for v in (domain.verts[i], domain.verts[(i + 1) % domain.nsides]):
                assert hyp_dist(v, domain.base) == pytest.approx(
                    hyp_dist(v, q), abs=1e-6)

    def test_vertex_cycle_products_identity(self, domain, metric):
        # at corner i the pairing of the incoming side i-1 acts by its
        # inverse; composing these around a cycle must give the identity
        n = domain.nsides
        for cyc in domain.vertex_cycles:
            w = ()
            for i in cyc:
                w = invert_word(domain.side_words[(i - 1) % n]) + w
            g = word_matrix(metric.gens, reduce_word(w))
            scale = max(1.0, float(np.max(np.abs(g))))
            assert np.max(np.abs(g - np.eye(3))) <= 1e-6 * scale

    def test_central_base_point_on_hyperboloid(self, metric):
        x = central_base_point(metric)
        assert mink_inner(x, x) == pytest.approx(-1.0, abs=1e-10)
        assert x[2] > 0

    def test_area_across_box(self):
        for _ in range(3):
            m = fn_to_holonomy(random_fn(RNG))
            d = dirichlet_domain(m)
            assert d.area == pytest.approx(4.0 * np.pi, abs=1e-6)

    def test_cached(self, metric):
        d1 = dirichlet_domain(metric)
        d2 = dirichlet_domain(metric)
        assert d1 is d2


class TestReduceWord:
    def test_cancellation(self):
        assert reduce_word((1, 2, -2, -1)) == ()
        assert reduce_word((1, 2, -2, 3)) == (1, 3)

    def test_noop(self):
        assert reduce_word((1, 2, 3)) == (1, 2, 3)


class TestMarkingWords:
    def test_nine_curves(self):
        assert len(MARKING_WORDS) == 9

    def test_separating_curve_is_commutator(self):
        assert MARKING_WORDS[2] == (1, 2, -1, -2)
