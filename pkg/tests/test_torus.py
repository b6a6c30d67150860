import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from torusmatch.torus import (InvalidInput, SampleSet, TorusPoint, dist2, displacement, grid_centers,
                              pairwise_dist2, replicate_rng, sample_uniform, wrap)

coord = st.floats(-1e3, 1e3, allow_nan=False)
unit = st.floats(0.0, 1.0, exclude_max=True)
pairs = st.tuples(coord, coord)
tpoints = st.tuples(unit, unit)


@pytest.mark.parametrize("raw, expected", [
    ((1.25, -0.5), (0.25, 0.5)),
    ((0.0, 0.0), (0.0, 0.0)),
    ((-0.1, 2.0), (0.9, 0.0)),
])
def test_wrap_examples(raw, expected):
    np.testing.assert_allclose(wrap(raw), expected, atol=1e-15)


def test_wrap_rejects_nonfinite():
    with pytest.raises(InvalidInput):
        wrap((np.nan, 0.0))
    with pytest.raises(InvalidInput):
        wrap((0.0, np.inf))


def test_wrap_tiny_negative_stays_below_one():
    w = wrap((-1e-20, -5e-17))
    assert np.all(w >= 0) and np.all(w < 1)


def test_torus_point_of():
    p = TorusPoint.of(1.25, -0.5)
    assert p == (0.25, 0.5)


@given(pairs)
def test_wrap_range_and_idempotent(p):
    w = wrap(p)
    assert np.all((0 <= w) & (w < 1))
    np.testing.assert_array_equal(wrap(w), w)


@pytest.mark.parametrize("a, b, expected", [
    ((0.9, 0.5), (0.1, 0.5), (0.2, 0.0)),
    ((0.3, 0.7), (0.3, 0.7), (0.0, 0.0)),
    ((0.25, 0.0), (0.75, 0.0), (-0.5, 0.0)),
])
def test_displacement_examples(a, b, expected):
    np.testing.assert_allclose(displacement(a, b), expected, atol=1e-15)


def test_displacement_tie_goes_to_minus_half_both_ways():
    assert displacement((0.75, 0.0), (0.25, 0.0))[0] == -0.5
    assert displacement((0.0, 0.0), (0.5, 0.5)).tolist() == [-0.5, -0.5]


@given(tpoints, tpoints)
def test_displacement_half_open_and_bounded(a, b):
    d = displacement(a, b)
    assert np.all((-0.5 <= d) & (d < 0.5))
    assert d @ d <= 0.5
    # b is recovered from a modulo 1
    back = wrap(np.asarray(a) + d)
    np.testing.assert_allclose(np.minimum(np.abs(back - wrap(b)), 1 - np.abs(back - wrap(b))), 0, atol=1e-12)


@given(tpoints, tpoints)
def test_displacement_antisymmetric_off_the_tie(a, b):
    d = displacement(a, b)
    if np.any(d == -0.5):
        return
    np.testing.assert_array_equal(d, -displacement(b, a))


@pytest.mark.parametrize("a, b, expected", [
    ((0.1, 0.1), (0.1, 0.1), 0.0),
    ((0.9, 0.0), (0.1, 0.0), 0.04),
    ((0.25, 0.75), (0.75, 0.25), 0.5),
])
def test_dist2_examples(a, b, expected):
    assert dist2(a, b) == pytest.approx(expected, abs=1e-15)


def test_dist2_triangle_inequality_on_random_triples():
    rng = np.random.default_rng(7)
    a, b, c = (rng.random((1000, 2)) for _ in range(3))
    ab, bc, ac = np.sqrt(dist2(a, b)), np.sqrt(dist2(b, c)), np.sqrt(dist2(a, c))
    assert np.all(ac <= ab + bc + 1e-15)


@given(tpoints, tpoints)
def test_dist2_symmetric_and_bounded(a, b):
    assert dist2(a, b) == pytest.approx(dist2(b, a), abs=1e-15)
    assert 0 <= dist2(a, b) <= 0.5


def test_pairwise_matches_dist2():
    rng = np.random.default_rng(1)
    a, b = rng.random((13, 2)), rng.random((17, 2))
    expected = dist2(a[:, None, :], b[None, :, :])
    np.testing.assert_allclose(pairwise_dist2(a, b), expected, atol=1e-15)


def test_sample_uniform_is_deterministic():
    s1 = sample_uniform(50, 123, 4)
    s2 = sample_uniform(50, 123, 4)
    assert s1.points.tobytes() == s2.points.tobytes()
    assert s1.n == 50 and s1.seed == 123 and s1.replicate_index == 4


def test_replicate_streams_differ_and_ignore_order():
    first = [sample_uniform(5, 9, r).points for r in range(4)]
    later = [sample_uniform(5, 9, r).points for r in reversed(range(4))][::-1]
    for x, y in zip(first, later):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(first[0], first[1])


def test_sample_uniform_rejects_bad_arguments():
    with pytest.raises(InvalidInput):
        sample_uniform(0, 1)
    with pytest.raises(InvalidInput):
        sample_uniform(3, -1)
    with pytest.raises(InvalidInput):
        sample_uniform(3, 2**64)
    with pytest.raises(InvalidInput):
        replicate_rng(0, -1)


def test_sample_uniform_mean():
    u = sample_uniform(100_000, 2024, 0).points[:, 0]
    se = u.std(ddof=1) / math.sqrt(u.size)
    assert se == pytest.approx(1 / math.sqrt(12 * u.size), rel=0.02)
    assert abs(u.mean() - 0.5) <= 3 * se


def test_sample_uniform_chi_square():
    pts = sample_uniform(100_000, 77, 0).points
    counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=4, range=[[0, 1], [0, 1]])
    assert stats.chisquare(counts.ravel()).pvalue > 1e-6


def test_sample_set_validation_and_shift():
    with pytest.raises(InvalidInput):
        SampleSet(np.zeros((3, 2)), 4, 0, 0)
    s = SampleSet.from_points([(0.9, 0.2)])
    np.testing.assert_allclose(s.shifted((0.2, 0.0)).points, [[0.1, 0.2]], atol=1e-15)


def test_grid_centers():
    np.testing.assert_array_equal(grid_centers(1), [[0.5, 0.5]])
    g2 = grid_centers(2)
    assert g2.shape == (4, 2)
    assert set(g2.ravel().tolist()) == {0.25, 0.75}
    # row-major with the first coordinate outer
    np.testing.assert_array_equal(g2[1], [0.25, 0.75])
    for K in (3, 8, 17):
        np.testing.assert_allclose(grid_centers(K).mean(axis=0), (0.5, 0.5), atol=1e-15)
    with pytest.raises(InvalidInput):
        grid_centers(0)
