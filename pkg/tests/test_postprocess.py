import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toa_tomo.errors import InvalidWindow
from toa_tomo.postprocess import FWHM_PER_SIGMA, gaussian_filter, masked_median, median_filter
from toa_tomo.projection import SqrtEpsImage


def disk(n=41, r=15, value=5.0):
    yy, xx = np.mgrid[:n, :n] - n // 2
    mask = xx ** 2 + yy ** 2 <= r * r
    vals = np.where(mask, value, np.sqrt(53.0))
    return SqrtEpsImage(vals, 0.003, mask)


def test_fwhm_constant():
    assert FWHM_PER_SIGMA == pytest.approx(2.3548, abs=1e-4)


def test_median_identity():
    x = disk()
    x.values[x.mask] = np.random.default_rng(0).uniform(1, 8, x.mask.sum())
    assert np.array_equal(median_filter(x, 1).values, x.values)


def test_median_constant():
    x = disk()
    assert np.array_equal(median_filter(x, 5).values, x.values)


def test_median_removes_impulse():
    x = disk()
    x.values[20, 20] = 9.0
    y = median_filter(x, 3)
    assert y.values[20, 20] == 5.0
    assert np.all(y.values[y.mask] == 5.0)


@pytest.mark.parametrize("w", [2, 4, 0, -1])
def test_median_bad_window(w):
    with pytest.raises(InvalidWindow):
        median_filter(disk(), w)


def test_masked_median_even_size_allowed():
    x = disk()
    out = masked_median(x.values, x.mask, 4)
    assert np.array_equal(out, x.values)
    with pytest.raises(InvalidWindow):
        masked_median(x.values, x.mask, 0)


def test_median_exterior_does_not_bleed():
    x = disk(value=2.0)
    y = median_filter(x, 7)
    assert np.all(y.values[x.mask] == 2.0)
    assert np.array_equal(y.values[~x.mask], x.values[~x.mask])
    assert np.array_equal(y.mask, x.mask)


@given(st.integers(0, 2**31), st.sampled_from([3, 5, 7]))
@settings(max_examples=30, deadline=None)
def test_median_values_from_input_windows(seed, w):
    rng = np.random.default_rng(seed)
    x = disk(n=15, r=6)
    # edge windows hold an even count of masked cells, so the median may be a midpoint
    x.values[x.mask] = rng.integers(1, 4, x.mask.sum()).astype(float)
    y = median_filter(x, w)
    h = w // 2
    for i, j in zip(*np.nonzero(x.mask)):
        win = x.values[max(i - h, 0):i + h + 1, max(j - h, 0):j + h + 1]
        m = x.mask[max(i - h, 0):i + h + 1, max(j - h, 0):j + h + 1]
        vals = win[m]
        assert vals.min() <= y.values[i, j] <= vals.max()
        assert y.values[i, j] == np.median(vals)


def test_gaussian_constant():
    x = disk()
    y = gaussian_filter(x, 0.02)
    assert np.max(np.abs(y.values[x.mask] - 5.0)) <= 1e-9
    assert np.array_equal(y.values[~x.mask], x.values[~x.mask])


def test_gaussian_mass_conserved_away_from_edge():
    # impulse well inside a large mask keeps its total mass
    n = 81
    mask = np.ones((n, n), bool)
    vals = np.zeros((n, n))
    vals[40, 40] = 1.0
    y = gaussian_filter(SqrtEpsImage(vals, 0.003, mask), 0.015)
    assert y.values[mask].sum() == pytest.approx(1.0, rel=1e-6)


def test_gaussian_impulse_fwhm():
    n, dx, fwhm = 121, 0.001, 0.012
    vals = np.zeros((n, n))
    vals[60, 60] = 1.0
    y = gaussian_filter(SqrtEpsImage(vals, dx, np.ones((n, n), bool)), fwhm).values[60]
    half = y.max() / 2
    above = np.flatnonzero(y >= half)
    # linear interpolation of the half-maximum crossings
    lo, hi = above[0], above[-1]
    left = lo - 1 + (half - y[lo - 1]) / (y[lo] - y[lo - 1])
    right = hi + (y[hi] - half) / (y[hi] - y[hi + 1])
    assert abs((right - left) * dx - fwhm) <= dx


def test_gaussian_bad_fwhm():
    with pytest.raises(ValueError):
        gaussian_filter(disk(), 0.0)


@given(st.floats(1.0, 8.0), st.floats(0.003, 0.05))
@settings(max_examples=30, deadline=None)
def test_filters_idempotent_on_constants(c, fwhm):
    x = disk(value=c)
    g = gaussian_filter(x, fwhm)
    assert np.allclose(g.values[x.mask], c, rtol=1e-9, atol=0)
    assert np.array_equal(median_filter(x, 3).values, x.values)
