"""Mask-restricted median and Gaussian filters for sqrt(eps) images.

Windows never reach outside the mask, so the fixed exterior value does not
bleed into the reconstruction.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import InvalidWindow
from .projection import SqrtEpsImage

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def masked_median(values: np.ndarray, mask: np.ndarray, size: int) -> np.ndarray:
    """Median over a ``size x size`` window of masked cells; unmasked cells are returned unchanged.

    Even sizes are allowed; the extra row/column sits on the low-index side.
    """
    if size < 1:
        raise InvalidWindow(f"window must be >= 1, got {size}")
    out = np.array(values, dtype=float, copy=True)
    if size == 1 or not mask.any():
        return out
    lo = size // 2
    hi = size - 1 - lo
    padded = np.pad(np.where(mask, values, np.nan), ((lo, hi), (lo, hi)), constant_values=np.nan)
    rows, cols = np.nonzero(mask)
    windows = sliding_window_view(padded, (size, size))[rows, cols].reshape(len(rows), -1)
    out[rows, cols] = np.nanmedian(windows, axis=1)
    return out


def masked_gaussian(values: np.ndarray, mask: np.ndarray, sigma_cells: float) -> np.ndarray:
    """Normalised convolution: ``G*(m x) / G*m`` inside the mask."""
    out = np.array(values, dtype=float, copy=True)
    if sigma_cells <= 0 or not mask.any():
        return out
    m = mask.astype(float)
    num = ndimage.gaussian_filter(np.where(mask, values, 0.0), sigma_cells, mode="constant")
    den = ndimage.gaussian_filter(m, sigma_cells, mode="constant")
    out[mask] = num[mask] / den[mask]
    return out


def median_filter(x: SqrtEpsImage, window: int = 3) -> SqrtEpsImage:
    if window < 1 or window % 2 == 0:
        raise InvalidWindow(f"median window must be odd and >= 1, got {window}")
    return SqrtEpsImage(masked_median(x.values, x.mask, window), x.dx, x.mask.copy(), x.exterior)


def gaussian_filter(x: SqrtEpsImage, fwhm: float) -> SqrtEpsImage:
    """Separable Gaussian blur of the given FWHM (meters), renormalised over masked cells."""
    if fwhm <= 0:
        raise ValueError(f"fwhm must be positive, got {fwhm}")
    sigma = fwhm / FWHM_PER_SIGMA / x.dx
    return SqrtEpsImage(masked_gaussian(x.values, x.mask, sigma), x.dx, x.mask.copy(), x.exterior)
