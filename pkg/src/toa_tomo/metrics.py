"""Residual norms, image error, and the timing-resolution rule of thumb."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidContrast, NoValidCells, NoValidPairs
from .fdtd import C0


@dataclass(frozen=True)
class ResidualReport:
    E: float
    valid_pair_count: int
    subset: int | None = None
    display_scale: float = 1.0

    @property
    def display(self) -> float:
        return self.E * self.display_scale


def residual_error(delta: np.ndarray, valid: np.ndarray, subset: int | None = None,
                   display_scale: float = 1.0) -> ResidualReport:
    """L2 norm of the deltas over valid pairs."""
    delta = np.asarray(delta, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    if delta.shape != valid.shape:
        raise ValueError(f"delta shape {delta.shape} does not match valid shape {valid.shape}")
    n = int(valid.sum())
    if n == 0:
        raise NoValidPairs("no valid source/receiver pairs")
    d = delta[valid]
    return ResidualReport(float(np.sqrt(np.dot(d, d))), n, subset, display_scale)


def nrmse(x, truth) -> float:
    """``||x - truth|| / ||truth||`` over masked cells.

    Accepts :class:`SqrtEpsImage` instances (mask taken from ``truth``) or a
    ``(values, mask)`` pair for each argument.
    """
    xv, _ = _values_mask(x)
    tv, mask = _values_mask(truth)
    if xv.shape != tv.shape:
        raise ValueError(f"grid mismatch: {xv.shape} vs {tv.shape}")
    if not mask.any():
        raise NoValidCells("mask is empty")
    diff = xv[mask] - tv[mask]
    return float(np.linalg.norm(diff) / np.linalg.norm(tv[mask]))


def _values_mask(img):
    if isinstance(img, tuple):
        return np.asarray(img[0], float), np.asarray(img[1], bool)
    return img.values, img.mask


def resolution_bound(tau: float, eps: float, delta_eps: float) -> float:
    """Smallest resolvable structure size for timing resolution ``tau`` (linearised straight-ray form)."""
    if delta_eps <= 0:
        raise InvalidContrast(f"delta_eps must be positive, got {delta_eps}")
    if eps < 1 or tau < 0:
        raise ValueError("need eps >= 1 and tau >= 0")
    return 2.0 * tau * C0 * eps * math.sqrt(eps) / delta_eps


def resolution_bound_exact(tau: float, eps: float, delta_eps: float) -> float:
    """Same bound without linearising ``1/sqrt(eps) - 1/sqrt(eps + delta_eps)``."""
    if delta_eps <= 0:
        raise InvalidContrast(f"delta_eps must be positive, got {delta_eps}")
    return tau * C0 / (1.0 / math.sqrt(eps) - 1.0 / math.sqrt(eps + delta_eps))


def resolution_constant(tau: float) -> float:
    """``s * delta_eps / (eps * sqrt(eps))`` implied by timing resolution ``tau``; equals ``2 tau c``."""
    return 2.0 * tau * C0
