"""Arrival-time extraction from recorded energy traces.

Pipeline: zero-phase low-pass envelope, threshold-gated first local maximum,
sub-sample refinement by fitting a Gaussian (a parabola in log space) to the
samples above half of the peak, and nearest-peak matching against a
reference trace with a symmetric clamp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import InvalidFilter

DEFAULT_THRESHOLD = 0.2
DEFAULT_CLAMP = 1000e-12
DEFAULT_CUTOFF = 450e6
FILTER_ORDER = 4


@dataclass
class SignalTrace:
    """Uniformly sampled non-negative energy series; sample k sits at ``start_time + k * sample_period``."""

    start_time: float
    sample_period: float
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if not self.sample_period > 0:
            raise ValueError("sample_period must be positive")
        if not np.all(np.isfinite(self.samples)) or np.any(self.samples < 0):
            raise ValueError("samples must be finite and non-negative")

    @property
    def times(self) -> np.ndarray:
        return self.start_time + self.sample_period * np.arange(len(self.samples))

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class PeakDetection:
    time: float
    peak_value: float
    valid: bool


INVALID_PEAK = PeakDetection(float("nan"), 0.0, False)


def envelope(trace: SignalTrace, cutoff: float = DEFAULT_CUTOFF) -> SignalTrace:
    """Zero-phase Butterworth low-pass (applied forward and backward), negatives clamped to zero."""
    nyquist = 0.5 / trace.sample_period
    if not 0 < cutoff < nyquist:
        raise InvalidFilter(f"cutoff {cutoff:g} Hz must lie in (0, Nyquist={nyquist:g} Hz)")
    x = trace.samples
    if len(x) == 0:
        return SignalTrace(trace.start_time, trace.sample_period, x.copy())
    sos = signal.butter(FILTER_ORDER, cutoff, fs=1.0 / trace.sample_period, output="sos")
    # constant padding keeps DC exact and avoids the odd-extension overshoot
    padlen = min(len(x) - 1, 3 * int(np.ceil(1.0 / (cutoff * trace.sample_period))) + 1)
    if padlen < 1:
        y = x.copy()
    else:
        y = signal.sosfiltfilt(sos, x, padtype="constant", padlen=padlen)
    return SignalTrace(trace.start_time, trace.sample_period, np.clip(y, 0.0, None))


def _local_maxima(x: np.ndarray, floor: float) -> np.ndarray:
    """Indices of local maxima with value >= floor.

    Plateaus count once, at their first sample. Endpoints qualify when they
    exceed their single neighbour.
    """
    n = len(x)
    if n == 0:
        return np.empty(0, dtype=int)
    if n == 1:
        return np.array([0]) if x[0] >= floor and x[0] > 0 else np.empty(0, dtype=int)
    out = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and x[j + 1] == x[i]:
            j += 1
        left_ok = i == 0 or x[i - 1] < x[i]
        right_ok = j == n - 1 or x[j + 1] < x[i]
        if left_ok and right_ok and x[i] >= floor and x[i] > 0:
            out.append(i)
        i = j + 1
    return np.asarray(out, dtype=int)


def _refine(x: np.ndarray, k: int) -> float:
    """Sub-sample offset of peak ``k`` from a log-parabola fit over its half-maximum span."""
    half = 0.5 * x[k]
    lo = k
    while lo > 0 and x[lo - 1] >= half and x[lo - 1] <= x[lo]:
        lo -= 1
    hi = k
    while hi < len(x) - 1 and x[hi + 1] >= half and x[hi + 1] <= x[hi]:
        hi += 1
    if hi - lo + 1 < 3:
        return float(k)
    idx = np.arange(lo, hi + 1)
    u = (idx - k).astype(float)
    coef = np.polyfit(u, np.log(x[idx]), 2)
    if coef[0] >= 0:
        return float(k)
    offset = -coef[1] / (2 * coef[0])
    return k + float(np.clip(offset, lo - k, hi - k))


def find_peaks(env: SignalTrace, threshold_fraction: float = DEFAULT_THRESHOLD) -> list[PeakDetection]:
    """All refined local maxima at or above ``threshold_fraction`` of the global maximum."""
    if not 0 < threshold_fraction < 1:
        raise ValueError(f"threshold_fraction must lie in (0, 1), got {threshold_fraction}")
    x = env.samples
    if len(x) == 0 or not np.any(x > 0):
        return []
    floor = threshold_fraction * x.max()
    peaks = []
    for k in _local_maxima(x, floor):
        pos = _refine(x, k)
        peaks.append(PeakDetection(env.start_time + pos * env.sample_period, float(x[k]), True))
    return peaks


def detect_first_peak(env: SignalTrace, threshold_fraction: float = DEFAULT_THRESHOLD) -> PeakDetection:
    """Earliest local maximum reaching ``threshold_fraction`` of the trace maximum."""
    peaks = find_peaks(env, threshold_fraction)
    return peaks[0] if peaks else INVALID_PEAK


def peak_times(env: SignalTrace, threshold_fraction: float = DEFAULT_THRESHOLD) -> np.ndarray:
    return np.array([p.time for p in find_peaks(env, threshold_fraction)])


def nearest_delta(ref_times: np.ndarray, t: float, clamp: float = DEFAULT_CLAMP) -> tuple[float, bool]:
    """Clamped ``nearest(ref_times) - t``; ``(0.0, False)`` when there is no reference peak."""
    if len(ref_times) == 0 or not np.isfinite(t):
        return 0.0, False
    k = int(np.argmin(np.abs(ref_times - t)))
    return float(np.clip(ref_times[k] - t, -clamp, clamp)), True


def nearest_peak_delta(reference: SignalTrace, t: float, clamp: float = DEFAULT_CLAMP,
                       threshold_fraction: float = DEFAULT_THRESHOLD) -> float:
    """Offset from ``t`` to the closest reference peak, clamped to ``[-clamp, clamp]``.

    Returns 0 when the reference holds no detectable peak; callers that need
    to tell this apart use :func:`nearest_delta`.
    """
    if clamp <= 0:
        raise ValueError("clamp must be positive")
    delta, _ = nearest_delta(peak_times(reference, threshold_fraction), t, clamp)
    return delta
