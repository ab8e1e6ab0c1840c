"""Forward projection: sqrt(eps) image -> arrival time for every source/receiver pair.

Every transducer on the ring acts both as a source (one FDTD run each) and
as a receiver. Arrival times are reported relative to the far-field pulse
reference of :func:`toa_tomo.fdtd.source_reference_time`, so they are
directly comparable across record periods.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import toa
from .errors import InvalidPartition
from .fdtd import C0, SimConfig, SourceWaveform, gaussian_pulse, simulate, source_reference_time
from .phantom import BACKGROUND_EPSILON, MediumMap, PhantomSpec, TransducerRing, grid_axis, grid_coordinates, transducer_positions

EXTERIOR_SQRT_EPS = math.sqrt(BACKGROUND_EPSILON)


@dataclass
class SqrtEpsImage:
    """Reconstruction unknown: sqrt(eps) on a node grid, indexed ``[iy, ix]``.

    Cells outside ``mask`` are pinned to ``exterior``.
    """

    values: np.ndarray
    dx: float
    mask: np.ndarray
    exterior: float = EXTERIOR_SQRT_EPS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("values and mask shapes differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def copy(self) -> "SqrtEpsImage":
        return SqrtEpsImage(self.values.copy(), self.dx, self.mask.copy(), self.exterior)

    def enforce(self) -> "SqrtEpsImage":
        """Clip to >= 1 inside the mask and re-pin the exterior, in place."""
        np.maximum(self.values, 1.0, out=self.values)
        self.values[~self.mask] = self.exterior
        return self

    def with_values(self, values: np.ndarray) -> "SqrtEpsImage":
        return SqrtEpsImage(values, self.dx, self.mask.copy(), self.exterior).enforce()

    def medium(self) -> MediumMap:
        return MediumMap(self.values ** 2, self.dx)

    @classmethod
    def uniform(cls, spec: PhantomSpec, dx: float, area: tuple[float, float], value: float = 7.0,
                exterior: float | None = None) -> "SqrtEpsImage":
        X, Y = grid_coordinates(dx, area)
        mask = spec.inside_outer(X, Y)
        ext = math.sqrt(spec.background_epsilon) if exterior is None else exterior
        values = np.where(mask, value, ext)
        return cls(values, dx, mask, ext)

    @classmethod
    def from_phantom(cls, spec: PhantomSpec, dx: float, area: tuple[float, float]) -> "SqrtEpsImage":
        X, Y = grid_coordinates(dx, area)
        return cls(np.sqrt(spec.epsilon_at(X, Y)), dx, spec.inside_outer(X, Y), math.sqrt(spec.background_epsilon))


@dataclass
class ProjectionVector:
    """Arrival times ``[source, receiver]`` in seconds plus per-entry validity."""

    arrival: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.arrival = np.asarray(self.arrival, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.arrival.shape != self.valid.shape:
            raise ValueError("arrival and valid shapes differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.arrival.shape

    @classmethod
    def empty(cls, n_sources: int, n_receivers: int) -> "ProjectionVector":
        return cls(np.full((n_sources, n_receivers), np.nan), np.zeros((n_sources, n_receivers), bool))


@dataclass(frozen=True)
class SubsetPartition:
    subset_count: int
    assignment: np.ndarray

    def sources(self, subset: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == subset)


def make_subsets(source_count: int, subset_count: int) -> SubsetPartition:
    """Interleaved partition: source ``k`` goes to subset ``k % subset_count``."""
    if not 1 <= subset_count <= source_count:
        raise InvalidPartition(f"subset_count must be in [1, {source_count}], got {subset_count}")
    return SubsetPartition(subset_count, np.arange(source_count) % subset_count)


PeakTable = list  # [source][receiver] -> np.ndarray of relative peak times


def _simulate_job(job):
    eps, dx, source, probes, waveform, config, cutoff, threshold, tref, keep = job
    traces = simulate(MediumMap(eps, dx), tuple(source), waveform, [tuple(p) for p in probes], config)
    peaks = [toa.peak_times(toa.envelope(tr, cutoff), threshold) - tref for tr in traces]
    samples = np.array([tr.samples for tr in traces]) if keep else None
    return peaks, samples


@lru_cache(maxsize=64)
def _tref(waveform: SourceWaveform, tau: float, cutoff: float, threshold: float) -> float:
    return source_reference_time(waveform, tau, cutoff, threshold)


def default_workers() -> int:
    return max(1, int(os.environ.get("TOA_TOMO_WORKERS", "1")))


@dataclass
class ForwardModel:
    """Simulation settings shared by every forward projection of a run."""

    positions: np.ndarray
    waveform: SourceWaveform = field(default_factory=lambda: gaussian_pulse(300e6, 450e6))
    cutoff: float = toa.DEFAULT_CUTOFF
    threshold: float = toa.DEFAULT_THRESHOLD
    courant_factor: float = 0.5
    boundary_cells: int = 20
    eps_bound: float = 64.0
    record_duration: float | None = None
    workers: int = 1
    _pool: ProcessPoolExecutor | None = field(default=None, repr=False, compare=False)

    @classmethod
    def for_ring(cls, ring: TransducerRing, **kw) -> "ForwardModel":
        return cls(transducer_positions(ring), **kw)

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def duration(self) -> float:
        """Record length covering the slowest path: half the ring perimeter at ``sqrt(eps_bound)``."""
        if self.record_duration is not None:
            return self.record_duration
        travel = _half_perimeter(self.positions) * math.sqrt(self.eps_bound) / C0
        return self.waveform.cutoff_duration + travel + 8 * self.waveform.sigma

    def sim_config(self, dx: float, tau: float) -> SimConfig:
        return SimConfig(dx, tau, self.duration, self.courant_factor, self.boundary_cells)

    def tref(self, tau: float) -> float:
        return _tref(self.waveform, tau, self.cutoff, self.threshold)

    def _map(self, jobs):
        if self.workers <= 1 or len(jobs) <= 1:
            return [_simulate_job(j) for j in jobs]
        if self._pool is None:
            self._pool = ProcessPoolExecutor(self.workers)
        # map preserves submission order, so assembly is position-indexed
        return list(self._pool.map(_simulate_job, jobs))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _jobs(self, media: Sequence[MediumMap], tau: float, sources: Sequence[int], keep: bool):
        tref = self.tref(tau)
        jobs = []
        for m in media:
            cfg = self.sim_config(m.dx, tau)
            for s in sources:
                jobs.append((m.epsilon, m.dx, self.positions[s], self.positions, self.waveform, cfg,
                             self.cutoff, self.threshold, tref, keep))
        return jobs

    def peaks_batch(self, images: Sequence[SqrtEpsImage], tau: float, sources: Sequence[int]) -> list[PeakTable]:
        """Relative peak times for several images; one FDTD run per (image, source)."""
        sources = list(sources)
        out = self._map(self._jobs([im.medium() for im in images], tau, sources, False))
        n = len(sources)
        return [[out[i * n + k][0] for k in range(n)] for i in range(len(images))]

    def peaks(self, image: SqrtEpsImage, tau: float, sources: Sequence[int]) -> PeakTable:
        return self.peaks_batch([image], tau, sources)[0]

    def acquire(self, medium: MediumMap, tau: float) -> tuple[PeakTable, list[np.ndarray]]:
        """Peaks and raw traces for every source, as used for measured data."""
        out = self._map(self._jobs([medium], tau, range(self.count), True))
        return [o[0] for o in out], [o[1] for o in out]


def first_arrivals(peaks: PeakTable, sources: Sequence[int], n_sources: int) -> ProjectionVector:
    """Scatter the first peak of each receiver into a full ``(n_sources, n_receivers)`` vector."""
    n_rx = len(peaks[0]) if peaks else 0
    pv = ProjectionVector.empty(n_sources, n_rx)
    for row, s in zip(peaks, sources):
        for r, times in enumerate(row):
            if len(times):
                pv.arrival[s, r] = times[0]
                pv.valid[s, r] = True
    return pv


def forward_project(x: SqrtEpsImage, ring: TransducerRing, config: SimConfig, subset: int | None = None,
                    partition: SubsetPartition | None = None, waveform: SourceWaveform | None = None,
                    cutoff: float = toa.DEFAULT_CUTOFF, threshold: float = toa.DEFAULT_THRESHOLD,
                    workers: int = 1) -> ProjectionVector:
    """``y = f(x)``: first-peak arrival per pair; sources outside ``subset`` are left invalid."""
    if config.dx != x.dx:
        raise ValueError(f"config dx {config.dx} does not match image dx {x.dx}")
    model = ForwardModel(transducer_positions(ring), waveform or gaussian_pulse(300e6, 450e6), cutoff, threshold,
                         config.courant_factor, config.boundary_cells, record_duration=config.duration,
                         workers=workers)
    n = model.count
    if subset is None:
        sources = np.arange(n)
    else:
        partition = partition or make_subsets(n, 10)
        sources = partition.sources(subset)
    try:
        peaks = model.peaks(x, config.record_period, sources)
    finally:
        model.close()
    return first_arrivals(peaks, sources, n)


def _half_perimeter(positions: np.ndarray) -> float:
    """Ramanujan's approximation, treating the extreme radii as semi-axes."""
    r = np.hypot(*positions.T)
    a, b = r.max(), r.min()
    h = ((a - b) / (a + b)) ** 2 if a + b > 0 else 0.0
    return 0.5 * math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))


def matched_deltas(ref_peaks: PeakTable, t: np.ndarray, t_valid: np.ndarray, sources: Sequence[int],
                   clamp: float) -> tuple[np.ndarray, np.ndarray]:
    """Clamped ``nearest reference peak - t`` for the given source rows.

    ``t`` and ``t_valid`` are full ``(n_sources, n_receivers)`` arrays; the
    result has one row per entry of ``sources``.
    """
    sources = list(sources)
    n_rx = t.shape[1]
    delta = np.zeros((len(sources), n_rx))
    valid = np.zeros((len(sources), n_rx), bool)
    for i, s in enumerate(sources):
        for r in range(n_rx):
            if not t_valid[s, r]:
                continue
            d, ok = toa.nearest_delta(ref_peaks[s][r], t[s, r], clamp)
            delta[i, r] = d
            valid[i, r] = ok
    return delta, valid


def projection_delta(y0: ProjectionVector, yn: ProjectionVector, ref_peaks: PeakTable,
                     clamp: float = toa.DEFAULT_CLAMP) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair clamped ``y0 - y(n)``.

    The current first arrival ``yn`` is matched to the nearest peak of the
    measured reference (``ref_peaks[s][r]``, same relative time base). Pairs
    invalid on either side get 0 and ``valid=False``.
    """
    if y0.shape != yn.shape:
        raise ValueError(f"projection shapes differ: {y0.shape} vs {yn.shape}")
    both = y0.valid & yn.valid
    delta, valid = matched_deltas(ref_peaks, yn.arrival, both, range(y0.shape[0]), clamp)
    return delta, valid & both


def peaks_from_traces(samples: np.ndarray, tau: float, tref: float, cutoff: float, threshold: float) -> list[np.ndarray]:
    """Relative peak times per receiver from a stored ``(n_receivers, nbins)`` trace block."""
    return [toa.peak_times(toa.envelope(toa.SignalTrace(0.5 * tau, tau, row), cutoff), threshold) - tref
            for row in samples]


def image_axes(image: SqrtEpsImage) -> tuple[np.ndarray, np.ndarray]:
    ny, nx = image.shape
    return grid_axis(nx, image.dx), grid_axis(ny, image.dx)
