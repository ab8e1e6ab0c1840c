"""Run configuration: a flat ``key = value`` text file with typed fields and a stable hash."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import SpecError
from .recon import ReconConfig, ResolutionStage

# keys that never change numerical results
UNHASHED = frozenset({"workers", "out", "measured", "snapshot_every", "dump_fields", "checkpoint_every"})


@dataclass(frozen=True)
class RunConfig:
    phantom: str = "builtin:shepp-logan"
    ring_count: int = 300
    area: tuple[float, float] = (1.0, 1.0)
    stages: tuple[ResolutionStage, ...] = (
        ResolutionStage(0.018, 60e-12, 1), ResolutionStage(0.009, 30e-12, 201), ResolutionStage(0.003, 10e-12, 901))
    fc: float = 300e6
    fw: float = 450e6
    cutoff: float = 450e6
    clamp: float = 1000e-12
    threshold: float = 0.2
    courant_factor: float = 0.5
    boundary_cells: int = 20
    eps_bound: float = 64.0
    iterations: int = 1200
    subset_count: int = 10
    batch_size: int = 8
    fresh_pair_budget: int = 200
    lam: float = 1.0
    caps: tuple[tuple[int, float], ...] = ((0, 0.3), (500, 0.15), (700, 0.1))
    scheme_ii_after: int = 400
    scheme_iii_after: int = 700
    fwhm_ranges: tuple[tuple[int, tuple[float, float]], ...] = (
        (0, (9e-3, 18e-3)), (700, (3e-3, 18e-3)), (900, (1e-3, 6e-3)))
    median_sizes: tuple[int, int] = (2, 15)
    smooth_fwhm: tuple[float, float] = (15e-3, 30e-3)
    pool_max: int = 64
    oscillation_window: int = 0
    variance_floor: float = 0.01
    median_window: int = 3
    seed: int = 0
    workers: int = 1
    out: str = "run"
    measured: str = ""
    snapshot_every: int = 0
    dump_fields: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        for name in ("fc", "fw", "cutoff", "clamp", "threshold", "courant_factor", "eps_bound", "lam"):
            if not getattr(self, name) > 0:
                raise SpecError(f"{name} must be positive")
        for name in ("ring_count", "iterations", "subset_count", "batch_size", "fresh_pair_budget", "workers"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if min(self.area) <= 0:
            raise SpecError("area must be positive")
        try:
            self.recon_config()
        except ValueError as exc:
            raise SpecError(str(exc)) from None

    def recon_config(self) -> ReconConfig:
        return ReconConfig(
            stages=self.stages, iterations=self.iterations, subset_count=self.subset_count,
            batch_size=self.batch_size, fresh_pair_budget=self.fresh_pair_budget, lam=self.lam, clamp=self.clamp,
            caps=self.caps, scheme_ii_after=self.scheme_ii_after, scheme_iii_after=self.scheme_iii_after,
            fwhm_ranges=self.fwhm_ranges, median_sizes=self.median_sizes, smooth_fwhm=self.smooth_fwhm,
            pool_max=self.pool_max, oscillation_window=self.oscillation_window or None,
            variance_floor=self.variance_floor, seed=self.seed)

    @property
    def finest(self) -> ResolutionStage:
        return self.stages[-1]

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> str:
        text = "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self) if f.name not in UNHASHED)
        return hashlib.sha256(text.encode()).hexdigest()

    def with_overrides(self, values: dict[str, str]) -> "RunConfig":
        return replace(self, **_convert(values))


# text codecs --------------------------------------------------------------

def _num(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _format(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], ResolutionStage):
        return ", ".join(f"{_num(s.dx)}:{_num(s.tau)}:{s.start_iteration}" for s in value)
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ", ".join(":".join(_num(a) if not isinstance(a, tuple) else ":".join(_num(b) for b in a)
                                  for a in item) for item in value)
    if isinstance(value, tuple):
        return " ".join(_num(v) for v in value)
    return _num(value)


def _groups(text: str) -> list[list[str]]:
    return [[p.strip() for p in item.split(":")] for item in text.split(",") if item.strip()]


def _parse_value(name: str, text: str):
    text = text.strip()
    if name == "stages":
        out = tuple(ResolutionStage(float(g[0]), float(g[1]), int(g[2])) for g in _groups(text))
        if not out:
            raise ValueError("no stages")
        return out
    if name == "caps":
        return tuple((int(g[0]), float(g[1])) for g in _groups(text))
    if name == "fwhm_ranges":
        return tuple((int(g[0]), (float(g[1]), float(g[2]))) for g in _groups(text))
    if name in ("area", "smooth_fwhm"):
        a, b = text.split()
        return float(a), float(b)
    if name == "median_sizes":
        a, b = text.split()
        return int(a), int(b)
    kind = type(getattr(RunConfig, name))
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _convert(values: dict[str, str]) -> dict:
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for key, text in values.items():
        key = key.strip().replace("-", "_")
        if key not in known:
            raise SpecError(f"unknown config key {key!r}")
        try:
            out[key] = _parse_value(key, text)
        except (ValueError, IndexError):
            raise SpecError(f"bad value for {key}: {text!r}") from None
    return out


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {n}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise SpecError(f"cannot read config {path}: {exc}") from None
    values.update(overrides or {})
    return RunConfig().with_overrides(values)


DESK = {
    "phantom": "builtin:two-ellipse",
    "ring_count": "16",
    "area": "0.25 0.25",
    "stages": "0.009:30e-12:1, 0.0045:15e-12:11",
    "boundary_cells": "10",
    "iterations": "60",
    "subset_count": "4",
    "fresh_pair_budget": "48",
    "lam": "0.2",
    "fwhm_ranges": "0:0.03:0.06",
    "pool_max": "16",
    "seed": "1",
}


def desk_config(**overrides) -> RunConfig:
    """The scaled-down two-ellipse experiment used by the acceptance suite."""
    values = dict(DESK)
    values.update({k: str(v) for k, v in overrides.items()})
    return RunConfig().with_overrides(values)
