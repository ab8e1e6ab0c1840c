"""Phantom description, transducer ring and permittivity rasterization.

All lengths are in meters. Grids are node-centred and symmetric about the
origin: a grid with ``n`` nodes along an axis has coordinates
``(i - (n - 1) / 2) * dx``. Node counts are always odd so that the origin is a
grid node and refining ``dx`` by two keeps every coarse node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidGeometry, InvalidPermittivity, SpecError

BACKGROUND_EPSILON = 53.0


@dataclass(frozen=True)
class Ellipse:
    center_x: float
    center_y: float
    semi_axis_a: float
    semi_axis_b: float
    rotation: float
    epsilon: float

    def __post_init__(self):
        if not (self.semi_axis_a > 0 and self.semi_axis_b > 0):
            raise InvalidGeometry(f"semi-axes must be positive, got {self.semi_axis_a}, {self.semi_axis_b}")
        if not self.epsilon >= 1.0:
            raise InvalidPermittivity(f"ellipse permittivity {self.epsilon} < 1")

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        xr = (x - self.center_x) * c + (y - self.center_y) * s
        yr = -(x - self.center_x) * s + (y - self.center_y) * c
        return (xr / self.semi_axis_a) ** 2 + (yr / self.semi_axis_b) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    """Ordered ellipses over a background; later ellipses win on overlap.

    ``outer_axis_a`` / ``outer_axis_b`` are full axis lengths of the bounding
    phantom ellipse, which is also the transducer ring and the
    reconstruction mask.
    """

    ellipses: tuple[Ellipse, ...]
    background_epsilon: float = BACKGROUND_EPSILON
    outer_axis_a: float = 0.345
    outer_axis_b: float = 0.46

    def __post_init__(self):
        object.__setattr__(self, "ellipses", tuple(self.ellipses))
        if not self.background_epsilon >= 1.0:
            raise InvalidPermittivity(f"background permittivity {self.background_epsilon} < 1")
        if not (self.outer_axis_a > 0 and self.outer_axis_b > 0):
            raise InvalidGeometry("outer axes must be positive")

    def epsilon_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        eps = np.full(x.shape, self.background_epsilon)
        for e in self.ellipses:
            if e.epsilon < 1.0:
                raise InvalidPermittivity(f"ellipse permittivity {e.epsilon} < 1")
            eps[e.contains(x, y)] = e.epsilon
        return eps

    def inside_outer(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        a, b = self.outer_axis_a / 2, self.outer_axis_b / 2
        return (np.asarray(x) / a) ** 2 + (np.asarray(y) / b) ** 2 <= 1.0


@dataclass(frozen=True)
class TransducerRing:
    count: int
    outer_axis_a: float
    outer_axis_b: float

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.count) / self.count


def transducer_positions(ring: TransducerRing) -> np.ndarray:
    """Positions ``(u, v) = (a cos t, b sin t)`` on the ring, shape (count, 2)."""
    if ring.count < 2:
        raise InvalidGeometry(f"ring needs at least 2 transducers, got {ring.count}")
    if not (ring.outer_axis_a > 0 and ring.outer_axis_b > 0):
        raise InvalidGeometry("ring axes must be positive")
    theta = ring.angles
    a, b = ring.outer_axis_a / 2, ring.outer_axis_b / 2
    return np.column_stack([a * np.cos(theta), b * np.sin(theta)])


def grid_size(length: float, dx: float) -> int:
    """Odd node count closest to ``length / dx``."""
    n = length / dx
    lo = 2 * math.floor((n - 1) / 2) + 1
    hi = lo + 2
    return max(1, lo if n - lo <= hi - n else hi)


def grid_axis(n: int, dx: float) -> np.ndarray:
    return (np.arange(n) - (n - 1) / 2) * dx


@dataclass
class MediumMap:
    """Relative permittivity sampled on a node grid, array shape ``(ny, nx)``."""

    epsilon: np.ndarray
    dx: float
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.epsilon = np.asarray(self.epsilon, dtype=float)
        if self.epsilon.ndim != 2:
            raise InvalidGeometry("epsilon must be 2D")
        if not np.all(np.isfinite(self.epsilon)) or np.any(self.epsilon < 1.0):
            raise InvalidPermittivity("medium permittivity must be finite and >= 1")

    @property
    def nx(self) -> int:
        return self.epsilon.shape[1]

    @property
    def ny(self) -> int:
        return self.epsilon.shape[0]

    @property
    def x(self) -> np.ndarray:
        return grid_axis(self.nx, self.dx)

    @property
    def y(self) -> np.ndarray:
        return grid_axis(self.ny, self.dx)

    def node_index(self, x: float, y: float) -> tuple[int, int]:
        """Nearest node ``(iy, ix)`` to a physical point."""
        ix = int(round(x / self.dx + (self.nx - 1) / 2))
        iy = int(round(y / self.dx + (self.ny - 1) / 2))
        return iy, ix


def grid_coordinates(dx: float, area: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    nx, ny = grid_size(area[0], dx), grid_size(area[1], dx)
    return np.meshgrid(grid_axis(nx, dx), grid_axis(ny, dx))


def rasterize(spec: PhantomSpec, dx: float, area: tuple[float, float] = (1.0, 1.0)) -> MediumMap:
    """Point-sample the phantom at every grid node."""
    if dx <= 0:
        raise InvalidGeometry(f"dx must be positive, got {dx}")
    X, Y = grid_coordinates(dx, area)
    return MediumMap(spec.epsilon_at(X, Y), dx)


def phantom_mask(spec: PhantomSpec, dx: float, area: tuple[float, float]) -> np.ndarray:
    X, Y = grid_coordinates(dx, area)
    return spec.inside_outer(X, Y)


# Classic Shepp-Logan table on [-1, 1]^2: (x0, y0, a, b, rotation_deg, class)
_SHEPP_LOGAN = [
    (0.0, 0.0, 0.69, 0.92, 0.0, "outer"),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, "outer"),
    (0.22, 0.0, 0.11, 0.31, -18.0, "dark"),
    (-0.22, 0.0, 0.16, 0.41, 18.0, "dark"),
    (0.0, 0.35, 0.21, 0.25, 0.0, "small"),
    (0.0, 0.1, 0.046, 0.046, 0.0, "small"),
    (0.0, -0.1, 0.046, 0.046, 0.0, "small"),
    (-0.08, -0.605, 0.046, 0.023, 0.0, "small"),
    (0.0, -0.606, 0.023, 0.023, 0.0, "small"),
    (0.06, -0.605, 0.023, 0.046, 0.0, "small"),
]
SHEPP_LOGAN_EPSILON = {"outer": 50.0, "dark": 16.0, "small": 45.0}


def make_shepp_logan(axis_a: float = 0.345, axis_b: float = 0.46) -> PhantomSpec:
    """Shepp-Logan layout whose outer ellipse has full axes ``axis_a`` x ``axis_b``."""
    sx = (axis_a / 2) / 0.69
    sy = (axis_b / 2) / 0.92
    ellipses = [
        Ellipse(x0 * sx, y0 * sy, a * sx, b * sy, math.radians(rot), SHEPP_LOGAN_EPSILON[cls])
        for x0, y0, a, b, rot, cls in _SHEPP_LOGAN
    ]
    return PhantomSpec(tuple(ellipses), BACKGROUND_EPSILON, axis_a, axis_b)


def make_two_ellipse(axis_a: float = 0.2, axis_b: float = 0.16) -> PhantomSpec:
    """Small test phantom: an eps=50 body holding one off-centre eps=16 inclusion."""
    a, b = axis_a / 2, axis_b / 2
    ellipses = (
        Ellipse(0.0, 0.0, a, b, 0.0, 50.0),
        Ellipse(0.25 * a, 0.1 * b, 0.4 * a, 0.45 * b, math.radians(20.0), 16.0),
    )
    return PhantomSpec(ellipses, BACKGROUND_EPSILON, axis_a, axis_b)


BUILTINS = {"shepp-logan": make_shepp_logan, "two-ellipse": make_two_ellipse}


def builtin_phantom(name: str) -> PhantomSpec:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise SpecError(f"unknown builtin phantom {name!r}; choose from {sorted(BUILTINS)}") from None


def parse_phantom(text: str) -> PhantomSpec:
    """Parse the line-oriented phantom format.

    ``background <eps>`` and ``outer <axis_a> <axis_b>`` header lines, then one
    ellipse per line as ``cx cy sa sb rot eps``. ``#`` starts a comment.
    """
    background = BACKGROUND_EPSILON
    outer = None
    ellipses = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "background":
                (background,) = map(float, parts[1:])
            elif parts[0] == "outer":
                outer = tuple(map(float, parts[1:]))
                if len(outer) != 2:
                    raise ValueError("outer needs two axes")
            else:
                vals = list(map(float, parts))
                if len(vals) != 6:
                    raise ValueError(f"expected 6 fields, got {len(vals)}")
                ellipses.append(Ellipse(*vals))
        except (InvalidGeometry, InvalidPermittivity):
            raise
        except ValueError as exc:
            raise SpecError(f"line {lineno}: {exc}: {raw!r}") from None
    if outer is None:
        raise SpecError("phantom spec is missing the 'outer <axis_a> <axis_b>' line")
    return PhantomSpec(tuple(ellipses), background, *outer)


def format_phantom(spec: PhantomSpec) -> str:
    lines = [f"background {spec.background_epsilon!r}", f"outer {spec.outer_axis_a!r} {spec.outer_axis_b!r}"]
    lines.append("# cx cy sa sb rot eps")
    for e in spec.ellipses:
        lines.append(" ".join(repr(float(v)) for v in (e.center_x, e.center_y, e.semi_axis_a,
                                                        e.semi_axis_b, e.rotation, e.epsilon)))
    return "\n".join(lines) + "\n"


def load_phantom(source: str | Path) -> PhantomSpec:
    """Load a builtin (``builtin:<name>`` or bare builtin name) or a spec file."""
    s = str(source)
    if s.startswith("builtin:"):
        return builtin_phantom(s.split(":", 1)[1])
    if s in BUILTINS:
        return builtin_phantom(s)
    path = Path(s)
    if not path.is_file():
        raise SpecError(f"phantom file not found: {s}")
    return parse_phantom(path.read_text())
