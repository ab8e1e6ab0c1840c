"""Learned-update iterative reconstruction of a sqrt(eps) image from arrival times.

Each iteration perturbs the current image with random training images,
measures how each perturbation moves the arrival times, and regresses the
observed residual onto those moves. The regressed combination of training
images is the candidate update, accepted only if it lowers the residual.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import toa
from .errors import NoValidPairs, SchemeNotAvailable, SubsetUnusable, ZeroDesignMatrix
from .metrics import nrmse, residual_error
from .phantom import PhantomSpec
from .postprocess import FWHM_PER_SIGMA, masked_gaussian, masked_median
from .projection import ForwardModel, PeakTable, SqrtEpsImage, make_subsets

INITIAL_SQRT_EPS = 7.0
SCHEMES = ("i", "ii", "iii")


@dataclass(frozen=True)
class ResolutionStage:
    dx: float
    tau: float
    start_iteration: int
    end_iteration: int | None = None


DEFAULT_STAGES = (
    ResolutionStage(0.018, 60e-12, 1, 200),
    ResolutionStage(0.009, 30e-12, 201, 900),
    ResolutionStage(0.003, 10e-12, 901, None),
)


@dataclass(frozen=True)
class ReconConfig:
    """Iteration schedule and regression settings.

    Schedules are tuples of ``(after_iteration, value)``: the last entry whose
    threshold is strictly below the iteration number applies.
    """

    stages: tuple[ResolutionStage, ...] = DEFAULT_STAGES
    iterations: int = 1200
    subset_count: int = 10
    batch_size: int = 8
    fresh_pair_budget: int = 200
    lam: float = 1.0
    clamp: float = toa.DEFAULT_CLAMP
    caps: tuple[tuple[int, float], ...] = ((0, 0.3), (500, 0.15), (700, 0.1))
    scheme_ii_after: int = 400
    scheme_iii_after: int = 700
    fwhm_ranges: tuple[tuple[int, tuple[float, float]], ...] = (
        (0, (9e-3, 18e-3)), (700, (3e-3, 18e-3)), (900, (1e-3, 6e-3)))
    median_sizes: tuple[int, int] = (2, 15)
    smooth_fwhm: tuple[float, float] = (15e-3, 30e-3)
    pool_max: int = 64
    oscillation_window: int | None = None
    variance_floor: float = 0.01
    pin_subset: int = 0
    seed: int = 0

    def __post_init__(self):
        prev = None
        for st in self.stages:
            if st.dx <= 0 or st.tau <= 0:
                raise ValueError("stage dx and tau must be positive")
            if prev is not None and not (st.start_iteration > prev.start_iteration and st.tau < prev.tau):
                raise ValueError("stages must be ordered coarse to fine with decreasing tau")
            prev = st
        if self.batch_size < 1 or self.fresh_pair_budget < self.batch_size:
            raise ValueError("need 1 <= batch_size <= fresh_pair_budget")

    @property
    def window(self) -> int:
        return self.oscillation_window or 3 * self.subset_count


def _scheduled(schedule, iteration: int):
    value = schedule[0][1]
    for after, v in schedule:
        if iteration > after:
            value = v
    return value


def cap_for(iteration: int, cfg: ReconConfig = ReconConfig()) -> float:
    return _scheduled(cfg.caps, iteration)


def available_schemes(iteration: int, cfg: ReconConfig = ReconConfig()) -> tuple[str, ...]:
    out = ["i"]
    if iteration > cfg.scheme_ii_after:
        out.append("ii")
    if iteration > cfg.scheme_iii_after:
        out.append("iii")
    return tuple(out)


@dataclass
class TrainingPair:
    dx_image: np.ndarray          # applied perturbation on the stage grid
    dy: np.ndarray                # (subset sources, receivers) arrival shift in seconds
    valid: np.ndarray
    subset: int
    stage: int

    @property
    def amplitude(self) -> float:
        return float(np.abs(self.dx_image).max(initial=0.0))


@dataclass
class UpdateWeights:
    V: np.ndarray
    lam: float
    residual: float


@dataclass
class PinnedEval:
    delta: np.ndarray
    valid: np.ndarray
    E: float


@dataclass
class ReconState:
    x: SqrtEpsImage
    iteration: int = 1            # next iteration to run (1-based)
    stage: int = 0
    rotation: int = 0
    history: list[dict] = field(default_factory=list)
    pool: list[TrainingPair] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    pinned: bool = False
    pinned_eval: PinnedEval | None = None


# training images ----------------------------------------------------------

def _finish(img: np.ndarray, mask: np.ndarray, cap: float) -> np.ndarray:
    img = np.where(mask, img, 0.0)
    m = np.abs(img).max(initial=0.0)
    return img * (cap / m) if m > 0 else img


def _scheme_i(iteration, current, rng, cfg):
    noise = rng.standard_normal(current.shape)
    lo, hi = _scheduled(cfg.fwhm_ranges, iteration)
    fwhm = rng.uniform(lo, hi)
    return ndimage.gaussian_filter(noise, fwhm / FWHM_PER_SIGMA / current.dx, mode="nearest")


def _scheme_ii(iteration, current, rng, cfg):
    if rng.random() < 0.5:
        size = int(rng.integers(cfg.median_sizes[0], cfg.median_sizes[1] + 1))
        smooth = masked_median(current.values, current.mask, size)
    else:
        fwhm = rng.uniform(*cfg.smooth_fwhm)
        smooth = masked_gaussian(current.values, current.mask, fwhm / FWHM_PER_SIGMA / current.dx)
    diff = current.values - smooth
    # rounding residue of a filter that reproduces the image must not be rescaled up to the cap
    diff[np.abs(diff) <= 1e-12 * np.abs(current.values)] = 0.0
    return diff


def gen_training_image(scheme: str, iteration: int, current: SqrtEpsImage, rng: np.random.Generator,
                       cfg: ReconConfig = ReconConfig()) -> np.ndarray:
    """Random perturbation, zero outside the mask, scaled so ``max|.|`` equals the iteration's cap."""
    if scheme not in available_schemes(iteration, cfg):
        raise SchemeNotAvailable(f"scheme {scheme!r} not available at iteration {iteration}")
    if scheme == "i":
        img = _scheme_i(iteration, current, rng, cfg)
    elif scheme == "ii":
        img = _scheme_ii(iteration, current, rng, cfg)
    else:
        img = _scheme_i(iteration, current, rng, cfg) * _scheme_ii(iteration, current, rng, cfg)
    return _finish(img, current.mask, cap_for(iteration, cfg))


def draw_training_image(iteration: int, current: SqrtEpsImage, rng: np.random.Generator,
                        cfg: ReconConfig = ReconConfig()) -> np.ndarray:
    schemes = available_schemes(iteration, cfg)
    return gen_training_image(schemes[int(rng.integers(len(schemes)))], iteration, current, rng, cfg)


# regression ---------------------------------------------------------------

def solve_regression(Y: np.ndarray, target: np.ndarray, lam: float = 1.0,
                     valid: np.ndarray | None = None) -> UpdateWeights:
    """Least-squares weights for ``Y V ~ lam * target`` via damped normal equations.

    ``Y`` is ``(rows, L)``. Rows outside ``valid`` are ignored. The damping
    ``1e-9 * trace(Y'Y) / L`` only matters when columns are (nearly) collinear.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    t = np.asarray(target, dtype=float)
    if valid is not None:
        Y = Y[np.asarray(valid, bool)]
        t = t[np.asarray(valid, bool)]
    L = Y.shape[1]
    if L < 1:
        raise ValueError("need at least one training column")
    G = Y.T @ Y
    tr = float(np.trace(G))
    if tr == 0.0:
        raise ZeroDesignMatrix("all training columns are zero on the valid rows")
    G[np.diag_indices(L)] += 1e-9 * tr / L
    b = lam * t
    V = np.linalg.solve(G, Y.T @ b)
    # iterated refinement removes the damping bias on well-posed columns;
    # null-space components stay zero, so rank-deficient systems keep the min-norm answer
    for _ in range(2):
        V = V + np.linalg.solve(G, Y.T @ (b - Y @ V))
    return UpdateWeights(V, lam, float(np.linalg.norm(b - Y @ V)))


# iteration ----------------------------------------------------------------

@dataclass
class Problem:
    """Everything fixed for a run: measured peaks, forward model, known boundary, settings."""

    model: ForwardModel
    config: ReconConfig
    boundary: PhantomSpec
    area: tuple[float, float]
    ref_peaks: PeakTable
    truth: PhantomSpec | None = None
    _truth_cache: dict = field(default_factory=dict, repr=False)

    @property
    def partition(self):
        return make_subsets(self.model.count, self.config.subset_count)

    def truth_image(self, dx: float) -> SqrtEpsImage | None:
        if self.truth is None:
            return None
        if dx not in self._truth_cache:
            self._truth_cache[dx] = SqrtEpsImage.from_phantom(self.truth, dx, self.area)
        return self._truth_cache[dx]

    def initial_state(self) -> ReconState:
        st = self.config.stages[0]
        x = SqrtEpsImage.uniform(self.boundary, st.dx, self.area, INITIAL_SQRT_EPS)
        return ReconState(x, rng=np.random.default_rng(self.config.seed))


def _first(rows: PeakTable) -> tuple[np.ndarray, np.ndarray]:
    n_rx = len(rows[0])
    t = np.zeros((len(rows), n_rx))
    ok = np.zeros((len(rows), n_rx), bool)
    for i, row in enumerate(rows):
        for r, times in enumerate(row):
            if len(times):
                t[i, r] = times[0]
                ok[i, r] = True
    return t, ok


def _deltas(peak_rows: PeakTable, t: np.ndarray, ok: np.ndarray, clamp: float) -> tuple[np.ndarray, np.ndarray]:
    """Clamped ``nearest peak in peak_rows - t`` per entry; all arguments are subset-local."""
    delta = np.zeros_like(t)
    valid = np.zeros_like(ok)
    for i, row in enumerate(peak_rows):
        for r, times in enumerate(row):
            if ok[i, r]:
                delta[i, r], valid[i, r] = toa.nearest_delta(times, t[i, r], clamp)
    return delta, valid


def _evaluate(problem: Problem, x: SqrtEpsImage, tau: float, sources) -> tuple[np.ndarray, np.ndarray]:
    t, ok = _first(problem.model.peaks(x, tau, sources))
    return _deltas([problem.ref_peaks[s] for s in sources], t, ok, problem.config.clamp)


def _norm(delta, valid) -> float:
    d = delta[valid]
    return float(np.sqrt(np.dot(d, d)))


def resample(x: SqrtEpsImage, dx: float, boundary: PhantomSpec, area: tuple[float, float]) -> SqrtEpsImage:
    """Bilinear resampling of sqrt(eps) onto the grid for ``dx``, with the mask re-rasterised there.

    Exterior cells are first filled from the nearest masked cell so the fixed
    exterior value does not leak into the boundary band.
    """
    new = SqrtEpsImage.uniform(boundary, dx, area, 1.0)
    vals = x.values
    if x.mask.any() and not x.mask.all():
        _, (iy, ix) = ndimage.distance_transform_edt(~x.mask, return_indices=True)
        vals = vals[iy, ix]
    ny, nx = x.shape
    X, Y = np.meshgrid((np.arange(new.shape[1]) - (new.shape[1] - 1) / 2) * dx,
                       (np.arange(new.shape[0]) - (new.shape[0] - 1) / 2) * dx)
    ci = X / x.dx + (nx - 1) / 2
    cj = Y / x.dx + (ny - 1) / 2
    interp = ndimage.map_coordinates(vals, [cj, ci], order=1, mode="nearest")
    return new.with_values(np.where(new.mask, interp, new.exterior))


def advance_stage(state: ReconState, problem: Problem) -> ReconState:
    """Move to the next resolution stage: resample x, clear the pool and any pinned-subset cache."""
    nxt = state.stage + 1
    st = problem.config.stages[nxt]
    x = resample(state.x, st.dx, problem.boundary, problem.area)
    return replace(state, x=x, stage=nxt, pool=[], pinned_eval=None)


def detect_oscillation(history: Sequence[float], window: int, subset_count: int,
                       floor_fraction: float = 0.01) -> bool:
    """True when the trailing ``window`` residuals show no net decrease but do fluctuate.

    The trend is the least-squares slope through per-cycle means (one cycle
    is ``subset_count`` iterations), which cancels the subset-to-subset
    pattern of a rotating evaluation. Fluctuation means the per-iteration
    standard deviation exceeds ``floor_fraction`` of the window mean.
    """
    if window < 2 * subset_count:
        raise ValueError(f"window {window} must be >= 2 * subset_count ({2 * subset_count})")
    h = np.asarray(history, dtype=float)
    if len(h) < window:
        return False
    w = h[-window:]
    cycles = window // subset_count
    blocks = w[len(w) - cycles * subset_count:].reshape(cycles, subset_count).mean(axis=1)
    slope = np.polyfit(np.arange(cycles, dtype=float), blocks, 1)[0]
    mean = float(w.mean())
    return bool(slope >= -1e-9 * abs(mean) and w.std() > floor_fraction * mean)


def iterate(state: ReconState, problem: Problem) -> ReconState:
    """Run one iteration (including a stage change due at this iteration) and return the new state."""
    cfg = problem.config
    model = problem.model
    n = state.iteration
    while state.stage + 1 < len(cfg.stages) and n >= cfg.stages[state.stage + 1].start_iteration:
        state = advance_stage(state, problem)
    stage = cfg.stages[state.stage]
    tau = stage.tau
    k = state.rotation
    partition = problem.partition
    sources = list(partition.sources(k))
    x = state.x
    rng = state.rng

    t_cur, ok_cur = _first(model.peaks(x, tau, sources))
    ref_rows = [problem.ref_peaks[s] for s in sources]
    target, tvalid = _deltas(ref_rows, t_cur, ok_cur, cfg.clamp)
    if not tvalid.any():
        raise SubsetUnusable(f"subset {k} has no valid pairs at iteration {n}")

    pinned_eval = state.pinned_eval
    if state.pinned:
        eval_subset = cfg.pin_subset
        eval_sources = list(partition.sources(eval_subset))
        if pinned_eval is None:
            d, v = _evaluate(problem, x, tau, eval_sources)
            pinned_eval = PinnedEval(d, v, _norm(d, v))
        e_delta, e_valid = pinned_eval.delta, pinned_eval.valid
    else:
        eval_subset, eval_sources = k, sources
        e_delta, e_valid = target, tvalid
    report = residual_error(e_delta, e_valid, eval_subset, cfg.subset_count if state.pinned else 1.0)

    pool = [p for p in state.pool if p.subset == k and p.stage == state.stage]
    fresh: list[TrainingPair] = []
    accepted = False
    E_cmp = E_after = float("nan")
    step_max = step_bound = 0.0
    new_x = x
    new_eval = pinned_eval
    while len(fresh) < cfg.fresh_pair_budget:
        nb = min(cfg.batch_size, cfg.fresh_pair_budget - len(fresh))
        # all random draws for the batch happen before any simulation is dispatched
        images = [x.with_values(x.values + draw_training_image(n, x, rng, cfg)) for _ in range(nb)]
        for img, rows in zip(images, model.peaks_batch(images, tau, sources)):
            dy, dv = _deltas(rows, t_cur, ok_cur, cfg.clamp)
            fresh.append(TrainingPair(img.values - x.values, dy, dv, k, state.stage))
        cols = pool + fresh
        Y = np.stack([p.dy.ravel() for p in cols], axis=1)
        rows_ok = tvalid.ravel() & np.logical_and.reduce([p.valid.ravel() for p in cols])
        try:
            w = solve_regression(Y, target.ravel(), cfg.lam, rows_ok)
        except ZeroDesignMatrix:
            continue
        step = np.tensordot(w.V, np.stack([p.dx_image for p in cols]), axes=1)
        cand = x.with_values(x.values + step)
        step_max = float(np.abs(cand.values - x.values).max())
        step_bound = float(np.sum(np.abs(w.V) * [p.amplitude for p in cols]))
        c_delta, c_valid = _evaluate(problem, cand, tau, eval_sources)
        both = c_valid & e_valid
        if not both.any():
            continue
        E_cmp = _norm(e_delta, both)
        E_after = _norm(c_delta, both)
        if E_after < E_cmp:
            accepted = True
            new_x = cand
            if state.pinned:
                new_eval = PinnedEval(c_delta, c_valid, _norm(c_delta, c_valid))
            break

    truth = problem.truth_image(new_x.dx)
    row = {
        "iter": n, "stage": state.stage, "subset": k, "E": report.E, "valid_pairs": report.valid_pair_count,
        "nrmse": nrmse(new_x, truth) if truth is not None else float("nan"),
        "nrmse_eps": nrmse((new_x.values ** 2, new_x.mask), (truth.values ** 2, truth.mask))
        if truth is not None else float("nan"),
        "accepted": int(accepted), "fresh_pairs_used": len(fresh), "E_cmp": E_cmp, "E_after": E_after,
        "eval_subset": eval_subset, "pinned": int(state.pinned), "E_display": report.display,
        "step_max": step_max, "step_bound": step_bound, "pool_pairs": len(pool),
    }
    history = state.history + [row]
    keep = [p for p in state.pool if p.stage == state.stage]
    same = [p for p in keep if p.subset == k] + fresh
    others = [p for p in keep if p.subset != k]
    new_pool = others + (same[-cfg.pool_max:] if cfg.pool_max > 0 else [])

    pinned = state.pinned
    if not pinned:
        evals = [h["E"] for h in history]
        if detect_oscillation(evals, cfg.window, cfg.subset_count, cfg.variance_floor):
            pinned = True
            new_eval = None
    return replace(state, x=new_x, iteration=n + 1, rotation=(k + 1) % cfg.subset_count, history=history,
                   pool=new_pool, pinned=pinned, pinned_eval=new_eval)


def run(state: ReconState, problem: Problem, until: int,
        callback: Callable[[ReconState], None] | None = None) -> ReconState:
    """Iterate until ``state.iteration > until``, calling ``callback`` after every iteration."""
    while state.iteration <= until:
        state = iterate(state, problem)
        if callback is not None:
            callback(state)
    return state


def full_residual(problem: Problem, x: SqrtEpsImage, tau: float) -> float:
    """Residual over every source, for diagnostics independent of subset rotation."""
    d, v = _evaluate(problem, x, tau, range(problem.model.count))
    if not v.any():
        raise NoValidPairs("no valid pairs")
    return _norm(d, v)


# checkpoint payload -------------------------------------------------------

def state_to_arrays(state: ReconState) -> dict[str, np.ndarray]:
    """Flatten a state into named arrays; JSON strings carry history and RNG state."""
    out = {
        "x": state.x.values, "mask": state.x.mask, "dx": np.float64(state.x.dx),
        "exterior": np.float64(state.x.exterior),
        "counters": np.array([state.iteration, state.stage, state.rotation, int(state.pinned), len(state.pool)]),
        "history": np.str_(json.dumps(state.history)),
        "rng": np.str_(json.dumps(state.rng.bit_generator.state)),
    }
    for i, p in enumerate(state.pool):
        out[f"pool{i}_dx"] = p.dx_image
        out[f"pool{i}_dy"] = p.dy
        out[f"pool{i}_valid"] = p.valid
        out[f"pool{i}_ids"] = np.array([p.subset, p.stage])
    if state.pinned_eval is not None:
        out["pin_delta"] = state.pinned_eval.delta
        out["pin_valid"] = state.pinned_eval.valid
        out["pin_E"] = np.float64(state.pinned_eval.E)
    return out


def state_from_arrays(a: dict[str, np.ndarray]) -> ReconState:
    iteration, stage, rotation, pinned, npool = (int(v) for v in a["counters"])
    x = SqrtEpsImage(a["x"], float(a["dx"]), a["mask"], float(a["exterior"]))
    pool = [TrainingPair(a[f"pool{i}_dx"], a[f"pool{i}_dy"], a[f"pool{i}_valid"],
                         int(a[f"pool{i}_ids"][0]), int(a[f"pool{i}_ids"][1])) for i in range(npool)]
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = json.loads(str(a["rng"]))
    pe = PinnedEval(a["pin_delta"], a["pin_valid"], float(a["pin_E"])) if "pin_delta" in a else None
    return ReconState(x, iteration, stage, rotation, json.loads(str(a["history"])), pool, rng, bool(pinned), pe)
