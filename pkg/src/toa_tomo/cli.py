"""``toa-tomo`` command line: phantom, acquire, reconstruct, resume, report, resolution-bound."""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .config import RunConfig, load_config, parse_config_text
from .errors import CheckpointMismatch, NoData, SpecError, ToaError
from .fdtd import gaussian_pulse, simulate
from .metrics import resolution_bound, resolution_constant
from .phantom import TransducerRing, format_phantom, load_phantom, rasterize
from .postprocess import median_filter
from .projection import ForwardModel, first_arrivals, peaks_from_traces
from .recon import Problem, ReconState, run, state_from_arrays, state_to_arrays

METRIC_COLUMNS = ["iter", "stage", "subset", "E", "valid_pairs", "nrmse", "accepted", "fresh_pairs_used",
                  "E_cmp", "E_after", "eval_subset", "pinned", "E_display", "nrmse_eps", "step_max", "step_bound",
                  "pool_pairs"]
# settings that must agree between acquisition and reconstruction
ACQ_KEYS = ("phantom", "ring_count", "area", "fc", "fw", "cutoff", "threshold", "courant_factor",
            "boundary_cells", "eps_bound")


def acquisition_hash(cfg: RunConfig) -> str:
    text = "".join(f"{k}={getattr(cfg, k)!r}\n" for k in ACQ_KEYS) + f"finest={cfg.finest!r}\n"
    return hashlib.sha256(text.encode()).hexdigest()


def _setup(cfg: RunConfig):
    spec = load_phantom(cfg.phantom)
    ring = TransducerRing(cfg.ring_count, spec.outer_axis_a, spec.outer_axis_b)
    model = ForwardModel.for_ring(ring, waveform=gaussian_pulse(cfg.fc, cfg.fw), cutoff=cfg.cutoff,
                                  threshold=cfg.threshold, courant_factor=cfg.courant_factor,
                                  boundary_cells=cfg.boundary_cells, eps_bound=cfg.eps_bound, workers=cfg.workers)
    return spec, model


def _write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# config_hash={cfg.hash()}\n" + cfg.to_text())


def _write_image(base: Path, values: np.ndarray, chash: str) -> None:
    fileio.write_grid_csv(base.with_suffix(".csv"), values, chash)
    fileio.write_pgm(base.with_suffix(".pgm"), values, flip=True)


# commands ---------------------------------------------------------------------

def cmd_phantom(source: str, dx: float, area: tuple[float, float], out: Path) -> Path:
    spec = load_phantom(source)
    medium = rasterize(spec, dx, area)
    out.mkdir(parents=True, exist_ok=True)
    chash = hashlib.sha256(f"{format_phantom(spec)}dx={dx!r}\narea={area!r}\n".encode()).hexdigest()
    (out / "phantom.txt").write_text(format_phantom(spec))
    fileio.write_grid_csv(out / "medium.csv", medium.epsilon, chash)
    fileio.write_pgm(out / "medium.pgm", medium.epsilon, flip=True)
    print(f"grid {medium.nx} x {medium.ny} at dx={dx} m -> {out}")
    return out


def cmd_acquire(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    spec, model = _setup(cfg)
    _write_config(cfg, out)
    st = cfg.finest
    medium = rasterize(spec, st.dx, cfg.area)
    try:
        peaks, samples = model.acquire(medium, st.tau)
    finally:
        model.close()
    n = model.count
    pv = first_arrivals(peaks, range(n), n)
    chash = cfg.hash()
    fileio.write_projection_csv(out / "measured.csv", pv.arrival, pv.valid, chash)
    fileio.write_projection_bin(out / "measured.bin", pv.arrival, pv.valid)
    fileio.write_trace_archive(out / "traces.npz", samples, st.tau, model.tref(st.tau), acquisition_hash(cfg))
    if cfg.dump_fields:
        simulate(medium, tuple(model.positions[0]), model.waveform, [], model.sim_config(st.dx, st.tau),
                 snapshot_every=cfg.dump_fields, snapshot_dir=out / "fields")
    print(f"acquired {n} x {n} pairs ({int(pv.valid.sum())} valid) -> {out}")
    return out


def _load_measured(cfg: RunConfig, spec, model):
    mdir = Path(cfg.measured or cfg.out)
    path = mdir / "traces.npz"
    if not path.is_file():
        raise NoData(f"no measured traces at {path}; run 'acquire' first")
    samples, tau, tref, ahash = fileio.read_trace_archive(path)
    if ahash != acquisition_hash(cfg):
        raise SpecError(f"{path} was acquired with different geometry or source settings")
    return [peaks_from_traces(s, tau, tref, cfg.cutoff, cfg.threshold) for s in samples]


def _metric_row(h: dict) -> list:
    return [h[c] for c in METRIC_COLUMNS]


def _reconstruct(cfg: RunConfig, state: ReconState | None) -> ReconState:
    cfg = replace(cfg, measured=cfg.measured or cfg.out)
    out = Path(cfg.out)
    spec, model = _setup(cfg)
    ref = _load_measured(cfg, spec, model)
    problem = Problem(model, cfg.recon_config(), spec, cfg.area, ref, truth=spec)
    state = state or problem.initial_state()
    chash = cfg.hash()
    _write_config(cfg, out)
    (out / "checkpoints").mkdir(exist_ok=True)
    fileio.write_table(out / "metrics.csv", METRIC_COLUMNS, map(_metric_row, state.history), chash)
    metrics = open(out / "metrics.csv", "a", newline="")

    def after(s: ReconState):
        done = s.iteration - 1
        metrics.write(",".join(fileio.fmt(v) for v in _metric_row(s.history[-1])) + "\n")
        metrics.flush()
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            fileio.write_checkpoint(out / "checkpoints" / f"ckpt_{done:06d}.bin", chash, state_to_arrays(s))
        if cfg.snapshot_every and done % cfg.snapshot_every == 0:
            (out / "images").mkdir(exist_ok=True)
            _write_image(out / "images" / f"x_{done:06d}", s.x.values, chash)

    try:
        state = run(state, problem, cfg.iterations, after)
    finally:
        metrics.close()
        model.close()
    _write_image(out / "final", state.x.values, chash)
    _write_image(out / "final_eps", state.x.values ** 2, chash)
    _write_image(out / "final_median", median_filter(state.x, cfg.median_window).values, chash)
    last = state.history[-1] if state.history else None
    if last:
        print(f"iteration {last['iter']}: E={last['E']:.4e} s, nrmse={last['nrmse']:.4f} -> {out}")
    return state


def cmd_reconstruct(cfg: RunConfig) -> ReconState:
    return _reconstruct(cfg, None)


def cmd_resume(checkpoint: Path, cfg: RunConfig) -> ReconState:
    try:
        chash, arrays = fileio.read_checkpoint(checkpoint)
    except (OSError, ValueError) as exc:
        raise NoData(f"cannot read checkpoint {checkpoint}: {exc}") from None
    if chash != cfg.hash():
        raise CheckpointMismatch(f"checkpoint hash {chash[:12]} does not match config hash {cfg.hash()[:12]}")
    return _reconstruct(cfg, state_from_arrays(arrays))


def _plot(xs, ys, size: int = 256, logy: bool = False, points: bool = False) -> np.ndarray:
    """Dark-on-white line (or scatter) plot with a one-pixel frame."""
    img = np.full((size, size), 255, np.uint8)
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    keep = np.isfinite(xs) & np.isfinite(ys) & ((ys > 0) if logy else True)
    xs, ys = xs[keep], ys[keep]
    img[[0, -1], :] = 0
    img[:, [0, -1]] = 0
    if len(xs) == 0:
        return img
    if logy:
        ys = np.log10(ys)
    margin = 8

    def scale(v):
        lo, hi = v.min(), v.max()
        return (v - lo) / (hi - lo) if hi > lo else np.full_like(v, 0.5)

    px = margin + scale(xs) * (size - 1 - 2 * margin)
    py = size - 1 - margin - scale(ys) * (size - 1 - 2 * margin)
    if points or len(xs) == 1:
        for x, y in zip(px.round().astype(int), py.round().astype(int)):
            img[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2] = 0
        return img
    order = np.argsort(px, kind="stable")
    px, py = px[order], py[order]
    for i in range(len(px) - 1):
        n = int(max(abs(px[i + 1] - px[i]), abs(py[i + 1] - py[i]), 1)) + 1
        xi = np.linspace(px[i], px[i + 1], n).round().astype(int)
        yi = np.linspace(py[i], py[i + 1], n).round().astype(int)
        img[yi, xi] = 0
    return img


def cmd_report(run_dir: Path) -> Path:
    path = run_dir / "metrics.csv"
    if not path.is_file():
        raise NoData(f"no metrics at {path}")
    header, rows, chash = fileio.read_table(path)
    if not rows:
        raise NoData(f"{path} has no iterations")
    col = {name: np.array([float(r[header.index(name)]) for r in rows]) for name in header}
    it, E, disp = col["iter"], col["E"], col.get("E_display", col["E"])
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    fileio.write_table(out / "residual_curve.csv", ["iter", "E", "E_display"], zip(it.astype(int), E, disp), chash)
    fileio.write_pgm(out / "residual.pgm", _plot(it, disp, logy=True), 0, 255)
    nr = col.get("nrmse")
    if nr is not None and np.isfinite(nr).any():
        fileio.write_table(out / "nrmse_curve.csv", ["iter", "nrmse", "nrmse_eps"],
                           zip(it.astype(int), nr, col.get("nrmse_eps", nr)), chash)
        fileio.write_table(out / "scatter.csv", ["iter", "E_display", "nrmse"], zip(it.astype(int), disp, nr), chash)
        fileio.write_pgm(out / "nrmse.pgm", _plot(it, nr), 0, 255)
        fileio.write_pgm(out / "scatter.pgm", _plot(disp, nr, points=True), 0, 255)
    print(f"{len(rows)} iterations reported -> {out}")
    return out


def cmd_resolution_bound(tau: float, eps: float, delta_eps: float) -> tuple[float, float]:
    s = resolution_bound(tau, eps, delta_eps)
    k = s * delta_eps / (eps * math.sqrt(eps))
    print(f"s = {s:.6g} m")
    print(f"s*delta_eps/(eps*sqrt(eps)) = {k:.6g} m (2*tau*c = {resolution_constant(tau):.6g} m)")
    return s, k


# argument handling ----------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.add_argument("--snapshot-every", type=int, help="write image snapshots every N iterations")
    p.add_argument("--dump-fields", type=int, help="write Ez field snapshots every N time steps (acquire)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="toa-tomo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("phantom", parents=[common], help="rasterise a phantom to CSV and PGM")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--builtin")
    g.add_argument("--spec")
    p.add_argument("--dx", type=float, required=True)
    p.add_argument("--area", type=float, nargs=2, default=(1.0, 1.0))
    sub.add_parser("acquire", parents=[common], help="simulate the measured data at the finest stage")
    p = sub.add_parser("reconstruct", parents=[common], help="run the staged reconstruction")
    p.add_argument("--measured", help="directory holding traces.npz (default: --out)")
    p = sub.add_parser("resume", parents=[common], help="continue from a checkpoint")
    p.add_argument("checkpoint")
    p = sub.add_parser("report", parents=[common], help="residual and nrmse curves for a run directory")
    p.add_argument("run_dir")
    p = sub.add_parser("resolution-bound", parents=[common], help="smallest resolvable size for a timing resolution")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta-eps", type=float, default=1.0)
    return parser


def _config_from(args, base: Path | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if base is not None:
        values.update(parse_config_text(base.read_text()))
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text()))
        except OSError as exc:
            raise SpecError(f"cannot read config {args.config}: {exc}") from None
    if "workers" not in values and "TOA_TOMO_WORKERS" in os.environ:
        values["workers"] = os.environ["TOA_TOMO_WORKERS"]
    for item in args.set:
        if "=" not in item:
            raise SpecError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k] = v
    for key in ("seed", "workers", "out", "snapshot_every", "dump_fields"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    if getattr(args, "measured", None):
        values["measured"] = args.measured
    return load_config(None, values)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "phantom":
            cmd_phantom(f"builtin:{args.builtin}" if args.builtin else args.spec, args.dx, tuple(args.area), Path(args.out or "phantom"))
        elif args.command == "acquire":
            cmd_acquire(_config_from(args))
        elif args.command == "reconstruct":
            cmd_reconstruct(_config_from(args))
        elif args.command == "resume":
            ckpt = Path(args.checkpoint)
            run_cfg = ckpt.resolve().parent.parent / "config.txt"
            cfg = _config_from(args, run_cfg if run_cfg.is_file() else None)
            cmd_resume(ckpt, cfg)
        elif args.command == "report":
            cmd_report(Path(args.run_dir))
        elif args.command == "resolution-bound":
            cmd_resolution_bound(args.tau, args.eps, args.delta_eps)
    except (ToaError, OSError) as exc:
        print(f"toa-tomo: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
