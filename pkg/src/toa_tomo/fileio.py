"""File formats: PGM renders, CSV tables, projection vectors, trace archives."""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np


def write_pgm(path: str | Path, image: np.ndarray, vmin: float | None = None, vmax: float | None = None,
              flip: bool = False) -> None:
    """8-bit binary PGM, linearly mapping ``[vmin, vmax]`` onto ``[0, 255]``.

    ``image`` is indexed ``[iy, ix]``; with ``flip`` the first row is drawn at
    the bottom so +y points up.
    """
    a = np.asarray(image, dtype=float)
    lo = np.nanmin(a) if vmin is None else vmin
    hi = np.nanmax(a) if vmax is None else vmax
    if hi > lo:
        g = np.clip((a - lo) / (hi - lo), 0.0, 1.0)
    else:
        g = np.zeros_like(a)
    g = np.nan_to_num(g)
    px = np.round(g * 255).astype(np.uint8)
    if flip:
        px = px[::-1]
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(px.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise ValueError("not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def fmt(v) -> str:
    """Round-trip text for CSV cells: ``repr`` for floats, ``str`` otherwise."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return str(v)


def write_grid_csv(path: str | Path, grid: np.ndarray, config_hash: str = "") -> None:
    """Row-major grid values, one CSV row per grid row (``[iy, ix]``)."""
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        for row in np.asarray(grid, dtype=float):
            w.writerow([fmt(v) for v in row])


def read_grid_csv(path: str | Path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    return np.array([[float(v) for v in line.split(",")] for line in rows])


def write_table(path: str | Path, header: list[str], rows, config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_table(path: str | Path) -> tuple[list[str], list[list[str]], str]:
    """``(header, rows, config_hash)``; values stay as strings."""
    lines = Path(path).read_text().splitlines()
    chash = ""
    if lines and lines[0].startswith("# config_hash="):
        chash = lines.pop(0).split("=", 1)[1]
    rows = list(csv.reader(lines))
    if not rows:
        return [], [], chash
    return rows[0], rows[1:], chash


# projection vectors ---------------------------------------------------------

PROJ_MAGIC = b"TOAPROJ\0"
PROJ_VERSION = 1


def write_projection_csv(path: str | Path, arrival: np.ndarray, valid: np.ndarray, config_hash: str = "") -> None:
    ns, nr = arrival.shape
    rows = ((s, r, float(arrival[s, r]), int(valid[s, r])) for s in range(ns) for r in range(nr))
    write_table(path, ["source", "receiver", "arrival_s", "valid"], rows, config_hash)


def read_projection_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    header, rows, _ = read_table(path)
    if header != ["source", "receiver", "arrival_s", "valid"]:
        raise ValueError(f"{path}: unexpected header {header}")
    ns = max(int(r[0]) for r in rows) + 1
    nr = max(int(r[1]) for r in rows) + 1
    arrival = np.full((ns, nr), np.nan)
    valid = np.zeros((ns, nr), bool)
    for s, r, t, v in rows:
        arrival[int(s), int(r)] = float(t)
        valid[int(s), int(r)] = v == "1"
    return arrival, valid


def write_projection_bin(path: str | Path, arrival: np.ndarray, valid: np.ndarray) -> None:
    ns, nr = arrival.shape
    with open(path, "wb") as fh:
        fh.write(PROJ_MAGIC + bytes([PROJ_VERSION]) + struct.pack("<II", ns, nr))
        fh.write(np.ascontiguousarray(arrival, "<f8").tobytes())
        fh.write(np.ascontiguousarray(valid, np.uint8).tobytes())


def read_projection_bin(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != PROJ_MAGIC:
        raise ValueError(f"{path}: not a projection file")
    if data[8] != PROJ_VERSION:
        raise ValueError(f"{path}: unsupported version {data[8]}")
    ns, nr = struct.unpack("<II", data[9:17])
    n = ns * nr
    arrival = np.frombuffer(data[17:17 + 8 * n], "<f8").reshape(ns, nr).copy()
    valid = np.frombuffer(data[17 + 8 * n:17 + 9 * n], np.uint8).reshape(ns, nr).astype(bool)
    return arrival, valid


# traces and checkpoints -------------------------------------------------------

def write_trace_archive(path: str | Path, samples: list[np.ndarray], tau: float, tref: float,
                        config_hash: str = "") -> None:
    """Compressed archive with one ``(receivers, bins)`` block per source."""
    arrays = {f"source_{i:05d}": s for i, s in enumerate(samples)}
    np.savez_compressed(path, tau=np.float64(tau), tref=np.float64(tref), config_hash=np.str_(config_hash), **arrays)


def read_trace_archive(path: str | Path) -> tuple[list[np.ndarray], float, float, str]:
    with np.load(path) as z:
        keys = sorted(k for k in z.files if k.startswith("source_"))
        return [z[k] for k in keys], float(z["tau"]), float(z["tref"]), str(z["config_hash"])


def write_trace_csv(path: str | Path, times: np.ndarray, energy: np.ndarray) -> None:
    write_table(path, ["time_s", "energy"], zip(map(float, times), map(float, energy)))


CKPT_MAGIC = b"TOACKPT\0"
CKPT_VERSION = 1


def write_checkpoint(path: str | Path, config_hash: str, arrays: dict[str, np.ndarray]) -> None:
    """Magic, version byte, 64-char config hash, then an ``npz`` payload."""
    buf = io.BytesIO()
    np.savez_compressed(buf, **arrays)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + bytes([CKPT_VERSION]) + config_hash.encode().ljust(64, b" "))
        fh.write(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if data[8] != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {data[8]}")
    chash = data[9:73].decode().strip()
    with np.load(io.BytesIO(data[73:])) as z:
        return chash, {k: z[k] for k in z.files}
