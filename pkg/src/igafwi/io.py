"""Readers and writers for traces, gamma fields, journals and study tables."""

from __future__ import annotations

import csv
import json
import platform
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .dynamics import TraceSet
from .material import MaterialGrid

__version__ = "0.1.0"


def _path(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# -- traces ------------------------------------------------------------------

def write_traces_csv(path, traces: TraceSet) -> Path:
    """One row per time step: ``t, r0, r1, ...``."""
    p = _path(path)
    n_r = traces.traces.shape[0]
    data = np.column_stack([traces.times, traces.traces.T])
    header = ", ".join(["t"] + [f"r{k}" for k in range(n_r)])
    np.savetxt(p, data, delimiter=", ", header=header, comments="", fmt="%.17g")
    return p


def read_traces_csv(path, receivers=None) -> TraceSet:
    p = Path(path)
    with p.open() as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    if not header or header[0] != "t":
        raise ValueError(f"{p}: trace file must start with a 't' column")
    data = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
    rec = np.zeros((data.shape[1] - 1, 2)) if receivers is None else np.asarray(receivers, dtype=float)
    return TraceSet(receivers=rec, traces=data[:, 1:].T.copy(), dt=dt)


# -- gamma fields --------------------------------------------------------------

def write_gamma_grid(path, grid: MaterialGrid) -> Path:
    """Header ``level0 nx ny hvx hvy``, the row-major level-0 values, then one
    ``sub i j n_vs`` block per refined cell followed by its values."""
    p = _path(path)
    lines = [f"level0 {grid.nx} {grid.ny} {grid.hv[0]!r} {grid.hv[1]!r}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in grid.base]
    for (i, j) in sorted(grid.refined, key=lambda k: (k[1], k[0])):
        lines.append(f"sub {i} {j} {grid.n_sub}")
        lines += [" ".join(repr(float(v)) for v in row) for row in grid.refined[(i, j)]]
    p.write_text("\n".join(lines) + "\n")
    return p


def read_gamma_grid(path, gamma_min: float = 1e-5, gamma_max: float = 1.0) -> MaterialGrid:
    p = Path(path)
    rows = [ln.split() for ln in p.read_text().splitlines() if ln.strip()]
    if not rows or rows[0][0] != "level0" or len(rows[0]) != 5:
        raise ValueError(f"{p}: missing 'level0 nx ny hvx hvy' header")
    nx, ny = int(rows[0][1]), int(rows[0][2])
    hv = (float(rows[0][3]), float(rows[0][4]))
    base = np.array([[float(v) for v in r] for r in rows[1:1 + ny]])
    if base.shape != (ny, nx):
        raise ValueError(f"{p}: level-0 block has shape {base.shape}, expected {(ny, nx)}")
    refined, n_sub, k = {}, 1, 1 + ny
    while k < len(rows):
        head = rows[k]
        if head[0] != "sub" or len(head) != 4:
            raise ValueError(f"{p}: expected 'sub i j n_vs' at block starting line {k + 1}")
        i, j, n_sub = int(head[1]), int(head[2]), int(head[3])
        refined[(i, j)] = np.array([[float(v) for v in r] for r in rows[k + 1:k + 1 + n_sub]])
        k += 1 + n_sub
    return MaterialGrid(nx=nx, ny=ny, hv=hv, base=base, n_sub=n_sub, refined=refined,
                        gamma_min=gamma_min, gamma_max=gamma_max)


def write_voxel_csv(path, grid: MaterialGrid, values=None, name: str = "gamma") -> Path:
    """``x_mid, y_mid, <name>`` per active voxel; ``values`` defaults to gamma."""
    p = _path(path)
    vals = grid.values if values is None else np.asarray(values, dtype=float)
    mid = grid.midpoints()
    np.savetxt(p, np.column_stack([mid, vals]), delimiter=", ", header=f"x_mid, y_mid, {name}",
               comments="", fmt="%.17g")
    return p


def gamma_raster(grid: MaterialGrid) -> np.ndarray:
    """Gamma at the finest resolution, ``(ny * n_v * n_sub, nx * n_v * n_sub)``."""
    img = grid.finest_raster()
    if not grid.refined and grid.n_sub > 1:
        img = np.kron(img, np.ones((grid.n_sub, grid.n_sub)))
    return img


def write_gamma_pgm(path, grid: MaterialGrid) -> Path:
    """Binary 8-bit graymap: gamma 1 is white, gamma_min is black, top row at max y."""
    p = _path(path)
    img = gamma_raster(grid)
    lo = grid.gamma_min
    scaled = np.clip((img - lo) / (1.0 - lo), 0.0, 1.0)
    pix = np.rint(255 * scaled).astype(np.uint8)[::-1]
    h, w = pix.shape
    with p.open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    return p


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit graymaps are supported")
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


# -- tables --------------------------------------------------------------------

def write_rows_csv(path, rows: list[dict], columns: list[str]) -> Path:
    p = _path(path)
    with p.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return p


JOURNAL_COLUMNS = ["iter", "chi", "proj_grad_norm", "step_len", "n_evals"]


def write_journal_csv(path, journal: list[dict], stage: int | None = None) -> Path:
    if stage is None:
        return write_rows_csv(path, journal, JOURNAL_COLUMNS)
    return write_rows_csv(path, [dict(r, stage=stage) for r in journal], ["stage"] + JOURNAL_COLUMNS)


def write_convergence_csv(path, rows: list[dict]) -> Path:
    return write_rows_csv(path, rows, ["p", "mass", "h", "eps"])


def read_rows_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# -- provenance and debugging dumps ----------------------------------------------

def write_manifest(path, config: dict, flags: dict, extra: dict | None = None) -> Path:
    p = _path(path)
    doc = dict(version=__version__, python=platform.python_version(), numpy=np.__version__,
               config=config, design_flags=flags)
    if extra:
        doc.update(extra)
    p.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return p


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    return repr(obj)


def dump_matrix(path, A) -> Path:
    """Matrix Market coordinate file (1-based COO triples)."""
    p = _path(path)
    if p.suffix != ".mtx":
        p = p.with_suffix(".mtx")
    scipy.io.mmwrite(str(p), sp.coo_matrix(A), symmetry="general")
    return p
