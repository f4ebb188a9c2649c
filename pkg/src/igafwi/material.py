"""Voxelized density scaling field with one level of local refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .splines import OutOfRangeError


class InvalidStateError(RuntimeError):
    pass


@dataclass
class MaterialGrid:
    """Level-0 voxels on a regular grid, some replaced by ``n_sub x n_sub`` children.

    Active voxels are ordered by level-0 cell (row-major, x fastest); a refined
    cell contributes its children in the same row-major order.
    """

    nx: int
    ny: int
    hv: tuple[float, float]
    base: np.ndarray  # (ny, nx) level-0 values; meaningless where refined
    n_sub: int = 1
    refined: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    gamma_min: float = 1e-5
    gamma_max: float = 1.0

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float).reshape(self.ny, self.nx)

    @classmethod
    def homogeneous(cls, spans: tuple[int, int], n_v: int, extents: tuple[float, float],
                    value: float = 1.0, **kw) -> MaterialGrid:
        nx, ny = spans[0] * n_v, spans[1] * n_v
        hv = (extents[0] / nx, extents[1] / ny)
        return cls(nx=nx, ny=ny, hv=hv, base=np.full((ny, nx), float(value)), **kw)

    # -- layout -------------------------------------------------------------

    @property
    def extents(self) -> tuple[float, float]:
        return self.nx * self.hv[0], self.ny * self.hv[1]

    @property
    def is_refined(self) -> bool:
        return bool(self.refined)

    def _cells(self):
        for j in range(self.ny):
            for i in range(self.nx):
                yield i, j

    def _layout(self):
        """Per active voxel: (level, i0, j0, si, sj) with sub indices -1 on level 0."""
        if getattr(self, "_cache_key", None) == self._key():
            return self._cache
        rows = []
        if not self.refined:
            j, i = np.divmod(np.arange(self.nx * self.ny), self.nx)
            lay = np.stack([np.zeros_like(i), i, j, -np.ones_like(i), -np.ones_like(i)], axis=1)
        else:
            m = self.n_sub
            sj, si = np.divmod(np.arange(m * m), m)
            for i, j in self._cells():
                if (i, j) in self.refined:
                    rows.append(np.stack([np.ones(m * m, int), np.full(m * m, i), np.full(m * m, j), si, sj], axis=1))
                else:
                    rows.append(np.array([[0, i, j, -1, -1]]))
            lay = np.concatenate(rows)
        self._cache_key, self._cache = self._key(), lay
        return lay

    def _key(self):
        return (self.nx, self.ny, self.n_sub, tuple(sorted(self.refined)))

    @property
    def n_active(self) -> int:
        return len(self._layout())

    @property
    def levels(self) -> np.ndarray:
        return self._layout()[:, 0]

    def boxes(self) -> np.ndarray:
        lay = self._layout()
        hx, hy = self.hv
        x0 = lay[:, 1] * hx
        y0 = lay[:, 2] * hy
        sub = lay[:, 0] == 1
        sx, sy = hx / self.n_sub, hy / self.n_sub
        x0 = np.where(sub, x0 + lay[:, 3] * sx, x0)
        y0 = np.where(sub, y0 + lay[:, 4] * sy, y0)
        w = np.where(sub, sx, hx)
        h = np.where(sub, sy, hy)
        return np.stack([x0, y0, x0 + w, y0 + h], axis=1)

    def areas(self) -> np.ndarray:
        b = self.boxes()
        return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])

    def parent_cells(self) -> np.ndarray:
        """(n_active, 2) level-0 cell (i, j) owning each active voxel."""
        return self._layout()[:, 1:3]

    # -- values -------------------------------------------------------------

    @property
    def values(self) -> np.ndarray:
        lay = self._layout()
        out = self.base[lay[:, 2], lay[:, 1]].copy()
        if self.refined:
            sub = np.flatnonzero(lay[:, 0] == 1)
            for k in sub:
                out[k] = self.refined[(lay[k, 1], lay[k, 2])][lay[k, 4], lay[k, 3]]
        return out

    def with_values(self, values) -> MaterialGrid:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_active,):
            raise ValueError(f"expected {self.n_active} values, got {values.shape}")
        lay = self._layout()
        base = self.base.copy()
        lvl0 = lay[:, 0] == 0
        base[lay[lvl0, 2], lay[lvl0, 1]] = values[lvl0]
        refined = {}
        if self.refined:
            m = self.n_sub
            sub = np.flatnonzero(~lvl0)
            for start in range(0, len(sub), m * m):
                k = sub[start]
                refined[(lay[k, 1], lay[k, 2])] = values[sub[start:start + m * m]].reshape(m, m)
        return MaterialGrid(nx=self.nx, ny=self.ny, hv=self.hv, base=base, n_sub=self.n_sub,
                            refined=refined, gamma_min=self.gamma_min, gamma_max=self.gamma_max)

    def voxel_index(self, points) -> np.ndarray:
        """Active-voxel index containing each point; faces resolve to the +x/+y side."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lx, ly = self.extents
        tol = 1e-12 * max(lx, ly)
        if np.any(pts < -tol) or np.any(pts[:, 0] > lx + tol) or np.any(pts[:, 1] > ly + tol):
            raise OutOfRangeError("point outside the embedding domain")
        fx = pts[:, 0] / self.hv[0]
        fy = pts[:, 1] / self.hv[1]
        i = np.clip(np.floor(fx).astype(int), 0, self.nx - 1)
        j = np.clip(np.floor(fy).astype(int), 0, self.ny - 1)
        first = self._first_index()
        out = first[j, i].copy()
        if self.refined:
            m = self.n_sub
            is_ref = self._refined_mask()[j, i]
            si = np.clip(np.floor((fx - i) * m).astype(int), 0, m - 1)
            sj = np.clip(np.floor((fy - j) * m).astype(int), 0, m - 1)
            out = np.where(is_ref, out + si + m * sj, out)
        return out

    def _refined_mask(self) -> np.ndarray:
        mask = np.zeros((self.ny, self.nx), dtype=bool)
        for i, j in self.refined:
            mask[j, i] = True
        return mask

    def _first_index(self) -> np.ndarray:
        counts = np.where(self._refined_mask(), self.n_sub**2, 1).ravel()
        return (np.cumsum(counts) - counts).reshape(self.ny, self.nx)

    def gamma_at(self, points) -> np.ndarray:
        return self.values[self.voxel_index(points)]

    def midpoints(self) -> np.ndarray:
        b = self.boxes()
        return np.stack([0.5 * (b[:, 0] + b[:, 2]), 0.5 * (b[:, 1] + b[:, 3])], axis=1)

    def finest_raster(self) -> np.ndarray:
        """Values on the finest grid, shape (ny * n_sub, nx * n_sub), row 0 at y = 0."""
        m = self.n_sub if self.refined else 1
        img = np.kron(self.base, np.ones((m, m)))
        for (i, j), block in self.refined.items():
            img[j * m:(j + 1) * m, i * m:(i + 1) * m] = block
        return img


def gamma_at(grid: MaterialGrid, point) -> float:
    return float(grid.gamma_at(np.asarray(point, dtype=float)[None, :])[0])


def voxel_midpoints(grid: MaterialGrid) -> list[tuple[int, np.ndarray]]:
    return list(enumerate(grid.midpoints()))


def compute_indicator(grid: MaterialGrid) -> np.ndarray:
    """Jump-based sharpness ``eta`` per level-0 voxel, shape (ny, nx).

    Neighbours missing at the box boundary contribute a zero jump.
    """
    if grid.is_refined:
        raise InvalidStateError("indicator is only defined on an unrefined grid")
    g = grid.base
    jx = np.abs(np.diff(g, axis=1))  # (ny, nx-1) jumps between x-neighbours
    jy = np.abs(np.diff(g, axis=0))
    sx = np.zeros_like(g)
    sx[:, :-1] += jx
    sx[:, 1:] += jx
    sy = np.zeros_like(g)
    sy[:-1, :] += jy
    sy[1:, :] += jy
    Gx = sx / (2.0 * grid.hv[0])
    Gy = sy / (2.0 * grid.hv[1])
    return np.sqrt(Gx**2 + Gy**2)


@dataclass
class RefinementResult:
    grid: MaterialGrid
    marked: np.ndarray  # (ny, nx) bool, after dilation
    indicated: np.ndarray  # (ny, nx) bool, before dilation
    threshold: float
    nothing_to_refine: bool = False


def select_and_refine(grid: MaterialGrid, eta: np.ndarray, tau_fraction: float = 0.5,
                      n_layers: int = 1, n_sub: int = 4, strategy: str = "restart") -> RefinementResult:
    """Mark ``eta >= tau_fraction * max(eta)``, dilate by ``n_layers`` Moore rings, subdivide."""
    if strategy not in ("restart", "warm-start"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if grid.is_refined:
        raise InvalidStateError("grid is already refined")
    eta = np.asarray(eta, dtype=float)
    peak = float(eta.max()) if eta.size else 0.0
    if peak <= 0.0:
        none = np.zeros_like(eta, dtype=bool)
        return RefinementResult(grid=grid, marked=none, indicated=none, threshold=0.0, nothing_to_refine=True)
    tau = tau_fraction * peak
    indicated = eta >= tau
    marked = indicated
    if n_layers > 0:
        marked = ndimage.binary_dilation(indicated, structure=np.ones((3, 3), bool), iterations=n_layers)
    base = grid.base.copy() if strategy == "warm-start" else np.ones_like(grid.base)
    refined = {}
    for j, i in zip(*np.nonzero(marked)):
        refined[(int(i), int(j))] = np.full((n_sub, n_sub), base[j, i])
    new = MaterialGrid(nx=grid.nx, ny=grid.ny, hv=grid.hv, base=base, n_sub=n_sub, refined=refined,
                       gamma_min=grid.gamma_min, gamma_max=grid.gamma_max)
    return RefinementResult(grid=new, marked=marked, indicated=indicated, threshold=tau)


def window_mask(grid: MaterialGrid, window) -> np.ndarray:
    """Voxels whose midpoint lies in ``window = (x0, y0, x1, y1)``; all True if None."""
    if window is None:
        return np.ones(grid.n_active, dtype=bool)
    mid = grid.midpoints()
    x0, y0, x1, y1 = window
    return (mid[:, 0] >= x0) & (mid[:, 0] <= x1) & (mid[:, 1] >= y0) & (mid[:, 1] <= y1)
