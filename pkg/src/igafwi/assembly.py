"""Mass, stiffness and source assembly for the alpha/gamma-scaled wave equation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import AlphaField, map_rule, voxel_quadrature
from .material import MaterialGrid
from .splines import TensorBasis


class AssemblyError(RuntimeError):
    pass


class LumpingError(AssemblyError):
    pass


@dataclass(frozen=True)
class SourceSpec:
    center: tuple[float, float]
    sigma: tuple[float, float]
    frequency: float

    def __post_init__(self):
        if min(self.sigma) <= 0 or self.frequency <= 0:
            raise ValueError("source widths and frequency must be positive")

    def spatial(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        dx = (pts[..., 0] - self.center[0]) / self.sigma[0]
        dy = (pts[..., 1] - self.center[1]) / self.sigma[1]
        return np.exp(-0.5 * (dx**2 + dy**2))


def burst(t, f: float, envelope_power: int = 2):
    """Two-cycle sine burst with a ``sin^k(pi f t / 2)`` window, zero after 2/f."""
    t = np.asarray(t, dtype=float)
    g = np.sin(2 * np.pi * f * t) * np.sin(np.pi * f * t / 2) ** envelope_power
    return np.where((t >= 0) & (t <= 2.0 / f), g, 0.0)


@dataclass
class WaveSystem:
    M: sp.csr_matrix
    K: sp.csr_matrix
    basis: TensorBasis
    rho: float
    c: float
    M_lumped: np.ndarray | None = None
    F_spatial: np.ndarray | None = None
    mass_method: str = "direct"  # or "woodbury" for homogeneous gamma on a tensor mesh
    _lu: object = field(default=None, repr=False)

    @property
    def n_dof(self) -> int:
        return self.M.shape[0]

    def factorize(self):
        if self._lu is None and self.mass_method == "woodbury":
            self._lu = TensorWoodburySolver(self.M, self.basis, self.rho)
        if self._lu is None:
            try:
                self._lu = spla.splu(self.M.tocsc(), permc_spec="MMD_AT_PLUS_A",
                                     options=dict(SymmetricMode=True))
            except RuntimeError as exc:
                raise AssemblyError(f"mass matrix factorization failed: {exc}") from exc
        return self._lu

    def mass_solver(self, lumped: bool):
        if lumped:
            if self.M_lumped is None:
                self.M_lumped = row_sum_lump(self.M)
            inv = 1.0 / self.M_lumped
            return lambda b: inv * b
        lu = self.factorize()
        return lu.solve


def row_sum_lump(M) -> np.ndarray:
    d = np.asarray(M.sum(axis=1)).ravel()
    bad = np.flatnonzero(~(d > 0))
    if len(bad):
        raise LumpingError(f"non-positive lumped mass at dof {bad[0]} ({d[bad[0]]:.3e})")
    return d


@dataclass
class Quadrature:
    """Composed voxel-level rule for the whole embedding box, sorted by knot span."""

    points: np.ndarray
    weights: np.ndarray
    alpha: np.ndarray
    voxel: np.ndarray
    span: np.ndarray

    def __len__(self):
        return len(self.weights)


def build_quadrature(basis: TensorBasis, alpha: AlphaField, grid: MaterialGrid,
                     depth: int, q: int) -> Quadrature:
    vb = grid.boxes()
    pts, wts, vox = voxel_quadrature(vb, alpha.physical, depth, q)
    mid = 0.5 * (vb[:, :2] + vb[:, 2:])
    hx, hy = basis.kx.h, basis.ky.h
    vspan = basis.span_id(np.clip((mid[:, 0] // hx).astype(int), 0, basis.kx.num_spans - 1),
                          np.clip((mid[:, 1] // hy).astype(int), 0, basis.ky.num_spans - 1))
    span = vspan[vox]
    order = np.argsort(span, kind="stable")
    return Quadrature(points=pts[order], weights=wts[order], alpha=alpha(pts[order]),
                      voxel=vox[order], span=span[order])


class Assembler:
    """Element-by-element assembly over knot spans with a cached scatter map.

    Basis values at the quadrature points are cached in chunks when
    ``cache_basis`` is set (inversion-sized meshes); otherwise they are
    recomputed chunk by chunk on every call.
    """

    def __init__(self, basis: TensorBasis, alpha: AlphaField, grid: MaterialGrid,
                 depth: int, q: int | None = None, cache_basis: bool = True,
                 chunk_points: int = 20000):
        self.basis = basis
        self.alpha = alpha
        self.grid = grid
        self.depth = depth
        self.q = q if q is not None else basis.degree + 1
        self.quad = build_quadrature(basis, alpha, grid, depth, self.q)
        self.span_dofs = basis.span_dofs()
        self._chunks = self._make_chunks(chunk_points)
        self._cache = [] if cache_basis else None
        if cache_basis:
            for sl in self._chunks:
                self._cache.append(self._eval_chunk(sl))
        self._build_pattern()

    def _make_chunks(self, chunk_points):
        span = self.quad.span
        bounds = np.flatnonzero(np.diff(span)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [len(span)]])
        chunks, s0, count = [], 0, 0
        for k in range(len(starts)):
            count += ends[k] - starts[k]
            if count >= chunk_points:
                chunks.append(slice(starts[s0], ends[k]))
                s0, count = k + 1, 0
        if s0 < len(starts):
            chunks.append(slice(starts[s0], ends[-1]))
        return chunks

    def _eval_chunk(self, sl):
        _, _, vals, grads = self.basis.footprint(self.quad.points[sl])
        return vals, grads

    def chunks(self):
        """Yield ``(slice, values, grads)`` over the quadrature in span order."""
        for k, sl in enumerate(self._chunks):
            vals, grads = self._cache[k] if self._cache is not None else self._eval_chunk(sl)
            yield sl, vals, grads

    def _build_pattern(self):
        dofs = self.span_dofs
        n = self.basis.n_dof
        nloc = dofs.shape[1]
        rows = np.repeat(dofs, nloc, axis=1).ravel()
        cols = np.tile(dofs, (1, nloc)).ravel()
        key = rows.astype(np.int64) * n + cols
        uniq, inv = np.unique(key, return_inverse=True)
        self._scatter = inv.reshape(len(dofs), nloc * nloc)
        self._pattern = sp.csr_matrix(
            (np.zeros(len(uniq)), ((uniq // n).astype(np.int64), (uniq % n).astype(np.int64))),
            shape=(n, n))
        # csr orders entries by (row, col) exactly like the sorted keys
        self._pattern.sort_indices()

    def element_matrices(self, point_scale: np.ndarray, grad_scale: np.ndarray):
        """Per-span local matrices of ``sum w s N N^T`` and ``sum w g B^T B``."""
        nloc = self.span_dofs.shape[1]
        Me = np.zeros((self.basis.n_spans, nloc * nloc))
        Ke = np.zeros((self.basis.n_spans, nloc * nloc))
        for sl, vals, grads in self.chunks():
            span = self.quad.span[sl]
            starts = np.concatenate([[0], np.flatnonzero(np.diff(span)) + 1])
            ids = span[starts]
            wv = point_scale[sl][:, None] * vals
            Me[ids] += np.add.reduceat(
                (wv[:, :, None] * vals[:, None, :]).reshape(len(span), -1), starts, axis=0)
            wg = grad_scale[sl][:, None, None] * grads
            Ke[ids] += np.add.reduceat(
                np.matmul(wg, grads.transpose(0, 2, 1)).reshape(len(span), -1), starts, axis=0)
        return Me, Ke

    def scatter(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self._scatter.ravel(), weights=local.ravel(), minlength=self._pattern.nnz)
        A = self._pattern.copy()
        A.data = data
        return A

    def point_gamma(self, grid: MaterialGrid) -> np.ndarray:
        if grid.n_active != self.grid.n_active:
            raise ValueError("material grid layout changed; rebuild the assembler")
        return grid.values[self.quad.voxel]

    def assemble(self, grid: MaterialGrid, rho: float, c: float) -> WaveSystem:
        gam = self.point_gamma(grid)
        scale = self.quad.weights * self.quad.alpha * gam * rho
        Me, Ke = self.element_matrices(scale, scale * c**2)
        M = self.scatter(Me)
        K = self.scatter(Ke)
        system = WaveSystem(M=M, K=K, basis=self.basis, rho=rho, c=c)
        return system


def assemble(basis: TensorBasis, alpha: AlphaField, grid: MaterialGrid, rho: float, c: float,
             depth: int = 0, q: int | None = None) -> WaveSystem:
    return Assembler(basis, alpha, grid, depth, q).assemble(grid, rho, c)


def spatial_source(basis: TensorBasis, spec: SourceSpec, q: int | None = None) -> np.ndarray:
    """``F_i = int N_i f`` with a Gauss rule of order ``q`` per knot span.

    The source term is not scaled by alpha, so no cut-cell rule is needed.
    """
    q = q if q is not None else basis.degree + 3
    nsx, nsy = basis.shape
    hx, hy = basis.kx.h, basis.ky.h
    sx, sy = np.meshgrid(np.arange(nsx), np.arange(nsy))
    boxes = np.stack([sx.ravel() * hx, sy.ravel() * hy, (sx.ravel() + 1) * hx, (sy.ravel() + 1) * hy], axis=1)
    F = np.zeros(basis.n_dof)
    chunk = max(1, 200000 // (q * q))
    for s in range(0, len(boxes), chunk):
        pts, wts, _ = map_rule(boxes[s:s + chunk], q)
        _, idx, vals, _ = basis.footprint(pts)
        np.add.at(F, idx.ravel(), (vals * (wts * spec.spatial(pts))[:, None]).ravel())
    return F


def mass_1d(kv, q: int | None = None) -> np.ndarray:
    """Dense 1D B-spline mass matrix by exact Gauss integration."""
    q = q if q is not None else kv.degree + 1
    from .splines import eval_basis

    x, w = np.polynomial.legendre.leggauss(q)
    h = kv.h
    starts = np.arange(kv.num_spans) * h
    pts = (starts[:, None] + 0.5 * h * (x[None, :] + 1)).ravel()
    wts = np.tile(0.5 * h * w, kv.num_spans)
    span, N, _ = eval_basis(kv, pts)
    M = np.zeros((kv.n, kv.n))
    p1 = kv.degree + 1
    for a in range(p1):
        for b in range(p1):
            np.add.at(M, (span + a, span + b), wts * N[:, a] * N[:, b])
    return M


class TensorWoodburySolver:
    """``M^-1`` for a mass matrix that equals ``rho * (My kron Mx)`` outside a small dof set.

    The tensor part is inverted with banded Cholesky factors per direction and
    the localized difference ``D = M0 - M`` on the dof set S by the Woodbury
    identity ``M^-1 = M0^-1 + M0^-1 P (I - D Z)^-1 D P^T M0^-1`` with
    ``Z = P^T M0^-1 P``.
    """

    def __init__(self, M: sp.spmatrix, basis: TensorBasis, rho: float, rtol: float = 1e-13):
        from scipy.linalg import cholesky_banded

        kx, ky = basis.kx, basis.ky
        self.nx, self.ny = kx.n, ky.n
        p = basis.degree
        self._fac = []
        for kv in (kx, ky):
            A = mass_1d(kv) * (rho if kv is kx else 1.0)
            ab = np.zeros((p + 1, kv.n))
            for k in range(p + 1):
                ab[p - k, k:] = np.diagonal(A, k)
            self._fac.append(cholesky_banded(ab))
        self.p = p
        self.M = M.tocsr()
        M0 = sp.kron(sp.csr_matrix(mass_1d(ky)), sp.csr_matrix(mass_1d(kx)) * rho).tocsr()
        diff = (M0 - M).tocsr()
        scale = np.abs(M0).max()
        diff.data[np.abs(diff.data) < rtol * scale] = 0.0
        diff.eliminate_zeros()
        S = np.unique(np.concatenate([diff.tocoo().row, diff.tocoo().col]))
        self.S = S
        if len(S) == 0:
            self.W = None
            return
        D = diff[S][:, S].toarray()
        Z = np.empty((len(S), len(S)))
        E = np.zeros(self.nx * self.ny)
        for k, i in enumerate(S):
            E[i] = 1.0
            Z[:, k] = self.solve_tensor(E)[S]
            E[i] = 0.0
        self.W = np.linalg.solve(np.eye(len(S)) - D @ Z, D)

    def solve_tensor(self, b: np.ndarray) -> np.ndarray:
        from scipy.linalg import cho_solve_banded

        B = b.reshape(self.ny, self.nx)
        X = cho_solve_banded((self._fac[0], False), B.T)  # along x
        X = cho_solve_banded((self._fac[1], False), X.T)  # along y
        return X.ravel()

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Woodbury solve followed by one step of iterative refinement."""
        x = self._solve_once(b)
        return x + self._solve_once(b - self.M @ x)

    def _solve_once(self, b: np.ndarray) -> np.ndarray:
        y = self.solve_tensor(b)
        if self.W is None:
            return y
        corr = np.zeros_like(y)
        corr[self.S] = self.W @ y[self.S]
        return y + self.solve_tensor(corr)
