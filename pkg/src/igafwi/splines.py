"""Open-knot B-splines on uniform meshes and their tensor products."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class OutOfRangeError(ValueError):
    pass


@dataclass(frozen=True)
class KnotVector:
    """Open, uniform knot vector on ``[0, length]``.

    Knots are stored in physical units, so derivatives come out in 1/length
    without a separate Jacobian.
    """

    degree: int
    num_spans: int
    length: float

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")
        if self.num_spans < 1:
            raise ValueError(f"num_spans must be >= 1, got {self.num_spans}")
        if not self.length > 0:
            raise ValueError(f"length must be positive, got {self.length}")

    @property
    def knots(self) -> np.ndarray:
        p = self.degree
        interior = np.linspace(0.0, self.length, self.num_spans + 1)
        return np.concatenate([np.zeros(p), interior, np.full(p, self.length)])

    @property
    def n(self) -> int:
        return self.num_spans + self.degree

    @property
    def h(self) -> float:
        return self.length / self.num_spans

    def span_of(self, x):
        """Span index by direct arithmetic; the last knot belongs to the last span."""
        s = np.floor(np.asarray(x, dtype=float) / self.h).astype(np.int64)
        return np.clip(s, 0, self.num_spans - 1)


def open_knot_vector(num_spans: int, p: int, length: float) -> KnotVector:
    return KnotVector(degree=int(p), num_spans=int(num_spans), length=float(length))


@dataclass(frozen=True)
class SpanEvaluation:
    span: int
    values: np.ndarray
    derivs: np.ndarray

    @property
    def first_index(self) -> int:
        # global index of values[0]
        return self.span


def eval_basis(kv: KnotVector, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized Cox-de Boor evaluation.

    Returns ``(span, values, derivs)`` with shapes ``(m,)``, ``(m, p+1)`` and
    ``(m, p+1)``; ``values[:, a]`` belongs to global function ``span + a``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    tol = 1e-12 * kv.length
    if np.any(x < -tol) or np.any(x > kv.length + tol):
        raise OutOfRangeError(f"coordinate outside [0, {kv.length}]")
    x = np.clip(x, 0.0, kv.length)
    p = kv.degree
    t = kv.knots
    span = kv.span_of(x)
    k = span + p  # index into knot array with t[k] <= x < t[k+1]
    m = x.shape[0]

    left = np.empty((m, p + 1))
    right = np.empty((m, p + 1))
    # ndu[j] holds degree-j values; kept to form derivatives of degree p
    N = np.zeros((m, p + 1))
    N[:, 0] = 1.0
    lower = None
    for j in range(1, p + 1):
        left[:, j] = x - t[k + 1 - j]
        right[:, j] = t[k + j] - x
        saved = np.zeros(m)
        newN = np.zeros((m, p + 1))
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = N[:, r] / denom
            newN[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        newN[:, j] = saved
        if j == p:
            lower = N[:, :p].copy()
        N = newN

    # dN_{i,p} = p * (N_{i,p-1}/(t_{i+p}-t_i) - N_{i+1,p-1}/(t_{i+p+1}-t_{i+1}))
    dN = np.zeros((m, p + 1))
    for a in range(p + 1):
        i = span + a  # global function index; knots t[i]..t[i+p+1]
        if a >= 1:
            d = t[i + p] - t[i]
            dN[:, a] += np.where(d > 0, lower[:, a - 1] / np.where(d > 0, d, 1.0), 0.0)
        if a <= p - 1:
            d = t[i + p + 1] - t[i + 1]
            dN[:, a] -= np.where(d > 0, lower[:, a] / np.where(d > 0, d, 1.0), 0.0)
    dN *= p
    return span, N, dN


def eval_span(kv: KnotVector, x: float) -> SpanEvaluation:
    span, N, dN = eval_basis(kv, [x])
    return SpanEvaluation(span=int(span[0]), values=N[0], derivs=dN[0])


def eval_function(kv: KnotVector, i: int, x) -> np.ndarray:
    """Value of the single global function ``N_i`` (zero outside its support)."""
    span, N, _ = eval_basis(kv, x)
    a = i - span
    ok = (a >= 0) & (a <= kv.degree)
    out = np.zeros(len(span))
    out[ok] = N[ok, a[ok]]
    return out


@dataclass(frozen=True)
class TensorBasis:
    """Bivariate tensor-product basis; global index ``ix + nx * iy``."""

    kx: KnotVector
    ky: KnotVector

    def __post_init__(self):
        if self.kx.degree != self.ky.degree:
            raise ValueError("mixed degrees per direction are not supported")

    @classmethod
    def uniform(cls, num_spans: tuple[int, int], p: int, extents: tuple[float, float]):
        return cls(open_knot_vector(num_spans[0], p, extents[0]),
                   open_knot_vector(num_spans[1], p, extents[1]))

    @property
    def degree(self) -> int:
        return self.kx.degree

    @property
    def n_dof(self) -> int:
        return self.kx.n * self.ky.n

    @property
    def n_local(self) -> int:
        return (self.degree + 1) ** 2

    @property
    def shape(self) -> tuple[int, int]:
        return self.kx.num_spans, self.ky.num_spans

    @property
    def extents(self) -> tuple[float, float]:
        return self.kx.length, self.ky.length

    @property
    def n_spans(self) -> int:
        return self.kx.num_spans * self.ky.num_spans

    def span_id(self, sx, sy):
        return np.asarray(sx) + self.kx.num_spans * np.asarray(sy)

    def span_dofs(self) -> np.ndarray:
        """(n_spans, (p+1)^2) global indices, local order ``ax + (p+1) * ay``."""
        p1 = self.degree + 1
        sx, sy = np.meshgrid(np.arange(self.kx.num_spans), np.arange(self.ky.num_spans))
        sx, sy = sx.ravel(), sy.ravel()
        a = np.arange(p1)
        ix = sx[:, None, None] + a[None, None, :]
        iy = sy[:, None, None] + a[None, :, None]
        return (ix + self.kx.n * iy).reshape(len(sx), p1 * p1)

    def footprint(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Non-zero basis data at many points.

        Returns ``(span_ids, indices, values, grads)`` with ``indices`` and
        ``values`` shaped ``(m, (p+1)^2)`` and ``grads`` shaped
        ``(m, (p+1)^2, 2)``.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        sx, Nx, dNx = eval_basis(self.kx, pts[:, 0])
        sy, Ny, dNy = eval_basis(self.ky, pts[:, 1])
        p1 = self.degree + 1
        m = pts.shape[0]
        values = (Ny[:, :, None] * Nx[:, None, :]).reshape(m, p1 * p1)
        gx = (Ny[:, :, None] * dNx[:, None, :]).reshape(m, p1 * p1)
        gy = (dNy[:, :, None] * Nx[:, None, :]).reshape(m, p1 * p1)
        a = np.arange(p1)
        ix = sx[:, None, None] + a[None, None, :]
        iy = sy[:, None, None] + a[None, :, None]
        indices = (ix + self.kx.n * iy).reshape(m, p1 * p1)
        return self.span_id(sx, sy), indices, values, np.stack([gx, gy], axis=-1)

    def evaluation_matrix(self, points, derivative: int | None = None):
        """Sparse (m, n_dof) matrix mapping coefficients to values at ``points``.

        ``derivative`` selects d/dx (0) or d/dy (1) instead of values.
        """
        import scipy.sparse as sp

        _, idx, vals, grads = self.footprint(points)
        data = vals if derivative is None else grads[..., derivative]
        m = idx.shape[0]
        rows = np.repeat(np.arange(m), idx.shape[1])
        return sp.csr_matrix((data.ravel(), (rows, idx.ravel())), shape=(m, self.n_dof))


def tensor_footprint(basis: TensorBasis, point) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _, idx, vals, grads = basis.footprint(np.asarray(point, dtype=float)[None, :])
    return idx[0], vals[0], grads[0]
