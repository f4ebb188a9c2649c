"""Implicit shapes, the fictitious-domain indicator and composed quadrature."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

MAX_DEPTH = 12


class Shape:
    """Base class; subclasses implement a vectorized ``inside(points)``."""

    def inside(self, points) -> np.ndarray:
        raise NotImplementedError

    def __or__(self, other):
        return Union((self, other))

    def __and__(self, other):
        return Intersection((self, other))

    def __invert__(self):
        return Complement(self)


def _xy(points):
    pts = np.asarray(points, dtype=float)
    return pts[..., 0], pts[..., 1]


@dataclass(frozen=True)
class Circle(Shape):
    center: tuple[float, float]
    radius: float

    def inside(self, points):
        x, y = _xy(points)
        return (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2 <= self.radius**2


@dataclass(frozen=True)
class RotatedEllipse(Shape):
    center: tuple[float, float]
    a: float
    b: float
    angle_deg: float = 0.0

    def inside(self, points):
        x, y = _xy(points)
        dx, dy = x - self.center[0], y - self.center[1]
        c, s = np.cos(np.radians(self.angle_deg)), np.sin(np.radians(self.angle_deg))
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


@dataclass(frozen=True)
class Box(Shape):
    lo: tuple[float, float]
    hi: tuple[float, float]

    def inside(self, points):
        x, y = _xy(points)
        return (x >= self.lo[0]) & (x <= self.hi[0]) & (y >= self.lo[1]) & (y <= self.hi[1])


@dataclass(frozen=True)
class BelowSpline(Shape):
    """Region under a natural cubic spline through ``points`` (sorted by x)."""

    points: tuple[tuple[float, float], ...]
    _spline: CubicSpline = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "_spline", CubicSpline(pts[:, 0], pts[:, 1], bc_type="natural"))

    def inside(self, points):
        x, y = _xy(points)
        return y <= self._spline(x)


@dataclass(frozen=True)
class Union(Shape):
    parts: tuple[Shape, ...]

    def inside(self, points):
        out = np.zeros(np.shape(points)[:-1], dtype=bool)
        for part in self.parts:
            out |= part.inside(points)
        return out


@dataclass(frozen=True)
class Intersection(Shape):
    parts: tuple[Shape, ...]

    def inside(self, points):
        out = np.ones(np.shape(points)[:-1], dtype=bool)
        for part in self.parts:
            out &= part.inside(points)
        return out


@dataclass(frozen=True)
class Complement(Shape):
    part: Shape

    def inside(self, points):
        return ~self.part.inside(points)


@dataclass(frozen=True)
class Everything(Shape):
    def inside(self, points):
        return np.ones(np.shape(points)[:-1], dtype=bool)


@dataclass(frozen=True)
class AlphaField:
    """alpha = 1 where ``physical.inside`` holds, ``eps`` elsewhere."""

    physical: Shape = Everything()
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")

    def __call__(self, points) -> np.ndarray:
        return np.where(self.physical.inside(points), 1.0, self.eps)


def physical_region(records) -> Shape:
    """Compose ``(shape, role)`` records in order, starting from the whole box.

    ``role == "fictitious"`` removes the shape, ``"physical"`` adds it back.
    """
    region: Shape = Everything()
    for shape, role in records:
        if role == "fictitious":
            region = Intersection((region, Complement(shape)))
        elif role == "physical":
            region = Union((region, shape))
        else:
            raise ValueError(f"unknown shape role {role!r}")
    return region


# -- quadtree integration ---------------------------------------------------

_STENCIL = np.linspace(0.0, 1.0, 5)


def _is_cut(boxes: np.ndarray, shape: Shape) -> np.ndarray:
    """5x5 corner/edge/centre sampling; cut iff the samples disagree."""
    boxes = np.atleast_2d(boxes)
    sx = boxes[:, 0, None] + (boxes[:, 2] - boxes[:, 0])[:, None] * _STENCIL[None, :]
    sy = boxes[:, 1, None] + (boxes[:, 3] - boxes[:, 1])[:, None] * _STENCIL[None, :]
    X = np.broadcast_to(sx[:, None, :], (len(boxes), 5, 5))
    Y = np.broadcast_to(sy[:, :, None], (len(boxes), 5, 5))
    ins = shape.inside(np.stack([X, Y], axis=-1)).reshape(len(boxes), 25)
    return ins.any(axis=1) & ~ins.all(axis=1)


def _split(boxes: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = boxes.T
    xm, ym = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    kids = np.stack([
        np.stack([x0, y0, xm, ym], axis=1),
        np.stack([xm, y0, x1, ym], axis=1),
        np.stack([x0, ym, xm, y1], axis=1),
        np.stack([xm, ym, x1, y1], axis=1),
    ], axis=1)
    return kids.reshape(-1, 4)


def partition_many(boxes, shape: Shape, depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Breadth-first quadtree over many boxes at once.

    Returns ``(leaves, parent)``, where ``parent[k]`` is the row of ``boxes``
    that leaf ``k`` came from. Leaves are grouped by parent in input order.
    """
    if not 0 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must lie in [0, {MAX_DEPTH}], got {depth}")
    boxes = np.atleast_2d(np.asarray(boxes, dtype=float))
    active = boxes
    owner = np.arange(len(boxes))
    leaves, parents = [], []
    for level in range(depth + 1):
        if len(active) == 0:
            break
        cut = _is_cut(active, shape) if level < depth else np.zeros(len(active), dtype=bool)
        leaves.append(active[~cut])
        parents.append(owner[~cut])
        active = _split(active[cut])
        owner = np.repeat(owner[cut], 4)
    leaves = np.concatenate(leaves) if leaves else np.empty((0, 4))
    parents = np.concatenate(parents) if parents else np.empty(0, dtype=int)
    order = np.argsort(parents, kind="stable")
    return leaves[order], parents[order]


def quadtree_partition(bounds, shape: Shape, depth: int) -> list[tuple[float, float, float, float]]:
    leaves, _ = partition_many(np.asarray(bounds, dtype=float)[None, :], shape, depth)
    return [tuple(b) for b in leaves]


@dataclass
class QuadratureCell:
    bounds: tuple[float, float, float, float]
    points: np.ndarray
    weights: np.ndarray
    alpha: np.ndarray | None = None
    voxel: np.ndarray | None = None


def gauss_rule(q: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre on [0, 1]^2, weights summing to 1."""
    if not 1 <= q <= 10:
        raise ValueError(f"quadrature order must lie in [1, 10], got {q}")
    x, w = np.polynomial.legendre.leggauss(q)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    X, Y = np.meshgrid(x, x)
    W = np.outer(w, w)
    return np.stack([X.ravel(), Y.ravel()], axis=1), W.ravel()


def map_rule(boxes: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss points of order ``q`` in every box: ``(points, weights, box_index)``."""
    ref, w = gauss_rule(q)
    boxes = np.atleast_2d(boxes)
    dx = boxes[:, 2] - boxes[:, 0]
    dy = boxes[:, 3] - boxes[:, 1]
    px = boxes[:, 0, None] + dx[:, None] * ref[None, :, 0]
    py = boxes[:, 1, None] + dy[:, None] * ref[None, :, 1]
    wts = (dx * dy)[:, None] * w[None, :]
    idx = np.repeat(np.arange(len(boxes)), len(w))
    return np.stack([px.ravel(), py.ravel()], axis=1), wts.ravel(), idx


def gauss_points(box, q: int) -> QuadratureCell:
    pts, wts, _ = map_rule(np.asarray(box, dtype=float)[None, :], q)
    return QuadratureCell(bounds=tuple(box), points=pts, weights=wts)


def composed_rule(span_box, alpha: AlphaField, voxel_boxes, depth: int, q: int) -> QuadratureCell:
    """Composed rule over the voxels tiling one knot span."""
    pts, wts, vox = voxel_quadrature(np.asarray(voxel_boxes, dtype=float), alpha.physical, depth, q)
    return QuadratureCell(bounds=tuple(span_box), points=pts, weights=wts, alpha=alpha(pts), voxel=vox)


def voxel_quadrature(voxel_boxes: np.ndarray, shape: Shape, depth: int, q: int):
    """Gauss points for every voxel, quadtree-refined where ``shape`` cuts it.

    Returns ``(points, weights, voxel_index)`` sorted by voxel index.
    """
    voxel_boxes = np.atleast_2d(voxel_boxes)
    cut = _is_cut(voxel_boxes, shape) if depth > 0 else np.zeros(len(voxel_boxes), dtype=bool)
    uncut = np.flatnonzero(~cut)
    p_u, w_u, i_u = map_rule(voxel_boxes[uncut], q)
    i_u = uncut[i_u]
    cut_ids = np.flatnonzero(cut)
    if len(cut_ids):
        leaves, parent = partition_many(voxel_boxes[cut_ids], shape, depth)
        p_c, w_c, i_c = map_rule(leaves, q)
        i_c = cut_ids[parent[i_c]]
        pts = np.concatenate([p_u, p_c])
        wts = np.concatenate([w_u, w_c])
        ids = np.concatenate([i_u, i_c])
    else:
        pts, wts, ids = p_u, w_u, i_u
    order = np.argsort(ids, kind="stable")
    return pts[order], wts[order], ids[order]
