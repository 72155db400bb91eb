"""Uniform cell-centered grids on a box, sampled fields and quadrature."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import expr as ex
from .errors import DimensionMismatch


@dataclass(frozen=True)
class Grid:
    """Box ``[lower, upper]`` split into ``shape[k]`` equal cells per axis.

    Values live at cell centers. ``Grid.closed`` builds a grid whose centers
    form an equispaced lattice that includes the box boundary, which is what
    a pointwise scan over the closed domain needs.
    """

    lower: tuple
    upper: tuple
    shape: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        n = tuple(int(v) for v in self.shape)
        if not (len(lo) == len(hi) == len(n)) or len(n) == 0:
            raise DimensionMismatch("lower, upper and shape must have the same length")
        for a, b, k in zip(lo, hi, n):
            if not a < b:
                raise ValueError(f"lower bound {a} is not below upper bound {b}")
            if k < 4:
                raise ValueError("each axis needs at least 4 cells")
        total = 1
        for k in n:
            total *= k
        if total > np.iinfo(np.intp).max:
            raise ValueError("grid too large")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "shape", n)

    @classmethod
    def uniform(cls, lower: Sequence[float], upper: Sequence[float], n) -> "Grid":
        d = len(lower)
        shape = (n,) * d if np.isscalar(n) else tuple(n)
        return cls(tuple(lower), tuple(upper), shape)

    @classmethod
    def closed(cls, lower: Sequence[float], upper: Sequence[float], n) -> "Grid":
        """Grid with ``n`` centers per axis at ``linspace(lower, upper, n)``."""
        d = len(lower)
        ns = (n,) * d if np.isscalar(n) else tuple(n)
        lo, hi = [], []
        for a, b, k in zip(lower, upper, ns):
            h = (b - a) / (k - 1)
            lo.append(a - h / 2)
            hi.append(b + h / 2)
        return cls(tuple(lo), tuple(hi), ns)

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def h(self) -> tuple:
        return tuple((b - a) / n for a, b, n in zip(self.lower, self.upper, self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b in zip(self.lower, self.upper)]))

    @property
    def axes(self) -> list:
        """Cell-center coordinates along each axis."""
        return [a + h * (np.arange(n) + 0.5) for a, h, n in zip(self.lower, self.h, self.shape)]

    def points(self) -> np.ndarray:
        """Cell centers as an array of shape ``(d, *shape)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"))

    def center(self, index) -> np.ndarray:
        return np.array([ax[i] for ax, i in zip(self.axes, index)])

    def refine(self, factor: int = 2) -> "Grid":
        return Grid(self.lower, self.upper, tuple(n * factor for n in self.shape))

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "shape": list(self.shape)}


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray
    masked: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise DimensionMismatch(f"field shape {v.shape} != grid shape {self.grid.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class VectorField:
    grid: Grid
    values: np.ndarray  # (d, *shape)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.d, *self.grid.shape):
            raise DimensionMismatch("vector field must have shape (d, *grid.shape)")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.values[i])


class MatrixField:
    """d x d matrices per cell.

    Symmetric fields keep only the upper triangle, so ``M[i, j] == M[j, i]``
    holds bit-for-bit.
    """

    def __init__(self, grid: Grid, values: np.ndarray, symmetric: bool = True):
        values = np.asarray(values, dtype=float)
        d = grid.d
        if values.shape != (d, d, *grid.shape):
            raise DimensionMismatch("matrix field must have shape (d, d, *grid.shape)")
        self.grid = grid
        self.symmetric = bool(symmetric)
        if self.symmetric:
            iu = np.triu_indices(d)
            self._tri = values[iu].copy()
            self._tri.setflags(write=False)
        else:
            self._full = values.copy()
            self._full.setflags(write=False)

    @property
    def d(self) -> int:
        return self.grid.d

    def entry(self, i: int, j: int) -> np.ndarray:
        if not self.symmetric:
            return self._full[i, j]
        if i > j:
            i, j = j, i
        d = self.d
        k = i * d - i * (i - 1) // 2 + (j - i)
        return self._tri[k]

    def full(self) -> np.ndarray:
        if not self.symmetric:
            return self._full.copy()
        d = self.d
        out = np.empty((d, d, *self.grid.shape))
        for i in range(d):
            for j in range(d):
                out[i, j] = self.entry(i, j)
        return out


def sample(e: ex.Expr, g: Grid) -> ScalarField:
    """Evaluate ``e`` at every cell center of ``g``.

    An :class:`EvalError` raised here carries the offending cell index.
    """
    if ex.max_index(e) > g.d:
        raise DimensionMismatch(f"expression uses x{ex.max_index(e)} on a {g.d}-d grid")
    return ScalarField(g, ex.evaluate(e, g.points()))


def sample_vector(exprs: Sequence[ex.Expr], g: Grid) -> VectorField:
    pts = g.points()
    return VectorField(g, np.stack([ex.evaluate(e, pts) for e in exprs]))


def integrate(f) -> float:
    """Midpoint rule: sum of cell values times cell volume."""
    values = f.values if isinstance(f, ScalarField) else np.asarray(f)
    grid = f.grid
    return float(np.sum(values) * grid.cell_volume)


def fd_gradient(f: ScalarField) -> VectorField:
    """Second-order central differences inside, second-order one-sided at edges."""
    g = f.grid
    if min(g.shape) < 3:
        raise ValueError("fd_gradient needs at least 3 cells per axis")
    parts = np.gradient(f.values, *g.h, edge_order=2)
    if g.d == 1:
        parts = [parts]
    return VectorField(g, np.stack(parts))


def boundary_faces(g: Grid):
    """Yield ``(axis, normal_sign, points, face_area)`` for each box face.

    ``points`` has shape ``(d, *face_shape)``: the boundary coordinate is
    pinned to the box bound and the others run over cell centers.
    """
    pts = g.points()
    for k in range(g.d):
        area = g.cell_volume / g.h[k]
        for sign, bound, sl in ((-1, g.lower[k], 0), (1, g.upper[k], -1)):
            face = np.take(pts, sl, axis=k + 1).copy()
            face[k] = bound
            yield k, sign, face, area


def boundary_cells(values: np.ndarray, axis: int, sign: int) -> np.ndarray:
    """Slice of cell values adjacent to the face ``(axis, sign)``."""
    return np.take(values, 0 if sign < 0 else -1, axis=axis)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(f, path) -> None:
    """Write a field with header ``x1..xd`` followed by the value columns.

    Rows follow lexicographic cell-index order; numbers carry 17 significant
    digits.
    """
    g = f.grid
    d = g.d
    pts = g.points().reshape(d, -1)
    if isinstance(f, ScalarField):
        cols = ["value"]
        data = [f.values.reshape(-1)]
    elif isinstance(f, VectorField):
        cols = [f"v{i + 1}" for i in range(d)]
        data = [f.values[i].reshape(-1) for i in range(d)]
    elif isinstance(f, MatrixField):
        cols = [f"m{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        data = [f.entry(i, j).reshape(-1) for i in range(d) for j in range(d)]
    else:
        raise TypeError(f"cannot export {type(f).__name__}")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(d)] + cols)
        for k in range(pts.shape[1]):
            w.writerow([_fmt(v) for v in pts[:, k]] + [_fmt(c[k]) for c in data])


def read_csv(path, grid: Grid) -> np.ndarray:
    """Read back the value columns of a field CSV as ``(ncols, *grid.shape)``."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    vals = arr[:, grid.d:]
    return vals.T.reshape(vals.shape[1], *grid.shape)
