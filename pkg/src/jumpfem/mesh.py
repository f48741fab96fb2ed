"""Sample-adapted and uniform simplicial meshes of the unit interval / square.

All meshes here are tensor products of 1D break sequences: segments in 1D,
rectangles split along the lower-left to upper-right diagonal in 2D. An
adapted mesh places every partition line on a grid line, so interfaces are
unions of mesh edges and each cell lies inside one partition element.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .jump_model import Partition


class GeometryError(ValueError):
    pass


class DegeneratePartitionError(ValueError):
    pass


DEFAULT_RHO_BAR = 10.0


@dataclass(frozen=True, eq=False)
class Mesh:
    dim: int
    vertices: np.ndarray  # (V,) in 1D, (V, 2) in 2D
    cells: np.ndarray  # (C, dim + 1) vertex indices
    cell_to_partition: np.ndarray
    boundary_vertices: np.ndarray
    h: float  # realized max cell diameter
    h_bar: float
    xs: np.ndarray  # grid lines, x direction
    ys: np.ndarray | None = None
    straddle: np.ndarray | None = None
    adapted: bool = False

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def pitch(self) -> float:
        """Largest axis-aligned grid spacing."""
        p = float(np.max(np.diff(self.xs)))
        if self.dim == 2:
            p = max(p, float(np.max(np.diff(self.ys))))
        return p

    @property
    def free_vertices(self) -> np.ndarray:
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary_vertices] = False
        return np.nonzero(mask)[0]

    @property
    def cell_points(self) -> np.ndarray:
        """Vertex coordinates per cell, shape (C, dim + 1, dim)."""
        v = self.vertices.reshape(self.n_vertices, self.dim)
        return v[self.cells]

    @property
    def centroids(self) -> np.ndarray:
        c = self.cell_points.mean(axis=1)
        return c[:, 0] if self.dim == 1 else c

    def edges(self) -> np.ndarray:
        if self.dim == 1:
            return self.cells.copy()
        e = np.concatenate([self.cells[:, [0, 1]], self.cells[:, [1, 2]], self.cells[:, [0, 2]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def interpolate(self, values, points) -> np.ndarray:
        """Evaluate the P1 function with vertex ``values`` at ``points``."""
        values = np.asarray(values, dtype=float)
        pts = np.asarray(points, dtype=float)
        if self.dim == 1:
            pts = pts.reshape(-1)
            _check_unit(pts)
            return np.interp(pts, self.xs, values)
        pts = pts.reshape(-1, 2)
        _check_unit(pts)
        nx = len(self.xs) - 1
        ix = np.clip(np.searchsorted(self.xs, pts[:, 0], side="right") - 1, 0, nx - 1)
        iy = np.clip(np.searchsorted(self.ys, pts[:, 1], side="right") - 1, 0, len(self.ys) - 2)
        s = (pts[:, 0] - self.xs[ix]) / (self.xs[ix + 1] - self.xs[ix])
        t = (pts[:, 1] - self.ys[iy]) / (self.ys[iy + 1] - self.ys[iy])
        stride = nx + 1
        v00 = values[iy * stride + ix]
        v10 = values[iy * stride + ix + 1]
        v01 = values[(iy + 1) * stride + ix]
        v11 = values[(iy + 1) * stride + ix + 1]
        lower = s >= t
        return np.where(
            lower,
            v00 + s * (v10 - v00) + t * (v11 - v10),
            v00 + t * (v01 - v00) + s * (v11 - v01),
        )

    def dump(self, path) -> None:
        """Plain-text listing: vertices, then cells with their partition ids."""
        v = self.vertices.reshape(self.n_vertices, self.dim)
        with open(path, "w") as fh:
            fh.write(f"# dim {self.dim} adapted {int(self.adapted)} h {self.h!r} h_bar {self.h_bar!r}\n")
            fh.write(f"vertices {self.n_vertices}\n")
            for row in v:
                fh.write(" ".join(repr(float(c)) for c in row) + "\n")
            fh.write(f"cells {self.n_cells}\n")
            for cell, pid in zip(self.cells, self.cell_to_partition):
                fh.write(" ".join(str(int(i)) for i in cell) + f" {int(pid)}\n")


def _check_unit(pts):
    if np.any(pts < -1e-12) or np.any(pts > 1.0 + 1e-12):
        raise GeometryError("point outside the closed unit domain")


def subdivide(breaks, h_bar: float) -> np.ndarray:
    """Split each interval of ``breaks`` into ``ceil(len / h_bar)`` equal pieces."""
    if not h_bar > 0:
        raise ValueError("h_bar must be positive")
    breaks = np.asarray(breaks, dtype=float)
    pieces = [breaks[:1]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        n = max(1, math.ceil((b - a) / h_bar - 1e-9))
        pts = a + (b - a) * np.arange(1, n + 1) / n
        pts[-1] = b
        pieces.append(pts)
    return np.concatenate(pieces)


def _mesh_1d(xs, partition: Partition | None, h_bar, adapted) -> Mesh:
    cells = np.stack([np.arange(len(xs) - 1), np.arange(1, len(xs))], axis=1)
    mids = 0.5 * (xs[:-1] + xs[1:])
    straddle = np.zeros(len(cells), dtype=bool)
    if partition is not None:
        pid = partition.locate(mids, strict=False)
        inner = partition.xs[1:-1]
        straddle = np.any((xs[:-1, None] < inner[None, :]) & (inner[None, :] < xs[1:, None]), axis=1)
    else:
        pid = np.zeros(len(cells), dtype=int)
    return Mesh(
        dim=1,
        vertices=xs,
        cells=cells,
        cell_to_partition=pid,
        boundary_vertices=np.array([0, len(xs) - 1]),
        h=float(np.max(np.diff(xs))),
        h_bar=h_bar,
        xs=xs,
        straddle=straddle,
        adapted=adapted,
    )


def _mesh_2d(xs, ys, partition: Partition | None, h_bar, adapted) -> Mesh:
    nx, ny = len(xs) - 1, len(ys) - 1
    stride = nx + 1
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.stack([gx.ravel(), gy.ravel()], axis=1)
    jx, jy = np.meshgrid(np.arange(nx), np.arange(ny))
    v00 = (jy * stride + jx).ravel()
    v10, v01, v11 = v00 + 1, v00 + stride, v00 + stride + 1
    # two triangles per rectangle, interleaved per rectangle
    cells = np.stack(
        [np.stack([v00, v10, v11], axis=1), np.stack([v00, v11, v01], axis=1)], axis=1
    ).reshape(-1, 3)
    mid_x = np.repeat((0.5 * (xs[:-1] + xs[1:]))[jx.ravel()], 2)
    mid_y = np.repeat((0.5 * (ys[:-1] + ys[1:]))[jy.ravel()], 2)
    if partition is not None:
        pid = partition.locate(np.stack([mid_x, mid_y], axis=1), strict=False)
        sx = _axis_straddle(xs, partition.xs[1:-1])[jx.ravel()]
        sy = _axis_straddle(ys, partition.ys[1:-1])[jy.ravel()]
        straddle = np.repeat(sx | sy, 2)
        # partition ids from the rectangle centre are the triangle ids, too
    else:
        pid = np.zeros(len(cells), dtype=int)
        straddle = np.zeros(len(cells), dtype=bool)
    on_bnd = (
        (vertices[:, 0] == 0.0) | (vertices[:, 0] == 1.0)
        | (vertices[:, 1] == 0.0) | (vertices[:, 1] == 1.0)
    )
    dx, dy = np.diff(xs), np.diff(ys)
    h = float(np.max(np.hypot(dx[jx.ravel()], dy[jy.ravel()])))
    return Mesh(
        dim=2,
        vertices=vertices,
        cells=cells,
        cell_to_partition=pid,
        boundary_vertices=np.nonzero(on_bnd)[0],
        h=h,
        h_bar=h_bar,
        xs=xs,
        ys=ys,
        straddle=straddle,
        adapted=adapted,
    )


def _axis_straddle(grid, lines):
    return np.any((grid[:-1, None] < lines[None, :]) & (lines[None, :] < grid[1:, None]), axis=1)


def adapted_mesh_1d(partition: Partition, h_bar: float) -> Mesh:
    if partition.dim != 1:
        raise ValueError("adapted_mesh_1d needs a 1D partition")
    return _mesh_1d(subdivide(partition.xs, h_bar), partition, h_bar, adapted=True)


def adapted_mesh_2d(partition: Partition, h_bar: float, strict: bool = True) -> Mesh:
    """Interface-fitted triangulation with grid pitch at most ``h_bar``.

    Each gap between consecutive partition lines is split evenly, so grid
    spacings lie in ``[h_bar / 2, h_bar]`` whenever every gap is at least
    ``h_bar / 2``. Closer lines raise :class:`DegeneratePartitionError`
    when ``strict``; otherwise the mesh keeps the resulting thin strip.
    """
    if partition.dim != 2:
        raise ValueError("adapted_mesh_2d needs a 2D partition")
    if strict:
        gap = min(np.min(np.diff(partition.xs)), np.min(np.diff(partition.ys)))
        if gap < 0.5 * h_bar:
            raise DegeneratePartitionError(
                f"partition lines {gap:.3g} apart, below h_bar/2 = {0.5 * h_bar:.3g}"
            )
    xs = subdivide(partition.xs, h_bar)
    ys = subdivide(partition.ys, h_bar)
    return _mesh_2d(xs, ys, partition, h_bar, adapted=True)


def adapted_mesh(partition: Partition, h_bar: float, strict: bool = False) -> Mesh:
    if partition.dim == 1:
        return adapted_mesh_1d(partition, h_bar)
    return adapted_mesh_2d(partition, h_bar, strict=strict)


def uniform_mesh(dim: int, h: float, partition: Partition | None = None) -> Mesh:
    """Uniform grid of pitch ``1 / ceil(1 / h)``; ignores interfaces."""
    if not h > 0:
        raise ValueError("h must be positive")
    n = max(1, math.ceil(1.0 / h - 1e-9))
    xs = np.linspace(0.0, 1.0, n + 1)
    if dim == 1:
        return _mesh_1d(xs, partition, h, adapted=False)
    if dim == 2:
        return _mesh_2d(xs, xs.copy(), partition, h, adapted=False)
    raise ValueError("dim must be 1 or 2")


def triangle_ratios(points: np.ndarray) -> np.ndarray:
    """Circumradius / inradius for triangles given as (T, 3, 2) coordinates."""
    p = np.asarray(points, dtype=float).reshape(-1, 3, 2)
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    scale = np.maximum(np.maximum(a, b), c)
    if np.any(area <= 1e-14 * scale**2):
        raise GeometryError("degenerate triangle with zero area")
    # R = abc / (4A), r = 2A / (a + b + c)
    return a * b * c * (a + b + c) / (8.0 * area**2)


def shape_regularity(mesh: Mesh) -> float:
    if mesh.dim != 2:
        raise ValueError("shape regularity is defined for triangulations")
    return float(np.max(triangle_ratios(mesh.cell_points)))
