"""P1 Galerkin assembly, backward Euler stepping and lattice error norms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .jump_model import CoefficientPair
from .mesh import Mesh


class CoefficientValidityError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


RESIDUAL_TOL = 1e-10


# ---------------------------------------------------------------------------
# Element geometry


def _element_geometry(mesh: Mesh):
    """Measures and constant gradients of the barycentric hat functions."""
    pts = mesh.cell_points
    if mesh.dim == 1:
        h = pts[:, 1, 0] - pts[:, 0, 0]
        grads = np.stack([-1.0 / h, 1.0 / h], axis=1)[:, :, None]
        return h, grads
    d1 = pts[:, 1] - pts[:, 0]
    d2 = pts[:, 2] - pts[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * np.abs(det)
    # rows of inv(J)^T give grad(lambda_1), grad(lambda_2)
    g1 = np.stack([d2[:, 1], -d2[:, 0]], axis=1) / det[:, None]
    g2 = np.stack([-d1[:, 1], d1[:, 0]], axis=1) / det[:, None]
    grads = np.stack([-(g1 + g2), g1, g2], axis=1)
    return area, grads


def _scatter(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    k = mesh.dim + 1
    rows = np.repeat(mesh.cells, k, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, k)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _restrict(mat: sp.csr_matrix, free: np.ndarray) -> sp.csr_matrix:
    return mat[free][:, free].tocsr()


# ---------------------------------------------------------------------------
# Assembly


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Mass and stiffness matrices on the free (interior) vertices."""

    mesh: Mesh
    M: sp.csr_matrix
    A: sp.csr_matrix
    free: np.ndarray

    @property
    def n_dof(self) -> int:
        return len(self.free)

    def full_vector(self, c: np.ndarray) -> np.ndarray:
        out = np.zeros(self.mesh.n_vertices)
        out[self.free] = c
        return out


def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Exact P1 mass matrix on all vertices."""
    meas, _ = _element_geometry(mesh)
    k = mesh.dim + 1
    base = (np.ones((k, k)) + np.eye(k)) / ((k + 1) * k)
    return _scatter(mesh, meas[:, None, None] * base[None])


def assemble(mesh: Mesh, coeff: CoefficientPair, advection: bool = True) -> SparseSystem:
    """Stiffness for ``(a grad u, grad v) + (b . grad u, v)`` by the centroid rule."""
    meas, grads = _element_geometry(mesh)
    centroids = mesh.centroids
    a, b = coeff.evaluate(centroids, mesh.cell_to_partition)
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise CoefficientValidityError("diffusion coefficient must be positive at every quadrature point")
    local = (meas * a)[:, None, None] * np.einsum("cid,cjd->cij", grads, grads)
    if advection:
        b = np.asarray(b, dtype=float).reshape(mesh.n_cells, mesh.dim)
        if not np.all(np.isfinite(b)):
            raise CoefficientValidityError("advection coefficient is not finite")
        # (b . grad phi_j) phi_i(centroid), phi_i(centroid) = 1 / (dim + 1)
        bg = np.einsum("cd,cjd->cj", b, grads)
        local = local + (meas / (mesh.dim + 1))[:, None, None] * np.broadcast_to(
            bg[:, None, :], local.shape
        )
    free = mesh.free_vertices
    return SparseSystem(mesh, _restrict(mass_matrix(mesh), free), _restrict(_scatter(mesh, local), free), free)


def assemble_load(mesh: Mesh, f: Callable, t: float = 0.0) -> np.ndarray:
    """Midpoint-rule load vector ``F_j = sum_K |K| f(c_K, t) / (dim + 1)``."""
    meas, _ = _element_geometry(mesh)
    vals = np.broadcast_to(np.asarray(f(mesh.centroids, t), dtype=float), meas.shape)
    contrib = np.repeat((meas * vals / (mesh.dim + 1))[:, None], mesh.dim + 1, axis=1)
    full = np.bincount(mesh.cells.ravel(), weights=contrib.ravel(), minlength=mesh.n_vertices)
    return full[mesh.free_vertices]


def nodal_interpolate(mesh: Mesh, g: Callable) -> np.ndarray:
    """Vertex values of ``g`` at the free vertices."""
    v = mesh.vertices[mesh.free_vertices]
    return np.asarray(g(v), dtype=float).reshape(-1)


# ---------------------------------------------------------------------------
# Linear solves


class LinearSolver:
    """Factorize once, solve many; ``method`` is ``direct`` or ``bicgstab``."""

    def __init__(self, matrix, method: str = "direct"):
        self.matrix = sp.csc_matrix(matrix)
        self.method = method
        if method == "direct":
            try:
                self._lu = spla.splu(self.matrix, permc_spec="COLAMD")
            except RuntimeError as exc:
                raise SolverError(f"sparse LU failed: {exc}") from exc
        elif method == "bicgstab":
            diag = self.matrix.diagonal()
            if np.any(diag == 0):
                raise SolverError("zero diagonal entry; Jacobi preconditioner undefined")
            self._precond = spla.LinearOperator(self.matrix.shape, matvec=lambda x: x / diag)
        else:
            raise ValueError(f"unknown solver {method!r}")

    def solve(self, rhs, x0=None) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self.method == "direct":
            x = self._lu.solve(rhs)
        else:
            x, info = spla.bicgstab(self.matrix, rhs, x0=x0, rtol=1e-13, atol=0.0,
                                    maxiter=10 * len(rhs), M=self._precond)
            if info != 0:
                raise SolverError(f"BiCGSTAB did not converge (info={info})")
        scale = np.linalg.norm(rhs)
        r = rhs - self.matrix @ x
        res = np.linalg.norm(r)
        if self.method == "direct":
            # iterative refinement for badly conditioned fine-mesh systems
            for _ in range(3):
                if res <= RESIDUAL_TOL * max(scale, 1e-300):
                    break
                x = x + self._lu.solve(r)
                r = rhs - self.matrix @ x
                res = np.linalg.norm(r)
        if not np.all(np.isfinite(x)) or res > RESIDUAL_TOL * max(scale, 1e-300):
            raise SolverError(f"linear solve residual {res:.3e} exceeds tolerance")
        return x


def solve_linear(matrix, rhs, method: str = "direct") -> np.ndarray:
    rhs = np.asarray(rhs, dtype=float)
    if not np.any(rhs):
        return np.zeros_like(rhs)
    return LinearSolver(matrix, method).solve(rhs)


# ---------------------------------------------------------------------------
# Time stepping


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Backward Euler states, linear in time between stored nodes.

    ``times`` lists the stored nodes; when only the final step was kept this
    is ``[t_{n-1}, t_n]``.
    """

    times: np.ndarray
    states: np.ndarray  # (len(times), n_dof)
    system: SparseSystem
    dt: float
    n_steps: int

    @property
    def mesh(self) -> Mesh:
        return self.system.mesh

    def state_at(self, t: float) -> np.ndarray:
        times = self.times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise ValueError(f"t={t} outside stored range [{times[0]}, {times[-1]}]")
        i = int(np.clip(np.searchsorted(times, t, side="right"), 1, len(times) - 1))
        t0, t1 = times[i - 1], times[i]
        theta = min(max((t - t0) / (t1 - t0), 0.0), 1.0)
        return (1.0 - theta) * self.states[i - 1] + theta * self.states[i]

    def nodal_values(self, t: float) -> np.ndarray:
        """All-vertex values (boundary zeros included) at time ``t``."""
        return self.system.full_vector(self.state_at(t))


def time_grid(T: float, dt: float) -> tuple[int, float]:
    """Equidistant grid: ``n = round(T / dt)`` steps, ``dt`` adjusted to divide ``T``."""
    if not (dt > 0 and T > 0):
        raise ValueError("T and dt must be positive")
    n = max(1, int(round(T / dt)))
    return n, T / n


def backward_euler(system: SparseSystem, load, c0, dt: float, T: float,
                   keep: str = "all", solver: str = "direct") -> Trajectory:
    """Solve ``(M + dt A) c_i = dt F(t_i) + M c_{i-1}`` for ``i = 1..n``.

    ``load`` is a vector (time-independent) or a callable ``t -> vector``.
    ``keep='last'`` stores only the final two states.
    """
    n, dt = time_grid(T, dt)
    lhs = (system.M + dt * system.A).tocsc()
    try:
        lin = LinearSolver(lhs, solver)
    except SolverError as exc:
        raise SolverError(f"step 1: {exc}") from exc
    c = np.asarray(c0, dtype=float).copy()
    const_load = None if callable(load) else np.asarray(load, dtype=float)
    stored = [c.copy()]
    for i in range(1, n + 1):
        t = i * dt
        f = const_load if const_load is not None else np.asarray(load(t), dtype=float)
        rhs = dt * f + system.M @ c
        try:
            c = lin.solve(rhs, x0=c)
        except SolverError as exc:
            raise SolverError(f"step {i}: {exc}") from exc
        if keep == "all" or i >= n - 1:
            stored.append(c.copy())
    if keep == "all":
        times = np.arange(n + 1) * dt
    else:
        stored = stored[-2:]
        times = np.array([(n - 1) * dt, n * dt])
    times[-1] = T
    return Trajectory(times, np.array(stored), system, dt, n)


# ---------------------------------------------------------------------------
# Reference lattice and norms


@dataclass(frozen=True)
class Lattice:
    """Uniform grid with ``n`` points per axis on the closed unit domain."""

    dim: int
    n: int

    @property
    def spacing(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def points(self) -> np.ndarray:
        if self.dim == 1:
            return self.axis
        gx, gy = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


def evaluate_on_grid(traj: Trajectory, t: float, lattice: Lattice) -> np.ndarray:
    """Space-time interpolant at ``t`` sampled on the lattice, shaped ``lattice.shape``."""
    vals = traj.mesh.interpolate(traj.nodal_values(t), lattice.points)
    return vals.reshape(lattice.shape)


def _trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[[0, -1]] *= 0.5
    return w


def _l2_squared(v: np.ndarray, h: float) -> float:
    if v.ndim == 1:
        return float(np.sum(_trapezoid_weights(len(v), h) * v**2))
    wx = _trapezoid_weights(v.shape[0], h)
    wy = _trapezoid_weights(v.shape[1], h)
    return float(wx @ (v**2) @ wy)


def _h1_semi_squared(v: np.ndarray, h: float) -> float:
    # forward differences live on interval midpoints: midpoint rule along the
    # differenced axis, trapezoid along the other
    if v.ndim == 1:
        return float(np.sum(np.diff(v) ** 2) / h)
    dx = np.diff(v, axis=0) / h
    dy = np.diff(v, axis=1) / h
    wx = _trapezoid_weights(v.shape[0], h)
    wy = _trapezoid_weights(v.shape[1], h)
    return float(h * np.sum((dx**2) @ wy) + h * np.sum(wx @ (dy**2)))


def grid_norm(values, lattice: Lattice, kind: str = "H1", times=None) -> float:
    """Lattice norms: ``L2``, ``H1_semi``, ``H1`` (full) or ``parabolic_sup``.

    For ``parabolic_sup`` pass snapshots stacked on axis 0 with their
    ``times``; the result is ``max_t (|w(t)|_L2^2 + int_0^t |w|_H1^2)^(1/2)``
    with the time integral by the trapezoid rule.
    """
    v = np.asarray(values, dtype=float)
    h = lattice.spacing
    if kind == "parabolic_sup":
        if times is None or len(times) != v.shape[0]:
            raise ValueError("parabolic_sup needs one time per snapshot")
        l2 = np.array([_l2_squared(s.reshape(lattice.shape), h) for s in v])
        semi = np.array([_h1_semi_squared(s.reshape(lattice.shape), h) for s in v])
        dt = np.diff(np.asarray(times, dtype=float))
        integral = np.concatenate([[0.0], np.cumsum(0.5 * dt * (semi[1:] + semi[:-1]))])
        return float(math.sqrt(np.max(l2 + integral)))
    v = v.reshape(lattice.shape)
    if kind == "L2":
        return math.sqrt(_l2_squared(v, h))
    if kind == "H1_semi":
        return math.sqrt(_h1_semi_squared(v, h))
    if kind == "H1":
        return math.sqrt(_l2_squared(v, h) + _h1_semi_squared(v, h))
    raise ValueError(f"unknown norm {kind!r}")


# ---------------------------------------------------------------------------
# Element-wise error against a closed-form function (verification only)

_GAUSS_1D = np.polynomial.legendre.leggauss(5)

# degree-5 seven-point rule on the reference triangle (barycentric, weights sum to 1)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_TRI_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
_TRI_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


def fe_error(mesh: Mesh, nodal: np.ndarray, exact: Callable, exact_grad: Callable) -> tuple[float, float]:
    """``(L2 error, H1-seminorm error)`` of a P1 function by high-order quadrature."""
    meas, grads = _element_geometry(mesh)
    vals = np.asarray(nodal, dtype=float)[mesh.cells]  # (C, k)
    fe_grad = np.einsum("ci,cid->cd", vals, grads)
    pts = mesh.cell_points
    if mesh.dim == 1:
        xg, wg = _GAUSS_1D
        lam1 = 0.5 * (xg + 1.0)
        bary = np.stack([1.0 - lam1, lam1], axis=1)
        weights = 0.5 * wg
    else:
        bary, weights = _TRI_BARY, _TRI_W
    qp = np.einsum("qi,cid->cqd", bary, pts)  # (C, Q, d)
    uh = np.einsum("qi,ci->cq", bary, vals)
    flat = qp.reshape(-1, mesh.dim)
    arg = flat[:, 0] if mesh.dim == 1 else flat
    u = np.asarray(exact(arg), dtype=float).reshape(uh.shape)
    gu = np.asarray(exact_grad(arg), dtype=float).reshape(uh.shape + (mesh.dim,))
    l2 = np.sum(meas[:, None] * weights[None, :] * (u - uh) ** 2)
    semi = np.sum(meas[:, None] * weights[None, :] * np.sum((gu - fe_grad[:, None, :]) ** 2, axis=2))
    return math.sqrt(l2), math.sqrt(semi)


def exact_stiffness_1d(mesh: Mesh, a: Callable, order: int = 10) -> sp.csr_matrix:
    """Diffusion stiffness with Gauss quadrature of ``a`` per element (1D oracle)."""
    xg, wg = np.polynomial.legendre.leggauss(order)
    meas, grads = _element_geometry(mesh)
    x0 = mesh.cell_points[:, 0, 0]
    qp = x0[:, None] + meas[:, None] * 0.5 * (xg[None, :] + 1.0)
    avg = np.sum(0.5 * wg[None, :] * a(qp), axis=1)
    local = (meas * avg)[:, None, None] * np.einsum("cid,cjd->cij", grads, grads)
    return _restrict(_scatter(mesh, local), mesh.free_vertices)
