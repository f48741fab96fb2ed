"""Random partitions, jump heights and the composed jump coefficients.

The diffusion coefficient is ``a(x) = abar(x) + phi(W(x)) + P(x)`` where ``P``
is piecewise constant on a random partition of the domain; the advection
coefficient is ``b(x) = min(a(x) * b1(x), b2(x))`` componentwise.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, special

from .random_field import FieldRealization, eval_field


class ConfigurationError(ValueError):
    pass


class AmbiguityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Partitions


@dataclass(frozen=True, eq=False)
class Partition:
    """Rectilinear partition of (0, 1)^dim.

    ``xs`` (and ``ys`` in 2D) are the sorted break coordinates including the
    domain boundary. Cells are intervals in 1D and rectangles in 2D, numbered
    row-major: ``id = iy * (len(xs) - 1) + ix``.
    """

    dim: int
    xs: np.ndarray
    ys: np.ndarray | None = None
    kind: str = "rectilinear"

    def __post_init__(self):
        for lines in (self.xs, self.ys) if self.dim == 2 else (self.xs,):
            if lines[0] != 0.0 or lines[-1] != 1.0 or np.any(np.diff(lines) <= 0):
                raise ConfigurationError("partition breaks must increase strictly from 0 to 1")

    @property
    def shape(self) -> tuple[int, ...]:
        if self.dim == 1:
            return (len(self.xs) - 1,)
        return (len(self.xs) - 1, len(self.ys) - 1)

    @property
    def tau(self) -> int:
        return int(np.prod(self.shape))

    @property
    def elements(self) -> list[tuple]:
        if self.dim == 1:
            return [(self.xs[i], self.xs[i + 1]) for i in range(self.tau)]
        nx, ny = self.shape
        return [
            ((self.xs[ix], self.ys[iy]), (self.xs[ix + 1], self.ys[iy + 1]))
            for iy in range(ny)
            for ix in range(nx)
        ]

    @property
    def interfaces(self) -> list:
        """Interior jump points (1D) or full-length interface segments (2D)."""
        if self.dim == 1:
            return list(self.xs[1:-1])
        segs = [((x, 0.0), (x, 1.0)) for x in self.xs[1:-1]]
        segs += [((0.0, y), (1.0, y)) for y in self.ys[1:-1]]
        return segs

    def measures(self) -> np.ndarray:
        if self.dim == 1:
            return np.diff(self.xs)
        return np.outer(np.diff(self.ys), np.diff(self.xs)).ravel()

    def locate(self, points, strict: bool = True) -> np.ndarray:
        """Cell id of each point; interface points raise unless ``strict`` is off."""
        pts = np.asarray(points, dtype=float)
        if self.dim == 1:
            return self._axis_index(self.xs, pts.reshape(-1), strict)
        pts = pts.reshape(-1, 2)
        ix = self._axis_index(self.xs, pts[:, 0], strict)
        iy = self._axis_index(self.ys, pts[:, 1], strict)
        return iy * (len(self.xs) - 1) + ix

    @staticmethod
    def _axis_index(lines, coord, strict):
        idx = np.clip(np.searchsorted(lines, coord, side="right") - 1, 0, len(lines) - 2)
        if strict and np.any(np.isin(coord, lines[1:-1])):
            raise AmbiguityError("point lies on an interface; pass the cell id explicitly")
        return idx

    def to_dict(self) -> dict:
        out = {"dim": self.dim, "kind": self.kind, "xs": self.xs.tolist()}
        if self.dim == 2:
            out["ys"] = self.ys.tolist()
        return out


def sample_partition_1d(intensity: float, rng: np.random.Generator) -> Partition:
    """``tau = Poisson(intensity) + 2`` cells with i.i.d. uniform break points."""
    if not intensity > 0:
        raise ConfigurationError("Poisson intensity must be positive")
    tau = int(rng.poisson(intensity)) + 2
    points = np.sort(rng.uniform(0.0, 1.0, size=tau - 1))
    return partition_from_points(points)


def partition_from_points(points) -> Partition:
    return Partition(1, np.concatenate([[0.0], np.asarray(points, dtype=float), [1.0]]), kind="1d")


def sample_partition_2d(kind: str, rng: np.random.Generator) -> Partition:
    if kind == "heterogeneous":
        # two vertical and two horizontal lines, all uniform on (0.2, 0.8)
        xs = np.sort(rng.uniform(0.2, 0.8, size=2))
        ys = np.sort(rng.uniform(0.2, 0.8, size=2))
        return rectilinear_partition(xs, ys, kind)
    if kind == "checkerboard":
        xc = rng.uniform(0.4, 0.6, size=2)
        return rectilinear_partition([xc[0]], [xc[1]], kind)
    raise ConfigurationError(f"unknown 2D partition kind {kind!r}")


def rectilinear_partition(x_lines, y_lines, kind: str = "rectilinear") -> Partition:
    xs = np.concatenate([[0.0], np.sort(np.asarray(x_lines, dtype=float)), [1.0]])
    ys = np.concatenate([[0.0], np.sort(np.asarray(y_lines, dtype=float)), [1.0]])
    return Partition(2, xs, ys, kind)


# ---------------------------------------------------------------------------
# GIG jump heights


@dataclass(frozen=True)
class GIGParams:
    psi: float
    chi: float
    lam: float

    def __post_init__(self):
        if not (self.psi > 0 and self.chi > 0):
            raise ConfigurationError("GIG requires psi > 0 and chi > 0")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        omega = math.sqrt(self.psi * self.chi)
        log_norm = 0.5 * self.lam * math.log(self.psi / self.chi) - math.log(
            2.0 * special.kve(self.lam, omega)
        ) + omega
        return log_norm + (self.lam - 1.0) * np.log(x) - 0.5 * (self.psi * x + self.chi / x)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def mean(self) -> float:
        omega = math.sqrt(self.psi * self.chi)
        return math.sqrt(self.chi / self.psi) * special.kv(self.lam + 1, omega) / special.kv(self.lam, omega)

    def mode(self) -> float:
        lm = self.lam - 1.0
        return (lm + math.sqrt(lm * lm + self.psi * self.chi)) / self.psi


_Q_LO = 1e-8
_Q_HI = 1.0 - 1e-8
_KNOT_CONSTANT = 16.0
_MIN_KNOTS = 256


def gig_knot_count(eps: float) -> int:
    return max(_MIN_KNOTS, math.ceil(_KNOT_CONSTANT / math.sqrt(eps)))


@dataclass(frozen=True, eq=False)
class GIGTable:
    """Tabulated inverse CDF on geometric knots between two extreme quantiles.

    The quantile range starts at ``[1e-8, 1 - 1e-8]`` and is widened until the
    mass clipped off the ends costs at most ``eps / 4`` in squared-L2 bias.
    """

    params: GIGParams
    eps: float
    knots: np.ndarray
    cdf: np.ndarray
    q_lo: float = _Q_LO
    q_hi: float = _Q_HI

    def sample(self, rng: np.random.Generator, size=None):
        u = np.clip(rng.uniform(size=size), self.q_lo, self.q_hi)
        return self.ppf(u)

    def ppf(self, u):
        return np.interp(u, self.cdf, self.knots)

    def cdf_at(self, x):
        return np.interp(x, self.knots, self.cdf, left=0.0, right=1.0)


def _log_trapezoid_cdf(params: GIGParams, logx: np.ndarray) -> np.ndarray:
    # integrate f(x) dx = f(e^s) e^s ds on the log grid
    g = np.exp(params.logpdf(np.exp(logx)) + logx)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * np.diff(logx))])
    return cum


def _clipped_bias(x, g, logx, lo, hi):
    """Squared-L2 cost of replacing draws outside ``[e^lo, e^hi]`` by the end knots."""
    dev = np.where(logx > hi, x - math.exp(hi), 0.0) + np.where(logx < lo, math.exp(lo) - x, 0.0)
    return float(integrate.trapezoid(dev**2 * g, logx))


@functools.lru_cache(maxsize=32)
def gig_table(params: GIGParams, eps: float) -> GIGTable:
    if not eps > 0:
        raise ConfigurationError("GIG sampling bias budget must be positive")
    # bracket the quantile range on a wide log grid around the mode
    centre = math.log(params.mode())
    wide = np.linspace(centre - 30.0, centre + 30.0, 60001)
    cum = _log_trapezoid_cdf(params, wide)
    total = cum[-1]
    cum /= total
    x = np.exp(wide)
    g = np.exp(params.logpdf(x) + wide) / total
    q_lo, q_hi = _Q_LO, _Q_HI
    while True:
        lo = float(np.interp(q_lo, cum, wide))
        hi = float(np.interp(q_hi, cum, wide))
        if _clipped_bias(x, g, wide, lo, hi) <= 0.25 * eps or q_lo < 1e-15:
            break
        q_lo, q_hi = q_lo / 10.0, 1.0 - (1.0 - q_hi) / 10.0
    logx = np.linspace(lo, hi, gig_knot_count(eps))
    cum = _log_trapezoid_cdf(params, logx)
    cdf = q_lo + (q_hi - q_lo) * cum / cum[-1]
    return GIGTable(params, eps, np.exp(logx), cdf, q_lo, q_hi)


def gig_sample(params: GIGParams, eps: float, rng: np.random.Generator, size=None):
    return gig_table(params, eps).sample(rng, size)


# ---------------------------------------------------------------------------
# Jump heights


@dataclass(frozen=True)
class JumpLaw:
    kind: str  # uniform | gig | checkerboard_reciprocal
    lo: float = 0.0
    hi: float = 10.0
    gig: GIGParams | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "gig", "checkerboard_reciprocal"):
            raise ConfigurationError(f"unknown jump law {self.kind!r}")
        if self.kind == "gig" and self.gig is None:
            raise ConfigurationError("gig jump law needs GIG parameters")
        if self.kind != "gig" and not (0 <= self.lo < self.hi):
            raise ConfigurationError("jump bounds need 0 <= lo < hi")
        if self.kind == "checkerboard_reciprocal" and self.lo <= 0:
            raise ConfigurationError("reciprocal jumps need lo > 0")


@dataclass(frozen=True, eq=False)
class JumpHeights:
    values: np.ndarray
    bias_budget: float = 0.0
    cap: float = math.inf

    def __post_init__(self):
        if np.any(self.values < 0) or np.any(self.values > self.cap):
            raise ConfigurationError("jump heights must lie in [0, cap]")


def sample_jump_heights(law: JumpLaw, partition: Partition, rng: np.random.Generator,
                        eps: float = 0.0) -> JumpHeights:
    tau = partition.tau
    if law.kind == "uniform":
        return JumpHeights(rng.uniform(law.lo, law.hi, size=tau), 0.0, law.hi)
    if law.kind == "gig":
        return JumpHeights(np.asarray(gig_sample(law.gig, eps, rng, size=tau)), eps, math.inf)
    if partition.kind != "checkerboard" or partition.shape != (2, 2):
        raise ConfigurationError("reciprocal jumps need a 2x2 checkerboard partition")
    p1 = rng.uniform(law.lo, law.hi)
    return checkerboard_heights(p1)


def checkerboard_heights(p1: float) -> JumpHeights:
    # row-major ids: 0 lower-left, 1 lower-right, 2 upper-left, 3 upper-right
    p2 = 1.0 / p1
    return JumpHeights(np.array([p1, p2, p2, p1]), 0.0, math.inf)


# ---------------------------------------------------------------------------
# Coefficients


PHI_MAPS: dict[str, Callable] = {
    "exp": np.exp,
    "zero": np.zeros_like,
}


@dataclass(frozen=True, eq=False)
class CoefficientPair:
    """Pathwise diffusion ``a`` and advection ``b``.

    Both evaluators take ``(points, cell_ids)``; ``cell_ids`` come from the
    mesh so that interface points never need geometric resolution.
    """

    dim: int
    diffusion: Callable
    advection: Callable | None = None
    partition: Partition | None = None
    joint: Callable | None = None

    def _ids(self, points, cell_ids):
        if cell_ids is not None:
            return np.asarray(cell_ids)
        if self.partition is None:
            return None
        return self.partition.locate(points, strict=True)

    def a(self, points, cell_ids=None) -> np.ndarray:
        return self.diffusion(np.asarray(points, dtype=float), self._ids(points, cell_ids))

    def b(self, points, cell_ids=None) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        n = len(pts)
        if self.advection is None:
            return np.zeros((n, self.dim))
        return self.advection(pts, self._ids(points, cell_ids)).reshape(n, self.dim)

    def evaluate(self, points, cell_ids=None):
        """``(a, b)`` together; shares one field evaluation when possible."""
        if self.joint is None:
            return self.a(points, cell_ids), self.b(points, cell_ids)
        pts = np.asarray(points, dtype=float)
        return self.joint(pts, self._ids(points, cell_ids))

    def piece(self, cell_id: int):
        """Smooth extension of ``a`` from one partition cell."""
        return lambda points: self.a(points, np.full(len(np.asarray(points)), cell_id))


def compose_coefficients(field: FieldRealization | None, partition: Partition,
                         heights: JumpHeights, abar=0.0, phi="exp",
                         b1: Callable | None = None, b2: Callable | None = None) -> CoefficientPair:
    """Build ``a = abar + phi(W) + P`` and ``b = min(a * b1, b2)``.

    ``abar`` may be a constant or a point evaluator; ``phi`` a name from
    :data:`PHI_MAPS` or a callable; ``b2=None`` means no upper bound.
    """
    phi_fn = PHI_MAPS[phi] if isinstance(phi, str) else phi
    jumps = np.asarray(heights.values, dtype=float)
    if len(jumps) != partition.tau:
        raise ConfigurationError("need one jump height per partition cell")

    def diffusion(points, ids):
        base = abar(points) if callable(abar) else np.full(len(points), float(abar))
        w = eval_field(field, points) if field is not None else np.zeros(len(points))
        return base + phi_fn(w) + jumps[ids]

    def from_diffusion(points, a):
        b = a[:, None] * np.asarray(b1(points), dtype=float).reshape(len(points), -1)
        if b2 is not None:
            b = np.minimum(b, np.asarray(b2(points), dtype=float).reshape(b.shape))
        return b

    if b1 is None:
        return CoefficientPair(partition.dim, diffusion, None, partition)

    def advection(points, ids):
        return from_diffusion(points, diffusion(points, ids))

    def joint(points, ids):
        a = diffusion(points, ids)
        return a, from_diffusion(points, a)

    return CoefficientPair(partition.dim, diffusion, advection, partition, joint)
