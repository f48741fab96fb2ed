"""Gaussian random fields from truncated Karhunen-Loeve expansions.

Three covariance families are supported on the unit interval / unit square:

* ``brownian``: min(x, y) on (0, 1), closed-form eigenpairs
  ``eta_k = 8 / ((2k - 1)^2 pi^2)``, ``e_k(x) = sin((2k - 1) pi x / 2)``.
* ``sine2d``: closed-form eigenpairs ``eta_k = s2 exp(-pi^2 k^2 delta^2)``,
  ``e_k(x, y) = sin(pi k x) sin(pi k y)`` on (0, 1)^2.
* ``matern``: stationary Matern kernel on (0, 1); eigenpairs from a Nystrom
  discretization with composite midpoint quadrature.

Modes are indexed from 1 throughout. The closed-form eigenfunctions are used
verbatim (they are not rescaled to unit L2 norm).
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

_DOMAIN_TOL = 1e-12
_MODE_CAP = 10**6


class SpectrumUnavailableError(ValueError):
    pass


class InsufficientResolutionError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class CovarianceSpec:
    kind: str
    nu: float = 1.5
    variance: float = 1.0
    corr_length: float = 0.05

    def __post_init__(self):
        if self.kind not in ("matern", "brownian", "sine2d"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        for name in ("nu", "variance", "corr_length"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive, got {value!r}")

    @classmethod
    def matern(cls, nu=1.5, variance=1.0, corr_length=0.05):
        return cls("matern", nu=nu, variance=variance, corr_length=corr_length)

    @classmethod
    def brownian(cls):
        return cls("brownian")

    @classmethod
    def sine2d(cls, variance=0.25, corr_length=0.02):
        return cls("sine2d", variance=variance, corr_length=corr_length)

    @property
    def dim(self) -> int:
        return 2 if self.kind == "sine2d" else 1

    @property
    def closed_form(self) -> bool:
        return self.kind in ("brownian", "sine2d")


# ---------------------------------------------------------------------------
# Matern kernel with half-integer smoothness


def _half_integer_order(nu: float) -> int:
    n = nu - 0.5
    if n < 0 or abs(n - round(n)) > 1e-12:
        raise SpectrumUnavailableError(
            f"Matern smoothness must be a half-integer (1/2, 3/2, ...), got {nu}"
        )
    return int(round(n))


def _scaled_k(m: int, z):
    """``z^(m+1/2) K_(m+1/2)(z)``, finite at z = 0."""
    z = np.asarray(z, dtype=float)
    poly = np.zeros_like(z)
    for k in range(m + 1):
        coef = math.factorial(m + k) / (math.factorial(k) * math.factorial(m - k)) / 2.0**k
        poly = poly + coef * z ** (m - k)
    return math.sqrt(math.pi / 2.0) * np.exp(-z) * poly


def bessel_k_half(nu: float, z):
    """Modified Bessel function of the second kind ``K_nu`` for half-integer nu."""
    m = _half_integer_order(abs(nu))
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise DomainError("K_nu requires z > 0")
    return _scaled_k(m, z) / z ** (m + 0.5)


def matern_correlation(r, nu: float, corr_length: float):
    """Matern correlation ``2^(1-nu)/Gamma(nu) z^nu K_nu(z)``, ``z = sqrt(2 nu) |r| / delta``."""
    m = _half_integer_order(nu)
    z = math.sqrt(2.0 * nu) * np.abs(np.asarray(r, dtype=float)) / corr_length
    return 2.0 ** (1.0 - nu) / math.gamma(nu) * _scaled_k(m, z)


def matern_correlation_derivative(r, nu: float, corr_length: float):
    """Derivative of :func:`matern_correlation` with respect to the signed lag ``r``."""
    m = _half_integer_order(nu)
    r = np.asarray(r, dtype=float)
    scale = math.sqrt(2.0 * nu) / corr_length
    z = scale * np.abs(r)
    # d/dz [z^nu K_nu(z)] = -z^nu K_(nu-1)(z), and K_(-1/2) = K_(1/2)
    if m == 0:
        dz = -_scaled_k(0, z)
    else:
        dz = -z * _scaled_k(m - 1, z)
    return 2.0 ** (1.0 - nu) / math.gamma(nu) * dz * scale * np.sign(r)


# ---------------------------------------------------------------------------
# Closed-form spectra


def _closed_eigenvalues(spec: CovarianceSpec, k: np.ndarray) -> np.ndarray:
    if spec.kind == "brownian":
        return 8.0 / ((2.0 * k - 1.0) ** 2 * math.pi**2)
    if spec.kind == "sine2d":
        return spec.variance * np.exp(-(math.pi**2) * k**2 * spec.corr_length**2)
    raise SpectrumUnavailableError(f"no closed-form spectrum for {spec.kind!r}")


def _closed_tail(spec: CovarianceSpec, n: int) -> float:
    if spec.kind == "brownian":
        # sum_{k>n} 8/((2k-1)^2 pi^2) = 2 psi_1(n + 1/2) / pi^2
        return float(2.0 * special.polygamma(1, n + 0.5) / math.pi**2)
    if spec.kind == "sine2d":
        total = 0.0
        k = n + 1
        while True:
            term = float(_closed_eigenvalues(spec, np.array([k]))[0])
            total += term
            if term <= 1e-18 * max(total, 1e-300) or term == 0.0:
                return total
            k += 1
    raise SpectrumUnavailableError(f"no closed-form spectrum for {spec.kind!r}")


# ---------------------------------------------------------------------------
# Basis


@dataclass(frozen=True, eq=False)
class KLBasis:
    """First ``N`` eigenpairs of a covariance operator plus the tail mass.

    For Nystrom bases ``nodes``, ``weights`` and ``node_values`` (M x N
    eigenvectors at the quadrature nodes, L2-normalized) carry what the
    interpolation formula needs.
    """

    spec: CovarianceSpec
    eigenvalues: np.ndarray
    tail: float
    nodes: np.ndarray | None = None
    weights: np.ndarray | None = None
    node_values: np.ndarray | None = None

    @property
    def N(self) -> int:
        return len(self.eigenvalues)

    @property
    def dim(self) -> int:
        return self.spec.dim

    def truncate(self, n: int) -> "KLBasis":
        if not 1 <= n <= self.N:
            raise ValueError(f"cannot truncate a {self.N}-mode basis to {n} modes")
        if n == self.N:
            return self
        tail = self.tail + float(np.sum(self.eigenvalues[n:]))
        if self.spec.closed_form:
            tail = _closed_tail(self.spec, n)
        return KLBasis(
            self.spec,
            self.eigenvalues[:n],
            tail,
            self.nodes,
            self.weights,
            None if self.node_values is None else self.node_values[:, :n],
        )

    # -- point evaluation ---------------------------------------------------

    def _check_points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            x = x.reshape(-1)
        else:
            x = x.reshape(-1, 2)
        if np.any(x < -_DOMAIN_TOL) or np.any(x > 1.0 + _DOMAIN_TOL):
            raise DomainError("evaluation point outside the closed domain")
        return x

    def modes(self, x) -> np.ndarray:
        """Eigenfunction values, shape (P, N)."""
        eye = np.eye(self.N)
        return np.stack([self.combine(x, eye[i]) for i in range(self.N)], axis=1)

    def mode(self, i: int):
        """``(eta_i, e_i, grad e_i)`` for the 1-based mode index ``i``."""
        coeff = np.zeros(self.N)
        coeff[i - 1] = 1.0
        return (
            float(self.eigenvalues[i - 1]),
            lambda x: self.combine(x, coeff),
            lambda x: self.combine_grad(x, coeff),
        )

    def combine(self, x, coeff) -> np.ndarray:
        """``sum_i coeff_i e_i(x)`` at each point."""
        x = self._check_points(x)
        coeff = np.asarray(coeff, dtype=float)
        kind = self.spec.kind
        if kind == "brownian":
            return _odd_sine_series(x, coeff)
        if kind == "sine2d":
            k = np.arange(1, self.N + 1) * math.pi
            return (np.sin(np.outer(x[:, 0], k)) * np.sin(np.outer(x[:, 1], k))) @ coeff
        return self._nystrom_kernel(x, derivative=False) @ self._nystrom_weights(coeff)

    def combine_grad(self, x, coeff) -> np.ndarray:
        """``sum_i coeff_i grad e_i(x)``, shape (P,) in 1D and (P, 2) in 2D."""
        x = self._check_points(x)
        coeff = np.asarray(coeff, dtype=float)
        kind = self.spec.kind
        if kind == "brownian":
            k = (2.0 * np.arange(1, self.N + 1) - 1.0) * math.pi / 2.0
            return _chunked(lambda sl: np.cos(np.outer(x, k[sl])) @ (k[sl] * coeff[sl]), self.N)
        if kind == "sine2d":
            k = np.arange(1, self.N + 1) * math.pi
            sx, sy = np.sin(np.outer(x[:, 0], k)), np.sin(np.outer(x[:, 1], k))
            cx, cy = np.cos(np.outer(x[:, 0], k)) * k, np.cos(np.outer(x[:, 1], k)) * k
            return np.stack([(cx * sy) @ coeff, (sx * cy) @ coeff], axis=1)
        return self._nystrom_kernel(x, derivative=True) @ self._nystrom_weights(coeff)

    def _nystrom_weights(self, coeff):
        eta = self.eigenvalues
        scaled = np.divide(coeff, eta, out=np.zeros_like(coeff), where=eta > 0)
        return self.weights * (self.node_values @ scaled)

    def _nystrom_kernel(self, x, derivative: bool):
        lag = x[:, None] - self.nodes[None, :]
        s = self.spec
        if derivative:
            return s.variance * matern_correlation_derivative(lag, s.nu, s.corr_length)
        return s.variance * matern_correlation(lag, s.nu, s.corr_length)


def _chunked(fn, n, size=8192):
    out = 0.0
    for start in range(0, n, size):
        out = out + fn(slice(start, start + size))
    return out


def _odd_sine_series(x, coeff):
    """``sum_k c_k sin((2k-1) pi x / 2)`` by complex Horner evaluation."""
    theta = x * (math.pi / 2.0)
    if len(coeff) <= 64:
        k = 2.0 * np.arange(1, len(coeff) + 1) - 1.0
        return np.sin(np.outer(theta, k)) @ coeff
    w = np.exp(2j * theta)
    acc = np.zeros(len(x), dtype=complex)
    for c in coeff[::-1]:
        acc *= w
        acc += c
    return (np.exp(1j * theta) * acc).imag


def closed_form_spectrum(spec: CovarianceSpec, N: int) -> KLBasis:
    if not spec.closed_form:
        raise SpectrumUnavailableError(f"no closed-form spectrum for {spec.kind!r}")
    if N < 1:
        raise ValueError("N must be >= 1")
    k = np.arange(1, N + 1, dtype=float)
    return KLBasis(spec, _closed_eigenvalues(spec, k), _closed_tail(spec, N))


@functools.lru_cache(maxsize=8)
def _nystrom_decomposition(spec: CovarianceSpec, M: int):
    nodes = (np.arange(M) + 0.5) / M
    weights = np.full(M, 1.0 / M)
    lag = nodes[:, None] - nodes[None, :]
    kernel = spec.variance * matern_correlation(lag, spec.nu, spec.corr_length)
    sw = np.sqrt(weights)
    sym = sw[:, None] * kernel * sw[None, :]
    try:
        vals, vecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Nystrom eigensolve failed: {exc}") from exc
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    if np.any(vals < -1e-10):
        raise NumericalError(f"negative Nystrom eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    node_values = vecs / sw[:, None]
    # fix the eigenvector sign: largest-magnitude node value positive
    pivot = np.argmax(np.abs(node_values), axis=0)
    node_values *= np.sign(node_values[pivot, np.arange(M)])
    node_values.setflags(write=False)
    vals.setflags(write=False)
    return nodes, weights, vals, node_values


def nystrom_spectrum(spec: CovarianceSpec, M: int, N: int) -> KLBasis:
    if spec.kind != "matern":
        raise SpectrumUnavailableError("Nystrom spectra are only built for Matern kernels")
    if N < 1:
        raise ValueError("N must be >= 1")
    if M < N:
        raise InsufficientResolutionError(f"need M >= N, got M={M}, N={N}")
    nodes, weights, vals, node_values = _nystrom_decomposition(spec, M)
    tail = max(0.0, spec.variance * 1.0 - float(np.sum(vals[:N])))
    return KLBasis(spec, vals[:N].copy(), tail, nodes, weights, node_values[:, :N])


def kl_spectrum(spec: CovarianceSpec, N: int, nystrom_nodes: int = 2048) -> KLBasis:
    if spec.closed_form:
        return closed_form_spectrum(spec, N)
    return nystrom_spectrum(spec, nystrom_nodes, N)


def tail_mass(spec: CovarianceSpec, N: int, nystrom_nodes: int = 2048) -> float:
    if spec.closed_form:
        return _closed_tail(spec, N)
    vals = _nystrom_decomposition(spec, nystrom_nodes)[2]
    return max(0.0, spec.variance - float(np.sum(vals[:N])))


def cutoff_for_tail(spec: CovarianceSpec, target: float, nystrom_nodes: int = 2048,
                    cap: int = _MODE_CAP) -> int:
    """Smallest ``N`` with tail mass at most ``target``."""
    if target <= 0:
        raise ValueError("tail target must be positive")
    if spec.closed_form:
        if _closed_tail(spec, cap) > target:
            raise InsufficientResolutionError(
                f"tail {target:.3e} not reachable within {cap} modes"
            )
        lo, hi = 1, cap
        while lo < hi:
            mid = (lo + hi) // 2
            if _closed_tail(spec, mid) <= target:
                hi = mid
            else:
                lo = mid + 1
        return lo
    vals = _nystrom_decomposition(spec, nystrom_nodes)[2]
    tails = spec.variance - np.cumsum(vals)
    hits = np.nonzero(tails <= target)[0]
    # the full discrete spectrum exhausts the trace; needing all M modes means unresolved
    if len(hits) == 0 or hits[0] + 1 >= min(nystrom_nodes, cap):
        raise InsufficientResolutionError(
            f"tail {target:.3e} not reachable with {nystrom_nodes} Nystrom nodes"
        )
    return int(hits[0]) + 1


# ---------------------------------------------------------------------------
# Realizations


@dataclass(frozen=True, eq=False)
class FieldRealization:
    basis: KLBasis
    z: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.z) != self.basis.N:
            raise ValueError("need one normal draw per retained mode")

    @property
    def coefficients(self) -> np.ndarray:
        return np.sqrt(self.basis.eigenvalues) * self.z

    def prefix(self, n: int) -> "FieldRealization":
        """Realization of the first ``n`` modes sharing the same draws."""
        return FieldRealization(self.basis.truncate(n), self.z[:n])

    def __call__(self, x) -> np.ndarray:
        return eval_field(self, x)


def sample_field(basis: KLBasis, rng: np.random.Generator) -> FieldRealization:
    return FieldRealization(basis, rng.standard_normal(basis.N))


def eval_field(r: FieldRealization, x) -> np.ndarray:
    return r.basis.combine(x, r.coefficients)


def eval_field_grad(r: FieldRealization, x) -> np.ndarray:
    return r.basis.combine_grad(x, r.coefficients)
