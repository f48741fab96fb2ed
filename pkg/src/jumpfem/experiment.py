"""Coupled Monte Carlo convergence studies for adapted vs uniform meshes."""
from __future__ import annotations

import dataclasses
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .jump_model import (
    ConfigurationError,
    GIGParams,
    JumpLaw,
    compose_coefficients,
    sample_jump_heights,
    sample_partition_1d,
    sample_partition_2d,
)
from .mesh import adapted_mesh, uniform_mesh
from .random_field import (
    CovarianceSpec,
    FieldRealization,
    InsufficientResolutionError,
    cutoff_for_tail,
    kl_spectrum,
)


class SampleError(RuntimeError):
    """A solver or mesh failure tagged with its (seed, level)."""


# ---------------------------------------------------------------------------
# Problem configuration


@dataclass(frozen=True)
class ProblemConfig:
    name: str
    dim: int
    covariance: CovarianceSpec
    partition: str  # poisson | heterogeneous | checkerboard
    jumps: JumpLaw
    poisson_intensity: float = 5.0
    abar: float = 0.0
    phi: str = "exp"
    advection_scale: float = 2.0
    u0_scale: float = 0.1
    source: float = 1.0
    T: float = 1.0
    h0: float = 0.25  # h_bar_l = h0 * 2^-l
    levels: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    ref_level: int = 8
    lattice_points: int = 2**10 + 1
    nystrom_nodes: int = 2048
    s: float = 2.0
    solver: str = "direct"

    def h_bar(self, level: int) -> float:
        return self.h0 * 2.0 ** (-level)

    def validate(self) -> None:
        """Raise ``ConfigurationError('field: reason')`` on the first bad field."""
        checks = [
            ("dim", self.dim in (1, 2), "must be 1 or 2"),
            ("covariance.kind", self.covariance.dim == self.dim, "dimension mismatch"),
            ("partition", self.partition in (("poisson",) if self.dim == 1 else ("heterogeneous", "checkerboard")),
             "unknown partition law for this dimension"),
            ("poisson_intensity", self.poisson_intensity > 0, "must be positive"),
            ("abar", self.abar >= 0, "must be nonnegative"),
            ("phi", self.phi in ("exp", "zero"), "must be exp or zero"),
            ("T", self.T > 0, "must be positive"),
            ("h0", self.h0 > 0, "must be positive"),
            ("levels", len(self.levels) >= 3, "need at least 3 levels for a rate fit"),
            ("ref_level", all(self.ref_level > l for l in self.levels), "must exceed every level"),
            ("lattice_points", self.lattice_points >= 3, "must be >= 3"),
            ("nystrom_nodes", self.nystrom_nodes >= 1, "must be positive"),
            ("s", self.s >= 1, "must be >= 1"),
            ("solver", self.solver in ("direct", "bicgstab"), "must be direct or bicgstab"),
            ("jumps.kind", self.jumps.kind != "checkerboard_reciprocal" or self.partition == "checkerboard",
             "reciprocal jumps need the checkerboard partition"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigurationError(f"{name}: {msg}")
        if self.phi == "zero" and self.jumps.kind == "uniform" and self.jumps.lo <= 0 and self.abar <= 0:
            raise ConfigurationError("jumps.lo: pure jump coefficient needs strictly positive jumps")

    def with_levels(self, levels, ref_level=None) -> "ProblemConfig":
        return dataclasses.replace(
            self, levels=tuple(levels), ref_level=self.ref_level if ref_level is None else ref_level
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- deterministic data ------------------------------------------------

    def u0(self, x):
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            return self.u0_scale * np.sin(np.pi * x)
        return self.u0_scale * np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])

    def advection_shape(self, x):
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            return self.advection_scale * np.sin(2.0 * np.pi * x)
        s = self.advection_scale * np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
        return np.stack([s, s], axis=1)


def experiment_presets() -> dict[str, ProblemConfig]:
    gig = JumpLaw("gig", gig=GIGParams(psi=0.25, chi=9.0, lam=-1.0))
    one_d = dict(dim=1, partition="poisson", poisson_intensity=5.0, advection_scale=2.0,
                 u0_scale=0.1, h0=0.25, levels=(1, 2, 3, 4, 5, 6), ref_level=8,
                 lattice_points=2**10 + 1)
    two_d = dict(dim=2, covariance=CovarianceSpec.sine2d(variance=0.25, corr_length=0.02),
                 advection_scale=5.0, u0_scale=0.01, h0=0.4, levels=(1, 2, 3, 4, 5),
                 ref_level=7, lattice_points=2**8 + 1)
    return {
        "1d_matern_gig": ProblemConfig(
            name="1d_matern_gig",
            covariance=CovarianceSpec.matern(nu=1.5, variance=1.0, corr_length=0.05),
            jumps=gig,
            **one_d,
        ),
        "1d_brownian_uniform": ProblemConfig(
            name="1d_brownian_uniform",
            covariance=CovarianceSpec.brownian(),
            jumps=JumpLaw("uniform", lo=0.0, hi=10.0),
            **one_d,
        ),
        "2d_heterogeneous": ProblemConfig(
            name="2d_heterogeneous",
            partition="heterogeneous",
            jumps=JumpLaw("uniform", lo=0.0, hi=10.0),
            **two_d,
        ),
        "2d_checkerboard": ProblemConfig(
            name="2d_checkerboard",
            partition="checkerboard",
            jumps=JumpLaw("checkerboard_reciprocal", lo=1e-4, hi=1e-2),
            phi="zero",
            **two_d,
        ),
    }


# ---------------------------------------------------------------------------
# Level plans


@dataclass(frozen=True)
class LevelParams:
    level: int
    h_bar: float
    N: int
    eps: float
    dt: float


@dataclass(frozen=True)
class LevelPlan:
    levels: tuple[LevelParams, ...]
    reference: LevelParams
    s: float = 2.0

    def check(self) -> None:
        for lp in self.levels + (self.reference,):
            if lp.eps ** (1.0 / self.s) > lp.h_bar * (1 + 1e-12) or lp.dt > lp.h_bar * (1 + 1e-12):
                raise ConfigurationError(f"level {lp.level}: parameters not aligned with h_bar")
        if any(lp.h_bar <= self.reference.h_bar for lp in self.levels):
            raise ConfigurationError("ref_level: reference must be finer than every level")


def align_parameters(h_bar: float, cov: CovarianceSpec, s: float = 2.0, T: float = 1.0,
                     nystrom_nodes: int = 2048) -> tuple[int, float, float]:
    """``N`` with tail <= h_bar^2, ``eps = h_bar^s`` and ``dt = T / ceil(T / h_bar)``."""
    if not h_bar > 0:
        raise ConfigurationError("h_bar: must be positive")
    try:
        N = cutoff_for_tail(cov, h_bar**2, nystrom_nodes=nystrom_nodes)
    except InsufficientResolutionError as exc:
        raise ConfigurationError(f"covariance: {exc}") from exc
    eps = h_bar**s
    dt = T / math.ceil(T / h_bar - 1e-9)
    return N, eps, dt


def build_plan(config: ProblemConfig) -> LevelPlan:
    config.validate()

    def params(level):
        h = config.h_bar(level)
        N, eps, dt = align_parameters(h, config.covariance, config.s, config.T, config.nystrom_nodes)
        return LevelParams(level, h, N, eps, dt)

    plan = LevelPlan(tuple(params(l) for l in config.levels), params(config.ref_level), config.s)
    plan.check()
    return plan


# ---------------------------------------------------------------------------
# One coupled sample


def sample_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    """Counter-based per-sample seed: ``SeedSequence(base_seed, spawn_key=(index,))``."""
    return np.random.SeedSequence(base_seed, spawn_key=(index,))


@dataclass
class SampleResult:
    index: int
    errors_adapted: np.ndarray  # squared V-norm errors per level
    errors_uniform: np.ndarray
    seconds: np.ndarray  # wall-clock per level
    fields: dict | None = None
    diagnostics: dict | None = None


@dataclass
class _SampleDraws:
    partition: object
    heights: object
    z: np.ndarray


def draw_sample(config: ProblemConfig, plan: LevelPlan, seed: np.random.SeedSequence) -> _SampleDraws:
    """One partition, one set of jump heights at the reference bias, one normal vector."""
    part_ss, jump_ss, field_ss = seed.spawn(3)
    part_rng = np.random.default_rng(part_ss)
    if config.dim == 1:
        partition = sample_partition_1d(config.poisson_intensity, part_rng)
    else:
        partition = sample_partition_2d(config.partition, part_rng)
    heights = sample_jump_heights(config.jumps, partition, np.random.default_rng(jump_ss),
                                  eps=plan.reference.eps)
    z = np.random.default_rng(field_ss).standard_normal(plan.reference.N)
    return _SampleDraws(partition, heights, z)


def solve_level(config: ProblemConfig, params: LevelParams, draws: _SampleDraws,
                basis, adapted: bool, lattice: fem.Lattice, keep: str = "last"):
    """Final-time lattice field (and trajectory) for one level and mesh family."""
    field_r = None
    if config.phi != "zero":
        field_r = FieldRealization(basis.truncate(params.N), draws.z[: params.N])
    coeff = compose_coefficients(field_r, draws.partition, draws.heights, abar=config.abar,
                                 phi=config.phi, b1=config.advection_shape)
    if adapted:
        mesh = adapted_mesh(draws.partition, params.h_bar, strict=False)
    else:
        mesh = uniform_mesh(config.dim, params.h_bar, draws.partition)
    system = fem.assemble(mesh, coeff)
    load = fem.assemble_load(mesh, lambda x, t: np.full(len(x), config.source))
    c0 = fem.nodal_interpolate(mesh, config.u0)
    traj = fem.backward_euler(system, load, c0, params.dt, config.T, keep=keep, solver=config.solver)
    return fem.evaluate_on_grid(traj, config.T, lattice), traj


def run_coupled_sample(config: ProblemConfig, plan: LevelPlan, seed: np.random.SeedSequence,
                       basis=None, index: int = 0, return_fields: bool = False,
                       keep: str = "last") -> SampleResult:
    """Errors of every level (adapted and uniform) against the adapted reference."""
    if basis is None:
        basis = reference_basis(config, plan)
    lattice = fem.Lattice(config.dim, config.lattice_points)
    draws = draw_sample(config, plan, seed)
    err_a, err_u, secs = [], [], []
    fields = {} if return_fields else None
    trajectories = {}

    def tagged(level, adapted, params):
        try:
            return solve_level(config, params, draws, basis, adapted, lattice, keep)
        except Exception as exc:
            raise SampleError(f"sample {index} (seed entropy {seed.entropy}, spawn_key {seed.spawn_key}), "
                              f"level {level}, {'adapted' if adapted else 'uniform'}: {exc}") from exc

    ref, ref_traj = tagged(plan.reference.level, True, plan.reference)
    trajectories["reference"] = ref_traj
    if return_fields:
        fields["reference"] = ref
    for lp in plan.levels:
        t0 = time.perf_counter()
        ua, ta = tagged(lp.level, True, lp)
        uu, tu = tagged(lp.level, False, lp)
        secs.append(time.perf_counter() - t0)
        err_a.append(fem.grid_norm(ref - ua, lattice, "H1") ** 2)
        err_u.append(fem.grid_norm(ref - uu, lattice, "H1") ** 2)
        trajectories[("adapted", lp.level)] = ta
        trajectories[("uniform", lp.level)] = tu
        if return_fields:
            fields[("adapted", lp.level)] = ua
            fields[("uniform", lp.level)] = uu
    diagnostics = None
    if return_fields:
        diagnostics = {
            "partition": draws.partition.to_dict(),
            "jump_heights": draws.heights.values.tolist(),
            "trajectories": trajectories,
        }
    return SampleResult(index, np.array(err_a), np.array(err_u), np.array(secs), fields, diagnostics)


def reference_basis(config: ProblemConfig, plan: LevelPlan):
    if config.phi == "zero":
        return None
    return kl_spectrum(config.covariance, plan.reference.N, config.nystrom_nodes)


# ---------------------------------------------------------------------------
# Monte Carlo estimation


@dataclass(frozen=True)
class RateFit:
    kappa: float
    log_c: float
    residual: float


def fit_rate(h_bars, rmse) -> RateFit:
    """Least squares ``log RMSE = kappa log h + log C``; residual is the 2-norm."""
    h = np.asarray(h_bars, dtype=float)
    r = np.asarray(rmse, dtype=float)
    if len(h) != len(r) or len(h) < 3:
        raise ValueError("need at least 3 (h_bar, rmse) pairs")
    if np.any(h <= 0) or np.any(r <= 0):
        raise ValueError("h_bar and rmse values must be positive")
    X = np.stack([np.log(h), np.ones_like(h)], axis=1)
    y = np.log(r)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.linalg.norm(X @ coef - y))
    return RateFit(float(coef[0]), float(coef[1]), resid)


def rmse_with_se(sq_errors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-level RMSE and its delta-method standard error; rows are samples."""
    sq = np.asarray(sq_errors, dtype=float)
    n = sq.shape[0]
    mean = sq.mean(axis=0)
    rmse = np.sqrt(mean)
    se_mean = sq.std(axis=0, ddof=1) / math.sqrt(n)
    se = np.divide(se_mean, 2.0 * rmse, out=np.zeros_like(rmse), where=rmse > 0)
    return rmse, se


@dataclass
class ConvergenceReport:
    config: ProblemConfig
    plan: LevelPlan
    sample_indices: list[int]
    sq_errors_adapted: np.ndarray  # (samples, levels)
    sq_errors_uniform: np.ndarray
    seconds_per_level: np.ndarray
    rmse_adapted: np.ndarray = field(init=False)
    se_adapted: np.ndarray = field(init=False)
    rmse_uniform: np.ndarray = field(init=False)
    se_uniform: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rmse_adapted, self.se_adapted = rmse_with_se(self.sq_errors_adapted)
        self.rmse_uniform, self.se_uniform = rmse_with_se(self.sq_errors_uniform)

    @property
    def h_bars(self) -> np.ndarray:
        return np.array([lp.h_bar for lp in self.plan.levels])

    @property
    def n_samples(self) -> int:
        return len(self.sample_indices)

    @property
    def fit_adapted(self) -> RateFit:
        return fit_rate(self.h_bars, self.rmse_adapted)

    @property
    def fit_uniform(self) -> RateFit:
        return fit_rate(self.h_bars, self.rmse_uniform)


_WORKER_STATE: dict = {}


def _worker_init(config, plan, basis, base_seed):
    _WORKER_STATE.update(config=config, plan=plan, basis=basis, base_seed=base_seed)


def _worker_run(index):
    st = _WORKER_STATE
    return run_coupled_sample(st["config"], st["plan"], sample_seed(st["base_seed"], index),
                              st["basis"], index)


def estimate_rmse(config: ProblemConfig, n_samples: int, base_seed: int = 0,
                  threads: int = 1, plan: LevelPlan | None = None, first_index: int = 0,
                  progress=None) -> ConvergenceReport:
    """RMSE per level for both mesh families over ``n_samples`` coupled samples.

    Samples ``first_index .. first_index + n_samples - 1`` of the seed stream
    are used; results are reduced in index order so any ``threads`` value gives
    the same report.
    """
    if n_samples < 2:
        raise ConfigurationError("samples: need at least 2 samples")
    if threads < 1:
        raise ConfigurationError("threads: must be >= 1")
    plan = plan or build_plan(config)
    basis = reference_basis(config, plan)
    indices = list(range(first_index, first_index + n_samples))
    if threads == 1:
        _worker_init(config, plan, basis, base_seed)
        results = []
        for i in indices:
            results.append(_worker_run(i))
            if progress:
                progress(len(results), n_samples)
    else:
        with ProcessPoolExecutor(max_workers=threads, initializer=_worker_init,
                                 initargs=(config, plan, basis, base_seed)) as pool:
            results = []
            for res in pool.map(_worker_run, indices):
                results.append(res)
                if progress:
                    progress(len(results), n_samples)
    results.sort(key=lambda r: r.index)
    return ConvergenceReport(
        config,
        plan,
        indices,
        np.array([r.errors_adapted for r in results]),
        np.array([r.errors_uniform for r in results]),
        np.sum([r.seconds for r in results], axis=0),
    )


def config_from_dict(data: dict) -> ProblemConfig:
    """Inverse of :meth:`ProblemConfig.to_dict`."""
    data = dict(data)
    cov = CovarianceSpec(**data.pop("covariance"))
    jumps = dict(data.pop("jumps"))
    gig = jumps.pop("gig", None)
    law = JumpLaw(gig=GIGParams(**gig) if gig else None, **jumps)
    data["levels"] = tuple(data.get("levels", ()))
    return ProblemConfig(covariance=cov, jumps=law, **data)
