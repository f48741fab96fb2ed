"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

The Monte Carlo criteria use 100 samples from base seed 7. The 2D presets run
the declared scaled-down substitute (levels 1..4, reference level 6) with the
rate bands widened by 0.08 on each side; ``scripts/run_convergence.py`` runs
the full-scale versions.
"""
import csv
import math
import os

import numpy as np
import pytest

from oracles import gig_moment, mean_inverse_tau
from test_fem import spatial_orders, temporal_order
from jumpfem import fem
from jumpfem.cli import main
from jumpfem.experiment import estimate_rmse, experiment_presets
from jumpfem.jump_model import (
    GIGParams, JumpHeights, compose_coefficients, gig_sample, sample_partition_1d,
    sample_partition_2d,
)
from jumpfem.mesh import adapted_mesh, shape_regularity, uniform_mesh
from jumpfem.random_field import CovarianceSpec, tail_mass

SAMPLES = 100
SEED = 7
THREADS = os.cpu_count() or 1
WIDEN_2D = 0.08
PRESETS = experiment_presets()
_CACHE = {}


def report(name):
    if name not in _CACHE:
        config = PRESETS[name]
        if config.dim == 2:
            config = config.with_levels((1, 2, 3, 4), ref_level=6)
        _CACHE[name] = estimate_rmse(config, SAMPLES, SEED, threads=THREADS)
    return _CACHE[name]


def verdict(capsys, number, title, checks):
    ok = all(c[1] for c in checks)
    detail = "; ".join(f"{name} {'ok' if good else 'FAILED'} ({info})" for name, good, info in checks)
    with capsys.disabled():
        print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
    assert ok, detail


def band(value, lo, hi):
    return lo <= value <= hi, f"{value:.3f} in [{lo:.2f}, {hi:.2f}]"


def level_order(smaller, larger, strict):
    cmp = smaller < larger if strict else smaller <= larger
    return bool(np.all(cmp)), "per level " + " ".join(f"{a:.3g}/{b:.3g}" for a, b in zip(smaller, larger))


@pytest.mark.slow
def test_criterion_1_matern_gig(capsys, tmp_path):
    out = tmp_path / "matern"
    code = main(["run", "--preset", "1d_matern_gig", "--samples", str(SAMPLES), "--seed", str(SEED),
                 "--threads", str(THREADS), "--out", str(out), "--quiet"])
    with open(out / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    levels = [r for r in rows if r["level"] != "kappa"]
    kappa = [r for r in rows if r["level"] == "kappa"][0]
    ra = np.array([float(r["rmse_adapted"]) for r in levels])
    ru = np.array([float(r["rmse_nonadapted"]) for r in levels])
    verdict(capsys, 1, "1D Matern + GIG, levels 1..6", [
        ("cli exit 0 with 6 levels", code == 0 and len(levels) == 6, f"exit {code}, {len(levels)} levels"),
        ("adapted kappa", *band(float(kappa["rmse_adapted"]), 0.70, 1.05)),
        ("non-adapted kappa", *band(float(kappa["rmse_nonadapted"]), 0.42, 0.72)),
        ("adapted < non-adapted", *level_order(ra, ru, strict=True)),
    ])


@pytest.mark.slow
def test_criterion_2_brownian_uniform(capsys):
    r = report("1d_brownian_uniform")
    verdict(capsys, 2, "1D Brownian + uniform, levels 1..6", [
        ("adapted kappa", *band(r.fit_adapted.kappa, 0.35, 0.65)),
        ("non-adapted kappa", *band(r.fit_uniform.kappa, 0.35, 0.65)),
        ("adapted <= non-adapted", *level_order(r.rmse_adapted, r.rmse_uniform, strict=False)),
    ])


@pytest.mark.slow
def test_criterion_3_heterogeneous(capsys):
    r = report("2d_heterogeneous")
    w = WIDEN_2D
    verdict(capsys, 3, "2D heterogeneous, scaled substitute levels 1..4 ref 6, bands +-0.08", [
        ("adapted kappa", *band(r.fit_adapted.kappa, 0.65 - w, 1.05 + w)),
        ("non-adapted kappa", *band(r.fit_uniform.kappa, 0.45 - w, 0.85 + w)),
        ("adapted < non-adapted", *level_order(r.rmse_adapted, r.rmse_uniform, strict=True)),
    ])


@pytest.mark.slow
def test_criterion_4_checkerboard(capsys):
    r = report("2d_checkerboard")
    w = WIDEN_2D
    ka, ku = r.fit_adapted.kappa, r.fit_uniform.kappa
    verdict(capsys, 4, "2D checkerboard, scaled substitute levels 1..4 ref 6, bands +-0.08", [
        ("adapted kappa", *band(ka, 0.5 - w, 0.9 + w)),
        ("non-adapted below adapted", ku < ka, f"{ku:.3f} < {ka:.3f}"),
    ])


def test_criterion_5_manufactured(capsys):
    _, h1 = spatial_orders()
    t = temporal_order()
    verdict(capsys, 5, "manufactured heat solution", [
        ("H1 spatial order", *band(h1, 0.85, 1.15)),
        ("H1 temporal order", *band(t, 0.85, 1.15)),
    ])


def test_criterion_6_distributions(capsys):
    rng = np.random.default_rng(2024)
    inv_tau = np.mean([1.0 / sample_partition_1d(5.0, rng).tau for _ in range(10**5)])
    params = GIGParams(0.25, 9.0, -1.0)
    draws = gig_sample(params, 1e-6, rng, size=10**5)
    want = gig_moment(1, 0.25, 9.0, -1.0)
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    i = np.arange(1, 10**6 + 1, dtype=float)
    partial = float(np.sum(8.0 / ((2 * i - 1) ** 2 * math.pi**2)))
    verdict(capsys, 6, "distributional oracles", [
        ("E(1/tau)", abs(inv_tau - 0.1603) <= 0.005, f"{inv_tau:.4f} vs 0.1603, series {mean_inverse_tau():.4f}"),
        ("GIG mean", abs(draws.mean() - want) <= 3 * se, f"{draws.mean():.4f} vs {want:.4f}, 3 se {3 * se:.4f}"),
        ("Brownian partial sum", abs(partial - 1) <= 1e-5, f"|sum - 1| = {abs(partial - 1):.2e}"),
    ])


def _interfaces_ok(mesh, part):
    grids = [(mesh.xs, part.xs)] + ([(mesh.ys, part.ys)] if mesh.dim == 2 else [])
    return all(np.all(np.isin(b, g)) for g, b in grids) and not np.any(mesh.straddle)


def _conforming(mesh):
    e = np.sort(np.concatenate([mesh.cells[:, [0, 1]], mesh.cells[:, [1, 2]], mesh.cells[:, [0, 2]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    mid = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    bnd = np.any((mid == 0.0) | (mid == 1.0), axis=1)
    euler = mesh.n_vertices - len(uniq) + mesh.n_cells == 1
    return euler and np.all(counts[bnd] == 1) and np.all(counts[~bnd] == 2)


def test_criterion_7_invariants(capsys, tmp_path):
    rng = np.random.default_rng(99)
    iface = size = conform = spd = energy = True
    worst_ratio = 0.0
    for trial in range(30):
        for part, h in ((sample_partition_1d(5.0, rng), 0.02),
                        (sample_partition_2d(("heterogeneous", "checkerboard")[trial % 2], rng), 0.05)):
            m = adapted_mesh(part, h)
            iface &= _interfaces_ok(m, part)
            if m.dim == 1:
                size &= m.h <= h * (1 + 1e-12)
            else:
                size &= m.pitch <= h * (1 + 1e-12) and m.h <= math.sqrt(2) * h * (1 + 1e-12)
                conform &= _conforming(m)
                if min(np.diff(part.xs).min(), np.diff(part.ys).min()) >= h / 2:
                    worst_ratio = max(worst_ratio, shape_regularity(m))
            coeff = compose_coefficients(None, part, JumpHeights(rng.uniform(0, 10, part.tau)))
            s = fem.assemble(m, coeff, advection=False)
            dense = s.M.toarray()
            spd &= bool(np.allclose(dense, dense.T) and np.linalg.eigvalsh(dense).min() > 0)
            for dt in (1.0, 0.1, 0.01):
                tr = fem.backward_euler(s, np.zeros(s.n_dof), rng.standard_normal(s.n_dof), dt, 1.0)
                e = np.array([c @ (s.M @ c) for c in tr.states])
                energy &= bool(np.all(np.diff(e) <= 1e-14 * e[0]))
    conform &= _conforming(uniform_mesh(2, 0.05))
    tails_ok = True
    for spec in (CovarianceSpec.brownian(), CovarianceSpec.sine2d(0.25, 0.02), CovarianceSpec.matern(1.5, 1.0, 0.05)):
        t = np.array([tail_mass(spec, n) for n in range(1, 51)])
        tails_ok &= bool(np.all(np.diff(t) <= 1e-15) and np.all(t >= 0))
    args = ["run", "--preset", "2d_checkerboard", "--levels", "1-3", "--ref-level", "4",
            "--samples", "3", "--seed", str(SEED), "--quiet"]
    outs = []
    for tag, threads in (("a", 1), ("b", 1), ("c", 2)):
        main(args + ["--threads", str(threads), "--out", str(tmp_path / tag)])
        outs.append((tmp_path / tag / "report.csv").read_bytes())
    same = outs[0] == outs[1] == outs[2]
    verdict(capsys, 7, "invariant suite", [
        ("interface containment", iface, "30 1D and 30 2D sampled partitions"),
        ("h <= h_bar", size, "1D cell width; 2D grid pitch, diameter <= sqrt(2) h_bar"),
        ("conformity and Euler relation", conform, "edge sharing scan"),
        ("shape regularity", worst_ratio <= 3.0, f"worst ratio {worst_ratio:.3f} <= 3"),
        ("M positive definite", spd, "dense eigenvalue check"),
        ("energy decay f=0 b=0", energy, "dt in 1, 0.1, 0.01"),
        ("tail monotone", tails_ok, "N = 1..50 for all three covariances"),
        ("seed determinism", same, "report.csv bytes across reruns and threads 1, 2"),
    ])
