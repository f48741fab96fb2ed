"""Command-line front end: ``jumpfem run`` and ``jumpfem validate``.

Configs are INI files. ``[experiment]`` holds run settings (``preset``,
``samples``, ``seed``, ``threads``, ``levels``, ``ref_level``, ``out``);
``[problem]``, ``[covariance]`` and ``[jumps]`` override or define the problem.
Command-line flags take precedence over the file.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, fem
from .experiment import (
    ConvergenceReport,
    ProblemConfig,
    build_plan,
    config_from_dict,
    estimate_rmse,
    experiment_presets,
    run_coupled_sample,
    sample_seed,
)
from .jump_model import ConfigurationError, GIGParams, JumpLaw
from .random_field import CovarianceSpec

SEED_SCHEME = "numpy SeedSequence(entropy=seed, spawn_key=(sample_index,)); children spawn(3) -> partition, jumps, field"

_PROBLEM_FIELDS = {f.name: f.type for f in dataclasses.fields(ProblemConfig)}
_FLOAT = ("poisson_intensity", "abar", "advection_scale", "u0_scale", "source", "T", "h0", "s")
_INT = ("dim", "ref_level", "lattice_points", "nystrom_nodes")


class ValidationError(ValueError):
    """Config problem; message starts with the offending field path."""


@dataclasses.dataclass
class RunSettings:
    config: ProblemConfig
    samples: int
    seed: int
    threads: int
    out: Path


def _fmt(x) -> str:
    return "" if x is None else f"{float(x):.17g}"


def _parse_levels(text: str, path: str) -> tuple[int, ...]:
    try:
        if "-" in text and "," not in text:
            lo, hi = (int(p) for p in text.split("-"))
            return tuple(range(lo, hi + 1))
        return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
    except ValueError:
        raise ValidationError(f"{path}: cannot parse level list {text!r}") from None


def _number(section, key, cast, where):
    try:
        return cast(section[key])
    except ValueError:
        raise ValidationError(f"{where}.{key}: expected {cast.__name__}, got {section[key]!r}") from None


def _problem_from_sections(parser: configparser.ConfigParser, preset: str | None) -> ProblemConfig:
    presets = experiment_presets()
    if preset is not None:
        if preset not in presets:
            raise ValidationError(f"experiment.preset: unknown preset {preset!r} (choose from {', '.join(presets)})")
        base = presets[preset].to_dict()
    else:
        base = None

    overrides: dict = {}
    if parser.has_section("problem"):
        sec = parser["problem"]
        for key in sec:
            if key not in _PROBLEM_FIELDS or key in ("covariance", "jumps", "levels"):
                raise ValidationError(f"problem.{key}: unknown field")
            if key in _FLOAT:
                overrides[key] = _number(sec, key, float, "problem")
            elif key in _INT:
                overrides[key] = _number(sec, key, int, "problem")
            else:
                overrides[key] = sec[key]

    cov = None
    if parser.has_section("covariance"):
        sec = parser["covariance"]
        args = dict(base["covariance"]) if base else {}
        for key in sec:
            if key == "kind":
                args["kind"] = sec[key]
            elif key in ("nu", "variance", "corr_length"):
                args[key] = _number(sec, key, float, "covariance")
            else:
                raise ValidationError(f"covariance.{key}: unknown field")
        if "kind" not in args:
            raise ValidationError("covariance.kind: required")
        try:
            cov = CovarianceSpec(**args)
        except ValueError as exc:
            raise ValidationError(f"covariance: {exc}") from None

    law = None
    if parser.has_section("jumps"):
        sec = parser["jumps"]
        args = dict(base["jumps"]) if base else {}
        gig = dict(args.pop("gig", None) or {})
        for key in sec:
            if key == "kind":
                args["kind"] = sec[key]
            elif key in ("lo", "hi"):
                args[key] = _number(sec, key, float, "jumps")
            elif key in ("psi", "chi", "lam"):
                gig[key] = _number(sec, key, float, "jumps")
            else:
                raise ValidationError(f"jumps.{key}: unknown field")
        if "kind" not in args:
            raise ValidationError("jumps.kind: required")
        try:
            law = JumpLaw(gig=GIGParams(**gig) if args["kind"] == "gig" else None, **args)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"jumps: {exc}") from None

    if base is None:
        for key in ("name", "dim", "partition"):
            if key not in overrides:
                raise ValidationError(f"problem.{key}: required without a preset")
        if cov is None:
            raise ValidationError("covariance.kind: required without a preset")
        if law is None:
            raise ValidationError("jumps.kind: required without a preset")
        return ProblemConfig(covariance=cov, jumps=law, **overrides)
    config = config_from_dict(base)
    changes = dict(overrides)
    if cov is not None:
        changes["covariance"] = cov
    if law is not None:
        changes["jumps"] = law
    return dataclasses.replace(config, **changes)


def resolve_settings(args) -> RunSettings:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case: ``T`` is a field name
    if args.config:
        try:
            with open(args.config) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ValidationError(f"config: cannot read {args.config}: {exc}") from None
    exp = parser["experiment"] if parser.has_section("experiment") else {}
    for key in exp:
        if key not in ("preset", "samples", "seed", "threads", "levels", "ref_level", "out"):
            raise ValidationError(f"experiment.{key}: unknown field")

    preset = args.preset or exp.get("preset")
    if preset is None and not args.config:
        raise ValidationError("preset: give --preset or --config")
    config = _problem_from_sections(parser, preset)

    levels = None
    if args.levels is not None:
        levels = _parse_levels(args.levels, "levels")
    elif "levels" in exp:
        levels = _parse_levels(exp["levels"], "experiment.levels")
    ref_level = args.ref_level
    if ref_level is None and "ref_level" in exp:
        ref_level = _number(exp, "ref_level", int, "experiment")
    if levels is not None or ref_level is not None:
        config = config.with_levels(levels or config.levels, ref_level)

    def pick(flag, key, default, cast=int):
        if flag is not None:
            return flag
        if key in exp:
            return _number(exp, key, cast, "experiment")
        return default

    samples = pick(args.samples, "samples", 100)
    seed = pick(args.seed, "seed", 0)
    threads = pick(args.threads, "threads", os.cpu_count() or 1)
    out = Path(args.out or exp.get("out", "results"))
    if samples < 2:
        raise ValidationError(f"samples: must be >= 2, got {samples}")
    if threads < 1:
        raise ValidationError(f"threads: must be >= 1, got {threads}")
    if seed < 0:
        raise ValidationError(f"seed: must be nonnegative, got {seed}")
    try:
        config.validate()
    except ConfigurationError as exc:
        raise ValidationError(str(exc)) from None
    return RunSettings(config, samples, seed, threads, out)


# ---------------------------------------------------------------------------
# Outputs


def write_report(report: ConvergenceReport, path: Path) -> None:
    fa, fu = report.fit_adapted, report.fit_uniform
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "h_bar", "N", "eps", "dt", "rmse_adapted", "se_adapted",
                    "rmse_nonadapted", "se_nonadapted"])
        for i, lp in enumerate(report.plan.levels):
            w.writerow([lp.level, _fmt(lp.h_bar), lp.N, _fmt(lp.eps), _fmt(lp.dt),
                        _fmt(report.rmse_adapted[i]), _fmt(report.se_adapted[i]),
                        _fmt(report.rmse_uniform[i]), _fmt(report.se_uniform[i])])
        w.writerow(["kappa", "", "", "", "", _fmt(fa.kappa), "", _fmt(fu.kappa), ""])


def write_samples(report: ConvergenceReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "level", "sq_err_adapted", "sq_err_nonadapted"])
        for row, idx in enumerate(report.sample_indices):
            for j, lp in enumerate(report.plan.levels):
                w.writerow([idx, lp.level, _fmt(report.sq_errors_adapted[row, j]),
                            _fmt(report.sq_errors_uniform[row, j])])


def provenance(settings: RunSettings, plan, report: ConvergenceReport | None = None) -> dict:
    out = {
        "config": settings.config.to_dict(),
        "samples": settings.samples,
        "seed": settings.seed,
        "seed_scheme": SEED_SCHEME,
        "threads": settings.threads,
        "plan": {
            "levels": [dataclasses.asdict(lp) for lp in plan.levels],
            "reference": dataclasses.asdict(plan.reference),
            "s": plan.s,
        },
        "versions": {
            "jumpfem": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if report is not None:
        out["fit"] = {
            "adapted": dataclasses.asdict(report.fit_adapted),
            "nonadapted": dataclasses.asdict(report.fit_uniform),
        }
        out["wall_clock_per_level"] = report.seconds_per_level.tolist()
    return out


def dump_diagnostics(settings: RunSettings, plan, meshes: bool, trajectories: bool) -> None:
    """Partition, jumps, meshes and lattice trajectories of sample 0."""
    diag = settings.out / "diagnostics"
    diag.mkdir(parents=True, exist_ok=True)
    res = run_coupled_sample(settings.config, plan, sample_seed(settings.seed, 0), index=0,
                             return_fields=True, keep="all" if trajectories else "last")
    info = res.diagnostics
    with open(diag / "sample0_partition.json", "w") as fh:
        json.dump({"partition": info["partition"], "jump_heights": info["jump_heights"]}, fh, indent=2)
    lattice = fem.Lattice(settings.config.dim, settings.config.lattice_points)
    for key, traj in info["trajectories"].items():
        if key == "reference":
            tag = f"reference_level{plan.reference.level}"
        else:
            if key[0] != "adapted":
                continue
            tag = f"adapted_level{key[1]}"
        if meshes:
            traj.mesh.dump(diag / f"sample0_{tag}_mesh.txt")
        if trajectories:
            with open(diag / f"sample0_{tag}_trajectory.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for t in traj.times:
                    vals = fem.evaluate_on_grid(traj, float(t), lattice).ravel()
                    w.writerow([_fmt(t)] + [_fmt(v) for v in vals])


def print_plan(settings: RunSettings, plan, stream=None) -> None:
    stream = stream or sys.stdout
    c = settings.config
    print(f"problem {c.name}  dim={c.dim}  covariance={c.covariance.kind}  jumps={c.jumps.kind}", file=stream)
    print(f"samples={settings.samples}  seed={settings.seed}  threads={settings.threads}", file=stream)
    print(f"{'level':>6} {'h_bar':>12} {'N':>8} {'eps':>12} {'dt':>12}", file=stream)
    for lp in plan.levels:
        print(f"{lp.level:>6} {lp.h_bar:>12.6g} {lp.N:>8} {lp.eps:>12.6g} {lp.dt:>12.6g}", file=stream)
    r = plan.reference
    print(f"{'ref ' + str(r.level):>6} {r.h_bar:>12.6g} {r.N:>8} {r.eps:>12.6g} {r.dt:>12.6g}", file=stream)


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset")
    common.add_argument("--config")
    common.add_argument("--samples", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--levels", help="comma list or range, e.g. 1,2,3 or 1-6")
    common.add_argument("--ref-level", type=int, dest="ref_level")
    common.add_argument("--out")
    p = argparse.ArgumentParser(prog="jumpfem", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run a convergence study")
    run.add_argument("--dry-run", action="store_true", help="print the level plan and exit")
    run.add_argument("--dump-mesh", action="store_true")
    run.add_argument("--dump-trajectory", action="store_true")
    run.add_argument("--quiet", action="store_true")
    sub.add_parser("validate", parents=[common], help="print the resolved level plan")
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = resolve_settings(args)
        plan = build_plan(settings.config)
    except (ValidationError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate" or args.dry_run:
        print_plan(settings, plan)
        return 0

    def progress(done, total):
        if not args.quiet:
            print(f"\r{done}/{total} samples", end="" if done < total else "\n", file=sys.stderr, flush=True)

    try:
        report = estimate_rmse(settings.config, settings.samples, settings.seed, settings.threads,
                               plan=plan, progress=progress)
        settings.out.mkdir(parents=True, exist_ok=True)
        write_report(report, settings.out / "report.csv")
        write_samples(report, settings.out / "samples.csv")
        with open(settings.out / "run.json", "w") as fh:
            json.dump(provenance(settings, plan, report), fh, indent=2)
        if args.dump_mesh or args.dump_trajectory:
            dump_diagnostics(settings, plan, args.dump_mesh, args.dump_trajectory)
    except Exception as exc:  # runtime failures carry (seed, level) context
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not args.quiet:
        fa, fu = report.fit_adapted, report.fit_uniform
        print(f"kappa adapted {fa.kappa:.3f}  nonadapted {fu.kappa:.3f}  -> {settings.out / 'report.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
