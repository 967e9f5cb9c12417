"""Named experiments: each takes a resolved config and an output directory and writes CSVs."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import ConfigInvalid, ExperimentConfig
from .control import constant_law, stabilizing_law, zero_law
from .diagnostics import chaos_experiment, fit_chaos_scaling, lemma1_sweep, reduction_stats
from .meanfield import MeanFlow, NoConvergence, meanfield_factory, picard_solve, solve_particles, write_iteration_log
from .models import BelavkinMeanField, BelavkinSingle, EmpiricalMean, QubitMeanFieldBloch
from .quantum import PRESETS, bloch_compose, bloch_decompose, fidelity
from .sde import NoisePlan, StepError, TimeGrid, simulate, write_csv

OUT_ENV = "MFBELAVKIN_OUT"


class ExperimentFailed(RuntimeError):
    def __init__(self, experiment: str, seed: int, cause: Exception):
        self.experiment = experiment
        self.seed = seed
        self.step = getattr(cause, "step", None)
        self.cause = cause
        where = f" at step {self.step}" if self.step is not None else ""
        super().__init__(f"{experiment} (seed {seed}) failed{where}: {cause}")


@dataclass(frozen=True)
class Experiment:
    name: str
    description: str
    keys: tuple
    models: tuple
    runner: Callable


def build_control(cfg: ExperimentConfig):
    c = cfg.control
    if c.law == "zero":
        return zero_law()
    if c.law == "constant":
        return constant_law(c.value)
    if cfg.d != 2 and c.target in ("rho_g", "rho_e"):
        raise ConfigInvalid("control.target", "qubit target used with d != 2")
    return stabilizing_law(PRESETS[c.target], c.c1, c.c2, cfg.Hhat)


def grid_of(cfg: ExperimentConfig) -> TimeGrid:
    return TimeGrid(cfg.T, cfg.dt)


def run_ensemble(cfg: ExperimentConfig, record_paths):
    """Simulate cfg.n_paths paths of the configured qubit model; returns (result, to_density)."""
    law = build_control(cfg)
    grid = grid_of(cfg)
    if cfg.model == "meanfield":
        model = BelavkinMeanField(cfg.model_params(), law, EmpiricalMean())
        x0 = cfg.initial
        to_rho = np.asarray
    elif cfg.model == "single":
        model = BelavkinSingle(cfg.model_params(), law)
        x0 = cfg.initial
        to_rho = np.asarray
    elif cfg.model == "meanfield-bloch":
        if cfg.d != 2:
            raise ConfigInvalid("model", "meanfield-bloch needs d = 2")
        coupled = not cfg.model_params().kernel.is_zero
        model = QubitMeanFieldBloch(cfg.eta, law, EmpiricalMean(), cfg.form, coupled)
        x0 = bloch_decompose(cfg.initial)
        to_rho = bloch_compose
    else:
        raise ConfigInvalid("model", f"{cfg.model!r} is not supported by {cfg.experiment}")
    noise = NoisePlan(cfg.seed, model.n_channels, grid.dt, tuple(range(cfg.n_paths)))
    res = simulate(model, x0, grid, noise, record_every=cfg.record_every, record_paths=record_paths)
    return res, to_rho


def _write_records(cfg, out: Path, records):
    files = []
    for rec in records:
        p = out / f"{cfg.experiment}_{cfg.seed}_{rec.path:03d}.csv"
        rec.to_csv(p)
        files.append(p)
    return files


def _z_of(rec):
    return rec.state_values[:, rec.state_columns.index("z")]


def run_reduction(cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    """z-trajectories of n_paths mean-field particles, their mean curve and reduction statistics."""
    if cfg.d != 2:
        raise ConfigInvalid("params.H", "reduction needs qubits")
    res, _ = run_ensemble(cfg, list(range(cfg.n_paths)))
    files = _write_records(cfg, out, res.records[: cfg.save_paths])
    z = np.stack([_z_of(r) for r in res.records], axis=1)
    times = res.records[0].times
    se = z.std(axis=1, ddof=1) / math.sqrt(z.shape[1]) if z.shape[1] > 1 else np.zeros(len(times))
    summary = out / "summary_mean_z.csv"
    write_csv(summary, ["time", "mean_z", "se_z", "fraction_reduced"], np.column_stack(
        [times, z.mean(axis=1), se, np.mean(np.abs(z) > cfg.threshold, axis=1)]
    ))
    rep = reduction_stats(z[-1], cfg.threshold, z0=float(z[0, 0]))
    stats = out / "reduction_report.csv"
    write_csv(stats, ["n_paths", "threshold", "fraction_reduced", "fraction_up", "z0", "born"], [[
        rep.n_paths, rep.threshold, rep.fraction_reduced, rep.fraction_up, rep.z0, rep.born
    ]])
    return {"trajectories": files, "summary": [summary, stats], "report": rep}


def run_stabilization(cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    """Fidelity to the control target along each path, and its mean curve."""
    res, to_rho = run_ensemble(cfg, list(range(cfg.n_paths)))
    files = _write_records(cfg, out, res.records[: cfg.save_paths])
    target = PRESETS[cfg.control.target]
    fid = np.stack([fidelity(to_rho(r.states), target) for r in res.records], axis=1)
    times = res.records[0].times
    se = fid.std(axis=1, ddof=1) / math.sqrt(fid.shape[1]) if fid.shape[1] > 1 else np.zeros(len(times))
    per_path = out / "fidelity_paths.csv"
    write_csv(per_path, ["time"] + [f"F_{p:03d}" for p in range(fid.shape[1])], np.column_stack([times, fid]))
    summary = out / "summary_mean_fidelity.csv"
    write_csv(summary, ["time", "mean_fidelity", "se_fidelity"], np.column_stack([times, fid.mean(axis=1), se]))
    return {"trajectories": files, "summary": [per_path, summary], "fidelity": fid, "times": times}


def _chaos_one(args):
    cfg, N = args
    return chaos_experiment(cfg.initial, cfg.model_params(), [N], grid_of(cfg), cfg.n_paths, cfg.seed, cfg.record_every)[0]


def run_chaos(cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    """E[alpha_N(t)] for every N in cfg.Ns, plus the log-log slope and envelope fit."""
    jobs = [(cfg, N) for N in cfg.Ns]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            reports = list(pool.map(_chaos_one, jobs))
    else:
        reports = [_chaos_one(j) for j in jobs]
    files = [r.to_csv(out / f"chaos_N{r.N}.csv") for r in reports]
    fit = fit_chaos_scaling(reports)
    fit_path = out / "chaos_fit.csv"
    write_csv(fit_path, ["slope", "slope_se", "ci_low", "ci_high", "intercept", "envelope_c"], [[
        fit.slope, fit.slope_se, fit.ci[0], fit.ci[1], fit.intercept, fit.envelope_c
    ]])
    final = out / "chaos_final.csv"
    write_csv(final, ["N", "mean_alpha_T", "se_alpha_T", "alpha_0"], [
        [r.N, r.mean_alpha[-1], r.se_alpha[-1], r.alpha0] for r in reports
    ])
    return {"summary": files + [fit_path, final], "reports": reports, "fit": fit}


def _lemma_one(args):
    n, d, seed, dump = args
    return lemma1_sweep(n, d, seed, dump_path=dump)


def run_lemma1(cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    """Randomized check of the trace inequality for every d in cfg.dims."""
    jobs = [(cfg.n_samples, d, cfg.seed, out / f"lemma1_counterexamples_d{d}.txt") for d in cfg.dims]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            sweeps = list(pool.map(_lemma_one, jobs))
    else:
        sweeps = [_lemma_one(j) for j in jobs]
    path = out / "lemma1_summary.csv"
    write_csv(path, ["d", "n_samples", "violations", "max_ratio", "near_equality", "near_equality_flags"], [
        [s.d, s.n_samples, s.violations, s.max_ratio, s.near_equality, s.near_equality_flags] for s in sweeps
    ])
    return {"summary": [path], "sweeps": sweeps}


def _frobenius_se(flow: MeanFlow) -> np.ndarray:
    se = flow.standard_errors
    return np.sqrt(np.sum(se.real**2 + se.imag**2, axis=(-2, -1)))


def run_picard_vs_particles(cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    """Mean flow from the particle method (cfg.N) and from Picard iteration (cfg.n_paths), compared."""
    if cfg.model != "meanfield":
        raise ConfigInvalid("model", "picard-vs-particles runs the matrix model 'meanfield'")
    params = cfg.model_params()
    law = build_control(cfg)
    grid = grid_of(cfg)
    particles, _ = solve_particles(BelavkinMeanField(params, law, EmpiricalMean()), cfg.initial, cfg.N, grid, cfg.seed)
    converged = True
    try:
        picard = picard_solve(meanfield_factory(params, law), cfg.initial, grid, cfg.n_paths, cfg.seed + 1,
                              cfg.max_iter, cfg.tol)
    except NoConvergence as exc:
        picard, converged = exc.flow, False
        picard.iterations = exc.distances
    dist = particles.distances(picard)
    bound = 2 * cfg.tol + 3 * np.sqrt(_frobenius_se(particles) ** 2 + _frobenius_se(picard) ** 2)
    files = [
        particles.to_csv(out / "flow_particles.csv"),
        picard.to_csv(out / "flow_picard.csv"),
        write_iteration_log(out / "picard_iterations.csv", picard.iterations),
    ]
    cmp_path = out / "comparison.csv"
    write_csv(cmp_path, ["time", "distance", "bound"], np.column_stack([grid.times, dist, bound]))
    files.append(cmp_path)
    return {"summary": files, "particles": particles, "picard": picard, "distance": dist, "bound": bound,
            "converged": converged}


EXPERIMENTS = {
    e.name: e
    for e in (
        Experiment("reduction", "mean-field particles without control: z-paths, mean curve, reduction fractions",
                   ("seed", "grid.T", "grid.dt", "initial", "run.n_paths"), ("meanfield", "meanfield-bloch", "single"),
                   run_reduction),
        Experiment("stabilization", "feedback toward a target state: fidelity paths and mean fidelity",
                   ("seed", "grid.T", "grid.dt", "initial", "control", "run.n_paths"),
                   ("meanfield", "meanfield-bloch", "single"), run_stabilization),
        Experiment("chaos-scaling", "deviation between N-particle marginals and mean-field filters, fitted in N",
                   ("seed", "grid.T", "grid.dt", "initial", "run.Ns", "run.n_paths"), ("nqubit", "nparticle"),
                   run_chaos),
        Experiment("lemma1-sweep", "randomized check of the trace inequality per dimension",
                   ("seed", "run.n_samples", "run.dims"), ("any",), run_lemma1),
        Experiment("picard-vs-particles", "mean-field law from Picard iteration versus the particle method",
                   ("seed", "grid.T", "grid.dt", "initial", "run.N", "run.n_paths", "run.tol"), ("meanfield",),
                   run_picard_vs_particles),
    )
}


def catalog() -> str:
    lines = []
    for e in EXPERIMENTS.values():
        lines.append(f"{e.name}: {e.description}")
        lines.append(f"    keys: {', '.join(e.keys)}")
        lines.append(f"    models: {', '.join(e.models)}")
    return "\n".join(lines)


def output_dir(cfg: ExperimentConfig, override=None) -> Path:
    if override is not None:
        return Path(override)
    if cfg.out is not None:
        return Path(cfg.out)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / f"{cfg.experiment}_{cfg.seed}"


def write_manifest(cfg: ExperimentConfig, out: Path, files) -> Path:
    """JSON manifest; the timestamp is the only line that changes between identical runs."""
    body = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "files": sorted(str(Path(f).name) for f in files),
        "library_version": __version__,
    }
    text = json.dumps(body, indent=2, sort_keys=True)
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    text = text.replace("{\n", "{\n" + f'  "timestamp": "{stamp}",\n', 1)
    path = out / "manifest.json"
    path.write_text(text + "\n")
    return path


def run_experiment(cfg: ExperimentConfig, out=None, threads: int = 1) -> dict:
    exp = EXPERIMENTS.get(cfg.experiment)
    if exp is None:
        raise ConfigInvalid("experiment", f"unknown experiment {cfg.experiment!r}")
    if "any" not in exp.models and cfg.model not in exp.models:
        raise ConfigInvalid("model", f"{cfg.experiment} supports {', '.join(exp.models)}, not {cfg.model!r}")
    out = output_dir(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = exp.runner(cfg, out, threads)
    except ConfigInvalid:
        raise
    except (StepError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise ExperimentFailed(cfg.experiment, cfg.seed, exc) from exc
    except ValueError as exc:
        raise ExperimentFailed(cfg.experiment, cfg.seed, exc) from exc
    files = list(result.get("trajectories", [])) + list(result.get("summary", []))
    result["manifest"] = write_manifest(cfg, out, files)
    result["out"] = out
    return result
