"""Deviation, trace-inequality checks, propagation-of-chaos scaling, reduction statistics, purity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import (
    MAX_ENTRIES,
    BelavkinMeanField,
    BelavkinNParticle,
    BelavkinNParticleVector,
    FlowMean,
    LindbladMeanODE,
    ModelParams,
    TooManyParticles,
)
from .quantum import (
    DimensionMismatch,
    NotHermitian,
    apply_left,
    n_particles_of,
    partial_trace,
    random_density,
    random_hermitian,
    random_pure,
    spectral_norm,
    trace,
)
from .sde import CSV_FLOAT, NoisePlan, StepError, TimeGrid, check_finite, write_csv

ALPHA_CROSS_TOL = 1e-11
LEMMA_TOL = 1e-10
NEAR_EQUALITY_RHS = 1e-6
NEAR_EQUALITY_TOL = 1e-13


class EtaNotOne(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class InconsistentAlpha(AssertionError):
    pass


# ---------------------------------------------------------------------------
# Deviation alpha


def alpha_deviation(rhoN, gamma, j: int, d: int | None = None) -> np.ndarray:
    """1 - tr(gamma rho^j), computed through the marginal and through gamma embedded at slot j.

    Batched over leading axes; the two computations must agree within 1e-11.
    """
    rhoN = np.asarray(rhoN, dtype=complex)
    gamma = np.asarray(gamma, dtype=complex)
    d = gamma.shape[-1] if d is None else d
    if gamma.shape[-2:] != (d, d):
        raise DimensionMismatch(f"gamma must be {d} x {d}, got {gamma.shape[-2:]}")
    n = n_particles_of(rhoN.shape[-1], d)
    marg = partial_trace(rhoN, j, n, d)
    via_marginal = 1.0 - np.einsum("...ij,...ji->...", gamma, marg)
    embedded = apply_left(gamma, rhoN, j, n) if gamma.ndim == 2 else _apply_left_batched(gamma, rhoN, j, n, d)
    via_embedding = 1.0 - trace(embedded)
    gap = np.max(np.abs(via_marginal - via_embedding), initial=0.0)
    if gap > ALPHA_CROSS_TOL:
        raise InconsistentAlpha(f"alpha via marginal and via embedding differ by {gap:.3e}")
    return via_marginal.real


def _apply_left_batched(gamma, rhoN, j, n, d):
    batch = rhoN.shape[:-2]
    r = rhoN.reshape(batch + (d**j, d, -1))
    return np.matmul(gamma[..., None, :, :], r).reshape(rhoN.shape)


def alpha_from_vectors(psi, gamma, j: int, d: int) -> np.ndarray:
    """1 - <psi| gamma_j |psi> for pure N-particle states given as vectors."""
    psi = np.asarray(psi, dtype=complex)
    n = n_particles_of(psi.shape[-1], d)
    if not 0 <= j < n:
        raise IndexError(f"particle index {j} outside 0..{n - 1}")
    v = psi.reshape(psi.shape[:-1] + (d**j, d, -1))
    return 1.0 - np.einsum("...xar,...ab,...xbr->...", v.conj(), np.asarray(gamma, dtype=complex), v).real


# ---------------------------------------------------------------------------
# Trace inequality


def _tr(a, b):
    return np.einsum("...ij,...ji->...", a, b)


def lemma1_terms(A, B, L):
    """lhs = |tr(LALB) - 1/2 tr(B(LA + AL)) tr(BL + AL) + tr(BA) tr(BL) tr(AL)|,
    rhs = 18 ||L||^2 tr((I - A) B) with the operator norm; batched."""
    A, B, L = (np.asarray(x, dtype=complex) for x in (A, B, L))
    la, al = L @ A, A @ L
    lhs = np.abs(_tr(la @ L, B) - 0.5 * _tr(B, la + al) * (_tr(B, L) + _tr(A, L)) + _tr(B, A) * _tr(B, L) * _tr(A, L))
    rhs = 18.0 * spectral_norm(L) ** 2 * (trace(B) - _tr(A, B)).real
    return lhs, rhs


def lemma1_check(A, B, L, tol: float = LEMMA_TOL):
    """(lhs, rhs, holds) for one triple; holds means lhs <= rhs + tol."""
    L = np.asarray(L, dtype=complex)
    gap = float(np.max(np.abs(L - L.conj().T)))
    if gap > 1e-12:
        raise NotHermitian(gap, 1e-12)
    lhs, rhs = lemma1_terms(A, B, L)
    lhs, rhs = float(lhs), float(rhs)
    return lhs, rhs, lhs <= rhs + tol


@dataclass
class Lemma1Sweep:
    d: int
    n_samples: int
    violations: int
    max_ratio: float
    near_equality: int
    near_equality_flags: int
    counterexamples: list = field(default_factory=list)


def _sample_triples(rng, d, k):
    """A third Hilbert-Schmidt pairs, a third pure pairs, a third B close to a pure A (near equality)."""
    k1 = k // 3
    k2 = k // 3
    k3 = k - k1 - k2
    A = np.concatenate([random_density(rng, d, k1), random_pure(rng, d, k2), random_pure(rng, d, k3)])
    B = np.concatenate([random_density(rng, d, k1), random_pure(rng, d, k2), random_density(rng, d, k3)])
    eps = 10.0 ** rng.uniform(-8, -1, size=k3)
    B[k1 + k2 :] = (1 - eps)[:, None, None] * A[k1 + k2 :] + eps[:, None, None] * B[k1 + k2 :]
    L = random_hermitian(rng, d, k)
    return A, B, L


def lemma1_sweep(
    n_samples: int, d: int, seed: int, tol: float = LEMMA_TOL, chunk: int = 20000, dump_path=None
) -> Lemma1Sweep:
    """Check the trace inequality on ``n_samples`` random triples; violations are dumped at full precision."""
    if n_samples < 1:
        raise EmptyInput("no samples requested")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(d,)))
    violations, near, flags, max_ratio = 0, 0, 0, 0.0
    bad = []
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        A, B, L = _sample_triples(rng, d, k)
        lhs, rhs = lemma1_terms(A, B, L)
        viol = lhs > rhs + tol
        violations += int(np.sum(viol))
        for i in np.flatnonzero(viol):
            bad.append((A[i], B[i], L[i], float(lhs[i]), float(rhs[i])))
        tiny = rhs < NEAR_EQUALITY_RHS
        near += int(np.sum(tiny))
        flags += int(np.sum(tiny & (lhs > rhs + NEAR_EQUALITY_TOL)))
        pos = rhs > NEAR_EQUALITY_RHS
        if np.any(pos):
            max_ratio = max(max_ratio, float(np.max(lhs[pos] / rhs[pos])))
        done += k
    if bad and dump_path is not None:
        dump_counterexamples(dump_path, bad)
    return Lemma1Sweep(d, n_samples, violations, max_ratio, near, flags, bad)


def _complex_text(z) -> str:
    im = CSV_FLOAT % z.imag
    return f"{CSV_FLOAT % z.real}{im if im.startswith('-') else '+' + im}j"


def dump_counterexamples(path, cases) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for n, (A, B, L, lhs, rhs) in enumerate(cases):
            fh.write(f"case {n}: lhs {CSV_FLOAT % lhs} rhs {CSV_FLOAT % rhs}\n")
            for name, m in (("A", A), ("B", B), ("L", L)):
                for row in m:
                    fh.write(f"{name} " + " ".join(_complex_text(z) for z in row) + "\n")
    return path


# ---------------------------------------------------------------------------
# Propagation of chaos


@dataclass
class ChaosReport:
    N: int
    times: np.ndarray
    mean_alpha: np.ndarray
    se_alpha: np.ndarray
    alpha0: float
    n_paths: int
    representation: str = "vector"

    def to_csv(self, path) -> Path:
        data = np.column_stack([self.times, self.mean_alpha, self.se_alpha])
        write_csv(path, ["time", "mean_alpha", "se_alpha"], data)
        return Path(path)


@dataclass
class ChaosFit:
    """log E[alpha_N(T)] = intercept + slope log N, and the fitted envelope rate c."""

    Ns: list
    slope: float
    slope_se: float
    ci: tuple
    intercept: float
    envelope_c: float

    @property
    def slope_negative(self) -> bool:
        return self.ci[1] < 0


def chaos_experiment(
    rho0,
    params: ModelParams,
    Ns,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    record_every: int = 10,
    representation: str = "vector",
) -> list[ChaosReport]:
    """E[alpha_N(t)] between an N-particle filter and mean-field filters on matched noise.

    For each N, ``n_paths`` copies of the uncontrolled N-particle filter run
    next to N mean-field filters per copy; the mean-field filter of particle
    j is driven by the same increments as channel j, and its mean m_t is the
    solution of the mean equation (exact for u = 0).  alpha is averaged over
    particles and paths; the standard error is over paths.
    """
    if params.eta != 1.0:
        raise EtaNotOne("the propagation-of-chaos estimate holds for eta = 1")
    d = params.d
    Ns = [int(N) for N in Ns]
    if d ** (2 * max(Ns)) > min(MAX_ENTRIES, 4**8):
        raise TooManyParticles(f"N = {max(Ns)} exceeds the chaos-experiment budget for d = {d}")
    rho0 = np.asarray(rho0, dtype=complex)
    flow = LindbladMeanODE(params).integrate(rho0, grid)
    return [
        _chaos_single(rho0, params, N, grid, flow, n_paths, seed, record_every, representation) for N in Ns
    ]


def _chaos_single(rho0, params, N, grid, flow, n_paths, seed, record_every, representation):
    d, P = params.d, n_paths
    if representation == "vector":
        sys_model = BelavkinNParticleVector(params, N)
    else:
        sys_model = BelavkinNParticle(params, N)
    mf = BelavkinMeanField(params, None, FlowMean(flow))
    x = np.broadcast_to(sys_model.initial_state(rho0), (P,) + sys_model.state_shape).copy()
    g = np.broadcast_to(rho0, (P * N, d, d)).copy()
    reader = NoisePlan(seed, N, grid.dt, tuple(range(P))).reader()
    rows = list(range(0, grid.n_steps + 1, record_every))
    if rows[-1] != grid.n_steps:
        rows.append(grid.n_steps)
    times, means, ses = [], [], []

    def measure(k):
        gam = g.reshape(P, N, d, d)
        if representation == "vector":
            per = np.stack([alpha_from_vectors(x, gam[:, j], j, d) for j in range(N)], axis=1)
        else:
            per = np.stack([alpha_deviation(x, gam[:, j], j, d) for j in range(N)], axis=1)
        path_mean = per.mean(axis=1)
        times.append(grid.times[k])
        means.append(path_mean.mean())
        ses.append(path_mean.std(ddof=1) / math.sqrt(P) if P > 1 else 0.0)

    measure(0)
    dt = grid.dt
    for k in range(grid.n_steps):
        try:
            dW = reader.next()  # (P, N)
            mean = mf.refresh_mean(k, g)
            raw_x = x + sys_model.increment(x, dW, dt)
            raw_g = g + mf.increment(g, dW.reshape(P * N, 1), dt, None, mean)
            check_finite(raw_x)
            check_finite(raw_g)
            spectral = (k + 1) % sys_model.spectral_every == 0 or (k + 1) in rows
            x, _ = sys_model.project(raw_x, spectral=spectral, prev=x)
            g, _ = mf.project(raw_g, spectral=True, prev=g)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise StepError(k, exc) from exc
        if k + 1 in rows:
            measure(k + 1)
    return ChaosReport(N, np.array(times), np.array(means), np.array(ses), float(means[0]), P, representation)


def fit_chaos_scaling(reports: list[ChaosReport]) -> ChaosFit:
    """Weighted least squares of log E[alpha_N(T)] on log N, and the envelope rate.

    Weights are (E/se)^2 from the delta method; the slope standard error is
    inflated by sqrt(chi^2 / dof) when the points scatter more than their
    error bars.  The envelope rate c is the smallest value with
    E[alpha_N(t)] <= e^{ct} (alpha_N(0) + 1/sqrt(N)) at every recorded t > 0.
    """
    if len(reports) < 2:
        raise EmptyInput("need at least two values of N to fit a slope")
    x = np.log([r.N for r in reports])
    a = np.array([r.mean_alpha[-1] for r in reports])
    se = np.array([r.se_alpha[-1] for r in reports])
    if np.any(a <= 0):
        raise ValueError("E[alpha_N(T)] must be positive to fit on a log scale")
    y = np.log(a)
    w = (a / np.maximum(se, 1e-300)) ** 2
    xm = np.sum(w * x) / np.sum(w)
    ym = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    dof = len(x) - 2
    scale = 1.0
    if dof > 0:
        chi2 = float(np.sum(w * (y - intercept - slope * x) ** 2))
        scale = max(1.0, math.sqrt(chi2 / dof))
    slope_se = float(scale / math.sqrt(sxx))
    ci = (slope - 1.96 * slope_se, slope + 1.96 * slope_se)
    c = -np.inf
    for r in reports:
        t = r.times[1:]
        env = r.alpha0 + 1.0 / math.sqrt(r.N)
        with np.errstate(divide="ignore"):
            c = max(c, float(np.max(np.log(np.maximum(r.mean_alpha[1:], 1e-300) / env) / t)))
    return ChaosFit([r.N for r in reports], slope, slope_se, ci, intercept, c)


# ---------------------------------------------------------------------------
# Reduction and purity


@dataclass
class ReductionReport:
    n_paths: int
    fraction_reduced: float
    fraction_up: float
    threshold: float
    z0: float | None
    born: float | None

    @property
    def binomial_se(self) -> float:
        p = self.born if self.born is not None else self.fraction_up
        return math.sqrt(p * (1 - p) / self.n_paths)

    @property
    def born_gap_sigmas(self) -> float:
        """|fraction_up - (1 + z0)/2| in units of the binomial standard error."""
        if self.born is None:
            return float("nan")
        se = self.binomial_se
        gap = abs(self.fraction_up - self.born)
        return 0.0 if gap == 0 else (gap / se if se > 0 else float("inf"))


def _z_column(record) -> np.ndarray:
    for name in ("z", "z_0"):
        if name in record.state_columns:
            return record.state_values[:, record.state_columns.index(name)]
    raise ValueError("record has no z component")


def reduction_stats(trajectories, threshold: float = 0.99, z0: float | None = None) -> ReductionReport:
    """Fractions of paths with |z_T| > threshold and with z_T > 0.

    ``trajectories`` is a list of qubit TrajectoryRecords or an array of
    final z values.  With records, z0 is read from the first row unless given.
    """
    if isinstance(trajectories, np.ndarray) or (len(trajectories) and np.isscalar(trajectories[0])):
        zT = np.asarray(trajectories, dtype=float).ravel()
    else:
        if z0 is None and len(trajectories):
            z0 = float(_z_column(trajectories[0])[0])
        zT = np.array([_z_column(r)[-1] for r in trajectories], dtype=float)
    if zT.size == 0:
        raise EmptyInput("no trajectories")
    born = None if z0 is None else 0.5 * (1.0 + z0)
    return ReductionReport(
        n_paths=int(zT.size),
        fraction_reduced=float(np.mean(np.abs(zT) > threshold)),
        fraction_up=float(np.mean(zT > 0)),
        threshold=threshold,
        z0=z0,
        born=born,
    )


@dataclass
class PurityTrack:
    times: np.ndarray
    purity: np.ndarray

    @property
    def minimum(self) -> float:
        return float(np.min(self.purity))

    @property
    def final(self) -> float:
        return float(self.purity[-1])


def purity_track(record) -> PurityTrack:
    """tr(rho^2) at every recorded step of a trajectory."""
    return PurityTrack(np.asarray(record.times), np.asarray(record.purity))
