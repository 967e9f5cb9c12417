"""Solvers for the mean-field law m_t = E[gamma_t]: interacting particles and Picard iteration."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import BelavkinMeanField, EmpiricalMean, FlowMean, ModelParams, QubitMeanFieldBloch
from .quantum import BLOCH_TOL, DimensionMismatch, bloch_decompose, frobenius, validate_density
from .sde import NoisePlan, TimeGrid, read_csv, simulate, write_csv


class NoConvergence(RuntimeError):
    """Picard iteration hit max_iter; ``flow`` holds the last iterate and ``distances`` the log."""

    def __init__(self, flow, distances, tol):
        self.flow = flow
        self.distances = list(distances)
        super().__init__(
            f"no convergence after {len(self.distances)} iterations: last sup-distance "
            f"{self.distances[-1]:.3e} > tol {tol:.3e}"
        )


class ZeroDistance(ValueError):
    pass


@dataclass
class MeanFlow:
    """A mean at every point of a time grid, density matrices (d x d) or Bloch vectors (3,)."""

    grid: TimeGrid
    means: np.ndarray
    standard_errors: np.ndarray | None = None
    iterations: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.means = np.asarray(self.means)
        if len(self.means) != self.grid.n_steps + 1:
            raise DimensionMismatch(f"{len(self.means)} means for a grid of {self.grid.n_steps + 1} points")
        if self.means.ndim not in (2, 3):
            raise DimensionMismatch(f"means must be (T, 3) or (T, d, d), got {self.means.shape}")

    @property
    def is_bloch(self) -> bool:
        return self.means.ndim == 2

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> MeanFlow:
        value = np.asarray(value)
        return cls(grid, np.broadcast_to(value, (grid.n_steps + 1,) + value.shape).copy())

    def validate(self, tol: float = 1e-9) -> None:
        if self.is_bloch:
            norm = np.sqrt(np.sum(self.means**2, axis=-1))
            if np.any(norm > 1 + max(tol, BLOCH_TOL)):
                raise ValueError(f"Bloch norm {norm.max():.6g} exceeds 1")
        else:
            validate_density(self.means, tol)

    def at(self, t: float):
        return self.means[self.grid.index(t)]

    def distances(self, other: MeanFlow) -> np.ndarray:
        """||self_t - other_t|| at every grid point (Frobenius, or Euclidean for Bloch vectors)."""
        if self.means.shape != other.means.shape or not np.allclose(self.times, other.times, rtol=0, atol=1e-12):
            raise DimensionMismatch("flows live on different grids or state spaces")
        diff = self.means - other.means
        if self.is_bloch:
            return np.sqrt(np.sum(diff**2, axis=-1))
        return frobenius(diff)

    def sup_distance(self, other: MeanFlow) -> float:
        return float(np.max(self.distances(other)))

    def columns(self) -> tuple[list[str], np.ndarray]:
        t = self.times[:, None]
        if self.is_bloch:
            names = ["time", "x", "y", "z"]
            blocks = [t, self.means]
            if self.standard_errors is not None:
                names += ["se_x", "se_y", "se_z"]
                blocks.append(self.standard_errors)
            return names, np.hstack(blocks)
        d = self.means.shape[-1]
        names, cols = ["time"], [self.times]
        if d == 2:
            names += ["x", "y", "z"]
            cols += list(bloch_decompose(self.means).T)
        for a in range(d):
            for b in range(d):
                names += [f"re_{a}{b}", f"im_{a}{b}"]
                cols += [self.means[:, a, b].real, self.means[:, a, b].imag]
        if self.standard_errors is not None:
            for a in range(d):
                for b in range(d):
                    names += [f"se_re_{a}{b}", f"se_im_{a}{b}"]
                    cols += [self.standard_errors[:, a, b].real, self.standard_errors[:, a, b].imag]
        return names, np.stack(cols, axis=1)

    def to_csv(self, path) -> Path:
        names, data = self.columns()
        write_csv(path, names, data)
        return Path(path)

    @classmethod
    def from_csv(cls, path, dt: float | None = None) -> MeanFlow:
        """Rebuild a flow written by :meth:`to_csv` (means only)."""
        names, data = read_csv(path)
        t = data[:, 0]
        dt = float(t[1] - t[0]) if dt is None else dt
        grid = TimeGrid(float(t[-1]), dt, float(t[0]))
        if names[1:4] == ["x", "y", "z"] and "re_00" not in names:
            return cls(grid, data[:, 1:4])
        d = int(round(np.sqrt(sum(1 for c in names if c.startswith("re_")))))
        means = np.empty((len(t), d, d), dtype=complex)
        for a in range(d):
            for b in range(d):
                means[:, a, b] = data[:, names.index(f"re_{a}{b}")] + 1j * data[:, names.index(f"im_{a}{b}")]
        return cls(grid, means)


def write_iteration_log(path, distances) -> Path:
    data = np.column_stack([np.arange(1, len(distances) + 1), np.asarray(distances, dtype=float)])
    write_csv(path, ["iteration", "sup_distance"], data)
    return Path(path)


# ---------------------------------------------------------------------------
# Model factories: frozen mean flow -> mean-coupled model


def meanfield_factory(params: ModelParams, controller=None):
    """MeanFlow -> matrix mean-field filter with that flow frozen in the Hamiltonian."""

    def factory(flow: MeanFlow):
        return BelavkinMeanField(params, controller, FlowMean(flow.means))

    return factory


def bloch_factory(eta: float = 1.0, controller=None, form: str = "paper"):
    """MeanFlow of Bloch vectors -> Bloch-coordinate mean-field filter."""

    def factory(flow: MeanFlow):
        return QubitMeanFieldBloch(eta, controller, FlowMean(flow.means), form)

    return factory


# ---------------------------------------------------------------------------


def solve_particles(
    model,
    x0,
    N: int,
    grid: TimeGrid,
    seed: int,
    controller=None,
    record_paths=(),
    record_every: int = 10,
    streams=None,
    on_step=None,
):
    """N mean-coupled copies stepped in lockstep through their empirical mean.

    ``model`` must take its mean from an :class:`EmpiricalMean` (or have no
    mean coupling).  ``streams`` overrides the noise stream ids, by default
    0..N-1.  Returns the MeanFlow of empirical means (with standard errors)
    and the records of ``record_paths``.
    """
    if N < 1:
        raise ValueError("need at least one particle")
    src = getattr(model, "mean_source", None)
    if src is not None and not isinstance(src, EmpiricalMean):
        raise ValueError("the particle method needs a model driven by an EmpiricalMean")
    if controller is not None:
        model = model.with_controller(controller)
    streams = tuple(range(N)) if streams is None else tuple(streams)
    if len(streams) != N:
        raise ValueError(f"{len(streams)} stream ids for {N} particles")
    noise = NoisePlan(seed, model.n_channels, grid.dt, streams)
    res = simulate(model, x0, grid, noise, record_every=record_every, record_paths=record_paths, on_step=on_step)
    return MeanFlow(grid, res.means, res.standard_errors()), res.records


def picard_map(factory, x0, grid: TimeGrid, flow: MeanFlow, n_paths: int, seed: int) -> MeanFlow:
    """Xi(flow): the Monte Carlo mean of n_paths filters run with ``flow`` frozen in.

    The same seed is used on every call, so Xi is a deterministic map of flows.
    """
    if n_paths < 1:
        raise ValueError("need at least one path")
    model = factory(flow)
    noise = NoisePlan(seed, model.n_channels, grid.dt, tuple(range(n_paths)))
    res = simulate(model, x0, grid, noise, record_every=max(grid.n_steps, 1))
    return MeanFlow(grid, res.means, res.standard_errors())


def picard_solve(
    factory,
    x0,
    grid: TimeGrid,
    n_paths: int = 2000,
    seed: int = 0,
    max_iter: int = 20,
    tol: float = 5e-3,
    initial: MeanFlow | None = None,
    log_path=None,
) -> MeanFlow:
    """Iterate xi <- Xi(xi) from the constant flow xi_t = x0 until sup_t ||xi' - xi|| <= tol.

    The returned flow carries the per-iteration sup-distances in
    ``iterations``.  Raises :class:`NoConvergence` (holding the last iterate)
    after ``max_iter`` iterations.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    xi = MeanFlow.constant(grid, np.asarray(x0)) if initial is None else initial
    distances = []
    for _ in range(max_iter):
        nxt = picard_map(factory, x0, grid, xi, n_paths, seed)
        distances.append(xi.sup_distance(nxt))
        nxt.iterations = list(distances)
        xi = nxt
        if distances[-1] <= tol:
            break
    if log_path is not None:
        write_iteration_log(log_path, distances)
    if distances[-1] > tol:
        raise NoConvergence(xi, distances, tol)
    return xi


def contraction_probe(factory, x0, grid: TimeGrid, xi1: MeanFlow, xi2: MeanFlow, n_paths: int, seed: int) -> float:
    """sup_t ||Xi(xi1) - Xi(xi2)|| / sup_t ||xi1 - xi2||, with common random numbers."""
    denom = xi1.sup_distance(xi2)
    if denom == 0.0:
        raise ZeroDistance("the two flows coincide")
    a = picard_map(factory, x0, grid, xi1, n_paths, seed)
    b = picard_map(factory, x0, grid, xi2, n_paths, seed)
    return a.sup_distance(b) / denom
