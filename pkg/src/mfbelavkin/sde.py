"""Euler-Maruyama machinery for matrix-valued Ito SDEs.

Models (see :mod:`mfbelavkin.models`) provide drift/noise increments on batched
states; this module owns time grids, noise streams, projection back onto the
state space, the lockstep time loop, and trajectory records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quantum import dagger, hermitian_part, trace

CSV_FLOAT = "%.17g"
CHUNK_BYTES = 1 << 17  # paths are stepped in blocks of about this many bytes of state
DEGENERATE_TRACE = 1e-6


class EngineError(RuntimeError):
    pass


class NonFinite(EngineError, FloatingPointError):
    pass


class ProjectionFailed(EngineError):
    pass


class DegenerateState(ProjectionFailed):
    pass


class EfficiencyOutOfRange(ValueError):
    pass


class StepError(EngineError):
    """A failure inside the time loop, tagged with the step index."""

    def __init__(self, step: int, cause: Exception):
        self.step = step
        self.cause = cause
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class TimeGrid:
    T: float
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.T < self.t0:
            raise ValueError(f"horizon T = {self.T} precedes t0 = {self.t0}")
        n = round((self.T - self.t0) / self.dt)
        if not math.isclose(n * self.dt, self.T - self.t0, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(f"T - t0 = {self.T - self.t0} is not a whole number of steps dt = {self.dt}")

    @property
    def n_steps(self) -> int:
        return round((self.T - self.t0) / self.dt)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def index(self, t: float) -> int:
        k = round((t - self.t0) / self.dt)
        if not 0 <= k <= self.n_steps or not math.isclose(self.t0 + k * self.dt, t, abs_tol=1e-9):
            raise ValueError(f"t = {t} is not on the grid")
        return k


@dataclass(frozen=True)
class NoisePlan:
    """Gaussian increments N(0, dt) on independent (stream, channel) substreams.

    Each substream is a Philox generator keyed by (seed, stream, channel), so
    the increment at a given step depends only on those three numbers and on
    the step index, never on how paths are batched or scheduled.
    """

    seed: int
    n_channels: int
    dt: float
    streams: tuple[int, ...] = (0,)

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(int(s) for s in self.streams))
        if self.n_channels < 0:
            raise ValueError("n_channels must be non-negative")

    @property
    def n_streams(self) -> int:
        return len(self.streams)

    def subset(self, streams) -> NoisePlan:
        return NoisePlan(self.seed, self.n_channels, self.dt, tuple(streams))

    def reader(self, block: int = 512) -> NoiseReader:
        return NoiseReader(self, block)

    def increments(self, n_steps: int) -> np.ndarray:
        """All increments at once, shape (n_steps, n_streams, n_channels)."""
        return self.reader(block=max(n_steps, 1)).take(n_steps)


def _substream(seed: int, stream: int, channel: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(channel)))
    return np.random.Generator(np.random.Philox(ss))


class NoiseReader:
    """Sequential cursor over a :class:`NoisePlan`."""

    def __init__(self, plan: NoisePlan, block: int = 512):
        self.plan = plan
        self.block = max(int(block), 1)
        self._gens = [[_substream(plan.seed, s, c) for c in range(plan.n_channels)] for s in plan.streams]
        self._buf = np.empty((0, plan.n_streams, plan.n_channels))
        self._pos = 0
        self._scale = math.sqrt(plan.dt)

    def _refill(self, need: int) -> None:
        k = max(need, self.block)
        fresh = np.empty((k, self.plan.n_streams, self.plan.n_channels))
        for p, gens in enumerate(self._gens):
            for c, g in enumerate(gens):
                fresh[:, p, c] = g.standard_normal(k)
        fresh *= self._scale
        self._buf = np.concatenate([self._buf[self._pos :], fresh])
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        if len(self._buf) - self._pos < k:
            self._refill(k - (len(self._buf) - self._pos))
        out = self._buf[self._pos : self._pos + k]
        self._pos += k
        return out

    def next(self) -> np.ndarray:
        return self.take(1)[0]


def project_state(m, spectral: bool = True, return_distance: bool = False):
    """Map an approximately Hermitian matrix back to a density matrix.

    Hermitize, clip negative eigenvalues to zero, renormalize the trace.  With
    ``spectral=False`` only the Hermitize and renormalize steps run, which is
    O(D^2) instead of O(D^3).  Qubits use the closed form: clipping a 2x2
    trace-t matrix with Bloch part r gives the pure state along r when
    |r| > t.
    """
    m = np.asarray(m, dtype=complex)
    h = hermitian_part(m)
    d = h.shape[-1]
    if not spectral:
        tr = trace(h).real
        if np.any(tr < DEGENERATE_TRACE):
            raise DegenerateState(f"trace {np.min(tr):.3e} below {DEGENERATE_TRACE}")
        out = h / tr[..., None, None]
    elif d == 2:
        t = (h[..., 0, 0] + h[..., 1, 1]).real
        rx = 2.0 * h[..., 0, 1].real
        ry = -2.0 * h[..., 0, 1].imag
        rz = (h[..., 0, 0] - h[..., 1, 1]).real
        r = np.sqrt(rx * rx + ry * ry + rz * rz)
        clipped_trace = np.where(r > t, np.maximum(0.5 * (t + r), 0.0), t)
        if np.any(clipped_trace < DEGENERATE_TRACE):
            raise DegenerateState(f"trace after clipping {np.min(clipped_trace):.3e} below {DEGENERATE_TRACE}")
        # Bloch vector of the output: r/t if unclipped, r/|r| if clipped
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(r > t, 1.0 / np.where(r > 0, r, 1.0), 1.0 / t)
        out = np.empty_like(h)
        out[..., 0, 0] = 0.5 * (1 + rz * scale)
        out[..., 1, 1] = 0.5 * (1 - rz * scale)
        out[..., 0, 1] = 0.5 * (rx - 1j * ry) * scale
        out[..., 1, 0] = 0.5 * (rx + 1j * ry) * scale
    else:
        w, v = np.linalg.eigh(h)
        w = np.clip(w, 0.0, None)
        tr = np.sum(w, axis=-1)
        if np.any(tr < DEGENERATE_TRACE):
            raise DegenerateState(f"trace after clipping {np.min(tr):.3e} below {DEGENERATE_TRACE}")
        out = (v * (w / tr[..., None])[..., None, :]) @ dagger(v)
    if return_distance:
        return out, np.sqrt(np.sum(np.abs(out - m) ** 2, axis=(-2, -1)))
    return out


def project_pure(m, return_distance: bool = False):
    """Nearest pure state |v><v| to the Hermitian part of ``m``, v its top eigenvector.

    For a perfectly monitored filter a pure state stays pure, so retracting
    the Euler update onto pure states enforces an exact invariant; unlike the
    eigenvalue clip it does not bias the ensemble mean.
    """
    m = np.asarray(m, dtype=complex)
    h = hermitian_part(m)
    if h.shape[-1] == 2:
        rx = 2.0 * h[..., 0, 1].real
        ry = -2.0 * h[..., 0, 1].imag
        rz = (h[..., 0, 0] - h[..., 1, 1]).real
        r = np.sqrt(rx * rx + ry * ry + rz * rz)
        if np.any(r < DEGENERATE_TRACE):
            raise DegenerateState(f"Bloch length {np.min(r):.3e} too small to pick a pure state")
        out = np.empty_like(h)
        out[..., 0, 0] = 0.5 * (1 + rz / r)
        out[..., 1, 1] = 0.5 * (1 - rz / r)
        out[..., 0, 1] = 0.5 * (rx - 1j * ry) / r
        out[..., 1, 0] = 0.5 * (rx + 1j * ry) / r
    else:
        w, v = np.linalg.eigh(h)
        if np.any(w[..., -1] < DEGENERATE_TRACE):
            raise DegenerateState(f"top eigenvalue {np.min(w[..., -1]):.3e} too small to pick a pure state")
        top = v[..., :, -1]
        out = top[..., :, None] * np.conj(top[..., None, :])
    if return_distance:
        return out, np.sqrt(np.sum(np.abs(out - m) ** 2, axis=(-2, -1)))
    return out


def path_sum(x) -> np.ndarray:
    """Sum over the leading (path) axis, adding paths in index order."""
    return np.add.reduce(np.asarray(x), axis=0)


def project_bloch(v, return_distance: bool = False):
    """Radial projection of Bloch vectors onto the unit ball."""
    v = np.asarray(v, dtype=float)
    norm = np.sqrt(np.einsum("...i,...i->...", v, v))[..., None]
    out = np.where(norm > 1.0, v / np.where(norm > 0, norm, 1.0), v)
    if return_distance:
        return out, np.maximum(norm[..., 0] - 1.0, 0.0)
    return out


def check_finite(x) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFinite("NaN or Inf in state update")


def euler_step(state, drift, diffusions, dW, dt: float, project=project_state):
    """One Euler-Maruyama step x + a(x) dt + sum_k b_k(x) dW_k, then projection.

    ``drift`` maps a state to its drift; ``diffusions`` maps it to a sequence
    (or stacked array) of per-channel diffusion values.
    """
    state = np.asarray(state)
    a = np.asarray(drift(state))
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    new = state + a * dt
    if dW.size:
        b = np.asarray(diffusions(state))
        if b.shape[0] != dW.shape[0]:
            raise ValueError(f"{b.shape[0]} diffusion channels but {dW.shape[0]} increments")
        new = new + np.tensordot(dW, b, axes=(0, 0))
    check_finite(new)
    if project is None:
        return new
    try:
        return project(new)
    except ProjectionFailed:
        raise
    except np.linalg.LinAlgError as exc:
        raise ProjectionFailed(str(exc)) from exc


def observation_increment(rho, L, eta: float, dW, dt: float):
    """dY = dW + sqrt(eta) tr((L + L^dag) rho) dt."""
    if not 0.0 < eta <= 1.0:
        raise EfficiencyOutOfRange(f"detector efficiency must lie in (0, 1], got {eta}")
    L = np.asarray(L, dtype=complex)
    signal = trace((L + dagger(L)) @ np.asarray(rho)).real
    return dW + math.sqrt(eta) * signal * dt


@dataclass
class TrajectoryRecord:
    """Recorded series of one sample path.

    ``dW`` and ``dY`` hold the increments accumulated since the previous
    record (zero at the first row); ``controls`` is the control evaluated on
    the recorded state.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    dW: np.ndarray
    dY: np.ndarray
    trace_error: np.ndarray
    min_eig: np.ndarray
    purity: np.ndarray
    projection_distance: np.ndarray
    state_columns: list[str] = field(default_factory=list)
    state_values: np.ndarray | None = None
    path: int = 0

    def __len__(self) -> int:
        return len(self.times)

    def table(self) -> tuple[list[str], np.ndarray]:
        cols = ["time"] + list(self.state_columns)
        blocks = [self.times[:, None], self.state_values]
        u = self.controls.reshape(len(self.times), -1)
        cols += ["u"] if u.shape[1] == 1 else [f"u_{j}" for j in range(u.shape[1])]
        blocks.append(u)
        n_ch = self.dW.shape[1]
        cols += [f"dW_{c}" for c in range(n_ch)] + [f"dY_{c}" for c in range(n_ch)]
        blocks += [self.dW, self.dY]
        cols += ["trace_error", "min_eig", "purity", "projection_distance"]
        blocks += [
            self.trace_error[:, None],
            self.min_eig[:, None],
            self.purity[:, None],
            self.projection_distance[:, None],
        ]
        return cols, np.hstack(blocks)

    def to_csv(self, path) -> Path:
        cols, data = self.table()
        path = Path(path)
        write_csv(path, cols, data)
        return path


def write_csv(path, columns, data) -> None:
    data = np.asarray(data, dtype=float)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in data:
            fh.write(",".join(CSV_FLOAT % v for v in row) + "\n")


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        cols = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return cols, data


@dataclass
class EnsembleResult:
    """Output of :func:`simulate`: per-step path means and selected records."""

    times: np.ndarray
    final: np.ndarray
    means: np.ndarray | None
    second_moments: np.ndarray | None
    records: list[TrajectoryRecord]
    n_paths: int

    def standard_errors(self) -> np.ndarray:
        """Standard error of the path mean; real and imaginary parts treated separately."""
        m = self.means
        denom = max(self.n_paths - 1, 1)
        var_re = np.clip(self.second_moments.real - m.real**2, 0.0, None)
        if not np.iscomplexobj(m):
            return np.sqrt(var_re / denom)
        var_im = np.clip(self.second_moments.imag - m.imag**2, 0.0, None)
        return np.sqrt(var_re / denom) + 1j * np.sqrt(var_im / denom)


class _Recorder:
    def __init__(self, model, paths, n_rows, state_shape, n_channels, n_controls):
        self.model = model
        self.paths = np.asarray(paths, dtype=int)
        p = len(self.paths)
        self.times = np.empty(n_rows)
        self.states = np.empty((n_rows, p) + state_shape, dtype=model.state_dtype)
        self.controls = np.zeros((n_rows, p, n_controls))
        self.dW = np.zeros((n_rows, p, n_channels))
        self.dY = np.zeros((n_rows, p, n_channels))
        self.trace_error = np.zeros((n_rows, p))
        self.projection_distance = np.zeros((n_rows, p))
        self._acc_w = np.zeros((p, n_channels))
        self._acc_y = np.zeros((p, n_channels))
        self._acc_tr = np.zeros(p)
        self._acc_dist = np.zeros(p)
        self.row = 0

    def accumulate(self, dW, dY, trace_err, dist):
        sel = self.paths
        self._acc_w += dW[sel]
        self._acc_y += dY[sel]
        self._acc_tr = np.maximum(self._acc_tr, trace_err[sel])
        self._acc_dist = np.maximum(self._acc_dist, dist[sel])

    def record(self, t, states, u):
        r = self.row
        self.times[r] = t
        self.states[r] = states[self.paths]
        if u is not None:
            self.controls[r] = np.asarray(u).reshape(len(states), -1)[self.paths]
        self.dW[r] = self._acc_w
        self.dY[r] = self._acc_y
        self.trace_error[r] = self._acc_tr
        self.projection_distance[r] = self._acc_dist
        self._acc_w = np.zeros_like(self._acc_w)
        self._acc_y = np.zeros_like(self._acc_y)
        self._acc_tr = np.zeros_like(self._acc_tr)
        self._acc_dist = np.zeros_like(self._acc_dist)
        self.row += 1

    def finish(self) -> list[TrajectoryRecord]:
        out = []
        for i, path in enumerate(self.paths):
            states = self.states[: self.row, i]
            names, values = self.model.state_columns(states)
            lam, pur = self.model.spectrum_summary(states)
            out.append(
                TrajectoryRecord(
                    times=self.times[: self.row].copy(),
                    states=states.copy(),
                    controls=self.controls[: self.row, i].squeeze(-1)
                    if self.controls.shape[-1] == 1
                    else self.controls[: self.row, i].copy(),
                    dW=self.dW[: self.row, i].copy(),
                    dY=self.dY[: self.row, i].copy(),
                    trace_error=self.trace_error[: self.row, i].copy(),
                    min_eig=lam,
                    purity=pur,
                    projection_distance=self.projection_distance[: self.row, i].copy(),
                    state_columns=names,
                    state_values=values,
                    path=int(path),
                )
            )
        return out


def _advance(model, states, dW, dt, u, mean, spectral, chunk):
    """Euler step and projection of every path, in blocks of ``chunk`` paths.

    The mean and controls are already fixed for the step and every operation
    is per path, so blocking only keeps the working set in cache.
    """
    p = len(states)
    if p <= chunk:
        raw = states + model.increment(states, dW, dt, u, mean)
        check_finite(raw)
        new, dist = model.project(raw, spectral=spectral, prev=states)
        return new, dist, model.trace_error(raw)
    new = np.empty_like(states)
    dist = np.empty(p)
    tr_err = np.empty(p)
    for lo in range(0, p, chunk):
        sl = slice(lo, lo + chunk)
        raw = states[sl] + model.increment(states[sl], dW[sl], dt, None if u is None else u[sl], mean)
        check_finite(raw)
        new[sl], dist[sl] = model.project(raw, spectral=spectral, prev=states[sl])
        tr_err[sl] = model.trace_error(raw)
    return new, dist, tr_err


def simulate(
    model,
    x0,
    grid: TimeGrid,
    noise: NoisePlan,
    record_every: int = 10,
    record_paths=None,
    track_mean: bool = True,
    on_step=None,
) -> EnsembleResult:
    """Step all paths of ``noise`` in lockstep from ``x0``.

    At every step the model's mean source (if any) is refreshed from the
    current states before any path advances, the control is evaluated on the
    current state, then each path takes one Euler-Maruyama step.  ``means``
    holds the path average at every grid point, reduced in ascending stream
    order so that relabelling paths leaves it bit-identical.
    """
    if noise.n_channels != model.n_channels:
        raise ValueError(f"model has {model.n_channels} channels, noise plan has {noise.n_channels}")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    p = noise.n_streams
    x0 = np.asarray(x0, dtype=model.state_dtype)
    if x0.shape == model.state_shape:
        states = np.broadcast_to(x0, (p,) + x0.shape).copy()
    elif x0.shape == (p,) + model.state_shape:
        states = x0.copy()
    else:
        raise ValueError(f"initial state shape {x0.shape} does not match model state {model.state_shape}")

    order = np.argsort(np.asarray(noise.streams), kind="stable")
    canonical = None if np.all(order == np.arange(p)) else order
    if getattr(model, "mean_source", None) is not None:
        model.mean_source.set_order(canonical)

    n = grid.n_steps
    dt = grid.dt
    times = grid.times
    record_paths = [] if record_paths is None else list(record_paths)
    n_rows = n // record_every + 1 + (1 if n % record_every else 0)
    rec = _Recorder(model, record_paths, n_rows, model.state_shape, model.n_channels, model.n_controls)

    means = second = None
    if track_mean:
        means = np.empty((n + 1,) + model.state_shape, dtype=model.state_dtype)
        second = np.empty_like(means)

    def reduce(k):
        ordered = states if canonical is None else states[canonical]
        # complex states are reduced through their (re, im) float view: one pass gives
        # the mean and the separate second moments of the real and imaginary parts
        flat = np.ascontiguousarray(ordered).view(float) if np.iscomplexobj(ordered) else ordered
        means[k] = (path_sum(flat) / p).view(means.dtype).reshape(means.shape[1:])
        second[k] = (path_sum(flat * flat) / p).view(second.dtype).reshape(second.shape[1:])

    chunk = max(1, CHUNK_BYTES // max(states[0].nbytes, 1))
    reader = noise.reader()
    try:
        mean = model.refresh_mean(0, states)
        u = model.controls(states, mean)
    except (EngineError, ValueError) as exc:
        raise StepError(0, exc) from exc
    if track_mean:
        reduce(0)
    if record_paths:
        rec.record(times[0], states, u)
    for k in range(n):
        recording = (k + 1) % record_every == 0 or k + 1 == n
        try:
            if on_step is not None:
                on_step(k, states, mean)
            dW = reader.next() if model.n_channels else np.zeros((p, 0))
            dY = model.observe(states, dW, dt)
            spectral = recording or (k + 1) % model.spectral_every == 0
            states, dist, tr_err = _advance(model, states, dW, dt, u, mean, spectral, chunk)
            # mean and control for the next step, always from the completed step-k+1 ensemble
            mean = model.refresh_mean(k + 1, states)
            u = model.controls(states, mean)
        except (EngineError, ValueError, np.linalg.LinAlgError) as exc:
            raise StepError(k, exc) from exc
        if track_mean:
            reduce(k + 1)
        if record_paths:
            rec.accumulate(dW, dY, tr_err, dist)
            if recording:
                rec.record(times[k + 1], states, u)
    return EnsembleResult(
        times=times,
        final=states,
        means=means,
        second_moments=second,
        records=rec.finish(),
        n_paths=p,
    )


def run_trajectory(model, x0, grid: TimeGrid, noise: NoisePlan, controller=None, record_every: int = 10):
    """Simulate the single path of ``noise`` and return its :class:`TrajectoryRecord`."""
    if noise.n_streams != 1:
        raise ValueError("run_trajectory needs a single-stream noise plan")
    if controller is not None:
        model = model.with_controller(controller)
    res = simulate(model, x0, grid, noise, record_every=record_every, record_paths=[0], track_mean=False)
    return res.records[0]
