"""Filter equations as drift/diffusion models consumable by :func:`mfbelavkin.sde.simulate`.

Every model exposes the same duck-typed interface: ``n_channels``,
``n_controls``, ``state_shape``, ``state_dtype``, ``spectral_every``,
``mean_source`` and the methods ``refresh_mean``, ``controls``, ``observe``,
``drift``, ``diffusion``, ``increment``, ``project``, ``trace_error``,
``state_columns``, ``spectrum_summary`` and ``with_controller``.  States are
always batched over a leading path axis.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .control import ControlLaw, zero_law
from .kernels import InteractionKernel, contract, photon_exchange_kernel
from .quantum import (
    SIGMA_X,
    SIGMA_Z,
    DimensionMismatch,
    NotHermitian,
    dagger,
    lmul,
    partial_traces,
    product_state,
    purity,
    rmul,
    trace,
)
from .sde import DEGENERATE_TRACE, DegenerateState, EfficiencyOutOfRange, path_sum, project_bloch, project_pure, project_state

PARAM_HERM_TOL = 1e-12
PURE_TOL = 1e-9  # a state with purity above 1 - PURE_TOL counts as pure for the retraction
MAX_ENTRIES = 4**10  # d^(2n) guard: ten qubits
CHUNK_ENTRIES = 1 << 16  # complex entries per working-set chunk in the N-particle update


class ModelError(ValueError):
    pass


class MissingMeanSource(ModelError):
    pass


class MissingKernel(ModelError):
    pass


class TooManyParticles(ModelError, MemoryError):
    pass


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Single-particle data: free Hamiltonian H, controlled Hamiltonian Hhat,
    measurement operator L, detector efficiency eta and an optional two-body kernel."""

    H: np.ndarray
    Hhat: np.ndarray
    L: np.ndarray
    eta: float = 1.0
    kernel: InteractionKernel | None = None

    def __post_init__(self):
        mats = {}
        for name in ("H", "Hhat", "L"):
            m = np.array(getattr(self, name), dtype=complex)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise DimensionMismatch(f"{name} must be a square matrix, got shape {m.shape}")
            m.flags.writeable = False
            mats[name] = m
            object.__setattr__(self, name, m)
        d = mats["H"].shape[0]
        if mats["Hhat"].shape[0] != d or mats["L"].shape[0] != d:
            raise DimensionMismatch("H, Hhat and L must share the dimension d")
        for name in ("H", "Hhat"):
            gap = float(np.max(np.abs(mats[name] - mats[name].conj().T)))
            if gap > PARAM_HERM_TOL:
                raise NotHermitian(gap, PARAM_HERM_TOL)
        if not 0.0 < self.eta <= 1.0:
            raise EfficiencyOutOfRange(f"detector efficiency must lie in (0, 1], got {self.eta}")
        if self.kernel is not None and self.kernel.d != d:
            raise DimensionMismatch(f"kernel has d = {self.kernel.d}, operators have d = {d}")

    @property
    def d(self) -> int:
        return self.H.shape[0]

    @classmethod
    def qubit(cls, eta: float = 1.0, kernel: InteractionKernel | None = None) -> ModelParams:
        """H = L = sigma_z, Hhat = sigma_x; photon-exchange kernel unless one is given."""
        return cls(SIGMA_Z, SIGMA_X, SIGMA_Z, eta, photon_exchange_kernel() if kernel is None else kernel)


# ---------------------------------------------------------------------------
# Mean sources: who supplies m_t to a mean-coupled model.


class EmpiricalMean:
    """Arithmetic mean of the current ensemble, recomputed once per step.

    ``version`` is the step index of the ensemble the current value was
    computed from; ``order`` fixes the summation order so the result does not
    depend on how paths are labelled.
    """

    def __init__(self):
        self.version = -1
        self.value = None
        self._order = None

    def set_order(self, order) -> None:
        self._order = None if order is None else np.asarray(order)

    def update(self, k: int, states) -> np.ndarray:
        ordered = states if self._order is None else states[self._order]
        self.value = path_sum(ordered) / len(ordered)
        self.version = k
        return self.value


class FlowMean:
    """A prescribed mean flow, one value per grid point (a frozen Picard iterate)."""

    def __init__(self, values):
        self.values = np.asarray(values)
        self.version = -1

    def set_order(self, order) -> None:
        pass

    def update(self, k: int, states) -> np.ndarray:
        if k >= len(self.values):
            raise IndexError(f"mean flow has {len(self.values)} points, step {k} requested")
        self.version = k
        return self.values[k]


class SelfMean:
    """m_t = gamma_t on every path: each particle couples to itself."""

    version = -1

    def set_order(self, order) -> None:
        pass

    def update(self, k: int, states) -> np.ndarray:
        self.version = k
        return states


# ---------------------------------------------------------------------------


class _Model:
    n_channels = 1
    n_controls = 1
    state_dtype = complex
    spectral_every = 1
    mean_source = None
    controller: ControlLaw

    def with_controller(self, controller: ControlLaw | None):
        out = copy.copy(self)
        out.controller = zero_law() if controller is None else controller
        return out

    def refresh_mean(self, k: int, states):
        if self.mean_source is None:
            return None
        return self.mean_source.update(k, states)

    def controls(self, states, mean=None):
        if self.controller.is_zero:
            return None
        return self.controller.evaluate(states)

    def increment(self, states, dW, dt: float, u=None, mean=None):
        a = self.drift(states, u, mean)
        if not self.n_channels:
            return a * dt
        b = self.diffusion(states, u, mean)
        pad = (None,) * (b.ndim - 2)
        return a * dt + np.sum(dW[(...,) + pad] * b, axis=1)

    retract_pure = False

    def project(self, raw, spectral: bool = True, prev=None):
        """Back to S_d after a step.

        Models with ``retract_pure`` (perfect detection, where the exact
        filter keeps pure states pure) map steps taken from a pure state onto
        the nearest pure state; everything else is Hermitized, clipped and
        renormalized.
        """
        if not (self.retract_pure and spectral and prev is not None):
            return project_state(raw, spectral=spectral, return_distance=True)
        pure = purity(prev) > 1.0 - PURE_TOL
        if not np.any(pure):
            return project_state(raw, spectral=True, return_distance=True)
        if np.all(pure):
            return project_pure(raw, return_distance=True)
        out = np.empty_like(raw)
        dist = np.empty(len(raw))
        out[pure], dist[pure] = project_pure(raw[pure], return_distance=True)
        out[~pure], dist[~pure] = project_state(raw[~pure], spectral=True, return_distance=True)
        return out, dist

    def trace_error(self, raw):
        return np.abs(trace(raw) - 1.0)

    def spectrum_summary(self, states):
        lam = np.linalg.eigvalsh(0.5 * (states + dagger(states)))[..., 0]
        return lam, purity(states)

    def state_columns(self, states):
        d = states.shape[-1]
        names, cols = [], []
        if d == 2:
            names += ["x", "y", "z"]
            cols += [2 * states[:, 0, 1].real, -2 * states[:, 0, 1].imag, (states[:, 0, 0] - states[:, 1, 1]).real]
        for a in range(d):
            for b in range(d):
                names += [f"re_{a}{b}", f"im_{a}{b}"]
                cols += [states[:, a, b].real, states[:, a, b].imag]
        return names, np.stack(cols, axis=1)


class BelavkinSingle(_Model):
    """Single-particle filter for the conditional state of one measured system."""

    def __init__(self, params: ModelParams, controller: ControlLaw | None = None):
        self.params = params
        self.controller = zero_law() if controller is None else controller
        d = params.d
        self.state_shape = (d, d)
        self.retract_pure = params.eta == 1.0
        self._sqrt_eta = math.sqrt(params.eta)
        self._Ld = dagger(params.L)
        self._LdL = self._Ld @ params.L
        self._Lsum = params.L + dagger(params.L)
        # superoperators on row-major vec(rho): vec(a rho b) = kron(a, b.T) vec(rho)
        eye = np.eye(d)
        self._dissipator = (
            np.kron(params.L, params.L.conj())
            - 0.5 * (np.kron(self._LdL, eye) + np.kron(eye, self._LdL.T))
        )
        self._control_op = -1j * (np.kron(params.Hhat, eye) - np.kron(eye, params.Hhat.T))
        self._noise_op = np.kron(params.L, eye) + np.kron(eye, self._Ld.T)
        self._signal_vec = self._Lsum.T.reshape(-1)

    def hamiltonian(self, states, u=None, mean=None):
        """The Hamiltonian: one (d, d) matrix when it is the same on every path."""
        p = self.params
        h = p.H
        if u is not None:
            h = h + np.asarray(u)[..., None, None] * p.Hhat
        return h

    def generator(self, h):
        """Superoperator of the drift for a fixed Hamiltonian h, acting on row-major vec(rho)."""
        d = len(h)
        eye = np.eye(d)
        # kron(h, I) - kron(I, h^T) as a broadcast outer product (np.kron is slow on tiny inputs)
        comm = (h[:, None, :, None] * eye[None, :, None, :] - eye[:, None, :, None] * h.T[None, :, None, :])
        return -1j * comm.reshape(d * d, d * d) + self._dissipator

    def drift(self, states, u=None, mean=None):
        states = np.asarray(states)
        h = self.hamiltonian(states, None, mean)
        if h.ndim == 2:
            flat = states.reshape(-1, h.size)
            out = flat @ self.generator(h).T
            if u is not None:
                out += np.reshape(u, (-1, 1)) * (flat @ self._control_op.T)
            return out.reshape(states.shape)
        p = self.params
        comm = h @ states - states @ h
        if u is not None:
            comm = comm + np.asarray(u)[..., None, None] * (lmul(p.Hhat, states) - rmul(states, p.Hhat))
        return (
            -1j * comm
            + rmul(lmul(p.L, states), self._Ld)
            - 0.5 * (lmul(self._LdL, states) + rmul(states, self._LdL))
        )

    def signal(self, states):
        """tr((L + L^dag) rho), one value per path and channel."""
        flat = np.asarray(states).reshape(-1, self._signal_vec.size)
        return (flat @ self._signal_vec).real.reshape(np.shape(states)[:-2] + (1,))

    def _noise_flat(self, flat):
        s = (flat @ self._signal_vec).real
        return flat @ self._noise_op.T - s[:, None] * flat

    def diffusion(self, states, u=None, mean=None):
        states = np.asarray(states)
        b = self._noise_flat(states.reshape(-1, self._signal_vec.size))
        return (self._sqrt_eta * b).reshape((-1, 1) + self.state_shape)

    def increment(self, states, dW, dt: float, u=None, mean=None):
        states = np.asarray(states)
        if not self.n_channels:
            return super().increment(states, dW, dt, u, mean)
        h = self.hamiltonian(states, None, mean)
        if h.ndim != 2:
            return super().increment(states, dW, dt, u, mean)
        flat = states.reshape(-1, h.size)
        out = flat @ (dt * self.generator(h)).T
        if u is not None:
            out += (dt * np.reshape(u, (-1, 1))) * (flat @ self._control_op.T)
        out += (self._sqrt_eta * np.reshape(dW, (-1, 1))) * self._noise_flat(flat)
        return out.reshape(states.shape)

    def observe(self, states, dW, dt: float):
        return dW + self._sqrt_eta * self.signal(states) * dt


class BelavkinMeanField(BelavkinSingle):
    """Mean-field filter: the Hamiltonian gains A^m for an externally supplied mean m."""

    def __init__(self, params: ModelParams, controller: ControlLaw | None = None, mean_source=None):
        super().__init__(params, controller)
        self.mean_source = mean_source
        self.coupled = params.kernel is not None and not params.kernel.is_zero
        if self.coupled and mean_source is None:
            raise MissingMeanSource("a nonzero kernel needs a mean source")

    def hamiltonian(self, states, u=None, mean=None):
        h = super().hamiltonian(states, u)
        if self.coupled:
            if mean is None:
                raise MissingMeanSource("mean-coupled model stepped without a mean")
            h = h + contract(self.params.kernel, mean)
        return h


class LindbladMeanODE(BelavkinMeanField):
    """dm/dt = -i[H + A^m, m] + L m L^dag - 1/2 {L^dag L, m}: the uncontrolled mean equation.

    Runs through :func:`simulate` as a zero-channel model (Euler) or through
    :meth:`integrate` with classical fourth-order Runge-Kutta.
    """

    n_channels = 0
    n_controls = 1

    def __init__(self, params: ModelParams):
        super().__init__(params, None, SelfMean())
        self.retract_pure = False

    def with_controller(self, controller):
        if controller is not None and not controller.is_zero:
            raise ModelError("the mean equation holds without control only")
        return self

    def refresh_mean(self, k, states):
        return None

    def drift(self, states, u=None, mean=None):
        return super().drift(states, None, states)

    def observe(self, states, dW, dt):
        return np.zeros((len(states), 0))

    def rhs(self, m):
        return self.drift(np.asarray(m, dtype=complex)[None])[0]

    def integrate(self, m0, grid) -> np.ndarray:
        """RK4 values at every point of ``grid``, shape (n_steps + 1, d, d)."""
        m = np.asarray(m0, dtype=complex)
        dt = grid.dt
        out = np.empty((grid.n_steps + 1,) + m.shape, dtype=complex)
        out[0] = m
        for k in range(grid.n_steps):
            k1 = self.rhs(m)
            k2 = self.rhs(m + 0.5 * dt * k1)
            k3 = self.rhs(m + 0.5 * dt * k2)
            k4 = self.rhs(m + dt * k3)
            m = m + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            out[k + 1] = m
        return out


class QubitMeanFieldBloch(_Model):
    """Qubit mean-field filter in Bloch coordinates, H = L = sigma_z, Hhat = sigma_x.

    ``form="paper"`` uses the published coordinate equations as displayed:

        dx = (-y - x + z E[y]) dt - sqrt(eta) x z dW
        dy = (x - y + u z - z E[x]) dt + sqrt(eta) y z dW
        dz = (-u x + y E[x] + x E[y]) dt + sqrt(eta) (1 - z^2) dW

    ``form="derived"`` is the exact Pauli projection of the matrix mean-field
    filter with the photon-exchange kernel:

        dx = (-2y - 2x + z E[y]) dt - 2 sqrt(eta) x z dW
        dy = (2x - 2y - 2u z - z E[x]) dt - 2 sqrt(eta) y z dW
        dz = (2u y + y E[x] - x E[y]) dt + 2 sqrt(eta) (1 - z^2) dW

    With ``coupled=False`` the E-terms are dropped.
    """

    state_dtype = float
    state_shape = (3,)
    FORMS = ("paper", "derived")

    def __init__(
        self,
        eta: float = 1.0,
        controller: ControlLaw | None = None,
        mean_source=None,
        form: str = "paper",
        coupled: bool = True,
    ):
        if not 0.0 < eta <= 1.0:
            raise EfficiencyOutOfRange(f"detector efficiency must lie in (0, 1], got {eta}")
        if form not in self.FORMS:
            raise ModelError(f"unknown Bloch form {form!r}; choose from {self.FORMS}")
        if coupled and mean_source is None:
            raise MissingMeanSource("coupled Bloch model needs a mean source")
        self.eta = eta
        self.form = form
        self.retract_pure = eta == 1.0 and form == "derived"
        self.coupled = coupled
        self.mean_source = mean_source if coupled else None
        self.controller = zero_law() if controller is None else controller
        self._sqrt_eta = math.sqrt(eta)

    def controls(self, states, mean=None):
        if self.controller.is_zero:
            return None
        return self.controller.evaluate(_bloch_to_rho(states))

    def _parts(self, states, u, mean):
        x, y, z = states[..., 0], states[..., 1], states[..., 2]
        u = 0.0 if u is None else np.asarray(u)
        if self.coupled:
            if mean is None:
                raise MissingMeanSource("coupled Bloch model stepped without a mean")
            mean = np.asarray(mean)
            ex, ey = mean[..., 0], mean[..., 1]
        else:
            ex = ey = 0.0
        return x, y, z, u, ex, ey

    def drift(self, states, u=None, mean=None):
        x, y, z, u, ex, ey = self._parts(states, u, mean)
        if self.form == "paper":
            cols = (-y - x + z * ey, x - y + u * z - z * ex, -u * x + y * ex + x * ey)
        else:
            cols = (-2 * y - 2 * x + z * ey, 2 * x - 2 * y - 2 * u * z - z * ex, 2 * u * y + y * ex - x * ey)
        return np.stack(np.broadcast_arrays(*cols), axis=-1)

    def diffusion(self, states, u=None, mean=None):
        x, y, z = states[..., 0], states[..., 1], states[..., 2]
        if self.form == "paper":
            b = np.stack([-x * z, y * z, 1 - z * z], axis=-1)
        else:
            b = 2.0 * np.stack([-x * z, -y * z, 1 - z * z], axis=-1)
        return (self._sqrt_eta * b)[:, None]

    def observe(self, states, dW, dt):
        # tr((L + L^dag) rho) = 2 z for L = sigma_z
        return dW + self._sqrt_eta * 2.0 * states[:, 2:3] * dt

    def project(self, raw, spectral: bool = True, prev=None):
        """Radial clip onto the unit ball; for eta = 1 in the derived form, unit vectors stay unit."""
        if self.retract_pure and prev is not None:
            on_sphere = np.abs(np.einsum("...i,...i->...", prev, prev) - 1.0) < PURE_TOL
            if np.any(on_sphere):
                norm = np.sqrt(np.einsum("...i,...i->...", raw, raw))
                if np.any(norm[on_sphere] < DEGENERATE_TRACE):
                    raise DegenerateState("Bloch vector collapsed to the origin")
                scale = np.where(on_sphere | (norm > 1.0), 1.0 / np.maximum(norm, DEGENERATE_TRACE), 1.0)
                return raw * scale[..., None], np.abs(norm - 1.0) * (scale != 1.0)
        return project_bloch(raw, return_distance=True)

    def trace_error(self, raw):
        return np.zeros(len(raw))

    def spectrum_summary(self, states):
        r2 = np.sum(states**2, axis=-1)
        return 0.5 * (1 - np.sqrt(r2)), 0.5 * (1 + r2)

    def state_columns(self, states):
        return ["x", "y", "z"], np.asarray(states, dtype=float)


def _bloch_to_rho(v):
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    rho = np.empty(v.shape[:-1] + (2, 2), dtype=complex)
    rho[..., 0, 0] = 0.5 * (1 + z)
    rho[..., 1, 1] = 0.5 * (1 - z)
    rho[..., 0, 1] = 0.5 * (x - 1j * y)
    rho[..., 1, 0] = 0.5 * (x + 1j * y)
    return rho


def _is_diagonal(m) -> bool:
    return not np.any(m - np.diag(np.diag(m)))


def _entries(m) -> list[tuple[int, int, complex]]:
    return [(int(a), int(b), complex(m[a, b])) for a, b in zip(*np.nonzero(m))]


class _ParticleOps:
    """Left actions of one- and two-body operator sums on arrays of shape (P, d^n, ...).

    The trailing axes are whatever follows the row index: a column index for
    density matrices, nothing for state vectors.  Operators are applied entry
    by entry on slices, which beats a batched matmul for the sparse 2 x 2
    factors of the qubit models.

    Pair sums use A = sum_r U_r x W_r, for which

        sum_{i<j} A_ij = 1/2 [ sum_r S(U_r) S(W_r) - S(sum_r U_r W_r) ],   S(X) = sum_j X_j,

    so the cost is O(n) slot applications instead of O(n^2).
    """

    def __init__(self, params: ModelParams, n: int):
        self.n = n
        self.d = d = params.d
        self.D = d**n
        digits = (np.arange(self.D)[:, None] // d ** np.arange(n - 1, -1, -1)[None, :]) % d  # (D, n)
        self.h_diag = _is_diagonal(params.H)
        self.l_diag = _is_diagonal(params.L)
        self.hvec = np.diag(params.H).real[digits].sum(axis=1) if self.h_diag else None
        self.lvec = np.diag(params.L)[digits] if self.l_diag else None  # eigenvalue of L_j on basis state a
        self.H = _entries(params.H)
        self.Hhat = _entries(params.Hhat)
        self.L = _entries(params.L)
        self.LdL = _entries(dagger(params.L) @ params.L)
        kern = params.kernel
        self.hermitian = kern is None or kern.is_hermitian
        self.pairs, self.pairs_adj = [], []
        if kern is not None and n >= 2 and not kern.is_zero:
            terms = kern.pair_terms()
            self.pairs = [(_entries(u), _entries(w)) for u, w in terms]
            self.pair_self = _entries(sum(u @ w for u, w in terms))
            adj = [(dagger(u), dagger(w)) for u, w in terms]
            self.pairs_adj = [(_entries(u), _entries(w)) for u, w in adj]
            self.pair_self_adj = _entries(sum(u @ w for u, w in adj))

    def acc(self, out, entries, x, j, scale=1.0):
        """out += scale * X_j x for the operator X given by ``entries``; ``scale`` may be per path."""
        shape = (len(x), self.d**j, self.d, -1)
        ov = out.reshape(shape)
        xv = x.reshape(shape)
        per_path = np.ndim(scale) > 0
        if per_path:
            scale = np.asarray(scale)[:, None, None]
        for a, b, c in entries:
            src = xv[:, :, b, :]
            if per_path:
                ov[:, :, a, :] += (c * scale) * src
            elif c * scale == 1.0:
                ov[:, :, a, :] += src
            else:
                ov[:, :, a, :] += (c * scale) * src
        return out

    def sum_left(self, entries, x, scale=1.0, out=None):
        out = np.zeros_like(x) if out is None else out
        for j in range(self.n):
            self.acc(out, entries, x, j, scale)
        return out

    def row_scale(self, v, x):
        return v.reshape((self.D,) + (1,) * (x.ndim - 2)) * x

    def hamiltonian_left(self, x, u=None, adjoint=False):
        """Htot x (or Htot^dag x) with Htot = sum_j (H_j + u_j Hhat_j) + sum_{i<j} A_ij / n."""
        x = np.ascontiguousarray(x)
        if self.h_diag:
            out = self.row_scale(self.hvec.astype(complex), x)
        else:
            out = self.sum_left(self.H, x)
        if u is not None:
            for j in range(self.n):
                self.acc(out, self.Hhat, x, j, u[:, j])
        pairs = self.pairs_adj if adjoint else self.pairs
        if pairs:
            half = 0.5 / self.n
            for uu, ww in pairs:
                self.sum_left(uu, self.sum_left(ww, x), half, out)
            self.sum_left(self.pair_self_adj if adjoint else self.pair_self, x, -half, out)
        return out

    def marginals_from_vectors(self, psi):
        out = np.empty((len(psi), self.n, self.d, self.d), dtype=complex)
        for j in range(self.n):
            v = psi.reshape(len(psi), self.d**j, self.d, -1)
            out[:, j] = np.einsum("pxar,pxbr->pab", v, v.conj())
        return out


def _bloch_columns(marg, n, d):
    names, cols = [], []
    if d == 2:
        for j in range(n):
            m = marg[:, j]
            names += [f"x_{j}", f"y_{j}", f"z_{j}"]
            cols += [2 * m[:, 0, 1].real, -2 * m[:, 0, 1].imag, (m[:, 0, 0] - m[:, 1, 1]).real]
    else:
        for j in range(n):
            for a in range(d):
                for b in range(d):
                    names += [f"re_{j}_{a}{b}", f"im_{j}_{a}{b}"]
                    cols += [marg[:, j, a, b].real, marg[:, j, a, b].imag]
    return names, np.stack(cols, axis=1)


class _NParticleBase(_Model):
    def __init__(self, params: ModelParams, n: int, controller: ControlLaw | None = None):
        if n < 1:
            raise ModelError("need at least one particle")
        d = params.d
        if d ** (2 * n) > MAX_ENTRIES:
            raise TooManyParticles(f"d^(2n) = {d}^{2 * n} entries exceeds the budget of {MAX_ENTRIES}")
        if n >= 2 and params.kernel is None:
            raise MissingKernel("an interacting system of n >= 2 particles needs a kernel")
        self.params = params
        self.n = n
        self.d = d
        self.D = d**n
        self.n_channels = n
        self.n_controls = n
        self.controller = zero_law() if controller is None else controller
        self._sqrt_eta = math.sqrt(params.eta)
        self.ops = _ParticleOps(params, n)
        self._Lsum = params.L + dagger(params.L)

    def controls(self, states, mean=None):
        if self.controller.is_zero:
            return None
        return self.controller.evaluate(self.marginals(states))

    def observe(self, states, dW, dt):
        return dW + self._sqrt_eta * self.signal(states) * dt

    def state_columns(self, states):
        return _bloch_columns(self.marginals(states), self.n, self.d)

    def _chunks(self, p):
        step = max(1, CHUNK_ENTRIES // int(np.prod(self.state_shape)))
        return [slice(i, min(i + step, p)) for i in range(0, p, step)]

    def increment(self, states, dW, dt, u=None, mean=None):
        out = np.empty_like(states)
        for sl in self._chunks(len(states)):
            x = states[sl]
            a = self._drift_chunk(x, None if u is None else u[sl])
            a *= dt
            a += self._sqrt_eta * self._noise_chunk(x, dW[sl])
            out[sl] = a
        return out

    def drift(self, states, u=None, mean=None):
        out = np.empty_like(states)
        for sl in self._chunks(len(states)):
            out[sl] = self._drift_chunk(states[sl], None if u is None else u[sl])
        return out

    def diffusion(self, states, u=None, mean=None):
        p = len(states)
        out = np.empty((p, self.n) + states.shape[1:], dtype=complex)
        for j in range(self.n):
            e = np.zeros((p, self.n))
            e[:, j] = 1.0
            out[:, j] = self._sqrt_eta * self._noise_chunk(states, e)
        return out


class BelavkinNParticle(_NParticleBase):
    """Joint filter of n particles with one measurement channel each, on d^n x d^n density matrices.

    Total Hamiltonian sum_j (H_j + u(rho^j) Hhat_j) + sum_{i<j} A_ij / n,
    with u evaluated on the single-particle marginals.  Operators act on
    tensor slots of the state and no d^n x d^n operator is ever built.
    Diagonal H and L (as in the qubit example) become elementwise products.
    Between spectral projections the state is only Hermitized and
    renormalized; a full eigenvalue clip runs every ``spectral_every`` steps
    and at every recorded step.
    """

    def __init__(self, params: ModelParams, n: int, controller: ControlLaw | None = None, spectral_every: int = 100):
        super().__init__(params, n, controller)
        self.state_shape = (self.D, self.D)
        self.spectral_every = spectral_every
        ops = self.ops
        if ops.l_diag:
            lv = ops.lvec
            sq = (np.abs(lv) ** 2).sum(axis=1)
            self._F = lv @ lv.conj().T - 0.5 * (sq[:, None] + sq[None, :])
            self._lsum = 2.0 * lv.real

    def marginals(self, states):
        return partial_traces(states, self.n, self.d)

    def signal(self, states):
        """tr((L_j + L_j^dag) rho) for every particle j, shape (P, n)."""
        if self.ops.l_diag:
            return np.einsum("...aa->...a", states).real @ self._lsum
        return np.einsum("ij,...ji->...", self._Lsum, self.marginals(states)).real

    def _dissipator(self, rho):
        if self.ops.l_diag:
            return self._F * rho
        ops = self.ops
        out = np.zeros_like(rho)
        for j in range(self.n):
            lr = ops.acc(np.zeros_like(rho), ops.L, rho, j)
            out += dagger(ops.acc(np.zeros_like(rho), ops.L, np.ascontiguousarray(dagger(lr)), j))
        g = ops.sum_left(ops.LdL, rho)
        return out - 0.5 * (g + dagger(g))

    def _drift_chunk(self, rho, u):
        rho = np.ascontiguousarray(rho)
        x = self.ops.hamiltonian_left(rho, u)
        if self.ops.hermitian:
            comm = x - dagger(x)
        else:
            comm = x - dagger(self.ops.hamiltonian_left(dagger(rho), u, adjoint=True))
        out = self._dissipator(rho)
        out -= 1j * comm
        return out

    def _noise_chunk(self, rho, dW):
        """sum_j dW_j (L_j rho + rho L_j^dag - s_j rho), without the sqrt(eta) factor."""
        s = (self.signal(rho) * dW).sum(axis=1)
        if self.ops.l_diag:
            v = dW @ self.ops.lvec.T  # (P, D)
            return (v[:, :, None] + v.conj()[:, None, :] - s[:, None, None]) * rho
        y = np.zeros_like(rho)
        rho = np.ascontiguousarray(rho)
        for j in range(self.n):
            self.ops.acc(y, self.ops.L, rho, j, dW[:, j])
        return y + dagger(y) - s[:, None, None] * rho

    def initial_state(self, rho0) -> np.ndarray:
        """rho0 tensored n times."""
        rho0 = np.asarray(rho0, dtype=complex)
        if rho0.shape != (self.d, self.d):
            raise DimensionMismatch(f"initial single-particle state must be {self.d} x {self.d}")
        return product_state(rho0, self.n)


class BelavkinNParticleVector(_NParticleBase):
    """The same n-particle filter for eta = 1 and pure states, carried as state vectors.

    With perfect detection a pure state stays pure and rho = psi psi^dag
    solves the filter when

        dpsi = [-i Htot - 1/2 sum_j (L_j^dag L_j - 2 l_j L_j + l_j^2)] psi dt + sum_j (L_j - l_j) psi dW_j,

    l_j = Re <psi|L_j|psi>.  A step costs O(n d^n) instead of O(n d^(2n)).
    The vector is renormalized after every step.
    """

    state_dtype = complex

    def __init__(self, params: ModelParams, n: int, controller: ControlLaw | None = None):
        if params.eta != 1.0:
            raise ModelError("the state-vector form needs perfect detection, eta = 1")
        super().__init__(params, n, controller)
        if not self.ops.hermitian:
            raise ModelError("the state-vector form needs a Hermitian kernel")
        self.state_shape = (self.D,)
        if self.ops.l_diag:
            self._lsq = (np.abs(self.ops.lvec) ** 2).sum(axis=1)

    def marginals(self, states):
        return self.ops.marginals_from_vectors(states)

    def ell(self, psi):
        """Re <L_j> for every particle j, shape (P, n)."""
        if self.ops.l_diag:
            return (np.abs(psi) ** 2) @ self.ops.lvec.real
        return np.einsum("ij,...ji->...", self.params.L, self.marginals(psi)).real

    def signal(self, states):
        return 2.0 * self.ell(states)

    def _drift_chunk(self, psi, u):
        ops = self.ops
        psi = np.ascontiguousarray(psi)
        out = -1j * ops.hamiltonian_left(psi, u)
        ell = self.ell(psi)
        if ops.l_diag:
            out += (-0.5 * self._lsq[None, :] + ell @ ops.lvec.T - 0.5 * (ell**2).sum(axis=1)[:, None]) * psi
        else:
            ops.sum_left(ops.LdL, psi, -0.5, out)
            for j in range(self.n):
                ops.acc(out, ops.L, psi, j, ell[:, j])
            out -= 0.5 * (ell**2).sum(axis=1)[:, None] * psi
        return out

    def _noise_chunk(self, psi, dW):
        ell = self.ell(psi)
        s = (ell * dW).sum(axis=1)[:, None]
        if self.ops.l_diag:
            return (dW @ self.ops.lvec.T - s) * psi
        y = np.zeros_like(psi)
        psi = np.ascontiguousarray(psi)
        for j in range(self.n):
            self.ops.acc(y, self.ops.L, psi, j, dW[:, j])
        return y - s * psi

    def project(self, raw, spectral: bool = True, prev=None):
        norm = np.linalg.norm(raw, axis=-1, keepdims=True)
        if np.any(norm < DEGENERATE_TRACE):
            raise DegenerateState(f"state-vector norm {np.min(norm):.3e} below {DEGENERATE_TRACE}")
        out = raw / norm
        return out, np.linalg.norm(out - raw, axis=-1)

    def trace_error(self, raw):
        return np.abs(np.sum(np.abs(raw) ** 2, axis=-1) - 1.0)

    def spectrum_summary(self, states):
        p = np.sum(np.abs(states) ** 2, axis=-1) ** 2
        return np.zeros(len(states)) if self.D > 1 else p, p

    def initial_state(self, rho0) -> np.ndarray:
        """Leading eigenvector of the pure state rho0, tensored n times."""
        rho0 = np.asarray(rho0, dtype=complex)
        if rho0.shape != (self.d, self.d):
            raise DimensionMismatch(f"initial single-particle state must be {self.d} x {self.d}")
        w, v = np.linalg.eigh(rho0)
        if w[-1] < 1.0 - 1e-9:
            raise ModelError(f"state-vector form needs a pure initial state, purity {float(purity(rho0)):.6g}")
        psi = v[:, -1]
        out = psi
        for _ in range(self.n - 1):
            out = np.kron(out, psi)
        return out

    @staticmethod
    def to_density(psi):
        return psi[..., :, None] * np.conj(psi[..., None, :])


# ---------------------------------------------------------------------------
# Constructors and the name registry


def belavkin_single(params: ModelParams, controller: ControlLaw | None = None) -> BelavkinSingle:
    return BelavkinSingle(params, controller)


def belavkin_meanfield(params: ModelParams, controller=None, mean_source=None) -> BelavkinMeanField:
    return BelavkinMeanField(params, controller, mean_source)


def belavkin_nparticle(params: ModelParams, n: int, controller=None, spectral_every: int = 100, representation="density"):
    """``representation="vector"`` selects the state-vector form (eta = 1, pure states only)."""
    if representation == "vector":
        return BelavkinNParticleVector(params, n, controller)
    if representation != "density":
        raise ModelError(f"unknown representation {representation!r}")
    return BelavkinNParticle(params, n, controller, spectral_every)


def qubit_meanfield_bloch(eta=1.0, controller=None, mean_source=None, form="paper", coupled=True):
    return QubitMeanFieldBloch(eta, controller, mean_source, form, coupled)


def lindblad_mean_ode(params: ModelParams) -> LindbladMeanODE:
    return LindbladMeanODE(params)


def nqubit_system(n: int, eta: float = 1.0, controller=None, spectral_every: int = 100, representation="density"):
    """n qubits with H_j = L_j = sigma_z^j, Hhat_j = sigma_x^j and photon-exchange pairs."""
    return belavkin_nparticle(ModelParams.qubit(eta), n, controller, spectral_every, representation)


MODEL_NAMES = ("single", "nparticle", "meanfield", "meanfield-bloch", "lindblad-mean", "nqubit")


def make_model(name: str, params: ModelParams | None = None, **kw):
    """Build a model by its config name.

    Keyword arguments are passed to the constructor: ``controller``,
    ``mean_source``, ``n``, ``form``, ``coupled``, ``spectral_every``,
    ``representation``.
    """
    params = ModelParams.qubit() if params is None else params
    if name == "single":
        return belavkin_single(params, kw.get("controller"))
    if name == "meanfield":
        return belavkin_meanfield(params, kw.get("controller"), kw.get("mean_source"))
    if name == "nparticle":
        return belavkin_nparticle(
            params, kw["n"], kw.get("controller"), kw.get("spectral_every", 100), kw.get("representation", "density")
        )
    if name == "nqubit":
        return nqubit_system(
            kw["n"], params.eta, kw.get("controller"), kw.get("spectral_every", 100), kw.get("representation", "density")
        )
    if name == "meanfield-bloch":
        return qubit_meanfield_bloch(
            params.eta, kw.get("controller"), kw.get("mean_source"), kw.get("form", "paper"), kw.get("coupled", True)
        )
    if name == "lindblad-mean":
        return lindblad_mean_ode(params)
    raise ModelError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
