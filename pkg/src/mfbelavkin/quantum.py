"""Density-matrix algebra: validation, Pauli/Bloch maps, tensor-slot operators.

All functions accept arrays with arbitrary leading batch axes; the last two
axes hold the matrix.  Particles are indexed from 0 and particle 0 is the
slowest-varying tensor index, so the joint basis state |i_0 i_1 ... i_{n-1}>
sits at flat index sum_j i_j d^(n-1-j) (the ``np.kron`` ordering).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HERM_TOL = 1e-9
TRACE_TOL = 1e-9
PSD_TOL = 1e-9
BLOCH_TOL = 1e-9

IDENTITY2 = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = np.stack([SIGMA_X, SIGMA_Y, SIGMA_Z])

# sigma_z eigenstates; rho_g has Bloch z = +1, rho_e has z = -1
RHO_G = np.array([[1, 0], [0, 0]], dtype=complex)
RHO_E = np.array([[0, 0], [0, 1]], dtype=complex)

PRESETS = {
    "I": IDENTITY2,
    "sigma_x": SIGMA_X,
    "sigma_y": SIGMA_Y,
    "sigma_z": SIGMA_Z,
    "rho_g": RHO_G,
    "rho_e": RHO_E,
    "zero": np.zeros((2, 2), dtype=complex),
}


class InvalidState(ValueError):
    """A matrix failed one of the density-matrix invariants."""

    def __init__(self, invariant: str, violation: float, tol: float):
        self.invariant = invariant
        self.violation = float(violation)
        self.tol = tol
        super().__init__(f"{invariant}: measured violation {self.violation:.3e} exceeds tolerance {tol:.1e}")


class NotHermitian(InvalidState):
    def __init__(self, violation, tol):
        super().__init__("hermiticity ||m - m^dag||_F", violation, tol)


class NotTraceOne(InvalidState):
    def __init__(self, violation, tol):
        super().__init__("unit trace |tr(m) - 1|", violation, tol)


class NotPSD(InvalidState):
    def __init__(self, violation, tol):
        super().__init__("positivity -lambda_min", violation, tol)


class DimensionMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class DuplicateIndex(ValueError):
    pass


class BlochNormExceeded(ValueError):
    pass


def dagger(a):
    return np.conj(np.swapaxes(a, -1, -2))


def lmul(c, a):
    """c @ a for one (d, d) matrix c and a batch a (..., d, d), as a single GEMM."""
    a = np.asarray(a)
    if a.ndim == 2:
        return c @ a
    d = a.shape[-1]
    flat = np.moveaxis(a.reshape(-1, d, d), 1, 0).reshape(d, -1)
    return np.moveaxis((c @ flat).reshape(d, -1, d), 0, 1).reshape(a.shape)


def rmul(a, c):
    """a @ c for a batch a (..., d, d) and one (d, d) matrix c, as a single GEMM."""
    a = np.asarray(a)
    return (a.reshape(-1, a.shape[-1]) @ c).reshape(a.shape[:-1] + (c.shape[-1],))


def commutator(a, b):
    return a @ b - b @ a


def anticommutator(a, b):
    return a @ b + b @ a


def trace(a):
    return np.trace(a, axis1=-2, axis2=-1)


def frobenius(a):
    """Frobenius norm over the last two axes."""
    return np.sqrt(np.sum(np.abs(a) ** 2, axis=(-2, -1)))


def spectral_norm(a):
    return np.linalg.norm(a, ord=2, axis=(-2, -1))


def hermitian_part(m):
    return 0.5 * (m + dagger(m))


def purity(rho):
    # tr(rho^2) = sum |rho_ij|^2 for Hermitian rho
    return np.sum(np.abs(rho) ** 2, axis=(-2, -1))


def _as_square(m) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionMismatch(f"expected square matrices, got shape {m.shape}")
    return m


def validate_density(m, tol: float = HERM_TOL) -> np.ndarray:
    """Return a read-only copy of ``m`` if it is a density matrix at ``tol``.

    Checks, in order, Hermiticity, unit trace and positivity; the first
    violated invariant is raised with the worst violation over the batch.
    """
    m = _as_square(m)
    herm = np.max(frobenius(m - dagger(m)))
    if herm > tol:
        raise NotHermitian(herm, tol)
    tr_err = np.max(np.abs(trace(m) - 1.0))
    if tr_err > tol:
        raise NotTraceOne(tr_err, tol)
    lam_min = np.min(np.linalg.eigvalsh(hermitian_part(m)))
    if lam_min < -tol:
        raise NotPSD(-lam_min, tol)
    out = m.copy()
    out.flags.writeable = False
    return out


def is_density(m, tol: float = HERM_TOL) -> bool:
    try:
        validate_density(m, tol)
    except InvalidState:
        return False
    return True


def psd_sqrt(rho):
    """Matrix square root of a Hermitian matrix with negative eigenvalues clipped."""
    w, v = np.linalg.eigh(hermitian_part(rho))
    w = np.sqrt(np.clip(w, 0.0, None))
    return (v * w[..., None, :]) @ dagger(v)


def fidelity(rho, sigma):
    """Uhlmann fidelity (tr sqrt(sqrt(rho) sigma sqrt(rho)))^2, clipped to [0, 1]."""
    rho = _as_square(rho)
    sigma = _as_square(sigma)
    if rho.shape[-1] != sigma.shape[-1]:
        raise DimensionMismatch(f"fidelity of {rho.shape[-1]}- and {sigma.shape[-1]}-dimensional states")
    if rho.shape[-1] == 2:
        # closed form for qubits, exact also when one state is pure
        overlap = np.einsum("...ij,...ji->...", rho, sigma).real
        dets = np.clip(np.linalg.det(hermitian_part(rho)).real, 0, None) * np.clip(
            np.linalg.det(hermitian_part(sigma)).real, 0, None
        )
        return np.clip(overlap + 2.0 * np.sqrt(dets), 0.0, 1.0)
    s = psd_sqrt(rho)
    w = np.linalg.eigvalsh(hermitian_part(s @ sigma @ s))
    f = np.sum(np.sqrt(np.clip(w, 0.0, None)), axis=-1) ** 2
    return np.clip(f, 0.0, 1.0)


def bloch_decompose(rho) -> np.ndarray:
    """(x, y, z) = (tr(rho sx), tr(rho sy), tr(rho sz)) for qubit states."""
    rho = _as_square(rho)
    if rho.shape[-1] != 2:
        raise DimensionMismatch(f"Bloch coordinates need d = 2, got d = {rho.shape[-1]}")
    x = 2.0 * rho[..., 0, 1].real
    y = -2.0 * rho[..., 0, 1].imag
    z = (rho[..., 0, 0] - rho[..., 1, 1]).real
    return np.stack([x, y, z], axis=-1)


def bloch_compose(v, tol: float = BLOCH_TOL) -> np.ndarray:
    """rho = (I + x sx + y sy + z sz) / 2."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 3:
        raise DimensionMismatch(f"Bloch vectors have 3 components, got {v.shape[-1]}")
    norm = np.sqrt(np.sum(v**2, axis=-1))
    if np.any(norm > 1.0 + tol):
        raise BlochNormExceeded(f"Bloch norm {np.max(norm):.6g} > 1")
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    rho = np.empty(v.shape[:-1] + (2, 2), dtype=complex)
    rho[..., 0, 0] = 0.5 * (1 + z)
    rho[..., 1, 1] = 0.5 * (1 - z)
    rho[..., 0, 1] = 0.5 * (x - 1j * y)
    rho[..., 1, 0] = 0.5 * (x + 1j * y)
    return rho


def pure_state(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi, axis=-1, keepdims=True)
    return psi[..., :, None] * np.conj(psi[..., None, :])


def random_density(rng: np.random.Generator, d: int, size=(), rank: int | None = None) -> np.ndarray:
    """Hilbert-Schmidt (rank = d) or induced-measure random states G G^dag / tr(G G^dag)."""
    size = tuple(np.atleast_1d(size)) if size != () else ()
    k = d if rank is None else rank
    g = rng.standard_normal(size + (d, k)) + 1j * rng.standard_normal(size + (d, k))
    m = g @ dagger(g)
    return m / trace(m)[..., None, None]


def random_pure(rng: np.random.Generator, d: int, size=()) -> np.ndarray:
    return random_density(rng, d, size, rank=1)


def random_hermitian(rng: np.random.Generator, d: int, size=(), norm_range=(0.1, 10.0)) -> np.ndarray:
    """(G + G^dag)/2 rescaled to a spectral norm drawn log-uniformly from ``norm_range``."""
    size = tuple(np.atleast_1d(size)) if size != () else ()
    g = rng.standard_normal(size + (d, d)) + 1j * rng.standard_normal(size + (d, d))
    h = hermitian_part(g)
    lo, hi = np.log(norm_range[0]), np.log(norm_range[1])
    target = np.exp(rng.uniform(lo, hi, size=size))
    return h * (target / spectral_norm(h))[..., None, None]


def product_state(rho0, n: int) -> np.ndarray:
    """rho0 tensored with itself n times."""
    out = np.asarray(rho0, dtype=complex)
    for _ in range(n - 1):
        out = np.kron(out, rho0)
    return out


def n_particles_of(dim: int, d: int) -> int:
    n = int(round(np.log(dim) / np.log(d)))
    if d**n != dim:
        raise DimensionMismatch(f"dimension {dim} is not a power of the local dimension {d}")
    return n


# ---------------------------------------------------------------------------
# Tensor-slot machinery.  A d^n x d^n matrix is viewed as a tensor with 2n
# slots: slots 0..n-1 are row (ket) indices, n..2n-1 column (bra) indices.


def _slot_apply(m: np.ndarray, x: np.ndarray, slot: int, n_slots: int, d: int) -> np.ndarray:
    """Contract the d x d matrix ``m`` into tensor slot ``slot`` of the trailing axes of ``x``."""
    batch = x.shape[:-2]
    r = x.reshape(batch + (d**slot, d, d ** (n_slots - slot - 1)))
    return np.matmul(m, r).reshape(x.shape)


def _check_index(j: int, n: int) -> None:
    if not 0 <= j < n:
        raise IndexOutOfRange(f"particle index {j} outside 0..{n - 1}")


def apply_left(b, rho, j: int, n: int) -> np.ndarray:
    """B_j rho: ``b`` acting on particle ``j`` from the left."""
    b = np.asarray(b, dtype=complex)
    _check_index(j, n)
    return _slot_apply(b, np.asarray(rho), j, 2 * n, b.shape[-1])


def apply_right(b, rho, j: int, n: int) -> np.ndarray:
    """rho B_j, computed as (B_j^dag rho^dag)^dag so only row slots are strided."""
    b = np.asarray(b, dtype=complex)
    return dagger(apply_left(dagger(b), dagger(np.asarray(rho)), j, n))


def apply_vector(b, psi, j: int, n: int) -> np.ndarray:
    """B_j |psi> for state vectors with trailing axis of length d^n."""
    b = np.asarray(b, dtype=complex)
    _check_index(j, n)
    psi = np.asarray(psi, dtype=complex)
    d = b.shape[-1]
    r = psi.reshape(psi.shape[:-1] + (d**j, d, d ** (n - j - 1)))
    return np.matmul(b, r).reshape(psi.shape)


@dataclass(frozen=True)
class LocalOp:
    """The operator B_j = I x ... x B x ... x I acting on particle ``j`` of ``n``.

    Never builds the d^n x d^n matrix except through :meth:`dense`, which is
    kept for oracle comparisons.
    """

    b: np.ndarray
    j: int
    n: int

    def __post_init__(self):
        b = _as_square(self.b)
        object.__setattr__(self, "b", b)
        _check_index(self.j, self.n)

    @property
    def d(self) -> int:
        return self.b.shape[-1]

    def left(self, rho):
        return apply_left(self.b, rho, self.j, self.n)

    def right(self, rho):
        return apply_right(self.b, rho, self.j, self.n)

    def sandwich(self, rho):
        """B_j rho B_j^dag."""
        return apply_right(dagger(self.b), apply_left(self.b, rho, self.j, self.n), self.j, self.n)

    def vector(self, psi):
        return apply_vector(self.b, psi, self.j, self.n)

    def dense(self) -> np.ndarray:
        return embed_dense(self.b, self.j, self.n)


def embed_local(b, j: int, n: int) -> LocalOp:
    return LocalOp(b, j, n)


def embed_dense(b, j: int, n: int) -> np.ndarray:
    """Explicit Kronecker embedding; O(d^2n) memory, for tests and oracles only."""
    b = np.asarray(b, dtype=complex)
    d = b.shape[-1]
    _check_index(j, n)
    return np.kron(np.kron(np.eye(d**j), b), np.eye(d ** (n - j - 1)))


def swap_factors(o, d: int) -> np.ndarray:
    """SWAP O SWAP for an operator on C^d x C^d."""
    o4 = np.asarray(o, dtype=complex).reshape(d, d, d, d)
    return o4.transpose(1, 0, 3, 2).reshape(d * d, d * d)


@dataclass(frozen=True)
class PairOp:
    """O_jk: a two-body operator on particles ``j`` (first factor) and ``k`` (second)."""

    o: np.ndarray
    j: int
    k: int
    n: int
    d: int = field(init=False)

    def __post_init__(self):
        o = _as_square(self.o)
        d = int(round(np.sqrt(o.shape[-1])))
        if d * d != o.shape[-1]:
            raise DimensionMismatch(f"pair operator dimension {o.shape[-1]} is not a square")
        _check_index(self.j, self.n)
        _check_index(self.k, self.n)
        if self.j == self.k:
            raise DuplicateIndex(f"pair operator needs distinct particles, got {self.j} twice")
        object.__setattr__(self, "o", o)
        object.__setattr__(self, "d", d)

    def _ordered(self):
        if self.j < self.k:
            return self.o, self.j, self.k
        return swap_factors(self.o, self.d), self.k, self.j

    def left(self, rho):
        o, a, b = self._ordered()
        d, n = self.d, self.n
        rho = np.asarray(rho)
        batch = rho.shape[:-2]
        r = rho.reshape(batch + (d**a, d, d ** (b - a - 1), d, d ** (2 * n - b - 1)))
        out = np.einsum("pqrs,...arbsc->...apbqc", o.reshape(d, d, d, d), r, optimize=True)
        return out.reshape(rho.shape)

    def right(self, rho):
        adj = PairOp(dagger(self.o), self.j, self.k, self.n)
        return dagger(adj.left(dagger(np.asarray(rho))))

    def sandwich(self, rho):
        adj = PairOp(dagger(self.o), self.j, self.k, self.n)
        return adj.right(self.left(rho))

    def dense(self) -> np.ndarray:
        """Explicit d^n x d^n matrix built from basis permutations; oracle use only."""
        o, a, b = self._ordered()
        d, n = self.d, self.n
        eye = np.eye(d**n, dtype=complex).reshape((d,) * n + (d**n,))
        # move slots a, b to the front, apply o, move back
        moved = np.moveaxis(eye, (a, b), (0, 1)).reshape(d * d, -1)
        moved = (o @ moved).reshape((d,) * n + (d**n,))
        return np.moveaxis(moved, (0, 1), (a, b)).reshape(d**n, d**n)


def embed_pair(o, j: int, k: int, n: int) -> PairOp:
    return PairOp(o, j, k, n)


def partial_trace(rho, keep: int, n: int, d: int = 2) -> np.ndarray:
    """Reduced state of particle ``keep``: trace over every other particle."""
    rho = np.asarray(rho)
    _check_index(keep, n)
    batch = rho.shape[:-2]
    a, c = d**keep, d ** (n - keep - 1)
    r = rho.reshape(batch + (a, d, c, a, d, c))
    return np.einsum("...aibajb->...ij", r)


def partial_traces(rho, n: int, d: int = 2) -> np.ndarray:
    """All single-particle marginals, stacked on a new axis before the matrix axes."""
    return np.stack([partial_trace(rho, j, n, d) for j in range(n)], axis=-3)
