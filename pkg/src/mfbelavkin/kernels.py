"""Two-body interaction kernels A(l, l'; k, k') and their mean-field contraction.

Index convention: ``values[l, l2, k, k2]`` is the matrix element
<l l2| A |k k2> of A as an operator on C^d x C^d, i.e. A f(l, l2) =
sum_{k, k2} A(l, l2; k, k2) f(k, k2).  Indices are 0-based in code; the
config loader accepts the 1-based labels of X = {1, ..., d}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantum import DimensionMismatch

KERNEL_TOL = 1e-12


class KernelError(ValueError):
    pass


class SymmetryViolated(KernelError):
    def __init__(self, indices, gap):
        self.indices = indices
        super().__init__(f"A{indices} != A(l',l;k',k) (gap {gap:.3e})")


class SelfAdjointnessViolated(KernelError):
    def __init__(self, indices, imag):
        self.indices = indices
        super().__init__(f"A{indices} is not equal to its conjugate (imaginary part {imag:.3e})")


class EmptyEnsemble(ValueError):
    pass


def _first_bad(mask: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(mask)[0])


@dataclass(frozen=True, eq=False)
class InteractionKernel:
    values: np.ndarray

    @property
    def d(self) -> int:
        return self.values.shape[0]

    def as_matrix(self) -> np.ndarray:
        """The d^2 x d^2 matrix of A, rows (l, l2) and columns (k, k2)."""
        d = self.d
        return self.values.reshape(d * d, d * d)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    @property
    def is_hermitian(self) -> bool:
        m = self.as_matrix()
        return bool(np.allclose(m, m.conj().T, atol=KERNEL_TOL, rtol=0))

    def pair_terms(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """A = sum_r U_r x W_r with one term per nonzero (l, k) row of the realigned tensor.

        U_r = |l><k| and W_r collects A(l, . ; k, .).  Grouping by entries
        keeps the single-particle factors as sparse as the kernel itself.
        """
        d = self.d
        terms = []
        for l in range(d):
            for k in range(d):
                w = self.values[l, :, k, :]
                if not np.any(w):
                    continue
                u = np.zeros((d, d), dtype=complex)
                u[l, k] = 1.0
                terms.append((u, w.astype(complex)))
        return terms


def validate_kernel(values, tol: float = KERNEL_TOL) -> InteractionKernel:
    """Check A(l,l';k,k') = A(l',l;k',k) and A = conj(A) entrywise, as stated for the model."""
    a = np.asarray(values, dtype=complex)
    if a.ndim == 2:
        d = int(round(np.sqrt(a.shape[0])))
        if d * d != a.shape[0] or a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"kernel matrix shape {a.shape} is not d^2 x d^2")
        a = a.reshape(d, d, d, d)
    if a.ndim != 4 or len(set(a.shape)) != 1:
        raise DimensionMismatch(f"kernel needs d^4 entries indexed (l, l', k, k'), got shape {a.shape}")
    gap = np.abs(a - a.transpose(1, 0, 3, 2))
    if np.any(gap > tol):
        bad = _first_bad(gap > tol)
        raise SymmetryViolated(bad, gap[bad])
    imag = np.abs(a.imag)
    if np.any(imag > tol):
        bad = _first_bad(imag > tol)
        raise SelfAdjointnessViolated(bad, imag[bad])
    a = a.copy()
    a.flags.writeable = False
    return InteractionKernel(a)


def zero_kernel(d: int = 2) -> InteractionKernel:
    return validate_kernel(np.zeros((d, d, d, d)))


def photon_exchange_kernel() -> InteractionKernel:
    """a1^dag a2 + a2^dag a1 on two qubits: A(2,1;1,2) = A(1,2;2,1) = 1 in 1-based labels."""
    a = np.zeros((2, 2, 2, 2))
    a[1, 0, 0, 1] = 1.0
    a[0, 1, 1, 0] = 1.0
    return validate_kernel(a)


def kernel_from_entries(entries, d: int) -> InteractionKernel:
    """Build a kernel from (l, l', k, k', re, im) tuples with 1-based labels; missing entries are 0."""
    a = np.zeros((d, d, d, d), dtype=complex)
    for entry in entries:
        if len(entry) != 6:
            raise KernelError(f"kernel entry {entry!r} is not (l, l', k, k', re, im)")
        *idx, re, im = entry
        idx = tuple(int(i) - 1 for i in idx)
        if any(not 0 <= i < d for i in idx):
            raise KernelError(f"kernel entry {entry!r} has labels outside 1..{d}")
        a[idx] = complex(re, im)
    return validate_kernel(a)


def contract(kernel: InteractionKernel, m) -> np.ndarray:
    """A^m(l, l') = sum_{k,k'} A(l, l'; k, k') conj(m(k, k')); batched over leading axes of m."""
    m = np.asarray(m, dtype=complex)
    if m.shape[-2:] != (kernel.d, kernel.d):
        raise DimensionMismatch(f"kernel has d = {kernel.d}, state has shape {m.shape[-2:]}")
    return np.einsum("abkl,...kl->...ab", kernel.values, np.conj(m))


def mean_field_hamiltonian_term(kernel: InteractionKernel, states) -> np.ndarray:
    """contract(kernel, empirical mean of ``states``), the particle-method stand-in for A^{m_t}."""
    states = np.asarray(states, dtype=complex)
    if states.ndim == 2:
        states = states[None]
    if states.shape[0] == 0:
        raise EmptyEnsemble("mean-field term of an empty ensemble")
    return contract(kernel, states.mean(axis=0))


def random_kernel(rng: np.random.Generator, d: int, scale: float = 1.0) -> InteractionKernel:
    """A real tensor symmetrised under the particle swap: a valid kernel, not necessarily Hermitian."""
    t = rng.standard_normal((d, d, d, d)) * scale
    return validate_kernel(0.5 * (t + t.transpose(1, 0, 3, 2)))
