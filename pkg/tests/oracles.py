"""Brute-force dense-Kronecker oracles shared by the tensor and model tests."""

import functools
import math

import numpy as np


def kron_chain(factors):
    return functools.reduce(np.kron, factors)


def dense_local(b, j, n):
    d = b.shape[0]
    return kron_chain([b if i == j else np.eye(d) for i in range(n)])


def dense_pair(o, j, k, n):
    """sum over entries o[(p,q),(r,s)] |p><r|_j |q><s|_k, built from Kronecker chains."""
    d = int(round(np.sqrt(o.shape[0])))
    o4 = o.reshape(d, d, d, d)
    out = np.zeros((d**n, d**n), dtype=complex)
    for p, q, r, s in np.ndindex(d, d, d, d):
        if o4[p, q, r, s] == 0:
            continue
        epr = np.zeros((d, d))
        epr[p, r] = 1
        eqs = np.zeros((d, d))
        eqs[q, s] = 1
        factors = [np.eye(d)] * n
        factors[j], factors[k] = epr, eqs
        out += o4[p, q, r, s] * kron_chain(factors)
    return out


def trace_out_oracle(rho, keep, n, d):
    """Reduced state by explicit summation over the multi-indices of the other particles."""
    out = np.zeros((d, d), dtype=complex)
    others = [i for i in range(n) if i != keep]
    for a in range(d):
        for b in range(d):
            for rest in np.ndindex(*([d] * len(others))):
                ia, ib = [0] * n, [0] * n
                for pos, val in zip(others, rest):
                    ia[pos] = ib[pos] = val
                ia[keep], ib[keep] = a, b
                row = sum(v * d ** (n - 1 - i) for i, v in enumerate(ia))
                col = sum(v * d ** (n - 1 - i) for i, v in enumerate(ib))
                out[a, b] += rho[row, col]
    return out


def dense_increment(params, n, rho, dW, dt, u=None):
    """One Euler increment of the n-particle filter with every operator built as a dense matrix."""
    H = sum(dense_local(params.H, j, n) for j in range(n))
    if u is not None:
        H = H + sum(u[j] * dense_local(params.Hhat, j, n) for j in range(n))
    if n >= 2:
        A = params.kernel.as_matrix()
        H = H + sum(dense_pair(A, i, j, n) for i in range(n) for j in range(i + 1, n)) / n
    drift = -1j * (H @ rho - rho @ H)
    noise = np.zeros_like(rho)
    for j in range(n):
        L = dense_local(params.L, j, n)
        Ld = L.conj().T
        drift += L @ rho @ Ld - 0.5 * (Ld @ L @ rho + rho @ Ld @ L)
        s = np.trace((L + Ld) @ rho).real
        noise += dW[j] * (L @ rho + rho @ Ld - s * rho)
    return drift * dt + math.sqrt(params.eta) * noise
