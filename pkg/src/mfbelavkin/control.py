"""Bounded, Lipschitz feedback laws u: S_d -> [-U, U]."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .quantum import RHO_E, SIGMA_X, commutator, frobenius, random_density, random_pure, spectral_norm, validate_density

IMAG_TOL = 1e-9


class NonRealControl(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ControlLaw:
    """A feedback law evaluated on batched density matrices.

    ``raw`` returns the unclamped (possibly complex) value; ``evaluate``
    checks that it is real and clamps it to [-bound, bound].
    ``lipschitz`` is the declared constant in the Frobenius norm, or None if
    unverified.
    """

    name: str
    raw: Callable[[np.ndarray], np.ndarray]
    bound: float
    lipschitz: float | None
    is_zero: bool = False

    def evaluate(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=complex)
        val = np.asarray(self.raw(rho))
        if np.iscomplexobj(val):
            imag = np.max(np.abs(val.imag), initial=0.0)
            if imag > IMAG_TOL:
                raise NonRealControl(f"{self.name}: control has imaginary part {imag:.3e}")
            val = val.real
        return np.clip(val, -self.bound, self.bound)

    __call__ = evaluate


def zero_law() -> ControlLaw:
    return ControlLaw("zero", lambda rho: np.zeros(np.shape(rho)[:-2]), bound=1.0, lipschitz=0.0, is_zero=True)


def constant_law(value: float) -> ControlLaw:
    value = float(value)
    return ControlLaw(
        f"constant({value:g})",
        lambda rho: np.full(np.shape(rho)[:-2], value),
        bound=max(abs(value), 1.0),
        lipschitz=0.0,
        is_zero=value == 0.0,
    )


def stabilizing_law(target=RHO_E, c1: float = 7.6, c2: float = 5.0, hhat=SIGMA_X) -> ControlLaw:
    """u(g) = -c1 i tr([hhat, g] target) + c2 (1 - tr(g target)).

    Rewritten as u(g) = c2 + tr(g G) with G = -c1 i [target, hhat] - c2 target,
    which is affine in g with Frobenius Lipschitz constant ||G - tr(G) I/d||_F
    on trace-one inputs.  For target rho_e and hhat sigma_x the two terms are
    bounded by c1 and c2 on S_2, so the clamp bound is c1 ||[target, hhat]|| + c2.
    """
    target = validate_density(target)
    hhat = np.asarray(hhat, dtype=complex)
    d = target.shape[-1]
    g = -1j * c1 * commutator(target, hhat) - c2 * target
    g_traceless = g - np.trace(g) / d * np.eye(d)
    kappa = float(frobenius(g_traceless))
    bound = float(abs(c1) * spectral_norm(commutator(target, hhat)) + abs(c2))
    gt = g.T.copy()

    def raw(rho):
        return c2 + np.einsum("...ij,ij->...", rho, gt)

    return ControlLaw(f"stabilize(c1={c1:g}, c2={c2:g})", raw, bound=bound, lipschitz=kappa)


def verify_lipschitz(law: ControlLaw, n_samples: int, seed: int, d: int = 2) -> float:
    """Largest |u(a) - u(b)| / ||a - b||_F over ``n_samples`` random state pairs.

    Pairs mix Hilbert-Schmidt states, pure states and small perturbations of
    pure states.  The result is an empirical lower bound on the Lipschitz
    constant; a warning is issued if it exceeds the declared one.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    k = n_samples // 3 + 1
    a = np.concatenate([random_density(rng, d, k), random_pure(rng, d, k), random_pure(rng, d, k)])
    b = np.concatenate([random_density(rng, d, k), random_pure(rng, d, k), random_density(rng, d, k)])
    b[2 * k :] = 0.9 * a[2 * k :] + 0.1 * b[2 * k :]
    a, b = a[:n_samples], b[:n_samples]
    dist = frobenius(a - b)
    keep = dist > 1e-12
    ratio = np.abs(law.evaluate(a[keep]) - law.evaluate(b[keep])) / dist[keep]
    kappa = float(np.max(ratio, initial=0.0))
    if law.lipschitz is not None and kappa > law.lipschitz * (1 + 1e-9) + 1e-12:
        warnings.warn(f"{law.name}: empirical Lipschitz estimate {kappa:.4g} exceeds declared {law.lipschitz:.4g}")
    return kappa
