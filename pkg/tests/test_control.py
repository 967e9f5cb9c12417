import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfbelavkin.control import NonRealControl, ControlLaw, constant_law, stabilizing_law, verify_lipschitz, zero_law
from mfbelavkin.quantum import RHO_E, RHO_G, SIGMA_X, bloch_compose, bloch_decompose, random_density
from strategies import densities

# u = -7.6 y + 5 (1 + z) / 2 on the Bloch ball, for target rho_e (z = -1)
C1, C2 = 7.6, 5.0
KAPPA = math.sqrt(2) * math.hypot(C1, C2 / 2)


def bloch_oracle(v):
    v = np.asarray(v)
    return -C1 * v[..., 1] + C2 * (1 + v[..., 2]) / 2


def test_zero_and_constant(rng):
    rho = random_density(rng, 2, size=4)
    np.testing.assert_array_equal(zero_law()(rho), 0)
    assert zero_law().is_zero
    np.testing.assert_array_equal(constant_law(0.3)(rho), 0.3)
    assert constant_law(0.0).is_zero and not constant_law(0.3).is_zero


def test_vanishes_on_target():
    assert stabilizing_law(RHO_E)(RHO_E) == pytest.approx(0, abs=1e-15)
    assert stabilizing_law(RHO_G)(RHO_G) == pytest.approx(0, abs=1e-15)


def test_opposite_pole_gives_c2():
    assert stabilizing_law(RHO_E)(RHO_G) == pytest.approx(C2)


def test_bloch_formula(rng):
    law = stabilizing_law()
    rho = random_density(rng, 2, size=100)
    assert np.max(np.abs(law(rho) - bloch_oracle(bloch_decompose(rho)))) <= 1e-12


def test_declared_lipschitz_constant():
    assert stabilizing_law().lipschitz == pytest.approx(KAPPA, rel=1e-12)


def test_bound_dominates_values(rng):
    law = stabilizing_law()
    assert law.bound == pytest.approx(C1 + C2)
    v = rng.standard_normal((5000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    assert np.max(np.abs(law.raw(bloch_compose(v)))) <= law.bound


def test_clamp():
    law = ControlLaw("big", lambda rho: np.full(np.shape(rho)[:-2], 10.0), bound=2.0, lipschitz=0.0)
    assert law(RHO_E) == 2.0


def test_non_real_rejected():
    law = ControlLaw("complex", lambda rho: np.full(np.shape(rho)[:-2], 1j), bound=2.0, lipschitz=None)
    with pytest.raises(NonRealControl):
        law(RHO_E)


@given(a=densities(), b=densities(), t=st.floats(0, 1))
def test_affine(a, b, t):
    law = stabilizing_law()
    assert law(t * a + (1 - t) * b) == pytest.approx(t * law(a) + (1 - t) * law(b), abs=1e-12)


@given(a=densities(), b=densities())
def test_lipschitz_property(a, b):
    law = stabilizing_law()
    assert abs(law(a) - law(b)) <= law.lipschitz * np.linalg.norm(a - b) + 1e-12


def test_empirical_lipschitz_below_declared():
    law = stabilizing_law()
    kappa = verify_lipschitz(law, 3000, seed=7)
    assert 0.5 * law.lipschitz < kappa <= law.lipschitz * (1 + 1e-9)


def test_lipschitz_warning():
    law = ControlLaw("liar", stabilizing_law().raw, bound=20.0, lipschitz=1.0)
    with pytest.warns(UserWarning):
        verify_lipschitz(law, 100, seed=1)


def test_hhat_choice_changes_law():
    sy = np.array([[0, -1j], [1j, 0]])
    law = stabilizing_law(hhat=sy)
    rho = bloch_compose([0.4, 0.0, 0.0])
    assert law(rho) != pytest.approx(stabilizing_law()(rho))
    assert law(RHO_E) == pytest.approx(0, abs=1e-15)
    assert stabilizing_law(hhat=SIGMA_X)(rho) == pytest.approx(bloch_oracle([0.4, 0.0, 0.0]))
