import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfbelavkin.quantum import (
    RHO_E,
    RHO_G,
    SIGMA_X,
    SIGMA_Z,
    BlochNormExceeded,
    DimensionMismatch,
    DuplicateIndex,
    IndexOutOfRange,
    NotHermitian,
    NotPSD,
    NotTraceOne,
    apply_vector,
    bloch_compose,
    bloch_decompose,
    embed_local,
    embed_pair,
    fidelity,
    lmul,
    partial_trace,
    partial_traces,
    product_state,
    pure_state,
    purity,
    random_density,
    random_hermitian,
    rmul,
    validate_density,
)
from oracles import dense_local, dense_pair, trace_out_oracle
from strategies import bloch_vectors, densities, seeds


def basis_projector(bits, d=2):
    psi = np.zeros(d ** len(bits))
    psi[sum(b * d ** (len(bits) - 1 - i) for i, b in enumerate(bits))] = 1
    return np.outer(psi, psi).astype(complex)


PHOTON = np.zeros((4, 4), dtype=complex)
PHOTON[1, 2] = PHOTON[2, 1] = 1


class TestValidateDensity:
    def test_maximally_mixed(self):
        validate_density(np.eye(2) / 2)

    def test_ground_state(self):
        validate_density(np.diag([1.0, 0.0]))

    def test_negative_eigenvalue(self):
        with pytest.raises(NotPSD) as exc:
            validate_density(np.diag([1.5, -0.5]))
        assert exc.value.violation == pytest.approx(0.5)

    def test_not_hermitian(self):
        with pytest.raises(NotHermitian):
            validate_density(np.array([[0.5, 0.3], [0.0, 0.5]]))

    def test_trace(self):
        with pytest.raises(NotTraceOne):
            validate_density(np.eye(2))

    def test_not_square(self):
        with pytest.raises(DimensionMismatch):
            validate_density(np.ones((2, 3)))

    def test_returns_read_only_copy(self):
        m = np.eye(2) / 2
        out = validate_density(m)
        assert not out.flags.writeable
        m[0, 0] = 7
        assert out[0, 0] == 0.5


class TestLocalOperators:
    def test_identity_action(self, rng):
        rho = random_density(rng, 8)
        for j in range(3):
            np.testing.assert_allclose(embed_local(np.eye(2), j, 3).left(rho), rho, atol=1e-15)

    def test_sigma_z_on_maximally_mixed(self):
        rho = np.eye(4) / 4
        np.testing.assert_allclose(embed_local(SIGMA_Z, 0, 2).sandwich(rho), rho, atol=1e-15)

    def test_sigma_x_flips_second_particle(self):
        out = embed_local(SIGMA_X, 1, 2).sandwich(basis_projector([0, 0]))
        np.testing.assert_allclose(out, basis_projector([0, 1]), atol=1e-15)

    def test_index_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            embed_local(SIGMA_X, 2, 2)

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_against_kronecker_oracle(self, n):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            j = int(rng.integers(n))
            b = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
            rho = random_density(rng, 2**n)
            op = embed_local(b, j, n)
            big = dense_local(b, j, n)
            assert np.linalg.norm(op.left(rho) - big @ rho) <= 1e-11
            assert np.linalg.norm(op.right(rho) - rho @ big) <= 1e-11
            assert np.linalg.norm(op.sandwich(rho) - big @ rho @ big.conj().T) <= 1e-11

    def test_vector_action(self, rng):
        b = rng.standard_normal((2, 2)) + 0j
        psi = rng.standard_normal(8) + 1j * rng.standard_normal(8)
        np.testing.assert_allclose(apply_vector(b, psi, 1, 3), dense_local(b, 1, 3) @ psi, atol=1e-13)

    def test_batched(self, rng):
        b = rng.standard_normal((2, 2)) + 0j
        rho = random_density(rng, 4, size=5)
        out = embed_local(b, 1, 2).left(rho)
        for p in range(5):
            np.testing.assert_allclose(out[p], dense_local(b, 1, 2) @ rho[p], atol=1e-13)


class TestPairOperators:
    def test_identity(self, rng):
        rho = random_density(rng, 8)
        np.testing.assert_allclose(embed_pair(np.eye(4), 0, 2, 3).left(rho), rho, atol=1e-15)

    def test_photon_exchange_swaps_excitation(self):
        out = embed_pair(PHOTON, 0, 1, 2).sandwich(basis_projector([0, 1]))
        np.testing.assert_allclose(out, basis_projector([1, 0]), atol=1e-15)

    def test_outer_slots_of_three(self, rng):
        o = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        rho = random_density(rng, 8)
        big = dense_pair(o, 0, 2, 3)
        assert np.linalg.norm(embed_pair(o, 0, 2, 3).left(rho) - big @ rho) <= 1e-12

    def test_duplicate_index(self):
        with pytest.raises(DuplicateIndex):
            embed_pair(PHOTON, 1, 1, 3)

    def test_not_a_pair_dimension(self):
        with pytest.raises(DimensionMismatch):
            embed_pair(np.eye(3), 0, 1, 2)

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_against_kronecker_oracle(self, n):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            j, k = (int(i) for i in rng.choice(n, size=2, replace=False))
            o = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
            rho = random_density(rng, 2**n)
            op = embed_pair(o, j, k, n)
            big = dense_pair(o, j, k, n)
            assert np.linalg.norm(op.left(rho) - big @ rho) <= 1e-11
            assert np.linalg.norm(op.right(rho) - rho @ big) <= 1e-11
            assert np.linalg.norm(op.sandwich(rho) - big @ rho @ big.conj().T) <= 1e-11
            assert np.linalg.norm(op.dense() - big) <= 1e-12


class TestPartialTrace:
    def test_product_state(self, rng):
        rho0 = random_density(rng, 2)
        rho = product_state(rho0, 3)
        for j in range(3):
            np.testing.assert_allclose(partial_trace(rho, j, 3), rho0, atol=1e-14)

    def test_bell_state(self):
        rho = pure_state(np.array([1, 0, 0, 1]))
        np.testing.assert_allclose(partial_trace(rho, 0, 2), np.eye(2) / 2, atol=1e-15)
        np.testing.assert_allclose(partial_trace(rho, 1, 2), np.eye(2) / 2, atol=1e-15)

    def test_index_sum_oracle(self, rng):
        for n, d in ((2, 2), (3, 2), (2, 3)):
            rho = random_density(rng, d**n)
            for j in range(n):
                assert np.max(np.abs(partial_trace(rho, j, n, d) - trace_out_oracle(rho, j, n, d))) <= 1e-12

    def test_all_marginals(self, rng):
        rho = random_density(rng, 8, size=2)
        marg = partial_traces(rho, 3)
        assert marg.shape == (2, 3, 2, 2)
        np.testing.assert_allclose(marg[1, 2], partial_trace(rho[1], 2, 3), atol=1e-15)

    @given(seed=seeds, n=st.integers(1, 8))
    def test_product_roundtrip_property(self, seed, n):
        rho0 = random_density(np.random.default_rng(seed), 2)
        rho = product_state(rho0, n)
        for j in {0, n - 1, n // 2}:
            assert np.max(np.abs(partial_trace(rho, j, n) - rho0)) <= 1e-12


class TestBloch:
    def test_ground_state(self):
        np.testing.assert_allclose(bloch_decompose(RHO_G), [0, 0, 1])

    def test_figure_initial_state(self):
        rho = bloch_compose([0.25, -0.25, 0.0])
        np.testing.assert_allclose(bloch_decompose(rho), [0.25, -0.25, 0.0], atol=1e-16)
        validate_density(rho)

    def test_maximally_mixed(self):
        np.testing.assert_allclose(bloch_decompose(np.eye(2) / 2), [0, 0, 0])

    def test_norm_exceeded(self):
        with pytest.raises(BlochNormExceeded):
            bloch_compose([1.0, 0.5, 0.0])

    def test_wrong_dimension(self):
        with pytest.raises(DimensionMismatch):
            bloch_decompose(np.eye(3) / 3)

    def test_roundtrip_on_random_states(self, rng):
        rho = random_density(rng, 2, size=1000)
        assert np.max(np.abs(bloch_compose(bloch_decompose(rho)) - rho)) <= 1e-13

    @given(v=bloch_vectors())
    def test_compose_decompose_property(self, v):
        np.testing.assert_allclose(bloch_decompose(bloch_compose(v)), v, atol=1e-13)


class TestFidelity:
    def test_same_pure_state(self):
        assert fidelity(RHO_E, RHO_E) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert fidelity(RHO_G, RHO_E) == pytest.approx(0.0, abs=1e-12)

    def test_mixed_against_pure(self):
        assert fidelity(np.eye(2) / 2, RHO_E) == pytest.approx(0.5, abs=1e-12)

    def test_random_pairs(self, rng):
        rho = random_density(rng, 2, size=1000)
        sigma = random_density(rng, 2, size=1000)
        pure = random_density(rng, 2, size=1000, rank=1)
        np.testing.assert_allclose(fidelity(rho, sigma), fidelity(sigma, rho), atol=1e-9)
        np.testing.assert_allclose(fidelity(rho, rho), 1.0, atol=1e-9)
        assert np.all(fidelity(rho, sigma) < 1.0 - 1e-6)
        overlap = np.einsum("pij,pji->p", rho, pure).real
        np.testing.assert_allclose(fidelity(rho, pure), overlap, atol=1e-9)

    def test_two_qubit_product(self):
        # fidelity is multiplicative on products: compare against two single-qubit values
        a, b = bloch_compose([0.3, 0.1, 0.2]), bloch_compose([0.0, -0.5, 0.4])
        c, d = bloch_compose([0.1, 0.1, -0.6]), bloch_compose([0.2, 0.2, 0.2])
        assert fidelity(np.kron(a, c), np.kron(b, d)) == pytest.approx(fidelity(a, b) * fidelity(c, d), abs=1e-10)

    @given(rho=densities(), sigma=densities())
    def test_bounded_and_symmetric(self, rho, sigma):
        f = fidelity(rho, sigma)
        assert 0.0 <= f <= 1.0
        assert f == pytest.approx(fidelity(sigma, rho), abs=1e-8)


class TestHelpers:
    def test_purity(self):
        assert purity(np.eye(2) / 2) == pytest.approx(0.5)
        assert purity(RHO_E) == pytest.approx(1.0)

    @pytest.mark.parametrize("d", [2, 3, 5])
    def test_constant_products_match_matmul(self, rng, d):
        c = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        a = rng.standard_normal((4, 3, d, d)) + 1j * rng.standard_normal((4, 3, d, d))
        np.testing.assert_allclose(lmul(c, a), c @ a, atol=1e-13)
        np.testing.assert_allclose(rmul(a, c), a @ c, atol=1e-13)
        np.testing.assert_allclose(lmul(c, a[0, 0]), c @ a[0, 0], atol=1e-13)

    def test_random_hermitian_norm_range(self, rng):
        h = random_hermitian(rng, 3, size=200)
        norms = np.linalg.norm(h, ord=2, axis=(-2, -1))
        assert np.all((norms >= 0.1 - 1e-12) & (norms <= 10 + 1e-12))
        np.testing.assert_allclose(h, np.conj(np.swapaxes(h, -1, -2)))
