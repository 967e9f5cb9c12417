import math

import numpy as np
import pytest
from hypothesis import given

from mfbelavkin.kernels import photon_exchange_kernel, zero_kernel
from mfbelavkin.models import BelavkinSingle, LindbladMeanODE, ModelParams
from mfbelavkin.quantum import (
    RHO_G,
    SIGMA_X,
    SIGMA_Z,
    bloch_compose,
    is_density,
    purity,
    random_density,
    validate_density,
)
from mfbelavkin.sde import (
    CSV_FLOAT,
    DegenerateState,
    EfficiencyOutOfRange,
    NoisePlan,
    NonFinite,
    StepError,
    TimeGrid,
    euler_step,
    observation_increment,
    path_sum,
    project_bloch,
    project_pure,
    project_state,
    read_csv,
    run_trajectory,
    simulate,
    write_csv,
)
from strategies import densities


def lindblad_drift(rho, L=SIGMA_Z):
    return L @ rho @ L.conj().T - 0.5 * (L.conj().T @ L @ rho + rho @ L.conj().T @ L)


class TestEulerStep:
    def test_zero_fields(self, rng):
        rho = random_density(rng, 2)
        out = euler_step(rho, lambda r: np.zeros_like(r), lambda r: np.zeros((1, 2, 2)), [0.3], 0.01)
        np.testing.assert_allclose(out, rho, atol=1e-15)

    def test_dephasing_fixed_point(self):
        out = euler_step(np.eye(2) / 2, lindblad_drift, None, [], 0.01)
        np.testing.assert_allclose(out, np.eye(2) / 2, atol=1e-15)

    def test_scalar_bloch_z_step(self):
        eta = 1.0
        z = euler_step(0.0, lambda z: 0.0, lambda z: [math.sqrt(eta) * (1 - z * z)], [0.1], 1e-3, project=None)
        assert z == pytest.approx(0.1, abs=1e-15)

    def test_channel_count_mismatch(self):
        with pytest.raises(ValueError):
            euler_step(np.eye(2) / 2, lindblad_drift, lambda r: np.zeros((2, 2, 2)), [0.1], 0.01)

    def test_non_finite(self):
        with pytest.raises(NonFinite):
            euler_step(np.eye(2) / 2, lambda r: np.full((2, 2), np.nan), None, [], 0.01)


class TestProjection:
    def test_valid_state_unchanged(self, rng):
        rho = random_density(rng, 3)
        out, dist = project_state(rho, return_distance=True)
        np.testing.assert_allclose(out, rho, atol=1e-14)
        assert dist <= 1e-14

    def test_qubit_clip(self):
        out = project_state(np.diag([1.0005, -0.0005]).astype(complex))
        np.testing.assert_allclose(out, RHO_G, atol=1e-15)

    def test_qutrit_clip(self):
        out = project_state(np.diag([0.7, 0.4, -0.1]).astype(complex))
        np.testing.assert_allclose(out, np.diag([7 / 11, 4 / 11, 0]), atol=1e-15)

    def test_zero_trace(self):
        with pytest.raises(DegenerateState):
            project_state(np.zeros((2, 2)))
        with pytest.raises(DegenerateState):
            project_state(np.zeros((3, 3)), spectral=False)

    def test_qubit_closed_form_matches_eigen_clip(self, rng):
        m = random_density(rng, 2, size=200) + 0.05 * (rng.standard_normal((200, 2, 2)) + 0j)
        fast = project_state(m)
        # generic route: eigen-clip of the Hermitian part, renormalized
        h = 0.5 * (m + np.conj(np.swapaxes(m, -1, -2)))
        w, v = np.linalg.eigh(h)
        w = np.clip(w, 0, None)
        slow = (v * (w / w.sum(-1, keepdims=True))[:, None, :]) @ np.conj(np.swapaxes(v, -1, -2))
        np.testing.assert_allclose(fast, slow, atol=1e-12)

    def test_light_projection_only_renormalizes(self):
        m = np.array([[0.6, 0.1], [0.1, 0.6]], dtype=complex)
        np.testing.assert_allclose(project_state(m, spectral=False), m / 1.2)

    @given(rho=densities(d=3))
    def test_output_is_density(self, rho):
        noisy = rho + 0.01 * np.diag([1.0, -2.0, 0.5])
        validate_density(project_state(noisy), 1e-12)

    def test_pure_retraction(self, rng):
        for d in (2, 3):
            psi = random_density(rng, d, rank=1)
            bumped = psi + 1e-3 * random_density(rng, d)
            out = project_pure(bumped)
            assert purity(out) == pytest.approx(1.0, abs=1e-12)
            assert np.linalg.norm(out - psi) < 1e-2
            np.testing.assert_allclose(project_pure(psi), psi, atol=1e-12)

    def test_bloch_projection(self):
        out, dist = project_bloch(np.array([[0.0, 0.0, 2.0], [0.1, 0.2, 0.3]]), return_distance=True)
        np.testing.assert_allclose(out, [[0, 0, 1], [0.1, 0.2, 0.3]])
        np.testing.assert_allclose(dist, [1.0, 0.0])


class TestObservation:
    def test_traceless_signal(self):
        assert observation_increment(np.eye(2) / 2, SIGMA_Z, 1.0, 0.3, 0.01) == pytest.approx(0.3)

    def test_ground_state_signal(self):
        assert observation_increment(RHO_G, SIGMA_Z, 1.0, 0.0, 0.01) == pytest.approx(0.02)

    @pytest.mark.parametrize("eta", [0.0, -0.1, 1.5])
    def test_efficiency_range(self, eta):
        with pytest.raises(EfficiencyOutOfRange):
            observation_increment(RHO_G, SIGMA_Z, eta, 0.0, 0.01)


class TestGridAndNoise:
    def test_grid(self):
        g = TimeGrid(1.0, 0.25)
        assert g.n_steps == 4
        np.testing.assert_allclose(g.times, [0, 0.25, 0.5, 0.75, 1.0])
        assert g.index(0.5) == 2
        with pytest.raises(ValueError):
            g.index(0.3)

    @pytest.mark.parametrize("args", [(1.0, 0.0), (1.0, 0.3), (-1.0, 0.1)])
    def test_bad_grid(self, args):
        with pytest.raises(ValueError):
            TimeGrid(*args)

    def test_streams_do_not_depend_on_batching(self):
        full = NoisePlan(7, 2, 1e-3, tuple(range(6))).increments(50)
        part = NoisePlan(7, 2, 1e-3, (4, 1)).increments(50)
        np.testing.assert_array_equal(part[:, 0], full[:, 4])
        np.testing.assert_array_equal(part[:, 1], full[:, 1])

    def test_reader_blocks_do_not_change_values(self):
        plan = NoisePlan(3, 1, 1e-2, (0, 1))
        a = plan.reader(block=7).take(30)
        b = plan.increments(30)
        np.testing.assert_array_equal(a, b)

    def test_moments(self):
        dt = 1e-2
        w = NoisePlan(11, 3, dt, tuple(range(200))).increments(200)
        assert abs(w.mean()) < 4 * math.sqrt(dt / w.size)
        assert w.var() / dt == pytest.approx(1.0, abs=0.02)
        corr = np.corrcoef(w[:, :, 0].ravel(), w[:, :, 1].ravel())[0, 1]
        assert abs(corr) < 0.02


class TestCsv:
    def test_roundtrip_full_precision(self, tmp_path):
        data = np.array([[0.1, 1 / 3, -2.5e-300], [np.pi, 1e17 + 1, 0.0]])
        write_csv(tmp_path / "a.csv", ["a", "b", "c"], data)
        cols, back = read_csv(tmp_path / "a.csv")
        assert cols == ["a", "b", "c"]
        np.testing.assert_array_equal(back, data)
        assert CSV_FLOAT % 0.1 == "0.10000000000000001"


def qubit_single(H=SIGMA_Z, eta=1.0):
    return BelavkinSingle(ModelParams(H, SIGMA_X, SIGMA_Z, eta, zero_kernel(2)))


class TestSimulate:
    def test_zero_steps(self):
        model = qubit_single()
        rec = run_trajectory(model, RHO_G, TimeGrid(0.0, 1e-3), NoisePlan(1, 1, 1e-3))
        assert len(rec) == 1
        np.testing.assert_array_equal(rec.states[0], RHO_G)

    def test_same_seed_identical(self):
        model = qubit_single(SIGMA_X)
        grid = TimeGrid(0.2, 1e-3)
        x0 = bloch_compose([0.3, 0.2, 0.1])
        runs = [simulate(model, x0, grid, NoisePlan(5, 1, 1e-3, (0, 1, 2)), record_paths=[0, 2]) for _ in range(2)]
        for a, b in zip(runs[0].records, runs[1].records):
            assert a.table()[1].tobytes() == b.table()[1].tobytes()
        assert runs[0].means.tobytes() == runs[1].means.tobytes()

    def test_path_sum(self, rng):
        x = rng.standard_normal((1001, 2, 2)) + 1j * rng.standard_normal((1001, 2, 2))
        np.testing.assert_allclose(path_sum(x), x.sum(axis=0), rtol=1e-13)

    def test_recorded_states_valid_and_trace_preserved(self):
        model = qubit_single(SIGMA_X, eta=0.7)
        dt = 1e-3
        res = simulate(model, bloch_compose([0.5, 0.0, 0.5]), TimeGrid(1.0, dt), NoisePlan(2, 1, dt, range(20)),
                       record_paths=range(20))
        for rec in res.records:
            validate_density(rec.states, 1e-6)
            assert np.max(rec.trace_error) <= 10 * dt

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_step_error_carries_index(self):
        class Exploding(BelavkinSingle):
            def increment(self, states, dW, dt, u=None, mean=None):
                return np.full_like(states, np.inf)

        model = Exploding(ModelParams.qubit(1.0, zero_kernel(2)))
        with pytest.raises(StepError) as exc:
            simulate(model, RHO_G, TimeGrid(0.01, 1e-3), NoisePlan(1, 1, 1e-3))
        assert exc.value.step == 0

    def test_initial_shape_checked(self):
        with pytest.raises(ValueError):
            simulate(qubit_single(), np.eye(3) / 3, TimeGrid(0.01, 1e-3), NoisePlan(1, 1, 1e-3))

    def test_weak_convergence_linear_lindblad(self):
        """Ensemble mean of the filter follows the deterministic master equation."""
        params = ModelParams(SIGMA_X, SIGMA_X, SIGMA_Z, 1.0, zero_kernel(2))
        dt = 1e-3
        grid = TimeGrid(1.0, dt)
        x0 = bloch_compose([0.2, -0.4, 0.6])
        res = simulate(BelavkinSingle(params), x0, grid, NoisePlan(99, 1, dt, range(10000)), record_every=1000)
        exact = LindbladMeanODE(params).integrate(x0, grid)
        se = res.standard_errors()
        for t in (0.5, 1.0):
            k = grid.index(t)
            gap = res.means[k] - exact[k]
            assert np.all(np.abs(gap.real) <= 3 * se[k].real + 1e-12)
            assert np.all(np.abs(gap.imag) <= 3 * se[k].imag + 1e-12)

    def test_first_order_in_dt(self):
        """Euler on the nonlinear mean equation: error halves with dt."""
        params = ModelParams.qubit(1.0, photon_exchange_kernel())
        model = LindbladMeanODE(params)
        x0 = bloch_compose([0.6, 0.2, 0.3])

        def final(dt):
            return simulate(model, x0, TimeGrid(1.0, dt), NoisePlan(0, 0, dt), record_every=10**9).final[0]

        base = 1e-2
        ref = final(base / 8)
        errs = [np.linalg.norm(final(h) - ref) for h in (base, base / 2, base / 4)]
        assert errs[0] > errs[1] > errs[2]
        # against the dt/8 run the ratios are (7/8)/(3/8) and (3/8)/(1/8) for a first-order scheme
        assert errs[0] / errs[1] == pytest.approx(7 / 3, rel=0.1)
        assert errs[1] / errs[2] == pytest.approx(3.0, rel=0.1)
        exact = model.integrate(x0, TimeGrid(1.0, base / 8))[-1]
        assert np.linalg.norm(final(base) - exact) / np.linalg.norm(final(base / 2) - exact) == pytest.approx(2, rel=0.1)

    def test_is_density_helper(self):
        assert is_density(RHO_G)
        assert not is_density(np.eye(2))
