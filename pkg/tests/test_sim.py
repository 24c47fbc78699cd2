import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopclf.sim import (
    PLANT_NAMES, Box, Dataset, InsufficientData, IntegrationDiverged, Plant, generate_dataset,
    hcw_mean_motion, make_cartpole, make_hcw, make_plant, make_pendulum, make_vanderpol, rk4_step,
)


def reference_step(f, x, u, T, substeps=1000):
    """Fine-step classical RK4, written out independently of the package."""
    h = T / substeps
    x = np.array(x, dtype=float)
    for _ in range(substeps):
        k1 = f(x, u)
        k2 = f(x + 0.5 * h * k1, u)
        k3 = f(x + 0.5 * h * k2, u)
        k4 = f(x + h * k3, u)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


class TestPlants:
    def test_pendulum_equilibrium_is_fixed(self):
        p = make_pendulum()
        assert np.array_equal(rk4_step(p, [0.0, 0.0], [0.0], 0.005), [0.0, 0.0])

    def test_vanderpol_equilibrium_is_fixed(self):
        p = make_vanderpol()
        assert np.array_equal(rk4_step(p, [0.0, 0.0], [0.0], 0.01), [0.0, 0.0])

    def test_pendulum_step_matches_fine_integration(self):
        p = make_pendulum()
        x = rk4_step(p, [0.1, 0.0], [0.0], 0.005)
        ref = reference_step(p.deriv, [0.1, 0.0], np.array([0.0]), 0.005)
        assert np.linalg.norm(x - ref) < 1e-10

    def test_pendulum_deriv(self):
        p = make_pendulum(m=1.0, l=1.0, g=9.81)
        assert np.allclose(p.deriv(np.zeros(2), np.zeros(1)), [0, 0])
        assert np.allclose(p.deriv(np.array([math.pi / 2, 0]), np.zeros(1)), [0, -9.81], atol=1e-15)
        assert np.allclose(p.deriv(np.array([0.0, 1.0]), np.zeros(1)), [1, 0])

    def test_pendulum_parameters_enter_gravity_term(self):
        p = make_pendulum(m=2.0, l=0.5, g=10.0)
        assert np.isclose(p.deriv(np.array([math.pi / 2, 0]), np.zeros(1))[1], -40.0)

    def test_vanderpol_printed_form(self):
        # the printed equation has +x1; the default plant uses the classical sign
        p = make_vanderpol(stiffness=1.0)
        assert np.allclose(p.deriv(np.array([0.0, 0.0]), np.zeros(1)), [0, 0])
        assert np.allclose(p.deriv(np.array([1.0, 1.0]), np.zeros(1)), [1, 1])
        assert np.allclose(p.deriv(np.array([2.0, 1.0]), np.zeros(1)), [1, -1])

    def test_vanderpol_default_is_classical_oscillator(self):
        p = make_vanderpol()
        assert np.allclose(p.deriv(np.array([2.0, 1.0]), np.zeros(1)), [1, -5])
        assert np.allclose(p.X.lo, [-10, -10]) and p.T == 0.01

    def test_cartpole_against_symbolic_substitution(self):
        p = make_cartpole()
        assert np.allclose(p.deriv(np.zeros(4), np.zeros(1)), 0.0)
        # theta = 0: denominator m_c + m_p sin^2 = 4, so both accelerations are u / 4
        assert np.allclose(p.deriv(np.zeros(4), np.array([1.0])), [0, 0, 0.25, 0.25], atol=1e-15)
        th = 0.01
        s, c = math.sin(th), math.cos(th)
        den = 4.0 + s * s
        expect = [0.0, 0.0, (1.0 * s * (-9.81 * c)) / den, (-(5.0) * 9.81 * s) / den]
        assert np.allclose(p.deriv(np.array([0, th, 0, 0]), np.zeros(1)), expect, atol=1e-12, rtol=0)

    def test_hcw(self):
        n = hcw_mean_motion()
        assert abs(n - 1.1276e-3) < 1e-7
        p = make_hcw()
        assert np.allclose(p.deriv(np.zeros(4), np.zeros(2)), 0)
        assert np.allclose(p.deriv(np.array([1.0, 0, 0, 0]), np.zeros(2)), [0, 0, 3 * n * n, 0], atol=1e-18)

    @pytest.mark.parametrize("name", PLANT_NAMES)
    def test_origin_is_equilibrium(self, name):
        p = make_plant(name)
        assert np.array_equal(p.deriv(np.zeros(p.n), np.zeros(p.m)), np.zeros(p.n))

    def test_unknown_plant_lists_valid_names(self):
        with pytest.raises(ValueError, match="pendulum"):
            make_plant("nosuch")

    @pytest.mark.parametrize("name,x", [("pendulum", [0.3, -0.2]), ("vanderpol", [1.5, 0.5]),
                                        ("cartpole", [0.1, 0.2, -0.1, 0.3])])
    def test_rk4_fifth_order_local_error(self, name, x):
        p = make_plant(name)
        u = np.full(p.m, 0.7)
        errs = []
        for T in (0.08, 0.04):
            errs.append(np.linalg.norm(rk4_step(p, x, u, T) - reference_step(p.deriv, x, u, T, 400)))
        assert 32 * 0.8 <= errs[0] / errs[1] <= 32 * 1.2

    def test_divergence_raises_with_state(self):
        blowup = Plant("blowup", 1, 1, lambda x, u: x ** 3, Box.symmetric([1.0]), Box.symmetric([1.0]), 1.0)
        with pytest.raises(IntegrationDiverged) as info:
            rk4_step(blowup, [1e120], [0.0], 1.0)
        assert info.value.state is not None


class TestDatasets:
    def test_two_snapshots_form_one_transition(self):
        p = make_pendulum()
        ds = generate_dataset(p, 2, seed=3)
        x, u, x_next = ds.transitions()
        assert len(x) == 1
        assert np.array_equal(x_next[0], rk4_step(p, x[0], u[0], p.T))

    def test_same_seed_identical(self):
        p = make_pendulum()
        a, b = generate_dataset(p, 300, seed=11), generate_dataset(p, 300, seed=11)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.inputs, b.inputs, equal_nan=True)

    def test_containment(self):
        p = make_pendulum()
        ds = generate_dataset(p, 1000, seed=7)
        assert ds.N_d == 1000
        assert np.all(p.X.contains(ds.states))
        _, u, _ = ds.transitions()
        assert np.all((u >= p.U.lo) & (u <= p.U.hi))

    @settings(max_examples=10, deadline=None)
    @given(st.sampled_from(PLANT_NAMES), st.integers(2, 120), st.integers(0, 2**16))
    def test_every_transition_reexecutes(self, name, N_d, seed):
        p = make_plant(name)
        ds = generate_dataset(p, N_d, seed=seed, traj_len=20)
        x, u, x_next = ds.transitions()
        for k in range(len(x)):
            assert np.max(np.abs(rk4_step(p, x[k], u[k], ds.T) - x_next[k])) <= 1e-12

    def test_insufficient_data(self):
        # every trajectory leaves the domain immediately
        runaway = Plant("runaway", 1, 1, lambda x, u: np.full_like(x, 1e3), Box.symmetric([1.0]),
                        Box.symmetric([1.0]), 0.1)
        with pytest.raises(InsufficientData):
            generate_dataset(runaway, 50, seed=0, max_draws=30)

    def test_csv_roundtrip(self, tmp_path):
        p = make_pendulum()
        ds = generate_dataset(p, 120, seed=5, traj_len=25)
        ds.to_csv(tmp_path / "d.csv")
        back = Dataset.from_csv(tmp_path / "d.csv")
        assert np.array_equal(back.states, ds.states)
        assert np.array_equal(back.inputs, ds.inputs, equal_nan=True)
        assert back.plant == "pendulum" and back.T == ds.T
        rows = (tmp_path / "d.csv").read_text().splitlines()
        assert rows[0] == "k,x_1,x_2,u_1"
        assert rows[-1].endswith(",")  # last snapshot has no input

    def test_box_sampling_inside(self):
        box = Box(np.array([-1.0, 0.0]), np.array([2.0, 0.5]))
        pts = box.sample(np.random.default_rng(0), size=500)
        assert np.all(box.contains(pts))
