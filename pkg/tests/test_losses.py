import numpy as np
import pytest

from koopclf import autodiff as ad
from koopclf.controller import SontagTerms, sontag_control
from koopclf.edmd import BilinearModel
from koopclf.losses import (
    LossWeights, TrainingBatch, assemble, lie_derivative, loss_dyn, loss_lyap,
    loss_lyap_exponential, loss_phy, loss_recons, loss_roa, sontag_lie, total_loss,
)
from koopclf.nets import default_bundle, param_gradient
from koopclf.sim import generate_dataset, make_pendulum, rk4_step


def value(v):
    return float(ad.const(v).value)


class TestRecons:
    def test_exact(self):
        x = np.random.default_rng(0).normal(size=(5, 2))
        assert value(loss_recons(x, x)) == 0.0

    def test_single_sample(self):
        assert value(loss_recons(np.array([[1.0, 0.0]]), np.zeros((1, 2)))) == 1.0


class TestDyn:
    def test_exactly_bilinear(self):
        model = BilinearModel(np.array([[0.9, 0.1], [0.0, 0.8]]), np.array([[[0.1, 0], [0, 0.2]]]), 0.1)
        z = np.random.default_rng(1).normal(size=(6, 2))
        u = np.random.default_rng(2).normal(size=(6, 1))
        assert value(loss_dyn(z, model.predict(z, u), u, model)) < 1e-28

    def test_zero_model(self):
        z = np.random.default_rng(3).normal(size=(4, 3))
        z_next = np.random.default_rng(4).normal(size=(4, 3))
        model = BilinearModel(np.zeros((3, 3)), np.zeros((1, 3, 3)), 0.1)
        assert np.isclose(value(loss_dyn(z, z_next, np.ones((4, 1)), model)), np.mean(np.sum(z_next ** 2, 1)))

    def test_scalar(self):
        model = BilinearModel(np.array([[1.0]]), np.zeros((0, 1, 1)), 0.1)
        assert value(loss_dyn([[2.0]], [[4.0]], np.zeros((1, 0)), model)) == 4.0


class TestPhy:
    def step(self, x, u):
        p = make_pendulum()
        return np.array([rk4_step(p, xi, ui, p.T) for xi, ui in zip(x, u)])

    def test_identity_autoencoder_on_clean_data(self):
        ds = generate_dataset(make_pendulum(), 20, seed=0, traj_len=20)
        x, u, x1 = ds.transitions()
        assert value(loss_phy(x, x1, u, self.step)) < 1e-28

    def test_corrupted_successor(self):
        ds = generate_dataset(make_pendulum(), 20, seed=0, traj_len=20)
        x, u, x1 = ds.transitions()
        delta = np.random.default_rng(5).normal(scale=0.01, size=x1.shape)
        assert np.isclose(value(loss_phy(x, x1 + delta, u, self.step)), np.mean(np.sum(delta ** 2, 1)))


class TestLieDerivative:
    def test_origin(self):
        model = BilinearModel(np.eye(2) * 1.3, np.ones((1, 2, 2)), 0.1)
        assert value(lie_derivative(np.zeros((1, 2)), np.zeros((1, 2)), model, [[2.0]]).sum()) == 0.0

    def test_growth_rate(self):
        lam, T = -0.7, 0.1
        z = np.array([[0.5, -1.5]])
        model = BilinearModel((1 + lam * T) * np.eye(2), np.zeros((1, 2, 2)), T)
        out = lie_derivative(2 * z, z, model, [[0.0]])
        assert np.isclose(out.value[0], 2 * lam * np.sum(z ** 2))

    def test_input_term(self):
        T = 0.1
        model = BilinearModel(np.eye(1), T * np.eye(1)[None], T)
        out = lie_derivative(np.array([[2.0]]), np.array([[1.0]]), model, [[-3.0]])
        assert np.isclose(out.value[0], -6.0)


class TestLyap:
    def test_all_decreasing(self):
        assert value(loss_lyap(np.array([1.0, 2.0]), np.array([-1.0, -0.1]), np.zeros(1))) == 0.0

    def test_term_by_term(self):
        assert value(loss_lyap(np.array([-1.0]), np.array([0.5]), np.zeros(1))) == 1.5

    def test_exponential_inactive(self):
        z = np.array([[1.0, 2.0]])
        V = np.sum(z ** 2, 1)
        assert value(loss_lyap_exponential(V, -2 * V, z, np.zeros(1), 0.5, 2.0, 1.0)) == 0.0

    def test_exponential_upper_hinge(self):
        z = np.array([[1.0, 0.0]])
        assert value(loss_lyap_exponential(np.array([3.0]), np.array([-10.0]), z, np.zeros(1), 0.5, 2.0, 1.0)) == 1.0

    def test_exponential_origin_sample(self):
        out = loss_lyap_exponential(np.zeros(1), np.zeros(1), np.zeros((1, 2)), np.array([0.3]), 0.5, 2.0, 1.0)
        assert np.isclose(value(out), 0.09)

    def test_exponential_needs_ordering(self):
        with pytest.raises(ValueError):
            loss_lyap_exponential(np.ones(1), np.ones(1), np.ones((1, 1)), np.zeros(1), 2.0, 1.0, 1.0)


class TestRoa:
    def test_dominated(self):
        z = np.array([[3.0, 4.0]])
        assert value(loss_roa(z, np.array([6.0]), 1.0)) == 0.0

    def test_literal(self):
        assert value(loss_roa(np.array([[2.0, 0.0]]), np.array([1.0]), 1.0, hinged=False)) == 1.0

    @pytest.mark.parametrize("hinged", [True, False])
    def test_origin(self, hinged):
        assert value(loss_roa(np.zeros((1, 2)), np.zeros(1), 1.0, hinged)) == 0.0


class TestTotal:
    def parts(self, v):
        return {k: ad.Var(v) for k in ("recons", "dyn", "phy", "lyap", "roa")}

    def test_zero(self):
        assert value(total_loss(self.parts(0.0), LossWeights())) == 0.0

    def test_weighted(self):
        assert np.isclose(value(total_loss(self.parts(1.0), LossWeights())), 4.002)

    def test_alpha2_off(self):
        parts = self.parts(1.0)
        parts["dyn"] = ad.Var(1e6)
        assert np.isclose(value(total_loss(parts, LossWeights(alpha2=0.0))), 2.002)

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            LossWeights(alpha1=-1.0)
        with pytest.raises(ValueError):
            LossWeights(exponential=True, gamma1=3.0, gamma2=2.0)


def random_model(N, m, rng, T=0.01):
    return BilinearModel(np.eye(N) + T * rng.normal(size=(N, N)), T * rng.normal(size=(m, N, N)), T)


class TestSontagLie:
    def test_matches_numeric_sontag(self):
        rng = np.random.default_rng(7)
        model = random_model(3, 2, rng)
        z, g = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        lo, hi = np.full(2, -1.0), np.full(2, 1.0)
        a = np.einsum("bi,ij,bj->b", g, model.K, z)
        c = np.einsum("bi,kij,bj->bk", g, model.Q, z)
        u = np.clip(sontag_control(SontagTerms(a, c, np.zeros(20)), 1e-6), lo, hi)
        assert np.allclose(sontag_lie(g, z, model, lo, hi).value, a + np.sum(c * u, 1), atol=1e-12)

    def test_unclipped_identity(self):
        rng = np.random.default_rng(8)
        model = random_model(3, 1, rng)
        z, g = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        a = np.einsum("bi,ij,bj->b", g, model.K, z)
        c = np.einsum("bi,kij,bj->bk", g, model.Q, z)
        sigma = np.sum(c * c, 1)
        out = sontag_lie(g, z, model, None, None, clip=False).value
        assert np.allclose(out, -np.sqrt(a * a + sigma * sigma), rtol=1e-10)

    def test_no_authority(self):
        model = BilinearModel(np.eye(2), np.zeros((1, 2, 2)), 0.1)
        g, z = np.ones((1, 2)), np.ones((1, 2))
        assert np.isclose(sontag_lie(g, z, model, [-1.0], [1.0]).value[0], 0.0)


def fd(f, p, h=1e-5):
    out = np.zeros_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        out[i] = (f(p + e) - f(p - e)) / (2 * h)
    return out


@pytest.mark.parametrize("exponential", [False, True])
def test_total_loss_gradient_matches_finite_differences(exponential):
    plant = make_pendulum()
    ds = generate_dataset(plant, 30, seed=2, traj_len=15)
    bundle = default_bundle(2, 4, hidden_enc=(6,), hidden_clf=(4,))
    bundle.init(3)
    cex = np.array([[0.4, -0.3], [1.2, 0.9]])
    batch = TrainingBatch.from_dataset(ds, plant.U, cex)
    weights = LossWeights(alpha1=0.3, alpha3=0.2, exponential=exponential, gamma1=0.01, gamma2=10.0)

    def step(x, u):
        return np.array([rk4_step(plant, xi, ui, plant.T) for xi, ui in zip(x, u)])

    _, _, model, _ = assemble(bundle, ad.Var(bundle.theta), batch, None, weights, step, plant.T)

    def total(p):
        tot, *_ = assemble(bundle, ad.Var(p), batch, model, weights, step, plant.T)
        return float(tot.value)

    theta = ad.Var(bundle.theta.copy())
    tot, *_ = assemble(bundle, theta, batch, model, weights, step, plant.T)
    rev = param_gradient(tot, theta)
    num = fd(total, bundle.theta.copy())
    # two step sizes agreeing means no hinge kink was straddled
    assert np.linalg.norm(num - fd(total, bundle.theta.copy(), h=2.5e-6)) <= 1e-6 * np.linalg.norm(num)
    assert np.linalg.norm(rev - num) <= 1e-4 * np.linalg.norm(num)


def test_duplication_leaves_means_unchanged():
    plant = make_pendulum()
    ds = generate_dataset(plant, 40, seed=9, traj_len=40)
    bundle = default_bundle(2, 4, hidden_enc=(6,), hidden_clf=(4,))
    bundle.init(1)
    z = bundle.lift(ds.states)
    V = bundle.V(z)
    for f in (lambda zz, vv: loss_roa(zz, vv, 1.0), lambda zz, vv: loss_recons(zz, 0.5 * zz),
              lambda zz, vv: loss_lyap(vv, -vv + 0.1, np.zeros(1))):
        assert abs(value(f(z, V)) - value(f(np.vstack([z, z]), np.concatenate([V, V])))) < 1e-12


def test_quadratic_clf_first_clause_vanishes():
    bundle = default_bundle(2, 6)
    bundle.init(4)
    z = np.random.default_rng(0).normal(size=(10_000, 6))
    V = bundle.V(z)
    assert np.all(V >= 0)
    lie = np.random.default_rng(1).normal(size=10_000)
    assert np.isclose(value(loss_lyap(V, lie, np.zeros(1))), np.mean(np.maximum(lie, 0)), rtol=1e-12)
