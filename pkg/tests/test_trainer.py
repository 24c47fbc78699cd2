import numpy as np
import pytest

from koopclf.falsifier import BUDGET, SAT, UNSAT
from koopclf.losses import loss_dyn
from koopclf.sim import Box, Plant, generate_dataset
from koopclf.trainer import (
    TrainConfig, cegis_loop, init_state, learning_round, load_checkpoint, run_control_phase,
)

SMALL = dict(N=4, hidden_enc=(4,), hidden_dec=(4,), hidden_clf=(4,), N_d=300, delta_factor=1e-2)

# x' = -x + x u is exactly bilinear in the state and contracting without input
STABLE = Plant("stable", 2, 1, lambda x, u: -x + x * u[..., :1], Box.symmetric([1.0, 1.0]),
               Box.symmetric([1.0]), 0.05)
# the input has no effect and the drift is expanding
UNSTABILIZABLE = Plant("unstabilizable", 2, 1, lambda x, u: 0.5 * x, Box.symmetric([1.0, 1.0]),
                       Box.symmetric([1.0]), 0.05)


@pytest.fixture(scope="module")
def stable_data():
    return generate_dataset(STABLE, 300, seed=0, traj_len=20)


def fresh(config, plant=STABLE):
    bundle = config.make_bundle(plant.n)
    return bundle, init_state(config, bundle, plant.n)


class TestLearningRound:
    def test_zero_epochs_keep_parameters(self, stable_data):
        cfg = TrainConfig(epochs_per_round=0, **SMALL)
        bundle, state = fresh(cfg)
        out = learning_round(cfg, stable_data, state, bundle, STABLE)
        assert np.array_equal(out.theta, state.theta) and out.epoch == 0 and not out.history

    def test_deterministic(self, stable_data):
        cfg = TrainConfig(epochs_per_round=5, **SMALL)
        runs = []
        for _ in range(2):
            bundle, state = fresh(cfg)
            runs.append(learning_round(cfg, stable_data, state, bundle, STABLE))
        assert runs[0].history == runs[1].history
        assert np.array_equal(runs[0].theta, runs[1].theta)

    def test_solvable_instance_reaches_small_loss(self, stable_data):
        cfg = TrainConfig(N=3, hidden_enc=(4,), hidden_dec=(4,), hidden_clf=(4,), lr=3e-3,
                          epochs_per_round=900, loss_tol=1e-4)
        data = generate_dataset(STABLE, 200, seed=0, traj_len=20)
        bundle, state = fresh(cfg)
        out = learning_round(cfg, data, state, bundle, STABLE)
        assert min(row["total"] for row in out.history) < 1e-4
        assert out.epoch <= 900

    def test_refit_is_least_squares_optimal(self, stable_data):
        cfg = TrainConfig(epochs_per_round=3, **SMALL)
        bundle, state = fresh(cfg)
        state = learning_round(cfg, stable_data, state, bundle, STABLE)
        x, u, x1 = stable_data.transitions()
        z, z1 = bundle.lift(x), bundle.lift(x1)
        base = float(loss_dyn(z, z1, u, state.model).value)
        rng = np.random.default_rng(0)
        for _ in range(20):
            model = state.model
            bumped = type(model)(model.K_d + 1e-4 * rng.normal(size=model.K_d.shape),
                                 model.B + 1e-4 * rng.normal(size=model.B.shape), model.T)
            assert float(loss_dyn(z, z1, u, bumped).value) >= base

    def test_empty_dataset_rejected(self):
        cfg = TrainConfig(epochs_per_round=1, **SMALL)
        bundle, state = fresh(cfg)
        data = generate_dataset(STABLE, 2, seed=0)
        data.inputs[:] = np.nan
        with pytest.raises(ValueError):
            learning_round(cfg, data, state, bundle, STABLE)


class TestCegis:
    def test_stable_instance_verifies_in_one_round(self, stable_data, tmp_path):
        cfg = TrainConfig(epochs_per_round=0, max_rounds=3, **SMALL)
        art = cegis_loop(cfg, stable_data, tmp_path, plant=STABLE)
        assert art.status == UNSAT and len(art.rounds) == 1
        # the stored certificate belongs to the final parameters
        config, bundle, state, cert, data_hash = load_checkpoint(tmp_path / "checkpoint.json")
        assert cert.outcome == UNSAT and data_hash == art.dataset_hash
        assert np.array_equal(bundle.theta, art.bundle.theta)
        assert config == cfg
        assert (tmp_path / "certificate.txt").read_text() == art.certificate.to_text()

    def test_unstabilizable_ends_in_budget(self):
        data = generate_dataset(UNSTABILIZABLE, 300, seed=0, traj_len=20)
        cfg = TrainConfig(epochs_per_round=2, max_rounds=3, **SMALL)
        art = cegis_loop(cfg, data, plant=UNSTABILIZABLE)
        assert art.status == BUDGET
        assert all(r.outcome == SAT for r in art.rounds)
        counts = [r.n_counterexamples for r in art.rounds]
        assert counts == sorted(counts) and counts[0] > 0
        # every stored counterexample is inside the domain
        assert np.all(UNSTABILIZABLE.X.contains(art.state.cex))

    def test_state_dimension_checked(self, stable_data):
        cfg = TrainConfig(epochs_per_round=0, **SMALL)
        with pytest.raises(ValueError):
            cegis_loop(cfg, stable_data, plant=Plant("one", 1, 1, lambda x, u: -x, Box.symmetric([1.0]),
                                                     Box.symmetric([1.0]), 0.05))

    def test_control_phase(self, stable_data):
        cfg = TrainConfig(epochs_per_round=0, max_rounds=1, **SMALL)
        art = cegis_loop(cfg, stable_data, plant=STABLE)
        empty = run_control_phase(art, np.zeros((0, 2)))
        assert not empty.rollouts
        summary = run_control_phase(art, [[0.0, 0.0], [0.6, -0.4]])
        assert summary.rollouts[0].converged and summary.rollouts[0].t[-1] == 0.0
        assert summary.rollouts[1].converged


class TestConfig:
    def test_roundtrip(self):
        cfg = TrainConfig.for_plant("cartpole", seed=4)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.N == 12 and cfg.alpha2 == 3.0

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"nosuch": 1})

    def test_unknown_plant(self):
        with pytest.raises(ValueError, match="pendulum"):
            TrainConfig.for_plant("nosuch")

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            TrainConfig(max_rounds=0)
        with pytest.raises(ValueError):
            TrainConfig(u_mode="policy")
