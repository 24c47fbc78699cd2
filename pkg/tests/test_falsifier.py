import numpy as np
import pytest

from koopclf.edmd import BilinearModel
from koopclf.falsifier import (
    BUDGET, EPS_FLOOR, SAT, UNSAT, Certificate, Counterexample, FalsifierQuery,
    FalsifierSoundnessError, NetworkSystem, QuadraticLiftSystem, check_counterexample,
    choose_epsilon, falsify, grid_max_margin,
)
from koopclf.nets import default_bundle
from koopclf.sim import Box

T = 0.01
UNIT = Box.symmetric([1.0, 1.0])


def scaled_identity(rate, N=2, m=0):
    return BilinearModel((1 + rate * T) * np.eye(N), np.zeros((m, N, N)), T)


class TestAnalytic:
    def test_stable_drift_is_unsat(self):
        query = FalsifierQuery(UNIT, epsilon=1e-3, delta=0.01)
        system = QuadraticLiftSystem(np.eye(2))
        res = falsify(query, system, scaled_identity(-0.5))
        assert res.outcome == UNSAT and not res.counterexamples
        # dense grid at half the resolution finds nothing either
        assert grid_max_margin(system, scaled_identity(-0.5), query) <= 1e-6

    def test_unstable_uncontrollable_is_sat(self):
        query = FalsifierQuery(UNIT, epsilon=1e-3, delta=0.01)
        system = QuadraticLiftSystem(np.eye(2))
        model = scaled_identity(0.5)
        res = falsify(query, system, model)
        assert res.outcome == SAT
        for cex in res.counterexamples:
            margin = check_counterexample(cex, system, model, query)
            # a(z) = |z|^2 under V = |z|^2 and K = 0.5 I
            assert np.isclose(margin, np.sum(cex.z ** 2) + query.tau_a)

    def test_empty_domain_is_vacuous(self):
        query = FalsifierQuery(UNIT, epsilon=10.0)
        res = falsify(query, QuadraticLiftSystem(np.eye(2)), scaled_identity(0.5))
        assert res.outcome == UNSAT and res.splits == 0 and res.boxes_processed == 1

    def test_input_authority_closes_everything(self):
        # unstable drift but full actuation: sigma > tau away from the ball
        model = BilinearModel((1 + 0.5 * T) * np.eye(2), T * np.eye(2)[None], T)
        query = FalsifierQuery(UNIT, epsilon=1e-2, delta=0.01)
        assert falsify(query, QuadraticLiftSystem(np.eye(2)), model).outcome == UNSAT

    def test_budget_exhaustion_is_reported(self):
        query = FalsifierQuery(UNIT, epsilon=1e-3, delta=1e-4, budget=3)
        # indefinite drift: violations exist only on a thin wedge, hard to find in 3 splits
        model = BilinearModel(np.eye(2) + T * np.diag([-1.0, 1e-9]), np.zeros((0, 2, 2)), T)
        res = falsify(query, QuadraticLiftSystem(np.diag([1.0, 1e-12])), model)
        assert res.outcome == BUDGET
        assert res.suspicious_box is not None and res.splits == 3
        assert "suspicious_upper_bound" in res.certificate().to_text()

    def test_dataset_mode_respects_input_box(self):
        # a = |z|^2 (unstable), c = 2|z|^2 per input; inf over u in [-1, 1] is |z|^2 - 2|z|^2 < 0
        model = BilinearModel((1 + 0.5 * T) * np.eye(2), T * np.eye(2)[None], T)
        query = FalsifierQuery(UNIT, epsilon=1e-3, delta=0.01, mode="dataset", U=Box.symmetric([1.0]))
        assert falsify(query, QuadraticLiftSystem(np.eye(2)), model).outcome == UNSAT
        tight = FalsifierQuery(UNIT, epsilon=1e-3, delta=0.01, mode="dataset", U=Box.symmetric([0.1]))
        assert falsify(tight, QuadraticLiftSystem(np.eye(2)), model).outcome == SAT


class TestEpsilon:
    def test_all_large(self):
        assert choose_epsilon(5.0, [2.0, 3.0]) == 1e-3

    def test_small_term(self):
        assert np.isclose(choose_epsilon(5.0, [0.01, 4.0]), 1e-5)

    def test_floor(self):
        assert choose_epsilon(5.0, [0.0]) == EPS_FLOOR


class TestSoundness:
    def test_negative_margin_raises(self):
        query = FalsifierQuery(UNIT, epsilon=1e-3)
        x = np.array([np.sqrt(0.1), 0.0])
        fake = Counterexample(x, x, "decrease", 0.1)
        with pytest.raises(FalsifierSoundnessError):
            check_counterexample(fake, QuadraticLiftSystem(np.eye(2)), scaled_identity(-0.5), query)

    def test_inside_ball_raises(self):
        query = FalsifierQuery(UNIT, epsilon=0.5)
        x = np.array([0.1, 0.0])
        with pytest.raises(FalsifierSoundnessError):
            check_counterexample(Counterexample(x, x, "decrease", 1.0), QuadraticLiftSystem(np.eye(2)),
                                 scaled_identity(0.5), query)


def network_instance(seed, zero_clf=False):
    bundle = default_bundle(2, 5, hidden_enc=(8,), hidden_clf=(8,))
    bundle.init(seed)
    if zero_clf:
        a, b = bundle.layout()["clf"]
        bundle.theta[a:b] = 0.0
    return bundle


class TestNetwork:
    def test_contracting_model_unsat_and_grid_agrees(self):
        # W = 0 makes V = gamma |z|^2, so a = -2 gamma |z|^2 under K = -I
        bundle = network_instance(0, zero_clf=True)
        system = NetworkSystem(bundle)
        model = scaled_identity(-1.0, N=bundle.N, m=1)
        query = FalsifierQuery(UNIT, epsilon=1e-3, delta=0.02)
        assert falsify(query, system, model).outcome == UNSAT
        assert grid_max_margin(system, model, query) <= 1e-6

    def test_counterexamples_are_sound(self):
        bundle = network_instance(1)
        rng = np.random.default_rng(2)
        N = bundle.N
        model = BilinearModel(np.eye(N) + T * rng.normal(size=(N, N)), T * 0.01 * rng.normal(size=(1, N, N)), T)
        query = FalsifierQuery(UNIT, epsilon=1e-3, delta=0.05, budget=20_000)
        res = falsify(query, NetworkSystem(bundle), model)
        assert res.outcome == SAT
        for cex in res.counterexamples:
            assert check_counterexample(cex, NetworkSystem(bundle), model, query) > 0

    def test_halving_delta_keeps_sat(self):
        bundle = network_instance(3)
        N = bundle.N
        model = BilinearModel(np.eye(N) + 0.2 * T * np.eye(N), np.zeros((1, N, N)), T)
        outcomes = []
        for delta in (0.2, 0.1, 0.05):
            outcomes.append(falsify(FalsifierQuery(UNIT, epsilon=1e-3, delta=delta), NetworkSystem(bundle),
                                    model).outcome)
        first_sat = outcomes.index(SAT) if SAT in outcomes else len(outcomes)
        assert all(o == SAT for o in outcomes[first_sat:])


class TestCertificate:
    def test_roundtrip(self, tmp_path):
        query = FalsifierQuery(UNIT, epsilon=1e-3, delta=0.01)
        res = falsify(query, QuadraticLiftSystem(np.eye(2)), scaled_identity(0.5))
        cert = res.certificate()
        cert.write(tmp_path / "c.txt")
        back = Certificate.read(tmp_path / "c.txt")
        assert back.to_text() == cert.to_text()
        assert back.outcome == SAT and "cex_margin" in back.extra

    def test_timing_only_on_request(self):
        query = FalsifierQuery(UNIT, epsilon=10.0)
        cert = falsify(query, QuadraticLiftSystem(np.eye(2)), scaled_identity(0.5)).certificate()
        assert "wall_time" not in cert.to_text()
        assert "wall_time" in cert.to_text(include_timing=True)

    def test_malformed_reports_line(self):
        with pytest.raises(ValueError, match=":2:"):
            Certificate.from_text("outcome = SAT\nbroken\n")


class TestQueryValidation:
    def test_bad_delta(self):
        with pytest.raises(ValueError):
            FalsifierQuery(UNIT, epsilon=1e-3, delta=0.0)

    def test_dataset_mode_needs_inputs(self):
        with pytest.raises(ValueError):
            FalsifierQuery(UNIT, epsilon=1e-3, mode="dataset")
