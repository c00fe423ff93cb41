import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fourier_age import tensor as T
from fourier_age.correction import (CandidateGenerator, CorrectionConfig, EnsembleState, ErrorVector,
                                    ErrorWeights, compute_error_vector, correction_loop,
                                    cumulative_error, ensemble_disagreement, ensemble_estimate,
                                    sample_candidates, select_candidate, train_ensemble,
                                    update_generator, weighted_error, write_trace_csv)
from fourier_age.nn import MLP
from fourier_age.optim import AdamW
from fourier_age.tensor import ContractError, DimensionError, Tensor, finite_diff_check

F64 = np.float64


def const_member(value, dim, k=1):
    """Member whose output is the constant ``value`` regardless of input."""
    m = EnsembleState.init(dim, k=k, size=1, zero=True).members[0]
    m.out.bias.data = np.full(k, value, dtype=np.float32)
    return m


def quadratic(target):
    return lambda ages: T.square(ages - target) * 0.01


class TestErrorVector:
    def test_exact_prediction(self):
        np.testing.assert_array_equal(compute_error_vector(5.0, 5.0).values, [0, 0])

    def test_two_years_off(self):
        np.testing.assert_array_equal(compute_error_vector(7.0, 5.0).values, [2, 4])

    def test_custom_metrics(self):
        metrics = (lambda x, y: np.abs(x - y) ** 0.5, lambda x, y: float(x > y))
        e = compute_error_vector(9.0, 5.0, metrics)
        np.testing.assert_allclose(e.values, [2.0, 1.0])

    def test_vectorised(self):
        x, y = np.array([1.0, 4.0]), np.array([3.0, 4.0])
        np.testing.assert_array_equal(compute_error_vector(x, y).values, [[2, 4], [0, 0]])

    def test_k_bounds(self):
        with pytest.raises(ContractError):
            ErrorVector(np.zeros(2), k=3)
        with pytest.raises(ContractError):
            compute_error_vector(1.0, 2.0, ())


class TestWeightedError:
    def test_uniform(self):
        assert weighted_error(ErrorVector([2.0, 4.0]), ErrorWeights.uniform(2)) == pytest.approx(3.0)

    def test_softmax_limit(self):
        w = ErrorWeights(Tensor(np.array([20.0, -20.0]), requires_grad=True))
        assert weighted_error(ErrorVector([2.0, 4.0]), w) == pytest.approx(2.0, abs=1e-4)

    def test_random_dot_product(self):
        rng = np.random.default_rng(0)
        e, logits = rng.uniform(0, 10, 5), rng.normal(size=5)
        w = ErrorWeights(Tensor(logits, dtype=F64))
        p = np.exp(logits) / np.exp(logits).sum()
        assert weighted_error(e, w) == pytest.approx(float(np.dot(e, p)), abs=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            weighted_error(ErrorVector([1.0, 2.0]), ErrorWeights.uniform(3))

    @settings(max_examples=50, deadline=None)
    @given(arrays(F64, 4, elements=st.floats(-30, 30)))
    def test_weights_are_probabilities(self, logits):
        w = ErrorWeights(Tensor(logits, dtype=F64)).numpy()
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-6


class TestEnsemble:
    def test_identical_members(self):
        ens = EnsembleState.init(4, k=2, size=1, seed=3)
        ens.members = ens.members * 3
        st_ = ens.state(np.random.default_rng(0).normal(size=(5, 4)), np.linspace(10, 50, 5))
        np.testing.assert_allclose(ensemble_estimate(st_, ens).data, ens.members[0](st_).data, rtol=1e-6)

    def test_two_members_mean(self):
        ens = EnsembleState.init(3, k=1, size=2, zero=True)
        ens.members = [const_member(1.0, 3), const_member(3.0, 3)]
        out = ensemble_estimate(ens.state(np.ones(3), [30.0]), ens)
        np.testing.assert_allclose(out.data, [[2.0]])

    def test_loop_and_average_oracle(self):
        ens = EnsembleState.init(6, k=2, size=4, seed=1)
        ens.target_scale = Tensor(np.array([3.0, 20.0]))
        st_ = ens.state(np.random.default_rng(2).normal(size=(7, 6)), np.linspace(1, 80, 7))
        ref = sum(m(st_).data * np.array([3.0, 20.0]) for m in ens.members) / 4
        np.testing.assert_allclose(ensemble_estimate(st_, ens).data, ref, rtol=1e-5, atol=1e-6)

    def test_permutation_invariant(self):
        ens = EnsembleState.init(4, k=2, size=3, seed=5)
        st_ = ens.state(np.random.default_rng(0).normal(size=(4, 4)), [5.0, 15.0, 25.0, 35.0])
        a = ensemble_estimate(st_, ens).data
        ens.members = ens.members[::-1]
        np.testing.assert_allclose(ensemble_estimate(st_, ens).data, a, rtol=1e-6)

    def test_single_member_has_no_disagreement(self):
        ens = EnsembleState.init(4, size=1)
        st_ = ens.state(np.ones(4), [10.0])
        np.testing.assert_array_equal(ensemble_disagreement(st_, ens).data, 0.0)

    def test_disagreement_is_std(self):
        ens = EnsembleState.init(2, k=1, size=3, zero=True)
        ens.members = [const_member(v, 2) for v in (1.0, 2.0, 6.0)]
        out = ensemble_disagreement(ens.state(np.ones(2), [1.0]), ens)
        np.testing.assert_allclose(out.data, [[np.std([1.0, 2.0, 6.0])]], rtol=1e-5)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            EnsembleState.init(3, size=0)

    def test_member_gradient(self):
        rng = np.random.default_rng(0)
        m = MLP.init(rng, 5, 8, 2)
        m.astype(F64)
        x = Tensor(rng.normal(size=(6, 5)), dtype=F64)
        y = rng.normal(size=(6, 2))
        err = finite_diff_check(lambda: T.mean(T.tsum(T.square(m(x) - y), axis=-1)), m.parameters())
        assert err < 1e-3


class TestCumulativeError:
    def setup_method(self):
        self.ens = EnsembleState.init(3, k=2, size=2, zero=True)
        self.ens.members = [const_member(v, 3, k=2) for v in (1.0, 3.0)]
        self.state = self.ens.state(np.ones(3), [20.0])

    def test_k_equals_h(self):
        w = ErrorWeights(Tensor(np.array([0.3, -0.2]), dtype=F64))
        out = cumulative_error(self.state, self.ens, w)
        assert out.data[0] == pytest.approx(weighted_error(np.array([2.0, 2.0]), w), rel=1e-6)

    def test_k_zero(self):
        ens = EnsembleState.init(3, k=0, size=1, zero=True)
        w = ErrorWeights(Tensor(np.array([0.5, -0.5]), dtype=F64))
        explicit = Tensor(np.array([[4.0, 10.0]]))
        out = cumulative_error(ens.state(np.ones(3), [20.0]), ens, w, explicit)
        assert out.data[0] == pytest.approx(weighted_error(np.array([4.0, 10.0]), w), rel=1e-6)

    def test_mixed_hand_composed(self):
        ens = EnsembleState.init(3, k=1, size=2, zero=True)
        ens.members = [const_member(v, 3) for v in (2.0, 4.0)]
        w = ErrorWeights(Tensor(np.array([1.0, 0.0]), dtype=F64))
        p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
        out = cumulative_error(ens.state(np.ones(3), [20.0]), ens, w, Tensor(np.array([[7.0]])))
        assert out.data[0] == pytest.approx(p[0] * 3.0 + p[1] * 7.0, rel=1e-6)

    def test_default_third_component_is_disagreement(self):
        w = ErrorWeights.uniform(3)
        out = cumulative_error(self.state, self.ens, w)
        assert out.data[0] == pytest.approx((2.0 + 2.0 + 1.0) / 3, rel=1e-5)

    def test_inconsistent_split(self):
        with pytest.raises(DimensionError):
            cumulative_error(self.state, self.ens, ErrorWeights.uniform(2), Tensor(np.ones((1, 2))))


class TestTrainEnsemble:
    def test_zero_member_initial_loss(self):
        rng = np.random.default_rng(0)
        states, targets = rng.normal(size=(50, 4)), rng.uniform(0, 5, (50, 2))
        ens = EnsembleState.init(3, k=2, size=1, zero=True)
        curves = train_ensemble(states, targets, ens, steps=1, lr=0.0, batch=50, fit_scale=False)
        assert curves[0][0] == pytest.approx(np.mean(np.sum(targets ** 2, axis=1)), rel=1e-5)

    def test_linear_target_converges(self):
        rng = np.random.default_rng(1)
        states = rng.normal(size=(512, 6))
        targets = states @ rng.normal(size=(6, 2))
        ens = EnsembleState.init(5, k=2, size=2, hidden=32, seed=2)
        curves = train_ensemble(states, targets, ens, steps=500, lr=3e-3, batch=128)
        for c in curves:
            assert np.mean(c[-20:]) <= 0.1 * np.mean(c[:5])
        assert ens.steps == 500

    def test_empty(self):
        with pytest.raises(ContractError):
            train_ensemble(np.zeros((0, 3)), np.zeros((0, 2)), EnsembleState.init(2))

    def test_members_differ(self):
        ens = EnsembleState.init(3, size=2, seed=0)
        assert not np.array_equal(ens.members[0].hidden.weight.data, ens.members[1].hidden.weight.data)


class TestGenerator:
    def setup_method(self):
        self.emb = np.random.default_rng(0).normal(size=6).astype(np.float32)

    def test_initial_proposal(self):
        gen = CandidateGenerator.init(6)
        mean, log_scale = gen.distribution(self.emb, np.zeros((3, 8), np.float32))
        np.testing.assert_array_equal(mean.data, 0.0)
        np.testing.assert_allclose(np.exp(log_scale.data), 4.0, rtol=1e-6)

    def test_zero_lr_is_bit_exact(self):
        gen = CandidateGenerator.init(6, seed=1)
        gen.net.out.weight.data = np.random.default_rng(2).normal(0, 0.1, gen.net.out.weight.shape).astype(np.float32)
        before = gen.state_dict()
        opt = AdamW(gen.parameters(), lr=0.0, weight_decay=0.01)
        update_generator(gen, quadratic(30.0), self.emb, 40.0, np.random.default_rng(3), opt, 16)
        for k, v in gen.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_objective_matches_loop(self):
        gen = CandidateGenerator.init(6, seed=1)
        opt = AdamW(gen.parameters(), lr=0.0)
        obj, ages = update_generator(gen, quadratic(30.0), self.emb, 40.0, np.random.default_rng(4), opt, 16)
        ref = np.mean([0.01 * (float(a) - 30.0) ** 2 for a in ages])
        assert obj == pytest.approx(ref, rel=1e-6)

    def test_reparameterised_sample(self):
        gen = CandidateGenerator.init(6, seed=1)
        ages, info = sample_candidates(gen, self.emb, 40.0, np.random.default_rng(5), 8)
        ref = info["mean"] + np.exp(info["log_scale"]) * info["noise"] + 40.0
        np.testing.assert_allclose(ages.data, ref, rtol=1e-6)

    def test_quadratic_fixture_moves_mean_to_minimiser(self):
        target, base = 30.0, 45.0
        gen = CandidateGenerator.init(6, seed=1)
        opt = AdamW(gen.parameters(), lr=0.01, weight_decay=0.0)
        z = np.zeros((1, 8), np.float32)
        rng = np.random.default_rng(6)
        dist = [abs(base + gen.distribution(self.emb, z)[0].data[0] - target)]
        for _ in range(100):
            update_generator(gen, quadratic(target), self.emb, base, rng, opt, 16)
            dist.append(abs(base + gen.distribution(self.emb, z)[0].data[0] - target))
        assert dist[-1] < dist[0]
        assert dist[-1] < 0.5 * dist[0]


class TestSelectCandidate:
    def test_argmin(self):
        errors = {10.0: 3.0, 20.0: 1.0, 30.0: 2.0}
        est = lambda a: Tensor(np.array([errors[float(x)] for x in a.data]))  # noqa: E731
        assert select_candidate([10.0, 20.0, 30.0], est) == (20.0, 1.0)

    def test_single(self):
        assert select_candidate([42.0], quadratic(40.0))[0] == 42.0

    def test_tie_goes_to_incumbent(self):
        est = lambda a: Tensor(np.ones(len(a.data)))  # noqa: E731
        assert select_candidate([17.0, 3.0, 60.0], est)[0] == 17.0

    def test_empty(self):
        with pytest.raises(ContractError):
            select_candidate([], quadratic(0.0))

    @settings(max_examples=50, deadline=None)
    @given(arrays(F64, st.integers(1, 20), elements=st.floats(1, 80)))
    def test_never_worse_than_incumbent(self, ages):
        est = quadratic(37.0)
        _, err = select_candidate(ages, est)
        assert err <= est(Tensor(ages[:1])).data[0] + 1e-9


class TestCorrectionLoop:
    def fixture(self):
        ens = EnsembleState.init(4, k=2, size=2, zero=True)
        return ens, ErrorWeights.uniform(3), CandidateGenerator.init(4, seed=0)

    def test_fast_path(self):
        ens, w, gen = self.fixture()
        res = correction_loop(33.0, np.ones(4), ens, w, gen, CorrectionConfig(epsilon=2.0),
                              np.random.default_rng(0), estimate=quadratic(33.5))
        assert (res.age, res.iterations) == (33.0, 0)

    def test_converges_and_is_monotone(self):
        ens, w, gen = self.fixture()
        cfg = CorrectionConfig(epsilon=0.05, max_iters=10)
        res = correction_loop(60.0, np.ones(4), ens, w, gen, cfg, np.random.default_rng(1),
                              estimate=quadratic(50.0))
        errs = res.selected_errors
        assert all(b <= a for a, b in zip(errs, errs[1:]))
        assert 1 <= res.iterations <= 10
        assert abs(res.age - 50.0) < abs(60.0 - 50.0)

    def test_terminates_at_cap(self):
        ens, w, gen = self.fixture()
        cfg = CorrectionConfig(epsilon=1e-9, max_iters=3)
        const = lambda a: Tensor(np.full(len(a.data), 5.0))  # noqa: E731
        res = correction_loop(20.0, np.ones(4), ens, w, gen, cfg, np.random.default_rng(2), estimate=const)
        assert res.iterations == 3 and res.age == 20.0

    def test_generator_not_mutated(self):
        ens, w, gen = self.fixture()
        before = gen.state_dict()
        correction_loop(60.0, np.ones(4), ens, w, gen, CorrectionConfig(epsilon=0.01),
                        np.random.default_rng(3), estimate=quadratic(50.0))
        for k, v in gen.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_candidates_stay_in_age_range(self):
        ens, w, gen = self.fixture()
        res = correction_loop(2.0, np.ones(4), ens, w, gen, CorrectionConfig(epsilon=1e-6),
                              np.random.default_rng(4), estimate=quadratic(-50.0))
        assert all(1.0 <= age <= 80.0 for _, age, _ in res.trace)

    def test_config_validation(self):
        for kw in ({"epsilon": 0.0}, {"max_iters": 0}, {"candidates": 0}, {"k": 4, "h": 3}):
            with pytest.raises(ValueError):
                CorrectionConfig(**kw)

    def test_trace_csv(self, tmp_path):
        ens, w, gen = self.fixture()
        res = correction_loop(60.0, np.ones(4), ens, w, gen, CorrectionConfig(epsilon=0.01, max_iters=2),
                              np.random.default_rng(5), estimate=quadratic(50.0))
        write_trace_csv(tmp_path / "t.csv", [res], sample_ids=[7])
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["sample_id", "iteration", "candidate_age", "estimated_error"]
        assert len(rows) == 1 + len(res.trace) and rows[1][0] == "7"
