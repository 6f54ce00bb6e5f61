import numpy as np
import pytest

from dsinklab.errors import OracleError
from dsinklab.models import ClassifierParams
from dsinklab.otsolver import Marginals

from conftest import random_balanced_marginals
from oracleharness import fd_gradient, feasible_plan_sample, pairwise_auc


def _params_from_vector(vec):
    return ClassifierParams("linear", [np.array([vec])], [np.zeros(1)])


class TestFdGradient:
    def test_quadratic_loss_gradient(self):
        params = _params_from_vector([1.0, 2.0])

        def loss(p):
            return 0.5 * float(np.sum(p.weights[0] ** 2))

        grad = fd_gradient(loss, params, step=1e-6)
        assert np.allclose(grad.d_weights[0], [[1.0, 2.0]], atol=1e-8)

    def test_constant_loss_zero_gradient(self):
        params = _params_from_vector([0.3, -0.7])
        grad = fd_gradient(lambda p: 4.2, params, step=1e-5)
        assert np.all(grad.d_weights[0] == 0.0)
        assert np.all(grad.d_biases[0] == 0.0)

    def test_nonfinite_probe_rejected(self):
        params = _params_from_vector([1.0])

        def loss(p):
            return float("nan")

        with pytest.raises(OracleError):
            fd_gradient(loss, params, step=1e-5)

    def test_positive_step_required(self):
        with pytest.raises(ValueError):
            fd_gradient(lambda p: 0.0, _params_from_vector([1.0]), step=0.0)


class TestFeasiblePlanSample:
    def test_balanced_uniform_2x2(self):
        marg = Marginals([0.5, 0.5], [0.5, 0.5])
        plan = feasible_plan_sample(marg, seed=0)
        assert np.allclose(plan.values.sum(axis=1), 0.5, atol=1e-9)
        assert np.allclose(plan.values.sum(axis=0), 0.5, atol=1e-9)

    def test_distinct_seeds_give_distinct_plans(self):
        marg = Marginals([0.4, 0.6], [0.3, 0.7])
        a = feasible_plan_sample(marg, seed=1)
        b = feasible_plan_sample(marg, seed=2)
        assert not np.allclose(a.values, b.values)

    def test_hundred_samples_all_feasible(self, rng):
        r, c = random_balanced_marginals(3, 3, rng)
        marg = Marginals(r, c)
        for seed in range(100):
            plan = feasible_plan_sample(marg, seed=seed)
            dev = (np.abs(plan.values.sum(axis=1) - r).sum()
                   + np.abs(plan.values.sum(axis=0) - c).sum())
            assert dev <= 1e-9
            assert np.all(plan.values > 0.0)


class TestPairwiseAuc:
    def test_perfect_separation(self):
        assert pairwise_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert pairwise_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            pairwise_auc([0.1, 0.2], [1, 1])

    def test_known_mixed_case(self):
        # pairs: (0.7,0.4)+1, (0.7,0.9)+0, (0.3,0.4)+0, (0.3,0.9)+0 -> 1/4
        assert pairwise_auc([0.7, 0.3, 0.4, 0.9], [1, 1, 0, 0]) == 0.25
