import numpy as np
import pytest

from cdguide.approximator import MLP, OptimizerConfig
from cdguide.schedule import NoiseSchedule
from cdguide.score import AnalyticScore, GaussianMixture, LearnedScore, dsm_train


def test_gaussian_score_at_zero(score_1d):
    assert score_1d(0.0, np.array([[3.0]]))[0, 0] == pytest.approx(-0.5)


def test_gaussian_score_zero_at_mean_at_horizon(score_1d):
    assert score_1d(10.0, np.array([[1.0]]))[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_symmetric_mixture():
    prior = GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [[[1.0]], [[1.0]]])
    s = AnalyticScore(NoiseSchedule.ve(1e-5, 1.0), prior)
    assert s(0.0, np.array([[0.0]]))[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_mixture_score_matches_finite_difference():
    prior = GaussianMixture([0.2, 0.8], [[-1.0, 0.5], [2.0, 1.0]], [np.diag([1.0, 0.5]), [[2.0, 0.3], [0.3, 1.0]]])
    sched = NoiseSchedule.vp(0.1, 20.0, 1.0)
    law_t = 0.3
    s = AnalyticScore(sched, prior)
    from cdguide.schedule import forward_marginal_gaussian

    law = forward_marginal_gaussian(sched, prior, law_t)
    x = np.random.default_rng(0).normal(size=(20, 2))
    h = 1e-5
    fd = np.stack([(law.logpdf(x + h * e) - law.logpdf(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
    np.testing.assert_allclose(s(law_t, x), fd, rtol=1e-6, atol=1e-8)


def test_mixture_round_trip():
    prior = GaussianMixture([0.4, 0.6], [[0.0], [3.0]], [[[1.0]], [[2.0]]])
    back = GaussianMixture.from_dict(prior.to_dict())
    np.testing.assert_array_equal(back.means, prior.means)
    np.testing.assert_array_equal(back.covs, prior.covs)


def test_bad_mixture():
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    with pytest.raises(ValueError):
        GaussianMixture.gaussian([0.0], [[-1.0]])


def test_empty_dataset():
    sched = NoiseSchedule.ve(1e-3, 1.0)
    with pytest.raises(ValueError):
        dsm_train(MLP(1, (8,), 1), np.empty((0, 1)), sched)


def test_repeated_point_dataset():
    # one data point: the DSM target is the exact score of N(m x*, v)
    sched = NoiseSchedule.ve(1e-3, 1.0)
    data = np.full((500, 1), 0.7)
    net = MLP(1, (32, 32), 1, T=sched.T, seed=1)
    opt = OptimizerConfig(A=1e-2, B=100.0, zeta=0.6, adam=True, iterations=4000, batch_size=256, average_tail=0.5)
    model = dsm_train(net, data, sched, opt, seed=2)
    t = 0.8
    x = 0.7 + 1.5 * np.sqrt(sched.noise_var(t)) * np.linspace(-1, 1, 9)[:, None]
    exact = -(x - 0.7) / sched.noise_var(t)
    np.testing.assert_allclose(model(t, x), exact, atol=0.05 * np.max(np.abs(exact)))


def test_learned_score_save_load(tmp_path):
    sched = NoiseSchedule.vp()
    net = MLP(2, (8,), 2, T=1.0, seed=3)
    model = LearnedScore(net, sched, [0.5, -0.5], 2.0)
    model.save(tmp_path / "s.params")
    back = LearnedScore.load(tmp_path / "s.params")
    x = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_array_equal(back(0.4, x), model(0.4, x))
    assert back.sched == sched


@pytest.mark.slow
def test_dsm_matches_analytic_score(ve10, prior_1d, score_1d):
    data = prior_1d.sample(np.random.default_rng(0), 100_000)
    opt = OptimizerConfig(A=1.0, B=1000.0, zeta=1.0, adam=True, batch_size=512, iterations=10000)
    model = dsm_train(MLP(1, (64, 64), 1, T=10.0, seed=1), data, ve10, opt, seed=2)
    rng = np.random.default_rng(3)
    errs = []
    for t in np.linspace(1.0, 10.0, 10):
        sd = np.sqrt(4 + ve10.noise_var(t))
        x = 1 + rng.uniform(-2, 2, (2000, 1)) * sd
        errs.append(np.mean((model(t, x) - score_1d(t, x)) ** 2))
    assert np.mean(errs) <= 0.05
