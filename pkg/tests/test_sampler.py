import numpy as np
import pytest
from scipy import stats

from cdguide._io import FormatError
from cdguide.approximator import NumericalError
from cdguide.sampler import TrajectoryBatch, integrate, load_trajectories, sample_ode, sample_sde, save_trajectories, stream
from cdguide.schedule import NoiseSchedule, make_grid


class ZeroScore:
    dim = 2

    def __call__(self, t, x):
        return np.zeros_like(x)


def test_stream_independent_of_chunking(score_1d, ve10):
    grid = make_grid(ve10, 20)
    a = sample_sde(score_1d, ve10, grid, 37, seed=3, chunk=5)
    b = sample_sde(score_1d, ve10, grid, 37, seed=3, chunk=64)
    assert a.equals(b)


def test_prefix_paths_do_not_depend_on_batch_size(score_1d, ve10):
    grid = make_grid(ve10, 20)
    a = sample_sde(score_1d, ve10, grid, 10, seed=3)
    b = sample_sde(score_1d, ve10, grid, 25, seed=3)
    assert a.terminal.tobytes() == b.terminal[:10].tobytes()


def test_same_seed_bit_identical(score_1d, ve10):
    grid = make_grid(ve10, 50)
    assert sample_sde(score_1d, ve10, grid, 200, 9).equals(sample_sde(score_1d, ve10, grid, 200, 9))
    assert not sample_sde(score_1d, ve10, grid, 200, 9).equals(sample_sde(score_1d, ve10, grid, 200, 10))


def test_initial_draws_from_stream(score_1d, ve10):
    grid = make_grid(ve10, 10)
    batch = sample_sde(score_1d, ve10, grid, 3, seed=5)
    for j in range(3):
        assert batch.states[j, 0, 0] == 10.0 * stream(5, "paths", j).standard_normal(1)[0]


def test_empty_batch(score_1d, ve10):
    batch = sample_sde(score_1d, ve10, make_grid(ve10, 10), 0, seed=0)
    assert batch.n_paths == 0
    assert batch.states.shape == (0, 11, 1)


def test_zero_drift_ode_is_identity():
    sched = NoiseSchedule.ve(1.0, 1.0)  # f = 0
    batch = sample_ode(ZeroScore(), sched, make_grid(sched, 30), 50, seed=1)
    assert batch.terminal.tobytes() == batch.states[:, 0].tobytes()
    assert batch.increments is None


def test_sde_moments(score_1d, ve10):
    batch = sample_sde(score_1d, ve10, make_grid(ve10, 500), 10_000, seed=0, store="terminal")
    y = batch.terminal[:, 0]
    n = len(y)
    se_mean = np.sqrt(4.0 / n)
    se_var = np.sqrt(2 * 4.0**2 / (n - 1))
    assert abs(y.mean() - 1.0) < 3 * se_mean
    assert abs(y.var(ddof=1) - 4.0) < 3 * se_var
    assert batch.states is None


def test_ode_matches_exact_flow_of_prior(score_1d, ve10):
    # the exact flow maps y -> 1 + (y - 1) r with r = sd(end) / sd(T); Y_0 ~ N(0, T^2)
    grid = make_grid(ve10, 500)
    batch = sample_ode(score_1d, ve10, grid, 10_000, seed=0, store="terminal")
    r = np.sqrt(4 + ve10.noise_var(ve10.T - grid[-1])) / np.sqrt(4 + ve10.noise_var(ve10.T))
    law = stats.norm(1.0 - r, 10.0 * r)
    assert stats.kstest(batch.terminal[:, 0], law.cdf).statistic <= 0.02


@pytest.mark.xfail(strict=True, reason="p_noise N(0, T^2) ignores the data mean; the deterministic flow keeps the offset")
def test_ode_marginal_against_data_law(score_1d, ve10):
    batch = sample_ode(score_1d, ve10, make_grid(ve10, 500), 10_000, seed=0, store="terminal")
    assert stats.kstest(batch.terminal[:, 0], stats.norm(1.0, 2.0).cdf).statistic <= 0.02


def test_increments_reconstruct_path(score_1d, ve10):
    grid = make_grid(ve10, 25)
    b = sample_sde(score_1d, ve10, grid, 8, seed=2)
    g = np.array([ve10.coeffs(ve10.T - t)[1] for t in grid[:-1]])
    i = 7
    drift = -0.0 * b.states[:, i] + g[i] ** 2 * score_1d(ve10.T - grid[i], b.states[:, i])
    recon = b.states[:, i] + drift * (grid[i + 1] - grid[i]) + g[i] * b.increments[:, i]
    np.testing.assert_allclose(recon, b.states[:, i + 1], rtol=1e-13)


def test_save_load_round_trip(tmp_path, score_1d, ve10):
    b = sample_sde(score_1d, ve10, make_grid(ve10, 10), 20, seed=1)
    save_trajectories(b, tmp_path / "b.traj")
    back = load_trajectories(tmp_path / "b.traj")
    assert back.equals(b)
    assert back.schedule == ve10.to_dict()
    assert back.provenance == "pretrained"


def test_truncated_file(tmp_path, score_1d, ve10):
    b = sample_sde(score_1d, ve10, make_grid(ve10, 10), 20, seed=1)
    p = tmp_path / "b.traj"
    b.save(p)
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(FormatError, match="truncated"):
        TrajectoryBatch.load(p)


def test_version_mismatch_reports_both(tmp_path, score_1d, ve10):
    b = sample_sde(score_1d, ve10, make_grid(ve10, 10), 4, seed=1)
    p = tmp_path / "b.traj"
    b.save(p)
    raw = p.read_bytes().replace(b'"version": 1', b'"version": 7')
    p.write_bytes(raw)
    with pytest.raises(FormatError, match="7.*1"):
        TrajectoryBatch.load(p)


def test_terminal_csv(tmp_path, score_1d, ve10):
    b = sample_sde(score_1d, ve10, make_grid(ve10, 10), 6, seed=1, store="terminal")
    b.save_terminal_csv(tmp_path / "t.csv")
    back = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1, ndmin=2)
    assert back.tobytes() == b.terminal.tobytes()
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "y0"


def test_blowup_is_flagged():
    sched = NoiseSchedule.ve(1.0, 1.0)
    grid = make_grid(sched, 10)

    def drift(t, y):
        # one path explodes
        out = np.zeros_like(y)
        out[y[:, 0] > 2.5] = np.inf
        return out

    with pytest.raises(NumericalError):
        integrate(drift, sched, grid, 200, 1, seed=0)
    term, _, _, flagged = integrate(drift, sched, grid, 200, 1, seed=0, max_flag_frac=1.0)
    assert flagged > 0 and len(term) == 200 - flagged


def test_increment_variance(score_1d, ve10):
    grid = make_grid(ve10, 40)
    b = sample_sde(score_1d, ve10, grid, 4000, seed=6)
    n = b.n_paths
    var = b.increments[:, :, 0].var(axis=0, ddof=1)
    dt = np.diff(grid)
    se = dt * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(var - dt) < 5 * se)
