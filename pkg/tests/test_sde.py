import numpy as np
import pytest

from pdeascent import sde


def const_diffusion(value):
    m = np.atleast_2d(np.asarray(value, dtype=np.float64))

    def diffusion(t, x):
        return m

    return diffusion


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        sde.GridSpec(horizon=0.0, n_steps=10)
    with pytest.raises(ValueError):
        sde.GridSpec(horizon=1.0, n_steps=0)
    g = sde.GridSpec(horizon=1.0, n_steps=20)
    assert g.dt == pytest.approx(0.05)
    assert g.times[3] == pytest.approx(0.15)


def test_zero_drift_zero_diffusion_paths_are_constant():
    grid = sde.GridSpec(horizon=1.0, n_steps=10)
    batch = sde.simulate(None, const_diffusion(0.0), np.array([2.5]), grid, n_paths=7, seed=1)
    assert np.all(batch.states == 2.5)


def test_deterministic_ou_matches_exponential_decay():
    params = sde.OUParams(kappa=1.0, theta=0.0, nu=0.0, rho=0.0)
    grid = sde.GridSpec(horizon=1.0, n_steps=1000)
    batch = sde.simulate(
        sde.ou_drift(params), sde.ou_diffusion(params), np.array([1.0]), grid, n_paths=1, seed=3
    )
    assert batch.states[-1, 0, 0] == pytest.approx(np.exp(-1.0), abs=1e-2)


def test_ou_terminal_mean_within_three_standard_errors():
    params = sde.OUParams(kappa=1.0, theta=0.0, nu=1.0, rho=0.0)
    grid = sde.GridSpec(horizon=1.0, n_steps=50)
    y0 = 1.0
    batch = sde.simulate(
        sde.ou_drift(params), sde.ou_diffusion(params), np.array([y0]), grid, n_paths=10_000, seed=5
    )
    terminal = batch.states[-1, :, 0]
    se = terminal.std(ddof=1) / np.sqrt(terminal.size)
    assert abs(terminal.mean() - y0 * np.exp(-1.0)) <= 3 * se


def test_ou_moments_match_closed_forms_within_five_standard_errors():
    params = sde.OUParams(kappa=0.8, theta=0.3, nu=0.5, rho=0.0)
    grid = sde.GridSpec(horizon=1.0, n_steps=200)
    y0 = np.array([1.2])
    batch = sde.simulate(
        sde.ou_drift(params), sde.ou_diffusion(params), y0, grid, n_paths=10_000, seed=11
    )
    terminal = batch.states[-1, :, 0]
    n = terminal.size
    mean_se = terminal.std(ddof=1) / np.sqrt(n)
    target_mean = sde.ou_mean(params, y0, 1.0)[0]
    target_var = sde.ou_variance(params, 1.0)[0]
    assert abs(terminal.mean() - target_mean) <= 5 * mean_se
    var = terminal.var(ddof=1)
    var_se = var * np.sqrt(2.0 / (n - 1))
    assert abs(var - target_var) <= 5 * var_se + 0.01 * target_var  # Euler bias margin


def test_replay_is_bit_exact():
    params = sde.OUParams(kappa=[1.0, 0.5], theta=[0.0, 0.2], nu=[0.4, 0.3], rho=[0.0, 0.0])
    grid = sde.GridSpec(horizon=1.0, n_steps=25)
    batch = sde.simulate(
        sde.ou_drift(params), sde.ou_diffusion(params), np.array([1.0, 0.5]), grid,
        n_paths=64, seed=17,
    )
    states = sde.replay(batch, sde.ou_drift(params), sde.ou_diffusion(params))
    np.testing.assert_array_equal(states, batch.states)


def test_same_seed_reproduces_batch_and_paths_independent_of_batch_size():
    grid = sde.GridSpec(horizon=1.0, n_steps=15)
    kwargs = dict(drift=None, diffusion=const_diffusion(1.0), x0=np.array([0.0]), grid=grid, seed=23)
    a = sde.simulate(n_paths=50, **kwargs)
    b = sde.simulate(n_paths=50, **kwargs)
    np.testing.assert_array_equal(a.states, b.states)
    small = sde.simulate(n_paths=10, **kwargs)
    np.testing.assert_array_equal(a.states[:, :10, :], small.states)


def test_increment_variance_near_dt():
    grid = sde.GridSpec(horizon=1.0, n_steps=20)
    db = sde.brownian_increments(grid, n_paths=4000, dim=1, seed=2)
    dt = grid.dt
    var = db[:, :, 0].var(axis=1, ddof=1)
    se = dt * np.sqrt(2.0 / (4000 - 1))
    assert np.all(np.abs(var - dt) <= 5 * se)


def test_driftless_increment_means_near_zero():
    grid = sde.GridSpec(horizon=1.0, n_steps=10)
    batch = sde.simulate(None, const_diffusion(1.0), np.array([0.0]), grid, n_paths=5000, seed=29)
    inc = np.diff(batch.states[:, :, 0], axis=0)
    se = inc.std(ddof=1, axis=1) / np.sqrt(inc.shape[1])
    assert np.all(np.abs(inc.mean(axis=1)) <= 5 * se)


def test_blowup_raises_with_step_and_path():
    grid = sde.GridSpec(horizon=1.0, n_steps=5)

    def exploding(t, x):
        return np.full_like(x, np.inf)

    with pytest.raises(sde.SimulationBlowupError) as err:
        sde.simulate(exploding, const_diffusion(0.0), np.array([1.0]), grid, n_paths=3, seed=1)
    assert err.value.step == 1


def test_filter_outliers_keeps_identical_batch():
    grid = sde.GridSpec(horizon=1.0, n_steps=4)
    batch = sde.simulate(None, const_diffusion(0.0), np.array([1.0]), grid, n_paths=20, seed=7)
    filtered, kept = sde.filter_outliers(batch, 0.95)
    assert filtered.n_paths == 20
    assert kept.size == 20


def test_filter_outliers_drops_designed_outlier():
    grid = sde.GridSpec(horizon=1.0, n_steps=8)
    batch = sde.simulate(None, const_diffusion(1.0), np.array([0.0]), grid, n_paths=100, seed=13)
    batch.states[:, 42, :] *= 1000.0
    filtered, kept = sde.filter_outliers(batch, 0.95)
    assert 42 not in kept
    assert filtered.n_paths == kept.size


def test_filter_outliers_gaussian_retention_fraction():
    grid = sde.GridSpec(horizon=1.0, n_steps=10)
    batch = sde.simulate(None, const_diffusion(1.0), np.array([0.0]), grid, n_paths=2000, seed=31)
    quantile = 0.95
    _, kept = sde.filter_outliers(batch, quantile)
    frac = kept.size / 2000
    assert quantile - 0.05 <= frac <= 1.0


def test_filter_outliers_validates_quantile():
    grid = sde.GridSpec(horizon=1.0, n_steps=2)
    batch = sde.simulate(None, const_diffusion(0.0), np.array([0.0]), grid, n_paths=2, seed=1)
    with pytest.raises(ValueError):
        sde.filter_outliers(batch, 0.4)


def test_correlated_increments_have_target_correlation():
    rng = np.random.Generator(np.random.Philox(key=99))
    db0 = rng.standard_normal(200_00)
    dw = rng.standard_normal(200_00)
    db1 = sde.correlate_increments(db0, 0.6, dw)
    corr = np.corrcoef(db0, db1)[0, 1]
    assert corr == pytest.approx(0.6, abs=0.02)


def test_ou_params_validation():
    with pytest.raises(ValueError):
        sde.OUParams(kappa=1.0, theta=0.0, nu=-0.1, rho=0.0)
    with pytest.raises(ValueError):
        sde.OUParams(kappa=1.0, theta=0.0, nu=0.1, rho=1.0)


def test_dump_paths_csv(tmp_path):
    grid = sde.GridSpec(horizon=1.0, n_steps=3)
    batch = sde.simulate(None, const_diffusion(0.5 * np.eye(2)), np.array([0.0, 1.0]), grid, n_paths=2, seed=3)
    out = tmp_path / "paths.csv"
    sde.dump_paths_csv(batch, out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "path,step,t,x_0,x_1"
    assert len(lines) == 1 + 2 * 4
