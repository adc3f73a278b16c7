import math

import numpy as np
import pytest

from pdeascent import problems
from pdeascent.problems import (
    ConstantDiffusion,
    DomainError,
    HeatProblem,
    MertonProblem,
    StochVolProblem,
    eval_f,
    eval_h,
    linearization_coeffs,
    oracle,
    project_domain,
    riccati_solve,
)


def merton():
    return MertonProblem(lam=0.5, eta=1.0, horizon=1.0)


def stochvol(premium="linear", lam=(0.6, 0.8), kappa=(0.0, 0.0), theta=(0.0, 0.0),
             nu=(0.3, 0.4), rho=(0.0, 0.0)):
    return StochVolProblem(
        lam=lam, eta=1.0, kappa=kappa, theta=theta, nu=nu, rho=rho,
        horizon=1.0, premium=premium,
    )


def conjugate_by_grid(problem, t, x, p, q, gamma, sigma_values):
    """Independent duality oracle: brute-force sup over a sigma grid."""
    best = -math.inf
    for s in sigma_values:
        sig = problem.assemble_sigma(s)
        val = 0.5 * np.trace(sig.T @ sig @ np.atleast_2d(gamma)) - problem.f(t, x, p, q, sig)
        best = max(best, val)
    return best


# -- h -------------------------------------------------------------------------

def test_merton_h_direct_substitution():
    # the paper's p-slot in this formula is the gradient; q carries it here
    assert eval_h(merton(), 0.0, [0.0], 1.0, [1.0], [[-1.0]]) == pytest.approx(0.125)


def test_merton_h_sentinel_outside_domain():
    assert eval_h(merton(), 0.0, [0.0], 1.0, [1.0], [[0.0]]) == math.inf
    assert eval_h(merton(), 0.0, [0.0], 1.0, [1.0], [[2.0]]) == math.inf


def test_stochvol_h_no_leverage_value():
    prob = stochvol()
    x = np.array([0.0, 1.0, 1.0])  # Lambda(y) = sqrt(0.36 + 0.64) = 1
    q = np.array([1.0, 0.0, 0.0])
    gamma = np.diag([-1.0, 0.0, 0.0])
    # duality-consistent sign: -q0^2 Lambda^2 / (2 gamma00) = +0.5
    assert eval_h(prob, 0.0, x, 0.0, q, gamma) == pytest.approx(0.5)
    gamma00_pos = np.diag([0.5, 0.0, 0.0])
    assert eval_h(prob, 0.0, x, 0.0, q, gamma00_pos) == math.inf


def test_h_nondecreasing_in_gamma_on_domain():
    prob = merton()
    vals = [eval_h(prob, 0.0, [0.0], 1.0, [1.0], [[g]]) for g in (-4.0, -2.0, -1.0, -0.5)]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


# -- f -------------------------------------------------------------------------

def test_merton_f_direct_substitution():
    assert eval_f(merton(), 0.0, [0.0], 1.0, [2.0], [[1.0]]) == pytest.approx(-1.0)


def test_stochvol_f_direct_substitution():
    prob = stochvol()
    x = np.array([0.0, 1.0, 1.0])
    q = np.array([1.0, 0.0, 0.0])
    sig = prob.assemble_sigma(1.0)
    assert eval_f(prob, 0.0, x, 0.0, q, sig) == pytest.approx(-1.0)


def test_stochvol_f_includes_ou_drift_term():
    prob = stochvol(kappa=(1.0, 2.0), theta=(0.5, 0.3))
    x = np.array([0.0, 1.0, 1.0])
    q = np.array([0.0, 1.0, -1.0])
    sig = prob.assemble_sigma(0.7)
    expected = -(1.0 * (0.5 - 1.0) * 1.0 + 2.0 * (0.3 - 1.0) * (-1.0))
    assert eval_f(prob, 0.0, x, 0.0, q, sig) == pytest.approx(expected)


def test_f_rejects_sigma_outside_domain():
    prob = stochvol()
    bad = np.ones((3, 3))
    with pytest.raises(DomainError):
        eval_f(prob, 0.0, np.zeros(3), 0.0, np.zeros(3), bad)


def test_merton_duality_grid_search_recovers_h():
    prob = merton()
    grid = np.arange(0.0, 3.0, 1e-3)
    sup = conjugate_by_grid(prob, 0.0, [0.0], 1.0, [1.0], [[-1.0]], grid)
    assert sup == pytest.approx(0.125, abs=1e-5)


def test_duality_inequality_on_random_tuples():
    rng = np.random.Generator(np.random.Philox(key=101))
    prob_m = merton()
    for _ in range(300):
        p = rng.normal()
        q = rng.normal(size=1) * 2
        g = -rng.uniform(0.05, 4.0)
        s = rng.uniform(0.0, 3.0)
        lhs = 0.5 * s**2 * g - prob_m.f(0.0, [0.0], p, q, [[s]])
        assert lhs <= prob_m.h(0.0, [0.0], p, q, [[g]]) + 1e-9
    prob_s = stochvol(kappa=(1.0, 0.5), theta=(0.2, 0.4))
    for _ in range(300):
        x = np.concatenate([[rng.normal()], rng.uniform(0.2, 1.5, size=2)])
        p = rng.normal()
        q = rng.normal(size=3)
        gamma = np.diag(np.concatenate([[-rng.uniform(0.05, 4.0)], rng.normal(size=2)]))
        s = rng.uniform(0.0, 3.0)
        sig = prob_s.assemble_sigma(s)
        lhs = 0.5 * np.trace(sig.T @ sig @ gamma) - prob_s.f(0.0, x, p, q, sig)
        assert lhs <= prob_s.h(0.0, x, p, q, gamma) + 1e-9


def test_stochvol_duality_grid_search_recovers_h():
    prob = stochvol(kappa=(1.0, 0.5), theta=(0.2, 0.4))
    rng = np.random.Generator(np.random.Philox(key=55))
    grid = np.arange(0.0, 6.0, 1e-3)
    for _ in range(5):
        x = np.concatenate([[rng.normal()], rng.uniform(0.3, 1.2, size=2)])
        q = rng.normal(size=3)
        gamma = np.diag(np.concatenate([[-rng.uniform(0.3, 2.0)], rng.normal(size=2)]))
        sup = conjugate_by_grid(prob, 0.0, x, 0.0, q, gamma, grid)
        assert sup == pytest.approx(prob.h(0.0, x, 0.0, q, gamma), abs=1e-5)


def test_analytic_f_derivatives_match_finite_differences():
    rng = np.random.Generator(np.random.Philox(key=7))
    step = 1e-6
    for prob, dim in ((merton(), 1), (stochvol(kappa=(1.0, 0.5), theta=(0.2, 0.4)), 3)):
        for _ in range(20):
            x = np.concatenate([[rng.normal()], rng.uniform(0.3, 1.2, size=dim - 1)])
            p = rng.normal()
            q = rng.normal(size=dim)
            q[0] += np.sign(q[0]) * 0.2  # stay away from the |q0| kink
            s_free = rng.uniform(0.2, 2.0)
            sig = prob.assemble_sigma(s_free)

            dp = (prob.f(0.0, x, p + step, q, sig) - prob.f(0.0, x, p - step, q, sig)) / (2 * step)
            assert prob.df_dp(0.0, x, p, q, sig) == pytest.approx(dp, abs=1e-6)

            dq = np.zeros(dim)
            for i in range(dim):
                qp, qm = q.copy(), q.copy()
                qp[i] += step
                qm[i] -= step
                dq[i] = (prob.f(0.0, x, p, qp, sig) - prob.f(0.0, x, p, qm, sig)) / (2 * step)
            got = prob.df_dq(0.0, x, p, q, sig)
            np.testing.assert_allclose(got, dq, rtol=1e-6, atol=1e-6)

            sp = prob.assemble_sigma(s_free + step)
            sm = prob.assemble_sigma(s_free - step)
            ds = (prob.f(0.0, x, p, q, sp) - prob.f(0.0, x, p, q, sm)) / (2 * step)
            got_s = prob.df_dsigma(0.0, x, p, q, sig)[0, 0]
            assert got_s == pytest.approx(ds, rel=1e-6, abs=1e-6)


# -- linearization ---------------------------------------------------------------

def test_linearization_vanishes_at_optimum():
    prob = merton()
    orc = oracle(prob)
    sigma_star = orc.sigma_star
    for t, w in [(0.0, 0.0), (0.3, 0.5), (0.9, -0.7)]:
        coeffs = linearization_coeffs(prob, orc, sigma_star, t, np.array([w]))
        assert abs(coeffs.ell[0, 0]) <= 1e-6
        assert coeffs.k == 0.0


def test_linearization_constant_field_arithmetic():
    # Lambda = 0.5, dv/dw = 1, d2v/dw2 = -1, sigma = 0.2 -> ell00 = -0.3
    prob = merton()

    class FrozenField:
        def value(self, t, x):
            return 0.0

        def grad(self, t, x):
            return np.array([1.0])

        def hessian(self, t, x):
            return np.array([[-1.0]])

    coeffs = linearization_coeffs(prob, FrozenField(), ConstantDiffusion(prob, 0.2), 0.1, [0.4])
    assert coeffs.ell[0, 0] == pytest.approx(-0.5 * 1.0 + 0.2, abs=1e-12)
    assert coeffs.mu[0] == pytest.approx(0.5 * 0.2)


def test_linearization_rejects_nonfinite_field():
    prob = merton()

    class BadField:
        def value(self, t, x):
            return float("nan")

        def grad(self, t, x):
            return np.array([1.0])

        def hessian(self, t, x):
            return np.array([[-1.0]])

    with pytest.raises(problems.NonFiniteFieldError):
        linearization_coeffs(prob, BadField(), ConstantDiffusion(prob, 0.2), 0.0, [0.0])


def test_linearization_batch_matches_pointwise():
    prob = stochvol(kappa=(1.0, 0.5), theta=(0.2, 0.4))
    orc = oracle(prob)
    sigma = ConstantDiffusion(prob, 0.4)
    ts = np.array([0.1, 0.5, 0.9])
    xs = np.array([[0.0, 0.8, 0.6], [0.4, 1.0, 0.5], [-0.2, 0.7, 1.1]])
    ell = prob.ell_free_batch(
        ts, xs, orc.value_batch(ts, xs), orc.grad_batch(ts, xs),
        orc.hessian_batch(ts, xs), sigma.free_value_batch(ts, xs),
    )
    mu = prob.mu_batch(ts, xs, orc.value_batch(ts, xs), orc.grad_batch(ts, xs),
                       sigma.free_value_batch(ts, xs))
    for i in range(3):
        coeffs = linearization_coeffs(prob, orc, sigma, ts[i], xs[i])
        assert ell[i] == pytest.approx(coeffs.ell[0, 0], rel=1e-12)
        np.testing.assert_allclose(mu[i], coeffs.mu, rtol=1e-12)


# -- projection -------------------------------------------------------------------

def test_project_no_leverage_feasible_unchanged():
    prob = stochvol()
    sig = prob.assemble_sigma(0.5)
    np.testing.assert_allclose(project_domain(prob, sig), sig)


def test_project_no_leverage_masks_noise():
    prob = stochvol()
    raw = prob.assemble_sigma(0.5) + 0.3 * np.ones((3, 3))
    projected = project_domain(prob, raw)
    assert projected[0, 0] == pytest.approx(0.8)
    np.testing.assert_allclose(np.diag(projected)[1:], prob.nu)
    assert np.all(projected[np.triu_indices(3, 1)] == 0)
    assert np.all(projected[np.tril_indices(3, -1)] == 0)


def test_project_merton_sign_flip():
    prob = merton()
    projected = project_domain(prob, [[-0.3]])
    assert projected[0, 0] == pytest.approx(0.3)
    # sign is immaterial for both f and the second-order term
    q = np.array([1.3])
    assert prob.f(0, [0.0], 0.0, q, [[-0.3]]) == prob.f(0, [0.0], 0.0, q, [[0.3]])
    gamma = np.array([[-0.7]])
    assert 0.5 * (-0.3) ** 2 * gamma[0, 0] == 0.5 * 0.3**2 * gamma[0, 0]


def test_projection_idempotent_and_in_domain():
    rng = np.random.Generator(np.random.Philox(key=3))
    for prob in (merton(), stochvol(rho=(0.0, 0.0)), stochvol(rho=(0.3, -0.5))):
        for _ in range(10):
            raw = rng.normal(size=(prob.dim, prob.dim))
            once = project_domain(prob, raw)
            twice = project_domain(prob, once)
            np.testing.assert_allclose(once, twice, atol=1e-12)
            assert prob.in_domain_f(once)


def test_general_rho_f_formula_structure():
    lev = stochvol(rho=(0.4, 0.0), kappa=(1.0, 0.5), theta=(0.2, 0.4))
    x = np.array([0.1, 0.9, 0.7])
    q = np.array([1.2, 0.3, -0.4])
    raw = lev.assemble_sigma(0.6)
    raw[0, 1] = 0.1  # within |rho_1| nu_1 = 0.12
    sig = lev.project_sigma(raw)
    assert sig[1, 1] == pytest.approx(np.sqrt(0.3**2 - 0.1**2))
    lam1, lam2 = 0.6 * 0.9, 0.8 * 0.7  # linear premium at y
    drift = -(1.0 * (0.2 - 0.9) * 0.3 + 0.5 * (0.4 - 0.7) * (-0.4))
    expected = drift - 0.6 * 1.2 * abs(lam2) - 0.6 * 0.1 * 1.2 * lam1 / (0.4 * 0.3)
    assert lev.f(0.0, x, 0.0, q, sig) == pytest.approx(expected)


# -- oracles ---------------------------------------------------------------------

def test_merton_semilinear_oracle_alpha_and_value():
    prob = merton()
    orc = prob.semilinear_oracle(0.5)
    # alpha = 0.5*0.25 - 0.5*0.5 = -0.125; v(0, 0) = 1 - exp(-0.125)
    assert orc.value(0.0, [0.0]) == pytest.approx(1.0 - math.exp(-0.125), abs=1e-12)
    assert orc.value(1.0, [0.0]) == pytest.approx(0.0, abs=1e-12)


def test_merton_oracle_sigma_star():
    orc = oracle(merton())
    assert orc.sigma_star.value == pytest.approx(0.5)


def test_merton_oracle_full_nonlinear_residual():
    prob = merton()
    orc = oracle(prob)
    rng = np.random.Generator(np.random.Philox(key=21))
    for _ in range(20):
        t = rng.uniform(0, 1)
        x = rng.uniform(-1, 1, size=1)
        res = -orc.dt(t, x) - prob.h(t, x, orc.value(t, x), orc.grad(t, x), orc.hessian(t, x))
        assert abs(res) <= 1e-6


def test_merton_semilinear_oracle_pde_residual():
    prob = merton()
    for s in (0.2, 0.5, 1.1):
        orc = prob.semilinear_oracle(s)
        sig = prob.assemble_sigma(s)
        for t, w in [(0.0, 0.3), (0.4, -0.5), (0.8, 1.0)]:
            x = np.array([w])
            gamma = orc.hessian(t, x)
            res = (
                -orc.dt(t, x)
                - 0.5 * np.trace(sig.T @ sig @ gamma)
                + prob.f(t, x, orc.value(t, x), orc.grad(t, x), sig)
            )
            assert abs(res) <= 1e-9


def test_stochvol_oracle_terminal_slice_is_utility():
    prob = stochvol(kappa=(1.0, 0.5), theta=(0.2, 0.4), lam=(0.6, 0.8))
    orc = oracle(prob)
    tables = riccati_solve(prob, np.array([0.0]))
    assert np.all(tables["phi"] == 0) and np.all(tables["psi"] == 0) and np.all(tables["chi"] == 0)
    for w, y1, y2 in [(0.0, 0.5, 0.5), (0.7, 1.0, 0.2)]:
        x = np.array([w, y1, y2])
        assert orc.value(prob.horizon, x) == pytest.approx(prob.terminal(x), abs=1e-12)


def test_riccati_zero_premium_collapses_to_utility():
    prob = stochvol(lam=(0.0, 0.0), kappa=(1.0, 0.5), theta=(0.2, 0.4))
    tables = riccati_solve(prob, np.linspace(0, 1, 5))
    for key in ("phi", "psi", "chi"):
        np.testing.assert_allclose(tables[key], 0.0, atol=1e-12)


def test_stochvol_oracle_hjb_residual_small():
    prob = stochvol(lam=(0.6, 0.8), kappa=(1.0, 0.5), theta=(0.5, 0.7), nu=(0.3, 0.4))
    orc = oracle(prob)
    rng = np.random.Generator(np.random.Philox(key=77))
    worst = 0.0
    for _ in range(40):
        t = rng.uniform(0, 1)
        x = np.concatenate([[rng.uniform(-0.5, 0.5)], rng.uniform(0.2, 1.2, size=2)])
        res = -orc.dt(t, x) - prob.h(t, x, orc.value(t, x), orc.grad(t, x), orc.hessian(t, x))
        worst = max(worst, abs(res))
    assert worst <= 1e-6


def test_stochvol_oracle_derivatives_match_finite_differences():
    prob = stochvol(lam=(0.6, 0.8), kappa=(1.0, 0.5), theta=(0.5, 0.7), nu=(0.3, 0.4))
    orc = oracle(prob)
    t, x = 0.35, np.array([0.2, 0.8, 0.6])
    step = 1e-6
    g_fd = np.zeros(3)
    for i in range(3):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g_fd[i] = (orc.value(t, xp) - orc.value(t, xm)) / (2 * step)
    np.testing.assert_allclose(orc.grad(t, x), g_fd, rtol=1e-6, atol=1e-9)
    h_fd = np.zeros((3, 3))
    for j in range(3):
        xp, xm = x.copy(), x.copy()
        xp[j] += step
        xm[j] -= step
        h_fd[:, j] = (orc.grad(t, xp) - orc.grad(t, xm)) / (2 * step)
    np.testing.assert_allclose(orc.hessian(t, x), h_fd, rtol=1e-5, atol=1e-8)
    dt_fd = (orc.value(t + step, x) - orc.value(t - step, x)) / (2 * step)
    assert orc.dt(t, x) == pytest.approx(dt_fd, rel=1e-6)


def test_stochvol_sigma_star_field():
    prob = stochvol(lam=(0.6, 0.8))
    orc = oracle(prob)
    xs = np.array([[0.0, 1.0, 1.0], [0.0, 0.5, 0.25]])
    got = orc.sigma_star_fn(np.zeros(2), xs)
    lam = np.sqrt(0.36 * xs[:, 1] ** 2 + 0.64 * xs[:, 2] ** 2)
    np.testing.assert_allclose(got, lam, rtol=1e-12)


def test_riccati_rejects_negative_tau():
    with pytest.raises(ValueError):
        riccati_solve(stochvol(), np.array([-0.1]))


def test_heat_problem_oracle_residual():
    prob = HeatProblem(sigma_value=0.5, dim=2, horizon=1.0)
    orc = oracle(prob)
    sig = prob.assemble_sigma()
    for t, x in [(0.0, np.array([0.3, -0.5])), (0.7, np.array([1.0, 0.2]))]:
        gamma = orc.hessian(t, x)
        res = (
            prob.h(t, x, orc.value(t, x), orc.grad(t, x), gamma)
            - 0.5 * np.trace(sig.T @ sig @ gamma)
            + prob.f(t, x, orc.value(t, x), orc.grad(t, x), sig)
        )
        assert res == pytest.approx(0.0, abs=1e-12)
        full = -orc.dt(t, x) - prob.h(t, x, orc.value(t, x), orc.grad(t, x), gamma)
        assert full == pytest.approx(0.0, abs=1e-12)


def test_no_oracle_for_leveraged_problem():
    with pytest.raises(problems.NoOracleError):
        oracle(stochvol(rho=(0.3, 0.2)))


def test_constant_diffusion_refit_is_projected_mean():
    prob = merton()
    sigma = ConstantDiffusion(prob, 1.0)
    targets = np.array([0.4, 0.6, 0.5])
    new, residual = sigma.refit(np.zeros(3), np.zeros((3, 1)), targets)
    assert new.value == pytest.approx(0.5)
    assert residual == pytest.approx(np.sqrt(np.mean((targets - 0.5) ** 2)))


def test_network_diffusion_refit_fits_smooth_target(tmp_path):
    prob = merton()
    field = problems.NetworkDiffusion.fresh(prob, seed=4)
    rng = np.random.Generator(np.random.Philox(key=12))
    ts = rng.uniform(0, 1, size=600)
    xs = rng.uniform(-1, 1, size=(600, 1))
    targets = 0.5 + 0.2 * xs[:, 0]
    new, residual = field.refit(ts, xs, targets)
    assert residual <= 0.02
    got = new.free_value_batch(ts[:5], xs[:5])
    np.testing.assert_allclose(got, np.abs(targets[:5]), atol=0.06)
