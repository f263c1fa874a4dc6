import numpy as np
import pytest
from hypothesis import given, strategies as st

from compfactor.core_ops import ValidationError
from compfactor.population import Dataset, generate_synthetic, sample_observations
from compfactor.solver import (
    DomainError,
    SolverOptions,
    initial_point,
    kkt_residuals,
    neg_log_likelihood,
    nll_gradient,
    objective_value,
    prox_logdet,
    prox_nuclear,
    prox_trace_psd,
    solve_composite,
    solve_factor,
)
from conftest import random_sym
from oracles import composite_fista, golden_section, nuclear_norm_2x2, nuclear_prox_2x2

seeds = st.integers(0, 2**32 - 1)


def spd(rng, n):
    g = rng.standard_normal((n, n))
    return g @ g.T / n + 0.5 * np.eye(n)


# --- proximal maps against independent minimizers ----------------------------


def prox_logdet_objective(z, s, m, rho):
    return -np.linalg.slogdet(z)[1] + np.sum(s * z) + rho / 2 * np.sum((z - m) ** 2)


def test_prox_logdet_scalar_golden_section(rng):
    for _ in range(50):
        s, m, rho = rng.uniform(0.1, 3), rng.normal(0, 2), rng.uniform(0.1, 5)
        ref = golden_section(lambda z: -np.log(z) + s * z + rho / 2 * (z - m) ** 2, 1e-12, 50.0)
        assert prox_logdet(np.array([[m]]), np.array([[s]]), rho)[0, 0] == pytest.approx(ref, abs=1e-6)


def test_prox_logdet_line_optimality(rng):
    # along any symmetric direction H the minimizer of t -> objective(Z + tH) is t = 0
    for _ in range(20):
        n = int(rng.integers(2, 6))
        s, m, rho = spd(rng, n), random_sym(rng, n), rng.uniform(0.2, 4)
        z = prox_logdet(m, s, rho)
        assert np.linalg.eigvalsh(z)[0] > 0
        for _ in range(3):
            h = random_sym(rng, n)
            h /= np.linalg.norm(h)
            half = 0.5 * np.linalg.eigvalsh(z)[0]
            t = golden_section(lambda t: prox_logdet_objective(z + t * h, s, m, rho), -half, half)
            assert abs(t) <= 1e-6


def test_nuclear_norm_closed_form(rng):
    for _ in range(20):
        x = rng.standard_normal((2, 2))
        assert nuclear_norm_2x2(x) == pytest.approx(np.linalg.svd(x, compute_uv=False).sum(), rel=1e-12)


def test_prox_nuclear_matches_2x2_reduction(rng):
    for _ in range(50):
        k = rng.normal(0, 1.5, (2, 2))
        t = rng.uniform(0.05, 2.0)
        ref = nuclear_prox_2x2(k, t)
        assert np.allclose(prox_nuclear(k, t), ref, atol=1e-6)
        # the reference is a minimizer: no dense-grid perturbation improves it
        obj = lambda x: t * nuclear_norm_2x2(x) + 0.5 * np.sum((x - k) ** 2)  # noqa: E731
        steps = np.linspace(-1e-3, 1e-3, 5)
        assert all(
            obj(ref + np.array([[a, b], [c, d]])) >= obj(ref) - 1e-14
            for a in steps for b in steps for c in steps for d in steps
        )


def _nuclear_subgradient_gap(x, k, t, tol=1e-9):
    """Distance of (K - X)/t from the nuclear-norm subdifferential at X."""
    g = (k - x) / t
    u, s, vt = np.linalg.svd(x)
    r = int(np.sum(s > tol))
    u1, v1 = u[:, :r], vt[:r].T
    w = g - u1 @ v1.T
    on_support = np.linalg.norm(u1.T @ w) + np.linalg.norm(w @ v1)
    return on_support, np.linalg.norm(w, 2)


def test_prox_nuclear_subgradient_membership(rng):
    for _ in range(50):
        shape = tuple(int(v) for v in rng.integers(1, 7, size=2))
        k = rng.standard_normal(shape) * 2
        t = rng.uniform(0.1, 2.0)
        x = prox_nuclear(k, t)
        on, spec = _nuclear_subgradient_gap(x, k, t)
        assert on <= 1e-6 and spec <= 1 + 1e-6


def test_prox_trace_psd_membership(rng):
    # X solves the problem iff X >= 0, Y = X - L + tI >= 0 and <X, Y> = 0
    for _ in range(50):
        n = int(rng.integers(1, 7))
        l, t = random_sym(rng, n) * 2, rng.uniform(0.0, 1.5)
        x = prox_trace_psd(l, t)
        y = x - l + t * np.eye(n)
        assert np.linalg.eigvalsh(x)[0] >= -1e-10
        assert np.linalg.eigvalsh(y)[0] >= -1e-9
        assert abs(np.sum(x * y)) <= 1e-8


def test_prox_trace_psd_scalar_golden_section(rng):
    for _ in range(50):
        l, t = rng.normal(0, 2), rng.uniform(0, 2)
        ref = golden_section(lambda x: t * x + 0.5 * (x - l) ** 2, 0.0, 20.0)
        assert prox_trace_psd(np.array([[l]]), t)[0, 0] == pytest.approx(ref, abs=1e-6)


def test_prox_argument_validation():
    with pytest.raises(ValidationError):
        prox_logdet(np.eye(2), np.eye(2), 0.0)
    with pytest.raises(ValidationError):
        prox_nuclear(np.eye(2), -1.0)
    with pytest.raises(ValidationError):
        prox_trace_psd(np.eye(2), -1.0)


def _firm(pa, pb, a, b):
    d = pa - pb
    return np.sum(d * d) <= np.sum(d * (a - b)) + 1e-8


@given(seeds)
def test_prox_logdet_firmly_nonexpansive(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    s, rho = spd(rng, n), rng.uniform(0.1, 5)
    a, b = random_sym(rng, n) * 3, random_sym(rng, n) * 3
    # the prox of f/rho is firmly nonexpansive; prox_logdet(m, S, rho) is that map
    assert _firm(prox_logdet(a, s, rho), prox_logdet(b, s, rho), a, b)


@given(seeds)
def test_prox_nuclear_firmly_nonexpansive(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
    a, b, t = rng.standard_normal(shape) * 2, rng.standard_normal(shape) * 2, rng.uniform(0, 2)
    assert _firm(prox_nuclear(a, t), prox_nuclear(b, t), a, b)


@given(seeds)
def test_prox_trace_psd_firmly_nonexpansive(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    a, b, t = random_sym(rng, n) * 2, random_sym(rng, n) * 2, rng.uniform(0, 2)
    assert _firm(prox_trace_psd(a, t), prox_trace_psd(b, t), a, b)


# --- likelihood pieces -------------------------------------------------------


def test_nll_and_gradient_finite_difference(rng):
    n = 4
    s, theta = spd(rng, n), spd(rng, n)
    h = random_sym(rng, n)
    eps = 1e-6
    fd = (neg_log_likelihood(theta + eps * h, s) - neg_log_likelihood(theta - eps * h, s)) / (2 * eps)
    assert fd == pytest.approx(np.sum(nll_gradient(theta, s) * h), rel=1e-6)
    with pytest.raises(DomainError):
        neg_log_likelihood(-np.eye(n), s)


# --- the solver --------------------------------------------------------------


@pytest.fixture(scope="module")
def small_problem():
    pop = generate_synthetic(10, 3, 1, 1, seed=2)
    return pop, sample_observations(pop, 2000, seed=5)


def test_solver_feasibility_and_kkt(small_problem):
    _, data = small_problem
    opts = SolverOptions(lambda_n=0.08, gamma=1.5, tol_primal=1e-9, tol_dual=1e-9)
    rep = solve_composite(data, opts)
    est = rep.estimate
    assert rep.converged
    assert np.array_equal(est.theta[:10, :10], np.diag(est.d_y) - est.l_y) or np.allclose(
        est.theta[:10, :10], np.diag(est.d_y) - est.l_y, atol=1e-12
    )
    assert np.linalg.eigvalsh(est.l_y)[0] >= -1e-8
    assert np.linalg.eigvalsh(est.theta)[0] > 0
    assert kkt_residuals(est, data.sample_cov, 0.08, 1.5).max <= 1e-6
    d0, l0, k0, o0 = initial_point(data.sample_cov, 10)
    theta0 = np.block([[np.diag(d0) - l0, k0], [k0.T, o0]])
    assert rep.objective <= objective_value(theta0, l0, k0, data.sample_cov, 0.08, 1.5)


def test_solver_matches_accelerated_gradient_reference(small_problem):
    _, data = small_problem
    rep = solve_composite(data, SolverOptions(lambda_n=0.05, gamma=2.0, tol_primal=1e-10, tol_dual=1e-10))
    ref, _ = composite_fista(data.sample_cov, 10, 0.05, 2.0)
    assert rep.objective == pytest.approx(ref, rel=1e-8)


def test_solver_matches_cvxpy(small_problem):
    cp = pytest.importorskip("cvxpy")
    _, data = small_problem
    p, q = data.p, data.q
    lam, gamma = 0.1, 1.0
    d = cp.Variable(p)
    l = cp.Variable((p, p), PSD=True)
    k = cp.Variable((p, q))
    o = cp.Variable((q, q), symmetric=True)
    theta = cp.bmat([[cp.diag(d) - l, k], [k.T, o]])
    obj = -cp.log_det(theta) + cp.trace(theta @ data.sample_cov) + lam * (gamma * cp.normNuc(k) + cp.trace(l))
    prob = cp.Problem(cp.Minimize(obj))
    prob.solve(solver=cp.CLARABEL) if "CLARABEL" in cp.installed_solvers() else prob.solve(solver=cp.SCS, eps=1e-9)
    rep = solve_composite(data, SolverOptions(lambda_n=lam, gamma=gamma, tol_primal=1e-9, tol_dual=1e-9))
    assert rep.objective == pytest.approx(prob.value, rel=1e-5)


def test_permuting_responses_permutes_solution(small_problem):
    _, data = small_problem
    perm = np.random.default_rng(0).permutation(data.p)
    opts = SolverOptions(lambda_n=0.08, gamma=1.5, tol_primal=1e-10, tol_dual=1e-10)
    a = solve_composite(data, opts).estimate
    b = solve_composite(data.permute_y(perm), opts).estimate
    assert np.allclose(b.d_y, a.d_y[perm], atol=1e-6)
    assert np.allclose(b.l_y, a.l_y[np.ix_(perm, perm)], atol=1e-6)
    assert np.allclose(b.theta_yx, a.theta_yx[perm], atol=1e-6)


def test_non_convergence_is_reported_not_raised(small_problem):
    _, data = small_problem
    rep = solve_composite(data, SolverOptions(max_iters=2))
    assert not rep.converged and rep.iterations == 2


def test_warm_start_saves_iterations(small_problem):
    _, data = small_problem
    opts = SolverOptions(lambda_n=0.08, gamma=1.5)
    cold = solve_composite(data, opts)
    warm = solve_composite(data, SolverOptions(lambda_n=0.085, gamma=1.5), warm=cold.warm)
    assert warm.converged and warm.iterations < cold.iterations


def test_zero_lambda_is_plain_maximum_likelihood(small_problem):
    _, data = small_problem
    rep = solve_composite(data, SolverOptions(lambda_n=0.0, tol_primal=1e-10, tol_dual=1e-10))
    # with no penalty the optimum is the inverse sample covariance
    assert np.allclose(rep.estimate.theta, np.linalg.inv(data.sample_cov), atol=1e-5)


def test_factor_program(small_problem):
    _, data = small_problem
    fm, rep = solve_factor(data, 0.1, SolverOptions(tol_primal=1e-9, tol_dual=1e-9))
    assert rep.converged and rep.estimate.q == 0
    assert fm.p == data.p and np.linalg.eigvalsh(fm.l)[0] >= -1e-8
    with pytest.raises(ValidationError):
        solve_factor(data, 0.0)


def test_option_validation():
    for bad in ({"lambda_n": -1}, {"gamma": 0}, {"rho_admm": 0}, {"max_iters": 0}, {"tol_primal": 0}, {"rank_tol": 1}):
        with pytest.raises(ValidationError):
            SolverOptions(**bad)
    with pytest.raises(ValidationError):
        solve_composite(Dataset(np.ones((3, 2)), 2, 0), SolverOptions())
