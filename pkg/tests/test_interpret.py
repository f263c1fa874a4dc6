import numpy as np
import pytest
from hypothesis import given, strategies as st

from compfactor.core_ops import BlockPrecision, ValidationError
from compfactor.interpret import (
    CandidateModel,
    Conditions,
    DegenerateModelError,
    SweepGrid,
    candidate_rows,
    check_conditions,
    covariate_strengths,
    deviation_metric,
    evaluate_candidates,
    interpret,
    orthonormal_rebasis,
    row_space_basis,
    select_models,
    sweep_grid,
)
from compfactor.population import FactorModelParams, generate_synthetic, marginalize_factor, sample_observations
from compfactor.solver import SolverOptions

seeds = st.integers(0, 2**32 - 1)


def exact_candidate(pop, lam=0.1, gamma=1.0):
    est = pop.precision
    return CandidateModel(est, lam, gamma, pop.k_x, pop.k_u)


def random_theta_yx(rng):
    p, q = int(rng.integers(2, 9)), int(rng.integers(2, 7))
    d = int(rng.integers(1, min(p, q) + 1))
    return rng.standard_normal((p, d)) @ rng.standard_normal((d, q)), d


@given(seeds)
def test_strengths_invariant_under_rebasis(seed):
    rng = np.random.default_rng(seed)
    theta_yx, d = random_theta_yx(rng)
    v = row_space_basis(theta_yx, d)
    w = orthonormal_rebasis(v, rng)
    assert np.allclose(v.T @ v, np.eye(d), atol=1e-10)
    assert np.allclose(covariate_strengths(w), covariate_strengths(v), atol=1e-8)
    assert covariate_strengths(v).sum() == pytest.approx(d)


@given(seeds)
def test_strengths_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    theta_yx, d = random_theta_yx(rng)
    perm = rng.permutation(theta_yx.shape[1])
    base = covariate_strengths(row_space_basis(theta_yx, d))
    permuted = covariate_strengths(row_space_basis(theta_yx[:, perm], d))
    assert np.allclose(permuted, base[perm], atol=1e-8)


def test_deviation_zero_exactly_at_the_marginal_model():
    pop = generate_synthetic(10, 3, 1, 2, seed=4)
    fm = marginalize_factor(pop)
    assert deviation_metric(pop.precision, fm) <= 1e-10
    shifted = FactorModelParams(fm.d * 1.01, fm.l)
    assert deviation_metric(pop.precision, shifted) == pytest.approx(0.01 / 1.01, rel=1e-6)
    bent = FactorModelParams(fm.d, fm.l + 1e-3 * np.eye(10))
    assert deviation_metric(pop.precision, bent) > 1e-6
    with pytest.raises(DegenerateModelError):
        deviation_metric(pop.precision, FactorModelParams(fm.d, np.zeros((10, 10))))


def test_population_precision_satisfies_conditions():
    pop = generate_synthetic(12, 4, 2, 1, seed=1)
    cond = check_conditions(exact_candidate(pop), marginalize_factor(pop), rank_tol=1e-8)
    assert cond.all


def test_conditions_detect_rank_mismatch():
    pop = generate_synthetic(12, 4, 2, 1, seed=1)
    fm = marginalize_factor(pop)
    wrong = FactorModelParams(fm.d, fm.l + 0.5 * np.outer(np.eye(12)[0], np.eye(12)[0]))
    cond = check_conditions(exact_candidate(pop), wrong, rank_tol=1e-8)
    assert not cond.cond_ii and not cond.cond_iii


def _fake(est, lam, gamma, dev, ok=True):
    cond = Conditions(True, ok, ok, ok)
    return CandidateModel(est, lam, gamma, 1, 1, cond, dev if ok else None)


def test_select_models_tie_breaking_and_filtering():
    pop = generate_synthetic(8, 3, 1, 1, seed=0)
    est, fm = pop.precision, marginalize_factor(pop)
    cands = [
        _fake(est, 0.3, 1.0, 0.2),
        _fake(est, 0.1, 2.0, 0.2),
        _fake(est, 0.1, 1.5, 0.2),
        _fake(est, 0.05, 1.0, 0.1, ok=False),
    ]
    out = select_models(cands, fm, [1, 2])
    assert set(out) == {1}
    chosen = out[1].chosen
    assert (chosen.lambda_n, chosen.gamma) == (0.1, 1.5)
    assert out[1].strengths.shape == (3,)


def test_sweep_grid_validation():
    with pytest.raises(ValidationError):
        SweepGrid((), (1.0,))
    with pytest.raises(ValidationError):
        SweepGrid((0.2, 0.1), (1.0,))
    with pytest.raises(ValidationError):
        SweepGrid((0.1,), (-1.0,))
    g = SweepGrid.default()
    assert g.size == 25 * 12 and g.lambda_values[0] == pytest.approx(0.01) and g.gamma_values[-1] == 4.0


@pytest.fixture(scope="module")
def recovered():
    pop = generate_synthetic(15, 4, 1, 1, seed=11)
    data = sample_observations(pop, 20000, seed=3)
    grid = SweepGrid(tuple(np.logspace(-1.5, -0.3, 8)), (1.0, 2.0, 3.0))
    results, cands = interpret(data, marginalize_factor(pop), grid, SolverOptions(tol_primal=1e-5, tol_dual=1e-5))
    return pop, data, grid, results, cands


def test_pipeline_recovers_structure(recovered):
    pop, _, grid, results, cands = recovered
    assert len(cands) <= grid.size
    assert 1 in results
    res = results[1]
    assert res.chosen.qualifies and res.chosen.rank_l == 1
    # the recovered covariate direction matches the population row space of A
    v_true = row_space_basis(pop.a_star, 1)
    assert abs(float(v_true[:, 0] @ res.basis_v[:, 0])) > 0.95


def test_selected_models_satisfy_conditions(recovered):
    pop, _, _, results, _ = recovered
    fm = marginalize_factor(pop)
    for r in results.values():
        assert check_conditions(r.chosen, fm).all
        assert r.chosen.deviation == pytest.approx(deviation_metric(r.chosen, fm))


def test_permuting_covariates_permutes_strengths(recovered):
    pop, data, grid, results, _ = recovered
    perm = np.array([2, 0, 3, 1])
    res_p, _ = interpret(data.permute_x(perm), marginalize_factor(pop), grid, SolverOptions(tol_primal=1e-5, tol_dual=1e-5))
    assert np.allclose(res_p[1].strengths, results[1].strengths[perm], atol=1e-5)


def test_candidate_rows_and_evaluation(recovered):
    pop, data, _, _, cands = recovered
    rows = candidate_rows(cands)
    assert len(rows) == len(cands)
    assert set(rows[0]) == {"lambda", "gamma", "d", "rank_l", "cond_i", "cond_ii", "cond_iii", "deviation"}
    assert all((r["deviation"] is None) != (r["cond_i"] and r["cond_ii"] and r["cond_iii"]) for r in rows)
    raw = sweep_grid(data, SweepGrid((0.1,), (1.0,)))
    assert raw[0].conditions is None
    assert evaluate_candidates(raw, marginalize_factor(pop))[0].conditions is not None
    with pytest.raises(ValidationError):
        sweep_grid(data.responses(), SweepGrid((0.1,), (1.0,)))
