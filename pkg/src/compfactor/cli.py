"""Command-line entry point: ``compfactor <subcommand> [--config FILE] [flags]``.

Exit codes: 0 success, 2 invalid input or usage, 3 non-convergence with
``--strict``.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .config import float_list, int_list, load_config, model_list, normalize_key, parse_bool
from .core_ops import BlockPrecision, DimensionError, RankError, ValidationError
from .fisher import CapacityError, EstimatorSettings, theorem_bounds, verify_assumptions
from .harness import (
    AlignmentError,
    RecoverySettings,
    cross_validate_factor,
    ingest_csv,
    join_columns,
    quarterly_average,
    run_recovery_experiment,
    write_recovery_csv,
)
from .interpret import (
    DEFAULT_ANGLE_MIN,
    DegenerateModelError,
    SweepGrid,
    candidate_rows,
    evaluate_candidates,
    select_models,
    sweep_grid,
)
from .io import ParseError, read_json, write_json, write_table
from .population import (
    Dataset,
    FactorModelParams,
    PopulationModel,
    RecoveryError,
    build_population,
    generate_synthetic,
    sample_observations,
)
from .solver import DomainError, SolverOptions, kkt_residuals, solve_composite, solve_factor

logger = logging.getLogger("compfactor")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3
INPUT_ERRORS = (
    ValidationError,
    ParseError,
    DimensionError,
    RankError,
    AlignmentError,
    CapacityError,
    DegenerateModelError,
    RecoveryError,
    DomainError,
    FileNotFoundError,
    IsADirectoryError,
)


class NotConverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Serialization of models and estimates
# ---------------------------------------------------------------------------


def population_to_dict(pop: PopulationModel) -> dict[str, Any]:
    return {
        "kind": "population",
        "a_star": pop.a_star,
        "b_u_star": pop.b_u_star,
        "sigma_zeta_u": pop.sigma_zeta_u,
        "sigma_eps": pop.sigma_eps,
        "sigma_x": pop.sigma_x,
        "p": pop.p,
        "q": pop.q,
        "k_x": pop.k_x,
        "k_u": pop.k_u,
    }


def population_from_dict(d: dict[str, Any]) -> PopulationModel:
    if d.get("kind") != "population":
        raise ValidationError("JSON does not describe a population model")
    p, q = int(d["p"]), int(d["q"])

    def mat(key: str, rows: int, cols: int) -> np.ndarray:
        return np.array(d[key], dtype=float).reshape(rows, cols)

    k_u = len(d["sigma_zeta_u"])
    return build_population(
        mat("a_star", p, q),
        mat("b_u_star", p, k_u),
        mat("sigma_zeta_u", k_u, k_u),
        mat("sigma_eps", p, p),
        mat("sigma_x", q, q),
    )


def factor_to_dict(fm: FactorModelParams) -> dict[str, Any]:
    return {"kind": "factor_model", "d": fm.d, "l": fm.l, "rank": fm.rank()}


def factor_from_dict(d: dict[str, Any]) -> FactorModelParams:
    if d.get("kind") != "factor_model":
        raise ValidationError("JSON does not describe a factor model")
    return FactorModelParams(np.array(d["d"], dtype=float), np.array(d["l"], dtype=float))


def estimate_to_dict(est: BlockPrecision) -> dict[str, Any]:
    return {
        "p": est.p,
        "q": est.q,
        "theta": est.theta,
        "d_y": est.d_y,
        "l_y": est.l_y,
        "theta_yx": est.theta_yx,
        "theta_x": est.theta_x,
    }


# ---------------------------------------------------------------------------
# Data loading shared by subcommands
# ---------------------------------------------------------------------------


def _load_joint(args: argparse.Namespace) -> Dataset:
    if getattr(args, "data", None):
        ds = ingest_csv(args.data, kind="dataset", p=args.p)
        assert isinstance(ds, Dataset)
        return ds
    if getattr(args, "model", None):
        if not args.n:
            raise ValidationError("--model needs --n to draw observations")
        pop = population_from_dict(read_json(args.model))
        return sample_observations(pop, args.n, args.seed)
    raise ValidationError("supply --data CSV or --model JSON with --n")


def _solver_opts(args: argparse.Namespace) -> SolverOptions:
    return SolverOptions(
        rho_admm=args.rho,
        max_iters=args.max_iters,
        tol_primal=args.tol,
        tol_dual=args.tol,
        rank_tol=args.rank_tol,
    )


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.output or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    pop = generate_synthetic(args.p, args.q, args.kx, args.ku, args.cond_bound, seed=args.seed, tau=args.tau)
    write_json(args.output or "model.json", population_to_dict(pop))
    if args.n:
        ds = sample_observations(pop, args.n, args.seed)
        ds.to_csv(args.data_out or "data.csv")
    print(f"model p={pop.p} q={pop.q} k_x={pop.k_x} k_u={pop.k_u} cond={np.linalg.cond(pop.theta_star):.3f}")
    return EXIT_OK


def cmd_fit_composite(args: argparse.Namespace) -> int:
    data = _load_joint(args)
    opts = replace(_solver_opts(args), lambda_n=args.lambda_n, gamma=args.gamma)
    rep = solve_composite(data, opts)
    kkt = kkt_residuals(rep.estimate, data.sample_cov, opts.lambda_n, opts.gamma, opts.rank_tol)
    payload = {
        "estimate": estimate_to_dict(rep.estimate),
        "objective": rep.objective,
        "converged": rep.converged,
        "iterations": rep.iterations,
        "primal_residual": rep.primal_residual,
        "dual_residual": rep.dual_residual,
        "rank_l_y": rep.rank_l_y,
        "rank_theta_yx": rep.rank_theta_yx,
        "lambda": opts.lambda_n,
        "gamma": opts.gamma,
        "kkt": kkt.as_dict(),
    }
    write_json(args.output or "fit.json", payload)
    print(
        f"converged={rep.converged} iterations={rep.iterations} objective={rep.objective:.6f} "
        f"rank(L_y)={rep.rank_l_y} rank(Theta_yx)={rep.rank_theta_yx} kkt={kkt.max:.2e}"
    )
    if args.strict and not rep.converged:
        raise NotConverged("solver did not converge")
    return EXIT_OK


def cmd_fit_factor(args: argparse.Namespace) -> int:
    data = _load_joint(args)
    fm, rep = solve_factor(data, args.lambda_tilde, _solver_opts(args))
    payload = factor_to_dict(fm) | {"converged": rep.converged, "objective": rep.objective, "lambda_tilde": args.lambda_tilde}
    write_json(args.output or "factor.json", payload)
    print(f"converged={rep.converged} rank={rep.rank_l_y} objective={rep.objective:.6f}")
    if args.strict and not rep.converged:
        raise NotConverged("solver did not converge")
    return EXIT_OK


def _run_cv(data: Dataset, args: argparse.Namespace):
    return cross_validate_factor(
        data,
        (args.cv_lambda_lo, args.cv_lambda_hi),
        args.cv_step,
        split_seed=args.split_seed,
        n_test=args.n_test,
        opts=_solver_opts(args),
    )


def cmd_cv(args: argparse.Namespace) -> int:
    data = _load_joint(args)
    res = _run_cv(data, args)
    out = _out_dir(args)
    write_table(out / "cv_by_rank.csv", ("rank", "best_test_loglik"), res.table())
    write_table(
        out / "cv_path.csv",
        ("lambda_tilde", "rank", "test_loglik", "converged"),
        ((pt.lambda_tilde, pt.rank, pt.test_loglik, pt.converged) for pt in res.path),
    )
    write_json(out / "factor_model.json", factor_to_dict(res.best_model) | {"lambda_tilde": res.best_lambda})
    for rank, score in res.table():
        print(f"rank {rank:3d}  test log-likelihood {score:.5f}")
    print(f"best rank {res.best_rank} at lambda_tilde {res.best_lambda:.4g}")
    return EXIT_OK


def _interpret_data(args: argparse.Namespace) -> tuple[Dataset, Dataset | None]:
    """Joint quarterly data and, when given, the monthly responses."""
    monthly = None
    if args.responses:
        monthly = ingest_csv(args.responses, kind="dataset", p=None)
        assert isinstance(monthly, Dataset)
        monthly = Dataset(monthly.rows, monthly.p + monthly.q, 0, monthly.names)
    if args.panel:
        if monthly is None:
            raise ValidationError("--panel needs --responses (monthly responses)")
        panel = ingest_csv(args.panel, kind="panel")
        joint = join_columns(quarterly_average(monthly), quarterly_average(panel), center=True, scale=args.standardize)
        return joint, monthly
    return _load_joint(args), monthly


def cmd_interpret(args: argparse.Namespace) -> int:
    data, monthly = _interpret_data(args)
    out = _out_dir(args)
    opts = _solver_opts(args)
    if args.factor_model:
        fm = factor_from_dict(read_json(args.factor_model))
    else:
        source = monthly if monthly is not None else data.responses()
        if args.standardize:
            rows = source.rows - source.rows.mean(axis=0)
            source = Dataset(rows / rows.std(axis=0), source.p, 0, source.names)
        fm = _run_cv(source, args).best_model
        write_json(out / "factor_model.json", factor_to_dict(fm))
    if fm.p != data.p:
        raise ValidationError(f"factor model has p={fm.p}, data has p={data.p}")
    grid = SweepGrid(
        tuple(np.logspace(math.log10(args.lambda_lo), math.log10(args.lambda_hi), args.n_lambda)),
        tuple(np.linspace(args.gamma_lo, args.gamma_hi, args.n_gamma)),
    )
    cands = evaluate_candidates(sweep_grid(data, grid, opts), fm, opts.rank_tol, args.angle_min)
    names = data.column_names()[data.p :]
    results = select_models(cands, fm, range(1, data.q + 1), names)
    rows = candidate_rows(cands)
    write_table(out / "candidates.csv", list(rows[0].keys()) if rows else ["lambda"], (r.values() for r in rows))
    ds = sorted(results)
    write_table(
        out / "strengths.csv",
        ["covariate"] + [f"d{d}" for d in ds],
        ([name] + [results[d].strengths[j] for d in ds] for j, name in enumerate(names)),
    )
    write_json(
        out / "interpretation.json",
        {
            str(d): {
                "d": d,
                "lambda": r.chosen.lambda_n,
                "gamma": r.chosen.gamma,
                "deviation": r.chosen.deviation,
                "rank_l": r.chosen.rank_l,
                "strengths": dict(r.strength_table()),
                "basis_v": r.basis_v,
            }
            for d, r in results.items()
        },
    )
    print(f"{len(cands)} converged candidates, {sum(c.qualifies for c in cands)} satisfy all conditions")
    for d in ds:
        r = results[d]
        print(f"d={d}: deviation {r.chosen.deviation:.4f} at lambda={r.chosen.lambda_n:.4g} gamma={r.chosen.gamma:.3g}")
    return EXIT_OK


def cmd_certify(args: argparse.Namespace) -> int:
    if args.model:
        pop = population_from_dict(read_json(args.model))
    else:
        pop = generate_synthetic(args.p, args.q, args.kx, args.ku, args.cond_bound, seed=args.seed, tau=args.tau)
    settings = EstimatorSettings(restarts=args.restarts, iters=args.iters, seed=args.seed)
    rep = verify_assumptions(
        pop, args.gamma, args.omega_y, args.omega_yx, args.alpha, args.beta, args.samples, args.seed, settings
    )
    bounds = theorem_bounds(pop, args.alpha, args.beta, args.gamma, args.omega_y, args.omega_yx, pop.p, pop.q)
    varphi_cap = 1.0 - 2.0 / (args.beta + 1.0)
    table = [
        ("chi", rep.chi_min, f">= {args.alpha:g}", rep.chi_pass),
        ("xi", rep.xi_min, "> 0", rep.xi_pass),
        ("varphi", rep.varphi_max, f"<= {varphi_cap:.4g}", rep.varphi_pass),
    ]
    print(f"{'quantity':8s} {'estimate':>10s}  {'requirement':12s} result")
    for name, val, req, ok in table:
        print(f"{name:8s} {val:10.4f}  {req:12s} {'PASS' if ok else 'FAIL'}")
    print(f"families={rep.n_families} max tangent angle={rep.max_angle_deg:.3f} deg")
    if args.output:
        write_json(args.output, {"assumptions": rep.as_dict(), "theorem_constants": bounds.as_dict()})
    return EXIT_OK


def cmd_recover(args: argparse.Namespace) -> int:
    settings = RecoverySettings(
        p=args.p,
        q=args.q,
        models=args.models,
        cond_bound=args.cond_bound,
        n_values=args.n_values,
        trials=args.trials,
        seed=args.seed,
        n_lambda=args.n_lambda,
        gamma_values=tuple(float(g) for g in np.linspace(args.gamma_lo, args.gamma_hi, args.n_gamma)),
        rank_tol=args.rank_tol,
        angle_min=args.angle_min,
        tol=args.tol,
        max_iters=args.max_iters,
    )
    rows, outcomes = run_recovery_experiment(settings, workers=args.workers)
    out = _out_dir(args)
    write_recovery_csv(out / "recovery.csv", rows)
    write_table(
        out / "trials.csv",
        ("k_x", "k_u", "n", "trial", "recovered", "deviation", "chosen_d", "chosen_rank_l", "n_candidates", "n_qualified"),
        (
            (o.k_x, o.k_u, o.n, o.trial, o.recovered, o.deviation, o.chosen_d, o.chosen_rank_l, o.n_candidates, o.n_qualified)
            for o in outcomes
        ),
    )
    for r in rows:
        print(f"(k_x,k_u)=({r.k_x},{r.k_u}) n={r.n:6d} P(recover)={r.probability:.2f} deviation={r.mean_deviation:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="flat key = value file; command-line flags win")
    sp.add_argument("-o", "--output", help="output file or directory")
    sp.add_argument("--strict", action="store_true", help="exit 3 when the solver does not converge")
    sp.add_argument("--log-level", default="WARNING")
    sp.add_argument("--seed", type=int, default=0)


def _solver_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--rho", type=float, default=1.0, help="initial ADMM penalty")
    sp.add_argument("--max-iters", type=int, default=5000)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--rank-tol", type=float, default=1e-3)


def _data_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--data", help="CSV: response columns, then covariate columns (named x...)")
    sp.add_argument("--p", type=int, default=None, help="number of response columns in --data")
    sp.add_argument("--model", help="population JSON written by synth (sampled with --n, --seed)")
    sp.add_argument("--n", type=int, default=None)


def _model_flags(sp: argparse.ArgumentParser, p: int, q: int, kx: int, ku: int) -> None:
    sp.add_argument("--p", type=int, default=p)
    sp.add_argument("--q", type=int, default=q)
    sp.add_argument("--kx", type=int, default=kx)
    sp.add_argument("--ku", type=int, default=ku)
    sp.add_argument("--cond-bound", type=float, default=10.0)
    sp.add_argument("--tau", type=float, default=None, help="fixed spectral norm instead of the condition search")


def _cv_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--cv-lambda-lo", type=float, default=0.04)
    sp.add_argument("--cv-lambda-hi", type=float, default=4.0)
    sp.add_argument("--cv-step", type=float, default=0.004)
    sp.add_argument("--n-test", type=int, default=None)
    sp.add_argument("--split-seed", type=int, default=0)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="compfactor", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, func: Callable[[argparse.Namespace], int], help_text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text)
        _common(sp)
        sp.set_defaults(func=func)
        subs[name] = sp
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic composite model")
    _model_flags(sp, 40, 10, 2, 2)
    sp.add_argument("--n", type=int, default=None, help="also draw n observations")
    sp.add_argument("--data-out", default=None)

    sp = add("fit-composite", cmd_fit_composite, "fit the composite program")
    _data_flags(sp)
    _solver_flags(sp)
    sp.add_argument("--lambda", dest="lambda_n", type=float, default=0.1)
    sp.add_argument("--gamma", type=float, default=1.0)

    sp = add("fit-factor", cmd_fit_factor, "fit the factor program to the responses")
    _data_flags(sp)
    _solver_flags(sp)
    sp.add_argument("--lambda-tilde", type=float, default=0.1)

    sp = add("cv", cmd_cv, "cross-validate the factor program")
    _data_flags(sp)
    _solver_flags(sp)
    _cv_flags(sp)

    sp = add("interpret", cmd_interpret, "attribute latent factors to covariates")
    _data_flags(sp)
    _solver_flags(sp)
    _cv_flags(sp)
    sp.add_argument("--factor-model", help="factor model JSON; learned by cross-validation when absent")
    sp.add_argument("--responses", help="monthly response CSV (for the factor model and quarterly averaging)")
    sp.add_argument("--panel", help="mixed-frequency covariate CSV, averaged to quarters")
    sp.add_argument("--standardize", action="store_true")
    sp.add_argument("--lambda-lo", type=float, default=1e-2)
    sp.add_argument("--lambda-hi", type=float, default=10.0)
    sp.add_argument("--n-lambda", type=int, default=25)
    sp.add_argument("--gamma-lo", type=float, default=0.5)
    sp.add_argument("--gamma-hi", type=float, default=4.0)
    sp.add_argument("--n-gamma", type=int, default=12)
    sp.add_argument("--angle-min", type=float, default=DEFAULT_ANGLE_MIN)

    sp = add("certify", cmd_certify, "estimate the Fisher-information conditions")
    _model_flags(sp, 60, 2, 1, 1)
    sp.set_defaults(tau=0.2)
    sp.add_argument("--model", help="population JSON written by synth")
    sp.add_argument("--gamma", type=float, default=1.2)
    sp.add_argument("--omega-y", type=float, default=0.03)
    sp.add_argument("--omega-yx", type=float, default=0.03)
    sp.add_argument("--alpha", type=float, default=0.2)
    sp.add_argument("--beta", type=float, default=9.0)
    sp.add_argument("--samples", type=int, default=50)
    sp.add_argument("--restarts", type=int, default=20)
    sp.add_argument("--iters", type=int, default=300)

    sp = add("recover-experiment", cmd_recover, "structure-recovery Monte Carlo")
    sp.add_argument("--p", type=int, default=40)
    sp.add_argument("--q", type=int, default=10)
    sp.add_argument("--models", type=model_list, default=((1, 1), (2, 2)), help="e.g. 1:1,2:2")
    sp.add_argument("--cond-bound", type=float, default=10.0)
    sp.add_argument("--n-values", type=int_list, default=(500, 1000, 2000, 4000, 8000))
    sp.add_argument("--trials", type=int, default=10)
    sp.add_argument("--n-lambda", type=int, default=16)
    sp.add_argument("--gamma-lo", type=float, default=0.5)
    sp.add_argument("--gamma-hi", type=float, default=4.0)
    sp.add_argument("--n-gamma", type=int, default=8)
    sp.add_argument("--rank-tol", type=float, default=1e-3)
    sp.add_argument("--angle-min", type=float, default=DEFAULT_ANGLE_MIN)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--max-iters", type=int, default=3000)
    sp.add_argument("--workers", type=int, default=None, help="defaults to $COMPFACTOR_WORKERS or 1")
    return parser, subs


def _apply_config(
    parser: argparse.ArgumentParser, subs: dict[str, argparse.ArgumentParser], argv: Sequence[str], args: argparse.Namespace
) -> argparse.Namespace:
    cfg = load_config(args.config)
    sp = subs[args.command]
    known = {a.dest: a for a in sp._actions}
    defaults: dict[str, Any] = {}
    for key, value in cfg.items():
        dest = "lambda_n" if key == "lambda" else normalize_key(key)
        if dest in ("config", "func", "help") or dest not in known:
            raise ValidationError(f"unknown config key {key!r} for {args.command}")
        action = known[dest]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = parse_bool(value)
        elif action.type is not None:
            defaults[dest] = action.type(value)
        else:
            defaults[dest] = value
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INVALID
    try:
        if args.config:
            args = _apply_config(parser, subs, argv, args)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INVALID
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
