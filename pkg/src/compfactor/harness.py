"""Data ingestion, factor-model cross-validation and the scripted experiments."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core_ops import Array, ValidationError
from .interpret import CandidateModel, SweepGrid, evaluate_candidates, sweep_grid
from .io import read_table, write_table
from .population import (
    Dataset,
    FactorModelParams,
    PopulationModel,
    generate_synthetic,
    make_rng,
    marginalize_factor,
    sample_observations,
)
from .solver import SolverOptions, solve_factor

logger = logging.getLogger(__name__)

WORKERS_ENV = "COMPFACTOR_WORKERS"
MONTHLY, QUARTERLY = "monthly", "quarterly"


class AlignmentError(ValueError):
    """A quarterly series has values away from quarter boundaries."""


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of integers."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"{WORKERS_ENV} must be at least 1")
    return n


# ---------------------------------------------------------------------------
# Mixed-frequency panels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovariatePanel:
    """Monthly-indexed table; quarterly series carry values at quarter ends only.

    Row ``t`` is month ``t``; quarter ``j`` spans months ``3j, 3j+1, 3j+2`` and
    its value for a quarterly series sits at month ``3j+2``.
    """

    names: tuple[str, ...]
    frequency: tuple[str, ...]
    values: Array

    def __post_init__(self) -> None:
        names = tuple(self.names)
        freq = tuple(self.frequency)
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if len(set(names)) != len(names):
            raise ValidationError("covariate names must be unique")
        if len(freq) != len(names) or vals.shape[1] != len(names):
            raise ValidationError("names, frequencies and columns disagree")
        for name, f, col in zip(names, freq, vals.T):
            if f not in (MONTHLY, QUARTERLY):
                raise ValidationError(f"unknown frequency {f!r} for {name}")
            present = ~np.isnan(col)
            if f == MONTHLY and not present.all():
                raise ValidationError(f"monthly series {name} has missing months")
            if f == QUARTERLY:
                months = np.flatnonzero(present)
                if np.any(months % 3 != 2):
                    raise AlignmentError(f"quarterly series {name} has values off quarter ends")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "frequency", freq)
        object.__setattr__(self, "values", vals)

    @property
    def n_months(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path: str | Path) -> None:
        write_table(path, self.names, self.values.tolist())


def _infer_frequency(col: Array) -> str:
    present = ~np.isnan(col)
    if present.all():
        return MONTHLY
    return QUARTERLY


def ingest_csv(
    path: str | Path,
    kind: str = "dataset",
    p: int | None = None,
    frequency: Mapping[str, str] | None = None,
) -> Dataset | CovariatePanel:
    """Load a joint-observation Dataset or a mixed-frequency CovariatePanel.

    Missing cells are accepted only for panels. Panel frequencies default to
    'monthly' for complete columns and 'quarterly' otherwise.
    """
    if kind == "dataset":
        names, values = read_table(path, allow_missing=False)
        if p is None:
            p = sum(1 for c in names if not c.startswith("x"))
        return Dataset(values, p, len(names) - p, tuple(names))
    if kind == "panel":
        names, values = read_table(path, allow_missing=True)
        freq = []
        for j, name in enumerate(names):
            f = (frequency or {}).get(name) or _infer_frequency(values[:, j])
            freq.append(f)
        return CovariatePanel(tuple(names), tuple(freq), values)
    raise ValidationError(f"unknown table kind {kind!r}")


def quarterly_average(source: CovariatePanel | Dataset) -> Dataset:
    """Average monthly series over complete quarters; pass quarterly ones through.

    A trailing partial quarter is dropped with a warning. A Dataset is treated
    as all-monthly and keeps its (p, q) split; a panel becomes covariates only.
    """
    if isinstance(source, Dataset):
        values, freq = source.rows, (MONTHLY,) * (source.p + source.q)
        p, q, names = source.p, source.q, source.names
    else:
        values, freq = source.values, source.frequency
        p, q, names = 0, len(source.names), source.names
    n_months = values.shape[0]
    n_q = n_months // 3
    if n_months % 3:
        logger.warning("quarterly_average: dropping %d trailing month(s)", n_months % 3)
    out = np.empty((n_q, values.shape[1]))
    for j, f in enumerate(freq):
        col = values[: 3 * n_q, j]
        if f == MONTHLY:
            out[:, j] = col.reshape(n_q, 3).mean(axis=1)
        else:
            blocks = col.reshape(n_q, 3)
            if np.any(~np.isnan(blocks[:, :2])):
                raise AlignmentError(f"quarterly column {j} has values off quarter ends")
            out[:, j] = blocks[:, 2]
    if np.isnan(out).any():
        raise AlignmentError("a quarterly series is missing a quarter-end value")
    return Dataset(out, p, q, names)


def join_columns(y: Dataset, x: Dataset, center: bool = True, scale: bool = False) -> Dataset:
    """Joint (y, x) dataset from response-only and covariate-only tables."""
    if y.n != x.n:
        raise ValidationError(f"row counts differ: {y.n} vs {x.n}")
    rows = np.hstack([y.rows, x.rows])
    if center:
        rows = rows - rows.mean(axis=0)
    if scale:
        sd = rows.std(axis=0)
        if np.any(sd == 0):
            raise ValidationError("constant column cannot be scaled")
        rows = rows / sd
    names = None
    if y.names is not None and x.names is not None:
        names = tuple(y.names) + tuple(x.names)
    return Dataset(rows, y.p + y.q, x.p + x.q, names)


FIXTURE_COVARIATES: tuple[tuple[str, str], ...] = (
    ("consumer_price_index", MONTHLY),
    ("producer_price_index", MONTHLY),
    ("eur_usd_rate", MONTHLY),
    ("federal_debt", QUARTERLY),
    ("federal_funds_rate", MONTHLY),
    ("gdp_growth", QUARTERLY),
    ("government_spending", QUARTERLY),
    ("home_ownership", QUARTERLY),
    ("industrial_production", MONTHLY),
    ("inflation_rate", MONTHLY),
    ("mortgage_rate", MONTHLY),
    ("oil_import", MONTHLY),
    ("saving_rate", MONTHLY),
)


def financial_fixture(
    seed: int = 0, n_months: int = 408, p: int = 45, n_factors: int = 10, n_driving: int = 2
) -> tuple[Dataset, CovariatePanel]:
    """Synthetic stand-in with the shape of the stock-return study.

    Monthly returns of ``p`` assets follow a factor model with ``n_factors``
    factors; ``n_driving`` of them are slow-moving and linear in a few of the
    13 covariates. Four covariates are quarterly (values at quarter ends).
    """
    rng = make_rng(seed)
    q = len(FIXTURE_COVARIATES)
    # slow covariate paths: AR(1) monthly series
    x = np.zeros((n_months, q))
    x[0] = rng.standard_normal(q)
    for t in range(1, n_months):
        x[t] = 0.9 * x[t - 1] + math.sqrt(1 - 0.81) * rng.standard_normal(q)
    mix = np.zeros((q, n_driving))
    drivers = rng.choice(q, size=min(q, 3 * n_driving), replace=False)
    for i, j in enumerate(drivers):
        mix[j, i % n_driving] = rng.uniform(0.8, 1.2)
    f_driven = x @ mix
    f_free = rng.standard_normal((n_months, n_factors - n_driving))
    factors = np.hstack([f_driven, f_free])
    loadings = 0.6 * rng.standard_normal((p, n_factors))
    y = factors @ loadings.T + rng.standard_normal((n_months, p))
    names_y = tuple(f"stock_{i + 1:02d}" for i in range(p))
    names_x = tuple(name for name, _ in FIXTURE_COVARIATES)
    freq = tuple(f for _, f in FIXTURE_COVARIATES)
    panel_vals = x.copy()
    for j, f in enumerate(freq):
        if f == QUARTERLY:
            # quarterly series are observed as quarter averages at quarter ends
            qavg = x[: 3 * (n_months // 3), j].reshape(-1, 3).mean(axis=1)
            panel_vals[:, j] = np.nan
            panel_vals[2 : 3 * (n_months // 3) : 3, j] = qavg
    return Dataset(y, p, 0, names_y), CovariatePanel(names_x, freq, panel_vals)


# ---------------------------------------------------------------------------
# Cross-validation of the factor program
# ---------------------------------------------------------------------------


def gaussian_mean_loglik(precision: Array, rows: Array) -> float:
    """Average zero-mean Gaussian log-density of ``rows`` under ``precision``."""
    sign, logdet = np.linalg.slogdet(precision)
    if sign <= 0:
        raise ValidationError("precision is not positive definite")
    try:
        np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        raise ValidationError("precision is not positive definite") from None
    p = precision.shape[0]
    quad = np.einsum("ij,jk,ik->i", rows, precision, rows)
    return float(0.5 * logdet - 0.5 * quad.mean() - 0.5 * p * math.log(2 * math.pi))


def train_test_split(n: int, n_test: int, seed: int) -> tuple[Array, Array]:
    """Disjoint index sets covering range(n); the test set has ``n_test`` rows."""
    if not 0 < n_test < n:
        raise ValidationError("need 0 < n_test < n")
    perm = make_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


@dataclass(frozen=True)
class CVPoint:
    lambda_tilde: float
    rank: int
    test_loglik: float
    converged: bool


@dataclass(frozen=True)
class CVResult:
    path: tuple[CVPoint, ...]
    by_rank: dict[int, float]
    best_rank: int
    best_lambda: float
    best_model: FactorModelParams
    train_idx: Array = field(repr=False)
    test_idx: Array = field(repr=False)

    def table(self) -> list[tuple[int, float]]:
        return sorted(self.by_rank.items())


def lambda_path(lo: float, hi: float, step: float) -> Array:
    if not (0 < lo <= hi and step > 0):
        raise ValidationError("need 0 < lo <= hi and step > 0")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(count)


def cross_validate_factor(
    data: Dataset,
    lambda_range: tuple[float, float] = (0.04, 4.0),
    step: float = 0.004,
    split_seed: int = 0,
    n_test: int | None = None,
    opts: SolverOptions | None = None,
) -> CVResult:
    """Sweep the factor program on a training split and score held-out likelihood.

    The default test size keeps the 100-of-408 proportion. Fits are warm
    started along the lambda path. Per rank the best held-out score is kept;
    the returned model is the global maximizer (refit on the training rows).
    """
    y = data.responses()
    if y.n < 2:
        raise ValidationError("cross-validation needs at least two rows")
    if n_test is None:
        n_test = max(1, min(y.n - 1, round(y.n * 100 / 408)))
    tr_idx, te_idx = train_test_split(y.n, n_test, split_seed)
    train, test = y.subset(tr_idx), y.rows[te_idx]
    opts = opts or SolverOptions()
    lams = lambda_path(*lambda_range, step)
    path: list[CVPoint] = []
    best: tuple[float, float, FactorModelParams | None, int] = (-math.inf, math.nan, None, -1)
    warm = None
    for lam in lams:
        fm, rep = solve_factor(train, float(lam), opts, warm)
        warm = rep.warm
        try:
            score = gaussian_mean_loglik(fm.precision, test)
        except ValidationError:
            logger.warning("cross_validate_factor: lambda %.4g gave a non-PD precision; skipped", lam)
            continue
        path.append(CVPoint(float(lam), rep.rank_l_y, score, rep.converged))
        if score > best[0]:
            best = (score, float(lam), fm, rep.rank_l_y)
    if best[2] is None:
        raise ValidationError("no lambda produced a usable model")
    by_rank: dict[int, float] = {}
    for pt in path:
        by_rank[pt.rank] = max(by_rank.get(pt.rank, -math.inf), pt.test_loglik)
    return CVResult(tuple(path), by_rank, best[3], best[1], best[2], tr_idx, te_idx)


def factor_model_data(p: int, k: int, n: int, seed: int, loading_scale: float = 1.0) -> tuple[Dataset, Array]:
    """Draw n rows from y = B z + e with Gaussian B (p x k), unit-variance z and e."""
    rng = make_rng(seed)
    b = loading_scale * rng.standard_normal((p, k))
    cov = b @ b.T + np.eye(p)
    rows = rng.standard_normal((n, p)) @ np.linalg.cholesky(cov).T
    return Dataset(rows, p, 0), cov


# ---------------------------------------------------------------------------
# Structure-recovery experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RecoverySettings:
    p: int = 40
    q: int = 10
    models: tuple[tuple[int, int], ...] = ((1, 1), (2, 2))
    cond_bound: float = 10.0
    n_values: tuple[int, ...] = (500, 1000, 2000, 4000, 8000)
    trials: int = 10
    seed: int = 0
    # lambda = c * sqrt((p+q)/n) for c log-spaced over [c_lo, c_hi]
    c_lo: float = 10 ** -0.5
    c_hi: float = 10.0
    n_lambda: int = 16
    gamma_values: tuple[float, ...] = tuple(float(g) for g in np.linspace(0.5, 4.0, 8))
    rank_tol: float = 1e-3
    angle_min: float = 5.0
    tol: float = 1e-5
    max_iters: int = 3000

    def __post_init__(self) -> None:
        if any(n < 1 for n in self.n_values):
            raise ValidationError("n values must be positive")
        if self.trials < 1:
            raise ValidationError("trials must be positive")
        for kx, ku in self.models:
            if not (0 <= kx <= min(self.p, self.q) and 0 <= ku <= self.p):
                raise ValidationError(f"model ({kx},{ku}) does not fit p={self.p}, q={self.q}")

    def grid_for(self, n: int) -> SweepGrid:
        scale = math.sqrt((self.p + self.q) / n)
        cs = np.logspace(math.log10(self.c_lo), math.log10(self.c_hi), self.n_lambda)
        return SweepGrid(tuple(scale * cs), self.gamma_values)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(
            tol_primal=self.tol, tol_dual=self.tol, max_iters=self.max_iters, rank_tol=self.rank_tol
        )


@dataclass(frozen=True)
class TrialOutcome:
    k_x: int
    k_u: int
    n: int
    trial: int
    recovered: bool
    deviation: float
    chosen_d: int
    chosen_rank_l: int
    n_candidates: int
    n_qualified: int


def choose_structure(candidates: Sequence[CandidateModel]) -> CandidateModel | None:
    """Least-deviation candidate among those satisfying all conditions."""
    pool = [c for c in candidates if c.qualifies and c.deviation is not None]
    if not pool:
        return None
    return min(pool, key=lambda c: (c.deviation, c.lambda_n, c.gamma))


def experiment_population(settings: RecoverySettings, k_x: int, k_u: int) -> PopulationModel:
    return generate_synthetic(
        settings.p, settings.q, k_x, k_u, settings.cond_bound, seed=derive_seed(settings.seed, k_x, k_u)
    )


def run_trial(settings: RecoverySettings, k_x: int, k_u: int, n: int, trial: int) -> TrialOutcome:
    pop = experiment_population(settings, k_x, k_u)
    fm = marginalize_factor(pop)
    data = sample_observations(pop, n, derive_seed(settings.seed, k_x, k_u, n, trial))
    cands = sweep_grid(data, settings.grid_for(n), settings.solver_options())
    cands = evaluate_candidates(cands, fm, settings.rank_tol, settings.angle_min)
    chosen = choose_structure(cands)
    if chosen is None:
        return TrialOutcome(k_x, k_u, n, trial, False, math.nan, -1, -1, len(cands), 0)
    ok = chosen.d == k_x and chosen.rank_l == k_u
    n_q = sum(1 for c in cands if c.qualifies)
    return TrialOutcome(k_x, k_u, n, trial, ok, float(chosen.deviation), chosen.d, chosen.rank_l, len(cands), n_q)


def _run_trial_args(args: tuple) -> TrialOutcome:
    return run_trial(*args)


@dataclass(frozen=True)
class RecoveryRow:
    k_x: int
    k_u: int
    n: int
    trials: int
    recovered: int
    probability: float
    mean_deviation: float
    no_candidate: int


RECOVERY_HEADER = ("k_x", "k_u", "n", "trials", "recovered", "probability", "mean_deviation", "no_candidate")


def run_recovery_experiment(
    settings: RecoverySettings, workers: int | None = None
) -> tuple[list[RecoveryRow], list[TrialOutcome]]:
    """Recovery probability and mean deviation per (model, n) over seeded trials."""
    tasks = [
        (settings, kx, ku, n, t)
        for kx, ku in settings.models
        for n in settings.n_values
        for t in range(settings.trials)
    ]
    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_trial_args, tasks))
    else:
        outcomes = [run_trial(*t) for t in tasks]
    outcomes.sort(key=lambda o: (o.k_x, o.k_u, o.n, o.trial))
    rows = []
    for kx, ku in settings.models:
        for n in settings.n_values:
            grp = [o for o in outcomes if (o.k_x, o.k_u, o.n) == (kx, ku, n)]
            devs = [o.deviation for o in grp if not math.isnan(o.deviation)]
            rec = sum(o.recovered for o in grp)
            rows.append(
                RecoveryRow(
                    kx, ku, n, len(grp), rec, rec / len(grp),
                    float(np.mean(devs)) if devs else math.nan,
                    sum(1 for o in grp if math.isnan(o.deviation)),
                )
            )
    return rows, outcomes


def write_recovery_csv(path: str | Path, rows: Iterable[RecoveryRow]) -> None:
    write_table(
        path,
        RECOVERY_HEADER,
        ([r.k_x, r.k_u, r.n, r.trials, r.recovered, r.probability, r.mean_deviation, r.no_candidate] for r in rows),
    )


__all__ = [
    "AlignmentError",
    "CVPoint",
    "CVResult",
    "CovariatePanel",
    "RecoveryRow",
    "RecoverySettings",
    "TrialOutcome",
    "choose_structure",
    "cross_validate_factor",
    "derive_seed",
    "factor_model_data",
    "financial_fixture",
    "gaussian_mean_loglik",
    "ingest_csv",
    "join_columns",
    "lambda_path",
    "quarterly_average",
    "run_recovery_experiment",
    "run_trial",
    "train_test_split",
    "worker_count",
    "write_recovery_csv",
]
