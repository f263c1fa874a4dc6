"""Attributing latent factors to covariates by sweeping the composite program.

A factor model ``(D~, L~)`` for y is compared against composite fits over a
(lambda, gamma) grid. Candidates whose ranks and column spaces are consistent
with the factor model are scored by the relative spectral deviation between
``(D, L + Theta_yx Theta_x^{-1} Theta_xy)`` and ``(D~, L~)``; for each covariate
dimension d the best one yields an orthonormal basis of the row space of
Theta_yx and per-covariate strengths.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .core_ops import (
    DEFAULT_RANK_TOL,
    Array,
    BlockPrecision,
    ValidationError,
    min_principal_angle,
    numerical_rank,
    orth,
    spec_norm,
)
from .population import Dataset, FactorModelParams
from .solver import SolverOptions, solve_composite

logger = logging.getLogger(__name__)

DEFAULT_ANGLE_MIN = 5.0


class DegenerateModelError(ValueError):
    """The reference factor model has a zero block, so relative deviations are undefined."""


@dataclass(frozen=True)
class SweepGrid:
    lambda_values: tuple[float, ...]
    gamma_values: tuple[float, ...]

    def __post_init__(self) -> None:
        lams = tuple(float(v) for v in self.lambda_values)
        gams = tuple(float(v) for v in self.gamma_values)
        for name, vals in (("lambda_values", lams), ("gamma_values", gams)):
            if not vals:
                raise ValidationError(f"{name} is empty")
            if any(v <= 0 for v in vals):
                raise ValidationError(f"{name} must be positive")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValidationError(f"{name} must be strictly increasing")
        object.__setattr__(self, "lambda_values", lams)
        object.__setattr__(self, "gamma_values", gams)

    @classmethod
    def default(cls) -> "SweepGrid":
        return cls(tuple(np.logspace(-2, 1, 25)), tuple(np.linspace(0.5, 4.0, 12)))

    @property
    def size(self) -> int:
        return len(self.lambda_values) * len(self.gamma_values)


@dataclass(frozen=True)
class Conditions:
    rank_match: bool  # (i)
    rank_additive: bool  # (ii), rank form
    transverse: bool  # (ii), angle form
    total_rank_match: bool  # (iii)

    @property
    def cond_i(self) -> bool:
        return self.rank_match

    @property
    def cond_ii(self) -> bool:
        return self.rank_additive and self.transverse

    @property
    def cond_iii(self) -> bool:
        return self.total_rank_match

    @property
    def all(self) -> bool:
        return self.cond_i and self.cond_ii and self.cond_iii


@dataclass(frozen=True)
class CandidateModel:
    estimate: BlockPrecision
    lambda_n: float
    gamma: float
    d: int
    rank_l: int
    conditions: Conditions | None = None
    deviation: float | None = None
    min_angle: float | None = None

    @property
    def qualifies(self) -> bool:
        return self.conditions is not None and self.conditions.all


@dataclass(frozen=True)
class InterpretationResult:
    d: int
    basis_v: Array
    strengths: Array
    chosen: CandidateModel
    names: tuple[str, ...] | None = field(default=None)

    def strength_table(self) -> list[tuple[str, float]]:
        names = self.names or tuple(f"x{j + 1}" for j in range(self.strengths.size))
        return [(n, float(s)) for n, s in zip(names, self.strengths)]


def sweep_grid(
    data: Dataset,
    grid: SweepGrid,
    opts: SolverOptions | None = None,
    warm_start: bool = True,
) -> list[CandidateModel]:
    """Solve the composite program at every grid point; keep converged fits.

    Each gamma column is traversed in increasing lambda, warm-started from the
    previous point.
    """
    if data.q < 1:
        raise ValidationError("sweep needs joint (y, x) observations")
    base = opts or SolverOptions()
    out: list[CandidateModel] = []
    dropped = 0
    for gamma in grid.gamma_values:
        warm = None
        for lam in grid.lambda_values:
            rep = solve_composite(data, replace(base, lambda_n=lam, gamma=gamma), warm)
            warm = rep.warm if warm_start else None
            if not rep.converged:
                dropped += 1
                continue
            out.append(
                CandidateModel(rep.estimate, lam, gamma, rep.rank_theta_yx, rep.rank_l_y)
            )
    if dropped:
        logger.info("sweep_grid: %d of %d grid points did not converge", dropped, grid.size)
    return out


def check_conditions(
    c: CandidateModel,
    fm: FactorModelParams,
    rank_tol: float = DEFAULT_RANK_TOL,
    angle_min: float = DEFAULT_ANGLE_MIN,
) -> Conditions:
    """Rank and transversality conditions of a candidate against a factor model."""
    est = c.estimate
    d = numerical_rank(est.theta_yx, rank_tol)
    rl = numerical_rank(est.l_y, rank_tol)
    r_fm = numerical_rank(fm.l, rank_tol)
    r_total = numerical_rank(est.marginal_low_rank(), rank_tol)
    angle = _transversality_angle(est, rank_tol)
    return Conditions(
        rank_match=(d == c.d),
        rank_additive=(r_fm == rl + d),
        transverse=angle > angle_min,
        total_rank_match=(r_fm == r_total),
    )


def _transversality_angle(est: BlockPrecision, rank_tol: float) -> float:
    uk = _top_left(est.theta_yx, rank_tol)
    ul = _top_left(est.l_y, rank_tol)
    return min_principal_angle(uk, ul)


def _top_left(m: Array, rank_tol: float) -> Array:
    r = numerical_rank(m, rank_tol)
    if r == 0:
        return np.zeros((m.shape[0], 0))
    u, _, _ = np.linalg.svd(m, full_matrices=False)
    return u[:, :r]


def deviation_metric(c: CandidateModel | BlockPrecision, fm: FactorModelParams) -> float:
    """max of the relative spectral deviations of the D and total-L parts."""
    est = c.estimate if isinstance(c, CandidateModel) else c
    nd, nl = spec_norm(fm.d), spec_norm(fm.l)
    if nd == 0 or nl == 0:
        raise DegenerateModelError("reference factor model has a zero diagonal or low-rank part")
    dev_d = spec_norm(fm.d - est.d_y) / nd
    dev_l = spec_norm(fm.l - est.marginal_low_rank()) / nl
    return max(dev_d, dev_l)


def evaluate_candidates(
    candidates: Iterable[CandidateModel],
    fm: FactorModelParams,
    rank_tol: float = DEFAULT_RANK_TOL,
    angle_min: float = DEFAULT_ANGLE_MIN,
) -> list[CandidateModel]:
    """Attach condition flags, and deviations where all conditions hold."""
    out = []
    for c in candidates:
        cond = check_conditions(c, fm, rank_tol, angle_min)
        dev = deviation_metric(c, fm) if cond.all else None
        angle = _transversality_angle(c.estimate, rank_tol)
        out.append(replace(c, conditions=cond, deviation=dev, min_angle=angle))
    return out


def row_space_basis(theta_yx: Array, d: int) -> Array:
    """Top-d right singular vectors of Theta_yx (q x d, orthonormal columns)."""
    _, _, vt = np.linalg.svd(theta_yx, full_matrices=False)
    return vt[:d].T.copy()


def covariate_strengths(basis_v: Array) -> Array:
    """Squared row norms of an orthonormal basis; they sum to its dimension."""
    return np.sum(np.asarray(basis_v) ** 2, axis=1)


def select_models(
    candidates: Sequence[CandidateModel],
    fm: FactorModelParams,
    d_range: Iterable[int] | None = None,
    names: Sequence[str] | None = None,
) -> dict[int, InterpretationResult]:
    """For each d, the qualifying candidate of least deviation.

    Ties go to the smaller lambda, then the smaller gamma. Candidates must
    already carry conditions (see ``evaluate_candidates``).
    """
    if d_range is None:
        q = candidates[0].estimate.q if candidates else 0
        d_range = range(1, q + 1)
    out: dict[int, InterpretationResult] = {}
    for d in d_range:
        pool = [c for c in candidates if c.d == d and c.qualifies and c.deviation is not None]
        if not pool:
            continue
        best = min(pool, key=lambda c: (c.deviation, c.lambda_n, c.gamma))
        v = row_space_basis(best.estimate.theta_yx, d)
        out[d] = InterpretationResult(
            d, v, covariate_strengths(v), best, None if names is None else tuple(names)
        )
    return out


def interpret(
    data: Dataset,
    fm: FactorModelParams,
    grid: SweepGrid | None = None,
    opts: SolverOptions | None = None,
    angle_min: float = DEFAULT_ANGLE_MIN,
) -> tuple[dict[int, InterpretationResult], list[CandidateModel]]:
    """Sweep, filter and select: the full pipeline for a supplied factor model."""
    opts = opts or SolverOptions()
    cands = sweep_grid(data, grid or SweepGrid.default(), opts)
    cands = evaluate_candidates(cands, fm, opts.rank_tol, angle_min)
    names = None
    if data.names is not None:
        names = data.names[data.p :]
    return select_models(cands, fm, range(1, data.q + 1), names), cands


def candidate_rows(candidates: Sequence[CandidateModel]) -> list[dict[str, object]]:
    """Flat records for CSV / JSON export."""
    rows = []
    for c in candidates:
        cond = c.conditions
        rows.append(
            {
                "lambda": c.lambda_n,
                "gamma": c.gamma,
                "d": c.d,
                "rank_l": c.rank_l,
                "cond_i": None if cond is None else cond.cond_i,
                "cond_ii": None if cond is None else cond.cond_ii,
                "cond_iii": None if cond is None else cond.cond_iii,
                "deviation": c.deviation,
            }
        )
    return rows


def orthonormal_rebasis(basis_v: Array, rng: np.random.Generator) -> Array:
    """Same column space, different orthonormal basis (for invariance checks)."""
    d = basis_v.shape[1]
    q_mat, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return orth(basis_v @ q_mat)
