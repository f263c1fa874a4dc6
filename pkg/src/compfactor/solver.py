"""ADMM solver for the regularized maximum-likelihood log-det programs.

Composite program::

    minimize  -logdet(Theta) + tr(Theta S) + lam * (gamma * ||Theta_yx||_* + tr(L_y))
    s.t.      Theta_y = D_y - L_y,  L_y >= 0,  D_y diagonal

and its factor-model specialization (no covariates, penalty ``lam * tr(L)``).

The splitting keeps a consensus copy ``Z`` of Theta for the log-det term and
the structured tuple ``(D, L, K, O)`` for penalties and constraints, with the
linear constraint ``Z = F(D, L, K, O)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core_ops import (
    DEFAULT_RANK_TOL,
    Array,
    BlockPrecision,
    ValidationError,
    numerical_rank,
    sym,
)
from .population import Dataset, FactorModelParams

logger = logging.getLogger(__name__)


class DomainError(ValueError):
    """Raised when a precision argument is not positive definite."""


# ---------------------------------------------------------------------------
# Objective pieces and proximal maps
# ---------------------------------------------------------------------------


def neg_log_likelihood(theta: Array, sample_cov: Array) -> float:
    """-logdet(theta) + tr(theta S)."""
    sign, logdet = np.linalg.slogdet(theta)
    if sign <= 0:
        raise DomainError("theta is not positive definite")
    try:
        np.linalg.cholesky(theta)
    except np.linalg.LinAlgError:
        raise DomainError("theta is not positive definite") from None
    return float(-logdet + np.sum(theta * sample_cov))


def nll_gradient(theta: Array, sample_cov: Array) -> Array:
    return sample_cov - np.linalg.inv(theta)


def prox_logdet(m: Array, sample_cov: Array, rho: float) -> Array:
    """argmin_Z -logdet Z + <S, Z> + (rho/2)||Z - m||_F^2 (always positive definite)."""
    if not rho > 0:
        raise ValidationError("rho must be positive")
    w, v = np.linalg.eigh(sym(rho * np.asarray(m, dtype=float) - sample_cov))
    z = (w + np.sqrt(w * w + 4.0 * rho)) / (2.0 * rho)
    return (v * z) @ v.T


def prox_nuclear(k: Array, t: float) -> Array:
    """Singular value soft-thresholding U max(S - t, 0) V^T."""
    if t < 0:
        raise ValidationError("threshold must be non-negative")
    k = np.asarray(k, dtype=float)
    if k.size == 0 or t == 0:
        return k.copy()
    u, s, vt = np.linalg.svd(k, full_matrices=False)
    s = np.maximum(s - t, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vt[keep]


def prox_trace_psd(l: Array, t: float) -> Array:
    """argmin_{L >= 0} t tr(L) + (1/2)||L - l||_F^2: shift eigenvalues by -t, clamp at 0."""
    if t < 0:
        raise ValidationError("threshold must be non-negative")
    w, v = np.linalg.eigh(sym(l))
    w = np.maximum(w - t, 0.0)
    keep = w > 0
    return (v[:, keep] * w[keep]) @ v[:, keep].T


# ---------------------------------------------------------------------------
# Options and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverOptions:
    lambda_n: float = 0.1
    gamma: float = 1.0
    rho_admm: float = 1.0
    max_iters: int = 5000
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    rank_tol: float = DEFAULT_RANK_TOL
    balance_every: int = 10
    balance_ratio: float = 10.0
    inner_passes: int = 1
    record_trace: bool = False

    def __post_init__(self) -> None:
        if self.lambda_n < 0 or not math.isfinite(self.lambda_n):
            raise ValidationError("lambda_n must be a non-negative finite number")
        if not self.gamma > 0:
            raise ValidationError("gamma must be positive")
        if not self.rho_admm > 0:
            raise ValidationError("rho_admm must be positive")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be at least 1")
        if not (self.tol_primal > 0 and self.tol_dual > 0):
            raise ValidationError("tolerances must be positive")
        if not 0 < self.rank_tol < 1:
            raise ValidationError("rank_tol must lie in (0, 1)")


@dataclass
class KKTReport:
    x_block: float
    diag_block: float
    l_tangent: float
    l_perp: float
    k_tangent: float
    k_perp: float

    @property
    def max(self) -> float:
        return max(self.x_block, self.diag_block, self.l_tangent, self.l_perp, self.k_tangent, self.k_perp)

    def as_dict(self) -> dict[str, float]:
        return {
            "x_block": self.x_block,
            "diag_block": self.diag_block,
            "l_tangent": self.l_tangent,
            "l_perp": self.l_perp,
            "k_tangent": self.k_tangent,
            "k_perp": self.k_perp,
            "max": self.max,
        }


@dataclass
class SolveReport:
    estimate: BlockPrecision
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    converged: bool
    rank_l_y: int
    rank_theta_yx: int
    lambda_n: float
    gamma: float
    rho_final: float
    trace: list[tuple[float, float, float]] = field(default_factory=list)
    warm: Optional[tuple[Array, ...]] = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# KKT residuals
# ---------------------------------------------------------------------------


def _sym_support(l: Array, rank_tol: float) -> Array:
    w, v = np.linalg.eigh(sym(l))
    scale = np.max(np.abs(w), initial=0.0)
    if scale == 0:
        return np.zeros((l.shape[0], 0))
    return v[:, w > rank_tol * scale]


def kkt_residuals(
    est: BlockPrecision,
    sample_cov: Array,
    lambda_n: float,
    gamma: float,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> KKTReport:
    """Violations of the optimality conditions at ``est``.

    With G = S - Theta^{-1}: G_x = 0; diag(G_y) = 0 (D is free); on the
    tangent space of L the y block equals lam * P_U and off it its largest
    eigenvalue is at most lam; G_yx is in -(lam*gamma/2) times the nuclear
    norm subdifferential at Theta_yx (the block appears twice in Theta).
    """
    p = est.p
    g = sym(sample_cov - np.linalg.inv(est.theta))
    g_y, g_yx, g_x = g[:p, :p], g[:p, p:], g[p:, p:]
    x_res = float(np.linalg.norm(g_x, 2)) if est.q else 0.0
    diag_res = float(np.max(np.abs(np.diag(g_y)), initial=0.0))

    u = _sym_support(est.l_y, rank_tol)
    pu = u @ u.T
    pt = pu @ g_y + g_y @ pu - pu @ g_y @ pu
    l_tan = float(np.linalg.norm(pt - lambda_n * pu, 2)) if p else 0.0
    comp = np.eye(p) - pu
    perp = sym(comp @ g_y @ comp)
    l_perp = max(0.0, float(np.linalg.eigvalsh(perp)[-1]) - lambda_n) if p else 0.0

    k_tan = k_perp = 0.0
    if est.q:
        level = 0.5 * lambda_n * gamma
        uk, sk, vkt = np.linalg.svd(est.theta_yx, full_matrices=False)
        r = int(np.sum(sk > rank_tol * sk[0])) if sk.size and sk[0] > 0 else 0
        uk, vk = uk[:, :r], vkt[:r].T
        puk, pvk = uk @ uk.T, vk @ vk.T
        tan = puk @ g_yx + g_yx @ pvk - puk @ g_yx @ pvk
        k_tan = float(np.linalg.norm(tan + level * uk @ vk.T, 2))
        k_perp = max(0.0, float(np.linalg.norm(g_yx - tan, 2)) - level)
    return KKTReport(x_res, diag_res, l_tan, l_perp, k_tan, k_perp)


# ---------------------------------------------------------------------------
# ADMM core
# ---------------------------------------------------------------------------


def _assemble(d: Array, l: Array, k: Array, o: Array) -> Array:
    top = np.diag(d) - l
    if k.shape[1] == 0:
        return top
    return np.block([[top, k], [k.T, o]])


def initial_point(sample_cov: Array, p: int) -> tuple[Array, Array, Array, Array]:
    """Ridge-inverted sample covariance; handles singular S when n < p + q."""
    dim = sample_cov.shape[0]
    eps = 1e-3 * max(np.trace(sample_cov), 1e-12) / dim
    theta0 = sym(np.linalg.inv(sample_cov + eps * np.eye(dim)))
    d0 = np.maximum(np.diag(theta0)[:p], 1e-8)
    return d0, np.zeros((p, p)), theta0[:p, p:].copy(), theta0[p:, p:].copy()


def objective_value(theta: Array, l: Array, k: Array, sample_cov: Array, lam: float, gamma: float) -> float:
    nuc = float(np.sum(np.linalg.svd(k, compute_uv=False))) if k.size else 0.0
    return neg_log_likelihood(theta, sample_cov) + lam * (gamma * nuc + float(np.trace(l)))


def solve_program(
    sample_cov: Array,
    p: int,
    opts: SolverOptions,
    warm: Optional[tuple[Array, ...]] = None,
) -> SolveReport:
    """Run ADMM on the program defined by ``sample_cov`` with ``p`` responses.

    ``q = dim(sample_cov) - p`` covariates; ``q = 0`` gives the factor program.
    ``warm`` is the ``SolveReport.warm`` state of a previous solve.
    """
    s = sym(np.asarray(sample_cov, dtype=float))
    dim = s.shape[0]
    q = dim - p
    if q < 0 or p < 1:
        raise ValidationError("invalid response dimension")
    lam, gamma = opts.lambda_n, opts.gamma
    rho = opts.rho_admm

    if warm is not None:
        d, l, k, o, u_dual, rho = (np.array(x, dtype=float) if isinstance(x, np.ndarray) else x for x in warm)
        rho = float(rho)
    else:
        d, l, k, o = initial_point(s, p)
        u_dual = np.zeros((dim, dim))
    fw = _assemble(d, l, k, o)
    trace: list[tuple[float, float, float]] = []
    r_norm = s_norm = math.inf
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        z = prox_logdet(fw - u_dual, s, rho)
        v = z + u_dual
        v_y = v[:p, :p]
        for _ in range(opts.inner_passes):
            d = np.diag(v_y + l).copy()
            l = prox_trace_psd(np.diag(d) - v_y, lam / rho)
        if q:
            k = prox_nuclear(v[:p, p:], 0.5 * lam * gamma / rho)
            o = sym(v[p:, p:])
        fw_old = fw
        fw = _assemble(d, l, k, o)
        resid = z - fw
        u_dual = u_dual + resid

        r_abs = float(np.linalg.norm(resid))
        s_abs = rho * float(np.linalg.norm(fw - fw_old))
        r_norm = r_abs / max(1.0, float(np.linalg.norm(z)), float(np.linalg.norm(fw)))
        s_norm = s_abs / max(1.0, rho * float(np.linalg.norm(u_dual)))
        if opts.record_trace:
            trace.append((r_norm, s_norm, rho))
        if r_norm <= opts.tol_primal and s_norm <= opts.tol_dual:
            converged = True
            break
        if opts.balance_every and it % opts.balance_every == 0:
            if r_norm > opts.balance_ratio * s_norm:
                rho *= 2.0
                u_dual = u_dual / 2.0
            elif s_norm > opts.balance_ratio * r_norm:
                rho /= 2.0
                u_dual = u_dual * 2.0

    theta = fw
    try:
        np.linalg.cholesky(theta)
    except np.linalg.LinAlgError:
        # structured iterate not yet PD; fall back to the consensus copy
        theta = sym(z)
        converged = False
    est = BlockPrecision(p, q, theta, d, l) if np.allclose(theta[:p, :p], np.diag(d) - l) else BlockPrecision(
        p, q, theta, np.diag(theta[:p, :p]) + np.diag(l), l
    )
    try:
        obj = objective_value(est.theta, est.l_y, est.theta_yx, s, lam, gamma)
    except DomainError:
        obj = math.nan
    report = SolveReport(
        estimate=est,
        objective=obj,
        primal_residual=r_norm,
        dual_residual=s_norm,
        iterations=it,
        converged=converged,
        rank_l_y=numerical_rank(est.l_y, opts.rank_tol),
        rank_theta_yx=numerical_rank(est.theta_yx, opts.rank_tol) if q else 0,
        lambda_n=lam,
        gamma=gamma,
        rho_final=rho,
        trace=trace,
        warm=(d, l, k, o, u_dual, rho),
    )
    if not converged:
        logger.info(
            "ADMM stopped after %d iterations (primal %.2e, dual %.2e)", it, r_norm, s_norm
        )
    return report


def solve_composite(
    data: Dataset, opts: SolverOptions, warm: Optional[tuple[Array, ...]] = None
) -> SolveReport:
    """Fit the composite program to joint (y, x) observations."""
    if data.q < 1:
        raise ValidationError("composite fit needs covariates (q >= 1)")
    return solve_program(data.sample_cov, data.p, opts, warm)


def solve_factor(
    data: Dataset,
    lambda_tilde: float,
    opts: SolverOptions | None = None,
    warm: Optional[tuple[Array, ...]] = None,
) -> tuple[FactorModelParams, SolveReport]:
    """Fit the factor program to the responses of ``data`` (covariates ignored)."""
    if not lambda_tilde > 0:
        raise ValidationError("lambda_tilde must be positive")
    opts = replace(opts or SolverOptions(), lambda_n=lambda_tilde)
    y = data.responses()
    report = solve_program(y.sample_cov, y.p, opts, warm)
    fm = FactorModelParams(report.estimate.d_y.copy(), report.estimate.l_y.copy())
    return fm, report
