"""Ground-truth composite factor models: construction, sampling, and the
covariance/precision bookkeeping between them.

A composite model is ``y = A x + B_u zeta_u + eps`` with ``x ~ N(0, Sigma_x)``,
``zeta_u ~ N(0, Sigma_zeta_u)`` and diagonal noise ``eps ~ N(0, Sigma_eps)``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_ops import (
    Array,
    BlockPrecision,
    ValidationError,
    numerical_rank,
    orth,
    spec_norm,
    sym,
)

logger = logging.getLogger(__name__)

TRANSVERSALITY_MIN_RAD = 1e-6


class RecoveryError(ValueError):
    """Raised when composite-model parameters cannot be read off an estimate."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so fixtures reproduce across platforms."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _require_pd(name: str, m: Array) -> None:
    if m.shape[0] and np.linalg.eigvalsh(sym(m))[0] <= 0:
        raise ValidationError(f"{name} must be positive definite")


def _min_nonzero_sv(m: Array, rel_tol: float = 1e-10) -> float:
    if m.size == 0:
        return 0.0
    s = np.linalg.svd(m, compute_uv=False)
    s = s[s > rel_tol * max(s[0], 1e-300)]
    return float(s[-1]) if s.size else 0.0


@dataclass(frozen=True)
class FactorModelParams:
    """Factor model in precision form: Theta_y = diag(d) - l."""

    d: Array
    l: Array

    def __post_init__(self) -> None:
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float).ravel())
        object.__setattr__(self, "l", sym(self.l))

    @property
    def p(self) -> int:
        return self.d.size

    @property
    def precision(self) -> Array:
        return np.diag(self.d) - self.l

    def rank(self, rel_tol: float = 1e-3) -> int:
        return numerical_rank(self.l, rel_tol)


@dataclass(frozen=True)
class PopulationModel:
    a_star: Array
    b_u_star: Array
    sigma_zeta_u: Array
    sigma_eps: Array
    sigma_x: Array

    @property
    def p(self) -> int:
        return self.a_star.shape[0]

    @property
    def q(self) -> int:
        return self.a_star.shape[1]

    @cached_property
    def d_y_star(self) -> Array:
        return 1.0 / np.diag(self.sigma_eps)

    @cached_property
    def l_y_star(self) -> Array:
        b = self.b_u_star
        if b.shape[1] == 0:
            return np.zeros((self.p, self.p))
        eb = self.d_y_star[:, None] * b  # Sigma_eps^{-1} B_u
        inner = np.linalg.inv(self.sigma_zeta_u) + b.T @ eb
        return sym(eb @ np.linalg.solve(inner, eb.T))

    @cached_property
    def theta_star(self) -> Array:
        theta_y = np.diag(self.d_y_star) - self.l_y_star
        theta_yx = -theta_y @ self.a_star
        theta_x = sym(np.linalg.inv(self.sigma_x) + self.a_star.T @ theta_y @ self.a_star)
        return np.block([[theta_y, theta_yx], [theta_yx.T, theta_x]])

    @cached_property
    def sigma_star(self) -> Array:
        a, b = self.a_star, self.b_u_star
        s_y = a @ self.sigma_x @ a.T + b @ self.sigma_zeta_u @ b.T + self.sigma_eps
        s_yx = a @ self.sigma_x
        return sym(np.block([[s_y, s_yx], [s_yx.T, self.sigma_x]]))

    @property
    def precision(self) -> BlockPrecision:
        return BlockPrecision(self.p, self.q, self.theta_star, self.d_y_star, self.l_y_star)

    @property
    def theta_yx_star(self) -> Array:
        return self.theta_star[: self.p, self.p :]

    @property
    def theta_x_star(self) -> Array:
        return self.theta_star[self.p :, self.p :]

    @property
    def k_x(self) -> int:
        return numerical_rank(self.a_star, 1e-10)

    @property
    def k_u(self) -> int:
        return numerical_rank(self.b_u_star, 1e-10)

    @property
    def sigma_y(self) -> float:
        """Smallest nonzero singular value of L*_y."""
        return _min_nonzero_sv(self.l_y_star)

    @property
    def sigma_yx(self) -> float:
        """Smallest nonzero singular value of Theta*_yx."""
        return _min_nonzero_sv(self.theta_yx_star)

    @property
    def psi(self) -> float:
        return spec_norm(self.sigma_star)


def build_population(
    a: Array,
    b_u: Array,
    sigma_zeta_u: Array | None = None,
    sigma_eps: Array | None = None,
    sigma_x: Array | None = None,
) -> PopulationModel:
    """Assemble a composite model; omitted covariances default to identities."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    p, q = a.shape
    b_u = np.asarray(b_u, dtype=float).reshape(p, -1)
    k_u = b_u.shape[1]
    sigma_zeta_u = np.eye(k_u) if sigma_zeta_u is None else np.atleast_2d(np.asarray(sigma_zeta_u, dtype=float))
    sigma_eps = np.eye(p) if sigma_eps is None else np.asarray(sigma_eps, dtype=float)
    if sigma_eps.ndim == 1:
        sigma_eps = np.diag(sigma_eps)
    sigma_x = np.eye(q) if sigma_x is None else np.atleast_2d(np.asarray(sigma_x, dtype=float))

    if sigma_eps.shape != (p, p) or np.any(sigma_eps - np.diag(np.diag(sigma_eps))):
        raise ValidationError("sigma_eps must be a p x p diagonal matrix")
    if np.any(np.diag(sigma_eps) <= 0):
        raise ValidationError("sigma_eps must be positive definite")
    if sigma_zeta_u.shape != (k_u, k_u) or sigma_x.shape != (q, q):
        raise ValidationError("covariance shapes do not match A / B_u")
    _require_pd("sigma_zeta_u", sigma_zeta_u)
    _require_pd("sigma_x", sigma_x)

    ua, ub = orth(a), orth(b_u)
    if ua.shape[1] and ub.shape[1]:
        s = np.linalg.svd(ua.T @ ub, compute_uv=False)
        angle = float(np.arccos(np.clip(s[0], -1.0, 1.0)))
        if angle < TRANSVERSALITY_MIN_RAD:
            raise ValidationError(
                f"column spaces of A and B_u intersect (min angle {angle:.3g} rad)"
            )
    return PopulationModel(a, b_u, sym(sigma_zeta_u), sigma_eps, sym(sigma_x))


def marginalize_factor(pop: PopulationModel) -> FactorModelParams:
    """Factor model of y after integrating out x."""
    return FactorModelParams(pop.d_y_star.copy(), pop.precision.marginal_low_rank())


def recover_parameters(
    est: BlockPrecision, rank_tol: float = 1e-3, psd_tol: float = 1e-8
) -> tuple[Array, Array, Array]:
    """Read (A, B_u, Sigma_eps) off a fitted precision.

    ``B_u`` is a square root of (D - L)^{-1} - D^{-1} with ``rank(L)``
    columns; eigenvalues in (-psd_tol, 0) are clamped to zero.
    """
    theta_y = np.diag(est.d_y) - est.l_y
    if np.linalg.eigvalsh(theta_y)[0] <= 0:
        raise RecoveryError("D_y - L_y is not positive definite")
    if np.any(est.d_y <= 0):
        raise RecoveryError("D_y has non-positive entries")
    a_hat = -np.linalg.solve(theta_y, est.theta_yx)
    diff = sym(np.linalg.inv(theta_y) - np.diag(1.0 / est.d_y))
    w, v = np.linalg.eigh(diff)
    if w[0] < -psd_tol * max(1.0, abs(w[-1])):
        raise RecoveryError(f"(D-L)^-1 - D^-1 is indefinite (min eigenvalue {w[0]:.3g})")
    r = numerical_rank(est.l_y, rank_tol)
    idx = np.argsort(w)[::-1][:r]
    b_hat = v[:, idx] * np.sqrt(np.clip(w[idx], 0.0, None))
    sigma_eps_hat = np.diag(1.0 / est.d_y)
    return a_hat, b_hat, sigma_eps_hat


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Zero-mean joint observations; y columns first, then x columns."""

    rows: Array
    p: int
    q: int = 0
    names: tuple[str, ...] | None = field(default=None)

    def __post_init__(self) -> None:
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if rows.shape[1] != self.p + self.q:
            raise ValidationError(f"rows have {rows.shape[1]} columns, expected {self.p + self.q}")
        object.__setattr__(self, "rows", rows)
        if self.names is not None:
            if len(self.names) != self.p + self.q:
                raise ValidationError("names do not match column count")
            object.__setattr__(self, "names", tuple(self.names))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @cached_property
    def sample_cov(self) -> Array:
        return sym(self.rows.T @ self.rows / self.n)

    @property
    def y(self) -> Array:
        return self.rows[:, : self.p]

    @property
    def x(self) -> Array:
        return self.rows[:, self.p :]

    def column_names(self) -> list[str]:
        if self.names is not None:
            return list(self.names)
        return [f"y{i + 1}" for i in range(self.p)] + [f"x{j + 1}" for j in range(self.q)]

    def responses(self) -> "Dataset":
        names = None if self.names is None else self.names[: self.p]
        return Dataset(self.rows[:, : self.p], self.p, 0, names)

    def subset(self, idx: Sequence[int] | Array) -> "Dataset":
        return Dataset(self.rows[np.asarray(idx)], self.p, self.q, self.names)

    def permute_y(self, perm: Sequence[int]) -> "Dataset":
        cols = list(perm) + list(range(self.p, self.p + self.q))
        names = None if self.names is None else tuple(self.names[c] for c in cols)
        return Dataset(self.rows[:, cols], self.p, self.q, names)

    def permute_x(self, perm: Sequence[int]) -> "Dataset":
        cols = list(range(self.p)) + [self.p + j for j in perm]
        names = None if self.names is None else tuple(self.names[c] for c in cols)
        return Dataset(self.rows[:, cols], self.p, self.q, names)

    def to_csv(self, path: str | Path) -> None:
        """Header row then one observation per line; floats written with repr."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.column_names())
            for row in self.rows:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path, p: int | None = None) -> "Dataset":
        """Read a CSV written by ``to_csv``.

        Without ``p``, columns named ``x...`` are taken as covariates and the
        rest as responses.
        """
        from .io import read_table

        names, values = read_table(path, allow_missing=False)
        if p is None:
            p = sum(1 for c in names if not c.startswith("x"))
        return cls(values, p, len(names) - p, tuple(names))


def sample_observations(pop: PopulationModel, n: int, seed: int) -> Dataset:
    """n i.i.d. draws from N(0, Sigma*)."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    rng = make_rng(seed)
    chol = np.linalg.cholesky(pop.sigma_star)
    z = rng.standard_normal((n, pop.p + pop.q))
    return Dataset(z @ chol.T, pop.p, pop.q)


def _normalized(m: Array) -> Array:
    s = spec_norm(m)
    return m / s if s > 0 else m


def generate_synthetic(
    p: int,
    q: int,
    k_x: int,
    k_u: int,
    cond_bound: float = 10.0,
    seed: int = 0,
    tau: float | None = None,
    tau_range: tuple[float, float] = (1e-4, 10.0),
    bisect_iters: int = 60,
) -> PopulationModel:
    """Random composite model with identity noise covariances.

    A = J K^T and B_u have Gaussian entries and are both rescaled to spectral
    norm tau. Unless ``tau`` is given it is the largest value in
    ``tau_range`` (found by bisection) keeping cond(Theta*) <= cond_bound.
    """
    if not 0 <= k_x <= min(p, q) or not 0 <= k_u <= p:
        raise ValidationError("ranks out of range")
    if tau is None and not cond_bound > 1:
        raise ValidationError("cond_bound must exceed 1")
    rng = make_rng(seed)
    j = rng.standard_normal((p, k_x))
    k = rng.standard_normal((q, k_x))
    b = rng.standard_normal((p, k_u))
    a_unit = _normalized(j @ k.T)
    b_unit = _normalized(b)

    def model(t: float) -> PopulationModel:
        return build_population(t * a_unit, t * b_unit)

    if tau is not None:
        return model(tau)

    def ok(t: float) -> bool:
        return np.linalg.cond(model(t).theta_star) <= cond_bound

    lo, hi = tau_range
    if ok(hi):
        return model(hi)
    if not ok(lo):
        raise ValidationError("cond_bound unattainable within tau_range")
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    logger.debug("generate_synthetic: tau=%.6g", lo)
    return model(lo)
