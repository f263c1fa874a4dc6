"""Block-matrix algebra, tangent spaces of low-rank varieties, and the norms
and subspace metrics shared by the rest of the package.

Matrices are plain ``numpy`` arrays. Symmetric matrices are symmetrized on
construction wherever a type relies on symmetry.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

DEFAULT_RANK_TOL = 1e-3


class DimensionError(ValueError):
    """Raised when block shapes do not agree with a declared (p, q) split."""


class RankError(ValueError):
    """Raised when a requested rank exceeds the numerical rank of a matrix."""


class ValidationError(ValueError):
    """Raised for inputs violating a documented precondition."""


def sym(m: Array) -> Array:
    """Return the symmetric part of a square matrix."""
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def spec_norm(m: Array) -> float:
    """Spectral norm; 0 for empty matrices."""
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return 0.0
    if m.ndim == 1:
        return float(np.max(np.abs(m)))
    return float(np.linalg.norm(m, 2))


# ---------------------------------------------------------------------------
# Block tuples and the F / G operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockTuple:
    """Element (d, l, k, o) of S^p x S^p x R^{p x q} x S^q.

    ``d`` is stored as a full p x p matrix: it is diagonal for tuples built by
    the solver or drawn from the diagonal subspace, but adjoint images
    ``F^dagger(M)`` put a full block there.
    """

    d: Array
    l: Array
    k: Array
    o: Array

    def __post_init__(self) -> None:
        d, l, k, o = (np.asarray(x, dtype=float) for x in (self.d, self.l, self.k, self.o))
        if d.ndim == 1:
            d = np.diag(d)
        if k.ndim == 1:
            k = k.reshape(-1, 1)
        p = l.shape[0]
        q = o.shape[0] if o.ndim == 2 else 0
        if o.ndim != 2:
            o = np.zeros((0, 0))
        if d.shape != (p, p) or l.shape != (p, p) or k.shape != (p, q) or o.shape != (q, q):
            raise DimensionError(
                f"inconsistent block shapes d={d.shape} l={l.shape} k={k.shape} o={o.shape}"
            )
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "o", o)

    @property
    def p(self) -> int:
        return self.l.shape[0]

    @property
    def q(self) -> int:
        return self.o.shape[0]

    @classmethod
    def zeros(cls, p: int, q: int) -> "BlockTuple":
        return cls(np.zeros((p, p)), np.zeros((p, p)), np.zeros((p, q)), np.zeros((q, q)))

    def __add__(self, other: "BlockTuple") -> "BlockTuple":
        return BlockTuple(self.d + other.d, self.l + other.l, self.k + other.k, self.o + other.o)

    def __sub__(self, other: "BlockTuple") -> "BlockTuple":
        return BlockTuple(self.d - other.d, self.l - other.l, self.k - other.k, self.o - other.o)

    def scale(self, c: float) -> "BlockTuple":
        return BlockTuple(c * self.d, c * self.l, c * self.k, c * self.o)


def block_inner(a: BlockTuple, b: BlockTuple) -> float:
    """Pairing on tuples under which ``block_adjoint`` is the adjoint of ``block_assemble``.

    The off-diagonal block enters a symmetric matrix twice, and the second
    slot enters F with a minus sign, so the pairing is
    <d,d'> - <l,l'> + 2<k,k'> + <o,o'>.
    """
    return float(
        np.sum(a.d * b.d) - np.sum(a.l * b.l) + 2.0 * np.sum(a.k * b.k) + np.sum(a.o * b.o)
    )


def pair_inner(a: BlockTuple, b: BlockTuple) -> float:
    """Pairing on (l, k) pairs under which G^dagger is the adjoint of G: <l,l'> + 2<k,k'>."""
    return float(np.sum(a.l * b.l) + 2.0 * np.sum(a.k * b.k))


def block_assemble(t: BlockTuple, mode: Literal["F", "G"] = "F") -> Array:
    """Assemble a (p+q) x (p+q) matrix from a tuple.

    ``F`` gives ``[[d - l, k], [k^T, o]]``; ``G`` gives ``[[l, k], [k^T, 0]]``
    and ignores ``d`` and ``o``.
    """
    if mode == "F":
        top = t.d - t.l
        low = t.o
    elif mode == "G":
        top = t.l
        low = np.zeros_like(t.o)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return np.block([[top, t.k], [t.k.T, low]])


def split_blocks(m: Array, p: int) -> tuple[Array, Array, Array]:
    """Return (m_y, m_yx, m_x) of a (p+q)-dimensional matrix."""
    return m[:p, :p], m[:p, p:], m[p:, p:]


def block_adjoint(m: Array, split: tuple[int, int], mode: Literal["F", "G"] = "F") -> BlockTuple:
    """Adjoint maps: F^dagger(M) = (Q, Q, K, O); G^dagger(M) = (Q, K).

    For ``G`` the result is embedded as a tuple with ``d = Q`` and ``o = 0``.
    """
    m = np.asarray(m, dtype=float)
    p, q = split
    if p < 0 or q < 0 or m.shape != (p + q, p + q):
        raise DimensionError(f"split {split} incompatible with matrix of shape {m.shape}")
    qy, k, o = split_blocks(m, p)
    if mode == "F":
        return BlockTuple(qy.copy(), qy.copy(), k.copy(), o.copy())
    if mode == "G":
        return BlockTuple(qy.copy(), qy.copy(), k.copy(), np.zeros((q, q)))
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class BlockPrecision:
    """Joint precision matrix with its diagonal-minus-low-rank y block."""

    p: int
    q: int
    theta: Array
    d_y: Array
    l_y: Array

    def __post_init__(self) -> None:
        theta = sym(self.theta)
        d_y = np.asarray(self.d_y, dtype=float).ravel()
        l_y = sym(self.l_y)
        if theta.shape != (self.p + self.q, self.p + self.q):
            raise DimensionError(f"theta shape {theta.shape} does not match p={self.p}, q={self.q}")
        if d_y.shape != (self.p,) or l_y.shape != (self.p, self.p):
            raise DimensionError("d_y / l_y shapes do not match p")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "d_y", d_y)
        object.__setattr__(self, "l_y", l_y)

    @classmethod
    def from_blocks(cls, d_y: Array, l_y: Array, theta_yx: Array, theta_x: Array) -> "BlockPrecision":
        d_y = np.asarray(d_y, dtype=float).ravel()
        theta_yx = np.asarray(theta_yx, dtype=float)
        if theta_yx.ndim == 1:
            theta_yx = theta_yx.reshape(-1, 1)
        p = d_y.size
        q = np.asarray(theta_x).shape[0]
        theta = block_assemble(BlockTuple(d_y, l_y, theta_yx.reshape(p, q), theta_x))
        return cls(p, q, theta, d_y, l_y)

    @property
    def theta_y(self) -> Array:
        return self.theta[: self.p, : self.p]

    @property
    def theta_yx(self) -> Array:
        return self.theta[: self.p, self.p :]

    @property
    def theta_x(self) -> Array:
        return self.theta[self.p :, self.p :]

    def marginal_low_rank(self) -> Array:
        """L_y + Theta_yx Theta_x^{-1} Theta_xy, the total latent effect on y."""
        if self.q == 0:
            return self.l_y.copy()
        return sym(self.l_y + self.theta_yx @ np.linalg.solve(self.theta_x, self.theta_yx.T))

    def check(self, assembly_tol: float = 1e-12, psd_tol: float = 1e-8) -> None:
        """Raise ``ValidationError`` if a structural invariant fails."""
        if np.linalg.eigvalsh(self.theta)[0] <= 0:
            raise ValidationError("theta is not positive definite")
        resid = np.max(np.abs(self.theta_y - (np.diag(self.d_y) - self.l_y)), initial=0.0)
        if resid > assembly_tol * max(1.0, np.max(np.abs(self.theta_y), initial=0.0)):
            raise ValidationError(f"theta_y != diag(d_y) - l_y (max deviation {resid:.3g})")
        if self.p and np.linalg.eigvalsh(self.l_y)[0] < -psd_tol:
            raise ValidationError("l_y is not positive semidefinite")


# ---------------------------------------------------------------------------
# Tangent spaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TangentSpace:
    """Tangent space at a rank-r matrix, stored through its row/column spaces.

    For ``kind == "symmetric"`` the row basis is the column basis.
    """

    kind: Literal["symmetric", "rectangular"]
    col_basis: Array
    row_basis: Array
    shape: tuple[int, int]
    _pu: Array = field(init=False, repr=False, compare=False)
    _pv: Array = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        u = np.asarray(self.col_basis, dtype=float).reshape(self.shape[0], -1)
        v = np.asarray(self.row_basis, dtype=float).reshape(self.shape[1], -1)
        if u.shape[1] != v.shape[1]:
            raise DimensionError("column and row bases have different ranks")
        object.__setattr__(self, "col_basis", u)
        object.__setattr__(self, "row_basis", v)
        object.__setattr__(self, "_pu", u @ u.T)
        object.__setattr__(self, "_pv", v @ v.T)

    @property
    def rank(self) -> int:
        return self.col_basis.shape[1]

    @property
    def dim(self) -> int:
        """Dimension of the tangent space as a real vector space."""
        p1, p2 = self.shape
        r = self.rank
        if self.kind == "symmetric":
            return p1 * r - r * (r - 1) // 2
        return r * (p1 + p2 - r)

    def project(self, m: Array) -> Array:
        return tangent_project(self, m)

    def project_perp(self, m: Array) -> Array:
        return np.asarray(m, dtype=float) - tangent_project(self, m)


def numerical_rank(m: Array, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``rel_tol`` times the largest one."""
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] <= 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def tangent_of(
    n: Array,
    r: int | None = None,
    rel_tol: float = DEFAULT_RANK_TOL,
    kind: Literal["symmetric", "rectangular"] | None = None,
) -> TangentSpace:
    """Tangent space of the rank-r variety at ``n``.

    With ``r=None`` the numerical rank of ``n`` is used. Symmetric inputs give
    a symmetric tangent space built from the top-r eigenvectors (by magnitude).
    """
    n = np.asarray(n, dtype=float)
    nr = numerical_rank(n, rel_tol)
    if r is None:
        r = nr
    if r > nr:
        raise RankError(f"requested rank {r} exceeds numerical rank {nr}")
    if kind is None:
        scale = max(1.0, float(np.abs(n).max(initial=0.0)))
        symmetric = n.shape[0] == n.shape[1] and np.allclose(n, n.T, rtol=0, atol=1e-12 * scale)
    else:
        symmetric = kind == "symmetric"
    if symmetric:
        w, vecs = np.linalg.eigh(sym(n))
        order = np.argsort(-np.abs(w))[:r]
        u = vecs[:, order]
        return TangentSpace("symmetric", u, u, n.shape)
    u, _, vt = np.linalg.svd(n, full_matrices=False)
    return TangentSpace("rectangular", u[:, :r], vt[:r].T, n.shape)


def tangent_project(t: TangentSpace, m: Array) -> Array:
    """P_U m + m P_V - P_U m P_V."""
    m = np.asarray(m, dtype=float)
    if m.shape != t.shape:
        raise DimensionError(f"matrix shape {m.shape} does not match tangent space {t.shape}")
    pum = t._pu @ m
    return pum + m @ t._pv - pum @ t._pv


def _top_singular_pair(y: Array) -> tuple[float, Array, Array]:
    u, s, vt = np.linalg.svd(y)
    return float(s[0]), u[:, 0], vt[0]


def _polar(g: Array) -> Array:
    u, _, vt = np.linalg.svd(g, full_matrices=False)
    return u @ vt


def rho_distance(
    t1: TangentSpace,
    t2: TangentSpace,
    restarts: int = 5,
    iters: int = 200,
    tol: float = 1e-8,
    seed: int = 0,
) -> float:
    """max over ||N||_2 <= 1 of ||(P_T1 - P_T2)(N)||_2.

    The maximum of a convex function over the spectral-norm ball is attained
    at an orthogonal-type extreme point, so each step replaces N by the polar
    factor of the ascent direction (P_T1 - P_T2)(u v^T). The result is the
    best local maximum over ``restarts`` starts, a lower estimate of the true
    value.
    """
    if t1.shape != t2.shape or t1.kind != t2.kind:
        raise DimensionError("tangent spaces live in different ambient spaces")
    rng = np.random.default_rng(seed)
    symmetric = t1.kind == "symmetric"

    def op(n: Array) -> Array:
        return tangent_project(t1, n) - tangent_project(t2, n)

    starts = []
    # deterministic starts: directions mixing the two column spaces
    starts.append(_polar(t1.col_basis @ t1.row_basis.T - t2.col_basis @ t2.row_basis.T + 1e-12 * np.ones(t1.shape)))
    while len(starts) < restarts:
        g = rng.standard_normal(t1.shape)
        starts.append(_polar(sym(g) if symmetric else g))

    best = 0.0
    for n in starts:
        val = 0.0
        for _ in range(iters):
            y = op(n)
            s, u, v = _top_singular_pair(y)
            if s <= 0.0:
                break
            g = op(np.outer(u, v))
            if symmetric:
                g = sym(g)
            n = _polar(g)
            new = spec_norm(op(n))
            if new - val <= tol * max(1.0, new):
                val = max(val, new)
                break
            val = new
        best = max(best, val)
    return best


def coherence(basis: Array) -> float:
    """max_i ||P_U e_i||^2 for the subspace spanned by orthonormal ``basis``."""
    u = np.asarray(basis, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, 1)
    if not np.allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-8):
        raise ValidationError("basis columns are not orthonormal")
    return float(np.max(np.sum(u * u, axis=1)))


def orth(m: Array, rel_tol: float = 1e-10) -> Array:
    """Orthonormal basis of the column space of ``m``."""
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.size == 0:
        return np.zeros((m.shape[0], 0))
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((m.shape[0], 0))
    return u[:, s > rel_tol * s[0]]


def min_principal_angle(u1: Array, u2: Array) -> float:
    """Smallest principal angle between two subspaces, in degrees."""
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    if u1.ndim == 1:
        u1 = u1.reshape(-1, 1)
    if u2.ndim == 1:
        u2 = u2.reshape(-1, 1)
    if u1.shape[1] == 0 or u2.shape[1] == 0:
        return 90.0
    s = np.linalg.svd(u1.T @ u2, compute_uv=False)
    return float(np.degrees(np.arccos(np.clip(s[0], -1.0, 1.0))))


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormParams:
    gamma: float

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValidationError("gamma must be positive")

    @property
    def m(self) -> float:
        return max(1.0, 1.0 / self.gamma)

    @property
    def m_bar(self) -> float:
        return max(1.0, self.gamma)


def _gamma_of(params: NormParams | float) -> float:
    return params.gamma if isinstance(params, NormParams) else NormParams(float(params)).gamma


def norm_phi(t: BlockTuple, params: NormParams | float) -> float:
    """max{||d||, ||l||, ||k|| / gamma, ||o||} (spectral norms)."""
    g = _gamma_of(params)
    return max(spec_norm(t.d), spec_norm(t.l), spec_norm(t.k) / g, spec_norm(t.o))


def norm_gamma(l: Array, k: Array, params: NormParams | float) -> float:
    """max{||l||, ||k|| / gamma} (spectral norms)."""
    g = _gamma_of(params)
    return max(spec_norm(l), spec_norm(k) / g)
