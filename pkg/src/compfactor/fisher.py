"""Numerical checks of the Fisher-information identifiability conditions.

The three gains of the Fisher information ``M -> Sigma M Sigma`` over a product
of subspaces H = W x T_y x T_yx x S^q are computed in orthonormal (Frobenius)
coordinates of each factor:

* ``chi``: smallest gain of P_H F^+ I F P_H measured in the Phi_gamma norm,
* ``xi``: the same for P_H23 G^+ I G P_H23 in the Gamma_gamma norm,
* ``varphi``: the largest Gamma_gamma size of the component that leaks out of
  H23 after inverting the restricted operator.

These are nonconvex ratio problems over block spectral norms. They are
estimated by a batched multi-start subgradient method, so ``chi`` and ``xi``
are upper estimates of the true minima and ``varphi`` a lower estimate of the
true maximum. The module also holds the closed-form sample-size and
regularization calculator and the quadratic remainder bound check.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core_ops import (
    Array,
    BlockTuple,
    DimensionError,
    NormParams,
    TangentSpace,
    ValidationError,
    block_adjoint,
    block_assemble,
    norm_phi,
    rho_distance,
    spec_norm,
    sym,
    tangent_of,
)
from .population import PopulationModel, make_rng

logger = logging.getLogger(__name__)

MAX_AMBIENT_DIM = 200
MIN_OMEGA = 1e-6
SINGULAR_TOL = 1e-10


class CapacityError(ValueError):
    """Model too large for the dense coordinate representation."""


# ---------------------------------------------------------------------------
# Fisher operator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FisherOperator:
    """The map M -> Sigma M Sigma, the Hessian of -logdet at Theta = Sigma^-1."""

    sigma_star: Array

    def __post_init__(self) -> None:
        s = np.asarray(self.sigma_star, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise DimensionError("sigma_star must be square")
        if not np.allclose(s, s.T, atol=1e-12 * max(1.0, np.abs(s).max())):
            raise ValidationError("sigma_star must be symmetric")
        object.__setattr__(self, "sigma_star", sym(s))

    @property
    def dim(self) -> int:
        return self.sigma_star.shape[0]

    @classmethod
    def from_population(cls, pop: PopulationModel) -> "FisherOperator":
        return cls(pop.sigma_star)


def fisher_apply(op: FisherOperator, m: Array) -> Array:
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (op.dim, op.dim):
        raise DimensionError(f"expected {op.dim}x{op.dim} input, got {m.shape}")
    return op.sigma_star @ m @ op.sigma_star


# ---------------------------------------------------------------------------
# Subspace families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubspaceFamily:
    """H = W x t_y x t_yx x S^q (diagonal matrices and all of S^q implicit)."""

    p: int
    q: int
    t_y: TangentSpace
    t_yx: TangentSpace
    provenance: str = "nominal"
    rho_y: float = 0.0
    rho_yx: float = 0.0

    @property
    def max_angle_deg(self) -> float:
        """Largest tangent-space angle to the nominal spaces, in degrees."""
        return math.degrees(math.asin(min(1.0, max(self.rho_y, self.rho_yx))))


def _nominal_spaces(pop: PopulationModel, rank_tol: float) -> tuple[TangentSpace, TangentSpace]:
    p, q = pop.p, pop.q
    t_y = tangent_of(pop.l_y_star, pop.k_u, rank_tol, kind="symmetric")
    t_yx = tangent_of(pop.theta_yx_star, pop.k_x, rank_tol, kind="rectangular")
    assert t_y.shape == (p, p) and t_yx.shape == (p, q)
    return t_y, t_yx


def _perturb_to_angle(
    base: Array,
    rank: int,
    nominal: TangentSpace,
    omega: float,
    rng: np.random.Generator,
    symmetric: bool,
    max_bisect: int = 50,
) -> tuple[TangentSpace, float] | None:
    """Tangent space at base + delta*G with rho to ``nominal`` in [0.8*omega, omega]."""
    g = rng.standard_normal(base.shape)
    if symmetric:
        g = sym(g)
    g /= spec_norm(g)
    kind = "symmetric" if symmetric else "rectangular"
    sv = np.linalg.svd(base, compute_uv=False)
    sigma_min = float(sv[rank - 1])

    def rho_at(delta: float) -> tuple[float, TangentSpace]:
        t = tangent_of(base + delta * g, rank, rel_tol=1e-12, kind=kind)
        return rho_distance(t, nominal), t

    lo_target, hi_target = 0.8 * omega, omega
    mid_target = 0.9 * omega
    lo, hi = 0.0, None
    delta = 0.5 * omega * sigma_min
    for _ in range(max_bisect):
        val, t = rho_at(delta)
        if lo_target <= val <= hi_target:
            return t, val
        if val < lo_target:
            lo = delta
            # the map is close to linear near zero: jump by the ratio
            nxt = delta * mid_target / max(val, 1e-300)
            delta = nxt if hi is None else min(nxt, 0.5 * (lo + hi))
            if hi is not None and delta <= lo:
                delta = 0.5 * (lo + hi)
        else:
            hi = delta
            nxt = delta * mid_target / val
            delta = max(nxt, 0.5 * (lo + hi)) if nxt <= lo else nxt
            if delta >= hi or delta <= lo:
                delta = 0.5 * (lo + hi)
    return None


def sample_family(
    pop: PopulationModel,
    omega_y: float,
    omega_yx: float,
    n_samples: int = 50,
    seed: int = 0,
    rank_tol: float = 1e-8,
) -> list[SubspaceFamily]:
    """The nominal family plus ``n_samples`` perturbed ones within the rho bounds.

    A perturbed tangent space is taken at L*_y + delta G (resp. Theta*_yx +
    delta G) for a random unit-norm G, with delta searched so that its rho to
    the nominal space lies in [0.8 omega, omega]. Below ``MIN_OMEGA`` the
    perturbations collapse and only the nominal family is returned.
    """
    for w in (omega_y, omega_yx):
        if not 0 < w < 1:
            raise ValidationError("omega values must lie in (0, 1)")
    p, q = pop.p, pop.q
    t_y0, t_yx0 = _nominal_spaces(pop, rank_tol)
    out = [SubspaceFamily(p, q, t_y0, t_yx0, "nominal")]
    perturb_y = pop.k_u > 0 and omega_y >= MIN_OMEGA
    perturb_yx = pop.k_x > 0 and omega_yx >= MIN_OMEGA
    if not (perturb_y or perturb_yx):
        return out
    for i in range(n_samples):
        rng = make_rng(seed * 1_000_003 + i)
        t_y, r_y = t_y0, 0.0
        t_yx, r_yx = t_yx0, 0.0
        if perturb_y:
            res = _perturb_to_angle(pop.l_y_star, pop.k_u, t_y0, omega_y, rng, True)
            if res is None:
                logger.warning("sample_family: sample %d, no perturbation found for T_y; skipped", i)
                continue
            t_y, r_y = res
        if perturb_yx:
            res = _perturb_to_angle(pop.theta_yx_star, pop.k_x, t_yx0, omega_yx, rng, False)
            if res is None:
                logger.warning("sample_family: sample %d, no perturbation found for T_yx; skipped", i)
                continue
            t_yx, r_yx = res
        out.append(
            SubspaceFamily(p, q, t_y, t_yx, f"omega=({omega_y},{omega_yx}) seed={seed} sample={i}", r_y, r_yx)
        )
    return out


# ---------------------------------------------------------------------------
# Orthonormal coordinates of the subspace factors
# ---------------------------------------------------------------------------
#
# Every factor of a product space is a "slot" with an orthonormal coordinate
# system (Frobenius inner product), a weight in the block norm, and a routine
# returning the weighted spectral norm of a batch of coordinate vectors along
# with a subgradient in coordinates. Tangent-space slots exploit that their
# elements have rank at most 2r, so norms reduce to 2r x 2r problems.


def _complement(u: Array) -> Array:
    n, r = u.shape
    if r == 0:
        return np.eye(n)
    full, _, _ = np.linalg.svd(u, full_matrices=True)
    return full[:, r:]


_ROOT2 = math.sqrt(2.0)


class _Slot:
    shape: tuple[int, int]
    size: int
    weight: float

    def to_matrix(self, c: Array) -> Array:  # pragma: no cover - interface
        raise NotImplementedError

    def from_matrix(self, m: Array) -> Array:  # pragma: no cover - interface
        raise NotImplementedError

    def norms(self, c: Array) -> tuple[Array, Array]:  # pragma: no cover - interface
        raise NotImplementedError

    def basis(self) -> Array:
        """Rows: vectorized orthonormal basis elements (for tests and diagnostics)."""
        width = self.shape[0] * self.shape[1]
        if self.size == 0:
            return np.zeros((0, width))
        eye = np.eye(self.size)
        return np.array([self.to_matrix(e).ravel() for e in eye]).reshape(self.size, width)


class _DiagSlot(_Slot):
    def __init__(self, p: int, weight: float = 1.0) -> None:
        self.shape, self.size, self.weight = (p, p), p, weight

    def to_matrix(self, c: Array) -> Array:
        return np.diag(c)

    def from_matrix(self, m: Array) -> Array:
        return np.diag(m).copy()

    def norms(self, c: Array) -> tuple[Array, Array]:
        rows = np.arange(c.shape[0])
        idx = np.argmax(np.abs(c), axis=1)
        grads = np.zeros_like(c)
        grads[rows, idx] = np.sign(c[rows, idx])
        return self.weight * np.abs(c[rows, idx]), self.weight * grads


def _sym_top(mats: Array) -> tuple[Array, Array, Array]:
    """Largest-magnitude eigenpair of a batch of symmetric matrices."""
    w, v = np.linalg.eigh(mats)
    rows = np.arange(mats.shape[0])
    idx = np.argmax(np.abs(w), axis=1)
    lam = w[rows, idx]
    return np.abs(lam), np.sign(lam), v[rows, :, idx]


def _rect_top(mats: Array) -> tuple[Array, Array, Array]:
    u, s, vt = np.linalg.svd(mats, full_matrices=False)
    return s[:, 0], u[:, :, 0], vt[:, 0, :]


class _FullSymSlot(_Slot):
    """All of S^q, coordinates e_ii and (e_ij + e_ji)/sqrt 2."""

    def __init__(self, q: int, weight: float = 1.0) -> None:
        self.shape, self.weight = (q, q), weight
        self.iu = np.triu_indices(q)
        self.size = len(self.iu[0])
        self.scale = np.where(self.iu[0] == self.iu[1], 1.0, 1.0 / _ROOT2)

    def to_matrix(self, c: Array) -> Array:
        m = np.zeros(self.shape)
        m[self.iu] = c * self.scale
        return m + np.triu(m, 1).T

    def from_matrix(self, m: Array) -> Array:
        m = np.asarray(m)
        return np.where(self.iu[0] == self.iu[1], m[self.iu], _ROOT2 * 0.5 * (m[self.iu] + m.T[self.iu]))

    def _batch(self, c: Array) -> Array:
        q = self.shape[0]
        m = np.zeros((c.shape[0], q, q))
        m[:, self.iu[0], self.iu[1]] = c * self.scale
        return m + np.triu(m, 1).transpose(0, 2, 1)

    def norms(self, c: Array) -> tuple[Array, Array]:
        if self.size == 0:
            return np.zeros(c.shape[0]), np.zeros_like(c)
        val, sgn, vec = _sym_top(self._batch(c))
        outer = vec[:, self.iu[0]] * vec[:, self.iu[1]]
        grads = sgn[:, None] * outer / self.scale  # off-diagonal: sqrt 2 * x_i x_j
        return self.weight * val, self.weight * grads


class _SymTangentSlot(_Slot):
    """Symmetric tangent space at a rank-r matrix with column space U.

    Element: U A U' + U_perp B U' + U B' U_perp'. Coordinates: for each a the
    entries A[a,a], sqrt2*A[a,b] (b > a); then sqrt2*B[b,a] for each (a, b).
    """

    def __init__(self, t: TangentSpace, weight: float = 1.0) -> None:
        self.u = t.col_basis
        p, r = self.u.shape
        self.r = r
        self.uperp = _complement(self.u)
        self.shape, self.weight = (p, p), weight
        self.iu = np.triu_indices(r)
        self.n_a = len(self.iu[0])
        self.size = t.dim
        self.a_scale = np.where(self.iu[0] == self.iu[1], 1.0, 1.0 / _ROOT2)

    def _split(self, c: Array) -> tuple[Array, Array]:
        """Batch coordinates -> (A (b, r, r), B (b, p-r, r))."""
        bsz, r = c.shape[0], self.r
        a = np.zeros((bsz, r, r))
        a[:, self.iu[0], self.iu[1]] = c[:, : self.n_a] * self.a_scale
        a = a + np.triu(a, 1).transpose(0, 2, 1)
        b = c[:, self.n_a :].reshape(bsz, r, -1).transpose(0, 2, 1) / _ROOT2
        return a, b

    def to_matrix(self, c: Array) -> Array:
        if self.size == 0:
            return np.zeros(self.shape)
        a, b = self._split(c[None, :])
        a, b = a[0], b[0]
        ub = self.uperp @ b @ self.u.T
        return self.u @ a @ self.u.T + ub + ub.T

    def from_matrix(self, m: Array) -> Array:
        if self.size == 0:
            return np.zeros(0)
        m = np.asarray(m)
        a = self.u.T @ m @ self.u
        a = 0.5 * (a + a.T)
        b = 0.5 * (self.uperp.T @ m @ self.u + (self.u.T @ m @ self.uperp).T)
        ca = np.where(self.iu[0] == self.iu[1], a[self.iu], _ROOT2 * a[self.iu])
        return np.concatenate([ca, _ROOT2 * b.T.ravel()])

    def _grad_from_vector(self, alpha: Array, beta: Array) -> Array:
        """Coordinates of x x' where U'x = alpha, U_perp'x = beta (batched)."""
        ga = alpha[:, self.iu[0]] * alpha[:, self.iu[1]] / self.a_scale
        gb = _ROOT2 * (alpha[:, :, None] * beta[:, None, :]).reshape(alpha.shape[0], -1)
        return np.concatenate([ga, gb], axis=1)

    def norms(self, c: Array) -> tuple[Array, Array]:
        bsz, r = c.shape[0], self.r
        if self.size == 0:
            return np.zeros(bsz), np.zeros_like(c)
        a, b = self._split(c)
        if b.shape[1] == 0:
            small = a
            qmat = np.zeros((bsz, 0, 0))
            k = 0
        else:
            qmat, rmat = np.linalg.qr(b)  # (b, p-r, k), (b, k, r)
            k = rmat.shape[1]
            small = np.zeros((bsz, r + k, r + k))
            small[:, :r, :r] = a
            small[:, r:, :r] = rmat
            small[:, :r, r:] = rmat.transpose(0, 2, 1)
        val, sgn, vec = _sym_top(small)
        alpha = vec[:, :r]
        beta = np.einsum("bik,bk->bi", qmat, vec[:, r:]) if k else np.zeros((bsz, self.uperp.shape[1]))
        grads = sgn[:, None] * self._grad_from_vector(alpha, beta)
        return self.weight * val, self.weight * grads


class _RectTangentSlot(_Slot):
    """Rectangular tangent space with column space U and row space V.

    Element: [U U_perp] [[A, B], [C, 0]] [V V_perp]'. Coordinates: the rows
    of [A B] (r x q) followed by the rows of C ((p-r) x r).
    """

    def __init__(self, t: TangentSpace, weight: float = 1.0) -> None:
        self.u, self.v = t.col_basis, t.row_basis
        p, q = t.shape
        self.r = self.u.shape[1]
        self.uperp, self.vperp = _complement(self.u), _complement(self.v)
        self.shape, self.weight = (p, q), weight
        self.size = t.dim
        self.wv = np.hstack([self.v, self.vperp])  # q x q

    def _split(self, c: Array) -> tuple[Array, Array, Array]:
        bsz, r = c.shape[0], self.r
        p, q = self.shape
        top = c[:, : r * q].reshape(bsz, r, q)
        cc = c[:, r * q :].reshape(bsz, p - r, r)
        return top[:, :, :r], top[:, :, r:], cc

    def to_matrix(self, c: Array) -> Array:
        if self.size == 0:
            return np.zeros(self.shape)
        a, b, cc = self._split(c[None, :])
        top = np.concatenate([a[0], b[0]], axis=1)
        return self.u @ top @ self.wv.T + self.uperp @ cc[0] @ self.v.T

    def from_matrix(self, m: Array) -> Array:
        if self.size == 0:
            return np.zeros(0)
        m = np.asarray(m)
        top = self.u.T @ m @ self.wv
        cc = self.uperp.T @ m @ self.v
        return np.concatenate([top.ravel(), cc.ravel()])

    def norms(self, c: Array) -> tuple[Array, Array]:
        bsz, r = c.shape[0], self.r
        if self.size == 0:
            return np.zeros(bsz), np.zeros_like(c)
        a, b, cc = self._split(c)
        if b.shape[2]:
            qb, rb = np.linalg.qr(b.transpose(0, 2, 1))  # B' = Qb Rb
        else:
            qb, rb = np.zeros((bsz, 0, 0)), np.zeros((bsz, 0, r))
        if cc.shape[1]:
            qc, rc = np.linalg.qr(cc)
        else:
            qc, rc = np.zeros((bsz, 0, 0)), np.zeros((bsz, 0, r))
        k1, k2 = rb.shape[1], rc.shape[1]
        small = np.zeros((bsz, r + k2, r + k1))
        small[:, :r, :r] = a
        small[:, :r, r:] = rb.transpose(0, 2, 1)
        small[:, r:, :r] = rc
        val, x, y = _rect_top(small)
        alpha = x[:, :r]
        beta = np.einsum("bik,bk->bi", qc, x[:, r:]) if k2 else np.zeros((bsz, self.uperp.shape[1]))
        a_vec = y[:, :r]
        b_vec = np.einsum("bik,bk->bi", qb, y[:, r:]) if k1 else np.zeros((bsz, self.vperp.shape[1]))
        right = np.concatenate([a_vec, b_vec], axis=1)
        g_top = (alpha[:, :, None] * right[:, None, :]).reshape(bsz, -1)
        g_c = (beta[:, :, None] * a_vec[:, None, :]).reshape(bsz, -1)
        return self.weight * val, self.weight * np.concatenate([g_top, g_c], axis=1)


class _AmbientSlot(_Slot):
    """A whole matrix space, coordinates are the raw entries (no structure)."""

    def __init__(self, shape: tuple[int, int], symmetric: bool, weight: float = 1.0) -> None:
        self.shape, self.weight, self.symmetric = shape, weight, symmetric
        self.size = shape[0] * shape[1]

    def to_matrix(self, c: Array) -> Array:
        return np.asarray(c).reshape(self.shape)

    def from_matrix(self, m: Array) -> Array:
        return np.asarray(m, dtype=float).ravel().copy()

    def norms(self, c: Array) -> tuple[Array, Array]:
        bsz = c.shape[0]
        mats = c.reshape(bsz, *self.shape)
        if self.symmetric:
            val, sgn, vec = _sym_top(0.5 * (mats + mats.transpose(0, 2, 1)))
            outer = sgn[:, None, None] * vec[:, :, None] * vec[:, None, :]
        else:
            val, x, y = _rect_top(mats)
            outer = x[:, :, None] * y[:, None, :]
        return self.weight * val, self.weight * outer.reshape(bsz, -1)


class _Product:
    """Product of slots with the max-of-weighted-spectral-norms block norm."""

    def __init__(self, slots: Sequence[_Slot]) -> None:
        self.slots = [s for s in slots]
        offsets = np.cumsum([0] + [s.size for s in self.slots])
        self.slices = [slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])]
        self.size = int(offsets[-1])

    def norm(self, c: Array) -> tuple[Array, Array]:
        bsz = c.shape[0]
        vals = np.full(bsz, -np.inf)
        grads = np.zeros_like(c)
        for slot, sl in zip(self.slots, self.slices):
            if slot.size == 0:
                continue
            v, g = slot.norms(c[:, sl])
            better = v > vals
            vals = np.where(better, v, vals)
            grads[better] = 0.0
            grads[np.ix_(better, np.arange(sl.start, sl.stop))] = g[better]
        return np.maximum(vals, 0.0), grads

    def to_matrices(self, c: Array) -> list[Array]:
        return [s.to_matrix(c[sl]) for s, sl in zip(self.slots, self.slices)]

    def from_matrices(self, mats: Sequence[Array]) -> Array:
        return np.concatenate([s.from_matrix(m) for s, m in zip(self.slots, mats)])


def _h_space(fam: SubspaceFamily, gamma: float) -> _Product:
    return _Product(
        [
            _DiagSlot(fam.p),
            _SymTangentSlot(fam.t_y),
            _RectTangentSlot(fam.t_yx, 1.0 / gamma),
            _FullSymSlot(fam.q),
        ]
    )


def _h23_space(fam: SubspaceFamily, gamma: float) -> _Product:
    return _Product([_SymTangentSlot(fam.t_y), _RectTangentSlot(fam.t_yx, 1.0 / gamma)])


def restricted_operator_h(op: FisherOperator, fam: SubspaceFamily, gamma: float) -> tuple[Array, _Product]:
    """Coordinate matrix of P_H F^+ I F P_H (column j is the image of basis element j)."""
    space = _h_space(fam, gamma)
    p, q = fam.p, fam.q
    cols = np.empty((space.size, space.size))
    eye = np.eye(space.size)
    for j in range(space.size):
        d, l, k, o = space.to_matrices(eye[j])
        big = block_assemble(BlockTuple(d, l, k, o), "F")
        img = block_adjoint(fisher_apply(op, big), (p, q), "F")
        cols[:, j] = space.from_matrices([img.d, img.l, img.k, img.o])
    return cols, space


def _g_images(op: FisherOperator, fam: SubspaceFamily, space: _Product) -> tuple[Array, Array]:
    """Ambient images G^+ I G of each H23 basis element: (n, p, p) and (n, p, q)."""
    p, q = fam.p, fam.q
    eye = np.eye(space.size)
    imgs_l = np.empty((space.size, p, p))
    imgs_k = np.empty((space.size, p, q))
    for j in range(space.size):
        l, k = space.to_matrices(eye[j])
        big = block_assemble(BlockTuple(np.zeros(p), l, k, np.zeros((q, q))), "G")
        img = block_adjoint(fisher_apply(op, big), (p, q), "G")
        imgs_l[j], imgs_k[j] = img.l, img.k
    return imgs_l, imgs_k


def restricted_operator_h23(
    op: FisherOperator, fam: SubspaceFamily, gamma: float
) -> tuple[Array, _Product, Array, Array]:
    """Coordinate matrix of P_H23 G^+ I G P_H23, plus the ambient images."""
    space = _h23_space(fam, gamma)
    imgs_l, imgs_k = _g_images(op, fam, space)
    mat = np.array([space.from_matrices([imgs_l[j], imgs_k[j]]) for j in range(space.size)]).T
    return mat.reshape(space.size, space.size), space, imgs_l, imgs_k


# ---------------------------------------------------------------------------
# Ratio optimization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorSettings:
    restarts: int = 20
    iters: int = 300
    step: float = 0.2
    patience: int = 60
    seed: int = 0

    def __post_init__(self) -> None:
        if self.restarts < 1 or self.iters < 1 or not self.step > 0:
            raise ValidationError("restarts and iters must be >= 1 and step positive")


NormFn = Callable[[Array], tuple[Array, Array]]


def _optimize_ratio(num: NormFn, den: NormFn, starts: Array, sense: str, settings: EstimatorSettings) -> float:
    """Batched subgradient search on num(c)/den(c) from every starting row.

    Every iterate is a feasible point, so the running best is a valid bound in
    the direction of the search (an upper bound for 'min', lower for 'max').
    Both functions are positively homogeneous of degree one, so iterates are
    rescaled to den = 1 without recomputation.
    """
    sign = 1.0 if sense == "min" else -1.0
    better = (lambda a, b: a < b) if sense == "min" else (lambda a, b: a > b)
    c = starts.copy()
    best = math.inf if sense == "min" else -math.inf
    stale = 0
    for it in range(settings.iters + 1):
        dv, dg = den(c)
        dv = np.maximum(dv, 1e-300)
        c = c / dv[:, None]
        nv, ng = num(c)
        cur = float(nv.min() if sense == "min" else nv.max())
        if better(cur, best - sign * 1e-9 * abs(best) if math.isfinite(best) else best):
            stale = 0
        else:
            stale += 1
        best = min(best, cur) if sense == "min" else max(best, cur)
        if it == settings.iters or stale >= settings.patience:
            break
        # gradient of num/den at den = 1 (the subgradient dg is scale-free)
        grad = ng - nv[:, None] * dg
        gn = np.linalg.norm(grad, axis=1, keepdims=True)
        cn = np.linalg.norm(c, axis=1, keepdims=True)
        eta = settings.step / math.sqrt(1.0 + it)
        c = c - sign * eta * cn * grad / np.maximum(gn, 1e-300)
    return best


def _starting_points(lin: Array, n_in: int, sense: str, settings: EstimatorSettings, extra: int = 4) -> Array:
    """Extreme right singular vectors of ``lin`` plus Gaussian directions."""
    rng = make_rng(settings.seed)
    starts: list[Array] = []
    if lin.size:
        _, _, vt = np.linalg.svd(lin, full_matrices=False)
        pick = vt[-extra:] if sense == "min" else vt[:extra]
        starts.extend(list(pick))
    while len(starts) < settings.restarts:
        starts.append(rng.standard_normal(n_in))
    return np.array(starts)


def _gain(mat: Array, space: _Product, sense: str, settings: EstimatorSettings) -> float:
    def num(c: Array) -> tuple[Array, Array]:
        v, g = space.norm(c @ mat.T)
        return v, g @ mat

    starts = _starting_points(mat, mat.shape[1], sense, settings)
    return _optimize_ratio(num, space.norm, starts, sense, settings)


# ---------------------------------------------------------------------------
# The three quantities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FisherQuantities:
    chi: float
    xi: float
    varphi: float
    dim_h: int
    dim_h23: int


def _check_capacity(op: FisherOperator) -> None:
    if op.dim > MAX_AMBIENT_DIM:
        raise CapacityError(f"p+q = {op.dim} exceeds the dense-coordinate limit of {MAX_AMBIENT_DIM}")


def _check_shapes(op: FisherOperator, fam: SubspaceFamily) -> None:
    if fam.t_yx.shape != (fam.p, fam.q) or fam.t_y.shape != (fam.p, fam.p) or fam.p + fam.q != op.dim:
        raise DimensionError("family and operator dimensions disagree")


def estimate_chi(
    op: FisherOperator, fam: SubspaceFamily, gamma: float, settings: EstimatorSettings | None = None
) -> float:
    """Smallest Phi_gamma gain of P_H F^+ I F P_H (upper estimate)."""
    _check_capacity(op)
    _check_shapes(op, fam)
    mat, space = restricted_operator_h(op, fam, gamma)
    return _gain(mat, space, "min", settings or EstimatorSettings())


def estimate_xi(
    op: FisherOperator, fam: SubspaceFamily, gamma: float, settings: EstimatorSettings | None = None
) -> float:
    """Smallest Gamma_gamma gain of P_H23 G^+ I G P_H23 (upper estimate).

    An empty H23 (no low-rank components) gives 1 by convention.
    """
    _check_capacity(op)
    _check_shapes(op, fam)
    mat, space, _, _ = restricted_operator_h23(op, fam, gamma)
    if space.size == 0:
        return 1.0
    return _gain(mat, space, "min", settings or EstimatorSettings())


def leak_operator(mat: Array, space: _Product, imgs_l: Array, imgs_k: Array) -> Array:
    """Ambient matrix of P_perp G^+ I G (P_H23 G^+ I G P_H23)^-1 on H23 coordinates.

    Rows index the entries of (l, k) stacked; the inverse is a ridge-regularized
    least-squares solve.
    """
    n = space.size
    ridge = 1e-12 * max(1.0, float(np.abs(mat).max()))
    inv = np.linalg.solve(mat.T @ mat + ridge * np.eye(n), mat.T)
    back = np.array([np.concatenate([m.ravel() for m in space.to_matrices(mat[:, j])]) for j in range(n)])
    amb = np.concatenate([imgs_l.reshape(n, -1), imgs_k.reshape(n, -1)], axis=1)
    return (amb - back).T @ inv


def _varphi_from(
    fam: SubspaceFamily, gamma: float, space: _Product, mat: Array, imgs_l: Array, imgs_k: Array,
    settings: EstimatorSettings,
) -> float:
    p, q = fam.p, fam.q
    lin = leak_operator(mat, space, imgs_l, imgs_k)
    if not np.any(np.abs(lin) > 1e-14):
        return 0.0
    out = _Product([_AmbientSlot((p, p), True), _AmbientSlot((p, q), False, 1.0 / gamma)])

    def num(c: Array) -> tuple[Array, Array]:
        v, g = out.norm(c @ lin.T)
        return v, g @ lin

    starts = _starting_points(lin, space.size, "max", settings)
    return _optimize_ratio(num, space.norm, starts, "max", settings)


def estimate_quantities(
    op: FisherOperator,
    fam: SubspaceFamily,
    gamma: float,
    settings: EstimatorSettings | None = None,
) -> FisherQuantities:
    """(chi, xi, varphi) for one subspace family.

    varphi is reported as +inf when the restricted operator on H23 is
    numerically singular; an empty H23 gives xi = 1 and varphi = 0.
    """
    settings = settings or EstimatorSettings()
    NormParams(gamma)
    chi = estimate_chi(op, fam, gamma, settings)
    mat, space, imgs_l, imgs_k = restricted_operator_h23(op, fam, gamma)
    dim_h = fam.p + fam.t_y.dim + fam.t_yx.dim + fam.q * (fam.q + 1) // 2
    if space.size == 0:
        return FisherQuantities(chi, 1.0, 0.0, dim_h, 0)
    xi = _gain(mat, space, "min", settings)
    smin = np.linalg.svd(mat, compute_uv=False)[-1]
    if xi <= SINGULAR_TOL or smin <= SINGULAR_TOL * max(1.0, float(np.abs(mat).max())):
        logger.warning("restricted operator is singular (xi=%.3g); varphi set to inf", xi)
        return FisherQuantities(chi, xi, math.inf, dim_h, space.size)
    varphi = _varphi_from(fam, gamma, space, mat, imgs_l, imgs_k, settings)
    return FisherQuantities(chi, xi, varphi, dim_h, space.size)


# ---------------------------------------------------------------------------
# Assumption report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionReport:
    chi_min: float
    xi_min: float
    varphi_max: float
    alpha: float
    beta: float
    alpha_req: float
    beta_req: float
    chi_pass: bool
    xi_pass: bool
    varphi_pass: bool
    n_families: int
    restarts: int
    iters: int
    max_angle_deg: float
    per_family: tuple[FisherQuantities, ...] = field(default=(), repr=False)

    @property
    def all_pass(self) -> bool:
        return self.chi_pass and self.xi_pass and self.varphi_pass

    def as_dict(self) -> dict[str, object]:
        return {
            "chi_min": self.chi_min,
            "xi_min": self.xi_min,
            "varphi_max": self.varphi_max,
            "alpha": self.alpha,
            "beta": self.beta,
            "alpha_req": self.alpha_req,
            "beta_req": self.beta_req,
            "chi_pass": self.chi_pass,
            "xi_pass": self.xi_pass,
            "varphi_pass": self.varphi_pass,
            "n_families": self.n_families,
            "restarts": self.restarts,
            "iters": self.iters,
            "max_angle_deg": self.max_angle_deg,
        }


def implied_beta(varphi_max: float) -> float:
    """Smallest beta with varphi_max <= 1 - 2/(beta+1)."""
    if varphi_max >= 1.0:
        return math.inf
    return 2.0 / (1.0 - varphi_max) - 1.0


def summarize(
    quantities: Sequence[FisherQuantities],
    alpha_req: float,
    beta_req: float,
    settings: EstimatorSettings,
    max_angle_deg: float = 0.0,
) -> AssumptionReport:
    if not quantities:
        raise ValidationError("no families to summarize")
    chi = min(x.chi for x in quantities)
    xi = min(x.xi for x in quantities)
    vphi = max(x.varphi for x in quantities)
    return AssumptionReport(
        chi_min=chi,
        xi_min=xi,
        varphi_max=vphi,
        alpha=chi,
        beta=max(2.0, implied_beta(vphi)),
        alpha_req=alpha_req,
        beta_req=beta_req,
        chi_pass=chi >= alpha_req,
        xi_pass=xi > 0,
        varphi_pass=vphi <= 1.0 - 2.0 / (beta_req + 1.0),
        n_families=len(quantities),
        restarts=settings.restarts,
        iters=settings.iters,
        max_angle_deg=max_angle_deg,
        per_family=tuple(quantities),
    )


def verify_assumptions(
    pop: PopulationModel,
    gamma: float,
    omega_y: float,
    omega_yx: float,
    alpha_req: float,
    beta_req: float,
    n_samples: int = 50,
    seed: int = 0,
    settings: EstimatorSettings | None = None,
) -> AssumptionReport:
    """Estimate inf chi, inf xi and sup varphi over sampled families."""
    if not alpha_req > 0:
        raise ValidationError("alpha_req must be positive")
    if not beta_req >= 2:
        raise ValidationError("beta_req must be at least 2")
    settings = settings or EstimatorSettings(seed=seed)
    op = FisherOperator.from_population(pop)
    _check_capacity(op)
    fams = sample_family(pop, omega_y, omega_yx, n_samples, seed)
    qs = [estimate_quantities(op, f, gamma, settings) for f in fams]
    angle = max(f.max_angle_deg for f in fams)
    return summarize(qs, alpha_req, beta_req, settings, angle)


# ---------------------------------------------------------------------------
# Explicit constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoremConstants:
    psi: float
    m: float
    m_bar: float
    kappa: float
    c_tilde: float
    c0: float
    c_samp: float
    c1: float
    c_sigma: float
    c_prob: float
    n_min: float
    n: float
    lambda_lo: float
    lambda_hi: float
    lambda_feasible: bool
    lambda_used: float
    sigma_y_min: float
    sigma_yx_min: float
    err_phi_bound: float
    err_yx_bound: float
    prob_lower: float

    def as_dict(self) -> dict[str, float | bool]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def theorem_bounds(
    psi: float | PopulationModel,
    alpha: float,
    beta: float,
    gamma: float,
    omega_y: float,
    omega_yx: float,
    p: int,
    q: int,
    n: float | None = None,
) -> TheoremConstants:
    """Explicit constants, sample size and regularization range.

    ``psi`` is the spectral norm of the true covariance (or a population from
    which it is read). At ``n`` (default ``n_min``) the recommended lambda is
    the lower end of the admissible interval; the sigma thresholds and error
    bounds are evaluated there.
    """
    if isinstance(psi, PopulationModel):
        psi = psi.psi
    psi = float(psi)
    for name, v in (("psi", psi), ("alpha", alpha), ("gamma", gamma), ("omega_y", omega_y), ("omega_yx", omega_yx)):
        if not v > 0:
            raise ValidationError(f"{name} must be positive")
    if beta < 2:
        raise ValidationError("beta must be at least 2")
    if p < 1 or q < 0:
        raise ValidationError("invalid dimensions")
    params = NormParams(gamma)
    m, m_bar = params.m, params.m_bar
    kappa = beta * (3.0 + 16.0 * psi**2 * m / alpha)
    c_tilde = 352.0 * psi**3
    c0 = max(
        1.0 / (192.0 * psi),
        2.0 * psi,
        1.0 / (24.0 * psi**2 * max(2.0 / psi**2 + 8.0, 1.0 / psi)),
        psi / 8.0,
    )
    c_samp = c_tilde * c0
    c1 = (186.0 * psi**2 + 56.0 * psi**4) / 6.0
    c_sigma = 6.0 * psi**4 * (56.0 * psi**4 + 186.0 * psi**2) ** 2
    c_prob = 1.0 / (247808.0 * psi**6)
    dim = p + q
    n_min = c_samp**2 * beta**4 / alpha**2 * m**6 * dim
    n_eval = float(n_min if n is None else n)
    lam_lo = c_tilde * (beta / alpha) * m**2 * math.sqrt(dim / n_eval)
    lam_hi = 1.0 / (beta * m * c0)
    feasible = lam_lo <= lam_hi * (1.0 + 1e-12)
    lam = lam_lo
    sigma_y = c_sigma * beta / (alpha**5 * omega_y) * m**4 * lam
    sigma_yx = c_sigma * beta / (alpha**5 * omega_yx) * m**5 * m_bar**2 * lam
    err = c1 * m / alpha**2 * lam
    prob = 1.0 - 2.0 * math.exp(-c_prob * alpha**2 / (m**4 * beta**2) * n_eval * lam**2)
    return TheoremConstants(
        psi=psi,
        m=m,
        m_bar=m_bar,
        kappa=kappa,
        c_tilde=c_tilde,
        c0=c0,
        c_samp=c_samp,
        c1=c1,
        c_sigma=c_sigma,
        c_prob=c_prob,
        n_min=n_min,
        n=n_eval,
        lambda_lo=lam_lo,
        lambda_hi=lam_hi,
        lambda_feasible=feasible,
        lambda_used=lam,
        sigma_y_min=sigma_y,
        sigma_yx_min=sigma_yx,
        err_phi_bound=err,
        err_yx_bound=err * m_bar,
        prob_lower=prob,
    )


# ---------------------------------------------------------------------------
# Quadratic remainder of the inverse map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RemainderCheck:
    lhs: float
    rhs: float
    ok: bool
    phi_delta: float


def remainder_radius(pop: PopulationModel, gamma: float) -> float:
    """Largest Phi_gamma size of a perturbation for which the bound applies."""
    return 1.0 / (2.0 * (3.0 + gamma) * pop.psi)


def inverse_remainder(pop: PopulationModel, e: Array) -> Array:
    """(Theta* + E)^-1 - Sigma* + Sigma* E Sigma*."""
    s = pop.sigma_star
    return sym(np.linalg.inv(pop.theta_star + e) - s + s @ e @ s)


def remainder_check(pop: PopulationModel, delta: BlockTuple, gamma: float) -> RemainderCheck:
    """Compare Phi_gamma[F^+ R(F(delta))] with 2 m psi C'^2 Phi_gamma[delta]^2."""
    params = NormParams(gamma)
    if (delta.p, delta.q) != (pop.p, pop.q):
        raise DimensionError("perturbation does not match the model dimensions")
    if np.any(np.abs(delta.d - np.diag(np.diag(delta.d))) > 0):
        raise ValidationError("the d component of the perturbation must be diagonal")
    psi = pop.psi
    c_prime = (3.0 + gamma) * psi
    size = norm_phi(delta, params)
    if size > 1.0 / (2.0 * c_prime) * (1.0 + 1e-12):
        raise ValidationError(
            f"perturbation too large: Phi = {size:.4g} > {1.0 / (2.0 * c_prime):.4g}"
        )
    e = block_assemble(delta, "F")
    rem = inverse_remainder(pop, e)
    lhs = norm_phi(block_adjoint(rem, (pop.p, pop.q), "F"), params)
    rhs = 2.0 * params.m * psi * c_prime**2 * size**2
    return RemainderCheck(lhs, rhs, lhs <= rhs, size)


def random_admissible_delta(
    pop: PopulationModel, gamma: float, rng: np.random.Generator, fraction: float | None = None
) -> BlockTuple:
    """Random perturbation scaled to ``fraction`` (default uniform in (0,1]) of the radius."""
    p, q = pop.p, pop.q
    raw = BlockTuple(
        np.diag(rng.standard_normal(p)),
        sym(rng.standard_normal((p, p))),
        rng.standard_normal((p, q)),
        sym(rng.standard_normal((q, q))),
    )
    frac = rng.uniform(0.05, 1.0) if fraction is None else fraction
    return raw.scale(frac * remainder_radius(pop, gamma) / norm_phi(raw, gamma))
