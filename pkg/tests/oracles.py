"""Reference computations that share no code with the package.

Each one solves its problem by a different route than the library: scalar
golden-section search, a closed-form 2 x 2 reduction, accelerated proximal
gradient, or dense Kronecker products.
"""
from __future__ import annotations

import math

import numpy as np

GOLDEN = (math.sqrt(5) - 1) / 2


def golden_section(f, lo: float, hi: float, tol: float = 1e-12, max_iter: int = 500) -> float:
    """Minimizer of a unimodal scalar function on [lo, hi]."""
    a, b = lo, hi
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def nuclear_norm_2x2(x: np.ndarray) -> float:
    """Closed form: with u = (x11 + x22, x21 - x12) / 2 and v = (x11 - x22, x12 + x21) / 2
    the singular values are |u| + |v| and ||u| - |v||, so the sum is 2 max(|u|, |v|)."""
    u = np.hypot((x[0, 0] + x[1, 1]) / 2, (x[1, 0] - x[0, 1]) / 2)
    v = np.hypot((x[0, 0] - x[1, 1]) / 2, (x[0, 1] + x[1, 0]) / 2)
    return 2 * max(u, v)


def nuclear_prox_2x2(k: np.ndarray, t: float) -> np.ndarray:
    """argmin_X t ||X||_* + 0.5 ||X - K||_F^2 for 2 x 2 K without an SVD.

    In the (u, v) coordinates above ||X||_F^2 = 2(|u|^2 + |v|^2), so the
    problem splits into radial parts a = |u|, b = |v| that only see the level
    m = max(a, b); for a fixed level a = min(a0, m), b = min(b0, m), leaving
    a convex scalar problem in m solved by golden section.
    """
    u0 = np.array([(k[0, 0] + k[1, 1]) / 2, (k[1, 0] - k[0, 1]) / 2])
    v0 = np.array([(k[0, 0] - k[1, 1]) / 2, (k[0, 1] + k[1, 0]) / 2])
    a0, b0 = np.linalg.norm(u0), np.linalg.norm(v0)

    def level_cost(m):
        return 2 * t * m + (min(a0, m) - a0) ** 2 + (min(b0, m) - b0) ** 2

    m = golden_section(level_cost, 0.0, max(a0, b0), tol=1e-15)
    u = u0 * (min(a0, m) / a0) if a0 > 0 else u0
    v = v0 * (min(b0, m) / b0) if b0 > 0 else v0
    return np.array([[u[0] + v[0], v[1] - u[1]], [v[1] + u[1], u[0] - v[0]]])


def composite_fista(
    sample_cov: np.ndarray, p: int, lam: float, gamma: float, iters: int = 50_000, tol: float = 1e-13
) -> tuple[float, tuple[np.ndarray, ...]]:
    """Accelerated proximal gradient with backtracking and adaptive restart.

    Variables (d, L, K, O) with Theta = [[diag(d) - L, K], [K^T, O]]. The
    smooth part is -logdet Theta + tr(Theta S); K appears twice in Theta,
    so its gradient is twice the off-diagonal block of S - Theta^{-1}.
    """
    s = np.asarray(sample_cov, dtype=float)
    dim = s.shape[0]
    th = np.linalg.inv(s + 1e-3 * np.eye(dim))
    x = (np.diag(th)[:p].copy(), np.zeros((p, p)), th[:p, p:].copy(), th[p:, p:].copy())

    def assemble(d, l, k, o):
        return np.block([[np.diag(d) - l, k], [k.T, o]])

    def smooth(v):
        theta = assemble(*v)
        try:
            c = np.linalg.cholesky(theta)
        except np.linalg.LinAlgError:
            return math.inf
        return -2 * np.sum(np.log(np.diag(c))) + np.sum(theta * s)

    def penalty(v):
        return lam * (gamma * np.linalg.svd(v[2], compute_uv=False).sum() + np.trace(v[1]))

    def prox(v, t):
        d, l, k, o = v
        w, e = np.linalg.eigh((l + l.T) / 2)
        l = (e * np.maximum(w - t * lam, 0)) @ e.T
        u, sv, vt = np.linalg.svd(k, full_matrices=False)
        k = (u * np.maximum(sv - t * lam * gamma, 0)) @ vt
        return d, l, k, (o + o.T) / 2

    y, tk, step = x, 1.0, 1.0
    fx = smooth(x) + penalty(x)
    for it in range(iters):
        g = s - np.linalg.inv(assemble(*y))
        grad = (np.diag(g[:p, :p]), -g[:p, :p], 2 * g[:p, p:], g[p:, p:])
        fy = smooth(y)
        while True:
            cand = prox(tuple(a - step * b for a, b in zip(y, grad)), step)
            diff = [c - a for c, a in zip(cand, y)]
            model = fy + sum(np.sum(gr * df) for gr, df in zip(grad, diff)) + sum(np.sum(df * df) for df in diff) / (2 * step)
            if smooth(cand) <= model + 1e-14:
                break
            step /= 2
        fnew = smooth(cand) + penalty(cand)
        if fnew > fx:
            y, tk = x, 1.0
            continue
        tn = (1 + math.sqrt(1 + 4 * tk * tk)) / 2
        y = tuple(c + (tk - 1) / tn * (c - a) for c, a in zip(cand, x))
        done = it > 50 and abs(fx - fnew) < tol * max(1.0, abs(fnew))
        x, fx, tk = cand, fnew, tn
        step *= 1.2
        if done:
            break
    return fx, x


def kron_fisher_apply(sigma: np.ndarray, m: np.ndarray) -> np.ndarray:
    """(Sigma kron Sigma) vec(M), reshaped; row-major vec."""
    n = sigma.shape[0]
    return (np.kron(sigma, sigma) @ m.reshape(-1)).reshape(n, n)


def _sym_unit_basis(n: int) -> list[np.ndarray]:
    out = []
    for i in range(n):
        for j in range(i, n):
            e = np.zeros((n, n))
            e[i, j] = e[j, i] = 1.0
            out.append(e)
    return out


def dense_chi(sigma: np.ndarray, p: int, proj_l, proj_k, gamma: float, samples: int = 20000, seed: int = 0) -> float:
    """min over H of Phi(P_H F^+ I F c) / Phi(c), by random search plus Nelder-Mead.

    H is spanned by projecting unit tuples and orthonormalizing the flattened
    (diag d, l, k, o) vectors; no coordinate system of the library is used.
    """
    from scipy.optimize import minimize

    q = sigma.shape[0] - p

    def flatten(d, l, k, o):
        return np.concatenate([np.diag(np.diag(d)).ravel(), l.ravel(), k.ravel(), o.ravel()])

    def unflatten(v):
        a, b, c = p * p, 2 * p * p, 2 * p * p + p * q
        return v[:a].reshape(p, p), v[a:b].reshape(p, p), v[b:c].reshape(p, q), v[c:].reshape(q, q)

    def project(d, l, k, o):
        return np.diag(np.diag(d)), proj_l(l), proj_k(k), o

    zp, zk, zq = np.zeros((p, p)), np.zeros((p, q)), np.zeros((q, q))
    spanning = [flatten(*project(np.diag(e), zp, zk, zq)) for e in np.eye(p)]
    spanning += [flatten(*project(zp, e, zk, zq)) for e in _sym_unit_basis(p)]
    for i in range(p):
        for j in range(q):
            e = np.zeros((p, q))
            e[i, j] = 1.0
            spanning.append(flatten(*project(zp, zp, e, zq)))
    spanning += [flatten(*project(zp, zp, zk, e)) for e in _sym_unit_basis(q)]
    u, s, _ = np.linalg.svd(np.array(spanning).T, full_matrices=False)
    basis = u[:, s > 1e-9 * s[0]]

    def image(v):
        d, l, k, o = unflatten(v)
        big = np.block([[d - l, k], [k.T, o]])
        m = sigma @ big @ sigma
        return flatten(*project(m[:p, :p], m[:p, :p], m[:p, p:], m[p:, p:]))

    op = np.array([basis.T @ image(basis[:, j]) for j in range(basis.shape[1])]).T

    def phi(v):
        d, l, k, o = unflatten(v)
        return max(np.linalg.norm(d, 2), np.linalg.norm(l, 2), np.linalg.norm(k, 2) / gamma, np.linalg.norm(o, 2))

    def ratio(c):
        den = phi(basis @ c)
        return phi(basis @ (op @ c)) / den if den > 0 else np.inf

    rng = np.random.default_rng(seed)
    cands = rng.standard_normal((samples, basis.shape[1]))
    vals = np.array([ratio(c) for c in cands])
    # refine the best mesh points and the weakest right singular vectors of the operator
    starts = list(cands[np.argsort(vals)[:6]]) + list(np.linalg.svd(op)[2][-4:])
    best = np.inf
    for c0 in starts:
        x = c0
        for _ in range(3):
            res = minimize(ratio, x, method="Nelder-Mead", options={"maxiter": 4000, "xatol": 1e-9, "fatol": 1e-12})
            x = res.x
        best = min(best, res.fun)
    return float(best)
