"""Slow, dense reference implementations used to cross-check the main paths.

Nothing here reuses the recursions, caches or splitting code of the
library: cocycles are multiplied out from scratch, ``T_Z`` is a dense
matrix with explicit side conditions, the Green operator is the literal
double sum, and the stable subspaces come straight from a null space.
Sizes are capped (small d, short horizons).
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from polydich.errors import ConfigurationError

__all__ = [
    "OracleConfig",
    "dense_cocycle",
    "dense_splitting",
    "dense_tz_matrix",
    "dense_tz_solve",
    "dense_green_sum",
    "dense_adapted_norm",
    "exhaustive_gamma",
]


@dataclass(frozen=True)
class OracleConfig:
    max_dim: int = 3
    max_horizon: int = 64


DEFAULT = OracleConfig()


def _check(mats, cfg):
    mats = np.asarray(mats, dtype=float)
    N, d = mats.shape[0] + 1, mats.shape[1]
    if d > cfg.max_dim or N > cfg.max_horizon:
        raise ConfigurationError(
            f"oracle limited to d <= {cfg.max_dim}, N <= {cfg.max_horizon} (got d={d}, N={N})"
        )
    return mats, N, d


def dense_cocycle(mats, m, n, cfg=DEFAULT):
    """``A_{m-1} ... A_n`` by a plain loop (1-based, m >= n)."""
    mats, N, d = _check(mats, cfg)
    if not 1 <= n <= m <= N:
        raise ConfigurationError("need 1 <= n <= m <= N")
    out = np.eye(d)
    for k in range(n, m):
        out = mats[k - 1].dot(out)
    return out


def _basis(M, tol=1e-12):
    if M.shape[1] == 0:
        return M
    Q, R, _ = linalg.qr(M, pivoting=True, mode="economic")
    r = int(np.sum(np.abs(np.diag(R)) > tol * max(1.0, abs(R[0, 0]))))
    return Q[:, :r]


def dense_splitting(mats, Z, cfg=DEFAULT):
    """Projections ``P_n`` onto ``X(n) = {x : A(N,n)x in Z(N)^perp}`` along
    ``Z(n) = A(n,1)Z`` for n = 1..N, straight from null spaces."""
    mats, N, d = _check(mats, cfg)
    Z = np.asarray(Z, dtype=float).reshape(d, -1)
    ZN = _basis(dense_cocycle(mats, N, 1, cfg) @ Z)
    out = []
    for n in range(1, N + 1):
        Zn = _basis(dense_cocycle(mats, n, 1, cfg) @ Z)
        if ZN.shape[1]:
            Xn = linalg.null_space(ZN.T @ dense_cocycle(mats, N, n, cfg))
        else:
            Xn = np.eye(d)
        if Xn.shape[1] == 0:
            out.append(np.zeros((d, d)))
            continue
        B = np.hstack([Xn, Zn])
        coeff = np.linalg.solve(B, np.eye(d))
        out.append(Xn @ coeff[: Xn.shape[1]])
    return np.array(out)


def dense_tz_matrix(mats, Z, cfg=DEFAULT):
    """Square dense system for ``T_Z`` on the horizon.

    Unknowns ``x_1, ..., x_N``.  Rows: ``(m+1)(x_{m+1} - A_m x_m)``,
    ``W^T x_1 = 0`` with W spanning ``Z^perp``, and ``Z(N)^T x_N = 0``.
    """
    mats, N, d = _check(mats, cfg)
    Z = np.asarray(Z, dtype=float).reshape(d, -1)
    rows = []
    for m in range(1, N):
        r = np.zeros((d, N * d))
        r[:, m * d : (m + 1) * d] = (m + 1) * np.eye(d)
        r[:, (m - 1) * d : m * d] = -(m + 1) * mats[m - 1]
        rows.append(r)
    Zb = _basis(Z) if Z.shape[1] else Z
    W = linalg.null_space(Zb.T) if Zb.shape[1] else np.eye(d)
    r = np.zeros((W.shape[1], N * d))
    r[:, :d] = W.T
    rows.append(r)
    ZN = _basis(dense_cocycle(mats, N, 1, cfg) @ Zb) if Zb.shape[1] else Zb
    r = np.zeros((ZN.shape[1], N * d))
    r[:, (N - 1) * d :] = ZN.T
    rows.append(r)
    return np.vstack(rows)


def dense_tz_solve(mats, Z, y, cfg=DEFAULT):
    """Solve ``T_Z x = y`` with the dense square system."""
    mats, N, d = _check(mats, cfg)
    y = np.asarray(y, dtype=float).reshape(N, d)
    M = dense_tz_matrix(mats, Z, cfg)
    rhs = np.concatenate([y[1:].ravel(), np.zeros(M.shape[0] - (N - 1) * d)])
    return np.linalg.solve(M, rhs).reshape(N, d)


def dense_green_sum(mats, P, y, cfg=DEFAULT):
    """``x_n = sum_{k<=n} A(n,k)P_k y_k / k - sum_{k>n} A(n,k)Q_k y_k / k``.

    ``A(n,k)Q_k`` for k > n inverts ``A(k,n)`` on ``Im Q_n`` via least squares.
    """
    mats, N, d = _check(mats, cfg)
    y = np.asarray(y, dtype=float).reshape(N, d)
    P = np.asarray(P, dtype=float)
    x = np.zeros((N, d))
    for n in range(1, N + 1):
        acc = np.zeros(d)
        for k in range(1, N + 1):
            if k <= n:
                acc += dense_cocycle(mats, n, k, cfg) @ P[k - 1] @ y[k - 1] / k
            else:
                Qn = np.eye(d) - P[n - 1]
                Qk = np.eye(d) - P[k - 1]
                Un = _basis(Qn)
                if Un.shape[1] == 0:
                    continue
                img = dense_cocycle(mats, k, n, cfg) @ Un
                coef, *_ = np.linalg.lstsq(img, Qk @ y[k - 1], rcond=None)
                acc -= Un @ coef / k
        x[n - 1] = acc
    return x


def dense_adapted_norm(mats, P, n, x, lam, b=None, H=None, cfg=DEFAULT):
    """Adapted norm at n by explicit loops.

    ``sup_{m>=n} |A(m,n)P_n x| (m/n)^lam + sup_{m<=n} |A(m,n)Q_n x| (n/m)^lam``
    plus, when ``b`` is given, ``sup_{m>n} |A(m,n)Q_n x| (m/n)^-b``; indices
    run up to ``H``.
    """
    mats, N, d = _check(mats, cfg)
    H = N if H is None else H
    P = np.asarray(P, dtype=float)
    x = np.asarray(x, dtype=float)
    Pn = P[n - 1]
    Qx = (np.eye(d) - Pn) @ x
    stable = max(
        np.linalg.norm(dense_cocycle(mats, m, n, cfg) @ Pn @ x) * (m / n) ** lam
        for m in range(n, H + 1)
    )
    back = 0.0
    if np.any(Qx):
        for m in range(1, n + 1):
            Um = _basis(np.eye(d) - P[m - 1])
            img = dense_cocycle(mats, n, m, cfg) @ Um
            coef, *_ = np.linalg.lstsq(img, Qx, rcond=None)
            back = max(back, np.linalg.norm(Um @ coef) * (n / m) ** lam)
    total = stable + back
    if b is not None:
        up = 0.0
        for m in range(n + 1, H + 1):
            up = max(up, np.linalg.norm(dense_cocycle(mats, m, n, cfg) @ Qx) * (m / n) ** -b)
        total += up
    return float(total)


def exhaustive_gamma(S, U, norm=np.linalg.norm, grid=181):
    """``min ||s/||s|| + u/||u|| ||`` over s in span(S), u in span(U) by a
    product grid on the two spheres followed by local polishing."""
    S = np.asarray(S, dtype=float)
    U = np.asarray(U, dtype=float)
    if S.shape[1] == 0 or U.shape[1] == 0:
        return 2.0

    def sphere(k):
        if k == 1:
            return [np.array([1.0]), np.array([-1.0])]
        if k == 2:
            return [np.array([math.cos(t), math.sin(t)])
                    for t in np.linspace(0, 2 * math.pi, grid, endpoint=False)]
        rng = np.random.default_rng(7)
        V = rng.standard_normal((grid * 4, k))
        return list(V / np.linalg.norm(V, axis=1, keepdims=True))

    def f(a, c):
        s, u = S @ a, U @ c
        ns, nu = norm(s), norm(u)
        if ns == 0 or nu == 0:
            return 4.0
        return float(norm(s / ns + u / nu))

    best, arg = math.inf, None
    for a, c in itertools.product(sphere(S.shape[1]), sphere(U.shape[1])):
        v = f(a, c)
        if v < best:
            best, arg = v, (a, c)
    ks = S.shape[1]
    res = optimize.minimize(lambda z: f(z[:ks], z[ks:]), np.concatenate(arg),
                            method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
    return min(best, float(res.fun))
