"""The operator ``T_Z``, its bounded inverse and finite-horizon diagnostics.

``(T_Z x)_1 = 0`` and ``(T_Z x)_{m+1} = (m + 1)(x_{m+1} - A_m x_m)`` on
sequences with ``x_1 in Z``.  The inverse is the Green operator of the
splitting, evaluated by two recursions (forward for the stable part,
backward in unstable coordinates for the rest) instead of the double sum.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from polydich.errors import (
    CertificateError,
    ConfigurationError,
    DomainError,
    PolyDichError,
    SpectralGapError,
    VanishingOrbitError,
)
from polydich.norms import NormSequence, operator_norm
from polydich.system import Cocycle

__all__ = [
    "BoundedSequence",
    "TZOperator",
    "GreenSolution",
    "InvertibilityReport",
    "TestSequence",
    "tz_apply",
    "graph_norm",
    "green_solve",
    "green_solve_contraction",
    "green_solve_contraction_array",
    "assemble_truncation",
    "solve_truncated",
    "green_kernel_norms",
    "invertibility_report",
    "test_sequence_stable",
    "test_sequence_unstable",
    "harmonic_block",
]

TAGS = ("Y", "YZ", "Y0")


@dataclass
class BoundedSequence:
    """Finite section ``(x_1, ..., x_N)`` of a bounded sequence.

    ``tag`` names the space: ``Y`` (all bounded sequences), ``YZ`` (first
    entry in Z) or ``Y0`` (first entry zero).
    """

    entries: np.ndarray
    tag: str = "Y"
    norms: NormSequence = None

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        if self.entries.ndim != 2:
            raise ConfigurationError("sequence entries must have shape (N, d)")
        if not np.all(np.isfinite(self.entries)):
            raise ConfigurationError("sequence entries must be finite")
        if self.tag not in TAGS:
            raise ConfigurationError(f"unknown tag {self.tag!r}")
        if self.tag == "Y0" and np.any(self.entries[0] != 0):
            raise DomainError("not in Y_0: first entry must vanish")

    def sup_norm(self):
        ns = self.norms or NormSequence.base_norm()
        return float(ns.sequence_sup(self.entries))


class TZOperator:
    """``T_Z`` for a system, a subspace ``Z`` (columns of a basis) and norms."""

    def __init__(self, system, Z_basis, norms=None):
        d = system.dimension
        Z = np.asarray(Z_basis, dtype=float).reshape(d, -1)
        if Z.shape[1]:
            U, s, _ = np.linalg.svd(Z, full_matrices=False)
            if s[-1] <= 1e-12 * s[0]:
                raise ConfigurationError("Z basis is rank deficient")
            Z = U
        self.system = system
        self.Z = Z
        self.norms = norms or NormSequence.base_norm()
        self._splitting = None

    @property
    def horizon(self):
        return self.system.horizon

    @property
    def dimension(self):
        return self.system.dimension

    def contains_first(self, x1, tol=1e-10):
        r = x1 - self.Z @ (self.Z.T @ x1)
        return float(np.linalg.norm(r)) <= tol * max(1.0, float(np.linalg.norm(x1)))

    def apply(self, X):
        """``T_Z`` on arrays of shape (N, d) or (p, N, d); no domain check."""
        X = np.asarray(X, dtype=float)
        out = np.zeros_like(X)
        m1 = np.arange(2, self.horizon + 1, dtype=float)[:, None]
        out[..., 1:, :] = m1 * (
            X[..., 1:, :] - np.einsum("mij,...mj->...mi", self.system.matrices, X[..., :-1, :])
        )
        return out


def _entries(x):
    return x.entries if isinstance(x, BoundedSequence) else np.asarray(x, dtype=float)


def tz_apply(T, x):
    """Apply ``T_Z``; ``x`` must lie in ``Y_Z``."""
    if isinstance(x, BoundedSequence) and x.tag != "YZ":
        raise DomainError(f"T_Z acts on Y_Z, got a sequence tagged {x.tag!r}")
    X = _entries(x)
    if X.shape != (T.horizon, T.dimension):
        raise ConfigurationError(f"expected shape {(T.horizon, T.dimension)}, got {X.shape}")
    if not T.contains_first(X[0]):
        raise DomainError("first entry does not lie in Z")
    return BoundedSequence(T.apply(X), "Y0", T.norms)


def graph_norm(T, x):
    X = _entries(x)
    return float(T.norms.sequence_sup(X) + T.norms.sequence_sup(T.apply(X)))


# --- splitting attached to an operator ---------------------------------------


def _matches(T, cert):
    if cert is None or cert.unstable_dim != T.Z.shape[1]:
        return False
    if T.Z.shape[1] == 0:
        return True
    return float(np.linalg.norm(cert.P(1) @ T.Z, 2)) <= 1e-8


def splitting_for(T, cert=None, theta=0.1):
    """Certificate-like splitting whose unstable part starts at ``Z``.

    Reuses ``cert`` when ``Z = Im Q_1``; otherwise propagates ``Z`` forward and
    pulls the complement of ``Z(N)`` back.
    """
    from polydich.dichotomy import DichotomyCertificate, _build_splitting

    if _matches(T, cert):
        return cert
    if T._splitting is not None:
        return T._splitting
    ds = T.dimension - T.Z.shape[1]
    S, U, P = _build_splitting(T.system, T.Z, ds)
    T._splitting = DichotomyCertificate(T.system, S, U, P, T.Z)
    return T._splitting


# --- Green operator -----------------------------------------------------------


@dataclass
class GreenSolution:
    x: np.ndarray
    defect: float
    truncated: bool = True

    def as_sequence(self, norms=None):
        return BoundedSequence(self.x, "YZ", norms)


def _as_y0(y, shape):
    Y = _entries(y)
    if Y.shape[-2:] != shape:
        raise ConfigurationError(f"expected trailing shape {shape}, got {Y.shape}")
    if np.any(Y[..., 0, :] != 0):
        raise DomainError("not in Y_0: first entry must vanish")
    return Y


def green_solve(T, cert, y, check=True):
    """Bounded solution of ``T_Z x = y`` for ``y`` in ``Y_0`` (truncated at N).

    ``x_n = sum_{k<=n} A(n,k) P_k y_k / k - sum_{k>n} A(n,k) Q_k y_k / k``.
    Accepts (N, d) or batched (p, N, d) input.
    """
    N, d = T.horizon, T.dimension
    Y = _as_y0(y, (N, d))
    if check:
        if not _matches(T, cert):
            raise CertificateError("certificate does not match Z (need Z = Im Q_1)")
        from polydich.dichotomy import verify_equivariance

        res = verify_equivariance(cert, T.system)
        if res > 1e-8:
            raise CertificateError(f"projections not invariant (residual {res:.3g})")
    single = Y.ndim == 2
    Y = Y[None] if single else Y
    p = Y.shape[0]
    A = T.system.matrices
    P = cert.projections
    k = np.arange(1, N + 1, dtype=float)[None, :, None]
    Ys = Y / k
    stable = np.einsum("nij,pnj->pni", P, Ys)
    X = np.empty_like(Y)
    X[:, 0] = stable[:, 0]
    for n in range(1, N):
        X[:, n] = X[:, n - 1] @ A[n - 1].T + stable[:, n]
    du = cert.unstable_dim
    if du:
        Ub = cert.unstable_bases
        Qy = Ys - stable
        w = np.zeros((p, du))
        for n in range(N - 1, 0, -1):
            R = Ub[n].T @ A[n - 1] @ Ub[n - 1]
            w = np.linalg.solve(R, (w + Qy[:, n] @ Ub[n]).T).T
            X[:, n - 1] -= w @ Ub[n - 1].T
    # defect of the identity T x = y relative to the size of its two terms
    m1 = np.arange(2, N + 1, dtype=float)[None, :, None]
    AX = np.einsum("mij,pmj->pmi", A, X[:, :-1])
    scale = m1 * (np.abs(X[:, 1:]) + np.abs(AX))
    defect = np.abs(m1 * (X[:, 1:] - AX) - Y[:, 1:]) / np.maximum(1.0, scale)
    defect = float(defect.max(initial=0.0))
    if check and defect > 1e-8:
        raise CertificateError(f"Green solution fails T x = y (defect {defect:.3g})")
    return GreenSolution(X[0] if single else X, defect)


def green_solve_contraction_array(system, Y):
    """``x_1 = y_1``, ``x_n = A_{n-1} x_{n-1} + y_n / n`` (batched over axis 0)."""
    Y = np.asarray(Y, dtype=float)
    single = Y.ndim == 2
    Y = Y[None] if single else Y
    N = Y.shape[1]
    X = np.empty_like(Y)
    X[:, 0] = Y[:, 0]
    A = system.matrices
    for n in range(1, N):
        X[:, n] = X[:, n - 1] @ A[n - 1].T + Y[:, n] / (n + 1)
    return X[0] if single else X


def green_solve_contraction(T, y):
    """Solution of ``T_Z x = y`` with ``x_1 = 0`` (the contraction case, Z = 0)."""
    Y = _as_y0(y, (T.horizon, T.dimension))
    X = green_solve_contraction_array(T.system, Y)
    return GreenSolution(X, 0.0)


# --- truncated linear system ------------------------------------------------------


def assemble_truncation(T, square=True):
    """Sparse matrix of ``T_Z`` on the horizon.

    Unknowns: coordinates of ``x_1`` in the Z basis, then ``x_2, ..., x_N``.
    Row block m (m = 1..N-1) is ``(m+1) x_{m+1} - (m+1) A_m x_m``.  With
    ``square`` the rows ``U_N^T x_N = 0`` (no unstable component at the
    horizon, ``U_N`` a basis of ``Z(N)``) close the system.
    """
    from polydich.dichotomy import propagate_unstable

    N, d = T.horizon, T.dimension
    du = T.Z.shape[1]
    n_unk = du + (N - 1) * d
    rows, cols, vals = [], [], []

    def put(r0, c0, block):
        r, c = np.nonzero(block)
        rows.extend(r0 + r)
        cols.extend(c0 + c)
        vals.extend(block[r, c])

    for m in range(1, N):
        r0 = (m - 1) * d
        put(r0, du + (m - 1) * d, (m + 1) * np.eye(d))
        Am = T.system.A(m)
        if m == 1:
            if du:
                put(r0, 0, -(m + 1) * Am @ T.Z)
        else:
            put(r0, du + (m - 2) * d, -(m + 1) * Am)
    n_rows = (N - 1) * d
    if square and du:
        UN = propagate_unstable(T.system, T.Z)[-1]
        put(n_rows, du + (N - 2) * d, UN.T)
        n_rows += du
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_rows, n_unk))


def solve_truncated(T, y):
    """Solve the square truncated system; returns an (N, d) array."""
    N, d = T.horizon, T.dimension
    Y = _as_y0(y, (N, d))
    du = T.Z.shape[1]
    M = assemble_truncation(T, square=True).tocsc()
    rhs = np.concatenate([Y[1:].ravel(), np.zeros(du)])
    sol = splinalg.spsolve(M, rhs)
    X = np.empty((N, d))
    X[0] = T.Z @ sol[:du] if du else 0.0
    X[1:] = sol[du:].reshape(N - 1, d)
    return X


# --- inverse-norm estimates -----------------------------------------------------


def green_kernel_norms(cert, norms=None, cocycle=None):
    """``G[n-1, k-1] = ||A(n,k) P_k||/k`` (k <= n) or ``||A(n,k) Q_k||/k`` (k > n),
    as operator norms ``k -> n``; column k = 1 is zero (``y_1 = 0``)."""
    from polydich.dichotomy import _pair_values

    norms = norms or NormSequence.base_norm()
    cocycle = cocycle or Cocycle(cert.system)
    N = cert.horizon
    G = np.zeros((N, N))
    if norms.kind in ("base", "explicit-weights"):
        for part in ("stable", "unstable"):
            if (part == "stable" and not cert.stable_dim) or (part == "unstable" and not cert.unstable_dim):
                continue
            ms, ns, v = _pair_values(cert, cocycle, norms, part, full_limit=max(N, 1024))
            sel = ms >= ns if part == "stable" else ms < ns
            G[ms[sel] - 1, ns[sel] - 1] = v[sel] / ns[sel]
    elif norms.adapted and norms.cert is cert and norms.eval_horizon == N:
        # adapted norms contract the stable part with constant 1,
        # ||A(n,k)P_k||_{k->n} <= (k/n)^lam, and the unstable part with
        # constant 1 (backward sup only) or 2 (strong construction)
        n = np.arange(1, N + 1, dtype=float)[:, None]
        k = n.T
        ratio = np.minimum(n, k) / np.maximum(n, k)
        G = ratio ** norms.lam / k
        G = np.where(n < k, G * (2.0 if norms.kind == "adapted-strong" else 1.0), G)
        if not cert.stable_dim:
            G = np.where(n >= k, 0.0, G)
        if not cert.unstable_dim:
            G = np.where(n < k, 0.0, G)
    else:
        for k in range(2, N + 1):
            fwd = cocycle.forward_stack(k, N) @ cert.P(k) if cert.stable_dim else None
            back = cert.unstable_transfer(1, k - 1, k) if cert.unstable_dim else None
            for n in range(1, N + 1):
                B = fwd[n - k] if n >= k else back[n - 1]
                if B is None:
                    continue
                G[n - 1, k - 1] = operator_norm(norms, B, n, k, samples=73, refine=False) / k
    G[:, 0] = 0.0
    return G


@dataclass
class InvertibilityReport:
    invertible: bool
    inv_norm_upper: float
    inv_norm_lower: float
    conditioning: float
    truncated: bool = True
    diagnostic: str = None

    def to_json(self):
        return {
            "invertible": bool(self.invertible),
            "inv_norm_upper": float(self.inv_norm_upper),
            "inv_norm_lower": float(self.inv_norm_lower),
            "conditioning": float(self.conditioning),
            "truncated": bool(self.truncated),
        }


def _refused(msg):
    return InvertibilityReport(False, math.inf, 0.0, math.inf, True, msg)


def _conditioning(M):
    n = M.shape[1]
    if n == 0:
        return 1.0
    if n <= 4096:
        s = np.linalg.svd(M.toarray(), compute_uv=False)
        return float(s[0] / s[-1]) if s[-1] > 0 else math.inf
    smax = splinalg.svds(M, k=1, return_singular_vectors=False)[0]
    smin = splinalg.svds(M, k=1, which="SM", return_singular_vectors=False)[0]
    return float(smax / smin) if smin > 0 else math.inf


def invertibility_report(T, cert=None, probes=256, seed=0, theta=0.1):
    """Decide invertibility of ``T_Z`` on the horizon and bracket ``||T_Z^{-1}||``.

    ``Z`` must have the unstable dimension (from ``cert`` or by classifying
    growth rates); otherwise, or without a spectral gap, the report is negative
    with a ``diagnostic``.  The upper bound sums the Green kernel norms (exact
    for base and weighted norms and for adapted norms built on ``cert``; a
    sampled estimate for other adapted norms); the lower bound is the best of
    random unit probes, a kernel-aligned probe and the stable and unstable test
    sequences.
    """
    from polydich.dichotomy import stable_subspace

    d = T.dimension
    if cert is not None:
        du = cert.unstable_dim
    else:
        try:
            du = stable_subspace(T.system, T.norms, 1, theta).complement.shape[1]
        except SpectralGapError as exc:
            return _refused(f"no spectral gap: {exc}")
    if T.Z.shape[1] != du:
        return _refused(
            f"dimension mismatch: Z has dimension {T.Z.shape[1]}, unstable dimension is {du}"
        )
    try:
        split = splitting_for(T, cert, theta)
    except PolyDichError as exc:
        return _refused(f"no splitting through Z: {exc}")
    M = assemble_truncation(T, square=True)
    cond = _conditioning(M)
    if not cond < 1e8:
        return InvertibilityReport(False, math.inf, 0.0, cond, True,
                                   "truncated system numerically singular")

    G = green_kernel_norms(split, T.norms)
    row = G.sum(axis=1)
    upper = float(row.max())

    N = T.horizon
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((probes, N, d))
    Y /= np.maximum(_seq_norms(T.norms, Y), 1e-300)[..., None]
    Y[:, 0] = 0.0
    lower = float(T.norms.sequence_sup(green_solve(T, split, Y, check=False).x).max())

    # kernel-aligned probe at the worst row, improved by a few power steps
    n_star = int(np.argmax(row)) + 1
    B = np.zeros((N, d, d))
    prod = np.eye(d)
    for k in range(n_star, 0, -1):
        B[k - 1] = prod @ split.P(k)  # A(n*, k) P_k
        if k > 1:
            prod = prod @ T.system.A(k - 1)
    if n_star < N and split.unstable_dim:
        for k in range(n_star + 1, N + 1):
            B[k - 1] = -split.unstable_transfer(n_star, n_star, k)[0]
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    for _ in range(12):
        g = np.einsum("kji,j->ki", B, w)
        y = g / np.maximum(np.linalg.norm(g, axis=1), 1e-300)[:, None]
        y[0] = 0.0
        y[1:] /= np.maximum(_seq_norms(T.norms, y[None])[0][1:], 1e-300)[:, None]
        x = green_solve(T, split, y, check=False).x
        lower = max(lower, float(T.norms.sequence_sup(x)))
        xn = x[n_star - 1]
        if not np.any(xn):
            break
        w = xn / np.linalg.norm(xn)

    for ts in _test_sequences(T, split):
        lower = max(lower, ts.lower_bound)
    upper = max(upper, lower)
    return InvertibilityReport(True, upper, lower, cond, True, None)


def _seq_norms(norms, Y):
    """Per-entry norms ``||y_n||_n`` for (p, N, d) input."""
    out = np.empty(Y.shape[:2])
    for n in range(Y.shape[1]):
        out[:, n] = norms.batch(n + 1, Y[:, n])
    return out


def _test_sequences(T, split):
    N, d = T.horizon, T.dimension
    out = []
    for n in sorted({1, 2, max(1, N // 8)}):
        if split.stable_dim:
            for i in range(split.stable_dim):
                try:
                    out.append(test_sequence_stable(T, n, N, split.stable_basis(n)[:, i]))
                except VanishingOrbitError:
                    pass
        if split.unstable_dim:
            for i in range(split.unstable_dim):
                out.append(test_sequence_unstable(T, split.unstable_basis(n)[:, i], n, split))
    return out


# --- test sequences ----------------------------------------------------------------


@dataclass
class TestSequence:
    __test__ = False  # not a pytest class

    y: np.ndarray
    x: np.ndarray
    lower_bound: float
    profile: np.ndarray


def test_sequence_stable(T, n, m, x):
    """Unit-size ``y_j = A(j,n)x / ||A(j,n)x||_j`` for n < j <= m.

    The solution with ``x_1 = 0`` is ``A(k,n)x`` times a partial harmonic-type
    sum, so ``||A(m,n)x||_m sum_{j=n+1}^m 1/(j ||A(j,n)x||_j)`` bounds
    ``||T_Z^{-1}||`` from below whenever x lies in the stable subspace.
    """
    N, d = T.horizon, T.dimension
    if not 1 <= n < m <= N:
        raise ConfigurationError(f"need 1 <= n < m <= N, got n={n}, m={m}")
    x = np.asarray(x, dtype=float)
    orbit = Cocycle(T.system).forward_stack(n, N) @ x  # A(k, n)x for k = n..N
    nrm = np.array([T.norms(k, orbit[k - n]) for k in range(n, N + 1)])
    if np.any(nrm[: m - n + 1] <= 1e-300):
        raise VanishingOrbitError(f"orbit of x from n={n} vanishes before m={m}")
    y = np.zeros((N, d))
    y[n:m] = orbit[1 : m - n + 1] / nrm[1 : m - n + 1, None]
    j = np.arange(n + 1, m + 1, dtype=float)
    partial = np.concatenate([[0.0], np.cumsum(1.0 / (j * nrm[1 : m - n + 1]))])
    weights = np.concatenate([partial, np.full(N - m, partial[-1])])
    xs = np.zeros((N, d))
    xs[n - 1 :] = orbit * weights[:, None]
    lb = float(nrm[m - n] * partial[-1])
    profile = np.zeros(N)
    profile[n - 1 :] = nrm * weights
    return TestSequence(y, xs, lb, profile)


def test_sequence_unstable(T, z, n, cert=None):
    """Unit-size ``y_j = A(j,n)z / ||A(j,n)z||_j`` (j >= 2) for z in ``Z(n)``.

    The bounded solution is ``-sum_{j>k} A(k,j) y_j / j``; ``lower_bound`` is
    its sup norm and ``profile`` the per-index norms.
    """
    split = splitting_for(T, cert)
    N, d = T.horizon, T.dimension
    z = np.asarray(z, dtype=float)
    if np.linalg.norm(split.P(n) @ z) > 1e-8 * max(1.0, np.linalg.norm(z)):
        raise DomainError(f"z does not lie in Z({n})")
    back = split.unstable_transfer(1, n, n) @ z
    fwd = Cocycle(T.system).forward_stack(n, N) @ z
    orbit = np.concatenate([back[:-1], fwd])
    nrm = np.array([T.norms(k, orbit[k - 1]) for k in range(1, N + 1)])
    if np.any(nrm[1:] <= 1e-300):
        raise VanishingOrbitError("unstable orbit vanishes")
    y = np.zeros((N, d))
    y[1:] = orbit[1:] / nrm[1:, None]
    sol = green_solve(T, split, y, check=False).x
    profile = np.array([T.norms(k, sol[k - 1]) for k in range(1, N + 1)])
    return TestSequence(y, sol, float(profile.max()), profile)


def harmonic_block(n, N0):
    """``sum_{j=n+1}^{N0 n} 1/j`` (compensated summation)."""
    return math.fsum(1.0 / j for j in range(n + 1, N0 * n + 1))
