"""Stable/unstable splittings, projections, fitted constants and certification.

The pipeline in :func:`certify` mirrors the converse direction of the
admissibility characterization: given a growth bound and a subspace ``Z``
it realizes

* ``Z(n) = A(n, 1) Z`` by forward propagation (QR at every step),
* ``X(n)`` by pulling back ``X(n+1)`` through ``A_n`` starting from the
  orthogonal complement of ``Z(N)``,

so that the projections ``P_n`` onto ``X(n)`` along ``Z(n)`` commute with the
dynamics up to rounding.  Rates and constants are then fitted on all pairs
``(m, n)`` of the horizon.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from polydich.errors import (
    CertificateError,
    ConfigurationError,
    IndexRangeError,
    NoDecayError,
    PolyDichError,
    SpectralGapError,
    TransversalityError,
    UnstableRestrictionError,
    VanishingOrbitError,
)
from polydich.norms import NormSequence, base_vector_norm, operator_norm
from polydich.system import Cocycle

__all__ = [
    "SubspacePair",
    "StableClassification",
    "DichotomyCertificate",
    "CertifyOptions",
    "RateFit",
    "NonuniformFit",
    "GrowthFit",
    "GammaResult",
    "LyapunovResult",
    "stable_subspace",
    "unstable_subspace",
    "propagate_unstable",
    "pullback_stable",
    "splitting_projection",
    "verify_equivariance",
    "fit_constants",
    "fit_nonuniform_constants",
    "fit_growth_bound",
    "gamma",
    "threshold_scale",
    "polynomial_lyapunov_exponent",
    "certify",
    "check_contraction",
    "check_expansion",
]

TRANSVERSALITY_TOL = 1e-6
EQUIVARIANCE_TOL = 1e-8


# --- small numerical helpers ------------------------------------------------


def _orth_complement(B, d):
    """Orthonormal basis of the orthogonal complement of span(B)."""
    if B.shape[1] == 0:
        return np.eye(d)
    U, _, _ = np.linalg.svd(B, full_matrices=True)
    return U[:, B.shape[1]:]


def _geom_ints(lo, hi, count):
    if hi <= lo:
        return np.array([lo])
    pts = np.unique(np.round(np.geomspace(lo, hi, count)).astype(int))
    return pts[(pts >= lo) & (pts <= hi)]


def _fe_slope(x, y, groups):
    """Least-squares slope with one intercept per group (fixed effects)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    _, inv = np.unique(groups, return_inverse=True)
    cnt = np.bincount(inv)
    xm = np.bincount(inv, x) / cnt
    ym = np.bincount(inv, y) / cnt
    xc, yc = x - xm[inv], y - ym[inv]
    den = float(xc @ xc)
    if den <= 1e-300:
        return None
    return float(xc @ yc) / den


def _median_slope(x, y, groups, max_groups=24, max_points=40):
    """Median over groups of Theil-Sen slopes (robust to sparse spikes)."""
    x, y, groups = np.asarray(x, float), np.asarray(y, float), np.asarray(groups)
    keys = np.unique(groups)
    if len(keys) > max_groups:
        keys = keys[np.unique(np.round(np.geomspace(1, len(keys), max_groups)).astype(int) - 1)]
    slopes = []
    for g in keys:
        sel = np.flatnonzero(groups == g)
        if len(np.unique(x[sel])) < 2:
            continue
        if len(sel) > max_points:
            order = sel[np.argsort(x[sel])]
            sel = order[np.unique(np.round(np.geomspace(1, len(order), max_points)).astype(int) - 1)]
        slopes.append(stats.theilslopes(y[sel], x[sel])[0])
    if not slopes:
        return None
    return float(np.median(slopes))


def _upper_envelope_exponent(log_n, log_c):
    """Smallest eps >= 0 with log c_n <= log c_first + eps (log n - log n_first)."""
    order = np.argsort(log_n)
    log_n, log_c = log_n[order], log_c[order]
    ref_n, ref_c = log_n[0], log_c[0]
    dn = log_n - ref_n
    sel = dn > 0
    if not np.any(sel):
        return 0.0
    return max(0.0, float(np.max((log_c[sel] - ref_c) / dn[sel])))


# --- data types -------------------------------------------------------------


@dataclass
class SubspacePair:
    n: int
    stable_basis: np.ndarray
    unstable_basis: np.ndarray
    classification_scores: np.ndarray = None

    @property
    def dimension(self):
        return self.stable_basis.shape[0]


@dataclass
class StableClassification:
    n: int
    stable_basis: np.ndarray
    complement: np.ndarray
    slopes: np.ndarray

    @property
    def stable_dim(self):
        return self.stable_basis.shape[1]


@dataclass
class RateFit:
    D: float
    lam: float
    lam_stable: float = None
    lam_unstable: float = None
    max_violation: float = 0.0
    pairs: int = 0


@dataclass
class NonuniformFit:
    D: float
    lam: float
    eps: float
    constants_by_n: np.ndarray = None


@dataclass
class GrowthFit:
    M: float
    a: float
    K: float
    b: float
    eps: float
    bounded: bool
    witness: int
    growth_exponent: float


@dataclass
class GammaResult:
    gamma: float
    proj_bound: float
    converged: bool = True
    method: str = "principal-angles"


@dataclass
class LyapunovResult:
    slope: float
    r_squared: float
    window: tuple
    vanished: bool = False


@dataclass
class CertifyOptions:
    theta: float = 0.1
    classify_points: int = 6
    Z: np.ndarray = None
    admissibility: bool = True
    probes: int = 64
    seed: int = 0


class DichotomyCertificate:
    """Projections, subspaces, fitted constants and flags for one system."""

    def __init__(self, system, stable_bases, unstable_bases, projections, Z):
        self.system = system
        self.dimension = system.dimension
        self.horizon = system.horizon
        self.stable_bases = stable_bases
        self.unstable_bases = unstable_bases
        self.projections = np.asarray(projections)
        self.Z = Z
        self.stable_dim = stable_bases[0].shape[1]
        self.unstable_dim = unstable_bases[0].shape[1]
        self.constants = {}
        self.flags = {"dichotomy": False, "contraction": False, "expansion": False,
                      "strong": False}
        self.residuals = {}
        self.grid = {}
        self.gamma = np.full(self.horizon, np.nan)
        self.proj_norms = np.full(self.horizon, np.nan)
        self.threshold_scale = None
        self.growth = None
        self.errors = []
        self._L = None
        self._C = None

    # -- accessors ---------------------------------------------------------

    def _idx(self, n):
        if not 1 <= n <= self.horizon:
            raise IndexRangeError(f"index {n} outside 1..{self.horizon}")
        return n - 1

    def P(self, n):
        return self.projections[self._idx(n)]

    def Q(self, n):
        return np.eye(self.dimension) - self.projections[self._idx(n)]

    def stable_basis(self, n):
        return self.stable_bases[self._idx(n)]

    def unstable_basis(self, n):
        return self.unstable_bases[self._idx(n)]

    def pair(self, n):
        return SubspacePair(n, self.stable_basis(n), self.unstable_basis(n))

    def _unstable_coords(self):
        # C_n = coordinates of A(n, 1) on Z in the bases U_1, U_n; L_n = U_n C_n
        if self._L is None:
            du, N = self.unstable_dim, self.horizon
            C = np.empty((N, du, du))
            C[0] = np.eye(du)
            mats = self.system.matrices
            for k in range(1, N):
                R = self.unstable_bases[k].T @ mats[k - 1] @ self.unstable_bases[k - 1]
                C[k] = R @ C[k - 1]
            U = np.stack(self.unstable_bases)
            self._C = C
            self._L = U @ C
        return self._L, self._C

    def unstable_transfer(self, m_lo, m_hi, n):
        """Stack of ``A(m, n) Q_n`` for m = m_lo..m_hi (any order relative to n)."""
        L, C = self._unstable_coords()
        d = self.dimension
        if self.unstable_dim == 0:
            return np.zeros((m_hi - m_lo + 1, d, d))
        K = np.linalg.solve(C[n - 1], self.unstable_basis(n).T @ self.Q(n))
        return L[m_lo - 1 : m_hi] @ K

    def unstable_step_inverse(self, n):
        """``R_n^{-1}`` mapping Z(n+1)-coordinates to Z(n)-coordinates."""
        R = self.unstable_bases[n].T @ self.system.A(n) @ self.unstable_bases[n - 1]
        return np.linalg.inv(R)

    # -- serialization -----------------------------------------------------

    def to_json(self):
        return {
            "flags": dict(self.flags),
            "constants": dict(self.constants),
            "projections": [p.tolist() for p in self.projections],
            "gamma": [float(g) for g in self.gamma],
            "residuals": dict(self.residuals),
            "N0": self.threshold_scale,
            "grid": dict(self.grid, Z=np.asarray(self.Z).tolist(),
                         stable_dim=self.stable_dim, unstable_dim=self.unstable_dim,
                         horizon=self.horizon, dimension=self.dimension,
                         errors=list(self.errors)),
        }

    @classmethod
    def from_json(cls, data, system):
        P = np.asarray(data["projections"], dtype=float)
        N, d = system.horizon, system.dimension
        if P.shape != (N, d, d):
            raise ConfigurationError("certificate does not match the system")
        ds = int(data["grid"]["stable_dim"])
        S, U = [], []
        for p in P:
            us, _, _ = np.linalg.svd(p)
            uq, _, _ = np.linalg.svd(np.eye(d) - p)
            S.append(us[:, :ds])
            U.append(uq[:, : d - ds])
        Z = np.asarray(data["grid"].get("Z", U[0]), dtype=float).reshape(d, -1)
        cert = cls(system, S, U, P, Z)
        cert.flags.update(data.get("flags", {}))
        cert.constants.update(data.get("constants", {}))
        cert.residuals.update(data.get("residuals", {}))
        cert.grid.update({k: v for k, v in data.get("grid", {}).items() if k != "Z"})
        cert.gamma = np.asarray(data.get("gamma", cert.gamma), dtype=float)
        cert.threshold_scale = data.get("N0")
        return cert


# --- subspaces --------------------------------------------------------------


def _orbit_norms(cocycle, norms, n, V, ms):
    """``||A(m, n) v||_m`` for columns v of V at the times ms."""
    stack = cocycle.forward_stack(n, int(ms[-1]))
    out = np.empty((V.shape[1], len(ms)))
    for j, m in enumerate(ms):
        out[:, j] = norms.batch(int(m), (stack[m - n] @ V).T)
    return out


def stable_subspace(sys, norms=None, n=1, theta=0.1, cocycle=None, points=16):
    """Classify the right singular directions of ``A(N, n)`` by growth exponent.

    Directions whose fitted slope of ``log ||A(m, n) v||_m`` against
    ``log(m / n)`` is below ``-theta`` span the stable subspace; a slope in
    ``[-theta, theta]`` raises :class:`SpectralGapError`.  Orbits that vanish
    count as stable.
    """
    cocycle = cocycle or Cocycle(sys)
    norms = norms or NormSequence.base_norm()
    N, d = sys.horizon, sys.dimension
    if not 1 <= n <= max(1, N // 2):
        raise IndexRangeError(f"need n <= N/2 = {N // 2} to classify, got {n}")
    _, _, Vt = np.linalg.svd(cocycle(N, n))
    V = Vt.T
    ms = _geom_ints(n, N, points)
    vals = _orbit_norms(cocycle, norms, n, V, ms)
    x = np.log(ms / n)
    slopes = np.empty(d)
    for i in range(d):
        if np.any(vals[i] <= 1e-300):
            slopes[i] = -np.inf
            continue
        slopes[i] = np.polyfit(x, np.log(vals[i]), 1)[0]
    if np.any(np.abs(slopes) <= theta):
        raise SpectralGapError(
            f"spectral gap too small at n={n}: slopes {np.round(slopes, 4).tolist()} "
            f"within margin {theta}"
        )
    stable = slopes < -theta
    return StableClassification(n, V[:, stable], V[:, ~stable], slopes)


def propagate_unstable(sys, Z):
    """Orthonormal bases of ``Z(n) = A(n, 1) Z`` for n = 1..N."""
    Z = np.asarray(Z, dtype=float).reshape(sys.dimension, -1)
    du = Z.shape[1]
    if du:
        U, s, _ = np.linalg.svd(Z, full_matrices=False)
        if s[-1] <= 1e-12 * s[0]:
            raise ConfigurationError("Z basis is rank deficient")
    else:
        U = Z
    bases = [U]
    for k in range(1, sys.horizon):
        if du == 0:
            bases.append(U)
            continue
        img = sys.A(k) @ U
        Qm, R = np.linalg.qr(img)
        rd = np.abs(np.diag(R))
        if rd.min() <= 1e-12 * max(1.0, np.linalg.norm(sys.A(k), 2)):
            raise UnstableRestrictionError(f"unstable image degenerate at n={k + 1}")
        U = Qm
        bases.append(U)
    return bases


def unstable_subspace(sys, Z_basis, n):
    """Orthonormal basis of ``A(n, 1) Z``."""
    if not 1 <= n <= sys.horizon:
        raise IndexRangeError(f"index {n} outside 1..{sys.horizon}")
    return propagate_unstable(sys, Z_basis)[n - 1]


def pullback_stable(sys, unstable_bases, stable_dim):
    """Stable bases ``X(n)`` with ``X(N) = Z(N)^perp`` and ``X(n) = A_n^{-1} X(n+1)``."""
    d, N = sys.dimension, sys.horizon
    du = d - stable_dim
    S = [None] * N
    S[N - 1] = _orth_complement(unstable_bases[N - 1], d)
    for k in range(N - 1, 0, -1):
        if du == 0:
            S[k - 1] = np.eye(d)
            continue
        if stable_dim == 0:
            S[k - 1] = np.zeros((d, 0))
            continue
        W = _orth_complement(S[k], d)
        _, _, Vt = np.linalg.svd(W.T @ sys.A(k), full_matrices=True)
        S[k - 1] = Vt[du:].T
    return S


def splitting_projection(pair):
    """Projection onto the stable basis along the unstable basis."""
    S, U = pair.stable_basis, pair.unstable_basis
    d = S.shape[0]
    ds = S.shape[1]
    if ds == 0:
        return np.zeros((d, d))
    if U.shape[1] == 0:
        return np.eye(d)
    B = np.hstack([S, U])
    if B.shape[1] != d:
        raise TransversalityError("stable and unstable dimensions do not add up to d")
    s = np.linalg.svd(B, compute_uv=False)
    if s[-1] <= TRANSVERSALITY_TOL:
        raise TransversalityError(
            f"splitting not transversal at n={pair.n} (sigma_min={s[-1]:.3g})"
        )
    return S @ np.linalg.inv(B)[:ds]


def verify_equivariance(cert, sys=None, per_index=False):
    """``max_m ||A_m P_m - P_{m+1} A_m|| / max(1, ||A_m||)``."""
    sys = sys or cert.system
    mats = sys.matrices
    P = cert.projections
    diff = np.matmul(mats, P[:-1]) - np.matmul(P[1:], mats)
    res = np.linalg.norm(diff, 2, axis=(1, 2)) / np.maximum(
        1.0, np.linalg.norm(mats, 2, axis=(1, 2))
    )
    return res if per_index else float(res.max(initial=0.0))


# --- constants --------------------------------------------------------------


def _is_euclidean(norms):
    return norms is None or (norms.kind == "base" and norms.base == "euclidean")


def _pair_values(cert, cocycle, norms, part, full_limit=1024, grid_points=10):
    """Operator norms of ``A(m,n)P_n`` (m >= n) or ``A(m,n)Q_n`` (m <= n).

    Returns arrays (m, n, value).  Base and weighted norms use every pair of
    the horizon (up to ``full_limit``); adapted norms use a geometric grid with
    searched operator norms.
    """
    N = cert.horizon
    norms = norms or NormSequence.base_norm()
    simple = norms.kind in ("base", "explicit-weights")
    if simple and N <= full_limit:
        tab = cocycle.table()
        mm, nn = np.meshgrid(np.arange(1, N + 1), np.arange(1, N + 1), indexing="ij")
        if part == "stable":
            sel = mm >= nn
            mats = np.matmul(tab[sel], cert.projections[nn[sel] - 1])
        else:
            sel = mm <= nn
            L, C = cert._unstable_coords()
            if cert.unstable_dim == 0:
                mats = np.zeros((int(sel.sum()), cert.dimension, cert.dimension))
            else:
                Q = np.eye(cert.dimension)[None] - cert.projections
                Ub = np.stack(cert.unstable_bases)
                K = np.linalg.solve(C, np.transpose(Ub, (0, 2, 1)) @ Q)
                mats = np.matmul(L[mm[sel] - 1], K[nn[sel] - 1])
        ms, ns = mm[sel], nn[sel]
        from polydich.norms import _base_operator_norm

        vals = _base_operator_norm(mats, norms.base)
        if norms.kind == "explicit-weights":
            vals = vals * norms.weights[ms - 1] / norms.weights[ns - 1]
        return ms, ns, vals
    ms, ns, vals = [], [], []
    n_top = norms.eval_horizon or N
    for n in _geom_ints(1, n_top, grid_points):
        if part == "stable":
            targets = _geom_ints(n, n_top, grid_points)
            stack = cocycle.forward_stack(n, int(targets[-1]))
            mats = [stack[m - n] @ cert.P(n) for m in targets]
        else:
            targets = _geom_ints(1, n, grid_points)
            full = cert.unstable_transfer(1, n, n)
            mats = [full[m - 1] for m in targets]
        for m, B in zip(targets, mats):
            ms.append(m)
            ns.append(n)
            vals.append(operator_norm(norms, B, int(m), int(n)))
    return np.array(ms), np.array(ns), np.array(vals)


def _rate(ms, ns, vals, direction):
    """Fixed-effects least-squares decay rate; direction +1 for m >= n."""
    keep = vals > 1e-300
    if keep.sum() < 2:
        return None
    x = np.log(ms[keep] / ns[keep]) * direction
    slope = _fe_slope(x, np.log(vals[keep]), ns[keep])
    return None if slope is None else -slope


def fit_constants(sys, norms=None, cert=None, cocycle=None):
    """Fit ``(D, lam)`` of the dichotomy bounds in the configured norms.

    ``lam`` is the least-squares decay rate (min over the stable and unstable
    parts); ``D`` is the smallest constant closing both bounds on every pair.
    """
    cocycle = cocycle or Cocycle(sys)
    lam_s = lam_u = None
    data = []
    if cert.stable_dim:
        ms, ns, v = _pair_values(cert, cocycle, norms, "stable")
        lam_s = _rate(ms, ns, v, 1.0)
        data.append((ms / ns, v, "s"))
    if cert.unstable_dim:
        ms, ns, v = _pair_values(cert, cocycle, norms, "unstable")
        lam_u = _rate(ms, ns, v, -1.0)
        data.append((ns / ms, v, "u"))
    rates = [r for r in (lam_s, lam_u) if r is not None]
    if not rates:
        raise NoDecayError("no nonvanishing pairs to fit a rate")
    lam = min(rates)
    if not lam > 0:
        raise NoDecayError(f"no polynomial decay (fitted rate {lam:.4g})")
    D = max(float(np.max(v * ratio ** lam)) for ratio, v, _ in data)
    viol = max(float(np.max(v - D * ratio ** (-lam))) for ratio, v, _ in data)
    return RateFit(D, lam, lam_s, lam_u, max(0.0, viol), sum(len(v) for _, v, _ in data))


def fit_nonuniform_constants(sys, cert, base="euclidean", cocycle=None):
    """Fit ``(D, lam, eps)`` of the nonuniform bounds in the base norm.

    Stage one takes the median of per-``n`` Theil-Sen slopes; stage two
    reads ``eps`` off the upper envelope of the per-``n`` constants.
    """
    cocycle = cocycle or Cocycle(sys)
    norms = NormSequence.base_norm(base)
    N = sys.horizon
    parts = []
    rates = []
    if cert.stable_dim:
        ms, ns, v = _pair_values(cert, cocycle, norms, "stable")
        keep = v > 1e-300
        r = _median_slope(np.log(ms / ns)[keep], np.log(v[keep]), ns[keep])
        if r is not None:
            rates.append(-r)
        parts.append((ms / ns, ns, v))
    if cert.unstable_dim:
        ms, ns, v = _pair_values(cert, cocycle, norms, "unstable")
        keep = v > 1e-300
        r = _median_slope(np.log(ns / ms)[keep], np.log(v[keep]), ns[keep])
        if r is not None:
            rates.append(-r)
        parts.append((ns / ms, ns, v))
    if not rates:
        raise NoDecayError("no nonvanishing pairs to fit a rate")
    lam = min(rates)
    if not lam > 0:
        raise NoDecayError(f"no polynomial decay (fitted rate {lam:.4g})")
    c = np.zeros(N)
    for ratio, ns, v in parts:
        np.maximum.at(c, ns - 1, v * ratio ** lam)
    idx = np.flatnonzero(c > 0)
    eps = _upper_envelope_exponent(np.log(idx + 1.0), np.log(c[idx]))
    D = float(np.max(c[idx] / (idx + 1.0) ** eps))
    return NonuniformFit(D, lam, eps, c)


def fit_growth_bound(sys, norms=None, cocycle=None, full_limit=1024, threshold=0.25,
                     refine=True):
    """Growth bound ``||A(m,n)||_{n->m} <= M (m/n)^a`` plus the nonuniform
    ``||A(m,n)|| <= K (m/n)^b n^eps`` in the base norm.

    ``bounded`` is the one-step diagnostic: the running maximum of
    ``||A_n||_{n -> n+1}`` must not grow polynomially (log-log growth between
    N/4 and N below ``threshold``).  ``witness`` is the index of the largest
    one-step norm.
    """
    cocycle = cocycle or Cocycle(sys)
    norms = norms or NormSequence.base_norm()
    N = sys.horizon
    base = NormSequence.base_norm(norms.base)

    def all_pairs(ns_):
        simple = ns_.kind in ("base", "explicit-weights")
        if simple and N <= full_limit:
            tab = cocycle.table()
            mm, nn = np.meshgrid(np.arange(1, N + 1), np.arange(1, N + 1), indexing="ij")
            sel = mm >= nn
            from polydich.norms import _base_operator_norm

            vals = _base_operator_norm(tab[sel], ns_.base)
            if ns_.kind == "explicit-weights":
                vals = vals * ns_.weights[mm[sel] - 1] / ns_.weights[nn[sel] - 1]
            return mm[sel], nn[sel], vals
        ms, nn, vals = [], [], []
        top = ns_.eval_horizon or N
        for n in _geom_ints(1, top, 10):
            targets = _geom_ints(n, top, 10)
            stack = cocycle.forward_stack(n, int(targets[-1]))
            for m in targets:
                ms.append(m)
                nn.append(n)
                vals.append(operator_norm(ns_, stack[m - n], int(m), int(n), refine=refine))
        return np.array(ms), np.array(nn), np.array(vals)

    ms, ns, v = all_pairs(norms)
    keep = v > 1e-300
    slope = _fe_slope(np.log(ms / ns)[keep], np.log(v[keep]), ns[keep]) if keep.sum() > 1 else None
    a = max(0.0, slope or 0.0)
    M = float(np.max(v / (ms / ns) ** a))

    bms, bns, bv = (ms, ns, v) if norms.kind == "base" else all_pairs(base)
    keep = bv > 1e-300
    b_fit = _median_slope(np.log(bms / bns)[keep], np.log(bv[keep]), bns[keep])
    b = max(0.0, b_fit if b_fit is not None else 0.0)
    c = np.zeros(N)
    np.maximum.at(c, bns - 1, bv / (bms / bns) ** b)
    idx = np.flatnonzero(c > 0)
    eps = _upper_envelope_exponent(np.log(idx + 1.0), np.log(c[idx])) if len(idx) else 0.0
    K = float(np.max(c[idx] / (idx + 1.0) ** eps)) if len(idx) else 0.0

    if norms.kind in ("base", "explicit-weights"):
        step = np.array([operator_norm(norms, sys.A(k), k + 1, k) for k in range(1, N)])
    else:
        step = np.array([operator_norm(norms, sys.A(k), k + 1, k, refine=refine)
                         for k in _geom_ints(1, min(N - 1, norms.eval_horizon - 1), 24)])
    run = np.maximum.accumulate(step)
    q = max(1, len(run) // 4)
    if run[q - 1] > 0 and run[-1] > 0:
        growth = math.log(run[-1] / run[q - 1]) / math.log(len(run) / q)
    elif run[-1] > 0:
        growth = math.inf
    else:
        growth = 0.0
    witness = int(np.argmax(step)) + 1
    if norms.kind not in ("base", "explicit-weights"):
        witness = int(_geom_ints(1, min(N - 1, norms.eval_horizon - 1), 24)[witness - 1])
    return GrowthFit(M, a, K, b, eps, bool(growth < threshold), witness, float(growth))


# --- projections bound ------------------------------------------------------


def _unit_directions(k, count, seed=0):
    if k == 1:
        return np.array([[1.0], [-1.0]])
    if k == 2:
        th = np.linspace(0.0, 2 * math.pi, count, endpoint=False)
        return np.column_stack([np.cos(th), np.sin(th)])
    rng = np.random.default_rng(seed)
    V = np.vstack([np.eye(k), -np.eye(k), rng.standard_normal((count, k))])
    return V / np.linalg.norm(V, axis=1, keepdims=True)


def gamma(pair, norms=None, n=None):
    """``gamma_n = inf ||v_s + v_u||_n`` over unit ``v_s in X(n)``, ``v_u in Z(n)``.

    Exact through the smallest principal angle for the Euclidean norm
    (``2 sin(theta_min / 2)``); otherwise a grid search refined by
    Nelder-Mead.  Trivial splittings get ``gamma = 2`` by convention.
    """
    n = pair.n if n is None else n
    S, U = pair.stable_basis, pair.unstable_basis
    if S.shape[1] == 0 or U.shape[1] == 0:
        return GammaResult(2.0, 1.0, True, "trivial")
    if _is_euclidean(norms):
        s = np.linalg.svd(S.T @ U, compute_uv=False)
        theta = math.acos(min(1.0, float(s[0])))
        g = 2.0 * math.sin(theta / 2.0)
        return GammaResult(g, 2.0 / g if g > 0 else math.inf)

    def unit(B, coeffs):
        V = coeffs @ B.T
        return V / norms.batch(n, V)[:, None]

    As = _unit_directions(S.shape[1], 120)
    Au = _unit_directions(U.shape[1], 120)
    Vs, Vu = unit(S, As), unit(U, Au)
    sums = (Vs[:, None, :] + Vu[None, :, :]).reshape(-1, S.shape[0])
    vals = norms.batch(n, sums).reshape(len(Vs), len(Vu))
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    ks = S.shape[1]

    def obj(z):
        a, c = z[:ks], z[ks:]
        if not (np.any(a) and np.any(c)):
            return 4.0
        return norms.batch(n, unit(S, a[None])[0] + unit(U, c[None])[0])

    res = optimize.minimize(obj, np.concatenate([As[i], Au[j]]), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 2000})
    g = min(float(vals[i, j]), float(res.fun))
    return GammaResult(g, 2.0 / g if g > 0 else math.inf, bool(res.success), "grid+refine")


def threshold_scale(D, lam, M, a):
    """Smallest integer N0 with ``N0^lam / D - D N0^-lam > 0`` and the resulting
    lower bound ``c`` on every ``gamma_n``."""
    N0 = int(math.floor(D ** (1.0 / lam))) + 1
    while N0 ** lam / D - D * N0 ** (-lam) <= 0:
        N0 += 1
    c = (N0 ** lam / D - D * N0 ** (-lam)) / (M * N0 ** a)
    return N0, c


# --- Lyapunov exponents -----------------------------------------------------


def polynomial_lyapunov_exponent(sys, v, window=None, cocycle=None, norms=None):
    """Least-squares slope of ``log ||A(n, 1) v||`` against ``log n`` on a window."""
    cocycle = cocycle or Cocycle(sys)
    N = sys.horizon
    lo, hi = window or (2, N)
    lo, hi = max(1, int(lo)), min(N, int(hi))
    if hi <= lo:
        raise ConfigurationError("window needs lo < hi")
    v = np.asarray(v, dtype=float)
    orbit = cocycle.forward_stack(1, hi)[lo - 1 : hi] @ v
    if norms is None or norms.kind == "base":
        vals = base_vector_norm(orbit, "euclidean" if norms is None else norms.base)
    else:
        vals = np.array([norms(k, o) for k, o in zip(range(lo, hi + 1), orbit)])
    if np.any(vals <= 1e-300):
        return LyapunovResult(-math.inf, float("nan"), (lo, hi), True)
    x = np.log(np.arange(lo, hi + 1, dtype=float))
    y = np.log(vals)
    fit = stats.linregress(x, y)
    r2 = float(fit.rvalue ** 2) if np.ptp(y) > 0 else 1.0
    return LyapunovResult(float(fit.slope), r2, (lo, hi))


# --- certification ----------------------------------------------------------


def _build_splitting(sys, Z, stable_dim):
    U = propagate_unstable(sys, Z)
    S = pullback_stable(sys, U, stable_dim)
    P = np.stack([splitting_projection(SubspacePair(k + 1, S[k], U[k])) for k in range(sys.horizon)])
    return S, U, P


def certify(sys, norms=None, opts=None):
    """Run the full pipeline and return a :class:`DichotomyCertificate`.

    Stage failures are recorded in ``cert.errors`` (tagged by stage) and leave
    the affected flags down; if no splitting can be built at all the stage
    error is raised.
    """
    from polydich.admissibility import TZOperator, invertibility_report

    opts = opts or CertifyOptions()
    norms = norms or NormSequence.base_norm()
    cocycle = Cocycle(sys)
    N, d = sys.horizon, sys.dimension
    growth = fit_growth_bound(sys, norms, cocycle)

    grid_n = _geom_ints(1, max(1, N // 2), opts.classify_points)
    dims, scores, dissent = {}, {}, []
    first = None
    for n in grid_n:
        try:
            cl = stable_subspace(sys, norms, int(n), opts.theta, cocycle)
        except SpectralGapError as exc:
            dissent.append(int(n))
            first = first or exc
            continue
        dims[int(n)] = cl.stable_dim
        scores[int(n)] = cl.slopes.tolist()
        if int(n) == 1:
            complement = cl.complement
    if not dims:
        raise SpectralGapError(f"[classification] {first}")
    votes = np.bincount(list(dims.values()), minlength=d + 1)
    ds = int(np.argmax(votes))
    dissent += [n for n, k in dims.items() if k != ds]
    if opts.Z is not None:
        Z = np.asarray(opts.Z, dtype=float).reshape(d, -1)
    elif 1 in dims and dims[1] == ds:
        Z = complement
    else:
        cl = stable_subspace(sys, norms, 1, opts.theta, cocycle)
        if cl.stable_dim != ds:
            raise SpectralGapError("[classification] stable dimension at n=1 disagrees")
        Z = cl.complement
    if Z.shape[1] != d - ds:
        raise ConfigurationError("Z dimension does not match the unstable dimension")

    try:
        S, U, P = _build_splitting(sys, Z, ds)
    except PolyDichError as exc:
        raise type(exc)(f"[splitting] {exc}") from exc
    cert = DichotomyCertificate(sys, S, U, P, Z)
    cert.growth = growth
    cert.grid.update(theta=opts.theta, classified_n=[int(n) for n in grid_n],
                     dissent=sorted(set(dissent)), slopes=scores, truncated=True,
                     norms=norms.to_dict())

    B = np.concatenate([np.stack(S), np.stack(U)], axis=2)
    sig = np.linalg.svd(B, compute_uv=False)[:, -1] if d else np.ones(N)
    cert.residuals["transversality_min_sigma"] = float(sig.min())
    cert.residuals["equivariance"] = verify_equivariance(cert, sys)
    idem = np.matmul(P, P) - P
    cert.residuals["idempotence"] = float(np.abs(idem).max())
    cert.constants.update(M=growth.M, a=growth.a, K=growth.K, b=growth.b)
    cert.residuals["bounded"] = growth.bounded
    cert.residuals["growth_witness"] = growth.witness
    cert.residuals["one_step_growth_exponent"] = growth.growth_exponent

    rate = nonuni = None
    try:
        rate = fit_constants(sys, norms, cert, cocycle)
        cert.constants.update(D=rate.D, **{"lambda": rate.lam})
        cert.residuals["d1_d2_max_violation"] = rate.max_violation
    except NoDecayError as exc:
        cert.errors.append(f"fit_constants: {exc}")
    try:
        nonuni = fit_nonuniform_constants(sys, cert, norms.base, cocycle)
        cert.constants.update(D_nonuniform=nonuni.D, lambda_nonuniform=nonuni.lam,
                              epsilon_nonuniform=nonuni.eps)
    except NoDecayError as exc:
        cert.errors.append(f"fit_nonuniform_constants: {exc}")
    eps = max(nonuni.eps if nonuni else 0.0, growth.eps)
    cert.constants.update(epsilon=eps, epsilon_npg=growth.eps)

    for k in range(N):
        pair = SubspacePair(k + 1, S[k], U[k])
        g = gamma(pair, norms, k + 1)
        cert.gamma[k] = g.gamma
        cert.proj_norms[k] = operator_norm(norms, P[k], k + 1, k + 1)
    cert.residuals["max_proj_norm"] = float(np.max(cert.proj_norms))
    cert.residuals["min_gamma"] = float(np.min(cert.gamma))
    cert.residuals["proj_bound_slack"] = float(np.min(2.0 / cert.gamma - cert.proj_norms))

    splitting_ok = (
        sig.min() > TRANSVERSALITY_TOL
        and cert.residuals["equivariance"] <= EQUIVARIANCE_TOL
    )
    if rate is not None:
        N0, c = threshold_scale(rate.D, rate.lam, max(growth.M, 1e-300), growth.a)
        cert.threshold_scale = N0
        cert.residuals["gamma_lower_bound"] = c
        cert.residuals["gamma_lower_ok"] = bool(np.all(cert.gamma >= c - 1e-9))
        # sup of A(m, n) restricted to X(n): the uniform stable bound L
        cert.residuals["L_fitted"] = _stable_sup(cocycle, S)

    if opts.admissibility and splitting_ok:
        try:
            T = TZOperator(sys, Z, norms)
            rep = invertibility_report(T, cert, probes=opts.probes, seed=opts.seed)
            cert.residuals["invertible"] = rep.invertible
            cert.residuals["inv_norm_upper"] = rep.inv_norm_upper
            cert.residuals["inv_norm_lower"] = rep.inv_norm_lower
            cert.residuals["conditioning"] = rep.conditioning
            if rep.invertible and math.isfinite(rep.inv_norm_upper):
                _proof_route(cert, growth, rep.inv_norm_upper)
        except PolyDichError as exc:
            cert.errors.append(f"admissibility: {exc}")

    dich = bool(splitting_ok and rate is not None and growth.bounded)
    cert.flags["dichotomy"] = dich
    cert.flags["contraction"] = dich and cert.unstable_dim == 0
    cert.flags["expansion"] = dich and cert.stable_dim == 0
    cert.flags["strong"] = bool(splitting_ok and nonuni is not None and growth.bounded)
    if not growth.bounded:
        cert.errors.append(
            f"growth bound: one-step norms unbounded (witness n={growth.witness})"
        )
    return cert


def _stable_sup(cocycle, S):
    """``sup_{m >= n} ||A(m, n)|_{X(n)}||`` over the horizon (Euclidean)."""
    tab = cocycle.table()
    N = len(S)
    best = 0.0
    if S[0].shape[1] == 0:
        return 0.0
    for n in range(1, N + 1):
        imgs = tab[n - 1 :, n - 1] @ S[n - 1]
        best = max(best, float(np.linalg.norm(imgs, 2, axis=(1, 2)).max()))
    return best


def _proof_route(cert, growth, inv_norm):
    """Constants of the constructive argument: ``L``, ``N0``, ``D = L e``,
    ``lam = 1 / log N0``."""
    M, a = growth.M, growth.a
    L = max(M * 2 ** a, M * 2 ** (a + 1) * inv_norm)
    log_N0 = 1.0 + math.e * L * inv_norm
    N0 = math.ceil(math.exp(log_N0)) if log_N0 < 700 else math.inf
    cert.constants.update(L_proof=L, D_proof=L * math.e, lambda_proof=1.0 / log_N0)
    cert.residuals["L_bound"] = L
    cert.residuals["log_N0_proof"] = log_N0
    cert.residuals["N0_proof"] = N0 if math.isfinite(N0) else math.exp(min(log_N0, 700.0))
    # several thresholds appear along the argument; keep the largest
    cert.residuals["N0_gamma"] = cert.threshold_scale
    cert.threshold_scale = max(cert.threshold_scale or 0, cert.residuals["N0_proof"])


def check_contraction(sys, norms=None, probes=32, seed=0):
    """Operational contraction test: bounded growth and bounded outputs of
    ``x_n = sum_{k <= n} A(n,k) y_k / k`` on random ``y`` in ``Y_0``."""
    from polydich.admissibility import green_solve_contraction_array

    norms = norms or NormSequence.base_norm()
    growth = fit_growth_bound(sys, norms)
    evidence = {"bounded": growth.bounded, "witness": growth.witness}
    rng = np.random.default_rng(seed)
    N, d = sys.horizon, sys.dimension
    Y = rng.standard_normal((probes, N, d))
    Y /= np.linalg.norm(Y, axis=2, keepdims=True)
    Y[:, 0] = 0.0
    X = green_solve_contraction_array(sys, Y)
    ratio = norms.sequence_sup(X) / norms.sequence_sup(Y)
    evidence["max_ratio"] = float(ratio.max())
    bound = None
    try:
        cert = certify(sys, norms, CertifyOptions(admissibility=False))
        if cert.flags["contraction"]:
            lam = min(cert.constants["lambda"], 1.0 - 1e-9)
            bound = cert.constants["D"] * (1.0 + 1.0 / lam)
    except PolyDichError as exc:
        evidence["certify_error"] = str(exc)
    if bound is not None:
        evidence["bound"] = bound
        ok = bool(growth.bounded and ratio.max() <= bound * (1 + 1e-9))
    else:
        # no constants: compare sup over the first half with the full horizon
        half = np.array([norms.sequence_sup(x[: N // 2]) for x in X])
        full = np.array([norms.sequence_sup(x) for x in X])
        drift = float(np.max(full - half) / max(float(np.max(half)), 1e-300))
        evidence["horizon_drift"] = drift
        ok = bool(growth.bounded and drift <= 0.05)
    evidence["contraction"] = ok
    return ok, evidence


def check_expansion(sys, norms=None, probes=32, seed=0):
    """Bounded growth and invertibility of ``T_Z`` with ``Z`` the whole space."""
    from polydich.admissibility import TZOperator, invertibility_report

    norms = norms or NormSequence.base_norm()
    growth = fit_growth_bound(sys, norms)
    T = TZOperator(sys, np.eye(sys.dimension), norms)
    rep = invertibility_report(T, None, probes=probes, seed=seed)
    ok = bool(growth.bounded and rep.invertible)
    return ok, {"bounded": growth.bounded, "invertible": rep.invertible,
                "inv_norm_upper": rep.inv_norm_upper, "diagnostic": rep.diagnostic,
                "expansion": ok}
