"""Time-indexed norm families.

A :class:`NormSequence` evaluates ``||x||_n``.  Besides the plain base norm and
explicit scalar weights it provides the two adapted constructions that turn a
nonuniform polynomial dichotomy into a uniform one:

* ``adapted-nonuniform``::

      ||x||_n = sup_{m >= n} |A(m,n) P_n x| (m/n)^lam
              + sup_{m <= n} |A(m,n) Q_n x| (n/m)^lam

* ``adapted-strong`` adds ``sup_{m > n} |A(m,n) Q_n x| (m/n)^-b`` to the
  unstable part.

The sups over ``m >= n`` are truncated at ``eval_horizon``; values are then
lower approximations of the infinite sups (see :func:`norm_eval`).
"""

import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from polydich.errors import ConfigurationError

__all__ = [
    "NormSequence",
    "NormValue",
    "EquivalenceReport",
    "norm_eval",
    "check_norm_equivalence",
    "operator_norm",
    "sphere_samples",
    "base_vector_norm",
]

NORM_KINDS = ("base", "explicit-weights", "adapted-nonuniform", "adapted-strong")
BASE_NORMS = ("euclidean", "sup", "one")


def base_vector_norm(X, base="euclidean"):
    """Norm along the last axis."""
    X = np.asarray(X, dtype=float)
    if base == "euclidean":
        return np.sqrt(np.sum(X * X, axis=-1))
    if base == "sup":
        return np.max(np.abs(X), axis=-1)
    if base == "one":
        return np.sum(np.abs(X), axis=-1)
    raise ConfigurationError(f"unknown base norm {base!r}")


def _base_operator_norm(B, base):
    B = np.asarray(B, dtype=float)
    if base == "euclidean":
        return np.linalg.norm(B, ord=2, axis=(-2, -1))
    if base == "sup":
        return np.max(np.sum(np.abs(B), axis=-1), axis=-1)
    if base == "one":
        return np.max(np.sum(np.abs(B), axis=-2), axis=-1)
    raise ConfigurationError(f"unknown base norm {base!r}")


@dataclass(frozen=True)
class NormValue:
    value: float
    truncated: bool


class NormSequence:
    """Immutable family of norms ``||.||_n``, n = 1..N.

    Use the classmethod constructors rather than ``__init__``.
    """

    def __init__(self, kind="base", base="euclidean", weights=None, cocycle=None,
                 cert=None, lam=None, b=None, eval_horizon=None, equivalence=None):
        if kind not in NORM_KINDS:
            raise ConfigurationError(f"unknown norm kind {kind!r}")
        if base not in BASE_NORMS:
            raise ConfigurationError(f"unknown base norm {base!r}")
        self.kind = kind
        self.base = base
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.cocycle = cocycle
        self.cert = cert
        self.lam = lam
        self.b = b
        self.eval_horizon = eval_horizon
        self.equivalence = equivalence
        self.clamped = False
        self._stacks = {}
        self._lock = threading.Lock()
        if self.weights is not None and np.any(self.weights <= 0):
            raise ConfigurationError("weights must be positive")

    # -- constructors ------------------------------------------------------

    @classmethod
    def base_norm(cls, base="euclidean"):
        return cls("base", base)

    @classmethod
    def explicit(cls, weights, base="euclidean"):
        """``||x||_n = weights[n-1] * |x|``."""
        return cls("explicit-weights", base, weights=weights)

    @classmethod
    def adapted_nonuniform(cls, cocycle, cert, lam, eval_horizon=None, base="euclidean"):
        if cert is None:
            raise ConfigurationError("adapted norms need projections (a certificate)")
        H = cocycle.horizon if eval_horizon is None else int(eval_horizon)
        return cls("adapted-nonuniform", base, cocycle=cocycle, cert=cert,
                   lam=float(lam), eval_horizon=min(H, cocycle.horizon))

    @classmethod
    def adapted_strong(cls, cocycle, cert, lam, b, eval_horizon=None, base="euclidean"):
        """Strong construction.  Requires ``lam <= b``; ``lam`` is clamped to ``b``
        otherwise (``clamped`` records it).  A nonpositive ``b`` is replaced by
        ``lam``, which keeps any growth bound valid."""
        if cert is None:
            raise ConfigurationError("adapted norms need projections (a certificate)")
        lam, b = float(lam), float(b)
        clamped = False
        if b <= 0:
            b, clamped = lam, True
        elif lam > b:
            lam, clamped = b, True
        H = cocycle.horizon if eval_horizon is None else int(eval_horizon)
        ns = cls("adapted-strong", base, cocycle=cocycle, cert=cert, lam=lam, b=b,
                 eval_horizon=min(H, cocycle.horizon))
        ns.clamped = clamped
        return ns

    @property
    def adapted(self):
        return self.kind.startswith("adapted")

    def to_dict(self):
        out = {"kind": self.kind, "base": self.base}
        if self.lam is not None:
            out["lambda"] = self.lam
        if self.b is not None:
            out["b"] = self.b
        if self.eval_horizon is not None:
            out["eval_horizon"] = self.eval_horizon
        if self.weights is not None:
            out["weights"] = self.weights.tolist()
        return out

    # -- evaluation --------------------------------------------------------

    def _weighted_stacks(self, n):
        """Matrices whose image norms are maximized inside the adapted norm at n."""
        st = self._stacks.get(n)
        if st is not None:
            return st
        H, lam, cert = self.eval_horizon, self.lam, self.cert
        if n > H:
            raise ConfigurationError(f"index {n} beyond evaluation horizon {H}")
        k_fwd = np.arange(n, H + 1, dtype=float)
        fwd = self.cocycle.forward_stack(n, H) @ cert.P(n)
        fwd = fwd * ((k_fwd / n) ** lam)[:, None, None]
        k_bwd = np.arange(1, n + 1, dtype=float)
        bwd = cert.unstable_transfer(1, n, n) * ((n / k_bwd) ** lam)[:, None, None]
        st = [fwd, bwd]
        if self.kind == "adapted-strong":
            if n < H:
                k_up = np.arange(n + 1, H + 1, dtype=float)
                up = cert.unstable_transfer(n + 1, H, n) * ((k_up / n) ** -self.b)[:, None, None]
            else:
                up = np.zeros((0, self.cocycle.dimension, self.cocycle.dimension))
            st.append(up)
        st = [np.ascontiguousarray(a) for a in st]
        with self._lock:
            st = self._stacks.setdefault(n, st)
        return st

    def batch(self, n, X):
        """Norms ``||x||_n`` of the rows of ``X`` (shape (k, d) or (d,))."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = X[None, :] if single else X
        if self.kind == "base":
            out = base_vector_norm(X2, self.base)
        elif self.kind == "explicit-weights":
            if not 1 <= n <= len(self.weights):
                raise ConfigurationError(f"no weight for index {n}")
            out = self.weights[n - 1] * base_vector_norm(X2, self.base)
        else:
            out = np.zeros(X2.shape[0])
            p, d = X2.shape
            for stack in self._weighted_stacks(n):
                if len(stack):
                    # one GEMM for all images, then per-image norms
                    imgs = (X2 @ stack.reshape(-1, d).T).reshape(p, -1, d)
                    if self.base == "euclidean":
                        sq = np.einsum("pki,pki->pk", imgs, imgs)
                        out = out + np.sqrt(sq.max(axis=1))
                    else:
                        out = out + base_vector_norm(imgs, self.base).max(axis=1)
        return float(out[0]) if single else out

    def __call__(self, n, x):
        return self.batch(n, x)

    def sequence_sup(self, X):
        """``max_m ||x_m||_m`` for X of shape (N, d) or batched (p, N, d)."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 2
        Xb = X[None] if single else X
        N = Xb.shape[1]
        if self.kind == "base":
            vals = base_vector_norm(Xb, self.base).max(axis=1)
        elif self.kind == "explicit-weights":
            vals = (base_vector_norm(Xb, self.base) * self.weights[:N][None, :]).max(axis=1)
        else:
            vals = np.zeros(Xb.shape[0])
            for m in range(1, N + 1):
                vals = np.maximum(vals, self.batch(m, Xb[:, m - 1, :]))
        return float(vals[0]) if single else vals

    def truncated_at(self, n, x, value):
        """Whether the tail beyond the evaluation horizon could exceed ``value``."""
        if not self.adapted:
            return False
        cert, H = self.cert, self.eval_horizon
        consts = getattr(cert, "constants", {}) or {}
        D, lam_c = consts.get("D"), consts.get("lambda")
        if D is None or lam_c is None or not lam_c > self.lam:
            return True
        # stable tail: sup_{k > H} D (k/n)^(lam - lam_c) |x| is attained at k = H
        tail = D * (H / n) ** (self.lam - lam_c) * base_vector_norm(x, self.base)
        if self.kind == "adapted-strong":
            M, a = consts.get("M"), consts.get("a")
            if M is None or a is None or not self.b > a:
                return True
            tail = max(tail, M * (H / n) ** (a - self.b) * base_vector_norm(x, self.base))
        return bool(tail > value)


def norm_eval(ns, n, x):
    """Evaluate ``||x||_n`` and report whether truncation may have cut the sup."""
    value = ns(n, x)
    return NormValue(value, ns.truncated_at(n, x, value))


def sphere_samples(d, count, seed=0, base="euclidean"):
    """Unit vectors: coordinate axes, pairwise diagonals and random directions."""
    rng = np.random.default_rng(seed)
    vecs = [np.eye(d)]
    if d > 1:
        iu = np.triu_indices(d, 1)
        for sgn in (1.0, -1.0):
            V = np.zeros((len(iu[0]), d))
            V[np.arange(len(iu[0])), iu[0]] = 1.0
            V[np.arange(len(iu[0])), iu[1]] = sgn
            vecs.append(V)
    vecs.append(rng.standard_normal((max(count, 1), d)))
    V = np.vstack(vecs)
    return V / base_vector_norm(V, base)[:, None]


@dataclass
class EquivalenceReport:
    C_hat: float
    eps_hat: float
    ok: bool
    ratios: np.ndarray
    indices: np.ndarray
    lower_violation: float


def check_norm_equivalence(ns, samples, indices, epsilon=None):
    """Estimate ``(C, eps)`` with ``|x| <= ||x||_m <= C m^eps |x|`` over samples.

    The exponent is the smallest slope of a line through ``(0, log r_1)`` that
    dominates all ``log r_m`` against ``log m`` (r_m the max ratio at m); pass
    ``epsilon`` to fix it instead.  ``ok`` reports the lower inequality within
    1e-10 relative slack.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    indices = np.asarray(sorted(set(int(i) for i in indices)))
    if not len(samples) or not len(indices):
        raise ConfigurationError("need nonempty samples and indices")
    base = base_vector_norm(samples, ns.base)
    keep = base > 0
    samples, base = samples[keep], base[keep]
    ratios = np.empty(len(indices))
    worst_low = 0.0
    for i, m in enumerate(indices):
        r = ns.batch(int(m), samples) / base
        ratios[i] = r.max()
        worst_low = max(worst_low, float(np.max(1.0 - r)))
    logm = np.log(indices.astype(float))
    if epsilon is None:
        ref, lm0 = math.log(ratios[0]), logm[0]
        slopes = [(math.log(r) - ref) / (lm - lm0) for r, lm in zip(ratios, logm) if lm > lm0]
        eps = max([0.0] + slopes)
    else:
        eps = float(epsilon)
    C = float(np.max(ratios / np.exp(eps * logm)))
    return EquivalenceReport(C, float(eps), worst_low <= 1e-10, ratios, indices, worst_low)


def operator_norm(ns, B, m, n, samples=None, seed=0, refine=True):
    """``sup_x ||B x||_m / ||x||_n``.

    Exact for base and weighted norms; for adapted norms a search over unit
    directions, optionally refined locally (a lower estimate of the sup).
    """
    B = np.asarray(B, dtype=float)
    if ns.kind == "base":
        return float(_base_operator_norm(B, ns.base))
    if ns.kind == "explicit-weights":
        return float(ns.weights[m - 1] / ns.weights[n - 1] * _base_operator_norm(B, ns.base))
    d = B.shape[0]

    def ratio(X):
        X = np.atleast_2d(X)
        den = ns.batch(n, X)
        num = ns.batch(m, X @ B.T)
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)

    if d == 1:
        return float(ratio(np.ones((1, 1)))[0])
    if d == 2:
        k = 361 if samples is None else int(samples)
        th = np.linspace(0.0, math.pi, k)
        X = np.column_stack([np.cos(th), np.sin(th)])
        r = ratio(X)
        i = int(np.argmax(r))
        if not refine:
            return float(r[i])
        res = optimize.minimize_scalar(
            lambda t: -ratio(np.array([math.cos(t), math.sin(t)]))[0],
            bounds=(th[max(i - 1, 0)], th[min(i + 1, k - 1)]), method="bounded",
            options={"xatol": 1e-10},
        )
        return float(max(r[i], -res.fun))
    X = sphere_samples(d, 256 if samples is None else samples, seed)
    r = ratio(X)
    best = float(r.max())
    if not refine:
        return best
    for i in np.argsort(r)[-3:]:
        res = optimize.minimize(lambda v: -ratio(v)[0], X[i], method="Nelder-Mead",
                                options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 400})
        best = max(best, -float(res.fun))
    return best
