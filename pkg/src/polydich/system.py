"""Operator sequences, generators and the linear cocycle.

Time indices are 1-based throughout: an :class:`OperatorSequence` of horizon
``N`` stores ``A_1, ..., A_{N-1}`` and the cocycle ``A(m, n)`` is defined for
``1 <= n <= m <= N``.
"""

import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from polydich.errors import (
    ConfigurationError,
    IndexRangeError,
    UnstableRestrictionError,
)
from polydich.serialize import dumps_canonical

__all__ = [
    "OperatorSequence",
    "Cocycle",
    "cocycle",
    "cocycle_on_unstable",
    "make_generator",
    "load_system",
    "save_system",
    "system_from_dict",
    "system_to_dict",
    "GENERATOR_KINDS",
]

GENERATOR_KINDS = (
    "diagonal-poly",
    "triangular-poly",
    "block-lyapunov",
    "power2-counterexample",
    "nonuniform-diagonal",
    "explicit-file",
)


@dataclass(frozen=True)
class OperatorSequence:
    """Finite truncation ``A_1, ..., A_{N-1}`` of a sequence of d x d matrices."""

    dimension: int
    horizon: int
    matrices: np.ndarray
    provenance: dict = field(default_factory=lambda: {"kind": "explicit"})

    def __post_init__(self):
        mats = np.array(self.matrices, dtype=float)
        d, N = self.dimension, self.horizon
        if d < 1 or N < 2:
            raise ConfigurationError("need dimension >= 1 and horizon >= 2")
        if mats.shape != (N - 1, d, d):
            raise ConfigurationError(
                f"expected {N - 1} matrices of shape {d}x{d}, got {mats.shape}"
            )
        if not np.all(np.isfinite(mats)):
            raise ConfigurationError("matrices must have finite entries")
        mats.setflags(write=False)
        object.__setattr__(self, "matrices", mats)

    def A(self, m):
        if not 1 <= m <= self.horizon - 1:
            raise IndexRangeError(f"A_{m} is outside 1..{self.horizon - 1}")
        return self.matrices[m - 1]

    def __len__(self):
        return self.horizon - 1

    def replace_matrices(self, matrices, provenance=None):
        return OperatorSequence(
            self.dimension,
            self.horizon,
            matrices,
            provenance if provenance is not None else {"kind": "explicit"},
        )


class Cocycle:
    """Memoized evaluator of ``A(m, n) = A_{m-1} ... A_n``.

    Products are accumulated left-associated from ``n`` upward.  Only columns
    ``n`` on the dyadic grid {1, 2, 4, ...} are cached (as the full forward
    stack ``A(k, n)``, k = n..N); everything else is recomputed.
    """

    def __init__(self, seq):
        self.seq = seq
        self._stacks = {}
        self._lock = threading.Lock()
        self._table = None

    @property
    def dimension(self):
        return self.seq.dimension

    @property
    def horizon(self):
        return self.seq.horizon

    def _check(self, m, n):
        N = self.horizon
        if not (1 <= n <= N and 1 <= m <= N):
            raise IndexRangeError(f"index pair ({m}, {n}) outside 1..{N}")
        if m < n:
            raise IndexRangeError(
                f"A({m}, {n}) with m < n lives on the unstable subspace; "
                "use cocycle_on_unstable"
            )

    def _accumulate(self, n, m_max):
        d = self.dimension
        out = np.empty((m_max - n + 1, d, d))
        cur = np.eye(d)
        out[0] = cur
        mats = self.seq.matrices
        for j in range(n, m_max):
            cur = mats[j - 1] @ cur
            out[j - n + 1] = cur
        return out

    def forward_stack(self, n, m_max=None):
        """Array whose k-th slice is ``A(n + k, n)`` for k = 0..m_max-n."""
        m_max = self.horizon if m_max is None else m_max
        self._check(m_max, n)
        if n & (n - 1) == 0:
            stack = self._stacks.get(n)
            if stack is None:
                stack = self._accumulate(n, self.horizon)
                stack.setflags(write=False)
                with self._lock:
                    stack = self._stacks.setdefault(n, stack)
            return stack[: m_max - n + 1]
        return self._accumulate(n, m_max)

    def __call__(self, m, n):
        self._check(m, n)
        if m == n:
            return np.eye(self.dimension)
        return self.forward_stack(n, m)[m - n].copy()

    def table(self):
        """All pairs at once: ``table()[m-1, n-1] = A(m, n)`` for m >= n, zero above.

        Built by sweeping the offset m - n, which keeps Python-level loops at
        O(N).  Memory is O(N^2 d^2).
        """
        if self._table is not None:
            return self._table
        N, d = self.horizon, self.dimension
        mats = self.seq.matrices
        tab = np.zeros((N, N, d, d))
        idx = np.arange(N)
        tab[idx, idx] = np.eye(d)
        prev = np.broadcast_to(np.eye(d), (N, d, d))
        for j in range(1, N):
            # A(n + j, n) = A_{n+j-1} A(n + j - 1, n), n = 1..N-j
            cur = np.matmul(mats[j - 1 : N - 1], prev[: N - j])
            tab[idx[: N - j] + j, idx[: N - j]] = cur
            prev = cur
        tab.setflags(write=False)
        with self._lock:
            if self._table is None:
                self._table = tab
        return self._table


def cocycle(c, m, n):
    """``A(m, n)`` for ``n <= m``; raises for ``m < n``."""
    return c(m, n)


def cocycle_on_unstable(c, m, n, cert):
    """Coordinate matrix of ``A(m, n)`` restricted to ``Z(n)`` for ``m <= n``.

    Returns the d_u x d_u inverse of ``U_n^T A(n, m) U_m`` where ``U_k`` are the
    orthonormal unstable bases held by ``cert``; it maps Z(n)-coordinates to
    Z(m)-coordinates.
    """
    if m > n:
        raise IndexRangeError("cocycle_on_unstable needs m <= n")
    Um = cert.unstable_basis(m)
    Un = cert.unstable_basis(n)
    if Um.shape[1] != Un.shape[1]:
        raise UnstableRestrictionError("unstable dimensions differ between times")
    du = Um.shape[1]
    if m == n:
        return np.eye(du)
    R = Un.T @ c(n, m) @ Um
    s = np.linalg.svd(R, compute_uv=False)
    if du and (s[-1] <= 1e-12 * max(1.0, s[0])):
        raise UnstableRestrictionError(
            f"unstable restriction not invertible on [{m}, {n}] (sigma_min={s[-1]:.3g})"
        )
    return np.linalg.inv(R)


# --- generators -------------------------------------------------------------


def _is_power2(k):
    # 2^l with l >= 1; 1 = 2^0 is excluded
    return k >= 2 and (k & (k - 1)) == 0


def _positive(params, key, default=None):
    val = params.get(key, default)
    if val is None:
        raise ConfigurationError(f"missing parameter {key!r}")
    val = float(val)
    if not val > 0:
        raise ConfigurationError(f"parameter {key!r} must be positive, got {val}")
    return val


def _diagonal_poly(params, d, N):
    lam = _positive(params, "lambda")
    lam_u = _positive(params, "lambda_u", lam)
    k = int(params.get("stable_dim", (d + 1) // 2))
    if not 0 <= k <= d:
        raise ConfigurationError("stable_dim must lie in 0..d")
    m = np.arange(1, N, dtype=float)
    diag = np.empty((N - 1, d))
    diag[:, :k] = ((m / (m + 1)) ** lam)[:, None]
    diag[:, k:] = (((m + 1) / m) ** lam_u)[:, None]
    return _diag_stack(diag)


def _diag_stack(diag):
    n, d = diag.shape
    out = np.zeros((n, d, d))
    out[:, np.arange(d), np.arange(d)] = diag
    return out


def _triangular_poly(params, d, N):
    exps = params.get("exponents")
    if exps is None or len(exps) != d:
        raise ConfigurationError("triangular-poly needs 'exponents' of length d")
    exps = np.asarray(exps, dtype=float)
    if np.any(exps == 0):
        raise ConfigurationError("exponents must be nonzero (no neutral directions)")
    coupling = float(params.get("coupling", 0.1))
    if coupling < 0:
        raise ConfigurationError("coupling must be nonnegative")
    seed = int(params.get("seed", 0))
    m = np.arange(1, N, dtype=float)
    mats = _diag_stack(((m + 1) / m)[:, None] ** exps[None, :])
    iu = np.triu_indices(d, 1)
    for i in range(N - 1):
        rng = np.random.default_rng([seed, i + 1])
        mats[i][iu] = coupling * rng.uniform(-1.0, 1.0, size=len(iu[0])) / (i + 2)
    return mats


def _nonuniform_diagonal(params, d, N):
    lam = _positive(params, "lambda")
    lam_u = _positive(params, "lambda_u", lam)
    eps = float(params.get("epsilon", 0.0))
    if eps < 0:
        raise ConfigurationError("epsilon must be >= 0")
    k = int(params.get("stable_dim", (d + 1) // 2))
    if not 0 <= k <= d:
        raise ConfigurationError("stable_dim must lie in 0..d")
    period = float(params.get("period", 4.0))
    if period <= 0:
        raise ConfigurationError("period must be > 0")
    idx = np.arange(1, N + 1)
    # weight w(j) = j^(-eps * phi(j)) with phi log-periodic in j, so phi = 1 on
    # the lacunary set {2^(period * l)} and phi = 0 half a period later; stable
    # entries carry w(m+1)/w(m), making the stable cocycle (n/m)^lam w(m)/w(n)
    # while one-step norms stay bounded
    phi = 0.5 * (1.0 + np.cos(2.0 * math.pi * np.log2(idx) / period))
    logw = -eps * np.log(idx) * phi
    m = idx[:-1].astype(float)
    diag = np.empty((N - 1, d))
    diag[:, :k] = ((m / (m + 1)) ** lam * np.exp(logw[1:] - logw[:-1]))[:, None]
    diag[:, k:] = (((m + 1) / m) ** lam_u)[:, None]
    return _diag_stack(diag)


def _power2(params, d, N):
    if d != 1:
        raise ConfigurationError("power2-counterexample is scalar (d = 1)")
    vals = [float(m) if _is_power2(m) else 0.0 for m in range(1, N)]
    return np.array(vals).reshape(N - 1, 1, 1)


def _block(params, d, N):
    blocks = []
    for role in ("stable", "unstable"):
        sub = params.get(role)
        if sub is None:
            raise ConfigurationError(f"block-lyapunov needs a {role!r} sub-generator")
        sd = int(sub.get("dimension", 1))
        seq = make_generator(sub["kind"], sub.get("params", {}), sd, N)
        blocks.append(seq.matrices)
    k = blocks[0].shape[1]
    if k + blocks[1].shape[1] != d:
        raise ConfigurationError("block dimensions do not add up to d")
    mats = np.zeros((N - 1, d, d))
    mats[:, :k, :k] = blocks[0]
    mats[:, k:, k:] = blocks[1]
    return mats


def _explicit_file(params, d, N):
    path = params.get("path")
    if path is None:
        raise ConfigurationError("explicit-file needs 'path'")
    seq = load_system(path)
    if seq.dimension != d or seq.horizon < N:
        raise ConfigurationError("file does not match requested dimension/horizon")
    return seq.matrices[: N - 1]


_BUILDERS = {
    "diagonal-poly": _diagonal_poly,
    "triangular-poly": _triangular_poly,
    "block-lyapunov": _block,
    "power2-counterexample": _power2,
    "nonuniform-diagonal": _nonuniform_diagonal,
    "explicit-file": _explicit_file,
}


def make_generator(kind, params, d, N):
    """Build a deterministic :class:`OperatorSequence` from a generator descriptor."""
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown generator kind {kind!r}") from None
    params = dict(params or {})
    mats = builder(params, int(d), int(N))
    return OperatorSequence(int(d), int(N), mats, {"kind": kind, "params": params})


# --- system spec files ------------------------------------------------------


def system_from_dict(spec):
    if not isinstance(spec, dict):
        raise ConfigurationError("system spec must be a JSON object")
    unknown = set(spec) - {"dimension", "horizon", "generator", "matrices"}
    if unknown:
        raise ConfigurationError(f"unknown system spec fields: {sorted(unknown)}")
    try:
        d = int(spec["dimension"])
        N = int(spec["horizon"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"system spec needs dimension and horizon: {exc}")
    if "generator" in spec:
        gen = spec["generator"]
        return make_generator(gen["kind"], gen.get("params", {}), d, N)
    if "matrices" in spec:
        flat = np.asarray(spec["matrices"], dtype=float)
        return OperatorSequence(d, N, flat.reshape(-1, d, d))
    raise ConfigurationError("system spec needs 'generator' or 'matrices'")


def system_to_dict(seq, explicit=False):
    prov = seq.provenance
    if not explicit and prov.get("kind") in _BUILDERS and prov["kind"] != "explicit-file":
        return {
            "dimension": seq.dimension,
            "horizon": seq.horizon,
            "generator": {"kind": prov["kind"], "params": prov.get("params", {})},
        }
    return {
        "dimension": seq.dimension,
        "horizon": seq.horizon,
        "matrices": [m.reshape(-1).tolist() for m in seq.matrices],
    }


def load_system(path):
    with open(path) as fh:
        spec = json.load(fh)
    return system_from_dict(spec)


def save_system(seq, path, explicit=False):
    with open(path, "w") as fh:
        fh.write(dumps_canonical(system_to_dict(seq, explicit=explicit)))
