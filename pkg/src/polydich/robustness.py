"""Persistence of strong nonuniform polynomial dichotomies under small
perturbations ``||A_m - B_m|| <= c / (m + 1)^(2 + eps)``.

The argument transfers invertibility of ``T_Z`` to the perturbed operator
through a Neumann series (``||T_Z - T~_Z|| <= cC``) and controls growth of
the perturbed cocycle by a discrete Gronwall estimate.  Here every step is
evaluated numerically on the horizon.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from polydich.admissibility import TZOperator, invertibility_report
from polydich.dichotomy import CertifyOptions, _geom_ints, certify, fit_growth_bound
from polydich.errors import BudgetError, ConfigurationError, PolyDichError
from polydich.norms import NormSequence, check_norm_equivalence, sphere_samples
from polydich.system import Cocycle

__all__ = [
    "PerturbationSpec",
    "budget",
    "perturb",
    "operator_gap",
    "smallness_condition",
    "gronwall_growth_check",
    "gronwall_product_check",
    "robustness_experiment",
    "RobustnessOptions",
]

MODES = ("random-direction", "adversarial-aligned", "explicit")
REGIMES = ("strong", "weak")


@dataclass
class PerturbationSpec:
    c: float
    epsilon: float = 0.0
    mode: str = "random-direction"
    exponent_regime: str = "strong"
    seed: int = 0
    explicit: np.ndarray = None

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ConfigurationError("budget constant c must be >= 0")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ConfigurationError("epsilon must be >= 0")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.exponent_regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.exponent_regime!r}")

    @property
    def exponent(self):
        return (2.0 if self.exponent_regime == "strong" else 1.0) + self.epsilon


def budget(spec, m):
    """``c / (m + 1)^(2 + eps)`` (strong) or ``c / (m + 1)^(1 + eps)`` (weak)."""
    return spec.c / (np.asarray(m, dtype=float) + 1.0) ** spec.exponent


def perturb(sys, spec, cert=None):
    """Perturbed sequence ``B_m = A_m + E_m`` with ``||E_m||`` within budget.

    ``random-direction`` saturates the budget with a normalized Gaussian
    matrix; ``adversarial-aligned`` maps the leading stable direction at m
    into the unstable direction at m + 1 (needs ``cert``); ``explicit``
    validates ``spec.explicit`` against the budget.
    """
    N, d = sys.horizon, sys.dimension
    m = np.arange(1, N)
    bud = budget(spec, m)
    if spec.c == 0 and spec.mode != "explicit":
        return sys
    if spec.mode == "random-direction":
        rng = np.random.default_rng(spec.seed)
        G = rng.standard_normal((N - 1, d, d))
        G /= np.linalg.norm(G, 2, axis=(1, 2))[:, None, None]
        E = G * bud[:, None, None]
    elif spec.mode == "adversarial-aligned":
        if cert is None:
            raise ConfigurationError("adversarial-aligned mode needs a certificate")
        E = np.empty((N - 1, d, d))
        sign = np.random.default_rng(spec.seed).choice([-1.0, 1.0])
        for k in m:
            if cert.stable_dim and cert.unstable_dim:
                s = cert.stable_basis(k)[:, 0]
                u = cert.unstable_basis(k + 1)[:, 0]
            else:
                U, _, Vt = np.linalg.svd(sys.A(k))
                u, s = U[:, 0], Vt[0]
            E[k - 1] = sign * bud[k - 1] * np.outer(u, s)
    else:
        E = np.asarray(spec.explicit, dtype=float)
        if E.shape != (N - 1, d, d):
            raise ConfigurationError(f"explicit perturbation must have shape {(N - 1, d, d)}")
        size = np.linalg.norm(E, 2, axis=(1, 2))
        excess = size - bud * (1 + 1e-12)
        if np.any(excess > 0):
            worst = int(np.argmax(excess / np.maximum(bud, 1e-300))) + 1
            raise BudgetError(
                f"perturbation exceeds the budget at m={worst} "
                f"({size[worst - 1]:.6g} > {bud[worst - 1]:.6g})",
                worst,
            )
    prov = dict(sys.provenance, perturbation={
        "c": spec.c, "epsilon": spec.epsilon, "mode": spec.mode,
        "regime": spec.exponent_regime, "seed": spec.seed,
    })
    return sys.replace_matrices(sys.matrices + E, provenance=prov)


def operator_gap(sysA, sysB, norms, Z, C, c, regime="strong", probes=64, seed=0):
    """Bound ``||T_Z - T~_Z|| <= cC`` and its empirical counterpart.

    ``empirical_gap`` maximizes ``||(T_Z - T~_Z)x||_inf / ||x||_{T_Z}`` over
    random sequences and single-entry sequences aligned with the worst
    direction of ``A_m - B_m``; the pointwise estimate
    ``||(A_m - B_m)x||_{m+1} <= cC/(m+1) ||x||_m`` (``cC`` in the weak regime)
    is checked on the same directions.
    """
    if C is None or c is None:
        raise ConfigurationError("operator_gap needs the norm constant C and the budget c")
    if (sysA.horizon, sysA.dimension) != (sysB.horizon, sysB.dimension):
        raise ConfigurationError("systems must share dimension and horizon")
    N, d = sysA.horizon, sysA.dimension
    gap_bound = float(c * C)
    E = sysA.matrices - sysB.matrices
    if not np.any(E):
        return {"gap_bound": gap_bound, "empirical_gap": 0.0, "pointwise_ok": True,
                "pointwise_worst": 0.0, "dominated": True}
    T = TZOperator(sysA, Z, norms)
    rng = np.random.default_rng(seed)
    Zb = T.Z

    def diff(X):
        out = np.zeros_like(X)
        out[..., 1:, :] = np.arange(2, N + 1, dtype=float)[:, None] * np.einsum(
            "mij,...mj->...mi", E, X[..., :-1, :]
        )
        return out

    X = rng.standard_normal((probes, N, d))
    X[:, 0] = (X[:, 0] @ Zb) @ Zb.T
    graph = norms.sequence_sup(X) + norms.sequence_sup(T.apply(X))
    emp = float(np.max(norms.sequence_sup(diff(X)) / graph))

    dirs = sphere_samples(d, 32, seed)
    pw_worst = 0.0
    spikes = np.zeros((N - 1, N, d))
    factor = (lambda m: c * C / (m + 1)) if regime == "strong" else (lambda m: c * C)
    for m in range(1, N):
        V = dirs if m > 1 else (dirs @ Zb) @ Zb.T
        den = norms.batch(m, V)
        keep = den > 0
        if not np.any(keep):
            continue
        num = norms.batch(m + 1, V[keep] @ E[m - 1].T)
        r = num / den[keep]
        pw_worst = max(pw_worst, float(np.max(r) / factor(m)))
        spikes[m - 1, m - 1] = V[keep][int(np.argmax(r))]
    graph = norms.sequence_sup(spikes) + norms.sequence_sup(T.apply(spikes))
    live = graph > 0
    if np.any(live):
        emp = max(emp, float(np.max(norms.sequence_sup(diff(spikes[live])) / graph[live])))
    return {
        "gap_bound": gap_bound,
        "empirical_gap": emp,
        "pointwise_ok": bool(pw_worst <= 1 + 1e-9),
        "pointwise_worst": pw_worst,
        "dominated": bool(emp <= gap_bound * (1 + 1e-9)),
    }


def smallness_condition(gap_bound, inv_norm_upper):
    """Neumann criterion ``gap_bound * ||T_Z^{-1}|| < 1`` (an estimate: the
    inverse norm is itself estimated)."""
    prod = float(gap_bound) * float(inv_norm_upper)
    return {"ok": bool(prod < 1.0), "margin": 1.0 - prod, "estimate": True}


def gronwall_product_check(K, pairs):
    """``prod_{j=n}^{m-1} (1 + K/(j+1)) <= exp(K (1 + log(m/n)))`` on pairs."""
    worst = -math.inf
    for m, n in pairs:
        lhs = math.fsum(math.log1p(K / (j + 1)) for j in range(n, m))
        rhs = K * (1.0 + math.log(m / n))
        worst = max(worst, lhs - rhs)
    return {"ok": bool(worst <= 1e-12), "worst_log_slack": -worst if pairs else 0.0}


def gronwall_growth_check(sysA, sysB, norms, consts, points=10, directions=8, seed=0):
    """Check ``||B(m,n)x||_m <= M e^{MCc} (m/n)^{a+MCc} ||x||_n`` on a grid.

    ``consts`` holds ``M, a, C, c``.  Returns the worst ratio to the bound and
    the triple where it occurs.
    """
    M, a, C, c = (float(consts[k]) for k in ("M", "a", "C", "c"))
    K = M * C * c
    N, d = sysB.horizon, sysB.dimension
    top = norms.eval_horizon or N
    cocycle = Cocycle(sysB)
    X = sphere_samples(d, directions, seed)
    worst, triple = 0.0, None
    pairs = []
    for n in _geom_ints(1, top, points):
        n = int(n)
        targets = _geom_ints(n, top, points)
        stack = cocycle.forward_stack(n, int(targets[-1]))
        den = norms.batch(n, X)
        for m in targets:
            m = int(m)
            pairs.append((m, n))
            num = norms.batch(m, X @ stack[m - n].T)
            bound = M * math.exp(K) * (m / n) ** (a + K)
            r = num / (bound * den)
            i = int(np.argmax(r))
            if r[i] > worst:
                worst, triple = float(r[i]), (m, n, X[i].tolist())
    prod = gronwall_product_check(K, pairs)
    ok = bool(worst <= 1 + 1e-9)
    out = {"M": M, "a": a, "C": C, "c": c, "exponent": a + K, "prefactor": M * math.exp(K),
           "ok": ok, "worst_ratio": worst, "product_ok": prod["ok"],
           "pairs": len(pairs)}
    if not ok:
        out["worst"] = {"m": triple[0], "n": triple[1], "x": triple[2]}
        out["hint"] = "fitted (M, a) too tight; refit with a margin"
    return out


@dataclass
class RobustnessOptions:
    seeds: list = field(default_factory=lambda: list(range(32)))
    threads: int = None
    probes: int = 32
    c_from_product: float = None


def _threads(opts):
    if opts.threads:
        return max(1, int(opts.threads))
    env = os.environ.get("POLYDICH_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _cert_summary(cert):
    k = cert.constants
    return {"dichotomy": cert.flags["dichotomy"], "strong": cert.flags["strong"],
            "D": k.get("D"), "lambda": k.get("lambda"), "epsilon": k.get("epsilon")}


def robustness_experiment(sys, spec, opts=None):
    """Certify, build adapted norms, perturb for each seed, and check the gap,
    the smallness criterion, re-certification and the Gronwall bound.

    If ``opts.c_from_product`` is set, ``c`` is chosen so that
    ``cC * inv_norm_upper`` equals it.
    """
    opts = opts or RobustnessOptions()
    before = certify(sys, opts=CertifyOptions(probes=opts.probes))
    if not before.flags["strong"]:
        raise ConfigurationError(
            "system is not certified strong-nonuniform; errors: " + "; ".join(before.errors)
        )
    cocycle = Cocycle(sys)
    k = before.constants
    norms = NormSequence.adapted_strong(cocycle, before, k["lambda_nonuniform"], k["b"])
    N, d = sys.horizon, sys.dimension
    eq = check_norm_equivalence(norms, sphere_samples(d, 64, 0), np.arange(1, N + 1))
    C, eps_norms = eq.C_hat, eq.eps_hat
    eps = max(float(k.get("epsilon", 0.0)), eps_norms)
    inv = invertibility_report(TZOperator(sys, before.Z, norms), before, probes=opts.probes)
    if not inv.invertible:
        raise PolyDichError(f"T_Z not invertible in the adapted norms: {inv.diagnostic}")
    growth = fit_growth_bound(sys, norms, cocycle)
    M, a = growth.M, growth.a

    c = spec.c
    if opts.c_from_product is not None:
        c = float(opts.c_from_product) / (C * inv.inv_norm_upper)
    spec = PerturbationSpec(c, eps, spec.mode, spec.exponent_regime, spec.seed, spec.explicit)
    small = smallness_condition(c * C, inv.inv_norm_upper)

    def one(seed):
        sp = PerturbationSpec(c, eps, spec.mode, spec.exponent_regime, seed, spec.explicit)
        B = perturb(sys, sp, before)
        gap = operator_gap(sys, B, norms, before.Z, C, c, spec.exponent_regime, seed=seed)
        row = {"seed": int(seed), "empirical_gap": gap["empirical_gap"],
               "gap_dominated": gap["dominated"], "pointwise_ok": gap["pointwise_ok"]}
        try:
            full = seed == min(opts.seeds)
            after = certify(B, opts=CertifyOptions(probes=opts.probes, admissibility=full))
            row.update(_cert_summary(after))
        except PolyDichError as exc:
            after = None
            row.update(dichotomy=False, strong=False, error=str(exc))
        if spec.exponent_regime == "strong":
            gw = gronwall_growth_check(sys, B, norms, {"M": M, "a": a, "C": C, "c": c}, seed=seed)
            row["gronwall_ok"] = gw["ok"] and gw["product_ok"]
            row["a_hat"] = fit_growth_bound(B, norms, refine=False).a
            row["a_bound"] = a + M * C * c
        else:
            gw = None
        return row, after, gw

    with ThreadPoolExecutor(max_workers=_threads(opts)) as pool:
        results = list(pool.map(one, sorted(opts.seeds)))
    rows = [r for r, _, _ in results]
    first_after = results[0][1] if results else None
    first_gw = results[0][2] if results else None
    regime = spec.exponent_regime
    report = {
        "c": c,
        "regime": regime,
        "epsilon": eps,
        "C": C,
        "epsilon_norms": eps_norms,
        "inv_norm_upper": inv.inv_norm_upper,
        "gap_bound": c * C,
        "empirical_gap": max((r["empirical_gap"] for r in rows), default=0.0),
        "smallness_ok": small["ok"],
        "smallness_margin": small["margin"],
        "before": before.to_json(),
        "after": first_after.to_json() if first_after is not None else None,
        "gronwall": first_gw if first_gw is not None else {"applicable": False},
        "seeds": rows,
    }
    if regime == "strong":
        report["conclusion"] = {
            "asserted": "strong",
            "all_strong": all(r.get("strong") for r in rows),
            "gronwall_ok": all(r.get("gronwall_ok") for r in rows),
        }
    else:
        report["conclusion"] = {
            "asserted": "dichotomy",
            "all_dichotomy": all(r.get("dichotomy") for r in rows),
            "note": "the weaker budget only yields a nonuniform dichotomy; the strong "
                    "flag is reported but not asserted",
        }
    report["gronwall"].setdefault("applicable", regime == "strong")
    return report
