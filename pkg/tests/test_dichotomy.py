import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polydich.dichotomy import (
    CertifyOptions,
    DichotomyCertificate,
    SubspacePair,
    certify,
    check_contraction,
    check_expansion,
    fit_constants,
    fit_growth_bound,
    gamma,
    polynomial_lyapunov_exponent,
    propagate_unstable,
    splitting_projection,
    stable_subspace,
    threshold_scale,
)
from polydich.errors import (
    IndexRangeError,
    SpectralGapError,
    TransversalityError,
    UnstableRestrictionError,
)
from polydich.norms import NormSequence, operator_norm
from polydich.oracle import dense_splitting, exhaustive_gamma
from polydich.serialize import dumps_canonical
from polydich.system import Cocycle, OperatorSequence, make_generator


def tri(seed, d=3, N=32, coupling=0.5):
    rng = np.random.default_rng(seed)
    ex = rng.uniform(0.5, 1.4, d) * rng.choice([-1.0, 1.0], d)
    return make_generator("triangular-poly",
                          {"exponents": ex.tolist(), "coupling": coupling, "seed": seed}, d, N)


@given(st.integers(0, 5000))
def test_projections_match_oracle(seed):
    sys_ = tri(seed, N=24)
    cert = certify(sys_, opts=CertifyOptions(admissibility=False))
    P = dense_splitting(sys_.matrices, cert.Z)
    assert np.allclose(cert.projections, P, atol=1e-8)


def test_projection_algebra(cert_tri32, tri32):
    P = cert_tri32.projections
    assert np.abs(P @ P - P).max() < 1e-10
    A = tri32.matrices
    assert np.abs(A @ P[:-1] - P[1:] @ A).max() < 1e-10
    assert cert_tri32.residuals["equivariance"] < 1e-10
    for n in (1, 17, 32):
        assert np.allclose(P[n - 1] @ cert_tri32.stable_basis(n), cert_tri32.stable_basis(n))
        assert np.allclose(P[n - 1] @ cert_tri32.unstable_basis(n), 0, atol=1e-12)


def test_dichotomy_bounds_all_pairs(cert_tri32, tri32):
    D, lam = cert_tri32.constants["D"], cert_tri32.constants["lambda"]
    tab = Cocycle(tri32).table()
    N = tri32.horizon
    for n in range(1, N + 1):
        for m in range(n, N + 1):
            v = np.linalg.norm(tab[m - 1, n - 1] @ cert_tri32.P(n), 2)
            assert v <= D * (m / n) ** -lam * (1 + 1e-9)
    # unstable side, backward in time
    for n in range(1, N + 1):
        back = cert_tri32.unstable_transfer(1, n, n)
        for m in range(1, n + 1):
            v = np.linalg.norm(back[m - 1], 2)
            assert v <= D * (n / m) ** -lam * (1 + 1e-9)


def test_unstable_transfer_inverts_cocycle(cert_tri32, tri32):
    c = Cocycle(tri32)
    back = cert_tri32.unstable_transfer(1, 20, 20)
    for m in (1, 5, 19):
        # A(20, m) (A(m, 20) Q_20) = Q_20
        assert np.allclose(c(20, m) @ back[m - 1], cert_tri32.Q(20), atol=1e-10)


def test_diag_exact_constants(cert_diag128):
    k = cert_diag128.constants
    assert abs(k["lambda"] - 1) < 1e-6 and abs(k["D"] - 1) < 1e-6
    assert cert_diag128.flags["dichotomy"] and cert_diag128.flags["strong"]
    assert not cert_diag128.flags["contraction"] and not cert_diag128.flags["expansion"]
    assert np.allclose(cert_diag128.gamma, math.sqrt(2))


def test_contraction_and_expansion_flags():
    st_ = make_generator("diagonal-poly", {"lambda": 0.8, "stable_dim": 2}, 2, 64)
    un = make_generator("diagonal-poly", {"lambda": 0.8, "stable_dim": 0}, 2, 64)
    assert certify(st_).flags["contraction"]
    assert certify(un).flags["expansion"]
    ok, ev = check_contraction(st_)
    assert ok and ev["max_ratio"] <= ev["bound"]
    ok, ev = check_expansion(un)
    assert ok and ev["invertible"]


def test_power2_not_contraction():
    sys_ = make_generator("power2-counterexample", {}, 1, 256)
    ok, ev = check_contraction(sys_)
    assert not ok and not ev["bounded"]
    g = fit_growth_bound(sys_)
    assert g.witness == 128 and g.growth_exponent > 0.25


def test_spectral_gap_error():
    sys_ = make_generator("diagonal-poly", {"lambda": 0.05}, 2, 64)
    with pytest.raises(SpectralGapError):
        stable_subspace(sys_, theta=0.1)
    with pytest.raises(SpectralGapError):
        certify(sys_)


def test_classification_index_range():
    sys_ = make_generator("diagonal-poly", {"lambda": 1.0}, 2, 16)
    with pytest.raises(IndexRangeError):
        stable_subspace(sys_, n=9)


def test_classification_slopes():
    sys_ = make_generator("diagonal-poly", {"lambda": 0.7, "lambda_u": 1.2}, 2, 256)
    cl = stable_subspace(sys_)
    assert cl.stable_dim == 1
    assert np.allclose(sorted(cl.slopes), [-0.7, 1.2], atol=1e-6)


def test_degenerate_unstable_image():
    mats = np.tile(np.diag([0.5, 0.0]), (7, 1, 1))
    with pytest.raises(UnstableRestrictionError):
        propagate_unstable(OperatorSequence(2, 8, mats), np.array([[0.0], [1.0]]))


def test_transversality_error():
    e = np.array([[1.0], [0.0]])
    with pytest.raises(TransversalityError):
        splitting_projection(SubspacePair(1, e, e))


@given(st.floats(0.05, 3.0), st.integers(0, 1000))
def test_gamma_euclidean_matches_exhaustive(angle, seed):
    rng = np.random.default_rng(seed)
    Qm, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    S = Qm @ np.array([[1.0], [0.0]])
    U = Qm @ np.array([[math.cos(angle)], [math.sin(angle)]])
    g = gamma(SubspacePair(1, S, U)).gamma
    assert abs(g - exhaustive_gamma(S, U)) < 1e-6


@pytest.mark.parametrize("base", ["sup", "one"])
@pytest.mark.parametrize("seed", range(5))
def test_gamma_projection_bound_other_norms(base, seed):
    rng = np.random.default_rng(seed)
    S, U = rng.standard_normal((2, 1)), rng.standard_normal((2, 1))
    ns = NormSequence.base_norm(base)
    norm = lambda v: float(np.abs(v).max()) if base == "sup" else float(np.abs(v).sum())
    g = gamma(SubspacePair(1, S, U), ns, 1).gamma
    assert abs(g - exhaustive_gamma(S, U, norm=norm)) < 1e-3
    P = splitting_projection(SubspacePair(1, S, U))
    assert operator_norm(ns, P, 1, 1) <= 2.0 / g + 1e-9


def test_threshold_scale_minimal():
    for D, lam in [(1.0, 1.0), (2.5, 0.5), (10.0, 0.3)]:
        N0, c = threshold_scale(D, lam, 1.0, 0.0)
        assert N0 ** lam / D - D * N0 ** -lam > 0
        assert N0 == 1 or (N0 - 1) ** lam / D - D * (N0 - 1) ** -lam <= 0
        assert c > 0


def test_gamma_lower_bound_holds(cert_tri32):
    assert cert_tri32.residuals["gamma_lower_ok"]
    assert cert_tri32.threshold_scale >= cert_tri32.residuals["N0_gamma"]


def test_fit_constants_sup_norm(tri32):
    ns = NormSequence.base_norm("sup")
    cert = certify(tri32, ns)
    fit = fit_constants(tri32, ns, cert)
    assert fit.max_violation <= 1e-9 and 0.5 < fit.lam < 1.0


def test_lyapunov_vanishing_orbit():
    sys_ = make_generator("power2-counterexample", {}, 1, 64)
    res = polynomial_lyapunov_exponent(sys_, [1.0])
    assert res.vanished and res.slope == -math.inf


def test_lyapunov_window():
    sys_ = make_generator("diagonal-poly", {"lambda": 0.5}, 2, 128)
    res = polynomial_lyapunov_exponent(sys_, [0.0, 1.0], window=(8, 64))
    assert res.window == (8, 64) and abs(res.slope - 0.5) < 1e-10 and res.r_squared > 0.999


def test_certificate_json_roundtrip(cert_tri32, tri32):
    text = dumps_canonical(cert_tri32.to_json())
    again = DichotomyCertificate.from_json(json.loads(text), tri32)
    assert np.array_equal(again.projections, cert_tri32.projections)
    assert again.flags == cert_tri32.flags
    assert dumps_canonical(again.to_json()["projections"]) == dumps_canonical(
        cert_tri32.to_json()["projections"])
    assert set(cert_tri32.to_json()) == {"flags", "constants", "projections", "gamma",
                                         "residuals", "N0", "grid"}


def test_nonuniform_epsilon_recovered():
    sys_ = make_generator("nonuniform-diagonal", {"lambda": 1.0, "epsilon": 0.3}, 2, 512)
    cert = certify(sys_)
    k = cert.constants
    assert abs(k["epsilon_nonuniform"] - 0.3) < 0.03
    assert abs(k["lambda_nonuniform"] - 1.0) < 0.05
    assert cert.flags["strong"]
