"""Regression values frozen from the dense oracle (and closed forms where they exist).

The library paths are checked against these numbers, never against themselves.
"""

import math

import numpy as np
import pytest

from polydich.admissibility import TZOperator, green_solve, harmonic_block, solve_truncated
from polydich.dichotomy import SubspacePair, certify, gamma
from polydich.norms import NormSequence
from polydich.system import make_generator

# diagonal-poly lambda = 1, d = 2, N = 16, y_k = (1, 1) for k >= 2, Z = span(e_2).
# stable: x_n = (n - 1) / n; unstable: x_n = -n sum_{k=n+1}^{16} 1/k^2.
# Dense oracle (square T_Z system) gave the same to 1e-16.
DIAG16_X = {
    1: (0.0, -0.5843465334449871),
    4: (0.75, -0.6429416893355039),
    16: (0.9375, 0.0),
}

# triangular-poly exponents (-0.8, 1.1, -1.3), coupling 0.4, seed 3, N = 32:
# P_10 from the oracle's null-space construction.
TRI32_P10 = np.array([
    [1.00002280e+00, -1.04832497e-02, -8.10894623e-05],
    [2.17525066e-03, -2.32683609e-05, -7.73532552e-03],
    [-1.30817638e-07, 6.01405087e-05, 1.00000047e+00],
])

# exhaustive_gamma for S = e_1, U = (1, 1)/sqrt(2)
GAMMA_EUCLID = 0.7653668647301795  # 2 sin(pi/8)
GAMMA_SUP = 1.0


def test_diag16_green_and_truncated():
    sys_ = make_generator("diagonal-poly", {"lambda": 1.0}, 2, 16)
    cert = certify(sys_)
    y = np.zeros((16, 2))
    y[1:] = 1.0
    T = TZOperator(sys_, cert.Z)
    xg = green_solve(T, cert, y).x
    xt = solve_truncated(T, y)
    for n, ref in DIAG16_X.items():
        assert np.allclose(xg[n - 1], ref, atol=1e-13)
        assert np.allclose(xt[n - 1], ref, atol=1e-13)


def test_closed_form_matches_frozen():
    for n, (s, u) in DIAG16_X.items():
        assert math.isclose(s, (n - 1) / n, abs_tol=1e-15)
        assert math.isclose(u, -n * math.fsum(1 / k**2 for k in range(n + 1, 17)), abs_tol=1e-15)


def test_tri32_projection(cert_tri32):
    assert np.allclose(cert_tri32.P(10), TRI32_P10, atol=1e-8)


@pytest.mark.parametrize("norms,ref", [(None, GAMMA_EUCLID), (NormSequence.base_norm("sup"), GAMMA_SUP)])
def test_gamma_frozen(norms, ref):
    pair = SubspacePair(1, np.array([[1.0], [0.0]]), np.array([[1.0], [1.0]]) / math.sqrt(2))
    assert math.isclose(gamma(pair, norms, 1).gamma, ref, abs_tol=1e-6)


def test_harmonic_block_frozen():
    # sum_{j=n+1}^{2n} 1/j -> log 2
    assert math.isclose(harmonic_block(1, 2), 0.5)
    assert math.isclose(harmonic_block(2, 2), 1 / 3 + 1 / 4)
    assert abs(harmonic_block(4096, 2) - math.log(2)) < 1e-4
