import numpy as np
import pytest
from hypothesis import settings

from polydich.system import make_generator

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")

# criterion id -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")


@pytest.fixture(scope="session")
def diag128():
    return make_generator("diagonal-poly", {"lambda": 1.0}, 2, 128)


@pytest.fixture(scope="session")
def tri32():
    return make_generator(
        "triangular-poly", {"exponents": [-0.8, 1.1, -1.3], "coupling": 0.4, "seed": 3}, 3, 32
    )


@pytest.fixture(scope="session")
def cert_tri32(tri32):
    from polydich.dichotomy import certify

    return certify(tri32)


@pytest.fixture(scope="session")
def cert_diag128(diag128):
    from polydich.dichotomy import certify

    return certify(diag128)


def random_y0(rng, shape):
    y = rng.standard_normal(shape)
    y[..., 0, :] = 0.0
    return y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
