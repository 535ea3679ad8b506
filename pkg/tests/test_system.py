import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polydich.errors import ConfigurationError, IndexRangeError
from polydich.oracle import dense_cocycle
from polydich.serialize import dumps_canonical
from polydich.system import (
    Cocycle,
    OperatorSequence,
    load_system,
    make_generator,
    save_system,
    system_from_dict,
)


def random_system(seed, d, N):
    rng = np.random.default_rng(seed)
    return OperatorSequence(d, N, rng.standard_normal((N - 1, d, d)))


class TestOperatorSequence:
    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            OperatorSequence(2, 5, np.zeros((3, 2, 2)))

    def test_nonfinite(self):
        m = np.zeros((4, 2, 2))
        m[1, 0, 0] = np.nan
        with pytest.raises(ConfigurationError):
            OperatorSequence(2, 5, m)

    def test_immutable(self):
        seq = random_system(0, 2, 5)
        with pytest.raises(ValueError):
            seq.matrices[0, 0, 0] = 1.0

    def test_index_range(self):
        seq = random_system(0, 2, 5)
        seq.A(1), seq.A(4)
        for bad in (0, 5):
            with pytest.raises(IndexRangeError):
                seq.A(bad)

    def test_replace_matrices_keeps_original(self):
        seq = random_system(0, 2, 5)
        other = seq.replace_matrices(np.zeros((4, 2, 2)))
        assert np.any(seq.matrices != 0) and not np.any(other.matrices)


class TestCocycle:
    @given(st.integers(0, 10_000), st.integers(1, 3), st.integers(2, 20), st.data())
    def test_matches_dense_oracle(self, seed, d, N, data):
        seq = random_system(seed, d, N)
        c = Cocycle(seq)
        n = data.draw(st.integers(1, N))
        m = data.draw(st.integers(n, N))
        ref = dense_cocycle(seq.matrices, m, n)
        assert np.allclose(c(m, n), ref, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(ref).max()))

    @given(st.integers(0, 10_000), st.data())
    def test_cocycle_property(self, seed, data):
        seq = random_system(seed, 2, 16)
        c = Cocycle(seq)
        k = data.draw(st.integers(1, 16))
        n = data.draw(st.integers(k, 16))
        m = data.draw(st.integers(n, 16))
        assert np.allclose(c(m, n) @ c(n, k), c(m, k), atol=1e-9 * max(1.0, np.abs(c(m, k)).max()))

    def test_identity_on_diagonal(self):
        c = Cocycle(random_system(1, 3, 8))
        for n in range(1, 9):
            assert np.array_equal(c(n, n), np.eye(3))

    def test_one_step(self):
        seq = random_system(1, 2, 8)
        c = Cocycle(seq)
        for n in range(1, 8):
            assert np.array_equal(c(n + 1, n), seq.A(n))

    def test_backward_pair_rejected(self):
        c = Cocycle(random_system(1, 2, 8))
        with pytest.raises(IndexRangeError):
            c(2, 5)
        with pytest.raises(IndexRangeError):
            c(9, 1)

    def test_table_and_stacks_agree(self):
        seq = random_system(2, 2, 12)
        c = Cocycle(seq)
        tab = c.table()
        for n in range(1, 13):
            stack = c.forward_stack(n)
            for m in range(n, 13):
                assert np.allclose(tab[m - 1, n - 1], stack[m - n])
                assert np.allclose(tab[m - 1, n - 1], dense_cocycle(seq.matrices, m, n))

    def test_cached_stack_is_readonly(self):
        c = Cocycle(random_system(3, 2, 9))
        st_ = c.forward_stack(4)
        with pytest.raises(ValueError):
            st_[0, 0, 0] = 5.0


class TestGenerators:
    def test_diagonal_closed_form(self):
        seq = make_generator("diagonal-poly", {"lambda": 0.5}, 2, 40)
        c = Cocycle(seq)
        for m, n in [(10, 3), (40, 1), (7, 7)]:
            assert np.allclose(np.diag(c(m, n)), [(n / m) ** 0.5, (m / n) ** 0.5])

    def test_diagonal_rejects_nonpositive_rate(self):
        with pytest.raises(ConfigurationError):
            make_generator("diagonal-poly", {"lambda": 0.0}, 2, 10)

    def test_power2_entries(self):
        seq = make_generator("power2-counterexample", {}, 1, 20)
        vals = seq.matrices[:, 0, 0]
        assert [m for m in range(1, 20) if vals[m - 1] != 0] == [2, 4, 8, 16]
        assert vals[3] == 4.0

    def test_power2_scalar_only(self):
        with pytest.raises(ConfigurationError):
            make_generator("power2-counterexample", {}, 2, 10)

    def test_nonuniform_cocycle_form(self):
        # stable cocycle = (n/m)^lam * w(m)/w(n)
        eps, lam = 0.3, 1.0
        seq = make_generator("nonuniform-diagonal", {"lambda": lam, "epsilon": eps}, 2, 300)
        c = Cocycle(seq)
        j = np.arange(1, 301)
        logw = -eps * np.log(j) * 0.5 * (1 + np.cos(2 * np.pi * np.log2(j) / 4.0))
        for m, n in [(256, 1), (300, 16), (32, 5)]:
            ref = (n / m) ** lam * np.exp(logw[m - 1] - logw[n - 1])
            assert np.isclose(c(m, n)[0, 0], ref, rtol=1e-10)

    def test_nonuniform_one_step_bounded(self):
        seq = make_generator("nonuniform-diagonal", {"lambda": 1.0, "epsilon": 0.5}, 2, 4096)
        assert np.abs(seq.matrices).max() < 3.0

    def test_block_lyapunov(self):
        params = {
            "stable": {"kind": "diagonal-poly", "params": {"lambda": 0.7, "stable_dim": 1}, "dimension": 1},
            "unstable": {"kind": "diagonal-poly", "params": {"lambda": 1.3, "stable_dim": 0}, "dimension": 1},
        }
        seq = make_generator("block-lyapunov", params, 2, 10)
        assert np.allclose(seq.matrices[:, 0, 1], 0) and np.allclose(seq.matrices[:, 1, 0], 0)
        with pytest.raises(ConfigurationError):
            make_generator("block-lyapunov", params, 3, 10)

    def test_triangular_deterministic(self):
        p = {"exponents": [-1.0, 1.0], "coupling": 0.5, "seed": 9}
        a = make_generator("triangular-poly", p, 2, 30)
        b = make_generator("triangular-poly", p, 2, 30)
        assert np.array_equal(a.matrices, b.matrices)
        assert np.allclose(np.tril(a.matrices, -1), 0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            make_generator("fibonacci", {}, 2, 10)


class TestSerialization:
    def test_roundtrip_generator(self, tmp_path):
        seq = make_generator("diagonal-poly", {"lambda": 1.0}, 2, 16)
        p = tmp_path / "s.json"
        save_system(seq, p)
        assert "generator" in json.loads(p.read_text())
        assert np.array_equal(load_system(p).matrices, seq.matrices)

    def test_roundtrip_explicit_bitwise(self, tmp_path):
        seq = random_system(5, 3, 11)
        p = tmp_path / "s.json"
        save_system(seq, p, explicit=True)
        assert np.array_equal(load_system(p).matrices, seq.matrices)

    def test_explicit_file_generator(self, tmp_path):
        seq = random_system(6, 2, 11)
        p = tmp_path / "s.json"
        save_system(seq, p, explicit=True)
        again = make_generator("explicit-file", {"path": str(p)}, 2, 8)
        assert np.array_equal(again.matrices, seq.matrices[:7])

    def test_unknown_fields_rejected(self):
        with pytest.raises(ConfigurationError):
            system_from_dict({"dimension": 1, "horizon": 3, "matrices": [1, 1], "colour": "red"})
        with pytest.raises(ConfigurationError):
            system_from_dict([1, 2])

    def test_canonical_dump_deterministic(self):
        obj = {"b": [1.0, 0.1, np.float64(1 / 3)], "a": {"z": True, "y": None}, "c": float("inf")}
        s1, s2 = dumps_canonical(obj), dumps_canonical(dict(reversed(list(obj.items()))))
        assert s1 == s2
        assert s1.index('"a"') < s1.index('"b"')
        assert "0.33333333333333331" in s1 and '"inf"' in s1
