import numpy as np
import pytest

from precodelab.core import (
    ChannelSet,
    ConfigError,
    NumericalError,
    PrecoderSet,
    SystemConfig,
    VirtualMisoProblem,
    column_normalize,
    normalize_vector,
    pack_hermitian,
    sum_rate_mimo,
    sum_rate_ofdm,
    unpack_hermitian,
    weighted_gram,
)


def rand_complex(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def scalar_miso_wsr(h_rows, cols, noise_var, weights):
    """Independent oracle: per-user scalar SINR formula, no matrix algebra."""
    k = len(h_rows)
    total = 0.0
    for i in range(k):
        sig = abs(np.vdot(h_rows[i].conj(), cols[i])) ** 2
        interf = sum(
            abs(np.vdot(h_rows[i].conj(), cols[j])) ** 2 for j in range(k) if j != i
        )
        total += weights[i] * np.log2(1.0 + sig / (interf + noise_var))
    return total


class TestSystemConfig:
    def test_defaults_and_derived(self):
        cfg = SystemConfig(n_tx=8, n_rx=2, n_users=3, streams=(1, 2, 1))
        assert cfg.n_streams == 4
        assert list(cfg.stream_owners()) == [0, 1, 1, 2]
        assert cfg.stream_slices()[1] == slice(1, 3)
        assert cfg.weights == (1.0, 1.0, 1.0)

    def test_invariant_violations(self):
        with pytest.raises(ConfigError):
            SystemConfig(n_tx=2, n_rx=1, n_users=2, streams=(2, 1))  # d_k > n_rx
        with pytest.raises(ConfigError):
            SystemConfig(n_tx=2, n_rx=2, n_users=2, streams=(2, 2))  # M > n_tx
        with pytest.raises(ConfigError):
            SystemConfig(n_tx=4, n_rx=1, n_users=1, streams=(1,), noise_var=0.0)
        with pytest.raises(ConfigError):
            SystemConfig(n_tx=4, n_rx=1, n_users=1, streams=(1,), weights=(0.0,))

    def test_from_dict_snr(self):
        cfg = SystemConfig.from_dict(
            {"n_tx": 16, "n_rx": 2, "n_users": 4, "streams": 1, "snr_db": 10}
        )
        assert cfg.noise_var == pytest.approx(0.1)
        assert cfg.streams == (1, 1, 1, 1)


class TestSumRate:
    def test_zero_precoder_is_zero(self):
        cfg = SystemConfig(n_tx=4, n_rx=2, n_users=2, streams=(1, 1))
        rng = np.random.default_rng(0)
        ch = ChannelSet(rand_complex(rng, 2, 1, 2, 4))
        pre = PrecoderSet([np.zeros((4, 1)), np.zeros((4, 1))])
        assert sum_rate_mimo(ch, pre, cfg) == 0.0

    def test_scalar_siso(self):
        cfg = SystemConfig(n_tx=1, n_rx=1, n_users=1, streams=(1,))
        ch = ChannelSet(np.ones((1, 1, 1, 1)))
        pre = PrecoderSet([np.ones((1, 1))])
        assert sum_rate_mimo(ch, pre, cfg) == pytest.approx(1.0, abs=1e-12)

    def test_matches_scalar_oracle(self):
        # K=2, N_t=2, N_r=1: matrix path vs independently coded scalar formula
        cfg = SystemConfig(n_tx=2, n_rx=1, n_users=2, streams=(1, 1),
                           noise_var=0.7, weights=(1.3, 0.6))
        rng = np.random.default_rng(42)
        for _ in range(20):
            h = rand_complex(rng, 2, 1, 1, 2)
            cols = [rand_complex(rng, 2) * 0.5 for _ in range(2)]
            ch = ChannelSet(h)
            pre = PrecoderSet([c[:, None] for c in cols])
            oracle = scalar_miso_wsr([h[k, 0, 0] for k in range(2)], cols,
                                     0.7, (1.3, 0.6))
            assert sum_rate_mimo(ch, pre, cfg) == pytest.approx(oracle, rel=1e-10)

    def test_unitary_right_rotation_invariance(self):
        cfg = SystemConfig(n_tx=8, n_rx=2, n_users=2, streams=(2, 2))
        rng = np.random.default_rng(11)
        for _ in range(10):
            ch = ChannelSet(rand_complex(rng, 2, 1, 2, 8))
            mats = [rand_complex(rng, 8, 2) * 0.4 for _ in range(2)]
            base = sum_rate_mimo(ch, PrecoderSet(mats), cfg)
            rotated = []
            for v in mats:
                q, _ = np.linalg.qr(rand_complex(rng, 2, 2))
                rotated.append(v @ q)
            rot = sum_rate_mimo(ch, PrecoderSet(rotated), cfg)
            assert rot == pytest.approx(base, rel=1e-9)

    def test_dimension_and_finite_errors(self):
        cfg = SystemConfig(n_tx=4, n_rx=2, n_users=2, streams=(1, 1))
        rng = np.random.default_rng(1)
        ch = ChannelSet(rand_complex(rng, 2, 1, 2, 4))
        with pytest.raises(ConfigError):
            sum_rate_mimo(ch, PrecoderSet([np.zeros((4, 2)), np.zeros((4, 1))]), cfg)
        bad = PrecoderSet([np.zeros((4, 1)), np.zeros((4, 1))])
        bad.mats[0][0, 0] = np.nan
        with pytest.raises(ConfigError):
            sum_rate_mimo(ch, bad, cfg)


class TestSumRateOfdm:
    def test_b1_reduces_to_mimo(self):
        cfg = SystemConfig(n_tx=4, n_rx=2, n_users=2, streams=(1, 1))
        rng = np.random.default_rng(3)
        ch = ChannelSet(rand_complex(rng, 2, 1, 2, 4))
        pre = PrecoderSet([rand_complex(rng, 4, 1) * 0.5 for _ in range(2)])
        assert sum_rate_ofdm(ch, pre, cfg) == sum_rate_mimo(ch, pre, cfg)

    def test_duplicated_rb_doubles(self):
        cfg1 = SystemConfig(n_tx=4, n_rx=2, n_users=2, streams=(1, 1))
        cfg2 = SystemConfig(n_tx=4, n_rx=2, n_users=2, streams=(1, 1), granularity=2)
        rng = np.random.default_rng(4)
        h = rand_complex(rng, 2, 1, 2, 4)
        pre = PrecoderSet([rand_complex(rng, 4, 1) * 0.5 for _ in range(2)])
        one = sum_rate_mimo(ChannelSet(h), pre, cfg1)
        two = sum_rate_ofdm(ChannelSet(np.repeat(h, 2, axis=1)), pre, cfg2)
        assert two == pytest.approx(2.0 * one, rel=1e-12)

    def test_matches_per_rb_scalar_oracle(self):
        cfg = SystemConfig(n_tx=4, n_rx=1, n_users=3, streams=(1, 1, 1),
                           granularity=4, noise_var=0.5)
        rng = np.random.default_rng(5)
        h = rand_complex(rng, 3, 4, 1, 4)
        cols = [rand_complex(rng, 4) * 0.3 for _ in range(3)]
        pre = PrecoderSet([c[:, None] for c in cols])
        oracle = sum(
            scalar_miso_wsr([h[k, b, 0] for k in range(3)], cols, 0.5, (1, 1, 1))
            for b in range(4)
        )
        assert sum_rate_ofdm(ChannelSet(h), pre, cfg) == pytest.approx(oracle, rel=1e-10)


class TestNormalization:
    def test_unit_vector_passthrough(self):
        e1 = np.array([1.0, 0.0, 0.0])
        assert np.allclose(normalize_vector(e1), e1)

    def test_norm_five(self):
        out = normalize_vector(np.array([3.0, 4.0j]))
        assert np.allclose(out, [0.6, 0.8j])

    def test_zero_vector_errors(self):
        with pytest.raises(NumericalError):
            normalize_vector(np.zeros(3))

    def test_column_normalize_identity(self):
        assert np.allclose(column_normalize(np.eye(3)), np.eye(3))

    def test_column_normalize_single(self):
        out = column_normalize(np.array([[3.0], [4.0]]))
        assert np.allclose(out, [[0.6], [0.8]])

    def test_column_norms_unit(self):
        rng = np.random.default_rng(6)
        a = rand_complex(rng, 4, 2)
        out = column_normalize(a)
        assert np.allclose(np.linalg.norm(out, axis=0), 1.0, atol=1e-12)

    def test_zero_column_errors(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(NumericalError):
            column_normalize(a)


class TestWeightedGram:
    def _problem(self, rows, weights):
        m = rows.shape[0]
        return VirtualMisoProblem(rows=rows, weights=weights,
                                  owner=np.arange(m), n_tx=rows.shape[-1])

    def test_orthonormal_rows_identity(self):
        g = weighted_gram(self._problem(np.eye(3, 5, dtype=complex), np.ones(3)))
        assert np.allclose(g, np.eye(3), atol=1e-14)

    def test_single_row_scalar(self):
        g = weighted_gram(self._problem(np.array([[2.0, 0.0]], dtype=complex), np.ones(1)))
        assert g.shape == (1, 1) and g[0, 0] == pytest.approx(4.0)

    def test_entrywise_oracle(self):
        rng = np.random.default_rng(7)
        rows = rand_complex(rng, 3, 6)
        beta = np.array([0.5, 1.0, 2.0])
        g = weighted_gram(self._problem(rows, beta))
        for i in range(3):
            for j in range(3):
                expect = np.sqrt(beta[i] * beta[j]) * np.vdot(rows[j], rows[i])
                assert g[i, j] == pytest.approx(expect, rel=1e-12)

    def test_common_unitary_invariance(self):
        rng = np.random.default_rng(8)
        rows = rand_complex(rng, 4, 6)
        beta = rng.uniform(0.5, 2.0, 4)
        q, _ = np.linalg.qr(rand_complex(rng, 6, 6))
        g1 = weighted_gram(self._problem(rows, beta))
        g2 = weighted_gram(self._problem(rows @ q, beta))
        assert np.max(np.abs(g1 - g2)) <= 1e-12


class TestPacking:
    def test_identity(self):
        packed = pack_hermitian(np.eye(2, dtype=complex))
        assert np.array_equal(packed.matrix, np.eye(2))

    def test_forced_layout(self):
        g = np.array([[1.0, 2 + 3j], [2 - 3j, 4.0]])
        packed = pack_hermitian(g)
        assert np.array_equal(packed.matrix, [[1.0, 2.0], [3.0, 4.0]])

    def test_roundtrip_exact(self):
        rng = np.random.default_rng(9)
        a = rand_complex(rng, 5, 5)
        g = a + a.conj().T
        back = unpack_hermitian(pack_hermitian(g))
        assert np.array_equal(back, g)

    def test_non_hermitian_rejected(self):
        with pytest.raises(ConfigError):
            pack_hermitian(np.array([[1.0, 1.0], [0.0, 1.0]], dtype=complex))
