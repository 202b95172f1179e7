import numpy as np
import pytest

from precodelab.channels import (
    ChannelParams,
    CsiNoiseModel,
    add_csi_noise,
    gen_channel,
    load_channels,
    save_channels,
    steering_vector,
)
from precodelab.core import ConfigError, SystemConfig


def small_cfg(b=1):
    return SystemConfig(n_tx=4, n_rx=2, n_users=2, streams=(1, 1), granularity=b)


class TestSteering:
    def test_broadside_all_ones(self):
        assert np.allclose(steering_vector(0.0, 4), np.ones(4))

    def test_endfire_two_elements(self):
        assert np.allclose(steering_vector(np.pi / 2, 2), [1.0, -1.0])

    def test_unit_modulus(self):
        rng = np.random.default_rng(0)
        for angle in rng.uniform(0, 2 * np.pi, 50):
            assert np.allclose(np.abs(steering_vector(angle, 8)), 1.0, atol=1e-12)


class TestGenChannel:
    def test_deterministic(self):
        cfg = small_cfg()
        p = ChannelParams()
        a = gen_channel(p, cfg, seed=123)
        b = gen_channel(p, cfg, seed=123)
        assert np.array_equal(a.data, b.data)
        c = gen_channel(p, cfg, seed=124)
        assert not np.array_equal(a.data, c.data)

    def test_single_zero_delay_path(self):
        cfg = small_cfg(b=3)
        p = ChannelParams(n_paths=1, delay_min_ns=0.0, delay_max_ns=0.0, n_rb=3)
        ch = gen_channel(p, cfg, seed=5)
        for k in range(cfg.n_users):
            h0 = ch.data[k, 0]
            assert np.linalg.matrix_rank(h0) == 1
            for b in range(1, 3):
                assert np.allclose(ch.data[k, b], h0, atol=1e-12)

    def test_frequency_phase_rotation(self):
        # with one path of known delay the RB ratio is a pure phase
        cfg = small_cfg(b=4)
        p = ChannelParams(n_paths=1, delay_min_ns=40.0, delay_max_ns=40.0, n_rb=4)
        ch = gen_channel(p, cfg, seed=6)
        tau, fs = 40e-9, p.sample_rate_hz
        for b in range(1, 4):
            # array slot b holds block index b+1, so the ratio to slot 0 is
            # exp(-j 2 pi tau f_s ((b+1) - 1) / B)
            expect = np.exp(-2j * np.pi * tau * fs * b / 4)
            ratio = ch.data[0, b] / ch.data[0, 0]
            assert np.allclose(ratio, expect, atol=1e-12)

    def test_mean_energy(self):
        # channel energy is normalized to one per antenna pair
        cfg = SystemConfig(n_tx=4, n_rx=2, n_users=1, streams=(1,))
        p = ChannelParams()
        acc = 0.0
        n = 10_000
        for i in range(n):
            acc += np.sum(np.abs(gen_channel(p, cfg, seed=i).data) ** 2)
        mean = acc / n
        assert mean == pytest.approx(cfg.n_rx * cfg.n_tx, rel=0.03)

    def test_rb_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            gen_channel(ChannelParams(n_rb=2), small_cfg(b=1), seed=0)


class TestCsiNoise:
    def test_zero_error_is_exact_copy(self):
        ch = gen_channel(ChannelParams(), small_cfg(), seed=1)
        noisy = add_csi_noise(ch, CsiNoiseModel(0.0), seed=2)
        assert noisy.is_noisy and not ch.is_noisy
        assert np.array_equal(noisy.data, ch.data)

    def test_deterministic(self):
        ch = gen_channel(ChannelParams(), small_cfg(), seed=1)
        a = add_csi_noise(ch, CsiNoiseModel(0.1), seed=7)
        b = add_csi_noise(ch, CsiNoiseModel(0.1), seed=7)
        assert np.array_equal(a.data, b.data)

    def test_error_variance_moment(self):
        cfg = SystemConfig(n_tx=50, n_rx=2, n_users=10, streams=(1,) * 10)
        ch = gen_channel(ChannelParams(), cfg, seed=3)
        # 10 independent corruptions of 1000 entries each -> 1e5+ error samples
        errs = []
        for s in range(100):
            noisy = add_csi_noise(ch, CsiNoiseModel(0.1), seed=s)
            errs.append((noisy.data - ch.data).ravel())
        err = np.concatenate(errs)
        assert err.size >= 100_000
        assert np.var(err) == pytest.approx(0.1, rel=0.05)

    def test_double_corruption_rejected(self):
        ch = gen_channel(ChannelParams(), small_cfg(), seed=1)
        noisy = add_csi_noise(ch, CsiNoiseModel(0.1), seed=7)
        with pytest.raises(ConfigError):
            add_csi_noise(noisy, CsiNoiseModel(0.1), seed=8)

    def test_negative_variance_rejected(self):
        with pytest.raises(ConfigError):
            CsiNoiseModel(-0.1)


class TestChannelFile:
    def test_roundtrip(self, tmp_path):
        cfg = small_cfg(b=2)
        p = ChannelParams(n_rb=2)
        sets = [gen_channel(p, cfg, seed=s) for s in range(3)]
        path = tmp_path / "chan.bin"
        save_channels(path, sets, p, cfg, seed=0)
        loaded, header = load_channels(path)
        assert header["count"] == 3 and header["B"] == 2
        for a, b in zip(sets, loaded):
            assert np.array_equal(a.data, b.data)

    def test_regeneration_is_bit_identical(self, tmp_path):
        cfg = small_cfg()
        p = ChannelParams()
        f1, f2 = tmp_path / "a.bin", tmp_path / "b.bin"
        for f in (f1, f2):
            save_channels(f, [gen_channel(p, cfg, seed=s) for s in range(10)], p, cfg, 0)
        assert f1.read_bytes() == f2.read_bytes()
