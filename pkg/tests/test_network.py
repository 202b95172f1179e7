import numpy as np
import pytest

from precodelab.autodiff import Tensor
from precodelab.core import ConfigError
from precodelab.network import (
    conv_flops_term,
    forward,
    forward_batch,
    forward_graph,
    init_model,
    load_checkpoint,
    prune_round,
    save_checkpoint,
)


def rand_packed(rng, n, s):
    return rng.standard_normal((n, s, s))


class TestForward:
    def test_output_sums_pin_budget(self):
        rng = np.random.default_rng(0)
        model = init_model(4, total_power=2.5, seed=1)
        for _ in range(5):
            feats = forward(model, rand_packed(rng, 1, 4)[0])
            assert np.sum(feats.p) == pytest.approx(2.5, rel=1e-12)
            assert np.sum(feats.lam) == pytest.approx(2.5, rel=1e-12)
            assert np.all(feats.p >= 0) and np.all(feats.lam >= 0)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        x = rand_packed(rng, 1, 4)[0]
        m1 = init_model(4, seed=7)
        m2 = init_model(4, seed=7)
        f1 = forward(m1, x)
        f2 = forward(m2, x)
        assert np.array_equal(f1.p, f2.p) and np.array_equal(f1.lam, f2.lam)

    def test_graph_matches_fast_path_in_eval(self):
        rng = np.random.default_rng(2)
        model = init_model(4, seed=3)
        x = rand_packed(rng, 8, 4)
        fast = forward_batch(model, x)
        graph = forward_graph(model, Tensor(x), training=False)
        assert np.max(np.abs(fast["p"] - graph["p"].data)) <= 1e-12
        assert np.max(np.abs(fast["lam"] - graph["lam"].data)) <= 1e-12

    def test_shape_mismatch_rejected(self):
        model = init_model(4, seed=0)
        with pytest.raises(ConfigError):
            forward_batch(model, np.zeros((1, 5, 5)))

    def test_ofdm_heads(self):
        rng = np.random.default_rng(3)
        model = init_model(3, n_rb=2, seed=0)
        x = rand_packed(rng, 4, 6)
        psg = rng.standard_normal((4, 3, 2, 2))
        out = forward_batch(model, x, per_stream_gram=psg)
        assert out["p"].shape == (4, 3)
        assert out["lam"].shape == (4, 6)
        assert out["q_re"].shape == (4, 3, 2)
        feats = forward(model, x[0], per_stream_gram=psg[0])
        assert feats.q.shape == (3, 2)
        assert feats.lam.shape == (3, 2)


class TestCheckpoint:
    def test_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        model = init_model(4, seed=9)
        # perturb so values are not just init patterns
        for k in model.params:
            model.params[k] = model.params[k] + rng.standard_normal(
                model.params[k].shape) * 0.37
        path = tmp_path / "model.json"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.conv_specs == model.conv_specs
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k]), k
        for k in model.bn_running:
            assert np.array_equal(loaded.bn_running[k], model.bn_running[k]), k
        x = rand_packed(rng, 2, 4)
        assert np.array_equal(forward_batch(model, x)["p"],
                              forward_batch(loaded, x)["p"])


class TestPruning:
    def test_zero_removal_is_identity(self):
        rng = np.random.default_rng(5)
        model = init_model(4, seed=2)
        pruned = prune_round(model, (0, 0))
        x = rand_packed(rng, 3, 4)
        assert np.array_equal(forward_batch(model, x)["p"],
                              forward_batch(pruned, x)["p"])

    def test_zero_filter_removal_preserves_outputs(self):
        rng = np.random.default_rng(6)
        model = init_model(4, seed=2)
        # make filter 5 of conv0 exactly inert: zero weights/bias, zero
        # batch-norm shift and centered running stats
        model.params["conv0.w"][5] = 0.0
        model.params["conv0.b"][5] = 0.0
        model.params["bn0.beta"][5] = 0.0
        model.bn_running["bn0.mean"][5] = 0.0
        pruned = prune_round(model, (1, 0))
        assert pruned.conv_specs[0] == (15, 7)
        x = rand_packed(rng, 4, 4)
        a = forward_batch(model, x)
        b = forward_batch(pruned, x)
        assert np.max(np.abs(a["p"] - b["p"])) <= 1e-9
        assert np.max(np.abs(a["lam"] - b["lam"])) <= 1e-9

    def test_smallest_norm_filters_go_first(self):
        model = init_model(4, seed=3)
        w = model.params["conv0.w"]
        norms = np.sqrt(np.sum(w.reshape(w.shape[0], -1) ** 2, axis=1))
        drop = set(np.argsort(norms, kind="stable")[:3])
        pruned = prune_round(model, (3, 0))
        keep = [i for i in range(16) if i not in drop]
        assert np.array_equal(pruned.params["conv0.w"], w[keep])
        assert pruned.params["conv1.w"].shape[1] == 13

    def test_removal_bounds(self):
        model = init_model(4, seed=0)
        with pytest.raises(ConfigError):
            prune_round(model, (16, 0))


class TestFlopsCounter:
    def test_conv_term_formula(self):
        model = init_model(4, seed=0)  # input 4x4, convs (16,7),(8,5),(4,3)
        s = 16
        expect = s * 49 * 1 * 16 + s * 25 * 16 * 8 + s * 9 * 8 * 4
        assert conv_flops_term(model) == expect

    def test_pruning_reduces_by_predicted_amount(self):
        model = init_model(4, seed=0)
        before = conv_flops_term(model)
        pruned = prune_round(model, (8, 4))
        s = 16
        expect = s * 49 * 1 * 8 + s * 25 * 8 * 4 + s * 9 * 4 * 4
        assert conv_flops_term(pruned) == expect
        assert conv_flops_term(pruned) < before
