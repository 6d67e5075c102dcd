"""Architecture contracts: block structure, output shapes and ranges,
parameter-count calibration and checkpoint round-trips."""

import os

import numpy as np
import pytest

from rrdispnet.network import (
    DispNet,
    NetworkConfig,
    ResidualBlock,
    domain_transform_block,
    load_checkpoint,
    load_network,
    param_count,
    restore_params,
    save_checkpoint,
)
from rrdispnet.tensor import ParamStore, Tensor, backward, elu, reduce_mean

SMALL = dict(encoder_channels=(8, 12, 16, 24, 32, 48), decoder_channels=(8, 12, 16, 24, 32))

PARAM_TARGETS = {
    "rdispnet_m": 12.8e6,
    "rrdispnet_m": 14.2e6,
    "rrdispnet_dtm": 16.0e6,
}


def small_net(variant="rrdispnet_dtm", seed=0):
    return DispNet(NetworkConfig(variant=variant, **SMALL), seed=seed)


class TestBlocks:
    def test_residual_block_zero_weights_is_elu(self):
        rng = np.random.default_rng(0)
        store = ParamStore()
        block = ResidualBlock(store, "blk", 4, np.random.default_rng(1), np.float64)
        for t in store.tensors():
            t.data[:] = 0.0
        x = Tensor(rng.uniform(-2, 2, size=(1, 4, 5, 5)))
        np.testing.assert_allclose(block(x).data, elu(x).data, rtol=1e-12)

    def test_residual_block_preserves_shape(self):
        store = ParamStore()
        block = ResidualBlock(store, "blk", 6, np.random.default_rng(2), np.float32)
        x = Tensor(np.random.default_rng(3).uniform(size=(2, 6, 7, 9)).astype(np.float32))
        assert block(x).shape == x.shape

    def test_residual_block_param_count(self):
        for c in (4, 16):
            store = ParamStore()
            ResidualBlock(store, "blk", c, np.random.default_rng(0), np.float32)
            assert store.total_count() == 2 * (3 * 3 * c * c + c)

    def test_domain_transform_zero_weights_is_elu(self):
        store = ParamStore()
        block = domain_transform_block(store, "dt", 4, np.random.default_rng(4), np.float64)
        for t in store.tensors():
            t.data[:] = 0.0
        x = Tensor(np.random.default_rng(5).uniform(-2, 2, size=(1, 4, 6, 6)))
        np.testing.assert_allclose(block(x).data, elu(x).data, rtol=1e-12)

    def test_domain_transform_uses_wide_kernels(self):
        store = ParamStore()
        domain_transform_block(store, "dt", 5, np.random.default_rng(6), np.float32)
        assert store["dt.conv1.weight"].shape == (5, 5, 3, 5)
        assert store.total_count() == 2 * (3 * 5 * 5 * 5 + 5)

    def test_single_conv_párameter_oracle(self):
        store = ParamStore()
        from rrdispnet.network import Conv

        Conv(store, "c", 4, 8, (3, 5), (1, 1), np.random.default_rng(7), np.float32)
        assert store.total_count() == 8 * (4 * 3 * 5) + 8 == 488


class TestForwardContract:
    def test_output_shapes(self):
        net = small_net()
        x = Tensor(np.random.default_rng(8).uniform(0, 1, (1, 3, 64, 128)).astype(np.float32))
        outs = net.forward(x)
        assert len(outs) == 4
        for s, out in enumerate(outs):
            expected = (1, 1, 64 // 2 ** s, 128 // 2 ** s)
            assert out.disp_left.shape == expected
            assert out.disp_right.shape == expected
            assert out.mask_left.shape == expected
            assert out.mask_right.shape == expected

    def test_output_ranges(self):
        net = small_net(seed=3)
        x = Tensor(np.random.default_rng(9).uniform(0, 1, (2, 3, 64, 128)).astype(np.float32))
        for s, out in enumerate(net.forward(x)):
            w_s = 128 // 2 ** s
            for d in (out.disp_left, out.disp_right):
                assert d.data.min() >= 0.0
                assert d.data.max() <= 0.3 * w_s
            for m in (out.mask_left, out.mask_right):
                assert m.data.min() >= 0.0 and m.data.max() <= 1.0

    def test_output_ranges_strict_at_float64(self):
        # float32 sigmoid rounds to exactly 0/1 past |x| ~ 17; the open
        # interval is representable (and holds) at float64
        cfg = NetworkConfig(variant="rrdispnet_dtm", **SMALL)
        net = DispNet(cfg, seed=3, dtype=np.float64)
        x = Tensor(np.random.default_rng(9).uniform(0, 1, (1, 3, 64, 128)))
        for out in net.forward(x):
            for m in (out.mask_left, out.mask_right):
                assert m.data.min() > 0.0 and m.data.max() < 1.0

    def test_indivisible_input_rejected(self):
        net = small_net()
        x = Tensor(np.zeros((1, 3, 60, 128), dtype=np.float32))
        with pytest.raises(ValueError, match="divisible by 32"):
            net.forward(x)

    def test_forward_deterministic(self):
        x_data = np.random.default_rng(10).uniform(0, 1, (1, 3, 32, 64)).astype(np.float32)
        a = small_net(seed=5).forward(Tensor(x_data))[0].disp_left.data
        b = small_net(seed=5).forward(Tensor(x_data))[0].disp_left.data
        np.testing.assert_array_equal(a, b)

    def test_batch_independence(self):
        rng = np.random.default_rng(11)
        net = small_net(seed=6)
        both = rng.uniform(0, 1, (2, 3, 32, 64)).astype(np.float32)
        batched = net.forward(Tensor(both))[0].disp_left.data
        single0 = net.forward(Tensor(both[:1]))[0].disp_left.data
        single1 = net.forward(Tensor(both[1:]))[0].disp_left.data
        np.testing.assert_allclose(batched[0], single0[0], atol=1e-6)
        np.testing.assert_allclose(batched[1], single1[0], atol=1e-6)

    def test_no_dead_heads(self):
        net = small_net(seed=7)
        x = Tensor(np.random.default_rng(12).uniform(0, 1, (1, 3, 32, 64)).astype(np.float32))
        outs = net.forward(x)
        loss = None
        for out in outs:
            for t in (out.disp_left, out.disp_right, out.mask_left, out.mask_right):
                term = reduce_mean(t)
                loss = term if loss is None else loss + term
        net.params.zero_grad()
        backward(loss)
        for s in range(4):
            g = net.params[f"dec{s}.head.weight"].grad
            assert g is not None and np.linalg.norm(g) > 0.0


class TestParamCalibration:
    @pytest.mark.parametrize("variant,target", sorted(PARAM_TARGETS.items()))
    def test_default_configs_near_published_sizes(self, variant, target):
        net = DispNet(NetworkConfig(variant=variant))
        count = param_count(net.params)
        assert abs(count - target) <= 0.2 * target

    def test_variant_ordering_strict(self):
        counts = {
            v: param_count(DispNet(NetworkConfig(variant=v)).params)
            for v in PARAM_TARGETS
        }
        assert counts["rdispnet_m"] < counts["rrdispnet_m"] < counts["rrdispnet_dtm"]

    def test_empty_store(self):
        assert param_count(ParamStore()) == 0

    def test_variant_fixes_toggles(self):
        assert NetworkConfig(variant="rdispnet_m").use_rect_fusion is False
        assert NetworkConfig(variant="rdispnet_m").use_domain_transform is False
        assert NetworkConfig(variant="rrdispnet_m").use_rect_fusion is True
        assert NetworkConfig(variant="rrdispnet_m").use_domain_transform is False
        assert NetworkConfig(variant="rrdispnet_dtm").use_rect_fusion is True
        assert NetworkConfig(variant="rrdispnet_dtm").use_domain_transform is True

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            NetworkConfig(variant="nope")


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        net = small_net(seed=8)
        path = tmp_path / "net.rrdn"
        save_checkpoint(path, net.config, net.params)
        first = path.read_bytes()

        config, arrays = load_checkpoint(path)
        assert config == net.config
        rebuilt = DispNet(config, seed=0)
        restore_params(rebuilt.params, arrays)
        path2 = tmp_path / "net2.rrdn"
        save_checkpoint(path2, rebuilt.config, rebuilt.params)
        assert path2.read_bytes() == first

    def test_roundtrip_forward_identical(self, tmp_path):
        net = small_net(seed=9)
        path = tmp_path / "net.rrdn"
        save_checkpoint(path, net.config, net.params)
        rebuilt = load_network(path)
        x = Tensor(np.random.default_rng(13).uniform(0, 1, (1, 3, 32, 64)).astype(np.float32))
        np.testing.assert_array_equal(
            net.forward(x)[0].disp_left.data, rebuilt.forward(x)[0].disp_left.data
        )

    def test_magic_validated(self, tmp_path):
        path = tmp_path / "junk.rrdn"
        path.write_bytes(b"NOTRRDNxxxx")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_config_mismatch_rejected(self, tmp_path):
        net = small_net(seed=10)
        path = tmp_path / "net.rrdn"
        save_checkpoint(path, net.config, net.params)
        _, arrays = load_checkpoint(path)
        other = DispNet(NetworkConfig(variant="rdispnet_m", **SMALL), seed=0)
        with pytest.raises(ValueError, match="mismatch"):
            restore_params(other.params, arrays)
