import numpy as np
import pytest

from edrain.errors import InvalidArgument
from edrain.filtering import FusionParams
from edrain.kpn import KpnConfig, derain, derain_backward, derain_forward, kpn_backward, kpn_forward, kpn_init
from edrain.losses import LossConfig, combined_loss, combined_loss_backward, psnr
from oracles import derain_straight_line, max_rel_error, numeric_grad, straddles_kink

SMALL = KpnConfig(levels=2, base_channels=4, kernel_width=3, dilations=(1, 2))


class TestConfig:
    def test_default_parameter_count(self):
        # hand count, (C_out * C_in * k * k + C_out) per layer
        layers = [
            32 * 3 * 9 + 32,
            32 * 32 * 9 + 32,
            64 * 32 * 9 + 64,
            64 * 64 * 9 + 64,
            128 * 64 * 9 + 128,
            128 * 128 * 9 + 128,
            64 * 192 * 9 + 64,
            64 * 64 * 9 + 64,
            32 * 96 * 9 + 32,
            32 * 32 * 9 + 32,
            25 * 32 + 25,
            3 * 12 * 9 + 3,
        ]
        assert sum(layers) == 472672
        cfg = KpnConfig()
        assert cfg.parameter_count() == 472672
        assert kpn_init(cfg, 0).parameter_count() == 472672

    def test_head_channels(self):
        params = kpn_init(KpnConfig(kernel_width=3), 0)
        assert params.layers["head"].weights.shape[0] == 9

    @pytest.mark.parametrize(
        "kw", [{"levels": 0}, {"base_channels": 0}, {"kernel_width": 4}, {"dilations": (1, 1)}, {"dilations": (0,)}]
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgument):
            KpnConfig(**kw)

    def test_dict_roundtrip(self):
        cfg = KpnConfig(levels=2, dilations=(3, 1), normalize_kernels=True)
        assert KpnConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.dilations == (1, 3)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = kpn_init(SMALL, 7).arrays(), kpn_init(SMALL, 7).arrays()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    def test_different_seed(self):
        a, b = kpn_init(SMALL, 1).arrays(), kpn_init(SMALL, 2).arrays()
        assert not np.array_equal(a["enc0.conv1.weight"], b["enc0.conv1.weight"])

    def test_zero_biases_except_head(self):
        arrays = kpn_init(SMALL, 0).arrays()
        for k, v in arrays.items():
            if k.endswith(".bias") and not k.startswith("head"):
                assert not v.any(), k
        head = arrays["head.bias"]
        assert head[4] == 1.0 and np.count_nonzero(head) == 1

    def test_identity_start_default(self):
        params = kpn_init(KpnConfig(), 0)
        r = np.random.default_rng(3)
        for _ in range(3):
            img = r.random((1, 3, 64, 64))
            out = derain(params, img)
            assert psnr(out, img) >= 30.0
            assert np.mean(np.abs(out - img)) <= 0.02

    def test_identity_start_softmax_mode(self):
        params = kpn_init(KpnConfig(levels=2, base_channels=8, normalize_kernels=True), 0)
        img = np.random.default_rng(4).random((1, 3, 32, 32))
        out = derain(params, img)
        assert psnr(out, img) >= 30.0
        assert np.mean(np.abs(out - img)) <= 0.02


class TestForward:
    def test_shape_contract(self):
        params = kpn_init(KpnConfig(), 0, np.float32)
        img = np.random.default_rng(0).random((1, 3, 64, 64)).astype(np.float32)
        assert kpn_forward(params, img).shape == (1, 25, 64, 64)
        assert derain(params, img).shape == img.shape

    def test_indivisible_names_multiple(self):
        params = kpn_init(KpnConfig(), 0)
        with pytest.raises(InvalidArgument, match="multiples of 4"):
            kpn_forward(params, np.zeros((1, 3, 30, 32)))

    def test_channel_mismatch(self):
        with pytest.raises(InvalidArgument):
            kpn_forward(kpn_init(SMALL, 0), np.zeros((1, 1, 8, 8)))

    def test_deterministic(self, rng):
        params = kpn_init(SMALL, 0)
        img = rng.random((2, 3, 8, 8))
        assert kpn_forward(params, img).tobytes() == kpn_forward(params, img.copy()).tobytes()
        k = kpn_forward(params, img)
        np.testing.assert_array_equal(k[0], kpn_forward(params, img[:1])[0])

    def test_hand_set_identity(self, rng):
        params = kpn_init(KpnConfig(levels=2, base_channels=4), 0)
        arrays = params.arrays()
        arrays["head.weight"] = np.zeros_like(arrays["head.weight"])
        params = params.with_arrays(arrays)
        img = rng.random((1, 3, 16, 16))
        np.testing.assert_array_equal(derain(params, img), img)

    def test_single_dilation_shapes(self, rng):
        img = rng.random((1, 3, 16, 16))
        one = kpn_init(KpnConfig(levels=2, base_channels=4, dilations=(1,)), 0)
        four = kpn_init(KpnConfig(levels=2, base_channels=4), 0)
        assert one.fusion.n_scales == 1
        assert derain(one, img).shape == derain(four, img).shape == img.shape

    @pytest.mark.parametrize("normalize", [False, True])
    def test_composition_oracle(self, normalize):
        r = np.random.default_rng(11)
        cfg = KpnConfig(levels=2, base_channels=4, kernel_width=5, dilations=(1, 2, 3, 4), normalize_kernels=normalize)
        params = kpn_init(cfg, 5)
        arrays = {k: v + 0.1 * r.standard_normal(v.shape) for k, v in params.arrays().items()}
        params = params.with_arrays(arrays)
        img = r.random((1, 3, 12, 16))
        np.testing.assert_allclose(derain(params, img), derain_straight_line(params, img), atol=1e-10, rtol=0)


def _perturbed(cfg, seed, scale=0.05):
    r = np.random.default_rng(seed)
    params = kpn_init(cfg, seed)
    return params.with_arrays({k: v + scale * r.standard_normal(v.shape) for k, v in params.arrays().items()})


def _flat_index(params, rng, count):
    """Random (name, flat index) pairs, spread across layers."""
    arrays = params.arrays()
    names = list(arrays)
    picks = []
    for _ in range(count):
        name = names[int(rng.integers(len(names)))]
        picks.append((name, int(rng.integers(arrays[name].size))))
    return picks


def fd_check_params(params, loss_fn, grads, picks, h=1e-5, floor=1e-5):
    # central differences on an O(1) loss carry ~1e-10 absolute noise, so entries
    # far below ``floor`` are compared in absolute terms
    arrays = params.arrays()
    num, ana = [], []
    for name, i in picks:
        if straddles_kink(loss_fn, arrays[name], i, h):
            continue
        flat = arrays[name].reshape(-1)
        num.append(numeric_grad(loss_fn, flat, h, index=[i])[0])
        ana.append(grads[name].reshape(-1)[i])
    return max_rel_error(num, ana, floor)


class TestBackward:
    def test_zero_grad(self, rng):
        params = kpn_init(SMALL, 0)
        img = rng.random((1, 3, 8, 8))
        grads = kpn_backward(params, img, np.zeros((1, 3, 8, 8)))
        assert set(grads) == set(params.arrays())
        for g in grads.values():
            assert not g.any()

    def test_linearity(self, rng):
        params = _perturbed(SMALL, 1)
        img = rng.random((1, 3, 8, 8))
        g = rng.standard_normal(img.shape)
        a, b = kpn_backward(params, img, g), kpn_backward(params, img, -2.5 * g)
        for k in a:
            np.testing.assert_allclose(b[k], -2.5 * a[k], rtol=1e-12, atol=1e-14)

    def test_shapes(self, rng):
        params = kpn_init(SMALL, 0)
        grads = kpn_backward(params, rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8)))
        for k, v in params.arrays().items():
            assert grads[k].shape == v.shape

    def test_shape_mismatch(self, rng):
        with pytest.raises(InvalidArgument):
            kpn_backward(kpn_init(SMALL, 0), rng.random((1, 3, 8, 8)), np.zeros((1, 3, 8, 4)))

    @pytest.mark.parametrize("normalize", [False, True])
    def test_projection_fd_one_percent(self, normalize):
        cfg = KpnConfig(levels=2, base_channels=6, kernel_width=3, dilations=(1, 2), normalize_kernels=normalize)
        params = _perturbed(cfg, 21)
        r = np.random.default_rng(22)
        img = r.random((1, 3, 8, 8))
        proj = r.standard_normal(img.shape)
        grads = kpn_backward(params, img, proj)
        n = max(1, params.parameter_count() // 100)
        picks = _flat_index(params, r, n)
        err = fd_check_params(params, lambda: float(np.sum(derain(params, img) * proj)), grads, picks)
        assert err <= 1e-4

    def test_loss_through_network_default_32(self):
        params = _perturbed(KpnConfig(), 31, scale=0.01)
        r = np.random.default_rng(32)
        img = r.random((1, 3, 32, 32))
        target = np.clip(img + 0.1 * r.standard_normal(img.shape), 0, 1)
        lcfg = LossConfig()
        out, cache = derain_forward(params, img)
        grads = derain_backward(params, cache, combined_loss_backward(out, target, lcfg))
        picks = _flat_index(params, r, 50)
        err = fd_check_params(params, lambda: combined_loss(derain(params, img), target, lcfg), grads, picks)
        assert err <= 1e-3
