"""Quantizer tests: arithmetic examples, surrogate-gradient oracles, properties."""

import numpy as np
import pytest

from dynaquant import autodiff as ad
from dynaquant import quant
from dynaquant.quant import (AffineQuantParams, DGM, STE, calibrate_init,
                             dequantize, dgm_grad, dgm_soft_round,
                             fake_quantize, quantize)


def params_from(s, z, bits, axis=0, dtype=np.float64, learnable=True):
    """Build params with the given effective scales (inverse-softplus exactly)."""
    s = np.asarray(s, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    raw = np.log(np.expm1(s - 1e-12))
    return AffineQuantParams(
        ad.tensor(raw.astype(dtype), requires_grad=learnable),
        ad.tensor(z.astype(dtype), requires_grad=learnable),
        bits, axis)


def surrogate_forward(x, s_raw, z, bits, axis, beta):
    """Soft-round surrogate network, pure numpy: the FD oracle's forward."""
    s = np.logaddexp(0.0, s_raw) + 1e-12
    shape = [1] * x.ndim
    shape[axis] = s.shape[0]
    sb = s.reshape(shape)
    zb = z.reshape(shape)
    u = x / sb + zb
    c = np.clip(u, 0.0, 2 ** bits - 1)
    fl = np.floor(c)
    t = c - fl
    g = 0.5 * np.tanh(beta * (t - 0.5)) / np.tanh(beta / 2.0) + 0.5
    return sb * ((fl + g) - zb)


class TestQuantizeDequantize:
    def test_quantize_example(self):
        p = params_from([0.1], [0.0], bits=8)
        out = quantize(np.array([1.234]), p)
        np.testing.assert_array_equal(out.data, [12.0])

    def test_quantize_clips(self):
        p = params_from([0.1], [0.0], bits=8)
        out = quantize(np.array([100.0]), p)
        np.testing.assert_array_equal(out.data, [255.0])

    def test_quantize_outputs_integer_grid(self):
        rng = np.random.default_rng(0)
        p = params_from([0.07, 0.2], [3.0, -1.5], bits=6, axis=1)
        x = rng.normal(0, 2, (4, 2, 5))
        q = quantize(x, p).data
        assert np.array_equal(q, np.round(q))
        assert q.min() >= 0 and q.max() <= 63

    def test_quantize_nan_rejected(self):
        p = params_from([0.1], [0.0], bits=8)
        with pytest.raises(FloatingPointError):
            quantize(np.array([np.nan]), p)

    def test_dequantize_examples(self):
        p = params_from([0.1], [0.0], bits=8)
        np.testing.assert_allclose(dequantize(np.array([12.0]), p).data, [1.2],
                                   rtol=1e-9)
        p2 = params_from([1.0], [128.0], bits=8)
        np.testing.assert_allclose(dequantize(np.array([128.0]), p2).data, [0.0],
                                   atol=1e-12)

    def test_dequantize_range_contract(self):
        p = params_from([0.1], [0.0], bits=4)
        with pytest.raises(ValueError):
            dequantize(np.array([16.0]), p)
        with pytest.raises(ValueError):
            dequantize(np.array([3.5]), p)

    def test_roundtrip_error_bounded(self):
        rng = np.random.default_rng(1)
        p = params_from([0.05], [7.0], bits=8)
        s = 0.05
        lo, hi = s * (0 - 7.0), s * (255 - 7.0)
        x = rng.uniform(lo, hi, (1, 2000))
        xt = dequantize(quantize(x, p), p).data
        assert np.max(np.abs(xt - x)) <= s / 2 + 1e-12

    def test_fake_quant_idempotent(self):
        rng = np.random.default_rng(2)
        p = params_from([0.11], [4.0], bits=6)
        x = ad.tensor(rng.uniform(-0.4, 6.5, (1, 40)).astype(np.float64))
        once = fake_quantize(x, p)
        twice = fake_quantize(ad.tensor(once.data), p)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-10)


class TestDGMProxy:
    def test_half_point_fixed(self):
        for beta in (1.0, 2.0, 5.0, 10.0):
            np.testing.assert_allclose(dgm_soft_round(np.array([0.5]), beta), 0.5,
                                       atol=1e-12)

    def test_continuous_at_integers(self):
        for beta in (1.0, 2.0, 5.0, 10.0):
            np.testing.assert_allclose(dgm_soft_round(np.array([2.0]), beta), 2.0,
                                       atol=1e-12)
            eps = 1e-9
            lo = dgm_soft_round(np.array([2.0 - eps]), beta)
            hi = dgm_soft_round(np.array([2.0 + eps]), beta)
            assert abs(hi - lo) < 1e-6

    def test_grad_matches_finite_difference(self):
        h = 1e-7
        t = np.array([0.25])
        for beta in (1.0, 2.0, 5.0):
            fd = (dgm_soft_round(t + h, beta) - dgm_soft_round(t - h, beta)) / (2 * h)
            np.testing.assert_allclose(dgm_grad(t, beta), fd, rtol=1e-6)

    def test_strictly_positive_on_dense_grid(self):
        t = np.linspace(0.0, 1.0, 2001)
        for beta in (1.0, 2.0, 5.0, 10.0):
            assert np.all(dgm_grad(t, beta) > 0)

    def test_shape_extrema(self):
        t = np.linspace(0.0, 1.0, 2001)
        for beta in (1.0, 2.0, 5.0, 10.0):
            g = dgm_grad(t, beta)
            assert t[np.argmax(g)] == pytest.approx(0.5, abs=1e-3)
            assert np.argmin(g) in (0, len(t) - 1)
            np.testing.assert_allclose(g[0], g[-1], rtol=1e-10)

    def test_amplitude_modulated_by_beta(self):
        t = np.linspace(0.0, 1.0, 2001)
        betas = [1.0, 2.0, 5.0, 10.0]
        maxima = [dgm_grad(t, b).max() for b in betas]
        minima = [dgm_grad(t, b).min() for b in betas]
        assert all(a < b for a, b in zip(maxima, maxima[1:]))
        assert all(a > b for a, b in zip(minima, minima[1:]))

    def test_bad_beta(self):
        with pytest.raises(ValueError):
            dgm_grad(np.array([0.3]), 0.0)
        with pytest.raises(ValueError):
            DGM(-1.0)


class TestFakeQuantizeGradients:
    def test_ste_in_range_identity(self):
        p = params_from([0.1], [0.0], bits=8)
        x = ad.tensor(np.array([1.234]), requires_grad=True, dtype=np.float64)
        out = fake_quantize(x, p, STE)
        np.testing.assert_allclose(out.data, [1.2], rtol=1e-9)
        ad.backward(ad.sum_(out))
        np.testing.assert_allclose(x.grad, [1.0], rtol=1e-9)

    def test_ste_out_of_range_zero(self):
        p = params_from([0.1], [0.0], bits=8, learnable=True)
        x = ad.tensor(np.array([[100.0, -3.0]]), requires_grad=True, dtype=np.float64)
        out = fake_quantize(x, p, STE)
        ad.backward(ad.sum_(out))
        np.testing.assert_array_equal(x.grad, [[0.0, 0.0]])
        # saturated endpoints keep learning the range: dz = -s per element
        np.testing.assert_allclose(p.z.grad, [-2 * 0.1], rtol=1e-6)

    @pytest.mark.parametrize("bits,beta", [(4, 1.0), (6, 2.0), (8, 5.0)])
    def test_dgm_matches_surrogate_fd(self, bits, beta):
        rng = np.random.default_rng(bits * 100 + int(beta))
        n_max = 2 ** bits - 1
        for _ in range(12):
            c = int(rng.integers(1, 4))
            shape = (2, c, 3, 2)
            s = rng.uniform(0.05, 0.3, c)
            z = rng.uniform(0.0, n_max, c)
            u = rng.uniform(-2.0, n_max + 2.0, shape)
            # keep every u away from the clip kinks so FD stays valid
            for edge in (0.0, float(n_max)):
                near = np.abs(u - edge) < 5e-3
                u[near] = edge + np.sign(u[near] - edge + 1e-12) * 5e-3
            x = (u - z.reshape(1, c, 1, 1)) * s.reshape(1, c, 1, 1)

            p = params_from(s, z, bits, axis=1)
            proj = rng.standard_normal(shape)
            xt = ad.tensor(x.copy(), requires_grad=True, dtype=np.float64)
            out = fake_quantize(xt, p, DGM(beta))
            ad.backward(ad.sum_(out * ad.tensor(proj, dtype=np.float64)))

            raw = p.s_raw.data.copy()
            zv = p.z.data.copy()

            def loss(xa, ra, za):
                return float((surrogate_forward(xa, ra, za, bits, 1, beta)
                              * proj).sum())

            hx = 1e-6
            fd_x = (surrogate_forward(x + hx, raw, zv, bits, 1, beta)
                    - surrogate_forward(x - hx, raw, zv, bits, 1, beta)) / (2 * hx)
            np.testing.assert_allclose(xt.grad, fd_x * proj, rtol=1e-4, atol=1e-8)

            hp = 1e-7
            for i in range(c):
                dr = np.zeros(c)
                dr[i] = hp
                fd_s = (loss(x, raw + dr, zv) - loss(x, raw - dr, zv)) / (2 * hp)
                fd_z = (loss(x, raw, zv + dr) - loss(x, raw, zv - dr)) / (2 * hp)
                assert p.s_raw.grad[i] == pytest.approx(fd_s, rel=1e-4, abs=1e-6)
                assert p.z.grad[i] == pytest.approx(fd_z, rel=1e-4, abs=1e-6)

    def test_cross_module_round_with_dgm_backward(self):
        """A bare round op given the proxy backward agrees with fake_quantize."""
        beta = 5.0
        rng = np.random.default_rng(9)
        x = rng.uniform(10.0, 200.0, (1, 50))

        proxy_round = ad.register_custom_gradient(
            lambda a: (quant.round_half_away(a), a),
            lambda g, saved: (g * dgm_grad(saved - np.floor(saved), beta),),
            name="dgm_round")
        xt1 = ad.tensor(x.copy(), requires_grad=True, dtype=np.float64)
        ad.backward(ad.sum_(proxy_round(xt1)))

        p = params_from([1.0], [0.0], bits=8, axis=0)
        xt2 = ad.tensor(x.copy(), requires_grad=True, dtype=np.float64)
        ad.backward(ad.sum_(fake_quantize(xt2, p, DGM(beta))))
        np.testing.assert_allclose(xt1.grad, xt2.grad, rtol=1e-9)


class TestCalibration:
    def test_symmetric_range_example(self):
        x = np.linspace(-1.0, 1.0, 101).reshape(1, 1, 101)
        p = calibrate_init(x, bits=8, channel_axis=1)
        np.testing.assert_allclose(p.scale_values(), 2.0 / 255.0, rtol=1e-6)
        np.testing.assert_allclose(p.z.data, 127.5, rtol=1e-5)

    def test_all_zero_channel_degenerate(self):
        x = np.zeros((2, 3, 4))
        p = calibrate_init(x, bits=8, channel_axis=1)
        np.testing.assert_allclose(p.scale_values(), 1e-8, rtol=1e-3)
        np.testing.assert_allclose(p.z.data, 0.0, atol=1e-12)

    def test_post_init_reconstruction_bound(self):
        rng = np.random.default_rng(5)
        x = rng.normal(0, 3, (8, 4, 6, 6))
        p = calibrate_init(x, bits=6, channel_axis=1)
        xt = fake_quantize(ad.tensor(x, dtype=np.float64), p).data
        s = p.scale_values().reshape(1, 4, 1, 1)
        assert np.all(np.abs(xt - x) <= s / 2 + 1e-9)

    def test_recalibrate_channel_mismatch(self):
        p = calibrate_init(np.ones((1, 3, 2, 2)), bits=8, channel_axis=1)
        with pytest.raises(ad.ShapeError):
            quant.recalibrate(p, np.ones((1, 5, 2, 2)))


class TestInvariants:
    def test_grid_property(self):
        rng = np.random.default_rng(6)
        p = params_from([0.13, 0.07], [11.0, 3.0], bits=5, axis=1)
        x = rng.normal(0.5, 1.0, (3, 2, 16))
        out = fake_quantize(ad.tensor(x, dtype=np.float64), p).data
        s = p.scale_values().reshape(1, 2, 1)
        z = p.z.data.reshape(1, 2, 1)
        k = out / s + z
        np.testing.assert_allclose(k, np.round(k), atol=1e-6)
        assert k.min() >= -1e-6 and k.max() <= 31 + 1e-6

    @pytest.mark.parametrize("bits", [4, 6, 8])
    def test_roundtrip_bound_in_range(self, bits):
        rng = np.random.default_rng(bits)
        s, z = 0.02, 31.0
        p = params_from([s], [z], bits=bits)
        n_max = 2 ** bits - 1
        x = (rng.uniform(0, n_max, (1, 20000)) - z) * s
        out = fake_quantize(ad.tensor(x, dtype=np.float64), p).data
        assert np.max(np.abs(out - x)) <= s / 2 * (1 + 1e-9)

    @pytest.mark.parametrize("bits", [2, 4, 6, 8])
    def test_more_bits_reduce_error(self, bits):
        rng = np.random.default_rng(7)
        x = rng.normal(0, 1, (1, 2, 500))
        lo = fake_quantize(ad.tensor(x, dtype=np.float64),
                           calibrate_init(x, bits, 1)).data
        hi = fake_quantize(ad.tensor(x, dtype=np.float64),
                           calibrate_init(x, bits + 2, 1)).data
        assert np.abs(hi - x).mean() <= np.abs(lo - x).mean()

    def test_scale_positive_after_extreme_steps(self):
        p = params_from([0.1], [0.0], bits=8, dtype=np.float32)
        p.s_raw.data = np.array([-40.0], dtype=np.float32)  # huge negative raw
        assert p.scale_values()[0] > 0

    def test_channel_mismatch_raises(self):
        p = params_from([0.1, 0.2], [0.0, 0.0], bits=8, axis=1)
        with pytest.raises(ad.ShapeError):
            fake_quantize(ad.tensor(np.ones((2, 3, 4)), dtype=np.float64), p)
