import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from spem.attention import (ReweightVariant, SEAttention, SPEMAttention, SpemParams, excitation, recalibrate,
                            reweight, se_forward, se_hidden, spem_forward)
from spem.autograd import Tensor
from spem.errors import ConfigError, ShapeError
from spem.gradcheck import REWEIGHT_CODES, run_selector
from spem.pooling import AdaptiveMix, MixCoefficient, global_max_pool, global_min_pool, mix_pool

SIG_M1 = 1.0 / (1.0 + math.exp(1.0))
V = ReweightVariant
SIGMOID_VARIANTS = [v for v in V if v not in (V.SHARED_ADD_NO_SIGMOID, V.NO_REWEIGHT, V.SIGMOID_THEN_ADD)]


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def randomized(channels, variant, rng, scale=2.0):
    params = SpemParams(channels, variant, MixCoefficient(*rng.uniform(0.2, 1.5, 2)))
    for p in params.parameters():
        p.data[...] = rng.uniform(-scale, scale, p.shape)
    return params


def pools(x):
    t = Tensor(x)
    return global_max_pool(t), global_min_pool(t)


class TestExcitation:
    def test_init_is_sigmoid_minus_one(self):
        p = SpemParams(5)
        u = Tensor(np.random.default_rng(0).normal(0, 100, size=(5, 1, 1)))
        out = excitation(u, p.gamma_exc, p.beta_exc).data
        np.testing.assert_allclose(out, SIG_M1, rtol=0, atol=1e-16)
        np.testing.assert_allclose(out, 0.2689414, rtol=0, atol=1e-7)

    def test_unit_gamma_zero_input(self):
        out = excitation(Tensor(np.zeros((1, 1, 1))), Tensor([1.0]), Tensor([0.0]))
        assert out.item() == 0.5

    def test_gamma_two(self):
        out = excitation(Tensor(np.ones((1, 1, 1))), Tensor([2.0]), Tensor([0.0]))
        assert out.item() == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-15)
        assert out.item() == pytest.approx(0.8807971, abs=1e-7)

    def test_single_sigmoid(self):
        # a nested sigmoid would give sigmoid(sigmoid(1)) = 0.6750
        out = excitation(Tensor(np.ones((1, 1, 1))), Tensor([1.0]), Tensor([0.0]))
        assert out.item() == pytest.approx(sig(1.0), abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            excitation(Tensor(np.ones((3, 1, 1))), Tensor(np.ones(2)), Tensor(np.ones(2)))


class TestReweight:
    def test_init_values(self):
        f_max, f_min = pools(np.random.default_rng(1).normal(size=(4, 3, 3)))
        expected = {
            V.SHARED_ADD_SIGMOID: SIG_M1,
            V.SHARED_ADD_NO_SIGMOID: -1.0,
            V.NO_REWEIGHT: 1.0,
            V.MAX_ONLY: SIG_M1,
            V.MIN_ONLY: SIG_M1,
            V.UNSHARED_ADD_SIGMOID: sig(-2.0),
            V.SHARED_MUL_SIGMOID: sig(1.0),
            V.SIGMOID_THEN_ADD: 2 * SIG_M1,
            V.SIGMOID_THEN_MUL: SIG_M1 ** 2,
        }
        for variant, value in expected.items():
            out = reweight(f_max, f_min, SpemParams(4, variant), variant).data
            np.testing.assert_allclose(out, value, rtol=0, atol=1e-15, err_msg=variant.value)

    def test_each_variant_against_formula(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 4, 4))
        fmax, fmin = x.max(axis=(2, 3), keepdims=True), x.min(axis=(2, 3), keepdims=True)
        for variant in V:
            p = randomized(3, variant, rng)
            if variant is V.NO_REWEIGHT:
                expected = np.ones_like(fmax)
            else:
                g, b = p.gamma_rew.data.reshape(3, 1, 1), p.beta_rew.data.reshape(3, 1, 1)
                gmax, gmin = g * fmax + b, g * fmin + b
                expected = {
                    V.SHARED_ADD_SIGMOID: lambda: sig(g * fmin + g * fmax + b),
                    V.SHARED_ADD_NO_SIGMOID: lambda: g * fmin + g * fmax + b,
                    V.UNSHARED_ADD_SIGMOID: lambda: sig(gmax + p.gamma_rew_min.data.reshape(3, 1, 1) * fmin
                                                        + p.beta_rew_min.data.reshape(3, 1, 1)),
                    V.SHARED_MUL_SIGMOID: lambda: sig(gmax * gmin),
                    V.SIGMOID_THEN_ADD: lambda: sig(gmax) + sig(gmin),
                    V.SIGMOID_THEN_MUL: lambda: sig(gmax) * sig(gmin),
                    V.MAX_ONLY: lambda: sig(gmax),
                    V.MIN_ONLY: lambda: sig(gmin),
                }[variant]()
            out = reweight(Tensor(fmax), Tensor(fmin), p, variant).data
            np.testing.assert_allclose(out, expected, rtol=1e-13, atol=1e-15, err_msg=variant.value)

    def test_parameter_layout(self):
        assert SpemParams(8, V.NO_REWEIGHT).gamma_rew is None
        unshared = SpemParams(8, V.UNSHARED_ADD_SIGMOID)
        assert unshared.gamma_rew_min is not None and unshared.gamma_rew_min is not unshared.gamma_rew
        assert len(unshared.parameters()) == 6
        assert len(SpemParams(8).parameters()) == 4

    def test_shape_mismatch(self):
        p = SpemParams(3)
        with pytest.raises(ShapeError):
            reweight(Tensor(np.ones((3, 1, 1))), Tensor(np.ones((2, 1, 1))), p, V.SHARED_ADD_SIGMOID)

    def test_parse(self):
        assert V.parse("ours") is V.SHARED_ADD_SIGMOID
        assert V.parse(" B ") is V.SHARED_ADD_NO_SIGMOID
        with pytest.raises(ConfigError):
            V.parse("h")

    @pytest.mark.parametrize("variant", SIGMOID_VARIANTS, ids=lambda v: v.value)
    @pytest.mark.parametrize("seed", range(5))
    def test_sigmoid_variants_in_open_unit_interval(self, variant, seed):
        rng = np.random.default_rng(seed)
        f_max, f_min = pools(rng.normal(size=(6, 4, 4)))
        out = reweight(f_max, f_min, randomized(6, variant, rng), variant).data
        assert np.all(out > 0) and np.all(out < 1)

    def test_sigmoid_then_add_in_open_zero_two(self):
        rng = np.random.default_rng(3)
        f_max, f_min = pools(rng.normal(size=(6, 4, 4)))
        out = reweight(f_max, f_min, randomized(6, V.SIGMOID_THEN_ADD, rng), V.SIGMOID_THEN_ADD).data
        assert np.all(out > 0) and np.all(out < 2)

    def test_no_sigmoid_is_not_clamped(self):
        p = SpemParams(2, V.SHARED_ADD_NO_SIGMOID)
        p.gamma_rew.data[...] = [3.0, -3.0]
        p.beta_rew.data[...] = [0.5, 0.5]
        x = np.full((2, 2, 2), 2.0)
        out = reweight(*pools(x), p, V.SHARED_ADD_NO_SIGMOID).data.ravel()
        np.testing.assert_allclose(out, [12.5, -11.5], rtol=1e-15)

    @given(hnp.arrays(np.float64, (3, 1, 1), elements=st.floats(-50, 50)))
    def test_max_only_equals_min_only_on_constant_maps(self, level):
        x = np.broadcast_to(level, (3, 4, 4)).copy()
        rng = np.random.default_rng(0)
        params = randomized(3, V.MAX_ONLY, rng)
        a = reweight(*pools(x), params, V.MAX_ONLY).data
        b = reweight(*pools(x), params, V.MIN_ONLY).data
        np.testing.assert_array_equal(a, b)


class TestSpemForward:
    @pytest.mark.parametrize("pooling", ["adaptive", "gap", "fixed:0.3"])
    def test_init_map_is_constant(self, pooling):
        att = SPEMAttention(7, pooling=pooling)
        for seed in range(3):
            x = Tensor(np.random.default_rng(seed).normal(0, 10 ** seed, size=(2, 7, 5, 5)))
            v = att.attention_map(x).data
            np.testing.assert_allclose(v, SIG_M1 ** 2, rtol=0, atol=1e-16)
            np.testing.assert_allclose(v, 0.0723295, rtol=0, atol=1e-6)

    def test_no_reweight_equals_excitation(self):
        rng = np.random.default_rng(4)
        p = randomized(3, V.NO_REWEIGHT, rng)
        x = Tensor(rng.normal(size=(3, 5, 5)))
        strategy = AdaptiveMix(p.mix)
        v = spem_forward(x, p, V.NO_REWEIGHT, strategy).data
        np.testing.assert_array_equal(v, excitation(mix_pool(x, strategy), p.gamma_exc, p.beta_exc).data)

    @pytest.mark.parametrize("variant", list(V), ids=lambda v: v.value)
    def test_matches_composition(self, variant):
        rng = np.random.default_rng(5)
        p = randomized(4, variant, rng)
        x = rng.normal(size=(2, 4, 6, 6))
        strategy = AdaptiveMix(p.mix)
        t = Tensor(x)
        f_max, f_min = global_max_pool(t), global_min_pool(t)
        u = mix_pool(t, strategy)
        expected = excitation(u, p.gamma_exc, p.beta_exc).data * reweight(f_max, f_min, p, variant).data
        np.testing.assert_allclose(spem_forward(t, p, variant, strategy).data, expected, rtol=1e-14)

    def test_channel_equivariance(self):
        rng = np.random.default_rng(6)
        c = 6
        p = randomized(c, V.UNSHARED_ADD_SIGMOID, rng)
        x = rng.normal(size=(c, 4, 4))
        perm = rng.permutation(c)
        q = SpemParams(c, V.UNSHARED_ADD_SIGMOID, p.mix)
        for (_, src), (_, dst) in zip(p.named_parameters(), q.named_parameters()):
            dst.data[...] = src.data[perm] if src.ndim == 1 else src.data
        strategy = AdaptiveMix(p.mix)
        v = spem_forward(Tensor(x), p, V.UNSHARED_ADD_SIGMOID, strategy).data
        vp = spem_forward(Tensor(x[perm]), q, V.UNSHARED_ADD_SIGMOID, strategy).data
        np.testing.assert_array_equal(vp, v[perm])

    def test_module_reports_lambda(self):
        assert SPEMAttention(4).lambda_value() == 0.5
        assert SPEMAttention(4, pooling="fixed:0.9").lambda_value() == 0.9
        assert SPEMAttention(4, pooling="gap").lambda_value() is None
        assert len(SPEMAttention(4).mix_coefficients()) == 1
        assert SPEMAttention(4, pooling="fixed:0.9").mix_coefficients() == []

    def test_forced_identity(self):
        att = SPEMAttention(3, force_identity=True)
        x = Tensor(np.random.default_rng(7).normal(size=(2, 3, 4, 4)))
        np.testing.assert_array_equal(att(x).data, x.data)
        assert att.trainable_parameters() == []
        assert att.mix_coefficients() == []
        assert att.lambda_value() is None


class TestRecalibrate:
    def test_ones_and_zeros(self):
        x = Tensor(np.random.default_rng(8).normal(size=(3, 4, 4)))
        np.testing.assert_array_equal(recalibrate(x, Tensor(np.ones((3, 1, 1)))).data, x.data)
        np.testing.assert_array_equal(recalibrate(x, Tensor(np.zeros((3, 1, 1)))).data, 0.0)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 4, 5))
        v = rng.uniform(size=(3, 1, 1))
        expected = np.empty_like(x)
        for c in range(3):
            for h in range(4):
                for w in range(5):
                    expected[c, h, w] = x[c, h, w] * v[c, 0, 0]
        np.testing.assert_array_equal(recalibrate(Tensor(x), Tensor(v)).data, expected)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            recalibrate(Tensor(np.ones((3, 2, 2))), Tensor(np.ones((4, 1, 1))))

    def test_gradient_through_both(self):
        x = Tensor(np.array([[[1.0, 2.0]], [[3.0, 4.0]]]), requires_grad=True)
        v = Tensor(np.array([[[0.5]], [[2.0]]]), requires_grad=True)
        recalibrate(x, v).sum().backward()
        np.testing.assert_array_equal(x.grad, [[[0.5, 0.5]], [[2.0, 2.0]]])
        np.testing.assert_array_equal(v.grad, [[[3.0]], [[7.0]]])


class TestSE:
    def test_zero_weights_give_half(self):
        x = Tensor(np.random.default_rng(10).normal(size=(32, 4, 4)))
        out = se_forward(x, Tensor(np.zeros((32, 2))), Tensor(np.zeros((2, 32))), r=16)
        assert out.shape == (32, 1, 1)
        np.testing.assert_array_equal(out.data, 0.5)

    def test_two_channel_hand_case(self):
        # channel means 1 and 2; W1 = I, W2 = diag(2, -1) -> logits (2, -2)
        x = np.stack([np.full((2, 2), 1.0), np.array([[1.0, 3.0], [2.0, 2.0]])])
        out = se_forward(Tensor(x), Tensor(np.eye(2)), Tensor(np.diag([2.0, -1.0])), r=1).data.ravel()
        np.testing.assert_allclose(out, [0.8807970779778823, 0.11920292202211755], rtol=1e-15)

    def test_relu_cuts_negative_hidden(self):
        x = np.full((2, 2, 2), -1.0)
        out = se_forward(Tensor(x), Tensor(np.eye(2)), Tensor(np.ones((2, 2))), r=1).data.ravel()
        np.testing.assert_array_equal(out, [0.5, 0.5])

    def test_random_weights_in_open_interval(self):
        rng = np.random.default_rng(11)
        att = SEAttention(64, 16, rng)
        v = att.attention_map(Tensor(rng.normal(size=(3, 64, 4, 4)))).data
        assert v.shape == (3, 64, 1, 1)
        assert np.all(v > 0) and np.all(v < 1)

    def test_hidden_width(self):
        assert se_hidden(64, 16) == 4
        assert se_hidden(8, 16) == 1
        with pytest.raises(ConfigError):
            se_hidden(8, 0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            se_forward(Tensor(np.ones((4, 2, 2))), Tensor(np.ones((3, 1))), Tensor(np.ones((1, 4))), r=4)


@pytest.mark.parametrize("selector", ["excitation", "spem"] + [f"reweight:{c}" for c in REWEIGHT_CODES])
def test_gradients_match_finite_differences(selector):
    report = run_selector(selector, seed=3, trials=2)
    assert report and max(report.values()) < 1e-4, report
