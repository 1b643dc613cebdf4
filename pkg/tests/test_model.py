import math

import numpy as np
import pytest

from conftest import fd_gradients, max_rel_err

import ctxmask.autodiff as ad
from ctxmask.errors import ConfigError
from ctxmask.model import (
    ContextVector,
    GaussianPrediction,
    ModelSpec,
    context_distance,
    context_mask,
    forward,
    gaussian_nll,
    init_params,
    pair_loss,
    rowwise_gaussian_nll,
)


def continuous_spec(variant="FCN+CM", lambda1=0.0, lambda2=10.0, distance=None):
    return ModelSpec(
        variant,
        input_dim=3,
        output_dim=2,
        context_kind="continuous",
        context_dim=2,
        hidden=(8, 8, 8, 8),
        mask_hidden=6,
        lambda1=lambda1,
        lambda2=lambda2,
        distance=distance,
    )


def ctx(values):
    return ContextVector("continuous", np.asarray(values, dtype=float))


class Pair:
    def __init__(self, x, y, context):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.context = context


class TestContextVector:
    def test_indicator_wrong_length(self):
        with pytest.raises(ConfigError, match="36"):
            ContextVector("indicator", np.zeros(37))

    def test_indicator_non_binary(self):
        bad = np.zeros(36)
        bad[0] = 0.5
        with pytest.raises(ConfigError, match="0 or 1"):
            ContextVector("indicator", bad)

    def test_visual_shape_and_range(self):
        with pytest.raises(ConfigError):
            ContextVector("visual", np.zeros((31, 32)))
        with pytest.raises(ConfigError, match=r"\[0, 1\]"):
            ContextVector("visual", np.full((32, 32), 1.5))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            ContextVector("spectral", np.zeros(3))


class TestModelSpec:
    def test_lambda1_rejected_for_unregularized(self):
        with pytest.raises(ConfigError, match="lambda1"):
            continuous_spec("FCN+CM", lambda1=0.1)

    def test_neuralreg_requires_unit_lambda2(self):
        with pytest.raises(ConfigError, match="lambda2 must be 1"):
            continuous_spec("FCN+CM+NeuralReg", lambda1=0.1, lambda2=10.0)

    def test_neural_conv_requires_visual(self):
        with pytest.raises(ConfigError, match="visual"):
            continuous_spec(
                "FCN+CM+NeuralReg", lambda1=0.1, lambda2=1.0, distance="neural-conv"
            )

    def test_l2reg_uses_euclidean(self):
        with pytest.raises(ConfigError, match="euclidean"):
            continuous_spec("FCN+CM+L2Reg", lambda1=0.1, distance="neural-fc")

    def test_zero_lambda1_allowed_on_regularized_variants(self):
        # needed by the trajectory-equivalence checks
        spec = continuous_spec("FCN+CM+L2Reg", lambda1=0.0)
        assert spec.lambda1 == 0.0


class TestContextMask:
    def test_identity_at_initialization(self):
        # mask head is zero-initialized: 2*sigmoid(0) == 1 exactly
        spec = continuous_spec()
        store = init_params(spec, seed=0)
        mask = context_mask(ctx([1.0, 4.0]), spec, store)
        assert np.array_equal(mask.value, np.ones(8))

    def test_identical_contexts_identical_masks(self, rng):
        spec = continuous_spec()
        store = init_params(spec, seed=1)
        store["mask.fc2.w"] = rng.standard_normal((6, 8))
        m1 = context_mask(ctx([2.0, 3.0]), spec, store)
        m2 = context_mask(ctx([2.0, 3.0]), spec, store)
        assert np.array_equal(m1.value, m2.value)

    def test_output_length_for_each_kind(self, rng):
        for kind, payload in [
            ("indicator", (np.arange(36) % 2).astype(float)),
            ("visual", rng.uniform(0, 1, (32, 32))),
            ("continuous", np.array([1.0, 2.0])),
        ]:
            spec = ModelSpec(
                "FCN+CM",
                input_dim=3,
                output_dim=1,
                context_kind=kind,
                context_dim=2 if kind == "continuous" else None,
                hidden=(7, 5, 5, 5),
                mask_hidden=4,
            )
            store = init_params(spec, seed=0)
            mask = context_mask(ContextVector(kind, payload), spec, store)
            assert mask.value.shape == (7,)

    def test_kind_mismatch_rejected(self):
        spec = continuous_spec()
        store = init_params(spec, seed=0)
        with pytest.raises(ConfigError, match="continuous"):
            context_mask(ContextVector("indicator", np.zeros(36)), spec, store)

    def test_mask_strictly_positive(self, rng):
        spec = continuous_spec()
        store = init_params(spec, seed=2)
        store["mask.fc2.w"] = 3.0 * rng.standard_normal((6, 8))
        store["mask.fc2.b"] = rng.standard_normal(8)
        mask = context_mask(ctx([5.0, 0.3]), spec, store)
        assert (mask.value > 0).all()
        assert (mask.value < 2).all()


class TestForward:
    def test_fcn_ignores_context(self, rng):
        spec = ModelSpec("FCN", 3, 2, "continuous", context_dim=2, hidden=(8, 8, 8, 8))
        store = init_params(spec, seed=0)
        x = rng.standard_normal(3)
        p1 = forward(x, ctx([1.0, 1.0]), spec, store)
        p2 = forward(x, ctx([9.0, 2.0]), spec, store)
        assert np.array_equal(p1.mean, p2.mean)
        assert np.array_equal(p1.std, p2.std)

    def test_mask_of_ones_reproduces_fcn_bitwise(self, rng):
        fcn_spec = ModelSpec("FCN", 3, 2, "continuous", context_dim=2, hidden=(8, 8, 8, 8))
        cm_spec = continuous_spec("FCN+CM")
        seed = 42
        fcn_store = init_params(fcn_spec, seed)
        cm_store = init_params(cm_spec, seed)
        # shared trunk parameters are initialized identically by name
        for name in fcn_store.names():
            assert np.array_equal(fcn_store[name], cm_store[name])
        # perturb the mask head, then force the mask back to exact ones
        cm_store["mask.fc2.w"] = rng.standard_normal((6, 8))
        cm_store["mask.fc2.w"] = np.zeros((6, 8))
        x = rng.standard_normal(3)
        p_fcn = forward(x, None, fcn_spec, fcn_store)
        p_cm = forward(x, ctx([3.0, 0.5]), cm_spec, cm_store)
        assert np.array_equal(p_fcn.mean, p_cm.mean)
        assert np.array_equal(p_fcn.std, p_cm.std)

    def test_context_changes_output_with_random_mask_net(self, rng):
        spec = continuous_spec("FCN+CM")
        store = init_params(spec, seed=3)
        store["mask.fc2.w"] = rng.standard_normal((6, 8))
        x = rng.standard_normal(3)
        p1 = forward(x, ctx([0.5, 0.5]), spec, store)
        p2 = forward(x, ctx([8.0, 9.0]), spec, store)
        assert not np.array_equal(p1.mean, p2.mean)

    def test_cc_uses_context(self, rng):
        spec = ModelSpec("FCN+CC", 3, 2, "continuous", context_dim=2, hidden=(8, 8, 8, 8))
        store = init_params(spec, seed=0)
        x = rng.standard_normal(3)
        p1 = forward(x, ctx([0.5, 0.5]), spec, store)
        p2 = forward(x, ctx([8.0, 9.0]), spec, store)
        assert not np.array_equal(p1.mean, p2.mean)

    def test_std_strictly_positive(self, rng):
        spec = continuous_spec()
        store = init_params(spec, seed=1)
        p = forward(rng.standard_normal(3), ctx([1.0, 1.0]), spec, store)
        assert (p.std > 0).all()

    def test_missing_context_rejected(self):
        spec = continuous_spec()
        store = init_params(spec, seed=0)
        with pytest.raises(ConfigError, match="context"):
            forward(np.zeros(3), None, spec, store)


class TestGaussianNll:
    def test_standard_normal_at_mean(self):
        # formula evaluation: dim 1, mu=0, sigma=1, y=0 -> log(2*pi)/2
        pred = GaussianPrediction(np.zeros(1), np.ones(1))
        nll = gaussian_nll(pred, np.zeros(1))
        assert abs(float(nll.value) - 0.5 * math.log(2 * math.pi)) < 1e-12

    def test_symmetric_in_residual_sign(self, rng):
        mu = rng.standard_normal(3)
        sigma = np.abs(rng.standard_normal(3)) + 0.5
        r = rng.standard_normal(3)
        pred = GaussianPrediction(mu, sigma)
        up = float(gaussian_nll(pred, mu + r).value)
        down = float(gaussian_nll(pred, mu - r).value)
        assert up == down

    def test_gradient_matches_fd(self, rng):
        y = rng.standard_normal((3, 2))
        store = ad.ParameterStore(
            {
                "mean": rng.standard_normal((3, 2)),
                "raw": rng.standard_normal((3, 2)) * 0.3,
            }
        )

        def loss(s):
            std = ad.add_scalar(ad.softplus(s.node("raw")), 1e-4)
            return ad.mean_all(rowwise_gaussian_nll(s.node("mean"), std, y))

        ad.backward(loss(store), store)
        analytic = {n: store.grad(n).copy() for n in store.names()}
        numeric = fd_gradients(loss, store)
        for name in store.names():
            assert max_rel_err(analytic[name], numeric[name]) < 1e-4

    def test_minimized_at_mean_equal_target(self):
        # gradient of nll w.r.t. mu changes sign around mu = y
        y = np.array([[0.7]])
        for mu, sign in [(0.6, -1.0), (0.8, 1.0)]:
            store = ad.ParameterStore({"mean": np.array([[mu]])})
            nll = rowwise_gaussian_nll(store.node("mean"), ad.constant(np.ones((1, 1))), y)
            ad.backward(ad.mean_all(nll), store)
            assert np.sign(store.grad("mean")[0, 0]) == sign

    def test_non_positive_std_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            GaussianPrediction(np.zeros(2), np.array([1.0, 0.0]))


class TestContextDistance:
    def test_euclidean_self_distance_zero(self):
        spec = continuous_spec("FCN+CM+L2Reg", lambda1=0.1)
        store = init_params(spec, seed=0)
        d = context_distance(ctx([1.0, 2.0]), ctx([1.0, 2.0]), spec, store)
        assert float(d.value) == 0.0

    def test_euclidean_three_four_five(self):
        spec = ModelSpec(
            "FCN+CM+L2Reg", 3, 1, "continuous", context_dim=3,
            hidden=(4, 4, 4, 4), lambda1=0.1,
        )
        store = init_params(spec, seed=0)
        d = context_distance(ctx([3.0, 4.0, 0.0]), ctx([0.0, 0.0, 0.0]), spec, store)
        assert float(d.value) == 5.0

    def test_euclidean_has_no_gradient(self):
        spec = continuous_spec("FCN+CM+L2Reg", lambda1=0.1)
        store = init_params(spec, seed=0)
        d = context_distance(ctx([1.0, 2.0]), ctx([4.0, 6.0]), spec, store)
        assert float(d.value) == 5.0
        ad.backward(d, store)
        assert not store.flat_grads.any()

    def test_neural_distance_symmetric(self, rng):
        spec = continuous_spec("FCN+CM+NeuralReg", lambda1=0.1, lambda2=1.0)
        store = init_params(spec, seed=7)
        a, b = ctx([1.0, 5.0]), ctx([3.0, 0.2])
        dab = context_distance(a, b, spec, store)
        dba = context_distance(b, a, spec, store)
        assert float(dab.value) == float(dba.value)

    def test_kind_mismatch(self):
        spec = continuous_spec("FCN+CM+L2Reg", lambda1=0.1)
        store = init_params(spec, seed=0)
        with pytest.raises(ConfigError):
            context_distance(
                ctx([1.0, 2.0]), ContextVector("indicator", np.zeros(36)), spec, store
            )


class TestPairLoss:
    def make_pair(self, rng):
        qi = Pair(rng.standard_normal(3), rng.standard_normal(2), ctx([1.0, 2.0]))
        qj = Pair(rng.standard_normal(3), rng.standard_normal(2), ctx([4.0, 0.5]))
        return qi, qj

    def test_unregularized_equals_mean_of_nlls(self, rng):
        spec = continuous_spec("FCN+CM")
        store = init_params(spec, seed=5)
        store["mask.fc2.w"] = rng.standard_normal((6, 8))
        qi, qj = self.make_pair(rng)
        loss = pair_loss(qi, qj, spec, store)
        nll_i = gaussian_nll(forward(qi.x, qi.context, spec, store), qi.y)
        nll_j = gaussian_nll(forward(qj.x, qj.context, spec, store), qj.y)
        expected = 0.5 * (float(nll_i.value) + float(nll_j.value))
        assert abs(float(loss.value) - expected) < 1e-12

    def test_identical_contexts_zero_regularizer(self, rng):
        spec = continuous_spec("FCN+CM+L2Reg", lambda1=0.5)
        store = init_params(spec, seed=6)
        store["mask.fc2.w"] = rng.standard_normal((6, 8))
        c = ctx([2.0, 2.0])
        qi = Pair(rng.standard_normal(3), rng.standard_normal(2), c)
        qj = Pair(rng.standard_normal(3), rng.standard_normal(2), c)
        loss = pair_loss(qi, qj, spec, store)
        nll_i = gaussian_nll(forward(qi.x, qi.context, spec, store), qi.y)
        nll_j = gaussian_nll(forward(qj.x, qj.context, spec, store), qj.y)
        expected = 0.5 * (float(nll_i.value) + float(nll_j.value))
        assert abs(float(loss.value) - expected) < 1e-12

    def test_symmetry(self, rng):
        for variant, l1, l2 in [
            ("FCN+CM+L2Reg", 0.3, 10.0),
            ("FCN+CM+NeuralReg", 0.3, 1.0),
        ]:
            spec = continuous_spec(variant, lambda1=l1, lambda2=l2)
            store = init_params(spec, seed=8)
            store["mask.fc2.w"] = rng.standard_normal((6, 8))
            qi, qj = self.make_pair(rng)
            assert float(pair_loss(qi, qj, spec, store).value) == float(
                pair_loss(qj, qi, spec, store).value
            )

    def test_mixed_context_kinds_rejected(self, rng):
        spec = continuous_spec("FCN+CM")
        store = init_params(spec, seed=0)
        qi = Pair(rng.standard_normal(3), rng.standard_normal(2), ctx([1.0, 2.0]))
        qj = Pair(
            rng.standard_normal(3),
            rng.standard_normal(2),
            ContextVector("indicator", np.zeros(36)),
        )
        with pytest.raises(ConfigError):
            pair_loss(qi, qj, spec, store)


class TestInitParams:
    def test_deterministic(self):
        spec = continuous_spec()
        s1 = init_params(spec, seed=11)
        s2 = init_params(spec, seed=11)
        assert np.array_equal(s1.flat_values, s2.flat_values)

    def test_seed_changes_weights(self):
        spec = continuous_spec()
        s1 = init_params(spec, seed=11)
        s2 = init_params(spec, seed=12)
        assert not np.array_equal(s1.flat_values, s2.flat_values)

    def test_per_name_streams_stable_across_variants(self):
        # adding parameters (mask, distance net) must not shift trunk draws
        base = init_params(
            ModelSpec("FCN", 3, 2, "continuous", context_dim=2, hidden=(8, 8, 8, 8)),
            seed=1,
        )
        reg = init_params(continuous_spec("FCN+CM+NeuralReg", lambda1=0.1, lambda2=1.0), seed=1)
        for name in base.names():
            assert np.array_equal(base[name], reg[name]), name

    def test_visual_embedding_shapes(self):
        spec = ModelSpec(
            "FCN+CM", 3, 3, "visual", hidden=(8, 8, 8, 8), mask_hidden=4
        )
        store = init_params(spec, seed=0)
        assert store["ctx_embed.conv1.k"].shape == (8, 1, 5, 5)
        assert store["ctx_embed.conv2.k"].shape == (16, 8, 5, 5)
        assert store["ctx_embed.fc.w"].shape == (400, 32)
        mask = context_mask(
            ContextVector("visual", np.zeros((32, 32))), spec, store
        )
        assert mask.value.shape == (8,)
