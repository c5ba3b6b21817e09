"""Pre-parameter mapping, fake quantization, static quantization, health counters."""

import numpy as np
import pytest

from ca3d import model as md
from ca3d import quantize as qz
from ca3d import tensor as tc
from ca3d.tensor import FULL32, PURE16_NAIVE, PURE16_PREPARAM, QAT, NumericMode, Tensor
from conftest import oracle_f16_round

F32 = NumericMode(FULL32)
F16P = NumericMode(PURE16_PREPARAM, 0.1)
F16N = NumericMode(PURE16_NAIVE, 1.0)


class TestMapping:
    def test_direct_mapping(self):
        assert qz.map_preparams(np.array([1.0]), 0.1, F32)[0] == pytest.approx(10.0)

    def test_unit_scale_is_identity(self, rng):
        theta = rng.normal(size=32)
        assert np.array_equal(qz.map_preparams(theta, 1.0, F32), theta)

    def test_scale_shifts_optimizer_space_window(self):
        # a weight-space gradient of 3e5 overflows binary16 at T=1, but its
        # back-mapped pre-parameter gradient 3e4 stays finite at T=0.1
        big = 3e5
        assert qz.backmap_grads(np.array([big]), 1.0, F16N)[0] == np.inf
        assert np.isfinite(qz.backmap_grads(np.array([big]), 0.1, F16P)[0])
        # conversely the smallest magnitudes fall out of the shifted window
        tiny = 2.0 ** -24
        assert qz.backmap_grads(np.array([tiny]), 1.0, F16N)[0] == tiny
        assert qz.backmap_grads(np.array([tiny]), 0.1, F16P)[0] == 0.0

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            qz.map_preparams(np.ones(2), 0.0, F32)
        with pytest.raises(ValueError):
            qz.backmap_grads(np.ones(2), -0.1, F32)

    def test_backmap_direct(self):
        assert qz.backmap_grads(np.array([2.0]), 0.1, F32)[0] == pytest.approx(0.2)
        assert qz.backmap_grads(np.array([0.0]), 0.1, F16P)[0] == 0.0

    def test_backmap_tiny_gradient_matches_bit_oracle(self):
        g = 1e-7
        got = qz.backmap_grads(np.array([g]), 0.1, F16P)[0]
        assert got == oracle_f16_round(0.1 * g)

    def test_grad_buffers_invariant(self, rng):
        g = rng.normal(size=16)
        buf = qz.GradBuffers.back_map(g, 0.1, F16P)
        assert np.array_equal(buf.grad_theta, tc.f16_round(0.1 * buf.grad_w))

    def test_ratios_are_exactly_t(self, rng):
        # pre-rounding, theta/w == T and grad_theta/grad_w == T
        for t_scale in (0.01, 0.1, 2.0, 10.0):
            w = rng.normal(size=16)
            g = rng.normal(size=16)
            theta = t_scale * w
            assert np.allclose(qz.map_preparams(theta, t_scale, F32), w, rtol=1e-15)
            assert np.allclose(qz.backmap_grads(g, t_scale, F32) / g, t_scale, rtol=1e-15)


def _make_store(rng, t_scale, mode, n=24):
    w = Tensor(rng.normal(size=n), mode, requires_grad=True)
    return qz.PreParamStore({"w": w}, t_scale, mode), w


class TestPreparamSgd:
    def test_single_step_algebra(self):
        w = Tensor(np.array([1.0]), F32, requires_grad=True)
        store = qz.PreParamStore({"w": w}, 0.1, F32)
        assert store.theta["w"][0] == pytest.approx(0.1)
        qz.sgd_step_preparam(store, {"w": np.array([0.5])}, lr=0.2)
        assert store.theta["w"][0] == pytest.approx(0.09, abs=1e-15)
        assert w.data[0] == pytest.approx(0.9, abs=1e-12)

    def test_zero_gradient_is_noop(self, rng):
        store, w = _make_store(rng, 0.1, F32)
        before = w.data.copy()
        qz.sgd_step_preparam(store, {"w": np.zeros_like(before)}, lr=0.5)
        assert np.array_equal(w.data, before)

    @pytest.mark.parametrize("momentum", [0.0, 0.9])
    def test_equivalent_to_plain_sgd_when_rounding_disabled(self, rng, momentum):
        for trial in range(5):
            t_scale = float(np.exp(rng.uniform(np.log(0.01), np.log(10.0))))
            w0 = rng.normal(size=20)
            pre_w = Tensor(w0.copy(), F32, requires_grad=True)
            store = qz.PreParamStore({"w": pre_w}, t_scale, NumericMode(FULL32, t_scale))
            plain = w0.copy()
            vel = np.zeros_like(plain)
            lr = float(rng.uniform(0.001, 0.1))
            for _ in range(100):
                g = rng.normal(size=20)
                qz.sgd_step_preparam(store, {"w": g}, lr=lr, momentum=momentum)
                vel = momentum * vel + g
                plain = plain - lr * vel
            assert np.max(np.abs(pre_w.data - plain)) < 1e-12

    def test_nonfinite_gradients_skipped_and_counted(self, rng):
        store, w = _make_store(rng, 0.1, F32, n=4)
        before = w.data.copy()
        health = qz.TrainingHealth()
        g = np.array([np.nan, np.inf, 0.0, 1.0])
        qz.sgd_step_preparam(store, {"w": g}, lr=0.1, momentum=0.0, health=health)
        assert health.nan_count == 1
        assert health.overflow_count == 1
        assert w.data[0] == before[0] and w.data[1] == before[1] and w.data[2] == before[2]
        assert w.data[3] != before[3]

    def test_store_invariant_after_refresh(self, rng):
        store, w = _make_store(rng, 0.1, F16P)
        for _ in range(3):
            qz.sgd_step_preparam(store, {"w": rng.normal(size=24)}, lr=0.05)
            assert np.array_equal(w.data, tc.f16_round(store.theta["w"] / 0.1))
            assert np.array_equal(w.data, tc.f16_round(w.data))

    def test_bad_lr_rejected(self, rng):
        store, _ = _make_store(rng, 0.1, F32)
        with pytest.raises(ValueError):
            qz.sgd_step_preparam(store, {"w": np.zeros(24)}, lr=0.0)


class TestRangeBoundaryCounts:
    """Directional effects of the scale on binary16 range boundaries.

    With w = theta / T and grad_theta = T * grad_w, choosing T < 1 stores
    smaller magnitudes: overflow events can only decrease and rounds-to-zero
    events can only increase relative to T = 1 on any fixed distribution.
    """

    def _counts(self, values, t_scale):
        health = qz.TrainingHealth()
        qz.backmap_grads(values, t_scale, NumericMode(PURE16_PREPARAM, t_scale), health)
        return health.overflow_count, health.underflow_to_zero_count

    def test_overflow_monotone_near_top(self, rng):
        g = rng.uniform(3e4, 3e5, size=4096)
        over_01, _ = self._counts(g, 0.1)
        over_1, _ = self._counts(g, 1.0)
        assert over_01 <= over_1
        assert over_01 < over_1  # strict on this seeded instance

    def test_underflow_monotone_near_bottom(self, rng):
        g = rng.uniform(2.0 ** -26, 2.0 ** -20, size=4096)
        _, under_01 = self._counts(g, 0.1)
        _, under_1 = self._counts(g, 1.0)
        assert under_01 >= under_1
        assert under_01 > under_1  # strict on this seeded instance


class TestFakeQuantize:
    def test_identity_on_representable(self, rng):
        x = Tensor(tc.f16_round(rng.normal(size=16)), F32, requires_grad=True)
        out = qz.fake_quantize(x)
        assert np.array_equal(out.data, x.data)

    def test_straight_through_gradient(self, rng):
        x = Tensor(rng.normal(size=8), F32, requires_grad=True)
        loss = (qz.fake_quantize(x) * 3.0).sum()
        loss.backward()
        assert np.array_equal(x.grad, np.full(8, 3.0))

    def test_storage_not_constrained(self, rng):
        x = Tensor(rng.normal(size=8), F32, requires_grad=True)
        qz.fake_quantize(x)
        assert not np.array_equal(x.data, tc.f16_round(x.data))

    def test_loss_perturbation_bounded(self, rng):
        # rounding error through one fake-quantized linear layer stays within
        # a few relative ulps of binary16
        w = rng.normal(size=(8, 8))
        x = rng.normal(size=(4, 8))
        exact = Tensor(x, F32) @ None if False else None
        a = tc.matmul(Tensor(x, F32), Tensor(w, F32)).sum().item()
        b = tc.matmul(qz.fake_quantize(Tensor(x, F32)), qz.fake_quantize(Tensor(w, F32))).sum().item()
        assert abs(a - b) <= (np.abs(x).sum() * np.abs(w).max() + np.abs(w).sum() * np.abs(x).max()) * 2.0 ** -11


class TestStaticQuantization:
    def _tiny_model(self, mode, seed=0):
        cfg = md.ModelConfig(
            (md.CastBlockConfig(4, 3, 2, 1, has_temporal_attention=True, heads=2,
                                head_dim=2, temporal_column_stages=1),),
            num_classes=3, dropout_rate=0.0, input_shape=(2, 3, 6, 6),
        )
        return md.build_model(cfg, seed, mode)

    def test_argmax_preserved_for_representable_params(self, rng):
        model = self._tiny_model(F32)
        for p in model.parameters().values():
            p.data = tc.f16_round(p.data)
        quantized = qz.static_quantize_model(model)
        x = rng.normal(size=(6, 2, 3, 6, 6))
        with tc.no_grad():
            a = model(x).data
            b = quantized(x).data
        assert np.array_equal(np.argmax(a, axis=1), np.argmax(b, axis=1))

    def test_out_of_range_parameter_named(self):
        model = self._tiny_model(F32)
        model.parameters()["classifier.weight"].data[0, 0] = 1e6
        with pytest.raises(ValueError, match="classifier.weight"):
            qz.static_quantize_model(model)

    def test_quantization_idempotent(self):
        model = self._tiny_model(F32)
        q1 = qz.static_quantize_model(model)
        q2 = qz.static_quantize_model(q1)
        for name, p in q1.parameters().items():
            assert np.array_equal(p.data, q2.parameters()[name].data)

    def test_quantized_mode_is_static(self):
        q = qz.static_quantize_model(self._tiny_model(F32))
        assert q.mode.kind == tc.STATIC_POST_QUANT


class TestQatMode:
    def test_master_weights_stay_full_precision(self, rng):
        mode = NumericMode(QAT)
        cfg = md.ModelConfig(
            (md.CastBlockConfig(4, 3, 2, 0),), num_classes=2, dropout_rate=0.0,
            input_shape=(2, 2, 6, 6),
        )
        model = md.build_model(cfg, 0, mode)
        from ca3d.layers import cross_entropy

        params = model.parameters()
        velocity = {n: np.zeros_like(p.data) for n, p in params.items()}
        for step in range(3):
            x = rng.normal(size=(4, 2, 2, 6, 6))
            labels = rng.integers(0, 2, size=4)
            loss = cross_entropy(model.forward(x, training=True, rng=rng), labels)
            grads = tc.gradients(loss, params)
            qz.sgd_step_direct(params, grads, 0.05, 0.9, mode, velocity)
        off_grid = sum(
            int(not np.array_equal(p.data, tc.f16_round(p.data))) for p in params.values()
        )
        assert off_grid > 0

    def test_qat_forward_uses_quantized_values(self, rng):
        mode = NumericMode(QAT)
        cfg = md.ModelConfig(
            (md.CastBlockConfig(4, 3, 2, 0),), num_classes=2, dropout_rate=0.0,
            input_shape=(2, 2, 6, 6),
        )
        qat = md.build_model(cfg, 3, mode)
        full = md.build_model(cfg, 3, F32)
        x = rng.normal(size=(2, 2, 2, 6, 6))
        with tc.no_grad():
            a = qat(x).data
            b = full(x).data
        assert not np.array_equal(a, b)  # quantization noise is present
        assert np.allclose(a, b, atol=0.1)  # but small


class TestHealthCounters:
    def test_reset_rolls_into_totals(self):
        h = qz.TrainingHealth()
        h.overflow_count = 3
        h.underflow_to_zero_count = 2
        h.nan_count = 1
        h.reset()
        assert h.overflow_count == 0
        assert h.totals == {"overflow": 3, "underflow": 2, "nan": 1}

    def test_observe_rounding_classifies(self):
        h = qz.TrainingHealth()
        pre = np.array([1e6, 1e-9, 0.0, 1.0])
        post = tc.f16_round(pre)
        h.observe_rounding(pre, post)
        assert h.overflow_count == 1
        assert h.underflow_to_zero_count == 1
