import math

import numpy as np
import pytest

from ldbn.adapt import (AdaptConfig, AdaptState, adapt_step, entropy_loss, entropy_per_group,
                        stream_adapt)
from ldbn.errors import DimensionError, NumericError, ValidationError
from ldbn.nn import ADAPT, BN_AFFINE
from ldbn.reference import entropy_naive


def frames(rng, n):
    return rng.random((n, 3, 64, 128), dtype=np.float32)


class TestEntropyLoss:
    def test_uniform_is_ln26(self):
        loss, _ = entropy_loss(np.zeros((2, 26, 14, 2)))
        assert loss == pytest.approx(math.log(26), abs=1e-12)

    def test_near_one_hot(self):
        z = np.zeros((1, 26, 14, 2))
        z[:, 4] = 50.0
        loss, grad = entropy_loss(z)
        assert loss <= 1e-6
        assert np.isfinite(grad).all()

    def test_single_group_value(self):
        probs = [0.5, 0.25, 0.25]
        expected = entropy_naive(probs)
        assert expected == pytest.approx(1.0397, abs=1e-4)
        loss, _ = entropy_loss(np.log(probs).reshape(1, 3, 1, 1))
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_mean_over_groups(self, rng):
        z = rng.standard_normal((2, 5, 3, 2))
        loss, _ = entropy_loss(z)
        assert loss == pytest.approx(entropy_per_group(z).mean(), abs=1e-12)

    def test_non_finite(self):
        z = np.zeros((1, 3, 1, 1))
        z[0, 1] = np.inf
        with pytest.raises(NumericError):
            entropy_loss(z)


def test_config_validation():
    with pytest.raises(ValidationError):
        AdaptConfig(batch_size=0)
    with pytest.raises(ValidationError):
        AdaptConfig(momentum=1.0)


def test_velocity_only_for_bn_affine(model):
    state = AdaptState.create(model)
    assert set(state.velocity) == set(model.params_with_label(BN_AFFINE))


class TestAdaptStep:
    def test_lr_zero_is_noop(self, model, rng):
        before = model.snapshot()
        cfg = AdaptConfig(batch_size=2, learning_rate=0.0)
        state = AdaptState.create(model, cfg)
        m = adapt_step(state, frames(rng, 2), cfg)
        assert 0 < m.entropy <= math.log(26)
        for name, arr in model.snapshot().items():
            assert arr.tobytes() == before[name].tobytes()

    def test_only_bn_affine_moves(self, model, rng):
        before = model.snapshot()
        cfg = AdaptConfig(batch_size=2, learning_rate=0.1)
        state = AdaptState.create(model, cfg)
        for _ in range(3):
            adapt_step(state, frames(rng, 2), cfg)
        changed = {n for n, a in model.snapshot().items() if a.tobytes() != before[n].tobytes()}
        assert changed and changed <= set(model.params_with_label(BN_AFFINE))

    @pytest.mark.parametrize("bs", [1, 2, 4])
    def test_single_backward_traversal(self, model, rng, bs):
        cfg = AdaptConfig(batch_size=bs)
        state = AdaptState.create(model, cfg)
        before = model.backward_calls
        adapt_step(state, frames(rng, bs), cfg)
        assert model.backward_calls - before == len(model.layers)
        assert all(layer.backward_calls == 1 for layer in model.layers)

    def test_batch_size_mismatch(self, model, rng):
        cfg = AdaptConfig(batch_size=4)
        with pytest.raises(DimensionError):
            adapt_step(AdaptState.create(model, cfg), frames(rng, 2), cfg)

    def test_nan_gradient_leaves_model_untouched(self, model, rng, monkeypatch):
        cfg = AdaptConfig(batch_size=1, learning_rate=0.1)
        state = AdaptState.create(model, cfg)
        adapt_step(state, frames(rng, 1), cfg)  # non-zero velocity
        before = model.snapshot()
        velocity = {k: v.copy() for k, v in state.velocity.items()}
        real = model.backward_bn_only

        def poisoned(dout):
            grads = real(dout)
            last = sorted(grads)[-1]
            grads[last] = grads[last] * np.nan
            return grads

        monkeypatch.setattr(model, "backward_bn_only", poisoned)
        with pytest.raises(NumericError):
            adapt_step(state, frames(rng, 1), cfg)
        for name, arr in model.snapshot().items():
            assert arr.tobytes() == before[name].tobytes()
        for name, v in state.velocity.items():
            assert v.tobytes() == velocity[name].tobytes()
        assert state.step_count == 1

    def test_nan_input_leaves_model_untouched(self, model, rng):
        cfg = AdaptConfig(batch_size=2)
        state = AdaptState.create(model, cfg)
        before = model.snapshot()
        batch = frames(rng, 2)
        batch[1, 0, 5, 5] = np.nan
        with pytest.raises(NumericError):
            adapt_step(state, batch, cfg)
        for name, arr in model.snapshot().items():
            assert arr.tobytes() == before[name].tobytes()

    def test_entropy_descends_on_fixed_batch(self, rng):
        from ldbn.nn import build_reference_model
        good = total = 0
        for seed in range(3):
            model = build_reference_model(seed)
            cfg = AdaptConfig(batch_size=2, learning_rate=1e-3, momentum=0.0)
            state = AdaptState.create(model, cfg)
            batch = np.random.default_rng(seed).random((2, 3, 64, 128), dtype=np.float32)
            ent = [adapt_step(state, batch, cfg).entropy for _ in range(8)]
            d = np.diff(ent)
            good += (d <= 0).sum()
            total += d.size
        assert good / total >= 0.95


class TestStream:
    def test_bs1_adapts_every_frame(self, model, rng):
        cfg = AdaptConfig(batch_size=1)
        state = AdaptState.create(model, cfg)
        steps = [stream_adapt(state, f, cfg) for f in frames(rng, 3)]
        assert all(s.adapted for s in steps)
        assert state.step_count == 3

    def test_bs4_ten_frames(self, model, rng):
        cfg = AdaptConfig(batch_size=4)
        state = AdaptState.create(model, cfg)
        steps = [stream_adapt(state, f, cfg) for f in frames(rng, 10)]
        assert state.step_count == 2
        assert len(state.frames_buffered) == 2
        assert [s.adapted for s in steps].count(True) == 2

    def test_prediction_uses_current_model(self, model, rng):
        cfg = AdaptConfig(batch_size=1, learning_rate=0.0)
        state = AdaptState.create(model, cfg)
        x = frames(rng, 1)
        step = stream_adapt(state, x[0], cfg)
        expected = model.forward(x, ADAPT)[0]
        assert step.logits.tobytes() == expected.tobytes()
        assert step.logits.shape == (26, 14, 2)

    def test_failed_step_drops_buffer_and_continues(self, model, rng):
        cfg = AdaptConfig(batch_size=2, learning_rate=0.1)
        state = AdaptState.create(model, cfg)
        before = model.snapshot()
        bad = frames(rng, 2)
        bad[1, 0, 0, 0] = np.nan
        stream_adapt(state, bad[0], cfg)
        step = stream_adapt(state, bad[1], cfg)
        assert step.error and "NumericError" in step.error
        assert state.frames_buffered == []
        for name, arr in model.snapshot().items():
            assert arr.tobytes() == before[name].tobytes()
        ok = [stream_adapt(state, f, cfg) for f in frames(rng, 2)]
        assert ok[-1].adapted and state.step_count == 1
