import numpy as np
import pytest

from ssmdynlab.data import gen_selective_copy
from ssmdynlab.model import init_toy_model
from ssmdynlab.numerics import NumericFormat, quantize
from ssmdynlab.ssm import BufferMode
from ssmdynlab.train import (
    SIZE_PRESETS,
    EvalResult,
    PrecisionPolicy,
    TrainConfig,
    adamw_step,
    batch_accuracy,
    clip_grad_norm,
    cosine_lr,
    evaluate,
    init_adamw_state,
    policy_preset,
    train_loop,
    xent_and_grad,
)


def cfg_with(**kw):
    base = dict(learning_rate=1e-3, total_steps=100, batch_size=4, max_seq_len=16)
    base.update(kw)
    return TrainConfig(**base)


class TestPolicy:
    def test_presets(self):
        assert policy_preset("fp64").activation_format is NumericFormat.FP64
        assert policy_preset("bf16").master_format is NumericFormat.FP32
        assert policy_preset("FP16").gradient_format is NumericFormat.FP16
        with pytest.raises(ValueError, match="unknown precision policy"):
            policy_preset("fp8")

    def test_master_format_guard(self):
        with pytest.raises(ValueError, match="master format"):
            PrecisionPolicy(NumericFormat.BF16, NumericFormat.BF16, NumericFormat.BF16)

    def test_size_presets(self):
        assert SIZE_PRESETS["small"] == (1.0e-5, 8)
        assert SIZE_PRESETS["medium"] == (5.0e-5, 16)
        assert SIZE_PRESETS["large"] == (1.0e-6, 32)
        assert SIZE_PRESETS["xl"] == (5.0e-6, 64)
        assert SIZE_PRESETS["xxl"] == (5.0e-7, 128)


class TestCosineLr:
    def test_anchor_points(self):
        cfg = cfg_with(learning_rate=2e-3, warmup_steps=10, total_steps=110)
        assert cosine_lr(10, cfg) == 2e-3
        assert cosine_lr(110, cfg) == pytest.approx(0.0, abs=1e-18)
        assert cosine_lr(60, cfg) == pytest.approx(1e-3, rel=1e-12)  # cosine midpoint

    def test_linear_warmup(self):
        cfg = cfg_with(learning_rate=1e-2, warmup_steps=8, total_steps=100)
        ramp = [cosine_lr(s, cfg) for s in range(9)]
        np.testing.assert_allclose(ramp, np.linspace(0.0, 1e-2, 9), rtol=1e-12)

    def test_never_negative(self):
        cfg = cfg_with(warmup_steps=0, total_steps=7)
        for s in range(8):
            assert cosine_lr(s, cfg) >= 0.0

    def test_warmup_validation(self):
        with pytest.raises(ValueError, match="warmup_steps"):
            cfg_with(warmup_steps=200, total_steps=100)


class TestAdamW:
    def test_zero_grads_zero_decay_no_op(self):
        params = {"w": np.array([1.0, -2.0, 3.5])}
        before = params["w"].copy()
        state = init_adamw_state(params)
        adamw_step(params, {"w": np.zeros(3)}, state, lr=1e-2, weight_decay=0.0)
        assert params["w"].tobytes() == before.tobytes()

    def test_scalar_hand_trace_first_step(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        params = {"w": np.array([0.0])}
        state = init_adamw_state(params)
        adamw_step(params, {"w": np.array([1.0])}, state, lr=lr, weight_decay=0.0)
        # bias-corrected m_hat = v_hat = 1 on the first step with g = 1
        want = -lr * 1.0 / (np.sqrt(1.0) + eps)
        np.testing.assert_allclose(params["w"][0], want, rtol=1e-15)

    def test_decoupled_decay_isolated(self):
        lr, wd = 1e-2, 0.1
        params = {"w": np.array([4.0])}
        state = init_adamw_state(params)
        for i in range(3):
            adamw_step(params, {"w": np.zeros(1)}, state, lr=lr, weight_decay=wd)
            np.testing.assert_allclose(params["w"][0], 4.0 * (1 - lr * wd) ** (i + 1), rtol=1e-14)

    def test_nonfinite_gradient_named(self):
        params = {"good": np.zeros(2), "bad": np.zeros(2)}
        state = init_adamw_state(params)
        grads = {"good": np.zeros(2), "bad": np.array([1.0, np.inf])}
        with pytest.raises(ValueError, match="non-finite gradient in 'bad'"):
            adamw_step(params, grads, state, lr=1e-3)

    def test_fp32_master_stays_on_grid(self):
        params = {"w": np.array([1.0, 0.5, -0.25])}
        state = init_adamw_state(params)
        rng = np.random.default_rng(0)
        for _ in range(5):
            adamw_step(params, {"w": rng.normal(size=3)}, state, lr=1e-3,
                       master_format=NumericFormat.FP32)
        np.testing.assert_array_equal(params["w"], quantize(params["w"], NumericFormat.FP32))

    def test_lr_zero_is_bit_exact_even_with_fp32_master(self):
        params = {"w": np.array([1.0 + 2**-40])}  # off the FP32 grid
        before = params["w"].copy()
        state = init_adamw_state(params)
        adamw_step(params, {"w": np.ones(1)}, state, lr=0.0,
                   master_format=NumericFormat.FP32)
        assert params["w"].tobytes() == before.tobytes()


class TestClipGradNorm:
    def test_below_threshold_unchanged(self):
        grads = {"a": np.array([0.3, 0.4])}
        out, norm = clip_grad_norm(grads, max_norm=1.0)
        assert norm == pytest.approx(0.5)
        assert out["a"] is grads["a"]

    def test_three_four_scales_to_unit(self):
        out, norm = clip_grad_norm({"g": np.array([3.0, 4.0])}, max_norm=1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(out["g"], [0.6, 0.8], rtol=1e-15)

    def test_post_clip_norm_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            grads = {f"g{i}": rng.normal(size=rng.integers(1, 8)) * 10 for i in range(3)}
            out, _ = clip_grad_norm(grads, max_norm=1.0)
            total = np.sqrt(sum(np.sum(g**2) for g in out.values()))
            assert total <= 1.0 + 1e-12


class TestXent:
    def test_uniform_logits_loss(self):
        logits = np.zeros((4, 2, 8))
        targets = np.random.default_rng(0).integers(1, 8, size=(2, 4))
        loss, d_logits, n_valid = xent_and_grad(logits, targets, pad_id=0)
        assert loss == pytest.approx(np.log(8), rel=1e-12)
        assert n_valid == 8
        np.testing.assert_allclose(d_logits.sum(axis=-1), 0.0, atol=1e-15)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(3, 2, 5))
        targets = rng.integers(0, 5, size=(2, 3))
        targets[0, 0] = 0  # one padded position
        loss, d_logits, _ = xent_and_grad(logits, targets, pad_id=0)
        eps = 1e-7
        for idx in [(0, 0, 0), (1, 1, 3), (2, 0, 4)]:
            bumped = logits.copy()
            bumped[idx] += eps
            up, _, _ = xent_and_grad(bumped, targets, pad_id=0)
            bumped[idx] -= 2 * eps
            down, _, _ = xent_and_grad(bumped, targets, pad_id=0)
            np.testing.assert_allclose(d_logits[idx], (up - down) / (2 * eps), atol=1e-7)

    def test_padded_positions_carry_nothing(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(4, 1, 5))
        targets = np.array([[0, 2, 0, 3]])
        loss, d_logits, n_valid = xent_and_grad(logits, targets, pad_id=0)
        assert n_valid == 2
        assert np.all(d_logits[0] == 0.0)
        assert np.all(d_logits[2] == 0.0)

    def test_loss_scale_scales_grads_only(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(3, 2, 4))
        targets = rng.integers(1, 4, size=(2, 3))
        l1, g1, _ = xent_and_grad(logits, targets, pad_id=0, loss_scale=1.0)
        l2, g2, _ = xent_and_grad(logits, targets, pad_id=0, loss_scale=128.0)
        assert l1 == l2
        np.testing.assert_allclose(g2, 128.0 * g1, rtol=1e-15)

    def test_all_padding(self):
        logits = np.ones((2, 1, 4))
        loss, d_logits, n_valid = xent_and_grad(logits, np.zeros((1, 2), dtype=int), pad_id=0)
        assert loss == 0.0 and n_valid == 0
        assert np.all(d_logits == 0.0)

    def test_batch_accuracy(self):
        logits = np.zeros((2, 1, 4))
        logits[0, 0, 2] = 5.0
        logits[1, 0, 1] = 5.0
        targets = np.array([[2, 3]])
        correct, total = batch_accuracy(logits, targets, pad_id=0)
        assert (correct, total) == (1, 2)


def tiny_setup(mode=BufferMode.INPUT_PROJECTED, t_max=16, n_sequences=32, batch_size=4):
    model = init_toy_model(seed=0, d=16, vocab=8, mode=mode, t_max=t_max)
    stream = gen_selective_copy(seed=1, T=16, vocab=8,
                                n_sequences=n_sequences, batch_size=batch_size)
    return model, stream


class TestTrainLoop:
    def test_lr_zero_preserves_weights(self):
        model, stream = tiny_setup()
        before = {k: v.copy() for k, v in model.parameters().items()}
        cfg = cfg_with(learning_rate=0.0, total_steps=12, warmup_steps=0)
        metrics = train_loop(model, cfg, policy_preset("fp64"), stream)
        for name, w in model.parameters().items():
            assert w.tobytes() == before[name].tobytes(), name
        # the stream cycles every 8 batches, so the loss trace must repeat
        assert metrics.loss_trace[:4] == metrics.loss_trace[8:12]

    def test_determinism(self):
        results = []
        for _ in range(2):
            model, stream = tiny_setup()
            cfg = cfg_with(total_steps=10, seed=3)
            metrics = train_loop(model, cfg, policy_preset("fp32"), stream)
            results.append((metrics.loss_trace, metrics.peak_bytes, metrics.total_tokens))
        assert results[0][0] == results[1][0]
        assert results[0][1] == results[1][1]
        assert results[0][2] == results[1][2]

    def test_loss_decreases_smoothed(self):
        model, stream = tiny_setup(n_sequences=128)
        cfg = cfg_with(learning_rate=1e-3, total_steps=60)
        metrics = train_loop(model, cfg, policy_preset("fp32"), stream)
        first = np.mean(metrics.loss_trace[:10])
        last = np.mean(metrics.loss_trace[-10:])
        assert last < first

    def test_metric_identities(self):
        model, stream = tiny_setup()
        cfg = cfg_with(total_steps=7)
        metrics = train_loop(model, cfg, policy_preset("fp64"), stream)
        assert metrics.total_tokens == 7 * 4 * 16
        assert metrics.atps == pytest.approx(metrics.total_tokens / metrics.wall_seconds)
        assert metrics.mmpt == pytest.approx(metrics.peak_bytes / (4 * 16))
        assert len(metrics.loss_trace) == 7
        assert len(metrics.step_rows) == 7

    def test_epoch_fallback(self):
        model, stream = tiny_setup()  # 8 batches
        cfg = cfg_with(total_steps=0, epochs=2)
        metrics = train_loop(model, cfg, policy_preset("fp64"), stream)
        assert len(metrics.loss_trace) == 16

    def test_empty_stream_rejected(self):
        model, _ = tiny_setup()
        from ssmdynlab.data import BatchStream

        with pytest.raises(ValueError, match="empty batch stream"):
            train_loop(model, cfg_with(), policy_preset("fp64"),
                       BatchStream(batches=(), vocab_size=8, seed=0))

    def test_nonfinite_loss_aborts_with_step(self):
        model, stream = tiny_setup()
        model.out_proj[:] = np.inf  # drives logits to non-finite immediately
        with np.errstate(invalid="ignore"), pytest.raises(
            ValueError, match="non-finite loss at step 0"
        ):
            train_loop(model, cfg_with(total_steps=3), policy_preset("fp64"), stream)

    def test_frozen_base_bit_identical_under_lora(self):
        model, stream = tiny_setup()
        before = {k: v.copy() for k, v in model.parameters().items()}
        cfg = cfg_with(learning_rate=1e-2, total_steps=25, lora_rank=2)
        train_loop(model, cfg, policy_preset("fp32"), stream)
        for name, w in model.parameters().items():
            assert w.tobytes() == before[name].tobytes(), name
        assert model.adapters is not None
        assert any(np.any(a.U != 0) for a in model.adapters.values())

    def test_lora_peak_below_full_peak(self):
        peaks = {}
        for rank in (None, 2):
            model, stream = tiny_setup(mode=BufferMode.TIME_INDEXED, t_max=256)
            cfg = cfg_with(total_steps=6, lora_rank=rank)
            metrics = train_loop(model, cfg, policy_preset("fp32"), stream)
            peaks[rank] = metrics.peak_bytes
            del model
        assert peaks[2] < peaks[None]

    def test_lora_trains_only_adapters(self):
        model, stream = tiny_setup()
        cfg = cfg_with(learning_rate=1e-2, total_steps=10, lora_rank=2)
        train_loop(model, cfg, policy_preset("fp64"), stream)
        adapters = model.adapters
        assert set(adapters) == {"fused_buffer", "embeddings", "in_proj", "out_proj"}
        for adapter in adapters.values():
            assert np.any(adapter.U != 0.0)


class TestEvaluate:
    def test_vacuous_accuracy_on_empty_answers(self):
        model, _ = tiny_setup()
        stream = gen_selective_copy(seed=5, T=16, vocab=8, n_sequences=8, batch_size=4, k=0)
        result = evaluate(model, stream)
        assert result == EvalResult(loss=0.0, accuracy=1.0, n_positions=0)

    def test_counts_positions(self):
        model, stream = tiny_setup(n_sequences=12, batch_size=4)
        result = evaluate(model, stream)
        assert result.n_positions == 12  # one answer slot per sequence
        assert 0.0 <= result.accuracy <= 1.0


class TestMpftDivergence:
    def test_bf16_lora_lands_near_fp32_optimum(self):
        # Two fine-tunes from one init, trained to convergence, must agree on
        # the trained (answer) positions far more than an untrained reinit.
        # Positions the masked loss never constrains are excluded: both
        # optimizers leave them wherever they drift.
        train_stream = gen_selective_copy(seed=7, T=16, vocab=8, n_sequences=64, batch_size=4)
        held = gen_selective_copy(seed=8, T=16, vocab=8, n_sequences=16, batch_size=4)

        def answer_probs(model):
            chunks = []
            for inputs, targets in held:
                logits, _ = model.forward(inputs)
                z = logits - logits.max(axis=-1, keepdims=True)
                e = np.exp(z)
                probs = e / e.sum(axis=-1, keepdims=True)
                chunks.append(probs[targets.T != 0])
            return np.concatenate(chunks, axis=0)

        full = init_toy_model(seed=0, d=16, vocab=8)
        cfg_full = cfg_with(learning_rate=3e-3, total_steps=600)
        train_loop(full, cfg_full, policy_preset("fp32"), train_stream)

        lora = init_toy_model(seed=0, d=16, vocab=8)
        cfg_lora = cfg_with(learning_rate=1e-2, total_steps=600, lora_rank=4)
        train_loop(lora, cfg_lora, policy_preset("bf16"), train_stream)

        reinit = init_toy_model(seed=99, d=16, vocab=8)

        p_full = answer_probs(full)
        divergence_mpft = float(np.mean(np.abs(answer_probs(lora) - p_full)))
        divergence_reinit = float(np.mean(np.abs(answer_probs(reinit) - p_full)))
        assert np.isfinite(divergence_mpft)
        assert divergence_mpft < divergence_reinit
