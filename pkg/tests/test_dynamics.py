"""Stability-probe verification.

The geometric-decay oracle: with constant decay a and an initial-state-only
perturbation, the state gap is exactly epsilon * a^t, giving both the probe
trace and the fitted rate in closed form.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from ssmdynlab.dynamics import (
    DivergenceTrace,
    Perturb,
    divergence_probe,
    fit_deviation_rate,
    lyapunov_closed_form,
    lyapunov_numeric,
    precision_divergence,
    realized_delta_bars,
)
from ssmdynlab.numerics import NumericFormat
from ssmdynlab.ssm import (
    BufferMode,
    FusedBuffer,
    MambaParams,
    random_contracting_params,
    random_params,
)


def constant_decay_params(t_len, delta_raw=0.0, b=1.0, c=1.0, d=1):
    w = np.zeros((t_len, 3 * d))
    w[:, :d] = delta_raw
    w[:, d : 2 * d] = b
    w[:, 2 * d :] = c
    return MambaParams(
        a_log=np.zeros(d),
        fused=FusedBuffer(mode=BufferMode.TIME_INDEXED, weight=w),
        delta_bias=np.zeros(d),
    )


def policy(fmt):
    return SimpleNamespace(activation_format=fmt, gradient_format=fmt)


class TestClosedForm:
    def test_constant_ln2_steps(self):
        est = lyapunov_closed_form(np.zeros(1), np.full((16, 1), np.log(2.0)))
        np.testing.assert_allclose(est.per_dim, [-np.log(2.0)], rtol=1e-15)
        assert est.lambda_max == est.per_dim.max()

    def test_zero_steps_give_zero_exponent(self):
        est = lyapunov_closed_form(np.zeros(3), np.zeros((10, 3)))
        np.testing.assert_array_equal(est.per_dim, np.zeros(3))
        assert est.lambda_max == 0.0

    def test_two_channel_hand_case(self):
        a_log = np.array([0.0, np.log(2.0)])  # A = (-1, -2)
        bars = np.array([[0.5, 0.25], [1.5, 0.75]])  # means (1.0, 0.5)
        est = lyapunov_closed_form(a_log, bars)
        np.testing.assert_allclose(est.per_dim, [-1.0, -1.0], rtol=1e-15)

    def test_negative_step_errors(self):
        with pytest.raises(ValueError, match="negative delta_bar"):
            lyapunov_closed_form(np.zeros(1), np.array([[0.5], [-0.1]]))

    def test_empty_errors(self):
        with pytest.raises(ValueError, match="no steps"):
            lyapunov_closed_form(np.zeros(1), np.zeros((0, 1)))

    def test_nonpositive_over_draws(self):
        rng = np.random.default_rng(1)
        worst = -np.inf
        for _ in range(200):
            d = int(rng.choice([1, 4, 16]))
            p = random_params(rng, d=d, t_max=64)
            u = rng.normal(size=(64, d))
            bars = realized_delta_bars(p, u)
            worst = max(worst, lyapunov_closed_form(p.a_log, bars).lambda_max)
        assert worst <= 1e-12


class TestNumericEstimate:
    def test_agrees_with_closed_form(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            d = int(rng.choice([1, 4]))
            mode = BufferMode.INPUT_PROJECTED if rng.random() < 0.5 else BufferMode.TIME_INDEXED
            p = random_params(rng, d=d, t_max=64, mode=mode)
            u = rng.normal(size=(64, d))
            closed = lyapunov_closed_form(p.a_log, realized_delta_bars(p, u))
            numeric = lyapunov_numeric(p, u)
            assert np.max(np.abs(closed.per_dim - numeric.per_dim)) <= 1e-12
            assert numeric.t_used == 64

    def test_underflowed_decay_still_finite(self):
        # delta_raw = 800 underflows the decay to exactly 0; the estimate
        # must fall back to delta_bar * A instead of log(0)
        p = constant_decay_params(8, delta_raw=800.0)
        est = lyapunov_numeric(p, np.ones((8, 1)))
        np.testing.assert_allclose(est.per_dim, [-800.0], rtol=1e-12)

    def test_lambda_max_is_max_of_per_dim(self):
        rng = np.random.default_rng(3)
        p = random_params(rng, d=8, t_max=32)
        est = lyapunov_numeric(p, rng.normal(size=(32, 8)))
        assert est.lambda_max == float(est.per_dim.max())
        assert est.zeta_fit is None


class TestDivergenceProbe:
    def test_geometric_decay_oracle(self):
        # zero input gain keeps the nominal trajectory at exactly 0, so the
        # probe measures eps * a^t free of cancellation against the drive
        t_len, eps = 24, 1e-4
        p = constant_decay_params(t_len, b=0.0)  # decay exp(-ln 2) each step
        trace = divergence_probe(p, np.ones((t_len, 1)), eps, perturb=Perturb.X0)
        want = eps * 0.5 ** np.arange(1, t_len + 1)
        np.testing.assert_allclose(trace.deviations, want, rtol=1e-12)
        assert not trace.overflowed

    def test_first_step_bounded_by_epsilon(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            p = random_params(rng, d=6, t_max=16)
            trace = divergence_probe(p, rng.normal(size=(16, 6)), 1e-4, perturb=Perturb.X0)
            assert trace.deviations[0] <= 1e-4 * (1 + 1e-12)

    def test_severed_input_path_silent(self):
        p = constant_decay_params(16, b=0.0)
        trace = divergence_probe(p, np.ones((16, 1)), 1e-3, perturb=Perturb.INPUT)
        np.testing.assert_array_equal(trace.deviations, np.zeros(16))

    def test_contracting_dominance(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = random_contracting_params(rng, d=5, t_max=40)
            trace = divergence_probe(p, rng.normal(size=(40, 5)), 1e-4, perturb=Perturb.X0)
            assert trace.deviations[-1] <= trace.deviations[0]

    def test_bad_epsilon_errors(self):
        p = constant_decay_params(8)
        with pytest.raises(ValueError, match="epsilon"):
            divergence_probe(p, np.ones((8, 1)), 0.0)

    def test_fp16_overflow_sets_flag(self):
        # steady state 2*u = 1e5 exceeds the FP16 max of 65504
        p = constant_decay_params(32, b=2.0)
        u = np.full((32, 1), 5e4)
        trace = divergence_probe(p, u, 1.0, perturb=Perturb.X0,
                                 policy=policy(NumericFormat.FP16))
        assert trace.overflowed

    def test_mixed_precision_boundedness_sample(self):
        rng = np.random.default_rng(6)
        for fmt in (NumericFormat.BF16, NumericFormat.FP16):
            ratios = []
            for _ in range(25):
                p = random_contracting_params(rng, d=8, t_max=128)
                u = rng.normal(size=(128, 8))
                trace = divergence_probe(p, u, 1e-2, perturb=Perturb.BOTH,
                                         policy=policy(fmt))
                dev = trace.deviations
                first, second = dev[:64].mean(), dev[64:].mean()
                ratios.append(0.0 if first == 0.0 else second / first)
            assert max(ratios) <= 2.0


class TestPrecisionDivergence:
    def test_fp64_policy_diverges_nowhere(self):
        rng = np.random.default_rng(7)
        p = random_params(rng, d=6, t_max=32)
        u = rng.normal(size=(32, 6))
        res = precision_divergence(p, u, None)
        assert res.mean_divergence == 0.0

    def test_bf16_noisier_than_fp16(self):
        rng = np.random.default_rng(8)
        bf, fp = [], []
        for _ in range(30):
            p = random_contracting_params(rng, d=8, t_max=64)
            u = rng.normal(size=(64, 8))
            bf.append(precision_divergence(p, u, policy(NumericFormat.BF16)).mean_divergence)
            fp.append(precision_divergence(p, u, policy(NumericFormat.FP16)).mean_divergence)
        assert np.mean(bf) > np.mean(fp)


class TestFitDeviationRate:
    def test_exact_geometric(self):
        dev = 1e-4 * 0.5 ** np.arange(1, 40.0)
        trace = DivergenceTrace(dev, 1e-4, Perturb.X0, False)
        np.testing.assert_allclose(fit_deviation_rate(trace), np.log(0.5), rtol=1e-10)

    def test_constant_trace_rate_zero(self):
        trace = DivergenceTrace(np.full(32, 3.7e-5), 1e-4, Perturb.X0, False)
        assert abs(fit_deviation_rate(trace)) <= 1e-12

    def test_insufficient_signal(self):
        dev = np.zeros(32)
        dev[:7] = 1e-5
        trace = DivergenceTrace(dev, 1e-4, Perturb.X0, False)
        with pytest.raises(ValueError, match="insufficient signal"):
            fit_deviation_rate(trace)

    def test_zero_steps_excluded_from_fit(self):
        dev = 1e-4 * 0.5 ** np.arange(1, 40.0)
        dev[5] = 0.0
        trace = DivergenceTrace(dev, 1e-4, Perturb.X0, False)
        np.testing.assert_allclose(fit_deviation_rate(trace), np.log(0.5), rtol=1e-9)
