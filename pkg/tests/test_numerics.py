import numpy as np
import pytest

from csiadapt.numerics import (
    AdamHyper,
    AdamState,
    adam_step,
    magnitude_spectrum,
    minmax_normalize,
    sigmoid,
    softmax,
)


def naive_dft(x):
    """O(N^2) reference DFT used as the oracle for magnitude_spectrum."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.size
    k = np.arange(n)
    out = np.empty(n, dtype=np.complex128)
    for i in range(n):
        out[i] = np.sum(x * np.exp(-2j * np.pi * i * k / n))
    return out


class TestSigmoid:
    def test_symmetry_point(self):
        assert sigmoid(0.0) == 0.5

    def test_reference_value(self):
        # 1/(1+e^-1) evaluated at high precision
        assert sigmoid(1.0) == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_saturation_stays_positive(self):
        v = sigmoid(-40.0)
        assert 0.0 < v < 1e-17

    def test_monotone(self):
        xs = np.linspace(-30, 30, 301)
        ys = sigmoid(xs)
        assert np.all(np.diff(ys) > 0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            sigmoid(float("nan"))
        with pytest.raises(ValueError):
            sigmoid(np.array([1.0, np.inf]))


class TestSoftmax:
    def test_uniform_input(self):
        out = softmax(np.array([3.3, 3.3, 3.3]))
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=9)
        np.testing.assert_allclose(softmax(v + 7.0), softmax(v), atol=1e-12)

    def test_reference_value(self):
        # exp([1,2,3]) normalized, high-precision evaluation
        expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219]
        np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), expected, atol=1e-9)

    def test_sums_to_one_across_magnitudes(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            scale = 10 ** rng.uniform(-3, np.log10(700))
            v = rng.normal(size=rng.integers(2, 12)) * scale
            v = np.clip(v, -700, 700)
            s = softmax(v)
            assert abs(s.sum() - 1.0) < 1e-12
            assert np.all(s > 0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            softmax(np.array([]))


class TestMinmaxNormalize:
    def test_endpoints(self):
        np.testing.assert_allclose(minmax_normalize(np.array([2.0, 4.0, 6.0])), [0, 0.5, 1], atol=1e-15)

    def test_constant_input_maps_to_zero(self):
        np.testing.assert_array_equal(minmax_normalize(np.array([5.0, 5.0, 5.0])), np.zeros(3))

    def test_range_and_order_preserved(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=64)
        out = minmax_normalize(v)
        assert out.min() == 0.0 and out.max() == 1.0
        np.testing.assert_array_equal(np.argsort(out, kind="stable"), np.argsort(v, kind="stable"))

    def test_idempotent_on_non_degenerate(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            v = rng.normal(size=rng.integers(2, 40))
            once = minmax_normalize(v)
            np.testing.assert_allclose(minmax_normalize(once), once, atol=1e-12)


class TestMagnitudeSpectrum:
    def test_dc_concentration(self):
        n = 24
        c = 1.7 - 0.4j
        spec = magnitude_spectrum(np.full(n, c))
        assert spec[0] == pytest.approx(n * abs(c), rel=1e-12)
        assert np.all(spec[1:] < 1e-9)

    def test_pure_tone(self):
        n = 32
        x = np.exp(2j * np.pi * 3 * np.arange(n) / n)
        spec = magnitude_spectrum(x)
        assert spec[3] == pytest.approx(32.0, rel=1e-12)
        mask = np.ones(n, dtype=bool)
        mask[3] = False
        assert np.all(spec[mask] < 1e-9)

    def test_matches_naive_dft(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=16) + 1j * rng.normal(size=16)
        np.testing.assert_allclose(magnitude_spectrum(x), np.abs(naive_dft(x)), rtol=1e-9)

    def test_parseval(self):
        rng = np.random.default_rng(5)
        for _ in range(20)):
            pass

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            magnitude_spectrum(np.array([], dtype=complex))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = np.array([1.0, -2.0, 3.0])
        state = AdamState.zeros(p.shape)
        p2, s2 = adam_step(p, np.zeros_like(p), state, AdamHyper())
        np.testing.assert_array_equal(p2, p)
        assert s2.t == 1

    def test_scalar_first_step(self):
        # hand evaluation: m_hat = v_hat = 1 at t=1, so the step is
        # -lr / (1 + eps)
        p, s = adam_step(np.array([0.0]), np.array([1.0]), AdamState.zeros(1), AdamHyper(learning_rate=0.001))
        assert p[0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)

    def test_descent_direction(self):
        rng = np.random.default_rng(6)
        p = rng.normal(size=20)
        g = rng.normal(size=20)
        state = AdamState(m=rng.normal(size=20) * 0.01, v=np.abs(rng.normal(size=20)) * 0.01, t=3)
        p2, _ = adam_step(p, g, state, AdamHyper())
        fresh, _ = adam_step(p, g, AdamState.zeros(20), AdamHyper())
        nz = g != 0
        assert np.all(np.sign(fresh[nz] - p[nz]) == -np.sign(g[nz]))

    def test_beta_zero_reduces_to_sign_sgd(self):
        rng = np.random.default_rng(7)
        p = rng.normal(size=30)
        g = rng.normal(size=30)
        hyper = AdamHyper(learning_rate=0.01, beta1=0.0, beta2=0.0)
        p2, _ = adam_step(p, g, AdamState.zeros(30), hyper)
        expected = p - 0.01 * g / (np.abs(g) + hyper.eps)
        np.testing.assert_allclose(p2, expected, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            adam_step(np.zeros(3), np.zeros(4), AdamState.zeros(3), AdamHyper())

    def test_step_count_increments(self):
        p = np.zeros(2)
        state = AdamState.zeros(2)
        for expected_t in (1, 2, 3):
            p, state = adam_step(p, np.ones(2), state, AdamHyper())
            assert state.t == expected_t
        assert np.all(state.v >= 0)
