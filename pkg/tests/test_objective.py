import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fa_ood.errors import ConfigError
from fa_ood.objective import (
    SimilarityPair,
    batch_loss,
    ce_batch,
    ce_loss,
    class_probabilities,
    fce_k_batch,
    fce_k_loss,
    fce_loss,
)

mp.mp.dps = 50


def oracle_fce_k(s_f, s_o, y, tau, K):
    """-log(e^{s_f[y]/tau} / (sum e^{s_f/tau} + K sum e^{s_o/tau})) at 50 digits."""
    num = mp.e ** (mp.mpf(s_f[y]) / tau)
    den = mp.fsum(mp.e ** (mp.mpf(v) / tau) for v in s_f) + K * mp.fsum(mp.e ** (mp.mpf(v) / tau) for v in s_o)
    return float(-mp.log(num / den))


def random_pair(rng, C=None):
    C = C or int(rng.integers(1, 12))
    return SimilarityPair(rng.uniform(-1, 1, C), rng.uniform(-1, 1, C), int(rng.integers(C)))


cosines = st.integers(1, 10).flatmap(
    lambda C: st.tuples(
        arrays(np.float64, C, elements=st.floats(-1, 1)),
        arrays(np.float64, C, elements=st.floats(-1, 1)),
        st.integers(0, C - 1),
    )
)


# -- class_probabilities ---------------------------------------------------------

def test_probabilities_trivial_cases():
    assert class_probabilities([0.3]).tolist() == [1.0]
    np.testing.assert_array_equal(class_probabilities([0.2] * 4), [0.25] * 4)


def test_probabilities_match_extended_precision(rng):
    for _ in range(50):
        s = rng.uniform(-1, 1, int(rng.integers(1, 20)))
        den = mp.fsum(mp.e ** mp.mpf(v) for v in s)
        oracle = [float(mp.e ** mp.mpf(v) / den) for v in s]
        np.testing.assert_allclose(class_probabilities(s, 1.0), oracle, rtol=0, atol=1e-12)


def test_probabilities_overflow_safe_and_valid():
    p = class_probabilities([1000.0, 999.0, -1000.0], tau=0.01)
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-9
    with pytest.raises(ConfigError):
        class_probabilities([0.1], tau=0)


@settings(max_examples=200, deadline=None)
@given(cosines, st.floats(0.01, 10))
def test_probabilities_positive_normalised_argmax(pair, tau):
    s = pair[0]
    p = class_probabilities(s, tau)
    assert np.all(p > 0) and abs(p.sum() - 1) <= 1e-9
    assert p[np.argmax(s)] == p.max()  # sub-resolution gaps may tie after exp


# -- losses ---------------------------------------------------------------------

def test_fce_symmetric_hand_values():
    for s in (-0.7, 0.0, 0.4):
        assert fce_loss(SimilarityPair([s], [s], 0)) == pytest.approx(math.log(2), abs=1e-12)
    eq = SimilarityPair([0.3, 0.3], [0.3, 0.3], 1)
    assert fce_loss(eq) == pytest.approx(math.log(4), abs=1e-12)
    assert fce_k_loss(eq, 1.0, 1) == pytest.approx(math.log(4), abs=1e-12)
    assert fce_k_loss(eq, 1.0, 3) == pytest.approx(math.log(8), abs=1e-12)
    one = SimilarityPair([1.0, 1.0], [1.0, 1.0], 0)
    assert fce_k_loss(one, 1.0, 3) == pytest.approx(-math.log(math.e / (2 * math.e + 3 * 2 * math.e)), abs=1e-12)


def test_losses_match_extended_precision(rng):
    for _ in range(300):
        p = random_pair(rng)
        tau = float(rng.choice([0.5, 1.0, 2.0]))
        K = int(rng.integers(0, 7))
        assert fce_k_loss(p, tau, K) == pytest.approx(oracle_fce_k(p.s_f, p.s_o, p.label, tau, K), abs=1e-12)
        assert fce_loss(p, tau) == pytest.approx(oracle_fce_k(p.s_f, p.s_o, p.label, tau, 1), abs=1e-12)


def test_k1_is_fce_exactly(rng):
    for _ in range(100):
        p = random_pair(rng)
        assert fce_k_loss(p, 1.0, 1) == fce_loss(p, 1.0)


def test_k0_is_cross_entropy(rng):
    for _ in range(1000):
        p = random_pair(rng)
        ce = -math.log(class_probabilities(p.s_f)[p.label])
        assert fce_k_loss(p, 1.0, 0) == pytest.approx(ce, abs=1e-12)
        assert ce_loss(p) == pytest.approx(ce, abs=1e-12)


def test_loss_errors():
    p = SimilarityPair([0.1, 0.2], [0.1, 0.2], 2)
    with pytest.raises(IndexError):
        fce_k_loss(p)
    with pytest.raises(ConfigError):
        fce_k_loss(SimilarityPair([0.1], [0.1], 0), tau=0.0)
    with pytest.raises(ConfigError):
        fce_k_loss(SimilarityPair([0.1], [0.1], 0), K=-1)


@settings(max_examples=300, deadline=None)
@given(cosines, st.floats(0.05, 5))
def test_k_monotonicity_property(pair, tau):
    p = SimilarityPair(*pair)
    losses = [fce_k_loss(p, tau, K) for K in (0, 1, 2, 3, 6)]
    assert all(a < b for a, b in zip(losses, losses[1:]))
    assert losses[0] >= 0 and all(v > 0 for v in losses[1:])


@settings(max_examples=300, deadline=None)
@given(cosines, st.floats(-5, 5), st.integers(0, 6))
def test_shift_invariance_property(pair, c, K):
    s_f, s_o, y = pair
    a, b = SimilarityPair(s_f, s_o, y), SimilarityPair(s_f + c, s_o + c, y)
    assert abs(fce_k_loss(a, 1.0, K) - fce_k_loss(b, 1.0, K)) <= 1e-9
    assert abs(fce_loss(a) - fce_loss(b)) <= 1e-9
    assert abs(ce_loss(a) - ce_loss(b)) <= 1e-9


# -- batch -----------------------------------------------------------------------

def test_batch_of_one_and_duplicates(rng):
    p = random_pair(rng, 5)
    assert batch_loss([p], 1.0, 3) == fce_k_loss(p, 1.0, 3)
    assert batch_loss([p] * 8, 1.0, 3) == pytest.approx(fce_k_loss(p, 1.0, 3), abs=1e-12)
    with pytest.raises(ConfigError):
        batch_loss([], 1.0, 3)


def test_batch_matches_summation_oracle(rng):
    pairs = [random_pair(rng, 6) for _ in range(32)]
    oracle = float(mp.fsum(mp.mpf(oracle_fce_k(p.s_f, p.s_o, p.label, 1.0, 3)) for p in pairs) / 32)
    assert batch_loss(pairs, 1.0, 3) == pytest.approx(oracle, abs=1e-12)


def test_batched_form_matches_scalar_losses_and_gradient(rng):
    B, C = 9, 5
    S_f, S_o = rng.uniform(-1, 1, (B, C)), rng.uniform(-1, 1, (B, C))
    y = rng.integers(0, C, B)
    for K in (0, 1, 3):
        losses, grad = fce_k_batch(S_f, S_o, y, 1.0, K)
        scalar = [fce_k_loss(SimilarityPair(S_f[i], S_o[i], int(y[i])), 1.0, K) for i in range(B)]
        np.testing.assert_allclose(losses, scalar, rtol=0, atol=1e-12)
        h = 1e-6
        for i, j in [(0, 0), (3, 2), (8, 4)]:
            hi, lo = S_f.copy(), S_f.copy()
            hi[i, j] += h
            lo[i, j] -= h
            fd = (fce_k_batch(hi, S_o, y, 1.0, K)[0].mean() - fce_k_batch(lo, S_o, y, 1.0, K)[0].mean()) / (2 * h)
            assert grad[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_k0_batched_gradient_is_bitwise_ce(rng):
    S_f, S_o = rng.uniform(-1, 1, (16, 7)), rng.uniform(-1, 1, (16, 7))
    y = rng.integers(0, 7, 16)
    assert fce_k_batch(S_f, S_o, y, 1.0, 0)[1].tobytes() == ce_batch(S_f, y, 1.0)[1].tobytes()
