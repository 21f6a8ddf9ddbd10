import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fathom_sim.controller import (ALPHA, GAMMA_BATCH, GAMMA_EPOCHS, GAMMA_ETA, GuardRails,
                                   HyperState, aggregate_g, client_min_alignment, cosine,
                                   normalized_hypergradient, smooth, update_batch, update_epochs,
                                   update_learning_rate)


def test_defaults():
    assert (GAMMA_ETA, GAMMA_EPOCHS, GAMMA_BATCH, ALPHA) == (0.01, 0.01, 0.1, 0.5)


def test_smooth_examples():
    v = np.array([3.0, -1.0])
    assert np.array_equal(smooth(np.array([9.0, 9.0]), v, 0.0), v)
    assert np.array_equal(smooth(np.zeros(2), np.array([2.0, 0.0]), 0.5), [1.0, 0.0])
    out = np.zeros(2)
    for k in range(1, 30):
        out = smooth(out, v, 0.5)
        assert np.allclose(v - out, v * 0.5**k, atol=1e-15)
    with pytest.raises(ValueError):
        smooth(np.zeros(2), np.zeros(3), 0.5)


def test_normalized_hypergradient_examples():
    assert normalized_hypergradient([1.0, 0.0], [1.0, 0.0]) == -1.0
    assert normalized_hypergradient([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert normalized_hypergradient([1.0, 1.0], [-1.0, 0.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert normalized_hypergradient([1.0, 2.0], [0.0, 0.0]) == 0.0
    assert normalized_hypergradient([1e-13, 0.0], [1.0, 0.0]) == 0.0


def test_cosine_survives_huge_vectors():
    a = np.array([1e300, 1e300])
    assert cosine(a, a) == pytest.approx(1.0)
    assert cosine(a, -a) == pytest.approx(-1.0)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), s1=st.floats(1e-6, 1e6), s2=st.floats(1e-6, 1e6))
def test_hypergradient_scale_invariance(seed, s1, s2):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(7), rng.standard_normal(7)
    h = normalized_hypergradient(a, b)
    assert -1.0 <= h <= 1.0
    assert abs(normalized_hypergradient(s1 * a, s2 * b) - h) <= 1e-12


def test_client_min_alignment_examples():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert client_min_alignment([e1, 2 * e1, 0.5 * e1]) == pytest.approx(1.0)
    assert client_min_alignment([e1, e1, -e1]) == pytest.approx(-1.0)
    assert client_min_alignment([e1, e1, e2]) == pytest.approx(0.0)
    assert client_min_alignment([e1]) == 0.0
    assert client_min_alignment([e1, np.zeros(2), e1]) == 0.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 8), scale=st.floats(1e-4, 1e4))
def test_phi_is_rescaling_invariant(seed, k, scale):
    grads = list(np.random.default_rng(seed).standard_normal((k, 4)))
    phi = client_min_alignment(grads)
    assert -1.0 <= phi <= 1.0
    assert client_min_alignment([scale * g for g in grads]) == pytest.approx(phi, abs=1e-12)


def test_aggregate_g_examples():
    assert aggregate_g([1.0, 1.0, 1.0], [3, 5, 9], 0.1) == pytest.approx(-0.1)
    assert aggregate_g([0.0, 0.0], [3, 5], 0.7) == 0.0
    assert aggregate_g([1.0, -1.0], [1, 1], 0.4) == 0.0
    with pytest.raises(ValueError):
        aggregate_g([], [], 0.1)


def test_update_examples():
    assert update_learning_rate(0.3, 0.0) == 0.3
    assert update_learning_rate(0.1, -1.0, 0.01) == pytest.approx(0.1010050167, abs=1e-10)
    assert update_learning_rate(0.32, 1.0, 0.01) == pytest.approx(0.32 * math.exp(-0.01), abs=1e-15)
    assert update_epochs(2.0, 0.0, 0.0) == 2.0
    assert update_epochs(1.0, -1.0, 0.0, 0.01) == pytest.approx(math.exp(0.01), abs=1e-15)
    assert update_epochs(1.0, 0.0, -0.1, 0.01) == pytest.approx(math.exp(0.001), abs=1e-15)
    assert update_batch(20.0, 0.0) == 20.0
    assert update_batch(20.0, -0.5, 0.1) == pytest.approx(19.0246, abs=1e-4)


@settings(max_examples=300, deadline=None)
@given(e=st.floats(0.01, 100), b=st.floats(0.5, 500), h=st.floats(-1, 1), g=st.floats(-5, 5),
       ge=st.floats(0, 1), gb=st.floats(0, 1))
def test_epoch_batch_coupling_identity(e, b, h, g, ge, gb):
    ratio = update_epochs(e, h, g, ge) / update_batch(b, g, gb)
    expected = (e / b) * math.exp(-ge * h - (ge + gb) * g)
    assert ratio == pytest.approx(expected, rel=1e-12)


def test_first_round_is_neutral():
    st_ = HyperState.initial(3, 0.1, 1.0, 20.0)
    sig = st_.step(np.array([1.0, 2.0, 3.0]), [0.0], [10])
    assert sig.h_bar == 0.0
    assert (st_.eta, st_.epochs, st_.batch) == (0.1, 1.0, 20.0)
    assert np.array_equal(st_.delta_sm, [0.5, 1.0, 1.5])
    assert st_.t == 1


def test_state_step_uses_current_eta_for_g():
    st_ = HyperState.initial(2, 0.2, 1.0, 10.0, gamma_eta=0.0)
    st_.delta_sm = np.array([1.0, 0.0])
    sig = st_.step(np.array([1.0, 0.0]), [1.0, 1.0], [1, 3])
    assert sig.h_bar == -1.0 and sig.g_bar == pytest.approx(-0.2)
    assert st_.eta == 0.2
    assert st_.epochs == pytest.approx(math.exp(-0.01 * (-1.0 - 0.2)))
    assert st_.batch == pytest.approx(10.0 * math.exp(-0.02))


def test_guard_rails_clamp():
    st_ = HyperState.initial(1, 9.99, 63.9, 2.0, gamma_eta=1.0, gamma_epochs=1.0, gamma_batch=1.0,
                             guard=GuardRails(batch=(1.0, 5.0)))
    st_.delta_sm = np.array([1.0])
    st_.step(np.array([1.0]), [-1.0], [1])
    assert st_.eta <= 10.0 and st_.epochs <= 64.0 and 1.0 <= st_.batch <= 5.0


def test_state_validation_and_overflow():
    with pytest.raises(ValueError):
        HyperState.initial(2, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        HyperState.initial(2, 0.1, 1.0, 1.0, alpha=1.0)
    st_ = HyperState.initial(1, 1e5, 1.0, 1.0)
    with pytest.raises(FloatingPointError):
        st_.step(np.array([1.0]), [-1.0], [1])
