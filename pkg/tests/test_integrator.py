import numpy as np
import pytest

import helpers
from statflow import (
    AlgorithmState,
    DivergenceError,
    NoisePair,
    em_step,
    make_noise_streams,
    simulate_frozen,
)
from statflow.integrator import InvalidBudget, streams_from_seedseq


def _state(theta=0.5, x=0.2, xt=0.8, xb=-0.1, t=0.0):
    return AlgorithmState(t=t, theta=np.array([theta]), x=np.array([x]),
                          x_tilde=np.array([[xt]]), x_bar=np.array([xb]))


def test_state_validation():
    with pytest.raises(ValueError):
        AlgorithmState(t=0.0, theta=np.zeros(1), x=np.zeros(2),
                       x_tilde=np.zeros((1, 1)), x_bar=np.zeros(1))
    with pytest.raises(DivergenceError):
        AlgorithmState(t=0.0, theta=np.array([np.nan]), x=np.zeros(1),
                       x_tilde=np.zeros((1, 1)), x_bar=np.zeros(1))


def test_em_step_matches_hand_formulas(ou, coord_obj):
    st = _state()
    dt, alpha = 0.01, 0.3
    noise = NoisePair(dw=np.array([0.05]), dw_bar=np.array([-0.02]), dt=dt)
    out = em_step(st, ou, coord_obj, alpha, dt, noise)

    a, s, beta = 1.0, 0.5, coord_obj.beta_target
    g = 2.0 * (st.x_bar[0] - beta) * (1.0 * st.x_tilde[0, 0])
    assert out.theta[0] == pytest.approx(st.theta[0] - alpha * dt * g, rel=1e-14)
    assert out.x[0] == pytest.approx(
        st.x[0] + a * (st.theta[0] - st.x[0]) * dt + s * noise.dw[0], rel=1e-14)
    # tangent: dXt = (J_x Xt + J_theta) dt + (same dW scaled by sigma jacobians = 0)
    assert out.x_tilde[0, 0] == pytest.approx(
        st.x_tilde[0, 0] + (-a * st.x_tilde[0, 0] + a) * dt, rel=1e-14)
    assert out.x_bar[0] == pytest.approx(
        st.x_bar[0] + a * (st.theta[0] - st.x_bar[0]) * dt + s * noise.dw_bar[0],
        rel=1e-14)
    assert out.t == pytest.approx(dt)


def test_em_step_tangent_uses_state_noise(tanh_model, coord_obj):
    # state-dependent sigma: the tangent diffusion term must use dw, not dw_bar
    st = _state(x=0.3, xt=1.0)
    dt = 0.01
    noise = NoisePair(dw=np.array([0.07]), dw_bar=np.array([0.0]), dt=dt)
    out = em_step(st, tanh_model, coord_obj, 0.0, dt, noise)

    x, xt = st.x[0], st.x_tilde[0, 0]
    mu_x = -1.0 + 0.5 / np.cosh(x) ** 2
    sech2 = 1.0 / np.cosh(x) ** 2
    expected = xt + (mu_x * xt + 1.0) * dt + (0.1 * sech2 * xt) * noise.dw[0]
    assert out.x_tilde[0, 0] == pytest.approx(expected, rel=1e-13)


def test_em_step_divergence_guard(coord_obj):
    model = helpers.make_expanding_model()
    st = _state(x=9.0e5)
    noise = NoisePair(dw=np.zeros(1), dw_bar=np.zeros(1), dt=1.0)
    with pytest.raises(DivergenceError) as err:
        em_step(st, model, coord_obj, 0.0, 1.0, noise)
    assert err.value.t == pytest.approx(1.0)
    assert err.value.state is st


def test_block_equals_sequential_draws():
    a = make_noise_streams(42, 1)[0]
    b = make_noise_streams(42, 1)[0]
    blk_w, blk_wbar = a.block(5, 0.01, 2)
    pairs = [b.pair(0.01, 2) for _ in range(5)]
    assert np.array_equal(blk_w, np.stack([p.dw for p in pairs]))
    assert np.array_equal(blk_wbar, np.stack([p.dw_bar for p in pairs]))


def test_replica_streams_independent_of_family_size():
    few = make_noise_streams(9, 2)
    many = make_noise_streams(9, 6)
    for r in range(2):
        x1 = few[r].block(3, 0.1, 1)[0]
        x2 = many[r].block(3, 0.1, 1)[0]
        assert np.array_equal(x1, x2)


def test_streams_w_and_wbar_differ():
    s = make_noise_streams(0, 1)[0]
    dw, dwb = s.block(64, 1.0, 1)
    assert not np.allclose(dw, dwb)


def test_simulate_frozen_continuation(ou):
    theta = np.array([0.4])
    one = simulate_frozen(ou, theta, np.zeros(1), np.zeros((1, 1)),
                          0.01, 2.0, rng_seed=5, record_stride=10)
    stream = streams_from_seedseq(np.random.SeedSequence(5), 1)[0]
    first = simulate_frozen(ou, theta, np.zeros(1), np.zeros((1, 1)),
                            0.01, 1.0, rng_seed=stream, record_stride=10)
    second = simulate_frozen(ou, theta, first.x[-1], first.x_tilde[-1],
                             0.01, 1.0, rng_seed=stream, record_stride=10)
    assert np.array_equal(one.x[-1], second.x[-1])
    assert np.array_equal(one.x_tilde[-1], second.x_tilde[-1])


def test_simulate_frozen_batch_and_records(ou):
    x0 = np.zeros((3, 1))
    xt0 = np.zeros((3, 1, 1))
    path = simulate_frozen(ou, np.array([1.0]), x0, xt0, 0.01, 0.5,
                           rng_seed=1, record_stride=25)
    assert path.x.shape == (3, 3, 1)       # t=0, 0.25, 0.5
    assert path.t[0] == 0.0 and path.t[-1] == pytest.approx(0.5)
    # replicas match the same seed run one at a time
    solo = simulate_frozen(ou, np.array([1.0]), np.zeros(1), np.zeros((1, 1)),
                           0.01, 0.5, rng_seed=1, record_stride=25)
    assert np.array_equal(path.x[:, 0, :], solo.x)


def test_simulate_frozen_tangent_deterministic_for_ou(ou):
    # dXt = a (1 - Xt) dt with no noise term: closed form 1 - e^{-a t}
    path = simulate_frozen(ou, np.array([2.0]), np.zeros(1), np.zeros((1, 1)),
                           0.001, 3.0, rng_seed=11, record_stride=1000)
    target = 1.0 - np.exp(-path.t)
    assert np.allclose(path.x_tilde[:, 0, 0], target, atol=2e-3)


def test_simulate_frozen_rejects_zero_steps(ou):
    with pytest.raises(InvalidBudget):
        simulate_frozen(ou, np.array([0.0]), np.zeros(1), np.zeros((1, 1)),
                        0.01, 0.001, rng_seed=0)


def test_simulate_frozen_divergence():
    model = helpers.make_expanding_model()
    with pytest.raises(DivergenceError) as err:
        simulate_frozen(model, np.zeros(1), np.full(1, 10.0), np.zeros((1, 1)),
                        0.05, 50.0, rng_seed=2)
    assert err.value.t is not None


def test_noise_recording(ou):
    path = simulate_frozen(ou, np.array([0.0]), np.zeros(1), np.zeros((1, 1)),
                           0.01, 0.1, rng_seed=3, return_noise=True)
    assert path.noise.shape == (10, 1)
    replay = make_noise_streams(3, 1)[0].block_w(10, 0.01, 1)
    assert np.array_equal(path.noise, replay)
