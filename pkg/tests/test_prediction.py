import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octmpc.prediction import (DisturbanceFeedback, build_prediction, error_propagation_map, expand_tmpc_gain,
                               input_error_map, phi_blocks, simulate_errors)

from conftest import make_scalar


def test_scalar_prediction_blocks():
    pm = build_prediction(make_scalar(), 3)
    np.testing.assert_array_equal(pm.C_xx.ravel(), [1, 1, 1])
    np.testing.assert_array_equal(pm.C_xu, [[0, 0, 0], [1, 0, 0], [1, 1, 0]])


def test_system1_last_state_block(system1):
    pm = build_prediction(system1, 10)
    A9 = np.eye(2)
    for _ in range(9):
        A9 = A9 @ system1.A
    np.testing.assert_allclose(pm.C_xx[-2:], A9, rtol=1e-14)


def test_stacked_offsets(system1):
    pm = build_prediction(system1, 3)
    np.testing.assert_array_equal(pm.bold_b, np.tile(system1.b, 3))
    assert pm.bold_D.shape == (2 * system1.D.shape[0], 2 * system1.nw)


def test_short_horizon_rejected(system1):
    with pytest.raises(ValueError):
        build_prediction(system1, 1)


def test_toeplitz_structure_spot_checks(system1, rng):
    N = 6
    pm = build_prediction(system1, N)
    nx, nu = system1.nx, system1.nu
    for _ in range(30):
        i, j = rng.integers(N, size=2)
        blk_u = pm.C_xu[i * nx:(i + 1) * nx, j * nu:(j + 1) * nu]
        blk_w = pm.C_xw[i * nx:(i + 1) * nx, j * nx:(j + 1) * nx]
        if i > j:
            P = np.linalg.matrix_power(system1.A, i - j - 1)
            np.testing.assert_allclose(blk_u, P @ system1.B, atol=1e-13)
            np.testing.assert_allclose(blk_w, P, atol=1e-13)
        else:
            assert not blk_u.any() and not blk_w.any()


def test_tmpc_gain_expansion():
    sys_s = make_scalar()
    assert not expand_tmpc_gain([[0.0]], sys_s, 4).any()
    M = expand_tmpc_gain([[-1.0]], sys_s, 3)
    np.testing.assert_array_equal(M, [[0, 0, 0], [-1, 0, 0], [0, -1, 0]])
    M2 = expand_tmpc_gain([[0.7]], sys_s, 2)
    np.testing.assert_array_equal(M2, [[0, 0], [0.7, 0]])
    with pytest.raises(ValueError):
        expand_tmpc_gain([[1.0, 2.0]], sys_s, 3)


def test_error_map_examples():
    sys_s = make_scalar()
    w0, w1 = 0.3, -0.7
    e = error_propagation_map(DisturbanceFeedback.zeros(3, 1, 1), sys_s) @ [w0, w1]
    np.testing.assert_allclose(e, [0.0, w0, w0 + w1])
    deadbeat = DisturbanceFeedback.from_state_feedback([[-1.0]], sys_s, 3)
    np.testing.assert_allclose(error_propagation_map(deadbeat, sys_s) @ [w0, w1], [0.0, w0, w1])
    m = 0.4
    single = DisturbanceFeedback((np.array([[m]]), np.array([[0.0]])), np.array([[0.0]]))
    e = error_propagation_map(single, sys_s) @ [w0, w1]
    assert e[2] == pytest.approx(w1 + (1.0 + m) * w0)


def test_expand_round_trip_and_causality(rng):
    blocks = tuple(rng.normal(size=(2, 3)) for _ in range(4))
    fb = DisturbanceFeedback(blocks, rng.normal(size=(2, 3)))
    M = fb.expand()
    back = DisturbanceFeedback.from_matrix(M, 2, 3, fb.terminal)
    for a, b in zip(back.blocks, fb.blocks):
        np.testing.assert_array_equal(a, b)
    N = fb.N
    for i in range(N):
        for j in range(i, N):
            assert not M[i * 2:(i + 1) * 2, j * 3:(j + 1) * 3].any()
        for j in range(i):
            np.testing.assert_array_equal(M[i * 2:(i + 1) * 2, j * 3:(j + 1) * 3], fb.block(i - j))


def _random_feedback(system, N, rng):
    return DisturbanceFeedback(tuple(rng.normal(size=(system.nu, system.nx)) for _ in range(N - 1)),
                               rng.normal(size=(system.nu, system.nx)))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31 - 1))
def test_stacked_equals_stepwise(system1, N, seed):
    rng = np.random.default_rng(seed)
    fb = _random_feedback(system1, N, rng)
    pm = build_prediction(system1, N)
    x0 = rng.normal(size=2)
    u_hat = rng.normal(size=N)
    w = rng.normal(size=(N, 2))
    # step the closed loop with the disturbance feedback applied
    x, states = x0.copy(), []
    for i in range(N):
        states.append(x)
        u = u_hat[i] + sum((fb.block(i - j) @ system1.Bw @ w[j] for j in range(i)), np.zeros(1))
        x = system1.step(x, u, w[i])
    np.testing.assert_allclose(pm.states(x0, u_hat, w.ravel(), fb), np.concatenate(states), atol=1e-10)
    # the error map agrees with the recursion and with the stacked formula
    E = error_propagation_map(fb, system1)
    np.testing.assert_allclose(E @ w[:N - 1].ravel(), simulate_errors(fb, system1, w[:N - 1]), atol=1e-10)
    stacked = (pm.C_xw + pm.C_xu @ fb.expand()) @ pm.bold_Bw
    np.testing.assert_allclose(E, stacked[:, :(N - 1) * 2], atol=1e-10)
    # input errors
    ue = input_error_map(fb, system1) @ w[:N - 1].ravel()
    for i in range(N):
        expect = sum((fb.block(i - j) @ system1.Bw @ w[j] for j in range(i)), np.zeros(1))
        np.testing.assert_allclose(ue[i], expect, atol=1e-10)


def test_tube_embedding_phi_is_closed_loop_power(system1):
    K = np.array([[-0.3, -0.4]])
    fb = DisturbanceFeedback.from_state_feedback(K, system1, 6)
    Acl = system1.A + system1.B @ K
    for m, Phi in enumerate(phi_blocks(fb, system1)):
        np.testing.assert_allclose(Phi, np.linalg.matrix_power(Acl, m), atol=1e-12)
