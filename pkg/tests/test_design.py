import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from octmpc.design import (DesignError, DesignInfeasibleError, OfflineDesign, RiccatiError,
                           design_offline, design_terminal_set, hash_payload, lqr_terminal_gain, lyapunov_residual,
                           optimize_tightening, riccati_iteration, terminal_cost, terminal_support_constants,
                           tightening_from_feedback, tightening_rows, tmpc_tightening)
from octmpc.model import CostWeights, LinearSystem, box_constraints
from octmpc.polytope import PolytopeH
from octmpc.prediction import DisturbanceFeedback, build_prediction, phi_blocks

from conftest import design_for, make_scalar


def vertex_support(W: PolytopeH, row) -> float:
    """Brute-force support value over the vertices of a (low dimensional) W."""
    return float(np.max(W.vertices() @ np.asarray(row)))


# -- terminal gain and cost ------------------------------------------------

def test_riccati_scalar_golden_ratio():
    K, P, _ = riccati_iteration(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    phi = (1 + np.sqrt(5)) / 2
    assert P[0, 0] == pytest.approx(phi, abs=1e-10)
    assert K[0, 0] == pytest.approx(-phi / (1 + phi), abs=1e-10)


def test_riccati_zero_dynamics_gives_zero_gain():
    K, P, _ = riccati_iteration(np.zeros((1, 1)), np.eye(1), np.eye(1), np.eye(1))
    assert K[0, 0] == 0.0
    assert P[0, 0] == pytest.approx(1.0)


def test_riccati_matches_scipy(system1, weights1):
    K, P, _ = riccati_iteration(system1.A, system1.B, weights1.Q, weights1.R)
    P_ref = scipy.linalg.solve_discrete_are(system1.A, system1.B, weights1.Q, weights1.R)
    B, R = system1.B, weights1.R
    K_ref = -np.linalg.solve(R + B.T @ P_ref @ B, B.T @ P_ref @ system1.A)
    np.testing.assert_allclose(K, K_ref, atol=1e-6)
    np.testing.assert_allclose(P, P_ref, rtol=1e-8)
    residual = system1.A.T @ P @ (system1.A + B @ K) + weights1.Q - P
    assert np.abs(residual).max() <= 1e-9 * max(1.0, np.abs(P).max())


def test_riccati_unstabilizable_raises():
    with pytest.raises(RiccatiError):
        riccati_iteration(np.array([[2.0]]), np.zeros((1, 1)), np.eye(1), np.eye(1), max_iter=2000)


def test_terminal_cost_deadbeat_loop():
    sys_ = make_scalar()
    P = terminal_cost(sys_, CostWeights(np.eye(1), np.eye(1)), [[-1.0]])
    assert P[0, 0] == pytest.approx(2.0)


def test_terminal_cost_scalar_half():
    sys_ = make_scalar()
    P = terminal_cost(sys_, CostWeights([[0.75]], [[1.0]]), [[-0.5]])
    assert P[0, 0] == pytest.approx(4 / 3, abs=1e-12)


def test_terminal_cost_of_lqr_is_riccati_fixed_point(system1, weights1):
    K, P_ric, _ = riccati_iteration(system1.A, system1.B, weights1.Q, weights1.R)
    P = terminal_cost(system1, weights1, K)
    np.testing.assert_allclose(P, P_ric, rtol=1e-8)
    assert lyapunov_residual(system1, weights1, K, P) <= 1e-9 * np.abs(P).max()


def test_terminal_cost_rejects_unstable_loop():
    with pytest.raises(DesignError, match="Schur"):
        terminal_cost(make_scalar(), CostWeights(np.eye(1), np.eye(1)), [[0.5]])


# -- tube tightening ---------------------------------------------------------

@pytest.mark.parametrize("K, expected", [
    (0.0, [[0, 0, 0, 0], [1, 1, 0, 0], [2, 2, 0, 0]]),
    (-1.0, [[0, 0, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]]),
])
def test_tmpc_tightening_scalar(scalar_unit, K, expected):
    t = tmpc_tightening(scalar_unit, [[K]], 3)
    np.testing.assert_allclose(t.t, expected, atol=1e-9)


def test_tmpc_tightening_without_disturbance_is_zero():
    sys_ = make_scalar(w_max=0.0)
    t = tmpc_tightening(sys_, [[-0.5]], 4)
    np.testing.assert_allclose(t.t, 0.0, atol=1e-12)


def test_tmpc_tightening_unbounded_disturbance():
    sys_ = make_scalar().with_disturbance(PolytopeH([[1.0]], [1.0]))
    with pytest.raises(DesignError, match="bounded"):
        tmpc_tightening(sys_, [[-0.5]], 3)


# -- terminal set and constants ------------------------------------------------

def test_support_constants_origin(scalar_unit):
    c_F, c_Y = terminal_support_constants(PolytopeH.origin(1), scalar_unit, [[-0.5]])
    np.testing.assert_allclose(c_F, 0.0, atol=1e-12)
    np.testing.assert_allclose(c_Y, 0.0, atol=1e-12)


def test_support_constants_interval(scalar_unit):
    c_F, c_Y = terminal_support_constants(PolytopeH.box([-1], [1]), scalar_unit, [[-1.0]])
    np.testing.assert_allclose(c_F, [1, 1, 1, 1], atol=1e-12)
    np.testing.assert_allclose(c_Y, 0.0, atol=1e-12)


def test_support_constants_box_row():
    sys_ = LinearSystem(0.5 * np.eye(2), np.zeros((2, 1)), np.eye(2), [[0.3, -0.4]], [[0.0]], [1.0],
                        PolytopeH.box([-1, -1], [1, 1]))
    c_F, c_Y = terminal_support_constants(PolytopeH.box([-1, -1], [1, 1]), sys_, np.zeros((1, 2)))
    assert c_F[0] == pytest.approx(0.7, abs=1e-12)
    np.testing.assert_allclose(c_Y, 0.5, atol=1e-12)


def test_terminal_set_scalar_contracting():
    sys_ = make_scalar(A=0.5, x_max=1.0)
    X_T = design_terminal_set(sys_, [[0.0]], np.zeros(sys_.nc))
    lo, hi = X_T.bounding_box()
    assert lo[0] == pytest.approx(-1.0) and hi[0] == pytest.approx(1.0)


def test_terminal_set_deadbeat_is_box():
    sys_ = LinearSystem(np.zeros((2, 2)), np.zeros((2, 1)), np.eye(2), *box_constraints([3.0, 3.0], 1.0, 2, 1), PolytopeH.box([-1, -1], [1, 1]))
    X_T = design_terminal_set(sys_, np.zeros((1, 2)), np.zeros(sys_.nc))
    np.testing.assert_allclose(np.sort(X_T.vertices(), axis=0)[[0, -1]], [[-3, -3], [3, 3]], atol=1e-9)


def test_terminal_set_exhausted_raises():
    sys_ = make_scalar(A=0.5, x_max=1.0)
    with pytest.raises(DesignInfeasibleError):
        design_terminal_set(sys_, [[0.0]], np.array([1.5, 1.5, 0.0, 0.0]))


def test_tube_terminal_set_system1(design10, system1, rng):
    X_T, K_f = design10.terminal.X_T, design10.terminal.K_f
    assert X_T.contains(np.zeros(2))
    assert not X_T.is_empty()
    Acl = system1.A + system1.B @ K_f
    for x in X_T.sample(200, rng):
        assert X_T.contains(Acl @ x, tol=1e-7)


# -- tightening program --------------------------------------------------------

def test_optimize_tightening_without_disturbance():
    sys_ = make_scalar(w_max=0.0)
    design = design_offline(sys_, CostWeights.identity(1, 1), 4, with_fpd=False)
    np.testing.assert_allclose(design.tightening.t, 0.0, atol=1e-9)


def test_scalar_design_not_worse_than_tube(scalar_design):
    assert scalar_design.tightening.norm <= scalar_design.tmpc.norm + 1e-6
    assert np.all(scalar_design.tightening.t <= scalar_design.tmpc.t + 1e-9)


def test_system1_design_solution_shape(design10, system1):
    st_ = design10.stats
    assert st_["socp"]["status"] == "optimal"
    t = design10.tightening.t
    assert t.shape == (10, system1.nc)
    np.testing.assert_array_equal(t[0], 0.0)
    assert np.all(np.diff(t, axis=0) >= -1e-12)
    assert st_["norm_t"] < st_["norm_t_tmpc"]


def test_fallback_none_still_optimal(system1_cfg):
    design = design_for(system1_cfg, 10, fallback="none")
    assert design.tightening.norm <= design.tmpc.norm + 1e-6


def test_horizon_below_two_rejected(scalar_design, scalar_cfg):
    with pytest.raises(ValueError):
        optimize_tightening(scalar_cfg.system, 1, scalar_design.terminal)


# -- invariants of the optimal tightening ---------------------------------------

@pytest.fixture(params=["system1", "scalar"])
def any_design(request, design10, scalar_design, system1_cfg, scalar_cfg):
    if request.param == "system1":
        return design10, system1_cfg.system
    return scalar_design, scalar_cfg.system


def test_stacked_certificate_identity(any_design):
    design, sys_ = any_design
    N = design.N
    pm = build_prediction(sys_, N)
    Z = design.tightening.stacked_certificate(sys_.d)
    M = design.feedback.expand(N)
    rhs = (pm.bold_F @ (pm.C_xw + pm.C_xu @ M) + pm.bold_G @ M) @ pm.bold_Bw[:, :sys_.nw * (N - 1)]
    np.testing.assert_allclose(Z.T @ pm.bold_D, rhs, atol=1e-8)
    np.testing.assert_allclose(Z.T @ pm.bold_d, design.tightening.flat, atol=1e-8)
    assert Z.min() >= -1e-9


def test_tightening_recursion_matches_vertex_oracle(any_design):
    design, sys_ = any_design
    rows = tightening_rows(design.feedback, sys_)
    inc = design.tightening.increments
    for m in range(design.N - 1):
        oracle = [vertex_support(sys_.W, r) for r in rows[m]]
        np.testing.assert_allclose(inc[m], oracle, atol=1e-6)


def test_terminal_conditions_sampled(any_design, rng):
    design, sys_ = any_design
    term, fb, N = design.terminal, design.feedback, design.N
    Phi = phi_blocks(fb, sys_, N)
    Wv = sys_.W.vertices()
    xs = term.X_T.sample(100, rng)
    t_last = design.tightening.t[-1]
    row_F = (sys_.F @ Phi[N - 1] + sys_.G @ fb.block(N)) @ sys_.Bw
    row_Y = term.Y @ Phi[N] @ sys_.Bw
    cons = xs @ (sys_.F + sys_.G @ term.K_f).T
    succ = xs @ (term.Y @ (sys_.A + sys_.B @ term.K_f)).T
    for w in Wv:
        assert np.all(cons + row_F @ w <= sys_.b - t_last + 1e-7)
        assert np.all(succ + row_Y @ w <= term.z + 1e-7)


def test_terminal_condition_multipliers(any_design):
    design, sys_ = any_design
    term, fb, N, tv = design.terminal, design.feedback, design.N, design.tightening
    Phi = phi_blocks(fb, sys_, N)
    np.testing.assert_allclose(tv.lambda1 @ sys_.D, (sys_.F @ Phi[N - 1] + sys_.G @ fb.block(N)) @ sys_.Bw,
                               atol=1e-6)
    assert np.all(tv.lambda1 @ sys_.d + term.c_F <= sys_.b - tv.t[-1] + 1e-6)
    assert np.all(tv.lambda2 @ sys_.d + term.c_Y <= term.z + 1e-6)


# -- properties ---------------------------------------------------------------

gains = arrays(np.float64, 3, elements=st.floats(-1.5, 1.5, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(gains, st.floats(0.1, 2.0))
def test_tightening_from_feedback_is_vertex_support(m, w_max):
    sys_ = make_scalar(A=0.9, w_max=w_max)
    fb = DisturbanceFeedback(tuple([[v]] for v in m[:2]), [[m[2]]])
    tv = tightening_from_feedback(sys_, fb)
    rows = tightening_rows(fb, sys_)
    expected = np.cumsum([[vertex_support(sys_.W, r) for r in rows[k]] for k in range(2)], axis=0)
    np.testing.assert_allclose(tv.t[1:], expected, atol=1e-8)
    np.testing.assert_allclose(tv.tail, [vertex_support(sys_.W, r) for r in rows[2]], atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 2), elements=st.floats(-0.5, 0.5, allow_nan=False)))
def test_tightening_monotone_and_nonnegative(Mv):
    cfg_sys = make_scalar(A=1.0, w_max=0.3)
    fb = DisturbanceFeedback(([[Mv[0, 0]]], [[Mv[0, 1]]], [[Mv[1, 0]]]), [[Mv[1, 1]]])
    t = tightening_from_feedback(cfg_sys, fb).t
    assert np.all(t >= -1e-12)
    assert np.all(np.diff(t, axis=0) >= -1e-12)


# -- artifacts -----------------------------------------------------------------

def test_artifact_round_trip(tmp_path, scalar_design):
    path = tmp_path / "design.json"
    scalar_design.save(path)
    loaded = OfflineDesign.load(path)
    np.testing.assert_array_equal(loaded.tightening.t, scalar_design.tightening.t)
    np.testing.assert_array_equal(loaded.terminal.X_T.A, scalar_design.terminal.X_T.A)
    np.testing.assert_array_equal(loaded.feedback.expand(), scalar_design.feedback.expand())
    np.testing.assert_array_equal(loaded.terminal.P, scalar_design.terminal.P)
    assert loaded.N == scalar_design.N


def test_artifact_version_checked(tmp_path, scalar_design):
    data = scalar_design.to_dict()
    data["artifact_version"] = 99
    with pytest.raises(DesignError, match="version"):
        OfflineDesign.from_dict(json.loads(json.dumps(data)))


def test_hash_is_order_independent():
    assert hash_payload({"b": 1, "a": [1, 2]}) == hash_payload({"a": [1, 2], "b": 1})
    assert hash_payload({"a": 1}) != hash_payload({"a": 2})


def test_lqr_gain_wrapper(system1, weights1):
    np.testing.assert_array_equal(lqr_terminal_gain(system1, weights1),
                                  riccati_iteration(system1.A, system1.B, weights1.Q, weights1.R)[0])
