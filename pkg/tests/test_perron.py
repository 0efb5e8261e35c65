import json
import math

import numpy as np
import pytest

from stochim.noise import OUParams, constant_z, sample_wiener, stationary_z
from stochim.perron import (
    ConvergenceError,
    GapError,
    LPParams,
    build_chart,
    check_gap,
    default_T_back,
    estimate_lip_h,
    evaluate_h,
    graph_distance,
    h_integral,
    load_chart,
    p_state,
    save_chart,
    solve_backward,
    xi_norm_E,
    xi_random_ball,
    xi_tensor_grid,
)
from stochim.spectral import (
    StateE,
    WaveSpec,
    eigen_data,
    norm_E,
    p_coords,
    project_Q,
    semigroup_apply,
)

# small configuration with a comfortable gap (lhs ~ 0.70)
SMALL = WaveSpec(epsilon=0.05, M=8, N=2, nonlinearity="sin", c=0.3, delta=0.1)
STEP = 1e-3


def wave_z(seed, spec, step=STEP, t_min=-20.0, t_max=0.1):
    w = sample_wiener(seed, step, t_min, t_max)
    return stationary_z(w, OUParams.for_wave(spec.epsilon))


def unit_xi(spec, v):
    return np.asarray(v, float) / eigen_data(spec).e_plus_norms


# --------------------------------------------------------------------- gap


def test_gap_zero_nonlinearity():
    g = check_gap(WaveSpec(epsilon=0.01, M=32, N=10, nonlinearity="zero"))
    assert g.lhs_gap == 0.0 and g.lhs_gap1 == 0.0
    assert g.pass_gap and g.pass_gap1


def test_gap_standard_values():
    # independent high-precision evaluation of the eigenvalue formula and the gap sums
    g = check_gap(WaveSpec(epsilon=0.01, M=32, N=10, nonlinearity="sin", c=1.0))
    assert g.K == 1.0 and g.lipF == pytest.approx(3.0)
    assert g.alpha == pytest.approx(-101.0205144336438, rel=1e-12)
    assert g.beta == pytest.approx(-122.5006406971205, rel=1e-12)
    assert g.alpha - g.eta == pytest.approx(10.74006313173835, rel=1e-11)
    assert g.eta - g.beta == pytest.approx(g.alpha - g.eta, rel=1e-12)
    assert g.lhs_gap == pytest.approx(0.5586559339925278, rel=1e-11)
    assert g.lip_h_bound == pytest.approx(0.6329029628134497, rel=1e-11)
    assert g.lhs_gap1 == pytest.approx(0.7354434319011206, rel=1e-11)
    assert g.pass_gap and g.pass_gap1
    assert g.beta < g.eta < g.alpha < 0


def test_gap_fails_for_small_N():
    spec = WaveSpec(epsilon=0.01, M=8, N=1, nonlinearity="sin", c=1.0)
    g = check_gap(spec)
    assert g.lhs_gap == pytest.approx(3.998, abs=1e-3)
    assert not g.pass_gap and math.isinf(g.lip_h_bound)
    z = wave_z(0, spec, 1e-4, -1.0, 0.1)
    with pytest.raises(GapError):
        solve_backward(np.ones(1), z, spec, LPParams(1e-4, T_back=0.5))


def test_gap_with_measured_lip_h():
    spec = WaveSpec(epsilon=0.01, M=32, N=10, nonlinearity="sin", c=1.0)
    g = check_gap(spec, lip_h=0.0)
    assert g.lhs_gap1 == g.lhs_gap and g.lip_h == 0.0


def test_default_T_back():
    spec = WaveSpec(epsilon=0.01, M=32, N=10, nonlinearity="sin", c=1.0)
    T = default_T_back(spec, 1e-8, 1e-4)
    g = check_gap(spec)
    L = math.log(1e8)
    assert T >= max(L / (g.eta - g.beta), 5 * L / (g.alpha - g.beta))
    assert T == pytest.approx(4.2879, abs=1e-9)


# --------------------------------------------------------------- backward


def test_linear_one_iteration():
    spec = WaveSpec(epsilon=0.05, M=8, N=2, nonlinearity="zero")
    z = wave_z(0, spec)
    xi = unit_xi(spec, [0.4, -0.3])
    sol = solve_backward(xi, z, spec, LPParams(STEP, T_back=1.0))
    assert sol.iterations == 1
    # zero up to the roundoff of the P/Q split
    assert norm_E(sol.h, spec) <= 1e-14 * norm_E(p_state(xi, spec), spec)
    for i in (0, 500, 1000):
        exact = np.asarray(semigroup_apply(p_state(xi, spec), sol.times[i], spec))
        np.testing.assert_allclose(sol.states[i], exact, rtol=1e-10, atol=1e-12 * np.abs(exact).max())


def test_boundary_identity_and_contraction():
    z = wave_z(1, SMALL)
    g = check_gap(SMALL)
    for xi in xi_random_ball(SMALL, 5, 1.0, seed=3):
        sol = solve_backward(xi, z, SMALL, LPParams(STEP))
        np.testing.assert_allclose(p_coords(sol.states[-1], SMALL), xi, rtol=1e-12, atol=1e-15)
        assert sol.diffs[-1] <= 1e-8
        assert max(sol.ratios[1:], default=0.0) <= g.lhs_gap + 0.05


def test_h_integral_consistency():
    z = wave_z(2, SMALL)
    P = LPParams(STEP)
    for xi in xi_random_ball(SMALL, 20, 1.0, seed=4):
        sol = solve_backward(xi, z, SMALL, P)
        h = h_integral(sol, z, SMALL, P)
        assert norm_E(h - project_Q(sol.states[-1], SMALL), SMALL) <= 2 * P.tol


def test_dense_linear_oracle():
    eps, c = 0.1, 0.2
    spec = WaveSpec(epsilon=eps, M=2, N=1, nonlinearity="affine", c=c)
    k2 = eigen_data(spec).k ** 2
    A = np.zeros((4, 4))
    for i in range(2):
        A[2 * i, 2 * i + 1] = 1.0
        A[2 * i + 1, 2 * i] = (c - k2[i]) / eps**2
        A[2 * i + 1, 2 * i + 1] = -1.0 / eps**2
    vals, vecs = np.linalg.eig(A)
    V = vecs[:, np.argmax(vals.real)].real.reshape(2, 2)
    oracle = project_Q(V, spec) / p_coords(V, spec)[0]
    P = LPParams(1e-3, quadrature="linear")
    z = constant_z(sample_wiener(0, 1e-3, -30.0, 0.1), 0.0)
    h = evaluate_h(np.array([1.0]), z, spec, P).as_array()
    assert norm_E(h - oracle, spec) <= 1e-6


def test_zero_forcing_gives_zero_h():
    spec = WaveSpec(epsilon=0.05, M=8, N=2, nonlinearity="zero")
    z = wave_z(0, spec)
    h = evaluate_h(unit_xi(spec, [0.2, 0.1]), z, spec, LPParams(STEP, T_back=1.0))
    assert norm_E(h, spec) <= 1e-14 * norm_E(p_state(unit_xi(spec, [0.2, 0.1]), spec), spec)


def test_window_and_shape_checks():
    z = wave_z(0, SMALL, t_min=-1.0)
    with pytest.raises(ValueError):
        solve_backward(np.zeros(3), z, SMALL, LPParams(STEP, T_back=0.5))
    from stochim.noise import GridError

    with pytest.raises(GridError):
        solve_backward(np.zeros(2), z, SMALL, LPParams(STEP, T_back=2.0))
    with pytest.raises(FloatingPointError):
        solve_backward(np.zeros(2), wave_z(0, SMALL, t_min=-200.0), SMALL, LPParams(STEP, T_back=180.0))


def test_max_iter_error_carries_ratio():
    z = wave_z(0, SMALL)
    with pytest.raises(ConvergenceError) as info:
        solve_backward(unit_xi(SMALL, [0.5, 0.5]), z, SMALL, LPParams(STEP, max_iter=2))
    assert len(info.value.ratios) == 1 and "ratio" in str(info.value)


def test_truncation_decay():
    # h(T) - h(2T) must decay at least like e^{(beta - eta) T} once past the transient
    spec = WaveSpec(epsilon=0.05, M=8, N=2, nonlinearity="sin", c=0.3)
    g = check_gap(spec)
    z = constant_z(sample_wiener(1, STEP, -20.0, 0.1), 0.0)
    xi = unit_xi(spec, [0.6, -0.4])
    Ts = np.arange(1.0, 3.01, 0.25)
    D = []
    for T in Ts:
        h1 = solve_backward(xi, z, spec, LPParams(STEP, T_back=T, tol=1e-14)).h
        h2 = solve_backward(xi, z, spec, LPParams(STEP, T_back=2 * T, tol=1e-14)).h
        D.append(norm_E(h1 - h2, spec))
    D = np.array(D)
    assert np.all(D[1:] <= D[0] * np.exp((g.beta - g.eta) * (Ts[1:] - Ts[0])))
    slope = np.polyfit(Ts, np.log(D), 1)[0]
    assert slope <= 0.8 * (g.beta - g.eta)


# ------------------------------------------------------------------ charts


def test_xi_grids():
    g = xi_tensor_grid(SMALL, 5, 1.0)
    assert np.all(xi_norm_E(g, SMALL) <= 1.0 + 1e-12)
    assert len(g) == 13  # lattice points of {-1,-.5,0,.5,1}^2 inside the unit disc
    b = xi_random_ball(SMALL, 50, 2.0, seed=1)
    assert b.shape == (50, 2) and np.all(xi_norm_E(b, SMALL) <= 2.0)
    np.testing.assert_array_equal(b, xi_random_ball(SMALL, 50, 2.0, seed=1))


def test_empty_and_zero_charts():
    z = wave_z(0, SMALL)
    empty = build_chart(np.zeros((0, 2)), z, SMALL, LPParams(STEP))
    assert len(empty) == 0 and not empty.partial
    lin = WaveSpec(epsilon=0.05, M=8, N=2, nonlinearity="zero")
    ch = build_chart(xi_tensor_grid(lin, 3), z, lin, LPParams(STEP, T_back=1.0))
    assert np.max(norm_E(ch.h_values, lin)) <= 1e-14
    assert estimate_lip_h(ch) <= 1e-14
    with pytest.raises(ValueError):
        estimate_lip_h(empty)


def test_chart_radius_check():
    z = wave_z(0, SMALL)
    with pytest.raises(ValueError):
        build_chart(xi_tensor_grid(SMALL, 3, 2.0), z, SMALL, LPParams(STEP), R=1.0)


def test_chart_determinism_and_partial():
    z = wave_z(5, SMALL)
    grid = xi_tensor_grid(SMALL, 3)
    a = build_chart(grid, z, SMALL, LPParams(STEP))
    b = build_chart(grid, z, SMALL, LPParams(STEP))
    assert np.array_equal(a.h_values, b.h_values)
    bad = build_chart(grid, z, SMALL, LPParams(STEP, max_iter=2))
    assert bad.partial and len(bad) == 0 and len(bad.failures) == len(grid)


def test_chart_persistence(tmp_path):
    z = wave_z(6, SMALL)
    ch = build_chart(xi_tensor_grid(SMALL, 3), z, SMALL, LPParams(STEP))
    jp, cp = save_chart(ch, tmp_path / "chart")
    meta = json.loads(jp.read_text())
    assert meta["format"] == "manifold-chart/1" and meta["n_points"] == len(ch)
    assert cp.read_text().splitlines()[0].startswith("xi_1,xi_2,h_u_1")
    back = load_chart(tmp_path / "chart", z=z, recheck=2)
    np.testing.assert_array_equal(back.h_values, ch.h_values)
    np.testing.assert_array_equal(back.xi_grid, ch.xi_grid)
    assert back.spec == SMALL
    meta["residuals"][0] = 1.0
    jp.write_text(json.dumps(meta))
    with pytest.raises(ValueError, match="residual"):
        load_chart(tmp_path / "chart")


def test_chart_recheck_detects_tampering(tmp_path):
    z = wave_z(6, SMALL)
    ch = build_chart(xi_tensor_grid(SMALL, 3), z, SMALL, LPParams(STEP))
    ch.h_values[0, 3, 0] += 1e-3
    save_chart(ch, tmp_path / "c")
    with pytest.raises(ValueError, match="residual check"):
        load_chart(tmp_path / "c", z=z, recheck=1)


def test_lip_h_refinement_and_bound():
    spec = WaveSpec(epsilon=0.01, M=8, N=2, nonlinearity="sin", c=0.3, delta=0.1)
    g = check_gap(spec)
    z = wave_z(2, spec, t_min=-20.0)
    P = LPParams(STEP)
    coarse = estimate_lip_h(build_chart(xi_tensor_grid(spec, 3), z, spec, P))
    fine = estimate_lip_h(build_chart(xi_tensor_grid(spec, 5), z, spec, P))
    assert fine <= g.lip_h_bound and coarse <= g.lip_h_bound
    assert abs(fine - coarse) <= 0.1 * fine


# ---------------------------------------------------------- graph distance


def test_graph_distance_on_and_off_graph():
    z = wave_z(7, SMALL)
    P = LPParams(STEP)
    xi = unit_xi(SMALL, [0.3, 0.2])
    h = evaluate_h(xi, z, SMALL, P)
    on = StateE.from_array(p_state(xi, SMALL) + h.as_array())
    assert graph_distance(on, z, SMALL, P) <= 2 * P.tol

    lin = WaveSpec(epsilon=0.05, M=8, N=2, nonlinearity="zero")
    q = np.zeros((8, 2))
    q[5] = [0.1, -0.4]
    U = StateE.from_array(p_state(xi, lin) + q)
    d = graph_distance(U, z, lin, LPParams(STEP, T_back=1.0))
    assert abs(d - norm_E(q, lin)) <= 1e-8


def test_deterministic_chart_is_seed_independent():
    spec = SMALL.replace(delta=0.0)
    xi = unit_xi(spec, [0.5, -0.2])
    P = LPParams(STEP)
    h = [evaluate_h(xi, wave_z(s, spec), spec, P).as_array() for s in (0, 1)]
    assert norm_E(h[0] - h[1], spec) <= 2 * P.tol
