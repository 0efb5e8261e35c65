import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import eigh, expm

from stochim.spectral import (
    HALF_PI,
    SpecError,
    StateE,
    WaveSpec,
    apply_F,
    check_declared_lipschitz,
    dump_spec,
    eigen_data,
    epsilon_lip,
    from_p_coords,
    inner_product_E,
    mode_exponentials,
    nonlinear_diff_modes,
    norm_E,
    norm_equivalence,
    p_coords,
    parse_spec,
    project_P,
    project_Q,
    read_state_csv,
    semigroup_apply,
    write_state_csv,
)

STD = WaveSpec(epsilon=0.01, M=32, N=10, nonlinearity="sin", c=1.0)


def rand_state(spec, rng):
    k = np.arange(1, spec.M + 1)
    return StateE(rng.standard_normal(spec.M) / k, rng.standard_normal(spec.M) * 10 / k)


def test_validation():
    with pytest.raises(SpecError):
        WaveSpec(epsilon=0.1, M=8, N=5)  # 1/(2 eps) = 5 <= 6
    with pytest.raises(SpecError):
        WaveSpec(epsilon=0.01, M=5, N=5)
    with pytest.raises(SpecError):
        WaveSpec(epsilon=0.01, M=8, N=2, G=10)
    with pytest.raises(SpecError):
        WaveSpec(epsilon=0.01, M=8, N=2, nonlinearity="sin", c=1.0, lip_f=2.0)
    with pytest.raises(SpecError):
        WaveSpec(epsilon=0.01, M=8, N=2, nonlinearity="custom")
    s = WaveSpec(epsilon=0.01, M=8, N=2, nonlinearity="tanh", c=-0.5)
    assert s.lip_f == 0.5 and s.G == 32


def test_eigenvalues_closed_form():
    ev = eigen_data(WaveSpec(epsilon=0.1, M=6, N=1))
    # roots of eps^2 lam^2 + lam + 1 = 0
    assert ev.lam_plus[0].real == pytest.approx(-1.01020514, abs=1e-7)
    assert ev.lam_minus[0].real == pytest.approx(-98.98979486, abs=1e-7)
    # 4 eps^2 k^2 = 1.44 for k = 6: complex pair with real part -1/(2 eps^2)
    assert ev.lam_plus[5].real == pytest.approx(-50.0, rel=1e-14)
    assert ev.lam_minus[5].real == ev.lam_plus[5].real
    assert ev.lam_plus[5].imag > 0 and ev.disc_sign[5] == -1


def test_limit_minus_k_squared():
    vals = [eigen_data(WaveSpec(epsilon=e, M=3, N=1)).lam_plus[2].real for e in (1e-1, 1e-2, 1e-3, 1e-4)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(-9.0, abs=1e-5)


@pytest.mark.parametrize("eps", [0.01, 0.05, 0.1])
def test_vieta(eps):
    spec = WaveSpec(epsilon=eps, M=32, N=1)
    ev = eigen_data(spec)
    k = ev.k
    np.testing.assert_allclose(ev.lam_plus * ev.lam_minus, k**2 / eps**2, rtol=1e-12)
    np.testing.assert_allclose(ev.lam_plus + ev.lam_minus, -1 / eps**2, rtol=1e-12)


def test_blocks():
    ev = eigen_data(STD)
    np.testing.assert_array_equal(ev.blocks[2], [[0, 1], [-9 / 1e-4, -1 / 1e-4]])
    for k in range(STD.M):
        w = np.linalg.eigvals(ev.blocks[k])
        assert sorted(w.real) == pytest.approx(sorted([ev.lam_minus[k].real, ev.lam_plus[k].real]), rel=1e-9)


def test_eigenvectors_orthogonal():
    ev = eigen_data(STD)
    for k in range(STD.N):
        ep = np.zeros((STD.M, 2)); ep[k] = [1, ev.lam_plus[k].real]
        em = np.zeros((STD.M, 2)); em[k] = [1, ev.lam_minus[k].real]
        ip = inner_product_E(ep, em, STD)
        assert abs(ip) <= 1e-10 * norm_E(ep, STD) * norm_E(em, STD)


def test_v_only_norm():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(STD.M)
    U = StateE(np.zeros(STD.M), v)
    l2 = math.sqrt(HALF_PI * np.sum(v * v))
    assert norm_E(U, STD) == pytest.approx(STD.epsilon * l2, rel=1e-14)


def test_u_part_lower_bound():
    rng = np.random.default_rng(1)
    eps, N = STD.epsilon, STD.N
    c = math.sqrt(1 / (4 * eps**2) - (N + 1) ** 2)
    for _ in range(100):
        U = rand_state(STD, rng)
        unorm = math.sqrt(HALF_PI * np.sum(U.u_modes**2))
        assert norm_E(U, STD) >= c * unorm * (1 - 1e-12)


def test_inner_product_properties():
    rng = np.random.default_rng(2)
    a, b = rand_state(STD, rng), rand_state(STD, rng)
    assert inner_product_E(a, b, STD) == pytest.approx(inner_product_E(b, a, STD), rel=1e-13)
    assert inner_product_E(a, a, STD) > 0
    lo = np.zeros((STD.M, 2)); lo[:5] = 1.0
    hi = np.zeros((STD.M, 2)); hi[5:] = 1.0
    assert inner_product_E(lo, hi, STD) == 0.0
    with pytest.raises(ValueError):
        inner_product_E(np.zeros((3, 2)), np.zeros((3, 2)), STD)


def test_projections():
    rng = np.random.default_rng(3)
    ev = eigen_data(STD)
    for _ in range(20):
        U = rand_state(STD, rng)
        P, Q = project_P(U, STD), project_Q(U, STD)
        np.testing.assert_allclose((P + Q).as_array(), U.as_array(), atol=1e-12 * np.abs(U.as_array()).max())
        np.testing.assert_allclose(project_P(P, STD).as_array(), P.as_array(), rtol=1e-10, atol=1e-14)
    for k in range(STD.N):
        em = np.zeros((STD.M, 2)); em[k] = [1, ev.lam_minus[k].real]
        assert np.abs(project_P(em, STD)).max() <= 1e-12 * abs(ev.lam_minus[k])
    hi = np.zeros((STD.M, 2)); hi[STD.N:] = rng.standard_normal((STD.M - STD.N, 2))
    assert np.all(project_P(hi, STD) == 0)


def test_p_coords_match_linear_solve():
    rng = np.random.default_rng(4)
    ev = eigen_data(STD)
    U = rand_state(STD, rng).as_array()
    xi = p_coords(U, STD)
    for k in range(STD.N):
        V = np.array([[1, 1], [ev.lam_plus[k].real, ev.lam_minus[k].real]])
        sol = np.linalg.solve(V, U[k])
        assert xi[k] == pytest.approx(sol[0], rel=1e-10)
    back = from_p_coords(xi, STD)
    np.testing.assert_allclose(back.as_array(), project_P(U, STD), rtol=1e-10, atol=1e-13)


def test_p_q_orthogonal():
    rng = np.random.default_rng(5)
    for _ in range(100):
        U, V = rand_state(STD, rng), rand_state(STD, rng)
        ip = inner_product_E(project_P(U, STD), project_Q(V, STD), STD)
        assert abs(ip) <= 1e-10 * norm_E(U, STD) * norm_E(V, STD)


def test_semigroup_identity_and_composition():
    rng = np.random.default_rng(6)
    U = rand_state(STD, rng)
    assert semigroup_apply(U, 0.0, STD).allclose(U, rtol=1e-15)
    a = semigroup_apply(semigroup_apply(U, 0.03, STD, 0.2), 0.05, STD, -0.1)
    b = semigroup_apply(U, 0.08, STD, 0.1)
    np.testing.assert_allclose(a.as_array(), b.as_array(), rtol=1e-10, atol=1e-10 * np.abs(b.as_array()).max())


def test_semigroup_matches_expm():
    spec = WaveSpec(epsilon=0.1, M=8, N=1)
    E = mode_exponentials(spec, 0.37)
    for k, A in enumerate(eigen_data(spec).blocks):
        np.testing.assert_allclose(E[k], expm(A * 0.37), rtol=1e-9, atol=1e-14)


def test_defective_mode():
    spec = WaveSpec(epsilon=1 / 16, M=8, N=2)  # 4 eps^2 k^2 = 1 at k = 8
    assert eigen_data(spec).disc_sign[7] == 0
    for t in (0.01, 0.5, -0.02):
        E = mode_exponentials(spec, t)
        np.testing.assert_allclose(E[7], expm(eigen_data(spec).blocks[7] * t), rtol=1e-9)


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        semigroup_apply(np.full((STD.M, 2), np.nan), 0.1, STD)


def _block_norm(E, G):
    # operator norm of E in the inner product with Gram matrix G
    w = eigh(E.T @ G @ E, G, eigvals_only=True)
    return math.sqrt(w.max())


def test_dichotomy_norm_q_space():
    ev = eigen_data(STD)
    E = mode_exponentials(STD, 0.1)
    best = 0.0
    for k in range(STD.M):
        if k < STD.N:
            em = np.array([1.0, ev.lam_minus[k].real])
            G = ev.gram[k]
            r = math.sqrt((E[k] @ em) @ G @ (E[k] @ em) / (em @ G @ em))
        else:
            r = _block_norm(E[k], ev.gram[k])
        best = max(best, r)
    assert best == pytest.approx(math.exp(ev.beta * 0.1), rel=1e-6)


def test_dichotomy_norm_p_space():
    ev = eigen_data(STD)
    best = 0.0
    for k in range(STD.N):
        ep = np.zeros((STD.M, 2)); ep[k] = [1.0, ev.lam_plus[k].real]
        best = max(best, norm_E(semigroup_apply(ep, -0.1, STD), STD) / norm_E(ep, STD))
    assert best == pytest.approx(math.exp(-ev.alpha * 0.1), rel=1e-6)


def test_backward_pure_p_state_finite():
    p = from_p_coords(np.linspace(1, 2, STD.N), STD)
    back = semigroup_apply(p, -1.0, STD)
    assert np.all(np.isfinite(back.as_array()))
    np.testing.assert_allclose(semigroup_apply(back, 1.0, STD).as_array(), p.as_array(), rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("t", [0.01, 0.1, 1.0])
def test_dichotomy_certificate(t):
    ev = eigen_data(STD)
    rng = np.random.default_rng(7)
    for _ in range(20):
        # states built directly in the invariant subspaces (no projection roundoff)
        U = rand_state(STD, rng).as_array()
        q = U.copy()
        q[: STD.N, 1] = ev.lam_minus[: STD.N].real * q[: STD.N, 0]
        p = from_p_coords(rng.standard_normal(STD.N), STD).as_array()
        # additive floor: e^{beta t} drops below double precision for t = 1
        floor = 1e-15 * norm_E(q, STD)
        assert norm_E(semigroup_apply(q, t, STD), STD) <= math.exp(ev.beta * t) * norm_E(q, STD) * (1 + 1e-9) + floor
        assert norm_E(semigroup_apply(p, -t, STD), STD) <= math.exp(-ev.alpha * t) * norm_E(p, STD) * (1 + 1e-9)


def test_apply_F_linear_part():
    spec = WaveSpec(epsilon=0.01, M=8, N=2, nonlinearity="zero", delta=0.3, phi_modes=(1.0, 0.5))
    F = apply_F(StateE.zeros(8), 1.0, spec)
    np.testing.assert_allclose(F.u_modes, 0.3 * spec.phi)
    assert np.all(F.v_modes == 0)


@pytest.mark.parametrize("M", [4, 16, 32])
def test_affine_collocation_exact(M):
    spec = WaveSpec(epsilon=0.01, M=M, N=2, nonlinearity="affine", c=0.7)
    rng = np.random.default_rng(M)
    U = rand_state(spec, rng)
    F = apply_F(U, 0.0, spec)
    np.testing.assert_allclose(F.v_modes, 0.7 * U.u_modes / 1e-4, rtol=0, atol=1e-8 * np.abs(F.v_modes).max())


def test_nonfinite_collocation_error():
    spec = WaveSpec(epsilon=0.1, M=4, N=1, nonlinearity="custom", lip_f=1.0, f=lambda u: np.log(u))
    with pytest.raises(FloatingPointError, match="x="):
        apply_F(StateE(-np.ones(4), np.zeros(4)), 0.0, spec)


def test_lipschitz_of_F():
    spec = WaveSpec(epsilon=0.01, M=32, N=10, nonlinearity="sin", c=1.0)
    assert spec.epsilon <= epsilon_lip(spec.N)
    rng = np.random.default_rng(8)
    for _ in range(100):
        a, b = rand_state(spec, rng), rand_state(spec, rng)
        num = norm_E(apply_F(a, 0.0, spec) - apply_F(b, 0.0, spec), spec)
        assert num <= 3 * spec.lip_f * norm_E(a - b, spec)


def test_epsilon_lip_threshold():
    N = 4
    e = epsilon_lip(N)
    assert 1 / math.sqrt(0.25 - e**2 * (N + 1) ** 2) == pytest.approx(3.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(-1e-6, 1e-6))
def test_stable_difference(u, w):
    spec = WaveSpec(epsilon=0.1, M=4, N=1, nonlinearity="sin", c=1.3)
    d = spec.f_diff(np.array([u]), np.array([w]))[0]
    exact = 2 * 1.3 * math.cos(u + w / 2) * math.sin(w / 2)
    assert d == pytest.approx(exact, rel=1e-12, abs=1e-300)
    assert abs(d) <= 1.3 * abs(w) * (1 + 1e-12)


def test_diff_modes_consistent():
    rng = np.random.default_rng(9)
    spec = WaveSpec(epsilon=0.05, M=8, N=2, nonlinearity="tanh", c=0.8)
    u, w = rng.standard_normal(8), rng.standard_normal(8)
    from stochim.spectral import nonlinear_modes

    np.testing.assert_allclose(
        nonlinear_diff_modes(u, w, spec), nonlinear_modes(u + w, spec) - nonlinear_modes(u, spec),
        atol=1e-13,
    )


def test_declared_lipschitz_warning():
    spec = WaveSpec(epsilon=0.1, M=4, N=1, nonlinearity="custom", lip_f=0.1, f=lambda u: 2 * np.sin(u))
    with pytest.warns(UserWarning):
        check_declared_lipschitz(spec, n_probe=20)
    ok = WaveSpec(epsilon=0.1, M=4, N=1, nonlinearity="sin", c=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        check_declared_lipschitz(ok, n_probe=20)


def test_norm_equivalence_reported():
    lo, hi = norm_equivalence(STD)
    assert 0 < lo <= hi


def test_spec_roundtrip():
    s = WaveSpec(epsilon=0.02, M=12, N=3, G=30, nonlinearity="tanh", c=0.4, delta=0.2, phi_modes=(1.0, 0.25))
    assert parse_spec(dump_spec(s)) == s
    with pytest.raises(SpecError):
        parse_spec("epsilon = 0.1\nM = 4\nN = 1\nbogus = 3\n")


def test_state_csv(tmp_path):
    rng = np.random.default_rng(10)
    U = rand_state(STD, rng)
    write_state_csv(tmp_path / "s.csv", U)
    assert read_state_csv(tmp_path / "s.csv").allclose(U, rtol=0)


def test_state_rejects_nonfinite():
    with pytest.raises(ValueError):
        StateE(np.array([np.inf]), np.array([0.0]))
