import numpy as np
import pytest

from strominger.hermitian_geometry import HermitianMetric, HolVolForm, balanced_form, broadcast_matrix, sqrt_positive_22
from strominger.linearized_ops import (
    BlockVector,
    RangeError,
    a_block_report,
    adjoint_check,
    apply_A,
    apply_A_gateaux,
    apply_block_inverse,
    apply_forward,
    apply_L1,
    apply_L2,
    assemble_dense,
    bochner_sides,
    coupled_background,
    flat_background,
    kahler_identity_residual,
    solve_L1,
    solve_L2,
    synthetic_curvature,
    variation_ddbar_omega,
    variation_metric,
)
from strominger.spectral_forms import constant_form, i_del_dbar, random_field, random_form
from strominger.verify import random_positive_constant


@pytest.fixture
def bg(lat, rng):
    return flat_background(lat, 2, ghat=random_positive_constant(rng), Omega=HolVolForm(0.7 + 0.4j))


def _theta(bg, rng):
    return bg.project_theta(i_del_dbar(random_form(bg.lattice, rng, 1, 1, real=True)))


def test_L1_symbol_nonnegative(bg):
    assert bg.symbol.min() >= 0
    assert bg.symbol[(0,) * 6] == 0


def test_L1_selfadjoint_and_bochner(bg, rng):
    h1 = bg.project_end(random_field(bg.lattice, rng, (2, 2)))
    h2 = bg.project_end(random_field(bg.lattice, rng, (2, 2)))
    op = lambda h: apply_L1(bg, h) / bg.weight
    assert adjoint_check(bg, op, h1, h2, bg.end_inner) < 1e-13
    lhs, rhs = bochner_sides(bg, h1)
    assert abs(lhs - rhs) < 1e-12 * abs(rhs)
    assert lhs.real > 0


def test_L2_negative_definite_on_range(bg, rng):
    T = _theta(bg, rng)
    val = bg.form_inner(apply_L2(bg, T), T)
    assert val.real < 0 and abs(val.imag) < 1e-12 * abs(val)


def test_theta_projector_is_idempotent_and_beta_recovers(bg, rng):
    T = _theta(bg, rng)
    np.testing.assert_allclose(bg.project_theta(T).comps, T.comps, atol=1e-14)
    beta = bg.theta_to_beta(T)
    np.testing.assert_allclose(i_del_dbar(beta).comps, T.comps, atol=1e-13)


@pytest.mark.parametrize("pq", [(1, 0), (1, 1), (2, 1), (1, 2), (2, 2), (3, 1), (1, 3)])
def test_kahler_identity(lat, rng, pq):
    g = random_positive_constant(rng)
    assert kahler_identity_residual(random_form(lat, rng, *pq), g) < 1e-12


def test_solves_invert_blocks(bg, rng):
    h = bg.project_end(random_field(bg.lattice, rng, (2, 2)))
    np.testing.assert_allclose(solve_L1(bg, apply_L1(bg, h)), h, atol=1e-13)
    T = _theta(bg, rng)
    np.testing.assert_allclose(solve_L2(bg, apply_L2(bg, T)).comps, T.comps, atol=1e-13)


def test_L1_range_error_for_volume_form(bg):
    rhs = np.zeros((2, 2) + bg.lattice.shape, dtype=complex)
    rhs[0, 0] = rhs[1, 1] = bg.weight
    with pytest.raises(RangeError) as info:
        solve_L1(bg, rhs)
    assert info.value.defect > 0.5


def test_L2_range_error_for_non_exact_form(bg):
    c = constant_form(bg.lattice, 2, 2, np.eye(3))
    with pytest.raises(RangeError):
        solve_L2(bg, c)


def test_variation_metric_against_square_root(lat, rng):
    g = broadcast_matrix(lat, random_positive_constant(rng))
    m = HermitianMetric(lat, g)
    Om = HolVolForm(1.3)
    psi = balanced_form(m, Om)
    dT = i_del_dbar(random_form(lat, rng, 1, 1, real=True))
    h = 1e-3
    fd = (sqrt_positive_22(psi + dT * h, Om).g - sqrt_positive_22(psi - dT * h, Om).g) / (2 * h)
    np.testing.assert_allclose(fd, variation_metric(m, dT, Om), atol=1e-10)


def test_scaling_mode_variation(lat, rng):
    g0 = random_positive_constant(rng)
    m = HermitianMetric.constant(lat, g0)
    Om = HolVolForm(0.5)
    # dTheta = eps |Omega| omega^2 gives delta g = 2 eps g
    dg = variation_metric(m, balanced_form(m, Om) * 1e-3, Om)
    np.testing.assert_allclose(dg, 2e-3 * broadcast_matrix(lat, g0), rtol=1e-12)


def test_variation_routes_agree(bg, rng):
    dT = i_del_dbar(random_form(bg.lattice, rng, 1, 1, real=True))
    a, b = variation_ddbar_omega(bg, dT)
    np.testing.assert_allclose(a.comps, b.comps, atol=1e-12 * b.max_abs())


def test_A_block_zero_without_curvature(bg, rng):
    assert np.max(np.abs(apply_A(bg, _theta(bg, rng)))) == 0


def test_A_block_report_with_synthetic_curvature(lat, rng):
    Fhat = synthetic_curvature(lat, 2, rng)
    bg = flat_background(lat, 2, Fhat=Fhat)
    T = _theta(bg, rng)
    rep = a_block_report(bg, T)
    assert rep["displayed_norm"] > 0 and rep["gateaux_norm"] > 0
    d = apply_A_gateaux(bg, T)
    assert d.shape == (2, 2) + lat.shape


def test_block_inverse_matches_dense_solve(lat4, rng):
    bg = flat_background(lat4, 2, Fhat=synthetic_curvature(lat4, 2, rng))
    K, BZ, BW = assemble_dense(bg)
    assert K.shape[0] == K.shape[1]
    c = rng.standard_normal(K.shape[0])
    w = bg.zero().from_vector(BW @ c)
    z_dense = bg.zero().from_vector(BZ @ np.linalg.solve(K, c))
    z = apply_block_inverse(bg, w)
    assert (z - z_dense).max_abs() < 1e-10 * z_dense.max_abs()


def test_coupled_background_block_round_trip(lat, rng):
    bg = coupled_background(lat, 2, ghat=random_positive_constant(rng))
    ends = tuple(bg.project_end(random_field(lat, rng, (b.rank, b.rank)), i) for i, b in enumerate(bg.bundles))
    z = BlockVector(ends, _theta(bg, rng))
    back = apply_block_inverse(bg, apply_forward(bg, z))
    assert (back - z).max_abs() < 1e-12 * z.max_abs()


def test_block_vector_round_trip(bg, rng):
    z = BlockVector((bg.project_end(random_field(bg.lattice, rng, (2, 2))),), _theta(bg, rng))
    v = z.to_vector()
    assert v.dtype == float
    assert (z.from_vector(v) - z).max_abs() == 0
