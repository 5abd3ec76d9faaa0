import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from strominger.spectral_forms import (
    FormError,
    FormField,
    Lattice,
    TOP_DENSITY,
    constant_form,
    contract_lambda,
    dbar,
    del_,
    i_del_dbar,
    integrate,
    lambda_fault,
    metric_form,
    random_field,
    random_form,
    raw_contraction,
    spectral_derivative,
    top_density,
    wedge,
)


def test_lattice_shape_and_inactive_axes():
    lat = Lattice(8, ("x1", "y2"))
    assert lat.shape == (8, 1, 1, 8, 1, 1)
    assert lat.npoints == 64
    assert np.isclose(lat.volume, (2 * np.pi) ** 6)


def test_lattice_rejects_unknown_axis():
    with pytest.raises(ValueError):
        Lattice(8, ("x4",))


def test_derivative_of_plane_wave():
    lat = Lattice(16, ("x1", "y1"))
    x1, y1 = lat.coords()[0], lat.coords()[1]
    f = np.broadcast_to(np.exp(1j * x1), lat.shape).astype(complex)
    np.testing.assert_allclose(spectral_derivative(f, lat, 1), 0.5j * f, atol=1e-13)
    np.testing.assert_allclose(spectral_derivative(f, lat, 1, bar=True), 0.5j * f, atol=1e-13)
    g = np.broadcast_to(np.exp(1j * (x1 + y1)), lat.shape).astype(complex)
    # d/dzbar = (d_x + i d_y)/2 gives (i - 1)/2
    np.testing.assert_allclose(spectral_derivative(g, lat, 1, bar=True), 0.5 * (1j - 1) * g, atol=1e-13)


def test_derivative_matches_finite_differences():
    lat = Lattice(32, ("x2",))
    x = lat.coords()[2]
    f = np.broadcast_to(np.sin(x) + 0.3 * np.cos(2 * x), lat.shape).astype(complex)
    h = 2 * np.pi / 32
    fd = (np.roll(f, -1, axis=2) - np.roll(f, 1, axis=2)) / (2 * h)
    np.testing.assert_allclose(2 * spectral_derivative(f, lat, 2), fd, atol=2 * h * h)


def test_nyquist_derivative_is_zero():
    lat = Lattice(8, ("x1",))
    x = lat.coords()[0]
    f = np.broadcast_to(np.cos(4 * x), lat.shape).astype(complex)
    assert np.max(np.abs(spectral_derivative(f, lat, 1))) < 1e-14


@settings(max_examples=12, deadline=None)
@given(p=st.integers(0, 3), q=st.integers(0, 3), seed=st.integers(0, 2**31))
def test_exterior_identities(p, q, seed):
    lat = Lattice(4, ("x1", "y3"))
    rng = np.random.default_rng(seed)
    Psi = random_form(lat, rng, p, q)
    scale = 1e-12 * max(1.0, Psi.max_abs())
    if q <= 1:
        assert dbar(dbar(Psi)).max_abs() < scale
    if p <= 1:
        assert del_(del_(Psi)).max_abs() < scale
    if p < 3 and q < 3:
        assert (del_(dbar(Psi)) + dbar(del_(Psi))).max_abs() < scale


def test_wedge_graded_commutativity(lat, rng):
    a = random_form(lat, rng, 1, 0)
    b = random_form(lat, rng, 1, 1)
    c = random_form(lat, rng, 0, 1)
    np.testing.assert_allclose(wedge(a, b).comps, wedge(b, a).comps, atol=1e-14)
    np.testing.assert_allclose(wedge(a, c).comps, -wedge(c, a).comps, atol=1e-14)


def test_wedge_rejects_overflow(lat, rng):
    with pytest.raises(FormError):
        wedge(random_form(lat, rng, 2, 0), random_form(lat, rng, 2, 0))


def test_volume_density_of_omega_cubed(lat):
    g = np.diag([1.0, 2.0, 3.0]).astype(complex)
    w = metric_form(lat, g)
    vol = wedge(wedge(w, w), w) * (1 / 6)
    np.testing.assert_allclose(top_density(vol), 8 * 6.0, rtol=1e-14)
    assert TOP_DENSITY == -8j


def test_contraction_normalization(lat, rng):
    A = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    g = A @ A.conj().T + np.eye(3)
    w = metric_form(lat, g)
    w2 = wedge(w, w)
    np.testing.assert_allclose(np.broadcast_to(raw_contraction(g, w2)[..., 0, 0, 0, 0, 0, 0], (3, 3)), -4 * g,
                               atol=1e-12)
    np.testing.assert_allclose(contract_lambda(g, w2).comps, 4 * w.comps, atol=1e-12)
    with lambda_fault(2.0):
        assert np.max(np.abs(contract_lambda(g, w2).comps - 4 * w.comps)) > 1.0


def test_i_del_dbar_is_real_and_closed(lat, rng):
    beta = random_form(lat, rng, 1, 1, real=True)
    T = i_del_dbar(beta)
    assert T.reality_defect() < 1e-13
    assert del_(T).max_abs() < 1e-13 and dbar(T).max_abs() < 1e-13


def test_integral_of_exact_top_form_vanishes(lat, rng):
    eta = random_form(lat, rng, 2, 3)
    assert abs(integrate(top_density(del_(eta)), lat)) < 1e-10


def test_random_field_is_band_limited(lat, rng):
    f = random_field(lat, rng, (), kmax=1)
    fh = lat.fft(f)
    assert np.max(np.abs(fh[~lat.band_mask(1)])) < 1e-12


def test_constant_form_and_shapes(lat):
    F = constant_form(lat, 1, 1, np.eye(3))
    assert F.comps.shape == (3, 3) + lat.shape
    with pytest.raises(Exception):
        FormField(lat, 1, 1, np.zeros((2, 3) + lat.shape))
