import numpy as np
import pytest

from strominger.bundle_geometry import (
    GaugeError,
    adjoint,
    bundle_curvature,
    conjugate_to_reference,
    end_trace,
    exp_end,
    exp_metric,
    lambda_F,
    project_H0,
    reference_metric,
    selfadjoint_defect,
)
from strominger.spectral_forms import FormField, Lattice, integrate, metric_form, random_field, top_density, wedge
from strominger.verify import random_positive_constant


@pytest.fixture
def hhat(rng):
    return random_positive_constant(rng, 2)


def _u(lat, rng, hhat, amp=0.05):
    return project_H0(random_field(lat, rng, (2, 2), amplitude=amp), lat, hhat)


def test_projection_properties(lat, rng, hhat):
    u = _u(lat, rng, hhat)
    assert selfadjoint_defect(u, hhat) < 1e-14
    assert np.max(np.abs(end_trace(u))) < 1e-14
    assert abs(lat.fft(u)[(...,) + (0,) * 6]).max() < 1e-14
    np.testing.assert_allclose(project_H0(u, lat, hhat), u, atol=1e-15)


def test_weak_gauge_keeps_constant_mode(lat, hhat):
    c = np.zeros((2, 2) + lat.shape, dtype=complex)
    c[0, 0], c[1, 1] = 1.0, -1.0
    c = 0.5 * (c + adjoint(c, hhat))
    assert np.max(np.abs(project_H0(c, lat, hhat, remove_constant=False) - c)) < 1e-14
    assert np.max(np.abs(project_H0(c, lat, hhat))) < 1e-14


def test_exp_is_group_like(lat, rng, hhat):
    u = _u(lat, rng, hhat)
    e = exp_end(u, hhat)
    prod = np.einsum("ab...,bc...->ac...", exp_end(u, hhat, 0.5), exp_end(u, hhat, 0.5))
    np.testing.assert_allclose(prod, e, atol=1e-13)
    det = np.linalg.det(np.moveaxis(e, (0, 1), (-2, -1)))
    np.testing.assert_allclose(det, 1.0, atol=1e-13)


def test_exp_rejects_non_selfadjoint(lat, rng):
    u = random_field(lat, rng, (2, 2)) * 1j
    with pytest.raises(GaugeError):
        exp_end(u, np.eye(2))


def test_reference_metric_is_flat(lat, hhat):
    F = bundle_curvature(reference_metric(lat, 2, hhat))
    assert F.max_abs() == 0.0


def test_trace_consistent_curvature_has_exact_trace(lat, rng, hhat):
    m = exp_metric(lat, _u(lat, rng, hhat, 0.2), hhat)
    F = bundle_curvature(m, trace_consistent=True)
    trF = np.einsum("jkaa...->jk...", F.comps)
    ld = np.log(np.linalg.det(np.moveaxis(m.H, (0, 1), (-2, -1))).real)
    lh = lat.fft(ld.astype(complex))
    sym = lat.symbols
    for j in range(3):
        for k in range(3):
            np.testing.assert_allclose(trF[j, k], -lat.ifft(lh * sym[0, j] * sym[1, k]), atol=1e-14)
    # Stokes: the integral of (omega^2 / 2) ^ i Tr F vanishes
    w = metric_form(lat, np.eye(3))
    dens = top_density(wedge(wedge(w, w) * 0.5, FormField(lat, 1, 1, 1j * trF)))
    assert abs(integrate(dens, lat)) < 1e-10


def test_lambda_F_selfadjoint_and_mean_zero(lat, rng, hhat):
    m = exp_metric(lat, _u(lat, rng, hhat), hhat)
    F = bundle_curvature(m, trace_consistent=True)
    g = random_positive_constant(rng)
    lf = lambda_F(g, F)
    lfH = np.einsum("ab...,bc...->ac...", lf, m.H)
    assert np.max(np.abs(lfH - np.conj(np.swapaxes(lfH, 0, 1)))) < 1e-12
    assert abs(np.mean(end_trace(lf))) < 1e-13
    u = _u(lat, rng, hhat)
    c = conjugate_to_reference(u, lambda_F(g, bundle_curvature(exp_metric(lat, u, hhat))), hhat)
    assert selfadjoint_defect(c, hhat) < 1e-12


def test_abelian_rank_one(rng):
    # raw curvature, so a small amplitude keeps aliasing below the tolerance
    lat1 = Lattice(8, ("x1", "y2"))
    u = random_field(lat1, rng, (1, 1), amplitude=1e-2).real.astype(complex)
    F = bundle_curvature(exp_metric(lat1, u))
    sym = lat1.symbols
    uh = lat1.fft(u[0, 0])
    for j in range(3):
        for k in range(3):
            np.testing.assert_allclose(F.comps[j, k, 0, 0], -lat1.ifft(uh * sym[0, j] * sym[1, k]), rtol=0, atol=1e-10)
