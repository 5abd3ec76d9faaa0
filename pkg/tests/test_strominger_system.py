import numpy as np
import pytest

from strominger.hermitian_geometry import HolVolForm
from strominger.linearized_ops import BlockVector, coupled_background, flat_background
from strominger.spectral_forms import Lattice
from strominger.strominger_system import (
    SystemState,
    anomaly_closedness,
    class_to_alpha,
    curvature_conjugation_defect,
    ellipticity_monitor,
    eval_F,
    eval_F_coupled,
    gauge_reconstruction_defect,
    gauge_to_unitary,
    hym_membership,
    rescale_solution,
    transported_connection,
    unitarity_defect,
)
from strominger.verify import _random_z, random_positive_field


@pytest.fixture
def bg(lat):
    return flat_background(lat, 2, Omega=HolVolForm(1.2))


def test_base_point_is_exact_zero(bg):
    res = eval_F(SystemState(bg, 0.3, bg.zero()))
    assert res.w.max_abs() == 0.0
    assert all(v == 0.0 for v in res.norms.values())


def test_state_validation(bg):
    with pytest.raises(ValueError):
        SystemState(bg, -1.0, bg.zero())
    with pytest.raises(ValueError):
        SystemState(bg, 0.0, BlockVector((), bg.zero().form))


def test_residual_lies_in_W(bg, rng):
    for _ in range(3):
        st = SystemState(bg, 0.2, _random_z(bg, rng, 0.05))
        w = eval_F(st).w
        m = hym_membership(bg, w.ends[0])
        assert m["selfadjoint_defect"] < 1e-12
        assert m["mean_trace"] < 1e-12
        assert anomaly_closedness(w.form) < 1e-12 * max(1.0, w.form.max_abs())


def test_norms_keys(bg, rng):
    norms = eval_F(SystemState(bg, 0.1, _random_z(bg, rng, 0.05))).norms
    assert set(norms) >= {"hym_l2", "hym_max", "anomaly_l2", "anomaly_max", "total_l2"}
    assert norms["total_l2"] > 0


def test_ellipticity_monitor_scales_with_alpha(bg, rng):
    z = _random_z(bg, rng, 0.05)
    assert ellipticity_monitor(SystemState(bg, 0.0, z)) == 0.0
    a = ellipticity_monitor(SystemState(bg, 0.1, z))
    b = ellipticity_monitor(SystemState(bg, 0.2, z))
    assert a > 0 and np.isclose(b, 2 * a)


def test_coupled_base_point(lat):
    bg = coupled_background(lat, 2)
    assert eval_F_coupled(SystemState(bg, 0.5, bg.zero())).w.max_abs() == 0.0
    with pytest.raises(ValueError):
        eval_F_coupled(SystemState(flat_background(lat), 0.5, flat_background(lat).zero()))


def test_gauge_map_equal_metrics_is_identity(lat, rng):
    h = random_positive_field(lat, rng, 2, 0.05)
    sigma = gauge_to_unitary(h, h)
    assert np.max(np.abs(sigma - np.eye(2)[:, :, None, None, None, None, None, None])) < 1e-12


def test_gauge_map_pairs(lat, rng):
    h = random_positive_field(lat, rng, 2, 1e-2)
    g = random_positive_field(lat, rng, 2, 1e-2)
    sigma = gauge_to_unitary(h, g)
    assert gauge_reconstruction_defect(sigma, h, g) < 1e-12
    G10, G01 = transported_connection(lat, h, sigma)
    assert unitarity_defect(lat, g, G10, G01) < 1e-9
    d = curvature_conjugation_defect(lat, h, sigma)
    assert max(d.values()) < 1e-9


def test_rescaling_covariance(bg, rng):
    st = SystemState(bg, 0.25, _random_z(bg, rng, 0.05))
    rep = rescale_solution(st)
    assert rep["unit_residual_covariance_rel"] < 1e-12
    assert rep["class_factor"] == 0.25 ** -0.5 * bg.dil
    assert np.isclose(rep["class_factor_numeric"], rep["class_factor"], rtol=1e-12)
    rep2 = rescale_solution(st, "class_to_alpha")
    assert np.isclose(rep2["alpha_from_class"], 0.25)
    with pytest.raises(ValueError):
        rescale_solution(st.with_alpha(0.0))
    with pytest.raises(ValueError):
        class_to_alpha(-1.0)


def test_linearization_second_order():
    from strominger.verify import check_linearization
    lat = Lattice(8, ("x1", "y2"))
    bg = flat_background(lat, 2)
    order, errors, lower = check_linearization(bg, np.random.default_rng(3))
    assert abs(order - 2.0) < 0.1
    assert lower < 1e-12
