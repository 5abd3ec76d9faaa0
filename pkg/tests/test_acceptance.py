"""Acceptance criteria 1-9.

Each test prints one ``CRITERION n: PASS|FAIL`` line (also collected into the
terminal summary) with the measured values and the pinned tolerances.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from strominger.continuation import (
    ContinuationConfig,
    continue_in_alpha,
    make_manufactured,
    quadratic_check,
    quadratic_ratios,
)
from strominger.hermitian_geometry import HermitianMetric, HolVolForm, balanced_form, broadcast_matrix, sqrt_positive_22
from strominger.linearized_ops import (
    apply_block_inverse,
    assemble_dense,
    coupled_background,
    flat_background,
    synthetic_curvature,
    variation_ddbar_omega,
    variation_metric,
)
from strominger.spectral_forms import Lattice, i_del_dbar, random_form
from strominger.strominger_system import (
    SystemState,
    curvature_conjugation_defect,
    eval_F,
    eval_F_coupled,
    gauge_reconstruction_defect,
    gauge_to_unitary,
    rescale_solution,
)
from strominger.verify import (
    _random_z,
    check_block_inverse,
    check_linearization,
    check_membership,
    fd_order,
    random_positive_constant,
    random_positive_field,
    run_battery,
)

TOL_IDENTITY = 1e-9
RUNTIME_IDENTITY = 120.0
TOL_SQRT = 1e-10
TOL_SCALING = 1e-12
ORDER, ORDER_TOL = 2.0, 0.1
STEPS = (1e-2, 5e-3, 2.5e-3)
TOL_ROUTES = 1e-9
TOL_BLOCK_ROUND_TRIP = 1e-9
TOL_DENSE = 1e-8
TOL_BASE = 1e-12
TOL_MEMBERSHIP = 1e-10
TOL_RECOVERY = 1e-6
MAX_NEWTON = 10
QUAD_UPPER = 1e-3
QUAD_RATIO_BOUND = 1e2  # r_{k+1} <= C r_k^2 with this C once r_k < 1e-3
TOL_STEP_HALVING = 1e-8
RUNTIME_CONTINUATION = 600.0
TOL_RESCALE = 1e-9
TOL_GAUGE = 1e-9

CRITERION_1_SUITES = (
    "spectral_forms.dbar_squared",
    "spectral_forms.leibniz",
    "hermitian_geometry.omega_squared_components",
    "hermitian_geometry.delta_omega_components",
    "spectral_forms.contraction",
    "linearized_ops.kahler_identity",
    "linearized_ops.bochner",
    "bundle_geometry.trace_identity",
)


def report(crit: int, ok: bool, detail: str):
    line = (f"CRITERION {crit}", "PASS" if ok else "FAIL", detail)
    ACCEPTANCE_LINES.append(line)
    print(f"{line[0]}: {line[1]}  {detail}")
    return ok


@pytest.fixture(scope="module")
def lat8():
    return Lattice(8, ("x1", "x2"))


def test_criterion_1_identity_suite(lat8):
    t0 = time.perf_counter()
    rows = {r.id: r for r in run_battery(lat8, rank=2, seed=0, tol=TOL_IDENTITY)}
    elapsed = time.perf_counter() - t0
    worst = max(rows[k].measured for k in CRITERION_1_SUITES)
    ok = all(rows[k].status == "pass" and rows[k].measured <= TOL_IDENTITY for k in CRITERION_1_SUITES)
    ok = ok and elapsed < RUNTIME_IDENTITY
    assert report(1, ok, f"worst residual {worst:.2e} (tol {TOL_IDENTITY:.0e}), battery {elapsed:.1f}s "
                         f"(limit {RUNTIME_IDENTITY:.0f}s)")


def test_criterion_2_square_root(lat8):
    rng = np.random.default_rng(2)
    Om = HolVolForm(0.9 - 0.3j)
    worst = 0.0
    metrics = [broadcast_matrix(lat8, random_positive_constant(rng)) for _ in range(100)]
    metrics += [random_positive_field(lat8, rng, amplitude=0.3) for _ in range(10)]
    for g in metrics:
        out = sqrt_positive_22(balanced_form(HermitianMetric(lat8, g), Om), Om).g
        worst = max(worst, float(np.max(np.abs(out - g)) / np.max(np.abs(g))))
    scale = 0.0
    for g in metrics[:10] + metrics[-3:]:
        psi = balanced_form(HermitianMetric(lat8, g), Om)
        base = sqrt_positive_22(psi, Om).g
        for c in (0.25, 3.0):
            scale = max(scale, float(np.max(np.abs(sqrt_positive_22(psi * c, Om).g - c * c * base))
                                     / np.max(np.abs(c * c * base))))
    ok = worst < TOL_SQRT and scale <= TOL_SCALING
    assert report(2, ok, f"round trip {worst:.2e} (tol {TOL_SQRT:.0e}), scaling {scale:.2e} (tol {TOL_SCALING:.0e})")


def test_criterion_3_variation_lemma(lat8):
    rng = np.random.default_rng(3)
    Om = HolVolForm(1.0)
    g = broadcast_matrix(lat8, random_positive_constant(rng))
    m = HermitianMetric(lat8, g)
    psi = balanced_form(m, Om)
    dT = i_del_dbar(random_form(lat8, rng, 1, 1, real=True))
    dT = dT * (1.0 / dT.max_abs())
    pred = variation_metric(m, dT, Om)
    errors = []
    for h in STEPS:
        fd = (sqrt_positive_22(psi + dT * h, Om).g - sqrt_positive_22(psi - dT * h, Om).g) / (2 * h)
        errors.append(float(np.max(np.abs(fd - pred)) / np.max(np.abs(pred))))
    order = fd_order(errors)
    bg = flat_background(lat8, 2, ghat=g[..., 0, 0, 0, 0, 0, 0], Omega=Om)
    routes = 0.0
    for _ in range(3):
        a, b = variation_ddbar_omega(bg, i_del_dbar(random_form(lat8, rng, 1, 1, real=True)))
        routes = max(routes, (a - b).max_abs() / b.max_abs())
    ok = abs(order - ORDER) <= ORDER_TOL and routes <= TOL_ROUTES
    errs = ", ".join(f"{e:.2e}" for e in errors)
    assert report(3, ok, f"FD errors [{errs}] observed order {order:.2f} (need {ORDER} +- {ORDER_TOL}); "
                         f"routes {routes:.2e} (tol {TOL_ROUTES:.0e})")


def test_criterion_4_linearization(lat8):
    bg = flat_background(lat8, 2)
    order, errors, lower = check_linearization(bg, np.random.default_rng(4), steps=STEPS)
    ok = abs(order - ORDER) <= ORDER_TOL and lower <= errors[-1]
    errs = ", ".join(f"{e:.2e}" for e in errors)
    assert report(4, ok, f"FD errors [{errs}] observed order {order:.2f} (need {ORDER} +- {ORDER_TOL}); "
                         f"(2,1) block {lower:.1e}")


def test_criterion_5_block_inverse(lat8):
    rng = np.random.default_rng(5)
    rt = check_block_inverse(flat_background(lat8, 2), rng, n=20)
    lat4 = Lattice(4, ("x1", "x2"))
    bg = flat_background(lat4, 2, Fhat=synthetic_curvature(lat4, 2, rng))
    K, BZ, BW = assemble_dense(bg)
    dense = 0.0
    for _ in range(5):
        c = rng.standard_normal(K.shape[0])
        w = bg.zero().from_vector(BW @ c)
        z_dense = bg.zero().from_vector(BZ @ np.linalg.solve(K, c))
        dense = max(dense, (apply_block_inverse(bg, w) - z_dense).max_abs() / z_dense.max_abs())
    ok = rt <= TOL_BLOCK_ROUND_TRIP and dense <= TOL_DENSE
    assert report(5, ok, f"round trip {rt:.2e} (tol {TOL_BLOCK_ROUND_TRIP:.0e}), dense N=4 solve {dense:.2e} "
                         f"(tol {TOL_DENSE:.0e}, {K.shape[0]} unknowns)")


def test_criterion_6_base_point(lat8):
    bg = flat_background(lat8, 2)
    base = eval_F(SystemState(bg, 0.0, bg.zero())).w.max_abs()
    sa, mt, _ = check_membership(bg, np.random.default_rng(6), n=20)
    ok = base <= TOL_BASE and sa <= TOL_MEMBERSHIP and mt <= TOL_MEMBERSHIP
    assert report(6, ok, f"F(0,(0,0)) {base:.1e} (tol {TOL_BASE:.0e}); self-adjoint {sa:.1e}, mean trace {mt:.1e} "
                         f"(tol {TOL_MEMBERSHIP:.0e}, 20 states)")


def test_criterion_7_manufactured_continuation(lat8):
    bg = flat_background(lat8, 2)
    t0 = time.perf_counter()
    prob = make_manufactured(bg, 1e-2, np.random.default_rng(7), alpha_target=1e-2)
    cfg = ContinuationConfig(alpha_target=1e-2)
    path = continue_in_alpha(bg, cfg, prob)
    half = continue_in_alpha(bg, ContinuationConfig(alpha_target=1e-2, step=cfg.step / 2), prob)
    elapsed = time.perf_counter() - t0
    rec = path.records[-1].recovery_error
    newton = max(r.newton_iterations for r in path.records)
    checks = [quadratic_check(r.history, QUAD_RATIO_BOUND, QUAD_UPPER, cfg.newton_tol) for r in path.records]
    quad_ok = all(c[0] for c in checks)
    n_pairs, n_floor = sum(c[1] for c in checks), sum(c[2] for c in checks)
    # ratios above the round-off floor, including pairs that start above 1e-3
    ratios = [q for r in path.records for q in quadratic_ratios(r.history, upper=np.inf, lower=cfg.newton_tol)]
    diff = (path.final - half.final).max_abs()
    ok = (path.completed and half.completed and rec < TOL_RECOVERY and newton <= MAX_NEWTON
          and quad_ok and diff < TOL_STEP_HALVING and elapsed < RUNTIME_CONTINUATION)
    assert report(7, ok, f"recovery {rec:.2e} (tol {TOL_RECOVERY:.0e}), max Newton {newton} (limit {MAX_NEWTON}), "
                         f"quadratic check {quad_ok} on {n_pairs} pairs below {QUAD_UPPER:.0e} ({n_floor} at the "
                         f"{cfg.newton_tol:.0e} floor), all ratios r_k+1/r_k^2 <= {max(ratios):.1e}, "
                         f"step halving {diff:.2e} (tol {TOL_STEP_HALVING:.0e}), {elapsed:.1f}s")


def test_criterion_8_rescaling(lat8):
    bg = flat_background(lat8, 2, Omega=HolVolForm(1.5))
    rng = np.random.default_rng(8)
    worst, exact = 0.0, True
    for alpha in (0.25, 1e-2, 3.0):
        rep = rescale_solution(SystemState(bg, alpha, _random_z(bg, rng, 0.05)))
        worst = max(worst, rep["unit_residual_covariance_rel"])
        exact = exact and rep["class_factor"] == alpha ** -0.5 * bg.dil
    ok = worst <= TOL_RESCALE and exact
    assert report(8, ok, f"unit residual vs residual/alpha' {worst:.2e} (tol {TOL_RESCALE:.0e}), "
                         f"class factor exact: {exact}")


def test_criterion_9_coupled(lat8):
    bg = coupled_background(lat8, 2)
    base = eval_F_coupled(SystemState(bg, 0.5, bg.zero())).w.max_abs()
    rng = np.random.default_rng(9)
    rec = conj = 0.0
    for _ in range(20):
        h = random_positive_field(lat8, rng, 2, 1e-2)
        g = random_positive_field(lat8, rng, 2, 1e-2)
        sigma = gauge_to_unitary(h, g)
        rec = max(rec, gauge_reconstruction_defect(sigma, h, g))
        conj = max(conj, max(curvature_conjugation_defect(lat8, h, sigma).values()))
    ok = base <= TOL_BASE and rec < TOL_GAUGE and conj < TOL_GAUGE
    assert report(9, ok, f"coupled base point {base:.1e}; reconstruction {rec:.2e}, curvature conjugation "
                         f"{conj:.2e} (tol {TOL_GAUGE:.0e}, 20 pairs)")
