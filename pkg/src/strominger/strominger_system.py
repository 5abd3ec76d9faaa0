"""The nonlinear map of the deformed system and its diagnostics.

For unknowns ``(u, Theta)`` the map has two components::

    F1 = 1/2 (|Omega| omega_Theta^2) ^ e^{-u/2} i F_u e^{u/2}
    F2 = i del dbar omega_Theta - alpha' (Tr R_Theta ^ R_Theta - Tr F_u ^ F_u)

where ``|Omega| omega_Theta^2 = |Omega|_hat omega_hat^2 + Theta`` by
construction.  The factor 1/2 in ``F1`` is the omega^2/2! normalization under
which the u-derivative at the base point is exactly ``L1`` (see README).  The
coupled variant replaces ``R_Theta`` by the curvature of a deformed metric
``e^{u1} ghat`` on the tangent bundle and adds one ``F1``-type row for it.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .bundle_geometry import BundleMetric, bundle_curvature, conjugate_fibers, exp_metric
from .hermitian_geometry import (
    BalancedAnsatz,
    HermitianMetric,
    balanced_form,
    chern_curvature_field,
    dagger,
    field_inv,
    field_matmul,
    from_points,
    metric_from_theta,
    to_points,
)
from .linearized_ops import Background, BlockVector
from .spectral_forms import (
    FormField,
    Lattice,
    _gradients,
    dbar,
    del_,
    i_del_dbar,
    integrate,
    metric_form,
    top_density,
    wedge,
)


@dataclass(frozen=True, eq=False)
class SystemState:
    """Immutable snapshot ``(alpha', z)`` with ``z = (u_1, .., u_m, Theta)``.

    Geometry is cached per instance, so a new state is built whenever
    ``alpha'``, ``u`` or ``Theta`` changes.
    """

    background: Background
    alpha_prime: float
    z: BlockVector
    trace_consistent: bool = True

    def __post_init__(self):
        if self.alpha_prime < 0:
            raise ValueError("alpha' must be non-negative")
        if len(self.z.ends) != len(self.background.bundles):
            raise ValueError("one endomorphism per bundle is required")

    @property
    def theta(self) -> FormField:
        return self.z.form

    @property
    def coupled(self) -> bool:
        return len(self.background.bundles) > 1

    def with_alpha(self, alpha: float) -> "SystemState":
        return SystemState(self.background, alpha, self.z, self.trace_consistent)

    @cached_property
    def ansatz(self) -> BalancedAnsatz:
        bg = self.background
        return metric_from_theta(bg.reference, self.theta, bg.Omega)

    @cached_property
    def bundle_metrics(self) -> tuple:
        bg = self.background
        return tuple(exp_metric(bg.lattice, u, b.hhat) for u, b in zip(self.z.ends, bg.bundles))

    @cached_property
    def bundle_curvatures(self) -> tuple:
        return tuple(bundle_curvature(m, self.trace_consistent) for m in self.bundle_metrics)

    @cached_property
    def tangent_curvature(self) -> FormField:
        """Chern curvature of omega_Theta (the uncoupled anomaly term)."""
        g = self.ansatz.metric.g
        return bundle_curvature(BundleMetric(self.background.lattice, g, self.background.ghat), self.trace_consistent)


@dataclass(frozen=True, eq=False)
class Residual:
    """Value of the map: End-valued densities (one per bundle) and the anomaly (2,2)-form."""

    background: Background
    w: BlockVector

    @property
    def hym_components(self) -> tuple:
        return self.w.ends

    @property
    def anomaly_component(self) -> FormField:
        return self.w.form

    @cached_property
    def norms(self) -> dict:
        bg = self.background
        l2 = bg.residual_norms(self.w)
        out = {}
        for i, a in enumerate(self.w.ends):
            key = "hym" if i == len(self.w.ends) - 1 else f"hym{i + 1}"
            out[f"{key}_l2"] = float(l2[i])
            out[f"{key}_max"] = float(np.max(np.abs(a)) / bg.weight)
        out["anomaly_l2"] = float(l2[-1])
        out["anomaly_max"] = self.w.form.max_abs()
        out["total_l2"] = float(np.sqrt(sum(x * x for x in l2)))
        return out


def _component_one(state: SystemState, i: int) -> np.ndarray:
    u = state.z.ends[i]
    F = state.bundle_curvatures[i]
    iF = FormField(F.lattice, 1, 1, conjugate_fibers(u, 1j * F.comps, state.background.bundles[i].hhat))
    return top_density(wedge(state.ansatz.psi, iF)) * 0.5


def _trace_square(F: FormField) -> FormField:
    return wedge(F, F).trace()


def _anomaly(state: SystemState) -> FormField:
    omega = metric_form(state.background.lattice, state.ansatz.metric.g)
    out = i_del_dbar(omega, check_real=False)
    if state.alpha_prime != 0.0:
        R = state.bundle_curvatures[0] if state.coupled else state.tangent_curvature
        F = state.bundle_curvatures[-1]
        out = out - (_trace_square(R) - _trace_square(F)) * state.alpha_prime
    return out


def eval_F(state: SystemState) -> Residual:
    """Evaluate the map at ``state``; works for one bundle or the coupled tangent + gauge pair."""
    ends = tuple(_component_one(state, i) for i in range(len(state.z.ends)))
    return Residual(state.background, BlockVector(ends, _anomaly(state)))


def eval_F_coupled(state: SystemState) -> Residual:
    if not state.coupled:
        raise ValueError("coupled evaluation needs a tangent bundle and a gauge bundle")
    return eval_F(state)


def hym_membership(bg: Background, density: np.ndarray, i: int = -1) -> dict:
    """Hhat-self-adjointness defect and integrated trace of a first-component density."""
    hh = bg.bundles[i].hhat
    AH = np.einsum("ab...,bc->ac...", density, hh)
    scale = max(float(np.max(np.abs(density))), 1e-300)
    sa = float(np.max(np.abs(AH - dagger(AH)))) / scale
    tr = integrate(np.einsum("aa...->...", density), bg.lattice)
    return {"selfadjoint_defect": sa, "mean_trace": float(abs(tr)) / (scale * bg.lattice.volume)}


def anomaly_closedness(form: FormField) -> float:
    return max(del_(form).max_abs(), dbar(form).max_abs())


# -- ellipticity monitor --------------------------------------------------------------

def curvature_norm2(R: FormField, g: np.ndarray) -> np.ndarray:
    """Pointwise |R|_g^2 of an End(T)-valued (1,1)-form.

    Form part with the Gram matrices ``(g^-1)^T`` and ``g^-1`` of (1,0)- and
    (0,1)-covectors, fiber part with ``Tr(A g B^dagger g^-1)``.
    """
    ginv = field_inv(g)
    Rd = np.swapaxes(R.comps, 2, 3).conj()
    gR = np.einsum("ab...,lmcb...,cd...->lmad...", g, Rd, ginv)
    end = np.einsum("jkab...,lmba...->jklm...", R.comps, gR)
    return np.real(np.einsum("lj...,km...,jklm...->...", ginv, ginv, end))


def ellipticity_monitor(state: SystemState) -> float:
    """sup over the lattice of alpha' |R_Theta|_{g_Theta}."""
    if state.alpha_prime == 0.0:
        return 0.0
    R = state.bundle_curvatures[0] if state.coupled else state.tangent_curvature
    g = state.ansatz.metric.g
    return float(state.alpha_prime * np.sqrt(max(float(np.max(curvature_norm2(R, g))), 0.0)))


# -- gauge transformation to a g-unitary frame -----------------------------------------

def _point_sqrt(a: np.ndarray, power: float) -> np.ndarray:
    lam, V = np.linalg.eigh(0.5 * (a + np.swapaxes(a, -1, -2).conj()))
    return (V * lam[..., None, :] ** power) @ np.swapaxes(V, -1, -2).conj()


def gauge_to_unitary(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """sigma with ``g = conj(sigma)^dagger h conj(sigma)``.

    ``conj(sigma) = h^{-1/2} (h^{1/2} g h^{1/2})^{1/2} h^{-1/2}``, the unique
    positive choice; equal metrics give the identity.
    """
    hp = to_points(h)
    gp = to_points(g)
    hs = _point_sqrt(hp, 0.5)
    his = _point_sqrt(hp, -0.5)
    tau = his @ _point_sqrt(hs @ gp @ hs, 0.5) @ his
    return from_points(tau.conj())


def gauge_reconstruction_defect(sigma: np.ndarray, h: np.ndarray, g: np.ndarray) -> float:
    sb = sigma.conj()
    return float(np.max(np.abs(field_matmul(dagger(sb), h, sb) - g)))


def _transpose_fiber(a: np.ndarray, lead: int) -> np.ndarray:
    return np.swapaxes(a, lead, lead + 1)


def transported_connection(lattice: Lattice, h: np.ndarray, sigma: np.ndarray) -> tuple:
    """(1,0) and (0,1) parts of ``sigma^-1 d sigma + sigma^-1 theta sigma``.

    ``theta = (del h h^-1)^T`` is the Chern connection of ``h`` acting on
    column vectors of components.  Returned as End-valued FormFields.
    """
    hinv = field_inv(h)
    sinv = field_inv(sigma)
    dh = _gradients(h, lattice, bar=False)
    ds = _gradients(sigma, lattice, bar=False)
    dbs = _gradients(sigma, lattice, bar=True)
    r = h.shape[0]
    c10 = np.zeros((3, 1, r, r) + lattice.shape, dtype=complex)
    c01 = np.zeros((1, 3, r, r) + lattice.shape, dtype=complex)
    for j in range(3):
        theta = _transpose_fiber(field_matmul(dh[j], hinv), 0)
        c10[j, 0] = field_matmul(sinv, ds[j]) + field_matmul(sinv, theta, sigma)
        c01[0, j] = field_matmul(sinv, dbs[j])
    return FormField(lattice, 1, 0, c10), FormField(lattice, 0, 1, c01)


def connection_curvature(G10: FormField, G01: FormField) -> tuple:
    """(2,0), (1,1) and (0,2) parts of dGamma + Gamma ^ Gamma."""
    r20 = del_(G10) + wedge(G10, G10)
    r11 = dbar(G10) + del_(G01) + wedge(G10, G01) + wedge(G01, G10)
    r02 = dbar(G01) + wedge(G01, G01)
    return r20, r11, r02


def unitarity_defect(lattice: Lattice, g: np.ndarray, G10: FormField, G01: FormField) -> float:
    """max |d_j g - Gamma_j^T g - g conj(Gamma_jbar)| (the (1,0) part of metric compatibility)."""
    dg = _gradients(g, lattice, bar=False)
    err = 0.0
    for j in range(3):
        a = G10.comps[j, 0]
        b = G01.comps[0, j]
        rhs = field_matmul(_transpose_fiber(a, 0), g) + field_matmul(g, b.conj())
        err = max(err, float(np.max(np.abs(dg[j] - rhs))))
    return err


def curvature_conjugation_defect(lattice: Lattice, h: np.ndarray, sigma: np.ndarray) -> dict:
    """Compare the curvature of the transported connection with ``sigma^-1 R^T sigma``."""
    G10, G01 = transported_connection(lattice, h, sigma)
    r20, r11, r02 = connection_curvature(G10, G01)
    F = chern_curvature_field(h, lattice)
    sinv = field_inv(sigma)
    expected = np.zeros_like(r11.comps)
    for j in range(3):
        for k in range(3):
            expected[j, k] = field_matmul(sinv, _transpose_fiber(F.comps[j, k], 0), sigma)
    return {
        "r11": float(np.max(np.abs(r11.comps - expected))),
        "r20": r20.max_abs(),
        "r02": r02.max_abs(),
    }


# -- rescaling ------------------------------------------------------------------------

def rescale_solution(state: SystemState, mode: str = "alpha_to_class") -> dict:
    """Relate a solution at ``alpha'`` to one at unit ``alpha'``.

    ``alpha_to_class``: omega_tilde = omega_Theta / alpha' solves the unit
    equation in the class ``alpha'^{-1/2} |Omega|_hat [omega_hat^2]``.
    ``class_to_alpha``: the inverse reading, from a class factor ``M`` to
    ``alpha' = (|Omega|_hat / M)^2``.
    """
    a = state.alpha_prime
    if a <= 0:
        raise ValueError("rescaling needs alpha' > 0")
    bg = state.background
    lat = bg.lattice
    g = state.ansatz.metric.g
    gt = g / a
    base = eval_F(state).anomaly_component
    omega_t = metric_form(lat, gt)
    Rt = bundle_curvature(BundleMetric(lat, gt, bg.ghat / a), state.trace_consistent)
    if state.coupled:
        Rt = state.bundle_curvatures[0]
    F = state.bundle_curvatures[-1]
    unit = i_del_dbar(omega_t, check_real=False) - (_trace_square(Rt) - _trace_square(F))
    cov = float(np.max(np.abs(unit.comps - base.comps / a)))
    scale = max(float(np.max(np.abs(base.comps / a))), 1e-300)
    factor = a ** -0.5 * bg.dil
    # numerical class factor from the constant Fourier mode of |Omega| omega_tilde^2
    metric_t = HermitianMetric(lat, gt)
    psi_t = balanced_form(metric_t, bg.Omega)
    ref = bg.psi_hat / bg.dil
    mean_t = psi_t.comps.reshape(9, -1).mean(axis=1)
    mean_r = ref.comps.reshape(9, -1).mean(axis=1)
    numeric = float(np.real(np.vdot(mean_r, mean_t) / np.vdot(mean_r, mean_r)))
    report = {
        "mode": mode,
        "alpha_prime": a,
        "class_factor": factor,
        "class_factor_numeric": numeric,
        "unit_residual_covariance_abs": cov,
        "unit_residual_covariance_rel": cov / scale if scale > 1e-300 else cov,
    }
    if mode == "class_to_alpha":
        report["alpha_from_class"] = class_to_alpha(factor, bg.dil)
    elif mode != "alpha_to_class":
        raise ValueError(f"unknown rescaling mode {mode!r}")
    return report


def class_to_alpha(class_factor: float, dil_hat: float = 1.0) -> float:
    if class_factor <= 0:
        raise ValueError("class factor must be positive")
    return float((dil_hat / class_factor) ** 2)
