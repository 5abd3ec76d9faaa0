"""Hermitian metrics on the trivial rank-r bundle and their endomorphisms.

Matrix conventions: a bundle metric is the r x r array ``H[a, b] = H_{a bbar}``,
deformations are ``H = e^u Hhat`` as a matrix product, and the Ĥ-adjoint of an
endomorphism is ``u^{dagger Hhat} = Hhat u^dagger Hhat^-1``.  So ``u`` is
Ĥ-self-adjoint exactly when ``u @ Hhat`` is hermitian.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hermitian_geometry import (
    HermitianMetric,
    broadcast_matrix,
    chern_curvature_field,
    dagger,
    field_matmul,
    from_points,
    to_points,
)
from .spectral_forms import GRID_NDIM, FormField, Lattice


class GaugeError(ValueError):
    """An endomorphism violates the self-adjointness precondition."""


def _as_field(lattice: Lattice, m) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    return broadcast_matrix(lattice, m) if m.ndim == 2 else m


def _hsqrt(hhat: np.ndarray, power: float) -> np.ndarray:
    w, V = np.linalg.eigh(hhat)
    return (V * w**power) @ V.conj().T


def adjoint(u: np.ndarray, hhat=None) -> np.ndarray:
    """u^{dagger Hhat} = Hhat u^dagger Hhat^-1 (plain dagger when ``hhat`` is None)."""
    ud = dagger(u)
    if hhat is None:
        return ud
    return field_matmul(hhat, ud, np.linalg.inv(hhat))


def selfadjoint_defect(u: np.ndarray, hhat=None) -> float:
    scale = max(1.0, float(np.max(np.abs(u), initial=0.0)))
    return float(np.max(np.abs(u - adjoint(u, hhat)), initial=0.0)) / scale


def _whitened(u: np.ndarray, hhat) -> np.ndarray:
    """w = Hhat^{-1/2} u Hhat^{1/2}, hermitian iff u is Hhat-self-adjoint."""
    if hhat is None:
        return u
    return field_matmul(_hsqrt(hhat, -0.5), u, _hsqrt(hhat, 0.5))


def _unwhitened(w: np.ndarray, hhat) -> np.ndarray:
    if hhat is None:
        return w
    return field_matmul(_hsqrt(hhat, 0.5), w, _hsqrt(hhat, -0.5))


def exp_end(u: np.ndarray, hhat=None, s: float = 1.0, tol: float = 1e-9) -> np.ndarray:
    """e^{s u} for Hhat-self-adjoint ``u`` via a pointwise hermitian eigendecomposition."""
    if selfadjoint_defect(u, hhat) > tol:
        raise GaugeError(f"u is not self-adjoint w.r.t. Hhat (defect {selfadjoint_defect(u, hhat):.3e})")
    w = to_points(_whitened(u, hhat))
    w = 0.5 * (w + np.swapaxes(w, -1, -2).conj())
    lam, V = np.linalg.eigh(w)
    e = (V * np.exp(s * lam)[..., None, :]) @ np.swapaxes(V, -1, -2).conj()
    return _unwhitened(from_points(e), hhat)


@dataclass(frozen=True, eq=False)
class BundleMetric:
    """H = e^u Hhat on a trivial bundle; ``H`` has shape (r, r, *grid)."""

    lattice: Lattice
    H: np.ndarray
    hhat: np.ndarray

    @property
    def rank(self) -> int:
        return self.H.shape[0]

    def is_positive(self) -> bool:
        lam = np.linalg.eigvalsh(to_points(0.5 * (self.H + dagger(self.H))))
        return bool(lam.min() > 0)


def reference_metric(lattice: Lattice, rank: int, hhat=None) -> BundleMetric:
    hhat = np.eye(rank, dtype=complex) if hhat is None else np.asarray(hhat, dtype=complex)
    return BundleMetric(lattice, broadcast_matrix(lattice, hhat), hhat)


def exp_metric(lattice: Lattice, u: np.ndarray, hhat=None) -> BundleMetric:
    r = u.shape[0]
    hhat = np.eye(r, dtype=complex) if hhat is None else np.asarray(hhat, dtype=complex)
    H = field_matmul(exp_end(u, hhat), hhat)
    H = 0.5 * (H + dagger(H))
    return BundleMetric(lattice, H, hhat)


def bundle_curvature(metric: BundleMetric, trace_consistent: bool = False) -> FormField:
    """Chern curvature ``F = dbar((dH) H^-1)``, stored as an End-valued (1,1)-form.

    With ``trace_consistent`` the pointwise trace is replaced by the spectral
    ``-d_j d_kbar log det H`` (the correction is a hermitian multiple of the
    identity of aliasing size), so ``Tr F`` is exactly d-exact on the grid.
    """
    F = chern_curvature_field(metric.H, metric.lattice)
    if not trace_consistent:
        return F
    lat = metric.lattice
    r = metric.rank
    logdet = np.real(np.log(np.linalg.det(to_points(metric.H))))
    lh = lat.fft(logdet.astype(complex))
    sym = lat.symbols
    comps = F.comps.copy()
    eye = np.eye(r).reshape((r, r) + (1,) * GRID_NDIM)
    for j in range(3):
        for k in range(3):
            exact = -lat.ifft(lh * sym[0, j] * sym[1, k])
            tr = np.einsum("aa...->...", comps[j, k])
            comps[j, k] = comps[j, k] + eye * ((exact - tr) / r)
    return FormField(lat, 1, 1, comps)


def lambda_F(g, F: FormField) -> np.ndarray:
    """i Lambda_omega F = g^{j kbar} F_{j kbar}, an endomorphism field (r, r, *grid).

    ``g`` is a :class:`HermitianMetric`, a constant 3x3 matrix or a (3, 3, *grid) field.
    """
    if isinstance(g, HermitianMetric):
        ginv = g.inverse
    else:
        g = np.asarray(g, dtype=complex)
        ginv = np.linalg.inv(g) if g.ndim == 2 else from_points(np.linalg.inv(to_points(g)))
    if ginv.ndim == 2:
        return np.einsum("kj,jk...->...", ginv, F.comps)
    return np.einsum("kj...,jkab...->ab...", ginv, F.comps)


def conjugate_to_reference(u: np.ndarray, A: np.ndarray, hhat=None, check_tol: float | None = 1e-8) -> np.ndarray:
    """e^{-u/2} A e^{u/2}; self-adjoint w.r.t. Hhat when A is w.r.t. e^u Hhat."""
    r = u.shape[0]
    hhat_ = np.eye(r, dtype=complex) if hhat is None else hhat
    if check_tol is not None and A.ndim == u.ndim:
        H = field_matmul(exp_end(u, hhat_), hhat_)
        AH = field_matmul(A, H)
        scale = max(1.0, float(np.max(np.abs(AH))))
        if np.max(np.abs(AH - dagger(AH))) > check_tol * scale:
            raise GaugeError("A is not self-adjoint w.r.t. e^u Hhat")
    return conjugate_fibers(u, A, hhat_)


def conjugate_fibers(u: np.ndarray, A: np.ndarray, hhat=None) -> np.ndarray:
    """e^{-u/2} A e^{u/2} applied to the End fiber of any array (..., r, r, *grid) with leading form axes."""
    em = exp_end(u, hhat, -0.5)
    ep = exp_end(u, hhat, 0.5)
    lead = A.ndim - u.ndim
    if lead == 0:
        return field_matmul(em, A, ep)
    flat = A.reshape((-1,) + u.shape)
    out = np.stack([field_matmul(em, a, ep) for a in flat])
    return out.reshape(A.shape)


def project_H0(u: np.ndarray, lattice: Lattice, hhat=None, remove_constant: bool = True) -> np.ndarray:
    """Project onto the gauge-fixed deformation space.

    Keeps the Hhat-self-adjoint, traceless part and drops the modes every
    derivative annihilates (each active index 0 or Nyquist).  With
    ``remove_constant=False`` the constant mode is kept, the weaker gauge
    that only asks for ``Tr u = 0``.
    """
    r = u.shape[0]
    out = 0.5 * (u + adjoint(u, hhat))
    tr = np.einsum("aa...->...", out) / r
    out = out - np.eye(r).reshape((r, r) + (1,) * GRID_NDIM) * tr
    keep = ~lattice.kernel_mask
    if not remove_constant:
        keep = keep | lattice.zero_mask
    return lattice.ifft(lattice.fft(out) * keep)


def end_trace(A: np.ndarray) -> np.ndarray:
    return np.einsum("aa...->...", A)
