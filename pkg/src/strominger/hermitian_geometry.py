"""Hermitian metrics on the torus: dilaton, Chern curvature and the (2,2) square root.

The positive (2,2)-form ``Psi = |Omega|_omega omega^2`` is handled through
its *hatted* 3x3 matrix.  For the form stored on ``dz^I ^ dzbar^J`` the
entry ``Psi^{k jbar}`` is read off the basis element that omits ``dz^k`` and
``dzbar^j``::

    Psi^{k jbar} = (-1)^(k+j) * P[compl(k), compl(j)] / 2     (k, j = 0..2)

With that table ``omega^2`` maps to the cofactor matrix of ``g``
(``Psi^{k jbar} = det(g) g^{-1}[j, k]``), which is what makes the
square-root formula below return ``g`` itself.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .spectral_forms import (
    GRID_NDIM,
    SUBSET_INDEX,
    FormField,
    Lattice,
    _gradients,
    del_,
    dbar,
    metric_form,
    wedge,
)


class PositivityError(ValueError):
    """A metric or a (2,2)-form failed the pointwise positivity test."""

    def __init__(self, message: str, min_eigenvalue: float = np.nan, where=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
        self.where = where


def to_points(a: np.ndarray) -> np.ndarray:
    """(m, m, *grid) -> (*grid, m, m) for numpy.linalg."""
    return np.moveaxis(a, (0, 1), (-2, -1))


def from_points(a: np.ndarray) -> np.ndarray:
    return np.moveaxis(a, (-2, -1), (0, 1))


def field_inv(a: np.ndarray) -> np.ndarray:
    return from_points(np.linalg.inv(to_points(a)))


def field_matmul(*mats: np.ndarray) -> np.ndarray:
    out = mats[0]
    for m in mats[1:]:
        if m.ndim == 2 and out.ndim == 2:
            out = out @ m
        elif m.ndim == 2:
            out = np.einsum("ab...,bc->ac...", out, m)
        elif out.ndim == 2:
            out = np.einsum("ab,bc...->ac...", out, m)
        else:
            out = np.einsum("ab...,bc...->ac...", out, m)
    return out


def dagger(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, 0, 1).conj()


def broadcast_matrix(lattice: Lattice, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    return np.broadcast_to(m.reshape(m.shape + (1,) * GRID_NDIM), m.shape + lattice.shape).copy()


@dataclass(frozen=True)
class HolVolForm:
    """Omega = f dz^1 dz^2 dz^3 with constant coefficient ``f``."""

    f: complex = 1.0

    def __post_init__(self):
        if self.f == 0:
            raise ValueError("holomorphic volume form must be nowhere zero")

    @property
    def abs2(self) -> float:
        return float(abs(self.f) ** 2)


@dataclass(frozen=True, eq=False)
class HermitianMetric:
    """omega = i g_{j kbar} dz^j ^ dzbar^k, with ``g`` stored as a (3, 3, *grid) array."""

    lattice: Lattice
    g: np.ndarray

    def __post_init__(self):
        if self.g.shape[:2] != (3, 3):
            raise ValueError("metric components must be 3x3")
        self.lattice.check(self.g)

    @classmethod
    def constant(cls, lattice: Lattice, g0=None) -> "HermitianMetric":
        g0 = np.eye(3) if g0 is None else g0
        return cls(lattice, broadcast_matrix(lattice, g0))

    @cached_property
    def inverse(self) -> np.ndarray:
        return field_inv(self.g)

    @cached_property
    def det(self) -> np.ndarray:
        return np.real(np.linalg.det(to_points(self.g)))

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(to_points(0.5 * (self.g + dagger(self.g))))

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.g - dagger(self.g))))

    def check_positive(self, tol: float = 0.0):
        lam = self.eigenvalues.min(axis=-1)
        if lam.min() <= tol:
            idx = np.unravel_index(np.argmin(lam), lam.shape)
            raise PositivityError(f"metric not positive: min eigenvalue {lam.min():.3e} at {idx}", lam.min(), idx)

    def form(self) -> FormField:
        return metric_form(self.lattice, self.g)

    def is_constant(self) -> bool:
        return bool(np.allclose(self.g, self.g.reshape(3, 3, -1)[..., :1].reshape((3, 3) + (1,) * GRID_NDIM), rtol=0, atol=1e-14))

    def constant_value(self) -> np.ndarray:
        return self.g.reshape(3, 3, -1)[..., 0]

    def scaled(self, c: float) -> "HermitianMetric":
        return HermitianMetric(self.lattice, self.g * c)


def dilaton(metric: HermitianMetric, Omega: HolVolForm = HolVolForm()) -> np.ndarray:
    """|Omega|_omega = sqrt(|f|^2 / det g), a positive lattice function."""
    det = metric.det
    if np.min(det) <= 0:
        raise PositivityError(f"det g <= 0 (min {np.min(det):.3e})", float(np.min(det)))
    return np.sqrt(Omega.abs2 / det)


def chern_curvature_field(H: np.ndarray, lattice: Lattice) -> FormField:
    """Curvature of the Chern connection of a hermitian matrix field H.

    Returns the End-valued (1,1)-form with components
    ``F_{j kbar} = -d_kbar(d_j H H^-1)``, evaluated in the expanded form
    ``(-d_j d_kbar H + d_j H H^-1 d_kbar H) H^-1``; that arrangement keeps
    ``F_{j kbar} H`` and ``F_{k jbar} H`` exact hermitian conjugates on the grid.
    """
    lattice.check(H)
    Hinv = field_inv(H)
    dH = _gradients(H, lattice, bar=False)
    dbH = _gradients(H, lattice, bar=True)
    Hh = lattice.fft(H)
    sym = lattice.symbols
    r = H.shape[0]
    comps = np.zeros((3, 3, r, r) + lattice.shape, dtype=complex)
    for j in range(3):
        right = field_matmul(Hinv, dbH[0]), field_matmul(Hinv, dbH[1]), field_matmul(Hinv, dbH[2])
        for k in range(3):
            ddH = lattice.ifft(Hh * (sym[0, j] * sym[1, k]))
            comps[j, k] = field_matmul(-ddH + field_matmul(dH[j], right[k]), Hinv)
    return FormField(lattice, 1, 1, comps)


def chern_curvature(metric: HermitianMetric) -> FormField:
    """R = dbar((d g) g^-1) for the metric on T^{1,0}, fiber indices (a, b)."""
    return chern_curvature_field(metric.g, metric.lattice)


def chern_connection(H: np.ndarray, lattice: Lattice) -> np.ndarray:
    """A_j = (d_j H) H^-1, shape (3, r, r, *grid)."""
    dH = _gradients(H, lattice, bar=False)
    Hinv = field_inv(H)
    return np.stack([field_matmul(dH[j], Hinv) for j in range(3)])


# -- hatted codec and the square root --------------------------------------------------

def _complement(k: int) -> tuple:
    return tuple(i for i in range(3) if i != k)


def hatted_matrix(Psi: FormField) -> np.ndarray:
    """3x3 coefficient matrix Psi^{k jbar} of a (2,2)-form, shape (3, 3, *fiber, *grid)."""
    if (Psi.p, Psi.q) != (2, 2):
        raise ValueError("hatted codec is for (2,2)-forms")
    M = np.zeros((3, 3) + Psi.comps.shape[2:], dtype=complex)
    for k in range(3):
        for j in range(3):
            a = SUBSET_INDEX[2][_complement(k)]
            b = SUBSET_INDEX[2][_complement(j)]
            M[k, j] = (-1) ** (k + j) * 0.5 * Psi.comps[a, b]
    return M


def from_hatted(lattice: Lattice, M: np.ndarray) -> FormField:
    comps = np.zeros((3, 3) + M.shape[2:], dtype=complex)
    for k in range(3):
        for j in range(3):
            a = SUBSET_INDEX[2][_complement(k)]
            b = SUBSET_INDEX[2][_complement(j)]
            comps[a, b] = (-1) ** (k + j) * 2.0 * M[k, j]
    return FormField(lattice, 2, 2, comps)


def min_hatted_eigenvalue(Psi: FormField) -> float:
    M = hatted_matrix(Psi)
    return float(np.linalg.eigvalsh(to_points(0.5 * (M + dagger(M)))).min())


def balanced_form(metric: HermitianMetric, Omega: HolVolForm = HolVolForm()) -> FormField:
    """|Omega|_omega omega^2."""
    w = metric.form()
    return wedge(w, w) * dilaton(metric, Omega)


def sqrt_positive_22(Psi: FormField, Omega: HolVolForm = HolVolForm(), positivity_tol: float = 1e-12,
                     reality_tol: float = 1e-10) -> HermitianMetric:
    """The unique omega > 0 with |Omega|_omega omega^2 = Psi.

    ``g_{j kbar} = det(Psi^{p qbar}) / |f|^2 * (Psi^-1)_{j kbar}`` where
    ``(Psi^-1)_{l jbar}`` inverts ``Psi^{k jbar}`` in the sense
    ``Psi^{k jbar} (Psi^-1)_{l jbar} = delta^k_l``, i.e. it is the transpose
    of the matrix inverse.
    """
    M = hatted_matrix(Psi)
    scale = max(1.0, float(np.max(np.abs(M))))
    herm = float(np.max(np.abs(M - dagger(M))))
    if herm > reality_tol * scale:
        raise ValueError(f"(2,2)-form is not real: hermiticity defect {herm:.3e}")
    M = 0.5 * (M + dagger(M))
    Mp = to_points(M)
    lam = np.linalg.eigvalsh(Mp).min(axis=-1)
    if lam.min() <= positivity_tol:
        idx = np.unravel_index(np.argmin(lam), lam.shape)
        raise PositivityError(f"(2,2)-form not positive: min eigenvalue {lam.min():.3e} at {idx}", float(lam.min()), idx)
    det = np.real(np.linalg.det(Mp))
    g = from_points(np.swapaxes(np.linalg.inv(Mp), -1, -2)) * (det / Omega.abs2)
    g = 0.5 * (g + dagger(g))
    return HermitianMetric(Psi.lattice, g)


@dataclass(frozen=True, eq=False)
class BalancedAnsatz:
    """omega_Theta defined by |Omega|_{omega_Theta} omega_Theta^2 = |Omega|_hat omega_hat^2 + Theta."""

    reference: HermitianMetric
    theta: FormField
    psi: FormField
    metric: HermitianMetric
    Omega: HolVolForm

    @cached_property
    def dilaton(self) -> np.ndarray:
        return dilaton(self.metric, self.Omega)

    @cached_property
    def min_eigenvalue(self) -> float:
        return min_hatted_eigenvalue(self.psi)

    def balanced_defect(self) -> float:
        """max |d(|Omega| omega^2)| of the rebuilt (not the prescribed) form."""
        rebuilt = balanced_form(self.metric, self.Omega)
        return max(del_(rebuilt).max_abs(), dbar(rebuilt).max_abs())


def metric_from_theta(reference: HermitianMetric, theta: FormField, Omega: HolVolForm = HolVolForm(),
                      closed_tol: float = 1e-8, positivity_floor: float = 1e-12) -> BalancedAnsatz:
    """Solve the balanced ansatz for omega_Theta.

    Raises :class:`PositivityError` when ``|Omega| omega_hat^2 + Theta`` has
    left the positive cone, the signal that a continuation step was too big.
    """
    scale = max(1.0, theta.max_abs())
    defect = max(del_(theta).max_abs(), dbar(theta).max_abs())
    if defect > closed_tol * scale:
        raise ValueError(f"Theta is not closed: |d Theta| = {defect:.3e}")
    psi = balanced_form(reference, Omega) + theta
    metric = sqrt_positive_22(psi, Omega, positivity_tol=positivity_floor)
    return BalancedAnsatz(reference, theta, psi, metric, Omega)
