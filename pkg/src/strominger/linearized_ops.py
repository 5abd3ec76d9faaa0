"""Linearization of the system at the flat base point and its block inverse.

At the base point the reference metric ``ghat`` and the reference bundle
metrics are constant, so every block is a Fourier multiplier:

* ``L1 h = s(k) h * |Omega| * 8 det ghat`` with the scalar symbol
  ``s(k) = -ghat^{j kbar} sigma_j sigmabar_k >= 0``;
* ``L2 Theta = -s(k) Theta / (2 |Omega|)`` (the d-bar Laplacian of a flat
  Kähler metric is the scalar Laplacian on components);
* ``A Theta = Lambda(Theta) ^ omega ^ i Fhat`` (nonzero only with a synthetic
  ``Fhat`` test fixture).

Unknowns and residuals are carried as :class:`BlockVector`: one End-valued
field per bundle plus one (2,2)-form.  End-valued six-forms are stored as
their Euclidean densities, shape ``(r, r, *grid)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from math import comb

import numpy as np

from .bundle_geometry import project_H0
from .hermitian_geometry import HermitianMetric, HolVolForm, dilaton
from .spectral_forms import (
    FormField,
    Lattice,
    _gradients,
    contract_lambda,
    derivative_structure,
    form_gram,
    form_inner,
    hodge_laplacian_flat,
    i_del_dbar,
    integrate,
    lefschetz_adjoint,
    metric_form,
    raw_contraction,
    top_density,
    volume_density,
    wedge,
    del_adjoint,
    dbar,
)


class RangeError(ValueError):
    """Right-hand side has a component outside the range of the operator."""

    def __init__(self, message: str, defect: float):
        super().__init__(message)
        self.defect = defect


@dataclass(frozen=True, eq=False)
class BlockVector:
    """An element of Z (unknowns) or W (residuals)."""

    ends: tuple
    form: FormField

    def _map(self, other, op):
        if isinstance(other, BlockVector):
            return BlockVector(tuple(op(a, b) for a, b in zip(self.ends, other.ends)), op(self.form, other.form))
        return NotImplemented

    def __add__(self, other):
        return self._map(other, lambda a, b: a + b)

    def __sub__(self, other):
        return self._map(other, lambda a, b: a - b)

    def __mul__(self, c):
        return BlockVector(tuple(a * c for a in self.ends), self.form * c)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def zeros_like(self) -> "BlockVector":
        return self * 0.0

    def to_vector(self) -> np.ndarray:
        parts = [a.ravel() for a in self.ends] + [self.form.comps.ravel()]
        z = np.concatenate(parts)
        return np.concatenate([z.real, z.imag])

    def from_vector(self, v: np.ndarray) -> "BlockVector":
        n = v.size // 2
        z = v[:n] + 1j * v[n:]
        ends, pos = [], 0
        for a in self.ends:
            ends.append(z[pos:pos + a.size].reshape(a.shape))
            pos += a.size
        comps = z[pos:].reshape(self.form.comps.shape)
        return BlockVector(tuple(ends), FormField(self.form.lattice, 2, 2, comps))

    def max_abs(self) -> float:
        return max([float(np.max(np.abs(a), initial=0.0)) for a in self.ends] + [self.form.max_abs()])


@dataclass(frozen=True, eq=False)
class BundleSpec:
    """A trivial bundle with constant reference metric ``hhat``.

    ``Fhat`` is a synthetic curvature used only by unit tests of the A block;
    the honest flat reference has ``Fhat = None`` (zero).
    """

    rank: int = 2
    hhat: np.ndarray | None = None
    Fhat: FormField | None = None

    def __post_init__(self):
        if not 1 <= self.rank <= 4:
            raise ValueError(f"bundle rank must be in 1..4, got {self.rank}")
        h = np.eye(self.rank, dtype=complex) if self.hhat is None else np.asarray(self.hhat, dtype=complex)
        if h.shape != (self.rank, self.rank) or np.max(np.abs(h - h.conj().T)) > 1e-12:
            raise ValueError("hhat must be a constant hermitian rank x rank matrix")
        if np.linalg.eigvalsh(h).min() <= 0:
            raise ValueError("hhat must be positive definite")
        object.__setattr__(self, "hhat", h)


@dataclass(frozen=True, eq=False)
class Background:
    """Flat reference data (ghat, Omega) and one or more bundles."""

    lattice: Lattice
    ghat: np.ndarray = field(default_factory=lambda: np.eye(3, dtype=complex))
    bundles: tuple = (BundleSpec(),)
    Omega: HolVolForm = HolVolForm()
    remove_constant: bool = True

    def __post_init__(self):
        g = np.asarray(self.ghat, dtype=complex)
        if g.shape != (3, 3):
            raise ValueError("the reference metric must be a constant 3x3 matrix")
        if np.max(np.abs(g - g.conj().T)) > 1e-12 or np.linalg.eigvalsh(g).min() <= 0:
            raise ValueError("the reference metric must be hermitian positive")
        object.__setattr__(self, "ghat", g)
        object.__setattr__(self, "bundles", tuple(self.bundles))

    @property
    def rank(self) -> int:
        return self.bundles[-1].rank

    @cached_property
    def reference(self) -> HermitianMetric:
        return HermitianMetric.constant(self.lattice, self.ghat)

    @cached_property
    def dil(self) -> float:
        """|Omega|_ghat, a constant."""
        return float(np.sqrt(self.Omega.abs2 / np.real(np.linalg.det(self.ghat))))

    @cached_property
    def vol(self) -> float:
        """Euclidean density of ghat^3/3!."""
        return volume_density(self.ghat)

    @cached_property
    def weight(self) -> float:
        """Density of |Omega|_ghat ghat^3/3!, the L2 weight."""
        return self.dil * self.vol

    @cached_property
    def symbol(self) -> np.ndarray:
        ginv = np.linalg.inv(self.ghat)
        sym = self.lattice.symbols
        s = -sum(ginv[k, j] * sym[0, j] * sym[1, k] for j in range(3) for k in range(3))
        return np.real(s)

    @cached_property
    def psi_hat(self) -> FormField:
        w = metric_form(self.lattice, self.ghat)
        return wedge(w, w) * self.dil

    @cached_property
    def omega_hat(self) -> FormField:
        return metric_form(self.lattice, self.ghat)

    def zero(self) -> BlockVector:
        lat = self.lattice
        ends = tuple(np.zeros((b.rank, b.rank) + lat.shape, dtype=complex) for b in self.bundles)
        return BlockVector(ends, FormField.zeros(lat, 2, 2))

    # -- the i del dbar range, per Fourier mode --------------------------------------

    @cached_property
    def _ddbar_maps(self):
        lat = self.lattice
        Ed = derivative_structure(1, 2, False)
        Eb = derivative_structure(1, 1, True)
        sym = lat.symbols.reshape(2, 3, -1)
        M = np.zeros((sym.shape[-1], 9, 9), dtype=complex)
        for j in range(3):
            for l in range(3):
                M += (1j * sym[0, j] * sym[1, l])[:, None, None] * (Ed[j] @ Eb[l])[None]
        # whiten both sides so the SVD is orthogonal in the natural pairings
        Ct = np.linalg.cholesky(form_gram(self.ghat, 2, 2).conj()).conj().T
        Cb = np.linalg.cholesky(form_gram(self.ghat, 1, 1).conj()).conj().T
        Mw = Ct @ M @ np.linalg.inv(Cb)
        U, S, Vh = np.linalg.svd(Mw)
        keep = S > 1e-9 * max(S.max(), 1e-300)
        Ur = U * keep[:, None, :]
        Sinv = np.where(keep, 1.0 / np.where(keep, S, 1.0), 0.0)
        proj = np.linalg.inv(Ct) @ (Ur @ np.swapaxes(Ur, -1, -2).conj()) @ Ct
        pinv = np.linalg.inv(Cb) @ (np.swapaxes(Vh, -1, -2).conj() * Sinv[:, None, :]) @ np.swapaxes(U, -1, -2).conj() @ Ct
        return M, proj, pinv

    def _apply_mode_matrix(self, mats: np.ndarray, F: FormField, p: int, q: int) -> FormField:
        lat = self.lattice
        xh = lat.fft(F.comps).reshape(F.comps.shape[0] * F.comps.shape[1], -1)
        yh = np.einsum("nab,bn->an", mats, xh)
        return FormField(lat, p, q, lat.ifft(yh.reshape((comb(3, p), comb(3, q)) + lat.shape)))

    def project_theta(self, Theta: FormField) -> FormField:
        """Orthogonal projection of a (2,2)-form onto Im i del dbar (real part kept)."""
        P = self._ddbar_maps[1]
        out = self._apply_mode_matrix(P, Theta, 2, 2)
        return (out + out.conj()) * 0.5

    def theta_to_beta(self, Theta: FormField) -> FormField:
        """Minimum-norm real mean-free beta with i del dbar beta = P(Theta)."""
        out = self._apply_mode_matrix(self._ddbar_maps[2], Theta, 1, 1)
        return (out + out.conj()) * 0.5

    def project_end(self, h: np.ndarray, i: int = -1) -> np.ndarray:
        return project_H0(h, self.lattice, self.bundles[i].hhat, self.remove_constant)

    # -- projections onto Z and W ------------------------------------------------------

    def project_domain(self, z: BlockVector) -> BlockVector:
        ends = tuple(self.project_end(a, i) for i, a in enumerate(z.ends))
        return BlockVector(ends, self.project_theta(z.form))

    def project_range(self, w: BlockVector) -> BlockVector:
        ends = tuple(self.project_end(a / self.weight, i) * self.weight for i, a in enumerate(w.ends))
        return BlockVector(ends, self.project_theta(w.form))

    # -- norms -------------------------------------------------------------------------

    def end_inner(self, a: np.ndarray, b: np.ndarray, i: int = -1) -> complex:
        """Weighted L2 pairing Tr(a hhat b^dagger hhat^-1) |Omega| ghat^3/3!."""
        hh = self.bundles[i].hhat
        bd = np.einsum("ab,cb...,cd->ad...", hh, b.conj(), np.linalg.inv(hh))
        point = np.einsum("ab...,ba...->...", a, bd)
        return complex(integrate(point * self.weight, self.lattice))

    def form_inner(self, a: FormField, b: FormField) -> complex:
        return complex(form_inner(a, b, self.ghat, self.weight))

    def domain_norms(self, z: BlockVector) -> list:
        out = [np.sqrt(max(self.end_inner(a, a, i).real, 0.0)) for i, a in enumerate(z.ends)]
        return out + [np.sqrt(max(self.form_inner(z.form, z.form).real, 0.0))]

    def residual_norms(self, w: BlockVector) -> list:
        """L2 norms with End densities first divided by the weight."""
        ends = tuple(a / self.weight for a in w.ends)
        return self.domain_norms(BlockVector(ends, w.form))

    def residual_norm(self, w: BlockVector) -> float:
        return float(np.sqrt(sum(n * n for n in self.residual_norms(w))))


def flat_background(lattice: Lattice, rank: int = 2, ghat=None, Omega: HolVolForm | None = None,
                    hhat=None, Fhat: FormField | None = None, remove_constant: bool = True) -> Background:
    ghat = np.eye(3, dtype=complex) if ghat is None else ghat
    return Background(lattice, ghat, (BundleSpec(rank, hhat, Fhat),), Omega or HolVolForm(), remove_constant)


def coupled_background(lattice: Lattice, rank: int = 2, ghat=None, Omega: HolVolForm | None = None,
                       remove_constant: bool = True) -> Background:
    """Tangent bundle (reference ghat) followed by the gauge bundle (reference identity)."""
    ghat = np.eye(3, dtype=complex) if ghat is None else np.asarray(ghat, dtype=complex)
    return Background(lattice, ghat, (BundleSpec(3, ghat), BundleSpec(rank)), Omega or HolVolForm(), remove_constant)


def synthetic_curvature(lattice: Lattice, rank: int, rng: np.random.Generator, scale: float = 1.0) -> FormField:
    """Test fixture: constant End-valued (1,1)-form ``a_{j kbar} T`` with ``a`` and ``T`` hermitian, T traceless.

    It satisfies the symmetry of a curvature for the identity metric and is
    trivially closed, but is not the curvature of any metric on the testbed.
    """
    a = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    a = 0.5 * (a + a.conj().T)
    T = rng.standard_normal((rank, rank)) + 1j * rng.standard_normal((rank, rank))
    T = 0.5 * (T + T.conj().T)
    T = T - np.trace(T) / rank * np.eye(rank)
    c = scale * np.einsum("jk,ab->jkab", a, T)
    return FormField(lattice, 1, 1, np.broadcast_to(c.reshape(c.shape + (1,) * 6), c.shape + lattice.shape).copy())


# -- the blocks ------------------------------------------------------------------------

def apply_L1(bg: Background, h: np.ndarray, i: int = -1) -> np.ndarray:
    """L1 h = -ghat^{j kbar} d_kbar d_j h (x) |Omega| ghat^3/3!, as a density."""
    lat = bg.lattice
    return lat.ifft(lat.fft(h) * bg.symbol) * bg.weight


def apply_A(bg: Background, Theta: FormField, i: int = -1) -> np.ndarray:
    """Lambda(Theta) ^ omega ^ i Fhat, as a density; zero without a synthetic Fhat."""
    b = bg.bundles[i]
    lat = bg.lattice
    if b.Fhat is None:
        return np.zeros((b.rank, b.rank) + lat.shape, dtype=complex)
    lam = contract_lambda(bg.ghat, Theta)
    return top_density(wedge(wedge(lam, bg.omega_hat), b.Fhat * 1j))


def apply_A_gateaux(bg: Background, Theta: FormField, i: int = -1) -> np.ndarray:
    """The exact Theta-derivative of the first residual component at u = 0: Theta ^ i Fhat / 2."""
    b = bg.bundles[i]
    lat = bg.lattice
    if b.Fhat is None:
        return np.zeros((b.rank, b.rank) + lat.shape, dtype=complex)
    return top_density(wedge(Theta, b.Fhat * 1j)) * 0.5


def apply_L2(bg: Background, Theta: FormField) -> FormField:
    """-(1 / (2 |Omega|)) (del del^dagger + del^dagger del) Theta."""
    return hodge_laplacian_flat(Theta, bg.ghat) * (-0.5 / bg.dil)


def l2_symbol(bg: Background) -> np.ndarray:
    return -0.5 * bg.symbol / bg.dil


def apply_forward(bg: Background, z: BlockVector, gateaux: bool = False) -> BlockVector:
    """The block-triangular map [[L1, A], [0, L2]] (one L1 row per bundle)."""
    A = apply_A_gateaux if gateaux else apply_A
    ends = tuple(apply_L1(bg, u, i) + A(bg, z.form, i) for i, u in enumerate(z.ends))
    return BlockVector(ends, apply_L2(bg, z.form))


# -- solves ------------------------------------------------------------------------------

def _range_check(rhs_norm: float, defect_norm: float, tol: float, what: str):
    rel = defect_norm / rhs_norm if rhs_norm > 0 else 0.0
    if rel > tol:
        raise RangeError(f"{what}: right-hand side leaves the range (relative defect {rel:.3e})", rel)
    return rel


def solve_L1(bg: Background, rhs: np.ndarray, i: int = -1, strict: bool = True, tol: float = 1e-8) -> np.ndarray:
    """Gauge-fixed solution of L1 h = rhs by per-mode division."""
    lat = bg.lattice
    f = rhs / bg.weight
    pf = bg.project_end(f, i)
    if strict:
        _range_check(np.sqrt(abs(bg.end_inner(f, f, i))), np.sqrt(abs(bg.end_inner(f - pf, f - pf, i))), tol, "L1")
    s = bg.symbol
    inv = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return bg.project_end(lat.ifft(lat.fft(pf) * inv), i)


def solve_L2(bg: Background, rhs: FormField, strict: bool = True, tol: float = 1e-8) -> FormField:
    """Solution in Im i del dbar of L2 Theta = rhs by per-mode division."""
    lat = bg.lattice
    prhs = bg.project_theta(rhs)
    if strict:
        d = rhs - prhs
        _range_check(np.sqrt(abs(bg.form_inner(rhs, rhs))), np.sqrt(abs(bg.form_inner(d, d))), tol, "L2")
    s = l2_symbol(bg)
    inv = np.where(s < 0, 1.0 / np.where(s < 0, s, 1.0), 0.0)
    return FormField(lat, 2, 2, lat.ifft(lat.fft(prhs.comps) * inv))


def apply_block_inverse(bg: Background, w: BlockVector, strict: bool = True, tol: float = 1e-8) -> BlockVector:
    """[[L1^-1, -L1^-1 A L2^-1], [0, L2^-1]] applied to ``w``."""
    theta = solve_L2(bg, w.form, strict, tol)
    ends = tuple(solve_L1(bg, r - apply_A(bg, theta, i), i, strict, tol) for i, r in enumerate(w.ends))
    return BlockVector(ends, theta)


# -- variation formulas and oracles ---------------------------------------------------------

def variation_metric(metric: HermitianMetric, dTheta: FormField, Omega: HolVolForm = HolVolForm()) -> np.ndarray:
    """delta g_{j kbar} = -(1 / (2 |Omega|_omega)) g^{s rbar} dTheta_{s rbar j kbar}."""
    return raw_contraction(metric.g, dTheta) * (-0.5 / dilaton(metric, Omega))


def variation_ddbar_omega(bg: Background, dTheta: FormField) -> tuple:
    """Both routes for i del dbar of the first variation of omega at the flat base point.

    Returns ``(ddbar_route, laplacian_route)``: ``i del dbar[Lambda dTheta / (2|Omega|)]``
    and ``-Delta dTheta / (2|Omega|)``.
    """
    lam = contract_lambda(bg.ghat, dTheta) * (0.5 / bg.dil)
    return i_del_dbar(lam, check_real=False), apply_L2(bg, dTheta)


def kahler_identity_residual(eta: FormField, g: np.ndarray) -> float:
    """max |[Lambda, dbar] eta + i del^dagger eta| / max |eta|, flat constant metric."""
    p, q = eta.p, eta.q
    if p == 0:
        raise ValueError("del^dagger needs p >= 1")
    db = dbar(eta) if q < 3 else None
    term1 = lefschetz_adjoint(db, g) if db is not None else FormField.zeros(eta.lattice, p - 1, q, eta.fiber)
    term2 = dbar(lefschetz_adjoint(eta, g)) if q >= 1 else FormField.zeros(eta.lattice, p - 1, q, eta.fiber)
    lhs = term1 - term2 + del_adjoint(eta, g) * 1j
    return lhs.max_abs() / max(eta.max_abs(), 1e-300)


def bochner_sides(bg: Background, h: np.ndarray, i: int = -1) -> tuple:
    """(l2(L1 h, h), 1/2 int (|del h|^2 + |dbar h|^2) |Omega| ghat^3/3!) for Hhat = const."""
    lhs = bg.end_inner(apply_L1(bg, h, i) / bg.weight, h, i)
    lat = bg.lattice
    g10 = form_gram(bg.ghat, 1, 0)
    g01 = form_gram(bg.ghat, 0, 1)
    dh = _gradients(h, lat, bar=False)
    dbh = _gradients(h, lat, bar=True)
    total = 0.0
    for j in range(3):
        for k in range(3):
            total += g10[j, k] * bg.end_inner(dh[j], dh[k], i) + g01[j, k] * bg.end_inner(dbh[j], dbh[k], i)
    return lhs, 0.5 * total


def adjoint_check(bg: Background, op, a, b, inner) -> float:
    """Relative asymmetry |<op a, b> - <a, op b>| / (|op a| |b|)."""
    oa, ob = op(a), op(b)
    num = abs(inner(oa, b) - inner(a, ob))
    den = np.sqrt(abs(inner(oa, oa)) * abs(inner(b, b))) + 1e-300
    return float(num / den)


# -- dense assembly on small lattices ---------------------------------------------------------

def _orthonormal_basis(template: BlockVector, project, max_dim: int = 6000) -> np.ndarray:
    n = template.to_vector().size
    if n > max_dim:
        raise ValueError(f"dense assembly refused: {n} real unknowns (limit {max_dim})")
    cols = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        cols.append(project(template.from_vector(e)).to_vector())
    P = np.array(cols).T
    U, S, _ = np.linalg.svd(P, full_matrices=False)
    return U[:, S > 1e-8 * S.max()]


def assemble_dense(bg: Background, gateaux: bool = False) -> tuple:
    """Real matrix of the forward block map between orthonormal bases of Z and W.

    Returns ``(K, BZ, BW)`` with ``K = BW^T forward BZ``.
    """
    zero = bg.zero()
    BZ = _orthonormal_basis(zero, bg.project_domain)
    BW = _orthonormal_basis(zero, bg.project_range)
    cols = [apply_forward(bg, zero.from_vector(BZ[:, k]), gateaux).to_vector() for k in range(BZ.shape[1])]
    K = BW.T @ np.array(cols).T
    return K, BZ, BW


def a_block_report(bg: Background, Theta: FormField, i: int = -1) -> dict:
    """Compare the displayed A block with the exact Theta-derivative Theta ^ iFhat / 2."""
    a = apply_A(bg, Theta, i)
    b = apply_A_gateaux(bg, Theta, i)
    na = np.sqrt(abs(bg.end_inner(a, a, i)))
    nb = np.sqrt(abs(bg.end_inner(b, b, i)))
    nab = bg.end_inner(a, b, i)
    ratio = complex(nab / (nb * nb)) if nb > 0 else complex("nan")
    diff = np.sqrt(abs(bg.end_inner(a - b, a - b, i)))
    return {
        "displayed_norm": float(na),
        "gateaux_norm": float(nb),
        "best_fit_ratio": float(ratio.real),
        "relative_difference": float(diff / nb) if nb > 0 else 0.0,
    }
