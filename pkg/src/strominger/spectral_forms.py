"""Periodic lattice, Fourier differentiation and (p,q)-form algebra on the flat 3-torus.

Coordinates are ``z^j = x^j + i y^j`` (j = 1..3) and the six real grid axes
are ordered ``(x1, y1, x2, y2, x3, y3)``.  Every lattice field carries a
grid shape of six axes; an axis that is declared inactive has length 1, so
fields are constant along it and broadcasting does the rest.

A (p,q)-form is stored by its coefficients on the basis
``dz^I ^ dzbar^J`` with ``I``, ``J`` strictly increasing multi-indices,
which is the same as keeping fully antisymmetric tensors with a
``1/(p! q!)`` prefactor in the *separated* ordering
``dz^{i1}..dz^{ip} dzbar^{j1}..dzbar^{jq}``.  The interleaved four-index
tensor ``Psi_{s rbar j kbar}`` used for (2,2)-forms in the variation
formulas is produced only by :func:`to_paper_22` / :func:`from_paper_22`.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from functools import cached_property, lru_cache
from math import comb

import numpy as np

AXES = ("x1", "y1", "x2", "y2", "x3", "y3")
GRID_NDIM = 6
GRID_AXES = tuple(range(-GRID_NDIM, 0))

SUBSETS = {p: list(itertools.combinations(range(3), p)) for p in range(4)}
SUBSET_INDEX = {p: {s: i for i, s in enumerate(SUBSETS[p])} for p in range(4)}

# Euclidean density of dz^123 ^ dzbar^123.
TOP_DENSITY = -8j

_lambda_fault = 1.0


class FormError(ValueError):
    """Bidegree or reality violation."""


@contextlib.contextmanager
def lambda_fault(scale: float):
    """Corrupt the Lambda normalization by ``scale`` (fault-injection fixture)."""
    global _lambda_fault
    old = _lambda_fault
    _lambda_fault = float(scale)
    try:
        yield
    finally:
        _lambda_fault = old


@dataclass(frozen=True)
class Lattice:
    """Uniform periodic grid on the real 6-torus.

    Parameters
    ----------
    n
        Points per active axis (even, at least 4).
    active
        Names of the axes along which fields may vary.
    periods
        Lengths of the six periods, ordered as :data:`AXES`.
    """

    n: int = 8
    active: tuple = ("x1", "x2")
    periods: tuple = (2 * np.pi,) * 6

    def __post_init__(self):
        object.__setattr__(self, "active", tuple(self.active))
        object.__setattr__(self, "periods", tuple(float(p) for p in self.periods))
        if self.n < 4 or self.n % 2:
            raise ValueError(f"points per axis must be even and >= 4, got {self.n}")
        unknown = set(self.active) - set(AXES)
        if unknown:
            raise ValueError(f"unknown axes {sorted(unknown)}")
        if len(self.periods) != 6 or min(self.periods) <= 0:
            raise ValueError("need six positive periods")

    @cached_property
    def shape(self) -> tuple:
        return tuple(self.n if a in self.active else 1 for a in AXES)

    @property
    def npoints(self) -> int:
        return int(np.prod(self.shape))

    @property
    def volume(self) -> float:
        """Euclidean volume of the 6-torus."""
        return float(np.prod(self.periods))

    def coords(self) -> list:
        """Broadcastable coordinate arrays, one per real axis."""
        out = []
        for a, (m, L) in enumerate(zip(self.shape, self.periods)):
            shape = [1] * GRID_NDIM
            shape[a] = m
            out.append((np.arange(m) * L / m).reshape(shape))
        return out

    def mode_numbers(self) -> list:
        """Integer Fourier indices per axis, broadcastable; Nyquist is ``-n/2``."""
        out = []
        for a, m in enumerate(self.shape):
            shape = [1] * GRID_NDIM
            shape[a] = m
            out.append(np.rint(np.fft.fftfreq(m) * m).astype(int).reshape(shape))
        return out

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        """True on modes that sit on the Nyquist frequency of some active axis."""
        mask = np.zeros(self.shape, dtype=bool)
        for a, m in enumerate(self.mode_numbers()):
            if self.shape[a] > 1:
                mask = mask | (m == -self.n // 2)
        return mask

    @cached_property
    def zero_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        for m in self.mode_numbers():
            mask = mask & (m == 0)
        return mask

    @cached_property
    def kernel_mask(self) -> np.ndarray:
        """Modes on which every derivative symbol vanishes (each active index 0 or Nyquist)."""
        mask = np.ones(self.shape, dtype=bool)
        for a, m in enumerate(self.mode_numbers()):
            if self.shape[a] > 1:
                mask = mask & ((m == 0) | (m == -self.n // 2))
        return mask

    @cached_property
    def resolved_mask(self) -> np.ndarray:
        """Modes that carry unknowns: outside the derivative kernel."""
        return ~self.kernel_mask

    def band_mask(self, kmax: int) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        for m in self.mode_numbers():
            mask = mask & (np.abs(m) <= kmax)
        return mask & ~self.nyquist_mask

    @cached_property
    def wavenumbers(self) -> list:
        """Angular wavenumbers per axis with the Nyquist entry zeroed."""
        out = []
        for m, L, size in zip(self.mode_numbers(), self.periods, self.shape):
            k = 2 * np.pi * m / L
            if size > 1:
                k = np.where(m == -self.n // 2, 0.0, k)
            out.append(k.astype(float))
        return out

    @cached_property
    def symbols(self) -> np.ndarray:
        """Fourier symbols of d/dz^j and d/dzbar^j, shape ``(2, 3, *shape)``.

        d/dz = (d/dx - i d/dy)/2 and d/dzbar = (d/dx + i d/dy)/2 act on
        ``exp(i k.x)`` as ``(i kx + ky)/2`` and ``(i kx - ky)/2``.
        """
        k = self.wavenumbers
        sym = np.zeros((2, 3) + self.shape, dtype=complex)
        for j in range(3):
            kx, ky = k[2 * j], k[2 * j + 1]
            sym[0, j] = 0.5 * (1j * kx + ky)
            sym[1, j] = 0.5 * (1j * kx - ky)
        return sym

    def fft(self, f: np.ndarray) -> np.ndarray:
        return np.fft.fftn(f, axes=GRID_AXES)

    def ifft(self, f: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(f, axes=GRID_AXES)

    def check(self, f: np.ndarray):
        if f.shape[-GRID_NDIM:] != self.shape:
            raise ValueError(f"field grid shape {f.shape[-GRID_NDIM:]} does not match lattice {self.shape}")


def spectral_derivative(f: np.ndarray, lattice: Lattice, direction: int, bar: bool = False) -> np.ndarray:
    """d f / dz^direction (or d/dzbar) for a lattice field, ``direction`` in 1..3."""
    if direction not in (1, 2, 3):
        raise ValueError(f"complex direction must be 1, 2 or 3, got {direction}")
    lattice.check(f)
    sym = lattice.symbols[int(bar), direction - 1]
    return lattice.ifft(lattice.fft(f) * sym)


def _gradients(f: np.ndarray, lattice: Lattice, bar: bool) -> np.ndarray:
    """All three holomorphic (or antiholomorphic) derivatives, stacked first."""
    fh = lattice.fft(f)
    sym = lattice.symbols[int(bar)]
    sym = sym.reshape((3,) + (1,) * (f.ndim - GRID_NDIM) + lattice.shape)
    return lattice.ifft(fh[None] * sym)


def ncomp(p: int, q: int) -> int:
    return comb(3, p) * comb(3, q)


def _insert_sign(index: tuple, j: int):
    """Sign and sorted result of moving dz^j in front of dz^index into place."""
    if j in index:
        return 0, None
    pos = sum(1 for i in index if i < j)
    return (-1) ** pos, tuple(sorted(index + (j,)))


@lru_cache(maxsize=None)
def derivative_structure(p: int, q: int, bar: bool) -> np.ndarray:
    """Constant matrices E_j with d(Psi) = sum_j E_j (d_j Psi) on flattened components.

    Shape ``(3, n_out, n_in)``; the rows index the bidegree raised by one in
    the holomorphic (``bar=False``) or antiholomorphic slot.
    """
    if bar:
        out_shape = (comb(3, p), comb(3, q + 1))
    else:
        out_shape = (comb(3, p + 1), comb(3, q))
    E = np.zeros((3, out_shape[0] * out_shape[1], ncomp(p, q)))
    for a, I in enumerate(SUBSETS[p]):
        for b, J in enumerate(SUBSETS[q]):
            col = a * comb(3, q) + b
            for j in range(3):
                if bar:
                    s, K = _insert_sign(J, j)
                    if s == 0:
                        continue
                    row = a * out_shape[1] + SUBSET_INDEX[q + 1][K]
                    E[j, row, col] = s * (-1) ** p
                else:
                    s, K = _insert_sign(I, j)
                    if s == 0:
                        continue
                    row = SUBSET_INDEX[p + 1][K] * out_shape[1] + b
                    E[j, row, col] = s
    return E


@lru_cache(maxsize=None)
def _wedge_table(p1: int, q1: int, p2: int, q2: int):
    table = []
    sign0 = (-1) ** (q1 * p2)
    for (a, I), (b, J), (c, K), (d, L) in itertools.product(
        enumerate(SUBSETS[p1]), enumerate(SUBSETS[q1]), enumerate(SUBSETS[p2]), enumerate(SUBSETS[q2])
    ):
        if set(I) & set(K) or set(J) & set(L):
            continue
        sI = _perm_sign(I + K)
        sJ = _perm_sign(J + L)
        out = (SUBSET_INDEX[p1 + p2][tuple(sorted(I + K))], SUBSET_INDEX[q1 + q2][tuple(sorted(J + L))])
        table.append(((a, b), (c, d), out, sign0 * sI * sJ))
    return table


def _perm_sign(seq: tuple) -> int:
    seq = list(seq)
    sign = 1
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            if seq[i] > seq[j]:
                sign = -sign
    return sign


@dataclass(frozen=True, eq=False)
class FormField:
    """A (p,q)-form on the lattice, optionally endomorphism valued.

    ``comps`` has shape ``(C(3,p), C(3,q), *fiber, *lattice.shape)`` where
    ``fiber`` is ``()`` for scalar forms and ``(r, r)`` for End-valued ones.
    """

    lattice: Lattice
    p: int
    q: int
    comps: np.ndarray

    def __post_init__(self):
        if not (0 <= self.p <= 3 and 0 <= self.q <= 3):
            raise FormError(f"bidegree ({self.p},{self.q}) out of range")
        if self.comps.shape[:2] != (comb(3, self.p), comb(3, self.q)):
            raise FormError(f"component layout {self.comps.shape[:2]} does not match bidegree ({self.p},{self.q})")
        self.lattice.check(self.comps)

    @classmethod
    def zeros(cls, lattice: Lattice, p: int, q: int, fiber: tuple = ()) -> "FormField":
        return cls(lattice, p, q, np.zeros((comb(3, p), comb(3, q)) + tuple(fiber) + lattice.shape, dtype=complex))

    @property
    def fiber(self) -> tuple:
        return self.comps.shape[2:-GRID_NDIM]

    @property
    def degree(self) -> int:
        return self.p + self.q

    def _like(self, comps) -> "FormField":
        return FormField(self.lattice, self.p, self.q, comps)

    def _check_same(self, other: "FormField"):
        if (other.p, other.q) != (self.p, self.q) or other.lattice != self.lattice:
            raise FormError("forms of different bidegree or lattice")

    def __add__(self, other):
        self._check_same(other)
        return self._like(self.comps + other.comps)

    def __sub__(self, other):
        self._check_same(other)
        return self._like(self.comps - other.comps)

    def __neg__(self):
        return self._like(-self.comps)

    def __mul__(self, c):
        return self._like(self.comps * c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self._like(self.comps / c)

    def conj(self) -> "FormField":
        """Complex conjugate form, of bidegree (q,p); End fibers are conjugated entrywise."""
        comps = np.swapaxes(self.comps, 0, 1).conj() * (-1) ** (self.p * self.q)
        return FormField(self.lattice, self.q, self.p, comps)

    def reality_defect(self) -> float:
        if self.p != self.q:
            return np.inf
        return float(np.max(np.abs(self.conj().comps - self.comps), initial=0.0))

    def is_real(self, tol: float = 1e-10) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.comps), initial=0.0)))
        return self.reality_defect() <= tol * scale

    def trace(self) -> "FormField":
        if len(self.fiber) != 2:
            raise FormError("trace needs an End-valued form")
        return self._like(np.trace(self.comps, axis1=2, axis2=3))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.comps), initial=0.0))

    def shifted(self, shift: int, axis: str) -> "FormField":
        return self._like(np.roll(self.comps, shift, axis=AXES.index(axis) - GRID_NDIM))


def _flat(Psi: FormField) -> np.ndarray:
    return Psi.comps.reshape((-1,) + Psi.comps.shape[2:])


def del_(Psi: FormField) -> FormField:
    """Holomorphic exterior derivative (acts on components; End fibers are inert)."""
    if Psi.p + 1 > 3:
        raise FormError(f"del of a ({Psi.p},{Psi.q})-form overflows the bidegree")
    E = derivative_structure(Psi.p, Psi.q, False)
    grads = _gradients(_flat(Psi), Psi.lattice, bar=False)
    out = np.einsum("jab,jb...->a...", E, grads)
    return FormField(Psi.lattice, Psi.p + 1, Psi.q, out.reshape((comb(3, Psi.p + 1), comb(3, Psi.q)) + out.shape[1:]))


def dbar(Psi: FormField) -> FormField:
    """Antiholomorphic exterior derivative."""
    if Psi.q + 1 > 3:
        raise FormError(f"dbar of a ({Psi.p},{Psi.q})-form overflows the bidegree")
    E = derivative_structure(Psi.p, Psi.q, True)
    grads = _gradients(_flat(Psi), Psi.lattice, bar=True)
    out = np.einsum("jab,jb...->a...", E, grads)
    return FormField(Psi.lattice, Psi.p, Psi.q + 1, out.reshape((comb(3, Psi.p), comb(3, Psi.q + 1)) + out.shape[1:]))


def _fiber_product(a: np.ndarray, b: np.ndarray, fa: int, fb: int) -> np.ndarray:
    if fa == 2 and fb == 2:
        return np.einsum("ab...,bc...->ac...", a, b)
    if fa == 2:
        return a * b[None, None]
    if fb == 2:
        return a[None, None] * b
    return a * b


def wedge(Phi: FormField, Psi: FormField) -> FormField:
    """Wedge product; End-valued factors are multiplied as matrices (Phi first)."""
    p, q = Phi.p + Psi.p, Phi.q + Psi.q
    if p > 3 or q > 3:
        raise FormError(f"wedge of ({Phi.p},{Phi.q}) and ({Psi.p},{Psi.q}) overflows the bidegree")
    if Phi.lattice != Psi.lattice:
        raise FormError("wedge of forms on different lattices")
    fa, fb = len(Phi.fiber), len(Psi.fiber)
    fiber = Phi.fiber if fa else Psi.fiber
    out = FormField.zeros(Phi.lattice, p, q, fiber).comps
    for (a, b), (c, d), (e, f), s in _wedge_table(Phi.p, Phi.q, Psi.p, Psi.q):
        out[e, f] += s * _fiber_product(Phi.comps[a, b], Psi.comps[c, d], fa, fb)
    return FormField(Phi.lattice, p, q, out)


def constant_form(lattice: Lattice, p: int, q: int, coeffs) -> FormField:
    coeffs = np.asarray(coeffs, dtype=complex)
    comps = np.broadcast_to(coeffs.reshape(coeffs.shape + (1,) * GRID_NDIM), coeffs.shape + lattice.shape).copy()
    return FormField(lattice, p, q, comps)


def metric_form(lattice: Lattice, g: np.ndarray) -> FormField:
    """omega = i g_{j kbar} dz^j ^ dzbar^k for a (3,3[,grid]) hermitian array."""
    g = np.asarray(g, dtype=complex)
    if g.ndim == 2:
        return constant_form(lattice, 1, 1, 1j * g)
    return FormField(lattice, 1, 1, 1j * g)


# -- four-index codec for (2,2)-forms -------------------------------------------------

def to_paper_22(Psi: FormField) -> np.ndarray:
    """Interleaved tensor Q with Psi = 1/4 Q_{s rbar j kbar} dz^s dzbar^r dz^j dzbar^k.

    Returns shape ``(3, 3, 3, 3, *fiber, *grid)`` indexed ``[s, r, j, k]``.
    Moving dzbar^r past dz^j costs one sign, so Q = -P where P is the
    separated antisymmetric tensor.
    """
    if (Psi.p, Psi.q) != (2, 2):
        raise FormError("four-index codec is for (2,2)-forms")
    Q = np.zeros((3, 3, 3, 3) + Psi.comps.shape[2:], dtype=complex)
    for a, (s, j) in enumerate(SUBSETS[2]):
        for b, (r, k) in enumerate(SUBSETS[2]):
            v = -Psi.comps[a, b]
            Q[s, r, j, k] = v
            Q[j, r, s, k] = -v
            Q[s, k, j, r] = -v
            Q[j, k, s, r] = v
    return Q


def from_paper_22(lattice: Lattice, Q: np.ndarray) -> FormField:
    comps = np.zeros((3, 3) + Q.shape[4:], dtype=complex)
    for a, (s, j) in enumerate(SUBSETS[2]):
        for b, (r, k) in enumerate(SUBSETS[2]):
            comps[a, b] = -Q[s, r, j, k]
    return FormField(lattice, 2, 2, comps)


def _inverse_field(g: np.ndarray) -> np.ndarray:
    """Pointwise inverse of a (3,3,...) array."""
    if g.ndim == 2:
        return np.linalg.inv(g)
    m = np.moveaxis(g, (0, 1), (-2, -1))
    return np.moveaxis(np.linalg.inv(m), (-2, -1), (0, 1))


def raw_contraction(g: np.ndarray, Psi: FormField) -> np.ndarray:
    """g^{a bbar} Psi_{a bbar j kbar} as a (3,3[,grid]) array indexed [j, k].

    ``g`` is the matrix ``g_{j kbar}`` (constant or a field); the inverse
    entry ``g^{a bbar}`` is ``inv(g)[b, a]``.
    """
    ginv = _inverse_field(np.asarray(g, dtype=complex))
    Q = to_paper_22(Psi)
    if ginv.ndim == 2:
        return np.einsum("ba,abjk...->jk...", ginv, Q)
    return np.einsum("ba...,abjk...->jk...", ginv, Q)


def contract_lambda(g: np.ndarray, Psi: FormField) -> FormField:
    """The real (1,1)-form Lambda_omega Psi, normalized so Lambda(omega^2) = 4 omega.

    Componentwise this is ``-i g^{a bbar} Psi_{a bbar j kbar}``.
    """
    raw = raw_contraction(g, Psi)
    if raw.ndim == 2 + len(Psi.fiber):
        raw = np.broadcast_to(raw.reshape(raw.shape + (1,) * GRID_NDIM), raw.shape + Psi.lattice.shape)
    return FormField(Psi.lattice, 1, 1, -1j * _lambda_fault * raw)


# -- pointwise metrics on forms, integration ------------------------------------------

@lru_cache(maxsize=None)
def _gram_cached(gbytes: bytes, p: int, q: int) -> np.ndarray:
    G = np.frombuffer(gbytes, dtype=complex).reshape(3, 3)
    Ginv = np.linalg.inv(G)
    g10 = Ginv.T
    g01 = Ginv
    n = ncomp(p, q)
    out = np.zeros((n, n), dtype=complex)
    for a, I in enumerate(SUBSETS[p]):
        for b, J in enumerate(SUBSETS[q]):
            for c, K in enumerate(SUBSETS[p]):
                for d, L in enumerate(SUBSETS[q]):
                    hol = np.linalg.det(g10[np.ix_(I, K)]) if p else 1.0
                    anti = np.linalg.det(g01[np.ix_(J, L)]) if q else 1.0
                    out[a * comb(3, q) + b, c * comb(3, q) + d] = hol * anti
    return out


def form_gram(g: np.ndarray, p: int, q: int) -> np.ndarray:
    """Gram matrix ``<dz^I dzbar^J, dz^K dzbar^L>`` for a constant metric ``g_{j kbar}``.

    The pointwise pairing is ``<Phi, Psi> = sum Phi_a G[a, b] conj(Psi_b)``;
    with ``g`` the identity, ``|dz^j|^2 = 1``.
    """
    g = np.ascontiguousarray(np.asarray(g, dtype=complex))
    return _gram_cached(g.tobytes(), p, q)


def volume_density(g: np.ndarray) -> float:
    """Euclidean density of omega^3/3! for a constant metric: 8 det g."""
    return float(np.real(np.linalg.det(np.asarray(g, dtype=complex)))) * 8.0


def integrate(density: np.ndarray, lattice: Lattice):
    """Integral of a top-degree density (relative to dx1 dy1 .. dx3 dy3).

    The trapezoidal rule, exact for band-limited periodic fields. Leading
    (fiber) axes are kept.
    """
    lattice.check(density)
    return np.mean(density, axis=GRID_AXES) * lattice.volume


def top_density(T: FormField) -> np.ndarray:
    """Euclidean density of a (3,3)-form (fiber axes preserved)."""
    if (T.p, T.q) != (3, 3):
        raise FormError("top-degree density needs a (3,3)-form")
    return T.comps[0, 0] * TOP_DENSITY


def top_form(lattice: Lattice, density: np.ndarray) -> FormField:
    return FormField(lattice, 3, 3, (np.asarray(density, dtype=complex) / TOP_DENSITY)[None, None])


def l2_inner(a: np.ndarray, b: np.ndarray, weight, lattice: Lattice, hhat: np.ndarray | None = None):
    """Weighted L2 pairing of two lattice tensor fields.

    The pointwise pairing is the Frobenius product over the leading axes, or
    ``Tr(a hhat b^dagger hhat^-1)`` for endomorphisms when a reference
    bundle metric ``hhat`` is given. ``weight`` is a Euclidean density.
    """
    if a.shape != b.shape:
        raise ValueError("mismatched fields")
    lattice.check(a)
    if hhat is not None:
        hinv = np.linalg.inv(hhat)
        bd = np.einsum("ab,cb...,cd->ad...", hhat, b.conj(), hinv)
        point = np.einsum("ab...,ba...->...", a, bd)
    else:
        axes = tuple(range(a.ndim - GRID_NDIM))
        point = np.sum(a * b.conj(), axis=axes) if axes else a * b.conj()
    return integrate(point * weight, lattice)


def form_inner(Phi: FormField, Psi: FormField, g: np.ndarray, weight):
    """Weighted L2 pairing of two scalar forms with the metric induced by constant ``g``."""
    Phi._check_same(Psi)
    G = form_gram(g, Phi.p, Phi.q)
    point = np.einsum("a...,ab,b...->...", _flat(Phi), G, _flat(Psi).conj())
    return integrate(point * weight, Phi.lattice)


def form_pointwise_norm2(Psi: FormField, g: np.ndarray) -> np.ndarray:
    G = form_gram(g, Psi.p, Psi.q)
    return np.real(np.einsum("a...,ab,b...->...", _flat(Psi), G, _flat(Psi).conj()))


# -- flat-metric adjoints ---------------------------------------------------------------

def _check_constant(g) -> np.ndarray:
    g = np.asarray(g, dtype=complex)
    if g.shape != (3, 3):
        raise ValueError("flat-background operator needs a constant 3x3 metric")
    return g


def _apply_modes(M: np.ndarray, xh: np.ndarray) -> np.ndarray:
    return np.einsum("ab...,b...->a...", M, xh)


def del_adjoint(Psi: FormField, g: np.ndarray, bar: bool = False) -> FormField:
    """Exact L2 adjoint of del (or dbar) for a constant metric ``g``.

    The weight omega^3/3! is constant, so it cancels; per Fourier mode the
    adjoint of ``D = sum_j sigma_j E_j`` is ``conj(G_in)^-1 D^H conj(G_out)``.
    """
    g = _check_constant(g)
    p, q = (Psi.p, Psi.q - 1) if bar else (Psi.p - 1, Psi.q)
    if p < 0 or q < 0:
        raise FormError(f"adjoint lowers ({Psi.p},{Psi.q}) below zero")
    lat = Psi.lattice
    E = derivative_structure(p, q, bar)
    sym = lat.symbols[int(bar)]
    G_in = form_gram(g, p, q)
    G_out = form_gram(g, Psi.p, Psi.q)
    xh = lat.fft(_flat(Psi))
    y = _apply_modes(G_out.conj(), xh)
    # D^H y = sum_j conj(sigma_j) E_j^T y
    z = sum(np.conj(sym[j]) * _apply_modes(E[j].T, y) for j in range(3))
    z = _apply_modes(np.linalg.inv(G_in.conj()), z)
    out = lat.ifft(z)
    return FormField(lat, p, q, out.reshape((comb(3, p), comb(3, q)) + out.shape[1:]))


def hodge_laplacian_flat(Psi: FormField, g: np.ndarray) -> FormField:
    """Delta = del del^dagger + del^dagger del for the flat metric ``g``."""
    g = _check_constant(g)
    out = FormField.zeros(Psi.lattice, Psi.p, Psi.q, Psi.fiber)
    if Psi.p > 0:
        out = out + del_(del_adjoint(Psi, g))
    if Psi.p < 3:
        out = out + del_adjoint(del_(Psi), g)
    return out


def lefschetz_matrix(g: np.ndarray, p: int, q: int) -> np.ndarray:
    """Matrix of L = omega ^ . from (p,q) to (p+1,q+1) components, constant ``g``."""
    lat = Lattice(4, ())
    omega = metric_form(lat, _check_constant(g))
    n_in, n_out = ncomp(p, q), ncomp(p + 1, q + 1)
    L = np.zeros((n_out, n_in), dtype=complex)
    for col in range(n_in):
        e = FormField.zeros(lat, p, q)
        e.comps.reshape(n_in, -1)[col] = 1.0
        L[:, col] = wedge(omega, e).comps.reshape(n_out, -1)[:, 0]
    return L


def lefschetz_adjoint(Psi: FormField, g: np.ndarray) -> FormField:
    """Lambda as the pointwise adjoint of omega ^ . (any bidegree, constant ``g``)."""
    g = _check_constant(g)
    p, q = Psi.p - 1, Psi.q - 1
    if p < 0 or q < 0:
        raise FormError(f"Lambda of a ({Psi.p},{Psi.q})-form has no target bidegree")
    L = lefschetz_matrix(g, p, q)
    Lam = np.linalg.inv(form_gram(g, p, q).conj()) @ L.conj().T @ form_gram(g, Psi.p, Psi.q).conj()
    out = _apply_modes(Lam, _flat(Psi))
    return FormField(Psi.lattice, p, q, out.reshape((comb(3, p), comb(3, q)) + out.shape[1:]))


def lefschetz(Psi: FormField, g: np.ndarray) -> FormField:
    return wedge(metric_form(Psi.lattice, _check_constant(g)), Psi)


def i_del_dbar(beta: FormField, check_real: bool = True) -> FormField:
    """i del dbar beta for a real (1,1)-form; the result is real, closed and mean free."""
    if (beta.p, beta.q) != (1, 1):
        raise FormError("i del dbar acts on (1,1)-forms here")
    if check_real and not beta.is_real():
        raise FormError("beta must be a real (1,1)-form")
    return 1j * del_(dbar(beta))


# -- band-limited random fields -----------------------------------------------------------

def random_field(lattice: Lattice, rng: np.random.Generator, shape: tuple = (), kmax: int | None = None,
                 amplitude: float = 1.0, mean_free: bool = False) -> np.ndarray:
    """Complex random field with Fourier support ``|m| <= kmax`` on active axes.

    The default band ``n//4 - 1`` keeps products of two such fields free of
    aliasing and of Nyquist content.
    """
    if kmax is None:
        kmax = max(lattice.n // 4 - 1, 1)
    mask = lattice.band_mask(kmax)
    if mean_free:
        mask = mask & ~lattice.zero_mask
    coef = (rng.standard_normal(tuple(shape) + lattice.shape) + 1j * rng.standard_normal(tuple(shape) + lattice.shape))
    coef = coef * mask
    f = lattice.ifft(coef) * lattice.npoints
    scale = np.max(np.abs(f), initial=0.0)
    return f * (amplitude / scale) if scale > 0 else f


def random_form(lattice: Lattice, rng: np.random.Generator, p: int, q: int, real: bool = False, **kw) -> FormField:
    Psi = FormField(lattice, p, q, random_field(lattice, rng, (comb(3, p), comb(3, q)), **kw))
    if real:
        if p != q:
            raise FormError("only (p,p)-forms can be real")
        Psi = (Psi + Psi.conj()) * 0.5
    return Psi
