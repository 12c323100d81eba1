"""Fractional Sobolev inner products on the reference square and its edges.

Each inner product is realized as a diagonal form in a mode basis that
separates the Laplace problem on the cube K x (0,1) (or on K for edges):

=============  ======  ==================================  ===============================
kind           modes   extension problem                   weight
=============  ======  ==================================  ===============================
tildeH12_K     sine    Dirichlet data on K, 0 elsewhere    lam * coth(lam)
Hm12_K         sine    Neumann data on K, 0 Dirichlet      tanh(lam) / lam
                       on the sides and the top
tildeHm12_K    cosine  Neumann data on K, 0 Neumann on     tanh(lam) / lam, w_00 = 1
                       the sides, 0 Dirichlet on the top
tildeH12_edge  sine    Dirichlet data on one edge, 0 on    m pi * coth(m pi)
                       the other three edges of K
=============  ======  ==================================  ===============================

with lam = pi * sqrt(m^2 + n^2).  ``fd_oracle`` solves the same extension
problems with a finite-difference scheme so the weights can be checked
independently.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .refelem import EdgePolynomial, TensorPolynomial, gauss_legendre, legendre_vandermonde

log = logging.getLogger(__name__)

DEFAULT_TRUNCATION = 64
KINDS_K = ("tildeH12_K", "Hm12_K", "tildeHm12_K")
KINDS = KINDS_K + ("tildeH12_edge",)
MODE_KIND = {"tildeH12_K": "sine", "Hm12_K": "sine", "tildeHm12_K": "cosine", "tildeH12_edge": "sine"}


class ResolutionError(ValueError):
    """Quadrature too coarse to resolve the requested modes."""


class KindMismatchError(ValueError):
    """Spectra of the wrong mode kind were passed to an inner product."""


class OracleFailure(RuntimeError):
    """The finite-difference linear solve did not converge."""


# ---------------------------------------------------------------------------
# mode functions
# ---------------------------------------------------------------------------


def mode_indices(kind: str, truncation: int) -> np.ndarray:
    if kind == "sine":
        return np.arange(1, truncation + 1)
    if kind == "cosine":
        return np.arange(0, truncation + 1)
    raise ValueError(f"unknown mode kind {kind!r}")


def mode_values(kind: str, truncation: int, x) -> np.ndarray:
    """L2(0,1)-orthonormal 1D modes at x; shape (n_modes,) + x.shape."""
    x = np.asarray(x, dtype=float)
    m = mode_indices(kind, truncation).reshape((-1,) + (1,) * x.ndim)
    if kind == "sine":
        return np.sqrt(2.0) * np.sin(m * np.pi * x)
    out = np.sqrt(2.0) * np.cos(m * np.pi * x)
    out[0] = 1.0
    return out


def default_points(truncation: int, degree: int = 0) -> int:
    return 2 * truncation + 8 + degree // 2 + 1


@lru_cache(maxsize=64)
def _legendre_transform(kind: str, truncation: int, degree: int) -> np.ndarray:
    """T[m, i] = int_0^1 mode_m(x) L_i(x) dx."""
    rule = gauss_legendre(default_points(truncation, degree))
    modes = mode_values(kind, truncation, rule.points) * rule.weights
    t = modes @ legendre_vandermonde(rule.points, degree)
    t.setflags(write=False)
    return t


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModeSpectrum:
    """Coefficients of a scalar field on K in tensor sine or cosine modes."""

    kind: str
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float)
        if self.kind not in ("sine", "cosine"):
            raise ValueError(f"unknown mode kind {self.kind!r}")
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("mode coefficients must be a square array")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @property
    def truncation(self) -> int:
        n = self.coefficients.shape[0]
        return n if self.kind == "sine" else n - 1

    def l2_norm_squared(self) -> float:
        return float(np.sum(self.coefficients**2))

    def truncate(self, truncation: int) -> "ModeSpectrum":
        n = truncation if self.kind == "sine" else truncation + 1
        if n > self.coefficients.shape[0]:
            raise ValueError("cannot extend a spectrum by truncation")
        return ModeSpectrum(self.kind, self.coefficients[:n, :n])


@dataclass(frozen=True, eq=False)
class EdgeModeSpectrum:
    """Coefficients in the orthonormal edge modes sqrt(2) sin(m pi sigma)."""

    edge: int
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.array(self.coefficients, dtype=float))
        if c.ndim != 1:
            raise ValueError("edge mode coefficients must be one-dimensional")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @property
    def truncation(self) -> int:
        return len(self.coefficients)

    def l2_norm_squared(self) -> float:
        return float(np.sum(self.coefficients**2))


@dataclass(frozen=True, eq=False)
class FracWeightTable:
    kind: str
    weights: np.ndarray

    @property
    def truncation(self) -> int:
        n = self.weights.shape[0]
        return n - 1 if MODE_KIND[self.kind] == "cosine" else n


@lru_cache(maxsize=32)
def weight_table(kind: str, truncation: int = DEFAULT_TRUNCATION) -> FracWeightTable:
    """Diagonal mode weights of the given inner-product kind."""
    if kind not in KINDS:
        raise ValueError(f"unknown inner-product kind {kind!r}")
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    m = mode_indices(MODE_KIND[kind], truncation).astype(float)
    if kind == "tildeH12_edge":
        lam = np.pi * m
        w = lam / np.tanh(lam)
    else:
        lam = np.pi * np.sqrt(m[:, None] ** 2 + m[None, :] ** 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            if kind == "tildeH12_K":
                w = lam / np.tanh(lam)
            else:
                w = np.tanh(lam) / lam
        if kind == "tildeHm12_K":
            w[0, 0] = 1.0
    w.setflags(write=False)
    return FracWeightTable(kind, w)


def expand(f, kind: str, truncation: int = DEFAULT_TRUNCATION, points: int | None = None) -> ModeSpectrum:
    """Tensor mode coefficients of a scalar field on K.

    ``f`` is a :class:`TensorPolynomial` (transformed exactly through a
    precomputed Legendre-to-mode table) or a callable ``f(xi1, xi2)``
    evaluated on a tensor Gauss grid.
    """
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    if isinstance(f, TensorPolynomial):
        c = f.coefficients
        t1 = _legendre_transform(kind, truncation, c.shape[0] - 1)
        t2 = _legendre_transform(kind, truncation, c.shape[1] - 1)
        return ModeSpectrum(kind, t1 @ c @ t2.T)
    n = default_points(truncation) if points is None else int(points)
    if n < 2 * truncation:
        raise ResolutionError(f"{n} quadrature points cannot resolve {truncation} modes")
    rule = gauss_legendre(n)
    x1, x2 = np.meshgrid(rule.points, rule.points, indexing="ij")
    vals = np.asarray(f(x1, x2), dtype=float) * np.outer(rule.weights, rule.weights)
    modes = mode_values(kind, truncation, rule.points)
    return ModeSpectrum(kind, modes @ vals @ modes.T)


def expand_edge(g, edge: int, truncation: int = DEFAULT_TRUNCATION, points: int | None = None) -> EdgeModeSpectrum:
    """Sine coefficients of an edge function (EdgePolynomial or callable of sigma)."""
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    if isinstance(g, EdgePolynomial):
        t = _legendre_transform("sine", truncation, g.degree)
        return EdgeModeSpectrum(edge, t @ g.coefficients)
    n = default_points(truncation) if points is None else int(points)
    if n < 2 * truncation:
        raise ResolutionError(f"{n} quadrature points cannot resolve {truncation} modes")
    rule = gauss_legendre(n)
    vals = np.asarray(g(rule.points), dtype=float) * rule.weights
    return EdgeModeSpectrum(edge, mode_values("sine", truncation, rule.points) @ vals)


def synthesize(spectrum: ModeSpectrum) -> Callable:
    """Evaluator of the truncated mode series."""

    def f(x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        a = mode_values(spectrum.kind, spectrum.truncation, x1)
        b = mode_values(spectrum.kind, spectrum.truncation, x2)
        return np.einsum("mn,m...,n...->...", spectrum.coefficients, a, b)

    return f


# ---------------------------------------------------------------------------
# inner products
# ---------------------------------------------------------------------------


def _diag_form(u: ModeSpectrum, v: ModeSpectrum, kind: str) -> float:
    expected = MODE_KIND[kind]
    if not isinstance(u, ModeSpectrum) or not isinstance(v, ModeSpectrum):
        raise KindMismatchError(f"{kind} expects ModeSpectrum arguments")
    if u.kind != expected or v.kind != expected:
        raise KindMismatchError(f"{kind} needs {expected} spectra, got {u.kind}/{v.kind}")
    if u.truncation != v.truncation:
        raise ValueError("spectra must share the truncation")
    w = weight_table(kind, u.truncation).weights
    return float(np.sum(u.coefficients * v.coefficients * w))


def ip_tildeH12_K(u: ModeSpectrum, v: ModeSpectrum) -> float:
    return _diag_form(u, v, "tildeH12_K")


def ip_Hm12_K(u: ModeSpectrum, v: ModeSpectrum) -> float:
    return _diag_form(u, v, "Hm12_K")


def ip_tildeHm12_K(u: ModeSpectrum, v: ModeSpectrum) -> float:
    return _diag_form(u, v, "tildeHm12_K")


def ip_tildeH12_edge(u: EdgeModeSpectrum, v: EdgeModeSpectrum) -> float:
    if not isinstance(u, EdgeModeSpectrum) or not isinstance(v, EdgeModeSpectrum):
        raise KindMismatchError("tildeH12_edge expects EdgeModeSpectrum arguments")
    if u.truncation != v.truncation:
        raise ValueError("spectra must share the truncation")
    w = weight_table("tildeH12_edge", u.truncation).weights
    return float(np.sum(u.coefficients * v.coefficients * w))


INNER_PRODUCTS = {
    "tildeH12_K": ip_tildeH12_K,
    "Hm12_K": ip_Hm12_K,
    "tildeHm12_K": ip_tildeHm12_K,
    "tildeH12_edge": ip_tildeH12_edge,
}


def inner_product(kind: str, u, v, truncation: int = DEFAULT_TRUNCATION) -> float:
    """Expand ``u`` and ``v`` and evaluate the inner product of the given kind."""
    if kind == "tildeH12_edge":
        su, sv = expand_edge(u, 1, truncation), expand_edge(v, 1, truncation)
    else:
        su, sv = expand(u, MODE_KIND[kind], truncation), expand(v, MODE_KIND[kind], truncation)
    return INNER_PRODUCTS[kind](su, sv)


def polynomial_gram(kind: str, p: int, truncation: int = DEFAULT_TRUNCATION) -> np.ndarray:
    """Gram matrix of the tensor Legendre basis of P_p(K) in a K-kind inner product.

    Rows and columns follow the flattened (p+1) x (p+1) coefficient layout.
    """
    t = _legendre_transform(MODE_KIND[kind], truncation, p)
    w = weight_table(kind, truncation).weights
    # G[(i,j),(k,l)] = sum_mn T[m,i] T[n,j] w[m,n] T[m,k] T[n,l]
    g = np.einsum("mi,nj,mn,mk,nl->ijkl", t, t, w, t, t, optimize=True)
    n = (p + 1) ** 2
    return g.reshape(n, n)


def edge_polynomial_gram(p: int, truncation: int = DEFAULT_TRUNCATION) -> np.ndarray:
    """Gram matrix of L_0..L_p on an edge in the tildeH12 edge inner product."""
    t = _legendre_transform("sine", truncation, p)
    w = weight_table("tildeH12_edge", truncation).weights
    return (t.T * w) @ t


def scaled_square_norm_Hm12(f: Callable, h: float, truncation: int = DEFAULT_TRUNCATION) -> float:
    """H^{-1/2} norm of f on the square (0,h)^2, same extension problem on (0,h)^3.

    Mode functions on the scaled square carry eigenvalues lam/h, so the
    weight becomes h * tanh(lam)/lam against coefficients taken in the
    L2((0,h)^2)-orthonormal basis.
    """
    g = lambda x1, x2: f(h * np.asarray(x1), h * np.asarray(x2))
    s = expand(g, "sine", truncation)
    # L2((0,h)^2)-normalized coefficients are h times the reference ones
    w = weight_table("Hm12_K", truncation).weights
    return float(np.sqrt(np.sum((h * s.coefficients) ** 2 * h * w)))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def _stiffness_1d(n: int) -> sp.csr_matrix:
    h = 1.0 / n
    main = np.full(n + 1, 2.0 / h)
    main[[0, -1]] = 1.0 / h
    off = np.full(n, -1.0 / h)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def _lumped_mass_1d(n: int) -> sp.dia_matrix:
    w = np.full(n + 1, 1.0 / n)
    w[[0, -1]] *= 0.5
    return sp.diags(w)


def _laplacian(n: int, dim: int) -> sp.csr_matrix:
    """Seven-point (five-point in 2D) Laplacian with lumped boundary weights."""
    k, m = _stiffness_1d(n), _lumped_mass_1d(n)
    terms = []
    for d in range(dim):
        factors = [k if i == d else m for i in range(dim)]
        t = factors[0]
        for f in factors[1:]:
            t = sp.kron(t, f, format="csr")
        terms.append(t)
    return sum(terms[1:], terms[0]).tocsr()


def _cg(a: sp.csr_matrix, b: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    diag = a.diagonal()
    precond = spla.LinearOperator(a.shape, matvec=lambda r: r / diag)
    x, info = spla.cg(a, b, rtol=tol, atol=0.0, maxiter=20 * a.shape[0], M=precond)
    if info != 0:
        raise OracleFailure(f"conjugate gradients stopped with info={info}")
    return x


def fd_oracle(kind: str, u: Callable, v: Callable, n: int) -> float:
    """Finite-difference value of the inner product defined by an extension problem.

    ``u`` and ``v`` are callables of (xi1, xi2), or of sigma for the edge kind.
    Grid nodes are indexed (i1, i2, i3) with xi3 = i3/n the depth into the cube;
    K itself is the face xi3 = 0.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown inner-product kind {kind!r}")
    if n < 8:
        raise ValueError("the oracle grid needs n >= 8")
    x = np.linspace(0.0, 1.0, n + 1)
    interior = (x > 0.0) & (x < 1.0)
    if kind == "tildeH12_edge":
        a = _laplacian(n, 2)
        x1, x2 = np.meshgrid(x, x, indexing="ij")
        # data on xi2 = 0, zero on the other edges
        data_mask = (x2 == 0.0) & np.outer(interior, np.ones(n + 1, bool))
        free = np.outer(interior, interior)
        return _dirichlet_energy(a, free.ravel(), data_mask.ravel(), u(x1[:, 0]), v(x1[:, 0]), interior)
    a = _laplacian(n, 3)
    g1, g2 = np.meshgrid(x, x, indexing="ij")
    if kind == "tildeH12_K":
        face = np.zeros((n + 1, n + 1, n + 1), bool)
        face[:, :, 0] = np.outer(interior, interior)
        free = np.zeros_like(face)
        free[1:-1, 1:-1, 1:-1] = True
        uu = u(g1, g2)[interior][:, interior].ravel()
        vv = v(g1, g2)[interior][:, interior].ravel()
        return _dirichlet_energy(a, free.ravel(), face.ravel(), uu, vv, None)
    # Neumann data on the face xi3 = 0
    free = np.zeros((n + 1, n + 1, n + 1), bool)
    if kind == "Hm12_K":
        free[1:-1, 1:-1, :-1] = True
    else:
        free[:, :, :-1] = True
    mass = np.diag(_lumped_mass_1d(n).toarray())
    area = np.outer(mass, mass)
    load_u = np.zeros((n + 1, n + 1, n + 1))
    load_v = np.zeros((n + 1, n + 1, n + 1))
    load_u[:, :, 0] = area * u(g1, g2)
    load_v[:, :, 0] = area * v(g1, g2)
    idx = free.ravel()
    a_ff = a[idx][:, idx]
    bu, bv = load_u.ravel()[idx], load_v.ravel()[idx]
    y = _cg(a_ff, bv)
    value = float(bu @ y)
    log.debug("fd_oracle %s n=%d -> %.10g", kind, n, value)
    return value


def _dirichlet_energy(a, free, data, u_vals, v_vals, interior):
    """Discrete energy pairing of the harmonic extensions of two boundary data."""
    if interior is not None:
        u_vals = np.asarray(u_vals)[interior]
        v_vals = np.asarray(v_vals)[interior]
    a_ff = a[free][:, free]
    a_fd = a[free][:, data]
    a_dd = a[data][:, data]
    ext_v = -_cg(a_ff, a_fd @ v_vals)
    # u^T (A_dd + A_df ext_v) is the Schur complement pairing
    return float(u_vals @ (a_dd @ v_vals) + u_vals @ (a_fd.T @ ext_v))
