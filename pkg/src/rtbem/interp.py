"""Projections and projection-based interpolation on the reference square.

The H(div) interpolants are built in three stages:

1. ``u1``: the lowest-order RT function carrying the four edge fluxes of u;
2. ``u2``: the curl of a polynomial extension of the edge projections of the
   boundary primitive psi of (u - u1).n;
3. ``u3``: an interior bubble fixed by a divergence equation (tilde H^{-1/2}
   or L2 form) and an L2 orthogonality against curls of scalar bubbles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.linalg as sla

from . import fracform
from .fields import ScalarField, VectorField, as_scalar_field, as_vector_field
from .refelem import (
    CORNERS,
    EDGE_NORMAL,
    EDGES,
    EdgePolynomial,
    RTFunction,
    TensorPolynomial,
    bubble_coefficients_1d,
    bubble_matrix,
    curl_matrix,
    divergence,
    divergence_matrix,
    edge_function_matrix,
    edge_point,
    gauss_legendre,
    gradient,
    legendre_mass,
    legendre_vandermonde,
    rt_mass_diagonal,
    scalar_bubble_matrix,
    scalar_curl,
)

log = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
VERTEX_TOLERANCE = 1e-10


class DegeneracyError(np.linalg.LinAlgError):
    """The interior system of an interpolant is singular."""


class ConditioningError(np.linalg.LinAlgError):
    """A projection Gram matrix is too ill-conditioned to trust."""


class TrivialSpaceError(ValueError):
    """The bubble space is trivial, so the inf-sup constant is undefined."""


@dataclass(frozen=True)
class InterpolantBreakdown:
    u1: RTFunction
    u2p: RTFunction
    u3p: RTFunction
    total: RTFunction
    primitive: "BoundaryPrimitive"


@dataclass(frozen=True)
class BoundaryPrimitive:
    """psi on each edge: evaluators, sine spectra and the projected polynomials."""

    evaluators: dict
    spectra: dict
    projections: dict

    def vertex_defect(self) -> float:
        return max(max(abs(float(f(0.0))), abs(float(f(1.0)))) for f in self.evaluators.values())


@dataclass(frozen=True)
class InfSupReport:
    p: int
    computed: float
    closed_form: float
    dim_a: int
    dim_b: int

    @property
    def abs_err(self) -> float:
        return abs(self.computed - self.closed_form)


@dataclass(frozen=True)
class InterpolationSettings:
    """Quadrature and truncation parameters shared by the operators."""

    truncation: int = fracform.DEFAULT_TRUNCATION
    extra_points: int = 16
    blend: str = "linear"


DEFAULT_SETTINGS = InterpolationSettings()


def infsup_closed_form(p: int) -> float:
    return float(np.sqrt(2.0 * (2 * p + 1) / ((p + 1) * (p + 2))))


# ---------------------------------------------------------------------------
# quadrature helpers
# ---------------------------------------------------------------------------


def _square_rule(n: int):
    rule = gauss_legendre(n)
    x1, x2 = np.meshgrid(rule.points, rule.points, indexing="ij")
    return x1, x2, np.outer(rule.weights, rule.weights), rule


def _legendre_coefficients(f: Callable, degree: int, points: int) -> np.ndarray:
    """L2 projection of f onto P_degree(K) in tensor Legendre coefficients."""
    x1, x2, w, rule = _square_rule(points)
    v = legendre_vandermonde(rule.points, degree)
    vals = np.asarray(f(x1, x2), dtype=float) * w
    m = legendre_mass(degree)
    return (v.T @ vals @ v) / np.outer(m, m)


def _rt_coefficients_l2(u: VectorField, p: int, points: int) -> np.ndarray:
    """Componentwise Legendre moments <u, e_k> for every RT_p coefficient slot."""
    x1, x2, w, rule = _square_rule(points)
    vals = u(x1, x2) * w
    va, vb = legendre_vandermonde(rule.points, p), legendre_vandermonde(rule.points, p - 1)
    m1 = va.T @ vals[0] @ vb
    m2 = vb.T @ vals[1] @ va
    return np.concatenate([m1.ravel(), m2.ravel()])


def _normal_component(u: VectorField, edge: int, sigma) -> np.ndarray:
    x1, x2 = edge_point(edge, sigma)
    val = u(x1, x2)
    n = EDGE_NORMAL[edge]
    return n[0] * val[0] + n[1] * val[1]


# ---------------------------------------------------------------------------
# scalar projections
# ---------------------------------------------------------------------------


def proj_L2(f, p: int, points: int | None = None) -> TensorPolynomial:
    """L2(K) projection onto P_p(K)."""
    if p < 0:
        raise ValueError("degree must be >= 0")
    if isinstance(f, TensorPolynomial):
        c = np.zeros((p + 1, p + 1))
        n1, n2 = min(p + 1, f.coefficients.shape[0]), min(p + 1, f.coefficients.shape[1])
        c[:n1, :n2] = f.coefficients[:n1, :n2]
        return TensorPolynomial(c)
    n = points if points is not None else p + DEFAULT_SETTINGS.extra_points + 8
    return TensorPolynomial(_legendre_coefficients(f, p, n))


@lru_cache(maxsize=64)
def _tildeHm12_gram(p: int, truncation: int):
    g = fracform.polynomial_gram("tildeHm12_K", p, truncation)
    cond = np.linalg.cond(g)
    if cond > CONDITION_LIMIT:
        raise ConditioningError(f"tilde H^-1/2 Gram of P_{p} has condition {cond:.3e}")
    return sla.cho_factor(g), cond


def tildeHm12_moments(f, p: int, truncation: int = fracform.DEFAULT_TRUNCATION) -> np.ndarray:
    """<f, L_i L_j>_{tilde H^{-1/2}(K)} for the tensor Legendre basis of P_p(K)."""
    s = fracform.expand(f, "cosine", truncation)
    t = fracform._legendre_transform("cosine", truncation, p)
    w = fracform.weight_table("tildeHm12_K", truncation).weights
    return (t.T @ (s.coefficients * w) @ t).ravel()


def proj_tildeHm12(f, p: int, truncation: int = fracform.DEFAULT_TRUNCATION) -> TensorPolynomial:
    """tilde H^{-1/2}(K) projection onto P_p(K)."""
    if p < 0:
        raise ValueError("degree must be >= 0")
    factor, _ = _tildeHm12_gram(p, truncation)
    c = sla.cho_solve(factor, tildeHm12_moments(f, p, truncation))
    return TensorPolynomial(c.reshape(p + 1, p + 1))


# ---------------------------------------------------------------------------
# edge projection and extension
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _edge_bubble_system(p: int, truncation: int):
    b = bubble_coefficients_1d(p)
    t = fracform._legendre_transform("sine", truncation, p)
    sb = t @ b
    w = fracform.weight_table("tildeH12_edge", truncation).weights
    gram = (sb.T * w) @ sb
    return b, sb, w, sla.cho_factor(gram)


def project_edge(spectrum: fracform.EdgeModeSpectrum, p: int) -> EdgePolynomial:
    """tilde H^{1/2} edge projection onto polynomials of degree p vanishing at both ends."""
    if p < 2:
        return EdgePolynomial(spectrum.edge, np.zeros(p + 1))
    b, sb, w, factor = _edge_bubble_system(p, spectrum.truncation)
    rhs = sb.T @ (w * spectrum.coefficients)
    return EdgePolynomial(spectrum.edge, b @ sla.cho_solve(factor, rhs))


def _blend_factor(order: int) -> np.ndarray:
    # Legendre coefficients of (1 - t)^order for order 1, 2
    if order == 1:
        return np.array([0.5, -0.5])
    if order == 2:
        return np.array([1.0 / 3.0, -0.5, 1.0 / 6.0])
    raise ValueError("blend order must be 1 or 2")


def extend_edge(trace: EdgePolynomial, p: int, blend: str = "linear") -> TensorPolynomial:
    """Polynomial on K equal to ``trace`` on its edge and vanishing on the other three.

    Uses trace(sigma) * (1 - t)^k with t the distance-like coordinate
    transverse to the edge; k = 1 for ``linear`` and k = 2 for ``quadratic``.
    """
    order = {"linear": 1, "quadratic": 2}[blend]
    g = trace.coefficients
    fade = _blend_factor(order)
    e = trace.edge
    if e == 1:  # sigma = xi1, t = xi2
        c = np.outer(g, fade)
    elif e == 2:  # sigma = xi2, t = 1 - xi1
        c = np.outer(_reflect(fade), g)
    elif e == 3:  # sigma = 1 - xi1, t = 1 - xi2
        c = np.outer(_reflect(g), _reflect(fade))
    else:  # sigma = 1 - xi2, t = xi1
        c = np.outer(fade, _reflect(g))
    return TensorPolynomial(c).promote(max(p, c.shape[0] - 1), max(p, c.shape[1] - 1))


def _reflect(c):
    return np.asarray(c) * (-1.0) ** np.arange(len(c))


# ---------------------------------------------------------------------------
# boundary primitive
# ---------------------------------------------------------------------------


def _edge_points(p: int, settings: InterpolationSettings) -> int:
    return 2 * p + settings.extra_points


def edge_fluxes(u: VectorField, p: int, settings: InterpolationSettings = DEFAULT_SETTINGS) -> np.ndarray:
    rule = gauss_legendre(_edge_points(p, settings))
    return np.array([float(rule.weights @ _normal_component(u, e, rule.points)) for e in EDGES])


def lowest_order_part(fluxes, p: int) -> RTFunction:
    e = edge_function_matrix(p)
    cols = [e[:, (i - 1) * p] for i in EDGES]
    return RTFunction.from_vector(p, np.array(cols).T @ np.asarray(fluxes))


def boundary_primitive(u: VectorField, u1: RTFunction, p: int, settings: InterpolationSettings) -> BoundaryPrimitive:
    """Primitive psi of (u - u1).n along each edge, anchored at the start vertex."""
    m_trunc = settings.truncation
    n_pts = max(fracform.default_points(m_trunc), _edge_points(p, settings))
    rule = gauss_legendre(n_pts)
    m = np.arange(1, m_trunc + 1)
    cos_modes = np.cos(np.pi * np.outer(m, rule.points))
    low = VectorField.from_rt(u1)
    evaluators, spectra, projections = {}, {}, {}
    for e in EDGES:
        g = lambda s, e=e: _normal_component(u, e, s) - _normal_component(low, e, s)
        gq = g(rule.points) * rule.weights
        # int psi sqrt2 sin(m pi s) ds = sqrt2/(m pi) int g cos(m pi s) ds, psi(0) = psi(1) = 0
        coef = np.sqrt(2.0) / (m * np.pi) * (cos_modes @ gq)
        spec = fracform.EdgeModeSpectrum(e, coef)
        evaluators[e] = _primitive_evaluator(g, _edge_points(p, settings))
        spectra[e] = spec
        projections[e] = project_edge(spec, p)
    prim = BoundaryPrimitive(evaluators, spectra, projections)
    defect = prim.vertex_defect()
    if defect > VERTEX_TOLERANCE * (1.0 + _field_scale(u, p, settings)):
        raise fracform.ResolutionError(f"boundary primitive does not vanish at the vertices (defect {defect:.3e})")
    return prim


def _field_scale(u: VectorField, p: int, settings: InterpolationSettings) -> float:
    rule = gauss_legendre(_edge_points(p, settings))
    return max(float(np.max(np.abs(_normal_component(u, e, rule.points)))) for e in EDGES)


def _primitive_evaluator(g: Callable, points: int) -> Callable:
    rule = gauss_legendre(points)

    def psi(sigma):
        s = np.atleast_1d(np.asarray(sigma, dtype=float))
        nodes = s[:, None] * rule.points[None, :]
        out = (g(nodes.ravel()).reshape(nodes.shape) * rule.weights).sum(axis=1) * s
        return out if np.ndim(sigma) else out[0]

    return psi


# ---------------------------------------------------------------------------
# interior system
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def bubble_splitting(p: int):
    """Return (Z, Y): curls of scalar bubbles and an L2-complement basis in RT^0_p(K).

    Both are coefficient matrices in the RT_p layout.
    """
    bub = bubble_matrix(p)
    z = curl_matrix(p) @ scalar_bubble_matrix(p)
    if bub.shape[1] == 0:
        empty = np.zeros((bub.shape[0], 0))
        return empty, empty
    mass = rt_mass_diagonal(p)
    # bubble coordinates of the curl fields
    zc = np.linalg.lstsq(bub, z, rcond=None)[0]
    gram_b = bub.T @ (mass[:, None] * bub)
    y = bub @ sla.null_space((gram_b @ zc).T)
    return z, y


def _div_coefficients(cols: np.ndarray, p: int) -> np.ndarray:
    return divergence_matrix(p) @ cols


def _interior_part(u: VectorField, u1: RTFunction, u2: RTFunction, p: int, form: str,
                   settings: InterpolationSettings) -> RTFunction:
    z, y = bubble_splitting(p)
    if z.shape[1] + y.shape[1] == 0:
        return RTFunction.zeros(p)
    mass = rt_mass_diagonal(p)
    dy = _div_coefficients(y, p)
    div_u1 = divergence(u1).promote(p - 1, p - 1).coefficients.ravel()
    if form == "m12":
        gram = fracform.polynomial_gram("tildeHm12_K", p - 1, settings.truncation)
        div_u_mom = tildeHm12_moments(u.divergence, p - 1, settings.truncation)
    elif form == "l2":
        gram = np.diag(np.outer(legendre_mass(p - 1), legendre_mass(p - 1)).ravel())
        div_u_mom = gram @ _legendre_coefficients(u.divergence, p - 1, p + settings.extra_points + 8).ravel()
    else:
        raise ValueError(f"unknown interior form {form!r}")
    points = 2 * p + settings.extra_points
    u_mom = _rt_coefficients_l2(u, p, points)
    rest = u1.vector + u2.vector
    # unknowns [alpha (curl part), beta (complement)] with u3 = Z alpha + Y beta
    a11 = dy.T @ gram @ (divergence_matrix(p) @ z)
    a12 = dy.T @ gram @ dy
    a21 = z.T @ (mass[:, None] * z)
    a22 = z.T @ (mass[:, None] * y)
    rhs1 = dy.T @ (div_u_mom - gram @ div_u1)
    rhs2 = z.T @ u_mom - z.T @ (mass * rest)
    mat = np.block([[a11, a12], [a21, a22]])
    rhs = np.concatenate([rhs1, rhs2])
    cond = np.linalg.cond(mat)
    log.debug("interior system p=%d form=%s cond=%.3e", p, form, cond)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise DegeneracyError(f"interior system for p={p} is singular (cond {cond:.3e})")
    sol = sla.lu_solve(sla.lu_factor(mat), rhs)
    nz = z.shape[1]
    return RTFunction.from_vector(p, z @ sol[:nz] + y @ sol[nz:])


# ---------------------------------------------------------------------------
# vector interpolants
# ---------------------------------------------------------------------------


def _interp_div(u, p: int, form: str, settings: InterpolationSettings) -> InterpolantBreakdown:
    if p < 1:
        raise ValueError("RT order must be >= 1")
    u = as_vector_field(u)
    u1 = lowest_order_part(edge_fluxes(u, p, settings), p)
    prim = boundary_primitive(u, u1, p, settings)
    ext = TensorPolynomial.zeros(p, p)
    for e in EDGES:
        ext = ext + extend_edge(prim.projections[e], p, settings.blend)
    u2 = scalar_curl(ext, p)
    u3 = _interior_part(u, u1, u2, p, form, settings)
    total = u1 + u2 + u3
    return InterpolantBreakdown(u1, u2, u3, total, prim)


def interp_div_m12(u, p: int, settings: InterpolationSettings = DEFAULT_SETTINGS) -> InterpolantBreakdown:
    """Projection-based H(div) interpolant with the tilde H^{-1/2} interior form."""
    return _interp_div(u, p, "m12", settings)


def interp_div_L2(u, p: int, settings: InterpolationSettings = DEFAULT_SETTINGS) -> InterpolantBreakdown:
    """Projection-based H(div) interpolant with the L2 interior form."""
    return _interp_div(u, p, "l2", settings)


def interp_H1(f, p: int, settings: InterpolationSettings = DEFAULT_SETTINGS) -> TensorPolynomial:
    """H1-conforming projection-based interpolant onto P_p(K).

    Vertex interpolation, then edge projections of the remainder in the
    tilde H^{1/2} edge form, then an H1-seminorm projection onto interior
    bubbles.
    """
    if p < 1:
        raise ValueError("degree must be >= 1")
    f = as_scalar_field(f)
    vals = [float(f(*c)) for c in CORNERS]
    # bilinear interpolant: L0 = 1, L1 = 2x - 1, so x = (L0 + L1)/2
    lin = {0: np.array([0.5, -0.5]), 1: np.array([0.5, 0.5])}
    c = np.zeros((2, 2))
    for (a, b), v in zip(((0, 0), (1, 0), (1, 1), (0, 1)), vals):
        c += v * np.outer(lin[a], lin[b])
    vert = TensorPolynomial(c).promote(p, p)
    n_pts = max(fracform.default_points(settings.truncation), _edge_points(p, settings))
    rule = gauss_legendre(n_pts)
    modes = fracform.mode_values("sine", settings.truncation, rule.points)
    ext = TensorPolynomial.zeros(p, p)
    for e in EDGES:
        x1, x2 = edge_point(e, rule.points)
        r = f(x1, x2) - vert(x1, x2)
        spec = fracform.EdgeModeSpectrum(e, modes @ (r * rule.weights))
        ext = ext + extend_edge(project_edge(spec, p), p, settings.blend)
    base = vert + ext
    sb = scalar_bubble_matrix(p)
    if sb.shape[1] == 0:
        return base
    # <grad(f - base - b), grad chi> = 0 via curl pairing on RT coefficients
    zc = curl_matrix(p) @ sb
    mass = rt_mass_diagonal(p)
    grad_f = f.curl()
    mom = zc.T @ _rt_coefficients_l2(grad_f, p, 2 * p + settings.extra_points)
    mom -= zc.T @ (mass * scalar_curl(base, p).vector)
    alpha = np.linalg.solve(zc.T @ (mass[:, None] * zc), mom)
    return base + TensorPolynomial((sb @ alpha).reshape(p + 1, p + 1))


# ---------------------------------------------------------------------------
# norms, inf-sup and stability
# ---------------------------------------------------------------------------


def tildeHm12_norm(f: TensorPolynomial, truncation: int = fracform.DEFAULT_TRUNCATION) -> float:
    d = max(f.degree_1, f.degree_2)
    c = f.promote(d, d).coefficients.ravel()
    return float(np.sqrt(c @ fracform.polynomial_gram("tildeHm12_K", d, truncation) @ c))


def div_norm_m12(v: RTFunction, truncation: int = fracform.DEFAULT_TRUNCATION) -> float:
    """||v||_{L2(K)} + ||div v||_{tilde H^{-1/2}(K)}."""
    return v.l2_norm() + tildeHm12_norm(divergence(v), truncation)


def _gradient_columns(div_cols: np.ndarray, p: int) -> np.ndarray:
    return np.array([gradient(TensorPolynomial(d.reshape(p, p)), p).vector for d in div_cols.T]).T


def infsup_constant(p: int) -> InfSupReport:
    """Smallest normalized L2 coupling between RT^0_p(K) and curl P^0_p + grad div RT^0_p."""
    if p < 2:
        raise TrivialSpaceError("the RT bubble space is trivial for p = 1")
    mass = rt_mass_diagonal(p)
    a = bubble_matrix(p)
    z = curl_matrix(p) @ scalar_bubble_matrix(p)
    grad_div = _gradient_columns(divergence_matrix(p) @ a, p)
    # grad div of the curl bubbles vanishes; keep an independent spanning subset
    cand = np.hstack([z, grad_div])
    weighted = np.sqrt(mass)[:, None] * cand
    _, r, piv = sla.qr(weighted, pivoting=True, mode="economic")
    rank = int(np.sum(np.abs(np.diag(r)) > 1e-10 * abs(r[0, 0])))
    b = cand[:, np.sort(piv[:rank])]
    ga = a.T @ (mass[:, None] * a)
    gb = b.T @ (mass[:, None] * b)
    cpl = a.T @ (mass[:, None] * b)
    la = np.linalg.cholesky(ga)
    lb = np.linalg.cholesky(gb)
    s = sla.solve_triangular(la, sla.solve_triangular(lb, cpl.T, lower=True).T, lower=True)
    sigma = float(np.linalg.svd(s, compute_uv=False).min())
    return InfSupReport(p, sigma, infsup_closed_form(p), a.shape[1], b.shape[1])


@dataclass(frozen=True)
class StabilityRow:
    p: int
    l2_norm: float
    div_norm: float

    @property
    def total(self) -> float:
        return self.l2_norm + self.div_norm


def stability_scan(u, p_values, settings: InterpolationSettings = DEFAULT_SETTINGS) -> list[StabilityRow]:
    rows = []
    for p in p_values:
        v = interp_div_m12(u, p, settings).total
        rows.append(StabilityRow(p, v.l2_norm(), tildeHm12_norm(divergence(v), settings.truncation)))
    return rows


def loglog_slope(p_values, norms) -> float:
    return float(np.polyfit(np.log(np.asarray(p_values, float)), np.log(np.asarray(norms, float)), 1)[0])


def best_bubble_error(u: VectorField, p: int, points: int | None = None) -> float:
    """min over v in RT^0_p(K) of ||u - v||_{L2(K)}, by least squares."""
    points = points or 2 * p + 24
    mass = rt_mass_diagonal(p)
    bub = bubble_matrix(p)
    mom = _rt_coefficients_l2(u, p, points)
    coef = np.linalg.solve(bub.T @ (mass[:, None] * bub), bub.T @ mom)
    v = RTFunction.from_vector(p, bub @ coef)
    return l2_distance(u, v, points)


def l2_distance(u: VectorField, v: RTFunction, points: int) -> float:
    x1, x2, w, _ = _square_rule(points)
    d = u(x1, x2) - v(x1, x2)
    return float(np.sqrt(np.sum(d**2 * w)))
