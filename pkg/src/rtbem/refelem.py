"""Polynomial spaces, differential operators and traces on the reference square.

All polynomials on K = (0,1)^2 are stored in a tensor-product basis of
shifted Legendre polynomials L_i(x) = P_i(2x - 1).  The L2(0,1) norm of
L_i is 1/(2i+1), so L2 inner products are diagonal in coefficient space.

Edge table (counterclockwise, starting at the origin; sigma in [0,1])::

    edge  side     start   end     point(sigma)     outward normal
    1     xi2 = 0  (0,0)   (1,0)   (sigma, 0)       (0, -1)
    2     xi1 = 1  (1,0)   (1,1)   (1, sigma)       (1, 0)
    3     xi2 = 1  (1,1)   (0,1)   (1 - sigma, 1)   (0, 1)
    4     xi1 = 0  (0,1)   (0,0)   (0, 1 - sigma)   (-1, 0)

With this orientation the normal trace of curl(phi) = (d2 phi, -d1 phi)
equals the tangential derivative d(phi)/d(sigma) on every edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg


class InvalidDegreeError(ValueError):
    """Raised when a polynomial degree is outside the admissible range."""


EDGE_START = {1: (0.0, 0.0), 2: (1.0, 0.0), 3: (1.0, 1.0), 4: (0.0, 1.0)}
EDGE_NORMAL = {1: (0.0, -1.0), 2: (1.0, 0.0), 3: (0.0, 1.0), 4: (-1.0, 0.0)}
EDGE_TANGENT = {1: (1.0, 0.0), 2: (0.0, 1.0), 3: (-1.0, 0.0), 4: (0.0, -1.0)}
EDGES = (1, 2, 3, 4)
# reference corners in counterclockwise order; edge i runs CORNERS[i-1] -> CORNERS[i % 4]
CORNERS = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))


def edge_point(edge: int, sigma):
    """Map the edge parameter to reference coordinates."""
    sigma = np.asarray(sigma, dtype=float)
    x0, y0 = EDGE_START[edge]
    tx, ty = EDGE_TANGENT[edge]
    return x0 + tx * sigma, y0 + ty * sigma


def legendre_vandermonde(x, degree: int) -> np.ndarray:
    """Values of L_0..L_degree at x; shape x.shape + (degree+1,)."""
    return npleg.legvander(2.0 * np.asarray(x, dtype=float) - 1.0, degree)


def legendre_mass(degree: int) -> np.ndarray:
    """Diagonal of the L2(0,1) Gram matrix of L_0..L_degree."""
    return 1.0 / (2.0 * np.arange(degree + 1) + 1.0)


def reflect(coefficients: np.ndarray, axis: int = 0) -> np.ndarray:
    """Coefficients of f(1 - x) along ``axis``: L_i(1 - x) = (-1)^i L_i(x)."""
    c = np.asarray(coefficients, dtype=float)
    n = c.shape[axis]
    shape = [1] * c.ndim
    shape[axis] = n
    return c * ((-1.0) ** np.arange(n)).reshape(shape)


def derivative_coefficients(coefficients: np.ndarray, axis: int) -> np.ndarray:
    """Legendre coefficients of d/dx_axis, keeping the array length minus one."""
    c = np.asarray(coefficients, dtype=float)
    if c.shape[axis] == 1:
        shape = list(c.shape)
        shape[axis] = 1
        return np.zeros(shape)
    # d/dx on [0,1] is 2 d/dt on [-1,1]
    return npleg.legder(c, m=1, scl=2.0, axis=axis)


def bubble_coefficients_1d(degree: int) -> np.ndarray:
    """Columns are L_i - L_{i-2}, i = 2..degree: a basis of P_degree vanishing at 0 and 1."""
    n = max(degree - 1, 0)
    out = np.zeros((degree + 1, n))
    for k, i in enumerate(range(2, degree + 1)):
        out[i, k] = 1.0
        out[i - 2, k] = -1.0
    return out


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre rule on [0,1] and its tensorisation on K."""

    points: np.ndarray
    weights: np.ndarray

    @property
    def exactness(self) -> int:
        return 2 * len(self.points) - 1

    def tensor(self):
        """Return (xi1, xi2, w) flattened over the n x n tensor grid."""
        x1, x2 = np.meshgrid(self.points, self.points, indexing="ij")
        w = np.outer(self.weights, self.weights)
        return x1.ravel(), x2.ravel(), w.ravel()


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> QuadratureRule:
    if n < 1:
        raise ValueError("a Gauss rule needs at least one point")
    t, w = npleg.leggauss(n)
    pts = 0.5 * (t + 1.0)
    wts = 0.5 * w
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(pts, wts)


def rule_for_degree(degree: int) -> QuadratureRule:
    """Smallest Gauss rule integrating polynomials of ``degree`` exactly."""
    return gauss_legendre(max(1, degree // 2 + 1))


# ---------------------------------------------------------------------------
# scalar tensor polynomials
# ---------------------------------------------------------------------------


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TensorPolynomial:
    """Bivariate polynomial sum_ij c[i,j] L_i(xi1) L_j(xi2)."""

    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float)
        if c.ndim != 2:
            raise ValueError("coefficients must be a 2D array")
        object.__setattr__(self, "coefficients", _frozen(c))

    @classmethod
    def zeros(cls, degree_1: int, degree_2: int) -> "TensorPolynomial":
        return cls(np.zeros((degree_1 + 1, degree_2 + 1)))

    @classmethod
    def constant(cls, value: float) -> "TensorPolynomial":
        return cls(np.array([[value]]))

    @classmethod
    def from_power(cls, powers: dict[tuple[int, int], float]) -> "TensorPolynomial":
        """Build from monomials {(a, b): coeff} meaning coeff * xi1^a * xi2^b."""
        d1 = max((a for a, _ in powers), default=0)
        d2 = max((b for _, b in powers), default=0)
        out = np.zeros((d1 + 1, d2 + 1))
        for (a, b), coef in powers.items():
            out += coef * np.outer(_monomial_legendre(a, d1), _monomial_legendre(b, d2))
        return cls(out)

    @property
    def degree_1(self) -> int:
        return self.coefficients.shape[0] - 1

    @property
    def degree_2(self) -> int:
        return self.coefficients.shape[1] - 1

    def __call__(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        return npleg.legval2d(2.0 * x1 - 1.0, 2.0 * x2 - 1.0, self.coefficients)

    def derivative(self, axis: int) -> "TensorPolynomial":
        return TensorPolynomial(derivative_coefficients(self.coefficients, axis))

    def promote(self, degree_1: int, degree_2: int) -> "TensorPolynomial":
        """Zero-pad to degrees (degree_1, degree_2); raises if that would truncate."""
        c = self.coefficients
        if c.shape[0] > degree_1 + 1 and np.any(c[degree_1 + 1 :]):
            raise InvalidDegreeError("cannot promote to a smaller degree")
        if c.shape[1] > degree_2 + 1 and np.any(c[:, degree_2 + 1 :]):
            raise InvalidDegreeError("cannot promote to a smaller degree")
        out = np.zeros((degree_1 + 1, degree_2 + 1))
        n1 = min(c.shape[0], degree_1 + 1)
        n2 = min(c.shape[1], degree_2 + 1)
        out[:n1, :n2] = c[:n1, :n2]
        return TensorPolynomial(out)

    def _align(self, other: "TensorPolynomial"):
        d1 = max(self.degree_1, other.degree_1)
        d2 = max(self.degree_2, other.degree_2)
        return self.promote(d1, d2).coefficients, other.promote(d1, d2).coefficients

    def __add__(self, other: "TensorPolynomial") -> "TensorPolynomial":
        a, b = self._align(other)
        return TensorPolynomial(a + b)

    def __sub__(self, other: "TensorPolynomial") -> "TensorPolynomial":
        a, b = self._align(other)
        return TensorPolynomial(a - b)

    def __neg__(self) -> "TensorPolynomial":
        return TensorPolynomial(-self.coefficients)

    def __mul__(self, scalar: float) -> "TensorPolynomial":
        return TensorPolynomial(scalar * self.coefficients)

    __rmul__ = __mul__

    def l2_inner(self, other: "TensorPolynomial") -> float:
        a, b = self._align(other)
        m1 = legendre_mass(a.shape[0] - 1)
        m2 = legendre_mass(a.shape[1] - 1)
        return float(np.sum(a * b * np.outer(m1, m2)))

    def l2_norm(self) -> float:
        return float(np.sqrt(self.l2_inner(self)))

    def integral(self) -> float:
        return float(self.coefficients[0, 0])

    def restrict_to_edge(self, edge: int) -> "EdgePolynomial":
        """Restriction to an edge as a polynomial in the edge parameter."""
        c = self.coefficients
        if edge == 1:
            coef = c @ ((-1.0) ** np.arange(c.shape[1]))
        elif edge == 2:
            coef = c.sum(axis=0)
        elif edge == 3:
            coef = reflect(c.sum(axis=1))
        elif edge == 4:
            coef = reflect(((-1.0) ** np.arange(c.shape[0])) @ c)
        else:
            raise ValueError(f"unknown edge {edge}")
        return EdgePolynomial(edge, coef)

    def allclose(self, other: "TensorPolynomial", atol: float = 1e-12) -> bool:
        a, b = self._align(other)
        return bool(np.allclose(a, b, rtol=0.0, atol=atol))


@lru_cache(maxsize=None)
def _monomial_table(degree: int) -> np.ndarray:
    # column a holds the Legendre coefficients of x^a on [0,1]
    out = np.zeros((degree + 1, degree + 1))
    for a in range(degree + 1):
        # x = (t + 1)/2 ; x^a in powers of t, then to Legendre
        tpow = np.zeros(a + 1)
        for j in range(a + 1):
            tpow[j] = _binom(a, j) / 2.0**a
        out[: a + 1, a] = npleg.poly2leg(tpow)
    return out


def _binom(n: int, k: int) -> float:
    from math import comb

    return float(comb(n, k))


def _monomial_legendre(a: int, degree: int) -> np.ndarray:
    return _monomial_table(degree)[:, a]


# ---------------------------------------------------------------------------
# edge polynomials
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EdgePolynomial:
    """Univariate polynomial on an edge, Legendre basis in sigma in [0,1]."""

    edge: int
    coefficients: np.ndarray

    def __post_init__(self):
        if self.edge not in EDGES:
            raise ValueError(f"unknown edge {self.edge}")
        c = np.atleast_1d(np.asarray(self.coefficients, dtype=float))
        object.__setattr__(self, "coefficients", _frozen(c))

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def __call__(self, sigma):
        return npleg.legval(2.0 * np.asarray(sigma, dtype=float) - 1.0, self.coefficients)

    def endpoint_values(self) -> tuple[float, float]:
        c = self.coefficients
        return float(np.sum(c * (-1.0) ** np.arange(len(c)))), float(np.sum(c))

    def vanishes_at_endpoints(self, rtol: float = 1e-12) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.coefficients))))
        return max(abs(v) for v in self.endpoint_values()) <= rtol * scale

    def integral(self) -> float:
        return float(self.coefficients[0])

    def antiderivative(self) -> "EdgePolynomial":
        """Primitive vanishing at sigma = 0."""
        c = npleg.legint(self.coefficients, m=1, scl=0.5, lbnd=-1.0)
        return EdgePolynomial(self.edge, c)

    def derivative(self) -> "EdgePolynomial":
        c = self.coefficients
        if len(c) == 1:
            return EdgePolynomial(self.edge, [0.0])
        return EdgePolynomial(self.edge, npleg.legder(c, m=1, scl=2.0))


# ---------------------------------------------------------------------------
# Raviart-Thomas functions
# ---------------------------------------------------------------------------


def _check_order(p: int) -> None:
    if int(p) != p or p < 1:
        raise InvalidDegreeError(f"RT order must be an integer >= 1, got {p}")


def rt_dimension(p: int) -> int:
    return 2 * p * (p + 1)


@dataclass(frozen=True, eq=False)
class RTFunction:
    """Member of RT_p(K) = P_{p,p-1} x P_{p-1,p}."""

    order: int
    component_1: TensorPolynomial
    component_2: TensorPolynomial

    def __post_init__(self):
        _check_order(self.order)
        p = self.order
        c1 = self.component_1.promote(p, p - 1)
        c2 = self.component_2.promote(p - 1, p)
        object.__setattr__(self, "component_1", c1)
        object.__setattr__(self, "component_2", c2)

    @classmethod
    def from_vector(cls, p: int, vector) -> "RTFunction":
        _check_order(p)
        v = np.asarray(vector, dtype=float)
        n1 = (p + 1) * p
        if v.shape != (2 * n1,):
            raise ValueError(f"expected {2 * n1} coefficients for order {p}, got {v.shape}")
        c1 = v[:n1].reshape(p + 1, p)
        c2 = v[n1:].reshape(p, p + 1)
        return cls(p, TensorPolynomial(c1), TensorPolynomial(c2))

    @classmethod
    def zeros(cls, p: int) -> "RTFunction":
        return cls.from_vector(p, np.zeros(rt_dimension(p)))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.component_1.coefficients.ravel(), self.component_2.coefficients.ravel()])

    def __call__(self, x1, x2) -> np.ndarray:
        return np.stack([self.component_1(x1, x2), self.component_2(x1, x2)])

    def raise_order(self, q: int) -> "RTFunction":
        if q < self.order:
            raise InvalidDegreeError("cannot lower the order of an RT function")
        return RTFunction(q, self.component_1, self.component_2)

    def _align(self, other: "RTFunction"):
        q = max(self.order, other.order)
        return self.raise_order(q), other.raise_order(q)

    def __add__(self, other: "RTFunction") -> "RTFunction":
        a, b = self._align(other)
        return RTFunction.from_vector(a.order, a.vector + b.vector)

    def __sub__(self, other: "RTFunction") -> "RTFunction":
        a, b = self._align(other)
        return RTFunction.from_vector(a.order, a.vector - b.vector)

    def __mul__(self, scalar: float) -> "RTFunction":
        return RTFunction.from_vector(self.order, scalar * self.vector)

    __rmul__ = __mul__

    def l2_inner(self, other: "RTFunction") -> float:
        a, b = self._align(other)
        return float(np.sum(a.vector * b.vector * rt_mass_diagonal(a.order)))

    def l2_norm(self) -> float:
        return float(np.sqrt(self.l2_inner(self)))


@lru_cache(maxsize=None)
def rt_mass_diagonal(p: int) -> np.ndarray:
    """Diagonal L2(K) Gram matrix in the RT coefficient layout."""
    _check_order(p)
    m1 = np.outer(legendre_mass(p), legendre_mass(p - 1)).ravel()
    m2 = np.outer(legendre_mass(p - 1), legendre_mass(p)).ravel()
    return _frozen(np.concatenate([m1, m2]))


def divergence(v: RTFunction) -> TensorPolynomial:
    d1 = derivative_coefficients(v.component_1.coefficients, 0)
    d2 = derivative_coefficients(v.component_2.coefficients, 1)
    return TensorPolynomial(d1 + d2)


def scalar_curl(phi: TensorPolynomial, p: int | None = None) -> RTFunction:
    """curl phi = (d2 phi, -d1 phi) as an RT function of order max(deg phi)."""
    if p is None:
        p = max(phi.degree_1, phi.degree_2, 1)
    phi = phi.promote(p, p)
    c1 = derivative_coefficients(phi.coefficients, 1)
    c2 = -derivative_coefficients(phi.coefficients, 0)
    return RTFunction(p, TensorPolynomial(c1), TensorPolynomial(c2))


def gradient(phi: TensorPolynomial, p: int) -> RTFunction:
    """grad phi for phi in P_{p-1}; lies in RT_p."""
    phi = phi.promote(p - 1, p - 1)
    c1 = derivative_coefficients(phi.coefficients, 0)
    c2 = derivative_coefficients(phi.coefficients, 1)
    return RTFunction(p, TensorPolynomial(c1), TensorPolynomial(c2))


def normal_trace(v: RTFunction, edge: int) -> EdgePolynomial:
    """Outward normal component v.n on an edge, in the edge parameter."""
    if edge in (2, 4):
        tr = v.component_1.restrict_to_edge(edge)
    else:
        tr = v.component_2.restrict_to_edge(edge)
    sign = EDGE_NORMAL[edge][0] + EDGE_NORMAL[edge][1]
    return EdgePolynomial(edge, sign * tr.coefficients)


def edge_flux(v: RTFunction, edge: int) -> float:
    return normal_trace(v, edge).integral()


# ---------------------------------------------------------------------------
# bases (as coefficient matrices, one column per function)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def edge_function_matrix(p: int) -> np.ndarray:
    """Columns: RT functions whose normal trace is L_m on edge i and 0 elsewhere.

    Ordered edge-major (edge 1, m = 0..p-1, then edge 2, ...).  For m = 0 these
    are the lowest-order functions with unit flux through one edge.
    """
    _check_order(p)
    n1 = (p + 1) * p
    cols = []
    lin = {"x": np.array([0.5, 0.5]), "1-x": np.array([0.5, -0.5])}
    for edge in EDGES:
        for m in range(p):
            unit = np.zeros(p)
            unit[m] = 1.0
            col = np.zeros(2 * n1)
            if edge == 1:  # v2 = (xi2 - 1) L_m(xi1)
                c2 = np.zeros((p, p + 1))
                c2[:, :2] = np.outer(unit, -lin["1-x"])
                col[n1:] = c2.ravel()
            elif edge == 2:  # v1 = xi1 L_m(xi2)
                c1 = np.zeros((p + 1, p))
                c1[:2, :] = np.outer(lin["x"], unit)
                col[:n1] = c1.ravel()
            elif edge == 3:  # v2 = xi2 (-1)^m L_m(xi1)
                c2 = np.zeros((p, p + 1))
                c2[:, :2] = np.outer((-1.0) ** m * unit, lin["x"])
                col[n1:] = c2.ravel()
            else:  # v1 = (xi1 - 1) (-1)^m L_m(xi2)
                c1 = np.zeros((p + 1, p))
                c1[:2, :] = np.outer(-lin["1-x"], (-1.0) ** m * unit)
                col[:n1] = c1.ravel()
            cols.append(col)
    return _frozen(np.array(cols).T)


@lru_cache(maxsize=None)
def bubble_matrix(p: int) -> np.ndarray:
    """Columns: a basis of RT^0_p(K), vector bubbles with zero normal trace."""
    _check_order(p)
    n1 = (p + 1) * p
    b = bubble_coefficients_1d(p)
    cols = []
    for i in range(b.shape[1]):
        for j in range(p):
            c1 = np.zeros((p + 1, p))
            c1[:, j] = b[:, i]
            col = np.zeros(2 * n1)
            col[:n1] = c1.ravel()
            cols.append(col)
    for i in range(p):
        for j in range(b.shape[1]):
            c2 = np.zeros((p, p + 1))
            c2[i, :] = b[:, j]
            col = np.zeros(2 * n1)
            col[n1:] = c2.ravel()
            cols.append(col)
    if not cols:
        return _frozen(np.zeros((2 * n1, 0)))
    return _frozen(np.array(cols).T)


@lru_cache(maxsize=None)
def local_basis_matrix(p: int) -> np.ndarray:
    """Hierarchical RT_p basis: 4p edge functions followed by 2p(p-1) bubbles."""
    return _frozen(np.hstack([edge_function_matrix(p), bubble_matrix(p)]))


@lru_cache(maxsize=None)
def local_basis_inverse(p: int) -> np.ndarray:
    return _frozen(np.linalg.inv(local_basis_matrix(p)))


def rt_basis(p: int) -> list[RTFunction]:
    """Ordered basis of RT_p(K): edge functions then interior bubbles."""
    _check_order(p)
    mat = local_basis_matrix(p)
    return [RTFunction.from_vector(p, mat[:, k]) for k in range(mat.shape[1])]


def rt_bubble_basis(p: int) -> list[RTFunction]:
    """Ordered basis of RT^0_p(K); empty for p = 1."""
    _check_order(p)
    mat = bubble_matrix(p)
    return [RTFunction.from_vector(p, mat[:, k]) for k in range(mat.shape[1])]


@lru_cache(maxsize=None)
def scalar_bubble_matrix(p: int) -> np.ndarray:
    """Columns: flattened (p+1)x(p+1) coefficients of a basis of P^0_p(K)."""
    b = bubble_coefficients_1d(p)
    cols = [np.outer(b[:, i], b[:, j]).ravel() for i in range(b.shape[1]) for j in range(b.shape[1])]
    if not cols:
        return _frozen(np.zeros(((p + 1) ** 2, 0)))
    return _frozen(np.array(cols).T)


def scalar_bubble_basis(p: int) -> list[TensorPolynomial]:
    mat = scalar_bubble_matrix(p)
    return [TensorPolynomial(mat[:, k].reshape(p + 1, p + 1)) for k in range(mat.shape[1])]


@lru_cache(maxsize=None)
def divergence_matrix(p: int) -> np.ndarray:
    """Linear map RT_p coefficients -> P_{p-1} coefficients (flattened p x p)."""
    n = rt_dimension(p)
    cols = [divergence(RTFunction.from_vector(p, np.eye(n)[k])).promote(p - 1, p - 1).coefficients.ravel()
            for k in range(n)]
    return _frozen(np.array(cols).T)


@lru_cache(maxsize=None)
def curl_matrix(p: int) -> np.ndarray:
    """Linear map P_p coefficients (flattened) -> RT_p coefficients."""
    n = (p + 1) ** 2
    cols = [scalar_curl(TensorPolynomial(np.eye(n)[k].reshape(p + 1, p + 1)), p).vector for k in range(n)]
    return _frozen(np.array(cols).T)


def gram_rank(functions: list[RTFunction], rtol: float = 1e-10) -> int:
    """Numerical rank of the L2 Gram matrix of a family of RT functions."""
    if not functions:
        return 0
    p = max(f.order for f in functions)
    mat = np.array([f.raise_order(p).vector for f in functions]).T
    g = mat.T @ (rt_mass_diagonal(p)[:, None] * mat)
    s = np.linalg.eigvalsh(g)
    return int(np.sum(s > rtol * s.max()))


def evaluate_rt_basis(p: int, x1, x2, columns: np.ndarray | None = None):
    """Values and divergences of a family of RT_p functions at points.

    ``columns`` holds RT coefficient vectors (default: the hierarchical local
    basis).  Returns ``(values, divs)`` with shapes (n_functions, 2, n_points)
    and (n_functions, n_points).
    """
    x1 = np.asarray(x1, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    cols = local_basis_matrix(p) if columns is None else np.asarray(columns)
    la1, lb1 = legendre_vandermonde(x1, p), legendre_vandermonde(x1, p - 1)
    la2, lb2 = legendre_vandermonde(x2, p), legendre_vandermonde(x2, p - 1)
    n1 = (p + 1) * p
    v1 = np.einsum("qi,qj->qij", la1, lb2).reshape(len(x1), n1)
    v2 = np.einsum("qi,qj->qij", lb1, la2).reshape(len(x1), n1)
    values = np.stack([(v1 @ cols[:n1]).T, (v2 @ cols[n1:]).T], axis=1)
    vd = np.einsum("qi,qj->qij", lb1, lb2).reshape(len(x1), p * p)
    divs = (vd @ (divergence_matrix(p) @ cols)).T
    return values, divs
