"""Piecewise-plane surfaces, quadrilateral meshes, Piola transforms and the global RT space."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .fields import VectorField
from .interp import DEFAULT_SETTINGS, InterpolationSettings, extend_edge, interp_div_m12
from .refelem import (
    CORNERS,
    EDGE_NORMAL,
    EDGES,
    EdgePolynomial,
    RTFunction,
    bubble_coefficients_1d,
    curl_matrix,
    edge_point,
    evaluate_rt_basis,
    gauss_legendre,
    local_basis_inverse,
    local_basis_matrix,
    rt_dimension,
    scalar_bubble_matrix,
)

log = logging.getLogger(__name__)

PLANARITY_TOLERANCE = 1e-12
CONFORMITY_TOLERANCE = 1e-9
# local edge i runs from corner LOCAL_EDGE_CORNERS[i][0] to LOCAL_EDGE_CORNERS[i][1]
LOCAL_EDGE_CORNERS = {1: (0, 1), 2: (1, 2), 3: (2, 3), 4: (3, 0)}


class SurfaceError(ValueError):
    """Invalid surface description."""


class ConformityError(SurfaceError):
    """Patches or elements do not meet in whole sides, or shared data disagree."""


class ChartError(ValueError):
    """A chart Jacobian degenerates on the reference square."""


class UnsupportedTopologyError(ValueError):
    """The surface is neither a disk-like screen nor a sphere-like closed surface."""


# ---------------------------------------------------------------------------
# surfaces
# ---------------------------------------------------------------------------


def _edge_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True, eq=False)
class PiecewisePlaneSurface:
    """Union of planar quadrilateral patches, given by 0-based vertex indices."""

    vertices: np.ndarray
    quads: np.ndarray
    face_ids: np.ndarray
    closed: bool

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        q = np.array(self.quads, dtype=int)
        f = np.array(self.face_ids, dtype=int)
        if v.ndim != 2 or v.shape[1] != 3:
            raise SurfaceError("vertices must be an (n, 3) array")
        if q.ndim != 2 or q.shape[1] != 4:
            raise SurfaceError("quads must be an (m, 4) array")
        if f.shape != (q.shape[0],):
            raise SurfaceError("one face id per quad is required")
        if q.size and (q.min() < 0 or q.max() >= len(v)):
            raise SurfaceError("quad references a missing vertex")
        for arr in (v, q, f):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "quads", q)
        object.__setattr__(self, "face_ids", f)
        self.validate()

    @property
    def scale(self) -> float:
        return float(np.ptp(self.vertices, axis=0).max())

    def normals(self) -> np.ndarray:
        out = []
        for quad in self.quads:
            c = self.vertices[quad]
            n = np.cross(c[2] - c[0], c[3] - c[1])
            out.append(n / np.linalg.norm(n))
        return np.array(out)

    def edge_usage(self) -> dict:
        """Map undirected edge -> list of (quad, start vertex, end vertex)."""
        usage: dict = {}
        for k, quad in enumerate(self.quads):
            for i in range(4):
                a, b = int(quad[i]), int(quad[(i + 1) % 4])
                usage.setdefault(_edge_key(a, b), []).append((k, a, b))
        return usage

    def boundary_edges(self) -> list[tuple[int, int]]:
        return sorted(e for e, uses in self.edge_usage().items() if len(uses) == 1)

    def validate(self) -> None:
        scale = max(self.scale, 1.0)
        for k, quad in enumerate(self.quads):
            if len(set(quad.tolist())) != 4:
                raise SurfaceError(f"quad {k} repeats a vertex")
            c = self.vertices[quad]
            n = np.cross(c[1] - c[0], c[3] - c[0])
            if np.linalg.norm(n) == 0.0:
                raise SurfaceError(f"quad {k} is degenerate")
            off = abs(np.dot(c[2] - c[0], n / np.linalg.norm(n)))
            if off > PLANARITY_TOLERANCE * scale:
                raise SurfaceError(f"quad {k} is not planar (offset {off:.3e})")
        usage = self.edge_usage()
        for e, uses in usage.items():
            if len(uses) > 2:
                raise ConformityError(f"edge {e} is shared by {len(uses)} quads")
            if len(uses) == 1 and self.closed:
                raise ConformityError(f"closed surface has a free edge {e}")
            if len(uses) == 2 and uses[0][1] == uses[1][1]:
                raise ConformityError(f"quads {uses[0][0]} and {uses[1][0]} are inconsistently oriented")
        # a vertex inside another quad's side means the patches do not meet in whole sides
        for (a, b) in usage:
            pa, pb = self.vertices[a], self.vertices[b]
            d = pb - pa
            length2 = float(d @ d)
            t = (self.vertices - pa) @ d / length2
            perp = np.linalg.norm(self.vertices - pa - np.outer(t, d), axis=1)
            inside = (t > 1e-12) & (t < 1 - 1e-12) & (perp <= 1e-12 * scale)
            if np.any(inside):
                raise ConformityError(f"vertex {int(np.argmax(inside))} hangs on edge {(a, b)}")

    def euler_characteristic(self) -> int:
        used = np.unique(self.quads)
        return len(used) - len(self.edge_usage()) + len(self.quads)


def unit_square_screen() -> PiecewisePlaneSurface:
    v = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (1.0, 1.0, 0.0), (0.0, 1.0, 0.0)]
    return PiecewisePlaneSurface(np.array(v), np.array([[0, 1, 2, 3]]), np.array([0]), closed=False)


def unit_cube() -> PiecewisePlaneSurface:
    """Surface of (0,1)^3 with outward normals."""
    v = np.array([[x, y, z] for z in (0.0, 1.0) for y in (0.0, 1.0) for x in (0.0, 1.0)])
    # vertex index = x + 2y + 4z
    quads = np.array([
        [0, 2, 3, 1],  # z = 0, normal -z
        [4, 5, 7, 6],  # z = 1
        [0, 1, 5, 4],  # y = 0
        [2, 6, 7, 3],  # y = 1
        [0, 4, 6, 2],  # x = 0
        [1, 3, 7, 5],  # x = 1
    ])
    return PiecewisePlaneSurface(v, quads, np.arange(6), closed=True)


SHIPPED_SURFACES = {"screen": unit_square_screen, "cube": unit_cube}


def read_mesh_file(path) -> PiecewisePlaneSurface:
    """Parse ``surface <open|closed>``, ``v x y z`` and ``q i1 i2 i3 i4 face_id`` lines."""
    closed = None
    verts, quads, faces = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "surface":
                if len(parts) != 2 or parts[1] not in ("open", "closed"):
                    raise ValueError("expected 'surface open' or 'surface closed'")
                closed = parts[1] == "closed"
            elif parts[0] == "v":
                if len(parts) != 4:
                    raise ValueError("vertex lines need three coordinates")
                verts.append([float(x) for x in parts[1:]])
            elif parts[0] == "q":
                if len(parts) != 6:
                    raise ValueError("quad lines need four indices and a face id")
                quads.append([int(x) for x in parts[1:5]])
                faces.append(int(parts[5]))
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
        except ValueError as exc:
            raise SurfaceError(f"{path}:{lineno}: {exc}") from None
    if closed is None:
        raise SurfaceError(f"{path}: missing 'surface' header")
    if not quads:
        raise SurfaceError(f"{path}: no quads")
    return PiecewisePlaneSurface(np.array(verts), np.array(quads), np.array(faces), closed)


def write_mesh_file(surface: PiecewisePlaneSurface, path) -> None:
    lines = [f"surface {'closed' if surface.closed else 'open'}"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in surface.vertices.tolist()]
    lines += [f"q {a} {b} {c} {d} {f}" for (a, b, c, d), f in zip(surface.quads.tolist(), surface.face_ids.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# charts and Piola transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BilinearChart:
    """T(xi) = c0 (1-xi1)(1-xi2) + c1 xi1 (1-xi2) + c2 xi1 xi2 + c3 (1-xi1) xi2."""

    corners: np.ndarray

    def __post_init__(self):
        c = np.array(self.corners, dtype=float)
        if c.shape != (4, 3):
            raise ChartError("a chart needs four 3D corners")
        c.setflags(write=False)
        object.__setattr__(self, "corners", c)
        jac = self.jacobian(*np.meshgrid([0.0, 1.0], [0.0, 1.0]))
        if np.min(jac) <= 1e-14 * max(1.0, float(np.max(jac))):
            raise ChartError("chart Jacobian degenerates")

    def __call__(self, x1, x2) -> np.ndarray:
        x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
        c = self.corners
        w = [(1 - x1) * (1 - x2), x1 * (1 - x2), x1 * x2, (1 - x1) * x2]
        return sum(c[i].reshape((3,) + (1,) * x1.ndim) * w[i] for i in range(4))

    def derivative(self, x1, x2) -> np.ndarray:
        """DT with shape (3, 2) + x.shape."""
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        c = self.corners
        sh = (3,) + (1,) * x1.ndim
        d1 = (c[1] - c[0]).reshape(sh) * (1 - x2) + (c[2] - c[3]).reshape(sh) * x2
        d2 = (c[3] - c[0]).reshape(sh) * (1 - x1) + (c[2] - c[1]).reshape(sh) * x1
        return np.stack([d1, d2], axis=1)

    def jacobian(self, x1, x2) -> np.ndarray:
        d = self.derivative(x1, x2)
        return np.linalg.norm(np.cross(d[:, 0], d[:, 1], axis=0), axis=0)

    def unit_normal(self) -> np.ndarray:
        d = self.derivative(0.5, 0.5)
        n = np.cross(d[:, 0], d[:, 1])
        return n / np.linalg.norm(n)

    @property
    def is_affine(self) -> bool:
        c = self.corners
        return bool(np.allclose(c[0] + c[2], c[1] + c[3], atol=1e-14 * max(1.0, np.abs(c).max())))

    def pseudo_inverse(self, x1, x2) -> np.ndarray:
        """DT^+ = (DT^T DT)^{-1} DT^T with shape (2, 3) + x.shape."""
        d = np.moveaxis(self.derivative(x1, x2), (0, 1), (-2, -1))
        g = np.swapaxes(d, -1, -2) @ d
        return np.moveaxis(np.linalg.solve(g, np.swapaxes(d, -1, -2)), (-2, -1), (0, 1))

    def inverse(self, x: np.ndarray, tol: float = 1e-14, maxiter: int = 50) -> np.ndarray:
        """Reference coordinates of physical points x (shape (3, n)) by Gauss-Newton."""
        x = np.asarray(x, dtype=float).reshape(3, -1)
        xi = np.full((2, x.shape[1]), 0.5)
        for _ in range(maxiter):
            r = x - self(xi[0], xi[1])
            step = np.einsum("ijn,jn->in", self.pseudo_inverse(xi[0], xi[1]), r)
            xi = xi + step
            if np.max(np.abs(step)) < tol:
                break
        return xi

    def edge_conormal(self, edge: int, sigma) -> tuple[np.ndarray, np.ndarray]:
        """Physical outward unit conormal and speed |dT/dsigma| along a reference edge."""
        sigma = np.asarray(sigma, dtype=float)
        x1, x2 = edge_point(edge, sigma)
        d = self.derivative(x1, x2)
        tx, ty = {1: (1, 0), 2: (0, 1), 3: (-1, 0), 4: (0, -1)}[edge]
        tangent = d[:, 0] * tx + d[:, 1] * ty
        speed = np.linalg.norm(tangent, axis=0)
        nu = np.cross(tangent, self.unit_normal().reshape((3,) + (1,) * sigma.ndim), axis=0) / speed
        return nu, speed


def piola_push(chart: BilinearChart, v: RTFunction | VectorField):
    """Physical field M(v) = DT v / J as functions of reference coordinates.

    Returns ``(value, surface_divergence)``: value(xi1, xi2) has shape
    (3, ...), surface_divergence(xi1, xi2) = div v / J.
    """
    from .fields import as_vector_field

    f = as_vector_field(v)

    def value(x1, x2):
        d = chart.derivative(x1, x2)
        w = f(x1, x2)
        return np.einsum("ij...,j...->i...", d, w) / chart.jacobian(x1, x2)

    def div(x1, x2):
        return f.divergence(x1, x2) / chart.jacobian(x1, x2)

    return value, div


def piola_pull(chart: BilinearChart, value: Callable, surface_divergence: Callable | None = None,
               p: int | None = None):
    """Reference field J DT^+ v(T(xi)) of a physical tangential field.

    ``value`` maps reference coordinates to physical vectors (3, ...).  With
    ``p`` the result is returned as the L2(K)-best RTFunction of order p,
    otherwise as a :class:`VectorField`.
    """

    def ref_value(x1, x2):
        return chart.jacobian(x1, x2) * np.einsum("ij...,j...->i...", chart.pseudo_inverse(x1, x2), value(x1, x2))

    def ref_div(x1, x2):
        if surface_divergence is None:
            raise ValueError("no surface divergence supplied")
        return chart.jacobian(x1, x2) * surface_divergence(x1, x2)

    field_ = VectorField(ref_value, ref_div)
    if p is None:
        return field_
    from .interp import _rt_coefficients_l2
    from .refelem import rt_mass_diagonal

    return RTFunction.from_vector(p, _rt_coefficients_l2(field_, p, 2 * p + 16) / rt_mass_diagonal(p))


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeUse:
    element: int
    local_edge: int
    reversed: bool  # traversal opposite to the owning element


@dataclass(frozen=True, eq=False)
class QuadMesh:
    surface: PiecewisePlaneSurface
    level: int
    nodes: np.ndarray
    elements: np.ndarray
    face_ids: np.ndarray
    parent: np.ndarray  # (patch, i, j) per element
    edges: np.ndarray  # (n_edges, 2) node pairs in owner traversal order
    edge_uses: tuple
    element_edges: np.ndarray  # (n_elements, 4) global edge index per local edge

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def charts(self) -> tuple:
        return tuple(BilinearChart(self.nodes[e]) for e in self.elements)

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return np.array([k for k, uses in enumerate(self.edge_uses) if len(uses) == 1], dtype=int)

    @cached_property
    def h(self) -> float:
        return float(max(self.diameters()))

    def diameters(self) -> np.ndarray:
        out = []
        for e in self.elements:
            c = self.nodes[e]
            out.append(max(np.linalg.norm(c[i] - c[j]) for i in range(4) for j in range(i + 1, 4)))
        return np.array(out)

    def inscribed_diameters(self) -> np.ndarray:
        """Diameter of the largest disk inside each (convex) element."""
        out = []
        for chart, e in zip(self.charts, self.elements):
            c = self.nodes[e]
            origin = c[0]
            d = chart.derivative(0.5, 0.5)
            ax1 = d[:, 0] / np.linalg.norm(d[:, 0])
            ax2 = np.cross(chart.unit_normal(), ax1)
            pts = np.array([[np.dot(x - origin, ax1), np.dot(x - origin, ax2)] for x in c])
            a_rows, b_rows = [], []
            for i in range(4):
                t = pts[(i + 1) % 4] - pts[i]
                n = np.array([t[1], -t[0]]) / np.linalg.norm(t)
                a_rows.append([n[0], n[1], 1.0])
                b_rows.append(float(n @ pts[i]))
            res = linprog([0.0, 0.0, -1.0], A_ub=np.array(a_rows), b_ub=np.array(b_rows),
                          bounds=[(None, None), (None, None), (0.0, None)], method="highs")
            out.append(2.0 * float(res.x[2]))
        return np.array(out)

    def quality(self) -> dict:
        """Shape-regularity, quasi-uniformity and chart derivative bounds."""
        hj = self.diameters()
        rho = self.inscribed_diameters()
        rule = gauss_legendre(4)
        x1, x2 = np.meshgrid(rule.points, rule.points, indexing="ij")
        jac_min, jac_max, dt_max = np.inf, 0.0, 0.0
        for chart in self.charts:
            j = chart.jacobian(x1, x2)
            jac_min = min(jac_min, float(j.min()))
            jac_max = max(jac_max, float(j.max()))
            dt_max = max(dt_max, float(np.abs(chart.derivative(x1, x2)).max()))
        return {
            "elements": self.n_elements,
            "h_max": float(hj.max()),
            "h_min": float(hj.min()),
            "shape_regularity": float(np.max(hj / rho)),
            "quasi_uniformity": float(hj.max() / hj.min()),
            "jacobian_min": jac_min,
            "jacobian_max": jac_max,
            "derivative_max": dt_max,
        }

    def shared_nodes(self, a: int, b: int) -> list[int]:
        return sorted(set(self.elements[a].tolist()) & set(self.elements[b].tolist()))

    @cached_property
    def node_elements(self) -> tuple:
        out = [[] for _ in range(len(self.nodes))]
        for k, e in enumerate(self.elements):
            for n in e:
                out[n].append(k)
        return tuple(tuple(x) for x in out)

    def locate(self, x: np.ndarray, face: int | None = None) -> tuple[int, np.ndarray]:
        """Element containing physical point x and its reference coordinates."""
        best = None
        for k, chart in enumerate(self.charts):
            if face is not None and self.face_ids[k] != face:
                continue
            xi = chart.inverse(np.asarray(x).reshape(3, 1))[:, 0]
            gap = float(np.max(np.maximum(np.maximum(-xi, xi - 1.0), 0.0)))
            resid = float(np.linalg.norm(chart(xi[0], xi[1]) - x))
            score = gap + resid
            if best is None or score < best[0]:
                best = (score, k, xi)
        if best is None or best[0] > 1e-9:
            raise ValueError(f"point {x} is not on the mesh")
        return best[1], best[2]


def build_mesh(surface: PiecewisePlaneSurface, level: int) -> QuadMesh:
    """Split every patch uniformly into 2^level x 2^level elements."""
    if level < 0:
        raise ValueError("refinement level must be >= 0")
    n = 2**level
    scale = max(surface.scale, 1.0)
    node_index: dict = {}
    nodes: list = []

    def node(x):
        key = tuple(np.round(np.asarray(x) / scale, 9).tolist())
        if key not in node_index:
            node_index[key] = len(nodes)
            nodes.append(np.asarray(x, dtype=float))
        return node_index[key]

    elements, faces, parent = [], [], []
    t = np.linspace(0.0, 1.0, n + 1)
    for k, quad in enumerate(surface.quads):
        chart = BilinearChart(surface.vertices[quad])
        grid = [[node(chart(t[i], t[j])) for j in range(n + 1)] for i in range(n + 1)]
        for j in range(n):
            for i in range(n):
                elements.append([grid[i][j], grid[i + 1][j], grid[i + 1][j + 1], grid[i][j + 1]])
                faces.append(int(surface.face_ids[k]))
                parent.append((k, i, j))
    elements = np.array(elements, dtype=int)
    edge_index: dict = {}
    edges, uses = [], []
    element_edges = np.zeros((len(elements), 4), dtype=int)
    for k, e in enumerate(elements):
        for le in EDGES:
            a, b = (int(e[c]) for c in LOCAL_EDGE_CORNERS[le])
            key = _edge_key(a, b)
            if key not in edge_index:
                edge_index[key] = len(edges)
                edges.append((a, b))
                uses.append([EdgeUse(k, le, False)])
            else:
                g = edge_index[key]
                if len(uses[g]) >= 2:
                    raise ConformityError(f"mesh edge {key} is shared by more than two elements")
                uses[g].append(EdgeUse(k, le, edges[g][0] != a))
            element_edges[k, le - 1] = edge_index[key]
    mesh = QuadMesh(
        surface=surface,
        level=level,
        nodes=np.array(nodes),
        elements=elements,
        face_ids=np.array(faces),
        parent=np.array(parent),
        edges=np.array(edges, dtype=int),
        edge_uses=tuple(tuple(u) for u in uses),
        element_edges=element_edges,
    )
    for arr in (mesh.nodes, mesh.elements, mesh.face_ids, mesh.parent, mesh.edges, mesh.element_edges):
        arr.setflags(write=False)
    _check_mesh(mesh)
    return mesh


def _check_mesh(mesh: QuadMesh) -> None:
    for g, uses in enumerate(mesh.edge_uses):
        if len(uses) == 1 and mesh.surface.closed:
            raise ConformityError(f"closed surface mesh has a free edge {tuple(mesh.edges[g])}")
        if len(uses) == 2 and not uses[1].reversed:
            raise ConformityError(f"elements {uses[0].element} and {uses[1].element} are inconsistently oriented")


# ---------------------------------------------------------------------------
# global RT space
# ---------------------------------------------------------------------------


def edge_dof_sign(m: int, reversed_: bool) -> float:
    """Sign relating a non-owner's local edge function of index m to the global one.

    The two outward normals are opposite, and L_m(1 - s) = (-1)^m L_m(s).
    """
    return float((-1) ** (m + 1)) if reversed_ else -1.0


@dataclass(frozen=True, eq=False)
class GlobalRTSpace:
    """Conforming RT space on a mesh; free dofs are numbered first."""

    mesh: QuadMesh
    p: int
    dof_map: np.ndarray  # (n_elements, n_local)
    signs: np.ndarray
    n_free: int
    n_full: int

    @property
    def n_local(self) -> int:
        return rt_dimension(self.p)

    @property
    def dimension(self) -> int:
        return self.n_free

    def restrict(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full)[: self.n_free]

    def extend(self, free: np.ndarray) -> np.ndarray:
        free = np.asarray(free)
        out = np.zeros(self.n_full, dtype=free.dtype)
        out[: self.n_free] = free
        return out

    def local_dofs(self, element: int, full: np.ndarray) -> np.ndarray:
        return self.signs[element] * np.asarray(full)[self.dof_map[element]]

    def local_function(self, element: int, full: np.ndarray) -> RTFunction:
        return RTFunction.from_vector(self.p, local_basis_matrix(self.p) @ self.local_dofs(element, full))

    def gather(self, local: np.ndarray, tol: float = CONFORMITY_TOLERANCE) -> np.ndarray:
        """Assemble a full coefficient vector from per-element local dofs.

        Every global dof must receive the same value from each element that
        touches it; disagreement beyond ``tol`` raises a conformity error.
        """
        local = np.asarray(local, dtype=float)
        full = np.zeros(self.n_full)
        seen = np.zeros(self.n_full, dtype=bool)
        worst = 0.0
        for k in range(self.mesh.n_elements):
            vals = self.signs[k] * local[k]
            for g, v in zip(self.dof_map[k], vals):
                if seen[g]:
                    worst = max(worst, abs(full[g] - v) / (1.0 + abs(v)))
                else:
                    full[g] = v
                    seen[g] = True
        if worst > tol:
            raise ConformityError(f"shared dofs disagree by {worst:.3e}")
        return full

    def mass_matrix(self, full: bool = False) -> np.ndarray:
        """L2(Gamma) Gram matrix of the global basis."""
        n = self.n_full if full else self.n_free
        out = np.zeros((self.n_full, self.n_full))
        rule = gauss_legendre(self.p + 3)
        x1, x2, w = rule.tensor()
        vals, _ = evaluate_rt_basis(self.p, x1, x2)
        for k, chart in enumerate(self.mesh.charts):
            d = chart.derivative(x1, x2)
            phys = np.einsum("iaq,naq->niq", d, vals)
            loc = np.einsum("niq,miq,q->nm", phys, phys, w / chart.jacobian(x1, x2))
            s = self.signs[k]
            idx = self.dof_map[k]
            out[np.ix_(idx, idx)] += s[:, None] * loc * s[None, :]
        return out[:n, :n]


def build_space(mesh: QuadMesh, p: int) -> GlobalRTSpace:
    if p < 1:
        raise ValueError("polynomial degree must be >= 1")
    n_bub = 2 * p * (p - 1)
    nloc = rt_dimension(p)
    boundary = set(mesh.boundary_edges.tolist())
    edge_base = {}
    counter = 0
    for g in range(len(mesh.edges)):
        if g not in boundary:
            edge_base[g] = counter
            counter += p
    bubble_base = {}
    for k in range(mesh.n_elements):
        bubble_base[k] = counter
        counter += n_bub
    n_free = counter
    for g in sorted(boundary):
        edge_base[g] = counter
        counter += p
    dof_map = np.zeros((mesh.n_elements, nloc), dtype=int)
    signs = np.ones((mesh.n_elements, nloc))
    for g, uses in enumerate(mesh.edge_uses):
        for rank, use in enumerate(uses):
            for m in range(p):
                col = (use.local_edge - 1) * p + m
                dof_map[use.element, col] = edge_base[g] + m
                if rank > 0:
                    signs[use.element, col] = edge_dof_sign(m, use.reversed)
    for k in range(mesh.n_elements):
        dof_map[k, 4 * p:] = bubble_base[k] + np.arange(n_bub)
    dof_map.setflags(write=False)
    signs.setflags(write=False)
    return GlobalRTSpace(mesh, p, dof_map, signs, n_free, counter)


def build_mesh_and_space(surface: PiecewisePlaneSurface, level: int, p: int) -> tuple[QuadMesh, GlobalRTSpace]:
    mesh = build_mesh(surface, level)
    return mesh, build_space(mesh, p)


# ---------------------------------------------------------------------------
# fields on the surface and global interpolation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalyticSurfaceField:
    """Tangential field given in physical coordinates: value(x) -> (3, ...)."""

    value: Callable
    surface_divergence: Callable

    def pullback(self, mesh: QuadMesh, element: int) -> VectorField:
        chart = mesh.charts[element]
        return piola_pull(chart, lambda x1, x2: self.value(chart(x1, x2)),
                          lambda x1, x2: self.surface_divergence(chart(x1, x2)))


@dataclass(frozen=True, eq=False)
class DiscreteSurfaceField:
    """A member of a global RT space, evaluable on any mesh nested in its own."""

    space: GlobalRTSpace
    coefficients: np.ndarray  # full length

    def pullback(self, mesh: QuadMesh, element: int) -> VectorField:
        own = self.space.mesh
        chart = mesh.charts[element]
        if mesh is own:
            return VectorField.from_rt(self.space.local_function(element, self.coefficients))
        host, _ = own.locate(chart(0.5, 0.5), face=int(mesh.face_ids[element]))
        host_chart = own.charts[host]
        local = self.space.local_function(host, self.coefficients)
        value, div = piola_push(host_chart, local)

        def host_xi(x1, x2):
            x = chart(x1, x2)
            xi = host_chart.inverse(x.reshape(3, -1))
            return xi[0].reshape(np.shape(x1)), xi[1].reshape(np.shape(x1))

        return piola_pull(chart, lambda x1, x2: value(*host_xi(x1, x2)), lambda x1, x2: div(*host_xi(x1, x2)))


def global_interpolate(field_, space: GlobalRTSpace,
                       settings: InterpolationSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Element-wise projection-based interpolation through Piola pullbacks.

    Returns the full coefficient vector (free dofs first, then the normal-trace
    dofs on the boundary of a screen).  Use ``space.restrict`` for X_hp.
    """
    inv = local_basis_inverse(space.p)
    local = np.zeros((space.mesh.n_elements, space.n_local))
    for k in range(space.mesh.n_elements):
        ref = field_.pullback(space.mesh, k)
        local[k] = inv @ interp_div_m12(ref, space.p, settings).total.vector
    return space.gather(local)


def evaluate_field(space: GlobalRTSpace, full: np.ndarray, element: int, x1, x2):
    """Physical values (3, n) and surface divergence (n,) on one element."""
    value, div = piola_push(space.mesh.charts[element], space.local_function(element, full))
    return value(x1, x2), div(x1, x2)


def normal_jumps(space: GlobalRTSpace, full: np.ndarray, samples_per_edge: int = 5,
                 rng: np.random.Generator | None = None) -> float:
    """Largest |v.nu_A + v.nu_B| over sample points on interior edges (physical quantities)."""
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for uses in space.mesh.edge_uses:
        if len(uses) != 2:
            continue
        a, b = uses
        s = rng.uniform(0.0, 1.0, samples_per_edge)
        sb = 1.0 - s if b.reversed else s
        flux = []
        for use, sig in ((a, s), (b, sb)):
            chart = space.mesh.charts[use.element]
            x1, x2 = edge_point(use.local_edge, sig)
            v, _ = evaluate_field(space, full, use.element, x1, x2)
            nu, _ = chart.edge_conormal(use.local_edge, sig)
            flux.append(np.sum(v * nu, axis=0))
        worst = max(worst, float(np.max(np.abs(flux[0] + flux[1]))))
    return worst


# ---------------------------------------------------------------------------
# discrete Helmholtz decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteHelmholtz:
    space: GlobalRTSpace
    w_basis: np.ndarray  # (n_free, dim W)
    v_basis: np.ndarray  # (n_free, dim V)
    gram: np.ndarray

    @property
    def dim_w(self) -> int:
        return self.w_basis.shape[1]

    @property
    def dim_v(self) -> int:
        return self.v_basis.shape[1]

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (v, w) with x = v + w, w in W_hp and v in its L2 complement."""
        basis = np.hstack([self.v_basis, self.w_basis])
        c = np.linalg.solve(basis, x)
        return self.v_basis @ c[: self.dim_v], self.w_basis @ c[self.dim_v:]


def _scalar_dofs(mesh: QuadMesh, p: int):
    """Continuous Q_p numbering: vertices, edge bubbles (p-1 per edge), interiors."""
    n_nodes = len(mesh.nodes)
    n_edge = len(mesh.edges)
    edge_base = n_nodes
    interior_base = n_nodes + n_edge * (p - 1)
    total = interior_base + mesh.n_elements * (p - 1) ** 2
    return edge_base, interior_base, total


def _local_scalar_basis(p: int) -> np.ndarray:
    """Columns: flattened (p+1)^2 coefficients of vertex, edge and interior functions on K."""
    lin = {0: np.array([0.5, -0.5]), 1: np.array([0.5, 0.5])}
    cols = []
    for cx, cy in CORNERS:
        c = np.zeros((p + 1, p + 1))
        c[:2, :2] = np.outer(lin[int(cx)], lin[int(cy)])
        cols.append(c.ravel())
    b = bubble_coefficients_1d(p)
    for e in EDGES:
        for i in range(b.shape[1]):
            ext = extend_edge(EdgePolynomial(e, b[:, i]), p, "linear")
            cols.append(ext.coefficients.ravel())
    sb = scalar_bubble_matrix(p)
    return np.hstack([np.array(cols).T, sb]) if sb.shape[1] else np.array(cols).T


def helmholtz_split(space: GlobalRTSpace) -> DiscreteHelmholtz:
    """Divergence-free subspace curl_Gamma S_hp and its L2 complement in X_hp."""
    mesh, p = space.mesh, space.p
    chi = mesh.surface.euler_characteristic()
    mesh_chi = len(mesh.nodes) - len(mesh.edges) + mesh.n_elements
    expected = 2 if mesh.surface.closed else 1
    if chi != expected or mesh_chi != expected:
        raise UnsupportedTopologyError(f"Euler characteristic {chi} does not match a {'sphere' if expected == 2 else 'disk'}")
    edge_base, interior_base, n_scalar = _scalar_dofs(mesh, p)
    local_scalar = _local_scalar_basis(p)
    rt_of_scalar = local_basis_inverse(p) @ curl_matrix(p) @ local_scalar
    n_loc_s = local_scalar.shape[1]
    # exclude scalar dofs on the screen boundary, or one vertex on a closed surface
    excluded = set()
    if mesh.surface.closed:
        excluded.add(0)
    else:
        for g in mesh.boundary_edges:
            a, b = mesh.edges[g]
            excluded.update([int(a), int(b)])
            excluded.update(edge_base + g * (p - 1) + np.arange(p - 1))
    kept = [i for i in range(n_scalar) if i not in excluded]
    col_of = {i: c for c, i in enumerate(kept)}
    w_full = np.zeros((space.n_full, len(kept)))
    written = np.zeros((space.n_full, len(kept)), dtype=bool)
    for k, elem in enumerate(mesh.elements):
        gdofs, gsigns = [], []
        for corner in range(4):
            gdofs.append(int(elem[corner]))
            gsigns.append(1.0)
        for le in EDGES:
            g = mesh.element_edges[k, le - 1]
            use = next(u for u in mesh.edge_uses[g] if u.element == k)
            owner = mesh.edge_uses[g][0].element == k
            for i in range(2, p + 1):
                gdofs.append(edge_base + g * (p - 1) + (i - 2))
                gsigns.append(1.0 if owner or not use.reversed else float((-1) ** i))
        for i in range((p - 1) ** 2):
            gdofs.append(interior_base + k * (p - 1) ** 2 + i)
            gsigns.append(1.0)
        assert len(gdofs) == n_loc_s
        rows = space.dof_map[k]
        for j, (gd, sg) in enumerate(zip(gdofs, gsigns)):
            if gd not in col_of:
                continue
            c = col_of[gd]
            vals = space.signs[k] * sg * rt_of_scalar[:, j]
            prev = w_full[rows, c]
            clash = written[rows, c] & (np.abs(prev - vals) > CONFORMITY_TOLERANCE)
            if np.any(clash):
                raise ConformityError("surface curls disagree on a shared edge")
            w_full[rows, c] = vals
            written[rows, c] = True
    if np.max(np.abs(w_full[space.n_free:]), initial=0.0) > CONFORMITY_TOLERANCE:
        raise ConformityError("surface curls have nonzero normal trace on the screen boundary")
    w = w_full[: space.n_free]
    gram = space.mass_matrix()
    v = sla.null_space(w.T @ gram)
    log.debug("helmholtz split: N=%d dim W=%d dim V=%d", space.n_free, w.shape[1], v.shape[1])
    return DiscreteHelmholtz(space, w, v, gram)


# ---------------------------------------------------------------------------
# Piola identities measured in physical quantities
# ---------------------------------------------------------------------------


def pairing_reference(phi: "TensorPolynomial", q: RTFunction) -> float:
    """<phi, div q>_{0,K}, exact in coefficients."""
    from .refelem import divergence

    return phi.l2_inner(divergence(q))


def pairing_physical(chart: BilinearChart, phi: "TensorPolynomial", q: RTFunction, points: int = 12) -> float:
    """<phi o T^-1, div_Gamma M(q)>_{0,T(K)} evaluated by integration by parts on the element.

    Uses the surface gradient (DT^+)^T grad phi, the pushed field DT q / J,
    the area element J and the physical outward conormal on the four sides.
    """
    rule = gauss_legendre(points)
    x1, x2, w = rule.tensor()
    grad_ref = np.stack([phi.derivative(0)(x1, x2), phi.derivative(1)(x1, x2)])
    surf_grad = np.einsum("aiq,aq->iq", chart.pseudo_inverse(x1, x2), grad_ref)
    value, _ = piola_push(chart, q)
    jac = chart.jacobian(x1, x2)
    volume = -float(np.sum(np.sum(surf_grad * value(x1, x2), axis=0) * jac * w))
    boundary = 0.0
    for e in EDGES:
        s = rule.points
        y1, y2 = edge_point(e, s)
        nu, speed = chart.edge_conormal(e, s)
        boundary += float(np.sum(phi(y1, y2) * np.sum(value(y1, y2) * nu, axis=0) * speed * rule.weights))
    return volume + boundary


def physical_flux(chart: BilinearChart, q: RTFunction, edge: int, points: int = 12) -> float:
    """Flux of M(q) through the mapped edge, with physical conormal and arc length."""
    rule = gauss_legendre(points)
    y1, y2 = edge_point(edge, rule.points)
    value, _ = piola_push(chart, q)
    nu, speed = chart.edge_conormal(edge, rule.points)
    return float(np.sum(np.sum(value(y1, y2) * nu, axis=0) * speed * rule.weights))


def physical_l2_norm(chart: BilinearChart, q: RTFunction, points: int = 12) -> float:
    rule = gauss_legendre(points)
    x1, x2, w = rule.tensor()
    value, _ = piola_push(chart, q)
    return float(np.sqrt(np.sum(np.sum(value(x1, x2) ** 2, axis=0) * chart.jacobian(x1, x2) * w)))


def planar_chart(corners_2d, origin=(0.0, 0.0, 0.0), axes=None) -> BilinearChart:
    """Bilinear chart of a planar quadrilateral given in 2D, placed in 3D by two orthonormal axes."""
    c = np.asarray(corners_2d, dtype=float)
    if axes is None:
        axes = (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    a1, a2 = (np.asarray(a, dtype=float) for a in axes)
    return BilinearChart(np.asarray(origin, float)[None, :] + c[:, :1] * a1[None, :] + c[:, 1:] * a2[None, :])
