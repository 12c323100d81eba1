"""Galerkin discretization of the electric field integral equation on X_hp.

The bilinear form is

    a(u, v) = <Psi_k div u, div v> - k^2 <Psi_k u, v>,
    Psi_k(r) = exp(i k r) / (4 pi r),

assembled pair by pair.  Element pairs touching each other are integrated
with regularizing coordinate transforms on [0,1]^4 (identical elements,
common edge, common vertex); all other pairs use tensor Gauss rules.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .refelem import CORNERS, evaluate_rt_basis, gauss_legendre, rt_dimension
from .surface import (
    DiscreteSurfaceField,
    GlobalRTSpace,
    build_mesh_and_space,
    global_interpolate,
)

log = logging.getLogger(__name__)

DENSE_LIMIT = 4000


class ConfigurationError(ValueError):
    """Invalid assembly or solver settings."""


@dataclass(frozen=True)
class WaveContext:
    """Incident plane wave E(x) = polarization * exp(i k direction . x)."""

    k: float
    direction: tuple = (0.0, 0.0, -1.0)
    polarization: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.k > 0:
            raise ConfigurationError("wave number must be positive")
        d = np.asarray(self.direction, dtype=float)
        e = np.asarray(self.polarization, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ConfigurationError("direction must be a unit vector")
        if abs(d @ e) > 1e-12 * max(1.0, np.linalg.norm(e)):
            raise ConfigurationError("polarization must be orthogonal to the direction")

    def field(self, x: np.ndarray) -> np.ndarray:
        """Incident field at points x (3, n) -> complex (3, n)."""
        phase = np.exp(1j * self.k * np.tensordot(np.asarray(self.direction, float), x, axes=1))
        return np.asarray(self.polarization, float)[:, None] * phase


@dataclass(frozen=True, eq=False)
class GalerkinSystem:
    space: GlobalRTSpace
    k: float
    matrix: np.ndarray
    rhs: np.ndarray | None
    div_block: np.ndarray
    vec_block: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def symmetry_defect(self) -> float:
        a = self.matrix
        scale = np.max(np.abs(a), initial=0.0)
        return 0.0 if scale == 0.0 else float(np.max(np.abs(a - a.T)) / scale)


@dataclass(frozen=True)
class SolveResult:
    coefficients: np.ndarray | None
    residual: float
    status: str
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def default_quad_order(p: int) -> int:
    """Gauss points per direction; p + 5 keeps the q -> q + 2 change below 1e-6."""
    return p + 5


def kernel(k: float, r: np.ndarray) -> np.ndarray:
    """exp(i k r) / (4 pi r)."""
    if k == 0.0:
        return 1.0 / (4.0 * np.pi * r)
    return np.exp(1j * k * r) / (4.0 * np.pi * r)


# ---------------------------------------------------------------------------
# singular quadrature on [0,1]^2 x [0,1]^2
# ---------------------------------------------------------------------------


def _gauss_nd(q: int, dim: int):
    rule = gauss_legendre(q)
    grids = np.meshgrid(*([rule.points] * dim), indexing="ij")
    w = rule.weights
    weights = w
    for _ in range(dim - 1):
        weights = np.multiply.outer(weights, w)
    return [g.ravel() for g in grids], weights.ravel()


@lru_cache(maxsize=None)
def identical_rule(q: int):
    """Points (xi, eta) and weights for a pair of coinciding elements."""
    (lam, a, t1, t2), w = _gauss_nd(q, 4)
    xs, ys, ws = [], [], []
    for s1 in (1, -1):
        for s2 in (1, -1):
            for tri in (0, 1):
                z1, z2 = (lam, lam * a) if tri == 0 else (lam * a, lam)
                xi1 = (1 - z1) * t1 + (z1 if s1 < 0 else 0.0)
                eta1 = (1 - z1) * t1 + (z1 if s1 > 0 else 0.0)
                xi2 = (1 - z2) * t2 + (z2 if s2 < 0 else 0.0)
                eta2 = (1 - z2) * t2 + (z2 if s2 > 0 else 0.0)
                xs.append(np.stack([xi1, xi2]))
                ys.append(np.stack([eta1, eta2]))
                ws.append(w * lam * (1 - z1) * (1 - z2))
    return _freeze_rule(xs, ys, ws)


@lru_cache(maxsize=None)
def common_edge_rule(q: int):
    """Canonical position: shared edge at xi2 = eta2 = 0 with matching xi1 = eta1."""
    (lam, a, b, t), w = _gauss_nd(q, 4)
    xs, ys, ws = [], [], []
    for s in (1, -1):
        for top in range(3):
            coords = [lam * a, lam * b]
            coords.insert(top, lam)
            z, xi2, eta2 = coords
            xi1 = (1 - z) * t + (z if s < 0 else 0.0)
            eta1 = (1 - z) * t + (z if s > 0 else 0.0)
            xs.append(np.stack([xi1, xi2]))
            ys.append(np.stack([eta1, eta2]))
            ws.append(w * lam**2 * (1 - z))
    return _freeze_rule(xs, ys, ws)


@lru_cache(maxsize=None)
def common_vertex_rule(q: int):
    """Canonical position: shared vertex at xi = eta = 0."""
    (lam, a, b, c), w = _gauss_nd(q, 4)
    xs, ys, ws = [], [], []
    for top in range(4):
        coords = [lam * a, lam * b, lam * c]
        coords.insert(top, lam)
        xs.append(np.stack(coords[:2]))
        ys.append(np.stack(coords[2:]))
        ws.append(w * lam**3)
    return _freeze_rule(xs, ys, ws)


def _freeze_rule(xs, ys, ws):
    x = np.concatenate(xs, axis=1)
    y = np.concatenate(ys, axis=1)
    w = np.concatenate(ws)
    for arr in (x, y, w):
        arr.setflags(write=False)
    return x, y, w


def _orientation(p0: int, p1: int, p3: int):
    """Affine symmetry R(zeta) = P0 + (P1 - P0) zeta1 + (P3 - P0) zeta2 of K."""
    c = np.asarray(CORNERS)
    origin = c[p0]
    mat = np.stack([c[p1] - origin, c[p3] - origin], axis=1)
    return lambda z: origin[:, None] + mat @ z


def _corner_of(element_nodes, node: int) -> int:
    return int(np.flatnonzero(np.asarray(element_nodes) == node)[0])


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


@dataclass
class _ElementData:
    points: np.ndarray  # (3, nq) physical quadrature points
    vec: np.ndarray  # (nloc, 3, nq) DT phi (Jacobians cancel against dS)
    div: np.ndarray  # (nloc, nq)
    weights: np.ndarray


def _element_data(space: GlobalRTSpace, q: int) -> list:
    rule = gauss_legendre(q)
    x1, x2, w = rule.tensor()
    vals, divs = evaluate_rt_basis(space.p, x1, x2)
    out = []
    for chart in space.mesh.charts:
        d = chart.derivative(x1, x2)
        out.append(_ElementData(chart(x1, x2), _push(d, vals), divs, w))
    return out


@lru_cache(maxsize=256)
def _oriented_basis(p: int, kind: str, q: int, orient_a: tuple, orient_b: tuple):
    """Singular rule mapped by two square symmetries, with the basis evaluated on both sides."""
    rule = {"identical": identical_rule, "edge": common_edge_rule, "vertex": common_vertex_rule}[kind](q)
    zx, zy, w = rule
    xi = _orientation(*orient_a)(zx) if orient_a else zx
    eta = _orientation(*orient_b)(zy) if orient_b else zy
    va, da = evaluate_rt_basis(p, xi[0], xi[1])
    vb, db = evaluate_rt_basis(p, eta[0], eta[1])
    return xi, eta, w, va, da, vb, db


def _pair_blocks(space: GlobalRTSpace, a: int, b: int, kind: str, q: int, k: float):
    orient_a, orient_b = _pair_orientation(space, a, b, kind)
    xi, eta, w, va, da, vb, db = _oriented_basis(space.p, kind, q, orient_a, orient_b)
    ca, cb = space.mesh.charts[a], space.mesh.charts[b]
    fa = _push(ca.derivative(xi[0], xi[1]), va)
    fb = _push(cb.derivative(eta[0], eta[1]), vb)
    r = np.linalg.norm(ca(xi[0], xi[1]) - cb(eta[0], eta[1]), axis=0)
    g = kernel(k, r) * w
    div_blk = (da * g) @ db.T
    vec_blk = (fa * g).reshape(len(fa), -1) @ fb.reshape(len(fb), -1).T
    return div_blk, vec_blk


def _push(d: np.ndarray, v: np.ndarray) -> np.ndarray:
    """DT v for DT of shape (3, 2, nq) and v of shape (n, 2, nq)."""
    return d[None, :, 0, :] * v[:, None, 0, :] + d[None, :, 1, :] * v[:, None, 1, :]


def classify_pair(space: GlobalRTSpace, a: int, b: int) -> str:
    if a == b:
        return "identical"
    shared = space.mesh.shared_nodes(a, b)
    return {0: "regular", 1: "vertex", 2: "edge"}.get(len(shared), "invalid")


def _pair_orientation(space: GlobalRTSpace, a: int, b: int, kind: str):
    """Corner triples (P0, P1, P3) moving the shared entity to its canonical position."""
    if kind == "identical":
        return (), ()
    mesh = space.mesh
    ea, eb = mesh.elements[a], mesh.elements[b]
    shared = mesh.shared_nodes(a, b)
    if kind == "edge":
        n0, n1 = shared
        ia, ja = _corner_of(ea, n0), _corner_of(ea, n1)
        ib, jb = _corner_of(eb, n0), _corner_of(eb, n1)
        ka = ({(ia + 1) % 4, (ia + 3) % 4} - {ja}).pop()
        kb = ({(ib + 1) % 4, (ib + 3) % 4} - {jb}).pop()
        return (ia, ja, ka), (ib, jb, kb)
    (n0,) = shared
    ia, ib = _corner_of(ea, n0), _corner_of(eb, n0)
    return (ia, (ia + 1) % 4, (ia + 3) % 4), (ib, (ib + 1) % 4, (ib + 3) % 4)


def assemble_blocks(space: GlobalRTSpace, k: float, quad_order: int | None = None):
    """Return (A_div, A_vec, metadata) on the free dofs, for any k >= 0."""
    p = space.p
    q = default_quad_order(p) if quad_order is None else int(quad_order)
    if q < p + 1:
        raise ConfigurationError(f"quadrature order {q} is below p + 1 = {p + 1}")
    if k < 0:
        raise ConfigurationError("wave number must be non-negative")
    mesh = space.mesh
    ne = mesh.n_elements
    nloc = rt_dimension(p)
    data = _element_data(space, q)
    div_full = np.zeros((space.n_full, space.n_full), dtype=complex)
    vec_full = np.zeros_like(div_full)
    counts = {"identical": 0, "edge": 0, "vertex": 0, "regular": 0}
    start = time.perf_counter()
    for a in range(ne):
        da = data[a]
        sa, ia = space.signs[a], space.dof_map[a]
        for b in range(ne):
            kind = classify_pair(space, a, b)
            if kind == "invalid":
                raise ConfigurationError(f"elements {a} and {b} share an invalid node set")
            counts[kind] += 1
            if kind == "regular":
                db = data[b]
                diff = da.points[:, :, None] - db.points[:, None, :]
                g = kernel(k, np.linalg.norm(diff, axis=0)) * np.outer(da.weights, db.weights)
                div_blk = da.div @ g @ db.div.T
                vec_blk = sum(da.vec[:, i] @ g @ db.vec[:, i].T for i in range(3))
            else:
                div_blk, vec_blk = _pair_blocks(space, a, b, kind, q, k)
            sb, ib = space.signs[b], space.dof_map[b]
            scale = np.outer(sa, sb)
            div_full[np.ix_(ia, ib)] += scale * div_blk
            vec_full[np.ix_(ia, ib)] += scale * vec_blk
    elapsed = time.perf_counter() - start
    n = space.n_free
    meta = {"quad_order": q, "pairs": counts, "assembly_seconds": elapsed, "local_size": nloc}
    log.info("assembled N=%d (p=%d, %d elements, q=%d) in %.2fs", n, p, ne, q, elapsed)
    return div_full[:n, :n], vec_full[:n, :n], meta


def rhs_plane_wave(space: GlobalRTSpace, wave: WaveContext, quad_order: int | None = None) -> np.ndarray:
    """b_m = int_Gamma E_inc . phi_m dS (only the tangential part of E_inc contributes)."""
    q = (default_quad_order(space.p) if quad_order is None else int(quad_order)) + 2
    rule = gauss_legendre(q)
    x1, x2, w = rule.tensor()
    vals, _ = evaluate_rt_basis(space.p, x1, x2)
    out = np.zeros(space.n_full, dtype=complex)
    for j, chart in enumerate(space.mesh.charts):
        phys = _push(chart.derivative(x1, x2), vals)
        e = wave.field(chart(x1, x2))
        loc = np.einsum("iq,niq,q->n", e, phys, w)
        np.add.at(out, space.dof_map[j], space.signs[j] * loc)
    return out[: space.n_free]


def assemble(space: GlobalRTSpace, wave: WaveContext, quad_order: int | None = None) -> GalerkinSystem:
    div_blk, vec_blk, meta = assemble_blocks(space, wave.k, quad_order)
    matrix = div_blk - wave.k**2 * vec_blk
    rhs = rhs_plane_wave(space, wave, quad_order)
    return GalerkinSystem(space, wave.k, matrix, rhs, div_blk, vec_blk, meta)


def solve(system: GalerkinSystem, rhs: np.ndarray | None = None, dense_limit: int = DENSE_LIMIT) -> SolveResult:
    """Pivoted LU solve; singular or oversized systems are reported, not raised."""
    b = system.rhs if rhs is None else np.asarray(rhs)
    if b is None:
        raise ConfigurationError("no right-hand side")
    n = system.size
    if n > dense_limit:
        return SolveResult(None, float("nan"), "too-large", f"N={n} exceeds the dense limit {dense_limit}")
    if n == 0:
        return SolveResult(np.zeros(0, dtype=complex), 0.0, "ok")
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            lu = sla.lu_factor(system.matrix, check_finite=True)
            x = sla.lu_solve(lu, b)
        except (np.linalg.LinAlgError, sla.LinAlgWarning, ValueError) as exc:
            return SolveResult(None, float("nan"), "singular", str(exc))
    bn = np.linalg.norm(b)
    res = float(np.linalg.norm(system.matrix @ x - b) / (bn if bn > 0 else 1.0))
    if not np.all(np.isfinite(x)):
        return SolveResult(None, res, "singular", "non-finite solution")
    return SolveResult(x, res, "ok")


def manufactured_recovery(system: GalerkinSystem, rng: np.random.Generator) -> float:
    """Relative error recovering a random complex c from b = A c."""
    n = system.size
    c = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    result = solve(system, system.matrix @ c)
    if not result.ok:
        return float("inf")
    return float(np.linalg.norm(result.coefficients - c) / np.linalg.norm(c))


def energy_gram(space: GlobalRTSpace, quad_order: int | None = None) -> np.ndarray:
    """G = <Psi_0 div e, div e> + <Psi_0 e, e> as a real symmetric matrix."""
    div_blk, vec_blk, _ = assemble_blocks(space, 0.0, quad_order)
    g = (div_blk + vec_blk).real
    return 0.5 * (g + g.T)


def energy_surrogate(e: np.ndarray, gram: np.ndarray) -> float:
    e = np.asarray(e)
    val = float(np.real(np.conj(e) @ gram @ e))
    return float(np.sqrt(max(val, 0.0)))


# ---------------------------------------------------------------------------
# convergence study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceRow:
    level: int
    p: int
    n: int
    h: float
    k: float
    residual: float
    difference_to_finest: float
    assembly_seconds: float
    symmetry_defect: float
    status: str


def prolong(coarse: GlobalRTSpace, free: np.ndarray, fine: GlobalRTSpace) -> np.ndarray:
    """Express a coarse X_hp member in a nested fine space (free coefficients)."""
    full = coarse.extend(free)
    parts = []
    for comp in (full.real, full.imag):
        parts.append(fine.restrict(global_interpolate(DiscreteSurfaceField(coarse, comp), fine)))
    return parts[0] + 1j * parts[1]


def convergence_study(surface, chain, wave: WaveContext, quad_order: int | None = None) -> list[ConvergenceRow]:
    """Solve along a nested (level, p) chain and measure distances to the finest solution."""
    results = []
    for level, p in chain:
        _, space = build_mesh_and_space(surface, level, p)
        system = assemble(space, wave, quad_order)
        sol = solve(system)
        results.append((level, p, space, system, sol))
    _, _, fine_space, _, fine_sol = results[-1]
    gram = energy_gram(fine_space, quad_order)
    rows = []
    for level, p, space, system, sol in results:
        if sol.ok and fine_sol.ok:
            diff = fine_sol.coefficients - prolong(space, sol.coefficients, fine_space) if space is not fine_space \
                else np.zeros_like(fine_sol.coefficients)
            dist = energy_surrogate(diff, gram)
        else:
            dist = float("nan")
        rows.append(ConvergenceRow(level, p, space.n_free, space.mesh.h, wave.k, sol.residual, dist,
                                   system.metadata["assembly_seconds"], system.symmetry_defect(), sol.status))
    return rows
