import numpy as np
import pytest

from rtbem.fracform import scaled_square_norm_Hm12, expand, ip_Hm12_K
from rtbem.refelem import EDGES, RTFunction, TensorPolynomial, divergence, edge_flux, gauss_legendre, rt_dimension
from rtbem.surface import (
    AnalyticSurfaceField,
    BilinearChart,
    ChartError,
    ConformityError,
    DiscreteSurfaceField,
    PiecewisePlaneSurface,
    SurfaceError,
    UnsupportedTopologyError,
    build_mesh,
    build_mesh_and_space,
    build_space,
    evaluate_field,
    global_interpolate,
    helmholtz_split,
    normal_jumps,
    pairing_physical,
    pairing_reference,
    physical_flux,
    physical_l2_norm,
    piola_pull,
    piola_push,
    planar_chart,
    read_mesh_file,
    unit_cube,
    unit_square_screen,
    write_mesh_file,
)

DISTORTED = [[0, 0], [1.3, 0.1], [1.1, 1.2], [-0.1, 0.9]]


def count_free_dofs(mesh, p):
    """Independent count: p dofs per interior edge plus 2p(p-1) per element."""
    edges = {}
    for e in mesh.elements.tolist():
        for i in range(4):
            key = tuple(sorted((e[i], e[(i + 1) % 4])))
            edges[key] = edges.get(key, 0) + 1
    interior = sum(1 for c in edges.values() if c == 2)
    return p * interior + mesh.n_elements * 2 * p * (p - 1)


def annulus():
    """Eight quads around a square hole: not simply connected."""
    outer = [(0, 0), (1, 0), (2, 0), (3, 0), (3, 1), (3, 2), (3, 3), (2, 3), (1, 3), (0, 3), (0, 2), (0, 1)]
    inner = [(1, 1), (2, 1), (2, 2), (1, 2)]
    pts = outer + inner
    idx = {p: i for i, p in enumerate(pts)}
    quads = []
    for i in range(3):
        for j in range(3):
            if (i, j) == (1, 1):
                continue
            quads.append([idx[(i, j)], idx[(i + 1, j)], idx[(i + 1, j + 1)], idx[(i, j + 1)]])
    verts = np.array([[x, y, 0.0] for x, y in pts])
    return PiecewisePlaneSurface(verts, np.array(quads), np.arange(len(quads)), closed=False)


class TestMeshes:
    def test_screen_counts(self):
        mesh, space = build_mesh_and_space(unit_square_screen(), 1, 1)
        assert mesh.n_elements == 4
        assert len(mesh.edges) == 12
        assert len(mesh.boundary_edges) == 8
        assert space.n_free == 4 == count_free_dofs(mesh, 1)

    def test_cube_counts(self):
        mesh, space = build_mesh_and_space(unit_cube(), 0, 1)
        assert mesh.n_elements == 6
        assert space.n_free == 12 == count_free_dofs(mesh, 1)

    @pytest.mark.parametrize("surface,level,p", [("screen", 2, 2), ("cube", 1, 2), ("screen", 1, 3)])
    def test_counts_match_independent_formula(self, surface, level, p):
        s = unit_square_screen() if surface == "screen" else unit_cube()
        mesh, space = build_mesh_and_space(s, level, p)
        assert space.n_free == count_free_dofs(mesh, p)

    @pytest.mark.parametrize("surface", [unit_square_screen, unit_cube])
    def test_shape_regularity(self, surface):
        q = build_mesh(surface(), 1).quality()
        assert q["shape_regularity"] == pytest.approx(np.sqrt(2.0), rel=1e-8)
        assert q["quasi_uniformity"] == pytest.approx(1.0)

    def test_cube_normals_point_outward(self):
        s = unit_cube()
        centers = s.vertices[s.quads].mean(axis=1)
        assert np.all(np.sum(s.normals() * (centers - 0.5), axis=1) > 0)

    def test_euler_characteristic(self):
        assert unit_square_screen().euler_characteristic() == 1
        assert unit_cube().euler_characteristic() == 2

    def test_hanging_vertex_rejected(self):
        v = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (2, 0, 0), (2, 0.5, 0), (2, 1, 0), (1, 0.5, 0)]
        q = [[0, 1, 2, 3], [1, 4, 5, 7]]
        with pytest.raises(ConformityError):
            PiecewisePlaneSurface(np.array(v, float), np.array(q), np.array([0, 1]), closed=False)

    def test_closed_surface_with_free_edge_rejected(self):
        with pytest.raises(ConformityError):
            PiecewisePlaneSurface(unit_square_screen().vertices, unit_square_screen().quads, [0], closed=True)

    def test_inconsistent_orientation_rejected(self):
        v = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (2, 0, 0), (2, 1, 0)]
        q = [[0, 1, 2, 3], [1, 2, 5, 4]]
        with pytest.raises(ConformityError):
            PiecewisePlaneSurface(np.array(v, float), np.array(q), np.array([0, 1]), closed=False)

    def test_nonplanar_rejected(self):
        v = [(0, 0, 0), (1, 0, 0), (1, 1, 0.3), (0, 1, 0)]
        with pytest.raises(SurfaceError):
            PiecewisePlaneSurface(np.array(v, float), np.array([[0, 1, 2, 3]]), [0], closed=False)

    def test_mesh_file_round_trip(self, tmp_path):
        path = tmp_path / "cube.mesh"
        write_mesh_file(unit_cube(), path)
        back = read_mesh_file(path)
        assert back.closed
        assert np.array_equal(back.vertices, unit_cube().vertices)
        assert np.array_equal(back.quads, unit_cube().quads)

    def test_mesh_file_errors(self, tmp_path):
        path = tmp_path / "bad.mesh"
        path.write_text("surface open\nv 0 0\n")
        with pytest.raises(SurfaceError):
            read_mesh_file(path)
        path.write_text("v 0 0 0\n")
        with pytest.raises(SurfaceError):
            read_mesh_file(path)


class TestCharts:
    def test_degenerate_chart(self):
        with pytest.raises(ChartError):
            BilinearChart(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], float))

    def test_affine_detection(self):
        assert planar_chart([[0, 0], [1, 0], [1.2, 1], [0.2, 1]]).is_affine
        assert not planar_chart(DISTORTED).is_affine

    def test_inverse(self):
        chart = planar_chart(DISTORTED, (0.2, 0.1, -0.3))
        xi = np.array([[0.1, 0.7, 0.4], [0.9, 0.3, 0.5]])
        assert np.allclose(chart.inverse(chart(xi[0], xi[1])), xi, atol=1e-12)

    @pytest.mark.parametrize("h", [1.0, 0.5, 0.25])
    def test_affine_flux_preserved(self, h):
        chart = planar_chart([[0, 0], [h, 0], [h, h], [0, h]])
        q = RTFunction.from_vector(2, np.random.default_rng(0).standard_normal(12))
        for e in EDGES:
            assert physical_flux(chart, q, e) == pytest.approx(edge_flux(q, e), abs=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_pairing_identity_on_distorted_chart(self, seed):
        rng = np.random.default_rng(seed)
        ax = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        chart = planar_chart(DISTORTED, rng.standard_normal(3), (ax[:, 0], ax[:, 1]))
        phi = TensorPolynomial(rng.standard_normal((4, 4)))
        q = RTFunction.from_vector(3, rng.standard_normal(rt_dimension(3)))
        assert pairing_physical(chart, phi, q) == pytest.approx(pairing_reference(phi, q), abs=1e-12)
        for e in EDGES:
            assert physical_flux(chart, q, e) == pytest.approx(edge_flux(q, e), abs=1e-12)

    def test_pairing_matches_direct_physical_quadrature(self):
        # on an affine chart div_Gamma M(q) = div q / J is a polynomial, so integrate it directly
        chart = planar_chart([[0, 0], [2, 0], [2.5, 1.5], [0.5, 1.5]], (1, 2, 3))
        rng = np.random.default_rng(8)
        phi = TensorPolynomial(rng.standard_normal((3, 3)))
        q = RTFunction.from_vector(2, rng.standard_normal(12))
        _, div = piola_push(chart, q)
        x1, x2, w = gauss_legendre(10).tensor()
        direct = float(np.sum(phi(x1, x2) * div(x1, x2) * chart.jacobian(x1, x2) * w))
        assert pairing_physical(chart, phi, q) == pytest.approx(direct, abs=1e-12)

    def test_norm_equivalence(self):
        chart = planar_chart(DISTORTED)
        rng = np.random.default_rng(3)
        ratios = []
        for _ in range(30):
            q = RTFunction.from_vector(3, rng.standard_normal(rt_dimension(3)))
            ratios.append(physical_l2_norm(chart, q) / q.l2_norm())
        assert max(ratios) / min(ratios) <= 4.0

    def test_pull_inverts_push(self):
        chart = planar_chart(DISTORTED, (0, 0, 1))
        q = RTFunction.from_vector(2, np.random.default_rng(4).standard_normal(12))
        value, div = piola_push(chart, q)
        back = piola_pull(chart, value, div)
        x1, x2 = np.array([0.2, 0.6]), np.array([0.3, 0.9])
        assert np.allclose(back(x1, x2), q(x1, x2), atol=1e-13)
        assert np.allclose(back.divergence(x1, x2), divergence(q)(x1, x2), atol=1e-13)

    @pytest.mark.parametrize("h", [1.0, 0.5, 0.25])
    def test_divergence_norm_scaling(self, h):
        q = RTFunction.from_vector(3, np.random.default_rng(5).standard_normal(rt_dimension(3)))
        d = divergence(q)
        s = expand(d, "sine")
        ref = np.sqrt(ip_Hm12_K(s, s))
        # div of the pushed field on (0,h)^2 is div q(x/h) / h^2
        phys = scaled_square_norm_Hm12(lambda x, y: d(x / h, y / h) / h**2, h)
        ratio = ref / phys
        assert 0.5 <= ratio / np.sqrt(h) <= 2.0


class TestGlobalSpace:
    @pytest.mark.parametrize("surface,level,p", [("screen", 1, 2), ("cube", 0, 3), ("cube", 1, 1)])
    def test_basis_members_are_conforming(self, surface, level, p):
        s = unit_square_screen() if surface == "screen" else unit_cube()
        _, space = build_mesh_and_space(s, level, p)
        rng = np.random.default_rng(0)
        worst = 0.0
        for j in range(space.n_free):
            e = np.zeros(space.n_full)
            e[j] = 1.0
            worst = max(worst, normal_jumps(space, e, samples_per_edge=3, rng=rng))
        x = space.extend(rng.standard_normal(space.n_free))
        worst = max(worst, normal_jumps(space, x, samples_per_edge=200 // max(1, len(space.mesh.edges)) + 1, rng=rng))
        assert worst <= 1e-10

    def test_discrete_member_reproduced(self):
        _, space = build_mesh_and_space(unit_cube(), 0, 2)
        full = space.extend(np.random.default_rng(1).standard_normal(space.n_free))
        back = global_interpolate(DiscreteSurfaceField(space, full), space)
        assert np.max(np.abs(back - full)) <= 1e-9

    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_constant_field_reproduced(self, p):
        _, space = build_mesh_and_space(unit_square_screen(), 1, p)
        const = AnalyticSurfaceField(lambda x: np.stack([0.7 + 0 * x[0], -0.2 + 0 * x[0], 0 * x[0]]),
                                     lambda x: 0 * x[0])
        full = global_interpolate(const, space)
        x1, x2 = np.array([0.1, 0.5, 0.8]), np.array([0.3, 0.5, 0.9])
        for k in range(space.mesh.n_elements):
            v, d = evaluate_field(space, full, k, x1, x2)
            assert np.allclose(v, [[0.7] * 3, [-0.2] * 3, [0.0] * 3], atol=1e-12)
            assert np.allclose(d, 0.0, atol=1e-11)

    def test_smooth_field_error_decreases_with_p(self):
        field = AnalyticSurfaceField(
            lambda x: np.stack([np.sin(2 * x[1]) * np.cos(x[0]), np.exp(x[0]) * x[1], 0 * x[0]]),
            lambda x: -np.sin(2 * x[1]) * np.sin(x[0]) + np.exp(x[0]),
        )
        x1, x2, w = gauss_legendre(10).tensor()
        errors = []
        for p in (1, 2, 3, 4):
            mesh, space = build_mesh_and_space(unit_square_screen(), 1, p)
            full = global_interpolate(field, space)
            err = 0.0
            for k, chart in enumerate(mesh.charts):
                v, _ = evaluate_field(space, full, k, x1, x2)
                err += np.sum(np.sum((v - field.value(chart(x1, x2))) ** 2, axis=0) * chart.jacobian(x1, x2) * w)
            errors.append(np.sqrt(err))
        assert all(b < a for a, b in zip(errors, errors[1:]))

    def test_gather_detects_mismatch(self):
        _, space = build_mesh_and_space(unit_square_screen(), 1, 1)
        local = np.ones((space.mesh.n_elements, space.n_local))
        with pytest.raises(ConformityError):
            space.gather(local)

    def test_mass_matrix_spd(self):
        _, space = build_mesh_and_space(unit_cube(), 0, 2)
        m = space.mass_matrix()
        assert np.allclose(m, m.T, atol=1e-14)
        assert np.linalg.eigvalsh(m).min() > 0

    def test_invalid_degree(self):
        with pytest.raises(ValueError):
            build_space(build_mesh(unit_square_screen(), 0), 0)


class TestHelmholtz:
    def test_screen_dimensions(self):
        _, space = build_mesh_and_space(unit_square_screen(), 1, 1)
        h = helmholtz_split(space)
        assert (h.dim_w, h.dim_v) == (1, 3)

    def test_cube_dimensions(self):
        _, space = build_mesh_and_space(unit_cube(), 0, 1)
        h = helmholtz_split(space)
        assert (h.dim_w, h.dim_v) == (7, 5)

    @pytest.mark.parametrize("surface,level,p", [("screen", 1, 2), ("screen", 2, 1), ("cube", 0, 2), ("cube", 1, 1)])
    def test_split_properties(self, surface, level, p):
        s = unit_square_screen() if surface == "screen" else unit_cube()
        _, space = build_mesh_and_space(s, level, p)
        h = helmholtz_split(space)
        assert h.dim_w + h.dim_v == space.n_free
        assert np.linalg.matrix_rank(np.hstack([h.w_basis, h.v_basis])) == space.n_free
        x1, x2 = np.random.default_rng(0).uniform(size=(2, 20))
        for c in h.w_basis.T:
            full = space.extend(c)
            for k in range(space.mesh.n_elements):
                _, d = evaluate_field(space, full, k, x1, x2)
                assert np.max(np.abs(d)) <= 1e-11
        x = np.random.default_rng(1).standard_normal(space.n_free)
        v, w = h.split(x)
        assert np.max(np.abs(v + w - x)) <= 1e-9
        assert abs(v @ h.gram @ w) <= 1e-9 * (1 + np.linalg.norm(x) ** 2)

    def test_annulus_rejected(self):
        _, space = build_mesh_and_space(annulus(), 0, 1)
        with pytest.raises(UnsupportedTopologyError):
            helmholtz_split(space)
