import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtbem.fracform import (
    EdgeModeSpectrum,
    KindMismatchError,
    ModeSpectrum,
    ResolutionError,
    expand,
    expand_edge,
    fd_oracle,
    inner_product,
    ip_Hm12_K,
    ip_tildeH12_edge,
    ip_tildeH12_K,
    ip_tildeHm12_K,
    polynomial_gram,
    synthesize,
    weight_table,
)
from rtbem.refelem import EdgePolynomial, TensorPolynomial

SQ2 = np.sqrt(2.0)
LAM11 = np.pi * SQ2


def sine11(x, y):
    return 2.0 * np.sin(np.pi * x) * np.sin(np.pi * y)


def cos10(x, y):
    return SQ2 * np.cos(np.pi * x) + 0.0 * y


def edge1(s):
    return SQ2 * np.sin(np.pi * s)


def one(x, y):
    return np.ones(np.broadcast(x, y).shape)


# Values of the finite-difference oracle at n = 16, 32, 64, computed once
# from fd_oracle and frozen; they converge to the separated-variable weights.
FROZEN_ORACLE = {
    "Hm12_K": (0.22324142159667787, 0.22456650790449087, 0.22490382463588918),
    "tildeH12_K": (4.479455438187738, 4.453023780488682, 4.446345017115476),
    "tildeHm12_K": (0.3160943854848513, 0.31686343795608046, 0.31705813402853716),
    "tildeH12_edge": (3.1636120283064173, 3.1559336932353936, 3.1539957271999413),
}


def richardson(values):
    """Second-order extrapolation from the two finest grids."""
    return (4.0 * values[2] - values[1]) / 3.0


class TestExpand:
    def test_constant_in_cosine_modes(self):
        s = expand(one, "cosine", 8)
        assert s.coefficients[0, 0] == pytest.approx(1.0, abs=1e-13)
        rest = s.coefficients.copy()
        rest[0, 0] = 0.0
        assert np.max(np.abs(rest)) <= 1e-12

    def test_single_sine_mode(self):
        s = expand(sine11, "sine", 8)
        assert s.coefficients[0, 0] == pytest.approx(1.0, abs=1e-12)
        rest = s.coefficients.copy()
        rest[0, 0] = 0.0
        assert np.max(np.abs(rest)) <= 1e-12

    def test_parseval_defect_of_linear_function(self):
        # Analytic sine series: xi1 -> sqrt2 (-1)^(m+1)/(m pi), 1 -> sqrt2 (1-(-1)^n)/(n pi).
        m = np.arange(1, 17)
        a = 2.0 / (m * np.pi) ** 2
        b = 2.0 * (1 - (-1.0) ** m) ** 2 / (m * np.pi) ** 2
        expected_defect = 1.0 / 3.0 - a.sum() * b.sum()
        f = TensorPolynomial.from_power({(1, 0): 1.0})
        defect = 1.0 / 3.0 - expand(f, "sine", 16).l2_norm_squared()
        assert defect > 0
        assert defect == pytest.approx(expected_defect, rel=1e-10)

    def test_polynomial_and_sampled_paths_agree(self):
        f = TensorPolynomial(np.random.default_rng(1).standard_normal((5, 4)))
        a = expand(f, "cosine", 12).coefficients
        b = expand(lambda x, y: f(x, y), "cosine", 12).coefficients
        assert np.allclose(a, b, atol=1e-12)

    def test_insufficient_points(self):
        with pytest.raises(ResolutionError):
            expand(sine11, "sine", 16, points=20)

    def test_synthesis_inverts_expansion(self):
        s = expand(sine11, "sine", 4)
        assert synthesize(s)(0.3, 0.6) == pytest.approx(sine11(0.3, 0.6), abs=1e-12)


class TestWeights:
    def test_tildeH12_mode11(self):
        s = expand(sine11, "sine", 4)
        value = ip_tildeH12_K(s, s)
        assert value == pytest.approx(LAM11 / np.tanh(LAM11), rel=1e-12)
        assert value == pytest.approx(richardson(FROZEN_ORACLE["tildeH12_K"]), rel=1e-3)

    def test_Hm12_mode11(self):
        s = expand(sine11, "sine", 4)
        value = ip_Hm12_K(s, s)
        assert value == pytest.approx(np.tanh(LAM11) / LAM11, rel=1e-12)
        assert value == pytest.approx(0.2250, abs=5e-5)
        assert value == pytest.approx(richardson(FROZEN_ORACLE["Hm12_K"]), rel=1e-3)

    def test_tildeHm12_mode10(self):
        s = expand(cos10, "cosine", 4)
        value = ip_tildeHm12_K(s, s)
        assert value == pytest.approx(np.tanh(np.pi) / np.pi, rel=1e-12)
        assert value == pytest.approx(richardson(FROZEN_ORACLE["tildeHm12_K"]), rel=1e-3)

    def test_edge_mode1(self):
        s = expand_edge(edge1, 1, 4)
        value = ip_tildeH12_edge(s, s)
        assert value == pytest.approx(np.pi / np.tanh(np.pi), rel=1e-12)
        assert value == pytest.approx(3.1534, abs=1e-4)
        assert value == pytest.approx(richardson(FROZEN_ORACLE["tildeH12_edge"]), rel=1e-3)

    def test_constant_has_unit_norm(self):
        assert inner_product("tildeHm12_K", one, one) == pytest.approx(1.0, abs=1e-12)

    def test_duality_of_weights(self):
        a = weight_table("tildeH12_K", 32).weights
        b = weight_table("Hm12_K", 32).weights
        assert np.allclose(a * b, 1.0, rtol=0, atol=1e-14)

    def test_Hm12_weights_below_one(self):
        assert np.all(weight_table("Hm12_K", 64).weights < 1.0)

    def test_Hm12_norm_below_l2(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            s = ModeSpectrum("sine", rng.standard_normal((16, 16)))
            assert ip_Hm12_K(s, s) <= s.l2_norm_squared()

    def test_orthogonal_modes(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[0, 1] = b[2, 0] = 1.0
        for ip, kind in ((ip_tildeH12_K, "sine"), (ip_Hm12_K, "sine"), (ip_tildeHm12_K, "cosine")):
            assert ip(ModeSpectrum(kind, a), ModeSpectrum(kind, b)) == 0.0
        assert ip_tildeH12_edge(EdgeModeSpectrum(1, [1, 0]), EdgeModeSpectrum(1, [0, 1])) == 0.0

    def test_kind_mismatch(self):
        s = ModeSpectrum("sine", np.eye(3))
        c = ModeSpectrum("cosine", np.eye(3))
        with pytest.raises(KindMismatchError):
            ip_tildeHm12_K(s, s)
        with pytest.raises(KindMismatchError):
            ip_Hm12_K(s, c)
        with pytest.raises(KindMismatchError):
            ip_tildeH12_edge(s, s)

    def test_bilinearity(self):
        s = expand(sine11, "sine", 4)
        t = ModeSpectrum("sine", 2.0 * s.coefficients)
        assert ip_tildeH12_K(t, s) == pytest.approx(2.0 * ip_tildeH12_K(s, s), rel=1e-14)


spectra = st.integers(1, 8).flatmap(
    lambda n: st.tuples(
        st.sampled_from(["tildeH12_K", "Hm12_K", "tildeHm12_K"]),
        st.lists(st.floats(-10, 10, allow_nan=False), min_size=(n + 1) ** 2, max_size=(n + 1) ** 2),
        st.lists(st.floats(-10, 10, allow_nan=False), min_size=(n + 1) ** 2, max_size=(n + 1) ** 2),
    ).map(lambda t: (n, *t))
)


@settings(max_examples=60, deadline=None)
@given(spectra)
def test_symmetric_positive_definite(data):
    n, kind, a, b = data
    mode = "cosine" if kind == "tildeHm12_K" else "sine"
    size = n + 1 if mode == "cosine" else n
    u = ModeSpectrum(mode, np.array(a[: size * size]).reshape(size, size))
    v = ModeSpectrum(mode, np.array(b[: size * size]).reshape(size, size))
    ip = {"tildeH12_K": ip_tildeH12_K, "Hm12_K": ip_Hm12_K, "tildeHm12_K": ip_tildeHm12_K}[kind]
    assert ip(u, v) == pytest.approx(ip(v, u), rel=1e-12, abs=1e-12)
    if u.l2_norm_squared() > 0:
        assert ip(u, u) > 0


@pytest.mark.parametrize("kind", ["tildeH12_K", "Hm12_K", "tildeHm12_K"])
def test_polynomial_grams_are_spd(kind):
    g = polynomial_gram(kind, 5, 32)
    assert np.allclose(g, g.T, atol=1e-12)
    assert np.linalg.eigvalsh(g).min() > 0


class TestMeanReduction:
    @pytest.mark.parametrize("seed", range(5))
    def test_pairing_with_one_is_the_integral(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(10):
            d = rng.integers(0, 11, size=2)
            u = TensorPolynomial(rng.standard_normal((d[0] + 1, d[1] + 1)))
            value = inner_product("tildeHm12_K", u, TensorPolynomial.constant(1.0))
            assert abs(value - u.integral()) <= 1e-10 * (1 + u.l2_norm())


class TestOracle:
    @pytest.mark.parametrize("kind,u", [
        ("Hm12_K", sine11), ("tildeH12_K", sine11), ("tildeHm12_K", cos10), ("tildeH12_edge", edge1),
    ])
    def test_frozen_values_reproduce(self, kind, u):
        assert fd_oracle(kind, u, u, 16) == pytest.approx(FROZEN_ORACLE[kind][0], rel=1e-8)

    def test_Hm12_n32_within_five_percent(self):
        assert fd_oracle("Hm12_K", sine11, sine11, 32) == pytest.approx(0.2250, rel=0.05)

    @pytest.mark.parametrize("n", [8, 16, 24])
    def test_constant_is_exact(self, n):
        assert fd_oracle("tildeHm12_K", one, one, n) == pytest.approx(1.0, rel=0.02)

    def test_edge_n64(self):
        assert fd_oracle("tildeH12_edge", edge1, edge1, 64) == pytest.approx(3.1534, rel=0.05)

    @pytest.mark.parametrize("kind", sorted(FROZEN_ORACLE))
    def test_second_order_convergence(self, kind):
        v = FROZEN_ORACLE[kind]
        spectral = {
            "Hm12_K": np.tanh(LAM11) / LAM11,
            "tildeH12_K": LAM11 / np.tanh(LAM11),
            "tildeHm12_K": np.tanh(np.pi) / np.pi,
            "tildeH12_edge": np.pi / np.tanh(np.pi),
        }[kind]
        err = [abs(x - spectral) for x in v]
        assert err[0] > err[1] > err[2]
        assert 3.0 < err[0] / err[1] < 5.0
        assert 3.0 < err[1] / err[2] < 5.0

    def test_oracle_is_symmetric(self):
        f = lambda x, y: x * (1 - x) * y
        g = lambda x, y: np.cos(x + 2 * y)
        assert fd_oracle("Hm12_K", f, g, 12) == pytest.approx(fd_oracle("Hm12_K", g, f, 12), rel=1e-7)

    def test_small_grid_rejected(self):
        with pytest.raises(ValueError):
            fd_oracle("Hm12_K", sine11, sine11, 4)


class TestTruncation:
    """Doubling the truncation from 32 to 64 modes.

    Sine and cosine series of generic polynomials converge algebraically,
    so the relative change is far above 1e-6 (see the decisions log).  The
    faithful test is kept as a strict expected failure; the decay test
    below records what does hold.
    """

    @staticmethod
    def relative_changes(kind, seed=0, count=5):
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(count):
            u = TensorPolynomial(rng.standard_normal((11, 11)))
            v = TensorPolynomial(rng.standard_normal((11, 11)))
            a = inner_product(kind, u, v, 32)
            b = inner_product(kind, u, v, 64)
            out.append(abs(a - b) / max(abs(b), 1e-300))
        return out

    @pytest.mark.xfail(strict=True, reason="mode series of generic polynomials converge algebraically")
    @pytest.mark.parametrize("kind", ["tildeH12_K", "Hm12_K", "tildeHm12_K"])
    def test_doubling_changes_below_1e6(self, kind):
        assert max(self.relative_changes(kind)) <= 1e-6

    @staticmethod
    def decay_rates(kind, u):
        vals = [inner_product(kind, u, u, m) for m in (16, 32, 64, 128)]
        d = np.abs(np.diff(vals))
        return np.log2(d[:-1] / d[1:])

    @pytest.mark.parametrize("kind,order", [("Hm12_K", 1.7), ("tildeHm12_K", 3.5)])
    def test_generic_changes_decay_algebraically(self, kind, order):
        u = TensorPolynomial(np.random.default_rng(2).standard_normal((6, 6)))
        assert np.all(self.decay_rates(kind, u) >= order)

    @pytest.mark.parametrize("kind,order", [("tildeH12_K", 3.5), ("Hm12_K", 5.5), ("tildeHm12_K", 3.5)])
    def test_boundary_vanishing_changes_decay_faster(self, kind, order):
        b = TensorPolynomial.from_power({(1, 1): 1, (2, 1): -1, (1, 2): -1, (2, 2): 1})
        q = TensorPolynomial(np.random.default_rng(0).standard_normal((4, 4)))
        assert np.all(self.decay_rates(kind, lambda x, y: b(x, y) * q(x, y)) >= order)

    def test_tildeH12_diverges_for_nonzero_traces(self):
        u = TensorPolynomial.constant(1.0)
        vals = [inner_product("tildeH12_K", u, u, m) for m in (16, 32, 64)]
        assert vals[0] < vals[1] < vals[2]

    def test_edge_projection_of_bubble_reproduces(self):
        from rtbem.interp import project_edge

        # L4 - L2 vanishes at both endpoints
        bubble = EdgePolynomial(1, np.array([0.0, 0.0, -1.0, 0.0, 1.0]))
        assert bubble.vanishes_at_endpoints()
        out = project_edge(expand_edge(bubble, 1), 4)
        assert np.allclose(out.coefficients[: len(bubble.coefficients)], bubble.coefficients, atol=1e-10)
