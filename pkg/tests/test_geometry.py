import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dislocq.errors import DomainError, PreconditionError
from dislocq.geometry import (
    X_SWITCH,
    HeisenbergChart,
    _hyperbolic_f_closed,
    _hyperbolic_f_series,
    affine_frame,
    burgers_circuit,
    dislocation_density,
    dislocation_flux,
    gaussian_curvature,
    heisenberg_frame,
    heisenberg_frame_in_chart,
    heisenberg_normal_chart,
    hyperbolic_f,
    hyperbolic_metric,
    load_curve,
    MaterialFrame,
    square_circuit,
    square_triangulation,
)

coords = st.floats(-3.0, 3.0, allow_nan=False)


@pytest.fixture(scope="module")
def chart():
    return heisenberg_normal_chart(0.0)


class TestFrames:
    def test_affine_identity_at_origin(self):
        f = affine_frame([0.0, 0.0])
        np.testing.assert_array_equal(f.frame, np.eye(2))
        assert f.structure[1, 0, 1] == 1.0
        mask = np.ones_like(f.structure, dtype=bool)
        mask[1, 0, 1] = mask[1, 1, 0] = False
        assert not f.structure[mask].any()

    def test_affine_at_one(self):
        f = affine_frame([1.0, 0.0])
        assert f.frame[1, 1] == pytest.approx(2.718282, abs=1e-6)
        assert f.coframe[1, 1] == pytest.approx(0.367879, abs=1e-6)

    @given(coords, coords)
    def test_affine_duality(self, a, b):
        f = affine_frame([a, b])
        assert np.abs(f.coframe @ f.frame - np.eye(2)).max() < 1e-12
        assert np.linalg.det(f.frame) > 0

    def test_heisenberg_examples(self):
        f = heisenberg_frame([0.0, 0.0, 0.0], 0.0)
        np.testing.assert_array_equal(f.frame, np.eye(3))
        assert f.structure[2, 0, 1] == 1.0
        np.testing.assert_allclose(heisenberg_frame([1.0, 0.0, 0.0], 0.0).frame[:, 1], [0.0, 1.0, 1.0])
        assert heisenberg_frame([0.3, 0.1, 0.0], math.log(2.0)).structure[2, 0, 1] == pytest.approx(2.0)

    @given(coords, coords, coords, st.floats(-1.0, 1.0))
    def test_heisenberg_duality_and_antisymmetry(self, x, y, z, beta):
        f = heisenberg_frame([x, y, z], beta)
        assert np.abs(f.coframe @ f.frame - np.eye(3)).max() < 1e-12
        np.testing.assert_array_equal(f.structure, -np.swapaxes(f.structure, 1, 2))

    def test_affine_commutator_order(self):
        # [E1, E2]^a = E1^b d_b E2^a - E2^b d_b E1^a; only the first term survives
        y = np.array([0.4, -0.2])
        errs = []
        steps = [1e-2, 5e-3, 2.5e-3]
        for s in steps:
            d = (affine_frame(y + [s, 0]).frame[:, 1] - affine_frame(y - [s, 0]).frame[:, 1]) / (2 * s)
            errs.append(np.abs(d - affine_frame(y).frame[:, 1]).max())
        slope = np.polyfit(np.log(steps), np.log(errs), 1)[0]
        assert slope >= 1.9


class TestDensity:
    def test_affine(self):
        y = np.array([0.7, 0.3])
        lam = dislocation_density(affine_frame(y))
        assert lam[1, 0, 1] == pytest.approx(math.exp(-0.7))
        assert lam[1, 1, 0] == pytest.approx(-math.exp(-0.7))
        assert not lam[0].any()

    def test_heisenberg(self):
        lam = dislocation_density(heisenberg_frame([0.5, -0.3, 2.0], 0.0))
        assert lam[2, 0, 1] == pytest.approx(1.0)
        assert not lam[:2].any()

    def test_abelian(self):
        f = MaterialFrame(np.eye(2), np.eye(2), np.zeros((2, 2, 2)))
        assert not dislocation_density(f).any()


class TestBurgers:
    @pytest.mark.parametrize("side", [0.1, 0.5, 1.0])
    def test_affine_square_matches_area(self, side):
        closed = burgers_circuit(affine_frame, square_circuit(side, 8))
        flux = dislocation_flux(affine_frame, *square_triangulation(side, 8))
        exact = side * (1.0 - math.exp(-side))
        assert closed.vector[1] == pytest.approx(exact, rel=1e-12)
        assert np.abs(closed.vector - flux).max() < 1e-10
        assert closed.points_per_segment == 4
        assert closed.segments == 32

    def test_small_square_is_area(self):
        s = 1e-3
        v = burgers_circuit(affine_frame, square_circuit(s, 1)).vector
        assert v[1] / (s * s) == pytest.approx(1.0, abs=1e-3)

    @pytest.mark.parametrize("beta", [0.0, 0.1])
    def test_heisenberg_unit_square(self, beta):
        frame = lambda y: heisenberg_frame(y, beta)  # noqa: E731
        v = burgers_circuit(frame, square_circuit(1.0, 1, 3)).vector
        np.testing.assert_allclose(v, [0.0, 0.0, math.exp(beta)], atol=1e-12)
        np.testing.assert_allclose(dislocation_flux(frame, *square_triangulation(1.0, 2, 3)), v, atol=1e-12)

    def test_degenerate_curve(self):
        v = burgers_circuit(affine_frame, [[0.3, 0.2], [0.3, 0.2]]).vector
        assert not v.any()

    def test_open_curve_rejected(self):
        with pytest.raises(PreconditionError):
            burgers_circuit(affine_frame, [[0.0, 0.0], [1.0, 0.0]])

    def test_load_curve(self, tmp_path):
        path = tmp_path / "loop.csv"
        pts = square_circuit(0.5, 3)
        path.write_text("\n".join(",".join(repr(float(v)) for v in p) for p in pts) + "\n")
        np.testing.assert_array_equal(load_curve(path), pts)
        path.write_text("0,0\n1,0\n")
        with pytest.raises(PreconditionError):
            load_curve(path)


class TestHyperbolic:
    def test_origin_and_flat(self):
        np.testing.assert_array_equal(hyperbolic_metric(0.3)([0.0, 0.0])[0], np.eye(2))
        np.testing.assert_array_equal(hyperbolic_metric(0.0)([[2.0, -1.0]])[0], np.eye(2))

    def test_known_value(self):
        h = hyperbolic_metric(0.1)([1.0, 0.0])[0]
        np.testing.assert_allclose(h, np.diag([1.0, 1.0033378]), atol=1e-7)
        assert h[1, 1] == pytest.approx(math.sinh(0.1) ** 2 / 0.01, abs=1e-14)

    def test_negative_epsilon(self):
        with pytest.raises(PreconditionError):
            hyperbolic_metric(-0.1)

    def test_branch_agreement(self):
        x = np.linspace(X_SWITCH / 2, 2 * X_SWITCH, 101)
        assert np.abs(_hyperbolic_f_series(x) - _hyperbolic_f_closed(x)).max() < 1e-13
        assert hyperbolic_f(0.0) == pytest.approx(1.0 / 3.0, abs=1e-16)
        x = np.array([1e-3, 1e-2])
        np.testing.assert_allclose(hyperbolic_f(x), 1 / 3 + 2 * x / 45 + x * x / 315, rtol=1e-9)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.0, 0.5))
    @settings(max_examples=50)
    def test_symmetric_positive(self, a, b, eps):
        h = hyperbolic_metric(eps)([a, b])[0]
        assert np.abs(h - h.T).max() <= 1e-14
        assert np.linalg.eigvalsh(h).min() > 0

    @pytest.mark.parametrize("y", [(0.3, 0.1), (-1.0, 2.0), (2.5, -0.5)])
    def test_gauss_curvature(self, y):
        eps = 0.1
        k = gaussian_curvature(hyperbolic_metric(eps), y, 1e-3)
        assert k == pytest.approx(-eps * eps, rel=1e-3)

    def test_orthonormal_frames(self, rng):
        metric = hyperbolic_metric(0.2)
        pts = rng.uniform(-2, 2, (20, 2))
        h, e = metric.frames(pts)
        eye = np.einsum("naA,nab,nbB->nAB", e, h, e)
        assert np.abs(eye - np.eye(2)).max() < 1e-13


class TestHeisenbergChart:
    def test_origin(self, chart):
        np.testing.assert_allclose(chart([0.0, 0.0, 0.0])[0], np.eye(3), atol=1e-10)
        np.testing.assert_allclose(chart.jacobian([0.0, 0.0, 0.0])[0], np.eye(3), atol=1e-10)
        np.testing.assert_allclose(chart.forward([chart.origin])[0], 0.0, atol=1e-15)

    def test_forward_inverts_exp(self, chart, rng):
        yt = rng.normal(size=(5, 3))
        yt *= 0.3 / np.linalg.norm(yt, axis=1)[:, None]
        np.testing.assert_allclose(chart.forward(chart.exp(yt)), yt, atol=1e-11)

    def test_radial_ray_is_unit_speed_geodesic(self, chart):
        v = np.array([0.6, 0.0, 0.8])
        s, path = chart.geodesic(v, 0.4, 400)
        seg = np.diff(path, axis=0)
        mid = 0.5 * (path[1:] + path[:-1])
        g = chart.metric_group(mid)
        length = np.sqrt(np.einsum("na,nab,nb->n", seg, g, seg)).sum()
        assert length == pytest.approx(0.4, abs=1e-6)
        for t in (0.1, 0.25):
            np.testing.assert_allclose(chart.exp(t * v)[0], chart.geodesic(v, t, 400)[1][-1], atol=1e-9)

    def test_normal_coordinate_order(self, chart, rng):
        dirs = rng.normal(size=(32, 3))
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]
        radii = np.array([0.05, 0.1, 0.2])
        dev = [np.abs(chart(r * dirs) - np.eye(3)).max() for r in radii]
        assert np.polyfit(np.log(radii), np.log(dev), 1)[0] >= 1.9

    def test_domain_bound(self, chart):
        with pytest.raises(DomainError):
            chart([0.6, 0.0, 0.0])
        with pytest.raises(DomainError):
            heisenberg_frame_in_chart(chart, [0.0, 0.0, 0.51])

    def test_frame_in_chart(self, chart, rng):
        np.testing.assert_allclose(heisenberg_frame_in_chart(chart, [0.0, 0.0, 0.0]).frame, np.eye(3), atol=1e-10)
        for y in rng.uniform(-0.25, 0.25, (5, 3)):
            f = heisenberg_frame_in_chart(chart, y)
            h = chart(y)[0]
            assert np.abs(f.frame.T @ h @ f.frame - np.eye(3)).max() < 1e-6
            assert np.abs(f.coframe @ f.frame - np.eye(3)).max() < 1e-12

    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_frame_step_halving(self, chart, axis):
        y = np.zeros(3)
        y[axis] = 0.1
        half = HeisenbergChart(0.0, radius=chart.radius, fd_step=0.5 * chart.jacobian_step)
        a = heisenberg_frame_in_chart(chart, y).frame
        b = heisenberg_frame_in_chart(half, y).frame
        assert np.abs(a - b).max() < 1e-5

    def test_anisotropic_chart_origin(self):
        c = heisenberg_normal_chart(0.1)
        h, e = c.frames(np.zeros((1, 3)))
        np.testing.assert_allclose(h[0], np.eye(3), atol=1e-10)
        np.testing.assert_allclose(e[0], np.eye(3), atol=1e-10)
