import math

import numpy as np
import pytest

from dislocq.errors import DivergenceError, DomainError, InvertedElementError, PreconditionError
from dislocq.equilibrium import (
    _step,
    cell_fields,
    decomposition,
    discrete_energy,
    edge_problem,
    gradient_check,
    outer_iteration,
    projected_norm,
    rescale_solution,
    screw_problem,
    solve_screw_3d,
    weak_residual,
)
from dislocq.linear import DisplacementField
from dislocq.mesh import generate_ball_mesh, generate_disk_mesh


def random_psi(rng, mesh, size=1e-3):
    return rng.uniform(-size, size, (mesh.num_nodes, mesh.dim))


class TestEnergy:
    def test_dilation(self, coarse_disk):
        spec = edge_problem(coarse_disk, 0.0)
        # F = 1.1 I, gamma = 1.21 I, e = 0.21^2
        assert discrete_energy(spec, 0.1 * coarse_disk.nodes) == pytest.approx(0.0441 * coarse_disk.total_volume, rel=1e-13)

    def test_dilation_limit(self):
        m = generate_disk_mesh(1.0, 0.05)
        assert discrete_energy(edge_problem(m, 0.0), 0.1 * m.nodes) == pytest.approx(math.pi * 0.0441, rel=2e-3)

    def test_zero_and_curved(self, coarse_disk):
        assert discrete_energy(edge_problem(coarse_disk, 0.0), np.zeros_like(coarse_disk.nodes)) == 0.0
        assert discrete_energy(edge_problem(coarse_disk, 0.1), np.zeros_like(coarse_disk.nodes)) > 0.0

    def test_inverted_element(self, coarse_disk):
        spec = edge_problem(coarse_disk, 0.0)
        with pytest.raises(InvertedElementError) as info:
            # a reflection in y1
            discrete_energy(spec, coarse_disk.nodes * [-2.0, 0.0])
        assert info.value.cell == 0


class TestGradient:
    @pytest.mark.parametrize("eps", [0.0, 0.1])
    def test_edge(self, coarse_disk, rng, eps):
        err, g, _ = gradient_check(edge_problem(coarse_disk, eps), random_psi(rng, coarse_disk))
        assert err < 1e-6
        assert np.abs(g).max() > 0

    def test_screw(self, rng):
        m = generate_ball_mesh(0.2, 0.1)
        err, _, _ = gradient_check(screw_problem(m, 0.1), random_psi(rng, m))
        assert err < 1e-6

    def test_translation_invariance(self, coarse_disk, rng):
        g = weak_residual(edge_problem(coarse_disk, 0.1), random_psi(rng, coarse_disk, 0.05)).reshape(-1, 2)
        assert np.abs(g.sum(axis=0)).max() < 1e-14

    def test_rotation_invariance(self, coarse_disk, rng):
        psi = random_psi(rng, coarse_disk, 0.05)
        g = weak_residual(edge_problem(coarse_disk, 0.1), psi).reshape(-1, 2)
        phi = coarse_disk.nodes + psi
        xi = np.stack([-phi[:, 1], phi[:, 0]], axis=1)
        assert abs((g * xi).sum()) < 1e-14 * max(1.0, np.abs(g).max())

    def test_decomposition(self, coarse_disk, rng):
        spec = edge_problem(coarse_disk, 0.1)
        psi = random_psi(rng, coarse_disk, 1e-4)
        parts = decomposition(spec, psi)
        total = parts["F_id"] + parts["A_psi"] + parts["remainder"]
        np.testing.assert_allclose(total, weak_residual(spec, psi), atol=1e-15)
        # the remainder is quadratic in psi and epsilon
        assert np.abs(parts["remainder"]).max() < 1e-2 * np.abs(parts["A_psi"]).max()

    def test_threads_deterministic(self, disk, rng, monkeypatch):
        psi = random_psi(rng, disk)
        serial = weak_residual(edge_problem(disk, 0.1, threads=1), psi)
        np.testing.assert_array_equal(weak_residual(edge_problem(disk, 0.1, threads=4), psi), serial)
        monkeypatch.setenv("DISLOCQ_THREADS", "3")
        np.testing.assert_array_equal(weak_residual(edge_problem(disk, 0.1), psi), serial)


class TestOuterIteration:
    def test_flat_limit(self, coarse_disk):
        psi, report = outer_iteration(edge_problem(coarse_disk, 0.0))
        assert report.converged and report.iterations == 1
        assert not psi.values.any()

    def test_edge_converges(self, edge_solution):
        spec, psi, report = edge_solution
        assert report.converged
        assert report.iterations <= 30
        assert report.final_residual < 1e-8
        assert report.max_doping < 1e-8
        assert all(r < 0.5 for r in report.contraction_ratios[1:])
        assert np.all(np.diff(report.residuals) < 0)

    def test_energy_descent(self, edge_solution):
        spec, _, report = edge_solution
        e0 = discrete_energy(spec, np.zeros_like(spec.mesh.nodes))
        assert report.energies[-1] < e0
        assert report.energies[-1] == pytest.approx(min(report.energies), rel=1e-10)

    def test_fixed_point(self, edge_solution):
        spec, psi, _ = edge_solution
        new, c = _step(spec, psi.values)
        assert np.abs(new - psi.values).max() < 1e-14
        assert np.abs(c).max() < 1e-12

    def test_gauge_of_solution(self, edge_solution):
        spec, psi, _ = edge_solution
        assert np.abs(psi.values[spec.mesh.origin_node()]).max() < 1e-15

    def test_divergence_error(self, disk):
        spec = edge_problem(disk, 0.05, max_outer=1)
        with pytest.raises(DivergenceError) as info:
            outer_iteration(spec)
        assert info.value.report.iterations == 1
        assert info.value.psi.max_norm() > 0

    def test_first_iterate_scaling(self, disk):
        norms = []
        eps = np.array([0.02, 0.04, 0.08])
        for e in eps:
            with pytest.raises(DivergenceError) as info:
                outer_iteration(edge_problem(disk, e, max_outer=1))
            norms.append(info.value.psi.max_norm())
        slope = np.polyfit(np.log(eps), np.log(norms), 1)[0]
        assert 1.8 <= slope <= 2.2

    @pytest.mark.parametrize("eps", [-0.01, 0.25])
    def test_epsilon_range(self, coarse_disk, eps):
        with pytest.raises(PreconditionError):
            outer_iteration(edge_problem(coarse_disk, eps))

    def test_report_csv(self, edge_solution, tmp_path):
        _, _, report = edge_solution
        path = tmp_path / "r.csv"
        report.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "n,residual,increment,E_h,c_1,c_2,c_3"
        assert len(lines) == report.iterations + 1
        assert float(lines[-1].split(",")[1]) == report.final_residual


class TestScrew:
    def test_converges(self, screw_solution):
        spec, psi, report = screw_solution
        assert report.converged
        assert len(report.doping[-1]) == 6
        assert report.max_doping < spec.outer_tol
        assert psi.max_norm() > 0

    def test_flat(self, small_ball):
        psi, report = solve_screw_3d(screw_problem(small_ball, 0.1, flat=True))
        assert report.iterations == 1 and not psi.values.any()

    def test_outside_chart(self):
        with pytest.raises(DomainError):
            screw_problem(generate_ball_mesh(0.6, 0.3), 0.1)

    def test_needs_anisotropic(self, coarse_disk):
        with pytest.raises(PreconditionError):
            solve_screw_3d(edge_problem(coarse_disk, 0.0))


class TestFields:
    def test_zero_strain(self, coarse_disk):
        f = cell_fields(edge_problem(coarse_disk, 0.0), np.zeros_like(coarse_disk.nodes))
        assert not f.S.any() and not f.T.any() and not f.energy_density.any()

    def test_symmetric(self, edge_solution):
        spec, psi, _ = edge_solution
        f = cell_fields(spec, psi)
        assert np.abs(f.S - np.swapaxes(f.S, 1, 2)).max() < 1e-15
        assert (f.energy_density >= 0).all()


class TestRescale:
    def test_identity(self, edge_solution):
        _, psi, _ = edge_solution
        r = rescale_solution(psi, 1.0, 0.05)
        assert r.mesh == psi.mesh
        np.testing.assert_array_equal(r.field.values, psi.values)
        assert r.epsilon == 0.05

    @pytest.mark.parametrize("l", [2.0, 4.0, 0.5])
    def test_power_of_two_round_trip(self, edge_solution, l):
        _, psi, _ = edge_solution
        back = rescale_solution(rescale_solution(psi, l, 0.05).field, 1.0 / l, 0.05 / l)
        assert back.field.values.tobytes() == psi.values.tobytes()
        assert back.mesh.nodes.tobytes() == psi.mesh.nodes.tobytes()
        assert back.epsilon == 0.05

    def test_general_round_trip(self, edge_solution):
        _, psi, _ = edge_solution
        back = rescale_solution(rescale_solution(psi, 3.0).field, 1.0 / 3.0)
        assert np.abs(back.field.values - psi.values).max() < 1e-18

    def test_stress_invariance(self, edge_solution):
        spec, psi, _ = edge_solution
        r = rescale_solution(psi, 2.0, spec.epsilon)
        a, b = cell_fields(spec, psi), cell_fields(r.spec(spec), r.field)
        assert np.abs(a.S - b.S).max() < 1e-15
        np.testing.assert_allclose(b.centroids, 2.0 * a.centroids, rtol=1e-15)

    def test_residual_transport(self, edge_solution):
        spec, psi, _ = edge_solution
        r = rescale_solution(psi, spec.epsilon, spec.epsilon)
        scaled = r.spec(spec)
        assert scaled.epsilon == pytest.approx(1.0)
        g0 = projected_norm(scaled, weak_residual(scaled, np.zeros_like(r.mesh.nodes)))
        assert projected_norm(scaled, weak_residual(scaled, r.field)) / g0 < 1e-6

    def test_bad_scale(self, edge_solution):
        with pytest.raises(PreconditionError):
            rescale_solution(edge_solution[1], 0.0)


def test_displacement_field_round(coarse_disk):
    f = DisplacementField(coarse_disk, coarse_disk.nodes.copy())
    np.testing.assert_array_equal(f.deformed_nodes(), 2 * coarse_disk.nodes)
