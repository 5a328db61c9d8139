import numpy as np
import pytest

from congested_transport.beckmann import (
    _ops,
    _rms_norms,
    cloud_to_field,
    coarsen_field,
    field_w1,
    grid_geodesic_distances,
    rasterize_transport_density,
    rasterize_v_gamma,
    reconstruct_trajectories,
    solve_beckmann,
    solve_dual_quadratic,
    weighted_beckmann_duality_check,
)
from congested_transport.congestion import CongestionSpec
from congested_transport.errors import MassMismatchError, PointOutsideDomainError
from congested_transport.grids import Grid, ScalarField, VectorField
from congested_transport.kantorovich import DiscreteMeasure, lp_cost_matrix, solve_discrete_ot

QUAD = CongestionSpec.quadratic()


def random_densities(grid, seed):
    rng = np.random.default_rng(seed)
    a = rng.random((grid.nx, grid.ny))
    b = rng.random((grid.nx, grid.ny))
    a /= a.sum() * grid.cell_area
    b /= b.sum() * grid.cell_area
    return ScalarField(a, grid), ScalarField(b, grid)


def cumulative_oracle(grid, mu, nu):
    f = (mu.values - nu.values).ravel()
    vx = np.concatenate([[0.0], np.cumsum(grid.h * f)])
    return vx


# ---------------------------------------------------------------------- dual


def test_dual_quadratic_equal_measures():
    g = Grid(nx=8, ny=8, h=0.125)
    mu, _ = random_densities(g, 0)
    u, v = solve_dual_quadratic(mu, mu, g)
    assert np.abs(u.values).max() <= 1e-12
    assert np.abs(v.vx).max() <= 1e-12 and np.abs(v.vy).max() <= 1e-12


def test_dual_quadratic_one_dimensional_oracle():
    g = Grid(nx=24, ny=1, h=1.0 / 24)
    mu, nu = random_densities(g, 3)
    _, v = solve_dual_quadratic(mu, nu, g)
    vx = cumulative_oracle(g, mu, nu)
    assert np.abs(v.vx.ravel() - vx).max() <= 1e-8
    # the oracle flow is the unique feasible one, so costs agree too
    assert abs(v.vx.ravel()[-1]) <= 1e-10


def test_dual_quadratic_manufactured_solution():
    # u = -cos(pi x / L) solves Lap u = (pi/L)^2 cos(pi x / L) with zero flux
    errs = {}
    for n in (16, 32, 64):
        g = Grid(nx=n, ny=4, h=1.0 / n)
        L = 1.0
        xc, yc = g.cell_centers()
        f = (np.pi / L) ** 2 * np.cos(np.pi * xc / L)
        f = f - f.mean()
        base = ScalarField(np.full((n, 4), 1.0), g)
        mu = ScalarField(base.values + np.maximum(f, 0), g)
        nu = ScalarField(base.values + np.maximum(-f, 0), g)
        u, _ = solve_dual_quadratic(mu, nu, g)
        exact = -np.cos(np.pi * xc / L)
        exact = exact - exact.mean()
        errs[n] = np.abs(u.values - exact).max()
    assert errs[64] <= 1.5 * (1 / 64) ** 2 / (1 / 64) ** 0  # absolute sanity bound
    # second-order convergence: refining by 2 divides the error by ~4
    assert errs[32] / errs[64] > 3.0
    assert errs[16] / errs[32] > 3.0


def test_dual_quadratic_mass_mismatch():
    g = Grid(nx=8, ny=8, h=0.125)
    mu, nu = random_densities(g, 1)
    bad = ScalarField(nu.values * 2.0, g)
    with pytest.raises(MassMismatchError):
        solve_dual_quadratic(mu, bad, g)


# ----------------------------------------------------------------- splitting


def test_beckmann_equal_measures_zero_flow():
    g = Grid(nx=8, ny=8, h=0.125)
    mu, _ = random_densities(g, 5)
    res = solve_beckmann(mu, mu, QUAD, g)
    assert res.cost == 0.0
    assert np.abs(res.v.vx).max() == 0.0


def test_beckmann_one_dimensional_oracle():
    g = Grid(nx=16, ny=1, h=1.0 / 16)
    mu, nu = random_densities(g, 7)
    res = solve_beckmann(mu, nu, QUAD, g, tol=1e-10)
    vx = cumulative_oracle(g, mu, nu)
    assert np.abs(res.v.vx.ravel() - vx).max() <= 1e-8
    oracle_cost = g.cell_area * np.sum(QUAD.H(_rms_norms(
        (_ops(g).R @ _ops(g).faces_of(res.v)).reshape(-1, 4))))
    assert res.cost == pytest.approx(oracle_cost, rel=1e-12)


def test_beckmann_quadratic_matches_poisson():
    for n in (16, 32):
        g = Grid(nx=n, ny=n, h=1.0 / n)
        mu, nu = random_densities(g, n)
        res = solve_beckmann(mu, nu, QUAD, g, tol=1e-8)
        _, v_ref = solve_dual_quadratic(mu, nu, g)
        ops = _ops(g)
        ref_cost = g.cell_area * np.sum(QUAD.H(_rms_norms(
            (ops.R @ ops.faces_of(v_ref)).reshape(-1, 4))))
        assert res.converged
        assert abs(res.cost - ref_cost) <= 1e-6 * abs(ref_cost)
        assert res.div_residual <= 1e-8
        assert abs(res.certificate_gap) <= 1e-8


def test_beckmann_affine_threshold_kills_small_flows():
    # with H = a t + t^2/2 and far-apart small masses, the flow is zero-free
    # only where it must carry mass; the certificate stays a valid lower bound
    g = Grid(nx=16, ny=16, h=1.0 / 16)
    mu, nu = random_densities(g, 9)
    res = solve_beckmann(mu, nu, CongestionSpec.affine_power(0.5, 2.0), g, tol=1e-8)
    assert res.converged
    assert res.dual_value <= res.cost + 1e-9 * (1 + abs(res.cost))


# -------------------------------------------------------------- rasterizers


def test_sigma_zero_length_segment():
    g = Grid(nx=10, ny=10, h=0.1)
    pts = np.array([[0.35, 0.35]])
    sigma = rasterize_transport_density(np.array([[1.0]]), pts, pts, g)
    assert sigma.total_mass == 0.0


def test_sigma_mass_identity_single_segment():
    g = Grid(nx=20, ny=20, h=0.05)
    sigma = rasterize_transport_density(np.array([[1.0]]),
                                        np.array([[0.25, 0.5]]), np.array([[0.75, 0.5]]), g)
    assert sigma.total_mass == pytest.approx(0.5, abs=1e-12)


def test_sigma_mass_identity_random_couplings():
    rng = np.random.default_rng(4)
    g = Grid(nx=16, ny=16, h=1.0 / 16)
    for _ in range(5):
        m, n = rng.integers(2, 6, size=2)
        src = rng.uniform(0.05, 0.95, (m, 2))
        dst = rng.uniform(0.05, 0.95, (n, 2))
        plan = rng.random((m, n))
        sigma = rasterize_transport_density(plan, src, dst, g)
        expected = sum(plan[i, j] * np.linalg.norm(src[i] - dst[j])
                       for i in range(m) for j in range(n))
        assert sigma.total_mass == pytest.approx(expected, rel=1e-8)


def test_sigma_equals_w1_for_optimal_plan():
    g = Grid(nx=32, ny=32, h=1.0 / 32)
    mu = DiscreteMeasure(weights=np.array([0.5, 0.5]), points=np.array([[0.2, 0.3], [0.2, 0.7]]))
    nu = DiscreteMeasure(weights=np.array([0.5, 0.5]), points=np.array([[0.8, 0.3], [0.8, 0.7]]))
    cost = lp_cost_matrix(mu, nu, 1.0)
    res = solve_discrete_ot(mu, nu, cost)
    sigma = rasterize_transport_density(res.coupling.plan, mu.points, nu.points, g)
    assert sigma.total_mass == pytest.approx(res.value, rel=1e-8)


def test_rasterize_rejects_outside_points():
    g = Grid(nx=8, ny=8, h=0.125)
    with pytest.raises(PointOutsideDomainError):
        rasterize_transport_density(np.array([[1.0]]), np.array([[1.5, 0.5]]),
                                    np.array([[0.5, 0.5]]), g)


def test_v_gamma_direction_and_cancellation():
    g = Grid(nx=20, ny=20, h=0.05)
    src = np.array([[0.25, 0.525]])
    dst = np.array([[0.75, 0.525]])
    v = rasterize_v_gamma(np.array([[1.0]]), src, dst, g)
    assert np.abs(v.vy).max() == 0.0
    assert v.vx.min() >= 0.0
    # two equal opposite segments cancel the flux but not the density
    v2 = rasterize_v_gamma(np.array([[1.0, 0.0], [0.0, 1.0]]),
                           np.vstack([src, dst]), np.vstack([dst, src]), g)
    sigma2 = rasterize_transport_density(np.array([[1.0, 0.0], [0.0, 1.0]]),
                                         np.vstack([src, dst]), np.vstack([dst, src]), g)
    assert np.abs(v2.vx).max() <= 1e-12
    assert sigma2.total_mass == pytest.approx(1.0, rel=1e-12)


def test_v_gamma_weak_divergence():
    g = Grid(nx=32, ny=32, h=1.0 / 32)
    rng = np.random.default_rng(12)
    src = np.array([[0.2, 0.3]])
    dst = np.array([[0.8, 0.6]])
    v = rasterize_v_gamma(np.array([[1.0]]), src, dst, g)
    xc, yc = g.cell_centers()
    # linear test functions are reproduced exactly (no curvature term)
    for a, b in ((1.0, 0.0), (0.0, 1.0), (0.7, -0.4)):
        psi = a * xc + b * yc
        gx = (psi[1:, :] - psi[:-1, :]) / g.h
        gy = (psi[:, 1:] - psi[:, :-1]) / g.h
        lhs = (np.sum(v.vx[1:-1, :] * gx) + np.sum(v.vy[:, 1:-1] * gy)) * g.cell_area
        rhs = (a * (dst[0, 0] - src[0, 0]) + b * (dst[0, 1] - src[0, 1]))
        assert lhs == pytest.approx(rhs, abs=1e-10)
    # smooth test functions: error O(h * max curvature)
    for _ in range(20):
        cx_, cy_ = rng.uniform(0.2, 0.8, 2)
        freq = rng.uniform(1.0, 2.0)
        psi = np.sin(2 * np.pi * freq * (xc - cx_)) * np.cos(2 * np.pi * freq * (yc - cy_))
        curv = (2 * np.pi * freq) ** 2
        gx = (psi[1:, :] - psi[:-1, :]) / g.h
        gy = (psi[:, 1:] - psi[:, :-1]) / g.h
        lhs = (np.sum(v.vx[1:-1, :] * gx) + np.sum(v.vy[:, 1:-1] * gy)) * g.cell_area
        i0 = g.cell_of(*src[0])
        i1 = g.cell_of(*dst[0])
        rhs_exact = psi[i1] - psi[i0]
        assert abs(lhs - rhs_exact) <= 1.0 * g.h * curv


def test_v_gamma_bounded_by_sigma_on_faces():
    rng = np.random.default_rng(21)
    g = Grid(nx=16, ny=16, h=1.0 / 16)
    for _ in range(5):
        m, n = rng.integers(1, 5, size=2)
        src = rng.uniform(0.05, 0.95, (m, 2))
        dst = rng.uniform(0.05, 0.95, (n, 2))
        plan = rng.random((m, n))
        v = rasterize_v_gamma(plan, src, dst, g)
        sigma = rasterize_transport_density(plan, src, dst, g).values
        face_sigma_x = 0.5 * (sigma[:-1, :] + sigma[1:, :])
        face_sigma_y = 0.5 * (sigma[:, :-1] + sigma[:, 1:])
        assert np.all(np.abs(v.vx[1:-1, :]) <= face_sigma_x + 1e-8)
        assert np.all(np.abs(v.vy[:, 1:-1]) <= face_sigma_y + 1e-8)


# ---------------------------------------------------------- weighted duality


def test_weighted_duality_uniform_weight():
    g = Grid(nx=32, ny=32, h=1.0 / 32)
    k1 = ScalarField.constant(g, 1.0)
    mu = DiscreteMeasure(weights=np.array([1.0]), points=np.array([[0.25, 0.5]]))
    nu = DiscreteMeasure(weights=np.array([1.0]), points=np.array([[0.75, 0.5]]))
    rep = weighted_beckmann_duality_check(k1, mu, nu, g)
    assert rep.rel_err <= 0.083 + 2 * g.h


def test_weighted_duality_equal_measures():
    g = Grid(nx=16, ny=16, h=1.0 / 16)
    k1 = ScalarField.constant(g, 1.0)
    mu = DiscreteMeasure(weights=np.array([1.0]), points=np.array([[0.4, 0.5]]))
    rep = weighted_beckmann_duality_check(k1, mu, mu, g)
    assert rep.flow_value == pytest.approx(0.0, abs=1e-9)
    assert rep.geodesic_ot_value == pytest.approx(0.0, abs=1e-12)


def test_weighted_duality_homogeneity():
    g = Grid(nx=24, ny=24, h=1.0 / 24)
    mu = DiscreteMeasure(weights=np.array([1.0]), points=np.array([[0.25, 0.45]]))
    nu = DiscreteMeasure(weights=np.array([1.0]), points=np.array([[0.8, 0.45]]))
    r1 = weighted_beckmann_duality_check(ScalarField.constant(g, 1.0), mu, nu, g)
    r2 = weighted_beckmann_duality_check(ScalarField.constant(g, 2.0), mu, nu, g)
    assert r2.geodesic_ot_value == pytest.approx(2 * r1.geodesic_ot_value, rel=1e-8)
    assert r2.flow_value == pytest.approx(2 * r1.flow_value, rel=1e-6)


def test_grid_geodesic_octagonal_metric():
    g = Grid(nx=16, ny=16, h=1.0 / 16)
    k1 = ScalarField.constant(g, 1.0)
    d = grid_geodesic_distances(k1, g, [(0, 0)], [(15, 15), (15, 0)])
    # diagonal distance uses sqrt(2) steps, axis distance plain steps
    assert d[0, 0] == pytest.approx(15 * np.sqrt(2) * g.h, rel=1e-12)
    assert d[0, 1] == pytest.approx(15 * g.h, rel=1e-12)


# ------------------------------------------------------------- trajectories


def test_trajectories_stationary_when_equal():
    g = Grid(nx=16, ny=16, h=1.0 / 16)
    mu, _ = random_densities(g, 2)
    traj = reconstruct_trajectories(VectorField.zeros(g), mu, mu, g,
                                    n_particles=500, n_steps=20, seed=1)
    assert np.abs(traj.intensity.values).max() == 0.0
    start = cloud_to_field(traj.endpoints, traj.weights, g)
    assert abs(start.total_mass - 1.0) <= 1e-9


def test_trajectories_one_dimensional_monotone():
    g = Grid(nx=32, ny=1, h=1.0 / 32)
    xc, _ = g.cell_centers()
    a = np.exp(-((xc - 0.25) / 0.08) ** 2) + 0.05
    b = np.exp(-((xc - 0.75) / 0.08) ** 2) + 0.05
    a /= a.sum() * g.cell_area
    b /= b.sum() * g.cell_area
    mu, nu = ScalarField(a, g), ScalarField(b, g)
    res = solve_beckmann(mu, nu, QUAD, g, tol=1e-10)
    assert res.v.vx.min() >= -1e-10  # mass only moves rightward
    rng_seed = 3
    traj = reconstruct_trajectories(res.v, mu, nu, g, n_particles=400, n_steps=100,
                                    seed=rng_seed)
    # re-run sampling to recover the initial positions deterministically
    from congested_transport.beckmann import stratified_sample

    pts0, _ = stratified_sample(mu, 400, np.random.default_rng(rng_seed))
    assert np.all(traj.endpoints[:, 0] >= pts0[:, 0] - 1e-9)


def test_trajectory_determinism():
    g = Grid(nx=16, ny=16, h=1.0 / 16)
    mu, nu = random_densities(g, 6)
    res = solve_beckmann(mu, nu, QUAD, g, tol=1e-8)
    t1 = reconstruct_trajectories(res.v, mu, nu, g, n_particles=200, n_steps=30, seed=9)
    t2 = reconstruct_trajectories(res.v, mu, nu, g, n_particles=200, n_steps=30, seed=9)
    assert np.array_equal(t1.endpoints, t2.endpoints)
    assert np.array_equal(t1.intensity.values, t2.intensity.values)


def test_field_w1_and_coarsen():
    g = Grid(nx=16, ny=16, h=1.0 / 16)
    xc, yc = g.cell_centers()
    a = np.zeros((16, 16)); a[4, 8] = 1.0 / g.cell_area
    b = np.zeros((16, 16)); b[12, 8] = 1.0 / g.cell_area
    d = field_w1(ScalarField(a, g), ScalarField(b, g), max_cells=256)
    assert d == pytest.approx(8 * g.h, rel=1e-9)
    coarse = coarsen_field(ScalarField(a, g), 4)
    assert coarse.grid.nx == 4
    assert coarse.total_mass == pytest.approx(1.0, rel=1e-12)
