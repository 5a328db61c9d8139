"""Minimization of the urban-planning functional T(mu, nu) + F(mu) + G(nu):
the fixed-target subproblem through the potential characterization
u = (f')^{-1}((C - psi)_+), the full quadratic case against its closed-form
ball solution, and the atomic-concentration variant.

mu lives on the grid as a density; nu is a cloud of weighted atoms. The
transport potentials between the grid and the atoms are Kantorovich duals:
computed by the exact transport solver at small sizes and by warm-started
ascent on the atom potentials (with the grid side eliminated by c-transform)
at grid scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    BisectionFailureError,
    DomainTooSmallError,
    InputFormatError,
    MassMismatchError,
)
from .grids import Grid, ScalarField
from .kantorovich import DiscreteMeasure, solve_discrete_ot

EXACT_OT_MAX_SIDE = 600


# ---------------------------------------------------------------------------
# Functional specifications.

@dataclass(frozen=True)
class SpreadSpec:
    """Convex integrand f with f(0) = 0 penalizing concentration of mu."""

    f: Callable[[np.ndarray], np.ndarray]
    inverse_derivative: Callable[[np.ndarray], np.ndarray]
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        rng = np.random.default_rng(1234)
        for _ in range(20):
            a, b = rng.uniform(0.0, 5.0, size=2)
            mid = self.f(np.array(0.5 * (a + b)))
            if float(mid) > 0.5 * (float(self.f(np.array(a))) + float(self.f(np.array(b)))) + 1e-10:
                raise InputFormatError("spread integrand fails the midpoint convexity check")
        if abs(float(self.f(np.array(0.0)))) > 1e-12:
            raise InputFormatError("spread integrand must vanish at zero")
        for s in (0.1, 1.0, 10.0):
            t = float(self.inverse_derivative(np.array(s)))
            h = 1e-6 * max(t, 1.0)
            fp = (float(self.f(np.array(t + h))) - float(self.f(np.array(t - h)))) / (2 * h)
            if abs(fp - s) > 1e-4 * max(1.0, s):
                raise InputFormatError(
                    f"inverse_derivative inconsistent with f at s={s}: f'({t})={fp}"
                )

    @staticmethod
    def quadratic() -> "SpreadSpec":
        return SpreadSpec(
            f=lambda t: np.square(t),
            inverse_derivative=lambda s: 0.5 * np.asarray(s, dtype=float),
            family="quadratic",
        )

    @staticmethod
    def power(m: float) -> "SpreadSpec":
        if m <= 1:
            raise InputFormatError(f"power spread requires m > 1, got {m}")
        return SpreadSpec(
            f=lambda t: np.power(np.asarray(t, dtype=float), m) / m,
            inverse_derivative=lambda s: np.power(np.maximum(np.asarray(s, dtype=float), 0.0),
                                                  1.0 / (m - 1.0)),
            family="power",
            params={"m": float(m)},
        )


@dataclass(frozen=True)
class ConcentrationSpec:
    """Either a subadditive per-pole cost g (atomic) or a pairwise interaction
    cost h of the distance (with its derivative, used for position moves)."""

    kind: str
    g: Callable[[np.ndarray], np.ndarray] | None = None
    h: Callable[[np.ndarray], np.ndarray] | None = None
    h_prime: Callable[[np.ndarray], np.ndarray] | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        rng = np.random.default_rng(4321)
        if self.kind == "atomic":
            if self.g is None:
                raise InputFormatError("atomic concentration requires g")
            if abs(float(self.g(np.array(0.0)))) > 1e-12:
                raise InputFormatError("pole cost must vanish at zero")
            for _ in range(20):
                a, b = rng.uniform(0.0, 2.0, size=2)
                lhs = float(self.g(np.array(a + b)))
                rhs = float(self.g(np.array(a))) + float(self.g(np.array(b)))
                if lhs > rhs + 1e-10:
                    raise InputFormatError("pole cost fails the subadditivity check")
        elif self.kind == "interaction":
            if self.h is None:
                raise InputFormatError("interaction concentration requires h")
            pts = np.sort(rng.uniform(0.0, 3.0, size=20))
            vals = np.asarray(self.h(pts), dtype=float)
            if np.any(np.diff(vals) < -1e-10):
                raise InputFormatError("interaction cost must be nondecreasing")
        else:
            raise InputFormatError(f"unknown concentration kind {self.kind!r}")

    @staticmethod
    def atomic_power(alpha: float = 0.5) -> "ConcentrationSpec":
        if not (0 < alpha <= 1):
            raise InputFormatError("atomic power exponent must lie in (0, 1]")
        return ConcentrationSpec(
            kind="atomic",
            g=lambda a: np.power(np.maximum(np.asarray(a, dtype=float), 0.0), alpha),
            params={"alpha": float(alpha)},
        )

    @staticmethod
    def quadratic_interaction(lam: float) -> "ConcentrationSpec":
        if lam < 0:
            raise InputFormatError("interaction strength must be nonnegative")
        return ConcentrationSpec(
            kind="interaction",
            h=lambda r: lam * np.square(r),
            h_prime=lambda r: 2.0 * lam * np.asarray(r, dtype=float),
            params={"lambda": float(lam)},
        )


# ---------------------------------------------------------------------------
# Transport potentials between a grid density and an atom cloud.

class GridAtomTransport:
    """Kantorovich duals for cost |x - y|^p between grid cells and atoms.

    Atom positions are fixed per instance; the grid masses may change between
    calls, so the atom-side potential is kept warm. Small problems go through
    the exact solver; larger ones maximize the dual in the atom potentials
    directly (the grid side is always the c-transform).
    """

    def __init__(self, cell_points: np.ndarray, atom_points: np.ndarray, p: float):
        self.cell_points = cell_points
        self.atom_points = np.atleast_2d(atom_points)
        self.p = p
        diff = cell_points[:, None, :] - self.atom_points[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=2))
        self.cost = np.power(dist, p)
        self.beta = np.zeros(self.atom_points.shape[0])
        self._step = None  # last accepted ascent step, kept warm across calls

    def solve(self, cell_masses: np.ndarray, atom_weights: np.ndarray,
              exact: bool | None = None, max_ascent: int = 400):
        """Returns (psi on all cells, beta on atoms, assignment, transport value).

        psi is the c-transform min_j cost - beta_j evaluated at every cell, so
        it is defined off the support of the cell masses as well. max_ascent
        caps the warm-started dual ascent work on large instances (callers in
        fixed-point loops only need a few refinement steps per call).
        """
        m, n = self.cost.shape
        total = float(cell_masses.sum())
        if abs(total - float(atom_weights.sum())) > 1e-8 * max(1.0, total):
            raise MassMismatchError("grid and atom masses differ")
        if n == 1:
            self.beta = np.zeros(1)
            psi = self.cost[:, 0].copy()
            assign = np.zeros(m, dtype=np.int64)
            value = float(np.dot(cell_masses, psi))
            return psi, self.beta.copy(), assign, value
        use_exact = exact
        if use_exact is None:
            # the exact path costs roughly (m + n) short Dijkstra sweeps, so
            # keep it for genuinely small instances only
            pos = cell_masses > 0
            use_exact = int(pos.sum()) + n <= 300
        if use_exact:
            pos = cell_masses > 0
            mu = DiscreteMeasure(weights=cell_masses[pos], points=self.cell_points[pos])
            nu = DiscreteMeasure(weights=atom_weights, points=self.atom_points)
            res = solve_discrete_ot(mu, nu, self.cost[pos])
            self.beta = res.potentials.psi.copy()
            psi = (self.cost - self.beta[None, :]).min(axis=1)
            assign = np.argmin(self.cost - self.beta[None, :], axis=1)
            return psi, self.beta.copy(), assign, res.value
        return self._dual_ascent(cell_masses, atom_weights, max_iter=max_ascent)

    def _dual_ascent(self, cell_masses, atom_weights, max_iter: int = 400):
        beta = self.beta.copy()
        total = float(cell_masses.sum())
        scale = float(self.cost.max() - self.cost.min()) + 1e-12

        def evaluate(b):
            red = self.cost - b[None, :]
            assign = np.argmin(red, axis=1)
            psi = red[np.arange(red.shape[0]), assign]
            load = np.bincount(assign, weights=cell_masses, minlength=b.shape[0])
            dual = float(np.dot(cell_masses, psi) + np.dot(atom_weights, b))
            return psi, assign, load, dual

        psi, assign, load, dual = evaluate(beta)
        step = self._step if self._step is not None else 0.5 * scale
        for _ in range(max_iter):
            grad = atom_weights - load
            res = float(np.abs(grad).sum())
            if res <= 1e-9 * max(total, 1e-12):
                break
            improved = False
            for _ in range(14):
                cand = beta + step * grad / max(total, 1e-12)
                psi_c, assign_c, load_c, dual_c = evaluate(cand)
                if dual_c > dual + 1e-15 * (1.0 + abs(dual)):
                    beta, psi, assign, load, dual = cand, psi_c, assign_c, load_c, dual_c
                    step *= 1.4
                    improved = True
                    break
                step *= 0.5
                if step < 1e-14 * scale:
                    break
            if not improved:
                break
        self._step = step
        self.beta = beta
        value = float(np.dot(cell_masses, psi) + np.dot(atom_weights - load, beta))
        # primal value from the assignment (feasible up to boundary cells)
        primal = float(np.dot(cell_masses, self.cost[np.arange(self.cost.shape[0]), assign]))
        return psi, beta.copy(), assign, max(dual, min(primal, dual))


# ---------------------------------------------------------------------------
# Objective evaluation.

@dataclass
class CityValue:
    total: float
    transport: float
    spread: float
    concentration: float
    infeasible: bool = False


def _atoms_of(nu) -> DiscreteMeasure | None:
    if isinstance(nu, DiscreteMeasure):
        return nu
    return None


def eval_total(mu: ScalarField, nu, p: float, spread: SpreadSpec,
               conc: ConcentrationSpec | None, grid: Grid,
               max_side: int = EXACT_OT_MAX_SIDE) -> CityValue:
    """Value of the full functional W_p^p + integral f(u) + G(nu).

    nu may be an atom cloud or a second grid density (grid densities are
    block-aggregated to at most max_side support points per side before the
    exact transport solve). An atomic G with a non-atomic nu is infeasible.
    """
    if abs(mu.total_mass - _total_mass(nu, grid)) > 1e-8 * max(1.0, mu.total_mass):
        raise MassMismatchError("mu and nu must carry equal mass")
    spread_val = float(grid.cell_area * np.sum(spread.f(mu.values)))

    atoms = _atoms_of(nu)
    if conc is None:
        conc_val = 0.0
    elif conc.kind == "atomic":
        if atoms is None:
            return CityValue(np.inf, np.nan, spread_val, np.inf, infeasible=True)
        conc_val = float(np.sum(conc.g(atoms.weights)))
    else:
        if atoms is not None:
            d = _pairwise_dist(atoms.points, atoms.points)
            conc_val = float(atoms.weights @ np.asarray(conc.h(d)) @ atoms.weights)
        else:
            pts, w = _field_atoms(nu, grid, max_side)
            d = _pairwise_dist(pts, pts)
            conc_val = float(w @ np.asarray(conc.h(d)) @ w)

    transport = _transport_value(mu, nu, p, grid, max_side)
    return CityValue(transport + spread_val + conc_val, transport, spread_val, conc_val)


def _total_mass(nu, grid) -> float:
    atoms = _atoms_of(nu)
    if atoms is not None:
        return atoms.total_mass
    return nu.total_mass


def _pairwise_dist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _field_atoms(fld: ScalarField, grid: Grid, max_side: int):
    """Aggregate a grid density to at most max_side mass points (block sums at
    block barycenters)."""
    factor = 1
    while (grid.nx // factor) * (grid.ny // factor) > max_side:
        factor *= 2
        if grid.nx % factor or grid.ny % factor:
            raise InputFormatError("grid not block-aggregatable; choose power-of-two sizes")
    vals = fld.values
    nxc, nyc = grid.nx // factor, grid.ny // factor
    masses = (vals * grid.cell_area).reshape(nxc, factor, nyc, factor).sum(axis=(1, 3))
    xc, yc = grid.cell_centers()
    mx = (vals * xc * grid.cell_area).reshape(nxc, factor, nyc, factor).sum(axis=(1, 3))
    my = (vals * yc * grid.cell_area).reshape(nxc, factor, nyc, factor).sum(axis=(1, 3))
    m = masses.ravel()
    keep = m > 0
    with np.errstate(invalid="ignore"):
        bx = np.where(m > 0, mx.ravel() / m, 0.0)
        by = np.where(m > 0, my.ravel() / m, 0.0)
    return np.column_stack([bx[keep], by[keep]]), m[keep]


def _transport_value(mu: ScalarField, nu, p: float, grid: Grid, max_side: int) -> float:
    atoms = _atoms_of(nu)
    if atoms is None and np.array_equal(mu.values, nu.values):
        return 0.0
    pts_a, w_a = _field_atoms(mu, grid, max_side)
    if atoms is not None:
        pts_b, w_b = np.atleast_2d(atoms.points), atoms.weights
    else:
        pts_b, w_b = _field_atoms(nu, grid, max_side)
    keep_b = w_b > 0
    pts_b, w_b = pts_b[keep_b], w_b[keep_b]
    w_b = w_b * (w_a.sum() / w_b.sum())
    cost = np.power(_pairwise_dist(pts_a, pts_b), p)
    ma = DiscreteMeasure(weights=w_a, points=pts_a)
    mb = DiscreteMeasure(weights=w_b, points=pts_b)
    return solve_discrete_ot(ma, mb, cost).value


# ---------------------------------------------------------------------------
# Fixed-target subproblem (P_nu).

@dataclass
class CitySolution:
    mu: ScalarField
    nu: DiscreteMeasure
    value: float
    potential: ScalarField
    multiplier: float
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0
    assignment: np.ndarray | None = None
    transport_value: float = 0.0


def _mass_for_level(level, psi, spread, cell_area):
    u = spread.inverse_derivative(np.maximum(level - psi, 0.0))
    return cell_area * float(u.sum())


def _solve_level(psi, spread, cell_area, target, hi_cap: float = 1e6):
    """Bisection for the constant C with h^2 sum (f')^{-1}((C - psi)_+) = target."""
    lo = float(psi.min())
    width = 1.0
    hi = lo + width
    while _mass_for_level(hi, psi, spread, cell_area) < target:
        width *= 2.0
        hi = lo + width
        if width > hi_cap:
            raise BisectionFailureError("level bracket exceeded its growth cap")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _mass_for_level(mid, psi, spread, cell_area) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def solve_p_nu(nu: DiscreteMeasure, p: float, spread: SpreadSpec, grid: Grid,
               tol: float = 1e-6, max_iter: int = 400, theta: float = 0.3,
               mu0: ScalarField | None = None,
               transport: GridAtomTransport | None = None) -> CitySolution:
    """Minimize W_p^p(mu, nu) + integral f(u) over densities mu = u of unit
    mass, by the damped fixed point of the optimality characterization
    u = (f')^{-1}((C - psi)_+) with psi the mu-side transport potential
    (extended everywhere by c-transform) and C the mass multiplier.
    """
    total = nu.total_mass
    if abs(total - 1.0) > 1e-8:
        raise MassMismatchError("target measure must be a probability")
    cell_pts = grid.cell_points()
    if transport is None:
        transport = GridAtomTransport(cell_pts, nu.points, p)
    u = (mu0.values.ravel() if mu0 is not None else
         np.full(grid.n_cells, 1.0 / (grid.n_cells * grid.cell_area)))

    converged = False
    psi = None
    level = 0.0
    assign = None
    t_value = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        masses = u * grid.cell_area
        # after the first pass the atom potentials only need a warm refresh
        budget = 400 if it == 1 else 40
        psi, beta, assign, t_value = transport.solve(masses, nu.weights, max_ascent=budget)
        level = _solve_level(psi, spread, grid.cell_area, 1.0)
        u_new = spread.inverse_derivative(np.maximum(level - psi, 0.0))
        change = float(grid.cell_area * np.abs(u_new - u).sum())
        u = (1.0 - theta) * u + theta * u_new
        if change * theta <= tol:
            converged = True
            break
    masses = u * grid.cell_area
    psi, beta, assign, t_value = transport.solve(masses, nu.weights)

    mu_field = ScalarField((u / (u.sum() * grid.cell_area)).reshape(grid.nx, grid.ny), grid)
    spread_val = float(grid.cell_area * np.sum(spread.f(mu_field.values)))
    resid = float(grid.cell_area * np.abs(
        u - spread.inverse_derivative(np.maximum(level - psi, 0.0))
    ).sum())
    return CitySolution(
        mu=mu_field,
        nu=nu,
        value=t_value + spread_val,
        potential=ScalarField(psi.reshape(grid.nx, grid.ny), grid),
        multiplier=level,
        converged=converged,
        iterations=it,
        residual=resid,
        assignment=assign,
        transport_value=t_value,
    )


# ---------------------------------------------------------------------------
# Quadratic city: closed-form geometry helpers and the alternating solver.

def quadratic_city_radius(lam: float) -> float:
    """Radius of the resident ball for the quadratic functional in 2-D: the
    parabolic profile lam/(2 lam + 1) (r^2 - rho^2) integrates to one when
    r = (2 (2 lam + 1) / (pi lam))^(1/4)."""
    if lam <= 0:
        raise InputFormatError("lambda must be positive")
    return float((2.0 * (2.0 * lam + 1.0) / (np.pi * lam)) ** 0.25)


def quadratic_city_profile(grid: Grid, lam: float, center=None) -> ScalarField:
    """Closed-form resident density sampled at cell centers."""
    r = quadratic_city_radius(lam)
    lx, ly = grid.extent
    if center is None:
        center = (0.5 * lx, 0.5 * ly)
    xc, yc = grid.cell_centers()
    rho2 = (xc - center[0]) ** 2 + (yc - center[1]) ** 2
    u = lam / (2.0 * lam + 1.0) * np.maximum(r * r - rho2, 0.0)
    return ScalarField(u, grid)


@dataclass
class QuadraticCityResult:
    mu: ScalarField
    nu: DiscreteMeasure
    value: float
    history: list[float]
    converged: bool
    iterations: int
    potential: ScalarField
    multiplier: float
    transport_value: float = 0.0
    spread_value: float = 0.0
    concentration_value: float = 0.0
    residual: float = 0.0


def _uniform_atoms(grid: Grid, n_side: int):
    lx, ly = grid.extent
    xs = (np.arange(n_side) + 0.5) * lx / n_side
    ys = (np.arange(n_side) + 0.5) * ly / n_side
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    w = np.full(pts.shape[0], 1.0 / pts.shape[0])
    return pts, w


def solve_quadratic_city(lam: float, grid: Grid, tol: float = 1e-5,
                         max_iter: int = 80, n_atom_side: int = 12,
                         inner_tol: float = 1e-6) -> QuadraticCityResult:
    """Minimize W_2^2(mu, nu) + ||u||_2^2 + lam * interaction(nu) by
    alternating the fixed-target subproblem for mu with a damped best-response
    move of the service atoms.

    Given the transport plan, the optimal position of an atom receiving
    conditional barycenter b_j is (b_j + 2 lam b) / (1 + 2 lam) with b the
    overall barycenter, which is the homothety the closed-form solution
    predicts; moves are accepted only if the total value does not increase.
    """
    r = quadratic_city_radius(lam)
    lx, ly = grid.extent
    if 2.0 * r > min(lx, ly):
        raise DomainTooSmallError(
            f"resident ball of diameter {2 * r:.3f} exceeds the domain {lx:.3f}x{ly:.3f}"
        )
    spread = SpreadSpec.quadratic()
    cell_pts = grid.cell_points()

    atom_pts, atom_w = _uniform_atoms(grid, n_atom_side)
    mu = None
    history: list[float] = []
    best_value = np.inf
    converged = False
    last_sol = None
    step_damp = 1.0

    beta_prev = None
    it = 0
    for it in range(1, max_iter + 1):
        nu = DiscreteMeasure(weights=atom_w, points=atom_pts)
        transport = GridAtomTransport(cell_pts, atom_pts, 2.0)
        if beta_prev is not None and beta_prev.shape == transport.beta.shape:
            transport.beta = beta_prev.copy()
        sol = solve_p_nu(nu, 2.0, spread, grid, tol=inner_tol, mu0=mu,
                         transport=transport)
        beta_prev = transport.beta.copy()
        mu = sol.mu
        masses = (mu.values * grid.cell_area).ravel()
        g_val = 2.0 * lam * _weighted_variance(atom_pts, atom_w)
        value = sol.value + g_val
        prev_best = best_value
        if value <= best_value:
            best_value = value
            last_sol = (sol, atom_pts.copy(), atom_w.copy())
            history.append(value)  # accepted iterations only
        if value > prev_best - tol * (1.0 + abs(value)) and it > 1:
            converged = True
            break

        # atom best response given the current assignment
        assign = sol.assignment
        load = np.bincount(assign, weights=masses, minlength=atom_w.shape[0])
        sums_x = np.bincount(assign, weights=masses * cell_pts[:, 0], minlength=atom_w.shape[0])
        sums_y = np.bincount(assign, weights=masses * cell_pts[:, 1], minlength=atom_w.shape[0])
        bary = np.array([float(masses @ cell_pts[:, 0]), float(masses @ cell_pts[:, 1])])
        keep = load > 0
        with np.errstate(invalid="ignore"):
            bx = np.where(keep, sums_x / np.maximum(load, 1e-300), 0.0)
            by = np.where(keep, sums_y / np.maximum(load, 1e-300), 0.0)
        target = np.column_stack([
            (bx + 2.0 * lam * bary[0]) / (1.0 + 2.0 * lam),
            (by + 2.0 * lam * bary[1]) / (1.0 + 2.0 * lam),
        ])
        atom_pts = atom_pts.copy()
        atom_pts[keep] = atom_pts[keep] + step_damp * (target[keep] - atom_pts[keep])
        atom_pts = atom_pts[keep]
        atom_w = load[keep] / load[keep].sum()
        if beta_prev is not None:
            beta_prev = beta_prev[keep]

    sol, pts, w = last_sol
    spread_val = sol.value - sol.transport_value
    return QuadraticCityResult(
        mu=sol.mu,
        nu=DiscreteMeasure(weights=w, points=pts),
        value=best_value,
        history=history,
        converged=converged,
        iterations=it,
        potential=sol.potential,
        multiplier=sol.multiplier,
        transport_value=sol.transport_value,
        spread_value=spread_val,
        concentration_value=best_value - sol.value,
        residual=sol.residual,
    )


def _weighted_variance(pts: np.ndarray, w: np.ndarray) -> float:
    """Trace of the covariance of a weighted cloud (weights normalized)."""
    ww = w / w.sum()
    center = ww @ pts
    d = pts - center[None, :]
    return float(ww @ np.sum(d * d, axis=1))


def barycenter_of(field: ScalarField) -> np.ndarray:
    xc, yc = field.grid.cell_centers()
    masses = field.values * field.grid.cell_area
    total = masses.sum()
    return np.array([float((masses * xc).sum() / total), float((masses * yc).sum() / total)])


def second_moment_of(field: ScalarField, center=None) -> float:
    xc, yc = field.grid.cell_centers()
    masses = field.values * field.grid.cell_area
    total = masses.sum()
    if center is None:
        center = barycenter_of(field)
    rho2 = (xc - center[0]) ** 2 + (yc - center[1]) ** 2
    return float((masses * rho2).sum() / total)


# ---------------------------------------------------------------------------
# Atomic concentration: few poles with subadditive size costs.

@dataclass
class AtomicCityResult:
    k: int
    mu: ScalarField
    nu: DiscreteMeasure
    value: float
    per_k: dict[int, float]
    catchments_connected: bool
    converged: bool
    assignment: np.ndarray | None = None
    transport_value: float = 0.0
    spread_value: float = 0.0
    concentration_value: float = 0.0
    residual: float = 0.0


def _initial_poles(grid: Grid, k: int) -> np.ndarray:
    lx, ly = grid.extent
    cx, cy = 0.5 * lx, 0.5 * ly
    if k == 1:
        return np.array([[cx, cy]])
    radius = 0.25 * min(lx, ly)
    ang = 2.0 * np.pi * np.arange(k) / k
    return np.column_stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)])


def _catchments_connected(assign: np.ndarray, grid: Grid, masses: np.ndarray) -> bool:
    """Flood fill each pole's set of occupied cells (4-neighborhood)."""
    amap = assign.reshape(grid.nx, grid.ny)
    occupied = masses.reshape(grid.nx, grid.ny) > 1e-14
    for label in np.unique(amap[occupied]):
        cells = (amap == label) & occupied
        idx = np.argwhere(cells)
        if len(idx) == 0:
            continue
        seen = np.zeros_like(cells)
        stack = [tuple(idx[0])]
        seen[tuple(idx[0])] = True
        while stack:
            i, j = stack.pop()
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if 0 <= a < grid.nx and 0 <= b < grid.ny and cells[a, b] and not seen[a, b]:
                    seen[a, b] = True
                    stack.append((a, b))
        if not np.array_equal(seen, cells):
            return False
    return True


def minimize_with_atomic_G(p: float, spread: SpreadSpec, conc: ConcentrationSpec,
                           k_max: int, grid: Grid, tol: float = 1e-5,
                           max_outer: int = 40, inner_tol: float = 1e-6,
                           poles0: np.ndarray | None = None) -> AtomicCityResult:
    """Minimize W_p^p(mu, nu) + integral f(u) + sum_k g(a_k) over densities mu
    and atom clouds nu with at most k_max poles: exhaustive sweep over the
    pole count, alternating the mu subproblem, pole position best responses,
    and projected-gradient pole sizes."""
    if conc.kind != "atomic":
        raise InputFormatError("minimize_with_atomic_G needs an atomic concentration spec")
    if k_max < 1:
        raise InputFormatError("k_max must be at least one")
    cell_pts = grid.cell_points()
    best = None
    per_k: dict[int, float] = {}

    for k in range(1, k_max + 1):
        pts = _initial_poles(grid, k) if poles0 is None or k != len(poles0) else np.array(poles0, dtype=float)
        w = np.full(k, 1.0 / k)
        mu = None
        best_state = None  # (value, sol, pts, w)
        for _ in range(max_outer):
            nu = DiscreteMeasure(weights=w, points=pts)
            transport = GridAtomTransport(cell_pts, pts, p)
            sol = solve_p_nu(nu, p, spread, grid, tol=inner_tol, mu0=mu, transport=transport)
            mu = sol.mu
            masses = (mu.values * grid.cell_area).ravel()
            value = sol.value + float(np.sum(conc.g(w)))
            prev_best = best_state[0] if best_state is not None else np.inf
            if value > prev_best:
                break  # worsened: keep the recorded best
            best_state = (value, sol, pts.copy(), w.copy())
            if value > prev_best - tol * (1.0 + abs(value)):
                break  # improvement below tolerance: converged

            # pole positions: best response within each catchment
            assign = sol.assignment
            pts = pts.copy()
            for j in range(k):
                sel = assign == j
                if not masses[sel].sum() > 0:
                    continue
                pts[j] = _pole_best_position(cell_pts[sel], masses[sel], pts[j], p)

            # pole sizes: projected gradient with the atom potentials as the
            # transport-share gradient
            transport = GridAtomTransport(cell_pts, pts, p)
            _, beta, _, _ = transport.solve(masses, w)
            gprime = _numeric_derivative(conc.g, w)
            step = 0.1
            w_new = _simplex_project(w - step * (gprime + beta))
            w = np.maximum(w_new, 1e-9)
            w = w / w.sum()

        value_k, sol, pts_k, w_k = best_state
        per_k[k] = value_k
        if best is None or value_k < best[0]:
            masses = (sol.mu.values * grid.cell_area).ravel()
            best = (value_k, k, sol, pts_k, w_k,
                    _catchments_connected(sol.assignment, grid, masses))

    value, k, sol, pts, w, connected = best
    return AtomicCityResult(
        k=k,
        mu=sol.mu,
        nu=DiscreteMeasure(weights=w, points=pts),
        value=value,
        per_k=per_k,
        catchments_connected=connected,
        converged=True,
        assignment=sol.assignment,
        transport_value=sol.transport_value,
        spread_value=sol.value - sol.transport_value,
        concentration_value=value - sol.value,
        residual=sol.residual,
    )


def _pole_best_position(points: np.ndarray, masses: np.ndarray, start: np.ndarray,
                        p: float) -> np.ndarray:
    """Minimize sum_i m_i |x_i - y|^p over y by exact barycenter (p = 2) or
    per-coordinate golden-section descent."""
    if p == 2.0:
        return (masses @ points) / masses.sum()

    y = np.array(start, dtype=float)
    span = points.max(axis=0) - points.min(axis=0) + 1e-9

    def cost_at(yy):
        d = np.sqrt(np.sum((points - yy[None, :]) ** 2, axis=1))
        return float(np.dot(masses, np.power(d, p)))

    gr = (np.sqrt(5.0) - 1.0) / 2.0
    for _ in range(3):
        for axis in (0, 1):
            lo = y[axis] - span[axis]
            hi = y[axis] + span[axis]
            c = hi - gr * (hi - lo)
            d = lo + gr * (hi - lo)
            for _ in range(40):
                yc = y.copy(); yc[axis] = c
                yd = y.copy(); yd[axis] = d
                if cost_at(yc) < cost_at(yd):
                    hi = d
                else:
                    lo = c
                c = hi - gr * (hi - lo)
                d = lo + gr * (hi - lo)
            y[axis] = 0.5 * (lo + hi)
    return y


def _numeric_derivative(g, w, h: float = 1e-7):
    w = np.asarray(w, dtype=float)
    return (np.asarray(g(w + h)) - np.asarray(g(np.maximum(w - h, 0.0)))) / (2 * h)


def _simplex_project(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    cond = u - css / idx > 0
    rho = idx[cond][-1]
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)
