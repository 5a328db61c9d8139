"""Discrete optimal transport: exact couplings, dual potentials, Wasserstein
costs, the potential-as-derivative identity, and Hotelling price recovery.

The solver is a successive-shortest-path min-cost flow on the dense bipartite
graph. It maintains dual feasibility and complementary slackness throughout,
so the returned potentials certify optimality by strong duality.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateDualError,
    InputFormatError,
    MassMismatchError,
    NonFiniteCostError,
)

MASS_RTOL = 1e-10
MARGINAL_ATOL = 1e-8
FEAS_ATOL = 1e-8
SLACK_ATOL = 1e-6
SUPPORT_EPS = 1e-8


@dataclass
class DiscreteMeasure:
    """Weighted point masses in R^d (points may be omitted when only a cost
    matrix is available)."""

    weights: np.ndarray
    points: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 1:
            raise InputFormatError("weights must be one-dimensional")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise InputFormatError("weights must be finite and nonnegative")
        if self.points is not None:
            self.points = np.asarray(self.points, dtype=float)
            if self.points.ndim == 1:
                self.points = self.points[:, None]
            if self.points.shape[0] != self.weights.shape[0]:
                raise InputFormatError("points and weights disagree in length")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())


@dataclass
class Coupling:
    """Transport plan with prescribed marginals."""

    plan: np.ndarray

    def row_sums(self) -> np.ndarray:
        return self.plan.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.plan.sum(axis=0)


@dataclass
class PotentialPair:
    """Dual pair: phi per source point, psi per target point, with
    phi[i] + psi[j] <= cost[i, j] and equality on the support of the plan."""

    phi: np.ndarray
    psi: np.ndarray


@dataclass
class OTResult:
    coupling: Coupling
    potentials: PotentialPair
    value: float
    dual_value: float
    iterations: int


def lp_cost_matrix(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float) -> np.ndarray:
    """Pairwise |x - y|^p between the supports (Euclidean norm)."""
    if mu.points is None or nu.points is None:
        raise InputFormatError("lp metric requires point coordinates")
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    return np.power(dist, p)


def _check_inputs(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (mu.n, nu.n):
        raise InputFormatError(f"cost shape {cost.shape} != ({mu.n}, {nu.n})")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteCostError("cost matrix has non-finite entries")
    ta, tb = mu.total_mass, nu.total_mass
    if abs(ta - tb) > MASS_RTOL * max(1.0, ta, tb):
        raise MassMismatchError(f"total masses differ: {ta} vs {tb}")
    return cost


def solve_discrete_ot(mu: DiscreteMeasure, nu: DiscreteMeasure, cost) -> OTResult:
    """Exact optimal transport between two discrete measures.

    Returns the optimal plan, a feasible dual pair that is complementary-slack
    against the plan (phi normalized so that phi[0] = 0), the primal value and
    the dual value. Primal and dual agree up to float rounding, which is the
    optimality certificate.
    """
    cost = _check_inputs(mu, nu, cost)
    m, n = cost.shape
    a = mu.weights.copy()
    b = nu.weights.copy()
    total = a.sum()

    plan = np.zeros((m, n))
    if total <= 0:
        phi = np.zeros(m)
        psi = cost.min(axis=0) if m else np.zeros(n)
        return OTResult(Coupling(plan), PotentialPair(phi, psi), 0.0, 0.0, 0)

    tol = 1e-13 * max(1.0, total)

    # dual-feasible start: row minima, then column minima of the reduced cost
    u = cost.min(axis=1).astype(float)
    v = (cost - u[:, None]).min(axis=0)

    if n == 1:
        plan[:, 0] = a
        it = 1
    elif m == 1:
        plan[0, :] = b
        it = 1
    else:
        it = _ssp(cost, a, b, plan, u, v, tol)

    # zero-mass nodes carry no constraints; tighten them onto the c-transform
    dead_src = mu.weights <= 0
    if dead_src.any():
        u[dead_src] = (cost[dead_src] - v[None, :]).min(axis=1)
    dead_snk = nu.weights <= 0
    if dead_snk.any():
        v[dead_snk] = (cost[:, dead_snk] - u[:, None]).min(axis=0)

    # normalization: phi of the first source point is zero
    shift = u[0]
    u = u - shift
    v = v + shift

    value = float(np.sum(plan * cost))
    dual = float(np.dot(mu.weights, u) + np.dot(nu.weights, v))
    return OTResult(Coupling(plan), PotentialPair(u, v), value, dual, it)


def _ssp(cost, a, b, plan, u, v, tol):
    """Successive shortest paths with potentials on the dense bipartite graph.

    Invariants: cost - u[:,None] - v[None,:] >= 0 everywhere, and zero on
    every arc with plan > 0. Each augmentation zeroes a remaining supply, a
    remaining deficit, or a plan entry, so the loop is finite.
    """
    m, n = cost.shape
    a_rem = a.copy()
    b_rem = b.copy()
    iterations = 0
    guard = 50 * (m + n) + 1000

    while True:
        roots = a_rem > tol
        if not roots.any():
            break
        iterations += 1
        if iterations > guard:
            raise RuntimeError("transport solver exceeded its augmentation guard")

        dist_s = np.where(roots, 0.0, np.inf)
        dist_t = np.full(n, np.inf)
        done_s = np.zeros(m, dtype=bool)
        done_t = np.zeros(n, dtype=bool)
        parent_t = np.full(n, -1, dtype=np.int64)  # settled via forward arc from source
        parent_s = np.full(m, -1, dtype=np.int64)  # settled via backward arc from sink
        target = -1

        while True:
            ds = np.where(done_s, np.inf, dist_s)
            dt = np.where(done_t, np.inf, dist_t)
            i_best = int(np.argmin(ds))
            j_best = int(np.argmin(dt))
            best_s = ds[i_best]
            best_t = dt[j_best]
            if not np.isfinite(min(best_s, best_t)):
                raise RuntimeError("no augmenting path found; cost matrix disconnected?")
            if best_t <= best_s:
                # settle sink; stop at the nearest sink that still needs mass
                done_t[j_best] = True
                if b_rem[j_best] > tol:
                    target = j_best
                    break
                backward = (plan[:, j_best] > tol) & ~done_s
                if backward.any():
                    cand = dist_t[j_best]  # backward reduced cost is zero
                    upd = backward & (cand < dist_s)
                    dist_s[upd] = cand
                    parent_s[upd] = j_best
            else:
                done_s[i_best] = True
                rc = np.maximum(cost[i_best] - u[i_best] - v, 0.0)
                cand = dist_s[i_best] + rc
                upd = ~done_t & (cand < dist_t)
                dist_t[upd] = cand[upd]
                parent_t[upd] = i_best

        d_star = dist_t[target]
        # potential update keeps reduced costs nonnegative and support arcs tight
        u -= np.minimum(dist_s, d_star)
        v += np.minimum(dist_t, d_star)

        # walk back from the target sink to a root source
        arcs_fwd = []
        arcs_bwd = []
        j = target
        while True:
            i = int(parent_t[j])
            arcs_fwd.append((i, j))
            j_prev = int(parent_s[i])
            if j_prev < 0:
                root = i
                break
            arcs_bwd.append((i, j_prev))
            j = j_prev

        delta = min(a_rem[root], b_rem[target])
        for i, j2 in arcs_bwd:
            delta = min(delta, plan[i, j2])
        delta = max(delta, 0.0)

        for i, j2 in arcs_fwd:
            plan[i, j2] += delta
        for i, j2 in arcs_bwd:
            plan[i, j2] -= delta
            if plan[i, j2] < tol:
                plan[i, j2] = 0.0
        a_rem[root] -= delta
        b_rem[target] -= delta
        if a_rem[root] < tol:
            a_rem[root] = 0.0
        if b_rem[target] < tol:
            b_rem[target] = 0.0

    return iterations


def check_coupling(coupling: Coupling, mu: DiscreteMeasure, nu: DiscreteMeasure,
                   atol: float = MARGINAL_ATOL) -> float:
    """Largest marginal violation of the plan."""
    err_r = np.abs(coupling.row_sums() - mu.weights).max(initial=0.0)
    err_c = np.abs(coupling.col_sums() - nu.weights).max(initial=0.0)
    return float(max(err_r, err_c))


def check_potentials(pot: PotentialPair, coupling: Coupling, cost,
                     feas_atol: float = FEAS_ATOL, slack_atol: float = SLACK_ATOL) -> tuple[float, float]:
    """(max feasibility violation, max complementary-slackness violation)."""
    cost = np.asarray(cost, dtype=float)
    gap = pot.phi[:, None] + pot.psi[None, :] - cost
    feas = float(gap.max(initial=-np.inf))
    on_support = coupling.plan > SUPPORT_EPS
    slack = float(np.abs(gap[on_support]).max(initial=0.0))
    return feas, slack


def wasserstein_p(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float) -> float:
    """W_p^p(mu, nu), the optimal value for the cost |x - y|^p (not the root)."""
    if p < 1:
        raise InputFormatError(f"wasserstein exponent must be >= 1, got {p}")
    return solve_discrete_ot(mu, nu, lp_cost_matrix(mu, nu, p)).value


def wasserstein_distance(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float) -> float:
    """W_p(mu, nu) = (W_p^p)^(1/p)."""
    return wasserstein_p(mu, nu, p) ** (1.0 / p)


def _union_support(mu: DiscreteMeasure, mu1: DiscreteMeasure):
    """Common point list carrying both weight vectors (zero-padded)."""
    if mu.points is None or mu1.points is None:
        raise InputFormatError("gateaux check requires point coordinates")
    d = mu.points.shape[1]
    if mu1.points.shape[1] != d:
        raise InputFormatError("point dimensions differ")
    index: dict[bytes, int] = {}
    pts: list[np.ndarray] = []

    def key(row):
        return np.ascontiguousarray(row).tobytes()

    def intern(row):
        k = key(row)
        if k not in index:
            index[k] = len(pts)
            pts.append(row)
        return index[k]

    w0 = {}
    for row, w in zip(mu.points, mu.weights):
        w0[intern(row)] = w0.get(intern(row), 0.0) + w
    w1 = {}
    for row, w in zip(mu1.points, mu1.weights):
        w1[intern(row)] = w1.get(intern(row), 0.0) + w
    pts_arr = np.vstack(pts)
    a0 = np.zeros(len(pts))
    a1 = np.zeros(len(pts))
    for i, w in w0.items():
        a0[i] = w
    for i, w in w1.items():
        a1[i] = w
    return pts_arr, a0, a1


def _support_connected(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> bool:
    """True when the optimal-plan support graph joins every positive-mass node."""
    m, n = plan.shape
    parent = list(range(m + n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[rx] = ry

    thr = SUPPORT_EPS * max(1.0, plan.sum())
    ii, jj = np.nonzero(plan > thr)
    for i, j in zip(ii, jj):
        union(int(i), m + int(j))
    live = [i for i in range(m) if a[i] > 0] + [m + j for j in range(n) if b[j] > 0]
    if not live:
        return True
    root = find(live[0])
    return all(find(x) == root for x in live)


@dataclass
class GateauxReport:
    inner: float
    fd: dict[float, float] = field(default_factory=dict)
    err: dict[float, float] = field(default_factory=dict)

    @property
    def max_err(self) -> float:
        return max(self.err.values()) if self.err else 0.0


def gateaux_check(mu: DiscreteMeasure, nu: DiscreteMeasure, mu1: DiscreteMeasure,
                  p: float, eps_list) -> GateauxReport:
    """Compare the finite difference of eps -> W_p^p((1-eps)mu + eps*mu1, nu)
    against the potential pairing sum(phi * (mu1 - mu)).

    The source potential is extended off the support of mu by the c-transform
    of the target potential. Refuses (DegenerateDualError) when the optimal
    plan's support graph is disconnected, because then the potential is not
    unique and the derivative formula has no well-defined value.
    """
    pts, a0, a1 = _union_support(mu, mu1)
    if abs(a0.sum() - a1.sum()) > MASS_RTOL * max(1.0, a0.sum()):
        raise MassMismatchError("mu and mu1 must carry equal mass")
    base = DiscreteMeasure(weights=a0, points=pts)
    cost = lp_cost_matrix(base, nu, p)
    res = solve_discrete_ot(base, nu, cost)
    if not _support_connected(res.coupling.plan, a0, nu.weights):
        raise DegenerateDualError("optimal plan support is disconnected; potential not unique")

    live_cols = nu.weights > 0
    phi_ext = (cost[:, live_cols] - res.potentials.psi[None, live_cols]).min(axis=1)
    inner = float(np.dot(phi_ext, a1 - a0))

    report = GateauxReport(inner=inner)
    w0 = res.value
    for eps in eps_list:
        eps = float(eps)
        blend = DiscreteMeasure(weights=(1 - eps) * a0 + eps * a1, points=pts)
        w_eps = solve_discrete_ot(blend, nu, cost).value
        fd = (w_eps - w0) / eps
        report.fd[eps] = fd
        report.err[eps] = abs(fd - inner)
    return report


def hotelling_demands(firm_points: np.ndarray, prices: np.ndarray,
                      consumers: DiscreteMeasure, cost=None, metric_p: float = 1.0):
    """Assign each consumer to the firm minimizing access cost plus price.

    Ties go to the lowest firm index. Returns (assignment, demands) where
    assignment[k] is the chosen firm for consumer point k and demands[i] is
    the consumer mass captured by firm i.
    """
    firm_points = np.atleast_2d(np.asarray(firm_points, dtype=float))
    prices = np.asarray(prices, dtype=float)
    n_firms = firm_points.shape[0]
    if prices.shape != (n_firms,):
        raise InputFormatError("one price per firm required")
    if cost is None:
        firms = DiscreteMeasure(weights=np.ones(n_firms), points=firm_points)
        cost = lp_cost_matrix(firms, consumers, metric_p)
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (n_firms, consumers.n):
        raise InputFormatError(f"cost shape {cost.shape} != ({n_firms}, {consumers.n})")
    score = cost + prices[:, None]
    assignment = np.argmin(score, axis=0)
    demands = np.zeros(n_firms)
    np.add.at(demands, assignment, consumers.weights)
    return assignment, demands


def hotelling_recover_prices(firm_points: np.ndarray, demands: np.ndarray,
                             consumers: DiscreteMeasure, cost=None, metric_p: float = 1.0) -> np.ndarray:
    """Recover prices (up to a constant, firm 0 pinned to 0) from demands.

    The price vector is a dual potential of the transport from the firm
    measure sum_i d_i delta_{x_i} to the consumers. Within the optimal dual
    face we return the canonical minimal representative: the pointwise-least
    prices compatible with the served assignments, computed by a longest-path
    pass over the firm-exchange constraints. With the tie convention of
    hotelling_demands this inverts the demand map exactly whenever the
    assignment graph is connected.
    """
    firm_points = np.atleast_2d(np.asarray(firm_points, dtype=float))
    demands = np.asarray(demands, dtype=float)
    n_firms = firm_points.shape[0]
    firms = DiscreteMeasure(weights=demands, points=firm_points)
    if cost is None:
        cost = lp_cost_matrix(firms, consumers, metric_p)
    cost = np.asarray(cost, dtype=float)
    total = consumers.total_mass
    if abs(demands.sum() - total) > MASS_RTOL * max(1.0, total):
        raise MassMismatchError("demands must sum to the consumer mass")
    if n_firms == 1:
        return np.zeros(1)

    res = solve_discrete_ot(firms, consumers, cost)
    plan = res.coupling.plan
    thr = SUPPORT_EPS * max(1.0, total)

    # p_j - p_i >= max over consumers served by i of cost[i,x] - cost[j,x]
    bound = np.full((n_firms, n_firms), -np.inf)
    for i in range(n_firms):
        served = plan[i] > thr
        if not served.any():
            continue
        diff = cost[i, served][None, :] - cost[:, served]
        bound[:, i] = diff.max(axis=1)  # bound[j, i] = max_{x served by i} c[i,x] - c[j,x]
    prices = np.full(n_firms, -np.inf)
    prices[0] = 0.0
    for _ in range(n_firms):
        changed = False
        for i in range(n_firms):
            if not np.isfinite(prices[i]):
                continue
            cand = prices[i] + bound[:, i]
            upd = cand > prices + 1e-15
            if upd.any():
                prices[upd] = cand[upd]
                changed = True
        if not changed:
            break
    if not np.all(np.isfinite(prices)):
        # disconnected assignment graph: fall back to the raw LP dual
        fallback = -res.potentials.phi
        return fallback - fallback[0]
    return prices - prices[0]


def parse_measure(text: str) -> DiscreteMeasure:
    """Read 'point <x> [<y> ...] <weight>' lines ('#' starts a comment)."""
    pts = []
    ws = []
    dim = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0].lower() != "point" or len(parts) < 3:
            raise InputFormatError(f"line {lineno}: expected 'point <coords...> <weight>'")
        vals = [float(x) for x in parts[1:]]
        coords, w = vals[:-1], vals[-1]
        if dim is None:
            dim = len(coords)
        elif len(coords) != dim:
            raise InputFormatError(f"line {lineno}: inconsistent point dimension")
        pts.append(coords)
        ws.append(w)
    if not pts:
        raise InputFormatError("measure file contains no points")
    return DiscreteMeasure(weights=np.array(ws), points=np.array(pts))


def load_measure(path) -> DiscreteMeasure:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_measure(fh.read())
