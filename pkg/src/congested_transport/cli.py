"""Command-line front end: parse problem files, dispatch solvers, and emit
machine-readable reports (report.json plus plot-ready CSV artifacts).

Exit codes: 0 converged, 1 input error, 2 solver returned its best iterate
without meeting the tolerance. Reports are byte-stable across runs with equal
inputs and seed, except for the timing block.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import congestion, grids, kantorovich, network, urbanplan, wardrop
from .beckmann import solve_beckmann, solve_dual_quadratic
from .errors import CongestedTransportError, InputFormatError


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_report(out_dir: Path, command: str, config: dict, inputs: dict,
                  results: dict, t0: float) -> None:
    report = {
        "command": command,
        "config": config,
        "inputs": {str(k): {"sha256": _sha256(v)} for k, v in inputs.items()},
        "results": results,
        "timing": {"seconds": time.time() - t0},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _csv(path, array, header=None):
    arr = np.atleast_2d(np.asarray(array))
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("#" + ",".join(header) + "\n")
        for row in arr:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def _parse_demand(path, net: network.Network):
    """Demand file: 'demand <s> <d> <v>' lines, or 'mu <label> <v>' and
    'nu <label> <v>' lines for prescribed marginals."""
    label_to_id = {lab: i for i, lab in enumerate(net.labels or [])}
    fixed: dict[tuple[int, int], float] = {}
    mu: dict[int, float] = {}
    nu: dict[int, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            kind = parts[0].lower()
            if kind == "demand" and len(parts) == 4:
                s, d = label_to_id.get(parts[1]), label_to_id.get(parts[2])
                if s is None or d is None:
                    raise InputFormatError(f"{path}:{lineno}: unknown node label")
                fixed[(s, d)] = fixed.get((s, d), 0.0) + float(parts[3])
            elif kind in ("mu", "nu") and len(parts) == 3:
                node = label_to_id.get(parts[1])
                if node is None:
                    raise InputFormatError(f"{path}:{lineno}: unknown node label")
                (mu if kind == "mu" else nu)[node] = float(parts[2])
            else:
                raise InputFormatError(f"{path}:{lineno}: unrecognized demand line")
    if fixed and (mu or nu):
        raise InputFormatError(f"{path}: mix of fixed and marginal demand lines")
    if fixed:
        gamma = np.zeros((len(net.sources), len(net.dests)))
        s_pos = {s: i for i, s in enumerate(net.sources)}
        d_pos = {d: i for i, d in enumerate(net.dests)}
        for (s, d), v in fixed.items():
            if s not in s_pos or d not in d_pos:
                raise InputFormatError(f"{path}: demand endpoint not a declared source/dest")
            gamma[s_pos[s], d_pos[d]] += v
        return wardrop.DemandSpec.fixed(gamma)
    mu_vec = np.array([mu.get(s, 0.0) for s in net.sources])
    nu_vec = np.array([nu.get(d, 0.0) for d in net.dests])
    return wardrop.DemandSpec.marginals(mu_vec, nu_vec)


def _edge_specs(net: network.Network, default: congestion.CongestionSpec):
    if not net.edge_cost_tags:
        return default
    return [congestion.CongestionSpec.from_config(tag) if tag else default
            for tag in net.edge_cost_tags]


def _cmd_wardrop(args) -> int:
    t0 = time.time()
    net = network.load_network(args.net)
    network.validate_network(net)
    default_spec = congestion.CongestionSpec.from_config(args.H)
    spec = _edge_specs(net, default_spec)
    demand = _parse_demand(args.demand, net)
    if demand.kind == "fixed":
        res = wardrop.solve_fixed_demand(net, spec, demand.gamma,
                                         tol=args.tol, max_iter=args.max_iter)
    else:
        res = wardrop.solve_variable_demand(net, spec, demand.mu, demand.nu,
                                            tol=args.tol, max_iter=args.max_iter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(e, net.edges[e][0], net.edges[e][1], res.flows[e], res.xi[e])
            for e in range(net.n_edges)]
    _csv(out / "flows.csv", rows, header=["edge", "tail", "head", "flow", "xi"])
    _csv(out / "coupling.csv", res.coupling)
    _write_report(out, "wardrop", _resolved(args, H=args.H),
                  {"net": args.net, "demand": args.demand},
                  {
                      "objective": res.objective,
                      "relative_gap": res.relative_gap,
                      "iterations": res.iterations,
                      "converged": res.converged,
                      "demand_kind": demand.kind,
                  }, t0)
    return 0 if res.converged else 2


def _load_cost(args, mu, nu):
    if args.cost:
        cost = np.loadtxt(args.cost, delimiter=",", ndmin=2)
        return cost, {"cost": args.cost}
    return kantorovich.lp_cost_matrix(mu, nu, args.metric_p), {}


def _cmd_ot(args) -> int:
    t0 = time.time()
    mu = kantorovich.load_measure(args.mu)
    nu = kantorovich.load_measure(args.nu)
    cost, extra_inputs = _load_cost(args, mu, nu)
    res = kantorovich.solve_discrete_ot(mu, nu, cost)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _csv(out / "coupling.csv", res.coupling.plan)
    _csv(out / "phi.csv", res.potentials.phi[:, None])
    _csv(out / "psi.csv", res.potentials.psi[:, None])
    _write_report(out, "ot", _resolved(args, metric_p=args.metric_p),
                  {"mu": args.mu, "nu": args.nu, **extra_inputs},
                  {
                      "value": res.value,
                      "dual_value": res.dual_value,
                      "iterations": res.iterations,
                      "duality_gap_rel": abs(res.value - res.dual_value) / (1 + abs(res.value)),
                  }, t0)
    return 0


def _cmd_beckmann(args) -> int:
    t0 = time.time()
    mu = grids.load_scalar_csv(args.mu)
    nu = grids.load_scalar_csv(args.nu)
    grid = mu.grid
    spec = congestion.CongestionSpec.from_config(args.H)
    res = solve_beckmann(mu, nu, spec, grid, tol=args.tol, max_iter=args.max_iter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grids.save_vector_csv(res.v, out / "vx.csv", out / "vy.csv")
    results = {
        "cost": res.cost,
        "iterations": res.iterations,
        "converged": res.converged,
        "div_residual": res.div_residual,
        "split_residual": res.split_residual,
        "dual_value": res.dual_value,
        "certificate_gap": res.certificate_gap,
    }
    if spec.family == "quadratic":
        _, v_ref = solve_dual_quadratic(mu, nu, grid)
        from .beckmann import _ops, _rms_norms
        ops = _ops(grid)
        ref_cost = float(grid.cell_area * np.sum(
            spec.H(_rms_norms((ops.R @ ops.faces_of(v_ref)).reshape(-1, 4)))))
        results["poisson_reference_cost"] = ref_cost
        results["poisson_rel_diff"] = abs(res.cost - ref_cost) / max(abs(ref_cost), 1e-300)
    _write_report(out, "beckmann", _resolved(args, H=args.H),
                  {"mu": args.mu, "nu": args.nu}, results, t0)
    return 0 if res.converged else 2


def _cmd_city(args) -> int:
    t0 = time.time()
    with open(args.config, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    gspec = cfg.get("grid", {})
    grid = grids.Grid(nx=int(gspec.get("nx", 64)), ny=int(gspec.get("ny", 64)),
                      h=float(gspec.get("h", 1.0 / 64)))
    p = float(cfg.get("p", 2))
    tol = float(cfg.get("tol", 1e-6))
    spread_cfg = cfg.get("spread", {"family": "quadratic"})
    if spread_cfg.get("family") == "quadratic":
        spread = urbanplan.SpreadSpec.quadratic()
    else:
        spread = urbanplan.SpreadSpec.power(float(spread_cfg["m"]))
    conc_cfg = cfg.get("concentration", {"kind": "interaction"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if conc_cfg.get("kind") == "atomic":
        g_tag = conc_cfg.get("g", "power")
        if g_tag != "power":
            raise InputFormatError(f"unknown atomic pole cost {g_tag!r} (supported: 'power')")
        conc = urbanplan.ConcentrationSpec.atomic_power(float(conc_cfg.get("exponent", 0.5)))
        res = urbanplan.minimize_with_atomic_G(p, spread, conc,
                                               k_max=int(cfg.get("k_max", 3)),
                                               grid=grid, tol=tol)
        results = {
            "value": res.value,
            "k": res.k,
            "per_k": {str(k): v for k, v in res.per_k.items()},
            "catchments_connected": res.catchments_connected,
            "decomposition": {
                "transport": res.transport_value,
                "spread": res.spread_value,
                "concentration": res.concentration_value,
            },
            "residuals": {"characterization_l1": res.residual},
            "converged": res.converged,
        }
        converged = res.converged
        mu_field, nu_atoms = res.mu, res.nu
        potential = None
        multiplier = None
    else:
        lam = float(cfg.get("lambda", 1.0))
        res = urbanplan.solve_quadratic_city(lam, grid, tol=tol,
                                             n_atom_side=int(cfg.get("n_atom_side", 12)))
        results = {
            "value": res.value,
            "iterations": res.iterations,
            "converged": res.converged,
            "radius_analytic": urbanplan.quadratic_city_radius(lam),
            "multiplier": res.multiplier,
            "decomposition": {
                "transport": res.transport_value,
                "spread": res.spread_value,
                "concentration": res.concentration_value,
            },
            "residuals": {"characterization_l1": res.residual},
        }
        converged = res.converged
        mu_field, nu_atoms = res.mu, res.nu
        potential = res.potential
        multiplier = res.multiplier

    grids.save_scalar_csv(mu_field, out / "mu.csv")
    if potential is not None:
        grids.save_scalar_csv(potential, out / "potential.csv")
        results["multiplier"] = multiplier
    _csv(out / "nu_atoms.csv",
         np.column_stack([nu_atoms.points, nu_atoms.weights]),
         header=["x", "y", "weight"])
    _write_report(out, "city", {"config_file": str(args.config), **cfg, "seed": args.seed},
                  {"config": args.config}, results, t0)
    return 0 if converged else 2


def _parse_firms(path):
    """Firm file reuses the point format; the trailing column is the price
    (which, unlike a mass, may be negative)."""
    pts = []
    prices = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0].lower() != "point" or len(parts) < 3:
                raise InputFormatError(f"{path}:{lineno}: expected 'point <coords...> <price>'")
            vals = [float(x) for x in parts[1:]]
            pts.append(vals[:-1])
            prices.append(vals[-1])
    return np.array(pts), np.array(prices)


def _cmd_hotelling(args) -> int:
    t0 = time.time()
    firm_points, prices = _parse_firms(args.firms)
    consumers = kantorovich.load_measure(args.consumers)
    firms = kantorovich.DiscreteMeasure(weights=np.ones(len(prices)), points=firm_points)
    assignment, demands = kantorovich.hotelling_demands(
        firms.points, prices, consumers, metric_p=args.metric_p)
    recovered = kantorovich.hotelling_recover_prices(
        firms.points, demands, consumers, metric_p=args.metric_p)
    shift = prices - recovered
    roundtrip = float(np.abs(shift - shift[0]).max())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _csv(out / "demands.csv", np.column_stack([
        firms.points, prices, demands, recovered]),
         header=["x"] * firms.points.shape[1] + ["price", "demand", "recovered_price"])
    _csv(out / "assignment.csv", assignment[:, None])
    _write_report(out, "hotelling", _resolved(args, metric_p=args.metric_p),
                  {"firms": args.firms, "consumers": args.consumers},
                  {
                      "demands": demands.tolist(),
                      "recovered_prices": recovered.tolist(),
                      "roundtrip_error": roundtrip,
                  }, t0)
    return 0


def _cmd_selftest(args) -> int:
    t0 = time.time()
    failures = []

    def check(name, ok):
        print(f"[selftest] {name}: {'PASS' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)

    # two-route congestion game with one congested and one constant road
    net = network.Network(n_nodes=2, edges=[(0, 1), (0, 1)], sources=[0], dests=[1])
    spec = [congestion.CongestionSpec.quadratic(), congestion.CongestionSpec.monomial(1.0)]
    res = wardrop.solve_fixed_demand(net, spec, [[1.0]], tol=1e-8)
    check("two-route equilibrium", abs(res.objective - 0.5) < 1e-6 and res.relative_gap <= 1e-8)

    # forced transport between two unit atoms at distance one
    mu = kantorovich.DiscreteMeasure(weights=np.array([1.0]), points=np.array([[0.0]]))
    nu = kantorovich.DiscreteMeasure(weights=np.array([1.0]), points=np.array([[1.0]]))
    check("two-atom transport", abs(kantorovich.wasserstein_p(mu, nu, 1.0) - 1.0) < 1e-12)

    # one-dimensional flow matches the cumulative-sum solution
    g1 = grids.Grid(nx=16, ny=1, h=1.0 / 16)
    rng = np.random.default_rng(3)
    a = rng.random((16, 1)); a /= a.sum() * g1.cell_area
    b = rng.random((16, 1)); b /= b.sum() * g1.cell_area
    f = (a - b).ravel()
    vx = np.concatenate([[0.0], np.cumsum(g1.h * f)])
    resb = solve_beckmann(grids.ScalarField(a, g1), grids.ScalarField(b, g1),
                          congestion.CongestionSpec.quadratic(), g1, tol=1e-10)
    check("one-dimensional flow", float(np.abs(resb.v.vx.ravel() - vx).max()) < 1e-8)

    # hotelling price recovery on the analytic split instance
    grid_pts = np.linspace(0.0, 1.0, 401)[:, None]
    consumers = kantorovich.DiscreteMeasure(weights=np.full(401, 1.0 / 401), points=grid_pts)
    firm_pts = np.array([[0.0], [1.0]])
    prices = np.array([0.0, 0.5])
    _, demands = kantorovich.hotelling_demands(firm_pts, prices, consumers, metric_p=1.0)
    rec = kantorovich.hotelling_recover_prices(firm_pts, demands, consumers, metric_p=1.0)
    check("hotelling round trip", float(np.abs(rec - prices).max()) < 1e-6)

    out = Path(args.out)
    _write_report(out, "selftest", _resolved(args), {},
                  {"failures": failures, "passed": not failures}, t0)
    return 0 if not failures else 1


def _resolved(args, **extra) -> dict:
    conf = {
        "tol": getattr(args, "tol", None),
        "max_iter": getattr(args, "max_iter", None),
        "seed": getattr(args, "seed", None),
        "out": str(getattr(args, "out", ".")),
        "threads": int(os.environ.get("CT_THREADS", "1")),
    }
    conf.update(extra)
    return conf


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="congested-transport",
        description="Solvers for congestion-aware optimal transport problems.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--max-iter", dest="max_iter", type=int, default=5000)
        p.add_argument("--seed", type=int, default=0)

    pw = sub.add_parser("wardrop", help="congested traffic assignment on a network")
    pw.add_argument("--net", required=True)
    pw.add_argument("--demand", required=True)
    pw.add_argument("--H", default="quadratic",
                    help="'quadratic' | 'affine_power a p' | 'monomial p'")
    common(pw)
    pw.set_defaults(func=_cmd_wardrop)

    po = sub.add_parser("ot", help="discrete optimal transport with dual potentials")
    po.add_argument("--mu", required=True)
    po.add_argument("--nu", required=True)
    po.add_argument("--metric", nargs=2, metavar=("KIND", "P"), default=None,
                    help="'lp <p>' ground metric from coordinates")
    po.add_argument("--cost", default=None, help="explicit cost matrix CSV")
    common(po)
    po.set_defaults(func=_cmd_ot)

    pb = sub.add_parser("beckmann", help="grid minimal congested flow")
    pb.add_argument("--mu", required=True)
    pb.add_argument("--nu", required=True)
    pb.add_argument("--H", default="quadratic")
    common(pb)
    pb.set_defaults(func=_cmd_beckmann)

    pc = sub.add_parser("city", help="urban-planning functional minimization")
    pc.add_argument("--config", required=True, help="problem config JSON")
    common(pc)
    pc.set_defaults(func=_cmd_city)

    ph = sub.add_parser("hotelling", help="influence regions, demands, price recovery")
    ph.add_argument("--firms", required=True, help="measure file; weights are prices")
    ph.add_argument("--consumers", required=True)
    ph.add_argument("--metric", nargs=2, metavar=("KIND", "P"), default=None)
    common(ph)
    ph.set_defaults(func=_cmd_hotelling)

    ps = sub.add_parser("selftest", help="run the embedded oracle suite")
    common(ps)
    ps.set_defaults(func=_cmd_selftest)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    metric = getattr(args, "metric", None)
    if metric is not None:
        if metric[0] != "lp":
            print(f"error: unknown metric kind {metric[0]!r}", file=sys.stderr)
            return 1
        args.metric_p = float(metric[1])
    elif hasattr(args, "metric"):
        args.metric_p = 1.0 if args.command == "hotelling" else 2.0
    try:
        return args.func(args)
    except CongestedTransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
