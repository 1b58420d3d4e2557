"""Command-line driver: relax, extract, certify, export, rdv."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, extract, model, relax, sdp, transcribe, validate
from .model import DISCRETE, SIGNED, BoundaryCondition, ImpulsiveOCP, SemialgebraicSet
from .poly import Polynomial

log = logging.getLogger(__name__)

PROBLEM_DIR = Path(__file__).with_name("problems")


class ProblemFileError(ValueError):
    pass


# --- problem files -------------------------------------------------------------

_SECTIONS = {
    "name": None,
    "variables": {"states", "ranges"},
    "horizon": {"T", "free_final_time"},
    "dynamics": {"f", "G"},
    "costs": {"h", "H", "abs", "h_T"},
    "sets": {"X"},
    "boundary": {"initial", "terminal"},
    "options": {"tv_bound", "control_mode", "U"},
    "relaxation": {"orders", "discrete_identity", "scaled"},
}
_BOUNDARY_KEYS = {"kind", "point", "lo", "hi", "region"}


def _number(v, where: str) -> float:
    if isinstance(v, bool):
        raise ProblemFileError(f"{where}: expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(Fraction(v.strip()))
        except (ValueError, ZeroDivisionError):
            raise ProblemFileError(f"{where}: cannot read {v!r} as a number") from None
    raise ProblemFileError(f"{where}: expected a number, got {v!r}")


def _poly(spec, n_vars: int, where: str) -> Polynomial:
    """``[[coef, [e_t, e_x1, ...]], ...]`` to a polynomial."""
    if not isinstance(spec, list):
        raise ProblemFileError(f"{where}: polynomial must be a list of [coefficient, exponents]")
    pairs = []
    for i, term in enumerate(spec):
        if not (isinstance(term, list) and len(term) == 2 and isinstance(term[1], list)):
            raise ProblemFileError(f"{where}[{i}]: term must be [coefficient, [exponents]]")
        exps = term[1]
        if len(exps) != n_vars or any(not isinstance(e, int) or isinstance(e, bool) or e < 0 for e in exps):
            raise ProblemFileError(f"{where}[{i}]: exponent vector needs {n_vars} nonnegative integers")
        pairs.append((_number(term[0], f"{where}[{i}]"), tuple(exps)))
    return Polynomial.from_pairs(n_vars, pairs)


def _vector(v, n: int, where: str) -> tuple:
    if not isinstance(v, list) or len(v) != n:
        raise ProblemFileError(f"{where}: expected a list of {n} numbers")
    return tuple(_number(x, f"{where}[{i}]") for i, x in enumerate(v))


def _check_keys(table: dict, allowed, where: str):
    unknown = set(table) - set(allowed)
    if unknown:
        raise ProblemFileError(f"{where}: unknown key(s) {sorted(unknown)}")


def _boundary(spec: dict, n: int, nv: int, where: str) -> BoundaryCondition:
    _check_keys(spec, _BOUNDARY_KEYS, where)
    kind = spec.get("kind")
    if kind == "dirac":
        return BoundaryCondition.dirac(_vector(spec.get("point"), n, f"{where}.point"))
    if kind == "uniform_box":
        return BoundaryCondition.uniform_box(_vector(spec.get("lo"), n, f"{where}.lo"),
                                             _vector(spec.get("hi"), n, f"{where}.hi"))
    if kind == "free":
        region = spec.get("region", [])
        return BoundaryCondition.free(SemialgebraicSet(
            nv, tuple(_poly(p, nv, f"{where}.region[{i}]") for i, p in enumerate(region))))
    raise ProblemFileError(f"{where}.kind must be dirac, uniform_box or free")


def parse_problem(doc: Dict[str, Any]) -> tuple[ImpulsiveOCP, dict]:
    """Build the problem and the relaxation defaults from a parsed document."""
    _check_keys(doc, _SECTIONS, "top level")
    for sec, keys in _SECTIONS.items():
        if keys is not None and sec in doc:
            if not isinstance(doc[sec], dict):
                raise ProblemFileError(f"[{sec}] must be a table")
            _check_keys(doc[sec], keys, f"[{sec}]")
    var = doc.get("variables", {})
    names = var.get("states")
    if not names or not all(isinstance(s, str) for s in names):
        raise ProblemFileError("[variables].states must list the state names")
    n = len(names)
    nv = n + 1
    ranges = None
    if "ranges" in var:
        rr = var["ranges"]
        if not isinstance(rr, list) or len(rr) != n:
            raise ProblemFileError("[variables].ranges needs one [lo, hi] per state")
        ranges = tuple(_vector(r, 2, f"[variables].ranges[{i}]") for i, r in enumerate(rr))
    hor = doc.get("horizon", {})
    if "T" not in hor:
        raise ProblemFileError("[horizon].T is required")
    T = _number(hor["T"], "[horizon].T")
    free_T = bool(hor.get("free_final_time", False))
    dyn = doc.get("dynamics", {})
    fs = dyn.get("f")
    if not isinstance(fs, list) or len(fs) != n:
        raise ProblemFileError(f"[dynamics].f needs {n} polynomials")
    f = tuple(_poly(p, nv, f"[dynamics].f[{i}]") for i, p in enumerate(fs))
    Gs = dyn.get("G")
    if not isinstance(Gs, list) or len(Gs) != n or not Gs or not isinstance(Gs[0], list):
        raise ProblemFileError(f"[dynamics].G needs {n} rows")
    m = len(Gs[0])
    G = []
    for i, row in enumerate(Gs):
        if not isinstance(row, list) or len(row) != m:
            raise ProblemFileError(f"[dynamics].G[{i}] needs {m} entries")
        G.append(tuple(_poly(p, nv, f"[dynamics].G[{i}][{j}]") for j, p in enumerate(row)))
    costs = doc.get("costs", {})
    zero = Polynomial.zero(nv)

    def per_control(key):
        if key not in costs:
            return tuple(zero for _ in range(m))
        if not isinstance(costs[key], list) or len(costs[key]) != m:
            raise ProblemFileError(f"[costs].{key} needs {m} polynomials")
        return tuple(_poly(p, nv, f"[costs].{key}[{j}]") for j, p in enumerate(costs[key]))

    h = _poly(costs.get("h", []), nv, "[costs].h")
    h_T = _poly(costs.get("h_T", []), nv, "[costs].h_T")
    X = SemialgebraicSet(nv, tuple(_poly(p, nv, f"[sets].X[{i}]")
                                   for i, p in enumerate(doc.get("sets", {}).get("X", []))))
    bnd = doc.get("boundary", {})
    if "initial" not in bnd or "terminal" not in bnd:
        raise ProblemFileError("[boundary] needs initial and terminal tables")
    opts = doc.get("options", {})
    mode = opts.get("control_mode", SIGNED)
    if mode not in (SIGNED, DISCRETE):
        raise ProblemFileError(f"[options].control_mode must be {SIGNED!r} or {DISCRETE!r}")
    U = tuple(_vector(u, m, f"[options].U[{i}]") for i, u in enumerate(opts.get("U", [])))
    tv = _number(opts["tv_bound"], "[options].tv_bound") if "tv_bound" in opts else None
    ocp = ImpulsiveOCP(
        n_states=n, m_controls=m, T=T, f=f, G=tuple(G), h=h, H=per_control("H"), h_T=h_T, X=X,
        initial=_boundary(bnd["initial"], n, nv, "[boundary.initial]"),
        terminal=_boundary(bnd["terminal"], n, nv, "[boundary.terminal]"),
        abs_cost=per_control("abs"), tv_bound=tv, control_mode=mode, U=U,
        free_final_time=free_T, state_ranges=ranges, state_names=tuple(names),
        name=str(doc.get("name", "")),
    )
    rel = doc.get("relaxation", {})
    settings = {
        "orders": [int(d) for d in rel.get("orders", [])],
        "discrete_identity": rel.get("discrete_identity", "full"),
        "scaled": bool(rel.get("scaled", True)),
    }
    if settings["discrete_identity"] not in ("time", "full"):
        raise ProblemFileError("[relaxation].discrete_identity must be 'time' or 'full'")
    return ocp, settings


def resolve_problem_path(name: str) -> Path:
    """A path, or the stem of a bundled problem file."""
    p = Path(name)
    if p.exists():
        return p
    stem = p.name
    bundled = PROBLEM_DIR / (stem if stem.endswith(".toml") else stem + ".toml")
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"no problem file {name!r}")


def load_problem(name: str) -> tuple[ImpulsiveOCP, dict]:
    path = resolve_problem_path(name)
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ProblemFileError(f"{path}: {exc}") from None
    ocp, settings = parse_problem(doc)
    diags = model.errors(model.validate(ocp))
    if diags:
        raise ProblemFileError("; ".join(str(d) for d in diags))
    return ocp, settings


def bundled_problems() -> List[str]:
    return sorted(p.stem for p in PROBLEM_DIR.glob("*.toml"))


# --- reports -------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isinf(x) or math.isnan(x):
            return str(x)
        return f"{x:.6g}"
    return str(x)


def _provenance(args) -> dict:
    return {"tool": "impulsive-moments", "version": __version__,
            "options": {k: v for k, v in vars(args).items() if k != "func"}}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and (math.isinf(obj) or math.isnan(obj)):
        return str(obj)
    return obj


def _emit(args, report: dict, text_lines: Sequence[str]):
    if args.json:
        print(json.dumps(_jsonable(report), indent=2))
    else:
        print("\n".join(text_lines))


def _solver_opts(args) -> sdp.SolverOptions:
    return sdp.SolverOptions(tol_feas=args.tol, tol_gap=args.tol)


def _orders(args, settings) -> List[int]:
    if args.order is None and args.order_max is None and settings["orders"]:
        return list(settings["orders"])
    lo = args.order if args.order is not None else 1
    hi = args.order_max if args.order_max is not None else lo
    if hi < lo:
        raise ValueError("--order-max below --order")
    return list(range(lo, hi + 1))


def _relax(ocp, d, args, settings):
    identity = args.identity or settings["discrete_identity"]
    return relax.solve_relaxation(ocp, d, _solver_opts(args), scaled=settings["scaled"],
                                  discrete_identity=identity)


def _record(res) -> dict:
    return {"order": res.order, "status": res.status, "bound": res.bound,
            "seconds": res.seconds, "iterations": res.solve.iterations,
            "residuals": dict(res.solve.residuals)}


def cmd_relax(args) -> int:
    ocp, settings = load_problem(args.problem)
    rows = []
    for d in _orders(args, settings):
        res = _relax(ocp, d, args, settings)
        rows.append(_record(res))
    report = {"provenance": _provenance(args), "problem": ocp.name, "orders": rows}
    lines = [f"# {ocp.name}", f"{'d':>3} {'status':>18} {'bound':>12} {'seconds':>9}"]
    lines += [f"{r['order']:>3} {r['status']:>18} {_fmt(r['bound']):>12} {_fmt(r['seconds']):>9}" for r in rows]
    _emit(args, report, lines)
    return 0


def cmd_extract(args) -> int:
    ocp, settings = load_problem(args.problem)
    d = _orders(args, settings)[-1]
    res = _relax(ocp, d, args, settings)
    report = {"provenance": _provenance(args), "relaxation": _record(res)}
    lines = [f"# {ocp.name} order {d}: {res.status}, bound {_fmt(res.bound)}"]
    if not res.ok:
        report["plan"] = None
        report["warning"] = f"no extraction: relaxation status {res.status}"
        lines.append(report["warning"])
        _emit(args, report, lines)
        return 0
    plan = extract.identify_controls(res, tol=args.rank_tol)
    report["plan"] = plan.to_dict()
    if not plan.atomic:
        report["warning"] = extract.NON_ATOMIC
        chans = ", ".join(str(j + 1) for j in sorted(plan.non_atomic))
        lines.append(f"warning: {extract.NON_ATOMIC} on channel {chans}")
    for j, ch in enumerate(plan.channels):
        lines.append(f"channel {j + 1}: " + (", ".join(f"({_fmt(t)}, {_fmt(u)})" for t, u in ch) or "none"))
    for name, r in plan.residuals.items():
        lines.append(f"residual {name}: {_fmt(r)}")
    for c in plan.cancellations:
        if "padding" in c:
            lines.append(f"cancelled padding of mass {_fmt(c['padding'])} between nu+ and nu- on channel {c['channel'] + 1}")
        else:
            lines.append(f"cancelled opposite atoms on channel {c['channel'] + 1} at t={_fmt(c['time'])}")
    if args.output:
        Path(args.output).write_text(json.dumps(_jsonable(plan.to_dict()), indent=2))
    _emit(args, report, lines)
    return 0


def _read_plan(spec: str, m: int) -> extract.ImpulsePlan:
    path = Path(spec)
    data = json.loads(path.read_text() if path.exists() else spec)
    if isinstance(data, dict) and "plan" in data:
        data = data["plan"]
    if isinstance(data, list):
        # bare list of [t, u1, ..., um]
        chans = [[] for _ in range(m)]
        for row in data:
            for j in range(m):
                if row[1 + j] != 0:
                    chans[j].append((float(row[0]), float(row[1 + j])))
        return extract.ImpulsePlan(chans)
    return extract.ImpulsePlan.from_dict(data)


def cmd_certify(args) -> int:
    ocp, settings = load_problem(args.problem)
    plan = _read_plan(args.plan, ocp.m_controls)
    d = _orders(args, settings)[-1]
    traj = validate.simulate(ocp, plan, steps=args.steps, horizon=args.horizon)
    if not traj.feasible(args.feas_tol):
        msg = (f"infeasible plan: state violation {_fmt(traj.violation)}, "
               f"terminal error {_fmt(traj.terminal_error)}")
        print(msg, file=sys.stderr)
        return 2
    res = _relax(ocp, d, args, settings)
    rep = validate.certify(res, traj, eps=args.eps, feas_tol=args.feas_tol)
    report = {"provenance": _provenance(args), "relaxation": _record(res), "gap": rep.to_dict()}
    lines = [f"# {ocp.name} order {d}",
             f"lower bound {_fmt(rep.lower_bound)}", f"simulated cost {_fmt(rep.cost)}",
             f"gap {_fmt(rep.gap)} (relative {_fmt(rep.relative_gap)})", rep.verdict]
    if args.trajectory:
        Path(args.trajectory).write_text(traj.to_csv())
    _emit(args, report, lines)
    return 0


def cmd_export(args) -> int:
    ocp, settings = load_problem(args.problem)
    d = _orders(args, settings)[-1]
    work, _ = model.scale(ocp) if settings["scaled"] else (ocp, None)
    identity = args.identity or settings["discrete_identity"]
    mp = transcribe.build(work, 2 * d, discrete_identity=identity)
    cp = relax.assemble(mp, d)
    text = sdp.export_sdpa(cp)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_rdv(args) -> int:
    x0 = [float(Fraction(v)) for v in args.x0]
    xf = [float(Fraction(v)) for v in args.xf]
    hm = validate.HcwModel(np.array(x0), np.array(xf), theta_f=args.theta_f)
    lp = validate.solve_rendezvous_lp(hm, args.grid)
    report = {"provenance": _provenance(args), "status": lp.status, "cost": lp.cost,
              "impulses": [[t, *u] for t, u in lp.nonzero]}
    lines = [f"status {lp.status}", f"V_LP {_fmt(lp.cost)}", f"{'theta':>10} {'u1':>12} {'u2':>12}"]
    lines += [f"{_fmt(t):>10} {_fmt(u[0]):>12} {_fmt(u[1]):>12}" for t, u in lp.nonzero]
    if args.trajectory:
        samples = validate.hcw_samples(hm, lp.nonzero)
        body = "\n".join(",".join(f"{v:.17g}" for v in row) for row in samples)
        Path(args.trajectory).write_text("theta,x1,x2,x3,x4\n" + body + "\n")
    _emit(args, report, lines)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="impulsive-moments", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp_, with_orders=True):
        sp_.add_argument("problem", help="problem file or bundled name (e.g. ex2)")
        if with_orders:
            sp_.add_argument("--order", type=int, default=None, help="relaxation order (first order for relax)")
            sp_.add_argument("--order-max", type=int, default=None, help="last order for relax")
        sp_.add_argument("--tol", type=float, default=1e-8, help="solver feasibility and gap tolerance")
        sp_.add_argument("--identity", choices=("time", "full"), default=None,
                         help="discrete-control probability identity")
        sp_.add_argument("--json", action="store_true", help="machine-readable output")
        sp_.add_argument("-v", "--verbose", action="store_true")

    r = sub.add_parser("relax", help="solve a range of relaxation orders")
    common(r)
    r.set_defaults(func=cmd_relax)
    e = sub.add_parser("extract", help="recover impulses from an optimal relaxation")
    common(e)
    e.add_argument("--rank-tol", type=float, default=1e-3)
    e.add_argument("-o", "--output", help="write the plan as JSON")
    e.set_defaults(func=cmd_extract)
    c = sub.add_parser("certify", help="simulate a plan and report the optimality gap")
    common(c)
    c.add_argument("plan", help="plan JSON file or inline JSON")
    c.add_argument("--steps", type=int, default=1000)
    c.add_argument("--horizon", type=float, default=None, help="final time (free final time problems)")
    c.add_argument("--eps", type=float, default=1e-4)
    c.add_argument("--feas-tol", type=float, default=1e-5)
    c.add_argument("--trajectory", help="write the simulated trajectory as CSV")
    c.set_defaults(func=cmd_certify)
    x = sub.add_parser("export", help="write the relaxation in sparse SDPA format")
    common(x)
    x.add_argument("-o", "--output")
    x.set_defaults(func=cmd_export)
    v = sub.add_parser("rdv", help="fixed-grid rendezvous LP")
    v.add_argument("--x0", nargs=4, default=["1", "0", "0", "0"])
    v.add_argument("--xf", nargs=4, default=["0", "0", "0", "0"])
    v.add_argument("--theta-f", type=float, default=2 * math.pi)
    v.add_argument("--grid", type=int, default=50)
    v.add_argument("--trajectory", help="write sampled trajectory CSV")
    v.add_argument("--json", action="store_true")
    v.add_argument("-v", "--verbose", action="store_true")
    v.set_defaults(func=cmd_rdv)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ProblemFileError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
