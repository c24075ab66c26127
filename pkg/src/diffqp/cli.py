"""Command-line entry points: ``diffqp elastic|adp|portfolio|check-family|gradcheck``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import DiffQPError
from .family import FamilyLayer, FamilyMaps, canonicalize, dumps
from .tuner import Termination, pgd

log = logging.getLogger("diffqp")

EXIT_OK, EXIT_MAXITER, EXIT_FAIL = 0, 2, 3


def _exit_code(trace) -> int:
    if trace.terminated_by is Termination.CONVERGED:
        return EXIT_OK
    if trace.terminated_by is Termination.MAX_ITER:
        return EXIT_MAXITER
    return EXIT_FAIL


def _tune_overrides(args) -> dict:
    kw = {}
    if args.max_iter is not None:
        kw["max_iter"] = args.max_iter
    if args.eps_rel is not None:
        kw["eps_rel"] = args.eps_rel
    if args.eps_abs is not None:
        kw["eps_abs"] = args.eps_abs
    return kw


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _progress(e):
    log.info("p=%.6g alpha=%.3g accepted=%s", e.p, e.alpha, e.accepted)


def run_elastic(args) -> int:
    from .apps.elastic import ElasticConfig, ElasticProblem

    cfg = ElasticConfig(seed=args.seed)
    prob = ElasticProblem(cfg)
    trace = pgd(prob, cfg.omega0(), cfg.design_space(), cfg.tune_config(**_tune_overrides(args)), _progress)
    best = trace.best.omega
    n = cfg.n
    trace.write_csv(args.out / "trace.csv")
    _write_json(args.out / "design.json", {
        "omega": best.tolist(),
        "w": best[:n].tolist(),
        "lambda": float(10.0 ** best[n]),
        "gamma": float(10.0 ** best[n + 1]),
        "cv_rmse_initial": trace.iterations[0].p,
        "cv_rmse_final": trace.best.p,
        "terminated_by": trace.terminated_by.value,
    })
    with open(args.out / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "w_initial", "w_final"])
        for j in range(n):
            w.writerow([j, repr(float(trace.iterations[0].omega[j])), repr(float(best[j]))])
    return _exit_code(trace)


def run_adp(args) -> int:
    from .apps.adp import AdpConfig, AdpProblem

    cfg = AdpConfig(seed=args.seed)
    prob = AdpProblem(cfg)
    p_hat = prob.unconstrained_cost()
    trace = pgd(prob, prob.omega0(), prob.design_space(), cfg.tune_config(p_hat, **_tune_overrides(args)),
                _progress)
    best = trace.best.omega
    _write_json(args.out / "design.json", {
        "omega": best.tolist(),
        "Z": prob.Z(best).tolist(),
        "P_lqr": prob.P_lqr.tolist(),
        "cost_initial": trace.iterations[0].p,
        "cost_final": trace.best.p,
        "p_hat": p_hat,
        "terminated_by": trace.terminated_by.value,
    })
    trace.write_csv(args.out / "trace.csv")
    before, _ = prob.simulate(prob.omega0())
    after, _ = prob.simulate(best)
    with open(args.out / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "state_norm_initial", "state_norm_final", "input_norm_initial", "input_norm_final"])
        for t in range(before.u.shape[0]):
            w.writerow([t, repr(float(np.linalg.norm(before.x[t]))), repr(float(np.linalg.norm(after.x[t]))),
                        repr(float(np.linalg.norm(before.u[t]))), repr(float(np.linalg.norm(after.u[t])))])
    return _exit_code(trace)


def run_portfolio(args) -> int:
    from .apps.portfolio import PortfolioConfig, PortfolioProblem

    cfg = PortfolioConfig(seed=args.seed)
    prob = PortfolioProblem(cfg)
    trace = pgd(prob, cfg.omega0(), cfg.design_space(), cfg.tune_config(**_tune_overrides(args)), _progress)
    best = trace.best.omega
    trace.write_csv(args.out / "trace.csv")
    runs = {}
    for name in ("tune", "test"):
        runs[name] = (prob.run(cfg.omega0(), name)[0], prob.run(best, name)[0])
    _write_json(args.out / "design.json", {
        "omega": best.tolist(),
        "leverage": float(best[0]),
        "gamma_risk": float(10.0 ** best[1]),
        "gamma_hold": float(10.0 ** best[2]),
        "gamma_tc": float(10.0 ** best[3]),
        "sharpe_tune_initial": runs["tune"][0].sr,
        "sharpe_tune_final": runs["tune"][1].sr,
        "sharpe_test_initial": runs["test"][0].sr,
        "sharpe_test_final": runs["test"][1].sr,
        "terminated_by": trace.terminated_by.value,
    })
    with open(args.out / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", "t", "value_initial", "value_final"])
        for name, (b0, b1) in runs.items():
            for t in range(len(b0.V)):
                w.writerow([name, t, repr(float(b0.V[t])), repr(float(b1.V[t]))])
    return _exit_code(trace)


def check_family(args) -> int:
    text = Path(args.file).read_text()
    maps = FamilyMaps.from_json(json.loads(text))
    again = maps.dumps()
    if FamilyMaps.from_json(json.loads(again)).dumps() != again:
        print("round trip is not stable", file=sys.stderr)
        return EXIT_FAIL
    same = again == text
    print(json.dumps({"valid": True, "bitwise_round_trip": same, **maps.dims}))
    return EXIT_OK if same else EXIT_FAIL


def gradcheck(args) -> int:
    """Compare backward() against central differences of the solution map at random points."""
    maps = FamilyMaps.load(args.file)
    if maps.theta_ref is None:
        print("family file has no theta_ref to sample around", file=sys.stderr)
        return EXIT_FAIL
    rng = np.random.default_rng(args.seed)
    layer = FamilyLayer(maps)
    worst = 0.0
    skipped = 0
    h = args.step
    for _ in range(args.points):
        theta = maps.theta_ref * (1.0 + args.spread * rng.standard_normal(maps.d))
        x, sol, data = layer.forward(theta)
        dx = rng.standard_normal(maps.n)
        direction = rng.standard_normal(maps.d)
        g = layer.backward(dx, sol, data)
        xp, solp, _ = layer.forward(theta + h * direction)
        xm, solm, _ = layer.forward(theta - h * direction)
        if not (_same_active(solp, sol, data) and _same_active(solm, sol, data)):
            skipped += 1
            continue
        fd = float(dx @ (xp - xm)) / (2 * h)
        an = float(g @ direction)
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, rel)
    checked = args.points - skipped
    ok = checked > 0 and worst <= args.tol
    print(json.dumps({"points": args.points, "checked": checked, "skipped_active_set_change": skipped,
                      "max_rel_err": worst, "tol": args.tol, "pass": ok}))
    return EXIT_OK if ok else EXIT_FAIL


def _same_active(a, b, data, tol=1e-8):
    from .kkt_diff import detect_active

    return detect_active(a, data, tol) == detect_active(b, data, tol)


def export_families(args) -> int:
    """Write the family JSON files of the three experiments."""
    from .apps.adp import AdpConfig, AdpProblem
    from .apps.elastic import ElasticConfig, ElasticProblem
    from .apps.portfolio import PortfolioConfig, PortfolioProblem

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, maps in (
        ("elastic", ElasticProblem(ElasticConfig(seed=args.seed)).reference_maps()),
        ("adp", AdpProblem(AdpConfig(seed=args.seed, T=1)).reference_maps()),
        ("portfolio", PortfolioProblem(PortfolioConfig(seed=args.seed)).reference_maps()),
    ):
        (out / f"{name}.json").write_text(dumps(maps.to_json()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffqp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("elastic", run_elastic), ("adp", run_adp), ("portfolio", run_portfolio)):
        p = sub.add_parser(name, help=f"tune the {name} experiment")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--max-iter", type=int)
        p.add_argument("--eps-rel", type=float)
        p.add_argument("--eps-abs", type=float)
        p.set_defaults(func=fn)
    p = sub.add_parser("check-family", help="validate a family JSON file and check its round trip")
    p.add_argument("file")
    p.set_defaults(func=check_family)
    p = sub.add_parser("gradcheck", help="finite-difference check of backward() on a family file")
    p.add_argument("file")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--spread", type=float, default=0.05)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=gradcheck)
    p = sub.add_parser("export-families", help="write the experiment family files")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=export_families)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "out", None) is not None:
        args.out.mkdir(parents=True, exist_ok=True)
    try:
        return args.func(args)
    except (DiffQPError, ValueError, OSError, KeyError) as exc:
        print(f"diffqp: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
