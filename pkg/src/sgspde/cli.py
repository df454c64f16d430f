"""Command-line front end: ``sgspde {check,simulate,verify,basis,spectral} --manifest PATH``.

Exit codes: 0 success, 2 hypothesis failure, 3 nonconvergence, 4 I/O or parse error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .fundsol import Propagator, decay_bound_check, residual_check, residual_scaling
from .grid import save_field
from .manifest import ManifestError, RunManifest, load_manifest, parse_measure
from .nemytskii import LocalityError, random_smooth_fields, verify_lip
from .noise import RankError, build_basis, check_spectral_condition
from .sgcalc import NotParabolicError, StressGrid
from .solver import (
    HypothesisError,
    NonConvergenceError,
    PathFailureError,
    StepProcess,
    ito_isometry_test,
    linear_crosscheck,
    mc_moments,
    sweep_T0,
    to_jsonable,
)

__all__ = ["main", "EXIT_OK", "EXIT_HYPOTHESIS", "EXIT_NONCONVERGENCE", "EXIT_IO"]

EXIT_OK, EXIT_HYPOTHESIS, EXIT_NONCONVERGENCE, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "SGSPDE_OUT"
DEFAULT_OUT = "sgspde_out"
LIP_SAMPLES = 24

log = logging.getLogger("sgspde")


class _Failure(Exception):
    def __init__(self, code: int, message: str, report: dict | None = None):
        self.code, self.report = code, report
        super().__init__(message)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise _Failure(EXIT_IO, f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise _Failure(EXIT_IO, f"cannot write {path}: {exc.strerror}") from None


def _load(args) -> RunManifest:
    overrides = {"seed": args.seed, "threads": args.threads, "paths": args.paths}
    return load_manifest(args.manifest, overrides)


def _lip_checks(run: RunManifest) -> list:
    spec = run.spec
    rng = np.random.default_rng([run.config.seed, 31337])
    t_samples = np.linspace(0.0, spec.T, 3)
    items = []
    for name, g in (("gamma", spec.gamma), ("sigma", spec.sigma)):
        center = spec.u0 if g.locality is not None else None
        radius = 0.9 * g.locality.radius if g.locality is not None else 1.0
        fields = random_smooth_fields(spec.grid, 2 * LIP_SAMPLES, g.source_index, radius, rng,
                                      center=center)
        pairs = list(zip(fields[::2], fields[1::2]))
        try:
            rep = verify_lip(g, pairs, t_samples, center)
        except LocalityError as exc:
            items.append((f"{name}_lip_bounds", False, {"reason": str(exc)}))
            continue
        ok = rep.ok and rep.real_preserving
        items.append((f"{name}_lip_bounds", ok, {
            "C": g.C, "bound_margin": rep.bound_margin, "lipschitz_margin": rep.lipschitz_margin,
            "boundedness_constant": rep.boundedness_constant,
            "lipschitz_constant": rep.lipschitz_constant, "real_preserving": rep.real_preserving,
            "n_samples": rep.n_samples}))
    return items


def _check_report(run: RunManifest) -> dict:
    spec = run.spec
    report = spec.validate()
    items = list(report.items)
    try:
        spec.measure.check_symmetry(spec.grid)
        items.append(("measure_symmetry", True, {}))
    except ValueError as exc:
        items.append(("measure_symmetry", False, {"reason": str(exc)}))
    items.extend(_lip_checks(run))
    ok = all(i[1] for i in items)
    hyps = [{"name": n, "pass": bool(p), **to_jsonable(d)} for n, p, d in items]
    return {"ok": ok, "hypotheses": hyps, "version": __version__}


def cmd_check(args) -> int:
    run = _load(args)
    rep = _check_report(run)
    _emit(args, "check.json", rep)
    for h in rep["hypotheses"]:
        print(f"{'PASS' if h['pass'] else 'FAIL'}  {h['name']}"
              + (f"  ({h['reason']})" if h.get("reason") else ""))
    if not rep["ok"]:
        failed = ", ".join(h["name"] for h in rep["hypotheses"] if not h["pass"])
        raise _Failure(EXIT_HYPOTHESIS, f"hypotheses failed: {failed}")
    return EXIT_OK


def _emit(args, name: str, rep: dict):
    if args.out or os.environ.get(OUT_ENV):
        _write_json(_out_dir(args) / name, rep)


def cmd_simulate(args) -> int:
    run = _load(args)
    check = _check_report(run)
    if not check["ok"]:
        failed = ", ".join(h["name"] for h in check["hypotheses"] if not h["pass"])
        raise _Failure(EXIT_HYPOTHESIS, f"hypotheses failed: {failed}", check)
    spec, config = run.spec, run.config
    out = _out_dir(args)
    horizon = run.options.get("simulate", {}).get("horizon") if isinstance(
        run.options.get("simulate"), dict) else None
    if horizon is None:
        sweep = sweep_T0(spec, config)
        horizon = sweep.T0
        sweep_dict = sweep.as_dict()
    else:
        horizon = float(horizon)
        sweep_dict = None
    n_snap = min(args.snapshots or 0, config.paths)
    moments = mc_moments(spec, config, horizon, keep_solutions=n_snap > 0)
    try:
        moments.to_csv(out / "moments.csv")
    except OSError as exc:
        raise _Failure(EXIT_IO, f"cannot write moments: {exc.strerror}") from None
    snap_dir = out / "snapshots"
    for sol in moments.solutions[:n_snap]:
        if not sol.converged:
            continue
        for k, f in enumerate(sol.fields(spec.grid)):
            try:
                snap_dir.mkdir(exist_ok=True)
                save_field(f, snap_dir / f"path{sol.path:05d}_t{k:05d}")
            except OSError as exc:
                raise _Failure(EXIT_IO, f"cannot write snapshot: {exc.strerror}") from None
    report = {
        "version": __version__, "seed": config.seed, "threads": config.threads,
        "paths": moments.n_paths, "failed_paths": moments.n_failed,
        "failures": {str(k): v for k, v in moments.failures.items()},
        "horizon": horizon, "contraction": sweep_dict, "check": check,
        "snapshots": n_snap,
    }
    _write_json(out / "report.json", report)
    _write_json(out / "manifest.json", {"manifest": run.raw, "seed": config.seed,
                                        "threads": config.threads, "paths": config.paths,
                                        "version": __version__, "source": run.source})
    print(f"T0 = {horizon:g}; {moments.n_paths} paths ({moments.n_failed} failed); "
          f"E||u(T0)||^2 = {moments.mean[-1]:.6g} +- {moments.std_err[-1]:.2g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    run = _load(args)
    spec, config = run.spec, run.config
    items = []
    P = Propagator(spec.generator, spec.grid)
    T = spec.T
    try:
        if spec.generator.kind == "multiplier":
            t, s = T / 2, T / 4
            r = residual_check(P, t, s, _probe(spec))
            items.append(("residual", r.value < 1e-6, {"value": r.value, "step": r.step,
                                                        "threshold": 1e-6}))
        else:
            lags = [lag for lag in (0.0025, 0.005, 0.01, 0.02) if lag * 1.01 < T]
            slope, res = residual_scaling(P, 0.0, _probe(spec), lags)
            items.append(("residual_scaling", 0.7 <= slope <= 1.3,
                          {"slope": slope, "residuals": res, "lags": lags}))
    except ValueError as exc:
        items.append(("residual", False, {"reason": str(exc)}))
    try:
        lam = spec.lam
        d = decay_bound_check(P, lam, lam, StressGrid.from_grid(spec.grid))
        items.append(("decay_bound", d.ok, {"max_ratio": d.max_ratio, "l": lam, "lambda": lam}))
    except (NotParabolicError, ValueError) as exc:
        items.append(("decay_bound", False, {"reason": str(exc)}))
    try:
        n = max(1, int(round(T / config.dt)))
        times = np.arange(n) * config.dt
        sigma = spec.sigma.evaluate(0.0, spec.grid, spec.u0.values)
        sp = StepProcess.propagated(P, n * config.dt, times, sigma)
        iso = ito_isometry_test(spec, config, sp)
        items.append(("ito_isometry", iso.ok, {"mc_mean": iso.mc_mean, "std_err": iso.std_err,
                                               "hs_sum": iso.hs_sum, "z_score": iso.z_score,
                                               "paths": iso.n_paths}))
    except (RankError, ValueError) as exc:
        items.append(("ito_isometry", False, {"reason": str(exc)}))
    if spec.is_linear:
        try:
            cc = linear_crosscheck(spec, config, 0, T)
            items.append(("linear_crosscheck", cc.ok, {"relative_l2": cc.relative_l2, "K": cc.K,
                                                       "K_full": cc.K_full}))
        except (RankError, ValueError) as exc:
            items.append(("linear_crosscheck", False, {"reason": str(exc)}))
    rep = {"ok": all(i[1] for i in items), "version": __version__,
           "checks": [{"name": nm, "pass": bool(ok), **to_jsonable(dd)} for nm, ok, dd in items]}
    _emit(args, "verify.json", rep)
    for c in rep["checks"]:
        extra = {k: v for k, v in c.items() if k not in ("name", "pass") and not isinstance(v, list)}
        print(f"{'PASS' if c['pass'] else 'FAIL'}  {c['name']}  {json.dumps(extra)}")
    if not rep["ok"]:
        raise _Failure(EXIT_HYPOTHESIS, "verification failed")
    return EXIT_OK


def _probe(spec):
    u = spec.u0
    if u.norm() > 0:
        return u
    return spec.grid.field(np.exp(-np.sum(spec.grid.x**2, axis=-1)))


def cmd_basis(args) -> int:
    run = _load(args)
    spec, config = run.spec, run.config
    basis = build_basis(spec.measure, spec.grid, config.K, config.symmetry)
    out = _out_dir(args) / "basis"
    for j in range(basis.K):
        try:
            out.mkdir(exist_ok=True)
            save_field(basis.field(j), out / f"h{j:04d}")
        except OSError as exc:
            raise _Failure(EXIT_IO, f"cannot write basis: {exc.strerror}") from None
    gram_err = float(np.max(np.abs(basis.gram() - np.eye(basis.K))))
    _write_json(out / "basis.json", {"K": basis.K, "symmetry": basis.symmetry,
                                     "frequencies": basis.frequencies.tolist(),
                                     "gram_error": gram_err, "version": __version__})
    print(f"K = {basis.K}; max |Gram - I| = {gram_err:.3g}; wrote {out}")
    return EXIT_OK


def cmd_spectral(args) -> int:
    run = _load(args)
    spec = run.spec
    opts = run.options.get("spectral") or {}
    if not isinstance(opts, dict):
        raise ManifestError("spectral: expected a mapping", source=run.source)
    lams = [float(v) for v in opts.get("lambdas", np.round(np.linspace(0.0, 0.45, 10), 10))]
    mu_p = float(opts.get("mu_prime", spec.generator.hypo_order[1] if spec.generator.hypo_order
                          else 0.0))
    measure = parse_measure(opts["measure"], spec.grid.dim, source=run.source) \
        if "measure" in opts else spec.measure
    rows = []
    for lam in lams:
        r = check_spectral_condition(measure, lam, mu_p, spec.grid)
        rows.append({"lambda": lam, "mu_prime": mu_p, "value": r.value,
                     "admissible": bool(r.admissible), "divergent": bool(r.divergent),
                     "growth_ratio": r.growth_ratio, "reason": r.reason})
    out = _out_dir(args)
    try:
        with open(out / "spectral.csv", "w", newline="") as fh:
            fh.write("lambda,mu_prime,value,admissible,divergent,growth_ratio\n")
            for r in rows:
                fh.write(f"{r['lambda']:.17g},{r['mu_prime']:.17g},{r['value']:.17g},"
                         f"{int(r['admissible'])},{int(r['divergent'])},{r['growth_ratio']:.17g}\n")
    except OSError as exc:
        raise _Failure(EXIT_IO, f"cannot write spectral table: {exc.strerror}") from None
    _write_json(out / "spectral.json", {"rows": rows, "version": __version__})
    for r in rows:
        verdict = "divergent" if r["divergent"] else ("admissible" if r["admissible"] else "rejected")
        val = "inf" if math.isinf(r["value"]) else f"{r['value']:.6g}"
        print(f"lambda={r['lambda']:<6g} value={val:<12} {verdict}")
    return EXIT_OK


COMMANDS = {"check": cmd_check, "simulate": cmd_simulate, "verify": cmd_verify,
            "basis": cmd_basis, "spectral": cmd_spectral}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgspde", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", required=True, help="YAML or JSON run manifest")
    common.add_argument("--seed", type=int, help="override config.seed")
    common.add_argument("--threads", type=int, help="override config.threads")
    common.add_argument("--paths", type=int, help="override config.paths")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--snapshots", type=int, nargs="?", const=1, default=0,
                        help="write every time slice of the first N paths (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_IO if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _Failure as exc:
        if exc.report is not None and (args.out or os.environ.get(OUT_ENV)):
            _write_json(_out_dir(args) / "report.json", exc.report)
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (HypothesisError, NotParabolicError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except (NonConvergenceError, PathFailureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
