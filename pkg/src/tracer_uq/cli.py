"""Command line: ``tracer-uq [options] {sample-field,convergence,run,compare,show-config}``.

Exit codes: 0 success, 2 configuration error, 3 convergence failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import estimators as est
from . import experiments as ex
from . import fields as fl
from .config import PRESETS, ConfigError, load_config, render_config
from .grids import GridError, ResourceError
from .ledger import FingerprintMismatch, LedgerError, SampleCache
from .problem import TracerModel
from .sampling import SampleEvaluator

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("tracer_uq")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tracer-uq", description=__doc__.splitlines()[0])
    p.add_argument("-c", "--config", help="INI configuration file")
    p.add_argument("-p", "--preset", help=f"preset name ({', '.join(sorted(PRESETS))})")
    p.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("-o", "--output", help="output directory (overrides run.output)")
    p.add_argument("-j", "--parallelism", type=int, help="worker processes (overrides run.parallelism)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sf = sub.add_parser("sample-field", help="draw Matérn fields and check their covariance")
    sf.add_argument("--samples", type=int, help="number of fields K")
    sub.add_parser("convergence", help="pilot samples per level and fitted rates")
    run = sub.add_parser("run", help="run one estimator")
    run.add_argument("method", choices=["mc", "qmc", "mlmc"])
    run.add_argument("--eps", type=float, help="RMSE tolerance (overrides estimator.eps)")
    cmp_ = sub.add_parser("compare", help="cost of MC, QMC and MLMC over a tolerance list")
    cmp_.add_argument("--eps-list", help="comma-separated tolerances (overrides estimator.eps_list)")
    cmp_.add_argument("--no-qmc", action="store_true", help="skip the QMC column")
    sub.add_parser("show-config", help="print the fully resolved configuration")
    return p


def _config(args):
    ov = list(args.overrides)
    if args.output:
        ov.append(f"run.output={args.output}")
    if args.parallelism:
        ov.append(f"run.parallelism={args.parallelism}")
    if getattr(args, "eps", None) is not None:
        ov.append(f"estimator.eps={args.eps}")
    if getattr(args, "eps_list", None):
        ov.append(f"estimator.eps_list={args.eps_list}")
    if getattr(args, "samples", None) is not None:
        ov.append(f"sample_field.samples={args.samples}")
    return load_config(args.config, args.preset, ov)


def _evaluator(cfg, model):
    cache = None
    if cfg.cache:
        cache = SampleCache(os.path.join(cfg.output, "samples.sqlite"), cfg.fingerprint)
    return SampleEvaluator(model, cfg.seed, cfg.parallelism, cache, cfg.estimator["qmc_randomizations"])


def cmd_sample_field(cfg) -> int:
    sfc = cfg.sample_field
    spec = cfg.spec
    from .grids import build_hierarchy
    ell = sfc["level"] or spec.max_level
    levels = build_hierarchy(spec.domain, spec.base_cells, ell, spec.max_vertices)
    lvl = levels[-1]
    params = spec.diffusion if sfc["field"] == "diffusion" else spec.velocity
    if params is None:
        raise ConfigError("sample_field.field = velocity needs a Model-1 configuration")
    K = sfc["samples"]
    report = ex.covariance_study(lvl, params, K, cfg.seed, batch=sfc["batch"])
    report["field"] = sfc["field"]
    n_snap = min(sfc["snapshots"], K)
    if n_snap:
        X = next(ex.draw_fields(lvl, params, n_snap, cfg.seed, batch=n_snap, index=1))
        for k in range(n_snap):
            fl.write_field_csv(os.path.join(cfg.output, f"field_{k}.csv"), lvl.outer, X[k])
            if sfc["field"] == "diffusion":
                from .grids import restrict_to_inner
                D = fl.diffusion_field(restrict_to_inner(X[k], lvl), spec.d_gad)
                fl.write_field_csv(os.path.join(cfg.output, f"diffusion_{k}.csv"), lvl.inner, D)
    ex.write_json(os.path.join(cfg.output, "covariance_report.json"), ex._clean(report))
    rows = [(r["pair"], r["r"], r["exact"], r.get("empirical"), r.get("stderr"), r.get("z")) for r in report["pairs"]]
    ex.write_csv(os.path.join(cfg.output, "covariance_report.csv"), ["pair", "r", "exact", "empirical", "stderr", "z"],
                 rows)
    log.info("covariance report: %d samples, passed=%s", K, report["passed"])
    return EXIT_OK


def cmd_convergence(cfg) -> int:
    model = TracerModel(cfg.spec)
    counts = list(cfg.estimator["pilot"])
    if len(counts) > model.max_level:
        raise ConfigError("estimator.pilot lists more levels than hierarchy.max_level")
    with _evaluator(cfg, model) as ev:
        res = est.mlmc_fixed(ev, counts)
    stats = res.stats
    rates = est.estimate_rates(stats)
    wall = [s.wall_per_sample for s in stats]
    wall_gamma = float(np.polyfit([s.level for s in stats], np.log2(wall), 1)[0]) if len(stats) > 1 else None
    ex.write_json(os.path.join(cfg.output, "rates.json"),
                  ex._clean(ex.rates_dict(rates, {"wall_gamma": wall_gamma, "pilot": counts})))
    ex.write_levels_csv(os.path.join(cfg.output, "levels.csv"), res)
    rows = [(s.level, s.n, s.max_abs_mean, s.max_variance, float(np.max(np.abs(s.sum_f / s.n))),
             float(np.max(s.fine_variance)), s.work_fine, s.work, s.wall_per_sample) for s in stats]
    ex.write_csv(os.path.join(cfg.output, "bias_variance.csv"),
                 ["level", "N", "mean_Y", "var_Y", "mean_Q", "var_Q", "work_fine", "C", "wall_per_sample"], rows)
    log.info("alpha=%.3f beta=%.3f gamma=%.3f", rates.alpha, rates.beta, rates.gamma)
    return EXIT_OK


def cmd_run(cfg, method: str) -> int:
    model = TracerModel(cfg.spec)
    e = cfg.estimator
    code = EXIT_OK
    with _evaluator(cfg, model) as ev:
        if method == "mlmc":
            tol = est.ToleranceConfig(eps=e["eps"], theta=e["theta"], n_init=e["n_init"], l_init=e["l_init"],
                                      l_max=e["l_max"], alpha0=e["alpha0"], beta0=e["beta0"],
                                      finest_cap=e["finest_cap"], max_iterations=e["max_iterations"])
            extra = {}
            try:
                res = est.run_mlmc(ev, tol, progress=lambda t: log.info("iteration %(iteration)d L=%(L)d N=%(N)s", t))
            except est.CapExceeded as exc:
                res, code = exc.result, EXIT_CONVERGENCE
                extra = {"error": str(exc), "feasible_theta": exc.theta, "feasible_eps": exc.eps}
            except est.ConvergenceError as exc:
                res, code = exc.result, EXIT_CONVERGENCE
                extra = {"error": str(exc)}
        elif method == "mc":
            lvl = e["mc_level"] or e["l_max"]
            res = est.run_mc(ev, lvl, e["mc_samples"])
            extra = {"level": lvl}
        else:
            lvl = e["qmc_level"] or max(e["l_max"] - 1, 1)
            extra = {"level": lvl}
            try:
                if e["qmc_points"]:
                    res = est.run_qmc(ev, lvl, n_fixed=e["qmc_points"], n_max=e["qmc_max_points"])
                else:
                    res = est.run_qmc(ev, lvl, eps=e["eps"], theta=e["theta"], n_max=e["qmc_max_points"])
            except est.ConvergenceError as exc:
                res, code = exc.result, EXIT_CONVERGENCE
                extra["error"] = str(exc)
    ex.write_levels_csv(os.path.join(cfg.output, "levels.csv"), res)
    ex.write_qoi_mean_std(os.path.join(cfg.output, "qoi_mean_std.csv"), res, cfg.spec.transport)
    ex.write_json(os.path.join(cfg.output, "summary.json"), ex.summary_dict(f"run {method}", cfg, res, extra))
    if code:
        log.error("%s did not converge: %s", method, extra.get("error"))
    return code


def cmd_compare(cfg, qmc: bool = True) -> int:
    model = TracerModel(cfg.spec)
    e = cfg.estimator
    with _evaluator(cfg, model) as ev:
        rows, rates = est.compare_methods(ev, e["eps_list"], theta=e["theta"], l_max=e["l_max"], n_init=e["n_init"],
                                          qmc=qmc, qmc_n_max=e["qmc_max_points"],
                                          alpha0=e["alpha0"], beta0=e["beta0"],
                                          progress=lambda p: log.info("%s", p), l_init=e["l_init"])
    table = [(r["eps"], r["mc_cost"], r["qmc_cost"], r["mlmc_cost"], r["L"], r["qmc_n"],
              r["mlmc_converged"], r["qmc_converged"]) for r in rows]
    ex.write_csv(os.path.join(cfg.output, "compare.csv"),
                 ["eps", "cost_mc", "cost_qmc", "cost_mlmc", "L", "qmc_n", "mlmc_converged", "qmc_converged"], table)
    ex.write_json(os.path.join(cfg.output, "rates.json"), ex._clean(ex.rates_dict(rates)))
    slope = est.complexity_slope([r["eps"] for r in rows], [r["mlmc_cost"] for r in rows]) if len(rows) > 1 else None
    log.info("MLMC complexity slope %s", slope)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "show-config":
            sys.stdout.write(render_config(_config(args)))
            return EXIT_OK
        cfg = _config(args)
        ex.ensure_dir(cfg.output)
        if args.command == "sample-field":
            return cmd_sample_field(cfg)
        if args.command == "convergence":
            return cmd_convergence(cfg)
        if args.command == "run":
            return cmd_run(cfg, args.method)
        return cmd_compare(cfg, qmc=not args.no_qmc)
    except (ConfigError, fl.FieldError, GridError, FingerprintMismatch, ResourceError) as exc:
        print(f"tracer-uq: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except est.EstimatorError as exc:
        print(f"tracer-uq: convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (OSError, LedgerError) as exc:
        print(f"tracer-uq: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
