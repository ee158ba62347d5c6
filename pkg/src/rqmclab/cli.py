"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration errors, 3 for numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import bound, estimator, integrands, lds, randomfield, study
from .errors import ConfigError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _writer(path):
    fh = open(path, "w", newline="") if path else sys.stdout
    return fh, csv.writer(fh, lineterminator="\n")


def _close(fh):
    if fh is not sys.stdout:
        fh.close()


def _integrand(args):
    g = integrands.LognormalProduct(args.sigma)
    kind = getattr(args, "is_kind", "none")
    if kind == "scaled_normal":
        alpha = args.is_params or integrands.optimize_alpha(g, args.pilot_n, args.seed).params
        return integrands.ScaledNormalIS(g, alpha)
    if kind == "beta_like":
        beta = args.is_params or integrands.optimize_beta(g, args.pilot_n, args.seed).params
        return integrands.BetaLikeIS(g, beta)
    return g


# subcommands ---------------------------------------------------------------


def cmd_sobol(args) -> int:
    gen = lds.SobolGenerator(args.s)
    state = lds.fresh_scramble(args.seed, args.replicate, args.s) if args.scramble else None
    pts = gen.points(args.n, state)
    fh, w = _writer(args.out)
    w.writerow(["i"] + [f"t{j + 1}" for j in range(args.s)])
    for i, row in enumerate(pts):
        w.writerow([i] + [repr(float(v)) for v in row])
    _close(fh)
    return EXIT_OK


def cmd_estimate(args) -> int:
    g = _integrand(args)
    res = estimator.estimate(g, estimator.RqmcConfig((args.n,), args.replicates, args.seed, args.threads))
    fh, w = _writer(args.out)
    w.writerow(["n", "pooled_mean", "rmse", "exact_mean"])
    exact = integrands.exact_mean(g)
    w.writerow([args.n, repr(float(res.pooled[0])), repr(float(res.rmse[0])), "" if exact is None else repr(exact)])
    _close(fh)
    return EXIT_OK


def cmd_sweep(args) -> int:
    g = _integrand(args)
    cfg = estimator.RqmcConfig.powers(args.m_min, args.m_max, replicates=args.replicates, seed=args.seed, threads=args.threads)
    res = estimator.estimate(g, cfg)
    if args.replicates_out:
        estimator.write_replicates_csv(args.replicates_out, res)
    if args.out:
        estimator.write_summary_csv(args.out, res)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["n", "pooled_mean", "rmse"])
        for n, m, e in zip(res.n_grid, res.pooled, res.rmse):
            w.writerow([n, repr(float(m)), repr(float(e))])
    return EXIT_OK


def cmd_fit_rate(args) -> int:
    n, err = estimator.read_summary_csv(args.summary)
    window = tuple(args.window) if args.window else None
    fit = estimator.fit_rate((n, err), window, args.top)
    fh, w = _writer(args.out)
    w.writerow(["gamma", "intercept", "window_lo", "window_hi", "residual"])
    w.writerow([repr(fit.gamma), repr(fit.intercept), fit.window[0], fit.window[1], repr(fit.residual)])
    _close(fh)
    return EXIT_OK


def cmd_bound(args) -> int:
    spec = bound.GrowthSpec(tuple(args.sigma), args.C, args.eps, args.delta_bar, args.C_eps)
    fh, w = _writer(args.out)
    w.writerow(["n", "A_star_max", "B_star", "B_tilde", "C1", "C2", "bound", "rate_exponent"])
    for m in args.log2n:
        row = bound.theorem_bound(spec, 2 ** m).as_row()
        w.writerow([2 ** m] + [repr(float(row[k])) for k in ("A_star_max", "B_star", "B_tilde", "C1", "C2", "bound", "rate_exponent")])
    _close(fh)
    return EXIT_OK


def cmd_is_opt(args) -> int:
    g = integrands.LognormalProduct(args.sigma)
    if args.kind == "scaled_normal":
        res = integrands.optimize_alpha(g, args.pilot_n, args.seed)
    else:
        res = integrands.optimize_beta(g, args.pilot_n, args.seed)
    fh, w = _writer(args.out)
    w.writerow(["kind", "param_index", "value", "objective", "baseline_objective", "fallback"])
    for j, v in enumerate(res.params):
        w.writerow([res.kind, j, repr(float(v)), repr(res.objective), repr(res.baseline_objective), int(res.fallback)])
    _close(fh)
    if args.trace:
        with open(args.trace, "w", newline="") as tf:
            tw = csv.writer(tf, lineterminator="\n")
            tw.writerow(["restart", "evaluation", "objective"])
            for row in res.trace:
                tw.writerow([row[0], row[1], repr(row[2])])
    return EXIT_OK


def cmd_basis(args) -> int:
    if args.action == "build":
        kernel = randomfield.MaternKernel(args.nu, args.r)
        b = randomfield.build_fourier_basis(kernel, args.gamma, args.fft_size, args.s, args.scaling, not args.no_taper)
        randomfield.write_basis(b, args.file, args.grid)
        print(f"wrote {b.s} modes to {args.file} (min/max eigenvalue ratio {b.lambda_min_ratio:.3e})")
        return EXIT_OK
    basis = randomfield.load_basis(args.file)
    if args.action == "validate":
        print(f"{args.file}: {basis.s} modes on a {basis.grid_n}x{basis.grid_n} grid, bounds {basis.bounds}: ok")
        return EXIT_OK
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["j", "b", "grid_max", "grid_min"])
    for j in range(basis.s):
        v = basis.values[j]
        w.writerow([j + 1, repr(float(basis.b[j])), repr(float(v.max())), repr(float(v.min()))])
    return EXIT_OK


def cmd_study(args) -> int:
    if args.preset:
        data = study.PRESETS[args.preset]()
        cfg = study.load_config(data=data, overrides=args.set)
    else:
        cfg = study.load_config(args.config, args.set)
    out = study.run_study(cfg, args.out, args.threads)
    for name, fit in out["fits"].items():
        parts = [name]
        if fit["plain"] is not None:
            parts.append(f"gamma={fit['plain'].gamma:.4f}")
        if fit["is"] is not None:
            parts.append(f"gamma_is={fit['is'].gamma:.4f}")
        print("  ".join(parts))
    print(f"outputs in {out['paths']['manifest'].parent}")
    return EXIT_OK


# parser --------------------------------------------------------------------


def _add_sampling(p, single_n: bool):
    p.add_argument("--sigma", type=_floats, default=[1.0], help="comma-separated volatilities")
    p.add_argument("--replicates", type=int, default=30)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--is", dest="is_kind", choices=["none", "scaled_normal", "beta_like"], default="none")
    p.add_argument("--is-params", type=_floats, default=None, help="fixed alpha or beta values; default runs a pilot")
    p.add_argument("--pilot-n", type=int, default=4096)
    p.add_argument("--out", default=None)
    if single_n:
        p.add_argument("--n", type=int, required=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rqmclab", description="Randomized QMC convergence laboratory")
    p.add_argument("--dirs", default=None, help=f"direction-number file (default ${lds.DIRS_ENV} or bundled table)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("sobol", help="print Sobol' points")
    q.add_argument("--s", type=int, required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--seed", type=int, default=12345)
    q.add_argument("--replicate", type=int, default=0)
    q.add_argument("--no-scramble", dest="scramble", action="store_false")
    q.add_argument("--out", default=None)
    q.set_defaults(func=cmd_sobol)

    q = sub.add_parser("estimate", help="RQMC estimate of the lognormal integrand at one n")
    _add_sampling(q, True)
    q.set_defaults(func=cmd_estimate)

    q = sub.add_parser("sweep", help="RQMC estimates on a power-of-two grid")
    _add_sampling(q, False)
    q.add_argument("--m-min", type=int, default=10)
    q.add_argument("--m-max", type=int, default=20)
    q.add_argument("--replicates-out", default=None)
    q.set_defaults(func=cmd_sweep)

    q = sub.add_parser("fit-rate", help="fit a convergence rate to a summary CSV")
    q.add_argument("summary")
    q.add_argument("--window", type=_ints, default=None, help="lo,hi sample sizes")
    q.add_argument("--top", type=int, default=3)
    q.add_argument("--out", default=None)
    q.set_defaults(func=cmd_fit_rate)

    q = sub.add_parser("bound", help="evaluate the error-bound model")
    q.add_argument("--sigma", type=_floats, default=[1.0])
    q.add_argument("--log2n", type=_ints, default=list(range(10, 23)))
    q.add_argument("--C", type=float, default=1.0)
    q.add_argument("--C-eps", dest="C_eps", type=float, default=1.0)
    q.add_argument("--eps", type=float, default=0.05)
    q.add_argument("--delta-bar", type=float, default=1e-6)
    q.add_argument("--out", default=None)
    q.set_defaults(func=cmd_bound)

    q = sub.add_parser("is-opt", help="pilot optimization of an importance-sampling proposal")
    q.add_argument("--kind", choices=["scaled_normal", "beta_like"], default="scaled_normal")
    q.add_argument("--sigma", type=_floats, default=[1.0])
    q.add_argument("--pilot-n", type=int, default=4096)
    q.add_argument("--seed", type=int, default=12345)
    q.add_argument("--out", default=None)
    q.add_argument("--trace", default=None, help="write the objective trace CSV here")
    q.set_defaults(func=cmd_is_opt)

    q = sub.add_parser("basis", help="build, dump or validate a tabulated field basis")
    q.add_argument("action", choices=["build", "dump", "validate"])
    q.add_argument("file")
    q.add_argument("--s", type=int, default=16)
    q.add_argument("--grid", type=int, default=512)
    q.add_argument("--gamma", type=float, default=10.0)
    q.add_argument("--fft-size", type=int, default=256)
    q.add_argument("--nu", type=float, default=4.5)
    q.add_argument("--r", type=float, default=1.0)
    q.add_argument("--scaling", choices=["lambda", "sqrt"], default="lambda")
    q.add_argument("--no-taper", action="store_true")
    q.set_defaults(func=cmd_basis)

    q = sub.add_parser("study", help="run a configured study")
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--preset", choices=sorted(study.PRESETS))
    q.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key")
    q.add_argument("--out", default=None)
    q.set_defaults(func=cmd_study)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.dirs:
        os.environ[lds.DIRS_ENV] = args.dirs
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
