"""Command line front end.

Exit status: 0 on success, 2 for a configuration or input problem, 3 when a
computation breaks down numerically.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .diagnostics import NonPositiveCurvature, exact_descent_check
from .harness import ConfigError, load_config, rows_to_csv, run_experiment
from .iterations import SCHEMES, make_plan, run
from .kaon_dynamics import MapConfig, stationary_histogram
from .linalg import Precision
from .matio import read_matrix, write_smat
from .optimizers import direction
from .remez import FitSchedule, RemezError
from .rfmodel import ACTIVATIONS, RF_METHODS, make_rf_problem, rf_quadratic, rf_train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("specdescent")


class NumericalFailure(RuntimeError):
    pass


def _precision(args, fallback: Precision = Precision.F64) -> Precision:
    return Precision(args.precision) if args.precision else fallback


def _out_path(args, explicit, default_name: str) -> Path:
    path = Path(explicit) if explicit else Path(args.out_dir) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _exponent(text: str) -> tuple[int, int]:
    try:
        a, b = text.split("/")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a/b, got {text!r}") from None


def _size(text: str) -> tuple[int, int]:
    try:
        m, n = text.lower().split("x")
        return int(m), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MxN, got {text!r}") from None


def _method(text: str) -> tuple[str, int]:
    scheme, _, steps = text.partition(":")
    if scheme not in SCHEMES:
        raise argparse.ArgumentTypeError(f"unknown scheme {scheme!r}")
    return scheme, int(steps) if steps else 25


def _csv_list(kind):
    def parse(text: str):
        return [kind(t) for t in text.split(",") if t]

    return parse


# --------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    plan = make_plan(
        args.a, args.b, args.scheme, args.steps,
        sigma_floor=args.sigma_floor, n_terms=args.n_terms, cushion=args.cushion, l0=args.l0,
    )
    path = _out_path(args, args.out, "schedule.json")
    path.write_text(plan.schedule.to_json() + "\n")
    last = plan.schedule.steps[-1]
    print(f"wrote {len(plan.schedule.steps)} steps to {path}; final level {last.level:.3e}")
    return EXIT_OK


def cmd_apply(args) -> int:
    g, file_prec = read_matrix(args.input)
    prec = _precision(args, file_prec)
    schedule = None
    if args.schedule:
        try:
            schedule = FitSchedule.from_json(Path(args.schedule).read_text())
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError("schedule", f"unreadable schedule: {exc}") from None
    plan = make_plan(
        args.a, args.b, args.scheme, args.steps,
        sigma_floor=args.sigma_floor, epsilon=args.epsilon, schedule=schedule,
    )
    res = run(g, plan, prec)
    if res.diverged:
        raise NumericalFailure(f"{args.scheme} diverged")
    path = _out_path(args, args.out, "output.smat")
    write_smat(path, res.output, prec)
    if args.ledger:
        lp = _out_path(args, args.ledger, "ledger.json")
        lp.write_text(json.dumps({"ledger": res.ledger.as_dict(), "plan": plan.meta()}, indent=2) + "\n")
    print(f"wrote {res.output.shape[0]}x{res.output.shape[1]} output to {path}")
    return EXIT_OK


def cmd_direction(args) -> int:
    g, file_prec = read_matrix(args.input)
    kw: dict = {}
    if args.kind == "freon":
        if args.a is None or args.b is None:
            raise ConfigError("a/b", "freon needs --a and --b")
        kw.update(a=args.a, b=args.b, steps=args.steps, precision=_precision(args, file_prec))
    elif args.kind in ("muon", "kaon"):
        kw["precision"] = _precision(args, file_prec)
        if args.kind == "kaon" and args.steps:
            kw["steps"] = args.steps
    elif args.kind == "tsgd":
        kw["p_frac"] = args.pfrac
    upd = direction(g, args.kind, **kw)
    if not np.all(np.isfinite(upd.d)):
        raise NumericalFailure("non-finite direction")
    path = _out_path(args, args.out, "direction.smat")
    write_smat(path, upd.d, _precision(args, file_prec))
    print(f"wrote {args.kind} direction to {path}; <G, D> = {upd.dual_scale:.6g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        cfg["kind"] = "sweep"
    else:
        cfg = {"kind": "sweep", "regularized": args.regularized, "emulate_half": args.emulate_half}
        if args.sizes:
            cfg["sizes"] = [list(s) for s in args.sizes]
        if args.kappas:
            cfg["kappas"] = args.kappas
        if args.exponents:
            cfg["exponents"] = [list(e) for e in args.exponents]
        if args.methods:
            cfg["methods"] = [list(m) for m in args.methods]
    if args.precision:
        cfg["precisions"] = [args.precision]
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = run_experiment(cfg, args.out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    print(f"wrote {out / 'sweep.csv'}; {manifest['diverged']} diverged rows")
    return EXIT_OK


def cmd_svcompare(args) -> int:
    cfg = {
        "kind": "svcomp", "m": args.m, "n": args.n, "kappa": args.kappa,
        "exponent": list(args.exponent), "methods": args.methods, "steps": args.steps,
        "precision": args.precision or "f64", "seed": args.seed or 0,
    }
    out = run_experiment(cfg, args.out_dir)
    print(f"wrote {out / 'svcomp.csv'}")
    return EXIT_OK


def _rf_problem(cfg: dict, seed: int | None):
    known = {"o", "d", "n", "activation", "seed", "lr", "steps", "method", "kind"}
    extra = set(cfg) - known
    if extra:
        raise ConfigError(sorted(extra)[0], "unknown field")
    act = cfg.get("activation", "relu")
    if act not in ACTIVATIONS:
        raise ConfigError("activation", f"unknown activation {act!r}")
    dims = {}
    for key, default in (("o", 120), ("d", 100), ("n", 400)):
        val = cfg.get(key, default)
        if not isinstance(val, int) or isinstance(val, bool) or val < 1:
            raise ConfigError(key, "expected a positive integer")
        dims[key] = val
    s = cfg.get("seed", 0) if seed is None else seed
    return make_rf_problem(dims["o"], dims["d"], dims["n"], act, s), s


def cmd_rf_train(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    p, seed = _rf_problem(cfg, args.seed)
    method = args.method or cfg.get("method", "specgd-optstep")
    if method not in RF_METHODS:
        raise ConfigError("method", f"unknown method {method!r}")
    steps = args.steps or cfg.get("steps", 1000)
    lr = args.lr if args.lr is not None else cfg.get("lr", 1e-2)
    trace = rf_train(p, method, steps, lr, seed)
    rows = [dict(zip(trace.COLUMNS, r)) for r in trace.rows]
    path = _out_path(args, args.out, "trace.csv")
    path.write_text(rows_to_csv(rows, list(trace.COLUMNS)))
    print(f"wrote {len(rows)} steps to {path}")
    if trace.diverged:
        raise NumericalFailure(f"{method} diverged after {len(rows)} steps")
    return EXIT_OK


def cmd_kaon_pdf(args) -> int:
    try:
        cfg = MapConfig(
            lam=args.lam, particles=args.particles, burn_in=args.burn_in,
            collect=args.collect, bins=args.bins, seed=args.seed or 0,
        )
    except ValueError as exc:
        raise ConfigError("kaon", str(exc)) from None
    hist = stationary_histogram(cfg)
    rows = [{"bin_left": lo, "bin_right": hi, "count": c} for lo, hi, c in hist.rows()]
    path = _out_path(args, args.out, "hist.csv")
    path.write_text(rows_to_csv(rows, ["bin_left", "bin_right", "count"]))
    print(f"wrote {cfg.bins} bins to {path}; support max {hist.support_max():.4f}, overflow {hist.overflow}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    p, _ = _rf_problem(load_config(args.problem), args.seed)
    d, _ = read_matrix(args.direction)
    if d.shape != p.w.shape:
        raise ConfigError("direction", f"shape {d.shape} does not match weights {p.w.shape}")
    rec = exact_descent_check(rf_quadratic(p), p.w, d.astype(np.float64), args.alpha)
    path = _out_path(args, args.out, "record.json")
    path.write_text(json.dumps(rec.as_dict(), indent=2) + "\n")
    print(f"predicted {rec.predicted_delta:.6e}, actual {rec.actual_delta:.6e}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    def globals_(suppress: bool) -> argparse.ArgumentParser:
        # the subcommand copy must not overwrite values given before the subcommand
        def dflt(v):
            return argparse.SUPPRESS if suppress else v

        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--precision", choices=[p.value for p in Precision], default=dflt(None))
        g.add_argument("--seed", type=int, default=dflt(None))
        g.add_argument("--out-dir", default=dflt("."))
        g.add_argument("-v", "--verbose", action="store_true", default=dflt(False))
        return g

    parser = argparse.ArgumentParser(
        prog="specdescent", description=__doc__.splitlines()[0], parents=[globals_(False)]
    )
    sub = parser.add_subparsers(dest="command", required=True)
    local = globals_(True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, parents=[local])
        sp.set_defaults(func=func)
        return sp

    sp = add("fit", cmd_fit, "fit a coefficient schedule")
    sp.add_argument("--a", type=int, required=True)
    sp.add_argument("--b", type=int, required=True)
    sp.add_argument("--scheme", choices=SCHEMES, default="coupled-chol")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--sigma-floor", type=float)
    sp.add_argument("--l0", type=float)
    sp.add_argument("--cushion", type=float)
    sp.add_argument("--n-terms", type=int, default=3)
    sp.add_argument("--out")

    sp = add("apply", cmd_apply, "apply (G G^T)^{-a/b} G to a matrix file")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--a", type=int, required=True)
    sp.add_argument("--b", type=int, required=True)
    sp.add_argument("--scheme", choices=SCHEMES, default="coupled-chol")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--schedule")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--sigma-floor", type=float)
    sp.add_argument("--out")
    sp.add_argument("--ledger")

    sp = add("direction", cmd_direction, "optimizer update direction for a gradient file")
    sp.add_argument("--kind", choices=["muon", "kaon", "freon", "tsgd", "sgd"], required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--a", type=int)
    sp.add_argument("--b", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--pfrac", type=float, default=0.01)
    sp.add_argument("--out")

    sp = add("bench-stability", cmd_bench, "stability sweep over size, conditioning and precision")
    sp.add_argument("--config")
    sp.add_argument("--sizes", type=_csv_list(_size))
    sp.add_argument("--kappas", type=_csv_list(float))
    sp.add_argument("--exponents", type=_csv_list(_exponent))
    sp.add_argument("--methods", type=_csv_list(_method))
    sp.add_argument("--regularized", action="store_true")
    sp.add_argument("--emulate-half", action="store_true")

    sp = add("sv-compare", cmd_svcompare, "output spectra of several schemes against the target")
    sp.add_argument("--m", type=int, default=256)
    sp.add_argument("--n", type=int, default=128)
    sp.add_argument("--kappa", type=float, default=1e2)
    sp.add_argument("--exponent", type=_exponent, default=(3, 4))
    sp.add_argument("--methods", type=_csv_list(str), default=["direct", "coupled", "coupled-chol"])
    sp.add_argument("--steps", type=int, default=10)

    sp = add("rf-train", cmd_rf_train, "train the random-feature model")
    sp.add_argument("--config")
    sp.add_argument("--method", choices=RF_METHODS)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--out")

    sp = add("kaon-pdf", cmd_kaon_pdf, "stationary histogram of the Kaon map")
    sp.add_argument("--lambda", dest="lam", type=float, default=4.1)
    sp.add_argument("--particles", type=int, default=5000)
    sp.add_argument("--burn-in", type=int, default=500)
    sp.add_argument("--collect", type=int, default=200)
    sp.add_argument("--bins", type=int, default=200)
    sp.add_argument("--out")

    sp = add("diagnose", cmd_diagnose, "exact one-step descent record on an RF problem")
    sp.add_argument("--problem", required=True)
    sp.add_argument("--direction", required=True)
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError, RemezError, NonPositiveCurvature) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
