"""Experiment orchestration: stability sweeps, spectrum tables and reproducible artifacts."""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .iterations import POLY_SCHEMES, SCHEMES, IterationPlan, expected_ledger, make_plan, run
from .kaon_dynamics import MapConfig, stationary_histogram
from .linalg import Precision, haar_factor_matrix, log_spaced_spectrum, sv_error, svd_oracle
from .rfmodel import ACTIVATIONS, RF_METHODS, make_rf_problem, rf_train

DIVERGED = "diverged"
HALF_PRECISIONS = (Precision.F16E, Precision.BF16E)


class ConfigError(ValueError):
    """A malformed experiment description; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def point_seed(seed: int, index: int) -> int:
    """Counter-based per-point seed, independent of evaluation order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0] >> 1)


@dataclass(frozen=True)
class SweepConfig:
    sizes: tuple[tuple[int, int], ...] = ((64, 32), (256, 128), (512, 256))
    kappas: tuple[float, ...] = (1e1, 1e2, 1e4, 1e6, 1e8, 1e10, 1e12, 1e16)
    precisions: tuple[Precision, ...] = (Precision.F32, Precision.F64)
    exponents: tuple[tuple[int, int], ...] = ((1, 1), (1, 2), (3, 4), (2, 3))
    methods: tuple[tuple[str, int], ...] = (("direct", 40), ("coupled", 40), ("coupled-chol", 25))
    regularized: bool = False
    seed: int = 0
    emulate_half: bool = False
    # optional lower end of the polynomial fitting interval; None keeps the
    # default singular-value floor of the iterations module
    poly_l0: float | None = None

    def __post_init__(self):
        for i, (m, n) in enumerate(self.sizes):
            if m < 1 or n < 1:
                raise ConfigError(f"sizes[{i}]", "dimensions must be positive")
        for i, k in enumerate(self.kappas):
            if not k >= 1:
                raise ConfigError(f"kappas[{i}]", "condition number must be >= 1")
        for i, (a, b) in enumerate(self.exponents):
            if b < 1 or not 0 <= a <= b:
                raise ConfigError(f"exponents[{i}]", "need 0 <= a <= b, b >= 1")
        for i, (scheme, steps) in enumerate(self.methods):
            if scheme not in SCHEMES:
                raise ConfigError(f"methods[{i}].scheme", f"unknown scheme {scheme!r}")
            if steps < 1:
                raise ConfigError(f"methods[{i}].steps", "steps must be positive")
        for i, p in enumerate(self.precisions):
            if p in HALF_PRECISIONS and not self.emulate_half:
                raise ConfigError(f"precisions[{i}]", "half precision requires emulate_half")
        if self.poly_l0 is not None and not 0 < self.poly_l0 <= 1:
            raise ConfigError("poly_l0", "must lie in (0, 1]")


@dataclass
class SweepRow:
    m: int
    n: int
    kappa: float
    precision: str
    a: int
    b: int
    scheme: str
    steps: int
    regularized: bool
    seed: int
    eps_sv: float | str
    g_mm: int
    s_mm: int
    qr: int
    inv: int
    ledger_ok: bool
    wall_time: float = field(default=0.0, compare=False)

    @property
    def diverged(self) -> bool:
        return self.eps_sv == DIVERGED


# wall_time is kept out of the CSV body so that reruns are byte-identical
SWEEP_COLUMNS = [
    "m", "n", "kappa", "precision", "a", "b", "scheme", "steps", "regularized",
    "seed", "eps_sv", "g_mm", "s_mm", "qr", "inv", "ledger_ok",
]


@functools.lru_cache(maxsize=256)
def _cached_plan(a: int, b: int, scheme: str, steps: int, regularized: bool, poly_l0: float | None) -> IterationPlan:
    eps = None if regularized else 0.0
    l0 = poly_l0 if scheme in POLY_SCHEMES else None
    return make_plan(a, b, scheme, steps, epsilon=eps, l0=l0)


def _sweep_point(cfg: SweepConfig, coords, index: int) -> SweepRow:
    (m, n), kappa, prec, (a, b), (scheme, steps) = coords
    seed = point_seed(cfg.seed, index)
    spectrum = log_spaced_spectrum(min(m, n), kappa)
    g = haar_factor_matrix(m, n, spectrum, seed)
    g_cast = prec.round(g)
    plan = _cached_plan(a, b, scheme, steps, cfg.regularized, cfg.poly_l0)
    start = time.perf_counter()
    try:
        res = run(g_cast, plan, prec)
    except (FloatingPointError, np.linalg.LinAlgError, ValueError):
        res = None
    wall = time.perf_counter() - start
    if res is None or res.diverged or not np.all(np.isfinite(res.output)):
        eps_sv: float | str = DIVERGED
    else:
        eps_sv = sv_error(res.output.astype(np.float64), g_cast.astype(np.float64), a, b)
    expected = expected_ledger(plan)
    led = res.ledger if res is not None else expected
    ok = res is not None and led.as_dict() == expected.as_dict()
    return SweepRow(
        m, n, float(kappa), prec.value, a, b, scheme, steps, cfg.regularized, seed, eps_sv,
        led.g_mm, led.s_mm, led.qr, led.inv, ok, wall,
    )


def sweep_grid(cfg: SweepConfig):
    """Grid points in output order."""
    for size in cfg.sizes:
        for expo in cfg.exponents:
            for kappa in cfg.kappas:
                for prec in cfg.precisions:
                    for method in cfg.methods:
                        yield size, kappa, prec, expo, method


def stability_sweep(cfg: SweepConfig) -> list[SweepRow]:
    """Run every grid point; divergence is recorded in the row, never raised."""
    return [_sweep_point(cfg, coords, i) for i, coords in enumerate(sweep_grid(cfg))]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        d = row if isinstance(row, dict) else asdict(row)
        w.writerow([_fmt(d[c]) for c in columns])
    return buf.getvalue()


# --------------------------------------------------------------------------
# singular-value comparison


@dataclass
class SvTable:
    columns: list[str]
    rows: list[dict]

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, self.columns)


def sv_comparison(
    m: int = 256,
    n: int = 128,
    kappa: float = 1e2,
    exponent: tuple[int, int] = (3, 4),
    methods=("direct", "coupled", "coupled-chol"),
    steps: int = 10,
    precision: Precision = Precision.F64,
    seed: int = 0,
) -> SvTable:
    """Per-index output spectra of each method next to the exact and regularized targets.

    Spectra are listed in the order of the exact target, largest first, so that
    row i pairs the method's i-th singular value with its intended value.
    """
    a, b = exponent
    if kappa < 1:
        raise ConfigError("kappa", "condition number must be >= 1")
    sigma = log_spaced_spectrum(min(m, n), kappa)
    g = haar_factor_matrix(m, n, sigma, seed, precision)
    s_g = svd_oracle(g.astype(np.float64)).s
    expo = 1.0 - 2.0 * a / b
    target = s_g**expo
    order = np.argsort(-target, kind="stable")
    # the iterations add eps * ||G||_F^2 to the Gram matrix of the raw input
    eps = 8.0 * precision.unit_roundoff * float(np.sum(s_g**2))
    reg = s_g * (s_g**2 + eps) ** (-a / b)
    cols = {"sigma": s_g[order], "target": target[order], "reg_target": reg[order]}
    for scheme in methods:
        plan = make_plan(a, b, scheme, steps)
        res = run(g, plan, precision)
        out = res.output.astype(np.float64)
        if res.diverged or not np.all(np.isfinite(out)):
            cols[scheme] = np.full(s_g.size, np.nan)
        else:
            cols[scheme] = svd_oracle(out).s[: s_g.size]
    names = ["index", *cols]
    rows = [{"index": i, **{k: float(v[i]) for k, v in cols.items()}} for i in range(s_g.size)]
    return SvTable(names, rows)


# --------------------------------------------------------------------------
# experiment files


def _get(cfg: dict, key: str, kind, default=None, path: str = ""):
    full = f"{path}.{key}" if path else key
    if key not in cfg:
        if default is None:
            raise ConfigError(full, "missing required field")
        return default
    val = cfg[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if kind is int and isinstance(val, bool):
        raise ConfigError(full, "expected an integer")
    if not isinstance(val, kind):
        raise ConfigError(full, f"expected {getattr(kind, '__name__', kind)}")
    return val


def _pairs(vals, path: str) -> tuple:
    if not isinstance(vals, list):
        raise ConfigError(path, "expected a list")
    out = []
    for i, v in enumerate(vals):
        if not (isinstance(v, list) and len(v) == 2):
            raise ConfigError(f"{path}[{i}]", "expected a pair")
        out.append(tuple(v))
    return tuple(out)


def _precision(val: str, path: str) -> Precision:
    try:
        return Precision(val)
    except ValueError:
        raise ConfigError(path, f"unknown precision {val!r}") from None


def sweep_config_from_dict(cfg: dict) -> SweepConfig:
    base = SweepConfig.__dataclass_fields__
    kw = {}
    if "sizes" in cfg:
        kw["sizes"] = tuple((int(m), int(n)) for m, n in _pairs(cfg["sizes"], "sizes"))
    if "kappas" in cfg:
        ks = _get(cfg, "kappas", list)
        for i, k in enumerate(ks):
            if not isinstance(k, (int, float)) or isinstance(k, bool):
                raise ConfigError(f"kappas[{i}]", "expected a number")
        kw["kappas"] = tuple(float(k) for k in ks)
    if "precisions" in cfg:
        ps = _get(cfg, "precisions", list)
        kw["precisions"] = tuple(_precision(p, f"precisions[{i}]") for i, p in enumerate(ps))
    if "exponents" in cfg:
        kw["exponents"] = tuple((int(a), int(b)) for a, b in _pairs(cfg["exponents"], "exponents"))
    if "methods" in cfg:
        kw["methods"] = tuple((str(s), int(t)) for s, t in _pairs(cfg["methods"], "methods"))
    for key, kind in (("regularized", bool), ("seed", int), ("emulate_half", bool), ("poly_l0", float)):
        if key in cfg:
            kw[key] = _get(cfg, key, kind)
    unknown = set(cfg) - set(base) - {"kind"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    return SweepConfig(**kw)


def _run_sweep(cfg: dict):
    sc = sweep_config_from_dict(cfg)
    rows = stability_sweep(sc)
    extra = {
        "wall_times": [r.wall_time for r in rows],
        "diverged": sum(r.diverged for r in rows),
        "ledger_mismatches": sum(not r.ledger_ok for r in rows),
    }
    return {"sweep.csv": rows_to_csv(rows, SWEEP_COLUMNS)}, sc.seed, extra


def _run_svcomp(cfg: dict):
    allowed = {"kind", "m", "n", "kappa", "exponent", "methods", "steps", "precision", "seed"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    expo = _pairs([_get(cfg, "exponent", list, [3, 4])], "exponent")[0]
    methods = _get(cfg, "methods", list, ["direct", "coupled", "coupled-chol"])
    for i, s in enumerate(methods):
        if s not in SCHEMES:
            raise ConfigError(f"methods[{i}]", f"unknown scheme {s!r}")
    seed = _get(cfg, "seed", int, 0)
    table = sv_comparison(
        _get(cfg, "m", int, 256),
        _get(cfg, "n", int, 128),
        _get(cfg, "kappa", float, 1e2),
        (int(expo[0]), int(expo[1])),
        tuple(methods),
        _get(cfg, "steps", int, 10),
        _precision(_get(cfg, "precision", str, "f64"), "precision"),
        seed,
    )
    return {"svcomp.csv": table.to_csv()}, seed, {}


KAON_COLUMNS = ["bin_left", "bin_right", "count"]
RF_COLUMNS = ["method", "step", "loss", "eta", "c", "gamma", "phi"]


def _run_rf(cfg: dict):
    allowed = {"kind", "o", "d", "n", "activation", "seed", "methods", "steps", "lr"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    act = _get(cfg, "activation", str, "relu")
    if act not in ACTIVATIONS:
        raise ConfigError("activation", f"unknown activation {act!r}")
    methods = _get(cfg, "methods", list, list(RF_METHODS))
    for i, meth in enumerate(methods):
        if meth not in RF_METHODS:
            raise ConfigError(f"methods[{i}]", f"unknown method {meth!r}")
    seed = _get(cfg, "seed", int, 0)
    steps = _get(cfg, "steps", int, 1000)
    if steps < 1:
        raise ConfigError("steps", "must be positive")
    p = make_rf_problem(_get(cfg, "o", int, 120), _get(cfg, "d", int, 100), _get(cfg, "n", int, 400), act, seed)
    lr = _get(cfg, "lr", float, 1e-2)
    rows = []
    for meth in methods:
        trace = rf_train(p, meth, steps, lr, seed)
        rows.extend({"method": meth, **dict(zip(trace.COLUMNS, r))} for r in trace.rows)
    return {"rf.csv": rows_to_csv(rows, RF_COLUMNS)}, seed, {}


def _run_kaon(cfg: dict):
    fields = MapConfig.__dataclass_fields__
    unknown = set(cfg) - set(fields) - {"kind"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    kw = {}
    for key, f in fields.items():
        if key in cfg:
            kw[key] = _get(cfg, key, float if f.type in ("float", float) else int)
    try:
        mc = MapConfig(**kw)
    except ValueError as exc:
        raise ConfigError("kaon", str(exc)) from None
    hist = stationary_histogram(mc)
    rows = [{"bin_left": lo, "bin_right": hi, "count": c} for lo, hi, c in hist.rows()]
    return {"kaon.csv": rows_to_csv(rows, KAON_COLUMNS)}, mc.seed, {"overflow": hist.overflow}


_KINDS = {"sweep": _run_sweep, "svcomp": _run_svcomp, "rf": _run_rf, "kaon": _run_kaon}


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def versions() -> dict:
    return {
        "specdescent": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", str(exc)) from None
    if not isinstance(cfg, dict):
        raise ConfigError("<root>", "expected a JSON object")
    return cfg


def run_experiment(config, out_dir) -> Path:
    """Execute an experiment description and write its CSV outputs plus ``manifest.json``.

    ``config`` is either a path to a JSON file or an already parsed dict.
    """
    cfg = load_config(config) if not isinstance(config, dict) else config
    kind = cfg.get("kind")
    if kind not in _KINDS:
        raise ConfigError("kind", f"expected one of {sorted(_KINDS)}")
    started = time.perf_counter()
    outputs, seed, extra = _KINDS[kind](cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, body in outputs.items():
        (out / name).write_text(body)
    manifest = {
        "kind": kind,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "versions": versions(),
        "outputs": sorted(outputs),
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "elapsed": time.perf_counter() - started,
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
