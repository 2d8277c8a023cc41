"""Iterative schemes for ``(G G^T)^{-a/b} G``.

All schemes work on the short side first (rows <= cols) after normalising ``G``
by ``nu = ||G||_F + eps`` and rescale the result by ``nu^{1 - 2a/b}``.  Every
matrix product goes through :class:`~specdescent.linalg.MatOps` so the run's
cost ledger is exact.

Polynomial schemes apply ``P_t(A_t)`` with ``P_t`` a fitted quadratic; rational
schemes apply ``(alpha + beta x)/(1 + gamma x)`` through a block QR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .linalg import CostLedger, MatOps, Precision, power_cost, thin_qr
from .remez import FitSchedule, fit_poly_schedule, fit_rational_schedule

POLY_SCHEMES = ("direct", "m-accumulator", "coupled", "coupled-ab", "dual-ab", "coupled-dual")
RATIONAL_SCHEMES = ("rational-chol", "coupled-chol")
SCHEMES = POLY_SCHEMES + RATIONAL_SCHEMES

DEFAULT_SIGMA_FLOOR = {"poly": 1e-3, "rational": 1e-11}


@dataclass(frozen=True)
class IterationPlan:
    a: int
    b: int
    steps: int
    scheme: str
    schedule: FitSchedule
    # None selects 8 unit roundoffs of the run precision
    epsilon: float | None = None
    stabilizer_gamma: float = 0.5
    sigma_floor: float = 1e-11
    # working exponents: (a, b) doubled for odd b on the rational path
    work_a: int = 0
    work_b: int = 0
    # power of the iterate inside P for polynomial schemes
    k: int = 0

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.a, self.b)

    @property
    def r(self) -> int:
        return self.work_b // 2

    def meta(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "work_a": self.work_a,
            "work_b": self.work_b,
            "k": self.k,
            "steps": self.steps,
            "scheme": self.scheme,
            "epsilon": self.epsilon,
            "sigma_floor": self.sigma_floor,
        }


@dataclass
class IterationResult:
    output: np.ndarray
    ledger: CostLedger
    l0_factor: np.ndarray | None = None
    diverged: bool = False
    nu: float = 1.0
    meta: dict = field(default_factory=dict)


def poly_power(scheme: str, a: int, b: int) -> int:
    """Power of the iterate that appears inside ``P`` for a polynomial scheme."""
    ratio = Fraction(a, b)
    if scheme == "direct":
        if ratio == 1:
            return 1
        k = 2
        while (k * (ratio - Fraction(1, 2))).denominator != 1:
            k += 2
        return k
    if scheme in ("m-accumulator", "coupled", "coupled-dual"):
        return ratio.denominator
    if scheme in ("coupled-ab", "dual-ab"):
        return ratio.denominator
    raise ValueError(f"{scheme} is not a polynomial scheme")


def _poly_floor_exponent(scheme: str, ratio: Fraction) -> float:
    # the scalar iterate starts at sigma**e for a normalised singular value sigma
    if scheme in ("coupled-ab", "dual-ab"):
        return 2.0 / ratio.denominator
    if scheme == "coupled-dual":
        return 2.0 * float(max(ratio, 1 - ratio))
    return 2.0 * float(ratio)


def make_plan(
    a: int,
    b: int,
    scheme: str = "coupled-chol",
    steps: int | None = None,
    sigma_floor: float | None = None,
    epsilon: float | None = None,
    n_terms: int = 3,
    cushion: float | None = None,
    stabilizer_gamma: float = 0.5,
    schedule: FitSchedule | None = None,
    l0: float | None = None,
) -> IterationPlan:
    """Build a plan with a coefficient schedule fitted for ``scheme``.

    ``sigma_floor`` is a lower bound on the singular values of ``G / ||G||_F``;
    it fixes the fitting interval of the first step. ``l0`` overrides that
    interval's lower end directly, in the scheme's own scalar variable.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if a < 0 or b < 1:
        raise ValueError("need a >= 0 and b >= 1")
    ratio = Fraction(a, b)
    ra, rb = ratio.numerator, ratio.denominator
    if scheme == "coupled-dual" and not 0 < ratio < 1:
        raise ValueError("coupled-dual needs 0 < a/b < 1")
    if scheme in ("dual-ab", "coupled-ab") and not 0 < ratio <= 1:
        raise ValueError(f"{scheme} needs 0 < a/b <= 1")
    if scheme in RATIONAL_SCHEMES:
        steps = 25 if steps is None else steps
        work_a, work_b = (2 * ra, 2 * rb) if rb % 2 else (ra, rb)
        floor = DEFAULT_SIGMA_FLOOR["rational"] if sigma_floor is None else sigma_floor
        if schedule is None:
            l0 = min(floor ** (2.0 / work_b), 1.0) if l0 is None else l0
            schedule = fit_rational_schedule(l0, steps, work_b, cushion)
        return IterationPlan(
            ra, rb, steps, scheme, schedule, epsilon, stabilizer_gamma, floor, work_a, work_b, 0
        )
    steps = 10 if steps is None else steps
    k = poly_power(scheme, ra, rb)
    floor = DEFAULT_SIGMA_FLOOR["poly"] if sigma_floor is None else sigma_floor
    if schedule is None:
        l0 = min(floor ** _poly_floor_exponent(scheme, ratio), 1.0) if l0 is None else l0
        schedule = fit_poly_schedule(l0, steps, k / 2, n_terms, cushion or 0.0)
    return IterationPlan(ra, rb, steps, scheme, schedule, epsilon, stabilizer_gamma, floor, ra, rb, k)


# --------------------------------------------------------------------------
# helpers


class _Run:
    """Per-run state: rounding ops plus the sticky divergence flag."""

    def __init__(self, precision: Precision):
        self.ops = MatOps(precision)
        self.bad = False

    def watch(self, *mats):
        if not self.bad:
            for m in mats:
                if not np.all(np.isfinite(m)):
                    self.bad = True
                    break
        return mats[0] if len(mats) == 1 else mats


def _poly_eval(run: _Run, coeffs, a: np.ndarray) -> np.ndarray:
    """``P(A)`` from its monomial coefficients; one S-MM per power above 1."""
    ops = run.ops
    m = a.shape[0]
    out = coeffs[0] * np.eye(m, dtype=a.dtype)
    if len(coeffs) > 1:
        out = out + coeffs[1] * a
    pw = a
    for c in coeffs[2:]:
        pw = ops.smm(pw, a)
        out = out + c * pw
    return run.watch(ops.rnd(out))


def _normalise(run: _Run, g: np.ndarray, eps: float) -> tuple[np.ndarray, float]:
    g = run.ops.rnd(g)
    with np.errstate(all="ignore"):
        nu = float(np.linalg.norm(g.astype(np.float64))) + eps
    if nu == 0.0:
        raise ValueError("zero gradient")
    return run.ops.rnd(g / nu), nu


def _gram(run: _Run, g: np.ndarray, eps: float) -> np.ndarray:
    h = run.ops.gmm(g, g.T)
    if eps:
        h = run.ops.rnd(h + eps * np.eye(h.shape[0], dtype=h.dtype))
    return run.watch(h)


def _finish(run: _Run, out: np.ndarray, nu: float, plan: IterationPlan, **kw) -> IterationResult:
    expo = 1.0 - 2.0 * float(plan.ratio)
    with np.errstate(all="ignore"):
        out = run.ops.rnd(out * (nu**expo))
    run.watch(out)
    if run.bad and np.all(np.isfinite(out)):
        out = np.full_like(out, np.nan)
    return IterationResult(out, run.ops.ledger, diverged=run.bad, nu=nu, meta=plan.meta(), **kw)


def _eps(plan: IterationPlan, precision: Precision) -> float:
    return 8.0 * precision.unit_roundoff if plan.epsilon is None else plan.epsilon


def _coeffs(plan: IterationPlan):
    for step in plan.schedule.steps[: plan.steps]:
        yield np.asarray(step.coeffs)


# --------------------------------------------------------------------------
# polynomial schemes


def run_direct(g, plan: IterationPlan, precision: Precision = Precision.F64) -> IterationResult:
    run = _Run(precision)
    ops = run.ops
    eps = _eps(plan, precision)
    g, nu = _normalise(run, g, eps)
    ratio, k = plan.ratio, plan.k
    o = g
    with np.errstate(all="ignore"):
        if ratio == 1:
            # A_t = O_t G^T, no frozen power
            for c in _coeffs(plan):
                a_t = run.watch(ops.gmm(o, g.T))
                o = run.watch(ops.gmm(_poly_eval(run, c, a_t), o))
        elif ratio == Fraction(1, 2):
            for c in _coeffs(plan):
                a_t = run.watch(ops.gmm(o, o.T))
                o = run.watch(ops.gmm(_poly_eval(run, c, a_t), o))
        else:
            e = k * (ratio - Fraction(1, 2))
            h = _gram(run, g, eps)
            if e < 0:
                h = run.watch(ops.inv(h))
            frozen = run.watch(ops.power(h, abs(int(e))))
            for c in _coeffs(plan):
                gram = run.watch(ops.gmm(o, o.T))
                a_t = run.watch(ops.smm(ops.power(gram, k // 2), frozen))
                o = run.watch(ops.gmm(_poly_eval(run, c, a_t), o))
    return _finish(run, o, nu, plan)


def run_m_accumulator(g, plan: IterationPlan, precision: Precision = Precision.F64) -> IterationResult:
    run = _Run(precision)
    ops = run.ops
    eps = _eps(plan, precision)
    g, nu = _normalise(run, g, eps)
    k = plan.k
    with np.errstate(all="ignore"):
        frozen = run.watch(ops.power(_gram(run, g, eps), int(k * plan.ratio)))
        m = ops.eye(g.shape[0])
        for c in _coeffs(plan):
            a_t = run.watch(ops.smm(ops.power(m, k), frozen))
            m = run.watch(ops.smm(_poly_eval(run, c, a_t), m))
        o = ops.gmm(m, g)
    return _finish(run, o, nu, plan)


def run_coupled(g, plan: IterationPlan, precision: Precision = Precision.F64) -> IterationResult:
    run = _Run(precision)
    ops = run.ops
    eps = _eps(plan, precision)
    g, nu = _normalise(run, g, eps)
    k = plan.k
    o = g
    with np.errstate(all="ignore"):
        a_t = run.watch(ops.power(_gram(run, g, eps), int(k * plan.ratio)))
        for c in _coeffs(plan):
            rt = _poly_eval(run, c, a_t)
            o = run.watch(ops.gmm(rt, o))
            a_t = run.watch(ops.smm(ops.power(rt, k), a_t))
    return _finish(run, o, nu, plan)


def run_coupled_ab(g, plan: IterationPlan, precision: Precision = Precision.F64) -> IterationResult:
    run = _Run(precision)
    ops = run.ops
    eps = _eps(plan, precision)
    g, nu = _normalise(run, g, eps)
    a, b = plan.a, plan.b
    o = g
    with np.errstate(all="ignore"):
        a_t = _gram(run, g, eps)
        for c in _coeffs(plan):
            rt = _poly_eval(run, c, a_t)
            ra = ops.power(rt, a)
            rb = ops.power(rt, b)
            o = run.watch(ops.gmm(ra, o))
            a_t = run.watch(ops.smm(rb, a_t))
    return _finish(run, o, nu, plan)


def run_dual_ab(g, plan: IterationPlan, precision: Precision = Precision.F64) -> IterationResult:
    run = _Run(precision)
    ops = run.ops
    eps = _eps(plan, precision)
    g, nu = _normalise(run, g, eps)
    a, b = plan.a, plan.b
    o, y = g, g.T.copy()
    log_scale = 0.0
    with np.errstate(all="ignore"):
        for c in _coeffs(plan):
            no, ny = np.linalg.norm(o), np.linalg.norm(y)
            if np.isfinite(no) and np.isfinite(ny) and no > 0 and ny > 0:
                bal = math.sqrt(ny / no)
                o, y = ops.rnd(o * bal), ops.rnd(y / bal)
                log_scale += math.log(bal)
            a_t = run.watch(ops.gmm(o, y))
            rt = _poly_eval(run, c, a_t)
            ra = ops.power(rt, a)
            rba = ops.power(rt, b - a)
            o = run.watch(ops.gmm(ra, o))
            y = run.watch(ops.gmm(y, rba))
        # undo the accumulated balancing on the returned iterate
        o = ops.rnd(o * math.exp(-log_scale))
    return _finish(run, o, nu, plan)


STABILIZER_GATE = 1e-5


def _norm2_bound(e: np.ndarray) -> float:
    """Cheap upper bound on the spectral norm: sqrt(||E||_1 ||E||_inf)."""
    e = np.abs(e.astype(np.float64))
    return math.sqrt(float(e.sum(axis=0).max()) * float(e.sum(axis=1).max()))


def run_coupled_dual(g, plan: IterationPlan, precision: Precision = Precision.F64) -> IterationResult:
    run = _Run(precision)
    ops = run.ops
    eps = _eps(plan, precision)
    g, nu = _normalise(run, g, eps)
    a, b, k = plan.a, plan.b, plan.k
    stab = plan.stabilizer_gamma
    if stab <= 0:
        raise ValueError("stabilizer_gamma must be positive")
    m = g.shape[0]
    eye = ops.eye(m)
    o, y = g, g.T.copy()
    with np.errstate(all="ignore"):
        h = _gram(run, g, eps)
        a_t = run.watch(ops.power(h, int(k * Fraction(a, b))))
        b_t = run.watch(ops.power(h, int(k * Fraction(b - a, b))))
        for c in _coeffs(plan):
            r_a = _poly_eval(run, c, a_t)
            r_b = _poly_eval(run, c, b_t)
            e_t = run.watch(ops.rnd(eye - ops.gmm(o, y)))
            # the correction only contracts near O Y = I, so it waits until E is small
            g_t = stab if _norm2_bound(e_t) <= STABILIZER_GATE else 0.0
            o = run.watch(ops.gmm(ops.rnd(r_a + g_t * e_t), o))
            y = run.watch(ops.gmm(y, ops.rnd(r_b + g_t * e_t)))
            a_t = run.watch(ops.smm(ops.power(r_a, k), a_t))
            b_t = run.watch(ops.smm(ops.power(r_b, k), b_t))
        cross = np.linalg.norm(eye - o @ y)
    res = _finish(run, o, nu, plan)
    res.meta["cross_residual"] = float(cross)
    return res


# --------------------------------------------------------------------------
# rational schemes


def _initial_factor(run: _Run, g: np.ndarray, eps: float, with_q: bool = False):
    """Lower factor ``L`` with ``L L^T = G G^T + eps I`` from a thin QR of the stacked gradient.

    With ``with_q`` the leading block ``Q1`` of the orthogonal factor is returned
    too, so that ``G = L Q1^T``.
    """
    m, n = g.shape
    stacked = g.T
    if eps:
        stacked = np.vstack([g.T, math.sqrt(eps) * np.eye(m, dtype=g.dtype)])
    q0, r0 = thin_qr(run.ops.rnd(stacked))
    l_fac = run.watch(run.ops.rnd(r0.T))
    if with_q:
        return l_fac, run.ops.rnd(q0[:n, :])
    return l_fac


def _block_resolvent(run: _Run, factor: np.ndarray, gamma: float) -> np.ndarray:
    """``(I + gamma F F^T)^{-1}`` as ``Q2 Q2^T`` from a thin QR of a stacked block."""
    ops = run.ops
    m = factor.shape[0]
    eye = ops.eye(m)
    if gamma <= 1.0:
        k = np.vstack([ops.rnd(math.sqrt(gamma) * factor.T), eye])
    else:
        k = np.vstack([factor.T, ops.rnd(eye / math.sqrt(gamma))])
    q, _ = ops.qr(k)
    q2 = q[factor.shape[1] :, :]
    return run.watch(ops.smm(q2, q2.T))


def _rational_coeffs(plan: IterationPlan):
    for step in plan.schedule.steps[: plan.steps]:
        if not step.gamma > 0:
            raise ValueError("invalid schedule")
        yield step.alpha, step.beta, step.gamma


def run_rational_chol(g, plan: IterationPlan, precision: Precision = Precision.F64) -> IterationResult:
    run = _Run(precision)
    ops = run.ops
    eps = _eps(plan, precision)
    coeffs = list(_rational_coeffs(plan))
    g, nu = _normalise(run, g, eps)
    m = g.shape[0]
    with np.errstate(all="ignore"):
        l_fac = _initial_factor(run, g, eps)
        # the initial QR of G^T is booked as one G-MM for this scheme
        ops.ledger.g_mm += 1
        mt = ops.eye(m)
        for alpha, beta, gamma in coeffs:
            rho = beta / gamma
            y = run.watch(ops.smm(ops.power(mt, plan.r), l_fac))
            v = _block_resolvent(run, y, gamma)
            mt = run.watch(ops.rnd(rho * mt + (alpha - rho) * ops.smm(v, mt)))
        o = ops.gmm(ops.power(mt, plan.work_a), g)
    return _finish(run, o, nu, plan, l0_factor=l_fac)


def run_coupled_chol(g, plan: IterationPlan, precision: Precision = Precision.F64) -> IterationResult:
    run = _Run(precision)
    ops = run.ops
    eps = _eps(plan, precision)
    coeffs = list(_rational_coeffs(plan))
    g, nu = _normalise(run, g, eps)
    m = g.shape[0]
    with np.errstate(all="ignore"):
        l_fac, q1 = _initial_factor(run, g, eps, with_q=True)
        ops.ledger.qr += 1
        l0 = l_fac
        c = ops.eye(m)
        eye = ops.eye(m)
        for alpha, beta, gamma in coeffs:
            rho = beta / gamma
            v = _block_resolvent(run, l_fac, gamma)
            w = ops.rnd(rho * eye + (alpha - rho) * v)
            w = ops.rnd(0.5 * (w + w.T))
            l_fac = run.watch(ops.smm(ops.power(w, plan.r), l_fac))
            c = run.watch(ops.smm(w, c))
        extra = plan.work_a - plan.r
        if extra >= 0:
            # C^a G = C^(a-r) (C^r L0) Q1^T and the tracked factor already is C^r L0,
            # which stays well conditioned where C^a does not
            left = l_fac if extra == 0 else ops.smm(ops.power(c, extra), l_fac)
            o = ops.gmm(left, q1.T)
        else:
            o = ops.gmm(ops.power(c, plan.work_a), g)
    return _finish(run, o, nu, plan, l0_factor=l0)


_DISPATCH = {
    "direct": run_direct,
    "m-accumulator": run_m_accumulator,
    "coupled": run_coupled,
    "coupled-ab": run_coupled_ab,
    "dual-ab": run_dual_ab,
    "coupled-dual": run_coupled_dual,
    "rational-chol": run_rational_chol,
    "coupled-chol": run_coupled_chol,
}


def run(g, plan: IterationPlan, precision: Precision = Precision.F64) -> IterationResult:
    """Dispatch to ``plan.scheme``; tall inputs are handled through the transpose."""
    g = np.asarray(g)
    if g.ndim != 2:
        raise ValueError("expected a matrix")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite input")
    tall = g.shape[0] > g.shape[1]
    res = _DISPATCH[plan.scheme](g.T if tall else g, plan, precision)
    if tall:
        res.output = res.output.T
        res.meta["transposed"] = True
    return res


def log_det_gram(res: IterationResult) -> float:
    """``log det(G G^T)`` from the saved initial factor of a Cholesky-type run."""
    if res.l0_factor is None:
        raise ValueError("run kept no initial factor")
    diag = np.abs(np.diag(res.l0_factor).astype(np.float64))
    k = diag.size
    return 2.0 * float(np.sum(np.log(diag))) + 2.0 * k * math.log(res.nu)


# --------------------------------------------------------------------------
# closed-form costs


def expected_ledger(plan: IterationPlan, pow_cost=power_cost) -> CostLedger:
    """Cost of a run of ``plan`` from the per-scheme formulas.

    ``pow_cost(k)`` is the multiply count charged for an integer power; the
    default is what binary exponentiation actually performs.
    """
    s, a, b, k = plan.scheme, plan.a, plan.b, plan.k
    t = plan.steps
    n_terms = len(plan.schedule.steps[0].coeffs) if plan.scheme in POLY_SCHEMES else 0
    p_extra = max(n_terms - 3, 0)  # extra S-MMs for P of degree above 2
    ratio = plan.ratio
    if s == "direct":
        if ratio == 1:
            return CostLedger(2 * t, (1 + p_extra) * t, 0)
        if ratio == Fraction(1, 2):
            return CostLedger(2 * t, (1 + p_extra) * t, 0)
        e = k * (ratio - Fraction(1, 2))
        init = pow_cost(abs(int(e)))
        per = 1 + pow_cost(k // 2) + 1 + p_extra
        return CostLedger(1 + 2 * t, init + per * t, 0, 1 if e < 0 else 0)
    if s == "m-accumulator":
        init = pow_cost(int(k * ratio))
        return CostLedger(2, init + (pow_cost(k) + 3 + p_extra) * t, 0)
    if s == "coupled":
        init = pow_cost(int(k * ratio))
        return CostLedger(1 + t, init + (pow_cost(k) + 2 + p_extra) * t, 0)
    if s == "coupled-ab":
        return CostLedger(1 + t, (2 + pow_cost(a) + pow_cost(b) + p_extra) * t, 0)
    if s == "dual-ab":
        return CostLedger(3 * t, (1 + pow_cost(a) + pow_cost(b - a) + p_extra) * t, 0)
    if s == "coupled-dual":
        init = pow_cost(int(k * ratio)) + pow_cost(int(k * (1 - ratio)))
        return CostLedger(1 + 3 * t, init + (4 + 2 * pow_cost(k) + 2 * p_extra) * t, 0)
    final = pow_cost(plan.work_a)
    per = 3 + pow_cost(plan.r)
    if s == "rational-chol":
        return CostLedger(2, per * t + final, t)
    if s == "coupled-chol":
        extra = plan.work_a - plan.r
        if extra >= 0:
            final = pow_cost(extra) + (1 if extra else 0)
        return CostLedger(1, per * t + final, 1 + t)
    raise ValueError(s)
