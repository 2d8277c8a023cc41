"""Minimax coefficient fitting for the rational and polynomial iteration steps.

Each step maps a scalar ``y`` in ``[l, u]`` (a normalized singular value raised to
``2/b``) towards 1.  Rational steps have the form

    R(y) = y (alpha + beta y^b) / (1 + gamma y^b)

and polynomial steps ``y P(y^p)``.  A step is fitted to minimise
``max |1 - R(y)|`` on its interval; composing fitted steps with the interval
recursion ``l' = R(l), u' = 2 - R(l)`` gives the optimal composition.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

GAMMA_MAX = 1e5
MAX_EXCHANGES = 200
# below this interval width the Remez system is too ill-conditioned in the
# monomial basis; the maximal-contact (Padé) step is used instead
DEGENERATE_WIDTH = 1e-4

_SIGNS4 = np.array([1.0, -1.0, 1.0, -1.0])


class RemezError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


def cushion_for(b: float) -> float:
    if b < 1:
        raise ValueError("b must be >= 1")
    return 1.84e-8 ** (1.0 / b)


def lower_bound_for(b: float) -> float:
    if b < 1:
        raise ValueError("b must be >= 1")
    return 1e-11 ** (2.0 / b)


@dataclass(frozen=True)
class RationalStep:
    alpha: float
    beta: float
    gamma: float
    l: float
    u: float
    level: float
    b: int
    l_fit: float = float("nan")
    fit_level: float = float("nan")
    refs: tuple = ()
    kind: str = "remez"

    def __call__(self, y):
        y = np.asarray(y, dtype=np.float64)
        z = y**self.b
        return y * (self.alpha + self.beta * z) / (1.0 + self.gamma * z)

    def gram(self, x):
        """The same step written in the Gram variable ``x = y^b``."""
        return (self.alpha + self.beta * x) / (1.0 + self.gamma * x)

    def critical_points(self) -> np.ndarray:
        return _rational_critical(self.alpha, self.beta, self.gamma, self.b)

    def to_dict(self) -> dict:
        return {k: self.__dict__[k] for k in ("alpha", "beta", "gamma", "l", "u", "level")}


@dataclass(frozen=True)
class PolyStep:
    coeffs: tuple
    power: int
    l: float
    u: float
    level: float
    l_fit: float = float("nan")
    fit_level: float = float("nan")
    refs: tuple = ()
    kind: str = "remez"

    def __call__(self, y):
        y = np.asarray(y, dtype=np.float64)
        return y * np.polynomial.polynomial.polyval(y**self.power, self.coeffs)

    def poly(self, x):
        """``P`` itself, evaluated at the matrix argument ``x = y^power``."""
        return np.polynomial.polynomial.polyval(x, self.coeffs)

    def critical_points(self) -> np.ndarray:
        return _poly_critical(np.asarray(self.coeffs), self.power)

    def to_dict(self) -> dict:
        return {"coeffs": list(self.coeffs), "l": self.l, "u": self.u, "level": self.level}


@dataclass(frozen=True)
class FitSchedule:
    steps: tuple
    b: int
    l0: float
    cushion: float
    family: str = "rational"
    n_terms: int = 0

    def __len__(self) -> int:
        return len(self.steps)

    def compose(self, y, upto: int | None = None):
        out = np.asarray(y, dtype=np.float64)
        for step in self.steps[:upto]:
            out = step(out)
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "family": self.family,
                "b": self.b,
                "l0": self.l0,
                "cushion": self.cushion,
                "n_terms": self.n_terms,
                "steps": [s.to_dict() for s in self.steps],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "FitSchedule":
        d = json.loads(text)
        family = d.get("family", "rational")
        b = int(d["b"])
        steps = []
        for s in d["steps"]:
            if family == "rational":
                steps.append(
                    RationalStep(s["alpha"], s["beta"], s["gamma"], s["l"], s["u"], s["level"], b)
                )
            else:
                steps.append(PolyStep(tuple(s["coeffs"]), b, s["l"], s["u"], s["level"]))
        return cls(tuple(steps), b, d["l0"], d["cushion"], family, d.get("n_terms", 0))


PolySchedule = FitSchedule


# --------------------------------------------------------------------------
# critical points


def _positive_real_roots(coeffs_low_first: np.ndarray) -> np.ndarray:
    c = np.trim_zeros(np.asarray(coeffs_low_first, dtype=np.float64), "b")
    if c.size <= 1:
        return np.empty(0)
    roots = np.roots(c[::-1])
    real = roots[np.abs(roots.imag) <= 1e-12 * np.maximum(1.0, np.abs(roots))].real
    return np.sort(real[real > 0])


def _rational_critical(alpha, beta, gamma, b) -> np.ndarray:
    z = _positive_real_roots([alpha, (b + 1) * beta + (1 - b) * alpha * gamma, beta * gamma])
    return z ** (1.0 / b)


def _poly_critical(coeffs: np.ndarray, p: int) -> np.ndarray:
    j = np.arange(coeffs.size)
    z = _positive_real_roots(coeffs * (p * j + 1))
    return z ** (1.0 / p)


def _chebyshev_refs(l: float, u: float, npts: int) -> np.ndarray:
    t = (1.0 - np.cos(np.pi * np.arange(npts) / (npts - 1))) / 2.0
    if u / l > 10.0:
        return l * (u / l) ** t
    return l + (u - l) * t


def scan_extrema(err, l: float, u: float, npts: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Local extrema of ``err`` on a dense grid, endpoints included.

    Returns positions and error values, with interior extrema refined by a
    bounded scalar search.  Used as an independent check of the fitted steps.
    """
    from scipy.optimize import minimize_scalar

    if u / l > 10.0:
        grid = np.geomspace(l, u, npts)
    else:
        grid = np.linspace(l, u, npts)
    e = err(grid)
    d = np.diff(e)
    idx = [0]
    for i in range(1, npts - 1):
        if d[i - 1] * d[i] < 0:
            idx.append(i)
    idx.append(npts - 1)
    xs, es = [], []
    for i in idx:
        if i in (0, npts - 1):
            xs.append(grid[i])
            es.append(e[i])
            continue
        sgn = 1.0 if e[i] > e[i - 1] else -1.0
        res = minimize_scalar(
            lambda x: -sgn * float(err(np.array([x]))[0]),
            bounds=(grid[i - 1], grid[i + 1]),
            method="bounded",
            options={"xatol": 1e-14 * max(1.0, grid[i])},
        )
        xs.append(res.x)
        es.append(-sgn * res.fun)
    return np.array(xs), np.array(es)


# --------------------------------------------------------------------------
# rational fitting


def _balanced(errs: np.ndarray, level: float) -> bool:
    """True once the errors at the references equioscillate to round-off."""
    spread = np.max(np.abs(np.abs(errs) - abs(level)))
    return spread <= max(1e-12 * abs(level), 64 * np.finfo(float).eps)


def _solve_rational_system(refs: np.ndarray, b: int, u: float):
    y = refs
    z = y**b
    ones = np.ones_like(y)
    a0 = np.column_stack([y, y * z, -z, -ones])
    a1 = np.column_stack([0 * y, 0 * y, _SIGNS4 * z, _SIGNS4 * ones])
    with np.errstate(all="ignore"):
        evals, evecs = scipy.linalg.eig(a0, -a1)
    best = None
    for lam, vec in zip(evals, evecs.T):
        if not np.isfinite(lam) or abs(lam.imag) > 1e-10 * max(1.0, abs(lam)):
            continue
        vec = vec.real if np.all(np.abs(vec.imag) <= 1e-10 * np.abs(vec).max()) else None
        if vec is None or abs(vec[3]) < 1e-300:
            continue
        alpha, beta, gamma = vec[:3] / vec[3]
        level = lam.real
        # denominator positive on [0, u]
        if gamma <= -1.0 / u**b:
            continue
        key = (level <= 0, abs(level))
        if best is None or key < best[0]:
            best = (key, alpha, beta, gamma, level)
    if best is None:
        return None
    return best[1:]


def _remez_rational(l: float, u: float, b: int, refs: np.ndarray | None = None):
    if refs is None:
        refs = _chebyshev_refs(l, u, 4)
    width = u - l
    last = float("nan")
    for _ in range(MAX_EXCHANGES):
        sol = _solve_rational_system(refs, b, u)
        if sol is None:
            raise RemezError("denominator positivity violated", last)
        alpha, beta, gamma, level = sol
        last = level
        crit = _rational_critical(alpha, beta, gamma, b)
        crit = crit[(crit > l) & (crit < u)]
        if crit.size != 2:
            raise RemezError("reference exchange lost alternation", level)
        new = np.array([l, crit[0], crit[1], u])
        moved = np.max(np.abs(new - refs))
        refs = new
        if moved < 1e-12 * width or _balanced(
            1.0 - RationalStep(alpha, beta, gamma, l, u, 0.0, b)(refs), level
        ):
            sol = _solve_rational_system(refs, b, u)
            if sol is not None:
                alpha, beta, gamma, level = sol
            return alpha, beta, gamma, level, refs
    raise RemezError("remez stalled", last)


def _remez_rational_robust(l: float, u: float, b: int):
    try:
        return _remez_rational(l, u, b)
    except RemezError:
        pass
    # continuation in the lower endpoint, starting from an easy interval
    try:
        lo = max(l, 0.5 * u)
        refs = None
        path = [lo]
        while path[-1] > l:
            path.append(max(l, path[-1] * 0.25))
        for lk in path:
            if refs is not None:
                # keep interior references in the same relative log position
                ratio = np.log(refs[1:3] / refs[0]) / np.log(u / refs[0])
                refs = np.concatenate([[lk], lk * (u / lk) ** ratio, [u]])
            alpha, beta, gamma, level, refs = _remez_rational(lk, u, b, refs)
        return alpha, beta, gamma, level, refs
    except RemezError:
        # one retry from perturbed references
        rng = np.random.default_rng(0)
        refs = _chebyshev_refs(l, u, 4)
        refs[1:3] *= 1.0 + 0.05 * rng.standard_normal(2)
        return _remez_rational(l, u, b, np.sort(refs))


def _pade_rational(b: int) -> tuple[float, float, float]:
    s = 1.0 / b
    ratio = (1.0 + s) / (1.0 - s) if b > 1 else 3.0
    return ratio, 1.0, ratio


def _check_interval(l: float, u: float) -> None:
    if not (0.0 < l <= u):
        raise ValueError(f"need 0 < l <= u, got l={l}, u={u}")


def _recentre_rational(alpha, beta, gamma, b, l, u, refs):
    """Scale the step so that its error is balanced on the actual ``[l, u]``."""
    probe = RationalStep(alpha, beta, gamma, l, u, 0.0, b)
    pts = np.concatenate([[l, u], refs, probe.critical_points()])
    pts = pts[(pts >= l) & (pts <= u)]
    lo = float(probe(np.array([l]))[0])
    hi = float(np.max(probe(pts)))
    scale = 2.0 / (lo + hi)
    return alpha * scale, beta * scale, 1.0 - scale * lo


def fit_rational_step(l: float, u: float, b: int) -> RationalStep:
    """Best ``y (alpha + beta y^b)/(1 + gamma y^b)`` approximation of 1 on [l, u]."""
    _check_interval(l, u)
    if b < 1:
        raise ValueError("b must be positive")
    if u - l <= DEGENERATE_WIDTH:
        alpha, beta, gamma = _pade_rational(b)
        if u == l:
            # scale so that R(l) = 1 exactly
            v = float(RationalStep(alpha, beta, gamma, l, u, 0.0, b)(np.array([l]))[0])
            return RationalStep(alpha / v, beta / v, gamma, l, u, 0.0, b, l, 0.0, (l,), "pade")
        alpha, beta, level = _recentre_rational(alpha, beta, gamma, b, l, u, ())
        return RationalStep(alpha, beta, gamma, l, u, level, b, l, level, (l, u), "pade")
    alpha, beta, gamma, level, refs = _remez_rational_robust(l, u, b)
    return RationalStep(alpha, beta, gamma, l, u, level, b, l, level, tuple(refs), "remez")


def _fit_with_floor(l, u, b, floor, gamma_max):
    lf = min(max(l, floor), u)
    step = fit_rational_step(lf, u, b)
    if step.gamma > gamma_max:
        lo, hi = lf, u
        for _ in range(60):
            mid = math.sqrt(lo * hi)
            if fit_rational_step(mid, u, b).gamma > gamma_max:
                lo = mid
            else:
                hi = mid
            if hi / lo < 1.0 + 1e-6:
                break
        lf = hi
        step = fit_rational_step(lf, u, b)
        if step.gamma > gamma_max:
            raise RemezError("cushion insufficient", step.gamma)
    return step, lf


def fit_rational_schedule(
    l0: float,
    steps: int,
    b: int,
    cushion: float | None = None,
    gamma_max: float = GAMMA_MAX,
) -> FitSchedule:
    """Optimal composition of ``steps`` rational steps starting from ``[l0, 1]``.

    Each step is fitted on ``[max(l_t, cushion), u_t]`` and then rescaled so that
    its error is balanced on the true interval ``[l_t, u_t]``.  If the fitted
    pole parameter still exceeds ``gamma_max`` the floor is raised until it does
    not.
    """
    if not 0.0 < l0 <= 1.0:
        raise ValueError("l0 must lie in (0, 1]")
    if steps < 1:
        raise ValueError("need at least one step")
    if b % 2:
        raise ValueError("b must be even; double (a, b) first")
    if cushion is None:
        cushion = cushion_for(b)
    l, u = l0, 1.0
    out = []
    for _ in range(steps):
        step, lf = _fit_with_floor(l, u, b, cushion, gamma_max)
        alpha, beta, level = step.alpha, step.beta, step.level
        if lf > l or step.kind == "pade":
            alpha, beta, level = _recentre_rational(
                step.alpha, step.beta, step.gamma, b, l, u, step.refs
            )
        step = RationalStep(
            alpha, beta, step.gamma, l, u, level, b, lf, step.fit_level, step.refs, step.kind
        )
        out.append(step)
        nxt = float(step(np.array([l]))[0])
        l, u = min(nxt, 1.0), max(2.0 - nxt, 1.0)
    return FitSchedule(tuple(out), b, l0, cushion, "rational")


# --------------------------------------------------------------------------
# polynomial fitting


def _remez_poly(l: float, u: float, p: int, n: int, refs=None):
    refs = _chebyshev_refs(l, u, n + 1) if refs is None else np.asarray(refs, dtype=np.float64)
    signs = (-1.0) ** np.arange(n + 1)
    width = u - l
    level = float("nan")
    for _ in range(MAX_EXCHANGES):
        z = refs**p
        mat = np.column_stack([refs * z**j for j in range(n)] + [signs])
        try:
            sol = np.linalg.solve(mat, np.ones(n + 1))
        except np.linalg.LinAlgError:
            raise RemezError("singular reference system", level) from None
        coeffs, level = sol[:n], sol[n]
        crit = _poly_critical(coeffs, p)
        crit = crit[(crit > l) & (crit < u)]
        if crit.size != n - 1:
            raise RemezError("reference exchange lost alternation", level)
        new = np.concatenate([[l], crit, [u]])
        moved = np.max(np.abs(new - refs))
        refs = new
        if moved < 1e-12 * width or _balanced(
            1.0 - PolyStep(tuple(coeffs), p, l, u, 0.0)(refs), level
        ):
            z = refs**p
            mat = np.column_stack([refs * z**j for j in range(n)] + [signs])
            sol = np.linalg.solve(mat, np.ones(n + 1))
            return sol[:n], sol[n], refs
    raise RemezError("remez stalled", level)


def _remez_poly_robust(l: float, u: float, p: int, n: int):
    try:
        return _remez_poly(l, u, p, n)
    except RemezError:
        pass
    # continuation in the lower endpoint; interior references barely move as l -> 0
    lk = max(l, 0.5 * u)
    coeffs, level, refs = _remez_poly(lk, u, p, n)
    while lk > l:
        lk = max(l, lk * 0.25)
        start = np.concatenate([[lk], np.clip(refs[1:-1], lk * 1.001, u * 0.999), [u]])
        coeffs, level, refs = _remez_poly(lk, u, p, n, np.sort(start))
    return coeffs, level, refs


def _taylor_poly(p: int, n: int) -> np.ndarray:
    """Coefficients (in z) of the degree n-1 Taylor polynomial of z^{-1/p} at 1."""
    s = 1.0 / p
    # series of (1 - xi)^{-s} in xi = 1 - z
    xi_coeffs = [1.0]
    for j in range(1, n):
        xi_coeffs.append(xi_coeffs[-1] * (s + j - 1) / j)
    out = np.polynomial.Polynomial([0.0])
    one_minus_z = np.polynomial.Polynomial([1.0, -1.0])
    for j, c in enumerate(xi_coeffs):
        out = out + c * one_minus_z**j
    return out.coef


def _recentre_poly(coeffs, p, l, u, refs):
    probe = PolyStep(tuple(coeffs), p, l, u, 0.0)
    pts = np.concatenate([[l, u], refs, probe.critical_points()])
    pts = pts[(pts >= l) & (pts <= u)]
    lo = float(probe(np.array([l]))[0])
    hi = float(np.max(probe(pts)))
    scale = 2.0 / (lo + hi)
    return np.asarray(coeffs) * scale, 1.0 - scale * lo


def fit_poly_step(l: float, u: float, r: float, n_terms: int) -> PolyStep:
    """Best ``y P(y^{2r})`` approximation of 1 on [l, u], ``P`` with ``n_terms`` coefficients."""
    _check_interval(l, u)
    p = 2 * r
    if p != int(p) or p < 1:
        raise ValueError("2r must be a positive integer")
    p = int(p)
    if n_terms < 1:
        raise ValueError("n_terms must be positive")
    if n_terms == 1:
        c = 2.0 / (l + u)
        return PolyStep((c,), p, l, u, 1.0 - c * l, l, 1.0 - c * l, (l, u), "remez")
    if u - l <= DEGENERATE_WIDTH:
        coeffs = _taylor_poly(p, n_terms)
        if u == l:
            v = float(PolyStep(tuple(coeffs), p, l, u, 0.0)(np.array([l]))[0])
            return PolyStep(tuple(coeffs / v), p, l, u, 0.0, l, 0.0, (l,), "pade")
        coeffs, level = _recentre_poly(coeffs, p, l, u, ())
        return PolyStep(tuple(coeffs), p, l, u, level, l, level, (l, u), "pade")
    coeffs, level, refs = _remez_poly_robust(l, u, p, n_terms)
    return PolyStep(tuple(coeffs), p, l, u, level, l, level, tuple(refs), "remez")


def fit_poly_schedule(
    l0: float,
    steps: int,
    r: float,
    n_terms: int = 3,
    cushion: float = 0.0,
) -> FitSchedule:
    """Optimal composition of polynomial steps, fitted on ``[max(l_t, cushion*u_t), u_t]``."""
    if not 0.0 < l0 <= 1.0:
        raise ValueError("l0 must lie in (0, 1]")
    if steps < 1:
        raise ValueError("need at least one step")
    p = int(round(2 * r))
    l, u = l0, 1.0
    out = []
    for _ in range(steps):
        lf = min(max(l, cushion * u), u)
        step = fit_poly_step(lf, u, r, n_terms)
        coeffs, level = np.asarray(step.coeffs), step.level
        if lf > l or step.kind == "pade":
            coeffs, level = _recentre_poly(coeffs, p, l, u, step.refs)
        step = PolyStep(tuple(coeffs), p, l, u, level, lf, step.fit_level, step.refs, step.kind)
        out.append(step)
        nxt = float(step(np.array([l]))[0])
        l, u = min(nxt, 1.0), max(2.0 - nxt, 1.0)
    return FitSchedule(tuple(out), p, l0, cushion, "poly", n_terms)
