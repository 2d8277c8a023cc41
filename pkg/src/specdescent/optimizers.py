"""Update directions for spectral optimizers and a heavy-ball stepping helper."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import Quadratic, inner
from .iterations import IterationPlan, log_det_gram, make_plan, run
from .linalg import haar_orthogonal
from .linalg import Precision, svd_oracle
from .remez import FitSchedule, fit_poly_schedule

log = logging.getLogger(__name__)

MUON_STEPS = 5
# lower end of the Muon fitting interval, for singular values of G / ||G||_F
MUON_L0 = 1e-3
KAON_LAMBDA = 4.1
KAON_DIVISOR = 1.175
FREON_PRESETS = ((1, 4), (1, 3), (1, 2), (2, 3), (3, 4))
TSGD_FRACTIONS = (0.0, 0.001, 0.005, 0.01, 0.02, 0.05, 0.10)


@dataclass
class UpdateDirection:
    d: np.ndarray
    dual_scale: float
    meta: dict = field(default_factory=dict)


@dataclass
class MomentumState:
    buffer: np.ndarray
    beta: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")


def _check_nonzero(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("expected a matrix")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite input")
    if not np.any(g):
        raise ValueError("zero gradient")
    return g


def _inner(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(x * y))


@functools.lru_cache(maxsize=16)
def muon_schedule(steps: int = MUON_STEPS, l0: float = MUON_L0) -> FitSchedule:
    """Quintic odd-polynomial schedule ``x (c0 + c1 x^2 + c2 x^4)``, fitted once and cached."""
    return fit_poly_schedule(l0, steps, 1, 3)


@functools.lru_cache(maxsize=64)
def _plan(a: int, b: int, scheme: str, steps: int | None) -> IterationPlan:
    # schedules depend only on these arguments, so refitting per call is wasted work
    return make_plan(a, b, scheme, steps)


def _short_side(g: np.ndarray):
    return (g.T, True) if g.shape[0] > g.shape[1] else (g, False)


def muon_direction(g, schedule: FitSchedule | None = None, precision: Precision = Precision.F64) -> UpdateDirection:
    g = _check_nonzero(g)
    schedule = schedule or muon_schedule()
    w, flip = _short_side(g)
    x = precision.round(w / np.linalg.norm(w))
    for step in schedule.steps:
        c0, c1, c2 = step.coeffs
        a_t = precision.round(x @ x.T)
        b_t = precision.round(c1 * a_t + c2 * precision.round(a_t @ a_t))
        x = precision.round(c0 * x + precision.round(b_t @ x))
    d = x.T if flip else x
    level = schedule.steps[-1].level
    return UpdateDirection(d, _inner(g, d), {"kind": "muon", "steps": len(schedule.steps), "level": level})


def kaon_direction(
    g,
    steps: int = 5,
    lam: float = KAON_LAMBDA,
    divisor: float = KAON_DIVISOR,
    precision: Precision = Precision.F64,
) -> UpdateDirection:
    g = _check_nonzero(g)
    w, flip = _short_side(g)
    x = precision.round(w / np.linalg.norm(w))
    eye = np.eye(x.shape[0], dtype=x.dtype)
    for _ in range(steps):
        b_t = eye - precision.round(x @ x.T)
        b_t = precision.round(b_t @ b_t)
        x = precision.round(lam * precision.round(b_t @ x))
    x = x / divisor
    d = x.T if flip else x
    return UpdateDirection(d, _inner(g, d), {"kind": "kaon", "steps": steps, "lambda": lam})


def freon_direction(
    g,
    a: int,
    b: int,
    steps: int | None = None,
    scheme: str = "coupled-chol",
    precision: Precision = Precision.F64,
) -> UpdateDirection:
    """Fractional direction ``(G G^T)^{-a/b} G`` divided by the moment-based scale mu.

    mu = (<X_T, G> / n)^((a + 2b) / (2a - 2b)) with n the short side of G.
    a == b is routed to :func:`freon_c1_direction`.
    """
    g = _check_nonzero(g)
    if a == b:
        return freon_c1_direction(g, steps, precision)
    if a == 0:
        d = g / np.linalg.norm(g)
        return UpdateDirection(d, _inner(g, d), {"kind": "freon", "a": 0, "b": b})
    w, flip = _short_side(g)
    n = w.shape[0]
    plan = _plan(a, b, scheme, steps)
    res = run(w / np.linalg.norm(w), plan, precision)
    if res.diverged:
        raise FloatingPointError("iteration diverged")
    x_t = res.output.astype(np.float64)
    ip = _inner(x_t, w) / n
    if not ip > 0:
        raise ValueError("invalid inner product")
    mu = ip ** ((a + 2 * b) / (2 * a - 2 * b))
    d = x_t / mu
    if a * 2 == b:
        spec = float(np.linalg.norm(d, 2))
        if abs(spec - 1.0) > 0.05:
            log.warning("mu-rescaled polar direction has spectral norm %.4g", spec)
    d = d.T if flip else d
    return UpdateDirection(
        d, _inner(g, d), {"kind": "freon", "a": a, "b": b, "scheme": scheme, "mu": mu, "steps": plan.steps}
    )


def freon_c1_direction(g, steps: int | None = None, precision: Precision = Precision.F64) -> UpdateDirection:
    """``det(G G^T)^{1/(2n)} (G G^T)^{-1} G``: the q -> 0 end of the Freon family."""
    g = _check_nonzero(g)
    w, flip = _short_side(g)
    n = w.shape[0]
    plan = _plan(1, 1, "coupled-chol", steps)
    res = run(w, plan, precision)
    if res.diverged:
        raise FloatingPointError("iteration diverged")
    log_det = log_det_gram(res)
    scale = math.exp(log_det / (2 * n))
    d = res.output.astype(np.float64) * scale
    d = d.T if flip else d
    return UpdateDirection(d, _inner(g, d), {"kind": "freon", "a": 1, "b": 1, "log_det": log_det})


def truncated_sgd_direction(g, p_frac: float, match: str = "frobenius") -> UpdateDirection:
    """Drop the top ``ceil(p_frac * r)`` singular values and restore the original norm."""
    g = _check_nonzero(g)
    if not 0.0 <= p_frac < 1.0:
        raise ValueError("p_frac must lie in [0, 1)")
    if match not in ("frobenius", "spectral"):
        raise ValueError(f"unknown norm {match!r}")
    if p_frac == 0.0:
        return UpdateDirection(g.copy(), _inner(g, g), {"kind": "tsgd", "p_frac": 0.0})
    res = svd_oracle(g)
    s = res.s.copy()
    drop = math.ceil(p_frac * s.size)
    kept = s.copy()
    kept[:drop] = 0.0
    if not np.any(kept > 0):
        raise ValueError("fully truncated")
    if match == "frobenius":
        factor = np.linalg.norm(s) / np.linalg.norm(kept)
    else:
        factor = s[0] / kept.max()
    d = (res.u * (kept * factor)) @ res.v.T
    return UpdateDirection(d, _inner(g, d), {"kind": "tsgd", "p_frac": p_frac, "dropped": drop})


def sgd_direction(g, normalization: str = "spectral") -> UpdateDirection:
    g = _check_nonzero(g)
    if normalization == "spectral":
        scale = svd_oracle(g).s[0]
    elif normalization == "frobenius":
        scale = np.linalg.norm(g)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    d = g / scale
    return UpdateDirection(d, _inner(g, d), {"kind": "sgd", "normalization": normalization})


def mean_schatten_normalize(d, p: float) -> np.ndarray:
    """Scale a matrix (or a spectrum vector) to unit mean Schatten-p norm."""
    if not p > 0:
        raise ValueError("p must be positive")
    d = np.asarray(d, dtype=np.float64)
    s = np.abs(d) if d.ndim == 1 else svd_oracle(d).s
    r = s.size
    if math.isinf(p):
        norm, target = s.max(), 1.0
    else:
        smax = s.max()
        norm = smax * np.sum((s / smax) ** p) ** (1.0 / p)
        target = r ** (1.0 / p)
    if norm == 0:
        raise ValueError("zero gradient")
    return d * (target / norm)


def direction(g, kind: str, **kw) -> UpdateDirection:
    if kind == "muon":
        return muon_direction(g, **kw)
    if kind == "kaon":
        return kaon_direction(g, **kw)
    if kind == "freon":
        return freon_direction(g, **kw)
    if kind == "tsgd":
        return truncated_sgd_direction(g, **kw)
    if kind == "sgd":
        return sgd_direction(g, **kw)
    raise ValueError(f"unknown direction kind {kind!r}")


def step(
    weights: np.ndarray,
    state: MomentumState,
    grad: np.ndarray,
    kind: str,
    lr: float,
    dual: bool = True,
    **kw,
) -> tuple[np.ndarray, MomentumState]:
    """One heavy-ball step; the spectral map is applied to the momentum buffer.

    With ``dual`` the direction is scaled by ``<buffer, D>``; otherwise the raw
    LMO direction is used.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if state.buffer.shape != grad.shape:
        raise ValueError("momentum buffer shape does not match the gradient")
    buf = state.beta * state.buffer + grad
    new_state = MomentumState(buf, state.beta)
    if lr == 0 or not np.any(buf):
        return np.array(weights, dtype=np.float64), new_state
    upd = direction(buf, kind, **kw)
    scale = upd.dual_scale if dual else 1.0
    return weights - lr * scale * upd.d, new_state


# --------------------------------------------------------------------------
# convergence on a fixed convex quadratic


def matrix_quadratic(n: int = 32, mu: float = 1e-6, seed: int = 0) -> tuple[Quadratic, np.ndarray]:
    """Strongly convex ``f(X) = 0.5 <X - X*, S (X - X*) R>`` on ``n x n`` matrices.

    ``S`` and ``R`` have log-spaced spectra in ``[sqrt(mu), 1]``, so the Hessian
    eigenvalues spread over ``[mu, 1]`` and plain gradient methods see a long
    sublinear phase before the linear one. Returns the objective and ``X*``.
    """
    rng = np.random.default_rng(seed)
    lo = math.sqrt(mu)

    def spd():
        q = haar_orthogonal(n, rng)
        return (q * np.logspace(0.0, math.log10(lo), n)) @ q.T

    s, r = spd(), spd()
    x_star = rng.standard_normal((n, n))

    def hess(x):
        return s @ x @ r

    return Quadratic(hess, hess(x_star), 0.5 * inner(x_star, hess(x_star))), x_star


def gradient_norm_trace(f: Quadratic, x0, kind: str, eta: float, iters: int, lipschitz: float = 1.0, **kw) -> np.ndarray:
    """Squared gradient norms ``||G_k||_F^2`` for ``k < iters``.

    Steps follow the convergence theorem's rule ``X - alpha_k <G, D> D`` with
    ``alpha_k = eta / (L ||D||_F^2)``, so any scalar normalisation of the
    direction cancels and one ``eta`` in (0, 2) serves every method.
    """
    x = np.array(x0, dtype=np.float64)
    out = np.empty(iters)
    for k in range(iters):
        g = f.grad(x)
        out[k] = inner(g, g)
        if out[k] == 0.0:
            out[k:] = 0.0
            break
        d = direction(g, kind, **kw).d
        x = x - (eta / (lipschitz * inner(d, d))) * inner(g, d) * d
    return out


def min_norm_slope(trace: np.ndarray, k_lo: int = 100, k_hi: int | None = None, points: int = 20) -> float:
    """Least-squares slope of ``log min_{k<K} ||G_k||^2`` against ``log K``."""
    k_hi = trace.size if k_hi is None else k_hi
    ks = np.unique(np.geomspace(k_lo, k_hi, points).astype(int))
    running = np.minimum.accumulate(trace)
    vals = running[ks - 1]
    return float(np.polyfit(np.log(ks), np.log(vals), 1)[0])
