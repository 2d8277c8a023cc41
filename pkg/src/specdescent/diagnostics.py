"""Alignment, descent potential and the exact one-step descent identity."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

Curvature = Callable[[np.ndarray], float]


@dataclass
class DescentRecord:
    gamma: float
    phi: float
    lam: float
    alpha_lambda: float
    predicted_delta: float
    actual_delta: float

    def as_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    @property
    def residual(self) -> float:
        return abs(self.predicted_delta - self.actual_delta)


def inner(x: np.ndarray, y: np.ndarray) -> float:
    """Trace inner product ``tr(X^T Y)``."""
    return float(np.sum(np.asarray(x) * np.asarray(y)))


def alignment_gamma(g_full, g_batch, d) -> float:
    den = inner(g_batch, d)
    if den == 0.0:
        raise ValueError("degenerate direction")
    return inner(g_full, d) / den


class NonPositiveCurvature(ValueError):
    def __init__(self, curvature: float):
        super().__init__(f"non-positive curvature {curvature!r}")
        self.curvature = curvature


def descent_potential_phi(g_batch, d, curvature: Curvature) -> float:
    lam = float(curvature(np.asarray(d)))
    if not lam > 0:
        raise NonPositiveCurvature(lam)
    return inner(g_batch, d) ** 2 / lam


def frobenius_curvature(d) -> float:
    return inner(d, d)


@dataclass(frozen=True)
class Quadratic:
    """``f(X) = 0.5 <X, H[X]> - <B, X> + c`` given by its Hessian action."""

    hess: Callable[[np.ndarray], np.ndarray]
    lin: np.ndarray
    const: float = 0.0

    def value(self, x) -> float:
        return 0.5 * inner(x, self.hess(x)) - inner(self.lin, x) + self.const

    def grad(self, x) -> np.ndarray:
        return self.hess(x) - self.lin

    def curvature(self, d) -> float:
        return inner(d, self.hess(d))


def exact_descent_check(
    f: Quadratic,
    x,
    d,
    alpha: float,
    g_batch=None,
) -> DescentRecord:
    """Compare the predicted one-step change with the realised one on a quadratic.

    The step is ``X - alpha <G_batch, D> D``. With no batch gradient the full
    gradient is used, so gamma = 1.
    """
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    g_full = f.grad(x)
    g_b = g_full if g_batch is None else np.asarray(g_batch, dtype=np.float64)
    gamma = alignment_gamma(g_full, g_b, d)
    lam = f.curvature(d)
    phi = descent_potential_phi(g_b, d, f.curvature)
    al = alpha * lam
    predicted = -phi * (gamma - 0.5 * al) * al
    actual = f.value(x - alpha * inner(g_b, d) * d) - f.value(x)
    return DescentRecord(gamma, phi, lam, al, predicted, actual)


def optimal_alpha(record: DescentRecord) -> float:
    return record.gamma / record.lam


def optimal_step(g, d, a_feat, d_dim: int) -> float:
    """Exact minimiser over eta of the RF loss along ``X - eta D``.

    With loss ``||W A - Y||^2 / (N sqrt(d))`` the curvature along ``D`` is
    ``2 ||D A||^2 / (N sqrt(d))``, so eta* = <G, D> / curvature.
    """
    da = np.asarray(d) @ np.asarray(a_feat)
    n_samples = np.asarray(a_feat).shape[1]
    curv = 2.0 * inner(da, da) / (n_samples * np.sqrt(d_dim))
    if not curv > 0:
        raise ValueError("direction annihilated by the features")
    return inner(g, d) / curv
