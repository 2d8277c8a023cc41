"""Scalar dynamics of the Kaon map ``x -> lam x (1 - x^2)^2``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

PRESET_LAMBDAS = tuple(np.linspace(3.5, 4.25, 10))


def scalar_map(x, lam: float):
    x = np.asarray(x, dtype=np.float64)
    # same association as the matrix form lam * ((I - X X^T)^2 X)
    b = 1.0 - x * x
    return lam * ((b * b) * x)


def map_maximum(lam: float) -> float:
    """Peak of the map on [0, 1], attained at x = 1/sqrt(5)."""
    return lam * 16.0 / (25.0 * np.sqrt(5.0))


def positive_fixed_point(lam: float) -> float:
    """Root of ``lam (1 - x^2)^2 = 1`` in (0, 1); exists for lam > 1."""
    if lam <= 1:
        raise ValueError("no positive fixed point for lam <= 1")
    return float(brentq(lambda x: lam * (1 - x * x) ** 2 - 1.0, 0.0, 1.0, xtol=1e-15, rtol=1e-15))


@dataclass(frozen=True)
class MapConfig:
    lam: float = 4.1
    particles: int = 5000
    burn_in: int = 500
    collect: int = 200
    bins: int = 200
    seed: int = 0
    lo: float = 0.0
    hi: float = 1.2
    init_low: float = 0.05
    init_high: float = 0.95

    def __post_init__(self):
        if not 0 < self.lam <= 4.25:
            raise ValueError("lambda must lie in (0, 4.25]")
        if min(self.particles, self.burn_in + 1, self.collect, self.bins) <= 0:
            raise ValueError("counts must be positive")


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    overflow: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.overflow

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    def support_max(self) -> float:
        nz = np.nonzero(self.counts)[0]
        return float(self.edges[nz[-1] + 1]) if nz.size else 0.0

    def rows(self):
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            yield float(lo), float(hi), int(c)


def stationary_histogram(cfg: MapConfig) -> Histogram:
    rng = np.random.default_rng(cfg.seed)
    x = rng.uniform(cfg.init_low, cfg.init_high, cfg.particles)
    for _ in range(cfg.burn_in):
        x = scalar_map(x, cfg.lam)
    edges = np.linspace(cfg.lo, cfg.hi, cfg.bins + 1)
    counts = np.zeros(cfg.bins, dtype=np.int64)
    overflow = 0
    for _ in range(cfg.collect):
        x = scalar_map(x, cfg.lam)
        inside = (x >= cfg.lo) & (x <= cfg.hi)
        overflow += int(np.count_nonzero(~inside))
        counts += np.histogram(x[inside], bins=edges)[0]
    return Histogram(edges, counts, overflow)


def cobweb_trajectory(x0: float, lam: float = 4.1, steps: int = 40) -> list[tuple[float, float]]:
    """Orbit as ``(x_t, f(x_t))`` pairs; consecutive pairs trace the cobweb."""
    out = []
    x = float(x0)
    for _ in range(steps):
        fx = float(scalar_map(x, lam))
        out.append((x, fx))
        x = fx
    return out


def orbit(x0: float, lam: float, steps: int) -> np.ndarray:
    xs = np.empty(steps + 1)
    xs[0] = x0
    for t in range(steps):
        xs[t + 1] = scalar_map(xs[t], lam)
    return xs


def separation_time(x0: float, lam: float = 4.1, eps: float = 1e-8, threshold: float = 0.1, steps: int = 40):
    """First step at which two orbits started ``eps`` apart differ by more than ``threshold``."""
    a, b = orbit(x0, lam, steps), orbit(x0 + eps, lam, steps)
    hit = np.nonzero(np.abs(a - b) > threshold)[0]
    return int(hit[0]) if hit.size else None
