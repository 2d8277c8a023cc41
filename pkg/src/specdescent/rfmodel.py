"""Random-feature quadratic testbed and its proportional-limit formulas."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .diagnostics import Quadratic, inner
from .linalg import svd_oracle

ACTIVATIONS = ("relu", "swiglu", "identity")
RF_METHODS = (
    "gd",
    "specgd",
    "kaon",
    "gd-optstep",
    "specgd-optstep",
    "optimal-c-greedy",
    "optimal-c-scaling",
)
C_GRID = np.linspace(-0.5, 1.5, 41)
DIVERGENCE_LOSS = 1e12
SIGMA_FLOOR = 1e-12


@dataclass
class RfProblem:
    w: np.ndarray
    w_star: np.ndarray
    a_feat: np.ndarray
    activation: str = "relu"
    seed: int = 0

    @property
    def o_dim(self) -> int:
        return self.w.shape[0]

    @property
    def d_dim(self) -> int:
        return self.w.shape[1]

    @property
    def n_samples(self) -> int:
        return self.a_feat.shape[1]

    @property
    def y(self) -> np.ndarray:
        return self.w_star @ self.a_feat

    @property
    def loss_scale(self) -> float:
        return 1.0 / (self.n_samples * math.sqrt(self.d_dim))

    def with_weights(self, w: np.ndarray) -> "RfProblem":
        return RfProblem(w, self.w_star, self.a_feat, self.activation, self.seed)


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "identity":
        return pre
    if activation == "swiglu":
        half = pre.shape[0] // 2
        gate, value = pre[:half], pre[half:]
        return gate * expit(gate) * value
    raise ValueError(f"unknown activation {activation!r}")


def make_rf_problem(
    o: int = 120,
    d: int = 100,
    n: int = 400,
    activation: str = "relu",
    seed: int = 0,
    d_in: int | None = None,
) -> RfProblem:
    """Features ``A = act(M X / sqrt(d_in))`` with Gaussian ``M``, ``X``; Gaussian ``W``, ``W*``.

    For the identity activation with ``d == n`` the feature matrix is a square
    Gaussian matrix.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    d_in = d if d_in is None else d_in
    rows = 2 * d if activation == "swiglu" else d
    if activation == "identity":
        a_feat = rng.standard_normal((d, n))
    else:
        m = rng.standard_normal((rows, d_in))
        x = rng.standard_normal((d_in, n))
        a_feat = _activate(m @ x / math.sqrt(d_in), activation)
    w = rng.standard_normal((o, d)) / math.sqrt(d)
    w_star = rng.standard_normal((o, d)) / math.sqrt(d)
    return RfProblem(w, w_star, a_feat, activation, seed)


def rf_loss(p: RfProblem, w: np.ndarray | None = None) -> float:
    w = p.w if w is None else w
    r = w @ p.a_feat - p.y
    return p.loss_scale * inner(r, r)


def rf_grad(p: RfProblem, w: np.ndarray | None = None) -> np.ndarray:
    w = p.w if w is None else w
    return 2.0 * p.loss_scale * ((w - p.w_star) @ p.a_feat) @ p.a_feat.T


def rf_curvature(p: RfProblem, d: np.ndarray) -> float:
    """``<D, Hess f [D]> = 2 ||D A||^2 / (N sqrt(d))``."""
    da = d @ p.a_feat
    return 2.0 * p.loss_scale * inner(da, da)


def rf_quadratic(p: RfProblem) -> Quadratic:
    """The RF loss as ``0.5 <X, H[X]> - <B, X> + c`` for the descent diagnostics."""
    gram = p.a_feat @ p.a_feat.T
    two_s = 2.0 * p.loss_scale
    y = p.y
    return Quadratic(lambda x: two_s * (x @ gram), two_s * (p.w_star @ gram), p.loss_scale * inner(y, y))


# --------------------------------------------------------------------------
# adaptive exponent


def power_mean(s: np.ndarray, c: float) -> float:
    """``((1/r) sum s^{2(1-c)})^{1/(2(1-c))}``; the geometric mean at c = 1."""
    e = 2.0 * (1.0 - c)
    if abs(e) < 1e-12:
        return float(np.exp(np.mean(np.log(s))))
    ls = np.log(s)
    # log-sum-exp keeps extreme exponents finite
    top = np.max(e * ls)
    return float(np.exp((top + np.log(np.mean(np.exp(e * ls - top)))) / e))


def _keep(s: np.ndarray) -> np.ndarray:
    return s > SIGMA_FLOOR * max(s[0], SIGMA_FLOOR)


def exponent_direction(g: np.ndarray, c: float, svd=None) -> tuple[np.ndarray, np.ndarray]:
    """``U diag(s~^{1-2c}) V^T`` with power-mean normalised singular values.

    Returns the direction and the spectrum it applies.
    """
    res = svd or svd_oracle(g)
    keep = _keep(res.s)
    s = res.s[keep]
    st = s / power_mean(s, c)
    mapped = st ** (1.0 - 2.0 * c)
    return (res.u[:, keep] * mapped) @ res.v[:, keep].T, mapped


@dataclass(frozen=True)
class GreedyChoice:
    c: float
    eta: float
    predicted_delta: float


def optimal_c_greedy(g, a_feat, d_dim: int, grid=None) -> GreedyChoice:
    """Pick c on a grid by the predicted one-step decrease of the quadratic model.

    The effective sample count is N/2, which makes eta* = n a / b the exact
    minimiser along D_c for the 1/(N sqrt(d)) loss.
    """
    grid = C_GRID if grid is None else np.atleast_1d(np.asarray(grid, dtype=np.float64))
    if grid.size == 0:
        raise ValueError("empty grid")
    g = np.asarray(g, dtype=np.float64)
    a_feat = np.asarray(a_feat, dtype=np.float64)
    n_eff = a_feat.shape[1] / 2.0
    res = svd_oracle(g)
    s = res.s[_keep(res.s)]
    best = None
    for c in grid:
        d_c, mapped = exponent_direction(g, float(c), res)
        a_c = float(np.sum(s * mapped))
        da = d_c @ a_feat
        b_c = inner(da, da) / math.sqrt(d_dim)
        delta = -n_eff * a_c**2 / (2.0 * b_c)
        cand = GreedyChoice(float(c), n_eff * a_c / b_c, delta)
        if best is None:
            best = cand
        elif math.isclose(delta, best.predicted_delta, rel_tol=1e-12):
            # equal decreases tie-break towards c = 0
            if abs(cand.c) < abs(best.c):
                best = cand
        elif delta < best.predicted_delta:
            best = cand
    return best


@dataclass(frozen=True)
class ScalingFit:
    c: float
    alpha: float
    beta: float
    degenerate: bool = False


def c_from_spectra(sigma, k) -> ScalingFit:
    """Least-squares power-law fits ``sigma_i ~ i^-alpha``, ``k_i ~ i^-beta``; c = beta / (2 alpha)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    idx = np.arange(1, sigma.size + 1, dtype=np.float64)
    keep = (sigma > SIGMA_FLOOR) & (k > 0)
    li = np.log(idx[keep])
    design = np.column_stack([-li, np.ones_like(li)])
    alpha = float(np.linalg.lstsq(design, np.log(sigma[keep]), rcond=None)[0][0])
    beta = float(np.linalg.lstsq(design, np.log(k[keep]), rcond=None)[0][0])
    if alpha <= 0:
        return ScalingFit(0.0, alpha, beta, True)
    return ScalingFit(float(np.clip(beta / (2 * alpha), -0.5, 1.5)), alpha, beta)


def optimal_c_scaling(g, a_feat) -> ScalingFit:
    res = svd_oracle(g)
    k = np.sum((res.v.T @ np.asarray(a_feat)) ** 2, axis=1)
    return c_from_spectra(res.s, k)


# --------------------------------------------------------------------------
# training


@dataclass
class RfTrace:
    method: str
    rows: list = field(default_factory=list)
    diverged: bool = False

    COLUMNS = ("step", "loss", "eta", "c", "gamma", "phi")

    def column(self, name: str) -> np.ndarray:
        i = self.COLUMNS.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)


def _polar(g):
    res = svd_oracle(g)
    keep = _keep(res.s)
    return res.u[:, keep] @ res.v[:, keep].T


def _kaon_rf(g, rng):
    res = svd_oracle(g)
    return (res.u * rng.uniform(0.0, 1.0, res.s.size)) @ res.v.T


def rf_train(p: RfProblem, method: str, steps: int = 1000, lr: float = 1e-2, seed: int = 0) -> RfTrace:
    """Full-batch training with updates ``W - eta <G, D> D``.

    D is G / ||G||_F (gd), the polar factor (specgd), a noisy-spectrum factor
    (kaon) or the power-mean normalised ``(G G^T)^{-c} G``. Fixed-rate methods
    use eta = lr; the others use the exact line minimiser eta = 1 / lambda(D).
    Each trace row records the loss before the update.
    """
    if method not in RF_METHODS:
        raise ValueError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    trace = RfTrace(method)
    w = p.w.copy()
    for t in range(steps):
        loss = rf_loss(p, w)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            trace.diverged = True
            break
        g = rf_grad(p, w)
        if not np.any(g):
            trace.rows.append((t, loss, 0.0, math.nan, 1.0, 0.0))
            continue
        c = math.nan
        if method in ("gd", "gd-optstep"):
            d, c = g / np.linalg.norm(g), 0.0
        elif method in ("specgd", "specgd-optstep"):
            d, c = _polar(g), 0.5
        elif method == "kaon":
            d = _kaon_rf(g, rng)
        elif method == "optimal-c-greedy":
            c = optimal_c_greedy(g, p.a_feat, p.d_dim).c
            d = exponent_direction(g, c)[0]
        else:
            c = optimal_c_scaling(g, p.a_feat).c
            d = exponent_direction(g, c)[0]
        gd_ = inner(g, d)
        curv = rf_curvature(p, d)
        eta = lr if method in ("gd", "specgd", "kaon") else 1.0 / curv
        phi = gd_**2 / curv
        trace.rows.append((t, loss, eta, c, 1.0, phi))
        w = w - eta * gd_ * d
    return trace


# --------------------------------------------------------------------------
# proportional-limit formulas


def rf_asym_polynomial(c_mat, delta: float, k: int, corrected: bool = False) -> np.ndarray:
    """Deterministic equivalent ``p_k(C)`` of ``V^T H^k V`` for ``k <= 3``.

    The default cubic is ``C^3 + delta tau1 C^2 + (delta tau2 + delta^2 tau1^2) C``.
    At ``C = I`` that gives ``1 + 2 delta + delta^2`` while the Marchenko-Pastur
    third moment is ``1 + 3 delta + delta^2``; ``corrected=True`` uses
    ``2 delta tau1 C^2`` for the middle term, which matches it.
    """
    c_mat = np.asarray(c_mat, dtype=np.float64)
    if k not in (1, 2, 3):
        raise ValueError("unsupported moment order")
    n = c_mat.shape[0]
    c2 = c_mat @ c_mat
    tau1 = np.trace(c_mat) / n
    if k == 1:
        return c_mat.copy()
    if k == 2:
        return c2 + delta * tau1 * c_mat
    tau2 = np.trace(c2) / n
    mid = (2.0 if corrected else 1.0) * delta * tau1
    return c2 @ c_mat + mid * c2 + (delta * tau2 + delta**2 * tau1**2) * c_mat


def empirical_moment_gap(
    c_diag, b: int, k: int, rank: int, rng=None, corrected: bool = False, z=None
) -> float:
    """``|| V^T H^k V - V^T p_k(C) V ||_op`` for ``H = A A^T / b``, ``A = C^{1/2} Z``.

    ``C`` is diagonal and ``V`` spans the first ``rank`` coordinates.  ``Z`` is
    drawn from ``rng`` unless given, which lets a size sweep reuse nested blocks
    of one draw.
    """
    c_diag = np.asarray(c_diag, dtype=np.float64)
    n = c_diag.size
    if z is None:
        z = rng.standard_normal((n, b))
    elif z.shape != (n, b):
        raise ValueError("z must have shape (len(c_diag), b)")
    a = np.sqrt(c_diag)[:, None] * z
    v = np.eye(n)[:, :rank]
    # H^k V through k products with A A^T / b, never forming H
    hv = v
    for _ in range(k):
        hv = a @ (a.T @ hv) / b
    lhs = v.T @ hv
    rhs = rf_asym_polynomial(np.diag(c_diag), n / b, k, corrected)[:rank, :rank]
    return float(np.linalg.norm(lhs - rhs, 2))


@dataclass(frozen=True)
class AsymptoticSpec:
    sigma: np.ndarray
    lam: np.ndarray
    delta: float
    d_rank: int | None = None

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=np.float64)
        l = np.asarray(self.lam, dtype=np.float64)
        if s.shape != l.shape or s.ndim != 1:
            raise ValueError("sigma and lambda must be vectors of equal length")
        if np.any(s <= 0) or np.any(l <= 0):
            raise ValueError("sigma and lambda must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "lam", l)

    @property
    def d(self) -> int:
        return self.sigma.size if self.d_rank is None else self.d_rank


def curvature_weights(lam, delta) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    return (lam**3 + 2 * delta * lam**2 + (delta + delta**2) * lam) / (lam**2 + delta * lam)


def limiting_gamma_phi(spec: AsymptoticSpec, method: str) -> tuple[float, float]:
    lam, delta = spec.lam, spec.delta
    x = spec.sigma * np.sqrt(lam * (lam + delta))
    h = 1.0 / (lam + delta)
    dw = curvature_weights(lam, delta)
    if method == "muon":
        return float(np.sum(x * h) / np.sum(x)), float(np.sum(x) ** 2 / np.sum(dw))
    if method == "sgd":
        x2 = x * x
        return float(np.sum(x2 * h) / np.sum(x2)), float(np.sum(x2) ** 2 / np.sum(x2 * dw))
    raise ValueError(f"unknown method {method!r}")


def delta_infinity_limits(spec: AsymptoticSpec) -> tuple[float, float]:
    """Large-aspect limits of gamma^2 Phi: SGD's, and Muon's after multiplying by delta^2."""
    lim_sgd = float(np.sum(spec.sigma**2 * spec.lam))
    lim_muon = float(np.sum(spec.sigma * np.sqrt(spec.lam)) ** 2 / spec.d)
    if lim_muon > lim_sgd * (1 + 1e-12):
        raise ArithmeticError("Cauchy-Schwarz ordering violated")
    return lim_sgd, lim_muon
