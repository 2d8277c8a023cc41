"""Dense kernels, precision emulation, cost accounting and the SVD oracle.

Every iteration scheme routes its matrix products through :class:`MatOps`, which
rounds results to the active precision and books the product into a
:class:`CostLedger` under the class it belongs to (gradient-shaped product,
square product, or thin QR).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Precision(enum.Enum):
    F64 = "f64"
    F32 = "f32"
    F16E = "f16e"
    BF16E = "bf16e"

    @property
    def dtype(self):
        return np.float64 if self is Precision.F64 else np.float32

    @property
    def unit_roundoff(self) -> float:
        return {
            Precision.F64: 2.0**-53,
            Precision.F32: 2.0**-24,
            Precision.F16E: 2.0**-11,
            Precision.BF16E: 2.0**-8,
        }[self]

    @property
    def tag(self) -> int:
        return list(Precision).index(self)

    @classmethod
    def from_tag(cls, tag: int) -> "Precision":
        return list(cls)[tag]

    def round(self, x: np.ndarray) -> np.ndarray:
        """Round ``x`` to this format (round-to-nearest-even)."""
        x = np.asarray(x, dtype=self.dtype)
        if self is Precision.F16E:
            with np.errstate(over="ignore"):
                return x.astype(np.float16).astype(np.float32)
        if self is Precision.BF16E:
            return round_bf16(x)
        return x


def round_bf16(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float32)
    bits = x.view(np.uint32).astype(np.uint64)
    bias = 0x7FFF + ((bits >> 16) & 1)
    rounded = ((bits + bias) & 0xFFFF0000).astype(np.uint32)
    out = rounded.view(np.float32).copy()
    nan = np.isnan(x)
    out[nan] = x[nan]
    return out


@dataclass
class CostLedger:
    g_mm: int = 0
    s_mm: int = 0
    qr: int = 0
    # explicit inverses; only used by schemes whose frozen Gram power is negative
    inv: int = 0

    def as_dict(self) -> dict:
        return {"g_mm": self.g_mm, "s_mm": self.s_mm, "qr": self.qr, "inv": self.inv}

    def __add__(self, other: "CostLedger") -> "CostLedger":
        return CostLedger(
            self.g_mm + other.g_mm,
            self.s_mm + other.s_mm,
            self.qr + other.qr,
            self.inv + other.inv,
        )


def power_cost(k: int) -> int:
    """Multiplies performed by binary exponentiation of ``A**k``.

    Equals ceil(log2 k) whenever k has at most two set bits or k <= 6.
    """
    if k <= 1:
        return 0
    return k.bit_length() - 1 + bin(k).count("1") - 1


def ceil_log2(k: int) -> int:
    return 0 if k <= 1 else (k - 1).bit_length()


def _check_finite(m: np.ndarray) -> None:
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite input")


def thin_qr(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Householder thin QR with a non-negative diagonal on R."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] < m.shape[1]:
        raise ValueError(f"thin_qr needs rows >= cols, got shape {m.shape}")
    _check_finite(m)
    q, r = np.linalg.qr(m, mode="reduced")
    signs = np.where(np.diag(r) < 0, -1.0, 1.0).astype(r.dtype)
    return q * signs, r * signs[:, None]


def sym_int_power(a: np.ndarray, k: int, ledger: CostLedger | None = None) -> np.ndarray:
    """``a**k`` by binary exponentiation; each multiply is booked as one S-MM."""
    return MatOps(ledger=ledger if ledger is not None else CostLedger()).power(a, k)


@dataclass
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def svd_oracle(m: np.ndarray) -> SvdResult:
    """Thin SVD in double precision. Test and reference use only."""
    m = np.asarray(m, dtype=np.float64)
    _check_finite(m)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return SvdResult(u, s, vt.T)


def fractional_power_oracle(g: np.ndarray, a: int, b: int) -> np.ndarray:
    """``(G G^T)^{-a/b} G`` via the SVD; zero singular values stay zero."""
    res = svd_oracle(g)
    s = res.s
    tol = max(g.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    keep = s > tol
    out = np.zeros_like(s)
    out[keep] = s[keep] ** (1.0 - 2.0 * a / b)
    return (res.u * out) @ res.v.T


def haar_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def log_spaced_spectrum(r: int, kappa: float) -> np.ndarray:
    return np.logspace(0.0, -np.log10(kappa), r)


def haar_factor_matrix(
    m: int,
    n: int,
    spectrum,
    seed: int,
    precision: Precision = Precision.F64,
) -> np.ndarray:
    """U diag(spectrum) V^T with Haar U, V; built in double, then cast."""
    spectrum = np.asarray(spectrum, dtype=np.float64)
    r = min(m, n)
    if spectrum.shape != (r,):
        raise ValueError(f"spectrum must have length {r}")
    if np.any(spectrum <= 0):
        raise ValueError("spectrum entries must be positive")
    rng = np.random.default_rng(seed)
    u = haar_orthogonal(m, rng)[:, :r]
    v = haar_orthogonal(n, rng)[:, :r]
    return precision.round((u * spectrum) @ v.T)


@dataclass
class MatOps:
    """Rounding, cost-booking front end for the matrix primitives."""

    precision: Precision = Precision.F64
    ledger: CostLedger = field(default_factory=CostLedger)

    def rnd(self, x) -> np.ndarray:
        return self.precision.round(x)

    def eye(self, k: int) -> np.ndarray:
        return np.eye(k, dtype=self.precision.dtype)

    def gmm(self, a, b) -> np.ndarray:
        self.ledger.g_mm += 1
        return self._mul(a, b)

    def smm(self, a, b) -> np.ndarray:
        self.ledger.s_mm += 1
        return self._mul(a, b)

    def _mul(self, a, b):
        with np.errstate(all="ignore"):
            return self.rnd(a @ b)

    def qr(self, m) -> tuple[np.ndarray, np.ndarray]:
        self.ledger.qr += 1
        q, r = thin_qr(m)
        return self.rnd(q), self.rnd(r)

    def inv(self, a) -> np.ndarray:
        self.ledger.inv += 1
        return self.rnd(np.linalg.inv(a))

    def power(self, a, k: int) -> np.ndarray:
        a = np.asarray(a)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("power needs a square matrix")
        if k < 0:
            raise ValueError("power needs k >= 0")
        if k == 0:
            return self.eye(a.shape[0])
        result = None
        base = a
        while k:
            if k & 1:
                result = base if result is None else self.smm(result, base)
            k >>= 1
            if k:
                base = self.smm(base, base)
        return result


def sv_error(output: np.ndarray, g: np.ndarray, a: int, b: int) -> float:
    """Worst relative singular-value error of ``output`` against ``(G G^T)^{-a/b} G``.

    The map sigma -> sigma**(1 - 2a/b) reverses the order of the spectrum when
    a/b > 1/2, so singular values are paired by rank of the mapped value.
    """
    s_out = svd_oracle(output).s
    s_g = svd_oracle(g).s
    r = min(s_out.size, s_g.size)
    s_out, s_g = s_out[:r], s_g[:r]
    expo = 1.0 - 2.0 * a / b
    target = s_g**expo
    order = np.argsort(-target, kind="stable")
    return float(np.max(np.abs(s_out / target[order] - 1.0)))
