"""Laplacian model of prediction residuals under uniform scalar quantization.

Residuals of one block are modelled as Laplace with parameter
``lam = sqrt(2 / sigma2)``. Quantizing with an odd step ``q`` gives closed-form
entropy (bits per sample) and mean squared error, both of which depend on
``lam`` and ``q`` only through the product ``u = lam * q`` (distortion up to a
``q**2`` factor). That is what makes the lookup-table backend possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

Q_MAX = 255
LN2 = math.log(2.0)

# Below this product the closed-form distortion loses digits to cancellation,
# so its Taylor series is used instead (relative error < 1e-11).
_U_SMALL = 0.2


@njit(cache=True)
def _small_u_factor(u):
    u2 = u * u
    return 1.0 / 12.0 + u2 * (-7.0 / 2880.0 + u2 * (31.0 / 483840.0 - u2 * 127.0 / 77414400.0))


def lambda_from_variance(sigma2):
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.sqrt(2.0 / sigma2)


def estimate_variance(residuals) -> float:
    """Population variance (mean removed) of a block's lossless residuals.

    Returns ``nan`` when fewer than two residuals are available; callers treat
    that as a block without usable statistics.
    """
    r = np.asarray(residuals, dtype=np.float64).ravel()
    if r.size < 2:
        return math.nan
    return float(np.var(r))


def augment_variance(sigma2, q_prev):
    """Add the quantization noise of the previous step, ``q**2 / 12``."""
    q_prev = np.asarray(q_prev, dtype=np.float64)
    return np.asarray(sigma2, dtype=np.float64) + q_prev * q_prev / 12.0


def rate_u(u):
    """Entropy in bits of a unit-step quantized Laplace source with ``lam*q = u``."""
    u = np.asarray(u, dtype=np.float64)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        a = np.exp(-0.5 * u)
        e = np.exp(-u)
        one_m_e = -np.expm1(-u)
        one_m_a = -np.expm1(-0.5 * u)
        zero_term = -one_m_a * np.log1p(-a) / LN2
        tail = -(a / LN2) * (np.log(0.5 * one_m_e) + 0.5 * u - u / one_m_e)
        r = zero_term + tail
    r = np.where(u > 1400.0, 0.0, r)
    return np.maximum(r, 0.0) if r.ndim else max(float(r), 0.0)


def distortion_factor(u):
    """``D(lam, q) / q**2`` as a function of ``u = lam*q``."""
    u = np.asarray(u, dtype=np.float64)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        us = np.maximum(u, _U_SMALL)
        head = (2.0 - 0.25 * np.exp(-0.5 * us) * (us * us + 4.0 * us + 8.0)) / (us * us)
        # e^{u} e^{-3u/2} folded into e^{-u/2} to stay finite for large u
        tail = (
            (-us * (us + 4.0) - 8.0) * np.exp(-1.5 * us)
            + (us * (us - 4.0) + 8.0) * np.exp(-0.5 * us)
        ) / (4.0 * us * us * (-np.expm1(-us)))
        g = head + tail
    return np.where(u < _U_SMALL, _small_u_factor(u), g)


@njit(cache=True)
def rd_entry(lam, q):
    """Scalar rate and distortion, fusing :func:`rate_u` and :func:`distortion_factor`."""
    u = lam * q
    if u > 1400.0:
        return 0.0, 2.0 / (lam * lam)
    a = math.exp(-0.5 * u)
    one_m_a = -math.expm1(-0.5 * u)
    one_m_e = one_m_a * (1.0 + a)
    r = -one_m_a * math.log1p(-a) / LN2
    r -= (a / LN2) * (math.log(0.5 * one_m_e) + 0.5 * u - u / one_m_e)
    if u < _U_SMALL:
        g = _small_u_factor(u)
    else:
        u2 = u * u
        head = (2.0 - 0.25 * a * (u2 + 4.0 * u + 8.0)) / u2
        tail = ((-u * (u + 4.0) - 8.0) * a * a * a + (u * (u - 4.0) + 8.0) * a) / (
            4.0 * u2 * one_m_e
        )
        g = head + tail
    return max(r, 0.0), g * q * q


def _check_lambda(lam):
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(~(lam > 0)):
        raise ValueError("Laplace parameter must be positive; classify the block as INFTY first")
    return lam


def rate(lam, q):
    """Bits per sample of Laplace(lam) residuals quantized with step ``q``."""
    lam = _check_lambda(lam)
    return rate_u(lam * np.asarray(q, dtype=np.float64))


def distortion(lam, q):
    """MSE of Laplace(lam) residuals quantized with step ``q``."""
    lam = _check_lambda(lam)
    q = np.asarray(q, dtype=np.float64)
    return distortion_factor(lam * q) * q * q


def odd_steps(q_max: int = Q_MAX) -> np.ndarray:
    return np.arange(1, q_max + 1, 2, dtype=np.int64)


def _inverse(rate_of_u, lam, target_rate, q_max):
    """Closest-rate odd step by bisection; the rate falls monotonically with the step."""
    lam = _check_lambda(lam)
    target = np.asarray(target_rate, dtype=np.float64)
    lam_b, target_b = np.broadcast_arrays(lam, target)
    lam_b = lam_b.astype(np.float64)
    # index k stands for the step 2k+1; find the first k whose rate is <= target
    lo = np.zeros(lam_b.shape, dtype=np.int64)
    hi = np.full(lam_b.shape, (q_max - 1) // 2 + 1, dtype=np.int64)
    while np.any(lo < hi):
        mid = (lo + hi) // 2
        active = lo < hi
        r = rate_of_u(lam_b * (2 * np.minimum(mid, (q_max - 1) // 2) + 1))
        below = (r <= target_b) & active
        hi = np.where(below, mid, hi)
        lo = np.where(active & ~below, mid + 1, lo)
    k_last = (q_max - 1) // 2
    k = np.minimum(lo, k_last)
    prev = np.maximum(k - 1, 0)
    r_k = rate_of_u(lam_b * (2 * k + 1))
    r_prev = rate_of_u(lam_b * (2 * prev + 1))
    take_prev = (k > 0) & (np.abs(r_prev - target_b) <= np.abs(r_k - target_b))
    out = 2 * np.where(take_prev, prev, k) + 1
    return int(out) if out.ndim == 0 else out


def inverse_rate(lam, target_rate, q_max: int = Q_MAX):
    """Odd step whose modelled rate is closest to ``target_rate``.

    Ties go to the smaller step. Vectorised over matching ``lam``/``target``
    arrays.
    """
    return _inverse(rate_u, lam, target_rate, q_max)


@dataclass(frozen=True)
class RdTables:
    """Integer lookup tables for rate and distortion indexed by ``u = lam*q``.

    The ``u`` axis is log-spaced on ``[u_min, u_max]``. Entries store
    ``log2`` of the rate (14-bit codes) and of the distortion factor (13-bit
    codes), so the quantisation error is a fixed *relative* error rather
    than an absolute one; lookup interpolates linearly between neighbours.
    """

    rate_codes: np.ndarray
    dist_codes: np.ndarray
    u_min: float
    u_max: float
    rate_lo: float
    rate_hi: float
    dist_lo: float
    dist_hi: float

    RATE_BITS = 14
    DIST_BITS = 13

    @property
    def entries(self) -> int:
        return self.rate_codes.size

    @property
    def footprint_bytes(self) -> int:
        """Size of the bit-packed tables."""
        return len(self.pack())

    def pack(self) -> bytes:
        def packed(codes, bits):
            b = ((codes[:, None] >> np.arange(bits - 1, -1, -1)) & 1).astype(np.uint8)
            return np.packbits(b.ravel()).tobytes()

        return packed(self.rate_codes, self.RATE_BITS) + packed(self.dist_codes, self.DIST_BITS)

    def _position(self, u):
        u = np.asarray(u, dtype=np.float64)
        lo, hi = math.log(self.u_min), math.log(self.u_max)
        with np.errstate(divide="ignore"):
            pos = (np.log(np.maximum(u, 1e-300)) - lo) / (hi - lo) * (self.entries - 1)
        return u, np.clip(pos, 0.0, self.entries - 1)

    @staticmethod
    def _interp(codes, pos):
        i0 = np.minimum(np.floor(pos).astype(np.int64), codes.size - 2)
        f = pos - i0
        return codes[i0] * (1.0 - f) + codes[i0 + 1] * f

    def rate_u(self, u):
        u, pos = self._position(u)
        code = self._interp(self.rate_codes, pos)
        log_r = self.rate_lo + code * (self.rate_hi - self.rate_lo) / ((1 << self.RATE_BITS) - 1)
        r = np.exp2(log_r)
        r = np.where(u > self.u_max, 0.0, r)
        return np.where(u < self.u_min, rate_u(u), r)

    def distortion_factor(self, u):
        u, pos = self._position(u)
        code = self._interp(self.dist_codes, pos)
        log_g = self.dist_lo + code * (self.dist_hi - self.dist_lo) / ((1 << self.DIST_BITS) - 1)
        g = np.exp2(log_g)
        with np.errstate(divide="ignore"):
            g = np.where(u > self.u_max, 2.0 / np.maximum(u, 1e-300) ** 2, g)
        return np.where(u < self.u_min, _small_u_factor(u), g)

    def rate(self, lam, q):
        return self.rate_u(_check_lambda(lam) * np.asarray(q, dtype=np.float64))

    def distortion(self, lam, q):
        q = np.asarray(q, dtype=np.float64)
        return self.distortion_factor(_check_lambda(lam) * q) * q * q


def build_tables(lambda_q_max: float = 60.0, entries: int = 45000, lambda_q_min: float = 1e-3) -> RdTables:
    if entries < 2:
        raise ValueError("tables need at least two entries")
    u = np.exp(np.linspace(math.log(lambda_q_min), math.log(lambda_q_max), entries))
    log_r = np.log2(np.maximum(rate_u(u), 1e-300))
    log_g = np.log2(distortion_factor(u))
    r_lo, r_hi = float(log_r.min()), float(log_r.max())
    g_lo, g_hi = float(log_g.min()), float(log_g.max())
    r_codes = np.rint((log_r - r_lo) / (r_hi - r_lo) * ((1 << RdTables.RATE_BITS) - 1)).astype(np.uint16)
    g_codes = np.rint((log_g - g_lo) / (g_hi - g_lo) * ((1 << RdTables.DIST_BITS) - 1)).astype(np.uint16)
    return RdTables(r_codes, g_codes, float(lambda_q_min), float(lambda_q_max), r_lo, r_hi, g_lo, g_hi)


class RdModel:
    """Rate/distortion evaluator with a switchable backend (direct or tables)."""

    def __init__(self, tables: RdTables | None = None):
        self.tables = tables

    def rate(self, lam, q):
        return self.tables.rate(lam, q) if self.tables is not None else rate(lam, q)

    def distortion(self, lam, q):
        return self.tables.distortion(lam, q) if self.tables is not None else distortion(lam, q)

    def inverse_rate(self, lam, target_rate, q_max: int = Q_MAX):
        rate_fn = rate_u if self.tables is None else self.tables.rate_u
        return _inverse(rate_fn, lam, target_rate, q_max)


_TABLES: RdTables | None = None


def default_tables() -> RdTables:
    global _TABLES
    if _TABLES is None:
        _TABLES = build_tables()
    return _TABLES
