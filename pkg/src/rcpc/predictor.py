"""Adaptive linear predictor for multiband imagery.

This is a self-contained variant of the CCSDS-123 "full prediction" mode with
neighbour-oriented local sums; it is not bit-compatible with the standard.

Normative integer rules (shared by encoder and decoder):

* Local sum ``sig`` of the four causal neighbours W, NW, N, NE. On the first
  line ``sig = 4*W``; on the first column ``sig = 2*(N + NE)``; on the last
  column NE is replaced by N.
* Local differences: directional ``4*N - sig``, ``4*W - sig``, ``4*NW - sig``
  (all zero on the first line; W and NW replaced by N on the first column)
  and central ``4*s - sig`` taken from up to ``P`` previous bands.
* ``dhat = W . U`` with weights in Q``omega`` fixed point.
* Scaled prediction
  ``stilde = clip(floor((dhat + 2**omega*(sig - 4*smid)) / 2**(omega+1)) + 2*smid + 1,
  0, 2*smax + 1)`` and predicted sample ``stilde >> 1``. The first sample of a
  band uses ``2*s`` of the previous band (or ``2*smid`` for band 0).
* Sign-algorithm update with ``e = 2*s_rec - stilde`` (``sign(0) = 0``) and
  scaling exponent ``rho = clip(vmin + floor((t - X) / 2**tinc), vmin, vmax) +
  D - omega``; each weight moves by ``floor((sign(e) * U * 2**-rho + 1) / 2)`` and
  saturates to ``[-2**(omega+2), 2**(omega+2) - 1]``.

All neighbour values are *reconstructed* samples so the decoder can follow.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# indices into the packed parameter vector
P_BANDS, P_OMEGA, P_DEPTH, P_VMIN, P_VMAX, P_TINC, P_COLS = range(7)

DEFAULT_OMEGA = 19
DEFAULT_VMIN = -1
DEFAULT_VMAX = 3
DEFAULT_TINC_LOG2 = 6


def make_params(columns, bit_depth, pred_bands=3, omega=DEFAULT_OMEGA,
                vmin=DEFAULT_VMIN, vmax=DEFAULT_VMAX, tinc_log2=DEFAULT_TINC_LOG2):
    return np.array([pred_bands, omega, bit_depth, vmin, vmax, tinc_log2, columns], dtype=np.int64)


def initial_weights(bands, pred_bands=3, omega=DEFAULT_OMEGA):
    """Directional weights start at zero, the nearest band at 7/8, others at zero."""
    w = np.zeros((bands, 3 + pred_bands), dtype=np.int64)
    if pred_bands > 0:
        w[:, 3] = (7 << omega) // 8
    return w


@njit(cache=True)
def local_sum(rec, r, z, y, x, ncols, smid):
    if y > 0:
        if x > 0:
            if x < ncols - 1:
                return rec[r, z, x - 1] + rec[r - 1, z, x - 1] + rec[r - 1, z, x] + rec[r - 1, z, x + 1]
            return rec[r, z, x - 1] + rec[r - 1, z, x - 1] + 2 * rec[r - 1, z, x]
        if ncols > 1:
            return 2 * (rec[r - 1, z, x] + rec[r - 1, z, x + 1])
        return 4 * rec[r - 1, z, x]
    if x > 0:
        return 4 * rec[r, z, x - 1]
    return 4 * smid


@njit(cache=True)
def predict(rec, cent, w, r, z, y, x, prm, u):
    """Fill ``u`` with local differences; return ``(sig, dhat, stilde, n_u)``.

    ``rec[r]`` is the current line and ``rec[r-1]`` the previous one;
    ``cent[b, x]`` holds central differences already computed on this line.
    """
    depth = prm[P_DEPTH]
    omega = prm[P_OMEGA]
    smid = np.int64(1) << (depth - 1)
    smax = (np.int64(1) << depth) - 1
    pz = min(z, prm[P_BANDS])
    n_u = 3 + pz
    ncols = prm[P_COLS]
    if y == 0 and x == 0:
        for j in range(n_u):
            u[j] = 0
        if z > 0 and prm[P_BANDS] > 0:
            return 4 * smid, np.int64(0), 2 * rec[r, z - 1, 0], n_u
        return 4 * smid, np.int64(0), 2 * smid, n_u
    sig = local_sum(rec, r, z, y, x, ncols, smid)
    if y > 0:
        dn = 4 * rec[r - 1, z, x] - sig
        if x > 0:
            dw = 4 * rec[r, z, x - 1] - sig
            dnw = 4 * rec[r - 1, z, x - 1] - sig
        else:
            dw = dn
            dnw = dn
    else:
        dn = np.int64(0)
        dw = np.int64(0)
        dnw = np.int64(0)
    u[0] = dn
    u[1] = dw
    u[2] = dnw
    dhat = w[z, 0] * dn + w[z, 1] * dw + w[z, 2] * dnw
    for i in range(pz):
        c = cent[z - 1 - i, x]
        u[3 + i] = c
        dhat += w[z, 3 + i] * c
    val = dhat + (sig - 4 * smid) * (np.int64(1) << omega)
    stilde = (val >> (omega + 1)) + 2 * smid + 1
    if stilde < 0:
        stilde = np.int64(0)
    elif stilde > 2 * smax + 1:
        stilde = 2 * smax + 1
    return sig, dhat, stilde, n_u


@njit(cache=True)
def update_weights(w, z, u, n_u, err, t, prm):
    if err == 0:
        return
    sgn = 1 if err > 0 else -1
    omega = prm[P_OMEGA]
    v = prm[P_VMIN] + (t - prm[P_COLS]) // (np.int64(1) << prm[P_TINC])
    if v < prm[P_VMIN]:
        v = prm[P_VMIN]
    elif v > prm[P_VMAX]:
        v = prm[P_VMAX]
    rho = v + prm[P_DEPTH] - omega
    wmax = (np.int64(1) << (omega + 2)) - 1
    wmin = -(np.int64(1) << (omega + 2))
    for j in range(n_u):
        inc = sgn * u[j]
        if rho >= 0:
            d = (inc + (np.int64(1) << rho)) >> (rho + 1)
        else:
            d = (inc * (np.int64(1) << (-rho)) + 1) >> 1
        nw = w[z, j] + d
        if nw > wmax:
            nw = wmax
        elif nw < wmin:
            nw = wmin
        w[z, j] = nw


@njit(cache=True)
def _rooms(pred, q, smax):
    half = (q - 1) // 2
    return (pred + half) // q, (smax - pred + half) // q


@njit(cache=True)
def map_residual(qd, pred, stilde, q, smax):
    """Fold a (quantized) residual into a non-negative symbol.

    The fold is bounded by the room to the nearer sample-range edge, so the
    alphabet never exceeds the number of representable values.
    """
    down, up = _rooms(pred, q, smax)
    theta = min(down, up)
    mag = qd if qd >= 0 else -qd
    if mag > theta:
        return mag + theta
    if stilde & 1:
        same = qd <= 0
    else:
        same = qd >= 0
    return 2 * mag if same else 2 * mag - 1


@njit(cache=True)
def unmap_residual(delta, pred, stilde, q, smax):
    down, up = _rooms(pred, q, smax)
    theta = min(down, up)
    if delta > 2 * theta:
        mag = delta - theta
        return mag if up > down else -mag
    odd = stilde & 1
    if delta & 1:
        mag = (delta + 1) >> 1
        return mag if odd else -mag
    mag = delta >> 1
    return -mag if odd else mag


@njit(cache=True)
def _trace_lossless(data, w, prm):
    lines, bands, ncols = data.shape
    rec = np.zeros((lines + 1, bands, ncols), dtype=np.int64)
    rec[1:] = data
    cent = np.zeros((bands, ncols), dtype=np.int64)
    dhat_out = np.zeros(data.shape, dtype=np.int64)
    stilde_out = np.zeros(data.shape, dtype=np.int64)
    u = np.zeros(3 + prm[P_BANDS], dtype=np.int64)
    for y in range(lines):
        r = y + 1
        for z in range(bands):
            for x in range(ncols):
                sig, dhat, stilde, n_u = predict(rec, cent, w, r, z, y, x, prm, u)
                s = rec[r, z, x]
                cent[z, x] = 4 * s - sig if (y > 0 or x > 0) else 0
                dhat_out[y, z, x] = dhat
                stilde_out[y, z, x] = stilde
                if y > 0 or x > 0:
                    update_weights(w, z, u, n_u, 2 * s - stilde, y * ncols + x, prm)
    return dhat_out, stilde_out


class _Snapshot:
    __slots__ = ("owner", "weights")

    def __init__(self, owner, weights):
        self.owner = owner
        self.weights = weights


class PredictorState:
    """Per-band weight vectors plus the fixed predictor parameters."""

    def __init__(self, bands, columns, bit_depth, pred_bands=3, omega=DEFAULT_OMEGA,
                 vmin=DEFAULT_VMIN, vmax=DEFAULT_VMAX, tinc_log2=DEFAULT_TINC_LOG2):
        self.bands = bands
        self.params = make_params(columns, bit_depth, pred_bands, omega, vmin, vmax, tinc_log2)
        self.weights = initial_weights(bands, pred_bands, omega)
        self._stack: list[_Snapshot] = []

    @property
    def pred_bands(self) -> int:
        return int(self.params[P_BANDS])

    @property
    def weight_limits(self) -> tuple[int, int]:
        omega = int(self.params[P_OMEGA])
        return -(1 << (omega + 2)), (1 << (omega + 2)) - 1

    def snapshot(self) -> _Snapshot:
        token = _Snapshot(self, self.weights.copy())
        self._stack.append(token)
        return token

    def restore(self, token: _Snapshot) -> None:
        """Return to ``token``'s state; later snapshots are discarded."""
        if not isinstance(token, _Snapshot) or token.owner is not self:
            raise ValueError("snapshot token belongs to a different predictor")
        for i in range(len(self._stack) - 1, -1, -1):
            if self._stack[i] is token:
                del self._stack[i:]
                break
        else:
            raise ValueError("snapshot token was already restored or discarded")
        self.weights[...] = token.weights

    def trace_lossless(self, data):
        """Run the predictor losslessly over a ``(lines, bands, columns)`` array.

        Returns per-sample ``dhat`` and ``stilde``; the weights advance as they
        would during a lossless encode.
        """
        data = np.asarray(data, dtype=np.int64)
        return _trace_lossless(data, self.weights, self.params)
