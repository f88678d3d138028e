"""Slice-to-slice target correction for rate control.

The controller treats the encoder as a plant ``y[n] = w[n] * T_new[n]``: the
slice asked for ``T_new[n]`` bits per pixel and delivered ``y[n]``. It keeps a
residual budget ``c`` (bits owed or saved so far) and a tracking estimate
``eta``:

    c[n+1]     = c[n] + T - y[n]
    eta[n+1]   = eta[n] + wbar[n] * (T - y[n] + c[n] / tau)
    T_new[n+1] = eta[n+1] + c[n+1] / (tau * wbar[n])

where ``wbar`` is an average of past output/input ratios chosen by the
memory policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import MemoryPolicy

MIN_TARGET = 0.05


def eta_update(eta, T, y, c, tau, wbar):
    """One tracking step; ``c`` is the budget *before* this slice is booked."""
    return eta + wbar * (T - y + _over(c, tau))


def _over(c, tau):
    return 0.0 if math.isinf(tau) else c / tau


def cost_J(T, y, c, tau):
    """Tracking error plus residual-budget penalty for one slice."""
    return (T - y) ** 2 + (T - y + 2.0 * _over(c, tau)) ** 2


@dataclass
class RateController:
    """Feedback state for one encode session.

    ``policy.window`` selects how many past ratios feed ``wbar``: 1 for the
    memory-1 method, ``None`` for the long-memory running mean, ``k`` for a
    sliding window. With ``adaptive=False`` the controller always returns ``T``.
    Giving ``n_slices`` shortens the budget time constant on the last slices.
    """

    T: float
    tau: float = 5.0
    policy: MemoryPolicy = field(default_factory=lambda: MemoryPolicy(1))
    adaptive: bool = True
    min_target: float = MIN_TARGET
    c: float = 0.0
    eta: float = field(init=False)
    target: float = field(init=False)
    n: int = 0
    wbar: float = 1.0
    n_slices: int | None = None
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("global target must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        self.eta = float(self.T)
        self.target = float(self.T)
        self._window: list[float] = []
        self._sum = 0.0
        self._count = 0

    def _record(self, ratio):
        window = self.policy.window
        if window is None:
            self._sum += ratio
            self._count += 1
            return self._sum / self._count
        self._window.append(ratio)
        if len(self._window) > window:
            del self._window[0]
        return sum(self._window) / len(self._window)

    def _tau_ahead(self):
        # near the end of a finite image there are fewer than tau slices left
        # to spread the residual budget over
        if self.n_slices is None:
            return self.tau
        return min(self.tau, max(self.n_slices - self.n - 1, 1))

    def next_target(self, y: float) -> float:
        """Book the measured rate of the slice just coded; return the next slice target."""
        if y < 0 or not math.isfinite(y):
            raise ValueError("measured slice rate must be finite and non-negative")
        return self._advance(y)

    def _advance(self, y: float) -> float:
        if not self.adaptive:
            self.n += 1
            return self.T
        if self.target != 0:
            wbar = self._record(y / self.target)
        else:
            wbar = self.wbar
            self.flags.append((self.n, "zero target; previous ratio average reused"))
        if not wbar > 0:
            # a slice that produced no bits says nothing about the gain
            self.flags.append((self.n, "non-positive ratio average; previous value reused"))
            wbar = self.wbar
        c_prev = self.c
        self.c = c_prev + self.T - y
        self.eta = eta_update(self.eta, self.T, y, c_prev, self.tau, wbar)
        self.wbar = wbar
        raw = self.eta + _over(self.c, self._tau_ahead()) / wbar
        self.target = max(raw, self.min_target)
        self.n += 1
        return self.target


@dataclass
class Trajectory:
    y: np.ndarray
    c: np.ndarray
    target: np.ndarray


def simulate_controller(w_sequence, T, tau=5.0, policy=None, n_slices=None) -> Trajectory:
    """Drive a controller with the synthetic plant ``y[n] = w[n] * T_new[n]``.

    ``c[n]`` is the budget before slice ``n`` is booked; the returned arrays
    all have ``n_slices`` entries. No target floor is applied, so the
    recursion is the exact linear one.
    """
    w = np.asarray(w_sequence, dtype=np.float64)
    n_slices = w.size if n_slices is None else int(n_slices)
    if w.size < n_slices:
        raise ValueError("w_sequence shorter than n_slices")
    ctl = RateController(T, tau, policy or MemoryPolicy(1), min_target=-math.inf)
    y = np.empty(n_slices)
    c = np.empty(n_slices)
    tgt = np.empty(n_slices)
    for n in range(n_slices):
        tgt[n] = ctl.target
        c[n] = ctl.c
        y[n] = w[n] * ctl.target
        ctl._advance(y[n])  # the linear recursion may swing negative
    return Trajectory(y, c, tgt)


def memory1_closed_form(w, T, tau, n):
    """Output rate of the memory-1 controller under a constant plant gain ``w``."""
    n = np.asarray(n, dtype=np.float64)
    k = T * (1.0 - w) / (tau * w * w - 1.0)
    return k * (1.0 - 1.0 / tau) ** n + (T * w - T - k) * (1.0 - w * w) ** n + T
