"""Behaviour of the feedback controller on a synthetic plant y = w * T_new.

A constant gain shows the exact memory-1 transient; a noisy gain shows why
averaging the whole history suits stationary sources.
"""

import numpy as np

from rcpc.core import LONG_MEMORY, MEMORY1
from rcpc.feedback import memory1_closed_form, simulate_controller

T, tau = 2.0, 5.0
tr = simulate_controller(np.full(40, 0.8), T, tau, MEMORY1)
closed = memory1_closed_form(0.8, T, tau, np.arange(40))
print("constant gain 0.8, memory-1")
for n in (0, 1, 2, 5, 10, 20, 39):
    print(f"  n={n:2d}  y={tr.y[n]:.6f}  closed form={closed[n]:.6f}  budget={tr.c[n]:+.6f}")

w = np.random.default_rng(0).uniform(0.6, 1.2, 1001)
print("\nnoisy gain with mean 0.9, average output over slices 500..1000")
for name, policy in (("memory-1", MEMORY1), ("long memory", LONG_MEMORY)):
    tr = simulate_controller(w, T, tau, policy)
    print(f"  {name:12s} mean y = {tr.y[500:].mean():.4f}  final budget = {tr.c[-1]:+.3f}")
