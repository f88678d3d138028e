"""Step allocation for a single slice, compared with exhaustive search.

Three blocks with different Laplace parameters share a rate budget. The
simplex projection gives a starting chain and Selective Diet refines it.
"""

import itertools

import numpy as np

from rcpc.allocator import initial_steps, project_l1, selective_diet
from rcpc.rdmodel import distortion, odd_steps, rate

lam = np.array([1.0, 0.5, 0.1])
qs = odd_steps(21)
lossless = rate(lam, 1)
target = 0.5 * (lossless.sum() + rate(lam, 21).sum())
print(f"lambdas {lam}, lossless rates {np.round(lossless, 3)}, budget {target:.3f} bits")

projected = project_l1(lossless, target)
q0 = initial_steps(projected, lam, clip=21)
print(f"projected rates {np.round(projected, 3)} -> initial steps {q0}, "
      f"rate {rate(lam, q0).sum():.3f}, distortion {distortion(lam, q0).sum():.3f}")

sd = selective_diet(q0, lam, target, clip=21)
print(f"Selective Diet steps {sd.steps}, rate {sd.predicted_rate:.3f}, distortion {sd.predicted_distortion:.3f}")

best = min(
    (distortion(lam, np.array(t)).sum(), tuple(int(v) for v in t))
    for t in itertools.product(qs, repeat=3)
    if rate(lam, np.array(t)).sum() <= target
)
print(f"exhaustive optimum steps {best[1]}, distortion {best[0]:.3f}")
