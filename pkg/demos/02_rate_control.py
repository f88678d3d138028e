"""Open-loop (Mode A) against feedback (Mode B) rate control.

Mode A hands every slice the global target and trusts the Laplacian model.
Mode B measures what each slice actually cost and corrects the next target,
so model mismatch is paid back over the following slices.
"""

import numpy as np

from rcpc import CodecConfig, encode, generate_synthetic_cube
from rcpc.core import LONG_MEMORY, MEMORY1

cube = generate_synthetic_cube(seed=12, dims=(16, 256, 128), spectral_corr=0.95, spatial_corr=0.8, noise_sigma=80)
target = 1.5

runs = {
    "Mode A": CodecConfig.rate_a(target),
    "Mode B, memory-1": CodecConfig.rate_b(target, memory_policy=MEMORY1),
    "Mode B, long memory": CodecConfig.rate_b(target, memory_policy=LONG_MEMORY),
}
for name, cfg in runs.items():
    _, rep = encode(cube, cfg)
    err = 100 * (rep.rate_bpp / target - 1)
    print(f"{name:20s} {rep.rate_bpp:.4f} bpp ({err:+.2f}%), SNR {rep.quality.snr_db:.2f} dB")
    print("   slice targets:", np.round(rep.slice_targets, 2))
    print("   slice rates:  ", np.round(rep.slice_rates, 2))
