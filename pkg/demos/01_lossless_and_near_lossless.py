"""Lossless and near-lossless coding of a synthetic cube.

Run with ``python3 demos/01_lossless_and_near_lossless.py``.
"""

import numpy as np

from rcpc import CodecConfig, decode, encode, generate_synthetic_cube

cube = generate_synthetic_cube(seed=1, dims=(16, 128, 128), spectral_corr=0.95, spatial_corr=0.9, noise_sigma=60)
print(f"cube: {cube.bands} bands x {cube.lines} lines x {cube.columns} columns, {cube.bit_depth}-bit")

stream, report = encode(cube, CodecConfig.lossless())
assert np.array_equal(decode(stream).data, cube.data)
print(f"lossless: {report.quality.rate_bpp:.3f} bpp, decoded bit-exact")

# A single odd step Q bounds every reconstruction error by (Q-1)/2.
print("\n  Q    bpp    SNR dB   MAD  bound")
for q in (3, 5, 9, 15, 21):
    stream, report = encode(cube, CodecConfig.near_lossless(q))
    out = decode(stream)
    mad = int(np.abs(out.data.astype(int) - cube.data.astype(int)).max())
    print(f"{q:3d}  {report.quality.rate_bpp:5.3f}  {report.quality.snr_db:7.2f}  {mad:4d}  {(q - 1) // 2:5d}")
