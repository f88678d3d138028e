"""Rate control under a hard error limit.

With ``clip`` set, no block may use a step above it, so the decoded error
never exceeds (clip-1)/2. A target below what the clip allows cannot be met;
the encoder then finishes anyway and reports the miss.
"""

from rcpc import CodecConfig, encode, generate_synthetic_cube

cube = generate_synthetic_cube(seed=12, dims=(16, 128, 128), spectral_corr=0.95, spatial_corr=0.8, noise_sigma=80)

for clip in (5, 11, 21):
    floor = encode(cube, CodecConfig.near_lossless(clip))[1].rate_bpp
    print(f"clip {clip}: lowest reachable rate about {floor:.2f} bpp, MAD bound {(clip - 1) // 2}")
    for target in (1.0, 2.0, 3.0):
        _, rep = encode(cube, CodecConfig.rate_b(target, clip=clip))
        status = "target missed" if rep.target_missed else "on target"
        print(f"   T={target:.0f}: {rep.rate_bpp:.3f} bpp, MAD {rep.quality.mad}, {status}")
