import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rcpc import CodecConfig, ConfigError, ImageCube, MemoryPolicy, build_grid, encode, generate_synthetic_cube, quality
from rcpc.core import LONG_MEMORY, MEMORY1, load_raw, read_header, save_raw


def test_grid_exact_division():
    g = build_grid((1, 32, 32), 16, 16)
    assert (g.blocks_x, g.blocks_y) == (2, 2)


def test_grid_partial_edges():
    g = build_grid((2, 40, 40), 16, 16)
    assert (g.blocks_x, g.blocks_y) == (3, 3)
    assert g.block_widths.tolist() == [16, 16, 8]
    assert g.block_heights.tolist() == [16, 16, 8]
    assert g.blocks_per_slice == 6
    assert g.pixel_counts(2).tolist() == [[128, 128, 64]] * 2


def test_grid_single_block():
    g = build_grid((1, 16, 16), 16, 16)
    assert g.blocks_per_slice == 1 and g.n_slices == 1


@pytest.mark.parametrize("dims", [(0, 4, 4), (1, 0, 4), (1, 4, 0)])
def test_grid_rejects_empty(dims):
    with pytest.raises(ConfigError):
        build_grid(dims, 16, 16)


@given(st.integers(1, 5), st.integers(1, 70), st.integers(1, 70), st.integers(1, 20), st.integers(1, 20))
def test_grid_covers_every_pixel_once(bands, lines, cols, bw, bh):
    g = build_grid((bands, lines, cols), bw, bh)
    assert g.block_widths.sum() == cols
    assert g.block_heights.sum() == lines
    total = sum(g.pixel_counts(k).sum() for k in range(g.n_slices))
    assert total == bands * lines * cols


def test_quality_identical_is_lossless():
    a = np.arange(24, dtype=np.uint16).reshape(2, 3, 4)
    q = quality(a, a, 48)
    assert q.mad == 0 and q.snr_db is None and q.lossless
    assert q.rate_bpp == 2.0


def test_quality_zero_signal():
    q = quality(np.zeros((1, 1, 2)), np.array([[[0, 1]]]), 1)
    assert q.snr_db == -math.inf


def test_quality_hand_example():
    q = quality(np.array([3, 4]), np.array([3, 2]), 0)
    assert q.mad == 2
    assert q.snr_db == pytest.approx(10 * math.log10(25 / 4), rel=1e-12)


def test_quality_dim_mismatch():
    with pytest.raises(ConfigError):
        quality(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), 0)


@given(st.lists(st.integers(0, 4095), min_size=1, max_size=30), st.randoms())
def test_mad_symmetric(values, r):
    a = np.array(values)
    b = np.array([r.randrange(4096) for _ in values])
    assert quality(a, b, 0).mad == quality(b, a, 0).mad


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.data())
def test_bil_index_bijection(bands, lines, cols, data):
    cube = ImageCube(np.zeros((lines, bands, cols), dtype=np.uint16), 8)
    z = data.draw(st.integers(0, bands - 1))
    y = data.draw(st.integers(0, lines - 1))
    x = data.draw(st.integers(0, cols - 1))
    idx = cube.index(z, y, x)
    assert cube.position(idx) == (z, y, x)
    assert cube.samples[idx] == cube.data[y, z, x]


def test_cube_rejects_out_of_range():
    with pytest.raises(ConfigError):
        ImageCube(np.full((1, 1, 1), 256), 8)
    with pytest.raises(ConfigError):
        ImageCube(np.zeros((2, 2)), 8)


def test_synthetic_constant_when_no_noise():
    c = generate_synthetic_cube(5, (3, 10, 12), spectral_corr=0, spatial_corr=0, noise_sigma=0)
    assert np.unique(c.data).size == 1


def test_synthetic_deterministic():
    a = generate_synthetic_cube(9, (3, 20, 20))
    b = generate_synthetic_cube(9, (3, 20, 20))
    assert a.data.tobytes() == b.data.tobytes()
    assert generate_synthetic_cube(10, (3, 20, 20)).data.tobytes() != a.data.tobytes()


def test_synthetic_rejects_bad_correlation():
    with pytest.raises(ConfigError):
        generate_synthetic_cube(0, (1, 4, 4), spectral_corr=1.0)


def test_correlated_cube_compresses_better():
    smooth = generate_synthetic_cube(2, (4, 48, 48), spectral_corr=0.95, spatial_corr=0.95, noise_sigma=60)
    white = generate_synthetic_cube(2, (4, 48, 48), spectral_corr=0.0, spatial_corr=0.0, noise_sigma=60)
    r_smooth = encode(smooth, CodecConfig.lossless())[1].quality.rate_bpp
    r_white = encode(white, CodecConfig.lossless())[1].quality.rate_bpp
    assert r_smooth < r_white


@pytest.mark.parametrize(
    "kw",
    [dict(clip=4), dict(clip=0), dict(est_lines=0), dict(est_lines=17), dict(q=2), dict(tau=0)],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        CodecConfig(**kw)


def test_rate_modes_need_target():
    with pytest.raises(ConfigError):
        CodecConfig(mode=3)
    with pytest.raises(ConfigError):
        CodecConfig.rate_b(0.0)


def test_memory_policy_parse():
    assert MemoryPolicy.parse("memory1") == MEMORY1
    assert MemoryPolicy.parse("long") == LONG_MEMORY
    assert MemoryPolicy.parse("window4").window == 4
    with pytest.raises(ConfigError):
        MemoryPolicy.parse("forever")


@pytest.mark.parametrize("interleave", ["bil", "bsq"])
def test_raw_round_trip(tmp_path, interleave):
    cube = generate_synthetic_cube(1, (3, 5, 7))
    save_raw(cube, tmp_path / "c.raw", tmp_path / "c.hdr", interleave=interleave)
    assert read_header(tmp_path / "c.hdr")["interleave"] == interleave
    back = load_raw(tmp_path / "c.raw", tmp_path / "c.hdr")
    assert np.array_equal(back.data, cube.data)


def test_bsq_file_is_band_sequential(tmp_path):
    cube = generate_synthetic_cube(1, (3, 5, 7))
    save_raw(cube, tmp_path / "c.raw", tmp_path / "c.hdr", interleave="bsq")
    raw = np.fromfile(tmp_path / "c.raw", dtype="<u2").reshape(3, 5, 7)
    assert np.array_equal(raw[1], cube.band(1))


def test_raw_size_mismatch(tmp_path):
    (tmp_path / "c.raw").write_bytes(b"\0" * 10)
    (tmp_path / "c.hdr").write_text("bands=1\nlines=2\ncolumns=3\n")
    with pytest.raises(ConfigError):
        load_raw(tmp_path / "c.raw", tmp_path / "c.hdr")
