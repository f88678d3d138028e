"""Shared domain types: image cubes, block grids, codec configuration and
quality metrics.

Cubes are stored band-interleaved-by-line (BIL): a ``(lines, bands, columns)``
array, so that iterating the flattened buffer visits every band of a line
before moving to the next line.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter


class ConfigError(ValueError):
    """Invalid codec configuration or geometry."""


@dataclass(frozen=True)
class ImageCube:
    """3-D unsigned integer image in BIL layout ``data[line, band, column]``."""

    data: np.ndarray
    bit_depth: int = 16

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ConfigError(f"cube must be 3-D (lines, bands, columns), got shape {data.shape}")
        if not 1 <= self.bit_depth <= 16:
            raise ConfigError(f"bit depth must be in 1..16, got {self.bit_depth}")
        if min(data.shape) < 1:
            raise ConfigError(f"cube has an empty dimension: {data.shape}")
        if data.size and (data.min() < 0 or data.max() >= (1 << self.bit_depth)):
            raise ConfigError(f"samples exceed the {self.bit_depth}-bit range")
        data = np.ascontiguousarray(data, dtype=np.uint16)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_bsq(cls, bsq: np.ndarray, bit_depth: int = 16) -> "ImageCube":
        """Build a cube from a band-sequential ``(bands, lines, columns)`` array."""
        return cls(np.transpose(np.asarray(bsq), (1, 0, 2)), bit_depth)

    @property
    def lines(self) -> int:
        return self.data.shape[0]

    @property
    def bands(self) -> int:
        return self.data.shape[1]

    @property
    def columns(self) -> int:
        return self.data.shape[2]

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        return self.bands, self.lines, self.columns

    @property
    def samples(self) -> np.ndarray:
        """Flat BIL sample buffer."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def index(self, z, y, x):
        """Flat BIL offset of sample ``(z, y, x)``."""
        return (y * self.bands + z) * self.columns + x

    def position(self, index):
        """Inverse of :meth:`index`: returns ``(z, y, x)``."""
        yz, x = divmod(index, self.columns)
        y, z = divmod(yz, self.bands)
        return z, y, x

    def band(self, z: int) -> np.ndarray:
        return self.data[:, z, :]

    def to_bsq(self) -> np.ndarray:
        return np.ascontiguousarray(np.transpose(self.data, (1, 0, 2)))


@dataclass(frozen=True)
class BlockGrid:
    """Partition of each band into ``block_w x block_h`` tiles.

    Edge blocks may be partial; ``block_widths``/``block_heights`` hold the
    true extents.
    """

    lines: int
    columns: int
    bands: int
    block_w: int
    block_h: int

    @property
    def blocks_x(self) -> int:
        return -(-self.columns // self.block_w)

    @property
    def blocks_y(self) -> int:
        return -(-self.lines // self.block_h)

    @property
    def n_slices(self) -> int:
        return self.blocks_y

    @property
    def blocks_per_slice(self) -> int:
        return self.blocks_x * self.bands

    @property
    def block_widths(self) -> np.ndarray:
        w = np.full(self.blocks_x, self.block_w, dtype=np.int64)
        w[-1] = self.columns - self.block_w * (self.blocks_x - 1)
        return w

    @property
    def block_heights(self) -> np.ndarray:
        h = np.full(self.blocks_y, self.block_h, dtype=np.int64)
        h[-1] = self.lines - self.block_h * (self.blocks_y - 1)
        return h

    def slice_lines(self, k: int) -> tuple[int, int]:
        """First line and line count of slice ``k``."""
        y0 = k * self.block_h
        return y0, min(self.block_h, self.lines - y0)

    def pixel_counts(self, k: int) -> np.ndarray:
        """Pixels per block of slice ``k``, shape ``(bands, blocks_x)``."""
        _, h = self.slice_lines(k)
        return np.broadcast_to(self.block_widths * h, (self.bands, self.blocks_x)).copy()

    def block_of(self, y: int, x: int) -> tuple[int, int]:
        return y // self.block_h, x // self.block_w


def build_grid(cube_dims, block_w: int, block_h: int) -> BlockGrid:
    """Block grid for a cube of ``(bands, lines, columns)``."""
    bands, lines, columns = (int(d) for d in cube_dims)
    if min(bands, lines, columns) <= 0:
        raise ConfigError(f"cube dimensions must be positive, got {cube_dims}")
    if block_w <= 0 or block_h <= 0:
        raise ConfigError(f"block size must be positive, got {block_w}x{block_h}")
    return BlockGrid(lines, columns, bands, int(block_w), int(block_h))


class Mode(enum.IntEnum):
    LOSSLESS = 0
    NEAR_LOSSLESS = 1
    RATE_A = 2
    RATE_B = 3


@dataclass(frozen=True)
class MemoryPolicy:
    """Which past output/input ratios enter the averaged ratio.

    ``window=1`` averages only the last slice, ``window=None`` the whole
    history.
    """

    window: int | None = 1

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ConfigError("memory window must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "MemoryPolicy":
        text = text.strip().lower()
        if text in ("memory1", "m1", "1"):
            return MEMORY1
        if text in ("long", "longmemory", "all"):
            return LONG_MEMORY
        if text.startswith("window"):
            return cls(int(text[len("window"):].strip("(:= )")))
        raise ConfigError(f"unknown memory policy {text!r}")


MEMORY1 = MemoryPolicy(1)
LONG_MEMORY = MemoryPolicy(None)


@dataclass(frozen=True)
class CodecConfig:
    mode: Mode = Mode.LOSSLESS
    q: int = 1
    target: float | None = None
    block_w: int = 16
    block_h: int = 16
    pred_bands: int = 3
    est_lines: int = 2
    tau: float = 5.0
    clip: int | None = None
    lambda_init: float = 50.0
    memory_policy: MemoryPolicy = MEMORY1
    max_outer_iters: int = 10
    max_lambda_halvings: int = 8
    q_max: int = 255
    use_tables: bool = False
    skip_blocks: bool = True

    def __post_init__(self):
        mode = Mode(self.mode)
        object.__setattr__(self, "mode", mode)
        if not (1 <= self.block_w <= 255 and 1 <= self.block_h <= 255):
            raise ConfigError("block dimensions must be in 1..255")
        if not 0 <= self.pred_bands <= 15:
            raise ConfigError("prediction bands must be in 0..15")
        if not 1 <= self.est_lines <= self.block_h:
            raise ConfigError("est_lines must satisfy 1 <= est_lines <= block_h")
        if self.q < 1 or self.q % 2 == 0:
            raise ConfigError(f"quantization step must be odd and >= 1, got {self.q}")
        if self.q_max < 1 or self.q_max % 2 == 0 or self.q_max > 65535:
            raise ConfigError("q_max must be odd")
        if self.clip is not None and (self.clip < 1 or self.clip % 2 == 0):
            raise ConfigError(f"clip must be odd and >= 1, got {self.clip}")
        if mode in (Mode.RATE_A, Mode.RATE_B):
            if self.target is None or not self.target > 0:
                raise ConfigError("rate-controlled modes need a positive target")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")

    @classmethod
    def lossless(cls, **kw) -> "CodecConfig":
        return cls(mode=Mode.LOSSLESS, **kw)

    @classmethod
    def near_lossless(cls, q: int, **kw) -> "CodecConfig":
        return cls(mode=Mode.NEAR_LOSSLESS, q=q, **kw)

    @classmethod
    def rate_a(cls, target: float, **kw) -> "CodecConfig":
        return cls(mode=Mode.RATE_A, target=target, **kw)

    @classmethod
    def rate_b(cls, target: float, **kw) -> "CodecConfig":
        return cls(mode=Mode.RATE_B, target=target, **kw)

    @property
    def rate_controlled(self) -> bool:
        return self.mode in (Mode.RATE_A, Mode.RATE_B)

    @property
    def step_limit(self) -> int:
        return min(self.clip, self.q_max) if self.clip is not None else self.q_max


@dataclass(frozen=True)
class QualityReport:
    rate_bpp: float
    snr_db: float | None
    mad: int
    per_band_mad: list = field(default_factory=list)

    @property
    def lossless(self) -> bool:
        return self.mad == 0


def snr_db(signal_energy: float, error_energy: float) -> float | None:
    """SNR in dB; ``None`` marks a perfect reconstruction."""
    if error_energy == 0:
        return None
    if signal_energy == 0:
        return -math.inf
    return 10.0 * math.log10(signal_energy / error_energy)


def quality(original, decoded, compressed_bits: int) -> QualityReport:
    a = original.data if isinstance(original, ImageCube) else np.asarray(original)
    b = decoded.data if isinstance(decoded, ImageCube) else np.asarray(decoded)
    if a.shape != b.shape:
        raise ConfigError(f"dimension mismatch: {a.shape} vs {b.shape}")
    a = a.astype(np.int64)
    err = a - b.astype(np.int64)
    if a.ndim == 3:
        per_band = np.abs(err).max(axis=(0, 2)).tolist()
    else:
        per_band = [int(np.abs(err).max())] if err.size else [0]
    return QualityReport(
        rate_bpp=compressed_bits / a.size,
        snr_db=snr_db(float(np.sum(a * a, dtype=np.float64)), float(np.sum(err * err, dtype=np.float64))),
        mad=int(np.abs(err).max()) if err.size else 0,
        per_band_mad=[int(v) for v in per_band],
    )


def generate_synthetic_cube(
    seed: int,
    dims,
    spectral_corr: float = 0.9,
    spatial_corr: float = 0.9,
    noise_sigma: float = 50.0,
    bit_depth: int = 12,
    mean: float | None = None,
) -> ImageCube:
    """Gauss-Markov test cube.

    White Gaussian noise is passed through first-order recursive filters
    along columns, lines and bands; each filter is normalised so the marginal
    standard deviation stays at ``noise_sigma``. The result is offset to
    mid-range and clamped to the bit depth.
    """
    bands, lines, columns = (int(d) for d in dims)
    for name, rho in (("spectral_corr", spectral_corr), ("spatial_corr", spatial_corr)):
        if not 0.0 <= rho < 1.0:
            raise ConfigError(f"{name} must be in [0, 1), got {rho}")
    rng = np.random.default_rng(seed)
    field_ = rng.standard_normal((lines, bands, columns)) * noise_sigma
    for axis, rho in ((2, spatial_corr), (0, spatial_corr), (1, spectral_corr)):
        if rho > 0:
            field_ = lfilter([math.sqrt(1.0 - rho * rho)], [1.0, -rho], field_, axis=axis)
    top = (1 << bit_depth) - 1
    level = (1 << (bit_depth - 1)) if mean is None else mean
    data = np.clip(np.rint(field_ + level), 0, top).astype(np.uint16)
    return ImageCube(data, bit_depth)


# Raw raster I/O: headerless little-endian u16 samples plus a key=value sidecar.

def write_header(path, bands: int, lines: int, columns: int, bit_depth: int, interleave: str = "bil"):
    text = (
        f"bands = {bands}\nlines = {lines}\ncolumns = {columns}\n"
        f"bit_depth = {bit_depth}\ninterleave = {interleave.upper()}\n"
    )
    Path(path).write_text(text)


def read_header(path) -> dict:
    info = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed header line: {raw!r}")
        key, value = (s.strip().lower() for s in line.split("=", 1))
        info[key] = value
    try:
        hdr = {
            "bands": int(info["bands"]),
            "lines": int(info["lines"]),
            "columns": int(info.get("columns", info.get("samples", ""))),
            "bit_depth": int(info.get("bit_depth", 16)),
            "interleave": info.get("interleave", "bil").lower(),
        }
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"incomplete raster header {path}: {exc}") from None
    if hdr["interleave"] not in ("bil", "bsq"):
        raise ConfigError(f"unsupported interleave {hdr['interleave']!r}")
    return hdr


def load_raw(path, header_path) -> ImageCube:
    hdr = read_header(header_path)
    n = hdr["bands"] * hdr["lines"] * hdr["columns"]
    raw = np.fromfile(path, dtype="<u2")
    if raw.size != n:
        raise ConfigError(f"{path}: expected {n} samples, found {raw.size}")
    if hdr["interleave"] == "bsq":
        return ImageCube.from_bsq(raw.reshape(hdr["bands"], hdr["lines"], hdr["columns"]), hdr["bit_depth"])
    return ImageCube(raw.reshape(hdr["lines"], hdr["bands"], hdr["columns"]), hdr["bit_depth"])


def save_raw(cube: ImageCube, path, header_path=None, interleave: str = "bil"):
    arr = cube.to_bsq() if interleave.lower() == "bsq" else cube.data
    np.ascontiguousarray(arr).astype("<u2").tofile(path)
    if header_path is not None:
        write_header(header_path, cube.bands, cube.lines, cube.columns, cube.bit_depth, interleave)
