"""Predictive multiband image codec with slice-based rate control."""

from .allocator import BlockClass, SliceAllocation, allocate_slice, project_l1, selective_diet
from .codec import EncodeReport, decode, encode, encode_with_stats, quality_of
from .core import (
    CodecConfig,
    ConfigError,
    ImageCube,
    MemoryPolicy,
    Mode,
    QualityReport,
    build_grid,
    generate_synthetic_cube,
    load_raw,
    quality,
    save_raw,
)
from .entropy import CorruptStreamError
from .feedback import RateController, simulate_controller
from .rdmodel import RdModel, build_tables, distortion, inverse_rate, rate

__version__ = "0.1.0"

__all__ = [
    "BlockClass", "CodecConfig", "ConfigError", "CorruptStreamError", "EncodeReport",
    "ImageCube", "MemoryPolicy", "Mode", "QualityReport", "RateController", "RdModel",
    "SliceAllocation", "allocate_slice", "build_grid", "build_tables", "decode",
    "distortion", "encode", "encode_with_stats", "generate_synthetic_cube",
    "inverse_rate", "load_raw", "project_l1", "quality", "quality_of", "rate",
    "save_raw", "selective_diet", "simulate_controller",
]
