"""Slice-based encoder/decoder and the ``RCPC`` container.

The cube is coded in BIL order one slice (a row of blocks across all bands)
at a time. In the rate-controlled modes every slice goes through:

1. snapshot of the predictor weights;
2. a lossless prediction pass over the first ``est_lines`` lines of the slice
   that collects per-block residual statistics;
3. step allocation for the slice's blocks;
4. restore of the weights;
5. the real pass, quantizing in the loop;
6. (mode B) feedback of the measured slice rate into the next target.

Container layout (little-endian)::

    "RCPC" | version u8 | bands u16 | lines u32 | columns u32 | bit_depth u8
    | mode u8 | q u16 | block_w u8 | block_h u8 | pred_bands u8 | est_lines u8
    | tau u16 (x100, 0 = infinite) | clip u16 (0 = none)
    | target f32 | flags u8 | 3 zero bytes
    then per slice:
    length u32 | skip flags (optional, byte padded) | step deltas (rate modes,
    byte padded) | range-coded residuals

Flag bit 0 says every slice carries one skip bit per block.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .allocator import SliceAllocation, allocate_slice
from .core import (
    CodecConfig,
    ConfigError,
    ImageCube,
    MemoryPolicy,
    Mode,
    QualityReport,
    build_grid,
    quality,
)
from .entropy import (
    ALPHABET,
    CONTEXTS_PER_BAND,
    BitReader,
    BitWriter,
    CorruptStreamError,
    dec_init,
    decode_mapped,
    decode_step_deltas,
    enc_flush,
    enc_init,
    encode_mapped,
    encode_step_deltas,
    model_init,
    output_capacity,
    select_context,
)
from .feedback import RateController
from .predictor import PredictorState, map_residual, predict, unmap_residual, update_weights
from .quantizer import quantize_scalar
from .rdmodel import RdModel, default_tables

MAGIC = b"RCPC"
VERSION = 1
_HEADER = struct.Struct("<4sBHIIBBHBBBBHHfB3x")
HEADER_SIZE = _HEADER.size
FLAG_SKIP = 0x01
FIRST_SLICE_REFITS = 2

_ESTIMATE, _ENCODE, _DECODE = 0, 1, 2


@njit(cache=True)
def _slice_pass(kind, data, rec, w, prm, steps, skip, bw, y0, n_lines,
                freq, tot, prev, st, buf, stats, stat_from):
    """Run the predictor over ``n_lines`` lines starting at global line ``y0``.

    ``rec[0]`` holds the reconstructed line above the slice; line ``j`` of the
    slice lives in ``rec[j + 1]``. ``data`` is read for estimate/encode and
    written with the reconstruction on decode.
    """
    n_rows, bands, ncols = rec.shape
    depth = prm[2]
    smax = (np.int64(1) << depth) - 1
    cent = np.zeros((bands, ncols), dtype=np.int64)
    u = np.zeros(3 + prm[0], dtype=np.int64)
    for j in range(n_lines):
        y = y0 + j
        r = j + 1
        for z in range(bands):
            for x in range(ncols):
                sig, dhat, stilde, n_u = predict(rec, cent, w, r, z, y, x, prm, u)
                pred = stilde >> 1
                bx = x // bw
                if kind == _ESTIMATE:
                    s = data[j, z, x]
                    if j >= stat_from:
                        d = s - pred
                        stats[0, z, bx] += d
                        stats[1, z, bx] += d * d
                        stats[2, z, bx] += 1
                    val = s
                else:
                    q = steps[z, bx]
                    m = z * 4 + select_context(prev[z])
                    if skip[z, bx]:
                        qd = np.int64(0)
                        prev[z] = 0
                    elif kind == _ENCODE:
                        qd = quantize_scalar(data[j, z, x] - pred, q)
                        delta = map_residual(qd, pred, stilde, q, smax)
                        encode_mapped(st, buf, freq, tot, m, delta)
                        prev[z] = delta
                    else:
                        delta = decode_mapped(st, buf, freq, tot, m)
                        qd = unmap_residual(delta, pred, stilde, q, smax)
                        prev[z] = delta
                    val = pred + q * qd
                    if val < 0:
                        val = np.int64(0)
                    elif val > smax:
                        val = smax
                    if kind == _DECODE:
                        data[j, z, x] = val
                rec[r, z, x] = val
                if y > 0 or x > 0:
                    cent[z, x] = 4 * val - sig
                    update_weights(w, z, u, n_u, 2 * val - stilde, y * ncols + x, prm)
                else:
                    cent[z, x] = 0


@dataclass
class SliceRecord:
    index: int
    target: float
    rate: float
    bits: int
    side_bits: int
    allocation: SliceAllocation | None = None


@dataclass
class EncodeReport:
    quality: QualityReport
    bits: int
    slices: list = field(default_factory=list)
    target_missed: bool = False
    notes: list = field(default_factory=list)
    reconstruction: ImageCube | None = None

    @property
    def rate_bpp(self) -> float:
        return self.quality.rate_bpp

    @property
    def slice_targets(self):
        return [s.target for s in self.slices]

    @property
    def slice_rates(self):
        return [s.rate for s in self.slices]


@dataclass(frozen=True)
class ContainerHeader:
    bands: int
    lines: int
    columns: int
    bit_depth: int
    mode: Mode
    q: int
    block_w: int
    block_h: int
    pred_bands: int
    est_lines: int
    tau: float
    clip: int | None
    target: float | None
    flags: int = 0
    version: int = VERSION

    def pack(self) -> bytes:
        tau = 0 if math.isinf(self.tau) else min(int(round(self.tau * 100)), 0xFFFF)
        return _HEADER.pack(
            MAGIC, self.version, self.bands, self.lines, self.columns, self.bit_depth,
            int(self.mode), self.q, self.block_w, self.block_h, self.pred_bands,
            self.est_lines, tau, self.clip or 0, self.target or 0.0, self.flags,
        )

    @classmethod
    def unpack(cls, data: bytes) -> "ContainerHeader":
        if len(data) < HEADER_SIZE:
            raise CorruptStreamError("stream shorter than the container header")
        (magic, version, bands, lines, columns, depth, mode, q, bw, bh, p, est,
         tau, clip, target, flags) = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported container version {version}")
        try:
            mode = Mode(mode)
        except ValueError:
            raise CorruptStreamError(f"unknown mode {mode}") from None
        if min(bands, lines, columns, bw, bh) == 0 or not 1 <= depth <= 16 or q % 2 == 0:
            raise CorruptStreamError("invalid geometry in header")
        return cls(bands, lines, columns, depth, mode, q, bw, bh, p, est,
                   math.inf if tau == 0 else tau / 100.0, clip or None,
                   float(target) if target else None, flags, version)


def _pack_flags(flags: np.ndarray) -> bytes:
    return np.packbits(flags.ravel().astype(np.uint8)).tobytes()


class _Session:
    """Buffers shared by the encoder and decoder for one stream."""

    def __init__(self, bands, lines, columns, bit_depth, block_w, block_h, pred_bands):
        self.grid = build_grid((bands, lines, columns), block_w, block_h)
        self.predictor = PredictorState(bands, columns, bit_depth, pred_bands)
        self.freq = np.empty((bands * CONTEXTS_PER_BAND, ALPHABET), dtype=np.int64)
        self.tot = np.empty(bands * CONTEXTS_PER_BAND, dtype=np.int64)
        model_init(self.freq, self.tot)
        self.prev = np.zeros(bands, dtype=np.int64)
        self.rec = np.zeros((block_h + 1, bands, columns), dtype=np.int64)
        self.no_skip = np.zeros((bands, self.grid.blocks_x), dtype=np.bool_)

    def run(self, kind, data, steps, skip, y0, n_lines, st=None, buf=None, stats=None, stat_from=0):
        if st is None:
            st = np.zeros(6, dtype=np.int64)
        if buf is None:
            buf = np.zeros(1, dtype=np.uint8)
        if stats is None:
            stats = np.zeros((3, 1, 1), dtype=np.float64)
        _slice_pass(kind, data, self.rec, self.predictor.weights, self.predictor.params,
                    steps, skip, self.grid.block_w, y0, n_lines, self.freq, self.tot,
                    self.prev, st, buf, stats, stat_from)

    def advance(self, n_lines):
        """Keep the last reconstructed line as the context for the next slice."""
        self.rec[0] = self.rec[n_lines]


def _estimate(session: _Session, data, y0, est_lines):
    """Lossless pass over the slice head; weights are restored afterwards."""
    grid = session.grid
    stats = np.zeros((3, grid.bands, grid.blocks_x), dtype=np.float64)
    token = session.predictor.snapshot()
    ones = np.ones((grid.bands, grid.blocks_x), dtype=np.int64)
    # the first image line has no line above it, so its residuals are not typical
    skip_first = 1 if (y0 == 0 and data.shape[0] > est_lines) else 0
    session.run(_ESTIMATE, data, ones, session.no_skip, y0, est_lines + skip_first, stats=stats,
                stat_from=skip_first)
    session.predictor.restore(token)
    s, ss, n = stats
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s / n
        var = ss / n - mean * mean
    var = np.where(n >= 2, np.maximum(var, 0.0), np.nan)
    return var


def _side_estimate(n_blocks, skip_present, prev_step_bits):
    bits = 32 + 32  # length field and coder flush
    if skip_present:
        bits += 8 * (-(-n_blocks // 8))
    bits += prev_step_bits if prev_step_bits is not None else 3 * n_blocks
    return bits


def encode(cube: ImageCube, config: CodecConfig, keep_reconstruction: bool = False):
    """Compress ``cube``; returns ``(stream, EncodeReport)``."""
    if not isinstance(cube, ImageCube):
        raise ConfigError("encode expects an ImageCube")
    bands, lines, columns = cube.bands, cube.lines, cube.columns
    if bands > 0xFFFF:
        raise ConfigError("at most 65535 bands")
    session = _Session(bands, lines, columns, cube.bit_depth, config.block_w,
                       config.block_h, config.pred_bands)
    grid = session.grid
    rate_mode = config.rate_controlled
    skip_enabled = (rate_mode and config.skip_blocks and config.clip is None
                    and config.target is not None and config.target <= 1.0)
    flags = FLAG_SKIP if skip_enabled else 0
    header = ContainerHeader(
        bands, lines, columns, cube.bit_depth, config.mode,
        config.q if config.mode == Mode.NEAR_LOSSLESS else 1,
        config.block_w, config.block_h, config.pred_bands, config.est_lines,
        config.tau, config.clip, config.target if rate_mode else None, flags,
    )
    out = bytearray(header.pack())
    model = RdModel(default_tables() if config.use_tables else None)
    controller = None
    if rate_mode:
        controller = RateController(config.target, config.tau, config.memory_policy,
                                    adaptive=config.mode == Mode.RATE_B, n_slices=grid.n_slices)
    fixed_q = config.q if config.mode == Mode.NEAR_LOSSLESS else 1
    fixed_steps = np.full((bands, grid.blocks_x), fixed_q, dtype=np.int64)
    prev_steps = None
    prev_step_bits = None
    recon = np.empty((lines, bands, columns), dtype=np.uint16) if keep_reconstruction else None
    sig_energy = 0.0
    err_energy = 0.0
    mad = np.zeros(bands, dtype=np.int64)
    records = []
    notes = []
    constrained = False
    target = config.target
    n_blocks = grid.blocks_per_slice
    base = grid.block_w * grid.block_h
    for k in range(grid.n_slices):
        y0, h = grid.slice_lines(k)
        data = cube.data[y0:y0 + h].astype(np.int64)
        n_pix = h * columns * bands
        alloc = None
        side = BitWriter()
        flag_bytes = b""
        if rate_mode:
            sigma2 = _estimate(session, data, y0, min(config.est_lines, h))
            weights = grid.pixel_counts(k) / base
            side_bits = _side_estimate(n_blocks, skip_enabled, prev_step_bits)
            budget = (target * n_pix - side_bits) / base
            noise = prev_steps
            for _ in range(1 if prev_steps is not None else 1 + FIRST_SLICE_REFITS):
                alloc = allocate_slice(
                    sigma2, target, weights, budget, prev_steps, clip=config.clip,
                    q_max=config.q_max, lambda_mult=config.lambda_init,
                    max_iters=config.max_outer_iters,
                    max_lambda_halvings=config.max_lambda_halvings,
                    allow_skip=skip_enabled, model=model, noise_steps=noise,
                )
                # no earlier slice tells how noisy the reconstructed neighbours
                # are, so the first slice feeds its own steps back in
                noise = alloc.steps
            steps = alloc.steps
            skip = alloc.skip_flags if skip_enabled else session.no_skip
            if skip_enabled:
                flag_bytes = _pack_flags(skip)
            encode_step_deltas(steps, prev_steps, skip if skip_enabled else None, side)
            prev_step_bits = len(side)
            if not alloc.feasible:
                constrained = True
                notes.append(f"slice {k}: " + "; ".join(alloc.notes or ["target not reachable"]))
        else:
            steps = fixed_steps
            skip = session.no_skip
        buf = np.empty(output_capacity(n_pix), dtype=np.uint8)
        st = np.zeros(3, dtype=np.int64)
        enc_init(st, 0)
        session.run(_ENCODE, data, steps, skip, y0, h, st=st, buf=buf)
        enc_flush(st, buf)
        payload = flag_bytes + side.to_bytes() + buf[: st[2]].tobytes()
        out += struct.pack("<I", len(payload))
        out += payload
        bits = 8 * (4 + len(payload))
        rec_slice = session.rec[1:h + 1]
        err = data - rec_slice
        sig_energy += float(np.sum(data * data, dtype=np.float64))
        err_energy += float(np.sum(err * err, dtype=np.float64))
        mad = np.maximum(mad, np.abs(err).max(axis=(0, 2)))
        if recon is not None:
            recon[y0:y0 + h] = rec_slice
        session.advance(h)
        rate = bits / n_pix
        records.append(SliceRecord(k, target if rate_mode else float("nan"), rate, bits,
                                   bits - 8 * len(buf[: st[2]]), alloc))
        if rate_mode:
            target = controller.next_target(rate)
            prev_steps = steps
    total_bits = 8 * len(out)
    if err_energy == 0:
        snr = None
    elif sig_energy == 0:
        snr = -math.inf
    else:
        snr = 10.0 * math.log10(sig_energy / err_energy)
    report = QualityReport(total_bits / cube.size, snr, int(mad.max()), [int(v) for v in mad])
    # slices can be infeasible on their own and still be paid back by later ones,
    # so only the final rate decides; plain model mismatch is not a miss
    missed = False
    if rate_mode and (constrained or config.clip is not None):
        if report.rate_bpp > config.target * 1.02:
            missed = True
            notes.append(f"rate {report.rate_bpp:.4f} bpp above target {config.target} under the step limit")
    if controller is not None and controller.flags:
        notes.extend(f"slice {n}: {msg}" for n, msg in controller.flags)
    return bytes(out), EncodeReport(
        quality=report, bits=total_bits, slices=records, target_missed=missed, notes=notes,
        reconstruction=ImageCube(recon, cube.bit_depth) if recon is not None else None,
    )


def read_header(stream: bytes) -> ContainerHeader:
    return ContainerHeader.unpack(stream)


def decode(stream: bytes) -> ImageCube:
    """Reconstruct the cube from an ``RCPC`` stream."""
    stream = bytes(stream)
    hdr = ContainerHeader.unpack(stream)
    session = _Session(hdr.bands, hdr.lines, hdr.columns, hdr.bit_depth, hdr.block_w,
                       hdr.block_h, hdr.pred_bands)
    grid = session.grid
    rate_mode = hdr.mode in (Mode.RATE_A, Mode.RATE_B)
    skip_present = bool(hdr.flags & FLAG_SKIP)
    shape = (hdr.bands, grid.blocks_x)
    q_limit = hdr.clip or 0xFFFF
    fixed_steps = np.full(shape, hdr.q, dtype=np.int64)
    out = np.empty((hdr.lines, hdr.bands, hdr.columns), dtype=np.uint16)
    pos = HEADER_SIZE
    prev_steps = None
    n_flag_bytes = -(-(shape[0] * shape[1]) // 8)
    for k in range(grid.n_slices):
        y0, h = grid.slice_lines(k)
        if pos + 4 > len(stream):
            raise CorruptStreamError(f"slice {k}: stream truncated before length field")
        (length,) = struct.unpack_from("<I", stream, pos)
        pos += 4
        end = pos + length
        if end > len(stream):
            raise CorruptStreamError(f"slice {k}: payload length {length} exceeds the stream")
        payload = stream[pos:end]
        pos = end
        off = 0
        skip = session.no_skip
        steps = fixed_steps
        try:
            if skip_present:
                if len(payload) < n_flag_bytes:
                    raise CorruptStreamError("skip flags truncated")
                bits = np.unpackbits(np.frombuffer(payload[:n_flag_bytes], dtype=np.uint8))
                skip = bits[: shape[0] * shape[1]].astype(np.bool_).reshape(shape)
                off = n_flag_bytes
            if rate_mode:
                reader = BitReader(payload[off:])
                steps = decode_step_deltas(reader, shape, prev_steps, skip if skip_present else None,
                                           q_max=q_limit)
                off += reader.bytes_consumed
                prev_steps = steps
            seg = np.frombuffer(payload, dtype=np.uint8).copy()
            st = np.zeros(6, dtype=np.int64)
            dec_init(st, seg, off, seg.size)
            data = np.zeros((h, hdr.bands, hdr.columns), dtype=np.int64)
            session.run(_DECODE, data, steps, skip, y0, h, st=st, buf=seg)
        except CorruptStreamError as exc:
            raise CorruptStreamError(f"slice {k}: {exc}") from None
        except ValueError as exc:
            raise CorruptStreamError(f"slice {k}: {exc}") from None
        out[y0:y0 + h] = data
        session.advance(h)
    if pos != len(stream):
        raise CorruptStreamError(f"{len(stream) - pos} trailing bytes after the last slice")
    return ImageCube(out, hdr.bit_depth)


STATS_FIELDS = ("mode", "target", "rate", "snr_db", "mad", "lossless")


def encode_with_stats(cube: ImageCube, config: CodecConfig, targets, modes=(Mode.RATE_A, Mode.RATE_B)):
    """Encode once per (mode, target); return rows of target, rate, SNR and MAD."""
    rows = []
    for mode in modes:
        for t in targets:
            cfg = replace(config, mode=mode, target=float(t))
            _, rep = encode(cube, cfg)
            q = rep.quality
            rows.append({
                "mode": "A" if mode == Mode.RATE_A else "B",
                "target": float(t),
                "rate": q.rate_bpp,
                "snr_db": q.snr_db,
                "mad": q.mad,
                "lossless": q.lossless,
            })
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=STATS_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def quality_of(original: ImageCube, stream: bytes) -> QualityReport:
    """Decode ``stream`` and compare it with ``original``."""
    return quality(original, decode(stream), 8 * len(stream))


__all__ = [
    "ContainerHeader", "EncodeReport", "SliceRecord", "encode", "decode", "read_header",
    "encode_with_stats", "rows_to_csv", "quality_of", "MemoryPolicy",
]
