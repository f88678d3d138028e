"""Entropy coding layer.

* A carry-less byte-oriented range coder (32-bit ``low``/``range``, top
  renormalisation at 2**24, forced range reduction below 2**16) driven by
  adaptive frequency models over a 256-symbol alphabet. Symbol 255 is an
  escape followed by an order-0 Exp-Golomb tail sent as equiprobable bits.
* Order-0 Exp-Golomb codes and the differential coding of per-block
  quantization steps, written with a plain MSB-first bit writer.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numba import njit

TOP = 1 << 24
BOT = 1 << 16
MASK32 = (1 << 32) - 1

ALPHABET = 256
ESCAPE = ALPHABET - 1
MODEL_INCREMENT = 24
MODEL_LIMIT = 1 << 16
CONTEXTS_PER_BAND = 4
_MAX_EG_PREFIX = 24


class CorruptStreamError(ValueError):
    """Compressed data is truncated or inconsistent."""


# ----------------------------------------------------------------------------
# range coder kernels; encoder state = [low, range, pos], decoder state =
# [low, range, code, pos, end, r]


@njit(cache=True)
def enc_init(st, start):
    st[0] = 0
    st[1] = MASK32
    st[2] = start


@njit(cache=True)
def enc_put(st, buf, cum, freq, tot):
    r = st[1] // tot
    low = st[0] + cum * r
    rng = r * freq
    pos = st[2]
    while True:
        if (low ^ (low + rng)) < TOP:
            pass
        elif rng < BOT:
            rng = (-low) & (BOT - 1)
        else:
            break
        if pos >= buf.size:
            raise ValueError("range coder output buffer overflow")
        buf[pos] = (low >> 24) & 0xFF
        pos += 1
        rng = (rng << 8) & MASK32
        low = (low << 8) & MASK32
    st[0] = low
    st[1] = rng
    st[2] = pos


@njit(cache=True)
def enc_flush(st, buf):
    low = st[0]
    pos = st[2]
    if pos + 4 > buf.size:
        raise ValueError("range coder output buffer overflow")
    for _ in range(4):
        buf[pos] = (low >> 24) & 0xFF
        pos += 1
        low = (low << 8) & MASK32
    st[2] = pos


@njit(cache=True)
def dec_init(st, buf, start, end):
    if end - start < 4:
        raise ValueError("corrupt range-coded stream: segment too short")
    code = 0
    for i in range(4):
        code = (code << 8) | buf[start + i]
    st[0] = 0
    st[1] = MASK32
    st[2] = code
    st[3] = start + 4
    st[4] = end
    st[5] = 1


@njit(cache=True)
def dec_target(st, tot):
    r = st[1] // tot
    st[5] = r
    v = (st[2] - st[0]) // r
    if v < 0 or v >= tot:
        raise ValueError("corrupt range-coded stream: value out of range")
    return v


@njit(cache=True)
def dec_advance(st, buf, cum, freq):
    r = st[5]
    low = st[0] + cum * r
    rng = r * freq
    code = st[2]
    pos = st[3]
    end = st[4]
    while True:
        if (low ^ (low + rng)) < TOP:
            pass
        elif rng < BOT:
            rng = (-low) & (BOT - 1)
        else:
            break
        if pos >= end:
            raise ValueError("corrupt range-coded stream: read past end of segment")
        code = ((code << 8) | buf[pos]) & MASK32
        pos += 1
        rng = (rng << 8) & MASK32
        low = (low << 8) & MASK32
    st[0] = low
    st[1] = rng
    st[2] = code
    st[3] = pos


@njit(cache=True)
def model_init(freq, tot):
    freq[:] = 1
    tot[:] = freq.shape[1]


@njit(cache=True)
def model_update(freq, tot, m, s):
    freq[m, s] += MODEL_INCREMENT
    t = tot[m] + MODEL_INCREMENT
    if t > MODEL_LIMIT:
        t = 0
        for i in range(freq.shape[1]):
            f = (freq[m, i] + 1) >> 1
            freq[m, i] = f
            t += f
    tot[m] = t


@njit(cache=True)
def model_encode(st, buf, freq, tot, m, s):
    cum = 0
    for i in range(s):
        cum += freq[m, i]
    enc_put(st, buf, cum, freq[m, s], tot[m])
    model_update(freq, tot, m, s)


@njit(cache=True)
def model_decode(st, buf, freq, tot, m):
    v = dec_target(st, tot[m])
    cum = 0
    s = 0
    while cum + freq[m, s] <= v:
        cum += freq[m, s]
        s += 1
    dec_advance(st, buf, cum, freq[m, s])
    model_update(freq, tot, m, s)
    return s


@njit(cache=True)
def enc_bits(st, buf, value, nbits):
    while nbits > 16:
        nbits -= 16
        enc_put(st, buf, (value >> nbits) & 0xFFFF, 1, 1 << 16)
    if nbits > 0:
        enc_put(st, buf, value & ((1 << nbits) - 1), 1, 1 << nbits)


@njit(cache=True)
def dec_bits(st, buf, nbits):
    value = 0
    while nbits > 0:
        k = min(nbits, 16)
        v = dec_target(st, 1 << k)
        dec_advance(st, buf, v, 1)
        value = (value << k) | v
        nbits -= k
    return value


@njit(cache=True)
def enc_eg0(st, buf, v):
    n = 0
    while (v + 1) >> (n + 1):
        n += 1
    # the decoder reads the prefix one bit at a time, so it is sent that way
    for _ in range(n):
        enc_bits(st, buf, 0, 1)
    enc_bits(st, buf, 1, 1)
    enc_bits(st, buf, v + 1 - (1 << n), n)


@njit(cache=True)
def dec_eg0(st, buf):
    n = 0
    while dec_bits(st, buf, 1) == 0:
        n += 1
        if n > _MAX_EG_PREFIX:
            raise ValueError("corrupt range-coded stream: Exp-Golomb prefix too long")
    return ((1 << n) | dec_bits(st, buf, n)) - 1


@njit(cache=True, inline="always")
def select_context(prev_delta):
    """Model index from the magnitude of the previous mapped residual."""
    if prev_delta == 0:
        return 0
    if prev_delta <= 2:
        return 1
    if prev_delta <= 8:
        return 2
    return 3


@njit(cache=True)
def encode_mapped(st, buf, freq, tot, m, delta):
    if delta < ESCAPE:
        model_encode(st, buf, freq, tot, m, delta)
    else:
        model_encode(st, buf, freq, tot, m, ESCAPE)
        enc_eg0(st, buf, delta - ESCAPE)


@njit(cache=True)
def decode_mapped(st, buf, freq, tot, m):
    s = model_decode(st, buf, freq, tot, m)
    if s < ESCAPE:
        return s
    return ESCAPE + dec_eg0(st, buf)


def select_model(band: int, prev_delta: int) -> int:
    """Context id in ``0..3`` for ``band``'s next residual."""
    return int(select_context(int(prev_delta)))


def output_capacity(n_symbols: int) -> int:
    """Safe output size in bytes for ``n_symbols`` coded values of up to 16 bits."""
    return 8 * n_symbols + 64


# ----------------------------------------------------------------------------
# batch helpers


@njit(cache=True)
def _encode_batch(symbols, use_contexts, buf):
    freq = np.empty((CONTEXTS_PER_BAND, ALPHABET), dtype=np.int64)
    tot = np.empty(CONTEXTS_PER_BAND, dtype=np.int64)
    model_init(freq, tot)
    st = np.zeros(3, dtype=np.int64)
    enc_init(st, 0)
    prev = 0
    ctx = np.zeros(symbols.size, dtype=np.int8)
    for i in range(symbols.size):
        m = select_context(prev) if use_contexts else 0
        ctx[i] = m
        encode_mapped(st, buf, freq, tot, m, symbols[i])
        prev = symbols[i]
    enc_flush(st, buf)
    return st[2], ctx


@njit(cache=True)
def _decode_batch(buf, n, use_contexts):
    freq = np.empty((CONTEXTS_PER_BAND, ALPHABET), dtype=np.int64)
    tot = np.empty(CONTEXTS_PER_BAND, dtype=np.int64)
    model_init(freq, tot)
    st = np.zeros(6, dtype=np.int64)
    dec_init(st, buf, 0, buf.size)
    out = np.empty(n, dtype=np.int64)
    ctx = np.zeros(n, dtype=np.int8)
    prev = 0
    for i in range(n):
        m = select_context(prev) if use_contexts else 0
        ctx[i] = m
        prev = decode_mapped(st, buf, freq, tot, m)
        out[i] = prev
    return out, ctx


def encode_symbols(symbols, use_contexts: bool = False, return_contexts: bool = False):
    """Range-code non-negative integers with fresh adaptive models."""
    symbols = np.ascontiguousarray(symbols, dtype=np.int64)
    if symbols.size and symbols.min() < 0:
        raise ValueError("symbols must be non-negative")
    buf = np.empty(output_capacity(symbols.size), dtype=np.uint8)
    n, ctx = _encode_batch(symbols, use_contexts, buf)
    data = buf[:n].tobytes()
    return (data, ctx) if return_contexts else data


def decode_symbols(data: bytes, n: int, use_contexts: bool = False, return_contexts: bool = False):
    buf = np.frombuffer(data, dtype=np.uint8)
    try:
        out, ctx = _decode_batch(buf, n, use_contexts)
    except ValueError as exc:
        raise CorruptStreamError(str(exc)) from None
    return (out, ctx) if return_contexts else out


class AdaptiveModel:
    """Adaptive frequency table(s) over the 256-symbol alphabet."""

    def __init__(self, n_contexts: int = 1):
        self.freq = np.empty((n_contexts, ALPHABET), dtype=np.int64)
        self.tot = np.empty(n_contexts, dtype=np.int64)
        model_init(self.freq, self.tot)


class RangeEncoder:
    def __init__(self, capacity: int = 1 << 16):
        self._buf = np.empty(capacity, dtype=np.uint8)
        self._st = np.zeros(3, dtype=np.int64)
        enc_init(self._st, 0)

    def _reserve(self, extra: int):
        if self._st[2] + extra > self._buf.size:
            grown = np.empty(2 * self._buf.size + extra, dtype=np.uint8)
            grown[: self._buf.size] = self._buf
            self._buf = grown

    def encode(self, model: AdaptiveModel, symbol: int, context: int = 0):
        if symbol < 0:
            raise ValueError("symbols must be non-negative")
        self._reserve(16)
        encode_mapped(self._st, self._buf, model.freq, model.tot, context, symbol)

    def finish(self) -> bytes:
        self._reserve(4)
        enc_flush(self._st, self._buf)
        return self._buf[: self._st[2]].tobytes()


class RangeDecoder:
    def __init__(self, data: bytes):
        self._buf = np.frombuffer(bytes(data), dtype=np.uint8)
        self._st = np.zeros(6, dtype=np.int64)
        try:
            dec_init(self._st, self._buf, 0, self._buf.size)
        except ValueError as exc:
            raise CorruptStreamError(str(exc)) from None

    def decode(self, model: AdaptiveModel, context: int = 0) -> int:
        try:
            return int(decode_mapped(self._st, self._buf, model.freq, model.tot, context))
        except ValueError as exc:
            raise CorruptStreamError(str(exc)) from None


# ----------------------------------------------------------------------------
# Exp-Golomb side information


class BitWriter:
    def __init__(self):
        self._chunks: list[str] = []
        self._n = 0

    def write(self, value: int, nbits: int):
        if nbits > 0:
            self.write_bits(format(value & ((1 << nbits) - 1), f"0{nbits}b"))

    def write_bits(self, bits: str):
        self._chunks.append(bits)
        self._n += len(bits)

    def __len__(self):
        return self._n

    def bitstring(self) -> str:
        s = "".join(self._chunks)
        self._chunks = [s]
        return s

    def to_bytes(self) -> bytes:
        if not self._n:
            return b""
        pad = -self._n % 8
        return int(self.bitstring() + "0" * pad, 2).to_bytes((self._n + pad) // 8, "big")


class BitReader:
    def __init__(self, data, offset_bits: int = 0):
        if isinstance(data, str):
            self._bits = np.array([c == "1" for c in data], dtype=np.uint8)
        else:
            self._bits = np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8))
        self.pos = offset_bits

    def read_bit(self) -> int:
        if self.pos >= self._bits.size:
            raise CorruptStreamError("bitstream truncated")
        bit = int(self._bits[self.pos])
        self.pos += 1
        return bit

    def read(self, nbits: int) -> int:
        v = 0
        for _ in range(nbits):
            v = (v << 1) | self.read_bit()
        return v

    @property
    def bytes_consumed(self) -> int:
        return (self.pos + 7) // 8


@lru_cache(maxsize=4096)
def eg0_encode(u: int) -> str:
    if u < 0:
        raise ValueError("Exp-Golomb input must be non-negative")
    code = bin(u + 1)[2:]
    return "0" * (len(code) - 1) + code


def eg0_read(reader: BitReader) -> int:
    n = 0
    while reader.read_bit() == 0:
        n += 1
        if n > 32:
            raise CorruptStreamError("Exp-Golomb prefix too long")
    return ((1 << n) | reader.read(n)) - 1


def eg0_decode(bits) -> int:
    reader = bits if isinstance(bits, BitReader) else BitReader(bits)
    return eg0_read(reader)


def signed_to_eg(v: int) -> int:
    """Signed-to-unsigned map used for step deltas: 0, 1, -1, 2, -2 -> 0, 1, 2, 3, 4."""
    return 2 * v - 1 if v > 0 else -2 * v


def eg_to_signed(k: int) -> int:
    return (k + 1) // 2 if k & 1 else -(k // 2)


def encode_step_deltas(steps, prev_steps=None, skip=None, writer: BitWriter | None = None) -> BitWriter:
    """Differentially code a ``(bands, blocks_x)`` field of odd steps.

    Within a band each block is coded relative to the previous coded block;
    the first block refers to the same block of the previous slice (or to 1).
    Skipped blocks carry no step and are not coded.
    """
    steps = np.asarray(steps, dtype=np.int64)
    if np.any(steps < 1) or np.any(steps % 2 == 0):
        raise ValueError("steps must be odd and >= 1")
    writer = BitWriter() if writer is None else writer
    for z in range(steps.shape[0]):
        ref = 1 if prev_steps is None else int(prev_steps[z, 0])
        for bx in range(steps.shape[1]):
            if skip is not None and skip[z, bx]:
                continue
            q = int(steps[z, bx])
            writer.write_bits(eg0_encode(signed_to_eg((q - ref) // 2)))
            ref = q
    return writer


def decode_step_deltas(reader: BitReader, shape, prev_steps=None, skip=None, q_max: int = 65535):
    """Inverse of :func:`encode_step_deltas`; skipped blocks inherit the running reference."""
    bands, blocks_x = shape
    steps = np.empty((bands, blocks_x), dtype=np.int64)
    for z in range(bands):
        ref = 1 if prev_steps is None else int(prev_steps[z, 0])
        for bx in range(blocks_x):
            if skip is not None and skip[z, bx]:
                steps[z, bx] = ref
                continue
            q = ref + 2 * eg_to_signed(eg0_read(reader))
            if not 1 <= q <= q_max:
                raise CorruptStreamError(f"decoded step {q} out of range")
            steps[z, bx] = q
            ref = q
    return steps
