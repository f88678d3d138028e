import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rcpc.entropy import (
    AdaptiveModel,
    BitReader,
    BitWriter,
    CorruptStreamError,
    RangeDecoder,
    RangeEncoder,
    decode_step_deltas,
    decode_symbols,
    eg0_decode,
    eg0_encode,
    eg0_read,
    encode_step_deltas,
    encode_symbols,
    select_model,
)


def _entropy_bits(sym):
    _, counts = np.unique(sym, return_counts=True)
    p = counts / counts.sum()
    return -np.sum(p * np.log2(p))


def test_round_trip_large():
    sym = np.random.default_rng(0).integers(0, 256, 10**6)
    data = encode_symbols(sym)
    assert np.array_equal(decode_symbols(data, sym.size), sym)


def test_uniform_near_eight_bits():
    sym = np.random.default_rng(1).integers(0, 255, 10**6)  # 255 is the escape symbol
    bps = 8 * len(encode_symbols(sym)) / sym.size
    assert abs(bps - 8) / 8 < 0.01


def test_geometric_near_entropy():
    sym = np.random.default_rng(2).geometric(0.3, 10**6) - 1
    sym = np.minimum(sym, 254)
    bps = 8 * len(encode_symbols(sym)) / sym.size
    h = _entropy_bits(sym)
    assert bps <= h * 1.02 + 8 * 64 / sym.size


def test_escape_values_round_trip():
    sym = np.array([0, 254, 255, 256, 1000, 65535, 3, 255])
    assert np.array_equal(decode_symbols(encode_symbols(sym), sym.size), sym)


@given(st.lists(st.integers(0, 70000), max_size=300), st.booleans())
def test_round_trip_property(values, ctx):
    sym = np.array(values, dtype=np.int64)
    data, c_enc = encode_symbols(sym, use_contexts=ctx, return_contexts=True)
    out, c_dec = decode_symbols(data, sym.size, use_contexts=ctx, return_contexts=True)
    assert np.array_equal(out, sym)
    assert np.array_equal(c_enc, c_dec)


def test_context_sequence_identical():
    sym = np.random.default_rng(3).integers(0, 20, 50_000)
    data, c_enc = encode_symbols(sym, use_contexts=True, return_contexts=True)
    _, c_dec = decode_symbols(data, sym.size, use_contexts=True, return_contexts=True)
    assert np.array_equal(c_enc, c_dec)
    assert set(np.unique(c_enc)) == {0, 1, 2, 3}


@pytest.mark.parametrize("prev,ctx", [(0, 0), (1, 1), (2, 1), (5, 2), (8, 2), (9, 3), (400, 3)])
def test_select_model(prev, ctx):
    assert select_model(0, prev) == ctx


def test_streaming_api_matches():
    rng = np.random.default_rng(4)
    sym = rng.integers(0, 300, 5000)
    ctx = rng.integers(0, 4, 5000)
    enc, m = RangeEncoder(64), AdaptiveModel(4)
    for s, c in zip(sym, ctx):
        enc.encode(m, int(s), int(c))
    data = enc.finish()
    dec, m2 = RangeDecoder(data), AdaptiveModel(4)
    assert [dec.decode(m2, int(c)) for c in ctx] == sym.tolist()


def test_model_frequencies_positive_and_bounded():
    enc, m = RangeEncoder(), AdaptiveModel()
    for _ in range(20000):
        enc.encode(m, 7)
    assert m.freq.min() >= 1 and m.tot.max() <= 1 << 16


def test_truncated_stream_detected():
    sym = np.random.default_rng(5).integers(0, 256, 4000)
    data = encode_symbols(sym)
    try:
        out = decode_symbols(data[: len(data) // 2], sym.size)
    except CorruptStreamError:
        return
    assert not np.array_equal(out, sym)


EG0 = {0: "1", 1: "010", 2: "011", 3: "00100", 4: "00101", 6: "00111", 7: "0001000", 14: "0001111"}


def test_eg0_known_codewords():
    for u, code in EG0.items():
        assert eg0_encode(u) == code


def test_eg0_canonical_table():
    for u in range(101):
        b = bin(u + 1)[2:]
        assert eg0_encode(u) == "0" * (len(b) - 1) + b


def test_eg0_exhaustive_round_trip():
    w = BitWriter()
    for u in range(100_001):
        w.write_bits(eg0_encode(u))
    r = BitReader(w.to_bytes())
    for u in range(100_001):
        assert eg0_read(r) == u


def test_eg0_errors():
    with pytest.raises(ValueError):
        eg0_encode(-1)
    with pytest.raises(CorruptStreamError):
        eg0_decode("0001")


def test_step_deltas_hand_example():
    w = encode_step_deltas(np.array([[1, 3, 5]]))
    assert w.bitstring() == "1" + "010" + "010"
    assert len(encode_step_deltas(np.full((2, 4), 7), prev_steps=np.full((2, 4), 7))) == 8


@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 8), st.booleans(), st.booleans())
def test_step_deltas_round_trip(seed, bands, bx, with_prev, with_skip):
    r = np.random.default_rng(seed)
    steps = 2 * r.integers(0, 40, (bands, bx)) + 1
    prev = 2 * r.integers(0, 40, (bands, bx)) + 1 if with_prev else None
    skip = r.random((bands, bx)) < 0.3 if with_skip else None
    w = encode_step_deltas(steps, prev, skip)
    got = decode_step_deltas(BitReader(w.to_bytes()), steps.shape, prev, skip)
    mask = np.ones_like(steps, dtype=bool) if skip is None else ~skip
    assert np.array_equal(got[mask], steps[mask])


def test_bitwriter_padding():
    w = BitWriter()
    w.write(0b101, 3)
    assert w.to_bytes() == bytes([0b10100000])
    assert BitWriter().to_bytes() == b""
