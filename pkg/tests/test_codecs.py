import zlib

import pytest
from hypothesis import given, settings, strategies as st

from decomptime import pglz
from decomptime.codecs import (
    AcceptancePolicy, CodecError, CodecId, CompressedBlob, CompressionLevel, LEVEL_RANGES, MEMCACHED_POLICY,
    PGLZ_POLICY, available_codecs, compress, decoder, decompress, default_level, store_with_policy,
)
from decomptime.deflate_inspect import InspectError, block_kinds, inspect

CODECS = available_codecs()


def test_core_codecs_available():
    assert {CodecId.DEFLATE, CodecId.LZ4, CodecId.ZSTD, CodecId.PGLZ} <= set(CODECS)


@pytest.mark.parametrize("codec", CODECS)
def test_round_trip_each_level_bound(codec):
    lo, hi, _ = LEVEL_RANGES[codec]
    data = b"the quick brown fox " * 50
    for level in {lo, hi}:
        blob = compress(codec, level, data)
        assert blob.original_len == len(data)
        assert decompress(blob) == data
        assert decoder(blob)() == data


@given(st.sampled_from(CODECS), st.binary(min_size=1, max_size=2048))
@settings(max_examples=300, deadline=None)
def test_round_trip_property(codec, data):
    blob = compress(codec, default_level(codec), data)
    assert decompress(blob) == data


@pytest.mark.parametrize("codec", [CodecId.DEFLATE, CodecId.LZ4, CodecId.ZSTD, CodecId.PGLZ])
def test_corrupt_payload_names_codec(codec):
    blob = compress(codec, default_level(codec), b"abcdefgh" * 64)
    bad = CompressedBlob(codec, blob.level, blob.original_len, blob.payload[: len(blob.payload) // 2], False)
    with pytest.raises(CodecError) as ei:
        decompress(bad)
    assert ei.value.codec is codec
    assert codec.name in str(ei.value)


def test_length_mismatch_is_integrity_error():
    blob = compress(CodecId.DEFLATE, 6, b"x" * 100)
    wrong = CompressedBlob(CodecId.DEFLATE, 6, 99, blob.payload, False)
    with pytest.raises(CodecError):
        decompress(wrong)


@pytest.mark.parametrize("codec,level", [(CodecId.DEFLATE, 0), (CodecId.DEFLATE, 10), (CodecId.ZSTD, 23),
                                         (CodecId.LZ4, 13), (CodecId.PGLZ, 2)])
def test_level_out_of_range(codec, level):
    with pytest.raises(ValueError):
        CompressionLevel(codec, level)
    with pytest.raises(ValueError):
        compress(codec, level, b"data")


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        compress(CodecId.DEFLATE, 6, b"")


def test_codec_parse():
    assert CodecId.parse("deflate") is CodecId.DEFLATE
    with pytest.raises(ValueError):
        CodecId.parse("brotli")


def test_deflate_is_raw_stream():
    data = b"hello hello hello"
    blob = compress(CodecId.DEFLATE, 6, data)
    assert zlib.decompress(blob.payload, -15) == data


# -- acceptance policies --------------------------------------------------------


def test_policy_needs_exactly_one_rule():
    with pytest.raises(ValueError):
        AcceptancePolicy(10)
    with pytest.raises(ValueError):
        AcceptancePolicy(10, compression_factor=1.3, min_savings_fraction=0.25)


def test_memcached_factor_rule():
    # kept compressed only when original > compressed * 1.3
    assert MEMCACHED_POLICY.accepts(1300, 999)
    assert not MEMCACHED_POLICY.accepts(1300, 1000)


def test_savings_rule():
    # 25% savings: compressed must be strictly below 75% of the original
    assert PGLZ_POLICY.accepts(100, 74)
    assert not PGLZ_POLICY.accepts(100, 75)


def test_memcached_threshold_raw_below_2000():
    data = b"A" * 1999
    assert store_with_policy(MEMCACHED_POLICY, CodecId.DEFLATE, 6, data).stored_raw
    assert not store_with_policy(MEMCACHED_POLICY, CodecId.DEFLATE, 6, b"A" * 2000).stored_raw


def test_incompressible_kept_raw():
    import random
    data = random.Random(1).randbytes(4096)
    blob = store_with_policy(MEMCACHED_POLICY, CodecId.DEFLATE, 6, data)
    assert blob.stored_raw and blob.payload == data
    assert decompress(blob) == data


def test_pglz_policy_uses_native_rule():
    assert not store_with_policy(PGLZ_POLICY, CodecId.PGLZ, 1, b"ab" * 100).stored_raw
    assert store_with_policy(PGLZ_POLICY, CodecId.PGLZ, 1, b"ab" * 10).stored_raw  # below 32 bytes


# -- PGLZ ------------------------------------------------------------------------


def test_pglz_hand_encoded_vector():
    # control 0b10: literal 'a', then a tag for offset 1, length 39
    # (len nibble 0xf + extension 39-18=21, offset high nibble 0, low byte 1)
    assert pglz.encode(b"a" * 40) == bytes([0x02, 0x61, 0x0F, 0x01, 0x15])


def test_pglz_decode_hand_built_stream():
    # literal "ab", then copy offset 2, length 4 (tag low nibble 4-3=1)
    stream = bytes([0x04, ord("a"), ord("b"), 0x01, 0x02])
    assert pglz.decompress(stream, 6) == b"ababab"


@given(st.binary(min_size=1, max_size=5000))
@settings(max_examples=200, deadline=None)
def test_pglz_round_trip(data):
    assert pglz.decompress(pglz.encode(data), len(data)) == data


def test_pglz_strategy_give_ups():
    import random
    assert pglz.compress(b"x" * 31) is None  # below min_input_size
    assert pglz.compress(random.Random(0).randbytes(4096)) is None
    assert pglz.compress(b"x" * 4096) is not None


@pytest.mark.parametrize("stream,n", [(b"\x01\x0f", 10), (b"\x01\x00\x05", 3), (b"\x00abc", 4)])
def test_pglz_decompress_errors(stream, n):
    with pytest.raises(pglz.PglzError):
        pglz.decompress(stream, n)


# -- DEFLATE inspector (pure-Python decoder checked against zlib) ----------------


@given(st.binary(max_size=3000), st.integers(1, 9))
@settings(max_examples=100, deadline=None)
def test_inspect_matches_zlib(data, level):
    c = zlib.compressobj(level, zlib.DEFLATED, -15)
    payload = c.compress(data) + c.flush()
    out, blocks = inspect(payload)
    assert out == data
    assert sum(b.out_len for b in blocks) == len(data)


def test_inspect_block_kinds():
    import random
    rnd = random.Random(0).randbytes(5000)
    c = zlib.compressobj(6, zlib.DEFLATED, -15)
    assert block_kinds(c.compress(rnd) + c.flush()) == ("stored",)
    c = zlib.compressobj(6, zlib.DEFLATED, -15, 8, zlib.Z_FIXED)
    assert set(block_kinds(c.compress(b"abc" * 100) + c.flush())) == {"fixed"}


def test_inspect_rejects_garbage():
    with pytest.raises(InspectError):
        inspect(b"\x07")  # final block of the reserved type
