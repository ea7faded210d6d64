"""Uniform compress/decompress over LZ-family codecs plus storage acceptance policies."""

from __future__ import annotations

import enum
import importlib
import threading
import zlib
from dataclasses import dataclass
from typing import Callable

import lz4.block
import zstandard

from . import pglz


class CodecError(RuntimeError):
    """A codec failed internally or rejected a corrupted payload."""

    def __init__(self, codec: "CodecId", message: str):
        super().__init__(f"{codec.name}: {message}")
        self.codec = codec


class CodecId(enum.Enum):
    DEFLATE = "deflate"
    LZ4 = "lz4"
    ZSTD = "zstd"
    PGLZ = "pglz"
    FASTLZ = "fastlz"
    LZO = "lzo"

    @classmethod
    def parse(cls, name: str) -> "CodecId":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown codec {name!r}") from None


# (min, max, default); LZ4 level 1 is the fast block mode, 2..12 select HC
LEVEL_RANGES: dict[CodecId, tuple[int, int, int]] = {
    CodecId.DEFLATE: (1, 9, 6),
    CodecId.LZ4: (1, 12, 1),
    CodecId.ZSTD: (1, 22, 3),
    CodecId.PGLZ: (1, 1, 1),
    CodecId.FASTLZ: (1, 2, 1),
    CodecId.LZO: (1, 1, 1),
}


@dataclass(frozen=True)
class CompressionLevel:
    codec: CodecId
    level: int

    def __post_init__(self):
        lo, hi, _ = LEVEL_RANGES[self.codec]
        if not isinstance(self.level, int) or not lo <= self.level <= hi:
            raise ValueError(f"level {self.level} outside {lo}..{hi} for {self.codec.name}")

    @classmethod
    def default(cls, codec: CodecId) -> "CompressionLevel":
        return cls(codec, LEVEL_RANGES[codec][2])


def default_level(codec: CodecId) -> int:
    return LEVEL_RANGES[codec][2]


@dataclass(frozen=True)
class AcceptancePolicy:
    size_threshold: int
    compression_factor: float | None = None
    min_savings_fraction: float | None = None

    def __post_init__(self):
        if (self.compression_factor is None) == (self.min_savings_fraction is None):
            raise ValueError("exactly one of compression_factor / min_savings_fraction must be set")
        if self.size_threshold < 0:
            raise ValueError("size_threshold must be >= 0")
        if self.compression_factor is not None and self.compression_factor <= 0:
            raise ValueError("compression_factor must be positive")
        if self.min_savings_fraction is not None and not 0 <= self.min_savings_fraction < 1:
            raise ValueError("min_savings_fraction must be in [0, 1)")

    def accepts(self, original_len: int, compressed_len: int) -> bool:
        if self.compression_factor is not None:
            # memcached keeps the compressed form only if len > clen * factor
            return original_len > compressed_len * self.compression_factor
        need = round(self.min_savings_fraction * 100)
        return compressed_len < original_len * (100 - need) // 100


MEMCACHED_POLICY = AcceptancePolicy(size_threshold=2000, compression_factor=1.3)
PGLZ_POLICY = AcceptancePolicy(size_threshold=pglz.DEFAULT.min_input_size, min_savings_fraction=0.25)


@dataclass(frozen=True)
class CompressedBlob:
    codec: CodecId
    level: int
    original_len: int
    payload: bytes
    stored_raw: bool

    def __post_init__(self):
        if self.stored_raw and len(self.payload) != self.original_len:
            raise ValueError("raw blob payload must equal the original length")


_local = threading.local()


def _zstd_c(level: int) -> zstandard.ZstdCompressor:
    cache = _local.__dict__.setdefault("zc", {})
    if level not in cache:
        cache[level] = zstandard.ZstdCompressor(level=level, write_content_size=True, write_checksum=False)
    return cache[level]


def _zstd_d() -> zstandard.ZstdDecompressor:
    d = getattr(_local, "zd", None)
    if d is None:
        d = _local.zd = zstandard.ZstdDecompressor()
    return d


def _deflate(data: bytes, level: int) -> bytes:
    c = zlib.compressobj(level, zlib.DEFLATED, -15)
    return c.compress(data) + c.flush()


def _lz4(data: bytes, level: int) -> bytes:
    if level == 1:
        return lz4.block.compress(data, mode="default", store_size=False)
    return lz4.block.compress(data, mode="high_compression", compression=level, store_size=False)


_COMPRESSORS: dict[CodecId, Callable[[bytes, int], bytes]] = {
    CodecId.DEFLATE: _deflate,
    CodecId.LZ4: _lz4,
    CodecId.ZSTD: lambda data, level: _zstd_c(level).compress(data),
    CodecId.PGLZ: lambda data, level: pglz.encode(data),
}

_DECOMPRESSORS: dict[CodecId, Callable[[bytes, int], bytes]] = {
    CodecId.DEFLATE: lambda payload, n: zlib.decompress(payload, -15, max(n, 1)),
    CodecId.LZ4: lambda payload, n: lz4.block.decompress(payload, uncompressed_size=n),
    CodecId.ZSTD: lambda payload, n: _zstd_d().decompress(payload, max_output_size=n),
    CodecId.PGLZ: pglz.decompress,
}


def _register_optional() -> None:
    try:
        fastlz = importlib.import_module("fastlz")
        _COMPRESSORS[CodecId.FASTLZ] = lambda data, level: fastlz.compress(data, level)
        _DECOMPRESSORS[CodecId.FASTLZ] = lambda payload, n: fastlz.decompress(payload)
    except ImportError:
        pass
    try:
        lzo = importlib.import_module("lzo")
        _COMPRESSORS[CodecId.LZO] = lambda data, level: lzo.compress(data, level, False)
        _DECOMPRESSORS[CodecId.LZO] = lambda payload, n: lzo.decompress(payload, False, n)
    except ImportError:
        pass


_register_optional()


def available_codecs() -> list[CodecId]:
    return [c for c in CodecId if c in _COMPRESSORS]


def _check(codec: CodecId, level: int) -> None:
    if codec not in _COMPRESSORS:
        raise CodecError(codec, "codec not available in this build")
    CompressionLevel(codec, level)


def compress(codec: CodecId, level: int, data: bytes) -> CompressedBlob:
    _check(codec, level)
    if not data:
        raise ValueError("data must be non-empty")
    try:
        payload = _COMPRESSORS[codec](bytes(data), level)
    except Exception as exc:  # surface every library failure as a codec error
        raise CodecError(codec, f"compression failed: {exc}") from exc
    return CompressedBlob(codec, level, len(data), payload, stored_raw=False)


def decompress(blob: CompressedBlob) -> bytes:
    if blob.stored_raw:
        return bytes(blob.payload)
    try:
        out = _DECOMPRESSORS[blob.codec](blob.payload, blob.original_len)
    except KeyError:
        raise CodecError(blob.codec, "codec not available in this build") from None
    except Exception as exc:
        raise CodecError(blob.codec, f"integrity error: {exc}") from exc
    if len(out) != blob.original_len:
        raise CodecError(blob.codec, f"integrity error: got {len(out)} bytes, expected {blob.original_len}")
    return out


def decoder(blob: CompressedBlob) -> Callable[[], bytes]:
    """Zero-argument callable that performs exactly the decompression work for ``blob``."""
    if blob.stored_raw:
        payload = blob.payload
        return lambda: bytes(payload)
    fn = _DECOMPRESSORS[blob.codec]
    payload, n = blob.payload, blob.original_len
    return lambda: fn(payload, n)


def store_with_policy(policy: AcceptancePolicy, codec: CodecId, level: int, data: bytes) -> CompressedBlob:
    _check(codec, level)
    data = bytes(data)
    raw = CompressedBlob(codec, level, len(data), data, stored_raw=True)
    if len(data) < policy.size_threshold or not data:
        return raw
    if codec is CodecId.PGLZ and policy.min_savings_fraction is not None:
        # PostgreSQL decides inside the compressor: the strategy also gives up
        # when no match shows up within the first KB of output
        strategy = pglz.Strategy(
            min_input_size=policy.size_threshold,
            min_comp_rate=round(policy.min_savings_fraction * 100),
        )
        payload = pglz.compress(data, strategy)
        if payload is None:
            return raw
        return CompressedBlob(codec, level, len(data), payload, stored_raw=False)
    blob = compress(codec, level, data)
    if not policy.accepts(len(data), len(blob.payload)):
        return raw
    return blob
