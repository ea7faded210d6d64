"""Nanosecond timing of decompression and compression calls."""

from __future__ import annotations

import csv
import enum
import math
import random
import statistics
import threading
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Protocol, TextIO

from .codecs import CodecId, CompressedBlob, compress, decoder, store_with_policy, PGLZ_POLICY

PAGE_SIZE = 4096

now_ns = time.perf_counter_ns

# one timed region at a time per process
TIMING_TOKEN = threading.RLock()


def timer_descriptor() -> dict:
    info = time.get_clock_info("perf_counter")
    return {
        "timer_source": "perf_counter_ns",
        "implementation": info.implementation,
        "monotonic": info.monotonic,
        "resolution_s": info.resolution,
        "calibration_ns_per_tick": 1.0,
    }


def resolution_probe(samples: int = 1001) -> float:
    """Median delta between back-to-back clock reads, in ns."""
    deltas = []
    for _ in range(samples):
        a = now_ns()
        b = now_ns()
        deltas.append(b - a)
    return statistics.median(deltas)


class Aggregator(enum.Enum):
    MIN = "min"
    MEDIAN = "median"
    MEAN = "mean"


@dataclass(frozen=True)
class MeasurementPlan:
    iterations: int = 10000
    warmup_iterations: int = 1000
    aggregator: Aggregator = Aggregator.MIN
    trim_fraction: float = 0.0  # drop this share of the slowest samples before MEAN

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.warmup_iterations < 0:
            raise ValueError("warmup_iterations must be >= 0")
        if not 0 <= self.trim_fraction < 1:
            raise ValueError("trim_fraction must be in [0, 1)")


@dataclass(frozen=True)
class TimingStats:
    n: int
    min_ns: float
    median_ns: float
    mean_ns: float
    stddev_pct: float

    @classmethod
    def from_samples(cls, samples: Iterable[float], trim_fraction: float = 0.0) -> "TimingStats":
        xs = sorted(samples)
        if not xs:
            raise ValueError("no samples")
        kept = xs
        if trim_fraction > 0:
            drop = int(len(xs) * trim_fraction)
            kept = xs[: len(xs) - drop] or xs[:1]
        mean = statistics.fmean(kept)
        sd = statistics.pstdev(kept) if len(kept) > 1 else 0.0
        pct = 100.0 * sd / mean if mean else 0.0
        return cls(len(xs), xs[0], statistics.median(xs), mean, pct)

    def value(self, aggregator: Aggregator) -> float:
        return {Aggregator.MIN: self.min_ns, Aggregator.MEDIAN: self.median_ns,
                Aggregator.MEAN: self.mean_ns}[aggregator]


class OutputSink:
    """Consumes results of timed calls so the work is observable."""

    def __init__(self):
        self.calls = 0
        self.bytes = 0
        self.checksum = 0

    def consume(self, out) -> None:
        self.calls += 1
        out = getattr(out, "payload", out)
        if out is not None:
            self.bytes += len(out)
            if out:
                self.checksum ^= out[-1]


SINK = OutputSink()


class Clock(Protocol):
    def run(self, fn: Callable[[], object], iterations: int, subject=None) -> list[int]:
        ...


class PerfClock:
    """Times each call with the monotonic performance counter."""

    def run(self, fn, iterations, subject=None, sink: OutputSink | None = SINK):
        samples = [0] * iterations
        pc = now_ns
        out = None
        if sink is None:
            for i in range(iterations):
                t0 = pc()
                fn()
                samples[i] = pc() - t0
            return samples
        consume = sink.consume
        for i in range(iterations):
            t0 = pc()
            out = fn()
            t1 = pc()
            consume(out)
            samples[i] = t1 - t0
        return samples


class FakeClock:
    """Deterministic clock for tests: time = cost(subject) + seeded noise.

    ``noise`` receives the rng and the iteration index and returns extra ns.
    """

    def __init__(self, cost: Callable[[object], float], noise=None, seed: int = 0, call: bool = False):
        self.cost = cost
        self.noise = noise
        self.rng = random.Random(seed)
        self.call = call

    def run(self, fn, iterations, subject=None, sink=None):
        base = self.cost(subject)
        out = []
        for i in range(iterations):
            if self.call:
                fn()
            extra = self.noise(self.rng, i) if self.noise else 0
            out.append(int(round(base + extra)))
        return out


DEFAULT_CLOCK = PerfClock()


def measure(fn: Callable[[], object], plan: MeasurementPlan, clock: Clock | None = None, subject=None) -> list[int]:
    """Raw samples of ``fn`` after warmup."""
    clock = clock or DEFAULT_CLOCK
    with TIMING_TOKEN:
        if isinstance(clock, PerfClock):
            for _ in range(plan.warmup_iterations):
                fn()
        return clock.run(fn, plan.iterations, subject)


def measure_decompression(blob: CompressedBlob, plan: MeasurementPlan, clock: Clock | None = None) -> TimingStats:
    fn = decoder(blob)
    fn()  # surface codec errors before timing
    return TimingStats.from_samples(measure(fn, plan, clock, subject=blob), plan.trim_fraction)


def measure_compression(codec: CodecId, level: int, data: bytes, plan: MeasurementPlan,
                        clock: Clock | None = None) -> TimingStats:
    compress(codec, level, data)
    return TimingStats.from_samples(
        measure(lambda: compress(codec, level, data), plan, clock, subject=data), plan.trim_fraction
    )


class EntropyKind(enum.Enum):
    FULLY_COMPRESSIBLE = "fully"
    PARTIALLY_COMPRESSIBLE = "partially"
    INCOMPRESSIBLE = "incompressible"


@dataclass(frozen=True)
class EntropyInput:
    kind: EntropyKind
    page: bytes

    @classmethod
    def make(cls, kind: EntropyKind, seed: int = 0, fill: int = 0x41) -> "EntropyInput":
        rng = random.Random(seed)
        half = PAGE_SIZE // 2
        if kind is EntropyKind.FULLY_COMPRESSIBLE:
            page = bytes([fill]) * PAGE_SIZE
        elif kind is EntropyKind.PARTIALLY_COMPRESSIBLE:
            # repeated half first so PGLZ finds a match before its 1 KB give-up point
            page = bytes([fill]) * half + rng.randbytes(half)
        else:
            page = rng.randbytes(PAGE_SIZE)
        return cls(kind, page)


def entropy_blob(codec: CodecId, level: int, inp: EntropyInput) -> CompressedBlob | None:
    """The stored form of an entropy page, or None when the codec's own rule refuses it."""
    if codec is CodecId.PGLZ:
        blob = store_with_policy(PGLZ_POLICY, codec, level, inp.page)
        return None if blob.stored_raw else blob
    return compress(codec, level, inp.page)


def characterize(codec: CodecId, level: int, plan: MeasurementPlan, seed: int = 0,
                 rounds: int = 10, clock: Clock | None = None) -> dict[EntropyKind, TimingStats | None]:
    """Decompression timing per entropy kind; kinds are interleaved in rounds to spread drift."""
    blobs = {k: entropy_blob(codec, level, EntropyInput.make(k, seed)) for k in EntropyKind}
    rounds = max(1, min(rounds, plan.iterations))
    per_round = [plan.iterations // rounds + (1 if i < plan.iterations % rounds else 0) for i in range(rounds)]
    samples: dict[EntropyKind, list[int]] = {k: [] for k in EntropyKind}
    warm = True
    for count in per_round:
        for kind, blob in blobs.items():
            if blob is None:
                continue
            sub = MeasurementPlan(count, plan.warmup_iterations if warm else 0, plan.aggregator, plan.trim_fraction)
            fn = decoder(blob)
            samples[kind] += measure(fn, sub, clock, subject=blob)
        warm = False
    return {
        k: (TimingStats.from_samples(samples[k], plan.trim_fraction) if blobs[k] is not None else None)
        for k in EntropyKind
    }


CSV_COLUMNS = ["codec", "level", "entropy_kind", "n", "min_ns", "median_ns", "mean_ns", "stddev_pct"]


def write_characterization_csv(out: TextIO, codec: CodecId, level: int,
                               table: dict[EntropyKind, TimingStats | None]) -> None:
    w = csv.writer(out)
    w.writerow(CSV_COLUMNS)
    for kind, st in table.items():
        if st is None:
            w.writerow([codec.name.lower(), level, kind.value, "", "", "", "", ""])
        else:
            w.writerow([codec.name.lower(), level, kind.value, st.n, st.min_ns, st.median_ns,
                        f"{st.mean_ns:.2f}", f"{st.stddev_pct:.2f}"])


def stats_dict(st: TimingStats) -> dict:
    d = asdict(st)
    return {k: (v if not isinstance(v, float) or math.isfinite(v) else None) for k, v in d.items()}
