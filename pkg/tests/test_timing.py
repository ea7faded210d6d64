import csv
import io
import statistics

import pytest
from hypothesis import given, strategies as st

from decomptime.codecs import CodecId, compress
from decomptime.timing import (
    CSV_COLUMNS, PAGE_SIZE, Aggregator, EntropyInput, EntropyKind, FakeClock, MeasurementPlan, OutputSink,
    PerfClock, TimingStats, characterize, entropy_blob, measure, measure_decompression, resolution_probe,
    timer_descriptor, write_characterization_csv,
)


@given(st.lists(st.integers(0, 10**9), min_size=1, max_size=300))
def test_stats_match_statistics_module(xs):
    s = TimingStats.from_samples(xs)
    assert s.n == len(xs) and s.min_ns == min(xs)
    assert s.median_ns == statistics.median(xs)
    assert s.mean_ns == pytest.approx(statistics.fmean(xs))


def test_trim_drops_slowest():
    s = TimingStats.from_samples([1, 2, 3, 4, 100], trim_fraction=0.2)
    assert s.mean_ns == 2.5 and s.median_ns == 3 and s.n == 5
    assert s.value(Aggregator.MIN) == 1


@pytest.mark.parametrize("kw", [{"iterations": 0}, {"warmup_iterations": -1}, {"trim_fraction": 1.0}])
def test_plan_validation(kw):
    with pytest.raises(ValueError):
        MeasurementPlan(**kw)


def test_fake_clock_is_deterministic():
    clock = FakeClock(lambda blob: len(blob.payload), noise=lambda rng, i: rng.randint(0, 9), seed=4)
    blob = compress(CodecId.DEFLATE, 6, b"abc" * 100)
    a = measure(lambda: None, MeasurementPlan(50, 0), clock, subject=blob)
    b = measure(lambda: None, MeasurementPlan(50, 0), FakeClock(lambda blob: len(blob.payload),
                                                                noise=lambda rng, i: rng.randint(0, 9), seed=4),
                subject=blob)
    assert a == b and min(a) >= len(blob.payload)


def test_perf_clock_feeds_sink():
    sink = OutputSink()
    samples = PerfClock().run(lambda: b"xyz", 10, sink=sink)
    assert len(samples) == 10 and all(s >= 0 for s in samples)
    assert sink.calls == 10 and sink.bytes == 30


def test_measure_decompression_real_clock():
    blob = compress(CodecId.ZSTD, 3, b"hello" * 1000)
    s = measure_decompression(blob, MeasurementPlan(50, 5))
    assert s.n == 50 and 0 < s.min_ns <= s.median_ns


def test_entropy_inputs():
    full = EntropyInput.make(EntropyKind.FULLY_COMPRESSIBLE).page
    part = EntropyInput.make(EntropyKind.PARTIALLY_COMPRESSIBLE, seed=1).page
    rnd = EntropyInput.make(EntropyKind.INCOMPRESSIBLE, seed=1).page
    assert len(full) == len(part) == len(rnd) == PAGE_SIZE
    assert len(set(full)) == 1
    assert part[:PAGE_SIZE // 2] == full[:PAGE_SIZE // 2]
    assert entropy_blob(CodecId.PGLZ, 1, EntropyInput.make(EntropyKind.INCOMPRESSIBLE)) is None


def test_characterize_splits_iterations_across_rounds():
    clock = FakeClock(lambda blob: float(len(blob.payload)))
    table = characterize(CodecId.DEFLATE, 6, MeasurementPlan(25, 0), rounds=4, clock=clock)
    assert all(s.n == 25 for s in table.values())
    # under a size clock the random page is the slowest
    assert table[EntropyKind.INCOMPRESSIBLE].min_ns > table[EntropyKind.FULLY_COMPRESSIBLE].min_ns


def test_characterization_csv():
    table = characterize(CodecId.PGLZ, 1, MeasurementPlan(3, 0), clock=FakeClock(lambda b: 1.0))
    buf = io.StringIO()
    write_characterization_csv(buf, CodecId.PGLZ, 1, table)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert rows[0] == CSV_COLUMNS and len(rows) == 4
    assert rows[3][2] == "incompressible" and rows[3][3] == ""


def test_timer_descriptor_and_probe():
    d = timer_descriptor()
    assert d["monotonic"] and d["timer_source"] == "perf_counter_ns"
    assert resolution_probe(101) >= 0


def test_sink_accepts_compressed_blobs():
    sink = OutputSink()
    blob = compress(CodecId.DEFLATE, 6, b"abc" * 50)
    sink.consume(blob)
    assert sink.bytes == len(blob.payload)
