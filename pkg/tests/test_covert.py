import random

import pytest
from hypothesis import given, settings, strategies as st

from decomptime.attack import CalibrationError
from decomptime.codecs import CodecId, MEMCACHED_POLICY, PGLZ_POLICY
from decomptime.covert import (
    BitEncoding, ChannelStats, PageClient, PageStore, PageStoreServer, SendError, bits_from_bytes, bytes_from_bits,
    calibrate_pages, calibrate_remote, count_errors, receive_bits, receive_pages, send_bits, send_pages,
)
from decomptime.service import Flavor, ServiceClient, ServiceConfig, VictimServer
from decomptime.timing import PAGE_SIZE


@given(st.binary(max_size=200))
def test_bits_round_trip(data):
    bits = bits_from_bytes(data)
    assert len(bits) == 8 * len(data)
    assert bytes_from_bits(bits) == data


def test_bit_order_is_msb_first():
    assert bits_from_bytes(b"\x80\x01") == [1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]


def test_count_errors_includes_erasures_and_missing():
    assert count_errors([1, 0, 1, 1], [1, 1, None]) == 3
    assert count_errors([0, 1], [0, 1]) == 0


def test_channel_stats():
    s = ChannelStats(bits_sent=448, errors=2, elapsed=2.0, requests=10)
    assert s.rate == 224.0 and s.rate_per_hour == 224.0 * 3600
    assert s.error_rate == pytest.approx(2 / 448)
    assert len(s.csv_row()) == len(ChannelStats.CSV_COLUMNS)
    with pytest.raises(ValueError):
        ChannelStats(4, 5, 1.0)


def test_encoding_validation():
    with pytest.raises(ValueError):
        BitEncoding(b"aa", b"aa")
    with pytest.raises(ValueError):
        BitEncoding(b"aa", b"a")
    full = BitEncoding.entropy(seed=1)
    with pytest.raises(ValueError):
        # a random page is left uncompressed by the 1.3 factor rule
        full.check_policy(MEMCACHED_POLICY, CodecId.DEFLATE, 6)
    BitEncoding.entropy(20000, seed=1, partial=True).check_policy(PGLZ_POLICY, CodecId.PGLZ, 1)


def test_page_store_seals_when_full():
    store = PageStore()
    store.write(3, 0, b"a" * (PAGE_SIZE - 1))
    assert not store.sealed(3)
    with pytest.raises(KeyError):
        store.read(3, 0, 1)
    store.write(3, PAGE_SIZE - 1, b"b")
    assert store.sealed(3) and store.read(3, PAGE_SIZE - 2, 2) == b"ab"
    with pytest.raises(ValueError):
        store.write(3, 0, b"c")
    with pytest.raises(ValueError):
        store.write(4, PAGE_SIZE - 1, b"xy")


@pytest.fixture
def pages(tmp_path):
    path = str(tmp_path / "pages.sock")
    srv = PageStoreServer(path, PageStore()).start()
    client = PageClient(path)
    yield client
    client.close()
    srv.stop()


def test_page_channel_short_message(pages):
    enc = BitEncoding.entropy(seed=2)
    th = calibrate_pages(pages, enc, probes=8, reps=20)
    msg = bits_from_bytes(b"hi!")
    send_pages(pages, msg, enc, first_page=0)
    out, stats = receive_pages(pages, len(msg), th, reps=20, first_page=0, expected=msg)
    assert stats.errors <= 1
    assert stats.requests == 20 * len(msg)


def test_slotted_receiver_holds_its_rate(pages):
    enc = BitEncoding.entropy(seed=5)
    th = calibrate_pages(pages, enc, probes=8, reps=20)
    msg = bits_from_bytes(b"ok")
    send_pages(pages, msg, enc, first_page=100)
    out, stats = receive_pages(pages, len(msg), th, reps=5, first_page=100, expected=msg, slot_s=0.004)
    assert stats.errors <= 1
    assert 0.9 * 250 < stats.rate <= 250
    assert stats.requests > 5 * len(msg)


def test_page_receiver_marks_unsent_pages(pages):
    th = calibrate_pages(pages, BitEncoding.entropy(seed=3), probes=4, reps=10)
    out, stats = receive_pages(pages, 2, th, reps=5, first_page=500)
    assert out == [None, None] and stats.errors == 2


def test_identical_page_classes_fail_calibration(pages):
    enc = BitEncoding(b"A" * (PAGE_SIZE - 1) + b"B", b"A" * PAGE_SIZE)
    with pytest.raises(CalibrationError):
        calibrate_pages(pages, enc, probes=8, reps=10)


def test_remote_channel_over_service():
    # PGLZ cells with large values: the pure-Python decoder makes the two pages far apart
    srv = VictimServer(ServiceConfig(Flavor.CELL_PGLZ, level=1)).start()
    enc = BitEncoding.entropy(20000, seed=4, partial=True)
    try:
        with ServiceClient(srv.endpoint) as c:
            cal = calibrate_remote(c, enc, reps=30, reps_min=5)
            msg = [random.Random(0).getrandbits(1) for _ in range(16)]
            send_bits(c, msg, enc)
            out, stats = receive_bits(c, len(msg), cal, reps_min=5, reps_max=40, expected=msg)
        assert out == msg and stats.errors == 0
    finally:
        srv.stop()


def test_send_error_reports_progress():
    class Broken:
        n = 0

        def set(self, key, data):
            if self.n == 3:
                raise ConnectionResetError("down")
            self.n += 1

    with pytest.raises(SendError) as ei:
        send_bits(Broken(), [1, 0, 1, 1, 0], BitEncoding.entropy(64, seed=0))
    assert ei.value.last_confirmed == 2
