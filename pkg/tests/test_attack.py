import random

import pytest
from hypothesis import given, settings, strategies as st

from decomptime.attack import (
    DEFAULT_CHARSET, AttackConfig, BitDecision, Calibration, CalibrationError, FakeTarget, GuessCharset,
    LocalTarget, TransportError, bytewise_attack, calibrate, dictionary_attack, early_stop_classify, majority,
    regions_from_samples,
)
from dataclasses import replace

from decomptime.codecs import CodecId, MEMCACHED_POLICY, store_with_policy
from decomptime.fuzzer import Polarity
from decomptime.layout import LayoutConfig, build_layout, load_layouts

LAYOUT = LayoutConfig(seed=1, total_size=2048, secret_offset=0, guess_offset=1024)


def match_latency(layout, n, base=1000.0, step=100.0, sign=-1):
    """Latency falls (or rises) by ``step`` per leading byte the guess shares with the secret."""
    unit = len(layout.prefix) + n

    def latency(data: bytes) -> float:
        s, g = data[:unit], data[layout.guess_offset:layout.guess_offset + unit]
        k = 0
        while k < unit and s[k] == g[k]:
            k += 1
        return base + sign * step * k

    return latency


def guess_list(secret, k, rng):
    out = {secret}
    while len(out) < k:
        out.add(bytes(rng.choice(DEFAULT_CHARSET) for _ in secret))
    out = sorted(out)
    rng.shuffle(out)
    return out


def test_dictionary_noiseless_recovers_with_minimum_requests():
    secret = b"K3Y9ZQ"
    guesses = guess_list(secret, 20, random.Random(0))
    target = FakeTarget(match_latency(LAYOUT, 6), secret=secret)
    cfg = AttackConfig(layout=LAYOUT, reps_min=25, reps_max=200)
    tr = dictionary_attack(target, guesses, cfg)
    assert tr.recovered == secret and not tr.flags
    # a clean signal is significant at the first check
    assert tr.requests_used == target.requests == 20 * 25


def test_dictionary_flat_latency_is_undecided():
    target = FakeTarget(lambda data: 500.0, secret=b"AAAAAA")
    tr = dictionary_attack(target, [b"AAAAAA", b"BBBBBB", b"CCCCCC"], AttackConfig(layout=LAYOUT, reps_max=40))
    assert "UNDECIDED" in tr.flags
    assert tr.requests_used == 3 * 40


def test_slowest_polarity():
    secret = b"SECRET"
    guesses = guess_list(secret, 10, random.Random(1))
    target = FakeTarget(match_latency(LAYOUT, 6, sign=+1), secret=secret)
    tr = dictionary_attack(target, guesses, AttackConfig(layout=LAYOUT, polarity=Polarity.CORRECT_SLOWEST))
    assert tr.recovered == secret
    wrong = dictionary_attack(FakeTarget(match_latency(LAYOUT, 6, sign=+1), secret=secret), guesses,
                              AttackConfig(layout=LAYOUT, polarity=Polarity.CORRECT_FASTEST))
    assert wrong.recovered != secret


@given(st.integers(-10**6, 10**6), st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_decisions_invariant_under_constant_shift(c, seed):
    secret = b"AB12CD"
    guesses = guess_list(secret, 8, random.Random(seed))
    lat = match_latency(LAYOUT, 6, step=3)

    def run(shift):
        target = FakeTarget(lambda d: lat(d) + shift, noise=lambda r: r.gauss(0, 20), seed=seed, secret=secret)
        return dictionary_attack(target, guesses, AttackConfig(layout=LAYOUT, seed=seed, reps_max=60))

    a, b = run(0), run(c)
    assert a.recovered == b.recovered and a.flags == b.flags
    assert [(d.symbol, d.significant) for d in a.decisions] == [(d.symbol, d.significant) for d in b.decisions]


@given(st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789", min_size=1, max_size=6), st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_bytewise_noiseless_recovers_any_secret(secret, seed):
    secret = secret.encode()
    layout = LayoutConfig(seed=2, total_size=2048, secret_offset=0, guess_offset=1024, prefix=b"cookie=")
    target = FakeTarget(match_latency(layout, len(secret)), secret=secret, prefix=b"cookie=")
    cfg = AttackConfig(layout=layout, reps_min=3, reps_max=10, seed=seed)
    tr = bytewise_attack(target, b"cookie=", GuessCharset(), len(secret), cfg)
    assert tr.recovered == secret
    assert tr.requests_used <= len(secret) * cfg.branch_limit * len(DEFAULT_CHARSET) * cfg.reps_max
    assert not any(f.startswith("AMBIGUOUS") for f in tr.flags)


def test_bytewise_ambiguity_keeps_top_candidates():
    target = FakeTarget(lambda data: 100.0, secret=b"XY")
    cfg = AttackConfig(layout=LAYOUT, reps_min=2, reps_max=4, top_k=2, branch_limit=4)
    tr = bytewise_attack(target, b"key", GuessCharset(b"XYZ"), 2, cfg)
    assert {"AMBIGUOUS@0", "AMBIGUOUS@1"} <= tr.flags
    assert 1 <= len(tr.candidates) <= 4


def test_bytewise_edge_cases():
    tr = bytewise_attack(FakeTarget(lambda d: 1.0), b"cookie=", GuessCharset(), 0, AttackConfig(layout=LAYOUT))
    assert tr.recovered == b"" and tr.requests_used == 0
    with pytest.raises(ValueError):
        bytewise_attack(FakeTarget(lambda d: 1.0), b"ab", GuessCharset(), 4, AttackConfig(layout=LAYOUT))


def policy_latency(data: bytes) -> float:
    # values the policy keeps compressed pay for decompression on every read
    blob = store_with_policy(MEMCACHED_POLICY, CodecId.DEFLATE, 6, data)
    return 1000.0 if blob.stored_raw else 30000.0


@pytest.mark.parametrize("offset", [-20, 0, 25])
def test_edge_search_recovers_despite_misplaced_runs(offset):
    secret = b"K7Q2ZD"
    layouts = [replace(l, prepend_compressible_len=l.prepend_compressible_len + offset)
               for l in load_layouts("kv-bytewise")]
    target = FakeTarget(policy_latency, noise=lambda r: r.gauss(0, 50), secret=secret, prefix=b"cookie=")
    cfg = AttackConfig(polarity=Polarity.CORRECT_SLOWEST, layout=layouts, reps_min=5, reps_max=20,
                       edge_search=32, top_k=4)
    tr = bytewise_attack(target, b"cookie=", GuessCharset(), 6, cfg)
    assert tr.recovered == secret
    assert len(tr.edges) == 6 and not any(f.startswith("NO_EDGE") for f in tr.flags)


def test_edge_search_without_contrast_keeps_layout():
    cfg = AttackConfig(layout=LAYOUT, reps_min=2, reps_max=4, edge_search=8, edge_reps=3)
    tr = bytewise_attack(FakeTarget(lambda d: 100.0, secret=b"XY"), b"key", GuessCharset(b"XYZ"), 1, cfg)
    assert "NO_EDGE@0" in tr.flags and not tr.edges


def test_transport_error_carries_partial_transcript():
    class Flaky(FakeTarget):
        def fetch(self, key):
            if self.requests >= 7:
                raise ConnectionResetError("gone")
            return super().fetch(key)

    with pytest.raises(TransportError) as ei:
        dictionary_attack(Flaky(lambda d: 1.0), [b"AAAAAA", b"BBBBBB"], AttackConfig(layout=LAYOUT))
    assert ei.value.transcript is not None and ei.value.transcript.requests_used == 7


def test_transcript_serialises():
    import csv
    import io
    import json
    secret = b"QQQQQQ"
    tr = dictionary_attack(FakeTarget(match_latency(LAYOUT, 6), secret=secret), [secret, b"WWWWWW"],
                           AttackConfig(layout=LAYOUT))
    d = json.loads(tr.to_json())
    assert d["recovered"] == "QQQQQQ" and d["requests_used"] == tr.requests_used
    buf = io.StringIO()
    tr.write_csv(buf)
    rows = list(csv.DictReader(io.StringIO(buf.getvalue())))
    assert {r["symbol"] for r in rows if r["chosen"] == "1"} == {"QQQQQQ"}


def test_local_target_deflate_layout_leaks():
    # low-entropy filler: a correct guess within the window collapses into one back-reference
    layout = LayoutConfig(seed=3, total_size=4096, secret_offset=0, guess_offset=512, compression_level=1,
                          entropy_modulus=2)
    target = LocalTarget(b"ZX81QP")
    ok = target.store("a", build_layout(layout, b"\0" * 6, b"ZX81QP"))
    no = target.store("b", build_layout(layout, b"\0" * 6, b"ABCDEF"))
    assert len(ok.payload) < len(no.payload)
    assert target.fetch("a") > 0


# -- early stopping --------------------------------------------------------------


REGIONS = ((90.0, 100.0), (110.0, 120.0))


def test_early_stop_at_reps_min():
    c = early_stop_classify(iter([95.0] * 1000), *REGIONS, reps_min=25, reps_max=200)
    assert (c.decision, c.requests, c.early) == (BitDecision.LOW, 25, True)
    c = early_stop_classify(iter([130.0] * 1000), *REGIONS)
    assert c.decision is BitDecision.HIGH and c.requests == 25


def test_critical_section_falls_back_to_majority():
    c = early_stop_classify(iter([104.0] * 1000), *REGIONS, reps_min=25, reps_max=200)
    assert (c.decision, c.requests, c.early) == (BitDecision.LOW, 200, False)
    assert majority([100.0, 110.0], 105.0).decision is BitDecision.UNDECIDED


def test_regions_must_be_ordered():
    with pytest.raises(ValueError):
        early_stop_classify([1.0], (5.0, 10.0), (9.0, 20.0))
    with pytest.raises(ValueError):
        early_stop_classify([1.0], None, (9.0, 20.0))


def fixed_sampling(stream, threshold, n):
    return majority(stream[:n], threshold).decision


@given(st.integers(0, 2**32), st.booleans())
@settings(max_examples=300, deadline=None)
def test_early_stop_never_worse_than_fixed_sampling(seed, high):
    # well separated classes: early stopping must agree with the fixed-budget vote
    rng = random.Random(seed)
    mu = 115.0 if high else 95.0
    stream = [rng.gauss(mu, 2.0) for _ in range(200)]
    cal = regions_from_samples([rng.gauss(95, 2) for _ in range(200)], [rng.gauss(115, 2) for _ in range(200)])
    early = early_stop_classify(stream, cal.low_region, cal.high_region, 25, 200)
    assert early.decision == fixed_sampling(stream, cal.threshold, 200)
    assert early.requests <= 200


def test_bimodal_overlap_error_rate():
    # two classes with heavy-tailed spikes that overlap: ~1% of single samples land on the wrong side
    rng = random.Random(7)

    def sample(mu):
        return mu + rng.gauss(0, 4.0) + (rng.expovariate(1 / 30) if rng.random() < 0.1 else 0.0)

    cal = regions_from_samples([sample(100) for _ in range(400)], [sample(120) for _ in range(400)])
    errors = 0
    trials = 10_000
    for i in range(trials):
        bit = i % 2
        c = early_stop_classify((sample(120 if bit else 100) for _ in range(200)), *cal, reps_min=25, reps_max=200)
        errors += c.decision is not (BitDecision.HIGH if bit else BitDecision.LOW)
    assert errors / trials < 0.02


def test_identical_probes_fail_calibration():
    target = FakeTarget(lambda d: 1000.0, noise=lambda r: r.gauss(0, 5), secret=b"AAAAAA")
    with pytest.raises(CalibrationError):
        calibrate(target, LAYOUT, b"AAAAAA", b"BBBBBB", reps=200)


def test_calibration_orients_to_correct_probe():
    secret = b"AAAAAA"
    fast = calibrate(FakeTarget(match_latency(LAYOUT, 6), noise=lambda r: r.gauss(0, 5), secret=secret),
                     LAYOUT, secret, b"BBBBBB", reps=200)
    assert fast.low_is_correct and fast.gap_ns == pytest.approx(600, abs=10)
    slow = calibrate(FakeTarget(match_latency(LAYOUT, 6, sign=+1), noise=lambda r: r.gauss(0, 5), secret=secret),
                     LAYOUT, secret, b"BBBBBB", reps=200)
    assert not slow.low_is_correct
    assert isinstance(slow, Calibration) and slow.threshold == pytest.approx(1300, abs=20)


def test_simulated_wan_calibration_with_subsampling():
    # 61.6 us mean gap, 1 ms gaussian jitter each way on a 14 ms path
    secret = b"AAAAAA"
    lat = match_latency(LAYOUT, 6, base=28e6, step=61.6e3 / 6, sign=+1)

    def target():
        return FakeTarget(lat, noise=lambda r: r.gauss(0, 1e6) + r.gauss(0, 1e6), seed=11, secret=secret)

    with pytest.raises(CalibrationError):
        calibrate(target(), LAYOUT, secret, b"BBBBBB", reps=2000)
    cal = calibrate(target(), LAYOUT, secret, b"BBBBBB", reps=100_000, subsample=10)
    assert not cal.low_is_correct
    assert cal.gap_ns == pytest.approx(61.6e3, rel=0.5)
