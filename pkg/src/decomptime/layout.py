"""Deterministic attack buffers built from a layout genome, plus its random/mutation operators."""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

MIN_SIZE = 1024
MAX_SIZE = 65536
RUN_BYTE = 0x00


class LayoutError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class LayoutConfig:
    seed: int = 0
    total_size: int = 4096
    secret_offset: int = 0
    guess_offset: int = 512
    guess_repetitions: int = 1
    guess_stride: int = 0  # 0 means back-to-back (one guess unit)
    compression_level: int = 6
    entropy_modulus: int = 256
    prepend_compressible_len: int = 0
    prefix: bytes = b""
    corpus_file: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prefix"] = self.prefix.decode("latin-1")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise LayoutError(sorted(unknown)[0], "unknown field")
        d = dict(d)
        if isinstance(d.get("prefix"), str):
            d["prefix"] = d["prefix"].encode("latin-1")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LayoutConfig":
        return cls.from_dict(json.loads(text))

    def stride_for(self, unit: int) -> int:
        return self.guess_stride or unit


@dataclass(frozen=True)
class BuiltLayout:
    data: bytes
    secret_span: range
    guess_spans: tuple[range, ...]
    client_start: int  # first byte of the attacker-controlled region

    def client_payload(self) -> bytes:
        """Bytes a client sends to a service that stores prefix+secret ahead of client data."""
        if self.secret_span.start != 0:
            raise LayoutError("secret_offset", "client payload needs the secret at offset 0")
        return self.data[self.secret_span.stop:]


_filler_cache: dict[tuple, bytes] = {}


def filler(config: LayoutConfig) -> bytes:
    """Background bytes; a prefix of one fixed stream per seed, so size changes only truncate."""
    key = (config.seed, config.entropy_modulus, config.corpus_file)
    full = _filler_cache.get(key)
    if full is None:
        if config.corpus_file:
            with open(config.corpus_file, "rb") as fh:
                src = fh.read()
            if not src:
                raise LayoutError("corpus_file", "empty corpus")
            raw = (src * (MAX_SIZE // len(src) + 1))[:MAX_SIZE]
        else:
            raw = random.Random(config.seed).randbytes(MAX_SIZE)
        full = raw.translate(bytes(i % config.entropy_modulus for i in range(256)))
        if len(_filler_cache) > 256:
            _filler_cache.clear()
        _filler_cache[key] = full
    return full[:config.total_size]


def _spans(config: LayoutConfig, unit: int) -> tuple[range, list[range]]:
    stride = config.stride_for(unit)
    secret = range(config.secret_offset, config.secret_offset + unit)
    guesses = [range(config.guess_offset + k * stride, config.guess_offset + k * stride + unit)
               for k in range(config.guess_repetitions)]
    return secret, guesses


def _overlap(a: range, b: range) -> bool:
    return a.start < b.stop and b.start < a.stop


def validate(config: LayoutConfig, unit: int) -> None:
    if not MIN_SIZE <= config.total_size <= MAX_SIZE:
        raise LayoutError("total_size", f"{config.total_size} outside [{MIN_SIZE}, {MAX_SIZE}]")
    if not 1 <= config.entropy_modulus <= 256:
        raise LayoutError("entropy_modulus", f"{config.entropy_modulus} outside [1, 256]")
    if config.guess_repetitions < 1:
        raise LayoutError("guess_repetitions", "must be >= 1")
    if config.prepend_compressible_len < 0:
        raise LayoutError("prepend_compressible_len", "must be >= 0")
    if config.guess_stride and config.guess_stride < unit:
        raise LayoutError("guess_stride", f"{config.guess_stride} smaller than the guess unit {unit}")
    if config.secret_offset < 0 or config.secret_offset + unit > config.total_size:
        raise LayoutError("secret_offset", "secret span does not fit")
    secret, guesses = _spans(config, unit)
    if config.guess_offset < 0 or guesses[-1].stop > config.total_size:
        raise LayoutError("guess_offset", "guess repetitions do not fit")
    for g in guesses:
        if _overlap(g, secret):
            raise LayoutError("guess_offset", "a guess repetition overlaps the secret")


def build_layout(config: LayoutConfig, secret: bytes, guess: bytes) -> BuiltLayout:
    """Filler with prefix+secret at the secret span and prefix+guess in every guess span.

    A shorter guess (bytewise mode) keeps the filler behind it, so every guess
    gives a buffer of the same length. The constant run of
    ``prepend_compressible_len`` bytes leads the attacker-controlled region:
    the buffer start normally, or right behind the secret when the secret
    comes first.
    """
    if len(guess) > len(secret):
        raise LayoutError("guess", "guess longer than the secret")
    unit = len(config.prefix) + len(secret)
    if unit == 0:
        raise LayoutError("prefix", "empty secret unit")
    validate(config, unit)
    body = bytearray(filler(config))
    secret_span, guess_spans = _spans(config, unit)
    body[secret_span.start:secret_span.stop] = config.prefix + secret
    g = config.prefix + guess
    for span in guess_spans:
        body[span.start:span.start + len(g)] = g
    run = bytes([RUN_BYTE]) * config.prepend_compressible_len
    p = len(run)
    if config.secret_offset == 0:
        at = secret_span.stop
    else:
        at = 0
    data = bytes(body[:at]) + run + bytes(body[at:])

    def shift(r: range) -> range:
        return range(r.start + p, r.stop + p) if r.start >= at else r

    return BuiltLayout(data, shift(secret_span), tuple(shift(s) for s in guess_spans), at)


def bundled_layouts() -> list[str]:
    """Names of the layouts shipped with the package."""
    root = resources.files(__package__) / "layouts"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_layouts(source: str) -> list[LayoutConfig]:
    """Read a layout JSON, a fuzzer best.json, or a list of either (one per secret position).

    ``source`` is a path, or the name of a bundled layout when no such file exists.
    """
    path = Path(source)
    if path.exists():
        text = path.read_text()
        base = path.parent
    elif source in bundled_layouts():
        base = resources.files(__package__) / "layouts"
        text = (base / f"{source}.json").read_text()
    else:
        raise FileNotFoundError(source)
    doc = json.loads(text)
    items = doc if isinstance(doc, list) else [doc]
    out = []
    for d in items:
        cfg = LayoutConfig.from_dict(d["config"] if "config" in d else d)
        if cfg.corpus_file and not Path(cfg.corpus_file).is_absolute():
            # corpus paths are relative to the layout file
            cfg = replace(cfg, corpus_file=str(Path(str(base)) / cfg.corpus_file))
        out.append(cfg)
    return out


@dataclass(frozen=True)
class LayoutBounds:
    unit_len: int
    size_min: int = MIN_SIZE
    size_max: int = MAX_SIZE
    level_min: int = 1
    level_max: int = 9
    modulus_min: int = 1
    modulus_max: int = 256
    reps_max: int = 64
    stride_max: int = 0  # 0: up to 4x the unit
    prepend_max: int = 0
    secret_offset: int | None = None  # fixed offset, or None to sample
    prefix: bytes = b""

    def __post_init__(self):
        if not MIN_SIZE <= self.size_min <= self.size_max <= MAX_SIZE:
            raise ValueError("size bounds outside [1024, 65536]")
        if self.unit_len < 1 or 2 * self.unit_len > self.size_min:
            raise ValueError("unit_len must be >= 1 and leave room for a guess")
        if not 1 <= self.modulus_min <= self.modulus_max <= 256:
            raise ValueError("modulus bounds outside [1, 256]")
        if self.level_min > self.level_max or self.reps_max < 1 or self.prepend_max < 0:
            raise ValueError("invalid bounds")

    @property
    def stride_hi(self) -> int:
        return max(self.unit_len, self.stride_max or 4 * self.unit_len)


def repair(config: LayoutConfig, bounds: LayoutBounds) -> LayoutConfig:
    """Clamp every field into bounds and move guesses so all spans fit without overlap."""
    unit = bounds.unit_len
    size = min(max(config.total_size, bounds.size_min), bounds.size_max)
    level = min(max(config.compression_level, bounds.level_min), bounds.level_max)
    modulus = min(max(config.entropy_modulus, bounds.modulus_min), bounds.modulus_max)
    prepend = min(max(config.prepend_compressible_len, 0), bounds.prepend_max)
    stride = config.guess_stride
    if stride:
        stride = min(max(stride, unit), bounds.stride_hi)
    pitch = stride or unit
    if bounds.secret_offset is not None:
        soff = bounds.secret_offset
    else:
        soff = config.secret_offset
    soff = min(max(soff, 0), size - unit)
    reps = min(max(config.guess_repetitions, 1), bounds.reps_max)
    goff = max(config.guess_offset, 0)
    while True:
        span = (reps - 1) * pitch + unit
        if span > size - unit and reps > 1:
            reps -= 1
            continue
        goff = min(goff, size - span)
        fixed = _place(goff, reps, pitch, unit, soff, size)
        if fixed is not None:
            goff = fixed
            break
        if reps == 1:
            # a single unit always fits on one side of the secret
            goff = soff + unit if soff + 2 * unit <= size else soff - unit
            break
        reps -= 1
    return replace(config, total_size=size, compression_level=level, entropy_modulus=modulus,
                   prepend_compressible_len=prepend, guess_stride=stride, secret_offset=soff,
                   guess_repetitions=reps, guess_offset=goff, prefix=bounds.prefix)


def _place(goff: int, reps: int, pitch: int, unit: int, soff: int, size: int) -> int | None:
    """Smallest shift of the guess block (forward, then backward) that clears the secret."""
    span = (reps - 1) * pitch + unit

    def clear(g: int) -> bool:
        if g < 0 or g + span > size:
            return False
        for k in range(reps):
            s = g + k * pitch
            if s < soff + unit and soff < s + unit:
                return False
        return True

    if clear(goff):
        return goff
    # candidate positions are where some repetition starts right after / ends right before the secret
    cands = set()
    for k in range(reps):
        cands.add(soff + unit - k * pitch)
        cands.add(soff - unit - k * pitch)
    for g in sorted(cands, key=lambda g: (abs(g - goff), g)):
        if clear(g):
            return g
    return None


def random_config(rng: random.Random, bounds: LayoutBounds) -> LayoutConfig:
    unit = bounds.unit_len
    size = rng.randint(bounds.size_min, bounds.size_max)
    reps = rng.randint(1, bounds.reps_max)
    stride = rng.randint(unit, bounds.stride_hi)
    soff = bounds.secret_offset if bounds.secret_offset is not None else rng.randint(0, size - unit)
    cfg = LayoutConfig(
        seed=rng.getrandbits(64),
        total_size=size,
        secret_offset=soff,
        guess_offset=rng.randint(0, size - unit),
        guess_repetitions=reps,
        guess_stride=stride,
        compression_level=rng.randint(bounds.level_min, bounds.level_max),
        entropy_modulus=rng.randint(bounds.modulus_min, bounds.modulus_max),
        prepend_compressible_len=rng.randint(0, bounds.prepend_max),
        prefix=bounds.prefix,
    )
    return repair(cfg, bounds)


MUTABLE_FIELDS = ("total_size", "entropy_modulus", "guess_repetitions", "guess_offset", "guess_stride",
                  "secret_offset", "compression_level", "prepend_compressible_len", "seed")


def _nudge(rng: random.Random, value: int, lo: int, hi: int) -> int:
    """A fresh uniform draw, a medium step or a few-unit step, so search works globally and locally."""
    if hi <= lo:
        return lo
    u = rng.random()
    if u < 0.4:
        return rng.randint(lo, hi)
    span = max(1, (hi - lo) // 16) if u < 0.7 else 8
    step = rng.randint(1, span) * rng.choice((-1, 1))
    return min(max(value + step, lo), hi)


def mutate(config: LayoutConfig, rng: random.Random, bounds: LayoutBounds) -> LayoutConfig:
    unit = bounds.unit_len
    fixed_secret = bounds.secret_offset is not None
    choices = [f for f in MUTABLE_FIELDS if not (f == "secret_offset" and fixed_secret)]
    if bounds.level_min == bounds.level_max:
        choices.remove("compression_level")
    if bounds.prepend_max == 0:
        choices.remove("prepend_compressible_len")
    if bounds.modulus_min == bounds.modulus_max:
        choices.remove("entropy_modulus")
    if bounds.size_min == bounds.size_max:
        choices.remove("total_size")
    for _ in range(10):
        picked = rng.sample(choices, rng.randint(1, min(3, len(choices))))
        changes = {}
        for name in picked:
            v = getattr(config, name)
            if name == "seed":
                changes[name] = rng.getrandbits(64)
            elif name == "total_size":
                changes[name] = _nudge(rng, v, bounds.size_min, bounds.size_max)
            elif name == "entropy_modulus":
                changes[name] = _nudge(rng, v, bounds.modulus_min, bounds.modulus_max)
            elif name == "guess_repetitions":
                changes[name] = _nudge(rng, v, 1, bounds.reps_max)
            elif name == "guess_offset":
                changes[name] = _nudge(rng, v, 0, config.total_size - unit)
            elif name == "guess_stride":
                changes[name] = _nudge(rng, v or unit, unit, bounds.stride_hi)
            elif name == "secret_offset":
                changes[name] = _nudge(rng, v, 0, config.total_size - unit)
            elif name == "compression_level":
                changes[name] = _nudge(rng, v, bounds.level_min, bounds.level_max)
            elif name == "prepend_compressible_len":
                changes[name] = _nudge(rng, v, 0, bounds.prepend_max)
        out = repair(replace(config, **changes), bounds)
        if out != config:
            return out
    # every draw collapsed back onto the input (tiny bounds); a new seed always differs
    return replace(config, seed=(config.seed + 1) % 2**64)
