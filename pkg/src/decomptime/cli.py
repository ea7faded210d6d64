"""Command-line entrypoint.

Exit codes: 0 success, 1 contract error, 2 transport error, 64 usage error.
Every run writes ``manifest.json`` plus its artifacts under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import random
import signal
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import attack as atk
from . import covert
from .codecs import AcceptancePolicy, CodecError, CodecId, MEMCACHED_POLICY, PGLZ_POLICY, default_level
from .fuzzer import EvolutionParams, LimitSeeker, Polarity, default_bounds, evolve
from .layout import LayoutConfig, LayoutError, bundled_layouts, load_layouts
from .proxy import ProxyConfig, proxy
from .service import Flavor, ServiceClient, ServiceConfig, ServiceTarget, parse_endpoint, serve
from .timing import Aggregator, MeasurementPlan, characterize, timer_descriptor, write_characterization_csv

EXIT_OK, EXIT_CONTRACT, EXIT_TRANSPORT, EXIT_USAGE = 0, 1, 2, 64

log = logging.getLogger("decomptime")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    machine: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)

    @staticmethod
    def machine_descriptor() -> dict:
        affinity = sorted(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else None
        return {
            "platform": platform.platform(),
            "python": platform.python_version(),
            "cpu_count": os.cpu_count(),
            "core_pinned": affinity is not None and len(affinity) == 1,
            "affinity": affinity,
            **timer_descriptor(),
        }

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        path.write_text(json.dumps({"subcommand": self.subcommand, "config": self.config,
                                    "machine": self.machine, "artifacts": self.artifacts}, indent=2))
        return path


def _policy(name: str) -> AcceptancePolicy | None:
    return {"none": None, "memcached": MEMCACHED_POLICY, "pglz": PGLZ_POLICY}[name]


def _read_secret(args) -> bytes:
    if getattr(args, "secret_file", None):
        return Path(args.secret_file).read_bytes().strip()
    if getattr(args, "secret", None):
        return args.secret.encode("latin-1")
    raise ValueError("a secret is required (--secret or --secret-file)")


def _random_guesses(secret: bytes, n: int, charset: bytes, seed: int) -> list[bytes]:
    rng = random.Random(seed)
    out = {secret}
    while len(out) < n:
        out.add(bytes(rng.choice(charset) for _ in range(len(secret))))
    guesses = sorted(out)
    rng.shuffle(guesses)
    return guesses


def _guesses(args, secret_len: int | None, secret: bytes | None) -> list[bytes]:
    if args.guesses_file:
        return [ln.encode("latin-1") for ln in Path(args.guesses_file).read_text().split() if ln]
    if secret is None:
        raise ValueError("--guesses-file is required without a known secret")
    return _random_guesses(secret, args.n_guesses, args.charset.encode("latin-1"), args.seed)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------


def cmd_characterize(args) -> dict:
    codec = CodecId.parse(args.codec)
    level = args.level if args.level is not None else default_level(codec)
    plan = MeasurementPlan(args.iters, args.warmup, Aggregator(args.aggregator))
    table = characterize(codec, level, plan, seed=args.seed)
    out = _out(args)
    path = out / "characterize.csv"
    with path.open("w", newline="") as f:
        write_characterization_csv(f, codec, level, table)
    sys.stdout.write(path.read_text())
    return {"artifacts": [str(path)]}


def cmd_fuzz(args) -> dict:
    codec = CodecId.parse(args.codec)
    secret = _read_secret(args)
    guesses = _guesses(args, len(secret), secret)
    policy = _policy(args.policy) if args.policy else (PGLZ_POLICY if codec is CodecId.PGLZ else None)
    params = EvolutionParams(epochs=args.epochs, population=args.population, fitness_iterations=args.fitness_iters,
                             polarity=Polarity[args.polarity])
    overrides = {"prefix": args.prefix.encode("latin-1")}
    if args.secret_offset is not None:
        overrides["secret_offset"] = args.secret_offset
    if args.prepend_max:
        overrides["prepend_max"] = args.prepend_max
    if args.size_max:
        overrides["size_max"] = args.size_max
    bounds = default_bounds(codec, len(args.prefix) + len(secret), **overrides)
    out = _out(args)
    ranked = evolve(params, codec, secret, guesses, random.Random(args.seed), bounds, policy,
                    checkpoint_dir=out, resume=not args.no_resume)
    best = ranked[0] if ranked else None
    if best is not None:
        print(json.dumps({"fitness_ns": best.fitness_ns, "polarity": best.polarity_observed.name,
                          "config": best.config.to_dict()}))
    else:
        print(json.dumps({"fitness_ns": 0.0, "polarity": "NEITHER", "config": None}))
    return {"artifacts": [str(out / "checkpoint.json"), str(out / "best.json")]}


def _target(args, secret_len: int | None = None):
    statistic = Aggregator(args.statistic) if args.statistic else None
    if args.local:
        codec = CodecId.parse(args.codec)
        policy = _policy(args.policy) if args.policy else None
        t = atk.LocalTarget(_read_secret(args), codec, args.level, policy, prefix=args.prefix.encode("latin-1"))
        return t, statistic
    client = ServiceClient(args.target)
    return ServiceTarget(client, statistic or Aggregator.MEDIAN), statistic


def _attack_config(args, mode: atk.Mode) -> atk.AttackConfig:
    layouts = load_layouts(args.layout)
    reps_max = args.reps_max
    if reps_max is None:
        reps_max = 100 if mode is atk.Mode.BYTEWISE and not args.local else 200
    return atk.AttackConfig(mode=mode, polarity=Polarity[args.polarity], reps_min=args.reps_min,
                            reps_max=reps_max, layout=layouts if len(layouts) > 1 else layouts[0],
                            shift_mode=getattr(args, "shift_mode", False), seed=args.seed,
                            edge_search=getattr(args, "edge_search", 0), top_k=getattr(args, "top_k", 2),
                            statistic=Aggregator(args.statistic) if args.statistic else None)


def _write_transcript(out: Path, tr: atk.AttackTranscript) -> list[str]:
    jp, cp = out / "transcript.json", out / "transcript.csv"
    jp.write_text(tr.to_json())
    with cp.open("w", newline="") as f:
        tr.write_csv(f)
    return [str(jp), str(cp)]


def cmd_attack_dict(args) -> dict:
    config = _attack_config(args, atk.Mode.DICTIONARY)
    secret = _read_secret(args) if args.local else None
    guesses = _guesses(args, None, secret)
    target, _ = _target(args)
    tr = atk.dictionary_attack(target, guesses, config)
    print(tr.recovered.decode("latin-1"))
    if tr.flags:
        print("flags:", " ".join(sorted(tr.flags)), file=sys.stderr)
    return {"artifacts": _write_transcript(_out(args), tr)}


def cmd_attack_bytewise(args) -> dict:
    config = _attack_config(args, atk.Mode.BYTEWISE)
    target, _ = _target(args)
    charset = atk.GuessCharset(args.charset.encode("latin-1"))
    tr = atk.bytewise_attack(target, args.prefix.encode("latin-1"), charset, args.len, config)
    print(tr.recovered.decode("latin-1"))
    if len(tr.candidates) > 1:
        print("candidates:", " ".join(c.decode("latin-1") for c in tr.candidates), file=sys.stderr)
    return {"artifacts": _write_transcript(_out(args), tr)}


def _bits(args) -> list[int]:
    if getattr(args, "bits_file", None):
        text = Path(args.bits_file).read_text()
        return [int(c) for c in text if c in "01"]
    n = args.random if getattr(args, "random", None) is not None else args.expect_random
    if n is None:
        raise ValueError("need --bits-file or --random N")
    rng = random.Random(args.seed)
    return [rng.getrandbits(1) for _ in range(n)]


def _encoding(args) -> covert.BitEncoding:
    return covert.BitEncoding.entropy(args.page_size, seed=args.seed + 1, partial=args.partial)


def _write_stats(out: Path, name: str, stats: covert.ChannelStats) -> str:
    path = out / name
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(covert.ChannelStats.CSV_COLUMNS)
        w.writerow(stats.csv_row())
    w = csv.writer(sys.stdout)
    w.writerow(covert.ChannelStats.CSV_COLUMNS)
    w.writerow(stats.csv_row())
    return str(path)


def cmd_covert_send(args) -> dict:
    bits = _bits(args)
    enc = _encoding(args)
    if args.pagestore:
        client = covert.PageClient(args.pagestore)
        stats = covert.send_pages(client, bits, enc)
    else:
        with ServiceClient(args.target) as client:
            stats = covert.send_bits(client, bits, enc)
    return {"artifacts": [_write_stats(_out(args), "send.csv", stats)]}


def cmd_covert_recv(args) -> dict:
    expected = _bits(args) if (args.bits_file or args.expect_random is not None) else None
    enc = _encoding(args)
    out = _out(args)
    if args.pagestore:
        client = covert.PageClient(args.pagestore)
        th = covert.calibrate_pages(client, enc, probes=args.calibrate, reps=args.reps)
        bits, stats = covert.receive_pages(client, args.n_bits, th, reps=args.reps, expected=expected,
                                             slot_s=1 / args.bit_rate if args.bit_rate else None)
    else:
        with ServiceClient(args.target) as client:
            cal = covert.calibrate_remote(client, enc, args.calibrate, args.reps_min)
            bits, stats = covert.receive_bits(client, args.n_bits, cal, args.reps_min, args.reps_max, expected)
    bp = out / "received.txt"
    bp.write_text("".join("?" if b is None else str(b) for b in bits) + "\n")
    return {"artifacts": [str(bp), _write_stats(out, "recv.csv", stats)]}


def _wait_forever(stop) -> None:
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *a: done.set())
    try:
        done.wait()
    except KeyboardInterrupt:
        pass
    stop()


def cmd_serve(args) -> dict:
    if args.flavor == "pages":
        store = covert.PageStore(CodecId.parse(args.codec or "deflate"), args.level)
        srv = covert.PageStoreServer(args.socket, store).start()
        print(f"page store on {args.socket}", flush=True)
        _wait_forever(srv.stop)
        return {"artifacts": []}
    if args.threshold is not None:
        if args.savings is not None:
            policy = AcceptancePolicy(args.threshold, min_savings_fraction=args.savings)
        else:
            policy = AcceptancePolicy(args.threshold, compression_factor=args.factor or 1.3)
    else:
        policy = None
    config = ServiceConfig(Flavor(args.flavor), CodecId.parse(args.codec) if args.codec else None, args.level,
                           policy, _read_secret(args), args.secret_prefix.encode("latin-1"),
                           not args.no_colocate, not args.no_decompress)
    srv = serve(config, args.endpoint)
    print(f"serving on {srv.endpoint}", flush=True)
    _wait_forever(srv.stop)
    return {"artifacts": [], "service": config.to_dict()}


def cmd_proxy(args) -> dict:
    cfg = ProxyConfig(args.base_ms, args.jitter_ms, args.hops, args.seed)
    p = proxy(cfg, parse_endpoint(args.upstream), parse_endpoint(args.listen))
    print(f"proxy on {p.endpoint} -> {args.upstream}", flush=True)
    _wait_forever(p.stop)
    return {"artifacts": []}


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="decomptime", description="Decompression timing side-channel toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_default):
        sp.add_argument("--out", default=out_default, help="artifact directory")
        sp.add_argument("--seed", type=int, default=0)

    def secret_args(sp):
        sp.add_argument("--secret")
        sp.add_argument("--secret-file")

    def guess_args(sp):
        sp.add_argument("--guesses-file", help="whitespace-separated guesses")
        sp.add_argument("--n-guesses", type=int, default=100, help="random guesses around a known secret")
        sp.add_argument("--charset", default=atk.DEFAULT_CHARSET.decode())

    def target_args(sp):
        sp.add_argument("--target", help="host:port of the victim service (default from $DECOMPTIME_ENDPOINT)")
        sp.add_argument("--local", action="store_true", help="attack an in-process victim instead")
        sp.add_argument("--codec", default="deflate")
        sp.add_argument("--level", type=int)
        sp.add_argument("--policy", choices=["none", "memcached", "pglz"])
        sp.add_argument("--layout", required=True, help="layout JSON, fuzzer best.json, a list of layouts, or one of: "
                        + ", ".join(bundled_layouts()))
        sp.add_argument("--polarity", choices=["CORRECT_FASTEST", "CORRECT_SLOWEST"], default="CORRECT_FASTEST")
        sp.add_argument("--reps-min", type=int, default=25)
        sp.add_argument("--reps-max", type=int, help="default 200; 100 for bytewise against a service")
        sp.add_argument("--statistic", choices=[a.value for a in Aggregator])
        secret_args(sp)

    sp = sub.add_parser("characterize", help="decompression time per entropy class, as CSV")
    sp.add_argument("--codec", default="deflate")
    sp.add_argument("--level", type=int)
    sp.add_argument("--iters", type=int, default=10000)
    sp.add_argument("--warmup", type=int, default=1000)
    sp.add_argument("--aggregator", choices=[a.value for a in Aggregator], default="min")
    common(sp, "runs/characterize")
    sp.set_defaults(func=cmd_characterize)

    sp = sub.add_parser("fuzz", help="evolve a layout maximizing the correct/incorrect gap")
    sp.add_argument("--codec", default="deflate")
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--population", type=int, default=1000)
    sp.add_argument("--fitness-iters", type=int, default=100)
    sp.add_argument("--polarity", choices=[p.name for p in Polarity if p is not Polarity.NEITHER], default="EITHER")
    sp.add_argument("--policy", choices=["none", "memcached", "pglz"])
    sp.add_argument("--prefix", default="")
    sp.add_argument("--secret-offset", type=int)
    sp.add_argument("--prepend-max", type=int, default=0)
    sp.add_argument("--size-max", type=int)
    sp.add_argument("--no-resume", action="store_true")
    secret_args(sp)
    guess_args(sp)
    sp.set_defaults(n_guesses=8)
    common(sp, "runs/fuzz")
    sp.set_defaults(func=cmd_fuzz)

    sp = sub.add_parser("attack-dict", help="pick the secret out of a guess list")
    target_args(sp)
    guess_args(sp)
    sp.add_argument("--prefix", default="")
    common(sp, "runs/attack-dict")
    sp.set_defaults(func=cmd_attack_dict)

    sp = sub.add_parser("attack-bytewise", help="recover a secret one byte at a time")
    target_args(sp)
    sp.add_argument("--prefix", required=True, help="known prefix, at least 3 bytes")
    sp.add_argument("--len", type=int, required=True)
    sp.add_argument("--charset", default=atk.DEFAULT_CHARSET.decode())
    sp.add_argument("--shift-mode", action="store_true")
    sp.add_argument("--edge-search", type=int, default=0, metavar="BYTES",
                    help="re-tune each position's run length within this many bytes (store-policy targets)")
    sp.add_argument("--top-k", type=int, default=2, help="symbols kept per ambiguous position")
    common(sp, "runs/attack-bytewise")
    sp.set_defaults(func=cmd_attack_bytewise)

    for name, helptext in (("covert-send", "transmit bits"), ("covert-recv", "receive bits")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--target", help="host:port of the victim service")
        sp.add_argument("--pagestore", help="Unix socket of a co-resident page store (local mode)")
        sp.add_argument("--bits-file")
        sp.add_argument("--page-size", type=int, default=4096)
        sp.add_argument("--partial", action="store_true", help="'1' page half random (for savings policies)")
        common(sp, f"runs/{name}")
        if name == "covert-send":
            sp.add_argument("--random", type=int, metavar="N", help="send N seeded random bits")
            sp.set_defaults(func=cmd_covert_send, expect_random=None)
        else:
            sp.add_argument("--n-bits", type=int, required=True)
            sp.add_argument("--calibrate", type=int, default=200, help="calibration probes (reps or pages)")
            sp.add_argument("--reps", type=int, default=50, help="reads per bit in local mode")
            sp.add_argument("--bit-rate", type=float, help="local mode: fixed bits per second, one time slot per bit")
            sp.add_argument("--reps-min", type=int, default=25)
            sp.add_argument("--reps-max", type=int, default=200)
            sp.add_argument("--expect-random", type=int, metavar="N", help="score against the sender's --random N")
            sp.set_defaults(func=cmd_covert_recv, random=None)

    sp = sub.add_parser("serve", help="run a mock victim service")
    sp.add_argument("--flavor", choices=[f.value for f in Flavor] + ["pages"], default="kv")
    sp.add_argument("--endpoint", help="host:port to listen on (default from $DECOMPTIME_ENDPOINT)")
    sp.add_argument("--socket", default="/tmp/decomptime-pages.sock", help="Unix socket for --flavor pages")
    sp.add_argument("--codec")
    sp.add_argument("--level", type=int)
    sp.add_argument("--threshold", type=int)
    sp.add_argument("--factor", type=float)
    sp.add_argument("--savings", type=float)
    sp.add_argument("--secret-prefix", default="")
    sp.add_argument("--no-colocate", action="store_true")
    sp.add_argument("--no-decompress", action="store_true", help="debug: skip decompression on GET")
    secret_args(sp)
    common(sp, "runs/serve")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("proxy", help="forward to a service with injected latency")
    sp.add_argument("--upstream", required=True)
    sp.add_argument("--listen", default="127.0.0.1:7272")
    sp.add_argument("--base-ms", type=float, default=1.0)
    sp.add_argument("--jitter-ms", type=float, default=0.0)
    sp.add_argument("--hops", type=int, default=1)
    common(sp, "runs/proxy")
    sp.set_defaults(func=cmd_proxy)
    return p


def _snapshot(args) -> dict:
    # the secret itself never lands in an artifact
    return {k: ("<redacted>" if k == "secret" and v else v) for k, v in vars(args).items() if k != "func"}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"decomptime: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    manifest = RunManifest(args.command, _snapshot(args), RunManifest.machine_descriptor())
    try:
        result = args.func(args)
        manifest.artifacts = result.get("artifacts", [])
        code = EXIT_OK
    except FileNotFoundError as exc:
        print(f"error: no such input: {exc}", file=sys.stderr)
        code = EXIT_CONTRACT
    except (atk.TransportError, OSError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        code = EXIT_TRANSPORT
    except (ValueError, KeyError, LayoutError, CodecError, atk.AttackError, covert.SendError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_CONTRACT
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.config["exit_code"] = code
    manifest.write(out)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
