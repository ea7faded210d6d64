"""Mock victims speaking a minimal SET/GET text protocol, and a client for them.

Requests:  ``SET <key> <len>\\n`` + bytes, ``GET <key>\\n``
Responses: ``OK\\n``, ``VALUE <len>\\n`` + bytes, ``ERR <reason>\\n``
"""

from __future__ import annotations

import enum
import os
import socket
import socketserver
import threading
from dataclasses import dataclass, field

from .codecs import (AcceptancePolicy, CodecId, CompressedBlob, MEMCACHED_POLICY, PGLZ_POLICY, decoder,
                     default_level, store_with_policy)
from .timing import Aggregator, now_ns

ENDPOINT_ENV = "DECOMPTIME_ENDPOINT"
DEFAULT_ENDPOINT = "127.0.0.1:7171"
MAX_KEY = 64
MAX_VALUE = 1 << 20


class ServiceError(RuntimeError):
    """The service answered with ERR."""


class Flavor(enum.Enum):
    KV_MEMCACHED = "kv"
    CELL_PGLZ = "pglz"


@dataclass(frozen=True)
class ServiceConfig:
    flavor: Flavor = Flavor.KV_MEMCACHED
    codec: CodecId | None = None
    level: int | None = None
    policy: AcceptancePolicy | None = None
    secret: bytes = b""
    secret_prefix: bytes = b""
    colocate: bool = True
    decompress: bool = True  # False: debug build that skips decompression on GET

    def resolved(self) -> "ServiceConfig":
        codec = self.codec or (CodecId.PGLZ if self.flavor is Flavor.CELL_PGLZ else CodecId.DEFLATE)
        policy = self.policy or (PGLZ_POLICY if self.flavor is Flavor.CELL_PGLZ else MEMCACHED_POLICY)
        level = self.level if self.level is not None else default_level(codec)
        return ServiceConfig(self.flavor, codec, level, policy, self.secret, self.secret_prefix,
                             self.colocate, self.decompress)

    def to_dict(self) -> dict:
        r = self.resolved()
        return {"flavor": r.flavor.name, "codec": r.codec.name, "level": r.level,
                "policy": {"size_threshold": r.policy.size_threshold,
                           "compression_factor": r.policy.compression_factor,
                           "min_savings_fraction": r.policy.min_savings_fraction},
                "secret_len": len(r.secret), "secret_prefix": r.secret_prefix.decode("latin-1"),
                "colocate": r.colocate, "decompress": r.decompress}


@dataclass
class _Cell:
    blob: CompressedBlob
    client_start: int
    decode: object
    raw_client: bytes
    lock: threading.Lock = field(default_factory=threading.Lock)


def parse_endpoint(text: str | None = None) -> tuple[str, int]:
    text = text or os.environ.get(ENDPOINT_ENV) or DEFAULT_ENDPOINT
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def valid_key(key: str) -> bool:
    return 0 < len(key) <= MAX_KEY and key.isascii() and not any(c.isspace() for c in key)


class VictimStore:
    """Storage semantics of the service, usable without sockets."""

    def __init__(self, config: ServiceConfig):
        self.config = config.resolved()
        self._cells: dict[str, _Cell] = {}
        self._table_lock = threading.Lock()

    def region(self) -> bytes:
        c = self.config
        return c.secret_prefix + c.secret if c.colocate else b""

    def set(self, key: str, data: bytes) -> CompressedBlob:
        c = self.config
        region = self.region()
        blob = store_with_policy(c.policy, c.codec, c.level, region + data)
        cell = _Cell(blob, len(region), decoder(blob), bytes(data))
        with self._table_lock:
            old = self._cells.get(key)
        if old is not None:
            with old.lock:
                with self._table_lock:
                    self._cells[key] = cell
        else:
            with self._table_lock:
                self._cells[key] = cell
        return blob

    def get(self, key: str) -> bytes | None:
        with self._table_lock:
            cell = self._cells.get(key)
        if cell is None:
            return None
        with cell.lock:
            if not self.config.decompress:
                return cell.raw_client
            out = cell.decode()
        # only the client's bytes leave the service
        return out[cell.client_start:]

    def blob(self, key: str) -> CompressedBlob | None:
        cell = self._cells.get(key)
        return cell.blob if cell else None


class _Handler(socketserver.StreamRequestHandler):
    def setup(self):
        super().setup()
        if self.connection.family in (socket.AF_INET, socket.AF_INET6):
            self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def handle(self):
        store: VictimStore = self.server.store
        rfile, sock = self.rfile, self.connection
        while True:
            line = rfile.readline(MAX_KEY + 64)
            if not line:
                return
            if not line.endswith(b"\n"):
                sock.sendall(b"ERR line too long\n")
                return
            parts = line.split()
            if not parts:
                sock.sendall(b"ERR empty command\n")
                continue
            cmd = parts[0]
            if cmd == b"GET" and len(parts) == 2:
                key = parts[1].decode("latin-1")
                if not valid_key(key):
                    sock.sendall(b"ERR bad key\n")
                    continue
                value = store.get(key)
                if value is None:
                    sock.sendall(b"ERR not found\n")
                else:
                    sock.sendall(b"VALUE %d\n" % len(value) + value)
            elif cmd == b"SET" and len(parts) == 3:
                key = parts[1].decode("latin-1")
                try:
                    n = int(parts[2])
                except ValueError:
                    sock.sendall(b"ERR bad length\n")
                    continue
                if not 0 < n <= MAX_VALUE:
                    sock.sendall(b"ERR bad length\n")
                    return  # the payload that follows cannot be skipped safely
                data = rfile.read(n)
                if len(data) != n:
                    return
                if not valid_key(key):
                    sock.sendall(b"ERR bad key\n")
                    continue
                try:
                    store.set(key, data)
                except Exception as exc:  # codec failure: report, keep serving
                    sock.sendall(f"ERR store failed: {type(exc).__name__}\n".encode())
                    continue
                sock.sendall(b"OK\n")
            else:
                sock.sendall(b"ERR unknown command\n")


class VictimServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, config: ServiceConfig, endpoint: tuple[str, int] = ("127.0.0.1", 0)):
        self.store = VictimStore(config)
        super().__init__(endpoint, _Handler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "VictimServer":
        threading.Thread(target=self.serve_forever, name="victim", daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def serve(config: ServiceConfig, endpoint: str | tuple[str, int] | None = None) -> VictimServer:
    """Start a service in a background thread; ``stop()`` it when done."""
    if not isinstance(endpoint, tuple):
        endpoint = parse_endpoint(endpoint)
    return VictimServer(config, endpoint).start()


class ServiceClient:
    """Blocking client; one request in flight at a time."""

    def __init__(self, endpoint: str | tuple[str, int] | None = None, timeout: float = 30.0):
        if not isinstance(endpoint, tuple):
            endpoint = parse_endpoint(endpoint)
        self.endpoint = endpoint
        self.sock = socket.create_connection(endpoint, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.rfile = self.sock.makefile("rb")

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _line(self) -> bytes:
        line = self.rfile.readline()
        if not line:
            raise ConnectionError("service closed the connection")
        return line

    def set(self, key: str, data: bytes) -> None:
        self.sock.sendall(b"SET %s %d\n" % (key.encode("latin-1"), len(data)) + bytes(data))
        line = self._line()
        if line != b"OK\n":
            raise ServiceError(line.decode("latin-1").strip())

    def _read_value(self) -> bytes:
        line = self._line()
        if line.startswith(b"VALUE "):
            n = int(line[6:])
            data = self.rfile.read(n)
            if len(data) != n:
                raise ConnectionError("truncated value")
            return data
        raise ServiceError(line.decode("latin-1").strip())

    def get(self, key: str) -> bytes:
        self.sock.sendall(b"GET %s\n" % key.encode("latin-1"))
        return self._read_value()

    def timed_get(self, key: str) -> tuple[int, bytes]:
        """Round-trip time in ns from sending the request to holding the full value."""
        req = b"GET %s\n" % key.encode("latin-1")
        t0 = now_ns()
        self.sock.sendall(req)
        data = self._read_value()
        return now_ns() - t0, data


class ServiceTarget:
    """Attack target backed by a running service; the service prepends the secret itself.

    Medians by default: network outliers are one-sided but bursty.
    """

    def __init__(self, client: ServiceClient, statistic: Aggregator = Aggregator.MEDIAN):
        self.client = client
        self.statistic = statistic

    def store(self, key: str, built, level: int | None = None) -> None:
        self.client.set(key, built.client_payload())

    def fetch(self, key: str) -> int:
        return self.client.timed_get(key)[0]
