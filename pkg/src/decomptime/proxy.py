"""TCP forwarder that delays every message to simulate a multi-hop WAN path."""

from __future__ import annotations

import queue
import random
import socket
import threading
import time
from dataclasses import dataclass

_CLOSE = object()


@dataclass(frozen=True)
class ProxyConfig:
    base_delay_ms: float = 1.0
    jitter_stddev_ms: float = 0.0
    hops: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.base_delay_ms < 0 or self.jitter_stddev_ms < 0 or self.hops < 0:
            raise ValueError("delays and hops must be non-negative")

    def delay_s(self, rng: random.Random) -> float:
        d = self.base_delay_ms * self.hops
        if self.jitter_stddev_ms:
            d += rng.gauss(0.0, self.jitter_stddev_ms)
        return max(d, 0.0) / 1000.0

    def delays(self, n: int, stream: int = 0) -> list[float]:
        """The first ``n`` delays (seconds) of a replayable stream."""
        rng = random.Random(f"{self.seed}:{stream}")
        return [self.delay_s(rng) for _ in range(n)]


def _sleep_until(deadline: float) -> None:
    # plain sleep: spinning would steal the CPU from the upstream on small machines
    left = deadline - time.perf_counter()
    if left > 0:
        time.sleep(left)


class _Pipe:
    """One direction of a connection: messages keep their order, each one is held for its delay."""

    def __init__(self, src: socket.socket, dst: socket.socket, config: ProxyConfig, stream: int):
        self.src, self.dst = src, dst
        self.config = config
        self.rng = random.Random(f"{config.seed}:{stream}")
        self.q: queue.Queue = queue.Queue()
        self.threads = [threading.Thread(target=self._read, daemon=True),
                        threading.Thread(target=self._write, daemon=True)]

    def start(self) -> None:
        for t in self.threads:
            t.start()

    def _read(self) -> None:
        last = 0.0
        try:
            while True:
                data = self.src.recv(65536)
                if not data:
                    break
                due = max(time.perf_counter() + self.config.delay_s(self.rng), last)
                last = due
                self.q.put((due, data))
        except OSError:
            pass
        self.q.put((last, _CLOSE))

    def _write(self) -> None:
        try:
            while True:
                due, data = self.q.get()
                _sleep_until(due)
                if data is _CLOSE:
                    break
                self.dst.sendall(data)
        except OSError:
            pass
        for s in (self.dst, self.src):
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class LatencyProxy:
    def __init__(self, config: ProxyConfig, upstream: tuple[str, int], listen: tuple[str, int] = ("127.0.0.1", 0)):
        self.config = config
        self.upstream = upstream
        self.sock = socket.create_server(listen)
        self._conns = 0
        self._stop = threading.Event()

    @property
    def endpoint(self) -> str:
        host, port = self.sock.getsockname()[:2]
        return f"{host}:{port}"

    def start(self) -> "LatencyProxy":
        threading.Thread(target=self._accept, name="proxy", daemon=True).start()
        return self

    def _accept(self) -> None:
        while not self._stop.is_set():
            try:
                client, _ = self.sock.accept()
            except OSError:
                return
            try:
                up = socket.create_connection(self.upstream, timeout=10)
            except OSError:
                client.close()  # upstream down: the client sees the connection drop
                continue
            up.settimeout(None)
            for s in (client, up):
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            n = self._conns
            self._conns += 1
            _Pipe(client, up, self.config, 2 * n).start()
            _Pipe(up, client, self.config, 2 * n + 1).start()

    def stop(self) -> None:
        self._stop.set()
        self.sock.close()


def proxy(config: ProxyConfig, upstream: tuple[str, int], listen: tuple[str, int] = ("127.0.0.1", 0)) -> LatencyProxy:
    return LatencyProxy(config, upstream, listen).start()
