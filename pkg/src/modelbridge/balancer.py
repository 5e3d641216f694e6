"""Load balancer that keeps at most one evaluation in flight per backend.

The balancer speaks the same HTTP interface as a model server, so a UQ
client cannot tell it apart from a single server. Evaluation requests wait
in one FIFO queue; the head of the queue is handed the longest-idle healthy
backend. Metadata queries (``/Info``, sizes, ``/ModelInfo``) are proxied to
the first healthy backend without taking a slot.
"""

from __future__ import annotations

import bisect
import collections
import http.client
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http.server import ThreadingHTTPServer

from .client import Connection
from .protocol import ErrorKind, Operation, ProtocolError, dumps
from .server import QuietHandler

logger = logging.getLogger(__name__)

_TRANSPORT_ERRORS = (OSError, http.client.HTTPException)
LATENCY_BUCKETS_MS = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000, 60000)
EVALUATION_ENDPOINTS = frozenset(op.value for op in Operation)


class BalancerError(Exception):
    """Startup failure: bad configuration or inconsistent backends."""


@dataclass
class BalancerConfig:
    backend_urls: list[str]
    listen_port: int = 0
    host: str = "127.0.0.1"
    retry_on_failure: bool = True
    max_retries_per_request: int | None = None  # default: pool size
    health_interval: float = 5.0
    health_timeout: float = 2.0
    failures_to_unhealthy: int = 2
    queue_capacity: int = 10_000
    record_dispatches: bool = False
    check_descriptors: bool = True

    def __post_init__(self):
        self.backend_urls = [u.rstrip("/") for u in self.backend_urls]
        if not self.backend_urls:
            raise BalancerError("backend list is empty")
        if len(set(self.backend_urls)) != len(self.backend_urls):
            raise BalancerError("backend URLs must be distinct")
        if self.max_retries_per_request is None:
            self.max_retries_per_request = len(self.backend_urls)


@dataclass
class Backend:
    url: str
    healthy: bool = True
    in_flight: int = 0
    completed: int = 0
    failed: int = 0
    dispatched: int = 0
    probe_failures: int = 0
    unhealthy_since: float | None = None
    conn: Connection = field(init=False, repr=False)

    def __post_init__(self):
        self.conn = Connection(self.url)

    def snapshot(self) -> dict:
        return {
            "url": self.url,
            "healthy": self.healthy,
            "in_flight": self.in_flight,
            "completed": self.completed,
            "failed": self.failed,
            "dispatched": self.dispatched,
            "unhealthy_since": self.unhealthy_since,
        }


class BackendPool:
    """Shared dispatch state. Every state change happens under one condition variable."""

    def __init__(self, urls, queue_capacity: int = 10_000, record_dispatches: bool = False):
        self.backends = [Backend(u) for u in urls]
        self.queue_capacity = queue_capacity
        self._cond = threading.Condition()
        self._waiting: collections.deque = collections.deque()
        self._idle: collections.deque = collections.deque(self.backends)  # longest idle first
        self._closed = False
        self.accepted = 0
        self.rejected = 0
        self.finished = 0
        self.latency_counts = [0] * (len(LATENCY_BUCKETS_MS) + 1)
        self.dispatch_log: list[tuple[float, int]] | None = [] if record_dispatches else None

    def index(self, backend: Backend) -> int:
        return self.backends.index(backend)

    def admit(self) -> object:
        """Register a new request in the queue; raises Unavailable past capacity."""
        with self._cond:
            if self._closed:
                raise ProtocolError(ErrorKind.UNAVAILABLE, "balancer is shutting down")
            if len(self._waiting) >= self.queue_capacity:
                self.rejected += 1
                raise ProtocolError(ErrorKind.UNAVAILABLE, "no backend available and queue is full")
            ticket = object()
            self._waiting.append(ticket)
            self.accepted += 1
            return ticket

    def _ready(self, ticket) -> Backend | None:
        if not self._waiting or self._waiting[0] is not ticket:
            return None
        for backend in self._idle:
            if backend.healthy:
                return backend
        return None

    def acquire(self, ticket, timeout: float | None = None) -> Backend:
        """Block until *ticket* is at the head of the queue and a healthy backend is idle."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                if self._closed:
                    self._drop(ticket)
                    raise ProtocolError(ErrorKind.UNAVAILABLE, "balancer is shutting down")
                backend = self._ready(ticket)
                if backend is not None:
                    break
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    self._drop(ticket)
                    raise ProtocolError(ErrorKind.UNAVAILABLE, "timed out waiting for a backend")
                self._cond.wait(remaining)
            self._waiting.popleft()
            self._idle.remove(backend)
            assert backend.in_flight == 0
            backend.in_flight = 1
            backend.dispatched += 1
            if self.dispatch_log is not None:
                self.dispatch_log.append((time.monotonic(), self.index(backend)))
            self._cond.notify_all()
            return backend

    def _drop(self, ticket) -> None:
        try:
            self._waiting.remove(ticket)
        except ValueError:
            pass
        self.finished += 1
        self._cond.notify_all()

    def release(self, backend: Backend, ok: bool, latency: float | None = None, requeue=None) -> None:
        """Return *backend* to the idle set.

        ``ok=False`` counts a backend failure and marks it unhealthy. With
        *requeue* set, that ticket goes back to the head of the queue in the
        same atomic step, so it keeps its place.
        """
        with self._cond:
            backend.in_flight = 0
            if ok:
                backend.completed += 1
            else:
                backend.failed += 1
                self._set_health(backend, False)
            self._idle.append(backend)
            if requeue is not None:
                self._waiting.appendleft(requeue)
            else:
                self.finished += 1
                if latency is not None:
                    ms = latency * 1000.0
                    self.latency_counts[bisect.bisect_left(LATENCY_BUCKETS_MS, ms)] += 1
            self._cond.notify_all()

    def _set_health(self, backend: Backend, healthy: bool) -> None:
        if backend.healthy and not healthy:
            backend.unhealthy_since = time.monotonic()
            logger.warning("backend %s marked unhealthy", backend.url)
        elif healthy and not backend.healthy:
            backend.unhealthy_since = None
            logger.info("backend %s recovered", backend.url)
        backend.healthy = healthy

    def mark_health(self, backend: Backend | int, healthy: bool) -> None:
        if isinstance(backend, int):
            backend = self.backends[backend]
        with self._cond:
            backend.probe_failures = 0
            self._set_health(backend, healthy)
            self._cond.notify_all()

    def record_probe(self, backend: Backend, ok: bool, failures_to_unhealthy: int) -> None:
        with self._cond:
            if ok:
                backend.probe_failures = 0
                self._set_health(backend, True)
            else:
                backend.probe_failures += 1
                if backend.probe_failures >= failures_to_unhealthy:
                    self._set_health(backend, False)
            self._cond.notify_all()

    def healthy_backends(self) -> list[Backend]:
        with self._cond:
            return [b for b in self.backends if b.healthy]

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def stats(self) -> dict:
        with self._cond:
            backends = [b.snapshot() for b in self.backends]
            in_flight = sum(b["in_flight"] for b in backends)
            return {
                "backends": backends,
                "queue_length": len(self._waiting),
                "in_flight": in_flight,
                "accepted": self.accepted,
                "rejected": self.rejected,
                "finished": self.finished,
                "completed": sum(b["completed"] for b in backends),
                "failed": sum(b["failed"] for b in backends),
                "dispatched": sum(b["dispatched"] for b in backends),
                "latency_histogram": {
                    "bucket_upper_ms": list(LATENCY_BUCKETS_MS) + [None],
                    "counts": list(self.latency_counts),
                },
            }


class _BalancerHandler(QuietHandler):
    server: "_BalancerHTTPServer"

    def do_GET(self):
        if self.path == "/stats":
            self.send_body(200, dumps(self.server.pool.stats()))
        elif self.path == "/Info":
            self._proxy("GET", b"")
        else:
            self.close_connection = True
            self.send_body(404, dumps({"error": {"type": "MalformedRequest", "message": "no such endpoint"}}))

    def do_POST(self):
        try:
            body = self.read_body()
        except ProtocolError as err:
            self.send_error_json(err)
            return
        if self.path.lstrip("/") in EVALUATION_ENDPOINTS:
            self._evaluate(body)
        else:
            self._proxy("POST", body)

    def _proxy(self, method: str, body: bytes) -> None:
        """Forward a metadata query to the first healthy backend that answers."""
        err = ProtocolError(ErrorKind.UNAVAILABLE, "no healthy backend")
        for backend in self.server.pool.healthy_backends():
            # metadata queries run beside evaluations, so they get their own connection
            conn = Connection(backend.url, self.server.config.health_timeout * 5)
            try:
                status, data = conn.request(method, self.path, body if method == "POST" else None)
            except _TRANSPORT_ERRORS as exc:
                err = ProtocolError(ErrorKind.UNAVAILABLE, f"backend {backend.url} failed: {exc}")
                continue
            finally:
                conn.close()
            self.send_body(status, data)
            return
        self.send_error_json(err)

    def _evaluate(self, body: bytes) -> None:
        pool, cfg = self.server.pool, self.server.config
        start = time.monotonic()
        try:
            ticket = pool.admit()
        except ProtocolError as err:
            self.send_error_json(err)
            return
        failures = 0
        while True:
            try:
                backend = pool.acquire(ticket, self.server.queue_timeout)
            except ProtocolError as err:
                self.send_error_json(err)
                return
            try:
                status, data = backend.conn.request("POST", self.path, body)
                ok = status != 503
            except _TRANSPORT_ERRORS as exc:
                status, data, ok = 503, ProtocolError(ErrorKind.UNAVAILABLE, f"backend failed: {exc}").to_json(), False
            if ok:
                pool.release(backend, True, time.monotonic() - start)
                self.send_body(status, data)
                return
            failures += 1
            backend.conn.close()
            retry = cfg.retry_on_failure and failures <= cfg.max_retries_per_request
            logger.warning("request failed on %s (attempt %d, retry=%s)", backend.url, failures, retry)
            if retry:
                pool.release(backend, False, requeue=ticket)
                continue
            pool.release(backend, False, time.monotonic() - start)
            self.send_body(503, data)
            return


class _BalancerHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 1024

    def __init__(self, address, pool: BackendPool, config: BalancerConfig, queue_timeout: float | None):
        self.pool = pool
        self.config = config
        self.queue_timeout = queue_timeout
        self.max_body = 64 * 1024 * 1024
        super().__init__(address, _BalancerHandler)


def _fetch_descriptors(url: str, timeout: float) -> dict:
    conn = Connection(url, timeout)
    try:
        status, data = conn.request("GET", "/Info")
        if status != 200:
            raise BalancerError(f"{url}/Info returned HTTP {status}")
        out = {}
        for name in sorted(json.loads(data)["models"]):
            payload = dumps({"name": name, "config": {}})
            desc = {}
            for endpoint in ("InputSizes", "OutputSizes", "ModelInfo"):
                status, data = conn.request("POST", f"/{endpoint}", payload)
                desc[endpoint] = json.loads(data) if status == 200 else status
            out[name] = desc
        return out
    finally:
        conn.close()


class BalancerHandle:
    """A running balancer. Created by :func:`run_balancer`."""

    def __init__(self, config: BalancerConfig, queue_timeout: float | None = None):
        self.config = config
        self.pool = BackendPool(config.backend_urls, config.queue_capacity, config.record_dispatches)
        self.descriptors: dict | None = None
        self._check_backends()
        self._httpd = _BalancerHTTPServer((config.host, config.listen_port), self.pool, config, queue_timeout)
        self.host, self.port = self._httpd.server_address[:2]
        self._stop = threading.Event()
        self._threads = [
            threading.Thread(target=self._httpd.serve_forever, args=(0.05,), name="balancer-http", daemon=True),
            threading.Thread(target=self._health_loop, name="balancer-health", daemon=True),
        ]
        for t in self._threads:
            t.start()

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def _check_backends(self) -> None:
        seen = None
        for backend in self.pool.backends:
            try:
                desc = _fetch_descriptors(backend.url, self.config.health_timeout)
            except (_TRANSPORT_ERRORS + (ValueError, KeyError)) as exc:
                logger.warning("backend %s unreachable at startup: %s", backend.url, exc)
                self.pool.mark_health(backend, False)
                continue
            if not self.config.check_descriptors:
                continue
            if seen is None:
                seen = (backend.url, desc)
            elif desc != seen[1]:
                raise BalancerError(f"backend {backend.url} serves different models than {seen[0]}")
        self.descriptors = seen[1] if seen else None

    def probe(self, backend: Backend) -> bool:
        conn = Connection(backend.url, self.config.health_timeout)
        try:
            status, _ = conn.request("GET", "/Info")
            return status == 200
        except _TRANSPORT_ERRORS:
            return False
        finally:
            conn.close()

    def _health_loop(self) -> None:
        while not self._stop.wait(self.config.health_interval):
            for backend in self.pool.backends:
                if self._stop.is_set():
                    return
                self.pool.record_probe(backend, self.probe(backend), self.config.failures_to_unhealthy)

    def mark_health(self, backend: int | Backend, healthy: bool) -> None:
        self.pool.mark_health(backend, healthy)

    def stats(self) -> dict:
        return self.pool.stats()

    def shutdown(self) -> None:
        if self._stop.is_set():
            return
        self._stop.set()
        self.pool.close()
        self._httpd.shutdown()
        self._httpd.server_close()

    def wait(self, timeout: float | None = None) -> bool:
        return self._stop.wait(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def run_balancer(config: BalancerConfig, queue_timeout: float | None = None) -> BalancerHandle:
    """Start a balancer in background threads.

    Raises :class:`BalancerError` if reachable backends disagree on the
    models they serve, and ``OSError`` if the port cannot be bound.
    """
    return BalancerHandle(config, queue_timeout)


def load_backend_list(source: str) -> list[str]:
    """Parse ``--backends``: a comma-separated URL list or a JSON file ``{"backends": [...]}``."""
    if source.endswith(".json") or source.startswith(("/", ".")) and not source.startswith("http"):
        with open(source) as fh:
            urls = json.load(fh)["backends"]
    else:
        urls = [u.strip() for u in source.split(",") if u.strip()]
    return [u if "://" in u else f"http://{u}" for u in urls]
