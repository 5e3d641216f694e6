"""Host named models behind the HTTP protocol."""

from __future__ import annotations

import collections
import logging
import math
import os
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Iterable, Mapping, Sequence

from .protocol import (
    PROTOCOL_VERSION,
    ErrorKind,
    ModelDescriptor,
    Operation,
    ProtocolError,
    decode_request,
    dumps,
    encode_response,
    expected_output_shape,
    load_body,
    validate_against,
)

logger = logging.getLogger(__name__)

DEFAULT_PORT = 4242
MAX_BODY_BYTES = 64 * 1024 * 1024


class Model:
    """Base class for servable models.

    Subclasses set ``supports`` and override ``get_input_sizes``,
    ``get_output_sizes``, ``__call__`` and whichever derivative methods
    they declare. Parameters arrive as a list of input vectors.
    """

    supports: frozenset[Operation] = frozenset({Operation.EVALUATE})

    def __init__(self, name: str):
        self.name = name

    def get_input_sizes(self, config: Mapping[str, Any]) -> list[int]:
        raise NotImplementedError

    def get_output_sizes(self, config: Mapping[str, Any]) -> list[int]:
        raise NotImplementedError

    def __call__(self, parameters: Sequence[Sequence[float]], config: Mapping[str, Any]) -> list[list[float]]:
        raise NotImplementedError

    def gradient(self, out_wrt, in_wrt, parameters, sens, config) -> list[float]:
        raise NotImplementedError

    def apply_jacobian(self, out_wrt, in_wrt, parameters, vec, config) -> list[float]:
        raise NotImplementedError

    def apply_hessian(self, out_wrt, in_wrt1, in_wrt2, parameters, sens, vec, config) -> list[float]:
        raise NotImplementedError

    def descriptor(self, config: Mapping[str, Any] | None = None) -> ModelDescriptor:
        config = config or {}
        return ModelDescriptor(
            self.name,
            self.get_input_sizes(config),
            self.get_output_sizes(config),
            self.supports,
        )

    def run(self, op: Operation, req) -> list[list[float]]:
        """Dispatch a decoded request to the matching method; returns a list of vectors."""
        params = [list(v) for v in req.inputs]
        config = dict(req.config)
        if op is Operation.EVALUATE:
            return self(params, config)
        if op is Operation.GRADIENT:
            return [self.gradient(req.out_wrt, req.in_wrt, params, list(req.sensitivity), config)]
        if op is Operation.APPLY_JACOBIAN:
            return [self.apply_jacobian(req.out_wrt, req.in_wrt, params, list(req.vec), config)]
        return [
            self.apply_hessian(
                req.out_wrt, req.in_wrt1, req.in_wrt2, params, list(req.sensitivity), list(req.vec), config
            )
        ]


_METHODS = {
    Operation.EVALUATE: "__call__",
    Operation.GRADIENT: "gradient",
    Operation.APPLY_JACOBIAN: "apply_jacobian",
    Operation.APPLY_HESSIAN: "apply_hessian",
}


def check_model(model: Model) -> None:
    """Declared capabilities must match the overridden methods, in both directions."""
    for op, method in _METHODS.items():
        provided = getattr(type(model), method) is not getattr(Model, method)
        declared = op in model.supports
        if provided != declared:
            raise ValueError(
                f"model {model.name!r}: {op.value} is "
                + ("implemented but not declared" if provided else "declared but not implemented")
            )
    model.descriptor({})


class FifoGate:
    """Counting semaphore that admits waiters strictly in arrival order."""

    def __init__(self, slots: int = 1):
        if slots < 1:
            raise ValueError("slots must be >= 1")
        self.slots = slots
        self.active = 0
        self.high_water = 0
        self._waiting: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._closed = False

    def acquire(self) -> None:
        with self._cond:
            if self._closed:
                raise ProtocolError(ErrorKind.UNAVAILABLE, "server is shutting down")
            ticket = object()
            self._waiting.append(ticket)
            while not self._closed and (self._waiting[0] is not ticket or self.active >= self.slots):
                self._cond.wait()
            if self._closed:
                self._waiting.remove(ticket)
                self._cond.notify_all()
                raise ProtocolError(ErrorKind.UNAVAILABLE, "server is shutting down")
            self._waiting.popleft()
            self.active += 1
            self.high_water = max(self.high_water, self.active)
            self._cond.notify_all()

    def release(self) -> None:
        with self._cond:
            self.active -= 1
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def wait_idle(self, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self.active == 0, timeout)

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()


class QuietHandler(BaseHTTPRequestHandler):
    """HTTP/1.1 keep-alive handler that writes each response in one send."""

    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True
    server_version = "modelbridge"

    def log_message(self, format, *args):
        logger.debug("%s - %s", self.address_string(), format % args)

    def read_body(self) -> bytes:
        try:
            length = int(self.headers.get("Content-Length", 0))
        except ValueError:
            length = -1
        if length < 0 or length > self.server.max_body:
            self.close_connection = True
            raise ProtocolError(ErrorKind.MALFORMED_REQUEST, f"invalid or oversized body ({length} bytes)")
        return self.rfile.read(length) if length else b""

    def send_body(self, status: int, body: bytes) -> None:
        head = (
            f"{self.protocol_version} {status} {self.responses.get(status, ('',))[0]}\r\n"
            f"Server: {self.server_version}\r\n"
            "Content-Type: application/json\r\n"
            f"Content-Length: {len(body)}\r\n"
        )
        if self.close_connection:
            head += "Connection: close\r\n"
        self.log_request(status, len(body))
        self.wfile.write(head.encode("latin-1") + b"\r\n" + body)

    def send_error_json(self, err: ProtocolError) -> None:
        self.send_body(err.status, err.to_json())


class _Handler(QuietHandler):
    server: "_BridgeHTTPServer"

    def setup(self):
        super().setup()
        self.server.track(self.connection, True)

    def finish(self):
        try:
            super().finish()
        finally:
            self.server.track(self.connection, False)

    def do_GET(self):
        if self.path != "/Info":
            self.close_connection = True
            self.send_body(404, dumps({"error": {"type": "MalformedRequest", "message": "no such endpoint"}}))
            return
        self.send_body(200, dumps({"protocolVersion": PROTOCOL_VERSION, "models": list(self.server.models)}))

    def do_POST(self):
        srv = self.server
        with srv.busy():
            try:
                body = self.read_body()
                if srv.closing:
                    self.close_connection = True
                    raise ProtocolError(ErrorKind.UNAVAILABLE, "server is shutting down")
                status, payload = 200, self._dispatch(self.path.lstrip("/"), body)
            except ProtocolError as err:
                status, payload = err.status, err.to_json()
            except Exception as exc:  # never let a bug kill the connection thread silently
                logger.exception("unhandled error")
                status, payload = 500, ProtocolError(ErrorKind.MODEL_FAILURE, repr(exc)).to_json()
            self.send_body(status, payload)

    def _model(self, name: Any) -> Model:
        model = self.server.models.get(name) if isinstance(name, str) else None
        if model is None:
            raise ProtocolError(ErrorKind.UNKNOWN_MODEL, f"model {name!r} not found")
        return model

    def _dispatch(self, endpoint: str, body: bytes) -> bytes:
        if endpoint in ("InputSizes", "OutputSizes", "ModelInfo"):
            req = load_body(body)
            model = self._model(req.get("name"))
            config = req.get("config", {})
            if not isinstance(config, dict):
                raise ProtocolError(ErrorKind.MALFORMED_REQUEST, "config must be a JSON object")
            if endpoint == "InputSizes":
                return dumps({"inputSizes": list(model.get_input_sizes(config))})
            if endpoint == "OutputSizes":
                return dumps({"outputSizes": list(model.get_output_sizes(config))})
            return dumps({"support": model.descriptor(config).support_map()})
        try:
            op = Operation(endpoint)
        except ValueError:
            raise ProtocolError(ErrorKind.MALFORMED_REQUEST, f"no such endpoint /{endpoint}") from None

        req = decode_request(body, op)
        model = self._model(req.model_name)
        try:
            desc = model.descriptor(req.config)
        except Exception as exc:
            raise ProtocolError(ErrorKind.MODEL_FAILURE, f"descriptor query failed: {exc}") from None
        validate_against(req, desc)

        with self.server.gates[model.name]:
            try:
                outputs = model.run(op, req)
            except ProtocolError:
                raise
            except Exception as exc:
                raise ProtocolError(ErrorKind.MODEL_FAILURE, f"{type(exc).__name__}: {exc}") from None
        return encode_response(op, _check_outputs(outputs, expected_output_shape(req, desc)))


def _check_outputs(outputs: Any, shape: list[int]) -> list[list[float]]:
    try:
        vectors = [[float(x) for x in v] for v in outputs]
    except (TypeError, ValueError) as exc:
        raise ProtocolError(ErrorKind.MODEL_FAILURE, f"model returned non-numeric output: {exc}") from None
    if [len(v) for v in vectors] != shape:
        raise ProtocolError(
            ErrorKind.MODEL_FAILURE, f"model output shape {[len(v) for v in vectors]} != declared {shape}"
        )
    if any(not math.isfinite(x) for v in vectors for x in v):
        raise ProtocolError(ErrorKind.MODEL_FAILURE, "model returned non-finite output")
    return vectors


class _BridgeHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 1024

    def __init__(self, address, models: dict[str, Model], max_concurrent: int, max_body: int):
        self.models = models
        self.gates = {name: FifoGate(max_concurrent) for name in models}
        self.max_body = max_body
        self.closing = False
        self._conns: set = set()
        self._busy = 0
        self._lock = threading.Condition()
        super().__init__(address, _Handler)

    def track(self, conn: socket.socket, alive: bool) -> None:
        with self._lock:
            (self._conns.add if alive else self._conns.discard)(conn)

    def busy(self):
        server = self

        class _Busy:
            def __enter__(self):
                with server._lock:
                    server._busy += 1

            def __exit__(self, *exc):
                with server._lock:
                    server._busy -= 1
                    server._lock.notify_all()

        return _Busy()

    def drain(self, timeout: float | None) -> None:
        with self._lock:
            self._lock.wait_for(lambda: self._busy == 0, timeout)
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class ServerHandle:
    """A running model server. Created by :func:`serve_models`."""

    def __init__(self, httpd: _BridgeHTTPServer):
        self._httpd = httpd
        self.host, self.port = httpd.server_address[:2]
        self._thread = threading.Thread(target=httpd.serve_forever, args=(0.05,), name=f"modelbridge:{self.port}", daemon=True)
        self._thread.start()
        self._stopped = threading.Event()
        self._stop_lock = threading.Lock()

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    @property
    def gates(self) -> dict[str, FifoGate]:
        return self._httpd.gates

    def wait(self, timeout: float | None = None) -> bool:
        """Block until the server is shut down."""
        return self._stopped.wait(timeout)

    def shutdown(self, drain_timeout: float | None = None) -> None:
        """Stop accepting, reject queued requests, let in-flight evaluations finish.

        Idempotent; safe to call from any thread.
        """
        with self._stop_lock:
            if self._stopped.is_set():
                return
            httpd = self._httpd
            httpd.closing = True
            for gate in httpd.gates.values():
                gate.close()
            httpd.shutdown()
            httpd.server_close()
            httpd.drain(drain_timeout)
            self._thread.join()
            self._stopped.set()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def resolve_port(port: int | None) -> int:
    if port is not None:
        return port
    env = os.environ.get("BRIDGE_PORT")
    return int(env) if env else DEFAULT_PORT


def serve_models(
    models: Iterable[Model],
    port: int | None = None,
    *,
    host: str = "127.0.0.1",
    max_concurrent_per_model: int = 1,
    max_body: int = MAX_BODY_BYTES,
) -> ServerHandle:
    """Start serving *models* in a background thread and return the handle.

    ``port=None`` uses ``$BRIDGE_PORT`` or 4242; ``port=0`` asks the OS for a
    free port (see ``handle.port``). Binding errors raise ``OSError`` here.
    """
    if max_concurrent_per_model < 1:
        raise ValueError("max_concurrent_per_model must be >= 1")
    registry: dict[str, Model] = {}
    for model in models:
        if model.name in registry:
            raise ValueError(f"duplicate model name {model.name!r}")
        check_model(model)
        registry[model.name] = model
    if not registry:
        raise ValueError("no models to serve")
    httpd = _BridgeHTTPServer((host, resolve_port(port)), registry, max_concurrent_per_model, max_body)
    return ServerHandle(httpd)
