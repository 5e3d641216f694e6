"""Remote-model proxy: a network model presented as a plain callable."""

from __future__ import annotations

import http.client
import json
import threading
import urllib.parse
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Mapping, Sequence

from .protocol import (
    ErrorKind,
    ModelDescriptor,
    Operation,
    OperationRequest,
    ProtocolError,
    decode_response,
    dumps,
    encode_request,
    validate_against,
)

_TRANSPORT_ERRORS = (OSError, http.client.HTTPException)


class Connection:
    """One keep-alive HTTP connection per thread to a single base URL."""

    def __init__(self, url: str, timeout: float | None = None):
        parts = urllib.parse.urlsplit(url if "://" in url else f"http://{url}")
        if parts.scheme != "http" or not parts.hostname:
            raise ValueError(f"unsupported URL {url!r}")
        self.url = url.rstrip("/")
        self.host = parts.hostname
        self.port = parts.port or 80
        self.timeout = timeout or None
        self._local = threading.local()

    def _conn(self) -> tuple[http.client.HTTPConnection, bool]:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            return conn, True
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        self._local.conn = conn
        return conn, False

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None

    def request(self, method: str, path: str, body: bytes | None = None) -> tuple[int, bytes]:
        """Send one request; returns (status, body). Raises OSError/HTTPException on transport failure.

        A request on a reused keep-alive connection that fails before any
        response is retried once on a fresh connection.
        """
        headers = {"Content-Type": "application/json"} if body is not None else {}
        while True:
            conn, reused = self._conn()
            try:
                conn.request(method, path, body=body, headers=headers)
                resp = conn.getresponse()
                data = resp.read()
                if resp.will_close:
                    self.close()
                return resp.status, data
            except _TRANSPORT_ERRORS:
                self.close()
                if not reused:
                    raise


def _unavailable(url: str, exc: BaseException) -> ProtocolError:
    return ProtocolError(ErrorKind.UNAVAILABLE, f"cannot reach {url}: {exc}")


class RemoteModel:
    """A model served over HTTP.

    The descriptor is fetched once at construction. ``timeout`` of 0/None
    means wait forever, which is what hour-long model runs need. ``retries``
    re-sends a request after transport failures or 503 responses.
    """

    def __init__(self, url: str, name: str, timeout: float | None = None, retries: int = 0):
        if retries < 0:
            raise ValueError("retries must be >= 0")
        self.url = url.rstrip("/")
        self.name = name
        self.timeout = timeout or None
        self.retries = retries
        self._conn = Connection(self.url, self.timeout)
        self.descriptor = self._fetch_descriptor()

    def __repr__(self) -> str:
        return f"RemoteModel({self.url!r}, {self.name!r})"

    def _call(self, method: str, path: str, body: bytes | None = None) -> bytes:
        attempts = self.retries + 1
        for attempt in range(attempts):
            try:
                status, data = self._conn.request(method, path, body)
            except _TRANSPORT_ERRORS as exc:
                err = _unavailable(self.url, exc)
            else:
                if status == 200:
                    return data
                err = ProtocolError.from_json(data, status)
            if err.kind is not ErrorKind.UNAVAILABLE or attempt == attempts - 1:
                raise err
        raise AssertionError("unreachable")

    def _post_json(self, endpoint: str, payload: Mapping[str, Any]) -> Any:
        return json.loads(self._call("POST", f"/{endpoint}", dumps(payload)))

    def _fetch_descriptor(self, config: Mapping[str, Any] | None = None) -> ModelDescriptor:
        info = json.loads(self._call("GET", "/Info"))
        if self.name not in info.get("models", []):
            raise ProtocolError(ErrorKind.UNKNOWN_MODEL, f"model {self.name!r} not served at {self.url}")
        payload = {"name": self.name, "config": dict(config or {})}
        support = self._post_json("ModelInfo", {"name": self.name})["support"]
        return ModelDescriptor(
            self.name,
            self._post_json("InputSizes", payload)["inputSizes"],
            self._post_json("OutputSizes", payload)["outputSizes"],
            frozenset(op for op in Operation if support.get(op.value)),
        )

    def get_input_sizes(self, config: Mapping[str, Any] | None = None) -> list[int]:
        if not config:
            return list(self.descriptor.input_sizes)
        return self._post_json("InputSizes", {"name": self.name, "config": dict(config)})["inputSizes"]

    def get_output_sizes(self, config: Mapping[str, Any] | None = None) -> list[int]:
        if not config:
            return list(self.descriptor.output_sizes)
        return self._post_json("OutputSizes", {"name": self.name, "config": dict(config)})["outputSizes"]

    def supports(self, op: Operation | str) -> bool:
        return Operation(op) in self.descriptor.supports

    def _request(self, req: OperationRequest) -> list[list[float]]:
        if req.operation not in self.descriptor.supports:
            raise ProtocolError(
                ErrorKind.UNSUPPORTED_OPERATION, f"model {self.name!r} does not support {req.operation.value}"
            )
        if not req.config:
            # sizes may depend on config; only the cached default descriptor is checked locally
            validate_against(req, self.descriptor)
        return decode_response(self._call("POST", f"/{req.operation.value}", encode_request(req)), req.operation)

    def evaluate(self, parameters: Sequence[Sequence[float]], config: Mapping[str, Any] | None = None):
        return self._request(OperationRequest(self.name, Operation.EVALUATE, parameters, config or {}))

    __call__ = evaluate

    def gradient(self, out_wrt: int, in_wrt: int, parameters, sens, config=None) -> list[float]:
        req = OperationRequest(
            self.name, Operation.GRADIENT, parameters, config or {}, out_wrt=out_wrt, in_wrt=in_wrt, sensitivity=sens
        )
        return self._request(req)[0]

    def apply_jacobian(self, out_wrt: int, in_wrt: int, parameters, vec, config=None) -> list[float]:
        req = OperationRequest(
            self.name, Operation.APPLY_JACOBIAN, parameters, config or {}, out_wrt=out_wrt, in_wrt=in_wrt, vec=vec
        )
        return self._request(req)[0]

    def apply_hessian(self, out_wrt: int, in_wrt1: int, in_wrt2: int, parameters, sens, vec, config=None):
        req = OperationRequest(
            self.name,
            Operation.APPLY_HESSIAN,
            parameters,
            config or {},
            out_wrt=out_wrt,
            in_wrt1=in_wrt1,
            in_wrt2=in_wrt2,
            sensitivity=sens,
            vec=vec,
        )
        return self._request(req)[0]

    def evaluate_batch(self, batch, config=None, parallelism: int = 1) -> list:
        return evaluate_batch(self, batch, config, parallelism)


def connect(url: str, name: str, **kwargs) -> RemoteModel:
    """Open a :class:`RemoteModel`; raises ProtocolError (Unavailable/UnknownModel)."""
    return RemoteModel(url, name, **kwargs)


def evaluate_batch(model, batch, config=None, parallelism: int = 1) -> list:
    """Evaluate many parameter blocks with at most *parallelism* calls in flight.

    Works for a :class:`RemoteModel` or a local model object. Entry i of the
    result holds the outputs for ``batch[i]``, or the exception it raised;
    one failure does not abort the rest.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    config = dict(config or {})

    def one(params):
        try:
            return model(params, config)
        except Exception as exc:
            return exc

    batch = list(batch)
    if parallelism == 1 or len(batch) <= 1:
        return [one(p) for p in batch]
    with ThreadPoolExecutor(max_workers=min(parallelism, len(batch))) as pool:
        return list(pool.map(one, batch))
