"""Wire data model and JSON encoding shared by server, client and balancer.

Requests are JSON objects with the fields ``name``, ``input`` (list of
lists), ``config``, and, depending on the operation, ``outWrt``, ``inWrt``
(``inWrt1``/``inWrt2`` for Hessian actions), ``sens`` and ``vec``.  The
operation is carried by the endpoint path; :func:`decode_request` infers it
from the fields present, which is unambiguous for well-formed bodies.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

PROTOCOL_VERSION = 1


class Operation(str, enum.Enum):
    EVALUATE = "Evaluate"
    GRADIENT = "Gradient"
    APPLY_JACOBIAN = "ApplyJacobian"
    APPLY_HESSIAN = "ApplyHessian"


class ErrorKind(str, enum.Enum):
    UNKNOWN_MODEL = "UnknownModel"
    UNSUPPORTED_OPERATION = "UnsupportedOperation"
    INVALID_DIMENSIONS = "InvalidDimensions"
    MALFORMED_REQUEST = "MalformedRequest"
    MODEL_FAILURE = "ModelFailure"
    UNAVAILABLE = "Unavailable"


HTTP_STATUS = {
    ErrorKind.UNKNOWN_MODEL: 400,
    ErrorKind.UNSUPPORTED_OPERATION: 400,
    ErrorKind.INVALID_DIMENSIONS: 400,
    ErrorKind.MALFORMED_REQUEST: 400,
    ErrorKind.MODEL_FAILURE: 500,
    ErrorKind.UNAVAILABLE: 503,
}


class ProtocolError(Exception):
    """An error that can cross the wire."""

    def __init__(self, kind: ErrorKind | str, message: str = ""):
        self.kind = ErrorKind(kind)
        self.message = message
        super().__init__(f"{self.kind.value}: {message}")

    @property
    def status(self) -> int:
        return HTTP_STATUS[self.kind]

    def to_json(self) -> bytes:
        return dumps({"error": {"type": self.kind.value, "message": self.message}})

    @classmethod
    def from_json(cls, raw: bytes, status: int | None = None) -> "ProtocolError":
        try:
            err = json.loads(raw)["error"]
            return cls(err["type"], str(err.get("message", "")))
        except (ValueError, KeyError, TypeError):
            kind = ErrorKind.UNAVAILABLE if status == 503 else ErrorKind.MODEL_FAILURE
            text = raw[:200].decode("utf-8", "replace")
            return cls(kind, f"unexpected HTTP {status} response: {text}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProtocolError):
            return NotImplemented
        return (self.kind, self.message) == (other.kind, other.message)

    def __hash__(self) -> int:
        return hash((self.kind, self.message))


Vector = tuple  # tuple of floats


@dataclass(frozen=True)
class ModelDescriptor:
    name: str
    input_sizes: tuple[int, ...]
    output_sizes: tuple[int, ...]
    supports: frozenset[Operation]

    def __post_init__(self):
        object.__setattr__(self, "input_sizes", tuple(self.input_sizes))
        object.__setattr__(self, "output_sizes", tuple(self.output_sizes))
        object.__setattr__(self, "supports", frozenset(Operation(s) for s in self.supports))
        if not self.name:
            raise ValueError("model name must be non-empty")
        for label, sizes in (("input_sizes", self.input_sizes), ("output_sizes", self.output_sizes)):
            if not sizes or any(not _is_int(s) or s < 1 for s in sizes):
                raise ValueError(f"{label} must be a non-empty list of integers >= 1, got {sizes!r}")
        if not self.supports:
            raise ValueError("a model must support at least one operation")

    def support_map(self) -> dict[str, bool]:
        return {op.value: op in self.supports for op in Operation}


@dataclass(frozen=True)
class OperationRequest:
    model_name: str
    operation: Operation
    inputs: tuple[Vector, ...]
    config: Mapping[str, Any] = field(default_factory=dict)
    out_wrt: Optional[int] = None
    in_wrt: Optional[int] = None
    in_wrt1: Optional[int] = None
    in_wrt2: Optional[int] = None
    sensitivity: Optional[Vector] = None
    vec: Optional[Vector] = None

    def __post_init__(self):
        object.__setattr__(self, "operation", Operation(self.operation))
        object.__setattr__(self, "inputs", tuple(_float_vector(v) for v in self.inputs))
        object.__setattr__(self, "config", dict(self.config or {}))
        if self.sensitivity is not None:
            object.__setattr__(self, "sensitivity", _float_vector(self.sensitivity))
        if self.vec is not None:
            object.__setattr__(self, "vec", _float_vector(self.vec))


_REQUIRED = {
    Operation.EVALUATE: (),
    Operation.GRADIENT: ("out_wrt", "in_wrt", "sensitivity"),
    Operation.APPLY_JACOBIAN: ("out_wrt", "in_wrt", "vec"),
    Operation.APPLY_HESSIAN: ("out_wrt", "in_wrt1", "in_wrt2", "sensitivity", "vec"),
}
_OPTIONAL = ("out_wrt", "in_wrt", "in_wrt1", "in_wrt2", "sensitivity", "vec")
_WIRE = {
    "out_wrt": "outWrt",
    "in_wrt": "inWrt",
    "in_wrt1": "inWrt1",
    "in_wrt2": "inWrt2",
    "sensitivity": "sens",
    "vec": "vec",
}


def _is_int(x: Any) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _float_vector(v: Any) -> Vector:
    return tuple(float(x) for x in v)


def dumps(obj: Any) -> bytes:
    """Canonical JSON: sorted keys, no whitespace, no NaN/Inf."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def check_request_shape(req: OperationRequest) -> None:
    """Check the descriptor-independent invariants of *req*."""
    required = _REQUIRED[req.operation]
    for attr in _OPTIONAL:
        present = getattr(req, attr) is not None
        if present != (attr in required):
            state = "requires" if attr in required else "does not accept"
            raise ProtocolError(
                ErrorKind.MALFORMED_REQUEST, f"{req.operation.value} {state} {_WIRE[attr]}"
            )
    for attr in ("out_wrt", "in_wrt", "in_wrt1", "in_wrt2"):
        val = getattr(req, attr)
        if val is not None and (not _is_int(val) or val < 0):
            raise ProtocolError(ErrorKind.MALFORMED_REQUEST, f"{_WIRE[attr]} must be a non-negative integer")
    vectors = list(req.inputs) + [v for v in (req.sensitivity, req.vec) if v is not None]
    if any(not math.isfinite(x) for v in vectors for x in v):
        raise ProtocolError(ErrorKind.MALFORMED_REQUEST, "non-finite value in request")


def encode_request(req: OperationRequest) -> bytes:
    body: dict[str, Any] = {
        "name": req.model_name,
        "input": [list(v) for v in req.inputs],
        "config": dict(req.config),
    }
    for attr in _OPTIONAL:
        val = getattr(req, attr)
        if val is not None:
            body[_WIRE[attr]] = list(val) if isinstance(val, tuple) else val
    return dumps(body)


def _infer_operation(body: Mapping[str, Any]) -> Operation:
    if "inWrt1" in body or "inWrt2" in body:
        return Operation.APPLY_HESSIAN
    has_sens, has_vec = "sens" in body, "vec" in body
    if has_sens and has_vec:
        return Operation.APPLY_HESSIAN
    if has_sens:
        return Operation.GRADIENT
    if has_vec:
        return Operation.APPLY_JACOBIAN
    return Operation.EVALUATE


def _vector_field(body: Mapping[str, Any], key: str) -> Vector:
    value = body[key]
    if not isinstance(value, list):
        raise ProtocolError(ErrorKind.MALFORMED_REQUEST, f"{key} must be a list of numbers")
    out = []
    for x in value:
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise ProtocolError(ErrorKind.MALFORMED_REQUEST, f"{key} must be a list of numbers")
        try:
            out.append(float(x))
        except OverflowError:
            raise ProtocolError(ErrorKind.MALFORMED_REQUEST, f"{key} value out of range") from None
    return tuple(out)


def load_body(raw: bytes | str) -> dict[str, Any]:
    try:
        body = json.loads(raw)
    except (ValueError, UnicodeDecodeError, RecursionError) as exc:
        raise ProtocolError(ErrorKind.MALFORMED_REQUEST, f"invalid JSON: {exc}") from None
    if not isinstance(body, dict):
        raise ProtocolError(ErrorKind.MALFORMED_REQUEST, "request body must be a JSON object")
    return body


def decode_request(raw: bytes | str, operation: Operation | str | None = None) -> OperationRequest:
    """Parse a request body.

    If *operation* is given (the server passes the endpoint name), the body
    must be consistent with it. Raises :class:`ProtocolError` with kind
    MalformedRequest on anything that is not a well-formed request.
    """
    body = load_body(raw)
    name = body.get("name")
    if not isinstance(name, str) or not name:
        raise ProtocolError(ErrorKind.MALFORMED_REQUEST, "missing model name")
    inputs = body.get("input")
    if not isinstance(inputs, list) or not all(isinstance(v, list) for v in inputs):
        raise ProtocolError(ErrorKind.MALFORMED_REQUEST, "input must be a list of lists")
    config = body.get("config", {})
    if not isinstance(config, dict):
        raise ProtocolError(ErrorKind.MALFORMED_REQUEST, "config must be a JSON object")

    op = Operation(operation) if operation is not None else _infer_operation(body)
    kwargs: dict[str, Any] = {}
    for attr in _OPTIONAL:
        key = _WIRE[attr]
        if key not in body:
            continue
        if attr in ("sensitivity", "vec"):
            kwargs[attr] = _vector_field(body, key)
        else:
            if not _is_int(body[key]):
                raise ProtocolError(ErrorKind.MALFORMED_REQUEST, f"{key} must be an integer")
            kwargs[attr] = body[key]

    req = OperationRequest(
        model_name=name,
        operation=op,
        inputs=tuple(_vector_field({"input": v}, "input") for v in inputs),
        config=config,
        **kwargs,
    )
    check_request_shape(req)
    return req


def _dim_error(what: str, got: int, want: int) -> ProtocolError:
    return ProtocolError(ErrorKind.INVALID_DIMENSIONS, f"{what} has length {got}, expected {want}")


def validate_against(req: OperationRequest, desc: ModelDescriptor) -> None:
    """Raise :class:`ProtocolError` unless *req* is valid for *desc*."""
    if req.model_name != desc.name:
        raise ProtocolError(ErrorKind.UNKNOWN_MODEL, f"model {req.model_name!r} not found")
    if req.operation not in desc.supports:
        raise ProtocolError(
            ErrorKind.UNSUPPORTED_OPERATION,
            f"model {desc.name!r} does not support {req.operation.value}",
        )
    check_request_shape(req)
    n_in, n_out = len(desc.input_sizes), len(desc.output_sizes)
    if len(req.inputs) != n_in:
        raise _dim_error("input", len(req.inputs), n_in)
    for i, (v, size) in enumerate(zip(req.inputs, desc.input_sizes)):
        if len(v) != size:
            raise _dim_error(f"input[{i}]", len(v), size)

    def index(attr: str, bound: int) -> int:
        val = getattr(req, attr)
        if val >= bound:
            raise ProtocolError(ErrorKind.INVALID_DIMENSIONS, f"{_WIRE[attr]}={val} out of range [0, {bound})")
        return val

    op = req.operation
    if op is Operation.EVALUATE:
        return
    out_wrt = index("out_wrt", n_out)
    if op is Operation.APPLY_HESSIAN:
        index("in_wrt1", n_in)
        in_wrt2 = index("in_wrt2", n_in)
        if len(req.sensitivity) != desc.output_sizes[out_wrt]:
            raise _dim_error("sens", len(req.sensitivity), desc.output_sizes[out_wrt])
        if len(req.vec) != desc.input_sizes[in_wrt2]:
            raise _dim_error("vec", len(req.vec), desc.input_sizes[in_wrt2])
        return
    in_wrt = index("in_wrt", n_in)
    if op is Operation.GRADIENT and len(req.sensitivity) != desc.output_sizes[out_wrt]:
        raise _dim_error("sens", len(req.sensitivity), desc.output_sizes[out_wrt])
    if op is Operation.APPLY_JACOBIAN and len(req.vec) != desc.input_sizes[in_wrt]:
        raise _dim_error("vec", len(req.vec), desc.input_sizes[in_wrt])


def expected_output_shape(req: OperationRequest, desc: ModelDescriptor) -> list[int]:
    """Vector lengths an operation must return (one entry per returned vector)."""
    op = req.operation
    if op is Operation.EVALUATE:
        return list(desc.output_sizes)
    if op is Operation.GRADIENT:
        return [desc.input_sizes[req.in_wrt]]
    if op is Operation.APPLY_JACOBIAN:
        return [desc.output_sizes[req.out_wrt]]
    return [desc.input_sizes[req.in_wrt1]]


def encode_response(operation: Operation, outputs: Sequence[Sequence[float]]) -> bytes:
    """Evaluate responds with a list of vectors, derivative operations with one flat vector."""
    if Operation(operation) is Operation.EVALUATE:
        return dumps({"output": [[float(x) for x in v] for v in outputs]})
    (vec,) = outputs
    return dumps({"output": [float(x) for x in vec]})


def decode_response(raw: bytes, operation: Operation) -> list[list[float]]:
    try:
        out = json.loads(raw)["output"]
    except (ValueError, KeyError, TypeError):
        raise ProtocolError(ErrorKind.MALFORMED_REQUEST, "malformed response body") from None
    if Operation(operation) is Operation.EVALUATE:
        return [[float(x) for x in v] for v in out]
    return [[float(x) for x in out]]
