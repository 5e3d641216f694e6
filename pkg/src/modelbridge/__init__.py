"""Network interface between uncertainty-quantification methods and numerical models."""

from .client import RemoteModel, connect, evaluate_batch
from .protocol import (
    ErrorKind,
    ModelDescriptor,
    Operation,
    OperationRequest,
    ProtocolError,
    decode_request,
    encode_request,
    validate_against,
)
from .server import Model, ServerHandle, serve_models

__version__ = "0.1.0"

__all__ = [
    "ErrorKind", "Model", "ModelDescriptor", "Operation", "OperationRequest", "ProtocolError",
    "RemoteModel", "ServerHandle", "connect", "decode_request", "encode_request", "evaluate_batch",
    "serve_models", "validate_against",
]
