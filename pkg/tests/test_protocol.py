import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modelbridge.protocol import (
    ErrorKind,
    ModelDescriptor,
    Operation,
    OperationRequest,
    ProtocolError,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    validate_against,
)

finite = st.floats(allow_nan=False, allow_infinity=False)
vectors = st.lists(finite, min_size=1, max_size=4)
configs = st.dictionaries(
    st.text(max_size=5),
    st.one_of(st.integers(-10, 10), st.text(max_size=4), st.booleans(), st.none(), finite),
    max_size=3,
)


@st.composite
def requests(draw):
    op = draw(st.sampled_from(list(Operation)))
    kwargs = {}
    if op is not Operation.EVALUATE:
        kwargs["out_wrt"] = draw(st.integers(0, 3))
    if op in (Operation.GRADIENT, Operation.APPLY_JACOBIAN):
        kwargs["in_wrt"] = draw(st.integers(0, 3))
    if op is Operation.APPLY_HESSIAN:
        kwargs["in_wrt1"] = draw(st.integers(0, 3))
        kwargs["in_wrt2"] = draw(st.integers(0, 3))
    if op in (Operation.GRADIENT, Operation.APPLY_HESSIAN):
        kwargs["sensitivity"] = draw(vectors)
    if op in (Operation.APPLY_JACOBIAN, Operation.APPLY_HESSIAN):
        kwargs["vec"] = draw(vectors)
    return OperationRequest(
        draw(st.text(min_size=1, max_size=8)),
        op,
        draw(st.lists(vectors, min_size=1, max_size=3)),
        draw(configs),
        **kwargs,
    )


def test_encode_minimal_evaluate():
    body = encode_request(OperationRequest("forward", Operation.EVALUATE, [[3.0]]))
    assert b'"name":"forward"' in body
    assert b'"input":[[3.0]]' in body


def test_encode_config_passthrough():
    body = encode_request(OperationRequest("forward", Operation.EVALUATE, [[0.0, 10.0]], {"level": 0}))
    assert b'"config":{"level":0}' in body


def test_zero_sensitivity_roundtrip():
    req = OperationRequest("forward", Operation.GRADIENT, [[1.0, 2.0]], out_wrt=0, in_wrt=0,
                           sensitivity=[0.0, 0.0])
    body = encode_request(req)
    assert b'"sens":[0.0,0.0]' in body
    assert decode_request(body) == req


def test_truncated_json_is_malformed():
    with pytest.raises(ProtocolError) as exc:
        decode_request(b'{"name":"forward"')
    assert exc.value.kind is ErrorKind.MALFORMED_REQUEST


def test_extra_input_block_is_invalid_dimensions():
    desc = ModelDescriptor("forward", [1], [1], {Operation.EVALUATE})
    req = decode_request(b'{"name":"forward","input":[[1.0],[2.0]],"config":{}}')
    # oracle: direct comparison of block count against the descriptor
    assert len(req.inputs) != len(desc.input_sizes)
    with pytest.raises(ProtocolError) as exc:
        validate_against(req, desc)
    assert exc.value.kind is ErrorKind.INVALID_DIMENSIONS


def test_validate_examples():
    desc = ModelDescriptor("forward", [1], [1], {Operation.EVALUATE})
    validate_against(OperationRequest("forward", Operation.EVALUATE, [[3.0]]), desc)
    grad = OperationRequest("forward", Operation.GRADIENT, [[3.0]], out_wrt=0, in_wrt=0, sensitivity=[1.0])
    with pytest.raises(ProtocolError) as exc:
        validate_against(grad, desc)
    assert exc.value.kind is ErrorKind.UNSUPPORTED_OPERATION
    with pytest.raises(ProtocolError) as exc:
        validate_against(OperationRequest("forward", Operation.EVALUATE, [[1.0, 2.0]]), desc)
    assert exc.value.kind is ErrorKind.INVALID_DIMENSIONS
    with pytest.raises(ProtocolError) as exc:
        validate_against(OperationRequest("other", Operation.EVALUATE, [[1.0]]), desc)
    assert exc.value.kind is ErrorKind.UNKNOWN_MODEL


@pytest.mark.parametrize("body", [
    b'{"name":"m","input":[[NaN]]}',
    b'{"name":"m","input":[[1e999]]}',
    b'{"name":"m","input":[[1]],"sens":[Infinity],"outWrt":0,"inWrt":0}',
])
def test_non_finite_rejected(body):
    with pytest.raises(ProtocolError) as exc:
        decode_request(body)
    assert exc.value.kind is ErrorKind.MALFORMED_REQUEST


def test_endpoint_mismatch_rejected():
    body = encode_request(OperationRequest("m", Operation.EVALUATE, [[1.0]]))
    with pytest.raises(ProtocolError):
        decode_request(body, Operation.GRADIENT)


@pytest.mark.parametrize("kwargs", [
    {"name": ""},
    {"input_sizes": []},
    {"output_sizes": [0]},
    {"supports": set()},
])
def test_descriptor_invariants(kwargs):
    base = {"name": "m", "input_sizes": [1], "output_sizes": [1], "supports": {Operation.EVALUATE}}
    with pytest.raises(ValueError):
        ModelDescriptor(**{**base, **kwargs})


@given(requests())
@settings(max_examples=300)
def test_roundtrip_property(req):
    body = encode_request(req)
    assert decode_request(body) == req
    assert encode_request(decode_request(body)) == body


@given(st.binary(max_size=200))
@settings(max_examples=500)
def test_decoder_total_on_bytes(raw):
    try:
        decode_request(raw)
    except ProtocolError as err:
        assert err.kind is ErrorKind.MALFORMED_REQUEST


@given(st.recursive(st.none() | st.booleans() | finite | st.integers() | st.text(max_size=5),
                    lambda c: st.lists(c, max_size=3) | st.dictionaries(
                        st.sampled_from(["name", "input", "config", "sens", "vec", "outWrt", "inWrt",
                                         "inWrt1", "inWrt2", "x"]), c, max_size=5),
                    max_leaves=12))
@settings(max_examples=500)
def test_decoder_total_on_json_values(value):
    try:
        decode_request(json.dumps(value).encode())
    except ProtocolError as err:
        assert err.kind is ErrorKind.MALFORMED_REQUEST


def _shape_ok(inputs, desc, req_kwargs, op):
    # independent restatement of the dimension rules
    if [len(v) for v in inputs] != list(desc.input_sizes):
        return False
    if op is Operation.GRADIENT:
        return len(req_kwargs["sensitivity"]) == desc.output_sizes[0]
    if op is Operation.APPLY_JACOBIAN:
        return len(req_kwargs["vec"]) == desc.input_sizes[0]
    return True


@pytest.mark.parametrize("op", [Operation.EVALUATE, Operation.GRADIENT, Operation.APPLY_JACOBIAN])
def test_shape_soundness_exhaustive(op):
    dims = range(1, 4)
    for n_in, n_out in itertools.product(dims, dims):
        desc = ModelDescriptor("m", [n_in], [n_out], set(Operation))
        for blocks in ([], [1], [2], [3], [1, 1]):
            for aux in dims:
                kwargs = {}
                if op is Operation.GRADIENT:
                    kwargs = {"out_wrt": 0, "in_wrt": 0, "sensitivity": [0.5] * aux}
                elif op is Operation.APPLY_JACOBIAN:
                    kwargs = {"out_wrt": 0, "in_wrt": 0, "vec": [0.5] * aux}
                inputs = [[1.0] * k for k in blocks]
                req = OperationRequest("m", op, inputs, **kwargs)
                try:
                    validate_against(req, desc)
                    accepted = True
                except ProtocolError as err:
                    assert err.kind is ErrorKind.INVALID_DIMENSIONS
                    accepted = False
                assert accepted == _shape_ok(inputs, desc, kwargs, op)


def test_hessian_shape_rules():
    desc = ModelDescriptor("m", [2, 3], [4], set(Operation))
    ok = OperationRequest("m", Operation.APPLY_HESSIAN, [[0.0] * 2, [0.0] * 3], out_wrt=0, in_wrt1=0, in_wrt2=1,
                          sensitivity=[1.0] * 4, vec=[1.0] * 3)
    validate_against(ok, desc)
    bad = OperationRequest("m", Operation.APPLY_HESSIAN, [[0.0] * 2, [0.0] * 3], out_wrt=0, in_wrt1=0, in_wrt2=1,
                           sensitivity=[1.0] * 4, vec=[1.0] * 2)
    with pytest.raises(ProtocolError):
        validate_against(bad, desc)
    out_of_range = OperationRequest("m", Operation.APPLY_HESSIAN, [[0.0] * 2, [0.0] * 3], out_wrt=1, in_wrt1=0,
                                    in_wrt2=1, sensitivity=[1.0] * 4, vec=[1.0] * 3)
    with pytest.raises(ProtocolError):
        validate_against(out_of_range, desc)


def test_response_encoding():
    assert encode_response(Operation.EVALUATE, [[6.0]]) == b'{"output":[[6.0]]}'
    assert encode_response(Operation.GRADIENT, [[2.0, 1.0]]) == b'{"output":[2.0,1.0]}'
    assert decode_response(b'{"output":[2.0,1.0]}', Operation.GRADIENT) == [[2.0, 1.0]]


def test_error_json_roundtrip():
    err = ProtocolError(ErrorKind.UNKNOWN_MODEL, "model 'x' not found")
    assert err.status == 400
    assert ProtocolError.from_json(err.to_json()) == err
    assert ProtocolError(ErrorKind.MODEL_FAILURE).status == 500
    assert ProtocolError(ErrorKind.UNAVAILABLE).status == 503
