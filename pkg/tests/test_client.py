import socket
import threading
import time

import numpy as np
import pytest

from modelbridge import ErrorKind, ProtocolError, connect
from modelbridge.client import evaluate_batch
from modelbridge.models import (
    DelayModel,
    DoublingModel,
    LinearModel,
    MultiFidelityGaussianPosterior,
    OverlapCountingModel,
    SmoothForwardModel,
)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_connect_populates_descriptor(serve):
    h = serve(DoublingModel())
    m = connect(h.url, "forward")
    assert m.descriptor.input_sizes == (1,)
    assert m.descriptor.output_sizes == (1,)
    assert m.supports("Evaluate")


def test_connect_unknown_model(serve):
    h = serve(DoublingModel())
    with pytest.raises(ProtocolError) as exc:
        connect(h.url, "posterior")
    assert exc.value.kind is ErrorKind.UNKNOWN_MODEL


def test_connect_closed_port():
    with pytest.raises(ProtocolError) as exc:
        connect(f"http://127.0.0.1:{free_port()}", "forward")
    assert exc.value.kind is ErrorKind.UNAVAILABLE


def test_evaluate_examples(serve):
    h = serve(DoublingModel())
    m = connect(h.url, "forward")
    assert m.evaluate([[3.0]]) == [[6.0]]
    assert m([[0.0]]) == [[0.0]]


def test_delay_model_identity_and_wall_time(serve):
    h = serve(DelayModel(delay_ms=250, dim=2))
    m = connect(h.url, "forward")
    start = time.perf_counter()
    assert m([[1.5, -2.0]]) == [[1.5, -2.0]]
    assert time.perf_counter() - start >= 0.25


def test_linear_model_derivatives(serve):
    h = serve(LinearModel([[2.0]]))
    m = connect(h.url, "forward")
    # oracle: the analytic Jacobian of F(x) = 2x is [[2]]
    for x in (-1.0, 0.0, 3.5):
        assert m.apply_jacobian(0, 0, [[x]], [1.0]) == [2.0]
        assert m.gradient(0, 0, [[x]], [1.0]) == [2.0]
        assert m.apply_hessian(0, 0, 0, [[x]], [1.0], [1.0]) == [0.0]


def test_unsupported_operation_is_client_side(serve, monkeypatch):
    h = serve(DoublingModel())
    m = connect(h.url, "forward")

    def no_network(*args, **kwargs):
        raise AssertionError("HTTP request issued")

    monkeypatch.setattr(m._conn, "request", no_network)
    with pytest.raises(ProtocolError) as exc:
        m.gradient(0, 0, [[1.0]], [1.0])
    assert exc.value.kind is ErrorKind.UNSUPPORTED_OPERATION
    with pytest.raises(ProtocolError) as exc:
        m.apply_jacobian(0, 0, [[1.0]], [1.0])
    assert exc.value.kind is ErrorKind.UNSUPPORTED_OPERATION


def test_server_errors_propagate(serve):
    class Broken(DoublingModel):
        def __call__(self, parameters, config):
            raise ValueError("bad mesh")

    h = serve(Broken())
    m = connect(h.url, "forward")
    with pytest.raises(ProtocolError) as exc:
        m([[1.0]])
    assert exc.value.kind is ErrorKind.MODEL_FAILURE
    assert "bad mesh" in exc.value.message


def test_config_passthrough(serve):
    h = serve(MultiFidelityGaussianPosterior(b0=0.0))
    m = connect(h.url, "posterior")
    fine = m([[0.0, 0.0]], {"level": 2})[0][0]
    assert fine == pytest.approx(-np.log(2 * np.pi), rel=1e-15)
    with pytest.raises(ProtocolError) as exc:
        m([[0.0, 0.0]], {"level": 7})
    assert exc.value.kind is ErrorKind.MODEL_FAILURE


def test_evaluate_batch_matches_sequential(serve):
    h = serve(DoublingModel())
    m = connect(h.url, "forward")
    batch = [[[float(i)]] for i in range(20)]
    sequential = [m(p) for p in batch]
    assert m.evaluate_batch(batch, parallelism=4) == sequential
    assert m.evaluate_batch([], parallelism=4) == []


def test_evaluate_batch_parallel_wall_time(serve):
    h = serve(DelayModel(delay_ms=250), max_concurrent_per_model=8)
    m = connect(h.url, "forward")
    start = time.perf_counter()
    out = m.evaluate_batch([[[float(i)]] for i in range(8)], parallelism=8)
    elapsed = time.perf_counter() - start
    assert out == [[[float(i)]] for i in range(8)]
    assert elapsed < 2 * 0.25


def test_evaluate_batch_parallelism_bound(serve):
    model = OverlapCountingModel(delay_ms=20)
    h = serve(model, max_concurrent_per_model=64)
    m = connect(h.url, "forward")
    m.evaluate_batch([[[1.0]]] * 40, parallelism=5)
    assert model.max_active <= 5
    assert h.gates["forward"].high_water <= 5


def test_evaluate_batch_per_index_failures(serve):
    class Picky(DoublingModel):
        def __call__(self, parameters, config):
            if parameters[0][0] < 0:
                raise ValueError("negative")
            return super().__call__(parameters, config)

    h = serve(Picky())
    m = connect(h.url, "forward")
    out = m.evaluate_batch([[[1.0]], [[-1.0]], [[2.0]]], parallelism=3)
    assert out[0] == [[2.0]] and out[2] == [[4.0]]
    assert isinstance(out[1], ProtocolError) and out[1].kind is ErrorKind.MODEL_FAILURE


def test_order_preserved_with_shuffled_completion(serve):
    class Jitter(DelayModel):
        def __call__(self, parameters, config):
            # later indices finish first
            return super().__call__(parameters, {"delay_ms": 40 - 2 * parameters[0][0]})

    h = serve(Jitter(), max_concurrent_per_model=16)
    m = connect(h.url, "forward")
    batch = [[[float(i)]] for i in range(16)]
    assert m.evaluate_batch(batch, parallelism=16) == batch


@pytest.mark.parametrize("model,make_theta", [
    (DoublingModel(), lambda rng: [[rng.normal() * 10.0 ** rng.integers(-300, 300)]]),
    (LinearModel(np.random.default_rng(1).normal(size=(3, 2))), lambda rng: [rng.normal(size=2).tolist()]),
    (MultiFidelityGaussianPosterior(), lambda rng: [rng.normal(size=2).tolist()]),
    (SmoothForwardModel(), lambda rng: [[rng.uniform(0.25, 0.41), rng.uniform(-6.776, -5.544)]]),
])
def test_transport_transparency(serve, model, make_theta):
    h = serve(model)
    remote = connect(h.url, model.name)
    rng = np.random.default_rng(42)
    for _ in range(1000 if isinstance(model, DoublingModel) else 200):
        theta = make_theta(rng)
        direct = model([list(v) for v in theta], {})
        assert remote(theta) == [[float(x) for x in v] for v in direct]


def test_local_models_through_same_batch_helper():
    out = evaluate_batch(DoublingModel(), [[[1.0]], [[2.5]]], parallelism=2)
    assert out == [[[2.0]], [[5.0]]]


def test_retries_on_unavailable(serve):
    calls = {"n": 0}

    class Flaky(DoublingModel):
        def __call__(self, parameters, config):
            calls["n"] += 1
            if calls["n"] == 1:
                from modelbridge.protocol import ProtocolError as PE
                raise PE("Unavailable", "warming up")
            return super().__call__(parameters, config)

    h = serve(Flaky())
    assert connect(h.url, "forward", retries=1)([[1.0]]) == [[2.0]]
    calls["n"] = 0
    with pytest.raises(ProtocolError):
        connect(h.url, "forward", retries=0)([[1.0]])
