"""Command-line entry points.

Exit codes: 0 success, 2 usage or configuration error, 3 resource error
(port busy, backend unreachable).
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RESOURCE = 0, 2, 3


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _json_obj(text: str):
    try:
        return json.loads(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON: {exc}") from None


def _ready(port: int) -> None:
    print(f"READY port={port}", flush=True)


def _block_until_signal(handle) -> None:
    def stop(signum, frame):
        handle.shutdown()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    while not handle.wait(0.5):
        pass


def build_model(args):
    from . import models

    kwargs = {}
    if args.name:
        kwargs["name"] = args.name
    if args.model == "delay":
        return models.DelayModel(delay_ms=args.delay_ms, dim=args.dim, **kwargs)
    if args.model == "linear":
        return models.LinearModel(args.matrix, **kwargs)
    if args.model == "posterior":
        return models.MultiFidelityGaussianPosterior(
            mean=args.mean, cov=args.cov, b0=args.b0, levels=args.levels, **kwargs
        )
    return models.ZOO[args.model](**kwargs)


def cmd_serve(args) -> int:
    from .server import serve_models

    model = build_model(args)
    try:
        handle = serve_models([model], args.port, host=args.host, max_concurrent_per_model=args.max_concurrent)
    except OSError as exc:
        print(f"error: cannot bind port: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    _ready(handle.port)
    _block_until_signal(handle)
    return EXIT_OK


def cmd_balance(args) -> int:
    from .balancer import BalancerConfig, BalancerError, load_backend_list, run_balancer

    try:
        urls = load_backend_list(args.backends)
        cfg = BalancerConfig(
            urls,
            listen_port=args.port,
            host=args.host,
            retry_on_failure=not args.no_retry,
            health_interval=args.health_interval,
            queue_capacity=args.queue_capacity,
        )
        handle = run_balancer(cfg)
    except (BalancerError, OSError, ValueError, KeyError) as exc:
        code = EXIT_RESOURCE if isinstance(exc, OSError) and not isinstance(exc, FileNotFoundError) else EXIT_USAGE
        print(f"error: {exc}", file=sys.stderr)
        return code
    _ready(handle.port)
    _block_until_signal(handle)
    return EXIT_OK


def cmd_bench_scaling(args) -> int:
    from .bench import run_scaling, write_reports

    reports = run_scaling(args.backends_per_step, args.requests_per_worker, args.delay_ms)
    write_reports(args.out, reports)
    for r in reports:
        print(f"backends={r.backends} makespan={r.makespan_s:.3f}s ideal={r.ideal_s:.3f}s "
              f"efficiency={r.efficiency:.3f} status={r.status}")
    return EXIT_OK if all(r.status == "ok" for r in reports) else EXIT_RESOURCE


def _connect(args):
    from .client import connect
    from .protocol import ProtocolError

    try:
        return connect(args.url, args.name)
    except ProtocolError as exc:
        raise UsageError(str(exc)) if exc.kind.value == "UnknownModel" else ConnectionError(str(exc))


def _check_dimension(model, dim: int, config=None) -> None:
    sizes = list(model.get_input_sizes(config))
    if sizes != [dim]:
        raise UsageError(f"model expects input sizes {sizes}, distribution has dimension {dim}")


def cmd_uq(args) -> int:
    from .uq import io

    model = _connect(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.uq_command in ("forward", "qmc"):
        return _uq_forward(args, model, out, io)
    return _uq_chain(args, model, out, io)


def _uq_forward(args, model, out: Path, io) -> int:
    from .uq import Product, kde, mc_mean, qmc_mean
    from .uq.distributions import parse_distribution

    try:
        dist = Product([parse_distribution(d) for d in args.dist])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _check_dimension(model, dist.dim, args.config)
    if args.uq_command == "qmc":
        try:
            dist.check_ppf()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        est = qmc_mean(model, dist, args.n, args.parallelism, config=args.config)
    else:
        est = mc_mean(model, dist, args.n, args.parallelism, seed=args.seed, config=args.config)
    io.write_samples_csv(out / "samples.csv", est.points, est.values)
    summary = {"method": est.provenance, "n": est.n, "mean": est.mean, "stderr": est.stderr, "seed": args.seed}
    if args.uq_command == "forward":
        bandwidth = args.bandwidth if args.bandwidth == "auto" else float(args.bandwidth)
        density = kde(est.values[:, 0], bandwidth, positive=args.positive)
        io.write_kde_csv(out / "kde.csv", density.grid, density.density)
        summary["kde_bandwidth"] = density.bandwidth
    io.write_json(out / "summary.json", summary)
    print(json.dumps({"mean": est.mean.tolist()}))
    return EXIT_OK


def _uq_chain(args, model, out: Path, io) -> int:
    from .uq import MldaHierarchy, mlda, model_log_density, rwm

    theta0 = args.theta0
    _check_dimension(model, len(theta0), args.config if args.uq_command == "rwm" else None)
    if args.uq_command == "rwm":
        results = [rwm(model_log_density(model, args.config), theta0, args.sigma, args.n, args.seed)]
    else:
        configs = args.level_configs or [{"level": level} for level in range(args.levels)]
        if len(args.subsampling) != len(configs) - 1:
            raise UsageError(f"{len(configs)} levels need {len(configs) - 1} subsampling rates")
        hierarchy = MldaHierarchy([model_log_density(model, c) for c in configs], args.subsampling, args.sigma)
        results = mlda(hierarchy, theta0, args.n_fine, args.chains, args.seed, args.parallelism)
    io.write_chains_csv(out / "samples.csv", results)
    summary = io.chain_summary(results)
    summary["seed"] = args.seed
    io.write_json(out / "summary.json", summary)
    print(json.dumps({"pooled_mean": summary["pooled_mean"].tolist() if summary["pooled_mean"] is not None
                      else None}))
    return EXIT_OK if not summary["failed_chains"] else EXIT_RESOURCE


def build_parser() -> argparse.ArgumentParser:
    from .models import ZOO

    parser = argparse.ArgumentParser(prog="modelbridge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="serve a benchmark model")
    p.add_argument("--model", required=True, choices=sorted(ZOO))
    p.add_argument("--name", help="served model name (default: the model's own)")
    p.add_argument("--port", type=int, default=None, help="default: $BRIDGE_PORT or 4242; 0 picks a free port")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--max-concurrent", type=int, default=1)
    p.add_argument("--delay-ms", type=float, default=250.0)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--matrix", type=_json_obj, default=[[2.0]], help="JSON matrix for the linear model")
    p.add_argument("--mean", type=_floats, default=[0.0, 0.0])
    p.add_argument("--cov", type=_json_obj, default=[[1.0, 0.0], [0.0, 1.0]])
    p.add_argument("--b0", type=float, default=0.5)
    p.add_argument("--levels", type=int, default=3)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("balance", help="run the one-in-flight load balancer")
    p.add_argument("--backends", required=True, help="comma-separated URLs or a JSON file")
    p.add_argument("--port", type=int, default=4242)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--health-interval", type=float, default=5.0)
    p.add_argument("--queue-capacity", type=int, default=10_000)
    p.add_argument("--no-retry", action="store_true")
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("bench-scaling", help="weak-scaling benchmark through the balancer")
    p.add_argument("--backends-per-step", type=_ints, default=[1, 2, 4, 8])
    p.add_argument("--requests-per-worker", type=int, default=20)
    p.add_argument("--delay-ms", type=float, default=250.0)
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_bench_scaling)

    p = sub.add_parser("uq", help="run a UQ method against a served model")
    uq = p.add_subparsers(dest="uq_command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--url", default="http://127.0.0.1:4242")
    common.add_argument("--name", default="forward")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--parallelism", type=int, default=1)
    common.add_argument("--config", type=_json_obj, default={})
    common.add_argument("--out", default="uq-out")
    for name in ("forward", "qmc"):
        q = uq.add_parser(name, parents=[common])
        q.add_argument("--dist", action="append", required=True,
                       help="one per input component, e.g. triangular:0.25,0.41 or beta:-6.776,-5.544,10,10")
        q.add_argument("--n", type=int, default=10_000 if name == "forward" else 256)
        q.add_argument("--bandwidth", default="auto")
        q.add_argument("--positive", action="store_true", help="KDE on positive support")
    q = uq.add_parser("rwm", parents=[common])
    q.add_argument("--theta0", type=_floats, required=True)
    q.add_argument("--sigma", type=_floats, default=[1.0])
    q.add_argument("--n", type=int, default=1000)
    q = uq.add_parser("mlda", parents=[common])
    q.add_argument("--theta0", type=_floats, required=True)
    q.add_argument("--sigma", type=_floats, default=[1.0])
    q.add_argument("--levels", type=int, default=3, help="levels 0..N-1, passed as config {'level': l}")
    q.add_argument("--level-configs", type=_json_obj, help="JSON list of per-level configs, coarse to fine")
    q.add_argument("--subsampling", type=_ints, default=[25, 2])
    q.add_argument("--n-fine", type=int, default=500)
    q.add_argument("--chains", type=int, default=4)
    p.set_defaults(func=cmd_uq)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConnectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
