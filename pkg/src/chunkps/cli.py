"""Command-line entry points: chunkps {server,worker,simulate-switch,bench}.

The server also accepts ``--config FILE`` with plain ``key = value`` lines
(no sections) whose keys match the flag names; explicit flags override the
file.
"""

from __future__ import annotations

import argparse
import sys

from .aggregation import AggregationMode
from .errors import ChunkPSError
from .model import DEFAULT_CHUNK_BYTES
from .server import Deployment, ServerConfig, run_server
from .worker import WorkerConfig, WorkerMode, run_worker


def _parse_elements(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def load_flat_config(path: str) -> dict[str, str]:
    """Plain key = value lines; '#' starts a comment; blank lines ignored."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ChunkPSError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _add_server_parser(sub) -> None:
    p = sub.add_parser("server", help="run one parameter-server process")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--listen", help="comma-separated addr:port, one per endpoint")
    p.add_argument("--cores", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--chunk-bytes", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--agg-mode", choices=["fast", "det"])
    p.add_argument("--deploy", choices=["central", "pbox", "shard"])
    p.add_argument("--shard-index", type=int)
    p.add_argument("--shard-count", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--metrics", help="write per-iteration metrics CSV here")
    p.add_argument("--model-elements", help="comma-separated element counts per key")
    p.add_argument("--single-thread", action="store_true", default=None,
                   help="run readers and shards on one polled thread")


def _server_config(args) -> ServerConfig:
    values: dict[str, str] = {}
    if args.config:
        values = load_flat_config(args.config)

    def pick(flag_value, key, cast, default=None):
        if flag_value is not None:
            return flag_value
        if key in values:
            return cast(values[key])
        return default

    listen = pick(args.listen, "listen", str)
    model_elements = pick(args.model_elements, "model-elements", str)
    iters = pick(args.iters, "iters", int)
    workers = pick(args.workers, "workers", int)
    missing = [name for name, v in
               [("--listen", listen), ("--model-elements", model_elements),
                ("--iters", iters), ("--workers", workers)] if v is None]
    if missing:
        raise ChunkPSError(f"missing required options: {', '.join(missing)}")
    return ServerConfig(
        listen=tuple(a.strip() for a in str(listen).split(",") if a.strip()),
        worker_count=int(workers),
        model_elements=_parse_elements(str(model_elements)),
        iters=int(iters),
        core_count=pick(args.cores, "cores", int, 1),
        group_count=pick(args.groups, "groups", int, 1),
        chunk_bytes=pick(args.chunk_bytes, "chunk-bytes", int, DEFAULT_CHUNK_BYTES),
        learning_rate=pick(args.lr, "lr", float, 0.05),
        agg_mode=AggregationMode(pick(args.agg_mode, "agg-mode", str, "det")),
        deploy=Deployment(pick(args.deploy, "deploy", str, "central")),
        shard_index=pick(args.shard_index, "shard-index", int, 0),
        shard_count=pick(args.shard_count, "shard-count", int, 1),
        metrics_path=pick(args.metrics, "metrics", str),
        single_thread=bool(pick(args.single_thread, "single-thread",
                                lambda v: v.lower() in ("1", "true", "yes"), False)),
    )


def _add_worker_parser(sub) -> None:
    p = sub.add_parser("worker", help="run one training worker")
    p.add_argument("--connect", required=True, help="comma-separated server addresses")
    p.add_argument("--id", type=int, required=True, dest="worker_id")
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--mode", choices=["logreg", "zero"], default="logreg")
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--samples", type=int, default=100, help="samples per worker")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--model-elements", help="element counts per key (defaults to one key of --dim)")
    p.add_argument("--metrics", help="write this worker's per-iteration CSV here")


def _worker_config(args) -> WorkerConfig:
    return WorkerConfig(
        worker_id=args.worker_id,
        connect=tuple(a.strip() for a in args.connect.split(",") if a.strip()),
        worker_count=args.workers,
        iters=args.iters,
        mode=WorkerMode(args.mode),
        seed=args.seed,
        samples_per_worker=args.samples,
        feature_dim=args.dim,
        model_elements=_parse_elements(args.model_elements) if args.model_elements else None,
        metrics_path=args.metrics,
    )


def _add_switch_parser(sub) -> None:
    p = sub.add_parser("simulate-switch", help="run the in-network aggregation emulator")
    p.add_argument("--racks", type=int, required=True)
    p.add_argument("--workers-per-rack", type=int, required=True)
    p.add_argument("--model-bytes", type=int, required=True)
    p.add_argument("--chunk-bytes", type=int, default=DEFAULT_CHUNK_BYTES)
    p.add_argument("--scale", type=int, default=65536)
    p.add_argument("--region-bytes", type=int, default=1024)
    p.add_argument("--acc-width", type=int, choices=[32, 64], default=32)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="write metric,value CSV here")


def _add_bench_parser(sub) -> None:
    p = sub.add_parser("bench", help="run an experiment config end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="merged metrics CSV path")
    p.add_argument("--single-thread", action="store_true", default=None,
                   help="force the deterministic single-thread harness")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="chunkps")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_server_parser(sub)
    _add_worker_parser(sub)
    _add_switch_parser(sub)
    _add_bench_parser(sub)
    args = parser.parse_args(argv)

    try:
        if args.command == "server":
            return run_server(_server_config(args))
        if args.command == "worker":
            run_worker(_worker_config(args))
            return 0
        if args.command == "simulate-switch":
            from .switch import simulate

            summary = simulate(
                racks=args.racks,
                workers_per_rack=args.workers_per_rack,
                model_bytes=args.model_bytes,
                chunk_bytes=args.chunk_bytes,
                scale=args.scale,
                region_bytes=args.region_bytes,
                acc_width=args.acc_width,
                seed=args.seed,
                out=args.out,
            )
            for key, value in summary.items():
                print(f"{key} = {value:.9g}")
            return 0
        if args.command == "bench":
            from .bench import ExperimentConfig, run_experiment, run_switch_section

            exp = ExperimentConfig.from_file(args.config)
            if args.single_thread:
                exp.single_thread = True
            if exp.switch is not None:
                for key, value in run_switch_section(exp.switch).items():
                    print(f"switch.{key} = {value:.9g}")
            if not exp.has_training:
                return 0
            outcome = run_experiment(exp, out=args.out)
            for failure in outcome.accounting.failures:
                print(f"accounting failure: {failure}", file=sys.stderr)
            print(
                f"iterations={len(outcome.report.rows)} "
                f"header_ratio={outcome.accounting.header_ratio:.6f} "
                f"accounting={'ok' if outcome.accounting.passed else 'FAILED'}"
            )
            return 0 if outcome.passed else 1
    except ChunkPSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
