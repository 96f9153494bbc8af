"""CLI module - the mvcache command line.

Usage:
    mvcache datagen pan --frames 60 --out seq/pan
    mvcache calibrate seq/pan seq/two_region --alpha 0.97 --out thresholds.txt
    mvcache profile --endpoint edge --out edge.csv
    mvcache run seq/pan --mode fluxshard --tier low --out pan_low.csv
    mvcache serve --port 7070
    mvcache report pan_low.csv pan_high.csv

Exit codes: 0 on success, 2 on usage errors, 1 on any other mvcache
error. The log level comes from FS_LOG.
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from mvcache import __version__
from mvcache.adapters.client import TcpOffloadClient
from mvcache.adapters.link import BANDWIDTH_TIERS, build_link
from mvcache.adapters.server import OffloadServer
from mvcache.core.errors import MVCacheError, UsageError
from mvcache.core.events import EventBus
from mvcache.core.network import NetworkSpec, build_network, default_network_config, load_network
from mvcache.core.reuse import ThresholdVector, read_thresholds
from mvcache.core.rfap import RfapMode
from mvcache.core.settings import (
    CalibrationConfig,
    DispatchConfig,
    LinkConfig,
    PipelineOptions,
    PixelFormat,
    ReuseMode,
)
from mvcache.logging_setup import configure_logging
from mvcache.modules.datagen import DEFAULT_PARAMS, SCENARIOS, datagen, load_sequence
from mvcache.modules.metrics import MetricsRecorder
from mvcache.modules.report import report
from mvcache.services.calibration import Calibrator, write_calibration
from mvcache.services.dispatch import FrameDriver, LatencyModel
from mvcache.services.profiling import DEFAULT_RHOS, ProfileSource, profile_endpoint

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


def _parse_param(text: str) -> Tuple[str, int]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise UsageError(f"Scenario parameters take the form key=value, got '{text}'")
    try:
        return key.strip(), int(value)
    except ValueError:
        raise UsageError(f"Scenario parameter {key} needs an integer, got '{value}'")


def _parse_floats(text: str, what: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of numbers, got '{text}'")


def _parse_server(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise UsageError(f"--server takes host:port, got '{text}'")
    return host, int(port)


def _pipeline_options(args: argparse.Namespace) -> PipelineOptions:
    if args.no_rfap and args.per_layer_rfap:
        raise UsageError("--no-rfap and --per-layer-rfap are mutually exclusive")
    rfap = RfapMode.COMPACT
    if args.no_rfap:
        rfap = RfapMode.OFF
    elif args.per_layer_rfap:
        rfap = RfapMode.PER_LAYER
    return PipelineOptions(
        mode=ReuseMode(getattr(args, "mode", ReuseMode.FLUXSHARD.value)),
        rfap=rfap,
        remap=not args.no_remap,
        sparse=not args.no_sparse,
    )


def _network(args: argparse.Namespace, height: int, width: int) -> NetworkSpec:
    if args.net:
        net = load_network(args.net)
    else:
        net = build_network(default_network_config(height, width))
    if tuple(net.input_shape[:2]) != (height, width):
        raise UsageError(
            f"Network input {net.input_shape[0]}x{net.input_shape[1]} does not match frames {height}x{width}"
        )
    return net


def _thresholds(args: argparse.Namespace, net: NetworkSpec) -> ThresholdVector:
    if args.thresholds:
        return read_thresholds(args.thresholds)
    return ThresholdVector.zeros(net.profiled_layers)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
        logger.info(f"Wrote {out}")
    else:
        sys.stdout.write(text)


def cmd_datagen(args: argparse.Namespace) -> int:
    params: Dict[str, Any] = dict(_parse_param(p) for p in args.param)
    path = datagen(args.scenario, args.frames, args.out, args.height, args.width, args.seed, **params)
    print(f"{args.scenario}: {args.frames} frames -> {path}")
    return EXIT_OK


async def _run_stream(args: argparse.Namespace) -> str:
    sequence = load_sequence(args.sequence)
    h, w = sequence.manifest["height"], sequence.manifest["width"]
    net = _network(args, h, w)
    thresholds = _thresholds(args, net)
    options = _pipeline_options(args)
    config = DispatchConfig(
        epsilon_ms=args.epsilon,
        ewma_weight=args.ewma,
        propagation_ms=args.propagation,
        block_size=sequence.manifest["block_size"],
        search_radius=args.search_radius,
        pixel_format=PixelFormat(args.pixel_format),
        edge_only=args.edge_only,
    )
    link = build_link(
        LinkConfig(propagation_ms=args.propagation, trace_path=args.trace, tier=args.tier),
        seed=args.seed,
    )
    edge_model = LatencyModel.from_csv(args.edge_profile) if args.edge_profile else None
    cloud_model = LatencyModel.from_csv(args.cloud_profile) if args.cloud_profile else None
    client = None
    if args.server:
        host, port = _parse_server(args.server)
        client = TcpOffloadClient(host, port, args.client_id, net.config_hash())

    bus = EventBus()
    recorder = MetricsRecorder(bus)
    driver = FrameDriver(net, thresholds, options, config, edge_model, cloud_model, link, client, bus)
    try:
        await driver.connect()
        for frame, mv in zip(sequence.frames, sequence.motion):
            await driver.run_frame(frame, mv if args.motion == "manifest" else None)
    finally:
        await driver.close()
    summary = recorder.summary()
    logger.info(
        f"{sequence.scenario} [{options.mode.value}]: reuse {summary['reuse'] or 0:.4f}, "
        f"compute {summary['compute_ratio'] or 0:.4f}, T_realized {summary['T_realized_ms'] or 0:.2f} ms"
    )
    return recorder.render()


def cmd_run(args: argparse.Namespace) -> int:
    if args.trace and args.tier:
        raise UsageError("--trace and --tier are mutually exclusive")
    _emit(asyncio.run(_run_stream(args)), args.out)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    sequences = [load_sequence(path) for path in args.sequences]
    shapes = {(s.manifest["height"], s.manifest["width"]) for s in sequences}
    if len(shapes) != 1:
        raise UsageError(f"Calibration sequences must share one frame size, got {sorted(shapes)}")
    h, w = shapes.pop()
    net = _network(args, h, w)
    candidates = [_parse_floats(args.candidates, "--candidates")] if args.candidates else None
    fields: Dict[str, Any] = {
        "alpha": args.alpha,
        "split_ratio": args.split,
        "workers": args.workers,
        "search_radius": args.search_radius,
        "block_size": sequences[0].manifest["block_size"],
    }
    if candidates:
        fields["candidates"] = candidates
    config = CalibrationConfig(**fields)
    calibrator = Calibrator(net, [s.frames for s in sequences], config, _pipeline_options(args))
    result = calibrator.calibrate()
    ids = [Path(p).name for p in args.sequences]
    write_calibration(args.out, result, seed=args.seed, sequence_ids=ids)
    print(
        f"tau0={result.thresholds.tau0:g} fidelity={result.mean_fidelity:.6f} "
        f"compute_ratio={result.mean_compute_ratio:.4f} -> {args.out}"
    )
    return EXIT_OK


def cmd_profile(args: argparse.Namespace) -> int:
    net = _network(args, args.height, args.width)
    rhos = _parse_floats(args.rhos, "--rhos")
    points = profile_endpoint(
        net,
        rhos,
        source=ProfileSource(args.source),
        endpoint=args.endpoint,
        repeats=args.repeats,
        seed=args.seed,
        monotone=args.monotone,
        dense_ms=args.dense_ms,
        overhead_ms=args.overhead_ms,
    )
    lines = ["rho,latency_ms"] + [f"{rho:.6f},{latency:.6f}" for rho, latency in points]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


async def _serve(args: argparse.Namespace) -> None:
    net = _network(args, args.height, args.width)
    server = OffloadServer(net, _thresholds(args, net), _pipeline_options(args))
    host, port = await server.start(args.host, args.port)
    print(f"listening on {host}:{port} (net {server.net_hash:#018x})", flush=True)
    try:
        await server.serve_forever()
    finally:
        await server.stop()


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        asyncio.run(_serve(args))
    except KeyboardInterrupt:
        logger.info("Server interrupted")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    _emit(report(args.csv), args.out)
    return EXIT_OK


def _add_network_args(parser: argparse.ArgumentParser, dims: bool = False) -> None:
    parser.add_argument("--net", help="Network configuration file (default network if omitted)")
    if dims:
        parser.add_argument("--height", type=int, default=128)
        parser.add_argument("--width", type=int, default=128)


def _add_pipeline_args(parser: argparse.ArgumentParser, mode: bool = True) -> None:
    if mode:
        parser.add_argument(
            "--mode", choices=[m.value for m in ReuseMode], default=ReuseMode.FLUXSHARD.value
        )
    parser.add_argument("--thresholds", help="Threshold file (all zero if omitted)")
    parser.add_argument("--no-rfap", action="store_true", help="Disable the receptive-field check")
    parser.add_argument("--per-layer-rfap", action="store_true", help="Run the receptive-field check per layer")
    parser.add_argument("--no-remap", action="store_true", help="Never warp caches")
    parser.add_argument("--no-sparse", action="store_true", help="Run dense on the chosen endpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvcache", description="Motion-aware feature-cache reuse")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="Generate a synthetic sequence")
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--param",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Scenario parameter; " + "; ".join(f"{s}: {', '.join(DEFAULT_PARAMS[s]) or '-'}" for s in SCENARIOS),
    )
    p.add_argument("--out", required=True, help="Output sequence directory")
    p.set_defaults(handler=cmd_datagen)

    p = sub.add_parser("run", help="Drive a sequence through the edge/cloud pipeline")
    p.add_argument("sequence", help="Sequence directory")
    _add_network_args(p)
    _add_pipeline_args(p)
    p.add_argument("--trace", help="Bandwidth trace CSV (t_ms,bps)")
    p.add_argument("--tier", choices=sorted(BANDWIDTH_TIERS), help="Generated bandwidth tier")
    p.add_argument("--edge-profile", help="Edge latency profile CSV")
    p.add_argument("--cloud-profile", help="Cloud latency profile CSV")
    p.add_argument("--edge-only", action="store_true", help="Never offload")
    p.add_argument("--epsilon", type=float, default=5.0, help="Edge preference margin in ms")
    p.add_argument("--ewma", type=float, default=0.3, help="Bandwidth EWMA weight")
    p.add_argument("--propagation", type=float, default=20.0, help="One-way delay in ms")
    p.add_argument("--pixel-format", choices=[f.value for f in PixelFormat], default=PixelFormat.FLOAT32.value)
    p.add_argument("--search-radius", type=int, default=8)
    p.add_argument("--motion", choices=["estimate", "manifest"], default="estimate")
    p.add_argument("--server", metavar="HOST:PORT", help="Offload to a running server")
    p.add_argument("--client-id", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="Seed of generated tier traces")
    p.add_argument("--out", help="Metrics CSV (stdout if omitted)")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("calibrate", help="Calibrate reuse thresholds")
    p.add_argument("sequences", nargs="+", help="Calibration sequence directories")
    _add_network_args(p)
    _add_pipeline_args(p)
    p.add_argument("--alpha", type=float, default=0.97, help="Fidelity retention target")
    p.add_argument("--split", type=float, default=2.0 / 3.0, help="Budget share of the dispatch threshold")
    p.add_argument("--candidates", help="Comma-separated candidate thresholds, starting at 0")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--search-radius", type=int, default=8)
    p.add_argument("--seed", type=int, help="Seed recorded in the threshold file")
    p.add_argument("--out", required=True, help="Threshold file")
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("profile", help="Latency-vs-sparsity sweep")
    _add_network_args(p, dims=True)
    p.add_argument("--endpoint", choices=["edge", "cloud"], default="edge")
    p.add_argument("--source", choices=[s.value for s in ProfileSource], default=ProfileSource.MODEL.value)
    p.add_argument("--rhos", default=",".join(str(r) for r in DEFAULT_RHOS))
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--monotone", action="store_true", help="Apply a running-max envelope")
    p.add_argument("--dense-ms", type=float, help="Model latency at full density")
    p.add_argument("--overhead-ms", type=float, help="Model latency at zero density")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="Profile CSV (stdout if omitted)")
    p.set_defaults(handler=cmd_profile)

    p = sub.add_parser("serve", help="Run the offload server until interrupted")
    _add_network_args(p, dims=True)
    _add_pipeline_args(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7070)
    p.set_defaults(handler=cmd_serve)

    p = sub.add_parser("report", help="Aggregate metrics CSVs")
    p.add_argument("csv", nargs="*", help="Metrics CSV files")
    p.add_argument("--out", help="Report CSV (stdout if omitted)")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        try:
            return args.handler(args)
        except ValidationError as e:
            raise UsageError(str(e)) from e
    except UsageError as e:
        print(f"mvcache {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MVCacheError, OSError) as e:
        logger.debug(f"{args.command} failed", exc_info=True)
        print(f"mvcache {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
