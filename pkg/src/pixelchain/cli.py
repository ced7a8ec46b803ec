"""Operator entry points: assemble topologies and run the experiments.

Exit codes: 0 success, 2 configuration error, 3 runtime failure, 4 audit
failure. Every flag has an environment-variable mirror named
``PIXELCHAIN_<FLAG>`` (dashes as underscores, e.g. ``PIXELCHAIN_WINDOW_US``);
explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
from pathlib import Path

from . import __version__, regproto
from .chain import run_topology
from .measure import linearity_sweep, write_csv, write_report, write_sweep_csv
from .topology import TopologyError, load_topology
from .transport import (DEFAULT_SINK_PORT, GeneratorSpec, LinkModel,
                        SinkServer, send_traffic)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_AUDIT = 4

_ENV_PREFIX = "PIXELCHAIN_"


def _env(flag: str, fallback=None):
    return os.environ.get(_ENV_PREFIX + flag.upper().replace("-", "_"), fallback)


def _endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _gap(text: str) -> tuple[int, int]:
    """P:G idle-word gap spec, e.g. 1527:973."""
    try:
        p, g = text.split(":")
        p, g = int(p), int(g)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected P:G integers, got {text!r}")
    if p < 1 or g < 0:
        raise argparse.ArgumentTypeError("need P >= 1 and G >= 0")
    return p, g


def _rates(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rate list {text!r}")


def _outdir(path: str | None) -> Path | None:
    if path is None:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixelchain",
        description="Readout-chain simulator and DAQ tools.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    chain = sub.add_parser("run-chain", help="run a chain topology end to end")
    chain.add_argument("--topology", default=_env("topology"), required=_env("topology") is None)
    chain.add_argument("--mode", choices=["virtual", "real"], default=_env("mode"))
    chain.add_argument("--duration", type=float, default=_env("duration"))
    chain.add_argument("--seed", type=int, default=_env("seed"))
    chain.add_argument("--window-us", type=float, default=_env("window-us"))
    chain.add_argument("--out", default=_env("out"))

    daq = sub.add_parser("run-daq", help="TCP sink: receive one stream and measure it")
    daq.add_argument("--listen", type=_endpoint,
                     default=_endpoint(_env("listen", f"127.0.0.1:{DEFAULT_SINK_PORT}")))
    daq.add_argument("--window-us", type=float, default=float(_env("window-us", 100.0)))
    daq.add_argument("--seed", type=int, default=int(_env("seed", 0)))
    daq.add_argument("--content-check", choices=["auto", "off"], default="auto")
    daq.add_argument("--accept-timeout", type=float, default=None,
                     help="give up if no client connects in time")
    daq.add_argument("--out", default=_env("out"))

    gen = sub.add_parser("gen-traffic", help="paced repeating-payload TCP sender")
    gen.add_argument("--target", type=_endpoint,
                     default=_endpoint(_env("target", f"127.0.0.1:{DEFAULT_SINK_PORT}")))
    gen.add_argument("--clock-hz", type=float, default=156.25e6)
    gen.add_argument("--word-bits", type=int, default=64)
    gen.add_argument("--duty", type=float, default=1.0)
    gen.add_argument("--gap", type=_gap, default=(1, 0),
                     help="P:G idle words per P payload words (default 1:0)")
    gen.add_argument("--duration", type=float, default=float(_env("duration", 1.0)))
    gen.add_argument("--frame-bytes", type=int, default=8192,
                     help="payload bytes per frame")
    gen.add_argument("--board-id", type=int, default=0xFEED)
    gen.add_argument("--seed", type=int, default=int(_env("seed", 0)))

    reg = sub.add_parser("regctl", help="read/write board registers over UDP")
    reg.add_argument("--endpoint", type=_endpoint,
                     default=_endpoint(_env("endpoint", "127.0.0.1:24576")))
    reg.add_argument("--timeout", type=float, default=0.1)
    reg.add_argument("--retries", type=int, default=8)
    reg.add_argument("op", choices=["read", "write"])
    reg.add_argument("addr", help="register address (hex ok) or name")
    reg.add_argument("values", nargs="*",
                     help="read: optional count; write: one or more values")

    sweep = sub.add_parser("sweep", help="virtual linearity sweep through one link")
    sweep.add_argument("--rates", type=_rates,
                       default=[1e9 * k for k in range(1, 10)])
    sweep.add_argument("--duration-per-point", type=float, default=0.5)
    sweep.add_argument("--link-rate", type=float, default=10e9)
    sweep.add_argument("--gap", type=_gap, default=(1, 0))
    sweep.add_argument("--frame-bytes", type=int, default=1024)
    sweep.add_argument("--window-us", type=float, default=float(_env("window-us", 100.0)))
    sweep.add_argument("--out", default=_env("out"))
    return parser


def _write_run_artifacts(result, out: Path | None) -> None:
    if out is None:
        return
    write_csv(result.series, out / "throughput.csv")
    write_report(result.report, out / "report.json", out / "report.txt",
                 extra={"mode": result.mode,
                        "frames": result.audit.total_frames,
                        "wall_seconds": result.wall_s})
    with open(out / "audit.json", "w") as fh:
        json.dump(result.audit_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_run_chain(args) -> int:
    try:
        topo = load_topology(args.topology)
        if args.mode:
            topo.mode = args.mode
        if args.duration is not None:
            topo.duration_s = float(args.duration)
        if args.seed is not None:
            topo.seed = int(args.seed)
        if args.window_us is not None:
            topo.window_us = float(args.window_us)
        topo.validate()
    except TopologyError as err:
        for p in err.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_topology(topo)
    except Exception as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_run_artifacts(result, _outdir(args.out))
    rep = result.report
    print(f"{result.mode} run: {result.audit.total_frames} frames, "
          f"{rep.total_bytes} bytes, mean {rep.mean_bps / 1e9:.6f} Gbps "
          f"over {rep.n_windows} windows")
    for s in result.board_stats:
        print(f"  board {s.board_id}: generated {s.generated_frames}, "
              f"overflowed {s.overflow_count}, "
              f"fifo peak {s.fifo_max_occupancy_bytes} B")
    if result.audit_passed:
        print("audit: PASS")
        return EXIT_OK
    print("audit: FAIL", file=sys.stderr)
    for p in result.problems:
        print(f"  {p}", file=sys.stderr)
    return EXIT_AUDIT


def _cmd_run_daq(args) -> int:
    server = SinkServer(args.listen[0], args.listen[1],
                        window_us=args.window_us, seed=args.seed,
                        content_check=args.content_check)
    previous = {}

    def _interrupt(signum, _frame):
        server.stop()

    for sig in (signal.SIGINT, signal.SIGTERM):
        previous[sig] = signal.signal(sig, _interrupt)
    try:
        print(f"listening on {server.endpoint[0]}:{server.endpoint[1]}")
        result = server.serve_one(accept_timeout=args.accept_timeout)
    except TimeoutError:
        print("no client connected", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    out = _outdir(args.out)
    if out is not None:
        write_csv(result.series, out / "throughput.csv")
        write_report(result.report, out / "report.json", out / "report.txt",
                     extra={"mode": "daq", "frames": result.frames})
        with open(out / "audit.json", "w") as fh:
            json.dump(result.audit.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"received {result.frames} frames / {result.bytes} bytes, "
          f"mean {result.report.mean_bps / 1e9:.6f} Gbps, "
          f"{len(result.framing_errors)} framing errors")
    for err in result.framing_errors[:10]:
        print(f"  framing: {err}", file=sys.stderr)
    return EXIT_OK if not result.framing_errors else EXIT_AUDIT


def _cmd_gen_traffic(args) -> int:
    spec = GeneratorSpec(args.clock_hz, args.word_bits, args.duty)
    p, g = args.gap
    frac = p / (p + g)
    print(f"offered {spec.offered_bps / 1e9:.6f} Gbps"
          + (f", gap {p}:{g} -> paced {spec.offered_bps * frac / 1e9:.6f} Gbps"
             if g else ""))
    try:
        summary = send_traffic(args.target, spec, args.duration,
                               frame_payload_bytes=args.frame_bytes,
                               gap_fraction=frac, board_id=args.board_id,
                               seed=args.seed)
    except ConnectionRefusedError:
        print(f"connection refused by {args.target[0]}:{args.target[1]}",
              file=sys.stderr)
        return EXIT_RUNTIME
    except (ConnectionResetError, BrokenPipeError):
        print("connection reset by sink", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"sent {summary.frames_sent} frames / {summary.bytes_sent} bytes "
          f"in {summary.wall_s:.3f} s, achieved "
          f"{summary.achieved_bps / 1e9:.6f} Gbps")
    return EXIT_OK


def _reg_addr(text: str) -> int:
    if text in regproto.REGISTER_MAP:
        return regproto.REGISTER_MAP[text][0]
    return int(text, 0)


def _cmd_regctl(args) -> int:
    try:
        addr = _reg_addr(args.addr)
    except ValueError:
        print(f"bad register {args.addr!r}", file=sys.stderr)
        return EXIT_CONFIG
    client = regproto.RegClient(args.endpoint, timeout=args.timeout,
                                retries=args.retries)
    try:
        if args.op == "read":
            count = int(args.values[0], 0) if args.values else 1
            values = client.read(addr, count)
        else:
            if not args.values:
                print("write needs at least one value", file=sys.stderr)
                return EXIT_CONFIG
            values = client.write_verified(
                addr, [int(v, 0) for v in args.values])
        for i, v in enumerate(values):
            name = regproto.REGISTER_NAMES.get(addr + 4 * i, "")
            print(f"{addr + 4 * i:#06x} {name:<17} {v:#010x}  {v}")
        return EXIT_OK
    except regproto.RegError as err:
        print(f"error reply: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except regproto.VerifyMismatch as err:
        print(f"verify mismatch: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except regproto.Timeout as err:
        print(f"timeout: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        client.close()


def _cmd_sweep(args) -> int:
    p, g = args.gap
    link = LinkModel(args.link_rate, p, g)
    points = linearity_sweep(args.rates, args.duration_per_point, link,
                             frame_payload_bytes=args.frame_bytes,
                             window_us=args.window_us)
    print("offered_gbps measured_gbps ratio")
    failed = False
    for pt in points:
        if pt.error is not None:
            failed = True
            print(f"{pt.offered_bps / 1e9:12.4f} {'-':>13} {'-':>6}  {pt.error}")
        else:
            print(f"{pt.offered_bps / 1e9:12.4f} {pt.measured_bps / 1e9:13.6f} "
                  f"{pt.ratio:6.4f}")
    out = _outdir(args.out)
    if out is not None:
        write_sweep_csv(points, out / "sweep.csv")
    return EXIT_RUNTIME if failed else EXIT_OK


_COMMANDS = {
    "run-chain": _cmd_run_chain,
    "run-daq": _cmd_run_daq,
    "gen-traffic": _cmd_gen_traffic,
    "regctl": _cmd_regctl,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
