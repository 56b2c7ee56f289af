"""Command-line entry points: ``bench``, ``replay`` and ``node``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import List, Optional, Sequence

from .bench import (MemoryBudgetExceeded, WorkloadKind, WorkloadSpec, reports_csv,
                    run_benchmark, sweep_signal_offset)
from .core import ValidationError
from .protocol import PolicyMode
from .simulation import (BUNDLED_SCENARIOS, bundled_scenario, run_simulated_scenario,
                         timeline_csv)
from .timing import DEFAULT_ALPHA, DEFAULT_INITIAL_RATE, DEFAULT_QUANTILE, TimingConfig

log = logging.getLogger("adapm")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int_list(text: str) -> List[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if any(x < 0 for x in out):
        raise argparse.ArgumentTypeError("values must be non-negative")
    return out


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _add_workload_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("workload")
    g.add_argument("--workload", choices=[k.value for k in WorkloadKind], default="zipf")
    g.add_argument("--mode", choices=[m.value for m in PolicyMode], default="adapm")
    g.add_argument("--nodes", type=_positive, default=4)
    g.add_argument("--workers", type=_positive, default=2, help="workers per node")
    g.add_argument("--keys", type=_positive, default=10_000)
    g.add_argument("--value-len", type=_positive, default=8)
    g.add_argument("--batches", type=_positive, default=200, help="batches per epoch per worker")
    g.add_argument("--batch-size", type=_positive, default=16)
    g.add_argument("--zipf", type=float, default=1.1, help="zipf exponent")
    g.add_argument("--epochs", type=_positive, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--signal-offset", type=int, default=None,
                   help="batches ahead that intent is signaled (default 16)")
    t = p.add_argument_group("action timing")
    t.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    t.add_argument("--quantile", type=float, default=DEFAULT_QUANTILE)
    t.add_argument("--initial-rate", type=float, default=DEFAULT_INITIAL_RATE)
    n = p.add_argument_group("network")
    n.add_argument("--rounds-per-sec", type=float, default=None,
                   help="cap on synchronization rounds per second (socket runs)")
    n.add_argument("--channels", type=_positive, default=1,
                   help="accepted for compatibility; one stream per peer pair is used")
    n.add_argument("--transport", choices=["loopback", "socket"], default=None)
    n.add_argument("--manifest", type=Path, default=None, help="lines of 'node_id host:port'")


def _spec(args) -> WorkloadSpec:
    offset = 16 if args.signal_offset is None else args.signal_offset
    if offset < 0:
        raise UsageError("--signal-offset must be non-negative")
    return WorkloadSpec(kind=WorkloadKind(args.workload), num_keys=args.keys,
                        value_len=args.value_len, batches_per_epoch=args.batches,
                        batch_size=args.batch_size, zipf_exponent=args.zipf,
                        signal_offset_batches=offset, seed=args.seed)


def _timing(args) -> TimingConfig:
    return TimingConfig(args.alpha, args.quantile, args.initial_rate)


def _write(path: Optional[Path], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


# -- bench ------------------------------------------------------------------------------

def cmd_bench(args) -> int:
    if args.transport == "socket" or args.manifest is not None:
        raise UsageError("bench runs on the simulated loopback cluster; "
                         "use 'node' for socket runs")
    if args.sweep_offset is not None and args.signal_offset is not None:
        raise UsageError("--sweep-offset and --signal-offset are mutually exclusive")
    if args.trace_keys and args.out is None:
        raise UsageError("--trace-keys needs --out (the trace goes next to it)")
    spec = _spec(args)
    mode = PolicyMode(args.mode)
    kw = dict(nodes=args.nodes, workers_per_node=args.workers, epochs=args.epochs,
              timing=_timing(args), memory_budget=args.memory_budget,
              trace_keys=args.trace_keys or ())
    if args.sweep_offset is not None:
        modes = [mode] if args.mode_given else [PolicyMode.ADAPM, PolicyMode.IMMEDIATE_ACTION]
        reports = list(sweep_signal_offset(spec, args.sweep_offset, modes, **kw).values())
    else:
        reports = [run_benchmark(spec, mode, **kw)]
    _write(args.out, reports_csv(reports))
    if args.out is not None:
        payload = [json.loads(r.to_json()) for r in reports]
        args.out.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True))
        if args.trace_keys:
            trace = "".join(r.trace_csv if i == 0 else r.trace_csv.split("\n", 1)[1]
                            for i, r in enumerate(reports))
            args.out.with_suffix(".trace.csv").write_text(trace)
    failed = [r for r in reports if r.invariant_violations or r.protocol_warnings]
    for r in failed:
        log.error("%s: %d protocol warnings, %d invariant violations", r.mode,
                  r.protocol_warnings, len(r.invariant_violations))
    return EXIT_FAILURE if failed else EXIT_OK


# -- replay -----------------------------------------------------------------------------

def cmd_replay(args) -> int:
    if args.scenario is not None:
        if args.script is not None:
            raise UsageError("give a script path or --scenario, not both")
        text, _ = bundled_scenario(args.scenario)
    elif args.script is not None:
        try:
            text = args.script.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read {args.script}: {exc}")
    else:
        raise UsageError("give a script path or --scenario NAME")
    events = run_simulated_scenario(text, policy=PolicyMode(args.mode), num_nodes=args.nodes)
    _write(args.out, timeline_csv(events))
    return EXIT_OK


# -- node -------------------------------------------------------------------------------

def cmd_node(args) -> int:
    from .realtime import NodeRunConfig, run_node
    from .transport import SocketTransport, TransportError, read_manifest

    if args.transport == "loopback":
        raise UsageError("node runs over sockets; loopback runs use 'bench'")
    if args.manifest is None or args.node_id is None:
        raise UsageError("node needs --manifest and --node-id")
    try:
        peers = read_manifest(args.manifest)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc))
    if args.node_id not in peers:
        raise UsageError(f"node {args.node_id} is not in {args.manifest}")
    if sorted(peers) != list(range(len(peers))):
        raise UsageError("manifest node ids must be 0..N-1")
    cfg = NodeRunConfig(_spec(args), PolicyMode(args.mode), args.workers, args.epochs,
                        _timing(args), args.rounds_per_sec, args.compute_ms,
                        args.channels)
    stop = threading.Event()

    def on_term(signum, frame):
        log.warning("node %d: signal %d, draining", args.node_id, signum)
        stop.set()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, on_term)
    try:
        transport = SocketTransport(args.node_id, peers, args.connect_attempts)
    except OSError as exc:
        log.error("node %d: cannot listen: %s", args.node_id, exc)
        return EXIT_FAILURE
    try:
        result = run_node(args.node_id, len(peers), transport, cfg, stop=stop)
    except TransportError as exc:
        log.error("node %d: %s", args.node_id, exc)
        return EXIT_FAILURE
    finally:
        transport.close()
    result["interrupted"] = stop.is_set()
    _write(args.out, json.dumps(result, sort_keys=True) + "\n")
    return EXIT_OK if result["protocol_warnings"] == 0 else EXIT_FAILURE


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adapm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run a simulated benchmark, write metrics CSV/JSON")
    _add_workload_flags(b)
    b.add_argument("--sweep-offset", type=_int_list, default=None,
                   help="comma-separated signal offsets; runs adapm and immediate-action")
    b.add_argument("--trace-keys", type=_int_list, default=None)
    b.add_argument("--memory-budget", type=_positive, default=None,
                   help="bytes of parameter values a node may hold")
    b.add_argument("--out", type=Path, default=None,
                   help="CSV path; JSON (and trace) written next to it. Default: CSV to stdout")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("replay", help="replay an intent script, print the event timeline")
    r.add_argument("script", type=Path, nargs="?")
    r.add_argument("--scenario", choices=BUNDLED_SCENARIOS, default=None,
                   help="replay a bundled scenario instead of a file")
    r.add_argument("--mode", choices=[m.value for m in PolicyMode], default="adapm")
    r.add_argument("--nodes", type=_positive, default=None,
                   help="cluster size (default: inferred from the script)")
    r.add_argument("--out", type=Path, default=None)
    r.set_defaults(func=cmd_replay)

    n = sub.add_parser("node", help="run one node of a multi-process socket cluster")
    _add_workload_flags(n)
    n.add_argument("--node-id", type=int, default=None)
    n.add_argument("--connect-attempts", type=_positive, default=50,
                   help="connection attempts per peer before giving up")
    n.add_argument("--compute-ms", type=float, default=0.0,
                   help="simulated compute per access, slept by the workers")
    n.add_argument("--out", type=Path, default=None, help="final JSON (default: stdout)")
    n.set_defaults(func=cmd_node)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)  # exits 2 on bad flags
    args.mode_given = any(a == "--mode" or a.startswith("--mode=") for a in argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValidationError) as exc:
        print(f"adapm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MemoryBudgetExceeded as exc:
        print(f"adapm {args.command}: out of memory: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"adapm {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
