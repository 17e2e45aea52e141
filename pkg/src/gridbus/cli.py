"""Command-line surface: every role as a subcommand, plus the scenario runner.

One-shot commands (master write/read, scan, enum, pwn-write, cycle, detect,
replay, bench, scenario ...) exit when done. Service commands (outstation
serve, proxy run, master poll) run on real sockets until interrupted or until
--run-for elapses, so the roles can be spread across machines or terminals.
All commands accept --format structured for machine-readable output.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import yaml

from . import attacker, capture, detector, scenario as scenario_mod
from .datastore import DataStore, TableKind, map_data_address
from .master import MasterSession, PollPlan
from .net import Runtime, TransportError, parse_endpoint, parse_identity, ZERO_IDENTITY
from .outstation import Outstation, OutstationConfig, UnitConfig
from .interceptor import Proxy, ProxyPlacement
from .scenario import (
    RuntimeFailure,
    ValidationError,
    list_bundled_scenarios,
    load_scenario,
    run_scenario,
)
from .securechannel import SecureOutstation, latency_benchmark, benchmark_pair, open_secure_master


def _print(args, structured_payload, text: str) -> None:
    if getattr(args, "format", "text") == "structured":
        print(json.dumps(structured_payload, indent=2, sort_keys=True))
    else:
        print(text)


def _endpoint(text: str):
    return parse_endpoint(text)


def _identity(text: str):
    return parse_identity(text)


def _coil_value(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("on", "true", "1"):
        return True
    if lowered in ("off", "false", "0"):
        return False
    raise argparse.ArgumentTypeError(f"coil value must be on/off, got {text!r}")


def _wait_or_interrupt(run_for: float) -> None:
    try:
        if run_for > 0:
            time.sleep(run_for)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass


# -- handlers -----------------------------------------------------------------


def cmd_outstation_serve(args) -> int:
    runtime = Runtime.wall()
    hub = capture.CaptureHub(runtime.clock)
    units = {uid: UnitConfig(store=DataStore.create(args.table_size),
                             read_only=args.read_only)
             for uid in args.unit}
    config = OutstationConfig(
        listen_endpoint=(args.host, args.port), units=units,
        link_identity=args.identity, response_delay=args.response_delay,
        silent_drop_unknown_units=args.silent_drop)
    if args.secure_psk:
        station = SecureOutstation(runtime, config, args.secure_psk, hub)
    else:
        station = Outstation(runtime, config, hub)
    station.start()
    print(f"outstation serving units {sorted(units)} on "
          f"{station.endpoint[0]}:{station.endpoint[1]}"
          f"{' (secure)' if args.secure_psk else ''}", flush=True)
    _wait_or_interrupt(args.run_for)
    station.stop()
    if args.capture:
        capture.write_capture(hub.tap("slave-tap").events, args.capture)
    _print(args, vars(station.report), f"report: {vars(station.report)}")
    return 0


def cmd_proxy_run(args) -> int:
    runtime = Runtime.wall()
    hub = capture.CaptureHub(runtime.clock)
    rules = []
    if args.rules:
        with open(args.rules, "r", encoding="utf-8") as fh:
            docs = yaml.safe_load(fh) or []
        rules = [scenario_mod._parse_rule(obj, f"$[{i}]")
                 for i, obj in enumerate(docs)]
    proxy = Proxy(runtime, ProxyPlacement(
        listen_endpoint=args.listen, upstream_endpoint=args.upstream,
        link_identity=args.identity), rules, hub)
    proxy.start()
    print(f"proxy on {proxy.endpoint[0]}:{proxy.endpoint[1]} -> "
          f"{args.upstream[0]}:{args.upstream[1]} with {len(rules)} rule(s)",
          flush=True)
    _wait_or_interrupt(args.run_for)
    proxy.stop()
    if args.capture:
        capture.write_capture(hub.tap("mitm-tap").events, args.capture)
    _print(args, vars(proxy.report), f"report: {vars(proxy.report)}")
    return 0


def _open_cli_master(args, runtime):
    if getattr(args, "secure_psk", None):
        return open_secure_master(runtime, args.target, args.unit,
                                  args.secure_psk, timeout=args.timeout,
                                  retries=args.retries)
    session = MasterSession(runtime, args.target, args.unit,
                            timeout=args.timeout, retries=args.retries)
    session.connect()
    return session


def cmd_master_write(args) -> int:
    runtime = Runtime.wall()
    session = _open_cli_master(args, runtime)
    try:
        table, _ = map_data_address(args.address)
        if table is TableKind.COILS:
            outcome = session.write_single_coil(args.address,
                                                _coil_value(args.value))
        else:
            outcome = session.write_single_register(args.address,
                                                    int(args.value, 0))
    finally:
        session.close()
    payload = {"acknowledged": outcome.acknowledged,
               "echo_matches": outcome.echo_matches}
    _print(args, payload,
           f"acknowledged={outcome.acknowledged} echo_matches={outcome.echo_matches}")
    return 0


def cmd_master_read(args) -> int:
    runtime = Runtime.wall()
    session = _open_cli_master(args, runtime)
    try:
        values = session.read(args.address, args.count)
    finally:
        session.close()
    values = [int(v) for v in values]
    _print(args, {"address": args.address, "values": values},
           f"{args.address}: {values}")
    return 0


def cmd_master_poll(args) -> int:
    runtime = Runtime.wall()
    session = _open_cli_master(args, runtime)
    requests = []
    for spec in args.address:
        addr, _, count = spec.partition(":")
        requests.append((int(addr), int(count) if count else 1))
    try:
        report = session.run_poll_loop(
            PollPlan(period=args.period, requests=requests), cycles=args.cycles)
    finally:
        session.close()
    _print(args, vars(report),
           f"cycles={report.cycles} timeouts={report.timeouts} "
           f"value_changes={report.value_changes}")
    return 0


def cmd_scan(args) -> int:
    runtime = Runtime.wall()
    low, _, high = args.units.partition(":")
    found = attacker.scan_units(runtime, args.target,
                                range(int(low), int(high) + 1),
                                timeout=args.timeout,
                                parallelism=args.parallelism)
    _print(args, {"live_units": found}, f"live units: {found}")
    return 0


def cmd_enum(args) -> int:
    runtime = Runtime.wall()
    result = attacker.enumerate_functions(runtime, args.target, args.unit,
                                          timeout=args.timeout)
    payload = {f"0x{int(fn):02X}": status for fn, status in result.items()}
    text = "\n".join(f"0x{int(fn):02X} {fn.name.lower():26s} {status}"
                     for fn, status in result.items())
    _print(args, payload, text)
    return 0


def cmd_pwn_write(args) -> int:
    runtime = Runtime.wall()
    table, _ = map_data_address(args.address)
    value = (_coil_value(args.value) if table is TableKind.COILS
             else int(args.value, 0))
    outcome = attacker.exploit_write(runtime, args.target, args.unit,
                                     args.address, value, timeout=args.timeout)
    payload = {"acknowledged": outcome.acknowledged,
               "echo_matches": outcome.echo_matches}
    _print(args, payload, f"acknowledged={outcome.acknowledged}")
    return 0


def cmd_cycle(args) -> int:
    runtime = Runtime.wall()
    low, _, high = args.units.partition(":")
    maintain = None
    if args.maintain:
        unit, addr, value, interval, duration = args.maintain.split(":")
        maintain = attacker.MaintainAccess(
            unit_id=int(unit), data_address=int(addr), value=int(value, 0),
            interval=float(interval), duration=float(duration))
    plan = attacker.AttackPlan(
        target=args.target, unit_range=range(int(low), int(high) + 1),
        scan_parallelism=args.parallelism, scan_timeout=args.timeout,
        enumerate_units=args.enum_unit if args.enum_unit else None,
        writes=[tuple(int(x, 0) for x in w.split(":")) for w in args.write],
        reads=[tuple(int(x, 0) for x in r.split(":")) for r in args.read],
        maintain=maintain)
    report = attacker.run_attack_cycle(runtime, plan)
    text_lines = []
    for name, result in report.stages.items():
        text_lines.append(f"{name}: {'ok' if result.success else 'FAILED'}"
                          + (f" - {result.error}" if result.error else ""))
    _print(args, report.to_jsonable(), "\n".join(text_lines))
    return 0 if report.all_successful() else 1


def cmd_detect(args) -> int:
    events = capture.read_capture(args.capture)
    with open(args.policy, "r", encoding="utf-8") as fh:
        policy = detector.policy_from_jsonable(yaml.safe_load(fh) or {})
    findings = detector.analyze(events, policy)
    output = detector.report(findings, args.format
                             if args.format == "structured" else "text")
    print(output, end="" if output.endswith("\n") else "\n")
    return 0


def cmd_replay(args) -> int:
    events = capture.read_capture(args.capture)
    if args.format == "structured":
        for event in events:
            print(json.dumps(capture.event_to_jsonable(event),
                             separators=(",", ":")))
        return 0
    for e in events:
        what = e.kind
        if e.kind == capture.KIND_FRAME:
            pdu = (type(e.decoded.pdu).__name__ if e.decoded is not None
                   else f"undecoded[{len(e.raw)}B]")
            what = f"{e.direction.value:8s} {pdu}"
        print(f"{e.timestamp_ns / 1e9:12.6f}s {e.tap_id:12s} #{e.seq:<5d} "
              f"{e.src_endpoint[0]}:{e.src_endpoint[1]} -> "
              f"{e.dst_endpoint[0]}:{e.dst_endpoint[1]}  {what}")
    print(f"{len(events)} events")
    return 0


def cmd_bench(args) -> int:
    if args.compare:
        pair = benchmark_pair(iterations=args.iterations, topology=args.topology)
        payload = {"secure": pair["secure"].to_jsonable(),
                   "plain": pair["plain"].to_jsonable(),
                   "overhead_ratio_p50": round(pair["overhead_ratio_p50"], 3)}
        text = (f"secure: p50={pair['secure'].p50_us:.1f}us "
                f"p99={pair['secure'].p99_us:.1f}us\n"
                f"plain:  p50={pair['plain'].p50_us:.1f}us "
                f"p99={pair['plain'].p99_us:.1f}us\n"
                f"overhead ratio (p50): {pair['overhead_ratio_p50']:.2f}x")
        _print(args, payload, text)
        return 0
    stats = latency_benchmark(iterations=args.iterations, topology=args.topology,
                              secure=not args.plain)
    budget_us = 16_670
    verdict = "within" if stats.p99_us < budget_us else "OVER"
    text = (f"{'secure' if stats.secure else 'plain'} {stats.topology}: "
            f"n={stats.count} p50={stats.p50_us:.1f}us p99={stats.p99_us:.1f}us "
            f"max={stats.max_us:.1f}us\np99 is {verdict} the 16.67ms "
            f"60Hz-cycle budget")
    _print(args, stats.to_jsonable(), text)
    return 0 if stats.p99_us < budget_us else 1


def cmd_scenario_run(args) -> int:
    scn = load_scenario(args.scenario)
    output_dir = args.output_dir or f"scenario-out/{scn.name}"
    result = run_scenario(scn, output_dir)
    with open(result.report_path, "r", encoding="utf-8") as fh:
        text = fh.read()
    payload = {"name": result.name, "exit_code": result.exit_code,
               "expectation_failures": result.expectation_failures,
               "findings": [f.to_jsonable() for f in result.findings],
               "output_dir": result.output_dir}
    _print(args, payload, text.rstrip())
    return result.exit_code


def cmd_scenario_validate(args) -> int:
    scn = load_scenario(args.scenario)
    _print(args, {"name": scn.name, "valid": True}, f"{scn.name}: ok")
    return 0


def cmd_scenario_list(args) -> int:
    names = list_bundled_scenarios()
    _print(args, {"bundled": names}, "\n".join(names))
    return 0


# -- parser ---------------------------------------------------------------------


def _add_format(p) -> None:
    p.add_argument("--format", choices=["text", "structured"], default="text")


def _add_client_args(p) -> None:
    p.add_argument("--target", type=_endpoint, required=True,
                   help="outstation endpoint host:port")
    p.add_argument("--unit", type=int, default=1)
    p.add_argument("--timeout", type=float, default=1.0)
    p.add_argument("--retries", type=int, default=1)
    p.add_argument("--secure-psk", default=None,
                   help="pre-shared secret; enables the authenticated channel")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridbus",
        description="Modbus/TCP security testbed: outstation, master, "
                    "interceptor, attacker, detector, secure channel")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("outstation", help="slave-side roles")
    osub = p.add_subparsers(dest="subcommand", required=True)
    serve = osub.add_parser("serve", help="run a gateway with emulated units")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=502)
    serve.add_argument("--unit", type=int, action="append", default=None,
                       help="unit id to emulate (repeatable; default: 1)")
    serve.add_argument("--table-size", type=int, default=100)
    serve.add_argument("--identity", type=_identity, default=ZERO_IDENTITY)
    serve.add_argument("--response-delay", type=float, default=0.0)
    serve.add_argument("--silent-drop", action="store_true",
                       help="drop requests for unknown units instead of 0x0B")
    serve.add_argument("--read-only", action="store_true")
    serve.add_argument("--secure-psk", default=None)
    serve.add_argument("--capture", default=None,
                       help="write the slave-tap capture here on exit")
    serve.add_argument("--run-for", type=float, default=0.0,
                       help="seconds to serve (0 = until interrupted)")
    _add_format(serve)
    serve.set_defaults(handler=cmd_outstation_serve)

    p = sub.add_parser("master", help="master-side client")
    msub = p.add_subparsers(dest="subcommand", required=True)
    w = msub.add_parser("write", help="write one coil or holding register")
    _add_client_args(w)
    w.add_argument("--address", type=int, required=True,
                   help="data address (00001.. coils, 40001.. holding)")
    w.add_argument("--value", required=True, help="on/off for coils, int for registers")
    _add_format(w)
    w.set_defaults(handler=cmd_master_write)
    r = msub.add_parser("read", help="read any table by data address")
    _add_client_args(r)
    r.add_argument("--address", type=int, required=True)
    r.add_argument("--count", type=int, default=1)
    _add_format(r)
    r.set_defaults(handler=cmd_master_read)
    pl = msub.add_parser("poll", help="periodic read loop")
    _add_client_args(pl)
    pl.add_argument("--period", type=float, default=0.5)
    pl.add_argument("--cycles", type=int, default=10)
    pl.add_argument("--address", action="append", required=True,
                    help="data address or address:count (repeatable)")
    _add_format(pl)
    pl.set_defaults(handler=cmd_master_poll)

    p = sub.add_parser("proxy", help="man-in-the-middle interceptor")
    psub = p.add_subparsers(dest="subcommand", required=True)
    run = psub.add_parser("run", help="relay with tamper rules")
    run.add_argument("--listen", type=_endpoint, required=True)
    run.add_argument("--upstream", type=_endpoint, required=True)
    run.add_argument("--identity", type=_identity, default=ZERO_IDENTITY)
    run.add_argument("--rules", default=None, help="YAML list of intercept rules")
    run.add_argument("--capture", default=None)
    run.add_argument("--run-for", type=float, default=0.0)
    _add_format(run)
    run.set_defaults(handler=cmd_proxy_run)

    p = sub.add_parser("scan", help="discover live unit ids behind a gateway")
    p.add_argument("--target", type=_endpoint, required=True)
    p.add_argument("--units", default="1:247", help="LOW:HIGH inclusive")
    p.add_argument("--parallelism", type=int, default=8)
    p.add_argument("--timeout", type=float, default=0.5)
    _add_format(p)
    p.set_defaults(handler=cmd_scan)

    p = sub.add_parser("enum", help="probe which function codes a unit serves")
    p.add_argument("--target", type=_endpoint, required=True)
    p.add_argument("--unit", type=int, required=True)
    p.add_argument("--timeout", type=float, default=0.5)
    _add_format(p)
    p.set_defaults(handler=cmd_enum)

    p = sub.add_parser("pwn-write", help="forge a write with zero credentials")
    p.add_argument("--target", type=_endpoint, required=True)
    p.add_argument("--unit", type=int, required=True)
    p.add_argument("--address", type=int, required=True)
    p.add_argument("--value", required=True)
    p.add_argument("--timeout", type=float, default=1.0)
    _add_format(p)
    p.set_defaults(handler=cmd_pwn_write)

    p = sub.add_parser("cycle", help="run the four-stage attack cycle")
    p.add_argument("--target", type=_endpoint, required=True)
    p.add_argument("--units", default="1:247")
    p.add_argument("--parallelism", type=int, default=8)
    p.add_argument("--timeout", type=float, default=0.5)
    p.add_argument("--enum-unit", type=int, action="append", default=None)
    p.add_argument("--write", action="append", default=[],
                   help="unit:address:value (repeatable)")
    p.add_argument("--read", action="append", default=[],
                   help="unit:address:count (repeatable)")
    p.add_argument("--maintain", default=None,
                   help="unit:address:value:interval:duration")
    _add_format(p)
    p.set_defaults(handler=cmd_cycle)

    p = sub.add_parser("detect", help="run the anomaly detectors over a capture")
    p.add_argument("--capture", required=True)
    p.add_argument("--policy", required=True, help="YAML detection policy")
    _add_format(p)
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("replay", help="print a capture back as a timeline")
    p.add_argument("--capture", required=True)
    _add_format(p)
    p.set_defaults(handler=cmd_replay)

    p = sub.add_parser("bench", help="secure-channel latency vs the 60Hz budget")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--secure", action="store_true", default=True)
    group.add_argument("--plain", action="store_true")
    group.add_argument("--compare", action="store_true")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--topology", choices=["loopback", "with-proxy"],
                   default="loopback")
    _add_format(p)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("scenario", help="declarative end-to-end runs")
    ssub = p.add_subparsers(dest="subcommand", required=True)
    run = ssub.add_parser("run", help="execute a scenario and write artifacts")
    run.add_argument("scenario", help="bundled name or path to a YAML file")
    run.add_argument("--output-dir", default=None)
    _add_format(run)
    run.set_defaults(handler=cmd_scenario_run)
    val = ssub.add_parser("validate", help="check a scenario file")
    val.add_argument("scenario")
    _add_format(val)
    val.set_defaults(handler=cmd_scenario_validate)
    lst = ssub.add_parser("list", help="list bundled scenarios")
    _add_format(lst)
    lst.set_defaults(handler=cmd_scenario_list)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (TransportError, ValidationError, RuntimeFailure,
            FileNotFoundError, ValueError, capture.CorruptCapture) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
