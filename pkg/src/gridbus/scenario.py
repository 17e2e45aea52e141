"""Scenario orchestration: declarative configs that reproduce whole runs.

A scenario file (YAML, `version: 1`) names the endpoints, the outstation
inventory, an optional interceptor with its tamper rules, an optional master
command script, an optional attack plan, the detection policy, and the
expected outcome. Running one starts the roles in dependency order
(outstation, proxy, then master/attacker), executes the scripts, quiesces,
and writes captures, datastore snapshots, detector findings, and a
human-readable report into the output directory. The exit code is 0 exactly
when every declared expectation holds.

Under `clock: virtual` everything runs in-process on the deterministic
scheduler: two runs with the same seed produce byte-identical artifacts.
Under `clock: wall` the same roles run as threads over real TCP sockets.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import yaml

from . import capture as capture_mod
from . import codec, datastore, detector
from .attacker import AttackPlan, MaintainAccess, run_attack_cycle
from .capture import KIND_RESET, CaptureHub
from .codec import FunctionCode
from .datastore import DataStore, TableKind, map_data_address
from .detector import DetectionPolicy
from .interceptor import (
    CorruptByte,
    Delay,
    Drop,
    Duplicate,
    FlipCoilValue,
    InjectReset,
    InterceptRule,
    Proxy,
    ProxyPlacement,
    RuleMatch,
    SetRegisterValue,
)
from .master import ExceptionResponseError, MasterSession, PollPlan
from .net import Endpoint, PeerReset, Runtime, TransportTimeout, parse_identity
from .outstation import Outstation, OutstationConfig, UnitConfig
from .securechannel import SecureMasterSession, SecureOutstation
from .simkernel import TaskFailed


class ValidationError(ValueError):
    """Config rejected; message carries the offending field path."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class RuntimeFailure(RuntimeError):
    """A role crashed during the run; message names the role."""


_FUNCTION_NAMES = {
    "read_coils": FunctionCode.READ_COILS,
    "read_discrete_inputs": FunctionCode.READ_DISCRETE_INPUTS,
    "read_holding_registers": FunctionCode.READ_HOLDING_REGISTERS,
    "read_input_registers": FunctionCode.READ_INPUT_REGISTERS,
    "write_single_coil": FunctionCode.WRITE_SINGLE_COIL,
    "write_single_register": FunctionCode.WRITE_SINGLE_REGISTER,
    "write_multiple_coils": FunctionCode.WRITE_MULTIPLE_COILS,
    "write_multiple_registers": FunctionCode.WRITE_MULTIPLE_REGISTERS,
}

_TABLE_NAMES = {t.value: t for t in TableKind}

_EXPECT_KEYS = {
    "master", "coils", "registers", "findings_include", "findings_empty",
    "attack_all_stages_success", "integrity_failures_min", "reset_events_min",
}

_SCRIPT_OPS = {"write_coil", "write_register", "read", "sleep", "poll"}

_ERROR_NAMES = {"timeout", "reset", "exception"}


def default_identity(name: str) -> bytes:
    """Deterministic synthetic identity: locally-administered unicast."""
    digest = hashlib.sha256(name.encode()).digest()[:6]
    return bytes([(digest[0] | 0x02) & 0xFE]) + digest[1:]


@dataclass
class EndpointSpec:
    name: str
    endpoint: Endpoint
    identity: bytes


@dataclass
class Scenario:
    name: str
    clock: str
    seed: int
    endpoints: dict            # name -> EndpointSpec
    outstation: dict
    proxy: Optional[dict]
    master: Optional[dict]
    attacker: Optional[dict]
    secure_psk: Optional[str]
    detection: dict
    quiesce: float
    expect: dict
    raw: dict = field(repr=False, default_factory=dict)


# ---------------------------------------------------------------------------
# loading and validation
# ---------------------------------------------------------------------------


def _need(obj: dict, key: str, kinds, path: str):
    if key not in obj:
        raise ValidationError(f"{path}.{key}", "missing required field")
    value = obj[key]
    if kinds is not None and not isinstance(value, kinds):
        raise ValidationError(f"{path}.{key}",
                              f"expected {kinds}, got {type(value).__name__}")
    return value


def _opt(obj: dict, key: str, kinds, path: str, default=None):
    if key not in obj or obj[key] is None:
        return default
    value = obj[key]
    if kinds is not None and not isinstance(value, kinds):
        raise ValidationError(f"{path}.{key}",
                              f"expected {kinds}, got {type(value).__name__}")
    return value


def _endpoint_ref(scenario_endpoints: dict, name, path: str) -> str:
    if not isinstance(name, str) or name not in scenario_endpoints:
        raise ValidationError(path, f"unknown endpoint {name!r}")
    return name


def parse_scenario(doc: dict, source: str = "<dict>") -> Scenario:
    if not isinstance(doc, dict):
        raise ValidationError("$", "scenario document must be a mapping")
    version = _need(doc, "version", int, "$")
    if version != 1:
        raise ValidationError("$.version", f"unsupported version {version}")
    name = _need(doc, "name", str, "$")
    clock = _opt(doc, "clock", str, "$", "virtual")
    if clock not in ("virtual", "wall"):
        raise ValidationError("$.clock", f"must be virtual or wall, got {clock!r}")
    seed = _opt(doc, "seed", int, "$", 0)
    quiesce = float(_opt(doc, "quiesce", (int, float), "$", 0.5))

    endpoints: dict = {}
    for ep_name, spec in _need(doc, "endpoints", dict, "$").items():
        path = f"$.endpoints.{ep_name}"
        host = _need(spec, "host", str, path)
        port = _need(spec, "port", int, path)
        if not 0 <= port <= 65535:
            raise ValidationError(f"{path}.port", f"port {port} out of range")
        ident_text = _opt(spec, "link_identity", str, path)
        try:
            identity = (parse_identity(ident_text) if ident_text
                        else default_identity(ep_name))
        except ValueError as exc:
            raise ValidationError(f"{path}.link_identity", str(exc)) from None
        endpoints[ep_name] = EndpointSpec(ep_name, (host, port), identity)

    outstation = _parse_outstation(_need(doc, "outstation", dict, "$"), endpoints)
    proxy = doc.get("proxy")
    if proxy is not None:
        proxy = _parse_proxy(proxy, endpoints)
    master = doc.get("master")
    if master is not None:
        master = _parse_master(master, endpoints)
    attacker = doc.get("attacker")
    if attacker is not None:
        attacker = _parse_attacker(attacker, endpoints)

    secure_psk = None
    secure = _opt(doc, "secure", dict, "$")
    if secure is not None and _opt(secure, "enabled", bool, "$.secure", False):
        secure_psk = _need(secure, "psk", str, "$.secure")
        if not secure_psk:
            raise ValidationError("$.secure.psk", "must be nonempty")
        if master is not None and any(op["op"] == "poll" for op in master["script"]):
            raise ValidationError("$.master.script",
                                  "poll is not available over the secure channel")

    detection = _parse_detection(_opt(doc, "detection", dict, "$", {}), endpoints)
    expect = _parse_expect(_opt(doc, "expect", dict, "$", {}), endpoints)

    return Scenario(name=name, clock=clock, seed=seed, endpoints=endpoints,
                    outstation=outstation, proxy=proxy, master=master,
                    attacker=attacker, secure_psk=secure_psk,
                    detection=detection, quiesce=quiesce, expect=expect, raw=doc)


def _parse_outstation(obj: dict, endpoints: dict) -> dict:
    path = "$.outstation"
    ep = _endpoint_ref(endpoints, _need(obj, "endpoint", str, path), f"{path}.endpoint")
    units = {}
    for unit_key, unit_obj in _need(obj, "units", dict, path).items():
        unit_path = f"{path}.units.{unit_key}"
        try:
            unit_id = int(unit_key)
        except (TypeError, ValueError):
            raise ValidationError(unit_path, "unit id must be an integer") from None
        if not 1 <= unit_id <= 247:
            raise ValidationError(unit_path, f"unit id {unit_id} outside 1..247")
        unit_obj = unit_obj or {}
        size = _opt(unit_obj, "size", int, unit_path, 100)
        read_only = _opt(unit_obj, "read_only", bool, unit_path, False)
        preload = []
        for i, entry in enumerate(_opt(unit_obj, "preload", list, unit_path, [])):
            p = f"{unit_path}.preload[{i}]"
            table = _need(entry, "table", str, p)
            if table not in _TABLE_NAMES:
                raise ValidationError(f"{p}.table", f"unknown table {table!r}")
            offset = _need(entry, "offset", int, p)
            value = _need(entry, "value", (int, bool), p)
            preload.append((_TABLE_NAMES[table], offset, value))
        units[unit_id] = {"size": size, "read_only": read_only, "preload": preload}
    return {
        "endpoint": ep,
        "units": units,
        "response_delay": float(_opt(obj, "response_delay", (int, float), path, 0.0)),
        "silent_drop_unknown_units": _opt(obj, "silent_drop_unknown_units", bool,
                                          path, False),
    }


def _parse_rule(obj: dict, path: str) -> InterceptRule:
    match_obj = _opt(obj, "match", dict, path, {})
    direction = _opt(match_obj, "direction", str, f"{path}.match", "both")
    if direction not in ("request", "response", "both"):
        raise ValidationError(f"{path}.match.direction",
                              f"must be request/response/both, got {direction!r}")
    function = None
    fn_name = _opt(match_obj, "function", str, f"{path}.match")
    if fn_name is not None:
        if fn_name not in _FUNCTION_NAMES:
            raise ValidationError(f"{path}.match.function",
                                  f"unknown function {fn_name!r}")
        function = _FUNCTION_NAMES[fn_name]
    match = RuleMatch(
        direction=direction, function=function,
        unit_id=_opt(match_obj, "unit_id", int, f"{path}.match"),
        address=_opt(match_obj, "address", int, f"{path}.match"),
        skip_first=_opt(match_obj, "skip_first", int, f"{path}.match", 0),
        max_applications=_opt(match_obj, "max_applications", int, f"{path}.match"))

    action_obj = _need(obj, "action", dict, path)
    kind = _need(action_obj, "kind", str, f"{path}.action")
    if kind == "flip_coil":
        action = FlipCoilValue()
    elif kind == "set_register":
        action = SetRegisterValue(_need(action_obj, "value", int, f"{path}.action"))
    elif kind == "drop":
        action = Drop()
    elif kind == "delay":
        action = Delay(float(_need(action_obj, "seconds", (int, float),
                                   f"{path}.action")))
    elif kind == "duplicate":
        action = Duplicate()
    elif kind == "inject_reset":
        action = InjectReset()
    elif kind == "corrupt_byte":
        action = CorruptByte(offset=_opt(action_obj, "offset", int,
                                         f"{path}.action", 0),
                             mask=_opt(action_obj, "mask", int,
                                       f"{path}.action", 0xFF))
    else:
        raise ValidationError(f"{path}.action.kind", f"unknown action {kind!r}")
    return InterceptRule(match=match, action=action,
                         conceal=_opt(obj, "conceal", bool, path, False))


def _parse_proxy(obj: dict, endpoints: dict) -> dict:
    path = "$.proxy"
    return {
        "endpoint": _endpoint_ref(endpoints, _need(obj, "endpoint", str, path),
                                  f"{path}.endpoint"),
        "upstream": _endpoint_ref(endpoints, _need(obj, "upstream", str, path),
                                  f"{path}.upstream"),
        "rules": [_parse_rule(r, f"{path}.rules[{i}]")
                  for i, r in enumerate(_opt(obj, "rules", list, path, []))],
    }


def _parse_master(obj: dict, endpoints: dict) -> dict:
    path = "$.master"
    target = _endpoint_ref(endpoints, _need(obj, "target", str, path),
                           f"{path}.target")
    connect_to = _opt(obj, "connect_to", str, path, target)
    connect_to = _endpoint_ref(endpoints, connect_to, f"{path}.connect_to")
    script = []
    for i, op_obj in enumerate(_opt(obj, "script", list, path, [])):
        p = f"{path}.script[{i}]"
        op = _need(op_obj, "op", str, p)
        if op not in _SCRIPT_OPS:
            raise ValidationError(f"{p}.op", f"unknown op {op!r}")
        expect_error = _opt(op_obj, "expect_error", str, p)
        if expect_error is not None and expect_error not in _ERROR_NAMES:
            raise ValidationError(f"{p}.expect_error",
                                  f"must be one of {sorted(_ERROR_NAMES)}")
        entry = {"op": op, "expect_error": expect_error}
        if op in ("write_coil", "write_register"):
            entry["address"] = _need(op_obj, "address", int, p)
            entry["value"] = _need(op_obj, "value", (int, bool), p)
            try:
                table, _ = map_data_address(entry["address"])
            except datastore.AddressOutOfScheme as exc:
                raise ValidationError(f"{p}.address", str(exc)) from None
            wanted = TableKind.COILS if op == "write_coil" else TableKind.HOLDING_REGISTERS
            if table is not wanted:
                raise ValidationError(f"{p}.address",
                                      f"address {entry['address']} is not in the "
                                      f"{wanted.value} range")
        elif op == "read":
            entry["address"] = _need(op_obj, "address", int, p)
            entry["count"] = _opt(op_obj, "count", int, p, 1)
        elif op == "sleep":
            entry["seconds"] = float(_need(op_obj, "seconds", (int, float), p))
        elif op == "poll":
            entry["period"] = float(_need(op_obj, "period", (int, float), p))
            entry["cycles"] = _need(op_obj, "cycles", int, p)
            addresses = _need(op_obj, "addresses", list, p)
            entry["addresses"] = [(int(a), int(c)) for a, c in addresses]
        script.append(entry)
    return {
        "endpoint": _endpoint_ref(endpoints, _need(obj, "endpoint", str, path),
                                  f"{path}.endpoint"),
        "target": target,
        "connect_to": connect_to,
        "unit": _opt(obj, "unit", int, path, 1),
        "timeout": float(_opt(obj, "timeout", (int, float), path, 1.0)),
        "retries": _opt(obj, "retries", int, path, 1),
        "script": script,
    }


def _parse_attacker(obj: dict, endpoints: dict) -> dict:
    path = "$.attacker"
    plan_obj = _opt(obj, "plan", dict, path, {})
    p = f"{path}.plan"
    unit_range = _opt(plan_obj, "unit_range", list, p, [1, 247])
    if len(unit_range) != 2:
        raise ValidationError(f"{p}.unit_range", "expected [low, high]")
    writes = [(int(w["unit"]), int(w["address"]), int(w["value"]))
              for w in _opt(plan_obj, "writes", list, p, [])]
    reads = [(int(r["unit"]), int(r["address"]), int(r.get("count", 1)))
             for r in _opt(plan_obj, "reads", list, p, [])]
    maintain = _opt(plan_obj, "maintain", dict, p)
    if maintain is not None:
        maintain = {
            "unit": _need(maintain, "unit", int, f"{p}.maintain"),
            "address": _need(maintain, "address", int, f"{p}.maintain"),
            "value": _need(maintain, "value", int, f"{p}.maintain"),
            "interval": float(_opt(maintain, "interval", (int, float),
                                   f"{p}.maintain", 1.0)),
            "duration": float(_opt(maintain, "duration", (int, float),
                                   f"{p}.maintain", 5.0)),
        }
    return {
        "endpoint": _endpoint_ref(endpoints, _need(obj, "endpoint", str, path),
                                  f"{path}.endpoint"),
        "target": _endpoint_ref(endpoints, _need(obj, "target", str, path),
                                f"{path}.target"),
        "start_after": float(_opt(obj, "start_after", (int, float), path, 0.0)),
        "plan": {
            "unit_range": (int(unit_range[0]), int(unit_range[1])),
            "parallelism": _opt(plan_obj, "parallelism", int, p, 8),
            "scan_timeout": float(_opt(plan_obj, "scan_timeout", (int, float),
                                       p, 0.5)),
            "enumerate_units": _opt(plan_obj, "enumerate_units", list, p),
            "writes": writes,
            "reads": reads,
            "maintain": maintain,
            "abort_on_failure": _opt(plan_obj, "abort_on_failure", bool, p, False),
        },
    }


def _parse_detection(obj: dict, endpoints: dict) -> dict:
    path = "$.detection"
    known = []
    for i, name in enumerate(_opt(obj, "known_link_identities", list, path, [])):
        known.append(_endpoint_ref(endpoints, name,
                                   f"{path}.known_link_identities[{i}]"))
    writers = _opt(obj, "authorized_writers", list, path)
    if writers is not None:
        writers = [_endpoint_ref(endpoints, name,
                                 f"{path}.authorized_writers[{i}]")
                   for i, name in enumerate(writers)]
    jitter = float(_opt(obj, "jitter_tolerance", (int, float), path, 0.25))
    if not 0 < jitter < 1:
        raise ValidationError(f"{path}.jitter_tolerance", "must be in (0, 1)")
    poll_period = _opt(obj, "poll_period", (int, float), path)
    return {
        "known_link_identities": known,
        "authorized_writers": writers,
        "poll_period": None if poll_period is None else float(poll_period),
        "jitter_tolerance": jitter,
        "duplicate_window": float(_opt(obj, "duplicate_window", (int, float),
                                       path, 2.0)),
    }


def _parse_expect(obj: dict, endpoints: dict) -> dict:
    for key in obj:
        if key not in _EXPECT_KEYS:
            raise ValidationError(f"$.expect.{key}", "unknown expectation")
    out = dict(obj)
    for listing in ("coils", "registers"):
        for i, entry in enumerate(out.get(listing) or []):
            p = f"$.expect.{listing}[{i}]"
            _need(entry, "unit", int, p)
            address = _need(entry, "address", int, p)
            _need(entry, "value", (int, bool), p)
            try:
                table, _ = map_data_address(address)
            except datastore.AddressOutOfScheme as exc:
                raise ValidationError(f"{p}.address", str(exc)) from None
            wanted = TableKind.COILS if listing == "coils" else TableKind.HOLDING_REGISTERS
            if table is not wanted:
                raise ValidationError(f"{p}.address",
                                      f"not in the {wanted.value} range")
    for i, kind in enumerate(out.get("findings_include") or []):
        if kind not in detector.SEVERITY_OF:
            raise ValidationError(f"$.expect.findings_include[{i}]",
                                  f"unknown finding kind {kind!r}")
    return out


def load_scenario(path_or_name: str) -> Scenario:
    """Load from a file path or a bundled scenario name."""
    path = resolve_scenario_path(path_or_name)
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return parse_scenario(doc, source=path)


def bundled_scenario_dir() -> str:
    return os.path.join(os.path.dirname(__file__), "scenarios")


def list_bundled_scenarios() -> list:
    names = []
    directory = bundled_scenario_dir()
    if os.path.isdir(directory):
        for entry in sorted(os.listdir(directory)):
            if entry.endswith(".yaml"):
                names.append(entry[:-len(".yaml")])
    return names


def resolve_scenario_path(path_or_name: str) -> str:
    if os.path.exists(path_or_name):
        return path_or_name
    candidate = os.path.join(bundled_scenario_dir(), f"{path_or_name}.yaml")
    if os.path.exists(candidate):
        return candidate
    raise FileNotFoundError(
        f"no scenario file or bundled scenario named {path_or_name!r} "
        f"(bundled: {', '.join(list_bundled_scenarios()) or 'none'})")


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    name: str
    exit_code: int
    expectation_failures: list
    findings: list
    capture_paths: dict
    merged_capture_path: str
    snapshots: dict
    master_results: list
    attack_report: Optional[object]
    outstation_report: object
    tamper_report: Optional[object]
    integrity_failures: int
    reset_events: int
    report_path: str
    output_dir: str


def run_scenario(scenario: Scenario, output_dir: str) -> ScenarioResult:
    runtime = (Runtime.virtual(seed=scenario.seed) if scenario.clock == "virtual"
               else Runtime.wall(seed=scenario.seed, identity_map={
                   spec.endpoint: spec.identity
                   for spec in scenario.endpoints.values()}))
    hub = CaptureHub(runtime.clock)
    state: dict = {"master_results": [], "attack_report": None, "snapshots": {}}

    station = _build_outstation(runtime, scenario, hub)
    proxy = _build_proxy(runtime, scenario, hub)

    def main(*_args):
        station.start()
        actual = {scenario.outstation["endpoint"]: station.endpoint}
        if proxy is not None:
            # wall mode may rewrite port 0; point the proxy at the live endpoint
            proxy._placement.upstream_endpoint = station.endpoint
            proxy.start()
            actual[scenario.proxy["endpoint"]] = proxy.endpoint

        attacker_done = runtime.new_event()
        if scenario.attacker is not None:
            runtime.spawn(_run_attacker, runtime, scenario, actual, hub, state,
                          attacker_done, name="attacker", daemon=True)
        else:
            attacker_done.set()

        if scenario.master is not None:
            _run_master_script(runtime, scenario, actual, hub, state)

        attacker_done.wait()
        runtime.sleep(scenario.quiesce)
        for unit_id in scenario.outstation["units"]:
            state["snapshots"][unit_id] = station.snapshot(unit_id).to_jsonable()
        _close_master(state)
        if proxy is not None:
            proxy.stop()
        station.stop()

    try:
        runtime.execute(main)
    except TaskFailed as exc:
        raise RuntimeFailure(f"scenario {scenario.name!r}: {exc} "
                             f"({exc.__cause__!r})") from exc

    return _collect_artifacts(scenario, hub, station, proxy, state, output_dir)


def _build_outstation(runtime, scenario: Scenario, hub):
    spec = scenario.outstation
    units = {}
    for unit_id, u in spec["units"].items():
        store = DataStore.create(u["size"])
        for table, offset, value in u["preload"]:
            datastore.preload(store, table, offset, value)
        units[unit_id] = UnitConfig(store=store, read_only=u["read_only"])
    config = OutstationConfig(
        listen_endpoint=scenario.endpoints[spec["endpoint"]].endpoint,
        units=units,
        link_identity=scenario.endpoints[spec["endpoint"]].identity,
        response_delay=spec["response_delay"],
        silent_drop_unknown_units=spec["silent_drop_unknown_units"])
    if scenario.secure_psk is not None:
        return SecureOutstation(runtime, config, scenario.secure_psk, hub)
    return Outstation(runtime, config, hub)


def _build_proxy(runtime, scenario: Scenario, hub):
    if scenario.proxy is None:
        return None
    spec = scenario.proxy
    placement = ProxyPlacement(
        listen_endpoint=scenario.endpoints[spec["endpoint"]].endpoint,
        upstream_endpoint=scenario.endpoints[spec["upstream"]].endpoint,
        link_identity=scenario.endpoints[spec["endpoint"]].identity)
    return Proxy(runtime, placement, spec["rules"], hub)


def _open_master_session(runtime, scenario: Scenario, actual: dict, hub):
    spec = scenario.master
    target_spec = scenario.endpoints[spec["target"]]
    local_spec = scenario.endpoints[spec["endpoint"]]
    connect_to = actual.get(spec["connect_to"],
                            scenario.endpoints[spec["connect_to"]].endpoint)
    common = dict(timeout=spec["timeout"], retries=spec["retries"],
                  local_endpoint=local_spec.endpoint,
                  link_identity=local_spec.identity,
                  connect_to=connect_to, hub=hub)
    if scenario.secure_psk is not None:
        session = SecureMasterSession(runtime, target_spec.endpoint, spec["unit"],
                                      scenario.secure_psk, **common)
    else:
        session = MasterSession(runtime, target_spec.endpoint, spec["unit"],
                                **common)
    session.connect()
    return session


def _run_master_script(runtime, scenario: Scenario, actual: dict, hub,
                       state: dict) -> None:
    session = _open_master_session(runtime, scenario, actual, hub)
    state["master_session"] = session
    for i, op in enumerate(scenario.master["script"]):
        record = {"op": op["op"], "index": i}
        try:
            if op["op"] == "write_coil":
                outcome = session.write_single_coil(op["address"], bool(op["value"]))
                record.update(acknowledged=outcome.acknowledged,
                              echo_matches=outcome.echo_matches)
            elif op["op"] == "write_register":
                outcome = session.write_single_register(op["address"], int(op["value"]))
                record.update(acknowledged=outcome.acknowledged,
                              echo_matches=outcome.echo_matches)
            elif op["op"] == "read":
                values = session.read(op["address"], op["count"])
                record.update(values=[int(v) for v in values])
            elif op["op"] == "sleep":
                runtime.sleep(op["seconds"])
            elif op["op"] == "poll":
                report = session.run_poll_loop(
                    PollPlan(period=op["period"], requests=op["addresses"]),
                    cycles=op["cycles"])
                record.update(cycles=report.cycles, timeouts=report.timeouts,
                              value_changes=report.value_changes)
        except (TransportTimeout, PeerReset, ExceptionResponseError) as exc:
            kind = ("timeout" if isinstance(exc, TransportTimeout)
                    else "reset" if isinstance(exc, PeerReset) else "exception")
            record.update(error=kind)
            if op["expect_error"] != kind:
                raise RuntimeFailure(
                    f"master: script op {i} ({op['op']}) failed with "
                    f"unexpected {kind}: {exc}") from exc
            record.update(error_expected=True)
        else:
            if op["expect_error"] is not None:
                raise RuntimeFailure(
                    f"master: script op {i} ({op['op']}) expected "
                    f"{op['expect_error']} but succeeded")
        state["master_results"].append(record)


def _close_master(state: dict) -> None:
    session = state.pop("master_session", None)
    if session is not None:
        try:
            session.close()
        except Exception:  # teardown best effort; connection may be reset
            pass


def _run_attacker(runtime, scenario: Scenario, actual: dict, hub, state: dict,
                  done) -> None:
    try:
        spec = scenario.attacker
        if spec["start_after"] > 0:
            runtime.sleep(spec["start_after"])
        p = spec["plan"]
        maintain = None
        if p["maintain"] is not None:
            m = p["maintain"]
            maintain = MaintainAccess(unit_id=m["unit"], data_address=m["address"],
                                      value=m["value"], interval=m["interval"],
                                      duration=m["duration"])
        local = scenario.endpoints[spec["endpoint"]]
        target = actual.get(spec["target"],
                            scenario.endpoints[spec["target"]].endpoint)
        plan = AttackPlan(
            target=target,
            unit_range=range(p["unit_range"][0], p["unit_range"][1] + 1),
            scan_parallelism=p["parallelism"], scan_timeout=p["scan_timeout"],
            enumerate_units=p["enumerate_units"], writes=p["writes"],
            reads=p["reads"], maintain=maintain,
            abort_on_failure=p["abort_on_failure"],
            local_endpoint=local.endpoint, link_identity=local.identity)
        state["attack_report"] = run_attack_cycle(runtime, plan, hub)
    finally:
        done.set()


def build_policy(scenario: Scenario) -> DetectionPolicy:
    d = scenario.detection
    writers = d["authorized_writers"]
    return DetectionPolicy(
        known_link_identities={
            scenario.endpoints[name].endpoint: scenario.endpoints[name].identity
            for name in d["known_link_identities"]},
        authorized_writers=(None if writers is None else {
            scenario.endpoints[name].endpoint for name in writers}),
        poll_period=d["poll_period"],
        jitter_tolerance=d["jitter_tolerance"],
        duplicate_window=d["duplicate_window"])


def _collect_artifacts(scenario: Scenario, hub, station, proxy, state: dict,
                       output_dir: str) -> ScenarioResult:
    captures_dir = os.path.join(output_dir, "captures")
    os.makedirs(captures_dir, exist_ok=True)

    capture_paths = {}
    for tap_id in sorted(hub.taps):
        path = os.path.join(captures_dir, f"{tap_id}.capture")
        capture_mod.write_capture(hub.taps[tap_id].events, path)
        capture_paths[tap_id] = path
    merged = hub.merged_events()
    merged_path = os.path.join(captures_dir, "merged.capture")
    capture_mod.write_capture(merged, merged_path)

    policy = build_policy(scenario)
    findings = detector.analyze(merged, policy)

    with open(os.path.join(output_dir, "policy.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(detector.policy_to_jsonable(policy), fh, sort_keys=True)
    with open(os.path.join(output_dir, "findings.json"), "w", encoding="utf-8") as fh:
        fh.write(detector.report(findings, "structured"))
        fh.write("\n")
    with open(os.path.join(output_dir, "snapshots.json"), "w", encoding="utf-8") as fh:
        json.dump(state["snapshots"], fh, indent=2, sort_keys=True)
        fh.write("\n")

    reset_events = sum(1 for e in merged if e.kind == KIND_RESET)
    integrity_failures = getattr(station, "integrity_failures", 0)

    failures = _evaluate_expectations(scenario, state, findings,
                                      integrity_failures, reset_events)
    exit_code = 0 if not failures else 1

    report_path = os.path.join(output_dir, "report.txt")
    _write_report(report_path, scenario, state, findings, failures,
                  integrity_failures, reset_events, proxy, station)

    result = ScenarioResult(
        name=scenario.name, exit_code=exit_code, expectation_failures=failures,
        findings=findings, capture_paths=capture_paths,
        merged_capture_path=merged_path, snapshots=state["snapshots"],
        master_results=state["master_results"],
        attack_report=state["attack_report"],
        outstation_report=station.report,
        tamper_report=proxy.report if proxy is not None else None,
        integrity_failures=integrity_failures, reset_events=reset_events,
        report_path=report_path, output_dir=output_dir)

    with open(os.path.join(output_dir, "result.json"), "w", encoding="utf-8") as fh:
        json.dump(_result_jsonable(result), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result


def _evaluate_expectations(scenario: Scenario, state: dict, findings: list,
                           integrity_failures: int, reset_events: int) -> list:
    failures = []
    expect = scenario.expect
    writes = [r for r in state["master_results"]
              if r["op"] in ("write_coil", "write_register") and "error" not in r]

    master_expect = expect.get("master")
    if master_expect:
        if "acknowledged" in master_expect:
            got = bool(writes) and all(r["acknowledged"] for r in writes)
            if got != master_expect["acknowledged"]:
                failures.append(f"master.acknowledged: expected "
                                f"{master_expect['acknowledged']}, got {got}")
        if "echo_matches" in master_expect:
            got = bool(writes) and all(r["echo_matches"] for r in writes)
            if got != master_expect["echo_matches"]:
                failures.append(f"master.echo_matches: expected "
                                f"{master_expect['echo_matches']}, got {got}")

    for listing, table in (("coils", TableKind.COILS),
                           ("registers", TableKind.HOLDING_REGISTERS)):
        for entry in expect.get(listing) or []:
            _, offset = map_data_address(entry["address"])
            snapshot = state["snapshots"].get(entry["unit"])
            if snapshot is None:
                failures.append(f"{listing}: no snapshot for unit {entry['unit']}")
                continue
            got = snapshot[table.value][offset]
            want = int(bool(entry["value"])) if table is TableKind.COILS \
                else int(entry["value"])
            if got != want:
                failures.append(
                    f"{listing}: unit {entry['unit']} address {entry['address']} "
                    f"expected {want}, got {got}")

    kinds = {f.kind for f in findings}
    for kind in expect.get("findings_include") or []:
        if kind not in kinds:
            failures.append(f"findings_include: {kind} absent "
                            f"(got {sorted(kinds) or 'none'})")
    if expect.get("findings_empty") and findings:
        failures.append(f"findings_empty: expected none, got {sorted(kinds)}")

    if expect.get("attack_all_stages_success"):
        report = state["attack_report"]
        if report is None:
            failures.append("attack_all_stages_success: no attacker ran")
        elif not report.all_successful():
            bad = [n for n, r in report.stages.items() if not r.success]
            failures.append(f"attack_all_stages_success: failed stages {bad}")

    minimum = expect.get("integrity_failures_min")
    if minimum is not None and integrity_failures < minimum:
        failures.append(f"integrity_failures_min: expected >= {minimum}, "
                        f"got {integrity_failures}")
    minimum = expect.get("reset_events_min")
    if minimum is not None and reset_events < minimum:
        failures.append(f"reset_events_min: expected >= {minimum}, "
                        f"got {reset_events}")
    return failures


def _result_jsonable(result: ScenarioResult) -> dict:
    return {
        "name": result.name,
        "exit_code": result.exit_code,
        "expectation_failures": result.expectation_failures,
        "findings": [f.to_jsonable() for f in result.findings],
        "master_results": result.master_results,
        "attack_report": (result.attack_report.to_jsonable()
                          if result.attack_report else None),
        "integrity_failures": result.integrity_failures,
        "reset_events": result.reset_events,
        "outstation": vars(result.outstation_report),
        "tamper": vars(result.tamper_report) if result.tamper_report else None,
    }


def _write_report(path: str, scenario: Scenario, state: dict, findings: list,
                  failures: list, integrity_failures: int, reset_events: int,
                  proxy, station) -> None:
    lines = [f"scenario: {scenario.name}",
             f"clock: {scenario.clock}  seed: {scenario.seed}", ""]
    if state["master_results"]:
        lines.append("master script:")
        for r in state["master_results"]:
            detail = {k: v for k, v in r.items() if k not in ("op", "index")}
            lines.append(f"  [{r['index']}] {r['op']}: {detail}")
        lines.append("")
    if state["attack_report"] is not None:
        lines.append("attack cycle:")
        for name, r in state["attack_report"].stages.items():
            lines.append(f"  {name}: {'ok' if r.success else 'FAILED'}"
                         f"{'' if not r.error else ' - ' + r.error}")
        lines.append("")
    if proxy is not None:
        lines.append(f"interceptor: {vars(proxy.report)}")
    lines.append(f"outstation: {vars(station.report)}")
    lines.append(f"integrity failures: {integrity_failures}")
    lines.append(f"reset events: {reset_events}")
    lines.append("")
    lines.append("findings:")
    lines.append(detector.report(findings, "text").rstrip())
    lines.append("")
    if failures:
        lines.append("EXPECTATION FAILURES:")
        lines.extend(f"  - {f}" for f in failures)
        lines.append("verdict: FAIL")
    else:
        lines.append("verdict: PASS (all expectations hold)")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
