"""Master-side client: single commands, periodic polling, echo verification.

The master is the party the interceptor deceives. `echo_matches` is computed
purely from the master's own request and the bytes it got back, so a
concealing proxy can keep it true while the slave state says otherwise.

Timeouts retry once (by default) with the byte-identical frame - same
transaction id - which is what makes retransmissions visible in captures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import codec, datastore
from .capture import KIND_RETRANSMISSION, CaptureHub
from .codec import Direction, Frame, FrameSplitter, FunctionCode, MalformedFrame
from .datastore import TableKind, map_data_address
from .net import (
    Endpoint,
    PeerReset,
    Runtime,
    TransportClosed,
    TransportTimeout,
    ZERO_IDENTITY,
)

_READ_FUNCTION_FOR_TABLE = {
    TableKind.COILS: FunctionCode.READ_COILS,
    TableKind.DISCRETE_INPUTS: FunctionCode.READ_DISCRETE_INPUTS,
    TableKind.INPUT_REGISTERS: FunctionCode.READ_INPUT_REGISTERS,
    TableKind.HOLDING_REGISTERS: FunctionCode.READ_HOLDING_REGISTERS,
}


class ExceptionResponseError(Exception):
    """Outstation answered with a protocol exception."""

    def __init__(self, code: codec.ExceptionCode):
        super().__init__(f"exception response {code!r}")
        self.code = codec.ExceptionCode(code)


@dataclass
class WriteOutcome:
    acknowledged: bool
    echo_matches: bool
    response: Optional[Frame] = None


@dataclass
class PollPlan:
    period: float
    requests: list  # (data_address, count) pairs
    jitter_budget: float = 0.0  # judged by the detector, not the master

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("poll period must be positive")


@dataclass
class PollReport:
    cycles: int = 0
    timeouts: int = 0
    value_changes: int = 0


class MasterSession:
    """One connection, one sequential requester. Transaction ids start at 1
    and increase strictly modulo 65536 within the session."""

    def __init__(self, runtime: Runtime, target: Endpoint, unit_id: int, *,
                 timeout: float = 1.0, retries: int = 1,
                 local_endpoint: Endpoint = ("0.0.0.0", 0),
                 link_identity: bytes = ZERO_IDENTITY,
                 connect_to: Optional[Endpoint] = None,
                 hub: Optional[CaptureHub] = None, tap_id: str = "master-tap"):
        self.target = target
        self.unit_id = unit_id
        self.timeout = timeout
        self.retries = retries
        self._runtime = runtime
        self._local_endpoint = local_endpoint
        self._link_identity = link_identity
        # connect_to is where the bytes actually go; the session still believes
        # it is talking to `target` (the interceptor wiring point)
        self._connect_to = connect_to or target
        self._hub = hub
        self._tap_id = tap_id
        self._conn = None
        self._splitter = FrameSplitter()
        self._pending: list[Frame] = []
        self._tid_counter = 0

    def connect(self) -> None:
        self._conn = self._runtime.net.connect(
            self._connect_to, local_endpoint=self._local_endpoint,
            identity=self._link_identity, claimed_peer=self.target)
        if self._hub is not None:
            self._hub.tap(self._tap_id).bind(self._conn)

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    # -- operations ------------------------------------------------------------

    def write_single_coil(self, data_address: int, on: bool) -> WriteOutcome:
        table, offset = map_data_address(data_address)
        if table is not TableKind.COILS:
            raise datastore.AddressOutOfScheme(
                f"data address {data_address} is not in the coil range")
        request_pdu = codec.WriteSingleCoil.make(offset, on)
        response = self._transact(request_pdu)
        return WriteOutcome(acknowledged=True,
                            echo_matches=response.pdu == request_pdu,
                            response=response)

    def write_single_register(self, data_address: int, value: int) -> WriteOutcome:
        table, offset = map_data_address(data_address)
        if table is not TableKind.HOLDING_REGISTERS:
            raise datastore.AddressOutOfScheme(
                f"data address {data_address} is not in the holding-register range")
        request_pdu = codec.WriteSingleRegister(offset, value)
        response = self._transact(request_pdu)
        return WriteOutcome(acknowledged=True,
                            echo_matches=response.pdu == request_pdu,
                            response=response)

    def read(self, data_address: int, count: int = 1) -> list:
        table, offset = map_data_address(data_address)  # client-side scheme check
        response = self._transact(
            codec.ReadRequest(_READ_FUNCTION_FOR_TABLE[table], offset, count))
        pdu = response.pdu
        if isinstance(pdu, codec.ReadBitsResponse):
            return pdu.bits(count)
        return list(pdu.values)

    def run_poll_loop(self, plan: PollPlan, duration: Optional[float] = None,
                      cycles: Optional[int] = None) -> PollReport:
        """Issue plan.requests every plan.period. Cycle k targets t0 + k*period;
        an overrunning cycle starts late rather than skipping."""
        if cycles is None:
            if duration is None:
                raise ValueError("give either duration or cycles")
            cycles = int(duration / plan.period)
        report = PollReport()
        previous: dict[int, list] = {}
        t0 = self._runtime.now_ns()
        for k in range(cycles):
            target_ns = t0 + int(k * plan.period * 1e9)
            lag = target_ns - self._runtime.now_ns()
            if lag > 0:
                self._runtime.sleep(lag / 1e9)
            report.cycles += 1
            for address, count in plan.requests:
                try:
                    values = self.read(address, count)
                except (TransportTimeout, ExceptionResponseError):
                    report.timeouts += 1
                    break
                if address in previous and previous[address] != values:
                    report.value_changes += 1
                previous[address] = values
        return report

    # -- plumbing ----------------------------------------------------------------

    def _next_tid(self) -> int:
        self._tid_counter += 1
        return self._tid_counter % 0x10000

    def _transact(self, pdu: codec.Pdu) -> Frame:
        if self._conn is None:
            self.connect()
        self._pending.clear()  # anything buffered now is a stale late response
        tid = self._next_tid()
        raw = codec.encode_frame(codec.make_frame(tid, self.unit_id, pdu))
        attempts = 1 + max(0, self.retries)
        for attempt in range(attempts):
            if attempt > 0:
                self._record_retransmission()
            self._conn.send(raw)
            try:
                response = self._await_response(tid)
            except TransportTimeout:
                continue
            if codec.is_exception(response.pdu):
                raise ExceptionResponseError(response.pdu.code)
            return response
        raise TransportTimeout(
            f"no response for transaction {tid} after {attempts} attempts")

    def _await_response(self, tid: int) -> Frame:
        deadline = self._runtime.now_ns() + int(self.timeout * 1e9)
        while True:
            for i, frame in enumerate(self._pending):
                if (frame.header.transaction_id == tid
                        and frame.header.unit_id == self.unit_id):
                    return self._pending.pop(i)
            remaining = (deadline - self._runtime.now_ns()) / 1e9
            if remaining <= 0:
                raise TransportTimeout("response timed out")
            data = self._conn.recv(timeout=remaining)
            if not data:
                raise TransportClosed("connection closed while awaiting response")
            try:
                for raw in self._splitter.feed(data):
                    try:
                        self._pending.append(
                            codec.decode_frame_bytes(raw, Direction.RESPONSE))
                    except MalformedFrame:
                        continue  # undecodable response pdu: skip the frame
            except MalformedFrame as exc:
                raise PeerReset(f"unframeable bytes from peer: {exc}") from exc

    def _record_retransmission(self) -> None:
        if self._hub is None or self._conn is None:
            return
        self._hub.tap(self._tap_id).record(
            kind=KIND_RETRANSMISSION,
            src_endpoint=self._conn.local_endpoint,
            dst_endpoint=self._conn.peer_endpoint,
            src_link_identity=self._conn.local_identity,
            dst_link_identity=self._conn.peer_identity)
