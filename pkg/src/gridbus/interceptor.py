"""Man-in-the-middle proxy: tamper rules applied to frames in flight.

The proxy stands between master and outstation as an explicit hop. Toward the
outstation it claims the master's endpoint; toward the master it was dialed as
if it were the outstation - but both legs carry the proxy's own link identity,
which is the evidence trail captures preserve.

Frames not matching any rule pass through byte-identical. A concealing rule
remembers the original request and rewrites the paired echo response so the
master sees agreement with what it sent. Streams that stop parsing as Modbus
(e.g. an encrypted session) fall back to raw chunk forwarding, where only
byte-level rules apply.

When several rules match a frame, the first one in the list wins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

from . import codec
from .capture import CaptureHub
from .codec import Direction, Frame, FrameSplitter, FunctionCode, MalformedFrame
from .net import Endpoint, ListenerClosed, PeerReset, Runtime, TransportClosed, TransportError

log = logging.getLogger(__name__)


class RuleInapplicable(Exception):
    """Action incompatible with the frame's function."""


# -- actions ---------------------------------------------------------------


@dataclass(frozen=True)
class FlipCoilValue:
    """0xFF00 <-> 0x0000 on write-single-coil frames (an involution)."""


@dataclass(frozen=True)
class SetRegisterValue:
    value: int


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class Delay:
    seconds: float


@dataclass(frozen=True)
class Duplicate:
    pass


@dataclass(frozen=True)
class InjectReset:
    pass


@dataclass(frozen=True)
class CorruptByte:
    """XOR one byte of a raw (non-Modbus) chunk; offsets wrap around."""

    offset: int = 0
    mask: int = 0xFF


Action = Union[FlipCoilValue, SetRegisterValue, Drop, Delay, Duplicate,
               InjectReset, CorruptByte]


@dataclass(frozen=True)
class RuleMatch:
    direction: str = "both"  # request | response | both
    function: Optional[FunctionCode] = None
    unit_id: Optional[int] = None
    address: Optional[int] = None  # raw pdu offset
    skip_first: int = 0            # let the first N matches through untouched
    max_applications: Optional[int] = None


@dataclass(frozen=True)
class InterceptRule:
    match: RuleMatch
    action: Action
    conceal: bool = False


@dataclass
class RuleOutcome:
    frames_out: list
    delay: float = 0.0
    reset: bool = False


def rule_matches(rule: InterceptRule, frame: Frame, direction: Direction) -> bool:
    """Static match predicate; skip/max bookkeeping lives in the proxy."""
    m = rule.match
    if m.direction != "both" and m.direction != direction.value:
        return False
    if m.function is not None and getattr(frame.pdu, "function", None) != m.function:
        return False
    if m.unit_id is not None and frame.header.unit_id != m.unit_id:
        return False
    if m.address is not None and getattr(frame.pdu, "address", None) != m.address:
        return False
    return True


def apply_rule(rule: InterceptRule, frame: Frame, direction: Direction) -> RuleOutcome:
    """Pure action application (match is assumed)."""
    action = rule.action
    header = frame.header

    if isinstance(action, FlipCoilValue):
        if not isinstance(frame.pdu, codec.WriteSingleCoil):
            raise RuleInapplicable("FlipCoilValue needs a write-single-coil frame")
        flipped = codec.make_frame(header.transaction_id, header.unit_id,
                                   frame.pdu.flipped())
        return RuleOutcome(frames_out=[flipped])

    if isinstance(action, SetRegisterValue):
        if isinstance(frame.pdu, codec.WriteSingleRegister):
            pdu = codec.WriteSingleRegister(frame.pdu.address, action.value)
        elif isinstance(frame.pdu, codec.WriteMultipleRegistersRequest):
            pdu = codec.WriteMultipleRegistersRequest(
                frame.pdu.address, tuple(action.value for _ in frame.pdu.values))
        else:
            raise RuleInapplicable("SetRegisterValue needs a register write frame")
        return RuleOutcome(frames_out=[
            codec.make_frame(header.transaction_id, header.unit_id, pdu)])

    if isinstance(action, Drop):
        return RuleOutcome(frames_out=[])

    if isinstance(action, Delay):
        return RuleOutcome(frames_out=[frame], delay=action.seconds)

    if isinstance(action, Duplicate):
        return RuleOutcome(frames_out=[frame, frame])

    if isinstance(action, InjectReset):
        return RuleOutcome(frames_out=[], reset=True)

    if isinstance(action, CorruptByte):
        raise RuleInapplicable("CorruptByte acts on raw chunks, not decoded frames")

    raise RuleInapplicable(f"unknown action {action!r}")


# -- the proxy ---------------------------------------------------------------


@dataclass
class ProxyPlacement:
    listen_endpoint: Endpoint
    upstream_endpoint: Endpoint
    link_identity: bytes
    tap_id: str = "mitm-tap"


@dataclass
class TamperReport:
    frames_forwarded: int = 0
    frames_rewritten: int = 0
    frames_dropped: int = 0
    resets_injected: int = 0
    raw_chunks_corrupted: int = 0


class _RuleState:
    __slots__ = ("matched", "applied")

    def __init__(self) -> None:
        self.matched = 0
        self.applied = 0


class Proxy:
    def __init__(self, runtime: Runtime, placement: ProxyPlacement,
                 rules: list, hub: Optional[CaptureHub] = None):
        self._runtime = runtime
        self._placement = placement
        self._rules = list(rules)
        self._rule_state = [_RuleState() for _ in self._rules]
        self._hub = hub
        self._listener = None
        self.report = TamperReport()

    @property
    def endpoint(self) -> Endpoint:
        if self._listener is not None:
            return self._listener.endpoint
        return self._placement.listen_endpoint

    def start(self):
        self._listener = self._runtime.net.listen(
            self._placement.listen_endpoint, self._placement.link_identity)
        self._runtime.spawn(self._accept_loop, name="proxy-accept", daemon=True)
        return self._listener

    def stop(self) -> None:
        if self._listener is not None:
            self._listener.close()

    def _accept_loop(self) -> None:
        while True:
            try:
                downstream = self._listener.accept()
            except (ListenerClosed, TransportError):
                return
            # Impersonate the master toward the outstation: claim its endpoint,
            # keep our own identity.
            upstream = self._runtime.net.connect(
                self._placement.upstream_endpoint,
                local_endpoint=downstream.peer_endpoint,
                identity=self._placement.link_identity)
            if self._hub is not None:
                tap = self._hub.tap(self._placement.tap_id)
                tap.bind(downstream)
                tap.bind(upstream)
            pair = _ConnPair(downstream, upstream)
            self._runtime.spawn(self._relay, pair, Direction.REQUEST,
                                name="proxy-req", daemon=True)
            self._runtime.spawn(self._relay, pair, Direction.RESPONSE,
                                name="proxy-resp", daemon=True)

    # -- per-direction relay ---------------------------------------------------

    def _relay(self, pair: "_ConnPair", direction: Direction) -> None:
        src = pair.downstream if direction is Direction.REQUEST else pair.upstream
        dst = pair.upstream if direction is Direction.REQUEST else pair.downstream
        splitter = FrameSplitter()
        raw_mode = False
        while True:
            try:
                data = src.recv()
            except PeerReset:
                dst.abort()
                return
            except (TransportClosed, TransportError):
                return
            if not data:
                dst.close()
                return
            try:
                if raw_mode:
                    self._forward_raw(dst, direction, data)
                    continue
                try:
                    raws = splitter.feed(data)
                except MalformedFrame:
                    # Not Modbus (e.g. a sealed session): fall back to raw
                    # chunk forwarding for the rest of this direction.
                    log.info("stream from %s not parseable as Modbus; raw passthrough",
                             src.peer_endpoint)
                    raw_mode = True
                    self._forward_raw(dst, direction, splitter.clear())
                    continue
                for raw in raws:
                    if not self._process_frame(pair, direction, dst, raw):
                        return  # reset injected
            except (PeerReset, TransportClosed):
                return

    def _process_frame(self, pair: "_ConnPair", direction: Direction,
                       dst, raw: bytes) -> bool:
        try:
            frame = codec.decode_frame_bytes(raw, direction)
        except MalformedFrame as exc:
            log.warning("undecodable frame forwarded unchanged: %s", exc)
            dst.send(raw)
            self.report.frames_forwarded += 1
            return True

        # concealment: replace the echo the outstation produced with the echo
        # the master expects (functions 0x05/0x06 echo their request verbatim)
        if direction is Direction.RESPONSE:
            key = (frame.header.transaction_id, frame.header.unit_id)
            original = pair.conceal.get(key)
            if original is not None and type(frame.pdu) is type(original):
                frame = codec.make_frame(*key, original)

        rule = self._select_rule(frame, direction)
        outcome = None
        if rule is not None:
            try:
                outcome = apply_rule(rule, frame, direction)
            except RuleInapplicable as exc:
                log.warning("rule matched but not applicable: %s", exc)
        if outcome is None:
            outcome = RuleOutcome(frames_out=[frame])

        if rule is not None and rule.conceal and direction is Direction.REQUEST:
            # remember the master's original request for echo-style functions
            if isinstance(frame.pdu, (codec.WriteSingleCoil, codec.WriteSingleRegister)):
                key = (frame.header.transaction_id, frame.header.unit_id)
                pair.conceal[key] = frame.pdu

        if outcome.reset:
            self.report.resets_injected += 1
            pair.downstream.abort()
            pair.upstream.abort()
            return False

        if outcome.delay > 0:
            # a slow middlebox delays the stream, not one packet: block this
            # direction so ordering is preserved
            self._runtime.sleep(outcome.delay)

        if not outcome.frames_out:
            self.report.frames_dropped += 1
            return True

        for out_frame in outcome.frames_out:
            out_raw = codec.encode_frame(out_frame)
            if out_raw != raw:
                self.report.frames_rewritten += 1
            dst.send(out_raw)
            self.report.frames_forwarded += 1
        return True

    def _select_rule(self, frame: Frame, direction: Direction) -> Optional[InterceptRule]:
        for rule, state in zip(self._rules, self._rule_state):
            if not rule_matches(rule, frame, direction):
                continue
            state.matched += 1
            if state.matched <= rule.match.skip_first:
                continue
            if (rule.match.max_applications is not None
                    and state.applied >= rule.match.max_applications):
                continue
            state.applied += 1
            return rule
        return None

    def _forward_raw(self, dst, direction: Direction, chunk: bytes) -> None:
        if not chunk:
            return
        for rule, state in zip(self._rules, self._rule_state):
            if not isinstance(rule.action, CorruptByte):
                continue
            if rule.match.direction not in ("both", direction.value):
                continue
            state.matched += 1
            if state.matched <= rule.match.skip_first:
                continue
            if (rule.match.max_applications is not None
                    and state.applied >= rule.match.max_applications):
                continue
            state.applied += 1
            mutated = bytearray(chunk)
            pos = rule.action.offset % len(mutated)
            mutated[pos] ^= rule.action.mask
            chunk = bytes(mutated)
            self.report.raw_chunks_corrupted += 1
            break
        dst.send(chunk)


class _ConnPair:
    __slots__ = ("downstream", "upstream", "conceal")

    def __init__(self, downstream, upstream):
        self.downstream = downstream
        self.upstream = upstream
        self.conceal: dict = {}


def run_proxy(runtime: Runtime, placement: ProxyPlacement, rules: list,
              shutdown, hub: Optional[CaptureHub] = None) -> TamperReport:
    """Run until `shutdown` is set; returns the tamper report."""
    proxy = Proxy(runtime, placement, rules, hub)
    proxy.start()
    shutdown.wait()
    proxy.stop()
    return proxy.report
