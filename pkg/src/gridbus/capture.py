"""Tap-located recording of frames and transport events.

A tap is one observation vantage (master side, proxy, slave side). Binding a
tap to a connection sniffs both byte directions through incremental MBAP
framing, so events appear when bytes hit the wire - whether or not the
application ever reads them. Events serialize to JSON Lines, one per line,
raw bytes hex-encoded lowercase; files round-trip field-for-field.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Optional

from . import codec
from .net import Endpoint, format_endpoint, format_identity, parse_endpoint, parse_identity

KIND_FRAME = "frame"
KIND_OPEN = "connection_open"
KIND_CLOSE = "connection_close"
KIND_RESET = "connection_reset"
KIND_RETRANSMISSION = "retransmission"

_KINDS = (KIND_FRAME, KIND_OPEN, KIND_CLOSE, KIND_RESET, KIND_RETRANSMISSION)

DEFAULT_BUFFER_LIMIT = 200_000


class CorruptCapture(ValueError):
    """Capture file unreadable from `line` on; `events` holds the valid prefix."""

    def __init__(self, line: int, reason: str, events: list):
        super().__init__(f"corrupt capture at line {line}: {reason}")
        self.line = line
        self.reason = reason
        self.events = events


@dataclass(frozen=True)
class CaptureEvent:
    seq: int
    timestamp_ns: int
    tap_id: str
    src_endpoint: Endpoint
    dst_endpoint: Endpoint
    src_link_identity: bytes
    dst_link_identity: bytes
    kind: str
    direction: Optional[codec.Direction]
    raw: bytes
    decoded: Optional[codec.Frame]

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind == KIND_FRAME and not self.raw:
            raise ValueError("frame events must carry raw bytes")


class Tap:
    """One vantage point. Sequence numbers are per tap, strictly increasing."""

    def __init__(self, hub: "CaptureHub", tap_id: str, buffer_limit: int):
        self._hub = hub
        self.tap_id = tap_id
        self._limit = buffer_limit
        self.events: list[CaptureEvent] = []
        self.overflow_count = 0
        self._next_seq = 0

    def record(self, *, kind: str, src_endpoint: Endpoint, dst_endpoint: Endpoint,
               src_link_identity: bytes, dst_link_identity: bytes,
               direction: Optional[codec.Direction] = None,
               raw: bytes = b"", decoded: Optional[codec.Frame] = None) -> Optional[CaptureEvent]:
        with self._hub._lock:
            if len(self.events) >= self._limit:
                self.overflow_count += 1
                return None
            event = CaptureEvent(
                seq=self._next_seq,
                timestamp_ns=self._hub._clock.now_ns(),
                tap_id=self.tap_id,
                src_endpoint=src_endpoint, dst_endpoint=dst_endpoint,
                src_link_identity=src_link_identity,
                dst_link_identity=dst_link_identity,
                kind=kind, direction=direction, raw=raw, decoded=decoded)
            self._next_seq += 1
            self.events.append(event)
            return event

    def bind(self, conn) -> None:
        """Sniff a connection from this vantage (records the open event now)."""
        _ConnSniffer(self, conn)


class _ConnSniffer:
    def __init__(self, tap: Tap, conn):
        self._tap = tap
        self._conn = conn
        self._splitters = {True: codec.FrameSplitter(), False: codec.FrameSplitter()}
        tap.record(kind=KIND_OPEN, **self._meta(is_tx=conn.is_client))
        conn.add_observer(self._observe)

    def _meta(self, is_tx: bool) -> dict:
        c = self._conn
        if is_tx:
            return dict(src_endpoint=c.local_endpoint, dst_endpoint=c.peer_endpoint,
                        src_link_identity=c.local_identity,
                        dst_link_identity=c.peer_identity)
        return dict(src_endpoint=c.peer_endpoint, dst_endpoint=c.local_endpoint,
                    src_link_identity=c.peer_identity,
                    dst_link_identity=c.local_identity)

    def _direction(self, is_tx: bool) -> codec.Direction:
        if self._conn.is_client:
            return codec.Direction.REQUEST if is_tx else codec.Direction.RESPONSE
        return codec.Direction.RESPONSE if is_tx else codec.Direction.REQUEST

    def _observe(self, kind: str, is_tx: bool, data: bytes) -> None:
        if kind == "close":
            self._tap.record(kind=KIND_CLOSE, **self._meta(is_tx))
            return
        if kind == "reset":
            self._tap.record(kind=KIND_RESET, **self._meta(is_tx))
            return
        direction = self._direction(is_tx)
        splitter = self._splitters[is_tx]
        try:
            raws = splitter.feed(data)
        except codec.MalformedFrame:
            # header-level garbage: surface the buffered bytes undecoded
            garbage = splitter.clear()
            self._tap.record(kind=KIND_FRAME, direction=direction, raw=garbage,
                             decoded=None, **self._meta(is_tx))
            return
        for raw in raws:
            try:
                frame = codec.decode_frame_bytes(raw, direction)
            except codec.MalformedFrame:
                frame = None
            self._tap.record(kind=KIND_FRAME, direction=direction, raw=raw,
                             decoded=frame, **self._meta(is_tx))


class CaptureHub:
    """Registry of taps for one run; shares the run clock."""

    def __init__(self, clock, buffer_limit: int = DEFAULT_BUFFER_LIMIT):
        self._clock = clock
        self._limit = buffer_limit
        self._lock = threading.Lock()
        self.taps: dict[str, Tap] = {}

    def tap(self, tap_id: str) -> Tap:
        existing = self.taps.get(tap_id)
        if existing is not None:
            return existing
        tap = Tap(self, tap_id, self._limit)
        self.taps[tap_id] = tap
        return tap

    def merged_events(self) -> list[CaptureEvent]:
        return merge_events(*(t.events for t in self.taps.values()))


def merge_events(*streams) -> list[CaptureEvent]:
    """Deterministic merged timeline: timestamp, then tap id, then seq."""
    merged: list[CaptureEvent] = []
    for stream in streams:
        merged.extend(stream)
    merged.sort(key=lambda e: (e.timestamp_ns, e.tap_id, e.seq))
    return merged


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def event_to_jsonable(event: CaptureEvent) -> dict:
    return {
        "seq": event.seq,
        "t": event.timestamp_ns,
        "tap": event.tap_id,
        "src": format_endpoint(event.src_endpoint),
        "dst": format_endpoint(event.dst_endpoint),
        "src_id": format_identity(event.src_link_identity),
        "dst_id": format_identity(event.dst_link_identity),
        "kind": event.kind,
        "dir": event.direction.value if event.direction else None,
        "raw": event.raw.hex(),
        "pdu": codec.frame_to_jsonable(event.decoded) if event.decoded else None,
    }


def event_from_jsonable(obj: dict) -> CaptureEvent:
    return CaptureEvent(
        seq=obj["seq"],
        timestamp_ns=obj["t"],
        tap_id=obj["tap"],
        src_endpoint=parse_endpoint(obj["src"]),
        dst_endpoint=parse_endpoint(obj["dst"]),
        src_link_identity=parse_identity(obj["src_id"]),
        dst_link_identity=parse_identity(obj["dst_id"]),
        kind=obj["kind"],
        direction=codec.Direction(obj["dir"]) if obj["dir"] else None,
        raw=bytes.fromhex(obj["raw"]),
        decoded=codec.frame_from_jsonable(obj["pdu"]) if obj["pdu"] else None)


def write_capture(events, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(json.dumps(event_to_jsonable(event), separators=(",", ":")))
            fh.write("\n")


def read_capture(path) -> list[CaptureEvent]:
    events: list[CaptureEvent] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                events.append(event_from_jsonable(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptCapture(lineno, str(exc), events) from exc
    return events
