"""Slave-side network service: a gateway routing requests by unit id.

One listener accepts any number of concurrent connections; each decoded
request is routed to the unit addressed by the MBAP unit id and answered with
the same transaction id. There is deliberately no authentication: any
well-formed request from any peer is honored - that is the modeled
vulnerability. Unknown unit ids answer exception 0x0B (gateway target failed
to respond) unless `silent_drop_unknown_units` asks for timeout behavior.

Malformed bytes tear the connection down with a reset, which taps record.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from . import codec, datastore
from .capture import CaptureHub
from .codec import Direction, ExceptionCode, Frame, FrameSplitter, MalformedFrame
from .datastore import DataStore
from .net import (
    Endpoint,
    ListenerClosed,
    PeerReset,
    Runtime,
    TransportClosed,
    TransportError,
    ZERO_IDENTITY,
)

log = logging.getLogger(__name__)

UNIT_ID_MIN = 1
UNIT_ID_MAX = 247

DEFAULT_PORT = 502


class UnknownUnit(KeyError):
    pass


@dataclass
class UnitConfig:
    store: DataStore = field(default_factory=DataStore.create)
    read_only: bool = False  # all write functions answer exception 0x01


@dataclass
class OutstationConfig:
    listen_endpoint: Endpoint = ("0.0.0.0", DEFAULT_PORT)
    units: dict = field(default_factory=dict)  # unit_id -> UnitConfig
    link_identity: bytes = ZERO_IDENTITY
    response_delay: float = 0.0
    silent_drop_unknown_units: bool = False
    tap_id: str = "slave-tap"

    def validate(self) -> None:
        for unit_id in self.units:
            if not UNIT_ID_MIN <= unit_id <= UNIT_ID_MAX:
                raise ValueError(
                    f"unit id {unit_id} outside {UNIT_ID_MIN}..{UNIT_ID_MAX}")


@dataclass
class OutstationReport:
    connections: int = 0
    frames_handled: int = 0
    exceptions_sent: int = 0
    malformed_resets: int = 0


class Outstation:
    def __init__(self, runtime: Runtime, config: OutstationConfig,
                 hub: Optional[CaptureHub] = None):
        config.validate()
        self._runtime = runtime
        self._config = config
        self._hub = hub
        self._listener = None
        self.report = OutstationReport()

    @property
    def endpoint(self) -> Endpoint:
        if self._listener is not None:
            return self._listener.endpoint  # wall mode may rewrite port 0
        return self._config.listen_endpoint

    def start(self):
        """Bind and begin accepting; returns the listener (BindFailure raises)."""
        self._listener = self._runtime.net.listen(
            self._config.listen_endpoint, self._config.link_identity)
        self._runtime.spawn(self._accept_loop, name="outstation-accept", daemon=True)
        return self._listener

    def stop(self) -> None:
        if self._listener is not None:
            self._listener.close()

    def snapshot(self, unit_id: int) -> DataStore:
        unit = self._config.units.get(unit_id)
        if unit is None:
            raise UnknownUnit(unit_id)
        return unit.store.copy()

    # -- internals -----------------------------------------------------------

    def _accept_loop(self) -> None:
        while True:
            try:
                conn = self._listener.accept()
            except (ListenerClosed, TransportError):
                return
            self.report.connections += 1
            if self._hub is not None:
                self._hub.tap(self._config.tap_id).bind(conn)
            self._runtime.spawn(self._handle, conn, name="outstation-conn", daemon=True)

    def _handle(self, conn) -> None:
        splitter = FrameSplitter()
        while True:
            try:
                data = conn.recv()
            except (PeerReset, TransportClosed):
                return
            if not data:
                conn.close()
                return
            try:
                raws = splitter.feed(data)
                frames = [codec.decode_frame_bytes(raw, Direction.REQUEST)
                          for raw in raws]
            except MalformedFrame as exc:
                log.warning("malformed request from %s: %s", conn.peer_endpoint, exc)
                self.report.malformed_resets += 1
                conn.abort()
                return
            for frame in frames:
                response = self.respond_to(frame)
                if response is None:
                    continue
                if self._config.response_delay > 0:
                    self._runtime.sleep(self._config.response_delay)
                try:
                    conn.send(codec.encode_frame(response))
                except (PeerReset, TransportClosed):
                    return

    def respond_to(self, frame: Frame) -> Optional[Frame]:
        self.report.frames_handled += 1
        unit = self._config.units.get(frame.header.unit_id)
        if unit is None:
            if self._config.silent_drop_unknown_units:
                return None
            self.report.exceptions_sent += 1
            return codec.make_exception(frame, ExceptionCode.GATEWAY_TARGET_NO_RESPONSE)
        if unit.read_only and codec.is_write_request(frame.pdu):
            self.report.exceptions_sent += 1
            return codec.make_exception(frame, ExceptionCode.ILLEGAL_FUNCTION)
        response_pdu = datastore.apply_request(unit.store, frame.pdu)
        if codec.is_exception(response_pdu):
            self.report.exceptions_sent += 1
        return codec.make_frame(
            frame.header.transaction_id, frame.header.unit_id, response_pdu)


def serve(runtime: Runtime, config: OutstationConfig, shutdown,
          hub: Optional[CaptureHub] = None) -> OutstationReport:
    """Run until `shutdown` is set; returns the run report."""
    station = Outstation(runtime, config, hub)
    station.start()
    shutdown.wait()
    station.stop()
    return station.report
