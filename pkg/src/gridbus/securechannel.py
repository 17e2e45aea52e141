"""Authenticated, encrypted session layer wrapping Modbus/TCP frames.

A pre-shared-key handshake with explicit transcript binding establishes
per-direction AES-GCM keys; frames then travel as sealed records carrying a
64-bit sequence number. Any single-bit modification fails the tag check, a
record at or below the last accepted sequence is rejected as a replay, and a
wrong secret aborts the handshake before any frame flows. Certificate-based
key establishment is an extension point, not implemented here.

Wire format: every message is `SBX1 | u32 length | payload`, deliberately not
parseable as an MBAP header so middleboxes see an opaque stream from the first
byte. Payloads are tagged: SBH1 hello, SBC1 key confirmation, SBR1 record.

Handshake nonces come from the runtime entropy source: seeded (reproducible)
under the virtual clock, os.urandom on the wall clock. This is a testbed
trade-off - do not reuse the pattern where real secrecy matters.

The latency benchmark answers one question: does the secured write/response
round trip fit the 16.67 ms budget of a 60 Hz grid cycle.
"""

from __future__ import annotations

import hashlib
import hmac
import statistics
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import codec
from .capture import CaptureHub
from .codec import Direction, Frame, MalformedFrame
from .net import (
    Endpoint,
    PeerReset,
    Runtime,
    TransportClosed,
    TransportError,
    TransportTimeout,
    ZERO_IDENTITY,
)
from .outstation import Outstation, OutstationConfig

CHANNEL_MAGIC = b"SBX1"
TAG_HELLO = b"SBH1"
TAG_CONFIRM = b"SBC1"
TAG_RECORD = b"SBR1"

ROLE_MASTER = "master"
ROLE_OUTSTATION = "outstation"
_ROLE_BYTE = {ROLE_MASTER: b"M", ROLE_OUTSTATION: b"O"}

MAX_MESSAGE = 1 << 20


class HandshakeFailure(Exception):
    pass


class IntegrityFailure(Exception):
    pass


class ReplayRejected(Exception):
    pass


# ---------------------------------------------------------------------------
# record channel (length-prefixed opaque messages over a connection)
# ---------------------------------------------------------------------------


class RecordChannel:
    def __init__(self, runtime: Runtime, conn):
        self._runtime = runtime
        self._conn = conn
        self._buf = bytearray()

    def send_msg(self, payload: bytes) -> None:
        self._conn.send(CHANNEL_MAGIC + struct.pack(">I", len(payload)) + payload)

    def recv_msg(self, timeout: Optional[float] = None) -> bytes:
        deadline = None
        if timeout is not None:
            deadline = self._runtime.now_ns() + int(timeout * 1e9)
        while True:
            if len(self._buf) >= 8:
                magic, length = self._buf[:4], struct.unpack(">I", self._buf[4:8])[0]
                if bytes(magic) != CHANNEL_MAGIC:
                    raise IntegrityFailure("channel framing corrupted (bad magic)")
                if length > MAX_MESSAGE:
                    raise IntegrityFailure(f"message of {length} bytes exceeds limit")
                if len(self._buf) >= 8 + length:
                    payload = bytes(self._buf[8:8 + length])
                    del self._buf[:8 + length]
                    return payload
            remaining = None
            if deadline is not None:
                remaining = (deadline - self._runtime.now_ns()) / 1e9
                if remaining <= 0:
                    raise TransportTimeout("secure channel recv timed out")
            data = self._conn.recv(timeout=remaining)
            if not data:
                raise TransportClosed("connection closed on the secure channel")
            self._buf.extend(data)


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------


@dataclass
class SecureSession:
    session_id: bytes
    role: str                 # which side this session object belongs to
    send_key: bytes
    recv_key: bytes
    send_sequence: int = 0
    last_accepted: int = -1   # receiver side: strictly increasing guarantee

    @property
    def peer_role(self) -> str:
        return ROLE_OUTSTATION if self.role == ROLE_MASTER else ROLE_MASTER

    def seal(self, frame: Frame) -> "SealedRecord":
        sequence = self.send_sequence
        self.send_sequence += 1
        seq8 = struct.pack(">Q", sequence)
        nonce = b"\x00\x00\x00\x00" + seq8  # per-direction keys: no reuse hazard
        aad = TAG_RECORD + self.session_id + seq8
        ciphertext = AESGCM(self.send_key).encrypt(
            nonce, codec.encode_frame(frame), aad)
        return SealedRecord(self.session_id, sequence, ciphertext)

    def open(self, record: "SealedRecord") -> Frame:
        if record.session_id != self.session_id:
            raise IntegrityFailure("record belongs to a different session")
        if record.sequence <= self.last_accepted:
            raise ReplayRejected(
                f"sequence {record.sequence} <= last accepted {self.last_accepted}")
        seq8 = struct.pack(">Q", record.sequence)
        nonce = b"\x00\x00\x00\x00" + seq8
        aad = TAG_RECORD + self.session_id + seq8
        try:
            plain = AESGCM(self.recv_key).decrypt(nonce, record.ciphertext, aad)
        except InvalidTag as exc:
            raise IntegrityFailure("record failed authentication") from exc
        direction = (Direction.RESPONSE if self.role == ROLE_MASTER
                     else Direction.REQUEST)
        try:
            frame = codec.decode_frame_bytes(plain, direction)
        except MalformedFrame as exc:
            raise IntegrityFailure(f"authenticated payload not a frame: {exc}") from exc
        self.last_accepted = record.sequence
        return frame


@dataclass(frozen=True)
class SealedRecord:
    session_id: bytes
    sequence: int
    ciphertext: bytes

    def to_wire(self) -> bytes:
        return (TAG_RECORD + self.session_id
                + struct.pack(">Q", self.sequence) + self.ciphertext)

    @classmethod
    def from_wire(cls, payload: bytes) -> "SealedRecord":
        if len(payload) < 4 + 16 + 8 or payload[:4] != TAG_RECORD:
            raise IntegrityFailure("not a sealed record")
        return cls(session_id=payload[4:20],
                   sequence=struct.unpack(">Q", payload[20:28])[0],
                   ciphertext=payload[28:])


def _derive(psk: bytes, transcript: bytes) -> dict:
    material = HKDF(algorithm=hashes.SHA256(), length=112, salt=transcript,
                    info=b"gridbus-secure-v1").derive(psk)
    return {
        "m2o": material[0:32],
        "o2m": material[32:64],
        "confirm_m": material[64:80],
        "confirm_o": material[80:96],
        "session_id": material[96:112],
    }


def _confirm_mac(key: bytes, label: bytes, transcript: bytes) -> bytes:
    return hmac.new(key, label + transcript, hashlib.sha256).digest()


def _as_psk(secret) -> bytes:
    psk = secret.encode() if isinstance(secret, str) else bytes(secret)
    if not psk:
        raise ValueError("pre-shared secret must be nonempty")
    return psk


def _session_from(keys: dict, role: str) -> SecureSession:
    if role == ROLE_MASTER:
        send_key, recv_key = keys["m2o"], keys["o2m"]
    else:
        send_key, recv_key = keys["o2m"], keys["m2o"]
    return SecureSession(session_id=keys["session_id"], role=role,
                         send_key=send_key, recv_key=recv_key)


def handshake(runtime: Runtime, channel: RecordChannel, pre_shared_secret,
              role: str, timeout: float = 5.0) -> SecureSession:
    """Mutual key confirmation bound to the hello transcript. Raises
    HandshakeFailure on wrong secret, tampering, timeout, or teardown."""
    psk = _as_psk(pre_shared_secret)
    if role not in _ROLE_BYTE:
        raise ValueError(f"role must be master or outstation, got {role!r}")
    nonce = runtime.token_bytes(16)
    my_hello = TAG_HELLO + _ROLE_BYTE[role] + nonce
    try:
        if role == ROLE_MASTER:
            channel.send_msg(my_hello)
            peer_hello = channel.recv_msg(timeout)
            _check_hello(peer_hello, ROLE_OUTSTATION)
            transcript = hashlib.sha256(my_hello + peer_hello).digest()
            keys = _derive(psk, transcript)
            channel.send_msg(TAG_CONFIRM + _confirm_mac(
                keys["confirm_m"], b"confirm-master", transcript))
            peer_confirm = channel.recv_msg(timeout)
            _check_confirm(peer_confirm, keys["confirm_o"],
                           b"confirm-outstation", transcript)
        else:
            peer_hello = channel.recv_msg(timeout)
            _check_hello(peer_hello, ROLE_MASTER)
            channel.send_msg(my_hello)
            transcript = hashlib.sha256(peer_hello + my_hello).digest()
            keys = _derive(psk, transcript)
            peer_confirm = channel.recv_msg(timeout)
            _check_confirm(peer_confirm, keys["confirm_m"],
                           b"confirm-master", transcript)
            channel.send_msg(TAG_CONFIRM + _confirm_mac(
                keys["confirm_o"], b"confirm-outstation", transcript))
    except (TransportError, IntegrityFailure) as exc:
        raise HandshakeFailure(str(exc)) from exc
    return _session_from(keys, role)


def _check_hello(payload: bytes, expected_role: str) -> None:
    if (len(payload) != 21 or payload[:4] != TAG_HELLO
            or payload[4:5] != _ROLE_BYTE[expected_role]):
        raise HandshakeFailure("malformed hello (tampering or wrong peer role)")


def _check_confirm(payload: bytes, key: bytes, label: bytes,
                   transcript: bytes) -> None:
    if len(payload) != 36 or payload[:4] != TAG_CONFIRM:
        raise HandshakeFailure("malformed key confirmation")
    expected = _confirm_mac(key, label, transcript)
    if not hmac.compare_digest(payload[4:], expected):
        raise HandshakeFailure("key confirmation mismatch (wrong secret "
                               "or tampered transcript)")


def make_session_pair(pre_shared_secret, nonce_m: bytes = b"\x01" * 16,
                      nonce_o: bytes = b"\x02" * 16) -> tuple:
    """Matched (master, outstation) sessions without any I/O; unit tests and
    the per-op benchmark breakdown use this."""
    psk = _as_psk(pre_shared_secret)
    hello_m = TAG_HELLO + _ROLE_BYTE[ROLE_MASTER] + nonce_m
    hello_o = TAG_HELLO + _ROLE_BYTE[ROLE_OUTSTATION] + nonce_o
    transcript = hashlib.sha256(hello_m + hello_o).digest()
    keys = _derive(psk, transcript)
    return _session_from(keys, ROLE_MASTER), _session_from(keys, ROLE_OUTSTATION)


# ---------------------------------------------------------------------------
# secure roles
# ---------------------------------------------------------------------------


class SecureOutstation(Outstation):
    """Outstation behind the authenticated channel. A record that fails to
    open is fatal for its connection (reset), mirroring a TLS alert."""

    def __init__(self, runtime: Runtime, config: OutstationConfig,
                 pre_shared_secret, hub: Optional[CaptureHub] = None,
                 handshake_timeout: float = 5.0):
        super().__init__(runtime, config, hub)
        self._psk = _as_psk(pre_shared_secret)
        self._handshake_timeout = handshake_timeout
        self.integrity_failures = 0
        self.handshake_failures = 0

    def _handle(self, conn) -> None:
        channel = RecordChannel(self._runtime, conn)
        try:
            session = handshake(self._runtime, channel, self._psk,
                                ROLE_OUTSTATION, self._handshake_timeout)
        except HandshakeFailure:
            self.handshake_failures += 1
            conn.abort()
            return
        while True:
            try:
                payload = channel.recv_msg()
            except (TransportClosed, PeerReset):
                return
            except IntegrityFailure:
                self.integrity_failures += 1
                conn.abort()
                return
            try:
                frame = session.open(SealedRecord.from_wire(payload))
            except (IntegrityFailure, ReplayRejected):
                self.integrity_failures += 1
                conn.abort()
                return
            response = self.respond_to(frame)
            if response is None:
                continue
            if self._config.response_delay > 0:
                self._runtime.sleep(self._config.response_delay)
            try:
                channel.send_msg(session.seal(response).to_wire())
            except (TransportClosed, PeerReset):
                return


class SecureMasterSession:
    """Master-side secure client. One failed exchange (integrity, replay,
    reset, timeout) triggers a single reconnect with a fresh handshake."""

    def __init__(self, runtime: Runtime, target: Endpoint, unit_id: int,
                 pre_shared_secret, *, timeout: float = 1.0,
                 handshake_timeout: float = 5.0, retries: int = 1,
                 local_endpoint: Endpoint = ("0.0.0.0", 0),
                 link_identity: bytes = ZERO_IDENTITY,
                 connect_to: Optional[Endpoint] = None,
                 hub: Optional[CaptureHub] = None, tap_id: str = "master-tap"):
        self._runtime = runtime
        self.target = target
        self.unit_id = unit_id
        self.timeout = timeout
        self.retries = retries
        self._psk = _as_psk(pre_shared_secret)
        self._handshake_timeout = handshake_timeout
        self._local_endpoint = local_endpoint
        self._link_identity = link_identity
        self._connect_to = connect_to or target
        self._hub = hub
        self._tap_id = tap_id
        self._conn = None
        self._channel: Optional[RecordChannel] = None
        self._session: Optional[SecureSession] = None
        self._tid = 0
        self.handshakes = 0
        self.failures_observed = 0

    def connect(self) -> None:
        self._conn = self._runtime.net.connect(
            self._connect_to, local_endpoint=self._local_endpoint,
            identity=self._link_identity, claimed_peer=self.target)
        if self._hub is not None:
            self._hub.tap(self._tap_id).bind(self._conn)
        self._channel = RecordChannel(self._runtime, self._conn)
        self._session = handshake(self._runtime, self._channel, self._psk,
                                  ROLE_MASTER, self._handshake_timeout)
        self.handshakes += 1

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None
            self._session = None

    def write_single_coil(self, data_address: int, on: bool):
        from .datastore import AddressOutOfScheme, TableKind, map_data_address
        from .master import WriteOutcome
        table, offset = map_data_address(data_address)
        if table is not TableKind.COILS:
            raise AddressOutOfScheme(
                f"data address {data_address} is not in the coil range")
        pdu = codec.WriteSingleCoil.make(offset, on)
        response = self._transact(pdu)
        return WriteOutcome(acknowledged=True, echo_matches=response.pdu == pdu,
                            response=response)

    def read(self, data_address: int, count: int = 1) -> list:
        from .datastore import map_data_address
        from .master import _READ_FUNCTION_FOR_TABLE, ExceptionResponseError
        table, offset = map_data_address(data_address)
        response = self._transact(
            codec.ReadRequest(_READ_FUNCTION_FOR_TABLE[table], offset, count))
        if codec.is_exception(response.pdu):
            raise ExceptionResponseError(response.pdu.code)
        if isinstance(response.pdu, codec.ReadBitsResponse):
            return response.pdu.bits(count)
        return list(response.pdu.values)

    def _transact(self, pdu: codec.Pdu) -> Frame:
        from .master import ExceptionResponseError
        attempts = 1 + max(0, self.retries)
        last_error: Optional[Exception] = None
        for _ in range(attempts):
            try:
                if self._session is None:
                    self.connect()
                self._tid = (self._tid + 1) % 0x10000
                frame = codec.make_frame(self._tid, self.unit_id, pdu)
                self._channel.send_msg(self._session.seal(frame).to_wire())
                payload = self._channel.recv_msg(self.timeout)
                response = self._session.open(SealedRecord.from_wire(payload))
            except (TransportError, IntegrityFailure, ReplayRejected,
                    HandshakeFailure) as exc:
                self.failures_observed += 1
                last_error = exc
                self._teardown_after_failure()
                continue
            if codec.is_exception(response.pdu):
                raise ExceptionResponseError(response.pdu.code)
            return response
        raise last_error if last_error is not None else TransportTimeout(
            "secure transaction failed")

    def _teardown_after_failure(self) -> None:
        if self._conn is not None:
            try:
                self._conn.abort()
            except TransportError:
                pass
        self._conn = None
        self._session = None


def open_secure_master(runtime: Runtime, target: Endpoint, unit_id: int,
                       pre_shared_secret, **kwargs) -> SecureMasterSession:
    session = SecureMasterSession(runtime, target, unit_id, pre_shared_secret,
                                  **kwargs)
    session.connect()
    return session


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------


@dataclass
class LatencyStats:
    secure: bool
    topology: str
    count: int
    p50_us: float
    p99_us: float
    max_us: float
    mean_us: float
    handshake_us: float = 0.0
    seal_p50_us: float = 0.0
    open_p50_us: float = 0.0

    def to_jsonable(self) -> dict:
        return {
            "secure": self.secure, "topology": self.topology, "count": self.count,
            "p50_us": round(self.p50_us, 3), "p99_us": round(self.p99_us, 3),
            "max_us": round(self.max_us, 3), "mean_us": round(self.mean_us, 3),
            "handshake_us": round(self.handshake_us, 3),
            "seal_p50_us": round(self.seal_p50_us, 3),
            "open_p50_us": round(self.open_p50_us, 3),
        }


def _percentile(sorted_samples: list, fraction: float) -> float:
    index = int(round(fraction * (len(sorted_samples) - 1)))
    return sorted_samples[index]


def latency_benchmark(iterations: int = 1000, topology: str = "loopback",
                      secure: bool = True, pre_shared_secret=b"bench-psk",
                      host: str = "127.0.0.1") -> LatencyStats:
    """Full write-coil round trips over real loopback TCP, wall clock."""
    if iterations < 100:
        raise ValueError("latency benchmark needs at least 100 iterations")
    if topology not in ("loopback", "with-proxy"):
        raise ValueError(f"unknown topology {topology!r}")

    from .interceptor import Proxy, ProxyPlacement
    from .master import MasterSession
    from .outstation import UnitConfig

    runtime = Runtime.wall(seed=0)
    config = OutstationConfig(listen_endpoint=(host, 0), units={1: UnitConfig()})
    if secure:
        station = SecureOutstation(runtime, config, pre_shared_secret)
    else:
        station = Outstation(runtime, config)
    station.start()
    proxy = None
    target = station.endpoint
    if topology == "with-proxy":
        proxy = Proxy(runtime, ProxyPlacement(
            listen_endpoint=(host, 0), upstream_endpoint=station.endpoint,
            link_identity=ZERO_IDENTITY), rules=[])
        proxy.start()
        target = proxy.endpoint

    handshake_us = 0.0
    t0 = time.perf_counter_ns()
    if secure:
        session = open_secure_master(runtime, target, 1, pre_shared_secret,
                                     timeout=5.0)
        handshake_us = (time.perf_counter_ns() - t0) / 1e3
    else:
        session = MasterSession(runtime, target, 1, timeout=5.0)
        session.connect()

    samples_us = []
    try:
        for _ in range(20):  # warmup
            session.write_single_coil(20, True)
        for i in range(iterations):
            t0 = time.perf_counter_ns()
            session.write_single_coil(20, i % 2 == 0)
            samples_us.append((time.perf_counter_ns() - t0) / 1e3)
    finally:
        session.close()
        if proxy is not None:
            proxy.stop()
        station.stop()

    seal_p50 = open_p50 = 0.0
    if secure:
        seal_us, open_us = _crypto_breakdown(pre_shared_secret)
        seal_p50, open_p50 = seal_us, open_us

    samples_us.sort()
    return LatencyStats(
        secure=secure, topology=topology, count=iterations,
        p50_us=_percentile(samples_us, 0.50),
        p99_us=_percentile(samples_us, 0.99),
        max_us=samples_us[-1],
        mean_us=statistics.fmean(samples_us),
        handshake_us=handshake_us,
        seal_p50_us=seal_p50, open_p50_us=open_p50)


def _crypto_breakdown(pre_shared_secret, reps: int = 500) -> tuple:
    """Median seal/open cost in microseconds, measured off the wire."""
    sender, receiver = make_session_pair(pre_shared_secret)
    frame = codec.make_frame(1, 1, codec.WriteSingleCoil(0x13, codec.COIL_ON))
    seal_samples, open_samples = [], []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        record = sender.seal(frame)
        seal_samples.append((time.perf_counter_ns() - t0) / 1e3)
        t0 = time.perf_counter_ns()
        receiver.open(record)
        open_samples.append((time.perf_counter_ns() - t0) / 1e3)
    seal_samples.sort()
    open_samples.sort()
    return (_percentile(seal_samples, 0.5), _percentile(open_samples, 0.5))


def benchmark_pair(iterations: int = 1000, topology: str = "loopback",
                   pre_shared_secret=b"bench-psk") -> dict:
    """Secure vs plaintext side by side with the overhead ratio."""
    secure = latency_benchmark(iterations, topology, secure=True,
                               pre_shared_secret=pre_shared_secret)
    plain = latency_benchmark(iterations, topology, secure=False)
    ratio = secure.p50_us / plain.p50_us if plain.p50_us else float("inf")
    return {"secure": secure, "plain": plain, "overhead_ratio_p50": ratio}
