"""Transport layer: deterministic in-memory network and real TCP, one API.

Role code (outstation, master, proxy, attacker) is written against the
Connection/Listener duck type and a Runtime that bundles clock, network,
RNG and task spawning. Under the virtual clock everything runs on the
cooperative scheduler and is bit-reproducible; under the wall clock the same
code runs on real sockets and threads.

Connections carry link-layer style metadata: each side has a claimed endpoint
(host, port) and a 6-byte link identity (the in-simulation stand-in for a MAC
address). A dialer may claim an endpoint other than its own and may believe
it reached a different endpoint than it actually did - which is exactly the
spoofing surface the interceptor exploits. Claims never alter delivery; the
link identity always reports the true sender.
"""

from __future__ import annotations

import os
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .simkernel import SimEvent, SimKernel, TaskCancelled, WaitQueue

Endpoint = tuple[str, int]

# observer signature: fn(kind, is_tx, data) with kind in {"data","close","reset"}
Observer = Callable[[str, bool, bytes], None]

ZERO_IDENTITY = b"\x00" * 6


class TransportError(Exception):
    pass


class EndpointUnreachable(TransportError):
    pass


class BindFailure(TransportError):
    pass


class TransportTimeout(TransportError):
    pass


class PeerReset(TransportError):
    """Connection torn down abruptly (TCP RST analog)."""


class TransportClosed(TransportError):
    """Operation on a connection already closed by either side."""


class ListenerClosed(TransportError):
    pass


def parse_endpoint(text: str) -> Endpoint:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {text!r}")
    return host, int(port)


def format_endpoint(ep: Endpoint) -> str:
    return f"{ep[0]}:{ep[1]}"


def parse_identity(text: str) -> bytes:
    parts = text.split(":")
    if len(parts) != 6:
        raise ValueError(f"link identity must be six hex octets, got {text!r}")
    return bytes(int(p, 16) for p in parts)


def format_identity(ident: bytes) -> str:
    return ":".join(f"{b:02x}" for b in ident)


# ---------------------------------------------------------------------------
# virtual transport
# ---------------------------------------------------------------------------


class _SimPipe:
    """One direction of a virtual connection."""

    __slots__ = ("buf", "readable", "eof", "reset")

    def __init__(self) -> None:
        self.buf = bytearray()
        self.readable = WaitQueue()
        self.eof = False
        self.reset = False


class SimConnection:
    def __init__(self, kernel: SimKernel, rx: _SimPipe, tx: _SimPipe,
                 local_endpoint: Endpoint, peer_endpoint: Endpoint,
                 local_identity: bytes, peer_identity: bytes, is_client: bool):
        self._kernel = kernel
        self._rx = rx
        self._tx = tx
        self.local_endpoint = local_endpoint
        self.peer_endpoint = peer_endpoint
        self.local_identity = local_identity
        self.peer_identity = peer_identity
        self.is_client = is_client
        self._observers: list[Observer] = []
        self._peer: Optional["SimConnection"] = None
        self._closed = False

    def add_observer(self, fn: Observer) -> None:
        self._observers.append(fn)

    def _emit(self, kind: str, is_tx: bool, data: bytes = b"") -> None:
        for fn in self._observers:
            fn(kind, is_tx, data)

    def send(self, data: bytes) -> None:
        if self._rx.reset or self._tx.reset:
            raise PeerReset("connection was reset")
        if self._closed or self._tx.eof:
            raise TransportClosed("connection is closed")
        if not data:
            return
        self._tx.buf.extend(data)
        self._emit("data", True, bytes(data))
        peer = self._peer
        if peer is not None:
            peer._emit("data", False, bytes(data))
        self._kernel.notify(self._tx.readable)

    def recv(self, timeout: Optional[float] = None) -> bytes:
        deadline: Optional[int] = None
        if timeout is not None:
            deadline = self._kernel.now_ns() + int(timeout * 1e9)
        while True:
            if self._rx.reset:
                raise PeerReset("connection reset by peer")
            if self._rx.buf:
                data = bytes(self._rx.buf)
                self._rx.buf.clear()
                return data
            if self._rx.eof:
                return b""
            remaining: Optional[int] = None
            if deadline is not None:
                remaining = deadline - self._kernel.now_ns()
                if remaining <= 0:
                    raise TransportTimeout("recv timed out")
            if not self._kernel.wait_on(self._rx.readable, remaining):
                raise TransportTimeout("recv timed out")

    def close(self) -> None:
        if self._closed or self._rx.reset or self._tx.reset:
            return
        self._closed = True
        self._rx.eof = True
        self._tx.eof = True
        self._emit("close", True)
        peer = self._peer
        if peer is not None and not peer._closed:
            peer._closed = True
            peer._emit("close", False)
        self._kernel.notify(self._rx.readable)
        self._kernel.notify(self._tx.readable)

    def abort(self) -> None:
        if self._rx.reset or self._tx.reset:
            return
        self._rx.reset = True
        self._tx.reset = True
        self._rx.buf.clear()
        self._tx.buf.clear()
        self._emit("reset", True)
        peer = self._peer
        if peer is not None:
            peer._emit("reset", False)
        self._kernel.notify(self._rx.readable)
        self._kernel.notify(self._tx.readable)


class SimListener:
    def __init__(self, network: "SimNetwork", endpoint: Endpoint, identity: bytes):
        self._network = network
        self.endpoint = endpoint
        self.identity = identity
        self._backlog: list[SimConnection] = []
        self._waiters = WaitQueue()
        self._closed = False

    def accept(self, timeout: Optional[float] = None) -> SimConnection:
        kernel = self._network._kernel
        deadline: Optional[int] = None
        if timeout is not None:
            deadline = kernel.now_ns() + int(timeout * 1e9)
        while True:
            if self._backlog:
                return self._backlog.pop(0)
            if self._closed:
                raise ListenerClosed(f"listener {format_endpoint(self.endpoint)} closed")
            remaining: Optional[int] = None
            if deadline is not None:
                remaining = deadline - kernel.now_ns()
                if remaining <= 0:
                    raise TransportTimeout("accept timed out")
            if not kernel.wait_on(self._waiters, remaining):
                raise TransportTimeout("accept timed out")

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._network._listeners.pop(self.endpoint, None)
        self._network._kernel.notify(self._waiters)


class SimNetwork:
    """In-memory network: instantaneous, lossless, fully deterministic."""

    def __init__(self, kernel: SimKernel):
        self._kernel = kernel
        self._listeners: dict[Endpoint, SimListener] = {}

    def listen(self, endpoint: Endpoint, identity: bytes = ZERO_IDENTITY) -> SimListener:
        if endpoint in self._listeners:
            raise BindFailure(f"endpoint {format_endpoint(endpoint)} already bound")
        listener = SimListener(self, endpoint, identity)
        self._listeners[endpoint] = listener
        return listener

    def connect(self, target: Endpoint, *, local_endpoint: Endpoint,
                identity: bytes = ZERO_IDENTITY,
                claimed_peer: Optional[Endpoint] = None) -> SimConnection:
        listener = self._listeners.get(target)
        if listener is None or listener._closed:
            raise EndpointUnreachable(f"nothing listening at {format_endpoint(target)}")
        c2s = _SimPipe()
        s2c = _SimPipe()
        client = SimConnection(
            self._kernel, rx=s2c, tx=c2s,
            local_endpoint=local_endpoint,
            peer_endpoint=claimed_peer or target,
            local_identity=identity, peer_identity=listener.identity,
            is_client=True)
        server = SimConnection(
            self._kernel, rx=c2s, tx=s2c,
            local_endpoint=listener.endpoint,
            peer_endpoint=local_endpoint,
            local_identity=listener.identity, peer_identity=identity,
            is_client=False)
        client._peer = server
        server._peer = client
        listener._backlog.append(server)
        self._kernel.notify(listener._waiters, n=1)
        return client


# ---------------------------------------------------------------------------
# wall-clock transport (real sockets)
# ---------------------------------------------------------------------------


class WallConnection:
    """Socket wrapper with a pump thread so taps observe bytes on arrival."""

    def __init__(self, sock: socket.socket, local_endpoint: Endpoint,
                 peer_endpoint: Endpoint, local_identity: bytes,
                 peer_identity: bytes, is_client: bool):
        self._sock = sock
        self.local_endpoint = local_endpoint
        self.peer_endpoint = peer_endpoint
        self.local_identity = local_identity
        self.peer_identity = peer_identity
        self.is_client = is_client
        self._observers: list[Observer] = []
        self._cond = threading.Condition()
        self._buf = bytearray()
        self._eof = False
        self._reset = False
        self._closed = False
        self._pump = threading.Thread(target=self._pump_loop, daemon=True)
        self._pump.start()

    def add_observer(self, fn: Observer) -> None:
        self._observers.append(fn)

    def _emit(self, kind: str, is_tx: bool, data: bytes = b"") -> None:
        for fn in self._observers:
            fn(kind, is_tx, data)

    def _pump_loop(self) -> None:
        while True:
            try:
                data = self._sock.recv(65536)
            except (ConnectionResetError, BrokenPipeError):
                with self._cond:
                    self._reset = True
                    self._cond.notify_all()
                if not self._closed:
                    self._emit("reset", False)
                return
            except OSError:
                with self._cond:
                    self._eof = True
                    self._cond.notify_all()
                return
            if not data:
                with self._cond:
                    self._eof = True
                    self._cond.notify_all()
                if not self._closed:
                    self._emit("close", False)
                return
            with self._cond:
                self._buf.extend(data)
                self._cond.notify_all()
            self._emit("data", False, data)

    def send(self, data: bytes) -> None:
        if self._closed:
            raise TransportClosed("connection is closed")
        try:
            self._sock.sendall(data)
        except (ConnectionResetError, BrokenPipeError) as exc:
            raise PeerReset(str(exc)) from exc
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc
        self._emit("data", True, data)

    def recv(self, timeout: Optional[float] = None) -> bytes:
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._buf or self._eof or self._reset, timeout)
            if self._buf:
                data = bytes(self._buf)
                self._buf.clear()
                return data
            if self._reset:
                raise PeerReset("connection reset by peer")
            if self._eof:
                return b""
            if not ok:
                raise TransportTimeout("recv timed out")
            return b""

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._emit("close", True)
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def abort(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._emit("reset", True)
        # SO_LINGER 0 turns close() into an RST toward the peer. The read side
        # is shut down first so the pump thread leaves its blocking recv();
        # otherwise the in-flight syscall pins the fd and the RST never goes out.
        try:
            self._sock.setsockopt(
                socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
            self._sock.shutdown(socket.SHUT_RD)
        except OSError:
            pass
        self._sock.close()


class WallListener:
    def __init__(self, network: "WallNetwork", sock: socket.socket,
                 endpoint: Endpoint, identity: bytes):
        self._network = network
        self._sock = sock
        self.endpoint = endpoint
        self.identity = identity
        self._closed = False

    def accept(self, timeout: Optional[float] = None) -> WallConnection:
        self._sock.settimeout(timeout)
        try:
            sock, peer = self._sock.accept()
        except socket.timeout as exc:
            raise TransportTimeout("accept timed out") from exc
        except OSError as exc:
            raise ListenerClosed(str(exc)) from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        peer_ep = (peer[0], peer[1])
        return WallConnection(
            sock, local_endpoint=self.endpoint, peer_endpoint=peer_ep,
            local_identity=self.identity,
            peer_identity=self._network.identity_of(peer_ep),
            is_client=False)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        # shutdown wakes any thread blocked in accept(); bare close would not
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class WallNetwork:
    """Real TCP. Link identities come from a configured endpoint map; peers at
    unlisted endpoints (ephemeral client ports) report the all-zero identity."""

    def __init__(self, identity_map: Optional[dict[Endpoint, bytes]] = None):
        self._identity_map = dict(identity_map or {})

    def register_identity(self, endpoint: Endpoint, identity: bytes) -> None:
        self._identity_map[endpoint] = identity

    def identity_of(self, endpoint: Endpoint) -> bytes:
        return self._identity_map.get(endpoint, ZERO_IDENTITY)

    def listen(self, endpoint: Endpoint, identity: bytes = ZERO_IDENTITY) -> WallListener:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind(endpoint)
        except OSError as exc:
            sock.close()
            raise BindFailure(f"cannot bind {format_endpoint(endpoint)}: {exc}") from exc
        sock.listen(16)
        bound = sock.getsockname()
        actual = (endpoint[0], bound[1])
        self._identity_map.setdefault(actual, identity)
        return WallListener(self, sock, actual, identity)

    def connect(self, target: Endpoint, *, local_endpoint: Endpoint,
                identity: bytes = ZERO_IDENTITY,
                claimed_peer: Optional[Endpoint] = None,
                timeout: float = 5.0) -> WallConnection:
        try:
            sock = socket.create_connection(target, timeout=timeout)
        except OSError as exc:
            raise EndpointUnreachable(
                f"cannot reach {format_endpoint(target)}: {exc}") from exc
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return WallConnection(
            sock, local_endpoint=local_endpoint,
            peer_endpoint=claimed_peer or target,
            local_identity=identity,
            peer_identity=self.identity_of(claimed_peer or target),
            is_client=True)


# ---------------------------------------------------------------------------
# clocks, events, runtime
# ---------------------------------------------------------------------------


class VirtualClock:
    def __init__(self, kernel: SimKernel):
        self._kernel = kernel

    def now_ns(self) -> int:
        return self._kernel.now_ns()

    def sleep(self, seconds: float) -> None:
        self._kernel.sleep_ns(int(seconds * 1e9))


class WallClock:
    def __init__(self) -> None:
        self._t0 = time.monotonic_ns()

    def now_ns(self) -> int:
        return time.monotonic_ns() - self._t0

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class _WallEvent:
    """threading.Event with the SimEvent surface (timeouts in seconds)."""

    def __init__(self) -> None:
        self._evt = threading.Event()

    def is_set(self) -> bool:
        return self._evt.is_set()

    def set(self) -> None:
        self._evt.set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._evt.wait(timeout)


class _SimEventSeconds:
    """SimEvent adapter taking float-second timeouts like _WallEvent."""

    def __init__(self, kernel: SimKernel):
        self._evt = SimEvent(kernel)

    def is_set(self) -> bool:
        return self._evt.is_set()

    def set(self) -> None:
        self._evt.set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        ns = None if timeout is None else int(timeout * 1e9)
        return self._evt.wait(ns)


@dataclass
class Runtime:
    """Everything a role needs to run: clock, network, RNG, task spawning."""

    mode: str  # "virtual" | "wall"
    clock: object
    net: object
    rng: random.Random
    kernel: Optional[SimKernel] = None
    _threads: list[threading.Thread] = field(default_factory=list)

    @classmethod
    def virtual(cls, seed: int = 0) -> "Runtime":
        kernel = SimKernel()
        return cls(mode="virtual", clock=VirtualClock(kernel),
                   net=SimNetwork(kernel), rng=random.Random(seed), kernel=kernel)

    @classmethod
    def wall(cls, seed: int = 0,
             identity_map: Optional[dict[Endpoint, bytes]] = None) -> "Runtime":
        return cls(mode="wall", clock=WallClock(),
                   net=WallNetwork(identity_map), rng=random.Random(seed))

    def now_ns(self) -> int:
        return self.clock.now_ns()

    def sleep(self, seconds: float) -> None:
        self.clock.sleep(seconds)

    def token_bytes(self, n: int) -> bytes:
        # Virtual runs trade entropy for reproducibility; wall runs use the OS.
        if self.mode == "virtual":
            return self.rng.randbytes(n)
        return os.urandom(n)

    def new_event(self):
        if self.kernel is not None:
            return _SimEventSeconds(self.kernel)
        return _WallEvent()

    def spawn(self, fn, *args, name: str = "task", daemon: bool = True):
        if self.kernel is not None:
            return self.kernel.spawn(fn, *args, name=name, daemon=daemon)
        thread = threading.Thread(target=fn, args=args, name=name, daemon=True)
        self._threads.append(thread)
        thread.start()
        return thread

    def execute(self, main_fn, *args) -> None:
        """Run `main_fn` to completion under this runtime's scheduling model."""
        if self.kernel is not None:
            task = self.kernel.spawn(main_fn, *args, name="main")
            self.kernel.run(task)
        else:
            main_fn(*args)
            for thread in self._threads:
                thread.join(timeout=10.0)


__all__ = [
    "Endpoint", "ZERO_IDENTITY",
    "TransportError", "EndpointUnreachable", "BindFailure", "TransportTimeout",
    "PeerReset", "TransportClosed", "ListenerClosed",
    "parse_endpoint", "format_endpoint", "parse_identity", "format_identity",
    "SimNetwork", "WallNetwork", "VirtualClock", "WallClock", "Runtime",
    "TaskCancelled",
]
