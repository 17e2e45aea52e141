"""Bit-exact Modbus/TCP frame encoding and decoding.

A frame is the 7-byte MBAP header (transaction id, protocol id 0, length,
unit id) followed by a PDU (function code + body), all fields big-endian.
PDUs are direction-ambiguous on the wire - a five-byte function-0x01 PDU is
both a valid read request and a valid 24-coil response - so decoding takes an
explicit Direction. Encoding validates every protocol invariant and raises
InvariantViolation; decoding raises MalformedFrame and never anything else.

Maximum PDU size is 253 bytes, giving an MBAP length field of 2..254.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional, Union

MBAP_SIZE = 7
MAX_PDU = 253

MAX_READ_BITS = 2000
MAX_READ_REGISTERS = 125
MAX_WRITE_BITS = 1968
MAX_WRITE_REGISTERS = 123

COIL_ON = 0xFF00
COIL_OFF = 0x0000


class Direction(enum.Enum):
    REQUEST = "request"
    RESPONSE = "response"


class FunctionCode(enum.IntEnum):
    READ_COILS = 0x01
    READ_DISCRETE_INPUTS = 0x02
    READ_HOLDING_REGISTERS = 0x03
    READ_INPUT_REGISTERS = 0x04
    WRITE_SINGLE_COIL = 0x05
    WRITE_SINGLE_REGISTER = 0x06
    WRITE_MULTIPLE_COILS = 0x0F
    WRITE_MULTIPLE_REGISTERS = 0x10


READ_FUNCTIONS = frozenset({
    FunctionCode.READ_COILS, FunctionCode.READ_DISCRETE_INPUTS,
    FunctionCode.READ_HOLDING_REGISTERS, FunctionCode.READ_INPUT_REGISTERS})
WRITE_FUNCTIONS = frozenset({
    FunctionCode.WRITE_SINGLE_COIL, FunctionCode.WRITE_SINGLE_REGISTER,
    FunctionCode.WRITE_MULTIPLE_COILS, FunctionCode.WRITE_MULTIPLE_REGISTERS})
BIT_READS = frozenset({FunctionCode.READ_COILS, FunctionCode.READ_DISCRETE_INPUTS})
REGISTER_READS = frozenset({
    FunctionCode.READ_HOLDING_REGISTERS, FunctionCode.READ_INPUT_REGISTERS})


class ExceptionCode(enum.IntEnum):
    ILLEGAL_FUNCTION = 0x01
    ILLEGAL_DATA_ADDRESS = 0x02
    ILLEGAL_DATA_VALUE = 0x03
    SERVER_DEVICE_FAILURE = 0x04
    GATEWAY_TARGET_NO_RESPONSE = 0x0B


class InvariantViolation(ValueError):
    """A value breaks a protocol invariant; the frame cannot be encoded."""


class MalformedFrame(ValueError):
    """Input bytes cannot be a well-formed frame."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"malformed frame at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise InvariantViolation(message)


def _check_u16(value: int, what: str) -> None:
    _check(0 <= value <= 0xFFFF, f"{what} must fit in 16 bits, got {value}")


# ---------------------------------------------------------------------------
# PDU variants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReadRequest:
    function: FunctionCode
    address: int
    quantity: int

    def to_bytes(self) -> bytes:
        _check(self.function in READ_FUNCTIONS, f"{self.function!r} is not a read")
        _check_u16(self.address, "address")
        limit = MAX_READ_BITS if self.function in BIT_READS else MAX_READ_REGISTERS
        _check(1 <= self.quantity <= limit,
               f"read quantity {self.quantity} outside 1..{limit}")
        return struct.pack(">BHH", self.function, self.address, self.quantity)


@dataclass(frozen=True)
class ReadBitsResponse:
    """Coil/discrete-input read response; bits packed LSB-first per byte."""

    function: FunctionCode
    data: bytes

    def to_bytes(self) -> bytes:
        _check(self.function in BIT_READS, f"{self.function!r} is not a bit read")
        _check(1 <= len(self.data) <= 250, "byte count outside 1..250")
        return struct.pack(">BB", self.function, len(self.data)) + self.data

    @classmethod
    def from_bits(cls, function: FunctionCode, bits: list) -> "ReadBitsResponse":
        packed = bytearray((len(bits) + 7) // 8)
        for i, bit in enumerate(bits):
            if bit:
                packed[i // 8] |= 1 << (i % 8)
        return cls(function, bytes(packed))

    def bits(self, count: Optional[int] = None) -> list:
        n = 8 * len(self.data) if count is None else count
        return [bool(self.data[i // 8] >> (i % 8) & 1) for i in range(n)]


@dataclass(frozen=True)
class ReadRegistersResponse:
    function: FunctionCode
    values: tuple

    def to_bytes(self) -> bytes:
        _check(self.function in REGISTER_READS,
               f"{self.function!r} is not a register read")
        _check(1 <= len(self.values) <= MAX_READ_REGISTERS,
               f"register count {len(self.values)} outside 1..{MAX_READ_REGISTERS}")
        for v in self.values:
            _check_u16(v, "register value")
        return struct.pack(">BB", self.function, 2 * len(self.values)) + b"".join(
            struct.pack(">H", v) for v in self.values)


@dataclass(frozen=True)
class WriteSingleCoil:
    """Request and echo response share this shape. `value` is the raw wire
    pattern: only 0xFF00 (on) and 0x0000 (off) encode."""

    address: int
    value: int

    function = FunctionCode.WRITE_SINGLE_COIL

    @property
    def is_on(self) -> bool:
        return self.value == COIL_ON

    @classmethod
    def make(cls, address: int, on: bool) -> "WriteSingleCoil":
        return cls(address, COIL_ON if on else COIL_OFF)

    def flipped(self) -> "WriteSingleCoil":
        return WriteSingleCoil(self.address, COIL_OFF if self.is_on else COIL_ON)

    def to_bytes(self) -> bytes:
        _check_u16(self.address, "address")
        _check(self.value in (COIL_ON, COIL_OFF),
               f"coil value pattern 0x{self.value:04X} is not 0xFF00/0x0000")
        return struct.pack(">BHH", self.function, self.address, self.value)


@dataclass(frozen=True)
class WriteSingleRegister:
    address: int
    value: int

    function = FunctionCode.WRITE_SINGLE_REGISTER

    def to_bytes(self) -> bytes:
        _check_u16(self.address, "address")
        _check_u16(self.value, "register value")
        return struct.pack(">BHH", self.function, self.address, self.value)


@dataclass(frozen=True)
class WriteMultipleCoilsRequest:
    address: int
    bits: tuple

    function = FunctionCode.WRITE_MULTIPLE_COILS

    def to_bytes(self) -> bytes:
        _check_u16(self.address, "address")
        _check(1 <= len(self.bits) <= MAX_WRITE_BITS,
               f"coil count {len(self.bits)} outside 1..{MAX_WRITE_BITS}")
        nbytes = (len(self.bits) + 7) // 8
        packed = bytearray(nbytes)
        for i, bit in enumerate(self.bits):
            if bit:
                packed[i // 8] |= 1 << (i % 8)
        return struct.pack(">BHHB", self.function, self.address,
                           len(self.bits), nbytes) + bytes(packed)


@dataclass(frozen=True)
class WriteMultipleRegistersRequest:
    address: int
    values: tuple

    function = FunctionCode.WRITE_MULTIPLE_REGISTERS

    def to_bytes(self) -> bytes:
        _check_u16(self.address, "address")
        _check(1 <= len(self.values) <= MAX_WRITE_REGISTERS,
               f"register count {len(self.values)} outside 1..{MAX_WRITE_REGISTERS}")
        for v in self.values:
            _check_u16(v, "register value")
        return struct.pack(">BHHB", self.function, self.address,
                           len(self.values), 2 * len(self.values)) + b"".join(
            struct.pack(">H", v) for v in self.values)


@dataclass(frozen=True)
class WriteMultipleResponse:
    function: FunctionCode
    address: int
    quantity: int

    def to_bytes(self) -> bytes:
        _check(self.function in (FunctionCode.WRITE_MULTIPLE_COILS,
                                 FunctionCode.WRITE_MULTIPLE_REGISTERS),
               f"{self.function!r} is not a write-multiple")
        _check_u16(self.address, "address")
        limit = (MAX_WRITE_BITS if self.function is FunctionCode.WRITE_MULTIPLE_COILS
                 else MAX_WRITE_REGISTERS)
        _check(1 <= self.quantity <= limit, "write-multiple quantity out of range")
        return struct.pack(">BHH", self.function, self.address, self.quantity)


@dataclass(frozen=True)
class ExceptionResponse:
    """`function` is the original request function; the wire code has the
    high bit set."""

    function: FunctionCode
    code: ExceptionCode

    def to_bytes(self) -> bytes:
        return struct.pack(">BB", self.function | 0x80, self.code)


Pdu = Union[
    ReadRequest, ReadBitsResponse, ReadRegistersResponse, WriteSingleCoil,
    WriteSingleRegister, WriteMultipleCoilsRequest, WriteMultipleRegistersRequest,
    WriteMultipleResponse, ExceptionResponse,
]


def is_exception(pdu: Pdu) -> bool:
    return isinstance(pdu, ExceptionResponse)


def is_write_request(pdu: Pdu) -> bool:
    return isinstance(pdu, (WriteSingleCoil, WriteSingleRegister,
                            WriteMultipleCoilsRequest, WriteMultipleRegistersRequest))


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MbapHeader:
    transaction_id: int
    protocol_id: int
    length: int
    unit_id: int


@dataclass(frozen=True)
class Frame:
    header: MbapHeader
    pdu: Pdu


def make_frame(transaction_id: int, unit_id: int, pdu: Pdu) -> Frame:
    """Build a frame with the length field computed from the PDU."""
    length = 1 + len(pdu.to_bytes())
    return Frame(MbapHeader(transaction_id, 0, length, unit_id), pdu)


def encode_frame(frame: Frame) -> bytes:
    h = frame.header
    _check_u16(h.transaction_id, "transaction id")
    _check(h.protocol_id == 0, f"protocol id must be 0, got {h.protocol_id}")
    _check(0 <= h.unit_id <= 255, f"unit id {h.unit_id} outside 0..255")
    body = frame.pdu.to_bytes()
    _check(len(body) <= MAX_PDU, f"pdu of {len(body)} bytes exceeds {MAX_PDU}")
    _check(h.length == 1 + len(body),
           f"header length {h.length} != 1 + pdu length {len(body)}")
    return struct.pack(">HHH", h.transaction_id, 0, h.length) + bytes([h.unit_id]) + body


def make_exception(request: Frame, code: ExceptionCode) -> Frame:
    _check(not is_exception(request.pdu),
           "cannot build an exception for an exception response")
    pdu = ExceptionResponse(FunctionCode(request.pdu.function), ExceptionCode(code))
    return make_frame(request.header.transaction_id, request.header.unit_id, pdu)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def _decode_pdu(body: bytes, direction: Direction, offset: int) -> Pdu:
    def bad(reason: str) -> MalformedFrame:
        return MalformedFrame(offset, reason)

    if not body:
        raise bad("empty pdu")
    raw_fc = body[0]

    if raw_fc & 0x80:
        if direction is not Direction.RESPONSE:
            raise bad(f"exception code 0x{raw_fc:02X} in request direction")
        base = raw_fc & 0x7F
        try:
            function = FunctionCode(base)
        except ValueError:
            raise bad(f"exception for unknown function 0x{base:02X}") from None
        if len(body) != 2:
            raise bad(f"exception pdu must be 2 bytes, got {len(body)}")
        try:
            code = ExceptionCode(body[1])
        except ValueError:
            raise bad(f"unknown exception code 0x{body[1]:02X}") from None
        return ExceptionResponse(function, code)

    try:
        function = FunctionCode(raw_fc)
    except ValueError:
        raise bad(f"unknown function code 0x{raw_fc:02X}") from None

    if function in READ_FUNCTIONS and direction is Direction.REQUEST:
        if len(body) != 5:
            raise bad(f"read request pdu must be 5 bytes, got {len(body)}")
        address, quantity = struct.unpack(">HH", body[1:5])
        limit = MAX_READ_BITS if function in BIT_READS else MAX_READ_REGISTERS
        if not 1 <= quantity <= limit:
            raise bad(f"read quantity {quantity} outside 1..{limit}")
        return ReadRequest(function, address, quantity)

    if function in BIT_READS:  # response direction
        if len(body) < 2 or len(body) != 2 + body[1]:
            raise bad("bit-read response length does not match byte count")
        if not 1 <= body[1] <= 250:
            raise bad(f"bit-read byte count {body[1]} outside 1..250")
        return ReadBitsResponse(function, body[2:])

    if function in REGISTER_READS:  # response direction
        if len(body) < 2 or len(body) != 2 + body[1]:
            raise bad("register-read response length does not match byte count")
        if body[1] % 2 or not 2 <= body[1] <= 2 * MAX_READ_REGISTERS:
            raise bad(f"register-read byte count {body[1]} invalid")
        count = body[1] // 2
        values = struct.unpack(f">{count}H", body[2:])
        return ReadRegistersResponse(function, values)

    if function is FunctionCode.WRITE_SINGLE_COIL:
        if len(body) != 5:
            raise bad(f"write-single-coil pdu must be 5 bytes, got {len(body)}")
        address, value = struct.unpack(">HH", body[1:5])
        if value not in (COIL_ON, COIL_OFF):
            raise bad(f"coil value pattern 0x{value:04X} is not 0xFF00/0x0000")
        return WriteSingleCoil(address, value)

    if function is FunctionCode.WRITE_SINGLE_REGISTER:
        if len(body) != 5:
            raise bad(f"write-single-register pdu must be 5 bytes, got {len(body)}")
        address, value = struct.unpack(">HH", body[1:5])
        return WriteSingleRegister(address, value)

    if direction is Direction.RESPONSE:
        # write-multiple responses echo address + quantity
        if len(body) != 5:
            raise bad(f"write-multiple response pdu must be 5 bytes, got {len(body)}")
        address, quantity = struct.unpack(">HH", body[1:5])
        limit = (MAX_WRITE_BITS if function is FunctionCode.WRITE_MULTIPLE_COILS
                 else MAX_WRITE_REGISTERS)
        if not 1 <= quantity <= limit:
            raise bad(f"write-multiple quantity {quantity} outside 1..{limit}")
        return WriteMultipleResponse(function, address, quantity)

    if function is FunctionCode.WRITE_MULTIPLE_COILS:
        if len(body) < 6:
            raise bad("write-multiple-coils request too short")
        address, quantity, nbytes = struct.unpack(">HHB", body[1:6])
        if not 1 <= quantity <= MAX_WRITE_BITS:
            raise bad(f"coil count {quantity} outside 1..{MAX_WRITE_BITS}")
        if nbytes != (quantity + 7) // 8 or len(body) != 6 + nbytes:
            raise bad("write-multiple-coils byte count inconsistent")
        data = body[6:]
        bits = tuple(bool(data[i // 8] >> (i % 8) & 1) for i in range(quantity))
        return WriteMultipleCoilsRequest(address, bits)

    # WRITE_MULTIPLE_REGISTERS request
    if len(body) < 6:
        raise bad("write-multiple-registers request too short")
    address, quantity, nbytes = struct.unpack(">HHB", body[1:6])
    if not 1 <= quantity <= MAX_WRITE_REGISTERS:
        raise bad(f"register count {quantity} outside 1..{MAX_WRITE_REGISTERS}")
    if nbytes != 2 * quantity or len(body) != 6 + nbytes:
        raise bad("write-multiple-registers byte count inconsistent")
    values = struct.unpack(f">{quantity}H", body[6:])
    return WriteMultipleRegistersRequest(address, values)


class FrameSplitter:
    """Incremental MBAP-level framing over a byte stream.

    feed() returns complete raw frames; header-level garbage (bad protocol id,
    length out of range) raises MalformedFrame with the absolute stream offset.
    PDU contents are not inspected here.
    """

    def __init__(self) -> None:
        self._buf = bytearray()
        self._consumed = 0

    @property
    def remainder(self) -> bytes:
        return bytes(self._buf)

    def clear(self) -> bytes:
        """Drop and return any buffered bytes (resync after garbage)."""
        data = bytes(self._buf)
        self._buf.clear()
        self._consumed += len(data)
        return data

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        frames = []
        while len(self._buf) >= 6:
            _, protocol_id, length = struct.unpack(">HHH", self._buf[:6])
            if protocol_id != 0:
                raise MalformedFrame(
                    self._consumed, f"protocol id must be 0, got {protocol_id}")
            if not 2 <= length <= 1 + MAX_PDU:
                raise MalformedFrame(
                    self._consumed, f"length field {length} outside 2..{1 + MAX_PDU}")
            total = 6 + length
            if len(self._buf) < total:
                break
            frames.append(bytes(self._buf[:total]))
            del self._buf[:total]
            self._consumed += total
        return frames


def decode_frame_bytes(raw: bytes, direction: Direction, offset: int = 0) -> Frame:
    """Decode exactly one complete frame (as returned by FrameSplitter)."""
    if len(raw) < MBAP_SIZE:
        raise MalformedFrame(offset, f"frame of {len(raw)} bytes is too short")
    tid, protocol_id, length = struct.unpack(">HHH", raw[:6])
    if protocol_id != 0:
        raise MalformedFrame(offset, f"protocol id must be 0, got {protocol_id}")
    if length != len(raw) - 6:
        raise MalformedFrame(
            offset, f"length field {length} does not match body of {len(raw) - 6}")
    unit_id = raw[6]
    pdu = _decode_pdu(raw[7:], direction, offset + 7)
    return Frame(MbapHeader(tid, 0, length, unit_id), pdu)


def decode_stream(buffer: bytes, direction: Direction = Direction.REQUEST):
    """Decode zero or more complete frames; returns (frames, remainder)."""
    splitter = FrameSplitter()
    offset = 0
    frames = []
    for raw in splitter.feed(buffer):
        frames.append(decode_frame_bytes(raw, direction, offset))
        offset += len(raw)
    return frames, splitter.remainder


# ---------------------------------------------------------------------------
# JSON projection (capture files, structured reports)
# ---------------------------------------------------------------------------

_PDU_TAGS = {
    ReadRequest: "read_request",
    ReadBitsResponse: "read_bits_response",
    ReadRegistersResponse: "read_registers_response",
    WriteSingleCoil: "write_single_coil",
    WriteSingleRegister: "write_single_register",
    WriteMultipleCoilsRequest: "write_multiple_coils_request",
    WriteMultipleRegistersRequest: "write_multiple_registers_request",
    WriteMultipleResponse: "write_multiple_response",
    ExceptionResponse: "exception",
}


def pdu_to_jsonable(pdu: Pdu) -> dict:
    tag = _PDU_TAGS[type(pdu)]
    if isinstance(pdu, ReadRequest):
        return {"type": tag, "function": int(pdu.function),
                "address": pdu.address, "quantity": pdu.quantity}
    if isinstance(pdu, ReadBitsResponse):
        return {"type": tag, "function": int(pdu.function), "data": pdu.data.hex()}
    if isinstance(pdu, ReadRegistersResponse):
        return {"type": tag, "function": int(pdu.function), "values": list(pdu.values)}
    if isinstance(pdu, WriteSingleCoil):
        return {"type": tag, "address": pdu.address, "value": pdu.value}
    if isinstance(pdu, WriteSingleRegister):
        return {"type": tag, "address": pdu.address, "value": pdu.value}
    if isinstance(pdu, WriteMultipleCoilsRequest):
        return {"type": tag, "address": pdu.address,
                "bits": [int(b) for b in pdu.bits]}
    if isinstance(pdu, WriteMultipleRegistersRequest):
        return {"type": tag, "address": pdu.address, "values": list(pdu.values)}
    if isinstance(pdu, WriteMultipleResponse):
        return {"type": tag, "function": int(pdu.function),
                "address": pdu.address, "quantity": pdu.quantity}
    return {"type": tag, "function": int(pdu.function), "code": int(pdu.code)}


def pdu_from_jsonable(obj: dict) -> Pdu:
    tag = obj["type"]
    if tag == "read_request":
        return ReadRequest(FunctionCode(obj["function"]), obj["address"],
                           obj["quantity"])
    if tag == "read_bits_response":
        return ReadBitsResponse(FunctionCode(obj["function"]),
                                bytes.fromhex(obj["data"]))
    if tag == "read_registers_response":
        return ReadRegistersResponse(FunctionCode(obj["function"]),
                                     tuple(obj["values"]))
    if tag == "write_single_coil":
        return WriteSingleCoil(obj["address"], obj["value"])
    if tag == "write_single_register":
        return WriteSingleRegister(obj["address"], obj["value"])
    if tag == "write_multiple_coils_request":
        return WriteMultipleCoilsRequest(obj["address"],
                                         tuple(bool(b) for b in obj["bits"]))
    if tag == "write_multiple_registers_request":
        return WriteMultipleRegistersRequest(obj["address"], tuple(obj["values"]))
    if tag == "write_multiple_response":
        return WriteMultipleResponse(FunctionCode(obj["function"]),
                                     obj["address"], obj["quantity"])
    if tag == "exception":
        return ExceptionResponse(FunctionCode(obj["function"]),
                                 ExceptionCode(obj["code"]))
    raise ValueError(f"unknown pdu tag {tag!r}")


def frame_to_jsonable(frame: Frame) -> dict:
    return {"tid": frame.header.transaction_id, "unit": frame.header.unit_id,
            "pdu": pdu_to_jsonable(frame.pdu)}


def frame_from_jsonable(obj: dict) -> Frame:
    return make_frame(obj["tid"], obj["unit"], pdu_from_jsonable(obj["pdu"]))
