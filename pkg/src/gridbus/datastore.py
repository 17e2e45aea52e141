"""Per-unit storage of the four Modbus data tables.

Coils and holding registers are read/write; discrete inputs and input
registers are read-only and can only be populated by preload. The data-address
scheme is the human-facing numbering: 00001-09999 coils, 10001-19999 discrete
inputs, 30001-39999 input registers, 40001-49999 holding registers. 20001-29999
is reserved and maps to nothing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import codec
from .codec import (
    ExceptionCode,
    ExceptionResponse,
    FunctionCode,
    InvariantViolation,
    Pdu,
)


class TableKind(enum.Enum):
    COILS = "coils"
    DISCRETE_INPUTS = "discrete_inputs"
    INPUT_REGISTERS = "input_registers"
    HOLDING_REGISTERS = "holding_registers"


BIT_TABLES = (TableKind.COILS, TableKind.DISCRETE_INPUTS)
READ_ONLY_TABLES = (TableKind.DISCRETE_INPUTS, TableKind.INPUT_REGISTERS)

# (low, high, table): inclusive human-facing address ranges
_ADDRESS_RANGES = (
    (1, 9999, TableKind.COILS),
    (10001, 19999, TableKind.DISCRETE_INPUTS),
    (30001, 39999, TableKind.INPUT_REGISTERS),
    (40001, 49999, TableKind.HOLDING_REGISTERS),
)


class AddressOutOfScheme(ValueError):
    """Data address falls in none of the four published ranges."""


class IllegalDataAddress(ValueError):
    """Offset/count outside the table bounds."""


class IllegalFunctionForTable(ValueError):
    """Write attempted against a read-only table."""


def map_data_address(address: int) -> tuple:
    """Human-facing data address -> (table kind, zero-based offset)."""
    for low, high, table in _ADDRESS_RANGES:
        if low <= address <= high:
            return table, address - low
    raise AddressOutOfScheme(
        f"address {address} is outside the coil/discrete/input/holding ranges")


def table_for_function(function: FunctionCode) -> TableKind:
    return {
        FunctionCode.READ_COILS: TableKind.COILS,
        FunctionCode.READ_DISCRETE_INPUTS: TableKind.DISCRETE_INPUTS,
        FunctionCode.READ_HOLDING_REGISTERS: TableKind.HOLDING_REGISTERS,
        FunctionCode.READ_INPUT_REGISTERS: TableKind.INPUT_REGISTERS,
        FunctionCode.WRITE_SINGLE_COIL: TableKind.COILS,
        FunctionCode.WRITE_SINGLE_REGISTER: TableKind.HOLDING_REGISTERS,
        FunctionCode.WRITE_MULTIPLE_COILS: TableKind.COILS,
        FunctionCode.WRITE_MULTIPLE_REGISTERS: TableKind.HOLDING_REGISTERS,
    }[function]


@dataclass
class DataStore:
    coils: list = field(default_factory=list)
    discrete_inputs: list = field(default_factory=list)
    input_registers: list = field(default_factory=list)
    holding_registers: list = field(default_factory=list)

    @classmethod
    def create(cls, size: int = 100, *, coils: int = None, discrete_inputs: int = None,
               input_registers: int = None, holding_registers: int = None) -> "DataStore":
        return cls(
            coils=[False] * (coils if coils is not None else size),
            discrete_inputs=[False] * (discrete_inputs if discrete_inputs is not None else size),
            input_registers=[0] * (input_registers if input_registers is not None else size),
            holding_registers=[0] * (holding_registers if holding_registers is not None else size))

    def table(self, kind: TableKind) -> list:
        return getattr(self, kind.value)

    def copy(self) -> "DataStore":
        return DataStore(coils=list(self.coils),
                         discrete_inputs=list(self.discrete_inputs),
                         input_registers=list(self.input_registers),
                         holding_registers=list(self.holding_registers))

    def to_jsonable(self) -> dict:
        return {"coils": [int(b) for b in self.coils],
                "discrete_inputs": [int(b) for b in self.discrete_inputs],
                "input_registers": list(self.input_registers),
                "holding_registers": list(self.holding_registers)}


def read(store: DataStore, table: TableKind, offset: int, count: int) -> list:
    if count < 1:
        raise InvariantViolation(f"read count must be >= 1, got {count}")
    values = store.table(table)
    if offset < 0 or offset + count > len(values):
        raise IllegalDataAddress(
            f"read of {count} at offset {offset} exceeds {table.value}[{len(values)}]")
    return list(values[offset:offset + count])


def write(store: DataStore, table: TableKind, offset: int, values: list) -> None:
    if not values:
        raise InvariantViolation("write requires at least one value")
    if table in READ_ONLY_TABLES:
        raise IllegalFunctionForTable(f"{table.value} is read-only")
    target = store.table(table)
    if offset < 0 or offset + len(values) > len(target):
        raise IllegalDataAddress(
            f"write of {len(values)} at offset {offset} exceeds {table.value}[{len(target)}]")
    if table is TableKind.COILS:
        target[offset:offset + len(values)] = [bool(v) for v in values]
    else:
        for v in values:
            if not 0 <= int(v) <= 0xFFFF:
                raise InvariantViolation(f"register value {v} does not fit in 16 bits")
        target[offset:offset + len(values)] = [int(v) for v in values]


def preload(store: DataStore, table: TableKind, offset: int, value) -> None:
    """Scenario-config preloading; may touch read-only tables."""
    target = store.table(table)
    if offset < 0 or offset >= len(target):
        raise IllegalDataAddress(f"preload offset {offset} exceeds {table.value}[{len(target)}]")
    target[offset] = bool(value) if table in BIT_TABLES else int(value)


def apply_request(store: DataStore, pdu: Pdu) -> Pdu:
    """Execute one request against the store; in-protocol errors come back as
    exception responses (0x01/0x02/0x03), never as raised transport errors."""

    if isinstance(pdu, codec.ReadRequest):
        table = table_for_function(pdu.function)
        try:
            values = read(store, table, pdu.address, pdu.quantity)
        except IllegalDataAddress:
            return ExceptionResponse(pdu.function, ExceptionCode.ILLEGAL_DATA_ADDRESS)
        if pdu.function in codec.BIT_READS:
            return codec.ReadBitsResponse.from_bits(pdu.function, values)
        return codec.ReadRegistersResponse(pdu.function, tuple(values))

    if isinstance(pdu, codec.WriteSingleCoil):
        if pdu.value not in (codec.COIL_ON, codec.COIL_OFF):
            return ExceptionResponse(pdu.function, ExceptionCode.ILLEGAL_DATA_VALUE)
        try:
            write(store, TableKind.COILS, pdu.address, [pdu.is_on])
        except IllegalDataAddress:
            return ExceptionResponse(pdu.function, ExceptionCode.ILLEGAL_DATA_ADDRESS)
        return pdu  # echo

    if isinstance(pdu, codec.WriteSingleRegister):
        if not 0 <= pdu.value <= 0xFFFF:
            return ExceptionResponse(pdu.function, ExceptionCode.ILLEGAL_DATA_VALUE)
        try:
            write(store, TableKind.HOLDING_REGISTERS, pdu.address, [pdu.value])
        except IllegalDataAddress:
            return ExceptionResponse(pdu.function, ExceptionCode.ILLEGAL_DATA_ADDRESS)
        return pdu  # echo

    if isinstance(pdu, codec.WriteMultipleCoilsRequest):
        try:
            write(store, TableKind.COILS, pdu.address, list(pdu.bits))
        except IllegalDataAddress:
            return ExceptionResponse(pdu.function, ExceptionCode.ILLEGAL_DATA_ADDRESS)
        return codec.WriteMultipleResponse(pdu.function, pdu.address, len(pdu.bits))

    if isinstance(pdu, codec.WriteMultipleRegistersRequest):
        try:
            write(store, TableKind.HOLDING_REGISTERS, pdu.address, list(pdu.values))
        except IllegalDataAddress:
            return ExceptionResponse(pdu.function, ExceptionCode.ILLEGAL_DATA_ADDRESS)
        return codec.WriteMultipleResponse(pdu.function, pdu.address, len(pdu.values))

    raise InvariantViolation(f"{type(pdu).__name__} is not a request pdu")
