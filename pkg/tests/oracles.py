"""Independent brute-force models used as oracles by several test modules.

Deliberately primitive: dict-backed tables, straight-line ifs, no shared code
with the implementation under test.
"""

from gridbus import codec


class NaiveStore:
    """Reference model of a four-table unit as plain dicts."""

    def __init__(self, size=100):
        self.tables = {
            "coils": {i: False for i in range(size)},
            "discrete_inputs": {i: False for i in range(size)},
            "input_registers": {i: 0 for i in range(size)},
            "holding_registers": {i: 0 for i in range(size)},
        }

    def _read(self, name, addr, count):
        table = self.tables[name]
        out = []
        for i in range(addr, addr + count):
            if i not in table:
                return None
            out.append(table[i])
        return out

    def apply(self, pdu):
        """Returns ("ok", response-description) mirroring apply_request."""
        if isinstance(pdu, codec.ReadRequest):
            name = {1: "coils", 2: "discrete_inputs",
                    3: "holding_registers", 4: "input_registers"}[int(pdu.function)]
            values = self._read(name, pdu.address, pdu.quantity)
            if values is None:
                return ("exc", int(pdu.function), 0x02)
            if int(pdu.function) in (1, 2):
                return ("bits", int(pdu.function), [bool(v) for v in values])
            return ("regs", int(pdu.function), [int(v) for v in values])
        if isinstance(pdu, codec.WriteSingleCoil):
            if pdu.value not in (0xFF00, 0x0000):
                return ("exc", 5, 0x03)
            if pdu.address not in self.tables["coils"]:
                return ("exc", 5, 0x02)
            self.tables["coils"][pdu.address] = pdu.value == 0xFF00
            return ("echo", 5, pdu.address, pdu.value)
        if isinstance(pdu, codec.WriteSingleRegister):
            if not 0 <= pdu.value <= 0xFFFF:
                return ("exc", 6, 0x03)
            if pdu.address not in self.tables["holding_registers"]:
                return ("exc", 6, 0x02)
            self.tables["holding_registers"][pdu.address] = pdu.value
            return ("echo", 6, pdu.address, pdu.value)
        if isinstance(pdu, codec.WriteMultipleCoilsRequest):
            cells = range(pdu.address, pdu.address + len(pdu.bits))
            if any(i not in self.tables["coils"] for i in cells):
                return ("exc", 15, 0x02)
            for i, bit in zip(cells, pdu.bits):
                self.tables["coils"][i] = bool(bit)
            return ("multi", 15, pdu.address, len(pdu.bits))
        if isinstance(pdu, codec.WriteMultipleRegistersRequest):
            cells = range(pdu.address, pdu.address + len(pdu.values))
            if any(i not in self.tables["holding_registers"] for i in cells):
                return ("exc", 16, 0x02)
            for i, v in zip(cells, pdu.values):
                self.tables["holding_registers"][i] = int(v)
            return ("multi", 16, pdu.address, len(pdu.values))
        raise AssertionError(f"not a request: {pdu!r}")

    def snapshot(self):
        return {name: [table[i] for i in sorted(table)]
                for name, table in self.tables.items()}


def describe_response(pdu, request):
    """Project an implementation response into the naive model's vocabulary."""
    if isinstance(pdu, codec.ExceptionResponse):
        return ("exc", int(pdu.function), int(pdu.code))
    if isinstance(pdu, codec.ReadBitsResponse):
        return ("bits", int(pdu.function), pdu.bits(request.quantity))
    if isinstance(pdu, codec.ReadRegistersResponse):
        return ("regs", int(pdu.function), list(pdu.values))
    if isinstance(pdu, codec.WriteSingleCoil):
        return ("echo", 5, pdu.address, pdu.value)
    if isinstance(pdu, codec.WriteSingleRegister):
        return ("echo", 6, pdu.address, pdu.value)
    if isinstance(pdu, codec.WriteMultipleResponse):
        return ("multi", int(pdu.function), pdu.address, pdu.quantity)
    raise AssertionError(f"unexpected response: {pdu!r}")


def random_request_pdu(rng, table_size=100):
    """Request generator biased toward boundary addresses so both the legal
    and exception paths get exercised."""
    fc = rng.choice([1, 2, 3, 4, 5, 6, 15, 16])
    addr = rng.choice([
        rng.randrange(0, table_size),
        rng.randrange(max(0, table_size - 5), table_size + 5),
        rng.randrange(0, 200),
    ])
    if fc in (1, 2, 3, 4):
        qty = rng.choice([1, rng.randint(1, 10), rng.randint(1, 120)])
        return codec.ReadRequest(codec.FunctionCode(fc), addr, qty)
    if fc == 5:
        value = rng.choice([0xFF00, 0x0000, 0xFF00, 0x0000, 0x1234])
        return codec.WriteSingleCoil(addr, value)
    if fc == 6:
        return codec.WriteSingleRegister(addr, rng.randrange(0, 0x10000))
    if fc == 15:
        bits = tuple(rng.random() < 0.5 for _ in range(rng.randint(1, 12)))
        return codec.WriteMultipleCoilsRequest(addr, bits)
    values = tuple(rng.randrange(0, 0x10000) for _ in range(rng.randint(1, 8)))
    return codec.WriteMultipleRegistersRequest(addr, values)
