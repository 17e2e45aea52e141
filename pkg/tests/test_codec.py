"""Wire codec tests.

Frozen byte vectors come from the published Modbus Application Protocol
tables; the naive struct-based encoder below is an independent oracle for
randomized cross-checks (kept deliberately separate from the implementation).
"""

import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridbus import codec
from gridbus.codec import (
    Direction,
    ExceptionCode,
    ExceptionResponse,
    Frame,
    FunctionCode,
    InvariantViolation,
    MalformedFrame,
    ReadBitsResponse,
    ReadRegistersResponse,
    ReadRequest,
    WriteMultipleCoilsRequest,
    WriteMultipleRegistersRequest,
    WriteMultipleResponse,
    WriteSingleCoil,
    WriteSingleRegister,
    decode_stream,
    encode_frame,
    make_exception,
    make_frame,
)

# --- independent oracle -------------------------------------------------------


def naive_encode_request(tid, unit, fc, body):
    """Minimal request encoder written only from the public protocol tables."""
    if fc in (0x01, 0x02, 0x03, 0x04):
        pdu = struct.pack(">BHH", fc, body["address"], body["quantity"])
    elif fc == 0x05:
        pdu = struct.pack(">BHH", fc, body["address"], body["value"])
    elif fc == 0x06:
        pdu = struct.pack(">BHH", fc, body["address"], body["value"])
    elif fc == 0x0F:
        bits = body["bits"]
        nbytes = (len(bits) + 7) // 8
        packed = bytearray(nbytes)
        for i, bit in enumerate(bits):
            if bit:
                packed[i // 8] |= 1 << (i % 8)
        pdu = struct.pack(">BHHB", fc, body["address"], len(bits), nbytes) + bytes(packed)
    elif fc == 0x10:
        values = body["values"]
        pdu = struct.pack(">BHHB", fc, body["address"], len(values), 2 * len(values))
        pdu += b"".join(struct.pack(">H", v) for v in values)
    else:
        raise AssertionError(fc)
    return struct.pack(">HHH", tid, 0, 1 + len(pdu)) + bytes([unit]) + pdu


# --- frozen vectors -------------------------------------------------------------


def test_write_single_coil_frozen_bytes():
    frame = make_frame(1, 1, WriteSingleCoil(address=0x0013, value=0xFF00))
    assert encode_frame(frame) == bytes.fromhex("00010000000601050013ff00")


def test_read_holding_registers_frozen_bytes():
    frame = make_frame(0, 0, ReadRequest(FunctionCode.READ_HOLDING_REGISTERS, 0, 1))
    assert encode_frame(frame) == bytes.fromhex("000000000006000300000001")


def test_write_single_coil_bad_value_pattern_rejected():
    with pytest.raises(InvariantViolation):
        encode_frame(make_frame(1, 1, WriteSingleCoil(address=0, value=0x1234)))


def test_decode_roundtrip_of_frozen_vector():
    raw = bytes.fromhex("00010000000601050013ff00")
    frames, rest = decode_stream(raw, Direction.REQUEST)
    assert rest == b""
    assert frames == [make_frame(1, 1, WriteSingleCoil(0x0013, 0xFF00))]


def test_partial_frame_left_as_remainder():
    raw = bytes.fromhex("00010000000601050013ff00")
    frames, rest = decode_stream(raw[:9], Direction.REQUEST)
    assert frames == []
    assert rest == raw[:9]


def test_nonzero_protocol_id_rejected():
    raw = bytearray(bytes.fromhex("00010000000601050013ff00"))
    raw[2:4] = b"\x00\x01"
    with pytest.raises(MalformedFrame):
        decode_stream(bytes(raw), Direction.REQUEST)


def test_make_exception_frozen_pdu_bytes():
    req = make_frame(7, 3, ReadRequest(FunctionCode.READ_HOLDING_REGISTERS, 0, 1))
    exc = make_exception(req, ExceptionCode.ILLEGAL_DATA_ADDRESS)
    assert encode_frame(exc)[7:] == bytes.fromhex("8302")
    assert exc.header.transaction_id == 7
    assert exc.header.unit_id == 3

    req2 = make_frame(9, 1, WriteSingleCoil(0, 0xFF00))
    exc2 = make_exception(req2, ExceptionCode.ILLEGAL_FUNCTION)
    assert encode_frame(exc2)[7:] == bytes.fromhex("8501")


def test_make_exception_of_exception_rejected():
    req = make_frame(1, 1, ReadRequest(FunctionCode.READ_COILS, 0, 1))
    exc = make_exception(req, ExceptionCode.ILLEGAL_FUNCTION)
    with pytest.raises(InvariantViolation):
        make_exception(exc, ExceptionCode.ILLEGAL_FUNCTION)


# --- invariant enforcement ------------------------------------------------------


@pytest.mark.parametrize("fc,qty", [
    (FunctionCode.READ_COILS, 0),
    (FunctionCode.READ_COILS, 2001),
    (FunctionCode.READ_DISCRETE_INPUTS, 2001),
    (FunctionCode.READ_HOLDING_REGISTERS, 126),
    (FunctionCode.READ_INPUT_REGISTERS, 0),
])
def test_read_quantity_limits(fc, qty):
    with pytest.raises(InvariantViolation):
        encode_frame(make_frame(1, 1, ReadRequest(fc, 0, qty)))


def test_write_multiple_limits():
    with pytest.raises(InvariantViolation):
        encode_frame(make_frame(1, 1, WriteMultipleCoilsRequest(0, (True,) * 1969)))
    with pytest.raises(InvariantViolation):
        encode_frame(make_frame(1, 1, WriteMultipleRegistersRequest(0, (0,) * 124)))
    with pytest.raises(InvariantViolation):
        encode_frame(make_frame(1, 1, WriteMultipleRegistersRequest(0, ())))


def test_register_value_range_enforced():
    with pytest.raises(InvariantViolation):
        encode_frame(make_frame(1, 1, WriteSingleRegister(0, 0x10000)))


def test_unknown_function_code_is_decode_error():
    pdu = bytes([0x07, 0x00])
    raw = struct.pack(">HHH", 1, 0, 1 + len(pdu)) + b"\x01" + pdu
    with pytest.raises(MalformedFrame):
        decode_stream(raw, Direction.REQUEST)


def test_exception_pdu_only_decodes_as_response():
    raw = struct.pack(">HHH", 1, 0, 3) + bytes([1, 0x83, 0x02])
    frames, rest = decode_stream(raw, Direction.RESPONSE)
    assert frames[0].pdu == ExceptionResponse(
        FunctionCode.READ_HOLDING_REGISTERS, ExceptionCode.ILLEGAL_DATA_ADDRESS)
    with pytest.raises(MalformedFrame):
        decode_stream(raw, Direction.REQUEST)


# --- randomized cross-check against the naive oracle ----------------------------


def random_request(rng):
    fc = rng.choice([0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x0F, 0x10])
    addr = rng.randrange(0, 0x10000)
    if fc in (0x01, 0x02):
        return fc, {"address": addr, "quantity": rng.randint(1, 2000)}
    if fc in (0x03, 0x04):
        return fc, {"address": addr, "quantity": rng.randint(1, 125)}
    if fc == 0x05:
        return fc, {"address": addr, "value": rng.choice([0xFF00, 0x0000])}
    if fc == 0x06:
        return fc, {"address": addr, "value": rng.randrange(0, 0x10000)}
    if fc == 0x0F:
        bits = tuple(rng.random() < 0.5 for _ in range(rng.randint(1, 1968)))
        return fc, {"address": addr, "bits": bits}
    values = tuple(rng.randrange(0, 0x10000) for _ in range(rng.randint(1, 123)))
    return fc, {"address": addr, "values": values}


def build_pdu(fc, body):
    if fc in (0x01, 0x02, 0x03, 0x04):
        return ReadRequest(FunctionCode(fc), body["address"], body["quantity"])
    if fc == 0x05:
        return WriteSingleCoil(body["address"], body["value"])
    if fc == 0x06:
        return WriteSingleRegister(body["address"], body["value"])
    if fc == 0x0F:
        return WriteMultipleCoilsRequest(body["address"], body["bits"])
    return WriteMultipleRegistersRequest(body["address"], body["values"])


def test_encoder_matches_naive_oracle_on_random_requests():
    rng = random.Random(0xC0DEC)
    for _ in range(2000):
        tid = rng.randrange(0, 0x10000)
        unit = rng.randrange(0, 248)
        fc, body = random_request(rng)
        expected = naive_encode_request(tid, unit, fc, body)
        got = encode_frame(make_frame(tid, unit, build_pdu(fc, body)))
        assert got == expected


# --- property tests --------------------------------------------------------------


def read_requests():
    return st.one_of(
        st.builds(ReadRequest,
                  st.sampled_from([FunctionCode.READ_COILS,
                                   FunctionCode.READ_DISCRETE_INPUTS]),
                  st.integers(0, 0xFFFF), st.integers(1, 2000)),
        st.builds(ReadRequest,
                  st.sampled_from([FunctionCode.READ_HOLDING_REGISTERS,
                                   FunctionCode.READ_INPUT_REGISTERS]),
                  st.integers(0, 0xFFFF), st.integers(1, 125)),
    )


def request_pdus():
    return st.one_of(
        read_requests(),
        st.builds(WriteSingleCoil, st.integers(0, 0xFFFF),
                  st.sampled_from([0xFF00, 0x0000])),
        st.builds(WriteSingleRegister, st.integers(0, 0xFFFF),
                  st.integers(0, 0xFFFF)),
        st.builds(WriteMultipleCoilsRequest, st.integers(0, 0xFFFF),
                  st.lists(st.booleans(), min_size=1, max_size=200).map(tuple)),
        st.builds(WriteMultipleRegistersRequest, st.integers(0, 0xFFFF),
                  st.lists(st.integers(0, 0xFFFF), min_size=1, max_size=123).map(tuple)),
    )


def response_pdus():
    return st.one_of(
        st.builds(ReadBitsResponse,
                  st.sampled_from([FunctionCode.READ_COILS,
                                   FunctionCode.READ_DISCRETE_INPUTS]),
                  st.binary(min_size=1, max_size=250)),
        st.builds(ReadRegistersResponse,
                  st.sampled_from([FunctionCode.READ_HOLDING_REGISTERS,
                                   FunctionCode.READ_INPUT_REGISTERS]),
                  st.lists(st.integers(0, 0xFFFF), min_size=1, max_size=125).map(tuple)),
        st.builds(WriteSingleCoil, st.integers(0, 0xFFFF),
                  st.sampled_from([0xFF00, 0x0000])),
        st.builds(WriteSingleRegister, st.integers(0, 0xFFFF),
                  st.integers(0, 0xFFFF)),
        st.builds(WriteMultipleResponse,
                  st.sampled_from([FunctionCode.WRITE_MULTIPLE_COILS,
                                   FunctionCode.WRITE_MULTIPLE_REGISTERS]),
                  st.integers(0, 0xFFFF), st.integers(1, 123)),
        st.builds(ExceptionResponse,
                  st.sampled_from(list(FunctionCode)),
                  st.sampled_from(list(ExceptionCode))),
    )


def frames(direction):
    pdus = request_pdus() if direction is Direction.REQUEST else response_pdus()
    return st.builds(make_frame, st.integers(0, 0xFFFF), st.integers(0, 255), pdus)


@settings(max_examples=300, deadline=None)
@given(frames(Direction.REQUEST))
def test_request_roundtrip_property(frame):
    decoded, rest = decode_stream(encode_frame(frame), Direction.REQUEST)
    assert rest == b""
    assert decoded == [frame]


@settings(max_examples=300, deadline=None)
@given(frames(Direction.RESPONSE))
def test_response_roundtrip_property(frame):
    decoded, rest = decode_stream(encode_frame(frame), Direction.RESPONSE)
    assert rest == b""
    assert decoded == [frame]


@settings(max_examples=200, deadline=None)
@given(st.lists(frames(Direction.REQUEST), min_size=1, max_size=5),
       st.integers(0, 10_000))
def test_split_invariance_property(frame_list, split_seed):
    blob = b"".join(encode_frame(f) for f in frame_list)
    cut = split_seed % (len(blob) + 1)
    whole, rest_whole = decode_stream(blob, Direction.REQUEST)
    first, rest1 = decode_stream(blob[:cut], Direction.REQUEST)
    second, rest2 = decode_stream(rest1 + blob[cut:], Direction.REQUEST)
    assert rest_whole == b"" and rest2 == b""
    assert first + second == whole == frame_list


def test_fuzz_random_bytes_never_crash():
    rng = random.Random(0xFA22)
    for _ in range(20_000):
        blob = rng.randbytes(rng.randint(0, 40))
        try:
            decode_stream(blob, Direction.REQUEST)
            decode_stream(blob, Direction.RESPONSE)
        except MalformedFrame:
            pass


def test_fuzz_mutated_valid_frames_never_crash():
    rng = random.Random(0xBEEF)
    base = encode_frame(make_frame(5, 1, WriteSingleCoil(0x13, 0xFF00)))
    for _ in range(5_000):
        blob = bytearray(base * rng.randint(1, 3))
        for _ in range(rng.randint(1, 6)):
            blob[rng.randrange(len(blob))] = rng.randrange(256)
        try:
            decode_stream(bytes(blob), Direction.REQUEST)
        except MalformedFrame:
            pass


def test_jsonable_roundtrip_all_pdu_kinds():
    samples = [
        make_frame(1, 2, ReadRequest(FunctionCode.READ_COILS, 3, 4)),
        make_frame(1, 2, ReadBitsResponse(FunctionCode.READ_COILS, b"\x0f")),
        make_frame(1, 2, ReadRegistersResponse(
            FunctionCode.READ_INPUT_REGISTERS, (1, 2, 3))),
        make_frame(1, 2, WriteSingleCoil(19, 0xFF00)),
        make_frame(1, 2, WriteSingleRegister(4, 0xBEEF)),
        make_frame(1, 2, WriteMultipleCoilsRequest(0, (True, False, True))),
        make_frame(1, 2, WriteMultipleRegistersRequest(9, (7, 8))),
        make_frame(1, 2, WriteMultipleResponse(
            FunctionCode.WRITE_MULTIPLE_COILS, 0, 3)),
        make_frame(1, 2, ExceptionResponse(
            FunctionCode.READ_COILS, ExceptionCode.ILLEGAL_FUNCTION)),
    ]
    for frame in samples:
        again = codec.frame_from_jsonable(codec.frame_to_jsonable(frame))
        assert again == frame
