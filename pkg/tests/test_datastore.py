"""Data tables: address scheme, read-only enforcement, request application."""

import random

import pytest

from gridbus import codec, datastore
from gridbus.codec import ExceptionCode, ExceptionResponse, FunctionCode
from gridbus.datastore import (
    AddressOutOfScheme,
    DataStore,
    IllegalDataAddress,
    IllegalFunctionForTable,
    TableKind,
    apply_request,
    map_data_address,
)

from oracles import NaiveStore, describe_response, random_request_pdu


def test_mapping_spec_points():
    assert map_data_address(1) == (TableKind.COILS, 0)
    assert map_data_address(40001) == (TableKind.HOLDING_REGISTERS, 0)
    assert map_data_address(30010) == (TableKind.INPUT_REGISTERS, 9)
    assert map_data_address(10001) == (TableKind.DISCRETE_INPUTS, 0)


def test_mapping_full_range_against_oracle_table():
    # independent oracle: enumerate the whole scheme from the published ranges
    oracle = {}
    for a in range(1, 10000):
        oracle[a] = (TableKind.COILS, a - 1)
    for a in range(10001, 20000):
        oracle[a] = (TableKind.DISCRETE_INPUTS, a - 10001)
    for a in range(30001, 40000):
        oracle[a] = (TableKind.INPUT_REGISTERS, a - 30001)
    for a in range(40001, 50000):
        oracle[a] = (TableKind.HOLDING_REGISTERS, a - 40001)
    for a in range(0, 50005):
        if a in oracle:
            assert map_data_address(a) == oracle[a]
        else:
            with pytest.raises(AddressOutOfScheme):
                map_data_address(a)


def test_fresh_store_reads_zero():
    store = DataStore.create()
    assert datastore.read(store, TableKind.COILS, 0, 3) == [False, False, False]


def test_read_your_write():
    store = DataStore.create()
    datastore.write(store, TableKind.HOLDING_REGISTERS, 2, [0x0ABC])
    assert datastore.read(store, TableKind.HOLDING_REGISTERS, 2, 1) == [0x0ABC]
    datastore.write(store, TableKind.COILS, 5, [True])
    assert datastore.read(store, TableKind.COILS, 5, 1) == [True]


def test_bounds_checks():
    store = DataStore.create()
    with pytest.raises(IllegalDataAddress):
        datastore.read(store, TableKind.COILS, 98, 5)
    with pytest.raises(IllegalDataAddress):
        datastore.write(store, TableKind.HOLDING_REGISTERS, 99, [1, 2])


def test_read_only_tables_reject_writes():
    store = DataStore.create()
    with pytest.raises(IllegalFunctionForTable):
        datastore.write(store, TableKind.DISCRETE_INPUTS, 0, [True])
    with pytest.raises(IllegalFunctionForTable):
        datastore.write(store, TableKind.INPUT_REGISTERS, 0, [7])


def test_apply_write_single_coil_echoes_request():
    store = DataStore.create()
    req = codec.WriteSingleCoil(0x13, codec.COIL_ON)
    resp = apply_request(store, req)
    assert resp == req
    assert store.coils[0x13] is True


def test_apply_read_coils_fresh_store():
    store = DataStore.create()
    resp = apply_request(store, codec.ReadRequest(FunctionCode.READ_COILS, 0, 8))
    assert resp == codec.ReadBitsResponse(FunctionCode.READ_COILS, b"\x00")


def test_apply_out_of_bounds_read_is_exception_02():
    store = DataStore.create()
    resp = apply_request(
        store, codec.ReadRequest(FunctionCode.READ_HOLDING_REGISTERS, 200, 1))
    assert resp == ExceptionResponse(FunctionCode.READ_HOLDING_REGISTERS,
                                     ExceptionCode.ILLEGAL_DATA_ADDRESS)


def test_apply_bad_coil_pattern_is_exception_03():
    store = DataStore.create()
    resp = apply_request(store, codec.WriteSingleCoil(0, 0x1234))
    assert resp == ExceptionResponse(FunctionCode.WRITE_SINGLE_COIL,
                                     ExceptionCode.ILLEGAL_DATA_VALUE)


def test_apply_response_pdu_is_a_precondition_violation():
    store = DataStore.create()
    with pytest.raises(codec.InvariantViolation):
        apply_request(store, codec.WriteMultipleResponse(
            FunctionCode.WRITE_MULTIPLE_COILS, 0, 1))


def test_read_only_tables_unchanged_by_random_request_sequences():
    rng = random.Random(0xD5)
    store = DataStore.create()
    datastore.preload(store, TableKind.DISCRETE_INPUTS, 3, True)
    datastore.preload(store, TableKind.INPUT_REGISTERS, 0, 1234)
    before = (list(store.discrete_inputs), list(store.input_registers))
    for _ in range(2000):
        apply_request(store, random_request_pdu(rng))
    assert (store.discrete_inputs, store.input_registers) == before


def test_apply_request_is_deterministic():
    req = codec.ReadRequest(FunctionCode.READ_COILS, 0, 5)
    s1, s2 = DataStore.create(), DataStore.create()
    s1.coils[2] = s2.coils[2] = True
    assert apply_request(s1, req) == apply_request(s2, req)
    assert s1 == s2


def test_agreement_with_naive_oracle():
    rng = random.Random(0x0AC1E)
    store = DataStore.create()
    naive = NaiveStore()
    for _ in range(3000):
        pdu = random_request_pdu(rng)
        got = describe_response(apply_request(store, pdu), pdu)
        expected = naive.apply(pdu)
        assert got == expected
    assert store.to_jsonable() == {
        k: [int(v) for v in vals] for k, vals in naive.snapshot().items()}
