"""Rule application (pure) and the full proxy data path."""

import pytest

from gridbus import codec
from gridbus.capture import KIND_FRAME, KIND_RESET
from gridbus.codec import Direction, FunctionCode
from gridbus.interceptor import (
    CorruptByte,
    Delay,
    Drop,
    Duplicate,
    FlipCoilValue,
    InjectReset,
    InterceptRule,
    RuleInapplicable,
    RuleMatch,
    SetRegisterValue,
    apply_rule,
    rule_matches,
)
from gridbus.net import PeerReset, TransportTimeout

from harness import ID_PROXY, MASTER, PLC, run_mitm


def coil_frame(on=True, tid=1, unit=1, addr=0x13):
    return codec.make_frame(tid, unit, codec.WriteSingleCoil.make(addr, on))


# -- apply_rule (pure core) ----------------------------------------------------


def test_flip_is_an_involution():
    rule = InterceptRule(RuleMatch(), FlipCoilValue())
    frame = coil_frame(on=False)
    once = apply_rule(rule, frame, Direction.REQUEST).frames_out[0]
    assert once.pdu.is_on
    twice = apply_rule(rule, once, Direction.REQUEST).frames_out[0]
    assert twice == frame


def test_set_register_value_changes_exactly_two_payload_bytes():
    rule = InterceptRule(RuleMatch(), SetRegisterValue(0xBEEF))
    frame = codec.make_frame(3, 1, codec.WriteSingleRegister(4, 0x1111))
    out = apply_rule(rule, frame, Direction.REQUEST).frames_out[0]
    before = codec.encode_frame(frame)
    after = codec.encode_frame(out)
    diff = [i for i, (a, b) in enumerate(zip(before, after)) if a != b]
    assert diff == [10, 11]  # the value field only


def test_flip_on_read_is_inapplicable():
    rule = InterceptRule(RuleMatch(), FlipCoilValue())
    frame = codec.make_frame(1, 1, codec.ReadRequest(FunctionCode.READ_COILS, 0, 1))
    with pytest.raises(RuleInapplicable):
        apply_rule(rule, frame, Direction.REQUEST)


def test_drop_duplicate_delay_reset_outcomes():
    frame = coil_frame()
    assert apply_rule(InterceptRule(RuleMatch(), Drop()), frame,
                      Direction.REQUEST).frames_out == []
    dup = apply_rule(InterceptRule(RuleMatch(), Duplicate()), frame, Direction.REQUEST)
    assert dup.frames_out == [frame, frame]
    delayed = apply_rule(InterceptRule(RuleMatch(), Delay(1.5)), frame, Direction.REQUEST)
    assert delayed.delay == 1.5 and delayed.frames_out == [frame]
    reset = apply_rule(InterceptRule(RuleMatch(), InjectReset()), frame, Direction.REQUEST)
    assert reset.reset and reset.frames_out == []


def test_corrupt_byte_is_raw_only():
    with pytest.raises(RuleInapplicable):
        apply_rule(InterceptRule(RuleMatch(), CorruptByte()), coil_frame(),
                   Direction.REQUEST)


def test_rule_matching_predicates():
    frame = coil_frame(tid=1, unit=7, addr=5)
    assert rule_matches(
        InterceptRule(RuleMatch(direction="request",
                                function=FunctionCode.WRITE_SINGLE_COIL,
                                unit_id=7, address=5), Drop()),
        frame, Direction.REQUEST)
    assert not rule_matches(
        InterceptRule(RuleMatch(direction="response"), Drop()), frame,
        Direction.REQUEST)
    assert not rule_matches(
        InterceptRule(RuleMatch(function=FunctionCode.READ_COILS), Drop()),
        frame, Direction.REQUEST)
    assert not rule_matches(
        InterceptRule(RuleMatch(unit_id=8), Drop()), frame, Direction.REQUEST)


# -- full proxy path -------------------------------------------------------------


def frames_at(hub, tap_id, direction=None):
    return [e for e in hub.tap(tap_id).events
            if e.kind == KIND_FRAME and (direction is None or e.direction is direction)]


def test_identity_proxy_is_byte_transparent():
    def body(rt, session):
        outcome = session.write_single_coil(20, True)
        assert session.read(1, 8) == [False] * 8
        return outcome

    outcome, station, proxy, hub = run_mitm(body, rules=[])
    assert outcome.echo_matches
    assert station.snapshot(1).coils[0x13] is True
    assert proxy.report.frames_rewritten == 0
    assert proxy.report.frames_dropped == 0
    master_raws = [e.raw for e in frames_at(hub, "master-tap")]
    slave_raws = [e.raw for e in frames_at(hub, "slave-tap")]
    assert master_raws == slave_raws  # transparency, bytes only differ in metadata
    # every forwarded frame shows up at >= 2 taps
    mitm_raws = [e.raw for e in frames_at(hub, "mitm-tap")]
    for raw in master_raws:
        assert raw in mitm_raws


def test_concealing_flip_deceives_master():
    rule = InterceptRule(
        RuleMatch(direction="request", function=FunctionCode.WRITE_SINGLE_COIL),
        FlipCoilValue(), conceal=True)

    def body(rt, session):
        return session.write_single_coil(20, True)

    outcome, station, proxy, hub = run_mitm(body, rules=[rule])
    assert outcome.acknowledged and outcome.echo_matches  # no hint to the master
    assert station.snapshot(1).coils[0x13] is False       # but the slave got OFF
    assert proxy.report.frames_rewritten == 2             # request + concealed echo
    master_req = frames_at(hub, "master-tap", Direction.REQUEST)[0]
    slave_req = frames_at(hub, "slave-tap", Direction.REQUEST)[0]
    assert master_req.decoded.pdu.is_on and not slave_req.decoded.pdu.is_on
    assert master_req.raw != slave_req.raw
    # link identity evidence: the slave saw the master's endpoint claim with
    # the proxy's identity
    assert slave_req.src_endpoint == MASTER
    assert slave_req.src_link_identity == ID_PROXY


def test_inject_reset_tears_down_master_connection():
    rule = InterceptRule(
        RuleMatch(direction="request", function=FunctionCode.WRITE_SINGLE_COIL),
        InjectReset())

    def body(rt, session):
        with pytest.raises(PeerReset):
            session.write_single_coil(20, True)

    _, station, proxy, hub = run_mitm(body, rules=[rule])
    assert proxy.report.resets_injected == 1
    assert any(e.kind == KIND_RESET for e in hub.tap("master-tap").events)
    assert any(e.kind == KIND_RESET for e in hub.tap("mitm-tap").events)


def test_drop_all_responses_times_out_every_attempt():
    rule = InterceptRule(RuleMatch(direction="response"), Drop())

    def body(rt, session):
        t0 = rt.now_ns()
        with pytest.raises(TransportTimeout):
            session.write_single_coil(20, True)
        return rt.now_ns() - t0

    elapsed, station, proxy, hub = run_mitm(body, rules=[rule], timeout=0.5)
    assert elapsed == 1_000_000_000  # 2 attempts x 0.5 s
    assert proxy.report.frames_dropped == 2
    # the write did reach the slave even though the master saw nothing
    assert station.snapshot(1).coils[0x13] is True


def test_delayed_responses_cause_retransmission_and_duplicate_acks():
    rules = [
        InterceptRule(
            RuleMatch(direction="request", function=FunctionCode.WRITE_SINGLE_COIL),
            FlipCoilValue(), conceal=True),
        InterceptRule(RuleMatch(direction="response"), Delay(1.5)),
    ]

    def body(rt, session):
        return session.write_single_coil(20, True)

    outcome, station, proxy, hub = run_mitm(body, rules=rules, timeout=1.0)
    assert outcome.acknowledged and outcome.echo_matches
    assert station.snapshot(1).coils[0x13] is False
    master_reqs = frames_at(hub, "master-tap", Direction.REQUEST)
    assert len(master_reqs) == 2
    assert master_reqs[0].raw == master_reqs[1].raw  # identical retransmission
    master_resps = frames_at(hub, "master-tap", Direction.RESPONSE)
    assert len(master_resps) == 2  # the delayed original + the retry's echo
    assert master_resps[0].raw == master_resps[1].raw
    gap = master_resps[1].timestamp_ns - master_resps[0].timestamp_ns
    assert 0 < gap < 2_000_000_000  # inside the default duplicate window


def test_duplicate_action_conserves_frame_accounting():
    rules = [InterceptRule(
        RuleMatch(direction="request", function=FunctionCode.WRITE_SINGLE_COIL),
        Duplicate())]

    def body(rt, session):
        return session.write_single_coil(20, True)

    outcome, station, proxy, hub = run_mitm(body, rules=rules)
    assert outcome.acknowledged
    # inbound: 1 request + 2 responses (the duplicated request answers twice);
    # forwarded: 2 duplicated requests + 2 responses
    assert proxy.report.frames_forwarded == 4
    assert proxy.report.frames_dropped == 0
    slave_reqs = frames_at(hub, "slave-tap", Direction.REQUEST)
    assert len(slave_reqs) == 2


def test_skip_first_and_max_applications():
    rules = [InterceptRule(
        RuleMatch(direction="request", function=FunctionCode.WRITE_SINGLE_COIL,
                  skip_first=1, max_applications=1),
        FlipCoilValue(), conceal=True)]

    def body(rt, session):
        first = session.write_single_coil(20, True)
        second = session.write_single_coil(21, True)
        third = session.write_single_coil(22, True)
        return first, second, third

    (first, second, third), station, proxy, hub = run_mitm(body, rules=rules)
    snap = station.snapshot(1)
    assert snap.coils[19] is True    # skipped: passed through
    assert snap.coils[20] is False   # flipped
    assert snap.coils[21] is True    # budget exhausted
    assert first.echo_matches and second.echo_matches and third.echo_matches
