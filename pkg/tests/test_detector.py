"""Detectors over synthetic streams and over real testbed captures."""

import pytest

from gridbus import codec, detector
from gridbus.capture import (
    KIND_CLOSE,
    KIND_FRAME,
    KIND_OPEN,
    KIND_RESET,
    CaptureEvent,
    merge_events,
)
from gridbus.codec import Direction, FunctionCode
from gridbus.detector import (
    CONNECTION_RESET,
    DUPLICATE_ACK,
    PERIODICITY_DEVIATION,
    RETRANSMISSION,
    TAMPER,
    UNAUTHORIZED_WRITER,
    UNEXPECTED_LINK_IDENTITY,
    DetectionPolicy,
    analyze,
    finding_from_jsonable,
    policy_from_jsonable,
    policy_to_jsonable,
    report,
)
from gridbus.interceptor import Delay, FlipCoilValue, InterceptRule, RuleMatch
from gridbus.master import PollPlan

from harness import (
    ATTACKER,
    ID_ATTACKER,
    ID_MASTER,
    ID_PLC,
    ID_PROXY,
    MASTER,
    PLC,
    run_direct,
    run_mitm,
    make_policy,
)

SEQS = {}


def mk_event(tap, t, kind=KIND_FRAME, src=MASTER, dst=PLC, src_id=ID_MASTER,
             dst_id=ID_PLC, direction=Direction.REQUEST, frame=None):
    seq = SEQS[tap] = SEQS.get(tap, -1) + 1
    raw = codec.encode_frame(frame) if frame is not None else b""
    return CaptureEvent(seq=seq, timestamp_ns=int(t * 1e9), tap_id=tap,
                        src_endpoint=src, dst_endpoint=dst,
                        src_link_identity=src_id, dst_link_identity=dst_id,
                        kind=kind, direction=direction if frame else None,
                        raw=raw, decoded=frame)


@pytest.fixture(autouse=True)
def reset_seqs():
    SEQS.clear()


def coil(tid, on):
    return codec.make_frame(tid, 1, codec.WriteSingleCoil.make(0x13, on))


def read_req(tid, addr=0):
    return codec.make_frame(tid, 1, codec.ReadRequest(FunctionCode.READ_COILS, addr, 1))


def kinds(findings):
    return {f.kind for f in findings}


# -- synthetic unit tests ----------------------------------------------------------


def test_duplicate_ack_inside_window_only():
    frame = coil(7, True)
    close = [
        mk_event("m", 1.0, src=PLC, dst=MASTER, src_id=ID_PLC, dst_id=ID_MASTER,
                 direction=Direction.RESPONSE, frame=frame),
        mk_event("m", 2.5, src=PLC, dst=MASTER, src_id=ID_PLC, dst_id=ID_MASTER,
                 direction=Direction.RESPONSE, frame=frame),
    ]
    findings = analyze(close, DetectionPolicy(duplicate_window=2.0))
    assert kinds(findings) == {DUPLICATE_ACK}
    assert findings[0].evidence == (("m", 0), ("m", 1))

    SEQS.clear()
    far = [
        mk_event("m", 1.0, src=PLC, dst=MASTER, direction=Direction.RESPONSE,
                 frame=frame),
        mk_event("m", 9.0, src=PLC, dst=MASTER, direction=Direction.RESPONSE,
                 frame=frame),
    ]
    assert analyze(far, DetectionPolicy(duplicate_window=2.0)) == []


def test_retransmission_needs_identical_bytes_same_connection():
    events = [
        mk_event("m", 0.0, frame=coil(3, True)),
        mk_event("m", 1.0, frame=coil(3, True)),   # identical resend
        mk_event("m", 2.0, frame=coil(4, True)),   # new tid: not a retransmission
    ]
    findings = analyze(events, DetectionPolicy())
    assert kinds(findings) == {RETRANSMISSION}
    assert len(findings) == 1


def test_unexpected_link_identity_uses_policy_map():
    events = [
        mk_event("m", 0.0, src=PLC, dst=MASTER, src_id=ID_PROXY, dst_id=ID_MASTER,
                 direction=Direction.RESPONSE, frame=coil(1, True)),
    ]
    policy = DetectionPolicy(known_link_identities={PLC: ID_PLC})
    findings = analyze(events, policy)
    assert kinds(findings) == {UNEXPECTED_LINK_IDENTITY}
    # unknown endpoints are not judged
    assert analyze(events, DetectionPolicy()) == []


def test_connection_reset_event_becomes_finding():
    events = [mk_event("m", 0.5, kind=KIND_RESET)]
    findings = analyze(events, DetectionPolicy())
    assert kinds(findings) == {CONNECTION_RESET}
    clean = [mk_event("m", 0.1, kind=KIND_OPEN), mk_event("m", 0.5, kind=KIND_CLOSE)]
    assert analyze(clean, DetectionPolicy()) == []


def test_tamper_needs_two_taps_and_two_byte_versions():
    on, off = coil(9, True), coil(9, False)
    two_taps = [
        mk_event("m", 0.0, frame=on),
        mk_event("s", 0.0, frame=off),
    ]
    findings = analyze(two_taps, DetectionPolicy())
    assert kinds(findings) == {TAMPER}
    assert findings[0].severity == "critical"

    SEQS.clear()
    one_tap = [mk_event("m", 0.0, frame=on), mk_event("m", 0.1, frame=off)]
    assert analyze(one_tap, DetectionPolicy()) == []

    SEQS.clear()
    same_bytes = [mk_event("m", 0.0, frame=on), mk_event("s", 0.0, frame=on)]
    assert analyze(same_bytes, DetectionPolicy()) == []


def test_periodicity_deviation_against_configured_period():
    on_time = [mk_event("m", 0.5 * k, frame=read_req(k + 1)) for k in range(5)]
    policy = DetectionPolicy(poll_period=0.5, jitter_tolerance=0.25)
    assert analyze(on_time, policy) == []

    SEQS.clear()
    drifting = [mk_event("m", t, frame=read_req(k + 1))
                for k, t in enumerate([0.0, 0.5, 1.0, 2.2, 2.7])]
    findings = analyze(drifting, policy)
    assert kinds(findings) == {PERIODICITY_DEVIATION}
    # detector disabled without a period
    assert analyze(drifting, DetectionPolicy()) == []


def test_unauthorized_writer_detection():
    events = [
        mk_event("s", 0.0, src=ATTACKER, src_id=ID_ATTACKER, frame=coil(1, True)),
        mk_event("s", 0.1, src=MASTER, frame=coil(2, True)),
        mk_event("s", 0.2, src=ATTACKER, src_id=ID_ATTACKER, frame=read_req(3)),
    ]
    policy = DetectionPolicy(authorized_writers={MASTER})
    findings = analyze(events, policy)
    assert kinds(findings) == {UNAUTHORIZED_WRITER}
    assert len(findings[0].evidence) == 1  # the read does not count
    assert analyze(events, DetectionPolicy()) == []  # disabled without a list


def test_ordering_criticals_first_at_equal_timestamps():
    on, off = coil(9, True), coil(9, False)
    events = [
        mk_event("m", 0.0, kind=KIND_RESET),
        mk_event("m", 0.0, frame=on),
        mk_event("s", 0.0, frame=off),
    ]
    findings = analyze(events, DetectionPolicy())
    assert [f.kind for f in findings] == [TAMPER, CONNECTION_RESET]


def test_report_rendering_and_structured_roundtrip():
    assert report([], "text") == "no findings\n"
    on, off = coil(9, True), coil(9, False)
    events = [mk_event("m", 0.0, frame=on), mk_event("s", 0.0, frame=off)]
    findings = analyze(events, DetectionPolicy())
    text = report(findings, "text")
    assert "TAMPER" in text and "m#0" in text and "s#0" in text
    structured = report(findings, "structured")
    assert detector.findings_from_report(structured) == findings


def test_policy_serialization_roundtrip():
    policy = make_policy(poll_period=0.5)
    again = policy_from_jsonable(policy_to_jsonable(policy))
    assert again == policy


# -- end-to-end over real captures ---------------------------------------------


def test_benign_run_produces_zero_findings():
    def body(rt, session, station, hub):
        assert session.write_single_coil(20, True).echo_matches
        return None

    _, _, hub = run_direct(body)
    findings = analyze(hub.merged_events(), make_policy())
    assert findings == []


def test_mitm_run_produces_the_observed_anomaly_set():
    rules = [
        InterceptRule(
            RuleMatch(direction="request", function=FunctionCode.WRITE_SINGLE_COIL),
            FlipCoilValue(), conceal=True),
        InterceptRule(RuleMatch(direction="response"), Delay(1.5)),
    ]

    def body(rt, session):
        return session.write_single_coil(20, True)

    outcome, station, proxy, hub = run_mitm(body, rules)
    assert outcome.echo_matches and station.snapshot(1).coils[0x13] is False
    findings = analyze(hub.merged_events(), make_policy())
    assert {TAMPER, UNEXPECTED_LINK_IDENTITY, DUPLICATE_ACK,
            RETRANSMISSION} <= kinds(findings)
    tamper = [f for f in findings if f.kind == TAMPER][0]
    assert tamper.severity == "critical"
    assert len({tap for tap, _ in tamper.evidence}) >= 2


def test_attacker_write_capture_flags_unauthorized_writer():
    from gridbus.attacker import exploit_write

    def body(rt, session, station, hub):
        exploit_write(rt, PLC, 1, 40005, 0x0BAD, local_endpoint=ATTACKER,
                      link_identity=ID_ATTACKER, hub=hub)
        return None

    _, _, hub = run_direct(body)
    findings = analyze(hub.merged_events(), make_policy())
    assert UNAUTHORIZED_WRITER in kinds(findings)


def test_delayed_poll_responses_flag_periodicity_deviation():
    rules = [InterceptRule(RuleMatch(direction="response"), Delay(0.8))]

    def body(rt, session):
        return session.run_poll_loop(
            PollPlan(period=0.5, requests=[(1, 1)]), cycles=5)

    report_, station, proxy, hub = run_mitm(body, rules, timeout=2.0, quiesce=1.0)
    assert report_.cycles == 5
    findings = analyze(hub.merged_events(), make_policy(poll_period=0.5))
    assert PERIODICITY_DEVIATION in kinds(findings)


def test_analysis_is_deterministic():
    rules = [InterceptRule(
        RuleMatch(direction="request", function=FunctionCode.WRITE_SINGLE_COIL),
        FlipCoilValue(), conceal=True)]

    def capture_once():
        def body(rt, session):
            return session.write_single_coil(20, True)

        _, _, _, hub = run_mitm(body, rules)
        return hub.merged_events()

    events = capture_once()
    assert analyze(events, make_policy()) == analyze(events, make_policy())
    assert capture_once() == events  # the capture itself reproduces exactly
