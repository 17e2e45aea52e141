"""Detection engine over merged capture streams.

Seven detectors, each a pure pass over the timestamp-ordered events:

  (a) DUPLICATE_ACK            two responses, same connection + transaction id,
                               inside the duplicate window at one tap
  (b) RETRANSMISSION           byte-identical request re-sent on a connection
  (c) UNEXPECTED_LINK_IDENTITY frame whose source identity contradicts the
                               policy's endpoint->identity map
  (d) CONNECTION_RESET         abortive teardown observed
  (e) TAMPER                   the same transaction seen with different pdu
                               bytes at two different taps (critical)
  (f) PERIODICITY_DEVIATION    poll inter-arrival outside period*(1 +/- tol)
  (g) UNAUTHORIZED_WRITER      write request from an endpoint not on the
                               authorized list

TAMPER needs at least two vantage points by construction; a single-tap capture
can never produce it, which mirrors what concealment denies the master's own
view. Detectors (f) and (g) are disabled unless the policy configures a poll
period / an authorized-writer set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from . import codec
from .capture import (
    KIND_FRAME,
    KIND_RESET,
    CaptureEvent,
)
from .codec import Direction
from .net import Endpoint, format_endpoint, format_identity

DUPLICATE_ACK = "DUPLICATE_ACK"
RETRANSMISSION = "RETRANSMISSION"
UNEXPECTED_LINK_IDENTITY = "UNEXPECTED_LINK_IDENTITY"
CONNECTION_RESET = "CONNECTION_RESET"
TAMPER = "TAMPER"
PERIODICITY_DEVIATION = "PERIODICITY_DEVIATION"
UNAUTHORIZED_WRITER = "UNAUTHORIZED_WRITER"

SEVERITY_OF = {
    TAMPER: "critical",
    UNEXPECTED_LINK_IDENTITY: "critical",
    UNAUTHORIZED_WRITER: "critical",
    CONNECTION_RESET: "warning",
    DUPLICATE_ACK: "warning",
    RETRANSMISSION: "warning",
    PERIODICITY_DEVIATION: "warning",
}

_SEVERITY_RANK = {"critical": 0, "warning": 1, "info": 2}


class UnresolvedEvidence(Exception):
    """A finding referenced a (tap, seq) absent from the analyzed stream."""


@dataclass(frozen=True)
class Finding:
    kind: str
    severity: str
    evidence: tuple  # ((tap_id, seq), ...)
    summary: str
    first_timestamp_ns: int

    def to_jsonable(self) -> dict:
        return {"kind": self.kind, "severity": self.severity,
                "summary": self.summary, "t": self.first_timestamp_ns,
                "evidence": [[tap, seq] for tap, seq in self.evidence]}


def finding_from_jsonable(obj: dict) -> Finding:
    return Finding(kind=obj["kind"], severity=obj["severity"],
                   summary=obj["summary"], first_timestamp_ns=obj["t"],
                   evidence=tuple((tap, seq) for tap, seq in obj["evidence"]))


@dataclass
class DetectionPolicy:
    known_link_identities: dict = field(default_factory=dict)  # Endpoint -> bytes
    authorized_writers: Optional[set] = None  # None disables detector (g)
    poll_period: Optional[float] = None       # None disables detector (f)
    jitter_tolerance: float = 0.25
    duplicate_window: float = 2.0

    def __post_init__(self):
        if not 0 < self.jitter_tolerance < 1:
            raise ValueError("jitter_tolerance must be in (0, 1)")


def _mk(kind: str, events: list, summary: str) -> Finding:
    events = sorted(events, key=lambda e: (e.timestamp_ns, e.tap_id, e.seq))
    return Finding(kind=kind, severity=SEVERITY_OF[kind],
                   evidence=tuple((e.tap_id, e.seq) for e in events),
                   summary=summary,
                   first_timestamp_ns=events[0].timestamp_ns)


def analyze(events: list, policy: DetectionPolicy) -> list:
    """Run every detector; findings come back in stable order: first-evidence
    timestamp, then severity (criticals first), then kind."""
    findings: list[Finding] = []
    frames = [e for e in events if e.kind == KIND_FRAME]
    responses = [e for e in frames if e.direction is Direction.RESPONSE
                 and e.decoded is not None]
    requests = [e for e in frames if e.direction is Direction.REQUEST
                and e.decoded is not None]

    findings += _duplicate_acks(responses, policy)
    findings += _retransmissions(requests)
    findings += _unexpected_identities(frames, policy)
    findings += _connection_resets(events)
    findings += _tampering(frames)
    findings += _periodicity(requests, policy)
    findings += _unauthorized_writers(requests, policy)

    known = {(e.tap_id, e.seq) for e in events}
    for finding in findings:
        for ref in finding.evidence:
            if ref not in known:
                raise UnresolvedEvidence(f"evidence {ref} not in analyzed stream")

    findings.sort(key=lambda f: (f.first_timestamp_ns,
                                 _SEVERITY_RANK[f.severity], f.kind, f.evidence))
    return findings


# -- individual detectors ------------------------------------------------------


def _conn_key(event: CaptureEvent) -> tuple:
    return (event.src_endpoint, event.dst_endpoint)


def _duplicate_acks(responses: list, policy: DetectionPolicy) -> list:
    window_ns = int(policy.duplicate_window * 1e9)
    groups: dict = {}
    for e in responses:
        key = (e.tap_id, _conn_key(e), e.decoded.header.transaction_id)
        groups.setdefault(key, []).append(e)
    out = []
    for (tap, conn, tid), group in groups.items():
        if len(group) < 2:
            continue
        group.sort(key=lambda e: e.timestamp_ns)
        close_pairs = [
            (a, b) for a, b in zip(group, group[1:])
            if b.timestamp_ns - a.timestamp_ns <= window_ns]
        if close_pairs:
            out.append(_mk(
                DUPLICATE_ACK, group,
                f"{len(group)} responses for transaction {tid} on "
                f"{format_endpoint(conn[0])}->{format_endpoint(conn[1])} at {tap}"))
    return out


def _retransmissions(requests: list) -> list:
    groups: dict = {}
    for e in requests:
        key = (e.tap_id, _conn_key(e), e.raw)
        groups.setdefault(key, []).append(e)
    out = []
    for (tap, conn, raw), group in groups.items():
        if len(group) < 2:
            continue
        tid = group[0].decoded.header.transaction_id
        out.append(_mk(
            RETRANSMISSION, group,
            f"request with transaction {tid} re-sent {len(group) - 1} time(s) "
            f"on {format_endpoint(conn[0])}->{format_endpoint(conn[1])} at {tap}"))
    return out


def _unexpected_identities(frames: list, policy: DetectionPolicy) -> list:
    groups: dict = {}
    for e in frames:
        expected = policy.known_link_identities.get(e.src_endpoint)
        if expected is None or e.src_link_identity == expected:
            continue
        key = (e.tap_id, e.src_endpoint, e.src_link_identity)
        groups.setdefault(key, []).append(e)
    out = []
    for (tap, endpoint, identity), group in groups.items():
        expected = policy.known_link_identities[endpoint]
        out.append(_mk(
            UNEXPECTED_LINK_IDENTITY, group,
            f"frames from {format_endpoint(endpoint)} carry link identity "
            f"{format_identity(identity)}, expected {format_identity(expected)} "
            f"(at {tap})"))
    return out


def _connection_resets(events: list) -> list:
    groups: dict = {}
    for e in events:
        if e.kind == KIND_RESET:
            groups.setdefault(e.tap_id, []).append(e)
    return [
        _mk(CONNECTION_RESET, group,
            f"{len(group)} abortive connection reset(s) observed at {tap}")
        for tap, group in groups.items()]


def _tampering(frames: list) -> list:
    groups: dict = {}
    for e in frames:
        if e.decoded is None:
            continue
        key = (_conn_key(e) if e.direction is Direction.REQUEST
               else (e.dst_endpoint, e.src_endpoint),
               e.decoded.header.transaction_id, e.direction)
        groups.setdefault(key, []).append(e)
    out = []
    for (conn, tid, direction), group in groups.items():
        versions = {e.raw[6:] for e in group}  # unit id + pdu bytes
        taps = {e.tap_id for e in group}
        if len(versions) >= 2 and len(taps) >= 2:
            out.append(_mk(
                TAMPER, group,
                f"transaction {tid} ({direction.value}) observed with "
                f"{len(versions)} different pdu byte versions across "
                f"{len(taps)} taps"))
    return out


def _periodicity(requests: list, policy: DetectionPolicy) -> list:
    if policy.poll_period is None:
        return []
    period_ns = int(policy.poll_period * 1e9)
    low = period_ns * (1 - policy.jitter_tolerance)
    high = period_ns * (1 + policy.jitter_tolerance)
    groups: dict = {}
    for e in requests:
        # raw[6:] strips the transaction id: one stream per repeated request shape
        key = (e.tap_id, _conn_key(e), e.raw[6:])
        groups.setdefault(key, []).append(e)
    out = []
    for (tap, conn, _sig), group in groups.items():
        if len(group) < 2:
            continue
        group.sort(key=lambda e: e.timestamp_ns)
        violations = []
        for a, b in zip(group, group[1:]):
            gap = b.timestamp_ns - a.timestamp_ns
            if not low <= gap <= high:
                violations.extend([a, b])
        if violations:
            out.append(_mk(
                PERIODICITY_DEVIATION, violations,
                f"poll inter-arrival outside {policy.poll_period}s "
                f"+/-{int(policy.jitter_tolerance * 100)}% on "
                f"{format_endpoint(conn[0])}->{format_endpoint(conn[1])} at {tap}"))
    return out


def _unauthorized_writers(requests: list, policy: DetectionPolicy) -> list:
    if policy.authorized_writers is None:
        return []
    groups: dict = {}
    for e in requests:
        if not codec.is_write_request(e.decoded.pdu):
            continue
        if e.src_endpoint in policy.authorized_writers:
            continue
        groups.setdefault((e.tap_id, e.src_endpoint), []).append(e)
    return [
        _mk(UNAUTHORIZED_WRITER, group,
            f"{len(group)} write request(s) from unauthorized endpoint "
            f"{format_endpoint(endpoint)} at {tap}")
        for (tap, endpoint), group in groups.items()]


# -- reporting -------------------------------------------------------------------


def report(findings: list, format: str = "text") -> str:
    if format == "structured":
        return json.dumps([f.to_jsonable() for f in findings], indent=2)
    if not findings:
        return "no findings\n"
    lines = []
    for f in findings:
        refs = ", ".join(f"{tap}#{seq}" for tap, seq in f.evidence)
        lines.append(f"[{f.severity.upper():8s}] {f.kind:24s} "
                     f"t={f.first_timestamp_ns / 1e9:.6f}s  {f.summary}")
        lines.append(f"{'':11s}evidence: {refs}")
    return "\n".join(lines) + "\n"


def findings_from_report(text: str) -> list:
    """Parse the structured report back (round-trip counterpart)."""
    return [finding_from_jsonable(obj) for obj in json.loads(text)]


# -- policy (de)serialization ------------------------------------------------------


def policy_to_jsonable(policy: DetectionPolicy) -> dict:
    return {
        "known_link_identities": {
            format_endpoint(ep): format_identity(ident)
            for ep, ident in sorted(policy.known_link_identities.items())},
        "authorized_writers": (
            None if policy.authorized_writers is None
            else sorted(format_endpoint(ep) for ep in policy.authorized_writers)),
        "poll_period": policy.poll_period,
        "jitter_tolerance": policy.jitter_tolerance,
        "duplicate_window": policy.duplicate_window,
    }


def policy_from_jsonable(obj: dict) -> DetectionPolicy:
    from .net import parse_endpoint, parse_identity
    writers = obj.get("authorized_writers")
    return DetectionPolicy(
        known_link_identities={
            parse_endpoint(ep): parse_identity(ident)
            for ep, ident in (obj.get("known_link_identities") or {}).items()},
        authorized_writers=(None if writers is None
                            else {parse_endpoint(ep) for ep in writers}),
        poll_period=obj.get("poll_period"),
        jitter_tolerance=obj.get("jitter_tolerance", 0.25),
        duplicate_window=obj.get("duplicate_window", 2.0))
