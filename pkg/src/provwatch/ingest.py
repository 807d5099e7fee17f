"""Provenance log ingestion: parsing, canonical encoding, windowing.

Audit records arrive as JSON lines keyed by string identifiers; the
numeric stages downstream want small dense integer codes with a stable
meaning for the lifetime of a run.  This module owns the record type,
the string-to-code mapping, per-window deduplication, and the sliding
window arithmetic.  Timestamps are integer nanoseconds throughout.
"""

from __future__ import annotations

import json
from bisect import bisect_left
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

# Canonical wire keys for one JSONL record.
_FIELDS = ("pid", "pname", "event", "oid", "odata", "ts")

EVENT_VOCABULARY = (
    "fork",
    "read",
    "write",
    "connect",
    "accept",
    "exec",
    "send",
    "recv",
)

NS_PER_SECOND = 1_000_000_000
NS_PER_MINUTE = 60 * NS_PER_SECOND

DEFAULT_WINDOW_LENGTH_NS = 30 * NS_PER_MINUTE
DEFAULT_WINDOW_STEP_NS = 15 * NS_PER_MINUTE


@dataclass(frozen=True)
class LogEvent:
    """One audit record: a process acting on an object at a point in time."""

    process_id: str
    process_name: str
    event_type: str
    object_id: str
    object_data: str
    ts: int

    def key(self) -> tuple[str, str, str]:
        """Deduplication identity: who did what to which object."""
        return (self.process_id, self.event_type, self.object_id)

    def tuple4(self) -> tuple[str, str, str, int]:
        return (self.process_id, self.event_type, self.object_id, self.ts)


@dataclass(frozen=True)
class ParseIssue:
    line_no: int
    reason: str

    def to_json_obj(self) -> dict:
        return {"line_no": self.line_no, "reason": self.reason}


class ParseError(ValueError):
    """Raised in strict mode on the first malformed line."""


def parse_line(
    line: str,
    line_no: int = 0,
    vocabulary: Sequence[str] = EVENT_VOCABULARY,
) -> LogEvent:
    """Parse one JSONL record, raising ValueError with a reason on any defect."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ValueError("record is not a JSON object")
    missing = [k for k in _FIELDS if k not in obj]
    if missing:
        raise ValueError(f"missing fields: {', '.join(missing)}")
    for k in ("pid", "pname", "event", "oid", "odata"):
        if not isinstance(obj[k], str):
            raise ValueError(f"field {k!r} is not a string")
    if not obj["pid"]:
        raise ValueError("empty pid")
    if not obj["oid"]:
        raise ValueError("empty oid")
    if obj["event"] not in vocabulary:
        raise ValueError(f"unknown event type {obj['event']!r}")
    ts = obj["ts"]
    # bool is an int subclass; a literal true/false timestamp is still junk.
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise ValueError("ts is not an integer")
    if ts <= 0:
        raise ValueError("ts is not positive")
    return LogEvent(
        process_id=obj["pid"],
        process_name=obj["pname"],
        event_type=obj["event"],
        object_id=obj["oid"],
        object_data=obj["odata"],
        ts=ts,
    )


def serialize_event(event: LogEvent) -> str:
    """Canonical single-line JSON form; parse_line inverts this exactly."""
    return json.dumps(
        {
            "pid": event.process_id,
            "pname": event.process_name,
            "event": event.event_type,
            "oid": event.object_id,
            "odata": event.object_data,
            "ts": event.ts,
        },
        separators=(",", ":"),
        sort_keys=False,
        ensure_ascii=False,
    )


def parse_jsonl(
    lines: Iterable[str] | TextIO,
    strict: bool = False,
    vocabulary: Sequence[str] = EVENT_VOCABULARY,
) -> tuple[list[LogEvent], list[ParseIssue]]:
    """Parse a JSONL stream.

    Lenient mode (default) collects one ParseIssue per malformed line and
    keeps going; strict mode raises ParseError at the first one.  Blank
    lines are skipped without comment.
    """
    events: list[LogEvent] = []
    issues: list[ParseIssue] = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            events.append(parse_line(line, line_no, vocabulary))
        except ValueError as exc:
            if strict:
                raise ParseError(f"line {line_no}: {exc}") from exc
            issues.append(ParseIssue(line_no=line_no, reason=str(exc)))
    return events, issues


def write_issue_report(issues: Sequence[ParseIssue], fh: TextIO) -> None:
    for issue in issues:
        fh.write(json.dumps(issue.to_json_obj(), sort_keys=True) + "\n")


class Codebook:
    """Dense first-seen integer codes for process, event type, and object.

    Codes are assigned 0, 1, 2, ... in order of first appearance and are
    never reassigned, so any encoding produced during a run stays valid
    for that run.  The three namespaces are independent.
    """

    def __init__(self) -> None:
        self.process_codes: dict[str, int] = {}
        self.event_codes: dict[str, int] = {}
        self.object_codes: dict[str, int] = {}

    @staticmethod
    def _code(table: dict[str, int], key: str) -> int:
        code = table.get(key)
        if code is None:
            code = len(table)
            table[key] = code
        return code

    def encode_event(self, event: LogEvent) -> tuple[int, int, int]:
        return (
            self._code(self.process_codes, event.process_id),
            self._code(self.event_codes, event.event_type),
            self._code(self.object_codes, event.object_id),
        )

    def encode(self, events: Iterable[LogEvent]) -> list[tuple[int, int, int]]:
        return [self.encode_event(ev) for ev in events]

    def decode(self, triple: tuple[int, int, int]) -> tuple[str, str, str]:
        """Inverse of encode_event for codes this book has issued."""
        p, e, o = triple
        return (
            self._rev(self.process_codes, p, "process"),
            self._rev(self.event_codes, e, "event"),
            self._rev(self.object_codes, o, "object"),
        )

    @staticmethod
    def _rev(table: dict[str, int], code: int, kind: str) -> str:
        for key, val in table.items():
            if val == code:
                return key
        raise KeyError(f"unknown {kind} code {code}")

    def __len__(self) -> int:
        return len(self.process_codes) + len(self.event_codes) + len(self.object_codes)

    def to_dict(self) -> dict:
        return {
            "process_codes": dict(self.process_codes),
            "event_codes": dict(self.event_codes),
            "object_codes": dict(self.object_codes),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Codebook":
        book = cls()
        book.process_codes = {str(k): int(v) for k, v in obj["process_codes"].items()}
        book.event_codes = {str(k): int(v) for k, v in obj["event_codes"].items()}
        book.object_codes = {str(k): int(v) for k, v in obj["object_codes"].items()}
        return book


def dedup(events: Sequence[LogEvent]) -> list[LogEvent]:
    """One representative per (process, event type, object).

    The earliest timestamp wins; among equal timestamps the first
    occurrence wins.  Survivors keep their relative input order, so a
    timestamp-sorted input stays sorted.
    """
    best: dict[tuple[str, str, str], tuple[int, int]] = {}
    for idx, ev in enumerate(events):
        k = ev.key()
        cur = best.get(k)
        if cur is None or ev.ts < cur[0]:
            best[k] = (ev.ts, idx)
    keep = sorted(idx for _, idx in best.values())
    return [events[i] for i in keep]


@dataclass(frozen=True)
class Window:
    """Half-open analysis interval [start, start + length)."""

    index: int
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length

    def contains(self, ts: int) -> bool:
        return self.start <= ts < self.end

    def overlaps(self, start: int, end: int) -> bool:
        return self.start < end and start < self.end


def enumerate_windows(
    t_min: int,
    t_max: int,
    length: int = DEFAULT_WINDOW_LENGTH_NS,
    step: int = DEFAULT_WINDOW_STEP_NS,
) -> list[Window]:
    """Window starts derived from the data span.

    Starts run t_min, t_min + step, ... while strictly below the maximum
    timestamp; extra windows are appended only if the final timestamp
    would otherwise fall outside every window (cannot happen while
    length > step, which is the default shape).
    """
    if length <= 0 or step <= 0:
        raise ValueError("window length and step must be positive")
    if t_max < t_min:
        raise ValueError("t_max precedes t_min")
    starts = [t_min]
    while starts[-1] + step < t_max:
        starts.append(starts[-1] + step)
    while starts[-1] + length <= t_max:
        starts.append(starts[-1] + step)
    return [Window(index=i, start=s, length=length) for i, s in enumerate(starts)]


def windows_for_events(
    events: Sequence[LogEvent],
    length: int = DEFAULT_WINDOW_LENGTH_NS,
    step: int = DEFAULT_WINDOW_STEP_NS,
) -> list[Window]:
    if not events:
        return []
    ts = [ev.ts for ev in events]
    return enumerate_windows(min(ts), max(ts), length, step)


def window_slice(events_sorted: Sequence[LogEvent], window: Window) -> list[LogEvent]:
    """Events with start <= ts < end, via binary search on the sorted stream."""
    lo = bisect_left(events_sorted, window.start, key=lambda ev: ev.ts)
    hi = bisect_left(events_sorted, window.end, key=lambda ev: ev.ts)
    return list(events_sorted[lo:hi])


def sort_events(events: Iterable[LogEvent]) -> list[LogEvent]:
    """Timestamp order; input order breaks ties, which keeps runs stable."""
    return sorted(events, key=lambda ev: ev.ts)
