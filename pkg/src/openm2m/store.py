"""Append-only event log with a latest-wins element index.

Every state change in the gateway is an element creation event.  The log
is the single durable artifact: one UTF-8 JSON line per event, fsync'd
before the append returns.  All indexes (latest element by id, element
ids by entity) are folds over that log, so a restart is replay.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import uuid
from collections import deque
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping, Union

from . import codec
from .model import (
    ContextElement,
    Element,
    Event,
    canonical_number,
    element_canonical_json,
    element_digest,
)
from .runtime import Clock, format_timestamp


class StoreError(Exception):
    pass


class StorageFailure(StoreError):
    """The underlying file refused a write; the event was not appended."""


class CorruptLog(StoreError):
    """The log violates the append-only contract (gap, duplicate, bad line)."""


class EmptyFilter(StoreError):
    pass


FilterValue = Union[str, int, float, bool, Decimal]


def _canonical_filter_value(value: FilterValue) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float, Decimal)):
        return canonical_number(value)
    return value


@dataclass(frozen=True)
class Filter:
    """Conjunction of clauses over events; at least one must be present."""

    entity_type: str | None = None
    triple_equals: tuple[tuple[str, str], ...] = ()
    since_seq: int | None = None

    def __post_init__(self) -> None:
        if self.entity_type is None and not self.triple_equals and self.since_seq is None:
            raise EmptyFilter("filter needs at least one clause")
        pairs = tuple(
            (name, _canonical_filter_value(value)) for name, value in self.triple_equals
        )
        object.__setattr__(self, "triple_equals", pairs)

    def matches(self, event: Event) -> bool:
        if self.since_seq is not None and event.sequence_no <= self.since_seq:
            return False
        return self.matches_element(event.element)

    def matches_element(self, element: Element) -> bool:
        """The element-level clauses alone, ignoring since_seq."""
        if self.entity_type is not None:
            if not isinstance(element, ContextElement):
                return False
            if element.entity_type != self.entity_type:
                return False
        for name, value in self.triple_equals:
            if not element.has_triple(name):
                return False
            if _canonical_filter_value(element.triple(name).value) != value:
                return False
        return True


@dataclass(frozen=True)
class Snapshot:
    """The fold of apply() over a log prefix, frozen at last_seq."""

    last_seq: int
    elements_by_id: Mapping[str, Element]
    by_entity: Mapping[tuple[str, str], tuple[str, ...]]

    def digest(self) -> str:
        """Order-independent fingerprint for live-vs-replay comparison."""
        h = hashlib.sha256()
        h.update(b"seq:%d\n" % self.last_seq)
        for element_id in sorted(self.elements_by_id):
            digest = element_digest(self.elements_by_id[element_id])
            h.update(f"e:{element_id}:{digest}\n".encode("utf-8"))
        for key in sorted(self.by_entity):
            ids = ",".join(self.by_entity[key])
            h.update(f"n:{key[0]}|{key[1]}:{ids}\n".encode("utf-8"))
        return h.hexdigest()


class _Fold:
    """Mutable snapshot accumulator shared by the live store and replay."""

    def __init__(self) -> None:
        self.last_seq = 0
        self.elements_by_id: dict[str, Element] = {}
        self.by_entity: dict[tuple[str, str], list[str]] = {}

    def apply(self, event: Event) -> None:
        if event.sequence_no != self.last_seq + 1:
            raise CorruptLog(
                f"sequence {event.sequence_no} after {self.last_seq}"
            )
        self.last_seq = event.sequence_no
        element = event.element
        self.elements_by_id[element.element_id] = element
        if isinstance(element, ContextElement):
            key = (element.entity_id, element.entity_type)
            bucket = self.by_entity.setdefault(key, [])
            if element.element_id not in bucket:
                bucket.append(element.element_id)

    def freeze(self) -> Snapshot:
        return Snapshot(
            last_seq=self.last_seq,
            elements_by_id=dict(self.elements_by_id),
            by_entity={k: tuple(v) for k, v in self.by_entity.items()},
        )


def replay(events: Iterable[Event]) -> Snapshot:
    fold = _Fold()
    for event in events:
        fold.apply(event)
    return fold.freeze()


def event_json(event: Event) -> str:
    """One event as canonical JSON: the log line format without the newline."""
    # Hand-assembled so the element keeps its canonical byte form; every
    # interpolated field is schema-validated and needs no JSON escaping.
    return (
        '{"seq":%d,"eventId":"%s","kind":"%s","occurredAt":"%s","element":%s}'
        % (
            event.sequence_no,
            event.event_id,
            event.kind,
            event.occurred_at,
            element_canonical_json(event.element),
        )
    )


def _event_line(event: Event) -> str:
    return event_json(event) + "\n"


def _event_from_line(line: str, lineno: int) -> Event:
    try:
        doc = json.loads(line, parse_float=Decimal)
    except ValueError as exc:
        raise CorruptLog(f"line {lineno}: not JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise CorruptLog(f"line {lineno}: not an object")
    try:
        element = codec.element_from_json_obj(doc.get("element"))
        return Event(
            sequence_no=doc.get("seq"),
            event_id=doc.get("eventId"),
            kind=doc.get("kind"),
            element=element,
            occurred_at=doc.get("occurredAt"),
        )
    except Exception as exc:
        raise CorruptLog(f"line {lineno}: {exc}") from None


def read_log(path: str | os.PathLike) -> list[Event]:
    """Parse a log file into events, verifying the sequence contract.

    A truncated final line (no newline) is a crash mid-write of an append
    that was never acknowledged; it is dropped.  Anything else malformed
    is a CorruptLog.
    """
    path = Path(path)
    if not path.exists():
        return []
    raw = path.read_text(encoding="utf-8")
    complete, _, partial = raw.rpartition("\n")
    events: list[Event] = []
    seen: set[int] = set()
    for lineno, line in enumerate(complete.splitlines(), start=1):
        if not line.strip():
            continue
        event = _event_from_line(line, lineno)
        if event.sequence_no in seen:
            raise CorruptLog(f"duplicate sequence {event.sequence_no}")
        seen.add(event.sequence_no)
        events.append(event)
    if partial.strip():
        # Missing newline means the process died inside the final write.
        # If every byte of the event still landed, it counts; a torn
        # fragment was never acknowledged and is dropped.
        try:
            event = _event_from_line(partial, len(events) + 1)
        except CorruptLog:
            pass
        else:
            if event.sequence_no in seen:
                raise CorruptLog(f"duplicate sequence {event.sequence_no}")
            events.append(event)
    events.sort(key=lambda e: e.sequence_no)
    for i, event in enumerate(events, start=1):
        if event.sequence_no != i:
            raise CorruptLog(f"gap before sequence {event.sequence_no}")
    return events


class EventStore:
    """Serialized appender over a JSON-lines log plus in-memory indexes.

    Concurrent callers may append; a lock serializes them so sequence
    numbers come out gapless.  Watchers see every event exactly once, in
    sequence order, on the thread that happened to drain the feed.
    """

    def __init__(
        self,
        log_path: str | os.PathLike,
        *,
        clock: Clock | None = None,
        fsync: bool = True,
    ) -> None:
        self._path = Path(log_path)
        self._clock = clock or Clock()
        self._fsync = fsync
        self._lock = threading.Lock()
        self._fold = _Fold()
        self._events: list[Event] = []
        for event in read_log(self._path):
            self._fold.apply(event)
            self._events.append(event)
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._recover_tail()
        self._fh = open(self._path, "a", encoding="utf-8")
        self._watchers: list[Callable[[Event], None]] = []
        self._feed: deque[Event] = deque()
        self._feed_lock = threading.Lock()

    def _recover_tail(self) -> None:
        # A file not ending in a newline was torn by a crash; rewrite it
        # from the accepted events so later appends extend a clean log.
        if not self._path.exists():
            return
        raw = self._path.read_bytes()
        if not raw or raw.endswith(b"\n"):
            return
        tmp = self._path.with_name(self._path.name + ".recover")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.writelines(_event_line(e) for e in self._events)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._path)

    # -- writing ------------------------------------------------------

    def append(self, element: Element, *, occurred_at: str | None = None) -> Event:
        with self._lock:
            event = Event(
                sequence_no=self._fold.last_seq + 1,
                event_id=str(uuid.uuid4()),
                kind="context" if isinstance(element, ContextElement) else "data",
                element=element,
                occurred_at=occurred_at or format_timestamp(self._clock.now()),
            )
            try:
                self._fh.write(_event_line(event))
                self._fh.flush()
                if self._fsync:
                    os.fsync(self._fh.fileno())
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
            self._fold.apply(event)
            self._events.append(event)
            self._feed.append(event)
        self._drain_feed()
        return event

    def _drain_feed(self) -> None:
        # One drainer at a time keeps watcher callbacks serial and ordered
        # even when appends race or a watcher itself appends.
        while self._feed:
            if not self._feed_lock.acquire(blocking=False):
                return
            try:
                while self._feed:
                    event = self._feed.popleft()
                    for watcher in list(self._watchers):
                        watcher(event)
            finally:
                self._feed_lock.release()

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    # -- reading ------------------------------------------------------

    def get(self, element_id: str) -> Element | None:
        with self._lock:
            return self._fold.elements_by_id.get(element_id)

    def last_seq(self) -> int:
        with self._lock:
            return self._fold.last_seq

    def events(self, since_seq: int = 0) -> list[Event]:
        with self._lock:
            return self._events[since_seq:]

    def query(self, f: Filter) -> list[Event]:
        with self._lock:
            return [e for e in self._events if f.matches(e)]

    def snapshot(self) -> Snapshot:
        with self._lock:
            return self._fold.freeze()

    # -- change feed ----------------------------------------------------

    def watch(self, callback: Callable[[Event], None]) -> Callable[[], None]:
        """Register a change-feed consumer; returns its unsubscribe."""
        self._watchers.append(callback)

        def cancel() -> None:
            try:
                self._watchers.remove(callback)
            except ValueError:
                pass

        return cancel
