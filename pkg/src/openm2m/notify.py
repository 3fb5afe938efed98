"""Predicate subscriptions over the event feed, plus presence tracking.

Subscriptions are edge-triggered: a notification fires on a predicate
state transition, never while the state merely persists.  The initial
states are documented per predicate below; re-entering the normal state
is always silent.

Presence is folded into the same pipeline: heartbeats and deadline
expiries append ``m2m:Presence`` elements to the store, and those events
drive Presence subscriptions like any other.  Every notification's
evidence is therefore a store event whose sequence number is at or below
the notification itself.

Callback delivery runs on the evaluator thread with scheduled retries
(three attempts, exponential backoff), deduplicated per notification so
a redelivery can never double-fire.
"""

from __future__ import annotations

import json
import math
import threading
import urllib.request
import uuid
from dataclasses import dataclass
from decimal import Decimal
from typing import Callable, Iterable

from .model import ContextElement, Triple, make_data_element, promote_to_context
from .runtime import Clock, Scheduler
from .store import Event, EventStore, event_json

SUBSCRIPTION_ENTITY_TYPE = "m2m:Subscription"
PRESENCE_ENTITY_TYPE = "m2m:Presence"

CAUSES = ("enter", "leave", "above", "below", "alarm", "online", "offline")

EARTH_RADIUS_M = 6371000.0


class NotifyError(Exception):
    pass


class BadPredicate(NotifyError):
    pass


class UnknownSub(NotifyError):
    pass


class UnknownObject(NotifyError):
    pass


# -- predicates -------------------------------------------------------


@dataclass(frozen=True)
class GroupChange:
    """Membership delta of one group; baseline is the membership seen
    when the subscription activates."""

    group_id: str

    def __post_init__(self) -> None:
        if not self.group_id:
            raise BadPredicate("group id must be non-empty")


@dataclass(frozen=True)
class Band:
    """Numeric reading leaving [low, high]; initial state is in-band."""

    triple_name: str
    low: Decimal
    high: Decimal

    def __post_init__(self) -> None:
        if not self.triple_name:
            raise BadPredicate("triple name must be non-empty")
        try:
            object.__setattr__(self, "low", Decimal(str(self.low)))
            object.__setattr__(self, "high", Decimal(str(self.high)))
        except ArithmeticError:
            raise BadPredicate("band bounds must be numbers") from None
        if not self.low < self.high:
            raise BadPredicate("band needs low < high")


@dataclass(frozen=True)
class Alarm:
    """Fires on every event carrying the named triple as boolean true."""

    triple_name: str

    def __post_init__(self) -> None:
        if not self.triple_name:
            raise BadPredicate("triple name must be non-empty")


@dataclass(frozen=True)
class Presence:
    """Online/offline transitions of one object."""

    object_id: str

    def __post_init__(self) -> None:
        if not self.object_id:
            raise BadPredicate("object id must be non-empty")


@dataclass(frozen=True)
class Geofence:
    """Position entering or leaving an area; initial state is outside.

    Exactly one geometry: circle = (lat, lon, radius meters), or a
    polygon of at least three (lat, lon) vertices.  Positions arrive as
    numeric ``lat``/``lon`` triples on the target's events.
    """

    area_id: str
    circle: tuple[float, float, float] | None = None
    polygon: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self) -> None:
        if not self.area_id:
            raise BadPredicate("area id must be non-empty")
        if (self.circle is None) == (self.polygon is None):
            raise BadPredicate("geofence needs exactly one of circle, polygon")
        if self.circle is not None:
            lat, lon, radius = self.circle
            if radius <= 0:
                raise BadPredicate("circle radius must be positive")
            object.__setattr__(self, "circle", (float(lat), float(lon), float(radius)))
        else:
            points = tuple((float(a), float(b)) for a, b in self.polygon)
            if len(points) < 3:
                raise BadPredicate("polygon needs at least three vertices")
            object.__setattr__(self, "polygon", points)

    def contains(self, lat: float, lon: float) -> bool:
        if self.circle is not None:
            clat, clon, radius = self.circle
            return _haversine_m(lat, lon, clat, clon) <= radius
        return _winding_number(lat, lon, self.polygon) != 0


Predicate = object  # one of the five dataclasses above


def _haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = math.radians(lat2 - lat1)
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(a))


def _winding_number(lat: float, lon: float, polygon) -> int:
    # Treating (lon, lat) as planar x, y; fine for desk-scale areas.
    wn = 0
    n = len(polygon)
    for i in range(n):
        y1, x1 = polygon[i]
        y2, x2 = polygon[(i + 1) % n]
        if y1 <= lat:
            if y2 > lat and _is_left(x1, y1, x2, y2, lon, lat) > 0:
                wn += 1
        elif y2 <= lat and _is_left(x1, y1, x2, y2, lon, lat) < 0:
            wn -= 1
    return wn


def _is_left(x1, y1, x2, y2, px, py) -> float:
    return (x2 - x1) * (py - y1) - (px - x1) * (y2 - y1)


# -- subscriptions ----------------------------------------------------


@dataclass(frozen=True)
class Subscription:
    sub_id: str
    subscriber: str
    registrar: str
    target: str
    predicate: Predicate


@dataclass(frozen=True)
class Notification:
    sub_id: str
    cause: str
    fired_at: str
    evidence: Event

    def body(self) -> bytes:
        """The callback payload; evidence keeps its canonical byte form."""
        head = json.dumps(
            {"subId": self.sub_id, "cause": self.cause, "firedAt": self.fired_at},
            separators=(",", ":"),
        )
        return (head[:-1] + ',"evidence":' + event_json(self.evidence) + "}").encode()


def _predicate_triples(predicate: Predicate) -> list[Triple]:
    if isinstance(predicate, GroupChange):
        return [Triple("kind", "string", "group-change"),
                Triple("groupId", "string", predicate.group_id)]
    if isinstance(predicate, Band):
        return [Triple("kind", "string", "band"),
                Triple("tripleName", "string", predicate.triple_name),
                Triple("low", "number", predicate.low),
                Triple("high", "number", predicate.high)]
    if isinstance(predicate, Alarm):
        return [Triple("kind", "string", "alarm"),
                Triple("tripleName", "string", predicate.triple_name)]
    if isinstance(predicate, Presence):
        return [Triple("kind", "string", "presence"),
                Triple("objectId", "string", predicate.object_id)]
    if isinstance(predicate, Geofence):
        geometry = (
            {"circle": list(predicate.circle)}
            if predicate.circle is not None
            else {"polygon": [list(p) for p in predicate.polygon]}
        )
        return [Triple("kind", "string", "geofence"),
                Triple("areaId", "string", predicate.area_id),
                Triple("geometry", "string", json.dumps(geometry))]
    raise BadPredicate(f"unknown predicate {type(predicate).__name__}")


def _predicate_from_element(el: ContextElement) -> Predicate:
    kind = el.triple("kind").value
    if kind == "group-change":
        return GroupChange(el.triple("groupId").value)
    if kind == "band":
        return Band(el.triple("tripleName").value,
                    el.triple("low").value, el.triple("high").value)
    if kind == "alarm":
        return Alarm(el.triple("tripleName").value)
    if kind == "presence":
        return Presence(el.triple("objectId").value)
    if kind == "geofence":
        geometry = json.loads(el.triple("geometry").value)
        if "circle" in geometry:
            return Geofence(el.triple("areaId").value,
                            circle=tuple(geometry["circle"]))
        return Geofence(el.triple("areaId").value,
                        polygon=tuple(tuple(p) for p in geometry["polygon"]))
    raise BadPredicate(f"unknown predicate kind {kind!r}")


def predicate_from_json(doc: object) -> Predicate:
    """Parse the wire form used by the subscription API."""
    if not isinstance(doc, dict):
        raise BadPredicate("predicate must be an object")
    kind = doc.get("kind")
    try:
        if kind == "band":
            return Band(doc["tripleName"], doc["low"], doc["high"])
        if kind == "alarm":
            return Alarm(doc["tripleName"])
        if kind == "presence":
            return Presence(doc["objectId"])
        if kind == "group-change":
            return GroupChange(doc["groupId"])
        if kind == "geofence":
            if "circle" in doc:
                return Geofence(doc["areaId"], circle=tuple(doc["circle"]))
            return Geofence(
                doc["areaId"], polygon=tuple(tuple(p) for p in doc["polygon"]))
    except KeyError as exc:
        raise BadPredicate(f"predicate is missing {exc}") from None
    except (TypeError, ValueError) as exc:
        raise BadPredicate(str(exc)) from None
    raise BadPredicate(f"unknown predicate kind {kind!r}")


def _subscription_element(sub: Subscription, active: bool) -> ContextElement:
    triples = [
        Triple("subId", "string", sub.sub_id),
        Triple("subscriber", "string", sub.subscriber),
        Triple("registrar", "string", sub.registrar),
        Triple("target", "string", sub.target),
        Triple("active", "boolean", active),
    ]
    triples.extend(_predicate_triples(sub.predicate))
    return promote_to_context(
        make_data_element(triples),
        entity_id=sub.sub_id,
        entity_type=SUBSCRIPTION_ENTITY_TYPE,
    )


def _presence_element(object_id: str, status: str) -> ContextElement:
    return promote_to_context(
        make_data_element([
            Triple("objectId", "string", object_id),
            Triple("status", "string", status),
        ]),
        entity_id=object_id,
        entity_type=PRESENCE_ENTITY_TYPE,
    )


def post_json(url: str, body: bytes, timeout: float = 5.0) -> bool:
    """Default deliverer: POST the body, success = any 2xx reply."""
    request = urllib.request.Request(
        url, data=body, headers={"Content-Type": "application/json"}, method="POST"
    )
    try:
        with urllib.request.urlopen(request, timeout=timeout) as reply:
            return 200 <= reply.status < 300
    except Exception:
        return False


class NotifyEngine:
    """Consumes the store change feed serially and fires subscriptions.

    Construction replays history with delivery suppressed to rebuild
    predicate states, then ``attach`` begins live evaluation.  Heartbeat
    deadlines ride the injected scheduler, so a virtual scheduler makes
    presence timelines deterministic.
    """

    def __init__(
        self,
        store: EventStore,
        *,
        directory=None,
        group_resolver: Callable[[str], Iterable[str] | None] | None = None,
        clock: Clock | None = None,
        scheduler=None,
        deliverer: Callable[[str, bytes], bool] | None = None,
        attempts: int = 3,
        backoff_base: float = 0.5,
    ) -> None:
        self._store = store
        self._directory = directory
        self._group_resolver = group_resolver or (lambda group_id: None)
        self._clock = clock or Clock()
        self._scheduler = scheduler or Scheduler()
        self._deliverer = deliverer or post_json
        self._attempts = attempts
        self._backoff_base = backoff_base
        self._lock = threading.RLock()
        self._subs: dict[str, Subscription] = {}
        self._active: dict[str, bool] = {}
        self._order: list[str] = []
        self._band_state: dict[str, str] = {}
        self._geo_state: dict[str, str] = {}
        self._group_state: dict[str, set[str]] = {}
        self._presence: dict[str, tuple[str, float]] = {}
        self._delivered: set[tuple[str, int, int]] = set()
        self._live = False
        self._detach = None
        for event in store.events():
            self._on_event(event)
        self._live = True

    def attach(self) -> None:
        """Start consuming the live change feed."""
        if self._detach is None:
            self._detach = self._store.watch(self._on_event)

    def close(self) -> None:
        if self._detach is not None:
            self._detach()
            self._detach = None

    # -- subscription management ----------------------------------------

    def subscribe(self, subscriber: str, registrar: str, target: str,
                  predicate: Predicate) -> str:
        _predicate_triples(predicate)  # raises BadPredicate on junk
        sub = Subscription(str(uuid.uuid4()), subscriber, registrar, target, predicate)
        element = _subscription_element(sub, active=True)
        self._store.append(element)
        if self._detach is None:
            # not attached: apply directly instead of via the feed
            self._apply_subscription_event(element)
        return sub.sub_id

    def unsubscribe(self, sub_id: str) -> None:
        with self._lock:
            sub = self._subs.get(sub_id)
            if sub is None or not self._active.get(sub_id):
                raise UnknownSub(sub_id)
        self._store.append(_subscription_element(sub, active=False))
        if self._detach is None:
            self._active[sub_id] = False

    def subscription(self, sub_id: str) -> Subscription | None:
        return self._subs.get(sub_id)

    def active_subscriptions(self) -> list[Subscription]:
        with self._lock:
            return [self._subs[s] for s in self._order if self._active.get(s)]

    # -- presence ---------------------------------------------------------

    def presence_update(self, object_id: str, status: str,
                        heartbeat_deadline: float | None = None) -> None:
        if status not in ("online", "offline"):
            raise NotifyError(f"unknown presence status {status!r}")
        if self._directory is not None and not self._directory.object_exists(object_id):
            raise UnknownObject(object_id)
        with self._lock:
            previous = self._presence.get(object_id)
            stamp = self._clock.monotonic()
            self._presence[object_id] = (status, stamp)
            changed = previous is None or previous[0] != status
            if status == "online" and heartbeat_deadline:
                self._scheduler.call_later(
                    heartbeat_deadline, self._deadline_check, object_id, stamp)
        if changed:
            self._store.append(_presence_element(object_id, status))

    def presence_status(self, object_id: str) -> str:
        with self._lock:
            record = self._presence.get(object_id)
        return record[0] if record else "offline"

    def _deadline_check(self, object_id: str, stamp: float) -> None:
        with self._lock:
            record = self._presence.get(object_id)
            if record is None or record != ("online", stamp):
                return  # heartbeat arrived since, or already offline
            self._presence[object_id] = ("offline", self._clock.monotonic())
        self._store.append(_presence_element(object_id, "offline"))

    # -- evaluation -------------------------------------------------------

    def _on_event(self, event: Event) -> None:
        element = event.element
        if (isinstance(element, ContextElement)
                and element.entity_type == SUBSCRIPTION_ENTITY_TYPE):
            self._apply_subscription_event(element)
            return
        if (not self._live
                and isinstance(element, ContextElement)
                and element.entity_type == PRESENCE_ENTITY_TYPE):
            # seed presence states during replay; deadlines do not survive
            self._presence[element.entity_id] = (
                element.triple("status").value, self._clock.monotonic())
        notifications = self.evaluate(event)
        if self._live:
            for index, notification in enumerate(notifications):
                self._dispatch(notification, index)

    def _apply_subscription_event(self, element: ContextElement) -> None:
        with self._lock:
            sub_id = element.triple("subId").value
            active = element.triple("active").value
            if sub_id not in self._subs:
                if not active:
                    return
                sub = Subscription(
                    sub_id,
                    element.triple("subscriber").value,
                    element.triple("registrar").value,
                    element.triple("target").value,
                    _predicate_from_element(element),
                )
                self._subs[sub_id] = sub
                self._order.append(sub_id)
                if isinstance(sub.predicate, GroupChange):
                    members = self._group_resolver(sub.predicate.group_id)
                    self._group_state[sub_id] = set(members or [])
            self._active[sub_id] = active

    def evaluate(self, event: Event) -> list[Notification]:
        """Advance every active subscription's state; return what fired."""
        with self._lock:
            fired_at = self._clock.timestamp()
            out: list[Notification] = []
            for sub_id in self._order:
                if not self._active.get(sub_id):
                    continue
                sub = self._subs[sub_id]
                for cause in self._eval_sub(sub, event):
                    out.append(Notification(sub_id, cause, fired_at, event))
            return out

    def _eval_sub(self, sub: Subscription, event: Event) -> list[str]:
        predicate = sub.predicate
        element = event.element
        if isinstance(predicate, GroupChange):
            current = set(self._group_resolver(predicate.group_id) or [])
            previous = self._group_state.get(sub.sub_id, set())
            if current == previous:
                return []
            self._group_state[sub.sub_id] = current
            causes = ["enter" for _ in sorted(current - previous)]
            causes += ["leave" for _ in sorted(previous - current)]
            return causes

        if isinstance(predicate, Presence):
            if (isinstance(element, ContextElement)
                    and element.entity_type == PRESENCE_ENTITY_TYPE
                    and element.entity_id == predicate.object_id):
                return [element.triple("status").value]
            return []

        # the reading predicates watch the target's own events
        if not isinstance(element, ContextElement) or element.entity_id != sub.target:
            return []

        if isinstance(predicate, Alarm):
            if (element.has_triple(predicate.triple_name)
                    and element.triple(predicate.triple_name).type_tag == "boolean"
                    and element.triple(predicate.triple_name).value is True):
                return ["alarm"]
            return []

        if isinstance(predicate, Band):
            if (not element.has_triple(predicate.triple_name)
                    or element.triple(predicate.triple_name).type_tag != "number"):
                return []
            value = element.triple(predicate.triple_name).as_decimal()
            if value < predicate.low:
                state = "below"
            elif value > predicate.high:
                state = "above"
            else:
                state = "inside"
            previous = self._band_state.get(sub.sub_id, "inside")
            if state == previous:
                return []
            self._band_state[sub.sub_id] = state
            return [state] if state != "inside" else []

        if isinstance(predicate, Geofence):
            if not (element.has_triple("lat") and element.has_triple("lon")):
                return []
            lat_t, lon_t = element.triple("lat"), element.triple("lon")
            if lat_t.type_tag != "number" or lon_t.type_tag != "number":
                return []
            inside = predicate.contains(float(lat_t.value), float(lon_t.value))
            state = "inside" if inside else "outside"
            previous = self._geo_state.get(sub.sub_id, "outside")
            if state == previous:
                return []
            self._geo_state[sub.sub_id] = state
            return ["enter" if inside else "leave"]

        return []

    # -- delivery ---------------------------------------------------------

    def _dispatch(self, notification: Notification, index: int) -> None:
        key = (notification.sub_id, notification.evidence.sequence_no, index)
        with self._lock:
            if key in self._delivered:
                return
            self._delivered.add(key)
            sub = self._subs[notification.sub_id]
        self._deliver_attempt(sub.subscriber, notification.body(), 1)

    def _deliver_attempt(self, url: str, body: bytes, attempt: int) -> None:
        if self._deliverer(url, body):
            return
        if attempt < self._attempts:
            delay = self._backoff_base * 2 ** (attempt - 1)
            self._scheduler.call_later(
                delay, self._deliver_attempt, url, body, attempt + 1)
