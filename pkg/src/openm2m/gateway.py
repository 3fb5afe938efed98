"""Service gateway tying the store, transactions, messaging and
notifications together behind one HTTP-style surface.

``GatewayCore`` owns every subsystem and is the only component that knows
about all of them.  ``route`` maps requests onto core operations without
any socket I/O, so the whole API is testable in-process; ``httpd`` wraps
it in a real server.

Administrative state (registered objects, groups, charges, sessions) is
persisted as context elements under reserved ``m2m:`` entity types and
folded back into memory on startup, so a gateway restarted on the same
log resumes where it stopped.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime
from decimal import Decimal, InvalidOperation
from typing import Iterable, Mapping

from . import codec
from .broker import (
    Broker,
    EmptyGroup,
    InvalidMessage,
    UnknownDelivery,
    UnknownMessage,
    UnknownRecipient,
    UnknownTarget,
    new_message,
)
from .codec import CodecError, DoRequest, DoResponse
from .model import (
    ContextElement,
    DataElement,
    Triple,
    canonical_number,
    element_canonical_json,
    element_digest,
    make_data_element,
    promote_to_context,
)
from .notify import (
    BadPredicate,
    NotifyEngine,
    NotifyError,
    UnknownObject,
    UnknownSub,
    predicate_from_json,
)
from .runtime import Scheduler, SystemClock, format_timestamp, parse_timestamp
from .store import EmptyFilter, EventStore, Event, Filter, event_json
from .txn import (
    AlreadyCommitted,
    Coordinator,
    TxnClosed,
    TxnError,
    UnknownTxn,
)

OBJECT_ENTITY_TYPE = "m2m:Object"
GROUP_ENTITY_TYPE = "m2m:Group"
CHARGE_ENTITY_TYPE = "m2m:Charge"
SESSION_ENTITY_TYPE = "m2m:Session"
ADMIN_PREFIX = "m2m:"

SESSION_ACTIVE = "active"
SESSION_CLOSED = "closed"


class GatewayError(Exception):
    pass


class BadRequest(GatewayError):
    """The request body or parameters cannot be used."""


class UnknownGroup(GatewayError):
    pass


class UnknownElement(GatewayError):
    pass


class EmptyGroupDefinition(GatewayError):
    """A group needs defining attributes, explicit members, or both."""


class NegativeUnits(GatewayError):
    pass


# -- HTTP-shaped request/response, no sockets involved -------------------


@dataclass(frozen=True)
class HttpRequest:
    method: str
    path: str
    headers: Mapping[str, str] = field(default_factory=dict)
    body: bytes = b""
    query: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class HttpResponse:
    status: int
    body: bytes = b""
    content_type: str = "application/json"


def _json_response(status: int, doc: dict) -> HttpResponse:
    return HttpResponse(status, json.dumps(doc, ensure_ascii=False).encode("utf-8"))


def _raw_json(status: int, text: str) -> HttpResponse:
    return HttpResponse(status, text.encode("utf-8"))


def _error_response(status: int, exc: Exception) -> HttpResponse:
    doc = {"error": str(exc) or exc.__class__.__name__,
           "kind": exc.__class__.__name__}
    return _json_response(status, doc)


def _json_body(body: bytes, allow_empty: bool = False) -> dict:
    if not body.strip():
        if allow_empty:
            return {}
        raise BadRequest("request body must be a JSON object")
    try:
        doc = json.loads(body.decode("utf-8"), parse_float=Decimal)
    except (ValueError, UnicodeDecodeError) as exc:
        raise BadRequest(f"request body is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise BadRequest("request body must be a JSON object")
    return doc


def _require_str(doc: dict, name: str) -> str:
    value = doc.get(name)
    if not isinstance(value, str) or not value:
        raise BadRequest(f"{name} must be a non-empty string")
    return value


def _request_format(headers: Mapping[str, str], body: bytes) -> str:
    content_type = headers.get("content-type", "")
    if "xml" in content_type:
        return "xml"
    if "json" in content_type:
        return "json"
    return "xml" if body.lstrip().startswith(b"<") else "json"


def _response_format(headers: Mapping[str, str], default: str) -> str:
    accept = headers.get("accept", "")
    if "xml" in accept:
        return "xml"
    if "json" in accept:
        return "json"
    return default


_CONTENT_TYPES = {"xml": "application/xml", "json": "application/json"}


# -- administrative records -----------------------------------------------


@dataclass(frozen=True)
class GroupDef:
    group_id: str
    attributes: tuple[Triple, ...]
    explicit_members: frozenset[str]
    active: bool


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    endpoints: tuple[str, str]
    state: str
    last_activity: datetime


def _admin_element(entity_id: str, entity_type: str,
                   triples: Iterable[Triple]) -> ContextElement:
    return promote_to_context(make_data_element(triples), entity_id, entity_type)


def _object_element(object_id: str, callback: str | None, active: bool) -> ContextElement:
    return _admin_element(object_id, OBJECT_ENTITY_TYPE, [
        Triple("objectId", "string", object_id),
        Triple("callback", "string", callback or ""),
        Triple("active", "boolean", active),
    ])


def _attributes_to_json(attributes: Iterable[Triple]) -> str:
    return json.dumps(
        [[t.name, t.type_tag, t.value] for t in attributes], ensure_ascii=False)


def _attributes_from_json(text: str) -> tuple[Triple, ...]:
    return tuple(Triple(name, tag, value) for name, tag, value in json.loads(text))


def _group_element(group: GroupDef) -> ContextElement:
    return _admin_element(group.group_id, GROUP_ENTITY_TYPE, [
        Triple("groupId", "string", group.group_id),
        Triple("definingAttributes", "string", _attributes_to_json(group.attributes)),
        Triple("explicitMembers", "string",
               json.dumps(sorted(group.explicit_members))),
        Triple("active", "boolean", group.active),
    ])


def _charge_element(account_id: str, units: Decimal, resource: str,
                    at: str) -> ContextElement:
    return _admin_element(str(uuid.uuid4()), CHARGE_ENTITY_TYPE, [
        Triple("accountId", "string", account_id),
        Triple("units", "number", units),
        Triple("resource", "string", resource),
        Triple("at", "timestamp", at),
    ])


def _session_element(record: SessionRecord) -> ContextElement:
    return _admin_element(record.session_id, SESSION_ENTITY_TYPE, [
        Triple("sessionId", "string", record.session_id),
        Triple("endpointA", "string", record.endpoints[0]),
        Triple("endpointB", "string", record.endpoints[1]),
        Triple("state", "string", record.state),
        Triple("lastActivity", "timestamp", format_timestamp(record.last_activity)),
    ])


class _Directory:
    """The world as the broker and notifier see it."""

    def __init__(self, core: "GatewayCore") -> None:
        self._core = core

    def object_exists(self, object_id: str) -> bool:
        record = self._core._objects.get(object_id)
        return bool(record and record["active"])

    def group_members(self, group_id: str) -> list[str] | None:
        return self._core._group_members_or_none(group_id)

    def object_element(self, object_id: str) -> DataElement | None:
        return self._core._latest.get(object_id)


class GatewayCore:
    """Composition root for one gateway instance.

    Lock discipline: ``_lock`` only guards the folded administrative
    dictionaries.  Nothing here calls into the broker, coordinator or
    notifier while holding it, because all three call back into the fold
    (via the store feed) and into the directory.
    """

    def __init__(
        self,
        log_path,
        *,
        clock=None,
        scheduler=None,
        channel=None,
        deliverer=None,
        fsync: bool = True,
        idle_timeout: float = 300.0,
        heartbeat_deadline: float = 30.0,
        charge_per_message: int = 1,
        charge_per_event: int = 1,
        prepare_timeout: float = 2.0,
        attempts: int = 3,
        backoff_base: float = 0.5,
    ) -> None:
        self.clock = clock or SystemClock()
        self.scheduler = scheduler or Scheduler()
        self.idle_timeout = float(idle_timeout)
        self.heartbeat_deadline = float(heartbeat_deadline)
        self.charge_per_message = int(charge_per_message)
        self.charge_per_event = int(charge_per_event)

        self.store = EventStore(log_path, clock=self.clock, fsync=fsync)

        self._lock = threading.RLock()
        self._latest: dict[str, ContextElement] = {}
        self._objects: dict[str, dict] = {}
        self._groups: dict[str, GroupDef] = {}
        self._balances: dict[str, Decimal] = {}
        self._sessions: dict[tuple[str, str], SessionRecord] = {}

        for event in self.store.events():
            self._fold(event)
        # registered before the subsystems so the fold always runs first
        self._unwatch = self.store.watch(self._fold)

        directory = _Directory(self)
        self.coordinator = Coordinator(self.store, prepare_timeout=prepare_timeout)
        self.broker = Broker(
            self.store,
            directory,
            coordinator=self.coordinator,
            channel=channel,
            scheduler=self.scheduler,
            attempts=attempts,
            backoff_base=backoff_base,
        )
        self.notify = NotifyEngine(
            self.store,
            directory=directory,
            group_resolver=self._group_members_or_none,
            clock=self.clock,
            scheduler=self.scheduler,
            deliverer=deliverer,
            attempts=attempts,
            backoff_base=backoff_base,
        )
        self.notify.attach()

    def close(self) -> None:
        self.notify.close()
        self._unwatch()
        self.coordinator.close()

    # -- event fold -------------------------------------------------------

    def _fold(self, event: Event) -> None:
        element = event.element
        if not isinstance(element, ContextElement):
            return
        entity_type = element.entity_type
        with self._lock:
            if not entity_type.startswith(ADMIN_PREFIX):
                self._latest[element.entity_id] = element
                return
            try:
                if entity_type == OBJECT_ENTITY_TYPE:
                    self._objects[element.triple("objectId").value] = {
                        "callback": element.triple("callback").value or None,
                        "active": bool(element.triple("active").value),
                    }
                elif entity_type == GROUP_ENTITY_TYPE:
                    group = GroupDef(
                        element.triple("groupId").value,
                        _attributes_from_json(
                            element.triple("definingAttributes").value),
                        frozenset(json.loads(
                            element.triple("explicitMembers").value)),
                        bool(element.triple("active").value),
                    )
                    self._groups[group.group_id] = group
                elif entity_type == CHARGE_ENTITY_TYPE:
                    account = element.triple("accountId").value
                    units = Decimal(element.triple("units").value)
                    self._balances[account] = (
                        self._balances.get(account, Decimal(0)) + units)
                elif entity_type == SESSION_ENTITY_TYPE:
                    record = SessionRecord(
                        element.triple("sessionId").value,
                        (element.triple("endpointA").value,
                         element.triple("endpointB").value),
                        element.triple("state").value,
                        parse_timestamp(element.triple("lastActivity").value),
                    )
                    self._sessions[record.endpoints] = record
            except (KeyError, ValueError):
                pass  # foreign admin element; not ours to interpret

    # -- object registry ----------------------------------------------------

    def register_object(self, object_id: str | None = None,
                        callback: str | None = None) -> str:
        object_id = object_id or str(uuid.uuid4())
        if not isinstance(object_id, str) or not object_id:
            raise BadRequest("objectId must be a non-empty string")
        if callback is not None and not isinstance(callback, str):
            raise BadRequest("callback must be a string")
        self.store.append(_object_element(object_id, callback, True))
        return object_id

    def deregister_object(self, object_id: str) -> None:
        with self._lock:
            record = self._objects.get(object_id)
            if not record or not record["active"]:
                raise UnknownObject(object_id)
            callback = record["callback"]
        # drop presence first, while the object still resolves
        self.notify.presence_update(object_id, "offline")
        self.store.append(_object_element(object_id, callback, False))

    def object_registered(self, object_id: str) -> bool:
        with self._lock:
            record = self._objects.get(object_id)
            return bool(record and record["active"])

    def object_callback(self, object_id: str) -> str | None:
        with self._lock:
            record = self._objects.get(object_id)
            return record["callback"] if record else None

    def heartbeat(self, object_id: str, deadline: float | None = None) -> None:
        self.notify.presence_update(
            object_id, "online",
            heartbeat_deadline=deadline or self.heartbeat_deadline)

    # -- groups -------------------------------------------------------------

    def create_group(self, attributes: Iterable[Triple] = (),
                     members: Iterable[str] = ()) -> str:
        attrs = tuple(attributes)
        explicit = frozenset(members)
        if not attrs and not explicit:
            raise EmptyGroupDefinition(
                "a group needs defining attributes or explicit members")
        for member in explicit:
            if not isinstance(member, str) or not member:
                raise BadRequest("group members must be non-empty strings")
        group = GroupDef(str(uuid.uuid4()), attrs, explicit, True)
        self.store.append(_group_element(group))
        return group.group_id

    def delete_group(self, group_id: str) -> None:
        with self._lock:
            group = self._groups.get(group_id)
            if group is None or not group.active:
                raise UnknownGroup(group_id)
        self.store.append(_group_element(replace(group, active=False)))

    def group_members(self, group_id: str) -> set[str]:
        """Explicit members plus every entity whose latest element carries
        all of the group's defining attributes."""
        with self._lock:
            group = self._groups.get(group_id)
            if group is None or not group.active:
                raise UnknownGroup(group_id)
            members = set(group.explicit_members)
            if group.attributes:
                for entity_id, element in self._latest.items():
                    if all(self._element_has(element, a) for a in group.attributes):
                        members.add(entity_id)
            return members

    @staticmethod
    def _element_has(element: DataElement, attr: Triple) -> bool:
        if not element.has_triple(attr.name):
            return False
        got = element.triple(attr.name)
        return got.type_tag == attr.type_tag and got.value == attr.value

    def _group_members_or_none(self, group_id: str) -> list[str] | None:
        try:
            return sorted(self.group_members(group_id))
        except UnknownGroup:
            return None

    # -- charging -------------------------------------------------------------

    def charge(self, account_id: str, units, resource: str = "manual") -> Decimal:
        """Record a charge and return the account's new balance."""
        if not isinstance(account_id, str) or not account_id:
            raise BadRequest("accountId must be a non-empty string")
        if isinstance(units, bool):
            raise BadRequest("units must be a number")
        try:
            amount = units if isinstance(units, Decimal) else Decimal(str(units))
        except InvalidOperation:
            raise BadRequest(f"units is not a number: {units!r}") from None
        if amount < 0:
            raise NegativeUnits(f"cannot charge {amount} units")
        self.store.append(_charge_element(
            account_id, amount, resource, format_timestamp(self.clock.now())))
        with self._lock:
            return self._balances.get(account_id, Decimal(0))

    def balance(self, account_id: str) -> Decimal:
        with self._lock:
            return self._balances.get(account_id, Decimal(0))

    # -- sessions ---------------------------------------------------------------

    def _idle(self, record: SessionRecord, now: datetime) -> bool:
        return (now - record.last_activity).total_seconds() > self.idle_timeout

    def _touch_session(self, a: str, b: str) -> SessionRecord:
        key = (a, b) if a <= b else (b, a)
        now = self.clock.now()
        with self._lock:
            record = self._sessions.get(key)
        if record is not None and record.state == SESSION_ACTIVE and self._idle(record, now):
            self.store.append(_session_element(replace(record, state=SESSION_CLOSED)))
            record = None
        if record is None or record.state != SESSION_ACTIVE:
            record = SessionRecord(str(uuid.uuid4()), key, SESSION_ACTIVE, now)
        else:
            record = replace(record, last_activity=now)
        self.store.append(_session_element(record))
        return record

    def session(self, a: str, b: str) -> SessionRecord | None:
        """Current session between two endpoints; idle expiry is detected
        lazily here and persisted as a closure."""
        key = (a, b) if a <= b else (b, a)
        with self._lock:
            record = self._sessions.get(key)
        if record is None:
            return None
        if record.state == SESSION_ACTIVE and self._idle(record, self.clock.now()):
            record = replace(record, state=SESSION_CLOSED)
            self.store.append(_session_element(record))
        return record

    def session_state(self, a: str, b: str) -> str | None:
        record = self.session(a, b)
        return record.state if record else None

    # -- command dispatch ---------------------------------------------------------

    def handle_do(self, req: DoRequest) -> DoResponse:
        """Relay each command to each responder as a confirmed message.

        A transaction id switches the sends to transactional delivery,
        all staged under that one transaction; nothing is visible to any
        responder until it commits.  The result mirrors HTTP: 200 all
        accepted, 404 unknown requestor or responder, 409 transaction
        already closed, 400 nothing to dispatch.
        """

        def respond(result: int) -> DoResponse:
            return DoResponse(req.requestor, format_timestamp(self.clock.now()),
                              req.responders, result)

        if not req.responders:
            return respond(400)
        with self._lock:
            ids = [req.requestor, *req.responders]
            for oid in ids:
                record = self._objects.get(oid)
                if not record or not record["active"]:
                    return respond(404)

        delivery_class = "confirmed"
        txn_id = req.transaction_id
        if txn_id is not None:
            delivery_class = "transactional"
            self.coordinator.begin(txn_id)  # adopt a caller-minted id

        accepted = 0
        try:
            for responder in req.responders:
                for command in req.commands:
                    payload = make_data_element([
                        Triple("command", "string", command),
                        Triple("requestor", "string", req.requestor),
                    ])
                    report = self.broker.send(new_message(
                        req.requestor, "single", responder, payload,
                        delivery_class=delivery_class, txn_id=txn_id))
                    accepted += len(report.per_recipient)
        except TxnClosed:
            return respond(409)
        except UnknownTarget:
            return respond(404)

        for responder in req.responders:
            self._touch_session(req.requestor, responder)
        if accepted and self.charge_per_message:
            self.charge(req.requestor,
                        Decimal(accepted * self.charge_per_message), "messaging")
        return respond(200)

    # -- routing --------------------------------------------------------------------

    def route(self, request: HttpRequest) -> HttpResponse:
        """Map one request to a response; errors become statuses, never
        exceptions."""
        try:
            return self._dispatch(request)
        except (UnknownTxn, UnknownGroup, UnknownElement, UnknownObject,
                UnknownSub, UnknownTarget, UnknownRecipient, UnknownDelivery,
                UnknownMessage) as exc:
            return _error_response(404, exc)
        except (TxnClosed, AlreadyCommitted, EmptyGroup) as exc:
            return _error_response(409, exc)
        except (BadRequest, CodecError, BadPredicate, EmptyGroupDefinition,
                NegativeUnits, InvalidMessage, EmptyFilter, TxnError,
                NotifyError, ValueError) as exc:
            return _error_response(400, exc)
        except Exception as exc:
            return _error_response(500, exc)

    def _dispatch(self, request: HttpRequest) -> HttpResponse:
        method = request.method.upper()
        parts = [p for p in request.path.split("/") if p]
        headers = {k.lower(): v for k, v in request.headers.items()}

        if method == "POST" and parts == ["a", "do"]:
            return self._h_do(request, headers)
        if method == "POST" and parts == ["objects"]:
            return self._h_register(request)
        if method == "DELETE" and len(parts) == 2 and parts[0] == "objects":
            self.deregister_object(parts[1])
            return _json_response(200, {"objectId": parts[1], "active": False})
        if (method == "POST" and len(parts) == 3 and parts[0] == "objects"
                and parts[2] == "heartbeat"):
            return self._h_heartbeat(parts[1], request)
        if method == "GET" and len(parts) == 3 and parts[0] == "objects" \
                and parts[2] == "pending":
            return self._h_pending(parts[1])
        if method == "POST" and parts == ["groups"]:
            return self._h_create_group(request)
        if method == "GET" and len(parts) == 3 and parts[0] == "groups" \
                and parts[2] == "members":
            members = sorted(self.group_members(parts[1]))
            return _json_response(200, {"groupId": parts[1], "members": members})
        if method == "DELETE" and len(parts) == 2 and parts[0] == "groups":
            self.delete_group(parts[1])
            return _json_response(200, {"groupId": parts[1], "active": False})
        if method == "POST" and parts == ["messages"]:
            return self._h_send_message(request)
        if (method == "POST" and len(parts) == 3 and parts[0] == "messages"
                and parts[2] == "ack"):
            return self._h_ack(parts[1], request)
        if method == "POST" and parts == ["subscriptions"]:
            return self._h_subscribe(request)
        if method == "DELETE" and len(parts) == 2 and parts[0] == "subscriptions":
            self.notify.unsubscribe(parts[1])
            return _json_response(200, {"subId": parts[1], "active": False})
        if method == "POST" and parts == ["transactions"]:
            doc = _json_body(request.body, allow_empty=True)
            txn_id = self.coordinator.begin(doc.get("txnId"))
            return _json_response(200, {"txnId": txn_id, "state": "open"})
        if (method == "POST" and len(parts) == 3 and parts[0] == "transactions"
                and parts[2] == "commit"):
            outcome = self.coordinator.commit(parts[1])
            doc = {"txnId": parts[1], "state": outcome.state}
            if outcome.reason:
                doc["reason"] = outcome.reason
            return _json_response(200, doc)
        if (method == "POST" and len(parts) == 3 and parts[0] == "transactions"
                and parts[2] == "abort"):
            self.coordinator.abort(parts[1])
            return _json_response(200, {"txnId": parts[1], "state": "aborted"})
        if method == "POST" and parts == ["charges"]:
            return self._h_charge(request)
        if method == "GET" and len(parts) == 3 and parts[0] == "accounts" \
                and parts[2] == "balance":
            return _raw_json(200, '{"accountId":%s,"balance":%s}' % (
                json.dumps(parts[1]), canonical_number(self.balance(parts[1]))))
        if method == "POST" and parts == ["observations"]:
            return self._h_ingest_observation(request)
        if method == "GET" and parts == ["events"]:
            return self._h_events(request)
        if method == "GET" and len(parts) == 2 and parts[0] == "elements":
            return self._h_element(parts[1], headers)
        if method == "GET" and len(parts) == 3 and parts[0] == "elements" \
                and parts[2] == "digest":
            element = self.store.get(parts[1])
            if element is None:
                raise UnknownElement(parts[1])
            return _json_response(200, {"elementId": parts[1],
                                        "digest": element_digest(element)})
        return _error_response(404, GatewayError(
            f"no route for {method} {request.path}"))

    # -- handlers -------------------------------------------------------------------

    def _h_do(self, request: HttpRequest, headers: Mapping[str, str]) -> HttpResponse:
        fmt_in = _request_format(headers, request.body)
        if fmt_in == "xml":
            req = codec.decode_do_request(request.body)
        else:
            req = codec.do_request_from_json(request.body)
        resp = self.handle_do(req)
        fmt_out = _response_format(headers, fmt_in)
        if fmt_out == "xml":
            body = codec.encode_do_response(resp)
        else:
            body = codec.do_response_to_json(resp)
        return HttpResponse(resp.result, body, _CONTENT_TYPES[fmt_out])

    def _h_register(self, request: HttpRequest) -> HttpResponse:
        doc = _json_body(request.body, allow_empty=True)
        object_id = doc.get("objectId")
        callback = doc.get("callback")
        if object_id is not None and not isinstance(object_id, str):
            raise BadRequest("objectId must be a string")
        object_id = self.register_object(object_id, callback)
        return _json_response(200, {"objectId": object_id, "active": True})

    def _h_heartbeat(self, object_id: str, request: HttpRequest) -> HttpResponse:
        doc = _json_body(request.body, allow_empty=True)
        deadline = doc.get("deadline")
        if deadline is not None:
            if isinstance(deadline, bool) or not isinstance(deadline, (int, Decimal)):
                raise BadRequest("deadline must be a number of seconds")
            deadline = float(deadline)
            if deadline <= 0:
                raise BadRequest("deadline must be positive")
        self.heartbeat(object_id, deadline)
        return _json_response(200, {"objectId": object_id, "status": "online"})

    def _h_create_group(self, request: HttpRequest) -> HttpResponse:
        doc = _json_body(request.body)
        attr_docs = doc.get("attributes", [])
        members = doc.get("members", [])
        if not isinstance(attr_docs, list) or not isinstance(members, list):
            raise BadRequest("attributes and members must be arrays")
        attributes = []
        for item in attr_docs:
            if not isinstance(item, dict):
                raise BadRequest("each attribute needs name, type and value")
            try:
                attributes.append(
                    Triple(item["name"], item["type"], item["value"]))
            except KeyError as exc:
                raise BadRequest(f"attribute is missing {exc}") from None
        group_id = self.create_group(attributes, members)
        return _json_response(200, {"groupId": group_id})

    def _h_send_message(self, request: HttpRequest) -> HttpResponse:
        doc = _json_body(request.body)
        sender = _require_str(doc, "sender")
        if not self.object_registered(sender):
            raise UnknownObject(f"sender {sender} is not registered")
        mode = doc.get("mode", "single")
        target: object = _require_str(doc, "target")
        if mode == "selective":
            target = (target, self._filter_from_json(doc.get("filter")))
        payload_doc = doc.get("payload")
        if payload_doc is None:
            raise BadRequest("payload element is required")
        payload = codec.element_from_json_obj(payload_doc)
        message = new_message(sender, mode, target, payload,
                              delivery_class=doc.get("deliveryClass", "unconfirmed"),
                              txn_id=doc.get("txnId"))
        report = self.broker.send(message)
        if report.per_recipient and self.charge_per_message:
            self.charge(sender,
                        Decimal(len(report.per_recipient) * self.charge_per_message),
                        "messaging")
        return _json_response(200, {"msgId": report.msg_id,
                                    "perRecipient": dict(report.per_recipient)})

    @staticmethod
    def _filter_from_json(doc: object) -> Filter:
        if not isinstance(doc, dict):
            raise BadRequest("selective mode needs a filter object")
        pairs = doc.get("tripleEquals", [])
        if not isinstance(pairs, list):
            raise BadRequest("tripleEquals must be an array of [name, value] pairs")
        try:
            triple_equals = tuple((name, value) for name, value in pairs)
        except (TypeError, ValueError):
            raise BadRequest("tripleEquals must be an array of [name, value] pairs") \
                from None
        since = doc.get("sinceSeq")
        if since is not None and (isinstance(since, bool) or not isinstance(since, int)):
            raise BadRequest("sinceSeq must be an integer")
        return Filter(entity_type=doc.get("entityType"),
                      triple_equals=triple_equals, since_seq=since)

    def _h_ack(self, msg_id: str, request: HttpRequest) -> HttpResponse:
        doc = _json_body(request.body)
        recipient = _require_str(doc, "recipient")
        report = self.broker.ack(recipient, msg_id)
        return _json_response(200, {"msgId": report.msg_id,
                                    "perRecipient": dict(report.per_recipient)})

    def _h_pending(self, object_id: str) -> HttpResponse:
        messages = self.broker.pending(object_id)
        items = ",".join(
            '{"msgId":%s,"sender":%s,"deliveryClass":%s,"payload":%s}' % (
                json.dumps(m.msg_id), json.dumps(m.sender),
                json.dumps(m.delivery_class), element_canonical_json(m.payload))
            for m in messages)
        return _raw_json(200, '{"objectId":%s,"messages":[%s]}' % (
            json.dumps(object_id), items))

    def _h_subscribe(self, request: HttpRequest) -> HttpResponse:
        doc = _json_body(request.body)
        subscriber = _require_str(doc, "subscriber")
        registrar = doc.get("registrar", subscriber)
        target = doc.get("target", "")
        if not isinstance(registrar, str) or not isinstance(target, str):
            raise BadRequest("registrar and target must be strings")
        predicate = predicate_from_json(doc.get("predicate"))
        sub_id = self.notify.subscribe(subscriber, registrar, target, predicate)
        return _json_response(200, {"subId": sub_id, "active": True})

    def _h_charge(self, request: HttpRequest) -> HttpResponse:
        doc = _json_body(request.body)
        account_id = _require_str(doc, "accountId")
        if "units" not in doc:
            raise BadRequest("units is required")
        resource = doc.get("resource", "manual")
        if not isinstance(resource, str):
            raise BadRequest("resource must be a string")
        balance = self.charge(account_id, doc["units"], resource)
        return _raw_json(200, '{"accountId":%s,"balance":%s}' % (
            json.dumps(account_id), canonical_number(balance)))

    def _h_ingest_observation(self, request: HttpRequest) -> HttpResponse:
        observation = codec.parse_om_observation(request.body)
        event = self.store.append(observation)
        if self.charge_per_event:
            self.charge(observation.entity_id, Decimal(self.charge_per_event),
                        "storage")
        return _json_response(200, {
            "elementId": observation.element_id,
            "entityId": observation.entity_id,
            "seq": event.sequence_no,
        })

    def _h_events(self, request: HttpRequest) -> HttpResponse:
        raw = request.query.get("since", "0")
        try:
            since = int(raw)
        except (TypeError, ValueError):
            raise BadRequest(f"since must be an integer: {raw!r}") from None
        events = self.store.events(since)
        return _raw_json(200, '{"events":[%s]}' % ",".join(
            event_json(e) for e in events))

    def _h_element(self, element_id: str, headers: Mapping[str, str]) -> HttpResponse:
        element = self.store.get(element_id)
        if element is None:
            raise UnknownElement(element_id)
        fmt = _response_format(headers, "json")
        return HttpResponse(200, codec.encode_element(element, fmt),
                            _CONTENT_TYPES[fmt])
