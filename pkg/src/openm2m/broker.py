"""Message delivery with no duplication across four addressing modes.

Addressing: single (one object), group (every current member), any (one
member by rotation), selective (members matching a store filter).
Delivery classes: unconfirmed (one shot), confirmed (retries until ack or
budget exhausted), transactional (staged until its transaction commits).

The no-duplication guarantee lives at the inbox: every arrival is checked
against a persistent (recipient, msgId) seen-set that is rebuilt from the
administrative log on restart, so retries, duplicating channels, and
crash-replays all collapse to at most one inbox entry.
"""

from __future__ import annotations

import random
import threading
import uuid
from dataclasses import dataclass
from typing import Mapping, Union

from .model import DataElement, Element, Triple, make_data_element, promote_to_context
from .runtime import Scheduler
from .store import EventStore, Filter
from .txn import ABORTED, COMMITTED, OPEN, Coordinator

MODES = ("single", "group", "any", "selective")
CLASSES = ("unconfirmed", "confirmed", "transactional")

STAGED = "staged"
DELIVERED = "delivered"
ACKED = "acked"
EXPIRED = "expired"

MESSAGE_ENTITY_TYPE = "m2m:Message"
DELIVERY_ENTITY_TYPE = "m2m:Delivery"

Target = Union[str, tuple[str, Filter]]


class BrokerError(Exception):
    pass


class InvalidMessage(BrokerError):
    pass


class UnknownTarget(BrokerError):
    pass


class EmptyGroup(BrokerError):
    pass


class UnknownDelivery(BrokerError):
    pass


class UnknownRecipient(BrokerError):
    pass


class UnknownMessage(BrokerError):
    pass


@dataclass(frozen=True)
class Message:
    msg_id: str
    sender: str
    mode: str
    target: Target
    payload: DataElement
    delivery_class: str = "unconfirmed"
    txn_id: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise InvalidMessage(f"unknown mode {self.mode!r}")
        if self.delivery_class not in CLASSES:
            raise InvalidMessage(f"unknown delivery class {self.delivery_class!r}")
        if (self.txn_id is not None) != (self.delivery_class == "transactional"):
            raise InvalidMessage("txn id goes with the transactional class only")
        if self.mode == "selective":
            if not (isinstance(self.target, tuple) and len(self.target) == 2
                    and isinstance(self.target[0], str)
                    and isinstance(self.target[1], Filter)):
                raise InvalidMessage("selective target is (groupId, Filter)")
        elif not isinstance(self.target, str) or not self.target:
            raise InvalidMessage(f"{self.mode} target is a single id")

    def group_id(self) -> str:
        return self.target[0] if isinstance(self.target, tuple) else self.target


def new_message(
    sender: str,
    mode: str,
    target: Target,
    payload: DataElement,
    delivery_class: str = "unconfirmed",
    txn_id: str | None = None,
) -> Message:
    return Message(str(uuid.uuid4()), sender, mode, target, payload,
                   delivery_class, txn_id)


@dataclass(frozen=True)
class DeliveryReport:
    msg_id: str
    per_recipient: Mapping[str, str]


class ReliableChannel:
    """Every transmit arrives exactly once."""

    def transmit(self, recipient: str, message: Message) -> int:
        return 1


class FaultyChannel:
    """Drops or duplicates transmissions at configured rates."""

    def __init__(self, rng: random.Random, drop_rate: float = 0.0,
                 duplicate_rate: float = 0.0) -> None:
        self._rng = rng
        self.drop_rate = drop_rate
        self.duplicate_rate = duplicate_rate

    def transmit(self, recipient: str, message: Message) -> int:
        roll = self._rng.random()
        if roll < self.drop_rate:
            return 0
        if roll < self.drop_rate + self.duplicate_rate:
            return 2
        return 1


def _message_element(message: Message, recipients: list[str],
                     payload_element_id: str) -> Element:
    triples = [
        Triple("msgId", "string", message.msg_id),
        Triple("sender", "string", message.sender),
        Triple("mode", "string", message.mode),
        Triple("deliveryClass", "string", message.delivery_class),
        Triple("target", "string", message.group_id()),
        Triple("recipients", "string", ",".join(recipients)),
        Triple("payloadElementId", "string", payload_element_id),
    ]
    if message.txn_id is not None:
        triples.append(Triple("txnId", "string", message.txn_id))
    return promote_to_context(
        make_data_element(triples),
        entity_id=message.msg_id,
        entity_type=MESSAGE_ENTITY_TYPE,
    )


def _delivery_element(msg_id: str, recipient: str, status: str,
                      arrived: bool) -> Element:
    return promote_to_context(
        make_data_element([
            Triple("msgId", "string", msg_id),
            Triple("recipient", "string", recipient),
            Triple("status", "string", status),
            Triple("arrived", "boolean", arrived),
        ]),
        entity_id=f"{msg_id}:{recipient}",
        entity_type=DELIVERY_ENTITY_TYPE,
    )


class Broker:
    """Resolves recipients at send time and owns their inboxes.

    All mutation happens under one reentrant lock; retry and expiry
    callbacks come back through the scheduler and take the same lock, so
    a virtual scheduler makes every timing test deterministic.
    """

    def __init__(
        self,
        store: EventStore,
        directory,
        *,
        coordinator: Coordinator | None = None,
        channel=None,
        scheduler=None,
        attempts: int = 3,
        backoff_base: float = 0.5,
    ) -> None:
        self._store = store
        self._directory = directory
        self._coordinator = coordinator
        self._channel = channel or ReliableChannel()
        self._scheduler = scheduler or Scheduler()
        self._attempts = attempts
        self._backoff_base = backoff_base
        self._lock = threading.RLock()
        self._messages: dict[str, Message] = {}
        self._recipients: dict[str, list[str]] = {}
        self._status: dict[str, dict[str, str]] = {}
        self._inboxes: dict[str, list[str]] = {}
        self._seen: set[tuple[str, str]] = set()
        self._any_counter: dict[str, int] = {}
        self._replay()

    # -- recovery -------------------------------------------------------

    def _replay(self) -> None:
        for event in self._store.query(Filter(entity_type=MESSAGE_ENTITY_TYPE)):
            el = event.element
            msg_id = el.triple("msgId").value
            payload = self._store.get(el.triple("payloadElementId").value)
            txn_id = el.triple("txnId").value if el.has_triple("txnId") else None
            # Recipients were resolved at send time, so a selective
            # predicate needs no replay; a stand-in keeps the shape legal.
            target: Target = el.triple("target").value
            if el.triple("mode").value == "selective":
                target = (target, Filter(since_seq=0))
            message = Message(
                msg_id,
                el.triple("sender").value,
                el.triple("mode").value,
                target,
                payload,
                el.triple("deliveryClass").value,
                txn_id,
            )
            recipients = [r for r in el.triple("recipients").value.split(",") if r]
            self._messages[msg_id] = message
            self._recipients[msg_id] = recipients
            initial = STAGED if message.delivery_class == "transactional" else DELIVERED
            self._status[msg_id] = {r: initial for r in recipients}
            if message.mode == "any":
                group = message.group_id()
                self._any_counter[group] = self._any_counter.get(group, 0) + 1

        for event in self._store.query(Filter(entity_type=DELIVERY_ENTITY_TYPE)):
            el = event.element
            msg_id = el.triple("msgId").value
            recipient = el.triple("recipient").value
            key = (recipient, msg_id)
            if el.triple("arrived").value and key not in self._seen:
                self._seen.add(key)
                self._inboxes.setdefault(recipient, []).append(msg_id)
            self._status.setdefault(msg_id, {})[recipient] = el.triple("status").value

        # Complete transactions the previous process decided but never
        # told us about; re-enlist in ones that are still open.
        for msg_id, message in self._messages.items():
            if message.delivery_class != "transactional":
                continue
            statuses = set(self._status[msg_id].values())
            if statuses and statuses != {STAGED}:
                continue
            state = self._txn_state(message.txn_id)
            if state == COMMITTED:
                self._release(msg_id)
            elif state in (ABORTED, None):
                self._discard(msg_id)
            elif state == OPEN and self._coordinator is not None:
                self._coordinator.enlist(message.txn_id, self.participant_for(msg_id))

    def _txn_state(self, txn_id: str) -> str | None:
        latest = None
        for event in self._store.query(Filter(entity_type="m2m:Txn")):
            if event.element.entity_id == txn_id:
                latest = event.element.triple("state").value
        return latest

    # -- sending --------------------------------------------------------

    def _resolve(self, message: Message) -> list[str]:
        if message.mode == "single":
            if not self._directory.object_exists(message.target):
                raise UnknownTarget(message.target)
            return [message.target]
        members = self._directory.group_members(message.group_id())
        if members is None:
            raise UnknownTarget(message.group_id())
        members = sorted(members)
        if message.mode == "group":
            return members
        if message.mode == "any":
            if not members:
                raise EmptyGroup(message.group_id())
            counter = self._any_counter.get(message.group_id(), 0)
            self._any_counter[message.group_id()] = counter + 1
            return [members[counter % len(members)]]
        predicate: Filter = message.target[1]
        chosen = []
        for member in members:
            element = self._directory.object_element(member)
            if element is not None and predicate.matches_element(element):
                chosen.append(member)
        return chosen

    def send(self, message: Message) -> DeliveryReport:
        if message.delivery_class == "transactional" and self._coordinator is None:
            raise InvalidMessage("transactional send without a coordinator")
        with self._lock:
            if message.msg_id in self._messages:
                raise InvalidMessage(f"duplicate msgId {message.msg_id}")
            recipients = self._resolve(message)
            payload_event = self._store.append(message.payload)
            self._store.append(_message_element(
                message, recipients, payload_event.element.element_id))
            self._messages[message.msg_id] = message
            self._recipients[message.msg_id] = recipients
            staged = message.delivery_class == "transactional"
            self._status[message.msg_id] = {
                r: (STAGED if staged else DELIVERED) for r in recipients
            }
            if not staged:
                for recipient in recipients:
                    self._start_delivery(message, recipient)
        if staged:
            try:
                self._coordinator.enlist(
                    message.txn_id, self.participant_for(message.msg_id))
            except Exception:
                with self._lock:
                    self._discard(message.msg_id)
                raise
        return self.report(message.msg_id)

    def _start_delivery(self, message: Message, recipient: str) -> None:
        if message.delivery_class == "unconfirmed":
            self._transmit(message, recipient)
        else:
            self._attempt(message.msg_id, recipient, 1)

    def _transmit(self, message: Message, recipient: str) -> None:
        copies = self._channel.transmit(recipient, message)
        for _ in range(copies):
            key = (recipient, message.msg_id)
            if key in self._seen:
                continue
            self._seen.add(key)
            self._inboxes.setdefault(recipient, []).append(message.msg_id)
            self._store.append(_delivery_element(
                message.msg_id, recipient,
                self._status[message.msg_id][recipient], arrived=True))

    def _attempt(self, msg_id: str, recipient: str, attempt: int) -> None:
        with self._lock:
            message = self._messages.get(msg_id)
            if message is None:
                return
            if self._status[msg_id].get(recipient) in (ACKED, EXPIRED):
                return
            self._transmit(message, recipient)
            delay = self._backoff_base * 2 ** (attempt - 1)
            if attempt < self._attempts:
                self._scheduler.call_later(
                    delay, self._attempt, msg_id, recipient, attempt + 1)
            else:
                self._scheduler.call_later(
                    delay, self._expire, msg_id, recipient)

    def _expire(self, msg_id: str, recipient: str) -> None:
        with self._lock:
            if self._status[msg_id].get(recipient) == ACKED:
                return
            self._status[msg_id][recipient] = EXPIRED
            arrived = (recipient, msg_id) in self._seen
            self._store.append(
                _delivery_element(msg_id, recipient, EXPIRED, arrived))

    # -- transactional gating --------------------------------------------

    def participant_for(self, msg_id: str):
        """Two-phase commit handle covering one staged message."""

        def participant(doc: dict) -> dict:
            phase = doc.get("phase")
            if phase == "prepare":
                with self._lock:
                    statuses = set(self._status.get(msg_id, {}).values())
                    ready = statuses <= {STAGED}
                return {"vote": "yes" if ready else "no"}
            if phase == "commit":
                with self._lock:
                    self._release(msg_id)
            elif phase == "rollback":
                with self._lock:
                    self._discard(msg_id)
            return {}

        return participant

    def _release(self, msg_id: str) -> None:
        message = self._messages[msg_id]
        for recipient in self._recipients[msg_id]:
            if self._status[msg_id][recipient] != STAGED:
                continue
            self._status[msg_id][recipient] = DELIVERED
            self._store.append(
                _delivery_element(msg_id, recipient, DELIVERED, arrived=False))
            self._start_delivery(message, recipient)

    def _discard(self, msg_id: str) -> None:
        for recipient, status in self._status.get(msg_id, {}).items():
            if status == STAGED:
                self._status[msg_id][recipient] = EXPIRED
                self._store.append(
                    _delivery_element(msg_id, recipient, EXPIRED, arrived=False))

    # -- recipient side ---------------------------------------------------

    def ack(self, recipient: str, msg_id: str) -> DeliveryReport:
        with self._lock:
            if (recipient, msg_id) not in self._seen:
                raise UnknownDelivery(f"{msg_id} was never delivered to {recipient}")
            if self._status[msg_id].get(recipient) != ACKED:
                self._status[msg_id][recipient] = ACKED
                self._store.append(
                    _delivery_element(msg_id, recipient, ACKED, arrived=True))
            return self.report(msg_id)

    def pending(self, recipient: str) -> list[Message]:
        with self._lock:
            if not self._directory.object_exists(recipient):
                raise UnknownRecipient(recipient)
            return [
                self._messages[mid]
                for mid in self._inboxes.get(recipient, [])
                if self._status[mid].get(recipient) != ACKED
            ]

    def report(self, msg_id: str) -> DeliveryReport:
        with self._lock:
            if msg_id not in self._status:
                raise UnknownMessage(msg_id)
            return DeliveryReport(msg_id, dict(self._status[msg_id]))
