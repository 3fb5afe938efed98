"""Two-phase commit coordinator keyed by 32-hex transaction ids.

Participants are handles: callables taking one JSON-shaped dict
(``{"txnId": …, "phase": "prepare"|"commit"|"rollback"}``) and returning
the reply dict (``{"vote": "yes"|"no"}`` for prepare).  The coordinator
persists every state change as an administrative context element, so a
restarted coordinator resolves transactions it finds half-done: anything
still ``preparing`` is presumed aborted.
"""

from __future__ import annotations

import re
import secrets
import threading
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .model import ContextElement, Triple, make_data_element, promote_to_context
from .store import EventStore, Filter

_TXN_ID_RE = re.compile(r"^[0-9A-F]{32}$")

Participant = Callable[[dict], dict]

TXN_ENTITY_TYPE = "m2m:Txn"

OPEN = "open"
PREPARING = "preparing"
COMMITTED = "committed"
ABORTED = "aborted"


class TxnError(Exception):
    pass


class UnknownTxn(TxnError):
    pass


class TxnClosed(TxnError):
    pass


class AlreadyCommitted(TxnError):
    pass


class VoteTimeout(Exception):
    """Raised by a participant to stand in for a missed prepare deadline."""


class CoordinatorCrash(Exception):
    """Raised by a fault hook to kill the coordinator at a chosen point."""


@dataclass(frozen=True)
class Outcome:
    state: str
    reason: str | None = None

    @property
    def committed(self) -> bool:
        return self.state == COMMITTED


@dataclass
class TransactionRecord:
    txn_id: str
    state: str = OPEN
    participants: list[Participant] = field(default_factory=list)
    decisions: dict[Participant, str] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)


def new_txn_id() -> str:
    return secrets.token_hex(16).upper()


def _txn_element(txn_id: str, state: str, reason: str | None = None) -> ContextElement:
    triples = [Triple("txnId", "string", txn_id), Triple("state", "string", state)]
    if reason is not None:
        triples.append(Triple("reason", "string", reason))
    return promote_to_context(
        make_data_element(triples), entity_id=txn_id, entity_type=TXN_ENTITY_TYPE
    )


class Coordinator:
    """Serializes each transaction's state machine; fans prepares out in
    parallel and joins them against one deadline."""

    def __init__(
        self,
        store: EventStore,
        *,
        prepare_timeout: float = 2.0,
        executor: ThreadPoolExecutor | None = None,
        fault_hook: Callable[[str, str], None] | None = None,
    ) -> None:
        self._store = store
        self._prepare_timeout = prepare_timeout
        self._executor = executor or ThreadPoolExecutor(max_workers=16)
        self._owns_executor = executor is None
        self._fault_hook = fault_hook or (lambda point, txn_id: None)
        self._records: dict[str, TransactionRecord] = {}
        self._records_lock = threading.Lock()
        self._recover()

    # -- lifecycle ------------------------------------------------------

    def _recover(self) -> None:
        states: dict[str, str] = {}
        for event in self._store.query(Filter(entity_type=TXN_ENTITY_TYPE)):
            element = event.element
            states[element.entity_id] = element.triple("state").value
        for txn_id, state in states.items():
            if state == PREPARING:
                state = ABORTED
                self._store.append(_txn_element(txn_id, ABORTED, "presumed abort"))
            self._records[txn_id] = TransactionRecord(txn_id, state=state)

    def close(self) -> None:
        if self._owns_executor:
            self._executor.shutdown(wait=False)

    # -- operations -----------------------------------------------------

    def begin(self, txn_id: str | None = None) -> str:
        """Open a transaction; an explicit id adopts one minted elsewhere."""
        txn_id = txn_id or new_txn_id()
        if not _TXN_ID_RE.match(txn_id):
            raise TxnError(f"transaction id must be 32 uppercase hex: {txn_id!r}")
        with self._records_lock:
            if txn_id in self._records:
                return txn_id
            self._records[txn_id] = TransactionRecord(txn_id)
        self._store.append(_txn_element(txn_id, OPEN))
        return txn_id

    def _record(self, txn_id: str) -> TransactionRecord:
        with self._records_lock:
            rec = self._records.get(txn_id)
        if rec is None:
            raise UnknownTxn(txn_id)
        return rec

    def state(self, txn_id: str) -> str:
        return self._record(txn_id).state

    def decisions(self, txn_id: str) -> Mapping[Participant, str]:
        return dict(self._record(txn_id).decisions)

    def participant_count(self, txn_id: str) -> int:
        return len(self._record(txn_id).participants)

    def enlist(self, txn_id: str, participant: Participant) -> None:
        rec = self._record(txn_id)
        with rec.lock:
            if rec.state != OPEN:
                raise TxnClosed(f"{txn_id} is {rec.state}")
            if participant not in rec.participants:
                rec.participants.append(participant)

    def commit(self, txn_id: str, prepare_timeout: float | None = None) -> Outcome:
        rec = self._record(txn_id)
        timeout = self._prepare_timeout if prepare_timeout is None else prepare_timeout
        with rec.lock:
            if rec.state != OPEN:
                raise TxnClosed(f"{txn_id} is {rec.state}")
            rec.state = PREPARING
            self._store.append(_txn_element(txn_id, PREPARING))
            self._fault_hook("preparing-persisted", txn_id)

            rec.decisions = self._gather_votes(txn_id, rec.participants, timeout)
            votes = set(rec.decisions.values())
            if votes <= {"yes"} and len(rec.decisions) == len(rec.participants):
                outcome = Outcome(COMMITTED)
            else:
                bad = sorted(v for v in votes if v != "yes")
                outcome = Outcome(ABORTED, reason=f"votes: {','.join(bad)}")

            rec.state = outcome.state
            self._store.append(_txn_element(txn_id, outcome.state, outcome.reason))
            self._fault_hook("decided-persisted", txn_id)

            phase = "commit" if outcome.committed else "rollback"
            self._notify(txn_id, rec.participants, phase)
            return outcome

    def abort(self, txn_id: str) -> None:
        rec = self._record(txn_id)
        with rec.lock:
            if rec.state == COMMITTED:
                raise AlreadyCommitted(txn_id)
            if rec.state == ABORTED:
                return
            rec.state = ABORTED
            self._store.append(_txn_element(txn_id, ABORTED, "abort requested"))
            self._notify(txn_id, rec.participants, "rollback")

    # -- phases ---------------------------------------------------------

    def _gather_votes(
        self, txn_id: str, participants: list[Participant], timeout: float
    ) -> dict[Participant, str]:
        doc = {"txnId": txn_id, "phase": "prepare"}
        futures = {
            self._executor.submit(p, dict(doc)): p for p in participants
        }
        done, not_done = wait(futures, timeout=timeout)
        decisions: dict[Participant, str] = {}
        for future in not_done:
            future.cancel()
            decisions[futures[future]] = "timeout"
        for future in done:
            participant = futures[future]
            try:
                reply = future.result()
            except VoteTimeout:
                decisions[participant] = "timeout"
            except Exception:
                decisions[participant] = "no"
            else:
                vote = reply.get("vote") if isinstance(reply, dict) else None
                decisions[participant] = "yes" if vote == "yes" else "no"
        return decisions

    def _notify(self, txn_id: str, participants: list[Participant], phase: str) -> None:
        # The decision is already durable; a participant that errors here
        # simply misses the notification and cannot change the outcome.
        doc = {"txnId": txn_id, "phase": phase}
        for participant in participants:
            try:
                participant(dict(doc))
            except Exception:
                pass
