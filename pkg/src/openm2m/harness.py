"""Simulated device fleet and scenario runner.

A scenario is a timed script for a fleet of devices talking to one
in-process gateway on a virtual clock: readings, messages, heartbeats,
movement, transaction trials.  Faults (message drop and duplication,
participant misbehavior) are injected from the scenario's seed, so a run
is fully deterministic and two runs of the same scenario produce
byte-identical reports.

The report's numbers come from oracles that live here, not in the code
under test: devices keep their own receive journals (a message listed
twice is a duplicate, whatever the broker claims), transaction trials
are checked against a from-scratch consistency rule, and notification
sequences are compared with a stateful replay of the band rule.
"""

from __future__ import annotations

import json
import random
import tempfile
import uuid
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable

from .broker import FaultyChannel
from .gateway import GatewayCore, HttpRequest
from .model import canonical_number
from .runtime import VirtualClock, VirtualScheduler
from .txn import VoteTimeout

VOTES = ("yes", "no", "timeout")
_ACTIONS = ("append", "send", "heartbeat", "move", "subscribe", "txn")

# confirmed delivery gives up 3.5 virtual seconds after a send; draining
# a little past that settles every retry and expiry timer
_DRAIN_SECONDS = 4.0
_DRAIN_STEP = 0.5


class ScenarioInvalid(Exception):
    pass


class GatewayUnreachable(Exception):
    pass


@dataclass(frozen=True)
class Scenario:
    device_count: int
    seed: int
    steps: tuple[dict, ...] = ()
    drop_rate: float = 0.0
    duplication_rate: float = 0.0
    no_rate: float = 0.0
    timeout_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.device_count < 0:
            raise ScenarioInvalid("deviceCount must be >= 0")
        for rate in (self.drop_rate, self.duplication_rate,
                     self.no_rate, self.timeout_rate):
            if not 0.0 <= rate <= 1.0:
                raise ScenarioInvalid(f"fault rates must be in [0, 1], got {rate}")
        object.__setattr__(self, "steps", tuple(self.steps))
        for step in self.steps:
            if step.get("action") not in _ACTIONS:
                raise ScenarioInvalid(f"unknown action in step {step!r}")
            if not isinstance(step.get("at"), (int, float, Decimal)) \
                    or step["at"] < 0:
                raise ScenarioInvalid(f"step needs a non-negative time: {step!r}")


def scenario_from_json(text: str | bytes) -> Scenario:
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise ScenarioInvalid(f"scenario is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioInvalid("scenario must be a JSON object")
    faults = doc.get("faults", {})
    if not isinstance(faults, dict):
        raise ScenarioInvalid("faults must be an object")
    try:
        return Scenario(
            device_count=int(doc["deviceCount"]),
            seed=int(doc.get("seed", 0)),
            steps=tuple(doc.get("steps", [])),
            drop_rate=float(faults.get("dropRate", 0.0)),
            duplication_rate=float(faults.get("duplicationRate", 0.0)),
            no_rate=float(faults.get("noRate", 0.0)),
            timeout_rate=float(faults.get("timeoutRate", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioInvalid(f"bad scenario: {exc}") from None


@dataclass(frozen=True)
class RunReport:
    delivered_counts: dict[str, int]
    duplicate_count: int
    txn_outcome_consistency: str
    notification_diff: int
    wall_clock: float

    def to_json(self) -> str:
        return json.dumps({
            "deliveredCounts": {k: self.delivered_counts[k]
                                for k in sorted(self.delivered_counts)},
            "duplicateCount": self.duplicate_count,
            "txnOutcomeConsistency": self.txn_outcome_consistency,
            "notificationDiff": self.notification_diff,
            "wallClock": self.wall_clock,
        }, sort_keys=True, indent=2)


def device_name(index: int) -> str:
    return f"dev-{index:03d}"


# -- test-side oracles (never the code paths under test) --------------------


def band_causes(readings: Iterable[Decimal], low: Decimal,
                high: Decimal) -> list[str]:
    """Stateful replay of the band rule: fire on leaving the band, stay
    silent inside it and on re-entry."""
    state = "inside"
    fired = []
    for value in readings:
        now = "below" if value < low else "above" if value > high else "inside"
        if now != state:
            state = now
            if now != "inside":
                fired.append(now)
    return fired


def txn_trial_consistent(votes: list[str], committed: bool,
                         journals: list[list[str]]) -> bool:
    """One trial holds if the outcome matches the votes and every
    participant saw exactly the phase-two calls that outcome implies."""
    if committed != all(v == "yes" for v in votes):
        return False
    for journal in journals:
        second_phase = [p for p in journal if p in ("commit", "rollback")]
        if committed and second_phase != ["commit"]:
            return False
        if not committed and "commit" in second_phase:
            return False
        if not committed and len(second_phase) > 1:
            return False
    return True


class _Device:
    """Harness-side device: keeps its own receive journal so duplicate
    detection never trusts broker bookkeeping."""

    def __init__(self, name: str) -> None:
        self.name = name
        self.listings: Counter[str] = Counter()

    def poll(self, core: GatewayCore) -> None:
        response = core.route(HttpRequest(
            "GET", f"/objects/{self.name}/pending"))
        if response.status != 200:
            raise GatewayUnreachable(response.body.decode())
        for message in json.loads(response.body)["messages"]:
            self.listings[message["msgId"]] += 1
            core.route(HttpRequest(
                "POST", f"/messages/{message['msgId']}/ack",
                body=json.dumps({"recipient": self.name}).encode()))

    @property
    def delivered(self) -> int:
        return len(self.listings)

    @property
    def duplicates(self) -> int:
        return sum(n - 1 for n in self.listings.values() if n > 1)


class _ScriptedParticipant:
    def __init__(self, vote: str) -> None:
        self.vote = vote
        self.journal: list[str] = []

    def __call__(self, doc: dict) -> dict:
        phase = doc.get("phase")
        self.journal.append(phase)
        if phase == "prepare":
            if self.vote == "timeout":
                raise VoteTimeout("scripted")
            return {"vote": self.vote}
        return {"ok": True}


def run_scenario(scenario: Scenario, log_path=None) -> RunReport:
    rng = random.Random(scenario.seed)
    if log_path is None:
        log_path = Path(tempfile.mkdtemp(prefix="openm2m-run-")) / "events.jsonl"

    clock = VirtualClock()
    scheduler = VirtualScheduler(clock)
    notifications: dict[str, list[str]] = {}

    def deliverer(url: str, body: bytes) -> bool:
        doc = json.loads(body.decode())
        notifications.setdefault(doc["subId"], []).append(doc["cause"])
        return True

    channel = FaultyChannel(rng, drop_rate=scenario.drop_rate,
                            duplicate_rate=scenario.duplication_rate)
    core = GatewayCore(log_path, clock=clock, scheduler=scheduler,
                       channel=channel, deliverer=deliverer, fsync=False,
                       charge_per_message=0, charge_per_event=0)
    try:
        return _execute(scenario, core, rng, notifications)
    finally:
        core.close()


def _execute(scenario: Scenario, core: GatewayCore, rng: random.Random,
             notifications: dict[str, list[str]]) -> RunReport:
    scheduler = core.scheduler
    devices = [_Device(device_name(i)) for i in range(scenario.device_count)]
    for device in devices:
        response = core.route(HttpRequest(
            "POST", "/objects",
            body=json.dumps({"objectId": device.name}).encode()))
        if response.status != 200:
            raise GatewayUnreachable(response.body.decode())
    by_name = {d.name: d for d in devices}

    group_id = None
    if devices and any(s.get("action") == "send" and s.get("group")
                       for s in scenario.steps):
        response = core.route(HttpRequest(
            "POST", "/groups",
            body=json.dumps({"members": [d.name for d in devices]}).encode()))
        group_id = json.loads(response.body)["groupId"]

    # per-subscription oracle inputs, in harness step order
    sub_watch: dict[str, tuple[str, Decimal, Decimal]] = {}
    readings: list[tuple[str, Decimal]] = []
    trials: list[tuple[list[str], bool, list[list[str]]]] = []
    confirmed_recipients: set[str] = set()

    def device_at(step: dict, key: str) -> _Device:
        index = step.get(key)
        if not isinstance(index, int) or not 0 <= index < len(devices):
            raise ScenarioInvalid(f"step {step!r} names no device in {key!r}")
        return devices[index]

    for index, step in sorted(enumerate(scenario.steps),
                              key=lambda pair: (pair[1]["at"], pair[0])):
        due = float(step["at"])
        if due > core.clock.elapsed():
            scheduler.advance(due - core.clock.elapsed())
        action = step["action"]

        if action == "append":
            device = device_at(step, "device")
            values = step.get("values") or {}
            triples = [{"name": name, "type": "number",
                        "value": canonical_number(value)}
                       for name, value in sorted(values.items())]
            doc = {"elementId": str(uuid.uuid4()), "triples": triples,
                   "metadata": [], "entityId": device.name,
                   "entityType": "Device"}
            body = json.dumps({"sender": device.name, "mode": "single",
                               "target": device.name, "payload": doc}).encode()
            # self-addressed unconfirmed note: the cheapest way to put a
            # reading on the wire through the public surface
            core.route(HttpRequest("POST", "/messages", body=body))
            device.poll(core)
            for name, value in sorted(values.items()):
                readings.append((name, Decimal(canonical_number(value))))

        elif action == "send":
            sender = device_at(step, "from")
            delivery_class = step.get("class", "confirmed")
            if step.get("group"):
                target, mode = group_id, "group"
            else:
                recipient = device_at(step, "to")
                target, mode = recipient.name, "single"
            payload = {"elementId": str(uuid.uuid4()),
                       "triples": [{"name": "note", "type": "string",
                                    "value": f"step-{index}"}],
                       "metadata": []}
            body = json.dumps({"sender": sender.name, "mode": mode,
                               "target": target, "payload": payload,
                               "deliveryClass": delivery_class}).encode()
            response = core.route(HttpRequest("POST", "/messages", body=body))
            if response.status != 200:
                raise GatewayUnreachable(response.body.decode())
            for name in json.loads(response.body)["perRecipient"]:
                if name in by_name:
                    confirmed_recipients.add(name)
                    by_name[name].poll(core)

        elif action == "heartbeat":
            device = device_at(step, "device")
            core.route(HttpRequest(
                "POST", f"/objects/{device.name}/heartbeat",
                body=json.dumps({"deadline": step.get("deadline", 30)}).encode()))

        elif action == "move":
            device = device_at(step, "device")
            doc = {"elementId": str(uuid.uuid4()),
                   "triples": [
                       {"name": "lat", "type": "number",
                        "value": canonical_number(step["lat"])},
                       {"name": "lon", "type": "number",
                        "value": canonical_number(step["lon"])}],
                   "metadata": [], "entityId": device.name,
                   "entityType": "Device"}
            body = json.dumps({"sender": device.name, "mode": "single",
                               "target": device.name, "payload": doc}).encode()
            core.route(HttpRequest("POST", "/messages", body=body))
            device.poll(core)

        elif action == "subscribe":
            device = device_at(step, "device")
            low = Decimal(str(step["low"]))
            high = Decimal(str(step["high"]))
            body = json.dumps({
                "subscriber": f"harness://{device.name}",
                "target": device.name,
                "predicate": {"kind": "band", "tripleName": step["triple"],
                              "low": str(low), "high": str(high)},
            }).encode()
            response = core.route(HttpRequest("POST", "/subscriptions", body=body))
            if response.status != 200:
                raise ScenarioInvalid(response.body.decode())
            sub_id = json.loads(response.body)["subId"]
            sub_watch[sub_id] = (step["triple"], low, high)

        elif action == "txn":
            votes = step.get("votes")
            if votes is None:
                count = step.get("participants", 3)
                votes = [_draw_vote(rng, scenario) for _ in range(count)]
            participants = [_ScriptedParticipant(v) for v in votes]
            txn_id = core.coordinator.begin()
            for participant in participants:
                core.coordinator.enlist(txn_id, participant)
            outcome = core.coordinator.commit(txn_id, prepare_timeout=0.05)
            trials.append((list(votes), outcome.committed,
                           [p.journal for p in participants]))

    # settle every outstanding retry, expiry and deadline timer
    if confirmed_recipients:
        drained = 0.0
        while drained < _DRAIN_SECONDS:
            scheduler.advance(_DRAIN_STEP)
            drained += _DRAIN_STEP
            for name in sorted(confirmed_recipients):
                by_name[name].poll(core)
    scheduler.run_all()
    for device in devices:
        device.poll(core)

    consistent = sum(
        1 for votes, committed, journals in trials
        if txn_trial_consistent(votes, committed, journals))
    diff = 0
    for sub_id, (triple_name, low, high) in sub_watch.items():
        expected = band_causes(
            (v for name, v in readings if name == triple_name), low, high)
        if notifications.get(sub_id, []) != expected:
            diff += 1

    return RunReport(
        delivered_counts={d.name: d.delivered for d in devices if d.delivered},
        duplicate_count=sum(d.duplicates for d in devices),
        txn_outcome_consistency=f"{consistent}/{len(trials)}",
        notification_diff=diff,
        wall_clock=core.clock.elapsed(),
    )


def _draw_vote(rng: random.Random, scenario: Scenario) -> str:
    roll = rng.random()
    if roll < scenario.no_rate:
        return "no"
    if roll < scenario.no_rate + scenario.timeout_rate:
        return "timeout"
    return "yes"


# -- canned scenarios --------------------------------------------------------


def message_storm(device_count: int, messages: int, *, seed: int = 0,
                  duplication_rate: float = 0.0,
                  drop_rate: float = 0.0) -> Scenario:
    """Random confirmed unicasts across the fleet, tightly spaced so the
    retransmission windows overlap."""
    if device_count < 2:
        raise ScenarioInvalid("a message storm needs at least two devices")
    rng = random.Random(seed)
    steps = []
    for i in range(messages):
        sender = rng.randrange(device_count)
        recipient = rng.randrange(device_count - 1)
        if recipient >= sender:
            recipient += 1
        steps.append({"at": round(i * 0.1, 1), "action": "send",
                      "from": sender, "to": recipient, "class": "confirmed"})
    return Scenario(device_count=device_count, seed=seed, steps=tuple(steps),
                    duplication_rate=duplication_rate, drop_rate=drop_rate)


def txn_mix(trials: int, *, seed: int = 0, participants: int = 3,
            no_rate: float = 0.2, timeout_rate: float = 0.1) -> Scenario:
    steps = tuple({"at": float(i), "action": "txn", "participants": participants}
                  for i in range(trials))
    return Scenario(device_count=0, seed=seed, steps=steps,
                    no_rate=no_rate, timeout_rate=timeout_rate)
