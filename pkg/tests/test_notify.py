import json
import random
from decimal import Decimal

import pytest

from openm2m.codec import element_from_json_obj, parse_om_observation
from openm2m.model import Triple, element_digest, make_data_element, promote_to_context
from openm2m.notify import (
    Alarm,
    BadPredicate,
    Band,
    Geofence,
    GroupChange,
    NotifyEngine,
    Presence,
    UnknownObject,
    UnknownSub,
)
from openm2m.runtime import VirtualClock, VirtualScheduler
from openm2m.store import EventStore


class CollectingDeliverer:
    def __init__(self, fail_first=0):
        self.calls = []
        self.fail_first = fail_first

    def __call__(self, url, body):
        self.calls.append((url, body))
        if self.fail_first > 0:
            self.fail_first -= 1
            return False
        return True

    def notifications(self, sub_id=None):
        out = [json.loads(body) for _, body in self.calls]
        if sub_id is not None:
            out = [n for n in out if n["subId"] == sub_id]
        return out


class Env:
    def __init__(self, tmp_path, directory=None):
        self.store = EventStore(tmp_path / "events.jsonl", fsync=False)
        self.clock = VirtualClock()
        self.sched = VirtualScheduler(self.clock)
        self.deliverer = CollectingDeliverer()
        self.groups = {}
        self.engine = NotifyEngine(
            self.store,
            directory=directory,
            group_resolver=self.groups.get,
            clock=self.clock,
            scheduler=self.sched,
            deliverer=self.deliverer,
        )
        self.engine.attach()

    def reading(self, entity_id, **values):
        triples = [Triple(k, "number", v) for k, v in values.items()]
        return self.store.append(
            promote_to_context(make_data_element(triples), entity_id, "Device"))


@pytest.fixture
def env(tmp_path):
    return Env(tmp_path)


def band_oracle(readings, low, high):
    """Independent stateful replay of the documented band rule."""
    state = "inside"
    fires = []
    for r in readings:
        now = "below" if r < low else "above" if r > high else "inside"
        if now != state:
            state = now
            if now != "inside":
                fires.append(now)
    return fires


def test_band_rejects_bad_bounds():
    with pytest.raises(BadPredicate):
        Band("value", 20, 10)
    with pytest.raises(BadPredicate):
        Band("value", 10, 10)


def test_band_spec_sequence(env):
    sub = env.engine.subscribe("http://cb/1", "gw", "sensor-1", Band("value", 10, 20))
    events = {}
    for r in (15, 25, 27, 18):
        events[r] = env.reading("sensor-1", value=r)
    fired = env.deliverer.notifications(sub)
    assert [n["cause"] for n in fired] == ["above"]
    assert fired[0]["evidence"]["seq"] == events[25].sequence_no


def test_band_inside_om_reading(env, golden_observation):
    element = parse_om_observation(golden_observation)
    sub = env.engine.subscribe(
        "http://cb/1", "gw", element.entity_id, Band("value", "22.0", "23.0"))
    env.store.append(element)
    assert env.deliverer.notifications(sub) == []


def test_band_random_walks_match_oracle(env):
    rng = random.Random(41)
    for walk in range(20):
        target = f"sensor-{walk}"
        sub = env.engine.subscribe("http://cb/1", "gw", target, Band("value", 10, 20))
        readings = [Decimal(rng.randint(-50, 500)) / 10 for _ in range(30)]
        for r in readings:
            env.reading(target, value=r)
        got = [n["cause"] for n in env.deliverer.notifications(sub)]
        assert got == band_oracle(readings, Decimal(10), Decimal(20))
        env.engine.unsubscribe(sub)


def test_unsubscribe_stops_notifications(env):
    sub = env.engine.subscribe("http://cb/1", "gw", "s", Band("value", 10, 20))
    env.engine.unsubscribe(sub)
    env.reading("s", value=99)
    assert env.deliverer.notifications(sub) == []
    with pytest.raises(UnknownSub):
        env.engine.unsubscribe(sub)


def test_duplicate_subscriptions_fire_separately(env):
    a = env.engine.subscribe("http://cb/1", "gw", "s", Band("value", 10, 20))
    b = env.engine.subscribe("http://cb/1", "gw", "s", Band("value", 10, 20))
    assert a != b
    env.reading("s", value=25)
    assert len(env.deliverer.notifications(a)) == 1
    assert len(env.deliverer.notifications(b)) == 1


def test_alarm_fires_on_every_true(env):
    sub = env.engine.subscribe("http://cb/1", "gw", "door-1", Alarm("tamper"))
    for flag in (True, True, False, True):
        env.store.append(promote_to_context(
            make_data_element([Triple("tamper", "boolean", flag)]),
            "door-1", "Device"))
    fired = env.deliverer.notifications(sub)
    assert [n["cause"] for n in fired] == ["alarm", "alarm", "alarm"]


def test_geofence_requires_one_geometry():
    with pytest.raises(BadPredicate):
        Geofence("a1")
    with pytest.raises(BadPredicate):
        Geofence("a1", circle=(0, 0, 10), polygon=((0, 0), (0, 1), (1, 0)))
    with pytest.raises(BadPredicate):
        Geofence("a1", polygon=((0, 0), (0, 1)))
    with pytest.raises(BadPredicate):
        Geofence("a1", circle=(0, 0, -5))


def test_geofence_circle_enter_leave(env):
    fence = Geofence("plant", circle=(52.0, 13.0, 500.0))
    sub = env.engine.subscribe("http://cb/1", "gw", "truck-1", fence)
    env.reading("truck-1", lat=52.1, lon=13.1)       # ~13 km away
    env.reading("truck-1", lat=52.001, lon=13.0)     # ~111 m away
    env.reading("truck-1", lat=52.002, lon=13.001)   # still inside
    env.reading("truck-1", lat=52.2, lon=13.0)       # gone
    fired = env.deliverer.notifications(sub)
    assert [n["cause"] for n in fired] == ["enter", "leave"]


def test_geofence_polygon_winding(env):
    square = Geofence("yard", polygon=((0.0, 0.0), (0.0, 10.0), (10.0, 10.0), (10.0, 0.0)))
    sub = env.engine.subscribe("http://cb/1", "gw", "bot-1", square)
    env.reading("bot-1", lat=5, lon=5)
    env.reading("bot-1", lat=11, lon=5)
    env.reading("bot-1", lat="9.999", lon="0.001")
    fired = env.deliverer.notifications(sub)
    assert [n["cause"] for n in fired] == ["enter", "leave", "enter"]


def test_group_change_deltas(env):
    env.groups["g1"] = {"a"}
    sub = env.engine.subscribe("http://cb/1", "gw", "g1", GroupChange("g1"))
    env.reading("x", value=1)
    assert env.deliverer.notifications(sub) == []

    env.groups["g1"] = {"a", "b"}
    env.reading("x", value=2)
    assert [n["cause"] for n in env.deliverer.notifications(sub)] == ["enter"]

    env.groups["g1"] = {"b"}
    env.reading("x", value=3)
    assert [n["cause"] for n in env.deliverer.notifications(sub)] == ["enter", "leave"]


def test_presence_explicit_transitions(env):
    sub = env.engine.subscribe("http://cb/1", "gw", "dev-1", Presence("dev-1"))
    env.engine.presence_update("dev-1", "online")
    env.engine.presence_update("dev-1", "offline")
    fired = env.deliverer.notifications(sub)
    assert [n["cause"] for n in fired] == ["online", "offline"]


def test_presence_repeat_status_is_silent(env):
    sub = env.engine.subscribe("http://cb/1", "gw", "dev-1", Presence("dev-1"))
    env.engine.presence_update("dev-1", "online")
    env.engine.presence_update("dev-1", "online")
    assert [n["cause"] for n in env.deliverer.notifications(sub)] == ["online"]


def test_presence_deadline_expiry(env):
    sub = env.engine.subscribe("http://cb/1", "gw", "dev-1", Presence("dev-1"))
    env.engine.presence_update("dev-1", "online", heartbeat_deadline=10)
    env.sched.advance(5)
    env.engine.presence_update("dev-1", "online", heartbeat_deadline=10)
    env.sched.advance(8)  # first deadline passes, but a heartbeat arrived
    assert env.engine.presence_status("dev-1") == "online"
    env.sched.advance(5)  # second deadline passes with no heartbeat
    assert env.engine.presence_status("dev-1") == "offline"
    fired = env.deliverer.notifications(sub)
    assert [n["cause"] for n in fired] == ["online", "offline"]


def test_presence_heartbeats_keep_object_online(env):
    sub = env.engine.subscribe("http://cb/1", "gw", "dev-1", Presence("dev-1"))
    for _ in range(10):
        env.engine.presence_update("dev-1", "online", heartbeat_deadline=10)
        env.sched.advance(5)
    assert env.engine.presence_status("dev-1") == "online"
    assert [n["cause"] for n in env.deliverer.notifications(sub)] == ["online"]


def test_presence_unknown_object(tmp_path):
    class NoDirectory:
        def object_exists(self, object_id):
            return False

    env = Env(tmp_path, directory=NoDirectory())
    with pytest.raises(UnknownObject):
        env.engine.presence_update("ghost", "online")


def test_evidence_exists_at_or_before_notification(env):
    sub = env.engine.subscribe("http://cb/1", "gw", "s", Band("value", 10, 20))
    for r in (25, 15, 30, 5):
        env.reading("s", value=r)
    by_seq = {e.sequence_no: e for e in env.store.events()}
    fired = env.deliverer.notifications(sub)
    assert fired
    for n in fired:
        seq = n["evidence"]["seq"]
        assert seq <= env.store.last_seq()
        assert by_seq[seq].event_id == n["evidence"]["eventId"]


def test_callback_body_shape_and_element_fidelity(env):
    sub = env.engine.subscribe("http://cb/1", "gw", "s", Band("value", 10, 20))
    event = env.reading("s", value="99.250")
    url, body = env.deliverer.calls[-1]
    assert url == "http://cb/1"
    doc = json.loads(body.decode("utf-8"), parse_float=Decimal)
    assert sorted(doc) == ["cause", "evidence", "firedAt", "subId"]
    assert doc["subId"] == sub
    element = element_from_json_obj(doc["evidence"]["element"])
    assert element_digest(element) == element_digest(event.element)


def test_failed_delivery_retries_then_succeeds(env):
    env.deliverer.fail_first = 2
    env.engine.subscribe("http://cb/1", "gw", "s", Band("value", 10, 20))
    env.reading("s", value=25)
    assert len(env.deliverer.calls) == 1
    env.sched.run_all()
    assert len(env.deliverer.calls) == 3
    assert env.clock.elapsed() == pytest.approx(1.5)
    env.reading("s", value=26)
    env.sched.run_all()
    assert len(env.deliverer.calls) == 3  # still above: no transition, no send


def test_restart_rebuilds_predicate_state(tmp_path):
    env = Env(tmp_path)
    sub = env.engine.subscribe("http://cb/1", "gw", "s", Band("value", 10, 20))
    env.reading("s", value=15)
    env.reading("s", value=25)
    assert [n["cause"] for n in env.deliverer.notifications(sub)] == ["above"]
    env.engine.close()

    env2 = Env(tmp_path)
    env2.reading("s", value=27)   # still above: must stay silent
    env2.reading("s", value=18)   # re-entry: silent
    env2.reading("s", value=30)   # new exit: fires
    fired = env2.deliverer.notifications(sub)
    assert [n["cause"] for n in fired] == ["above"]
    assert fired[0]["evidence"]["element"]["triples"][0]["value"] == 30
