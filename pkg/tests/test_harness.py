import json
from decimal import Decimal

import pytest

from openm2m.harness import (
    RunReport,
    Scenario,
    ScenarioInvalid,
    band_causes,
    message_storm,
    run_scenario,
    scenario_from_json,
    txn_mix,
    txn_trial_consistent,
)


def test_empty_scenario_gives_all_zero_report(tmp_path):
    report = run_scenario(Scenario(device_count=0, seed=1),
                          log_path=tmp_path / "run.jsonl")
    assert report.delivered_counts == {}
    assert report.duplicate_count == 0
    assert report.txn_outcome_consistency == "0/0"
    assert report.notification_diff == 0
    assert report.wall_clock == 0.0


def test_same_seed_reports_are_byte_identical(tmp_path):
    scenario = message_storm(5, 40, seed=9, drop_rate=0.2, duplication_rate=0.2)
    first = run_scenario(scenario, log_path=tmp_path / "a.jsonl")
    second = run_scenario(scenario, log_path=tmp_path / "b.jsonl")
    assert first.to_json() == second.to_json()


def test_faulty_storm_has_zero_duplicates(tmp_path):
    report = run_scenario(
        message_storm(8, 60, seed=20260819, duplication_rate=0.3, drop_rate=0.3),
        log_path=tmp_path / "run.jsonl")
    assert report.duplicate_count == 0
    assert sum(report.delivered_counts.values()) == 57  # 3 lost all retries
    assert report.wall_clock == 9.9


def test_clean_storm_delivers_everything(tmp_path):
    report = run_scenario(message_storm(6, 30, seed=4),
                          log_path=tmp_path / "run.jsonl")
    assert report.duplicate_count == 0
    assert sum(report.delivered_counts.values()) == 30


def test_txn_mix_is_always_consistent(tmp_path):
    report = run_scenario(txn_mix(60, seed=11, no_rate=0.25, timeout_rate=0.15),
                          log_path=tmp_path / "run.jsonl")
    assert report.txn_outcome_consistency == "60/60"


def test_band_subscription_matches_oracle(tmp_path):
    scenario = Scenario(device_count=2, seed=3, steps=(
        {"at": 0.0, "action": "subscribe", "device": 0,
         "triple": "temperature", "low": "18", "high": "26"},
        {"at": 1.0, "action": "append", "device": 0,
         "values": {"temperature": "20"}},
        {"at": 2.0, "action": "append", "device": 0,
         "values": {"temperature": "31"}},
        {"at": 3.0, "action": "append", "device": 1,
         "values": {"temperature": "22"}},
        {"at": 4.0, "action": "heartbeat", "device": 1, "deadline": 30},
        {"at": 5.0, "action": "move", "device": 1, "lat": 52.1, "lon": 13.1},
    ))
    report = run_scenario(scenario, log_path=tmp_path / "run.jsonl")
    assert report.notification_diff == 0
    assert report.delivered_counts == {"dev-000": 2, "dev-001": 2}


# -- oracle units ------------------------------------------------------------


def test_band_causes_oracle():
    readings = [Decimal(v) for v in ("20", "25", "27", "30", "22", "15", "19")]
    assert band_causes(readings, Decimal(18), Decimal(26)) == ["above", "below"]
    assert band_causes([], Decimal(0), Decimal(1)) == []


def test_txn_consistency_rule():
    yes = ["yes", "yes"]
    assert txn_trial_consistent(yes, True, [["prepare", "commit"]] * 2)
    # commit without unanimity is inconsistent
    assert not txn_trial_consistent(["yes", "no"], True,
                                    [["prepare", "commit"]] * 2)
    # a participant that saw commit on an aborted trial is inconsistent
    assert not txn_trial_consistent(["yes", "no"], False,
                                    [["prepare", "rollback"],
                                     ["prepare", "commit"]])
    # committed trial where someone missed phase two is inconsistent
    assert not txn_trial_consistent(yes, True,
                                    [["prepare", "commit"], ["prepare"]])
    assert txn_trial_consistent(["timeout"], False, [["prepare", "rollback"]])


# -- validation ---------------------------------------------------------------


def test_scenario_rejects_bad_shapes():
    with pytest.raises(ScenarioInvalid):
        Scenario(device_count=-1, seed=0)
    with pytest.raises(ScenarioInvalid):
        Scenario(device_count=1, seed=0, drop_rate=1.5)
    with pytest.raises(ScenarioInvalid):
        Scenario(device_count=1, seed=0,
                 steps=({"at": 0.0, "action": "explode"},))
    with pytest.raises(ScenarioInvalid):
        Scenario(device_count=1, seed=0,
                 steps=({"at": -1.0, "action": "append", "device": 0},))
    with pytest.raises(ScenarioInvalid):
        message_storm(1, 10)


def test_step_with_unknown_device_fails(tmp_path):
    scenario = Scenario(device_count=1, seed=0, steps=(
        {"at": 0.0, "action": "append", "device": 5, "values": {"x": "1"}},))
    with pytest.raises(ScenarioInvalid):
        run_scenario(scenario, log_path=tmp_path / "run.jsonl")


def test_scenario_from_json_roundtrip():
    scenario = scenario_from_json(json.dumps({
        "deviceCount": 3,
        "seed": 17,
        "faults": {"dropRate": 0.1, "duplicationRate": 0.2,
                   "noRate": 0.05, "timeoutRate": 0.05},
        "steps": [{"at": 0.0, "action": "send", "from": 0, "to": 1}],
    }))
    assert scenario.device_count == 3
    assert scenario.seed == 17
    assert scenario.drop_rate == 0.1
    assert scenario.duplication_rate == 0.2
    assert len(scenario.steps) == 1


def test_scenario_from_json_rejects_junk():
    with pytest.raises(ScenarioInvalid):
        scenario_from_json(b"not json {")
    with pytest.raises(ScenarioInvalid):
        scenario_from_json(b"[1, 2]")
    with pytest.raises(ScenarioInvalid):
        scenario_from_json(json.dumps({"seed": 1}))  # no deviceCount


def test_report_json_is_sorted_and_stable():
    report = RunReport({"b": 2, "a": 1}, 0, "3/3", 0, 1.5)
    doc = json.loads(report.to_json())
    assert list(doc["deliveredCounts"]) == ["a", "b"]
    assert doc["wallClock"] == 1.5
