import hashlib
import json
import urllib.request

import pytest

from openm2m.cli import main
from openm2m.gateway import GatewayCore
from openm2m.httpd import serve_background


def test_replay_on_empty_log_is_all_zero(tmp_path, capsys):
    log = tmp_path / "empty.jsonl"
    log.write_text("")
    assert main(["replay", str(log)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats == {"events": 0, "lastSeq": 0, "elements": 0,
                     "entities": 0, "digest": stats["digest"]}
    assert len(stats["digest"]) == 64


def test_ingest_prints_stored_element(tmp_path, capsys, golden_observation):
    om = tmp_path / "obs.xml"
    om.write_bytes(golden_observation)
    log = tmp_path / "events.jsonl"

    assert main(["ingest", str(om), "--log-path", str(log)]) == 0
    out = capsys.readouterr().out
    assert '"value":22.3' in out
    assert json.loads(out)["seq"] == 1

    assert main(["ingest", str(om), "--log-path", str(log),
                 "--format", "text"]) == 0
    out = capsys.readouterr().out
    assert "seq 2" in out
    assert "value = 22.3" in out

    assert main(["replay", str(log)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["events"] == 2
    assert stats["entities"] == 1  # both observations describe ot1


def test_run_is_deterministic_across_invocations(tmp_path, capsys):
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps({
        "deviceCount": 4,
        "seed": 21,
        "faults": {"dropRate": 0.2, "duplicationRate": 0.2},
        "steps": [{"at": round(i * 0.1, 1), "action": "send",
                   "from": i % 4, "to": (i + 1) % 4, "class": "confirmed"}
                  for i in range(25)],
    }))
    assert main(["run", str(scenario)]) == 0
    first = capsys.readouterr().out
    assert main(["run", str(scenario)]) == 0
    assert capsys.readouterr().out == first
    assert json.loads(first)["duplicateCount"] == 0

    assert main(["run", str(scenario), "--format", "text"]) == 0
    text = capsys.readouterr().out
    assert "duplicates: 0" in text


def test_run_seed_override_changes_on_fault_paths(tmp_path, capsys):
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps({
        "deviceCount": 2, "seed": 1,
        "steps": [{"at": 0.0, "action": "txn", "participants": 2}],
        "faults": {"noRate": 1.0},
    }))
    assert main(["run", str(scenario), "--seed", "5"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["txnOutcomeConsistency"] == "1/1"


def test_bad_inputs_exit_nonzero(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.json")]) == 1
    assert "error:" in capsys.readouterr().err

    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["run", str(bad)]) == 1

    om = tmp_path / "junk.xml"
    om.write_bytes(b"<not-om/>")
    assert main(["ingest", str(om), "--log-path", str(tmp_path / "l.jsonl")]) == 1

    with pytest.raises(SystemExit):
        main(["no-such-command"])
    with pytest.raises(SystemExit):
        main(["run"])  # scenario file is required


def test_http_server_end_to_end(tmp_path, golden_observation):
    core = GatewayCore(tmp_path / "events.jsonl", fsync=False)
    server, thread = serve_background(core)
    host, port = server.server_address
    base = f"http://{host}:{port}"
    try:
        request = urllib.request.Request(
            f"{base}/observations", data=golden_observation,
            headers={"Content-Type": "application/xml"}, method="POST")
        with urllib.request.urlopen(request) as response:
            assert response.status == 200
            assert response.headers["Access-Control-Allow-Origin"] == "*"
            stored = json.loads(response.read())

        with urllib.request.urlopen(
                f"{base}/elements/{stored['elementId']}") as response:
            body = response.read()
            assert b'"value":22.3' in body
        with urllib.request.urlopen(
                f"{base}/elements/{stored['elementId']}/digest") as response:
            digest = json.loads(response.read())["digest"]
        assert hashlib.sha256(body).hexdigest() == digest

        preflight = urllib.request.Request(f"{base}/anything", method="OPTIONS")
        with urllib.request.urlopen(preflight) as response:
            assert response.status == 204
    finally:
        server.shutdown()
        server.server_close()
        core.close()
        thread.join(timeout=5)
