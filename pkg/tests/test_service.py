import json
import threading
import time

import pytest
from fastapi.testclient import TestClient

from kgrag.actions import RetrievalAction, execute
from kgrag.graph import dump_qa_dataset, sample_to_row
from kgrag.service import ServiceClient, ServiceConfig, create_app, swap_backend


@pytest.fixture
def client(chicago_sample, synth25):
    app = create_app([chicago_sample] + synth25[:3])
    with TestClient(app) as tc:
        yield tc


def post(client, **body):
    return client.post("/retrieve", json=body)


def test_retrieve_ok(client):
    r = post(client, sample_id="q1", action_name="get_tail_entities", args=["Chicago", "location.location.containedby"])
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok"
    assert body["result_labels"] == ["Illinois"]
    assert body["rendered_text"] == 'Tail entities for relation "location.location.containedby" with head "Chicago": Illinois'


def test_error_bodies(client):
    r = post(client, sample_id="nope", action_name="get_tail_relations", args=["Chicago"]).json()
    assert (r["error_code"], r["rendered_text"]) == ("KG_SAMPLE_NOT_FOUND", 'Sample "nope" not found in KG')
    r = post(client, sample_id="q1", action_name="get_entity_info", args=["x"]).json()
    assert r["error_code"] == "KG_SERVER_ERROR"


def test_validation_errors_use_catalogue_shape(client):
    r = client.post("/retrieve", json={"sample_id": "q1"})
    assert r.status_code == 422
    body = r.json()
    assert body["error_code"] == "KG_FORMAT_ERROR"
    assert body["rendered_text"] == "Missing required fields for request: action_name"
    r = client.post("/retrieve", json={"sample_id": "q1", "action_name": "x", "args": ["a", "b", "c"]})
    assert r.status_code == 422 and r.json()["status"] == "error"


def test_hierarchical_override(client):
    r = post(client, sample_id="q1", action_name="get_tail_relations", args=["Illinois"], format_mode="hierarchical").json()
    assert r["rendered_text"].startswith('Tail relations for entity "Illinois":\nlocation\n')


def test_batch_equals_singles(client):
    items = [
        {"sample_id": "q1", "action_name": "get_tail_relations", "args": ["Chicago"]},
        {"sample_id": "q1", "action_name": "get_head_entities", "args": ["Illinois", "location.location.containedby"]},
        {"sample_id": "q1"},
        {"sample_id": "zzz", "action_name": "get_tail_relations", "args": ["Chicago"]},
    ]
    batch = client.post("/retrieve/batch", json=items).json()
    assert len(batch) == 4
    assert batch[2]["error_code"] == "KG_FORMAT_ERROR"
    for i in (0, 1, 3):
        single = client.post("/retrieve", json=items[i]).json()
        for key in ("status", "rendered_text", "result_labels", "error_code", "error_kind", "truncated"):
            assert batch[i][key] == single[key]


def test_health_and_sample_info(client, chicago_sample):
    h = client.get("/health").json()
    assert h["samples"] == 4 and h["generation"] == 0 and h["catalogue_version"] == "1.0"
    info = client.get("/samples/q1").json()
    assert info["anchor_entities"] == ["Chicago"]
    assert client.get("/samples/missing").status_code == 404


def test_gold_never_leaks(client, synth25):
    # nothing a client can ask for exposes gold answers or the gold path
    for s in synth25[:3]:
        info = client.get(f"/samples/{s.sample_id}").text
        health = client.get("/health").text
        assert "gold" not in info and "gold" not in health
        bad = post(client, sample_id=s.sample_id, action_name="get_entity_info", args=[]).text
        assert s.gold_answers[0] not in bad


def test_swap_is_atomic(client, chicago_sample, synth25, tmp_path):
    rows = [sample_to_row(s) for s in synth25[3:5]]
    r = client.post("/admin/swap", json={"rows": rows}).json()
    assert r == {"status": "ok", "samples": 2, "generation": 1, "rejected": []}
    assert post(client, sample_id="q1", action_name="get_tail_relations", args=["Chicago"]).json()["error_code"] == "KG_SAMPLE_NOT_FOUND"
    # a bad dataset is rejected and the live one stays
    bad = rows + [{"sample_id": "x"}]
    resp = client.post("/admin/swap", json={"rows": bad})
    assert resp.status_code == 400 and resp.json()["status"] == "rejected"
    assert client.get("/health").json()["generation"] == 1
    path = tmp_path / "qa.jsonl"
    path.write_bytes(dump_qa_dataset([chicago_sample]))
    assert client.post("/admin/swap", json={"path": str(path)}).json()["generation"] == 2
    assert client.post("/admin/swap", json={}).status_code == 400


def test_swap_under_concurrent_load(chicago_sample, synth25):
    app = create_app([chicago_sample])
    errors = []
    with TestClient(app) as tc:
        stop = threading.Event()

        def hammer():
            while not stop.is_set():
                body = tc.post("/retrieve", json={"sample_id": "q1", "action_name": "get_tail_relations", "args": ["Chicago"]}).json()
                if body["status"] != "ok" and body["error_code"] != "KG_SAMPLE_NOT_FOUND":
                    errors.append(body)

        threads = [threading.Thread(target=hammer) for _ in range(4)]
        for t in threads:
            t.start()
        for i in range(10):
            swap_backend(app, [chicago_sample] if i % 2 else synth25[:2])
        stop.set()
        for t in threads:
            t.join()
    assert not errors


def test_timeout(chicago_sample, monkeypatch):
    import kgrag.service.app as app_mod

    def slow(*a, **k):
        time.sleep(0.3)
        return execute(*a, **k)

    monkeypatch.setattr(app_mod, "execute", slow)
    app = create_app([chicago_sample], ServiceConfig(timeout_s=0.05))
    with TestClient(app) as tc:
        body = tc.post("/retrieve", json={"sample_id": "q1", "action_name": "get_tail_relations", "args": ["Chicago"]}).json()
    assert body["error_code"] == "KG_SERVER_ERROR"
    assert body["rendered_text"] == "Request timed out after 0.05s"


def test_client_executor_matches_engine(client, chicago_sample):
    sc = ServiceClient(http=client)
    ex = sc.executor("q1")
    for action in [
        RetrievalAction("get_tail_relations", ("Illinois",)),
        RetrievalAction("get_tail_entities", ("Illinois", "nope")),
        RetrievalAction("get_head_entities", ("a", "b", "c")),
        RetrievalAction("get_tail_relations", ()),
    ]:
        assert ex(action) == execute(chicago_sample.graph, action)
    assert sc.health()["samples"] == 4


def test_shared_graph(chicago):
    with TestClient(create_app([], shared_graph=chicago)) as tc:
        body = tc.post("/retrieve", json={"sample_id": "*", "action_name": "get_tail_relations", "args": ["Chicago"]}).json()
    assert body["result_labels"] == ["location.location.containedby"]
