import json
import threading

import httpx
import numpy as np
import pytest

from expbank.abstract import AbstractionConfig
from expbank.core import state_to_record, trajectory_to_record
from expbank.embed import HashEmbedder, RemoteEmbedder
from expbank.index import ExperienceBank
from expbank.judge import JudgeConfig, RemoteJudge, ScriptedJudge
from expbank.search import SearchParams, deep_wide_search, format_guidance
from expbank.serve import BankService, parse_listen

from conftest import CASE_SCRIPT, live_service, make_experience, search_case, two_step_case

SEARCH = {"mode": "deep_wide", "k": 3, "viewpoints": ["v_visual", "v_task", "v_history"]}


def case_service(bank=None):
    emb = HashEmbedder(64)
    return BankService(bank or ExperienceBank(64), emb, ScriptedJudge(scripts={"case-umbrella": CASE_SCRIPT}))


def search_body(st, **over):
    return {**SEARCH, "state": state_to_record(st), **over}


def test_empty_bank_search():
    status, body = case_service().handle_search(search_body(two_step_case().initial_state))
    assert status == 200 and body == {"items": [], "rendered": "NO RELEVANT EXPERIENCE FOUND"}


@pytest.mark.parametrize(
    "over",
    [
        {"mode": "wide", "viewpoints": ["v_task", "v_history"]},
        {"viewpoints": ["v_smell"]},
        {"viewpoints": []},
        {"k": 0},
        {"k": "3"},
        {"mode": "broad"},
        {"state": {"instruction": 7}},
        {"state": None},
    ],
)
def test_bad_search_requests(over):
    status, body = case_service().handle_search(search_body(two_step_case().initial_state, **over))
    assert status == 400 and "error" in body


def test_dimension_mismatch_is_409():
    svc = BankService(ExperienceBank(64), HashEmbedder(32))
    assert svc.handle_search(search_body(two_step_case().initial_state))[0] == 409


def test_embedder_down_is_503():
    down = httpx.MockTransport(lambda r: httpx.Response(503))
    svc = BankService(ExperienceBank(8), RemoteEmbedder("http://e", dim=8, max_retries=0, transport=down, backoff=0))
    assert svc.handle_search(search_body(two_step_case().initial_state))[0] == 503


def test_ingest_case_then_search():
    svc = case_service()
    status, stats = svc.handle_ingest([trajectory_to_record(two_step_case())])
    assert status == 202 and stats["admitted"] == 1 and stats["rejected_low_q"] == 1
    status, body = svc.handle_search(search_body(two_step_case().initial_state))
    assert [it["experience_id"] for it in body["items"]] == ["case-umbrella#0"]
    assert body["rendered"].startswith("[1.1] (v_visual, 1.0000) For attribute questions")

    status, body = svc.handle_ingest([trajectory_to_record(two_step_case())])
    assert status == 400 and body["trajectory_id"] == "case-umbrella"


def test_ingest_edge_cases():
    svc = case_service()
    status, stats = svc.handle_ingest([])
    assert status == 202 and all(v == 0 for v in stats.values())
    assert svc.handle_ingest({"not": "a list"})[0] == 400
    assert svc.handle_ingest([{"id": "x"}])[0] == 400
    no_judge = BankService(ExperienceBank(64), HashEmbedder(64))
    assert no_judge.handle_ingest([trajectory_to_record(two_step_case())])[0] == 503


def test_ingest_judge_down_is_503():
    down = httpx.MockTransport(lambda r: httpx.Response(500))
    judge = RemoteJudge("http://j", JudgeConfig(mode="remote", max_retries=0), transport=down, backoff=0)
    svc = BankService(ExperienceBank(64), HashEmbedder(64), judge, AbstractionConfig(judge=JudgeConfig(mode="remote")))
    status, body = svc.handle_ingest([trajectory_to_record(two_step_case())])
    assert status == 503 and body["stats"]["failed_trajectories"] == 1


def test_stats():
    svc = case_service()
    _, s = svc.handle_stats()
    assert s["experience_count"] == 0 and s["q_histogram"] == [0] * 11
    svc.handle_ingest([trajectory_to_record(two_step_case())])
    _, s = svc.handle_stats()
    assert s["q_histogram"][9] == 1 and sum(s["q_histogram"]) == s["experience_count"] == 1
    assert s["source_outcome_counts"] == {"correct": 1, "incorrect": 0}


def test_parse_listen(monkeypatch):
    monkeypatch.delenv("EXPBANK_LISTEN", raising=False)
    assert parse_listen(None) == ("127.0.0.1", 8080)
    monkeypatch.setenv("EXPBANK_LISTEN", "0.0.0.0:9000")
    assert parse_listen(None) == ("0.0.0.0", 9000)
    assert parse_listen("localhost:1") == ("localhost", 1)
    with pytest.raises(ValueError):
        parse_listen("localhost")


def test_http_round_trip():
    bank, state, params, emb = search_case(7, dim=64, max_n=30)
    svc = BankService(bank, emb, ScriptedJudge(scripts={"case-umbrella": CASE_SCRIPT}))
    with live_service(svc) as url, httpx.Client(base_url=url) as client:
        r = client.post("/v1/search", json=search_body(state))
        want = deep_wide_search(bank, state, SearchParams(), emb)
        assert r.status_code == 200
        assert r.json() == {"items": want.to_records(), "rendered": format_guidance(want)}
        assert client.get("/v1/stats").json()["experience_count"] == len(bank)
        assert client.post("/v1/search", content=b"{oops").status_code == 400
        assert client.get("/v1/nothing").status_code == 404
        r = client.post("/v1/trajectories", json=[trajectory_to_record(two_step_case())])
        assert r.status_code == 202 and r.json()["admitted"] == 1


def test_searches_see_whole_ingest_batches():
    emb = HashEmbedder(16)
    svc = BankService(ExperienceBank(16), emb, ScriptedJudge(default=(9.0, "always do this")))
    base = two_step_case()
    batches = []
    for j in range(15):
        batch = []
        for i in range(4):
            rec = trajectory_to_record(base)
            rec["id"] = f"b{j}-{i}"
            batch.append(rec)
        batches.append(batch)
    sizes = []

    def reader():
        for _ in range(200):
            _, s = svc.handle_stats()
            sizes.append(s["experience_count"])
            status, _ = svc.handle_search(search_body(base.initial_state, k=5))
            assert status == 200

    t = threading.Thread(target=reader)
    t.start()
    for b in batches:
        assert svc.handle_ingest(b)[0] == 202
    t.join()
    # 4 trajectories x 2 admitted steps per batch
    assert all(n % 8 == 0 for n in sizes) and svc.handle_stats()[1]["experience_count"] == 120
