"""Acceptance gate: one test per criterion, summarized at the end of the run."""

import json
import random
import time

import httpx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st, HealthCheck

from expbank import store
from expbank.abstract import AbstractionConfig, abstract_trajectory, build_bank
from expbank.cli import build_parser
from expbank.core import Action, Outcome, State, Step, Trajectory, state_to_record
from expbank.embed import HashEmbedder
from expbank.harness import run_benchmark
from expbank.index import FlatIndex
from expbank.judge import (
    ScriptedJudge,
    StepJudgement,
    build_hindsight_prompt,
    parse_judgement,
    render_judgements,
)
from expbank.search import SearchParams, deep_search, deep_wide_search, format_guidance, wide_search
from expbank.serve import BankService
from expbank.viewpoint import VIEWPOINT_IDS, list_viewpoints

import oracles
from conftest import CASE_SCRIPT, live_service, random_bank, random_unit, search_case, trajectories, two_step_case

criterion = pytest.mark.criterion


@criterion(1, "top_k matches full-sort oracle on 100 random banks")
def test_c1_oracle_equivalence():
    start = time.perf_counter()
    for b in range(100):
        bank = random_bank(1000 + b, 1000, 64)
        snap = bank.snapshot()
        rng = np.random.default_rng(b)
        for vp in VIEWPOINT_IDS:
            rows = snap.table(vp).astype(np.float64).tolist()
            # query is sometimes an existing row, to force exact ties with duplicates
            q = snap.table(vp)[int(rng.integers(0, 1000))] if b % 4 == 0 else random_unit(rng, 64)
            want = oracles.full_sort_top_k(rows, snap.ids, q.astype(np.float64).tolist(), 5)
            for k in (1, 3, 5):
                got = [h.experience_id for h in bank.top_k(vp, q, k)]
                assert got == [i for _, i in want[:k]], (b, vp, k)
    assert time.perf_counter() - start < 30


@criterion(2, "reduction laws over 1000 random cases")
def test_c2_reduction_laws():
    start = time.perf_counter()
    for seed in range(1000):
        bank, state, params, emb = search_case(seed)
        vp = params.viewpoint_sequence[0]
        wide_l1 = deep_wide_search(bank, state, SearchParams(params.k, 1, (vp,)), emb)
        assert wide_l1 == wide_search(bank, state, vp, params.k, emb), seed
        seq = params.viewpoint_sequence
        assert deep_wide_search(bank, state, SearchParams(1, len(seq), seq), emb) == deep_search(bank, state, seq, emb), seed
    assert time.perf_counter() - start < 30


@criterion(3, "quality filter on the two-step fixture and monotone in delta")
def test_c3_filter():
    emb = HashEmbedder(64)
    judge = ScriptedJudge(scripts={"case-umbrella": CASE_SCRIPT})
    sizes = {}
    for delta in (5.0, 9.5, 0.0):
        bank, _ = build_bank([two_step_case()], AbstractionConfig(threshold=delta), judge, emb)
        sizes[delta] = len(bank)
    assert sizes == {5.0: 1, 9.5: 0, 0.0: 2}

    rng = random.Random(3)
    small = HashEmbedder(8)
    for case in range(200):
        n = rng.randint(1, 8)
        qs = [rng.choice([rng.uniform(0, 10), float(rng.randint(0, 10))]) for _ in range(n)]
        steps = tuple(Step(Action.tool(f"t{i}"), "o") for i in range(n))
        traj = Trajectory(f"m{case}", State("q"), steps, Outcome(True))
        rule = ScriptedJudge(rule=lambda t, i: (qs[i], "advice"))
        deltas = sorted(rng.uniform(0, 10) for _ in range(4)) + [0.0, 10.0]
        admitted = []
        for d in sorted(deltas):
            exps, _ = abstract_trajectory(traj, AbstractionConfig(threshold=d, dim=8), rule, small)
            admitted.append({e.step for e in exps})
            assert admitted[-1] == {i for i, q in enumerate(qs) if q >= d}
        assert all(a >= b for a, b in zip(admitted, admitted[1:]))


@criterion(4, "zero-flag defaults: delta=5.0, K=3, L=3, M=3")
def test_c4_defaults():
    cfg, params = AbstractionConfig(), SearchParams()
    snapshot = {
        "delta": cfg.threshold,
        "K": params.k,
        "L": params.rounds,
        "M": len(list_viewpoints()),
        "viewpoints": list(cfg.viewpoints),
        "sequence": list(params.viewpoint_sequence),
    }
    assert snapshot == {
        "delta": 5.0,
        "K": 3,
        "L": 3,
        "M": 3,
        "viewpoints": ["v_visual", "v_task", "v_history"],
        "sequence": ["v_visual", "v_task", "v_history"],
    }
    p = build_parser()
    assert p.parse_args(["abstract", "--trajectories", "t", "--bank", "b"]).threshold == 5.0
    s = p.parse_args(["search", "--bank", "b", "--state", "s"])
    assert (s.k, len(s.viewpoints)) == (3, 3)
    h = p.parse_args(["harness"])
    assert (h.k, h.rounds) == (3, 3)


@criterion(5, "deep_wide returns at most 9 unique items under defaults")
def test_c5_cardinality():
    params = SearchParams()
    for seed in range(10_000):
        bank, state, _, emb = search_case(seed, dim=8, max_n=20)
        ids = deep_wide_search(bank, state, params, emb).ids
        assert len(ids) <= 9 and len(ids) == len(set(ids)), seed


@criterion(6, "save/load is bit-exact and tamper-evident")
def test_c6_persistence(tmp_path):
    bank = random_bank(600, 500, 64)
    store.save(bank, tmp_path / "b")
    back = store.load(tmp_path / "b")
    a, b = bank.snapshot(), back.snapshot()
    assert a.ids == b.ids and bank.config == back.config
    assert all(x.same_as(y) for x, y in zip(a.experiences, b.experiences))
    for vp in VIEWPOINT_IDS:
        assert a.table(vp).tobytes() == b.table(vp).tobytes()
    rng = np.random.default_rng(6)
    for _ in range(50):
        q = random_unit(rng, 64)
        for vp in VIEWPOINT_IDS:
            assert bank.top_k(vp, q, 7) == back.top_k(vp, q, 7)

    records = tmp_path / "b" / store.RECORDS
    data = bytearray(records.read_bytes())
    data[int(rng.integers(0, len(data)))] ^= 0x04
    records.write_bytes(bytes(data))
    with pytest.raises(store.ChecksumMismatch):
        store.load(tmp_path / "b")


@criterion(7, "HTTP service results equal library results")
def test_c7_service_equivalence():
    bank, _, _, emb = search_case(77, dim=64, max_n=40)
    rng = random.Random(7)
    svc = BankService(bank, emb)
    with live_service(svc) as url, httpx.Client(base_url=url) as client:
        for i in range(100):
            _, state, _, _ = search_case(10_000 + i, dim=64, max_n=0)
            mode = rng.choice(["wide", "deep", "deep_wide"])
            vps = [rng.choice(VIEWPOINT_IDS)] if mode == "wide" else rng.choices(VIEWPOINT_IDS, k=rng.randint(1, 4))
            k = rng.randint(1, 5)
            r = client.post("/v1/search", json={"state": state_to_record(state), "mode": mode, "viewpoints": vps, "k": k})
            assert r.status_code == 200
            snap = bank.snapshot()
            if mode == "wide":
                want = wide_search(snap, state, vps[0], k, emb)
            elif mode == "deep":
                want = deep_search(snap, state, vps, emb)
            else:
                want = deep_wide_search(snap, state, SearchParams(k, len(vps), tuple(vps)), emb)
            assert r.json() == {"items": want.to_records(), "rendered": format_guidance(want)}


@criterion(8, "harness: experience lifts accuracy to 1.0 on seed 42 and never hurts")
def test_c8_harness_benefit(record_property):
    start = time.perf_counter()
    with_exp = run_benchmark(100, 42, True)
    without = run_benchmark(100, 42, False)
    record_property("note", f"seed 42 with={with_exp.accuracy:.4f} without={without.accuracy:.4f}")
    assert f"accuracy={with_exp.accuracy:.4f}" == "accuracy=1.0000"
    assert 0.35 <= without.accuracy <= 0.65
    for seed in range(1, 11):
        assert run_benchmark(100, seed, True).accuracy >= run_benchmark(100, seed, False).accuracy, seed
    assert time.perf_counter() - start < 10


@criterion(9, "exact top_k latency at N=100k, D=1024 (budget 250 ms, gate 500 ms)")
def test_c9_latency(record_property):
    n, dim = 100_000, 1024
    rng = np.random.default_rng(9)
    idx = FlatIndex(dim, capacity=n)
    chunk = 10_000
    for start in range(0, n, chunk):
        block = rng.standard_normal((chunk, dim), dtype=np.float32)
        block /= np.linalg.norm(block.astype(np.float64), axis=1, keepdims=True).astype(np.float32)
        idx.add_many([f"x{start + i:06d}" for i in range(chunk)], block)
    q = random_unit(rng, dim)
    idx.top_k(q, 3)  # warm
    times = []
    for _ in range(7):
        t0 = time.perf_counter()
        idx.top_k(q, 3)
        times.append(time.perf_counter() - t0)
    median_ms = 1000 * sorted(times)[len(times) // 2]
    record_property("note", f"median {median_ms:.1f} ms, best {1000 * min(times):.1f} ms")
    assert median_ms < 500


CORRECT_MARK = "9-10 (Essential)"
INCORRECT_MARK = "Rate how much this step CONTRIBUTED TO"


@criterion(10, "prompt branches carry the right rubric; judgements round-trip")
def test_c10_prompt_fidelity():
    assert CORRECT_MARK in build_hindsight_prompt(two_step_case())
    rng = random.Random(10)
    for i in range(300):
        t = two_step_case()
        correct = rng.random() < 0.5
        traj = Trajectory(f"p{i}", t.initial_state, t.steps, Outcome(correct, None if correct else str(rng.randint(0, 99))))
        p = build_hindsight_prompt(traj)
        assert (CORRECT_MARK in p) == correct and (INCORRECT_MARK in p) == (not correct)

    alphabet = "abcdefghijklmnopqrstuvwxyz ÄéΩ中\"\\{}[],:\n\t"
    for _ in range(1000):
        n = rng.randint(1, 15)
        steps = sorted(rng.sample(range(n), rng.randint(0, n)))
        js = []
        for s in steps:
            q = rng.choice([float(rng.randint(0, 10)), rng.uniform(0, 10)])
            text = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 40)))
            if not text.strip():
                text = "x" + text
            js.append(StepJudgement(s, q, text))
        assert parse_judgement(render_judgements(js), n) == js
