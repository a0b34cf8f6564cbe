import json
import random
from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

from expbank.abstract import Experience
from expbank.core import Action, HistoryEntry, Outcome, State, Step, Trajectory, VisualRef
from expbank.embed import HashEmbedder, unit_normalize
from expbank.index import ExperienceBank
from expbank.viewpoint import VIEWPOINT_IDS

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name):
    return (FIXTURES / name).read_text(encoding="utf-8")


def random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    return unit_normalize(rng.standard_normal(dim))


def dummy_state(i: int = 0) -> State:
    return State(f"task {i}")


def make_experience(eid, embeddings, q=9.0, guidance=None, state=None, correct=True):
    tid, _, step = eid.partition("#")
    return Experience(
        id=eid,
        trajectory_id=tid,
        step=int(step or 0),
        state=state or dummy_state(),
        action=Action.tool("probe", eid),
        guidance=guidance or f"guidance for {eid}",
        q_value=q,
        source_outcome=correct,
        embeddings=embeddings,
    )


def random_bank(seed: int, n: int, dim: int, dup_rate: float = 0.02) -> ExperienceBank:
    """Bank of random unit vectors; a few rows are exact duplicates to exercise tie-breaks."""
    rng = np.random.default_rng(seed)
    bank = ExperienceBank(dim)
    exps = []
    prev = None
    for i in range(n):
        if prev is not None and rng.random() < dup_rate:
            embs = dict(prev)
        else:
            embs = {vp: random_unit(rng, dim) for vp in VIEWPOINT_IDS}
        # shuffled id order so row order and id order disagree
        eid = f"t{int(rng.integers(0, 10**6)):06d}-{i}#0"
        exps.append(make_experience(eid, embs, q=float(rng.integers(5, 11))))
        prev = embs
    bank.extend(exps)
    return bank


# --- trajectories / states -------------------------------------------------

def two_step_case() -> Trajectory:
    """Attribute-recognition trajectory: localize (useful) then OCR on a colour question (useless)."""
    state = State(
        "What is the color of the umbrella held by the woman?",
        (VisualRef("img_0", "street scene"),),
        "fine-grained attribute recognition",
    )
    steps = (
        Step(Action.tool("object_localization", '{"image":"img_0","query":"umbrella"}'), "bbox=[412,88,530,170]"),
        Step(Action.tool("ocr", '{"image":"img_0","bbox":[412,88,530,170]}'), "no text detected"),
    )
    return Trajectory("case-umbrella", state, steps, Outcome(True, "red"))


CASE_SCRIPT = {
    0: (9.0, "For attribute questions about a small object, localize the object first before inspecting it."),
    1: (1.0, "Avoid OCR for colour questions; text extraction reveals nothing about purely visual properties."),
}


safe_text = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",)), min_size=0, max_size=12
)
nonblank = safe_text.filter(lambda s: s.strip() != "")


@st.composite
def actions(draw):
    kind = draw(st.sampled_from(["tool", "answer", "experience_search"]))
    if kind == "answer":
        return Action.answer(draw(safe_text))
    if kind == "experience_search":
        return Action.search(draw(safe_text))
    return Action.tool(draw(nonblank), draw(safe_text), draw(st.none() | safe_text))


@st.composite
def visual_refs(draw):
    ids = draw(st.lists(nonblank, max_size=3, unique=True))
    return tuple(VisualRef(i, draw(st.none() | safe_text)) for i in ids)


@st.composite
def states(draw, max_history=3):
    hist = draw(st.lists(st.tuples(actions(), safe_text), max_size=max_history))
    return State(
        draw(nonblank),
        draw(visual_refs()),
        draw(st.none() | safe_text),
        tuple(HistoryEntry(i, a, o) for i, (a, o) in enumerate(hist)),
    )


@st.composite
def trajectories(draw, max_steps=5):
    steps = draw(st.lists(st.tuples(actions(), safe_text), min_size=1, max_size=max_steps))
    correct = draw(st.booleans())
    gt = draw(safe_text) if not correct else draw(st.none() | safe_text)
    initial = State(draw(nonblank), draw(visual_refs()), draw(st.none() | safe_text))
    return Trajectory(
        draw(nonblank), initial, tuple(Step(a, o) for a, o in steps), Outcome(correct, gt)
    )


@pytest.fixture
def embedder():
    return HashEmbedder(64)


# --- acceptance summary ----------------------------------------------------

_ACCEPTANCE = []


def pytest_runtest_makereport(item, call):
    if call.when != "call" or "test_acceptance" not in item.nodeid:
        return
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    passed = call.excinfo is None
    notes = "; ".join(str(v) for k, v in item.user_properties if k == "note")
    _ACCEPTANCE.append((marker.args[0], marker.args[1], passed, call.duration, notes))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, duration, notes in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        extra = f"  [{notes}]" if notes else ""
        terminalreporter.write_line(f"C{num:<2} {'PASS' if passed else 'FAIL'}  {title}  ({duration:.2f}s){extra}")


# --- random search cases ----------------------------------------------------

def search_case(seed: int, dim: int = 16, max_n: int = 40, default_params: bool = False):
    """(bank, state, params, embedder) with some experiences planted on the query's own projections.

    Planted rows make the same experience win under several viewpoints, so
    dedup is exercised rather than vacuous.
    """
    from expbank.search import SearchParams
    from expbank.viewpoint import project

    rng = np.random.default_rng(seed)
    emb = HashEmbedder(dim)
    state = State(
        f"question {int(rng.integers(0, 5))}",
        (VisualRef("img_0", f"caption {int(rng.integers(0, 3))}"),),
        str(rng.choice(["counting", "ocr", "spatial"])),
    )
    query = {vp: emb.embed(project(state, vp)) for vp in VIEWPOINT_IDS}
    n = int(rng.integers(0, max_n + 1))
    exps = []
    for i in range(n):
        embs = {}
        for vp in VIEWPOINT_IDS:
            r = rng.random()
            if r < 0.15:
                embs[vp] = query[vp]
            elif r < 0.3:
                embs[vp] = unit_normalize(query[vp].astype(np.float64) + rng.standard_normal(dim) * 0.05)
            else:
                embs[vp] = random_unit(rng, dim)
        exps.append(make_experience(f"t{int(rng.integers(0, 100)):02d}-{i}#{int(rng.integers(0, 4))}", embs))
    bank = ExperienceBank(dim)
    bank.extend(exps)
    if default_params:
        params = SearchParams()
    else:
        rounds = int(rng.integers(1, 5))
        seq = tuple(str(v) for v in rng.choice(VIEWPOINT_IDS, size=rounds))
        params = SearchParams(k=int(rng.integers(1, 6)), rounds=rounds, viewpoint_sequence=seq)
    return bank, state, params, emb


# --- live HTTP service -------------------------------------------------------

import contextlib
import threading


@contextlib.contextmanager
def live_service(service):
    """Run `service` on an ephemeral port; yields the base URL."""
    from expbank.serve import make_server

    server = make_server(service, "127.0.0.1:0")
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    try:
        yield f"http://{host}:{port}"
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)
