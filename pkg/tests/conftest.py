import json
import random
from pathlib import Path

import pytest
from hypothesis import strategies as st

from src.graph import ParallelRecord, SemanticGraph, Triple


def graph_of(*triples: tuple[str, str, str]) -> SemanticGraph:
    return SemanticGraph(tuple(Triple(*t) for t in triples))


def write_rows(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as file:
        for row in rows:
            file.write(json.dumps(row) + "\n")
    return path


def synthetic_record(index: int, n_triples: int, rng: random.Random | None = None) -> ParallelRecord:
    """A record whose text mentions every entity of its graph."""
    rng = rng or random.Random(index)
    subject = f"Entity{index}"
    triples = []
    for j in range(n_triples):
        relation = rng.choice(["founder", "location", "award", "spouse", "genre", "member of"])
        triples.append(Triple(subject, f"{relation} {j}", f"Value{index}x{j}"))
    text = " ".join(f"{t.subject} has {t.predicate} {t.object}." for t in triples)
    return ParallelRecord(str(index), text, SemanticGraph(tuple(triples)))


@st.composite
def small_graphs(draw, max_triples: int = 3, min_triples: int = 0) -> SemanticGraph:
    """Graphs over a tiny vocabulary so pairs share nodes and relations often."""
    nodes = st.sampled_from(["a", "b", "c", "d"])
    relations = st.sampled_from(["r", "s"])
    triples = draw(
        st.lists(
            st.tuples(nodes, relations, nodes),
            min_size=min_triples,
            max_size=max_triples,
        )
    )
    return SemanticGraph(tuple(Triple(*t) for t in triples))


@pytest.fixture
def figure_pair() -> ParallelRecord:
    return ParallelRecord(
        "uranga",
        "Francisco Uranga is an Argentine swimmer who competed at the 1948 Summer Olympics.",
        graph_of(
            ("Francisco Uranga", "country of citizenship", "Argentina"),
            ("Francisco Uranga", "occupation", "swimmer"),
            ("Francisco Uranga", "participant in", "1948 Summer Olympics"),
        ),
    )


@pytest.fixture
def six_pair_seed() -> list[ParallelRecord]:
    """One pair per triple count 1..6."""
    return [synthetic_record(i, i + 1) for i in range(6)]


@pytest.fixture
def corpus() -> list[ParallelRecord]:
    rng = random.Random(7)
    return [synthetic_record(i, rng.randint(3, 5), rng) for i in range(12)]


@pytest.fixture
def dataset_file(tmp_path, corpus) -> Path:
    return write_rows(tmp_path / "dataset.jsonl", [record.to_row() for record in corpus])
