import random

import pytest

from src.errors import DatasetFormatError, EmptyGraph, EmptySeed
from src.graph import ParallelRecord, RawRecord, SemanticGraph, Triple, parse_graph, parse_triple_sequence
from src.perturb import (
    CORRECT,
    SEPARATOR,
    SEPARATOR_TOKEN,
    PerturbationStrategy,
    build_verifier_dataset,
    filter_seed_pairs,
    make_correct_example,
    perturb_heuristic_omit,
    perturb_random_omit,
    perturb_swap,
    verifier_input,
)
from tests.conftest import graph_of, synthetic_record


def _graph_part(example_input: str) -> SemanticGraph:
    return parse_graph(example_input.split(SEPARATOR, 1)[1])


def test_correct_example(figure_pair):
    example = make_correct_example(figure_pair.text, figure_pair.graph, figure_pair.id)
    assert example.target == CORRECT
    assert example.input.count(SEPARATOR_TOKEN) == 1
    assert example.input.startswith(figure_pair.text + SEPARATOR)
    assert _graph_part(example.input) == figure_pair.graph


def test_correct_example_needs_triples():
    with pytest.raises(EmptyGraph):
        make_correct_example("text", SemanticGraph())


def test_separator_token_in_text_is_defused():
    example_input = verifier_input("a <S> b", graph_of(("x", "<S>", "y")))
    assert example_input.count(SEPARATOR_TOKEN) == 1


def test_random_omit_target_restores_graph(figure_pair):
    example = perturb_random_omit(figure_pair.text, figure_pair.graph, random.Random(3))
    omitted = parse_triple_sequence(example.target).triples[0]
    remaining = _graph_part(example.input)
    assert len(remaining) == len(figure_pair.graph) - 1
    assert not remaining.contains(omitted)
    assert set(remaining.triples) | {omitted} == set(figure_pair.graph.triples)


def test_random_omit_skips_single_triple():
    assert perturb_random_omit("t", graph_of(("a", "r", "b")), random.Random(0)) is None


def test_heuristic_omit_prefers_ungrounded_triple():
    text = "Francisco Uranga is a swimmer."
    g = graph_of(
        ("Francisco Uranga", "occupation", "swimmer"),
        ("Gabriel Moreno", "spouse", "Lucia Fernandez"),
    )
    for seed in range(10):
        example = perturb_heuristic_omit(text, g, random.Random(seed))
        assert example.target == "[Gabriel Moreno, spouse, Lucia Fernandez]"


def test_heuristic_omit_falls_back_to_random():
    text = "Francisco Uranga is a swimmer from Argentina."
    g = graph_of(
        ("Francisco Uranga", "occupation", "swimmer"),
        ("Francisco Uranga", "country", "Argentina"),
    )
    example = perturb_heuristic_omit(text, g, random.Random(1))
    assert parse_triple_sequence(example.target).triples[0] in g.triples


@pytest.mark.parametrize("position, field", [("head", "subject"), ("relation", "predicate"), ("tail", "object")])
def test_swap_changes_one_field(position, field):
    g = graph_of(("Alice Smith", "spouse", "Bob Jones"), ("Carol White", "founder", "Acme Corp"))
    example = perturb_swap("text", g, random.Random(0), position)
    original = parse_triple_sequence(example.target).triples[0]
    perturbed = _graph_part(example.input)

    assert original in g.triples
    assert len(perturbed) == len(g)
    assert not perturbed.contains(original)
    changed = [t for t in perturbed if t not in g.triples]
    assert len(changed) == 1
    differing = [name for name in ("subject", "predicate", "object") if getattr(changed[0], name) != getattr(original, name)]
    assert differing == [field]


def test_swap_without_candidate_is_skipped():
    g = graph_of(("Alice Smith", "spouse", "Bob Jones"), ("Carol White", "spouse", "Dan Brown"))
    assert perturb_swap("text", g, random.Random(0), "relation") is None


def test_swap_never_creates_existing_triple():
    # swapping the head of the second triple to "a" would recreate the first
    g = graph_of(("a", "r", "b"), ("c", "r", "b"))
    assert perturb_swap("text", g, random.Random(0), "head") is None


def test_count_law_600_pairs():
    seed = [synthetic_record(n_triples * 1000 + i, n_triples) for n_triples in range(1, 7) for i in range(100)]
    examples, stats = build_verifier_dataset(seed, PerturbationStrategy.RANDOM_OMIT, rng_seed=11)
    assert len(examples) == 1100
    assert stats.n_correct == 600
    assert stats.n_perturbed == 500
    assert stats.n_skipped_single_triple == 100
    assert stats.n_examples == 1100


def test_count_law_with_repeat(six_pair_seed):
    examples, stats = build_verifier_dataset(six_pair_seed, repeat=3)
    assert len(examples) == 6 + 3 * 5
    assert stats.repeat == 3


def test_dataset_is_deterministic(six_pair_seed):
    first, _ = build_verifier_dataset(six_pair_seed, PerturbationStrategy.TAIL_SWAP, rng_seed=5)
    second, _ = build_verifier_dataset(six_pair_seed, PerturbationStrategy.TAIL_SWAP, rng_seed=5)
    assert [e.to_row() for e in first] == [e.to_row() for e in second]


def test_instruction_prefix(six_pair_seed):
    examples, _ = build_verifier_dataset(six_pair_seed, prefix="Dataset: webnlg. ")
    assert all(e.input.startswith("Dataset: webnlg. ") for e in examples)
    assert all(e.input.count(SEPARATOR_TOKEN) == 1 for e in examples)


def test_empty_seed():
    with pytest.raises(EmptySeed):
        build_verifier_dataset([])


def test_filter_seed_pairs():
    records = [
        RawRecord("0", "t", [["a", "r", "b"]], 1),
        RawRecord("1", "t", [["a", "r", "b", "c"]], 2),
        RawRecord("2", "t", [[f"s{i}", "r", "o"] for i in range(7)], 3),
        RawRecord("3", "t", "[[a, r, b], [c, s, d]]", 4),
    ]
    kept = filter_seed_pairs(records, max_triples=6)
    assert [r.id for r in kept] == ["0", "3"]
    assert isinstance(kept[1], ParallelRecord)
    assert kept[1].graph.triples[1] == Triple("c", "s", "d")


def test_filter_seed_pairs_rejects_malformed_graph():
    with pytest.raises(DatasetFormatError) as info:
        filter_seed_pairs([RawRecord("0", "t", "[[a, r, b]", 7)])
    assert info.value.line == 7
