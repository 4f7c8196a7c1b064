"""
Verifier training data built from seed text-graph pairs.

Every seed pair gives one correct example (target "Correct") and, unless the
perturbation has to be skipped, one perturbed example whose target is the
triple needed to undo the perturbation.
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable, Sequence

from src.errors import ArityViolation, DatasetFormatError, EmptyGraph, EmptySeed, GraphError
from src.graph import (
    DEFAULT_POLICY,
    NormalizationPolicy,
    ParallelRecord,
    RawRecord,
    SemanticGraph,
    Triple,
    graph_from_value,
    normalize_text,
    serialize_graph,
    serialize_triple,
    triple_key,
)
from src.logger import get_logger

logger = get_logger(__name__)

SEPARATOR = " <S> "
SEPARATOR_TOKEN = "<S>"
CORRECT = "Correct"


class PerturbationStrategy(str, Enum):
    RANDOM_OMIT = "random_omit"
    HEURISTIC_OMIT = "heuristic_omit"
    HEAD_SWAP = "head_swap"
    RELATION_SWAP = "relation_swap"
    TAIL_SWAP = "tail_swap"


# swap position -> (triple field, strategy)
_SWAP_POSITIONS = {
    "head": ("subject", PerturbationStrategy.HEAD_SWAP),
    "relation": ("predicate", PerturbationStrategy.RELATION_SWAP),
    "tail": ("object", PerturbationStrategy.TAIL_SWAP),
}


@dataclass(frozen=True)
class VerifierExample:
    input: str
    target: str
    strategy: str
    seed_id: str

    def to_row(self) -> dict:
        return {"input": self.input, "target": self.target, "strategy": self.strategy, "seed_id": self.seed_id}


@dataclass
class DatasetStats:
    n_seed: int = 0
    n_correct: int = 0
    n_perturbed: int = 0
    n_skipped_single_triple: int = 0
    n_skipped_no_candidate: int = 0
    strategy: str = PerturbationStrategy.RANDOM_OMIT.value
    rng_seed: int = 0
    repeat: int = 1

    @property
    def n_examples(self) -> int:
        return self.n_correct + self.n_perturbed

    def to_dict(self) -> dict:
        return {**asdict(self), "n_examples": self.n_examples}


def _defuse(value: str) -> str:
    # the separator token must appear exactly once in a verifier input
    return value.replace(SEPARATOR_TOKEN, "<s>")


def verifier_input(text: str, graph: SemanticGraph, prefix: str = "") -> str:
    """``prefix + text + " <S> " + linearized graph``."""
    return f"{_defuse(prefix)}{_defuse(text)}{SEPARATOR}{_defuse(serialize_graph(graph))}"


def make_correct_example(
    text: str,
    g: SemanticGraph,
    seed_id: str = "",
    prefix: str = "",
) -> VerifierExample:
    if not len(g):
        raise EmptyGraph(f"seed pair {seed_id!r} has an empty graph")
    return VerifierExample(verifier_input(text, g, prefix), CORRECT, "correct", seed_id)


def _omit(
    text: str,
    g: SemanticGraph,
    index: int,
    strategy: PerturbationStrategy,
    seed_id: str,
    prefix: str,
) -> VerifierExample:
    return VerifierExample(
        verifier_input(text, g.without(index), prefix),
        serialize_triple(g.triples[index]),
        strategy.value,
        seed_id,
    )


def perturb_random_omit(
    text: str,
    g: SemanticGraph,
    rng: random.Random,
    seed_id: str = "",
    prefix: str = "",
) -> VerifierExample | None:
    """Drop one triple chosen uniformly. None (skip) unless the graph has more than one triple."""
    if len(g) <= 1:
        return None
    index = rng.randrange(len(g))
    return _omit(text, g, index, PerturbationStrategy.RANDOM_OMIT, seed_id, prefix)


def perturb_heuristic_omit(
    text: str,
    g: SemanticGraph,
    rng: random.Random,
    policy: NormalizationPolicy = DEFAULT_POLICY,
    seed_id: str = "",
    prefix: str = "",
) -> VerifierExample | None:
    """
    Prefer dropping a triple whose subject and object are both absent from the
    text; fall back to random omission when there is none.
    """
    if len(g) <= 1:
        return None
    haystack = normalize_text(text, policy)
    candidates = [
        i
        for i, t in enumerate(g.triples)
        if normalize_text(t.subject, policy) not in haystack and normalize_text(t.object, policy) not in haystack
    ]
    if not candidates:
        candidates = list(range(len(g)))
    index = rng.choice(candidates)
    return _omit(text, g, index, PerturbationStrategy.HEURISTIC_OMIT, seed_id, prefix)


def _swap_options(g: SemanticGraph, field_name: str, policy: NormalizationPolicy) -> list[tuple[int, list[str]]]:
    is_predicate = field_name == "predicate"
    present = g.keys(policy)
    options = []
    for i, t in enumerate(g.triples):
        original = normalize_text(getattr(t, field_name), policy, predicate=is_predicate)
        values: dict[str, None] = {}
        for j, other in enumerate(g.triples):
            if i == j:
                continue
            value = getattr(other, field_name)
            if normalize_text(value, policy, predicate=is_predicate) == original:
                continue
            swapped = Triple(**{**_fields(t), field_name: value})
            if triple_key(swapped, policy) in present:
                continue
            values.setdefault(value, None)
        if values:
            options.append((i, list(values)))
    return options


def _fields(t: Triple) -> dict:
    return {"subject": t.subject, "predicate": t.predicate, "object": t.object}


def perturb_swap(
    text: str,
    g: SemanticGraph,
    rng: random.Random,
    position: str,
    policy: NormalizationPolicy = DEFAULT_POLICY,
    seed_id: str = "",
    prefix: str = "",
) -> VerifierExample | None:
    """
    Replace the head, relation or tail of one triple with a different value
    taken from another triple of the same graph. The target is the original triple.

    ``position`` is one of "head", "relation", "tail".
    """
    field_name, strategy = _SWAP_POSITIONS[position]
    if len(g) <= 1:
        return None
    options = _swap_options(g, field_name, policy)
    if not options:
        return None
    index, values = rng.choice(options)
    original = g.triples[index]
    swapped = Triple(**{**_fields(original), field_name: rng.choice(values)})
    return VerifierExample(
        verifier_input(text, g.replaced(index, swapped), prefix),
        serialize_triple(original),
        strategy.value,
        seed_id,
    )


def perturb(
    strategy: PerturbationStrategy,
    text: str,
    g: SemanticGraph,
    rng: random.Random,
    policy: NormalizationPolicy = DEFAULT_POLICY,
    seed_id: str = "",
    prefix: str = "",
) -> VerifierExample | None:
    if strategy is PerturbationStrategy.RANDOM_OMIT:
        return perturb_random_omit(text, g, rng, seed_id, prefix)
    if strategy is PerturbationStrategy.HEURISTIC_OMIT:
        return perturb_heuristic_omit(text, g, rng, policy, seed_id, prefix)
    position = strategy.value.removesuffix("_swap")
    return perturb_swap(text, g, rng, position, policy, seed_id, prefix)


def pair_rng(rng_seed: int, index: int, draw: int = 0) -> random.Random:
    """Independent, reproducible stream per (seed, pair, draw)."""
    return random.Random(f"{rng_seed}:{index}:{draw}")


def build_verifier_dataset(
    seed: Sequence[ParallelRecord],
    strategy: PerturbationStrategy = PerturbationStrategy.RANDOM_OMIT,
    rng_seed: int = 0,
    policy: NormalizationPolicy = DEFAULT_POLICY,
    repeat: int = 1,
    prefix: str = "",
) -> tuple[list[VerifierExample], DatasetStats]:
    """
    One correct example per seed pair plus ``repeat`` perturbed ones where the
    strategy applies. Deterministic for a given ``rng_seed``.

    Args:
        seed: Parallel text/graph pairs, taken as correct.
        strategy: How the perturbed copies are made (omit or swap).
        rng_seed: Seed of the only random source.
        policy: Normalization used when comparing triples.
        repeat: Perturbed copies per eligible pair.
        prefix: Instruction prepended to every example input.

    Returns:
        tuple[list[VerifierExample], DatasetStats]: The examples in seed order
        and the counts written next to them.

    Raises:
        EmptySeed: The seed dataset is empty.
    """
    if not seed:
        raise EmptySeed("seed dataset is empty")
    strategy = PerturbationStrategy(strategy)
    stats = DatasetStats(strategy=strategy.value, rng_seed=rng_seed, repeat=repeat)
    examples: list[VerifierExample] = []

    for index, record in enumerate(seed):
        stats.n_seed += 1
        examples.append(make_correct_example(record.text, record.graph, record.id, prefix))
        stats.n_correct += 1

        if len(record.graph) <= 1:
            stats.n_skipped_single_triple += 1
            continue

        for draw in range(repeat):
            example = perturb(
                strategy,
                record.text,
                record.graph,
                pair_rng(rng_seed, index, draw),
                policy,
                record.id,
                prefix,
            )
            if example is None:
                stats.n_skipped_no_candidate += 1
                break
            examples.append(example)
            stats.n_perturbed += 1

    logger.info(
        f"built {stats.n_examples} verifier examples from {stats.n_seed} seed pairs "
        f"({stats.n_skipped_single_triple} single-triple skips)"
    )
    return examples, stats


def filter_seed_pairs(
    records: Iterable[RawRecord],
    max_triples: int = 6,
    policy: NormalizationPolicy = DEFAULT_POLICY,
    source: str = "seed",
) -> list[ParallelRecord]:
    """
    Keep pairs whose graph has at most ``max_triples`` triples. Graphs with a
    non-triple element (sub-property quadruplets) are dropped; any other
    malformed graph is an error.
    """
    kept = []
    for record in records:
        try:
            graph = graph_from_value(record.graph, policy)
        except ArityViolation as e:
            logger.debug(f"dropping seed pair {record.id}: {e}")
            continue
        except GraphError as e:
            raise DatasetFormatError(source, record.line, str(e)) from e
        if len(graph) > max_triples:
            continue
        kept.append(ParallelRecord(record.id, record.text, graph))
    return kept
