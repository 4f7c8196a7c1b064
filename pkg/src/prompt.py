"""
Prompt construction for the text-to-graph LLM.

Layout, one line each, separated by a single newline:

    <instruction>
    Text: <demo text>
    Triples: <given triples>        (correction prompts only)
    Semantic graph: <demo graph>
    ...
    Text: <query>
    Triples: <accumulated missing>  (correction prompts only)
    Semantic graph:
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from src.errors import ConfigError, DatasetFormatError, GraphError, MalformedDemoFile, MissingTriplesRequired
from src.graph import (
    DEFAULT_POLICY,
    NormalizationPolicy,
    SemanticGraph,
    Triple,
    graph_from_value,
    parse_triple_sequence,
    read_jsonl,
    serialize_graph,
    serialize_triples,
    write_jsonl,
)
from src.logger import get_logger

logger = get_logger(__name__)

DEMO_DIR = Path(__file__).resolve().parent.parent / "demos"
DATASET_TAGS = ("kelm", "webnlg", "genwiki")

TEXT_LABEL = "Text:"
TRIPLES_LABEL = "Triples:"
GRAPH_LABEL = "Semantic graph:"


class PromptStyle(str, Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"


_SET_OF_TRIPLES = "Transform the text into a semantic graph consisting of a set of triples."
_SET_OF_TRIPLES_CORRECTION = (
    "Transform the text into a semantic graph consisting of a set of triples "
    "and also add the given triples to the generated semantic graph."
)
_AS_MANY = "Generate as many triples as possible."
_RELATIONS_FIRST = "First produce all relations possible, then produce the graph."

BASE_INSTRUCTIONS = {
    PromptStyle.P1: "Transform the text into a semantic graph.",
    PromptStyle.P2: f"{_SET_OF_TRIPLES} {_AS_MANY}",
    PromptStyle.P3: f"{_SET_OF_TRIPLES} {_RELATIONS_FIRST}",
}

CORRECTION_INSTRUCTIONS = {
    PromptStyle.P1: "Transform the text into a semantic graph and also add the given triples to the generated semantic graph.",
    PromptStyle.P2: f"{_SET_OF_TRIPLES_CORRECTION} {_AS_MANY}",
    PromptStyle.P3: f"{_SET_OF_TRIPLES_CORRECTION} {_RELATIONS_FIRST}",
}


@dataclass(frozen=True)
class Demonstration:
    text: str
    graph: SemanticGraph
    given_triples: tuple[Triple, ...] | None = None

    def __post_init__(self):
        if not len(self.graph):
            raise MalformedDemoFile("demonstration graph is empty")
        if self.given_triples is not None and not self.given_triples:
            raise MalformedDemoFile("given_triples, when present, must not be empty")

    def correction_triples(self) -> tuple[Triple, ...]:
        """Given triples shown in correction prompts; defaults to the graph's last triple."""
        return self.given_triples if self.given_triples else self.graph.triples[-1:]

    def to_row(self) -> dict:
        row = {"text": self.text, "graph": self.graph.to_value()}
        if self.given_triples:
            row["given_triples"] = [t.as_list() for t in self.given_triples]
        return row


@dataclass(frozen=True)
class PromptSpec:
    style: PromptStyle = PromptStyle.P1
    shots: tuple[Demonstration, ...] = ()
    correction: bool = False
    accumulated_missing: tuple[Triple, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "style", PromptStyle(self.style))
        if self.correction and not self.accumulated_missing:
            raise MissingTriplesRequired("a correction prompt needs at least one missing triple")


def _one_line(value: str) -> str:
    # a query or demo spanning several lines would break the block layout
    return " ".join(value.split())


def _demo_block(demo: Demonstration, correction: bool) -> str:
    lines = [f"{TEXT_LABEL} {_one_line(demo.text)}"]
    if correction:
        lines.append(f"{TRIPLES_LABEL} {serialize_triples(demo.correction_triples())}")
    lines.append(f"{GRAPH_LABEL} {serialize_graph(demo.graph)}")
    return "\n".join(lines)


def build_base_prompt(spec: PromptSpec, query_text: str) -> str:
    if spec.correction:
        raise ValueError("build_base_prompt called with a correction spec")
    parts = [BASE_INSTRUCTIONS[spec.style]]
    parts.extend(_demo_block(demo, correction=False) for demo in spec.shots)
    parts.append(f"{TEXT_LABEL} {_one_line(query_text)}\n{GRAPH_LABEL}")
    return "\n".join(parts)


def accumulate(
    accumulated: Sequence[Triple],
    new: Iterable[Triple],
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> tuple[Triple, ...]:
    """Union of previously accumulated and newly predicted missing triples, first occurrence kept."""
    return SemanticGraph(tuple(accumulated) + tuple(new), policy).triples


def build_correction_prompt(
    spec: PromptSpec,
    query_text: str,
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> str:
    if not spec.correction or not spec.accumulated_missing:
        raise MissingTriplesRequired("a correction prompt needs at least one missing triple")
    given = accumulate((), spec.accumulated_missing, policy)
    parts = [CORRECTION_INSTRUCTIONS[spec.style]]
    parts.extend(_demo_block(demo, correction=True) for demo in spec.shots)
    parts.append(
        f"{TEXT_LABEL} {_one_line(query_text)}\n"
        f"{TRIPLES_LABEL} {serialize_triples(given)}\n"
        f"{GRAPH_LABEL}"
    )
    return "\n".join(parts)


def build_prompt(spec: PromptSpec, query_text: str, policy: NormalizationPolicy = DEFAULT_POLICY) -> str:
    if spec.correction:
        return build_correction_prompt(spec, query_text, policy)
    return build_base_prompt(spec, query_text)


def parse_query(prompt: str, policy: NormalizationPolicy = DEFAULT_POLICY) -> tuple[str, SemanticGraph | None] | None:
    """
    Recover the query text and, for correction prompts, the given triples from
    a prompt built by this module. None when the prompt does not have that shape.
    """
    lines = prompt.rstrip().split("\n")
    if len(lines) < 2 or lines[-1] != GRAPH_LABEL:
        return None

    given = None
    if lines[-2].startswith(TRIPLES_LABEL + " "):
        if len(lines) < 3:
            return None
        try:
            given = parse_triple_sequence(lines[-2][len(TRIPLES_LABEL) + 1:], policy)
        except GraphError:
            return None
        text_line = lines[-3]
    else:
        text_line = lines[-2]

    if not text_line.startswith(TEXT_LABEL + " "):
        return None
    return text_line[len(TEXT_LABEL) + 1:], given


# Demonstration files


def demo_path(dataset_tag: str) -> Path:
    if dataset_tag not in DATASET_TAGS:
        raise ConfigError(f"unknown dataset tag {dataset_tag!r}, expected one of {', '.join(DATASET_TAGS)}")
    return DEMO_DIR / f"{dataset_tag}.jsonl"


def load_demonstrations(
    path: str | Path | None = None,
    dataset_tag: str = "webnlg",
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> list[Demonstration]:
    """
    Read ``{"text", "graph", "given_triples"?}`` lines in file order. ``path``
    overrides the bundled file for ``dataset_tag``.
    """
    path = Path(path) if path is not None else demo_path(dataset_tag)
    if not path.exists():
        raise FileNotFoundError(f"demonstration file not found: {path}")

    demos = []
    try:
        for line_number, row in read_jsonl(path):
            if not isinstance(row.get("text"), str) or "graph" not in row:
                raise MalformedDemoFile(f"{path}:{line_number}: demonstration needs 'text' and 'graph'")
            try:
                graph = graph_from_value(row["graph"], policy)
                given = None
                if row.get("given_triples") is not None:
                    given = graph_from_value(row["given_triples"], policy).triples
                demos.append(Demonstration(row["text"], graph, given))
            except (GraphError, MalformedDemoFile) as e:
                raise MalformedDemoFile(f"{path}:{line_number}: {e}") from e
    except DatasetFormatError as e:
        raise MalformedDemoFile(str(e)) from e

    logger.debug(f"loaded {len(demos)} demonstrations from {path}")
    return demos


def select_shots(demos: Sequence[Demonstration], k: int) -> tuple[Demonstration, ...]:
    """The first ``k`` demonstrations."""
    if k < 0:
        raise ConfigError(f"shots must be >= 0, got {k}")
    if k > len(demos):
        raise ConfigError(f"asked for {k} shots but only {len(demos)} demonstrations are available")
    return tuple(demos[:k])


def write_demonstrations(path: str | Path, demos: Iterable[Demonstration]) -> None:
    write_jsonl(Path(path), (demo.to_row() for demo in demos))
