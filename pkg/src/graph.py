"""
Triples, semantic graphs and the linearized graph format.

A semantic graph is written as a bracketed list of bracketed triples:

    [[Francisco Uranga, occupation, swimmer], [Francisco Uranga, sex or gender, male]]

The parser also accepts quoted items (single, double or typographic quotes),
a bare single triple without the outer list, and arbitrary prose around the
list, which is what chat models tend to return.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import networkx as nx

from src.errors import (
    ArityViolation,
    ConfigError,
    DatasetFormatError,
    EmptyField,
    GraphError,
    MalformedGraph,
)
from src.logger import get_logger

logger = get_logger(__name__)

_QUOTE_PAIRS = {'"': '"', "'": "'", "“": "”", "‘": "’", "`": "`"}
_CAMEL_BOUNDARY = re.compile(r"(?<=[a-z0-9])(?=[A-Z])")
_WHITESPACE = re.compile(r"\s+")
_NEEDS_QUOTING = re.compile(r'[\[\],"\\]')


@dataclass(frozen=True)
class NormalizationPolicy:
    """String transforms applied before two triples are compared."""

    case_fold: bool = True
    collapse_whitespace: bool = True
    strip_surrounding_quotes: bool = True
    unify_separators: bool = True  # predicates only: underscores and camelCase become spaces

    @classmethod
    def strict(cls) -> NormalizationPolicy:
        return cls(False, False, False, False)

    @classmethod
    def from_name(cls, name: str) -> NormalizationPolicy:
        if name == "default":
            return cls()
        if name == "strict":
            return cls.strict()
        raise ConfigError(f"unknown normalization policy: {name!r} (expected 'default' or 'strict')")


DEFAULT_POLICY = NormalizationPolicy()
STRICT_POLICY = NormalizationPolicy.strict()


def _strip_quotes(value: str) -> str:
    while len(value) >= 2 and _QUOTE_PAIRS.get(value[0]) == value[-1]:
        value = value[1:-1].strip()
    return value


def normalize_text(value: str, policy: NormalizationPolicy = DEFAULT_POLICY, predicate: bool = False) -> str:
    value = value.strip()
    if policy.strip_surrounding_quotes:
        value = _strip_quotes(value)
    if predicate and policy.unify_separators:
        value = _CAMEL_BOUNDARY.sub(" ", value.replace("_", " "))
    if policy.case_fold:
        value = value.casefold()
    if policy.collapse_whitespace:
        value = _WHITESPACE.sub(" ", value)
    return value.strip()


@dataclass(frozen=True)
class Triple:
    subject: str
    predicate: str
    object: str

    def __post_init__(self):
        for name in ("subject", "predicate", "object"):
            value = getattr(self, name)
            if not isinstance(value, str):
                raise MalformedGraph(f"triple {name} must be a string, got {type(value).__name__}")
            if not value.strip():
                raise EmptyField(f"triple {name} is empty")

    @classmethod
    def from_sequence(cls, items: Sequence[Any]) -> Triple:
        if len(items) != 3:
            raise ArityViolation(f"expected 3 elements per triple, got {len(items)}: {list(items)!r}")
        return cls(*(_scalar(item) for item in items))

    def as_list(self) -> list[str]:
        return [self.subject, self.predicate, self.object]

    def sentence(self) -> str:
        """The triple read as a sentence, "subject predicate object"."""
        return f"{self.subject} {self.predicate} {self.object}"


def _scalar(item: Any) -> str:
    if isinstance(item, bool) or item is None or isinstance(item, (list, dict)):
        raise MalformedGraph(f"triple element must be a string, got {item!r}")
    return item if isinstance(item, str) else str(item)


def normalize(t: Triple, policy: NormalizationPolicy = DEFAULT_POLICY) -> Triple:
    """Apply ``policy`` to each field. Raises EmptyField when a field normalizes to nothing."""
    return Triple(
        normalize_text(t.subject, policy),
        normalize_text(t.predicate, policy, predicate=True),
        normalize_text(t.object, policy),
    )


def triple_key(t: Triple, policy: NormalizationPolicy = DEFAULT_POLICY) -> tuple[str, str, str]:
    n = normalize(t, policy)
    return n.subject, n.predicate, n.object


@dataclass(frozen=True)
class SemanticGraph:
    """Ordered, duplicate-free triples. Duplicates under ``policy`` are dropped on construction."""

    triples: tuple[Triple, ...] = ()
    policy: NormalizationPolicy = field(default=DEFAULT_POLICY, compare=False)

    def __post_init__(self):
        seen = set()
        kept = []
        for t in self.triples:
            key = triple_key(t, self.policy)
            if key in seen:
                continue
            seen.add(key)
            kept.append(t)
        object.__setattr__(self, "triples", tuple(kept))

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self) -> Iterator[Triple]:
        return iter(self.triples)

    def keys(self, policy: NormalizationPolicy | None = None) -> frozenset[tuple[str, str, str]]:
        policy = policy or self.policy
        return frozenset(triple_key(t, policy) for t in self.triples)

    def contains(self, t: Triple, policy: NormalizationPolicy | None = None) -> bool:
        return triple_key(t, policy or self.policy) in self.keys(policy)

    def without(self, index: int) -> SemanticGraph:
        return SemanticGraph(self.triples[:index] + self.triples[index + 1:], self.policy)

    def replaced(self, index: int, triple: Triple) -> SemanticGraph:
        return SemanticGraph(self.triples[:index] + (triple,) + self.triples[index + 1:], self.policy)

    def to_value(self) -> list[list[str]]:
        """JSONL shape: a list of 3-element string lists."""
        return [t.as_list() for t in self.triples]


# Parsing


class _ListParser:
    """Recursive-descent reader for one bracketed list starting at ``pos``."""

    def __init__(self, text: str, pos: int):
        self.text = text
        self.pos = pos
        self.reached_end = False

    def _skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _eof(self) -> MalformedGraph:
        self.reached_end = True
        return MalformedGraph("unbalanced brackets: list is never closed")

    def parse_list(self) -> list:
        self.pos += 1  # '['
        items: list = []
        while True:
            self._skip_ws()
            if self.pos >= len(self.text):
                raise self._eof()
            ch = self.text[self.pos]
            if ch == "]":
                # empty list or trailing comma
                self.pos += 1
                return items
            items.append(self.parse_list() if ch == "[" else self.parse_scalar())
            self._skip_ws()
            if self.pos >= len(self.text):
                raise self._eof()
            ch = self.text[self.pos]
            self.pos += 1
            if ch == "]":
                return items
            if ch != ",":
                raise MalformedGraph(f"unexpected {ch!r} at offset {self.pos - 1}")

    def parse_scalar(self) -> str:
        start = self.pos
        opener = self.text[start]
        if opener in _QUOTE_PAIRS:
            quoted = self._parse_quoted(opener)
            if quoted is not None:
                return quoted
            self.pos = start
        return self._parse_bare()

    def _parse_quoted(self, opener: str) -> str | None:
        closer = _QUOTE_PAIRS[opener]
        i = self.pos + 1
        while i < len(self.text):
            ch = self.text[i]
            if ch == "\\":
                i += 2
                continue
            if ch == closer:
                break
            i += 1
        else:
            return None
        body = self.text[self.pos + 1:i]
        # a quote that does not end the item (O'Brien) is part of a bare token
        j = i + 1
        while j < len(self.text) and self.text[j].isspace():
            j += 1
        if j < len(self.text) and self.text[j] not in ",]":
            return None
        self.pos = i + 1
        return _unescape(body, opener)

    def _parse_bare(self) -> str:
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in ",][":
            self.pos += 1
        if self.pos < len(self.text) and self.text[self.pos] == "[":
            raise MalformedGraph(f"unexpected '[' inside an item at offset {self.pos}")
        value = self.text[start:self.pos].strip()
        # unterminated or oddly placed quotes, e.g. 'O'Brien'
        if len(value) >= 2 and _QUOTE_PAIRS.get(value[0]) == value[-1]:
            value = value[1:-1]
        return value


def _unescape(body: str, opener: str) -> str:
    if opener == '"':
        try:
            return json.loads(f'"{body}"')
        except json.JSONDecodeError:
            return body.replace('\\"', '"').replace("\\\\", "\\")
    return body.replace("\\" + opener, opener).replace("\\\\", "\\")


def _graph_from_items(items: list, policy: NormalizationPolicy) -> SemanticGraph:
    if not items:
        return SemanticGraph((), policy)
    if all(isinstance(item, list) for item in items):
        triples = []
        for inner in items:
            if any(isinstance(element, list) for element in inner):
                raise MalformedGraph(f"triple elements must be scalars: {inner!r}")
            triples.append(Triple.from_sequence(inner))
        return SemanticGraph(tuple(triples), policy)
    if not any(isinstance(item, list) for item in items):
        return SemanticGraph((Triple.from_sequence(items),), policy)
    raise MalformedGraph("graph mixes triples and bare items")


def parse_graph(raw: str, policy: NormalizationPolicy = DEFAULT_POLICY) -> SemanticGraph:
    """
    Read a linearized graph out of ``raw``.

    Text before and after the list is ignored. When several bracketed lists
    appear, the first one that forms a valid graph wins.

    Raises:
        MalformedGraph: empty input, unbalanced brackets or no list at all.
        ArityViolation: an inner list does not have exactly three elements.
    """
    if raw is None or not raw.strip():
        raise MalformedGraph("empty input")

    first_error: GraphError | None = None
    start = raw.find("[")
    while start != -1:
        parser = _ListParser(raw, start)
        try:
            items = parser.parse_list()
            return _graph_from_items(items, policy)
        except GraphError as e:
            first_error = first_error or e
            if parser.reached_end:
                break
            # skip a whole list that parsed but was not a graph, otherwise move on by one
            resume = parser.pos if isinstance(e, ArityViolation) else start + 1
            start = raw.find("[", resume)

    if first_error is None:
        raise MalformedGraph("input contains no bracketed list")
    raise first_error


def parse_triple_sequence(raw: str, policy: NormalizationPolicy = DEFAULT_POLICY) -> SemanticGraph:
    """
    Read every bracketed list in ``raw`` one after another, e.g.
    ``[a, r, b], [c, s, d]`` or ``[[a, r, b]] [c, s, d]``, into one graph.
    """
    triples: list[Triple] = []
    start = raw.find("[") if raw else -1
    while start != -1:
        parser = _ListParser(raw, start)
        triples.extend(_graph_from_items(parser.parse_list(), policy).triples)
        start = raw.find("[", parser.pos)
    if not triples:
        raise MalformedGraph("no triples found")
    return SemanticGraph(tuple(triples), policy)


def graph_from_value(value: Any, policy: NormalizationPolicy = DEFAULT_POLICY) -> SemanticGraph:
    """Build a graph from a JSONL ``graph`` field: list of lists or a linearized string."""
    if isinstance(value, str):
        return parse_graph(value, policy)
    if isinstance(value, list):
        return _graph_from_items(value, policy)
    raise MalformedGraph(f"graph must be a list or a string, got {type(value).__name__}")


# Serialization


def _quote(value: str) -> str:
    if (
        _NEEDS_QUOTING.search(value)
        or value[0] in _QUOTE_PAIRS
        or value != value.strip()
    ):
        return json.dumps(value, ensure_ascii=False)
    return value


def serialize_triple(t: Triple) -> str:
    return "[" + ", ".join(_quote(item) for item in t.as_list()) + "]"


def serialize_triples(triples: Iterable[Triple]) -> str:
    return "[" + ", ".join(serialize_triple(t) for t in triples) + "]"


def serialize_graph(g: SemanticGraph) -> str:
    """Canonical text form ``[[s1, p1, o1], [s2, p2, o2]]`` in insertion order."""
    return serialize_triples(g.triples)


# Views and graph operations


@dataclass(frozen=True)
class LabeledDigraph:
    nodes: frozenset[str]
    edges: frozenset[tuple[str, str, str]]  # (source, target, relation)

    def to_networkx(self) -> nx.DiGraph:
        """
        networkx view used by the edit distance. Parallel relations between the
        same ordered node pair are folded into one edge whose ``labels``
        attribute holds all of them. Self-loop relations go on the node as
        ``loops``, since the edit distance search does not see self-loop edges.
        """
        graph = nx.DiGraph()
        loops: dict[str, list[str]] = {}
        labels: dict[tuple[str, str], list[str]] = {}
        for source, target, relation in self.edges:
            if source == target:
                loops.setdefault(source, []).append(relation)
            else:
                labels.setdefault((source, target), []).append(relation)
        for node in sorted(self.nodes):
            graph.add_node(node, label=node, loops=tuple(sorted(loops.get(node, ()))))
        for (source, target), rels in sorted(labels.items()):
            graph.add_edge(source, target, labels=tuple(sorted(rels)))
        return graph


def to_digraph(g: SemanticGraph, policy: NormalizationPolicy = DEFAULT_POLICY) -> LabeledDigraph:
    keys = g.keys(policy)
    nodes = frozenset(n for s, _, o in keys for n in (s, o))
    edges = frozenset((s, o, p) for s, p, o in keys)
    return LabeledDigraph(nodes, edges)


def merge_missing(
    g: SemanticGraph,
    missing: Iterable[Triple],
    policy: NormalizationPolicy | None = None,
) -> SemanticGraph:
    """Append each missing triple not already present; original triples keep their place."""
    return SemanticGraph(g.triples + tuple(missing), policy or g.policy)


def graph_entities(g: SemanticGraph, policy: NormalizationPolicy = DEFAULT_POLICY) -> list[str]:
    """Distinct normalized subjects and objects, in first-seen order."""
    seen: dict[str, None] = {}
    for t in g:
        seen.setdefault(normalize_text(t.subject, policy), None)
        seen.setdefault(normalize_text(t.object, policy), None)
    return list(seen)


def surface_overlap(text: str, g: SemanticGraph, policy: NormalizationPolicy = DEFAULT_POLICY) -> float:
    """Fraction of the graph's entities found verbatim in the text. 1.0 for an empty graph."""
    entities = graph_entities(g, policy)
    if not entities:
        return 1.0
    haystack = normalize_text(text, policy)
    found = sum(1 for entity in entities if entity in haystack)
    return found / len(entities)


# Parallel data (JSONL)


@dataclass(frozen=True)
class RawRecord:
    id: str
    text: str
    graph: Any
    line: int


@dataclass(frozen=True)
class ParallelRecord:
    id: str
    text: str
    graph: SemanticGraph

    def to_row(self) -> dict:
        return {"id": self.id, "text": self.text, "graph": self.graph.to_value()}


def read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line number, object)`` for every non-blank line."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as file:
        for line_number, line in enumerate(file, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(path, line_number, f"invalid JSON: {e.msg}") from e
            if not isinstance(row, dict):
                raise DatasetFormatError(path, line_number, "expected a JSON object")
            yield line_number, row


def read_records(path: Path, require_text: bool = True) -> list[RawRecord]:
    """Raw rows of a parallel file. Prediction files may leave out ``text``."""
    records = []
    for index, (line_number, row) in enumerate(read_jsonl(path)):
        text = row.get("text", None if require_text else "")
        if not isinstance(text, str):
            raise DatasetFormatError(path, line_number, "missing string field 'text'")
        if "graph" not in row:
            raise DatasetFormatError(path, line_number, "missing field 'graph'")
        record_id = str(row.get("id", index))
        records.append(RawRecord(record_id, text, row["graph"], line_number))
    return records


def load_parallel(path: Path, policy: NormalizationPolicy = DEFAULT_POLICY) -> list[ParallelRecord]:
    """Read and parse a ``{"id", "text", "graph"}`` file; any bad graph is an error."""
    pairs = []
    for record in read_records(path):
        try:
            graph = graph_from_value(record.graph, policy)
        except GraphError as e:
            raise DatasetFormatError(path, record.line, str(e)) from e
        pairs.append(ParallelRecord(record.id, record.text, graph))
    return pairs


def write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as file:
        for row in rows:
            file.write(json.dumps(row, ensure_ascii=False) + "\n")
