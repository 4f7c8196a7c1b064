from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Protocol

import httpx

from src.cache import ResponseCache
from src.errors import GraphError, MalformedGraph, ProtocolError, UnknownReference, UnparsableVerdict
from src.graph import (
    DEFAULT_POLICY,
    NormalizationPolicy,
    SemanticGraph,
    Triple,
    parse_triple_sequence,
    serialize_triple,
    triple_key,
)
from src.http_client import HttpService
from src.logger import get_logger
from src.perturb import CORRECT, verifier_input

logger = get_logger(__name__)


class VerdictKind(str, Enum):
    CORRECT = "Correct"
    MISSING = "Missing"


class OracleMode(str, Enum):
    ONE_AT_A_TIME = "one_at_a_time"
    ALL = "all"


@dataclass(frozen=True)
class VerifierVerdict:
    kind: VerdictKind
    missing: tuple[Triple, ...] = ()
    raw: str = field(default="", compare=False)
    unparsable: bool = field(default=False, compare=False)  # fail-open Correct

    def __post_init__(self):
        if self.kind is VerdictKind.CORRECT and self.missing:
            raise MalformedGraph("a Correct verdict cannot carry missing triples")
        if self.kind is VerdictKind.MISSING and not self.missing:
            raise MalformedGraph("a Missing verdict needs at least one triple")

    @classmethod
    def correct(cls, raw: str = CORRECT) -> VerifierVerdict:
        return cls(VerdictKind.CORRECT, (), raw)

    @classmethod
    def missing_triples(cls, triples: tuple[Triple, ...], raw: str | None = None) -> VerifierVerdict:
        return cls(VerdictKind.MISSING, tuple(triples), raw if raw is not None else format_missing(triples))

    @property
    def is_correct(self) -> bool:
        return self.kind is VerdictKind.CORRECT

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "missing": [t.as_list() for t in self.missing],
            "raw": self.raw,
            "unparsable": self.unparsable,
        }

    @classmethod
    def from_dict(cls, data: dict) -> VerifierVerdict:
        return cls(
            VerdictKind(data["kind"]),
            tuple(Triple.from_sequence(t) for t in data.get("missing", [])),
            data.get("raw", ""),
            data.get("unparsable", False),
        )


class VerifierBackend(Protocol):
    call_count: int

    def verify(self, text: str, graph: SemanticGraph) -> VerifierVerdict: ...


def format_missing(triples) -> str:
    return ", ".join(serialize_triple(t) for t in triples)


def format_verdict(verdict: VerifierVerdict) -> str:
    """Wire form of a verdict: "Correct" or the missing triples one after another."""
    return CORRECT if verdict.is_correct else format_missing(verdict.missing)


def parse_verdict(raw: str, policy: NormalizationPolicy = DEFAULT_POLICY) -> VerifierVerdict:
    if raw is None:
        raise UnparsableVerdict("")
    if raw.strip().lower() == CORRECT.lower():
        return VerifierVerdict.correct(raw)
    try:
        graph = parse_triple_sequence(raw, policy)
    except GraphError as e:
        raise UnparsableVerdict(raw) from e
    return VerifierVerdict(VerdictKind.MISSING, graph.triples, raw)


def oracle_verify(
    text: str,
    pred: SemanticGraph,
    reference: SemanticGraph,
    mode: OracleMode | str = OracleMode.ONE_AT_A_TIME,
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> VerifierVerdict:
    """Reference triples absent from ``pred``, in reference order; Correct when there are none."""
    mode = OracleMode(mode)
    present = pred.keys(policy)
    diff = tuple(t for t in reference if triple_key(t, policy) not in present)
    if not diff:
        return VerifierVerdict.correct()
    if mode is OracleMode.ONE_AT_A_TIME:
        diff = diff[:1]
    return VerifierVerdict.missing_triples(diff)


def _text_key(text: str) -> str:
    return " ".join(text.split())


class OracleVerifier:
    """Verifier that knows the reference graph of every text."""

    def __init__(
        self,
        references: Mapping[str, SemanticGraph],
        mode: OracleMode | str = OracleMode.ONE_AT_A_TIME,
        policy: NormalizationPolicy = DEFAULT_POLICY,
    ):
        self.references = {_text_key(text): graph for text, graph in references.items()}
        self.mode = OracleMode(mode)
        self.policy = policy
        self._count_lock = threading.Lock()
        self.call_count = 0

    def verify(self, text: str, graph: SemanticGraph) -> VerifierVerdict:
        with self._count_lock:
            self.call_count += 1
        reference = self.references.get(_text_key(text))
        if reference is None:
            raise UnknownReference(f"oracle has no reference for text {text[:60]!r}")
        return oracle_verify(text, graph, reference, self.mode, self.policy)


class HttpVerifier:
    """
    Client for a verifier service that answers ``POST {"input": ...}`` with
    ``{"output": "Correct" | "<triples>"}``.
    """

    def __init__(
        self,
        base_url: str,
        endpoint: str = "/verify",
        instruction_prefix: str = "",
        api_key_env: str | None = None,
        cache: ResponseCache | None = None,
        policy: NormalizationPolicy = DEFAULT_POLICY,
        timeout: float = 60,
        max_attempts: int = 5,
        backoff: float = 1.0,
        max_in_flight: int = 4,
        min_interval: float = 0.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint
        self.instruction_prefix = instruction_prefix
        self.cache = cache
        self.policy = policy
        self.service = HttpService(
            base_url,
            api_key_env=api_key_env,
            timeout=timeout,
            max_attempts=max_attempts,
            backoff=backoff,
            max_in_flight=max_in_flight,
            min_interval=min_interval,
            transport=transport,
        )
        self.identity = json.dumps({"verifier": base_url + endpoint, "prefix": instruction_prefix}, sort_keys=True)
        self._count_lock = threading.Lock()
        self.call_count = 0

    def _request(self, payload: str) -> str:
        with self._count_lock:
            self.call_count += 1
        body = self.service.post(self.endpoint, {"input": payload})
        output = body.get("output") if isinstance(body, dict) else None
        if not isinstance(output, str):
            raise ProtocolError("verifier response has no string 'output' field")
        return output

    def verify(self, text: str, graph: SemanticGraph) -> VerifierVerdict:
        payload = verifier_input(text, graph, self.instruction_prefix)
        if self.cache is None:
            raw = self._request(payload)
        else:
            raw = self.cache.get_or_compute(self.identity, payload, lambda: self._request(payload))
        return parse_verdict(raw, self.policy)

    def close(self) -> None:
        self.service.close()
