"""
Edge similarity backends for the G-BS metric.

Each triple is read as a sentence ("subject predicate object") and a backend
scores candidate sentences against reference sentences. Scores are in [0, 1].
"""

from __future__ import annotations

import os
import threading
from collections import Counter
from typing import Protocol, Sequence

import httpx
import numpy as np
from tenacity import (
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from src.errors import ConfigError, SimilarityBackendFailure
from src.logger import get_logger

logger = get_logger(__name__)


class EdgeSimilarity(Protocol):
    name: str

    def score(self, edge_a: str, edge_b: str) -> float: ...

    def score_matrix(self, candidates: Sequence[str], references: Sequence[str]) -> np.ndarray: ...


class _PairwiseSimilarity:
    name = "pairwise"

    def score(self, edge_a: str, edge_b: str) -> float:
        raise NotImplementedError

    def score_matrix(self, candidates: Sequence[str], references: Sequence[str]) -> np.ndarray:
        matrix = np.zeros((len(candidates), len(references)), dtype=float)
        for i, candidate in enumerate(candidates):
            for j, reference in enumerate(references):
                matrix[i, j] = self.score(candidate, reference)
        return matrix


class ExactMatchSimilarity(_PairwiseSimilarity):
    name = "exact"

    def score(self, edge_a: str, edge_b: str) -> float:
        return 1.0 if edge_a == edge_b else 0.0


class TokenOverlapSimilarity(_PairwiseSimilarity):
    """Token-level F1 over whitespace tokens (multiset overlap)."""

    name = "token"

    def score(self, edge_a: str, edge_b: str) -> float:
        tokens_a = edge_a.split()
        tokens_b = edge_b.split()
        if not tokens_a and not tokens_b:
            return 1.0
        common = sum((Counter(tokens_a) & Counter(tokens_b)).values())
        if common == 0:
            return 0.0
        precision = common / len(tokens_a)
        recall = common / len(tokens_b)
        return 2 * precision * recall / (precision + recall)


class RemoteEmbeddingSimilarity:
    """
    Scores through an external embedding service.

    Wire format: POST {"candidates": [...], "references": [...]} and the
    service answers {"scores": [[...]]}, one row per candidate. Requests are
    serialized with a lock so one instance can be shared by evaluation workers.
    """

    name = "remote"

    def __init__(
        self,
        endpoint: str,
        api_key_env: str | None = None,
        timeout: float = 30,
        transport: httpx.BaseTransport | None = None,
    ):
        if not endpoint:
            raise ConfigError("remote similarity backend needs an endpoint")
        headers = {}
        if api_key_env:
            api_key = os.getenv(api_key_env)
            if not api_key:
                raise ConfigError(f"{api_key_env} not defined")
            headers["Authorization"] = f"Bearer {api_key}"
        self.endpoint = endpoint
        self.client = httpx.Client(
            timeout=httpx.Timeout(timeout, connect=10),
            headers=headers,
            transport=transport,
        )
        self._lock = threading.Lock()

    @retry(
        stop=stop_after_attempt(3),
        wait=wait_exponential(multiplier=1, min=1, max=10),
        retry=retry_if_exception_type(httpx.TransportError),
        reraise=True,
    )
    def _try_post(self, payload: dict) -> dict:
        response = self.client.post(self.endpoint, json=payload)
        response.raise_for_status()
        return response.json()

    def score_matrix(self, candidates: Sequence[str], references: Sequence[str]) -> np.ndarray:
        if not candidates or not references:
            return np.zeros((len(candidates), len(references)), dtype=float)

        payload = {"candidates": list(candidates), "references": list(references)}
        try:
            with self._lock:
                body = self._try_post(payload)
        except (httpx.HTTPError, ValueError) as e:
            logger.error(f"✖ Similarity service request failed: {e}")
            raise SimilarityBackendFailure(str(e)) from e

        try:
            matrix = np.asarray(body["scores"], dtype=float)
        except (KeyError, TypeError, ValueError) as e:
            raise SimilarityBackendFailure(f"response has no usable 'scores' matrix: {e}") from e
        if matrix.shape != (len(candidates), len(references)):
            raise SimilarityBackendFailure(
                f"expected a {len(candidates)}x{len(references)} score matrix, got shape {matrix.shape}"
            )
        return np.clip(matrix, 0.0, 1.0)

    def score(self, edge_a: str, edge_b: str) -> float:
        return float(self.score_matrix([edge_a], [edge_b])[0, 0])


def make_similarity(name: str, endpoint: str | None = None, api_key_env: str | None = None) -> EdgeSimilarity:
    if name == "exact":
        return ExactMatchSimilarity()
    if name == "token":
        return TokenOverlapSimilarity()
    if name == "remote":
        return RemoteEmbeddingSimilarity(endpoint, api_key_env=api_key_env)
    raise ConfigError(f"unknown similarity backend: {name!r} (expected exact, token or remote)")
