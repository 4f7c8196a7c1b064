"""
Graph evaluation metrics.

- T-F1: triple match F1, averaged over instances.
- G-F1: share of instances whose predicted digraph equals the gold digraph.
- G-BS: F1 over an optimal one-to-one alignment of edge sentences.
- GED: unit-cost graph edit distance, normalized by |V1|+|E1|+|V2|+|E2|, times 100.

All scores come back in [0, 1] per instance; MetricReport scales to percentages.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import networkx as nx
import numpy as np
from scipy.optimize import linear_sum_assignment

from src.errors import EmptyCorpus
from src.graph import (
    DEFAULT_POLICY,
    NormalizationPolicy,
    SemanticGraph,
    to_digraph,
    triple_key,
)
from src.logger import get_logger
from src.similarity import EdgeSimilarity, TokenOverlapSimilarity

logger = get_logger(__name__)

# exact search up to this many nodes per graph, greedy upper bound above it
DEFAULT_GED_BUDGET = 8


def _f1(overlap: float, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    if n_pred == 0 or n_gold == 0:
        return 0.0, 0.0, 0.0
    precision = overlap / n_pred
    recall = overlap / n_gold
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def triple_prf(
    pred: SemanticGraph,
    gold: SemanticGraph,
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> tuple[float, float, float]:
    """Precision, recall and F1 over normalized triples."""
    pred_keys = pred.keys(policy)
    gold_keys = gold.keys(policy)
    return _f1(len(pred_keys & gold_keys), len(pred_keys), len(gold_keys))


def triple_match_f1(pred: SemanticGraph, gold: SemanticGraph, policy: NormalizationPolicy = DEFAULT_POLICY) -> float:
    return triple_prf(pred, gold, policy)[2]


def graphs_match(pred: SemanticGraph, gold: SemanticGraph, policy: NormalizationPolicy = DEFAULT_POLICY) -> bool:
    """Equal node sets and equal labeled edge sets."""
    return to_digraph(pred, policy) == to_digraph(gold, policy)


def graph_match_f1(
    pairs: Sequence[tuple[SemanticGraph, SemanticGraph]],
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> float:
    if not pairs:
        raise EmptyCorpus("graph_match_f1 needs at least one pair")
    matches = sum(1 for pred, gold in pairs if graphs_match(pred, gold, policy))
    return matches / len(pairs)


# G-BS


@dataclass(frozen=True)
class Alignment:
    pairs: tuple[tuple[int, int, float], ...]  # (pred index, gold index, score)
    unmatched_pred: frozenset[int]
    unmatched_gold: frozenset[int]

    @property
    def total(self) -> float:
        return math.fsum(score for _, _, score in self.pairs)


def align_edges(pred_sentences: Sequence[str], gold_sentences: Sequence[str], sim: EdgeSimilarity) -> Alignment:
    """Maximum-weight one-to-one assignment between predicted and gold edge sentences."""
    if not pred_sentences or not gold_sentences:
        return Alignment((), frozenset(range(len(pred_sentences))), frozenset(range(len(gold_sentences))))

    matrix = np.asarray(sim.score_matrix(pred_sentences, gold_sentences), dtype=float)
    rows, cols = linear_sum_assignment(matrix, maximize=True)
    pairs = tuple((int(i), int(j), float(matrix[i, j])) for i, j in zip(rows, cols))
    return Alignment(
        pairs,
        frozenset(range(len(pred_sentences))) - {i for i, _, _ in pairs},
        frozenset(range(len(gold_sentences))) - {j for _, j, _ in pairs},
    )


def edge_sentences(g: SemanticGraph, policy: NormalizationPolicy = DEFAULT_POLICY) -> list[str]:
    """Normalized "subject predicate object" sentences, duplicates removed."""
    sentences: dict[str, None] = {}
    for t in g:
        sentences.setdefault(" ".join(triple_key(t, policy)), None)
    return list(sentences)


def g_bertscore(
    pred: SemanticGraph,
    gold: SemanticGraph,
    sim: EdgeSimilarity | None = None,
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> float:
    sim = sim or TokenOverlapSimilarity()
    pred_sentences = edge_sentences(pred, policy)
    gold_sentences = edge_sentences(gold, policy)
    alignment = align_edges(pred_sentences, gold_sentences, sim)
    return _f1(alignment.total, len(pred_sentences), len(gold_sentences))[2]


# GED


def _label_diff(a: tuple[str, ...], b: tuple[str, ...]) -> float:
    # relabel as many as possible, insert or delete the rest
    common = sum((Counter(a) & Counter(b)).values())
    return float(max(len(a), len(b)) - common)


# self-loop relations travel with their node
def _node_subst_cost(a: dict, b: dict) -> float:
    return (0.0 if a["label"] == b["label"] else 1.0) + _label_diff(a["loops"], b["loops"])


def _node_indel_cost(a: dict) -> float:
    return 1.0 + len(a["loops"])


def _edge_subst_cost(a: dict, b: dict) -> float:
    return _label_diff(a["labels"], b["labels"])


def _edge_indel_cost(a: dict) -> float:
    return float(len(a["labels"]))


_COSTS = dict(
    node_subst_cost=_node_subst_cost,
    node_del_cost=_node_indel_cost,
    node_ins_cost=_node_indel_cost,
    edge_subst_cost=_edge_subst_cost,
    edge_del_cost=_edge_indel_cost,
    edge_ins_cost=_edge_indel_cost,
)


def _timed_search(g1: nx.DiGraph, g2: nx.DiGraph, upper_bound: int, timeout: float | None) -> tuple[float | None, bool]:
    """Walk the decreasing upper bounds; exhausting them proves the last one optimal."""
    if timeout is None:
        return nx.graph_edit_distance(g1, g2, upper_bound=upper_bound, **_COSTS), True
    deadline = time.monotonic() + timeout
    best = None
    for cost in nx.optimize_graph_edit_distance(g1, g2, upper_bound=upper_bound, **_COSTS):
        best = cost
        if time.monotonic() > deadline:
            logger.info(f"GED search stopped after {timeout}s at upper bound {best}")
            return best, False
    return best, True


@dataclass(frozen=True)
class GedResult:
    value: float  # 100 * raw / normalizer, in [0, 100]
    raw: float
    normalizer: int
    exact: bool


def graph_edit_distance(
    pred: SemanticGraph,
    gold: SemanticGraph,
    policy: NormalizationPolicy = DEFAULT_POLICY,
    budget: int = DEFAULT_GED_BUDGET,
    timeout: float | None = None,
) -> GedResult:
    """
    Unit-cost edit distance between the two labeled digraphs.

    Exact when both graphs have at most ``budget`` nodes and the search finishes
    within ``timeout`` seconds. Otherwise the best upper bound found by
    networkx's anytime search is used; ``exact`` tells which.
    """
    dp = to_digraph(pred, policy)
    dg = to_digraph(gold, policy)
    normalizer = len(dp.nodes) + len(dp.edges) + len(dg.nodes) + len(dg.edges)
    exact = True

    if dp == dg:
        raw = 0.0
    elif not dp.nodes or not dg.nodes:
        raw = float(normalizer)
    else:
        g1, g2 = dp.to_networkx(), dg.to_networkx()
        if max(len(dp.nodes), len(dg.nodes)) <= budget:
            raw, exact = _timed_search(g1, g2, normalizer, timeout)
        else:
            raw = next(nx.optimize_graph_edit_distance(g1, g2, upper_bound=normalizer, **_COSTS), None)
            exact = False
            logger.info(f"GED above budget ({len(dp.nodes)}/{len(dg.nodes)} nodes), using upper bound {raw}")
        if raw is None:
            raw = float(normalizer)

    normalizer = normalizer or 1
    return GedResult(min(100.0, 100.0 * raw / normalizer), float(raw), normalizer, exact)


# Corpus level


@dataclass(frozen=True)
class InstanceScores:
    id: str
    t_f1: float
    g_match: bool
    g_bs: float
    ged: float
    ged_exact: bool

    def to_dict(self) -> dict:
        return asdict(self)


def score_pair(
    pred: SemanticGraph,
    gold: SemanticGraph,
    policy: NormalizationPolicy = DEFAULT_POLICY,
    sim: EdgeSimilarity | None = None,
    budget: int = DEFAULT_GED_BUDGET,
    instance_id: str = "",
    ged_timeout: float | None = None,
) -> InstanceScores:
    ged = graph_edit_distance(pred, gold, policy, budget, ged_timeout)
    return InstanceScores(
        id=instance_id,
        t_f1=triple_match_f1(pred, gold, policy),
        g_match=graphs_match(pred, gold, policy),
        g_bs=g_bertscore(pred, gold, sim, policy),
        ged=ged.value,
        ged_exact=ged.exact,
    )


@dataclass(frozen=True)
class MetricReport:
    t_f1: float
    g_f1: float
    g_bs: float
    ged: float
    n_instances: int
    n_approximate: int = 0  # instances whose GED is an upper bound

    @classmethod
    def from_scores(cls, scores: Sequence[InstanceScores]) -> MetricReport:
        if not scores:
            raise EmptyCorpus("no instances to aggregate")
        n = len(scores)
        return cls(
            t_f1=100.0 * math.fsum(s.t_f1 for s in scores) / n,
            g_f1=100.0 * sum(1 for s in scores if s.g_match) / n,
            g_bs=100.0 * math.fsum(s.g_bs for s in scores) / n,
            ged=math.fsum(s.ged for s in scores) / n,
            n_instances=n,
            n_approximate=sum(1 for s in scores if not s.ged_exact),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> MetricReport:
        return cls(**data)


def score_corpus(
    pairs: Sequence[tuple[SemanticGraph, SemanticGraph]],
    policy: NormalizationPolicy = DEFAULT_POLICY,
    sim: EdgeSimilarity | None = None,
    budget: int = DEFAULT_GED_BUDGET,
    ids: Sequence[str] | None = None,
    workers: int = 1,
    ged_timeout: float | None = None,
) -> list[InstanceScores]:
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    sim = sim or TokenOverlapSimilarity()

    def _score(index: int) -> InstanceScores:
        pred, gold = pairs[index]
        return score_pair(pred, gold, policy, sim, budget, ids[index], ged_timeout)

    if workers <= 1:
        return [_score(i) for i in range(len(pairs))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_score, range(len(pairs))))


def evaluate_corpus(
    pairs: Sequence[tuple[SemanticGraph, SemanticGraph]],
    policy: NormalizationPolicy = DEFAULT_POLICY,
    sim: EdgeSimilarity | None = None,
    budget: int = DEFAULT_GED_BUDGET,
    workers: int = 1,
    ged_timeout: float | None = None,
) -> MetricReport:
    if not pairs:
        raise EmptyCorpus("evaluate_corpus needs at least one pair")
    return MetricReport.from_scores(score_corpus(pairs, policy, sim, budget, workers=workers, ged_timeout=ged_timeout))


def format_report_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    """Aligned plain-text table, one row per stage (Base, Iteration 1, ...)."""
    label_width = max([len("Stage")] + [len(label) for label, _ in rows])
    header = f"{'Stage':<{label_width}}  {'T-F1':>7}  {'G-F1':>7}  {'G-BS':>7}  {'GED':>7}  {'N':>6}"
    lines = [header, "-" * len(header)]
    for label, report in rows:
        lines.append(
            f"{label:<{label_width}}  {report.t_f1:>7.2f}  {report.g_f1:>7.2f}  "
            f"{report.g_bs:>7.2f}  {report.ged:>7.2f}  {report.n_instances:>6d}"
        )
    return "\n".join(lines)
