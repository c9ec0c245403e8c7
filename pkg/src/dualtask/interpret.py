"""Decoded concept lists and keyword-based pruning of result lists."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .data import Vocabulary
from .index import Index, IndexEntry, RankedList

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodedConceptList:
    video_id: str
    concepts: tuple  # (token, probability) pairs, probability non-increasing
    k: int

    @property
    def tokens(self) -> list[str]:
        return [t for t, _ in self.concepts]


@dataclass(frozen=True)
class PruneSpec:
    keywords: tuple
    concept_depth: int = 30
    result_depth: int = 10

    def __post_init__(self):
        if not self.keywords:
            raise ValueError("a prune spec needs at least one keyword")
        if self.concept_depth < 1 or self.result_depth < 1:
            raise ValueError("depths must be >= 1")


def decode_concepts(entry: IndexEntry, vocab: Vocabulary, k: int) -> DecodedConceptList:
    """Top-k concepts; equal probabilities keep ascending vocabulary order."""
    m = entry.concepts.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in [1, {m}]")
    order = np.argsort(-entry.concepts, kind="stable")[:k]
    return DecodedConceptList(
        entry.video_id,
        tuple((vocab.token(i), float(entry.concepts[i])) for i in order),
        k,
    )


def prune_by_keywords(ranked: RankedList, index: Index, spec: PruneSpec, vocab: Vocabulary):
    """Split the top ``result_depth`` videos by keyword presence.

    A video is kept iff every keyword is among its top ``concept_depth``
    decoded concepts.  Keywords outside the vocabulary can never match.
    Returns ``(kept, removed)``, both in input order.
    """
    if len(ranked) == 0:
        raise ValueError("cannot prune an empty list")
    missing = [kw for kw in spec.keywords if kw not in vocab]
    if missing:
        warnings.warn(f"keywords not in vocabulary, they never match: {missing}", stacklevel=2)
    wanted = set(spec.keywords)
    depth = min(spec.concept_depth, vocab.size)
    kept, removed = [], []
    for vid, score in ranked.items[: spec.result_depth]:
        decoded = set(decode_concepts(index.entry(vid), vocab, depth).tokens)
        (kept if wanted <= decoded else removed).append((vid, score))
    return (RankedList(kept, ranked.query_id, ranked.scorer),
            RankedList(removed, ranked.query_id, ranked.scorer))


@dataclass(frozen=True)
class PruningReport:
    true_positive_kept: int
    false_positive_kept: int
    true_positive_removed: int
    false_positive_removed: int
    unjudged_kept: int
    unjudged_removed: int
    precision_before: float
    precision_after: float

    @property
    def false_positive_removal_rate(self) -> float:
        fp = self.false_positive_kept + self.false_positive_removed
        return self.false_positive_removed / fp if fp else 0.0

    @property
    def true_positive_retention_rate(self) -> float:
        tp = self.true_positive_kept + self.true_positive_removed
        return self.true_positive_kept / tp if tp else 1.0


def pruning_report(kept: RankedList, removed: RankedList, judgments: dict) -> PruningReport:
    """Confusion cells of a pruning decision.

    ``judgments`` maps video id to relevance (truthy = relevant).  Videos
    without a judgment land in the unjudged cells and count as
    non-relevant for precision.
    """

    def cells(lst):
        tp = fp = un = 0
        for vid, _ in lst:
            if vid not in judgments:
                un += 1
            elif judgments[vid]:
                tp += 1
            else:
                fp += 1
        return tp, fp, un

    tpk, fpk, unk = cells(kept)
    tpr, fpr, unr = cells(removed)
    n_before = len(kept) + len(removed)
    return PruningReport(
        tpk, fpk, tpr, fpr, unk, unr,
        precision_before=(tpk + tpr) / n_before if n_before else 0.0,
        precision_after=tpk / len(kept) if len(kept) else 0.0,
    )
