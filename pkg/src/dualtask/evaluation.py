"""Retrieval and decoding metrics, sampled-judgment AP estimation and the
paired randomization test."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, UndefinedMetricError
from .index import RankedList

DEFAULT_DEPTH = 1000


@dataclass(frozen=True)
class Stratum:
    depth_from: int
    depth_to: int
    rate: float

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ValueError("sampling rate must lie in (0, 1]")
        if self.depth_from < 1 or self.depth_to < self.depth_from:
            raise ValueError("stratum depth range is invalid")


@dataclass
class JudgmentSet:
    """Relevance judgments for one query, each tagged with its stratum."""

    query_id: str
    judgments: dict  # video_id -> bool
    stratum_of: dict = field(default_factory=dict)  # video_id -> stratum id
    strata: dict = field(default_factory=dict)  # stratum id -> Stratum

    def __post_init__(self):
        spans = sorted((s.depth_from, s.depth_to) for s in self.strata.values())
        for (_, hi), (lo, _) in zip(spans, spans[1:]):
            if lo <= hi:
                raise ValueError("strata depth ranges overlap")

    @classmethod
    def complete(cls, query_id: str, judgments: dict, depth: int = DEFAULT_DEPTH) -> "JudgmentSet":
        """Every judgment in a single stratum sampled at rate 1."""
        return cls(query_id, dict(judgments), {v: "all" for v in judgments},
                   {"all": Stratum(1, max(depth, 1), 1.0)})

    def rate(self, video_id: str) -> float:
        sid = self.stratum_of.get(video_id)
        return self.strata[sid].rate if sid in self.strata else 1.0

    @property
    def relevant(self) -> set:
        return {v for v, r in self.judgments.items() if r}


def _relevant_set(judgments) -> set:
    if isinstance(judgments, JudgmentSet):
        return judgments.relevant
    if isinstance(judgments, dict):
        return {v for v, r in judgments.items() if r}
    return set(judgments)


def _ids(ranked) -> list:
    return ranked.video_ids if isinstance(ranked, RankedList) else list(ranked)


def average_precision(ranked, judgments) -> float:
    """AP against complete judgments (a relevant-id set or id -> bool dict)."""
    relevant = _relevant_set(judgments)
    if not relevant:
        raise UndefinedMetricError("average precision needs at least one relevant video")
    hits, total = 0, 0.0
    for k, vid in enumerate(_ids(ranked), 1):
        if vid in relevant:
            hits += 1
            total += hits / k
    return total / len(relevant)


def random_ranking_ap(n_items: int, n_relevant: int) -> float:
    """Expected AP of a uniformly random ranking of ``n_items`` with ``n_relevant`` relevant."""
    if not 1 <= n_relevant <= n_items:
        raise UndefinedMetricError("need 1 <= n_relevant <= n_items")
    if n_items == 1:
        return 1.0
    h = sum(1.0 / k for k in range(1, n_items + 1)) / n_items
    return h + (n_relevant - 1) / (n_items - 1) * (1.0 - h)


def inferred_ap(ranked, judgments: JudgmentSet) -> float:
    """AP estimated from stratified, partially sampled judgments.

    Every sampled relevant video is weighted by the inverse sampling rate
    of its stratum.  The total relevant count and the expected precision
    at each sampled relevant rank are inverse-probability estimates, so
    unjudged videos enter through their stratum's rate.  The ratio of the
    two estimates carries a first-order delta-method bias correction,
    which vanishes when every stratum is fully judged (the estimate then
    equals plain AP).
    """
    for sid, s in judgments.strata.items():
        if not any(judgments.stratum_of.get(v) == sid for v in judgments.judgments):
            warnings.warn(f"stratum {sid!r} has rate {s.rate} but no judged videos", stacklevel=2)
    rel = judgments.relevant
    if not rel:
        return 0.0
    inv = {v: 1.0 / judgments.rate(v) for v in rel}
    R = sum(inv.values())
    V = sum(w * (w - 1.0) for w in inv.values())  # sum (1-p)/p^2
    N = C = 0.0
    above = above_c = 0.0  # sum of 1/p_j and of (1/p_j)(1-p_j)/p_j over sampled relevant above
    for k, vid in enumerate(_ids(ranked), 1):
        if vid not in rel:
            continue
        w = inv[vid]
        a = w / k
        N += a * (1.0 + above)
        # covariance terms: single-document part, then pairs (j above d)
        C += a * (w - 1.0) + a * (above_c + above * (w - 1.0))
        above += w
        above_c += w * (w - 1.0)
    if N == 0.0:
        return 0.0
    est = (N / R) * (1.0 - V / R**2 + C / (N * R))
    return float(min(max(est, 0.0), 1.0))


def sample_judgments(query_id: str, ranked, relevant, strata: dict, rng: np.random.Generator) -> JudgmentSet:
    """Bernoulli-sample judgments of a pooled list stratum by stratum (by rank)."""
    relevant = set(relevant)
    judged, stratum_of = {}, {}
    for k, vid in enumerate(_ids(ranked), 1):
        for sid, s in strata.items():
            if s.depth_from <= k <= s.depth_to:
                if rng.random() < s.rate:
                    judged[vid] = vid in relevant
                    stratum_of[vid] = sid
                break
    return JudgmentSet(query_id, judged, stratum_of, dict(strata))


def concept_recall_at_k(decoded, ground_truth, k: int = 10) -> float:
    """``|top-k decoded ∩ truth| / min(k, |truth|)``.

    ``decoded`` is a ``DecodedConceptList`` or an ordered token list.
    """
    truth = set(ground_truth)
    if not truth:
        raise UndefinedMetricError("ground truth must be non-empty")
    tokens = decoded.tokens if hasattr(decoded, "tokens") else list(decoded)
    return len(set(tokens[:k]) & truth) / min(k, len(truth))


def randomization_test(scores_a, scores_b, iterations: int = 10000, seed: int = 0) -> float:
    """Two-sided paired randomization test on the mean difference.

    Each iteration swaps every query's pair with probability 1/2; the
    p-value counts permutations at least as extreme as the observed one,
    the observed arrangement included once.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("score vectors must be aligned 1-d arrays")
    if a.shape[0] < 2:
        raise ValueError("need at least two queries")
    d = a - b
    observed = abs(d.mean())
    tol = 1e-12 * max(1.0, observed)
    rng = np.random.default_rng(seed)
    count = 0
    chunk = 10000
    done = 0
    while done < iterations:
        n = min(chunk, iterations - done)
        signs = rng.integers(0, 2, size=(n, d.shape[0])) * 2 - 1
        count += int(np.sum(np.abs((signs * d).mean(axis=1)) >= observed - tol))
        done += n
    return (count + 1) / (iterations + 1)


def mean_metric(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else math.nan


# ---------------------------------------------------------------------------
# TREC-style files
# ---------------------------------------------------------------------------


def write_run(path, lists, run_tag: str, depth: int = DEFAULT_DEPTH) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ranked in lists:
            for line in ranked.top(depth).to_run_lines(run_tag):
                fh.write(line + "\n")


def read_run(path) -> dict:
    """``qid Q0 video_id rank score tag`` lines to ``{qid: RankedList}``."""
    rows: dict = {}
    tag = ""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 fields")
            qid, _, vid, rank, score, tag = parts
            rows.setdefault(qid, []).append((int(rank), vid, float(score)))
    out = {}
    for qid, items in rows.items():
        items.sort()
        out[qid] = RankedList([(v, s) for _, v, s in items], qid, tag)
    return out


def read_strata(path) -> dict:
    strata = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 'stratum_id depth_from depth_to rate'")
            strata[parts[0]] = Stratum(int(parts[1]), int(parts[2]), float(parts[3]))
    return strata


def write_strata(path, strata: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sid, s in strata.items():
            fh.write(f"{sid} {s.depth_from} {s.depth_to} {s.rate!r}\n")


def read_judgments(path, strata: dict | None = None) -> dict:
    """``qid video_id rel stratum_id`` lines to ``{qid: JudgmentSet}``.

    Without a strata file the judgments are treated as complete.
    """
    per_q: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 'qid video_id rel stratum_id'")
            qid, vid, rel, sid = parts
            j, s = per_q.setdefault(qid, ({}, {}))
            j[vid] = int(rel) > 0
            s[vid] = sid
    out = {}
    for qid, (j, s) in per_q.items():
        if not strata:
            out[qid] = JudgmentSet.complete(qid, j)
            continue
        unknown = set(s.values()) - set(strata)
        if unknown:
            raise FormatError(f"{path}: unknown strata {sorted(unknown)}")
        out[qid] = JudgmentSet(qid, j, s, dict(strata))
    return out


def write_judgments(path, judgment_sets) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for js in judgment_sets:
            for vid, rel in js.judgments.items():
                fh.write(f"{js.query_id} {vid} {int(bool(rel))} {js.stratum_of.get(vid, 'all')}\n")
