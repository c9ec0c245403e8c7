"""Offline video index and the embedding, concept and fused scorers."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ENGLISH_STOPWORDS, Vocabulary, tokenize
from .errors import EmptyConceptQueryError, EmptyQueryError, FormatError, ShapeError
from .training import ModelCheckpoint

log = logging.getLogger(__name__)

_PROB_FLOOR = 1e-15


@dataclass
class RankedList:
    """Scores sorted descending, ties broken by ascending video id."""

    items: list
    query_id: str = ""
    scorer: str = ""
    notes: list = field(default_factory=list)

    @classmethod
    def from_scores(cls, video_ids, scores, query_id: str = "", scorer: str = "", depth=None):
        scores = np.asarray(scores, dtype=np.float64)
        order = sorted(range(len(video_ids)), key=lambda i: (-scores[i], video_ids[i]))
        if depth is not None:
            order = order[:depth]
        return cls([(video_ids[i], float(scores[i])) for i in order], query_id, scorer)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def video_ids(self) -> list:
        return [v for v, _ in self.items]

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.items])

    def top(self, k: int) -> "RankedList":
        return RankedList(self.items[:k], self.query_id, self.scorer, list(self.notes))

    def to_run_lines(self, run_tag: str) -> list[str]:
        return [f"{self.query_id} Q0 {v} {r} {s:.10g} {run_tag}" for r, (v, s) in enumerate(self.items, 1)]


@dataclass(frozen=True)
class ConceptQueryVector:
    indices: tuple
    m: int

    def __post_init__(self):
        if any(i < 0 or i >= self.m for i in self.indices):
            raise ShapeError("concept index outside the vocabulary")

    def dense(self) -> np.ndarray:
        v = np.zeros(self.m)
        v[list(self.indices)] = 1.0
        return v


@dataclass
class IndexEntry:
    video_id: str
    embedding: np.ndarray
    concepts: np.ndarray
    flagged: bool = False


class Index:
    def __init__(self, entries, vocab_hash: str = ""):
        self.entries = list(entries)
        self.vocab_hash = vocab_hash
        if not self.entries:
            self.embeddings = np.zeros((0, 0))
            self.concepts = np.zeros((0, 0))
        else:
            self.embeddings = np.stack([e.embedding for e in self.entries])
            self.concepts = np.stack([e.concepts for e in self.entries])
        self.video_ids = [e.video_id for e in self.entries]
        self._pos = {v: i for i, v in enumerate(self.video_ids)}
        if len(self._pos) != len(self.entries):
            raise FormatError("duplicate video id in index")

    def __len__(self):
        return len(self.entries)

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def m(self) -> int:
        return self.concepts.shape[1]

    def entry(self, video_id: str) -> IndexEntry:
        return self.entries[self._pos[video_id]]

    # -- raw score vectors, in index order --------------------------------

    def embedding_scores(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=np.float64)
        if tau.shape != (self.d,):
            raise ShapeError(f"query embedding must have length {self.d}")
        norms = np.linalg.norm(self.embeddings, axis=1) * np.linalg.norm(tau)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = (self.embeddings @ tau) / norms
        return np.nan_to_num(s, nan=0.0)

    def concept_scores(self, cq: ConceptQueryVector) -> np.ndarray:
        if not cq.indices:
            raise EmptyConceptQueryError("concept query is empty")
        if cq.m != self.m:
            raise ShapeError(f"concept query over {cq.m} classes, index has {self.m}")
        idx = list(cq.indices)
        norms = np.linalg.norm(self.concepts, axis=1) * np.sqrt(len(idx))
        with np.errstate(invalid="ignore", divide="ignore"):
            s = self.concepts[:, idx].sum(axis=1) / norms
        return np.nan_to_num(s, nan=0.0)


def build_index(model: ModelCheckpoint, videos: dict, concept_topk: int | None = None,
                batch_size: int = 256) -> Index:
    """Embed every video and decode its concept probabilities (inference BN).

    ``concept_topk`` keeps only each video's top-k probabilities and zeroes
    the rest, trading storage for small ranking drift in concept search.
    """
    net = model.model
    ids = list(videos)
    frames = []
    for v in ids:
        X = np.asarray(videos[v], dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != net.config.frame_feature_dim:
            raise ShapeError(f"video {v}: frame dim {X.shape[-1]} != {net.config.frame_feature_dim}")
        frames.append(X)
    entries = []
    for i in range(0, len(ids), batch_size):
        chunk = frames[i : i + batch_size]
        phi = net.embed_videos(chunk, batch_size)
        probs = np.clip(net.concept_probabilities(phi), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
        for j, X in enumerate(chunk):
            vid = ids[i + j]
            y = probs[j]
            if concept_topk is not None and concept_topk < y.shape[0]:
                keep = np.argsort(-y, kind="stable")[:concept_topk]
                sparse = np.zeros_like(y)
                sparse[keep] = y[keep]
                y = sparse
            flagged = bool(np.ptp(X) == 0.0 or np.linalg.norm(phi[j]) == 0.0)
            if flagged:
                log.warning("video %s is degenerate (constant frames or zero embedding)", vid)
            entries.append(IndexEntry(vid, phi[j].copy(), y.copy(), flagged))
    return Index(entries, model.vocabulary.hash)


def query_to_concepts(query: str, vocab: Vocabulary, stopwords=None) -> ConceptQueryVector:
    """Vocabulary indices of the query's non-stopword tokens, each once."""
    stop = ENGLISH_STOPWORDS if stopwords is None else stopwords
    idx = sorted({vocab.index[t] for t in tokenize(query) if t not in stop and t in vocab})
    if not idx:
        raise EmptyConceptQueryError(f"no concept token in query {query!r}")
    return ConceptQueryVector(tuple(idx), vocab.size)


def encode_query(query: str, model: ModelCheckpoint) -> np.ndarray:
    tokens = model.vocabulary.encode(tokenize(query))
    if not tokens:
        raise EmptyQueryError(f"no vocabulary token in query {query!r}")
    return model.model.embed_texts([tokens])[0]


def score_embedding(index: Index, tau, query_id: str = "") -> RankedList:
    return RankedList.from_scores(index.video_ids, index.embedding_scores(tau), query_id, "embedding")


def score_concept(index: Index, cq: ConceptQueryVector, query_id: str = "") -> RankedList:
    return RankedList.from_scores(index.video_ids, index.concept_scores(cq), query_id, "concept")


def fuse_scores(embedding, concept, theta: float) -> np.ndarray:
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    return (1.0 - theta) * np.asarray(embedding) + theta * np.asarray(concept)


def combined_scores(index: Index, query: str, model: ModelCheckpoint, theta: float = 0.3):
    """Per-video fused scores in index order and whether concept search fell back."""
    if index.vocab_hash and index.vocab_hash != model.vocabulary.hash:
        raise FormatError("index and model were built with different vocabularies")
    emb = index.embedding_scores(encode_query(query, model))
    try:
        cq = query_to_concepts(query, model.vocabulary)
    except EmptyConceptQueryError:
        log.info("query %r has no concept tokens; embedding-only fallback", query)
        return emb, True
    return fuse_scores(emb, index.concept_scores(cq), theta), False


def search_combined(index: Index, query: str, model: ModelCheckpoint, theta: float = 0.3,
                    query_id: str = "", depth: int | None = None) -> RankedList:
    """``(1 - theta) * embedding + theta * concept`` cosine scores."""
    scores, fell_back = combined_scores(index, query, model, theta)
    out = RankedList.from_scores(index.video_ids, scores, query_id, f"combined({theta:g})", depth)
    if fell_back:
        out.notes.append("empty concept query: embedding-only fallback")
    return out


# ---------------------------------------------------------------------------
# Index file
# ---------------------------------------------------------------------------

INDEX_MAGIC = b"DTIX"
INDEX_VERSION = 1


def save_index(index: Index, path) -> None:
    """magic, u32 version, u32 d, u32 m, u32 n, 32-byte vocab sha256, then
    per video: u16 id length, id, u8 flags, d + m float64 values."""
    digest = bytes.fromhex(index.vocab_hash) if index.vocab_hash else bytes(32)
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC + struct.pack("<IIII", INDEX_VERSION, index.d, index.m, len(index)) + digest)
        for e in index.entries:
            b = e.video_id.encode("utf-8")
            fh.write(struct.pack("<H", len(b)) + b + struct.pack("<B", int(e.flagged)))
            fh.write(np.ascontiguousarray(e.embedding, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(e.concepts, dtype="<f8").tobytes())


def load_index(path) -> Index:
    data = Path(path).read_bytes()
    if data[:4] != INDEX_MAGIC:
        raise FormatError(f"{path}: not a DTIX index")
    version, d, m, n = struct.unpack_from("<IIII", data, 4)
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    digest = data[20:52]
    off = 52
    entries = []
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            vid = data[off + 2 : off + 2 + ln].decode("utf-8")
            off += 2 + ln
            (flags,) = struct.unpack_from("<B", data, off)
            off += 1
            if off + 8 * (d + m) > len(data):
                raise FormatError(f"{path}: truncated record {vid}")
            phi = np.frombuffer(data, "<f8", d, off).astype(np.float64)
            y = np.frombuffer(data, "<f8", m, off + 8 * d).astype(np.float64)
            off += 8 * (d + m)
            entries.append(IndexEntry(vid, phi, y, bool(flags & 1)))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated index") from exc
    return Index(entries, "" if digest == bytes(32) else digest.hex())


def export_index_tsv(index: Index, path, vocab: Vocabulary | None = None, top: int = 5) -> None:
    """Human-readable dump: id, flag, embedding, top decoded concepts."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in index.entries:
            order = np.argsort(-e.concepts, kind="stable")[:top]
            names = [vocab.token(i) if vocab else str(i) for i in order]
            concepts = ",".join(f"{n}:{e.concepts[i]:.4f}" for n, i in zip(names, order))
            phi = " ".join(f"{x:.6g}" for x in e.embedding)
            fh.write(f"{e.video_id}\t{int(e.flagged)}\t{phi}\t{concepts}\n")
