"""Boolean queries over sub-query retrieval.

Grammar (keywords case-insensitive, AND binds tighter than OR, NOT tightest)::

    expr   := term (OR term)*
    term   := factor (AND factor)*
    factor := NOT factor | "(" expr ")" | phrase
    phrase := (bare-word | "quoted text")+

Each leaf phrase is retrieved over the whole index, its scores are
min-max normalized, and operators fuse the normalized scores.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from .errors import EmptyConceptQueryError, ParseError
from .index import (
    Index,
    RankedList,
    encode_query,
    fuse_scores,
    query_to_concepts,
    search_combined,
)

log = logging.getLogger(__name__)

KEYWORDS = ("AND", "OR", "NOT")


@dataclass(frozen=True)
class Leaf:
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("leaf text must be non-empty")


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("And needs at least two children")


@dataclass(frozen=True)
class Or:
    children: tuple

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("Or needs at least two children")


@dataclass(frozen=True)
class Not:
    child: object


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_LEX = re.compile(r'\s*(?:(?P<lp>\()|(?P<rp>\))|"(?P<q>[^"]*)"|(?P<open>")|(?P<w>[^\s()"]+))')


def _lex(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _LEX.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise ParseError("unexpected character", pos)
        kind = m.lastgroup
        start = m.start(kind) - (1 if kind == "q" else 0)
        if kind == "open":
            raise ParseError("unterminated quote", start)
        if kind == "q":
            if not m.group("q").strip():
                raise ParseError("empty quoted phrase", start)
            tokens.append(("PHRASE", m.group("q").strip(), start))
        elif kind == "w":
            word = m.group("w")
            up = word.upper()
            tokens.append((up, word, start) if up in KEYWORDS else ("PHRASE", word, start))
        else:
            tokens.append((m.group(kind), m.group(kind), start))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _lex(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else ("EOF", "", len(self.text))

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def parse(self):
        if not self.tokens:
            raise ParseError("empty query", 0)
        node = self.expr()
        kind, _, pos = self.peek()
        if kind != "EOF":
            raise ParseError("unbalanced ')'" if kind == ")" else f"unexpected {kind}", pos)
        return node

    def expr(self):
        parts = [self.term()]
        while self.peek()[0] == "OR":
            self.take()
            parts.append(self.term())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def term(self):
        parts = [self.factor()]
        while self.peek()[0] == "AND":
            self.take()
            parts.append(self.factor())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def factor(self):
        kind, _, pos = self.peek()
        if kind == "NOT":
            self.take()
            return Not(self.factor())
        if kind == "(":
            self.take()
            if self.peek()[0] == ")":
                raise ParseError("empty parentheses", self.peek()[2])
            node = self.expr()
            if self.peek()[0] != ")":
                raise ParseError("unbalanced '('", pos)
            self.take()
            return node
        if kind == "PHRASE":
            words = []
            while self.peek()[0] == "PHRASE":
                words.append(self.take()[1])
            return Leaf(" ".join(words))
        if kind == "EOF":
            raise ParseError("missing operand at end of input", pos)
        raise ParseError(f"missing operand before {kind}", pos)


def parse_boolean(text: str):
    """Parse a Boolean query into ``Leaf``/``And``/``Or``/``Not`` nodes."""
    return _Parser(text).parse()


def to_text(node) -> str:
    """Canonical fully-parenthesized rendering that parses back to ``node``."""
    if isinstance(node, Leaf):
        return '"' + node.text + '"'
    if isinstance(node, Not):
        return "NOT " + to_text(node.child)
    op = " AND " if isinstance(node, And) else " OR "
    return "(" + op.join(to_text(c) for c in node.children) + ")"


def leaves(node) -> list:
    if isinstance(node, Leaf):
        return [node.text]
    if isinstance(node, Not):
        return leaves(node.child)
    return [t for c in node.children for t in leaves(c)]


def strip_operators(text: str) -> str:
    """Plain text of a Boolean query: keywords, quotes and parentheses removed."""
    words = re.sub(r'[()"]', " ", text).split()
    return " ".join(w for w in words if w.upper() not in KEYWORDS)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------


def minmax_normalize(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


class ProductMaxFusion:
    """AND = product, OR = max, NOT = complement.

    Products are taken over per-video sorted factors so the result does
    not depend on child order or grouping.
    """

    name = "product-max"

    def and_(self, parts):
        return np.prod(np.sort(np.stack(parts), axis=0), axis=0)

    def or_(self, parts):
        return np.max(np.stack(parts), axis=0)

    def not_(self, part):
        return 1.0 - part


# ---------------------------------------------------------------------------
# Leaf scorers
# ---------------------------------------------------------------------------


class LeafScorer:
    """Raw per-video scores (index order) for one sub-query.

    ``kind`` is ``embedding``, ``concept`` or ``combined``.  A leaf with no
    concept tokens falls back to the embedding scorer and the fallback is
    recorded in ``fallbacks``.
    """

    def __init__(self, kind: str, model, theta: float = 0.3):
        if kind not in ("embedding", "concept", "combined"):
            raise ValueError(f"unknown scorer {kind!r}")
        self.kind = kind
        self.model = model
        self.theta = theta
        self.fallbacks: list = []

    @property
    def name(self) -> str:
        return f"combined({self.theta:g})" if self.kind == "combined" else self.kind

    def __call__(self, index: Index, text: str) -> np.ndarray:
        if self.kind == "embedding":
            return index.embedding_scores(encode_query(text, self.model))
        try:
            cq = query_to_concepts(text, self.model.vocabulary)
        except EmptyConceptQueryError:
            self.fallbacks.append(text)
            log.info("leaf %r has no concept tokens; embedding fallback", text)
            return index.embedding_scores(encode_query(text, self.model))
        concept = index.concept_scores(cq)
        if self.kind == "concept":
            return concept
        return fuse_scores(index.embedding_scores(encode_query(text, self.model)), concept, self.theta)


def _flatten(node, cls):
    if isinstance(node, cls):
        return [g for c in node.children for g in _flatten(c, cls)]
    return [node]


def fused_scores(index: Index, node, scorer, fusion=None, cache=None) -> np.ndarray:
    """Normalized fused score of every video (index order) for ``node``."""
    fusion = fusion or ProductMaxFusion()
    cache = {} if cache is None else cache
    if isinstance(node, Leaf):
        if node.text not in cache:
            cache[node.text] = minmax_normalize(scorer(index, node.text))
        return cache[node.text]
    if isinstance(node, Not):
        if isinstance(node.child, Not):
            # cancel structurally: 1 - (1 - s) is not always s in floating point
            return fused_scores(index, node.child.child, scorer, fusion, cache)
        return fusion.not_(fused_scores(index, node.child, scorer, fusion, cache))
    if isinstance(node, And):
        return fusion.and_([fused_scores(index, c, scorer, fusion, cache) for c in _flatten(node, And)])
    if isinstance(node, Or):
        return fusion.or_([fused_scores(index, c, scorer, fusion, cache) for c in _flatten(node, Or)])
    raise TypeError(f"not a Boolean node: {node!r}")


def eval_boolean(index: Index, ast, scorer: LeafScorer, fusion=None, query_id: str = "",
                 depth: int | None = None) -> RankedList:
    """Retrieve each leaf separately and merge by Boolean fusion."""
    if isinstance(ast, str):
        ast = parse_boolean(ast)
    start = len(getattr(scorer, "fallbacks", []))
    scores = fused_scores(index, ast, scorer, fusion)
    out = RankedList.from_scores(index.video_ids, scores, query_id,
                                 f"boolean/{getattr(scorer, 'name', 'custom')}", depth)
    for text in getattr(scorer, "fallbacks", [])[start:]:
        out.notes.append(f"leaf {text!r}: embedding fallback")
    return out


def eval_single_vector(index: Index, text: str, model, theta: float = 0.3, query_id: str = "",
                       depth: int | None = None) -> RankedList:
    """Embed the whole query, operators stripped, as one search."""
    return search_combined(index, strip_operators(text), model, theta, query_id, depth)
