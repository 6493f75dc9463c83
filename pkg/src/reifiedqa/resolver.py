"""Weakly supervised entity resolution producing a differentiable seed vector.

Pipeline for one question:

1. ``enumerate_spans`` finds every token span (up to ``max_span_len``) that
   is an exact key of the alias table and applies longest-span dedup.
2. ``span_scores`` scores spans by a softmax over ``mean(tokens) . w_s``.
3. ``candidate_scores`` multiplies each span score by a within-span softmax
   over ``z . q`` where ``z`` is the candidate's mean neighborhood-feature
   embedding.
4. ``seed_vector`` re-normalizes all candidate scores with a softmax and
   scatters them into an entity vector.

``resolve`` runs steps 2-4 and keeps what ``resolver_backward`` needs.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._numeric import segment_ids, segment_softmax, softmax, softmax_backward
from .exceptions import CoverageError, IngestError, InputError, ParseError, ResolutionError, ShapeError, UnknownIdError
from .kg import EntityVector, ReifiedKG
from .text import QuestionEncoding, TokenSeq, normalize, span_embed

DEFAULT_MAX_SPAN_LEN = 6


class AliasTable:
    """Exact-match map from normalized token tuples to entity ids."""

    def __init__(self):
        self._map: dict[tuple[str, ...], set[int]] = defaultdict(set)
        self.max_key_len = 0

    def add(self, key: Sequence[str], entity: int) -> None:
        key = tuple(key)
        if not key:
            raise IngestError("alias key is empty")
        self._map[key].add(int(entity))
        self.max_key_len = max(self.max_key_len, len(key))

    def lookup(self, key: Sequence[str]) -> tuple[int, ...]:
        ids = self._map.get(tuple(key))
        return tuple(sorted(ids)) if ids else ()

    def __contains__(self, key) -> bool:
        return tuple(key) in self._map

    def __len__(self) -> int:
        return len(self._map)

    def keys(self):
        return self._map.keys()


def read_aliases(path) -> list[tuple[str, str]]:
    """Read ``entity_label<TAB>alias_text`` lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError(f"expected 2 tab-separated fields, got {len(fields)}", path, line_no)
            out.append((fields[0], fields[1]))
    return out


def write_aliases(aliases: Iterable[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, alias in aliases:
            fh.write(f"{label}\t{alias}\n")


def build_alias_table(kg: ReifiedKG, aliases: Iterable[tuple[str, str]] = (), include_titles: bool = True) -> AliasTable:
    """Index entity titles and ``(entity_label, alias_text)`` pairs.

    Titles that contain no word tokens are skipped; an explicit alias that is
    empty or names an unknown entity raises ``IngestError``.
    """
    table = AliasTable()
    if include_titles:
        for eid, label in enumerate(kg.entity_vocab.labels):
            try:
                key = normalize(label)
            except InputError:
                continue
            table.add(key, eid)
    for label, alias in aliases:
        if not label:
            raise IngestError("alias entry has an empty entity label")
        eid = kg.entity_vocab.get(label)
        if eid is None:
            raise IngestError(f"alias {alias!r} refers to unknown entity {label!r}")
        try:
            key = normalize(alias)
        except InputError:
            raise IngestError(f"alias for {label!r} is empty") from None
        table.add(key, eid)
    return table


@dataclass(frozen=True)
class Span:
    i: int
    j: int
    candidates: tuple[int, ...]

    @property
    def length(self) -> int:
        return self.j - self.i + 1


@dataclass(frozen=True)
class SpanCandidateSet:
    spans: tuple[Span, ...]
    tokens: TokenSeq | None = None

    def __len__(self):
        return len(self.spans)

    def __iter__(self):
        return iter(self.spans)

    def __bool__(self):
        return bool(self.spans)

    def text(self, span: Span) -> str:
        if self.tokens is None:
            return f"{span.i}:{span.j}"
        return self.tokens.span_text(span.i, span.j)

    def find(self, i: int, j: int) -> Span | None:
        for span in self.spans:
            if span.i == i and span.j == j:
                return span
        return None

    @property
    def candidate_ids(self) -> np.ndarray:
        return np.array([c for s in self.spans for c in s.candidates], dtype=np.int64)


def dedup_longest(spans: Iterable[Span]) -> list[Span]:
    """Keep each entity only under its longest span (earlier start wins ties)."""
    spans = list(spans)
    # Rank: longer first, then smaller start, then input order.
    best: dict[int, tuple[int, int, int]] = {}
    for n, span in enumerate(spans):
        rank = (-span.length, span.i, n)
        for c in span.candidates:
            if c not in best or rank < best[c]:
                best[c] = rank
    out = []
    for n, span in enumerate(spans):
        rank = (-span.length, span.i, n)
        kept = tuple(c for c in span.candidates if best[c] == rank)
        if kept:
            out.append(Span(span.i, span.j, kept))
    return out


def enumerate_spans(toks: TokenSeq, table: AliasTable, max_span_len: int = DEFAULT_MAX_SPAN_LEN) -> SpanCandidateSet:
    if max_span_len < 1:
        raise ValueError("max_span_len must be at least 1")
    n = len(toks)
    limit = min(max_span_len, table.max_key_len or 0)
    raw = []
    for i in range(n):
        for j in range(i, min(n, i + limit)):
            ids = table.lookup(toks.tokens[i : j + 1])
            if ids:
                raw.append(Span(i, j, ids))
    return SpanCandidateSet(tuple(dedup_longest(raw)), toks)


def restrict_to_gold_span(spans: SpanCandidateSet, gold: tuple[int, int]) -> SpanCandidateSet:
    i, j = gold
    span = spans.find(i, j)
    if span is None:
        raise CoverageError(f"gold span {i}:{j} has no alias candidates")
    return SpanCandidateSet((span,), spans.tokens)


class EntityFeatureIndex:
    """Per-entity neighborhood features ``"p:o"`` from subject-position triples."""

    def __init__(self, ptr: np.ndarray, feature_ids: np.ndarray, feature_labels: list[str]):
        self.ptr = ptr
        self.feature_ids = feature_ids
        self.feature_labels = feature_labels

    @classmethod
    def from_kg(cls, kg: ReifiedKG) -> "EntityFeatureIndex":
        ptr, order = kg.subject_index
        p, o = kg.predicates[order], kg.objects[order]
        key = p * kg.n_entities + o
        uniq, inv = np.unique(key, return_inverse=True)
        # Number features by first appearance in triple order.
        first = np.full(uniq.size, kg.n_triples, dtype=np.int64)
        np.minimum.at(first, inv, order)
        rank = np.empty(uniq.size, dtype=np.int64)
        by_first = np.argsort(first, kind="stable")
        rank[by_first] = np.arange(uniq.size)
        feature_ids = rank[inv]
        rels, ents = kg.relation_vocab.labels, kg.entity_vocab.labels
        labels = [None] * uniq.size
        for fid, k in zip(rank.tolist(), uniq.tolist()):
            labels[fid] = f"{rels[k // kg.n_entities]}:{ents[k % kg.n_entities]}"
        return cls(ptr.copy(), feature_ids, labels)

    @property
    def n_features(self) -> int:
        return len(self.feature_labels)

    @property
    def n_entities(self) -> int:
        return self.ptr.size - 1

    def features_of(self, entity: int) -> np.ndarray:
        return self.feature_ids[self.ptr[entity] : self.ptr[entity + 1]]

    def has_features(self, entity: int) -> bool:
        return self.ptr[entity + 1] > self.ptr[entity]

    def init_embeddings(self, dim: int, rng=None) -> np.ndarray:
        rng = np.random.default_rng(rng)
        bound = 0.5 / dim
        return rng.uniform(-bound, bound, size=(self.n_features, dim))


def embed_candidate(idx: EntityFeatureIndex, feature_emb: np.ndarray, entity: int) -> np.ndarray:
    """Mean feature embedding of ``entity``; zeros when it has no features."""
    feats = idx.features_of(entity)
    if feats.size == 0:
        return np.zeros(feature_emb.shape[1])
    return feature_emb[feats].mean(axis=0)


def _span_matrix(enc: QuestionEncoding, spans: SpanCandidateSet) -> np.ndarray:
    return np.array([span_embed(enc, s.i, s.j) for s in spans.spans]).reshape(len(spans), -1)


def span_scores(enc: QuestionEncoding, spans: SpanCandidateSet, w_s: np.ndarray) -> np.ndarray:
    if not spans:
        raise ResolutionError("no candidate spans to score")
    return softmax(_span_matrix(enc, spans) @ w_s)


def candidate_scores(enc: QuestionEncoding, spans: SpanCandidateSet, s: np.ndarray, idx: EntityFeatureIndex, feature_emb: np.ndarray) -> list[np.ndarray]:
    """Per-span arrays of ``e = s_span * softmax_within_span(z . q_span)``."""
    if len(s) != len(spans):
        raise ShapeError("one span score per span is required")
    out = []
    for span, s_ij in zip(spans.spans, s):
        q = span_embed(enc, span.i, span.j)
        z = np.array([embed_candidate(idx, feature_emb, c) for c in span.candidates])
        out.append(s_ij * softmax(z @ q))
    return out


@dataclass(frozen=True)
class CandidateScore:
    span: tuple[int, int]
    span_text: str
    entity: int
    span_score: float
    candidate_score: float
    seed_weight: float
    has_features: bool = True


@dataclass
class SeedVector:
    x0: EntityVector
    diagnostics: list[CandidateScore] = field(default_factory=list)
    cache: "_ResolveCache | None" = field(default=None, repr=False)

    def dense(self) -> np.ndarray:
        return self.x0.to_dense()


def seed_vector(e_scores, candidates, n_entities: int) -> SeedVector:
    """Softmax over all candidate scores, scattered into an entity vector."""
    e = np.concatenate([np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in e_scores]) if len(e_scores) else np.empty(0)
    cand = np.asarray(candidates, dtype=np.int64).reshape(-1)
    if e.size == 0:
        raise ResolutionError("no candidate entities")
    if e.size != cand.size:
        raise ShapeError("one score per candidate is required")
    x = softmax(e)
    dense = np.zeros(n_entities)
    np.add.at(dense, cand, x)
    return SeedVector(EntityVector.from_dense(dense))


def seed_from_gold(gold_ids: Iterable[int], n_entities: int) -> SeedVector:
    ids = sorted({int(g) for g in gold_ids})
    if not ids:
        raise ResolutionError("gold entity set is empty")
    for g in ids:
        if not 0 <= g < n_entities:
            raise UnknownIdError(f"gold entity id {g} is not in the graph")
    return SeedVector(EntityVector(np.array(ids), np.ones(len(ids)), n_entities))


@dataclass
class _ResolveCache:
    spans: SpanCandidateSet
    enc: QuestionEncoding
    w_s: np.ndarray
    Q: np.ndarray  # span embeddings, (S, D)
    s: np.ndarray  # span scores
    starts: np.ndarray  # first flat candidate of each span
    cand: np.ndarray  # flat candidate ids
    span_of: np.ndarray
    Z: np.ndarray  # candidate embeddings, (C, D)
    p: np.ndarray  # within-span softmax
    x: np.ndarray  # final per-candidate weights


def resolve(enc: QuestionEncoding, spans: SpanCandidateSet, w_s: np.ndarray, idx: EntityFeatureIndex, feature_emb: np.ndarray, n_entities: int) -> SeedVector:
    """Span scoring, candidate scoring and seed-vector construction in one pass."""
    if not spans:
        raise ResolutionError("no candidate spans")
    Q = _span_matrix(enc, spans)
    s = softmax(Q @ w_s)
    counts = np.array([len(sp.candidates) for sp in spans.spans])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    cand = spans.candidate_ids
    span_of = segment_ids(starts, cand.size)
    Z = np.zeros((cand.size, feature_emb.shape[1]))
    flags = np.ones(cand.size, dtype=bool)
    for k, c in enumerate(cand.tolist()):
        feats = idx.features_of(c)
        if feats.size:
            Z[k] = feature_emb[feats].mean(axis=0)
        else:
            flags[k] = False
    logits = np.einsum("kd,kd->k", Z, Q[span_of])
    p = segment_softmax(logits, starts)
    e = s[span_of] * p
    x = softmax(e)
    dense = np.zeros(n_entities)
    np.add.at(dense, cand, x)
    diags = [
        CandidateScore(
            (spans.spans[si].i, spans.spans[si].j),
            spans.text(spans.spans[si]),
            int(c),
            float(s[si]),
            float(ek),
            float(xk),
            bool(fl),
        )
        for c, si, ek, xk, fl in zip(cand.tolist(), span_of.tolist(), e, x, flags)
    ]
    cache = _ResolveCache(spans, enc, w_s, Q, s, starts, cand, span_of, Z, p, x)
    return SeedVector(EntityVector.from_dense(dense), diags, cache)


@dataclass
class ResolverGrads:
    w_s: np.ndarray
    token_embs: np.ndarray
    feature_rows: np.ndarray  # feature ids touched, may repeat
    feature_grads: np.ndarray  # one row per entry of feature_rows

    def scatter_features(self, out: np.ndarray) -> np.ndarray:
        np.add.at(out, self.feature_rows, self.feature_grads)
        return out


def resolver_backward(seed: SeedVector, idx: EntityFeatureIndex, feature_emb: np.ndarray, grad_x0) -> ResolverGrads:
    c = seed.cache
    if c is None:
        raise ValueError("seed vector carries no forward cache (gold seeds have no gradient)")
    grad_x0 = np.asarray(grad_x0, dtype=np.float64)
    if grad_x0.shape != (seed.x0.size,):
        raise ShapeError(f"x0 gradient has shape {grad_x0.shape}, expected ({seed.x0.size},)")
    d = c.Q.shape[1]

    g_e = softmax_backward(c.x, grad_x0[c.cand])
    g_s = np.bincount(c.span_of, weights=g_e * c.p, minlength=c.s.size)
    g_p = g_e * c.s[c.span_of]
    # Within-span softmax backward.
    g_l = c.p * (g_p - np.bincount(c.span_of, weights=c.p * g_p, minlength=c.s.size)[c.span_of])
    g_Z = g_l[:, None] * c.Q[c.span_of]
    g_Q = np.zeros_like(c.Q)
    np.add.at(g_Q, c.span_of, g_l[:, None] * c.Z)
    g_logit_span = softmax_backward(c.s, g_s)
    g_w = g_logit_span @ c.Q
    g_Q += np.outer(g_logit_span, c.w_s)

    g_tok = np.zeros_like(c.enc.token_embs)
    for si, span in enumerate(c.spans.spans):
        g_tok[span.i : span.j + 1] += g_Q[si] / span.length

    rows, grads = [], []
    for k, ent in enumerate(c.cand.tolist()):
        feats = idx.features_of(ent)
        if feats.size:
            rows.append(feats)
            grads.append(np.broadcast_to(g_Z[k] / feats.size, (feats.size, d)))
    if rows:
        feature_rows = np.concatenate(rows)
        feature_grads = np.concatenate(grads)
    else:
        feature_rows = np.empty(0, dtype=np.int64)
        feature_grads = np.empty((0, d))
    return ResolverGrads(g_w, g_tok, feature_rows, feature_grads)
