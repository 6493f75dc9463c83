"""End-to-end question answering model: parameters, forward and backward.

``QAModel`` holds the frozen structure (graph, alias table, feature index,
token vocabulary); ``ModelParams`` holds every trainable tensor.  Three
variants share one code path and differ only in how the seed vector is made:

* ``baseline`` -- seed from the gold question entities, no resolution;
* ``er`` -- resolution restricted to the gold span;
* ``e2e`` -- full span detection and resolution from the question text.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .exceptions import ResolutionError, ShapeError
from .inference import HopDecoderParams, InferenceTrace, inference_backward, run_hops
from .kg import ReifiedKG
from .resolver import (
    DEFAULT_MAX_SPAN_LEN,
    AliasTable,
    EntityFeatureIndex,
    SeedVector,
    SpanCandidateSet,
    enumerate_spans,
    resolve,
    resolver_backward,
    restrict_to_gold_span,
    seed_from_gold,
)
from .text import DEFAULT_DIM, EmbeddingTable, QuestionEncoding, TokenSeq, encode_backward, tokenize

VARIANTS = ("baseline", "er", "e2e")


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


@dataclass(frozen=True)
class QAExample:
    question: str
    answers: tuple[int, ...]
    gold_entities: tuple[int, ...] | None = None
    gold_span: tuple[int, int] | None = None

    def __post_init__(self):
        if not self.answers:
            raise ValueError("a QA example needs at least one answer entity")


@dataclass
class ModelParams:
    token_emb: np.ndarray
    w_s: np.ndarray
    feature_emb: np.ndarray
    W_inf: list[np.ndarray]
    W_att: list[np.ndarray]

    @property
    def decoder(self) -> HopDecoderParams:
        return HopDecoderParams(self.W_inf, self.W_att)

    def named(self) -> list[tuple[str, np.ndarray]]:
        out = [("token_emb", self.token_emb), ("w_s", self.w_s), ("feature_emb", self.feature_emb)]
        out += [(f"W_inf.{t}", W) for t, W in enumerate(self.W_inf)]
        out += [(f"W_att.{t}", W) for t, W in enumerate(self.W_att)]
        return out

    @classmethod
    def from_named(cls, tensors: dict[str, np.ndarray]) -> "ModelParams":
        t_max = sum(1 for k in tensors if k.startswith("W_inf."))
        return cls(
            tensors["token_emb"],
            tensors["w_s"],
            tensors["feature_emb"],
            [tensors[f"W_inf.{t}"] for t in range(t_max)],
            [tensors[f"W_att.{t}"] for t in range(t_max)],
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_named({k: v.copy() for k, v in self.named()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams.from_named({k: np.zeros_like(v) for k, v in self.named()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.named())

    @property
    def t_max(self) -> int:
        return len(self.W_inf)


@dataclass
class Forward:
    example: QAExample
    variant: str
    enc: QuestionEncoding
    seed: SeedVector
    trace: InferenceTrace
    spans: SpanCandidateSet | None = None

    @property
    def y_hat(self) -> np.ndarray:
        return self.trace.y_hat


@dataclass
class _Prepared:
    toks: TokenSeq
    spans: SpanCandidateSet | None
    row_ids: np.ndarray = field(repr=False, default=None)


class QAModel:
    """Frozen model structure shared by all parameter sets."""

    def __init__(
        self,
        kg: ReifiedKG,
        aliases: AliasTable,
        vocab: EmbeddingTable | Iterable[str],
        dim: int = DEFAULT_DIM,
        t_max: int = 1,
        max_span_len: int = DEFAULT_MAX_SPAN_LEN,
    ):
        self.kg = kg
        self.aliases = aliases
        self.features = EntityFeatureIndex.from_kg(kg)
        tokens = vocab.tokens if isinstance(vocab, EmbeddingTable) else list(vocab)
        # Vocabulary only; the trainable rows live in ModelParams.
        self.table = EmbeddingTable(tokens, dim=dim, rng=0)
        self.dim = dim
        self.t_max = t_max
        self.max_span_len = max_span_len
        self._prepared: dict[str, _Prepared] = {}

    @property
    def n_entities(self) -> int:
        return self.kg.n_entities

    def init_params(self, rng=None) -> ModelParams:
        rng = np.random.default_rng(rng)
        d = self.dim
        bound = 0.5 / d
        token_emb = rng.uniform(-bound, bound, size=(len(self.table), d))
        w_s = rng.uniform(-bound, bound, size=d)
        feature_emb = self.features.init_embeddings(d, rng)
        dec = HopDecoderParams.init(d, self.kg.n_relations, self.t_max, rng)
        return ModelParams(token_emb, w_s, feature_emb, dec.W_inf, dec.W_att)

    def check_params(self, params: ModelParams) -> None:
        d = self.dim
        if params.token_emb.shape != (len(self.table), d):
            raise ShapeError(f"token_emb has shape {params.token_emb.shape}, expected {(len(self.table), d)}")
        if params.w_s.shape != (d,):
            raise ShapeError("w_s shape mismatch")
        if params.feature_emb.shape != (self.features.n_features, d):
            raise ShapeError("feature_emb shape mismatch")
        if params.t_max != self.t_max:
            raise ShapeError(f"parameters have {params.t_max} hops, model has {self.t_max}")
        params.decoder.validate()

    def prepare(self, question: str) -> _Prepared:
        prep = self._prepared.get(question)
        if prep is None:
            toks = tokenize(question)
            spans = enumerate_spans(toks, self.aliases, self.max_span_len)
            prep = _Prepared(toks, spans, self.table.row_ids(toks))
            if len(self._prepared) < 200_000:
                self._prepared[question] = prep
        return prep

    def spans_for(self, example: QAExample, variant: str) -> SpanCandidateSet:
        spans = self.prepare(example.question).spans
        if variant == "er":
            if example.gold_span is None:
                raise ResolutionError("er variant needs a gold span")
            return restrict_to_gold_span(spans, example.gold_span)
        if not spans:
            raise ResolutionError("no alias matches in question")
        return spans

    def encode(self, params: ModelParams, question: str) -> QuestionEncoding:
        prep = self.prepare(question)
        embs = params.token_emb[prep.row_ids]
        return QuestionEncoding(embs.mean(axis=0), embs, prep.row_ids)

    def seed(self, params: ModelParams, example: QAExample, variant: str, enc: QuestionEncoding):
        if variant == "baseline":
            if not example.gold_entities:
                raise ResolutionError("baseline variant needs gold entities")
            return seed_from_gold(example.gold_entities, self.n_entities), None
        spans = self.spans_for(example, variant)
        seed = resolve(enc, spans, params.w_s, self.features, params.feature_emb, self.n_entities)
        return seed, spans

    def forward(self, params: ModelParams, example: QAExample, variant: str = "e2e") -> Forward:
        """Run one example; raises ``ResolutionError`` when it must be skipped."""
        check_variant(variant)
        enc = self.encode(params, example.question)
        seed, spans = self.seed(params, example, variant, enc)
        trace = run_hops(self.kg, params.decoder, seed.dense(), enc.h_q)
        return Forward(example, variant, enc, seed, trace, spans)

    def backward(self, params: ModelParams, fwd: Forward, grad_y: np.ndarray, out: ModelParams | None = None) -> ModelParams:
        """Accumulate parameter gradients of ``grad_y . y_hat`` into ``out``."""
        if out is None:
            out = params.zeros_like()
        ig = inference_backward(self.kg, params.decoder, fwd.trace, grad_y)
        for t in range(params.t_max):
            out.W_inf[t] += ig.W_inf[t]
            out.W_att[t] += ig.W_att[t]
        g_tok = None
        if fwd.seed.cache is not None:
            rg = resolver_backward(fwd.seed, self.features, params.feature_emb, ig.x0)
            out.w_s += rg.w_s
            rg.scatter_features(out.feature_emb)
            g_tok = rg.token_embs
        encode_backward(_RowsView(out.token_emb), fwd.enc, ig.h_q, g_tok, out=out.token_emb)
        return out

    def predict_one(self, params: ModelParams, example: QAExample, variant: str = "e2e") -> int | None:
        """Top-1 entity id (lowest id wins ties), or ``None`` when skipped."""
        try:
            fwd = self.forward(params, example, variant)
        except ResolutionError:
            return None
        return int(np.argmax(fwd.y_hat))


class _RowsView:
    """Minimal stand-in exposing ``rows``/``dim`` for ``encode_backward``."""

    def __init__(self, rows: np.ndarray):
        self.rows = rows
        self.dim = rows.shape[1]

    def row_ids(self, toks):  # pragma: no cover - callers pass encodings
        raise TypeError("pass a QuestionEncoding")
