"""Question tokenization and a trainable mean-pooling token encoder.

The encoder exposes the same contract a contextual language model would:
a question embedding ``h_q`` plus one vector per token.  Here the token
vectors are plain embedding-table rows and ``h_q`` is their mean.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .exceptions import InputError, ShapeError

UNK = "<unk>"
DEFAULT_DIM = 64

_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[str, ...]
    offsets: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.tokens)

    def span_text(self, i: int, j: int) -> str:
        return " ".join(self.tokens[i : j + 1])


def tokenize(question: str) -> TokenSeq:
    """Lowercase and split on whitespace/punctuation, dropping punctuation.

    >>> tokenize("What position does Carlos Gomez play?").tokens
    ('what', 'position', 'does', 'carlos', 'gomez', 'play')
    """
    if not question or not question.strip():
        raise InputError("question is empty")
    tokens, offsets = [], []
    for m in _TOKEN_RE.finditer(question):
        tokens.append(m.group().lower())
        offsets.append(m.span())
    if not tokens:
        raise InputError(f"question {question!r} has no word tokens")
    return TokenSeq(tuple(tokens), tuple(offsets))


def normalize(text: str) -> tuple[str, ...]:
    """Token tuple used as an alias-table key."""
    return tokenize(text).tokens


class EmbeddingTable:
    """Token -> row map with a reserved unknown-token row 0."""

    def __init__(self, tokens: Iterable[str], dim: int = DEFAULT_DIM, rows=None, rng=None):
        self.vocab: dict[str, int] = {UNK: 0}
        for tok in tokens:
            if tok != UNK and tok not in self.vocab:
                self.vocab[tok] = len(self.vocab)
        self.dim = int(dim)
        if rows is None:
            rng = np.random.default_rng(rng)
            bound = 0.5 / self.dim
            rows = rng.uniform(-bound, bound, size=(len(self.vocab), self.dim))
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape != (len(self.vocab), self.dim):
            raise ShapeError(f"rows have shape {rows.shape}, expected {(len(self.vocab), self.dim)}")
        self.rows = rows

    @classmethod
    def from_questions(cls, questions: Iterable[str], dim: int = DEFAULT_DIM, rng=None) -> "EmbeddingTable":
        tokens = []
        for q in questions:
            tokens.extend(tokenize(q).tokens)
        return cls(tokens, dim=dim, rng=rng)

    def row_ids(self, toks: TokenSeq) -> np.ndarray:
        get = self.vocab.get
        return np.fromiter((get(t, 0) for t in toks.tokens), dtype=np.int64, count=len(toks))

    @property
    def tokens(self) -> list[str]:
        return list(self.vocab)

    def __len__(self):
        return len(self.vocab)

    def save_vocab(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.vocab:
                fh.write(tok + "\n")

    @classmethod
    def load_vocab(cls, path, dim: int = DEFAULT_DIM, rows=None, rng=None) -> "EmbeddingTable":
        with open(path, encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
        if not lines or lines[0] != UNK:
            raise InputError(f"{path}: first line must be the unknown token {UNK!r}")
        return cls(lines[1:], dim=dim, rows=rows, rng=rng)


@dataclass
class QuestionEncoding:
    h_q: np.ndarray
    token_embs: np.ndarray
    row_ids: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.token_embs.shape[0]


def encode(table: EmbeddingTable, toks: TokenSeq, rows=None) -> QuestionEncoding:
    """Look up token rows and mean-pool them into ``h_q``.

    ``rows`` overrides ``table.rows`` (the trainer keeps rows in its own
    parameter container).
    """
    if len(toks) == 0:
        raise InputError("cannot encode an empty token sequence")
    ids = table.row_ids(toks)
    token_embs = (table.rows if rows is None else rows)[ids]
    return QuestionEncoding(token_embs.mean(axis=0), token_embs, ids)


def span_embed(enc: QuestionEncoding, i: int, j: int) -> np.ndarray:
    """Mean of token embeddings ``i..j`` inclusive."""
    n = enc.n_tokens
    if not 0 <= i <= j < n:
        raise IndexError(f"span [{i}, {j}] is invalid for {n} tokens")
    return enc.token_embs[i : j + 1].mean(axis=0)


def encode_backward(table: EmbeddingTable, toks_or_enc, grad_h_q=None, grad_token_embs=None, out=None) -> np.ndarray:
    """Scatter upstream gradients on ``h_q`` and the token vectors into table rows.

    Returns a dense gradient the shape of ``table.rows``.  Pass ``out`` to
    accumulate into an existing buffer instead.
    """
    if isinstance(toks_or_enc, QuestionEncoding):
        ids = toks_or_enc.row_ids
    else:
        ids = table.row_ids(toks_or_enc)
    n, d = ids.size, table.dim
    g = np.zeros((n, d))
    if grad_token_embs is not None:
        grad_token_embs = np.asarray(grad_token_embs, dtype=np.float64)
        if grad_token_embs.shape != (n, d):
            raise ShapeError(f"token gradient has shape {grad_token_embs.shape}, expected {(n, d)}")
        g += grad_token_embs
    if grad_h_q is not None:
        grad_h_q = np.asarray(grad_h_q, dtype=np.float64)
        if grad_h_q.shape != (d,):
            raise ShapeError(f"h_q gradient has shape {grad_h_q.shape}, expected ({d},)")
        g += grad_h_q / n
    if out is None:
        out = np.zeros_like(table.rows)
    elif out.shape != table.rows.shape:
        raise ShapeError("output buffer does not match the table shape")
    np.add.at(out, ids, g)
    return out
