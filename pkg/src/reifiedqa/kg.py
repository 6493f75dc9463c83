"""Reified sparse knowledge graph and the differentiable follow operation.

A graph with ``N_T`` triples is held as three integer arrays of length
``N_T`` (subject, predicate and object ids).  Each array is the column index
array of a binary index matrix with exactly one nonzero per row, so the
arrays *are* the compressed-row form of ``M_s``, ``M_p`` and ``M_o``.

``follow`` computes ``M_o^T (M_s x * M_p r)`` as a single fused pass over
the triples: gather ``x[subject]`` and ``r[predicate]``, multiply, and
scatter-add into the object accumulator in ascending triple order.
"""

from __future__ import annotations

import logging
from array import array
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import BuildError, CapacityError, ParseError, ShapeError, UnknownIdError

logger = logging.getLogger(__name__)

#: Snapshot ids are stored as little-endian u32.
MAX_IDS = 2**32 - 1


@dataclass(frozen=True)
class Triple:
    subject: int
    predicate: int
    object: int


class Vocab:
    """Dense id <-> label map; ids are assigned in insertion order."""

    def __init__(self, labels: Iterable[str] = ()):
        self._labels: list[str] = []
        self._index: dict[str, int] = {}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        idx = self._index.get(label)
        if idx is None:
            idx = len(self._labels)
            self._index[label] = idx
            self._labels.append(label)
        return idx

    def id(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise UnknownIdError(f"unknown label {label!r}") from None

    def get(self, label: str, default=None):
        return self._index.get(label, default)

    def label(self, idx: int) -> str:
        if not 0 <= idx < len(self._labels):
            raise UnknownIdError(f"id {idx} out of range [0, {len(self._labels)})")
        return self._labels[idx]

    @property
    def labels(self) -> list[str]:
        return list(self._labels)

    def __contains__(self, label) -> bool:
        return label in self._index

    def __len__(self) -> int:
        return len(self._labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._labels == other._labels

    def __repr__(self) -> str:
        return f"Vocab(size={len(self)})"


@dataclass(frozen=True, eq=False)
class EntityVector:
    """Sparse nonnegative weights over the entities of a graph.

    ``indices`` are sorted and unique; ``values`` holds the matching weights.
    """

    indices: np.ndarray
    values: np.ndarray
    size: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        val = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if idx.shape != val.shape:
            raise ShapeError("indices and values must have the same length")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.size:
                raise ShapeError(f"entity index out of range for size {self.size}")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly increasing")
            if np.any(val < 0):
                raise ValueError("entity weights must be nonnegative")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def zeros(cls, size: int) -> "EntityVector":
        return cls(np.empty(0, np.int64), np.empty(0), size)

    @classmethod
    def from_dense(cls, dense) -> "EntityVector":
        dense = np.asarray(dense, dtype=np.float64)
        idx = np.flatnonzero(dense)
        return cls(idx, dense[idx], dense.shape[0])

    @classmethod
    def from_dict(cls, weights: Mapping[int, float], size: int) -> "EntityVector":
        items = sorted(weights.items())
        idx = np.array([k for k, _ in items], dtype=np.int64)
        val = np.array([v for _, v in items], dtype=np.float64)
        return cls(idx, val, size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.size)
        out[self.indices] = self.values
        return out

    def to_dict(self) -> dict[int, float]:
        return dict(zip(self.indices.tolist(), self.values.tolist()))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def sum(self) -> float:
        return float(self.values.sum())

    def __repr__(self) -> str:
        return f"EntityVector(nnz={self.nnz}, size={self.size})"


class ReifiedKG:
    """Immutable triple store encoded as subject/predicate/object index arrays."""

    def __init__(self, subjects, predicates, objects, entity_vocab: Vocab, relation_vocab: Vocab):
        s = np.ascontiguousarray(subjects, dtype=np.int64)
        p = np.ascontiguousarray(predicates, dtype=np.int64)
        o = np.ascontiguousarray(objects, dtype=np.int64)
        if not (s.ndim == p.ndim == o.ndim == 1 and s.size == p.size == o.size):
            raise ShapeError("subject, predicate and object arrays must be 1-d and equally long")
        n_e, n_r = len(entity_vocab), len(relation_vocab)
        if s.size:
            if min(s.min(), o.min(), p.min()) < 0:
                raise BuildError("negative id in triple arrays")
            if max(s.max(), o.max()) >= n_e or p.max() >= n_r:
                raise BuildError("triple id outside vocabulary bounds")
        for a in (s, p, o):
            a.setflags(write=False)
        self.subjects, self.predicates, self.objects = s, p, o
        self.entity_vocab = entity_vocab
        self.relation_vocab = relation_vocab
        self._subject_index = None

    @property
    def n_triples(self) -> int:
        return int(self.subjects.size)

    @property
    def n_entities(self) -> int:
        return len(self.entity_vocab)

    @property
    def n_relations(self) -> int:
        return len(self.relation_vocab)

    def _index_matrix(self, cols, n_cols) -> sp.csr_matrix:
        n = self.n_triples
        return sp.csr_matrix(
            (np.ones(n), cols, np.arange(n + 1)), shape=(n, n_cols)
        )

    @property
    def M_s(self) -> sp.csr_matrix:
        return self._index_matrix(self.subjects, self.n_entities)

    @property
    def M_o(self) -> sp.csr_matrix:
        return self._index_matrix(self.objects, self.n_entities)

    @property
    def M_p(self) -> sp.csr_matrix:
        return self._index_matrix(self.predicates, self.n_relations)

    @property
    def subject_index(self) -> tuple[np.ndarray, np.ndarray]:
        """``(ptr, order)``: triple ids of subject ``e`` are ``order[ptr[e]:ptr[e+1]]``, ascending."""
        if self._subject_index is None:
            order = np.argsort(self.subjects, kind="stable")
            counts = np.bincount(self.subjects, minlength=self.n_entities)
            ptr = np.zeros(self.n_entities + 1, dtype=np.int64)
            np.cumsum(counts, out=ptr[1:])
            self._subject_index = (ptr, order)
        return self._subject_index

    def triples(self) -> list[Triple]:
        return [
            Triple(int(s), int(p), int(o))
            for s, p, o in zip(self.subjects, self.predicates, self.objects)
        ]

    def labeled_triples(self) -> list[tuple[str, str, str]]:
        ents, rels = self.entity_vocab.labels, self.relation_vocab.labels
        return [
            (ents[s], rels[p], ents[o])
            for s, p, o in zip(self.subjects.tolist(), self.predicates.tolist(), self.objects.tolist())
        ]

    def entity_id(self, label: str) -> int:
        return self.entity_vocab.id(label)

    def relation_id(self, label: str) -> int:
        return self.relation_vocab.id(label)

    def __repr__(self) -> str:
        return (
            f"ReifiedKG(n_triples={self.n_triples}, n_entities={self.n_entities}, "
            f"n_relations={self.n_relations})"
        )


def _dedup_rows(s, p, o, n_e, n_r):
    """Drop repeated (s, p, o) rows, keeping first occurrences in order."""
    if s.size == 0:
        return s, p, o
    if n_e * n_e * max(n_r, 1) < 2**62:
        key = (s * n_r + p) * n_e + o
        _, first = np.unique(key, return_index=True)
    else:
        _, first = np.unique(np.stack([s, p, o], axis=1), axis=0, return_index=True)
    if first.size == s.size:
        return s, p, o
    keep = np.sort(first)
    return s[keep], p[keep], o[keep]


def build_kg(
    triples: Iterable[Sequence[str]],
    max_triples: int = MAX_IDS,
    max_entities: int = MAX_IDS,
    max_relations: int = MAX_IDS,
) -> ReifiedKG:
    """Build a ``ReifiedKG`` from ``(subject, predicate, object)`` label triples.

    Entity and relation ids are assigned by first appearance (subject before
    object within a triple).  Repeated triples collapse to a single row.
    """
    ents, rels = Vocab(), Vocab()
    s_ids, p_ids, o_ids = array("q"), array("q"), array("q")
    ent_index, rel_index = ents._index, rels._index
    n_seen = 0
    for triple in triples:
        try:
            s, p, o = triple
        except (TypeError, ValueError):
            raise BuildError(f"triple {n_seen} is not a (subject, predicate, object) tuple") from None
        if not (s and p and o) or not (type(s) is str and type(p) is str and type(o) is str):
            raise BuildError(f"triple {n_seen} has an empty or non-string label: {triple!r}")
        si = ent_index.get(s)
        if si is None:
            si = ents.add(s)
        pi = rel_index.get(p)
        if pi is None:
            pi = rels.add(p)
        oi = ent_index.get(o)
        if oi is None:
            oi = ents.add(o)
        s_ids.append(si)
        p_ids.append(pi)
        o_ids.append(oi)
        n_seen += 1
    if n_seen == 0:
        raise BuildError("cannot build a knowledge graph from zero triples")
    if len(ents) > max_entities:
        raise CapacityError(f"{len(ents)} entities exceed the limit of {max_entities}")
    if len(rels) > max_relations:
        raise CapacityError(f"{len(rels)} relations exceed the limit of {max_relations}")
    s, p, o = (np.frombuffer(a, dtype=np.int64) for a in (s_ids, p_ids, o_ids))
    s, p, o = _dedup_rows(s, p, o, len(ents), len(rels))
    if s.size > max_triples:
        raise CapacityError(f"{s.size} triples exceed the limit of {max_triples}")
    return ReifiedKG(s, p, o, ents, rels)


def _check_relation(kg: ReifiedKG, r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (kg.n_relations,):
        raise ShapeError(f"relation vector has shape {r.shape}, expected ({kg.n_relations},)")
    return r


def _check_dense_entity(kg: ReifiedKG, x, name="x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (kg.n_entities,):
        raise ShapeError(f"{name} has shape {x.shape}, expected ({kg.n_entities},)")
    return x


def _as_dense(kg: ReifiedKG, x, name="x") -> np.ndarray:
    if isinstance(x, EntityVector):
        if x.size != kg.n_entities:
            raise ShapeError(f"{name} has size {x.size}, expected {kg.n_entities}")
        return x.to_dense()
    return _check_dense_entity(kg, x, name)


def _rows_for_subjects(kg: ReifiedKG, subjects: np.ndarray):
    """Triple ids whose subject is in ``subjects`` plus the position of that subject."""
    ptr, order = kg.subject_index
    starts, ends = ptr[subjects], ptr[subjects + 1]
    counts = ends - starts
    total = int(counts.sum())
    owner = np.repeat(np.arange(subjects.size), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    rows = order[starts[owner] + offsets]
    perm = np.argsort(rows, kind="stable")
    return rows[perm], owner[perm]


def follow(kg: ReifiedKG, x, r):
    """Follow relation weights ``r`` from entity weights ``x``.

    ``x`` may be a dense array of length ``N_E`` (returns a dense array) or an
    ``EntityVector`` (returns an ``EntityVector`` touching only the triples
    whose subject is in its support).  Both routes accumulate each output in
    ascending triple order, so they agree bit for bit.
    """
    r = _check_relation(kg, r)
    if isinstance(x, EntityVector):
        if x.size != kg.n_entities:
            raise ShapeError(f"x has size {x.size}, expected {kg.n_entities}")
        rows, owner = _rows_for_subjects(kg, x.indices)
        contrib = x.values[owner] * r[kg.predicates[rows]]
        objs = kg.objects[rows]
        uniq, inv = np.unique(objs, return_inverse=True)
        vals = np.bincount(inv, weights=contrib, minlength=uniq.size)
        keep = vals != 0
        return EntityVector(uniq[keep], vals[keep], kg.n_entities)
    x = _check_dense_entity(kg, x)
    contrib = x[kg.subjects] * r[kg.predicates]
    return np.bincount(kg.objects, weights=contrib, minlength=kg.n_entities)


def follow_backward(kg: ReifiedKG, x, r, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``follow`` with respect to ``x`` and ``r`` (both dense)."""
    r = _check_relation(kg, r)
    x = _as_dense(kg, x)
    g = _as_dense(kg, grad_out, "grad_out")
    g_obj = g[kg.objects]
    grad_x = np.bincount(kg.subjects, weights=g_obj * r[kg.predicates], minlength=kg.n_entities)
    grad_r = np.bincount(kg.predicates, weights=g_obj * x[kg.subjects], minlength=kg.n_relations)
    return grad_x, grad_r


class SubgraphRemap(NamedTuple):
    entities: dict[int, int]
    relations: dict[int, int]


def reachable_subgraph(kg: ReifiedKG, seeds: Iterable[int], t_max: int) -> tuple[ReifiedKG, SubgraphRemap]:
    """Keep the triples whose subject is reachable from ``seeds`` in fewer than ``t_max`` hops.

    Seeds are hop 0.  Ids in the returned graph are re-densified by first
    appearance; the remap maps old ids to new ones.
    """
    seeds = np.unique(np.fromiter((int(e) for e in seeds), dtype=np.int64))
    if seeds.size == 0:
        raise ValueError("seeds must be nonempty")
    bad = seeds[(seeds < 0) | (seeds >= kg.n_entities)]
    if bad.size:
        raise UnknownIdError(f"seed entity id {int(bad[0])} is not in the graph")
    if t_max < 0:
        raise ValueError("t_max must be nonnegative")

    reached = np.zeros(kg.n_entities, dtype=bool)
    frontier = seeds
    for _ in range(t_max):
        frontier = frontier[~reached[frontier]]
        if frontier.size == 0:
            break
        reached[frontier] = True
        rows, _ = _rows_for_subjects(kg, frontier)
        frontier = np.unique(kg.objects[rows])

    keep = np.flatnonzero(reached[kg.subjects])
    s, p, o = kg.subjects[keep], kg.predicates[keep], kg.objects[keep]
    ents, rels = Vocab(), Vocab()
    ent_map: dict[int, int] = {}
    rel_map: dict[int, int] = {}
    e_labels, r_labels = kg.entity_vocab.labels, kg.relation_vocab.labels
    new_s, new_p, new_o = [], [], []
    for si, pi, oi in zip(s.tolist(), p.tolist(), o.tolist()):
        for old in (si, oi):
            if old not in ent_map:
                ent_map[old] = ents.add(e_labels[old])
        if pi not in rel_map:
            rel_map[pi] = rels.add(r_labels[pi])
        new_s.append(ent_map[si])
        new_p.append(rel_map[pi])
        new_o.append(ent_map[oi])
    sub = ReifiedKG(
        np.array(new_s, dtype=np.int64),
        np.array(new_p, dtype=np.int64),
        np.array(new_o, dtype=np.int64),
        ents,
        rels,
    )
    return sub, SubgraphRemap(ent_map, rel_map)


# --- file formats -----------------------------------------------------------


def read_triples(path) -> list[tuple[str, str, str]]:
    """Read a tab-separated triple file; ``#`` lines and blank lines are skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", path, line_no)
            if not all(fields):
                raise ParseError("empty label", path, line_no)
            out.append((fields[0], fields[1], fields[2]))
    return out


def write_triples(triples: Iterable[Sequence[str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, p, o in triples:
            fh.write(f"{s}\t{p}\t{o}\n")


def _write_vocab(vocab: Vocab, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, label in enumerate(vocab.labels):
            if "\t" in label or "\n" in label:
                raise BuildError(f"label {label!r} cannot be stored in a TSV snapshot")
            fh.write(f"{i}\t{label}\n")


def _read_vocab(path: Path) -> Vocab:
    vocab = Vocab()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            idx, sep, label = line.partition("\t")
            if not sep or not idx.isdigit() or int(idx) != len(vocab) or not label:
                raise ParseError("expected '<id>\\t<label>' with contiguous ids", path, line_no)
            vocab.add(label)
    return vocab


def save_snapshot(kg: ReifiedKG, out_dir) -> Path:
    """Write ``entities.tsv``, ``relations.tsv`` and ``triples.bin`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_vocab(kg.entity_vocab, out / "entities.tsv")
    _write_vocab(kg.relation_vocab, out / "relations.tsv")
    with open(out / "triples.bin", "wb") as fh:
        for arr in (kg.subjects, kg.predicates, kg.objects):
            fh.write(arr.astype("<u4").tobytes())
    return out


def load_snapshot(snap_dir) -> ReifiedKG:
    snap = Path(snap_dir)
    ents = _read_vocab(snap / "entities.tsv")
    rels = _read_vocab(snap / "relations.tsv")
    raw = np.fromfile(snap / "triples.bin", dtype="<u4")
    if raw.size % 3:
        raise ParseError("triples.bin length is not a multiple of three u32 arrays", snap / "triples.bin")
    s, p, o = raw.reshape(3, -1).astype(np.int64)
    return ReifiedKG(s, p, o, ents, rels)
