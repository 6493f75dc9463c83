"""QA file loading, seeded synthetic KGQA tasks, and evaluation metrics."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import ParseError
from .kg import ReifiedKG, build_kg, write_triples
from .model import QAExample, QAModel, check_variant
from .resolver import write_aliases
from .text import tokenize

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class QARecord:
    """One QA line with labels still unresolved."""

    question: str
    answers: tuple[str, ...]
    gold_entities: tuple[str, ...] | None = None
    gold_span: tuple[int, int] | None = None

    def to_line(self) -> str:
        gold = "|".join(self.gold_entities) if self.gold_entities else "-"
        span = f"{self.gold_span[0]}:{self.gold_span[1]}" if self.gold_span else "-"
        return f"{self.question}\t{'|'.join(self.answers)}\t{gold}\t{span}"


def _parse_span(text: str) -> tuple[int, int]:
    i, sep, j = text.partition(":")
    if not sep or not i.isdigit() or not j.isdigit() or int(i) > int(j):
        raise ValueError(f"gold span {text!r} is not of the form i:j with i <= j")
    return int(i), int(j)


def parse_qa_line(line: str) -> QARecord:
    fields_ = line.split("\t")
    if len(fields_) != 4:
        raise ValueError(f"expected 4 tab-separated fields, got {len(fields_)}")
    question, answers, gold, span = fields_
    if not question.strip():
        raise ValueError("empty question")
    answer_labels = tuple(a for a in answers.split("|") if a)
    if not answer_labels:
        raise ValueError("empty answer list")
    gold_labels = None if gold == "-" else tuple(g for g in gold.split("|") if g)
    gold_span = None if span == "-" else _parse_span(span)
    return QARecord(question, answer_labels, gold_labels or None, gold_span)


def read_qa_file(path) -> list[QARecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            try:
                out.append(parse_qa_line(line))
            except ValueError as exc:
                raise ParseError(str(exc), path, line_no) from None
    return out


def write_qa_file(records: Iterable[QARecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_line() + "\n")


@dataclass
class Dataset:
    splits: dict[str, list[QAExample]]
    provenance: dict = field(default_factory=dict)
    dropped: dict[str, int] = field(default_factory=dict)

    def __getitem__(self, name: str) -> list[QAExample]:
        return self.splits[name]

    def overlapping_questions(self) -> set[str]:
        seen: dict[str, str] = {}
        dup = set()
        for name, examples in self.splits.items():
            for ex in examples:
                other = seen.setdefault(ex.question, name)
                if other != name:
                    dup.add(ex.question)
        return dup


def resolve_records(records: Iterable[QARecord], kg: ReifiedKG) -> tuple[list[QAExample], int]:
    """Map labels to ids; records with an unknown answer or gold label are dropped."""
    get = kg.entity_vocab.get
    out, dropped = [], 0
    for rec in records:
        answers = [get(a) for a in rec.answers]
        gold = None if rec.gold_entities is None else [get(g) for g in rec.gold_entities]
        if None in answers or (gold is not None and None in gold):
            dropped += 1
            continue
        out.append(
            QAExample(
                rec.question,
                tuple(sorted(set(answers))),
                None if gold is None else tuple(sorted(set(gold))),
                rec.gold_span,
            )
        )
    return out, dropped


def load_dataset(paths: Mapping[str, str | Path], kg: ReifiedKG, source: str = "files") -> Dataset:
    splits, dropped = {}, {}
    for name, path in paths.items():
        examples, n_drop = resolve_records(read_qa_file(path), kg)
        splits[name] = examples
        dropped[name] = n_drop
        if n_drop:
            logger.warning("%s: dropped %d examples with unresolvable labels", path, n_drop)
    ds = Dataset(splits, {"source": source, "paths": {k: str(v) for k, v in paths.items()}}, dropped)
    dup = ds.overlapping_questions()
    if dup:
        logger.warning("%d questions occur in more than one split", len(dup))
    return ds


# --- evaluation -------------------------------------------------------------


def predict_split(model: QAModel, params, examples: Sequence[QAExample], variant: str) -> list[int | None]:
    return [model.predict_one(params, ex, variant) for ex in examples]


def metrics_from_predictions(examples: Sequence[QAExample], predictions: Sequence[int | None]) -> dict:
    n = len(examples)
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    hits = sum(p is not None and p in ex.answers for ex, p in zip(examples, predictions))
    covered = sum(p is not None for p in predictions)
    return {"hits_at_1": hits / n, "accuracy": hits / n, "coverage": covered / n, "n": n}


def evaluate(model: QAModel, params, examples: Sequence[QAExample], variant: str = "e2e") -> dict:
    """Top-1 metrics; skipped examples count as wrong and reduce coverage."""
    check_variant(variant)
    return metrics_from_predictions(examples, predict_split(model, params, examples, variant))


# --- synthetic tasks --------------------------------------------------------


@dataclass(frozen=True)
class Chain:
    """A person attribute and the attribute's own attribute (a 2-hop path)."""

    relation: str
    second_relation: str
    one_hop: tuple[str, ...]
    two_hop: tuple[str, ...]


DEFAULT_SCHEMA = (
    Chain(
        "occupation",
        "field_of_work",
        (
            "what is the occupation of {name}?",
            "what does {name} do for a living?",
            "what job does {name} have?",
            "what is {name}'s profession?",
        ),
        (
            "what field of work does the occupation of {name} belong to?",
            "which field is {name}'s job in?",
            "in what discipline is the profession of {name}?",
        ),
    ),
    Chain(
        "place_of_birth",
        "country",
        (
            "where was {name} born?",
            "what is the place of birth of {name}?",
            "in which city was {name} born?",
            "what is {name}'s hometown?",
        ),
        (
            "in which country was {name} born?",
            "what country is {name}'s birthplace in?",
            "which nation is the hometown of {name} located in?",
        ),
    ),
    Chain(
        "employer",
        "industry",
        (
            "who employs {name}?",
            "which company does {name} work for?",
            "who is the employer of {name}?",
            "at which firm is {name} employed?",
        ),
        (
            "what industry is {name}'s employer in?",
            "which sector does {name} work in?",
            "what business area is the company of {name} part of?",
        ),
    ),
    Chain(
        "educated_at",
        "institution_type",
        (
            "where did {name} study?",
            "which school did {name} attend?",
            "where was {name} educated?",
            "what is the alma mater of {name}?",
        ),
        (
            "what type of institution did {name} attend?",
            "what kind of school did {name} go to?",
            "what category is the alma mater of {name}?",
        ),
    ),
)

_ONSETS = "b c d f g h j k l m n p r s t v z br dr gr kr pl st tr".split()
_VOWELS = "a e i o u".split()
_CODAS = ["", "", "n", "r", "l", "s", "x", "m"]


@dataclass
class SynthSpec:
    n_people: int = 140
    n_attributes: int = 10
    schema: tuple[Chain, ...] = DEFAULT_SCHEMA
    shared_name_rate: float = 0.0
    overlapping_span_rate: float = 0.0
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 500
    two_hop_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_people < 2 or self.n_attributes < 2:
            raise ValueError("need at least 2 people and 2 attribute values")
        for name in ("shared_name_rate", "overlapping_span_rate", "two_hop_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ValueError("every split needs at least one question")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = [asdict(c) for c in self.schema]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        d = dict(d)
        if "schema" in d:
            d["schema"] = tuple(
                Chain(c["relation"], c["second_relation"], tuple(c["one_hop"]), tuple(c["two_hop"])) for c in d["schema"]
            )
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthResult:
    spec: SynthSpec
    triples: list[tuple[str, str, str]]
    aliases: list[tuple[str, str]]
    records: dict[str, list[QARecord]]
    kg: ReifiedKG
    dataset: Dataset

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_triples(self.triples, out / "triples.tsv")
        write_aliases(self.aliases, out / "aliases.tsv")
        for name, recs in self.records.items():
            write_qa_file(recs, out / f"{name}.tsv")
        (out / "spec.json").write_text(json.dumps(self.spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return out


def _pseudo_words(rng, n: int, banned: set[str]) -> list[str]:
    words: list[str] = []
    seen = set(banned)
    while len(words) < n:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(2)) + rng.choice(_CODAS)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def traverse(triples: Iterable[tuple[str, str, str]], start: str, path: Sequence[str]) -> set[str]:
    """Brute-force relation-path traversal over labeled triples."""
    frontier = {start}
    triples = list(triples)
    for rel in path:
        frontier = {o for s, p, o in triples if p == rel and s in frontier}
    return frontier


def generate_synth(spec: SynthSpec) -> SynthResult:
    """Build a people/attribute graph, aliases and templated 1- and 2-hop questions.

    ``shared_name_rate`` pairs people under one shared name (a 2-way entity
    tie); ``overlapping_span_rate`` gives another person a nickname equal to
    someone's surname, creating a nested candidate span.
    """
    rng = np.random.default_rng(spec.seed)
    counter = iter(range(100, 10**9))

    def new_id():
        return f"Q{next(counter)}"

    people = [new_id() for _ in range(spec.n_people)]
    triples: list[tuple[str, str, str]] = []
    n_second = max(2, spec.n_attributes // 2)
    first_level = []
    for chain in spec.schema:
        values = [new_id() for _ in range(spec.n_attributes)]
        seconds = [new_id() for _ in range(n_second)]
        targets = [seconds[i % n_second] for i in rng.permutation(spec.n_attributes)]
        first_level.append(values)
        for v, s in zip(values, targets):
            triples.append((v, chain.second_relation, s))
    for person in people:
        for chain, values in zip(spec.schema, first_level):
            triples.append((person, chain.relation, values[int(rng.integers(len(values)))]))

    template_words = set()
    for chain in spec.schema:
        for tpl in chain.one_hop + chain.two_hop:
            template_words.update(tokenize(tpl.format(name="x")).tokens)
    words = _pseudo_words(rng, 2 * spec.n_people, template_words)
    names = {p: f"{words[2 * k]} {words[2 * k + 1]}" for k, p in enumerate(people)}

    n_shared = int(round(spec.shared_name_rate * spec.n_people)) // 2 * 2
    shared = rng.permutation(spec.n_people)[:n_shared].tolist()
    for a, b in zip(shared[0::2], shared[1::2]):
        names[people[b]] = names[people[a]]

    aliases = [(p, names[p]) for p in people]
    n_overlap = int(round(spec.overlapping_span_rate * spec.n_people))
    for k in rng.permutation(spec.n_people)[:n_overlap].tolist():
        other = int(rng.integers(spec.n_people - 1))
        other += other >= k
        aliases.append((people[other], names[people[k]].split()[1]))

    pool = []
    for person in people:
        for chain in spec.schema:
            for tpl in chain.one_hop:
                pool.append((person, (chain.relation,), tpl))
            for tpl in chain.two_hop:
                pool.append((person, (chain.relation, chain.second_relation), tpl))
    one = [x for x in pool if len(x[1]) == 1]
    two = [x for x in pool if len(x[1]) == 2]
    one = [one[i] for i in rng.permutation(len(one))]
    two = [two[i] for i in rng.permutation(len(two))]

    total = spec.n_train + spec.n_dev + spec.n_test
    n_two = int(round(spec.two_hop_fraction * total))
    chosen, seen = [], set()
    for source, want in ((two, n_two), (one, total - n_two)):
        got = 0
        for person, path, tpl in source:
            if got == want:
                break
            q = tpl.format(name=names[person])
            if q in seen:
                continue
            seen.add(q)
            chosen.append((q, person, path))
            got += 1
        if got < want:
            raise ValueError(f"spec asks for {want} questions of length {len(path)} but only {got} distinct ones exist")
    chosen = [chosen[i] for i in rng.permutation(len(chosen))]

    by_subject = defaultdict(list)
    for s, p, o in triples:
        by_subject[s].append((p, o))

    records = []
    for q, person, path in chosen:
        answers = _walk(by_subject, person, path)
        toks = tokenize(q).tokens
        name_toks = tuple(names[person].split())
        i = next(k for k in range(len(toks)) if toks[k : k + len(name_toks)] == name_toks)
        records.append(QARecord(q, tuple(sorted(answers)), (person,), (i, i + len(name_toks) - 1)))

    splits = {
        "train": records[: spec.n_train],
        "dev": records[spec.n_train : spec.n_train + spec.n_dev],
        "test": records[spec.n_train + spec.n_dev :],
    }
    kg = build_kg(triples)
    examples = {name: resolve_records(recs, kg)[0] for name, recs in splits.items()}
    ds = Dataset(examples, {"source": "synthetic", "seed": spec.seed}, {k: 0 for k in examples})
    return SynthResult(spec, triples, aliases, splits, kg, ds)


def _walk(by_subject, start: str, path: Sequence[str]) -> set[str]:
    frontier = {start}
    for rel in path:
        frontier = {o for s in frontier for p, o in by_subject.get(s, ()) if p == rel}
    return frontier
