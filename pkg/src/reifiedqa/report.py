"""Human-readable diagnostic traces for single questions."""

from __future__ import annotations

import numpy as np

from .inference import InferenceTrace
from .kg import ReifiedKG
from .model import Forward

CHECK, CROSS = "✓", "✗"


def _pairs(items, digits=3) -> str:
    return ", ".join(f"({label!r}, {round(float(w), digits)})" for label, w in items)


def top_k(weights: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` largest weights, ties broken by lower index."""
    order = np.lexsort((np.arange(weights.size), -weights))
    return order[:k].tolist()


def format_inference(kg: ReifiedKG, trace: InferenceTrace, n_relations: int = 5, n_entities: int = 10) -> str:
    rels, ents = kg.relation_vocab.labels, kg.entity_vocab.labels
    lines = []
    for t, r in enumerate(trace.relations, 1):
        lines.append(f"Hop {t} Relations:")
        lines.append(_pairs((rels[i], r[i]) for i in top_k(r, n_relations)))
    lines.append("Hop Attention:")
    lines.append(_pairs((t, a) for t, a in enumerate(trace.attention, 1)))
    lines.append("Answer Entities:")
    y = trace.y_hat
    lines.append(_pairs((ents[i], y[i]) for i in top_k(y, n_entities) if y[i] > 0) or "(none)")
    return "\n".join(lines)


def format_trace(kg: ReifiedKG, fwd: Forward | None, question: str, gold_entities=None, answers=None, n_candidates: int = 12) -> str:
    """Span likelihoods, candidate likelihoods and the top prediction chain.

    ``fwd`` is ``None`` when the question produced no candidates.
    """
    ents = kg.entity_vocab.labels
    lines = [f"Question: {question}"]
    if gold_entities:
        lines.append("Question Entity: " + ", ".join(ents[g] for g in gold_entities))
    if answers:
        lines.append("Answer Entity: " + ", ".join(ents[a] for a in answers))
    lines.append("")
    if fwd is None:
        lines += ["Span Likelihoods:", "(no candidates)", "", "Candidate Entity Likelihoods:", "(no candidates)", "",
                  "Top Prediction:", "no candidates"]
        return "\n".join(lines)

    diags = fwd.seed.diagnostics
    span_scores: dict[str, float] = {}
    for d in diags:
        span_scores.setdefault(d.span_text, d.span_score)
    lines.append("Span Likelihoods:")
    if span_scores:
        ordered = sorted(span_scores.items(), key=lambda kv: -kv[1])
        lines.append(_pairs(ordered))
    else:
        lines.append("(gold entities given)")
    lines.append("")

    lines.append("Candidate Entity Likelihoods:")
    if diags:
        cands = sorted(diags, key=lambda d: (-d.candidate_score, d.entity))
        lines.append(_pairs((ents[d.entity], d.candidate_score) for d in cands[:n_candidates]) + (", ..." if len(cands) > n_candidates else ""))
    else:
        x0 = fwd.seed.x0
        lines.append(_pairs((ents[i], w) for i, w in zip(x0.indices.tolist(), x0.values)))
    lines.append("")

    trace = fwd.trace
    rels = kg.relation_vocab.labels
    if span_scores:
        head_span, head_score = max(span_scores.items(), key=lambda kv: kv[1])
        head = f"({head_span!r}, {round(head_score, 3)})"
    else:
        head = _pairs((ents[i], w) for i, w in zip(fwd.seed.x0.indices.tolist(), fwd.seed.x0.values))
    best_hop = int(np.argmax(trace.attention))
    chain = [head]
    for t in range(best_hop + 1):
        r = trace.relations[t]
        i = top_k(r, 1)[0]
        chain.append(f"({rels[i]}, {r[i]:.3f})")
    y = trace.y_hat
    top = top_k(y, 1)[0]
    chain.append(f"({ents[top]!r}, {y[top]:.3f})")
    line = " → ".join(chain)
    if answers:
        line += " " + (CHECK if top in answers else CROSS)
    lines.append("Top Prediction:")
    lines.append(line)
    lines.append("")
    lines.append(format_inference(kg, trace))
    return "\n".join(lines)
