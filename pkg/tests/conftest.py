import numpy as np
import pytest

from reifiedqa.kg import build_kg
from reifiedqa.model import QAExample, QAModel
from reifiedqa.resolver import build_alias_table
from reifiedqa.text import EmbeddingTable

TOY_TRIPLES = [("A", "r1", "B"), ("A", "r1", "C"), ("B", "r2", "C")]


@pytest.fixture
def toy_kg():
    return build_kg(TOY_TRIPLES)


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar ``f`` at every coordinate of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, floor=1e-8):
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale >= floor
    rel = np.abs(a - n)[mask] / scale[mask]
    assert rel.size == 0 or rel.max() < rtol, f"max rel error {rel.max():.3g}"


def random_kg_triples(rng, n_entities, n_relations, n_triples):
    triples = set()
    while len(triples) < n_triples:
        s, o = rng.integers(n_entities, size=2)
        p = rng.integers(n_relations)
        triples.add((f"e{s}", f"r{p}", f"e{o}"))
    return sorted(triples)


SYLLABLES = ["ka", "lo", "mi", "ne", "su", "ta", "vo", "ri", "be", "zu", "po", "gi"]
FILLER = ["what", "is", "the", "of", "who", "where", "does", "which", "a", "in"]


def miniature_instance(seed, t_max=2, dim=6, param_scale=0.8):
    """A random miniature task with nested and shared alias spans.

    Returns ``(model, params, examples)`` with N_E <= 50, N_R <= 8 and a token
    vocabulary below 100.
    """
    rng = np.random.default_rng(seed)
    n_e = int(rng.integers(12, 40))
    n_r = int(rng.integers(2, 9))
    triples = random_kg_triples(rng, n_e, n_r, int(rng.integers(n_e, 2 * n_e)))
    kg = build_kg(triples)
    n_e = kg.n_entities
    names = {}
    words = [a + b for a in SYLLABLES for b in SYLLABLES]
    rng.shuffle(words)
    aliases = []
    subjects = sorted({s for s, _, _ in triples}, key=kg.entity_id)
    for k, label in enumerate(subjects[:12]):
        first, last = words[2 * k], words[2 * k + 1]
        names[label] = (first, last)
        aliases.append((label, f"{first} {last}"))
        # nested single-token alias pointing to a different entity
        aliases.append((subjects[(k + 1) % len(subjects)], last))
        # every other full name is shared with a second entity
        if k % 2 == 0:
            aliases.append((subjects[-1 - k % len(subjects)], f"{first} {last}"))
    labels = list(names)
    table = build_alias_table(kg, aliases, include_titles=False)

    examples = []
    for _ in range(6):
        label = labels[int(rng.integers(len(labels)))]
        pre = [FILLER[i] for i in rng.integers(len(FILLER), size=int(rng.integers(1, 4)))]
        post = [FILLER[i] for i in rng.integers(len(FILLER), size=int(rng.integers(0, 3)))]
        toks = pre + list(names[label]) + post
        gid = kg.entity_id(label)
        answers = tuple(sorted({int(a) for a in rng.choice(n_e, size=int(rng.integers(1, 3)), replace=False)}))
        examples.append(QAExample(" ".join(toks), answers, (gid,), (len(pre), len(pre) + 1)))
    vocab = EmbeddingTable.from_questions([ex.question for ex in examples], dim=dim)
    model = QAModel(kg, table, vocab, dim=dim, t_max=t_max)
    params = model.init_params(seed)
    for _, arr in params.named():
        arr[...] = rng.normal(0.0, param_scale, size=arr.shape)
    return model, params, examples


def most_ambiguous(model, examples):
    """The example whose e2e spans exercise both span and candidate scoring."""
    def key(ex):
        spans = model.spans_for(ex, "e2e")
        return (len(spans) > 1 and any(len(s.candidates) > 1 for s in spans), len(spans.candidate_ids))

    return max(examples, key=key)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
