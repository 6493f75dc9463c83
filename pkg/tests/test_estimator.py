import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from reifiedqa.data import SynthSpec, generate_synth
from reifiedqa.estimator import KGQAEstimator, check_examples
from reifiedqa.model import QAExample


@pytest.fixture(scope="module")
def task():
    syn = generate_synth(SynthSpec(n_people=24, n_attributes=4, n_train=80, n_dev=20, n_test=20, seed=2))
    labels = syn.kg.entity_vocab.labels
    X = {s: [r.question for r in recs] for s, recs in syn.records.items()}
    y = {s: [list(r.answers) for r in recs] for s, recs in syn.records.items()}
    return syn, labels, X, y


def make(syn, **kw):
    base = dict(kg=syn.kg, aliases=syn.aliases, dim=8, t_max=2, batch_size=8, grad_accumulation=1, max_steps=40, eval_every=20)
    return KGQAEstimator(**{**base, **kw})


def test_params_and_clone(task):
    est = make(task[0], learning_rate=3e-3)
    params = est.get_params()
    assert params["learning_rate"] == 3e-3 and params["variant"] == "e2e"
    twin = clone(est)
    assert twin.get_params()["max_steps"] == 40
    twin.set_params(variant="er")
    assert est.variant == "e2e"


def test_not_fitted(task):
    with pytest.raises(NotFittedError):
        make(task[0]).predict(["who"])


def test_fit_predict_score(task):
    syn, labels, X, y = task
    est = make(syn, learning_rate=1e-2).fit(X["train"], y["train"], X["dev"], y["dev"])
    pred = est.predict(X["test"])
    assert pred.shape == (20,) and pred.dtype == object
    assert set(pred) <= set(labels)
    hits = np.mean([p in ans for p, ans in zip(pred, y["test"])])
    assert est.score(X["test"], y["test"]) == pytest.approx(hits)
    scores = est.decision_function(X["test"][:3])
    assert scores.shape == (3, syn.kg.n_entities) and np.all(scores >= 0)
    assert est.predict(["no alias here"])[0] is None
    assert est.explain(X["test"][0]).y_hat.shape == (syn.kg.n_entities,)


def test_check_examples(task):
    syn, labels, X, y = task
    with pytest.raises(ValueError):
        check_examples([], None, syn.kg)
    with pytest.raises(ValueError):
        check_examples(X["train"][:2], y["train"][:1], syn.kg)
    with pytest.raises(ValueError):
        check_examples(X["train"][:2], None, syn.kg)
    with pytest.raises(TypeError):
        check_examples([3], [["x"]], syn.kg)
    ex = check_examples([QAExample("q", (0,), (1,), (0, 0))], [labels[5]], syn.kg)[0]
    assert ex.answers == (5,) and ex.gold_entities == (1,)
