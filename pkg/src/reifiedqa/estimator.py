"""scikit-learn style estimator around the QA model.

``X`` is a sequence of questions: plain strings, or ``QAExample`` objects
when gold entities/spans are needed (``baseline`` and ``er`` variants).
``y`` is a sequence of answer-label collections (one label per example is
also accepted).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ResolutionError
from .kg import ReifiedKG
from .model import QAExample, QAModel, check_variant
from .resolver import build_alias_table
from .text import EmbeddingTable
from .training import TrainConfig, train
from .data import metrics_from_predictions


def _as_labels(item) -> tuple[str, ...]:
    if isinstance(item, str):
        return (item,)
    return tuple(item)


def check_examples(X, y, kg: ReifiedKG, require_answers: bool = True) -> list[QAExample]:
    """Coerce ``(X, y)`` into ``QAExample`` objects with ids resolved against ``kg``."""
    X = list(X)
    if not X:
        raise ValueError("X is empty")
    if y is not None:
        y = list(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} items but y has {len(y)}")
    out = []
    for n, item in enumerate(X):
        if isinstance(item, QAExample):
            ex = item
            if y is not None:
                ids = tuple(sorted({kg.entity_id(a) for a in _as_labels(y[n])}))
                ex = QAExample(ex.question, ids, ex.gold_entities, ex.gold_span)
        elif isinstance(item, str):
            if y is None:
                if require_answers:
                    raise ValueError("y is required when X holds question strings")
                ex = QAExample(item, (0,))
            else:
                ex = QAExample(item, tuple(sorted({kg.entity_id(a) for a in _as_labels(y[n])})))
        else:
            raise TypeError(f"X[{n}] must be a question string or QAExample, got {type(item).__name__}")
        out.append(ex)
    return out


class KGQAEstimator(BaseEstimator):
    """Jointly trained entity resolution and multi-hop inference.

    Parameters
    ----------
    kg : ReifiedKG
        The knowledge graph answers are drawn from.
    aliases : sequence of (entity_label, alias_text)
        Extra surface forms; entity labels are always aliases of themselves.
    variant : {"baseline", "er", "e2e"}
        Where the seed entity vector comes from.
    dim, t_max, max_span_len :
        Embedding width, number of hops, longest alias span in tokens.
    batch_size, grad_accumulation, max_steps, learning_rate, patience, eval_every :
        Optimisation settings, see ``TrainConfig``.
    random_state : int
        Seeds initialization and batch order.
    """

    def __init__(
        self,
        kg: ReifiedKG | None = None,
        aliases: Sequence[tuple[str, str]] = (),
        variant: str = "e2e",
        dim: int = 64,
        t_max: int = 1,
        max_span_len: int = 6,
        batch_size: int = 32,
        grad_accumulation: int = 8,
        max_steps: int = 20000,
        learning_rate: float = 1e-4,
        patience: int = 5,
        eval_every: int = 200,
        random_state: int = 0,
    ):
        self.kg = kg
        self.aliases = aliases
        self.variant = variant
        self.dim = dim
        self.t_max = t_max
        self.max_span_len = max_span_len
        self.batch_size = batch_size
        self.grad_accumulation = grad_accumulation
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.patience = patience
        self.eval_every = eval_every
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            grad_accumulation=self.grad_accumulation,
            max_steps=self.max_steps,
            learning_rate=self.learning_rate,
            t_max=self.t_max,
            patience=self.patience,
            eval_every=self.eval_every,
            variant=self.variant,
            seed=self.random_state,
        )

    def fit(self, X, y=None, X_dev=None, y_dev=None, log_path=None):
        """Train on ``(X, y)``; ``X_dev`` drives early stopping (defaults to ``X``)."""
        if self.kg is None:
            raise ValueError("kg must be set before fitting")
        check_variant(self.variant)
        config = self._train_config()
        train_ex = check_examples(X, y, self.kg)
        dev_ex = train_ex if X_dev is None else check_examples(X_dev, y_dev, self.kg)
        table = EmbeddingTable.from_questions([ex.question for ex in train_ex], dim=self.dim)
        self.model_ = QAModel(
            self.kg,
            build_alias_table(self.kg, self.aliases),
            table,
            dim=self.dim,
            t_max=self.t_max,
            max_span_len=self.max_span_len,
        )
        params = self.model_.init_params(self.random_state)
        self.train_result_ = train(self.model_, params, train_ex, dev_ex, config, log_path=log_path)
        self.params_ = self.train_result_.params
        return self

    def _examples(self, X) -> list[QAExample]:
        check_is_fitted(self, "params_")
        return check_examples(X, None, self.kg, require_answers=False)

    def predict_ids(self, X) -> list[int | None]:
        return [self.model_.predict_one(self.params_, ex, self.variant) for ex in self._examples(X)]

    def predict(self, X) -> np.ndarray:
        """Top-1 answer label per question (``None`` where resolution found nothing)."""
        labels = self.kg.entity_vocab.labels
        return np.array([None if i is None else labels[i] for i in self.predict_ids(X)], dtype=object)

    def decision_function(self, X) -> np.ndarray:
        """Answer weights ``y_hat`` over all entities, one row per question (zeros when skipped)."""
        exs = self._examples(X)
        out = np.zeros((len(exs), self.kg.n_entities))
        for n, ex in enumerate(exs):
            try:
                out[n] = self.model_.forward(self.params_, ex, self.variant).y_hat
            except ResolutionError:
                pass
        return out

    def score(self, X, y=None) -> float:
        """Hits@1."""
        check_is_fitted(self, "params_")
        exs = check_examples(X, y, self.kg)
        preds = [self.model_.predict_one(self.params_, ex, self.variant) for ex in exs]
        return metrics_from_predictions(exs, preds)["hits_at_1"]

    def explain(self, question: str | QAExample):
        """Forward pass with diagnostics for one question (raises if unresolvable)."""
        (ex,) = self._examples([question])
        return self.model_.forward(self.params_, ex, self.variant)
