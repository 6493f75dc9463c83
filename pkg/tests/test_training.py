import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reifiedqa.data import SynthSpec, generate_synth
from reifiedqa.exceptions import ConfigError, TrainingError
from reifiedqa.kg import build_kg, follow
from reifiedqa.model import QAExample, QAModel
from reifiedqa.resolver import build_alias_table, seed_vector
from reifiedqa.text import EmbeddingTable
from reifiedqa.training import (
    Adam,
    BatchStream,
    TrainConfig,
    analytic_grads,
    bce_loss,
    bce_loss_delta,
    example_loss_and_grad,
    grad_audit,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)

from conftest import assert_grad_close, miniature_instance, most_ambiguous, numeric_grad


@pytest.fixture(scope="module")
def synth():
    syn = generate_synth(SynthSpec(n_people=40, n_attributes=6, n_train=120, n_dev=30, n_test=30, seed=5))
    table = EmbeddingTable.from_questions([e.question for e in syn.dataset["train"]], dim=16)
    return syn, table


def make_model(synth, t_max=2):
    syn, table = synth
    return QAModel(syn.kg, build_alias_table(syn.kg, syn.aliases), table, dim=16, t_max=t_max)


class TestLoss:
    def test_log2(self):
        loss, _ = bce_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_prediction(self):
        y = np.array([1.0, 0.0, 0.0, 1.0])
        loss, grad = bce_loss(y, y)
        assert abs(loss) < 1e-5
        assert not grad.any()

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(0)
        y_hat = rng.uniform(0.05, 0.95, size=7)
        y = (rng.random(7) < 0.4).astype(float)
        _, grad = bce_loss(y_hat, y)
        assert_grad_close(grad, numeric_grad(lambda: bce_loss(y_hat, y)[0], y_hat))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_delta_matches_plain_difference(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0, 1, size=9), rng.uniform(0, 1, size=9)
        y = (rng.random(9) < 0.5).astype(float)
        assert bce_loss_delta(a, b, y) == pytest.approx(bce_loss(a, y)[0] - bce_loss(b, y)[0], abs=1e-12)


class TestConfig:
    def test_presets(self):
        sq = TrainConfig.simple_questions()
        assert (sq.batch_size, sq.grad_accumulation, sq.learning_rate, sq.max_steps, sq.t_max) == (32, 8, 1e-4, 20000, 1)
        wq = TrainConfig.webqsp()
        assert (wq.batch_size, wq.grad_accumulation, wq.max_steps, wq.t_max) == (6, 32, 30000, 3)

    @pytest.mark.parametrize("bad", [dict(batch_size=0), dict(learning_rate=-1.0), dict(variant="x"), dict(patience=True)])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_simple_questions_preset_runs(self, synth):
        model = make_model(synth, t_max=1)
        params = model.init_params(0)
        cfg = TrainConfig.simple_questions(max_steps=1, batch_size=4, grad_accumulation=2)
        res = train_step(model, params, Adam(params), [synth[0].dataset["train"][:4]] * 8, cfg)
        assert res.n_used == 32 and math.isfinite(res.loss)


class TestTrainStep:
    def test_lr_zero_is_bitwise_noop(self, synth):
        model = make_model(synth)
        params = model.init_params(1)
        before = params.copy()
        cfg = TrainConfig(learning_rate=0.0, batch_size=8, grad_accumulation=2)
        train_step(model, params, Adam(params), [synth[0].dataset["train"][:8], synth[0].dataset["train"][8:16]], cfg)
        for (_, a), (_, b) in zip(before.named(), params.named()):
            assert a.tobytes() == b.tobytes()

    def test_deterministic_loss(self, synth):
        batch = [synth[0].dataset["train"][:10]]
        cfg = TrainConfig(batch_size=10, grad_accumulation=1)
        losses = []
        for _ in range(2):
            model = make_model(synth)
            params = model.init_params(2)
            losses.append(train_step(model, params, Adam(params), batch, cfg).loss)
        assert losses[0] == losses[1]

    def test_skipped_examples_counted(self, synth):
        model = make_model(synth)
        params = model.init_params(0)
        ex = synth[0].dataset["train"][0]
        unknown = QAExample("nothing matches here", ex.answers)
        res = train_step(model, params, Adam(params), [[ex, unknown]], TrainConfig(batch_size=2, grad_accumulation=1))
        assert (res.n_used, res.n_skipped) == (1, 1)

    def test_non_finite_aborts(self, synth):
        model = make_model(synth)
        params = model.init_params(0)
        params.W_inf[0][0, 0] = np.nan
        before = params.copy()
        with pytest.raises(TrainingError) as info:
            train_step(model, params, Adam(params), [synth[0].dataset["train"][:2]], TrainConfig(batch_size=2, grad_accumulation=1))
        assert "question" in info.value.diagnostics
        assert np.array_equal(params.w_s, before.w_s)

    def test_fixed_batch_loss_decreases(self, synth):
        # Loss on a fixed batch must fall after every one of the first 50 steps in >= 90% of seeds.
        train_split = synth[0].dataset["train"]
        fixed = train_split[:24]
        monotone = 0
        seeds = range(10)
        for seed in seeds:
            model = make_model(synth)
            params = model.init_params(seed)
            cfg = TrainConfig(batch_size=8, grad_accumulation=2, learning_rate=1e-4, seed=seed)
            opt, stream = Adam(params), BatchStream(train_split, 8, np.random.default_rng(seed))
            losses = [np.mean([example_loss_and_grad(model, params, e, "e2e") for e in fixed])]
            for _ in range(50):
                train_step(model, params, opt, [stream.next_batch() for _ in range(2)], cfg)
                losses.append(np.mean([example_loss_and_grad(model, params, e, "e2e") for e in fixed]))
            monotone += bool(np.all(np.diff(losses) < 0))
        assert monotone >= 0.9 * len(seeds)


class TestUncertaintyPropagation:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), bump=st.floats(0.01, 5.0))
    def test_raising_a_candidate_logit(self, seed, bump):
        rng = np.random.default_rng(seed)
        # Candidate 0 alone reaches entity 5; candidates 1 and 2 reach 6.
        kg = build_kg([("c0", "r", "e5"), ("c1", "r", "e6"), ("c2", "r", "e6"), ("e5", "r", "c1")])
        cand = [kg.entity_id(x) for x in ("c0", "c1", "c2")]
        e = rng.normal(size=3)
        x_before = seed_vector([e], cand, kg.n_entities).dense()
        e2 = e.copy()
        e2[0] += bump
        x_after = seed_vector([e2], cand, kg.n_entities).dense()
        assert x_after[cand[0]] > x_before[cand[0]]
        r = np.array([1.0])
        only = kg.entity_id("e5")
        assert follow(kg, x_after, r)[only] >= follow(kg, x_before, r)[only]


class TestTrain:
    def test_patience_one_stops_after_two_evals(self, synth):
        model = make_model(synth)
        params = model.init_params(0)
        cfg = TrainConfig(batch_size=4, grad_accumulation=1, max_steps=100, patience=1, eval_every=5)
        res = train(model, params, synth[0].dataset["train"], synth[0].dataset["dev"], cfg, evaluate=lambda p: 0.3)
        assert res.stopped_early and len(res.log) == 2 and res.steps_run == 10
        assert res.best_step == 5

    def test_returns_best_not_last(self, synth):
        model = make_model(synth)
        params = model.init_params(0)
        scores = iter([0.1, 0.8, 0.2, 0.3])
        snapshots = []

        def evaluate(p):
            snapshots.append(p.copy())
            return next(scores)

        cfg = TrainConfig(batch_size=4, grad_accumulation=1, max_steps=8, patience=10, eval_every=2)
        res = train(model, params, synth[0].dataset["train"], synth[0].dataset["dev"], cfg, evaluate=evaluate)
        assert res.best_step == 4 and res.best_dev == 0.8
        assert np.array_equal(res.params.W_inf[0], snapshots[1].W_inf[0])
        assert not np.array_equal(res.params.W_inf[0], params.W_inf[0])

    def test_final_step_evaluated(self, synth, tmp_path):
        model = make_model(synth)
        params = model.init_params(0)
        cfg = TrainConfig(batch_size=4, grad_accumulation=1, max_steps=7, eval_every=5)
        res = train(model, params, synth[0].dataset["train"], synth[0].dataset["dev"], cfg, log_path=tmp_path / "log.tsv")
        assert [r["step"] for r in res.log] == [5, 7]
        lines = (tmp_path / "log.tsv").read_text().splitlines()
        assert lines[0] == "step\ttrain_loss\tdev_hits1\tlr\twall_seconds"
        assert lines[1].startswith("5\t") and lines[1].endswith("\t0.0001\t-")


class TestGradAudit:
    @pytest.mark.parametrize("variant", ["baseline", "er", "e2e"])
    def test_random_instance_passes(self, variant):
        model, params, examples = miniature_instance(11)
        report = grad_audit(model, params, examples[0], variant)
        assert report.passed, report.to_dict()
        assert report.max_rel_error < 1e-4

    def test_e2e_covers_resolver(self):
        model, params, examples = miniature_instance(2)
        report = grad_audit(model, params, most_ambiguous(model, examples), "e2e")
        compared = {t.name: t.n_compared for t in report.tensors}
        assert compared["w_s"] > 0 and compared["feature_emb"] > 0 and compared["token_emb"] > 0

    def test_zero_params_single_relation(self):
        kg = build_kg([("a", "r", "b")])
        model = QAModel(kg, build_alias_table(kg), EmbeddingTable(["who", "is", "a"], dim=4), dim=4, t_max=1)
        params = model.init_params(0).zeros_like()
        ex = QAExample("who is a", (kg.entity_id("b"),))
        report = grad_audit(model, params, ex, "e2e")
        assert report.passed

    def test_sign_flip_fails(self):
        model, params, examples = miniature_instance(4)

        def flipped(m, p, ex, v):
            g = analytic_grads(m, p, ex, v)
            g.W_inf[0] *= -1.0
            return g

        report = grad_audit(model, params, examples[0], "e2e", grad_fn=flipped)
        assert not report.passed


def test_checkpoint_round_trip(tmp_path, synth):
    model = make_model(synth)
    params = model.init_params(3)
    save_checkpoint(tmp_path / "ck", params, {"seed": 3})
    back, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["config"] == {"seed": 3}
    for (n1, a), (n2, b) in zip(params.named(), back.named()):
        assert n1 == n2 and a.tobytes() == b.tobytes()
    raw = (tmp_path / "ck" / "w_s.bin").read_bytes()
    assert np.frombuffer(raw, "<f8").tolist() == params.w_s.tolist()
