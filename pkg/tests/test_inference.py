import numpy as np
import pytest

from reifiedqa.exceptions import ShapeError
from reifiedqa.inference import HopDecoderParams, decode_relation, decoder_input, inference_backward, run_hops
from reifiedqa.kg import build_kg

from conftest import assert_grad_close, numeric_grad, random_kg_triples

ASTEROIDS = [
    ("Ceres", "discovered_by", "Piazzi"),
    ("Pallas", "discovered_by", "Olbers"),
    ("Piazzi", "nationality", "Italy"),
    ("Olbers", "nationality", "Germany"),
    ("Ceres", "named_after", "Ceres_goddess"),
]


def one_hot(n, k):
    v = np.zeros(n)
    v[k] = 1.0
    return v


def forced_params(kg, dim, relation_ids, big=60.0):
    """Decoder that outputs (numerically) one-hot relations regardless of ``h_q``."""
    T = len(relation_ids)
    params = HopDecoderParams.init(dim, kg.n_relations, T, rng=0, scale=0.0)
    for t, rel in enumerate(relation_ids):
        params.W_inf[t][rel, 0] = big
    return params


class TestDecoder:
    def test_input_layout(self):
        h, r1, r2 = np.array([1.0, 2.0]), np.array([0.3, 0.7]), np.array([0.9, 0.1])
        assert decoder_input(h, []).tolist() == [1.0, 2.0]
        assert decoder_input(h, [r1, r2]).tolist() == [1.0, 2.0, 0.9, 0.1, 0.3, 0.7]

    def test_relation_is_distribution(self):
        params = HopDecoderParams.init(5, 4, 3, rng=1, scale=1.0)
        h = np.random.default_rng(0).normal(size=5)
        priors = []
        for _ in range(3):
            r = decode_relation(params, h, priors)
            assert r.min() >= 0 and r.sum() == pytest.approx(1.0, abs=1e-12)
            priors.append(r)
        with pytest.raises(ValueError):
            decode_relation(params, h, priors)

    def test_zero_weights_uniform(self):
        params = HopDecoderParams.init(3, 4, 1, scale=0.0)
        assert decode_relation(params, np.ones(3)).tolist() == [0.25] * 4

    def test_shape_validation(self):
        params = HopDecoderParams.init(3, 2, 2, rng=0)
        params.W_inf[1] = np.zeros((2, 3))
        with pytest.raises(ShapeError):
            params.validate()


class TestRunHops:
    def test_single_hop_equals_follow(self):
        kg = build_kg(ASTEROIDS)
        params = forced_params(kg, 2, [kg.relation_id("discovered_by")])
        x0 = one_hot(kg.n_entities, kg.entity_id("Ceres"))
        tr = run_hops(kg, params, x0, np.array([1.0, 0.0]))
        assert tr.attention.tolist() == [1.0]
        assert int(np.argmax(tr.y_hat)) == kg.entity_id("Piazzi")
        assert tr.y_hat.sum() == pytest.approx(1.0, abs=1e-12)

    def test_two_hop_forced(self):
        kg = build_kg(ASTEROIDS)
        params = forced_params(kg, 2, [kg.relation_id("discovered_by"), kg.relation_id("nationality")])
        params.W_att[1][0] = 60.0  # attend to the second hop
        x0 = one_hot(kg.n_entities, kg.entity_id("Ceres"))
        tr = run_hops(kg, params, x0, np.array([1.0, 0.0]))
        assert tr.y_hat[kg.entity_id("Italy")] == pytest.approx(1.0, abs=1e-12)
        assert tr.y_hat[kg.entity_id("Germany")] == 0.0

    def test_chain_uniform_attention(self):
        kg = build_kg([("A", "next", "B"), ("B", "next", "C")])
        params = HopDecoderParams.init(2, 1, 2, scale=0.0)
        tr = run_hops(kg, params, one_hot(3, 0), np.zeros(2))
        assert tr.attention.tolist() == [0.5, 0.5]
        assert tr.y_hat.tolist() == [0.0, 0.5, 0.5]

    def test_relation_count_mismatch(self):
        kg = build_kg(ASTEROIDS)
        with pytest.raises(ShapeError):
            run_hops(kg, HopDecoderParams.init(2, 1, 1, rng=0), one_hot(kg.n_entities, 0), np.zeros(2))


class TestBackward:
    @pytest.mark.parametrize("t_max", [1, 2, 3])
    def test_finite_differences(self, t_max):
        rng = np.random.default_rng(t_max)
        kg = build_kg(random_kg_triples(rng, 15, 3, 40))
        dim = 4
        params = HopDecoderParams.init(dim, kg.n_relations, t_max, rng=rng, scale=1.0)
        x0 = rng.random(kg.n_entities)
        h = rng.normal(size=dim)
        g = rng.normal(size=kg.n_entities)
        tr = run_hops(kg, params, x0, h)
        grads = inference_backward(kg, params, tr, g)

        def f():
            return float(g @ run_hops(kg, params, x0, h).y_hat)

        for t in range(t_max):
            assert_grad_close(grads.W_inf[t], numeric_grad(f, params.W_inf[t]))
            assert_grad_close(grads.W_att[t], numeric_grad(f, params.W_att[t]))
        assert_grad_close(grads.h_q, numeric_grad(f, h))
        assert_grad_close(grads.x0, numeric_grad(f, x0))

    def test_hierarchy_carries_gradient(self):
        # Later hops see earlier relation choices, so the prior block of W_inf[1] learns.
        rng = np.random.default_rng(7)
        kg = build_kg(random_kg_triples(rng, 12, 3, 30))
        params = HopDecoderParams.init(3, kg.n_relations, 2, rng=rng, scale=1.0)
        tr = run_hops(kg, params, rng.random(kg.n_entities), rng.normal(size=3))
        grads = inference_backward(kg, params, tr, rng.normal(size=kg.n_entities))
        assert np.abs(grads.W_inf[1][:, 3:]).max() > 1e-6


def test_entry_bound_holds_for_one_hop_only():
    # Two same-relation paths from A meet at D: x_1 has mass 2, so x_2[D] reaches 2.
    kg = build_kg([("A", "r", "B"), ("A", "r", "C"), ("B", "r", "D"), ("C", "r", "D")])
    params = HopDecoderParams.init(2, 1, 2, scale=0.0)
    tr = run_hops(kg, params, one_hot(4, kg.entity_id("A")), np.zeros(2))
    assert tr.entities[0].max() <= 1.0
    assert tr.entities[1][kg.entity_id("D")] == 2.0
    assert tr.y_hat[kg.entity_id("D")] == 1.0
