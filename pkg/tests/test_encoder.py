import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spekg.autodiff import Tape, finite_difference, max_relative_error
from spekg.encoder import Model, build_neighbor_sets, encode_entities, init_params


def test_top_m_keeps_highest_posterior():
    triples = np.array([[0, 0, 1], [0, 0, 2]])
    nb = build_neighbor_sets(triples, 3, 1, [0.9, 0.1], top_m=1)
    assert nb.of(0) == [(1, 0)]


def test_inverse_relations_reach_tails():
    nb = build_neighbor_sets(np.array([[0, 1, 2]]), 3, 2, [1.0], top_m=4)
    assert nb.of(2) == [(0, 3)]
    assert nb.of(1) == []


def test_dropping_a_fact_removes_exactly_its_entries():
    triples = np.array([[0, 0, 1], [0, 0, 2], [0, 0, 3], [4, 0, 1]])
    before = build_neighbor_sets(triples, 5, 1, [0.9, 0.8, 0.7, 0.6], top_m=2)
    after = build_neighbor_sets(triples, 5, 1, [0.9, 0.1, 0.7, 0.6], top_m=2)
    assert before.of(0) == [(1, 0), (2, 0)]
    assert after.of(0) == [(1, 0), (3, 0)]
    assert [before.of(e) for e in (1, 2, 4)] == [after.of(e) for e in (1, 2, 4)]


def test_neighbor_sets_are_deterministic(toy_triples):
    a = build_neighbor_sets(toy_triples, 5, 2, np.linspace(0, 1, 6), 2)
    b = build_neighbor_sets(toy_triples, 5, 2, np.linspace(0, 1, 6), 2)
    assert a.same_as(b)


def test_posterior_length_checked(toy_triples):
    with pytest.raises(ValueError):
        build_neighbor_sets(toy_triples, 5, 2, [1.0], 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_attention_sums_to_one(seed, top_m):
    rng = np.random.default_rng(seed)
    triples = rng.integers(0, 6, size=(12, 3))
    triples[:, 1] %= 2
    nb = build_neighbor_sets(triples, 6, 2, rng.random(12), top_m)
    params = init_params(6, 2, 3, rng)
    tape = Tape(grad_enabled=False)
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    _, _, att = encode_entities(tape, leaves, nb, 1, return_attention=True)
    for cur, seg, _, gamma in att:
        sums = np.bincount(seg, weights=gamma, minlength=len(cur))
        has = np.bincount(seg, minlength=len(cur)) > 0
        np.testing.assert_allclose(sums[has], 1.0, atol=1e-12)


def test_isolated_entity_keeps_its_embedding():
    nb = build_neighbor_sets(np.array([[0, 0, 1]]), 3, 1, [1.0], 4)
    model = Model.initialise(3, 1, 4, nb, np.random.default_rng(0))
    np.testing.assert_array_equal(model.entity_reprs()[2], model.params["entity"][2])


def test_zero_parameters_score_zero(toy_model, toy_triples):
    for v in toy_model.params.values():
        v[...] = 0.0
    psi1, psi0 = toy_model.score_triples(toy_triples)
    np.testing.assert_array_equal(psi1, 0.0)
    np.testing.assert_array_equal(psi0, 0.0)


def test_heads_are_independent(toy_model, toy_triples):
    psi1, psi0 = toy_model.score_triples(toy_triples)
    toy_model.params["neg.w1"] += 1.0
    toy_model.params["neg.b2"] += 3.0
    psi1b, psi0b = toy_model.score_triples(toy_triples)
    np.testing.assert_array_equal(psi1, psi1b)
    assert not np.allclose(psi0, psi0b)


def test_tape_and_numpy_paths_agree(toy_model, toy_triples):
    tape = Tape(grad_enabled=False)
    psi1, psi0 = toy_model.forward(tape, toy_triples)
    np1, np0 = toy_model.score_triples(toy_triples)
    np.testing.assert_allclose(psi1.data, np1, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(psi0.data, np0, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("side", ["head", "tail"])
def test_candidate_scores_match_triple_scores(toy_model, side):
    reprs = toy_model.entity_reprs()
    cand = toy_model.score_candidates(2, 1, side, reprs, "pos")
    triples = [(2, 1, e) if side == "tail" else (e, 1, 2) for e in range(5)]
    np.testing.assert_allclose(cand, toy_model.score_triples(triples, reprs)[0], atol=1e-12)


def test_two_layer_encoder_gradients(toy_triples):
    nb = build_neighbor_sets(toy_triples, 5, 2, np.ones(len(toy_triples)), 8)
    params = init_params(5, 2, 3, np.random.default_rng(1))

    def build(tape, leaves):
        psi1, psi0 = Model(params, nb, 2).forward(tape, toy_triples, leaves=leaves)
        return tape.add(tape.sum(tape.tanh(psi1)), tape.sum(tape.sigmoid(psi0)))

    tape = Tape()
    leaves = {k: tape.leaf(v, requires_grad=True, name=k) for k, v in params.items()}
    grads = tape.backward(build(tape, leaves), wrt=list(leaves.values()))

    def value():
        t = Tape(grad_enabled=False)
        return float(build(t, {k: t.leaf(v) for k, v in params.items()}).data)

    for name, leaf in leaves.items():
        assert max_relative_error(grads[leaf], finite_difference(value, params[name])) < 1e-5, name


def test_dropout_only_in_training(toy_model, toy_triples):
    rng = np.random.default_rng(0)
    eval_a = toy_model.forward(Tape(), toy_triples, training=False, dropout=0.5, rng=rng)[0].data
    eval_b = toy_model.forward(Tape(), toy_triples, training=False, dropout=0.5, rng=rng)[0].data
    np.testing.assert_array_equal(eval_a, eval_b)
    train = toy_model.forward(Tape(), toy_triples, training=True, dropout=0.5, rng=rng)[0].data
    assert not np.allclose(train, eval_a)
