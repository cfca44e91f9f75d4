import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spekg.autodiff import Tape, finite_difference, logit, max_relative_error, sigmoid
from spekg.loss import (
    PosteriorTable,
    batch_objective,
    bernoulli_kl,
    collection_prob,
    kl_term,
    pairwise_uncollection,
    posterior_labeled,
    posterior_unlabeled,
    read_posterior_dump,
    reg_term,
    total_loss,
    triple_loss,
)

probs = st.floats(1e-6, 1 - 1e-6)


def test_collection_prob_clamps():
    assert collection_prob(0.0) == 0.5
    assert collection_prob(50.0) == 1.0 - 1e-12
    assert collection_prob(-50.0) == 1e-12
    with pytest.raises(ValueError):
        collection_prob(float("nan"))


def test_labeled_posterior_values():
    assert posterior_labeled(0.9, 0.1, 0.2) == pytest.approx(0.18 / 0.26, abs=1e-12)
    assert posterior_labeled(0.4, 0.4, 0.5) == 0.5
    assert posterior_labeled(0.7, 0.2, 0.0) == 0.0
    with pytest.raises(ValueError):
        posterior_labeled(0.5, 0.5, 1.0)


def test_unlabeled_posterior_values():
    assert posterior_unlabeled(0.8, 0.2, 0.1) == pytest.approx(0.08 / 0.26, abs=1e-12)
    assert posterior_unlabeled(0.3, 0.3, 0.5) == 0.5
    assert posterior_unlabeled(0.3, 0.9, 0.0) == 0.0


def test_labeled_posterior_from_scores():
    table = PosteriorTable(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), alpha=0.1, beta=0.2)
    w = table.labeled_posterior(np.array([2.197]), np.array([-2.197]))
    assert w[0] == pytest.approx(0.6923, abs=1e-4)


@settings(max_examples=300, deadline=None)
@given(probs, probs, st.floats(0.0, 0.99))
def test_posteriors_are_probabilities_and_monotone(p1, p0, prior):
    w = posterior_labeled(p1, p0, prior)
    assert 0.0 <= w <= 1.0
    assert posterior_labeled(min(1 - 1e-6, p1 * 1.5), p0, prior) >= w - 1e-12


@settings(max_examples=300, deadline=None)
@given(st.floats(-30, 30), st.floats(-30, 30))
def test_pairwise_uncollection_is_logistic_antisymmetric(a, b):
    assert pairwise_uncollection(a, b) + pairwise_uncollection(b, a) == pytest.approx(1.0, abs=1e-11)


def test_pairwise_uncollection_orientation():
    # a corruption scoring below its collected triple is likely uncollected
    assert pairwise_uncollection(1.0, 2.0) == pytest.approx(sigmoid(1.0))
    assert pairwise_uncollection(2.0, 1.0) == pytest.approx(sigmoid(-1.0))


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, 5, elements=probs), arrays(np.float64, 5, elements=probs))
def test_kl_non_negative_and_zero_on_diagonal(w, wt):
    assert np.all(bernoulli_kl(w, wt) >= -1e-15)
    np.testing.assert_allclose(bernoulli_kl(w, w), 0.0, atol=1e-15)


def test_reg_term_is_normalised():
    assert reg_term([1.0, 0.0], [0.5, 0.5, 0.5, 0.5]) == pytest.approx(1.0)


def test_triple_loss_reduces_to_nll_when_all_labeled_positive():
    rng = np.random.default_rng(0)
    phi1 = sigmoid(rng.normal(size=8))
    b, k = 8, 3
    loss = triple_loss(phi1, np.full(b, 0.5), np.full((b, k), 0.5), np.full((b, k), 0.5), np.ones(b), np.zeros((b, k)))
    nll = -np.mean(np.log(phi1))
    assert loss == pytest.approx(nll - np.log(0.5), abs=1e-12)


def test_triple_loss_rejects_out_of_range():
    with pytest.raises(ValueError):
        triple_loss([1.0], [0.5], [[0.5]], [[0.5]], [0.5], [[0.5]])


def test_total_loss_combines_and_checks():
    assert total_loss(1.0, 0.5, 0.25, lambda_kl=2.0, lambda_reg=4.0) == 3.0
    with pytest.raises(FloatingPointError):
        total_loss(float("inf"), 0.0, 0.0)


def random_batch(seed, b=4, k=3):
    rng = np.random.default_rng(seed)
    return dict(
        psi1_l=rng.normal(size=b),
        psi0_l=rng.normal(size=b),
        psi1_u=rng.normal(size=(b, k)),
        psi0_u=rng.normal(size=(b, k)),
        wl_logit=rng.normal(size=b),
        wu_logit=rng.normal(size=(b, k)),
        wl_tilde=rng.random(b),
        wu_tilde=rng.random((b, k)),
    )


def objective(batch, tape=None, requires_grad=False, lambda_kl=0.7, lambda_reg=1.3):
    tape = tape or Tape(grad_enabled=requires_grad)
    tensors = {
        k: tape.leaf(v, requires_grad=requires_grad, name=k) for k, v in batch.items() if not k.endswith("tilde")
    }
    out = batch_objective(tape, **tensors, wl_tilde=batch["wl_tilde"], wu_tilde=batch["wu_tilde"],
                          lambda_kl=lambda_kl, lambda_reg=lambda_reg)
    return tape, tensors, out


def test_tape_objective_matches_array_functions():
    batch = random_batch(1)
    _, _, out = objective(batch)
    w_l, w_u = sigmoid(batch["wl_logit"]), sigmoid(batch["wu_logit"])
    tri = triple_loss(
        sigmoid(batch["psi1_l"]),
        sigmoid(batch["psi0_l"]),
        pairwise_uncollection(batch["psi1_u"], batch["psi1_l"][:, None]),
        pairwise_uncollection(batch["psi0_u"], batch["psi0_l"][:, None]),
        w_l,
        w_u,
    )
    kl = kl_term(w_l, batch["wl_tilde"], w_u, batch["wu_tilde"])
    reg = reg_term(w_l, w_u)
    assert out["triple"].data == pytest.approx(tri, abs=1e-12)
    assert out["kl"].data == pytest.approx(kl, abs=1e-12)
    assert out["reg"].data == pytest.approx(reg, abs=1e-12)
    assert out["total"].data == pytest.approx(total_loss(tri, kl, reg, 0.7, 1.3), abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_objective_gradients_match_finite_differences(seed):
    batch = random_batch(seed)
    tape, tensors, out = objective(batch, requires_grad=True)
    grads = tape.backward(out["total"], wrt=list(tensors.values()))
    for name, leaf in tensors.items():
        numeric = finite_difference(lambda: float(objective(batch)[2]["total"].data), batch[name])
        assert max_relative_error(grads[leaf], numeric) < 1e-6, name


def test_w_tilde_is_constant_under_backward():
    batch = random_batch(3)
    tape, tensors, out = objective(batch, requires_grad=True)
    assert all(t.name != "wl_tilde" for t in tensors.values())
    assert len(tape.backward(out["total"])) == len(tensors)


def test_table_starts_at_model_posterior_and_refreshes():
    rng = np.random.default_rng(0)
    p1, p0 = rng.normal(size=5), rng.normal(size=5)
    u1, u0 = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    table = PosteriorTable.from_scores(p1, p0, u1, u0, alpha=0.1, beta=0.3)
    np.testing.assert_allclose(table.w_labeled, table.wl_tilde, atol=1e-12)
    np.testing.assert_allclose(table.w_unlabeled, table.wu_tilde, atol=1e-12)
    assert table.wu_tilde.shape == (5, 2)
    expected = posterior_unlabeled(sigmoid(-u1), sigmoid(-u0), 0.1)
    np.testing.assert_allclose(table.wu_tilde, expected, atol=1e-12)
    logits = table.wl_logit.copy()
    table.refresh(p1 + 1, p0, u1, u0)
    np.testing.assert_array_equal(table.wl_logit, logits)
    assert np.all(table.wl_tilde > table.w_labeled)


def test_posterior_dump_round_trip(tmp_path):
    table = PosteriorTable(logit(np.array([0.2, 0.7])), logit(np.full((2, 2), 0.4)),
                           np.array([0.25, 0.75]), np.full((2, 2), 0.5), 0.1, 0.3)
    table.dump(tmp_path / "p.tsv", header="run")
    back = read_posterior_dump(tmp_path / "p.tsv")
    np.testing.assert_allclose(back["labeled"][0], [0.2, 0.7])
    np.testing.assert_array_equal(back["labeled"][1], [0.25, 0.75])
    assert back["unlabeled"][0].shape == (4,)
