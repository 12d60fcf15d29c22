import itertools

import numpy as np
import pytest
from sklearn.base import clone

from seqdisc.core import BOS, Utterance, logsumexp
from seqdisc.lattice_free import alignment_score
from seqdisc.losses import grad_check
from seqdisc.scorer import (
    ContextKScorer,
    PrecomputedScores,
    ce_loss,
    context_index,
    context_tuple,
    load_checkpoint,
    load_score_tensor,
    numerator_logprob,
    random_log_probs,
    save_checkpoint,
    save_score_tensor,
)


def brute_numerator(logp, labels, k, alpha=1.0):
    """Sum over every alignment in (V + blank)^T that collapses to ``labels``."""
    T, _, O = logp.shape
    blank = O - 1
    scores = []
    for ali in itertools.product(range(O), repeat=T):
        if tuple(y for y in ali if y != blank) == tuple(labels):
            scores.append(alignment_score(logp, k, None, ali, alpha))
    return logsumexp(scores)


def test_context_index_is_lexicographic():
    V, k = 3, 2
    tuples = [context_tuple(c, V, k) for c in range((V + 1) ** k)]
    keys = [tuple(-1 if s == BOS else s for s in t) for t in tuples]
    assert keys == sorted(keys)
    assert all(context_index(t, V) == c for c, t in enumerate(tuples))
    assert context_tuple(0, V, k) == (BOS, BOS)


@pytest.mark.parametrize("k", [0, 1, 2])
@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.2])
def test_numerator_matches_alignment_enumeration(k, alpha):
    rng = np.random.default_rng(10 * k + int(alpha * 10))
    for T, labels in [(3, (0, 1)), (4, (1,)), (2, ()), (3, (1, 1, 0))]:
        logp = random_log_probs(T, 2, k, rng)
        got, _ = numerator_logprob(logp, labels, k, alpha)
        assert got == pytest.approx(brute_numerator(logp, labels, k, alpha), abs=1e-10)


def test_numerator_rejects_more_labels_than_frames():
    logp = random_log_probs(2, 2, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        numerator_logprob(logp, (0, 1, 0), 1)


def test_numerator_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    logp = random_log_probs(4, 2, 1, rng)
    labels = (1, 0)
    _, grad = numerator_logprob(logp, labels, 1, 0.7, with_grad=True)

    def fn(flat):
        v, g = numerator_logprob(flat.reshape(logp.shape), labels, 1, 0.7, with_grad=True)
        return v, g.ravel()

    rep = grad_check(fn, logp.ravel(), tolerance=1e-6)
    assert rep.passed, rep.max_rel_error
    assert grad.shape == logp.shape


def test_score_frame_normalised_and_context_dependent():
    sc = ContextKScorer(3, 2, 4, init_scale=1.0, random_state=0).initialize()
    u = Utterance("x", 5, (0, 1))
    for ctx in [(), (2,), (0, 1)]:
        row = sc.score_frame(u, 2, ctx)
        assert logsumexp(row) == pytest.approx(0.0, abs=1e-12)
    assert not np.allclose(sc.score_frame(u, 2, (0,)), sc.score_frame(u, 2, (1,)))
    with pytest.raises(IndexError):
        sc.score_frame(u, 0, ())
    with pytest.raises(ValueError):
        sc.score_frame(u, 1, (0, 1, 2))


def test_score_frame_agrees_with_log_probs():
    sc = ContextKScorer(2, 1, 3, init_scale=0.5, random_state=1).initialize()
    u = Utterance("y", 3, ())
    table = sc.log_probs(u)
    np.testing.assert_allclose(sc.score_frame(u, 3, (1,)), table[2, context_index((1,), 2)])
    np.testing.assert_allclose(sc.score_frame(u, 1, ()), table[0, 0])


def test_ce_gradient_finite_differences():
    sc = ContextKScorer(2, 1, 3, init_scale=0.5, random_state=2).initialize()
    u = Utterance("z", 3, (1, 0))

    def fn(flat):
        sc.set_flat_params(flat)
        return ce_loss(sc, u)

    rep = grad_check(fn, sc.get_flat_params(), epsilon=1e-5, tolerance=1e-4)
    assert rep.passed, rep.max_rel_error


def test_fit_decreases_ce_and_is_an_estimator():
    rng = np.random.default_rng(4)
    utts = [Utterance(f"u{i}", 5, tuple(rng.integers(0, 2, size=2)), features=rng.normal(size=(5, 3))) for i in range(6)]
    sc = ContextKScorer(2, 1, 3, learning_rate=0.5, n_steps=15).fit(utts)
    assert sc.loss_curve_[-1] < sc.loss_curve_[0]
    assert clone(sc).get_params()["n_steps"] == 15
    assert not hasattr(clone(sc), "weights_")


def test_l2_penalty_shrinks_weights():
    rng = np.random.default_rng(5)
    utts = [Utterance(f"u{i}", 5, (1,), features=rng.normal(size=(5, 3))) for i in range(4)]
    plain = ContextKScorer(2, 0, 3, learning_rate=1.0, n_steps=30).fit(utts)
    ridge = ContextKScorer(2, 0, 3, learning_rate=1.0, n_steps=30, l2=0.05).fit(utts)
    assert np.linalg.norm(ridge.weights_) < np.linalg.norm(plain.weights_)


def test_fit_validates_input():
    with pytest.raises(ValueError):
        ContextKScorer(2, 1, 3).fit([])
    with pytest.raises(ValueError):
        ContextKScorer(2, 1, 3, n_steps=-1).fit([Utterance("a", 2, ())])


def test_precomputed_scores_validation():
    table = random_log_probs(2, 2, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        PrecomputedScores(table + 0.1, 1)
    with pytest.raises(ValueError):
        PrecomputedScores(table, 2)


def test_score_tensor_round_trip(tmp_path):
    table = random_log_probs(3, 2, 1, np.random.default_rng(0))
    save_score_tensor(tmp_path / "s.txt", table, 1)
    back = load_score_tensor(tmp_path / "s.txt")
    np.testing.assert_array_equal(back.table, table)
    assert back.context_size == 1
    assert (tmp_path / "s.txt").read_text().splitlines()[0] == "T 3 LABELS 2 CONTEXT 1"


def test_score_tensor_rejects_bad_row_count(tmp_path):
    (tmp_path / "s.txt").write_text("T 2 LABELS 1 CONTEXT 0\n0 -inf\n")
    with pytest.raises(ValueError):
        load_score_tensor(tmp_path / "s.txt")


def test_checkpoint_round_trip(tmp_path):
    sc = ContextKScorer(3, 1, 2, init_scale=0.3, random_state=9).initialize()
    save_checkpoint(sc, tmp_path / "c.json")
    back = load_checkpoint(tmp_path / "c.json")
    np.testing.assert_array_equal(back.get_flat_params(), sc.get_flat_params())


def test_zero_encoder_log_probs_ignore_features():
    sc = ContextKScorer(2, 1, 3, init_scale=0.5, random_state=3).initialize()
    u = Utterance("z", 2, (), features=np.zeros((2, 3)))
    np.testing.assert_allclose(sc.log_probs(u)[0], sc.zero_encoder_log_probs())


def test_k0_context_is_ignored():
    sc = ContextKScorer(3, 0, 2, init_scale=0.8, random_state=4).initialize()
    u = Utterance("k0", 3, (), features=np.ones((3, 2)))
    np.testing.assert_array_equal(sc.score_frame(u, 2, ()), sc.log_probs(u)[1, 0])
    assert sc.log_probs(u).shape == (3, 1, 4)


def test_zero_init_is_uniform():
    sc = ContextKScorer(4, 1, 3).initialize()
    np.testing.assert_allclose(sc.log_probs(Utterance("z", 2, ())), -np.log(5))


def test_precomputed_row_is_verbatim():
    table = random_log_probs(3, 2, 1, np.random.default_rng(6))
    sc = PrecomputedScores(table, 1)
    np.testing.assert_array_equal(sc.score_frame(Utterance("p", 3, ()), 2, (1,)), table[1, 2])


def test_numerator_closed_forms():
    table = random_log_probs(2, 2, 1, np.random.default_rng(7))
    assert numerator_logprob(table[:1], (1,), 1)[0] == pytest.approx(table[0, 0, 1])
    assert numerator_logprob(table, (), 1)[0] == pytest.approx(table[0, 0, 2] + table[1, 0, 2])
