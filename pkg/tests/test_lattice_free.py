import io
import json

import numpy as np
import pytest

from seqdisc import oracle
from seqdisc.core import BOS, Lexicon, PhonemeAlphabet, Utterance, logsumexp
from seqdisc.lattice_free import (
    SeqScoreConfig,
    brute_force_denominator,
    dump_dp_table,
    lf_denominator_approx,
    lf_denominator_limited,
    lf_denominator_word,
    run_lattice_free,
    top_j_select,
)
from seqdisc.lm import NGramLM, WordLevelLabelLM
from seqdisc.losses import grad_check
from seqdisc.scorer import PrecomputedScores, random_log_probs


def scorer(T, V, k, seed):
    return PrecomputedScores(random_log_probs(T, V, k, np.random.default_rng(seed), 1.5), k)


def bigram(V, seed=0):
    rng = np.random.default_rng(seed)
    return NGramLM("phoneme", 2, 0.5, vocab=V).fit([rng.integers(0, V, size=5) for _ in range(6)])


@pytest.mark.parametrize("k", [0, 1, 2])
def test_beta0_alpha1_normalises_to_zero(k):
    sc = scorer(4, 2, k, k)
    cfg = SeqScoreConfig(1.0, 0.0, None, max(k, 1))
    assert lf_denominator_limited(sc, bigram(2), cfg) == pytest.approx(0.0, abs=1e-12)
    assert lf_denominator_approx(sc, bigram(2), cfg) == pytest.approx(0.0, abs=1e-12)


def test_limited_matches_enumeration_of_nine_alignments():
    sc, lm = scorer(2, 2, 1, 1), bigram(2)
    cfg = SeqScoreConfig(1.0, 0.3, None, 1)
    assert lf_denominator_limited(sc, lm, cfg) == pytest.approx(brute_force_denominator(sc, lm, cfg), abs=1e-10)


def test_single_frame_closed_form():
    sc, lm = scorer(1, 3, 1, 2), bigram(3)
    a, b = 0.7, 0.4
    row = sc.table[0, 0]
    lm_row = lm.log_dist((BOS,))
    want = logsumexp([a * row[3]] + [a * row[v] + b * lm_row[v] for v in range(3)])
    cfg = SeqScoreConfig(a, b, None, 1)
    assert lf_denominator_limited(sc, lm, cfg) == pytest.approx(want, abs=1e-12)
    assert lf_denominator_approx(sc, lm, cfg) == pytest.approx(want, abs=1e-12)


def test_limited_rejects_inconsistent_contexts():
    sc = scorer(3, 2, 2, 0)
    with pytest.raises(ValueError):
        lf_denominator_limited(sc, bigram(2), SeqScoreConfig(1.0, 0.2, None, 1))
    trigram = NGramLM("phoneme", 3, 0.5, vocab=2).fit([[0, 1, 1, 0]])
    with pytest.raises(ValueError):
        lf_denominator_limited(scorer(3, 2, 1, 0), trigram, SeqScoreConfig(1.0, 0.2, None, 1))


@pytest.mark.parametrize("kw", [{"alpha": 0.0}, {"beta": -1.0}, {"top_j": 0}, {"recomb_context": -1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SeqScoreConfig(**kw)


def test_approx_with_history_free_lm_equals_limited():
    sc = scorer(4, 2, 1, 3)
    uni = NGramLM("phoneme", 1, 0.5, vocab=2).fit([[0, 1, 1]])
    cfg = SeqScoreConfig(1.0, 0.5, None, 1)
    assert lf_denominator_approx(sc, uni, cfg) == pytest.approx(lf_denominator_limited(sc, uni, cfg), abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_approx_with_bigram_equals_limited_and_brute(seed):
    sc, lm = scorer(4, 2, 1, seed), bigram(2, seed)
    cfg = SeqScoreConfig(1.2, 0.3, None, 1)
    lim = lf_denominator_limited(sc, lm, cfg)
    assert lf_denominator_approx(sc, lm, cfg) == pytest.approx(lim, abs=1e-9)
    assert brute_force_denominator(sc, lm, cfg) == pytest.approx(lim, abs=1e-9)


def test_top_j_full_equals_unpruned():
    sc, lm = scorer(5, 2, 2, 4), NGramLM("phoneme", 3, 0.5, vocab=2).fit([[0, 1, 1, 0, 1]])
    full = lf_denominator_approx(sc, lm, SeqScoreConfig(1.0, 0.3, None, 2))
    assert lf_denominator_approx(sc, lm, SeqScoreConfig(1.0, 0.3, 4, 2)) == pytest.approx(full, abs=1e-12)


def test_top_j_is_monotone():
    sc, lm = scorer(5, 3, 1, 5), bigram(3, 5)
    vals = [lf_denominator_approx(sc, lm, SeqScoreConfig(1.0, 0.2, j, 1)) for j in (1, 2, 3)]
    vals.append(lf_denominator_approx(sc, lm, SeqScoreConfig(1.0, 0.2, None, 1)))
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


def test_top_j_select_definitions():
    states = {(0,): -1.0, (1,): -3.0, (2,): -0.5, (3,): -2.0}
    assert top_j_select(states, 10) == states
    assert top_j_select(states, 1) == {(2,): -0.5}
    assert top_j_select(states, 2) == {(2,): -0.5, (0,): -1.0}
    assert top_j_select({(1,): 0.0, (0,): 0.0}, 1) == {(0,): 0.0}
    assert (BOS,) in top_j_select({(BOS,): -9.0, (0,): 0.0}, 1)
    with pytest.raises(ValueError):
        top_j_select(states, 0)


@pytest.fixture
def one_phoneme_words():
    alphabet = PhonemeAlphabet(("x#", "y#"))
    lex = Lexicon(alphabet, {(0,): {"x"}, (1,): {"y"}})
    wlm = NGramLM("word", 1, 0.5).fit([["x", "y", "y"], ["y"]])
    return lex, wlm


def test_word_beta0_is_zero(one_phoneme_words):
    lex, wlm = one_phoneme_words
    assert lf_denominator_word(scorer(3, 2, 1, 0), wlm, lex, SeqScoreConfig(1.0, 0.0, None, 1)) == pytest.approx(0.0)


def test_word_with_single_phoneme_words_equals_induced_unigram(one_phoneme_words):
    lex, wlm = one_phoneme_words
    induced = NGramLM("phoneme", 1, 0.5, vocab=2).fit([[0, 1]])
    induced.tables_[0] = {(0,): wlm.log_prob((), "x"), (1,): wlm.log_prob((), "y")}
    induced._finish()
    sc, cfg = scorer(4, 2, 1, 7), SeqScoreConfig(0.8, 0.6, None, 1)
    want = lf_denominator_limited(sc, induced, cfg)
    assert lf_denominator_word(sc, wlm, lex, cfg) == pytest.approx(want, abs=1e-9)


def test_word_with_long_recombination_equals_brute_force():
    alphabet = PhonemeAlphabet(("a", "a#", "b#"))
    lex = Lexicon(alphabet, {(0, 1): {"aa"}, (2,): {"b", "bee"}, (1,): {"a"}})
    wlm = NGramLM("word", 2, 0.5).fit([["aa", "b"], ["a", "bee", "aa"], ["b", "b"]])
    sc = scorer(4, 3, 1, 8)
    cfg = SeqScoreConfig(1.0, 0.4, None, 4)
    got = lf_denominator_word(sc, wlm, lex, cfg)
    want = brute_force_denominator(sc, WordLevelLabelLM(wlm, lex, use_eos=False), cfg)
    assert got == pytest.approx(want, abs=1e-9)


def test_brute_force_budget():
    with pytest.raises(ValueError):
        brute_force_denominator(scorer(12, 3, 0, 0), None, SeqScoreConfig(), budget=1000)


@pytest.mark.parametrize("mode", ["limited", "approx"])
def test_denominator_gradient(mode):
    sc, lm = scorer(4, 2, 1, 9), bigram(2, 9)
    cfg = SeqScoreConfig(0.9, 0.3, None, 1)

    def fn(flat):
        res = run_lattice_free(flat.reshape(sc.table.shape), 1, lm, cfg, mode, with_grad=True)
        return res.log_sum, res.grad.ravel()

    rep = grad_check(fn, sc.table.ravel(), tolerance=1e-6)
    assert rep.passed, rep.max_rel_error


def test_dp_table_dump_is_json_lines():
    sc, lm = scorer(3, 2, 1, 1), bigram(2)
    res = run_lattice_free(sc.table, 1, lm, SeqScoreConfig(1.0, 0.2, None, 1), "approx", keep_frames=True)
    buf = io.StringIO()
    dump_dp_table(res, buf, symbols=["p", "q"], utt_id="u7")
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert rows and all(r["id"] == "u7" for r in rows)
    assert {r["frame"] for r in rows} == {0, 1, 2, 3}
    final = [r["Q"] for r in rows if r["frame"] == 3]
    assert logsumexp(final) == pytest.approx(res.log_sum)


def test_oracle_checks_pass_on_fresh_fixtures():
    fxs = oracle.fixtures(10, seed=99)
    for res in (
        oracle.check_limited_vs_brute(fxs),
        oracle.check_approx_vs_limited(fxs),
        oracle.check_top_j(fxs),
    ):
        assert res.passed, res.row()


def test_utterance_argument_is_forwarded():
    sc = scorer(2, 2, 1, 0)
    cfg = SeqScoreConfig()
    assert lf_denominator_limited(sc, bigram(2), cfg, Utterance("u", 2, ())) == pytest.approx(0.0, abs=1e-12)
