import math

import numpy as np
import pytest
from sklearn.base import clone

from seqdisc.core import BOS, Lexicon, PhonemeAlphabet
from seqdisc.lm import (
    ContextTableLM,
    MultiLevelLM,
    NGramLM,
    SuffixLM,
    WordLevelLabelLM,
    label_sequence_score,
    labels_to_words,
    load_arpa,
    save_arpa,
    word_score_at_eow,
)

TOY = [[0, 1], [0, 0], [1]]


@pytest.fixture
def lexicon():
    # a b# : "ab"; b# : "b" and its homophone "bee"; a a# : "aa"
    alphabet = PhonemeAlphabet(("a", "b", "a#", "b#"))
    return Lexicon(alphabet, {(0, 3): {"ab"}, (3,): {"b", "bee"}, (0, 2): {"aa"}})


@pytest.fixture
def word_lm():
    text = [["ab", "b"], ["b", "aa", "ab"], ["bee"], ["aa", "b", "b"], ["ab", "bee", "aa"]]
    return NGramLM("word", 2, 0.5).fit(text)


def test_order0_is_uniform():
    lm = NGramLM("phoneme", 0, vocab=79).fit([])
    np.testing.assert_allclose(lm.log_dist((3, 4)), -math.log(79))
    assert lm.perplexity([[1, 2, 3]]) == pytest.approx(79.0, abs=1e-9)


def test_order1_relative_frequency():
    lm = NGramLM("phoneme", 1, vocab=2).fit([[0, 0, 1]])
    assert lm.log_prob((), 0) == pytest.approx(math.log(2 / 3))
    assert lm.log_prob((), 1) == pytest.approx(math.log(1 / 3))


def test_order1_unseen_symbol_needs_discount():
    with pytest.raises(ValueError, match="discount"):
        NGramLM("phoneme", 1, 0.0, vocab=3).fit([[0, 1]])


def test_order2_hand_counted():
    lm = NGramLM("phoneme", 2, 0.5, vocab=2).fit(TOY)
    # unigram: counts 3, 2 of 5; floor 0.5 * 2 / 5 / 2 = 0.1
    uni = NGramLM("phoneme", 1, 0.5, vocab=2).fit(TOY)
    assert math.exp(uni.log_prob((), 0)) == pytest.approx(0.6)
    assert math.exp(lm.log_prob((BOS,), 0)) == pytest.approx(0.7)
    assert math.exp(lm.log_prob((BOS,), 1)) == pytest.approx(0.3)
    assert math.exp(lm.log_prob((0,), 0)) == pytest.approx(0.55)
    assert math.exp(lm.log_prob((0,), 1)) == pytest.approx(0.45)
    # label 1 was never followed by anything: back off to the unigram
    assert math.exp(lm.log_prob((1,), 0)) == pytest.approx(0.6)
    for hist in [(BOS,), (0,), (1,)]:
        assert np.exp(lm.log_dist(hist)).sum() == pytest.approx(1.0)


def test_bigram_perplexity_by_hand():
    lm = NGramLM("phoneme", 2, 0.5, vocab=2).fit(TOY)
    want = math.exp(-(math.log(0.7) + math.log(0.45)) / 2)
    assert lm.perplexity([[0, 1]]) == pytest.approx(want)


def test_forced_sequence_perplexity_is_one():
    lm = NGramLM("phoneme", 1, vocab=1).fit([[0, 0, 0]])
    assert lm.perplexity([[0, 0], [0]]) == pytest.approx(1.0)


def test_perplexity_rejects_empty_heldout():
    lm = NGramLM("phoneme", 0, vocab=3).fit([])
    with pytest.raises(ValueError):
        lm.perplexity([])


def test_word_lm_counts_eos_and_maps_unknown(word_lm):
    assert "</s>" in word_lm.vocab_ and "<unk>" in word_lm.vocab_
    assert word_lm.log_prob(["zzz"], "b") == word_lm.log_prob(["<unk>"], "b")
    assert np.exp(word_lm.log_dist(["b"])).sum() == pytest.approx(1.0)


def test_lm_is_a_clonable_estimator():
    lm = NGramLM("word", 3, 0.3)
    assert clone(lm).get_params() == {"unit": "word", "order": 3, "discount": 0.3, "vocab": None}


@pytest.mark.parametrize("order", [0, 1, 2, 3])
def test_arpa_round_trip_phoneme(tmp_path, order):
    lm = NGramLM("phoneme", order, 0.5, vocab=3).fit([[0, 1, 2, 1], [2, 2], [0]])
    save_arpa(lm, tmp_path / "lm.arpa", symbols=["a", "b", "c"])
    back = load_arpa(tmp_path / "lm.arpa", symbols=["a", "b", "c"])
    for hist in [(), (0,), (2, 1), (BOS, 2)]:
        np.testing.assert_allclose(back.log_dist(hist), lm.log_dist(hist), atol=1e-12)


def test_arpa_round_trip_word(tmp_path, word_lm):
    save_arpa(word_lm, tmp_path / "w.arpa")
    back = load_arpa(tmp_path / "w.arpa")
    for hist in [(), ("b",), ("aa", "ab"), ("nope",)]:
        np.testing.assert_allclose(back.log_dist(hist), word_lm.log_dist(hist), atol=1e-12)


def test_word_score_at_eow_rules(lexicon, word_lm):
    assert word_score_at_eow(word_lm, lexicon, ["ab"], (0,), 2) == pytest.approx(word_lm.log_prob(["ab"], "aa"))
    homophone = word_score_at_eow(word_lm, lexicon, ["ab"], (), 3)
    assert homophone == pytest.approx(max(word_lm.log_prob(["ab"], "b"), word_lm.log_prob(["ab"], "bee")))
    unknown = word_score_at_eow(word_lm, lexicon, ["ab"], (1,), 2)
    assert unknown == pytest.approx(word_lm.log_prob(["ab"], "<unk>"))


def test_word_level_label_lm_scores_only_eow(lexicon, word_lm):
    lm = WordLevelLabelLM(word_lm, lexicon)
    state = lm.advance(lm.initial_state(), 0)
    scores = lm.log_scores(state)
    assert scores[0] == 0.0 and scores[1] == 0.0
    assert scores[2] == pytest.approx(word_lm.log_prob([], "aa"))


def test_multilevel_single_word_cancels_phoneme_scores(lexicon, word_lm):
    plm = NGramLM("phoneme", 2, 0.5, vocab=4).fit([[0, 3, 3], [0, 2, 0, 3]])
    mlm = MultiLevelLM(plm, word_lm, lexicon, use_eos=False)
    assert label_sequence_score(mlm, (0, 3)) == pytest.approx(word_lm.log_prob([], "ab"))
    # mid-word: only phoneme bigram terms so far
    assert label_sequence_score(mlm, (0, 1)) == pytest.approx(plm.log_prob((BOS,), 0) + plm.log_prob((0,), 1))


def test_multilevel_two_words_equal_word_lm(lexicon, word_lm):
    plm = NGramLM("phoneme", 2, 0.5, vocab=4).fit([[0, 3, 3], [0, 2, 0, 3]])
    mlm = MultiLevelLM(plm, word_lm, lexicon)
    labels = lexicon.words_to_labels(["aa", "ab"])
    got = label_sequence_score(mlm, labels, final=True)
    assert got == pytest.approx(word_lm.sequence_log_prob(["aa", "ab"]), abs=1e-12)


def test_multilevel_unfinished_word_final_score_revokes_phonemes(lexicon, word_lm):
    plm = NGramLM("phoneme", 2, 0.5, vocab=4).fit([[0, 3, 3], [0, 2, 0, 3]])
    mlm = MultiLevelLM(plm, word_lm, lexicon, use_eos=False)
    assert label_sequence_score(mlm, (3, 0), final=True) == pytest.approx(word_lm.log_prob([], "b"))


def test_labels_to_words_resolves_homophones_and_dangling_suffix(lexicon, word_lm):
    assert labels_to_words(lexicon, (0, 3, 3)) == ("ab", "b")
    best = max(["b", "bee"], key=lambda w: word_lm.log_prob(["aa"], w))
    assert labels_to_words(lexicon, (0, 2, 3), word_lm) == ("aa", best)
    assert labels_to_words(lexicon, (0, 3, 1)) == ("ab", "<unk>")


def test_suffix_lm_uses_long_history():
    lm = SuffixLM(num_labels=2, discount=0.5).fit([[0, 1, 1, 0], [1, 1, 1, 1]])
    assert not np.allclose(lm.log_scores((BOS, 0, 1, 1)), lm.log_scores((BOS, 1, 1, 1)))
    for state in [(BOS,), (BOS, 0), (BOS, 1, 1, 1, 1, 1)]:
        assert np.exp(lm.log_scores(state)).sum() == pytest.approx(1.0)


def test_context_table_lm_validates_shape():
    with pytest.raises(ValueError):
        ContextTableLM(np.zeros((2, 2)), 1)
    lm = ContextTableLM(np.log(np.full((3, 2), 0.5)), 1)
    assert lm.sequence_log_prob([0, 1, 1]) == pytest.approx(3 * math.log(0.5))
