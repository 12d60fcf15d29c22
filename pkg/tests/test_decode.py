import math

import numpy as np
import pytest

from seqdisc import oracle
from seqdisc.core import Lexicon, PhonemeAlphabet, Utterance
from seqdisc.decode import (
    DecodeConfig,
    Recognizer,
    WerBreakdown,
    exhaustive_recognize,
    format_wer_table,
    ilm_zero_encoder,
    recognize,
    recognize_labels,
    score_wer,
)
from seqdisc.lm import NGramLM
from seqdisc.scorer import ContextKScorer, PrecomputedScores, random_log_probs


@pytest.fixture
def single_phoneme_task():
    """Three one-phoneme words so word and label sequences coincide."""
    alphabet = PhonemeAlphabet(("a#", "b#", "c#"))
    lex = Lexicon(alphabet, {(0,): {"A"}, (1,): {"B"}, (2,): {"C"}})
    elm = NGramLM("word", 2, 0.5).fit([["A", "B"], ["B", "B", "C"], ["C", "A"]])
    return lex, elm


def test_no_lm_decode_is_best_am_sequence(single_phoneme_task):
    lex, elm = single_phoneme_task
    for seed in range(4):
        sc = PrecomputedScores(random_log_probs(4, 3, 1, np.random.default_rng(seed), 2.0), 1)
        utt = Utterance("u", 4, ())
        cfg = DecodeConfig(0.0, 0.0, beam_size=64)
        assert recognize_labels(sc, elm, None, cfg, utt, lex)[0] == exhaustive_recognize(sc, elm, None, cfg, utt, lex)[0]


def test_external_lm_flips_the_decision():
    alphabet = PhonemeAlphabet(("a#", "b#"))
    lex = Lexicon(alphabet, {(0,): {"A"}, (1,): {"B"}})
    elm = NGramLM("word", 1, 0.5).fit([["B"]] * 20 + [["A"]])
    # one frame, AM mildly prefers A
    sc = PrecomputedScores(np.log(np.array([[[0.5, 0.45, 0.05]]])), 0)
    utt = Utterance("u", 1, ())
    assert recognize(sc, elm, None, DecodeConfig(0.0), utt, lex) == ("A",)
    cfg = DecodeConfig(2.0, use_eos=False)
    assert recognize(sc, elm, None, cfg, utt, lex) == ("B",)
    assert exhaustive_recognize(sc, elm, None, cfg, utt, lex)[0] == (1,)


def test_ilm_correction_cancels_matching_elm(single_phoneme_task):
    lex, _ = single_phoneme_task
    scorer = ContextKScorer(3, 0, 2, init_scale=1.0, random_state=3).initialize()
    ilm = ilm_zero_encoder(scorer)
    # a word unigram equal to the ILM on the closed vocabulary
    elm = NGramLM("word", 1, 0.5).fit([["A", "B", "C"]])
    elm.tables_[0] = {(w,): -math.inf for w in elm.vocab_}
    elm.tables_[0].update({(w,): float(ilm.table[0, i]) for i, w in enumerate(("A", "B", "C"))})
    elm._finish()
    rng = np.random.default_rng(5)
    for i in range(4):
        utt = Utterance(f"u{i}", 4, (), features=rng.normal(size=(4, 2)))
        plain = exhaustive_recognize(scorer, elm, ilm, DecodeConfig(0.0, 0.0, use_eos=False), utt, lex)
        fused = exhaustive_recognize(scorer, elm, ilm, DecodeConfig(0.8, 0.8, use_eos=False), utt, lex)
        assert fused[0] == plain[0]
        assert fused[1] == pytest.approx(plain[1], abs=1e-9)


def test_ilm_of_feature_free_scorer_is_renormalised_posterior():
    sc = ContextKScorer(3, 1, 0, init_scale=1.0, random_state=1).initialize()
    ilm = ilm_zero_encoder(sc)
    probs = np.exp(sc.log_probs(Utterance("u", 1, ()))[0])
    want = probs[:, :3] / probs[:, :3].sum(axis=1, keepdims=True)
    np.testing.assert_allclose(np.exp(ilm.table), want, atol=1e-12)


def test_ilm_k0_is_unigram_and_normalised():
    ilm = ilm_zero_encoder(ContextKScorer(4, 0, 3, init_scale=1.0, random_state=2).initialize())
    assert ilm.table.shape == (1, 4)
    assert np.exp(ilm.table).sum() == pytest.approx(1.0, abs=1e-9)
    ilm2 = ilm_zero_encoder(ContextKScorer(3, 2, 3, init_scale=1.0, random_state=2).initialize())
    np.testing.assert_allclose(np.exp(ilm2.table).sum(axis=1), 1.0, atol=1e-9)


def test_ilm_rejects_all_blank_context():
    sc = ContextKScorer(2, 0, 1).initialize()
    sc.bias_[:, :-1] = -np.inf
    with pytest.raises(ValueError):
        ilm_zero_encoder(sc)
    with pytest.raises(TypeError):
        ilm_zero_encoder(PrecomputedScores(random_log_probs(1, 2, 0, np.random.default_rng(0)), 0))


def test_recognize_matches_exhaustive_on_oracle_fixtures():
    res = oracle.check_recognize(oracle.fixtures(6, seed=4, max_frames=4))
    assert res.passed, res.row()


def test_recognizer_is_deterministic_across_jobs(single_phoneme_task):
    lex, elm = single_phoneme_task
    sc = ContextKScorer(3, 1, 2, init_scale=1.0, random_state=0).initialize()
    rng = np.random.default_rng(1)
    utts = [Utterance(f"u{i}", 4, (0, 1), ("A", "B"), features=rng.normal(size=(4, 2))) for i in range(6)]
    one = Recognizer(sc, elm, lex, lambda1=0.5, lambda2=0.2, beam_size=6).predict(utts)
    four = Recognizer(sc, elm, lex, lambda1=0.5, lambda2=0.2, beam_size=6, n_jobs=4).predict(utts)
    assert one == four
    with pytest.raises(ValueError):
        Recognizer(sc, elm, None).fit()


# -- WER ---------------------------------------------------------------------------
def test_wer_identity_and_all_empty():
    refs = {"a": ("x", "y"), "b": ("z",)}
    assert score_wer(refs, refs).wer == 0.0
    empty = score_wer(refs, {"a": (), "b": ()})
    assert empty.wer == 100.0 and empty.dele == 3 and empty.sub == empty.ins == 0


def test_wer_two_utterances_by_hand():
    refs = {"1": ("the", "cat", "sat"), "2": ("a", "dog")}
    hyps = {"1": ("the", "bat", "sat", "down"), "2": ("dog",)}
    w = score_wer(refs, hyps)
    assert (w.sub, w.dele, w.ins, w.ref_tokens) == (1, 1, 1, 5)
    assert w.wer == pytest.approx(60.0)


def test_wer_mismatched_ids():
    with pytest.raises(ValueError):
        score_wer({"a": ()}, {"b": ()})


def test_wer_formatting():
    assert WerBreakdown.fmt(4.25) == "4.2"
    assert WerBreakdown.fmt(4.26) == "4.3"
    rows = [WerBreakdown(1, 2, 0, 40).row("dev")]
    assert format_wer_table(rows).splitlines() == ["dataset  Sub  Del  Ins  WER", "dev      2.5  5.0  0.0  7.5"]
    assert format_wer_table(rows, as_csv=True) == "dataset,Sub,Del,Ins,WER\ndev,2.5,5.0,0.0,7.5\n"
