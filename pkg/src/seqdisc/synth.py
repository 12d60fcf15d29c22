"""Synthetic recognition task: lexicon, word grammar and noisy frame features.

Frames carry ``[base-phoneme one-hot, end-of-word bit, blank bit]`` scaled by
a random per-frame strength plus Gaussian noise, so a tabular context-k
scorer can learn them while weak frames stay ambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EOW_MARK, Lexicon, PhonemeAlphabet, Utterance


@dataclass
class SyntheticTask:
    alphabet: PhonemeAlphabet
    lexicon: Lexicon
    train: list
    test: list
    text: list  # word sentences for LM training (a superset of the acoustic data)

    @property
    def feature_dim(self) -> int:
        return len(self.alphabet.symbols) // 2 + 2


def _grammar(rng, n_words, branching, stay):
    succ = np.full((n_words, n_words), (1.0 - stay) / n_words)
    for w in range(n_words):
        picks = rng.choice(n_words, size=branching, replace=False)
        succ[w, picks] += stay / branching
    start = rng.dirichlet(np.ones(n_words))
    return start, succ


def _sentence(rng, start, succ, min_len, max_len):
    n = int(rng.integers(min_len, max_len + 1))
    words = [int(rng.choice(len(start), p=start))]
    while len(words) < n:
        words.append(int(rng.choice(len(start), p=succ[words[-1]])))
    return words


def make_task(
    n_base=8,
    n_words=32,
    n_train=200,
    n_test=100,
    n_text=3000,
    max_pron=3,
    branching=2,
    stay=0.9,
    noise=0.35,
    weak=0.35,
    min_len=3,
    max_len=6,
    seed=0,
) -> SyntheticTask:
    """Build a task; ``weak`` is the lower bound of the per-frame signal strength."""
    rng = np.random.default_rng(seed)
    base = [f"p{i}" for i in range(n_base)]
    alphabet = PhonemeAlphabet(tuple(base + [b + EOW_MARK for b in base]))
    words, prons, seen = [], [], set()
    while len(words) < n_words:
        length = int(rng.integers(1, max_pron + 1))
        body = [base[i] for i in rng.integers(0, n_base, size=length)]
        body[-1] += EOW_MARK
        pron = alphabet.encode(body)
        if pron in seen:
            continue
        seen.add(pron)
        words.append(f"w{len(words):02d}")
        prons.append(pron)
    lexicon = Lexicon(alphabet, {p: {w} for w, p in zip(words, prons)})
    start, succ = _grammar(rng, n_words, branching, stay)
    text = [[words[i] for i in _sentence(rng, start, succ, min_len, max_len)] for _ in range(n_text)]

    def utterance(idx, sent):
        labels = lexicon.words_to_labels(sent)
        frames = [None]
        for lab in labels:
            frames.append(lab)
            frames.extend([None] * int(rng.integers(1, 3)))
        feats = np.zeros((len(frames), n_base + 2))
        for t, lab in enumerate(frames):
            strength = rng.uniform(weak, 1.5)
            if lab is None:
                feats[t, n_base + 1] = strength
            else:
                feats[t, lab % n_base] = strength
                feats[t, n_base] = strength * (lab >= n_base)
        feats += noise * rng.standard_normal(feats.shape)
        return Utterance(f"utt{idx:04d}", len(frames), labels, tuple(sent), features=feats)

    n_ac = n_train + n_test
    utts = [utterance(i, text[i]) for i in range(n_ac)]
    return SyntheticTask(alphabet, lexicon, utts[:n_train], utts[n_train:], text)
