"""Count-based language models and the label-level LM protocol.

Every model used inside a search or DP implements the label-LM protocol:

* ``initial_state()``
* ``advance(state, label) -> state``
* ``log_scores(state) -> ndarray[num_labels]`` (log score of each next label)
* ``recomb_key(state)`` extra key for beam recombination (``()`` if none)
* ``final_score(state)`` end-of-utterance correction (0 for phoneme LMs)

States are hashable values, so hypotheses can share and copy them freely.
"""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import BOS, UNK_WORD, Lexicon, map_pronunciation, split_words
from .scorer import context_index, num_contexts

WORD_BOS = "<s>"
WORD_EOS = "</s>"
LN10 = math.log(10.0)
_ARPA_FLOOR = -99.0


def _normalize_vocab(unit, vocab):
    if vocab is None:
        return None
    if unit == "phoneme":
        return list(range(vocab)) if isinstance(vocab, int) else sorted(int(v) for v in vocab)
    return list(dict.fromkeys(vocab))


class NGramLM(BaseEstimator):
    """Backoff n-gram LM with interpolated absolute discounting.

    ``unit="phoneme"`` models integer label ids ``0..V-1`` with a begin
    token only; ``unit="word"`` models strings with explicit ``<s>``/``</s>``
    and an ``<unk>`` class.  ``order=0`` is the uniform model.  An order-1
    phoneme model whose every label is observed uses raw relative
    frequencies.
    """

    def __init__(self, unit="phoneme", order=2, discount=0.5, vocab=None):
        self.unit = unit
        self.order = order
        self.discount = discount
        self.vocab = vocab

    # -- training -----------------------------------------------------------------
    def fit(self, sequences: Iterable[Sequence], y=None) -> "NGramLM":
        del y
        if self.unit not in ("phoneme", "word"):
            raise ValueError(f"unit must be 'phoneme' or 'word', got {self.unit!r}")
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        sequences = [tuple(s) for s in sequences]
        self._setup_vocab(sequences)
        n = self.order
        self.order_ = n
        self.tables_ = [dict() for _ in range(n)]
        self.bows_ = {}
        if n == 0:
            self._finish()
            return self
        if not sequences:
            raise ValueError("an order >= 1 model needs a non-empty corpus")
        counts = [defaultdict(int) for _ in range(n)]
        for seq in sequences:
            padded = (self.bos_,) * (n - 1) + tuple(self._map(t) for t in seq) + self._tail()
            for i in range(n - 1, len(padded)):
                for m in range(1, n + 1):
                    counts[m - 1][padded[i - m + 1 : i + 1]] += 1

        uni = counts[0]
        total = sum(uni.values())
        if total == 0:
            raise ValueError("corpus contains no tokens")
        unseen = [w for w in self.vocab_ if uni.get((w,), 0) == 0]
        d1 = self.discount
        if self.unit == "phoneme" and n == 1 and not unseen:
            d1 = 0.0
        if unseen and d1 == 0.0:
            raise ValueError(f"{len(unseen)} vocabulary symbols unseen; use a nonzero discount")
        floor = d1 * len(uni) / total / len(self.vocab_)
        for w in self.vocab_:
            p = max(uni.get((w,), 0) - d1, 0.0) / total + floor
            self.tables_[0][(w,)] = math.log(p) if p > 0 else -math.inf

        d = self.discount
        for m in range(2, n + 1):
            by_ctx = defaultdict(dict)
            for g, c in counts[m - 1].items():
                by_ctx[g[:-1]][g[-1]] = c
            for ctx, nexts in by_ctx.items():
                c_ctx = sum(nexts.values())
                gamma = d * len(nexts) / c_ctx
                self.bows_[ctx] = math.log(gamma) if gamma > 0 else -math.inf
                for w, c in nexts.items():
                    lower = math.exp(self._lookup(ctx[1:], w))
                    self.tables_[m - 1][ctx + (w,)] = math.log((c - d) / c_ctx + gamma * lower)
        self._finish()
        return self

    def _setup_vocab(self, sequences):
        vocab = _normalize_vocab(self.unit, self.vocab)
        if self.unit == "phoneme":
            if vocab is None:
                top = max((max(s) for s in sequences if s), default=-1)
                vocab = list(range(top + 1))
            if not vocab or vocab != list(range(len(vocab))):
                raise ValueError("phoneme vocabulary must be the dense ids 0..V-1")
            self.bos_, self.eos_, self.unk_ = BOS, None, None
        else:
            if vocab is None:
                vocab = list(dict.fromkeys(t for s in sequences for t in s))
            vocab = [w for w in vocab if w not in (WORD_EOS, UNK_WORD, WORD_BOS)]
            vocab += [WORD_EOS, UNK_WORD]
            self.bos_, self.eos_, self.unk_ = WORD_BOS, WORD_EOS, UNK_WORD
        self.vocab_ = vocab
        self._vocab_set = set(vocab)

    def _finish(self):
        self.index_ = {w: i for i, w in enumerate(self.vocab_)}
        self._dist_cache = {}

    def _map(self, tok):
        if tok in self._vocab_set:
            return tok
        if self.unit == "word":
            return self.unk_
        raise ValueError(f"label {tok!r} outside the declared vocabulary")

    def _tail(self):
        return (self.eos_,) if self.unit == "word" else ()

    # -- querying -----------------------------------------------------------------
    @property
    def context_length(self) -> int:
        return max(self.order_ - 1, 0)

    def _context(self, history: Sequence) -> tuple:
        k = self.context_length
        if k == 0:
            return ()
        hist = tuple(self._map_query(t) for t in tuple(history)[-k:])
        return (self.bos_,) * (k - len(hist)) + hist

    def _map_query(self, tok):
        if tok == self.bos_ or tok in self.index_:
            return tok
        if self.unit == "word":
            return self.unk_
        raise KeyError(f"label {tok!r} outside the LM vocabulary")

    def _lookup(self, ctx: tuple, w) -> float:
        acc = 0.0
        while True:
            g = ctx + (w,)
            lp = self.tables_[len(g) - 1].get(g)
            if lp is not None:
                return acc + lp
            if not ctx:
                return -math.inf
            acc += self.bows_.get(ctx, 0.0)
            ctx = ctx[1:]

    def log_dist(self, history: Sequence = ()) -> np.ndarray:
        """Natural-log distribution over ``vocab_`` given ``history``."""
        check_is_fitted(self, "vocab_")
        ctx = self._context(history)
        cached = self._dist_cache.get(ctx)
        if cached is None:
            if self.order_ == 0:
                cached = np.full(len(self.vocab_), -math.log(len(self.vocab_)))
            else:
                cached = np.array([self._lookup(ctx, w) for w in self.vocab_])
            cached.setflags(write=False)
            self._dist_cache[ctx] = cached
        return cached

    def log_prob(self, history: Sequence, token) -> float:
        check_is_fitted(self, "vocab_")
        return float(self.log_dist(history)[self.index_[self._map_query(token)]])

    def sequence_log_prob(self, seq: Sequence, include_eos: bool | None = None) -> float:
        """Log-probability of a whole sequence (plus ``</s>`` for word models)."""
        if include_eos is None:
            include_eos = self.unit == "word"
        seq = tuple(seq)
        total = sum(self.log_prob(seq[:i], tok) for i, tok in enumerate(seq))
        if include_eos:
            total += self.log_prob(seq, self.eos_)
        return total

    def perplexity(self, sequences: Iterable[Sequence]) -> float:
        return perplexity(self, sequences)

    # -- label-LM protocol ----------------------------------------------------------
    def initial_state(self) -> tuple:
        return (self.bos_,) * self.context_length

    def advance(self, state: tuple, label) -> tuple:
        k = self.context_length
        return (tuple(state) + (label,))[-k:] if k else ()

    def log_scores(self, state) -> np.ndarray:
        return self.log_dist(state)

    def recomb_key(self, state):
        return ()

    def final_score(self, state) -> float:
        return 0.0


def perplexity(lm, sequences: Iterable[Sequence]) -> float:
    """exp of the mean negative log-probability per token (``</s>`` counted for word LMs)."""
    sequences = [tuple(s) for s in sequences]
    eos = getattr(lm, "unit", "phoneme") == "word"
    n_tok = sum(len(s) + (1 if eos else 0) for s in sequences)
    if n_tok == 0:
        raise ValueError("perplexity needs at least one held-out token")
    total = sum(lm.sequence_log_prob(s) for s in sequences)
    return math.exp(-total / n_tok)


# -- ARPA files -------------------------------------------------------------------
def _tok_out(lm, tok, symbols):
    if tok == lm.bos_:
        return WORD_BOS
    if lm.unit == "phoneme":
        return symbols[tok] if symbols is not None else str(tok)
    return tok


def save_arpa(lm: NGramLM, path, symbols: Sequence[str] | None = None) -> None:
    """Write ``log10 prob<TAB>ngram<TAB>log10 backoff`` sections.

    Contexts that never appear as predicted n-grams (e.g. repeated ``<s>``)
    are written with the conventional -99 floor so their backoff survives.
    """
    check_is_fitted(lm, "vocab_")
    n_levels = max(lm.order_, 1)
    levels = [dict() for _ in range(n_levels)]
    if lm.order_ == 0:
        for w in lm.vocab_:
            levels[0][(w,)] = -math.log(len(lm.vocab_))
    else:
        for m in range(n_levels):
            levels[m].update(lm.tables_[m])
    for ctx in lm.bows_:
        levels[len(ctx) - 1].setdefault(ctx, None)

    def fmt(x):
        return repr(_ARPA_FLOOR if x is None or x == -math.inf else x / LN10)

    out = ["\\data\\", f"order {lm.order_}", f"unit {lm.unit}", f"discount {lm.discount!r}"]
    out += [f"ngram {m + 1}={len(levels[m])}" for m in range(n_levels)]
    for m in range(n_levels):
        out += ["", f"\\{m + 1}-grams:"]
        for g, lp in levels[m].items():
            toks = " ".join(_tok_out(lm, t, symbols) for t in g)
            line = f"{fmt(lp)}\t{toks}"
            if g in lm.bows_:
                line += f"\t{fmt(lm.bows_[g])}"
            out.append(line)
    out += ["", "\\end\\", ""]
    Path(path).write_text("\n".join(out), encoding="utf-8")


def load_arpa(path, symbols: Sequence[str] | None = None) -> NGramLM:
    """Inverse of ``save_arpa``; base-10 file values become natural logs."""
    path = Path(path)
    header = {}
    levels: list[list[tuple[float, tuple[str, ...], float | None]]] = []
    section = None
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line == "\\end\\":
            continue
        if line == "\\data\\":
            section = "data"
            continue
        if line.startswith("\\") and line.endswith("-grams:"):
            section = int(line[1:].split("-")[0])
            while len(levels) < section:
                levels.append([])
            continue
        if section == "data":
            key, _, val = line.partition(" ")
            header[key] = val
            continue
        parts = line.split("\t")
        if section is None or len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: malformed ARPA line")
        bow = float(parts[2]) * LN10 if len(parts) == 3 else None
        levels[section - 1].append((float(parts[0]), tuple(parts[1].split()), bow))
    unit = header.get("unit", "word")
    order = int(header.get("order", len(levels)))
    sym_index = {s: i for i, s in enumerate(symbols)} if symbols is not None else None

    def tok_in(s):
        if s == WORD_BOS:
            return BOS if unit == "phoneme" else WORD_BOS
        if unit == "phoneme":
            return sym_index[s] if sym_index is not None else int(s)
        return s

    vocab = [tok_in(g[0]) for lp, g, _ in levels[0] if lp > _ARPA_FLOOR and g[0] != WORD_BOS]
    lm = NGramLM(unit=unit, order=order, discount=float(header.get("discount", 0.5)), vocab=None)
    lm.order_ = order
    if unit == "phoneme":
        lm.vocab_ = sorted(vocab)
        lm.bos_, lm.eos_, lm.unk_ = BOS, None, None
    else:
        lm.vocab_ = vocab
        lm.bos_, lm.eos_, lm.unk_ = WORD_BOS, WORD_EOS, UNK_WORD
    lm.tables_ = [dict() for _ in range(order)]
    lm.bows_ = {}
    for m, entries in enumerate(levels):
        for lp10, g, bow in entries:
            g = tuple(tok_in(t) for t in g)
            if lp10 > _ARPA_FLOOR and m < order:
                lm.tables_[m][g] = lp10 * LN10
            if bow is not None:
                lm.bows_[g] = -math.inf if bow <= _ARPA_FLOOR * LN10 else bow
    lm._finish()
    return lm


# -- unbounded-context stand-in for a recurrent LM ----------------------------------
class SuffixLM(BaseEstimator):
    """Variable-order count model over label ids; its state is the full history.

    Each distribution interpolates (absolute discounting) from the longest
    suffix of the history seen in training down to a uniform floor, so the
    prediction can depend on arbitrarily old labels.
    """

    def __init__(self, num_labels=2, discount=0.5, max_order=None):
        self.num_labels = num_labels
        self.discount = discount
        self.max_order = max_order

    def fit(self, sequences: Iterable[Sequence[int]], y=None) -> "SuffixLM":
        del y
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        V = self.num_labels
        counts: dict[tuple, np.ndarray] = {}
        for seq in sequences:
            hist = (BOS,) + tuple(int(s) for s in seq)
            for i in range(1, len(hist)):
                w = hist[i]
                if not 0 <= w < V:
                    raise ValueError(f"label {w} outside 0..{V - 1}")
                longest = i if self.max_order is None else min(i, self.max_order - 1)
                for L in range(0, longest + 1):
                    ctx = hist[i - L : i]
                    arr = counts.get(ctx)
                    if arr is None:
                        arr = counts[ctx] = np.zeros(V)
                    arr[w] += 1
        if () not in counts:
            raise ValueError("SuffixLM needs training tokens")
        self.counts_ = counts
        self._cache = {}
        return self

    def _dist(self, ctx: tuple) -> np.ndarray:
        cached = self._cache.get(ctx)
        if cached is not None:
            return cached
        lower = np.full(self.num_labels, 1.0 / self.num_labels) if not ctx else np.exp(self._dist(ctx[1:]))
        c = self.counts_[ctx]
        total = c.sum()
        d = self.discount
        p = np.maximum(c - d, 0.0) / total + d * np.count_nonzero(c) / total * lower
        out = np.log(p)
        out.setflags(write=False)
        self._cache[ctx] = out
        return out

    def log_scores(self, state: tuple) -> np.ndarray:
        check_is_fitted(self, "counts_")
        L = 0
        limit = len(state) if self.max_order is None else min(len(state), self.max_order - 1)
        while L < limit and state[len(state) - L - 1 :] in self.counts_:
            L += 1
        return self._dist(state[len(state) - L :] if L else ())

    def initial_state(self) -> tuple:
        return (BOS,)

    def advance(self, state: tuple, label: int) -> tuple:
        return state + (int(label),)

    def step(self, state: tuple, label: int):
        nxt = self.advance(state, label)
        return nxt, self.log_scores(nxt)

    def recomb_key(self, state):
        return ()

    def final_score(self, state) -> float:
        return 0.0

    def sequence_log_prob(self, seq: Sequence[int]) -> float:
        state, total = self.initial_state(), 0.0
        for lab in seq:
            total += float(self.log_scores(state)[lab])
            state = self.advance(state, lab)
        return total


class ContextTableLM:
    """Label LM given by an explicit table of log-scores per padded context."""

    def __init__(self, table: np.ndarray, context_size: int):
        self.table = np.asarray(table, dtype=float)
        self.context_size = context_size
        self.num_labels = self.table.shape[1]
        if self.table.shape[0] != num_contexts(self.num_labels, context_size):
            raise ValueError("table rows must cover every padded context")

    def initial_state(self) -> tuple:
        return (BOS,) * self.context_size

    def advance(self, state, label) -> tuple:
        k = self.context_size
        return (tuple(state) + (label,))[-k:] if k else ()

    def log_scores(self, state) -> np.ndarray:
        return self.table[context_index(state, self.num_labels)]

    def recomb_key(self, state):
        return ()

    def final_score(self, state) -> float:
        return 0.0

    def sequence_log_prob(self, seq: Sequence[int]) -> float:
        return label_sequence_score(self, seq)


# -- word-level scoring -------------------------------------------------------------
def word_score_at_eow(word_lm: NGramLM, lexicon: Lexicon, word_history, within_word, eow_label) -> float:
    """Best word-LM log-prob among the homophones of ``within_word + eow``."""
    return _best_word(word_lm, lexicon, tuple(word_history), tuple(within_word) + (eow_label,))[1]


def _best_word(word_lm, lexicon, history, pron):
    words = map_pronunciation(lexicon, pron)
    best, best_lp = None, -math.inf
    for w in sorted(words):
        lp = word_lm.log_prob(history, w)
        if best is None or lp > best_lp:
            best, best_lp = w, lp
    return best, best_lp


def labels_to_words(lexicon: Lexicon, labels, word_lm: NGramLM | None = None) -> tuple[str, ...]:
    """Word sequence of ``labels``.

    Homophones are resolved left to right by the word LM (else alphabetically);
    a trailing suffix without EOW becomes the unknown word.
    """
    prons, rest = split_words(labels, lexicon.alphabet.eow)
    words: list[str] = []
    for pron in prons:
        cands = map_pronunciation(lexicon, pron)
        if word_lm is not None and len(cands) > 1:
            words.append(_best_word(word_lm, lexicon, tuple(words), pron)[0])
        else:
            words.append(min(cands))
    if rest:
        words.append(lexicon.unknown_word)
    return tuple(words)


_OVERFLOW = ("<overflow>",)


class WordLevelLabelLM:
    """Word LM seen through EOW phonemes: non-EOW labels score 0, EOW labels
    score the (homophone-max) word, unknown pronunciations score ``<unk>``.

    State: (word history truncated to the LM context, within-word suffix).
    The suffix is capped at the longest pronunciation; anything longer can
    only ever map to the unknown word.
    """

    def __init__(self, word_lm: NGramLM, lexicon: Lexicon, use_eos: bool = True):
        self.word_lm = word_lm
        self.lexicon = lexicon
        self.use_eos = use_eos
        self.eow = lexicon.alphabet.eow
        self.num_labels = lexicon.alphabet.num_labels
        self._eow_ids = np.array(sorted(self.eow), dtype=int)
        self._cap = lexicon.max_pron_length
        self._cache = {}

    def initial_state(self):
        return (self.word_lm.initial_state(), ())

    def _close_word(self, hist, within, eow_label):
        if within == _OVERFLOW:
            return self.lexicon.unknown_word, self.word_lm.log_prob(hist, self.lexicon.unknown_word)
        return _best_word(self.word_lm, self.lexicon, hist, within + (eow_label,))

    def log_scores(self, state) -> np.ndarray:
        cached = self._cache.get(state)
        if cached is None:
            hist, within = state
            cached = np.zeros(self.num_labels)
            for e in self._eow_ids:
                cached[e] = self._close_word(hist, within, int(e))[1]
            cached.setflags(write=False)
            self._cache[state] = cached
        return cached

    def advance(self, state, label):
        hist, within = state
        if label in self.eow:
            word, _ = self._close_word(hist, within, label)
            return (self.word_lm.advance(hist, word), ())
        if within == _OVERFLOW or len(within) + 1 >= max(self._cap, 1):
            return (hist, _OVERFLOW)
        return (hist, within + (label,))

    def recomb_key(self, state):
        return state[1]

    def final_score(self, state) -> float:
        return self.word_lm.log_prob(state[0], self.word_lm.eos_) if self.use_eos else 0.0


class MultiLevelLM:
    """Phoneme n-gram inside words, word LM at word ends.

    The within-word phoneme-LM scores are accumulated and subtracted again
    when the EOW phoneme is emitted, so a completed word contributes exactly
    its word-LM score.  ``phoneme_lm=None`` gives no within-word guidance.
    """

    def __init__(self, phoneme_lm: NGramLM | None, word_lm: NGramLM, lexicon: Lexicon, use_eos: bool = True):
        self.phoneme_lm = phoneme_lm
        self.words = WordLevelLabelLM(word_lm, lexicon, use_eos=use_eos)
        self.eow = lexicon.alphabet.eow
        self.num_labels = lexicon.alphabet.num_labels
        self._cache = {}

    @property
    def word_lm(self) -> NGramLM:
        return self.words.word_lm

    @property
    def lexicon(self) -> Lexicon:
        return self.words.lexicon

    def initial_state(self):
        pstate = self.phoneme_lm.initial_state() if self.phoneme_lm is not None else ()
        return (self.words.initial_state(), pstate, 0.0)

    def log_scores(self, state) -> np.ndarray:
        cached = self._cache.get(state)
        if cached is None:
            wstate, pstate, acc = state
            if self.phoneme_lm is not None:
                cached = np.array(self.phoneme_lm.log_scores(pstate), dtype=float)
            else:
                cached = np.zeros(self.num_labels)
            wscores = self.words.log_scores(wstate)
            ids = self.words._eow_ids
            cached[ids] = wscores[ids] - acc
            cached.setflags(write=False)
            self._cache[state] = cached
        return cached

    def advance(self, state, label):
        return self.step(state, label)[0]

    def step(self, state, label):
        """(next state, log-score increment) for emitting ``label``."""
        wstate, pstate, acc = state
        inc = float(self.log_scores(state)[label])
        nxt_p = self.phoneme_lm.advance(pstate, label) if self.phoneme_lm is not None else ()
        if label in self.eow:
            return (self.words.advance(wstate, label), nxt_p, 0.0), inc
        return (self.words.advance(wstate, label), nxt_p, acc + inc), inc

    def recomb_key(self, state):
        return state[0][1]

    def final_score(self, state) -> float:
        return self.words.final_score(state[0]) - state[2]


def multilevel_step(mlm: MultiLevelLM, state, label):
    return mlm.step(state, label)


class ScaledSum:
    """Weighted sum of label LMs sharing one hypothesis (decoding fusion)."""

    def __init__(self, parts: Sequence[tuple[float, object]]):
        self.parts = [(float(w), lm) for w, lm in parts if w != 0.0]

    def initial_state(self):
        return tuple(lm.initial_state() for _, lm in self.parts)

    def advance(self, state, label):
        return tuple(lm.advance(s, label) for (_, lm), s in zip(self.parts, state))

    def log_scores(self, state) -> np.ndarray:
        total = 0.0
        for (w, lm), s in zip(self.parts, state):
            total = total + w * np.asarray(lm.log_scores(s))
        return total

    def recomb_key(self, state):
        return tuple(lm.recomb_key(s) for (_, lm), s in zip(self.parts, state))

    def final_score(self, state) -> float:
        return sum(w * lm.final_score(s) for (w, lm), s in zip(self.parts, state))


def label_sequence_score(lm, labels: Sequence[int], final: bool = False) -> float:
    """Sum of label-LM increments along ``labels`` (optionally with the end correction)."""
    state, total = lm.initial_state(), 0.0
    for lab in labels:
        total += float(lm.log_scores(state)[lab])
        state = lm.advance(state, lab)
    if final:
        total += lm.final_score(state)
    return total
