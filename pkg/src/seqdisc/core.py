"""Shared domain types: phoneme alphabets, lexica, utterances and log-space helpers."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

#: Padding symbol used for label contexts shorter than the context size.
BOS = -1
UNK_WORD = "<unk>"
EOW_MARK = "#"


class FormatError(ValueError):
    """Raised when an input file does not follow its declared format."""

    def __init__(self, path, lineno, msg):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")


def logsumexp(xs) -> float:
    """Stable log(sum(exp(xs))); returns -inf for an empty or all -inf input."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        return -math.inf
    m = xs.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(xs - m).sum()))


def logsumexp_axis(xs: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(xs, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(xs - m_safe).sum(axis=axis, keepdims=True)) + m_safe
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class PhonemeAlphabet:
    """Label inventory with a blank appended at id ``len(symbols)``.

    ``symbols`` are the phoneme names; names ending in ``#`` are the
    end-of-word variants unless ``eow`` is given explicitly.
    """

    symbols: tuple[str, ...]
    eow: frozenset[int] = None

    def __post_init__(self):
        if not self.symbols:
            raise ValueError("alphabet needs at least one label")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate phoneme symbols")
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if self.eow is None:
            eow = frozenset(i for i, s in enumerate(self.symbols) if s.endswith(EOW_MARK))
        else:
            eow = frozenset(int(i) for i in self.eow)
        if any(not 0 <= i < len(self.symbols) for i in eow):
            raise ValueError("EOW ids must be labels")
        object.__setattr__(self, "eow", eow)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @classmethod
    def from_symbols(cls, symbols: Iterable[str]) -> "PhonemeAlphabet":
        return cls(tuple(sorted(set(symbols))))

    @property
    def num_labels(self) -> int:
        return len(self.symbols)

    @property
    def blank(self) -> int:
        return len(self.symbols)

    @property
    def eow_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_labels, dtype=bool)
        mask[list(self.eow)] = True
        return mask

    def id(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise KeyError(f"unknown phoneme {symbol!r}") from None

    def encode(self, symbols: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id(s) for s in symbols)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple("<b>" if i == self.blank else self.symbols[i] for i in ids)


@dataclass(frozen=True)
class Lexicon:
    """Pronunciation -> homophone set mapping over an EOW-augmented alphabet."""

    alphabet: PhonemeAlphabet
    entries: dict = field(default_factory=dict)
    unknown_word: str = UNK_WORD

    def __post_init__(self):
        entries = {}
        for pron, words in self.entries.items():
            pron = tuple(pron)
            _check_pron_shape(pron, self.alphabet.eow)
            words = frozenset(words)
            if self.unknown_word in words:
                raise ValueError("the unknown word cannot have a pronunciation")
            entries[pron] = entries.get(pron, frozenset()) | words
        object.__setattr__(self, "entries", entries)
        pron_of = {}
        for pron, words in sorted(entries.items()):
            for w in sorted(words):
                pron_of.setdefault(w, pron)
        object.__setattr__(self, "_pron_of", pron_of)

    @property
    def words(self) -> list[str]:
        return sorted(self._pron_of)

    @property
    def max_pron_length(self) -> int:
        return max((len(p) for p in self.entries), default=0)

    def pronunciation(self, word: str) -> tuple[int, ...]:
        """First (sorted) pronunciation of ``word``."""
        return self._pron_of[word]

    def words_to_labels(self, words: Iterable[str]) -> tuple[int, ...]:
        out: list[int] = []
        for w in words:
            out.extend(self.pronunciation(w))
        return tuple(out)


def _check_pron_shape(pron: Sequence[int], eow) -> None:
    if not pron or pron[-1] not in eow or any(p in eow for p in pron[:-1]):
        raise ValueError(f"pronunciation {tuple(pron)} must end in exactly one EOW phoneme")


def map_pronunciation(lex: Lexicon, pron: Sequence[int]) -> frozenset[str]:
    """Words sharing pronunciation ``pron``; ``{unknown}`` when absent."""
    pron = tuple(pron)
    _check_pron_shape(pron, lex.alphabet.eow)
    return lex.entries.get(pron, frozenset({lex.unknown_word}))


def split_words(labels: Sequence[int], eow) -> tuple[list[tuple[int, ...]], tuple[int, ...]]:
    """Split a label sequence into complete pronunciations and the dangling suffix."""
    prons, cur = [], []
    for lab in labels:
        cur.append(lab)
        if lab in eow:
            prons.append(tuple(cur))
            cur = []
    return prons, tuple(cur)


def collapse(alignment: Sequence[int], blank: int) -> tuple[int, ...]:
    """Drop blanks; repeated labels stay (one label per non-blank frame)."""
    return tuple(y for y in alignment if y != blank)


@dataclass(frozen=True)
class Utterance:
    id: str
    num_frames: int
    reference_phonemes: tuple[int, ...]
    reference_words: tuple[str, ...] = ()
    features: np.ndarray | None = None
    scores: str | None = None

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError(f"{self.id}: num_frames must be positive")
        object.__setattr__(self, "reference_phonemes", tuple(int(p) for p in self.reference_phonemes))
        object.__setattr__(self, "reference_words", tuple(self.reference_words))
        if self.features is not None:
            feats = np.asarray(self.features, dtype=float)
            if feats.ndim != 2 or feats.shape[0] != self.num_frames:
                raise ValueError(f"{self.id}: features must have shape (num_frames, dim)")
            feats.setflags(write=False)
            object.__setattr__(self, "features", feats)

    def frame_features(self, dim: int) -> np.ndarray:
        """Stored features, or fixed pseudo-random ones derived from the id."""
        if self.features is not None:
            if self.features.shape[1] != dim:
                raise ValueError(f"{self.id}: feature dim {self.features.shape[1]} != {dim}")
            return self.features
        rng = np.random.default_rng(zlib.crc32(self.id.encode()))
        return rng.standard_normal((self.num_frames, dim))


def load_lexicon(path, alphabet: PhonemeAlphabet | None = None) -> Lexicon:
    """Read ``word<TAB>ph ph ... ph#`` lines.

    Without an explicit alphabet, one is built from every symbol in the file.
    """
    path = Path(path)
    rows = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1].split():
            raise FormatError(path, lineno, "expected 'word<TAB>phonemes'")
        syms = parts[1].split()
        if not syms[-1].endswith(EOW_MARK) or any(s.endswith(EOW_MARK) for s in syms[:-1]):
            raise FormatError(path, lineno, "pronunciation must end in exactly one '#' phoneme")
        rows.append((lineno, parts[0], syms))
    if alphabet is None:
        if not rows:
            return Lexicon(PhonemeAlphabet(("<none>#",)), {})
        alphabet = PhonemeAlphabet.from_symbols(s for _, _, syms in rows for s in syms)
    entries: dict[tuple[int, ...], set[str]] = {}
    for lineno, word, syms in rows:
        try:
            pron = alphabet.encode(syms)
        except KeyError as exc:
            raise FormatError(path, lineno, str(exc)) from None
        entries.setdefault(pron, set()).add(word)
    return Lexicon(alphabet, entries)


def save_lexicon(lex: Lexicon, path) -> None:
    lines = []
    for pron, words in sorted(lex.entries.items()):
        syms = " ".join(lex.alphabet.decode(pron))
        lines.extend(f"{w}\t{syms}" for w in sorted(words))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_corpus(path, alphabet: PhonemeAlphabet) -> list[Utterance]:
    """Read one JSON object per line (id, num_frames, phonemes, words[, features, scores]).

    ``features`` is either an inline nested list or a ``.npy`` path relative
    to the corpus file.
    """
    path = Path(path)
    utts = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            feats = obj.get("features")
            if isinstance(feats, str):
                feats = np.load(path.parent / feats)
            scores = obj.get("scores")
            if scores is not None:
                scores = str(path.parent / scores)
            utts.append(
                Utterance(
                    id=str(obj["id"]),
                    num_frames=int(obj["num_frames"]),
                    reference_phonemes=alphabet.encode(obj.get("phonemes", "").split()),
                    reference_words=tuple(obj.get("words", "").split()),
                    features=feats,
                    scores=scores,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(path, lineno, str(exc)) from None
    return utts


def save_corpus(utts: Sequence[Utterance], path, alphabet: PhonemeAlphabet, inline_features=True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            obj = {
                "id": u.id,
                "num_frames": u.num_frames,
                "phonemes": " ".join(alphabet.decode(u.reference_phonemes)),
                "words": " ".join(u.reference_words),
            }
            if inline_features and u.features is not None:
                obj["features"] = np.round(u.features, 6).tolist()
            if u.scores is not None:
                obj["scores"] = u.scores
            fh.write(json.dumps(obj) + "\n")
