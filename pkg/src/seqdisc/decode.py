"""Recognition with external/internal LM fusion and WER scoring."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_DOWN, Decimal
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_scorer
from .beam import run_beam
from .core import Utterance, logsumexp_axis
from .lattice_free import all_label_sequences
from .lm import ContextTableLM, MultiLevelLM, ScaledSum, label_sequence_score, labels_to_words
from .losses import edit_distance
from .scorer import numerator_logprob


@dataclass(frozen=True)
class DecodeConfig:
    lambda1: float = 0.0
    lambda2: float = 0.0
    beam_size: int = 20
    use_eos: bool = True

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)):
            raise ValueError("LM scales must be finite")


def ilm_zero_encoder(scorer) -> ContextTableLM:
    """Label prior of the scorer with zeroed frame features, blank removed and renormalised."""
    if not hasattr(scorer, "zero_encoder_log_probs"):
        raise TypeError("zero-encoder ILM needs a scorer with frame-feature input")
    table = scorer.zero_encoder_log_probs()
    labels = table[:, :-1]
    mass = logsumexp_axis(labels, -1)
    if not np.all(np.isfinite(mass)):
        raise ValueError("degenerate context: all probability mass on blank")
    return ContextTableLM(labels - mass[:, None], scorer.context_size)


def fusion_lm(elm, lexicon, cfg: DecodeConfig, ilm=None, phoneme_lm=None):
    """lambda1 * (multi-level ELM) - lambda2 * ILM as one label LM, or None."""
    parts = []
    if cfg.lambda1 != 0.0:
        parts.append((cfg.lambda1, MultiLevelLM(phoneme_lm, elm, lexicon, use_eos=cfg.use_eos)))
    if cfg.lambda2 != 0.0:
        if ilm is None:
            raise ValueError("lambda2 != 0 needs an ILM")
        parts.append((-cfg.lambda2, ilm))
    return ScaledSum(parts) if parts else None


def recognize_labels(scorer, elm, ilm, cfg: DecodeConfig, utt: Utterance, lexicon, phoneme_lm=None):
    """Best label sequence and its fused score (alignments summed per label sequence)."""
    lm = fusion_lm(elm, lexicon, cfg, ilm, phoneme_lm)
    res = run_beam(scorer.log_probs(utt), scorer.context_size, lm, 1.0, 1.0, cfg.beam_size, "sequence")
    best, best_score = (), -np.inf
    for h in res.hyps:
        s = h.score + (lm.final_score(h.lm_state) if lm is not None else 0.0)
        if s > best_score or (s == best_score and h.label_history < best):
            best, best_score = h.label_history, s
    return best, best_score


def recognize(scorer, elm, ilm, cfg: DecodeConfig, utt: Utterance, lexicon, phoneme_lm=None) -> tuple:
    labels, _ = recognize_labels(scorer, elm, ilm, cfg, utt, lexicon, phoneme_lm)
    return labels_to_words(lexicon, labels, elm)


def exhaustive_recognize(scorer, elm, ilm, cfg: DecodeConfig, utt: Utterance, lexicon, phoneme_lm=None):
    """Score every label sequence of length <= T exactly; oracle for small cases."""
    logp = scorer.log_probs(utt)
    lm = fusion_lm(elm, lexicon, cfg, ilm, phoneme_lm)
    best, best_score = (), -np.inf
    for labels in all_label_sequences(logp.shape[2] - 1, logp.shape[0]):
        s = numerator_logprob(logp, labels, scorer.context_size)[0]
        if lm is not None:
            s += label_sequence_score(lm, labels, final=True)
        if s > best_score or (s == best_score and labels < best):
            best, best_score = labels, s
    return best, best_score


class Recognizer(BaseEstimator):
    """``predict`` maps utterances to word sequences under the fused decision rule."""

    def __init__(
        self,
        scorer=None,
        elm=None,
        lexicon=None,
        ilm=None,
        phoneme_lm=None,
        lambda1=0.0,
        lambda2=0.0,
        beam_size=20,
        use_eos=True,
        n_jobs=1,
    ):
        self.scorer = scorer
        self.elm = elm
        self.lexicon = lexicon
        self.ilm = ilm
        self.phoneme_lm = phoneme_lm
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.beam_size = beam_size
        self.use_eos = use_eos
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None) -> "Recognizer":
        del X, y
        if self.scorer is None or self.lexicon is None:
            raise ValueError("Recognizer needs a scorer and a lexicon")
        check_scorer(self.scorer)
        self.config_ = DecodeConfig(self.lambda1, self.lambda2, self.beam_size, self.use_eos)
        self.ilm_ = self.ilm
        if self.ilm_ is None and self.lambda2 != 0.0:
            self.ilm_ = ilm_zero_encoder(self.scorer)
        return self

    def predict(self, utterances: Sequence[Utterance]) -> list[tuple]:
        if not hasattr(self, "config_"):
            self.fit()
        check_is_fitted(self, "config_")

        def one(u):
            return recognize(self.scorer, self.elm, self.ilm_, self.config_, u, self.lexicon, self.phoneme_lm)

        return parallel_map(one, utterances, self.n_jobs)

    def evaluate(self, utterances: Sequence[Utterance]) -> "WerBreakdown":
        hyps = self.predict(utterances)
        return score_wer({u.id: u.reference_words for u in utterances}, {u.id: h for u, h in zip(utterances, hyps)})


def parallel_map(fn, items, n_jobs=1) -> list:
    """Ordered map; results never depend on ``n_jobs``."""
    items = list(items)
    if n_jobs is None or n_jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


# -- WER --------------------------------------------------------------------------
@dataclass(frozen=True)
class WerBreakdown:
    sub: int
    dele: int
    ins: int
    ref_tokens: int

    @property
    def errors(self) -> int:
        return self.sub + self.dele + self.ins

    @property
    def wer(self) -> float:
        if self.ref_tokens == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return 100.0 * self.errors / self.ref_tokens

    def rate(self, count: int) -> float:
        return 100.0 * count / self.ref_tokens if self.ref_tokens else 0.0

    @staticmethod
    def fmt(x: float) -> str:
        """One decimal, ties rounded down."""
        return str(Decimal(repr(x)).quantize(Decimal("0.1"), rounding=ROUND_HALF_DOWN))

    def row(self, dataset: str) -> dict:
        return {
            "dataset": dataset,
            "Sub": self.fmt(self.rate(self.sub)),
            "Del": self.fmt(self.rate(self.dele)),
            "Ins": self.fmt(self.rate(self.ins)),
            "WER": self.fmt(self.wer),
        }


def score_wer(refs: Mapping[str, Sequence[str]], hyps: Mapping[str, Sequence[str]]) -> WerBreakdown:
    """Corpus WER by summing per-utterance Levenshtein components."""
    if set(refs) != set(hyps):
        missing = sorted(set(refs) ^ set(hyps))
        raise ValueError(f"reference and hypothesis ids differ: {missing[:5]}")
    sub = dele = ins = n = 0
    for uid in sorted(refs):
        _, s, d, i = edit_distance(refs[uid], hyps[uid])
        sub, dele, ins, n = sub + s, dele + d, ins + i, n + len(refs[uid])
    return WerBreakdown(sub, dele, ins, n)


def format_wer_table(rows: Sequence[dict], as_csv: bool = False) -> str:
    cols = ["dataset", "Sub", "Del", "Ins", "WER"]
    if as_csv:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols).rstrip()]
    lines += ["  ".join(str(r[c]).ljust(widths[c]) for c in cols).rstrip() for r in rows]
    return "\n".join(lines) + "\n"
