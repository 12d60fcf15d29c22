"""Sequence training criteria with exact gradients.

All losses return a :class:`LossValue` whose ``grads`` match the scorer's
flat parameter vector.  Gradients are obtained by reverse accumulation
through the forward DPs; selections inside the context approximation or the
beam (argmax, pruning) are treated as locally constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .beam import NBestEntry, NBestList, context_key, run_beam
from .core import Utterance
from .lattice_free import SeqScoreConfig, run_lattice_free
from .lm import NGramLM, WordLevelLabelLM, label_sequence_score
from .scorer import numerator_logprob

BACKENDS = ("limited", "approx", "word", "beam")


@dataclass
class LossValue:
    value: float
    grads: np.ndarray

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise FloatingPointError(f"non-finite loss {self.value}")


def edit_distance(a, b) -> tuple[int, int, int, int]:
    """Levenshtein alignment of reference ``a`` against hypothesis ``b``.

    Returns ``(distance, sub, del, ins)``; on equal-cost backtraces a
    substitution is preferred over a deletion, and a deletion over an insertion.
    """
    a, b = list(a), list(b)
    n, m = len(a), len(b)
    d = np.zeros((n + 1, m + 1), dtype=int)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (a[i - 1] != b[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    sub = dele = ins = 0
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (a[i - 1] != b[j - 1]):
            sub += a[i - 1] != b[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(d[n, m]), int(sub), dele, ins


@dataclass(frozen=True)
class CostFunction:
    """Risk between a hypothesis and the reference (edit distance on words or phonemes)."""

    kind: str = "word_edit"

    def __post_init__(self):
        if self.kind not in ("word_edit", "phoneme_edit"):
            raise ValueError(f"unknown cost kind {self.kind!r}")

    def __call__(self, hyp: NBestEntry, ref: NBestEntry) -> float:
        if self.kind == "word_edit":
            return float(edit_distance(ref.words, hyp.words)[0])
        return float(edit_distance(ref.phonemes, hyp.phonemes)[0])


def hypothesis_lm_score(lm, entry: NBestEntry) -> float:
    """Training-LM log score of a list entry: word n-grams see the words (with ``</s>``),
    anything else walks the phoneme labels."""
    if lm is None:
        return 0.0
    if isinstance(lm, NGramLM) and lm.unit == "word":
        return lm.sequence_log_prob(entry.words)
    return label_sequence_score(lm, entry.phonemes)


def _finish(scorer, utt, grad_logp, value) -> LossValue:
    return LossValue(float(value), scorer.backward(utt, grad_logp))


def mmi_lf_loss(
    scorer,
    lm,
    cfg: SeqScoreConfig,
    utt: Utterance,
    backend: str = "limited",
    lexicon=None,
    beam_size: int = 20,
) -> LossValue:
    """-(numerator - denominator) with the same LM and scales on both sides.

    ``backend``: ``limited`` (n-gram, exact), ``approx`` (label LM with
    context approximation), ``word`` (word n-gram + lexicon, approximated),
    ``beam`` (prune-recomb beam of ``beam_size``).
    """
    if backend not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}")
    logp = scorer.log_probs(utt)
    k_s = scorer.context_size
    ref = utt.reference_phonemes
    label_lm = WordLevelLabelLM(lm, lexicon, use_eos=False) if backend == "word" else lm
    if backend == "word" and lexicon is None:
        raise ValueError("the word backend needs a lexicon")

    num, g_num = numerator_logprob(logp, ref, k_s, cfg.alpha, with_grad=True)
    if cfg.beta != 0.0:
        num += cfg.beta * label_sequence_score(label_lm, ref)
    if backend == "beam":
        key_fn = context_key(cfg.recomb_context, getattr(label_lm, "eow", None))
        res = run_beam(logp, k_s, label_lm, cfg.alpha, cfg.beta, beam_size, "prune_recomb", key_fn, with_grad=True)
    else:
        mode = "limited" if backend == "limited" else "approx"
        res = run_lattice_free(logp, k_s, label_lm, cfg, mode, with_grad=True)
    return _finish(scorer, utt, -(g_num - res.grad), -(num - res.log_sum))


def _nbest_scores(scorer, training_lm, nbest: NBestList, utt: Utterance, alpha, beta):
    if nbest.reference is None:
        nbest.reference = utt.reference_phonemes
    if not nbest.reference_included:
        raise ValueError(f"{nbest.utt_id}: reference missing from the N-best list")
    logp = scorer.log_probs(utt)
    q, grads = [], []
    for h in nbest.hyps:
        am, g = numerator_logprob(logp, h.phonemes, scorer.context_size, alpha, with_grad=True)
        lm_part = beta * hypothesis_lm_score(training_lm, h) if beta else 0.0
        q.append(am + lm_part)
        grads.append(g)
    q = np.array(q)
    ref_idx = next(i for i, h in enumerate(nbest.hyps) if h.phonemes == nbest.reference)
    return q, grads, ref_idx


def mmi_nbest_loss(scorer, training_lm, nbest: NBestList, utt: Utterance, alpha=1.0, beta=0.0) -> LossValue:
    """-log of the reference's share of ``sum_h q(h)`` over the static list."""
    q, grads, r = _nbest_scores(scorer, training_lm, nbest, utt, alpha, beta)
    log_z = np.logaddexp.reduce(q)
    post = np.exp(q - log_z)
    g = -grads[r] + sum(p * gh for p, gh in zip(post, grads))
    return _finish(scorer, utt, g, -(q[r] - log_z))


def mbr_nbest_loss(
    scorer,
    training_lm,
    nbest: NBestList,
    utt: Utterance,
    alpha=1.0,
    beta=0.0,
    cost: Callable | None = None,
) -> LossValue:
    """Expected cost under the renormalised list posterior."""
    cost = cost or CostFunction("word_edit")
    q, grads, r = _nbest_scores(scorer, training_lm, nbest, utt, alpha, beta)
    ref = nbest.hyps[r]
    ref = NBestEntry(utt.reference_words or ref.words, ref.phonemes, ref.score)
    costs = np.array([cost(h, ref) for h in nbest.hyps], dtype=float)
    post = np.exp(q - np.logaddexp.reduce(q))
    risk = float(post @ costs)
    g = sum(p * (c - risk) * gh for p, c, gh in zip(post, costs, grads))
    return _finish(scorer, utt, g, risk)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    n_samples: int | None = None,
    rng=None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Central finite differences on (a sample of) coordinates.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = np.asarray(params, dtype=float)
    value, grad = loss_fn(params)
    if not math.isfinite(value):
        raise FloatingPointError("loss is not finite at the check point")
    idx = np.arange(params.size)
    if n_samples is not None and n_samples < params.size:
        rng = np.random.default_rng(rng)
        idx = np.sort(rng.choice(params.size, n_samples, replace=False))
    numeric = np.empty(len(idx))
    for n, i in enumerate(idx):
        p = params.copy()
        p[i] += epsilon
        up = loss_fn(p)[0]
        p[i] -= 2 * epsilon
        down = loss_fn(p)[0]
        numeric[n] = (up - down) / (2 * epsilon)
    analytic = np.asarray(grad)[idx]
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    worst = float(rel.max()) if len(rel) else 0.0
    return GradCheckReport(worst, worst <= tolerance, idx, analytic, numeric)


def scorer_loss_fn(scorer, loss: Callable[[object], LossValue]):
    """Adapter turning ``loss(scorer) -> LossValue`` into ``f(flat params) -> (value, grad)``."""

    def fn(flat):
        old = scorer.get_flat_params()
        scorer.set_flat_params(flat)
        try:
            lv = loss(scorer)
        finally:
            scorer.set_flat_params(old)
        return lv.value, lv.grads

    return fn
