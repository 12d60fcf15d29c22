"""Lattice-free denominator sums over every label sequence.

States are BOS-padded label contexts of length ``recomb_context`` (indexed as
in :func:`seqdisc.scorer.context_index`).  Per frame a state either loops on
blank or moves to the context extended by a label; label moves carry
``alpha * AM + beta * LM``.  The *limited* variant queries an n-gram with the
state's own context; the *approx* variant carries one representative full
history per state, chosen by the best single predecessor, and queries a
label LM with it.  The sum itself is always exact over the recombined
trellis; only the LM conditioning is approximated.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import BOS, Lexicon, logsumexp, logsumexp_axis, split_words
from .lm import NGramLM, WordLevelLabelLM
from .scorer import context_index, context_tuple, last_context, num_contexts


@dataclass(frozen=True)
class SeqScoreConfig:
    alpha: float = 1.0
    beta: float = 0.0
    top_j: int | None = None
    recomb_context: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if self.top_j is not None and self.top_j < 1:
            raise ValueError("top_j must be >= 1")
        if self.recomb_context < 0:
            raise ValueError("recomb_context must be >= 0")


@dataclass
class ApproxState:
    """One recombined context with its representative full history."""

    context_key: tuple
    q: float
    c_tilde: tuple
    lm_state: object = None
    eow: frozenset = frozenset()

    @property
    def c_h(self) -> tuple:
        prons, _ = split_words(self.c_tilde, self.eow)
        return tuple(p for pron in prons for p in pron)

    @property
    def c_w(self) -> tuple:
        return split_words(self.c_tilde, self.eow)[1]


@dataclass
class DenominatorResult:
    log_sum: float
    grad: np.ndarray | None = None
    frames: list = field(default_factory=list)  # per frame: list[ApproxState]


def top_j_select(states: Mapping[tuple, float], j: int) -> dict:
    """Keep the ``j`` highest-scoring full-length contexts; ties go to the smaller key.

    Contexts still padded with BOS (fewer than k labels emitted) are not
    counted against ``j`` and always survive, so ``j = V**k`` is exact.
    """
    if j < 1:
        raise ValueError("J must be >= 1")
    partial = {c: s for c, s in states.items() if BOS in c}
    full = sorted(((c, s) for c, s in states.items() if BOS not in c), key=lambda kv: (-kv[1], kv[0]))
    return {**partial, **dict(full[:j])}


def _top_j_mask(q: np.ndarray, j: int, n_partial: int) -> np.ndarray:
    # indices below n_partial start with BOS and are exempt from pruning
    finite = n_partial + np.flatnonzero(np.isfinite(q[n_partial:]))
    if len(finite) <= j:
        return q
    # context indices are monotone in key order, so index breaks ties
    order = np.lexsort((finite, -q[finite]))
    out = q.copy()
    drop = finite[order[j:]]
    out[drop] = -np.inf
    return out


def _scaled(beta, lm_scores):
    if beta == 0.0:
        return np.zeros_like(lm_scores)
    return beta * lm_scores


def _check_contexts(k_s, cfg, lm, mode):
    if k_s > cfg.recomb_context:
        raise ValueError(f"scorer context {k_s} exceeds recombination context {cfg.recomb_context}")
    if mode == "limited":
        if not isinstance(lm, NGramLM):
            raise TypeError("the limited-context DP needs an NGramLM")
        if lm.context_length > cfg.recomb_context:
            raise ValueError(
                f"LM context {lm.context_length} exceeds recombination context {cfg.recomb_context}"
            )


def run_lattice_free(logp, k_s, lm, cfg: SeqScoreConfig, mode="limited", with_grad=False, keep_frames=False):
    """Shared forward(-backward) for the limited and approximated DPs."""
    _check_contexts(k_s, cfg, lm, mode)
    T, _, O = logp.shape
    V = O - 1
    k = cfg.recomb_context
    alpha, beta = cfg.alpha, cfg.beta
    C = num_contexts(V, k)
    ctx_tuples = [context_tuple(c, V, k) for c in range(C)]
    am_idx = np.array([context_index(ct[len(ct) - k_s :] if k_s else (), V) for ct in ctx_tuples])
    if k == 0:
        tgt = np.zeros((C, V), dtype=int)
    else:
        R = C // (V + 1)
        tgt = (np.arange(C)[:, None] % R) * (V + 1) + np.arange(1, V + 1)[None, :]

    q = np.full(C, -np.inf)
    q[0] = 0.0
    approx = mode != "limited"
    lm_states = {0: lm.initial_state()} if approx else None
    hist = {0: ()} if approx else None
    qs, lm_terms, frames = [q], [], []
    if keep_frames:
        frames.append(_snapshot(q, ctx_tuples, hist, lm_states, lm))

    for t in range(T):
        active = np.flatnonzero(np.isfinite(q))
        lm_t = np.zeros((C, V))
        if beta != 0.0:
            for c in active:
                scores = lm.log_scores(lm_states[c]) if approx else lm.log_dist(ctx_tuples[c])
                lm_t[c] = scores
        lm_term = _scaled(beta, lm_t)
        blank = q + alpha * logp[t, am_idx, V]
        lab = q[:, None] + alpha * logp[t, am_idx, :V] + lm_term
        if k == 0:
            new_q = np.array([np.logaddexp(blank[0], logsumexp(lab[0]))])
        else:
            stacked = lab.reshape(V + 1, R, V)
            into = logsumexp_axis(stacked, 0).ravel()
            new_q = blank.copy()
            targets = tgt[:R].ravel()
            new_q[targets] = np.logaddexp(new_q[targets], into)
        if approx:
            lm_states, hist = _update_contexts(new_q, blank, lab, k, V, lm, lm_states, hist)
        if cfg.top_j is not None:
            new_q = _top_j_mask(new_q, cfg.top_j, C // (V + 1) if k else 0)
        q = new_q
        qs.append(q)
        lm_terms.append(lm_term)
        if keep_frames:
            frames.append(_snapshot(q, ctx_tuples, hist, lm_states, lm))

    log_sum = logsumexp(q)
    grad = None
    if with_grad:
        grad = _backward(logp, qs, lm_terms, am_idx, tgt, alpha, log_sum)
    return DenominatorResult(log_sum, grad, frames)


def _update_contexts(new_q, blank, lab, k, V, lm, lm_states, hist):
    """Best-predecessor choice per reached context; blank wins ties, then smaller ids."""
    new_states, new_hist = {}, {}
    if k == 0:
        if np.isfinite(new_q[0]):
            v = int(np.argmax(lab[0]))
            if lab[0, v] > blank[0]:
                new_states[0] = lm.advance(lm_states[0], v)
                new_hist[0] = hist[0] + (v,)
            else:
                new_states[0], new_hist[0] = lm_states[0], hist[0]
        return new_states, new_hist
    R = lab.shape[0] // (V + 1)
    stacked = lab.reshape(V + 1, R, V)
    for c in np.flatnonzero(np.isfinite(new_q)):
        c = int(c)
        digit = c % (V + 1)
        best_lab, d = -np.inf, -1
        if digit:
            col = stacked[:, c // (V + 1), digit - 1]
            d = int(np.argmax(col))
            best_lab = col[d]
        if d >= 0 and best_lab > blank[c]:
            pred = d * R + c // (V + 1)
            new_states[c] = lm.advance(lm_states[pred], digit - 1)
            new_hist[c] = hist[pred] + (digit - 1,)
        else:
            new_states[c], new_hist[c] = lm_states[c], hist[c]
    return new_states, new_hist


def _snapshot(q, ctx_tuples, hist, lm_states, lm):
    eow = getattr(lm, "eow", frozenset())
    out = []
    for c in np.flatnonzero(np.isfinite(q)):
        c = int(c)
        out.append(
            ApproxState(
                context_key=ctx_tuples[c],
                q=float(q[c]),
                c_tilde=hist[c] if hist is not None else (),
                lm_state=lm_states[c] if lm_states is not None else None,
                eow=eow,
            )
        )
    return out


def _backward(logp, qs, lm_terms, am_idx, tgt, alpha, log_sum):
    T, _, O = logp.shape
    V = O - 1
    grad = np.zeros_like(logp)
    b = np.where(np.isfinite(qs[T]), 0.0, -np.inf)
    lab_cols = np.broadcast_to(np.arange(V), tgt.shape)
    am_rows = np.broadcast_to(am_idx[:, None], tgt.shape)
    for t in range(T - 1, -1, -1):
        q_prev = qs[t]
        blank_e = alpha * logp[t, am_idx, V]
        lab_e = alpha * logp[t, am_idx, :V] + lm_terms[t]
        b_lab = b[tgt]
        post_blank = np.exp(q_prev + blank_e + b - log_sum)
        post_lab = np.exp(q_prev[:, None] + lab_e + b_lab - log_sum)
        np.add.at(grad[t], (am_idx, V), alpha * post_blank)
        np.add.at(grad[t], (am_rows, lab_cols), alpha * post_lab)
        b_new = np.logaddexp(blank_e + b, logsumexp_axis(lab_e + b_lab, 1))
        b = np.where(np.isfinite(q_prev), b_new, -np.inf)
    return grad


def _log_probs(scorer, utt):
    return scorer.log_probs(utt)


def lf_denominator_limited(scorer, lm: NGramLM, cfg: SeqScoreConfig, utt=None) -> float:
    """Exact sum of q over all label sequences for an n-gram with context <= k."""
    return run_lattice_free(_log_probs(scorer, utt), scorer.context_size, lm, cfg, "limited").log_sum


def lf_denominator_approx(scorer, lm, cfg: SeqScoreConfig, utt=None) -> float:
    """Same trellis, LM queried with each state's best-predecessor history."""
    return run_lattice_free(_log_probs(scorer, utt), scorer.context_size, lm, cfg, "approx").log_sum


def lf_denominator_word(scorer, word_lm: NGramLM, lexicon: Lexicon, cfg: SeqScoreConfig, utt=None) -> float:
    """Approximated DP with word-LM scores applied only on EOW labels."""
    lm = WordLevelLabelLM(word_lm, lexicon, use_eos=False)
    return run_lattice_free(_log_probs(scorer, utt), scorer.context_size, lm, cfg, "approx").log_sum


def alignment_score(logp, k_s, lm, alignment, alpha=1.0, beta=0.0) -> float:
    """alpha * AM + beta * LM of one alignment with its exact label history."""
    V = logp.shape[2] - 1
    labels, total = [], 0.0
    state = lm.initial_state() if lm is not None and beta else None
    for t, y in enumerate(alignment):
        c = context_index(last_context(labels, k_s), V)
        total += alpha * logp[t, c, y]
        if y != V:
            if state is not None:
                total += beta * float(lm.log_scores(state)[y])
                state = lm.advance(state, y)
            labels.append(y)
    return total


def brute_force_denominator(scorer, lm, cfg: SeqScoreConfig, utt=None, budget: int = 2_000_000) -> float:
    """Enumerate every alignment in (V + blank)^T with exact full-history LM scores."""
    logp = _log_probs(scorer, utt)
    T, _, O = logp.shape
    V = O - 1
    if T * math.log(O) > math.log(budget):
        raise ValueError(f"{O}^{T} alignments exceed the enumeration budget {budget}")
    k_s = scorer.context_size
    use_lm = lm is not None and cfg.beta != 0.0
    scores = []

    def walk(t, labels, state, acc):
        if t == T:
            scores.append(acc)
            return
        c = context_index(last_context(labels, k_s), V)
        walk(t + 1, labels, state, acc + cfg.alpha * logp[t, c, V])
        lm_row = lm.log_scores(state) if use_lm else None
        for v in range(V):
            inc = cfg.alpha * logp[t, c, v]
            nxt = state
            if use_lm:
                inc += cfg.beta * float(lm_row[v])
                nxt = lm.advance(state, v)
            walk(t + 1, labels + (v,), nxt, acc + inc)

    walk(0, (), lm.initial_state() if use_lm else None, 0.0)
    return logsumexp(scores)


def all_label_sequences(num_labels: int, max_len: int):
    """Every label sequence of length 0..max_len (small cases only)."""
    for n in range(max_len + 1):
        yield from itertools.product(range(num_labels), repeat=n)


def dump_dp_table(result: DenominatorResult, fh, symbols=None, utt_id=None) -> None:
    """Write one JSON line per (frame, context): Q and the representative history."""

    def name(x):
        if x == BOS:
            return "<s>"
        return symbols[x] if symbols is not None else x

    for t, states in enumerate(result.frames):
        for st in states:
            rec = {} if utt_id is None else {"id": utt_id}
            rec |= {
                "frame": t,
                "context": [name(x) for x in st.context_key],
                "Q": st.q,
                "C": [name(x) for x in st.c_tilde],
            }
            fh.write(json.dumps(rec) + "\n")
