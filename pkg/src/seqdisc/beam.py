"""Time-synchronous beam search over alignments.

One frame expands every hypothesis by blank and by every label.  Three
pruning regimes share the machinery:

* ``prune_single``: keep the B best individual alignments.
* ``prune_recomb``: first log-sum-merge candidates with the same
  recombination key (last-k labels plus the within-word suffix when the LM
  is word aware), then keep the B best merged groups.
* ``sequence``: merge only identical label sequences (N-best / decoding).

A merged group keeps the label history and LM state of its best member.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import PhonemeAlphabet, Utterance, logsumexp
from .lm import label_sequence_score, labels_to_words
from .scorer import context_index, last_context, numerator_logprob

MODES = ("prune_single", "prune_recomb", "sequence")


@dataclass
class BeamHypothesis:
    label_history: tuple
    lm_state: object
    score: float
    am_score: float = 0.0
    lm_score: float = 0.0

    def within_word(self, eow) -> tuple:
        labels = self.label_history
        i = len(labels)
        while i > 0 and labels[i - 1] not in eow:
            i -= 1
        return labels[i:]


class _NullLM:
    def initial_state(self):
        return ()

    def advance(self, state, label):
        return ()

    def recomb_key(self, state):
        return ()

    def final_score(self, state):
        return 0.0


def context_key(k: int, eow=None) -> Callable[[tuple], tuple]:
    """Recombination key: last ``k`` labels, plus the within-word suffix if ``eow`` is given."""

    def key(labels):
        ctx = last_context(labels, k)
        if eow is None:
            return ctx
        i = len(labels)
        while i > 0 and labels[i - 1] not in eow:
            i -= 1
        return ctx, labels[i:]

    return key


def sequence_key(labels):
    return labels


@dataclass
class BeamResult:
    hyps: list
    log_sum: float
    grad: np.ndarray | None = None
    frames: list = field(default_factory=list)


def beam_step(hyps, logp_t, k_s, lm, alpha, beta, beam_size, mode, key_fn=None):
    """Expand ``hyps`` by one frame and prune.

    Returns ``(new_hyps, edges)``; each edge is
    ``(parent, child, am_context, output, lm_term)`` for the surviving children.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if beam_size < 1:
        raise ValueError("beam size must be >= 1")
    lm = lm if lm is not None else _NullLM()
    V = logp_t.shape[1] - 1
    use_lm = beta != 0.0 and not isinstance(lm, _NullLM)
    H = len(hyps)
    ctxs = np.array([context_index(last_context(h.label_history, k_s), V) for h in hyps])
    rows = logp_t[ctxs]  # [H, V+1]
    lm_terms = np.zeros((H, V))
    if use_lm:
        for i, h in enumerate(hyps):
            lm_terms[i] = beta * np.asarray(lm.log_scores(h.lm_state))
    base = np.array([h.score for h in hyps])
    cand = np.empty((H, V + 1))
    cand[:, V] = base + alpha * rows[:, V]
    cand[:, :V] = base[:, None] + alpha * rows[:, :V] + lm_terms

    if mode == "prune_single":
        flat = cand.ravel()
        finite = np.flatnonzero(np.isfinite(flat))
        order = finite[np.lexsort((finite, -flat[finite]))][:beam_size]
        groups = [[int(i)] for i in order]
        group_scores = [float(flat[i]) for i in order]
    else:
        key_fn = key_fn or sequence_key
        by_key: dict = {}
        for i, h in enumerate(hyps):
            labels = h.label_history
            for o in range(V + 1):
                s = cand[i, o]
                if s == -np.inf:
                    continue
                key = key_fn(labels if o == V else labels + (o,))
                by_key.setdefault(key, []).append(i * (V + 1) + o)
        merged = []
        for members in by_key.values():
            vals = cand.ravel()[members]
            best = members[int(np.argmax(vals))]
            merged.append((logsumexp(vals), best, members))
        merged.sort(key=lambda g: (-g[0], g[1]))
        merged = merged[:beam_size]
        groups = [[g[1]] + [m for m in g[2] if m != g[1]] for g in merged]
        group_scores = [g[0] for g in merged]

    new_hyps, edges = [], []
    for j, (members, score) in enumerate(zip(groups, group_scores)):
        i, o = divmod(members[0], V + 1)
        parent = hyps[i]
        if o == V:
            labels, state = parent.label_history, parent.lm_state
            am = parent.am_score + rows[i, V]
            lmv = parent.lm_score
        else:
            labels = parent.label_history + (o,)
            state = lm.advance(parent.lm_state, o)
            am = parent.am_score + rows[i, o]
            lmv = parent.lm_score + (lm_terms[i, o] / beta if use_lm else 0.0)
        new_hyps.append(BeamHypothesis(labels, state, score, am, lmv))
        for m in members:
            pi, po = divmod(m, V + 1)
            edges.append((pi, j, int(ctxs[pi]), po, float(lm_terms[pi, po]) if po < V else 0.0))
    return new_hyps, edges


def run_beam(logp, k_s, lm, alpha, beta, beam_size, mode, key_fn=None, with_grad=False) -> BeamResult:
    T = logp.shape[0]
    lm_ = lm if lm is not None else _NullLM()
    hyps = [BeamHypothesis((), lm_.initial_state(), 0.0)]
    fwd = [np.zeros(1)]
    all_edges = []
    for t in range(T):
        hyps, edges = beam_step(hyps, logp[t], k_s, lm, alpha, beta, beam_size, mode, key_fn)
        all_edges.append(edges)
        fwd.append(np.array([h.score for h in hyps]))
    log_sum = logsumexp(fwd[-1])
    grad = None
    if with_grad:
        grad = _beam_backward(logp, fwd, all_edges, alpha, log_sum)
    return BeamResult(hyps, log_sum, grad)


def _beam_backward(logp, fwd, all_edges, alpha, log_sum):
    T, _, O = logp.shape
    grad = np.zeros_like(logp)
    bwd = np.zeros(len(fwd[T]))
    for t in range(T - 1, -1, -1):
        edges = all_edges[t]
        new_b = np.full(len(fwd[t]), -np.inf)
        if edges:
            par, child, ctx, out, lmt = (np.array(col) for col in zip(*edges))
            edge = alpha * logp[t, ctx, out] + lmt
            post = np.exp(fwd[t][par] + edge + bwd[child] - log_sum)
            np.add.at(grad[t], (ctx, out), alpha * post)
            contrib = edge + bwd[child]
            for p in np.unique(par):
                new_b[p] = logsumexp(contrib[par == p])
        bwd = new_b
    return grad


def beam_denominator(scorer, lm, cfg, beam_size=20, mode="prune_recomb", utt=None) -> float:
    """Beam approximation of the denominator sum (no end-of-utterance LM term)."""
    key_fn = context_key(cfg.recomb_context, getattr(lm, "eow", None)) if mode == "prune_recomb" else None
    res = run_beam(scorer.log_probs(utt), scorer.context_size, lm, cfg.alpha, cfg.beta, beam_size, mode, key_fn)
    return res.log_sum


# -- N-best lists -------------------------------------------------------------------
@dataclass(frozen=True)
class NBestEntry:
    words: tuple
    phonemes: tuple
    score: float


@dataclass
class NBestList:
    """Static hypothesis space; the reference is contained exactly once."""

    utt_id: str
    hyps: list
    reference: tuple | None = None

    def __post_init__(self):
        phons = [h.phonemes for h in self.hyps]
        if len(set(phons)) != len(phons):
            raise ValueError(f"{self.utt_id}: duplicate phoneme sequences in N-best list")

    @property
    def reference_included(self) -> bool:
        return self.reference is not None and sum(h.phonemes == self.reference for h in self.hyps) == 1

    def __len__(self):
        return len(self.hyps)


def generate_nbest(
    scorer,
    lm,
    utt: Utterance,
    n: int = 4,
    beam_size: int = 20,
    alpha: float = 1.0,
    beta: float = 1.0,
    lexicon=None,
    force_reference: bool = True,
) -> NBestList:
    """Top-``n`` label sequences under ``alpha * AM + beta * LM``, reference forced in.

    With ``force_reference=False`` the raw search output is returned, which is
    what oracle error rates of the search itself are measured on.

    ``lm`` is normally a :class:`~seqdisc.lm.MultiLevelLM`; its end-of-utterance
    correction is included in the ranking score.
    """
    if n < 1 or beam_size < n:
        raise ValueError("need 1 <= n <= beam_size")
    logp = scorer.log_probs(utt)
    res = run_beam(logp, scorer.context_size, lm, alpha, beta, beam_size, "sequence")
    if not res.hyps:
        raise RuntimeError(f"{utt.id}: search produced no hypotheses")
    finals = []
    for h in res.hyps:
        fin = h.score + (beta * lm.final_score(h.lm_state) if beta else 0.0)
        finals.append((fin, h.label_history))
    finals.sort(key=lambda x: (-x[0], x[1]))
    word_lm = getattr(lm, "word_lm", None)
    lexicon = lexicon if lexicon is not None else getattr(lm, "lexicon", None)
    entries = [NBestEntry(_words(lexicon, lab, word_lm), lab, s) for s, lab in finals[:n]]
    ref = utt.reference_phonemes
    if force_reference and all(e.phonemes != ref for e in entries):
        ref_score, _ = numerator_logprob(logp, ref, scorer.context_size, alpha)
        if beta:
            ref_score += beta * label_sequence_score(lm, ref, final=True)
        entries[-1] = NBestEntry(_words(lexicon, ref, word_lm, utt.reference_words), ref, ref_score)
        entries.sort(key=lambda e: (-e.score, e.phonemes))
    return NBestList(utt.id, entries, ref)


def _words(lexicon, labels, word_lm, fallback=()):
    if lexicon is None:
        return tuple(fallback)
    return labels_to_words(lexicon, labels, word_lm)


def save_nbest(lists: Sequence[NBestList], path, alphabet: PhonemeAlphabet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for nb in lists:
            hyps = [
                {"words": " ".join(h.words), "phonemes": " ".join(alphabet.decode(h.phonemes)), "score": h.score}
                for h in nb.hyps
            ]
            fh.write(json.dumps({"id": nb.utt_id, "hyps": hyps}) + "\n")


def load_nbest(path, alphabet: PhonemeAlphabet, references: dict | None = None) -> dict:
    """Map utterance id -> NBestList; ``references`` (id -> phonemes) marks the reference."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            hyps = [
                NBestEntry(tuple(h["words"].split()), alphabet.encode(h["phonemes"].split()), float(h["score"]))
                for h in obj["hyps"]
            ]
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        uid = str(obj["id"])
        out[uid] = NBestList(uid, hyps, (references or {}).get(uid))
    return out


def exhaustive_label_scores(logp, k_s, labels_iter, alpha=1.0):
    """alpha-scaled ``numerator_logprob`` of each candidate sequence; helper for oracles."""
    out = {}
    for labels in labels_iter:
        if len(labels) <= logp.shape[0]:
            out[tuple(labels)] = numerator_logprob(logp, labels, k_s, alpha)[0]
        else:
            out[tuple(labels)] = -math.inf
    return out
